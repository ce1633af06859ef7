//! Cycle-accurate, bit-exact model of the compiled parser pipeline.
//!
//! Structure mirrors the plan: one stage per graph level, each stage holding
//! one engine per header at that level, a register after every stage and one
//! output register after the final mux. A bus word travels one stage per
//! cycle, so the first word of a packet exits exactly `depth_cycles` after
//! it entered.
//!
//! Each engine runs three blocks per cycle: state transition (key match),
//! header extraction (PHV accumulation plus size detection) and pipeline
//! alignment (shifting the consumed header out of the stream). The
//! next-header id rides alongside every data word; an engine processes a
//! word only when that id equals its own, otherwise the stage passes data
//! through untouched.
//!
//! One wrinkle of the bus-aligned datapath: when a frame ends, the tail of
//! its last word can only be emitted on the following cycle (the alignment
//! needs the delayed word). That trailing word slots into the next packet's
//! pre-boundary filler slot or an idle cycle; a tiny per-stage queue absorbs
//! the rare collision with a bypass stream.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use thiserror::Error;

use crate::bits::Bits;
use crate::layout::{DefaultAction, HeaderLayout, PipelinePlan};
use crate::model::HeaderId;

pub type PacketId = u64;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("empty packet")]
    EmptyPacket,
    #[error("packet {0} started before the previous packet ended")]
    PacketOverlap(PacketId),
    #[error("word for packet {0} arrived without a preceding start word")]
    MissingStart(PacketId),
    #[error("input gap in the middle of packet {0}")]
    MidPacketGap(PacketId),
    #[error("pipeline failed to drain within {0} cycles")]
    DrainTimeout(u64),
}

/// One clock cycle's slice of the packet stream plus its metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BusWord {
    pub data: Bits,
    pub start: bool,
    pub end: bool,
    pub valid: bool,
    pub packet_id: PacketId,
    /// Meaningful bits in this word; equals the bus width except possibly on
    /// the end word.
    pub valid_bits: usize,
}

/// Parsed header vector for one header of one packet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Phv {
    pub header_id: HeaderId,
    pub header: String,
    pub packet_id: PacketId,
    pub bits: Bits,
    pub bit_count: usize,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExceptionKind {
    /// Key matched no table entry and the default action is reject.
    UnknownKey { value: u64 },
    /// Size-field value outside the size LUT domain.
    InvalidSize { value: u64 },
    /// Header claims bits beyond the packet end.
    Truncated,
    /// Keyless state whose default action is reject.
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExceptionEvent {
    pub packet_id: PacketId,
    pub header_id: HeaderId,
    pub header: String,
    pub kind: ExceptionKind,
    pub cycle: u64,
}

/// Per-engine registers and per-packet bookkeeping.
#[derive(Debug, Clone, Default)]
pub struct EngineState {
    pub received_bits: u64,
    pub received_words: u32,
    pub phv_accum: Bits,
    pub header_size_latched: Option<u32>,
    pub delay_reg: Option<Bits>,
    pub header_valid: bool,
    pub done: bool,
    // bookkeeping past the hardware registers
    active_packet: Option<PacketId>,
    nh_resolved: bool,
    nh_out: Option<HeaderId>,
    nh_valid: bool,
    /// Transition failed (unknown key / reject): nothing runs downstream,
    /// but the header itself still extracts.
    tx_exception: bool,
    /// Rejected key value, reported only if the header completes intact; a
    /// truncated or malformed header outranks the transition failure.
    pending_tx_kind: Option<ExceptionKind>,
    /// Data is unusable (bad size field, truncation): extraction and
    /// alignment both stop.
    data_exception: bool,
    phv_emitted: bool,
    frame_bits: u64,
    align_word_idx: u32,
    aligned_words_out: u32,
    aligned_end_sent: bool,
    size_field_value: Option<u64>,
    flush_pending: Option<ChannelWord>,
}

/// A bus word plus the next-header id resolved by the upstream stage.
#[derive(Debug, Clone)]
struct ChannelWord {
    word: BusWord,
    next_header: Option<HeaderId>,
}

pub struct StateTransitionOut {
    pub next_header_out: Option<HeaderId>,
    pub next_header_valid: bool,
    pub header_exception: bool,
    pub valid_header: bool,
}

/// State transition block: compares the incoming next-header id with the
/// engine's own, and on the key word extracts the key and consults the match
/// table. Outputs hold their previous values until the key word arrives.
pub fn state_transition_step(
    layout: &HeaderLayout,
    st: &mut EngineState,
    w: &BusWord,
    next_header_in: Option<HeaderId>,
) -> StateTransitionOut {
    let valid_header = next_header_in == Some(layout.this_header);
    st.header_valid = valid_header;
    if !valid_header {
        // pass-through: the word belongs to some other engine
        return StateTransitionOut {
            next_header_out: next_header_in,
            next_header_valid: next_header_in.is_some(),
            header_exception: false,
            valid_header,
        };
    }
    let mut exception = false;
    if !st.nh_resolved {
        match (&layout.key_word_index, layout.key_location_bits) {
            (Some(kw), Some(loc)) if *kw == st.received_words => {
                let bus = w.data.len() as u32;
                let width = layout.key_width_bits.unwrap_or(0);
                let value =
                    w.data.read_u64((loc % bus) as usize, width as usize) & layout.key_mask.unwrap_or(u64::MAX);
                match layout.match_table.iter().find(|e| e.value == value) {
                    Some(e) => {
                        st.nh_out = Some(e.next);
                        st.nh_valid = true;
                    }
                    None => match layout.default_action {
                        DefaultAction::Goto { next } => {
                            st.nh_out = Some(next);
                            st.nh_valid = true;
                        }
                        DefaultAction::End => {
                            st.nh_out = None; // END: parse complete, nothing downstream
                            st.nh_valid = true;
                        }
                        DefaultAction::Reject => {
                            st.nh_out = None;
                            st.nh_valid = false;
                            st.tx_exception = true;
                            exception = true;
                        }
                    },
                }
                st.nh_resolved = true;
            }
            (None, _) => {
                // keyless state: the transition is unconditional
                match layout.default_action {
                    DefaultAction::Goto { next } => {
                        st.nh_out = Some(next);
                        st.nh_valid = true;
                    }
                    DefaultAction::End => {
                        st.nh_out = None;
                        st.nh_valid = true;
                    }
                    DefaultAction::Reject => {
                        st.nh_out = None;
                        st.nh_valid = false;
                        st.tx_exception = true;
                        exception = true;
                    }
                }
                st.nh_resolved = true;
            }
            _ => {} // key word not here yet: outputs hold previous values
        }
    }
    StateTransitionOut {
        next_header_out: st.nh_out,
        next_header_valid: st.nh_valid,
        header_exception: exception,
        valid_header,
    }
}

/// The key value the transition block rejected, for diagnostics. Only
/// meaningful on the cycle `header_exception` was raised.
fn key_value_for_diag(layout: &HeaderLayout, w: &BusWord) -> u64 {
    match (layout.key_location_bits, layout.key_width_bits) {
        (Some(loc), Some(width)) => {
            let bus = w.data.len() as u32;
            w.data.read_u64((loc % bus) as usize, width as usize)
                & layout.key_mask.unwrap_or(u64::MAX)
        }
        _ => 0,
    }
}

pub struct ExtractionOut {
    pub phv: Option<Phv>,
    pub header_done: bool,
    pub header_size: Option<u32>,
    pub header_size_field: Option<u64>,
    /// Size-field value fell outside the LUT domain this cycle.
    pub size_exception: Option<u64>,
    /// Packet ended before the header completed.
    pub truncated: bool,
}

/// Header extraction block: ORs the shifted word into the PHV accumulator,
/// resolves the header size (hardwired for fixed headers, size-LUT lookup
/// for variable ones) and signals completion once
/// `bus_width * received_words` reaches the header size.
pub fn header_extraction_step(
    layout: &HeaderLayout,
    st: &mut EngineState,
    w: &BusWord,
    valid_header: bool,
) -> ExtractionOut {
    let mut out = ExtractionOut {
        phv: None,
        header_done: st.done,
        header_size: st.header_size_latched,
        header_size_field: st.size_field_value,
        size_exception: None,
        truncated: false,
    };
    if !valid_header || st.data_exception {
        return out;
    }
    let bus = w.data.len() as u32;
    let word_idx = st.received_words;
    if !st.done {
        if let Some(&shift) = layout.rom.extract_shifts.get(&word_idx) {
            let mut masked = w.data.clone();
            masked.mask_beyond(w.valid_bits);
            st.phv_accum.or_at_byte_offset(shift as usize, &masked);
        }
    }
    st.frame_bits += w.valid_bits as u64;

    // SizeDetector: latch the size once the size field has fully arrived
    if st.header_size_latched.is_none() && !layout.is_fixed_size() {
        let (off, width) = (
            layout.size_field_offset_bits.expect("variable header has a size field"),
            layout.size_field_width_bits.expect("variable header has a size field"),
        );
        let field_end_word = (off + width - 1) / bus;
        if field_end_word == word_idx && st.frame_bits >= (off + width) as u64 {
            let value = st.phv_accum.read_u64(off as usize, width as usize);
            st.size_field_value = Some(value);
            out.header_size_field = Some(value);
            match layout.size_lut.as_ref().and_then(|l| l.get(&value)) {
                Some(&size) => st.header_size_latched = Some(size),
                None => {
                    // malformed packet: exception, PHV marked invalid
                    st.data_exception = true;
                    st.done = true;
                    st.phv_emitted = true;
                    out.size_exception = Some(value);
                    out.phv = Some(Phv {
                        header_id: layout.this_header,
                        header: layout.name.clone(),
                        packet_id: w.packet_id,
                        bits: Bits::zero(0),
                        bit_count: 0,
                        valid: false,
                    });
                    return out;
                }
            }
        }
    }

    st.received_words += 1;
    st.received_bits += u64::from(bus);
    out.header_size = st.header_size_latched;

    if !st.phv_emitted {
        if let Some(size) = st.header_size_latched {
            if u64::from(bus) * u64::from(st.received_words) >= u64::from(size) {
                if st.frame_bits >= u64::from(size) {
                    st.done = true;
                    st.phv_emitted = true;
                    out.header_done = true;
                    out.phv = Some(Phv {
                        header_id: layout.this_header,
                        header: layout.name.clone(),
                        packet_id: w.packet_id,
                        bits: st.phv_accum.truncated(size as usize),
                        bit_count: size as usize,
                        valid: true,
                    });
                } else if w.end {
                    out.truncated = true;
                }
            }
        }
        if w.end && !st.phv_emitted {
            out.truncated = true;
        }
        if out.truncated {
            let avail = (st.frame_bits as usize).min(layout.max_size_bits as usize);
            st.data_exception = true;
            st.done = true;
            st.phv_emitted = true;
            out.phv = Some(Phv {
                header_id: layout.this_header,
                header: layout.name.clone(),
                packet_id: w.packet_id,
                bits: st.phv_accum.truncated(avail),
                bit_count: avail,
                valid: false,
            });
        }
    }
    out.header_done = st.done;
    out
}

/// Pipeline alignment block: delays the stream one word and splices
/// delayed/current words so the next stage sees its header at bit 0. Returns
/// the input unchanged when `valid_header` is false (bypass) and nothing
/// while the stream is still left of the header boundary.
pub fn pipeline_alignment_step(
    layout: &HeaderLayout,
    st: &mut EngineState,
    w: &BusWord,
    valid_header: bool,
    header_size: Option<u32>,
) -> Option<BusWord> {
    if !valid_header {
        return Some(w.clone());
    }
    let bus = w.data.len() as u32;
    let t = st.align_word_idx;
    st.align_word_idx += 1;
    let prev = st.delay_reg.replace(w.data.clone());
    let size = header_size?;
    if st.data_exception || st.aligned_end_sent {
        return None;
    }
    let q = size / bus;
    let r = size % bus;
    let due = if r == 0 { q } else { q + 1 };
    if t < due {
        if w.end {
            schedule_frame_end(layout, st, w, size, r);
        }
        return None;
    }
    let j = t - due;
    let data = if r == 0 {
        w.data.clone()
    } else {
        let mut d = prev
            .map(|p| p.shifted_left(layout.rom.align_right[&size] as usize))
            .unwrap_or_else(|| Bits::zero(bus as usize));
        d.or_assign(&w.data.shifted_right(layout.rom.align_left[&size] as usize));
        d
    };
    let (end, valid_bits) = if w.end {
        let frame_total = st.frame_bits; // includes this word
        let aligned_total = frame_total.saturating_sub(u64::from(size));
        let tail = aligned_total - u64::from(j) * u64::from(bus);
        let vb = tail.min(u64::from(bus)) as usize;
        (tail <= u64::from(bus), vb)
    } else {
        (false, bus as usize)
    };
    let mut data = data;
    data.mask_beyond(valid_bits);
    let out = BusWord {
        data,
        start: j == 0,
        end,
        valid: true,
        packet_id: w.packet_id,
        valid_bits,
    };
    st.aligned_words_out += 1;
    if end {
        st.aligned_end_sent = true;
    } else if w.end {
        schedule_frame_end(layout, st, w, size, r);
    }
    Some(out)
}

/// End-of-frame handling: the tail of the final input word (or an empty
/// end marker when the payload is empty) goes out one cycle later.
fn schedule_frame_end(layout: &HeaderLayout, st: &mut EngineState, w: &BusWord, size: u32, r: u32) {
    if st.aligned_end_sent || st.flush_pending.is_some() {
        return;
    }
    let bus = w.data.len() as u32;
    let aligned_total = st.frame_bits.saturating_sub(u64::from(size));
    let sent = u64::from(st.aligned_words_out) * u64::from(bus);
    let remaining = aligned_total.saturating_sub(sent);
    debug_assert!(remaining <= u64::from(bus), "more than one flush word");
    let mut data = if r == 0 || remaining == 0 {
        Bits::zero(bus as usize)
    } else {
        w.data.shifted_left(layout.rom.align_right[&size] as usize)
    };
    data.mask_beyond(remaining as usize);
    st.flush_pending = Some(ChannelWord {
        word: BusWord {
            data,
            start: st.aligned_words_out == 0,
            end: true,
            valid: true,
            packet_id: w.packet_id,
            valid_bits: remaining as usize,
        },
        next_header: st.nh_out,
    });
    st.aligned_end_sent = true;
}

/// One header engine: a layout plus its registers.
#[derive(Debug, Clone)]
struct Engine {
    layout: HeaderLayout,
    st: EngineState,
}

struct IngestOut {
    real: Option<ChannelWord>,
    phv: Option<Phv>,
    exceptions: Vec<ExceptionEvent>,
    end_marker: Option<ChannelWord>,
    valid_header: bool,
    done: bool,
    next_header: Option<HeaderId>,
}

impl Engine {
    fn new(layout: HeaderLayout) -> Engine {
        Engine {
            layout,
            st: EngineState::default(),
        }
    }

    fn reset_for(&mut self, packet_id: PacketId) {
        self.st = EngineState {
            active_packet: Some(packet_id),
            phv_accum: Bits::zero(self.layout.max_size_bits as usize),
            header_size_latched: self.layout.fixed_size_bits,
            ..EngineState::default()
        };
    }

    fn matches(&self, cw: &ChannelWord) -> bool {
        cw.next_header == Some(self.layout.this_header)
    }

    fn take_flush(&mut self) -> Option<ChannelWord> {
        self.st.flush_pending.take()
    }

    fn is_quiet(&self) -> bool {
        self.st.flush_pending.is_none()
    }

    fn ingest(&mut self, cw: &ChannelWord, cycle: u64) -> IngestOut {
        let w = &cw.word;
        if w.start {
            self.reset_for(w.packet_id);
        }
        debug_assert_eq!(
            self.st.active_packet,
            Some(w.packet_id),
            "engine `{}` got a word of an unseen packet",
            self.layout.name
        );
        let mut exceptions = Vec::new();
        let had_data_exception = self.st.data_exception;

        let stx = state_transition_step(&self.layout, &mut self.st, w, cw.next_header);
        if stx.header_exception {
            self.st.pending_tx_kind = Some(if self.layout.key_location_bits.is_some() {
                ExceptionKind::UnknownKey {
                    value: key_value_for_diag(&self.layout, w),
                }
            } else {
                ExceptionKind::Rejected
            });
        }

        let ext = header_extraction_step(&self.layout, &mut self.st, w, stx.valid_header);
        if let Some(value) = ext.size_exception {
            exceptions.push(self.event(w.packet_id, ExceptionKind::InvalidSize { value }, cycle));
        }
        if ext.truncated {
            exceptions.push(self.event(w.packet_id, ExceptionKind::Truncated, cycle));
        }
        // the rejected-key exception surfaces only for a header that itself
        // arrived intact, mirroring the sequential walk
        if ext.phv.as_ref().is_some_and(|p| p.valid) {
            if let Some(kind) = self.st.pending_tx_kind.take() {
                exceptions.push(self.event(w.packet_id, kind, cycle));
            }
        }

        let size = self.st.header_size_latched;
        let mut real = pipeline_alignment_step(&self.layout, &mut self.st, w, stx.valid_header, size)
            .map(|word| ChannelWord {
                next_header: self.st.nh_out,
                word,
            });

        // A stream that dies on bad data still owes downstream an end
        // notification so engines can close out.
        let mut end_marker = None;
        if self.st.data_exception && !had_data_exception {
            self.st.aligned_end_sent = true;
            self.st.flush_pending = None;
            real = None;
            end_marker = Some(ChannelWord {
                word: BusWord {
                    data: Bits::zero(w.data.len()),
                    start: false,
                    end: true,
                    valid: true,
                    packet_id: w.packet_id,
                    valid_bits: 0,
                },
                next_header: None,
            });
        }

        if w.end {
            self.st.active_packet = None;
        }
        IngestOut {
            real,
            phv: ext.phv,
            exceptions,
            end_marker,
            valid_header: stx.valid_header,
            done: self.st.done,
            next_header: self.st.nh_out,
        }
    }

    fn event(&self, packet_id: PacketId, kind: ExceptionKind, cycle: u64) -> ExceptionEvent {
        ExceptionEvent {
            packet_id,
            header_id: self.layout.this_header,
            header: self.layout.name.clone(),
            kind,
            cycle,
        }
    }
}

/// Row of the optional cycle trace.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub cycle: u64,
    pub level: usize,
    pub engine: String,
    pub valid_header: bool,
    pub next_header: String,
    pub done: bool,
}

struct Stage {
    engines: Vec<Engine>,
    queue: VecDeque<ChannelWord>,
    reg: Option<ChannelWord>,
}

/// Per-cycle collection points shared by every stage.
struct CycleSink<'a> {
    cycle: u64,
    phvs: &'a mut Vec<Phv>,
    exceptions: &'a mut Vec<ExceptionEvent>,
    trace: &'a mut Option<Vec<TraceRow>>,
    plan: &'a PipelinePlan,
}

impl Stage {
    fn step(
        &mut self,
        input: Option<ChannelWord>,
        level: usize,
        sink: &mut CycleSink<'_>,
    ) -> Option<ChannelWord> {
        let cycle = sink.cycle;
        for e in &mut self.engines {
            if let Some(f) = e.take_flush() {
                self.queue.push_back(f);
            }
        }
        let mut filler = None;
        if let Some(cw) = input {
            let matching: Vec<usize> = self
                .engines
                .iter()
                .enumerate()
                .filter(|(_, e)| e.matches(&cw))
                .map(|(i, _)| i)
                .collect();
            assert!(
                matching.len() <= 1,
                "more than one engine asserted valid at level {level}"
            );
            match matching.first() {
                Some(&i) => {
                    let out = self.engines[i].ingest(&cw, cycle);
                    if let Some(t) = sink.trace.as_mut() {
                        t.push(TraceRow {
                            cycle,
                            level,
                            engine: self.engines[i].layout.name.clone(),
                            valid_header: out.valid_header,
                            next_header: out
                                .next_header
                                .map(|id| sink.plan.header_name(id).to_string())
                                .unwrap_or_default(),
                            done: out.done,
                        });
                    }
                    if let Some(p) = out.phv {
                        sink.phvs.push(p);
                    }
                    sink.exceptions.extend(out.exceptions);
                    match out.real {
                        Some(wd) => self.queue.push_back(wd),
                        None => {
                            if let Some(m) = out.end_marker {
                                self.queue.push_back(m);
                            } else {
                                // pre-boundary filler keeps the word flow 1:1
                                filler = Some(ChannelWord {
                                    word: BusWord {
                                        start: false,
                                        end: false,
                                        ..cw.word.clone()
                                    },
                                    next_header: None,
                                });
                            }
                        }
                    }
                }
                None => {
                    if let Some(t) = sink.trace.as_mut() {
                        t.push(TraceRow {
                            cycle,
                            level,
                            engine: "-".into(),
                            valid_header: false,
                            next_header: cw
                                .next_header
                                .map(|id| sink.plan.header_name(id).to_string())
                                .unwrap_or_default(),
                            done: false,
                        });
                    }
                    self.queue.push_back(cw); // bypass: bit-identical pass-through
                }
            }
        }
        self.queue.pop_front().or(filler)
    }

    fn is_quiet(&self) -> bool {
        self.queue.is_empty() && self.reg.is_none() && self.engines.iter().all(Engine::is_quiet)
    }
}

#[derive(Debug, Clone, Default)]
pub struct SimCounters {
    pub cycles: u64,
    pub words_in: u64,
    pub words_out: u64,
    pub phvs: u64,
    pub exceptions: u64,
}

/// One stateful execution of a plan. Instances over the same plan are
/// independent; run one per worker for parallel batches.
pub struct PipelineInstance {
    plan: Arc<PipelinePlan>,
    stages: Vec<Stage>,
    out_reg: Option<ChannelWord>,
    cycle: u64,
    packet_open: Option<PacketId>,
    exceptions: Vec<ExceptionEvent>,
    counters: SimCounters,
    first_in: BTreeMap<PacketId, u64>,
    first_out: BTreeMap<PacketId, u64>,
    trace: Option<Vec<TraceRow>>,
    next_packet_id: PacketId,
}

/// Result of a whole-packet parse.
#[derive(Debug, Clone)]
pub struct PacketParse {
    pub packet_id: PacketId,
    pub phvs: Vec<Phv>,
    pub exception: Option<ExceptionEvent>,
    /// Cycles from first word in to first word out.
    pub latency: u64,
    pub words: usize,
}

impl PipelineInstance {
    pub fn new(plan: Arc<PipelinePlan>) -> PipelineInstance {
        let stages = plan
            .levels
            .iter()
            .map(|ids| Stage {
                engines: ids
                    .iter()
                    .map(|id| Engine::new(plan.engines[id].clone()))
                    .collect(),
                queue: VecDeque::new(),
                reg: None,
            })
            .collect();
        PipelineInstance {
            plan,
            stages,
            out_reg: None,
            cycle: 0,
            packet_open: None,
            exceptions: Vec::new(),
            counters: SimCounters::default(),
            first_in: BTreeMap::new(),
            first_out: BTreeMap::new(),
            trace: None,
            next_packet_id: 0,
        }
    }

    pub fn plan(&self) -> &PipelinePlan {
        &self.plan
    }

    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn take_trace(&mut self) -> Vec<TraceRow> {
        self.trace.replace(Vec::new()).unwrap_or_default()
    }

    pub fn counters(&self) -> &SimCounters {
        &self.counters
    }

    pub fn exceptions(&self) -> &[ExceptionEvent] {
        &self.exceptions
    }

    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    pub fn first_out_cycle(&self, packet_id: PacketId) -> Option<u64> {
        self.first_out.get(&packet_id).copied()
    }

    pub fn first_in_cycle(&self, packet_id: PacketId) -> Option<u64> {
        self.first_in.get(&packet_id).copied()
    }

    /// Advances every stage by one cycle. `w_in` is this cycle's input word,
    /// if any; returns the word leaving the output register plus any PHVs
    /// completed this cycle.
    pub fn clock_pipeline(
        &mut self,
        w_in: Option<BusWord>,
    ) -> Result<(Option<BusWord>, Vec<Phv>), SimError> {
        if let Some(w) = &w_in {
            match (self.packet_open, w.start) {
                (Some(open), true) => return Err(SimError::PacketOverlap(open)),
                (None, false) => return Err(SimError::MissingStart(w.packet_id)),
                _ => {}
            }
            self.packet_open = if w.end { None } else { Some(w.packet_id) };
            self.first_in.entry(w.packet_id).or_insert(self.cycle);
            self.counters.words_in += 1;
        } else if let Some(open) = self.packet_open {
            return Err(SimError::MidPacketGap(open));
        }

        let mut phvs = Vec::new();
        let mut exceptions = Vec::new();

        let emitted = self.out_reg.take();
        let n = self.stages.len();
        self.out_reg = self.stages[n - 1].reg.take();
        let mut sink = CycleSink {
            cycle: self.cycle,
            phvs: &mut phvs,
            exceptions: &mut exceptions,
            trace: &mut self.trace,
            plan: &self.plan,
        };
        for i in (0..n).rev() {
            let input = if i == 0 {
                w_in.clone().map(|word| ChannelWord {
                    next_header: Some(sink.plan.root_header),
                    word,
                })
            } else {
                self.stages[i - 1].reg.take()
            };
            let out = self.stages[i].step(input, i, &mut sink);
            self.stages[i].reg = out;
        }

        if let Some(cw) = &emitted {
            self.counters.words_out += 1;
            self.first_out.entry(cw.word.packet_id).or_insert(self.cycle);
        }
        self.counters.phvs += phvs.len() as u64;
        self.counters.exceptions += exceptions.len() as u64;
        self.exceptions.extend(exceptions);
        self.counters.cycles += 1;
        self.cycle += 1;
        Ok((emitted.map(|cw| cw.word), phvs))
    }

    /// True when no word or pending state remains anywhere in the pipe.
    pub fn is_idle(&self) -> bool {
        self.out_reg.is_none() && self.packet_open.is_none() && self.stages.iter().all(Stage::is_quiet)
    }

    /// Clocks with no input until the pipeline drains.
    pub fn drain(&mut self) -> Result<Vec<Phv>, SimError> {
        let mut phvs = Vec::new();
        let budget = 4 * u64::from(self.plan.depth_cycles) + 16;
        let mut waited = 0;
        while !self.is_idle() {
            let (_, mut p) = self.clock_pipeline(None)?;
            phvs.append(&mut p);
            waited += 1;
            if waited > budget {
                return Err(SimError::DrainTimeout(budget));
            }
        }
        Ok(phvs)
    }

    /// Feeds one whole packet, drains the pipe and returns its PHVs sorted
    /// by header id.
    pub fn parse_packet(&mut self, bytes: &[u8]) -> Result<PacketParse, SimError> {
        let packet_id = self.next_packet_id;
        self.next_packet_id += 1;
        let words = words_from_bytes(bytes, self.plan.bus_width_bits, packet_id)?;
        let n_words = words.len();
        let mut phvs = Vec::new();
        for w in words {
            let (_, mut p) = self.clock_pipeline(Some(w))?;
            phvs.append(&mut p);
        }
        phvs.append(&mut self.drain()?);
        phvs.retain(|p| p.packet_id == packet_id);
        phvs.sort_by_key(|p| p.header_id);
        let exception = self
            .exceptions
            .iter()
            .find(|e| e.packet_id == packet_id)
            .cloned();
        let first_in = self.first_in[&packet_id];
        let latency = self.first_out.get(&packet_id).map(|o| o - first_in).unwrap_or(0);
        Ok(PacketParse {
            packet_id,
            phvs,
            exception,
            latency,
            words: n_words,
        })
    }
}

/// Segments packet bytes into bus words: zero-padded, `valid_bits` marking
/// the true end.
pub fn words_from_bytes(
    bytes: &[u8],
    bus_width: u32,
    packet_id: PacketId,
) -> Result<Vec<BusWord>, SimError> {
    if bytes.is_empty() {
        return Err(SimError::EmptyPacket);
    }
    let bus = bus_width as usize;
    let bus_bytes = bus / 8;
    let total_bits = bytes.len() * 8;
    let n_words = total_bits.div_ceil(bus);
    let mut out = Vec::with_capacity(n_words);
    for i in 0..n_words {
        let lo = i * bus_bytes;
        let hi = ((i + 1) * bus_bytes).min(bytes.len());
        let mut chunk = bytes[lo..hi].to_vec();
        chunk.resize(bus_bytes, 0);
        out.push(BusWord {
            data: Bits::from_bytes(&chunk),
            start: i == 0,
            end: i == n_words - 1,
            valid: true,
            packet_id,
            valid_bits: if i == n_words - 1 {
                total_bits - i * bus
            } else {
                bus
            },
        });
    }
    Ok(out)
}
