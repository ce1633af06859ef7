//! Ground truth and test harness: a plain sequential parser over the
//! original parse graph, a seeded packet generator, random graph generation
//! and classic pcap I/O.
//!
//! The reference parser walks states one header at a time over the raw
//! bytes, with none of the pipeline's leveling or alignment machinery. Its
//! PHV and exception semantics mirror the pipeline's exactly so the two can
//! be diffed bit for bit.

pub mod pcap;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bits::Bits;
use crate::model::{DefaultKind, ParseGraph, ParseState, TransitionTarget, END_NODE};
use crate::sim::{ExceptionKind, Phv};

/// Small deterministic PRNG (splitmix64). The sequence is part of the
/// artifact's reproducibility contract, so it is pinned here rather than
/// borrowed from a crate whose stream might change between releases.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Rng {
        Rng { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform value in `[0, n)`. `n` must be non-zero.
    pub fn below(&mut self, n: u64) -> u64 {
        self.next_u64() % n
    }

    pub fn pick<'a, T>(&mut self, items: &'a [T]) -> &'a T {
        &items[self.below(items.len() as u64) as usize]
    }

    pub fn chance(&mut self, percent: u64) -> bool {
        self.below(100) < percent
    }

    pub fn fill_bytes(&mut self, out: &mut [u8]) {
        for chunk in out.chunks_mut(8) {
            let v = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&v[..chunk.len()]);
        }
    }
}

/// One requested packet: the exact header path plus per-field overrides.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct PacketSpec {
    pub header_sequence: Vec<HeaderChoice>,
    pub payload_len_bytes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct HeaderChoice {
    pub state: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub overrides: BTreeMap<String, u64>,
}

impl HeaderChoice {
    pub fn plain(state: &str) -> HeaderChoice {
        HeaderChoice {
            state: state.to_string(),
            overrides: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Error)]
pub enum GenError {
    #[error("unknown state `{0}` in header sequence")]
    UnknownState(String),
    #[error("state `{state}` cannot transition to `{next}`")]
    ImpossibleTransition { state: String, next: String },
    #[error("state `{state}`: override {field}={value:#x} conflicts with the transition to `{next}`")]
    InconsistentOverride {
        state: String,
        field: String,
        value: u64,
        next: String,
    },
    #[error("state `{state}`: match table covers every key value, cannot generate a miss")]
    NoMissValue { state: String },
    #[error("generated packet is not byte-aligned ({0} bits)")]
    NotByteAligned(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefException {
    pub header: String,
    pub kind: ExceptionKind,
}

/// Output of the reference parser.
#[derive(Debug, Clone)]
pub struct RefParse {
    pub phvs: Vec<Phv>,
    pub trail: Vec<String>,
    pub exception: Option<RefException>,
}

/// Sequential reference parse of `packet` over the original graph: slices
/// header bytes, resolves sizes, extracts keys and follows transitions until
/// END, reject or truncation.
pub fn reference_parse(g: &ParseGraph, packet: &[u8], packet_id: u64) -> RefParse {
    let ids = g.header_ids();
    let bits = Bits::from_bytes(packet);
    let total = bits.len();
    let mut cursor = 0usize;
    let mut state_name = g.root.clone();
    let mut phvs = Vec::new();
    let mut trail = Vec::new();
    let mut exception = None;

    loop {
        let state = &g.states[&state_name];
        let ht = &g.header_types[&state.header_type];
        trail.push(state_name.clone());
        let avail = total - cursor;
        let header_id = ids[&state_name];
        let invalid_phv = |bit_count: usize| Phv {
            header_id,
            header: state_name.clone(),
            packet_id,
            bits: if bit_count == 0 {
                Bits::zero(0)
            } else {
                bits.slice(cursor, bit_count)
            },
            bit_count,
            valid: false,
        };

        // resolve the header size
        let size = if ht.is_fixed_size() {
            Some(ht.max_size_bits as usize)
        } else {
            let (off, width) = ht.size_field_location().expect("variable header");
            if avail >= (off + width) as usize {
                let value = bits.read_u64(cursor + off as usize, width as usize);
                match ht.size_for_value(value) {
                    Some(s) => Some(s as usize),
                    None => {
                        phvs.push(invalid_phv(0));
                        exception = Some(RefException {
                            header: state_name.clone(),
                            kind: ExceptionKind::InvalidSize { value },
                        });
                        break;
                    }
                }
            } else {
                None // packet ends inside the size field
            }
        };
        let size = match size {
            Some(s) if s <= avail => s,
            _ => {
                let cap = avail.min(ht.max_size_bits as usize);
                phvs.push(invalid_phv(cap));
                exception = Some(RefException {
                    header: state_name.clone(),
                    kind: ExceptionKind::Truncated,
                });
                break;
            }
        };

        phvs.push(Phv {
            header_id,
            header: state_name.clone(),
            packet_id,
            bits: bits.slice(cursor, size),
            bit_count: size,
            valid: true,
        });

        // transition
        enum Next {
            State(String),
            Complete,
            Exception(ExceptionKind),
        }
        let next = match &state.key {
            Some(key) => {
                let value = bits.read_u64(
                    cursor + key.offset_bits as usize,
                    key.width_bits as usize,
                );
                match state
                    .transitions
                    .iter()
                    .find(|t| t.match_value == value)
                    .map(|t| &t.next_state)
                {
                    Some(TransitionTarget::State(s)) => Next::State(s.clone()),
                    Some(TransitionTarget::End) => Next::Complete,
                    None => match &state.default_transition {
                        DefaultKind::State(s) => Next::State(s.clone()),
                        DefaultKind::End => Next::Complete,
                        DefaultKind::Reject => Next::Exception(ExceptionKind::UnknownKey { value }),
                    },
                }
            }
            None => match &state.default_transition {
                DefaultKind::State(s) => Next::State(s.clone()),
                DefaultKind::End => Next::Complete,
                DefaultKind::Reject => Next::Exception(ExceptionKind::Rejected),
            },
        };
        cursor += size;
        match next {
            Next::Complete => break,
            Next::Exception(kind) => {
                exception = Some(RefException {
                    header: state_name.clone(),
                    kind,
                });
                break;
            }
            Next::State(s) => state_name = s,
        }
    }
    phvs.sort_by_key(|p| p.header_id);
    RefParse {
        phvs,
        trail,
        exception,
    }
}

/// Builds packet bytes whose reference parse follows `spec.header_sequence`
/// exactly. Deterministic for a given `(spec, seed)` pair. Key fields are
/// forced to the value selecting the requested next state; size fields come
/// from the valid domain unless overridden; everything else is pseudorandom.
pub fn gen_packet(g: &ParseGraph, spec: &PacketSpec, seed: u64) -> Result<Vec<u8>, GenError> {
    let mut rng = Rng::new(seed);
    let mut chunks: Vec<Bits> = Vec::new();
    let mut poisoned = false; // an intentionally invalid size stops the walk

    for (i, choice) in spec.header_sequence.iter().enumerate() {
        if poisoned {
            break;
        }
        let state = g
            .states
            .get(&choice.state)
            .ok_or_else(|| GenError::UnknownState(choice.state.clone()))?;
        let ht = &g.header_types[&state.header_type];
        let next_name = spec
            .header_sequence
            .get(i + 1)
            .map(|c| c.state.as_str())
            .unwrap_or(END_NODE);

        // size selection
        let mut size_bits = ht.max_size_bits as i64;
        let mut size_value = None;
        if let Some((_, width)) = ht.size_field_location() {
            let expr = ht.size_expr.as_ref().expect("variable header");
            let field_name = &expr.field;
            let v = match choice.overrides.get(field_name) {
                Some(&v) => v,
                None => {
                    let domain: Vec<u64> = ht
                        .valid_size_field_values
                        .iter()
                        .flatten()
                        .copied()
                        .collect();
                    *rng.pick(&domain)
                }
            };
            size_value = Some((field_name.clone(), v, width));
            size_bits = expr.multiplier * v as i64 + expr.addend;
            if ht.size_for_value(v).is_none() {
                poisoned = true; // invalid on purpose; emit capped bits and stop
                size_bits = size_bits.min(ht.max_size_bits as i64);
            }
        }
        let size_bits = size_bits.max(0) as usize;
        // pseudorandom contents first, then structured fields on top
        let mut raw = vec![0u8; size_bits.div_ceil(8)];
        rng.fill_bytes(&mut raw);
        let mut h = Bits::from_bytes_truncated(&raw, size_bits);
        let write_field = |h: &mut Bits, off: u32, width: u32, value: u64| {
            if (off + width) as usize <= size_bits {
                h.write_u64(off as usize, width as usize, value);
            }
        };
        if let Some((name, v, width)) = &size_value {
            let off = ht.field_offset(name).expect("size field exists");
            write_field(&mut h, off, *width, *v);
        }

        // key value selecting the requested transition
        if let Some(key) = &state.key {
            if !poisoned {
                let value = key_value_for(state, next_name, &mut rng)?;
                write_field(&mut h, key.offset_bits, key.width_bits, value);
            }
        } else if next_name != state.default_transition_target() {
            return Err(GenError::ImpossibleTransition {
                state: state.name.clone(),
                next: next_name.to_string(),
            });
        }

        // caller overrides win; verify they kept the transition intact
        for (field, value) in &choice.overrides {
            if let (Some(off), Some(f)) = (ht.field_offset(field), ht.field(field)) {
                if f.width_bits > 0 {
                    write_field(&mut h, off, f.width_bits, *value);
                }
            }
        }
        if let (Some(key), false) = (&state.key, poisoned) {
            let written = h.read_u64(key.offset_bits as usize, key.width_bits as usize);
            let target = transition_target_of(state, written);
            if target != next_name {
                let (field, value) = choice
                    .overrides
                    .iter()
                    .next()
                    .map(|(f, v)| (f.clone(), *v))
                    .unwrap_or_default();
                return Err(GenError::InconsistentOverride {
                    state: state.name.clone(),
                    field,
                    value,
                    next: next_name.to_string(),
                });
            }
        }
        chunks.push(h);
    }

    let mut payload = vec![0u8; spec.payload_len_bytes];
    rng.fill_bytes(&mut payload);
    chunks.push(Bits::from_bytes(&payload));

    let total: usize = chunks.iter().map(Bits::len).sum();
    if !total.is_multiple_of(8) {
        return Err(GenError::NotByteAligned(total));
    }
    let mut out = Bits::zero(total);
    let mut off = 0usize;
    for c in &chunks {
        // header sizes are byte-aligned in practice; enforce for assembly
        if !off.is_multiple_of(8) {
            return Err(GenError::NotByteAligned(off));
        }
        out.or_at_byte_offset(off, c);
        off += c.len();
    }
    Ok(out.as_bytes().to_vec())
}

impl ParseState {
    fn default_transition_target(&self) -> &str {
        match &self.default_transition {
            DefaultKind::State(s) => s,
            DefaultKind::End => END_NODE,
            DefaultKind::Reject => "REJECT",
        }
    }
}

fn transition_target_of(state: &ParseState, value: u64) -> &str {
    match state
        .transitions
        .iter()
        .find(|t| t.match_value == value)
        .map(|t| &t.next_state)
    {
        Some(TransitionTarget::State(s)) => s,
        Some(TransitionTarget::End) => END_NODE,
        None => state.default_transition_target(),
    }
}

/// A key value that makes `state` transition to `next_name`: a matching
/// table entry when one exists, otherwise a miss value if the default goes
/// there.
fn key_value_for(state: &ParseState, next_name: &str, rng: &mut Rng) -> Result<u64, GenError> {
    let key = state.key.as_ref().expect("keyed state");
    let candidates: Vec<u64> = state
        .transitions
        .iter()
        .filter(|t| t.next_state.node_name() == next_name)
        .map(|t| t.match_value)
        .collect();
    if !candidates.is_empty() {
        return Ok(*rng.pick(&candidates));
    }
    if state.default_transition_target() == next_name {
        let mask = if key.width_bits == 64 {
            u64::MAX
        } else {
            (1u64 << key.width_bits) - 1
        };
        for _ in 0..1000 {
            let v = rng.next_u64() & mask;
            if !state.transitions.iter().any(|t| t.match_value == v) {
                return Ok(v);
            }
        }
        return Err(GenError::NoMissValue {
            state: state.name.clone(),
        });
    }
    Err(GenError::ImpossibleTransition {
        state: state.name.clone(),
        next: next_name.to_string(),
    })
}

/// Random root-to-END walk over the original graph, with random sizes and a
/// random payload. Drives the equivalence harness.
pub fn random_packet_spec(g: &ParseGraph, rng: &mut Rng) -> PacketSpec {
    let mut seq = Vec::new();
    let mut state_name = g.root.as_str();
    loop {
        seq.push(HeaderChoice::plain(state_name));
        let state = &g.states[state_name];
        let mut nexts: Vec<&str> = state
            .transitions
            .iter()
            .map(|t| t.next_state.node_name())
            .collect();
        if let DefaultKind::State(s) = &state.default_transition {
            nexts.push(s);
        }
        if matches!(state.default_transition, DefaultKind::End) {
            nexts.push(END_NODE);
        }
        nexts.sort_unstable();
        nexts.dedup();
        if nexts.is_empty() {
            break; // reject-only state: stop here
        }
        let next = *rng.pick(&nexts);
        if next == END_NODE {
            break;
        }
        state_name = next;
    }
    PacketSpec {
        header_sequence: seq,
        payload_len_bytes: rng.below(65) as usize,
    }
}

/// Random DAG parser spec for stressing the graph passes: bounded fan-out,
/// root reaches every node, every node reaches END.
pub fn random_graph(seed: u64, max_nodes: usize) -> ParseGraph {
    use crate::model::load_parser_spec;
    let mut rng = Rng::new(seed.wrapping_mul(0x5851_F42D_4C95_7F2D).wrapping_add(1));
    let n = 2 + rng.below(max_nodes.saturating_sub(1).max(1) as u64) as usize;
    let mut succs: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, s) in succs.iter_mut().enumerate() {
        for j in (i + 1)..n {
            if rng.chance(35) {
                s.push(j);
            }
        }
    }
    // every node needs a parent chain back to the root
    for j in 1..n {
        if !succs.iter().take(j).any(|s| s.contains(&j)) {
            let p = rng.below(j as u64) as usize;
            succs[p].push(j);
            succs[p].sort_unstable();
        }
    }
    let mut states = Vec::new();
    for (i, s) in succs.iter().enumerate() {
        let transitions: Vec<serde_json::Value> = s
            .iter()
            .enumerate()
            .map(|(k, j)| serde_json::json!({"value": k, "next": format!("n{j:02}")}))
            .collect();
        states.push(serde_json::json!({
            "name": format!("n{i:02}"),
            "header_type": "t",
            "key": if transitions.is_empty() { serde_json::Value::Null } else { serde_json::json!({"offset": 0, "width": 16}) },
            "transitions": transitions,
            "default": if s.is_empty() { serde_json::Value::String("END".into()) } else { serde_json::Value::Null },
        }));
    }
    let spec = serde_json::json!({
        "header_types": [{"name": "t", "fields": [{"name": "f", "width": 64}]}],
        "parse_states": states,
        "root": "n00",
    });
    load_parser_spec(&spec.to_string()).expect("generated graph is valid")
}
