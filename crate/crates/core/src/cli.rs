//! Command implementations behind the `parsepipe` binary. The binary itself
//! only parses arguments and prints; behavior lives here so it can be tested
//! as a library.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::graph::{GraphStage, TransformError};
use crate::layout::{compile_plan, plan_stats, CompileError, PipelinePlan, PlanStats};
use crate::model::{load_parser_spec, LoadError, ParseGraph};
use crate::oracle::{
    gen_packet, random_packet_spec, reference_parse, GenError, RefParse, Rng,
};
use crate::sim::{
    ExceptionKind, PacketParse, Phv, PipelineInstance, SimError, TraceRow,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Pcap(#[from] crate::oracle::pcap::PcapError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("plan was not compiled from this parser spec: {0}")]
    PlanMismatch(String),
    #[error("{0}")]
    Usage(String),
}

/// `compile`: load, reduce, level, balance and lay out the pipeline.
pub fn cmd_compile(spec_text: &str, bus_width: u32) -> Result<PipelinePlan, CliError> {
    let g = load_parser_spec(spec_text)?;
    Ok(compile_plan(&g, bus_width)?)
}

/// One-line-per-level summary printed after a compile.
pub fn compile_report(plan: &PipelinePlan) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "bus_width_bits {}", plan.bus_width_bits);
    let _ = writeln!(out, "depth_cycles   {}", plan.depth_cycles);
    let _ = writeln!(out, "levels         {}", plan.levels.len());
    let _ = writeln!(out, "engines        {}", plan.total_engines());
    for (i, level) in plan.levels.iter().enumerate() {
        let names: Vec<&str> = level.iter().map(|id| plan.header_name(*id)).collect();
        let mux = if plan.mux_levels.contains(&i) { " [mux]" } else { "" };
        let _ = writeln!(out, "  level {i}: {}{mux}", names.join(", "));
    }
    out
}

/// `dot`: render one transformation stage as Graphviz.
pub fn cmd_dot(spec_text: &str, stage: GraphStage) -> Result<String, CliError> {
    let g = load_parser_spec(spec_text)?;
    Ok(crate::graph::stage_dot(&g, stage)?)
}

/// `stats`: resource and throughput summary of a compiled plan.
pub fn cmd_stats(plan: &PipelinePlan, clock_mhz: Option<f64>) -> PlanStats {
    plan_stats(plan, clock_mhz)
}

/// Packet source for `simulate`.
pub enum SimInput {
    /// Seeded random packets over the parser graph the plan came from.
    Random { graph: Box<ParseGraph>, count: u64, seed: u64 },
    /// Pre-built packets (pcap replay or scripted corpora).
    Packets(Vec<Vec<u8>>),
}

#[derive(Debug, Clone, Serialize)]
struct PhvRecord<'a> {
    packet_id: u64,
    header: &'a str,
    bits_hex: String,
    bit_count: usize,
    valid: bool,
}

/// JSON-lines rendering of a PHV batch, sorted by (packet, header id).
pub fn phvs_to_jsonl(phvs: &[Phv]) -> String {
    let mut sorted: Vec<&Phv> = phvs.iter().collect();
    sorted.sort_by_key(|p| (p.packet_id, p.header_id));
    let mut out = String::new();
    for p in sorted {
        let rec = PhvRecord {
            packet_id: p.packet_id,
            header: &p.header,
            bits_hex: p.bits.hex(),
            bit_count: p.bit_count,
            valid: p.valid,
        };
        out.push_str(&serde_json::to_string(&rec).expect("phv record"));
        out.push('\n');
    }
    out
}

pub fn trace_to_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("cycle,level,engine,valid_header,next_header,done\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.cycle, r.level, r.engine, r.valid_header, r.next_header, r.done
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct SimulateOutcome {
    pub phvs: Vec<Phv>,
    pub phv_jsonl: String,
    pub trace_csv: Option<String>,
    pub packets: u64,
    pub words_total: u64,
    /// Streaming cycle count for a gapless run: words plus pipeline depth.
    pub cycles_total: u64,
    pub latency_min: Option<u64>,
    pub latency_max: Option<u64>,
    pub exceptions: u64,
}

impl SimulateOutcome {
    pub fn report(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "packets      {}", self.packets);
        let _ = writeln!(out, "words_total  {}", self.words_total);
        let _ = writeln!(out, "cycles_total {}", self.cycles_total);
        match (self.latency_min, self.latency_max) {
            (Some(a), Some(b)) if a == b => {
                let _ = writeln!(out, "latency      {a} cycles per packet");
            }
            (Some(a), Some(b)) => {
                let _ = writeln!(out, "latency      {a}..{b} cycles");
            }
            _ => {}
        }
        let _ = writeln!(out, "exceptions   {}", self.exceptions);
        out
    }
}

/// `simulate`: run packets through the pipeline, collecting PHVs and stats.
pub fn cmd_simulate(
    plan: &PipelinePlan,
    input: SimInput,
    trace: bool,
) -> Result<SimulateOutcome, CliError> {
    let packets: Vec<Vec<u8>> = match input {
        SimInput::Packets(p) => p,
        SimInput::Random { graph, count, seed } => {
            check_plan_matches(plan, &graph)?;
            let mut rng = Rng::new(seed);
            (0..count)
                .map(|i| {
                    let spec = random_packet_spec(&graph, &mut rng);
                    Ok(gen_packet(&graph, &spec, seed ^ i)?)
                })
                .collect::<Result<_, CliError>>()?
        }
    };
    let mut sim = PipelineInstance::new(Arc::new(plan.clone()));
    if trace {
        sim.enable_trace();
    }
    let mut phvs = Vec::new();
    let mut words_total = 0u64;
    let mut lat_min = None;
    let mut lat_max = None;
    let n_packets = packets.len() as u64;
    for bytes in &packets {
        let res: PacketParse = sim.parse_packet(bytes)?;
        words_total += res.words as u64;
        lat_min = Some(lat_min.map_or(res.latency, |m: u64| m.min(res.latency)));
        lat_max = Some(lat_max.map_or(res.latency, |m: u64| m.max(res.latency)));
        phvs.extend(res.phvs);
    }
    let trace_csv = trace.then(|| trace_to_csv(&sim.take_trace()));
    Ok(SimulateOutcome {
        phv_jsonl: phvs_to_jsonl(&phvs),
        phvs,
        trace_csv,
        packets: n_packets,
        words_total,
        cycles_total: words_total + u64::from(plan.depth_cycles),
        latency_min: lat_min,
        latency_max: lat_max,
        exceptions: sim.counters().exceptions,
    })
}

/// The plan must have been compiled from this graph: same states, same ids.
pub fn check_plan_matches(plan: &PipelinePlan, g: &ParseGraph) -> Result<(), CliError> {
    let ids = g.header_ids();
    for (id, layout) in &plan.engines {
        if ids.get(&layout.name) != Some(id) {
            return Err(CliError::PlanMismatch(format!(
                "engine `{}` (id {id}) not found in the spec",
                layout.name
            )));
        }
    }
    if plan.total_engines() != g.states.len() {
        return Err(CliError::PlanMismatch(format!(
            "plan has {} engines, spec has {} states",
            plan.total_engines(),
            g.states.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PacketShape {
    Clean,
    Truncated,
    CorruptKey,
    BadSizeField,
}

/// Seeded corpus entry used by `compare`: mostly clean walks, with a mix of
/// truncations, corrupted keys and invalid size fields.
pub fn corpus_packet(g: &ParseGraph, rng: &mut Rng, seed: u64) -> Result<(Vec<u8>, PacketShape), CliError> {
    let mut spec = random_packet_spec(g, rng);
    let shape = match rng.below(10) {
        0 => PacketShape::Truncated,
        1 => PacketShape::CorruptKey,
        2 => PacketShape::BadSizeField,
        _ => PacketShape::Clean,
    };
    if shape == PacketShape::BadSizeField {
        // poison the first variable-sized header on the walk, if any
        for choice in &mut spec.header_sequence {
            let ht = &g.header_types[&g.states[&choice.state].header_type];
            if let Some(expr) = &ht.size_expr {
                let bad = loop {
                    let v = rng.below(64);
                    if ht.size_for_value(v).is_none() {
                        break v;
                    }
                };
                choice.overrides.insert(expr.field.clone(), bad);
                break;
            }
        }
    }
    let mut bytes = gen_packet(g, &spec, seed)?;
    match shape {
        PacketShape::Truncated => {
            let keep = 1 + rng.below(bytes.len() as u64) as usize;
            bytes.truncate(keep);
        }
        PacketShape::CorruptKey => {
            // flip a byte somewhere in the header region
            let span = bytes.len().min(64);
            let idx = rng.below(span as u64) as usize;
            bytes[idx] ^= 1 + rng.below(255) as u8;
        }
        _ => {}
    }
    Ok((bytes, shape))
}

#[derive(Debug, Clone)]
pub struct CompareOutcome {
    pub packets: u64,
    pub mismatches: u64,
    pub divergence_report: Option<String>,
    /// What the corpus actually exercised: mutation shapes, IHL values,
    /// extension-header and tag counts per packet.
    pub coverage: BTreeMap<String, u64>,
}

fn exception_signature(e: &Option<crate::sim::ExceptionEvent>) -> Option<(String, ExceptionKind)> {
    e.as_ref().map(|e| (e.header.clone(), e.kind.clone()))
}

fn ref_exception_signature(
    e: &Option<crate::oracle::RefException>,
) -> Option<(String, ExceptionKind)> {
    e.as_ref().map(|e| (e.header.clone(), e.kind.clone()))
}

fn phv_key(p: &Phv) -> (u16, usize, String, bool) {
    (p.header_id, p.bit_count, p.bits.hex(), p.valid)
}

/// `compare`: generate `n` seeded packets, run the pipeline and the
/// reference parser on the same bytes and diff PHVs and exceptions.
pub fn cmd_compare(
    g: &ParseGraph,
    plan: &PipelinePlan,
    n: u64,
    seed: u64,
) -> Result<CompareOutcome, CliError> {
    check_plan_matches(plan, g)?;
    let mut rng = Rng::new(seed);
    let mut sim = PipelineInstance::new(Arc::new(plan.clone()));
    let mut mismatches = 0u64;
    let mut divergence_report = None;
    let mut coverage: BTreeMap<String, u64> = BTreeMap::new();
    for i in 0..n {
        let (bytes, shape) = corpus_packet(g, &mut rng, seed.wrapping_add(i))?;
        let got = sim.parse_packet(&bytes)?;
        let want: RefParse = reference_parse(g, &bytes, got.packet_id);
        record_coverage(&mut coverage, shape, &want);
        let phvs_equal = got.phvs.iter().map(phv_key).collect::<Vec<_>>()
            == want.phvs.iter().map(phv_key).collect::<Vec<_>>();
        let exc_equal =
            exception_signature(&got.exception) == ref_exception_signature(&want.exception);
        if !(phvs_equal && exc_equal) {
            mismatches += 1;
            if divergence_report.is_none() {
                divergence_report = Some(divergence(plan, &bytes, shape, &got, &want)?);
            }
        }
    }
    Ok(CompareOutcome {
        packets: n,
        mismatches,
        divergence_report,
        coverage,
    })
}

fn record_coverage(coverage: &mut BTreeMap<String, u64>, shape: PacketShape, want: &RefParse) {
    *coverage.entry(format!("shape:{shape:?}")).or_insert(0) += 1;
    let exts = want
        .trail
        .iter()
        .filter(|s| s.starts_with("ext"))
        .count();
    *coverage.entry(format!("ext:{exts}")).or_insert(0) += 1;
    let tags = want
        .trail
        .iter()
        .filter(|s| s.starts_with("vlan") || s.starts_with("mpls"))
        .count();
    *coverage.entry(format!("tags:{tags}")).or_insert(0) += 1;
    if let Some(p) = want.phvs.iter().find(|p| p.header == "ipv4") {
        if p.bit_count >= 8 {
            let ihl = p.bits.read_u64(4, 4);
            *coverage.entry(format!("ihl:{ihl:02}")).or_insert(0) += 1;
        }
    }
    if let Some(e) = &want.exception {
        let kind = match e.kind {
            ExceptionKind::UnknownKey { .. } => "unknown_key",
            ExceptionKind::InvalidSize { .. } => "invalid_size",
            ExceptionKind::Truncated => "truncated",
            ExceptionKind::Rejected => "rejected",
        };
        *coverage.entry(format!("exception:{kind}")).or_insert(0) += 1;
    }
}

/// Full dump of the first divergent packet: hex bytes, both PHV sets and the
/// pipeline's cycle trace of a replay.
fn divergence(
    plan: &PipelinePlan,
    bytes: &[u8],
    shape: PacketShape,
    got: &PacketParse,
    want: &RefParse,
) -> Result<String, CliError> {
    let mut out = String::new();
    let _ = writeln!(out, "first divergent packet ({shape:?}, {} bytes):", bytes.len());
    for chunk in bytes.chunks(32) {
        let hex: Vec<String> = chunk.iter().map(|b| format!("{b:02x}")).collect();
        let _ = writeln!(out, "  {}", hex.join(" "));
    }
    let _ = writeln!(out, "pipeline PHVs:");
    out.push_str(&indent(&phvs_to_jsonl(&got.phvs)));
    let _ = writeln!(out, "oracle PHVs:");
    out.push_str(&indent(&phvs_to_jsonl(&want.phvs)));
    let _ = writeln!(
        out,
        "pipeline exception: {:?}",
        exception_signature(&got.exception)
    );
    let _ = writeln!(
        out,
        "oracle exception:   {:?}",
        ref_exception_signature(&want.exception)
    );
    // replay with tracing for the cycle-by-cycle view
    let mut sim = PipelineInstance::new(Arc::new(plan.clone()));
    sim.enable_trace();
    let _ = sim.parse_packet(bytes)?;
    let _ = writeln!(out, "cycle trace:");
    out.push_str(&indent(&trace_to_csv(&sim.take_trace())));
    Ok(out)
}

fn indent(s: &str) -> String {
    s.lines().fold(String::new(), |mut acc, l| {
        let _ = writeln!(acc, "  {l}");
        acc
    })
}

/// Shared helper for tests and the binary: load a spec file's graph.
pub fn load_graph(spec_text: &str) -> Result<ParseGraph, CliError> {
    Ok(load_parser_spec(spec_text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture_text(name: &str) -> String {
        let path = format!("{}/fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
        std::fs::read_to_string(path).unwrap()
    }

    #[test]
    fn compile_fig5_depth_five() {
        let plan = cmd_compile(&fixture_text("fig5.json"), 320).unwrap();
        assert_eq!(plan.depth_cycles, 5);
        assert_eq!(plan.levels.len(), 4);
        let report = compile_report(&plan);
        assert!(report.contains("depth_cycles   5"));
        assert!(report.contains("[mux]"));
    }

    #[test]
    fn compile_simple_depth_six() {
        let plan = cmd_compile(&fixture_text("simple_parser.json"), 320).unwrap();
        assert_eq!(plan.depth_cycles, 6);
    }

    #[test]
    fn compile_broken_spec_fails() {
        assert!(cmd_compile("{\"header_types\": []}", 320).is_err());
    }

    #[test]
    fn simulate_zero_packets_is_empty() {
        let text = fixture_text("simple_parser.json");
        let plan = cmd_compile(&text, 320).unwrap();
        let g = load_graph(&text).unwrap();
        let out = cmd_simulate(
            &plan,
            SimInput::Random {
                graph: Box::new(g),
                count: 0,
                seed: 1,
            },
            false,
        )
        .unwrap();
        assert_eq!(out.packets, 0);
        assert!(out.phv_jsonl.is_empty());
    }

    #[test]
    fn simulate_random_packets_latency_is_depth() {
        let text = fixture_text("simple_parser.json");
        let plan = cmd_compile(&text, 320).unwrap();
        let g = load_graph(&text).unwrap();
        let out = cmd_simulate(
            &plan,
            SimInput::Random {
                graph: Box::new(g),
                count: 50,
                seed: 9,
            },
            false,
        )
        .unwrap();
        assert_eq!(out.latency_min, Some(6));
        assert_eq!(out.latency_max, Some(6));
        assert_eq!(out.cycles_total, out.words_total + 6);
    }

    #[test]
    fn compare_clean_run_matches() {
        let text = fixture_text("simple_parser.json");
        let plan = cmd_compile(&text, 320).unwrap();
        let g = load_graph(&text).unwrap();
        let out = cmd_compare(&g, &plan, 300, 42).unwrap();
        assert_eq!(out.mismatches, 0, "{:?}", out.divergence_report);
    }

    #[test]
    fn compare_holds_on_default_to_end_graphs() {
        // fig5's states all accept "no next header": the miss path completes
        // the parse instead of rejecting
        let text = fixture_text("fig5.json");
        let g = load_graph(&text).unwrap();
        let plan = cmd_compile(&text, 320).unwrap();
        let out = cmd_compare(&g, &plan, 300, 77).unwrap();
        assert_eq!(out.mismatches, 0, "{:?}", out.divergence_report);
    }

    #[test]
    fn compare_holds_across_bus_widths() {
        for name in ["simple_parser.json", "full_parser.json"] {
            let text = fixture_text(name);
            let g = load_graph(&text).unwrap();
            for bus in [64, 128, 512] {
                let plan = cmd_compile(&text, bus).unwrap();
                let out = cmd_compare(&g, &plan, 150, 5).unwrap();
                assert_eq!(
                    out.mismatches,
                    0,
                    "{name} bus {bus}: {:?}",
                    out.divergence_report
                );
            }
        }
    }

    #[test]
    fn compare_detects_corrupted_plan() {
        let text = fixture_text("simple_parser.json");
        let mut plan = cmd_compile(&text, 320).unwrap();
        let g = load_graph(&text).unwrap();
        // sabotage ethernet's alignment ROM
        let eth_id = *plan
            .engines
            .iter()
            .find(|(_, l)| l.name == "ethernet")
            .map(|(id, _)| id)
            .unwrap();
        let rom = &mut plan.engines.get_mut(&eth_id).unwrap().rom;
        for v in rom.align_right.values_mut() {
            *v = (*v + 8) % 320;
        }
        let out = cmd_compare(&g, &plan, 50, 1).unwrap();
        assert!(out.mismatches > 0);
        assert!(out.divergence_report.is_some());
        let report = out.divergence_report.unwrap();
        assert!(report.contains("pipeline PHVs"));
        assert!(report.contains("cycle trace"));
    }

    #[test]
    fn plan_spec_mismatch_is_detected() {
        let plan = cmd_compile(&fixture_text("fig5.json"), 320).unwrap();
        let g = load_graph(&fixture_text("simple_parser.json")).unwrap();
        assert!(matches!(
            check_plan_matches(&plan, &g),
            Err(CliError::PlanMismatch(_))
        ));
    }
}
