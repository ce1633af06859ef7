//! Acceptance suite: one test per shipping criterion, each printing a
//! PASS line (visible with `cargo test --test acceptance -- --nocapture`).

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Instant;

use parsepipe::cli::{cmd_compare, cmd_compile, cmd_dot, cmd_stats};
use parsepipe::graph::{
    balance_pipeline_graph, compute_levels, longest_path, transitive_reduction, GraphStage,
};
use parsepipe::layout::build_shift_roms;
use parsepipe::model::{load_parser_spec, ParseGraph};
use parsepipe::oracle::{gen_packet, random_graph, HeaderChoice, PacketSpec};
use parsepipe::sim::{words_from_bytes, PipelineInstance};
use parsepipe::Bits;

fn fixture_text(name: &str) -> String {
    let path = format!("{}/fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
    std::fs::read_to_string(path).unwrap()
}

fn fixture(name: &str) -> ParseGraph {
    load_parser_spec(&fixture_text(name)).unwrap()
}

fn edge_set(pairs: &[(&str, &str)]) -> BTreeSet<(String, String)> {
    pairs
        .iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect()
}

#[test]
fn criterion_1_fig5_reproduction_exact() {
    let t0 = Instant::now();
    let g = fixture("fig5.json");

    let reduced = transitive_reduction(&g).unwrap();
    let fig5b = edge_set(&[
        ("ETH", "IPv4"),
        ("ETH", "IPv6"),
        ("IPv4", "UDP"),
        ("IPv4", "TCP"),
        ("IPv6", "EXT"),
        ("EXT", "UDP"),
        ("EXT", "TCP"),
        ("UDP", "END"),
        ("TCP", "END"),
    ]);
    assert_eq!(reduced.edges, fig5b, "reduced edge set");

    let balanced = balance_pipeline_graph(&g).unwrap();
    let fig5d = edge_set(&[
        ("ETH", "IPv4"),
        ("ETH", "IPv6"),
        ("IPv4", "EXT"),
        ("IPv6", "EXT"),
        ("EXT", "UDP"),
        ("EXT", "TCP"),
        ("UDP", "END"),
        ("TCP", "END"),
    ]);
    assert_eq!(balanced.base.edges, fig5d, "balanced edge set");

    // DOT renderings are pinned byte-exactly
    let text = fixture_text("fig5.json");
    for (stage, golden) in [
        (GraphStage::Original, "fig5_original.dot"),
        (GraphStage::Reduced, "fig5_reduced.dot"),
        (GraphStage::Balanced, "fig5_balanced.dot"),
    ] {
        let dot = cmd_dot(&text, stage).unwrap();
        assert_eq!(dot, fixture_text(golden), "{golden}");
    }
    let elapsed = t0.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}");
    println!("PASS criterion 1: fig5 reduced (9 edges) and balanced (8 edges) graphs byte-exact in {elapsed:?}");
}

#[test]
fn criterion_2_simple_parser_latency_six_cycles() {
    let t0 = Instant::now();
    let plan = cmd_compile(&fixture_text("simple_parser.json"), 320).unwrap();
    assert_eq!(plan.depth_cycles, 6, "depth_cycles");
    // 6 cycles at 312.5 MHz comes to 19.2 ns
    let ns = f64::from(plan.depth_cycles) * 1000.0 / 312.5;
    assert!((ns - 19.2).abs() < 1e-9, "{ns} ns");

    let g = fixture("simple_parser.json");
    let mut rng = parsepipe::oracle::Rng::new(2024);
    let mut sim = PipelineInstance::new(Arc::new(plan));
    let n = 10_000u64;
    for i in 0..n {
        let spec = parsepipe::oracle::random_packet_spec(&g, &mut rng);
        let bytes = gen_packet(&g, &spec, i).unwrap();
        let res = sim.parse_packet(&bytes).unwrap();
        assert_eq!(res.latency, 6, "packet {i}: first-output latency");
    }
    let elapsed = t0.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0, "took {elapsed:?}");
    println!("PASS criterion 2: depth 6 and exact 6-cycle latency over {n} packets in {elapsed:?}");
}

#[test]
fn criterion_3_full_parser_depth_eight() {
    let plan = cmd_compile(&fixture_text("full_parser.json"), 320).unwrap();
    // 25.6 ns at 312.5 MHz is 8 cycles; the fixture's level assignment
    // reaches it (tag stacks are alternatives, see fixtures/README.md),
    // so the target is pinned exactly rather than <= 9
    assert!(plan.depth_cycles <= 9, "soft bound");
    assert_eq!(plan.depth_cycles, 8, "pinned once reached");
    let ns = f64::from(plan.depth_cycles) * 1000.0 / 312.5;
    assert!((ns - 25.6).abs() < 1e-9, "{ns} ns");
    // and simulated packets really see that latency
    let g = fixture("full_parser.json");
    let mut sim = PipelineInstance::new(Arc::new(plan));
    let spec = PacketSpec {
        header_sequence: ["ethernet", "vlan1", "vlan2", "ipv6", "ext1", "ext2", "tcp"]
            .iter()
            .map(|s| HeaderChoice::plain(s))
            .collect(),
        payload_len_bytes: 40,
    };
    let bytes = gen_packet(&g, &spec, 3).unwrap();
    let res = sim.parse_packet(&bytes).unwrap();
    assert_eq!(res.latency, 8);
    assert_eq!(res.phvs.len(), 7);
    println!("PASS criterion 3: full parser compiles to depth 8 (25.6 ns at 312.5 MHz)");
}

#[test]
fn criterion_4_throughput_and_streaming() {
    // throughput arithmetic
    let plan = cmd_compile(&fixture_text("simple_parser.json"), 320).unwrap();
    let stats = cmd_stats(&plan, Some(312.5));
    assert_eq!(stats.throughput_gbps, Some(100.0), "320b at 312.5 MHz");
    assert!(stats.to_string().contains("throughput          100 Gb/s"));

    // streaming: N back-to-back W-word packets, one word per cycle, no
    // stalls; all PHVs in by cycle N*W + depth with the last input word's
    // image emitted on the final cycle of that window
    let g = fixture("simple_parser.json");
    let spec = PacketSpec {
        header_sequence: vec![
            HeaderChoice::plain("ethernet"),
            HeaderChoice {
                state: "ipv4".into(),
                overrides: std::collections::BTreeMap::from([("ihl".into(), 5)]),
            },
            HeaderChoice::plain("tcp"),
        ],
        payload_len_bytes: 60,
    };
    let n = 50u64;
    let depth = u64::from(plan.depth_cycles);
    let mut sim = PipelineInstance::new(Arc::new(plan));
    let mut phvs = Vec::new();
    let mut words_total = 0u64;
    let mut per_packet_words = 0;
    for pid in 0..n {
        let bytes = gen_packet(&g, &spec, pid).unwrap();
        let words = words_from_bytes(&bytes, 320, pid).unwrap();
        per_packet_words = words.len() as u64;
        for w in words {
            // the model accepts a word on every consecutive cycle: no stalls
            let (_, mut got) = sim.clock_pipeline(Some(w)).unwrap();
            words_total += 1;
            phvs.append(&mut got);
        }
    }
    let total_cycles = words_total + depth;
    assert_eq!(words_total, n * per_packet_words);
    let mut last_image_seen = false;
    while sim.cycle() < total_cycles {
        let (out, mut got) = sim.clock_pipeline(None).unwrap();
        phvs.append(&mut got);
        if sim.cycle() == total_cycles {
            let w = out.expect("a word exits on the last streaming cycle");
            assert_eq!(w.packet_id, n - 1);
            last_image_seen = true;
        }
    }
    assert!(last_image_seen);
    assert_eq!(
        phvs.len() as u64,
        3 * n,
        "all PHVs delivered within N*W + depth = {total_cycles} cycles"
    );
    // the trailing drain only moves payload; no further PHVs appear
    let extra = sim.drain().unwrap();
    assert!(extra.is_empty(), "late PHVs: {extra:?}");
    for pid in 0..n {
        let mine: Vec<_> = phvs.iter().filter(|p| p.packet_id == pid).collect();
        assert_eq!(mine.len(), 3, "packet {pid}");
        assert!(mine.iter().all(|p| p.valid));
    }
    println!(
        "PASS criterion 4: stats reports 100 Gb/s; {n} back-to-back {per_packet_words}-word packets complete in exactly {total_cycles} cycles"
    );
}

#[test]
fn criterion_5_oracle_equivalence_10k_per_fixture() {
    let t0 = Instant::now();
    for name in ["simple_parser.json", "full_parser.json"] {
        let text = fixture_text(name);
        let g = load_parser_spec(&text).unwrap();
        let plan = cmd_compile(&text, 320).unwrap();
        let out = cmd_compare(&g, &plan, 10_000, 0xACCE55).unwrap();
        assert_eq!(out.packets, 10_000);
        assert_eq!(
            out.mismatches,
            0,
            "{name}: {}",
            out.divergence_report.as_deref().unwrap_or("")
        );
        // the corpus must really exercise the advertised variety
        for ihl in 5..=15 {
            assert!(
                out.coverage.get(&format!("ihl:{ihl:02}")).copied().unwrap_or(0) > 0,
                "{name}: no packet with IHL {ihl}"
            );
        }
        for exts in 0..=2 {
            assert!(
                out.coverage.get(&format!("ext:{exts}")).copied().unwrap_or(0) > 0,
                "{name}: no packet with {exts} extension headers"
            );
        }
        if name == "full_parser.json" {
            for tags in 0..=2 {
                assert!(
                    out.coverage.get(&format!("tags:{tags}")).copied().unwrap_or(0) > 0,
                    "no packet with {tags} VLAN/MPLS tags"
                );
            }
        }
        for kind in ["truncated", "unknown_key", "invalid_size"] {
            assert!(
                out.coverage.get(&format!("exception:{kind}")).copied().unwrap_or(0) > 0,
                "{name}: no {kind} packet in the corpus"
            );
        }
    }
    let elapsed = t0.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}");
    println!("PASS criterion 5: pipeline PHVs identical to the oracle over 2 x 10000 packets in {elapsed:?}");
}

#[test]
fn criterion_6_rom_equals_computation_exhaustive() {
    let bus = 320u32;
    let mut checked = 0usize;
    for name in ["simple_parser.json", "full_parser.json"] {
        let g = fixture(name);
        for ht in g.header_types.values() {
            let rom = build_shift_roms(ht, bus).unwrap();
            let sizes = ht.valid_sizes();
            assert_eq!(rom.align_left.len(), sizes.len());
            assert_eq!(rom.align_right.len(), sizes.len());
            for s in sizes {
                // the ROM must equal the on-the-fly arithmetic it replaces
                assert_eq!(rom.align_right[&s], s % bus, "{name}/{} size {s}", ht.name);
                assert_eq!(
                    rom.align_left[&s],
                    (bus - s % bus) % bus,
                    "{name}/{} size {s}",
                    ht.name
                );
                // and composing the two shifts must splice the stream:
                // aligned word 0 equals the raw stream with the first s bits
                // removed
                let bytes: Vec<u8> = (0..200u32).map(|i| (i * 31 + 5) as u8).collect();
                let stream = Bits::from_bytes(&bytes);
                let q = (s / bus) as usize;
                let w0 = stream.slice(q * bus as usize, bus as usize);
                let w1 = stream.slice((q + 1) * bus as usize, bus as usize);
                let got = if s % bus == 0 {
                    w0
                } else {
                    let mut d = w0.shifted_left(rom.align_right[&s] as usize);
                    d.or_assign(&w1.shifted_right(rom.align_left[&s] as usize));
                    d
                };
                assert_eq!(
                    got,
                    stream.slice(s as usize, bus as usize),
                    "{name}/{} size {s} splice",
                    ht.name
                );
                checked += 1;
            }
            // size LUT against the affine expression, over the whole domain
            if let (Some(expr), Some(domain)) = (&ht.size_expr, &ht.valid_size_field_values) {
                for &v in domain {
                    let brute = (expr.multiplier * v as i64 + expr.addend) as u32;
                    assert_eq!(ht.size_for_value(v), Some(brute), "{name}/{} v={v}", ht.name);
                }
            }
        }
    }
    println!("PASS criterion 6: ROM lookups equal brute-force arithmetic for {checked} (type, size) pairs");
}

#[test]
fn criterion_7_transitive_reduction_oracle_50_dags() {
    fn reach_matrix(g: &ParseGraph) -> BTreeMap<(String, String), bool> {
        let names = g.node_names();
        let mut m = BTreeMap::new();
        for a in &names {
            let mut seen = BTreeSet::new();
            let mut stack = vec![a.as_str()];
            while let Some(x) = stack.pop() {
                if seen.insert(x.to_string()) {
                    stack.extend(g.successors(x));
                }
            }
            for b in &names {
                m.insert((a.clone(), b.clone()), seen.contains(b));
            }
        }
        m
    }
    for seed in 0..50u64 {
        let g = random_graph(seed, 12);
        let r = transitive_reduction(&g).unwrap();
        assert_eq!(reach_matrix(&g), reach_matrix(&r), "seed {seed}: reachability");
        for e in &r.edges {
            let mut edges = r.edges.clone();
            edges.remove(e);
            assert_ne!(
                reach_matrix(&g),
                reach_matrix(&r.with_edges(edges)),
                "seed {seed}: edge {e:?} is redundant"
            );
        }
        // reduction leaves longest paths intact, so levels agree
        assert_eq!(compute_levels(&g), compute_levels(&r), "seed {seed}");
        let levels = compute_levels(&r);
        longest_path(&r, &levels).unwrap();
    }
    println!("PASS criterion 7: 50 random DAGs reduce to reachability-equal, edge-minimal graphs");
}

#[test]
fn criterion_8_identical_seeds_identical_outputs() {
    let bin = env!("CARGO_BIN_EXE_parsepipe");
    let dir = format!("{}/fixtures", env!("CARGO_MANIFEST_DIR"));
    let run = |args: &[&str]| {
        let out = std::process::Command::new(bin)
            .args(args)
            .output()
            .expect("spawn parsepipe");
        (out.status.code(), out.stdout, out.stderr)
    };
    let spec = format!("{dir}/simple_parser.json");
    let tmp = std::env::temp_dir().join("parsepipe_det_plan.json");
    let plan_path = tmp.to_str().unwrap().to_string();
    let cases: Vec<Vec<String>> = vec![
        vec!["compile".into(), spec.clone(), "--bus".into(), "320".into(), "--out".into(), plan_path.clone()],
        vec!["dot".into(), spec.clone(), "--stage".into(), "balanced".into()],
        vec!["stats".into(), plan_path.clone(), "--clock-mhz".into(), "312.5".into()],
        vec![
            "simulate".into(), plan_path.clone(),
            "--spec".into(), spec.clone(),
            "--packets".into(), "200".into(),
            "--seed".into(), "11".into(),
        ],
        vec![
            "compare".into(), spec.clone(),
            "-n".into(), "200".into(),
            "--seed".into(), "11".into(),
        ],
    ];
    for case in &cases {
        let args: Vec<&str> = case.iter().map(|s| s.as_str()).collect();
        let first = run(&args);
        let plan_bytes = std::fs::read(&plan_path).ok();
        let second = run(&args);
        assert_eq!(first, second, "non-deterministic output for {args:?}");
        if args[0] == "compile" {
            assert_eq!(plan_bytes, std::fs::read(&plan_path).ok(), "plan artifact changed");
        }
    }
    println!("PASS criterion 8: byte-identical outputs across repeated seeded runs of every command");
}
