//! Regenerates fixtures/replay.pcap and fixtures/replay_golden.jsonl: three
//! generator-authored packets plus the reference parser's PHV stream for
//! them. Run from the crate root after changing the packet generator or the
//! PHV record format.

use std::collections::BTreeMap;

use parsepipe::cli::phvs_to_jsonl;
use parsepipe::model::load_parser_spec;
use parsepipe::oracle::pcap::write_pcap;
use parsepipe::oracle::{gen_packet, reference_parse, HeaderChoice, PacketSpec};

fn main() {
    let dir = format!("{}/fixtures", env!("CARGO_MANIFEST_DIR"));
    let g = load_parser_spec(
        &std::fs::read_to_string(format!("{dir}/simple_parser.json")).unwrap(),
    )
    .unwrap();

    let specs = [
        PacketSpec {
            header_sequence: ["ethernet", "ipv4", "tcp"]
                .iter()
                .map(|s| HeaderChoice::plain(s))
                .collect(),
            payload_len_bytes: 26,
        },
        PacketSpec {
            header_sequence: vec![
                HeaderChoice::plain("ethernet"),
                HeaderChoice::plain("ipv6"),
                HeaderChoice {
                    state: "ext1".into(),
                    overrides: BTreeMap::from([("hdrExtLen".into(), 1)]),
                },
                HeaderChoice::plain("udp"),
            ],
            payload_len_bytes: 64,
        },
        PacketSpec {
            header_sequence: vec![
                HeaderChoice::plain("ethernet"),
                HeaderChoice {
                    state: "ipv4".into(),
                    overrides: BTreeMap::from([("ihl".into(), 8)]),
                },
                HeaderChoice::plain("icmp"),
            ],
            payload_len_bytes: 18,
        },
    ];

    let mut packets = Vec::new();
    let mut phvs = Vec::new();
    for (i, spec) in specs.iter().enumerate() {
        let bytes = gen_packet(&g, spec, 0xFEED + i as u64).unwrap();
        let parsed = reference_parse(&g, &bytes, i as u64);
        assert!(parsed.exception.is_none());
        phvs.extend(parsed.phvs);
        packets.push((bytes, (1_700_000_000 + i as u32, 1000 * i as u32)));
    }

    let mut pcap = Vec::new();
    write_pcap(&mut pcap, &packets, false).unwrap();
    std::fs::write(format!("{dir}/replay.pcap"), pcap).unwrap();
    std::fs::write(format!("{dir}/replay_golden.jsonl"), phvs_to_jsonl(&phvs)).unwrap();
    println!("wrote replay.pcap ({} packets) and replay_golden.jsonl", packets.len());
}
