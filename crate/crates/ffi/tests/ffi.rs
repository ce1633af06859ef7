//! Exercises the C entry points the way a foreign binding would: through
//! raw pointers and status codes.

use std::ffi::{CStr, CString};
use std::ptr;

use parsepipe_ffi::*;

fn fixture(name: &str) -> CString {
    let path = format!(
        "{}/../core/fixtures/{name}",
        env!("CARGO_MANIFEST_DIR")
    );
    CString::new(std::fs::read_to_string(path).unwrap()).unwrap()
}

fn take_string(p: *mut std::ffi::c_char) -> String {
    assert!(!p.is_null());
    let s = unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string();
    unsafe { pp_string_free(p) };
    s
}

#[test]
fn full_flow_through_the_c_abi() {
    unsafe {
        let spec = fixture("simple_parser.json");
        let mut graph: *mut PpGraph = ptr::null_mut();
        assert_eq!(pp_graph_load(spec.as_ptr(), &mut graph), PpStatus::Ok);

        let stage = CString::new("balanced").unwrap();
        let mut dot: *mut std::ffi::c_char = ptr::null_mut();
        assert_eq!(pp_graph_dot(graph, stage.as_ptr(), &mut dot), PpStatus::Ok);
        assert!(take_string(dot).starts_with("digraph parse_graph {"));

        let mut plan: *mut PpPlan = ptr::null_mut();
        assert_eq!(pp_plan_build(graph, 320, &mut plan), PpStatus::Ok);
        assert_eq!(pp_plan_depth_cycles(plan), 6);
        assert_eq!(pp_plan_bus_width_bits(plan), 320);

        // plan JSON round trip through the ABI
        let mut json: *mut std::ffi::c_char = ptr::null_mut();
        assert_eq!(pp_plan_to_json(plan, &mut json), PpStatus::Ok);
        let json_text = CString::new(take_string(json)).unwrap();
        let mut plan2: *mut PpPlan = ptr::null_mut();
        assert_eq!(pp_plan_from_json(json_text.as_ptr(), &mut plan2), PpStatus::Ok);
        assert_eq!(pp_plan_depth_cycles(plan2), 6);

        let mut sim: *mut PpPipeline = ptr::null_mut();
        assert_eq!(pp_pipeline_new(plan, &mut sim), PpStatus::Ok);

        // 64-byte ICMP/IPv4 packet
        let mut packet = Vec::new();
        packet.extend_from_slice(&[2, 0, 0, 0, 0, 1, 2, 0, 0, 0, 0, 2, 0x08, 0x00]);
        let mut ipv4 = vec![0x45u8, 0, 0, 0, 0, 0, 0, 0, 0x40];
        ipv4.push(1); // protocol icmp
        ipv4.extend_from_slice(&[0u8; 10]);
        packet.extend_from_slice(&ipv4);
        packet.extend_from_slice(&[8, 0, 0, 0, 0, 0, 0, 0]); // icmp
        packet.resize(64, 0xAB);

        let mut phvs: *mut std::ffi::c_char = ptr::null_mut();
        assert_eq!(
            pp_pipeline_parse(sim, packet.as_ptr(), packet.len(), &mut phvs),
            PpStatus::Ok
        );
        let jsonl = take_string(phvs);
        let headers: Vec<String> = jsonl.lines().map(header_field).collect();
        assert_eq!(headers, vec!["ethernet", "ipv4", "icmp"]);

        pp_pipeline_free(sim);
        pp_plan_free(plan2);
        pp_plan_free(plan);
        pp_graph_free(graph);
    }
}

// plain string scrape; the FFI crate deliberately has no serde dependency
fn header_field(line: &str) -> String {
    let key = "\"header\":\"";
    let start = line.find(key).expect("header field") + key.len();
    let end = line[start..].find('"').unwrap() + start;
    line[start..end].to_string()
}

#[test]
fn errors_set_status_and_message() {
    unsafe {
        let mut graph: *mut PpGraph = ptr::null_mut();
        let bad = CString::new("{\"header_types\": 5}").unwrap();
        assert_eq!(pp_graph_load(bad.as_ptr(), &mut graph), PpStatus::Load);
        let msg = CStr::from_ptr(pp_last_error()).to_str().unwrap();
        assert!(msg.contains("header_types"), "{msg}");

        assert_eq!(pp_graph_load(ptr::null(), &mut graph), PpStatus::NullArg);

        let spec = fixture("fig5.json");
        assert_eq!(pp_graph_load(spec.as_ptr(), &mut graph), PpStatus::Ok);
        let mut plan: *mut PpPlan = ptr::null_mut();
        // bus width not a multiple of 8
        assert_eq!(pp_plan_build(graph, 13, &mut plan), PpStatus::Compile);
        let mut dot: *mut std::ffi::c_char = ptr::null_mut();
        let stage = CString::new("sideways").unwrap();
        assert_eq!(pp_graph_dot(graph, stage.as_ptr(), &mut dot), PpStatus::Load);
        pp_graph_free(graph);
    }
}
