//! Compilation of the balanced graph into per-engine configurations and the
//! pipeline plan artifact.
//!
//! Everything an engine does at run time is table-driven: key match tables,
//! size lookup tables for variable headers, and shift ROMs that replace
//! dynamic barrel shifters. ROM contents are enumerated here at compile time
//! and serialized with the plan so the simulator consumes configuration only.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::LeveledGraph;
use crate::model::{DefaultKind, HeaderId, ParseGraph, ParseState, TransitionTarget, END_NODE};

#[derive(Debug, Error)]
pub enum CompileError {
    #[error("bus width {0} must be a positive multiple of 8")]
    BadBusWidth(u32),
    #[error("state `{state}`: key [{offset}, {offset_end}) straddles a {bus}-bit bus word boundary; use a larger bus or split the key")]
    KeyStraddlesWord {
        state: String,
        offset: u32,
        offset_end: u32,
        bus: u32,
    },
    #[error("state `{0}` references unknown header type `{1}`")]
    UnknownHeaderType(String, String),
    #[error("no level assigned to node `{0}`")]
    MissingLevel(String),
    #[error("plan artifact is malformed: {0}")]
    BadPlan(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct MatchEntry {
    pub value: u64,
    pub next: HeaderId,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DefaultAction {
    Goto { next: HeaderId },
    End,
    Reject,
}

/// Precomputed shift tables for one header type on a given bus width.
///
/// `align_right[s] = s mod bus` and `align_left[s] = (bus - s mod bus) mod
/// bus` for every valid header size `s`; `extract_shifts[w]` is the PHV bit
/// offset where bus word `w` of the header accumulates.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ShiftRom {
    pub extract_shifts: BTreeMap<u32, u32>,
    pub align_left: BTreeMap<u32, u32>,
    pub align_right: BTreeMap<u32, u32>,
}

/// Compile-time configuration of one header engine.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct HeaderLayout {
    pub this_header: HeaderId,
    pub name: String,
    pub max_size_bits: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub key_location_bits: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub key_width_bits: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub key_mask: Option<u64>,
    /// Bus word (within the engine's frame) that carries the key.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub key_word_index: Option<u32>,
    pub match_table: Vec<MatchEntry>,
    pub default_action: DefaultAction,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed_size_bits: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub size_lut: Option<BTreeMap<u64, u32>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub size_field_offset_bits: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub size_field_width_bits: Option<u32>,
    pub last_header: bool,
    pub rom: ShiftRom,
}

impl HeaderLayout {
    pub fn is_fixed_size(&self) -> bool {
        self.fixed_size_bits.is_some()
    }
}

/// The leveled arrangement of engines plus everything the simulator needs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct PipelinePlan {
    pub bus_width_bits: u32,
    pub depth_cycles: u32,
    pub root_header: HeaderId,
    pub end_header: HeaderId,
    pub levels: Vec<Vec<HeaderId>>,
    pub mux_levels: BTreeSet<usize>,
    pub engines: BTreeMap<HeaderId, HeaderLayout>,
}

impl PipelinePlan {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<PipelinePlan, CompileError> {
        let plan: PipelinePlan =
            serde_json::from_str(text).map_err(|e| CompileError::BadPlan(e.to_string()))?;
        plan.check()?;
        Ok(plan)
    }

    pub fn header_name(&self, id: HeaderId) -> &str {
        if id == self.end_header {
            END_NODE
        } else {
            self.engines
                .get(&id)
                .map(|l| l.name.as_str())
                .unwrap_or("?")
        }
    }

    pub fn total_engines(&self) -> usize {
        self.engines.len()
    }

    fn check(&self) -> Result<(), CompileError> {
        if self.bus_width_bits == 0 || !self.bus_width_bits.is_multiple_of(8) {
            return Err(CompileError::BadBusWidth(self.bus_width_bits));
        }
        if self.depth_cycles as usize != self.levels.len() + 1 {
            return Err(CompileError::BadPlan(format!(
                "depth_cycles {} != levels {} + 1",
                self.depth_cycles,
                self.levels.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for level in &self.levels {
            for id in level {
                if !self.engines.contains_key(id) {
                    return Err(CompileError::BadPlan(format!(
                        "level references unknown engine {id}"
                    )));
                }
                if !seen.insert(*id) {
                    return Err(CompileError::BadPlan(format!(
                        "engine {id} appears in more than one level"
                    )));
                }
            }
        }
        if seen.len() != self.engines.len() {
            return Err(CompileError::BadPlan(
                "some engines are not placed in any level".into(),
            ));
        }
        Ok(())
    }
}

/// Builds the engine configuration for one parse state.
pub fn build_header_layout(
    graph: &ParseGraph,
    state: &ParseState,
    ids: &BTreeMap<String, HeaderId>,
    bus_width: u32,
) -> Result<HeaderLayout, CompileError> {
    if bus_width == 0 || !bus_width.is_multiple_of(8) {
        return Err(CompileError::BadBusWidth(bus_width));
    }
    let ht = graph
        .header_types
        .get(&state.header_type)
        .ok_or_else(|| CompileError::UnknownHeaderType(state.name.clone(), state.header_type.clone()))?;

    let (key_location_bits, key_width_bits, key_mask, key_word_index) = match &state.key {
        None => (None, None, None, None),
        Some(k) => {
            if k.offset_bits % bus_width + k.width_bits > bus_width {
                return Err(CompileError::KeyStraddlesWord {
                    state: state.name.clone(),
                    offset: k.offset_bits,
                    offset_end: k.offset_bits + k.width_bits,
                    bus: bus_width,
                });
            }
            let mask = if k.width_bits == 64 {
                u64::MAX
            } else {
                (1u64 << k.width_bits) - 1
            };
            (
                Some(k.offset_bits),
                Some(k.width_bits),
                Some(mask),
                Some(k.offset_bits / bus_width),
            )
        }
    };

    let match_table = state
        .transitions
        .iter()
        .map(|t| MatchEntry {
            value: t.match_value,
            next: match &t.next_state {
                TransitionTarget::State(s) => ids[s],
                TransitionTarget::End => ids[END_NODE],
            },
        })
        .collect();
    let default_action = match &state.default_transition {
        DefaultKind::State(s) => DefaultAction::Goto { next: ids[s] },
        DefaultKind::End => DefaultAction::End,
        DefaultKind::Reject => DefaultAction::Reject,
    };

    let (size_field_offset_bits, size_field_width_bits) = match ht.size_field_location() {
        Some((o, w)) => (Some(o), Some(w)),
        None => (None, None),
    };
    let size_lut = if ht.is_fixed_size() {
        None
    } else {
        Some(
            ht.valid_size_field_values
                .iter()
                .flatten()
                .filter_map(|&v| ht.size_for_value(v).map(|s| (v, s)))
                .collect(),
        )
    };

    Ok(HeaderLayout {
        this_header: ids[&state.name],
        name: state.name.clone(),
        max_size_bits: ht.max_size_bits,
        key_location_bits,
        key_width_bits,
        key_mask,
        key_word_index,
        match_table,
        default_action,
        fixed_size_bits: ht.is_fixed_size().then_some(ht.max_size_bits),
        size_lut,
        size_field_offset_bits,
        size_field_width_bits,
        last_header: state.transitions.is_empty(),
        rom: build_shift_roms(ht, bus_width)?,
    })
}

/// Enumerates the shift ROM contents for a header type: alignment shifts for
/// every valid size plus the per-word extraction offsets.
pub fn build_shift_roms(
    ht: &crate::model::HeaderTypeSpec,
    bus_width: u32,
) -> Result<ShiftRom, CompileError> {
    if bus_width == 0 || !bus_width.is_multiple_of(8) {
        return Err(CompileError::BadBusWidth(bus_width));
    }
    let words = ht.max_size_bits.div_ceil(bus_width);
    let extract_shifts = (0..words).map(|w| (w, w * bus_width)).collect();
    let mut align_left = BTreeMap::new();
    let mut align_right = BTreeMap::new();
    for s in ht.valid_sizes() {
        let r = s % bus_width;
        align_right.insert(s, r);
        align_left.insert(s, (bus_width - r) % bus_width);
    }
    Ok(ShiftRom {
        extract_shifts,
        align_left,
        align_right,
    })
}

/// Arranges the per-state layouts along the balanced graph's levels.
pub fn build_pipeline_plan(
    lg: &LeveledGraph,
    layouts: &BTreeMap<String, HeaderLayout>,
    bus_width: u32,
) -> Result<PipelinePlan, CompileError> {
    if bus_width == 0 || !bus_width.is_multiple_of(8) {
        return Err(CompileError::BadBusWidth(bus_width));
    }
    let g = &lg.base;
    // ids were assigned over the original graph; the layouts carry them
    let id_of = |name: &str| -> Result<HeaderId, CompileError> {
        layouts
            .get(name)
            .map(|l| l.this_header)
            .ok_or_else(|| CompileError::MissingLevel(name.to_string()))
    };
    let mut by_level: BTreeMap<u32, Vec<HeaderId>> = BTreeMap::new();
    for name in g.states.keys() {
        let level = *lg
            .level
            .get(name)
            .ok_or_else(|| CompileError::MissingLevel(name.clone()))?;
        by_level.entry(level).or_default().push(id_of(name)?);
    }
    let mut levels = Vec::new();
    for (expect, (level, mut engines)) in by_level.into_iter().enumerate() {
        if level as usize != expect {
            return Err(CompileError::MissingLevel(format!(
                "no engine at level {expect}"
            )));
        }
        engines.sort_unstable();
        levels.push(engines);
    }
    let mux_levels = levels
        .iter()
        .enumerate()
        .filter(|(_, e)| e.len() > 1)
        .map(|(i, _)| i)
        .collect();
    let engines: BTreeMap<HeaderId, HeaderLayout> = layouts
        .values()
        .map(|l| (l.this_header, l.clone()))
        .collect();
    let plan = PipelinePlan {
        bus_width_bits: bus_width,
        depth_cycles: levels.len() as u32 + 1,
        root_header: id_of(&g.root)?,
        end_header: g.end_id(),
        levels,
        mux_levels,
        engines,
    };
    plan.check()?;
    Ok(plan)
}

/// Full compilation: graph transforms plus layout generation.
pub fn compile_plan(g: &ParseGraph, bus_width: u32) -> Result<PipelinePlan, CompileError> {
    let lg = crate::graph::balance_pipeline_graph(g)
        .map_err(|e| CompileError::BadPlan(e.to_string()))?;
    let ids = g.header_ids();
    let mut layouts = BTreeMap::new();
    for (name, state) in &g.states {
        layouts.insert(
            name.clone(),
            build_header_layout(g, state, &ids, bus_width)?,
        );
    }
    build_pipeline_plan(&lg, &layouts, bus_width)
}

/// Resource and performance summary of a plan.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct PlanStats {
    pub depth_cycles: u32,
    pub num_levels: usize,
    pub engines_per_level: Vec<usize>,
    pub total_engines: usize,
    pub mux_levels: Vec<usize>,
    pub match_table_entries: usize,
    pub rom_entries: usize,
    pub rom_bits: u64,
    /// Only present when a clock frequency was supplied.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub throughput_gbps: Option<f64>,
}

/// Computes plan statistics. ROM bits are a resource proxy: each entry is
/// charged the width of its value domain (shift amounts need
/// `ceil(log2(bus))` bits, sizes `ceil(log2(max_size + 1))`).
pub fn plan_stats(plan: &PipelinePlan, clock_mhz: Option<f64>) -> PlanStats {
    let shift_value_bits = u64::from(32 - (plan.bus_width_bits - 1).leading_zeros());
    let mut match_table_entries = 0usize;
    let mut rom_entries = 0usize;
    let mut rom_bits = 0u64;
    for l in plan.engines.values() {
        match_table_entries += l.match_table.len();
        let shifts =
            l.rom.extract_shifts.len() + l.rom.align_left.len() + l.rom.align_right.len();
        rom_entries += shifts;
        rom_bits += shifts as u64 * shift_value_bits;
        if let Some(lut) = &l.size_lut {
            rom_entries += lut.len();
            let size_bits = u64::from(32 - l.max_size_bits.leading_zeros());
            rom_bits += lut.len() as u64 * size_bits;
        }
    }
    PlanStats {
        depth_cycles: plan.depth_cycles,
        num_levels: plan.levels.len(),
        engines_per_level: plan.levels.iter().map(|l| l.len()).collect(),
        total_engines: plan.total_engines(),
        mux_levels: plan.mux_levels.iter().copied().collect(),
        match_table_entries,
        rom_entries,
        rom_bits,
        throughput_gbps: clock_mhz.map(|mhz| plan.bus_width_bits as f64 * mhz / 1000.0),
    }
}

impl std::fmt::Display for PlanStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "depth_cycles        {}", self.depth_cycles)?;
        writeln!(f, "levels              {}", self.num_levels)?;
        writeln!(
            f,
            "engines_per_level   {}",
            self.engines_per_level
                .iter()
                .map(|n| n.to_string())
                .collect::<Vec<_>>()
                .join(",")
        )?;
        writeln!(f, "total_engines       {}", self.total_engines)?;
        writeln!(
            f,
            "mux_levels          {}",
            self.mux_levels
                .iter()
                .map(|n| n.to_string())
                .collect::<Vec<_>>()
                .join(",")
        )?;
        writeln!(f, "match_table_entries {}", self.match_table_entries)?;
        writeln!(f, "rom_entries         {}", self.rom_entries)?;
        writeln!(f, "rom_bits            {}", self.rom_bits)?;
        if let Some(t) = self.throughput_gbps {
            writeln!(f, "throughput          {t} Gb/s")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bits::Bits;
    use crate::model::load_parser_spec;

    fn fixture(name: &str) -> ParseGraph {
        let path = format!("{}/fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
        load_parser_spec(&std::fs::read_to_string(path).unwrap()).unwrap()
    }

    #[test]
    fn ethernet_layout_on_320_bit_bus() {
        let g = fixture("simple_parser.json");
        let ids = g.header_ids();
        let l = build_header_layout(&g, &g.states["ethernet"], &ids, 320).unwrap();
        assert_eq!(l.key_word_index, Some(0));
        assert_eq!(l.key_mask, Some(0xFFFF));
        assert_eq!(l.key_location_bits, Some(96));
        assert_eq!(l.fixed_size_bits, Some(112));
        assert!(!l.last_header);
        let next_of = |v: u64| l.match_table.iter().find(|e| e.value == v).unwrap().next;
        assert_eq!(next_of(0x0800), ids["ipv4"]);
        assert_eq!(next_of(0x86DD), ids["ipv6"]);
    }

    #[test]
    fn terminal_icmp_layout() {
        let g = fixture("simple_parser.json");
        let ids = g.header_ids();
        let l = build_header_layout(&g, &g.states["icmp"], &ids, 320).unwrap();
        assert!(l.last_header);
        assert!(l.match_table.is_empty());
        assert_eq!(l.default_action, DefaultAction::End);
        assert_eq!(l.key_word_index, None);
    }

    #[test]
    fn ipv4_size_lut_brute_force() {
        let g = fixture("simple_parser.json");
        let ids = g.header_ids();
        let l = build_header_layout(&g, &g.states["ipv4"], &ids, 320).unwrap();
        let lut = l.size_lut.as_ref().unwrap();
        assert_eq!(lut.len(), 11);
        for v in 5u64..=15 {
            assert_eq!(lut[&v], 32 * v as u32);
        }
        assert_eq!(l.size_field_offset_bits, Some(4));
        assert_eq!(l.size_field_width_bits, Some(4));
    }

    #[test]
    fn shift_rom_values() {
        let g = fixture("simple_parser.json");
        let eth = &g.header_types["ethernet_t"];
        let rom = build_shift_roms(eth, 320).unwrap();
        assert_eq!(rom.align_right[&112], 112);
        assert_eq!(rom.align_left[&112], 208);
        assert_eq!(rom.extract_shifts, BTreeMap::from([(0, 0)]));

        let ipv6 = &g.header_types["ipv6_t"];
        let rom = build_shift_roms(ipv6, 320).unwrap();
        assert_eq!(rom.align_right[&320], 0);
        assert_eq!(rom.align_left[&320], 0);

        let ipv4 = &g.header_types["ipv4_t"];
        let rom = build_shift_roms(ipv4, 320).unwrap();
        let sizes: Vec<u32> = rom.align_right.keys().copied().collect();
        assert_eq!(sizes, (5..=15).map(|v| 32 * v).collect::<Vec<u32>>());
        assert_eq!(rom.align_right[&480], 160);
        assert_eq!(rom.extract_shifts, BTreeMap::from([(0, 0), (1, 320)]));
    }

    #[test]
    fn alignment_roms_splice_streams() {
        // composing the two ROM shifts must reconstruct the stream with the
        // first `s` bits removed, for every header type and valid size
        let g = fixture("full_parser.json");
        let bus = 320u32;
        for ht in g.header_types.values() {
            let rom = build_shift_roms(ht, bus).unwrap();
            for s in ht.valid_sizes() {
                let bytes: Vec<u8> = (0..120u32).map(|i| (i * 13 + 7) as u8).collect();
                let stream = Bits::from_bytes(&bytes);
                let n_words = bytes.len() * 8 / bus as usize;
                let mut aligned_words = Vec::new();
                let mut delay = Bits::zero(bus as usize);
                let boundary_word = (s / bus) as usize + usize::from(s % bus != 0);
                for w in 0..n_words {
                    let cur = stream.slice(w * bus as usize, bus as usize);
                    if w >= boundary_word {
                        let r = rom.align_right[&s] as usize;
                        let out = if r == 0 {
                            cur.clone()
                        } else {
                            let mut o = delay.shifted_left(r);
                            o.or_assign(&cur.shifted_right(rom.align_left[&s] as usize));
                            o
                        };
                        aligned_words.push(out);
                    }
                    delay = cur;
                }
                let naive = stream.slice(s as usize, stream.len() - s as usize);
                for (j, w) in aligned_words.iter().enumerate() {
                    let lo = j * bus as usize;
                    let take = (naive.len() - lo).min(bus as usize);
                    assert_eq!(
                        w.slice(0, take),
                        naive.slice(lo, take),
                        "{} size {s} word {j}",
                        ht.name
                    );
                }
            }
        }
    }

    #[test]
    fn fig5_plan_levels_and_depth() {
        let g = fixture("fig5.json");
        let plan = compile_plan(&g, 320).unwrap();
        let names: Vec<Vec<&str>> = plan
            .levels
            .iter()
            .map(|l| l.iter().map(|id| plan.header_name(*id)).collect())
            .collect();
        assert_eq!(
            names,
            vec![
                vec!["ETH"],
                vec!["IPv4", "IPv6"],
                vec!["EXT"],
                vec!["TCP", "UDP"]
            ]
        );
        assert_eq!(plan.mux_levels, BTreeSet::from([1, 3]));
        assert_eq!(plan.depth_cycles, 5);
    }

    #[test]
    fn single_header_parser_depth_two() {
        let text = r#"{
            "header_types": [{"name": "t", "fields": [{"name": "f", "width": 112}]}],
            "parse_states": [{"name": "only", "header_type": "t", "default": "END"}],
            "root": "only"
        }"#;
        let g = load_parser_spec(text).unwrap();
        let plan = compile_plan(&g, 320).unwrap();
        assert_eq!(plan.levels.len(), 1);
        assert!(plan.mux_levels.is_empty());
        assert_eq!(plan.depth_cycles, 2);
    }

    #[test]
    fn simple_parser_depth_six_and_full_depth_eight() {
        let plan = compile_plan(&fixture("simple_parser.json"), 320).unwrap();
        assert_eq!(plan.depth_cycles, 6);
        let plan = compile_plan(&fixture("full_parser.json"), 320).unwrap();
        assert_eq!(plan.depth_cycles, 8);
    }

    #[test]
    fn stats_throughput() {
        let plan = compile_plan(&fixture("simple_parser.json"), 320).unwrap();
        let s = plan_stats(&plan, Some(312.5));
        assert_eq!(s.throughput_gbps, Some(100.0));
        let plan64 = compile_plan(&fixture("simple_parser.json"), 64).unwrap();
        let s = plan_stats(&plan64, Some(156.25));
        assert_eq!(s.throughput_gbps, Some(10.0));
        let s = plan_stats(&plan, None);
        assert_eq!(s.throughput_gbps, None);
        assert!(!s.to_string().contains("throughput"));
    }

    #[test]
    fn depth_invariant_under_engine_reordering() {
        let g = fixture("simple_parser.json");
        let mut plan = compile_plan(&g, 320).unwrap();
        let depth = plan.depth_cycles;
        for level in &mut plan.levels {
            level.reverse();
        }
        assert_eq!(plan.depth_cycles, depth);
    }

    #[test]
    fn key_straddle_is_a_compile_error() {
        let text = r#"{
            "header_types": [{"name": "t", "fields": [{"name": "a", "width": 60}, {"name": "k", "width": 16}, {"name": "b", "width": 52}]}],
            "parse_states": [
                {"name": "s", "header_type": "t", "key": {"offset": 60, "width": 16},
                 "transitions": [{"value": 1, "next": "END"}], "default": "END"}
            ],
            "root": "s"
        }"#;
        let g = load_parser_spec(text).unwrap();
        let err = compile_plan(&g, 64).unwrap_err();
        assert!(matches!(err, CompileError::KeyStraddlesWord { .. }), "{err}");
        assert!(compile_plan(&g, 128).is_ok());
    }

    #[test]
    fn plan_json_roundtrip() {
        let plan = compile_plan(&fixture("fig5.json"), 320).unwrap();
        let text = plan.to_json();
        let back = PipelinePlan::from_json(&text).unwrap();
        assert_eq!(plan, back);
    }
}
