//! Parser intermediate representation and the JSON specification loader.
//!
//! The input format is a small, documented subset of a P4 compiler back-end
//! dump: header type declarations plus a table of parse states with match
//! keys and transitions. All offsets and widths are in bits, network order
//! (bit 0 is the MSB of the first byte).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Dense id assigned to each header/state in deterministic topological order.
pub type HeaderId = u16;

/// Name of the synthetic terminal node. Not a real state; a transition to it
/// means the parse completed.
pub const END_NODE: &str = "END";

const REJECT_KEYWORD: &str = "REJECT";

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("invalid JSON at {path}: {message}")]
    Json { path: String, message: String },
    #[error("{location}: {message}")]
    Schema { location: String, message: String },
    #[error("parse graph has a cycle: {}", cycle.join(" -> "))]
    Cycle { cycle: Vec<String> },
    #[error("state `{0}` is unreachable from the root")]
    Unreachable(String),
    #[error("state `{0}` cannot reach END")]
    NoPathToEnd(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Severity {
    Error,
    Warning,
}

/// One validation finding. `validate_graph` returns these instead of failing
/// fast so callers can report everything at once.
#[derive(Debug, Clone)]
pub struct Diagnostic {
    pub severity: Severity,
    pub kind: DiagnosticKind,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DiagnosticKind {
    Cycle(Vec<String>),
    Unreachable(String),
    NoPathToEnd(String),
    RootHasPredecessors(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldSpec {
    pub name: String,
    /// Width in bits; 0 marks the variable-size remainder field.
    pub width_bits: u32,
    pub is_size_field: bool,
}

/// Affine size expression `multiplier * field + addend`, in bits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SizeExpr {
    pub field: String,
    pub multiplier: i64,
    pub addend: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeaderTypeSpec {
    pub name: String,
    pub fields: Vec<FieldSpec>,
    pub max_size_bits: u32,
    pub size_expr: Option<SizeExpr>,
    pub valid_size_field_values: Option<BTreeSet<u64>>,
}

impl HeaderTypeSpec {
    pub fn is_fixed_size(&self) -> bool {
        self.size_expr.is_none()
    }

    /// Sum of the fixed field widths (the varbit remainder contributes 0).
    pub fn fixed_width_sum(&self) -> u32 {
        self.fields.iter().map(|f| f.width_bits).sum()
    }

    /// Bit offset of a named field from the start of the header.
    pub fn field_offset(&self, name: &str) -> Option<u32> {
        let mut off = 0;
        for f in &self.fields {
            if f.name == name {
                return Some(off);
            }
            off += f.width_bits;
        }
        None
    }

    pub fn field(&self, name: &str) -> Option<&FieldSpec> {
        self.fields.iter().find(|f| f.name == name)
    }

    /// Offset and width of the size field, when the header is variable-sized.
    pub fn size_field_location(&self) -> Option<(u32, u32)> {
        let expr = self.size_expr.as_ref()?;
        let off = self.field_offset(&expr.field)?;
        let w = self.field(&expr.field)?.width_bits;
        Some((off, w))
    }

    /// Header size in bits for a given size-field value, if valid.
    pub fn size_for_value(&self, v: u64) -> Option<u32> {
        let expr = self.size_expr.as_ref()?;
        if !self
            .valid_size_field_values
            .as_ref()
            .is_some_and(|s| s.contains(&v))
        {
            return None;
        }
        let bits = expr.multiplier * v as i64 + expr.addend;
        u32::try_from(bits).ok()
    }

    /// Every size this header can take, ascending.
    pub fn valid_sizes(&self) -> Vec<u32> {
        match &self.size_expr {
            None => vec![self.max_size_bits],
            Some(_) => {
                let mut out: Vec<u32> = self
                    .valid_size_field_values
                    .iter()
                    .flatten()
                    .filter_map(|&v| self.size_for_value(v))
                    .collect();
                out.sort_unstable();
                out.dedup();
                out
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransitionKeySpec {
    pub offset_bits: u32,
    pub width_bits: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransitionTarget {
    State(String),
    End,
}

impl TransitionTarget {
    pub fn node_name(&self) -> &str {
        match self {
            TransitionTarget::State(s) => s,
            TransitionTarget::End => END_NODE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionEntry {
    pub match_value: u64,
    pub next_state: TransitionTarget,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseState {
    pub name: String,
    pub header_type: String,
    pub key: Option<TransitionKeySpec>,
    pub transitions: Vec<TransitionEntry>,
    pub default_transition: DefaultKind,
    pub is_accept_path_terminal: bool,
}

/// Where an unmatched key (or keyless state) goes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DefaultKind {
    State(String),
    End,
    Reject,
}

/// The parse graph: states plus the derived edge relation over state names
/// and the `END` node. Graph transformations rewrite `edges` only; the
/// states' match tables are the routing semantics and stay untouched.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseGraph {
    pub header_types: BTreeMap<String, HeaderTypeSpec>,
    pub states: BTreeMap<String, ParseState>,
    pub root: String,
    pub edges: BTreeSet<(String, String)>,
}

impl ParseGraph {
    /// Builds and validates a graph from resolved parts. The edge set is
    /// derived from transitions and defaults.
    pub fn from_parts(
        header_types: BTreeMap<String, HeaderTypeSpec>,
        states: BTreeMap<String, ParseState>,
        root: String,
    ) -> Result<ParseGraph, LoadError> {
        let edges = derive_edges(&states);
        let g = ParseGraph {
            header_types,
            states,
            root,
            edges,
        };
        g.check_semantics()?;
        for d in validate_graph(&g) {
            if d.severity == Severity::Error {
                return Err(match d.kind {
                    DiagnosticKind::Cycle(cycle) => LoadError::Cycle { cycle },
                    DiagnosticKind::Unreachable(s) => LoadError::Unreachable(s),
                    DiagnosticKind::NoPathToEnd(s) => LoadError::NoPathToEnd(s),
                    DiagnosticKind::RootHasPredecessors(_) => LoadError::Schema {
                        location: "root".into(),
                        message: d.message,
                    },
                });
            }
        }
        Ok(g)
    }

    /// Same graph with a rewritten edge set (used by the transform passes).
    pub fn with_edges(&self, edges: BTreeSet<(String, String)>) -> ParseGraph {
        ParseGraph {
            header_types: self.header_types.clone(),
            states: self.states.clone(),
            root: self.root.clone(),
            edges,
        }
    }

    /// All node names: the states plus `END`.
    pub fn node_names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.states.keys().cloned().collect();
        v.push(END_NODE.to_string());
        v
    }

    pub fn successors<'a>(&'a self, node: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.edges
            .iter()
            .filter(move |(f, _)| f == node)
            .map(|(_, t)| t.as_str())
    }

    /// Dense header ids in deterministic topological order; `END` gets the
    /// highest id. Requires an acyclic graph (guaranteed after validation).
    pub fn header_ids(&self) -> BTreeMap<String, HeaderId> {
        let order = self.topo_order();
        let mut ids = BTreeMap::new();
        let mut next: HeaderId = 0;
        for name in order {
            if name != END_NODE {
                ids.insert(name, next);
                next += 1;
            }
        }
        ids.insert(END_NODE.to_string(), next);
        ids
    }

    pub fn end_id(&self) -> HeaderId {
        self.states.len() as HeaderId
    }

    /// Kahn's algorithm with a lexicographic ready queue so the order is
    /// stable across runs.
    pub fn topo_order(&self) -> Vec<String> {
        let mut indeg: BTreeMap<String, usize> =
            self.node_names().into_iter().map(|n| (n, 0)).collect();
        for (_, t) in &self.edges {
            if let Some(d) = indeg.get_mut(t) {
                *d += 1;
            }
        }
        let mut ready: BTreeSet<String> = indeg
            .iter()
            .filter(|(_, &d)| d == 0)
            .map(|(n, _)| n.clone())
            .collect();
        let mut out = Vec::with_capacity(indeg.len());
        while let Some(n) = ready.iter().next().cloned() {
            ready.remove(&n);
            for (f, t) in &self.edges {
                if *f == n {
                    let d = indeg.get_mut(t).expect("edge target known");
                    *d -= 1;
                    if *d == 0 {
                        ready.insert(t.clone());
                    }
                }
            }
            out.push(n);
        }
        // leftovers (only possible on cyclic graphs) appended in name order
        for n in indeg.keys() {
            if !out.contains(n) {
                out.push(n.clone());
            }
        }
        out
    }

    fn check_semantics(&self) -> Result<(), LoadError> {
        for (i, (name, st)) in self.states.iter().enumerate() {
            let loc = |what: &str| format!("parse_states[{i}] (`{name}`).{what}");
            let ht = self.header_types.get(&st.header_type).ok_or_else(|| LoadError::Schema {
                location: loc("header_type"),
                message: format!("unknown header type `{}`", st.header_type),
            })?;
            if let Some(key) = &st.key {
                if key.width_bits == 0 || key.width_bits > 64 {
                    return Err(LoadError::Schema {
                        location: loc("key.width"),
                        message: format!("key width {} must be in 1..=64", key.width_bits),
                    });
                }
                // the key must exist in every instance of the header, so it
                // has to fit inside the smallest valid size
                let min_size = ht.valid_sizes().first().copied().unwrap_or(ht.max_size_bits);
                if key.offset_bits + key.width_bits > min_size {
                    return Err(LoadError::Schema {
                        location: loc("key"),
                        message: format!(
                            "key [{}, {}) exceeds the minimum header size {}",
                            key.offset_bits,
                            key.offset_bits + key.width_bits,
                            min_size
                        ),
                    });
                }
            }
            if !st.transitions.is_empty() && st.key.is_none() {
                return Err(LoadError::Schema {
                    location: loc("transitions"),
                    message: "state has transitions but no key".into(),
                });
            }
            if st.transitions.is_empty()
                && matches!(st.default_transition, DefaultKind::State(_))
            {
                return Err(LoadError::Schema {
                    location: loc("default"),
                    message: "state with no transitions must default to END or REJECT".into(),
                });
            }
            let mut seen = BTreeSet::new();
            for (j, t) in st.transitions.iter().enumerate() {
                let key = st.key.as_ref().expect("checked above");
                if key.width_bits < 64 && t.match_value >= 1u64 << key.width_bits {
                    return Err(LoadError::Schema {
                        location: loc(&format!("transitions[{j}].value")),
                        message: format!(
                            "match value {:#x} does not fit key width {}",
                            t.match_value, key.width_bits
                        ),
                    });
                }
                if !seen.insert(t.match_value) {
                    return Err(LoadError::Schema {
                        location: loc(&format!("transitions[{j}].value")),
                        message: format!("duplicate match value {:#x}", t.match_value),
                    });
                }
                if let TransitionTarget::State(s) = &t.next_state {
                    if !self.states.contains_key(s) {
                        return Err(LoadError::Schema {
                            location: loc(&format!("transitions[{j}].next")),
                            message: format!("unknown next state `{s}`"),
                        });
                    }
                }
            }
            if let DefaultKind::State(s) = &st.default_transition {
                if !self.states.contains_key(s) {
                    return Err(LoadError::Schema {
                        location: loc("default"),
                        message: format!("unknown default state `{s}`"),
                    });
                }
            }
        }
        if !self.states.contains_key(&self.root) {
            return Err(LoadError::Schema {
                location: "root".into(),
                message: format!("unknown root state `{}`", self.root),
            });
        }
        Ok(())
    }
}

fn derive_edges(states: &BTreeMap<String, ParseState>) -> BTreeSet<(String, String)> {
    let mut edges = BTreeSet::new();
    for (name, st) in states {
        for t in &st.transitions {
            edges.insert((name.clone(), t.next_state.node_name().to_string()));
        }
        match &st.default_transition {
            DefaultKind::State(s) => {
                edges.insert((name.clone(), s.clone()));
            }
            DefaultKind::End => {
                edges.insert((name.clone(), END_NODE.to_string()));
            }
            DefaultKind::Reject => {}
        }
    }
    edges
}

/// Checks the structural graph invariants and returns one diagnostic per
/// violation: acyclicity, root in-degree 0, reachability from the root, and
/// END reachability from every node.
pub fn validate_graph(g: &ParseGraph) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    if let Some(cycle) = find_cycle(g) {
        out.push(Diagnostic {
            severity: Severity::Error,
            message: format!("cycle detected: {}", cycle.join(" -> ")),
            kind: DiagnosticKind::Cycle(cycle),
        });
    }
    if g.edges.iter().any(|(_, t)| t == &g.root) {
        out.push(Diagnostic {
            severity: Severity::Error,
            message: format!("root `{}` has incoming edges", g.root),
            kind: DiagnosticKind::RootHasPredecessors(g.root.clone()),
        });
    }
    // forward reachability from root
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    let mut stack = vec![g.root.as_str()];
    while let Some(n) = stack.pop() {
        if seen.insert(n) {
            stack.extend(g.successors(n));
        }
    }
    for name in g.states.keys() {
        if !seen.contains(name.as_str()) {
            out.push(Diagnostic {
                severity: Severity::Error,
                message: format!("state `{name}` is unreachable from the root"),
                kind: DiagnosticKind::Unreachable(name.clone()),
            });
        }
    }
    // backward reachability from END
    let mut reach_end: BTreeSet<&str> = BTreeSet::new();
    let mut stack = vec![END_NODE];
    while let Some(n) = stack.pop() {
        if reach_end.insert(n) {
            stack.extend(
                g.edges
                    .iter()
                    .filter(|(_, t)| t == n)
                    .map(|(f, _)| f.as_str()),
            );
        }
    }
    for name in g.states.keys() {
        if seen.contains(name.as_str()) && !reach_end.contains(name.as_str()) {
            out.push(Diagnostic {
                severity: Severity::Error,
                message: format!("state `{name}` cannot reach END"),
                kind: DiagnosticKind::NoPathToEnd(name.clone()),
            });
        }
    }
    out
}

/// One cycle as a node list `[a, b, ..., a]`, if any exists.
pub fn find_cycle(g: &ParseGraph) -> Option<Vec<String>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Color {
        White,
        Gray,
        Black,
    }
    let names = g.node_names();
    let mut color: BTreeMap<&str, Color> = names.iter().map(|n| (n.as_str(), Color::White)).collect();

    fn dfs<'a>(
        g: &'a ParseGraph,
        n: &'a str,
        color: &mut BTreeMap<&'a str, Color>,
        path: &mut Vec<&'a str>,
    ) -> Option<Vec<String>> {
        color.insert(n, Color::Gray);
        path.push(n);
        for s in g.successors(n) {
            match color.get(s).copied().unwrap_or(Color::White) {
                Color::Gray => {
                    let start = path.iter().position(|&p| p == s).unwrap_or(0);
                    let mut cyc: Vec<String> = path[start..].iter().map(|s| s.to_string()).collect();
                    cyc.push(s.to_string());
                    return Some(cyc);
                }
                Color::White => {
                    if let Some(c) = dfs(g, s, color, path) {
                        return Some(c);
                    }
                }
                Color::Black => {}
            }
        }
        path.pop();
        color.insert(n, Color::Black);
        None
    }

    let mut path = Vec::new();
    for n in &names {
        if color[n.as_str()] == Color::White {
            if let Some(c) = dfs(g, n, &mut color, &mut path) {
                return Some(c);
            }
        }
    }
    None
}

// ---------------------------------------------------------------------------
// JSON schema (serde shapes for the on-disk format)
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct RawSpec {
    header_types: Vec<RawHeaderType>,
    parse_states: Vec<RawState>,
    root: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawHeaderType {
    name: String,
    fields: Vec<RawField>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_size_bits: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    size_expr: Option<RawSizeExpr>,
    #[serde(skip_serializing_if = "Option::is_none")]
    valid_size_values: Option<Vec<u64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawField {
    name: String,
    width: RawWidth,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum RawWidth {
    Bits(u32),
    /// `"*"`: variable-size remainder.
    Star(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct RawSizeExpr {
    field: String,
    mul: i64,
    add: i64,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawState {
    name: String,
    header_type: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    key: Option<RawKey>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    transitions: Vec<RawTransition>,
    #[serde(skip_serializing_if = "Option::is_none")]
    default: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawKey {
    offset: u32,
    width: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawTransition {
    value: RawValue,
    next: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum RawValue {
    Num(u64),
    Hex(String),
}

impl RawValue {
    fn parse(&self, location: &str) -> Result<u64, LoadError> {
        match self {
            RawValue::Num(n) => Ok(*n),
            RawValue::Hex(s) => {
                let t = s.trim_start_matches("0x").trim_start_matches("0X");
                u64::from_str_radix(t, 16).map_err(|_| LoadError::Schema {
                    location: location.to_string(),
                    message: format!("cannot parse `{s}` as a hex value"),
                })
            }
        }
    }
}

/// Loads and validates a parser specification document.
pub fn load_parser_spec(text: &str) -> Result<ParseGraph, LoadError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let raw: RawSpec = serde_path_to_error::deserialize(de).map_err(|e| LoadError::Json {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    resolve(raw)
}

fn resolve(raw: RawSpec) -> Result<ParseGraph, LoadError> {
    let mut header_types = BTreeMap::new();
    for (i, ht) in raw.header_types.iter().enumerate() {
        let loc = |what: &str| format!("header_types[{i}] (`{}`).{what}", ht.name);
        let mut fields = Vec::new();
        let mut star_seen = false;
        for (j, f) in ht.fields.iter().enumerate() {
            let width_bits = match &f.width {
                RawWidth::Bits(w) => {
                    if *w == 0 {
                        return Err(LoadError::Schema {
                            location: loc(&format!("fields[{j}]")),
                            message: "explicit zero width; use \"*\" for the varbit remainder"
                                .into(),
                        });
                    }
                    *w
                }
                RawWidth::Star(s) if s == "*" => {
                    if star_seen {
                        return Err(LoadError::Schema {
                            location: loc(&format!("fields[{j}]")),
                            message: "more than one varbit remainder field".into(),
                        });
                    }
                    star_seen = true;
                    0
                }
                RawWidth::Star(s) => {
                    return Err(LoadError::Schema {
                        location: loc(&format!("fields[{j}].width")),
                        message: format!("unsupported width `{s}`"),
                    });
                }
            };
            if star_seen && width_bits != 0 {
                return Err(LoadError::Schema {
                    location: loc(&format!("fields[{j}]")),
                    message: "varbit remainder must be the last field".into(),
                });
            }
            fields.push(FieldSpec {
                name: f.name.clone(),
                width_bits,
                is_size_field: false,
            });
        }
        let fixed_sum: u32 = fields.iter().map(|f| f.width_bits).sum();
        let max_size_bits = ht.max_size_bits.unwrap_or(fixed_sum);
        if max_size_bits == 0 {
            return Err(LoadError::Schema {
                location: loc("max_size_bits"),
                message: "header has zero size".into(),
            });
        }
        if fixed_sum > max_size_bits {
            return Err(LoadError::Schema {
                location: loc("max_size_bits"),
                message: format!(
                    "fixed field widths sum to {fixed_sum}, exceeding max size {max_size_bits}"
                ),
            });
        }
        let size_expr = match &ht.size_expr {
            None => {
                if max_size_bits != fixed_sum {
                    return Err(LoadError::Schema {
                        location: loc("max_size_bits"),
                        message: format!(
                            "fixed-size header: max size {max_size_bits} must equal field sum {fixed_sum}"
                        ),
                    });
                }
                None
            }
            Some(e) => Some(SizeExpr {
                field: e.field.clone(),
                multiplier: e.mul,
                addend: e.add,
            }),
        };
        let valid: Option<BTreeSet<u64>> = ht.valid_size_values.as_ref().map(|v| v.iter().copied().collect());
        if let Some(expr) = &size_expr {
            let sf = fields
                .iter_mut()
                .find(|f| f.name == expr.field)
                .ok_or_else(|| LoadError::Schema {
                    location: loc("size_expr.field"),
                    message: format!("unknown size field `{}`", expr.field),
                })?;
            if sf.width_bits == 0 || sf.width_bits > 64 {
                return Err(LoadError::Schema {
                    location: loc("size_expr.field"),
                    message: format!("size field `{}` must be fixed and at most 64 bits", expr.field),
                });
            }
            sf.is_size_field = true;
            let sf_width = sf.width_bits;
            let vals = valid.as_ref().filter(|v| !v.is_empty()).ok_or_else(|| {
                LoadError::Schema {
                    location: loc("valid_size_values"),
                    message: "variable-size header needs a non-empty valid_size_values set".into(),
                }
            })?;
            for &v in vals {
                if sf_width < 64 && v >= 1u64 << sf_width {
                    return Err(LoadError::Schema {
                        location: loc("valid_size_values"),
                        message: format!("value {v} does not fit size field width {sf_width}"),
                    });
                }
                let bits = expr.multiplier * v as i64 + expr.addend;
                if bits <= 0 || bits > max_size_bits as i64 {
                    return Err(LoadError::Schema {
                        location: loc("valid_size_values"),
                        message: format!(
                            "size {bits} for value {v} is outside (0, {max_size_bits}]"
                        ),
                    });
                }
            }
        } else if valid.is_some() {
            return Err(LoadError::Schema {
                location: loc("valid_size_values"),
                message: "valid_size_values given for a fixed-size header".into(),
            });
        }
        let spec = HeaderTypeSpec {
            name: ht.name.clone(),
            fields,
            max_size_bits,
            size_expr,
            valid_size_field_values: valid,
        };
        if header_types.insert(ht.name.clone(), spec).is_some() {
            return Err(LoadError::Schema {
                location: format!("header_types[{i}]"),
                message: format!("duplicate header type `{}`", ht.name),
            });
        }
    }

    let mut states = BTreeMap::new();
    for (i, st) in raw.parse_states.iter().enumerate() {
        let loc = |what: &str| format!("parse_states[{i}] (`{}`).{what}", st.name);
        if st.name == END_NODE || st.name == REJECT_KEYWORD {
            return Err(LoadError::Schema {
                location: loc("name"),
                message: format!("`{}` is a reserved name", st.name),
            });
        }
        let mut transitions = Vec::new();
        for (j, t) in st.transitions.iter().enumerate() {
            let value = t.value.parse(&loc(&format!("transitions[{j}].value")))?;
            let next_state = if t.next == END_NODE {
                TransitionTarget::End
            } else {
                TransitionTarget::State(t.next.clone())
            };
            transitions.push(TransitionEntry {
                match_value: value,
                next_state,
            });
        }
        let default_transition = match st.default.as_deref() {
            None | Some(REJECT_KEYWORD) => DefaultKind::Reject,
            Some(END_NODE) => DefaultKind::End,
            Some(s) => DefaultKind::State(s.to_string()),
        };
        let is_accept_path_terminal =
            transitions.is_empty() && default_transition == DefaultKind::End;
        let state = ParseState {
            name: st.name.clone(),
            header_type: st.header_type.clone(),
            key: st.key.as_ref().map(|k| TransitionKeySpec {
                offset_bits: k.offset,
                width_bits: k.width,
            }),
            transitions,
            default_transition,
            is_accept_path_terminal,
        };
        if states.insert(st.name.clone(), state).is_some() {
            return Err(LoadError::Schema {
                location: format!("parse_states[{i}]"),
                message: format!("duplicate state `{}`", st.name),
            });
        }
    }

    ParseGraph::from_parts(header_types, states, raw.root)
}

/// Serializes a graph back to the on-disk schema. `load_parser_spec` of the
/// result reproduces the IR exactly.
pub fn save_parser_spec(g: &ParseGraph) -> String {
    let raw = RawSpec {
        header_types: g
            .header_types
            .values()
            .map(|ht| RawHeaderType {
                name: ht.name.clone(),
                fields: ht
                    .fields
                    .iter()
                    .map(|f| RawField {
                        name: f.name.clone(),
                        width: if f.width_bits == 0 {
                            RawWidth::Star("*".into())
                        } else {
                            RawWidth::Bits(f.width_bits)
                        },
                    })
                    .collect(),
                max_size_bits: Some(ht.max_size_bits),
                size_expr: ht.size_expr.as_ref().map(|e| RawSizeExpr {
                    field: e.field.clone(),
                    mul: e.multiplier,
                    add: e.addend,
                }),
                valid_size_values: ht
                    .valid_size_field_values
                    .as_ref()
                    .map(|v| v.iter().copied().collect()),
            })
            .collect(),
        parse_states: g
            .states
            .values()
            .map(|st| RawState {
                name: st.name.clone(),
                header_type: st.header_type.clone(),
                key: st.key.map(|k| RawKey {
                    offset: k.offset_bits,
                    width: k.width_bits,
                }),
                transitions: st
                    .transitions
                    .iter()
                    .map(|t| RawTransition {
                        value: RawValue::Num(t.match_value),
                        next: t.next_state.node_name().to_string(),
                    })
                    .collect(),
                default: match &st.default_transition {
                    DefaultKind::Reject => None,
                    DefaultKind::End => Some(END_NODE.to_string()),
                    DefaultKind::State(s) => Some(s.clone()),
                },
            })
            .collect(),
        root: g.root.clone(),
    };
    serde_json::to_string_pretty(&raw).expect("spec serialization cannot fail")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(name: &str) -> String {
        let path = format!("{}/fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
        std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("read {path}: {e}"))
    }

    #[test]
    fn loads_simple_parser() {
        let g = load_parser_spec(&fixture("simple_parser.json")).unwrap();
        assert_eq!(g.root, "ethernet");
        assert_eq!(g.states.len(), 9);
        assert!(g.node_names().contains(&END_NODE.to_string()));
        assert!(validate_graph(&g).is_empty());
    }

    #[test]
    fn loads_single_state_spec() {
        let text = r#"{
            "header_types": [
                {"name": "eth_t", "fields": [{"name": "data", "width": 112}]}
            ],
            "parse_states": [
                {"name": "ethernet", "header_type": "eth_t", "default": "END"}
            ],
            "root": "ethernet"
        }"#;
        let g = load_parser_spec(text).unwrap();
        assert_eq!(g.states.len(), 1);
        assert_eq!(g.edges.len(), 1);
        assert!(g.edges.contains(&("ethernet".into(), END_NODE.into())));
    }

    #[test]
    fn loads_fig5_with_fifteen_edges() {
        let g = load_parser_spec(&fixture("fig5.json")).unwrap();
        let nodes: BTreeSet<_> = g.node_names().into_iter().collect();
        let want: BTreeSet<String> = ["ETH", "IPv4", "IPv6", "EXT", "UDP", "TCP", "END"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(nodes, want);
        assert_eq!(g.edges.len(), 15);
    }

    #[test]
    fn schema_error_reports_json_path() {
        let text = r#"{"header_types": [{"name": "x", "fields": [{"name": "f", "width": true}]}], "parse_states": [], "root": "r"}"#;
        let err = load_parser_spec(text).unwrap_err();
        match err {
            LoadError::Json { path, .. } => assert!(path.contains("header_types[0]"), "{path}"),
            other => panic!("expected Json error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_key_outside_minimum_size() {
        let text = r#"{
            "header_types": [{
                "name": "v", "max_size_bits": 128,
                "fields": [{"name": "len", "width": 8}, {"name": "rest", "width": "*"}],
                "size_expr": {"field": "len", "mul": 8, "add": 8},
                "valid_size_values": [1, 2, 15]
            }],
            "parse_states": [
                {"name": "a", "header_type": "v", "key": {"offset": 24, "width": 8},
                 "transitions": [{"value": 1, "next": "END"}], "default": "END"}
            ],
            "root": "a"
        }"#;
        let err = load_parser_spec(text).unwrap_err();
        assert!(err.to_string().contains("minimum header size"), "{err}");
    }

    #[test]
    fn rejects_match_value_wider_than_key() {
        let text = r#"{
            "header_types": [{"name": "t", "fields": [{"name": "f", "width": 16}]}],
            "parse_states": [
                {"name": "a", "header_type": "t", "key": {"offset": 0, "width": 8},
                 "transitions": [{"value": 256, "next": "END"}], "default": "END"}
            ],
            "root": "a"
        }"#;
        let err = load_parser_spec(text).unwrap_err();
        assert!(err.to_string().contains("does not fit key width"), "{err}");
    }

    #[test]
    fn validate_flags_cycle() {
        let g = load_parser_spec(&fixture("fig5.json")).unwrap();
        let mut edges = g.edges.clone();
        edges.insert(("TCP".into(), "ETH".into()));
        let bad = g.with_edges(edges);
        let diags = validate_graph(&bad);
        assert!(diags.iter().any(|d| d.message.contains("cycle detected")));
    }

    #[test]
    fn validate_flags_unreachable_state() {
        let g = load_parser_spec(&fixture("fig5.json")).unwrap();
        let mut edges = g.edges.clone();
        edges.retain(|(_, t)| t != "EXT");
        let bad = g.with_edges(edges);
        let diags = validate_graph(&bad);
        assert!(diags
            .iter()
            .any(|d| d.message.contains("`EXT` is unreachable")));
    }

    #[test]
    fn valid_graph_has_no_diagnostics() {
        let g = load_parser_spec(&fixture("simple_parser.json")).unwrap();
        assert!(validate_graph(&g).is_empty());
        let g = load_parser_spec(&fixture("full_parser.json")).unwrap();
        assert!(validate_graph(&g).is_empty());
    }

    #[test]
    fn save_load_roundtrip_is_identity() {
        for f in ["simple_parser.json", "full_parser.json", "fig5.json"] {
            let g = load_parser_spec(&fixture(f)).unwrap();
            let text = save_parser_spec(&g);
            let g2 = load_parser_spec(&text).unwrap();
            assert_eq!(g, g2, "round trip changed the IR for {f}");
        }
    }

    #[test]
    fn header_ids_are_dense_and_topological() {
        let g = load_parser_spec(&fixture("fig5.json")).unwrap();
        let ids = g.header_ids();
        assert_eq!(ids.len(), 7);
        assert_eq!(ids["ETH"], 0);
        assert_eq!(ids[END_NODE], 6);
        for (f, t) in &g.edges {
            assert!(ids[f] < ids[t], "edge {f}->{t} violates topo order");
        }
    }

    #[test]
    fn ihl_size_lut_matches_affine_expression() {
        let g = load_parser_spec(&fixture("simple_parser.json")).unwrap();
        let ipv4 = &g.header_types[&g.states["ipv4"].header_type];
        for v in 5..=15u64 {
            assert_eq!(ipv4.size_for_value(v), Some(32 * v as u32));
        }
        assert_eq!(ipv4.size_for_value(2), None);
        assert_eq!(ipv4.valid_sizes().len(), 11);
    }
}
