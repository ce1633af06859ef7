//! C ABI over the parser-pipeline compiler and simulator, for bindings from
//! other languages.
//!
//! Conventions: opaque handles created and freed by this library, status
//! codes for every fallible call, a thread-local message retrievable with
//! `pp_last_error`, and `pp_string_free` for every string the library hands
//! out. The matching declarations live in `include/parsepipe.h` (maintained
//! by hand; keep the two in sync).

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use parsepipe::graph::GraphStage;
use parsepipe::layout::{compile_plan, PipelinePlan};
use parsepipe::model::{load_parser_spec, ParseGraph};
use parsepipe::sim::PipelineInstance;

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PpStatus {
    Ok = 0,
    NullArg = 1,
    Utf8 = 2,
    Load = 3,
    Compile = 4,
    Sim = 5,
    Json = 6,
    Panic = 7,
}

pub struct PpGraph(ParseGraph);
pub struct PpPlan(Arc<PipelinePlan>);
pub struct PpPipeline(PipelineInstance);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<Vec<u8>>) {
    let c = CString::new(msg).unwrap_or_else(|_| CString::new("invalid error text").unwrap());
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard<F: FnOnce() -> PpStatus>(f: F) -> PpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("panic inside parsepipe");
            PpStatus::Panic
        }
    }
}

/// # Safety
/// `s` must be a valid NUL-terminated string or null.
unsafe fn utf8_arg<'a>(s: *const c_char) -> Result<&'a str, PpStatus> {
    if s.is_null() {
        set_error("null string argument");
        return Err(PpStatus::NullArg);
    }
    CStr::from_ptr(s).to_str().map_err(|_| {
        set_error("argument is not valid UTF-8");
        PpStatus::Utf8
    })
}

fn hand_out(s: String, out: *mut *mut c_char) -> PpStatus {
    match CString::new(s) {
        Ok(c) => {
            unsafe { *out = c.into_raw() };
            PpStatus::Ok
        }
        Err(_) => {
            set_error("output contains an interior NUL");
            PpStatus::Json
        }
    }
}

/// Message for the most recent error on this thread, or null. Owned by the
/// library; do not free.
#[no_mangle]
pub extern "C" fn pp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| {
        e.borrow()
            .as_ref()
            .map(|c| c.as_ptr())
            .unwrap_or(std::ptr::null())
    })
}

/// Frees a string returned by this library.
///
/// # Safety
/// `s` must have been returned by a `pp_*` call and not freed before.
#[no_mangle]
pub unsafe extern "C" fn pp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses and validates a parser specification document.
///
/// # Safety
/// `spec_json` must be NUL-terminated; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pp_graph_load(
    spec_json: *const c_char,
    out: *mut *mut PpGraph,
) -> PpStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output pointer");
            return PpStatus::NullArg;
        }
        let text = match utf8_arg(spec_json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match load_parser_spec(text) {
            Ok(g) => {
                *out = Box::into_raw(Box::new(PpGraph(g)));
                PpStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                PpStatus::Load
            }
        }
    })
}

/// # Safety
/// `g` must come from `pp_graph_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn pp_graph_free(g: *mut PpGraph) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

/// Renders a transformation stage ("original", "reduced", "balanced") as DOT.
///
/// # Safety
/// Pointers must be valid; free the output with `pp_string_free`.
#[no_mangle]
pub unsafe extern "C" fn pp_graph_dot(
    g: *const PpGraph,
    stage: *const c_char,
    out: *mut *mut c_char,
) -> PpStatus {
    guard(|| {
        let Some(g) = g.as_ref() else {
            set_error("null graph");
            return PpStatus::NullArg;
        };
        if out.is_null() {
            set_error("null output pointer");
            return PpStatus::NullArg;
        }
        let stage = match utf8_arg(stage) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let stage: GraphStage = match stage.parse() {
            Ok(s) => s,
            Err(e) => {
                set_error(e);
                return PpStatus::Load;
            }
        };
        match parsepipe::graph::stage_dot(&g.0, stage) {
            Ok(dot) => hand_out(dot, out),
            Err(e) => {
                set_error(e.to_string());
                PpStatus::Compile
            }
        }
    })
}

/// Compiles a graph into a pipeline plan for the given bus width.
///
/// # Safety
/// `g` must be a live graph handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pp_plan_build(
    g: *const PpGraph,
    bus_width_bits: u32,
    out: *mut *mut PpPlan,
) -> PpStatus {
    guard(|| {
        let Some(g) = g.as_ref() else {
            set_error("null graph");
            return PpStatus::NullArg;
        };
        if out.is_null() {
            set_error("null output pointer");
            return PpStatus::NullArg;
        }
        match compile_plan(&g.0, bus_width_bits) {
            Ok(p) => {
                *out = Box::into_raw(Box::new(PpPlan(Arc::new(p))));
                PpStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                PpStatus::Compile
            }
        }
    })
}

/// Loads a serialized plan artifact.
///
/// # Safety
/// `plan_json` must be NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pp_plan_from_json(
    plan_json: *const c_char,
    out: *mut *mut PpPlan,
) -> PpStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output pointer");
            return PpStatus::NullArg;
        }
        let text = match utf8_arg(plan_json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match PipelinePlan::from_json(text) {
            Ok(p) => {
                *out = Box::into_raw(Box::new(PpPlan(Arc::new(p))));
                PpStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                PpStatus::Json
            }
        }
    })
}

/// Serializes a plan; free the output with `pp_string_free`.
///
/// # Safety
/// `p` must be a live plan handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pp_plan_to_json(p: *const PpPlan, out: *mut *mut c_char) -> PpStatus {
    guard(|| {
        let Some(p) = p.as_ref() else {
            set_error("null plan");
            return PpStatus::NullArg;
        };
        if out.is_null() {
            set_error("null output pointer");
            return PpStatus::NullArg;
        }
        hand_out(p.0.to_json(), out)
    })
}

/// # Safety
/// `p` must be a live plan handle.
#[no_mangle]
pub unsafe extern "C" fn pp_plan_depth_cycles(p: *const PpPlan) -> u32 {
    p.as_ref().map(|p| p.0.depth_cycles).unwrap_or(0)
}

/// # Safety
/// `p` must be a live plan handle.
#[no_mangle]
pub unsafe extern "C" fn pp_plan_bus_width_bits(p: *const PpPlan) -> u32 {
    p.as_ref().map(|p| p.0.bus_width_bits).unwrap_or(0)
}

/// # Safety
/// `p` must come from a `pp_plan_*` constructor and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn pp_plan_free(p: *mut PpPlan) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Creates a simulator instance over a plan. Instances are single-threaded;
/// create one per worker.
///
/// # Safety
/// `p` must be a live plan handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pp_pipeline_new(p: *const PpPlan, out: *mut *mut PpPipeline) -> PpStatus {
    guard(|| {
        let Some(p) = p.as_ref() else {
            set_error("null plan");
            return PpStatus::NullArg;
        };
        if out.is_null() {
            set_error("null output pointer");
            return PpStatus::NullArg;
        }
        *out = Box::into_raw(Box::new(PpPipeline(PipelineInstance::new(p.0.clone()))));
        PpStatus::Ok
    })
}

/// Parses one packet and returns its PHVs as JSON lines
/// (`{"packet_id":..,"header":..,"bits_hex":..,"bit_count":..,"valid":..}`).
/// Free the output with `pp_string_free`.
///
/// # Safety
/// `sim` must be live, `bytes` must point to `len` readable bytes, `out`
/// must be valid.
#[no_mangle]
pub unsafe extern "C" fn pp_pipeline_parse(
    sim: *mut PpPipeline,
    bytes: *const u8,
    len: usize,
    out: *mut *mut c_char,
) -> PpStatus {
    guard(|| {
        let Some(sim) = sim.as_mut() else {
            set_error("null pipeline");
            return PpStatus::NullArg;
        };
        if bytes.is_null() || out.is_null() {
            set_error("null buffer or output pointer");
            return PpStatus::NullArg;
        }
        let packet = std::slice::from_raw_parts(bytes, len);
        match sim.0.parse_packet(packet) {
            Ok(res) => hand_out(parsepipe::cli::phvs_to_jsonl(&res.phvs), out),
            Err(e) => {
                set_error(e.to_string());
                PpStatus::Sim
            }
        }
    })
}

/// # Safety
/// `sim` must come from `pp_pipeline_new` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn pp_pipeline_free(sim: *mut PpPipeline) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}
