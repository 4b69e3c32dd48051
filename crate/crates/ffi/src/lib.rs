//! C ABI over `sandwich-core`.
//!
//! Every fallible call returns an [`SwStatus`]; on failure the message is
//! available from [`sw_last_error`] on the same thread until the next failing
//! call. Handles are opaque and must be released with their `_free` function.
//! Tensors cross the boundary as row-major `double` buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use sandwich_core::cli::{build_model, Precision};
use sandwich_core::numerics::{Rng, Tensor};
use sandwich_core::sandwich::{allocate_blocks, BudgetProfile, SandwichLayout};
use sandwich_core::streaming::{latency_model, ChunkPlan, LatencyInputs, StreamEngine};
use sandwich_core::Error;

/// Status codes. Values 1 to 10 match the `sandwich` binary's exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SwStatus {
    Ok = 0,
    Config = 2,
    Infeasible = 3,
    Layout = 4,
    StateMismatch = 5,
    Format = 6,
    MissingExpert = 7,
    MemoryGuard = 8,
    Numerics = 9,
    Io = 10,
    NullPointer = 11,
    /// A buffer had the wrong length or a string was not UTF-8.
    InvalidArgument = 12,
    Panic = 13,
}

impl From<&Error> for SwStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config { .. } => SwStatus::Config,
            Error::Infeasible { .. } => SwStatus::Infeasible,
            Error::Layout(_) => SwStatus::Layout,
            Error::StateMismatch(_) => SwStatus::StateMismatch,
            Error::Format(_) | Error::Json(_) => SwStatus::Format,
            Error::MissingExpert(_) => SwStatus::MissingExpert,
            Error::MemoryGuard(_) => SwStatus::MemoryGuard,
            Error::Numerics(_) => SwStatus::Numerics,
            Error::Io(_) => SwStatus::Io,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Fail(SwStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(SwStatus::from(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SwStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SwStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside sandwich");
            SwStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail(SwStatus::NullPointer, format!("`{name}` is null")))
    } else {
        Ok(())
    }
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, Fail> {
    non_null(p, name)?;
    let s = CStr::from_ptr(p).to_str().map_err(|_| Fail(SwStatus::InvalidArgument, format!("`{name}` is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, want: usize, name: &str) -> Result<&'a [f64], Fail> {
    non_null(p, name)?;
    if len != want {
        return Err(Fail(SwStatus::InvalidArgument, format!("`{name}` has {len} values, expected {want}")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Hard routing layout.
pub struct SwLayout {
    inner: SandwichLayout,
}

/// Chunked streaming generator.
pub struct SwEngine {
    inner: StreamEngine,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SwChunkPlan {
    pub frames_per_chunk: usize,
    /// Euler steps per chunk.
    pub steps: usize,
    pub height: usize,
    pub width: usize,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SwCacheBytes {
    pub lin_attn: usize,
    pub conv_ring: usize,
    pub ssa_kv: usize,
    pub high_kv: usize,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SwLatencyInputs {
    pub text_encoder_ms: f64,
    pub dit_step_ms: f64,
    pub decoder_ms: f64,
    pub steps: usize,
    pub frames_per_chunk: usize,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SwLatencyReport {
    pub chunk_ms: f64,
    pub fps: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SwBudget {
    pub latency_lcha: f64,
    pub latency_ssa: f64,
    pub memory_lcha: f64,
    pub memory_ssa: f64,
    pub blocks: usize,
    pub latency_max: f64,
    pub memory_max: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SwAllocation {
    pub n_lcha: usize,
    pub n_ssa: usize,
    pub latency: f64,
    pub memory: f64,
}

/// Library version, NUL-terminated and static.
#[no_mangle]
pub extern "C" fn sw_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sw_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Loads a layout JSON file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn sw_layout_load(path: *const c_char, out: *mut *mut SwLayout) -> SwStatus {
    guard(|| {
        non_null(out, "out")?;
        let path = path_arg(path, "path")?;
        let inner = SandwichLayout::load(&path)?;
        *out = Box::into_raw(Box::new(SwLayout { inner }));
        Ok(())
    })
}

/// Number of routing groups, or 0 for a null handle.
///
/// # Safety
/// `layout` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sw_layout_groups(layout: *const SwLayout) -> usize {
    layout.as_ref().map_or(0, |l| l.inner.mask.len())
}

/// Copies the routing mask into `buf` (`cap` bytes, at least the group count).
///
/// # Safety
/// `layout` must be a live handle and `buf` must hold `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn sw_layout_mask(layout: *const SwLayout, buf: *mut u8, cap: usize) -> SwStatus {
    guard(|| {
        non_null(layout, "layout")?;
        non_null(buf, "buf")?;
        let mask = &(*layout).inner.mask;
        if cap < mask.len() {
            return Err(Fail(SwStatus::InvalidArgument, format!("mask needs {} bytes, buffer has {cap}", mask.len())));
        }
        std::ptr::copy_nonoverlapping(mask.as_ptr(), buf, mask.len());
        Ok(())
    })
}

/// # Safety
/// `layout` must be null or a handle from [`sw_layout_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sw_layout_free(layout: *mut SwLayout) {
    if !layout.is_null() {
        drop(Box::from_raw(layout));
    }
}

/// Builds a streaming engine for `layout`. Weights are drawn from `seed`, then
/// replaced from the checkpoint directory `weights` when it is not null.
/// `window` is the strided-attention KV window in chunks; 0 keeps every chunk.
///
/// # Safety
/// `layout` must be a live handle, `plan` and `out` valid pointers and
/// `weights` null or a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sw_engine_new(
    layout: *const SwLayout,
    weights: *const c_char,
    seed: u64,
    plan: *const SwChunkPlan,
    window: usize,
    out: *mut *mut SwEngine,
) -> SwStatus {
    guard(|| {
        non_null(layout, "layout")?;
        non_null(plan, "plan")?;
        non_null(out, "out")?;
        let layout = &(*layout).inner;
        let weights = if weights.is_null() { None } else { Some(path_arg(weights, "weights")?) };
        let p = *plan;
        let plan = ChunkPlan { frames_per_chunk: p.frames_per_chunk, steps: p.steps, height: p.height, width: p.width, ..ChunkPlan::default() };
        let (model, store) = build_model(&layout.model, weights.as_deref(), &mut Rng::new(seed), Precision::F64)?;
        let inner = StreamEngine::new(model, store, layout, plan, (window > 0).then_some(window))?;
        *out = Box::into_raw(Box::new(SwEngine { inner }));
        Ok(())
    })
}

/// Values in one chunk of latents (`tokens * in_channels`), or 0 for a null handle.
///
/// # Safety
/// `engine` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sw_engine_chunk_len(engine: *const SwEngine) -> usize {
    engine.as_ref().map_or(0, |e| e.inner.plan().tokens_per_chunk() * e.inner.model().config().in_channels)
}

/// Length of the text embedding, or 0 for a null handle.
///
/// # Safety
/// `engine` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sw_engine_text_dim(engine: *const SwEngine) -> usize {
    engine.as_ref().map_or(0, |e| e.inner.model().config().cond.text_dim)
}

/// Chunks generated since creation or the last reset.
///
/// # Safety
/// `engine` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sw_engine_chunks_done(engine: *const SwEngine) -> usize {
    engine.as_ref().map_or(0, |e| e.inner.chunks_done())
}

/// Denoises one chunk of `noise` and writes the clean latents to `out`.
/// `noise` and `out` hold [`sw_engine_chunk_len`] values, `text` holds
/// [`sw_engine_text_dim`]. On failure `out` is untouched.
///
/// # Safety
/// `engine` must be a live handle not used concurrently; the buffers must
/// hold the stated number of values.
#[no_mangle]
pub unsafe extern "C" fn sw_engine_step(
    engine: *mut SwEngine,
    noise: *const f64,
    noise_len: usize,
    text: *const f64,
    text_len: usize,
    out: *mut f64,
    out_len: usize,
) -> SwStatus {
    guard(|| {
        non_null(engine, "engine")?;
        non_null(out, "out")?;
        let n = sw_engine_chunk_len(engine);
        let noise = slice_arg(noise, noise_len, n, "noise")?;
        let text = slice_arg(text, text_len, sw_engine_text_dim(engine), "text")?;
        if out_len != n {
            return Err(Fail(SwStatus::InvalidArgument, format!("`out` has {out_len} values, expected {n}")));
        }
        let e = &mut (*engine).inner;
        let channels = e.model().config().in_channels;
        let z = Tensor::new(vec![n / channels, channels], noise.to_vec()).map_err(Error::from)?;
        let text = Tensor::new(vec![text.len()], text.to_vec()).map_err(Error::from)?;
        let x = e.step(&z, &text)?;
        std::slice::from_raw_parts_mut(out, n).copy_from_slice(x.data());
        Ok(())
    })
}

/// Clears every cache; the next chunk starts a fresh stream.
///
/// # Safety
/// `engine` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sw_engine_reset(engine: *mut SwEngine) {
    if let Some(e) = engine.as_mut() {
        e.inner.reset();
    }
}

/// # Safety
/// `engine` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sw_engine_cache_bytes(engine: *const SwEngine, out: *mut SwCacheBytes) -> SwStatus {
    guard(|| {
        non_null(engine, "engine")?;
        non_null(out, "out")?;
        let b = (*engine).inner.cache_bytes();
        *out = SwCacheBytes { lin_attn: b.lin_attn, conv_ring: b.conv_ring, ssa_kv: b.ssa_kv, high_kv: b.high_kv };
        Ok(())
    })
}

/// # Safety
/// `engine` must be null or a handle from [`sw_engine_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sw_engine_free(engine: *mut SwEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Per-chunk latency and throughput from component timings.
///
/// # Safety
/// `inputs` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn sw_latency_model(inputs: *const SwLatencyInputs, out: *mut SwLatencyReport) -> SwStatus {
    guard(|| {
        non_null(inputs, "inputs")?;
        non_null(out, "out")?;
        let i = *inputs;
        let r = latency_model(&LatencyInputs {
            text_encoder_ms: i.text_encoder_ms,
            dit_step_ms: i.dit_step_ms,
            decoder_ms: i.decoder_ms,
            steps: i.steps,
            frames_per_chunk: i.frames_per_chunk,
        })?;
        *out = SwLatencyReport { chunk_ms: r.chunk_ms, fps: r.fps };
        Ok(())
    })
}

/// Splits `budget.blocks` into LCHA and SSA counts under the latency and memory limits.
///
/// # Safety
/// `budget` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn sw_allocate_blocks(budget: *const SwBudget, out: *mut SwAllocation) -> SwStatus {
    guard(|| {
        non_null(budget, "budget")?;
        non_null(out, "out")?;
        let b = *budget;
        let profile = BudgetProfile {
            latency_lcha: b.latency_lcha,
            latency_ssa: b.latency_ssa,
            memory_lcha: b.memory_lcha,
            memory_ssa: b.memory_ssa,
            blocks: b.blocks,
            latency_max: b.latency_max,
            memory_max: b.memory_max,
        };
        profile.validate()?;
        let a = allocate_blocks(&profile)?;
        *out = SwAllocation { n_lcha: a.n_lcha, n_ssa: a.n_ssa, latency: a.latency, memory: a.memory };
        Ok(())
    })
}
