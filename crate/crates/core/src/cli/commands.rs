use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use super::config::{default_mask, reference_latency, toy_config, DeviceProfile, Precision, RunConfig};
use crate::attention::{linear_attention_maps, BlockCtx, BlockTrace, TokenGrid};
use crate::diffusion::{build_kd_cache, distill, read_kd_cache, DistillSetup, ExpertTag, KdCacheWriter};
use crate::error::{Error, Result};
use crate::numerics::gradcheck::op_catalog;
use crate::numerics::io::{load_tensor, save_tensor};
use crate::numerics::{CorruptedVjp, DType, GradCase, GradCheckReport, ParamStore, Rng, Tape, Tensor};
use crate::sandwich::{
    allocate_groups, group_grad_case, search_against_teacher, ForwardCtx, ModelConfig, Routing, SandwichLayout, SandwichModel, SearchMeta,
};
use crate::streaming::{latency_model, offline_generate, StreamEngine};

/// Relative deviation allowed between streamed and offline generation.
pub const STREAM_ORACLE_TOL: f64 = 1e-5;

/// Result of one subcommand: the manifest written to `out/manifest.json` and
/// whether every checked invariant held.
#[derive(Clone, Debug)]
pub struct CmdOutcome {
    pub manifest: Value,
    pub passed: bool,
}

fn manifest(command: &str, cfg: &RunConfig, report: impl Serialize) -> Result<Value> {
    Ok(json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config": serde_json::to_value(cfg)?,
        "report": serde_json::to_value(report)?,
    }))
}

fn finish(cfg: &RunConfig, manifest: Value, passed: bool) -> Result<CmdOutcome> {
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(CmdOutcome { manifest, passed })
}

/// Worker pool capped by `S2DIT_THREADS` (one thread when unset).
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var("S2DIT_THREADS") {
        Ok(v) => v.trim().parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| Error::config("S2DIT_THREADS", format!("`{v}` is not a positive integer")))?,
        Err(_) => 1,
    };
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| Error::config("S2DIT_THREADS", e.to_string()))
}

fn load_profile(cfg: &RunConfig) -> Result<Option<DeviceProfile>> {
    cfg.profile.as_deref().map(DeviceProfile::load).transpose()
}

/// Layout from the config file, or the default sandwich over the configured model.
pub fn resolve_layout(cfg: &RunConfig) -> Result<SandwichLayout> {
    match &cfg.layout {
        Some(path) => SandwichLayout::load(path),
        None => {
            let model = cfg.model.clone().unwrap_or_else(toy_config);
            let mask = default_mask(model.groups);
            SandwichLayout::new(model, mask)
        }
    }
}

/// Builds `model_cfg` from the seed, then overwrites it from `weights` when given.
pub fn build_model(model_cfg: &ModelConfig, weights: Option<&Path>, rng: &mut Rng, dtype: Precision) -> Result<(SandwichModel, ParamStore)> {
    let mut store = ParamStore::new();
    let model = SandwichModel::new(&mut store, model_cfg, rng)?;
    if let Some(dir) = weights {
        store.load_dir(dir)?;
    }
    if dtype == Precision::F32 {
        for id in store.ids().collect::<Vec<_>>() {
            let t = store.get(id).to_dtype(DType::F32);
            store.set(id, t)?;
        }
    }
    Ok((model, store))
}

fn text_embedding(model: &ModelConfig, rng: &mut Rng) -> Tensor {
    rng.normal_tensor(&[model.cond.text_dim], 1.0)
}

#[derive(Serialize)]
struct SearchReport {
    layout: PathBuf,
    layout_hash: String,
    mask: Vec<u8>,
    interior_lcha: usize,
    probabilities: Vec<f64>,
    final_loss: Option<f64>,
    latency_ms: f64,
    memory_mb: f64,
}

/// Allocates blocks under the device budget, searches the interior groups and
/// writes the hardened layout.
pub fn cmd_search(cfg: &RunConfig) -> Result<CmdOutcome> {
    let profile = load_profile(cfg)?.ok_or_else(|| Error::config("profile", "search needs a device profile"))?;
    let budget = profile.budget.ok_or_else(|| Error::config("profile.budget", "missing [budget] table"))?;
    let model_cfg = match &cfg.layout {
        Some(p) => SandwichLayout::load(p)?.model,
        None => cfg.model.clone().unwrap_or_else(toy_config),
    };
    let (allocation, k) = allocate_groups(&budget, &model_cfg)?;
    let teacher_mask = cfg.search.teacher_mask.clone().unwrap_or_else(|| vec![1; model_cfg.groups]);
    let outcome = search_against_teacher(&model_cfg, &teacher_mask, k, cfg.seed, &cfg.search.schedule)?;
    let mut layout = SandwichLayout::new(model_cfg, outcome.mask.clone())?;
    layout.budget = Some(budget);
    layout.allocation = Some(allocation.clone());
    layout.search = Some(SearchMeta {
        seed: cfg.seed,
        steps: outcome.steps_run,
        probabilities: outcome.probabilities.clone(),
        final_loss: outcome.losses.last().copied(),
    });
    layout.validate()?;
    fs::create_dir_all(&cfg.out)?;
    let path = cfg.out.join("layout.json");
    layout.save(&path)?;
    let report = SearchReport {
        layout: path,
        layout_hash: layout.hash()?,
        mask: layout.mask.clone(),
        interior_lcha: k,
        probabilities: outcome.probabilities,
        final_loss: outcome.losses.last().copied(),
        latency_ms: allocation.latency,
        memory_mb: allocation.memory,
    };
    finish(cfg, manifest("search", cfg, report)?, true)
}

#[derive(Clone, Debug, Serialize)]
pub struct BlockTiming {
    pub group: usize,
    pub kind: &'static str,
    pub index: usize,
    pub attention_tokens: usize,
    pub median_ms: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Per-block-type and end-to-end host timings with token counts, next to the
/// analytic device projection.
pub fn cmd_bench(cfg: &RunConfig) -> Result<CmdOutcome> {
    let layout = resolve_layout(cfg)?;
    let b = &cfg.bench;
    if b.repeats == 0 {
        return Err(Error::config("bench.repeats", "must be at least 1"));
    }
    let rng = Rng::new(cfg.seed);
    let (model, store) = build_model(&layout.model, cfg.weights.as_deref(), &mut rng.fork(1), cfg.dtype)?;
    let mc = model.config();
    let grid = TokenGrid::new(b.frames, b.height, b.width, mc.in_channels);
    model.check_grid(&grid)?;
    let text = text_embedding(mc, &mut rng.fork(2));
    let ts = vec![0.5; grid.frames];

    let mut jobs = Vec::new();
    for (n, g) in model.groups().iter().enumerate() {
        jobs.extend((0..g.high.len()).map(|i| (n, true, i)));
        jobs.extend((0..g.low.len()).map(|i| (n, false, i)));
    }
    let pool = worker_pool()?;
    let timings: Vec<BlockTiming> = pool.install(|| {
        jobs.par_iter()
            .map(|&(n, high, i)| -> Result<BlockTiming> {
                let group = &model.groups()[n];
                let (block, bgrid) = if high {
                    (&group.high[i], grid.with_channels(mc.dim))
                } else {
                    (&group.low[i], group.resample.low_grid(&grid)?)
                };
                let x = Rng::new(cfg.seed).fork(100 + n as u64).normal_tensor(&[bgrid.tokens(), bgrid.channels], 1.0);
                let mut times = Vec::with_capacity(b.repeats);
                let mut tokens = 0;
                for _ in 0..b.repeats {
                    let mut tape = Tape::inference();
                    let cond = model.condition(&mut tape, &store, &ts, &text)?;
                    let xv = tape.constant(x.clone());
                    let mut trace = BlockTrace::default();
                    let start = Instant::now();
                    let mut ctx = BlockCtx { grid: bgrid, frame_offset: 0, stream: None, trace: Some(&mut trace) };
                    block.forward(&mut tape, &store, xv, cond, &mut ctx)?;
                    times.push(start.elapsed().as_secs_f64() * 1e3);
                    tokens = trace.linear_inputs.as_ref().map(|l| l.tokens()).or(trace.attn_queries).unwrap_or(0);
                }
                let kind = if !high { "ssa" } else if block.is_lcha() { "lcha" } else { "full" };
                Ok(BlockTiming { group: n, kind, index: i, attention_tokens: tokens, median_ms: median(times) })
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let x = rng.fork(3).normal_tensor(&[grid.tokens(), grid.channels], 1.0);
    let mut e2e = Vec::with_capacity(b.repeats);
    for _ in 0..b.repeats {
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let start = Instant::now();
        model.forward(&mut tape, &store, xv, &grid, &ts, &text, Routing::Hard(&layout.mask), &mut ForwardCtx::default())?;
        e2e.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let tokens_of = |kind: &str| timings.iter().find(|t| t.kind == kind).map(|t| t.attention_tokens);
    let ratio = match (tokens_of("lcha").or(tokens_of("full")), tokens_of("ssa")) {
        (Some(hi), Some(lo)) if lo > 0 => Some(hi as f64 / lo as f64),
        _ => None,
    };
    let latency = load_profile(cfg)?.and_then(|p| p.latency).unwrap_or_else(reference_latency);
    let projection = latency_model(&latency)?;
    let report = json!({
        "layout_hash": layout.hash()?,
        "mask": layout.mask,
        "grid": grid,
        "blocks": timings,
        "token_ratio_high_to_ssa": ratio,
        "end_to_end_median_ms": median(e2e),
        "projection": {
            "inputs": latency,
            "chunk_ms": projection.chunk_ms,
            "fps": projection.fps,
            "fps_1dp": projection.fps_1dp(),
        },
    });
    finish(cfg, manifest("bench", cfg, report)?, true)
}

#[derive(Serialize)]
struct ChunkRecord {
    index: usize,
    file: PathBuf,
    wall_ms: f64,
    lin_attn_bytes: usize,
    conv_ring_bytes: usize,
    ssa_kv_bytes: usize,
    kv_tokens: Vec<usize>,
}

/// Drives the streaming engine for the configured number of chunks and
/// writes every chunk latent as S2TN.
pub fn cmd_stream_sim(cfg: &RunConfig) -> Result<CmdOutcome> {
    let layout = resolve_layout(cfg)?;
    let s = &cfg.stream;
    let plan = s.plan();
    let rng = Rng::new(cfg.seed);
    let (model, store) = build_model(&layout.model, cfg.weights.as_deref(), &mut rng.fork(1), cfg.dtype)?;
    let text = text_embedding(&layout.model, &mut rng.fork(2));
    let mut noise_rng = rng.fork(3);
    let noises: Vec<Tensor> = (0..plan.chunks).map(|_| noise_rng.normal_tensor(&[plan.tokens_per_chunk(), layout.model.in_channels], 1.0)).collect();
    let mut engine = StreamEngine::new(model, store, &layout, plan.clone(), s.window)?;
    fs::create_dir_all(&cfg.out)?;
    let mut chunks = Vec::with_capacity(plan.chunks);
    let mut latents = Vec::with_capacity(plan.chunks);
    for (i, z) in noises.iter().enumerate() {
        let start = Instant::now();
        let x = engine.step(z, &text)?;
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        let file = cfg.out.join(format!("chunk_{i:03}.s2tn"));
        save_tensor(&file, &x)?;
        let bytes = engine.cache_bytes();
        chunks.push(ChunkRecord {
            index: i,
            file,
            wall_ms,
            lin_attn_bytes: bytes.lin_attn,
            conv_ring_bytes: bytes.conv_ring,
            ssa_kv_bytes: bytes.ssa_kv,
            kv_tokens: engine.kv_tokens(),
        });
        latents.push(x);
    }
    let flat = chunks.windows(2).all(|w| w[0].lin_attn_bytes == w[1].lin_attn_bytes && w[0].conv_ring_bytes == w[1].conv_ring_bytes);
    let mut passed = flat;
    let oracle = if s.oracle {
        let reference = offline_generate(engine.model(), engine.store(), &layout.mask, &plan, &noises, &text)?;
        let deviation = latents.iter().zip(&reference).map(|(a, b)| a.max_rel_diff(b)).fold(0.0, f64::max);
        let applicable = s.window.is_none_or(|w| w >= plan.chunks);
        if applicable {
            passed &= deviation <= STREAM_ORACLE_TOL;
        }
        Some(json!({ "max_rel_deviation": deviation, "applicable": applicable, "tol": STREAM_ORACLE_TOL }))
    } else {
        None
    };
    let report = json!({
        "seed": cfg.seed,
        "layout_hash": layout.hash()?,
        "plan": plan,
        "window": s.window,
        "chunks": chunks,
        "fixed_cache_flat": flat,
        "oracle": oracle,
    });
    finish(cfg, manifest("stream-sim", cfg, report)?, passed)
}

/// Runs the teacher on random latents and writes the distillation cache.
/// The teacher checkpoint goes to `out/teacher` (one per expert in two-expert mode).
pub fn cmd_build_kd_cache(cfg: &RunConfig) -> Result<CmdOutcome> {
    let kd = &cfg.kd;
    let tcfg = &kd.teacher;
    let mask = kd.teacher_mask.clone().unwrap_or_else(|| vec![1; tcfg.groups]);
    let rng = Rng::new(cfg.seed);
    let (high, high_store) = build_model(tcfg, cfg.weights.as_deref(), &mut rng.fork(1), cfg.dtype)?;
    let low = if kd.two_expert && cfg.weights.is_none() { Some(build_model(tcfg, None, &mut rng.fork(5), cfg.dtype)?) } else { None };
    high.check_mask(&mask)?;
    let grid = TokenGrid::new(kd.frames, kd.height, kd.width, tcfg.in_channels);
    high.check_grid(&grid)?;
    fs::create_dir_all(&cfg.out)?;
    let path = cfg.cache.clone().unwrap_or_else(|| cfg.out.join("kd.s2kd"));
    let mut writer = KdCacheWriter::new(std::io::BufWriter::new(fs::File::create(&path)?))?;
    let mut teacher = |tag: ExpertTag, x: &Tensor, t: f64, text: &Tensor| -> Result<Tensor> {
        let (m, st) = match (&low, tag) {
            (Some((m, st)), ExpertTag::Low) => (m, st),
            _ => (&high, &high_store),
        };
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let y = m.forward(&mut tape, st, xv, &grid, &vec![t; grid.frames], text, Routing::Hard(&mask), &mut ForwardCtx::default())?;
        Ok(tape.value(y).clone())
    };
    let text_dim = tcfg.cond.text_dim;
    let mut data = |_: usize, r: &mut Rng| -> Result<(Tensor, Tensor)> { Ok((r.normal_tensor(&[grid.tokens(), grid.channels], 1.0), r.normal_tensor(&[text_dim], 1.0))) };
    let records = build_kd_cache(&mut teacher, &mut data, &kd.spec(), &mut rng.fork(3), &mut writer)?;
    writer.finish()?;
    high_store.save_dir(&cfg.out.join("teacher"))?;
    if let Some((_, st)) = &low {
        st.save_dir(&cfg.out.join("teacher_low"))?;
    }
    let report = json!({ "cache": path, "records": records, "grid": grid, "teacher_mask": mask, "two_expert": kd.two_expert });
    finish(cfg, manifest("build-kd-cache", cfg, report)?, true)
}

/// Trains the student on the cached tuples only and writes its checkpoint and loss curve.
pub fn cmd_distill(cfg: &RunConfig) -> Result<CmdOutcome> {
    let path = cfg.cache.as_deref().ok_or_else(|| Error::config("cache", "distill needs a cache file"))?;
    let tuples = read_kd_cache(path)?;
    let layout = resolve_layout(cfg)?;
    let rng = Rng::new(cfg.seed);
    let (model, mut store) = build_model(&layout.model, cfg.weights.as_deref(), &mut rng.fork(1), cfg.dtype)?;
    let d = &cfg.distill;
    let grid = TokenGrid::new(d.frames, d.height, d.width, layout.model.in_channels);
    if let Some(t) = tuples.iter().find(|t| t.text.numel() != layout.model.cond.text_dim) {
        return Err(Error::Format(format!("cached text embedding has {} values, student expects {}", t.text.numel(), layout.model.cond.text_dim)));
    }
    let setup = DistillSetup { model: &model, mask: &layout.mask, grid };
    let report = distill(&setup, &mut store, &tuples, &d.schedule, &mut rng.fork(2))?;
    fs::create_dir_all(&cfg.out)?;
    store.save_dir(&cfg.out.join("student"))?;
    fs::write(cfg.out.join("loss_curve.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    let summary = json!({
        "cache": path,
        "tuples": tuples.len(),
        "initial_loss": report.initial_loss,
        "final_loss": report.final_loss,
        "ratio": report.final_loss / report.initial_loss,
        "eval_curve": report.eval_curve,
        "checkpoint": cfg.out.join("student"),
    });
    finish(cfg, manifest("distill", cfg, summary)?, true)
}

/// Every registered op plus one routed sandwich; `corrupt` perturbs the VJP
/// of the cases whose name starts with it.
pub fn grad_check_cases(seed: u64, corrupt: Option<&str>) -> Result<Vec<GradCase>> {
    let mut cases = op_catalog(seed);
    cases.push(group_grad_case(seed)?);
    if let Some(prefix) = corrupt {
        cases = cases
            .into_iter()
            .map(|c| if c.name().starts_with(prefix) { GradCase { f: Box::new(CorruptedVjp { inner: c.f, factor: 1.01 }), inputs: c.inputs } } else { c })
            .collect();
    }
    Ok(cases)
}

pub fn run_grad_checks(cases: &[GradCase], tol: f64, seed: u64) -> Result<Vec<GradCheckReport>> {
    worker_pool()?.install(|| {
        cases
            .par_iter()
            .enumerate()
            .map(|(i, c)| Ok(c.check(tol, &mut Rng::new(seed).fork(i as u64))?))
            .collect()
    })
}

pub fn cmd_grad_check(cfg: &RunConfig) -> Result<CmdOutcome> {
    let switched = cfg.dtype == Precision::F32;
    if switched {
        log::warn!("grad-check runs in f64; ignoring dtype f32");
    }
    let cases = grad_check_cases(cfg.seed, cfg.grad_check.corrupt.as_deref())?;
    let reports = run_grad_checks(&cases, cfg.grad_check.tol, cfg.seed)?;
    let failures: Vec<&GradCheckReport> = reports.iter().filter(|r| !r.passed).collect();
    for r in &failures {
        log::error!("grad check failed: {} (max rel error {:.3e})", r.name, r.max_rel_error);
    }
    let passed = failures.is_empty();
    let report = json!({ "dtype_switched_to_f64": switched, "tol": cfg.grad_check.tol, "cases": reports, "failed": failures.iter().map(|r| &r.name).collect::<Vec<_>>() });
    finish(cfg, manifest("grad-check", cfg, report)?, passed)
}

/// Writes the implicit attention map of every head of one LCHA block of the first group.
pub fn cmd_attn_dump(cfg: &RunConfig) -> Result<CmdOutcome> {
    let layout = resolve_layout(cfg)?;
    let a = &cfg.attn_dump;
    let rng = Rng::new(cfg.seed);
    let (model, store) = build_model(&layout.model, cfg.weights.as_deref(), &mut rng.fork(1), cfg.dtype)?;
    let mc = model.config();
    let grid = TokenGrid::new(a.frames, a.height, a.width, mc.in_channels);
    model.check_grid(&grid)?;
    if grid.tokens() > a.max_tokens {
        return Err(Error::MemoryGuard(format!("{} tokens exceed the cap of {} for L x L maps", grid.tokens(), a.max_tokens)));
    }
    let blocks = &model.groups()[0].high;
    if a.block >= blocks.len() || !blocks[a.block].is_lcha() {
        return Err(Error::config("attn_dump.block", format!("group 0 has no LCHA block {}", a.block)));
    }
    let x = match &a.input {
        Some(p) => load_tensor(p)?,
        None => rng.fork(3).normal_tensor(&[grid.tokens(), grid.channels], 1.0),
    };
    if x.shape() != [grid.tokens(), grid.channels] {
        return Err(Error::config("attn_dump.input", format!("input {:?} does not fit grid {grid:?}", x.shape())));
    }
    let text = text_embedding(mc, &mut rng.fork(2));
    let mut tape = Tape::inference();
    let cond = model.condition(&mut tape, &store, &vec![0.5; grid.frames], &text)?;
    let xv = tape.constant(x);
    let mut h = model.embed(&mut tape, &store, xv)?;
    let bgrid = grid.with_channels(mc.dim);
    let mut trace = BlockTrace::default();
    for (i, block) in blocks.iter().enumerate().take(a.block + 1) {
        let t = (i == a.block).then_some(&mut trace);
        let mut ctx = BlockCtx { grid: bgrid, frame_offset: 0, stream: None, trace: t };
        h = block.forward(&mut tape, &store, h, cond, &mut ctx)?;
    }
    let inputs = trace.linear_inputs.ok_or_else(|| Error::StateMismatch("block trace lacks linear-attention inputs".into()))?;
    let maps = linear_attention_maps(&inputs)?;
    let out = inputs.output()?;
    fs::create_dir_all(&cfg.out)?;
    let dv = inputs.v.cols() / inputs.heads;
    let mut heads = Vec::with_capacity(maps.len());
    let mut worst_reconstruction = 0.0f64;
    for (hd, m) in maps.iter().enumerate() {
        let file = cfg.out.join(format!("attn_head{hd}.s2tn"));
        save_tensor(&file, m)?;
        let l = m.rows();
        let sums: Vec<f64> = (0..l).map(|i| m.row(i).iter().sum()).collect();
        for i in 0..l {
            for c in 0..dv {
                let rec: f64 = (0..l).map(|j| m.row(i)[j] * inputs.v.row(j)[hd * dv + c]).sum();
                worst_reconstruction = worst_reconstruction.max((rec - out.row(i)[hd * dv + c]).abs());
            }
        }
        heads.push(json!({
            "file": file,
            "tokens": l,
            "row_sum_min": sums.iter().copied().fold(f64::INFINITY, f64::min),
            "row_sum_max": sums.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }));
    }
    let report = json!({
        "layout_hash": layout.hash()?,
        "block": a.block,
        "rope": mc.lcha.rope,
        "causal": inputs.causal,
        "heads": heads,
        "max_reconstruction_error": worst_reconstruction,
    });
    finish(cfg, manifest("attn-dump", cfg, report)?, worst_reconstruction <= 1e-5)
}
