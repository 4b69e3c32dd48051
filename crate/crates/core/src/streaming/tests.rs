use super::*;
use crate::numerics::{ParamStore, Rng, Tensor};
use crate::sandwich::{ModelConfig, SandwichLayout, SandwichModel};

fn small_config() -> ModelConfig {
    let mut cfg = ModelConfig { in_channels: 2, dim: 8, mlp_hidden: 16, groups: 3, group_size: 1, ..ModelConfig::default() };
    cfg.lcha.head_dim = 4;
    cfg.ssa.attn.head_dim = 8;
    cfg
}

fn engine(seed: u64, mask: &[u8], plan: &ChunkPlan, window: Option<usize>) -> StreamEngine {
    let cfg = small_config();
    let mut store = ParamStore::new();
    let model = SandwichModel::new(&mut store, &cfg, &mut Rng::new(seed)).unwrap();
    let layout = SandwichLayout::new(cfg, mask.to_vec()).unwrap();
    StreamEngine::new(model, store, &layout, plan.clone(), window).unwrap()
}

fn noises(seed: u64, plan: &ChunkPlan, n: usize) -> Vec<Tensor> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| rng.normal_tensor(&[plan.tokens_per_chunk(), 2], 1.0)).collect()
}

fn text(seed: u64) -> Tensor {
    Rng::new(seed).normal_tensor(&[ModelConfig::default().cond.text_dim], 1.0)
}

fn run(e: &mut StreamEngine, noise: &[Tensor], text: &Tensor) -> Vec<Tensor> {
    noise.iter().map(|n| e.step(n, text).unwrap()).collect()
}

#[test]
fn chunked_matches_offline_forward() {
    let plan = ChunkPlan { chunks: 3, steps: 2, ..ChunkPlan::default() };
    for mask in [vec![1, 0, 1], vec![1, 1, 1]] {
        let mut e = engine(1, &mask, &plan, Some(plan.chunks));
        let z = noises(2, &plan, plan.chunks);
        let c = text(3);
        let streamed = run(&mut e, &z, &c);
        let offline = offline_generate(e.model(), e.store(), &mask, &plan, &z, &c).unwrap();
        for (a, b) in streamed.iter().zip(&offline) {
            assert!(a.max_rel_diff(b) <= 1e-10, "{mask:?}: {}", a.max_rel_diff(b));
        }
    }
}

#[test]
fn perturbing_a_later_chunk_leaves_earlier_ones_untouched() {
    let plan = ChunkPlan { chunks: 3, ..ChunkPlan::default() };
    let z = noises(4, &plan, 3);
    let mut z2 = z.clone();
    z2[2] = z2[2].map(|v| v + 1.0);
    let c = text(5);
    let a = run(&mut engine(6, &[1, 0, 1], &plan, Some(2)), &z, &c);
    let b = run(&mut engine(6, &[1, 0, 1], &plan, Some(2)), &z2, &c);
    assert!(a[0].bit_eq(&b[0]) && a[1].bit_eq(&b[1]));
    assert!(!a[2].bit_eq(&b[2]));
}

#[test]
fn reset_gives_a_fresh_stream() {
    let plan = ChunkPlan::default();
    let z = noises(7, &plan, 3);
    let c = text(8);
    let fresh = run(&mut engine(9, &[1, 0, 1], &plan, Some(2)), &z, &c);
    let mut e = engine(9, &[1, 0, 1], &plan, Some(2));
    run(&mut e, &noises(10, &plan, 2), &c);
    e.reset();
    e.reset();
    assert_eq!(e.cache_bytes().ssa_kv, 0);
    let again = run(&mut e, &z, &c);
    for (a, b) in fresh.iter().zip(&again) {
        assert!(a.bit_eq(b));
    }
}

#[test]
fn window_bounds_kv_and_keeps_state_flat() {
    let plan = ChunkPlan { chunks: 10, steps: 1, ..ChunkPlan::default() };
    let mut e = engine(11, &[1, 0, 1], &plan, Some(2));
    let c = text(12);
    let ssa_per_chunk = plan.tokens_per_chunk() / 4;
    let mut fixed = None;
    for (i, z) in noises(13, &plan, 10).iter().enumerate() {
        e.step(z, &c).unwrap();
        let bytes = e.cache_bytes();
        assert_eq!(*fixed.get_or_insert(bytes.fixed()), bytes.fixed());
        assert_eq!(e.kv_tokens(), vec![ssa_per_chunk * (i + 1).min(2)]);
        assert!(e.lin_tokens().iter().all(|&t| t == (i + 1) * plan.tokens_per_chunk()));
    }
    let layout = SandwichLayout::new(small_config(), vec![1, 0, 1]).unwrap();
    assert_eq!(cache_footprint(&layout, &plan, Some(2)).unwrap(), e.cache_bytes());
}

#[test]
fn windowed_run_matches_unwindowed_up_to_the_window() {
    let plan = ChunkPlan { chunks: 4, steps: 2, ..ChunkPlan::default() };
    let z = noises(14, &plan, 4);
    let c = text(15);
    let a = run(&mut engine(16, &[1, 0, 1], &plan, Some(2)), &z, &c);
    let b = run(&mut engine(16, &[1, 0, 1], &plan, None), &z, &c);
    // chunk 3 still sees both earlier chunks; chunk 4 has lost the first
    for i in 0..3 {
        assert!(a[i].bit_eq(&b[i]), "chunk {i}");
    }
    assert!(!a[3].bit_eq(&b[3]));
}

#[test]
fn footprint_scaling() {
    let layout = SandwichLayout::new(small_config(), vec![1, 0, 1]).unwrap();
    let plan = |chunks| ChunkPlan { chunks, ..ChunkPlan::default() };
    let a = cache_footprint(&layout, &plan(5), Some(2)).unwrap();
    let b = cache_footprint(&layout, &plan(10), Some(2)).unwrap();
    assert_eq!(a, b);
    let per = cache_footprint(&layout, &plan(1), None).unwrap().ssa_kv;
    for n in [2, 7, 20] {
        assert_eq!(cache_footprint(&layout, &plan(n), None).unwrap().ssa_kv, n * per);
    }
}

#[test]
fn bad_inputs_are_rejected() {
    let plan = ChunkPlan::default();
    let mut e = engine(17, &[1, 0, 1], &plan, Some(2));
    assert!(e.step(&Tensor::zeros(&[5, 2]), &text(1)).is_err());
    let z = &noises(1, &plan, 1)[0];
    assert!(e.step_with(z, &[1.0, 0.5], &text(1)).is_err());
    assert!(e.step_with(z, &[1.0, 1.0, 0.0], &text(1)).is_err());
    assert_eq!(e.chunks_done(), 0);
    let cfg = small_config();
    let mut store = ParamStore::new();
    let model = SandwichModel::new(&mut store, &cfg, &mut Rng::new(0)).unwrap();
    let other = SandwichLayout::new(ModelConfig { dim: 16, ..cfg.clone() }, vec![1, 0, 1]).unwrap();
    assert!(matches!(StreamEngine::new(model, store, &other, plan, None), Err(crate::Error::StateMismatch(_))));
}

#[test]
fn latency_arithmetic() {
    let p = LatencyInputs { text_encoder_ms: 4.0, dit_step_ms: 260.0, decoder_ms: 80.0, steps: 4, frames_per_chunk: 12 };
    let r = latency_model(&p).unwrap();
    assert_eq!(r.chunk_ms, 1124.0);
    assert_eq!(r.fps_1dp(), 10.7);
    assert_eq!(latency_model(&LatencyInputs { steps: 1, ..p.clone() }).unwrap().chunk_ms, 344.0);
    let bare = latency_model(&LatencyInputs { text_encoder_ms: 0.0, decoder_ms: 0.0, ..p.clone() }).unwrap();
    assert!((bare.fps - 12.0 / (4.0 * 0.26)).abs() < 1e-12);
    assert!(latency_model(&LatencyInputs { dit_step_ms: 0.0, ..p }).is_err());
}

#[test]
fn schedule_shape() {
    assert_eq!(uniform_schedule(4), vec![1.0, 0.75, 0.5, 0.25, 0.0]);
    assert_eq!(uniform_schedule(1), vec![1.0, 0.0]);
}
