use super::*;
use crate::attention::TokenGrid;
use crate::error::Error;
use crate::numerics::{grad_check, NumericsError, ParamStore, Rng, Tape, TapeFn, Tensor, Var};

struct Fixture {
    store: ParamStore,
    model: SandwichModel,
    grid: TokenGrid,
    x: Tensor,
    text: Tensor,
    ts: Vec<f64>,
}

fn tiny_config(groups: usize, group_size: usize) -> ModelConfig {
    let mut cfg = ModelConfig { in_channels: 2, dim: 4, mlp_hidden: 8, groups, group_size, ..ModelConfig::default() };
    cfg.cond.freq_dim = 4;
    cfg.cond.text_dim = 3;
    cfg.cond.cond_dim = 4;
    cfg.lcha.heads = 2;
    cfg.lcha.head_dim = 2;
    cfg.ssa.attn.heads = 1;
    cfg.ssa.attn.head_dim = 4;
    cfg.ssa.low_dim = Some(6);
    cfg
}

fn fixture(seed: u64, groups: usize, group_size: usize, grid: TokenGrid) -> Fixture {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let model = SandwichModel::new(&mut store, &tiny_config(groups, group_size), &mut rng).unwrap();
    // nonzero AdaLN biases so every block output depends on its input
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).ends_with(".b") {
            let t = rng.normal_tensor(store.get(id).shape(), 0.3);
            store.set(id, t).unwrap();
        }
    }
    let x = rng.normal_tensor(&[grid.tokens(), 2], 1.0);
    let text = rng.normal_tensor(&[3], 1.0);
    let ts = (0..grid.frames).map(|i| 0.3 + 0.2 * i as f64).collect();
    Fixture { store, model, grid, x, text, ts }
}

fn hard(f: &Fixture, mask: &[u8], trace: Option<&mut Vec<GroupTrace>>) -> Tensor {
    let mut tape = Tape::inference();
    let x = tape.constant(f.x.clone());
    let mut ctx = ForwardCtx { trace, ..ForwardCtx::default() };
    let y = f.model.forward(&mut tape, &f.store, x, &f.grid, &f.ts, &f.text, Routing::Hard(mask), &mut ctx).unwrap();
    tape.value(y).clone()
}

/// Explicit composition for each of the four reference masks.
fn hand_wired(f: &Fixture, mask: &[u8]) -> Tensor {
    let (m, s, g) = (&f.model, &f.store, &f.grid);
    let mut tape = Tape::inference();
    let t = &mut tape;
    let cond = m.condition(t, s, &f.ts, &f.text).unwrap();
    let x = t.constant(f.x.clone());
    let h0 = m.embed(t, s, x).unwrap();
    let mut ctx = ForwardCtx::default();
    let c = &mut ctx;
    let y = match mask {
        [1, 1, 1] => {
            let a = m.run_high(t, s, 0, h0, cond, g, c).unwrap();
            let b = m.run_high(t, s, 1, a, cond, g, c).unwrap();
            m.run_high(t, s, 2, b, cond, g, c).unwrap()
        }
        [1, 0, 1] => {
            let a = m.run_high(t, s, 0, h0, cond, g, c).unwrap();
            let d = m.down(t, s, 1, a, g).unwrap();
            let b = m.run_low(t, s, 1, d, cond, g, c).unwrap();
            let u = m.up(t, s, 2, b, g).unwrap();
            let u = t.add(u, a).unwrap();
            m.run_high(t, s, 2, u, cond, g, c).unwrap()
        }
        [1, 0, 0, 1] => {
            let a = m.run_high(t, s, 0, h0, cond, g, c).unwrap();
            let d = m.down(t, s, 1, a, g).unwrap();
            let b = m.run_low(t, s, 1, d, cond, g, c).unwrap();
            let b = m.run_low(t, s, 2, b, cond, g, c).unwrap();
            let u = m.up(t, s, 3, b, g).unwrap();
            let u = t.add(u, a).unwrap();
            m.run_high(t, s, 3, u, cond, g, c).unwrap()
        }
        [1, 1, 0, 1] => {
            let a = m.run_high(t, s, 0, h0, cond, g, c).unwrap();
            let a = m.run_high(t, s, 1, a, cond, g, c).unwrap();
            let d = m.down(t, s, 2, a, g).unwrap();
            let b = m.run_low(t, s, 2, d, cond, g, c).unwrap();
            let u = m.up(t, s, 3, b, g).unwrap();
            let u = t.add(u, a).unwrap();
            m.run_high(t, s, 3, u, cond, g, c).unwrap()
        }
        other => panic!("no reference for {other:?}"),
    };
    let out = m.head(t, s, y, cond, g).unwrap();
    t.value(out).clone()
}

#[test]
fn hard_routing_matches_hand_wired_compositions() {
    let grid = TokenGrid::new(2, 4, 4, 2);
    for mask in [&[1u8, 1, 1][..], &[1, 0, 1], &[1, 0, 0, 1], &[1, 1, 0, 1]] {
        let f = fixture(7, mask.len(), 2, grid);
        let got = hard(&f, mask, None);
        let want = hand_wired(&f, mask);
        assert!(got.bit_eq(&want), "{mask:?}");
    }
}

#[test]
fn different_masks_give_different_outputs() {
    let f = fixture(8, 4, 1, TokenGrid::new(2, 4, 4, 2));
    let a = hard(&f, &[1, 0, 0, 1], None);
    let b = hard(&f, &[1, 1, 0, 1], None);
    assert!(a.max_abs_diff(&b) > 1e-6);
}

/// Checks triggers, skip-buffer updates and stream conservation against the mask.
fn check_trace(mask: &[u8], trace: &[GroupTrace]) {
    assert_eq!(trace.len(), mask.len());
    let mut m_prev = 1u8;
    let mut prev: Option<&GroupTrace> = None;
    for (n, (tr, &m)) in trace.iter().zip(mask).enumerate() {
        let (u, d) = triggers(m_prev, m);
        assert_eq!((tr.m, tr.u, tr.d), (m as f64, u as f64, d as f64), "group {n}");
        assert_eq!((tr.ran_high, tr.ran_low), (m == 1, m == 0));
        if let Some(p) = prev {
            if d == 1 {
                assert!(tr.skip.bit_eq(&p.y_l), "skip must hold the pre-switch y_L at group {n}");
            } else {
                assert!(tr.skip.bit_eq(&p.skip), "skip changed without a 1->0 switch at group {n}");
            }
            if m == 1 {
                assert_eq!(tr.y_s.is_some(), p.y_s.is_some());
                if let (Some(a), Some(b)) = (&tr.y_s, &p.y_s) {
                    assert!(a.bit_eq(b), "y_S touched on a high group {n}");
                }
            } else {
                assert!(tr.y_l.bit_eq(&p.y_l), "y_L touched on a low group {n}");
            }
        } else {
            assert!(tr.skip.data().iter().all(|&v| v == 0.0));
        }
        prev = Some(tr);
        m_prev = m;
    }
}

#[test]
fn traces_follow_switch_algebra() {
    let grid = TokenGrid::new(2, 4, 4, 2);
    for mask in [&[1u8, 1, 1][..], &[1, 0, 1], &[1, 0, 0, 1], &[1, 1, 0, 1], &[1, 0, 1, 0, 1], &[1, 0, 0, 0, 1, 1]] {
        let f = fixture(9, mask.len(), 1, grid);
        let mut trace = Vec::new();
        let y = hard(&f, mask, Some(&mut trace));
        check_trace(mask, &trace);
        assert!(y.data().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn final_merge_is_last_high_stream() {
    let f = fixture(10, 3, 1, TokenGrid::new(2, 4, 4, 2));
    let mut trace = Vec::new();
    let y = hard(&f, &[1, 0, 1], Some(&mut trace));
    let mut tape = Tape::inference();
    let cond = f.model.condition(&mut tape, &f.store, &f.ts, &f.text).unwrap();
    let y_l = tape.constant(trace[2].y_l.clone());
    let out = f.model.head(&mut tape, &f.store, y_l, cond, &f.grid).unwrap();
    assert!(tape.value(out).bit_eq(&y));
}

fn soft(f: &Fixture, gates: &[f64], trace: Option<&mut Vec<GroupTrace>>) -> Tensor {
    let mut tape = Tape::inference();
    let x = tape.constant(f.x.clone());
    let g: Vec<Var> = gates.iter().map(|&v| tape.constant(Tensor::scalar(v).reshape(&[1]).unwrap())).collect();
    let mut ctx = ForwardCtx { trace, ..ForwardCtx::default() };
    let y = f.model.forward(&mut tape, &f.store, x, &f.grid, &f.ts, &f.text, Routing::Soft(&g), &mut ctx).unwrap();
    tape.value(y).clone()
}

#[test]
fn binary_soft_gates_reproduce_hard_routing() {
    let grid = TokenGrid::new(2, 4, 4, 2);
    for mask in [&[1u8, 1, 1][..], &[1, 0, 1], &[1, 0, 0, 1], &[1, 1, 0, 1], &[1, 0, 1, 0, 1]] {
        let f = fixture(11, mask.len(), 1, grid);
        let gates: Vec<f64> = mask.iter().map(|&b| b as f64).collect();
        let mut st = Vec::new();
        let s = soft(&f, &gates, Some(&mut st));
        let mut ht = Vec::new();
        let h = hard(&f, mask, Some(&mut ht));
        assert!(s.max_abs_diff(&h) == 0.0, "{mask:?}: {}", s.max_abs_diff(&h));
        for (a, b) in st.iter().zip(&ht) {
            assert_eq!((a.u, a.d), (b.u, b.d));
            assert!(a.skip.bit_eq(&b.skip) && a.y_l.bit_eq(&b.y_l));
        }
    }
}

#[test]
fn soft_routing_gradients_through_gates_and_weights() {
    let grid = TokenGrid::new(2, 2, 2, 2);
    let f = fixture(12, 4, 1, grid);
    let ids: Vec<_> = f.store.ids().filter(|id| ["g1.", "g2.rs"].iter().any(|p| f.store.name(*id).starts_with(p))).collect();
    let mut inputs = vec![f.x.clone(), Tensor::new(vec![1], vec![0.3]).unwrap(), Tensor::new(vec![1], vec![0.7]).unwrap()];
    inputs.extend(ids.iter().map(|id| f.store.get(*id).clone()));
    let func = TapeFn::new("routed group", |tape: &mut Tape, vars: &[Var]| {
        for (id, v) in ids.iter().zip(&vars[3..]) {
            tape.bind_param(*id, *v);
        }
        let one = tape.constant(Tensor::ones(&[1]));
        let gates = [one, vars[1], vars[2], one];
        f.model
            .forward(tape, &f.store, vars[0], &f.grid, &f.ts, &f.text, Routing::Soft(&gates), &mut ForwardCtx::default())
            .map_err(|e| match e {
                Error::Numerics(n) => n,
                other => NumericsError::InvalidArgument(other.to_string()),
            })
    });
    let r = grad_check(&func, &inputs, 1e-4, &mut Rng::new(3)).unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn hard_routing_rejects_illegal_masks_and_grids() {
    let f = fixture(13, 3, 1, TokenGrid::new(2, 4, 4, 2));
    let mut tape = Tape::inference();
    let x = tape.constant(f.x.clone());
    for mask in [&[0u8, 1, 1][..], &[1, 1, 0], &[1, 1], &[1, 2, 1]] {
        let r = f.model.forward(&mut tape, &f.store, x, &f.grid, &f.ts, &f.text, Routing::Hard(mask), &mut ForwardCtx::default());
        assert!(matches!(r, Err(Error::Layout(_))), "{mask:?}");
    }
    let odd = TokenGrid::new(2, 3, 4, 2);
    let x = tape.constant(Tensor::zeros(&[odd.tokens(), 2]));
    let r = f.model.forward(&mut tape, &f.store, x, &odd, &f.ts, &f.text, Routing::Hard(&[1, 0, 1]), &mut ForwardCtx::default());
    assert!(r.is_err());
}

#[test]
fn self_distill_identities() {
    let mut rng = Rng::new(4);
    let a = rng.normal_tensor(&[5, 3], 1.0);
    assert_eq!(self_distill_loss(&a, &a).unwrap(), 0.0);
    let b = a.map(|v| v + 1.0);
    assert!((self_distill_loss(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    let c = rng.normal_tensor(&[5, 3], 1.0);
    let mut oracle = 0.0;
    for i in 0..15 {
        oracle += (a.data()[i] - c.data()[i]).powi(2);
    }
    assert!((self_distill_loss(&a, &c).unwrap() - oracle / 15.0).abs() < 1e-12);
    assert!(self_distill_loss(&a, &Tensor::zeros(&[3, 5])).is_err());
}

#[test]
fn single_candidate_search_returns_without_training() {
    let f = fixture(14, 3, 1, TokenGrid::new(2, 4, 4, 2));
    let mut store = f.store.clone();
    let before = store.clone();
    let mut data = |_: usize, _: &mut Rng| -> crate::Result<SearchBatch> { panic!("no data needed") };
    for (k, want) in [(0, vec![1, 0, 1]), (1, vec![1, 1, 1])] {
        let out = search(&f.model, &mut store, k, &SearchSchedule::default(), &mut Rng::new(1), &mut data).unwrap();
        assert_eq!(out.mask, want);
        assert_eq!(out.steps_run, 0);
    }
    for id in before.ids() {
        assert!(store.get(id).bit_eq(before.get(id)));
    }
}

#[test]
fn planted_mask_is_recovered() {
    let planted = [1, 0, 1, 0, 1];
    let out = planted_recovery(0, &planted, &SearchSchedule::default()).unwrap();
    assert_eq!(out.mask, planted, "{out:?}");
    assert!(is_legal(&out.mask, 1));
}
