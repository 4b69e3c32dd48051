use std::sync::Arc;

use super::model::{ForwardCtx, ModelConfig, Routing, SandwichModel};
use crate::attention::TokenGrid;
use crate::error::{Error, Result};
use crate::numerics::{GradCase, NumericsError, ParamStore, Rng, Tape, TapeFn, Tensor, Var};

/// Smallest model the routing grad check runs on.
pub fn tiny_config(groups: usize, group_size: usize) -> ModelConfig {
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

/// End-to-end check of one routed sandwich: inputs are the latent, two interior
/// soft gates, and every weight of group 1 plus the resampler of group 2.
pub fn group_grad_case(seed: u64) -> Result<GradCase> {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let model = SandwichModel::new(&mut store, &tiny_config(4, 1), &mut rng)?;
    // nonzero biases so every block output depends on its input
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).ends_with(".b") {
            let t = rng.normal_tensor(store.get(id).shape(), 0.3);
            store.set(id, t)?;
        }
    }
    let grid = TokenGrid::new(2, 2, 2, 2);
    let x = rng.normal_tensor(&[grid.tokens(), 2], 1.0);
    let text = rng.normal_tensor(&[3], 1.0);
    let ts = vec![0.3, 0.5];
    let ids: Vec<_> = store.ids().filter(|id| ["g1.", "g2.rs"].iter().any(|p| store.name(*id).starts_with(p))).collect();
    let mut inputs = vec![x, Tensor::new(vec![1], vec![0.3])?, Tensor::new(vec![1], vec![0.7])?];
    inputs.extend(ids.iter().map(|id| store.get(*id).clone()));
    let (model, store) = (Arc::new(model), Arc::new(store));
    let func = TapeFn::new("sandwich group (soft routing)", move |tape: &mut Tape, vars: &[Var]| {
        for (id, v) in ids.iter().zip(&vars[3..]) {
            tape.bind_param(*id, *v);
        }
        let one = tape.constant(Tensor::ones(&[1]));
        let gates = [one, vars[1], vars[2], one];
        model.forward(tape, &store, vars[0], &grid, &ts, &text, Routing::Soft(&gates), &mut ForwardCtx::default()).map_err(|e| match e {
            Error::Numerics(n) => n,
            other => NumericsError::InvalidArgument(other.to_string()),
        })
    });
    Ok(GradCase::new(func, inputs))
}
