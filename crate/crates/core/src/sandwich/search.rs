use serde::{Deserialize, Serialize};

use super::gumbel::{gumbel_mask_gates, lcha_probability, temperature};
use super::masks::{enumerate_masks, harden_mask};
use super::model::{ForwardCtx, ModelConfig, Routing, SandwichModel};
use crate::attention::TokenGrid;
use crate::error::{Error, Result};
use crate::numerics::{Adam, NumericsError, ParamId, ParamStore, Rng, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSchedule {
    pub steps: usize,
    pub lr_logits: f64,
    /// Learning rate of the co-trained block weights; 0 freezes them.
    pub lr_weights: f64,
}

impl Default for SearchSchedule {
    fn default() -> Self {
        Self { steps: 120, lr_logits: 0.05, lr_weights: 1e-3 }
    }
}

/// One training example for the search: model input and the reference output.
#[derive(Clone, Debug)]
pub struct SearchBatch {
    pub x: Tensor,
    pub grid: TokenGrid,
    pub timesteps: Vec<f64>,
    pub text: Tensor,
    pub target: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub mask: Vec<u8>,
    /// Final noiseless LCHA probability per group (endpoints are 1).
    pub probabilities: Vec<f64>,
    pub losses: Vec<f64>,
    pub steps_run: usize,
}

/// Registers zero routing logits `route.g{n}` for the interior groups.
pub fn routing_logits(store: &mut ParamStore, groups: usize) -> Vec<ParamId> {
    (1..groups.saturating_sub(1))
        .map(|n| {
            let name = format!("route.g{n}");
            store.id(&name).unwrap_or_else(|| store.insert(name, Tensor::zeros(&[1, 2])))
        })
        .collect()
}

/// Trains routing logits with Gumbel straight-through mask draws over the
/// legal candidates, plus the block weights unless `lr_weights` is 0, against
/// the MSE to `batch.target`; then hardens to a mask with `k` interior LCHA groups.
pub fn search(
    model: &SandwichModel,
    store: &mut ParamStore,
    k: usize,
    schedule: &SearchSchedule,
    rng: &mut Rng,
    data: &mut dyn FnMut(usize, &mut Rng) -> Result<SearchBatch>,
) -> Result<SearchOutcome> {
    let groups = model.config().groups;
    let candidates = enumerate_masks(groups, k)?;
    let logits = routing_logits(store, groups);
    let probabilities = |store: &ParamStore| -> Vec<f64> {
        let mut p = vec![1.0; groups];
        for (n, id) in logits.iter().enumerate() {
            p[n + 1] = lcha_probability(store.get(*id));
        }
        p
    };
    if candidates.len() == 1 {
        return Ok(SearchOutcome { mask: candidates[0].clone(), probabilities: probabilities(store), losses: Vec::new(), steps_run: 0 });
    }

    let mut opt_logits = Adam::new(schedule.lr_logits);
    let mut opt_weights = Adam::new(schedule.lr_weights);
    let mut losses = Vec::with_capacity(schedule.steps);
    for step in 0..schedule.steps {
        let batch = data(step, rng)?;
        let tau = temperature(step, schedule.steps);
        let mut tape = Tape::new();
        let mut vars: Vec<Option<Var>> = vec![None; groups];
        for (n, id) in logits.iter().enumerate() {
            vars[n + 1] = Some(tape.param(store, *id));
        }
        let gates = gumbel_mask_gates(&mut tape, &vars, &candidates, tau, rng)?;
        let x = tape.constant(batch.x);
        let y = model.forward(&mut tape, store, x, &batch.grid, &batch.timesteps, &batch.text, Routing::Soft(&gates), &mut ForwardCtx::default())?;
        let target = tape.constant(batch.target);
        let loss = tape.mse(y, target)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Numerics(NumericsError::NonFinite { op: "search loss".into(), index: step, value }));
        }
        losses.push(value);
        let grads = tape.backward(loss)?;
        opt_logits.step_filtered(store, &grads, |id| logits.contains(&id));
        if schedule.lr_weights > 0.0 {
            opt_weights.step_filtered(store, &grads, |id| !logits.contains(&id));
        }
        log::debug!("search step {step}: tau {tau:.3} loss {value:.6e}");
    }
    let probs = probabilities(store);
    let mask = harden_mask(&probs, k)?;
    Ok(SearchOutcome { mask, probabilities: probs, losses, steps_run: schedule.steps })
}

/// Small model used by the planted-mask experiment.
pub fn planted_config() -> ModelConfig {
    let mut cfg = ModelConfig { in_channels: 2, dim: 8, mlp_hidden: 16, groups: 5, group_size: 1, ..ModelConfig::default() };
    cfg.lcha.head_dim = 4;
    cfg.ssa.attn.head_dim = 8;
    cfg
}

/// Grid of the toy search batches.
pub const SEARCH_GRID: (usize, usize, usize) = (2, 4, 4);

/// Searches `k` interior LCHA groups for a student that starts from the
/// weights of a teacher running `teacher_mask`. Batches are random latents
/// labelled by the teacher. With an all-ones teacher mask this is plain
/// self-distillation.
pub fn search_against_teacher(cfg: &ModelConfig, teacher_mask: &[u8], k: usize, seed: u64, schedule: &SearchSchedule) -> Result<SearchOutcome> {
    let rng = Rng::new(seed);
    let mut teacher_store = ParamStore::new();
    let teacher = SandwichModel::new(&mut teacher_store, cfg, &mut rng.fork(1))?;
    teacher.check_mask(teacher_mask)?;
    let mut student_store = ParamStore::new();
    let student = SandwichModel::new(&mut student_store, cfg, &mut rng.fork(2))?;
    student_store.inherit_from(&teacher_store, |n| Some(n.to_string()));

    let (frames, height, width) = SEARCH_GRID;
    let grid = TokenGrid::new(frames, height, width, cfg.in_channels);
    let text_dim = cfg.cond.text_dim;
    let mut data_rng = rng.fork(3);
    let mut data = |_step: usize, _: &mut Rng| -> Result<SearchBatch> {
        let x = data_rng.normal_tensor(&[grid.tokens(), grid.channels], 1.0);
        let t = data_rng.uniform();
        let timesteps = vec![t; grid.frames];
        let text = data_rng.normal_tensor(&[text_dim], 1.0);
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let y = teacher.forward(&mut tape, &teacher_store, xv, &grid, &timesteps, &text, Routing::Hard(teacher_mask), &mut ForwardCtx::default())?;
        Ok(SearchBatch { x, grid, timesteps, text, target: tape.value(y).clone() })
    };
    let mut search_rng = rng.fork(4);
    search(&student, &mut student_store, k, schedule, &mut search_rng, &mut data)
}

/// Planted-layout experiment: a teacher is the model run with `planted`; the
/// student starts from the teacher's weights and must find the mask again.
pub fn planted_recovery(seed: u64, planted: &[u8], schedule: &SearchSchedule) -> Result<SearchOutcome> {
    let cfg = planted_config();
    if planted.len() != cfg.groups {
        return Err(Error::Layout(format!("planted mask needs {} groups", cfg.groups)));
    }
    let k = planted[1..planted.len() - 1].iter().filter(|&&b| b == 1).count();
    search_against_teacher(&cfg, planted, k, seed, schedule)
}
