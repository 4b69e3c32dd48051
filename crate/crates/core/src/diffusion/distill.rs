use serde::{Deserialize, Serialize};

use super::{kd_loss, two_expert_weights, DiffusionTuple, ExpertTag, DEFAULT_EXPERT_WEIGHT};
use crate::attention::TokenGrid;
use crate::error::{Error, Result};
use crate::numerics::{Adam, NumericsError, ParamStore, Rng, Tape, Tensor, Var};
use crate::sandwich::{ForwardCtx, Routing, SandwichModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSchedule {
    pub steps: usize,
    pub lr: f64,
    /// Tuples per optimizer step.
    pub batch: usize,
    /// Evaluate on the first `eval_subset` tuples every `eval_every` steps.
    pub eval_every: usize,
    pub eval_subset: usize,
    pub w_low: f64,
    pub w_high: f64,
}

impl Default for DistillSchedule {
    fn default() -> Self {
        Self { steps: 200, lr: 3e-3, batch: 8, eval_every: 20, eval_subset: 64, w_low: DEFAULT_EXPERT_WEIGHT, w_high: DEFAULT_EXPERT_WEIGHT }
    }
}

/// Student model, its routing and the latent grid of every cached tuple.
pub struct DistillSetup<'a> {
    pub model: &'a SandwichModel,
    pub mask: &'a [u8],
    pub grid: TokenGrid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    /// Loss of every optimizer step on its own batch.
    pub batch_losses: Vec<f64>,
    /// `(step, loss)` on the fixed evaluation subset.
    pub eval_curve: Vec<(usize, f64)>,
    /// Loss over the whole cache before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
}

impl DistillSetup<'_> {
    fn predict(&self, tape: &mut Tape, store: &ParamStore, tuple: &DiffusionTuple) -> Result<Var> {
        if tuple.x_t.shape() != [self.grid.tokens(), self.grid.channels] {
            return Err(Error::Format(format!("cached latent {:?} does not fit grid {:?}", tuple.x_t.shape(), self.grid)));
        }
        let x = tape.constant(tuple.x_t.clone());
        let ts = vec![tuple.t; self.grid.frames];
        self.model.forward(tape, store, x, &self.grid, &ts, &tuple.text, Routing::Hard(self.mask), &mut ForwardCtx::default())
    }

    pub fn velocity(&self, store: &ParamStore, tuple: &DiffusionTuple) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let y = self.predict(&mut tape, store, tuple)?;
        Ok(tape.value(y).clone())
    }
}

fn weights(tuples: &[&DiffusionTuple], s: &DistillSchedule) -> Result<Vec<f64>> {
    if tuples.iter().all(|t| t.expert == ExpertTag::Single) {
        Ok(vec![1.0 / tuples.len() as f64; tuples.len()])
    } else {
        let tags: Vec<ExpertTag> = tuples.iter().map(|t| t.expert).collect();
        two_expert_weights(&tags, s.w_low, s.w_high)
    }
}

/// Distillation loss over `tuples`: plain mean for single-teacher records,
/// the weighted two-expert form otherwise.
pub fn eval_kd_loss(setup: &DistillSetup, store: &ParamStore, tuples: &[DiffusionTuple], schedule: &DistillSchedule) -> Result<f64> {
    let refs: Vec<&DiffusionTuple> = tuples.iter().collect();
    let w = weights(&refs, schedule)?;
    let mut total = 0.0;
    for (t, w) in tuples.iter().zip(w) {
        total += w * kd_loss(&setup.velocity(store, t)?, &t.v)?;
    }
    Ok(total)
}

/// Draws a batch; with expert-tagged records each expert gets half of it.
fn draw_batch<'t>(tuples: &'t [DiffusionTuple], size: usize, rng: &mut Rng) -> Vec<&'t DiffusionTuple> {
    let high: Vec<&DiffusionTuple> = tuples.iter().filter(|t| t.expert == ExpertTag::High).collect();
    let low: Vec<&DiffusionTuple> = tuples.iter().filter(|t| t.expert == ExpertTag::Low).collect();
    if high.is_empty() || low.is_empty() {
        return (0..size).map(|_| &tuples[rng.below(tuples.len())]).collect();
    }
    let n_high = size / 2;
    let mut out: Vec<&DiffusionTuple> = (0..n_high).map(|_| high[rng.below(high.len())]).collect();
    out.extend((n_high..size).map(|_| low[rng.below(low.len())]));
    out
}

/// Trains the student on cached tuples only.
pub fn distill(setup: &DistillSetup, store: &mut ParamStore, tuples: &[DiffusionTuple], schedule: &DistillSchedule, rng: &mut Rng) -> Result<DistillReport> {
    if tuples.is_empty() {
        return Err(Error::config("cache", "no tuples"));
    }
    if schedule.batch == 0 {
        return Err(Error::config("batch", "must be positive"));
    }
    let eval_set = &tuples[..schedule.eval_subset.min(tuples.len())];
    let initial_loss = eval_kd_loss(setup, store, tuples, schedule)?;
    let mut eval_curve = vec![(0, eval_kd_loss(setup, store, eval_set, schedule)?)];
    let mut opt = Adam::new(schedule.lr);
    let mut batch_losses = Vec::with_capacity(schedule.steps);
    for step in 0..schedule.steps {
        let batch = draw_batch(tuples, schedule.batch, rng);
        let w = weights(&batch, schedule)?;
        let mut tape = Tape::new();
        let mut loss: Option<Var> = None;
        for (tuple, w) in batch.iter().zip(w) {
            let y = setup.predict(&mut tape, store, tuple)?;
            let target = tape.constant(tuple.v.clone());
            let l = tape.mse(y, target)?;
            let l = tape.scale(l, w)?;
            loss = Some(match loss {
                Some(acc) => tape.add(acc, l)?,
                None => l,
            });
        }
        let loss = loss.expect("batch is non-empty");
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Numerics(NumericsError::NonFinite { op: "kd loss".into(), index: step, value }));
        }
        batch_losses.push(value);
        let grads = tape.backward(loss)?;
        opt.step(store, &grads);
        if schedule.eval_every > 0 && (step + 1) % schedule.eval_every == 0 {
            eval_curve.push((step + 1, eval_kd_loss(setup, store, eval_set, schedule)?));
        }
        log::debug!("distill step {step}: loss {value:.6e}");
    }
    let final_loss = eval_kd_loss(setup, store, tuples, schedule)?;
    Ok(DistillReport { batch_losses, eval_curve, initial_loss, final_loss })
}
