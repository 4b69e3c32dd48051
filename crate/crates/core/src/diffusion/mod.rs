//! Rectified-flow losses, cached distillation and a straight-line Euler sampler.

mod cache;
mod distill;

pub use cache::{build_kd_cache, read_kd_cache, write_kd_cache, KdBuildSpec, KdCacheReader, KdCacheWriter, KD_MAGIC, KD_VERSION};
pub use distill::{distill, eval_kd_loss, DistillReport, DistillSchedule, DistillSetup};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// Default split between the two teacher experts: `t >= 0.5` is high noise.
pub const EXPERT_BOUNDARY: f64 = 0.5;
pub const DEFAULT_EXPERT_WEIGHT: f64 = 0.5;

fn check_t(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::config("t", format!("timestep {t} outside [0, 1]")))
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::config(what, format!("shape {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `x_t = (1 - t) x_0 + t eps`.
pub fn forward_noise(x0: &Tensor, t: f64, eps: &Tensor) -> Result<Tensor> {
    check_t(t)?;
    same_shape(x0, eps, "eps")?;
    Ok(x0.zip_map(eps, |a, e| (1.0 - t) * a + t * e)?)
}

/// Velocity target `eps - x_0`.
pub fn velocity_target(x0: &Tensor, eps: &Tensor) -> Result<Tensor> {
    same_shape(x0, eps, "eps")?;
    Ok(eps.zip_map(x0, |e, a| e - a)?)
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.numel().max(1) as f64;
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
}

/// Flow-matching loss: MSE between `pred_v` and `eps - x_0`.
pub fn fm_loss(pred_v: &Tensor, x0: &Tensor, eps: &Tensor) -> Result<f64> {
    let target = velocity_target(x0, eps)?;
    same_shape(pred_v, &target, "pred_v")?;
    Ok(mse(pred_v, &target))
}

pub fn kd_loss(student_v: &Tensor, teacher_v: &Tensor) -> Result<f64> {
    same_shape(student_v, teacher_v, "teacher_v")?;
    Ok(mse(student_v, teacher_v))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertTag {
    High,
    Low,
    Single,
}

impl ExpertTag {
    pub fn code(self) -> u8 {
        match self {
            ExpertTag::High => 0,
            ExpertTag::Low => 1,
            ExpertTag::Single => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ExpertTag::High),
            1 => Some(ExpertTag::Low),
            2 => Some(ExpertTag::Single),
            _ => None,
        }
    }

    /// Expert responsible for timestep `t`.
    pub fn for_timestep(t: f64, boundary: f64) -> Self {
        if t >= boundary {
            ExpertTag::High
        } else {
            ExpertTag::Low
        }
    }
}

/// One cached teacher record. `x_0` is not kept.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionTuple {
    pub expert: ExpertTag,
    pub t: f64,
    pub eps: Tensor,
    pub x_t: Tensor,
    /// Teacher velocity at `(x_t, t, text)`.
    pub v: Tensor,
    pub text: Tensor,
}

/// Per-tuple weights of the two-expert objective: `w_e / n_e` for a tuple of
/// expert `e`, so the weighted sum of per-tuple MSEs is `w_l L_l + w_h L_h`.
pub fn two_expert_weights(tags: &[ExpertTag], w_l: f64, w_h: f64) -> Result<Vec<f64>> {
    if tags.contains(&ExpertTag::Single) {
        return Err(Error::MissingExpert("single-teacher tuple in a two-expert batch".into()));
    }
    let n_h = tags.iter().filter(|&&t| t == ExpertTag::High).count();
    let n_l = tags.len() - n_h;
    if n_h == 0 && w_h != 0.0 {
        return Err(Error::MissingExpert("no high-noise tuple in batch".into()));
    }
    if n_l == 0 && w_l != 0.0 {
        return Err(Error::MissingExpert("no low-noise tuple in batch".into()));
    }
    Ok(tags
        .iter()
        .map(|&t| match t {
            ExpertTag::High => w_h / n_h as f64,
            _ => w_l / n_l as f64,
        })
        .collect())
}

/// `w_l * mean_low ||v - V(x)||^2 + w_h * mean_high ||v - V(x)||^2`, with the
/// student prediction supplied by `predict`.
pub fn kd_loss_two_expert(
    tuples: &[DiffusionTuple],
    predict: &mut dyn FnMut(&DiffusionTuple) -> Result<Tensor>,
    w_l: f64,
    w_h: f64,
) -> Result<f64> {
    let tags: Vec<ExpertTag> = tuples.iter().map(|t| t.expert).collect();
    let weights = two_expert_weights(&tags, w_l, w_h)?;
    let mut total = 0.0;
    for (tuple, w) in tuples.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        total += w * kd_loss(&predict(tuple)?, &tuple.v)?;
    }
    Ok(total)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Relativistic pairwise losses `(L_D, L_G)`:
/// `L_D = mean softplus(-(d_real - d_fake))`, `L_G = mean softplus(d_real - d_fake)`.
pub fn rpgan_losses(d_real: &[f64], d_fake: &[f64]) -> Result<(f64, f64)> {
    if d_real.len() != d_fake.len() || d_real.is_empty() {
        return Err(Error::config("d_fake", format!("{} real vs {} fake scores", d_real.len(), d_fake.len())));
    }
    let n = d_real.len() as f64;
    let (mut ld, mut lg) = (0.0, 0.0);
    for (r, f) in d_real.iter().zip(d_fake) {
        ld += softplus(-(r - f));
        lg += softplus(r - f);
    }
    Ok((ld / n, lg / n))
}

/// `(gamma / 2) (1 / eps_r) mean_b [D(x_b + delta_b) - D(x_b)]` with
/// `delta_b = eps_r * directions[b]`. Rows of `x` are samples; `directions`
/// rows are used as given.
pub fn r_penalty_with(d: &dyn Fn(&[f64]) -> f64, x: &Tensor, directions: &Tensor, eps_r: f64, gamma: f64) -> Result<f64> {
    if !(eps_r > 0.0) {
        return Err(Error::config("eps_r", format!("must be positive, got {eps_r}")));
    }
    same_shape(x, directions, "directions")?;
    let mut acc = 0.0;
    for b in 0..x.rows() {
        let row = x.row(b);
        let moved: Vec<f64> = row.iter().zip(directions.row(b)).map(|(v, u)| v + eps_r * u).collect();
        acc += d(&moved) - d(row);
    }
    Ok(gamma / 2.0 / eps_r * acc / x.rows() as f64)
}

/// Random unit-norm direction per row.
pub fn unit_directions(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let mut t = rng.normal_tensor(&[rows, cols], 1.0);
    for row in t.data_mut().chunks_mut(cols) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        row.iter_mut().for_each(|v| *v /= norm);
    }
    t
}

/// `(R1, R2)` on real and fake batches, one random unit direction per sample.
pub fn r_penalties(d: &dyn Fn(&[f64]) -> f64, x_real: &Tensor, x_fake: &Tensor, eps_r: f64, gamma: f64, rng: &mut Rng) -> Result<(f64, f64)> {
    let dirs_real = unit_directions(x_real.rows(), x_real.cols(), rng);
    let dirs_fake = unit_directions(x_fake.rows(), x_fake.cols(), rng);
    Ok((r_penalty_with(d, x_real, &dirs_real, eps_r, gamma)?, r_penalty_with(d, x_fake, &dirs_fake, eps_r, gamma)?))
}

/// Integrates `dx/dt = v(x, t)` from `t = 1` to `t = 0` in `steps` uniform Euler steps.
pub fn euler_flow_sample(velocity: &mut dyn FnMut(&Tensor, f64) -> Result<Tensor>, x_t: &Tensor, steps: usize) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::config("steps", "need at least one step"));
    }
    let dt = 1.0 / steps as f64;
    let mut x = x_t.clone();
    for i in 0..steps {
        let t = 1.0 - i as f64 * dt;
        let v = velocity(&x, t)?;
        same_shape(&x, &v, "velocity")?;
        x = x.zip_map(&v, |a, b| a - dt * b)?;
        if x.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerics(crate::numerics::NumericsError::NonFinite { op: "euler_flow_sample".into(), index: i, value: f64::NAN }));
        }
    }
    Ok(x)
}

/// Distribution of cache-building timesteps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
#[derive(Default)]
pub enum TimestepSampler {
    #[default]
    Uniform,
    /// `sigmoid(N(mean, std^2))`.
    LogitNormal { mean: f64, std: f64 },
}


impl TimestepSampler {
    pub fn sample(&self, rng: &mut Rng) -> f64 {
        match *self {
            TimestepSampler::Uniform => rng.uniform(),
            TimestepSampler::LogitNormal { mean, std } => 1.0 / (1.0 + (-(mean + std * rng.normal())).exp()),
        }
    }
}

#[cfg(test)]
mod tests;
