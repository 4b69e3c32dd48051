use crate::error::{Error, Result};
use crate::numerics::{Op, Rng, Tape, Tensor, Var};

/// Column of the LCHA choice in a `[1, 2]` routing logit row; column 0 is SSA.
pub const LCHA_COLUMN: usize = 1;

pub const TAU_START: f64 = 1.0;
pub const TAU_END: f64 = 0.1;

/// Geometric annealing from `TAU_START` to `TAU_END` over `steps` steps.
pub fn temperature(step: usize, steps: usize) -> f64 {
    if steps <= 1 {
        return TAU_END;
    }
    TAU_START * (TAU_END / TAU_START).powf(step as f64 / (steps - 1) as f64)
}

fn check_tau(temperature: f64) -> Result<()> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(Error::config("temperature", format!("must be positive, got {temperature}")))
    }
}

/// Records a Gumbel-softmax gate on `tape`. `logits` is `[1, 2]`. The value is
/// the hard LCHA indicator (exactly 0 or 1); the gradient is that of the soft
/// probability.
pub fn gumbel_gate(tape: &mut Tape, logits: Var, temperature: f64, rng: &mut Rng) -> Result<Var> {
    check_tau(temperature)?;
    if tape.value(logits).shape() != [1, 2] {
        return Err(Error::config("routing logits", format!("expected [1, 2], got {:?}", tape.value(logits).shape())));
    }
    let noise = tape.constant(Tensor::new(vec![1, 2], vec![rng.gumbel(), rng.gumbel()])?);
    let z = tape.add(logits, noise)?;
    let z = tape.scale(z, 1.0 / temperature)?;
    let p = tape.softmax(z)?;
    let hard = tape.apply(Op::StraightThrough, &[p])?;
    let col = tape.slice_cols(hard, LCHA_COLUMN, 1)?;
    Ok(tape.reshape(col, &[1])?)
}

/// Gumbel straight-through draw of a whole mask from `candidates`.
///
/// Each group `n` has `[1, 2]` routing logits; its score is `l[1] - l[0]` and a
/// candidate's logit is the sum of the scores of its LCHA groups. One Gumbel
/// perturbation per candidate, softmax at `temperature`, hard one-hot forward.
/// Returns one `[1]` gate per group; groups without logits (`None`) get constant 1.
pub fn gumbel_mask_gates(
    tape: &mut Tape,
    logits: &[Option<Var>],
    candidates: &[Vec<u8>],
    temperature: f64,
    rng: &mut Rng,
) -> Result<Vec<Var>> {
    check_tau(temperature)?;
    let (groups, count) = (logits.len(), candidates.len());
    if count == 0 || candidates.iter().any(|c| c.len() != groups) {
        return Err(Error::Layout(format!("candidate masks do not match {groups} groups")));
    }
    let mut total: Option<Var> = None;
    for (n, l) in logits.iter().enumerate() {
        let Some(l) = *l else { continue };
        let hi = tape.slice_cols(l, LCHA_COLUMN, 1)?;
        let lo = tape.slice_cols(l, 1 - LCHA_COLUMN, 1)?;
        let score = tape.sub(hi, lo)?;
        let row = tape.constant(Tensor::new(vec![1, count], candidates.iter().map(|c| c[n] as f64).collect())?);
        let part = tape.matmul(score, row)?;
        total = Some(match total {
            Some(t) => tape.add(t, part)?,
            None => part,
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(Tensor::zeros(&[1, count])),
    };
    let noise = tape.constant(Tensor::new(vec![1, count], (0..count).map(|_| rng.gumbel()).collect())?);
    let z = tape.add(total, noise)?;
    let z = tape.scale(z, 1.0 / temperature)?;
    let p = tape.softmax(z)?;
    let pick = tape.apply(Op::StraightThrough, &[p])?;
    let table = tape.constant(Tensor::new(vec![count, groups], candidates.iter().flatten().map(|&b| b as f64).collect())?);
    let gates = tape.matmul(pick, table)?;
    let one = tape.constant(Tensor::ones(&[1]));
    let mut out = Vec::with_capacity(groups);
    for (n, l) in logits.iter().enumerate() {
        if l.is_some() {
            let g = tape.slice_cols(gates, n, 1)?;
            out.push(tape.reshape(g, &[1])?);
        } else {
            out.push(one);
        }
    }
    Ok(out)
}

/// One draw: the hard LCHA bit and the soft LCHA probability of the perturbed logits.
pub fn gumbel_ste_sample(logits: &Tensor, temperature: f64, rng: &mut Rng) -> Result<(u8, f64)> {
    check_tau(temperature)?;
    if logits.numel() != 2 {
        return Err(Error::config("routing logits", format!("expected 2 values, got {:?}", logits.shape())));
    }
    let z: Vec<f64> = logits.data().iter().map(|&l| (l + rng.gumbel()) / temperature).collect();
    let p = Op::Softmax.forward(&[&Tensor::new(vec![1, 2], z)?])?;
    let hard = Op::StraightThrough.forward(&[&p])?;
    Ok((hard.data()[LCHA_COLUMN] as u8, p.data()[LCHA_COLUMN]))
}

/// Softmax probability of the LCHA choice without noise.
pub fn lcha_probability(logits: &Tensor) -> f64 {
    let (a, b) = (logits.data()[0], logits.data()[1]);
    1.0 / (1.0 + (a - b).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_is_exactly_binary() {
        let mut rng = Rng::new(1);
        for tau in [0.05, 0.5, 1.0, 5.0] {
            for _ in 0..200 {
                let (bit, p) = gumbel_ste_sample(&Tensor::new(vec![2], vec![0.3, -0.1]).unwrap(), tau, &mut rng).unwrap();
                assert!(bit == 0 || bit == 1);
                assert!((0.0..=1.0).contains(&p));
            }
        }
        assert!(gumbel_ste_sample(&Tensor::zeros(&[2]), 0.0, &mut rng).is_err());
    }

    #[test]
    fn strong_logits_pick_lcha() {
        // logits ordered (LCHA, SSA) = (+10, -10)
        let logits = Tensor::new(vec![2], vec![-10.0, 10.0]).unwrap();
        let mut rng = Rng::new(2);
        let hits: usize = (0..10_000).map(|_| gumbel_ste_sample(&logits, 1.0, &mut rng).unwrap().0 as usize).sum();
        assert!(hits as f64 / 1e4 > 0.999, "{hits}");
    }

    #[test]
    fn gate_gradient_matches_soft_finite_difference() {
        let mut rng = Rng::new(3);
        for trial in 0..20 {
            let logits = rng.normal_tensor(&[1, 2], 1.0);
            let tau = 0.7;
            let a = rng.normal();
            let draw = rng.fork(trial);
            let mut tape = Tape::new();
            let l = tape.leaf(logits.clone());
            let g = gumbel_gate(&mut tape, l, tau, &mut draw.clone()).unwrap();
            let bit = tape.value(g).data()[0];
            assert!(bit == 0.0 || bit == 1.0);
            let w = tape.constant(Tensor::scalar(a));
            let y = tape.mul(g, w).unwrap();
            let grads = tape.backward(y).unwrap();
            let analytic = grads.get(l).unwrap().clone();
            assert!(analytic.data().iter().any(|&v| v != 0.0));
            // soft path with the same noise
            let soft = |lg: &Tensor| {
                let mut r = draw.clone();
                let z: Vec<f64> = lg.data().iter().map(|&v| (v + r.gumbel()) / tau).collect();
                a / (1.0 + (z[0] - z[1]).exp())
            };
            for j in 0..2 {
                let h = 1e-6;
                let mut lp = logits.clone();
                lp.data_mut()[j] += h;
                let mut lm = logits.clone();
                lm.data_mut()[j] -= h;
                let fd = (soft(&lp) - soft(&lm)) / (2.0 * h);
                assert!((fd - analytic.data()[j]).abs() < 1e-3, "{fd} vs {}", analytic.data()[j]);
            }
        }
    }

    #[test]
    fn mask_gates_are_legal_and_differentiable() {
        let candidates = crate::sandwich::enumerate_masks(5, 1).unwrap();
        let mut rng = Rng::new(4);
        let mut counts = [0usize; 3];
        for _ in 0..2000 {
            let mut tape = Tape::new();
            let ls: Vec<Option<Var>> = (0..5)
                .map(|n| {
                    let v = if n == 3 { vec![0.0, 2.0] } else { vec![0.0, 0.0] };
                    (n > 0 && n < 4).then(|| tape.leaf(Tensor::new(vec![1, 2], v).unwrap()))
                })
                .collect();
            let gates = gumbel_mask_gates(&mut tape, &ls, &candidates, 1.0, &mut rng).unwrap();
            let mask: Vec<u8> = gates.iter().map(|g| tape.value(*g).data()[0] as u8).collect();
            assert!(gates.iter().all(|g| matches!(tape.value(*g).data()[0], v if v == 0.0 || v == 1.0)));
            assert!(crate::sandwich::is_legal(&mask, 1));
            counts[candidates.iter().position(|c| *c == mask).unwrap()] += 1;
            let w = tape.constant(Tensor::scalar(1.0).reshape(&[1]).unwrap());
            let y = tape.mul(gates[2], w).unwrap();
            let grads = tape.backward(y).unwrap();
            assert!(grads.get(ls[2].unwrap()).unwrap().data().iter().any(|&v| v != 0.0));
        }
        // candidate [1,0,0,1,1] has logit 2, the others 0: probability e^2 / (e^2 + 2)
        let want = 2f64.exp() / (2f64.exp() + 2.0);
        assert!((counts[0] as f64 / 2000.0 - want).abs() < 0.04, "{counts:?}");
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(temperature(0, 10), 1.0);
        assert!((temperature(9, 10) - 0.1).abs() < 1e-15);
        assert!(temperature(4, 10) > temperature(5, 10));
    }
}
