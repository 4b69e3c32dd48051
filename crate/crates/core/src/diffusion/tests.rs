use std::io::Cursor;

use super::*;
use crate::numerics::{Rng, Tensor};

fn t(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
}

#[test]
fn interpolant_endpoints_and_midpoint() {
    let mut rng = Rng::new(1);
    let x0 = rng.normal_tensor(&[3, 4], 1.0);
    let eps = rng.normal_tensor(&[3, 4], 1.0);
    assert!(forward_noise(&x0, 0.0, &eps).unwrap().bit_eq(&x0));
    assert!(forward_noise(&x0, 1.0, &eps).unwrap().bit_eq(&eps));
    let mid = forward_noise(&Tensor::zeros(&[2]), 0.5, &Tensor::full(&[2], 2.0)).unwrap();
    assert_eq!(mid.data(), &[1.0, 1.0]);
    assert!(forward_noise(&x0, 1.5, &eps).is_err());
    assert!(forward_noise(&x0, -0.1, &eps).is_err());
    assert!(forward_noise(&x0, 0.5, &Tensor::zeros(&[4, 3])).is_err());
}

#[test]
fn flow_matching_loss_identities() {
    let mut rng = Rng::new(2);
    let x0 = rng.normal_tensor(&[4, 3], 1.0);
    let eps = rng.normal_tensor(&[4, 3], 1.0);
    let target = eps.zip_map(&x0, |e, a| e - a).unwrap();
    assert_eq!(fm_loss(&target, &x0, &eps).unwrap(), 0.0);
    let ones = x0.map(|v| v + 1.0);
    assert!((fm_loss(&Tensor::zeros(&[4, 3]), &x0, &ones).unwrap() - 1.0).abs() < 1e-12);
    let pred = rng.normal_tensor(&[4, 3], 1.0);
    let mut oracle = 0.0;
    for i in 0..12 {
        oracle += (pred.data()[i] - (eps.data()[i] - x0.data()[i])).powi(2);
    }
    assert!((fm_loss(&pred, &x0, &eps).unwrap() - oracle / 12.0).abs() < 1e-12);
    assert!(fm_loss(&Tensor::zeros(&[3, 4]), &x0, &eps).is_err());
}

#[test]
fn kd_loss_identities() {
    let mut rng = Rng::new(3);
    let a = rng.normal_tensor(&[5, 2], 1.0);
    assert_eq!(kd_loss(&a, &a).unwrap(), 0.0);
    assert!((kd_loss(&a, &a.map(|v| v + 2.0)).unwrap() - 4.0).abs() < 1e-12);
    let b = rng.normal_tensor(&[5, 2], 1.0);
    let oracle: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 10.0;
    assert!((kd_loss(&a, &b).unwrap() - oracle).abs() < 1e-12);
    assert!(kd_loss(&a, &Tensor::zeros(&[2, 5])).is_err());
}

fn tuple(expert: ExpertTag, v: Tensor) -> DiffusionTuple {
    let shape = v.shape().to_vec();
    DiffusionTuple { expert, t: 0.5, eps: Tensor::zeros(&shape), x_t: Tensor::zeros(&shape), v, text: Tensor::zeros(&[2]) }
}

#[test]
fn two_expert_weighting() {
    // student predicts zeros; every target is all-ones so both expert terms equal 1
    let batch = vec![tuple(ExpertTag::High, Tensor::ones(&[2, 2])), tuple(ExpertTag::Low, Tensor::ones(&[2, 2]))];
    let mut zero = |d: &DiffusionTuple| -> crate::Result<Tensor> { Ok(Tensor::zeros(d.v.shape())) };
    let l = kd_loss_two_expert(&batch, &mut zero, DEFAULT_EXPERT_WEIGHT, DEFAULT_EXPERT_WEIGHT).unwrap();
    assert!((l - 1.0).abs() < 1e-12);

    let mut rng = Rng::new(4);
    let batch: Vec<DiffusionTuple> = (0..7)
        .map(|i| tuple(if i % 3 == 0 { ExpertTag::High } else { ExpertTag::Low }, rng.normal_tensor(&[3], 1.0)))
        .collect();
    let preds: Vec<Tensor> = (0..7).map(|_| rng.normal_tensor(&[3], 1.0)).collect();
    let mut i = 0;
    let mut predict = |_: &DiffusionTuple| -> crate::Result<Tensor> {
        i += 1;
        Ok(preds[i - 1].clone())
    };
    let got = kd_loss_two_expert(&batch, &mut predict, 0.3, 0.7).unwrap();
    let (mut hs, mut ls) = (Vec::new(), Vec::new());
    for (b, p) in batch.iter().zip(&preds) {
        let m = b.v.data().iter().zip(p.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 3.0;
        if b.expert == ExpertTag::High {
            hs.push(m)
        } else {
            ls.push(m)
        }
    }
    let want = 0.3 * ls.iter().sum::<f64>() / ls.len() as f64 + 0.7 * hs.iter().sum::<f64>() / hs.len() as f64;
    assert!((got - want).abs() < 1e-12);

    // w_h = 0 keeps only the low term and tolerates a batch without high tuples
    let lows: Vec<DiffusionTuple> = batch.iter().filter(|b| b.expert == ExpertTag::Low).cloned().collect();
    let mut zero = |d: &DiffusionTuple| -> crate::Result<Tensor> { Ok(Tensor::zeros(d.v.shape())) };
    let only_low = kd_loss_two_expert(&lows, &mut zero, 1.0, 0.0).unwrap();
    let mut zero = |d: &DiffusionTuple| -> crate::Result<Tensor> { Ok(Tensor::zeros(d.v.shape())) };
    let mixed = kd_loss_two_expert(&batch, &mut zero, 1.0, 0.0).unwrap();
    assert!((only_low - mixed).abs() < 1e-12);
    let mut zero = |d: &DiffusionTuple| -> crate::Result<Tensor> { Ok(Tensor::zeros(d.v.shape())) };
    assert!(matches!(kd_loss_two_expert(&lows, &mut zero, 0.5, 0.5), Err(crate::Error::MissingExpert(_))));
}

#[test]
fn expert_split_boundary() {
    assert_eq!(ExpertTag::for_timestep(0.5, EXPERT_BOUNDARY), ExpertTag::High);
    assert_eq!(ExpertTag::for_timestep(0.4999, EXPERT_BOUNDARY), ExpertTag::Low);
    for tag in [ExpertTag::High, ExpertTag::Low, ExpertTag::Single] {
        assert_eq!(ExpertTag::from_code(tag.code()), Some(tag));
    }
}

#[test]
fn rpgan_parity_saturation_and_antisymmetry() {
    let (ld, lg) = rpgan_losses(&[0.3, -1.0], &[0.3, -1.0]).unwrap();
    assert!((ld - 2f64.ln()).abs() < 1e-15 && (lg - 2f64.ln()).abs() < 1e-15);
    let (ld, lg) = rpgan_losses(&[20.0], &[0.0]).unwrap();
    assert!(ld < 1e-8);
    assert!((lg - 20.0).abs() < 1e-8);
    let mut rng = Rng::new(5);
    let a: Vec<f64> = (0..9).map(|_| 3.0 * rng.normal()).collect();
    let b: Vec<f64> = (0..9).map(|_| 3.0 * rng.normal()).collect();
    let (ld, lg) = rpgan_losses(&a, &b).unwrap();
    let oracle_d = a.iter().zip(&b).map(|(r, f)| (1.0 + (f - r).exp()).ln()).sum::<f64>() / 9.0;
    let oracle_g = a.iter().zip(&b).map(|(r, f)| (1.0 + (r - f).exp()).ln()).sum::<f64>() / 9.0;
    assert!((ld - oracle_d).abs() < 1e-12 && (lg - oracle_g).abs() < 1e-12);
    let (ld2, lg2) = rpgan_losses(&b, &a).unwrap();
    assert_eq!((ld, lg), (lg2, ld2));
    assert!(rpgan_losses(&a, &b[..3]).is_err());
}

#[test]
fn penalties_closed_forms() {
    let mut rng = Rng::new(6);
    let x = rng.normal_tensor(&[4, 3], 1.0);
    let constant = |_: &[f64]| 1.5;
    assert_eq!(r_penalties(&constant, &x, &x, 0.1, 10.0, &mut rng).unwrap(), (0.0, 0.0));

    let w = [0.5, -2.0, 1.0];
    let linear = |v: &[f64]| v.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    let along_w = Tensor::from_fn(&[4, 3], |i| w[i % 3] / norm);
    for (eps_r, gamma) in [(0.1, 2.0), (1e-3, 5.0)] {
        let r1 = r_penalty_with(&linear, &x, &along_w, eps_r, gamma).unwrap();
        assert!((r1 - gamma / 2.0 * norm).abs() < 1e-9, "{r1}");
    }
    let (r1, r2) = r_penalties(&linear, &x, &x, 0.1, 0.0, &mut rng).unwrap();
    assert_eq!((r1, r2), (0.0, 0.0));
    assert!(r_penalty_with(&linear, &x, &along_w, 0.0, 1.0).is_err());
    let dirs = unit_directions(5, 3, &mut rng);
    for r in 0..5 {
        assert!((dirs.row(r).iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn euler_sampler_follows_straight_lines() {
    let mut rng = Rng::new(7);
    let x0 = rng.normal_tensor(&[6, 2], 1.0);
    let eps = rng.normal_tensor(&[6, 2], 1.0);
    let v = eps.zip_map(&x0, |e, a| e - a).unwrap();
    for steps in [1, 4, 7] {
        let mut oracle = |_: &Tensor, _: f64| -> crate::Result<Tensor> { Ok(v.clone()) };
        let out = euler_flow_sample(&mut oracle, &eps, steps).unwrap();
        let tol = if steps == 1 { 1e-15 } else { 1e-6 };
        assert!(out.max_abs_diff(&x0) <= tol, "{steps}: {}", out.max_abs_diff(&x0));
    }
    let mut zero = |x: &Tensor, _: f64| -> crate::Result<Tensor> { Ok(Tensor::zeros(x.shape())) };
    assert!(euler_flow_sample(&mut zero, &eps, 5).unwrap().bit_eq(&eps));
    assert!(euler_flow_sample(&mut zero, &eps, 0).is_err());
    let mut blowup = |x: &Tensor, _: f64| -> crate::Result<Tensor> { Ok(x.map(|_| f64::INFINITY)) };
    assert!(euler_flow_sample(&mut blowup, &eps, 2).is_err());
}

#[test]
fn timestep_samplers_stay_in_range() {
    let mut rng = Rng::new(8);
    for s in [TimestepSampler::Uniform, TimestepSampler::LogitNormal { mean: 0.0, std: 1.0 }] {
        for _ in 0..1000 {
            assert!((0.0..=1.0).contains(&s.sample(&mut rng)));
        }
    }
    let json = serde_json::to_string(&TimestepSampler::LogitNormal { mean: 0.1, std: 2.0 }).unwrap();
    assert_eq!(serde_json::from_str::<TimestepSampler>(&json).unwrap(), TimestepSampler::LogitNormal { mean: 0.1, std: 2.0 });
}

fn toy_cache(seed: u64, two_expert: bool) -> (Vec<u8>, Vec<(Tensor, f64, Tensor)>) {
    let mut rng = Rng::new(seed);
    let spec = KdBuildSpec { records: 9, two_expert, ..KdBuildSpec::default() };
    let mut writer = KdCacheWriter::new(Cursor::new(Vec::new())).unwrap();
    let mut kept = Vec::new();
    let mut teacher = |tag: ExpertTag, x: &Tensor, t: f64, c: &Tensor| -> crate::Result<Tensor> {
        let k = if tag == ExpertTag::High { 2.0 } else { -1.0 };
        Ok(x.map(|v| k * v + t + c.data()[0]))
    };
    let data = |i: usize, r: &mut Rng| -> crate::Result<(Tensor, Tensor)> {
        let x0 = r.normal_tensor(&[4, 2], 1.0);
        let text = Tensor::full(&[3], i as f64);
        Ok((x0, text))
    };
    let mut recording = |i: usize, r: &mut Rng| {
        let out = data(i, r)?;
        kept.push(out.0.clone());
        Ok(out)
    };
    build_kd_cache(&mut teacher, &mut recording, &spec, &mut rng, &mut writer).unwrap();
    let bytes = writer.finish().unwrap().into_inner();
    let cached: Vec<DiffusionTuple> = KdCacheReader::new(Cursor::new(bytes.clone())).unwrap().map(Result::unwrap).collect();
    let mut info = Vec::new();
    for (rec, x0) in cached.iter().zip(&kept) {
        info.push((x0.clone(), rec.t, rec.eps.clone()));
    }
    (bytes, info)
}

#[test]
fn cache_round_trip_determinism_and_interpolant() {
    let (a, info) = toy_cache(9, true);
    let (b, _) = toy_cache(9, true);
    assert_eq!(a, b, "same seed must give identical bytes");
    assert_eq!(&a[..4], KD_MAGIC);
    let reader = KdCacheReader::new(Cursor::new(a.clone())).unwrap();
    assert_eq!(reader.record_count(), 9);
    let recs: Vec<DiffusionTuple> = reader.map(Result::unwrap).collect();
    for (rec, (x0, t, eps)) in recs.iter().zip(&info) {
        assert!(forward_noise(x0, *t, eps).unwrap().bit_eq(&rec.x_t));
        assert_eq!(rec.expert, ExpertTag::for_timestep(rec.t, EXPERT_BOUNDARY));
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("kd.s2kd");
    write_kd_cache(&path, &recs).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), a);
    assert_eq!(read_kd_cache(&path).unwrap(), recs);

    let (single, _) = toy_cache(9, false);
    let recs: Vec<DiffusionTuple> = KdCacheReader::new(Cursor::new(single)).unwrap().map(Result::unwrap).collect();
    assert!(recs.iter().all(|r| r.expert == ExpertTag::Single));
}

#[test]
fn corrupt_caches_are_rejected() {
    let (bytes, _) = toy_cache(10, false);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(KdCacheReader::new(Cursor::new(bad)), Err(crate::Error::Format(_))));
    let truncated = bytes[..bytes.len() - 5].to_vec();
    let results: Vec<_> = KdCacheReader::new(Cursor::new(truncated)).unwrap().collect();
    assert!(matches!(results.last(), Some(Err(crate::Error::Format(_)))));
    let mut tag = bytes.clone();
    tag[13] = 9;
    assert!(KdCacheReader::new(Cursor::new(tag)).unwrap().next().unwrap().is_err());
}

#[test]
fn non_finite_teacher_is_an_error() {
    let mut rng = Rng::new(11);
    let mut writer = KdCacheWriter::new(Cursor::new(Vec::new())).unwrap();
    let mut teacher = |_: ExpertTag, x: &Tensor, _: f64, _: &Tensor| -> crate::Result<Tensor> { Ok(x.map(|_| f64::NAN)) };
    let mut data = |_: usize, r: &mut Rng| -> crate::Result<(Tensor, Tensor)> { Ok((r.normal_tensor(&[2, 2], 1.0), t(&[1], &[0.0]))) };
    let spec = KdBuildSpec { records: 2, ..KdBuildSpec::default() };
    assert!(build_kd_cache(&mut teacher, &mut data, &spec, &mut rng, &mut writer).is_err());
}
