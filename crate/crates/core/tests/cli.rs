use std::path::Path;
use std::process::{Command, Output};

use sandwich_core::cli::{toy_teacher_config, RunConfig};
use sandwich_core::sandwich::{ModelConfig, SandwichLayout};
use serde_json::Value;

fn sandwich(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sandwich")).current_dir(dir).args(args).output().expect("binary runs")
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const PROFILE: &str = "[budget]
latency_lcha = 9.0
latency_ssa = 3.0
memory_lcha = 40.0
memory_ssa = 20.0
blocks = 3
latency_max = 1000.0
memory_max = 10000.0
";

#[test]
fn grad_check_passes_and_flags_a_corrupted_vjp() {
    let dir = tempfile::tempdir().unwrap();
    let ok = sandwich(dir.path(), &["grad-check", "--out", "a"]);
    assert_eq!(ok.status.code(), Some(0), "{}", stderr(&ok));
    let m = manifest(&dir.path().join("a"));
    assert!(m["report"]["cases"].as_array().unwrap().len() > 30);
    assert!(m["report"]["cases"].as_array().unwrap().iter().any(|c| c["name"].as_str().unwrap().starts_with("sandwich group")));

    let bad = sandwich(dir.path(), &["grad-check", "--out", "b", "--corrupt", "softmax"]);
    assert_eq!(bad.status.code(), Some(1));
    assert_eq!(manifest(&dir.path().join("b"))["report"]["failed"], serde_json::json!(["softmax[corrupted]"]));

    let f32 = sandwich(dir.path(), &["grad-check", "--out", "c", "--dtype", "f32"]);
    assert_eq!(f32.status.code(), Some(0));
    assert!(stderr(&f32).contains("f64"));
    assert_eq!(manifest(&dir.path().join("c"))["report"]["dtype_switched_to_f64"], true);
}

#[test]
fn distillation_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(sandwich(d, &["build-kd-cache", "--out", "kd"]).status.success());
    let cache_a = std::fs::read(d.join("kd/kd.s2kd")).unwrap();
    assert!(sandwich(d, &["build-kd-cache", "--out", "kd2"]).status.success());
    assert_eq!(cache_a, std::fs::read(d.join("kd2/kd.s2kd")).unwrap());

    let run = sandwich(d, &["distill", "--cache", "kd/kd.s2kd", "--out", "s1"]);
    assert!(run.status.success(), "{}", stderr(&run));
    let r = &manifest(&d.join("s1"))["report"];
    let (init, fin) = (r["initial_loss"].as_f64().unwrap(), r["final_loss"].as_f64().unwrap());
    assert!(fin <= 0.5 * init, "{fin} vs {init}");
    assert!(d.join("s1/student/manifest.json").exists());
    assert!(sandwich(d, &["distill", "--cache", "kd/kd.s2kd", "--out", "s2"]).status.success());
    assert_eq!(std::fs::read(d.join("s1/loss_curve.json")).unwrap(), std::fs::read(d.join("s2/loss_curve.json")).unwrap());

    // zero learning rate leaves the evaluation curve flat
    assert!(sandwich(d, &["distill", "--cache", "kd/kd.s2kd", "--out", "s3", "--lr", "0", "--steps", "40"]).status.success());
    let curve = manifest(&d.join("s3"))["report"]["eval_curve"].as_array().unwrap().clone();
    let first = curve[0][1].as_f64().unwrap();
    assert!(curve.iter().all(|p| p[1].as_f64().unwrap() == first));

    // a student that is the teacher has nothing to learn
    let layout = SandwichLayout::new(toy_teacher_config(), vec![1, 1, 1]).unwrap();
    layout.save(&d.join("teacher_layout.json")).unwrap();
    let same = sandwich(d, &["distill", "--cache", "kd/kd.s2kd", "--layout", "teacher_layout.json", "--weights", "kd/teacher", "--out", "s4", "--steps", "20"]);
    assert!(same.status.success(), "{}", stderr(&same));
    let r = &manifest(&d.join("s4"))["report"];
    assert!(r["initial_loss"].as_f64().unwrap() < 1e-20);
    assert!(r["eval_curve"].as_array().unwrap().iter().all(|p| p[1].as_f64().unwrap() < 1e-6));

    let missing = sandwich(d, &["distill", "--out", "s5"]);
    assert_eq!(missing.status.code(), Some(2));
    let mismatch = sandwich(d, &["distill", "--cache", "kd/kd.s2kd", "--out", "s6", "--steps", "1", "--config", "grid.toml"]);
    assert_eq!(mismatch.status.code(), Some(10), "missing config file is an I/O error");
    std::fs::write(d.join("grid.toml"), "[distill]\nframes = 3\n").unwrap();
    let mismatch = sandwich(d, &["distill", "--cache", "kd/kd.s2kd", "--out", "s6", "--steps", "1", "--config", "grid.toml"]);
    assert_eq!(mismatch.status.code(), Some(6), "{}", stderr(&mismatch));
}

#[test]
fn two_expert_cache_builds_and_distils() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(sandwich(d, &["build-kd-cache", "--out", "kd", "--two-expert", "--records", "64"]).status.success());
    assert!(d.join("kd/teacher_low/manifest.json").exists());
    let run = sandwich(d, &["distill", "--cache", "kd/kd.s2kd", "--out", "s", "--steps", "20"]);
    assert!(run.status.success(), "{}", stderr(&run));
}

#[test]
fn stream_sim_oracle_determinism_and_flat_caches() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = sandwich(d, &["stream-sim", "--out", "a", "--oracle", "--window", "4", "--chunks", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let oracle = &manifest(&d.join("a"))["report"]["oracle"];
    assert_eq!(oracle["applicable"], true);
    assert!(oracle["max_rel_deviation"].as_f64().unwrap() <= 1e-5);

    assert!(sandwich(d, &["stream-sim", "--out", "b", "--window", "4", "--chunks", "4"]).status.success());
    for i in 0..4 {
        let f = format!("chunk_{i:03}.s2tn");
        assert_eq!(std::fs::read(d.join("a").join(&f)).unwrap(), std::fs::read(d.join("b").join(&f)).unwrap());
    }

    assert!(sandwich(d, &["stream-sim", "--out", "c", "--window", "2", "--chunks", "10", "--steps", "1"]).status.success());
    let r = &manifest(&d.join("c"))["report"];
    assert_eq!(r["fixed_cache_flat"], true);
    let chunks = r["chunks"].as_array().unwrap();
    assert_eq!(chunks.len(), 10);
    let kv: Vec<u64> = chunks.iter().map(|c| c["kv_tokens"][0].as_u64().unwrap()).collect();
    assert_eq!(kv[9], 2 * kv[0]);
    assert!(chunks.iter().all(|c| c["lin_attn_bytes"] == chunks[0]["lin_attn_bytes"] && c["wall_ms"].as_f64().unwrap() >= 0.0));
}

#[test]
fn search_budgets() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("dev.toml"), PROFILE).unwrap();
    let o = sandwich(d, &["search", "--profile", "dev.toml", "--out", "a"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let layout = SandwichLayout::load(&d.join("a/layout.json")).unwrap();
    assert_eq!(layout.mask, vec![1, 1, 1]);
    assert!(layout.allocation.is_some() && layout.budget.is_some());

    std::fs::write(d.join("tight.toml"), PROFILE.replace("latency_max = 1000.0", "latency_max = 5.0")).unwrap();
    let o = sandwich(d, &["search", "--profile", "tight.toml", "--out", "b"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("infeasible budget (Latency)"));

    std::fs::write(d.join("bad.toml"), PROFILE.replace("latency_ssa = 3.0", "latency_ssa = \"fast\"")).unwrap();
    let o = sandwich(d, &["search", "--profile", "bad.toml", "--out", "c"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("latency_ssa"));

    assert_eq!(sandwich(d, &["search", "--out", "e"]).status.code(), Some(2));
}

#[test]
fn search_recovers_a_planted_mask() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let model = sandwich_core::sandwich::planted_config();
    let cfg = RunConfig {
        model: Some(model),
        search: sandwich_core::cli::SearchSection { teacher_mask: Some(vec![1, 0, 1, 0, 1]), ..Default::default() },
        ..RunConfig::default()
    };
    std::fs::write(d.join("run.toml"), cfg.to_toml().unwrap()).unwrap();
    // five single-block groups; 33 ms admits three LCHA groups
    let profile = PROFILE.replace("blocks = 3", "blocks = 5").replace("latency_max = 1000.0", "latency_max = 33.0");
    std::fs::write(d.join("dev.toml"), profile).unwrap();
    let o = sandwich(d, &["--config", "run.toml", "search", "--profile", "dev.toml", "--out", "a"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(SandwichLayout::load(&d.join("a/layout.json")).unwrap().mask, vec![1, 0, 1, 0, 1]);
}

#[test]
fn bench_reports_token_counts_and_projection() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(sandwich(d, &["bench", "--out", "a", "--repeats", "2"]).status.success());
    assert!(sandwich(d, &["bench", "--out", "b", "--repeats", "2"]).status.success());
    let (a, b) = (manifest(&d.join("a")), manifest(&d.join("b")));
    let r = &a["report"];
    assert_eq!(r["token_ratio_high_to_ssa"].as_f64(), Some(4.0));
    assert_eq!(r["projection"]["chunk_ms"].as_f64(), Some(1124.0));
    assert_eq!(r["projection"]["fps_1dp"].as_f64(), Some(10.7));
    let tokens = |m: &Value| m["report"]["blocks"].as_array().unwrap().iter().map(|b| b["attention_tokens"].as_u64().unwrap()).collect::<Vec<_>>();
    assert_eq!(tokens(&a), tokens(&b));
}

#[test]
fn attention_dump() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut model = sandwich_core::cli::toy_config();
    model.lcha.rope = false;
    SandwichLayout::new(model, vec![1, 0, 1]).unwrap().save(&d.join("plain.json")).unwrap();
    let o = sandwich(d, &["attn-dump", "--layout", "plain.json", "--out", "a"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = &manifest(&d.join("a"))["report"];
    assert!(r["max_reconstruction_error"].as_f64().unwrap() <= 1e-5);
    for h in r["heads"].as_array().unwrap() {
        assert!((h["row_sum_min"].as_f64().unwrap() - 1.0).abs() < 1e-5);
        assert!((h["row_sum_max"].as_f64().unwrap() - 1.0).abs() < 1e-5);
        let map = sandwich_core::numerics::io::load_tensor(Path::new(h["file"].as_str().map(|f| d.join(f)).unwrap().as_path())).unwrap();
        assert_eq!(map.shape(), [32, 32]);
    }
    let guarded = sandwich(d, &["attn-dump", "--out", "b", "--max-tokens", "8"]);
    assert_eq!(guarded.status.code(), Some(8));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.toml"), "seed = 5\n[stream]\nchunks = 3\nsteps = 1\n").unwrap();
    assert!(sandwich(d, &["--config", "run.toml", "--seed", "9", "stream-sim", "--chunks", "2", "--out", "a"]).status.success());
    let m = manifest(&d.join("a"));
    let cfg: RunConfig = serde_json::from_value(m["config"].clone()).unwrap();
    assert_eq!((cfg.seed, cfg.stream.chunks, cfg.stream.steps), (9, 2, 1));
    assert_eq!(m["report"]["chunks"].as_array().unwrap().len(), 2);

    std::fs::write(d.join("bad.toml"), "seed = 1\nsede = 2\n").unwrap();
    let o = sandwich(d, &["--config", "bad.toml", "bench"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("sede"));
    assert_eq!(sandwich(d, &["no-such-command"]).status.code(), Some(2));
    let _ = ModelConfig::default();
}
