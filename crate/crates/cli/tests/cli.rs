//! End-to-end checks of the `puncto` binary: exit codes, the one-line
//! summary/error JSON contract, and artifact determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use puncto_core::geometry::PointCloud;
use puncto_core::ply::{read_ply, write_ply};
use puncto_core::rng;
use puncto_core::teachercache::{write_cache, EmbeddingCache};
use rand::Rng;
use serde_json::{json, Value};
use tempfile::tempdir;

fn puncto(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_puncto"));
    cmd.args(args).env_remove("PUNCTO_THREADS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    assert_eq!(text.lines().count(), 1, "summary must be one line: {text}");
    serde_json::from_str(text.trim()).expect("summary is JSON")
}

fn stderr_json(out: &Output, code: i32) -> Value {
    assert_eq!(out.status.code(), Some(code), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stderr.clone()).unwrap();
    serde_json::from_str(text.trim()).expect("error is JSON")
}

fn random_cloud(id: &str, points: usize, seed: u64) -> PointCloud {
    let mut r = rng::derive(seed, &[0xc11]);
    let positions: Vec<f64> = (0..points * 3).map(|_| r.gen_range(-1.0..1.0)).collect();
    let colors: Vec<f64> = (0..points * 3).map(|_| r.gen_range(0.0..1.0)).collect();
    PointCloud::new(id, positions, colors).unwrap()
}

/// Clouds + image/text caches + manifest.json, mirroring the documented
/// manifest schema. Returns the manifest path.
fn fixture_manifest(dir: &Path, n: usize, dim: usize, points: usize, seed: u64) -> PathBuf {
    let mut r = rng::derive(seed, &[0xc12]);
    let mut images = EmbeddingCache::new(dim);
    let mut texts = EmbeddingCache::new(dim);
    let mut shapes = Vec::new();
    for s in 0..n {
        let id = format!("shape{s:03}");
        write_ply(&dir.join(format!("{id}.ply")), &random_cloud(&id, points, seed + s as u64), None)
            .unwrap();
        let unit = |r: &mut rand_chacha::ChaCha8Rng| {
            let mut v: Vec<f32> = (0..dim).map(|_| r.gen_range(-1.0f32..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-6);
            v.iter_mut().for_each(|x| *x /= norm);
            v
        };
        images.insert(format!("{id}/img"), unit(&mut r)).unwrap();
        texts.insert(format!("{id}/txt"), unit(&mut r)).unwrap();
        shapes.push(json!({
            "id": id,
            "cloud": format!("{id}.ply"),
            "images": [format!("{id}/img")],
            "texts": [format!("{id}/txt")],
        }));
    }
    write_cache(&dir.join("images.u3de"), &images).unwrap();
    write_cache(&dir.join("texts.u3de"), &texts).unwrap();
    let manifest = json!({
        "image_cache": "images.u3de",
        "text_cache": "texts.u3de",
        "shapes": shapes,
    });
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
    path
}

fn write_named_config(dir: &Path, name: &str, value: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn write_config(dir: &Path, value: &Value) -> PathBuf {
    write_named_config(dir, "run.json", value)
}

fn nano_encoder_section(dim: usize) -> Value {
    json!({"scale": "nano", "teacher_dim": dim, "G": 8, "K": 8})
}

#[test]
fn params_matches_the_published_ladder() {
    for (scale, millions) in [("Ti", 6.2), ("S", 22.6), ("B", 88.4), ("L", 306.7), ("g", 1016.5)] {
        let summary = stdout_json(&puncto(&["params", "--scale", scale], &[]));
        let params = summary["params"].as_u64().unwrap() as f64;
        let rel = (params - millions * 1e6).abs() / (millions * 1e6);
        assert!(rel < 0.05, "{scale}: {params} vs {millions}M (rel {rel:.4})");
    }
}

#[test]
fn unknown_subcommand_exits_2_with_usage() {
    let out = puncto(&["frobnicate"], &[]);
    assert_eq!(out.status.code(), Some(2));
    let text = String::from_utf8_lossy(&out.stderr).to_lowercase();
    assert!(text.contains("usage"), "stderr: {text}");
}

#[test]
fn config_errors_exit_2_with_field_paths() {
    let dir = tempdir().unwrap();

    // unknown top-level key
    let cfg = write_config(dir.path(), &json!({"trian": {}}));
    let err = stderr_json(&puncto(&["train", "--config", cfg.to_str().unwrap()], &[]), 2);
    assert_eq!(err["error"]["kind"], "config");
    assert!(err["error"]["message"].as_str().unwrap().contains("unknown field"));

    // wrong type deep in the train section
    let cfg = write_config(
        dir.path(),
        &json!({"train": {"scale": "nano", "total_steps": "many", "manifest_path": "m.json"}}),
    );
    let err = stderr_json(&puncto(&["train", "--config", cfg.to_str().unwrap()], &[]), 2);
    assert_eq!(err["error"]["path"], "train.total_steps");

    // semantic violation
    let cfg = write_config(
        dir.path(),
        &json!({"train": {"scale": "nano", "total_steps": 1, "mask_ratio": 1.5, "manifest_path": "m.json"}}),
    );
    let err = stderr_json(&puncto(&["train", "--config", cfg.to_str().unwrap()], &[]), 2);
    assert_eq!(err["error"]["path"], "train");
    assert!(err["error"]["message"].as_str().unwrap().contains("mask_ratio"));

    // missing config file
    let err = stderr_json(&puncto(&["train", "--config", "/nope/run.json"], &[]), 2);
    assert_eq!(err["error"]["kind"], "config");

    // subcommand without its section
    let cfg = write_config(dir.path(), &json!({}));
    let err = stderr_json(&puncto(&["paint", "--config", cfg.to_str().unwrap()], &[]), 2);
    assert_eq!(err["error"]["path"], "paint");
}

#[test]
fn invalid_thread_cap_exits_2() {
    let err = stderr_json(&puncto(&["params", "--scale", "Ti"], &[("PUNCTO_THREADS", "zero")]), 2);
    assert!(err["error"]["message"].as_str().unwrap().contains("PUNCTO_THREADS"));
    let summary = stdout_json(&puncto(&["params", "--scale", "Ti"], &[("PUNCTO_THREADS", "1")]));
    assert_eq!(summary["command"], "params");
}

#[test]
fn gradcheck_nano_beats_1e_3() {
    let dir = tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let summary = stdout_json(&puncto(
        &["gradcheck", "--scale", "nano", "--output-dir", out_dir.to_str().unwrap()],
        &[],
    ));
    let max_rel = summary["max_rel_err"].as_f64().unwrap();
    assert!(max_rel < 1e-3, "max_rel_err {max_rel}");
    assert_eq!(summary["epsilon"].as_f64().unwrap(), 1e-5);
    assert!(out_dir.join("gradcheck.json").is_file());
}

#[test]
fn train_replays_byte_identical_artifacts() {
    let dir = tempdir().unwrap();
    let manifest = fixture_manifest(dir.path(), 6, 16, 64, 40);
    let cfg = write_config(
        dir.path(),
        &json!({
            "seed": 7,
            "train": {
                "scale": "nano",
                "teacher_dim": 16,
                "G": 8,
                "K": 8,
                "batch_size": 4,
                "total_steps": 3,
                "warmup_steps": 1,
                "mask_ratio": 0.5,
                "manifest_path": manifest,
            },
        }),
    );
    let run = |out: &Path| {
        let summary = stdout_json(&puncto(
            &["train", "--config", cfg.to_str().unwrap(), "--output-dir", out.to_str().unwrap()],
            &[],
        ));
        assert_eq!(summary["command"], "train");
        assert_eq!(summary["steps"], 3);
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run(&a);
    run(&b);
    for f in ["checkpoint.u3dc", "metrics.jsonl", "model_card.json"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "replay changed {f}"
        );
    }
    // masking contract, visible through the metrics: ceil(8/2) + 1 tokens
    let metrics = std::fs::read_to_string(a.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    for line in metrics.lines() {
        let m: Value = serde_json::from_str(line).unwrap();
        assert_eq!(m["tokens_per_cloud"], 5, "line: {line}");
    }
}

#[test]
fn embed_is_thread_count_invariant() {
    let dir = tempdir().unwrap();
    let mut clouds = Vec::new();
    for i in 0..4 {
        let id = format!("c{i}");
        let path = dir.path().join(format!("{id}.ply"));
        write_ply(&path, &random_cloud(&id, 64, 90 + i), None).unwrap();
        clouds.push(format!("{id}.ply"));
    }
    let cfg = write_config(
        dir.path(),
        &json!({"encoder": nano_encoder_section(16), "embed": {"clouds": clouds}}),
    );
    let run = |out: &Path, threads: &str| {
        let summary = stdout_json(&puncto(
            &["embed", "--config", cfg.to_str().unwrap(), "--output-dir", out.to_str().unwrap()],
            &[("PUNCTO_THREADS", threads)],
        ));
        assert_eq!(summary["shapes"], 4);
        assert_eq!(summary["dim"], 16);
    };
    let (one, four) = (dir.path().join("t1"), dir.path().join("t4"));
    run(&one, "1");
    run(&four, "4");
    assert_eq!(
        std::fs::read(one.join("embeddings.u3de")).unwrap(),
        std::fs::read(four.join("embeddings.u3de")).unwrap(),
        "embeddings depend on the thread count"
    );
}

#[test]
fn classify_and_probe_run_end_to_end() {
    let dir = tempdir().unwrap();
    let mut clouds = Vec::new();
    for i in 0..6 {
        let id = format!("s{i}");
        write_ply(&dir.path().join(format!("{id}.ply")), &random_cloud(&id, 64, 70 + i), None)
            .unwrap();
        clouds.push(json!({
            "path": format!("{id}.ply"),
            "label": if i % 2 == 0 { "even" } else { "odd" },
        }));
    }
    let mut r = rng::derive(9, &[0xc13]);
    let prompt = |r: &mut rand_chacha::ChaCha8Rng| {
        let v: Vec<f64> = (0..16).map(|_| r.gen_range(-1.0..1.0)).collect();
        json!(v)
    };
    let cfg = write_config(
        dir.path(),
        &json!({
            "encoder": nano_encoder_section(16),
            "classify": {
                "clouds": clouds,
                "classes": [
                    {"name": "even", "prompts": [prompt(&mut r), prompt(&mut r)]},
                    {"name": "odd", "prompts": [prompt(&mut r)]},
                ],
            },
            "probe": {"clouds": clouds, "shots": 1, "seeds": [0, 1]},
        }),
    );
    let out = dir.path().join("out");
    let summary = stdout_json(&puncto(
        &["classify", "--config", cfg.to_str().unwrap(), "--output-dir", out.to_str().unwrap()],
        &[],
    ));
    assert_eq!(summary["shapes"], 6);
    assert_eq!(summary["classes"], 2);
    let top1 = summary["top1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&top1));
    let preds: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("predictions.json")).unwrap())
            .unwrap();
    assert_eq!(preds.as_array().unwrap().len(), 6);

    let summary = stdout_json(&puncto(
        &["probe", "--config", cfg.to_str().unwrap(), "--output-dir", out.to_str().unwrap()],
        &[],
    ));
    assert_eq!(summary["seeds"], 2);
    let acc = summary["mean_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(out.join("probe.json").is_file());

    // an unlisted label is a config error with the offending path
    let bad = write_named_config(
        dir.path(),
        "bad.json",
        &json!({
            "encoder": nano_encoder_section(16),
            "classify": {
                "clouds": [{"path": "s0.ply", "label": "mystery"}],
                "classes": [{"name": "even", "prompts": [prompt(&mut r)]}],
            },
        }),
    );
    let err = stderr_json(&puncto(&["classify", "--config", bad.to_str().unwrap()], &[]), 2);
    assert_eq!(err["error"]["path"], "classify.clouds[0].label");
}

#[test]
fn partseg_reports_miou() {
    let dir = tempdir().unwrap();
    let mut r = rng::derive(31, &[0xc14]);
    for name in ["train0", "train1", "eval0"] {
        let cloud = random_cloud(name, 96, r.gen());
        let parts: Vec<u32> =
            (0..cloud.len()).map(|i| (cloud.position(i)[2] > 0.0) as u32).collect();
        write_ply(&dir.path().join(format!("{name}.ply")), &cloud, Some(&parts)).unwrap();
    }
    let axis = |hot: usize| {
        let mut v = vec![0.0; 16];
        v[hot] = 1.0;
        json!(v)
    };
    let cfg = write_config(
        dir.path(),
        &json!({
            "encoder": nano_encoder_section(16),
            "partseg": {
                "category": "blob",
                "parts": [
                    {"name": "upper", "vector": axis(0)},
                    {"name": "lower", "vector": axis(1)},
                ],
                "train_clouds": ["train0.ply", "train1.ply"],
                "eval_clouds": ["eval0.ply"],
                "steps": 10,
                "fusion": 16,
            },
        }),
    );
    let out = dir.path().join("out");
    let summary = stdout_json(&puncto(
        &["partseg", "--config", cfg.to_str().unwrap(), "--output-dir", out.to_str().unwrap()],
        &[],
    ));
    let miou = summary["miou"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&miou));
    let metrics: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("seg_metrics.json")).unwrap())
            .unwrap();
    assert_eq!(metrics["steps_run"], 10);
    assert_eq!(metrics["parts"], json!(["upper", "lower"]));
}

#[test]
fn paint_writes_trace_and_cloud() {
    let dir = tempdir().unwrap();
    write_ply(&dir.path().join("c.ply"), &random_cloud("c", 64, 55), None).unwrap();
    let target: Vec<f64> = (0..16).map(|i| (i as f64 + 1.0).sin()).collect();
    let cfg = write_config(
        dir.path(),
        &json!({
            "encoder": nano_encoder_section(16),
            "paint": {"cloud": "c.ply", "target": target, "steps": 3, "step_size": 0.01},
        }),
    );
    let out = dir.path().join("out");
    let summary = stdout_json(&puncto(
        &["paint", "--config", cfg.to_str().unwrap(), "--output-dir", out.to_str().unwrap()],
        &[],
    ));
    assert_eq!(summary["steps_run"], 3);
    assert_eq!(summary["aborted"], false);
    let painted = read_ply(&out.join("painted.ply")).unwrap();
    assert_eq!(painted.cloud.len(), 64);
    let trace: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("paint_trace.json")).unwrap())
            .unwrap();
    assert_eq!(trace["trace"].as_array().unwrap().len(), 3);
}

#[test]
fn retrieve_builds_once_then_loads() {
    let dir = tempdir().unwrap();
    let manifest = fixture_manifest(dir.path(), 5, 16, 64, 80);
    let out = dir.path().join("out");
    let inline_query: Vec<f64> = (0..16).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect();
    let cfg = write_config(
        dir.path(),
        &json!({
            "encoder": nano_encoder_section(16),
            "retrieve": {"manifest": manifest, "queries": [inline_query], "k": 3},
        }),
    );
    let summary = stdout_json(&puncto(
        &["retrieve", "--config", cfg.to_str().unwrap(), "--output-dir", out.to_str().unwrap()],
        &[],
    ));
    assert_eq!(summary["built"], 5);
    assert_eq!(summary["hits"].as_array().unwrap().len(), 3);
    assert!(out.join("index").join("embeddings.u3de").is_file());

    // second run loads the saved index; an id@cache query hits itself
    let cache_ref = format!("shape002@{}", out.join("index/embeddings.u3de").display());
    let cfg2 = write_named_config(
        dir.path(),
        "run2.json",
        &json!({
            "encoder": nano_encoder_section(16),
            "retrieve": {
                "manifest": manifest,
                "index_dir": out.join("index"),
                "queries": [cache_ref],
                "k": 1,
            },
        }),
    );
    let summary = stdout_json(&puncto(
        &["retrieve", "--config", cfg2.to_str().unwrap(), "--output-dir", out.to_str().unwrap()],
        &[],
    ));
    assert_eq!(summary["loaded"], true);
    let hits = summary["hits"].as_array().unwrap();
    assert_eq!(hits[0]["id"], "shape002");
    assert!(hits[0]["score"].as_f64().unwrap() > 1.0 - 1e-4);
}
