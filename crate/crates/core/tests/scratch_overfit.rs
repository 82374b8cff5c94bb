// temporary measurement probe; deleted before final commit
use std::path::{Path, PathBuf};
use std::time::Instant;

use puncto_core::checkpoint;
use puncto_core::eval::{embed_shape, zero_shot_classify, ClassPromptSet};
use puncto_core::geometry::PointCloud;
use puncto_core::mat;
use puncto_core::ply::{read_ply, write_ply};
use puncto_core::rng;
use puncto_core::teachercache::{load_manifest, write_cache, EmbeddingCache};
use puncto_core::training::{run_training, LossMode, TrainConfig};
use rand::Rng;

fn blob(id: &str, points: usize, seed: u64) -> PointCloud {
    let cluster = std::env::var("P_CLOUD").map(|v| v == "cluster").unwrap_or(false);
    let mut r = rng::derive(seed, &[0xacc, 1]);
    let mut positions = Vec::with_capacity(points * 3);
    if cluster {
        let nc = r.gen_range(2..=5usize);
        let centers: Vec<[f64; 3]> = (0..nc)
            .map(|_| [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)])
            .collect();
        let sigmas: Vec<f64> = (0..nc).map(|_| r.gen_range(0.03..0.15)).collect();
        for p in 0..points {
            let c = p % nc;
            for a in 0..3 {
                positions.push(centers[c][a] + sigmas[c] * r.gen_range(-1.0..1.0));
            }
        }
        let base = [r.gen_range(0.15..0.85), r.gen_range(0.15..0.85), r.gen_range(0.15..0.85)];
        let colors: Vec<f64> =
            (0..points).flat_map(|_| base.map(|b| b + r.gen_range(-0.1..0.1))).collect();
        return PointCloud::new(id, positions, colors).unwrap();
    } else {
        let sx = r.gen_range(0.15..1.0);
        let sy = r.gen_range(0.15..1.0);
        let sz = r.gen_range(0.15..1.0);
        let (a, b) =
            (r.gen_range(0.0..std::f64::consts::TAU), r.gen_range(0.0..std::f64::consts::TAU));
        let (ca, sa, cb, sb) = (a.cos(), a.sin(), b.cos(), b.sin());
        for _ in 0..points {
            let x = sx * r.gen_range(-1.0..1.0f64);
            let y = sy * r.gen_range(-1.0..1.0f64);
            let z = sz * r.gen_range(-1.0..1.0f64);
            // Rz(a) * Ry(b)
            let (x1, z1) = (cb * x + sb * z, -sb * x + cb * z);
            positions.extend_from_slice(&[ca * x1 - sa * y, sa * x1 + ca * y, z1]);
        }
    }
    let colors: Vec<f64> = (0..points * 3).map(|_| r.gen_range(0.0..1.0)).collect();
    PointCloud::new(id, positions, colors).unwrap()
}

fn unit_vec(dim: usize, r: &mut rand_chacha::ChaCha8Rng) -> Vec<f32> {
    let mut v: Vec<f64> = (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect();
    mat::unit_normalize(&mut v);
    v.iter().map(|&x| x as f32).collect()
}

fn unit_set(n: usize, dim: usize, r: &mut rand_chacha::ChaCha8Rng) -> Vec<Vec<f32>> {
    let mut rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let mut v: Vec<f64> = (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect();
            mat::unit_normalize(&mut v);
            v
        })
        .collect();
    if std::env::var("P_TCENTER").map(|v| v == "1").unwrap_or(false) {
        for _ in 0..4 {
            let mean: Vec<f64> =
                (0..dim).map(|a| rows.iter().map(|v| v[a]).sum::<f64>() / n as f64).collect();
            for v in &mut rows {
                for a in 0..dim {
                    v[a] -= mean[a];
                }
                mat::unit_normalize(v);
            }
        }
    }
    rows.into_iter().map(|v| v.iter().map(|&x| x as f32).collect()).collect()
}

fn synth_manifest(dir: &Path, n: usize, dim: usize, points: usize, seed: u64) -> PathBuf {
    let mut r = rng::derive(seed, &[0xacc, 2]);
    let mut images = EmbeddingCache::new(dim);
    let mut texts = EmbeddingCache::new(dim);
    let img_rows = unit_set(n, dim, &mut r);
    let txt_rows = unit_set(n, dim, &mut r);
    let mut shapes = Vec::new();
    for s in 0..n {
        let id = format!("shape{s:03}");
        write_ply(&dir.join(format!("{id}.ply")), &blob(&id, points, seed + 100 + s as u64), None)
            .unwrap();
        images.insert(format!("{id}/img"), img_rows[s].clone()).unwrap();
        texts.insert(format!("{id}/txt"), txt_rows[s].clone()).unwrap();
        shapes.push(serde_json::json!({
            "id": id, "cloud": format!("{id}.ply"),
            "images": [format!("{id}/img")], "texts": [format!("{id}/txt")],
        }));
    }
    write_cache(&dir.join("images.u3de"), &images).unwrap();
    write_cache(&dir.join("texts.u3de"), &texts).unwrap();
    let manifest = serde_json::json!({
        "image_cache": "images.u3de", "text_cache": "texts.u3de", "shapes": shapes,
    });
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
    path
}

#[test]
fn probe_overfit() {
    let lr: f64 = std::env::var("P_LR").map(|v| v.parse().unwrap()).unwrap_or(1e-2);
    let g: usize = std::env::var("P_G").map(|v| v.parse().unwrap()).unwrap_or(16);
    let k: usize = std::env::var("P_K").map(|v| v.parse().unwrap()).unwrap_or(16);
    let warmup: usize = std::env::var("P_WARM").map(|v| v.parse().unwrap()).unwrap_or(15);
    let dim: usize = std::env::var("P_DIM").map(|v| v.parse().unwrap()).unwrap_or(64);
    println!("config: lr={lr} G={g} K={k} warmup={warmup} dim={dim}");

    let dir = tempfile::tempdir().unwrap();
    let manifest_path = synth_manifest(dir.path(), 32, dim, 512, 5);
    let cfg = TrainConfig {
        scale: "nano".into(),
        g,
        k,
        teacher_dim: Some(dim),
        batch_size: 32,
        total_steps: 500,
        warmup_steps: Some(warmup),
        peak_lr: lr,
        mask_ratio: 0.0,
        drop_path_rate: 0.0,
        loss_mode: LossMode::Both,
        seed: 11,
        determinism: true,
        manifest_path: manifest_path.clone(),
        init_checkpoint: None,
        freeze_transformer: false,
    };
    let t0 = Instant::now();
    let summary = run_training(&cfg, &dir.path().join("run")).unwrap();
    let train_time = t0.elapsed();
    let metrics = std::fs::read_to_string(&summary.metrics).unwrap();
    for (i, line) in metrics.lines().enumerate() {
        if [0, 50, 100, 200, 350, 499].contains(&i) {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            println!(
                "  step {i}: loss {:.4} tau {:.4} grad {:.3}",
                v["loss"].as_f64().unwrap(),
                v["tau"].as_f64().unwrap(),
                v["grad_norm"].as_f64().unwrap()
            );
        }
    }
    println!("train: {:?}, final loss {:.6}", train_time, summary.final_loss);

    let enc_cfg = cfg.encoder_config().unwrap();
    let (enc, _) = checkpoint::load_encoder(&summary.checkpoint, &enc_cfg).unwrap();
    let manifest = load_manifest(&manifest_path).unwrap();

    let t1 = Instant::now();
    let mut text_rows: Vec<Vec<f64>> = Vec::new();
    let mut embs: Vec<Vec<f64>> = Vec::new();
    for shape in &manifest.shapes {
        let cloud = read_ply(&shape.cloud).unwrap().cloud;
        embs.push(embed_shape(&enc, &cloud, cfg.g, cfg.k).unwrap());
        text_rows.push(manifest.text_cache.get_f64(&shape.texts[0]).unwrap());
    }
    let mut retr_hits = 0;
    for (i, e) in embs.iter().enumerate() {
        let best = (0..text_rows.len())
            .max_by(|&a, &b| {
                mat::dot(e, &text_rows[a]).partial_cmp(&mat::dot(e, &text_rows[b])).unwrap()
            })
            .unwrap();
        retr_hits += (best == i) as usize;
    }
    let classes: Vec<(String, Vec<Vec<f64>>)> = manifest
        .shapes
        .iter()
        .zip(&text_rows)
        .map(|(s, t)| (s.id.clone(), vec![t.clone()]))
        .collect();
    let prompts = ClassPromptSet::new(&classes).unwrap();
    let mut zs_hits = 0;
    for (i, e) in embs.iter().enumerate() {
        let top = zero_shot_classify(e, &prompts, 1).unwrap();
        zs_hits += (prompts.names()[top[0].0] == manifest.shapes[i].id) as usize;
    }
    println!(
        "eval: {:?}; retrieval {retr_hits}/32, zero-shot {zs_hits}/32",
        t1.elapsed()
    );
    println!("TOTAL {:?}", t0.elapsed());

    if std::env::var("P_PAINT").map(|v| v == "1").unwrap_or(false) {
        use puncto_core::paint::{paint, PaintJob};
        let mut cloud = read_ply(&manifest.shapes[0].cloud).unwrap().cloud;
        for c in &mut cloud.colors {
            *c = 0.5;
        }
        let target = manifest.text_cache.get_f64(&manifest.shapes[0].texts[0]).unwrap();
        for step_size in [0.005, 0.01, 0.02, 0.05] {
            let job = PaintJob {
                cloud: cloud.clone(),
                target: target.clone(),
                steps: 100,
                step_size,
                g: cfg.g,
                k: cfg.k,
            };
            let out = paint(&enc, &job).unwrap();
            let nondec =
                out.trace.windows(2).filter(|w| w[1] >= w[0]).count() as f64 / 99.0;
            let gain = out.trace[out.trace.len() - 1] - out.trace[0];
            let inbounds = out.cloud.colors.iter().all(|c| (0.0..=1.0).contains(c));
            println!(
                "paint ss={step_size}: start {:.3} end {:.3} gain {gain:.3} nondec {:.2} inbounds {inbounds} aborted {}",
                out.trace[0],
                out.trace[out.trace.len() - 1],
                nondec,
                out.aborted
            );
        }
    }
}

#[test]
fn probe_partseg() {
    use puncto_core::encoder::{Encoder, EncoderConfig};
    use puncto_core::partseg::{
        logits_to_parts, miou_c, partseg_forward, partseg_train_step, prepare_seg_sample,
        PartLabelSet, SegHead, SegTrainState,
    };

    fn sphere(points: usize, seed: u64) -> (PointCloud, Vec<usize>) {
        let mut r = rng::derive(seed, &[0x5f9]);
        let mut pos = Vec::with_capacity(points * 3);
        let mut col = Vec::with_capacity(points * 3);
        let mut parts = Vec::with_capacity(points);
        for _ in 0..points {
            let z: f64 = r.gen_range(-1.0..1.0);
            let phi: f64 = r.gen_range(0.0..std::f64::consts::TAU);
            let rad = (1.0 - z * z).sqrt();
            pos.extend_from_slice(&[rad * phi.cos(), rad * phi.sin(), z]);
            let part = usize::from(z < 0.0);
            let base: f64 = if part == 0 { 0.8 } else { 0.2 };
            for _ in 0..3 {
                col.push((base + r.gen_range(-0.05..0.05)).clamp(0.0, 1.0));
            }
            parts.push(part);
        }
        (PointCloud::new(format!("sphere{seed}"), pos, col).unwrap(), parts)
    }

    let g: usize = std::env::var("P_SEG_G").map(|v| v.parse().unwrap()).unwrap_or(16);
    let k: usize = std::env::var("P_SEG_K").map(|v| v.parse().unwrap()).unwrap_or(8);
    let lr: f64 = std::env::var("P_SEG_LR").map(|v| v.parse().unwrap()).unwrap_or(1e-2);
    let pts: usize = std::env::var("P_SEG_PTS").map(|v| v.parse().unwrap()).unwrap_or(128);
    let fusion: usize = std::env::var("P_SEG_FUSION").map(|v| v.parse().unwrap()).unwrap_or(32);
    println!("seg config: G={g} K={k} lr={lr} pts={pts} fusion={fusion}");

    let enc = Encoder::init(&EncoderConfig::preset("nano").unwrap(), 11).unwrap();
    let dim = enc.config.teacher_dim;
    let mut top = vec![0.0; dim];
    top[0] = 1.0;
    let mut bottom = vec![0.0; dim];
    bottom[1] = 1.0;
    let labels =
        PartLabelSet::new("sphere", &[("top".to_string(), top), ("bottom".to_string(), bottom)])
            .unwrap();

    let (train_cloud, train_parts) = sphere(pts, 13);
    let sample = prepare_seg_sample(&enc, &train_cloud, g, k, train_parts.clone()).unwrap();
    let head = SegHead::init(enc.config.width, fusion, dim, 17);
    let mut state = SegTrainState::new(head, lr);
    let t0 = Instant::now();
    let mut last = 0.0;
    for _ in 0..200 {
        last = partseg_train_step(&mut state, &[sample.clone()], &labels).unwrap();
    }
    println!("partseg train: {:?}, final loss {last:.4}", t0.elapsed());

    let tr_logits = partseg_forward(&state.head, &sample, &labels).unwrap();
    let tr_pred = logits_to_parts(&tr_logits);
    let tr_miou = miou_c(&[tr_pred], &[train_parts], &["sphere".to_string()]).unwrap();
    println!("train-sphere mIoU {:.4}", tr_miou.mean);

    let mut preds = Vec::new();
    let mut truths = Vec::new();
    let mut cats = Vec::new();
    for seed in [23u64, 29, 31] {
        let (c, p) = sphere(pts, seed);
        let s = prepare_seg_sample(&enc, &c, g, k, p.clone()).unwrap();
        let logits = partseg_forward(&state.head, &s, &labels).unwrap();
        let pred = logits_to_parts(&logits);
        let solo = miou_c(&[pred.clone()], &[p.clone()], &["sphere".to_string()]).unwrap();
        println!("  held-out sphere{seed}: mIoU {:.4}", solo.mean);
        preds.push(pred);
        truths.push(p);
        cats.push("sphere".to_string());
    }
    let miou = miou_c(&preds, &truths, &cats).unwrap();
    println!("held-out mIoU_C {:.4}", miou.mean);
}

#[test]
fn probe_meanpool() {
    use puncto_core::encoder::{Encoder, EncoderConfig, Pooling};
    use puncto_core::training::{prepare_step_batch, train_step, Schedule, TrainState};
    use std::collections::HashMap;

    let lr: f64 = std::env::var("P_LR").map(|v| v.parse().unwrap()).unwrap_or(1e-2);
    let warmup: usize = std::env::var("P_WARM").map(|v| v.parse().unwrap()).unwrap_or(15);
    let dim: usize = std::env::var("P_DIM").map(|v| v.parse().unwrap()).unwrap_or(64);
    println!("meanpool config: lr={lr} warmup={warmup} dim={dim}");

    let dir = tempfile::tempdir().unwrap();
    let manifest_path = synth_manifest(dir.path(), 32, dim, 512, 5);
    let manifest = load_manifest(&manifest_path).unwrap();
    let cfg = TrainConfig {
        scale: "nano".into(),
        g: 16,
        k: 16,
        teacher_dim: None,
        batch_size: 32,
        total_steps: 500,
        warmup_steps: Some(warmup),
        peak_lr: lr,
        mask_ratio: 0.0,
        drop_path_rate: 0.0,
        loss_mode: LossMode::Both,
        seed: 11,
        determinism: true,
        manifest_path: manifest_path.clone(),
        init_checkpoint: None,
        freeze_transformer: false,
    };
    let mut enc_cfg = EncoderConfig::preset("nano").unwrap();
    enc_cfg.pooling = Pooling::MeanPool;
    enc_cfg.teacher_dim = dim;
    let encoder = Encoder::init(&enc_cfg, cfg.seed).unwrap();
    let schedule = Schedule { peak_lr: lr, total_steps: 500, warmup_steps: warmup };
    let mut state =
        TrainState::new(encoder, cfg.seed, LossMode::Both, 0.0, 0.0, schedule).unwrap();
    let snapshot = |state: &TrainState, step: usize, loss: f64, tau: f64| {
        let mut embs: Vec<Vec<f64>> = Vec::new();
        let mut txts: Vec<Vec<f64>> = Vec::new();
        let mut imgs: Vec<Vec<f64>> = Vec::new();
        for shape in &manifest.shapes {
            let cloud = read_ply(&shape.cloud).unwrap().cloud;
            embs.push(embed_shape(&state.encoder, &cloud, 16, 16).unwrap());
            txts.push(manifest.text_cache.get_f64(&shape.texts[0]).unwrap());
            imgs.push(manifest.image_cache.get_f64(&shape.images[0]).unwrap());
        }
        let n = embs.len();
        let (mut od_sum, mut od_max, mut od_n) = (0.0f64, -1.0f64, 0usize);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let c = mat::dot(&embs[i], &embs[j]);
                    od_sum += c;
                    od_max = od_max.max(c);
                    od_n += 1;
                }
            }
        }
        let diag_t: f64 = (0..n).map(|i| mat::dot(&embs[i], &txts[i])).sum::<f64>() / n as f64;
        let diag_i: f64 = (0..n).map(|i| mat::dot(&embs[i], &imgs[i])).sum::<f64>() / n as f64;
        let hits = (0..n)
            .filter(|&i| {
                (0..n).all(|j| j == i || mat::dot(&embs[i], &txts[j]) < mat::dot(&embs[i], &txts[i]))
            })
            .count();
        println!(
            "  step {step}: loss {loss:.4} tau {tau:.4} | e·e off mean {:.3} max {:.3} | e·t {diag_t:.3} e·i {diag_i:.3} | hits {hits}/32",
            od_sum / od_n as f64,
            od_max
        );
    };

    let t0 = Instant::now();
    let mut clouds = HashMap::new();
    for step in 0..500 {
        let batch = prepare_step_batch(&manifest, &mut clouds, &cfg, step).unwrap();
        let m = train_step(&mut state, &batch).unwrap();
        if step % 50 == 0 || step == 499 {
            snapshot(&state, step, m.loss, m.tau);
        }
    }
    println!("meanpool train: {:?}", t0.elapsed());

    let mut retr_hits = 0;
    let mut embs = Vec::new();
    let mut text_rows = Vec::new();
    for shape in &manifest.shapes {
        let cloud = read_ply(&shape.cloud).unwrap().cloud;
        embs.push(embed_shape(&state.encoder, &cloud, 16, 16).unwrap());
        text_rows.push(manifest.text_cache.get_f64(&shape.texts[0]).unwrap());
    }
    for (i, e) in embs.iter().enumerate() {
        let best = (0..32)
            .max_by(|&a, &b| {
                mat::dot(e, &text_rows[a]).partial_cmp(&mat::dot(e, &text_rows[b])).unwrap()
            })
            .unwrap();
        retr_hits += (best == i) as usize;
    }
    println!("meanpool retrieval {retr_hits}/32");
}
