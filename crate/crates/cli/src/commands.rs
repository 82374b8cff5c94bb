//! One function per subcommand. Each returns the one-line summary value and
//! leaves its artifacts under the output directory.

use std::path::{Path, PathBuf};

use puncto_core::encoder::EncoderConfig;
use puncto_core::eval::{self, ClassPromptSet};
use puncto_core::geometry::{normalize_unit_sphere, PointCloud};
use puncto_core::mat::{self, Mat};
use puncto_core::paint::{paint, PaintJob};
use puncto_core::partseg::{
    logits_to_parts, miou_c, partseg_forward, partseg_train_step, prepare_seg_sample,
    PartLabelSet, SegHead, SegSample, SegTrainState,
};
use puncto_core::ply::{read_ply, write_ply};
use puncto_core::retrieval;
use puncto_core::rng;
use puncto_core::teachercache::{load_manifest, write_cache, EmbeddingCache};
use puncto_core::tokenizer::group_patches;
use puncto_core::training::{
    grad_check, run_training, LossMode, PreparedBatch, Schedule, TrainState,
};
use rand::Rng;
use serde_json::json;

use crate::config::{CliError, CliResult, LoadedConfig, VecRef, VecResolver};

fn ensure_out_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult<()> {
    Ok(std::fs::write(path, serde_json::to_string_pretty(value)?)?)
}

/// Resolve a `VecRef` and renormalize it. Value problems are config errors
/// for inline vectors and runtime errors for cache-sourced ones.
fn resolve_unit(resolver: &VecResolver, r: &VecRef, field: &str) -> CliResult<Vec<f64>> {
    let mut v = resolver.resolve(r, field)?;
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() || norm <= 1e-12 {
        let message = format!("{field}: vector has norm {norm}, cannot normalize");
        return Err(match r {
            VecRef::Inline(_) => CliError::Config { path: Some(field.into()), message },
            VecRef::CacheId(_) => CliError::Runtime(message),
        });
    }
    mat::unit_normalize(&mut v);
    Ok(v)
}

fn load_cloud(path: &Path) -> CliResult<PointCloud> {
    Ok(read_ply(path)?.cloud)
}

pub fn params(cfg: &LoadedConfig, scale_flag: Option<&str>) -> CliResult<serde_json::Value> {
    let (scale, config) = match (scale_flag, &cfg.run.encoder) {
        (Some(s), _) => {
            let c = EncoderConfig::preset(s)
                .map_err(|e| CliError::config("params.scale", e.to_string()))?;
            (s.to_string(), c)
        }
        (None, Some(section)) => (section.scale.clone(), section.encoder_config()?),
        (None, None) => {
            return Err(CliError::config(
                "params.scale",
                "pass --scale or provide an encoder section",
            ))
        }
    };
    let n = config.count_params().map_err(|e| CliError::config("params", e.to_string()))?;
    Ok(json!({
        "command": "params",
        "scale": scale,
        "params": n,
        "millions": (n as f64 / 1e6 * 10.0).round() / 10.0,
    }))
}

/// Synthetic batch for the gradient check: random blobs against random unit
/// teachers, everything derived from the run seed.
fn gradcheck_batch(
    cfg: &EncoderConfig,
    batch: usize,
    points: usize,
    g: usize,
    k: usize,
    seed: u64,
) -> CliResult<PreparedBatch> {
    let mut patches = Vec::with_capacity(batch);
    let mut shape_ids = Vec::with_capacity(batch);
    let mut image_vecs = Mat::zeros(batch, cfg.teacher_dim);
    let mut text_vecs = Mat::zeros(batch, cfg.teacher_dim);
    for s in 0..batch {
        let mut r = rng::derive(seed, &[0x6c1, s as u64]);
        let positions: Vec<f64> = (0..points * 3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let colors: Vec<f64> = (0..points * 3).map(|_| r.gen_range(0.0..1.0)).collect();
        let cloud = PointCloud::new(format!("gc{s}"), positions, colors)?;
        patches.push(group_patches(&normalize_unit_sphere(&cloud)?, g, k, 0)?);
        for row in [image_vecs.row_mut(s), text_vecs.row_mut(s)] {
            for v in row.iter_mut() {
                *v = r.gen_range(-1.0..1.0);
            }
            mat::unit_normalize(row);
        }
        shape_ids.push(format!("gc{s}"));
    }
    Ok(PreparedBatch { patches, image_vecs, text_vecs, shape_ids })
}

pub fn gradcheck(
    cfg: &LoadedConfig,
    out_dir: &Path,
    scale_flag: Option<&str>,
    epsilon_flag: Option<f64>,
) -> CliResult<serde_json::Value> {
    let mut section = cfg.run.gradcheck.clone().unwrap_or_default();
    if let Some(s) = scale_flag {
        section.scale = s.to_string();
    }
    if let Some(e) = epsilon_flag {
        section.epsilon = e;
    }
    if !(section.epsilon > 0.0) || !section.epsilon.is_finite() {
        return Err(CliError::config(
            "gradcheck.epsilon",
            format!("epsilon {} must be positive and finite", section.epsilon),
        ));
    }
    if section.batch == 0 || section.points == 0 || section.g == 0 || section.k == 0 {
        return Err(CliError::config("gradcheck", "batch, points, G, K must be at least 1"));
    }
    let enc_cfg = EncoderConfig::preset(&section.scale)
        .map_err(|e| CliError::config("gradcheck.scale", e.to_string()))?;

    let seed = cfg.run.seed;
    let encoder = puncto_core::encoder::Encoder::init(&enc_cfg, seed)?;
    let schedule = Schedule { peak_lr: 1e-3, total_steps: 1, warmup_steps: 0 };
    let state = TrainState::new(encoder, seed, LossMode::Both, 0.0, 0.0, schedule)?;
    let batch =
        gradcheck_batch(&enc_cfg, section.batch, section.points, section.g, section.k, seed)?;
    let max_rel_err = grad_check(&state, &batch, section.epsilon)?;

    ensure_out_dir(out_dir)?;
    let summary = json!({
        "command": "gradcheck",
        "scale": section.scale,
        "epsilon": section.epsilon,
        "batch": section.batch,
        "max_rel_err": max_rel_err,
    });
    write_json(&out_dir.join("gradcheck.json"), &summary)?;
    Ok(summary)
}

pub fn train(cfg: &LoadedConfig, out_dir: &Path) -> CliResult<serde_json::Value> {
    let train_cfg = cfg.train_config()?;
    let summary = run_training(&train_cfg, out_dir)?;
    let mut value = serde_json::to_value(&summary)?;
    value["command"] = "train".into();
    Ok(value)
}

pub fn embed(cfg: &LoadedConfig, out_dir: &Path) -> CliResult<serde_json::Value> {
    let section = cfg
        .run
        .embed
        .as_ref()
        .ok_or_else(|| CliError::config("embed", "config has no embed section"))?;
    if section.clouds.is_empty() {
        return Err(CliError::config("embed.clouds", "no clouds listed"));
    }
    let enc_section = cfg.encoder_section()?;
    let mut stems = std::collections::BTreeSet::new();
    for p in &section.clouds {
        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        if stem.is_empty() || !stems.insert(stem.clone()) {
            return Err(CliError::config(
                "embed.clouds",
                format!("cloud ids are file stems and must be unique; '{stem}' repeats"),
            ));
        }
    }
    let encoder = enc_section.build(cfg.run.seed)?;
    let clouds: Vec<PointCloud> =
        section.clouds.iter().map(|p| load_cloud(p)).collect::<CliResult<_>>()?;
    let rows = eval::embed_shapes(&encoder, &clouds, enc_section.g, enc_section.k)?;

    let mut cache = EmbeddingCache::new(encoder.config.teacher_dim);
    for (r, cloud) in clouds.iter().enumerate() {
        cache.insert(cloud.id.clone(), rows.row(r).iter().map(|&v| v as f32).collect())?;
    }
    ensure_out_dir(out_dir)?;
    let cache_path = out_dir.join("embeddings.u3de");
    write_cache(&cache_path, &cache)?;
    Ok(json!({
        "command": "embed",
        "shapes": clouds.len(),
        "dim": encoder.config.teacher_dim,
        "cache": cache_path,
    }))
}

pub fn classify(cfg: &LoadedConfig, out_dir: &Path) -> CliResult<serde_json::Value> {
    let section = cfg
        .run
        .classify
        .as_ref()
        .ok_or_else(|| CliError::config("classify", "config has no classify section"))?;
    if section.clouds.is_empty() {
        return Err(CliError::config("classify.clouds", "no clouds listed"));
    }
    if section.classes.is_empty() {
        return Err(CliError::config("classify.classes", "no classes listed"));
    }
    if section.topk == 0 || section.topk > section.classes.len() {
        return Err(CliError::config(
            "classify.topk",
            format!("topk {} outside 1..={}", section.topk, section.classes.len()),
        ));
    }
    let enc_section = cfg.encoder_section()?;
    let resolver = cfg.resolver();
    let mut classes = Vec::with_capacity(section.classes.len());
    for (c, def) in section.classes.iter().enumerate() {
        let mut prompts = Vec::with_capacity(def.prompts.len());
        for (p, r) in def.prompts.iter().enumerate() {
            prompts.push(resolver.resolve(r, &format!("classify.classes[{c}].prompts[{p}]"))?);
        }
        classes.push((def.name.clone(), prompts));
    }
    let names: Vec<&str> = classes.iter().map(|(n, _)| n.as_str()).collect();
    for (i, lc) in section.clouds.iter().enumerate() {
        if let Some(label) = &lc.label {
            if !names.contains(&label.as_str()) {
                return Err(CliError::config(
                    format!("classify.clouds[{i}].label"),
                    format!("'{label}' is not a listed class"),
                ));
            }
        }
    }
    let prompts = ClassPromptSet::new(&classes)
        .map_err(|e| CliError::config("classify.classes", e.to_string()))?;

    let encoder = enc_section.build(cfg.run.seed)?;
    let clouds: Vec<PointCloud> =
        section.clouds.iter().map(|lc| load_cloud(&lc.path)).collect::<CliResult<_>>()?;
    let rows = eval::embed_shapes(&encoder, &clouds, enc_section.g, enc_section.k)?;

    let mut predictions = Vec::with_capacity(clouds.len());
    let mut labeled = 0usize;
    let mut top1_hits = 0usize;
    let mut topk_hits = 0usize;
    for (r, (cloud, lc)) in clouds.iter().zip(&section.clouds).enumerate() {
        let ranked = eval::zero_shot_classify(rows.row(r), &prompts, section.topk)?;
        let top: Vec<_> = ranked
            .iter()
            .map(|&(c, s)| json!({"class": prompts.names()[c], "score": s}))
            .collect();
        let mut entry = json!({"id": cloud.id, "top": top});
        if let Some(label) = &lc.label {
            labeled += 1;
            let hit1 = prompts.names()[ranked[0].0] == *label;
            let hitk = ranked.iter().any(|&(c, _)| prompts.names()[c] == *label);
            top1_hits += hit1 as usize;
            topk_hits += hitk as usize;
            entry["label"] = label.clone().into();
            entry["correct"] = hit1.into();
        }
        predictions.push(entry);
    }
    ensure_out_dir(out_dir)?;
    write_json(&out_dir.join("predictions.json"), &serde_json::Value::Array(predictions))?;

    let mut summary = json!({
        "command": "classify",
        "shapes": clouds.len(),
        "classes": prompts.len(),
        "predictions": out_dir.join("predictions.json"),
    });
    if labeled == clouds.len() {
        summary["top1"] = (top1_hits as f64 / labeled as f64).into();
        summary[format!("top{}", section.topk)] = (topk_hits as f64 / labeled as f64).into();
    }
    Ok(summary)
}

pub fn probe(cfg: &LoadedConfig, out_dir: &Path) -> CliResult<serde_json::Value> {
    let section = cfg
        .run
        .probe
        .as_ref()
        .ok_or_else(|| CliError::config("probe", "config has no probe section"))?;
    if section.clouds.is_empty() {
        return Err(CliError::config("probe.clouds", "no clouds listed"));
    }
    if section.shots == 0 {
        return Err(CliError::config("probe.shots", "shots must be at least 1"));
    }
    let enc_section = cfg.encoder_section()?;
    let mut class_names: Vec<String> = Vec::new();
    for (i, lc) in section.clouds.iter().enumerate() {
        match &lc.label {
            Some(l) => {
                if !class_names.contains(l) {
                    class_names.push(l.clone());
                }
            }
            None => {
                return Err(CliError::config(
                    format!("probe.clouds[{i}]"),
                    "probing needs a label on every cloud",
                ))
            }
        }
    }
    class_names.sort_unstable();
    if class_names.len() < 2 {
        return Err(CliError::config("probe.clouds", "probing needs at least 2 classes"));
    }
    let labels: Vec<usize> = section
        .clouds
        .iter()
        .map(|lc| class_names.iter().position(|n| n == lc.label.as_ref().unwrap()).unwrap())
        .collect();
    let seeds = if section.seeds.is_empty() { vec![cfg.run.seed] } else { section.seeds.clone() };

    let encoder = enc_section.build(cfg.run.seed)?;
    let clouds: Vec<PointCloud> =
        section.clouds.iter().map(|lc| load_cloud(&lc.path)).collect::<CliResult<_>>()?;
    let rows = eval::embed_shapes(&encoder, &clouds, enc_section.g, enc_section.k)?;
    let (mean, per_seed) = eval::probe_over_seeds(&rows, &labels, section.shots, &seeds)?;

    ensure_out_dir(out_dir)?;
    let report = json!({
        "classes": class_names,
        "shots": section.shots,
        "seeds": seeds,
        "per_seed_accuracy": per_seed,
        "mean_accuracy": mean,
    });
    write_json(&out_dir.join("probe.json"), &report)?;
    Ok(json!({
        "command": "probe",
        "shapes": clouds.len(),
        "classes": class_names.len(),
        "shots": section.shots,
        "seeds": seeds.len(),
        "mean_accuracy": mean,
    }))
}

fn seg_sample(
    encoder: &puncto_core::encoder::Encoder,
    path: &Path,
    g: usize,
    k: usize,
    n_parts: usize,
) -> CliResult<(SegSample, Vec<usize>)> {
    let contents = read_ply(path)?;
    let parts: Vec<usize> = contents
        .parts
        .ok_or_else(|| {
            CliError::Runtime(format!("{} has no per-point part labels", path.display()))
        })?
        .iter()
        .map(|&p| p as usize)
        .collect();
    if let Some(&bad) = parts.iter().find(|&&p| p >= n_parts) {
        return Err(CliError::Runtime(format!(
            "{} labels part {bad}, category has {n_parts}",
            path.display()
        )));
    }
    let sample = prepare_seg_sample(encoder, &contents.cloud, g, k, parts.clone())?;
    Ok((sample, parts))
}

pub fn partseg(cfg: &LoadedConfig, out_dir: &Path) -> CliResult<serde_json::Value> {
    let section = cfg
        .run
        .partseg
        .as_ref()
        .ok_or_else(|| CliError::config("partseg", "config has no partseg section"))?;
    if section.eval_clouds.is_empty() {
        return Err(CliError::config("partseg.eval_clouds", "no clouds to evaluate"));
    }
    if section.lr <= 0.0 || !section.lr.is_finite() {
        return Err(CliError::config("partseg.lr", format!("lr {} must be positive", section.lr)));
    }
    if section.fusion == 0 {
        return Err(CliError::config("partseg.fusion", "fusion width must be at least 1"));
    }
    let enc_section = cfg.encoder_section()?;
    let resolver = cfg.resolver();
    let mut parts = Vec::with_capacity(section.parts.len());
    for (i, def) in section.parts.iter().enumerate() {
        let v = resolver.resolve(&def.vector, &format!("partseg.parts[{i}].vector"))?;
        parts.push((def.name.clone(), v));
    }
    let labels = PartLabelSet::new(section.category.clone(), &parts)
        .map_err(|e| CliError::config("partseg.parts", e.to_string()))?;

    let encoder = enc_section.build(cfg.run.seed)?;
    let (g, k) = (enc_section.g, enc_section.k);
    let head =
        SegHead::init(encoder.config.width, section.fusion, encoder.config.teacher_dim, cfg.run.seed);
    let mut state = SegTrainState::new(head, section.lr);

    let mut losses = Vec::new();
    if !section.train_clouds.is_empty() && section.steps > 0 {
        let mut samples = Vec::with_capacity(section.train_clouds.len());
        for path in &section.train_clouds {
            samples.push(seg_sample(&encoder, path, g, k, labels.len())?.0);
        }
        for _ in 0..section.steps {
            losses.push(partseg_train_step(&mut state, &samples, &labels)?);
        }
    }

    let mut preds = Vec::with_capacity(section.eval_clouds.len());
    let mut truths = Vec::with_capacity(section.eval_clouds.len());
    for path in &section.eval_clouds {
        let (sample, truth) = seg_sample(&encoder, path, g, k, labels.len())?;
        let logits = partseg_forward(&state.head, &sample, &labels)?;
        preds.push(logits_to_parts(&logits));
        truths.push(truth);
    }
    let report = miou_c(&preds, &truths, &vec![section.category.clone(); preds.len()])?;

    ensure_out_dir(out_dir)?;
    let metrics = json!({
        "category": section.category,
        "parts": labels.names(),
        "train_shapes": section.train_clouds.len(),
        "eval_shapes": section.eval_clouds.len(),
        "steps_run": losses.len(),
        "final_loss": losses.last(),
        "miou": report,
    });
    write_json(&out_dir.join("seg_metrics.json"), &metrics)?;
    Ok(json!({
        "command": "partseg",
        "category": section.category,
        "trained_on": section.train_clouds.len(),
        "evaluated": section.eval_clouds.len(),
        "miou": report.mean,
    }))
}

pub fn paint_cmd(cfg: &LoadedConfig, out_dir: &Path) -> CliResult<serde_json::Value> {
    let section = cfg
        .run
        .paint
        .as_ref()
        .ok_or_else(|| CliError::config("paint", "config has no paint section"))?;
    let enc_section = cfg.encoder_section()?;
    let resolver = cfg.resolver();
    let target = resolve_unit(&resolver, &section.target, "paint.target")?;

    let encoder = enc_section.build(cfg.run.seed)?;
    let cloud = load_cloud(&section.cloud)?;
    let job = PaintJob {
        cloud,
        target,
        steps: section.steps,
        step_size: section.step_size,
        g: enc_section.g,
        k: enc_section.k,
    };
    let outcome = paint(&encoder, &job)?;

    ensure_out_dir(out_dir)?;
    let out_path = out_dir.join(&section.output);
    if let Some(parent) = out_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_ply(&out_path, &outcome.cloud, None)?;
    let trace = json!({
        "aborted": outcome.aborted,
        "steps_run": outcome.trace.len(),
        "trace": outcome.trace,
    });
    write_json(&out_dir.join("paint_trace.json"), &trace)?;
    Ok(json!({
        "command": "paint",
        "steps_run": outcome.trace.len(),
        "aborted": outcome.aborted,
        "start": outcome.trace.first(),
        "end": outcome.trace.last(),
        "gain": match (outcome.trace.first(), outcome.trace.last()) {
            (Some(a), Some(b)) => Some(b - a),
            _ => None,
        },
        "output": out_path,
    }))
}

pub fn retrieve_cmd(cfg: &LoadedConfig, out_dir: &Path) -> CliResult<serde_json::Value> {
    let section = cfg
        .run
        .retrieve
        .as_ref()
        .ok_or_else(|| CliError::config("retrieve", "config has no retrieve section"))?;
    if section.queries.is_empty() {
        return Err(CliError::config("retrieve.queries", "no queries listed"));
    }
    if section.k == 0 {
        return Err(CliError::config("retrieve.k", "k must be at least 1"));
    }
    let enc_section = cfg.encoder_section()?;
    let resolver = cfg.resolver();
    let mut queries = Vec::with_capacity(section.queries.len());
    for (i, r) in section.queries.iter().enumerate() {
        queries.push(resolve_unit(&resolver, r, &format!("retrieve.queries[{i}]"))?);
    }

    let index_dir = section.index_dir.clone().unwrap_or_else(|| out_dir.join("index"));
    let mut summary = json!({"command": "retrieve", "index_dir": index_dir});
    let index = if index_dir.join("embeddings.u3de").is_file() {
        let index = retrieval::load_index(&index_dir)?;
        summary["loaded"] = true.into();
        index
    } else {
        let encoder = enc_section.build(cfg.run.seed)?;
        let manifest = load_manifest(&section.manifest)?;
        let (index, report) =
            retrieval::build_index(&encoder, &manifest, enc_section.g, enc_section.k)?;
        retrieval::save_index(&index, &index_dir)?;
        summary["built"] = report.built.into();
        summary["skipped"] = serde_json::to_value(&report.skipped)?;
        index
    };
    let hits = retrieval::retrieve(&index, &queries, section.k)?;

    ensure_out_dir(out_dir)?;
    let results = json!({
        "indexed": index.len(),
        "k": section.k,
        "hits": hits.iter().map(|(id, s)| json!({"id": id, "score": s})).collect::<Vec<_>>(),
    });
    write_json(&out_dir.join("retrieval.json"), &results)?;
    summary["indexed"] = index.len().into();
    summary["hits"] = results["hits"].clone();
    Ok(summary)
}

pub fn out_dir_of(cfg: &LoadedConfig) -> PathBuf {
    cfg.run.output_dir.clone()
}
