//! The JSON run configuration: one file whose sections drive every
//! subcommand. Unknown keys are rejected and all paths are resolved against
//! the config file's directory, so a run replays from anywhere.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use puncto_core::encoder::{EncoderConfig, Pooling};
use puncto_core::teachercache::{read_cache, EmbeddingCache};
use puncto_core::training::TrainConfig;
use serde::Deserialize;

/// Failures split by exit code: bad configuration (2) vs a pipeline that
/// started and then failed (1).
#[derive(Debug)]
pub enum CliError {
    Config { path: Option<String>, message: String },
    Runtime(String),
}

impl CliError {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> CliError {
        CliError::Config { path: Some(path.into()), message: message.into() }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            CliError::Config { path, message } => serde_json::json!({
                "error": {"kind": "config", "path": path, "message": message}
            }),
            CliError::Runtime(message) => serde_json::json!({
                "error": {"kind": "runtime", "message": message}
            }),
        }
    }
}

impl From<puncto_core::error::Error> for CliError {
    fn from(e: puncto_core::error::Error) -> CliError {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError::Runtime(format!("io error: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> CliError {
        CliError::Runtime(format!("json error: {e}"))
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// A target/prompt/query vector: inline numbers or `"id@cache.u3de"`.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum VecRef {
    Inline(Vec<f64>),
    CacheId(String),
}

/// Resolves `VecRef`s, memoizing one cache read per file.
pub struct VecResolver {
    base: PathBuf,
    caches: RefCell<BTreeMap<PathBuf, EmbeddingCache>>,
}

impl VecResolver {
    pub fn new(base: &Path) -> VecResolver {
        VecResolver { base: base.to_path_buf(), caches: RefCell::new(BTreeMap::new()) }
    }

    /// `field` names the config location for diagnostics.
    pub fn resolve(&self, r: &VecRef, field: &str) -> CliResult<Vec<f64>> {
        match r {
            VecRef::Inline(v) => {
                if v.is_empty() {
                    return Err(CliError::config(field, "inline vector is empty"));
                }
                Ok(v.clone())
            }
            VecRef::CacheId(spec) => {
                let (id, path) = spec.split_once('@').ok_or_else(|| {
                    CliError::config(field, format!("'{spec}' is not of the form id@cache.u3de"))
                })?;
                if id.is_empty() || path.is_empty() {
                    return Err(CliError::config(
                        field,
                        format!("'{spec}' has an empty id or cache path"),
                    ));
                }
                let path = rebased(&self.base, Path::new(path));
                let mut caches = self.caches.borrow_mut();
                if !caches.contains_key(&path) {
                    let cache = read_cache(&path)
                        .map_err(|e| CliError::Runtime(format!("{field}: {e}")))?;
                    caches.insert(path.clone(), cache);
                }
                caches[&path].get_f64(id).ok_or_else(|| {
                    CliError::Runtime(format!("{field}: no id '{id}' in {}", path.display()))
                })
            }
        }
    }
}

fn rebased(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn rebase(base: &Path, p: &mut PathBuf) {
    *p = rebased(base, p);
}

fn default_true() -> bool {
    true
}

fn default_out() -> PathBuf {
    PathBuf::from("puncto-out")
}

fn default_g() -> usize {
    64
}

fn default_k() -> usize {
    32
}

/// Shared encoder settings for every inference subcommand.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    pub scale: String,
    #[serde(default)]
    pub teacher_dim: Option<usize>,
    #[serde(default)]
    pub pooling: Option<Pooling>,
    /// Fresh seeded init when absent.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(rename = "G", default = "default_g")]
    pub g: usize,
    #[serde(rename = "K", default = "default_k")]
    pub k: usize,
}

impl EncoderSection {
    pub fn encoder_config(&self) -> CliResult<EncoderConfig> {
        let mut cfg = EncoderConfig::preset(&self.scale)
            .map_err(|e| CliError::config("encoder.scale", e.to_string()))?;
        if let Some(d) = self.teacher_dim {
            cfg.teacher_dim = d;
        }
        if let Some(p) = self.pooling {
            cfg.pooling = p;
        }
        cfg.validate().map_err(|e| CliError::config("encoder", e.to_string()))?;
        if self.g == 0 || self.k == 0 {
            return Err(CliError::config("encoder", "G and K must be at least 1"));
        }
        Ok(cfg)
    }

    pub fn build(&self, seed: u64) -> CliResult<puncto_core::encoder::Encoder> {
        let cfg = self.encoder_config()?;
        match &self.checkpoint {
            Some(path) => {
                let (enc, _) = puncto_core::checkpoint::load_encoder(path, &cfg)?;
                Ok(enc)
            }
            None => Ok(puncto_core::encoder::Encoder::init(&cfg, seed)?),
        }
    }
}

fn default_nano() -> String {
    "nano".into()
}

fn default_epsilon() -> f64 {
    1e-5
}

fn default_gc_batch() -> usize {
    4
}

fn default_gc_points() -> usize {
    64
}

fn default_gc_gk() -> usize {
    8
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckSection {
    #[serde(default = "default_nano")]
    pub scale: String,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_gc_batch")]
    pub batch: usize,
    #[serde(default = "default_gc_points")]
    pub points: usize,
    #[serde(rename = "G", default = "default_gc_gk")]
    pub g: usize,
    #[serde(rename = "K", default = "default_gc_gk")]
    pub k: usize,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        GradcheckSection {
            scale: default_nano(),
            epsilon: default_epsilon(),
            batch: default_gc_batch(),
            points: default_gc_points(),
            g: default_gc_gk(),
            k: default_gc_gk(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedSection {
    pub clouds: Vec<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledCloud {
    pub path: PathBuf,
    #[serde(default)]
    pub label: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassDef {
    pub name: String,
    pub prompts: Vec<VecRef>,
}

fn default_topk() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifySection {
    pub clouds: Vec<LabeledCloud>,
    pub classes: Vec<ClassDef>,
    #[serde(default = "default_topk")]
    pub topk: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    /// Every cloud must carry a label.
    pub clouds: Vec<LabeledCloud>,
    pub shots: usize,
    /// Defaults to the run seed alone.
    #[serde(default)]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartDef {
    pub name: String,
    pub vector: VecRef,
}

fn default_seg_steps() -> usize {
    200
}

fn default_seg_lr() -> f64 {
    1e-2
}

fn default_seg_fusion() -> usize {
    64
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartsegSection {
    pub category: String,
    pub parts: Vec<PartDef>,
    /// Empty list = unseen-category mode: the head is used as initialized.
    #[serde(default)]
    pub train_clouds: Vec<PathBuf>,
    pub eval_clouds: Vec<PathBuf>,
    #[serde(default = "default_seg_steps")]
    pub steps: usize,
    #[serde(default = "default_seg_lr")]
    pub lr: f64,
    #[serde(default = "default_seg_fusion")]
    pub fusion: usize,
}

fn default_paint_steps() -> usize {
    100
}

fn default_paint_step_size() -> f64 {
    0.01
}

fn default_painted() -> String {
    "painted.ply".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PaintSection {
    pub cloud: PathBuf,
    /// Renormalized to unit length after resolution.
    pub target: VecRef,
    #[serde(default = "default_paint_steps")]
    pub steps: usize,
    #[serde(default = "default_paint_step_size")]
    pub step_size: f64,
    #[serde(default = "default_painted")]
    pub output: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrieveSection {
    pub manifest: PathBuf,
    /// Loaded if it already holds an index, otherwise built and saved there.
    /// Defaults to `<output_dir>/index`.
    #[serde(default)]
    pub index_dir: Option<PathBuf>,
    /// Renormalized to unit length after resolution.
    pub queries: Vec<VecRef>,
    #[serde(default = "default_topk")]
    pub k: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub determinism: bool,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub encoder: Option<EncoderSection>,
    /// Raw here so the run seed can be inherited before strict parsing.
    #[serde(default)]
    pub train: Option<serde_json::Value>,
    #[serde(default)]
    pub gradcheck: Option<GradcheckSection>,
    #[serde(default)]
    pub embed: Option<EmbedSection>,
    #[serde(default)]
    pub classify: Option<ClassifySection>,
    #[serde(default)]
    pub probe: Option<ProbeSection>,
    #[serde(default)]
    pub partseg: Option<PartsegSection>,
    #[serde(default)]
    pub paint: Option<PaintSection>,
    #[serde(default)]
    pub retrieve: Option<RetrieveSection>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            determinism: true,
            output_dir: default_out(),
            encoder: None,
            train: None,
            gradcheck: None,
            embed: None,
            classify: None,
            probe: None,
            partseg: None,
            paint: None,
            retrieve: None,
        }
    }
}

/// RunConfig plus everything path resolution needs.
pub struct LoadedConfig {
    pub run: RunConfig,
    /// Directory of the config file; relative paths inside the config
    /// resolve against it.
    pub base: PathBuf,
}

pub fn load_config(path: &Path) -> CliResult<LoadedConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
        path: None,
        message: format!("cannot read config {}: {e}", path.display()),
    })?;
    let mut de = serde_json::Deserializer::from_str(&text);
    let run: RunConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let p = e.path().to_string();
        CliError::Config {
            path: if p == "." { None } else { Some(p) },
            message: e.inner().to_string(),
        }
    })?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut loaded = LoadedConfig { run, base };
    loaded.rebase_paths();
    Ok(loaded)
}

impl LoadedConfig {
    fn rebase_paths(&mut self) {
        let base = self.base.clone();
        if let Some(enc) = &mut self.run.encoder {
            if let Some(ck) = &mut enc.checkpoint {
                rebase(&base, ck);
            }
        }
        if let Some(embed) = &mut self.run.embed {
            for p in &mut embed.clouds {
                rebase(&base, p);
            }
        }
        if let Some(classify) = &mut self.run.classify {
            for c in &mut classify.clouds {
                rebase(&base, &mut c.path);
            }
        }
        if let Some(probe) = &mut self.run.probe {
            for c in &mut probe.clouds {
                rebase(&base, &mut c.path);
            }
        }
        if let Some(seg) = &mut self.run.partseg {
            for p in seg.train_clouds.iter_mut().chain(&mut seg.eval_clouds) {
                rebase(&base, p);
            }
        }
        if let Some(paint) = &mut self.run.paint {
            rebase(&base, &mut paint.cloud);
        }
        if let Some(ret) = &mut self.run.retrieve {
            rebase(&base, &mut ret.manifest);
            if let Some(d) = &mut ret.index_dir {
                rebase(&base, d);
            }
        }
        // cache paths inside VecRefs are rebased by VecResolver at use
    }

    pub fn resolver(&self) -> VecResolver {
        VecResolver::new(&self.base)
    }

    /// Strict parse of the train section; the run seed and determinism flag
    /// are inherited by keys the section leaves unset.
    pub fn train_config(&self) -> CliResult<TrainConfig> {
        let raw = self.run.train.as_ref().ok_or_else(|| {
            CliError::config("train", "config has no train section")
        })?;
        let mut raw = raw.clone();
        if let Some(obj) = raw.as_object_mut() {
            obj.entry("seed").or_insert(self.run.seed.into());
            obj.entry("determinism").or_insert(self.run.determinism.into());
        }
        let mut cfg: TrainConfig = serde_path_to_error::deserialize(&raw).map_err(|e| {
            let p = e.path().to_string();
            CliError::Config {
                path: Some(if p == "." { "train".into() } else { format!("train.{p}") }),
                message: e.inner().to_string(),
            }
        })?;
        cfg.validate().map_err(|e| CliError::config("train", e.to_string()))?;
        rebase(&self.base, &mut cfg.manifest_path);
        if let Some(ck) = &mut cfg.init_checkpoint {
            rebase(&self.base, ck);
        }
        Ok(cfg)
    }

    /// The encoder section, required by every inference subcommand.
    pub fn encoder_section(&self) -> CliResult<&EncoderSection> {
        self.run
            .encoder
            .as_ref()
            .ok_or_else(|| CliError::config("encoder", "config has no encoder section"))
    }
}
