//! Cross-modal retrieval: a persistent index of unit shape embeddings with
//! exact brute-force cosine scoring and averaged multi-query lookup.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::eval::embed_shape;
use crate::mat::{self, Mat};
use crate::teachercache::{read_cache, write_cache, EmbeddingCache, Manifest};

/// Row-norm tolerance for index invariants (covers f32 round-trips).
pub const UNIT_TOL: f64 = 1e-5;

const EMBED_FILE: &str = "embeddings.u3de";
const META_FILE: &str = "meta.json";

/// Immutable set of unit shape embeddings plus the cloud each came from.
#[derive(Debug, Clone)]
pub struct ShapeIndex {
    ids: Vec<String>,
    embeddings: Mat,
    clouds: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexMeta {
    clouds: BTreeMap<String, String>,
}

impl ShapeIndex {
    /// Validates uniqueness and unit rows; entry order is the index order.
    pub fn new(entries: Vec<(String, Vec<f64>, String)>) -> Result<ShapeIndex> {
        if entries.is_empty() {
            return Err(Error::invalid("index has no entries"));
        }
        let dim = entries[0].1.len();
        if dim == 0 {
            return Err(Error::shape("index embeddings have zero dimension"));
        }
        let mut ids = Vec::with_capacity(entries.len());
        let mut embeddings = Mat::zeros(entries.len(), dim);
        let mut clouds = BTreeMap::new();
        for (row, (id, emb, cloud)) in entries.into_iter().enumerate() {
            if emb.len() != dim {
                return Err(Error::shape(format!(
                    "embedding for '{id}' has {} components, index uses {dim}",
                    emb.len()
                )));
            }
            let norm = emb.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOL {
                return Err(Error::invalid(format!("embedding for '{id}' has norm {norm:.8}")));
            }
            if clouds.insert(id.clone(), cloud).is_some() {
                return Err(Error::invalid(format!("duplicate id '{id}' in index")));
            }
            embeddings.row_mut(row).copy_from_slice(&emb);
            ids.push(id);
        }
        Ok(ShapeIndex { ids, embeddings, clouds })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn embedding(&self, row: usize) -> &[f64] {
        self.embeddings.row(row)
    }

    pub fn cloud_path(&self, id: &str) -> Option<&str> {
        self.clouds.get(id).map(String::as_str)
    }
}

/// One shape that could not be embedded during an index build.
#[derive(Debug, Clone, Serialize)]
pub struct SkippedShape {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct BuildReport {
    pub built: usize,
    pub skipped: Vec<SkippedShape>,
}

/// Embed every manifest cloud. Per-shape failures (unreadable or degenerate
/// clouds) are skipped and recorded; an index with zero rows is an error.
pub fn build_index(
    encoder: &Encoder,
    manifest: &Manifest,
    g: usize,
    k: usize,
) -> Result<(ShapeIndex, BuildReport)> {
    let mut entries = Vec::with_capacity(manifest.len());
    let mut skipped = Vec::new();
    for shape in &manifest.shapes {
        let embed = crate::ply::read_ply(&shape.cloud)
            .and_then(|contents| embed_shape(encoder, &contents.cloud, g, k));
        match embed {
            Ok(emb) => {
                entries.push((shape.id.clone(), emb, shape.cloud.display().to_string()));
            }
            Err(e) => skipped.push(SkippedShape { id: shape.id.clone(), reason: e.to_string() }),
        }
    }
    if entries.is_empty() {
        return Err(Error::invalid("every manifest shape failed to embed"));
    }
    let built = entries.len();
    Ok((ShapeIndex::new(entries)?, BuildReport { built, skipped }))
}

/// Persist as an embedding cache plus a metadata json inside `dir`.
pub fn save_index(index: &ShapeIndex, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut cache = EmbeddingCache::new(index.dim());
    for (row, id) in index.ids.iter().enumerate() {
        cache.insert(id.clone(), index.embeddings.row(row).iter().map(|&v| v as f32).collect())?;
    }
    write_cache(&dir.join(EMBED_FILE), &cache)?;
    let meta = IndexMeta { clouds: index.clouds.clone() };
    std::fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn load_index(dir: &Path) -> Result<ShapeIndex> {
    let cache = read_cache(&dir.join(EMBED_FILE))?;
    let meta_path = dir.join(META_FILE);
    let text = std::fs::read_to_string(&meta_path)
        .map_err(|e| Error::format(format!("cannot read {}: {e}", meta_path.display())))?;
    let meta: IndexMeta =
        serde_json::from_str(&text).map_err(|e| Error::format(format!("index meta: {e}")))?;
    let mut entries = Vec::with_capacity(cache.len());
    for id in cache.ids().map(String::from).collect::<Vec<_>>() {
        let emb = cache.get_f64(&id).expect("id listed by the cache");
        let cloud = meta
            .clouds
            .get(&id)
            .ok_or_else(|| Error::format(format!("index meta is missing cloud for '{id}'")))?;
        entries.push((id, emb, cloud.clone()));
    }
    ShapeIndex::new(entries)
}

/// Top-k ids by cosine against the unit-normalized mean of `queries`.
/// Scores sort descending; exact ties order by id. Exhaustive scan — no
/// approximation.
pub fn retrieve(
    index: &ShapeIndex,
    queries: &[Vec<f64>],
    k: usize,
) -> Result<Vec<(String, f64)>> {
    if queries.is_empty() {
        return Err(Error::invalid("retrieve needs at least one query"));
    }
    if k == 0 || k > index.len() {
        return Err(Error::invalid(format!("k = {k} outside 1..={}", index.len())));
    }
    let dim = index.dim();
    let mut mean = vec![0.0f64; dim];
    for q in queries {
        if q.len() != dim {
            return Err(Error::shape(format!(
                "query has {} components, index uses {dim}",
                q.len()
            )));
        }
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-4 {
            return Err(Error::invalid(format!("query has norm {norm:.8}, want a unit vector")));
        }
        for (m, v) in mean.iter_mut().zip(q) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= queries.len() as f64;
    }
    if mean.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1e-12 {
        return Err(Error::invalid("queries average to the zero vector"));
    }
    mat::unit_normalize(&mut mean);

    let mut ranked: Vec<(usize, f64)> = (0..index.len())
        .map(|row| (row, mat::dot(index.embeddings.row(row), &mean)))
        .collect();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("finite scores")
            .then_with(|| index.ids[a.0].cmp(&index.ids[b.0]))
    });
    Ok(ranked.into_iter().take(k).map(|(row, s)| (index.ids[row].clone(), s)).collect())
}
