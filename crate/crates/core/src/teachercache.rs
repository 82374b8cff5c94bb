//! Precached frozen teacher embeddings, the triplet manifest, and
//! deterministic batch sampling.
//!
//! Cache format "U3DE": magic `U3DE`, little-endian u32 version (=1),
//! u32 dim, u64 count, then per record a u16 id byte length, the id bytes,
//! and dim little-endian f32 values.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::rng::{self, tag};

const MAGIC: &[u8; 4] = b"U3DE";
const VERSION: u32 = 1;

/// Frozen teacher embeddings keyed by id. Vectors are stored raw (not unit
/// normalized); normalization happens at use sites. `source_tag` is an
/// in-memory annotation only — the on-disk format does not carry it.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingCache {
    pub dim: usize,
    pub source_tag: String,
    records: Vec<(String, Vec<f32>)>,
    index: BTreeMap<String, usize>,
}

impl EmbeddingCache {
    pub fn new(dim: usize) -> Self {
        EmbeddingCache { dim, source_tag: String::new(), records: Vec::new(), index: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn insert(&mut self, id: impl Into<String>, vec: Vec<f32>) -> Result<()> {
        let id = id.into();
        if vec.len() != self.dim {
            return Err(Error::shape(format!(
                "embedding '{id}' has dim {}, cache dim is {}",
                vec.len(),
                self.dim
            )));
        }
        if vec.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("embedding '{id}'")));
        }
        if self.index.contains_key(&id) {
            return Err(Error::invalid(format!("duplicate embedding id '{id}'")));
        }
        self.index.insert(id.clone(), self.records.len());
        self.records.push((id, vec));
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.index.get(id).map(|&i| self.records[i].1.as_slice())
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    /// Record ids in insertion (= file) order.
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|(id, _)| id.as_str())
    }

    pub fn get_f64(&self, id: &str) -> Option<Vec<f64>> {
        self.get(id).map(|v| v.iter().map(|&x| x as f64).collect())
    }
}

pub fn write_cache(path: &Path, cache: &EmbeddingCache) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(cache.dim as u32).to_le_bytes());
    out.extend_from_slice(&(cache.records.len() as u64).to_le_bytes());
    for (id, vec) in &cache.records {
        let bytes = id.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(Error::invalid(format!("embedding id too long ({} bytes)", bytes.len())));
        }
        out.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(bytes);
        for v in vec {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_cache(path: &Path) -> Result<EmbeddingCache> {
    let data = std::fs::read(path)?;
    if data.len() < 20 || &data[0..4] != MAGIC {
        return Err(Error::format(format!("{}: not a U3DE cache", path.display())));
    }
    let version = u32::from_le_bytes(data[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(format!("unsupported cache version {version}")));
    }
    let dim = u32::from_le_bytes(data[8..12].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(data[12..20].try_into().unwrap()) as usize;
    let mut cache = EmbeddingCache::new(dim);
    let mut off = 20usize;
    for i in 0..count {
        if off + 2 > data.len() {
            return Err(Error::format(format!("cache truncated at record {i}")));
        }
        let id_len = u16::from_le_bytes(data[off..off + 2].try_into().unwrap()) as usize;
        off += 2;
        if off + id_len + dim * 4 > data.len() {
            return Err(Error::format(format!("cache truncated at record {i}")));
        }
        let id = std::str::from_utf8(&data[off..off + id_len])
            .map_err(|_| Error::format(format!("record {i}: id is not utf-8")))?
            .to_string();
        off += id_len;
        let vec: Vec<f32> = data[off..off + dim * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        off += dim * 4;
        cache.insert(id, vec)?;
    }
    if off != data.len() {
        return Err(Error::format(format!(
            "cache has {} trailing bytes after {count} records",
            data.len() - off
        )));
    }
    Ok(cache)
}

/// One shape's triplet sources.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestShape {
    pub id: String,
    pub cloud: PathBuf,
    pub images: Vec<String>,
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestFile {
    image_cache: PathBuf,
    text_cache: PathBuf,
    shapes: Vec<ManifestShape>,
}

/// The triplet manifest plus its two loaded caches, fully validated:
/// every referenced embedding id resolves and every cloud path exists.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub shapes: Vec<ManifestShape>,
    pub image_cache: EmbeddingCache,
    pub text_cache: EmbeddingCache,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }
}

/// Load and validate a manifest. Relative paths inside the file resolve
/// against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::format(format!("cannot read manifest {}: {e}", path.display())))?;
    let file: ManifestFile = serde_json::from_str(&text)
        .map_err(|e| Error::format(format!("manifest {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };

    let image_cache = read_cache(&resolve(&file.image_cache))?;
    let text_cache = read_cache(&resolve(&file.text_cache))?;
    if file.shapes.is_empty() {
        return Err(Error::invalid("manifest lists no shapes"));
    }
    let mut seen = BTreeMap::new();
    let mut shapes = Vec::with_capacity(file.shapes.len());
    for mut s in file.shapes {
        if seen.insert(s.id.clone(), ()).is_some() {
            return Err(Error::invalid(format!("duplicate shape id '{}'", s.id)));
        }
        if s.images.is_empty() || s.texts.is_empty() {
            return Err(Error::invalid(format!(
                "shape '{}' needs at least one image and one text embedding",
                s.id
            )));
        }
        for id in &s.images {
            if !image_cache.contains(id) {
                return Err(Error::invalid(format!(
                    "shape '{}': image embedding '{id}' not in cache",
                    s.id
                )));
            }
        }
        for id in &s.texts {
            if !text_cache.contains(id) {
                return Err(Error::invalid(format!(
                    "shape '{}': text embedding '{id}' not in cache",
                    s.id
                )));
            }
        }
        s.cloud = resolve(&s.cloud);
        if !s.cloud.is_file() {
            return Err(Error::invalid(format!(
                "shape '{}': cloud file {} not readable",
                s.id,
                s.cloud.display()
            )));
        }
        shapes.push(s);
    }
    Ok(Manifest { shapes, image_cache, text_cache })
}

/// One sampled batch: shape ids, their cloud paths, and the chosen raw
/// teacher vectors ([N, dim] each).
#[derive(Debug, Clone)]
pub struct TripletBatch {
    pub shape_ids: Vec<String>,
    pub cloud_paths: Vec<PathBuf>,
    /// Manifest positions of the drawn shapes.
    pub shape_indices: Vec<usize>,
    pub image_vecs: Mat,
    pub text_vecs: Mat,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.shape_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shape_ids.is_empty()
    }
}

/// Draw the batch for `step`: shapes come from a per-epoch seeded shuffle
/// consumed in windows of `n` (the final window of an epoch may be short);
/// each shape's image and text are drawn uniformly from its lists.
/// Deterministic in (seed, step).
pub fn sample_batch(manifest: &Manifest, n: usize, seed: u64, step: usize) -> Result<TripletBatch> {
    if n == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    if manifest.is_empty() {
        return Err(Error::invalid("cannot sample from an empty manifest"));
    }
    let m = manifest.len();
    let batches_per_epoch = m.div_ceil(n);
    let epoch = step / batches_per_epoch;
    let start = (step % batches_per_epoch) * n;
    let end = (start + n).min(m);

    let perm = rng::permutation(&mut rng::derive(seed, &[tag::EPOCH_SHUFFLE, epoch as u64]), m);
    let dim = manifest.image_cache.dim;
    let mut batch = TripletBatch {
        shape_ids: Vec::new(),
        cloud_paths: Vec::new(),
        shape_indices: Vec::new(),
        image_vecs: Mat::zeros(end - start, dim),
        text_vecs: Mat::zeros(end - start, manifest.text_cache.dim),
    };
    for (row, &si) in perm[start..end].iter().enumerate() {
        let shape = &manifest.shapes[si];
        let mut pick = rng::derive(seed, &[tag::PAIR_CHOICE, step as u64, si as u64]);
        let img_id = &shape.images[pick.gen_range(0..shape.images.len())];
        let txt_id = &shape.texts[pick.gen_range(0..shape.texts.len())];
        let img = manifest.image_cache.get(img_id).expect("validated at load");
        let txt = manifest.text_cache.get(txt_id).expect("validated at load");
        for (c, &v) in img.iter().enumerate() {
            batch.image_vecs.set(row, c, v as f64);
        }
        for (c, &v) in txt.iter().enumerate() {
            batch.text_vecs.set(row, c, v as f64);
        }
        batch.shape_ids.push(shape.id.clone());
        batch.cloud_paths.push(shape.cloud.clone());
        batch.shape_indices.push(si);
    }
    Ok(batch)
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use crate::geometry::PointCloud;
    use rand::Rng;
    use std::path::Path;

    /// Build a synthetic manifest: `n_shapes` random clouds, each with
    /// `per_shape` image/text embeddings of dimension `dim`.
    pub fn synthetic_manifest(
        dir: &Path,
        n_shapes: usize,
        per_shape: usize,
        dim: usize,
        points: usize,
        seed: u64,
    ) -> PathBuf {
        let mut rng = crate::rng::derive(seed, &[1234]);
        let mut image_cache = EmbeddingCache::new(dim);
        let mut text_cache = EmbeddingCache::new(dim);
        let mut shapes = Vec::new();
        for s in 0..n_shapes {
            let id = format!("shape{s:03}");
            let positions: Vec<f64> = (0..points * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let colors: Vec<f64> = (0..points * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
            let cloud = PointCloud::new(id.clone(), positions, colors).unwrap();
            let cloud_path = dir.join(format!("{id}.ply"));
            crate::ply::write_ply(&cloud_path, &cloud, None).unwrap();

            let mut images = Vec::new();
            let mut texts = Vec::new();
            for v in 0..per_shape {
                let img_id = format!("{id}/img{v}");
                let txt_id = format!("{id}/txt{v}");
                image_cache
                    .insert(img_id.clone(), (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
                    .unwrap();
                text_cache
                    .insert(txt_id.clone(), (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
                    .unwrap();
                images.push(img_id);
                texts.push(txt_id);
            }
            shapes.push(ManifestShape { id, cloud: PathBuf::from(format!("{}.ply", format!("shape{s:03}"))), images, texts });
        }
        write_cache(&dir.join("images.u3de"), &image_cache).unwrap();
        write_cache(&dir.join("texts.u3de"), &text_cache).unwrap();
        let file = ManifestFile {
            image_cache: PathBuf::from("images.u3de"),
            text_cache: PathBuf::from("texts.u3de"),
            shapes,
        };
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&file).unwrap()).unwrap();
        path
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn cache_round_trip_and_exact_size() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.u3de");
        let mut cache = EmbeddingCache::new(512);
        let ids = ["a", "bb", "ccc"];
        for (i, id) in ids.iter().enumerate() {
            cache.insert(*id, (0..512).map(|j| (i * 1000 + j) as f32 * 0.001).collect()).unwrap();
        }
        write_cache(&path, &cache).unwrap();
        let back = read_cache(&path).unwrap();
        assert_eq!(back.dim, 512);
        assert_eq!(back.len(), 3);
        for id in ids {
            assert_eq!(back.get(id).unwrap(), cache.get(id).unwrap());
        }
        let expected = 20 + ids.iter().map(|i| 2 + i.len()).sum::<usize>() + 3 * 512 * 4;
        assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, expected);
    }

    #[test]
    fn cache_rejects_duplicates_and_truncation() {
        let mut cache = EmbeddingCache::new(4);
        cache.insert("x", vec![1.0; 4]).unwrap();
        assert!(cache.insert("x", vec![2.0; 4]).is_err());
        assert!(cache.insert("y", vec![1.0; 3]).is_err(), "dim mismatch accepted");
        assert!(cache.insert("z", vec![f32::NAN; 4]).is_err());

        let dir = tempdir().unwrap();
        let path = dir.path().join("t.u3de");
        write_cache(&path, &cache).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // declare one more record than present
        bytes[12..20].copy_from_slice(&2u64.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_cache(&path).is_err());
    }

    #[test]
    fn manifest_validates_references() {
        let dir = tempdir().unwrap();
        let path = fixtures::synthetic_manifest(dir.path(), 3, 2, 8, 32, 1);
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.image_cache.dim, 8);

        // break a reference
        let text = std::fs::read_to_string(&path).unwrap();
        let broken = text.replace("shape001/img0", "missing/id");
        std::fs::write(&path, broken).unwrap();
        assert!(load_manifest(&path).is_err());
    }

    #[test]
    fn manifest_requires_cloud_files() {
        let dir = tempdir().unwrap();
        let path = fixtures::synthetic_manifest(dir.path(), 2, 1, 8, 32, 2);
        std::fs::remove_file(dir.path().join("shape001.ply")).unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("shape001"), "{err}");
    }

    #[test]
    fn batches_are_deterministic_and_cover_epochs() {
        let dir = tempdir().unwrap();
        let path = fixtures::synthetic_manifest(dir.path(), 7, 2, 8, 32, 3);
        let m = load_manifest(&path).unwrap();

        let a = sample_batch(&m, 3, 11, 5).unwrap();
        let b = sample_batch(&m, 3, 11, 5).unwrap();
        assert_eq!(a.shape_ids, b.shape_ids);
        assert_eq!(a.image_vecs.data, b.image_vecs.data);

        // one epoch = 3 batches (3+3+1); every shape appears exactly once
        let mut seen = Vec::new();
        for step in 0..3 {
            let batch = sample_batch(&m, 3, 11, step).unwrap();
            seen.extend(batch.shape_ids);
        }
        assert_eq!(seen.len(), 7);
        let mut sorted = seen.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 7);

        // short batch at the end of the epoch
        let last = sample_batch(&m, 3, 11, 2).unwrap();
        assert_eq!(last.len(), 1);
        // next epoch reshuffles
        let next = sample_batch(&m, 3, 11, 3).unwrap();
        assert_eq!(next.len(), 3);
    }

    #[test]
    fn single_shape_manifest_yields_same_triplet_every_step() {
        let dir = tempdir().unwrap();
        let path = fixtures::synthetic_manifest(dir.path(), 1, 1, 8, 32, 4);
        let m = load_manifest(&path).unwrap();
        let a = sample_batch(&m, 1, 5, 0).unwrap();
        for step in 1..5 {
            let b = sample_batch(&m, 1, 5, step).unwrap();
            assert_eq!(a.shape_ids, b.shape_ids);
            assert_eq!(a.image_vecs.data, b.image_vecs.data);
            assert_eq!(a.text_vecs.data, b.text_vecs.data);
        }
    }

    #[test]
    fn image_choice_is_roughly_uniform() {
        let dir = tempdir().unwrap();
        let path = fixtures::synthetic_manifest(dir.path(), 1, 10, 4, 32, 5);
        let m = load_manifest(&path).unwrap();
        let mut counts = BTreeMap::new();
        let draws = 10_000;
        for step in 0..draws {
            let b = sample_batch(&m, 1, 9, step).unwrap();
            // identify the image by its first component
            let key = (b.image_vecs.at(0, 0) * 1e6).round() as i64;
            *counts.entry(key).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 10);
        for (_, c) in counts {
            let f = c as f64 / draws as f64;
            assert!((f - 0.1).abs() < 0.02, "frequency {f}");
        }
    }
}
