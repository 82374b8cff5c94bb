//! Deterministic point-set kernels: normalization, farthest point sampling,
//! k-nearest-neighbor search.
//!
//! Ties are always broken by the smallest index so every kernel is exactly
//! reproducible and comparable against a brute-force oracle.

use crate::error::{Error, Result};

/// A colored point cloud. Positions are dimensionless after normalization;
/// colors are RGB in [0, 1].
#[derive(Debug, Clone)]
pub struct PointCloud {
    /// Flat [N*3] row-major xyz coordinates.
    pub positions: Vec<f64>,
    /// Flat [N*3] row-major rgb values in [0, 1].
    pub colors: Vec<f64>,
    pub id: String,
}

/// Fill value for clouds that arrive without color.
pub const DEFAULT_GRAY: f64 = 0.4;

impl PointCloud {
    pub fn new(id: impl Into<String>, positions: Vec<f64>, colors: Vec<f64>) -> Result<Self> {
        let id = id.into();
        if positions.is_empty() || positions.len() % 3 != 0 {
            return Err(Error::invalid(format!(
                "cloud '{id}': positions must be a non-empty multiple of 3, got {}",
                positions.len()
            )));
        }
        if colors.len() != positions.len() {
            return Err(Error::shape(format!(
                "cloud '{id}': {} position values vs {} color values",
                positions.len(),
                colors.len()
            )));
        }
        if let Some(v) = positions.iter().find(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("cloud '{id}': coordinate {v}")));
        }
        for c in &colors {
            if !c.is_finite() || *c < 0.0 || *c > 1.0 {
                return Err(Error::invalid(format!(
                    "cloud '{id}': color channel {c} outside [0, 1]"
                )));
            }
        }
        Ok(PointCloud { positions, colors, id })
    }

    /// Cloud without color information, padded with the gray convention.
    pub fn without_colors(id: impl Into<String>, positions: Vec<f64>) -> Result<Self> {
        let colors = vec![DEFAULT_GRAY; positions.len()];
        PointCloud::new(id, positions, colors)
    }

    pub fn len(&self) -> usize {
        self.positions.len() / 3
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    #[inline]
    pub fn position(&self, i: usize) -> [f64; 3] {
        [self.positions[3 * i], self.positions[3 * i + 1], self.positions[3 * i + 2]]
    }

    #[inline]
    pub fn color(&self, i: usize) -> [f64; 3] {
        [self.colors[3 * i], self.colors[3 * i + 1], self.colors[3 * i + 2]]
    }
}

/// Center the cloud on its centroid and scale so the farthest point sits on
/// the unit sphere. Colors pass through untouched. An all-coincident cloud
/// maps to all zeros.
pub fn normalize_unit_sphere(cloud: &PointCloud) -> Result<PointCloud> {
    if let Some(v) = cloud.positions.iter().find(|v| !v.is_finite()) {
        return Err(Error::non_finite(format!("cloud '{}': coordinate {v}", cloud.id)));
    }
    let n = cloud.len();
    let mut centroid = [0.0f64; 3];
    for i in 0..n {
        let p = cloud.position(i);
        centroid[0] += p[0];
        centroid[1] += p[1];
        centroid[2] += p[2];
    }
    for c in &mut centroid {
        *c /= n as f64;
    }
    let mut positions = Vec::with_capacity(n * 3);
    let mut max_norm2 = 0.0f64;
    for i in 0..n {
        let p = cloud.position(i);
        let q = [p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]];
        max_norm2 = max_norm2.max(q[0] * q[0] + q[1] * q[1] + q[2] * q[2]);
        positions.extend_from_slice(&q);
    }
    let scale = max_norm2.sqrt();
    if scale > 0.0 {
        for v in &mut positions {
            *v /= scale;
        }
    }
    Ok(PointCloud { positions, colors: cloud.colors.clone(), id: cloud.id.clone() })
}

#[inline]
fn dist2(positions: &[f64], i: usize, q: &[f64; 3]) -> f64 {
    let dx = positions[3 * i] - q[0];
    let dy = positions[3 * i + 1] - q[1];
    let dz = positions[3 * i + 2] - q[2];
    dx * dx + dy * dy + dz * dz
}

/// Greedy farthest point sampling over flat [N*3] positions.
///
/// The first selected index is `start_index`; each subsequent pick maximizes
/// the minimum squared distance to everything already selected, ties broken
/// by smallest index.
pub fn farthest_point_sample(
    positions: &[f64],
    count: usize,
    start_index: usize,
) -> Result<Vec<usize>> {
    let n = positions.len() / 3;
    if positions.len() % 3 != 0 || n == 0 {
        return Err(Error::invalid("positions must be a non-empty multiple of 3"));
    }
    if count == 0 || count > n {
        return Err(Error::invalid(format!("fps count {count} outside 1..={n}")));
    }
    if start_index >= n {
        return Err(Error::invalid(format!("fps start index {start_index} >= {n}")));
    }

    let mut selected = Vec::with_capacity(count);
    selected.push(start_index);
    let start = [positions[3 * start_index], positions[3 * start_index + 1], positions[3 * start_index + 2]];
    let mut min_d2: Vec<f64> = (0..n).map(|i| dist2(positions, i, &start)).collect();

    for _ in 1..count {
        let mut best = usize::MAX;
        let mut best_d2 = f64::NEG_INFINITY;
        for (i, &d) in min_d2.iter().enumerate() {
            if d > best_d2 {
                best_d2 = d;
                best = i;
            }
        }
        selected.push(best);
        let p = [positions[3 * best], positions[3 * best + 1], positions[3 * best + 2]];
        for (i, d) in min_d2.iter_mut().enumerate() {
            let nd = dist2(positions, i, &p);
            if nd < *d {
                *d = nd;
            }
        }
    }
    Ok(selected)
}

/// Exhaustive k-nearest-neighbor search. Row m of the result holds the k
/// indices nearest to query m, ascending by distance, ties by smallest index.
pub fn knn(positions: &[f64], queries: &[f64], k: usize) -> Result<Vec<Vec<usize>>> {
    let n = positions.len() / 3;
    let m = queries.len() / 3;
    if positions.len() % 3 != 0 || queries.len() % 3 != 0 {
        return Err(Error::invalid("positions and queries must be multiples of 3"));
    }
    if k == 0 || k > n {
        return Err(Error::invalid(format!("knn k {k} outside 1..={n}")));
    }
    let mut out = Vec::with_capacity(m);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(n);
    for qi in 0..m {
        let q = [queries[3 * qi], queries[3 * qi + 1], queries[3 * qi + 2]];
        scratch.clear();
        scratch.extend((0..n).map(|i| (dist2(positions, i, &q), i)));
        // Partial selection then an exact sort of the k survivors.
        if k < n {
            scratch.select_nth_unstable_by(k - 1, |a, b| {
                a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1))
            });
        }
        scratch.truncate(k);
        scratch.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        out.push(scratch.iter().map(|&(_, i)| i).collect());
    }
    Ok(out)
}
