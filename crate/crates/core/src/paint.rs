//! Point-cloud painting: positions and grouping stay fixed while the RGB
//! channels follow gradient ascent on the cosine between the cloud's
//! embedding and a target direction in teacher space.

use crate::autodiff::Tape;
use crate::encoder::{build_forward, Encoder, ForwardOptions};
use crate::error::{Error, Result};
use crate::geometry::{normalize_unit_sphere, PointCloud};
use crate::mat::Mat;
use crate::tokenizer::group_patches;

/// One painting task. Positions are frozen; only colors are optimized.
#[derive(Debug, Clone)]
pub struct PaintJob {
    pub cloud: PointCloud,
    /// Unit-norm direction in teacher space to steer the embedding toward.
    pub target: Vec<f64>,
    pub steps: usize,
    pub step_size: f64,
    pub g: usize,
    pub k: usize,
}

/// Outcome of a paint run. `trace[i]` is the cosine measured at the start of
/// step `i`, before that step's color update. `aborted` is set when a
/// non-finite embedding or gradient cut the run short; the returned colors
/// are then the last finite iterate.
#[derive(Debug, Clone)]
pub struct PaintOutcome {
    pub cloud: PointCloud,
    pub trace: Vec<f64>,
    pub aborted: bool,
}

/// Gradient ascent on the RGB channels. The grouping (FPS centers + kNN
/// membership) is computed once from the frozen positions, so the objective
/// is a smooth function of the colors alone; every step ends with a clamp of
/// each channel to [0, 1].
pub fn paint(encoder: &Encoder, job: &PaintJob) -> Result<PaintOutcome> {
    let teacher_dim = encoder.config.teacher_dim;
    if job.target.len() != teacher_dim {
        return Err(Error::shape(format!(
            "target has {} components, encoder projects into {teacher_dim}",
            job.target.len()
        )));
    }
    if job.target.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("paint target"));
    }
    let norm = job.target.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-4 {
        return Err(Error::invalid(format!("paint target norm {norm:.6} is not 1")));
    }
    if !job.step_size.is_finite() || job.step_size <= 0.0 {
        return Err(Error::invalid(format!("step size {} must be finite and > 0", job.step_size)));
    }
    if let Some(c) = job.cloud.colors.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::invalid(format!("input color {c} outside [0, 1]")));
    }

    let normalized = normalize_unit_sphere(&job.cloud)?;
    // Grouping is fixed for the whole run: positions never move.
    let patches = group_patches(&normalized, job.g, job.k, 0)?;
    let n = job.cloud.len();
    let mut colors = Mat::from_vec(n, 3, job.cloud.colors.clone());

    let mut trace = Vec::with_capacity(job.steps);
    let mut aborted = false;
    for _ in 0..job.steps {
        let mut tape = Tape::new();
        let staged = encoder.stage(&mut tape, false);
        let color_leaf = tape.leaf(colors.clone());
        let gathered = tape.gather_rows(color_leaf, &patches.member_indices);
        let fwd = build_forward(
            &mut tape,
            &encoder.config,
            &staged,
            &patches,
            &ForwardOptions {
                keep_mask: None,
                colors_override: Some(gathered),
                branch_scales: None,
                tap_layers: &[],
            },
        )?;
        // check the raw embedding: unit_rows maps a non-finite row to zeros,
        // which would fake a finite similarity
        if !tape.value(fwd.embedding).is_finite() {
            aborted = true;
            break;
        }
        let unit = tape.unit_rows(fwd.embedding);
        let target = tape.constant(Mat::from_vec(1, teacher_dim, job.target.clone()));
        let prod = tape.mul(unit, target);
        let cosine = tape.sum_all(prod);
        trace.push(tape.value(cosine).data[0]);

        let mut grads = tape.backward(cosine);
        match grads.take(color_leaf) {
            Some(g) if g.is_finite() => {
                for (c, gv) in colors.data.iter_mut().zip(&g.data) {
                    *c = (*c + job.step_size * gv).clamp(0.0, 1.0);
                }
            }
            Some(_) => {
                aborted = true;
                break;
            }
            None => {}
        }
    }

    let cloud =
        PointCloud::new(job.cloud.id.clone(), job.cloud.positions.clone(), colors.data.clone())?;
    Ok(PaintOutcome { cloud, trace, aborted })
}
