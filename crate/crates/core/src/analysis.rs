//! Graph and intervention read-out from a fitted model.
//!
//! Edge scores collapse each cross-environment weight group to its norm;
//! intervention scores read the per-environment deviations directly. Both
//! use the (source, target) orientation of the ground-truth files, which is
//! the transpose of the solver's target-row weight layout. Latent alignment
//! compares the span of the learned latent trajectories with the true ones,
//! which is the object the model can recover: any invertible mixing of the
//! latents yields the same fit.

use nalgebra::DMatrix;
use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::dataset::{array2_to_vec, array3_to_vec, GroundTruth};
use crate::error::{Error, Result};
use crate::linear::LinearModel;
use crate::metrics::{auroc, evaluate_graph, ScoredLabels};
use crate::nonlinear::NonlinearModel;

/// Rank cutoff: singular values below this fraction of the largest are
/// treated as zero when building trajectory bases.
const RANK_TOL: f64 = 1e-10;

/// Edge scores at (source j, target i): the norm of the shared weight and
/// all per-environment deviations for that edge. Latent inputs do not
/// appear; only observed-to-observed edges are scored.
pub fn linear_edge_scores(model: &LinearModel) -> Array2<f64> {
    let d = model.n_vars();
    let n = model.n_envs();
    Array2::from_shape_fn((d, d), |(j, i)| {
        let mut norm_sq = model.w0[[i, j]] * model.w0[[i, j]];
        for k in 0..n {
            norm_sq += model.wk[[k, i, j]] * model.wk[[k, i, j]];
        }
        norm_sq.sqrt()
    })
}

/// Intervention scores at (env k, source j, target i): the magnitude of the
/// environment's deviation weight on that edge.
pub fn linear_intervention_scores(model: &LinearModel) -> Array3<f64> {
    let d = model.n_vars();
    let n = model.n_envs();
    Array3::from_shape_fn((n, d, d), |(k, j, i)| model.wk[[k, i, j]].abs())
}

/// Edge scores at (source j, target i) for the nonlinear model: the norm of
/// the whole first-layer group of input j at target i (shared column plus
/// every environment column).
pub fn nonlinear_edge_scores(model: &NonlinearModel) -> Array2<f64> {
    let d = model.n_vars();
    Array2::from_shape_fn((d, d), |(j, i)| crate::nonlinear::group_norm(model, i, j))
}

/// Intervention scores at (env k, source j, target i) for the nonlinear
/// model: the norm of that environment's first-layer column.
pub fn nonlinear_intervention_scores(model: &NonlinearModel) -> Array3<f64> {
    let d = model.n_vars();
    let n = model.n_envs();
    Array3::from_shape_fn((n, d, d), |(k, j, i)| {
        model
            .env_first
            .slice(s![k, i, .., j])
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ThresholdRule {
    Absolute { value: f64 },
    Relative { fraction: f64 },
}

impl Default for ThresholdRule {
    fn default() -> Self {
        ThresholdRule::Relative { fraction: 0.1 }
    }
}

impl ThresholdRule {
    /// Cutoff for a score set with the given maximum; entries strictly above
    /// it are kept. A zero maximum under the relative rule keeps nothing.
    fn cutoff(&self, max_score: f64) -> f64 {
        match *self {
            ThresholdRule::Absolute { value } => value,
            ThresholdRule::Relative { fraction } => fraction * max_score,
        }
    }
}

pub fn binarize2(scores: &Array2<f64>, rule: ThresholdRule) -> Array2<u8> {
    let max = scores.iter().cloned().fold(0.0f64, f64::max);
    let cut = rule.cutoff(max);
    scores.mapv(|v| u8::from(v > cut))
}

pub fn binarize3(scores: &Array3<f64>, rule: ThresholdRule) -> Array3<u8> {
    let max = scores.iter().cloned().fold(0.0f64, f64::max);
    let cut = rule.cutoff(max);
    scores.mapv(|v| u8::from(v > cut))
}

/// Node-level intervention calls: (k, i) is 1 iff the flagged intervened
/// parents of i in environment k are exactly its discovered parents and
/// that set is non-empty.
pub fn node_level_calls(iv_bin: &Array3<u8>, graph_bin: &Array2<u8>) -> Array2<u8> {
    let (n, d, _) = iv_bin.dim();
    Array2::from_shape_fn((n, d), |(k, i)| {
        let mut any_parent = false;
        for j in 0..d {
            let parent = graph_bin[[j, i]] == 1;
            any_parent |= parent;
            if (iv_bin[[k, j, i]] == 1) != parent {
                return 0;
            }
        }
        u8::from(any_parent)
    })
}

/// Alignment between learned and true latent trajectories in one
/// environment. Angles are in radians, smallest first; the correlation is
/// reported only when the truth has a single latent. `undefined` marks
/// environments where a zero-variance trajectory made a quantity
/// meaningless.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvAlignment {
    pub principal_angles: Vec<f64>,
    pub best_abs_correlation: Option<f64>,
    pub undefined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub envs: Vec<EnvAlignment>,
}

/// Columns of an orthonormal basis for the column span, or None for a rank
/// zero matrix.
fn column_basis(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let svd = m.clone().svd(true, false);
    let u = svd.u.as_ref().expect("u requested");
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    if sigma_max == 0.0 {
        return None;
    }
    let keep: Vec<usize> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, s)| **s > RANK_TOL * sigma_max)
        .map(|(idx, _)| idx)
        .collect();
    Some(u.select_columns(&keep))
}

fn principal_angles(qa: &DMatrix<f64>, qb: &DMatrix<f64>) -> Vec<f64> {
    let overlap = qa.transpose() * qb;
    let svd = overlap.svd(false, false);
    let mut angles: Vec<f64> = svd
        .singular_values
        .iter()
        .map(|s| s.clamp(0.0, 1.0).acos())
        .collect();
    angles.sort_by(|a, b| a.total_cmp(b));
    angles
}

fn centered(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    out
}

/// Span alignment between learned latent trajectories (N x p x steps) and
/// true ones (N x r x steps), per environment.
pub fn latent_alignment(model_z: &Array3<f64>, true_z: &Array3<f64>) -> Result<AlignmentReport> {
    let (n, p, steps) = model_z.dim();
    let (n_true, r, steps_true) = true_z.dim();
    if p == 0 || r == 0 {
        return Err(Error::validation("latent alignment needs at least one latent on each side"));
    }
    if n != n_true || steps != steps_true {
        return Err(Error::validation(format!(
            "latent trajectories disagree: model {n}x{p}x{steps}, truth {n_true}x{r}x{steps_true}"
        )));
    }

    let mut envs = Vec::with_capacity(n);
    for k in 0..n {
        let a = DMatrix::from_fn(steps, p, |t, l| model_z[[k, l, t]]);
        let b = DMatrix::from_fn(steps, r, |t, l| true_z[[k, l, t]]);

        let basis_a = column_basis(&a);
        let basis_b = column_basis(&b);
        let (angles, mut undefined) = match (&basis_a, &basis_b) {
            (Some(qa), Some(qb)) => (principal_angles(qa, qb), false),
            _ => (Vec::new(), true),
        };

        let best_abs_correlation = if r == 1 {
            let ac = centered(&a);
            let bc = centered(&b);
            let b_norm = bc.column(0).norm();
            match (column_basis(&ac), b_norm > RANK_TOL * b.column(0).norm().max(1.0)) {
                (Some(qa), true) => {
                    let proj = qa.transpose() * (bc.column(0) / b_norm);
                    Some(proj.norm().min(1.0))
                }
                _ => {
                    undefined = true;
                    None
                }
            }
        } else {
            None
        };

        envs.push(EnvAlignment {
            principal_angles: angles,
            best_abs_correlation,
            undefined,
        });
    }
    Ok(AlignmentReport { envs })
}

/// Everything the eval command reports for one fitted model against one
/// ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub edge_scores: Vec<Vec<f64>>,
    pub edge_auroc: f64,
    pub edge_auprc: f64,
    pub adjacency_estimate: Vec<Vec<u8>>,
    pub intervention_scores: Vec<Vec<Vec<f64>>>,
    pub intervention_estimate: Vec<Vec<Vec<u8>>>,
    /// None when the mask has a single class (nothing intervened, or
    /// everything), where the ranking metric is undefined.
    pub intervention_auroc: Option<f64>,
    pub node_calls: Vec<Vec<u8>>,
    pub latent_alignment: Option<AlignmentReport>,
    pub threshold_rule: ThresholdRule,
}

/// Scores a model read-out against ground truth. `model_z` enables the
/// latent-alignment section when both sides actually have latents.
pub fn evaluate_model(
    edge_scores: &Array2<f64>,
    intervention_scores: &Array3<f64>,
    model_z: Option<&Array3<f64>>,
    truth: &GroundTruth,
    rule: ThresholdRule,
) -> Result<EvalReport> {
    let d = truth.adjacency.dim().0;
    let (n, dj, di) = truth.intervention_mask.dim();
    if edge_scores.dim() != (d, d) {
        return Err(Error::validation(format!(
            "edge scores are {:?}, truth adjacency is {d}x{d}",
            edge_scores.dim()
        )));
    }
    if intervention_scores.dim() != (n, dj, di) {
        return Err(Error::validation(format!(
            "intervention scores are {:?}, truth mask is {n}x{dj}x{di}",
            intervention_scores.dim()
        )));
    }

    let (edge_auroc, edge_auprc) = evaluate_graph(edge_scores, &truth.adjacency)?;

    let rule_used = rule;
    let adjacency_estimate = binarize2(edge_scores, rule_used);
    let intervention_estimate = binarize3(intervention_scores, rule_used);
    let node_calls = node_level_calls(&intervention_estimate, &adjacency_estimate);

    let mask_has_both = truth.intervention_mask.iter().any(|&v| v == 1)
        && truth.intervention_mask.iter().any(|&v| v == 0);
    let intervention_auroc = if mask_has_both {
        let sl = ScoredLabels::new(
            intervention_scores.iter().cloned().collect(),
            truth.intervention_mask.iter().map(|&v| v == 1).collect(),
        )?;
        Some(auroc(&sl)?)
    } else {
        None
    };

    let latent_alignment = match model_z {
        Some(z) if z.dim().1 > 0 && truth.latent_series.dim().1 > 0 => {
            let steps = z.dim().2;
            let t_total = truth.latent_series.dim().2;
            if steps + 1 != t_total {
                return Err(Error::validation(format!(
                    "model has {steps} latent steps, truth implies {}",
                    t_total.saturating_sub(1)
                )));
            }
            let true_inputs = truth.latent_series.slice(s![.., .., ..steps]).to_owned();
            Some(latent_alignment(z, &true_inputs)?)
        }
        _ => None,
    };

    Ok(EvalReport {
        edge_scores: array2_to_vec(edge_scores),
        edge_auroc,
        edge_auprc,
        adjacency_estimate: array2_to_vec(&adjacency_estimate),
        intervention_scores: array3_to_vec(intervention_scores),
        intervention_estimate: array3_to_vec(&intervention_estimate),
        intervention_auroc,
        node_calls: array2_to_vec(&node_calls),
        latent_alignment,
        threshold_rule: rule_used,
    })
}
