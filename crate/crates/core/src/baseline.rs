//! Lasso-penalized VAR(1) baseline, pooled over environments.
//!
//! This is the comparison method: it sees the concatenated data of all
//! environments and knows nothing about interventions or latents, so it
//! recovers the pooled autoregressive structure. Solved by cyclic
//! coordinate descent on the standardized series.

use ndarray::Array2;

use crate::dataset::MultiEnvDataset;
use crate::prox::soft_threshold;

const CONVERGE_TOL: f64 = 1e-8;
const MAX_SWEEPS: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineModel {
    /// coef[target i][source j], pooled across environments.
    pub coef: Array2<f64>,
    pub lambda: f64,
}

/// Pooled second moments: gram[j][m] = sum over (env, t) of x_j x_m at input
/// positions, cross[i][j] = sum of x_i(t+1) x_j(t).
fn pooled_moments(ds: &MultiEnvDataset) -> (Array2<f64>, Array2<f64>) {
    let (n, d, t) = ds.series().dim();
    let x = ds.series();
    let mut gram = Array2::zeros((d, d));
    let mut cross = Array2::zeros((d, d));
    for k in 0..n {
        for t_pos in 0..t - 1 {
            for j in 0..d {
                let xj = x[[k, j, t_pos]];
                for m in 0..=j {
                    gram[[j, m]] += xj * x[[k, m, t_pos]];
                }
                for i in 0..d {
                    cross[[i, j]] += x[[k, i, t_pos + 1]] * xj;
                }
            }
        }
    }
    for j in 0..d {
        for m in 0..j {
            gram[[m, j]] = gram[[j, m]];
        }
    }
    (gram, cross)
}

fn lasso_objective(ds: &MultiEnvDataset, coef: &Array2<f64>, lambda: f64) -> f64 {
    let (n, d, t) = ds.series().dim();
    let x = ds.series();
    let mut sse = 0.0;
    for k in 0..n {
        for t_pos in 0..t - 1 {
            for i in 0..d {
                let mut pred = 0.0;
                for j in 0..d {
                    pred += coef[[i, j]] * x[[k, j, t_pos]];
                }
                let r = pred - x[[k, i, t_pos + 1]];
                sse += r * r;
            }
        }
    }
    sse + lambda * coef.iter().map(|v| v.abs()).sum::<f64>()
}

fn fit_traced(ds: &MultiEnvDataset, lambda: f64) -> (BaselineModel, Vec<f64>) {
    let d = ds.series().dim().1;
    let (gram, cross) = pooled_moments(ds);
    let mut coef: Array2<f64> = Array2::zeros((d, d));
    let mut objectives = vec![lasso_objective(ds, &coef, lambda)];

    for _ in 0..MAX_SWEEPS {
        let mut max_change = 0.0f64;
        for i in 0..d {
            for j in 0..d {
                if gram[[j, j]] <= 1e-12 {
                    coef[[i, j]] = 0.0;
                    continue;
                }
                let mut partial = cross[[i, j]];
                for m in 0..d {
                    if m != j {
                        partial -= gram[[j, m]] * coef[[i, m]];
                    }
                }
                let updated = soft_threshold(partial, lambda / 2.0) / gram[[j, j]];
                max_change = max_change.max((updated - coef[[i, j]]).abs());
                coef[[i, j]] = updated;
            }
        }
        objectives.push(lasso_objective(ds, &coef, lambda));
        if max_change < CONVERGE_TOL {
            break;
        }
    }

    (BaselineModel { coef, lambda }, objectives)
}

/// Minimizes the pooled squared error plus lambda times the entrywise l1
/// norm of the coefficient matrix.
pub fn fit_var_lasso(ds: &MultiEnvDataset, lambda: f64) -> BaselineModel {
    fit_traced(ds, lambda).0
}

/// Edge scores at (source, target): coefficient magnitudes.
pub fn baseline_edge_scores(model: &BaselineModel) -> Array2<f64> {
    let d = model.coef.dim().0;
    Array2::from_shape_fn((d, d), |(j, i)| model.coef[[i, j]].abs())
}

/// Default baseline penalty for a dataset: keeps shrinkage proportional to
/// the pooled sample size, mirroring how the main solver's penalty scales.
pub fn default_lambda(ds: &MultiEnvDataset) -> f64 {
    let (n, _, t) = ds.series().dim();
    0.1 * (n * (t - 1)) as f64
}
