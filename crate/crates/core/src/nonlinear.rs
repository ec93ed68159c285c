//! Nonlinear invariant-plus-deviation solver.
//!
//! Each target i is predicted by a small network pair: a shared path
//! reading observed and latent inputs through a first layer whose columns
//! play the role of the linear w0 columns, and a per-environment path
//! reading observed inputs through a first layer whose columns play the
//! role of the wk columns. Both paths emit a fixed-width representation;
//! a per-target aggregator maps the concatenated pair to the scalar
//! prediction. Sparsity is imposed only on first-layer input columns,
//! grouped exactly like the linear edge groups (shared column plus all
//! environment columns per observed source; shared column alone per latent
//! source), so a zero group severs the input variable from the target in
//! every layer above it. Deeper layers carry a small ridge instead.
//!
//! Gradients are hand-derived reverse-mode and oracle-checked; the fit is
//! proximal gradient descent with a fixed base step and halving on
//! objective increase.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayViewMut1, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::dataset::MultiEnvDataset;
use crate::error::{Error, Result};
use crate::linear::{init_latent_trajectories, HyperParams};
use crate::model::NonlinearDims;

/// Negative-side slope of the first-layer and hidden-layer activation in
/// both network paths; matches the benchmark generator's mechanism class.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Ridge weight on the deep layers (everything above the penalized first
/// layers). The group penalties only reach the first layers, so the deep
/// stacks need mild norm control of their own.
pub const RIDGE_DECAY: f64 = 1e-4;

/// Base gradient step. Halved within an iteration whenever the objective
/// would increase, recovering toward the base afterwards.
pub const BASE_STEP: f64 = 1e-3;

#[inline]
fn lrelu(v: f64) -> f64 {
    if v >= 0.0 {
        v
    } else {
        LEAKY_SLOPE * v
    }
}

#[inline]
fn lrelu_deriv(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// All weights of the per-target networks plus the latent trajectories.
///
/// Tensor layout (d targets, N environments, p latents, t_in = T-1):
/// `inv_first[i]` is hidden x (d+p) over the stacked observed-and-latent
/// input; `env_first[k][i]` is hidden x d over the observed input. Neither
/// first layer has a bias, so a zero input column contributes nothing
/// anywhere downstream. `inv_hidden_*` and `inv_out_*` finish the shared
/// path at `repr_width`; `env_out_*` finishes the environment path at the
/// same width; `agg_*` maps the concatenation (environment representation
/// first) through one tanh layer to the scalar prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearModel {
    pub dims: NonlinearDims,
    /// d x hidden x (d+p).
    pub inv_first: Array3<f64>,
    /// d x hidden x hidden.
    pub inv_hidden_w: Array3<f64>,
    /// d x hidden.
    pub inv_hidden_b: Array2<f64>,
    /// d x repr x hidden.
    pub inv_out_w: Array3<f64>,
    /// d x repr.
    pub inv_out_b: Array2<f64>,
    /// N x d x hidden x d.
    pub env_first: Array4<f64>,
    /// N x d x repr x hidden.
    pub env_out_w: Array4<f64>,
    /// N x d x repr.
    pub env_out_b: Array3<f64>,
    /// d x embed x (2 * repr).
    pub agg_hidden_w: Array3<f64>,
    /// d x embed.
    pub agg_hidden_b: Array2<f64>,
    /// d x embed.
    pub agg_out_w: Array2<f64>,
    /// d.
    pub agg_out_b: Array1<f64>,
    /// N x p x (T-1).
    pub z: Array3<f64>,
}

impl NonlinearModel {
    pub fn zeros(
        n_envs: usize,
        n_vars: usize,
        n_latents: usize,
        t_in: usize,
        dims: NonlinearDims,
    ) -> Self {
        let (h, hc, he) = (dims.hidden_width, dims.repr_width, dims.embed_width);
        NonlinearModel {
            dims,
            inv_first: Array3::zeros((n_vars, h, n_vars + n_latents)),
            inv_hidden_w: Array3::zeros((n_vars, h, h)),
            inv_hidden_b: Array2::zeros((n_vars, h)),
            inv_out_w: Array3::zeros((n_vars, hc, h)),
            inv_out_b: Array2::zeros((n_vars, hc)),
            env_first: Array4::zeros((n_envs, n_vars, h, n_vars)),
            env_out_w: Array4::zeros((n_envs, n_vars, hc, h)),
            env_out_b: Array3::zeros((n_envs, n_vars, hc)),
            agg_hidden_w: Array3::zeros((n_vars, he, 2 * hc)),
            agg_hidden_b: Array2::zeros((n_vars, he)),
            agg_out_w: Array2::zeros((n_vars, he)),
            agg_out_b: Array1::zeros(n_vars),
            z: Array3::zeros((n_envs, n_latents, t_in)),
        }
    }

    pub fn n_vars(&self) -> usize {
        self.inv_first.dim().0
    }

    pub fn n_latents(&self) -> usize {
        self.inv_first.dim().2 - self.inv_first.dim().0
    }

    pub fn n_envs(&self) -> usize {
        self.env_first.dim().0
    }

    pub fn t_in(&self) -> usize {
        self.z.dim().2
    }

    fn check_shapes(&self, ds: &MultiEnvDataset) -> Result<()> {
        let (n, d, t) = ds.series().dim();
        let (h, hc, he) = (
            self.dims.hidden_width,
            self.dims.repr_width,
            self.dims.embed_width,
        );
        let p = self.z.dim().1;
        let ok = self.inv_first.dim() == (d, h, d + p)
            && self.inv_hidden_w.dim() == (d, h, h)
            && self.inv_hidden_b.dim() == (d, h)
            && self.inv_out_w.dim() == (d, hc, h)
            && self.inv_out_b.dim() == (d, hc)
            && self.env_first.dim() == (n, d, h, d)
            && self.env_out_w.dim() == (n, d, hc, h)
            && self.env_out_b.dim() == (n, d, hc)
            && self.agg_hidden_w.dim() == (d, he, 2 * hc)
            && self.agg_hidden_b.dim() == (d, he)
            && self.agg_out_w.dim() == (d, he)
            && self.agg_out_b.dim() == d
            && self.z.dim() == (n, p, t - 1);
        if !ok {
            return Err(Error::validation(format!(
                "nonlinear model shapes do not fit dataset (N={n}, d={d}, T={t}) with dims {:?}",
                self.dims
            )));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.iter_all().all(|v| v.is_finite())
    }

    fn iter_all(&self) -> impl Iterator<Item = &f64> {
        self.inv_first
            .iter()
            .chain(self.inv_hidden_w.iter())
            .chain(self.inv_hidden_b.iter())
            .chain(self.inv_out_w.iter())
            .chain(self.inv_out_b.iter())
            .chain(self.env_first.iter())
            .chain(self.env_out_w.iter())
            .chain(self.env_out_b.iter())
            .chain(self.agg_hidden_w.iter())
            .chain(self.agg_hidden_b.iter())
            .chain(self.agg_out_w.iter())
            .chain(self.agg_out_b.iter())
            .chain(self.z.iter())
    }
}

/// Gradient container mirroring the model layout (z included).
#[derive(Debug, Clone)]
pub struct NonlinearGradients {
    pub inv_first: Array3<f64>,
    pub inv_hidden_w: Array3<f64>,
    pub inv_hidden_b: Array2<f64>,
    pub inv_out_w: Array3<f64>,
    pub inv_out_b: Array2<f64>,
    pub env_first: Array4<f64>,
    pub env_out_w: Array4<f64>,
    pub env_out_b: Array3<f64>,
    pub agg_hidden_w: Array3<f64>,
    pub agg_hidden_b: Array2<f64>,
    pub agg_out_w: Array2<f64>,
    pub agg_out_b: Array1<f64>,
    pub z: Array3<f64>,
}

impl NonlinearGradients {
    fn zeros_like(model: &NonlinearModel) -> Self {
        NonlinearGradients {
            inv_first: Array3::zeros(model.inv_first.raw_dim()),
            inv_hidden_w: Array3::zeros(model.inv_hidden_w.raw_dim()),
            inv_hidden_b: Array2::zeros(model.inv_hidden_b.raw_dim()),
            inv_out_w: Array3::zeros(model.inv_out_w.raw_dim()),
            inv_out_b: Array2::zeros(model.inv_out_b.raw_dim()),
            env_first: Array4::zeros(model.env_first.raw_dim()),
            env_out_w: Array4::zeros(model.env_out_w.raw_dim()),
            env_out_b: Array3::zeros(model.env_out_b.raw_dim()),
            agg_hidden_w: Array3::zeros(model.agg_hidden_w.raw_dim()),
            agg_hidden_b: Array2::zeros(model.agg_hidden_b.raw_dim()),
            agg_out_w: Array2::zeros(model.agg_out_w.raw_dim()),
            agg_out_b: Array1::zeros(model.agg_out_b.raw_dim()),
            z: Array3::zeros(model.z.raw_dim()),
        }
    }
}

/// Stacked input for one environment: rows 0..d are the observed series at
/// input positions, rows d.. are the latent trajectories.
fn stacked_inputs(model: &NonlinearModel, ds: &MultiEnvDataset, k: usize) -> Array2<f64> {
    let (_, d, t) = ds.series().dim();
    let p = model.z.dim().1;
    let t_in = t - 1;
    let mut p_mat = Array2::zeros((d + p, t_in));
    p_mat
        .slice_mut(s![0..d, ..])
        .assign(&ds.series().slice(s![k, .., 0..t_in]));
    p_mat.slice_mut(s![d.., ..]).assign(&model.z.slice(s![k, .., ..]));
    p_mat
}

/// Forward activations of one (environment, target) pair over all input
/// positions; every matrix is width t_in.
struct PathCache {
    pre1: Array2<f64>,
    act1: Array2<f64>,
    pre2: Array2<f64>,
    act2: Array2<f64>,
    c_repr: Array2<f64>,
    pre_env: Array2<f64>,
    act_env: Array2<f64>,
    h_repr: Array2<f64>,
    v_tanh: Array2<f64>,
    pred: Array1<f64>,
}

fn add_bias_col(mut m: Array2<f64>, b: ndarray::ArrayView1<f64>) -> Array2<f64> {
    m += &b.insert_axis(Axis(1));
    m
}

fn forward_target(
    model: &NonlinearModel,
    k: usize,
    i: usize,
    p_mat: &Array2<f64>,
) -> PathCache {
    let d = model.n_vars();
    let hc = model.dims.repr_width;
    let x_mat = p_mat.slice(s![0..d, ..]);

    let pre1 = model.inv_first.slice(s![i, .., ..]).dot(p_mat);
    let act1 = pre1.mapv(lrelu);
    let pre2 = add_bias_col(
        model.inv_hidden_w.slice(s![i, .., ..]).dot(&act1),
        model.inv_hidden_b.slice(s![i, ..]),
    );
    let act2 = pre2.mapv(lrelu);
    let c_repr = add_bias_col(
        model.inv_out_w.slice(s![i, .., ..]).dot(&act2),
        model.inv_out_b.slice(s![i, ..]),
    );

    let pre_env = model.env_first.slice(s![k, i, .., ..]).dot(&x_mat);
    let act_env = pre_env.mapv(lrelu);
    let h_repr = add_bias_col(
        model.env_out_w.slice(s![k, i, .., ..]).dot(&act_env),
        model.env_out_b.slice(s![k, i, ..]),
    );

    // Aggregator input is (H, C); the first repr columns of agg_hidden_w
    // read H, the rest read C.
    let w_h = model.agg_hidden_w.slice(s![i, .., 0..hc]);
    let w_c = model.agg_hidden_w.slice(s![i, .., hc..]);
    let pre_agg = add_bias_col(
        w_h.dot(&h_repr) + w_c.dot(&c_repr),
        model.agg_hidden_b.slice(s![i, ..]),
    );
    let v_tanh = pre_agg.mapv(f64::tanh);
    let pred = model.agg_out_w.slice(s![i, ..]).dot(&v_tanh) + model.agg_out_b[i];

    PathCache {
        pre1,
        act1,
        pre2,
        act2,
        c_repr,
        pre_env,
        act_env,
        h_repr,
        v_tanh,
        pred,
    }
}

/// Model predictions at every (environment, target, input position).
pub fn predictions(model: &NonlinearModel, ds: &MultiEnvDataset) -> Result<Array3<f64>> {
    model.check_shapes(ds)?;
    let (n, d, t) = ds.series().dim();
    let mut out = Array3::zeros((n, d, t - 1));
    for k in 0..n {
        let p_mat = stacked_inputs(model, ds, k);
        for i in 0..d {
            let cache = forward_target(model, k, i, &p_mat);
            out.slice_mut(s![k, i, ..]).assign(&cache.pred);
        }
    }
    Ok(out)
}

/// Squared-error part of the objective.
pub fn smooth_loss(model: &NonlinearModel, ds: &MultiEnvDataset) -> Result<f64> {
    let preds = predictions(model, ds)?;
    let (n, d, t) = ds.series().dim();
    let x = ds.series();
    let mut sse = 0.0;
    for k in 0..n {
        for i in 0..d {
            for tp in 0..t - 1 {
                let r = preds[[k, i, tp]] - x[[k, i, tp + 1]];
                sse += r * r;
            }
        }
    }
    Ok(sse)
}

/// Group penalties: scaled latent-trajectory norms, outer norms over each
/// input group (shared first-layer column joined with all environment
/// first-layer columns; shared column alone for latent inputs), and inner
/// norms over each environment column. Deep layers are not penalized here;
/// see [`ridge_penalty`].
pub fn penalty(model: &NonlinearModel, hp: &HyperParams) -> f64 {
    let d = model.n_vars();
    let p = model.n_latents();
    let n = model.n_envs();
    let t_in = model.t_in() as f64;

    let mut pen_z = 0.0;
    for k in 0..n {
        for l in 0..p {
            let norm_sq: f64 = model.z.slice(s![k, l, ..]).iter().map(|v| v * v).sum();
            pen_z += (norm_sq / t_in).sqrt();
        }
    }

    let mut outer = 0.0;
    let mut inner = 0.0;
    for i in 0..d {
        for j in 0..d {
            let mut group_sq: f64 = model
                .inv_first
                .slice(s![i, .., j])
                .iter()
                .map(|v| v * v)
                .sum();
            for k in 0..n {
                let col_sq: f64 = model
                    .env_first
                    .slice(s![k, i, .., j])
                    .iter()
                    .map(|v| v * v)
                    .sum();
                inner += col_sq.sqrt();
                group_sq += col_sq;
            }
            outer += group_sq.sqrt();
        }
        for l in 0..p {
            let col_sq: f64 = model
                .inv_first
                .slice(s![i, .., d + l])
                .iter()
                .map(|v| v * v)
                .sum();
            outer += col_sq.sqrt();
        }
    }

    hp.lambda_z * pen_z + hp.lambda_w * ((1.0 - hp.alpha) * outer + hp.alpha * inner)
}

/// Ridge term over the deep-layer weight matrices (biases excluded).
pub fn ridge_penalty(model: &NonlinearModel) -> f64 {
    let sq: f64 = model
        .inv_hidden_w
        .iter()
        .chain(model.inv_out_w.iter())
        .chain(model.env_out_w.iter())
        .chain(model.agg_hidden_w.iter())
        .chain(model.agg_out_w.iter())
        .map(|v| v * v)
        .sum();
    RIDGE_DECAY * sq
}

/// Full objective value: squared error plus ridge plus group penalties.
pub fn objective(model: &NonlinearModel, ds: &MultiEnvDataset, hp: &HyperParams) -> Result<f64> {
    Ok(smooth_loss(model, ds)? + ridge_penalty(model) + penalty(model, hp))
}

/// Exact reverse-mode gradient of the squared-error term alone; the ridge
/// is handled in the descent step and the group penalties by the prox.
pub fn smooth_gradient(model: &NonlinearModel, ds: &MultiEnvDataset) -> Result<NonlinearGradients> {
    Ok(gradient_with_loss(model, ds)?.0)
}

/// Gradient of the squared-error term together with its value; one shared
/// forward pass feeds both.
fn gradient_with_loss(
    model: &NonlinearModel,
    ds: &MultiEnvDataset,
) -> Result<(NonlinearGradients, f64)> {
    model.check_shapes(ds)?;
    let (n, d, t) = ds.series().dim();
    let t_in = t - 1;
    let hc = model.dims.repr_width;
    let x = ds.series();

    let mut g = NonlinearGradients::zeros_like(model);
    let mut sse = 0.0;

    for k in 0..n {
        let p_mat = stacked_inputs(model, ds, k);
        let x_mat = p_mat.slice(s![0..d, ..]).to_owned();
        for i in 0..d {
            let cache = forward_target(model, k, i, &p_mat);

            // d(SSE)/d(pred), one entry per input position.
            let mut d_pred = Array1::zeros(t_in);
            for tp in 0..t_in {
                let r = cache.pred[tp] - x[[k, i, tp + 1]];
                sse += r * r;
                d_pred[tp] = 2.0 * r;
            }

            // Aggregator: d pre_agg = (agg_out_w outer d_pred) * (1 - v^2).
            let mut d_pre = Array2::zeros(cache.v_tanh.raw_dim());
            for (e, mut row) in d_pre.rows_mut().into_iter().enumerate() {
                let w = model.agg_out_w[[i, e]];
                for tp in 0..t_in {
                    let v = cache.v_tanh[[e, tp]];
                    row[tp] = w * d_pred[tp] * (1.0 - v * v);
                }
            }

            g.agg_out_w
                .slice_mut(s![i, ..])
                .zip_mut_with(&cache.v_tanh.dot(&d_pred), |a, b| *a += b);
            g.agg_out_b[i] += d_pred.sum();
            g.agg_hidden_b
                .slice_mut(s![i, ..])
                .zip_mut_with(&d_pre.sum_axis(Axis(1)), |a, b| *a += b);
            g.agg_hidden_w
                .slice_mut(s![i, .., 0..hc])
                .zip_mut_with(&d_pre.dot(&cache.h_repr.t()), |a, b| *a += b);
            g.agg_hidden_w
                .slice_mut(s![i, .., hc..])
                .zip_mut_with(&d_pre.dot(&cache.c_repr.t()), |a, b| *a += b);

            let w_h = model.agg_hidden_w.slice(s![i, .., 0..hc]);
            let w_c = model.agg_hidden_w.slice(s![i, .., hc..]);
            let d_h = w_h.t().dot(&d_pre);
            let d_c = w_c.t().dot(&d_pre);

            // Environment path.
            let mut d_pre_env = model.env_out_w.slice(s![k, i, .., ..]).t().dot(&d_h);
            d_pre_env.zip_mut_with(&cache.pre_env, |gv, &pre| *gv *= lrelu_deriv(pre));
            g.env_out_w
                .slice_mut(s![k, i, .., ..])
                .zip_mut_with(&d_h.dot(&cache.act_env.t()), |a, b| *a += b);
            g.env_out_b
                .slice_mut(s![k, i, ..])
                .zip_mut_with(&d_h.sum_axis(Axis(1)), |a, b| *a += b);
            g.env_first
                .slice_mut(s![k, i, .., ..])
                .zip_mut_with(&d_pre_env.dot(&x_mat.t()), |a, b| *a += b);

            // Shared path.
            let mut d_pre2 = model.inv_out_w.slice(s![i, .., ..]).t().dot(&d_c);
            d_pre2.zip_mut_with(&cache.pre2, |gv, &pre| *gv *= lrelu_deriv(pre));
            g.inv_out_w
                .slice_mut(s![i, .., ..])
                .zip_mut_with(&d_c.dot(&cache.act2.t()), |a, b| *a += b);
            g.inv_out_b
                .slice_mut(s![i, ..])
                .zip_mut_with(&d_c.sum_axis(Axis(1)), |a, b| *a += b);

            let mut d_pre1 = model.inv_hidden_w.slice(s![i, .., ..]).t().dot(&d_pre2);
            d_pre1.zip_mut_with(&cache.pre1, |gv, &pre| *gv *= lrelu_deriv(pre));
            g.inv_hidden_w
                .slice_mut(s![i, .., ..])
                .zip_mut_with(&d_pre2.dot(&cache.act1.t()), |a, b| *a += b);
            g.inv_hidden_b
                .slice_mut(s![i, ..])
                .zip_mut_with(&d_pre2.sum_axis(Axis(1)), |a, b| *a += b);
            g.inv_first
                .slice_mut(s![i, .., ..])
                .zip_mut_with(&d_pre1.dot(&p_mat.t()), |a, b| *a += b);

            // Latent inputs feed only the shared path.
            let d_inputs = model.inv_first.slice(s![i, .., ..]).t().dot(&d_pre1);
            g.z.slice_mut(s![k, .., ..])
                .zip_mut_with(&d_inputs.slice(s![d.., ..]), |a, b| *a += b);
        }
    }
    Ok((g, sse))
}

fn scale_or_zero(mut col: ArrayViewMut1<f64>, thr: f64) {
    let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= thr {
        col.fill(0.0);
    } else {
        let scale = 1.0 - thr / norm;
        col.mapv_inplace(|v| v * scale);
    }
}

/// Exact prox of the total group penalty with parameter `step`, leaf to
/// root: block thresholds on each environment first-layer column, then on
/// each concatenated input group (shared column alone for latent inputs),
/// then on each latent trajectory. Deep layers pass through untouched.
pub fn prox_hierarchical(model: &NonlinearModel, step: f64, hp: &HyperParams) -> NonlinearModel {
    let mut out = model.clone();
    prox_hierarchical_inplace(&mut out, step, hp);
    out
}

fn prox_hierarchical_inplace(model: &mut NonlinearModel, step: f64, hp: &HyperParams) {
    let d = model.n_vars();
    let p = model.n_latents();
    let n = model.n_envs();
    let thr_inner = step * hp.lambda_w * hp.alpha;
    let thr_outer = step * hp.lambda_w * (1.0 - hp.alpha);
    let thr_z = step * hp.lambda_z / (model.t_in() as f64).sqrt();

    for i in 0..d {
        for j in 0..d {
            for k in 0..n {
                scale_or_zero(model.env_first.slice_mut(s![k, i, .., j]), thr_inner);
            }
            let mut group_sq: f64 = model
                .inv_first
                .slice(s![i, .., j])
                .iter()
                .map(|v| v * v)
                .sum();
            for k in 0..n {
                group_sq += model
                    .env_first
                    .slice(s![k, i, .., j])
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>();
            }
            let norm = group_sq.sqrt();
            if norm <= thr_outer {
                model.inv_first.slice_mut(s![i, .., j]).fill(0.0);
                for k in 0..n {
                    model.env_first.slice_mut(s![k, i, .., j]).fill(0.0);
                }
            } else {
                let scale = 1.0 - thr_outer / norm;
                model
                    .inv_first
                    .slice_mut(s![i, .., j])
                    .mapv_inplace(|v| v * scale);
                for k in 0..n {
                    model
                        .env_first
                        .slice_mut(s![k, i, .., j])
                        .mapv_inplace(|v| v * scale);
                }
            }
        }
        for l in 0..p {
            scale_or_zero(model.inv_first.slice_mut(s![i, .., d + l]), thr_outer);
        }
    }

    for k in 0..n {
        for l in 0..p {
            scale_or_zero(model.z.slice_mut(s![k, l, ..]), thr_z);
        }
    }
}

/// Applies one descent step: first layers and z move along the squared-error
/// gradient; deep layers also shed ridge mass.
fn gradient_step(model: &NonlinearModel, g: &NonlinearGradients, step: f64) -> NonlinearModel {
    let mut out = model.clone();
    let decay = 2.0 * RIDGE_DECAY;
    out.inv_first.zip_mut_with(&g.inv_first, |v, gv| *v -= step * gv);
    out.env_first.zip_mut_with(&g.env_first, |v, gv| *v -= step * gv);
    out.z.zip_mut_with(&g.z, |v, gv| *v -= step * gv);
    out.inv_hidden_w
        .zip_mut_with(&g.inv_hidden_w, |v, gv| *v -= step * (gv + decay * *v));
    out.inv_out_w
        .zip_mut_with(&g.inv_out_w, |v, gv| *v -= step * (gv + decay * *v));
    out.env_out_w
        .zip_mut_with(&g.env_out_w, |v, gv| *v -= step * (gv + decay * *v));
    out.agg_hidden_w
        .zip_mut_with(&g.agg_hidden_w, |v, gv| *v -= step * (gv + decay * *v));
    out.agg_out_w
        .zip_mut_with(&g.agg_out_w, |v, gv| *v -= step * (gv + decay * *v));
    out.inv_hidden_b.zip_mut_with(&g.inv_hidden_b, |v, gv| *v -= step * gv);
    out.inv_out_b.zip_mut_with(&g.inv_out_b, |v, gv| *v -= step * gv);
    out.env_out_b.zip_mut_with(&g.env_out_b, |v, gv| *v -= step * gv);
    out.agg_hidden_b.zip_mut_with(&g.agg_hidden_b, |v, gv| *v -= step * gv);
    out.agg_out_b.zip_mut_with(&g.agg_out_b, |v, gv| *v -= step * gv);
    out
}

fn seeded_matrix<Sh>(rng: &mut ChaCha8Rng, shape: Sh, fan_in: usize) -> ndarray::Array<f64, Sh::Dim>
where
    Sh: ndarray::ShapeBuilder,
{
    let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("valid scale");
    ndarray::Array::from_shape_simple_fn(shape, || rng.sample(normal))
}

/// Seeded start: first layers at exact zero so the prox decides which input
/// groups nucleate; deep layers at small scaled-normal weights so gradient
/// reaches the first layers immediately; biases at zero; latent
/// trajectories from the shared residual principal-component init.
fn init_model(
    ds: &MultiEnvDataset,
    hp: &HyperParams,
    dims: NonlinearDims,
    seed: u64,
) -> NonlinearModel {
    let (n, d, t) = ds.series().dim();
    let (h, hc, he) = (dims.hidden_width, dims.repr_width, dims.embed_width);
    let mut model = NonlinearModel::zeros(n, d, hp.n_latents, t - 1, dims);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model.inv_hidden_w = seeded_matrix(&mut rng, (d, h, h), h);
    model.inv_out_w = seeded_matrix(&mut rng, (d, hc, h), h);
    model.env_out_w = seeded_matrix(&mut rng, (n, d, hc, h), h);
    model.agg_hidden_w = seeded_matrix(&mut rng, (d, he, 2 * hc), 2 * hc);
    model.agg_out_w = seeded_matrix(&mut rng, (d, he), he);
    if hp.n_latents > 0 {
        init_latent_trajectories(ds, &mut model.z, &mut rng);
    }
    model
}

/// Fits the per-target networks and latent trajectories by proximal
/// gradient descent with a fixed base step ([`BASE_STEP`]): whenever a step
/// would increase the objective it is halved and retried, and it recovers
/// toward the base once steps succeed again. The objective tracked is
/// squared error plus ridge plus group penalties, so acceptance is
/// quasi-monotone on the full problem.
///
/// The dataset is expected to be standardized. Returns the fitted model and
/// the objective trace (initial value first).
pub fn fit_nonlinear(
    ds: &MultiEnvDataset,
    hp: &HyperParams,
    dims: NonlinearDims,
    seed: u64,
) -> Result<(NonlinearModel, Vec<f64>)> {
    hp.validate()?;
    dims.validate()?;
    let model = init_model(ds, hp, dims, seed);
    optimize_from(model, ds, hp)
}

/// Continues optimization from a given model state (warm start).
pub fn fit_nonlinear_from(
    ds: &MultiEnvDataset,
    hp: &HyperParams,
    start: NonlinearModel,
) -> Result<(NonlinearModel, Vec<f64>)> {
    hp.validate()?;
    start.check_shapes(ds)?;
    if start.n_latents() != hp.n_latents {
        return Err(Error::validation(format!(
            "model has {} latents but hyperparameters say {}",
            start.n_latents(),
            hp.n_latents
        )));
    }
    optimize_from(start, ds, hp)
}

fn optimize_from(
    mut model: NonlinearModel,
    ds: &MultiEnvDataset,
    hp: &HyperParams,
) -> Result<(NonlinearModel, Vec<f64>)> {
    const MIN_STEP: f64 = 1e-15;

    let (g0, f0) = gradient_with_loss(&model, ds)?;
    let mut g = g0;
    let mut obj_cur = f0 + ridge_penalty(&model) + penalty(&model, hp);
    let mut trace = Vec::with_capacity(256);
    trace.push(obj_cur);

    let mut step = BASE_STEP;
    for iter in 0..hp.max_iters {
        if iter > 0 {
            g = smooth_gradient(&model, ds)?;
        }
        step = (2.0 * step).min(BASE_STEP);

        let (cand, obj_new) = loop {
            let mut cand = gradient_step(&model, &g, step);
            prox_hierarchical_inplace(&mut cand, step, hp);
            let obj_new =
                smooth_loss(&cand, ds)? + ridge_penalty(&cand) + penalty(&cand, hp);
            if !obj_new.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite objective at iteration {iter}"
                )));
            }
            if obj_new <= obj_cur + 1e-12 * obj_cur.abs().max(1.0) {
                break (cand, obj_new);
            }
            step *= 0.5;
            if step < MIN_STEP {
                break (model.clone(), obj_cur);
            }
        };
        if step < MIN_STEP {
            break;
        }

        model = cand;
        trace.push(obj_new);
        let rel_change = (obj_cur - obj_new).abs() / obj_cur.abs().max(1.0);
        obj_cur = obj_new;
        if rel_change < hp.tol {
            break;
        }
    }

    Ok((model, trace))
}

impl NonlinearDims {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_width == 0 || self.repr_width == 0 || self.embed_width == 0 {
            return Err(Error::validation("network widths must all be positive"));
        }
        Ok(())
    }
}

/// Norm of the whole first-layer group for input j of target i: shared
/// column joined with every environment column (observed inputs), shared
/// column alone (latent inputs, j >= d).
pub fn group_norm(model: &NonlinearModel, i: usize, j: usize) -> f64 {
    let d = model.n_vars();
    let mut sq: f64 = model.inv_first.slice(s![i, .., j]).iter().map(|v| v * v).sum();
    if j < d {
        for k in 0..model.n_envs() {
            sq += model
                .env_first
                .slice(s![k, i, .., j])
                .iter()
                .map(|v| v * v)
                .sum::<f64>();
        }
    }
    sq.sqrt()
}

/// Number of exactly-zero first-layer input groups (observed and latent).
pub fn zero_group_count(model: &NonlinearModel) -> usize {
    let d = model.n_vars();
    let p = model.n_latents();
    let mut count = 0;
    for i in 0..d {
        for j in 0..d + p {
            if group_norm(model, i, j) == 0.0 {
                count += 1;
            }
        }
    }
    count
}
