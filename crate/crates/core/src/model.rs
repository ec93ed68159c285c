//! Fitted-model serialization.
//!
//! Both solver modes persist to a single JSON document whose `mode` field
//! selects the payload. Tensors are stored as nested row-major arrays so the
//! files are readable without this crate.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{
    array2_to_vec, array3_to_vec, array4_to_vec, read_json, vec_to_array2, vec_to_array3,
    vec_to_array4, write_json,
};
use crate::error::{Error, Result};
use crate::linear::{HyperParams, LinearModel};
use crate::nonlinear::NonlinearModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode")]
pub enum ModelFile {
    #[serde(rename = "linear")]
    Linear(LinearModelFile),
    #[serde(rename = "nonlinear")]
    Nonlinear(NonlinearModelFile),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModelFile {
    pub w0: Vec<Vec<f64>>,
    pub wk: Vec<Vec<Vec<f64>>>,
    pub z: Vec<Vec<Vec<f64>>>,
    pub hyperparams: HyperParams,
    pub objective_trace_tail: Vec<f64>,
}

/// Widths of the per-target networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NonlinearDims {
    /// First-layer width of the invariant and per-environment paths.
    pub hidden_width: usize,
    /// Width of the representations the two paths emit.
    pub repr_width: usize,
    /// Hidden width of the aggregator that maps both representations to the
    /// prediction.
    pub embed_width: usize,
}

impl Default for NonlinearDims {
    fn default() -> Self {
        NonlinearDims {
            hidden_width: 16,
            repr_width: 8,
            embed_width: 8,
        }
    }
}

/// All tensors of the nonlinear model, nested per target (and per
/// environment for the env path). `inv_*` is the shared path reading
/// observed and latent inputs; `env_*` is the per-environment path reading
/// observed inputs; `agg_*` combines the two representations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonlinearModelFile {
    pub dims: NonlinearDims,
    /// d x hidden x (d+p): first layer of the invariant path.
    pub inv_first: Vec<Vec<Vec<f64>>>,
    /// d x hidden x hidden plus bias d x hidden.
    pub inv_hidden_w: Vec<Vec<Vec<f64>>>,
    pub inv_hidden_b: Vec<Vec<f64>>,
    /// d x repr x hidden plus bias d x repr.
    pub inv_out_w: Vec<Vec<Vec<f64>>>,
    pub inv_out_b: Vec<Vec<f64>>,
    /// N x d x hidden x d: first layer of the per-environment path.
    pub env_first: Vec<Vec<Vec<Vec<f64>>>>,
    /// N x d x repr x hidden plus bias N x d x repr.
    pub env_out_w: Vec<Vec<Vec<Vec<f64>>>>,
    pub env_out_b: Vec<Vec<Vec<f64>>>,
    /// d x embed x (2*repr) plus bias d x embed.
    pub agg_hidden_w: Vec<Vec<Vec<f64>>>,
    pub agg_hidden_b: Vec<Vec<f64>>,
    /// d x embed plus scalar bias per target.
    pub agg_out_w: Vec<Vec<f64>>,
    pub agg_out_b: Vec<f64>,
    pub z: Vec<Vec<Vec<f64>>>,
    pub hyperparams: HyperParams,
    pub objective_trace_tail: Vec<f64>,
}

/// Number of trailing objective values kept in the model file.
pub const TRACE_TAIL_LEN: usize = 50;

pub fn trace_tail(trace: &[f64]) -> Vec<f64> {
    let start = trace.len().saturating_sub(TRACE_TAIL_LEN);
    trace[start..].to_vec()
}

pub fn linear_to_file(model: &LinearModel, hp: &HyperParams, trace: &[f64]) -> ModelFile {
    ModelFile::Linear(LinearModelFile {
        w0: array2_to_vec(&model.w0),
        wk: array3_to_vec(&model.wk),
        z: array3_to_vec(&model.z),
        hyperparams: hp.clone(),
        objective_trace_tail: trace_tail(trace),
    })
}

pub fn linear_from_file(file: &LinearModelFile) -> Result<(LinearModel, HyperParams)> {
    let w0 = vec_to_array2(&file.w0, "w0")?;
    let wk = vec_to_array3(&file.wk, "wk")?;
    let z = vec_to_array3(&file.z, "z")?;
    let (d, cols) = w0.dim();
    if cols < d {
        return Err(Error::validation(format!(
            "w0 has {cols} columns but needs at least the {d} observed ones"
        )));
    }
    let p = cols - d;
    let (n, dk, dj) = wk.dim();
    if dk != d || dj != d {
        return Err(Error::validation(format!(
            "wk is {n}x{dk}x{dj}, expected NxDxD with d = {d}"
        )));
    }
    let (nz, pz, _) = z.dim();
    if nz != n || pz != p {
        return Err(Error::validation(format!(
            "z is {nz}x{pz}x_, expected {n}x{p}x(T-1)"
        )));
    }
    let model = LinearModel { w0, wk, z };
    if !model.all_finite() {
        return Err(Error::validation("model file contains non-finite weights"));
    }
    file.hyperparams.validate()?;
    Ok((model, file.hyperparams.clone()))
}

pub fn nonlinear_to_file(model: &NonlinearModel, hp: &HyperParams, trace: &[f64]) -> ModelFile {
    ModelFile::Nonlinear(NonlinearModelFile {
        dims: model.dims,
        inv_first: array3_to_vec(&model.inv_first),
        inv_hidden_w: array3_to_vec(&model.inv_hidden_w),
        inv_hidden_b: array2_to_vec(&model.inv_hidden_b),
        inv_out_w: array3_to_vec(&model.inv_out_w),
        inv_out_b: array2_to_vec(&model.inv_out_b),
        env_first: array4_to_vec(&model.env_first),
        env_out_w: array4_to_vec(&model.env_out_w),
        env_out_b: array3_to_vec(&model.env_out_b),
        agg_hidden_w: array3_to_vec(&model.agg_hidden_w),
        agg_hidden_b: array2_to_vec(&model.agg_hidden_b),
        agg_out_w: array2_to_vec(&model.agg_out_w),
        agg_out_b: model.agg_out_b.to_vec(),
        z: array3_to_vec(&model.z),
        hyperparams: hp.clone(),
        objective_trace_tail: trace_tail(trace),
    })
}

pub fn nonlinear_from_file(file: &NonlinearModelFile) -> Result<(NonlinearModel, HyperParams)> {
    file.dims.validate()?;
    let model = NonlinearModel {
        dims: file.dims,
        inv_first: vec_to_array3(&file.inv_first, "inv_first")?,
        inv_hidden_w: vec_to_array3(&file.inv_hidden_w, "inv_hidden_w")?,
        inv_hidden_b: vec_to_array2(&file.inv_hidden_b, "inv_hidden_b")?,
        inv_out_w: vec_to_array3(&file.inv_out_w, "inv_out_w")?,
        inv_out_b: vec_to_array2(&file.inv_out_b, "inv_out_b")?,
        env_first: vec_to_array4(&file.env_first, "env_first")?,
        env_out_w: vec_to_array4(&file.env_out_w, "env_out_w")?,
        env_out_b: vec_to_array3(&file.env_out_b, "env_out_b")?,
        agg_hidden_w: vec_to_array3(&file.agg_hidden_w, "agg_hidden_w")?,
        agg_hidden_b: vec_to_array2(&file.agg_hidden_b, "agg_hidden_b")?,
        agg_out_w: vec_to_array2(&file.agg_out_w, "agg_out_w")?,
        agg_out_b: ndarray::Array1::from_vec(file.agg_out_b.clone()),
        z: vec_to_array3(&file.z, "z")?,
    };
    let (h, hc, he) = (
        file.dims.hidden_width,
        file.dims.repr_width,
        file.dims.embed_width,
    );
    let (d, h_first, cols) = model.inv_first.dim();
    if h_first != h || cols < d {
        return Err(Error::validation(format!(
            "inv_first is {d}x{h_first}x{cols}, expected d x {h} x (d+p)"
        )));
    }
    let (n, de, he_first, dj) = model.env_first.dim();
    let p = cols - d;
    let ok = de == d
        && he_first == h
        && dj == d
        && model.inv_hidden_w.dim() == (d, h, h)
        && model.inv_hidden_b.dim() == (d, h)
        && model.inv_out_w.dim() == (d, hc, h)
        && model.inv_out_b.dim() == (d, hc)
        && model.env_out_w.dim() == (n, d, hc, h)
        && model.env_out_b.dim() == (n, d, hc)
        && model.agg_hidden_w.dim() == (d, he, 2 * hc)
        && model.agg_hidden_b.dim() == (d, he)
        && model.agg_out_w.dim() == (d, he)
        && model.agg_out_b.dim() == d
        && model.z.dim().0 == n
        && model.z.dim().1 == p;
    if !ok {
        return Err(Error::validation(
            "nonlinear model tensors disagree with the declared dims".to_string(),
        ));
    }
    if !model.all_finite() {
        return Err(Error::validation("model file contains non-finite weights"));
    }
    file.hyperparams.validate()?;
    Ok((model, file.hyperparams.clone()))
}

pub fn save_model(path: &Path, file: &ModelFile) -> Result<()> {
    write_json(path, file)
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    read_json(path)
}
