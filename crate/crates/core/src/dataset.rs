//! Multi-environment time-series data model and on-disk persistence.
//!
//! A dataset directory contains `manifest.json`, one `env_<k>.csv` per
//! environment (header row of variable names, then T rows by d columns),
//! and optionally `graph.json` with the generating ground truth.
//!
//! Orientation convention used everywhere: adjacency entry (row j, column i)
//! is the edge from variable j at time t to variable i at time t+1.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, Array4, ArrayView2};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// N environments of d-variable, T-step series. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiEnvDataset {
    series: Array3<f64>, // N x d x T
    var_names: Vec<String>,
}

impl MultiEnvDataset {
    pub fn new(series: Array3<f64>, var_names: Vec<String>) -> Result<Self> {
        let (n_envs, n_vars, n_steps) = series.dim();
        if n_envs < 1 || n_vars < 1 {
            return Err(Error::validation(format!(
                "dataset must have at least one environment and one variable, got {n_envs} x {n_vars}"
            )));
        }
        if n_steps < 2 {
            return Err(Error::validation(format!(
                "dataset needs at least 2 time steps, got {n_steps}"
            )));
        }
        if var_names.len() != n_vars {
            return Err(Error::validation(format!(
                "{} variable names for {n_vars} variables",
                var_names.len()
            )));
        }
        for name in &var_names {
            if name.is_empty() || name.contains(',') || name.chars().any(|c| c.is_control()) {
                return Err(Error::validation(format!(
                    "variable name {name:?} is empty or not CSV-safe"
                )));
            }
        }
        if let Some((idx, _)) = series.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::validation(format!(
                "non-finite value in series at (env {}, var {}, t {})",
                idx.0, idx.1, idx.2
            )));
        }
        Ok(MultiEnvDataset { series, var_names })
    }

    pub fn n_envs(&self) -> usize {
        self.series.dim().0
    }

    pub fn n_vars(&self) -> usize {
        self.series.dim().1
    }

    pub fn n_steps(&self) -> usize {
        self.series.dim().2
    }

    pub fn series(&self) -> &Array3<f64> {
        &self.series
    }

    /// The d x T matrix of environment k.
    pub fn env(&self, k: usize) -> ArrayView2<'_, f64> {
        self.series.index_axis(ndarray::Axis(0), k)
    }

    pub fn var_names(&self) -> &[String] {
        &self.var_names
    }

    /// Returns a copy where every (environment, variable) trajectory has
    /// sample mean 0 and sample (n-1 denominator) standard deviation 1.
    /// Constant trajectories map to all-zeros.
    pub fn standardize(&self) -> MultiEnvDataset {
        let (n_envs, n_vars, n_steps) = self.series.dim();
        let mut out = self.series.clone();
        for k in 0..n_envs {
            for i in 0..n_vars {
                let mut traj = out.slice_mut(ndarray::s![k, i, ..]);
                let mean = traj.sum() / n_steps as f64;
                let var = traj.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
                    / (n_steps - 1) as f64;
                let sd = var.sqrt();
                if sd > 0.0 {
                    traj.mapv_inplace(|v| (v - mean) / sd);
                } else {
                    traj.fill(0.0);
                }
            }
        }
        MultiEnvDataset {
            series: out,
            var_names: self.var_names.clone(),
        }
    }
}

/// Generating ground truth for a synthetic benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// d x d, entry (j, i) = 1 means edge j -> i.
    pub adjacency: Array2<u8>,
    /// Observed child indices of each latent (2 per latent by construction).
    pub latent_children: Vec<Vec<usize>>,
    /// p x d effect of latent l on observed variable i.
    pub latent_to_obs: Array2<f64>,
    /// Diagonal of the latent transition matrix, length p.
    pub latent_dynamics: Vec<f64>,
    /// N x d x d effective observed-to-observed coefficients per environment.
    pub obs_weights: Array3<f64>,
    /// N x d x d, entry (k, j, i) = 1 iff edge j -> i is intervened in env k.
    pub intervention_mask: Array3<u8>,
    /// N x p x T true latent trajectories.
    pub latent_series: Array3<f64>,
}

impl GroundTruth {
    pub fn n_vars(&self) -> usize {
        self.adjacency.dim().0
    }

    pub fn n_latents(&self) -> usize {
        self.latent_children.len()
    }

    pub fn n_envs(&self) -> usize {
        self.obs_weights.dim().0
    }

    /// Checks the structural invariants; used after loading and by the
    /// generator's own tests.
    pub fn validate(&self) -> Result<()> {
        let d = self.n_vars();
        let p = self.n_latents();
        let n = self.n_envs();
        if self.adjacency.dim() != (d, d) {
            return Err(Error::validation("adjacency must be square"));
        }
        if self.latent_to_obs.dim() != (p, d) || self.latent_dynamics.len() != p {
            return Err(Error::validation(format!(
                "latent wiring shapes inconsistent: {} children rows, {:?} latent_to_obs, {} dynamics",
                p,
                self.latent_to_obs.dim(),
                self.latent_dynamics.len()
            )));
        }
        if self.intervention_mask.dim() != (n, d, d) || self.obs_weights.dim() != (n, d, d) {
            return Err(Error::validation("per-environment weight/mask shapes inconsistent"));
        }
        if self.latent_series.dim().0 != n || self.latent_series.dim().1 != p {
            return Err(Error::validation(format!(
                "latent_series shape {:?} inconsistent with N={n}, p={p}",
                self.latent_series.dim()
            )));
        }
        if self.adjacency.iter().any(|&a| a > 1) || self.intervention_mask.iter().any(|&m| m > 1) {
            return Err(Error::validation("adjacency and intervention_mask must be 0/1"));
        }
        for (l, children) in self.latent_children.iter().enumerate() {
            for &c in children {
                if c >= d {
                    return Err(Error::validation(format!(
                        "latent {l} lists child {c} outside 0..{d}"
                    )));
                }
            }
            let mut sorted = children.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != children.len() {
                return Err(Error::validation(format!("latent {l} lists a duplicate child")));
            }
        }
        if self
            .obs_weights
            .iter()
            .chain(self.latent_to_obs.iter())
            .chain(self.latent_dynamics.iter())
            .chain(self.latent_series.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::validation("non-finite value in ground truth"));
        }

        // Mask semantics: in every environment whose mask is all-zero the
        // weights equal the invariant base; in intervened environments the
        // mask marks exactly the deviating entries.
        let base = (0..n).find(|&k| {
            self.intervention_mask
                .index_axis(ndarray::Axis(0), k)
                .iter()
                .all(|&m| m == 0)
        });
        if let Some(base_k) = base {
            let base_w = self.obs_weights.index_axis(ndarray::Axis(0), base_k);
            for k in 0..n {
                let w = self.obs_weights.index_axis(ndarray::Axis(0), k);
                let m = self.intervention_mask.index_axis(ndarray::Axis(0), k);
                for j in 0..d {
                    for i in 0..d {
                        let deviates = w[[j, i]] != base_w[[j, i]];
                        let flagged = m[[j, i]] == 1;
                        if deviates != flagged {
                            return Err(Error::validation(format!(
                                "intervention mask and weight deviation disagree at (env {k}, {j} -> {i})"
                            )));
                        }
                        if flagged && self.adjacency[[j, i]] == 0 && base_w[[j, i]] == 0.0 && w[[j, i]] == 0.0 {
                            return Err(Error::validation(format!(
                                "mask set on absent edge (env {k}, {j} -> {i})"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    n_envs: usize,
    n_vars: usize,
    n_steps: usize,
    var_names: Vec<String>,
}

/// graph.json wire format: nested row-major arrays.
#[derive(Serialize, Deserialize)]
struct GraphFile {
    adjacency: Vec<Vec<u8>>,
    latent_children: Vec<Vec<usize>>,
    latent_to_obs: Vec<Vec<f64>>,
    latent_dynamics: Vec<f64>,
    obs_weights: Vec<Vec<Vec<f64>>>,
    intervention_mask: Vec<Vec<Vec<u8>>>,
    latent_series: Vec<Vec<Vec<f64>>>,
}

pub(crate) fn array2_to_vec<T: Copy>(a: &Array2<T>) -> Vec<Vec<T>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub(crate) fn array3_to_vec<T: Copy>(a: &Array3<T>) -> Vec<Vec<Vec<T>>> {
    a.outer_iter()
        .map(|m| m.rows().into_iter().map(|r| r.to_vec()).collect())
        .collect()
}

pub(crate) fn vec_to_array2<T: Copy>(v: &[Vec<T>], what: &str) -> Result<Array2<T>> {
    let rows = v.len();
    let cols = v.first().map_or(0, |r| r.len());
    if v.iter().any(|r| r.len() != cols) {
        return Err(Error::validation(format!("{what}: ragged rows")));
    }
    let flat: Vec<T> = v.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows, cols), flat)
        .map_err(|e| Error::validation(format!("{what}: {e}")))
}

pub(crate) fn vec_to_array3<T: Copy>(v: &[Vec<Vec<T>>], what: &str) -> Result<Array3<T>> {
    let n0 = v.len();
    let n1 = v.first().map_or(0, |m| m.len());
    let n2 = v.first().and_then(|m| m.first()).map_or(0, |r| r.len());
    for m in v {
        if m.len() != n1 || m.iter().any(|r| r.len() != n2) {
            return Err(Error::validation(format!("{what}: ragged rows")));
        }
    }
    let flat: Vec<T> = v.iter().flatten().flatten().copied().collect();
    Array3::from_shape_vec((n0, n1, n2), flat)
        .map_err(|e| Error::validation(format!("{what}: {e}")))
}

pub(crate) fn array4_to_vec<T: Copy>(a: &Array4<T>) -> Vec<Vec<Vec<Vec<T>>>> {
    a.outer_iter()
        .map(|m| {
            m.outer_iter()
                .map(|p| p.rows().into_iter().map(|r| r.to_vec()).collect())
                .collect()
        })
        .collect()
}

pub(crate) fn vec_to_array4<T: Copy>(v: &[Vec<Vec<Vec<T>>>], what: &str) -> Result<Array4<T>> {
    let n0 = v.len();
    let n1 = v.first().map_or(0, |m| m.len());
    let n2 = v.first().and_then(|m| m.first()).map_or(0, |p| p.len());
    let n3 = v
        .first()
        .and_then(|m| m.first())
        .and_then(|p| p.first())
        .map_or(0, |r| r.len());
    for m in v {
        if m.len() != n1 {
            return Err(Error::validation(format!("{what}: ragged rows")));
        }
        for p in m {
            if p.len() != n2 || p.iter().any(|r| r.len() != n3) {
                return Err(Error::validation(format!("{what}: ragged rows")));
            }
        }
    }
    let flat: Vec<T> = v.iter().flatten().flatten().flatten().copied().collect();
    Array4::from_shape_vec((n0, n1, n2, n3), flat)
        .map_err(|e| Error::validation(format!("{what}: {e}")))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut buf = serde_json::to_vec_pretty(value).map_err(|e| Error::json(path, e))?;
    buf.push(b'\n');
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Writes manifest.json, env_<k>.csv per environment, and graph.json when
/// ground truth is given. Numbers are written with 17 significant digits so
/// the round trip is exact.
pub fn save_dataset(ds: &MultiEnvDataset, truth: Option<&GroundTruth>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        n_envs: ds.n_envs(),
        n_vars: ds.n_vars(),
        n_steps: ds.n_steps(),
        var_names: ds.var_names().to_vec(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;

    for k in 0..ds.n_envs() {
        let path = dir.join(format!("env_{k}.csv"));
        let env = ds.env(k);
        let mut text = String::with_capacity(ds.n_steps() * ds.n_vars() * 26);
        text.push_str(&ds.var_names().join(","));
        text.push('\n');
        for t in 0..ds.n_steps() {
            for i in 0..ds.n_vars() {
                if i > 0 {
                    text.push(',');
                }
                text.push_str(&format!("{:.16e}", env[[i, t]]));
            }
            text.push('\n');
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }

    if let Some(truth) = truth {
        let graph = GraphFile {
            adjacency: array2_to_vec(&truth.adjacency),
            latent_children: truth.latent_children.clone(),
            latent_to_obs: array2_to_vec(&truth.latent_to_obs),
            latent_dynamics: truth.latent_dynamics.clone(),
            obs_weights: array3_to_vec(&truth.obs_weights),
            intervention_mask: array3_to_vec(&truth.intervention_mask),
            latent_series: array3_to_vec(&truth.latent_series),
        };
        write_json(&dir.join("graph.json"), &graph)?;
    }
    Ok(())
}

/// Loads a dataset directory written by [`save_dataset`], validating shapes
/// against the manifest. Errors name the offending file and position.
pub fn load_dataset(dir: &Path) -> Result<MultiEnvDataset> {
    let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
    if manifest.var_names.len() != manifest.n_vars {
        return Err(Error::validation(format!(
            "manifest.json: {} var_names for n_vars = {}",
            manifest.var_names.len(),
            manifest.n_vars
        )));
    }

    let mut series = Array3::zeros((manifest.n_envs, manifest.n_vars, manifest.n_steps));
    for k in 0..manifest.n_envs {
        let path = dir.join(format!("env_{k}.csv"));
        let name = path.display().to_string();
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::validation(format!("{name}: empty file")))?;
        let header_names: Vec<&str> = header.split(',').collect();
        if header_names != manifest.var_names.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::validation(format!(
                "{name}: header does not match manifest var_names"
            )));
        }
        let mut t = 0;
        for (lineno, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            if t >= manifest.n_steps {
                return Err(Error::validation(format!(
                    "{name}: more than {} data rows",
                    manifest.n_steps
                )));
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != manifest.n_vars {
                return Err(Error::validation(format!(
                    "{name}: row {} has {} columns, manifest says {}",
                    lineno + 2,
                    cells.len(),
                    manifest.n_vars
                )));
            }
            for (i, cell) in cells.iter().enumerate() {
                let v: f64 = cell.trim().parse().map_err(|_| {
                    Error::validation(format!(
                        "{name}: non-numeric cell at row {}, column {}: {cell:?}",
                        lineno + 2,
                        i + 1
                    ))
                })?;
                if !v.is_finite() {
                    return Err(Error::validation(format!(
                        "{name}: non-finite value at row {}, column {}",
                        lineno + 2,
                        i + 1
                    )));
                }
                series[[k, i, t]] = v;
            }
            t += 1;
        }
        if t != manifest.n_steps {
            return Err(Error::validation(format!(
                "{name}: {t} data rows, manifest says {}",
                manifest.n_steps
            )));
        }
    }
    MultiEnvDataset::new(series, manifest.var_names)
}

/// Loads ground truth from a graph.json file.
pub fn load_truth(path: &Path) -> Result<GroundTruth> {
    let graph: GraphFile = read_json(path)?;
    let truth = GroundTruth {
        adjacency: vec_to_array2(&graph.adjacency, "adjacency")?,
        latent_children: graph.latent_children,
        latent_to_obs: vec_to_array2(&graph.latent_to_obs, "latent_to_obs")?,
        latent_dynamics: graph.latent_dynamics,
        obs_weights: vec_to_array3(&graph.obs_weights, "obs_weights")?,
        intervention_mask: vec_to_array3(&graph.intervention_mask, "intervention_mask")?,
        latent_series: vec_to_array3(&graph.latent_series, "latent_series")?,
    };
    truth.validate()?;
    Ok(truth)
}

/// Writes `value` as pretty JSON; shared by model and report persistence.
pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    write_json(path, value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn names(d: usize) -> Vec<String> {
        (0..d).map(|i| format!("x{i}")).collect()
    }

    fn random_dataset(n: usize, d: usize, t: usize, seed: u64) -> MultiEnvDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let series = Array3::from_shape_fn((n, d, t), |_| rng.random_range(-5.0..5.0));
        MultiEnvDataset::new(series, names(d)).unwrap()
    }

    fn tiny_truth() -> GroundTruth {
        GroundTruth {
            adjacency: array![[1u8, 1], [0, 1]],
            latent_children: vec![vec![0, 1]],
            latent_to_obs: array![[0.5, -0.4]],
            latent_dynamics: vec![0.7],
            obs_weights: Array3::from_shape_fn((2, 2, 2), |(k, j, i)| {
                if k == 1 && j == 0 && i == 1 {
                    0.9
                } else {
                    [[0.5, 0.3], [0.0, -0.6]][j][i]
                }
            }),
            intervention_mask: Array3::from_shape_fn((2, 2, 2), |(k, j, i)| {
                u8::from(k == 1 && j == 0 && i == 1)
            }),
            latent_series: Array3::from_shape_fn((2, 1, 4), |(k, _, t)| (k + t) as f64 * 0.1),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ds = random_dataset(2, 3, 10, 7);
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, None, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.var_names(), back.var_names());
        assert_eq!(ds.series(), back.series());
    }

    #[test]
    fn round_trip_preserves_truth() {
        let ds = random_dataset(2, 2, 4, 3);
        let truth = tiny_truth();
        truth.validate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, Some(&truth), dir.path()).unwrap();
        let back = load_truth(&dir.path().join("graph.json")).unwrap();
        assert_eq!(truth, back);
    }

    #[test]
    fn saving_twice_gives_identical_bytes() {
        let ds = random_dataset(1, 2, 5, 11);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        save_dataset(&ds, None, a.path()).unwrap();
        save_dataset(&ds, None, b.path()).unwrap();
        for f in ["manifest.json", "env_0.csv"] {
            assert_eq!(
                fs::read(a.path().join(f)).unwrap(),
                fs::read(b.path().join(f)).unwrap(),
                "{f} differs between identical saves"
            );
        }
    }

    #[test]
    fn column_count_mismatch_names_the_file() {
        let ds = random_dataset(1, 2, 3, 5);
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, None, dir.path()).unwrap();
        fs::write(
            dir.path().join("env_0.csv"),
            "x0,x1\n1.0,2.0,3.0\n1.0,2.0\n1.0,2.0\n",
        )
        .unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("env_0.csv"), "{err}");
        assert!(err.contains("row 2"), "{err}");
    }

    #[test]
    fn non_numeric_cell_reports_position() {
        let ds = random_dataset(1, 2, 2, 5);
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, None, dir.path()).unwrap();
        fs::write(dir.path().join("env_0.csv"), "x0,x1\n1.0,2.0\n1.0,oops\n").unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("row 3") && err.contains("column 2"), "{err}");
    }

    #[test]
    fn missing_manifest_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn standardize_zscores_each_trajectory() {
        let series = Array3::from_shape_vec((1, 1, 3), vec![1.0, 2.0, 3.0]).unwrap();
        let ds = MultiEnvDataset::new(series, names(1)).unwrap();
        let z = ds.standardize();
        let vals: Vec<f64> = z.series().iter().copied().collect();
        assert!((vals[0] + 1.0).abs() < 1e-15);
        assert!(vals[1].abs() < 1e-15);
        assert!((vals[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn standardize_maps_constant_to_zero() {
        let series = Array3::from_elem((1, 1, 3), 5.0);
        let ds = MultiEnvDataset::new(series, names(1)).unwrap();
        let z = ds.standardize();
        assert!(z.series().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn standardize_recenters_random_data() {
        let ds = random_dataset(3, 5, 100, 13);
        let z = ds.standardize();
        for k in 0..3 {
            for i in 0..5 {
                let traj = z.series().slice(ndarray::s![k, i, ..]);
                let mean = traj.sum() / 100.0;
                let var = traj.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 99.0;
                assert!(mean.abs() < 1e-12);
                assert!((var - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn truth_validation_rejects_mask_weight_disagreement() {
        let mut truth = tiny_truth();
        truth.intervention_mask[[1, 0, 1]] = 0;
        let err = truth.validate().unwrap_err().to_string();
        assert!(err.contains("disagree"), "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn round_trip_arbitrary_small_datasets(
            n in 1usize..3, d in 1usize..4, t in 2usize..6, seed in 0u64..1000
        ) {
            let ds = random_dataset(n, d, t, seed);
            let dir = tempfile::tempdir().unwrap();
            save_dataset(&ds, None, dir.path()).unwrap();
            let back = load_dataset(dir.path()).unwrap();
            prop_assert_eq!(ds.series(), back.series());
        }

        #[test]
        fn standardize_is_idempotent(seed in 0u64..1000) {
            let ds = random_dataset(2, 3, 20, seed);
            let once = ds.standardize();
            let twice = once.standardize();
            for (a, b) in once.series().iter().zip(twice.series().iter()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
