//! Evaluation and loss-geometry probes.
//!
//! Everything here is a read-only function of a parameter snapshot: test
//! loss/accuracy, the tracked squared gradient norm, the sharpness gap
//! (worst loss increase within a rho-ball, estimated from the ascent
//! direction plus random probes), landscape slices for plotting, and
//! plug-in estimators for the heterogeneity and gradient-noise constants
//! the convergence analysis assumes.
//!
//! The "global" objective is client-weighted: F = (1/N) sum_i F_i with
//! F_i the shard mean. Full-dataset means (no client weighting) are used
//! where no partition is in play (test evaluation, landscape grids).

use rand::Rng as _;

use crate::data::{sample_batch, DatasetHandle};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numkit::{axpy, ParamVec, RngStream};

// Rows per evaluation batch; bounds peak memory, fixed so chunked means
// are bit-reproducible.
const EVAL_CHUNK: usize = 512;

const GRAD_NORM_FLOOR: f64 = 1e-12;

/// Mean loss over a whole dataset, chunked.
pub fn dataset_loss(model: &Model, w: &ParamVec, data: &DatasetHandle) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut total = 0.0;
    let mut at = 0;
    while at < data.len() {
        let hi = (at + EVAL_CHUNK).min(data.len());
        let idx: Vec<usize> = (at..hi).collect();
        let batch = data.batch_of(&idx)?;
        total += model.loss(w, &batch)? * (hi - at) as f64;
        at = hi;
    }
    Ok(total / data.len() as f64)
}

/// Mean gradient over a whole dataset, chunked.
fn dataset_grad(model: &Model, w: &ParamVec, data: &DatasetHandle) -> Result<ParamVec> {
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut acc = vec![0.0; w.len()];
    let mut at = 0;
    while at < data.len() {
        let hi = (at + EVAL_CHUNK).min(data.len());
        let idx: Vec<usize> = (at..hi).collect();
        let batch = data.batch_of(&idx)?;
        let g = model.grad(w, &batch)?;
        let weight = (hi - at) as f64;
        for (a, gj) in acc.iter_mut().zip(g.values()) {
            *a += gj * weight;
        }
        at = hi;
    }
    let inv = 1.0 / data.len() as f64;
    for a in &mut acc {
        *a *= inv;
    }
    Ok(ParamVec::from_raw(acc))
}

/// Full-test-set mean loss and top-1 accuracy.
pub fn evaluate(model: &Model, w: &ParamVec, test_set: &DatasetHandle) -> Result<(f64, f64)> {
    let loss = dataset_loss(model, w, test_set)?;
    let mut correct = 0usize;
    let mut at = 0;
    while at < test_set.len() {
        let hi = (at + EVAL_CHUNK).min(test_set.len());
        let idx: Vec<usize> = (at..hi).collect();
        let batch = test_set.batch_of(&idx)?;
        let preds = model.predict(w, &batch)?;
        correct += preds
            .iter()
            .zip(batch.labels())
            .filter(|(p, l)| p == l)
            .count();
        at = hi;
    }
    Ok((loss, correct as f64 / test_set.len() as f64))
}

/// Client-weighted training objective `(1/N) sum_i mean_loss(shard_i)`.
pub fn global_train_loss(
    model: &Model,
    w: &ParamVec,
    data: &DatasetHandle,
    shards: &[Vec<usize>],
) -> Result<f64> {
    if shards.is_empty() {
        return Err(Error::Empty("shards"));
    }
    let mut total = 0.0;
    for shard in shards {
        let batch = data.batch_of(shard)?;
        total += model.loss(w, &batch)?;
    }
    Ok(total / shards.len() as f64)
}

/// Full-shard mean gradient of one client.
fn client_grad(model: &Model, w: &ParamVec, data: &DatasetHandle, shard: &[usize]) -> Result<ParamVec> {
    let batch = data.batch_of(shard)?;
    model.grad(w, &batch)
}

/// Squared norm of the full (all-client, full-shard) gradient
/// `||(1/N) sum_i grad F_i(w)||^2` — the per-round convergence-tracking
/// quantity.
pub fn avg_sq_grad_norm(
    model: &Model,
    w: &ParamVec,
    data: &DatasetHandle,
    shards: &[Vec<usize>],
) -> Result<f64> {
    Ok(mean_client_grad(model, w, data, shards)?.l2_norm().powi(2))
}

fn mean_client_grad(
    model: &Model,
    w: &ParamVec,
    data: &DatasetHandle,
    shards: &[Vec<usize>],
) -> Result<ParamVec> {
    if shards.is_empty() {
        return Err(Error::Empty("shards"));
    }
    let mut acc = vec![0.0; w.len()];
    for shard in shards {
        let g = client_grad(model, w, data, shard)?;
        for (a, gj) in acc.iter_mut().zip(g.values()) {
            *a += gj;
        }
    }
    let inv = 1.0 / shards.len() as f64;
    for a in &mut acc {
        *a *= inv;
    }
    Ok(ParamVec::from_raw(acc))
}

/// Estimated worst-case loss increase within a rho-ball around `w`:
/// the max over the gradient-ascent direction and `probes` random unit
/// directions, all scaled to `||delta|| = rho`. Lower-bounds the true
/// ball maximum; by construction never below the ascent-direction value.
pub fn sharpness_gap(
    model: &Model,
    w: &ParamVec,
    data: &DatasetHandle,
    rho: f64,
    probes: usize,
    stream: &RngStream,
) -> Result<f64> {
    if !(rho > 0.0) {
        return Err(Error::invalid_argument("rho", "must be > 0"));
    }
    if probes < 1 {
        return Err(Error::invalid_argument("probes", "must be >= 1"));
    }
    let base = dataset_loss(model, w, data)?;
    let mut best = f64::NEG_INFINITY;

    let g = dataset_grad(model, w, data)?;
    let g_norm = g.l2_norm();
    if g_norm >= GRAD_NORM_FLOOR {
        let probe = axpy(rho / g_norm, &g, w)?;
        best = best.max(dataset_loss(model, &probe, data)? - base);
    }

    let mut rng = stream.rng();
    for _ in 0..probes {
        let dir: Vec<f64> = (0..w.len())
            .map(|_| rng.sample(rand_distr::StandardNormal))
            .collect();
        let dir = ParamVec::from_raw(dir);
        let norm = dir.l2_norm();
        if norm < GRAD_NORM_FLOOR {
            continue;
        }
        let probe = axpy(rho / norm, &dir, w)?;
        best = best.max(dataset_loss(model, &probe, data)? - base);
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SliceMode {
    #[serde(rename = "1d")]
    OneD,
    #[serde(rename = "2d")]
    TwoD,
}

/// Loss values on a line or plane through `w`, with directions drawn
/// Gaussian and rescaled per layer to match the layer norms of `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeSlice {
    rows: usize,
    cols: usize,
    grid: Vec<f64>,
    directions: Vec<ParamVec>,
    extent: f64,
    center: ParamVec,
}

impl LandscapeSlice {
    /// 1 for a line slice, `resolution` for a plane.
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.grid[row * self.cols + col]
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn directions(&self) -> &[ParamVec] {
        &self.directions
    }

    pub fn extent(&self) -> f64 {
        self.extent
    }

    pub fn center(&self) -> &ParamVec {
        &self.center
    }

    /// Axis offsets, `resolution` evenly spaced values in [-extent, extent].
    pub fn offsets(&self) -> Vec<f64> {
        let res = self.cols;
        if res == 1 {
            return vec![0.0];
        }
        (0..res)
            .map(|i| -self.extent + 2.0 * self.extent * i as f64 / (res - 1) as f64)
            .collect()
    }
}

// Gaussian direction rescaled so each layer's norm matches that layer of
// `w` (the dense analogue of filter normalization). Layers of a zero
// model get unit norm instead so the direction cannot vanish.
fn layer_normalized_direction(model: &Model, w: &ParamVec, rng: &mut rand_chacha::ChaCha8Rng) -> ParamVec {
    let mut dir: Vec<f64> = (0..w.len())
        .map(|_| rng.sample(rand_distr::StandardNormal))
        .collect();
    for span in model.layer_spans() {
        let w_norm = l2_of(&w.values()[span.clone()]);
        let d_norm = l2_of(&dir[span.clone()]);
        if d_norm < GRAD_NORM_FLOOR {
            continue;
        }
        let target = if w_norm < GRAD_NORM_FLOOR { 1.0 } else { w_norm };
        let scale = target / d_norm;
        for v in &mut dir[span] {
            *v *= scale;
        }
    }
    ParamVec::from_raw(dir)
}

fn l2_of(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Evaluates the dataset mean loss on a grid `w + a*d1 (+ b*d2)`.
/// `resolution` must be odd so the center is a grid point.
pub fn landscape_slice(
    model: &Model,
    w: &ParamVec,
    data: &DatasetHandle,
    mode: SliceMode,
    extent: f64,
    resolution: usize,
    stream: &RngStream,
) -> Result<LandscapeSlice> {
    if !(extent > 0.0) {
        return Err(Error::invalid_argument("extent", "must be > 0"));
    }
    if resolution % 2 == 0 {
        return Err(Error::invalid_argument(
            "resolution",
            "must be odd so the center lands on the grid",
        ));
    }
    let mut rng = stream.rng();
    let d1 = layer_normalized_direction(model, w, &mut rng);
    let d2 = match mode {
        SliceMode::OneD => None,
        SliceMode::TwoD => Some(layer_normalized_direction(model, w, &mut rng)),
    };

    let offsets: Vec<f64> = if resolution == 1 {
        vec![0.0]
    } else {
        (0..resolution)
            .map(|i| -extent + 2.0 * extent * i as f64 / (resolution - 1) as f64)
            .collect()
    };

    let rows = if d2.is_some() { resolution } else { 1 };
    let mut grid = Vec::with_capacity(rows * resolution);
    for bi in 0..rows {
        let along_d2 = match &d2 {
            Some(d2) => axpy(offsets[bi], d2, w)?,
            None => w.clone(),
        };
        for &a in &offsets {
            let point = axpy(a, &d1, &along_d2)?;
            grid.push(dataset_loss(model, &point, data)?);
        }
    }

    let mut directions = vec![d1];
    if let Some(d2) = d2 {
        directions.push(d2);
    }
    Ok(LandscapeSlice {
        rows,
        cols: resolution,
        grid,
        directions,
        extent,
        center: w.clone(),
    })
}

/// Plug-in estimates for the analysis constants: client heterogeneity
/// (max over clients of `||grad F_i - grad F||^2`) and the variance of
/// normalized stochastic gradient directions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssumptionEstimates {
    pub sigma_g_sq_hat: f64,
    pub sigma_l_sq_hat: f64,
}

pub fn estimate_assumptions(
    model: &Model,
    w: &ParamVec,
    data: &DatasetHandle,
    shards: &[Vec<usize>],
    batches: usize,
    batch_size: usize,
    stream: &RngStream,
) -> Result<AssumptionEstimates> {
    if batches < 2 {
        return Err(Error::invalid_argument("batches", "must be >= 2"));
    }
    if batch_size < 1 {
        return Err(Error::invalid_argument("batch_size", "must be >= 1"));
    }
    if shards.is_empty() {
        return Err(Error::Empty("shards"));
    }
    let mean_grad = mean_client_grad(model, w, data, shards)?;

    let mut sigma_g_sq = 0.0f64;
    let mut sigma_l_sum = 0.0f64;
    let mut sigma_l_count = 0usize;
    let mut rng = stream.rng();

    for shard in shards {
        let full = client_grad(model, w, data, shard)?;
        sigma_g_sq = sigma_g_sq.max(full.sub(&mean_grad)?.l2_norm().powi(2));

        let full_norm = full.l2_norm();
        if full_norm < GRAD_NORM_FLOOR {
            continue;
        }
        let full_dir = full.scaled(1.0 / full_norm);
        for _ in 0..batches {
            let batch = sample_batch(data, shard, batch_size, &mut rng)?;
            let g = model.grad(w, &batch)?;
            let norm = g.l2_norm();
            if norm < GRAD_NORM_FLOOR {
                continue;
            }
            let dev = g.scaled(1.0 / norm).sub(&full_dir)?;
            sigma_l_sum += dev.l2_norm().powi(2);
            sigma_l_count += 1;
        }
    }
    let sigma_l_sq_hat = if sigma_l_count > 0 {
        sigma_l_sum / sigma_l_count as f64
    } else {
        0.0
    };
    Ok(AssumptionEstimates {
        sigma_g_sq_hat: sigma_g_sq,
        sigma_l_sq_hat,
    })
}
