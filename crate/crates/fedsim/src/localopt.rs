//! Client-side update rules executed between synchronizations.
//!
//! Three rules share the same step shape `w <- w - eta_l * direction`:
//!
//! - ERM: direction is the plain mini-batch gradient.
//! - SAM: ascend `rho` along the normalized gradient first, then descend
//!   using the gradient re-evaluated at the perturbed point. Both gradient
//!   evaluations use the SAME batch; that pairing is what makes the ascent
//!   a worst-case probe rather than extra noise.
//! - Scaffold: the gradient is drift-corrected by control variates
//!   `g - c_i + c_global`, with the cheap (no extra gradient) round-end
//!   control update.
//!
//! With `rho = 0` the SAM rule degenerates to ERM bit-for-bit, which the
//! engine relies on as a sanity anchor.

use rand_chacha::ChaCha8Rng;

use crate::data::{sample_batch, DatasetHandle};
use crate::error::{Error, Result};
use crate::model::{Batch, Model};
use crate::numkit::{axpy, ParamVec};

// Gradients below this norm are treated as exactly stationary; the SAM
// ascent direction g/||g|| is meaningless there.
const GRAD_NORM_FLOOR: f64 = 1e-12;

/// Which training algorithm the federation runs. FedAvg takes plain ERM
/// steps, SMRFL takes SAM steps, Scaffold adds control variates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    FedAvg,
    Smrfl,
    Scaffold,
}

impl Algorithm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::FedAvg => "fedavg",
            Algorithm::Smrfl => "smrfl",
            Algorithm::Scaffold => "scaffold",
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Step sizes and schedule knobs shared by every rule. Construct via
/// [`HyperParams::validated`] outside tests; fields are public so
/// degenerate engine tests (for example `eta_l = 0` fixed-point checks)
/// can build states the validator would reject.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperParams {
    /// Local step size (eta_l).
    pub eta_l: f64,
    /// Server step size (eta_g); 1.0 recovers plain averaging.
    pub eta_g: f64,
    /// Local steps per round (the synchronization gap E).
    pub local_steps: usize,
    /// SAM neighborhood radius; 0 disables the ascent step.
    pub rho: f64,
    /// Mini-batch size; clamped to the shard size when drawing.
    pub batch_size: usize,
    /// Per-round multiplier on eta_l (1.0 = constant schedule).
    pub lr_decay: f64,
}

impl HyperParams {
    pub fn validated(self) -> Result<Self> {
        if !(self.eta_l > 0.0) || !self.eta_l.is_finite() {
            return Err(Error::invalid_argument("eta_l", "must be > 0 and finite"));
        }
        if !(self.eta_g > 0.0) || !self.eta_g.is_finite() {
            return Err(Error::invalid_argument("eta_g", "must be > 0 and finite"));
        }
        if self.local_steps < 1 {
            return Err(Error::invalid_argument("local_steps", "must be >= 1"));
        }
        if !(self.rho >= 0.0) || !self.rho.is_finite() {
            return Err(Error::invalid_argument("rho", "must be >= 0 and finite"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid_argument("batch_size", "must be >= 1"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::invalid_argument("lr_decay", "must be in (0, 1]"));
        }
        Ok(self)
    }

    /// Hyperparameters as of communication round `r`: eta_l decayed by
    /// `lr_decay^r`, everything else unchanged.
    pub fn at_round(&self, round: u64) -> HyperParams {
        HyperParams {
            eta_l: self.eta_l * self.lr_decay.powi(round as i32),
            ..*self
        }
    }
}

/// Per-client state owned by the federation engine: shard indices plus the
/// Scaffold control variate when that rule is active.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub client_id: u64,
    pub shard: Vec<usize>,
    pub control: Option<ParamVec>,
}

impl ClientState {
    pub fn new(client_id: u64, shard: Vec<usize>) -> Self {
        ClientState {
            client_id,
            shard,
            control: None,
        }
    }
}

/// Which update rule [`local_pass`] applies at each step.
#[derive(Debug, Clone, Copy)]
pub enum LocalRule<'a> {
    Erm,
    Sam,
    Scaffold {
        c_i: &'a ParamVec,
        c_global: &'a ParamVec,
    },
}

/// The ascent half of SAM: `w + rho * g / ||g||`. Returns `w` unchanged
/// when `rho = 0` or the gradient is numerically stationary.
pub fn sam_ascent(model: &Model, w: &ParamVec, batch: &Batch, rho: f64) -> Result<ParamVec> {
    if !(rho >= 0.0) {
        return Err(Error::invalid_argument("rho", "must be >= 0"));
    }
    if rho == 0.0 {
        return Ok(w.clone());
    }
    let g = model.grad(w, batch)?;
    let norm = g.l2_norm();
    if norm < GRAD_NORM_FLOOR {
        return Ok(w.clone());
    }
    axpy(rho / norm, &g, w)
}

/// One SAM step: descend from `w` using the gradient taken at the ascent
/// point, same batch for both evaluations.
pub fn sam_step(model: &Model, w: &ParamVec, batch: &Batch, hp: &HyperParams) -> Result<ParamVec> {
    let ascended = sam_ascent(model, w, batch, hp.rho)?;
    let g = model.grad(&ascended, batch)?;
    axpy(-hp.eta_l, &g, w)
}

/// One plain SGD step at `eta_l`.
pub fn erm_step(model: &Model, w: &ParamVec, batch: &Batch, hp: &HyperParams) -> Result<ParamVec> {
    let g = model.grad(w, batch)?;
    axpy(-hp.eta_l, &g, w)
}

/// One drift-corrected step: `w - eta_l * (g - c_i + c_global)`.
pub fn scaffold_step(
    model: &Model,
    w: &ParamVec,
    batch: &Batch,
    hp: &HyperParams,
    c_i: &ParamVec,
    c_global: &ParamVec,
) -> Result<ParamVec> {
    if c_i.len() != w.len() || c_global.len() != w.len() {
        return Err(Error::DimensionMismatch {
            context: "control variates",
            expected: w.len(),
            got: if c_i.len() != w.len() {
                c_i.len()
            } else {
                c_global.len()
            },
        });
    }
    let g = model.grad(w, batch)?;
    let corrected: Vec<f64> = g
        .values()
        .iter()
        .zip(c_i.values())
        .zip(c_global.values())
        .map(|((gj, cij), cgj)| (gj - cij) + cgj)
        .collect();
    axpy(-hp.eta_l, &ParamVec::from_raw(corrected), w)
}

/// Round-end control-variate refresh:
/// `c_i <- c_i - c_global + (w_start - w_end) / (local_steps * eta_l)`.
/// Uses only quantities the client already has (no extra gradients).
pub fn scaffold_control_update(
    c_i: &ParamVec,
    c_global: &ParamVec,
    w_start: &ParamVec,
    w_end: &ParamVec,
    local_steps: usize,
    eta_l: f64,
) -> Result<ParamVec> {
    let d = c_i.len();
    for (name, v) in [
        ("c_global", c_global),
        ("w_start", w_start),
        ("w_end", w_end),
    ] {
        if v.len() != d {
            return Err(Error::DimensionMismatch {
                context: name,
                expected: d,
                got: v.len(),
            });
        }
    }
    if local_steps < 1 || !(eta_l > 0.0) {
        return Err(Error::invalid_argument(
            "scaffold update",
            "needs local_steps >= 1 and eta_l > 0",
        ));
    }
    let inv = 1.0 / (local_steps as f64 * eta_l);
    let out: Vec<f64> = c_i
        .values()
        .iter()
        .zip(c_global.values())
        .zip(w_start.values().iter().zip(w_end.values()))
        .map(|((ci, cg), (ws, we))| (ci - cg) + (ws - we) * inv)
        .collect();
    Ok(ParamVec::from_raw(out))
}

/// Runs one client's full local pass: exactly `hp.local_steps` batches
/// drawn in order from `rng`, one step per batch.
pub fn local_pass(
    model: &Model,
    w0: &ParamVec,
    data: &DatasetHandle,
    shard: &[usize],
    hp: &HyperParams,
    rule: LocalRule<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<ParamVec> {
    let mut w = w0.clone();
    for _ in 0..hp.local_steps {
        let batch = sample_batch(data, shard, hp.batch_size, rng)?;
        w = match rule {
            LocalRule::Erm => erm_step(model, &w, &batch, hp)?,
            LocalRule::Sam => sam_step(model, &w, &batch, hp)?,
            LocalRule::Scaffold { c_i, c_global } => {
                scaffold_step(model, &w, &batch, hp, c_i, c_global)?
            }
        };
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::model::quadratic_test_model;
    use crate::numkit::{sample_gaussian, RngStream, StreamPurpose};

    fn hp(eta_l: f64, rho: f64) -> HyperParams {
        HyperParams {
            eta_l,
            eta_g: 1.0,
            local_steps: 5,
            rho,
            batch_size: 4,
            lr_decay: 1.0,
        }
    }

    fn dummy_batch() -> Batch {
        Batch::new(vec![0.0], 1, vec![0]).unwrap()
    }

    #[test]
    fn ascent_moves_rho_along_the_gradient_direction() {
        // Quadratic with curvature 1 has g = w, so at w = (3,4) the unit
        // direction is (0.6, 0.8) and the offset is (0.3, 0.4).
        let m = quadratic_test_model(2, 1.0).unwrap();
        let w = ParamVec::new(vec![3.0, 4.0]).unwrap();
        let up = sam_ascent(&m, &w, &dummy_batch(), 0.5).unwrap();
        let eps = up.sub(&w).unwrap();
        assert!((eps.values()[0] - 0.3).abs() < 1e-12);
        assert!((eps.values()[1] - 0.4).abs() < 1e-12);
        assert!((eps.l2_norm() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_radius_or_stationary_point_leaves_w_unchanged() {
        let m = quadratic_test_model(4, 1.0).unwrap();
        let w = sample_gaussian(&RngStream::global(1, StreamPurpose::Init), 4);
        assert_eq!(sam_ascent(&m, &w, &dummy_batch(), 0.0).unwrap(), w);

        let origin = ParamVec::zeros(4);
        assert_eq!(sam_ascent(&m, &origin, &dummy_batch(), 0.5).unwrap(), origin);
        // Stationary point is also a sam_step fixed point.
        assert_eq!(
            sam_step(&m, &origin, &dummy_batch(), &hp(0.1, 0.5)).unwrap(),
            origin
        );
    }

    #[test]
    fn quadratic_ascent_closed_form() {
        let m = quadratic_test_model(10, 1.0).unwrap();
        for seed in 0..20 {
            let w = sample_gaussian(&RngStream::global(seed, StreamPurpose::Init), 10);
            let rho = 0.7;
            let up = sam_ascent(&m, &w, &dummy_batch(), rho).unwrap();
            let factor = 1.0 + rho / w.l2_norm();
            for (u, wj) in up.values().iter().zip(w.values()) {
                assert!((u - factor * wj).abs() < 1e-12 * factor.abs().max(1.0));
            }
        }
    }

    #[test]
    fn sam_step_quadratic_closed_form() {
        let m = quadratic_test_model(6, 1.0).unwrap();
        let h = hp(0.05, 0.3);
        for seed in 0..20 {
            let w = sample_gaussian(&RngStream::global(100 + seed, StreamPurpose::Init), 6);
            let next = sam_step(&m, &w, &dummy_batch(), &h).unwrap();
            let factor = 1.0 - h.eta_l * (1.0 + h.rho / w.l2_norm());
            for (n, wj) in next.values().iter().zip(w.values()) {
                assert!((n - factor * wj).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_rho_sam_is_bitwise_erm() {
        let data = synth_blobs(3, 10, 4, 0.5, &RngStream::global(2, StreamPurpose::TrainData))
            .unwrap();
        let batch = data.batch_of(&(0..12).collect::<Vec<_>>()).unwrap();
        for model in [
            Model::logistic(4, 3).unwrap(),
            Model::mlp(4, 5, 3).unwrap(),
        ] {
            let w = model.init_params(&RngStream::global(3, StreamPurpose::Init));
            let h = hp(0.1, 0.0);
            assert_eq!(
                sam_step(&model, &w, &batch, &h).unwrap(),
                erm_step(&model, &w, &batch, &h).unwrap()
            );
        }
    }

    #[test]
    fn erm_quadratic_contracts_and_bounds_displacement() {
        let m = quadratic_test_model(5, 1.0).unwrap();
        let w = sample_gaussian(&RngStream::global(4, StreamPurpose::Init), 5);
        let h = hp(0.2, 0.0);
        let next = erm_step(&m, &w, &dummy_batch(), &h).unwrap();
        for (n, wj) in next.values().iter().zip(w.values()) {
            assert!((n - 0.8 * wj).abs() < 1e-15 * wj.abs().max(1.0));
        }
        let g_norm = m.grad(&w, &dummy_batch()).unwrap().l2_norm();
        let moved = next.sub(&w).unwrap().l2_norm();
        assert!((moved - h.eta_l * g_norm).abs() < 1e-15 * moved.max(1.0));
    }

    #[test]
    fn step_composition_collapses_only_for_quadratic_dynamics() {
        let eta = 0.3;
        let fused = 2.0 * eta - eta * eta;

        let m = quadratic_test_model(4, 1.0).unwrap();
        let w = sample_gaussian(&RngStream::global(5, StreamPurpose::Init), 4);
        let two = erm_step(
            &m,
            &erm_step(&m, &w, &dummy_batch(), &hp(eta, 0.0)).unwrap(),
            &dummy_batch(),
            &hp(eta, 0.0),
        )
        .unwrap();
        let one = erm_step(&m, &w, &dummy_batch(), &hp(fused, 0.0)).unwrap();
        assert!(two.sub(&one).unwrap().l2_norm() < 1e-12);

        // Cross-entropy curvature varies along the path, so the same
        // collapse fails there.
        let data = synth_blobs(2, 8, 3, 0.4, &RngStream::global(6, StreamPurpose::TrainData))
            .unwrap();
        let batch = data.batch_of(&(0..16).collect::<Vec<_>>()).unwrap();
        let lm = Model::logistic(3, 2).unwrap();
        let w = lm
            .init_params(&RngStream::global(7, StreamPurpose::Init))
            .scaled(8.0);
        let two = erm_step(
            &lm,
            &erm_step(&lm, &w, &batch, &hp(eta, 0.0)).unwrap(),
            &batch,
            &hp(eta, 0.0),
        )
        .unwrap();
        let one = erm_step(&lm, &w, &batch, &hp(fused, 0.0)).unwrap();
        assert!(two.sub(&one).unwrap().l2_norm() > 1e-10);
    }

    #[test]
    fn scaffold_with_equal_controls_reduces_to_erm() {
        let data = synth_blobs(2, 10, 3, 0.5, &RngStream::global(8, StreamPurpose::TrainData))
            .unwrap();
        let batch = data.batch_of(&(0..10).collect::<Vec<_>>()).unwrap();
        let m = Model::logistic(3, 2).unwrap();
        let w = m.init_params(&RngStream::global(9, StreamPurpose::Init));
        let h = hp(0.1, 0.0);
        let d = m.param_count();

        // Zero controls: exact bitwise agreement.
        let zero = ParamVec::zeros(d);
        assert_eq!(
            scaffold_step(&m, &w, &batch, &h, &zero, &zero).unwrap(),
            erm_step(&m, &w, &batch, &h).unwrap()
        );

        // Equal nonzero controls cancel up to rounding.
        let c = sample_gaussian(&RngStream::global(10, StreamPurpose::Init), d);
        let with_c = scaffold_step(&m, &w, &batch, &h, &c, &c).unwrap();
        let without = erm_step(&m, &w, &batch, &h).unwrap();
        assert!(with_c.sub(&without).unwrap().l2_norm() < 1e-12);
    }

    #[test]
    fn scaffold_control_update_matches_hand_computation() {
        let c_i = ParamVec::new(vec![0.3, -0.1]).unwrap();
        let c_g = ParamVec::new(vec![0.1, 0.2]).unwrap();
        let ws = ParamVec::new(vec![1.0, 2.0]).unwrap();
        let we = ParamVec::new(vec![0.5, 2.5]).unwrap();
        let out = scaffold_control_update(&c_i, &c_g, &ws, &we, 5, 0.1).unwrap();
        // (c_i - c_g) + (ws - we) / (5 * 0.1)
        assert!((out.values()[0] - (0.2 + 1.0)).abs() < 1e-12);
        assert!((out.values()[1] - (-0.3 - 1.0)).abs() < 1e-12);

        let short = ParamVec::zeros(3);
        assert!(scaffold_control_update(&c_i, &short, &ws, &we, 5, 0.1).is_err());
        assert!(scaffold_control_update(&c_i, &c_g, &ws, &we, 0, 0.1).is_err());
    }

    #[test]
    fn sam_descent_on_quadratic_is_strictly_monotone_to_tiny_loss() {
        // With eta=0.1 and rho=1e-4 the iterate magnitude contracts by 0.9
        // and sheds an extra eta*rho per step, staying strictly monotone
        // well past the 1e-6 loss mark.
        let m = quadratic_test_model(3, 1.0).unwrap();
        let h = hp(0.1, 1e-4);
        let mut w = ParamVec::new(vec![0.6, -0.6, 0.52]).unwrap();
        let mut prev = m.loss(&w, &dummy_batch()).unwrap();
        for step in 0..80 {
            w = sam_step(&m, &w, &dummy_batch(), &h).unwrap();
            let loss = m.loss(&w, &dummy_batch()).unwrap();
            assert!(loss < prev, "loss rose at step {step}: {loss} vs {prev}");
            prev = loss;
        }
        assert!(prev < 1e-6, "final loss {prev}");
    }

    #[test]
    fn local_pass_is_the_plain_step_loop() {
        let data = synth_blobs(3, 20, 4, 0.5, &RngStream::global(11, StreamPurpose::TrainData))
            .unwrap();
        let shard: Vec<usize> = (5..45).collect();
        let m = Model::mlp(4, 5, 3).unwrap();
        let w0 = m.init_params(&RngStream::global(12, StreamPurpose::Init));
        let h = hp(0.1, 0.2);

        let stream = RngStream::new(13, StreamPurpose::BatchDraw, 2, 1);
        let mut rng = stream.rng();
        let from_pass = local_pass(&m, &w0, &data, &shard, &h, LocalRule::Sam, &mut rng).unwrap();

        let mut rng2 = stream.rng();
        let mut w = w0.clone();
        for _ in 0..h.local_steps {
            let batch = sample_batch(&data, &shard, h.batch_size, &mut rng2).unwrap();
            w = sam_step(&m, &w, &batch, &h).unwrap();
        }
        assert_eq!(from_pass, w);

        // Both generators sit at the same point afterwards: exactly E
        // batch draws were consumed.
        assert_eq!(
            sample_batch(&data, &shard, 4, &mut rng).unwrap(),
            sample_batch(&data, &shard, 4, &mut rng2).unwrap()
        );
    }

    #[test]
    fn hyperparams_validate_and_decay() {
        let good = hp(0.1, 0.3).validated().unwrap();
        assert_eq!(good.at_round(0).eta_l, 0.1);
        let decayed = HyperParams {
            lr_decay: 0.995,
            ..good
        }
        .at_round(2);
        assert!((decayed.eta_l - 0.1 * 0.995 * 0.995).abs() < 1e-15);

        assert!(HyperParams { eta_l: 0.0, ..good }.validated().is_err());
        assert!(HyperParams { eta_g: -1.0, ..good }.validated().is_err());
        assert!(HyperParams { rho: -0.1, ..good }.validated().is_err());
        assert!(HyperParams {
            local_steps: 0,
            ..good
        }
        .validated()
        .is_err());
        assert!(HyperParams {
            batch_size: 0,
            ..good
        }
        .validated()
        .is_err());
        assert!(HyperParams {
            lr_decay: 1.1,
            ..good
        }
        .validated()
        .is_err());
    }
}
