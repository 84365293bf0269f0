//! The round engine: broadcast through the downlink channel, run local
//! passes (possibly on a thread pool), collect through the uplink
//! channel, aggregate with the server step size.
//!
//! Determinism contract: every random draw comes from a stream keyed on
//! (seed, purpose, round, client), so scheduling order cannot change any
//! result. Client outcomes are collected into index order and all
//! reductions run sequentially over that order.
//!
//! Full participation, uniform 1/N weights. Clients always initialize
//! from the downlink channel OUTPUT; with a clean downlink that is the
//! global model itself, so the textbook protocol is the channels=none
//! special case. Client sampling, stragglers, and real networking are
//! out of scope.

use std::time::Instant;

use rayon::prelude::*;

use crate::channel::{ChannelReport, PerturbationChannel};
use crate::config::{DataSource, ExperimentConfig, PartitionKind};
use crate::data::{self, DatasetHandle, PartitionPlan};
use crate::error::{Error, Result};
use crate::localopt::{
    local_pass, scaffold_control_update, Algorithm, ClientState, HyperParams, LocalRule,
};
use crate::metrics;
use crate::model::Model;
use crate::numkit::{axpy, ParamVec, RngStream, StreamPurpose};

/// Any global training loss above this (or any non-finite parameter)
/// aborts the run with a divergence error. Perturbation sweeps at high
/// learning rates can blow up; fail loudly with the round index.
const DIVERGENCE_LOSS_LIMIT: f64 = 1e12;

pub struct FederationState {
    seed: u64,
    /// Total rounds R; `round` counts 0..R.
    rounds: u64,
    round: u64,
    algorithm: Algorithm,
    model: Model,
    global: ParamVec,
    clients: Vec<ClientState>,
    /// Mean of the client control variates; populated after the first
    /// Scaffold round.
    c_global: Option<ParamVec>,
    uplink: PerturbationChannel,
    downlink: PerturbationChannel,
    hp: HyperParams,
    train: DatasetHandle,
    test: DatasetHandle,
    metrics: crate::config::MetricsSpec,
    parallel: bool,
}

/// What one round produced. Metric fields are None on rounds the eval
/// stride skipped. `wall_time` is wall-clock seconds and is deliberately
/// excluded from equality so determinism tests can compare records.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: u64,
    /// Client-weighted training objective at the new global model.
    pub global_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub avg_sq_grad_norm: Option<f64>,
    pub sharpness_gap: Option<f64>,
    pub sigma_g_sq_hat: Option<f64>,
    pub sigma_l_sq_hat: Option<f64>,
    pub downlink: Vec<ChannelReport>,
    pub uplink: Vec<ChannelReport>,
    pub wall_time: f64,
}

impl PartialEq for RoundRecord {
    fn eq(&self, other: &Self) -> bool {
        self.round == other.round
            && self.global_loss == other.global_loss
            && self.test_accuracy == other.test_accuracy
            && self.avg_sq_grad_norm == other.avg_sq_grad_norm
            && self.sharpness_gap == other.sharpness_gap
            && self.sigma_g_sq_hat == other.sigma_g_sq_hat
            && self.sigma_l_sq_hat == other.sigma_l_sq_hat
            && self.downlink == other.downlink
            && self.uplink == other.uplink
    }
}

struct ClientOutcome {
    uploaded: ParamVec,
    new_control: Option<ParamVec>,
    down_report: ChannelReport,
    up_report: ChannelReport,
}

impl FederationState {
    /// Builds datasets, partition, model, and initial parameters from a
    /// validated config. Everything here draws from purpose-keyed
    /// streams, so the state is a pure function of the config.
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let hp = cfg.hyper.to_hyper().validated()?;

        let (train, test) = match cfg.dataset.source {
            DataSource::Synth => {
                let train = data::synth_blobs(
                    cfg.dataset.num_classes,
                    cfg.dataset.per_class_train,
                    cfg.dataset.input_dim,
                    cfg.dataset.spread,
                    &RngStream::global(cfg.seed, StreamPurpose::TrainData),
                )?;
                let test = data::synth_blobs(
                    cfg.dataset.num_classes,
                    cfg.dataset.per_class_test,
                    cfg.dataset.input_dim,
                    cfg.dataset.spread,
                    &RngStream::global(cfg.seed, StreamPurpose::TestData),
                )?;
                (train, test)
            }
            DataSource::Idx => {
                // validate() guarantees the four paths are present.
                let path = |p: &Option<String>| std::path::PathBuf::from(p.as_ref().unwrap());
                let train = data::load_idx(
                    &path(&cfg.dataset.train_images),
                    &path(&cfg.dataset.train_labels),
                )?
                .capped(cfg.dataset.train_cap);
                let test = data::load_idx(
                    &path(&cfg.dataset.test_images),
                    &path(&cfg.dataset.test_labels),
                )?
                .capped(cfg.dataset.test_cap);
                (train, test)
            }
        };

        let plan = match cfg.partition.kind {
            PartitionKind::Iid => data::partition_iid(
                &train,
                cfg.num_clients,
                &RngStream::global(cfg.seed, StreamPurpose::Partition),
            )?,
            PartitionKind::Dirichlet => data::partition_dirichlet(
                &train,
                cfg.num_clients,
                cfg.partition.alpha,
                &RngStream::global(cfg.seed, StreamPurpose::Partition),
            )?,
        };

        let model = cfg.build_model(train.input_dim(), train.num_classes())?;
        let global = model.init_params(&RngStream::global(cfg.seed, StreamPurpose::Init));

        Self::assemble(cfg, model, global, train, test, &plan, hp)
    }

    /// Wires together pre-built pieces. Used by [`from_config`] and by
    /// tests that need a hand-constructed setup.
    pub fn assemble(
        cfg: &ExperimentConfig,
        model: Model,
        global: ParamVec,
        train: DatasetHandle,
        test: DatasetHandle,
        plan: &PartitionPlan,
        hp: HyperParams,
    ) -> Result<Self> {
        if global.len() != model.param_count() {
            return Err(Error::DimensionMismatch {
                context: "initial global model",
                expected: model.param_count(),
                got: global.len(),
            });
        }
        plan.validate(train.len())?;
        if plan.num_shards() != cfg.num_clients {
            return Err(Error::Consistency(format!(
                "partition has {} shards for {} clients",
                plan.num_shards(),
                cfg.num_clients
            )));
        }
        let clients = plan
            .shards()
            .iter()
            .enumerate()
            .map(|(i, shard)| ClientState::new(i as u64, shard.clone()))
            .collect();
        Ok(FederationState {
            seed: cfg.seed,
            rounds: cfg.rounds,
            round: 0,
            algorithm: cfg.algorithm,
            model,
            global,
            clients,
            c_global: None,
            uplink: cfg.uplink.build(crate::channel::Direction::Uplink)?,
            downlink: cfg.downlink.build(crate::channel::Direction::Downlink)?,
            hp,
            train,
            test,
            metrics: cfg.metrics.clone(),
            parallel: cfg.parallel_clients,
        })
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn rounds_total(&self) -> u64 {
        self.rounds
    }

    pub fn global_model(&self) -> &ParamVec {
        &self.global
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn train_data(&self) -> &DatasetHandle {
        &self.train
    }

    pub fn test_data(&self) -> &DatasetHandle {
        &self.test
    }

    pub fn shards(&self) -> Vec<Vec<usize>> {
        self.clients.iter().map(|c| c.shard.clone()).collect()
    }

    fn shard_refs(&self) -> Vec<Vec<usize>> {
        self.shards()
    }

    /// Runs one client end to end: downlink, local pass, control
    /// update, uplink. Pure given the state snapshot, so clients may run
    /// on any thread.
    fn run_client(&self, client: &ClientState, hp_r: &HyperParams) -> Result<ClientOutcome> {
        let down_stream =
            RngStream::new(self.seed, StreamPurpose::Downlink, self.round, client.client_id);
        let (received, down_report) = self.downlink.perturb(&self.global, &down_stream)?;

        let zeros = ParamVec::zeros(self.global.len());
        let rule = match self.algorithm {
            Algorithm::FedAvg => LocalRule::Erm,
            Algorithm::Smrfl => LocalRule::Sam,
            Algorithm::Scaffold => LocalRule::Scaffold {
                c_i: client.control.as_ref().unwrap_or(&zeros),
                c_global: self.c_global.as_ref().unwrap_or(&zeros),
            },
        };

        let mut rng =
            RngStream::new(self.seed, StreamPurpose::BatchDraw, self.round, client.client_id)
                .rng();
        let w_end = local_pass(
            &self.model,
            &received,
            &self.train,
            &client.shard,
            hp_r,
            rule,
            &mut rng,
        )?;

        let new_control = if self.algorithm == Algorithm::Scaffold {
            Some(scaffold_control_update(
                client.control.as_ref().unwrap_or(&zeros),
                self.c_global.as_ref().unwrap_or(&zeros),
                &received,
                &w_end,
                hp_r.local_steps,
                hp_r.eta_l,
            )?)
        } else {
            None
        };

        let up_stream =
            RngStream::new(self.seed, StreamPurpose::Uplink, self.round, client.client_id);
        let (uploaded, up_report) = self.uplink.perturb(&w_end, &up_stream)?;

        Ok(ClientOutcome {
            uploaded,
            new_control,
            down_report,
            up_report,
        })
    }

    /// Executes round `self.round` and returns the advanced state plus
    /// its record.
    pub fn run_round(mut self) -> Result<(Self, RoundRecord)> {
        let record = self.advance()?;
        Ok((self, record))
    }

    /// In-place round step. On divergence the state keeps the last
    /// model written, which is always finite.
    pub fn advance(&mut self) -> Result<RoundRecord> {
        if self.round >= self.rounds {
            return Err(Error::invalid_argument(
                "round",
                format!("round {} but the run has {} rounds", self.round, self.rounds),
            ));
        }
        let started = Instant::now();
        let r = self.round;
        let hp_r = self.hp.at_round(r);

        let snapshot: &FederationState = &*self;
        let outcomes: Vec<Result<ClientOutcome>> = if snapshot.parallel && snapshot.clients.len() > 1
        {
            snapshot
                .clients
                .par_iter()
                .map(|c| snapshot.run_client(c, &hp_r))
                .collect()
        } else {
            snapshot
                .clients
                .iter()
                .map(|c| snapshot.run_client(c, &hp_r))
                .collect()
        };
        let mut uploads = Vec::with_capacity(outcomes.len());
        let mut controls = Vec::with_capacity(outcomes.len());
        let mut downlink_reports = Vec::with_capacity(outcomes.len());
        let mut uplink_reports = Vec::with_capacity(outcomes.len());
        for outcome in outcomes {
            let outcome = divergence_guard(r, outcome)?;
            uploads.push(outcome.uploaded);
            controls.push(outcome.new_control);
            downlink_reports.push(outcome.down_report);
            uplink_reports.push(outcome.up_report);
        }

        self.global = divergence_guard(r, aggregate(&uploads, &self.global, self.hp.eta_g))?;

        if self.algorithm == Algorithm::Scaffold {
            let d = self.global.len();
            let mut mean = ParamVec::zeros(d);
            for (client, control) in self.clients.iter_mut().zip(controls) {
                let control = control.expect("scaffold clients always produce a control");
                mean.add_scaled_assign(1.0, &control)?;
                client.control = Some(control);
            }
            mean.scale_assign(1.0 / self.clients.len() as f64);
            self.c_global = Some(mean);
        }

        let record = self.observe(r, downlink_reports, uplink_reports, started)?;
        self.round = r + 1;
        Ok(record)
    }

    /// Metric pass over the post-update global model, gated by the eval
    /// stride (the final round always evaluates).
    fn observe(
        &self,
        r: u64,
        downlink: Vec<ChannelReport>,
        uplink: Vec<ChannelReport>,
        started: Instant,
    ) -> Result<RoundRecord> {
        let evaluated = (r + 1) % self.metrics.eval_stride == 0 || r + 1 == self.rounds;
        let mut record = RoundRecord {
            round: r,
            global_loss: None,
            test_accuracy: None,
            avg_sq_grad_norm: None,
            sharpness_gap: None,
            sigma_g_sq_hat: None,
            sigma_l_sq_hat: None,
            downlink,
            uplink,
            wall_time: 0.0,
        };
        if evaluated {
            let shards = self.shard_refs();
            let loss = metrics::global_train_loss(&self.model, &self.global, &self.train, &shards)?;
            if !loss.is_finite() || loss > DIVERGENCE_LOSS_LIMIT {
                return Err(Error::Divergence {
                    round: r,
                    reason: format!("global training loss {loss:e} exceeds {DIVERGENCE_LOSS_LIMIT:e}"),
                });
            }
            record.global_loss = Some(loss);
            let (_, accuracy) = metrics::evaluate(&self.model, &self.global, &self.test)?;
            record.test_accuracy = Some(accuracy);
            if self.metrics.track_grad_norm {
                record.avg_sq_grad_norm = Some(metrics::avg_sq_grad_norm(
                    &self.model,
                    &self.global,
                    &self.train,
                    &shards,
                )?);
            }
            if self.metrics.sharpness_probes > 0 {
                record.sharpness_gap = Some(metrics::sharpness_gap(
                    &self.model,
                    &self.global,
                    &self.train,
                    self.metrics.sharpness_rho,
                    self.metrics.sharpness_probes,
                    &RngStream::new(self.seed, StreamPurpose::SharpnessProbe, r, 0),
                )?);
            }
            if self.metrics.assumption_batches > 0 {
                let est = metrics::estimate_assumptions(
                    &self.model,
                    &self.global,
                    &self.train,
                    &shards,
                    self.metrics.assumption_batches,
                    self.metrics.assumption_batch_size,
                    &RngStream::new(self.seed, StreamPurpose::Assumption, r, 0),
                )?;
                record.sigma_g_sq_hat = Some(est.sigma_g_sq_hat);
                record.sigma_l_sq_hat = Some(est.sigma_l_sq_hat);
            }
        }
        record.wall_time = started.elapsed().as_secs_f64();
        Ok(record)
    }
}

/// Maps non-finite-parameter failures inside the round body to a
/// divergence error carrying the round index. Dimension errors and
/// other bugs pass through untouched.
fn divergence_guard<T>(round: u64, result: Result<T>) -> Result<T> {
    result.map_err(|e| match e {
        Error::InvalidArgument { ref key, ref reason } if key == "values" => Error::Divergence {
            round,
            reason: format!("non-finite model parameter: {reason}"),
        },
        other => other,
    })
}

/// Server step: `w_prev + eta_g * mean(models - w_prev)`. With eta_g=1
/// this is plain averaging.
pub fn aggregate(models: &[ParamVec], w_prev: &ParamVec, eta_g: f64) -> Result<ParamVec> {
    if models.is_empty() {
        return Err(Error::Empty("models"));
    }
    let d = w_prev.len();
    let mut delta_sum = ParamVec::zeros(d);
    for m in models {
        if m.len() != d {
            return Err(Error::DimensionMismatch {
                context: "aggregate",
                expected: d,
                got: m.len(),
            });
        }
        delta_sum.add_scaled_assign(1.0, &m.sub(w_prev)?)?;
    }
    delta_sum.scale_assign(1.0 / models.len() as f64);
    axpy(eta_g, &delta_sum, w_prev)
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Completed,
    Diverged { round: u64, reason: String },
}

/// A finished (or aborted) experiment: every record produced before the
/// stop, the last finite global model, and how the run ended.
pub struct ExperimentOutcome {
    pub records: Vec<RoundRecord>,
    pub final_model: ParamVec,
    pub status: RunStatus,
    pub state: FederationState,
}

/// Runs R rounds from a config. Divergence is reported in the outcome
/// status (with all records up to the failing round) rather than as an
/// `Err`, so callers can still flush partial results; real errors
/// (config, IO, dimension bugs) propagate.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let mut state = FederationState::from_config(cfg)?;
    let mut records = Vec::with_capacity(cfg.rounds as usize);
    let mut status = RunStatus::Completed;
    for _ in 0..cfg.rounds {
        match state.advance() {
            Ok(record) => records.push(record),
            Err(Error::Divergence { round, reason }) => {
                status = RunStatus::Diverged { round, reason };
                break;
            }
            Err(other) => return Err(other),
        }
    }
    Ok(ExperimentOutcome {
        final_model: state.global_model().clone(),
        records,
        status,
        state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ChannelSpec, DatasetSpec, HyperSpec, ModelKind, PartitionSpec};
    use crate::data::sample_batch;
    use crate::localopt::erm_step;

    fn quick_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.rounds = 3;
        cfg.num_clients = 4;
        cfg.dataset = DatasetSpec {
            num_classes: 3,
            per_class_train: 30,
            per_class_test: 10,
            input_dim: 4,
            spread: 0.5,
            ..DatasetSpec::default()
        };
        cfg.model.kind = ModelKind::Logistic;
        cfg.hyper = HyperSpec {
            local_steps: 2,
            batch_size: 8,
            ..HyperSpec::default()
        };
        cfg
    }

    fn records_of(cfg: &ExperimentConfig) -> Vec<RoundRecord> {
        let outcome = run_experiment(cfg).unwrap();
        assert_eq!(outcome.status, RunStatus::Completed);
        outcome.records
    }

    #[test]
    fn degenerate_round_is_one_centralized_sgd_step() {
        // N=1, E=1, eta_g=1, clean channels: the protocol collapses to
        // a single SGD step on the lone client's shard.
        let mut cfg = quick_cfg();
        cfg.rounds = 1;
        cfg.num_clients = 1;
        cfg.hyper.local_steps = 1;
        cfg.hyper.lr_decay = 1.0;
        let state = FederationState::from_config(&cfg).unwrap();
        let w0 = state.global_model().clone();
        let model = state.model().clone();
        let shard = state.shards()[0].clone();
        let train = state.train_data().clone();

        let (after, _) = state.run_round().unwrap();

        let mut rng = RngStream::new(cfg.seed, StreamPurpose::BatchDraw, 0, 0).rng();
        let batch = sample_batch(&train, &shard, cfg.hyper.batch_size, &mut rng).unwrap();
        let expect = erm_step(&model, &w0, &batch, &cfg.hyper.to_hyper()).unwrap();
        assert_eq!(after.global_model(), &expect);
    }

    #[test]
    fn zero_local_rate_is_an_aggregation_fixed_point() {
        // eta_l=0 clients return their received model unchanged; with
        // clean channels the server average is exactly w_r. The config
        // validator rejects eta_l=0, so wire the state directly.
        let cfg = quick_cfg();
        let state = FederationState::from_config(&cfg).unwrap();
        let w0 = state.global_model().clone();
        let frozen = HyperParams {
            eta_l: 0.0,
            ..cfg.hyper.to_hyper()
        };
        let plan = PartitionPlan::from_shards(state.shards(), None);
        let mut state = FederationState::assemble(
            &cfg,
            state.model().clone(),
            w0.clone(),
            state.train_data().clone(),
            state.test_data().clone(),
            &plan,
            frozen,
        )
        .unwrap();
        for _ in 0..2 {
            let (next, _) = state.run_round().unwrap();
            state = next;
        }
        assert_eq!(state.global_model(), &w0);
    }

    #[test]
    fn two_client_quadratic_matches_linear_dynamics() {
        // Quadratic gradient is c*w regardless of the batch, so one
        // round with E=1 contracts w by (1 - eta_g*eta_l*c) exactly.
        let mut cfg = quick_cfg();
        cfg.rounds = 1;
        cfg.num_clients = 2;
        cfg.model.kind = ModelKind::Quadratic;
        cfg.model.dim = 6;
        cfg.model.curvature = 1.0;
        cfg.hyper = HyperSpec {
            eta_l: 0.25,
            eta_g: 0.5,
            local_steps: 1,
            lr_decay: 1.0,
            ..HyperSpec::default()
        };
        let state = FederationState::from_config(&cfg).unwrap();
        let w0 = state.global_model().clone();
        let (after, _) = state.run_round().unwrap();
        let expect = w0.scaled(1.0 - 0.5 * 0.25);
        for (a, b) in after.global_model().values().iter().zip(expect.values()) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn client_relabeling_leaves_the_update_unchanged() {
        // Swapping which client id owns which shard permutes the
        // summands of a mean; keep streams tied to the data by swapping
        // ids and shards together.
        let mut cfg = quick_cfg();
        cfg.rounds = 1;
        let base = FederationState::from_config(&cfg).unwrap();
        let w_base = {
            let (s, _) = base.run_round().unwrap();
            s.global_model().clone()
        };

        let state = FederationState::from_config(&cfg).unwrap();
        let mut shards = state.shards();
        shards.swap(0, 3);
        shards.swap(1, 2);
        let plan = PartitionPlan::from_shards(shards, None);
        let mut permuted = FederationState::assemble(
            &cfg,
            state.model().clone(),
            state.global_model().clone(),
            state.train_data().clone(),
            state.test_data().clone(),
            &plan,
            cfg.hyper.to_hyper(),
        )
        .unwrap();
        // Keep each shard's stream id: client i now holds shard p(i),
        // so give it the id that shard had before the swap.
        permuted.clients[0].client_id = 3;
        permuted.clients[3].client_id = 0;
        permuted.clients[1].client_id = 2;
        permuted.clients[2].client_id = 1;
        let (after, _) = permuted.run_round().unwrap();

        for (a, b) in after.global_model().values().iter().zip(w_base.values()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn parallel_and_sequential_schedules_agree_bitwise() {
        let mut base = quick_cfg();
        base.rounds = 4;
        base.algorithm = Algorithm::Smrfl;
        base.uplink = ChannelSpec {
            kind: crate::channel::ChannelKind::GaussianFixedNorm,
            strength: 0.05,
            ..ChannelSpec::default()
        };
        base.parallel_clients = true;
        let parallel = records_of(&base);
        base.parallel_clients = false;
        let sequential = records_of(&base);
        assert_eq!(parallel, sequential);
        // Bitwise on every float, not just PartialEq.
        for (p, s) in parallel.iter().zip(&sequential) {
            assert_eq!(
                p.global_loss.map(f64::to_bits),
                s.global_loss.map(f64::to_bits)
            );
            assert_eq!(
                p.avg_sq_grad_norm.map(f64::to_bits),
                s.avg_sq_grad_norm.map(f64::to_bits)
            );
        }
    }

    #[test]
    fn smrfl_with_zero_rho_replays_fedavg() {
        let mut cfg = quick_cfg();
        cfg.uplink = ChannelSpec {
            kind: crate::channel::ChannelKind::GaussianIid,
            strength: 0.01,
            ..ChannelSpec::default()
        };
        cfg.algorithm = Algorithm::FedAvg;
        let fedavg = records_of(&cfg);
        cfg.algorithm = Algorithm::Smrfl;
        cfg.hyper.rho = 0.0;
        let smrfl = records_of(&cfg);
        assert_eq!(fedavg, smrfl);
    }

    #[test]
    fn identical_configs_replay_identically() {
        let cfg = quick_cfg();
        assert_eq!(records_of(&cfg), records_of(&cfg));
    }

    #[test]
    fn quadratic_run_contracts_to_stationarity() {
        let mut cfg = quick_cfg();
        cfg.rounds = 200;
        cfg.model.kind = ModelKind::Quadratic;
        cfg.model.dim = 8;
        cfg.metrics.eval_stride = 1;
        let records = records_of(&cfg);
        assert_eq!(records.len(), 200);
        let norms: Vec<f64> = records
            .iter()
            .map(|r| r.avg_sq_grad_norm.unwrap())
            .collect();
        for pair in norms.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-15);
        }
        assert!(norms[199] < 1e-8, "final {}", norms[199]);
    }

    #[test]
    fn scaffold_controls_vanish_on_identical_shards() {
        // Two disjoint shards holding copies of the same rows:
        // homogeneous full-batch clients drift identically up to
        // summation order, so every c_i stays within rounding of the
        // mean control.
        let mut cfg = quick_cfg();
        cfg.algorithm = Algorithm::Scaffold;
        cfg.rounds = 3;
        cfg.num_clients = 2;
        let state = FederationState::from_config(&cfg).unwrap();
        let base = state.train_data().clone();
        let n = base.len();
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..2 {
            for i in 0..n {
                features.extend_from_slice(base.feature_row(i));
                labels.push(base.labels()[i]);
            }
        }
        let doubled = DatasetHandle::new(
            "doubled".into(),
            features,
            base.input_dim(),
            labels,
            base.num_classes(),
        )
        .unwrap();
        let plan = PartitionPlan::from_shards(
            vec![(0..n).collect(), (n..2 * n).collect()],
            None,
        );
        let mut cfg2 = cfg.clone();
        cfg2.hyper.batch_size = n;
        let mut state = FederationState::assemble(
            &cfg2,
            state.model().clone(),
            state.global_model().clone(),
            doubled,
            state.test_data().clone(),
            &plan,
            cfg2.hyper.to_hyper(),
        )
        .unwrap();
        for _ in 0..3 {
            let (next, _) = state.run_round().unwrap();
            state = next;
        }
        let c = state.c_global.as_ref().unwrap();
        assert!(c.l2_norm() > 0.0, "controls should be active");
        for client in &state.clients {
            let ci = client.control.as_ref().unwrap();
            let drift = ci.sub(c).unwrap().l2_norm();
            assert!(drift < 1e-9, "control spread {drift}");
        }
    }

    #[test]
    fn channel_reports_reconcile_with_configured_strength() {
        let mut cfg = quick_cfg();
        cfg.uplink = ChannelSpec {
            kind: crate::channel::ChannelKind::GaussianFixedNorm,
            strength: 0.06,
            ..ChannelSpec::default()
        };
        cfg.downlink = cfg.uplink.clone();
        let records = records_of(&cfg);
        for record in &records {
            assert_eq!(record.uplink.len(), cfg.num_clients);
            assert_eq!(record.downlink.len(), cfg.num_clients);
            for report in record.uplink.iter().chain(&record.downlink) {
                assert!((report.applied_norm - 0.06).abs() < 1e-12);
                assert_eq!(report.round, record.round);
            }
        }
    }

    #[test]
    fn aggregate_consensus_and_frozen_server() {
        let w = ParamVec::new(vec![1.0, -2.0, 0.5]).unwrap();
        let m = ParamVec::new(vec![3.0, 0.25, -1.0]).unwrap();
        let out = aggregate(&[m.clone(), m.clone(), m.clone()], &w, 1.0).unwrap();
        for (a, b) in out.values().iter().zip(m.values()) {
            assert!((a - b).abs() < 1e-14);
        }
        let frozen = aggregate(&[m], &w, 0.0).unwrap();
        assert_eq!(frozen, w);
    }

    #[test]
    fn aggregate_cancels_symmetric_deltas_exactly() {
        let w = ParamVec::new(vec![0.5, -0.25, 8.0]).unwrap();
        let u = ParamVec::new(vec![0.125, 2.0, -0.5]).unwrap();
        let plus = axpy(1.0, &u, &w).unwrap();
        let minus = axpy(-1.0, &u, &w).unwrap();
        for eta_g in [0.25, 1.0, 3.0] {
            let out = aggregate(&[plus.clone(), minus.clone()], &w, eta_g).unwrap();
            assert_eq!(out, w);
        }
    }

    #[test]
    fn aggregate_rejects_empty_and_mismatched() {
        let w = ParamVec::zeros(3);
        assert!(matches!(aggregate(&[], &w, 1.0), Err(Error::Empty(_))));
        let short = ParamVec::zeros(2);
        assert!(matches!(
            aggregate(&[short], &w, 1.0),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn fedavg_matches_straight_line_reference() {
        // Reference: explicit loops, no engine machinery, 3 clients,
        // clean channels, E=2, eta_g=0.7, decayed eta_l.
        let mut cfg = quick_cfg();
        cfg.rounds = 10;
        cfg.num_clients = 3;
        cfg.hyper = HyperSpec {
            eta_l: 0.2,
            eta_g: 0.7,
            local_steps: 2,
            batch_size: 8,
            lr_decay: 0.9,
            ..HyperSpec::default()
        };
        let state = FederationState::from_config(&cfg).unwrap();
        let model = state.model().clone();
        let train = state.train_data().clone();
        let shards = state.shards();
        let mut w_ref = state.global_model().clone();

        let mut engine = state;
        for _ in 0..cfg.rounds {
            let (next, _) = engine.run_round().unwrap();
            engine = next;
        }

        for r in 0..cfg.rounds {
            let eta = 0.2 * 0.9f64.powi(r as i32);
            let mut locals = Vec::new();
            for (i, shard) in shards.iter().enumerate() {
                let mut w = w_ref.clone();
                let mut rng =
                    RngStream::new(cfg.seed, StreamPurpose::BatchDraw, r, i as u64).rng();
                for _ in 0..2 {
                    let batch = sample_batch(&train, shard, 8, &mut rng).unwrap();
                    let g = model.grad(&w, &batch).unwrap();
                    w = axpy(-eta, &g, &w).unwrap();
                }
                locals.push(w);
            }
            let mut mean_delta = ParamVec::zeros(w_ref.len());
            for l in &locals {
                mean_delta
                    .add_scaled_assign(1.0, &l.sub(&w_ref).unwrap())
                    .unwrap();
            }
            mean_delta.scale_assign(1.0 / 3.0);
            w_ref = axpy(0.7, &mean_delta, &w_ref).unwrap();
        }

        for (a, b) in engine.global_model().values().iter().zip(w_ref.values()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn rho_changes_smrfl_but_not_fedavg() {
        let mut cfg = quick_cfg();
        cfg.algorithm = Algorithm::Smrfl;
        cfg.hyper.rho = 0.1;
        let a = records_of(&cfg);
        cfg.hyper.rho = 0.5;
        let b = records_of(&cfg);
        assert_ne!(a, b);

        cfg.algorithm = Algorithm::FedAvg;
        cfg.hyper.rho = 0.1;
        let c = records_of(&cfg);
        cfg.hyper.rho = 0.5;
        let d = records_of(&cfg);
        assert_eq!(c, d);
    }

    #[test]
    fn eval_stride_gates_metric_fields() {
        let mut cfg = quick_cfg();
        cfg.rounds = 5;
        cfg.metrics.eval_stride = 2;
        let records = records_of(&cfg);
        assert_eq!(records.len(), 5);
        // Rounds 1, 3 evaluate by stride; round 4 is final.
        let evaluated: Vec<bool> = records.iter().map(|r| r.global_loss.is_some()).collect();
        assert_eq!(evaluated, vec![false, true, false, true, true]);
        for r in &records {
            assert_eq!(r.global_loss.is_some(), r.test_accuracy.is_some());
            assert_eq!(r.global_loss.is_some(), r.avg_sq_grad_norm.is_some());
        }
    }

    #[test]
    fn divergent_run_reports_round_and_keeps_partial_records() {
        let mut cfg = quick_cfg();
        cfg.rounds = 60;
        cfg.model.kind = ModelKind::Quadratic;
        cfg.model.dim = 4;
        cfg.model.curvature = 1.0;
        // eta_l*c = 30 makes each local step multiply w by -29: blowup.
        cfg.hyper = HyperSpec {
            eta_l: 30.0,
            local_steps: 1,
            lr_decay: 1.0,
            ..HyperSpec::default()
        };
        let outcome = run_experiment(&cfg).unwrap();
        match &outcome.status {
            RunStatus::Diverged { round, .. } => {
                assert_eq!(*round, outcome.records.len() as u64);
            }
            RunStatus::Completed => panic!("expected divergence"),
        }
        assert!((outcome.records.len() as u64) < cfg.rounds);
    }

    #[test]
    fn quadratic_ignores_partition_noise_sources() {
        // The quadratic gradient never reads the batch, so dirichlet vs
        // iid partitioning must not change the trajectory.
        let mut cfg = quick_cfg();
        cfg.model.kind = ModelKind::Quadratic;
        cfg.model.dim = 5;
        let iid = records_of(&cfg);
        cfg.partition = PartitionSpec {
            kind: PartitionKind::Dirichlet,
            alpha: 0.3,
        };
        let dir = records_of(&cfg);
        let a: Vec<f64> = iid.iter().filter_map(|r| r.avg_sq_grad_norm).collect();
        let b: Vec<f64> = dir.iter().filter_map(|r| r.avg_sq_grad_norm).collect();
        assert_eq!(a, b);
    }
}
