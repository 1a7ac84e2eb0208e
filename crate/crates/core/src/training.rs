//! Ramp-up schedule, optimizers, the training loop and evaluation.
//!
//! Output directory of a run:
//!
//! ```text
//! metrics.csv              one row per epoch (schema of MetricsRow)
//! config.json              resolved configuration
//! run_state.json           best-epoch bookkeeping for resumption
//! checkpoints/last.ckpt    after every epoch
//! checkpoints/best.ckpt    lowest mean training total loss so far
//! checkpoints/final.ckpt   after the last epoch
//! debug.csv                per-step impact statistics (optional)
//! failure.json             written when a step produces a non-finite value
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::adversarial::{Linearization, VatSettings};
use crate::datasets::{to_tensor, BatchStream, DomainPair, LabeledImages, Normalization, StepBatch};
use crate::error::{DtaError, Result};
use crate::masking::ratio_from_f64;
use crate::networks::checkpoint::{Checkpoint, OptimizerSnapshot};
use crate::networks::{Mode, Network};
use crate::objectives::{total_loss, Labeled, LossBreakdown, LossSettings, LossWeights, StepPlan};
use crate::rng;
use crate::scalar::Scalar;

// ---------------------------------------------------------------------------
// ramp

/// `β(t) = min(1, t / T_r)`, exact.
pub fn ramp_factor(t: u64, ramp_period: u64) -> Result<Ratio<i64>> {
    if ramp_period == 0 {
        return Err(DtaError::invalid("ramp period must be ≥ 1"));
    }
    Ok(Ratio::new(t.min(ramp_period) as i64, ramp_period as i64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RampSchedule {
    ramp_period: u64,
    delta_e_max: Ratio<i64>,
    delta_c_max: Ratio<i64>,
}

impl RampSchedule {
    pub fn new(ramp_period: u64, delta_e_max: Ratio<i64>, delta_c_max: Ratio<i64>) -> Result<Self> {
        ramp_factor(0, ramp_period)?;
        let unit = Ratio::from_integer(0)..=Ratio::from_integer(1);
        if !unit.contains(&delta_e_max) || !unit.contains(&delta_c_max) {
            return Err(DtaError::invalid("maximum magnitudes must lie in [0, 1]"));
        }
        Ok(RampSchedule {
            ramp_period,
            delta_e_max,
            delta_c_max,
        })
    }

    pub fn ramp_period(&self) -> u64 {
        self.ramp_period
    }
}

/// `(δ_e(t), δ_c(t)) = β(t)·(δ̄_e, δ̄_c)`.
pub fn current_magnitudes(schedule: &RampSchedule, t: u64) -> (Ratio<i64>, Ratio<i64>) {
    let beta = ramp_factor(t, schedule.ramp_period).expect("validated period");
    (beta * schedule.delta_e_max, beta * schedule.delta_c_max)
}

// ---------------------------------------------------------------------------
// optimizers

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Adam,
    #[serde(rename = "sgd")]
    SgdMomentum,
}

impl OptimizerKind {
    fn tag(&self) -> u8 {
        match self {
            OptimizerKind::Adam => 1,
            OptimizerKind::SgdMomentum => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Multiplier applied at each decay epoch.
    pub decay_factor: f64,
    /// Epoch indices from which the next decay applies.
    pub decay_epochs: Vec<u64>,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            decay_factor: 0.1,
            decay_epochs: vec![30, 60],
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn lr_at(&self, epoch: u64) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.lr * self.decay_factor.powi(decays as i32)
    }

    fn validate(&self) -> Result<()> {
        let positive = [("lr", self.lr), ("eps", self.eps)];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(DtaError::invalid(format!("optimizer.{k} = {v} must be > 0")));
            }
        }
        let unit = [
            ("decay_factor", self.decay_factor),
            ("momentum", self.momentum),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
        ];
        for (k, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(DtaError::invalid(format!("optimizer.{k} = {v} must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Adam or SGD with momentum over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    config: OptimizerConfig,
    step: u64,
    slots: Vec<Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig, num_params: usize) -> Self {
        let n_slots = match config.kind {
            OptimizerKind::Adam => 2,
            OptimizerKind::SgdMomentum => 1,
        };
        Optimizer {
            config,
            step: 0,
            slots: vec![vec![T::zero(); num_params]; n_slots],
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut [T], grad: &[T], epoch: u64) {
        assert_eq!(params.len(), grad.len(), "parameter and gradient lengths differ");
        self.step += 1;
        let lr = self.config.lr_at(epoch);
        match self.config.kind {
            OptimizerKind::Adam => {
                let (b1, b2) = (self.config.beta1, self.config.beta2);
                let t = self.step as i32;
                let step_size = T::of(lr / (1.0 - b1.powi(t)));
                let c2 = T::of(1.0 / (1.0 - b2.powi(t)));
                let (b1, b2, eps) = (T::of(b1), T::of(b2), T::of(self.config.eps));
                let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
                let (m, rest) = self.slots.split_at_mut(1);
                for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut m[0]).zip(&mut rest[0]) {
                    *m = b1 * *m + one_b1 * g;
                    *v = b2 * *v + one_b2 * g * g;
                    *p -= step_size * *m / ((*v * c2).sqrt() + eps);
                }
            }
            OptimizerKind::SgdMomentum => {
                let (mu, lr) = (T::of(self.config.momentum), T::of(lr));
                for ((p, &g), v) in params.iter_mut().zip(grad).zip(&mut self.slots[0]) {
                    *v = mu * *v + g;
                    *p -= lr * *v;
                }
            }
        }
    }

    pub fn snapshot(&self) -> OptimizerSnapshot<T> {
        OptimizerSnapshot {
            kind: self.config.kind.tag(),
            step: self.step,
            slots: self.slots.clone(),
        }
    }

    pub fn restore(config: OptimizerConfig, snap: &OptimizerSnapshot<T>, num_params: usize) -> Result<Self> {
        let mut opt = Self::new(config, num_params);
        if snap.kind != opt.config.kind.tag()
            || snap.slots.len() != opt.slots.len()
            || snap.slots.iter().any(|s| s.len() != num_params)
        {
            return Err(DtaError::invalid("checkpoint optimizer state does not match the configured optimizer"));
        }
        opt.step = snap.step;
        opt.slots = snap.slots.clone();
        Ok(opt)
    }
}

// ---------------------------------------------------------------------------
// configuration

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DtaConfig {
    pub weights: LossWeights,
    /// Maximum element-wise magnitude δ̄_e.
    pub delta_e: f64,
    /// Maximum channel-wise magnitude δ̄_c.
    pub delta_c: f64,
    /// VAT radius ε (not ramped).
    pub epsilon: f64,
    /// Ramp-up period T_r in epochs.
    pub ramp_period: u64,
    /// Drop rate ρ_s of the stochastic masks.
    pub stochastic_drop_rate: f64,
    pub epochs: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub use_fdta: bool,
    pub use_cdta: bool,
    pub use_entropy: bool,
    pub use_vat: bool,
    pub linearization: Linearization,
    /// VAT finite-difference step; defaults to the scalar type's value.
    pub vat_xi: Option<f64>,
    pub vat_power_iters: usize,
}

impl Default for DtaConfig {
    fn default() -> Self {
        DtaConfig {
            weights: LossWeights {
                lambda1: 2.0,
                lambda2: 0.01,
                lambda3: 0.1,
            },
            delta_e: 0.1,
            delta_c: 0.05,
            epsilon: 3.5,
            ramp_period: 80,
            stochastic_drop_rate: 0.1,
            epochs: 90,
            batch_size: 64,
            seed: 0,
            optimizer: OptimizerConfig::default(),
            use_fdta: true,
            use_cdta: true,
            use_entropy: true,
            use_vat: true,
            linearization: Linearization::default(),
            vat_xi: None,
            vat_power_iters: 1,
        }
    }
}

impl DtaConfig {
    /// Checks ranges; returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        self.weights.validate()?;
        self.optimizer.validate()?;
        for (k, v) in [
            ("delta_e", self.delta_e),
            ("delta_c", self.delta_c),
            ("stochastic_drop_rate", self.stochastic_drop_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(DtaError::invalid(format!("{k} = {v} must lie in [0, 1]")));
            }
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(DtaError::invalid(format!("epsilon = {} must be ≥ 0", self.epsilon)));
        }
        if self.ramp_period == 0 {
            return Err(DtaError::invalid("ramp_period must be ≥ 1"));
        }
        if self.batch_size == 0 {
            return Err(DtaError::invalid("batch_size must be ≥ 1"));
        }
        if self.vat_power_iters == 0 {
            return Err(DtaError::invalid("vat_power_iters must be ≥ 1"));
        }
        if let Some(xi) = self.vat_xi {
            if !(xi > 0.0 && xi.is_finite()) {
                return Err(DtaError::invalid(format!("vat_xi = {xi} must be > 0")));
            }
        }
        let mut warnings = Vec::new();
        if self.ramp_period > self.epochs {
            warnings.push(format!(
                "ramp_period {} exceeds epochs {}: perturbations never reach their maxima",
                self.ramp_period, self.epochs
            ));
        }
        Ok(warnings)
    }

    pub fn ramp(&self) -> Result<RampSchedule> {
        RampSchedule::new(self.ramp_period, ratio_from_f64(self.delta_e)?, ratio_from_f64(self.delta_c)?)
    }

    /// Loss settings at epoch `t`.
    pub fn loss_settings<T: Scalar>(&self, t: u64) -> Result<LossSettings> {
        let (delta_e, delta_c) = current_magnitudes(&self.ramp()?, t);
        Ok(LossSettings {
            weights: self.weights,
            delta_e,
            delta_c,
            vat: VatSettings {
                epsilon: self.epsilon,
                xi: self.vat_xi.unwrap_or(T::DEFAULT_VAT_XI),
                power_iters: self.vat_power_iters,
            },
            linearization: self.linearization,
            stochastic_drop_rate: self.stochastic_drop_rate,
            use_fdta: self.use_fdta,
            use_cdta: self.use_cdta,
            use_entropy: self.use_entropy,
            use_vat: self.use_vat,
        })
    }
}

// ---------------------------------------------------------------------------
// steps and evaluation

/// Seed of step `step` in epoch `epoch`.
pub fn step_seed(root: u64, epoch: u64, step: u64) -> u64 {
    rng::derive(root, "step", &[epoch, step])
}

/// One update of all parameters on `total_loss`; returns the breakdown before
/// the update and the frozen plan used for it.
pub fn train_step<T: Scalar>(
    net: &mut Network<T>,
    optimizer: &mut Optimizer<T>,
    batch: &StepBatch<T>,
    config: &DtaConfig,
    epoch: u64,
    seed: u64,
) -> Result<(LossBreakdown, StepPlan<T>)> {
    let settings = config.loss_settings::<T>(epoch)?;
    let target = settings.needs_target().then_some(&batch.target);
    let mode = Mode::Train {
        seed: rng::derive(seed, "dropout", &[]),
    };
    let source = Labeled {
        images: &batch.source,
        labels: &batch.labels,
    };
    let (breakdown, grad, plan) = total_loss(net, source, target, &settings, seed, mode)?;
    optimizer.update(net.params_mut(), &grad, epoch);
    if !net.params().iter().all(|p| p.is_finite()) {
        return Err(DtaError::numerical("parameters became non-finite after the update"));
    }
    Ok((breakdown, plan))
}

/// Argmax accuracy on a labelled split; masks off, architectural dropout off.
pub fn evaluate<T: Scalar>(net: &Network<T>, split: &LabeledImages, norm: &Normalization) -> Result<f64> {
    if split.is_empty() {
        return Err(DtaError::invalid("evaluation needs a non-empty test set"));
    }
    const CHUNK: usize = 256;
    let mut correct = 0usize;
    let all: Vec<usize> = (0..split.len()).collect();
    for idx in all.chunks(CHUNK) {
        let x = to_tensor::<T>(split.images(), idx, norm, None);
        let logits = net.logits(&x, None, None, Mode::Eval)?;
        for (row, &i) in logits.rows().zip(idx) {
            let pred = row
                .iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                .0;
            correct += usize::from(pred == split.labels()[i]);
        }
    }
    Ok(correct as f64 / split.len() as f64)
}

// ---------------------------------------------------------------------------
// experiment

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: u64,
    pub task: f64,
    pub fdta: f64,
    pub cdta: f64,
    pub entropy: f64,
    pub vat: f64,
    pub total: f64,
    pub delta_e: f64,
    pub delta_c: f64,
    pub target_accuracy: f64,
    pub wall_seconds: f64,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| csv_err(path, e)))
        .collect()
}

fn csv_err(path: &Path, e: csv::Error) -> DtaError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => DtaError::io(path, io),
        other => DtaError::format(path, format!("{other:?}")),
    }
}

fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    if rows.is_empty() {
        w.write_record([
            "epoch", "task", "fdta", "cdta", "entropy", "vat", "total", "delta_e", "delta_c", "target_accuracy",
            "wall_seconds",
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| DtaError::io(path, e))
}

fn append_metrics(path: &Path, row: &MetricsRow) -> Result<()> {
    let file = fs::OpenOptions::new().append(true).open(path).map_err(|e| DtaError::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.serialize(row).map_err(|e| csv_err(path, e))?;
    w.flush().map_err(|e| DtaError::io(path, e))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct RunState {
    best_total: Option<f64>,
    best_epoch: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub output_dir: PathBuf,
    /// Continue from `checkpoints/last.ckpt` if present.
    pub resume: bool,
    /// Write per-step impact statistics to `debug.csv`.
    pub debug_dump: bool,
    /// Stop after this many epochs of the schedule (for resumption tests).
    pub stop_after: Option<u64>,
}

impl RunOptions {
    pub fn new(output_dir: impl Into<PathBuf>) -> Self {
        RunOptions {
            output_dir: output_dir.into(),
            resume: false,
            debug_dump: false,
            stop_after: None,
        }
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.output_dir.join("metrics.csv")
    }

    pub fn checkpoint_path(&self, which: &str) -> PathBuf {
        self.output_dir.join("checkpoints").join(format!("{which}.ckpt"))
    }
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub history: Vec<MetricsRow>,
    pub final_accuracy: f64,
    pub best_epoch: Option<u64>,
    pub resumed_from: Option<u64>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text).map_err(|e| DtaError::io(path, e))
}

struct DebugDump {
    file: fs::File,
    path: PathBuf,
}

impl DebugDump {
    fn open(path: PathBuf, fresh: bool) -> Result<Self> {
        let exists = path.exists();
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(!fresh)
            .write(true)
            .truncate(fresh)
            .open(&path)
            .map_err(|e| DtaError::io(&path, e))?;
        if fresh || !exists {
            writeln!(file, "epoch,step,site,mean_flips,mean_abs_impact,max_abs_impact,zero_impact_fraction")
                .map_err(|e| DtaError::io(&path, e))?;
        }
        Ok(DebugDump { file, path })
    }

    fn record<T: Scalar>(&mut self, epoch: u64, step: usize, plan: &StepPlan<T>) -> Result<()> {
        for (site, sp) in [("feature", &plan.feature), ("classifier", &plan.classifier)] {
            let Some(sp) = sp else { continue };
            let flips: usize = sp
                .stochastic
                .iter()
                .zip(&sp.adversarial)
                .map(|(a, b)| crate::masking::hamming(a.bits(), b.bits()))
                .sum();
            let values: Vec<f64> = sp.impacts.iter().flat_map(|iv| iv.values().iter().map(|v| v.as_f64().abs())).collect();
            let n = values.len().max(1) as f64;
            let mean = values.iter().sum::<f64>() / n;
            let max = values.iter().copied().fold(0.0, f64::max);
            let zeros = values.iter().filter(|&&v| v == 0.0).count() as f64 / n;
            writeln!(
                self.file,
                "{epoch},{step},{site},{},{mean},{max},{zeros}",
                flips as f64 / sp.stochastic.len().max(1) as f64
            )
            .map_err(|e| DtaError::io(&self.path, e))?;
        }
        Ok(())
    }
}

/// Trains on `pair` for `config.epochs` epochs, evaluating on the target test
/// split after each epoch.
pub fn run_experiment<T: Scalar>(
    config: &DtaConfig,
    pair: &DomainPair,
    arch: &crate::networks::ArchitectureId,
    options: &RunOptions,
    mut on_epoch: impl FnMut(&MetricsRow),
) -> Result<RunSummary> {
    config.validate()?;
    if arch.input_shape != pair.input_shape() || arch.num_classes != pair.num_classes() {
        return Err(DtaError::invalid(format!(
            "architecture expects {:?} with {} classes, data is {:?} with {}",
            arch.input_shape,
            arch.num_classes,
            pair.input_shape(),
            pair.num_classes()
        )));
    }
    let dir = &options.output_dir;
    fs::create_dir_all(dir.join("checkpoints")).map_err(|e| DtaError::io(dir, e))?;
    let metrics_path = options.metrics_path();
    let state_path = dir.join("run_state.json");
    let last_path = options.checkpoint_path("last");

    let (mut net, mut optimizer, start_epoch, mut history, mut state) = if options.resume && last_path.exists() {
        let ckpt = Checkpoint::<T>::load(&last_path)?;
        if &ckpt.arch != arch || ckpt.root_seed != config.seed {
            return Err(DtaError::invalid("checkpoint was written by a different architecture or seed"));
        }
        let net = ckpt.network()?;
        let opt = Optimizer::restore(config.optimizer.clone(), &ckpt.optimizer, net.num_params())?;
        let history: Vec<MetricsRow> = read_metrics(&metrics_path)?
            .into_iter()
            .filter(|r| r.epoch < ckpt.epoch)
            .collect();
        let state: RunState = fs::read_to_string(&state_path)
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok())
            .unwrap_or_default();
        write_metrics(&metrics_path, &history)?;
        (net, opt, ckpt.epoch, history, state)
    } else {
        let net = Network::<T>::build(arch, rng::derive(config.seed, "init", &[]))?;
        let opt = Optimizer::new(config.optimizer.clone(), net.num_params());
        write_metrics(&metrics_path, &[])?;
        (net, opt, 0, Vec::new(), RunState::default())
    };
    let resumed_from = (start_epoch > 0).then_some(start_epoch);
    write_json(&dir.join("config.json"), config)?;
    let mut debug = if options.debug_dump {
        Some(DebugDump::open(dir.join("debug.csv"), start_epoch == 0)?)
    } else {
        None
    };

    let stream = BatchStream::new(pair, config.batch_size, rng::derive(config.seed, "batches", &[]))?;
    let steps = stream.steps_per_epoch();
    let norm = pair.normalization();
    let wall_offset = history.last().map_or(0.0, |r| r.wall_seconds);
    let clock = Instant::now();
    let end = options.stop_after.map_or(config.epochs, |s| s.min(config.epochs));

    for epoch in start_epoch..end {
        let batches = stream.epoch(epoch);
        let mut sums = [0.0f64; 6];
        for step in 0..steps {
            let batch = batches.batch::<T>(step);
            let seed = step_seed(config.seed, epoch, step as u64);
            let (b, plan) = match train_step(&mut net, &mut optimizer, &batch, config, epoch, seed) {
                Ok(r) => r,
                Err(e @ DtaError::NumericalFailure(_)) => {
                    let _ = write_json(
                        &dir.join("failure.json"),
                        &serde_json::json!({"epoch": epoch, "step": step, "error": e.to_string()}),
                    );
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            for (s, v) in sums.iter_mut().zip([b.task, b.fdta, b.cdta, b.entropy, b.vat, b.total]) {
                *s += v;
            }
            if let Some(d) = debug.as_mut() {
                d.record(epoch, step, &plan)?;
            }
        }
        let mean = sums.map(|s| s / steps as f64);
        let (de, dc) = current_magnitudes(&config.ramp()?, epoch);
        let row = MetricsRow {
            epoch,
            task: mean[0],
            fdta: mean[1],
            cdta: mean[2],
            entropy: mean[3],
            vat: mean[4],
            total: mean[5],
            delta_e: ratio_f64(de),
            delta_c: ratio_f64(dc),
            target_accuracy: evaluate(&net, pair.target_test(), &norm)?,
            wall_seconds: wall_offset + clock.elapsed().as_secs_f64(),
        };
        append_metrics(&metrics_path, &row)?;

        let ckpt = Checkpoint::of_network(&net, config.seed, epoch + 1, optimizer.snapshot());
        if state.best_total.is_none_or(|b| row.total < b) {
            state.best_total = Some(row.total);
            state.best_epoch = Some(epoch);
            ckpt.save(&options.checkpoint_path("best"))?;
        }
        ckpt.save(&last_path)?;
        write_json(&state_path, &state)?;
        on_epoch(&row);
        history.push(row);
    }
    if end == config.epochs {
        Checkpoint::of_network(&net, config.seed, end, optimizer.snapshot()).save(&options.checkpoint_path("final"))?;
    }
    Ok(RunSummary {
        final_accuracy: history.last().map_or(f64::NAN, |r| r.target_accuracy),
        history,
        best_epoch: state.best_epoch,
        resumed_from,
    })
}

fn ratio_f64(r: Ratio<i64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}
