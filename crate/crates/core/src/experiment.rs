//! Training runs, benchmarks, sweeps, calibration and persistence.
//!
//! A run is a pure function of its configuration: dataset and fold are
//! rebuilt from their seeds, model initialization and batch composition are
//! driven by the train seed, and every checkpoint metric is recorded in a
//! serializable [`RunResult`]. Identical configurations produce byte
//! identical result files, regardless of process or thread count.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    apply_imbalance, batch_iterator, gen_blobs, gen_two_moons, sample_fold_balanced, sample_fold_random, Dataset,
    FoldSpec,
};
use crate::diffcore::{mlp_forward, sgd_step, LrSchedule, ModelParams, OptimState, Tape, TapeParams};
use crate::losses::{
    batch_loss_on_tape, calibrate_lambda_u, lambda_phi_bound, softmax, EquilibriumEstimate, LossConfig, LossVariant,
};
use crate::metrics::{
    collapsed_classes, confusion, error_rate, pseudo_label_stats, ComparisonReport, ConfusionMatrix,
};
use crate::{Error, Result};

/// Share of predictions below which a class counts as collapsed.
const COLLAPSE_EPS: f64 = 0.2;

/// Synthetic dataset recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "kind")]
pub enum DatasetSpec {
    TwoMoons { n: usize, noise: f64, seed: u64 },
    Blobs { n: usize, n_classes: usize, spread: f64, seed: u64 },
}

impl DatasetSpec {
    pub fn build(&self) -> Result<Dataset> {
        match *self {
            DatasetSpec::TwoMoons { n, noise, seed } => gen_two_moons(n, noise, seed),
            DatasetSpec::Blobs { n, n_classes, spread, seed } => gen_blobs(n, n_classes, spread, seed),
        }
    }
}

/// Fold-sampling recipe; the fold seed lives in [`RunConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "kind")]
pub enum FoldParams {
    Balanced { per_class: usize },
    Random { n_labels: usize },
}

/// Optional unlabeled-pool imbalance, applied after fold sampling. The
/// effective seed is offset by the fold seed so each fold gets its own
/// random target class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImbalanceSpec {
    pub keep_fraction: f64,
    /// Fixed target class, or `None` to pick one at random per fold.
    #[serde(default)]
    pub target_class: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub schedule: ScheduleKind,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            base_lr: 0.03,
            momentum: 0.9,
            weight_decay: 5e-4,
            ema_decay: 0.999,
            schedule: ScheduleKind::Cosine,
        }
    }
}

/// Which parameters a checkpoint evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSource {
    Raw,
    Ema,
}

/// Complete recipe for one training run. Fold seed and train seed are
/// independent: the first determines the labeled split, the second the
/// initialization, batch composition and augmentations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub fold: FoldParams,
    pub fold_seed: u64,
    pub test_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub imbalance: Option<ImbalanceSpec>,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    /// Hidden layer widths of the MLP classifier.
    pub hidden: Vec<usize>,
    pub b_labeled: usize,
    pub ratio: usize,
    pub total_steps: u64,
    pub eval_every: u64,
    pub train_seed: u64,
    pub eval_params: EvalSource,
}

impl RunConfig {
    /// Desk-scale default: 10-class blobs, 4 random labels per class worth
    /// of supervision (40 labels), smooth pair loss.
    pub fn default_blobs() -> Self {
        RunConfig {
            dataset: DatasetSpec::Blobs { n: 2000, n_classes: 10, spread: 0.18, seed: 7 },
            fold: FoldParams::Balanced { per_class: 4 },
            fold_seed: 0,
            test_fraction: 0.2,
            imbalance: None,
            loss: LossConfig::new(LossVariant::Sfm),
            optim: OptimConfig::default(),
            hidden: vec![32, 32],
            b_labeled: 8,
            ratio: 7,
            total_steps: 20_000,
            eval_every: 500,
            train_seed: 2046,
            eval_params: EvalSource::Ema,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.b_labeled == 0 || self.ratio == 0 {
            return Err(Error::input("batch sizes must be positive"));
        }
        if self.total_steps == 0 {
            return Err(Error::input("total_steps must be positive"));
        }
        if self.eval_every == 0 {
            return Err(Error::input("eval_every must be positive"));
        }
        if self.hidden.is_empty() {
            return Err(Error::input("need at least one hidden layer"));
        }
        Ok(())
    }

    /// Stable hex digest of the configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialization cannot fail");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn build_dataset(&self) -> Result<Dataset> {
        self.dataset.build()
    }

    /// Samples the fold for this configuration; depends on the fold seed
    /// only, never on the train seed.
    pub fn build_fold(&self, ds: &Dataset) -> Result<FoldSpec> {
        let fold = match self.fold {
            FoldParams::Balanced { per_class } => sample_fold_balanced(ds, per_class, self.fold_seed, self.test_fraction)?,
            FoldParams::Random { n_labels } => sample_fold_random(ds, n_labels, self.fold_seed, self.test_fraction)?,
        };
        match &self.imbalance {
            None => Ok(fold),
            Some(im) => apply_imbalance(
                &fold,
                ds,
                im.seed.wrapping_add(self.fold_seed),
                im.keep_fraction,
                im.target_class,
            ),
        }
    }

    fn layer_sizes(&self, ds: &Dataset) -> Vec<usize> {
        let mut sizes = vec![ds.dim()];
        sizes.extend_from_slice(&self.hidden);
        sizes.push(ds.n_classes);
        sizes
    }
}

/// Metrics recorded at one evaluation checkpoint. Loss components are means
/// over the steps since the previous checkpoint; coverage, purity and mean
/// weight are measured over the whole unlabeled set with the raw parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub step: u64,
    pub test_error: f64,
    pub coverage: f64,
    pub purity: Option<f64>,
    pub mean_weight: f64,
    pub collapsed: Vec<usize>,
    pub loss_sup: f64,
    pub loss_unsup: f64,
    pub loss_phi: f64,
}

/// Everything a run reports. The headline number is the last checkpoint's
/// error, never the best one.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub config_hash: String,
    pub checkpoints: Vec<CheckpointRecord>,
    pub final_confusion: ConfusionMatrix,
    pub last_error: f64,
    pub best_error: f64,
    pub best_step: u64,
    /// Not serialized and excluded from equality: wall time varies between
    /// processes while results must stay byte-identical.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl PartialEq for RunResult {
    fn eq(&self, other: &Self) -> bool {
        self.config_hash == other.config_hash
            && self.checkpoints == other.checkpoints
            && self.final_confusion == other.final_confusion
            && self.last_error == other.last_error
            && self.best_error == other.best_error
            && self.best_step == other.best_step
    }
}

/// Trained parameters of a finished run.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub raw: ModelParams,
    pub ema: ModelParams,
}

/// Per-step loss trace, kept only by [`run_training_traced`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTrace {
    pub sup: f64,
    pub unsup: f64,
    pub mean_weight: f64,
    pub phi: f64,
}

/// Run output with internals exposed for calibration and verification.
pub struct TracedRun {
    pub result: RunResult,
    pub model: TrainedModel,
    pub step_trace: Vec<StepTrace>,
    /// Per checkpoint, the unlabeled indices with positive pseudo-label
    /// weight at that point (raw parameters, unaugmented points).
    pub acceptance_sets: Vec<Vec<usize>>,
}

fn batch_fingerprint(labeled: &[(usize, Vec<f64>, usize)], sources: &[usize]) -> String {
    let mut hasher = Sha256::new();
    for (i, _, _) in labeled {
        hasher.update(i.to_le_bytes());
    }
    for s in sources {
        hasher.update(s.to_le_bytes());
    }
    hasher.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect()
}

fn eval_error(params: &ModelParams, ds: &Dataset, indices: &[usize]) -> Result<(f64, ConfusionMatrix)> {
    let mut preds = Vec::with_capacity(indices.len());
    let mut gts = Vec::with_capacity(indices.len());
    for &i in indices {
        let logits = mlp_forward(params, ds.point(i))?;
        let mut best = 0;
        for (k, &v) in logits.iter().enumerate().skip(1) {
            if v > logits[best] {
                best = k;
            }
        }
        preds.push(best);
        gts.push(ds.eval_labels()[i]);
    }
    let cm = confusion(&preds, &gts, ds.n_classes)?;
    Ok((error_rate(&cm)?, cm))
}

fn run_impl(cfg: &RunConfig, ds: &Dataset, fold: &FoldSpec, traced: bool) -> Result<TracedRun> {
    cfg.validate()?;
    let start = Instant::now();
    let sizes = cfg.layer_sizes(ds);
    let mut params = ModelParams::new_mlp(&sizes, cfg.train_seed)?;
    let schedule = match cfg.optim.schedule {
        ScheduleKind::Constant => LrSchedule::Constant,
        ScheduleKind::Cosine => LrSchedule::Cosine { total_steps: cfg.total_steps },
    };
    let mut optim = OptimState::new(
        &params,
        cfg.optim.base_lr,
        cfg.optim.momentum,
        cfg.optim.weight_decay,
        cfg.optim.ema_decay,
        schedule,
    )?;
    let mut it = batch_iterator(fold, ds, cfg.b_labeled, cfg.ratio, cfg.train_seed)?;

    let unlabeled_gts: Vec<usize> = fold.unlabeled.iter().map(|&i| ds.eval_labels()[i]).collect();

    let mut checkpoints = Vec::new();
    let mut acceptance_sets = Vec::new();
    let mut step_trace = Vec::new();
    let mut interval = (0.0, 0.0, 0.0, 0u64); // (sup, unsup, phi, count)
    let mut final_confusion = None;

    for step in 0..cfg.total_steps {
        let batch = it.next_batch();
        let labeled_refs: Vec<(&[f64], usize)> = batch.labeled.iter().map(|(_, x, y)| (x.as_slice(), *y)).collect();
        let pair_refs: Vec<(&[f64], &[f64])> =
            batch.pairs.iter().map(|p| (p.weak.as_slice(), p.strong.as_slice())).collect();

        let mut tape = Tape::new();
        let tp = TapeParams::register(&mut tape, &params);
        let loss = batch_loss_on_tape(&mut tape, &tp, &params, &labeled_refs, &pair_refs, &cfg.loss)?;
        let total = tape.scalar(loss.root);
        if !total.is_finite() {
            let sources: Vec<usize> = batch.pairs.iter().map(|p| p.source).collect();
            return Err(Error::TrainingFault {
                step,
                detail: format!("non-finite loss {total}; batch {}", batch_fingerprint(&batch.labeled, &sources)),
            });
        }
        let grads_all = tape.backward(loss.root)?;
        let grads = tp.gradients(&params, &grads_all);
        sgd_step(&mut params, &grads, &mut optim)?;

        interval.0 += loss.sup;
        interval.1 += loss.unsup;
        interval.2 += loss.phi;
        interval.3 += 1;
        if traced {
            step_trace.push(StepTrace {
                sup: loss.sup,
                unsup: loss.unsup,
                mean_weight: loss.mean_weight,
                phi: loss.phi,
            });
        }

        let done = step + 1 == cfg.total_steps;
        if (step + 1) % cfg.eval_every == 0 || done {
            let eval_params = match cfg.eval_params {
                EvalSource::Raw => &params,
                EvalSource::Ema => &optim.ema,
            };
            let (test_error, cm) = eval_error(eval_params, ds, &fold.test)?;
            let collapsed = collapsed_classes(&cm, COLLAPSE_EPS);

            // Pseudo-label statistics over the whole unlabeled pool, from
            // the raw parameters on unaugmented points: this is what the
            // next training step would accept.
            let (coverage, purity, mean_weight) = if fold.unlabeled.is_empty() {
                (0.0, None, 0.0)
            } else {
                let probs: Vec<Vec<f64>> = fold
                    .unlabeled
                    .iter()
                    .map(|&i| mlp_forward(&params, ds.point(i)).map(|l| softmax(&l)))
                    .collect::<Result<_>>()?;
                if traced {
                    let mut accepted = Vec::new();
                    for (probs_i, &idx) in probs.iter().zip(&fold.unlabeled) {
                        let pl = crate::losses::pseudo_label(probs_i, &cfg.loss)?;
                        if pl.accepted() {
                            accepted.push(idx);
                        }
                    }
                    acceptance_sets.push(accepted);
                }
                let stats = pseudo_label_stats(&probs, &unlabeled_gts, &cfg.loss)?;
                (stats.coverage, stats.purity, stats.mean_weight)
            };

            let count = interval.3.max(1) as f64;
            checkpoints.push(CheckpointRecord {
                step: step + 1,
                test_error,
                coverage,
                purity,
                mean_weight,
                collapsed,
                loss_sup: interval.0 / count,
                loss_unsup: interval.1 / count,
                loss_phi: interval.2 / count,
            });
            interval = (0.0, 0.0, 0.0, 0);
            if done {
                final_confusion = Some(cm);
            }
            log::debug!(
                "step {}: test error {:.4}, coverage {:.3}",
                step + 1,
                test_error,
                coverage
            );
        }
    }

    let last = checkpoints.last().expect("at least one checkpoint");
    let (best_step, best_error) = checkpoints
        .iter()
        .map(|c| (c.step, c.test_error))
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)))
        .expect("at least one checkpoint");

    Ok(TracedRun {
        result: RunResult {
            config_hash: cfg.hash(),
            last_error: last.test_error,
            best_error,
            best_step,
            checkpoints,
            final_confusion: final_confusion.expect("final checkpoint recorded"),
            wall_clock_secs: start.elapsed().as_secs_f64(),
        },
        model: TrainedModel { raw: params, ema: optim.ema },
        step_trace,
        acceptance_sets,
    })
}

/// Trains one model per the configuration and reports checkpoint metrics.
pub fn run_training(cfg: &RunConfig) -> Result<RunResult> {
    let ds = cfg.build_dataset()?;
    let fold = cfg.build_fold(&ds)?;
    Ok(run_impl(cfg, &ds, &fold, false)?.result)
}

/// As [`run_training`], returning the trained model, per-step loss traces
/// and per-checkpoint pseudo-label acceptance sets.
pub fn run_training_traced(cfg: &RunConfig) -> Result<TracedRun> {
    let ds = cfg.build_dataset()?;
    let fold = cfg.build_fold(&ds)?;
    run_impl(cfg, &ds, &fold, true)
}

/// Runs a configuration against an explicit fold.
pub fn run_training_on_fold(cfg: &RunConfig, ds: &Dataset, fold: &FoldSpec) -> Result<RunResult> {
    Ok(run_impl(cfg, ds, fold, false)?.result)
}

/// One benchmark cell: a finished run or an isolated failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum CellOutcome {
    Completed { result: RunResult },
    Failed { message: String },
}

/// Column summary over completed cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnAggregate {
    pub variant: String,
    pub mean: f64,
    pub std: Option<f64>,
    pub max: f64,
    pub min: f64,
    pub range: f64,
    pub completed: usize,
}

/// Folds x variants result grid with per-column aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkTable {
    pub fold_seeds: Vec<u64>,
    pub variant_names: Vec<String>,
    /// `cells[fold][variant]`.
    pub cells: Vec<Vec<CellOutcome>>,
    pub aggregates: Vec<ColumnAggregate>,
}

impl BenchmarkTable {
    /// Last-checkpoint errors of one variant column, fold by fold.
    pub fn column_errors(&self, variant: &str) -> Result<Vec<f64>> {
        let j = self
            .variant_names
            .iter()
            .position(|v| v == variant)
            .ok_or_else(|| Error::input(format!("unknown variant column {variant}")))?;
        self.cells
            .iter()
            .enumerate()
            .map(|(i, row)| match &row[j] {
                CellOutcome::Completed { result } => Ok(result.last_error),
                CellOutcome::Failed { message } => Err(Error::input(format!(
                    "fold {} of column {variant} failed: {message}",
                    self.fold_seeds[i]
                ))),
            })
            .collect()
    }
}

fn aggregate_column(variant: &str, errors: &[f64]) -> ColumnAggregate {
    let n = errors.len() as f64;
    let mean = if errors.is_empty() { f64::NAN } else { errors.iter().sum::<f64>() / n };
    let std = if errors.len() > 1 {
        Some((errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (n - 1.0)).sqrt())
    } else {
        None
    };
    let max = errors.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = errors.iter().cloned().fold(f64::INFINITY, f64::min);
    ColumnAggregate { variant: variant.to_string(), mean, std, max, min, range: max - min, completed: errors.len() }
}

/// Cross product of folds and loss variants, one training run per cell.
/// Failures stay in their cell and never abort sibling runs. Runs execute in
/// parallel; results are keyed by position, so the table is independent of
/// scheduling.
pub fn run_benchmark(base: &RunConfig, folds: &[FoldSpec], variants: &[(String, LossConfig)]) -> Result<BenchmarkTable> {
    if folds.is_empty() {
        return Err(Error::input("benchmark needs at least one fold"));
    }
    if variants.is_empty() {
        return Err(Error::input("benchmark needs at least one variant"));
    }
    let ds = base.build_dataset()?;
    let jobs: Vec<(usize, usize)> =
        (0..folds.len()).flat_map(|i| (0..variants.len()).map(move |j| (i, j))).collect();
    let outcomes: Vec<((usize, usize), CellOutcome)> = jobs
        .par_iter()
        .map(|&(i, j)| {
            let mut cfg = base.clone();
            cfg.fold_seed = folds[i].fold_seed;
            cfg.loss = variants[j].1.clone();
            let outcome = match run_training_on_fold(&cfg, &ds, &folds[i]) {
                Ok(result) => CellOutcome::Completed { result },
                Err(e) => CellOutcome::Failed { message: e.to_string() },
            };
            ((i, j), outcome)
        })
        .collect();
    let mut cells: Vec<Vec<Option<CellOutcome>>> = vec![vec![None; variants.len()]; folds.len()];
    for ((i, j), outcome) in outcomes {
        cells[i][j] = Some(outcome);
    }
    let cells: Vec<Vec<CellOutcome>> = cells
        .into_iter()
        .map(|row| row.into_iter().map(|c| c.expect("every cell ran")).collect())
        .collect();
    let aggregates = variants
        .iter()
        .enumerate()
        .map(|(j, (name, _))| {
            let errors: Vec<f64> = cells
                .iter()
                .filter_map(|row| match &row[j] {
                    CellOutcome::Completed { result } => Some(result.last_error),
                    CellOutcome::Failed { .. } => None,
                })
                .collect();
            aggregate_column(name, &errors)
        })
        .collect();
    Ok(BenchmarkTable {
        fold_seeds: folds.iter().map(|f| f.fold_seed).collect(),
        variant_names: variants.iter().map(|(n, _)| n.clone()).collect(),
        cells,
        aggregates,
    })
}

/// Paired fold-wise comparison of two benchmark columns: gains, summary
/// statistics and the one-sided signed-rank test for the method improving on
/// the baseline.
pub fn compare_methods(table: &BenchmarkTable, baseline: &str, method: &str) -> Result<ComparisonReport> {
    let base_errors = table.column_errors(baseline)?;
    let method_errors = table.column_errors(method)?;
    let labels = table.fold_seeds.iter().map(|s| s.to_string()).collect();
    ComparisonReport::new(labels, base_errors, method_errors)
}

/// Calibration output: the smooth pair loss configured with the matched
/// weight, plus the break-even factor-loss bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOutcome {
    pub loss: LossConfig,
    pub lambda_u: f64,
    pub lambda_phi_bound: f64,
    pub estimate: EquilibriumEstimate,
}

/// Runs hard- and smooth-variant pilot runs over the early equilibrium
/// window ([5%, 10%] of the configured budget) and matches the smooth
/// variant's unsupervised weight to the hard variant's magnitude.
pub fn calibrate(base: &RunConfig) -> Result<CalibrationOutcome> {
    base.validate()?;
    let window_start = (base.total_steps as f64 * 0.05).floor() as u64;
    let window_end = (base.total_steps as f64 * 0.10).floor() as u64;
    if window_start == 0 || window_end <= window_start {
        return Err(Error::Calibration(format!(
            "budget of {} steps is too small for a [5%, 10%] pilot window",
            base.total_steps
        )));
    }

    let pilot = |variant: LossVariant| -> Result<Vec<StepTrace>> {
        let mut cfg = base.clone();
        cfg.loss.variant = variant;
        cfg.total_steps = window_end;
        cfg.eval_every = window_end; // single checkpoint at the end
        Ok(run_training_traced(&cfg)?.step_trace)
    };
    let window_mean = |trace: &[StepTrace], f: &dyn Fn(&StepTrace) -> f64| -> f64 {
        let slice = &trace[window_start as usize..window_end as usize];
        slice.iter().map(f).sum::<f64>() / slice.len() as f64
    };

    let fm_trace = pilot(LossVariant::Fm)?;
    let sfm_trace = pilot(LossVariant::Sfm)?;
    let l_fm = window_mean(&fm_trace, &|t| t.unsup);
    let l_phi = window_mean(&sfm_trace, &|t| t.mean_weight);
    let mean_unsup_sfm = window_mean(&sfm_trace, &|t| t.unsup);
    if l_phi <= 0.0 || mean_unsup_sfm <= 0.0 {
        return Err(Error::Calibration(format!(
            "pilot produced degenerate equilibrium values (mean factor {l_phi}, unsup {mean_unsup_sfm})"
        )));
    }
    // Factor-weighted cross-entropy magnitude: l_phi * l_sfm recovers the
    // smooth pilot's actual unsupervised term.
    let l_sfm = mean_unsup_sfm / l_phi;
    let estimate = EquilibriumEstimate { l_fm, l_sfm, l_phi, window: (window_start, window_end) };
    let lambda_u = calibrate_lambda_u(&estimate, base.loss.lambda_u)?;
    let bound = lambda_phi_bound(base.loss.tau, lambda_u, l_sfm)?;

    let mut loss = base.loss.clone();
    loss.variant = LossVariant::Sfm;
    loss.lambda_u = lambda_u;
    Ok(CalibrationOutcome { loss, lambda_u, lambda_phi_bound: bound, estimate })
}

/// Hyperparameter axes a sweep can vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Tau,
    Mu,
    Momentum,
    TrainSeed,
    NLabels,
    KeepFraction,
}

impl SweepAxis {
    pub fn apply(self, cfg: &mut RunConfig, value: f64) -> Result<()> {
        match self {
            SweepAxis::Tau => cfg.loss.tau = value,
            SweepAxis::Mu => cfg.loss.mu = value,
            SweepAxis::Momentum => cfg.optim.momentum = value,
            SweepAxis::TrainSeed => {
                if value < 0.0 || value.fract() != 0.0 {
                    return Err(Error::input("train seed values must be nonnegative integers"));
                }
                cfg.train_seed = value as u64;
            }
            SweepAxis::NLabels => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::input("n_labels values must be positive integers"));
                }
                match cfg.fold {
                    FoldParams::Random { .. } => cfg.fold = FoldParams::Random { n_labels: value as usize },
                    FoldParams::Balanced { .. } => {
                        return Err(Error::input("the n_labels axis needs the random fold protocol"))
                    }
                }
            }
            SweepAxis::KeepFraction => {
                let mut im = cfg.imbalance.unwrap_or(ImbalanceSpec {
                    keep_fraction: 1.0,
                    target_class: None,
                    seed: 0,
                });
                im.keep_fraction = value;
                cfg.imbalance = Some(im);
            }
        }
        Ok(())
    }
}

/// One sweep row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub outcome: CellOutcome,
}

/// Sweep results, plot-ready.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// CSV series `value,last_error,best_error,collapsed` for plotting; a
    /// failed run renders its message in place of numbers.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("value,last_error,best_error,collapsed\n");
        for row in &self.rows {
            match &row.outcome {
                CellOutcome::Completed { result } => {
                    let collapsed: Vec<String> =
                        result.checkpoints.last().map_or_else(Vec::new, |c| {
                            c.collapsed.iter().map(|k| k.to_string()).collect()
                        });
                    out.push_str(&format!(
                        "{},{},{},{}\n",
                        row.value,
                        result.last_error,
                        result.best_error,
                        collapsed.join(" ")
                    ));
                }
                CellOutcome::Failed { message } => {
                    out.push_str(&format!("{},failed,failed,{}\n", row.value, message.replace(',', ";")));
                }
            }
        }
        out
    }
}

/// One run per axis value, everything else fixed. Failures are isolated per
/// row.
pub fn sweep(base: &RunConfig, axis: SweepAxis, values: &[f64]) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(Error::input("sweep needs at least one value"));
    }
    let rows: Vec<SweepRow> = values
        .par_iter()
        .map(|&value| {
            let mut cfg = base.clone();
            let outcome = match axis.apply(&mut cfg, value).and_then(|()| run_training(&cfg)) {
                Ok(result) => CellOutcome::Completed { result },
                Err(e) => CellOutcome::Failed { message: e.to_string() },
            };
            SweepRow { value, outcome }
        })
        .collect();
    Ok(SweepTable { axis, rows })
}

/// Writes a value as pretty JSON. Rewriting identical data produces
/// identical bytes.
pub fn persist<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(value).map_err(|e| Error::Parse { path: path.to_path_buf(), source: e })?;
    std::fs::write(path, json + "\n").map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

/// Reads a value back from JSON, with path context on failure.
pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), source: e })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default_blobs();
        cfg.dataset = DatasetSpec::Blobs { n: 300, n_classes: 10, spread: 0.15, seed: 7 };
        cfg.hidden = vec![16];
        cfg.total_steps = 60;
        cfg.eval_every = 20;
        cfg
    }

    #[test]
    fn run_is_deterministic() {
        let cfg = tiny_cfg();
        let a = run_training(&cfg).unwrap();
        let b = run_training(&cfg).unwrap();
        assert_eq!(a, b);
        let ja = serde_json::to_string(&a).unwrap();
        let jb = serde_json::to_string(&b).unwrap();
        assert_eq!(ja, jb);
    }

    #[test]
    fn headline_is_last_checkpoint() {
        let cfg = tiny_cfg();
        let r = run_training(&cfg).unwrap();
        assert_eq!(r.last_error, r.checkpoints.last().unwrap().test_error);
        assert!(r.best_error <= r.last_error);
        assert_eq!(r.checkpoints.len(), 3);
        assert_eq!(r.checkpoints.last().unwrap().step, 60);
    }

    #[test]
    fn fold_depends_on_fold_seed_only() {
        let mut cfg = tiny_cfg();
        let ds = cfg.build_dataset().unwrap();
        let f1 = cfg.build_fold(&ds).unwrap();
        cfg.train_seed = 999;
        let f2 = cfg.build_fold(&ds).unwrap();
        assert_eq!(f1, f2);
        cfg.fold_seed = 5;
        let f3 = cfg.build_fold(&ds).unwrap();
        assert_ne!(f1.labeled, f3.labeled);
        assert_eq!(f1.test, f3.test);
    }

    #[test]
    fn supervised_degeneration_reaches_zero_labeled_error() {
        let mut cfg = tiny_cfg();
        cfg.loss.lambda_u = 0.0;
        cfg.total_steps = 400;
        cfg.eval_every = 400;
        let run = run_training_traced(&cfg).unwrap();
        let ds = cfg.build_dataset().unwrap();
        let fold = cfg.build_fold(&ds).unwrap();
        let (err, _) = eval_error(&run.model.raw, &ds, &fold.labeled).unwrap();
        assert_eq!(err, 0.0, "labeled set not memorized");
    }

    #[test]
    fn near_one_threshold_gives_zero_coverage_early() {
        let mut cfg = tiny_cfg();
        cfg.loss.variant = LossVariant::Spl;
        cfg.loss.tau = 0.999;
        cfg.total_steps = 10;
        cfg.eval_every = 5;
        let r = run_training(&cfg).unwrap();
        assert!(r.checkpoints[0].coverage < 0.01, "coverage = {}", r.checkpoints[0].coverage);
    }

    #[test]
    fn benchmark_grid_and_comparison() {
        let mut cfg = tiny_cfg();
        cfg.total_steps = 30;
        cfg.eval_every = 30;
        let ds = cfg.build_dataset().unwrap();
        let folds: Vec<FoldSpec> = (0..2)
            .map(|s| {
                let mut c = cfg.clone();
                c.fold_seed = s;
                c.build_fold(&ds).unwrap()
            })
            .collect();
        let variants = vec![
            ("fm".to_string(), LossConfig::new(LossVariant::Fm)),
            ("sfm".to_string(), LossConfig::new(LossVariant::Sfm)),
        ];
        let table = run_benchmark(&cfg, &folds, &variants).unwrap();
        assert_eq!(table.cells.len(), 2);
        assert_eq!(table.cells[0].len(), 2);
        assert_eq!(table.aggregates.len(), 2);
        assert_eq!(table.aggregates[0].completed, 2);

        let report = compare_methods(&table, "fm", "sfm").unwrap();
        assert_eq!(report.summary.gains.len(), 2);
        assert!(compare_methods(&table, "fm", "nope").is_err());

        // A single-cell benchmark equals a direct run.
        let single = run_benchmark(&cfg, &folds[..1], &variants[..1]).unwrap();
        match &single.cells[0][0] {
            CellOutcome::Completed { result } => {
                let mut direct_cfg = cfg.clone();
                direct_cfg.fold_seed = folds[0].fold_seed;
                direct_cfg.loss = variants[0].1.clone();
                let direct = run_training_on_fold(&direct_cfg, &ds, &folds[0]).unwrap();
                assert_eq!(*result, direct);
            }
            other => panic!("unexpected outcome {other:?}"),
        }
    }

    #[test]
    fn benchmark_isolates_failures() {
        let mut cfg = tiny_cfg();
        cfg.total_steps = 10;
        cfg.eval_every = 10;
        let ds = cfg.build_dataset().unwrap();
        let fold = cfg.build_fold(&ds).unwrap();
        let mut bad = LossConfig::new(LossVariant::Sfm);
        bad.tau = 0.3; // invalid: rejected per cell
        let variants = vec![
            ("good".to_string(), LossConfig::new(LossVariant::Fm)),
            ("bad".to_string(), bad),
        ];
        let table = run_benchmark(&cfg, &[fold], &variants).unwrap();
        assert!(matches!(table.cells[0][0], CellOutcome::Completed { .. }));
        assert!(matches!(table.cells[0][1], CellOutcome::Failed { .. }));
        assert!(table.column_errors("bad").is_err());
        assert_eq!(table.aggregates[1].completed, 0);
    }

    #[test]
    fn sweep_rows_match_values() {
        let mut cfg = tiny_cfg();
        cfg.total_steps = 20;
        cfg.eval_every = 20;
        let table = sweep(&cfg, SweepAxis::Tau, &[0.9, 0.95, 0.999]).unwrap();
        assert_eq!(table.rows.len(), 3);
        let csv = table.to_csv();
        assert!(csv.starts_with("value,last_error,best_error,collapsed\n"));
        assert_eq!(csv.lines().count(), 4);
        assert!(sweep(&cfg, SweepAxis::Tau, &[]).is_err());

        // Single-value sweep equals run_training.
        let single = sweep(&cfg, SweepAxis::Mu, &[1.0]).unwrap();
        match &single.rows[0].outcome {
            CellOutcome::Completed { result } => {
                let direct = run_training(&cfg).unwrap();
                assert_eq!(*result, direct);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn persist_round_trips() {
        let cfg = tiny_cfg();
        let r = run_training(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        persist(&r, &path).unwrap();
        let back: RunResult = load(&path).unwrap();
        assert_eq!(r, back);
        // Idempotent rewrite.
        let first = std::fs::read(&path).unwrap();
        persist(&back, &path).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());

        std::fs::write(&path, "{not json").unwrap();
        assert!(matches!(load::<RunResult>(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn config_hash_stable_and_sensitive() {
        let cfg = tiny_cfg();
        assert_eq!(cfg.hash(), cfg.hash());
        let mut other = cfg.clone();
        other.train_seed += 1;
        assert_ne!(cfg.hash(), other.hash());
    }

    #[test]
    fn lambda_zero_trajectory_is_variant_independent() {
        // With no unsupervised weight and no factor loss, every variant
        // degenerates to the same supervised trajectory.
        let mut a = tiny_cfg();
        a.loss.lambda_u = 0.0;
        a.loss.variant = LossVariant::Sfm;
        let mut b = a.clone();
        b.loss.variant = LossVariant::Pl;
        let ra = run_training(&a).unwrap();
        let rb = run_training(&b).unwrap();
        let errs_a: Vec<f64> = ra.checkpoints.iter().map(|c| c.test_error).collect();
        let errs_b: Vec<f64> = rb.checkpoints.iter().map(|c| c.test_error).collect();
        assert_eq!(errs_a, errs_b);
        assert_eq!(ra.final_confusion, rb.final_confusion);
    }
}
