//! Leave-one-subject-out evaluation, pseudo-real-time sessions and the
//! linear SVM baseline.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::dataio::{split, SplitSpec};
use crate::error::{param_err, Error, Result};
use crate::optim::{Network, TrainConfig};
use crate::rng::Rng;
use crate::synth::EpochSet;
use crate::tensor::Tensor;

const STREAM_SPLIT: u64 = 0x5B17;
const STREAM_FOLD: u64 = 0xF01D;
const STREAM_ORDER: u64 = 0x0DE5;
const STREAM_SVM: u64 = 0x5F11;

/// Trials predicted between updates in a pseudo-real-time session.
pub const REALTIME_BATCH: usize = 20;

/// A classifier that can be refined one labelled trial at a time.
pub trait IncrementalClassifier {
    fn predict(&self, epoch: &Tensor) -> Result<usize>;

    /// One update step on a single trial. `learning_rate == 0` must leave the model unchanged.
    fn update(&mut self, epoch: &Tensor, label: usize, learning_rate: f64) -> Result<()>;
}

impl IncrementalClassifier for Network {
    fn predict(&self, epoch: &Tensor) -> Result<usize> {
        Network::predict(self, epoch)
    }

    fn update(&mut self, epoch: &Tensor, label: usize, learning_rate: f64) -> Result<()> {
        // No optimizer bookkeeping either, so a frozen session leaves the model byte-identical.
        if learning_rate == 0.0 {
            return Ok(());
        }
        let tc = TrainConfig {
            learning_rate,
            ..TrainConfig::default()
        };
        self.online_update(epoch, label, &tc)
    }
}

/// `confusion[true][predicted]`.
pub fn confusion_matrix<C: IncrementalClassifier + Sync>(model: &C, set: &EpochSet) -> Result<Vec<Vec<usize>>> {
    let preds: Vec<usize> = (0..set.n_trials())
        .into_par_iter()
        .map(|i| model.predict(&set.epoch(i)))
        .collect::<Result<_>>()?;
    let mut m = vec![vec![0; set.n_classes]; set.n_classes];
    for (&y, &p) in set.labels.iter().zip(&preds) {
        if p >= set.n_classes {
            return Err(Error::Contract(format!("prediction {p} out of range")));
        }
        m[y][p] += 1;
    }
    Ok(m)
}

pub fn confusion_accuracy(m: &[Vec<usize>]) -> f64 {
    let total: usize = m.iter().flatten().sum();
    let hit: usize = (0..m.len()).map(|i| m[i][i]).sum();
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

pub fn accuracy<C: IncrementalClassifier + Sync>(model: &C, set: &EpochSet) -> Result<f64> {
    Ok(confusion_accuracy(&confusion_matrix(model, set)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdatePolicy {
    All,
    CorrectOnly,
}

impl std::str::FromStr for UpdatePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" | "update_all" => Ok(UpdatePolicy::All),
            "correct-only" | "correct_only" | "update_correct_only" => Ok(UpdatePolicy::CorrectOnly),
            other => param_err(format!("unknown update policy `{other}` (expected all or correct-only)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RealtimeConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub policy: UpdatePolicy,
    /// Seed of the trial presentation order.
    pub order_seed: u64,
}

impl Default for RealtimeConfig {
    fn default() -> Self {
        Self {
            batch_size: REALTIME_BATCH,
            learning_rate: TrainConfig::default().learning_rate,
            policy: UpdatePolicy::All,
            order_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RealtimeTrace {
    /// Trial indices in presentation order.
    pub order: Vec<usize>,
    pub predictions: Vec<usize>,
    pub batch_accuracies: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    /// Fraction of all presented trials predicted correctly.
    pub accuracy: f64,
    pub updates: usize,
    pub order_seed: u64,
}

impl RealtimeTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("batch,size,accuracy\n");
        for (i, (a, n)) in self.batch_accuracies.iter().zip(&self.batch_sizes).enumerate() {
            let _ = writeln!(s, "{i},{n},{a}");
        }
        s
    }
}

/// Sequential session: each batch is predicted in full before any of its
/// labels is used for updating.
pub fn pseudo_realtime<C: IncrementalClassifier>(model: &mut C, test: &EpochSet, cfg: &RealtimeConfig) -> Result<RealtimeTrace> {
    if cfg.batch_size == 0 {
        return param_err("realtime batch size must be >= 1");
    }
    if test.n_trials() == 0 {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let mut order: Vec<usize> = (0..test.n_trials()).collect();
    Rng::substream(cfg.order_seed, &[STREAM_ORDER]).shuffle(&mut order);

    let mut predictions = Vec::with_capacity(order.len());
    let mut batch_accuracies = Vec::new();
    let mut batch_sizes = Vec::new();
    let mut correct = 0usize;
    let mut updates = 0usize;
    for chunk in order.chunks(cfg.batch_size) {
        let epochs: Vec<Tensor> = chunk.iter().map(|&i| test.epoch(i)).collect();
        let preds = epochs.iter().map(|e| model.predict(e)).collect::<Result<Vec<_>>>()?;
        let hits = chunk.iter().zip(&preds).filter(|(&i, &p)| test.labels[i] == p).count();
        correct += hits;
        batch_accuracies.push(hits as f64 / chunk.len() as f64);
        batch_sizes.push(chunk.len());
        for ((&i, e), &p) in chunk.iter().zip(&epochs).zip(&preds) {
            let y = test.labels[i];
            if cfg.policy == UpdatePolicy::CorrectOnly && p != y {
                continue;
            }
            model.update(e, y, cfg.learning_rate)?;
            updates += 1;
        }
        predictions.extend(preds);
    }
    Ok(RealtimeTrace {
        accuracy: correct as f64 / order.len() as f64,
        order,
        predictions,
        batch_accuracies,
        batch_sizes,
        updates,
        order_seed: cfg.order_seed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub subject: usize,
    pub validation_accuracy: f64,
    pub initial_accuracy: f64,
    pub realtime_accuracy: Option<f64>,
    pub confusion: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub model_name: String,
    /// One entry per held-out subject; `Err` holds the failure message.
    pub folds: Vec<(usize, std::result::Result<FoldResult, String>)>,
}

/// Mean and sample standard deviation (divisor `m - 1`; 0 for a single value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let m = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / m;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
    (mean, var.sqrt())
}

impl EvalReport {
    pub fn successful(&self) -> impl Iterator<Item = &FoldResult> {
        self.folds.iter().filter_map(|(_, r)| r.as_ref().ok())
    }

    pub fn validation(&self) -> (f64, f64) {
        mean_sd(&self.successful().map(|f| f.validation_accuracy).collect::<Vec<_>>())
    }

    pub fn initial(&self) -> (f64, f64) {
        mean_sd(&self.successful().map(|f| f.initial_accuracy).collect::<Vec<_>>())
    }

    pub fn realtime(&self) -> Option<(f64, f64)> {
        let v: Option<Vec<f64>> = self.successful().map(|f| f.realtime_accuracy).collect();
        v.filter(|v| !v.is_empty()).map(|v| mean_sd(&v))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,subject,validation,initial_test,pseudo_realtime,status\n");
        for (subject, r) in &self.folds {
            match r {
                Ok(f) => {
                    let rt = f.realtime_accuracy.map_or(String::new(), |v| v.to_string());
                    let _ = writeln!(
                        s,
                        "{},{subject},{},{},{rt},ok",
                        self.model_name, f.validation_accuracy, f.initial_accuracy
                    );
                }
                Err(e) => {
                    let _ = writeln!(s, "{},{subject},,,,failed: {}", self.model_name, e.replace(',', ";"));
                }
            }
        }
        s
    }

    /// Aligned text table with one row per subject and a mean ± SD row, in percent.
    pub fn to_table(&self) -> String {
        let pct = |v: f64| format!("{:.1}", 100.0 * v);
        let pm = |(m, sd): (f64, f64)| format!("{:.1} ± {:.1}", 100.0 * m, 100.0 * sd);
        let mut rows = vec![[
            "Model".to_string(),
            "Subject".into(),
            "Validation".into(),
            "Initial test".into(),
            "Pseudo-real-time".into(),
        ]];
        for (subject, r) in &self.folds {
            rows.push(match r {
                Ok(f) => [
                    self.model_name.clone(),
                    subject.to_string(),
                    pct(f.validation_accuracy),
                    pct(f.initial_accuracy),
                    f.realtime_accuracy.map_or("-".into(), pct),
                ],
                Err(_) => [
                    self.model_name.clone(),
                    subject.to_string(),
                    "failed".into(),
                    "-".into(),
                    "-".into(),
                ],
            });
        }
        rows.push([
            self.model_name.clone(),
            "mean ± SD".into(),
            pm(self.validation()),
            pm(self.initial()),
            self.realtime().map_or("-".into(), pm),
        ]);
        let widths: Vec<usize> = (0..5)
            .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut s = String::new();
        for (i, r) in rows.iter().enumerate() {
            let cells: Vec<String> = r
                .iter()
                .zip(&widths)
                .map(|(cell, &w)| format!("{cell:<w$}"))
                .collect();
            let _ = writeln!(s, "{}", cells.join(" | ").trim_end());
            if i == 0 {
                let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
                let _ = writeln!(s, "{}", rule.join("-|-"));
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LosoConfig {
    pub validation_fraction: f64,
    pub seed: u64,
    /// Run a pseudo-real-time session on each held-out subject.
    pub realtime: Option<RealtimeConfig>,
    /// Evaluate folds concurrently.
    pub parallel_folds: bool,
}

impl Default for LosoConfig {
    fn default() -> Self {
        Self {
            validation_fraction: 0.1,
            seed: 0,
            realtime: Some(RealtimeConfig::default()),
            parallel_folds: false,
        }
    }
}

/// Seed handed to the model factory for the fold holding out `subject`.
pub fn fold_seed(seed: u64, subject: usize) -> u64 {
    crate::rng::derive_seed(seed, &[STREAM_FOLD, subject as u64])
}

/// The `(train, validation, test)` split used for the fold holding out `subject`.
pub fn loso_split(
    set: &EpochSet,
    subject: usize,
    validation_fraction: f64,
    seed: u64,
) -> Result<(EpochSet, EpochSet, EpochSet)> {
    let spec = SplitSpec {
        held_out_subject: subject,
        validation_fraction,
    };
    split(set, &spec, &mut Rng::substream(seed, &[STREAM_SPLIT, subject as u64]))
}

/// Trains one fresh model per held-out subject via `fit(train, validation, fold_seed)`.
pub fn loso_evaluate<C, F>(set: &EpochSet, model_name: &str, fit: F, cfg: &LosoConfig) -> Result<EvalReport>
where
    C: IncrementalClassifier + Sync,
    F: Fn(&EpochSet, &EpochSet, u64) -> Result<C> + Sync,
{
    let subjects = set.subject_ids();
    if subjects.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: subjects.len(),
        });
    }
    let run = |&subject: &usize| -> (usize, std::result::Result<FoldResult, String>) {
        let fold = || -> Result<FoldResult> {
            let (train, val, test) = loso_split(set, subject, cfg.validation_fraction, cfg.seed)?;
            let mut model = fit(&train, &val, fold_seed(cfg.seed, subject))?;
            let confusion = confusion_matrix(&model, &test)?;
            let validation_accuracy = accuracy(&model, &val)?;
            let realtime_accuracy = match &cfg.realtime {
                Some(rt) => {
                    let rt = RealtimeConfig {
                        order_seed: fold_seed(cfg.seed, subject),
                        ..rt.clone()
                    };
                    Some(pseudo_realtime(&mut model, &test, &rt)?.accuracy)
                }
                None => None,
            };
            Ok(FoldResult {
                subject,
                validation_accuracy,
                initial_accuracy: confusion_accuracy(&confusion),
                realtime_accuracy,
                confusion,
            })
        };
        (subject, fold().map_err(|e| e.to_string()))
    };
    let folds = if cfg.parallel_folds {
        subjects.par_iter().map(run).collect()
    } else {
        subjects.iter().map(run).collect()
    };
    Ok(EvalReport {
        model_name: model_name.to_string(),
        folds,
    })
}

/// One-sided binomial p-value, `P(X >= successes)` for `X ~ Bin(trials, p)`.
pub fn binomial_p_value(successes: usize, trials: usize, p: f64) -> f64 {
    if successes == 0 {
        return 1.0;
    }
    if successes > trials {
        return 0.0;
    }
    let (lp, lq) = (p.ln(), (1.0 - p).ln());
    let n = trials as f64;
    // log C(n, k), built incrementally.
    let mut log_choose = 0.0;
    let mut tail = 0.0;
    for k in 0..=trials {
        if k > 0 {
            log_choose += ((n - k as f64 + 1.0) / k as f64).ln();
        }
        if k >= successes {
            tail += (log_choose + k as f64 * lp + (trials - k) as f64 * lq).exp();
        }
    }
    tail.min(1.0)
}

/// C values searched by [`LinearSvm::train`]: 5 log-spaced points in [1e3, 1e5].
pub fn default_c_grid() -> Vec<f64> {
    (0..5).map(|i| 10f64.powf(3.0 + 0.5 * i as f64)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmConfig {
    pub c_grid: Vec<f64>,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            c_grid: default_c_grid(),
            epochs: 20,
            seed: 0,
        }
    }
}

/// One-vs-rest linear SVM over flattened `channels × time` features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSvm {
    /// `n_classes × (d + 1)`; the last column is the bias.
    pub weights: Tensor,
    pub c: f64,
    /// l2 penalty per trial, `1 / (C · n_train)`.
    pub lambda: f64,
    /// Step size of the last training update; online steps are `learning_rate` times this.
    pub base_step: f64,
    pub validation_accuracy: f64,
}

impl LinearSvm {
    pub fn n_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn margins(&self, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.weights.cols() - 1;
        if x.len() != d {
            return Err(Error::Dimension {
                op: "svm margins",
                lhs: vec![x.len()],
                rhs: vec![d],
            });
        }
        Ok((0..self.n_classes())
            .map(|c| {
                let w = self.weights.row(c);
                w[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[d]
            })
            .collect())
    }

    fn step(&mut self, x: &[f64], label: usize, eta: f64) {
        let d = x.len();
        let shrink = 1.0 - eta * self.lambda;
        for c in 0..self.n_classes() {
            let y = if c == label { 1.0 } else { -1.0 };
            let w = self.weights.row_mut(c);
            let margin = y * (w[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[d]);
            for v in &mut w[..d] {
                *v *= shrink;
            }
            if margin < 1.0 {
                for (v, &xi) in w[..d].iter_mut().zip(x) {
                    *v += eta * y * xi;
                }
                w[d] += eta * y;
            }
        }
    }

    fn fit_one(train: &EpochSet, c: f64, epochs: usize, seed: u64) -> Self {
        let n = train.n_trials();
        let d = train.n_channels() * train.n_times();
        let mean_sq = (0..n)
            .map(|i| train.trial(i).iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            / n as f64;
        let eta0 = 1.0 / (mean_sq + 1.0);
        let lambda = 1.0 / (c * n as f64);
        let mut svm = LinearSvm {
            weights: Tensor::zeros(&[train.n_classes, d + 1]),
            c,
            lambda,
            base_step: eta0,
            validation_accuracy: 0.0,
        };
        let mut rng = Rng::substream(seed, &[STREAM_SVM, c.to_bits()]);
        let mut order: Vec<usize> = (0..n).collect();
        let mut t = 0usize;
        for _ in 0..epochs {
            rng.shuffle(&mut order);
            for &i in &order {
                let eta = eta0 / (1.0 + t as f64 / n as f64).sqrt();
                svm.step(train.trial(i), train.labels[i], eta);
                svm.base_step = eta;
                t += 1;
            }
        }
        svm
    }

    /// Trains one model per C value and keeps the one with the best validation
    /// accuracy (ties go to the smaller C).
    pub fn train(train: &EpochSet, val: &EpochSet, cfg: &SvmConfig) -> Result<Self> {
        let classes: std::collections::BTreeSet<usize> = train.labels.iter().copied().collect();
        if classes.len() < 2 {
            return param_err("SVM training set must contain at least two classes");
        }
        if cfg.c_grid.is_empty() || cfg.c_grid.iter().any(|&c| !(c > 0.0)) {
            return param_err("C grid must be non-empty and positive");
        }
        if val.n_trials() == 0 || val.n_channels() * val.n_times() != train.n_channels() * train.n_times() {
            return param_err("validation set empty or shaped differently from training set");
        }
        let fitted: Vec<LinearSvm> = cfg
            .c_grid
            .par_iter()
            .map(|&c| {
                let mut m = Self::fit_one(train, c, cfg.epochs, cfg.seed);
                m.validation_accuracy = accuracy(&m, val)?;
                Ok(m)
            })
            .collect::<Result<_>>()?;
        let mut best = 0;
        for (i, m) in fitted.iter().enumerate() {
            if m.validation_accuracy > fitted[best].validation_accuracy {
                best = i;
            }
        }
        Ok(fitted.into_iter().nth(best).unwrap())
    }
}

impl IncrementalClassifier for LinearSvm {
    /// Largest margin; ties go to the lowest class index.
    fn predict(&self, epoch: &Tensor) -> Result<usize> {
        Ok(crate::model::argmax(&self.margins(epoch.data())?))
    }

    fn update(&mut self, epoch: &Tensor, label: usize, learning_rate: f64) -> Result<()> {
        if label >= self.n_classes() {
            return param_err(format!("label {label} out of range"));
        }
        if learning_rate == 0.0 {
            return Ok(());
        }
        self.margins(epoch.data())?;
        let eta = learning_rate * self.base_step;
        self.step(epoch.data(), label, eta);
        Ok(())
    }
}
