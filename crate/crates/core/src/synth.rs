//! Synthetic epochs from a latent-source mixing model.
//!
//! Each trial is `X = C·S + E`: `k` latent time courses `S` follow univariate
//! autoregressive dynamics, are mixed into `n` channels by a subject-specific
//! matrix `C`, and white Gaussian sensor noise `E` is added. Classes differ
//! through additive evoked waveforms on designated sources, through gain
//! modulation of a source's innovation variance (induced activity), or through
//! an optional lagged coupling between two sources.
//!
//! Every trial owns a random substream keyed by `(seed, subject, class, trial)`,
//! so generation is bitwise reproducible and independent of thread count.

use rayon::prelude::*;

use crate::error::{param_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

const STREAM_MIXING: u64 = 0x6d69_78;
const STREAM_BASE: u64 = 0x6261_7365;
const STREAM_TRIAL: u64 = 0x7472_6961;

/// Lower bound on discarded samples; slowly decaying resonators need far more than `10·L`.
const MIN_BURN_IN: usize = 250;

/// One latent source: AR dynamics plus class-dependent modulation.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSourceSpec {
    /// `a_1..a_L` of `s[t] = sum_l a_l s[t-l] + w[t]`.
    pub ar_coeffs: Vec<f64>,
    pub innovation_std: f64,
    /// Post-stimulus waveform added on the classes listed in `evoked_classes`.
    pub evoked_waveform: Option<Tensor>,
    pub evoked_classes: Vec<usize>,
    /// Per-class multiplier of `innovation_std` after stimulus onset. Empty means 1 for all.
    pub class_gain: Vec<f64>,
    /// Resonance implied by `ar_coeffs`, for documentation and checks.
    pub peak_freq_hz: Option<f64>,
}

impl LatentSourceSpec {
    pub fn white(innovation_std: f64) -> Self {
        Self {
            ar_coeffs: vec![],
            innovation_std,
            evoked_waveform: None,
            evoked_classes: vec![],
            class_gain: vec![],
            peak_freq_hz: None,
        }
    }

    pub fn ar1(a: f64, innovation_std: f64) -> Self {
        Self {
            ar_coeffs: vec![a],
            ..Self::white(innovation_std)
        }
    }

    /// Damped resonator: `a1 = 2r·cos(2π f0/fs)`, `a2 = -r²`.
    pub fn resonator(f0_hz: f64, radius: f64, fs_hz: f64, innovation_std: f64) -> Self {
        let theta = 2.0 * std::f64::consts::PI * f0_hz / fs_hz;
        Self {
            ar_coeffs: vec![2.0 * radius * theta.cos(), -radius * radius],
            peak_freq_hz: Some(f0_hz),
            ..Self::white(innovation_std)
        }
    }

    pub fn with_evoked(mut self, waveform: Tensor, classes: &[usize]) -> Self {
        self.evoked_waveform = Some(waveform);
        self.evoked_classes = classes.to_vec();
        self
    }

    pub fn with_class_gain(mut self, gains: &[f64]) -> Self {
        self.class_gain = gains.to_vec();
        self
    }

    pub fn order(&self) -> usize {
        self.ar_coeffs.len()
    }

    pub fn gain(&self, class_idx: usize) -> f64 {
        self.class_gain.get(class_idx).copied().unwrap_or(1.0)
    }

    pub fn is_evoked(&self, class_idx: usize) -> bool {
        self.evoked_waveform.is_some() && self.evoked_classes.contains(&class_idx)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.innovation_std > 0.0) || !self.innovation_std.is_finite() {
            return param_err(format!(
                "innovation_std must be positive, got {}",
                self.innovation_std
            ));
        }
        if let Some(g) = self.class_gain.iter().find(|g| !(**g > 0.0) || !g.is_finite()) {
            return param_err(format!("class gains must be positive, got {g}"));
        }
        if !is_stable(&self.ar_coeffs) {
            return Err(Error::Stability(format!(
                "coefficients {:?} have a root on or outside the unit circle",
                self.ar_coeffs
            )));
        }
        Ok(())
    }

    /// Stationary variance of the AR process at unit gain.
    pub fn stationary_variance(&self) -> f64 {
        self.innovation_std.powi(2) * impulse_energy(&self.ar_coeffs)
    }
}

/// Step-down (Schur-Cohn) test: all roots of `1 - sum a_l z^-l` strictly
/// inside the unit circle iff every reflection coefficient has magnitude < 1.
pub fn is_stable(ar_coeffs: &[f64]) -> bool {
    if ar_coeffs.iter().any(|a| !a.is_finite()) {
        return false;
    }
    let mut c: Vec<f64> = std::iter::once(1.0)
        .chain(ar_coeffs.iter().map(|a| -a))
        .collect();
    for m in (1..c.len()).rev() {
        let k = c[m];
        if k.abs() >= 1.0 {
            return false;
        }
        let denom = 1.0 - k * k;
        let next: Vec<f64> = (0..m).map(|i| (c[i] - k * c[m - i]) / denom).collect();
        c = next;
    }
    true
}

/// Sum of squared impulse-response taps of `1 / (1 - sum a_l z^-l)`.
fn impulse_energy(ar_coeffs: &[f64]) -> f64 {
    let order = ar_coeffs.len();
    if order == 0 {
        return 1.0;
    }
    let mut psi: Vec<f64> = vec![1.0];
    let mut energy = 1.0;
    for t in 1..200_000 {
        let v: f64 = (1..=order.min(t)).map(|l| ar_coeffs[l - 1] * psi[t - l]).sum();
        psi.push(v);
        energy += v * v;
        if t > 10 * order && psi[t + 1 - order..].iter().all(|p| p.abs() < 1e-12) {
            break;
        }
    }
    energy
}

/// Lagged influence of one source on another, active on the listed classes.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceCoupling {
    pub from: usize,
    pub to: usize,
    pub lag: usize,
    pub coeff: f64,
    pub classes: Vec<usize>,
}

/// Simulates one source for `n_times` samples at the gain of `class_idx`,
/// after discarding a burn-in of at least `10·L` samples.
pub fn simulate_source(
    spec: &LatentSourceSpec,
    n_times: usize,
    class_idx: usize,
    rng: &mut Rng,
) -> Result<Tensor> {
    spec.validate()?;
    if n_times <= spec.order() {
        return param_err(format!(
            "n_times ({n_times}) must exceed the AR order ({})",
            spec.order()
        ));
    }
    let out = run_sources(&[spec], None, 0, n_times, class_idx, true, rng);
    Tensor::vector(out).and_then(|t| t.ensure_finite("simulate_source"))
}

/// Joint simulation of all sources. Returns a row-major `k × (baseline + post)`
/// buffer. Burn-in and baseline run at unit gain unless `gain_in_burn_in`.
fn run_sources(
    specs: &[&LatentSourceSpec],
    coupling: Option<&SourceCoupling>,
    baseline: usize,
    post: usize,
    class_idx: usize,
    gain_in_burn_in: bool,
    rng: &mut Rng,
) -> Vec<f64> {
    let k = specs.len();
    let max_order = specs.iter().map(|s| s.order()).max().unwrap_or(0);
    let lag = coupling.map_or(0, |c| c.lag);
    let order = max_order.max(lag);
    let burn = if order == 0 { 0 } else { (10 * order).max(MIN_BURN_IN) };
    let total = burn + baseline + post;
    let coupling = coupling.filter(|c| c.classes.contains(&class_idx));
    let mut s = vec![0.0; k * total];
    for t in 0..total {
        let in_post = t >= burn + baseline;
        for (j, spec) in specs.iter().enumerate() {
            let gain = if in_post || gain_in_burn_in {
                spec.gain(class_idx)
            } else {
                1.0
            };
            let row = &s[j * total..(j + 1) * total];
            let mut v: f64 = spec
                .ar_coeffs
                .iter()
                .enumerate()
                .filter(|(l, _)| t > *l)
                .map(|(l, a)| a * row[t - l - 1])
                .sum();
            if let Some(c) = coupling {
                if c.to == j && t >= c.lag && in_post {
                    v += c.coeff * s[c.from * total + t - c.lag];
                }
            }
            v += spec.innovation_std * gain * rng.next_normal();
            s[j * total + t] = v;
        }
    }
    let len = baseline + post;
    let mut out = Vec::with_capacity(k * len);
    for (j, spec) in specs.iter().enumerate() {
        let start = j * total + burn;
        let mut row = s[start..start + len].to_vec();
        if spec.is_evoked(class_idx) {
            let w = spec.evoked_waveform.as_ref().expect("evoked waveform");
            for (v, e) in row[baseline..].iter_mut().zip(w.data()) {
                *v += e;
            }
        }
        out.extend(row);
    }
    out
}

/// Hann-windowed bump of `width` samples centred at `center`, peak `amplitude`.
pub fn hann_bump(n_times: usize, center: f64, width: f64, amplitude: f64) -> Tensor {
    let data = (0..n_times)
        .map(|i| {
            let x = (i as f64 - center) / width;
            if x.abs() < 0.5 {
                amplitude * (std::f64::consts::PI * x).cos().powi(2)
            } else {
                0.0
            }
        })
        .collect();
    Tensor::vector(data).expect("finite bump")
}

/// Random mixing matrix with unit-norm columns.
pub fn random_mixing(n_channels: usize, n_latent: usize, rng: &mut Rng) -> Result<Tensor> {
    let mut c = rng.normal(0.0, 1.0, &[n_channels, n_latent])?;
    normalize_columns(&mut c);
    Ok(c)
}

fn normalize_columns(c: &mut Tensor) {
    let (n, k) = (c.rows(), c.cols());
    for j in 0..k {
        let norm = (0..n).map(|i| c.at(i, j).powi(2)).sum::<f64>().sqrt();
        if norm > 0.0 {
            for i in 0..n {
                c.data_mut()[i * k + j] /= norm;
            }
        }
    }
}

/// Complete parameterization of a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub n_channels: usize,
    pub n_latent: usize,
    /// Post-stimulus samples per epoch.
    pub n_times: usize,
    /// Pre-stimulus samples prepended to each epoch (no evoked activity, unit gain).
    pub baseline_len: usize,
    pub sample_rate_hz: f64,
    pub sources: Vec<LatentSourceSpec>,
    pub base_mixing: Tensor,
    pub noise_std: f64,
    pub n_subjects: usize,
    /// Relative size of the per-subject perturbation of each mixing column.
    pub subject_mixing_jitter: f64,
    pub trials_per_class_per_subject: usize,
    pub n_classes: usize,
    pub coupling: Option<SourceCoupling>,
    pub seed: u64,
}

/// Samples spanning 300 ms at `fs`.
pub fn baseline_samples(fs_hz: f64) -> usize {
    (0.3 * fs_hz).round() as usize
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_latent == 0 || self.n_latent >= self.n_channels {
            return param_err(format!(
                "n_latent ({}) must be in 1..n_channels ({})",
                self.n_latent, self.n_channels
            ));
        }
        if self.sources.len() != self.n_latent {
            return param_err(format!(
                "{} sources given for n_latent = {}",
                self.sources.len(),
                self.n_latent
            ));
        }
        if self.base_mixing.shape() != [self.n_channels, self.n_latent] {
            return Err(Error::Dimension {
                op: "GenConfig::base_mixing",
                lhs: self.base_mixing.shape().to_vec(),
                rhs: vec![self.n_channels, self.n_latent],
            });
        }
        for j in 0..self.n_latent {
            let norm: f64 = (0..self.n_channels)
                .map(|i| self.base_mixing.at(i, j).powi(2))
                .sum::<f64>()
                .sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return param_err(format!("mixing column {j} has norm {norm}, expected 1"));
            }
        }
        if !(self.noise_std >= 0.0) || !(self.subject_mixing_jitter >= 0.0) {
            return param_err("noise_std and subject_mixing_jitter must be >= 0");
        }
        if self.n_classes == 0 || self.n_subjects == 0 || self.trials_per_class_per_subject == 0 {
            return param_err("n_classes, n_subjects and trials_per_class_per_subject must be >= 1");
        }
        if !(self.sample_rate_hz > 0.0) {
            return param_err("sample_rate_hz must be positive");
        }
        for (j, src) in self.sources.iter().enumerate() {
            src.validate()?;
            if n_times_exceeds(src, self.n_times).is_err() {
                return param_err(format!("source {j}: n_times must exceed the AR order"));
            }
            if let Some(w) = &src.evoked_waveform {
                if w.len() != self.n_times {
                    return param_err(format!(
                        "source {j}: evoked waveform has {} samples, expected {}",
                        w.len(),
                        self.n_times
                    ));
                }
            }
            if src.evoked_classes.iter().any(|&c| c >= self.n_classes) {
                return param_err(format!("source {j}: evoked class out of range"));
            }
        }
        if let Some(c) = &self.coupling {
            if c.from == c.to || c.from >= self.n_latent || c.to >= self.n_latent || c.lag == 0 {
                return param_err("coupling needs distinct in-range sources and lag >= 1");
            }
        }
        Ok(())
    }

    pub fn n_trials(&self) -> usize {
        self.n_subjects * self.n_classes * self.trials_per_class_per_subject
    }

    /// Analytic channel-level SNR: mean evoked power per channel and sample
    /// (averaged over classes, base mixing) over background power per channel
    /// (sensor noise plus stationary source variance at unit gain).
    pub fn channel_snr(&self) -> f64 {
        let (n, k, t) = (self.n_channels, self.n_latent, self.n_times);
        let mut evoked_power = 0.0;
        for class in 0..self.n_classes {
            for ti in 0..t {
                for i in 0..n {
                    let v: f64 = (0..k)
                        .filter(|&j| self.sources[j].is_evoked(class))
                        .map(|j| {
                            let w = self.sources[j].evoked_waveform.as_ref().unwrap();
                            self.base_mixing.at(i, j) * w.data()[ti]
                        })
                        .sum();
                    evoked_power += v * v;
                }
            }
        }
        evoked_power /= (self.n_classes * n * t) as f64;
        let background: f64 = self.noise_std.powi(2)
            + (0..k)
                .map(|j| {
                    let col: f64 = (0..n).map(|i| self.base_mixing.at(i, j).powi(2)).sum();
                    col * self.sources[j].stationary_variance()
                })
                .sum::<f64>()
                / n as f64;
        evoked_power / background
    }

    /// Rescales every evoked waveform so that [`Self::channel_snr`] equals `target`.
    pub fn scale_evoked_to_snr(&mut self, target: f64) {
        let current = self.channel_snr();
        if current > 0.0 {
            let factor = (target / current).sqrt();
            for src in &mut self.sources {
                if let Some(w) = &mut src.evoked_waveform {
                    w.data_mut().iter_mut().for_each(|v| *v *= factor);
                }
            }
        }
    }

    /// Desk-scale evoked task: 5 classes, each with its own source and latency.
    ///
    /// Sources 0..5 carry Hann bumps at 100..300 ms on their class; source 5 is
    /// a 10 Hz resonator, source 6 a slow drift, source 7 a high-variance
    /// artifact-like source. No source other than 0..5 carries class information.
    pub fn evoked_default(seed: u64) -> Self {
        Self::evoked(64, 125, 300, seed)
    }

    /// [`Self::evoked_default`] with a chosen channel count, epoch length (at
    /// 125 Hz, excluding the baseline) and trials per class and subject.
    pub fn evoked(n_channels: usize, n_times: usize, trials_per_class_per_subject: usize, seed: u64) -> Self {
        let fs = 125.0;
        let n_classes = 5;
        let mut sources: Vec<LatentSourceSpec> = (0..n_classes)
            .map(|c| {
                let center = (0.10 + 0.05 * c as f64) * fs;
                LatentSourceSpec::ar1(0.8, 0.5)
                    .with_evoked(hann_bump(n_times, center, 0.12 * fs, 1.0), &[c])
            })
            .collect();
        sources.push(LatentSourceSpec::resonator(10.0, 0.95, fs, 0.3));
        sources.push(LatentSourceSpec::ar1(0.97, 0.3));
        sources.push(LatentSourceSpec::ar1(0.95, 0.45));
        let mut rng = Rng::substream(seed, &[STREAM_BASE]);
        let base_mixing = random_mixing(n_channels, sources.len(), &mut rng).expect("valid mixing");
        let mut cfg = Self {
            n_channels,
            n_latent: sources.len(),
            n_times,
            baseline_len: baseline_samples(fs),
            sample_rate_hz: fs,
            sources,
            base_mixing,
            noise_std: 1.0,
            n_subjects: 7,
            subject_mixing_jitter: 0.5,
            trials_per_class_per_subject,
            n_classes,
            coupling: None,
            seed,
        };
        cfg.scale_evoked_to_snr(1.0);
        cfg
    }

    /// Desk-scale induced task: 3 classes (rest, left, right). Two 10 Hz
    /// resonators desynchronize (gain < 1) on classes 1 and 2 respectively.
    pub fn induced_default(seed: u64) -> Self {
        Self::induced(64, 125, 100, seed)
    }

    /// [`Self::induced_default`] with a chosen size, as for [`Self::evoked`].
    pub fn induced(n_channels: usize, n_times: usize, trials_per_class_per_subject: usize, seed: u64) -> Self {
        let fs = 125.0;
        let erd = 0.3;
        let sources = vec![
            LatentSourceSpec::resonator(10.0, 0.96, fs, 1.0).with_class_gain(&[1.0, erd, 1.0]),
            LatentSourceSpec::resonator(10.0, 0.96, fs, 1.0).with_class_gain(&[1.0, 1.0, erd]),
            LatentSourceSpec::ar1(0.97, 1.0),
            LatentSourceSpec::resonator(22.0, 0.9, fs, 1.0),
            LatentSourceSpec::ar1(0.9, 1.0),
            LatentSourceSpec::resonator(4.0, 0.9, fs, 1.0),
        ];
        let mut rng = Rng::substream(seed, &[STREAM_BASE]);
        let base_mixing = random_mixing(n_channels, sources.len(), &mut rng).expect("valid mixing");
        Self {
            n_channels,
            n_latent: sources.len(),
            n_times,
            baseline_len: baseline_samples(fs),
            sample_rate_hz: fs,
            sources,
            base_mixing,
            noise_std: 2.0,
            n_subjects: 7,
            subject_mixing_jitter: 0.5,
            trials_per_class_per_subject,
            n_classes: 3,
            coupling: None,
            seed,
        }
    }
}

fn n_times_exceeds(src: &LatentSourceSpec, n_times: usize) -> Result<()> {
    if n_times > src.order() {
        Ok(())
    } else {
        param_err("n_times too short")
    }
}

/// Mixing matrix of one subject: each base column perturbed by Gaussian noise
/// of norm about `jitter` (entries `N(0, jitter²/n)`), then renormalized.
pub fn subject_mixing(config: &GenConfig, subject: usize) -> Result<Tensor> {
    if subject >= config.n_subjects {
        return param_err(format!(
            "subject {subject} out of range (n_subjects = {})",
            config.n_subjects
        ));
    }
    if config.subject_mixing_jitter == 0.0 {
        return Ok(config.base_mixing.clone());
    }
    let (n, k) = (config.n_channels, config.n_latent);
    let mut rng = Rng::substream(config.seed, &[STREAM_MIXING, subject as u64]);
    let scale = config.subject_mixing_jitter / (n as f64).sqrt();
    let noise = rng.normal(0.0, scale, &[n, k])?;
    let mut c = config.base_mixing.add(&noise)?;
    normalize_columns(&mut c);
    Ok(c)
}

/// A labelled collection of `channels × time` trials.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSet {
    /// `trials × channels × times`.
    pub epochs: Tensor,
    pub labels: Vec<usize>,
    pub subjects: Vec<usize>,
    pub sample_rate_hz: f64,
    pub n_classes: usize,
}

impl EpochSet {
    pub fn new(
        epochs: Tensor,
        labels: Vec<usize>,
        subjects: Vec<usize>,
        sample_rate_hz: f64,
        n_classes: usize,
    ) -> Result<Self> {
        let set = Self {
            epochs,
            labels,
            subjects,
            sample_rate_hz,
            n_classes,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs.shape().len() != 3 {
            return param_err(format!(
                "epochs must be trials x channels x times, got {:?}",
                self.epochs.shape()
            ));
        }
        let trials = self.epochs.shape()[0];
        if self.labels.len() != trials || self.subjects.len() != trials {
            return param_err(format!(
                "{trials} trials but {} labels and {} subjects",
                self.labels.len(),
                self.subjects.len()
            ));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l >= self.n_classes) {
            return param_err(format!("label {l} out of range for {} classes", self.n_classes));
        }
        Ok(())
    }

    pub fn n_trials(&self) -> usize {
        self.epochs.shape()[0]
    }

    pub fn n_channels(&self) -> usize {
        self.epochs.shape()[1]
    }

    pub fn n_times(&self) -> usize {
        self.epochs.shape()[2]
    }

    /// Borrowed `channels × times` data of one trial, row-major.
    pub fn trial(&self, i: usize) -> &[f64] {
        let sz = self.n_channels() * self.n_times();
        &self.epochs.data()[i * sz..(i + 1) * sz]
    }

    pub fn epoch(&self, i: usize) -> Tensor {
        Tensor::new(vec![self.n_channels(), self.n_times()], self.trial(i).to_vec())
            .expect("valid epoch")
    }

    /// Sorted distinct subject ids.
    pub fn subject_ids(&self) -> Vec<usize> {
        let mut ids = self.subjects.clone();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// New set holding the given trials in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return param_err("subset must be nonempty");
        }
        let sz = self.n_channels() * self.n_times();
        let mut data = Vec::with_capacity(indices.len() * sz);
        for &i in indices {
            data.extend_from_slice(self.trial(i));
        }
        Self::new(
            Tensor::new(vec![indices.len(), self.n_channels(), self.n_times()], data)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
            indices.iter().map(|&i| self.subjects[i]).collect(),
            self.sample_rate_hz,
            self.n_classes,
        )
    }

    /// Applies `f` to every epoch, which may change the time dimension.
    pub fn map_epochs(&self, f: impl Fn(&Tensor) -> Result<Tensor> + Sync) -> Result<Self> {
        let out: Vec<Tensor> = (0..self.n_trials())
            .into_par_iter()
            .map(|i| f(&self.epoch(i)))
            .collect::<Result<_>>()?;
        let shape = out[0].shape().to_vec();
        let data: Vec<f64> = out.into_iter().flat_map(Tensor::into_data).collect();
        Self::new(
            Tensor::new(vec![self.n_trials(), shape[0], shape[1]], data)?,
            self.labels.clone(),
            self.subjects.clone(),
            self.sample_rate_hz,
            self.n_classes,
        )
    }
}

/// Latent time courses of one trial (`k × (baseline + post)`), for ground-truth checks.
pub fn simulate_trial_sources(
    config: &GenConfig,
    subject: usize,
    class_idx: usize,
    trial: usize,
) -> Tensor {
    let mut rng = trial_rng(config, subject, class_idx, trial);
    simulate_latents(config, class_idx, &mut rng)
}

fn trial_rng(config: &GenConfig, subject: usize, class_idx: usize, trial: usize) -> Rng {
    Rng::substream(
        config.seed,
        &[STREAM_TRIAL, subject as u64, class_idx as u64, trial as u64],
    )
}

fn simulate_latents(config: &GenConfig, class_idx: usize, rng: &mut Rng) -> Tensor {
    let specs: Vec<&LatentSourceSpec> = config.sources.iter().collect();
    let len = config.baseline_len + config.n_times;
    let data = run_sources(
        &specs,
        config.coupling.as_ref(),
        config.baseline_len,
        config.n_times,
        class_idx,
        false,
        rng,
    );
    Tensor::new(vec![config.n_latent, len], data).expect("finite sources")
}

/// Generates the full dataset. Epochs include the `baseline_len` prefix;
/// trials are ordered subject-major with classes interleaved.
pub fn generate(config: &GenConfig) -> Result<EpochSet> {
    config.validate()?;
    let mixings: Vec<Tensor> = (0..config.n_subjects)
        .map(|s| subject_mixing(config, s))
        .collect::<Result<_>>()?;
    let mut keys = Vec::with_capacity(config.n_trials());
    for s in 0..config.n_subjects {
        for i in 0..config.trials_per_class_per_subject {
            for c in 0..config.n_classes {
                keys.push((s, c, i));
            }
        }
    }
    let (n, len) = (config.n_channels, config.baseline_len + config.n_times);
    let trials: Vec<Vec<f64>> = keys
        .par_iter()
        .map(|&(s, c, i)| {
            let mut rng = trial_rng(config, s, c, i);
            let sources = simulate_latents(config, c, &mut rng);
            let mut x = crate::tensor::matmul(&mixings[s], &sources)?.into_data();
            if config.noise_std > 0.0 {
                for v in &mut x {
                    *v += config.noise_std * rng.next_normal();
                }
            }
            Ok(x)
        })
        .collect::<Result<_>>()?;
    let data: Vec<f64> = trials.concat();
    EpochSet::new(
        Tensor::new(vec![keys.len(), n, len], data)?,
        keys.iter().map(|k| k.1).collect(),
        keys.iter().map(|k| k.0).collect(),
        config.sample_rate_hz,
        config.n_classes,
    )
}
