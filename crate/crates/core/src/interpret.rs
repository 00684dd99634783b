//! Reading a trained LF-CNN: which latent components drive each class, their
//! sensor-space activation patterns, latencies and filter spectra.

use std::f64::consts::PI;
use std::fmt::Write as _;

use crate::error::{param_err, Error, Result};
use crate::model::{ModelConfig, ModelParams, Variant};
use crate::synth::EpochSet;
use crate::tensor::{covariance, matmul, matmul_tn, sym_inverse, Tensor};

pub const DEFAULT_N_FREQS: usize = 256;
pub const DEFAULT_RIDGE: f64 = 1e-9;

/// The output weight that contributes most to a class.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentAttribution {
    pub class_idx: usize,
    pub component_idx: usize,
    pub pooled_time_idx: usize,
    /// Centre of the receptive field of `pooled_time_idx`, from epoch onset.
    pub latency_seconds: f64,
    pub weight_value: f64,
}

/// Components with the largest and smallest summed output weight for a class.
#[derive(Debug, Clone, PartialEq)]
pub struct InducedAttribution {
    pub class_idx: usize,
    pub positive_component: usize,
    pub positive_sum: f64,
    pub negative_component: usize,
    pub negative_sum: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationPattern {
    pub component_idx: usize,
    /// One value per channel.
    pub pattern: Tensor,
    /// Column of the spatial weights the pattern derives from.
    pub filter: Tensor,
    /// Whether the latent precision was applied; otherwise the latent covariance is taken as identity.
    pub used_precision: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumEstimate {
    pub freqs_hz: Vec<f64>,
    pub power: Vec<f64>,
    pub peak_freq_hz: f64,
}

fn require_lf(cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    if cfg.variant != Variant::Lf {
        return param_err("interpretation is only defined for LF models");
    }
    params.check_shapes(cfg)
}

fn class_weights(cfg: &ModelConfig, params: &ModelParams, class_idx: usize) -> Result<Vec<f64>> {
    if class_idx >= cfg.n_classes {
        return param_err(format!("class {class_idx} out of range"));
    }
    let c = cfg.n_classes;
    Ok(params.w_out.data().iter().skip(class_idx).step_by(c).copied().collect())
}

/// Seconds from epoch start to the centre of a pooled output's receptive field.
pub fn pooled_latency_seconds(cfg: &ModelConfig, pooled_time_idx: usize, fs_hz: f64) -> f64 {
    let samples = (pooled_time_idx * cfg.pool_stride) as f64
        + (cfg.pool_factor as f64 - 1.0) / 2.0
        + (cfg.filter_len as f64 - 1.0) / 2.0;
    samples / fs_hz
}

/// Largest positive output weight for the class over `[component × pooled time]`;
/// ties resolve to the lowest (component, time) pair.
pub fn top_component_evoked(cfg: &ModelConfig, params: &ModelParams, class_idx: usize, fs_hz: f64) -> Result<ComponentAttribution> {
    require_lf(cfg, params)?;
    let w = class_weights(cfg, params, class_idx)?;
    let pl = cfg.pooled_len();
    let mut best: Option<usize> = None;
    for (i, &v) in w.iter().enumerate() {
        if v > 0.0 && best.is_none_or(|b| v > w[b]) {
            best = Some(i);
        }
    }
    let i = best.ok_or(Error::NoPositiveContribution { class_idx })?;
    Ok(ComponentAttribution {
        class_idx,
        component_idx: i / pl,
        pooled_time_idx: i % pl,
        latency_seconds: pooled_latency_seconds(cfg, i % pl, fs_hz),
        weight_value: w[i],
    })
}

/// Per-component sums of the class's output weights over pooled time.
pub fn component_sums(cfg: &ModelConfig, params: &ModelParams, class_idx: usize) -> Result<Vec<f64>> {
    let w = class_weights(cfg, params, class_idx)?;
    Ok(w.chunks(cfg.pooled_len()).map(|c| c.iter().sum()).collect())
}

pub fn top_component_induced(cfg: &ModelConfig, params: &ModelParams, class_idx: usize) -> Result<InducedAttribution> {
    require_lf(cfg, params)?;
    let sums = component_sums(cfg, params, class_idx)?;
    let (mut hi, mut lo) = (0, 0);
    for (i, &s) in sums.iter().enumerate() {
        if s > sums[hi] {
            hi = i;
        }
        if s < sums[lo] {
            lo = i;
        }
    }
    if !(sums[hi] > 0.0) {
        return Err(Error::NoPositiveContribution { class_idx });
    }
    Ok(InducedAttribution {
        class_idx,
        positive_component: hi,
        positive_sum: sums[hi],
        negative_component: lo,
        negative_sum: sums[lo],
    })
}

/// Channel covariance pooled over all samples of all trials.
pub fn data_covariance(data: &EpochSet) -> Result<Tensor> {
    if data.n_trials() == 0 {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let (n, t, m) = (data.n_channels(), data.n_times(), data.n_trials());
    let mut joined = Vec::with_capacity(n * t * m);
    for ch in 0..n {
        for i in 0..m {
            joined.extend_from_slice(&data.trial(i)[ch * t..(ch + 1) * t]);
        }
    }
    covariance(&Tensor::new(vec![n, t * m], joined)?)
}

/// Sensor pattern of a component given the channel covariance.
pub fn activation_pattern_from_cov(spatial: &Tensor, cov: &Tensor, component_idx: usize, use_precision: bool, ridge: f64) -> Result<ActivationPattern> {
    let (n, k) = (spatial.rows(), spatial.cols());
    if component_idx >= k {
        return param_err(format!("component {component_idx} out of range (k = {k})"));
    }
    if cov.shape() != [n, n] {
        return Err(Error::Dimension {
            op: "activation_pattern",
            lhs: cov.shape().to_vec(),
            rhs: vec![n, n],
        });
    }
    let filter = Tensor::new(vec![n], (0..n).map(|r| spatial.at(r, component_idx)).collect())?;
    let sigma_w = matmul(cov, spatial)?;
    let pattern = if use_precision {
        let latent_cov = matmul_tn(spatial, &sigma_w)?;
        let precision = sym_inverse(&latent_cov, ridge)?;
        let c = matmul(&sigma_w, &precision)?;
        (0..n).map(|r| c.at(r, component_idx)).collect()
    } else {
        (0..n).map(|r| sigma_w.at(r, component_idx)).collect()
    };
    Ok(ActivationPattern {
        component_idx,
        pattern: Tensor::new(vec![n], pattern)?,
        filter,
        used_precision: use_precision,
    })
}

pub fn activation_pattern(spatial: &Tensor, data: &EpochSet, component_idx: usize, use_precision: bool, ridge: f64) -> Result<ActivationPattern> {
    if data.n_channels() != spatial.rows() {
        return Err(Error::Dimension {
            op: "activation_pattern",
            lhs: vec![data.n_channels()],
            rhs: spatial.shape().to_vec(),
        });
    }
    activation_pattern_from_cov(spatial, &data_covariance(data)?, component_idx, use_precision, ridge)
}

/// Power response of an FIR filter on `n_freqs` points spanning `[0, fs/2]`.
pub fn filter_spectrum(taps: &[f64], fs_hz: f64, n_freqs: usize) -> Result<SpectrumEstimate> {
    if taps.is_empty() || n_freqs < 2 || !(fs_hz > 0.0) {
        return param_err("filter_spectrum needs taps, n_freqs >= 2 and fs > 0");
    }
    let freqs_hz: Vec<f64> = (0..n_freqs)
        .map(|i| 0.5 * fs_hz * i as f64 / (n_freqs - 1) as f64)
        .collect();
    let power: Vec<f64> = freqs_hz
        .iter()
        .map(|&f| {
            let (mut re, mut im) = (0.0, 0.0);
            for (j, &h) in taps.iter().enumerate() {
                let phase = -2.0 * PI * f * j as f64 / fs_hz;
                re += h * phase.cos();
                im += h * phase.sin();
            }
            re * re + im * im
        })
        .collect();
    let peak = crate::model::argmax(&power);
    Ok(SpectrumEstimate {
        peak_freq_hz: freqs_hz[peak],
        freqs_hz,
        power,
    })
}

/// Temporal filter taps of one LF component.
pub fn component_taps(cfg: &ModelConfig, params: &ModelParams, component_idx: usize) -> Result<Vec<f64>> {
    require_lf(cfg, params)?;
    if component_idx >= cfg.n_latent {
        return param_err(format!("component {component_idx} out of range"));
    }
    Ok(params.temporal.row(component_idx).to_vec())
}

/// The `n` components with the smallest total absolute output weight, ascending.
pub fn least_informative_components(cfg: &ModelConfig, params: &ModelParams, n: usize) -> Result<Vec<usize>> {
    if n > cfg.n_latent {
        return param_err(format!("asked for {n} components, model has {}", cfg.n_latent));
    }
    params.check_shapes(cfg)?;
    let pl = cfg.pooled_len();
    let c = cfg.n_classes;
    let w = params.w_out.data();
    let totals: Vec<f64> = (0..cfg.n_latent)
        .map(|k| w[k * pl * c..(k + 1) * pl * c].iter().map(|v| v.abs()).sum())
        .collect();
    let mut idx: Vec<usize> = (0..cfg.n_latent).collect();
    idx.sort_by(|&a, &b| totals[a].total_cmp(&totals[b]).then(a.cmp(&b)));
    idx.truncate(n);
    Ok(idx)
}

/// How the informative component of a class is picked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    Evoked,
    Induced,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassInterpretation {
    pub class_idx: usize,
    /// `None` when no component contributes positively.
    pub component_idx: Option<usize>,
    pub latency_seconds: Option<f64>,
    pub weight_value: Option<f64>,
    pub pattern: Option<ActivationPattern>,
    pub spectrum: Option<SpectrumEstimate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterpretationReport {
    pub selection: Selection,
    pub classes: Vec<ClassInterpretation>,
    pub least_informative: Vec<usize>,
}

pub fn interpret(
    cfg: &ModelConfig,
    params: &ModelParams,
    data: &EpochSet,
    selection: Selection,
    use_precision: bool,
) -> Result<InterpretationReport> {
    require_lf(cfg, params)?;
    let cov = data_covariance(data)?;
    let fs = data.sample_rate_hz;
    let mut classes = Vec::with_capacity(cfg.n_classes);
    for class_idx in 0..cfg.n_classes {
        let pick = match selection {
            Selection::Evoked => top_component_evoked(cfg, params, class_idx, fs)
                .map(|a| (a.component_idx, Some(a.latency_seconds), a.weight_value)),
            Selection::Induced => {
                top_component_induced(cfg, params, class_idx).map(|a| (a.positive_component, None, a.positive_sum))
            }
        };
        let entry = match pick {
            Ok((comp, latency, weight)) => ClassInterpretation {
                class_idx,
                component_idx: Some(comp),
                latency_seconds: latency,
                weight_value: Some(weight),
                pattern: Some(activation_pattern_from_cov(&params.spatial, &cov, comp, use_precision, DEFAULT_RIDGE)?),
                spectrum: Some(filter_spectrum(&component_taps(cfg, params, comp)?, fs, DEFAULT_N_FREQS)?),
            },
            Err(Error::NoPositiveContribution { .. }) => ClassInterpretation {
                class_idx,
                component_idx: None,
                latency_seconds: None,
                weight_value: None,
                pattern: None,
                spectrum: None,
            },
            Err(e) => return Err(e),
        };
        classes.push(entry);
    }
    Ok(InterpretationReport {
        selection,
        classes,
        least_informative: least_informative_components(cfg, params, cfg.n_latent.min(5))?,
    })
}

impl InterpretationReport {
    /// One row per class: `class,component,ch0,ch1,...`.
    pub fn patterns_csv(&self) -> String {
        let mut s = String::new();
        let n = self
            .classes
            .iter()
            .find_map(|c| c.pattern.as_ref().map(|p| p.pattern.len()))
            .unwrap_or(0);
        let header: Vec<String> = (0..n).map(|i| format!("ch{i}")).collect();
        let _ = writeln!(s, "class,component,{}", header.join(","));
        for c in &self.classes {
            if let (Some(comp), Some(p)) = (c.component_idx, &c.pattern) {
                let vals: Vec<String> = p.pattern.data().iter().map(|v| v.to_string()).collect();
                let _ = writeln!(s, "{},{comp},{}", c.class_idx, vals.join(","));
            }
        }
        s
    }

    /// Frequency column followed by one power column per interpretable class.
    pub fn spectra_csv(&self) -> String {
        let specs: Vec<(usize, &SpectrumEstimate)> = self
            .classes
            .iter()
            .filter_map(|c| c.spectrum.as_ref().map(|s| (c.class_idx, s)))
            .collect();
        let mut s = String::from("freq_hz");
        for (c, _) in &specs {
            let _ = write!(s, ",class{c}");
        }
        s.push('\n');
        if let Some((_, first)) = specs.first() {
            for (i, f) in first.freqs_hz.iter().enumerate() {
                let _ = write!(s, "{f}");
                for (_, sp) in &specs {
                    let _ = write!(s, ",{}", sp.power[i]);
                }
                s.push('\n');
            }
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for c in &self.classes {
            match c.component_idx {
                Some(comp) => {
                    let _ = write!(s, "class {}: component {comp}", c.class_idx);
                    if let Some(l) = c.latency_seconds {
                        let _ = write!(s, ", latency {:.3} s", l);
                    }
                    if let Some(sp) = &c.spectrum {
                        let _ = write!(s, ", filter peak {:.1} Hz", sp.peak_freq_hz);
                    }
                    s.push('\n');
                }
                None => {
                    let _ = writeln!(s, "class {}: no positive contribution", c.class_idx);
                }
            }
        }
        let least: Vec<String> = self.least_informative.iter().map(|i| i.to_string()).collect();
        let _ = writeln!(s, "least informative components: {}", least.join(" "));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_latent: 6,
            filter_len: 3,
            ..ModelConfig::new(Variant::Lf, 8, 26, 3)
        }
    }

    fn set_weight(cfg: &ModelConfig, p: &mut ModelParams, comp: usize, time: usize, class: usize, v: f64) {
        let i = (comp * cfg.pooled_len() + time) * cfg.n_classes + class;
        p.w_out.data_mut()[i] = v;
    }

    #[test]
    fn one_hot_output_weight_is_found() {
        let cfg = cfg();
        let mut p = ModelParams::zeros(&cfg);
        set_weight(&cfg, &mut p, 4, 10, 1, 0.7);
        let a = top_component_evoked(&cfg, &p, 1, 100.0).unwrap();
        assert_eq!((a.component_idx, a.pooled_time_idx, a.weight_value), (4, 10, 0.7));
        // 10·2 + 0.5 + 1 samples.
        assert!((a.latency_seconds - 0.215).abs() < 1e-12);
        assert!(matches!(
            top_component_evoked(&cfg, &p, 0, 100.0),
            Err(Error::NoPositiveContribution { class_idx: 0 })
        ));
    }

    #[test]
    fn ties_go_to_lowest_pair() {
        let cfg = cfg();
        let mut p = ModelParams::zeros(&cfg);
        set_weight(&cfg, &mut p, 3, 2, 0, 1.0);
        set_weight(&cfg, &mut p, 2, 9, 0, 1.0);
        set_weight(&cfg, &mut p, 2, 5, 0, 1.0);
        let a = top_component_evoked(&cfg, &p, 0, 100.0).unwrap();
        assert_eq!((a.component_idx, a.pooled_time_idx), (2, 5));
    }

    #[test]
    fn induced_sign_split() {
        let cfg = cfg();
        let mut p = ModelParams::zeros(&cfg);
        for t in 0..cfg.pooled_len() {
            set_weight(&cfg, &mut p, 1, t, 2, 0.5);
            set_weight(&cfg, &mut p, 3, t, 2, -0.5);
        }
        let a = top_component_induced(&cfg, &p, 2).unwrap();
        assert_eq!((a.positive_component, a.negative_component), (1, 3));
    }

    #[test]
    fn var_models_are_refused() {
        let cfg = ModelConfig { variant: Variant::Var, ..cfg() };
        let p = ModelParams::zeros(&cfg);
        assert!(matches!(top_component_evoked(&cfg, &p, 0, 1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn identity_covariance_returns_filter() {
        let w = Rng::new(1).normal(0.0, 1.0, &[8, 6]).unwrap();
        let p = activation_pattern_from_cov(&w, &Tensor::identity(8), 2, false, 0.0).unwrap();
        assert_eq!(p.pattern, p.filter);
        let scaled = activation_pattern_from_cov(&w.scale(3.0).unwrap(), &Tensor::identity(8), 2, false, 0.0).unwrap();
        for (a, b) in scaled.pattern.data().iter().zip(p.pattern.data()) {
            assert!((a - 3.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_one_data_recovers_mixing_column() {
        let mut rng = Rng::new(5);
        let n = 8;
        let a = rng.normal(0.0, 1.0, &[n]).unwrap();
        let (m, t) = (20, 30);
        let mut data = Vec::new();
        for _ in 0..m {
            let s = rng.normal(0.0, 1.0, &[t]).unwrap();
            for ch in 0..n {
                data.extend(s.data().iter().map(|v| v * a.data()[ch]));
            }
        }
        let set = EpochSet::new(Tensor::new(vec![m, n, t], data).unwrap(), vec![0; m], vec![0; m], 100.0, 1).unwrap();
        let w = rng.normal(0.0, 1.0, &[n, 1]).unwrap();
        for precision in [false, true] {
            let p = activation_pattern(&w, &set, 0, precision, 1e-12).unwrap();
            let dot: f64 = p.pattern.data().iter().zip(a.data()).map(|(x, y)| x * y).sum();
            let cos = dot / (p.pattern.frobenius() * a.frobenius());
            assert!(cos.abs() > 0.999);
        }
    }

    #[test]
    fn singular_latent_covariance_is_reported() {
        let w = Tensor::zeros(&[4, 2]);
        let err = activation_pattern_from_cov(&w, &Tensor::identity(4), 0, true, 0.0).unwrap_err();
        assert!(matches!(err, Error::Singular { .. }));
    }

    #[test]
    fn spectrum_closed_forms() {
        let flat = filter_spectrum(&[1.0], 100.0, 256).unwrap();
        assert!(flat.power.iter().all(|&p| (p - 1.0).abs() < 1e-12));
        assert_eq!(flat.freqs_hz[0], 0.0);
        assert_eq!(*flat.freqs_hz.last().unwrap(), 50.0);

        let avg = filter_spectrum(&[0.5, 0.5], 100.0, 256).unwrap();
        assert!((avg.power[0] - 1.0).abs() < 1e-12);
        assert!(avg.power[255].abs() < 1e-12);
        for (f, p) in avg.freqs_hz.iter().zip(&avg.power) {
            assert!((p - (PI * f / 100.0).cos().powi(2)).abs() < 1e-12);
        }
        assert_eq!(avg.peak_freq_hz, 0.0);
    }

    #[test]
    fn least_informative_ranking() {
        let cfg = cfg();
        let mut p = ModelParams::zeros(&cfg);
        p.w_out = Tensor::filled(p.w_out.shape(), 1.0);
        let pl = cfg.pooled_len();
        for t in 0..pl {
            for c in 0..3 {
                set_weight(&cfg, &mut p, 4, t, c, 0.0);
                set_weight(&cfg, &mut p, 1, t, c, 0.5);
            }
        }
        let least = least_informative_components(&cfg, &p, 2).unwrap();
        assert_eq!(least, vec![4, 1]);
        assert_eq!(least_informative_components(&cfg, &p, 6).unwrap(), vec![4, 1, 0, 2, 3, 5]);
        assert!(least_informative_components(&cfg, &p, 7).is_err());
    }

    #[test]
    fn report_has_one_pattern_per_class() {
        let cfg = cfg();
        let mut rng = Rng::new(3);
        let p = crate::optim::init_params(&cfg, &mut rng).unwrap();
        let m = 10;
        let set = EpochSet::new(
            rng.normal(0.0, 1.0, &[m, 8, 26]).unwrap(),
            (0..m).map(|i| i % 3).collect(),
            vec![0; m],
            100.0,
            3,
        )
        .unwrap();
        let r = interpret(&cfg, &p, &set, Selection::Evoked, false).unwrap();
        let csv = r.patterns_csv();
        let rows: Vec<&str> = csv.lines().skip(1).collect();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|l| l.split(',').count() == 2 + 8));
        assert_eq!(r.spectra_csv().lines().count(), 1 + DEFAULT_N_FREQS);
        assert_eq!(r.summary().lines().count(), 4);
    }
}
