//! Adam, He-uniform initialization, the mini-batch trainer with early
//! stopping, and the single-trial online update.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{param_err, Error, Result};
use crate::model::{
    add_l1_subgradient, argmax, backward_data, cross_entropy, dropout_mask, forward, Gradients, ModelConfig,
    ModelParams, Variant, PARAM_NAMES,
};
use crate::rng::Rng;
use crate::synth::EpochSet;

/// Initial value of every bias.
pub const BIAS_INIT: f64 = 0.1;

const STREAM_INIT: u64 = 0x1417;
const STREAM_SHUFFLE: u64 = 0x5AFF;
const STREAM_DROPOUT: u64 = 0xD80F;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Iterations between validation checkpoints.
    pub eval_every: usize,
    pub stop_delta: f64,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            batch_size: 100,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            eval_every: 1000,
            stop_delta: 1e-5,
            max_iterations: 20_000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return param_err(format!("learning_rate {} must be finite and >= 0", self.learning_rate));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return param_err("batch_size and eval_every must be >= 1");
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return param_err(format!("{name} = {b} outside (0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return param_err("adam_eps must be > 0");
        }
        if !(self.stop_delta >= 0.0) {
            return param_err("stop_delta must be >= 0");
        }
        Ok(())
    }
}

/// Hyperparameters of a model/trainer pair as `key = value` lines.
pub fn describe_hyperparameters(model: &ModelConfig, train: &TrainConfig) -> String {
    let mut s = String::new();
    let rows: [(&str, String); 18] = [
        ("variant", model.variant.to_string()),
        ("n_channels", model.n_channels.to_string()),
        ("n_times", model.n_times.to_string()),
        ("n_classes", model.n_classes.to_string()),
        ("n_latent", model.n_latent.to_string()),
        ("filter_len", model.filter_len.to_string()),
        ("input_link", "identity".into()),
        ("hidden_link", "relu".into()),
        ("pooling", "max".into()),
        ("pool_factor", model.pool_factor.to_string()),
        ("pool_stride", model.pool_stride.to_string()),
        ("dropout_rate", model.dropout_rate.to_string()),
        ("l1_lambda", model.l1_lambda.to_string()),
        ("dense_layers", "1".into()),
        ("output", "softmax".into()),
        ("optimizer", "adam".into()),
        ("learning_rate", train.learning_rate.to_string()),
        ("batch_size", train.batch_size.to_string()),
    ];
    for (k, v) in rows {
        let _ = writeln!(s, "{k} = {v}");
    }
    s
}

/// He-uniform weights, biases at [`BIAS_INIT`].
pub fn init_params(cfg: &ModelConfig, rng: &mut Rng) -> Result<ModelParams> {
    cfg.validate()?;
    let fan_in = [
        cfg.n_channels,
        match cfg.variant {
            Variant::Lf => cfg.filter_len,
            Variant::Var => cfg.filter_len * cfg.n_latent,
        },
        0,
        cfg.n_features(),
        0,
    ];
    let mut p = ModelParams::zeros(cfg);
    for ((t, is_w), fan) in p.tensors_mut().into_iter().zip(ModelParams::IS_WEIGHT).zip(fan_in) {
        if is_w {
            let b = (6.0 / fan as f64).sqrt();
            let shape = t.shape().to_vec();
            *t = rng.uniform(-b, b, &shape)?;
        } else {
            t.data_mut().fill(BIAS_INIT);
        }
    }
    Ok(p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: ModelParams,
    pub v: ModelParams,
}

impl AdamState {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            step: 0,
            m: ModelParams::zeros(cfg),
            v: ModelParams::zeros(cfg),
        }
    }
}

/// One bias-corrected Adam update with learning rate `lr`.
pub fn adam_step(params: &mut ModelParams, grads: &Gradients, state: &mut AdamState, tcfg: &TrainConfig, lr: f64) -> Result<()> {
    for (g, name) in grads.tensors().iter().zip(PARAM_NAMES) {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient { tensor: name });
        }
    }
    for ((p, g), name) in params.tensors().iter().zip(grads.tensors()).zip(PARAM_NAMES) {
        if p.shape() != g.shape() {
            return Err(Error::Dimension {
                op: name,
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let (b1, b2) = (tcfg.beta1, tcfg.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let AdamState { m, v, .. } = state;
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(m.tensors_mut())
        .zip(v.tensors_mut())
    {
        let p = p.data_mut();
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, &gi) in g.data().iter().enumerate() {
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            p[i] -= lr * mhat / (vhat.sqrt() + tcfg.adam_eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    EarlyStop,
    MaxIter,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::EarlyStop => "early_stop",
            StopReason::MaxIter => "max_iter",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iteration: usize,
    /// Cross-entropy plus the l1 term.
    pub val_cost: f64,
    pub val_ce: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub iterations_run: usize,
    pub history: Vec<Checkpoint>,
    /// Iteration whose parameters were returned.
    pub returned_iteration: usize,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub stop_reason: StopReason,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,val_cost,val_ce,val_acc\n");
        for c in &self.history {
            let _ = writeln!(s, "{},{},{},{}", c.iteration, c.val_cost, c.val_ce, c.val_accuracy);
        }
        s
    }
}

/// Mean cross-entropy and accuracy over a set, without dropout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SetScore {
    pub cross_entropy: f64,
    pub accuracy: f64,
}

/// A model together with its optimizer state and dropout stream.
#[derive(Debug, Clone)]
pub struct Network {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub adam: AdamState,
    /// Root seed of the initialization and dropout streams.
    pub seed: u64,
}

impl Network {
    /// Freshly initialized network; all randomness derives from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, &mut Rng::substream(seed, &[STREAM_INIT]))?;
        Self::from_parts(config, params, AdamStateInit::Fresh, seed)
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams, adam: AdamStateInit, seed: u64) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        let adam = match adam {
            AdamStateInit::Fresh => AdamState::new(&config),
            AdamStateInit::Restored(s) => {
                s.m.check_shapes(&config)?;
                s.v.check_shapes(&config)?;
                s
            }
        };
        Ok(Self {
            config,
            params,
            adam,
            seed,
        })
    }

    /// Dropout masks for the next update depend only on the seed and the step count.
    fn dropout_stream(&self) -> Rng {
        Rng::substream(self.seed, &[STREAM_DROPOUT, self.adam.step])
    }

    pub fn predict_proba(&self, epoch: &crate::Tensor) -> Result<Vec<f64>> {
        Ok(forward(&self.config, &self.params, epoch, None)?.probabilities)
    }

    pub fn predict(&self, epoch: &crate::Tensor) -> Result<usize> {
        Ok(argmax(&self.predict_proba(epoch)?))
    }

    fn check_set(&self, set: &EpochSet) -> Result<()> {
        if set.n_channels() != self.config.n_channels || set.n_times() != self.config.n_times {
            return Err(Error::Dimension {
                op: "epoch set",
                lhs: vec![set.n_channels(), set.n_times()],
                rhs: vec![self.config.n_channels, self.config.n_times],
            });
        }
        if let Some(&bad) = set.labels.iter().find(|&&y| y >= self.config.n_classes) {
            return param_err(format!("label {bad} out of range for {} classes", self.config.n_classes));
        }
        Ok(())
    }

    pub fn score(&self, set: &EpochSet) -> Result<SetScore> {
        self.check_set(set)?;
        if set.n_trials() == 0 {
            return Err(Error::InsufficientSamples { needed: 1, got: 0 });
        }
        let per: Vec<(f64, bool)> = (0..set.n_trials())
            .into_par_iter()
            .map(|i| {
                let probs = self.predict_proba(&set.epoch(i))?;
                let y = set.labels[i];
                Ok((cross_entropy(&probs, y), argmax(&probs) == y))
            })
            .collect::<Result<_>>()?;
        let n = per.len() as f64;
        Ok(SetScore {
            cross_entropy: per.iter().map(|p| p.0).sum::<f64>() / n,
            accuracy: per.iter().filter(|p| p.1).count() as f64 / n,
        })
    }

    /// Mean data gradient over `batch` plus the l1 subgradient.
    fn batch_gradient(&self, set: &EpochSet, batch: &[usize]) -> Result<Gradients> {
        let f = self.config.n_features();
        let mut rng = self.dropout_stream();
        let masks: Vec<Vec<f64>> = batch
            .iter()
            .map(|_| dropout_mask(f, self.config.dropout_rate, &mut rng))
            .collect();
        let (cfg, params) = (&self.config, &self.params);
        let grads: Vec<Gradients> = batch
            .par_iter()
            .zip(masks)
            .map(|(&i, mask)| {
                let cache = forward(cfg, params, &set.epoch(i), Some(mask))?;
                backward_data(cfg, params, &cache, set.labels[i])
            })
            .collect::<Result<_>>()?;
        // Summed in trial order so results do not depend on scheduling.
        let mut total = ModelParams::zeros(cfg);
        for g in &grads {
            total.axpy(1.0, g);
        }
        total.scale_in_place(1.0 / batch.len() as f64);
        add_l1_subgradient(&mut total, params, cfg.l1_lambda);
        Ok(total)
    }

    /// Mini-batch training with early stopping on validation cross-entropy.
    pub fn train(&mut self, train: &EpochSet, val: &EpochSet, tcfg: &TrainConfig) -> Result<TrainReport> {
        tcfg.validate()?;
        self.check_set(train)?;
        self.check_set(val)?;
        if train.n_trials() == 0 || val.n_trials() == 0 {
            return Err(Error::InsufficientSamples {
                needed: 1,
                got: train.n_trials().min(val.n_trials()),
            });
        }
        let mut shuffle_rng = Rng::substream(tcfg.seed, &[STREAM_SHUFFLE]);
        let mut order: Vec<usize> = (0..train.n_trials()).collect();
        shuffle_rng.shuffle(&mut order);
        let mut cursor = 0;
        let batch_size = tcfg.batch_size.min(train.n_trials());

        let mut prev_ce = self.score(val)?.cross_entropy;
        let mut snapshot = (self.params.clone(), self.adam.clone(), 0usize);
        let mut history = Vec::new();
        let mut stop_reason = StopReason::MaxIter;
        let mut iteration = 0;
        let mut batch = Vec::with_capacity(batch_size);

        while iteration < tcfg.max_iterations {
            batch.clear();
            while batch.len() < batch_size {
                if cursor == order.len() {
                    shuffle_rng.shuffle(&mut order);
                    cursor = 0;
                }
                batch.push(order[cursor]);
                cursor += 1;
            }
            let g = self.batch_gradient(train, &batch)?;
            adam_step(&mut self.params, &g, &mut self.adam, tcfg, tcfg.learning_rate)?;
            iteration += 1;

            if iteration % tcfg.eval_every == 0 || iteration == tcfg.max_iterations {
                let score = self.score(val)?;
                history.push(Checkpoint {
                    iteration,
                    val_cost: score.cross_entropy + self.config.l1_lambda * self.params.weight_l1(),
                    val_ce: score.cross_entropy,
                    val_accuracy: score.accuracy,
                });
                let new_ce = score.cross_entropy;
                if new_ce > prev_ce || prev_ce - new_ce < tcfg.stop_delta {
                    stop_reason = StopReason::EarlyStop;
                    break;
                }
                prev_ce = new_ce;
                snapshot = (self.params.clone(), self.adam.clone(), iteration);
            }
        }

        let returned_iteration = match stop_reason {
            StopReason::EarlyStop => {
                let (p, a, it) = snapshot;
                self.params = p;
                self.adam = a;
                it
            }
            StopReason::MaxIter => iteration,
        };
        Ok(TrainReport {
            iterations_run: iteration,
            history,
            returned_iteration,
            train_accuracy: self.score(train)?.accuracy,
            val_accuracy: self.score(val)?.accuracy,
            stop_reason,
        })
    }

    /// One forward/backward/Adam step on a single labelled trial, dropout active.
    pub fn online_update(&mut self, epoch: &crate::Tensor, label: usize, tcfg: &TrainConfig) -> Result<()> {
        if label >= self.config.n_classes {
            return param_err(format!("label {label} out of range"));
        }
        let mask = dropout_mask(self.config.n_features(), self.config.dropout_rate, &mut self.dropout_stream());
        let cache = forward(&self.config, &self.params, epoch, Some(mask))?;
        let mut g = backward_data(&self.config, &self.params, &cache, label)?;
        add_l1_subgradient(&mut g, &self.params, self.config.l1_lambda);
        adam_step(&mut self.params, &g, &mut self.adam, tcfg, tcfg.learning_rate)
    }
}

/// How [`Network::from_parts`] obtains its optimizer state.
#[derive(Debug, Clone)]
pub enum AdamStateInit {
    Fresh,
    Restored(AdamState),
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            n_latent: 2,
            filter_len: 3,
            dropout_rate: 0.0,
            l1_lambda: 0.0,
            ..ModelConfig::new(Variant::Lf, 4, 12, 2)
        }
    }

    /// Two Gaussian blobs: class 1 has a strong positive offset on channel 0.
    fn blobs(n_per_class: usize, seed: u64) -> EpochSet {
        let mut rng = Rng::new(seed);
        let (n, t) = (4, 12);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..2 * n_per_class {
            let y = i % 2;
            let mut e = rng.normal(0.0, 0.3, &[n, t]).unwrap().into_data();
            if y == 1 {
                e[..t].iter_mut().for_each(|v| *v += 2.0);
            } else {
                e[..t].iter_mut().for_each(|v| *v -= 2.0);
            }
            data.extend(e);
            labels.push(y);
        }
        let m = labels.len();
        EpochSet::new(Tensor::new(vec![m, n, t], data).unwrap(), labels, vec![0; m], 100.0, 2).unwrap()
    }

    #[test]
    fn biases_and_init_spread() {
        let cfg = ModelConfig::new(Variant::Var, 64, 125, 5);
        let p = init_params(&cfg, &mut Rng::new(1)).unwrap();
        assert!(p.b_temporal.data().iter().chain(p.b_out.data()).all(|&b| b == 0.1));
        // w_out has 32·59·5 > 10^4 entries; combine with a dedicated large draw.
        let big = ModelConfig { n_latent: 64, ..ModelConfig::new(Variant::Lf, 64, 3200, 2) };
        let q = init_params(&big, &mut Rng::new(2)).unwrap();
        let w = q.w_out.data();
        assert!(w.len() >= 100_000);
        let b = (6.0 / big.n_features() as f64).sqrt();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let sd = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((sd / (b / 3f64.sqrt()) - 1.0).abs() < 0.03);
        assert!(w.iter().all(|v| v.abs() <= b));
        let lim = (6.0f64 / (7.0 * 32.0)).sqrt();
        assert!(p.temporal.data().iter().all(|v| v.abs() <= lim));
        assert_eq!(init_params(&cfg, &mut Rng::new(1)).unwrap(), p);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let cfg = tiny_cfg();
        let mut p = init_params(&cfg, &mut Rng::new(3)).unwrap();
        let before = p.clone();
        let mut s = AdamState::new(&cfg);
        adam_step(&mut p, &ModelParams::zeros(&cfg), &mut s, &TrainConfig::default(), 3e-4).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn adam_first_step_by_hand() {
        let cfg = tiny_cfg();
        let mut p = ModelParams::zeros(&cfg);
        let mut g = ModelParams::zeros(&cfg);
        g.b_out.data_mut()[0] = 1.0;
        let tc = TrainConfig::default();
        let mut s = AdamState::new(&cfg);
        adam_step(&mut p, &g, &mut s, &tc, tc.learning_rate).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction.
        let m = 0.1;
        let v = 0.001;
        let expect = -tc.learning_rate * (m / 0.1) / ((v / (1.0 - 0.999f64)).sqrt() + 1e-8);
        assert!((p.b_out.data()[0] - expect).abs() < 1e-12);
        assert!((expect + 3e-4).abs() < 1e-11);
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let cfg = tiny_cfg();
        let mut p = ModelParams::zeros(&cfg);
        let mut g = ModelParams::zeros(&cfg);
        g.temporal.data_mut()[1] = f64::NAN;
        let err = adam_step(&mut p, &g, &mut AdamState::new(&cfg), &TrainConfig::default(), 1e-3).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { tensor: "temporal" }));
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let cfg = tiny_cfg();
            let mut net = Network::new(cfg, 9).unwrap();
            let set = blobs(20, 4);
            let tc = TrainConfig { learning_rate: 1e-2, ..TrainConfig::default() };
            for i in 0..100 {
                net.online_update(&set.epoch(i % 40), set.labels[i % 40], &tc).unwrap();
            }
            net.params
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn separable_blobs_are_learned() {
        let train = blobs(50, 1);
        let val = blobs(20, 2);
        let mut net = Network::new(tiny_cfg(), 3).unwrap();
        let tc = TrainConfig {
            learning_rate: 1e-2,
            batch_size: 20,
            eval_every: 50,
            stop_delta: 1e-5,
            max_iterations: 5000,
            ..TrainConfig::default()
        };
        let report = net.train(&train, &val, &tc).unwrap();
        assert_eq!(report.stop_reason, StopReason::EarlyStop);
        assert_eq!(report.train_accuracy, 1.0);
        assert_eq!(report.history.len(), report.iterations_run.div_ceil(tc.eval_every));
        assert!(report.returned_iteration < report.iterations_run);
    }

    #[test]
    fn infinite_delta_stops_at_first_checkpoint() {
        let (train, val) = (blobs(10, 1), blobs(5, 2));
        let mut net = Network::new(tiny_cfg(), 3).unwrap();
        let init = net.params.clone();
        let tc = TrainConfig {
            eval_every: 10,
            stop_delta: f64::INFINITY,
            ..TrainConfig::default()
        };
        let r = net.train(&train, &val, &tc).unwrap();
        assert_eq!((r.iterations_run, r.history.len(), r.returned_iteration), (10, 1, 0));
        assert_eq!(net.params, init);
    }

    #[test]
    fn improving_cost_runs_to_max_iterations() {
        let (train, val) = (blobs(30, 1), blobs(10, 2));
        let mut net = Network::new(tiny_cfg(), 3).unwrap();
        let tc = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 10,
            eval_every: 7,
            stop_delta: 0.0,
            max_iterations: 30,
            ..TrainConfig::default()
        };
        let r = net.train(&train, &val, &tc).unwrap();
        for w in r.history.windows(2) {
            assert!(w[1].val_ce < w[0].val_ce);
        }
        assert_eq!(r.stop_reason, StopReason::MaxIter);
        assert_eq!((r.iterations_run, r.history.len()), (30, 5));
        assert_eq!(r.returned_iteration, 30);
    }

    #[test]
    fn online_update_descends_and_zero_lr_is_identity() {
        let set = blobs(5, 8);
        let cfg = ModelConfig { l1_lambda: 1e-6, ..tiny_cfg() };
        let mut net = Network::new(cfg, 5).unwrap();
        let x = set.epoch(3);
        let y = set.labels[3];
        let before = cross_entropy(&net.predict_proba(&x).unwrap(), y);
        let tc = TrainConfig { learning_rate: 1e-3, ..TrainConfig::default() };
        net.online_update(&x, y, &tc).unwrap();
        let after = cross_entropy(&net.predict_proba(&x).unwrap(), y);
        assert!(after <= before);

        let frozen = net.params.clone();
        let zero = TrainConfig { learning_rate: 0.0, ..tc };
        for i in 0..10 {
            net.online_update(&set.epoch(i), set.labels[i], &zero).unwrap();
        }
        assert_eq!(net.params, frozen);
    }

    #[test]
    fn training_loss_falls_early() {
        let set = blobs(50, 11);
        let cfg = ModelConfig { dropout_rate: 0.5, l1_lambda: 3e-4, ..tiny_cfg() };
        let mut net = Network::new(cfg, 2).unwrap();
        let tc = TrainConfig { learning_rate: 3e-3, batch_size: 100, ..TrainConfig::default() };
        let batch: Vec<usize> = (0..100).collect();
        let mut losses = Vec::new();
        for _ in 0..60 {
            losses.push(net.score(&set).unwrap().cross_entropy);
            let g = net.batch_gradient(&set, &batch).unwrap();
            adam_step(&mut net.params, &g, &mut net.adam, &tc, tc.learning_rate).unwrap();
        }
        let smooth: Vec<f64> = losses.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
        for w in smooth.windows(2) {
            assert!(w[1] <= w[0], "{smooth:?}");
        }
    }

    #[test]
    fn config_dump_lists_defaults() {
        let dump = describe_hyperparameters(&ModelConfig::new(Variant::Lf, 64, 125, 5), &TrainConfig::default());
        for line in ["n_latent = 32", "filter_len = 7", "learning_rate = 0.0003", "l1_lambda = 0.0003", "pool_factor = 2", "dropout_rate = 0.5", "output = softmax", "dense_layers = 1"] {
            assert!(dump.lines().any(|l| l == line), "missing {line}");
        }
    }
}
