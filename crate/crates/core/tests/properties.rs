use megdecode::dataio::{decode_epochs, encode_epochs, split_indices, SplitSpec};
use megdecode::eval::{accuracy, confusion_matrix, pseudo_realtime, RealtimeConfig, UpdatePolicy};
use megdecode::interpret::{activation_pattern, filter_spectrum};
use megdecode::model::{forward, var_diagonal_as_lf, ModelConfig, ModelParams, Variant};
use megdecode::optim::{init_params, Network, StopReason, TrainConfig};
use megdecode::synth::{generate, EpochSet, GenConfig};
use megdecode::tensor::softmax;
use megdecode::weights::{decode_network, encode_network};
use megdecode::{Rng, Tensor};
use proptest::prelude::*;

fn random_set(rng: &mut Rng, subjects: usize, classes: usize, per: usize, n: usize, t: usize) -> EpochSet {
    let mut labels = Vec::new();
    let mut subj = Vec::new();
    for s in 0..subjects {
        for c in 0..classes {
            for _ in 0..per {
                labels.push(c);
                subj.push(s);
            }
        }
    }
    let epochs = rng.normal(0.0, 1.0, &[labels.len(), n, t]).unwrap();
    EpochSet::new(epochs, labels, subj, 125.0, classes).unwrap()
}

fn model(variant: Variant, n: usize, t: usize, k: usize, l: usize, classes: usize) -> ModelConfig {
    ModelConfig {
        n_latent: k,
        filter_len: l,
        ..ModelConfig::new(variant, n, t, classes)
    }
}

proptest! {
    #[test]
    fn softmax_normalized_and_shift_invariant(z in prop::collection::vec(-30.0f64..30.0, 1..12), c in -100.0f64..100.0) {
        let p = softmax(&z);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        for (a, b) in p.iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn rng_replays_from_seed(seed in any::<u64>()) {
        let (mut a, mut b) = (Rng::new(seed), Rng::new(seed));
        for _ in 0..16 {
            prop_assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn parameter_counts_follow_layer_shapes(n in 2usize..40, k0 in 1usize..12, l in 1usize..9, t_extra in 1usize..30, classes in 2usize..6) {
        let k = k0.min(n);
        let t = l + t_extra;
        let lf = model(Variant::Lf, n, t, k, l, classes);
        let var = ModelConfig { variant: Variant::Var, ..lf.clone() };
        let f = lf.n_features();
        prop_assert_eq!(lf.param_count(), n * k + k * l + k + f * classes + classes);
        prop_assert_eq!(var.param_count(), lf.param_count() + k * k * l - k * l);
        prop_assert_eq!(ModelParams::zeros(&lf).n_params(), lf.param_count());
        prop_assert_eq!(ModelParams::zeros(&var).n_params(), var.param_count());
        prop_assert_eq!(lf.pooled_len(), (t - l + 1) / 2);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn forward_is_deterministic_and_normalized(seed in any::<u64>(), var in any::<bool>()) {
        let variant = if var { Variant::Var } else { Variant::Lf };
        let cfg = model(variant, 7, 24, 3, 4, 4);
        let mut rng = Rng::new(seed);
        let p = init_params(&cfg, &mut rng).unwrap();
        let x = rng.normal(0.0, 1.0, &[7, 24]).unwrap();
        let mask = megdecode::model::dropout_mask(cfg.n_features(), cfg.dropout_rate, &mut rng);
        let a = forward(&cfg, &p, &x, Some(mask.clone())).unwrap();
        let b = forward(&cfg, &p, &x, Some(mask)).unwrap();
        prop_assert_eq!(&a.probabilities, &b.probabilities);
        prop_assert!((a.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert_eq!(a.features.len(), cfg.n_features());
        prop_assert_eq!(a.pool_argmax.len(), cfg.n_latent * cfg.pooled_len());
    }

    #[test]
    fn diagonal_var_bank_matches_lf(seed in any::<u64>()) {
        let cfg = model(Variant::Var, 6, 20, 3, 5, 3);
        let mut rng = Rng::new(seed);
        let mut p = init_params(&cfg, &mut rng).unwrap();
        let (k, l) = (3, 5);
        for c in 0..k {
            for j in 0..l {
                for c2 in (0..k).filter(|&c2| c2 != c) {
                    p.temporal.data_mut()[(c * l + j) * k + c2] = 0.0;
                }
            }
        }
        let (lf_cfg, lf) = var_diagonal_as_lf(&cfg, &p).unwrap();
        let x = rng.normal(0.0, 1.0, &[6, 20]).unwrap();
        let a = forward(&cfg, &p, &x, None).unwrap();
        let b = forward(&lf_cfg, &lf, &x, None).unwrap();
        for (u, v) in a.logits.iter().zip(&b.logits) {
            prop_assert!((u - v).abs() <= 1e-10);
        }
    }

    #[test]
    fn split_partitions_and_holds_out(seed in any::<u64>(), subjects in 2usize..5, per in 2usize..6, held in 0usize..5, frac in 0.05f64..0.6) {
        let held = held % subjects;
        let mut rng = Rng::new(seed);
        let set = random_set(&mut rng, subjects, 3, per, 2, 3);
        let spec = SplitSpec { held_out_subject: held, validation_fraction: frac };
        let idx = split_indices(&set, &spec, &mut rng).unwrap();
        let mut all: Vec<usize> = idx.train.iter().chain(&idx.validation).chain(&idx.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..set.n_trials()).collect::<Vec<_>>());
        prop_assert!(idx.test.iter().all(|&i| set.subjects[i] == held));
        prop_assert!(idx.train.iter().chain(&idx.validation).all(|&i| set.subjects[i] != held));
    }

    #[test]
    fn epoch_and_model_files_round_trip(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let set = random_set(&mut rng, 2, 2, 2, 3, 9);
        prop_assert_eq!(&decode_epochs(&encode_epochs(&set).unwrap()).unwrap(), &set);
        let net = Network::new(model(Variant::Var, 3, 9, 2, 3, 2), seed).unwrap();
        let bytes = encode_network(&net).unwrap();
        prop_assert_eq!(encode_network(&decode_network(&bytes).unwrap()).unwrap(), bytes);
    }

    #[test]
    fn confusion_rows_count_class_trials(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let set = random_set(&mut rng, 1, 3, 4, 5, 12);
        let net = Network::new(model(Variant::Lf, 5, 12, 2, 3, 3), seed).unwrap();
        let m = confusion_matrix(&net, &set).unwrap();
        for row in &m {
            prop_assert_eq!(row.iter().sum::<usize>(), 4);
        }
        let acc = accuracy(&net, &set).unwrap();
        prop_assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn frozen_realtime_session_equals_offline_accuracy(seed in any::<u64>(), batch in 1usize..9, correct_only in any::<bool>()) {
        let mut rng = Rng::new(seed);
        let set = random_set(&mut rng, 1, 3, 5, 4, 10);
        let mut net = Network::new(model(Variant::Lf, 4, 10, 2, 3, 3), seed).unwrap();
        let before = encode_network(&net).unwrap();
        let offline = accuracy(&net, &set).unwrap();
        let policy = if correct_only { UpdatePolicy::CorrectOnly } else { UpdatePolicy::All };
        let cfg = RealtimeConfig { batch_size: batch, learning_rate: 0.0, policy, order_seed: seed };
        let trace = pseudo_realtime(&mut net, &set, &cfg).unwrap();
        prop_assert_eq!(trace.accuracy, offline);
        prop_assert_eq!(encode_network(&net).unwrap(), before);
    }

    #[test]
    fn pattern_scales_with_filter(seed in any::<u64>(), a in 0.01f64..20.0) {
        let mut rng = Rng::new(seed);
        let set = random_set(&mut rng, 1, 2, 3, 4, 8);
        let w = rng.normal(0.0, 1.0, &[4, 2]).unwrap();
        let p = activation_pattern(&w, &set, 1, false, 0.0).unwrap();
        let q = activation_pattern(&w.scale(a).unwrap(), &set, 1, false, 0.0).unwrap();
        for (u, v) in p.pattern.data().iter().zip(q.pattern.data()) {
            prop_assert!((a * u - v).abs() <= 1e-9 * (1.0 + v.abs()));
        }
    }

    #[test]
    fn filter_power_is_nonnegative_over_half_band(taps in prop::collection::vec(-5.0f64..5.0, 1..12), fs in 10.0f64..2000.0) {
        let s = filter_spectrum(&taps, fs, 64).unwrap();
        prop_assert!(s.power.iter().all(|&p| p >= 0.0));
        prop_assert_eq!(s.freqs_hz[0], 0.0);
        prop_assert!((s.freqs_hz[63] - fs / 2.0).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn history_matches_checkpoint_schedule(seed in any::<u64>(), iters in 0usize..40, every in 1usize..15) {
        let mut rng = Rng::new(seed);
        let train = random_set(&mut rng, 1, 2, 6, 4, 10);
        let val = random_set(&mut rng, 1, 2, 2, 4, 10);
        let mut net = Network::new(model(Variant::Lf, 4, 10, 2, 3, 2), seed).unwrap();
        let tc = TrainConfig { max_iterations: iters, eval_every: every, batch_size: 4, seed, ..TrainConfig::default() };
        let r = net.train(&train, &val, &tc).unwrap();
        prop_assert!(r.returned_iteration <= r.iterations_run);
        match r.stop_reason {
            StopReason::MaxIter => {
                prop_assert_eq!(r.iterations_run, iters);
                prop_assert_eq!(r.history.len(), iters.div_ceil(every));
            }
            StopReason::EarlyStop => {
                let last = r.history.last().unwrap().iteration;
                prop_assert_eq!(last, r.iterations_run);
                prop_assert!(r.returned_iteration < last);
            }
        }
    }

    #[test]
    fn generator_is_deterministic(seed in any::<u64>()) {
        let g = GenConfig::evoked(10, 20, 2, seed);
        prop_assert_eq!(generate(&g).unwrap(), generate(&g).unwrap());
    }
}

#[test]
fn tensor_rejects_inconsistent_shapes() {
    assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
}
