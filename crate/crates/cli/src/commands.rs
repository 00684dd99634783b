use std::fs;
use std::path::Path;

use megdecode::dataio::{preprocess, read_epochs, write_epochs};
use megdecode::eval::{
    accuracy, confusion_accuracy, confusion_matrix, fold_seed, loso_evaluate, loso_split, pseudo_realtime,
    LinearSvm, LosoConfig, RealtimeConfig, SvmConfig,
};
use megdecode::interpret::{interpret as interpret_model, Selection};
use megdecode::model::ModelConfig;
use megdecode::optim::{describe_hyperparameters, Network, TrainConfig};
use megdecode::synth::{generate, random_mixing, EpochSet, GenConfig, LatentSourceSpec};
use megdecode::weights::{load_network, save_network};
use megdecode::Rng;

use crate::{
    Classifier, CliError, EvalArgs, InterpretArgs, ModelArgs, OptimArgs, RtsimArgs, SelectionArg, SynthArgs, Task,
    TrainArgs,
};

const STREAM_CLI_MIXING: u64 = 0xC11;

type CliResult<T = ()> = Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

fn require_file(path: &Path) -> CliResult {
    if path.is_file() {
        Ok(())
    } else {
        usage(format!("input file {} does not exist", path.display()))
    }
}

fn load_data(path: &Path) -> CliResult<EpochSet> {
    require_file(path)?;
    Ok(read_epochs(path)?)
}

fn load_model(path: &Path) -> CliResult<Network> {
    require_file(path)?;
    Ok(load_network(path)?)
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn subject_set(set: &EpochSet, subject: usize) -> CliResult<EpochSet> {
    let idx: Vec<usize> = (0..set.n_trials()).filter(|&i| set.subjects[i] == subject).collect();
    if idx.is_empty() {
        return usage(format!("subject {subject} not present in the data"));
    }
    Ok(set.subset(&idx)?)
}

fn model_config(args: &ModelArgs, set: &EpochSet) -> CliResult<ModelConfig> {
    let cfg = ModelConfig {
        n_latent: args.k,
        filter_len: args.filter_len,
        dropout_rate: args.dropout,
        l1_lambda: args.l1,
        ..ModelConfig::new(args.variant, set.n_channels(), set.n_times(), set.n_classes)
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn train_config(args: &OptimArgs, seed: u64) -> CliResult<TrainConfig> {
    let cfg = TrainConfig {
        learning_rate: args.lr,
        batch_size: args.batch_size,
        max_iterations: args.max_iter,
        eval_every: args.eval_every,
        stop_delta: args.stop_delta,
        seed,
        ..TrainConfig::default()
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if !(args.val_fraction > 0.0 && args.val_fraction < 1.0) {
        return usage("--val-fraction must be in (0, 1)");
    }
    Ok(cfg)
}

/// Resizes the source list to `k`: extra sources are slow background
/// processes, and the mixing matrix is redrawn.
fn resize_sources(g: &mut GenConfig, k: usize) -> CliResult {
    g.n_latent = k;
    g.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    g.sources.truncate(k);
    while g.sources.len() < k {
        g.sources.push(LatentSourceSpec::ar1(0.9, 0.5));
    }
    g.base_mixing = random_mixing(g.n_channels, k, &mut Rng::substream(g.seed, &[STREAM_CLI_MIXING]))?;
    Ok(())
}

pub fn synth(a: &SynthArgs) -> CliResult {
    let trials = |default| a.trials.unwrap_or(default);
    let mut g = match a.task {
        Task::Evoked => GenConfig::evoked(a.n_channels, a.n_times, trials(300), a.seed),
        Task::Induced => GenConfig::induced(a.n_channels, a.n_times, trials(100), a.seed),
    };
    if let Some(k) = a.n_latent {
        resize_sources(&mut g, k)?;
    }
    g.n_subjects = a.subjects;
    if let Some(v) = a.noise {
        g.noise_std = v;
    }
    if let Some(v) = a.jitter {
        g.subject_mixing_jitter = v;
    }
    if let Some(snr) = a.snr {
        if !matches!(a.task, Task::Evoked) {
            return usage("--snr applies to the evoked task only");
        }
        if !(snr > 0.0) {
            return usage("--snr must be positive");
        }
        g.scale_evoked_to_snr(snr);
    }
    g.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let raw = generate(&g)?;
    let set = if a.raw { raw } else { preprocess(&raw, g.baseline_len)? };
    write_epochs(&a.out, &set)?;
    println!("wrote {}", a.out.display());
    println!("trials = {}", set.n_trials());
    println!("classes = {}", set.n_classes);
    println!("subjects = {}", set.subject_ids().len());
    println!("channels = {}", set.n_channels());
    println!("samples = {}", set.n_times());
    println!("sample_rate_hz = {}", set.sample_rate_hz);
    println!("baseline_scaled = {}", !a.raw);
    println!("snr_estimate = {:.4}", g.channel_snr());
    Ok(())
}

pub fn train(a: &TrainArgs) -> CliResult {
    let set = load_data(&a.data)?;
    let cfg = model_config(&a.model, &set)?;
    let tcfg = train_config(&a.optim, a.seed)?;
    let (tr, va, _) = loso_split(&set, a.held_out, a.optim.val_fraction, a.seed)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let mut net = Network::new(cfg.clone(), a.seed)?;
    let report = net.train(&tr, &va, &tcfg)?;
    save_network(&a.out, &net)?;
    if let Some(p) = &a.report {
        write_text(p, &report.to_csv())?;
    }
    print!("{}", describe_hyperparameters(&cfg, &tcfg));
    println!("iterations_run = {}", report.iterations_run);
    println!("returned_iteration = {}", report.returned_iteration);
    println!("stop_reason = {}", report.stop_reason.as_str());
    println!("train_accuracy = {}", report.train_accuracy);
    println!("val_accuracy = {}", report.val_accuracy);
    println!("wrote {}", a.out.display());
    Ok(())
}

pub fn eval(a: &EvalArgs) -> CliResult {
    let set = load_data(&a.data)?;
    if !a.loso {
        let model = a.model.as_deref().expect("clap enforces --model without --loso");
        let net = load_model(model)?;
        let test = subject_set(&set, a.held_out)?;
        let confusion = confusion_matrix(&net, &test)?;
        println!("subject = {}", a.held_out);
        println!("trials = {}", test.n_trials());
        println!("accuracy = {}", confusion_accuracy(&confusion));
        for (c, row) in confusion.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            println!("confusion[{c}] = {}", cells.join(" "));
        }
        return Ok(());
    }
    let loso = LosoConfig {
        validation_fraction: a.optim.val_fraction,
        seed: a.seed,
        realtime: a.realtime.then(|| RealtimeConfig {
            learning_rate: a.rt_lr,
            policy: a.update_policy,
            ..RealtimeConfig::default()
        }),
        parallel_folds: false,
    };
    let report = match a.classifier {
        Classifier::Cnn => {
            let cfg = model_config(&a.model_cfg, &set)?;
            let tcfg = train_config(&a.optim, a.seed)?;
            let fit = |tr: &EpochSet, va: &EpochSet, seed: u64| {
                let mut net = Network::new(cfg.clone(), seed)?;
                net.train(tr, va, &TrainConfig { seed, ..tcfg.clone() })?;
                Ok(net)
            };
            loso_evaluate(&set, &cfg.variant.to_string(), fit, &loso)?
        }
        Classifier::Svm => {
            let fit = |tr: &EpochSet, va: &EpochSet, seed: u64| {
                LinearSvm::train(tr, va, &SvmConfig { seed, ..SvmConfig::default() })
            };
            loso_evaluate(&set, "svm", fit, &loso)?
        }
    };
    print!("{}", report.to_table());
    if let Some(p) = &a.out {
        write_text(p, &report.to_csv())?;
    }
    let failed: Vec<String> = report
        .folds
        .iter()
        .filter_map(|(s, r)| r.as_ref().err().map(|e| format!("subject {s}: {e}")))
        .collect();
    if failed.len() == report.folds.len() {
        return Err(CliError::Runtime(format!("every fold failed; {}", failed.join("; "))));
    }
    for f in failed {
        eprintln!("warning: {f}");
    }
    Ok(())
}

pub fn rtsim(a: &RtsimArgs) -> CliResult {
    let mut net = load_model(&a.model)?;
    let set = load_data(&a.data)?;
    let test = subject_set(&set, a.held_out)?;
    if a.batch_size == 0 {
        return usage("--batch-size must be >= 1");
    }
    let lr = if a.lr0 { 0.0 } else { a.lr };
    if !(lr >= 0.0 && lr.is_finite()) {
        return usage("--lr must be finite and >= 0");
    }
    let initial = accuracy(&net, &test)?;
    let cfg = RealtimeConfig {
        batch_size: a.batch_size,
        learning_rate: lr,
        policy: a.update_policy,
        order_seed: fold_seed(a.seed, a.held_out),
    };
    let trace = pseudo_realtime(&mut net, &test, &cfg)?;
    if let Some(p) = &a.out {
        write_text(p, &trace.to_csv())?;
    }
    if let Some(p) = &a.save {
        save_network(p, &net)?;
    }
    println!("subject = {}", a.held_out);
    println!("trials = {}", test.n_trials());
    println!("batches = {}", trace.batch_sizes.len());
    println!("updates = {}", trace.updates);
    println!("initial_accuracy = {initial}");
    println!("accuracy = {}", trace.accuracy);
    Ok(())
}

pub fn interpret(a: &InterpretArgs) -> CliResult {
    let net = load_model(&a.model)?;
    let set = load_data(&a.data)?;
    let data = match a.held_out {
        Some(s) => subject_set(&set, s)?,
        None => set,
    };
    let selection = match a.selection {
        SelectionArg::Evoked => Selection::Evoked,
        SelectionArg::Induced => Selection::Induced,
    };
    let report = interpret_model(&net.config, &net.params, &data, selection, a.precision)
        .map_err(|e| match e {
            megdecode::Error::Parameter(m) | megdecode::Error::Contract(m) => CliError::Usage(m),
            other => other.into(),
        })?;
    let summary = report.summary();
    print!("{summary}");
    if let Some(dir) = &a.out_dir {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
        write_text(&dir.join("patterns.csv"), &report.patterns_csv())?;
        write_text(&dir.join("spectra.csv"), &report.spectra_csv())?;
        write_text(&dir.join("summary.txt"), &summary)?;
    }
    Ok(())
}
