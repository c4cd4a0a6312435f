use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use slimkws::checkpoint::save_model;
use slimkws::data::{load_speech_commands, synth_dataset, write_synth_tree, Dataset, Splits, SynthConfig};
use slimkws::metrics::{count_multiplies, count_params, profile_time_per_step, FaSettings, NormSets, RunReport};
use slimkws::models::Model;
use slimkws::slim::WidthList;
use slimkws::trainer::{load_training, train as run_training, TrainOptions};
use slimkws::{Error, Result};

use crate::config::{Config, DataSource};
use crate::{EvalArgs, ExportArgs, ProfileArgs, SynthArgs, TrainArgs};

pub const CHECKPOINT_FILE: &str = "model.slnk";
pub const LOG_FILE: &str = "train.jsonl";
pub const REPORT_FILE: &str = "report.json";

/// Worker cap from `SLNK_THREADS`; 1 when unset.
fn threads() -> Result<usize> {
    match std::env::var("SLNK_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!("SLNK_THREADS must be a positive integer, got '{v}'"))),
        },
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Checks every input path named by the config before any work starts.
fn check_paths(cfg: &Config) -> Result<()> {
    if let DataSource::SpeechCommands { root, .. } = &cfg.data.source {
        if !root.is_dir() {
            return Err(Error::Input(format!("dataset root {} does not exist", root.display())));
        }
    }
    Ok(())
}

fn load_data(cfg: &Config, frames: usize) -> Result<Splits> {
    check_paths(cfg)?;
    let threads = threads()?;
    let d = &cfg.data;
    let splits = match &d.source {
        DataSource::Synth(s) => {
            let all = synth_dataset(s, &cfg.features, frames, threads)?;
            let (rest, test) = all.stratified_split(d.test_fraction, s.seed)?;
            let (train, validation) = rest.stratified_split(d.validation_fraction, s.seed.wrapping_add(1))?;
            Splits {
                train,
                validation,
                test,
            }
        }
        DataSource::SpeechCommands { root, classes } => {
            let mut s = load_speech_commands(root, classes.as_deref(), &cfg.features, frames, threads)?;
            if s.validation.is_empty() && d.validation_fraction > 0.0 {
                let (train, validation) = s.train.stratified_split(d.validation_fraction, cfg.train.seed)?;
                s.train = train;
                s.validation = validation;
            }
            s
        }
    };
    log::info!(
        "data: {} train, {} validation, {} test examples over {} classes",
        splits.train.len(),
        splits.validation.len(),
        splits.test.len(),
        splits.train.num_classes()
    );
    if splits.train.is_empty() {
        return Err(Error::Input("the training split is empty".into()));
    }
    Ok(splits)
}

/// Test split, else validation, else training data.
fn eval_split(s: &Splits) -> &Dataset {
    if !s.test.is_empty() {
        &s.test
    } else if !s.validation.is_empty() {
        log::warn!("no test split; reporting on the validation split");
        &s.validation
    } else {
        log::warn!("no held-out data; reporting on the training split");
        &s.train
    }
}

/// False-accept settings for binary tasks.
fn fa_settings(cfg: &Config, data: &Dataset) -> Result<Option<FaSettings>> {
    if data.num_classes() != 2 {
        if cfg.data.positive_class.is_some() {
            log::warn!("positive_class is ignored for a {}-class task", data.num_classes());
        }
        return Ok(None);
    }
    let positive_class = match &cfg.data.positive_class {
        None => 1,
        Some(name) => data
            .classes
            .iter()
            .position(|c| c == name)
            .or_else(|| name.parse().ok().filter(|&i: &usize| i < 2))
            .ok_or_else(|| {
                Error::Config(format!(
                    "positive_class '{name}' is not one of {}",
                    data.classes.join(", ")
                ))
            })?,
    };
    Ok(Some(FaSettings {
        positive_class,
        target_miss: cfg.data.target_miss,
    }))
}

/// Matches a command-line width against the list, tolerating rounding in
/// values such as 0.667.
fn resolve_width(arg: &str, widths: &WidthList) -> Result<f64> {
    let w: f64 = arg
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("width '{arg}' is not a number (valid widths: {widths})")))?;
    if widths.contains(w) {
        return Ok(w);
    }
    let near: Vec<f64> = widths.iter().filter(|v| (v - w).abs() < 1e-3).collect();
    match near.as_slice() {
        [v] => Ok(*v),
        _ => Err(Error::Config(format!("width {w} is not in the checkpoint's width list {widths}"))),
    }
}

fn check_classes(model: &Model<f32>, data: &Dataset) -> Result<()> {
    if data.num_classes() > model.spec().num_classes {
        return Err(Error::Input(format!(
            "the data has {} classes but the model predicts {}",
            data.num_classes(),
            model.spec().num_classes
        )));
    }
    Ok(())
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = Config::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    check_paths(&cfg)?;
    let resumed = match &args.resume {
        Some(p) => {
            let loaded = load_training(p, &cfg.train.optimizer)?;
            let state = loaded
                .state
                .ok_or_else(|| Error::Input(format!("{} holds no optimizer state to resume from", p.display())))?;
            Some((loaded.model, state))
        }
        None => None,
    };
    let splits = load_data(&cfg, cfg.model.frames)?;
    if !cfg.num_classes_set {
        cfg.model.num_classes = splits.train.num_classes();
    }
    let (mut model, resume) = match resumed {
        Some((m, s)) => {
            if m.spec() != &cfg.model {
                return Err(Error::Config(format!(
                    "{} was trained with a different [model] section",
                    args.resume.as_ref().expect("resuming").display()
                )));
            }
            log::info!("resuming at step {}", s.step);
            (m, Some(s))
        }
        None => (Model::<f32>::build(&cfg.model, cfg.train.seed)?, None),
    };
    check_classes(&model, &splits.train)?;

    fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    let log_path = cfg.out_dir.join(LOG_FILE);
    let mut log_file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(io_err(&log_path))?;
    let ckpt = cfg.out_dir.join(CHECKPOINT_FILE);
    let eval_set = (!splits.validation.is_empty()).then_some(&splits.validation);
    let log = run_training(
        &mut model,
        &splits.train,
        &cfg.train,
        TrainOptions {
            eval_set,
            checkpoint: Some(ckpt.clone()),
            config_text: Some(cfg.to_ini()),
            log: Some(&mut log_file),
            resume,
            max_steps: args.max_steps,
        },
    )?;
    log_file.flush().map_err(io_err(&log_path))?;
    log::info!("finished at step {}; checkpoint {}", log.final_step, ckpt.display());

    let data = eval_split(&splits);
    let mut report = RunReport::new(model.spec(), cfg.train.seed, NormSets::Active)?;
    report.evaluate(&model, data, cfg.train.eval_batch_size, fa_settings(&cfg, data)?)?;
    for w in cfg.train.widths.iter() {
        if let Some(ms) = log.mean_width_ms(w) {
            report.set_time_per_step(w, ms)?;
        }
    }
    report.write(&cfg.out_dir.join(REPORT_FILE))?;
    print!("{report}");
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let cfg = Config::load(&args.config)?;
    let model = load_training(&args.ckpt, &cfg.train.optimizer)?.model;
    let widths: Vec<f64> = if args.width == "all" {
        model.spec().widths.widths().to_vec()
    } else {
        vec![resolve_width(&args.width, &model.spec().widths)?]
    };
    if model.spec().mel_bins != cfg.features.mel_bins {
        return Err(Error::Config(format!(
            "the checkpoint expects {} mel bins, [features] computes {}",
            model.spec().mel_bins,
            cfg.features.mel_bins
        )));
    }
    let splits = load_data(&cfg, model.spec().frames)?;
    let data = eval_split(&splits);
    check_classes(&model, data)?;
    let norms = if args.all_norm_sets { NormSets::All } else { NormSets::Active };
    let mut report = RunReport::new(model.spec(), cfg.train.seed, norms)?;
    report.retain_widths(&widths);
    report.evaluate(&model, data, cfg.train.eval_batch_size, fa_settings(&cfg, data)?)?;
    if let Some(p) = &args.report {
        report.write(p)?;
    }
    print!("{report}");
    Ok(())
}

pub fn export(args: ExportArgs) -> Result<()> {
    let model = load_training(&args.ckpt, &Default::default())?.model;
    let w = resolve_width(&args.width, &model.spec().widths)?;
    let sub = model.extract_subnetwork(w)?;
    save_model(&args.out, &sub)?;
    println!(
        "exported width {w} to {}: {} params, {} multiplies",
        args.out.display(),
        count_params(sub.spec(), 1.0, NormSets::Active)?,
        count_multiplies(sub.spec(), 1.0)?
    );
    Ok(())
}

pub fn profile(args: ProfileArgs) -> Result<()> {
    let cfg = Config::load(&args.config)?;
    let counts = args.widths.unwrap_or_else(|| cfg.profile.width_counts.clone());
    if counts.contains(&0) {
        return Err(Error::Config("width counts must be >= 1".into()));
    }
    let table = profile_time_per_step(&cfg.model, &counts, &cfg.profile.cfg)?;
    if let Some(p) = &args.report {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let json = serde_json::to_string_pretty(&table).expect("table serializes");
        fs::write(p, json).map_err(io_err(p))?;
    }
    print!("{table}");
    Ok(())
}

pub fn synth_data(args: SynthArgs) -> Result<()> {
    let cfg = SynthConfig::new(args.classes, args.per_class, args.seed);
    let n = write_synth_tree(&args.out, &cfg)?;
    println!("wrote {n} clips under {}", args.out.display());
    Ok(())
}
