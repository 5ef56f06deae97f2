use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use spdtp_core::graph::{
    load_dataset_with_frames, save_dataset, synth_generate, SynthConfig, VideoGraphSample,
};
use spdtp_core::train::{
    evaluate, init_params, load_checkpoint, save_checkpoint, train_from, TrainConfig, TrainLog,
};
use spdtp_core::Error;

use crate::{
    EvalArgs, ModelConfigArgs, SynthArgs, TrainArgs, DATA_DIR_ENV, EXIT_DATA, EXIT_NUMERICAL,
    EXIT_USAGE,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOG_FILE: &str = "log.jsonl";
pub const CONFIG_FILE: &str = "config.txt";

/// Bad flag values that clap cannot see.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// 2 for usage and configuration errors, 4 for numerical aborts, 3 for
/// everything else (unreadable or invalid data and checkpoints).
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) => EXIT_USAGE,
                e if e.is_numerical() => EXIT_NUMERICAL,
                _ => EXIT_DATA,
            };
        }
    }
    EXIT_DATA
}

pub fn data_path(flag: Option<PathBuf>) -> Result<PathBuf> {
    match flag {
        Some(p) => Ok(p),
        None => match std::env::var_os(DATA_DIR_ENV) {
            Some(dir) => Ok(Path::new(&dir).join("train.jsonl")),
            None => Err(usage(format!(
                "no --data given and {DATA_DIR_ENV} is not set"
            ))),
        },
    }
}

pub fn load_data(path: &Path, frames: usize) -> Result<Vec<VideoGraphSample>> {
    let data = load_dataset_with_frames(path, frames)?;
    if data.is_empty() {
        return Err(Error::Graph(format!("{} holds no videos", path.display())).into());
    }
    Ok(data)
}

/// Defaults, then the config file, then `--set` overrides in order.
pub fn model_config(args: &ModelConfigArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    cfg.apply_overrides(&args.overrides)?;
    Ok(cfg)
}

fn parse_range(text: &str) -> Result<(usize, usize)> {
    let bad = || usage(format!("--objects `{text}` is not K or MIN-MAX"));
    let (lo, hi) = match text.split_once('-') {
        Some((a, b)) => (
            a.trim().parse().map_err(|_| bad())?,
            b.trim().parse().map_err(|_| bad())?,
        ),
        None => {
            let k = text.trim().parse().map_err(|_| bad())?;
            (k, k)
        }
    };
    Ok((lo, hi))
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let (min_objects, max_objects) = parse_range(&args.objects)?;
    let config = SynthConfig {
        num_videos: args.videos + args.test_videos,
        frames: args.frames,
        min_objects,
        max_objects,
        num_subactivities: args.classes,
        num_affordances: args.affordances,
        num_object_categories: args.categories,
        feature_dim: args.feature_dim,
        noise: args.noise,
        feature_scale: args.feature_scale,
        keyframes: args.keyframes,
        seed: args.seed,
    };
    if args.videos == 0 {
        return Err(usage("--videos must be at least 1"));
    }
    let mut data = synth_generate(&config)?;
    let test = data.split_off(args.videos);
    save_dataset(&data, &args.out)?;
    if let Some(path) = &args.test_out {
        save_dataset(&test, path)?;
    }
    eprintln!(
        "wrote {} videos to {}{}",
        data.len(),
        args.out.display(),
        args.test_out
            .as_ref()
            .map(|p| format!(" and {} to {}", test.len(), p.display()))
            .unwrap_or_default()
    );
    Ok(())
}

fn write_log(path: &Path, log: &TrainLog) -> Result<()> {
    fs::write(path, log.to_jsonl()).with_context(|| format!("writing {}", path.display()))
}

fn append_log(path: &Path, line: &str) -> spdtp_core::Result<()> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io)?;
    writeln!(f, "{line}").map_err(io)
}

/// Configuration equality ignoring the epoch budget, which a resumed run may
/// extend.
fn same_run(a: &TrainConfig, b: &TrainConfig) -> bool {
    TrainConfig {
        epochs: 0,
        ..a.clone()
    } == TrainConfig {
        epochs: 0,
        ..b.clone()
    }
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = model_config(&args.model)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let data = load_data(&data_path(args.data)?, cfg.frames)?;
    let val = args
        .val
        .as_deref()
        .map(|p| load_data(p, cfg.frames))
        .transpose()?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let ckpt = args.out.join(CHECKPOINT_FILE);
    let log_path = args.out.join(LOG_FILE);

    let (params, log) = if args.resume {
        let (store, saved, done) = load_checkpoint(&ckpt)?;
        if !same_run(&saved, &cfg) {
            return Err(usage(format!(
                "--resume: configuration differs from the one in {}",
                ckpt.display()
            )));
        }
        let text = fs::read_to_string(&log_path)
            .with_context(|| format!("reading {}", log_path.display()))?;
        let mut log = TrainLog::from_jsonl(&text)?;
        if log.epochs.len() < done {
            return Err(Error::Config(format!(
                "{} has {} epochs but the checkpoint has {done}",
                log_path.display(),
                log.epochs.len()
            ))
            .into());
        }
        log.epochs.truncate(done);
        write_log(&log_path, &log)?;
        (store, log)
    } else {
        if ckpt.exists() {
            return Err(usage(format!(
                "{} already holds a checkpoint; pass --resume or choose another --out",
                args.out.display()
            )));
        }
        write_log(&log_path, &TrainLog::default())?;
        (init_params(&cfg, cfg.seed), TrainLog::default())
    };
    fs::write(args.out.join(CONFIG_FILE), cfg.to_kv_string())
        .with_context(|| format!("writing {}", args.out.display()))?;

    let quiet = args.quiet;
    let result = train_from(&cfg, &data, val.as_deref(), params, log, |entry, params| {
        append_log(
            &log_path,
            &serde_json::to_string(entry).expect("plain data"),
        )?;
        save_checkpoint(&ckpt, params, &cfg, entry.epoch + 1)?;
        if !quiet {
            eprintln!(
                "epoch {:>4}/{} lr {:.2e} loss {:.4} sub {:.3} aff {:.3}",
                entry.epoch + 1,
                cfg.epochs,
                entry.lr,
                entry.train.loss,
                entry.train.subactivity_accuracy,
                entry.train.affordance_accuracy
            );
        }
        Ok(())
    });
    match result {
        Ok(out) => {
            save_checkpoint(&ckpt, &out.params, &cfg, out.log.epochs.len())?;
            if let Some(last) = out.log.last() {
                println!("{}", serde_json::to_string(&last.train)?);
            }
            Ok(())
        }
        Err(Error::Diverged {
            epoch,
            last_good_epoch,
            cause,
            last_good,
        }) => {
            save_checkpoint(&ckpt, &last_good, &cfg, last_good_epoch)?;
            Err(Error::Diverged {
                epoch,
                last_good_epoch,
                cause,
                last_good,
            })
            .with_context(|| format!("last good checkpoint kept in {}", ckpt.display()))
        }
        Err(e) => Err(e.into()),
    }
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let (store, cfg, _) = load_checkpoint(&args.ckpt)?;
    let data = load_data(&data_path(args.data)?, cfg.frames)?;
    let report = evaluate(&store, &cfg, &data, &args.topk)?;
    let text = serde_json::to_string_pretty(&report)?;
    match args.out {
        Some(p) => {
            fs::write(&p, text + "\n").with_context(|| format!("writing {}", p.display()))?
        }
        None => println!("{text}"),
    }
    Ok(())
}
