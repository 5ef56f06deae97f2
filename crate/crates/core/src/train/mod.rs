//! End-to-end model assembly, SGD training with step decay, evaluation and
//! checkpoints.

mod config;
mod model;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::VideoGraphSample;
use crate::heads::{topk_accuracy, HeadMetrics, MetricsReport};
use crate::numerics::checkpoint::{self, DType};
use crate::numerics::{ParamStore, Tape};

pub use config::{TrainConfig, CONFIG_KEYS};
pub use model::{
    check_compatible, check_sample, forward, forward_on, init_params, loss_on, param_shapes,
    ForwardOutput, ForwardVars,
};

/// `θ ← θ − lr·∇θ`, then zeroes every gradient. Nothing is updated when any
/// gradient is non-finite.
pub fn sgd_step(store: &mut ParamStore, lr: f64) -> Result<()> {
    if let Some((name, _)) = store
        .iter()
        .find(|(_, p)| !p.grad.data().iter().all(|g| g.is_finite()))
    {
        return Err(Error::NonFiniteGradient(name.to_string()));
    }
    for (_, p) in store.iter_mut() {
        for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
            *v -= lr * g;
        }
    }
    store.zero_grad();
    Ok(())
}

/// Compact scores of one evaluation pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub loss: f64,
    pub subactivity_accuracy: f64,
    pub affordance_accuracy: f64,
    pub subactivity_f1: f64,
    pub affordance_f1: f64,
}

impl From<&MetricsReport> for EvalSummary {
    fn from(r: &MetricsReport) -> Self {
        EvalSummary {
            loss: r.mean_loss,
            subactivity_accuracy: r.subactivity.accuracy,
            affordance_accuracy: r.affordance.accuracy,
            subactivity_f1: r.subactivity.macro_f1,
            affordance_f1: r.affordance.macro_f1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 0-based epoch index.
    pub epoch: usize,
    pub lr: f64,
    /// Mean loss over the epoch's update steps.
    pub step_loss: f64,
    /// Training set scored after the epoch's updates.
    pub train: EvalSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val: Option<EvalSummary>,
    /// Wall-clock seconds since the run (or resume) started.
    pub elapsed_secs: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn last(&self) -> Option<&EpochLog> {
        self.epochs.last()
    }

    /// Equality ignoring wall-clock fields.
    pub fn same_trajectory(&self, other: &TrainLog) -> bool {
        self.epochs.len() == other.epochs.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| {
                EpochLog {
                    elapsed_secs: 0.0,
                    ..a.clone()
                } == EpochLog {
                    elapsed_secs: 0.0,
                    ..b.clone()
                }
            })
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("plain data") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let epochs = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l).map_err(|e| Error::Config(format!("training log: {e}")))
            })
            .collect::<Result<_>>()?;
        Ok(TrainLog { epochs })
    }
}

pub struct TrainOutcome {
    pub params: ParamStore,
    pub log: TrainLog,
}

/// Trains from a fresh seeded initialization.
pub fn train(
    cfg: &TrainConfig,
    data: &[VideoGraphSample],
    val: Option<&[VideoGraphSample]>,
) -> Result<TrainOutcome> {
    train_from(
        cfg,
        data,
        val,
        init_params(cfg, cfg.seed),
        TrainLog::default(),
        |_, _| Ok(()),
    )
}

/// Continues training from `params` after `log.epochs.len()` completed
/// epochs. `on_epoch` runs after each epoch with its log entry and the
/// updated parameters. Data order for an epoch depends only on the seed and
/// the epoch index, so a resumed run matches an uninterrupted one.
pub fn train_from<F>(
    cfg: &TrainConfig,
    data: &[VideoGraphSample],
    val: Option<&[VideoGraphSample]>,
    params: ParamStore,
    log: TrainLog,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochLog, &ParamStore) -> Result<()>,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    for s in data.iter().chain(val.unwrap_or(&[])) {
        check_sample(cfg, s)?;
    }
    check_compatible(cfg, &params)?;
    let start = Instant::now();
    let mut params = params;
    let mut log = log;
    params.zero_grad();
    for epoch in log.epochs.len()..cfg.epochs {
        let last_good = params.clone();
        let diverged = |cause: String, store: ParamStore| Error::Diverged {
            epoch,
            last_good_epoch: epoch,
            cause,
            last_good: Box::new(store),
        };
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            for &i in batch {
                let mut tape = Tape::new();
                let step = loss_on(&mut tape, &data[i], &params, cfg).and_then(|(_, loss)| {
                    let scaled = tape.scale(loss, 1.0 / batch.len() as f64)?;
                    tape.backward_into(scaled, &mut params)?;
                    Ok(tape.value(loss).data()[0])
                });
                match step {
                    Ok(l) => loss_sum += l,
                    Err(e) if e.is_numerical() => return Err(diverged(e.to_string(), last_good)),
                    Err(e) => return Err(e),
                }
            }
            if let Err(e) = sgd_step(&mut params, lr) {
                return Err(diverged(e.to_string(), last_good));
            }
        }
        let train_report = match evaluate(&params, cfg, data, &[]) {
            Ok(r) => r,
            Err(e) if e.is_numerical() => return Err(diverged(e.to_string(), last_good)),
            Err(e) => return Err(e),
        };
        let val_summary = match val {
            Some(v) if !v.is_empty() => Some(EvalSummary::from(&evaluate(&params, cfg, v, &[])?)),
            _ => None,
        };
        let entry = EpochLog {
            epoch,
            lr,
            step_loss: loss_sum / data.len() as f64,
            train: EvalSummary::from(&train_report),
            val: val_summary,
            elapsed_secs: start.elapsed().as_secs_f64(),
        };
        on_epoch(&entry, &params)?;
        log.epochs.push(entry);
    }
    Ok(TrainOutcome { params, log })
}

/// Scores `data` without touching the parameters. Top-k keys are `top{k}`;
/// `k` larger than the number of subactivity classes is clamped to it.
pub fn evaluate(
    store: &ParamStore,
    cfg: &TrainConfig,
    data: &[VideoGraphSample],
    k_list: &[usize],
) -> Result<MetricsReport> {
    check_compatible(cfg, store)?;
    if data.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let mut loss_sum = 0.0;
    let mut sub_pred = Vec::with_capacity(data.len());
    let mut sub_label = Vec::with_capacity(data.len());
    let mut sub_logits = Vec::with_capacity(data.len());
    let (mut aff_pred, mut aff_label) = (Vec::new(), Vec::new());
    for s in data {
        check_sample(cfg, s)?;
        let mut tape = Tape::new();
        let (fwd, loss) = loss_on(&mut tape, s, store, cfg)?;
        loss_sum += tape.value(loss).data()[0];
        let p = crate::heads::Prediction::from_tape(&tape, fwd.prediction);
        sub_pred.push(p.subactivity());
        sub_label.push(s.subactivity_label);
        aff_pred.extend(p.affordances());
        aff_label.extend(s.affordance_labels());
        sub_logits.push(p.subactivity_logits);
    }
    let mut topk = BTreeMap::new();
    for &k in k_list {
        if k == 0 {
            return Err(Error::Config("top-k needs k >= 1".into()));
        }
        let acc = topk_accuracy(&sub_logits, &sub_label, k.min(cfg.subactivities))?;
        topk.insert(format!("top{k}"), acc);
    }
    Ok(MetricsReport {
        samples: data.len(),
        mean_loss: loss_sum / data.len() as f64,
        subactivity: HeadMetrics::compute(&sub_pred, &sub_label, cfg.subactivities)?,
        affordance: HeadMetrics::compute(&aff_pred, &aff_label, cfg.affordances)?,
        topk,
    })
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: TrainConfig,
    epochs_completed: usize,
}

/// Writes parameters with the configuration and epoch count as metadata.
pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    cfg: &TrainConfig,
    epochs_completed: usize,
) -> Result<()> {
    let meta = serde_json::to_value(CheckpointMeta {
        config: cfg.clone(),
        epochs_completed,
    })
    .expect("plain data");
    checkpoint::save(path, store, DType::F64, meta)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`] and checks that its
/// tensors match the stored configuration.
pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, TrainConfig, usize)> {
    let (store, manifest) = checkpoint::load(path)?;
    let meta: CheckpointMeta = serde_json::from_value(manifest.metadata)
        .map_err(|e| Error::Incompatible(format!("checkpoint metadata: {e}")))?;
    check_compatible(&meta.config, &store)?;
    Ok((store, meta.config, meta.epochs_completed))
}
