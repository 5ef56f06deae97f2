//! Per-video export of spatial attention and temporal pooling weights.
//!
//! For each video `<id>` the output directory receives
//! - `<id>.json`: the full bundle,
//! - `<id>.spatial.csv`: one row per (stream, frame) with the attention
//!   matrix flattened row-major into `a{from}_{to}` columns (node ids),
//! - `<id>.temporal.csv`: one row per (stream, layer, node, window),
//!
//! and `summary.csv` gets one row per object with the mean attention the
//! human pays to it.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use spdtp_core::fusion::TemporalRecord;
use spdtp_core::graph::VideoGraphSample;
use spdtp_core::spatial::AttentionRecord;
use spdtp_core::train::{forward, load_checkpoint, ForwardOutput};

use crate::commands::{data_path, load_data, usage};
use crate::ExportArgs;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportedEntity {
    pub node_id: u32,
    pub is_human: bool,
    pub category_id: usize,
    pub affordance_label: Option<usize>,
    pub predicted_affordance: Option<usize>,
    /// Attention from the human to this node, averaged over frames and
    /// streams.
    pub human_attention: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportBundle {
    pub video_id: String,
    pub frames: usize,
    pub subactivity_label: usize,
    pub predicted_subactivity: usize,
    pub entities: Vec<ExportedEntity>,
    /// `[frame][from][to]` per stream, nodes in entity order.
    pub spatial: AttentionRecord,
    pub temporal: Vec<TemporalRecord>,
}

impl ExportBundle {
    pub fn new(sample: &VideoGraphSample, out: ForwardOutput) -> Self {
        let human = sample.human_index();
        let objects = sample.object_indices();
        let affordances = out.prediction.affordances();
        let frames = out.attention.frames();
        let entities = sample
            .entities
            .iter()
            .enumerate()
            .map(|(k, e)| {
                let total: f64 = (0..frames)
                    .map(|t| {
                        out.attention.visual[t][human][k] + out.attention.semantic[t][human][k]
                    })
                    .sum();
                ExportedEntity {
                    node_id: e.node_id,
                    is_human: e.is_human,
                    category_id: e.category_id,
                    affordance_label: e.affordance_label,
                    predicted_affordance: objects
                        .iter()
                        .position(|&o| o == k)
                        .map(|m| affordances[m]),
                    human_attention: total / (2 * frames) as f64,
                }
            })
            .collect();
        ExportBundle {
            video_id: sample.video_id.clone(),
            frames,
            subactivity_label: sample.subactivity_label,
            predicted_subactivity: out.prediction.subactivity(),
            entities,
            spatial: out.attention,
            temporal: out.temporal,
        }
    }

    pub fn spatial_csv(&self) -> String {
        let ids = &self.spatial.node_ids;
        let mut s = String::from("stream,frame");
        for a in ids {
            for b in ids {
                let _ = write!(s, ",a{a}_{b}");
            }
        }
        s.push('\n');
        for (stream, mats) in [
            ("visual", &self.spatial.visual),
            ("semantic", &self.spatial.semantic),
        ] {
            for (t, m) in mats.iter().enumerate() {
                let _ = write!(s, "{stream},{t}");
                for v in m.iter().flatten() {
                    let _ = write!(s, ",{v}");
                }
                s.push('\n');
            }
        }
        s
    }

    pub fn temporal_csv(&self) -> String {
        let width = self
            .temporal
            .iter()
            .flat_map(|r| r.weights.iter().flatten())
            .map(Vec::len)
            .max()
            .unwrap_or(0);
        let mut s = String::from("stream,layer,node_id,window,center");
        for i in 0..width {
            let _ = write!(s, ",w{i}");
        }
        s.push('\n');
        for r in &self.temporal {
            for (node, windows) in r.weights.iter().enumerate() {
                for (w, weights) in windows.iter().enumerate() {
                    let _ = write!(
                        s,
                        "{},{},{},{w},{}",
                        r.stream, r.layer, self.spatial.node_ids[node], r.centers[w]
                    );
                    for v in weights {
                        let _ = write!(s, ",{v}");
                    }
                    s.push('\n');
                }
            }
        }
        s
    }
}

pub const SUMMARY_HEADER: &str =
    "video_id,node_id,category_id,affordance_label,predicted_affordance,human_attention";

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn run(args: ExportArgs) -> Result<()> {
    let (store, cfg, _) = load_checkpoint(&args.ckpt)?;
    let data = load_data(&data_path(args.data)?, cfg.frames)?;
    let selected: Vec<&VideoGraphSample> = if args.video_ids.is_empty() {
        data.iter().collect()
    } else {
        args.video_ids
            .iter()
            .map(|id| {
                data.iter()
                    .find(|s| &s.video_id == id)
                    .ok_or_else(|| usage(format!("--video-id `{id}` is not in the dataset")))
            })
            .collect::<Result<_>>()?
    };
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut summary = format!("{SUMMARY_HEADER}\n");
    for sample in selected {
        let bundle = ExportBundle::new(sample, forward(sample, &store, &cfg)?);
        let id = &bundle.video_id;
        write(
            &args.out.join(format!("{id}.json")),
            &serde_json::to_string_pretty(&bundle)?,
        )?;
        write(
            &args.out.join(format!("{id}.spatial.csv")),
            &bundle.spatial_csv(),
        )?;
        write(
            &args.out.join(format!("{id}.temporal.csv")),
            &bundle.temporal_csv(),
        )?;
        for e in bundle.entities.iter().filter(|e| !e.is_human) {
            let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
            let _ = writeln!(
                summary,
                "{id},{},{},{},{},{}",
                e.node_id,
                e.category_id,
                opt(e.affordance_label),
                opt(e.predicted_affordance),
                e.human_attention
            );
        }
    }
    write(&args.out.join("summary.csv"), &summary)?;
    Ok(())
}
