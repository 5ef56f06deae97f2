//! Spatio-temporal video graphs: entity tracks, adjacency, two-stream node
//! features, synthetic data and the JSON-lines dataset format.

mod io;
mod streams;
mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Mask, Tensor};

pub use io::{load_dataset, load_dataset_with_frames, parse_record, save_dataset};
pub use streams::{build_streams, StreamDims, StreamFeatures, EMBED_PARAM};
pub use synth::{active_object, synth_generate, SynthConfig, STATIC_AFFORDANCE};

/// Number of box coordinates appended to node features.
pub const BOX_DIM: usize = 4;

/// One tracked entity: the human or an object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityTrack {
    pub node_id: u32,
    pub is_human: bool,
    pub category_id: usize,
    /// Normalized `[x1, y1, x2, y2]` per frame.
    pub boxes: Vec<[f64; 4]>,
    /// Precomputed appearance descriptor per frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visual_feature: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub affordance_label: Option<usize>,
}

/// One video: `frames` steps over `entities`, exactly one of them human.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoGraphSample {
    pub video_id: String,
    pub frames: usize,
    pub entities: Vec<EntityTrack>,
    pub subactivity_label: usize,
    #[serde(default)]
    pub adjacency: Vec<Vec<u8>>,
}

/// Human-object adjacency: 1 between the human and each object, 0 elsewhere.
pub fn init_adjacency(entities: &[EntityTrack]) -> Result<Vec<Vec<u8>>> {
    let humans = entities.iter().filter(|e| e.is_human).count();
    if humans != 1 {
        return Err(Error::Graph(format!(
            "expected exactly one human entity, found {humans}"
        )));
    }
    let n = entities.len();
    let mut adj = vec![vec![0u8; n]; n];
    for i in 0..n {
        for j in 0..n {
            if entities[i].is_human != entities[j].is_human {
                adj[i][j] = 1;
            }
        }
    }
    Ok(adj)
}

impl VideoGraphSample {
    /// Builds a sample, deriving frame count and adjacency from the tracks.
    pub fn new(
        video_id: impl Into<String>,
        entities: Vec<EntityTrack>,
        subactivity_label: usize,
    ) -> Result<Self> {
        let frames = entities.first().map_or(0, |e| e.boxes.len());
        let adjacency = init_adjacency(&entities)?;
        let sample = VideoGraphSample {
            video_id: video_id.into(),
            frames,
            entities,
            subactivity_label,
            adjacency,
        };
        sample.validate()?;
        Ok(sample)
    }

    pub fn num_nodes(&self) -> usize {
        self.entities.len()
    }

    pub fn human_index(&self) -> usize {
        self.entities
            .iter()
            .position(|e| e.is_human)
            .expect("validated sample has a human")
    }

    /// Indices of object nodes in entity order.
    pub fn object_indices(&self) -> Vec<usize> {
        (0..self.entities.len())
            .filter(|&i| !self.entities[i].is_human)
            .collect()
    }

    /// Affordance labels of the objects, in entity order.
    pub fn affordance_labels(&self) -> Vec<usize> {
        self.entities
            .iter()
            .filter(|e| !e.is_human)
            .map(|e| e.affordance_label.unwrap_or(0))
            .collect()
    }

    /// Neighborhood mask `adjacency ∪ self-loops`, shape `[N, N]`.
    pub fn neighborhood_mask(&self) -> Mask {
        let n = self.num_nodes();
        let data = (0..n * n)
            .map(|k| k / n == k % n || self.adjacency[k / n][k % n] == 1)
            .collect();
        Mask::new(vec![n, n], data).expect("non-empty graph")
    }

    pub fn adjacency_tensor(&self) -> Tensor {
        let n = self.num_nodes();
        let data = self.adjacency.iter().flatten().map(|&a| a as f64).collect();
        Tensor::new(vec![n, n], data).expect("square adjacency")
    }

    /// Checks every structural invariant, filling in a missing adjacency.
    pub fn validate_or_fill(&mut self) -> Result<()> {
        if self.adjacency.is_empty() && !self.entities.is_empty() {
            self.adjacency = init_adjacency(&self.entities)
                .map_err(|e| Error::record(&self.video_id, "entities", e.to_string()))?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let id = self.video_id.as_str();
        if self.frames == 0 {
            return Err(Error::record(id, "frames", "must be at least 1"));
        }
        if self.entities.len() < 2 {
            return Err(Error::record(
                id,
                "entities",
                "need a human and at least one object",
            ));
        }
        let humans = self.entities.iter().filter(|e| e.is_human).count();
        if humans != 1 {
            return Err(Error::record(
                id,
                "entities",
                format!("expected exactly one human, found {humans}"),
            ));
        }
        for (n, e) in self.entities.iter().enumerate() {
            if e.boxes.len() != self.frames {
                return Err(Error::record(
                    id,
                    format!("entities[{n}].boxes"),
                    format!("{} boxes for {} frames", e.boxes.len(), self.frames),
                ));
            }
            for (t, b) in e.boxes.iter().enumerate() {
                if b.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::record(
                        id,
                        format!("entities[{n}].boxes[{t}]"),
                        format!("coordinates {b:?} outside [0, 1]"),
                    ));
                }
                if b[0] > b[2] || b[1] > b[3] {
                    return Err(Error::record(
                        id,
                        format!("entities[{n}].boxes[{t}]"),
                        format!("box {b:?} has x1 > x2 or y1 > y2"),
                    ));
                }
            }
            if let Some(v) = &e.visual_feature {
                if v.len() != self.frames {
                    return Err(Error::record(
                        id,
                        format!("entities[{n}].visual_feature"),
                        format!("{} rows for {} frames", v.len(), self.frames),
                    ));
                }
                let dim = v.first().map_or(0, Vec::len);
                if dim == 0
                    || v.iter()
                        .any(|r| r.len() != dim || r.iter().any(|x| !x.is_finite()))
                {
                    return Err(Error::record(
                        id,
                        format!("entities[{n}].visual_feature"),
                        "rows must be non-empty, equal-length and finite",
                    ));
                }
            }
            if e.is_human && e.affordance_label.is_some() {
                return Err(Error::record(
                    id,
                    format!("entities[{n}].affordance_label"),
                    "the human carries no affordance label",
                ));
            }
            if !e.is_human && e.affordance_label.is_none() {
                return Err(Error::record(
                    id,
                    format!("entities[{n}].affordance_label"),
                    "missing on an object",
                ));
            }
        }
        let expected = init_adjacency(&self.entities)
            .map_err(|e| Error::record(id, "entities", e.to_string()))?;
        if self.adjacency != expected {
            return Err(Error::record(
                id,
                "adjacency",
                "must be 1 exactly on human-object pairs",
            ));
        }
        Ok(())
    }

    /// Reorders entities by `order` (a permutation of `0..N`).
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let entities = order.iter().map(|&i| self.entities[i].clone()).collect();
        let mut s = VideoGraphSample::new(self.video_id.clone(), entities, self.subactivity_label)?;
        s.frames = self.frames;
        Ok(s)
    }

    /// Uniformly samples `frames` frames (with repetition when upsampling).
    pub fn resample_frames(&self, frames: usize) -> Self {
        if frames == self.frames || frames == 0 {
            return self.clone();
        }
        let idx: Vec<usize> = (0..frames)
            .map(|i| ((2 * i + 1) * self.frames) / (2 * frames))
            .collect();
        let mut out = self.clone();
        out.frames = frames;
        for e in &mut out.entities {
            e.boxes = idx.iter().map(|&t| e.boxes[t]).collect();
            if let Some(v) = &mut e.visual_feature {
                *v = idx.iter().map(|&t| v[t].clone()).collect();
            }
        }
        out
    }
}
