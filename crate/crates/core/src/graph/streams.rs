use crate::error::{Error, Result};
use crate::numerics::ParamStore;
use crate::numerics::{Tape, Tensor, Var};

use super::{VideoGraphSample, BOX_DIM};

/// Category embedding table, `[num_categories, visual_dim]`.
pub const EMBED_PARAM: &str = "graph.embed";
const VISUAL_W: &str = "graph.visual.w";
const VISUAL_B: &str = "graph.visual.b";
const SEMANTIC_W: &str = "graph.semantic.w";
const SEMANTIC_B: &str = "graph.semantic.b";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamDims {
    pub num_categories: usize,
    /// Appearance descriptor width (also the category embedding width).
    pub visual_dim: usize,
    /// Node feature width `D` of both streams.
    pub node_dim: usize,
}

impl StreamDims {
    /// `(name, shape, is_bias)` for every parameter this stage reads.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>, bool)> {
        let input = self.visual_dim + BOX_DIM;
        vec![
            (
                EMBED_PARAM.into(),
                vec![self.num_categories, self.visual_dim],
                false,
            ),
            (VISUAL_W.into(), vec![input, self.node_dim], false),
            (VISUAL_B.into(), vec![self.node_dim], true),
            (SEMANTIC_W.into(), vec![input, self.node_dim], false),
            (SEMANTIC_B.into(), vec![self.node_dim], true),
        ]
    }
}

/// Both node-feature streams, each `[N, T, D]` (node-major).
#[derive(Clone, Copy, Debug)]
pub struct StreamFeatures {
    pub visual: Var,
    pub semantic: Var,
}

/// Visual stream: projection of `descriptor ⊕ box`; semantic stream:
/// projection of `category embedding ⊕ box`. Entities without a descriptor
/// use their category embedding in the visual stream.
pub fn build_streams(
    tape: &mut Tape,
    sample: &VideoGraphSample,
    store: &ParamStore,
    dims: &StreamDims,
) -> Result<StreamFeatures> {
    let frames = sample.frames;
    let n = sample.num_nodes();
    let id = sample.video_id.as_str();

    let mut embed_rows = Vec::with_capacity(n * frames);
    let mut box_data = Vec::with_capacity(n * frames * BOX_DIM);
    let mut descriptor_data = Vec::new();
    let mut visual_rows = Vec::with_capacity(n * frames);
    let mut next_descriptor = dims.num_categories;
    for (k, e) in sample.entities.iter().enumerate() {
        if e.category_id >= dims.num_categories {
            return Err(Error::record(
                id,
                format!("entities[{k}].category_id"),
                format!(
                    "unknown category {} (have {})",
                    e.category_id, dims.num_categories
                ),
            ));
        }
        if e.boxes.len() != frames {
            return Err(Error::record(
                id,
                format!("entities[{k}].boxes"),
                format!("{} boxes for {frames} frames", e.boxes.len()),
            ));
        }
        for t in 0..frames {
            embed_rows.push(e.category_id);
            box_data.extend_from_slice(&e.boxes[t]);
            match &e.visual_feature {
                Some(v) => {
                    if v.len() != frames || v[t].len() != dims.visual_dim {
                        return Err(Error::record(
                            id,
                            format!("entities[{k}].visual_feature"),
                            format!("expected {frames} rows of width {}", dims.visual_dim),
                        ));
                    }
                    descriptor_data.extend_from_slice(&v[t]);
                    visual_rows.push(next_descriptor);
                    next_descriptor += 1;
                }
                None => visual_rows.push(e.category_id),
            }
        }
    }

    let embed = tape.param(store, EMBED_PARAM)?;
    let boxes = tape.constant(Tensor::new(vec![n * frames, BOX_DIM], box_data)?);
    let sem_embed = tape.gather_rows(embed, &embed_rows)?;
    let visual_table = if descriptor_data.is_empty() {
        embed
    } else {
        let rows = descriptor_data.len() / dims.visual_dim;
        let desc = tape.constant(Tensor::new(vec![rows, dims.visual_dim], descriptor_data)?);
        tape.concat(&[embed, desc], 0)?
    };
    let vis_in = tape.gather_rows(visual_table, &visual_rows)?;

    let project = |tape: &mut Tape, input: Var, w: &str, b: &str| -> Result<Var> {
        let with_box = tape.concat(&[input, boxes], 1)?;
        let w = tape.param(store, w)?;
        let b = tape.param(store, b)?;
        let y = tape.linear(with_box, w, Some(b))?;
        Ok(tape.reshape(y, &[n, frames, dims.node_dim])?)
    };
    let visual = project(tape, vis_in, VISUAL_W, VISUAL_B)?;
    let semantic = project(tape, sem_embed, SEMANTIC_W, SEMANTIC_B)?;
    Ok(StreamFeatures { visual, semantic })
}
