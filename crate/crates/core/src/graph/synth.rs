//! Seeded synthetic interaction videos.
//!
//! Each video has one human and several objects. One object is "active": it
//! moves along a subactivity-specific direction, carries a subactivity-specific
//! appearance offset and the matching affordance. The remaining objects are
//! static distractors labeled with affordance 0. Only uniform draws from a
//! ChaCha stream are used, so output is bit-identical across platforms.

use std::f64::consts::FRAC_1_SQRT_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EntityTrack, VideoGraphSample};
use crate::error::{Error, Result};

/// Affordance class shared by every distractor.
pub const STATIC_AFFORDANCE: usize = 0;

const JITTER: f64 = 0.01;
const TRAVEL: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_videos: usize,
    pub frames: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub num_subactivities: usize,
    /// Includes the static class 0.
    pub num_affordances: usize,
    pub num_object_categories: usize,
    pub feature_dim: usize,
    /// Half-width of the uniform appearance noise.
    pub noise: f64,
    /// Multiplies every appearance descriptor after noise is added.
    pub feature_scale: f64,
    /// When set, only this many frames carry the subactivity signal and every
    /// other frame repeats the neutral first frame exactly.
    pub keyframes: Option<usize>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_videos: 20,
            frames: 8,
            min_objects: 2,
            max_objects: 3,
            num_subactivities: 3,
            num_affordances: 3,
            num_object_categories: 5,
            feature_dim: 16,
            noise: 0.1,
            feature_scale: 1.0,
            keyframes: None,
            seed: 7,
        }
    }
}

impl SynthConfig {
    /// Category ids span `0` (human) through `num_object_categories`.
    pub fn num_categories(&self) -> usize {
        self.num_object_categories + 1
    }

    /// Affordance of the active object in a video of subactivity `s`.
    pub fn active_affordance(&self, s: usize) -> usize {
        if self.num_affordances <= 1 {
            STATIC_AFFORDANCE
        } else {
            1 + s % (self.num_affordances - 1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_videos", self.num_videos),
            ("frames", self.frames),
            ("min_objects", self.min_objects),
            ("max_objects", self.max_objects),
            ("num_subactivities", self.num_subactivities),
            ("num_affordances", self.num_affordances),
            ("num_object_categories", self.num_object_categories),
            ("feature_dim", self.feature_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("synth: {name} must be at least 1")));
            }
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Config(format!(
                "synth: min_objects {} exceeds max_objects {}",
                self.min_objects, self.max_objects
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!(
                "synth: noise {} must be >= 0",
                self.noise
            )));
        }
        if !(self.feature_scale > 0.0 && self.feature_scale.is_finite()) {
            return Err(Error::Config(format!(
                "synth: feature_scale {} must be > 0",
                self.feature_scale
            )));
        }
        if let Some(k) = self.keyframes {
            if k == 0 || k >= self.frames {
                return Err(Error::Config(format!(
                    "synth: keyframes {k} must lie in 1..{}",
                    self.frames
                )));
            }
        }
        Ok(())
    }
}

/// Unit-ish motion direction for subactivity `s`.
fn direction(s: usize) -> (f64, f64) {
    const DIRS: [(f64, f64); 8] = [
        (1.0, 0.0),
        (0.0, 1.0),
        (-1.0, 0.0),
        (0.0, -1.0),
        (FRAC_1_SQRT_2, FRAC_1_SQRT_2),
        (-FRAC_1_SQRT_2, FRAC_1_SQRT_2),
        (-FRAC_1_SQRT_2, -FRAC_1_SQRT_2),
        (FRAC_1_SQRT_2, -FRAC_1_SQRT_2),
    ];
    let (dx, dy) = DIRS[s % 8];
    let scale = 0.5f64.powi((s / 8) as i32);
    (dx * scale, dy * scale)
}

fn uniform_vec(rng: &mut ChaCha8Rng, dim: usize, half: f64) -> Vec<f64> {
    (0..dim).map(|_| rng.gen_range(-half..=half)).collect()
}

fn make_box(cx: f64, cy: f64, w: f64, h: f64) -> [f64; 4] {
    let cx = cx.clamp(w / 2.0, 1.0 - w / 2.0);
    let cy = cy.clamp(h / 2.0, 1.0 - h / 2.0);
    [
        (cx - w / 2.0).max(0.0),
        (cy - h / 2.0).max(0.0),
        (cx + w / 2.0).min(1.0),
        (cy + h / 2.0).min(1.0),
    ]
}

/// Generates `config.num_videos` labeled videos; subactivities cycle so the
/// classes are balanced.
pub fn synth_generate(config: &SynthConfig) -> Result<Vec<VideoGraphSample>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dim = config.feature_dim;
    let prototypes: Vec<Vec<f64>> = (0..config.num_categories())
        .map(|_| uniform_vec(&mut rng, dim, 1.0))
        .collect();
    let class_offsets: Vec<Vec<f64>> = (0..config.num_subactivities)
        .map(|_| uniform_vec(&mut rng, dim, 1.0))
        .collect();
    let active_marker = uniform_vec(&mut rng, dim, 1.0);

    let frames = config.frames;
    let mut out = Vec::with_capacity(config.num_videos);
    for v in 0..config.num_videos {
        let s = v % config.num_subactivities;
        let objects = rng.gen_range(config.min_objects..=config.max_objects);
        let active = rng.gen_range(0..objects);
        let keyframes: Vec<bool> = match config.keyframes {
            None => vec![true; frames],
            Some(k) => {
                let mut flags = vec![false; frames];
                let mut placed = 0;
                while placed < k {
                    let t = rng.gen_range(1..frames);
                    if !flags[t] {
                        flags[t] = true;
                        placed += 1;
                    }
                }
                flags
            }
        };
        let redundant = config.keyframes.is_some();

        // human
        let (hx, hy) = (rng.gen_range(0.35..0.65), rng.gen_range(0.3..0.6));
        let (hw, hh) = (rng.gen_range(0.15..0.25), rng.gen_range(0.3..0.45));
        let human_offset = uniform_vec(&mut rng, dim, 0.3);
        let mut entities = Vec::with_capacity(objects + 1);
        let mut human_boxes: Vec<[f64; 4]> = Vec::with_capacity(frames);
        let mut human_feats: Vec<Vec<f64>> = Vec::with_capacity(frames);
        for t in 0..frames {
            let jitter = (
                rng.gen_range(-JITTER..JITTER),
                rng.gen_range(-JITTER..JITTER),
            );
            let noise = uniform_vec(&mut rng, dim, config.noise);
            if redundant && !keyframes[t] && t > 0 {
                human_boxes.push(human_boxes[0]);
                human_feats.push(human_feats[0].clone());
                continue;
            }
            human_boxes.push(make_box(hx + jitter.0, hy + jitter.1, hw, hh));
            human_feats.push(
                (0..dim)
                    .map(|d| (prototypes[0][d] + human_offset[d] + noise[d]) * config.feature_scale)
                    .collect::<Vec<f64>>(),
            );
        }
        entities.push(EntityTrack {
            node_id: 0,
            is_human: true,
            category_id: 0,
            boxes: human_boxes,
            visual_feature: Some(human_feats),
            affordance_label: None,
        });

        for o in 0..objects {
            let is_active = o == active;
            let category = rng.gen_range(1..=config.num_object_categories);
            let (w, h) = (rng.gen_range(0.05..0.12), rng.gen_range(0.05..0.12));
            let offset = uniform_vec(&mut rng, dim, 0.3);
            let (dx, dy) = if is_active {
                let (ux, uy) = direction(s);
                (ux * TRAVEL, uy * TRAVEL)
            } else {
                (0.0, 0.0)
            };
            let (mut sx, mut sy) = if is_active {
                (
                    hx + rng.gen_range(-0.15..0.15),
                    hy + rng.gen_range(-0.15..0.15),
                )
            } else {
                (rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95))
            };
            sx = sx.clamp(w / 2.0 - dx.min(0.0), 1.0 - w / 2.0 - dx.max(0.0));
            sy = sy.clamp(h / 2.0 - dy.min(0.0), 1.0 - h / 2.0 - dy.max(0.0));

            let mut boxes: Vec<[f64; 4]> = Vec::with_capacity(frames);
            let mut feats: Vec<Vec<f64>> = Vec::with_capacity(frames);
            for t in 0..frames {
                let jitter = (
                    rng.gen_range(-JITTER..JITTER),
                    rng.gen_range(-JITTER..JITTER),
                );
                let noise = uniform_vec(&mut rng, dim, config.noise);
                if redundant && !keyframes[t] && t > 0 {
                    boxes.push(boxes[0]);
                    feats.push(feats[0].clone());
                    continue;
                }
                let progress = if redundant {
                    if keyframes[t] {
                        1.0
                    } else {
                        0.0
                    }
                } else if frames > 1 {
                    t as f64 / (frames - 1) as f64
                } else {
                    0.0
                };
                boxes.push(make_box(
                    sx + dx * progress + jitter.0,
                    sy + dy * progress + jitter.1,
                    w,
                    h,
                ));
                let signal = is_active && keyframes[t] && !(redundant && t == 0);
                feats.push(
                    (0..dim)
                        .map(|d| {
                            let mut x = prototypes[category][d] + offset[d] + noise[d];
                            if is_active {
                                x += active_marker[d];
                            }
                            if signal {
                                x += class_offsets[s][d];
                            }
                            x * config.feature_scale
                        })
                        .collect(),
                );
            }
            entities.push(EntityTrack {
                node_id: (o + 1) as u32,
                is_human: false,
                category_id: category,
                boxes,
                visual_feature: Some(feats),
                affordance_label: Some(if is_active {
                    config.active_affordance(s)
                } else {
                    STATIC_AFFORDANCE
                }),
            });
        }
        out.push(VideoGraphSample::new(
            format!("synth-{:05}", v),
            entities,
            s,
        )?);
    }
    Ok(out)
}

/// Index of the active object (the one not labeled static) among the
/// entities, if the video has exactly one.
pub fn active_object(sample: &VideoGraphSample) -> Option<usize> {
    let mut found = sample
        .entities
        .iter()
        .enumerate()
        .filter(|(_, e)| !e.is_human && e.affordance_label != Some(STATIC_AFFORDANCE));
    let first = found.next().map(|(i, _)| i);
    if found.next().is_some() {
        None
    } else {
        first
    }
}
