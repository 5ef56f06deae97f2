//! JSON-lines dataset files: one [`VideoGraphSample`] record per line.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::VideoGraphSample;
use crate::error::{Error, Result};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Field named in a serde message such as "missing field `x`".
fn field_from_message(msg: &str) -> String {
    msg.split('`').nth(1).unwrap_or("record").to_string()
}

/// Parses and validates one record line.
pub fn parse_record(line: &str, line_no: usize) -> Result<VideoGraphSample> {
    let value: serde_json::Value = serde_json::from_str(line)
        .map_err(|e| Error::record(&format!("<line {line_no}>"), "record", e.to_string()))?;
    let video_id = value
        .get("video_id")
        .and_then(|v| v.as_str())
        .map(str::to_string)
        .unwrap_or_else(|| format!("<line {line_no}>"));
    let mut sample: VideoGraphSample = serde_json::from_value(value).map_err(|e| {
        let msg = e.to_string();
        Error::record(&video_id, field_from_message(&msg), msg)
    })?;
    sample.validate_or_fill()?;
    Ok(sample)
}

pub fn save_dataset(samples: &[VideoGraphSample], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        let line = serde_json::to_string(s).expect("samples serialize");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<VideoGraphSample>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record(&line, i + 1)?);
    }
    Ok(out)
}

/// Loads a dataset and uniformly resamples every video to `frames` frames.
pub fn load_dataset_with_frames(path: &Path, frames: usize) -> Result<Vec<VideoGraphSample>> {
    Ok(load_dataset(path)?
        .into_iter()
        .map(|s| s.resample_frames(frames))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{synth_generate, SynthConfig};

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        let data = synth_generate(&SynthConfig::default()).unwrap();
        save_dataset(&data, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back, data);
        for (a, b) in data.iter().zip(&back) {
            for (ea, eb) in a.entities.iter().zip(&b.entities) {
                let fa = ea.visual_feature.as_ref().unwrap().concat();
                let fb = eb.visual_feature.as_ref().unwrap().concat();
                assert!(fa.iter().zip(&fb).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    fn first_line() -> serde_json::Value {
        let data = synth_generate(&SynthConfig {
            num_videos: 1,
            ..Default::default()
        })
        .unwrap();
        serde_json::to_value(&data[0]).unwrap()
    }

    #[test]
    fn missing_label_names_video_and_field() {
        let mut v = first_line();
        v.as_object_mut().unwrap().remove("subactivity_label");
        let err = parse_record(&v.to_string(), 1).unwrap_err();
        match err {
            Error::Record {
                video_id, field, ..
            } => {
                assert_eq!(video_id, "synth-00000");
                assert_eq!(field, "subactivity_label");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn out_of_range_box_is_rejected() {
        let mut v = first_line();
        v["entities"][1]["boxes"][0][2] = serde_json::json!(1.5);
        let err = parse_record(&v.to_string(), 1).unwrap_err().to_string();
        assert!(
            err.contains("synth-00000") && err.contains("entities[1].boxes[0]"),
            "{err}"
        );
    }

    #[test]
    fn missing_adjacency_is_derived() {
        let mut v = first_line();
        v.as_object_mut().unwrap().remove("adjacency");
        let s = parse_record(&v.to_string(), 1).unwrap();
        assert_eq!(s.adjacency[0][1], 1);
    }

    #[test]
    fn wrong_adjacency_is_rejected() {
        let mut v = first_line();
        v["adjacency"][1][2] = serde_json::json!(1);
        let err = parse_record(&v.to_string(), 1).unwrap_err().to_string();
        assert!(err.contains("adjacency"), "{err}");
    }
}
