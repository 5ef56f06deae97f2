//! Grid sweeps over configuration switches. Every row trains with the same
//! seed list on the same data and reports final training-set scores.

use std::fmt::Write as _;
use std::fs;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use spdtp_core::train::{train, TrainConfig};
use spdtp_core::Error;

use crate::commands::{data_path, load_data, model_config, usage};
use crate::AblateArgs;

/// Final scores of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    /// `None` when the run diverged.
    pub final_loss: Option<f64>,
    pub subactivity_accuracy: Option<f64>,
    pub affordance_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `(key, value)` in grid order.
    pub settings: Vec<(String, String)>,
    pub runs: Vec<RunResult>,
    /// Means over all seeds; `None` if any run diverged.
    pub mean_final_loss: Option<f64>,
    pub mean_subactivity_accuracy: Option<f64>,
    pub mean_affordance_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub data: String,
    pub base_config: TrainConfig,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

/// `key=v1,v2;key2=a,b` → lists in order.
pub fn parse_grid(text: &str) -> Result<Vec<(String, Vec<String>)>> {
    let mut out: Vec<(String, Vec<String>)> = Vec::new();
    for part in text.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, vs) = part
            .split_once('=')
            .ok_or_else(|| usage(format!("--grid entry `{part}` is not key=v1,v2")))?;
        let k = k.trim().to_string();
        let vs: Vec<String> = vs
            .split(',')
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty())
            .collect();
        if vs.is_empty() {
            return Err(usage(format!("--grid key `{k}` has no values")));
        }
        if out.iter().any(|(o, _)| *o == k) {
            return Err(usage(format!("--grid key `{k}` appears twice")));
        }
        out.push((k, vs));
    }
    if out.is_empty() {
        return Err(usage("--grid is empty"));
    }
    Ok(out)
}

/// `0,2,5` or `0-4`.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let bad = || {
        usage(format!(
            "--seeds `{text}` is not a list or range of integers"
        ))
    };
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (
                    a.trim().parse().map_err(|_| bad())?,
                    b.trim().parse().map_err(|_| bad())?,
                );
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

/// Cartesian product, last key varying fastest.
pub fn combinations(grid: &[(String, Vec<String>)]) -> Vec<Vec<(String, String)>> {
    let mut rows = vec![Vec::new()];
    for (k, vs) in grid {
        rows = rows
            .into_iter()
            .flat_map(|row| {
                vs.iter().map(move |v| {
                    let mut r = row.clone();
                    r.push((k.clone(), v.clone()));
                    r
                })
            })
            .collect();
    }
    rows
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let keys: Vec<&str> = self
            .rows
            .first()
            .map(|r| r.settings.iter().map(|(k, _)| k.as_str()).collect())
            .unwrap_or_default();
        let opt = |v: Option<f64>| {
            v.map(|x| x.to_string())
                .unwrap_or_else(|| "diverged".into())
        };
        let mut s = keys.join(",");
        s.push_str(",seeds,final_losses,mean_final_loss,mean_subactivity_accuracy,mean_affordance_accuracy\n");
        for row in &self.rows {
            for (_, v) in &row.settings {
                let _ = write!(s, "{v},");
            }
            let seeds: Vec<String> = row.runs.iter().map(|r| r.seed.to_string()).collect();
            let losses: Vec<String> = row.runs.iter().map(|r| opt(r.final_loss)).collect();
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                seeds.join(" "),
                losses.join(" "),
                opt(row.mean_final_loss),
                opt(row.mean_subactivity_accuracy),
                opt(row.mean_affordance_accuracy)
            );
        }
        s
    }
}

pub fn run(args: AblateArgs) -> Result<()> {
    let base = model_config(&args.model)?;
    let grid = parse_grid(&args.grid)?;
    let seeds = parse_seeds(&args.seeds)?;
    let mut configs = Vec::new();
    for settings in combinations(&grid) {
        let mut cfg = base.clone();
        let pairs: Vec<String> = settings.iter().map(|(k, v)| format!("{k}={v}")).collect();
        cfg.apply_overrides(&pairs)?;
        configs.push((settings, cfg));
    }
    let path = data_path(args.data)?;
    let data = load_data(&path, base.frames)?;
    if configs.iter().any(|(_, c)| c.frames != base.frames) {
        return Err(usage("--grid cannot vary `frames`"));
    }

    let mut rows = Vec::with_capacity(configs.len());
    for (settings, cfg) in configs {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in &seeds {
            let cfg = TrainConfig {
                seed,
                ..cfg.clone()
            };
            let run = match train(&cfg, &data, None) {
                Ok(out) => {
                    let last = out.log.last().expect("at least one epoch").train.clone();
                    RunResult {
                        seed,
                        final_loss: Some(last.loss),
                        subactivity_accuracy: Some(last.subactivity_accuracy),
                        affordance_accuracy: Some(last.affordance_accuracy),
                    }
                }
                Err(e @ Error::Diverged { .. }) => {
                    eprintln!("{settings:?} seed {seed}: {e}");
                    RunResult {
                        seed,
                        final_loss: None,
                        subactivity_accuracy: None,
                        affordance_accuracy: None,
                    }
                }
                Err(e) => return Err(e.into()),
            };
            if !args.quiet {
                eprintln!("{settings:?} seed {seed}: final loss {:?}", run.final_loss);
            }
            runs.push(run);
        }
        rows.push(AblationRow {
            mean_final_loss: mean(runs.iter().map(|r| r.final_loss)),
            mean_subactivity_accuracy: mean(runs.iter().map(|r| r.subactivity_accuracy)),
            mean_affordance_accuracy: mean(runs.iter().map(|r| r.affordance_accuracy)),
            settings,
            runs,
        });
    }
    let report = AblationReport {
        data: path.display().to_string(),
        base_config: base,
        seeds,
        rows,
    };
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let json = args.out.join("ablation.json");
    fs::write(&json, serde_json::to_string_pretty(&report)? + "\n")
        .with_context(|| format!("writing {}", json.display()))?;
    let csv = args.out.join("ablation.csv");
    fs::write(&csv, report.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    print!("{}", report.to_csv());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_a_cartesian_product() {
        let g = parse_grid("pooling=DTP,AvgP,MaxP").unwrap();
        assert_eq!(combinations(&g).len(), 3);
        let g = parse_grid("pooling=DTP,AvgP; temporal_enhancement=on,off").unwrap();
        let c = combinations(&g);
        assert_eq!(c.len(), 4);
        assert_eq!(
            c[1],
            vec![
                ("pooling".into(), "DTP".into()),
                ("temporal_enhancement".into(), "off".into())
            ]
        );
        assert!(parse_grid("pooling").is_err());
        assert!(parse_grid("pooling=").is_err());
        assert!(parse_grid("a=1;a=2").is_err());
    }

    #[test]
    fn seed_lists_and_ranges() {
        assert_eq!(parse_seeds("0-4").unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(parse_seeds("3, 1").unwrap(), vec![3, 1]);
        assert!(parse_seeds("4-1").is_err());
        assert!(parse_seeds("x").is_err());
    }

    #[test]
    fn mean_is_none_when_a_run_diverged() {
        assert_eq!(mean([Some(1.0), Some(3.0)].into_iter()), Some(2.0));
        assert_eq!(mean([Some(1.0), None].into_iter()), None);
    }
}
