use serde::{Deserialize, Serialize};

use super::{train, TrainConfig, Variant};
use crate::augment::ViewMode;
use crate::dataset::Dataset;
use crate::error::Result;
use crate::evaluation::EvalResult;

/// Maps a row name to its variant and second-branch view. Besides the variant
/// names, `gray`, `jitter` and `plain` select the full variant with that view.
pub fn parse_row(name: &str) -> Result<(Variant, ViewMode)> {
    match name {
        "gray" | "grayscale" => Ok((Variant::Full, ViewMode::Grayscale)),
        "jitter" => Ok((Variant::Full, ViewMode::Jitter)),
        "plain" => Ok((Variant::Full, ViewMode::Plain)),
        other => Ok((other.parse()?, ViewMode::Grayscale)),
    }
}

/// Final-epoch metrics of one row on one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub row: String,
    pub seed: u64,
    pub eval: EvalResult,
    pub eval_second: EvalResult,
    pub best_map: f64,
    pub collapsed: bool,
}

/// Seed-averaged metrics of one row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub row: String,
    pub map: f64,
    pub cmc1: f64,
    pub cmc5: f64,
    pub cmc10: f64,
    pub map_second: f64,
    pub collapsed_runs: usize,
    pub runs: usize,
}

/// Trains every row on every seed. `dataset(seed)` supplies the data of a seed;
/// the config seed is set to the same value.
pub fn run_ablation(
    base: &TrainConfig,
    rows: &[String],
    seeds: &[u64],
    dataset: impl Fn(u64) -> Result<Dataset>,
) -> Result<Vec<AblationResult>> {
    let specs: Vec<(String, Variant, ViewMode)> = rows
        .iter()
        .map(|r| parse_row(r).map(|(v, m)| (r.clone(), v, m)))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(rows.len() * seeds.len());
    for &seed in seeds {
        let ds = dataset(seed)?;
        for (row, variant, view_mode) in &specs {
            let cfg = TrainConfig {
                variant: *variant,
                view_mode: *view_mode,
                seed,
                ..base.clone()
            };
            let st = train(&cfg, &ds)?;
            let last = st.history.last();
            out.push(AblationResult {
                row: row.clone(),
                seed,
                eval: last.map(|r| r.eval.clone()).unwrap_or_default(),
                eval_second: last.map(|r| r.eval_second.clone()).unwrap_or_default(),
                best_map: st.best_map,
                collapsed: st.collapse_detected(),
            });
        }
    }
    Ok(out)
}

/// Means over seeds, rows in first-appearance order.
pub fn summarize(results: &[AblationResult]) -> Vec<AblationSummary> {
    let mut rows: Vec<String> = Vec::new();
    for r in results {
        if !rows.contains(&r.row) {
            rows.push(r.row.clone());
        }
    }
    rows.into_iter()
        .map(|row| {
            let rs: Vec<&AblationResult> = results.iter().filter(|r| r.row == row).collect();
            let n = rs.len() as f64;
            let mean = |f: &dyn Fn(&AblationResult) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
            AblationSummary {
                map: mean(&|r| r.eval.map),
                cmc1: mean(&|r| r.eval.cmc1),
                cmc5: mean(&|r| r.eval.cmc5),
                cmc10: mean(&|r| r.eval.cmc10),
                map_second: mean(&|r| r.eval_second.map),
                collapsed_runs: rs.iter().filter(|r| r.collapsed).count(),
                runs: rs.len(),
                row,
            }
        })
        .collect()
}

pub fn ablation_csv(summaries: &[AblationSummary]) -> String {
    let mut out = String::from("row,mAP,cmc1,cmc5,cmc10\n");
    for s in summaries {
        out.push_str(&format!("{},{},{},{},{}\n", s.row, s.map, s.cmc1, s.cmc5, s.cmc10));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_names() {
        assert_eq!(parse_row("jitter").unwrap(), (Variant::Full, ViewMode::Jitter));
        assert_eq!(parse_row("wo_LC").unwrap(), (Variant::WoCluster, ViewMode::Grayscale));
        assert!(parse_row("nope").is_err());
    }

    #[test]
    fn summary_means_and_csv() {
        let res = |row: &str, map: f64| AblationResult {
            row: row.into(),
            seed: 0,
            eval: EvalResult {
                map,
                ..Default::default()
            },
            eval_second: EvalResult::default(),
            best_map: map,
            collapsed: false,
        };
        let s = summarize(&[res("full", 0.5), res("wo_LI", 0.2), res("full", 0.7)]);
        assert_eq!(s.len(), 2);
        assert!((s[0].map - 0.6).abs() < 1e-15);
        assert_eq!(s[0].runs, 2);
        let csv = ablation_csv(&s);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("row,mAP,cmc1,cmc5,cmc10\n"));
    }
}
