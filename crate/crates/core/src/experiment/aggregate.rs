//! Across-seed statistics.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::runner::{read_csv, write_csv, METRICS_CSV};
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;
use crate::mlp::{Layer, Regime};

pub const SUMMARY_CSV: &str = "summary.csv";
pub const SUMMARY_JSON: &str = "summary.json";

/// Metrics summarised per cell.
pub const METRIC_NAMES: [&str; 8] = [
    "pr",
    "pr_init",
    "pr_ratio",
    "kl",
    "kl_floor",
    "rr",
    "rr_inverse",
    "zero_row_fraction",
];

pub fn metric_value(r: &MetricsRecord, metric: &str) -> Option<f64> {
    match metric {
        "pr" => Some(r.pr),
        "pr_init" => Some(r.pr_init),
        "pr_ratio" => Some(r.pr_ratio),
        "kl" => Some(r.kl),
        "kl_floor" => r.kl_floor,
        "rr" => r.rr,
        "rr_inverse" => r.rr_inverse,
        "zero_row_fraction" => Some(r.zero_row_fraction),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellId {
    pub h: usize,
    pub regime: Regime,
    pub layer: Layer,
    pub k: usize,
    pub condition: String,
    pub epoch: usize,
    pub metric: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub h: usize,
    pub regime: Regime,
    pub layer: Layer,
    pub k: usize,
    pub condition: String,
    pub epoch: usize,
    pub metric: String,
    pub mean: f64,
    /// Population standard deviation over seeds.
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Contributing seeds, `;`-separated.
    pub seeds: String,
    /// Configured seeds without a value, `;`-separated.
    pub missing: String,
}

impl SummaryRow {
    pub fn id(&self) -> CellId {
        CellId {
            h: self.h,
            regime: self.regime,
            layer: self.layer,
            k: self.k,
            condition: self.condition.clone(),
            epoch: self.epoch,
            metric: self.metric.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregateSummary {
    pub rows: Vec<SummaryRow>,
}

fn join(seeds: &[u64]) -> String {
    seeds
        .iter()
        .map(u64::to_string)
        .collect::<Vec<_>>()
        .join(";")
}

/// Mean and population SD, summing in a fixed order.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Groups records by cell and summarises each metric over seeds. Seeds in
/// `expected_seeds` without a value are listed as missing, never imputed.
pub fn aggregate(records: &[MetricsRecord], expected_seeds: &[u64]) -> Result<AggregateSummary> {
    if records.is_empty() {
        return Err(Error::EmptyResults("no metric records to aggregate".into()));
    }
    let mut groups: BTreeMap<CellId, BTreeMap<u64, f64>> = BTreeMap::new();
    for r in records {
        for metric in METRIC_NAMES {
            let Some(v) = metric_value(r, metric) else {
                continue;
            };
            let id = CellId {
                h: r.h,
                regime: r.regime,
                layer: r.layer,
                k: r.k,
                condition: r.condition.clone(),
                epoch: r.epoch,
                metric: metric.to_string(),
            };
            if groups.entry(id).or_default().insert(r.seed, v).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate record for seed {} in cell h={} {} {} k={} {} epoch {}",
                    r.seed, r.h, r.regime, r.layer, r.k, r.condition, r.epoch
                )));
            }
        }
    }
    let rows = groups
        .into_iter()
        .map(|(id, by_seed)| {
            let seeds: Vec<u64> = by_seed.keys().copied().collect();
            let values: Vec<f64> = by_seed.values().copied().collect();
            let (mean, sd) = mean_sd(&values);
            let missing: Vec<u64> = expected_seeds
                .iter()
                .copied()
                .filter(|s| !by_seed.contains_key(s))
                .collect();
            SummaryRow {
                h: id.h,
                regime: id.regime,
                layer: id.layer,
                k: id.k,
                condition: id.condition,
                epoch: id.epoch,
                metric: id.metric,
                mean,
                sd,
                lower: mean - 2.0 * sd,
                upper: mean + 2.0 * sd,
                count: values.len(),
                seeds: join(&seeds),
                missing: join(&missing),
            }
        })
        .collect();
    Ok(AggregateSummary { rows })
}

/// Aggregates the merged `metrics.csv` of a result directory.
pub fn aggregate_dir(dir: &Path) -> Result<AggregateSummary> {
    let path = dir.join(METRICS_CSV);
    if !path.exists() {
        return Err(Error::EmptyResults(format!(
            "{} has no {METRICS_CSV}",
            dir.display()
        )));
    }
    let records: Vec<MetricsRecord> = read_csv(&path)?;
    let config_path = dir.join("config.toml");
    let expected = if config_path.exists() {
        ExperimentConfig::load(&config_path)?.seeds
    } else {
        Vec::new()
    };
    aggregate(&records, &expected)
}

impl AggregateSummary {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, id: &CellId) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.id() == *id)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, &self.rows)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Ok(AggregateSummary {
            rows: read_csv(path)?,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(self)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(seed: u64, pr_ratio: f64) -> MetricsRecord {
        MetricsRecord {
            h: 64,
            seed,
            regime: Regime::Standard,
            epoch: 30,
            layer: Layer::L1,
            k: 2,
            condition: "full".into(),
            pr: 0.01 * pr_ratio,
            pr_ratio,
            kl: 0.5,
            rr: None,
            zero_row_fraction: 0.0,
            pr_init: 0.01,
            rr_inverse: None,
            kl_floor: None,
            n_minors: 100,
            n_inputs: 5,
        }
    }

    fn id(metric: &str) -> CellId {
        CellId {
            h: 64,
            regime: Regime::Standard,
            layer: Layer::L1,
            k: 2,
            condition: "full".into(),
            epoch: 30,
            metric: metric.into(),
        }
    }

    #[test]
    fn one_seed_collapses_band() {
        let s = aggregate(&[record(0, 1.7)], &[0]).unwrap();
        let r = s.get(&id("pr_ratio")).unwrap();
        assert_eq!((r.mean, r.sd, r.lower, r.upper), (1.7, 0.0, 1.7, 1.7));
        assert_eq!(r.count, 1);
        assert!(s.get(&id("rr")).is_none());
    }

    #[test]
    fn two_seeds_hand_arithmetic() {
        let s = aggregate(&[record(0, 1.0), record(1, 3.0)], &[0, 1, 2]).unwrap();
        let r = s.get(&id("pr_ratio")).unwrap();
        assert_eq!((r.mean, r.sd, r.lower, r.upper), (2.0, 1.0, 0.0, 4.0));
        assert_eq!(r.seeds, "0;1");
        assert_eq!(r.missing, "2");
    }

    #[test]
    fn empty_and_duplicate_inputs_rejected() {
        assert!(matches!(aggregate(&[], &[]), Err(Error::EmptyResults(_))));
        assert!(aggregate(&[record(0, 1.0), record(0, 2.0)], &[0]).is_err());
    }

    #[test]
    fn csv_and_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = aggregate(
            &[
                record(0, 1.0 / 3.0),
                record(1, 2.0_f64.sqrt()),
                record(4, 1e-17),
            ],
            &[0, 1, 2, 3, 4],
        )
        .unwrap();
        let csv = dir.path().join("s.csv");
        s.write_csv(&csv).unwrap();
        assert_eq!(AggregateSummary::read_csv(&csv).unwrap(), s);
        let json = dir.path().join("s.json");
        s.write_json(&json).unwrap();
        assert_eq!(AggregateSummary::read_json(&json).unwrap(), s);
    }

    proptest! {
        #[test]
        fn permutation_invariant(values in prop::collection::vec(0.01f64..100.0, 1..6), rot in 0usize..6) {
            let records: Vec<MetricsRecord> =
                values.iter().enumerate().map(|(s, &v)| record(s as u64, v)).collect();
            let mut shuffled = records.clone();
            let n = shuffled.len();
            shuffled.rotate_left(rot % n);
            shuffled.reverse();
            let seeds: Vec<u64> = (0..n as u64).collect();
            prop_assert_eq!(aggregate(&records, &seeds).unwrap(), aggregate(&shuffled, &seeds).unwrap());
        }

        #[test]
        fn sd_non_negative_and_band_contains_mean(values in prop::collection::vec(-50f64..50.0, 1..8)) {
            let (mean, sd) = mean_sd(&values);
            prop_assert!(sd >= 0.0);
            let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(mean >= min - 1e-9 && mean <= max + 1e-9);
        }
    }
}
