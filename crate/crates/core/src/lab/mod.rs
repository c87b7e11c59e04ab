//! Experiment protocols and their reports.
//!
//! An [`ExperimentSpec`] (read from TOML) names the architecture family, the
//! sweep axes, the data and the search method. Protocol functions train the
//! networks they need, measure barriers and return an [`ExperimentReport`]
//! whose rows can each be reproduced from the seeds they record.

mod protocols;
mod sets;
mod spec;
mod theorem;

pub use protocols::{
    barrier_histograms, compare_s_sprime, depth_sweep, ensemble_eval, noisy_label_experiment,
    run_experiment, sa_scaling_study, width_sweep, EnsembleMethod,
};
pub use sets::{build_member_net, member_seed, model_set, real_world_set, train_member, Member};
pub use spec::{
    DatasetSource, DatasetSpec, ExperimentKind, ExperimentSpec, PairSelection, SearchMethod,
    Theorem1Spec, TrainOverrides,
};
pub use theorem::{theorem1_check, theorem1_deviation, XiRule};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::barrier::Metric;
use crate::data::Split;
use crate::{Error, Result};

/// One barrier measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub arch: String,
    pub width: usize,
    pub depth: usize,
    pub dataset: String,
    /// Which population the pair comes from (`S`, `S'`, ...).
    pub set: String,
    pub seed_a: u64,
    pub seed_b: u64,
    pub phase: String,
    pub metric: Metric,
    pub split: Split,
    pub barrier: f64,
}

/// Train and test figures of one trained network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndpointRow {
    pub arch: String,
    pub width: usize,
    pub depth: usize,
    pub dataset: String,
    pub seed: u64,
    pub epochs: usize,
    pub train_loss: f64,
    pub train_error: f64,
    pub test_loss: f64,
    pub test_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub arch: String,
    pub width: usize,
    pub depth: usize,
    pub dataset: String,
    pub set: String,
    pub phase: String,
    pub metric: Metric,
    pub split: Split,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
}

/// A point of a named curve (barrier against steps, deviation against
/// width, histogram counts, ...).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub series: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub kind: String,
    pub rows: Vec<ReportRow>,
    pub endpoints: Vec<EndpointRow>,
    pub aggregates: Vec<Aggregate>,
    pub series: Vec<SeriesPoint>,
    pub summary: BTreeMap<String, f64>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

fn csv_string<T: Serialize>(items: &[T], header: &[&str]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    let fail = |e: csv::Error| Error::Format {
        what: "csv",
        detail: e.to_string(),
    };
    w.write_record(header).map_err(fail)?;
    for item in items {
        w.serialize(item).map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format {
        what: "csv",
        detail: e.to_string(),
    })?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub const ROW_COLUMNS: [&str; 11] = [
    "arch", "width", "depth", "dataset", "set", "seed_a", "seed_b", "phase", "metric", "split",
    "barrier",
];
const ENDPOINT_COLUMNS: [&str; 10] = [
    "arch",
    "width",
    "depth",
    "dataset",
    "seed",
    "epochs",
    "train_loss",
    "train_error",
    "test_loss",
    "test_error",
];
const AGGREGATE_COLUMNS: [&str; 11] = [
    "arch", "width", "depth", "dataset", "set", "phase", "metric", "split", "count", "mean", "std",
];

impl ExperimentReport {
    pub fn new(kind: &str) -> Self {
        ExperimentReport {
            kind: kind.to_string(),
            ..Default::default()
        }
    }

    pub fn push_series(&mut self, series: &str, x: f64, y: f64) {
        self.series.push(SeriesPoint {
            series: series.to_string(),
            x,
            y,
        });
    }

    pub fn series(&self, name: &str) -> Vec<(f64, f64)> {
        self.series
            .iter()
            .filter(|p| p.series == name)
            .map(|p| (p.x, p.y))
            .collect()
    }

    /// Rows matching the given set, phase, metric and split.
    pub fn select(&self, set: &str, phase: &str, metric: Metric, split: Split) -> Vec<&ReportRow> {
        self.rows
            .iter()
            .filter(|r| r.set == set && r.phase == phase && r.metric == metric && r.split == split)
            .collect()
    }

    /// Recompute mean and sample standard deviation per configuration, in
    /// order of first appearance.
    pub fn aggregate(&mut self) {
        let mut groups: Vec<(Aggregate, Vec<f64>)> = Vec::new();
        for r in &self.rows {
            let key = Aggregate {
                arch: r.arch.clone(),
                width: r.width,
                depth: r.depth,
                dataset: r.dataset.clone(),
                set: r.set.clone(),
                phase: r.phase.clone(),
                metric: r.metric,
                split: r.split,
                count: 0,
                mean: 0.0,
                std: 0.0,
            };
            match groups.iter_mut().find(|(g, _)| *g == key) {
                Some((_, v)) => v.push(r.barrier),
                None => groups.push((key, vec![r.barrier])),
            }
        }
        self.aggregates = groups
            .into_iter()
            .map(|(mut g, v)| {
                let (mean, std) = mean_std(&v);
                g.count = v.len();
                g.mean = mean;
                g.std = std;
                g
            })
            .collect();
    }

    pub fn rows_csv(&self) -> Result<String> {
        csv_string(&self.rows, &ROW_COLUMNS)
    }

    pub fn endpoints_csv(&self) -> Result<String> {
        csv_string(&self.endpoints, &ENDPOINT_COLUMNS)
    }

    pub fn aggregates_csv(&self) -> Result<String> {
        csv_string(&self.aggregates, &AGGREGATE_COLUMNS)
    }

    pub fn series_csv(&self) -> Result<String> {
        csv_string(&self.series, &["series", "x", "y"])
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    /// Write `<stem>_rows.csv`, `<stem>_endpoints.csv`,
    /// `<stem>_aggregates.csv`, `<stem>_series.csv` and `<stem>.json` into
    /// `dir`, returning the paths.
    pub fn write_to(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            (format!("{stem}_rows.csv"), self.rows_csv()?),
            (format!("{stem}_endpoints.csv"), self.endpoints_csv()?),
            (format!("{stem}_aggregates.csv"), self.aggregates_csv()?),
            (format!("{stem}_series.csv"), self.series_csv()?),
            (format!("{stem}.json"), self.to_json()),
        ];
        let mut paths = Vec::with_capacity(files.len());
        for (name, body) in files {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
            paths.push(p);
        }
        Ok(paths)
    }
}
