use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::barrier::Metric;
use crate::data::{self, Dataset, Split};
use crate::net::{ArchKind, LrSchedule, TrainConfig};
use crate::search::{SAConfig, DEFAULT_WIDTH_LIMIT};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    #[default]
    Compare,
    WidthSweep,
    DepthSweep,
    NoisyLabels,
    SaScaling,
    Histograms,
    Theorem1,
    Ensemble,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchMethod {
    #[default]
    None,
    Sa,
    SaReduced,
    Fd,
    Grid,
    Brute,
}

impl std::fmt::Display for SearchMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SearchMethod::None => "none",
            SearchMethod::Sa => "sa",
            SearchMethod::SaReduced => "sa-reduced",
            SearchMethod::Fd => "fd",
            SearchMethod::Grid => "grid",
            SearchMethod::Brute => "brute",
        })
    }
}

impl std::str::FromStr for SearchMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => SearchMethod::None,
            "sa" => SearchMethod::Sa,
            "sa-reduced" => SearchMethod::SaReduced,
            "fd" => SearchMethod::Fd,
            "grid" => SearchMethod::Grid,
            "brute" => SearchMethod::Brute,
            _ => return Err(Error::InvalidArgument(format!("unknown search method {s:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Directory with the four IDX files.
    Mnist { path: PathBuf },
    /// Directory with `data_batch_{1..5}.bin` and `test_batch.bin`.
    Cifar10 { path: PathBuf },
    Blobs {
        n: usize,
        d: usize,
        classes: usize,
        separation: f64,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(flatten)]
    pub source: DatasetSource,
    /// Stratified subsample sizes; absent keeps the full split.
    #[serde(default)]
    pub train: Option<usize>,
    #[serde(default)]
    pub test: Option<usize>,
    #[serde(default = "yes")]
    pub normalize: bool,
    /// Seed of the subsample draw.
    #[serde(default)]
    pub subsample_seed: u64,
}

fn yes() -> bool {
    true
}

impl DatasetSpec {
    pub fn blobs(n: usize, d: usize, classes: usize, separation: f64, seed: u64) -> Self {
        DatasetSpec {
            source: DatasetSource::Blobs {
                n,
                d,
                classes,
                separation,
                seed,
            },
            train: None,
            test: None,
            normalize: false,
            subsample_seed: 0,
        }
    }

    pub fn mnist(path: impl Into<PathBuf>, train: Option<usize>, test: Option<usize>) -> Self {
        DatasetSpec {
            source: DatasetSource::Mnist { path: path.into() },
            train,
            test,
            normalize: true,
            subsample_seed: 0,
        }
    }

    /// Whether the MNIST-like training defaults apply.
    pub fn mnist_like(&self) -> bool {
        !matches!(self.source, DatasetSource::Cifar10 { .. })
    }

    /// Load, subsample and normalise. Relative paths are taken from `base`.
    pub fn load(&self, base: Option<&Path>) -> Result<Dataset> {
        let resolve = |p: &Path| match base {
            Some(b) if p.is_relative() => b.join(p),
            _ => p.to_path_buf(),
        };
        let mut ds = match &self.source {
            DatasetSource::Mnist { path } => data::load_mnist_dir(&resolve(path))?,
            DatasetSource::Cifar10 { path } => {
                let dir = resolve(path);
                let train: Vec<PathBuf> = (1..=5)
                    .map(|k| dir.join(format!("data_batch_{k}.bin")))
                    .collect();
                let test = [dir.join("test_batch.bin")];
                let train_refs: Vec<&Path> = train.iter().map(PathBuf::as_path).collect();
                let test_refs: Vec<&Path> = test.iter().map(PathBuf::as_path).collect();
                data::load_cifar10(&train_refs, &test_refs)?
            }
            DatasetSource::Blobs {
                n,
                d,
                classes,
                separation,
                seed,
            } => data::synth_blobs(*n, *d, *classes, *separation, *seed)?,
        };
        if self.train.is_some() || self.test.is_some() {
            let n_train = self.train.unwrap_or(ds.train.len());
            let n_test = self.test.unwrap_or(ds.test.len());
            ds = data::subsample(&ds, n_train, n_test, self.subsample_seed)?;
        }
        if self.normalize {
            ds = data::normalize(&ds);
        }
        Ok(ds)
    }

    /// Short label used in report rows.
    pub fn label(&self) -> String {
        let base = match &self.source {
            DatasetSource::Mnist { .. } => "mnist".to_string(),
            DatasetSource::Cifar10 { .. } => "cifar10".to_string(),
            DatasetSource::Blobs { d, classes, .. } => format!("blobs-d{d}-c{classes}"),
        };
        match (self.train, self.test) {
            (None, None) => base,
            (tr, te) => format!(
                "{base}-{}-{}",
                tr.map_or("all".into(), |v| v.to_string()),
                te.map_or("all".into(), |v| v.to_string())
            ),
        }
    }
}

/// Optional replacements for the per-architecture training defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    pub lr: Option<f64>,
    pub lr_schedule: Option<LrSchedule>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub momentum: Option<f64>,
    pub stop_loss: Option<f64>,
}

impl TrainOverrides {
    pub fn apply(&self, mut cfg: TrainConfig) -> TrainConfig {
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.lr_schedule {
            cfg.lr_schedule = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.max_epochs {
            cfg.max_epochs = v;
        }
        if let Some(v) = self.momentum {
            cfg.momentum = v;
        }
        if let Some(v) = self.stop_loss {
            cfg.stop_loss = v;
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Theorem1Spec {
    pub d: usize,
    pub h_list: Vec<usize>,
    pub trials: usize,
    pub probes: usize,
    /// Fixed grid spacing; absent selects the population rule.
    pub xi: Option<f64>,
    /// Use the bound-balancing spacing when no fixed `xi` is given.
    pub proof_rate: bool,
}

impl Default for Theorem1Spec {
    fn default() -> Self {
        Theorem1Spec {
            d: 2,
            h_list: vec![1 << 6, 1 << 8, 1 << 10, 1 << 12, 1 << 14],
            trials: 10,
            probes: 100,
            xi: None,
            proof_rate: false,
        }
    }
}

/// Which pairs of a set are measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairSelection {
    /// Every unordered pair.
    #[default]
    All,
    /// Disjoint pairs `(0, 1), (2, 3), ...`.
    Disjoint,
}

impl PairSelection {
    pub fn pairs(self, n: usize) -> Vec<(usize, usize)> {
        match self {
            PairSelection::All => (0..n)
                .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
                .collect(),
            PairSelection::Disjoint => (0..n / 2).map(|k| (2 * k, 2 * k + 1)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default)]
    pub kind: ExperimentKind,
    #[serde(default = "default_arch")]
    pub arch: ArchKind,
    pub widths: Vec<usize>,
    #[serde(default = "default_depths")]
    pub depths: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub n_seeds: usize,
    #[serde(default)]
    pub pairs: PairSelection,
    #[serde(default)]
    pub search: SearchMethod,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<Metric>,
    #[serde(default = "default_splits")]
    pub splits: Vec<Split>,
    #[serde(default)]
    pub master_seed: u64,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub train: TrainOverrides,
    /// Annealing settings for the `sa` and `sa-reduced` methods.
    #[serde(default)]
    pub sa: SAConfig,
    #[serde(default = "default_limit")]
    pub brute_width_limit: usize,
    /// Label-noise fractions for the noisy-label protocol.
    #[serde(default)]
    pub fractions: Vec<f64>,
    /// Step budgets for the annealing scaling study.
    #[serde(default = "default_steps")]
    pub sa_steps: Vec<usize>,
    /// Set size for the histogram protocol.
    #[serde(default = "default_nets")]
    pub n_nets: usize,
    /// Histogram protocol: pair disjoint halves of the set instead of all
    /// pairs.
    #[serde(default)]
    pub iid: bool,
    #[serde(default)]
    pub theorem1: Theorem1Spec,
}

fn default_arch() -> ArchKind {
    ArchKind::Mlp
}
fn default_depths() -> Vec<usize> {
    vec![1]
}
fn default_seeds() -> usize {
    10
}
fn default_metrics() -> Vec<Metric> {
    vec![Metric::Loss, Metric::Error]
}
fn default_splits() -> Vec<Split> {
    vec![Split::Train, Split::Test]
}
fn default_limit() -> usize {
    DEFAULT_WIDTH_LIMIT
}
fn default_steps() -> Vec<usize> {
    vec![10, 100, 1_000, 10_000]
}
fn default_nets() -> usize {
    10
}

impl ExperimentSpec {
    /// A spec with the defaults for everything but the widths and data.
    pub fn new(widths: Vec<usize>, dataset: DatasetSpec) -> Self {
        ExperimentSpec {
            kind: ExperimentKind::default(),
            arch: default_arch(),
            widths,
            depths: default_depths(),
            n_seeds: default_seeds(),
            pairs: PairSelection::default(),
            search: SearchMethod::default(),
            metrics: default_metrics(),
            splits: default_splits(),
            master_seed: 0,
            dataset,
            train: TrainOverrides::default(),
            sa: SAConfig::default(),
            brute_width_limit: default_limit(),
            fractions: Vec::new(),
            sa_steps: default_steps(),
            n_nets: default_nets(),
            iid: false,
            theorem1: Theorem1Spec::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ExperimentSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad("widths must be a non-empty list of positive integers");
        }
        if self.depths.is_empty() || self.depths.contains(&0) {
            return bad("depths must be a non-empty list of positive integers");
        }
        if self.metrics.is_empty() || self.splits.is_empty() {
            return bad("metrics and splits must be non-empty");
        }
        let needs_pairs = !matches!(self.kind, ExperimentKind::Theorem1);
        if needs_pairs && self.n_seeds < 2 {
            return bad("n_seeds must be >= 2 for barrier experiments");
        }
        if self.fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return bad("label-noise fractions must lie in [0, 1]");
        }
        if self.sa_steps.windows(2).any(|w| w[0] > w[1]) {
            return bad("sa_steps must be ascending");
        }
        if matches!(self.kind, ExperimentKind::Histograms) && self.n_nets < 3 {
            return bad("n_nets must be >= 3");
        }
        if matches!(self.kind, ExperimentKind::Theorem1) {
            let t = &self.theorem1;
            if t.trials < 5 || t.d == 0 || t.probes == 0 || t.h_list.is_empty() {
                return bad("theorem1 needs d >= 1, trials >= 5, probes >= 1 and a non-empty h_list");
            }
            if t.h_list.windows(2).any(|w| w[0] >= w[1]) {
                return bad("theorem1 h_list must be strictly ascending");
            }
        }
        Ok(())
    }

    /// Per-architecture defaults with the spec's overrides applied.
    pub fn train_config(&self) -> TrainConfig {
        self.train
            .apply(TrainConfig::for_arch(self.arch, self.dataset.mnist_like()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_minimal_toml() {
        let spec = ExperimentSpec::from_toml(
            r#"
            widths = [16, 256]
            [dataset]
            kind = "mnist"
            path = "data/mnist5k"
            train = 1000
            "#,
        )
        .unwrap();
        assert_eq!(spec.n_seeds, 10);
        assert_eq!(spec.depths, vec![1]);
        assert_eq!(spec.dataset.train, Some(1000));
        assert!(spec.dataset.normalize);
        assert_eq!(spec.sa.t_max, 25_000.0);
        assert_eq!(spec.train_config().lr, 0.01);
    }

    #[test]
    fn round_trip_and_overrides() {
        let mut spec = ExperimentSpec::new(vec![4], DatasetSpec::blobs(100, 2, 2, 3.0, 1));
        spec.kind = ExperimentKind::NoisyLabels;
        spec.fractions = vec![0.0, 0.25];
        spec.train.max_epochs = Some(7);
        spec.train.stop_loss = Some(f64::INFINITY);
        let text = spec.to_toml().unwrap();
        let back = ExperimentSpec::from_toml(&text).unwrap();
        assert_eq!(back, spec);
        let cfg = back.train_config();
        assert_eq!(cfg.max_epochs, 7);
        assert!(cfg.stop_loss.is_infinite());
    }

    #[test]
    fn rejects_bad_specs() {
        let base = ExperimentSpec::new(vec![4], DatasetSpec::blobs(100, 2, 2, 3.0, 1));
        let mut s = base.clone();
        s.widths.clear();
        assert!(s.validate().is_err());
        let mut s = base.clone();
        s.n_seeds = 1;
        assert!(s.validate().is_err());
        let mut s = base.clone();
        s.fractions = vec![1.5];
        assert!(s.validate().is_err());
        assert!(ExperimentSpec::from_toml("widths = [1]\nbogus = 3\n[dataset]\nkind='blobs'\nn=4\nd=1\nclasses=2\nseparation=1.0").is_err());
    }

    #[test]
    fn pair_selection() {
        assert_eq!(PairSelection::All.pairs(3), vec![(0, 1), (0, 2), (1, 2)]);
        assert_eq!(PairSelection::Disjoint.pairs(5), vec![(0, 1), (2, 3)]);
    }
}
