//! Loss and error along the linear path between two networks, and the
//! barrier statistics built on them.
//!
//! The barrier between `theta1` and `theta2` is the largest excess of the
//! path value `L(alpha * theta1 + (1 - alpha) * theta2)` over the straight
//! line `alpha * L(theta1) + (1 - alpha) * L(theta2)`. A path whose loss
//! changes linearly has barrier zero.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::net::{combine2, evaluate, EvalResult, Network};
use crate::{Error, Result};

/// Full-grid and midpoint barriers differing by more than this raise a flag.
pub const MIDPOINT_FLAG_TOLERANCE: f64 = 1e-3;

/// Default number of grid points for profiles.
pub const DEFAULT_GRID: usize = 11;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    /// Mean cross-entropy.
    Loss,
    /// Top-1 error.
    Error,
}

impl Metric {
    pub fn of(self, e: &EvalResult) -> f64 {
        match self {
            Metric::Loss => e.loss,
            Metric::Error => e.error,
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::Loss => "loss",
            Metric::Error => "error",
        })
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loss" | "ce" => Ok(Metric::Loss),
            "error" | "err" | "top1" => Ok(Metric::Error),
            _ => Err(Error::InvalidArgument(format!("unknown metric {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BarrierProfile {
    /// Ascending grid on `[0, 1]`; `alpha` weights the first network.
    pub alphas: Vec<f64>,
    pub losses: Vec<f64>,
    pub errors: Vec<f64>,
    pub metric: Metric,
    pub split: Split,
    /// Metric value of the first network (`alpha = 1`).
    pub endpoint_l1: f64,
    /// Metric value of the second network (`alpha = 0`).
    pub endpoint_l0: f64,
}

impl BarrierProfile {
    pub fn values(&self) -> &[f64] {
        match self.metric {
            Metric::Loss => &self.losses,
            Metric::Error => &self.errors,
        }
    }

    pub fn baseline(&self, k: usize) -> f64 {
        let a = self.alphas[k];
        self.endpoint_l0 + a * (self.endpoint_l1 - self.endpoint_l0)
    }

    /// The same profile seen from the other endpoint.
    pub fn reversed(&self) -> BarrierProfile {
        let rev = |v: &[f64]| v.iter().rev().copied().collect::<Vec<_>>();
        BarrierProfile {
            alphas: self.alphas.iter().rev().map(|a| 1.0 - a).collect(),
            losses: rev(&self.losses),
            errors: rev(&self.errors),
            metric: self.metric,
            split: self.split,
            endpoint_l1: self.endpoint_l0,
            endpoint_l0: self.endpoint_l1,
        }
    }

    /// `alpha,loss,error,baseline,excess`; baseline and excess refer to the
    /// profile's metric.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("alpha,loss,error,baseline,excess\n");
        let vals = self.values();
        for (k, &alpha) in self.alphas.iter().enumerate() {
            let base = self.baseline(k);
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                alpha,
                self.losses[k],
                self.errors[k],
                base,
                vals[k] - base
            ));
        }
        s
    }
}

fn grid_point(net1: &Network, net2: &Network, k: usize, m: usize) -> Result<Network> {
    combine2(net1, k as f64 / m as f64, net2, (m - k) as f64 / m as f64)
}

/// Evaluate the interpolation path on `grid_size` equally spaced points.
///
/// Point `k` weights `net1` by `k / (grid_size - 1)` and `net2` by the
/// complementary ratio, so a profile and the profile of the swapped pair are
/// exact mirror images.
pub fn loss_profile(
    net1: &Network,
    net2: &Network,
    dataset: &Dataset,
    grid_size: usize,
    metric: Metric,
    split: Split,
) -> Result<BarrierProfile> {
    net1.ensure_same_arch(net2)?;
    if grid_size < 3 || grid_size.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "grid size must be odd and >= 3, got {grid_size}"
        )));
    }
    let m = grid_size - 1;
    let evals: Vec<EvalResult> = (0..=m)
        .into_par_iter()
        .map(|k| evaluate(&grid_point(net1, net2, k, m)?, dataset, split))
        .collect::<Result<_>>()?;
    let losses: Vec<f64> = evals.iter().map(|e| e.loss).collect();
    let errors: Vec<f64> = evals.iter().map(|e| e.error).collect();
    let pick = |e: &EvalResult| metric.of(e);
    Ok(BarrierProfile {
        alphas: (0..=m).map(|k| k as f64 / m as f64).collect(),
        losses,
        errors,
        metric,
        split,
        endpoint_l1: pick(&evals[m]),
        endpoint_l0: pick(&evals[0]),
    })
}

/// Largest excess of the profile over the linear baseline. Never negative,
/// because the endpoints contribute exactly zero.
pub fn barrier_value(profile: &BarrierProfile) -> f64 {
    let vals = profile.values();
    (0..vals.len())
        .map(|k| vals[k] - profile.baseline(k))
        .fold(0.0, f64::max)
}

/// Path value at `alpha = 1/2` minus the mean endpoint value.
pub fn midpoint_barrier(
    net1: &Network,
    net2: &Network,
    dataset: &Dataset,
    metric: Metric,
    split: Split,
) -> Result<f64> {
    net1.ensure_same_arch(net2)?;
    let e1 = evaluate(net1, dataset, split)?;
    let e2 = evaluate(net2, dataset, split)?;
    let mid = evaluate(&combine2(net1, 0.5, net2, 0.5)?, dataset, split)?;
    Ok(midpoint_excess(&e1, &e2, &mid, metric))
}

pub(crate) fn midpoint_excess(
    e1: &EvalResult,
    e2: &EvalResult,
    mid: &EvalResult,
    metric: Metric,
) -> f64 {
    metric.of(mid) - (metric.of(e1) + metric.of(e2)) / 2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MidpointCheck {
    pub midpoint: f64,
    pub grid: f64,
    pub gap: f64,
    /// `gap > MIDPOINT_FLAG_TOLERANCE`.
    pub flagged: bool,
}

/// Midpoint barrier next to the full-grid barrier on `grid_size` points.
pub fn midpoint_check(
    net1: &Network,
    net2: &Network,
    dataset: &Dataset,
    grid_size: usize,
    metric: Metric,
    split: Split,
) -> Result<MidpointCheck> {
    let profile = loss_profile(net1, net2, dataset, grid_size, metric, split)?;
    let grid = barrier_value(&profile);
    let mid_k = (grid_size - 1) / 2;
    let midpoint = profile.values()[mid_k] - profile.baseline(mid_k);
    let gap = (grid - midpoint).abs();
    Ok(MidpointCheck {
        midpoint,
        grid,
        gap,
        flagged: gap > MIDPOINT_FLAG_TOLERANCE,
    })
}

/// How pairwise barriers are measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathMode {
    Midpoint,
    /// Full grid with this many points (odd, >= 3).
    Grid(usize),
}

/// Symmetric `n x n` matrix of barriers with a zero diagonal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BarrierMatrix {
    pub n: usize,
    pub values: Vec<f64>,
}

impl BarrierMatrix {
    pub fn zeros(n: usize) -> Self {
        BarrierMatrix {
            n,
            values: vec![0.0; n * n],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::ShapeMismatch("barrier matrix must be square".into()));
        }
        Ok(BarrierMatrix {
            n,
            values: rows.concat(),
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn set_sym(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.n + j] = v;
        self.values[j * self.n + i] = v;
    }

    /// Upper-triangle entries in row-major order.
    pub fn upper(&self) -> Vec<((usize, usize), f64)> {
        let mut out = Vec::with_capacity(self.n * (self.n.saturating_sub(1)) / 2);
        for i in 0..self.n {
            for j in i + 1..self.n {
                out.push(((i, j), self.get(i, j)));
            }
        }
        out
    }

    pub fn mean_upper(&self) -> f64 {
        let u = self.upper();
        u.iter().map(|(_, v)| v).sum::<f64>() / u.len().max(1) as f64
    }

    /// `i,j,barrier` for the upper triangle.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("i,j,barrier\n");
        for ((i, j), v) in self.upper() {
            s.push_str(&format!("{i},{j},{v}\n"));
        }
        s
    }
}

/// Endpoint and midpoint evaluations for every unordered pair of a set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseEval {
    pub endpoints: Vec<EvalResult>,
    /// `((i, j), eval of the midpoint)` for `i < j`, row-major.
    pub mids: Vec<((usize, usize), EvalResult)>,
}

impl PairwiseEval {
    pub fn compute(nets: &[Network], dataset: &Dataset, split: Split) -> Result<Self> {
        let pairs: Vec<(usize, usize)> = (0..nets.len())
            .flat_map(|i| (i + 1..nets.len()).map(move |j| (i, j)))
            .collect();
        Self::compute_pairs(nets, dataset, split, &pairs)
    }

    /// Midpoints only for the listed pairs (each `i < j`).
    pub fn compute_pairs(
        nets: &[Network],
        dataset: &Dataset,
        split: Split,
        pairs: &[(usize, usize)],
    ) -> Result<Self> {
        if nets.len() < 2 {
            return Err(Error::InvalidArgument(
                "pairwise barriers need at least two networks".into(),
            ));
        }
        if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= j || j >= nets.len()) {
            return Err(Error::InvalidArgument(format!("bad pair ({i}, {j})")));
        }
        for n in &nets[1..] {
            nets[0].ensure_same_arch(n)?;
        }
        let endpoints: Vec<EvalResult> = nets
            .par_iter()
            .map(|n| evaluate(n, dataset, split))
            .collect::<Result<_>>()?;
        let mids = pairs
            .par_iter()
            .map(|&(i, j)| {
                let mid = combine2(&nets[i], 0.5, &nets[j], 0.5)?;
                Ok(((i, j), evaluate(&mid, dataset, split)?))
            })
            .collect::<Result<_>>()?;
        Ok(PairwiseEval { endpoints, mids })
    }

    /// Barrier of pair `(i, j)` if it was evaluated.
    pub fn value(&self, i: usize, j: usize, metric: Metric) -> Option<f64> {
        self.mids
            .iter()
            .find(|((a, b), _)| (*a, *b) == (i, j))
            .map(|(_, mid)| midpoint_excess(&self.endpoints[i], &self.endpoints[j], mid, metric))
    }

    pub fn matrix(&self, metric: Metric) -> BarrierMatrix {
        let mut m = BarrierMatrix::zeros(self.endpoints.len());
        for ((i, j), mid) in &self.mids {
            let v = midpoint_excess(&self.endpoints[*i], &self.endpoints[*j], mid, metric);
            m.set_sym(*i, *j, v);
        }
        m
    }
}

/// Barrier between every pair of `nets`.
pub fn pairwise_barriers(
    nets: &[Network],
    dataset: &Dataset,
    metric: Metric,
    split: Split,
    mode: PathMode,
) -> Result<BarrierMatrix> {
    match mode {
        PathMode::Midpoint => Ok(PairwiseEval::compute(nets, dataset, split)?.matrix(metric)),
        PathMode::Grid(g) => {
            if nets.len() < 2 {
                return Err(Error::InvalidArgument(
                    "pairwise barriers need at least two networks".into(),
                ));
            }
            let mut m = BarrierMatrix::zeros(nets.len());
            for i in 0..nets.len() {
                for j in i + 1..nets.len() {
                    let p = loss_profile(&nets[i], &nets[j], dataset, g, metric, split)?;
                    m.set_sym(i, j, barrier_value(&p));
                }
            }
            Ok(m)
        }
    }
}

/// Smallest over intermediates `k` of the larger of the two legs
/// `B(i, k)` and `B(k, j)`.
pub fn indirect_barrier(matrix: &BarrierMatrix, i: usize, j: usize) -> Result<f64> {
    if matrix.n < 3 {
        return Err(Error::InvalidArgument(
            "indirect barriers need at least three networks".into(),
        ));
    }
    if i == j || i >= matrix.n || j >= matrix.n {
        return Err(Error::InvalidArgument(format!(
            "indirect barrier needs two distinct indices below {}, got ({i}, {j})",
            matrix.n
        )));
    }
    Ok((0..matrix.n)
        .filter(|&k| k != i && k != j)
        .map(|k| matrix.get(i, k).max(matrix.get(k, j)))
        .fold(f64::INFINITY, f64::min))
}

/// Indirect barrier together with the intermediate achieving it (lowest index
/// on ties).
pub fn indirect_barrier_via(matrix: &BarrierMatrix, i: usize, j: usize) -> Result<(f64, usize)> {
    let best = indirect_barrier(matrix, i, j)?;
    let k = (0..matrix.n)
        .find(|&k| k != i && k != j && matrix.get(i, k).max(matrix.get(k, j)) == best)
        .expect("minimum is attained");
    Ok((best, k))
}
