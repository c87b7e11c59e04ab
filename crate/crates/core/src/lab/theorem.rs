//! Empirical check of the width rate for wide two-layer networks.
//!
//! Two bias-free networks `v^T relu(U x)` with `U ~ U(-1/sqrt(d), 1/sqrt(d))`
//! and `v ~ U(-1/sqrt(h), 1/sqrt(h))` are drawn per trial. The rows of the
//! second are grid-matched to the first, `(U', v')` is permuted jointly, and
//! the deviation of the midpoint network from the midpoint of the two
//! outputs is measured on random inputs of norm `sqrt(d)`.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ExperimentReport;
use crate::net::{build_mlp_with, combine2, forward, BuildOptions, Network, Shape3};
use crate::perm::{apply, Permutation};
use crate::search::{default_xi, grid_bucket_match, Pairing};
use crate::seed;
use crate::{Error, Result};

/// Grid spacing as a function of `(h, d)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum XiRule {
    /// About `sqrt(h)` rows per occupied cell.
    SqrtPopulation,
    /// `xi * sqrt(d) = h^(-1 / (2d + 4))`, the spacing that balances the
    /// leftover and cell-radius terms of the bound.
    ProofRate,
    Fixed(f64),
}

impl XiRule {
    pub fn xi(self, h: usize, d: usize) -> f64 {
        match self {
            XiRule::SqrtPopulation => default_xi(h, d),
            XiRule::ProofRate => (h as f64).powf(-1.0 / (2.0 * d as f64 + 4.0)) / (d as f64).sqrt(),
            XiRule::Fixed(x) => x,
        }
    }
}

/// `|f_mid(x) - f_a(x) / 2 - f_b(x) / 2|` for each probe row of `x`.
pub fn theorem1_deviation(a: &Network, b: &Network, x: &[f32]) -> Result<Vec<f64>> {
    if a.num_classes != 1 {
        return Err(Error::InvalidArgument("deviation needs scalar-output networks".into()));
    }
    let mid = combine2(a, 0.5, b, 0.5)?;
    let fa = forward(a, x)?;
    let fb = forward(b, x)?;
    let fm = forward(&mid, x)?;
    Ok(fm
        .iter()
        .zip(fa.iter().zip(&fb))
        .map(|(m, (p, q))| (m - 0.5 * p - 0.5 * q).abs())
        .collect())
}

fn probes(d: usize, n: usize, seed: u64) -> Vec<f32> {
    let mut rng = seed::rng(seed);
    let mut out = Vec::with_capacity(n * d);
    for _ in 0..n {
        let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        let scale = (d as f64).sqrt() / norm;
        out.extend(z.iter().map(|v| (v * scale) as f32));
    }
    out
}

fn theorem_net(h: usize, d: usize, seed: u64) -> Result<Network> {
    build_mlp_with(1, h, Shape3::flat(d), 1, seed, BuildOptions { bias: false })
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Least-squares slope of `ln y` against `ln x`.
fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Median and maximum midpoint deviation per width after grid-bucket
/// matching, with the fitted log-log slope and the predicted rate
/// `-1 / (2d + 4)` in the summary.
pub fn theorem1_check(
    d: usize,
    h_list: &[usize],
    trials: usize,
    probe_count: usize,
    xi_rule: XiRule,
    seed: u64,
) -> Result<ExperimentReport> {
    if d == 0 || trials < 5 || probe_count == 0 || h_list.is_empty() {
        return Err(Error::InvalidArgument(
            "theorem1 needs d >= 1, trials >= 5, probes >= 1 and widths".into(),
        ));
    }
    if h_list.windows(2).any(|w| w[0] >= w[1]) || h_list[0] == 0 {
        return Err(Error::InvalidArgument("h_list must be positive and ascending".into()));
    }
    let mut report = ExperimentReport::new("theorem1");
    let mut medians = Vec::with_capacity(h_list.len());
    for (hi, &h) in h_list.iter().enumerate() {
        let xi = xi_rule.xi(h, d);
        if !(xi.is_finite() && xi > 0.0) {
            return Err(Error::InvalidArgument(format!("invalid xi {xi} for h = {h}")));
        }
        let mut devs = Vec::with_capacity(trials * probe_count);
        let mut leftover = 0.0;
        let mut used_xi = xi;
        for t in 0..trials {
            let s = seed::derive(seed, "theorem1", (hi * 1_000_000 + t) as u64);
            let a = theorem_net(h, d, seed::derive(s, "a", 0))?;
            let b = theorem_net(h, d, seed::derive(s, "b", 0))?;
            let to64 = |w: &[f32]| w.iter().map(|&v| f64::from(v)).collect::<Vec<f64>>();
            let (u, up) = (to64(&a.layers[0].weight), to64(&b.layers[0].weight));
            let (v, vp) = (to64(&a.layers[1].weight), to64(&b.layers[1].weight));
            let g = grid_bucket_match(
                &u,
                &up,
                d,
                xi,
                Pairing::Keyed {
                    keys_u: &v,
                    keys_u_prime: &vp,
                },
                seed::derive(s, "match", 0),
            )?;
            used_xi = g.xi;
            leftover += g.leftovers as f64 / h as f64;
            let b2 = apply(&b, &Permutation::new(vec![g.perm])?)?;
            devs.extend(theorem1_deviation(&a, &b2, &probes(d, probe_count, seed::derive(s, "probe", 0)))?);
        }
        let max = devs.iter().copied().fold(0.0, f64::max);
        let med = median(&mut devs);
        medians.push((h as f64, med));
        report.push_series("median", h as f64, med);
        report.push_series("max", h as f64, max);
        report.push_series("leftover_fraction", h as f64, leftover / trials as f64);
        report.push_series("xi", h as f64, used_xi);
    }
    let slope = if medians.len() >= 2 && medians.iter().all(|p| p.1 > 0.0) {
        loglog_slope(&medians)
    } else {
        f64::NAN
    };
    report.summary.insert("d".into(), d as f64);
    report.summary.insert("slope".into(), slope);
    report
        .summary
        .insert("predicted_slope".into(), -1.0 / (2.0 * d as f64 + 4.0));
    Ok(report)
}
