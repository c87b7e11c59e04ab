//! Simulated annealing over hidden-unit permutations.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::SearchResult;
use crate::barrier::{midpoint_excess, Metric};
use crate::data::{Dataset, Split};
use crate::net::{average, combine2, evaluate, EvalResult, Network};
use crate::perm::{apply, identity_perm, transposition_move_in_place, Permutation};
use crate::seed::{self, Rng};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Mean pairwise midpoint barrier between the permuted models.
    Sa1PairwiseBarrier,
    /// Error of the parameter average of the permuted models.
    Sa2AverageError,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SAConfig {
    pub steps: usize,
    pub t_max: f64,
    pub t_min: f64,
    pub swaps_per_layer: usize,
    pub objective: Objective,
    pub n_models: usize,
    pub seed: u64,
    /// Barrier metric for the pairwise objective and the reduced search.
    pub metric: Metric,
    pub split: Split,
    /// Keep the first model's permutation at the identity.
    pub pin_first: bool,
}

impl Default for SAConfig {
    fn default() -> Self {
        SAConfig {
            steps: 50_000,
            t_max: 25_000.0,
            t_min: 2.5,
            swaps_per_layer: 1,
            objective: Objective::Sa1PairwiseBarrier,
            n_models: 2,
            seed: 0,
            metric: Metric::Loss,
            split: Split::Train,
            pin_first: false,
        }
    }
}

impl SAConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.t_min > 0.0 && self.t_max > self.t_min && self.t_max.is_finite()) {
            return bad(format!(
                "temperatures must satisfy 0 < t_min < t_max, got {} and {}",
                self.t_min, self.t_max
            ));
        }
        if self.swaps_per_layer == 0 {
            return bad("swaps_per_layer must be >= 1".into());
        }
        if self.n_models < 2 {
            return bad(format!("n_models must be >= 2, got {}", self.n_models));
        }
        Ok(())
    }
}

/// Exponential cooling from `t_max` at step 0 to `t_min` at the last step.
pub fn temperature(step: usize, cfg: &SAConfig) -> f64 {
    if cfg.steps <= 1 {
        return cfg.t_max;
    }
    let frac = step as f64 / (cfg.steps - 1) as f64;
    cfg.t_max * (cfg.t_min / cfg.t_max).powf(frac)
}

/// Metropolis rule.
pub fn accept(delta_energy: f64, t: f64, rng: &mut Rng) -> bool {
    if delta_energy < 0.0 {
        return true;
    }
    rng.random::<f64>() < (-delta_energy / t).exp()
}

fn check_inputs(nets: &[Network], dataset: &Dataset, split: Split) -> Result<()> {
    for n in &nets[1..] {
        nets[0].ensure_same_arch(n)?;
    }
    if dataset.split(split).is_empty() {
        return Err(Error::Empty("search dataset split"));
    }
    Ok(())
}

/// Anneal over `perms`, moving only those at index `>= first_movable`.
fn anneal<F>(
    method: &str,
    mut perms: Vec<Permutation>,
    first_movable: usize,
    cfg: &SAConfig,
    energy: F,
) -> Result<SearchResult>
where
    F: Fn(&[Permutation]) -> Result<f64>,
{
    let mut move_rng = seed::rng(seed::derive(cfg.seed, "sa-move", 0));
    let mut accept_rng = seed::rng(seed::derive(cfg.seed, "sa-accept", 0));
    let initial = energy(&perms)?;
    let mut current = initial;
    let mut best = initial;
    let mut best_perms = perms.clone();
    let mut trace = vec![(0, initial)];
    let mut evaluations = 1;
    let mut accepted = 0;
    for step in 0..cfg.steps {
        let mut candidate = perms.clone();
        for p in &mut candidate[first_movable..] {
            transposition_move_in_place(p, cfg.swaps_per_layer, &mut move_rng)?;
        }
        let e = energy(&candidate)?;
        evaluations += 1;
        if accept(e - current, temperature(step, cfg), &mut accept_rng) {
            perms = candidate;
            current = e;
            accepted += 1;
            if e < best {
                best = e;
                best_perms = perms.clone();
                trace.push((step + 1, best));
            }
        }
    }
    if trace.last().is_some_and(|&(s, _)| s != cfg.steps) {
        trace.push((cfg.steps, best));
    }
    Ok(SearchResult {
        method: method.to_string(),
        perms: best_perms,
        energy_trace: trace,
        initial_energy: initial,
        final_energy: best,
        evaluations,
        accepted,
        seed: cfg.seed,
        config: Some(cfg.clone()),
    })
}

/// Joint search over the permutations of all `nets`.
pub fn sa_search(nets: &[Network], dataset: &Dataset, cfg: &SAConfig) -> Result<SearchResult> {
    cfg.validate()?;
    if nets.len() != cfg.n_models {
        return Err(Error::InvalidArgument(format!(
            "sa_search got {} networks, config says {}",
            nets.len(),
            cfg.n_models
        )));
    }
    check_inputs(nets, dataset, cfg.split)?;
    let perms = vec![identity_perm(&nets[0]); nets.len()];
    let first = usize::from(cfg.pin_first);
    match cfg.objective {
        Objective::Sa1PairwiseBarrier => {
            let ends: Vec<EvalResult> = nets
                .par_iter()
                .map(|n| evaluate(n, dataset, cfg.split))
                .collect::<Result<_>>()?;
            let pairs: Vec<(usize, usize)> = (0..nets.len())
                .flat_map(|i| (i + 1..nets.len()).map(move |j| (i, j)))
                .collect();
            let energy = |perms: &[Permutation]| -> Result<f64> {
                let moved: Vec<Network> = nets
                    .iter()
                    .zip(perms)
                    .map(|(n, p)| apply(n, p))
                    .collect::<Result<_>>()?;
                let vals: Vec<f64> = pairs
                    .par_iter()
                    .map(|&(i, j)| {
                        let mid = combine2(&moved[i], 0.5, &moved[j], 0.5)?;
                        let e = evaluate(&mid, dataset, cfg.split)?;
                        Ok(midpoint_excess(&ends[i], &ends[j], &e, cfg.metric))
                    })
                    .collect::<Result<_>>()?;
                Ok(vals.iter().sum::<f64>() / vals.len() as f64)
            };
            anneal("sa1", perms, first, cfg, energy)
        }
        Objective::Sa2AverageError => {
            let energy = |perms: &[Permutation]| -> Result<f64> {
                let moved: Vec<Network> = nets
                    .iter()
                    .zip(perms)
                    .map(|(n, p)| apply(n, p))
                    .collect::<Result<_>>()?;
                Ok(evaluate(&average(&moved)?, dataset, cfg.split)?.error)
            };
            anneal("sa2", perms, first, cfg, energy)
        }
    }
}

/// Search only the permutation of `net1`; the energy is the midpoint barrier
/// between the permuted `net1` and `net2`.
pub fn sa_search_reduced(
    net1: &Network,
    net2: &Network,
    dataset: &Dataset,
    cfg: &SAConfig,
) -> Result<SearchResult> {
    cfg.validate()?;
    let nets = [net1.clone(), net2.clone()];
    check_inputs(&nets, dataset, cfg.split)?;
    let e1 = evaluate(net1, dataset, cfg.split)?;
    let e2 = evaluate(net2, dataset, cfg.split)?;
    let energy = |perms: &[Permutation]| -> Result<f64> {
        let mid = combine2(&apply(net1, &perms[0])?, 0.5, net2, 0.5)?;
        let e = evaluate(&mid, dataset, cfg.split)?;
        Ok(midpoint_excess(&e1, &e2, &e, cfg.metric))
    };
    anneal("sa-reduced", vec![identity_perm(net1)], 0, cfg, energy)
}
