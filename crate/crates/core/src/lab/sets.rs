use rayon::prelude::*;

use super::spec::ExperimentSpec;
use crate::data::Dataset;
use crate::net::{build_mlp_with, build_shallow_cnn, train, ArchKind, BuildOptions, Network, TrainConfig, TrainReport};
use crate::perm::{apply, random_perm};
use crate::seed;
use crate::Result;

/// A trained network and the seed that reproduces it.
#[derive(Clone, Debug, PartialEq)]
pub struct Member {
    pub seed: u64,
    pub net: Network,
    pub report: TrainReport,
}

/// Seed of set member `k`. Initialisation and minibatch order are both
/// derived from it.
pub fn member_seed(master_seed: u64, k: usize) -> u64 {
    seed::derive(master_seed, "member", k as u64)
}

pub fn build_member_net(
    arch: ArchKind,
    width: usize,
    depth: usize,
    dataset: &Dataset,
    member_seed: u64,
) -> Result<Network> {
    let init = seed::derive(member_seed, "init", 0);
    match arch {
        ArchKind::Mlp => build_mlp_with(
            depth,
            width,
            dataset.shape,
            dataset.num_classes,
            init,
            BuildOptions::default(),
        ),
        ArchKind::ShallowCnn => {
            build_shallow_cnn(depth, width, dataset.shape, dataset.num_classes, init)
        }
    }
}

pub fn train_member(
    arch: ArchKind,
    width: usize,
    depth: usize,
    dataset: &Dataset,
    cfg: &TrainConfig,
    member_seed: u64,
) -> Result<Member> {
    let net = build_member_net(arch, width, depth, dataset, member_seed)?;
    let cfg = TrainConfig {
        seed: seed::derive(member_seed, "shuffle", 0),
        ..cfg.clone()
    };
    let (net, report) = train(&net, dataset, &cfg)?;
    Ok(Member {
        seed: member_seed,
        net,
        report,
    })
}

/// `spec.n_seeds` networks trained from independent initialisations and
/// minibatch orders.
pub fn real_world_set(
    spec: &ExperimentSpec,
    dataset: &Dataset,
    width: usize,
    depth: usize,
) -> Result<Vec<Member>> {
    let cfg = spec.train_config();
    cfg.validate()?;
    (0..spec.n_seeds)
        .into_par_iter()
        .map(|k| train_member(spec.arch, width, depth, dataset, &cfg, member_seed(spec.master_seed, k)))
        .collect()
}

/// `theta` followed by `n - 1` uniformly permuted copies of it.
pub fn model_set(theta: &Network, n: usize, seed: u64) -> Result<Vec<Network>> {
    if n < 2 {
        return Err(crate::Error::InvalidArgument(format!(
            "model set needs n >= 2, got {n}"
        )));
    }
    let mut out = Vec::with_capacity(n);
    out.push(theta.clone());
    for k in 1..n {
        out.push(apply(theta, &random_perm(theta, seed::derive(seed, "model-set", k as u64)))?);
    }
    Ok(out)
}
