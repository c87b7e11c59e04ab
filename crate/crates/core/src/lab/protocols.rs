use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sets::{real_world_set, Member};
use super::spec::{ExperimentKind, ExperimentSpec, PairSelection, SearchMethod};
use super::theorem::{theorem1_check, XiRule};
use super::{model_set, EndpointRow, ExperimentReport, ReportRow};
use crate::barrier::{indirect_barrier, midpoint_excess, BarrierMatrix, Metric, PairwiseEval};
use crate::data::{corrupt_labels, Dataset, Split};
use crate::net::{average, evaluate, forward, logits_to_eval, EvalResult, Network};
use crate::perm::{apply, Permutation};
use crate::search::{
    brute_force_match, fd_align, grid_align, sa_search, sa_search_reduced, SAConfig,
};
use crate::seed;
use crate::{Error, Result};

/// What a row block is about.
struct Block<'a> {
    spec: &'a ExperimentSpec,
    dataset: &'a Dataset,
    label: String,
    width: usize,
    depth: usize,
}

impl Block<'_> {
    fn row(&self, set: &str, seeds: (u64, u64), phase: &str, metric: Metric, split: Split, barrier: f64) -> ReportRow {
        ReportRow {
            arch: self.spec.arch.to_string(),
            width: self.width,
            depth: self.depth,
            dataset: self.label.clone(),
            set: set.to_string(),
            seed_a: seeds.0,
            seed_b: seeds.1,
            phase: phase.to_string(),
            metric,
            split,
            barrier,
        }
    }

    fn endpoint_rows(&self, members: &[Member]) -> Result<Vec<EndpointRow>> {
        members
            .par_iter()
            .map(|m| {
                let tr = evaluate(&m.net, self.dataset, Split::Train)?;
                let te = evaluate(&m.net, self.dataset, Split::Test)?;
                Ok(EndpointRow {
                    arch: self.spec.arch.to_string(),
                    width: self.width,
                    depth: self.depth,
                    dataset: self.label.clone(),
                    seed: m.seed,
                    epochs: m.report.epochs_run,
                    train_loss: tr.loss,
                    train_error: tr.error,
                    test_loss: te.loss,
                    test_error: te.error,
                })
            })
            .collect()
    }

    /// Midpoint barriers of `pairs`, one row per pair, metric and split.
    fn measure(
        &self,
        nets: &[Network],
        seeds: &[u64],
        pairs: &[(usize, usize)],
        set: &str,
        phase: &str,
    ) -> Result<Vec<ReportRow>> {
        let mut rows = Vec::new();
        for &split in &self.spec.splits {
            let ev = PairwiseEval::compute_pairs(nets, self.dataset, split, pairs)?;
            for &metric in &self.spec.metrics {
                for &(i, j) in pairs {
                    let b = ev.value(i, j, metric).expect("pair evaluated");
                    rows.push(self.row(set, (seeds[i], seeds[j]), phase, metric, split, b));
                }
            }
        }
        Ok(rows)
    }

    /// Barriers of `(moved_i, net_j)` for per-pair aligned copies of net `i`.
    fn measure_aligned(
        &self,
        nets: &[Network],
        seeds: &[u64],
        aligned: &[((usize, usize), Network)],
        set: &str,
        phase: &str,
    ) -> Result<Vec<ReportRow>> {
        let mut rows = Vec::new();
        for &split in &self.spec.splits {
            let ends: Vec<EvalResult> = nets
                .par_iter()
                .map(|n| evaluate(n, self.dataset, split))
                .collect::<Result<_>>()?;
            let mids: Vec<EvalResult> = aligned
                .par_iter()
                .map(|((_, j), moved)| {
                    evaluate(&crate::net::combine2(moved, 0.5, &nets[*j], 0.5)?, self.dataset, split)
                })
                .collect::<Result<_>>()?;
            for &metric in &self.spec.metrics {
                for (((i, j), _), mid) in aligned.iter().zip(&mids) {
                    let b = midpoint_excess(&ends[*i], &ends[*j], mid, metric);
                    rows.push(self.row(set, (seeds[*i], seeds[*j]), phase, metric, split, b));
                }
            }
        }
        Ok(rows)
    }

    /// Run the spec's search on a set and measure the result.
    fn after_search(
        &self,
        nets: &[Network],
        seeds: &[u64],
        pairs: &[(usize, usize)],
        set: &str,
    ) -> Result<Vec<ReportRow>> {
        let spec = self.spec;
        let phase = format!("after-{}", spec.search);
        match spec.search {
            SearchMethod::None => Ok(Vec::new()),
            SearchMethod::Sa => {
                let cfg = SAConfig {
                    n_models: nets.len(),
                    ..spec.sa.clone()
                };
                let res = sa_search(nets, self.dataset, &cfg)?;
                let moved: Vec<Network> = nets
                    .iter()
                    .zip(&res.perms)
                    .map(|(n, p)| apply(n, p))
                    .collect::<Result<_>>()?;
                self.measure(&moved, seeds, pairs, set, &phase)
            }
            method => {
                let aligned: Vec<((usize, usize), Network)> = pairs
                    .iter()
                    .map(|&(i, j)| {
                        let tag = seed::derive(spec.master_seed, "pair-search", (i * nets.len() + j) as u64);
                        let p = align_pair(method, &nets[i], &nets[j], self.dataset, spec, tag)?;
                        Ok(((i, j), apply(&nets[i], &p)?))
                    })
                    .collect::<Result<_>>()?;
                self.measure_aligned(nets, seeds, &aligned, set, &phase)
            }
        }
    }
}

/// Permutation for `a` that aligns it to `b` with a pairwise method.
fn align_pair(
    method: SearchMethod,
    a: &Network,
    b: &Network,
    dataset: &Dataset,
    spec: &ExperimentSpec,
    seed: u64,
) -> Result<Permutation> {
    match method {
        SearchMethod::SaReduced => {
            let cfg = SAConfig {
                n_models: 2,
                seed,
                ..spec.sa.clone()
            };
            Ok(sa_search_reduced(a, b, dataset, &cfg)?.perms.remove(0))
        }
        SearchMethod::Fd => fd_align(a, b, dataset),
        SearchMethod::Grid => grid_align(a, b, seed),
        SearchMethod::Brute => Ok(brute_force_match(
            a,
            b,
            dataset,
            spec.brute_width_limit,
            spec.metrics[0],
            Split::Train,
        )?
        .perms
        .remove(0)),
        SearchMethod::None | SearchMethod::Sa => Err(Error::InvalidArgument(format!(
            "{method} is not a pairwise method"
        ))),
    }
}

fn compare_block(
    spec: &ExperimentSpec,
    dataset: &Dataset,
    width: usize,
    depth: usize,
    report: &mut ExperimentReport,
) -> Result<()> {
    let block = Block {
        spec,
        dataset,
        label: spec.dataset.label(),
        width,
        depth,
    };
    let members = real_world_set(spec, dataset, width, depth)?;
    report.endpoints.extend(block.endpoint_rows(&members)?);
    let pairs = spec.pairs.pairs(members.len());

    let s_nets: Vec<Network> = members.iter().map(|m| m.net.clone()).collect();
    let s_seeds: Vec<u64> = members.iter().map(|m| m.seed).collect();
    let sp_seed = seed::derive(spec.master_seed, "s-prime", 0);
    let sp_nets = model_set(&members[0].net, members.len(), sp_seed)?;
    let mut sp_seeds = vec![members[0].seed];
    sp_seeds.extend((1..members.len()).map(|k| seed::derive(sp_seed, "model-set", k as u64)));

    report.rows.extend(block.measure(&s_nets, &s_seeds, &pairs, "S", "before")?);
    report.rows.extend(block.measure(&sp_nets, &sp_seeds, &pairs, "S'", "before")?);
    report.rows.extend(block.after_search(&s_nets, &s_seeds, &pairs, "S")?);
    report.rows.extend(block.after_search(&sp_nets, &sp_seeds, &pairs, "S'")?);
    Ok(())
}

/// Mean pairwise barrier of independently trained networks (S) next to
/// that of random permutations of the first of them (S'), before and,
/// when a search method is set, after search. Uses the first width and
/// depth of the spec.
pub fn compare_s_sprime(spec: &ExperimentSpec, dataset: &Dataset) -> Result<ExperimentReport> {
    spec.validate()?;
    let mut report = ExperimentReport::new("compare");
    compare_block(spec, dataset, spec.widths[0], spec.depths[0], &mut report)?;
    report.aggregate();
    Ok(report)
}

/// One compare block per width, at the first depth.
pub fn width_sweep(spec: &ExperimentSpec, dataset: &Dataset) -> Result<ExperimentReport> {
    spec.validate()?;
    let mut report = ExperimentReport::new("width-sweep");
    for &w in &spec.widths {
        compare_block(spec, dataset, w, spec.depths[0], &mut report)?;
    }
    report.aggregate();
    Ok(report)
}

/// One compare block per depth, at the first width.
pub fn depth_sweep(spec: &ExperimentSpec, dataset: &Dataset) -> Result<ExperimentReport> {
    spec.validate()?;
    let mut report = ExperimentReport::new("depth-sweep");
    for &d in &spec.depths {
        compare_block(spec, dataset, spec.widths[0], d, &mut report)?;
    }
    report.aggregate();
    Ok(report)
}

/// Barriers of sets trained on label-corrupted data, one block per
/// fraction (ascending). Member seeds do not depend on the fraction.
pub fn noisy_label_experiment(
    spec: &ExperimentSpec,
    dataset: &Dataset,
    fractions: &[f64],
) -> Result<ExperimentReport> {
    spec.validate()?;
    if fractions.is_empty() || fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::InvalidArgument(
            "fractions must be a non-empty subset of [0, 1]".into(),
        ));
    }
    let mut fractions = fractions.to_vec();
    fractions.sort_by(f64::total_cmp);
    let mut report = ExperimentReport::new("noisy-labels");
    let (width, depth) = (spec.widths[0], spec.depths[0]);
    for &f in &fractions {
        let noisy = corrupt_labels(dataset, f, seed::derive(spec.master_seed, "label-noise", 0))?;
        let block = Block {
            spec,
            dataset: &noisy,
            label: format!("{}-noise{f}", spec.dataset.label()),
            width,
            depth,
        };
        let members = real_world_set(spec, &noisy, width, depth)?;
        let ends = block.endpoint_rows(&members)?;
        let nets: Vec<Network> = members.iter().map(|m| m.net.clone()).collect();
        let seeds: Vec<u64> = members.iter().map(|m| m.seed).collect();
        let rows = block.measure(&nets, &seeds, &spec.pairs.pairs(nets.len()), "S", "before")?;
        let mean = |v: &mut dyn Iterator<Item = f64>| {
            let all: Vec<f64> = v.collect();
            all.iter().sum::<f64>() / all.len() as f64
        };
        report.push_series("train_error", f, mean(&mut ends.iter().map(|e| e.train_error)));
        report.push_series("test_error", f, mean(&mut ends.iter().map(|e| e.test_error)));
        report.push_series("max_train_error", f, ends.iter().map(|e| e.train_error).fold(0.0, f64::max));
        for &split in &spec.splits {
            for &metric in &spec.metrics {
                let name = format!("barrier-{metric}-{split}");
                let y = mean(&mut rows.iter().filter(|r| r.metric == metric && r.split == split).map(|r| r.barrier));
                report.push_series(&name, f, y);
            }
        }
        report.endpoints.extend(ends);
        report.rows.extend(rows);
    }
    report.aggregate();
    Ok(report)
}

/// Reduced annealing on one trained pair at each step budget, every chain
/// started afresh from the same seed.
pub fn sa_scaling_study(
    spec: &ExperimentSpec,
    dataset: &Dataset,
    step_list: &[usize],
) -> Result<ExperimentReport> {
    spec.validate()?;
    if step_list.is_empty() || step_list.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument("step list must be non-empty and ascending".into()));
    }
    let pair_spec = ExperimentSpec {
        n_seeds: 2,
        ..spec.clone()
    };
    let (width, depth) = (spec.widths[0], spec.depths[0]);
    let members = real_world_set(&pair_spec, dataset, width, depth)?;
    let block = Block {
        spec,
        dataset,
        label: spec.dataset.label(),
        width,
        depth,
    };
    let mut report = ExperimentReport::new("sa-scaling");
    report.endpoints.extend(block.endpoint_rows(&members)?);
    let mut barriers = Vec::with_capacity(step_list.len());
    for &steps in step_list {
        let cfg = SAConfig {
            steps,
            n_models: 2,
            ..spec.sa.clone()
        };
        let res = sa_search_reduced(&members[0].net, &members[1].net, dataset, &cfg)?;
        report.summary.insert("barrier_identity".into(), res.initial_energy);
        report.push_series("barrier", steps as f64, res.final_energy);
        report.rows.push(block.row(
            "S",
            (members[0].seed, members[1].seed),
            &format!("sa-{steps}"),
            cfg.metric,
            cfg.split,
            res.final_energy,
        ));
        barriers.push((steps, res.final_energy));
    }
    for w in barriers.windows(2) {
        report
            .summary
            .insert(format!("ratio_{}_{}", w[0].0, w[1].0), w[0].1 / w[1].1);
    }
    if let (Some(first), Some(last)) = (barriers.first(), barriers.last()) {
        report.summary.insert("ratio_first_last".into(), first.1 / last.1);
    }
    report.aggregate();
    Ok(report)
}

fn histogram(report: &mut ExperimentReport, name: &str, values: &[f64], lo: f64, hi: f64, bins: usize) {
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &v in values {
        let k = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
        counts[k] += 1;
    }
    for (k, c) in counts.into_iter().enumerate() {
        report.push_series(name, lo + (k as f64 + 0.5) * width, c as f64);
    }
}

/// Direct, indirect and post-search barriers over a set of `n_nets`
/// trained networks, with histograms. Uses the first metric and split.
pub fn barrier_histograms(
    spec: &ExperimentSpec,
    dataset: &Dataset,
    n_nets: usize,
) -> Result<ExperimentReport> {
    spec.validate()?;
    if n_nets < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 networks, got {n_nets}")));
    }
    let set_spec = ExperimentSpec {
        n_seeds: n_nets,
        metrics: vec![spec.metrics[0]],
        splits: vec![spec.splits[0]],
        ..spec.clone()
    };
    let (metric, split) = (spec.metrics[0], spec.splits[0]);
    let (width, depth) = (spec.widths[0], spec.depths[0]);
    let members = real_world_set(&set_spec, dataset, width, depth)?;
    let block = Block {
        spec: &set_spec,
        dataset,
        label: spec.dataset.label(),
        width,
        depth,
    };
    let mut report = ExperimentReport::new("histograms");
    report.endpoints.extend(block.endpoint_rows(&members)?);
    let nets: Vec<Network> = members.iter().map(|m| m.net.clone()).collect();
    let seeds: Vec<u64> = members.iter().map(|m| m.seed).collect();

    let matrix: BarrierMatrix = PairwiseEval::compute(&nets, dataset, split)?.matrix(metric);
    let pairs: Vec<(usize, usize)> = if spec.iid {
        let half = n_nets / 2;
        (0..half).map(|k| (k, k + half)).collect()
    } else {
        PairSelection::All.pairs(n_nets)
    };
    let direct: Vec<f64> = pairs.iter().map(|&(i, j)| matrix.get(i, j)).collect();
    let indirect: Vec<f64> = pairs
        .iter()
        .map(|&(i, j)| indirect_barrier(&matrix, i, j))
        .collect::<Result<_>>()?;
    for (k, &(i, j)) in pairs.iter().enumerate() {
        report.rows.push(block.row("S", (seeds[i], seeds[j]), "direct", metric, split, direct[k]));
    }
    for (k, &(i, j)) in pairs.iter().enumerate() {
        report.rows.push(block.row("S", (seeds[i], seeds[j]), "indirect", metric, split, indirect[k]));
    }
    let method = match spec.search {
        SearchMethod::None | SearchMethod::Sa if depth == 1 && width <= spec.brute_width_limit => {
            SearchMethod::Brute
        }
        SearchMethod::None | SearchMethod::Sa => SearchMethod::Fd,
        m => m,
    };
    let search_spec = ExperimentSpec {
        search: method,
        ..set_spec.clone()
    };
    let search_block = Block {
        spec: &search_spec,
        ..block
    };
    let after = search_block.after_search(&nets, &seeds, &pairs, "S")?;
    let after_vals: Vec<f64> = after.iter().map(|r| r.barrier).collect();
    report.rows.extend(after);

    let all = direct.iter().chain(&indirect).chain(&after_vals);
    let lo = all.clone().fold(f64::INFINITY, |a, &b| a.min(b));
    let hi = all.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    histogram(&mut report, "hist-direct", &direct, lo, hi, 20);
    histogram(&mut report, "hist-indirect", &indirect, lo, hi, 20);
    histogram(&mut report, "hist-after", &after_vals, lo, hi, 20);
    report.aggregate();
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnsembleMethod {
    /// Evaluate the plain parameter average.
    NaiveAvg,
    /// Align A to B by functional difference, then average.
    FdAvg,
    /// Average the two networks' logits.
    LogitEnsemble,
}

impl std::fmt::Display for EnsembleMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EnsembleMethod::NaiveAvg => "naive-avg",
            EnsembleMethod::FdAvg => "fd-avg",
            EnsembleMethod::LogitEnsemble => "logit-ensemble",
        })
    }
}

pub fn ensemble_eval(
    a: &Network,
    b: &Network,
    dataset: &Dataset,
    method: EnsembleMethod,
    split: Split,
) -> Result<EvalResult> {
    a.ensure_same_arch(b)?;
    match method {
        EnsembleMethod::NaiveAvg => evaluate(&average(&[a.clone(), b.clone()])?, dataset, split),
        EnsembleMethod::FdAvg => {
            let moved = apply(a, &fd_align(a, b, dataset)?)?;
            evaluate(&average(&[moved, b.clone()])?, dataset, split)
        }
        EnsembleMethod::LogitEnsemble => {
            let s = dataset.split(split);
            let la = forward(a, &s.x)?;
            let lb = forward(b, &s.x)?;
            let mean: Vec<f64> = la.iter().zip(&lb).map(|(x, y)| 0.5 * x + 0.5 * y).collect();
            logits_to_eval(&mean, &s.y, a.num_classes)
        }
    }
}

fn ensemble_report(spec: &ExperimentSpec, dataset: &Dataset) -> Result<ExperimentReport> {
    let pair_spec = ExperimentSpec {
        n_seeds: 2,
        ..spec.clone()
    };
    let (width, depth) = (spec.widths[0], spec.depths[0]);
    let members = real_world_set(&pair_spec, dataset, width, depth)?;
    let block = Block {
        spec,
        dataset,
        label: spec.dataset.label(),
        width,
        depth,
    };
    let mut report = ExperimentReport::new("ensemble");
    report.endpoints.extend(block.endpoint_rows(&members)?);
    for method in [EnsembleMethod::NaiveAvg, EnsembleMethod::FdAvg, EnsembleMethod::LogitEnsemble] {
        for &split in &spec.splits {
            let e = ensemble_eval(&members[0].net, &members[1].net, dataset, method, split)?;
            report.summary.insert(format!("{method}/{split}/loss"), e.loss);
            report.summary.insert(format!("{method}/{split}/error"), e.error);
        }
    }
    Ok(report)
}

/// Dispatch on `spec.kind`. Data are loaded only when the protocol needs
/// them; relative data paths are resolved against `base`.
pub fn run_experiment(spec: &ExperimentSpec, base: Option<&Path>) -> Result<ExperimentReport> {
    spec.validate()?;
    if spec.kind == ExperimentKind::Theorem1 {
        let t = &spec.theorem1;
        let fallback = if t.proof_rate { XiRule::ProofRate } else { XiRule::SqrtPopulation };
        let rule = t.xi.map_or(fallback, XiRule::Fixed);
        return theorem1_check(t.d, &t.h_list, t.trials, t.probes, rule, spec.master_seed);
    }
    let dataset = spec.dataset.load(base)?;
    match spec.kind {
        ExperimentKind::Compare => compare_s_sprime(spec, &dataset),
        ExperimentKind::WidthSweep => width_sweep(spec, &dataset),
        ExperimentKind::DepthSweep => depth_sweep(spec, &dataset),
        ExperimentKind::NoisyLabels => noisy_label_experiment(spec, &dataset, &spec.fractions),
        ExperimentKind::SaScaling => sa_scaling_study(spec, &dataset, &spec.sa_steps),
        ExperimentKind::Histograms => barrier_histograms(spec, &dataset, spec.n_nets),
        ExperimentKind::Ensemble => ensemble_report(spec, &dataset),
        ExperimentKind::Theorem1 => unreachable!("handled above"),
    }
}
