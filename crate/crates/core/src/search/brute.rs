//! Exhaustive search over single-hidden-layer permutations.

use rayon::prelude::*;

use super::SearchResult;
use crate::barrier::{midpoint_excess, Metric};
use crate::data::{Dataset, Split};
use crate::net::{combine2, evaluate, Network};
use crate::perm::{apply, Permutation};
use crate::{Error, Result};

/// Default width limit: 8! = 40320 candidates.
pub const DEFAULT_WIDTH_LIMIT: usize = 8;

/// All permutations of `0..n` in lexicographic order.
pub fn lexicographic_permutations(n: usize) -> Vec<Vec<usize>> {
    let mut cur: Vec<usize> = (0..n).collect();
    let mut out = vec![cur.clone()];
    loop {
        let Some(i) = (1..n).rev().find(|&i| cur[i - 1] < cur[i]) else {
            return out;
        };
        let j = (i..n).rev().find(|&j| cur[j] > cur[i - 1]).expect("successor exists");
        cur.swap(i - 1, j);
        cur[i..].reverse();
        out.push(cur.clone());
    }
}

/// Permute `net1` by every permutation of its single hidden layer and keep
/// the one with the smallest midpoint barrier to `net2` (earliest in
/// lexicographic order on ties).
pub fn brute_force_match(
    net1: &Network,
    net2: &Network,
    dataset: &Dataset,
    width_limit: usize,
    metric: Metric,
    split: Split,
) -> Result<SearchResult> {
    net1.ensure_same_arch(net2)?;
    if net1.hidden_count() != 1 {
        return Err(Error::InvalidArgument(format!(
            "brute-force matching needs one hidden layer, got {}",
            net1.hidden_count()
        )));
    }
    let width = net1.hidden_widths()[0];
    if width > width_limit {
        return Err(Error::WidthAboveLimit {
            width,
            limit: width_limit,
        });
    }
    if dataset.split(split).is_empty() {
        return Err(Error::Empty("brute-force dataset split"));
    }
    let e1 = evaluate(net1, dataset, split)?;
    let e2 = evaluate(net2, dataset, split)?;
    let candidates = lexicographic_permutations(width);
    let energies: Vec<f64> = candidates
        .par_iter()
        .map(|p| {
            let perm = Permutation {
                per_layer: vec![p.clone()],
            };
            let mid = combine2(&apply(net1, &perm)?, 0.5, net2, 0.5)?;
            Ok(midpoint_excess(&e1, &e2, &evaluate(&mid, dataset, split)?, metric))
        })
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (k, e) in energies.iter().enumerate() {
        if *e < energies[best] {
            best = k;
        }
    }
    Ok(SearchResult {
        method: "brute".into(),
        perms: vec![Permutation {
            per_layer: vec![candidates[best].clone()],
        }],
        energy_trace: vec![(0, energies[0]), (candidates.len() - 1, energies[best])],
        initial_energy: energies[0],
        final_energy: energies[best],
        evaluations: candidates.len(),
        accepted: 0,
        seed: 0,
        config: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lexicographic_order() {
        assert_eq!(lexicographic_permutations(1), vec![vec![0]]);
        let p3 = lexicographic_permutations(3);
        assert_eq!(
            p3,
            vec![
                vec![0, 1, 2],
                vec![0, 2, 1],
                vec![1, 0, 2],
                vec![1, 2, 0],
                vec![2, 0, 1],
                vec![2, 1, 0]
            ]
        );
        assert_eq!(lexicographic_permutations(5).len(), 120);
    }
}
