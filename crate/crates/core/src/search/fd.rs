//! Functional-difference neuron matching.
//!
//! Neurons `i` of A and `j` of B cost
//! `1/2 * (1/h_i + 1/h_j)^-1 * |w_i - w_j|^2`, where `w` is the incoming
//! weight vector with the bias appended and `h` a per-neuron curvature.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::net::{mean_sq_activations, Network};
use crate::perm::{apply, Permutation};
use crate::{Error, Result};

/// Lower bound applied to per-neuron curvatures.
pub const CURVATURE_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchCostMatrix {
    pub h: usize,
    /// Row-major, rows index neurons of A, columns neurons of B.
    pub costs: Vec<f64>,
    pub curvature_a: Vec<f64>,
    pub curvature_b: Vec<f64>,
    /// Neurons whose curvature was raised to [`CURVATURE_FLOOR`].
    pub clamped_a: Vec<usize>,
    pub clamped_b: Vec<usize>,
}

impl MatchCostMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let h = rows.len();
        if rows.iter().any(|r| r.len() != h) {
            return Err(Error::ShapeMismatch("cost matrix must be square".into()));
        }
        Ok(MatchCostMatrix {
            h,
            costs: rows.concat(),
            curvature_a: vec![1.0; h],
            curvature_b: vec![1.0; h],
            clamped_a: Vec::new(),
            clamped_b: Vec::new(),
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.costs[i * self.h + j]
    }
}

fn incoming(net: &Network, layer: usize) -> Vec<Vec<f64>> {
    let l = &net.layers[layer];
    let fan = l.fan_in();
    (0..l.out_dim)
        .map(|r| {
            let mut w: Vec<f64> = l.weight[r * fan..(r + 1) * fan]
                .iter()
                .map(|&v| f64::from(v))
                .collect();
            if let Some(b) = &l.bias {
                w.push(f64::from(b[r]));
            }
            w
        })
        .collect()
}

fn floored(h: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut clamped = Vec::new();
    let v = h
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            if x < CURVATURE_FLOOR || x.is_nan() {
                clamped.push(i);
                CURVATURE_FLOOR
            } else {
                x
            }
        })
        .collect();
    (v, clamped)
}

fn check_layer(a: &Network, b: &Network, layer: usize) -> Result<()> {
    a.ensure_same_arch(b)?;
    if layer >= a.hidden_count() {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} is not hidden (network has {} hidden layers)",
            a.hidden_count()
        )));
    }
    Ok(())
}

/// Costs for hidden layer `layer` from caller-supplied curvatures.
pub fn fd_costs_with_curvature(
    a: &Network,
    b: &Network,
    layer: usize,
    curvature_a: &[f64],
    curvature_b: &[f64],
) -> Result<MatchCostMatrix> {
    check_layer(a, b, layer)?;
    let h = a.layers[layer].out_dim;
    if curvature_a.len() != h || curvature_b.len() != h {
        return Err(Error::ShapeMismatch(format!(
            "curvatures of length {} and {} for a layer of width {h}",
            curvature_a.len(),
            curvature_b.len()
        )));
    }
    let (ha, clamped_a) = floored(curvature_a);
    let (hb, clamped_b) = floored(curvature_b);
    let wa = incoming(a, layer);
    let wb = incoming(b, layer);
    let mut costs = Vec::with_capacity(h * h);
    for i in 0..h {
        for j in 0..h {
            let d2: f64 = wa[i].iter().zip(&wb[j]).map(|(x, y)| (x - y) * (x - y)).sum();
            let harmonic = ha[i] * hb[j] / (ha[i] + hb[j]);
            costs.push(0.5 * harmonic * d2);
        }
    }
    Ok(MatchCostMatrix {
        h,
        costs,
        curvature_a: ha,
        curvature_b: hb,
        clamped_a,
        clamped_b,
    })
}

/// Costs for hidden layer `layer`, curvature taken as each neuron's mean
/// squared post-activation over the training split.
pub fn fd_costs(a: &Network, b: &Network, dataset: &Dataset, layer: usize) -> Result<MatchCostMatrix> {
    check_layer(a, b, layer)?;
    let x = &dataset.split(Split::Train).x;
    let ha = mean_sq_activations(a, x)?;
    let hb = mean_sq_activations(b, x)?;
    fd_costs_with_curvature(a, b, layer, &ha[layer], &hb[layer])
}

/// Greedy assignment: take the smallest remaining entry (ties by row, then
/// column), retire its row and column, repeat. Returns `p` with `p[j] = i`
/// for each matched pair (row `i`, column `j`).
pub fn greedy_match(costs: &MatchCostMatrix) -> Vec<usize> {
    let h = costs.h;
    let mut order: Vec<usize> = (0..h * h).collect();
    order.sort_by(|&x, &y| costs.costs[x].total_cmp(&costs.costs[y]).then(x.cmp(&y)));
    let mut row_used = vec![false; h];
    let mut perm = vec![usize::MAX; h];
    let mut left = h;
    for idx in order {
        if left == 0 {
            break;
        }
        let (i, j) = (idx / h, idx % h);
        if row_used[i] || perm[j] != usize::MAX {
            continue;
        }
        row_used[i] = true;
        perm[j] = i;
        left -= 1;
    }
    perm
}

/// Total cost of the pairing `p[j] = i`.
pub fn matching_cost(costs: &MatchCostMatrix, perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(j, &i)| costs.get(i, j)).sum()
}

/// Layer by layer, match A's neurons to B's and apply the matching before
/// the next layer's costs are computed. Returns the permutation for A.
pub fn fd_align(a: &Network, b: &Network, dataset: &Dataset) -> Result<Permutation> {
    a.ensure_same_arch(b)?;
    let x = &dataset.split(Split::Train).x;
    if x.is_empty() {
        return Err(Error::Empty("functional-difference training split"));
    }
    // permuting earlier layers leaves a layer's own activations unchanged
    let ha = mean_sq_activations(a, x)?;
    let hb = mean_sq_activations(b, x)?;
    let widths = a.hidden_widths();
    let mut per_layer: Vec<Vec<usize>> = widths.iter().map(|&w| (0..w).collect()).collect();
    let mut current = a.clone();
    for layer in 0..widths.len() {
        let costs = fd_costs_with_curvature(&current, b, layer, &ha[layer], &hb[layer])?;
        let p = greedy_match(&costs);
        let mut step = Permutation::identity_for(&widths);
        step.per_layer[layer] = p.clone();
        current = apply(&current, &step)?;
        per_layer[layer] = p;
    }
    Permutation::new(per_layer)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn greedy_hand_cases() {
        let id = MatchCostMatrix::from_rows(&[vec![0.0, 9.0], vec![9.0, 0.0]]).unwrap();
        assert_eq!(greedy_match(&id), vec![0, 1]);
        let sw = MatchCostMatrix::from_rows(&[vec![9.0, 0.0], vec![0.0, 9.0]]).unwrap();
        assert_eq!(greedy_match(&sw), vec![1, 0]);
        let ties = MatchCostMatrix::from_rows(&[vec![1.0; 3], vec![1.0; 3], vec![1.0; 3]]).unwrap();
        assert_eq!(greedy_match(&ties), vec![0, 1, 2]);
    }
}
