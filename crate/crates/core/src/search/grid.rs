//! Grid-bucket matching of weight rows.
//!
//! Rows of `U` and `U'` (entries in `[-1/sqrt(d), 1/sqrt(d)]`) are assigned to
//! the nearest point of a regular grid with spacing `2 * xi`. Rows sharing a
//! cell are paired; surplus rows of either matrix go to leftover sets that
//! are paired among themselves. Only occupied cells are ever stored.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::net::Network;
use crate::perm::{apply, Permutation};
use crate::seed::{self, Rng};
use crate::{Error, Result};

/// How rows sharing a cell (and the leftover rows) are paired.
#[derive(Clone, Copy, Debug)]
pub enum Pairing<'a> {
    /// Seeded uniform pairing.
    Random,
    /// Pair in order of a per-row key; the larger side is thinned at evenly
    /// spaced ranks.
    Keyed {
        keys_u: &'a [f64],
        keys_u_prime: &'a [f64],
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridMatch {
    /// `perm[i]` is the row of `U'` matched to row `i` of `U`.
    pub perm: Vec<usize>,
    /// Size of the leftover set `I` (equal to that of `I'`).
    pub leftovers: usize,
    /// Spacing actually used; below the requested one when it was snapped.
    pub xi: f64,
    pub cells_per_dim: usize,
    pub snapped: bool,
    pub occupied_cells: usize,
    /// Rows of `U` that were paired inside a shared cell.
    pub in_cell: Vec<bool>,
}

fn cell_of(row: &[f64], radius: f64, xi: f64, m: usize) -> Result<Vec<u32>> {
    row.iter()
        .map(|&x| {
            if !x.is_finite() || x.abs() > radius * (1.0 + 1e-6) {
                return Err(Error::InvalidArgument(format!(
                    "grid entry {x} outside [-{radius}, {radius}]"
                )));
            }
            let t = (x + radius) / (2.0 * xi);
            let mut k = t.floor();
            if k == t && k > 0.0 {
                k -= 1.0;
            }
            Ok((k.max(0.0) as usize).min(m - 1) as u32)
        })
        .collect()
}

fn bucket(rows: &[f64], d: usize, radius: f64, xi: f64, m: usize) -> Result<BTreeMap<Vec<u32>, Vec<usize>>> {
    let mut cells: BTreeMap<Vec<u32>, Vec<usize>> = BTreeMap::new();
    for (i, row) in rows.chunks(d).enumerate() {
        cells.entry(cell_of(row, radius, xi, m)?).or_default().push(i);
    }
    Ok(cells)
}

fn sort_by_key(rows: &mut [usize], keys: &[f64]) {
    rows.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]).then(a.cmp(&b)));
}

/// Evenly spaced ranks: `count` of `0..n`.
fn spread(n: usize, count: usize) -> Vec<usize> {
    (0..count).map(|k| (2 * k + 1) * n / (2 * count)).collect()
}

/// Pair `a` with `b`; returns pairs and the unpaired rows of each side.
fn pair_up(
    mut a: Vec<usize>,
    mut b: Vec<usize>,
    pairing: &Pairing<'_>,
    rng: &mut Rng,
) -> (Vec<(usize, usize)>, Vec<usize>, Vec<usize>) {
    match pairing {
        Pairing::Random => {
            a.shuffle(rng);
            b.shuffle(rng);
            let n = a.len().min(b.len());
            let pairs = a.iter().zip(&b).map(|(&x, &y)| (x, y)).collect();
            (pairs, a[n..].to_vec(), b[n..].to_vec())
        }
        Pairing::Keyed {
            keys_u,
            keys_u_prime,
        } => {
            sort_by_key(&mut a, keys_u);
            sort_by_key(&mut b, keys_u_prime);
            let thin = |v: Vec<usize>, n: usize| -> (Vec<usize>, Vec<usize>) {
                if v.len() == n {
                    return (v, Vec::new());
                }
                let keep = spread(v.len(), n);
                let mut kept = Vec::with_capacity(n);
                let mut rest = Vec::with_capacity(v.len() - n);
                let mut next = 0;
                for (r, x) in v.into_iter().enumerate() {
                    if next < keep.len() && keep[next] == r {
                        kept.push(x);
                        next += 1;
                    } else {
                        rest.push(x);
                    }
                }
                (kept, rest)
            };
            let n = a.len().min(b.len());
            let (ka, ra) = thin(a, n);
            let (kb, rb) = thin(b, n);
            let pairs = ka.into_iter().zip(kb).collect();
            (pairs, ra, rb)
        }
    }
}

/// Match the `h` rows of `u_prime` to those of `u` (both `h x d`,
/// row-major) through a grid of spacing `xi`.
///
/// The grid has `1 / (xi * sqrt(d))` points per axis; when that is not an
/// integer, `xi` is reduced to the next spacing for which it is, and the
/// result is marked as snapped. Each coordinate goes to its nearest grid
/// point, exact ties to the lower one.
pub fn grid_bucket_match(
    u: &[f64],
    u_prime: &[f64],
    d: usize,
    xi: f64,
    pairing: Pairing<'_>,
    seed: u64,
) -> Result<GridMatch> {
    if d == 0 || !u.len().is_multiple_of(d) || u.len() != u_prime.len() || u.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "grid matching needs two h x {d} matrices, got {} and {} entries",
            u.len(),
            u_prime.len()
        )));
    }
    if !(xi.is_finite() && xi > 0.0) {
        return Err(Error::InvalidArgument(format!("xi must be positive, got {xi}")));
    }
    let h = u.len() / d;
    if let Pairing::Keyed {
        keys_u,
        keys_u_prime,
    } = &pairing
    {
        if keys_u.len() != h || keys_u_prime.len() != h {
            return Err(Error::ShapeMismatch("pairing keys must have one entry per row".into()));
        }
    }
    let radius = 1.0 / (d as f64).sqrt();
    let ratio = radius / xi;
    let nearest = ratio.round();
    let (m, snapped) = if nearest >= 1.0 && (ratio - nearest).abs() <= 1e-9 * ratio {
        (nearest as usize, false)
    } else {
        (ratio.ceil().max(1.0) as usize, true)
    };
    if m > u32::MAX as usize {
        return Err(Error::InvalidArgument(format!("xi {xi} gives too many cells per axis")));
    }
    let xi = radius / m as f64;
    let cells_u = bucket(u, d, radius, xi, m)?;
    let cells_v = bucket(u_prime, d, radius, xi, m)?;
    let mut keys: Vec<&Vec<u32>> = cells_u.keys().chain(cells_v.keys()).collect();
    keys.sort();
    keys.dedup();

    let mut rng = seed::rng(seed);
    let mut perm = vec![usize::MAX; h];
    let mut in_cell = vec![false; h];
    let mut left_u = Vec::new();
    let mut left_v = Vec::new();
    for key in &keys {
        let a = cells_u.get(*key).cloned().unwrap_or_default();
        let b = cells_v.get(*key).cloned().unwrap_or_default();
        let (pairs, ra, rb) = pair_up(a, b, &pairing, &mut rng);
        for (i, j) in pairs {
            perm[i] = j;
            in_cell[i] = true;
        }
        left_u.extend(ra);
        left_v.extend(rb);
    }
    let leftovers = left_u.len();
    left_u.sort_unstable();
    left_v.sort_unstable();
    let (pairs, _, _) = pair_up(left_u, left_v, &pairing, &mut rng);
    for (i, j) in pairs {
        perm[i] = j;
    }
    debug_assert!(crate::perm::is_bijection(&perm));
    Ok(GridMatch {
        perm,
        leftovers,
        xi,
        cells_per_dim: m,
        snapped,
        occupied_cells: keys.len(),
        in_cell,
    })
}

/// Spacing giving `round(h^(1/(2d)))` grid points per axis (at least one),
/// so that about `sqrt(h)` rows share a cell.
pub fn default_xi(h: usize, d: usize) -> f64 {
    let m = (h as f64).powf(1.0 / (2.0 * d as f64)).round().max(1.0);
    1.0 / (m * (d as f64).sqrt())
}

/// Layer by layer, grid-match the incoming weight rows (bias appended) of
/// A's hidden units to B's. Rows are rescaled by a common factor so that
/// both fit the grid box; the spacing follows [`default_xi`].
pub fn grid_align(a: &Network, b: &Network, seed: u64) -> Result<Permutation> {
    a.ensure_same_arch(b)?;
    let widths = a.hidden_widths();
    let mut per_layer: Vec<Vec<usize>> = widths.iter().map(|&w| (0..w).collect()).collect();
    let mut current = a.clone();
    let rows = |net: &Network, l: usize| -> Vec<f64> {
        let layer = &net.layers[l];
        let fan = layer.fan_in();
        let mut out = Vec::with_capacity(layer.out_dim * (fan + 1));
        for r in 0..layer.out_dim {
            out.extend(layer.weight[r * fan..(r + 1) * fan].iter().map(|&v| f64::from(v)));
            out.push(layer.bias.as_ref().map_or(0.0, |bias| f64::from(bias[r])));
        }
        out
    };
    for l in 0..widths.len() {
        let d = current.layers[l].fan_in() + 1;
        let mut ua = rows(&current, l);
        let mut ub = rows(b, l);
        let max = ua.iter().chain(&ub).fold(0.0f64, |m, v| m.max(v.abs()));
        if max > 0.0 {
            let scale = 1.0 / ((d as f64).sqrt() * max);
            ua.iter_mut().chain(ub.iter_mut()).for_each(|v| *v *= scale);
        }
        // match rows of A (as U') onto rows of B (as U)
        let g = grid_bucket_match(
            &ub,
            &ua,
            d,
            default_xi(widths[l], d),
            Pairing::Random,
            seed::derive(seed, "grid-layer", l as u64),
        )?;
        let mut step = Permutation::identity_for(&widths);
        step.per_layer[l] = g.perm.clone();
        current = apply(&current, &step)?;
        per_layer[l] = g.perm;
    }
    Permutation::new(per_layer)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_rows_one_dimension() {
        let g = grid_bucket_match(&[-0.4, 0.4], &[0.45, -0.45], 1, 0.5, Pairing::Random, 0).unwrap();
        assert_eq!(g.perm, vec![1, 0]);
        assert_eq!(g.leftovers, 0);
        assert!(!g.snapped);
        assert_eq!(g.cells_per_dim, 2);
    }

    #[test]
    fn boundary_ties_go_low() {
        // boundary between the two cells sits at 0
        let g = grid_bucket_match(&[0.0, 0.9], &[-0.1, 0.9], 1, 0.5, Pairing::Random, 3).unwrap();
        assert_eq!(g.perm, vec![0, 1]);
        assert_eq!(g.leftovers, 0);
    }

    #[test]
    fn snapping_reduces_xi() {
        let g = grid_bucket_match(&[0.1], &[0.2], 1, 0.3, Pairing::Random, 0).unwrap();
        assert!(g.snapped);
        assert_eq!(g.cells_per_dim, 4);
        assert!((g.xi - 0.25).abs() < 1e-15);
    }

    #[test]
    fn spills_are_counted() {
        let g = grid_bucket_match(&[-0.9, -0.8], &[0.8, -0.9], 1, 0.5, Pairing::Random, 0).unwrap();
        assert_eq!(g.leftovers, 1);
        assert_eq!(g.occupied_cells, 2);
    }

    #[test]
    fn default_xi_population() {
        // 2^8 rows in 2 dimensions: 4 points per axis, 16 cells
        let xi = default_xi(256, 2);
        assert!((1.0 / (xi * 2f64.sqrt()) - 4.0).abs() < 1e-12);
        assert!((default_xi(1, 3) - 1.0 / 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(grid_bucket_match(&[1.5], &[0.0], 1, 0.5, Pairing::Random, 0).is_err());
        assert!(grid_bucket_match(&[0.5], &[0.0], 1, 0.0, Pairing::Random, 0).is_err());
    }

    #[test]
    fn keyed_pairing_follows_keys() {
        let u = [0.1, 0.2, 0.3];
        let up = [0.15, 0.25, 0.35];
        let g = grid_bucket_match(
            &u,
            &up,
            1,
            1.0,
            Pairing::Keyed {
                keys_u: &[3.0, 1.0, 2.0],
                keys_u_prime: &[1.0, 2.0, 3.0],
            },
            0,
        )
        .unwrap();
        assert_eq!(g.perm, vec![2, 0, 1]);
    }
}
