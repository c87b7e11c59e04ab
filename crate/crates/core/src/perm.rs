//! Hidden-unit permutations and their action on networks.
//!
//! A [`Permutation`] holds one index vector per hidden layer, in gather form:
//! after [`apply`], hidden unit `r` of layer `i` is the unit that used to sit
//! at `per_layer[i][r]`. Applying a permutation only moves parameters; it
//! never combines them, so the permuted network computes bit-identical
//! outputs under the exact forward pass.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::net::{LayerKind, Network};
use crate::seed;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Permutation {
    pub per_layer: Vec<Vec<usize>>,
}

impl Permutation {
    pub fn new(per_layer: Vec<Vec<usize>>) -> Result<Self> {
        let p = Permutation { per_layer };
        p.validate()?;
        Ok(p)
    }

    /// Identity permutations for the given layer widths.
    pub fn identity_for(widths: &[usize]) -> Self {
        Permutation {
            per_layer: widths.iter().map(|&w| (0..w).collect()).collect(),
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        self.per_layer.iter().map(Vec::len).collect()
    }

    pub fn is_identity(&self) -> bool {
        self.per_layer
            .iter()
            .all(|p| p.iter().enumerate().all(|(i, &v)| i == v))
    }

    /// Every layer vector must be a bijection on `0..len`.
    pub fn validate(&self) -> Result<()> {
        for (li, p) in self.per_layer.iter().enumerate() {
            if !is_bijection(p) {
                return Err(Error::InvalidArgument(format!(
                    "layer {li} permutation is not a bijection"
                )));
            }
        }
        Ok(())
    }

    pub fn check_for(&self, net: &Network) -> Result<()> {
        let widths = net.hidden_widths();
        if self.widths() != widths {
            return Err(Error::ShapeMismatch(format!(
                "permutation widths {:?} vs network hidden widths {widths:?}",
                self.widths()
            )));
        }
        self.validate()
    }
}

pub(crate) fn is_bijection(p: &[usize]) -> bool {
    let mut seen = vec![false; p.len()];
    for &v in p {
        if v >= p.len() || seen[v] {
            return false;
        }
        seen[v] = true;
    }
    true
}

pub fn identity_perm(net: &Network) -> Permutation {
    Permutation::identity_for(&net.hidden_widths())
}

/// Independent uniform shuffles per hidden layer.
pub fn random_perm(net: &Network, seed: u64) -> Permutation {
    let mut rng = seed::rng(seed);
    let per_layer = net
        .hidden_widths()
        .into_iter()
        .map(|w| {
            let mut v: Vec<usize> = (0..w).collect();
            v.shuffle(&mut rng);
            v
        })
        .collect();
    Permutation { per_layer }
}

fn gather<T: Copy>(src: &[T], block: usize, order: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for &o in order {
        out.extend_from_slice(&src[o * block..(o + 1) * block]);
    }
    out
}

/// Permute hidden units: rows (output units / channels) of layer `i` follow
/// `P_i`, inputs of layer `i + 1` follow `P_i` as well. A dense layer reading
/// a convolutional feature map moves each channel's spatial block as a unit.
pub fn apply(net: &Network, perm: &Permutation) -> Result<Network> {
    perm.check_for(net)?;
    let mut out = net.clone();
    let hidden = net.hidden_count();
    for (li, layer) in out.layers.iter_mut().enumerate() {
        let fan = layer.fan_in();
        if li < hidden {
            let p = &perm.per_layer[li];
            layer.weight = gather(&layer.weight, fan, p);
            if let Some(b) = &mut layer.bias {
                *b = gather(b, 1, p);
            }
        }
        if li > 0 {
            let p = &perm.per_layer[li - 1];
            // columns of the input axis: one column group per previous unit
            let group = match layer.kind {
                LayerKind::Dense => layer.in_dim / p.len(),
                LayerKind::Conv2d { kernel, .. } => kernel * kernel,
            };
            let rows = layer.out_dim;
            let mut w = Vec::with_capacity(layer.weight.len());
            for r in 0..rows {
                let row = &layer.weight[r * fan..(r + 1) * fan];
                w.extend(gather(row, group, p));
            }
            layer.weight = w;
        }
    }
    Ok(out)
}

/// `apply(net, compose(p1, p2)) == apply(apply(net, p2), p1)`.
pub fn compose(p1: &Permutation, p2: &Permutation) -> Result<Permutation> {
    if p1.widths() != p2.widths() {
        return Err(Error::ShapeMismatch(format!(
            "compose widths {:?} vs {:?}",
            p1.widths(),
            p2.widths()
        )));
    }
    let per_layer = p1
        .per_layer
        .iter()
        .zip(&p2.per_layer)
        .map(|(a, b)| a.iter().map(|&i| b[i]).collect())
        .collect();
    Ok(Permutation { per_layer })
}

pub fn invert(p: &Permutation) -> Permutation {
    let per_layer = p
        .per_layer
        .iter()
        .map(|v| {
            let mut inv = vec![0; v.len()];
            for (i, &j) in v.iter().enumerate() {
                inv[j] = i;
            }
            inv
        })
        .collect();
    Permutation { per_layer }
}

/// `swaps_per_layer` uniformly chosen transpositions in every layer
/// (`a == b` allowed, so a swap may be a no-op).
pub fn transposition_move(perm: &Permutation, swaps_per_layer: usize, seed: u64) -> Result<Permutation> {
    let mut rng = seed::rng(seed);
    let mut out = perm.clone();
    transposition_move_in_place(&mut out, swaps_per_layer, &mut rng)?;
    Ok(out)
}

pub(crate) fn transposition_move_in_place(
    perm: &mut Permutation,
    swaps_per_layer: usize,
    rng: &mut seed::Rng,
) -> Result<()> {
    if swaps_per_layer == 0 {
        return Err(Error::InvalidArgument("swaps_per_layer must be >= 1".into()));
    }
    for layer in &mut perm.per_layer {
        let w = layer.len();
        if w == 0 {
            continue;
        }
        for _ in 0..swaps_per_layer {
            let a = rng.random_range(0..w);
            let b = rng.random_range(0..w);
            layer.swap(a, b);
        }
    }
    Ok(())
}
