//! Permutation search: simulated annealing, functional-difference matching,
//! grid-bucket matching and exhaustive enumeration.
//!
//! Every routine returns permutations in the gather form used by
//! [`crate::perm::apply`].

mod anneal;
mod brute;
mod fd;
mod grid;

pub use anneal::{accept, sa_search, sa_search_reduced, temperature, Objective, SAConfig};
pub use brute::{brute_force_match, lexicographic_permutations, DEFAULT_WIDTH_LIMIT};
pub use fd::{
    fd_align, fd_costs, fd_costs_with_curvature, greedy_match, matching_cost, MatchCostMatrix,
    CURVATURE_FLOOR,
};
pub use grid::{default_xi, grid_align, grid_bucket_match, GridMatch, Pairing};

use serde::{Deserialize, Serialize};

use crate::perm::Permutation;

/// Outcome of a permutation search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub method: String,
    /// One permutation per searched model.
    pub perms: Vec<Permutation>,
    /// `(step, best energy so far)`, recorded at step 0, at every
    /// improvement and at the last step.
    pub energy_trace: Vec<(usize, f64)>,
    pub initial_energy: f64,
    pub final_energy: f64,
    pub evaluations: usize,
    pub accepted: usize,
    pub seed: u64,
    pub config: Option<SAConfig>,
}

impl SearchResult {
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("step,best_energy\n");
        for (step, e) in &self.energy_trace {
            s.push_str(&format!("{step},{e}\n"));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("search results serialize")
    }
}
