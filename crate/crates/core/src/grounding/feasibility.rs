use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct FeasibilityRepr {
    k: usize,
    entries: Vec<Vec<f64>>,
    adjacency: Vec<[usize; 2]>,
}

/// Mode-transition costs: `0` for staying or moving to an adjacent mode,
/// `-(d - 1)` for modes `d` hops apart in the adjacency graph.
///
/// Modes are 1-based in the adjacency list and 0-based in `entries`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FeasibilityRepr", into = "FeasibilityRepr")]
pub struct FeasibilityMatrix {
    k: usize,
    entries: Vec<Vec<f64>>,
    adjacency: Vec<[usize; 2]>,
}

impl TryFrom<FeasibilityRepr> for FeasibilityMatrix {
    type Error = Error;

    fn try_from(r: FeasibilityRepr) -> Result<Self> {
        let built = build_feasibility(&r.adjacency, r.k)?;
        if built.entries != r.entries {
            return Err(Error::Validation(
                "feasibility entries do not match their adjacency list".into(),
            ));
        }
        Ok(built)
    }
}

impl From<FeasibilityMatrix> for FeasibilityRepr {
    fn from(f: FeasibilityMatrix) -> Self {
        FeasibilityRepr {
            k: f.k,
            entries: f.entries,
            adjacency: f.adjacency,
        }
    }
}

/// Breadth-first shortest paths over the undirected adjacency list.
pub fn build_feasibility(adjacency: &[[usize; 2]], k: usize) -> Result<FeasibilityMatrix> {
    if k < 1 {
        return Err(Error::Input("feasibility matrix needs at least one mode".into()));
    }
    let mut neighbours = vec![Vec::new(); k];
    for &[a, b] in adjacency {
        if a < 1 || b < 1 || a > k || b > k {
            return Err(Error::Input(format!("adjacency pair ({a}, {b}) outside 1..={k}")));
        }
        neighbours[a - 1].push(b - 1);
        neighbours[b - 1].push(a - 1);
    }
    let mut entries = vec![vec![0.0; k]; k];
    for src in 0..k {
        let mut dist = vec![usize::MAX; k];
        dist[src] = 0;
        let mut queue = VecDeque::from([src]);
        while let Some(u) = queue.pop_front() {
            for &v in &neighbours[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        for dst in 0..k {
            match dist[dst] {
                usize::MAX => {
                    return Err(Error::Input(format!(
                        "mode {} is unreachable from mode {}",
                        dst + 1,
                        src + 1
                    )))
                }
                0 => {}
                d => entries[src][dst] = -((d - 1) as f64),
            }
        }
    }
    Ok(FeasibilityMatrix {
        k,
        entries,
        adjacency: adjacency.to_vec(),
    })
}

impl FeasibilityMatrix {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn adjacency(&self) -> &[[usize; 2]] {
        &self.adjacency
    }

    /// Entry for 1-based modes `from -> to`.
    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.entries[from - 1][to - 1]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.entries
    }

    pub fn min_entry(&self) -> f64 {
        self.entries
            .iter()
            .flatten()
            .cloned()
            .fold(0.0, f64::min)
    }

    /// `F b` for a belief `b`.
    pub fn apply(&self, b: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(&self.entries) {
            *o = row.iter().zip(b).map(|(f, x)| f * x).sum();
        }
    }

    /// `F^T b` for a belief `b`.
    pub fn apply_transposed(&self, b: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = self.entries.iter().zip(b).map(|(row, x)| row[j] * x).sum();
        }
    }

    /// True when every consecutive pair of 1-based modes costs nothing.
    pub fn sequence_feasible(&self, modes: &[usize]) -> bool {
        modes.windows(2).all(|w| self.get(w[0], w[1]) == 0.0)
    }
}

/// Transition feasibility score `b_t^T F b_next`.
pub fn transition_score(b_t: &[f64], f: &FeasibilityMatrix, b_next: &[f64]) -> f64 {
    f.entries
        .iter()
        .zip(b_t)
        .map(|(row, bi)| bi * row.iter().zip(b_next).map(|(fij, bj)| fij * bj).sum::<f64>())
        .sum()
}

/// Collapses runs of repeated modes.
pub fn reduce_runs(modes: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for &m in modes {
        if out.last() != Some(&m) {
            out.push(m);
        }
    }
    out
}
