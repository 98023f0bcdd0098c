//! Ground-truth tracer field from an absorbing random walk on the lattice.
//!
//! Rim nodes absorb. Every other node passes a walker to one of its open
//! neighbours with equal probability. The mean concentration at node `j` for
//! a source at node `i` is `A0 * F[i][j]` with `F = (I - Q)^-1`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::FieldError;
use crate::lattice::{EnvironmentMap, NodeCoord};

/// State of a node in the canonical chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainState {
    Absorbing(usize),
    Transient(usize),
}

/// Transition matrix in canonical form, absorbing states first.
///
/// Nodes that cannot reach the rim over open links (possible once the map
/// evolves) are listed in `trapped` and handled as absorbing: no walker from
/// the rim's component can ever enter them.
#[derive(Debug, Clone)]
pub struct CanonicalChain {
    pub absorbing: Vec<usize>,
    pub transient: Vec<usize>,
    pub trapped: Vec<usize>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub node_state: Vec<ChainState>,
}

impl CanonicalChain {
    pub fn build(map: &EnvironmentMap) -> Self {
        let grid = map.grid();
        let n = grid.node_count();

        // Nodes connected to the rim, by multi-source BFS from every rim node.
        let mut reaches_rim = vec![false; n];
        let mut queue: std::collections::VecDeque<usize> = (0..n).filter(|&i| grid.is_boundary(i)).collect();
        for &i in &queue {
            reaches_rim[i] = true;
        }
        while let Some(u) = queue.pop_front() {
            for v in map.open_neighbours(u) {
                if !reaches_rim[v] {
                    reaches_rim[v] = true;
                    queue.push_back(v);
                }
            }
        }

        let mut absorbing = Vec::new();
        let mut transient = Vec::new();
        let mut trapped = Vec::new();
        for (i, &reaches) in reaches_rim.iter().enumerate() {
            if grid.is_boundary(i) {
                absorbing.push(i);
            } else if !reaches {
                trapped.push(i);
                absorbing.push(i);
            } else {
                transient.push(i);
            }
        }
        let mut node_state = vec![ChainState::Absorbing(0); n];
        for (s, &i) in absorbing.iter().enumerate() {
            node_state[i] = ChainState::Absorbing(s);
        }
        for (s, &i) in transient.iter().enumerate() {
            node_state[i] = ChainState::Transient(s);
        }

        let t = transient.len();
        let mut q = DMatrix::zeros(t, t);
        let mut r = DMatrix::zeros(t, absorbing.len());
        for (row, &i) in transient.iter().enumerate() {
            let deg = map.degree(i);
            // reaches_rim guarantees deg >= 1 for a transient node
            let p = 1.0 / deg as f64;
            for j in map.open_neighbours(i) {
                match node_state[j] {
                    ChainState::Transient(col) => q[(row, col)] += p,
                    ChainState::Absorbing(col) => r[(row, col)] += p,
                }
            }
        }

        Self {
            absorbing,
            transient,
            trapped,
            q,
            r,
            node_state,
        }
    }

    pub fn transient_count(&self) -> usize {
        self.transient.len()
    }

    pub fn absorbing_count(&self) -> usize {
        self.absorbing.len()
    }

    /// Row `source` of the fundamental matrix, i.e. expected visits to each
    /// transient state. Solves `(I - Q)^T x = e_source` with a dense LU.
    pub fn fundamental_row(&self, source_state: usize) -> Result<DVector<f64>, FieldError> {
        let t = self.transient_count();
        let mut system = DMatrix::identity(t, t) - &self.q;
        system.transpose_mut();
        let mut rhs = DVector::zeros(t);
        rhs[source_state] = 1.0;
        system.lu().solve(&rhs).ok_or(FieldError::Singular)
    }
}

/// Mean tracer concentration at every grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationField {
    pub values: Vec<f64>,
    pub source: NodeCoord,
    pub release_rate: f64,
}

#[derive(Serialize)]
struct FieldRow {
    x: i32,
    y: i32,
    theta: f64,
}

impl ConcentrationField {
    /// Expected counts per sampling interval at `node`.
    pub fn value(&self, node: usize) -> f64 {
        self.values[node]
    }

    /// CSV rows `x,y,theta` in grid node order.
    pub fn write_csv<W: Write>(&self, map: &EnvironmentMap, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        for (i, &theta) in self.values.iter().enumerate() {
            let c = map.grid().node(i);
            w.serialize(FieldRow { x: c.x, y: c.y, theta })?;
        }
        w.flush()?;
        Ok(())
    }
}

fn source_state(chain: &CanonicalChain, map: &EnvironmentMap, source: NodeCoord) -> Result<(usize, usize), FieldError> {
    let node = map.grid().node_index(source).ok_or(FieldError::SourceOutside(source))?;
    match chain.node_state[node] {
        ChainState::Transient(s) => Ok((node, s)),
        ChainState::Absorbing(_) if map.grid().is_boundary(node) => Err(FieldError::SourceOnBoundary(source)),
        ChainState::Absorbing(_) => Err(FieldError::SourceTrapped(source)),
    }
}

/// `theta_j = A0 * F[source][j]` on transient nodes, zero elsewhere.
pub fn mean_concentration_field(
    chain: &CanonicalChain,
    map: &EnvironmentMap,
    source: NodeCoord,
    release_rate: f64,
) -> Result<ConcentrationField, FieldError> {
    if release_rate.is_nan() || release_rate <= 0.0 {
        return Err(FieldError::InvalidReleaseRate(release_rate));
    }
    let (_, s) = source_state(chain, map, source)?;
    let row = chain.fundamental_row(s)?;
    let mut values = vec![0.0; map.grid().node_count()];
    for (state, &node) in chain.transient.iter().enumerate() {
        values[node] = release_rate * row[state];
    }
    Ok(ConcentrationField {
        values,
        source,
        release_rate,
    })
}

const WALKS_PER_BATCH: u64 = 10_000;

/// Mean number of visits to each node by walkers released at `source` and
/// absorbed at the rim, estimated by simulation. The starting node counts as
/// one visit. Batches run in parallel on independent ChaCha streams, so the
/// result depends only on `seed`.
pub fn random_walk_oracle(
    map: &EnvironmentMap,
    source: NodeCoord,
    walks: u64,
    seed: u64,
) -> Result<Vec<f64>, FieldError> {
    let chain = CanonicalChain::build(map);
    let (start, _) = source_state(&chain, map, source)?;
    let n = map.grid().node_count();
    let neighbours: Vec<Vec<usize>> = (0..n).map(|i| map.open_neighbours(i).collect()).collect();
    let absorbing: Vec<bool> = chain
        .node_state
        .iter()
        .map(|s| matches!(s, ChainState::Absorbing(_)))
        .collect();

    let batches = walks.div_ceil(WALKS_PER_BATCH);
    let counts: Vec<Vec<u64>> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b);
            let in_batch = WALKS_PER_BATCH.min(walks - b * WALKS_PER_BATCH);
            let mut visits = vec![0u64; n];
            for _ in 0..in_batch {
                let mut at = start;
                while !absorbing[at] {
                    visits[at] += 1;
                    let nb = &neighbours[at];
                    at = nb[rng.random_range(0..nb.len())];
                }
            }
            visits
        })
        .collect();

    let mut total = vec![0u64; n];
    for batch in &counts {
        for (t, c) in total.iter_mut().zip(batch) {
            *t += c;
        }
    }
    Ok(total.into_iter().map(|c| c as f64 / walks as f64).collect())
}
