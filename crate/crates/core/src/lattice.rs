//! Square lattice over a circular search domain.
//!
//! The complete grid holds every node `(x, y)` with `x² + y² < (R0 + 1)²`
//! and every unit link between two such nodes. For `R0 = 9` this gives the
//! 305-node, 572-link lattice with the entry node `(9, -4)` on its rim.
//! Nodes with fewer than four in-grid neighbours form the absorbing rim.
//!
//! Environments are obtained by removing a fraction of the links uniformly at
//! random and rejecting draws whose passage network falls apart. Nodes that
//! lose every link are allowed; they act as enclosed cells.

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::LatticeError;

/// Square-lattice percolation threshold for bond removal.
pub const PERCOLATION_THRESHOLD: f64 = 0.5;

/// Upper bound on rejection-sampling attempts in [`EnvironmentMap::generate`].
pub const MAX_GENERATION_ATTEMPTS: usize = 10_000;

/// Integer lattice coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeCoord {
    pub x: i32,
    pub y: i32,
}

impl NodeCoord {
    pub const fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }

    pub fn offset(self, dx: i32, dy: i32) -> Self {
        Self::new(self.x + dx, self.y + dy)
    }

    pub fn manhattan(self, other: NodeCoord) -> u32 {
        self.x.abs_diff(other.x) + self.y.abs_diff(other.y)
    }
}

impl std::fmt::Display for NodeCoord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// Compass direction of an incident link. The order East, West, North, South
/// is the order of observation slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    East,
    West,
    North,
    South,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::East, Direction::West, Direction::North, Direction::South];

    pub const fn delta(self) -> (i32, i32) {
        match self {
            Direction::East => (1, 0),
            Direction::West => (-1, 0),
            Direction::North => (0, 1),
            Direction::South => (0, -1),
        }
    }

    pub const fn slot(self) -> usize {
        self as usize
    }
}

/// Which ring of observable links a link belongs to, seen from a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Primary,
    Secondary,
}

/// Unit link between two lattice neighbours; `a < b` lexicographically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Link {
    pub id: usize,
    pub a: NodeCoord,
    pub b: NodeCoord,
}

/// Links observable from one node, indexed by [`Direction::slot`].
/// `None` marks a link that does not exist in the complete grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ObservableLinks {
    pub primary: [Option<usize>; 4],
    pub secondary: [Option<usize>; 4],
}

impl ObservableLinks {
    pub fn get(&self, tier: Tier, dir: Direction) -> Option<usize> {
        match tier {
            Tier::Primary => self.primary[dir.slot()],
            Tier::Secondary => self.secondary[dir.slot()],
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Adjacent {
    node: usize,
    link: usize,
}

/// The searcher's prior geometry: every potential node and link.
#[derive(Debug, Clone)]
pub struct CompleteGrid {
    radius: u32,
    nodes: Vec<NodeCoord>,
    index: HashMap<NodeCoord, usize>,
    links: Vec<Link>,
    boundary: Vec<bool>,
    adjacency: Vec<[Option<Adjacent>; 4]>,
    observable: Vec<ObservableLinks>,
}

impl CompleteGrid {
    pub fn new(radius: u32) -> Result<Self, LatticeError> {
        if radius == 0 {
            return Err(LatticeError::InvalidRadius(radius));
        }
        let r = radius as i32;
        let limit = (r + 1) * (r + 1);
        let mut nodes: Vec<NodeCoord> = (-r - 1..=r + 1)
            .flat_map(|x| (-r - 1..=r + 1).map(move |y| NodeCoord::new(x, y)))
            .filter(|c| c.x * c.x + c.y * c.y < limit)
            .collect();
        nodes.sort_unstable();
        let index: HashMap<NodeCoord, usize> = nodes.iter().enumerate().map(|(i, &c)| (c, i)).collect();

        // East and North neighbours already have the larger coordinate, so
        // the pair is in canonical order and the resulting list is sorted.
        let mut links = Vec::new();
        for &a in &nodes {
            for (dx, dy) in [(0, 1), (1, 0)] {
                let b = a.offset(dx, dy);
                if index.contains_key(&b) {
                    links.push(Link { id: 0, a, b });
                }
            }
        }
        links.sort_unstable_by_key(|l| (l.a, l.b));
        let mut link_index = HashMap::with_capacity(links.len());
        for (id, link) in links.iter_mut().enumerate() {
            link.id = id;
            link_index.insert((link.a, link.b), id);
        }

        let lookup = |p: NodeCoord, q: NodeCoord| -> Option<usize> {
            let key = if p < q { (p, q) } else { (q, p) };
            link_index.get(&key).copied()
        };

        let mut adjacency = vec![[None; 4]; nodes.len()];
        let mut observable = vec![ObservableLinks::default(); nodes.len()];
        let mut boundary = vec![false; nodes.len()];
        for (i, &c) in nodes.iter().enumerate() {
            for dir in Direction::ALL {
                let (dx, dy) = dir.delta();
                let n1 = c.offset(dx, dy);
                let n2 = n1.offset(dx, dy);
                if let Some(link) = lookup(c, n1) {
                    adjacency[i][dir.slot()] = Some(Adjacent { node: index[&n1], link });
                    observable[i].primary[dir.slot()] = Some(link);
                }
                observable[i].secondary[dir.slot()] = lookup(n1, n2);
            }
            boundary[i] = adjacency[i].iter().any(Option::is_none);
        }

        Ok(Self {
            radius,
            nodes,
            index,
            links,
            boundary,
            adjacency,
            observable,
        })
    }

    pub fn radius(&self) -> u32 {
        self.radius
    }

    pub fn nodes(&self) -> &[NodeCoord] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node(&self, i: usize) -> NodeCoord {
        self.nodes[i]
    }

    pub fn node_index(&self, c: NodeCoord) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn contains(&self, c: NodeCoord) -> bool {
        self.index.contains_key(&c)
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    pub fn link(&self, id: usize) -> &Link {
        &self.links[id]
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        self.boundary[node]
    }

    pub fn boundary_flags(&self) -> &[bool] {
        &self.boundary
    }

    /// Neighbour node and connecting link in `dir`, if the complete grid has one.
    pub fn neighbour(&self, node: usize, dir: Direction) -> Option<(usize, usize)> {
        self.adjacency[node][dir.slot()].map(|a| (a.node, a.link))
    }

    pub fn observable_links(&self, node: usize) -> &ObservableLinks {
        &self.observable[node]
    }
}

/// On-disk form of an environment; the grid is rebuilt from `radius`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentFile {
    pub schema_version: u32,
    pub radius: u32,
    pub removal_fraction: f64,
    pub seed: u64,
    pub removed_link_ids: Vec<usize>,
}

pub const ENVIRONMENT_SCHEMA_VERSION: u32 = 1;

/// Link status vector over a complete grid (the map `m`).
#[derive(Debug, Clone)]
pub struct EnvironmentMap {
    grid: Arc<CompleteGrid>,
    status: Vec<bool>,
    removal_fraction: f64,
    seed: u64,
}

impl EnvironmentMap {
    /// The complete grid with every link present.
    pub fn complete(grid: Arc<CompleteGrid>) -> Self {
        let status = vec![true; grid.link_count()];
        Self {
            grid,
            status,
            removal_fraction: 0.0,
            seed: 0,
        }
    }

    /// Remove `round(p * L)` links uniformly at random, retrying until the
    /// passage network is connected (see [`Self::passages_connected`]).
    pub fn generate(grid: Arc<CompleteGrid>, p: f64, seed: u64) -> Result<Self, LatticeError> {
        Self::generate_with(grid, p, seed, &[])
    }

    /// As [`Self::generate`], additionally requiring every node in
    /// `required` to lie on the passage network.
    pub fn generate_with(
        grid: Arc<CompleteGrid>,
        p: f64,
        seed: u64,
        required: &[NodeCoord],
    ) -> Result<Self, LatticeError> {
        if !(0.0..PERCOLATION_THRESHOLD).contains(&p) {
            return Err(LatticeError::InvalidFraction(p));
        }
        let required = required
            .iter()
            .map(|&c| grid.node_index(c).ok_or(LatticeError::NodeOutside(c)))
            .collect::<Result<Vec<_>, _>>()?;
        let total = grid.link_count();
        let removed = (p * total as f64).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..MAX_GENERATION_ATTEMPTS {
            let mut status = vec![true; total];
            for id in index::sample(&mut rng, total, removed) {
                status[id] = false;
            }
            let env = Self {
                grid: Arc::clone(&grid),
                status,
                removal_fraction: p,
                seed,
            };
            if env.passages_connected() && required.iter().all(|&n| env.degree(n) > 0) {
                return Ok(env);
            }
        }
        Err(LatticeError::NotConnected {
            p,
            attempts: MAX_GENERATION_ATTEMPTS,
        })
    }

    pub fn from_file(file: &EnvironmentFile) -> Result<Self, LatticeError> {
        let grid = Arc::new(CompleteGrid::new(file.radius)?);
        let mut status = vec![true; grid.link_count()];
        for &id in &file.removed_link_ids {
            *status
                .get_mut(id)
                .ok_or(LatticeError::UnknownLink(id, grid.link_count()))? = false;
        }
        Ok(Self {
            grid,
            status,
            removal_fraction: file.removal_fraction,
            seed: file.seed,
        })
    }

    pub fn to_file(&self) -> EnvironmentFile {
        EnvironmentFile {
            schema_version: ENVIRONMENT_SCHEMA_VERSION,
            radius: self.grid.radius(),
            removal_fraction: self.removal_fraction,
            seed: self.seed,
            removed_link_ids: self.removed_link_ids(),
        }
    }

    pub fn grid(&self) -> &Arc<CompleteGrid> {
        &self.grid
    }

    pub fn removal_fraction(&self) -> f64 {
        self.removal_fraction
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn status(&self) -> &[bool] {
        &self.status
    }

    pub fn is_open(&self, link: usize) -> bool {
        self.status[link]
    }

    pub fn set_open(&mut self, link: usize, open: bool) {
        self.status[link] = open;
    }

    pub fn removed_link_ids(&self) -> Vec<usize> {
        self.status
            .iter()
            .enumerate()
            .filter_map(|(i, &s)| (!s).then_some(i))
            .collect()
    }

    /// Node reached by moving in `dir` from `node` over an open link.
    pub fn open_neighbour(&self, node: usize, dir: Direction) -> Option<usize> {
        self.grid
            .neighbour(node, dir)
            .and_then(|(n, l)| self.status[l].then_some(n))
    }

    pub fn open_neighbours(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        Direction::ALL
            .into_iter()
            .filter_map(move |d| self.open_neighbour(node, d))
    }

    pub fn degree(&self, node: usize) -> usize {
        self.open_neighbours(node).count()
    }

    /// Breadth-first hop distances from `start` over open links.
    pub fn distances_from(&self, start: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.grid.node_count()];
        let mut queue = VecDeque::new();
        dist[start] = Some(0);
        queue.push_back(start);
        while let Some(u) = queue.pop_front() {
            let d = dist[u].unwrap_or_default();
            for v in self.open_neighbours(u) {
                if dist[v].is_none() {
                    dist[v] = Some(d + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// Every node reachable from every other.
    pub fn is_connected(&self) -> bool {
        self.distances_from(0).iter().all(Option::is_some)
    }

    /// Nodes with at least one open link form a single component. Nodes
    /// whose links were all removed are enclosed cells and are ignored.
    pub fn passages_connected(&self) -> bool {
        let n = self.grid.node_count();
        let Some(first) = (0..n).find(|&i| self.degree(i) > 0) else {
            return true;
        };
        let dist = self.distances_from(first);
        (0..n).all(|i| dist[i].is_some() || self.degree(i) == 0)
    }

    /// Shortest path length over open links, `None` when unreachable.
    pub fn shortest_path_length(&self, a: NodeCoord, b: NodeCoord) -> Result<Option<usize>, LatticeError> {
        let ia = self.grid.node_index(a).ok_or(LatticeError::NodeOutside(a))?;
        let ib = self.grid.node_index(b).ok_or(LatticeError::NodeOutside(b))?;
        Ok(self.distances_from(ia)[ib])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(r: u32) -> Arc<CompleteGrid> {
        Arc::new(CompleteGrid::new(r).unwrap())
    }

    #[test]
    fn radius_nine_has_572_links() {
        let g = grid(9);
        assert_eq!(g.link_count(), 572);
        assert_eq!(g.node_count(), 305);
        assert!(g.contains(NodeCoord::new(9, -4)));
    }

    #[test]
    fn radius_one_is_three_by_three() {
        let g = grid(1);
        assert_eq!(g.node_count(), 9);
        assert_eq!(g.link_count(), 12);
        let centre = g.node_index(NodeCoord::new(0, 0)).unwrap();
        assert!(!g.is_boundary(centre));
        assert_eq!(g.boundary_flags().iter().filter(|&&b| b).count(), 8);
    }

    #[test]
    fn zero_radius_rejected() {
        assert!(matches!(CompleteGrid::new(0), Err(LatticeError::InvalidRadius(0))));
    }

    #[test]
    fn links_are_canonical_and_sorted() {
        let g = grid(5);
        for (i, l) in g.links().iter().enumerate() {
            assert_eq!(l.id, i);
            assert!(l.a < l.b);
            assert_eq!(l.a.manhattan(l.b), 1);
        }
        assert!(g.links().windows(2).all(|w| (w[0].a, w[0].b) < (w[1].a, w[1].b)));
    }

    #[test]
    fn worked_observable_links() {
        let g = grid(9);
        let n = g.node_index(NodeCoord::new(-3, -4)).unwrap();
        let obs = g.observable_links(n);
        let ends = |id: Option<usize>| {
            let l = g.link(id.unwrap());
            (l.a, l.b)
        };
        let c = NodeCoord::new;
        assert_eq!(ends(obs.primary[0]), (c(-3, -4), c(-2, -4)));
        assert_eq!(ends(obs.primary[1]), (c(-4, -4), c(-3, -4)));
        assert_eq!(ends(obs.primary[2]), (c(-3, -4), c(-3, -3)));
        assert_eq!(ends(obs.primary[3]), (c(-3, -5), c(-3, -4)));
        assert_eq!(ends(obs.secondary[0]), (c(-2, -4), c(-1, -4)));
        assert_eq!(ends(obs.secondary[1]), (c(-5, -4), c(-4, -4)));
        assert_eq!(ends(obs.secondary[2]), (c(-3, -3), c(-3, -2)));
        assert_eq!(ends(obs.secondary[3]), (c(-3, -6), c(-3, -5)));
    }

    #[test]
    fn small_grid_has_no_secondary_from_centre() {
        let g = grid(1);
        let obs = g.observable_links(g.node_index(NodeCoord::new(0, 0)).unwrap());
        assert!(obs.primary.iter().all(Option::is_some));
        assert!(obs.secondary.iter().all(Option::is_none));
    }

    #[test]
    fn rim_nodes_have_fewer_than_four_primaries() {
        let g = grid(9);
        for i in 0..g.node_count() {
            let prim = g.observable_links(i).primary.iter().flatten().count();
            let c = g.node(i);
            let inside = Direction::ALL
                .iter()
                .filter(|d| g.contains(c.offset(d.delta().0, d.delta().1)))
                .count();
            assert_eq!(prim, inside);
            assert_eq!(g.is_boundary(i), prim < 4);
        }
        let start = g.node_index(NodeCoord::new(9, -4)).unwrap();
        assert!(g.is_boundary(start));
    }

    #[test]
    fn observable_sets_are_disjoint_and_local() {
        let g = grid(6);
        for i in 0..g.node_count() {
            let c = g.node(i);
            let obs = g.observable_links(i);
            for dir in Direction::ALL {
                if let Some(p) = obs.primary[dir.slot()] {
                    let l = g.link(p);
                    assert!(l.a == c || l.b == c);
                    assert!(!obs.secondary.contains(&Some(p)));
                }
                if let Some(s) = obs.secondary[dir.slot()] {
                    let l = g.link(s);
                    let (dx, dy) = dir.delta();
                    let near = c.offset(dx, dy);
                    let far = near.offset(dx, dy);
                    assert!((l.a, l.b) == (near, far) || (l.a, l.b) == (far, near));
                }
            }
        }
    }

    #[test]
    fn generate_removes_expected_count_and_connects() {
        let g = grid(9);
        let env = EnvironmentMap::generate(Arc::clone(&g), 0.35, 11).unwrap();
        assert_eq!(env.removed_link_ids().len(), 200);
        assert!(env.passages_connected());
        // BFS oracle: one component among nodes that keep a link
        let open: Vec<usize> = (0..g.node_count()).filter(|&i| env.degree(i) > 0).collect();
        let dist = env.distances_from(open[0]);
        assert!(open.iter().all(|&i| dist[i].is_some()));
        let again = EnvironmentMap::generate(g, 0.35, 11).unwrap();
        assert_eq!(env.status(), again.status());
    }

    #[test]
    fn required_nodes_stay_on_the_network() {
        let g = grid(9);
        let req = [NodeCoord::new(9, -4), NodeCoord::new(0, 7)];
        for seed in 0..10 {
            let env = EnvironmentMap::generate_with(Arc::clone(&g), 0.35, seed, &req).unwrap();
            let a = env.shortest_path_length(req[0], req[1]).unwrap();
            assert!(a.is_some_and(|d| d >= 20));
        }
        assert!(EnvironmentMap::generate_with(g, 0.1, 0, &[NodeCoord::new(20, 0)]).is_err());
    }

    #[test]
    fn zero_fraction_keeps_everything() {
        let env = EnvironmentMap::generate(grid(9), 0.0, 3).unwrap();
        assert!(env.removed_link_ids().is_empty());
        assert!(env.is_connected());
    }

    #[test]
    fn fraction_at_threshold_rejected() {
        assert!(matches!(
            EnvironmentMap::generate(grid(3), 0.5, 0),
            Err(LatticeError::InvalidFraction(_))
        ));
    }

    #[test]
    fn near_threshold_small_grid_connects_or_fails_cleanly() {
        let g = grid(2);
        for seed in 0..5 {
            match EnvironmentMap::generate(Arc::clone(&g), 0.49, seed) {
                Ok(env) => assert!(env.passages_connected()),
                Err(e) => assert!(matches!(e, LatticeError::NotConnected { .. })),
            }
        }
    }

    #[test]
    fn shortest_path_on_complete_grid_is_manhattan() {
        let env = EnvironmentMap::complete(grid(9));
        let start = NodeCoord::new(9, -4);
        assert_eq!(env.shortest_path_length(start, start).unwrap(), Some(0));
        assert_eq!(env.shortest_path_length(start, NodeCoord::new(0, 7)).unwrap(), Some(20));
        assert_eq!(env.shortest_path_length(start, NodeCoord::new(0, 1)).unwrap(), Some(14));
        assert_eq!(env.shortest_path_length(start, NodeCoord::new(2, -5)).unwrap(), Some(8));
    }

    #[test]
    fn unreachable_node_reports_none() {
        let g = grid(2);
        let mut env = EnvironmentMap::complete(Arc::clone(&g));
        let corner = g.node_index(NodeCoord::new(2, 2)).unwrap();
        for d in Direction::ALL {
            if let Some((_, l)) = g.neighbour(corner, d) {
                env.set_open(l, false);
            }
        }
        assert_eq!(
            env.shortest_path_length(NodeCoord::new(0, 0), NodeCoord::new(2, 2))
                .unwrap(),
            None
        );
        assert!(!env.is_connected());
    }

    #[test]
    fn file_round_trip_preserves_map() {
        let env = EnvironmentMap::generate(grid(7), 0.3, 5).unwrap();
        let json = serde_json::to_string(&env.to_file()).unwrap();
        let back: EnvironmentFile = serde_json::from_str(&json).unwrap();
        let env2 = EnvironmentMap::from_file(&back).unwrap();
        assert_eq!(env.status(), env2.status());
        assert_eq!(env2.seed(), 5);
    }
}
