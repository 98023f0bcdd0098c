//! Ground-truth sensors and actuation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::diffusion::ConcentrationField;
use crate::error::InvalidDetection;
use crate::lattice::{CompleteGrid, Direction, EnvironmentMap, Tier};

/// Binary link detector: `p_d = P(z=1 | m=1)`, `p_fa = P(z=1 | m=0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMatrix {
    pub p_d: f64,
    pub p_fa: f64,
}

impl DetectionMatrix {
    pub fn new(p_d: f64, p_fa: f64) -> Result<Self, InvalidDetection> {
        let m = Self { p_d, p_fa };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), InvalidDetection> {
        if 0.0 <= self.p_fa && self.p_fa < self.p_d && self.p_d <= 1.0 {
            Ok(())
        } else {
            Err(InvalidDetection {
                p_d: self.p_d,
                p_fa: self.p_fa,
            })
        }
    }

    /// `P(z | m)`.
    pub fn likelihood(&self, z: bool, m: bool) -> f64 {
        match (z, m) {
            (true, true) => self.p_d,
            (false, true) => 1.0 - self.p_d,
            (true, false) => self.p_fa,
            (false, false) => 1.0 - self.p_fa,
        }
    }

    pub const PERFECT: DetectionMatrix = DetectionMatrix { p_d: 1.0, p_fa: 0.0 };
}

/// Motion command on the unit lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Control {
    Stay,
    Up,
    Right,
    Down,
    Left,
}

impl Control {
    pub const ALL: [Control; 5] = [Control::Stay, Control::Up, Control::Right, Control::Down, Control::Left];

    pub fn direction(self) -> Option<Direction> {
        match self {
            Control::Stay => None,
            Control::Up => Some(Direction::North),
            Control::Right => Some(Direction::East),
            Control::Down => Some(Direction::South),
            Control::Left => Some(Direction::West),
        }
    }

    pub fn displacement(self) -> (i32, i32) {
        self.direction().map_or((0, 0), Direction::delta)
    }

    /// Destination on the complete grid, ignoring link status. Moves that
    /// would leave the grid collapse to staying put.
    pub fn apply_on_grid(self, grid: &CompleteGrid, node: usize) -> usize {
        self.direction()
            .and_then(|d| grid.neighbour(node, d))
            .map_or(node, |(n, _)| n)
    }

    /// Whether the move stays on the complete grid.
    pub fn admissible_at(self, grid: &CompleteGrid, node: usize) -> bool {
        self.direction().is_none_or(|d| grid.neighbour(node, d).is_some())
    }
}

/// Actually executed control: the command with probability `1 - p_e`,
/// otherwise one of the other four uniformly.
pub fn realise_control<R: Rng + ?Sized>(commanded: Control, p_e: f64, rng: &mut R) -> Control {
    if rng.random::<f64>() < p_e {
        let others: Vec<Control> = Control::ALL.into_iter().filter(|&c| c != commanded).collect();
        others[rng.random_range(0..others.len())]
    } else {
        commanded
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Motion {
    pub realised: Control,
    pub node: usize,
}

/// Moves the true searcher. A realised move across a missing link, or off
/// the grid, leaves it in place.
pub fn execute_control<R: Rng + ?Sized>(
    env: &EnvironmentMap,
    node: usize,
    commanded: Control,
    p_e: f64,
    rng: &mut R,
) -> Motion {
    let realised = realise_control(commanded, p_e, rng);
    let node = realised
        .direction()
        .and_then(|d| env.open_neighbour(node, d))
        .unwrap_or(node);
    Motion { realised, node }
}

/// Poisson count with mean equal to the field value at `node`.
pub fn sample_count<R: Rng + ?Sized>(field: &ConcentrationField, node: usize, rng: &mut R) -> u64 {
    let lambda = field.value(node);
    if lambda <= 0.0 {
        return 0;
    }
    match Poisson::new(lambda) {
        Ok(p) => p.sample(rng) as u64,
        Err(_) => 0,
    }
}

/// One binary link report. `direction` and `tier` locate the link relative
/// to the sensing node; `link_id` is the true link that was sensed, `None`
/// where the complete grid has no link in that slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkObservation {
    pub direction: Direction,
    pub tier: Tier,
    pub link_id: Option<usize>,
    pub z: bool,
}

/// Reports on all eight primary and secondary slots around `node`. Slots
/// without a link in the complete grid read as absent links. Secondary links
/// are sensed even behind a missing primary link.
pub fn observe_links<R: Rng + ?Sized>(
    env: &EnvironmentMap,
    node: usize,
    primary: DetectionMatrix,
    secondary: DetectionMatrix,
    rng: &mut R,
) -> Vec<LinkObservation> {
    let obs = env.grid().observable_links(node);
    let mut out = Vec::with_capacity(8);
    for (tier, det) in [(Tier::Primary, primary), (Tier::Secondary, secondary)] {
        for dir in Direction::ALL {
            let link_id = obs.get(tier, dir);
            let p_one = if link_id.is_some_and(|l| env.is_open(l)) {
                det.p_d
            } else {
                det.p_fa
            };
            let z = rng.random::<f64>() < p_one;
            out.push(LinkObservation {
                direction: dir,
                tier,
                link_id,
                z,
            });
        }
    }
    out
}

/// Flips each link independently with probability `1 - stay_prob`.
/// Returns the number of flipped links.
pub fn evolve_map<R: Rng + ?Sized>(env: &mut EnvironmentMap, stay_prob: f64, rng: &mut R) -> usize {
    let flip = 1.0 - stay_prob;
    let mut flips = 0;
    for id in 0..env.grid().link_count() {
        if rng.random::<f64>() < flip {
            let open = env.is_open(id);
            env.set_open(id, !open);
            flips += 1;
        }
    }
    flips
}

/// Independent random streams for each noise source of one run.
#[derive(Debug, Clone)]
pub struct SensorStreams {
    pub counts: ChaCha8Rng,
    pub links: ChaCha8Rng,
    pub motion: ChaCha8Rng,
    pub map: ChaCha8Rng,
}

impl SensorStreams {
    pub fn new(seed: u64) -> Self {
        let stream = |id| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(id);
            rng
        };
        Self {
            counts: stream(0),
            links: stream(1),
            motion: stream(2),
            map: stream(3),
        }
    }
}
