//! Myopic information-driven motion control.
//!
//! Each admissible control is scored by the expected Bhattacharyya distance
//! between the current source/rate posterior and the posterior after a
//! hypothetical noise-free count. Counts are hypothesised from randomly
//! chosen particles moved deterministically by the control.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytic::{c_constant, DomainGeom};
use crate::lattice::{CompleteGrid, NodeCoord, Tier};
use crate::rbpf::{ln_count_likelihood, Particle, ParticleSet};
use crate::sensing::{Control, LinkObservation};
use crate::special::{ln_gamma, ln_gamma_pdf, ln_poisson, log_sum_exp};

/// Window of the anti-oscillation heuristic.
pub const HISTORY_LEN: usize = 10;
/// A node seen more often than this inside the window triggers a random move.
pub const REVISIT_LIMIT: usize = 3;
/// Trapezoid nodes used by [`bhatt_j_quadrature`].
pub const QUADRATURE_POINTS: usize = 256;

/// Last [`HISTORY_LEN`] visited nodes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VisitHistory {
    nodes: VecDeque<NodeCoord>,
}

impl VisitHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, node: NodeCoord) {
        if self.nodes.len() == HISTORY_LEN {
            self.nodes.pop_front();
        }
        self.nodes.push_back(node);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn count(&self, node: NodeCoord) -> usize {
        self.nodes.iter().filter(|&&n| n == node).count()
    }

    /// Whether some node appears more than [`REVISIT_LIMIT`] times.
    pub fn oscillating(&self) -> bool {
        self.nodes.iter().any(|&n| self.count(n) > REVISIT_LIMIT)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardSample {
    pub control: Control,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlParams {
    /// Hypothetical counts `M` averaged per control.
    pub samples: usize,
    /// Draw `A` from each particle's Gamma instead of using its mean.
    pub sample_rate: bool,
}

impl Default for ControlParams {
    fn default() -> Self {
        Self {
            samples: 400,
            sample_rate: false,
        }
    }
}

/// Outcome of one control selection, suitable for a per-step trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlDecision {
    pub control: Control,
    /// Expected reward of every admissible control; empty when the
    /// heuristic fired.
    pub rewards: Vec<RewardSample>,
    pub heuristic_triggered: bool,
    /// Diagnostics such as vanished reward denominators.
    pub zero_denominators: usize,
}

/// `ln` of the closed-form Bhattacharyya integral
/// `J = int sqrt(P(n; cA)) G(A; eta, theta) dA`.
pub fn ln_bhatt_j(eta: f64, theta: f64, c: f64, n: u64) -> f64 {
    let nf = n as f64;
    let half = 0.5 * nf;
    half * c.ln() + ln_gamma(eta + half)
        - 0.5 * ln_gamma(nf + 1.0)
        - ln_gamma(eta)
        - eta * theta.ln()
        - (eta + half) * (0.5 * c + 1.0 / theta).ln()
}

pub fn bhatt_j(eta: f64, theta: f64, c: f64, n: u64) -> f64 {
    ln_bhatt_j(eta, theta, c, n).exp()
}

/// Trapezoid approximation of `J` in `t = ln A`. The integrand is a
/// Gamma(`eta + n/2`) shape, so the window around its mode is cut where the
/// log integrand has fallen by at least 40.
pub fn bhatt_j_quadrature(eta: f64, theta: f64, c: f64, n: u64, points: usize) -> f64 {
    let shape = eta + 0.5 * n as f64;
    let mode = (shape / (1.0 / theta + 0.5 * c)).ln();
    let (lo, hi) = if shape >= 100.0 {
        let w = 10.0 / shape.sqrt();
        (mode - w, mode + w)
    } else {
        (mode - 1.0 - 40.0 / shape, mode + 1.0 + (40.0 / shape).ln_1p())
    };
    let h = (hi - lo) / (points - 1) as f64;
    let f = |t: f64| {
        let a = t.exp();
        (0.5 * ln_poisson(n, c * a) + ln_gamma_pdf(a, eta, theta) + t).exp()
    };
    let inner: f64 = (1..points - 1).map(|i| f(lo + i as f64 * h)).sum();
    h * (inner + 0.5 * (f(lo) + f(hi)))
}

/// Deterministic next node of a particle under `u` and its `c` there.
fn moved_c(grid: &CompleteGrid, geom: DomainGeom, p: &Particle, u: Control) -> f64 {
    let node = u.apply_on_grid(grid, p.searcher);
    c_constant(grid.node(node).into(), p.source, geom)
}

/// Nearest-integer count `round(A c)` at the particle's deterministic next
/// position; halves round away from zero.
pub fn ideal_count(rate: f64, c: f64) -> u64 {
    (rate * c).round().max(0.0) as u64
}

pub fn ideal_future_count(grid: &CompleteGrid, geom: DomainGeom, p: &Particle, u: Control) -> u64 {
    ideal_count(p.rate_mean(), moved_c(grid, geom, p, u))
}

/// `D = -2 ln(num / sqrt(den))` from log-space sums, clamped at zero.
/// `None` flags a vanished denominator.
fn distance(ln_num: f64, ln_den: f64) -> Option<f64> {
    if ln_den == f64::NEG_INFINITY {
        return None;
    }
    Some((-2.0 * (ln_num - 0.5 * ln_den)).max(0.0))
}

fn total_weight(set: &ParticleSet) -> f64 {
    set.particles().iter().map(|p| p.weight).sum()
}

/// Bhattacharyya reward of one hypothetical count, evaluated particle by
/// particle on normalised weights. Reference implementation for
/// [`expected_reward`].
pub fn reward_sample(set: &ParticleSet, grid: &CompleteGrid, geom: DomainGeom, u: Control, n: u64) -> f64 {
    let ln_total = total_weight(set).ln();
    let (num, den): (Vec<f64>, Vec<f64>) = set
        .particles()
        .iter()
        .map(|p| {
            let c = moved_c(grid, geom, p, u);
            let lw = p.weight.ln() - ln_total;
            (
                lw + ln_bhatt_j(p.eta, p.theta, c, n),
                lw + ln_count_likelihood(p.eta, p.theta, c, n),
            )
        })
        .unzip();
    distance(log_sum_exp(&num), log_sum_exp(&den)).unwrap_or(0.0)
}

/// One hypothesis: the particle it came from and the rate used to form its
/// ideal count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hypothesis {
    pub particle: usize,
    pub rate: f64,
}

/// Draws `M` hypotheses with uniformly chosen particle indices.
pub fn draw_hypotheses<R: Rng + ?Sized>(set: &ParticleSet, params: &ControlParams, rng: &mut R) -> Vec<Hypothesis> {
    (0..params.samples)
        .map(|_| {
            let i = rng.random_range(0..set.len());
            let p = &set.particles()[i];
            let rate = if params.sample_rate {
                Gamma::new(p.eta, p.theta).map_or(p.rate_mean(), |g| g.sample(rng))
            } else {
                p.rate_mean()
            };
            Hypothesis { particle: i, rate }
        })
        .collect()
}

/// Per-particle logs that do not depend on the hypothetical count.
struct Prepared {
    ln_w: Vec<f64>,
    eta_class: Vec<usize>,
    etas: Vec<f64>,
    eta: Vec<f64>,
    ln_c: Vec<f64>,
    ln_ct: Vec<f64>,
    ln_1ct: Vec<f64>,
    ln_t: Vec<f64>,
    ln_half: Vec<f64>,
}

impl Prepared {
    fn new(set: &ParticleSet, c: &[f64]) -> Self {
        let ps = set.particles();
        let mut etas: Vec<f64> = Vec::new();
        let eta_class = ps
            .iter()
            .map(|p| match etas.iter().position(|&e| e == p.eta) {
                Some(k) => k,
                None => {
                    etas.push(p.eta);
                    etas.len() - 1
                }
            })
            .collect();
        let ln_total = total_weight(set).ln();
        Self {
            ln_w: ps.iter().map(|p| p.weight.ln() - ln_total).collect(),
            eta_class,
            etas,
            eta: ps.iter().map(|p| p.eta).collect(),
            ln_c: c.iter().map(|c| c.ln()).collect(),
            ln_ct: ps.iter().zip(c).map(|(p, c)| (c * p.theta).ln()).collect(),
            ln_1ct: ps.iter().zip(c).map(|(p, c)| (c * p.theta).ln_1p()).collect(),
            ln_t: ps.iter().map(|p| p.theta.ln()).collect(),
            ln_half: ps.iter().zip(c).map(|(p, c)| (0.5 * c + 1.0 / p.theta).ln()).collect(),
        }
    }

    /// `D(n)`, or `None` for a vanished denominator.
    fn distance(&self, n: u64) -> Option<f64> {
        let nf = n as f64;
        let half = 0.5 * nf;
        let lg_n1 = ln_gamma(nf + 1.0);
        // (ln G(eta), ln G(eta + n), ln G(eta + n/2)) for each distinct eta
        let lg: Vec<(f64, f64, f64)> = self
            .etas
            .iter()
            .map(|&e| (ln_gamma(e), ln_gamma(e + nf), ln_gamma(e + half)))
            .collect();
        let len = self.ln_w.len();
        let mut num = Vec::with_capacity(len);
        let mut den = Vec::with_capacity(len);
        for i in 0..len {
            let (lg_e, lg_en, lg_eh) = lg[self.eta_class[i]];
            let eta = self.eta[i];
            let ln_i = lg_en - lg_e - lg_n1 + nf * self.ln_ct[i] - (eta + nf) * self.ln_1ct[i];
            let ln_j =
                half * self.ln_c[i] + lg_eh - 0.5 * lg_n1 - lg_e - eta * self.ln_t[i] - (eta + half) * self.ln_half[i];
            den.push(self.ln_w[i] + ln_i);
            num.push(self.ln_w[i] + ln_j);
        }
        distance(log_sum_exp(&num), log_sum_exp(&den))
    }
}

/// Sample mean of the reward over the hypothetical counts induced by
/// `hypotheses` under control `u`. Returns the mean and the number of
/// vanished denominators.
pub fn expected_reward(
    set: &ParticleSet,
    grid: &CompleteGrid,
    geom: DomainGeom,
    u: Control,
    hypotheses: &[Hypothesis],
) -> (f64, usize) {
    let c: Vec<f64> = set.particles().iter().map(|p| moved_c(grid, geom, p, u)).collect();
    let mut freq: BTreeMap<u64, usize> = BTreeMap::new();
    for h in hypotheses {
        *freq.entry(ideal_count(h.rate, c[h.particle])).or_default() += 1;
    }
    let prep = Prepared::new(set, &c);
    let counts: Vec<(u64, usize)> = freq.into_iter().collect();
    let values: Vec<Option<f64>> = counts.par_iter().map(|&(n, _)| prep.distance(n)).collect();
    let mut total = 0.0;
    let mut zero = 0;
    for ((_, f), v) in counts.iter().zip(values) {
        match v {
            Some(d) => total += *f as f64 * d,
            None => zero += f,
        }
    }
    (total / hypotheses.len() as f64, zero)
}

/// Controls whose displacement stays on the complete grid from `node`.
pub fn admissible_controls(grid: &CompleteGrid, node: usize) -> Vec<Control> {
    Control::ALL
        .into_iter()
        .filter(|u| u.admissible_at(grid, node))
        .collect()
}

/// Stay plus every move whose primary link the latest reports show present.
pub fn passable_controls(obs: &[LinkObservation]) -> Vec<Control> {
    Control::ALL
        .into_iter()
        .filter(|u| match u.direction() {
            None => true,
            Some(d) => obs.iter().any(|o| o.tier == Tier::Primary && o.direction == d && o.z),
        })
        .collect()
}

/// Picks the next control from the non-empty set `admissible`: a uniformly
/// random member if the visit history oscillates, else the argmax of the
/// expected reward with ties broken uniformly.
pub fn select_control<R: Rng + ?Sized>(
    set: &ParticleSet,
    grid: &CompleteGrid,
    geom: DomainGeom,
    history: &VisitHistory,
    admissible: &[Control],
    params: &ControlParams,
    rng: &mut R,
) -> ControlDecision {
    assert!(!admissible.is_empty(), "empty admissible control set");
    if history.oscillating() {
        return ControlDecision {
            control: admissible[rng.random_range(0..admissible.len())],
            rewards: Vec::new(),
            heuristic_triggered: true,
            zero_denominators: 0,
        };
    }
    let hypotheses = draw_hypotheses(set, params, rng);
    let mut zero_denominators = 0;
    let rewards: Vec<RewardSample> = admissible
        .iter()
        .map(|&u| {
            let (value, zero) = expected_reward(set, grid, geom, u, &hypotheses);
            zero_denominators += zero;
            RewardSample { control: u, value }
        })
        .collect();
    let control = argmax_random_tie(&rewards, rng);
    ControlDecision {
        control,
        rewards,
        heuristic_triggered: false,
        zero_denominators,
    }
}

fn argmax_random_tie<R: Rng + ?Sized>(rewards: &[RewardSample], rng: &mut R) -> Control {
    let best = rewards.iter().map(|r| r.value).fold(f64::NEG_INFINITY, f64::max);
    let ties: Vec<Control> = rewards.iter().filter(|r| r.value == best).map(|r| r.control).collect();
    ties[rng.random_range(0..ties.len())]
}
