//! Rao-Blackwellised particle filter.
//!
//! Particles sample the searcher position and the (continuous) source
//! position. Conditioned on each particle's path, the map is tracked
//! analytically as independent per-link existence probabilities `q`, and the
//! effective release rate `A` as a Gamma distribution with shape `eta` and
//! scale `theta`. The proposal is the transitional prior, so the importance
//! weight is the predictive likelihood of the new count and link reports.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytic::{c_constant, DomainGeom, Point2};
use crate::error::{FilterError, LatticeError};
use crate::lattice::{CompleteGrid, NodeCoord, Tier};
use crate::sensing::{realise_control, Control, DetectionMatrix, LinkObservation};
use crate::special::{ln_gamma_pdf, ln_poisson, log_sum_exp};

/// Initial sufficient statistics shared by every particle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorParams {
    pub q0: f64,
    pub eta0: f64,
    pub theta0: f64,
}

impl Default for PriorParams {
    fn default() -> Self {
        Self {
            q0: 0.5,
            eta0: 15.0,
            theta0: 1.0,
        }
    }
}

/// Models the filter assumes for motion, map dynamics and link sensing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterParams {
    pub control_error: f64,
    pub primary: DetectionMatrix,
    pub secondary: DetectionMatrix,
    pub map_stay_prob: f64,
    /// Resample only when the effective sample size drops below this
    /// fraction of `N`. `None` resamples every step.
    pub ess_threshold: Option<f64>,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            control_error: 0.04,
            primary: DetectionMatrix::PERFECT,
            secondary: DetectionMatrix { p_d: 0.8, p_fa: 0.1 },
            map_stay_prob: 0.999,
            ess_threshold: None,
        }
    }
}

impl FilterParams {
    fn detector(&self, tier: Tier) -> DetectionMatrix {
        match tier {
            Tier::Primary => self.primary,
            Tier::Secondary => self.secondary,
        }
    }
}

/// One hypothesis: searcher node, source position, link probabilities and
/// Gamma parameters of the release rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Particle {
    pub searcher: usize,
    pub source: Point2,
    pub q: Vec<f64>,
    pub eta: f64,
    pub theta: f64,
    pub weight: f64,
}

impl Particle {
    pub fn rate_mean(&self) -> f64 {
        self.eta * self.theta
    }
}

#[derive(Debug, Clone)]
pub struct ParticleSet {
    particles: Vec<Particle>,
    step: usize,
}

/// Per-step bookkeeping returned by [`ParticleSet::update`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateDiagnostics {
    pub effective_sample_size: f64,
    pub impossible_observations: usize,
    pub resampled: bool,
}

/// Link predicted existence probability after one step of the symmetric
/// two-state map dynamics.
pub fn predict_link_prob(q_prev: f64, stay_prob: f64) -> f64 {
    (1.0 - stay_prob) * (1.0 - q_prev) + stay_prob * q_prev
}

pub fn predict_map_probs(q: &mut [f64], stay_prob: f64) {
    if stay_prob == 1.0 {
        return;
    }
    for v in q {
        *v = predict_link_prob(*v, stay_prob);
    }
}

/// Bayes update of one link probability. `None` flags an observation that
/// has zero probability under the prediction (e.g. a perfect sensor
/// reporting a link believed absent with certainty).
pub fn update_link_prob(q_pred: f64, z: bool, det: DetectionMatrix) -> Option<f64> {
    let present = det.likelihood(z, true) * q_pred;
    let absent = det.likelihood(z, false) * (1.0 - q_pred);
    let denom = present + absent;
    (denom > 0.0).then(|| present / denom)
}

/// `ln sum_m P(z | m) P(m)` for one link.
fn link_log_likelihood(q_pred: f64, z: bool, det: DetectionMatrix) -> f64 {
    (det.likelihood(z, true) * q_pred + det.likelihood(z, false) * (1.0 - q_pred)).ln()
}

/// Link probed by `obs` when the searcher stands at `node`, if that link
/// exists in the complete grid.
fn resolve_link(grid: &CompleteGrid, node: usize, obs: &LinkObservation) -> Option<usize> {
    grid.observable_links(node).get(obs.tier, obs.direction)
}

/// Applies the link reports, interpreted relative to `node`, to `q`.
/// Returns the number of impossible observations; their links are set to 0.
pub fn update_map_probs(
    q: &mut [f64],
    obs: &[LinkObservation],
    grid: &CompleteGrid,
    node: usize,
    params: &FilterParams,
) -> usize {
    let mut impossible = 0;
    for o in obs {
        if let Some(link) = resolve_link(grid, node, o) {
            match update_link_prob(q[link], o.z, params.detector(o.tier)) {
                Some(v) => q[link] = v,
                None => {
                    q[link] = 0.0;
                    impossible += 1;
                }
            }
        }
    }
    impossible
}

/// Conjugate Gamma update of the release-rate posterior after a count `n`
/// whose Poisson mean is `c * A`.
pub fn update_gamma(eta: f64, theta: f64, n: u64, c: f64) -> (f64, f64) {
    (eta + n as f64, theta / (1.0 + c * theta))
}

/// `ln I` where `I = P(n; cA) G(A; eta, theta) / G(A; eta + n, theta')`,
/// evaluated at an arbitrary `A > 0`.
pub fn ln_count_likelihood_at(eta: f64, theta: f64, c: f64, n: u64, a: f64) -> f64 {
    let (eta_post, theta_post) = update_gamma(eta, theta, n, c);
    ln_poisson(n, c * a) + ln_gamma_pdf(a, eta, theta) - ln_gamma_pdf(a, eta_post, theta_post)
}

/// Marginal likelihood of a count `n` with the rate integrated out, evaluated
/// at the prior mean `A = eta * theta`.
pub fn ln_count_likelihood(eta: f64, theta: f64, c: f64, n: u64) -> f64 {
    ln_count_likelihood_at(eta, theta, c, n, eta * theta)
}

pub fn count_likelihood(eta: f64, theta: f64, c: f64, n: u64) -> f64 {
    ln_count_likelihood(eta, theta, c, n).exp()
}

/// Unnormalised log weight of a particle already moved to `searcher`, using
/// its predicted link probabilities `q_pred` and previous Gamma parameters.
#[allow(clippy::too_many_arguments)]
pub fn log_importance_weight(
    grid: &CompleteGrid,
    geom: DomainGeom,
    searcher: usize,
    source: Point2,
    q_pred: &[f64],
    eta: f64,
    theta: f64,
    n: u64,
    obs: &[LinkObservation],
    params: &FilterParams,
) -> f64 {
    let c = c_constant(grid.node(searcher).into(), source, geom);
    let mut lw = ln_count_likelihood(eta, theta, c, n);
    for o in obs {
        let det = params.detector(o.tier);
        // A slot with no link in this particle's geometry is a known absent link.
        let q = resolve_link(grid, searcher, o).map_or(0.0, |l| q_pred[l]);
        lw += link_log_likelihood(q, o.z, det);
    }
    lw
}

/// Motion sample for the filter. Off-grid realisations stay put. A move
/// across link `l` succeeds with the particle's belief `q[l]`, after which
/// `q[l]` collapses to the sampled status, mirroring the blocked-move rule
/// of the true searcher.
pub fn predict_searcher<R: Rng + ?Sized>(
    grid: &CompleteGrid,
    node: usize,
    q: &mut [f64],
    u: Control,
    control_error: f64,
    rng: &mut R,
) -> usize {
    let Some(dir) = realise_control(u, control_error, rng).direction() else {
        return node;
    };
    let Some((next, link)) = grid.neighbour(node, dir) else {
        return node;
    };
    if rng.random::<f64>() < q[link] {
        q[link] = 1.0;
        next
    } else {
        q[link] = 0.0;
        node
    }
}

/// Ancestor indices by systematic resampling of normalised `weights`.
pub fn systematic_resample<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Vec<usize> {
    let n = weights.len();
    let step = 1.0 / n as f64;
    let mut u = rng.random::<f64>() * step;
    let mut out = Vec::with_capacity(n);
    let mut cum = weights[0];
    let mut i = 0;
    for _ in 0..n {
        while u > cum && i + 1 < n {
            i += 1;
            cum += weights[i];
        }
        out.push(i);
        u += step;
    }
    out
}

/// Uniform sample in the open disk.
fn sample_in_disk<R: Rng + ?Sized>(geom: DomainGeom, rng: &mut R) -> Point2 {
    loop {
        let r = geom.radius * rng.random::<f64>().sqrt();
        let phi = std::f64::consts::TAU * rng.random::<f64>();
        let p = Point2::new(r * phi.cos(), r * phi.sin());
        if geom.contains_strictly(p) {
            return p;
        }
    }
}

const JITTER_RETRIES: usize = 100;

/// Summary statistics of the particle approximation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub searcher_map_node: NodeCoord,
    pub source_mean: Point2,
    pub source_cov: [[f64; 2]; 2],
    pub a_mean: f64,
    pub map_probs: Vec<f64>,
}

impl ParticleSet {
    pub fn init<R: Rng + ?Sized>(
        grid: &CompleteGrid,
        n: usize,
        start: NodeCoord,
        geom: DomainGeom,
        prior: PriorParams,
        rng: &mut R,
    ) -> Result<Self, LatticeError> {
        let searcher = grid.node_index(start).ok_or(LatticeError::NodeOutside(start))?;
        let weight = 1.0 / n as f64;
        let particles = (0..n)
            .map(|_| Particle {
                searcher,
                source: sample_in_disk(geom, rng),
                q: vec![prior.q0; grid.link_count()],
                eta: prior.eta0,
                theta: prior.theta0,
                weight,
            })
            .collect();
        Ok(Self { particles, step: 0 })
    }

    pub fn from_particles(particles: Vec<Particle>) -> Result<Self, FilterError> {
        if particles.is_empty() {
            return Err(FilterError::Empty);
        }
        Ok(Self { particles, step: 0 })
    }

    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.particles.iter().map(|p| p.weight * p.weight).sum::<f64>()
    }

    /// Whether some particle places the searcher at `node`.
    pub fn supports(&self, node: usize) -> bool {
        self.particles.iter().any(|p| p.searcher == node)
    }

    /// Link reports taken without motion or count, such as the sensing at the
    /// entry point. Reweights by the link likelihood and updates the map
    /// probabilities; no resampling.
    pub fn observe_links(
        &mut self,
        grid: &CompleteGrid,
        params: &FilterParams,
        obs: &[LinkObservation],
    ) -> Result<(), FilterError> {
        let log_w: Vec<f64> = self
            .particles
            .iter_mut()
            .map(|p| {
                let lw = p.weight.ln()
                    + obs
                        .iter()
                        .map(|o| {
                            let q = resolve_link(grid, p.searcher, o).map_or(0.0, |l| p.q[l]);
                            link_log_likelihood(q, o.z, params.detector(o.tier))
                        })
                        .sum::<f64>();
                update_map_probs(&mut p.q, obs, grid, p.searcher, params);
                lw
            })
            .collect();
        let total = log_sum_exp(&log_w);
        if !total.is_finite() {
            return Err(FilterError::Divergence { step: self.step });
        }
        for (p, lw) in self.particles.iter_mut().zip(&log_w) {
            p.weight = (lw - total).exp();
        }
        Ok(())
    }

    /// One filter cycle after control `u` produced count `n` and link
    /// reports `obs`.
    #[allow(clippy::too_many_arguments)]
    pub fn update<R: Rng + ?Sized>(
        &mut self,
        grid: &CompleteGrid,
        geom: DomainGeom,
        params: &FilterParams,
        u: Control,
        n: u64,
        obs: &[LinkObservation],
        rng: &mut R,
    ) -> Result<UpdateDiagnostics, FilterError> {
        for p in &mut self.particles {
            predict_map_probs(&mut p.q, params.map_stay_prob);
            p.searcher = predict_searcher(grid, p.searcher, &mut p.q, u, params.control_error, rng);
        }

        let stats: Vec<(f64, usize)> = self
            .particles
            .par_iter_mut()
            .map(|p| {
                let lw = log_importance_weight(grid, geom, p.searcher, p.source, &p.q, p.eta, p.theta, n, obs, params)
                    + p.weight.ln();
                let impossible = update_map_probs(&mut p.q, obs, grid, p.searcher, params);
                let c = c_constant(grid.node(p.searcher).into(), p.source, geom);
                (p.eta, p.theta) = update_gamma(p.eta, p.theta, n, c);
                (lw, impossible)
            })
            .collect();
        self.step += 1;

        let log_w: Vec<f64> = stats.iter().map(|s| s.0).collect();
        let impossible_observations = stats.iter().map(|s| s.1).sum();
        let total = log_sum_exp(&log_w);
        if !total.is_finite() {
            return Err(FilterError::Divergence { step: self.step });
        }
        for (p, lw) in self.particles.iter_mut().zip(&log_w) {
            p.weight = (lw - total).exp();
        }

        let ess = self.effective_sample_size();
        let resample = params.ess_threshold.is_none_or(|t| ess < t * self.len() as f64);
        if resample {
            self.resample_and_regularise(geom, rng);
        }
        Ok(UpdateDiagnostics {
            effective_sample_size: ess,
            impossible_observations,
            resampled: resample,
        })
    }

    /// Systematic resampling of whole particles, then Gaussian jitter of the
    /// source positions with a per-coordinate Silverman bandwidth. Jittered
    /// positions that leave the disk are redrawn.
    pub fn resample_and_regularise<R: Rng + ?Sized>(&mut self, geom: DomainGeom, rng: &mut R) {
        let weights: Vec<f64> = self.particles.iter().map(|p| p.weight).collect();
        let ancestors = systematic_resample(&weights, rng);
        let n = self.particles.len();
        let mut next: Vec<Particle> = ancestors.iter().map(|&i| self.particles[i].clone()).collect();

        let (_, cov) = source_moments(next.iter().map(|p| (p.source, 1.0 / n as f64)));
        // Silverman's rule in d = 2: h = (4 / (d + 2))^(1/(d+4)) n^(-1/(d+4)) sigma.
        let shrink = (n as f64).powf(-1.0 / 6.0);
        let h = [cov[0][0].sqrt() * shrink, cov[1][1].sqrt() * shrink];
        // A single surviving source leaves only rounding noise in `cov`.
        let collapsed = h[0].max(h[1]) < 1e-9 * geom.radius;

        for p in &mut next {
            p.weight = 1.0 / n as f64;
            if collapsed {
                continue;
            }
            for _ in 0..JITTER_RETRIES {
                let ex: f64 = StandardNormal.sample(rng);
                let ey: f64 = StandardNormal.sample(rng);
                let cand = Point2::new(p.source.x + h[0] * ex, p.source.y + h[1] * ey);
                if geom.contains_strictly(cand) {
                    p.source = cand;
                    break;
                }
            }
        }
        self.particles = next;
    }

    /// Node carrying the most searcher weight; lowest index on ties.
    pub fn map_searcher_node(&self, grid: &CompleteGrid) -> usize {
        let mut node_mass = vec![0.0; grid.node_count()];
        for p in &self.particles {
            node_mass[p.searcher] += p.weight;
        }
        argmax(&node_mass)
    }

    pub fn summary(&self, grid: &CompleteGrid) -> PosteriorSummary {
        let mut node_mass = vec![0.0; grid.node_count()];
        let mut a_mean = 0.0;
        let mut map_probs = vec![0.0; grid.link_count()];
        for p in &self.particles {
            node_mass[p.searcher] += p.weight;
            a_mean += p.weight * p.rate_mean();
            for (m, q) in map_probs.iter_mut().zip(&p.q) {
                *m += p.weight * q;
            }
        }
        let map_node = argmax(&node_mass);
        let (source_mean, source_cov) = source_moments(self.particles.iter().map(|p| (p.source, p.weight)));
        PosteriorSummary {
            searcher_map_node: grid.node(map_node),
            source_mean,
            source_cov,
            a_mean,
            map_probs,
        }
    }
}

fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &w)| if w > best.1 { (i, w) } else { best },
        )
        .0
}

/// Weighted mean and covariance of source positions.
fn source_moments(it: impl Iterator<Item = (Point2, f64)> + Clone) -> (Point2, [[f64; 2]; 2]) {
    let total: f64 = it.clone().map(|(_, w)| w).sum();
    let (mx, my) = it.clone().fold((0.0, 0.0), |(x, y), (p, w)| (x + w * p.x, y + w * p.y));
    let mean = Point2::new(mx / total, my / total);
    let mut cov = [[0.0; 2]; 2];
    for (p, w) in it {
        let d = [p.x - mean.x, p.y - mean.y];
        for i in 0..2 {
            for j in 0..2 {
                cov[i][j] += w * d[i] * d[j] / total;
            }
        }
    }
    (mean, cov)
}
