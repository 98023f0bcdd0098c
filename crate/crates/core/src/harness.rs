//! Search runs, Monte Carlo batches and persistence.

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytic::{DomainGeom, Point2};
use crate::control::{passable_controls, select_control, ControlParams, RewardSample, VisitHistory};
use crate::diffusion::{mean_concentration_field, CanonicalChain, ConcentrationField};
use crate::error::{FieldError, FilterError, HarnessError};
use crate::lattice::{CompleteGrid, EnvironmentMap, NodeCoord, PERCOLATION_THRESHOLD};
use crate::rbpf::{FilterParams, ParticleSet, PosteriorSummary, PriorParams};
use crate::sensing::{
    evolve_map, execute_control, observe_links, sample_count, Control, DetectionMatrix, SensorStreams,
};

/// Version tag written into every persisted document.
pub const SCHEMA_VERSION: u32 = 1;

const FILTER_STREAM: u64 = 4;
const CONTROL_STREAM: u64 = 5;
/// Mean link probability above which a link is listed in snapshots.
const TOP_Q: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Expected-information-gain control driven by the particle filter.
    Informative,
    /// Uniformly random admissible controls at the true position.
    RandomWalk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub radius: u32,
    pub removal_fraction: f64,
    pub source: NodeCoord,
    /// True release rate `A0` of the ground-truth field.
    pub release_rate: f64,
    pub start: NodeCoord,
    pub particles: usize,
    pub reward_samples: usize,
    pub control_error: f64,
    pub primary: DetectionMatrix,
    pub secondary: DetectionMatrix,
    pub map_stay_prob: f64,
    pub prior: PriorParams,
    pub max_steps: usize,
    pub env_seed: u64,
    pub run_seed: u64,
    /// Let the true map flip links with probability `1 - map_stay_prob`.
    pub evolve_map: bool,
    /// Hypothesise counts from sampled rates instead of Gamma means.
    pub sample_rate: bool,
    /// Reuse environment `env_seed` for every Monte Carlo run.
    pub pin_environment: bool,
    pub ess_threshold: Option<f64>,
    pub policy: Policy,
}

impl Default for SearchConfig {
    fn default() -> Self {
        let filter = FilterParams::default();
        Self {
            radius: 9,
            removal_fraction: 0.35,
            source: NodeCoord::new(0, 7),
            release_rate: 12.0,
            start: NodeCoord::new(9, -4),
            particles: 4000,
            reward_samples: 400,
            control_error: filter.control_error,
            primary: filter.primary,
            secondary: filter.secondary,
            map_stay_prob: filter.map_stay_prob,
            prior: PriorParams::default(),
            max_steps: 100,
            env_seed: 1,
            run_seed: 1,
            evolve_map: true,
            sample_rate: false,
            pin_environment: false,
            ess_threshold: None,
            policy: Policy::Informative,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Invalid(m));
        if self.radius == 0 {
            return bad("radius must be at least 1".into());
        }
        if !(0.0..PERCOLATION_THRESHOLD).contains(&self.removal_fraction) {
            return bad(format!("removal_fraction {} outside [0, 0.5)", self.removal_fraction));
        }
        if self.release_rate.is_nan() || self.release_rate <= 0.0 {
            return bad(format!("release_rate must be positive, got {}", self.release_rate));
        }
        if self.particles == 0 || self.reward_samples == 0 || self.max_steps == 0 {
            return bad("particles, reward_samples and max_steps must be at least 1".into());
        }
        for (name, p) in [
            ("control_error", self.control_error),
            ("map_stay_prob", self.map_stay_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1]"));
            }
        }
        let positive = |x: f64| x > 0.0;
        if !(0.0..=1.0).contains(&self.prior.q0) || !positive(self.prior.eta0) || !positive(self.prior.theta0) {
            return bad("prior needs q0 in [0, 1] and positive eta0, theta0".into());
        }
        for det in [self.primary, self.secondary] {
            det.validate().map_err(|e| HarnessError::Invalid(e.to_string()))?;
        }
        let grid = CompleteGrid::new(self.radius)?;
        let Some(src) = grid.node_index(self.source) else {
            return Err(FieldError::SourceOutside(self.source).into());
        };
        if grid.is_boundary(src) {
            return Err(FieldError::SourceOnBoundary(self.source).into());
        }
        if !grid.contains(self.start) {
            return bad(format!("start {} is not on the grid", self.start));
        }
        Ok(())
    }

    pub fn geom(&self) -> DomainGeom {
        DomainGeom::new(self.radius as f64)
    }

    pub fn filter_params(&self) -> FilterParams {
        FilterParams {
            control_error: self.control_error,
            primary: self.primary,
            secondary: self.secondary,
            map_stay_prob: self.map_stay_prob,
            ess_threshold: self.ess_threshold,
        }
    }

    pub fn control_params(&self) -> ControlParams {
        ControlParams {
            samples: self.reward_samples,
            sample_rate: self.sample_rate,
        }
    }

    /// Seeds `(env, run)` of Monte Carlo run `index`.
    pub fn run_seeds(&self, index: usize) -> (u64, u64) {
        let env = if self.pin_environment {
            self.env_seed
        } else {
            self.env_seed.wrapping_add(index as u64)
        };
        (env, self.run_seed.wrapping_add(index as u64))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    FailureUnfound,
    FailureMisidentified,
}

/// Compact view of the posterior for logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSnapshot {
    pub searcher_map: NodeCoord,
    pub source_mean: Point2,
    pub source_cov: [[f64; 2]; 2],
    pub a_mean: f64,
    pub support_size: usize,
    /// Links whose weighted mean existence probability exceeds 0.6.
    pub top_q_links: Vec<usize>,
}

impl PosteriorSnapshot {
    fn new(summary: &PosteriorSummary, set: &ParticleSet) -> Self {
        let mut support: Vec<usize> = set.particles().iter().map(|p| p.searcher).collect();
        support.sort_unstable();
        support.dedup();
        Self {
            searcher_map: summary.searcher_map_node,
            source_mean: summary.source_mean,
            source_cov: summary.source_cov,
            a_mean: summary.a_mean,
            support_size: support.len(),
            top_q_links: summary
                .map_probs
                .iter()
                .enumerate()
                .filter(|(_, &q)| q > TOP_Q)
                .map(|(l, _)| l)
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub k: usize,
    pub commanded: Control,
    pub realised: Control,
    pub position: NodeCoord,
    pub count: u64,
    pub map_changed: bool,
    pub rewards: Vec<RewardSample>,
    pub heuristic_triggered: bool,
    pub posterior: Option<PosteriorSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub run_id: usize,
    pub env_seed: u64,
    pub run_seed: u64,
    pub outcome: Outcome,
    pub steps_taken: usize,
    pub diagnostics: Vec<String>,
    pub final_posterior: Option<PosteriorSnapshot>,
    pub steps: Vec<StepLog>,
}

impl RunRecord {
    /// Step log as JSON lines, one per time step.
    pub fn write_step_log<W: Write>(&self, mut out: W) -> Result<(), HarnessError> {
        for s in &self.steps {
            serde_json::to_writer(&mut out, s)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunBrief {
    pub run_id: usize,
    pub outcome: Outcome,
    pub steps: usize,
    pub env_seed: u64,
    pub run_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub schema_version: u32,
    pub runs: usize,
    /// Percentage of successful runs.
    pub success_rate: f64,
    /// Mean steps over successful runs only; `None` without successes.
    pub mean_steps: Option<f64>,
    pub failures_unfound: usize,
    pub failures_misidentified: usize,
    pub config: SearchConfig,
    pub records: Vec<RunBrief>,
}

impl ExperimentSummary {
    pub fn from_records(config: &SearchConfig, records: &[RunRecord]) -> Self {
        let successes: Vec<usize> = records
            .iter()
            .filter(|r| r.outcome == Outcome::Success)
            .map(|r| r.steps_taken)
            .collect();
        let count = |o| records.iter().filter(|r| r.outcome == o).count();
        Self {
            schema_version: SCHEMA_VERSION,
            runs: records.len(),
            success_rate: 100.0 * successes.len() as f64 / records.len().max(1) as f64,
            mean_steps: (!successes.is_empty())
                .then(|| successes.iter().sum::<usize>() as f64 / successes.len() as f64),
            failures_unfound: count(Outcome::FailureUnfound),
            failures_misidentified: count(Outcome::FailureMisidentified),
            config: config.clone(),
            records: records
                .iter()
                .map(|r| RunBrief {
                    run_id: r.run_id,
                    outcome: r.outcome,
                    steps: r.steps_taken,
                    env_seed: r.env_seed,
                    run_seed: r.run_seed,
                })
                .collect(),
        }
    }

    /// Per-run CSV `run_id,outcome,steps,env_seed,run_seed`.
    pub fn write_runs_csv<W: Write>(&self, out: W) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Ground-truth field for the configured source on `env`.
pub fn solve_field(config: &SearchConfig, env: &EnvironmentMap) -> Result<ConcentrationField, FieldError> {
    mean_concentration_field(&CanonicalChain::build(env), env, config.source, config.release_rate)
}

/// Generates the environment for Monte Carlo run `index`, with start and
/// source on the passage network.
pub fn environment_for_run(
    config: &SearchConfig,
    grid: Arc<CompleteGrid>,
    index: usize,
) -> Result<EnvironmentMap, HarnessError> {
    let (env_seed, _) = config.run_seeds(index);
    Ok(EnvironmentMap::generate_with(
        grid,
        config.removal_fraction,
        env_seed,
        &[config.start, config.source],
    )?)
}

/// One complete search on `env` with run seed `seed`.
pub fn run_search(config: &SearchConfig, mut env: EnvironmentMap, seed: u64) -> Result<RunRecord, HarnessError> {
    config.validate()?;
    let grid = Arc::clone(env.grid());
    if grid.radius() != config.radius {
        return Err(HarnessError::Invalid(format!(
            "environment radius {} differs from configured {}",
            grid.radius(),
            config.radius
        )));
    }
    let geom = config.geom();
    let filter = config.filter_params();
    let control = config.control_params();
    let source = grid.node_index(config.source).expect("validated");
    let mut pos = grid.node_index(config.start).expect("validated");
    let mut field = solve_field(config, &env)?;

    let mut sensors = SensorStreams::new(seed);
    let mut filter_rng = stream(seed, FILTER_STREAM);
    let mut control_rng = stream(seed, CONTROL_STREAM);

    let mut set = match config.policy {
        Policy::Informative => Some(ParticleSet::init(
            &grid,
            config.particles,
            config.start,
            geom,
            config.prior,
            &mut filter_rng,
        )?),
        Policy::RandomWalk => None,
    };
    let mut history = VisitHistory::new();
    history.push(config.start);
    let mut last_obs = observe_links(&env, pos, config.primary, config.secondary, &mut sensors.links);
    if let Some(s) = set.as_mut() {
        s.observe_links(&grid, &filter, &last_obs)
            .map_err(|e| HarnessError::Invalid(e.to_string()))?;
    }

    let mut record = RunRecord {
        schema_version: SCHEMA_VERSION,
        run_id: 0,
        env_seed: env.seed(),
        run_seed: seed,
        outcome: Outcome::FailureUnfound,
        steps_taken: 0,
        diagnostics: Vec::new(),
        final_posterior: None,
        steps: Vec::new(),
    };

    let adjudicate = |set: &Option<ParticleSet>| match set {
        Some(s) if !s.supports(source) => Outcome::FailureMisidentified,
        _ => Outcome::Success,
    };

    if pos == source {
        record.outcome = adjudicate(&set);
    } else {
        for k in 1..=config.max_steps {
            let admissible = passable_controls(&last_obs);
            let (u, rewards, heuristic) = match &set {
                Some(s) => {
                    let d = select_control(s, &grid, geom, &history, &admissible, &control, &mut control_rng);
                    if d.zero_denominators > 0 {
                        record.diagnostics.push(format!(
                            "step {k}: {} reward samples had a zero denominator",
                            d.zero_denominators
                        ));
                    }
                    (d.control, d.rewards, d.heuristic_triggered)
                }
                None => (
                    admissible[control_rng.random_range(0..admissible.len())],
                    Vec::new(),
                    false,
                ),
            };

            let motion = execute_control(&env, pos, u, config.control_error, &mut sensors.motion);
            pos = motion.node;

            let mut map_changed = false;
            if config.evolve_map && evolve_map(&mut env, config.map_stay_prob, &mut sensors.map) > 0 {
                map_changed = true;
                match solve_field(config, &env) {
                    Ok(f) => field = f,
                    Err(FieldError::SourceTrapped(_)) => record
                        .diagnostics
                        .push(format!("step {k}: source cut off from the rim, keeping previous field")),
                    Err(e) => return Err(e.into()),
                }
            }

            let count = sample_count(&field, pos, &mut sensors.counts);
            last_obs = observe_links(&env, pos, config.primary, config.secondary, &mut sensors.links);
            let obs = &last_obs;

            let mut posterior = None;
            if let Some(s) = set.as_mut() {
                match s.update(&grid, geom, &filter, u, count, obs, &mut filter_rng) {
                    Ok(_) => {}
                    Err(FilterError::Divergence { step }) => {
                        record.diagnostics.push(format!("filter diverged at step {step}"));
                        record.steps_taken = k;
                        record.outcome = Outcome::FailureUnfound;
                        break;
                    }
                    Err(e) => return Err(HarnessError::Invalid(e.to_string())),
                }
                let summary = s.summary(&grid);
                history.push(summary.searcher_map_node);
                posterior = Some(PosteriorSnapshot::new(&summary, s));
            }

            record.steps.push(StepLog {
                k,
                commanded: u,
                realised: motion.realised,
                position: grid.node(pos),
                count,
                map_changed,
                rewards,
                heuristic_triggered: heuristic,
                posterior,
            });
            record.steps_taken = k;

            if pos == source {
                record.outcome = adjudicate(&set);
                break;
            }
        }
    }
    record.final_posterior = set.as_ref().map(|s| PosteriorSnapshot::new(&s.summary(&grid), s));
    Ok(record)
}

/// `runs` independent searches with derived seeds on a pool of `workers`
/// threads. Results do not depend on `workers`.
pub fn monte_carlo(
    config: &SearchConfig,
    runs: usize,
    workers: usize,
) -> Result<(ExperimentSummary, Vec<RunRecord>), HarnessError> {
    config.validate()?;
    if runs == 0 {
        return Err(HarnessError::Invalid("runs must be at least 1".into()));
    }
    let grid = Arc::new(CompleteGrid::new(config.radius)?);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| HarnessError::Invalid(e.to_string()))?;
    let records: Vec<RunRecord> = pool.install(|| {
        (0..runs)
            .into_par_iter()
            .map(|i| {
                let env = environment_for_run(config, Arc::clone(&grid), i)?;
                let (_, seed) = config.run_seeds(i);
                let mut r = run_search(config, env, seed)?;
                r.run_id = i;
                Ok(r)
            })
            .collect::<Result<_, HarnessError>>()
    })?;
    Ok((ExperimentSummary::from_records(config, &records), records))
}

/// [`monte_carlo`] with uniformly random admissible controls and no filter.
pub fn random_walk_baseline(
    config: &SearchConfig,
    runs: usize,
    workers: usize,
) -> Result<(ExperimentSummary, Vec<RunRecord>), HarnessError> {
    let cfg = SearchConfig {
        policy: Policy::RandomWalk,
        ..config.clone()
    };
    monte_carlo(&cfg, runs, workers)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SearchConfig {
        SearchConfig {
            particles: 200,
            reward_samples: 20,
            max_steps: 30,
            ..SearchConfig::default()
        }
    }

    #[test]
    fn defaults_validate() {
        SearchConfig::default().validate().unwrap();
        let d = SearchConfig::default();
        assert_eq!(
            (d.radius, d.particles, d.reward_samples, d.max_steps),
            (9, 4000, 400, 100)
        );
        assert_eq!(d.start, NodeCoord::new(9, -4));
    }

    #[test]
    fn invalid_configs_rejected() {
        let cases = [
            SearchConfig {
                max_steps: 0,
                ..small()
            },
            SearchConfig {
                removal_fraction: 0.5,
                ..small()
            },
            SearchConfig {
                source: NodeCoord::new(9, 0),
                ..small()
            },
            SearchConfig {
                source: NodeCoord::new(30, 0),
                ..small()
            },
            SearchConfig {
                start: NodeCoord::new(30, 0),
                ..small()
            },
            SearchConfig {
                secondary: DetectionMatrix { p_d: 0.1, p_fa: 0.2 },
                ..small()
            },
        ];
        for c in cases {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn config_json_partial_and_unknown_fields() {
        let c: SearchConfig = serde_json::from_str(r#"{"particles": 10, "source": {"x": 2, "y": -5}}"#).unwrap();
        assert_eq!(c.particles, 10);
        assert_eq!(c.source, NodeCoord::new(2, -5));
        assert_eq!(c.max_steps, 100);
        assert!(serde_json::from_str::<SearchConfig>(r#"{"particels": 10}"#).is_err());
    }

    #[test]
    fn source_at_start_succeeds_immediately() {
        let cfg = SearchConfig {
            source: NodeCoord::new(2, -4),
            start: NodeCoord::new(2, -4),
            ..small()
        };
        let grid = Arc::new(CompleteGrid::new(9).unwrap());
        let env = environment_for_run(&cfg, grid, 4).unwrap();
        let r = run_search(&cfg, env.clone(), 1).unwrap();
        assert_eq!((r.outcome, r.steps_taken), (Outcome::Success, 0));
        assert!(r.steps.is_empty());
        let rw = SearchConfig {
            policy: Policy::RandomWalk,
            ..cfg
        };
        assert_eq!(run_search(&rw, env, 1).unwrap().outcome, Outcome::Success);
    }

    #[test]
    fn step_log_matches_steps_taken() {
        let cfg = small();
        let grid = Arc::new(CompleteGrid::new(9).unwrap());
        let env = EnvironmentMap::generate(grid, 0.35, 2).unwrap();
        let r = run_search(&cfg, env, 3).unwrap();
        assert!(r.steps_taken <= cfg.max_steps);
        assert_eq!(r.steps.len(), r.steps_taken);
        let mut buf = Vec::new();
        r.write_step_log(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), r.steps_taken);
        if r.outcome == Outcome::FailureUnfound && r.diagnostics.is_empty() {
            assert_eq!(r.steps_taken, cfg.max_steps);
        }
    }

    #[test]
    fn random_walk_without_filter() {
        let cfg = SearchConfig {
            policy: Policy::RandomWalk,
            max_steps: 5,
            ..small()
        };
        let grid = Arc::new(CompleteGrid::new(9).unwrap());
        let env = EnvironmentMap::generate(grid, 0.35, 2).unwrap();
        let r = run_search(&cfg, env, 3).unwrap();
        assert_eq!(r.outcome, Outcome::FailureUnfound);
        assert_eq!(r.steps_taken, 5);
        assert!(r.final_posterior.is_none());
        assert!(r.steps.iter().all(|s| s.posterior.is_none()));
    }

    #[test]
    fn field_recomputed_only_when_map_changes() {
        let cfg = SearchConfig {
            evolve_map: true,
            map_stay_prob: 0.998,
            max_steps: 15,
            ..small()
        };
        let grid = Arc::new(CompleteGrid::new(9).unwrap());
        let env = EnvironmentMap::generate(grid, 0.3, 5).unwrap();
        let r = run_search(&cfg, env, 9).unwrap();
        assert!(r.steps.iter().any(|s| s.map_changed));
        let still = SearchConfig {
            evolve_map: false,
            ..cfg
        };
        let grid = Arc::new(CompleteGrid::new(9).unwrap());
        let env = EnvironmentMap::generate(grid, 0.3, 5).unwrap();
        assert!(run_search(&still, env, 9).unwrap().steps.iter().all(|s| !s.map_changed));
    }

    #[test]
    fn summary_statistics() {
        let rec = |id, outcome, steps| RunRecord {
            schema_version: SCHEMA_VERSION,
            run_id: id,
            env_seed: 0,
            run_seed: 0,
            outcome,
            steps_taken: steps,
            diagnostics: vec![],
            final_posterior: None,
            steps: vec![],
        };
        let records = [
            rec(0, Outcome::Success, 20),
            rec(1, Outcome::FailureUnfound, 100),
            rec(2, Outcome::Success, 31),
            rec(3, Outcome::FailureMisidentified, 12),
        ];
        let s = ExperimentSummary::from_records(&small(), &records);
        assert_eq!(s.runs, 4);
        assert_eq!(s.success_rate, 50.0);
        assert_eq!(s.mean_steps, Some(25.5));
        assert_eq!((s.failures_unfound, s.failures_misidentified), (1, 1));
        let none = ExperimentSummary::from_records(&small(), &records[1..2]);
        assert_eq!(none.mean_steps, None);
        let mut csv = Vec::new();
        s.write_runs_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("run_id,outcome,steps,env_seed,run_seed\n0,success,20,0,0\n"));
    }

    #[test]
    fn single_run_summary_equals_run() {
        let cfg = SearchConfig {
            max_steps: 10,
            ..small()
        };
        let (s, records) = monte_carlo(&cfg, 1, 1).unwrap();
        assert_eq!(s.runs, 1);
        assert_eq!(s.records[0].steps, records[0].steps_taken);
        assert_eq!(s.records[0].outcome, records[0].outcome);
    }

    #[test]
    fn seeds_derived_per_run() {
        let cfg = SearchConfig {
            env_seed: 10,
            run_seed: 100,
            ..small()
        };
        assert_eq!(cfg.run_seeds(3), (13, 103));
        let pinned = SearchConfig {
            pin_environment: true,
            ..cfg
        };
        assert_eq!(pinned.run_seeds(3), (10, 103));
    }
}
