use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tracer_core::control::{draw_hypotheses, expected_reward};
use tracer_core::diffusion::mean_concentration_field;
use tracer_core::harness::environment_for_run;
use tracer_core::sensing::observe_links;
use tracer_core::{CanonicalChain, CompleteGrid, Control, EnvironmentMap, ParticleSet, SearchConfig};

fn setup(particles: usize, reward_samples: usize) -> (SearchConfig, Arc<CompleteGrid>, EnvironmentMap, ParticleSet) {
    let config = SearchConfig {
        particles,
        reward_samples,
        ..SearchConfig::default()
    };
    let grid = Arc::new(CompleteGrid::new(config.radius).unwrap());
    let env = environment_for_run(&config, Arc::clone(&grid), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let set = ParticleSet::init(&grid, particles, config.start, config.geom(), config.prior, &mut rng).unwrap();
    (config, grid, env, set)
}

fn field_solve(c: &mut Criterion) {
    let (config, _, env, _) = setup(1, 1);
    c.bench_function("field solve R0=9 p=0.35", |b| {
        b.iter(|| {
            let chain = CanonicalChain::build(&env);
            black_box(mean_concentration_field(&chain, &env, config.source, config.release_rate).unwrap())
        })
    });
}

fn filter_update(c: &mut Criterion) {
    let (config, grid, env, set) = setup(2000, 1);
    let params = config.filter_params();
    let geom = config.geom();
    let node = grid.node_index(config.start).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let obs = observe_links(&env, node, params.primary, params.secondary, &mut rng);
    c.bench_function("filter update N=2000", |b| {
        b.iter_batched(
            || set.clone(),
            |mut s| {
                s.update(&grid, geom, &params, Control::Stay, 1, &obs, &mut rng)
                    .unwrap();
                s
            },
            BatchSize::LargeInput,
        )
    });
}

fn reward(c: &mut Criterion) {
    let (config, grid, _, set) = setup(2000, 200);
    let params = config.control_params();
    let geom = config.geom();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let hypotheses = draw_hypotheses(&set, &params, &mut rng);
    c.bench_function("expected reward N=2000 M=200, 5 controls", |b| {
        b.iter(|| {
            Control::ALL
                .map(|u| expected_reward(&set, &grid, geom, u, &hypotheses).0)
                .into_iter()
                .sum::<f64>()
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = field_solve, filter_update, reward
}
criterion_main!(benches);
