use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use rungs::orchestrator::{allocate_configs, average_resource, Mode};
use rungs::scheduler::{water_fill, ClusterDemand};
use rungs::sim::{bracket_spec, straggler_time, Simulation, TraceKind, Workload};
use rungs::space::{Dimension, ParamValue, SearchSpace};

const SAMPLES: u64 = 100_000;
// Asymptotic Kolmogorov critical value at alpha = 0.001.
const KS_CRITICAL: f64 = 1.9495;

fn ks_uniform(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let d = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| (x - i as f64 / n).max((i + 1) as f64 / n - x))
        .fold(0.0, f64::max);
    d * n.sqrt()
}

fn chi_square_uniform(counts: &[u64]) -> (f64, f64) {
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let stat = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let critical = ChiSquared::new((counts.len() - 1) as f64).unwrap().inverse_cdf(0.999);
    (stat, critical)
}

fn draws(dim: Dimension, seed: u64) -> Vec<ParamValue> {
    let name = dim.name.clone();
    let space = SearchSpace::new(vec![dim]);
    (0..SAMPLES).map(|id| space.sample(seed, id).unwrap().values.remove(&name).unwrap()).collect()
}

fn float(v: &ParamValue) -> f64 {
    match v {
        ParamValue::Float(x) => *x,
        other => panic!("expected a float, got {other:?}"),
    }
}

#[test]
fn linear_samples_are_uniform() {
    let xs = draws(Dimension::linear("x", -2.0, 3.0), 11).iter().map(|v| (float(v) + 2.0) / 5.0).collect();
    let d = ks_uniform(xs);
    assert!(d < KS_CRITICAL, "KS statistic {d}");
}

#[test]
fn log_samples_are_uniform_in_exponent() {
    let xs: Vec<f64> = draws(Dimension::log("lr", 1e-5, 1e-1), 12).iter().map(float).collect();
    assert!(xs.iter().all(|&x| (1e-5..=1e-1).contains(&x)));
    let d = ks_uniform(xs.iter().map(|x| (x.log10() + 5.0) / 4.0).collect());
    assert!(d < KS_CRITICAL, "KS statistic {d}");
}

#[test]
fn integer_samples_are_uniform() {
    let mut counts = vec![0u64; 11];
    for v in draws(Dimension::integer("layers", -3, 7), 13) {
        match v {
            ParamValue::Int(i) => counts[(i + 3) as usize] += 1,
            other => panic!("expected an integer, got {other:?}"),
        }
    }
    let (stat, critical) = chi_square_uniform(&counts);
    assert!(stat < critical, "chi-square {stat} >= {critical}");
}

#[test]
fn categorical_samples_are_uniform() {
    let choices = ["sgd", "adam", "rmsprop", "lamb", "lion"];
    let mut counts = vec![0u64; choices.len()];
    for v in draws(Dimension::categorical("opt", choices), 14) {
        let ParamValue::Str(s) = v else { panic!("expected a string") };
        counts[choices.iter().position(|c| *c == s).unwrap()] += 1;
    }
    let (stat, critical) = chi_square_uniform(&counts);
    assert!(stat < critical, "chi-square {stat} >= {critical}");
}

#[test]
fn straggler_mean_matches_half_normal() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for sigma in [0.5, 1.0, 2.0] {
        let z = Normal::new(0.0, sigma).unwrap();
        let base = 16.0;
        let mean = (0..SAMPLES).map(|_| straggler_time(base, z.sample(&mut rng))).sum::<f64>() / SAMPLES as f64;
        let want = base * (1.0 + sigma * (2.0 / std::f64::consts::PI).sqrt());
        assert!((mean / want - 1.0).abs() < 0.01, "sigma {sigma}: {mean} vs {want}");
    }
}

fn space() -> SearchSpace {
    SearchSpace::new(vec![
        Dimension::log("lr", 1e-4, 1.0),
        Dimension::linear("momentum", 0.0, 1.0),
        Dimension::integer("batch", 16, 512),
        Dimension::categorical("act", ["relu", "gelu", "tanh"]),
    ])
}

fn demands() -> impl Strategy<Value = (Vec<ClusterDemand>, u64)> {
    let one = (1u32..=8, 0u64..=20, 1u32..=5);
    (prop::collection::vec(one, 0..8), 0u64..=200).prop_map(|(ds, capacity)| {
        let ds = ds
            .into_iter()
            .enumerate()
            .map(|(i, (kappa, stack_size, w))| ClusterDemand { experiment: format!("e{i}"), kappa, stack_size, weight: w as f64 })
            .collect();
        (ds, capacity)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn sampling_is_deterministic(seed in any::<u64>(), id in any::<u64>()) {
        let s = space();
        let a = s.sample(seed, id).unwrap();
        prop_assert_eq!(&a, &s.sample(seed, id).unwrap());
        prop_assert!(s.admits(&a));
        prop_assert_eq!(a.config_id, id);
    }

    #[test]
    fn water_fill_is_feasible_and_conserving((ds, capacity) in demands()) {
        let alloc = water_fill(&ds, capacity);
        prop_assert_eq!(alloc.len(), ds.len());
        let total: u64 = alloc.values().sum();
        let caps: u64 = ds.iter().map(ClusterDemand::cap).sum();
        prop_assert_eq!(total, caps.min(capacity));
        for d in &ds {
            prop_assert!(alloc[&d.experiment] <= d.cap());
        }
    }

    #[test]
    fn water_fill_never_shrinks_when_capacity_grows((ds, capacity) in demands(), extra in 0u64..=20) {
        let before = water_fill(&ds, capacity);
        let after = water_fill(&ds, capacity + extra);
        for d in &ds {
            prop_assert!(after[&d.experiment] >= before[&d.experiment]);
        }
    }

    #[test]
    fn allocation_is_budget_neutral(
        eta in 2u64..=5,
        s_max in 1u32..=4,
        mask in 1u32..32,
        n in 1u64..5000,
    ) {
        let max_resource = eta.pow(s_max);
        let rates: Vec<u32> = (0..=s_max).filter(|s| mask & (1 << s) != 0).collect();
        prop_assume!(!rates.is_empty() && n >= rates.len() as u64);
        let widths = allocate_configs(n, &rates, 1, max_resource, eta).unwrap();
        prop_assert_eq!(widths.values().sum::<u64>(), n);
        prop_assert!(widths.values().all(|&w| w >= 1));

        // Every exact share is n * (1/rbar_s) / sum(1/rbar).
        let inv: BTreeMap<u32, f64> = rates
            .iter()
            .map(|&s| {
                let r = average_resource(s, 1, max_resource, eta);
                (s, *r.denom() as f64 / *r.numer() as f64)
            })
            .collect();
        let total: f64 = inv.values().sum();
        let shares: BTreeMap<u32, f64> = inv.iter().map(|(&s, &v)| (s, n as f64 * v / total)).collect();
        if shares.values().all(|&x| x >= 1.0) {
            for (s, &w) in &widths {
                prop_assert!((w as f64 - shares[s]).abs() < 1.0, "s={} width {} share {}", s, w, shares[s]);
            }
        }
    }
}

fn mode() -> impl Strategy<Value = Mode> {
    prop_oneof![Just(Mode::SyncSha), Just(Mode::Asha), Just(Mode::SyncHyperband), Just(Mode::AsyncHyperband)]
}

fn workload(workers: usize, sigma: f64, drop_prob: f64, seed: u64, noise: f64) -> Workload {
    let mut w = Workload::new(workers);
    w.straggler_sigma = sigma;
    w.drop_prob = drop_prob;
    w.seed = seed;
    w.objective.seed = seed;
    w.objective.noise = noise;
    w
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn incumbent_only_improves(
        mode in mode(),
        seed in any::<u64>(),
        workers in 1usize..12,
        sigma in 0.0f64..1.5,
        noise in 0.0f64..0.5,
    ) {
        let mut spec = bracket_spec(mode, 54, 1, 27, 3);
        spec.seed = seed;
        if !mode.is_single_bracket() {
            spec.brackets = Some(rungs::orchestrator::BracketSet::Explicit(vec![0, 1]));
        }
        let mut sim = Simulation::new(spec, workload(workers, sigma, 0.001, seed, noise)).unwrap();
        sim.run(Some(2000)).unwrap();
        let trace = sim.tuner().experiment().incumbent_trace();
        for pair in trace.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            prop_assert!(b.time >= a.time);
            prop_assert!(b.resource > a.resource || (b.resource == a.resource && b.loss < a.loss));
        }
    }

    #[test]
    fn busy_workers_never_exceed_pool(
        mode in mode(),
        seed in any::<u64>(),
        workers in 1usize..10,
        sigma in 0.0f64..2.0,
        drop_prob in 0.0f64..0.02,
    ) {
        let mut spec = bracket_spec(mode, 54, 1, 27, 3);
        spec.seed = seed;
        if !mode.is_single_bracket() {
            spec.brackets = Some(rungs::orchestrator::BracketSet::Explicit(vec![0, 1]));
        }
        let mut sim = Simulation::new(spec, workload(workers, sigma, drop_prob, seed, 0.1)).unwrap().keep_trace();
        let report = sim.run(Some(3000)).unwrap().clone();
        let mut busy: BTreeMap<usize, u64> = BTreeMap::new();
        let mut starts = 0;
        let mut ends = 0;
        for e in &report.trace {
            prop_assert!(e.worker < workers);
            match e.kind {
                TraceKind::Start => {
                    prop_assert!(busy.insert(e.worker, e.token).is_none(), "worker {} double-booked", e.worker);
                    starts += 1;
                }
                TraceKind::Complete | TraceKind::Drop => {
                    prop_assert_eq!(busy.remove(&e.worker), Some(e.token));
                    ends += 1;
                }
            }
        }
        prop_assert_eq!(starts, report.jobs_started);
        prop_assert_eq!(starts - ends, sim.tuner().experiment().in_flight().len() as u64);
        prop_assert_eq!(busy.len(), sim.tuner().experiment().in_flight().len());
    }

    #[test]
    fn sync_rungs_wait_for_the_barrier(
        seed in any::<u64>(),
        workers in 1usize..12,
        sigma in 0.0f64..2.0,
        drop_prob in 0.0f64..0.01,
    ) {
        let mut spec = bracket_spec(Mode::SyncSha, 27, 1, 27, 3);
        spec.seed = seed;
        let mut sim = Simulation::new(spec, workload(workers, sigma, drop_prob, seed, 0.2)).unwrap().keep_trace();
        let report = sim.run(None).unwrap().clone();
        prop_assert!(report.finished);
        let mut last_done: BTreeMap<usize, u64> = BTreeMap::new();
        let mut first_start: BTreeMap<usize, u64> = BTreeMap::new();
        for e in &report.trace {
            match e.kind {
                TraceKind::Complete => {
                    last_done.entry(e.rung).and_modify(|t| *t = (*t).max(e.time)).or_insert(e.time);
                }
                TraceKind::Start => {
                    first_start.entry(e.rung).or_insert(e.time);
                }
                TraceKind::Drop => {}
            }
        }
        prop_assert_eq!(first_start.len(), 4);
        for (&rung, &start) in first_start.iter().skip(1) {
            prop_assert!(start >= last_done[&(rung - 1)], "rung {} started at {} before rung {} finished", rung, start, rung - 1);
        }
    }

    #[test]
    fn unbounded_asha_keeps_every_worker_busy(seed in any::<u64>(), workers in 1usize..16, sigma in 0.0f64..2.0) {
        let mut spec = bracket_spec(Mode::Asha, 1, 1, 64, 4);
        spec.unbounded_width = true;
        spec.seed = seed;
        let mut sim = Simulation::new(spec, workload(workers, sigma, 0.0, seed, 0.1)).unwrap();
        for _ in 0..200 {
            if !sim.step(None).unwrap() {
                break;
            }
            prop_assert_eq!(sim.tuner().experiment().in_flight().len(), workers);
        }
    }
}
