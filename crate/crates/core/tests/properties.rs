use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use slearn_core::bayes::{sampling_posterior, GaussianPrior, TaskNoise};
use slearn_core::metrics::{self, bin_of, cov_space, jct_speedup, resistance, ResistanceAt};
use slearn_core::predictors::{
    pilot_count, select_pilots, slearn_estimate, utility_point_estimate, SamplerState, RATIO_GRID,
};
use slearn_core::stats;
use slearn_core::traceio::{self, ArrivalProcess, SynthSpec, WidthLaw};
use slearn_core::{
    queue_index_for, run, Job, JobFeatures, Policy, SamplingMode, SchedulerConfig, SimResult,
};

fn features(app: usize, user: usize) -> JobFeatures {
    JobFeatures {
        application: format!("app{app}"),
        job_name: format!("name{}", app % 2),
        user: format!("u{user}"),
        submit_day: (user % 7) as u8,
        submit_hour: (app % 24) as u8,
        cpu_req: 1.0 + app as f64,
        mem_req: 0.5,
    }
}

fn arb_job(i: usize) -> impl Strategy<Value = Job> {
    (
        0u64..30,
        prop::collection::vec(prop::collection::vec(1u64..50, 1..6), 1..4),
        0usize..3,
        0usize..3,
    )
        .prop_map(move |(arrival, stages, app, user)| {
            let f = features(app, user);
            if stages.len() == 1 {
                Job::new(format!("j{i:02}"), arrival, stages[0].clone(), f).unwrap()
            } else {
                Job::with_stages(format!("j{i:02}"), arrival, stages, f).unwrap()
            }
        })
}

fn arb_jobs() -> impl Strategy<Value = Vec<Job>> {
    (1usize..25).prop_flat_map(|n| {
        (0..n)
            .map(arb_job)
            .collect::<Vec<_>>()
            .prop_map(|mut jobs| {
                jobs.sort_by_key(Job::arrival_ms);
                jobs
            })
    })
}

fn small_cfg(machines: usize, seed: u64) -> SchedulerConfig {
    SchedulerConfig {
        machines,
        num_queues: 4,
        q0_hi_ms: 20,
        thin_limit: 2,
        adaptive_t: 2,
        sampling: SamplingMode::Fixed(0.4),
        seed,
        ..SchedulerConfig::default()
    }
}

fn by_id(r: &SimResult) -> BTreeMap<String, slearn_core::JobRecord> {
    r.jobs
        .iter()
        .map(|j| (j.job_id.clone(), j.clone()))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn reordering_simultaneous_arrivals_changes_nothing(
        jobs in arb_jobs(), machines in 1usize..6, seed in any::<u64>(), rot in 0usize..5,
    ) {
        // reverse and rotate each group of equal arrivals; order stays sorted
        let mut permuted = Vec::new();
        let mut i = 0;
        while i < jobs.len() {
            let t = jobs[i].arrival_ms();
            let mut group: Vec<Job> = jobs[i..].iter().take_while(|j| j.arrival_ms() == t).cloned().collect();
            i += group.len();
            group.reverse();
            let k = rot % group.len();
            group.rotate_left(k);
            permuted.extend(group);
        }
        for policy in Policy::ALL {
            let cfg = small_cfg(machines, seed);
            let a = run(&jobs, policy, &cfg).unwrap();
            let b = run(&permuted, policy, &cfg).unwrap();
            prop_assert_eq!(by_id(&a), by_id(&b), "policy {}", policy);
            prop_assert_eq!(a.events, b.events);
        }
    }

    #[test]
    fn trace_round_trip(jobs in arb_jobs()) {
        let mut buf = Vec::new();
        traceio::write_trace_to(&jobs, &mut buf).unwrap();
        prop_assert_eq!(traceio::read_trace(buf.as_slice()).unwrap(), jobs);
    }

    #[test]
    fn posterior_between_prior_and_data(
        mu in -100.0f64..100.0, s0 in 0.01f64..100.0, s1 in 0.01f64..100.0,
        samples in prop::collection::vec(-100.0f64..100.0, 1..20),
    ) {
        let p = sampling_posterior(&GaussianPrior::new(mu, s0).unwrap(), &TaskNoise::new(s1).unwrap(), &samples).unwrap();
        let ybar = samples.iter().sum::<f64>() / samples.len() as f64;
        let (lo, hi) = (mu.min(ybar), mu.max(ybar));
        let slack = 1e-9 * (1.0 + lo.abs().max(hi.abs()));
        prop_assert!(p.mean >= lo - slack && p.mean <= hi + slack);
        prop_assert!(p.variance <= s0.min(s1 / samples.len() as f64) * (1.0 + 1e-12));
        // more samples never increase the variance
        let mut more = samples.clone();
        more.push(ybar);
        let q = sampling_posterior(&GaussianPrior::new(mu, s0).unwrap(), &TaskNoise::new(s1).unwrap(), &more).unwrap();
        prop_assert!(q.variance < p.variance);
    }

    #[test]
    fn utility_estimate_within_support(raw in prop::collection::vec((0.1f64..1e6, 0.001f64..1.0), 1..20)) {
        let mass: f64 = raw.iter().map(|r| r.1).sum();
        let hist: Vec<(f64, f64)> = raw.iter().map(|&(a, p)| (a, p / mass)).collect();
        let c = utility_point_estimate(&hist).unwrap();
        let lo = hist.iter().map(|h| h.0).fold(f64::INFINITY, f64::min);
        let hi = hist.iter().map(|h| h.0).fold(0.0, f64::max);
        prop_assert!(c >= lo * (1.0 - 1e-12) && c <= hi * (1.0 + 1e-12));
    }

    #[test]
    fn queue_index_is_monotone_and_consistent(a in 1.0f64..1e15, b in 1.0f64..1e15) {
        let cfg = SchedulerConfig::default();
        let (qa, qb) = (queue_index_for(a, &cfg), queue_index_for(b, &cfg));
        if a <= b {
            prop_assert!(qa <= qb);
        }
        prop_assert!(cfg.queue_lo_ms(qa) <= a && a < cfg.queue_hi_ms(qa));
    }

    #[test]
    fn cov_space_scale_invariant(d in prop::collection::vec(1u64..10_000, 2..50), c in 1u64..50) {
        let scaled: Vec<u64> = d.iter().map(|x| x * c).collect();
        let (a, b) = (cov_space(&d, 0.03).unwrap(), cov_space(&scaled, 0.03).unwrap());
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a));
    }

    #[test]
    fn pilots_are_distinct_sorted_subsets(width in 1usize..500, ratio in 0.001f64..1.0, seed in any::<u64>()) {
        let count = pilot_count(width, ratio);
        prop_assert!(count >= 1 && count <= width);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = select_pilots(width, count, &mut rng).unwrap();
        prop_assert_eq!(p.len(), count);
        prop_assert!(p.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(p.iter().all(|&i| i < width));
    }

    #[test]
    fn sampling_estimate_scales_mean(samples in prop::collection::vec(1.0f64..1e6, 1..10), width in 1usize..1000) {
        let p = slearn_estimate(&samples, width).unwrap();
        prop_assert!((p.total_ms - p.mean_task_ms * width as f64).abs() <= 1e-9 * p.total_ms);
    }

    #[test]
    fn sampler_only_emits_grid_ratios(scores in prop::collection::vec(0.5f64..3.0, 1..200), t in 1usize..6) {
        let mut s = SamplerState::new(t);
        for (i, &v) in scores.iter().enumerate() {
            let r = s.next_ratio();
            prop_assert!(RATIO_GRID.contains(&r));
            if i < 3 * t {
                prop_assert_eq!(r, [0.02, 0.03, 0.04][i / t]);
            }
            s.score_update(r, v, 1.0);
        }
    }

    #[test]
    fn finished_runs_satisfy_metric_invariants(jobs in arb_jobs(), machines in 1usize..6, seed in any::<u64>()) {
        for policy in [Policy::SLearn, Policy::Oracle, Policy::Las] {
            let cfg = small_cfg(machines, seed);
            let r = run(&jobs, policy, &cfg).unwrap();
            let same = jct_speedup(&r, &r).unwrap();
            prop_assert!(same.per_job.iter().all(|x| x.ratio == 1.0));
            prop_assert_eq!(same.mean, 1.0);
            let bins = metrics::bin_counts(&r, cfg.thin_limit);
            prop_assert_eq!(bins.iter().sum::<usize>(), jobs.len());
            for j in &r.jobs {
                for at in [ResistanceAt::Arrival, ResistanceAt::EstimateReady] {
                    prop_assert!(resistance(&r, &j.job_id, at).unwrap() >= 0.0);
                }
                prop_assert!(metrics::normalized_waiting_time(j) >= 0.0);
                prop_assert!(j.jct_ms >= j.task_durations_ms.iter().copied().max().unwrap());
            }
            if policy == Policy::Oracle {
                prop_assert_eq!(metrics::correct_queue_fraction(&r, &cfg).unwrap_or(1.0), 1.0);
                let m = metrics::misplacement_report(&r, &cfg);
                prop_assert_eq!((m.misplaced_over_pct, m.misplaced_under_pct), (0.0, 0.0));
            }
        }
    }

    #[test]
    fn dag_grouping_conserves_work(jobs in arb_jobs(), seed in any::<u64>()) {
        let dags = traceio::gen_dag_trace(&jobs, seed).unwrap();
        let before: u64 = jobs.iter().map(Job::total_runtime_ms).sum();
        let after: u64 = dags.jobs.iter().map(Job::total_runtime_ms).sum();
        prop_assert_eq!(before, after);
        prop_assert_eq!(dags.group_sizes.iter().sum::<usize>(), jobs.len());
        prop_assert!(dags.group_sizes[..dags.group_sizes.len() - 1].iter().all(|k| (2..=5).contains(k)));
        for d in &dags.jobs {
            prop_assert!(d.is_dag());
        }
    }
}

#[test]
fn bins_partition_the_plane() {
    for width in 1..6 {
        for total in [1, 999_999, 1_000_000, 5_000_000] {
            let b = bin_of(width, total, 3, 1_000_000);
            let thin = width < 3;
            let small = total < 1_000_000;
            let expected = match (thin, small) {
                (true, true) => metrics::Bin::Bin1,
                (false, true) => metrics::Bin::Bin2,
                (true, false) => metrics::Bin::Bin3,
                (false, false) => metrics::Bin::Bin4,
            };
            assert_eq!(b, expected);
        }
    }
}

#[test]
fn generator_moments_match_parameters() {
    let jobs = traceio::gen_synthetic(&SynthSpec {
        n_jobs: 10_000,
        arrival: ArrivalProcess::Poisson { rate_per_s: 1.0 },
        width: WidthLaw::Uniform { min: 100, max: 100 },
        mu_ms: 100_000.0,
        sigma0_ms: 1_000.0,
        sigma1_ms: 1_000.0,
        seed: 42,
        ..SynthSpec::default()
    })
    .unwrap();
    let means: Vec<f64> = jobs.iter().map(Job::mean_task_ms).collect();
    // the spread of sample means includes the within-job term sigma1^2 / n
    let across = stats::population_std(&means).unwrap();
    let expected_across = (1_000.0f64.powi(2) + 1_000.0f64.powi(2) / 100.0).sqrt();
    assert!(
        (across / expected_across - 1.0).abs() < 0.1,
        "across-job std {across}"
    );
    let pooled_var: f64 = jobs
        .iter()
        .map(|j| {
            let d: Vec<f64> = j.task_durations_ms().iter().map(|&x| x as f64).collect();
            stats::population_std(&d).unwrap().powi(2)
        })
        .sum::<f64>()
        / jobs.len() as f64;
    assert!(
        (pooled_var.sqrt() / 1_000.0 - 1.0).abs() < 0.1,
        "within-job std {}",
        pooled_var.sqrt()
    );
    assert!((stats::mean(&means).unwrap() / 100_000.0 - 1.0).abs() < 0.01);
}
