use nalgebra::{DMatrix, DVector};
use proptest::collection::vec;
use proptest::prelude::*;

use ltvrec::estimators::{lstd, RhoDiagnostics, Ridge, Transition, TransitionBatch};
use ltvrec::ingest::{filter_users, format_records, parse_str, scale_rewards, FormatConfig, InteractionRecord};
use ltvrec::policy::{mix_policies, policy_probabilities, rank_of_action, PolicyKind, PolicyParams};
use ltvrec::report::rank_histogram;
use ltvrec::rng::seeded;
use ltvrec::simulator::TabularMdp;
use ltvrec::state::{Step, Trajectory, UserState};
use ltvrec::stats::{bootstrap_value, wilcoxon_one_sided};
use rand::Rng;

fn records() -> impl Strategy<Value = Vec<InteractionRecord>> {
    vec((0u8..8, 0u8..6, 0u8..2, 0u64..50), 1..80).prop_map(|rows| {
        rows.into_iter()
            .map(|(u, i, r, t)| InteractionRecord::new(format!("u{u}"), format!("i{i}"), r as f64, t))
            .collect()
    })
}

fn rating_records() -> impl Strategy<Value = Vec<InteractionRecord>> {
    vec((0u8..5, 0u8..6, 1u8..=5, 0u64..50), 1..60).prop_map(|rows| {
        rows.into_iter()
            .map(|(u, i, r, t)| InteractionRecord::new(format!("u{u}"), format!("i{i}"), r as f64, t))
            .collect()
    })
}

fn small_matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    vec(-2.0..2.0f64, rows * cols).prop_map(move |v| DMatrix::from_vec(rows, cols, v))
}

fn random_trajectories(seed: u64, users: usize, k: usize, catalog: &DMatrix<f64>) -> Vec<Trajectory> {
    let mut rng = seeded(seed);
    (0..users)
        .map(|u| Trajectory {
            user_id: u.to_string(),
            steps: (0..rng.random_range(1..8))
                .map(|t| {
                    let item = rng.random_range(0..catalog.ncols());
                    Step {
                        state: DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0)),
                        action: catalog.column(item).into_owned(),
                        item,
                        reward: rng.random_range(0.0..1.0),
                        timestamp: t,
                    }
                })
                .collect(),
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn filtering_is_idempotent_and_respects_minimum(recs in records(), min in 1usize..6, positive in any::<bool>()) {
        let Ok(once) = filter_users(&recs, min, positive) else { return Ok(()) };
        prop_assert!(once.logs.iter().all(|l| l.events.len() >= min));
        let twice = filter_users(&once.to_records(), min, positive).unwrap();
        prop_assert_eq!(&once.logs, &twice.logs);
        prop_assert_eq!(&once.items, &twice.items);
        if once.n_samples() > once.n_users() {
            prop_assert!((0.0..1.0).contains(&once.gamma));
        }
    }

    #[test]
    fn log_text_round_trips(recs in records()) {
        let parsed = parse_str(&format_records(&recs), &FormatConfig::default()).unwrap();
        prop_assert_eq!(parsed, recs);
    }

    #[test]
    fn reward_scaling_keeps_order(recs in rating_records()) {
        let Ok(d) = filter_users(&recs, 1, false) else { return Ok(()) };
        let s = scale_rewards(&d, (0.0, 1.0)).unwrap();
        for (a, b) in d.logs.iter().zip(&s.logs) {
            for i in 0..a.events.len() {
                for j in 0..a.events.len() {
                    let before = a.events[i].reward.partial_cmp(&a.events[j].reward);
                    prop_assert_eq!(before, b.events[i].reward.partial_cmp(&b.events[j].reward));
                }
            }
        }
    }

    #[test]
    fn cached_inverse_stays_symmetric_and_causal(seed in any::<u64>(), k in 1usize..10, len in 1usize..40, at in 0usize..40) {
        let mut rng = seeded(seed);
        let items: Vec<(DVector<f64>, f64)> = (0..len)
            .map(|_| (DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0)), rng.random_range(0.0..5.0)))
            .collect();
        let run = |items: &[(DVector<f64>, f64)]| {
            let mut s = UserState::cold(k, 0.1);
            items.iter().map(|(v, r)| {
                s.update(v, *r).unwrap();
                let inv = s.inverse();
                assert!((inv - inv.transpose()).amax() <= 1e-10);
                s.features().clone()
            }).collect::<Vec<_>>()
        };
        let base = run(&items);
        let at = at % len;
        let mut perturbed = items.clone();
        perturbed[at].1 += 1.0;
        let other = run(&perturbed);
        prop_assert_eq!(&base[..at], &other[..at]);
    }

    #[test]
    fn probabilities_are_positive_and_normalized(k in 1usize..4, n in 1usize..12, seed in any::<u64>(), shift in -50.0..50.0f64) {
        let mut rng = seeded(seed);
        let catalog = DMatrix::from_fn(k, n, |_, _| rng.random_range(-1.0..1.0));
        let state = DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0));
        let w = DVector::from_fn(3 * k + 1, |_, _| rng.random_range(-5.0..5.0));
        let p = policy_probabilities(&PolicyParams::new(w.clone(), PolicyKind::Behavior), &state, &catalog).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(p.iter().all(|x| *x > 0.0));
        // the constant feature adds the same score to every item
        let mut shifted = w;
        shifted[3 * k] += shift;
        let q = policy_probabilities(&PolicyParams::new(shifted, PolicyKind::Behavior), &state, &catalog).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn ranks_survive_positive_rescaling(seed in any::<u64>(), scale in 0.01..100.0f64, shift in -10.0..10.0f64) {
        let mut rng = seeded(seed);
        let (k, n) = (3, 8);
        let catalog = DMatrix::from_fn(k, n, |_, _| rng.random_range(-1.0..1.0));
        let state = DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0));
        let w = DVector::from_fn(3 * k + 1, |_, _| rng.random_range(-5.0..5.0));
        let mut w2 = &w * scale;
        w2[3 * k] += shift;
        let (a, b) = (PolicyParams::new(w, PolicyKind::Behavior), PolicyParams::new(w2, PolicyKind::Behavior));
        for item in 0..n {
            prop_assert_eq!(rank_of_action(&a, &state, &catalog, item).unwrap(), rank_of_action(&b, &state, &catalog, item).unwrap());
        }
    }

    #[test]
    fn mixing_is_linear_in_beta(t in small_matrix(7, 1), b in small_matrix(7, 1), beta in 0.0..=1.0f64) {
        let target = PolicyParams::new(t.column(0).into_owned(), PolicyKind::Target);
        let behavior = PolicyParams::new(b.column(0).into_owned(), PolicyKind::Behavior);
        let m = mix_policies(&target, &behavior, beta).unwrap();
        let expected = &behavior.w + (&target.w - &behavior.w) * beta;
        prop_assert!((m.w - expected).amax() <= 1e-12);
    }

    #[test]
    fn theta_scales_with_rewards(seed in any::<u64>(), c in -10.0..10.0f64, gamma in 0.0..0.95f64) {
        let mut rng = seeded(seed);
        let d = 3;
        let rows: Vec<Transition> = (0..30).map(|_| Transition {
            phi: DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0)),
            next: rng.random_bool(0.7).then(|| DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0))),
            reward: rng.random_range(0.0..1.0),
            rho: None,
        }).collect();
        let scaled = TransitionBatch { rows: rows.iter().map(|r| Transition { reward: r.reward * c, ..r.clone() }).collect() };
        let base = lstd(&TransitionBatch { rows }, gamma, Ridge::Fixed(1e-6)).unwrap().theta;
        let theta = lstd(&scaled, gamma, Ridge::Fixed(1e-6)).unwrap().theta;
        prop_assert!((theta - base * c).amax() <= 1e-8 * (1.0 + c.abs()));
    }

    #[test]
    fn ess_is_bounded_by_rows(rho in vec(0.01..10.0f64, 1..50)) {
        let d = RhoDiagnostics::from_ratios(&rho);
        prop_assert!(d.effective_sample_size <= rho.len() as f64 * (1.0 + 1e-12));
        let equal = RhoDiagnostics::from_ratios(&vec![rho[0]; rho.len()]);
        prop_assert!((equal.effective_sample_size - rho.len() as f64).abs() <= 1e-9);
    }

    #[test]
    fn bootstrap_is_bit_reproducible(values in vec(-5.0..5.0f64, 2..30), seed in any::<u64>()) {
        let eval = |r: &ltvrec::stats::Resample| Ok(r.users.iter().map(|&u| values[u]).sum::<f64>() / r.users.len() as f64);
        let a = bootstrap_value(values.len(), eval, 25, seed).unwrap();
        let b = bootstrap_value(values.len(), eval, 25, seed).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn wilcoxon_invariant_under_odd_monotone_maps(d in vec(-3.0..3.0f64, 5..40)) {
        let Ok(base) = wilcoxon_one_sided(&d) else { return Ok(()) };
        let mapped: Vec<f64> = d.iter().map(|x| x.powi(3) + 2.0 * x).collect();
        let other = wilcoxon_one_sided(&mapped).unwrap();
        prop_assert_eq!(base.w_plus, other.w_plus);
        prop_assert!((base.p_value - other.p_value).abs() <= 1e-12);
    }

    #[test]
    fn swapped_pairs_split_the_rank_sum(d in vec(0.001..3.0f64, 5..30), signs in vec(any::<bool>(), 30)) {
        let d: Vec<f64> = d.iter().zip(&signs).enumerate().map(|(i, (x, s))| {
            let x = x + i as f64 * 1e-6;
            if *s { x } else { -x }
        }).collect();
        let n = d.len() as f64;
        let neg: Vec<f64> = d.iter().map(|x| -x).collect();
        let a = wilcoxon_one_sided(&d).unwrap();
        let b = wilcoxon_one_sided(&neg).unwrap();
        prop_assert!((a.w_plus + b.w_plus - n * (n + 1.0) / 2.0).abs() <= 1e-9);
    }

    #[test]
    fn rank_histogram_counts_every_step(seed in any::<u64>(), bins in 1usize..20) {
        let catalog = DMatrix::from_fn(2, 9, |i, j| ((i * 9 + j) as f64).sin());
        let trajs = random_trajectories(seed, 6, 2, &catalog);
        let p = PolicyParams::new(DVector::from_element(7, 0.3), PolicyKind::Behavior);
        let h = rank_histogram("behavior", &p, &trajs, &catalog, bins).unwrap();
        prop_assert_eq!(h.total(), trajs.iter().map(Trajectory::len).sum::<usize>());
    }
}

#[test]
fn ridge_solutions_approach_exact_values() {
    let mdp = TabularMdp::random(5, 2, 0.9, 3).unwrap();
    let pi = mdp.uniform_policy();
    let batch = mdp.expected_state_batch(&pi).unwrap();
    let exact = mdp.exact_value(&pi).unwrap().values;
    let errors: Vec<f64> = [1e-2, 1e-4, 1e-6]
        .iter()
        .map(|&eps| (lstd(&batch, mdp.gamma, Ridge::Fixed(eps)).unwrap().theta - &exact).amax())
        .collect();
    assert!(errors[0] > errors[1] && errors[1] > errors[2], "{errors:?}");
    assert!(errors[2] < 1e-3);
}

#[test]
fn tabular_logs_are_reproducible() {
    let mdp = TabularMdp::random(4, 3, 0.8, 5).unwrap();
    let pi = mdp.uniform_policy();
    assert_eq!(mdp.generate_log(&pi, 50, 9).unwrap(), mdp.generate_log(&pi, 50, 9).unwrap());
}
