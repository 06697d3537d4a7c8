use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;

use super::*;
use crate::error::Error;
use crate::rng::seeded;

/// Depth-first enumeration of every action/outcome path from `(t, s)`; shares no code with the DP.
fn brute_suffix(m: &TabularCMDP, beta: &TabularPolicy, t: usize, s: usize) -> BTreeMap<Pair, f64> {
    fn go(m: &TabularCMDP, beta: &TabularPolicy, t: usize, s: usize, acc: Pair, p: f64, out: &mut BTreeMap<Pair, f64>) {
        if t == m.horizon() {
            *out.entry(acc).or_insert(0.0) += p;
            return;
        }
        for a in 0..m.n_actions() {
            for o in m.outcomes(s, a) {
                let q = p * beta.row(s)[a] * o.prob;
                if q > 0.0 {
                    go(m, beta, t + 1, o.next, (acc.0 + o.reward, acc.1 + o.cost), q, out);
                }
            }
        }
    }
    let mut out = BTreeMap::new();
    go(m, beta, t, s, (0, 0), 1.0, &mut out);
    out
}

/// Value of the conditioned policy by path enumeration with Bayes rows from `brute_suffix`.
fn brute_conditioned_value(m: &TabularCMDP, beta: &TabularPolicy, f: &ConditioningFn) -> (f64, f64) {
    fn go(m: &TabularCMDP, beta: &TabularPolicy, t: usize, s: usize, goal: Option<Pair>, p: f64, acc: &mut (f64, f64)) {
        if t == m.horizon() {
            return;
        }
        let row: Vec<f64> = match goal {
            Some(g) => {
                let total = brute_suffix(m, beta, t, s).get(&g).copied().unwrap_or(0.0);
                if total == 0.0 {
                    beta.row(s).to_vec()
                } else {
                    (0..m.n_actions())
                        .map(|a| {
                            let like: f64 = m
                                .outcomes(s, a)
                                .iter()
                                .map(|o| {
                                    o.prob
                                        * brute_suffix(m, beta, t + 1, o.next)
                                            .get(&(g.0 - o.reward, g.1 - o.cost))
                                            .copied()
                                            .unwrap_or(0.0)
                                })
                                .sum();
                            beta.row(s)[a] * like / total
                        })
                        .collect()
                }
            }
            None => beta.row(s).to_vec(),
        };
        let lost = goal.is_none_or(|g| brute_suffix(m, beta, t, s).get(&g).copied().unwrap_or(0.0) == 0.0);
        for (a, &pa) in row.iter().enumerate() {
            for o in m.outcomes(s, a) {
                let q = p * pa * o.prob;
                if q == 0.0 {
                    continue;
                }
                acc.0 += q * o.reward as f64;
                acc.1 += q * o.cost as f64;
                let next_goal = if lost { None } else { goal.map(|g| (g.0 - o.reward, g.1 - o.cost)) };
                go(m, beta, t + 1, o.next, next_goal, q, acc);
            }
        }
    }
    let mut acc = (0.0, 0.0);
    for (s, &p) in m.init_dist().iter().enumerate() {
        if p > 0.0 {
            go(m, beta, 0, s, f.target(s), p, &mut acc);
        }
    }
    (acc.0 * m.reward_unit(), acc.1 * m.cost_unit())
}

fn two_action() -> (TabularCMDP, TabularPolicy) {
    let base = vec![BaseTriple { next: 0, reward: 1, cost: 0 }, BaseTriple { next: 0, reward: 2, cost: 1 }];
    let m = TabularCMDP::deterministic(1, 2, 1, base, vec![1.0]).unwrap();
    let beta = TabularPolicy::new(vec![vec![0.3, 0.7]]).unwrap();
    (m, beta)
}

fn chain(h: usize) -> TabularCMDP {
    let base = (0..h).map(|s| BaseTriple { next: (s + 1).min(h - 1), reward: 1, cost: 0 }).collect();
    let mut init = vec![0.0; h];
    init[0] = 1.0;
    TabularCMDP::deterministic(h, 1, h, base, init).unwrap()
}

fn random_instance(seed: u64, eps: f64) -> (TabularCMDP, TabularPolicy) {
    let mut rng = seeded(seed);
    let spec = RandomCmdpSpec { n_states: 3, n_actions: 2, horizon: 3, epsilon: eps, reward_cost_noise: false };
    let m = random_cmdp(&spec, &mut rng).unwrap();
    let beta = random_behavior(3, 2, &mut rng);
    (m, beta)
}

#[test]
fn two_action_distribution_and_coverage() {
    let (m, beta) = two_action();
    let dist = suffix_distribution(&m, &beta).unwrap();
    assert_eq!(dist.at(0, 0).len(), 2);
    assert!((dist.prob(0, 0, (1, 0)) - 0.3).abs() < 1e-15);
    assert!((dist.prob(0, 0, (2, 1)) - 0.7).abs() < 1e-15);
    let f = ConditioningFn::from_initial(vec![Some((1, 0))]);
    assert!((coverage_alpha(&dist, &f, m.init_dist()).unwrap() - 0.3).abs() < 1e-15);
    let missing = ConditioningFn::from_initial(vec![Some((5, 0))]);
    assert_eq!(coverage_alpha(&dist, &missing, m.init_dist()).unwrap(), 0.0);
}

#[test]
fn two_action_conditioning_and_values() {
    let (m, beta) = two_action();
    let dist = suffix_distribution(&m, &beta).unwrap();
    let f = ConditioningFn::from_initial(vec![Some((1, 0))]);
    let pi = cdt_conditioned_policy(&m, &beta, &f, &dist).unwrap();
    assert_eq!(pi.row(0, 0, (1, 0)).unwrap(), &[1.0, 0.0]);
    let v = policy_value(&m, &pi);
    assert_eq!((v.reward, v.cost), (1.0, 0.0));
    let vb = policy_value(&m, &beta);
    assert!((vb.reward - 1.7).abs() < 1e-12 && (vb.cost - 0.7).abs() < 1e-12);
    let gap = alignment_gap(&m, &beta, &f, 10.0).unwrap();
    assert_eq!((gap.reward_gap, gap.cost_gap, gap.bound_rhs), (0.0, 0.0, 0.0));
}

#[test]
fn max_coverage_pick() {
    let (m, beta) = two_action();
    let f = make_consistent_f(&m, &beta, PickRule::MaxCoverage).unwrap();
    assert_eq!(f.target(0), Some((2, 1)));
    assert_eq!(make_consistent_f(&m, &beta, PickRule::MaxReturn).unwrap().target(0), Some((2, 1)));
    assert_eq!(make_consistent_f(&m, &beta, PickRule::MinCost).unwrap().target(0), Some((1, 0)));
}

#[test]
fn deterministic_chain() {
    let m = chain(3);
    let beta = TabularPolicy::uniform(3, 1);
    let dist = suffix_distribution(&m, &beta).unwrap();
    assert_eq!(dist.prob(2, 2, (1, 0)), 1.0);
    assert_eq!(policy_value(&m, &beta).reward, 3.0);
    let f = make_consistent_f(&m, &beta, PickRule::MaxCoverage).unwrap();
    assert_eq!(f.target(0), Some((3, 0)));
    assert_eq!(coverage_alpha(&dist, &f, m.init_dist()).unwrap(), 1.0);
    let pi = cdt_conditioned_policy(&m, &beta, &f, &dist).unwrap();
    assert_eq!(pi.row(0, 0, (3, 0)).unwrap(), beta.row(0));
    assert!(f.is_consistent(&m, &beta).unwrap());
}

#[test]
fn symmetric_actions_keep_uniform_behavior() {
    let base = vec![BaseTriple { next: 0, reward: 1, cost: 0 }; 2];
    let m = TabularCMDP::deterministic(1, 2, 2, base, vec![1.0]).unwrap();
    let beta = TabularPolicy::uniform(1, 2);
    let dist = suffix_distribution(&m, &beta).unwrap();
    let f = ConditioningFn::from_initial(vec![Some((2, 0))]);
    let pi = cdt_conditioned_policy(&m, &beta, &f, &dist).unwrap();
    assert_eq!(pi.row(0, 0, (2, 0)).unwrap(), &[0.5, 0.5]);
}

#[test]
fn zero_coverage_is_an_error() {
    let (m, beta) = two_action();
    let dist = suffix_distribution(&m, &beta).unwrap();
    let f = ConditioningFn::from_initial(vec![Some((3, 3))]);
    let err = cdt_conditioned_policy(&m, &beta, &f, &dist).unwrap_err();
    assert!(matches!(err, Error::ZeroProbability { state: 0, step: 0, target: (3, 3) }));
    assert!(alignment_gap(&m, &beta, &f, 10.0).is_err());
}

#[test]
fn near_determinism_examples() {
    let (m, _) = two_action();
    assert_eq!(near_determinism_epsilon(&m), 0.0);
    let m3 = random_instance(4, 0.0).0;
    assert!((near_determinism_epsilon(&m3.perturbed(0.05, false).unwrap()) - 0.05).abs() < 1e-15);

    let base = vec![BaseTriple { next: 0, reward: 0, cost: 0 }, BaseTriple { next: 1, reward: 0, cost: 0 }];
    let mut outcomes: Vec<Vec<Outcome>> = base.iter().map(|b| vec![Outcome { next: b.next, reward: 0, cost: 0, prob: 1.0 }]).collect();
    outcomes[1] = vec![Outcome { next: 1, reward: 0, cost: 0, prob: 0.9 }, Outcome { next: 0, reward: 0, cost: 0, prob: 0.1 }];
    let m = TabularCMDP::new(2, 1, 2, outcomes.clone(), base.clone(), vec![0.5, 0.5], 0.1, 1.0, 1.0).unwrap();
    assert!((near_determinism_epsilon(&m) - 0.1).abs() < 1e-15);
    assert!(TabularCMDP::new(2, 1, 2, outcomes, base, vec![0.5, 0.5], 0.05, 1.0, 1.0).is_err());
}

#[test]
fn cmdp_validation() {
    let bad_row = vec![vec![Outcome { next: 0, reward: 0, cost: 0, prob: 0.9 }]];
    let base = vec![BaseTriple { next: 0, reward: 0, cost: 0 }];
    assert!(TabularCMDP::new(1, 1, 1, bad_row, base.clone(), vec![1.0], 0.0, 1.0, 1.0).is_err());
    let neg = vec![vec![Outcome { next: 0, reward: 0, cost: -1, prob: 1.0 }]];
    assert!(matches!(
        TabularCMDP::new(1, 1, 1, neg, base, vec![1.0], 1.0, 1.0, 1.0),
        Err(Error::NegativeCost { .. })
    ));
    let err = TabularCMDP::from_real(1, 1, 1, &[0], &[0.25], &[0.0], vec![1.0], 0.1, 1.0).unwrap_err();
    assert!(matches!(err, Error::NonInteger { what: "reward", .. }));
    let ok = TabularCMDP::from_real(1, 1, 2, &[0], &[0.5], &[2.0], vec![1.0], 0.25, 1.0).unwrap();
    let v = policy_value(&ok, &TabularPolicy::uniform(1, 1));
    assert_eq!((v.reward, v.cost), (1.0, 4.0));
}

#[test]
fn dp_matches_enumeration_on_random_instances() {
    for seed in 0..20 {
        let eps = [0.0, 0.05, 0.2][seed as usize % 3];
        let (m, beta) = random_instance(seed, eps);
        let dist = suffix_distribution(&m, &beta).unwrap();
        for t in 0..=m.horizon() {
            for s in 0..m.n_states() {
                let brute = brute_suffix(&m, &beta, t, s);
                let dp = dist.at(t, s);
                let keys: alloc::collections::BTreeSet<_> = brute.keys().chain(dp.keys()).collect();
                for k in keys {
                    let a = brute.get(k).copied().unwrap_or(0.0);
                    let b = dp.get(k).copied().unwrap_or(0.0);
                    assert!((a - b).abs() <= 1e-12, "seed {seed} t {t} s {s} {k:?}: {a} vs {b}");
                }
                let total: f64 = dp.values().sum();
                assert!((total - 1.0).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn conditioned_value_matches_enumeration() {
    for seed in 0..12 {
        let eps = [0.0, 0.1][seed as usize % 2];
        let (m, beta) = random_instance(100 + seed, eps);
        let f = make_consistent_f(&m, &beta, PickRule::MaxCoverage).unwrap();
        let dist = suffix_distribution(&m, &beta).unwrap();
        let pi = cdt_conditioned_policy(&m, &beta, &f, &dist).unwrap();
        for (_, row) in pi.conditioned_rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
        let v = policy_value(&m, &pi);
        let (r, c) = brute_conditioned_value(&m, &beta, &f);
        assert!((v.reward - r).abs() < 1e-12 && (v.cost - c).abs() < 1e-12, "seed {seed}");
    }
}

#[test]
fn zero_noise_alignment_is_exact() {
    for seed in 0..30 {
        let mut rng = seeded(seed);
        let spec = RandomCmdpSpec { n_states: 4, n_actions: 3, horizon: 5, epsilon: 0.0, reward_cost_noise: false };
        let m = random_cmdp(&spec, &mut rng).unwrap();
        let beta = random_behavior(4, 3, &mut rng);
        for rule in [PickRule::MaxReturn, PickRule::MinCost, PickRule::MaxCoverage] {
            let f = make_consistent_f(&m, &beta, rule).unwrap();
            assert!(f.is_consistent(&m, &beta).unwrap());
            let gap = alignment_gap(&m, &beta, &f, 10.0).unwrap();
            assert!(gap.reward_gap.abs() <= 1e-9 && gap.cost_gap.abs() <= 1e-9, "seed {seed}: {gap:?}");
            assert_eq!(gap.epsilon, 0.0);
        }
    }
}

#[test]
fn perturbed_gaps_respect_bound_and_shrink() {
    let mut means = Vec::new();
    for eps in [0.01, 0.1] {
        let mut total = 0.0;
        for seed in 0..30 {
            let (m0, beta) = random_instance(200 + seed, 0.0);
            let m = m0.perturbed(eps, false).unwrap();
            let f = make_consistent_f(&m, &beta, PickRule::MaxCoverage).unwrap();
            let gap = alignment_gap(&m, &beta, &f, 10.0).unwrap();
            assert!(gap.within_bound(), "{gap:?}");
            total += gap.reward_gap.abs() + gap.cost_gap.abs();
        }
        means.push(total / 30.0);
    }
    assert!(means[0] <= means[1]);
}

#[test]
fn discounted_values_on_chain() {
    // s0 -> s1 -> s2 (terminal), reward 1 and cost 1 per step.
    let base = vec![
        BaseTriple { next: 1, reward: 1, cost: 1 },
        BaseTriple { next: 2, reward: 1, cost: 1 },
        BaseTriple { next: 2, reward: 0, cost: 0 },
    ];
    let m = TabularCMDP::deterministic(3, 1, 3, base, vec![1.0, 0.0, 0.0]).unwrap();
    let (q, c) = discounted_action_values(&m, &TabularPolicy::uniform(3, 1), 0.9, &[false, false, true]).unwrap();
    assert!((q[0][0] - 1.9).abs() < 1e-12 && (q[1][0] - 1.0).abs() < 1e-12);
    assert!((c[0][0] - 1.9).abs() < 1e-12);
}

proptest! {
    #[test]
    fn conditioned_rows_ignore_behavior_row_scale(seed in 0u64..500, k in 0.01f64..100.0) {
        let (m, beta) = random_instance(seed, 0.05);
        let f = make_consistent_f(&m, &beta, PickRule::MaxReturn).unwrap();
        let dist = suffix_distribution(&m, &beta).unwrap();
        let pi = cdt_conditioned_policy(&m, &beta, &f, &dist).unwrap();
        for (&(t, s, g), row) in pi.conditioned_rows() {
            let scaled: Vec<f64> = (0..m.n_actions()).map(|a| k * beta.row(s)[a] * dist.action_prob(&m, t, s, a, g)).collect();
            let z: f64 = scaled.iter().sum();
            for (x, y) in row.iter().zip(&scaled) {
                prop_assert!((x - y / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn suffix_tables_are_distributions(seed in 0u64..1000, eps in 0.0f64..0.3) {
        let (m, beta) = random_instance(seed, eps);
        let dist = suffix_distribution(&m, &beta).unwrap();
        for t in 0..=m.horizon() {
            for s in 0..m.n_states() {
                prop_assert!((dist.at(t, s).values().sum::<f64>() - 1.0).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn more_coverage_does_not_increase_mean_gap() {
    let (mut low_total, mut high_total) = (0.0, 0.0);
    for seed in 0..60 {
        let (m, beta) = random_instance(900 + seed, 0.05);
        let f = make_consistent_f(&m, &beta, PickRule::MaxReturn).unwrap();
        let base = m.base_model();
        let base_dist = suffix_distribution(&base, &beta).unwrap();
        let mut attaining = vec![vec![false; m.n_actions()]; m.n_states()];
        for (&(t, s), targets) in &f.carried {
            for &g in targets {
                for a in 0..m.n_actions() {
                    if t < m.horizon() && base_dist.action_prob(&base, t, s, a, g) > 0.0 {
                        attaining[s][a] = true;
                    }
                }
            }
        }
        let rows = (0..m.n_states())
            .map(|s| {
                let w: Vec<f64> = (0..m.n_actions()).map(|a| beta.row(s)[a] * if attaining[s][a] { 4.0 } else { 1.0 }).collect();
                let z: f64 = w.iter().sum();
                w.into_iter().map(|x| x / z).collect()
            })
            .collect();
        let boosted = TabularPolicy::new(rows).unwrap();
        assert_eq!(make_consistent_f(&m, &boosted, PickRule::MaxReturn).unwrap(), f);
        let a = alignment_gap(&m, &beta, &f, 10.0).unwrap();
        let b = alignment_gap(&m, &boosted, &f, 10.0).unwrap();
        // Noise can move coverage either way, so rank each pair by its measured alpha.
        let (low, high) = if b.alpha_f >= a.alpha_f { (a, b) } else { (b, a) };
        low_total += low.reward_gap.abs() + low.cost_gap.abs();
        high_total += high.reward_gap.abs() + high.cost_gap.abs();
    }
    assert!(high_total / 60.0 <= low_total / 60.0 + 1e-6, "{high_total} vs {low_total}");
}
