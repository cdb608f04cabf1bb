use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::gamma::gamma_ur;

fn rec(lo: f64, hi: f64) -> ConversionRecord {
    ConversionRecord::new(lo, hi).unwrap()
}

#[test]
fn horizon_labels() {
    assert_eq!(label_at_horizon(&rec(4.0, 7.0), 6.0), None);
    for t in [0.0, 6.0, 12.0, 18.0] {
        assert_eq!(label_at_horizon(&rec(f64::NEG_INFINITY, 0.0), t), Some(true));
    }
    assert_eq!(label_at_horizon(&rec(20.0, 24.0), 12.0), Some(false));
    assert_eq!(label_at_horizon(&rec(6.0, 9.0), 6.0), Some(false));
    assert_eq!(label_at_horizon(&rec(3.0, 6.0), 6.0), Some(true));
}

#[test]
fn km_examples() {
    let s = kaplan_meier(&[(1.0, true), (2.0, true), (3.0, false)]).unwrap();
    assert!((s.at(1.0) - 2.0 / 3.0).abs() < 1e-15);
    assert!((s.at(2.0) - 1.0 / 3.0).abs() < 1e-15);
    assert!((s.at(3.0) - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(s.at(0.5), 1.0);
    let c = kaplan_meier(&[(1.0, false), (4.0, false)]).unwrap();
    assert_eq!(c.at(10.0), 1.0);
    let e = kaplan_meier(&[(4.0, true), (1.0, true), (3.0, true), (2.0, true)]).unwrap();
    assert_eq!(e.values, vec![0.75, 0.5, 0.25, 0.0]);
    assert!(kaplan_meier(&[]).is_err());
}

/// Product limit by direct counting at every distinct time.
fn km_oracle(samples: &[(f64, bool)], t: f64) -> f64 {
    let mut times: Vec<f64> = samples.iter().filter(|s| s.1 && s.0 <= t).map(|s| s.0).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    times
        .iter()
        .map(|&u| {
            let d = samples.iter().filter(|s| s.1 && s.0 == u).count() as f64;
            let n = samples.iter().filter(|s| s.0 >= u).count() as f64;
            1.0 - d / n
        })
        .product()
}

#[test]
fn km_matches_oracle_exhaustively() {
    let base = [1.0, 2.0, 2.0, 3.0, 5.0, 5.0];
    for n in 1..=6 {
        for mask in 0..(1u32 << n) {
            let s: Vec<(f64, bool)> = (0..n).map(|i| (base[i], mask >> i & 1 == 1)).collect();
            let km = kaplan_meier(&s).unwrap();
            assert!(km.values.windows(2).all(|w| w[0] >= w[1]));
            for t in [0.0, 1.0, 1.5, 2.0, 3.0, 4.0, 5.0, 6.0] {
                assert!((km.at(t) - km_oracle(&s, t)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn incomplete_gamma_matches_reference() {
    for &s in &[0.5, 1.0, 1.5, 2.0, 3.5, 10.0] {
        for &x in &[1e-3, 0.1, 0.5, 1.0, 2.0, 5.0, 12.0, 40.0] {
            let ours = gamma_q(s, x);
            let reference = gamma_ur(s, x);
            assert!((ours - reference).abs() < 1e-10 * reference.max(1e-12) + 1e-14, "Q({s},{x}) {ours} vs {reference}");
        }
    }
    assert!((chi2_survival(3.841458820694124, 1.0) - 0.05).abs() < 1e-10);
}

#[test]
fn log_rank_identical_groups() {
    let g = vec![(1.0, true), (3.0, false), (4.0, true), (6.0, true), (7.0, false)];
    let r = log_rank_test(&[g.clone(), g]).unwrap();
    assert!(r.chi2.abs() < 1e-9);
    assert!((r.p_value - 1.0).abs() < 1e-9);
}

/// Two-group statistic from explicit O - E and hypergeometric variance sums.
fn two_group_oracle(a: &[(f64, bool)], b: &[(f64, bool)]) -> f64 {
    let mut times: Vec<f64> = a.iter().chain(b).filter(|s| s.1).map(|s| s.0).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let (mut oe, mut var) = (0.0, 0.0);
    for t in times {
        let na = a.iter().filter(|s| s.0 >= t).count() as f64;
        let nb = b.iter().filter(|s| s.0 >= t).count() as f64;
        let da = a.iter().filter(|s| s.1 && s.0 == t).count() as f64;
        let db = b.iter().filter(|s| s.1 && s.0 == t).count() as f64;
        let (n, d) = (na + nb, da + db);
        oe += da - d * na / n;
        if n > 1.0 {
            var += d * (na / n) * (nb / n) * (n - d) / (n - 1.0);
        }
    }
    oe * oe / var
}

#[test]
fn log_rank_separated_groups() {
    let a: Vec<(f64, bool)> = (1..=5).map(|i| (i as f64, true)).collect();
    let b: Vec<(f64, bool)> = (6..=10).map(|i| (i as f64, true)).collect();
    let r = log_rank_test(&[a.clone(), b.clone()]).unwrap();
    assert!((r.chi2 - two_group_oracle(&a, &b)).abs() < 1e-9);
    assert!(r.p_value < 0.01, "{}", r.p_value);
    let swapped = log_rank_test(&[b, a]).unwrap();
    assert!((swapped.chi2 - r.chi2).abs() < 1e-9);
}

#[test]
fn log_rank_three_groups_relabeling_and_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = || -> Vec<(f64, bool)> { (0..8).map(|_| (rng.gen_range(0..20) as f64, rng.gen_bool(0.7))).collect() };
    let (a, b, c) = (g(), g(), g());
    let r1 = log_rank_test(&[a.clone(), b.clone(), c.clone()]).unwrap();
    let r2 = log_rank_test(&[c.clone(), a.clone(), b.clone()]).unwrap();
    assert!((r1.chi2 - r2.chi2).abs() < 1e-9 * r1.chi2.max(1.0));
    assert!(r1.chi2 >= 0.0 && r1.p_value > 0.0 && r1.p_value <= 1.0);
    assert_eq!(r1.dof, 2);
    assert!(log_rank_test(&[a.clone()]).is_err());
    assert!(log_rank_test(&[a.clone(), vec![]]).is_err());
    assert!(log_rank_test(&[vec![(30.0, true)], vec![(0.5, false)]]).is_err());
}

#[test]
fn auc_examples() {
    let auc = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
    assert_eq!(auc, 0.75);
    assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
    assert_eq!(roc_auc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
    assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_err());
}

fn auc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let mut twice = 0u64;
    let (mut p, mut n) = (0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if li {
            p += 1;
        } else {
            n += 1;
        }
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            twice += if scores[i] > scores[j] {
                2
            } else if scores[i] == scores[j] {
                1
            } else {
                0
            };
        }
    }
    twice as f64 / (2 * p * n) as f64
}

#[test]
fn auc_matches_pair_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut done = 0;
    while done < 100 {
        let n = rng.gen_range(2..40);
        let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..12) as f64) / 4.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            continue;
        }
        assert_eq!(roc_auc(&scores, &labels).unwrap(), auc_pairs(&scores, &labels));
        done += 1;
    }
}

#[test]
fn auc_complement_without_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let scores: Vec<f64> = (0..30).map(|_| rng.gen::<f64>()).collect();
    let labels: Vec<bool> = (0..30).map(|i| i % 3 == 0).collect();
    let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
    assert!((roc_auc(&scores, &labels).unwrap() + roc_auc(&neg, &labels).unwrap() - 1.0).abs() < 1e-15);
}

#[test]
fn balanced_accuracy_examples() {
    let labels = [true, true, false, false];
    assert_eq!(balanced_accuracy(&labels, &labels).unwrap(), 1.0);
    assert_eq!(balanced_accuracy(&[true; 4], &labels).unwrap(), 0.5);
    // TP=2, FN=1, TN=3, FP=1.
    let pred = [true, true, false, false, false, false, true];
    let lab = [true, true, true, false, false, false, false];
    assert!((balanced_accuracy(&pred, &lab).unwrap() - 17.0 / 24.0).abs() < 1e-15);
    assert!(balanced_accuracy(&[true], &[true]).is_err());
}

#[test]
fn youden_examples() {
    let s = vec![vec![0.1, 0.3, 0.4, 0.6, 0.7, 0.9], vec![0.2, 0.4, 0.6, 0.8]];
    let l = vec![vec![false, false, false, true, true, true], vec![false, false, true, true]];
    assert_eq!(youden_threshold(&s, &l).unwrap(), 0.5);

    // A time point whose scores are all tied contributes J = 0 everywhere.
    let s2 = vec![s[0].clone(), vec![0.5; 4]];
    let l2 = vec![l[0].clone(), vec![true, false, true, false]];
    let tau = youden_threshold(&s2, &l2).unwrap();
    assert!(tau > 0.4 && tau < 0.6);
    assert!(youden_threshold(&[vec![0.1, 0.2]], &[vec![true, true]]).is_err());
}

#[test]
fn youden_is_exhaustive_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..3 {
            let n = rng.gen_range(4..15);
            let mut l: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            l[0] = true;
            l[1] = false;
            scores.push((0..n).map(|i| rng.gen::<f64>() * 0.5 + if l[i] { 0.3 } else { 0.0 }).collect::<Vec<f64>>());
            labels.push(l);
        }
        let tau = youden_threshold(&scores, &labels).unwrap();
        let mean_j = |t: f64| -> f64 {
            scores.iter().zip(&labels).map(|(s, l)| youden_j(s, l, t).unwrap()).sum::<f64>() / 3.0
        };
        let best = mean_j(tau);
        let mut all: Vec<f64> = scores.iter().flatten().copied().collect();
        all.sort_by(f64::total_cmp);
        for w in all.windows(2) {
            assert!(best >= mean_j(0.5 * (w[0] + w[1])));
        }
    }
}

proptest::proptest! {
    #[test]
    fn km_is_monotone_and_bounded(times in proptest::collection::vec((0u8..20, proptest::bool::ANY), 1..40)) {
        let s: Vec<(f64, bool)> = times.iter().map(|&(t, e)| (t as f64, e)).collect();
        let km = kaplan_meier(&s).unwrap();
        proptest::prop_assert!(km.values.windows(2).all(|w| w[0] >= w[1]));
        proptest::prop_assert!(km.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn log_rank_chi2_non_negative(a in proptest::collection::vec((1u8..20, proptest::bool::ANY), 2..15),
                                  b in proptest::collection::vec((1u8..20, proptest::bool::ANY), 2..15)) {
        let a: Vec<(f64, bool)> = a.iter().map(|&(t, e)| (t as f64, e)).collect();
        let b: Vec<(f64, bool)> = b.iter().map(|&(t, e)| (t as f64, e)).collect();
        if let Ok(r) = log_rank_test(&[a, b]) {
            proptest::prop_assert!(r.chi2 >= 0.0);
            proptest::prop_assert!(r.p_value > 0.0 && r.p_value <= 1.0);
        }
    }
}
