mod common;

use common::*;
use lpcl::evaluation::*;
use lpcl::objectives::CohortRole;
use proptest::prelude::*;
use rand::Rng;

fn random_scores(r: &mut impl Rng, n: usize, levels: u32) -> (Vec<f64>, Vec<bool>) {
    loop {
        let labels: Vec<bool> = (0..n).map(|_| r.gen_bool(0.5)).collect();
        if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
            let scores = (0..n)
                .map(|_| r.gen_range(0..levels) as f64 / levels as f64)
                .collect();
            return (scores, labels);
        }
    }
}

#[test]
fn auc_matches_all_pairs_exactly() {
    let mut r = rng(1);
    for n in [2, 5, 20, 57] {
        for levels in [3, 1000] {
            let (s, l) = random_scores(&mut r, n, levels);
            assert_eq!(auc(&s, &l).unwrap(), auc_brute(&s, &l));
        }
    }
}

#[test]
fn fisher_matches_enumeration_exactly() {
    assert!((fisher_exact([[0, 5], [5, 0]]).unwrap() - 0.00794).abs() < 5e-6);
    assert!((fisher_exact([[3, 1], [1, 3]]).unwrap() - 0.4857).abs() < 5e-5);
    assert_eq!(fisher_exact([[4, 6], [4, 6]]).unwrap(), 1.0);
    let mut r = rng(2);
    for _ in 0..300 {
        let t = [
            [r.gen_range(0..12), r.gen_range(0..12)],
            [r.gen_range(0..12), r.gen_range(0..12)],
        ];
        let ours = fisher_exact(t.map(|row| row.map(|v| v as i64))).unwrap();
        assert_eq!(ours, fisher_enumerate(t), "{t:?}");
    }
}

#[test]
fn delong_internal_consistency_and_symmetry() {
    let mut r = rng(3);
    let (a, l) = random_scores(&mut r, 30, 1000);
    let b: Vec<f64> = a.iter().map(|v| v + r.gen_range(-0.4..0.4)).collect();
    let ab = delong_test(&a, &b, &l).unwrap();
    let ba = delong_test(&b, &a, &l).unwrap();
    assert_eq!(ab.auc_a, auc(&a, &l).unwrap());
    assert_eq!(ab.auc_b, auc(&b, &l).unwrap());
    assert!((ab.z + ba.z).abs() < 1e-12 && (ab.p - ba.p).abs() < 1e-12);
    assert_eq!(delong_test(&a, &a, &l).unwrap().p, 1.0);
}

#[test]
fn delong_agrees_with_bootstrap_on_a_few_instances() {
    // the full 20 x 100k comparison runs in the acceptance target
    let mut r = rng(4);
    for _ in 0..3 {
        let (a, b, l) = correlated_instance(&mut r, 30);
        let d = delong_test(&a, &b, &l).unwrap().p;
        let boot = bootstrap_auc_p(&a, &b, &l, 20_000, r.gen());
        assert!((d - boot).abs() < 0.03, "{d} vs {boot}");
    }
}

#[test]
fn confusion_examples() {
    // 5 positives with 4 hits, 5 negatives with 3 hits
    let p = [0.9, 0.8, 0.7, 0.6, 0.1, 0.2, 0.3, 0.4, 0.6, 0.7];
    let y = [
        true, true, true, true, true, false, false, false, false, false,
    ];
    let c = confusion_metrics(&p, &y, THRESHOLD).unwrap();
    assert_eq!((c.sen, c.spe), (0.8, 0.6));
    assert!((c.bacc - 0.7).abs() < 1e-12);
    let c = confusion_metrics(&[1.0; 10], &y, THRESHOLD).unwrap();
    assert_eq!((c.sen, c.spe, c.bacc), (1.0, 0.0, 0.5));
}

fn subject(id: usize, role: CohortRole, preds: Vec<f64>) -> SubjectPrediction {
    SubjectPrediction {
        id: format!("s{id}"),
        role,
        labels: vec![role.label(); preds.len()],
        preds,
    }
}

#[test]
fn strata_are_nested() {
    let mut r = rng(5);
    let subjects: Vec<SubjectPrediction> = (0..40)
        .map(|i| {
            let role = if i % 2 == 0 {
                CohortRole::Control
            } else {
                CohortRole::Positive
            };
            let m = r.gen_range(1..=5);
            subject(i, role, (0..m).map(|_| r.gen()).collect())
        })
        .collect();
    let all = stratify_by_visits(&subjects, 1).unwrap();
    let (s, l) = visit_level(&subjects);
    assert_eq!(
        all.metrics.unwrap(),
        confusion_metrics(&s, &l, THRESHOLD).unwrap()
    );
    let mut prev = usize::MAX;
    for k in 1..=6 {
        let st = stratify_by_visits(&subjects, k).unwrap();
        let n = st.n_control + st.n_positive;
        assert!(n <= prev);
        prev = n;
    }
    let empty = stratify_by_visits(&subjects, 6).unwrap();
    assert_eq!(
        (empty.n_control, empty.n_positive, empty.metrics),
        (0, 0, None)
    );
}

#[test]
fn monotone_fraction_counts_positive_multi_visit_subjects() {
    let s = vec![
        subject(0, CohortRole::Positive, vec![0.1, 0.2, 0.2]),
        subject(1, CohortRole::Positive, vec![0.5, 0.4]),
        subject(2, CohortRole::Positive, vec![0.3]),
        subject(3, CohortRole::Control, vec![0.9, 0.1]),
    ];
    assert_eq!(monotone_fraction(&s), Some(0.5));
}

proptest! {
    #[test]
    fn auc_is_invariant_to_monotone_transforms(raw in prop::collection::vec((0u32..50, any::<bool>()), 4..40)) {
        let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64 / 50.0).collect();
        let labels: Vec<bool> = raw.iter().map(|(_, l)| *l).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        prop_assert_eq!(auc(&scores, &labels).unwrap(), auc(&warped, &labels).unwrap());
    }

    #[test]
    fn bacc_ignores_duplicating_one_cohort(
        raw in prop::collection::vec((0u32..100, any::<bool>()), 4..40),
        factor in 2usize..5,
        dup_positive in any::<bool>(),
    ) {
        let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64 / 100.0).collect();
        let labels: Vec<bool> = raw.iter().map(|(_, l)| *l).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let base = confusion_metrics(&scores, &labels, THRESHOLD).unwrap().bacc;
        let (mut s2, mut l2) = (scores.clone(), labels.clone());
        for (s, l) in scores.iter().zip(&labels) {
            if *l == dup_positive {
                for _ in 1..factor {
                    s2.push(*s);
                    l2.push(*l);
                }
            }
        }
        let dup = confusion_metrics(&s2, &l2, THRESHOLD).unwrap().bacc;
        prop_assert!((base - dup).abs() < 1e-12);
    }
}
