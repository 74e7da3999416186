//! Loss values against a naive re-derivation, plus the algebraic identities
//! tying the four losses together.

use ndarray::{Array1, Array2};
use parcon_core::losses::{
    cross_entropy, info_nce, scaled_supervised_contrastive, supervised_contrastive, weighted_supervised_contrastive,
    AlphaMode, BatchRelations, ContrastiveConfig,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Plain-loop SSCL on unnormalized rows, written straight from the definition.
fn brute_sscl(z: &[Vec<f64>], labels: &[usize], groups: &[usize], tau: f64, s: f64, dynamic: bool) -> f64 {
    let k = z.len();
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..k {
        let denom: f64 = (0..k).filter(|&j| j != i).map(|j| (cos(&z[i], &z[j]) / tau).exp()).sum();
        let mut num = 0.0;
        let mut wsum = 0.0;
        for p in (0..k).filter(|&p| p != i && labels[p] == labels[i]) {
            let mut a = if groups[p] == groups[i] { s } else { 1.0 };
            if dynamic {
                a *= 1.0 - cos(&z[i], &z[p]);
            }
            let logprob = (cos(&z[i], &z[p]) / tau).exp().ln() - denom.ln();
            num += a * logprob;
            wsum += a;
        }
        if wsum > 0.0 {
            total += -num / wsum;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

struct Batch {
    z: Array2<f64>,
    labels: Vec<usize>,
    groups: Vec<usize>,
}

impl Batch {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let k = rng.random_range(3..=12);
        let d = rng.random_range(2..=8);
        let mut z = Array2::from_shape_simple_fn((k, d), || rng.sample::<f64, _>(StandardNormal));
        for mut row in z.rows_mut() {
            let n = row.dot(&row).sqrt();
            row.mapv_inplace(|x| x / n);
        }
        let num_labels = rng.random_range(1..=4);
        let labels: Vec<usize> = (0..k).map(|_| rng.random_range(0..num_labels)).collect();
        // Groups nest inside labels: group = label * 10 + sub.
        let groups = labels.iter().map(|&l| l * 10 + rng.random_range(0..2)).collect();
        Batch { z, labels, groups }
    }

    fn relations(&self) -> BatchRelations {
        BatchRelations::new(self.labels.clone(), self.groups.iter().map(|g| g.to_string()).collect()).unwrap()
    }

    fn rows(&self) -> Vec<Vec<f64>> {
        self.z.rows().into_iter().map(|r| r.to_vec()).collect()
    }
}

#[test]
fn sscl_matches_brute_force_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let b = Batch::random(&mut rng);
        let tau = rng.random_range(0.1..1.0);
        let s = rng.random_range(1.0..30.0);
        for dynamic in [false, true] {
            let cfg = ContrastiveConfig {
                tau,
                s,
                alpha_mode: if dynamic { AlphaMode::Dynamic } else { AlphaMode::Constant },
            };
            let got = scaled_supervised_contrastive(b.z.view(), &b.relations(), &cfg).unwrap().loss;
            let want = brute_sscl(&b.rows(), &b.labels, &b.groups, tau, s, dynamic);
            assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "{got} vs {want}");
        }
    }
}

#[test]
fn hand_computed_infonce() {
    // Three unit vectors in the plane at 0, 90 and 180 degrees, τ = 0.5:
    // cos to the positive is 0, cos to the other is -1.
    let z = Array2::from_shape_vec((3, 2), vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0]).unwrap();
    let (loss, _) = info_nce(z.view(), 0, 1, 0.5).unwrap();
    let want = -(1.0f64 / (1.0 + (-2.0f64).exp())).ln();
    assert!((loss - want).abs() < 1e-14);
}

#[test]
fn sscl_with_unit_scale_is_scl() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let b = Batch::random(&mut rng);
        let tau = rng.random_range(0.1..1.0);
        let cfg = ContrastiveConfig {
            tau,
            s: 1.0,
            alpha_mode: AlphaMode::Constant,
        };
        let a = scaled_supervised_contrastive(b.z.view(), &b.relations(), &cfg).unwrap();
        let c = supervised_contrastive(b.z.view(), &b.relations(), tau).unwrap();
        assert!((a.loss - c.loss).abs() <= 1e-12);
        let gd = (&a.grads - &c.grads).mapv(f64::abs).fold(0.0f64, |m, &x| m.max(x));
        assert!(gd <= 1e-12, "gradient gap {gd}");
    }
}

#[test]
fn scl_with_singleton_positives_is_mean_infonce() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let pairs = rng.random_range(2..=6);
        let d = rng.random_range(2..=8);
        let k = 2 * pairs;
        let mut z = Array2::from_shape_simple_fn((k, d), || rng.sample::<f64, _>(StandardNormal));
        for mut row in z.rows_mut() {
            let n = row.dot(&row).sqrt();
            row.mapv_inplace(|x| x / n);
        }
        // Rows 2m and 2m+1 share label m: each sample has exactly one positive.
        let labels: Vec<usize> = (0..k).map(|i| i / 2).collect();
        let tau = rng.random_range(0.1..1.0);
        let scl = supervised_contrastive(z.view(), &BatchRelations::from_labels(labels), tau).unwrap();
        let mean = (0..k).map(|i| info_nce(z.view(), i, i ^ 1, tau).unwrap().0).sum::<f64>() / k as f64;
        assert!((scl.loss - mean).abs() <= 1e-12, "{} vs {mean}", scl.loss);
    }
}

#[test]
fn ce_is_invariant_to_logit_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let c = rng.random_range(2..=12);
        let logits = Array1::from_shape_simple_fn(c, || 3.0 * rng.sample::<f64, _>(StandardNormal));
        let label = rng.random_range(0..c);
        let shift = rng.random_range(-50.0..50.0);
        let (a, ga) = cross_entropy(logits.view(), label).unwrap();
        let (b, gb) = cross_entropy((&logits + shift).view(), label).unwrap();
        assert!((a - b).abs() <= 1e-12);
        assert!((&ga - &gb).iter().all(|x| x.abs() <= 1e-12));
    }
}

#[test]
fn ce_gradient_is_softmax_minus_onehot() {
    let logits = Array1::from(vec![1.0, 2.0, 3.0]);
    let (loss, g) = cross_entropy(logits.view(), 2).unwrap();
    let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).collect();
    let sum: f64 = e.iter().sum();
    assert!((loss - (sum.ln() - 3.0)).abs() < 1e-14);
    for j in 0..3 {
        let want = e[j] / sum - if j == 2 { 1.0 } else { 0.0 };
        assert!((g[j] - want).abs() < 1e-14);
    }
}

#[test]
fn no_positives_gives_zero_loss() {
    let z = Array2::from_shape_vec((3, 2), vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0]).unwrap();
    let rel = BatchRelations::from_labels(vec![0, 1, 2]);
    let out = scaled_supervised_contrastive(z.view(), &rel, &ContrastiveConfig::default()).unwrap();
    assert_eq!(out.loss, 0.0);
    assert!(out.grads.iter().all(|&x| x == 0.0));
}

#[test]
fn non_unit_rows_are_rejected() {
    let z = Array2::from_shape_vec((2, 2), vec![2.0, 0.0, 0.0, 1.0]).unwrap();
    assert!(supervised_contrastive(z.view(), &BatchRelations::from_labels(vec![0, 0]), 0.5).is_err());
}

fn batch_strategy() -> impl Strategy<Value = (u64, f64, f64)> {
    (any::<u64>(), 0.1f64..1.0, 1.0f64..30.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn alpha_rescaling_leaves_sscl_unchanged((seed, tau, s) in batch_strategy(), c in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = Batch::random(&mut rng);
        let rel = b.relations();
        let k = b.labels.len();
        let w = Array2::from_shape_fn((k, k), |(i, p)| if rel.paraphrase[(i, p)] { s } else { 1.0 });
        let cfg = ContrastiveConfig { tau, s, alpha_mode: AlphaMode::Constant };
        let sscl = scaled_supervised_contrastive(b.z.view(), &rel, &cfg).unwrap();
        let plain = weighted_supervised_contrastive(b.z.view(), &rel, w.view(), tau).unwrap();
        let scaled = weighted_supervised_contrastive(b.z.view(), &rel, (&w * c).view(), tau).unwrap();
        prop_assert!((plain.loss - sscl.loss).abs() <= 1e-12 * sscl.loss.abs().max(1.0));
        prop_assert!((scaled.loss - plain.loss).abs() <= 1e-12 * plain.loss.abs().max(1.0));
        prop_assert!((&scaled.grads - &plain.grads).iter().all(|x| x.abs() <= 1e-12));
        let oracle = brute_weighted(&b, tau, |same_group| c * if same_group { s } else { 1.0 });
        prop_assert!((oracle - sscl.loss).abs() <= 1e-10 * sscl.loss.abs().max(1.0));
    }

    #[test]
    fn row_permutation_permutes_outputs((seed, tau, s) in batch_strategy(), dynamic in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = Batch::random(&mut rng);
        let k = b.labels.len();
        let mut perm: Vec<usize> = (0..k).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let pz = Array2::from_shape_fn(b.z.raw_dim(), |(i, j)| b.z[(perm[i], j)]);
        let pb = Batch {
            z: pz,
            labels: perm.iter().map(|&i| b.labels[i]).collect(),
            groups: perm.iter().map(|&i| b.groups[i]).collect(),
        };
        let cfg = ContrastiveConfig { tau, s, alpha_mode: if dynamic { AlphaMode::Dynamic } else { AlphaMode::Constant } };
        let a = scaled_supervised_contrastive(b.z.view(), &b.relations(), &cfg).unwrap();
        let p = scaled_supervised_contrastive(pb.z.view(), &pb.relations(), &cfg).unwrap();
        prop_assert!((a.loss - p.loss).abs() <= 1e-12 * a.loss.abs().max(1.0));
        for i in 0..k {
            for j in 0..b.z.ncols() {
                prop_assert!((p.grads[(i, j)] - a.grads[(perm[i], j)]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn scale_is_irrelevant_with_one_positive_each(seed in any::<u64>(), tau in 0.1f64..1.0) {
        // With one positive per sample SSCL is the same at every s.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Batch::random(&mut rng);
        let k = b.labels.len();
        b.labels = (0..k).map(|i| i / 2).collect();
        b.groups = (0..k).map(|i| i / 2).collect();
        let rel = b.relations();
        let lo = scaled_supervised_contrastive(b.z.view(), &rel, &ContrastiveConfig { tau, s: 1.0, alpha_mode: AlphaMode::Constant }).unwrap();
        let hi = scaled_supervised_contrastive(b.z.view(), &rel, &ContrastiveConfig { tau, s: 25.0, alpha_mode: AlphaMode::Constant }).unwrap();
        prop_assert!((lo.loss - hi.loss).abs() <= 1e-12);
    }
}

/// Oracle with an arbitrary weight rule, normalized by the weight sum.
fn brute_weighted(b: &Batch, tau: f64, weight: impl Fn(bool) -> f64) -> f64 {
    let k = b.labels.len();
    let cos = |i: usize, j: usize| b.z.row(i).dot(&b.z.row(j));
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..k {
        let lse = (0..k).filter(|&j| j != i).map(|j| (cos(i, j) / tau).exp()).sum::<f64>().ln();
        let (mut num, mut wsum) = (0.0, 0.0);
        for p in (0..k).filter(|&p| p != i && b.labels[p] == b.labels[i]) {
            let w = weight(b.groups[p] == b.groups[i]);
            num += w * (cos(i, p) / tau - lse);
            wsum += w;
        }
        if wsum > 0.0 {
            total -= num / wsum;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}
