//! Central finite-difference gradient checking.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    cross_entropy, info_nce, scaled_supervised_contrastive, supervised_contrastive, AlphaMode, BatchRelations,
    ContrastiveConfig,
};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Agreement between an analytic gradient and central differences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    /// `‖a - n‖₂ / (‖a‖₂ + ‖n‖₂)`, zero when both vanish.
    pub normwise: f64,
    /// `max_j |a_j - n_j| / max(|a_j| + |n_j|, 1e-8)`. Coordinates near zero
    /// are dominated by roundoff in the loss, so this is reported, not gated.
    pub coordinatewise: f64,
}

/// Compares the analytic gradient returned by `loss_fn` at `inputs` with
/// coordinate-wise central differences of step `h`.
pub fn finite_difference_check<F>(mut loss_fn: F, inputs: &[f64], h: f64) -> GradCheck
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = loss_fn(inputs);
    assert_eq!(analytic.len(), inputs.len(), "gradient length must match inputs");
    let mut x = inputs.to_vec();
    let mut coordinatewise = 0.0f64;
    let (mut diff_sq, mut a_sq, mut n_sq) = (0.0, 0.0, 0.0);
    for j in 0..x.len() {
        let orig = x[j];
        x[j] = orig + h;
        let (plus, _) = loss_fn(&x);
        x[j] = orig - h;
        let (minus, _) = loss_fn(&x);
        x[j] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[j];
        coordinatewise = coordinatewise.max((a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8));
        diff_sq += (a - numeric) * (a - numeric);
        a_sq += a * a;
        n_sq += numeric * numeric;
    }
    let denom = a_sq.sqrt() + n_sq.sqrt();
    GradCheck {
        normwise: if denom == 0.0 { 0.0 } else { diff_sq.sqrt() / denom },
        coordinatewise,
    }
}

/// Losses covered by [`gradient_suite`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckedLoss {
    CrossEntropy,
    InfoNce,
    Scl,
    SsclConstant,
    SsclDynamic,
}

impl CheckedLoss {
    pub const ALL: [CheckedLoss; 5] = [
        CheckedLoss::CrossEntropy,
        CheckedLoss::InfoNce,
        CheckedLoss::Scl,
        CheckedLoss::SsclConstant,
        CheckedLoss::SsclDynamic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckedLoss::CrossEntropy => "cross_entropy",
            CheckedLoss::InfoNce => "info_nce",
            CheckedLoss::Scl => "scl",
            CheckedLoss::SsclConstant => "sscl_constant",
            CheckedLoss::SsclDynamic => "sscl_dynamic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub loss: CheckedLoss,
    pub instances: usize,
    /// Largest normwise relative error over the instances.
    pub max_rel_error: f64,
    /// Largest coordinatewise relative error over the instances.
    pub max_coord_error: f64,
}

/// One random contrastive instance: unit rows, labels and paraphrase groups.
#[derive(Debug, Clone)]
pub struct ContrastiveInstance {
    pub z: Array2<f64>,
    pub relations: BatchRelations,
    pub tau: f64,
    pub s: f64,
}

/// Random batch with `K ≤ max_k` rows of dimension `≤ max_d`, a few labels
/// and paraphrase groups within labels.
pub fn random_instance<R: Rng + ?Sized>(rng: &mut R, max_k: usize, max_d: usize) -> ContrastiveInstance {
    let k = rng.random_range(3..=max_k.max(3));
    let d = rng.random_range(2..=max_d.max(2));
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut z = Array2::from_shape_fn((k, d), |_| normal.sample(rng));
    normalize_rows(&mut z);
    let num_labels = rng.random_range(1..=(k / 2).max(1));
    let labels: Vec<usize> = (0..k).map(|_| rng.random_range(0..num_labels)).collect();
    let mut groups: Vec<String> = Vec::with_capacity(k);
    for i in 0..k {
        let mate = (0..i).rev().find(|&j| labels[j] == labels[i]);
        match mate {
            Some(j) if rng.random_bool(0.5) => {
                let g = groups[j].clone();
                groups.push(g);
            }
            _ => groups.push(format!("g{i}")),
        }
    }
    ContrastiveInstance {
        z,
        relations: BatchRelations::new(labels, groups).expect("lengths match"),
        tau: rng.random_range(0.1..1.0),
        s: rng.random_range(1.0..30.0),
    }
}

fn normalize_rows(z: &mut Array2<f64>) {
    for mut row in z.axis_iter_mut(Axis(0)) {
        let n = row.dot(&row).sqrt();
        row.mapv_inplace(|x| x / n);
    }
}

/// The contrastive losses only see directions, so evaluating them on
/// row-normalized perturbations is the same function and lets the step
/// size ignore the unit-norm validation.
fn contrastive_check<F>(inst: &ContrastiveInstance, h: f64, loss: F) -> GradCheck
where
    F: Fn(ArrayView2<'_, f64>) -> (f64, Array2<f64>),
{
    let shape = inst.z.raw_dim();
    let flat: Vec<f64> = inst.z.iter().copied().collect();
    finite_difference_check(
        |x| {
            let mut z = Array2::from_shape_vec(shape, x.to_vec()).expect("shape preserved");
            normalize_rows(&mut z);
            let (l, g) = loss(z.view());
            (l, g.into_iter().collect())
        },
        &flat,
        h,
    )
}

/// Max relative error of one loss on one random instance.
pub fn check_instance<R: Rng + ?Sized>(which: CheckedLoss, rng: &mut R, h: f64) -> GradCheck {
    if which == CheckedLoss::CrossEntropy {
        let c = rng.random_range(2..=12);
        let normal = Normal::new(0.0, 3.0).expect("valid normal");
        let logits: Vec<f64> = (0..c).map(|_| normal.sample(rng)).collect();
        let label = rng.random_range(0..c);
        return finite_difference_check(
            |x| {
                let (l, g) = cross_entropy(ArrayView1::from(x), label).expect("valid label");
                (l, g.to_vec())
            },
            &logits,
            h,
        );
    }
    let inst = random_instance(rng, 12, 8);
    let tau = inst.tau;
    let cfg = |alpha_mode| ContrastiveConfig {
        tau,
        s: inst.s,
        alpha_mode,
    };
    match which {
        CheckedLoss::CrossEntropy => unreachable!(),
        CheckedLoss::InfoNce => {
            let k = inst.z.nrows();
            let i = rng.random_range(0..k);
            let p = (i + rng.random_range(1..k)) % k;
            contrastive_check(&inst, h, |z| info_nce(z, i, p, tau).expect("valid instance"))
        }
        CheckedLoss::Scl => contrastive_check(&inst, h, |z| {
            let o = supervised_contrastive(z, &inst.relations, tau).expect("valid instance");
            (o.loss, o.grads)
        }),
        CheckedLoss::SsclConstant | CheckedLoss::SsclDynamic => {
            let mode = if which == CheckedLoss::SsclConstant {
                AlphaMode::Constant
            } else {
                AlphaMode::Dynamic
            };
            let c = cfg(mode);
            contrastive_check(&inst, h, |z| {
                let o = scaled_supervised_contrastive(z, &inst.relations, &c).expect("valid instance");
                (o.loss, o.grads)
            })
        }
    }
}

/// Runs every loss on `instances` random instances drawn from `seed`.
pub fn gradient_suite(instances: usize, seed: u64, h: f64) -> Vec<SuiteRow> {
    CheckedLoss::ALL
        .iter()
        .enumerate()
        .map(|(n, &loss)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(n as u64);
            let (mut max_rel_error, mut max_coord_error) = (0.0f64, 0.0f64);
            for _ in 0..instances {
                let c = check_instance(loss, &mut rng, h);
                max_rel_error = max_rel_error.max(c.normwise);
                max_coord_error = max_coord_error.max(c.coordinatewise);
            }
            SuiteRow {
                loss,
                instances,
                max_rel_error,
                max_coord_error,
            }
        })
        .collect()
}
