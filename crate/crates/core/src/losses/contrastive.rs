//! InfoNCE, supervised contrastive (SCL) and scaled supervised contrastive
//! (SSCL) losses over a batch of projected representations.
//!
//! All three share the same per-row structure: with `S_ik = Φ(z_i, z_k) / τ`
//! and `LSE_i = log Σ_{k≠i} exp(S_ik)`, the log-probability of a positive `p`
//! is `S_ip - LSE_i`. Gradients are taken with respect to the raw vectors,
//! including the normalization inside the cosine similarity `Φ`.

use ndarray::{Array2, ArrayView2, Axis, Zip};

use super::{AlphaMode, BatchRelations, ContrastiveConfig};
use crate::error::{invalid, Error, Result};

const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveOutput {
    pub loss: f64,
    /// Gradient of `loss` with respect to every row of `z`.
    pub grads: Array2<f64>,
    /// Normalized per-sample losses; zero for samples without positives.
    pub per_sample: Vec<f64>,
}

/// Row norms and the cosine-similarity matrix.
struct Similarities {
    norms: Vec<f64>,
    cos: Array2<f64>,
}

impl Similarities {
    fn new(z: ArrayView2<'_, f64>) -> Result<Self> {
        let norms: Vec<f64> = z.axis_iter(Axis(0)).map(|r| r.dot(&r).sqrt()).collect();
        if let Some(i) = norms.iter().position(|&n| n == 0.0) {
            return Err(Error::NotUnitNorm { index: i, norm: 0.0 });
        }
        let mut cos = z.dot(&z.t());
        for ((i, k), c) in cos.indexed_iter_mut() {
            *c /= norms[i] * norms[k];
        }
        Ok(Self { norms, cos })
    }

    /// `(max, log Σ_{k≠i} exp(cos_ik / τ))` and the softmax row over `k ≠ i`.
    fn row_softmax(&self, i: usize, tau: f64) -> (f64, Vec<f64>) {
        let k = self.cos.ncols();
        let max = (0..k)
            .filter(|&j| j != i)
            .map(|j| self.cos[(i, j)] / tau)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut probs = vec![0.0; k];
        let mut sum = 0.0;
        for j in (0..k).filter(|&j| j != i) {
            let e = (self.cos[(i, j)] / tau - max).exp();
            probs[j] = e;
            sum += e;
        }
        probs.iter_mut().for_each(|p| *p /= sum);
        (max + sum.ln(), probs)
    }

    /// Chains `∂loss/∂Φ_ik` back to the raw vectors.
    ///
    /// With `G = D + Dᵀ` (Φ is symmetric) and `∂Φ_ik/∂z_i = z_k/(|z_i||z_k|) - Φ_ik z_i/|z_i|²`,
    /// row `i` of the result is `Σ_k G_ik z_k/(|z_i||z_k|) - z_i/|z_i|² Σ_k G_ik Φ_ik`.
    fn backprop(&self, z: ArrayView2<'_, f64>, d_phi: &Array2<f64>) -> Array2<f64> {
        let sym = d_phi + &d_phi.t();
        let mut unit = z.to_owned();
        for (mut row, &n) in unit.axis_iter_mut(Axis(0)).zip(&self.norms) {
            row.mapv_inplace(|x| x / n);
        }
        let mut grads = sym.dot(&unit);
        for (i, mut row) in grads.axis_iter_mut(Axis(0)).enumerate() {
            let ni = self.norms[i];
            let radial: f64 = sym.row(i).dot(&self.cos.row(i));
            Zip::from(&mut row)
                .and(z.row(i))
                .for_each(|g, &zi| *g = *g / ni - radial * zi / (ni * ni));
        }
        grads
    }
}

fn check_unit_rows(z: ArrayView2<'_, f64>) -> Result<()> {
    for (i, row) in z.axis_iter(Axis(0)).enumerate() {
        let norm = row.dot(&row).sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::NotUnitNorm { index: i, norm });
        }
    }
    Ok(())
}

fn check_batch(z: ArrayView2<'_, f64>, rel: &BatchRelations) -> Result<()> {
    if z.nrows() < 2 {
        return Err(invalid("z", "batch needs at least two vectors"));
    }
    if rel.len() != z.nrows() {
        return Err(Error::DimensionMismatch {
            what: "batch relations".into(),
            expected: z.nrows(),
            actual: rel.len(),
        });
    }
    check_unit_rows(z)
}

/// InfoNCE for the pair `(i, p)`, every other `k ≠ i` acting as a denominator term.
pub fn info_nce(z: ArrayView2<'_, f64>, i: usize, p: usize, tau: f64) -> Result<(f64, Array2<f64>)> {
    let k = z.nrows();
    if k < 2 {
        return Err(invalid("z", "batch needs at least two vectors"));
    }
    if i >= k || p >= k {
        return Err(invalid("index", format!("({i}, {p}) out of range for batch of {k}")));
    }
    if p == i {
        return Err(invalid("p", "positive must differ from the reference"));
    }
    if !(tau > 0.0) {
        return Err(invalid("tau", format!("temperature must be positive, got {tau}")));
    }
    check_unit_rows(z)?;
    let sims = Similarities::new(z)?;
    let (lse, probs) = sims.row_softmax(i, tau);
    let loss = lse - sims.cos[(i, p)] / tau;
    let mut d_phi = Array2::zeros((k, k));
    for j in (0..k).filter(|&j| j != i) {
        d_phi[(i, j)] = probs[j] / tau;
    }
    d_phi[(i, p)] -= 1.0 / tau;
    Ok((loss, sims.backprop(z, &d_phi)))
}

/// Supervised contrastive loss: every same-label sample is a positive with
/// unit weight. The batch loss is the mean of `-(1/|P_i|) Σ_p log prob_ip`
/// over samples that have at least one positive.
pub fn supervised_contrastive(
    z: ArrayView2<'_, f64>,
    rel: &BatchRelations,
    tau: f64,
) -> Result<ContrastiveOutput> {
    if !(tau > 0.0) {
        return Err(invalid("tau", format!("temperature must be positive, got {tau}")));
    }
    check_batch(z, rel)?;
    let k = z.nrows();
    let sims = Similarities::new(z)?;
    let mut per_sample = vec![0.0; k];
    let mut d_phi = Array2::zeros((k, k));
    let mut contributing = 0usize;
    for i in 0..k {
        let pos = rel.positives_of(i);
        if pos.is_empty() {
            continue;
        }
        contributing += 1;
        let (lse, probs) = sims.row_softmax(i, tau);
        let mean_pos_sim = pos.iter().map(|&p| sims.cos[(i, p)]).sum::<f64>() / pos.len() as f64;
        per_sample[i] = lse - mean_pos_sim / tau;
        for j in (0..k).filter(|&j| j != i) {
            d_phi[(i, j)] = probs[j] / tau;
        }
        for &p in &pos {
            d_phi[(i, p)] -= 1.0 / (tau * pos.len() as f64);
        }
    }
    finish(z, &sims, per_sample, d_phi, contributing)
}

fn finish(
    z: ArrayView2<'_, f64>,
    sims: &Similarities,
    per_sample: Vec<f64>,
    mut d_phi: Array2<f64>,
    contributing: usize,
) -> Result<ContrastiveOutput> {
    if contributing == 0 {
        return Ok(ContrastiveOutput {
            loss: 0.0,
            grads: Array2::zeros(z.raw_dim()),
            per_sample,
        });
    }
    let scale = 1.0 / contributing as f64;
    let loss = per_sample.iter().sum::<f64>() * scale;
    d_phi.mapv_inplace(|g| g * scale);
    Ok(ContrastiveOutput {
        loss,
        grads: sims.backprop(z, &d_phi),
        per_sample,
    })
}

/// Paraphrase weight of the positive pair `(i, p)`.
///
/// Constant mode gives `s` to paraphrase pairs and 1 otherwise; dynamic mode
/// multiplies that by the cosine distance `1 - cos(z_i, z_p)`.
pub fn alpha(
    i: usize,
    p: usize,
    rel: &BatchRelations,
    cfg: &ContrastiveConfig,
    z: ArrayView2<'_, f64>,
) -> Result<f64> {
    if i >= rel.len() || p >= rel.len() || !rel.positive[(i, p)] {
        return Err(Error::NotAPositive(i, p));
    }
    let base = if rel.paraphrase[(i, p)] { cfg.s } else { 1.0 };
    Ok(match cfg.alpha_mode {
        AlphaMode::Constant => base,
        AlphaMode::Dynamic => {
            let (a, b) = (z.row(i), z.row(p));
            let cos = a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt());
            base * (1.0 - cos)
        }
    })
}

/// Scaled supervised contrastive loss.
///
/// Per sample, `L_i = -Σ_p α_ip log prob_ip / Σ_p α_ip`; the batch loss is
/// the mean of `L_i` over samples whose weights sum to a positive value.
/// In dynamic mode the gradient also flows through `α_ip`.
pub fn scaled_supervised_contrastive(
    z: ArrayView2<'_, f64>,
    rel: &BatchRelations,
    cfg: &ContrastiveConfig,
) -> Result<ContrastiveOutput> {
    cfg.validate()?;
    check_batch(z, rel)?;
    weighted_core(z, rel, cfg.tau, |i, p, cos| {
        let base = if rel.paraphrase[(i, p)] { cfg.s } else { 1.0 };
        match cfg.alpha_mode {
            AlphaMode::Constant => (base, 0.0),
            AlphaMode::Dynamic => (base * (1.0 - cos), -base),
        }
    })
}

/// The same loss with caller-supplied weights: `weights[(i, p)]` is used for
/// every positive pair and treated as a constant. Must be non-negative.
pub fn weighted_supervised_contrastive(
    z: ArrayView2<'_, f64>,
    rel: &BatchRelations,
    weights: ArrayView2<'_, f64>,
    tau: f64,
) -> Result<ContrastiveOutput> {
    if !(tau > 0.0) {
        return Err(invalid("tau", format!("temperature must be positive, got {tau}")));
    }
    check_batch(z, rel)?;
    if weights.dim() != (z.nrows(), z.nrows()) {
        return Err(Error::DimensionMismatch {
            what: "weight matrix rows".into(),
            expected: z.nrows(),
            actual: weights.nrows(),
        });
    }
    if weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
        return Err(invalid("weights", "must be finite and non-negative"));
    }
    weighted_core(z, rel, tau, |i, p, _| (weights[(i, p)], 0.0))
}

/// `alpha(i, p, Φ_ip)` returns the pair weight and its derivative in `Φ_ip`.
fn weighted_core(
    z: ArrayView2<'_, f64>,
    rel: &BatchRelations,
    tau: f64,
    alpha: impl Fn(usize, usize, f64) -> (f64, f64),
) -> Result<ContrastiveOutput> {
    let k = z.nrows();
    let sims = Similarities::new(z)?;
    let mut per_sample = vec![0.0; k];
    let mut d_phi = Array2::zeros((k, k));
    let mut contributing = 0usize;
    for i in 0..k {
        let pos = rel.positives_of(i);
        if pos.is_empty() {
            continue;
        }
        let (weights, d_weights): (Vec<f64>, Vec<f64>) = pos.iter().map(|&p| alpha(i, p, sims.cos[(i, p)])).unzip();
        let total_weight: f64 = weights.iter().sum();
        if total_weight <= 0.0 {
            continue;
        }
        contributing += 1;
        let (lse, probs) = sims.row_softmax(i, tau);
        let neg_logp: Vec<f64> = pos.iter().map(|&p| lse - sims.cos[(i, p)] / tau).collect();
        let li = weights.iter().zip(&neg_logp).map(|(w, l)| w * l).sum::<f64>() / total_weight;
        per_sample[i] = li;

        for j in (0..k).filter(|&j| j != i) {
            d_phi[(i, j)] = probs[j] / tau;
        }
        for (n, &p) in pos.iter().enumerate() {
            d_phi[(i, p)] -= weights[n] / (total_weight * tau);
            // ∂L_i/∂α_ip = (-log prob_ip - L_i) / Σα
            d_phi[(i, p)] += d_weights[n] * (neg_logp[n] - li) / total_weight;
        }
    }
    finish(z, &sims, per_sample, d_phi, contributing)
}
