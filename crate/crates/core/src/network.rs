//! The desk-scale model and its optimizer.
//!
//! * encoder `f`: two tanh affine layers over `concat(image_features, question_embedding)`
//!   producing the joint representation `h`;
//! * projection head `g`: two affine layers (tanh between) followed by L2
//!   normalization, producing the unit vector `z` used only by contrastive losses;
//! * classifier `f^c`: one affine layer from `h` to answer logits.
//!
//! Backpropagation is written by hand. Each parameter block (encoder,
//! projection, classifier) keeps its own Adam moments and step count so a
//! block that receives no gradient in an iteration is left untouched.

use std::path::Path;

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Below this pre-normalization norm the projection output falls back to `e₁`.
pub const SAFE_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkDims {
    pub d_v: usize,
    pub d_q: usize,
    pub d_h: usize,
    pub d_z: usize,
    pub num_labels: usize,
}

impl NetworkDims {
    pub fn input(&self) -> usize {
        self.d_v + self.d_q
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out × in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    m_weight: Array2<f64>,
    v_weight: Array2<f64>,
    m_bias: Array1<f64>,
    v_bias: Array1<f64>,
}

impl Layer {
    fn xavier(inp: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (inp + out) as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((out, inp), || rng.random_range(-limit..limit));
        Self::from_params(weight, Array1::zeros(out))
    }

    pub fn from_params(weight: Array2<f64>, bias: Array1<f64>) -> Self {
        Self {
            m_weight: Array2::zeros(weight.raw_dim()),
            v_weight: Array2::zeros(weight.raw_dim()),
            m_bias: Array1::zeros(bias.raw_dim()),
            v_bias: Array1::zeros(bias.raw_dim()),
            weight,
            bias,
        }
    }

    fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub layers: Vec<Layer>,
    /// Adam steps applied to this block (for bias correction).
    pub steps: u64,
}

impl Block {
    fn new(layers: Vec<Layer>) -> Self {
        Self { layers, steps: 0 }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    fn set_flat_params(&mut self, mut src: &[f64]) -> usize {
        let mut used = 0;
        for l in &mut self.layers {
            for w in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *w = src[0];
                src = &src[1..];
                used += 1;
            }
        }
        used
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Encoder,
    Projection,
    Classifier,
}

impl BlockKind {
    fn name(self) -> &'static str {
        match self {
            BlockKind::Encoder => "encoder",
            BlockKind::Projection => "projection",
            BlockKind::Classifier => "classifier",
        }
    }
}

/// Parameters, optimizer moments and step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkState {
    pub dims: NetworkDims,
    pub encoder: Block,
    /// `None` once the projection head has been discarded for export.
    pub projection: Option<Block>,
    pub classifier: Block,
    /// Optimizer steps taken so far.
    pub iteration: u64,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    input: Array2<f64>,
    enc_hidden: Array2<f64>,
    pub h: Array2<f64>,
    proj_hidden: Option<Array2<f64>>,
    proj_norms: Vec<f64>,
    pub z: Option<Array2<f64>>,
    pub logits: Array2<f64>,
}

/// Per-layer `(weight, bias)` gradients for one block.
pub type BlockGrad = Vec<(Array2<f64>, Array1<f64>)>;

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub encoder: BlockGrad,
    pub projection: Option<BlockGrad>,
    pub classifier: Option<BlockGrad>,
}

fn scale_block(g: &BlockGrad, c: f64) -> BlockGrad {
    g.iter().map(|(w, b)| (w * c, b * c)).collect()
}

fn combine_block(a: Option<&BlockGrad>, wa: f64, b: Option<&BlockGrad>, wb: f64) -> Option<BlockGrad> {
    let a = a.filter(|_| wa != 0.0);
    let b = b.filter(|_| wb != 0.0);
    match (a, b) {
        (None, None) => None,
        (Some(a), None) => Some(scale_block(a, wa)),
        (None, Some(b)) => Some(scale_block(b, wb)),
        (Some(a), Some(b)) => Some(
            a.iter()
                .zip(b)
                .map(|((aw, ab), (bw, bb))| (aw * wa + bw * wb, ab * wa + bb * wb))
                .collect(),
        ),
    }
}

fn block_sq_norm(g: &BlockGrad) -> f64 {
    g.iter()
        .map(|(w, b)| w.iter().map(|x| x * x).sum::<f64>() + b.iter().map(|x| x * x).sum::<f64>())
        .sum()
}

fn flatten_block(g: &BlockGrad, out: &mut Vec<f64>) {
    for (w, b) in g {
        out.extend(w.iter());
        out.extend(b.iter());
    }
}

impl Gradients {
    /// `wa·a + wb·b`, treating a missing block as zero. A side with weight
    /// zero is dropped entirely, so a block only it reaches stays `None`.
    pub fn combine(a: &Gradients, wa: f64, b: &Gradients, wb: f64) -> Gradients {
        Gradients {
            encoder: combine_block(Some(&a.encoder), wa, Some(&b.encoder), wb)
                .unwrap_or_else(|| scale_block(&a.encoder, 0.0)),
            projection: combine_block(a.projection.as_ref(), wa, b.projection.as_ref(), wb),
            classifier: combine_block(a.classifier.as_ref(), wa, b.classifier.as_ref(), wb),
        }
    }

    pub fn scaled(&self, c: f64) -> Gradients {
        Gradients {
            encoder: scale_block(&self.encoder, c),
            projection: self.projection.as_ref().map(|g| scale_block(g, c)),
            classifier: self.classifier.as_ref().map(|g| scale_block(g, c)),
        }
    }

    pub fn l2_norm(&self) -> f64 {
        let mut sq = block_sq_norm(&self.encoder);
        sq += self.projection.as_ref().map_or(0.0, block_sq_norm);
        sq += self.classifier.as_ref().map_or(0.0, block_sq_norm);
        sq.sqrt()
    }

    pub fn encoder_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        flatten_block(&self.encoder, &mut out);
        out
    }

    /// All gradients in parameter order (encoder, projection, classifier);
    /// absent blocks contribute zeros of the right length.
    pub fn flat(&self, state: &NetworkState) -> Vec<f64> {
        let mut out = self.encoder_flat();
        match (&self.projection, &state.projection) {
            (Some(g), _) => flatten_block(g, &mut out),
            (None, Some(p)) => out.extend(std::iter::repeat_n(0.0, p.param_count())),
            (None, None) => {}
        }
        match &self.classifier {
            Some(g) => flatten_block(g, &mut out),
            None => out.extend(std::iter::repeat_n(0.0, state.classifier.param_count())),
        }
        out
    }

    fn check_finite(&self) -> Result<()> {
        let blocks = [
            (BlockKind::Encoder, Some(&self.encoder)),
            (BlockKind::Projection, self.projection.as_ref()),
            (BlockKind::Classifier, self.classifier.as_ref()),
        ];
        for (kind, g) in blocks {
            if let Some(g) = g {
                if g.iter().any(|(w, b)| w.iter().chain(b.iter()).any(|x| !x.is_finite())) {
                    return Err(Error::NonFiniteGradient(kind.name()));
                }
            }
        }
        Ok(())
    }
}

/// Linear warmup followed by a staircase decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_factor: f64,
    pub warmup_iters: u64,
    pub decay_factor: f64,
    pub decay_steps: Vec<u64>,
}

/// Iteration count the reference schedule was designed for.
pub const REFERENCE_TOTAL_ITERS: u64 = 25_000;

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base_lr: 2e-4,
            warmup_factor: 0.1,
            warmup_iters: 4266,
            decay_factor: 0.2,
            decay_steps: vec![10_665, 14_931],
        }
    }
}

impl LrSchedule {
    /// The default schedule with every milestone shrunk by `total_iters / 25000`.
    pub fn scaled_to(total_iters: u64) -> Self {
        Self::default().rescaled(total_iters)
    }

    /// This schedule with its milestones multiplied by `total_iters / 25000`.
    pub fn rescaled(&self, total_iters: u64) -> Self {
        let ratio = total_iters as f64 / REFERENCE_TOTAL_ITERS as f64;
        let scale = |x: u64| (x as f64 * ratio).round() as u64;
        Self {
            warmup_iters: scale(self.warmup_iters),
            decay_steps: self.decay_steps.iter().map(|&s| scale(s)).collect(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(crate::error::invalid("base_lr", "must be positive"));
        }
        if !(self.warmup_factor > 0.0 && self.warmup_factor <= 1.0) {
            return Err(crate::error::invalid("warmup_factor", "must be in (0, 1]"));
        }
        if self.decay_steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(crate::error::invalid("decay_steps", "must be strictly increasing"));
        }
        Ok(())
    }
}

/// Learning rate for the optimizer step with zero-based index `iteration`.
pub fn lr_at(iteration: u64, schedule: &LrSchedule) -> f64 {
    if iteration < schedule.warmup_iters {
        let frac = iteration as f64 / schedule.warmup_iters as f64;
        let factor = schedule.warmup_factor + (1.0 - schedule.warmup_factor) * frac;
        return schedule.base_lr * factor;
    }
    let passed = schedule.decay_steps.iter().filter(|&&s| iteration >= s).count();
    schedule.base_lr * schedule.decay_factor.powi(passed as i32)
}

/// Optimizer settings that are not part of the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepConfig {
    /// Global L2 norm the gradient is clipped to; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for StepConfig {
    fn default() -> Self {
        Self {
            clip_norm: Some(0.25),
        }
    }
}

fn adam_update_layer(layer: &mut Layer, gw: &Array2<f64>, gb: &Array1<f64>, lr: f64, t: u64) {
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    Zip::from(&mut layer.weight)
        .and(&mut layer.m_weight)
        .and(&mut layer.v_weight)
        .and(gw)
        .for_each(|w, m, v, &g| adam_scalar(w, m, v, g, lr, bc1, bc2));
    Zip::from(&mut layer.bias)
        .and(&mut layer.m_bias)
        .and(&mut layer.v_bias)
        .and(gb)
        .for_each(|w, m, v, &g| adam_scalar(w, m, v, g, lr, bc1, bc2));
}

#[inline]
fn adam_scalar(w: &mut f64, m: &mut f64, v: &mut f64, g: f64, lr: f64, bc1: f64, bc2: f64) {
    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
    let m_hat = *m / bc1;
    let v_hat = *v / bc2;
    *w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
}

fn adam_update_block(block: &mut Block, grads: &BlockGrad, lr: f64) {
    block.steps += 1;
    let t = block.steps;
    for (layer, (gw, gb)) in block.layers.iter_mut().zip(grads) {
        adam_update_layer(layer, gw, gb, lr, t);
    }
}

fn tanh_grad(upstream: &Array2<f64>, activated: &Array2<f64>) -> Array2<f64> {
    let mut out = upstream.clone();
    Zip::from(&mut out).and(activated).for_each(|d, &a| *d *= 1.0 - a * a);
    out
}

fn layer_grads(d_out: &Array2<f64>, input: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    (d_out.t().dot(input), d_out.sum_axis(Axis(0)))
}

impl NetworkState {
    pub fn new(dims: NetworkDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Block::new(vec![
            Layer::xavier(dims.input(), dims.d_h, &mut rng),
            Layer::xavier(dims.d_h, dims.d_h, &mut rng),
        ]);
        let projection = Block::new(vec![
            Layer::xavier(dims.d_h, dims.d_h, &mut rng),
            Layer::xavier(dims.d_h, dims.d_z, &mut rng),
        ]);
        let classifier = Block::new(vec![Layer::xavier(dims.d_h, dims.num_labels, &mut rng)]);
        Self {
            dims,
            encoder,
            projection: Some(projection),
            classifier,
            iteration: 0,
        }
    }

    /// Every weight and bias set to zero.
    pub fn zeroed(dims: NetworkDims) -> Self {
        let mut s = Self::new(dims, 0);
        let zero = |b: &mut Block| {
            for l in &mut b.layers {
                l.weight.fill(0.0);
                l.bias.fill(0.0);
            }
        };
        zero(&mut s.encoder);
        zero(s.projection.as_mut().expect("fresh state has projection"));
        zero(&mut s.classifier);
        s
    }

    /// Drops the projection head; the remaining encoder and classifier are the exported model.
    pub fn discard_projection(&mut self) {
        self.projection = None;
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count()
            + self.projection.as_ref().map_or(0, Block::param_count)
            + self.classifier.param_count()
    }

    /// All parameters in a fixed order: encoder, projection, classifier.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = self.encoder.flat_params();
        if let Some(p) = &self.projection {
            out.extend(p.flat_params());
        }
        out.extend(self.classifier.flat_params());
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                what: "flat parameters".into(),
                expected: self.param_count(),
                actual: params.len(),
            });
        }
        let mut off = self.encoder.set_flat_params(params);
        if let Some(p) = &mut self.projection {
            off += p.set_flat_params(&params[off..]);
        }
        self.classifier.set_flat_params(&params[off..]);
        Ok(())
    }

    pub fn forward(&self, image_features: ArrayView2<'_, f64>, questions: ArrayView2<'_, f64>) -> Result<ForwardPass> {
        let d = self.dims;
        if image_features.ncols() != d.d_v {
            return Err(Error::DimensionMismatch {
                what: "image features".into(),
                expected: d.d_v,
                actual: image_features.ncols(),
            });
        }
        if questions.ncols() != d.d_q {
            return Err(Error::DimensionMismatch {
                what: "question embeddings".into(),
                expected: d.d_q,
                actual: questions.ncols(),
            });
        }
        if questions.nrows() != image_features.nrows() {
            return Err(Error::DimensionMismatch {
                what: "batch rows".into(),
                expected: image_features.nrows(),
                actual: questions.nrows(),
            });
        }
        let input = concatenate(Axis(1), &[image_features, questions]).expect("row counts match");
        let enc = &self.encoder.layers;
        let enc_hidden = enc[0].apply(input.view()).mapv_into(f64::tanh);
        let h = enc[1].apply(enc_hidden.view()).mapv_into(f64::tanh);
        let logits = self.classifier.layers[0].apply(h.view());

        let (proj_hidden, proj_norms, z) = match &self.projection {
            Some(p) => {
                let ph = p.layers[0].apply(h.view()).mapv_into(f64::tanh);
                let mut u = p.layers[1].apply(ph.view());
                let mut norms = Vec::with_capacity(u.nrows());
                for mut row in u.axis_iter_mut(Axis(0)) {
                    let n = row.dot(&row).sqrt();
                    norms.push(n);
                    if n < SAFE_NORM_EPS {
                        row.fill(0.0);
                        row[0] = 1.0;
                    } else {
                        row.mapv_inplace(|x| x / n);
                    }
                }
                (Some(ph), norms, Some(u))
            }
            None => (None, Vec::new(), None),
        };
        Ok(ForwardPass {
            input,
            enc_hidden,
            h,
            proj_hidden,
            proj_norms,
            z,
            logits,
        })
    }

    /// Backpropagates upstream gradients on `z` and/or the logits. A block
    /// that no upstream gradient reaches gets `None`.
    pub fn backward(
        &self,
        pass: &ForwardPass,
        d_z: Option<&Array2<f64>>,
        d_logits: Option<&Array2<f64>>,
    ) -> Result<Gradients> {
        let mut d_h = Array2::<f64>::zeros(pass.h.raw_dim());

        let classifier = match d_logits {
            Some(dl) => {
                check_shape("logit gradient", dl, &pass.logits)?;
                let layer = &self.classifier.layers[0];
                d_h += &dl.dot(&layer.weight);
                Some(vec![layer_grads(dl, &pass.h)])
            }
            None => None,
        };

        let projection = match d_z {
            Some(dz) => {
                let (p, z, ph) = match (&self.projection, &pass.z, &pass.proj_hidden) {
                    (Some(p), Some(z), Some(ph)) => (p, z, ph),
                    _ => return Err(crate::error::invalid("d_z", "projection head has been discarded")),
                };
                check_shape("projection gradient", dz, z)?;
                // d/du of u/|u| applied to dz: (dz - (dz·z) z) / |u|
                let mut du = dz.clone();
                for (i, mut row) in du.axis_iter_mut(Axis(0)).enumerate() {
                    let n = pass.proj_norms[i];
                    if n < SAFE_NORM_EPS {
                        row.fill(0.0);
                        continue;
                    }
                    let zi = z.row(i);
                    let proj = row.dot(&zi);
                    Zip::from(&mut row).and(&zi).for_each(|d, &zv| *d = (*d - proj * zv) / n);
                }
                let g1 = layer_grads(&du, ph);
                let d_ph = tanh_grad(&du.dot(&p.layers[1].weight), ph);
                let g0 = layer_grads(&d_ph, &pass.h);
                d_h += &d_ph.dot(&p.layers[0].weight);
                Some(vec![g0, g1])
            }
            None => None,
        };

        let enc = &self.encoder.layers;
        let d_a2 = tanh_grad(&d_h, &pass.h);
        let g1 = layer_grads(&d_a2, &pass.enc_hidden);
        let d_a1 = tanh_grad(&d_a2.dot(&enc[1].weight), &pass.enc_hidden);
        let g0 = layer_grads(&d_a1, &pass.input);
        Ok(Gradients {
            encoder: vec![g0, g1],
            projection,
            classifier,
        })
    }

    /// One optimizer step: finite check, global-norm clipping, then Adam on
    /// every block that has a gradient, at `lr_at(self.iteration)`.
    pub fn apply_gradients(&mut self, grads: &Gradients, schedule: &LrSchedule, step: &StepConfig) -> Result<f64> {
        grads.check_finite()?;
        let lr = lr_at(self.iteration, schedule);
        let clipped;
        let g = match step.clip_norm {
            Some(max) => {
                let norm = grads.l2_norm();
                if norm > max {
                    clipped = grads.scaled(max / norm);
                    &clipped
                } else {
                    grads
                }
            }
            None => grads,
        };
        adam_update_block(&mut self.encoder, &g.encoder, lr);
        if let Some(pg) = &g.projection {
            let p = self
                .projection
                .as_mut()
                .ok_or_else(|| crate::error::invalid("projection", "head has been discarded"))?;
            adam_update_block(p, pg, lr);
        }
        if let Some(cg) = &g.classifier {
            adam_update_block(&mut self.classifier, cg, lr);
        }
        self.iteration += 1;
        Ok(lr)
    }

    /// Backward pass followed by an optimizer step.
    pub fn backward_and_step(
        &mut self,
        pass: &ForwardPass,
        d_z: Option<&Array2<f64>>,
        d_logits: Option<&Array2<f64>>,
        schedule: &LrSchedule,
        step: &StepConfig,
    ) -> Result<f64> {
        let grads = self.backward(pass, d_z, d_logits)?;
        self.apply_gradients(&grads, schedule, step)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        serde_json::to_writer(&mut w, &Checkpoint::new(self.clone()))?;
        std::io::Write::flush(&mut w)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let ck: Checkpoint = serde_json::from_reader(std::io::BufReader::new(f))?;
        ck.into_state()
    }
}

fn check_shape(what: &str, a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            what: what.into(),
            expected: b.len(),
            actual: a.len(),
        });
    }
    Ok(())
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub state: NetworkState,
}

impl Checkpoint {
    pub fn new(state: NetworkState) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            state,
        }
    }

    pub fn into_state(self) -> Result<NetworkState> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion(self.version));
        }
        Ok(self.state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{cross_entropy_batch, finite_difference_check, scaled_supervised_contrastive, BatchRelations, ContrastiveConfig, AlphaMode};
    use ndarray::array;

    fn tiny_dims() -> NetworkDims {
        NetworkDims {
            d_v: 4,
            d_q: 4,
            d_h: 6,
            d_z: 3,
            num_labels: 3,
        }
    }

    fn random_inputs(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn lr_schedule_reference_values() {
        let s = LrSchedule::default();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b.abs();
        assert!(close(lr_at(0, &s), 2e-5));
        assert!(close(lr_at(4266, &s), 2e-4));
        assert!(close(lr_at(10_664, &s), 2e-4));
        assert!(close(lr_at(10_665, &s), 4e-5));
        assert!(close(lr_at(14_931, &s), 8e-6));
        let mut prev = f64::INFINITY;
        for it in 4266..30_000 {
            let lr = lr_at(it, &s);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn scaled_schedule_shrinks_milestones() {
        let s = LrSchedule::scaled_to(2500);
        assert_eq!(s.warmup_iters, 427);
        assert_eq!(s.decay_steps, vec![1067, 1493]);
        assert!(s.validate().is_ok());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut layer = Layer::from_params(array![[0.0]], array![0.0]);
        adam_update_layer(&mut layer, &array![[1.0]], &array![0.0], 0.1, 1);
        assert!((layer.weight[(0, 0)] + 0.1).abs() < 1e-8);
        assert_eq!(layer.bias[0], 0.0);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = NetworkState::new(tiny_dims(), 1);
        let before = s.flat_params();
        let pass = s.forward(random_inputs(5, 4, 2).view(), random_inputs(5, 4, 3).view()).unwrap();
        let zero = Array2::zeros(pass.logits.raw_dim());
        s.backward_and_step(&pass, None, Some(&zero), &LrSchedule::default(), &StepConfig::default())
            .unwrap();
        assert_eq!(before, s.flat_params());
    }

    #[test]
    fn clipping_caps_global_norm() {
        let g = Gradients {
            encoder: vec![(array![[0.6]], array![0.8])],
            projection: None,
            classifier: None,
        };
        assert!((g.l2_norm() - 1.0).abs() < 1e-15);
        let clipped = g.scaled(0.25 / g.l2_norm());
        assert!((clipped.l2_norm() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn zero_weights_use_safe_norm() {
        let s = NetworkState::zeroed(tiny_dims());
        let pass = s.forward(random_inputs(3, 4, 1).view(), random_inputs(3, 4, 2).view()).unwrap();
        let z = pass.z.as_ref().unwrap();
        for row in z.axis_iter(Axis(0)) {
            assert_eq!(row.to_vec(), vec![1.0, 0.0, 0.0]);
        }
        let dz = Array2::ones(z.raw_dim());
        let g = s.backward(&pass, Some(&dz), None).unwrap();
        assert!(g.flat(&s).iter().all(|x| x.is_finite()));
    }

    #[test]
    fn forward_is_deterministic_and_unit() {
        let dims = NetworkDims {
            d_z: 128,
            ..tiny_dims()
        };
        let s = NetworkState::new(dims, 7);
        let (v, q) = (random_inputs(4, 4, 1), random_inputs(4, 4, 2));
        let a = s.forward(v.view(), q.view()).unwrap();
        let b = s.forward(v.view(), q.view()).unwrap();
        let (za, zb) = (a.z.unwrap(), b.z.unwrap());
        assert_eq!(za, zb);
        assert_eq!(za.ncols(), 128);
        for row in za.axis_iter(Axis(0)) {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-9);
        }
        assert!(s.forward(random_inputs(4, 3, 1).view(), q.view()).is_err());
    }

    #[test]
    fn non_finite_gradient_is_named() {
        let mut s = NetworkState::new(tiny_dims(), 1);
        let pass = s.forward(random_inputs(2, 4, 1).view(), random_inputs(2, 4, 2).view()).unwrap();
        let mut dl = Array2::zeros(pass.logits.raw_dim());
        dl[(0, 0)] = f64::NAN;
        let err = s
            .backward_and_step(&pass, None, Some(&dl), &LrSchedule::default(), &StepConfig::default())
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient("encoder") | Error::NonFiniteGradient("classifier")));
    }

    #[test]
    fn ce_touches_no_projection_and_contrastive_no_classifier() {
        let mut s = NetworkState::new(tiny_dims(), 3);
        let (v, q) = (random_inputs(6, 4, 1), random_inputs(6, 4, 2));
        let labels = [0, 1, 2, 0, 1, 2];
        let proj_before = s.projection.clone();
        let pass = s.forward(v.view(), q.view()).unwrap();
        let (_, dl) = cross_entropy_batch(pass.logits.view(), &labels).unwrap();
        s.backward_and_step(&pass, None, Some(&dl), &LrSchedule::default(), &StepConfig::default())
            .unwrap();
        assert_eq!(s.projection, proj_before);

        let cls_before = s.classifier.clone();
        let pass = s.forward(v.view(), q.view()).unwrap();
        let rel = BatchRelations::from_labels(labels.to_vec());
        let out = scaled_supervised_contrastive(pass.z.as_ref().unwrap().view(), &rel, &ContrastiveConfig::default()).unwrap();
        s.backward_and_step(&pass, Some(&out.grads), None, &LrSchedule::default(), &StepConfig::default())
            .unwrap();
        assert_eq!(s.classifier, cls_before);
        assert_ne!(s.projection, proj_before);
    }

    fn end_to_end_error(mode: AlphaMode, with_ce: bool) -> crate::losses::gradcheck::GradCheck {
        let dims = tiny_dims();
        let base = NetworkState::new(dims, 11);
        let (v, q) = (random_inputs(6, 4, 5), random_inputs(6, 4, 6));
        let labels = vec![0, 1, 0, 2, 1, 0];
        let rel = BatchRelations::new(
            labels.clone(),
            ["a", "b", "a", "c", "d", "e"].iter().map(|s| s.to_string()).collect(),
        )
        .unwrap();
        let cfg = ContrastiveConfig {
            tau: 0.5,
            s: 3.0,
            alpha_mode: mode,
        };
        let params = base.flat_params();
        finite_difference_check(
            |p| {
                let mut s = base.clone();
                s.set_flat_params(p).unwrap();
                let pass = s.forward(v.view(), q.view()).unwrap();
                let out = scaled_supervised_contrastive(pass.z.as_ref().unwrap().view(), &rel, &cfg).unwrap();
                let (ce, dl) = cross_entropy_batch(pass.logits.view(), &labels).unwrap();
                let (loss, dl) = if with_ce { (out.loss + ce, Some(dl)) } else { (out.loss, None) };
                let g = s.backward(&pass, Some(&out.grads), dl.as_ref()).unwrap();
                (loss, g.flat(&s))
            },
            &params,
            1e-6,
        )
    }

    #[test]
    fn end_to_end_gradient_check() {
        for mode in [AlphaMode::Constant, AlphaMode::Dynamic] {
            for with_ce in [false, true] {
                let err = end_to_end_error(mode, with_ce);
                assert!(
                    err.normwise <= 1e-6 && err.coordinatewise <= 1e-4,
                    "{mode:?} ce={with_ce}: {err:?}"
                );
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut s = NetworkState::new(tiny_dims(), 5);
        let pass = s.forward(random_inputs(3, 4, 1).view(), random_inputs(3, 4, 2).view()).unwrap();
        let (_, dl) = cross_entropy_batch(pass.logits.view(), &[0, 1, 2]).unwrap();
        s.backward_and_step(&pass, None, Some(&dl), &LrSchedule::default(), &StepConfig::default())
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        s.save(&path).unwrap();
        let back = NetworkState::load(&path).unwrap();
        assert_eq!(back, s);
        let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
        assert_eq!(bits(back.flat_params()), bits(s.flat_params()));
    }
}
