//! The three training schemes and the gradient-alignment diagnostic.
//!
//! CE batches and curated batches come from two independent RNG streams
//! derived from the plan seed, so a scheme that skips one kind of batch does
//! not shift the other.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curation::{curate, sample_ce_batch, NegativeWeights};
use crate::data::IndexedDataset;
use crate::error::{invalid, Error, Result};
use crate::evaluation::evaluate;
use crate::losses::{cross_entropy_batch, scaled_supervised_contrastive, ContrastiveConfig};
use crate::network::{Gradients, LrSchedule, NetworkState, StepConfig};

const CE_STREAM: u64 = 1;
const CURATION_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    Alternate,
    Joint,
    PretrainFinetune,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Alternate => "alternate",
            Scheme::Joint => "joint",
            Scheme::PretrainFinetune => "pretrain_finetune",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alternate" => Ok(Scheme::Alternate),
            "joint" => Ok(Scheme::Joint),
            "pretrain_finetune" => Ok(Scheme::PretrainFinetune),
            other => Err(invalid("scheme", format!("unknown scheme `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub scheme: Scheme,
    /// Iterations for alternate and joint training.
    pub total_iters: u64,
    /// Every `n_ce`-th alternate iteration is contrastive.
    pub n_ce: u64,
    pub beta: f64,
    pub n_p: u64,
    pub n_f: u64,
    pub n_r: usize,
    pub weights: NegativeWeights,
    /// Rows per CE batch; `None` means `6·n_r`, the curated batch size.
    pub ce_batch_size: Option<usize>,
    pub contrastive: ContrastiveConfig,
    pub schedule: LrSchedule,
    pub step: StepConfig,
    /// Evaluate every this many iterations; `None` means `max(1, N/20)`.
    pub eval_every: Option<u64>,
    pub k_max: usize,
    pub seed: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            scheme: Scheme::Alternate,
            total_iters: 25_000,
            n_ce: 4,
            beta: 0.5,
            n_p: 0,
            n_f: 0,
            n_r: 70,
            weights: NegativeWeights::default(),
            ce_batch_size: None,
            contrastive: ContrastiveConfig::default(),
            schedule: LrSchedule::default(),
            step: StepConfig::default(),
            eval_every: None,
            k_max: 4,
            seed: 0,
        }
    }
}

impl TrainPlan {
    pub fn iterations(&self) -> u64 {
        match self.scheme {
            Scheme::PretrainFinetune => self.n_p + self.n_f,
            _ => self.total_iters,
        }
    }

    pub fn ce_batch(&self) -> usize {
        self.ce_batch_size.unwrap_or(6 * self.n_r)
    }

    pub fn eval_interval(&self) -> u64 {
        self.eval_every.unwrap_or_else(|| (self.iterations() / 20).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        self.contrastive.validate()?;
        self.schedule.validate()?;
        if self.n_r == 0 {
            return Err(invalid("n_r", "must be at least 1"));
        }
        if self.ce_batch() == 0 {
            return Err(invalid("ce_batch_size", "must be at least 1"));
        }
        if self.k_max == 0 {
            return Err(invalid("k_max", "must be at least 1"));
        }
        if self.eval_every == Some(0) {
            return Err(invalid("eval_every", "must be at least 1"));
        }
        match self.scheme {
            Scheme::Alternate if self.n_ce < 2 => Err(invalid("n_ce", "must be at least 2 so CE iterations exist")),
            Scheme::Joint if !(0.0..=1.0).contains(&self.beta) => {
                Err(invalid("beta", format!("{} not in [0, 1]", self.beta)))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "CE")]
    Ce,
    #[serde(rename = "SSC")]
    Ssc,
    #[serde(rename = "JOINT")]
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case", deny_unknown_fields)]
pub enum LogRecord {
    Step {
        iteration: u64,
        loss_kind: LossKind,
        loss_value: f64,
        lr: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        grad_alignment: Option<f64>,
    },
    Eval {
        iteration: u64,
        accuracy: f64,
        cs: Vec<f64>,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
}

impl RunLog {
    pub fn steps(&self) -> impl Iterator<Item = (u64, LossKind, f64)> + '_ {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Step {
                iteration,
                loss_kind,
                loss_value,
                ..
            } => Some((*iteration, *loss_kind, *loss_value)),
            LogRecord::Eval { .. } => None,
        })
    }

    pub fn alignments(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Step { grad_alignment, .. } => *grad_alignment,
                LogRecord::Eval { .. } => None,
            })
            .collect()
    }

    pub fn last_eval(&self) -> Option<(u64, f64, &[f64])> {
        self.records.iter().rev().find_map(|r| match r {
            LogRecord::Eval { iteration, accuracy, cs } => Some((*iteration, *accuracy, cs.as_slice())),
            LogRecord::Step { .. } => None,
        })
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: std::io::BufRead>(input: R) -> Result<Self> {
        let mut records = Vec::new();
        for (n, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(&line).map_err(|e| Error::Format {
                line: n + 1,
                reason: e.to_string(),
            })?;
            records.push(rec);
        }
        Ok(Self { records })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// The trained state, projection head included.
    pub state: NetworkState,
    pub log: RunLog,
    /// Snapshot taken between the pretraining and finetuning phases.
    pub phase_boundary: Option<NetworkState>,
}

impl TrainOutput {
    /// The deployable model: encoder and classifier, projection head dropped.
    pub fn exported(&self) -> NetworkState {
        let mut s = self.state.clone();
        s.discard_projection();
        s
    }
}

/// Un-normalized dot product of two gradients over the same parameters.
pub fn grad_alignment(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            what: "gradient".into(),
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum())
}

/// Loss and gradients of mean cross-entropy on the rows `indices`.
pub fn ce_gradients(state: &NetworkState, idx: &IndexedDataset, indices: &[usize]) -> Result<(f64, Gradients)> {
    let (images, questions) = idx.batch_inputs(indices)?;
    let pass = state.forward(images.view(), questions.view())?;
    let labels: Vec<usize> = indices.iter().map(|&i| idx.samples()[i].answer_label).collect();
    let (loss, d_logits) = cross_entropy_batch(pass.logits.view(), &labels)?;
    let grads = state.backward(&pass, None, Some(&d_logits))?;
    Ok((loss, grads))
}

/// Loss and gradients of the scaled supervised contrastive loss on a curated batch.
pub fn ssc_gradients(
    state: &NetworkState,
    idx: &IndexedDataset,
    batch: &crate::curation::CuratedBatch,
    cfg: &ContrastiveConfig,
) -> Result<(f64, Gradients)> {
    let (images, questions) = idx.batch_inputs(&batch.samples)?;
    let pass = state.forward(images.view(), questions.view())?;
    let z = pass
        .z
        .as_ref()
        .ok_or_else(|| invalid("projection", "contrastive training needs the projection head"))?;
    let out = scaled_supervised_contrastive(z.view(), &batch.relations, cfg)?;
    let grads = state.backward(&pass, Some(&out.grads), None)?;
    Ok((out.loss, grads))
}

struct Runner<'a> {
    plan: &'a TrainPlan,
    train: &'a IndexedDataset,
    eval: Option<&'a IndexedDataset>,
    ce_rng: ChaCha8Rng,
    cur_rng: ChaCha8Rng,
    log: RunLog,
}

impl<'a> Runner<'a> {
    fn new(plan: &'a TrainPlan, train: &'a IndexedDataset, eval: Option<&'a IndexedDataset>) -> Result<Self> {
        plan.validate()?;
        let mut ce_rng = ChaCha8Rng::seed_from_u64(plan.seed);
        ce_rng.set_stream(CE_STREAM);
        let mut cur_rng = ChaCha8Rng::seed_from_u64(plan.seed);
        cur_rng.set_stream(CURATION_STREAM);
        Ok(Self {
            plan,
            train,
            eval,
            ce_rng,
            cur_rng,
            log: RunLog::default(),
        })
    }

    fn ce(&mut self, state: &NetworkState) -> Result<(f64, Gradients)> {
        let batch = sample_ce_batch(self.train, self.plan.ce_batch(), &mut self.ce_rng)?;
        ce_gradients(state, self.train, &batch)
    }

    fn ssc(&mut self, state: &NetworkState) -> Result<(f64, Gradients)> {
        let batch = curate(self.plan.n_r, self.train, &self.plan.weights, &mut self.cur_rng)?;
        ssc_gradients(state, self.train, &batch, &self.plan.contrastive)
    }

    fn step(
        &mut self,
        state: &mut NetworkState,
        iteration: u64,
        kind: LossKind,
        loss: f64,
        grads: &Gradients,
        alignment: Option<f64>,
    ) -> Result<()> {
        if !loss.is_finite() {
            return Err(invalid("loss", format!("non-finite {kind:?} loss at iteration {iteration}")));
        }
        let lr = state.apply_gradients(grads, &self.plan.schedule, &self.plan.step)?;
        self.log.records.push(LogRecord::Step {
            iteration,
            loss_kind: kind,
            loss_value: loss,
            lr,
            grad_alignment: alignment,
        });
        self.maybe_eval(state, iteration)
    }

    fn maybe_eval(&mut self, state: &NetworkState, iteration: u64) -> Result<()> {
        let Some(eval) = self.eval else { return Ok(()) };
        if iteration % self.plan.eval_interval() != 0 {
            return Ok(());
        }
        let report = evaluate(state, eval, self.plan.k_max)?;
        self.log.records.push(LogRecord::Eval {
            iteration,
            accuracy: report.accuracy,
            cs: report.consensus.iter().map(|c| c.value).collect(),
        });
        Ok(())
    }
}

/// Alternate training: iteration `i` is contrastive when `i % n_ce == 0`, CE otherwise.
pub fn train_alternate(
    plan: &TrainPlan,
    train: &IndexedDataset,
    eval: Option<&IndexedDataset>,
    mut state: NetworkState,
) -> Result<TrainOutput> {
    if plan.scheme != Scheme::Alternate {
        return Err(invalid("scheme", "train_alternate needs scheme = alternate"));
    }
    let mut run = Runner::new(plan, train, eval)?;
    for i in 1..=plan.total_iters {
        if i % plan.n_ce == 0 {
            let (loss, g) = run.ssc(&state)?;
            run.step(&mut state, i, LossKind::Ssc, loss, &g, None)?;
        } else {
            let (loss, g) = run.ce(&state)?;
            run.step(&mut state, i, LossKind::Ce, loss, &g, None)?;
        }
    }
    Ok(TrainOutput {
        state,
        log: run.log,
        phase_boundary: None,
    })
}

/// Joint training: one step per iteration on `β·∇SSC + (1−β)·∇CE`.
pub fn train_joint(
    plan: &TrainPlan,
    train: &IndexedDataset,
    eval: Option<&IndexedDataset>,
    mut state: NetworkState,
) -> Result<TrainOutput> {
    if plan.scheme != Scheme::Joint {
        return Err(invalid("scheme", "train_joint needs scheme = joint"));
    }
    let mut run = Runner::new(plan, train, eval)?;
    let beta = plan.beta;
    for i in 1..=plan.total_iters {
        let (l_ssc, g_ssc) = run.ssc(&state)?;
        let (l_ce, g_ce) = run.ce(&state)?;
        let alignment = grad_alignment(&g_ssc.encoder_flat(), &g_ce.encoder_flat())?;
        let combined = Gradients::combine(&g_ssc, beta, &g_ce, 1.0 - beta);
        let loss = beta * l_ssc + (1.0 - beta) * l_ce;
        run.step(&mut state, i, LossKind::Joint, loss, &combined, Some(alignment))?;
    }
    Ok(TrainOutput {
        state,
        log: run.log,
        phase_boundary: None,
    })
}

/// `n_p` contrastive iterations followed by `n_f` CE iterations.
pub fn train_pretrain_finetune(
    plan: &TrainPlan,
    train: &IndexedDataset,
    eval: Option<&IndexedDataset>,
    mut state: NetworkState,
) -> Result<TrainOutput> {
    if plan.scheme != Scheme::PretrainFinetune {
        return Err(invalid("scheme", "train_pretrain_finetune needs scheme = pretrain_finetune"));
    }
    let mut run = Runner::new(plan, train, eval)?;
    for i in 1..=plan.n_p {
        let (loss, g) = run.ssc(&state)?;
        run.step(&mut state, i, LossKind::Ssc, loss, &g, None)?;
    }
    let boundary = state.clone();
    for i in (plan.n_p + 1)..=(plan.n_p + plan.n_f) {
        let (loss, g) = run.ce(&state)?;
        run.step(&mut state, i, LossKind::Ce, loss, &g, None)?;
    }
    Ok(TrainOutput {
        state,
        log: run.log,
        phase_boundary: Some(boundary),
    })
}

/// Dispatches on `plan.scheme`.
pub fn train(
    plan: &TrainPlan,
    train_set: &IndexedDataset,
    eval: Option<&IndexedDataset>,
    state: NetworkState,
) -> Result<TrainOutput> {
    match plan.scheme {
        Scheme::Alternate => train_alternate(plan, train_set, eval, state),
        Scheme::Joint => train_joint(plan, train_set, eval, state),
        Scheme::PretrainFinetune => train_pretrain_finetune(plan, train_set, eval, state),
    }
}
