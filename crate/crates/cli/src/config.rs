//! The run configuration: one flat TOML table, every key optional.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use parcon_core::losses::{AlphaMode, ContrastiveConfig};
use parcon_core::network::{LrSchedule, NetworkDims, StepConfig};
use parcon_core::similarity::FilterPolicy;
use parcon_core::training::{Scheme, TrainPlan};
use parcon_core::{NegativeWeights, SynthSpec};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Dataset file; when absent the synthetic task below is generated.
    pub dataset: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,

    // synthetic task
    pub num_labels: usize,
    pub num_images: usize,
    pub groups_per_image: usize,
    pub paraphrases_per_group: usize,
    pub d_v: usize,
    pub sigma_v: f64,
    pub rho: f64,
    pub num_scenes: usize,
    pub num_templates: usize,
    /// Fraction of paraphrase groups held out for evaluation.
    pub held_out_fraction: f64,

    // similarity and filtering
    pub d_q: usize,
    pub epsilon: f64,
    pub theta: f64,
    pub max_keep: usize,

    // model
    pub d_h: usize,
    pub d_z: usize,

    // training
    pub scheme: Scheme,
    pub total_iters: u64,
    pub n_ce: u64,
    pub beta: f64,
    pub n_p: u64,
    pub n_f: u64,
    pub n_r: usize,
    pub ce_batch_size: Option<usize>,
    pub w_img: f64,
    pub w_que: f64,
    pub w_rand: f64,
    pub tau: f64,
    pub s: f64,
    pub alpha_mode: AlphaMode,

    // optimizer
    pub base_lr: f64,
    pub warmup_factor: f64,
    pub warmup_iters: u64,
    pub decay_factor: f64,
    pub decay_steps: Vec<u64>,
    /// Shrink warmup and decay milestones by `iterations / 25000`.
    pub scale_schedule: bool,
    /// Zero disables clipping.
    pub clip_norm: f64,

    // evaluation
    pub eval_every: Option<u64>,
    pub k_max: usize,

    // gradient check
    pub gradcheck_instances: usize,
    pub gradcheck_step: f64,
    pub gradcheck_tolerance: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthSpec::default();
        let schedule = LrSchedule::default();
        let contrastive = ContrastiveConfig::default();
        let filter = FilterPolicy::default();
        let [w_img, w_que, w_rand] = NegativeWeights::default().as_array();
        Self {
            dataset: None,
            out: PathBuf::from("out"),
            seed: 0,
            num_labels: synth.num_labels,
            num_images: synth.num_images,
            groups_per_image: synth.groups_per_image,
            paraphrases_per_group: synth.paraphrases_per_group,
            d_v: synth.d_v,
            sigma_v: synth.sigma_v,
            rho: synth.rho,
            num_scenes: synth.num_scenes,
            num_templates: synth.num_templates,
            held_out_fraction: 0.25,
            d_q: parcon_core::similarity::DEFAULT_QUESTION_DIM,
            epsilon: 0.95,
            theta: filter.threshold,
            max_keep: filter.max_keep,
            d_h: 64,
            d_z: 128,
            scheme: Scheme::Alternate,
            total_iters: 1000,
            n_ce: 4,
            beta: 0.5,
            n_p: 500,
            n_f: 500,
            n_r: 70,
            ce_batch_size: None,
            w_img,
            w_que,
            w_rand,
            tau: contrastive.tau,
            s: contrastive.s,
            alpha_mode: contrastive.alpha_mode,
            base_lr: schedule.base_lr,
            warmup_factor: schedule.warmup_factor,
            warmup_iters: schedule.warmup_iters,
            decay_factor: schedule.decay_factor,
            decay_steps: schedule.decay_steps,
            scale_schedule: true,
            clip_norm: StepConfig::default().clip_norm.unwrap_or(0.0),
            eval_every: None,
            k_max: 4,
            gradcheck_instances: 100,
            gradcheck_step: parcon_core::losses::gradcheck::DEFAULT_STEP,
            gradcheck_tolerance: 1e-5,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let msg = e.message().trim();
            let Some(span) = e.span() else {
                return anyhow::anyhow!("malformed config: {msg}");
            };
            let line_no = text[..span.start].matches('\n').count() + 1;
            let line = text.lines().nth(line_no - 1).unwrap_or("");
            match line.split_once('=') {
                Some((key, _)) => anyhow::anyhow!("malformed config: line {line_no}, key `{}`: {msg}", key.trim()),
                None => anyhow::anyhow!("malformed config: line {line_no}: {msg}"),
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            num_labels: self.num_labels,
            num_images: self.num_images,
            groups_per_image: self.groups_per_image,
            paraphrases_per_group: self.paraphrases_per_group,
            d_v: self.d_v,
            sigma_v: self.sigma_v,
            rho: self.rho,
            num_scenes: self.num_scenes,
            num_templates: self.num_templates,
            seed: self.seed,
        }
    }

    pub fn filter_policy(&self) -> FilterPolicy {
        FilterPolicy {
            threshold: self.theta,
            max_keep: self.max_keep,
            rng_seed: self.seed,
        }
    }

    pub fn dims(&self, d_v: usize, num_labels: usize) -> NetworkDims {
        NetworkDims {
            d_v,
            d_q: self.d_q,
            d_h: self.d_h,
            d_z: self.d_z,
            num_labels,
        }
    }

    pub fn plan(&self) -> Result<TrainPlan> {
        if !(self.clip_norm >= 0.0) {
            bail!("invalid `clip_norm`: {} must be non-negative", self.clip_norm);
        }
        let mut plan = TrainPlan {
            scheme: self.scheme,
            total_iters: self.total_iters,
            n_ce: self.n_ce,
            beta: self.beta,
            n_p: self.n_p,
            n_f: self.n_f,
            n_r: self.n_r,
            weights: NegativeWeights::new(self.w_img, self.w_que, self.w_rand)?,
            ce_batch_size: self.ce_batch_size,
            contrastive: ContrastiveConfig {
                tau: self.tau,
                s: self.s,
                alpha_mode: self.alpha_mode,
            },
            schedule: LrSchedule {
                base_lr: self.base_lr,
                warmup_factor: self.warmup_factor,
                warmup_iters: self.warmup_iters,
                decay_factor: self.decay_factor,
                decay_steps: self.decay_steps.clone(),
            },
            step: StepConfig {
                clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            },
            eval_every: self.eval_every,
            k_max: self.k_max,
            seed: self.seed,
        };
        if self.scale_schedule {
            plan.schedule = plan.schedule.rescaled(plan.iterations());
        }
        plan.validate()?;
        Ok(plan)
    }
}
