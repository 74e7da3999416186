//! Answer scoring and the consensus score CS(k).
//!
//! For a paraphrase group of `n` questions of which `c` receive a non-zero
//! score, CS(k) is the fraction of size-`k` subsets in which every question
//! is answered with a non-zero score, i.e. `C(c, k) / C(n, k)`.

use std::collections::BTreeMap;
use std::io::Write;

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::data::IndexedDataset;
use crate::error::{invalid, Result};
use crate::network::NetworkState;

/// Scores a predicted answer against the ground truth.
pub trait AnswerScorer {
    fn score(&self, predicted: usize, truth: usize) -> f64;
}

/// 1 for an exact match, 0 otherwise.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactMatch;

impl AnswerScorer for ExactMatch {
    fn score(&self, predicted: usize, truth: usize) -> f64 {
        if predicted == truth {
            1.0
        } else {
            0.0
        }
    }
}

/// Soft accuracy against several human reference answers: `min(matches / 3, 1)`.
#[derive(Debug, Clone, Default)]
pub struct SoftAccuracy {
    pub references: Vec<usize>,
}

impl SoftAccuracy {
    pub fn score_against(&self, predicted: usize) -> f64 {
        let matches = self.references.iter().filter(|&&r| r == predicted).count();
        (matches as f64 / 3.0).min(1.0)
    }
}

impl AnswerScorer for SoftAccuracy {
    /// The ground-truth argument is ignored; the reference answers decide.
    fn score(&self, predicted: usize, _truth: usize) -> f64 {
        self.score_against(predicted)
    }
}

pub fn vqa_score(predicted: usize, truth: usize) -> f64 {
    ExactMatch.score(predicted, truth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionEntry {
    pub sample_id: String,
    pub predicted_label: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionGroup {
    pub group_id: String,
    pub entries: Vec<PredictionEntry>,
}

impl PredictionGroup {
    fn correct(&self) -> usize {
        self.entries.iter().filter(|e| e.score > 0.0).count()
    }
}

/// Exact binomial coefficient.
pub fn binomial(n: u64, k: u64) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // Stays integral: acc * (n - i) is divisible by (i + 1) at every step.
        acc = acc * u128::from(n - i) / u128::from(i + 1);
    }
    acc
}

/// CS(k) of one group with `n` members of which `c` are correct.
pub fn group_consensus(n: usize, c: usize, k: usize) -> f64 {
    binomial(c as u64, k as u64) as f64 / binomial(n as u64, k as u64) as f64
}

/// Consensus at a single `k`: the mean over groups with at least `k`
/// members, and how many groups were skipped for being smaller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsensusAtK {
    pub k: usize,
    pub value: f64,
    pub eligible_groups: usize,
    pub skipped_groups: usize,
}

pub fn consensus_score(groups: &[PredictionGroup], k: usize) -> Result<ConsensusAtK> {
    if k < 1 {
        return Err(invalid("k", "must be at least 1"));
    }
    let mut total = 0.0;
    let mut eligible = 0;
    for g in groups {
        let n = g.entries.len();
        if n < k {
            continue;
        }
        total += group_consensus(n, g.correct(), k);
        eligible += 1;
    }
    Ok(ConsensusAtK {
        k,
        value: if eligible == 0 { 0.0 } else { total / eligible as f64 },
        eligible_groups: eligible,
        skipped_groups: groups.len() - eligible,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusReport {
    pub accuracy: f64,
    pub num_samples: usize,
    pub num_groups: usize,
    pub consensus: Vec<ConsensusAtK>,
    /// Group size → number of groups of that size.
    pub group_sizes: BTreeMap<usize, usize>,
}

impl ConsensusReport {
    pub fn from_groups(groups: &[PredictionGroup], k_max: usize) -> Result<Self> {
        let num_samples: usize = groups.iter().map(|g| g.entries.len()).sum();
        let correct: usize = groups.iter().map(PredictionGroup::correct).sum();
        let mut group_sizes = BTreeMap::new();
        for g in groups {
            *group_sizes.entry(g.entries.len()).or_insert(0) += 1;
        }
        let consensus = (1..=k_max)
            .map(|k| consensus_score(groups, k))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            accuracy: if num_samples == 0 { 0.0 } else { correct as f64 / num_samples as f64 },
            num_samples,
            num_groups: groups.len(),
            consensus,
            group_sizes,
        })
    }

    pub fn cs(&self, k: usize) -> Option<f64> {
        self.consensus.iter().find(|c| c.k == k).map(|c| c.value)
    }

    /// `key = value` lines.
    pub fn to_key_value(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("accuracy = {}\n", self.accuracy));
        out.push_str(&format!("num_samples = {}\n", self.num_samples));
        out.push_str(&format!("num_groups = {}\n", self.num_groups));
        for c in &self.consensus {
            out.push_str(&format!("cs_{} = {}\n", c.k, c.value));
            out.push_str(&format!("cs_{}_skipped_groups = {}\n", c.k, c.skipped_groups));
        }
        for (size, count) in &self.group_sizes {
            out.push_str(&format!("groups_of_size_{size} = {count}\n"));
        }
        out
    }
}

/// Runs the classifier over every sample and groups predictions by paraphrase group.
pub fn predict_groups(state: &NetworkState, dataset: &IndexedDataset) -> Result<Vec<PredictionGroup>> {
    let samples = dataset.samples();
    let all: Vec<usize> = (0..samples.len()).collect();
    let (images, questions) = dataset.batch_inputs(&all)?;
    let pass = state.forward(images.view(), questions.view())?;
    let predictions: Vec<usize> = pass
        .logits
        .axis_iter(Axis(0))
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect();
    Ok(dataset
        .by_group()
        .iter()
        .map(|(gid, members)| PredictionGroup {
            group_id: gid.clone(),
            entries: members
                .iter()
                .map(|&i| PredictionEntry {
                    sample_id: samples[i].sample_id.clone(),
                    predicted_label: predictions[i],
                    score: vqa_score(predictions[i], samples[i].answer_label),
                })
                .collect(),
        })
        .collect())
}

pub fn evaluate(state: &NetworkState, dataset: &IndexedDataset, k_max: usize) -> Result<ConsensusReport> {
    let groups = predict_groups(state, dataset)?;
    ConsensusReport::from_groups(&groups, k_max)
}

/// Line-delimited `{group_id, sample_id, predicted_label, score}` records.
pub fn write_predictions<W: Write>(groups: &[PredictionGroup], mut out: W) -> Result<()> {
    #[derive(Serialize)]
    struct Rec<'a> {
        group_id: &'a str,
        sample_id: &'a str,
        predicted_label: usize,
        score: f64,
    }
    for g in groups {
        for e in &g.entries {
            serde_json::to_writer(
                &mut out,
                &Rec {
                    group_id: &g.group_id,
                    sample_id: &e.sample_id,
                    predicted_label: e.predicted_label,
                    score: e.score,
                },
            )?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}
