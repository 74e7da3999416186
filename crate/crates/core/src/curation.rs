//! Batch construction: curated contrastive batches and uniform CE batches.
//!
//! A curated batch is built in two phases. Phase one draws `n_r` triplets
//! (reference, intra-class positive, negative of a sampled type). Phase two
//! adds one paraphrase of every phase-one member, so the batch holds
//! `6·n_r` samples and element `3·n_r + j` shares a group with element `j`.

use std::io::Write;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{IndexedDataset, NegativeType};
use crate::error::{Error, Result};
use crate::losses::BatchRelations;

/// Draw attempts before a pool is declared starved.
pub const MAX_DRAW_ATTEMPTS: usize = 100;

/// Categorical weights over negative types, ordered (img, que, rand).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct NegativeWeights([f64; 3]);

impl NegativeWeights {
    pub fn new(img: f64, que: f64, rand: f64) -> Result<Self> {
        let w = [img, que, rand];
        let sum: f64 = w.iter().sum();
        if w.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidWeights(w));
        }
        Ok(Self(w))
    }

    pub fn get(&self, t: NegativeType) -> f64 {
        self.0[t.index()]
    }

    pub fn as_array(&self) -> [f64; 3] {
        self.0
    }
}

impl Default for NegativeWeights {
    fn default() -> Self {
        Self([0.25, 0.25, 0.5])
    }
}

impl TryFrom<[f64; 3]> for NegativeWeights {
    type Error = Error;

    fn try_from(w: [f64; 3]) -> Result<Self> {
        Self::new(w[0], w[1], w[2])
    }
}

impl From<NegativeWeights> for [f64; 3] {
    fn from(w: NegativeWeights) -> Self {
        w.0
    }
}

fn sample_categorical<R: Rng + ?Sized>(weights: &[f64; 3], rng: &mut R) -> NegativeType {
    let u: f64 = rng.random::<f64>() * weights.iter().sum::<f64>();
    let mut acc = 0.0;
    let mut last_positive = NegativeType::Rand;
    for t in NegativeType::ALL {
        let w = weights[t.index()];
        if w <= 0.0 {
            continue;
        }
        last_positive = t;
        acc += w;
        if u < acc {
            return t;
        }
    }
    last_positive
}

/// Draws a negative type from `Cat(T | w)`.
pub fn sample_negative_type<R: Rng + ?Sized>(w: &NegativeWeights, rng: &mut R) -> NegativeType {
    sample_categorical(&w.0, rng)
}

/// Outcome of drawing a negative type when some pools may be empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TypeDraw {
    /// The type drawn from the unmodified weights.
    pub sampled: NegativeType,
    /// The type actually used.
    pub used: NegativeType,
}

impl TypeDraw {
    pub fn fell_back(&self) -> bool {
        self.sampled != self.used
    }
}

/// Samples a type; if its pool is empty, resamples from the weights
/// renormalized over the non-empty pools (uniformly if those weights are all
/// zero). `None` when every pool is empty.
pub fn sample_type_with_fallback<R: Rng + ?Sized>(
    w: &NegativeWeights,
    available: [bool; 3],
    rng: &mut R,
) -> Option<TypeDraw> {
    let sampled = sample_negative_type(w, rng);
    if available[sampled.index()] {
        return Some(TypeDraw { sampled, used: sampled });
    }
    if !available.iter().any(|&a| a) {
        return None;
    }
    let mut rest = [0.0; 3];
    for t in NegativeType::ALL {
        if available[t.index()] {
            rest[t.index()] = w.get(t);
        }
    }
    if rest.iter().sum::<f64>() <= 0.0 {
        for t in NegativeType::ALL {
            rest[t.index()] = if available[t.index()] { 1.0 } else { 0.0 };
        }
    }
    Some(TypeDraw {
        sampled,
        used: sample_categorical(&rest, rng),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Reference,
    IntraClassPositive,
    Negative,
    ParaphrasedPositive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CuratedBatch {
    /// Dataset indices, `6·n_r` long.
    pub samples: Vec<usize>,
    pub roles: Vec<Role>,
    /// Per triplet: the type drawn and the type used.
    pub negative_types: Vec<TypeDraw>,
    pub relations: BatchRelations,
}

impl CuratedBatch {
    pub fn n_r(&self) -> usize {
        self.negative_types.len()
    }

    pub fn fallbacks(&self) -> usize {
        self.negative_types.iter().filter(|d| d.fell_back()).count()
    }

    pub fn role_counts(&self) -> [usize; 4] {
        let mut c = [0; 4];
        for r in &self.roles {
            c[*r as usize] += 1;
        }
        c
    }

    /// One JSON record per batch position: `{position, sample_id, role, negative_type?}`.
    pub fn write_jsonl<W: Write>(&self, idx: &IndexedDataset, mut out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Rec<'a> {
            position: usize,
            sample_id: &'a str,
            role: Role,
            #[serde(skip_serializing_if = "Option::is_none")]
            negative_type: Option<NegativeType>,
        }
        for (pos, (&i, &role)) in self.samples.iter().zip(&self.roles).enumerate() {
            let negative_type = (role == Role::Negative).then(|| self.negative_types[pos / 3].used);
            let rec = Rec {
                position: pos,
                sample_id: &idx.sample(i)?.sample_id,
                role,
                negative_type,
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn has_paraphrase(idx: &IndexedDataset, i: usize) -> bool {
    idx.group_members(i).map(|m| m.len() > 1).unwrap_or(false)
}

/// Uniform draw from `pool`, redrawn while the pick has no paraphrase.
fn draw_with_paraphrase<R: Rng + ?Sized>(
    idx: &IndexedDataset,
    pool: &[usize],
    rng: &mut R,
    what: impl FnOnce() -> String,
) -> Result<usize> {
    if pool.is_empty() {
        return Err(Error::StarvedPool(format!("{} is empty", what())));
    }
    for _ in 0..MAX_DRAW_ATTEMPTS {
        let pick = *pool.choose(rng).expect("non-empty");
        if has_paraphrase(idx, pick) {
            return Ok(pick);
        }
    }
    Err(Error::StarvedPool(format!(
        "{}: no sample with a paraphrase after {MAX_DRAW_ATTEMPTS} draws",
        what()
    )))
}

/// Builds one curated batch of `6·n_r` samples.
pub fn curate<R: Rng + ?Sized>(
    n_r: usize,
    idx: &IndexedDataset,
    w: &NegativeWeights,
    rng: &mut R,
) -> Result<CuratedBatch> {
    if n_r == 0 {
        return Err(crate::error::invalid("n_r", "need at least one reference"));
    }
    let originals = idx.originals();
    let mut used_refs = std::collections::HashSet::with_capacity(n_r);
    let mut triplets: Vec<usize> = Vec::with_capacity(3 * n_r);
    let mut roles = Vec::with_capacity(6 * n_r);
    let mut negative_types = Vec::with_capacity(n_r);

    for _ in 0..n_r {
        let mut reference = None;
        for _ in 0..MAX_DRAW_ATTEMPTS {
            let cand = *originals.choose(rng).expect("dataset has at least one group");
            let label = idx.samples()[cand].answer_label;
            let has_negative = idx.by_label()[&label].len() < idx.len();
            if !used_refs.contains(&cand)
                && has_paraphrase(idx, cand)
                && idx.intra_class_count(cand) > 0
                && has_negative
            {
                reference = Some(cand);
                break;
            }
        }
        let x = reference.ok_or_else(|| {
            Error::StarvedPool(format!(
                "references: no unused original with a paraphrase, an intra-class positive and a negative after {MAX_DRAW_ATTEMPTS} draws"
            ))
        })?;
        used_refs.insert(x);

        let intra = idx.positives(x)?.intra_class;
        let x_hat = draw_with_paraphrase(idx, &intra, rng, || {
            format!("intra-class positives of `{}`", idx.samples()[x].sample_id)
        })?;

        let pools = [
            idx.negatives(x, NegativeType::Img)?,
            idx.negatives(x, NegativeType::Que)?,
            idx.negatives(x, NegativeType::Rand)?,
        ];
        let available = [!pools[0].is_empty(), !pools[1].is_empty(), !pools[2].is_empty()];
        let draw = sample_type_with_fallback(w, available, rng).ok_or_else(|| {
            Error::StarvedPool(format!("negatives of `{}`: all pools empty", idx.samples()[x].sample_id))
        })?;
        let x_bar = draw_with_paraphrase(idx, &pools[draw.used.index()], rng, || {
            format!("{} negatives of `{}`", draw.used, idx.samples()[x].sample_id)
        })?;

        triplets.extend([x, x_hat, x_bar]);
        roles.extend([Role::Reference, Role::IntraClassPositive, Role::Negative]);
        negative_types.push(draw);
    }

    let mut samples = triplets.clone();
    for &member in &triplets {
        let others: Vec<usize> = idx
            .group_members(member)?
            .iter()
            .copied()
            .filter(|&j| j != member)
            .collect();
        let para = *others.choose(rng).ok_or_else(|| {
            Error::StarvedPool(format!("paraphrases of `{}`", idx.samples()[member].sample_id))
        })?;
        samples.push(para);
        roles.push(Role::ParaphrasedPositive);
    }

    let relations = BatchRelations::new(
        samples.iter().map(|&i| idx.samples()[i].answer_label).collect(),
        samples.iter().map(|&i| idx.samples()[i].group_id.clone()).collect(),
    )?;
    Ok(CuratedBatch {
        samples,
        roles,
        negative_types,
        relations,
    })
}

/// `size` indices drawn uniformly without replacement from the whole dataset.
pub fn sample_ce_batch<R: Rng + ?Sized>(idx: &IndexedDataset, size: usize, rng: &mut R) -> Result<Vec<usize>> {
    if size > idx.len() {
        return Err(crate::error::invalid(
            "size",
            format!("batch of {size} exceeds dataset of {}", idx.len()),
        ));
    }
    Ok(rand::seq::index::sample(rng, idx.len(), size).into_vec())
}
