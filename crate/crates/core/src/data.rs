//! Samples, paraphrase groups and the positive/negative set queries over them.
//!
//! A dataset file is line-delimited JSON: one header object `{d_v, num_labels}`
//! followed by one [`Sample`] per line.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::similarity::{cosine_similarity, QuestionEmbedder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub sample_id: String,
    pub image_id: String,
    pub image_features: Vec<f64>,
    pub question_text: String,
    pub answer_label: usize,
    pub group_id: String,
    pub is_paraphrase: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub d_v: usize,
    pub num_labels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer(&mut out, &self.header)?;
        out.write_all(b"\n")?;
        for s in &self.samples {
            serde_json::to_writer(&mut out, s)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines().enumerate();
        let header: DatasetHeader = loop {
            match lines.next() {
                Some((n, line)) => {
                    let line = line?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    break serde_json::from_str(&line).map_err(|e| Error::Format {
                        line: n + 1,
                        reason: format!("header: {e}"),
                    })?;
                }
                None => {
                    return Err(Error::Format {
                        line: 1,
                        reason: "missing header".into(),
                    })
                }
            }
        };
        let mut samples = Vec::new();
        for (n, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let s: Sample = serde_json::from_str(&line).map_err(|e| Error::Format {
                line: n + 1,
                reason: e.to_string(),
            })?;
            samples.push(s);
        }
        Ok(Self { header, samples })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }

    /// Splits whole paraphrase groups into (train, held-out). Group order is
    /// shuffled with `seed`; sample order inside each split follows the input.
    pub fn split_by_group(&self, held_out_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&held_out_fraction) {
            return Err(invalid("held_out_fraction", format!("{held_out_fraction} not in [0, 1)")));
        }
        let mut groups: Vec<&str> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for s in &self.samples {
            if seen.insert(s.group_id.as_str()) {
                groups.push(s.group_id.as_str());
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        groups.shuffle(&mut rng);
        let n_held = (groups.len() as f64 * held_out_fraction).round() as usize;
        let held: std::collections::HashSet<&str> = groups[..n_held].iter().copied().collect();
        let (eval, train): (Vec<Sample>, Vec<Sample>) = self
            .samples
            .iter()
            .cloned()
            .partition(|s| held.contains(s.group_id.as_str()));
        Ok((
            Dataset {
                header: self.header,
                samples: train,
            },
            Dataset {
                header: self.header,
                samples: eval,
            },
        ))
    }
}

/// Kind of a negative relative to a reference sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeType {
    Img,
    Que,
    Rand,
}

impl NegativeType {
    pub const ALL: [NegativeType; 3] = [NegativeType::Img, NegativeType::Que, NegativeType::Rand];

    pub fn as_str(self) -> &'static str {
        match self {
            NegativeType::Img => "img",
            NegativeType::Que => "que",
            NegativeType::Rand => "rand",
        }
    }

    /// Position in [`NegativeType::ALL`] and in the weight vector.
    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for NegativeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NegativeType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "img" => Ok(NegativeType::Img),
            "que" => Ok(NegativeType::Que),
            "rand" => Ok(NegativeType::Rand),
            other => Err(invalid("negative type", format!("unknown `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Positives {
    /// Other members of the reference's paraphrase group.
    pub paraphrased: Vec<usize>,
    /// Same answer label, different group.
    pub intra_class: Vec<usize>,
}

/// The augmented dataset plus the index maps that answer positive and
/// negative set queries. Immutable once built.
#[derive(Debug, Clone)]
pub struct IndexedDataset {
    header: DatasetHeader,
    samples: Vec<Sample>,
    embeddings: Vec<Vec<f64>>,
    epsilon: f64,
    id_to_index: HashMap<String, usize>,
    by_label: BTreeMap<usize, Vec<usize>>,
    by_group: BTreeMap<String, Vec<usize>>,
    by_image: BTreeMap<String, Vec<usize>>,
    /// Question negatives per sample, ascending.
    question_negatives: Vec<Vec<usize>>,
    originals: Vec<usize>,
}

/// Validates the samples, embeds every question and materializes the index maps.
pub fn build_indices(
    dataset: Dataset,
    epsilon: f64,
    embedder: &dyn QuestionEmbedder,
) -> Result<IndexedDataset> {
    let Dataset { header, samples } = dataset;
    if samples.is_empty() {
        return Err(invalid("samples", "dataset is empty"));
    }
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(invalid("epsilon", format!("{epsilon} not in (0, 1]")));
    }

    let mut id_to_index = HashMap::with_capacity(samples.len());
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut by_group: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut by_image: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        if id_to_index.insert(s.sample_id.clone(), i).is_some() {
            return Err(Error::DuplicateSampleId(s.sample_id.clone()));
        }
        if s.image_features.len() != header.d_v {
            return Err(Error::DimensionMismatch {
                what: format!("image_features of `{}`", s.sample_id),
                expected: header.d_v,
                actual: s.image_features.len(),
            });
        }
        if s.answer_label >= header.num_labels {
            return Err(Error::LabelOutOfRange {
                label: s.answer_label,
                num_labels: header.num_labels,
            });
        }
        by_label.entry(s.answer_label).or_default().push(i);
        by_group.entry(s.group_id.clone()).or_default().push(i);
        by_image.entry(s.image_id.clone()).or_default().push(i);
    }

    let mut originals = Vec::new();
    for (gid, members) in &by_group {
        let origs: Vec<usize> = members
            .iter()
            .copied()
            .filter(|&i| !samples[i].is_paraphrase)
            .collect();
        if origs.len() != 1 {
            return Err(Error::MalformedGroup {
                group_id: gid.clone(),
                originals: origs.len(),
            });
        }
        let first = &samples[members[0]];
        for &m in members {
            if samples[m].image_id != first.image_id {
                return Err(Error::InconsistentGroup {
                    group_id: gid.clone(),
                    reason: "members refer to different images".into(),
                });
            }
            if samples[m].answer_label != first.answer_label {
                return Err(Error::InconsistentGroup {
                    group_id: gid.clone(),
                    reason: "members have different answers".into(),
                });
            }
        }
        originals.push(origs[0]);
    }
    originals.sort_unstable();

    let embeddings = samples
        .iter()
        .map(|s| {
            let e = embedder.embed(&s.question_text)?;
            if e.len() != embedder.dim() {
                return Err(Error::DimensionMismatch {
                    what: format!("question embedding of `{}`", s.sample_id),
                    expected: embedder.dim(),
                    actual: e.len(),
                });
            }
            Ok(e)
        })
        .collect::<Result<Vec<_>>>()?;

    let n = samples.len();
    let mut question_negatives = vec![Vec::new(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (&samples[i], &samples[j]);
            if a.answer_label == b.answer_label || a.image_id == b.image_id {
                continue;
            }
            if cosine_similarity(&embeddings[i], &embeddings[j])? > epsilon {
                question_negatives[i].push(j);
                question_negatives[j].push(i);
            }
        }
    }
    question_negatives.iter_mut().for_each(|v| v.sort_unstable());

    Ok(IndexedDataset {
        header,
        samples,
        embeddings,
        epsilon,
        id_to_index,
        by_label,
        by_group,
        by_image,
        question_negatives,
        originals,
    })
}

impl IndexedDataset {
    pub fn header(&self) -> DatasetHeader {
        self.header
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> Result<&Sample> {
        self.samples
            .get(i)
            .ok_or_else(|| Error::UnknownSample(format!("#{i}")))
    }

    pub fn question_embedding(&self, i: usize) -> Result<&[f64]> {
        self.sample(i)?;
        Ok(&self.embeddings[i])
    }

    /// Image features and question embeddings of `indices`, one row per sample.
    pub fn batch_inputs(&self, indices: &[usize]) -> Result<(Array2<f64>, Array2<f64>)> {
        let d_q = self.question_dim();
        let mut images = Array2::zeros((indices.len(), self.header.d_v));
        let mut questions = Array2::zeros((indices.len(), d_q));
        for (row, &i) in indices.iter().enumerate() {
            let s = self.sample(i)?;
            for (dst, src) in images.row_mut(row).iter_mut().zip(&s.image_features) {
                *dst = *src;
            }
            for (dst, src) in questions.row_mut(row).iter_mut().zip(&self.embeddings[i]) {
                *dst = *src;
            }
        }
        Ok((images, questions))
    }

    pub fn question_dim(&self) -> usize {
        self.embeddings.first().map_or(0, Vec::len)
    }

    pub fn index_of(&self, sample_id: &str) -> Result<usize> {
        self.id_to_index
            .get(sample_id)
            .copied()
            .ok_or_else(|| Error::UnknownSample(sample_id.to_string()))
    }

    pub fn by_label(&self) -> &BTreeMap<usize, Vec<usize>> {
        &self.by_label
    }

    pub fn by_group(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.by_group
    }

    pub fn by_image(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.by_image
    }

    /// Indices of the original (non-paraphrase) question of every group, ascending.
    pub fn originals(&self) -> &[usize] {
        &self.originals
    }

    pub fn group_members(&self, i: usize) -> Result<&[usize]> {
        let s = self.sample(i)?;
        Ok(&self.by_group[&s.group_id])
    }

    /// Ω: the negative type of `xbar` relative to the reference `x`.
    /// Same image wins over similar question.
    pub fn classify_negative(&self, x: usize, xbar: usize) -> Result<NegativeType> {
        let (a, b) = (self.sample(x)?, self.sample(xbar)?);
        if a.answer_label == b.answer_label {
            return Err(Error::NotANegative(a.sample_id.clone(), b.sample_id.clone()));
        }
        if a.image_id == b.image_id {
            return Ok(NegativeType::Img);
        }
        if cosine_similarity(&self.embeddings[x], &self.embeddings[xbar])? > self.epsilon {
            return Ok(NegativeType::Que);
        }
        Ok(NegativeType::Rand)
    }

    pub fn positives(&self, x: usize) -> Result<Positives> {
        let s = self.sample(x)?;
        let paraphrased: Vec<usize> = self.by_group[&s.group_id]
            .iter()
            .copied()
            .filter(|&j| j != x)
            .collect();
        let intra_class = self.by_label[&s.answer_label]
            .iter()
            .copied()
            .filter(|&j| self.samples[j].group_id != s.group_id)
            .collect();
        Ok(Positives {
            paraphrased,
            intra_class,
        })
    }

    /// Number of intra-class positives of `x` without materializing them.
    pub(crate) fn intra_class_count(&self, x: usize) -> usize {
        let s = &self.samples[x];
        self.by_label[&s.answer_label].len() - self.by_group[&s.group_id].len()
    }

    /// X⁻_t(x), ascending.
    pub fn negatives(&self, x: usize, t: NegativeType) -> Result<Vec<usize>> {
        let s = self.sample(x)?;
        Ok(match t {
            NegativeType::Img => self.by_image[&s.image_id]
                .iter()
                .copied()
                .filter(|&j| self.samples[j].answer_label != s.answer_label)
                .collect(),
            NegativeType::Que => self.question_negatives[x].clone(),
            NegativeType::Rand => {
                let que = &self.question_negatives[x];
                (0..self.samples.len())
                    .filter(|&j| {
                        let o = &self.samples[j];
                        o.answer_label != s.answer_label
                            && o.image_id != s.image_id
                            && que.binary_search(&j).is_err()
                    })
                    .collect()
            }
        })
    }

    /// All differently-answered samples, ascending.
    pub fn all_negatives(&self, x: usize) -> Result<Vec<usize>> {
        let s = self.sample(x)?;
        Ok((0..self.samples.len())
            .filter(|&j| self.samples[j].answer_label != s.answer_label)
            .collect())
    }

    pub fn to_dataset(&self) -> Dataset {
        Dataset {
            header: self.header,
            samples: self.samples.clone(),
        }
    }
}
