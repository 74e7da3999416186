//! Deterministic generator of paraphrase-structured classification data.
//!
//! Every image belongs to a scene with a latent feature prototype. Every
//! question instantiates a template, a fixed combination of concept words.
//! The answer is a balanced lookup table over (scene, template), so neither
//! modality alone determines it. Paraphrases swap concept words for
//! synonyms and shuffle neighbouring tokens.

use std::collections::HashSet;
use std::sync::OnceLock;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetHeader, Sample};
use crate::error::{invalid, Result};
use crate::similarity::{fnv1a, DEFAULT_QUESTION_DIM};

/// Concept slots per question template.
pub const CONCEPTS_PER_TEMPLATE: usize = 3;
pub const NUM_CONCEPTS: usize = 8;
pub const SYNONYMS_PER_CONCEPT: usize = 3;

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "nu", "pe", "ra", "si", "to", "vu", "we", "xo", "ya", "zi", "bo", "de", "fu",
];
const FILLERS: [&str; 4] = ["what", "is", "the", "here"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_labels: usize,
    pub num_images: usize,
    pub groups_per_image: usize,
    pub paraphrases_per_group: usize,
    pub d_v: usize,
    /// Standard deviation of the per-coordinate image feature noise.
    pub sigma_v: f64,
    /// Per-token synonym substitution and adjacent-swap rate for paraphrases.
    pub rho: f64,
    pub num_scenes: usize,
    pub num_templates: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_labels: 16,
            num_images: 128,
            groups_per_image: 4,
            paraphrases_per_group: 3,
            d_v: 32,
            sigma_v: 0.15,
            rho: 0.5,
            num_scenes: 16,
            num_templates: 8,
            seed: 0,
        }
    }
}

fn max_templates() -> usize {
    // C(NUM_CONCEPTS, CONCEPTS_PER_TEMPLATE)
    (0..CONCEPTS_PER_TEMPLATE).fold(1, |acc, i| acc * (NUM_CONCEPTS - i) / (i + 1))
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_labels", self.num_labels),
            ("num_images", self.num_images),
            ("groups_per_image", self.groups_per_image),
            ("paraphrases_per_group", self.paraphrases_per_group),
            ("d_v", self.d_v),
            ("num_scenes", self.num_scenes),
            ("num_templates", self.num_templates),
        ];
        for (name, v) in counts {
            if v < 1 {
                return Err(invalid(name, "must be at least 1"));
            }
        }
        if !(self.sigma_v >= 0.0 && self.sigma_v.is_finite()) {
            return Err(invalid("sigma_v", format!("{} must be finite and non-negative", self.sigma_v)));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(invalid("rho", format!("{} not in [0, 1]", self.rho)));
        }
        if self.num_templates > max_templates() {
            return Err(invalid(
                "num_templates",
                format!("at most {} distinct templates exist", max_templates()),
            ));
        }
        if self.groups_per_image > self.num_templates {
            return Err(invalid("groups_per_image", "cannot exceed num_templates"));
        }
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        self.num_images * self.groups_per_image * (1 + self.paraphrases_per_group)
    }
}

/// The fixed synonym table: `word(c, k)` is synonym `k` of concept `c`.
pub fn word(concept: usize, synonym: usize) -> String {
    vocabulary()[concept][synonym].clone()
}

/// Built once. Each word takes the first syllable pair whose bucket under
/// the default token-hash embedder is still free, so no two vocabulary
/// words (fillers included) collide there and every template stays
/// distinguishable through the default question embedding.
fn vocabulary() -> &'static [[String; SYNONYMS_PER_CONCEPT]; NUM_CONCEPTS] {
    static TABLE: OnceLock<[[String; SYNONYMS_PER_CONCEPT]; NUM_CONCEPTS]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let dim = DEFAULT_QUESTION_DIM as u64;
        let bucket = |w: &str| fnv1a(w.as_bytes()) % dim;
        let mut taken: HashSet<u64> = FILLERS.iter().map(|f| bucket(f)).collect();
        std::array::from_fn(|c| {
            std::array::from_fn(|k| {
                let n = SYLLABLES.len();
                (0..n * n)
                    .map(|j| {
                        let start = c * 5 + k * 3 + j;
                        let a = SYLLABLES[start % n];
                        let b = SYLLABLES[(start / n + c * 7 + k * 11 + 1) % n];
                        format!("{a}{b}{c}{}", synonym_suffix(k))
                    })
                    .find(|w| taken.insert(bucket(w)))
                    .expect("more syllable pairs than buckets")
            })
        })
    })
}

fn synonym_suffix(k: usize) -> char {
    (b'a' + k as u8) as char
}

fn all_templates() -> Vec<[usize; CONCEPTS_PER_TEMPLATE]> {
    let mut out = Vec::new();
    for a in 0..NUM_CONCEPTS {
        for b in (a + 1)..NUM_CONCEPTS {
            for c in (b + 1)..NUM_CONCEPTS {
                out.push([a, b, c]);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Token {
    Filler(usize),
    Concept(usize, usize),
}

impl Token {
    fn text(self) -> String {
        match self {
            Token::Filler(f) => FILLERS[f].to_string(),
            Token::Concept(c, k) => word(c, k),
        }
    }
}

fn render(tokens: &[Token]) -> String {
    tokens.iter().map(|t| t.text()).collect::<Vec<_>>().join(" ")
}

fn original_tokens(concepts: &[usize; CONCEPTS_PER_TEMPLATE]) -> Vec<Token> {
    let mut t = vec![Token::Filler(0), Token::Filler(1), Token::Filler(2)];
    t.extend(concepts.iter().map(|&c| Token::Concept(c, 0)));
    t.push(Token::Filler(3));
    t
}

fn paraphrase<R: Rng + ?Sized>(original: &[Token], rho: f64, rng: &mut R) -> Vec<Token> {
    let mut out = original.to_vec();
    let slots: Vec<usize> = (0..out.len()).filter(|&i| matches!(out[i], Token::Concept(..))).collect();
    let mut substituted = false;
    for &i in &slots {
        if rng.random::<f64>() < rho {
            substitute(&mut out[i], rng);
            substituted = true;
        }
    }
    if !substituted && rho > 0.0 {
        let &i = slots.choose(rng).expect("templates have concept slots");
        substitute(&mut out[i], rng);
    }
    for i in 1..out.len() {
        if rng.random::<f64>() < rho / 2.0 {
            out.swap(i - 1, i);
        }
    }
    out
}

fn substitute<R: Rng + ?Sized>(token: &mut Token, rng: &mut R) {
    if let Token::Concept(c, k) = *token {
        let shift = rng.random_range(1..SYNONYMS_PER_CONCEPT);
        *token = Token::Concept(c, (k + shift) % SYNONYMS_PER_CONCEPT);
    }
}

/// Generates the dataset described by `spec`. Samples are ordered image by
/// image, and within a group the original comes first.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let prototypes: Vec<Vec<f64>> = (0..spec.num_scenes)
        .map(|_| (0..spec.d_v).map(|_| unit.sample(&mut rng)).collect())
        .collect();

    let mut templates = all_templates();
    templates.shuffle(&mut rng);
    templates.truncate(spec.num_templates);

    // Balanced answer table over (scene, template).
    let cells = spec.num_scenes * spec.num_templates;
    let mut answers: Vec<usize> = (0..cells).map(|i| i % spec.num_labels).collect();
    answers.shuffle(&mut rng);

    let noise = Normal::new(0.0, spec.sigma_v).expect("validated sigma");
    let mut samples = Vec::with_capacity(spec.num_samples());
    for image in 0..spec.num_images {
        let scene = image % spec.num_scenes;
        let image_id = format!("img{image:04}");
        let features: Vec<f64> = prototypes[scene].iter().map(|&p| p + noise.sample(&mut rng)).collect();
        let chosen = rand::seq::index::sample(&mut rng, spec.num_templates, spec.groups_per_image);
        for (g, t) in chosen.iter().enumerate() {
            let group_id = format!("{image_id}_g{g}");
            let answer = answers[scene * spec.num_templates + t];
            let original = original_tokens(&templates[t]);
            let mut texts = vec![render(&original)];
            for _ in 0..spec.paraphrases_per_group {
                texts.push(render(&paraphrase(&original, spec.rho, &mut rng)));
            }
            for (p, text) in texts.into_iter().enumerate() {
                samples.push(Sample {
                    sample_id: format!("{group_id}_q{p}"),
                    image_id: image_id.clone(),
                    image_features: features.clone(),
                    question_text: text,
                    answer_label: answer,
                    group_id: group_id.clone(),
                    is_paraphrase: p > 0,
                });
            }
        }
    }
    Ok(Dataset {
        header: DatasetHeader {
            d_v: spec.d_v,
            num_labels: spec.num_labels,
        },
        samples,
    })
}
