//! Loss functions with exact analytic gradients.
//!
//! Every loss returns its value together with the partial derivatives with
//! respect to its inputs; [`gradcheck`] compares those against central
//! finite differences.

mod contrastive;
mod cross_entropy;
pub mod gradcheck;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub use contrastive::{
    alpha, info_nce, scaled_supervised_contrastive, supervised_contrastive, weighted_supervised_contrastive,
    ContrastiveOutput,
};
pub use cross_entropy::{cross_entropy, cross_entropy_batch};
pub use gradcheck::finite_difference_check;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaMode {
    #[default]
    Constant,
    Dynamic,
}

impl std::str::FromStr for AlphaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(AlphaMode::Constant),
            "dynamic" => Ok(AlphaMode::Dynamic),
            other => Err(invalid("alpha_mode", format!("unknown `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    /// Temperature dividing every similarity inside the exponentials.
    pub tau: f64,
    /// Weight given to paraphrase pairs relative to other same-label pairs.
    pub s: f64,
    pub alpha_mode: AlphaMode,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            tau: 0.3,
            s: 20.0,
            alpha_mode: AlphaMode::Constant,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(invalid("tau", format!("temperature must be positive, got {}", self.tau)));
        }
        if !(self.s >= 1.0 && self.s.is_finite()) {
            return Err(invalid("s", format!("scaling factor must be >= 1, got {}", self.s)));
        }
        Ok(())
    }
}

/// In-batch positive and paraphrase structure.
///
/// `positive[(i, p)]` holds when samples `i != p` share an answer label;
/// `paraphrase[(i, p)]` when they share a paraphrase group. Paraphrase pairs
/// are always positive pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchRelations {
    pub labels: Vec<usize>,
    pub group_ids: Vec<String>,
    pub positive: Array2<bool>,
    pub paraphrase: Array2<bool>,
}

impl BatchRelations {
    pub fn new(labels: Vec<usize>, group_ids: Vec<String>) -> Result<Self> {
        let n = labels.len();
        if group_ids.len() != n {
            return Err(Error::DimensionMismatch {
                what: "group ids".into(),
                expected: n,
                actual: group_ids.len(),
            });
        }
        let positive = Array2::from_shape_fn((n, n), |(i, p)| i != p && labels[i] == labels[p]);
        let paraphrase = Array2::from_shape_fn((n, n), |(i, p)| {
            i != p && group_ids[i] == group_ids[p] && labels[i] == labels[p]
        });
        Ok(Self {
            labels,
            group_ids,
            positive,
            paraphrase,
        })
    }

    /// Relations from labels alone, each sample in its own group.
    pub fn from_labels(labels: Vec<usize>) -> Self {
        let groups = (0..labels.len()).map(|i| i.to_string()).collect();
        Self::new(labels, groups).expect("lengths match")
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn positives_of(&self, i: usize) -> Vec<usize> {
        self.positive
            .row(i)
            .iter()
            .enumerate()
            .filter_map(|(p, &b)| b.then_some(p))
            .collect()
    }
}
