//! Feature-based motion probe: a small MLP pretrained on binned motion
//! scores, then reused as a frozen trunk for 3-class QC transfer.

mod checkpoint;
pub mod features;
pub mod mlp;
mod table;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Descriptor, CHECKPOINT_FORMAT};
pub use features::{extract_features, extract_features_using, FeatureVector, FEATURE_NAMES, FEATURE_VERSION, N_FEATURES};
pub use mlp::{AdamW, Layer, LayerSpec, Mlp, Mode};
pub use table::{
    class_targets, features_from_labels, read_feature_csv, select_split, write_feature_csv, FeatureRow,
};
pub use train::{
    compare_transfer_vs_scratch, fit, predict_classes, predict_scores, pretrain, scratch_train, transfer_train, write_comparison_csv,
    write_history_csv, ClassifierOutcome, ComparisonReport, ComparisonRow, FitResult, HistoryRow,
    PretrainOutcome, N_QC_CLASSES,
};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::labels::BinSpec;
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    /// Soft-label KL over motion-score bins.
    #[serde(rename = "kl-regression")]
    KlRegression,
    /// Cross-entropy over the merged QC classes.
    #[serde(rename = "cross-entropy-3class")]
    CrossEntropy3Class,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
    pub scheduler_factor: f64,
    pub scheduler_patience: usize,
    pub early_stop_patience: usize,
    /// Minimum absolute validation-loss decrease that counts as improvement.
    pub min_delta: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub objective: Objective,
    /// Drop probability of the dropout layer(s) in the trained part.
    pub dropout: f64,
}

impl TrainConfig {
    /// Pretraining on motion scores.
    pub fn pretrain() -> Self {
        Self {
            lr: 2e-5,
            weight_decay: 0.05,
            scheduler_factor: 0.6,
            scheduler_patience: 5,
            early_stop_patience: 15,
            min_delta: 1e-6,
            batch_size: 96,
            max_epochs: 500,
            seed: 0,
            objective: Objective::KlRegression,
            dropout: 0.0,
        }
    }

    /// Classification head on a frozen trunk.
    pub fn transfer() -> Self {
        Self {
            lr: 5e-4,
            weight_decay: 0.05,
            batch_size: 12,
            max_epochs: 50,
            early_stop_patience: 50,
            objective: Objective::CrossEntropy3Class,
            dropout: 0.7,
            ..Self::pretrain()
        }
    }

    /// Whole network trained on the classification task alone.
    pub fn scratch() -> Self {
        Self {
            lr: 3e-6,
            weight_decay: 0.06,
            batch_size: 12,
            max_epochs: 500,
            early_stop_patience: 100,
            objective: Objective::CrossEntropy3Class,
            dropout: 0.68,
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = |x: f64| x >= 0.0 && x.is_finite();
        if !nonneg(self.lr) || !nonneg(self.weight_decay) || !nonneg(self.min_delta) {
            return Err(Error::arg("lr, weight_decay and min_delta must be finite and nonnegative"));
        }
        if !(self.scheduler_factor > 0.0 && self.scheduler_factor <= 1.0) {
            return Err(Error::arg("scheduler_factor must be in (0, 1]"));
        }
        if self.scheduler_patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::arg("patience values must be >= 1"));
        }
        if self.batch_size < 2 || self.max_epochs == 0 {
            return Err(Error::arg("batch_size must be >= 2 and max_epochs >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::arg("dropout must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Layer widths of the trunk and the classification head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub trunk_hidden: Vec<usize>,
    pub head_hidden: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            trunk_hidden: vec![64, 32],
            head_hidden: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Head {
    Bins { bins: BinSpec },
    Classes { n_classes: usize },
}

impl Head {
    pub fn width(&self) -> usize {
        match self {
            Head::Bins { bins } => bins.n_bins,
            Head::Classes { n_classes } => *n_classes,
        }
    }
}

/// A network plus what is needed to interpret it.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    pub mlp: Mlp,
    /// Layers `[0, trunk_len)` form the embedding trunk.
    pub trunk_len: usize,
    pub head: Head,
    pub feature_version: u32,
}

impl ProbeModel {
    /// SHA-256 over every trunk tensor, running statistics included.
    pub fn trunk_hash(&self) -> String {
        let digest = Sha256::digest(self.mlp.tensor_bytes(self.trunk_len));
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn embedding_width(&self) -> usize {
        let mut w = self.mlp.input_width().unwrap_or(0);
        for l in &self.mlp.layers[..self.trunk_len] {
            if let Layer::Dense { w: m, .. } = l {
                w = m.nrows();
            }
        }
        w
    }
}

/// Column means and standard deviations; zero spread maps to 1.
pub fn feature_stats(x: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>) {
    let n = x.nrows() as f64;
    let mean = DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n));
    let std = DVector::from_iterator(
        x.ncols(),
        x.column_iter().zip(mean.iter()).map(|(c, m)| {
            let s = (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        }),
    );
    (mean, std)
}

/// Standardize, then `Dense → BatchNorm → ReLU → Dropout` per hidden width.
pub fn build_trunk(x_train: &DMatrix<f64>, hidden: &[usize], dropout: f64, rng: &mut ChaCha8Rng) -> Vec<Layer> {
    let (mean, std) = feature_stats(x_train);
    let mut layers = vec![Layer::Standardize { mean, std }];
    let mut width = x_train.ncols();
    for &h in hidden {
        layers.push(Layer::dense(width, h, rng));
        layers.push(Layer::batch_norm(h));
        layers.push(Layer::Relu);
        if dropout > 0.0 {
            layers.push(Layer::Dropout { p: dropout });
        }
        width = h;
    }
    layers
}

/// Two linear layers; batch norm, ReLU and dropout after the first.
pub fn build_head(inputs: usize, hidden: usize, outputs: usize, dropout: f64, rng: &mut ChaCha8Rng) -> Vec<Layer> {
    let mut layers = vec![Layer::dense(inputs, hidden, rng), Layer::batch_norm(hidden), Layer::Relu];
    if dropout > 0.0 {
        layers.push(Layer::Dropout { p: dropout });
    }
    layers.push(Layer::dense(hidden, outputs, rng));
    layers
}

pub(crate) fn init_rng(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, 0))
}

/// Stack feature rows into a matrix.
pub fn to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if n == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(Error::arg("feature rows must be nonempty and of equal width"));
    }
    Ok(DMatrix::from_fn(n, w, |i, j| rows[i][j]))
}
