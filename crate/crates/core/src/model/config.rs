use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::room::Vocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossReduction {
    Sum,
    Mean,
}

/// Architecture and optimization hyperparameters.
///
/// `d_embed` is the width of the action-id embedding; tokens entering the
/// action encoder are `d_model = d_embed + d_k` wide.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_embed: usize,
    pub d_k: usize,
    pub num_heads: usize,
    pub encoder_layers: usize,
    pub graph_layers: usize,
    pub recurrent_layers: usize,
    /// Feed-forward width as a multiple of the layer width.
    pub ff_mult: usize,
    pub dropout: f64,
    pub gamma_cls: f64,
    pub d_text: usize,
    pub vocab_size: usize,
    /// Longest action sequence the position table covers.
    pub max_actions: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub loss_reduction: LossReduction,
    /// Seeds initialization, shuffling and dropout.
    pub seed: u64,
    /// Worker threads for per-room gradients. Results do not depend on it.
    pub threads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_embed: 128,
            d_k: 128,
            num_heads: 8,
            encoder_layers: 2,
            graph_layers: 1,
            recurrent_layers: 2,
            ff_mult: 4,
            dropout: 0.1,
            gamma_cls: 1.0,
            d_text: 16,
            vocab_size: Vocabulary::standard().len(),
            max_actions: 2096,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            batch_size: 128,
            max_epochs: 100,
            patience: 20,
            loss_reduction: LossReduction::Sum,
            seed: 0,
            threads: 1,
        }
    }
}

pub const GAMMA_CLS_CHOICES: [f64; 3] = [1.0, 1.5, 2.0];

impl ModelConfig {
    /// A small configuration that trains in minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            d_embed: 16,
            d_k: 32,
            num_heads: 4,
            ff_mult: 2,
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 10,
            patience: 4,
            ..Self::default()
        }
    }

    pub fn d_model(&self) -> usize {
        self.d_embed + self.d_k
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("d_embed", self.d_embed),
            ("d_k", self.d_k),
            ("num_heads", self.num_heads),
            ("graph_layers", self.graph_layers),
            ("recurrent_layers", self.recurrent_layers),
            ("ff_mult", self.ff_mult),
            ("d_text", self.d_text),
            ("max_actions", self.max_actions),
            ("batch_size", self.batch_size),
            ("threads", self.threads),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.d_k < 2 {
            return fail("d_k must be at least 2".into());
        }
        if !self.d_model().is_multiple_of(self.num_heads)
            || !self.d_k.is_multiple_of(self.num_heads)
        {
            return fail(format!(
                "num_heads {} must divide both d_model {} and d_k {}",
                self.num_heads,
                self.d_model(),
                self.d_k
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must be in [0, 1)".into());
        }
        if !GAMMA_CLS_CHOICES.contains(&self.gamma_cls) {
            return fail(format!(
                "gamma_cls must be one of {GAMMA_CLS_CHOICES:?}, got {}",
                self.gamma_cls
            ));
        }
        if self.vocab_size != Vocabulary::standard().len() {
            return fail(format!(
                "vocab_size {} does not match the standard vocabulary ({})",
                self.vocab_size,
                Vocabulary::standard().len()
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) || self.weight_decay < 0.0
        {
            return fail("learning_rate and weight_decay must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    AcMil,
    MeanPool,
    AtMil,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::AcMil => "acmil",
            ModelKind::MeanPool => "meanpool",
            ModelKind::AtMil => "atmil",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "acmil" => Ok(ModelKind::AcMil),
            "meanpool" => Ok(ModelKind::MeanPool),
            "atmil" => Ok(ModelKind::AtMil),
            other => Err(Error::Config(format!("unknown model `{other}`"))),
        }
    }
}
