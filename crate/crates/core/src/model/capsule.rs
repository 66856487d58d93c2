//! Action embedding, the CLS-prefixed action encoder and the capsule LSTM.

use crate::nn::{lstm, Linear, Lstm, TransformerLayer};
use crate::params::{Matrix, ParamBuilder, ParamId};
use crate::tape::{Graph, Var};

use super::config::ModelConfig;
use super::prepared::PreparedRoom;

/// `e_i = [emb(a_i) ; Proj(x_i)]`, with a learned vector standing in for
/// `Proj(x_i)` when the action has no text.
#[derive(Clone, Debug)]
pub struct ActionEmbedding {
    pub table: ParamId,
    pub text_proj: Linear,
    pub no_text: ParamId,
}

impl ActionEmbedding {
    pub fn new(b: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Self {
        let mut b = b.scope("embed");
        Self {
            table: b.normal("action", cfg.vocab_size, cfg.d_embed, 1.0),
            text_proj: Linear::new(&mut b, "text_proj", cfg.d_text, cfg.d_k, true),
            no_text: b.normal("no_text", 1, cfg.d_k, 0.02),
        }
    }

    /// `N^a x d_model` action vectors.
    pub fn forward(
        &self,
        g: &Graph<'_>,
        action_ids: &[usize],
        text: Option<&Matrix>,
        text_index: &[usize],
    ) -> Var {
        let ids = g.gather_rows(g.param(self.table), action_ids);
        let no_text = g.param(self.no_text);
        let pool = match text {
            Some(x) => g.concat_rows(&[no_text, self.text_proj.forward(g, g.constant(x.clone()))]),
            None => no_text,
        };
        let text = g.gather_rows(pool, text_index);
        g.concat_cols(&[ids, text])
    }

    pub fn forward_room(&self, g: &Graph<'_>, room: &PreparedRoom) -> Var {
        self.forward(g, &room.action_ids, room.text.as_ref(), &room.text_index)
    }
}

/// Transformer encoder over `[CLS, e_1..e_N]` with learned absolute
/// positions (index 0 belongs to CLS).
#[derive(Clone, Debug)]
pub struct ActionFieldEncoder {
    pub cls: ParamId,
    pub positions: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub dropout: f64,
}

pub struct EncodedActions {
    /// Action-level room vector, `1 x d_model`.
    pub room: Var,
    /// Contextualized actions, `N^a x d_model`.
    pub actions: Var,
}

impl ActionFieldEncoder {
    pub fn new(b: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model();
        let mut b = b.scope("encoder");
        Self {
            cls: b.normal("cls", 1, d, 0.02),
            positions: b.normal("positions", cfg.max_actions + 1, d, 0.02),
            layers: (0..cfg.encoder_layers)
                .map(|l| {
                    TransformerLayer::new(
                        &mut b,
                        &format!("layer{l}"),
                        d,
                        cfg.num_heads,
                        cfg.ff_mult * d,
                    )
                })
                .collect(),
            dropout: cfg.dropout,
        }
    }

    pub fn forward(&self, g: &Graph<'_>, e: Var) -> EncodedActions {
        let n = g.shape(e).0;
        let tokens = g.concat_rows(&[g.param(self.cls), e]);
        let positions = g.slice_rows(g.param(self.positions), 0, n + 1);
        let mut x = g.dropout(g.add(tokens, positions), self.dropout);
        for layer in &self.layers {
            x = layer.forward(g, x, None, self.dropout).output;
        }
        EncodedActions {
            room: g.row(x, 0),
            actions: g.slice_rows(x, 1, n),
        }
    }
}

/// Shared LSTM compressing each capsule's contextualized actions to its
/// final hidden state.
#[derive(Clone, Debug)]
pub struct CapsuleConstructor {
    pub lstm: Lstm,
}

impl CapsuleConstructor {
    pub fn new(b: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Self {
        Self {
            lstm: lstm(b, "capsule", cfg.d_model(), cfg.d_k, cfg.recurrent_layers),
        }
    }

    /// `N^c x d_k` capsule vectors in capsule-index order.
    pub fn forward(&self, g: &Graph<'_>, actions: Var, capsules: &[Vec<usize>]) -> Var {
        self.lstm.final_states(g, actions, capsules)
    }
}

/// Embedding, encoder and capsule LSTM, shared by AC-MIL and the baselines.
#[derive(Clone, Debug)]
pub struct CapsuleFrontEnd {
    pub embedding: ActionEmbedding,
    pub encoder: ActionFieldEncoder,
    pub capsules: CapsuleConstructor,
}

pub struct FrontEndOutput {
    pub embedded: Var,
    pub encoded: EncodedActions,
    /// `N^c x d_k`.
    pub capsules: Var,
}

impl CapsuleFrontEnd {
    pub fn new(b: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Self {
        Self {
            embedding: ActionEmbedding::new(b, cfg),
            encoder: ActionFieldEncoder::new(b, cfg),
            capsules: CapsuleConstructor::new(b, cfg),
        }
    }

    pub fn forward(&self, g: &Graph<'_>, room: &PreparedRoom) -> FrontEndOutput {
        let embedded = self.embedding.forward_room(g, room);
        let encoded = self.encoder.forward(g, embedded);
        let capsules = self
            .capsules
            .forward(g, encoded.actions, &room.capsule_actions);
        FrontEndOutput {
            embedded,
            encoded,
            capsules,
        }
    }
}
