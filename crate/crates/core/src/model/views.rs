//! User-level and timeslot-level aggregation of refined capsules.

use crate::nn::{gru, GatedAttention, Gru};
use crate::params::{Matrix, ParamBuilder, ParamId};
use crate::tape::{Graph, Var};

use super::config::ModelConfig;

pub struct ViewOutput {
    /// Room vector of the view, `1 x d_k`.
    pub room: Var,
    /// User view: `1 x U` weights. Timeslot view: `S x N^c`, each row a
    /// distribution over that slot's capsules.
    pub weights: Var,
}

/// Per-user GRU over slot-ordered capsules, then gated attention over users
/// with an extra learned logit `b^s` on the streamer.
#[derive(Clone, Debug)]
pub struct UserView {
    pub gru: Gru,
    pub attention: GatedAttention,
    pub streamer_bias: ParamId,
}

impl UserView {
    pub fn new(b: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Self {
        let mut b = b.scope("user_view");
        Self {
            gru: gru(&mut b, "gru", cfg.d_k, cfg.d_k, cfg.recurrent_layers),
            attention: GatedAttention::new(&mut b, "attn", cfg.d_k, cfg.d_k),
            streamer_bias: b.constant("streamer_bias", 1, 1, 0.0),
        }
    }

    /// `user_capsules[u]` lists user `u`'s capsule rows of `refined` in slot
    /// order; `streamer` is the `U x 1` streamer indicator.
    pub fn forward(
        &self,
        g: &Graph<'_>,
        refined: Var,
        user_capsules: &[Vec<usize>],
        streamer: Matrix,
    ) -> ViewOutput {
        let users = self.gru.final_states(g, refined, user_capsules);
        self.pool(g, users, streamer)
    }

    /// Attention pooling of `U x d` user embeddings.
    pub fn pool(&self, g: &Graph<'_>, users: Var, streamer: Matrix) -> ViewOutput {
        let logits = self.attention.logits(g, users);
        let bias = g.mul(g.constant(streamer), g.param(self.streamer_bias));
        let weights = g.softmax_rows(g.transpose(g.add(logits, bias)));
        ViewOutput {
            room: g.matmul(weights, users),
            weights,
        }
    }
}

/// Gated attention within each nonempty slot, then a GRU over the pooled
/// slot vectors in ascending slot order.
#[derive(Clone, Debug)]
pub struct TimeslotView {
    pub attention: GatedAttention,
    pub gru: Gru,
}

impl TimeslotView {
    pub fn new(b: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Self {
        let mut b = b.scope("slot_view");
        Self {
            attention: GatedAttention::new(&mut b, "attn", cfg.d_k, cfg.d_k),
            gru: gru(&mut b, "gru", cfg.d_k, cfg.d_k, cfg.recurrent_layers),
        }
    }

    /// `slot_mask` is `S x N^c` with 0 for members and -inf elsewhere.
    pub fn forward(&self, g: &Graph<'_>, refined: Var, slot_mask: Matrix) -> ViewOutput {
        let slots = slot_mask.nrows();
        let logits = g.transpose(self.attention.logits(g, refined));
        let weights = g.softmax_rows(g.add(g.constant(slot_mask), logits));
        let pooled = g.matmul(weights, refined);
        ViewOutput {
            room: self.gru.final_states(g, pooled, &[(0..slots).collect()]),
            weights,
        }
    }
}
