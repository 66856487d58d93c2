//! AC-MIL and the two pooling baselines.
//!
//! All three share the capsule front end (action embedding, action encoder,
//! capsule LSTM). AC-MIL then runs the relational reasoner, the user and
//! timeslot views and the gated decoder; the baselines pool capsules
//! directly.

mod capsule;
mod config;
mod decoder;
mod prepared;
mod reasoner;
mod views;

pub use capsule::{
    ActionEmbedding, ActionFieldEncoder, CapsuleConstructor, CapsuleFrontEnd, EncodedActions,
    FrontEndOutput,
};
pub use config::{LossReduction, ModelConfig, ModelKind, GAMMA_CLS_CHOICES};
pub use decoder::{bce_sum, logit, Fused, RiskDecoder, VIEWS};
pub use prepared::{prepare_corpus, PreparedRoom};
pub use reasoner::{
    adjacency_logits, build_adjacency, cls_attribution, similarity, ReasonerOutput, RelationMasks,
    RelationStructure, RelationalReasoner, RELATIONS,
};
pub use views::{TimeslotView, UserView, ViewOutput};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{GatedAttention, ScalarMlp};
use crate::params::{Gradients, ParamBuilder, ParamStore};
use crate::tape::{sigmoid_scalar, Graph, Var};

#[derive(Clone, Debug)]
pub struct AcMilHead {
    pub reasoner: RelationalReasoner,
    pub user_view: UserView,
    pub slot_view: TimeslotView,
    pub decoder: RiskDecoder,
}

#[derive(Clone, Debug)]
pub struct MeanPoolHead {
    pub classifier: ScalarMlp,
}

#[derive(Clone, Debug)]
pub struct AtMilHead {
    pub attention: GatedAttention,
    pub classifier: ScalarMlp,
}

// One head per model, so the size gap between variants does not matter.
#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug)]
pub enum Head {
    AcMil(AcMilHead),
    MeanPool(MeanPoolHead),
    AtMil(AtMilHead),
}

/// Graph nodes of the AC-MIL head for one room.
pub struct AcMilTrace {
    pub reasoner: ReasonerOutput,
    pub user: ViewOutput,
    pub slot: ViewOutput,
    /// Room vectors in [`VIEWS`] order, each `1 x d_k`.
    pub views: [Var; 4],
    pub fused: Fused,
}

pub struct ForwardTrace {
    pub front: FrontEndOutput,
    pub logit: Var,
    pub acmil: Option<AcMilTrace>,
    /// AtMIL only: `1 x N^c` attention weights over capsules.
    pub pool_weights: Option<Var>,
}

/// Decoded outputs of the AC-MIL head.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub gates: [f64; 4],
    /// `h_a, h_c, h_u, h_t`, each of width `d_k`.
    pub representations: [Vec<f64>; 4],
    pub fused: Vec<f64>,
    pub user_weights: Vec<f64>,
    /// Per capsule: its attention weight within its slot.
    pub slot_weights: Vec<f64>,
}

/// Everything an evaluation-mode forward pass produces for one room.
#[derive(Clone, Debug, PartialEq)]
pub struct RiskOutput {
    pub room_id: String,
    pub score: f64,
    pub logit: f64,
    /// Per-capsule attribution in capsule-index order; sums to 1. AC-MIL
    /// uses CLS attention, AtMIL its pooling weights, mean-pool is uniform.
    pub attribution: Vec<f64>,
    pub decoded: Option<Decoded>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub params: ParamStore,
    pub front: CapsuleFrontEnd,
    pub head: Head,
}

impl Model {
    /// Builds a freshly initialized model seeded by `config.seed`.
    pub fn new(kind: ModelKind, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut b = ParamBuilder::new(&mut params, &mut rng);
        let front = CapsuleFrontEnd::new(&mut b, &config);
        let d = config.d_k;
        let head = match kind {
            ModelKind::AcMil => Head::AcMil(AcMilHead {
                reasoner: RelationalReasoner::new(
                    &mut b,
                    d,
                    config.num_heads,
                    config.ff_mult * d,
                    config.graph_layers,
                    config.gamma_cls,
                    config.dropout,
                ),
                user_view: UserView::new(&mut b, &config),
                slot_view: TimeslotView::new(&mut b, &config),
                decoder: RiskDecoder::new(&mut b, &config),
            }),
            ModelKind::MeanPool => {
                let mut b = b.scope("meanpool");
                Head::MeanPool(MeanPoolHead {
                    classifier: ScalarMlp::new(&mut b, "classifier", d, d / 2),
                })
            }
            ModelKind::AtMil => {
                let mut b = b.scope("atmil");
                Head::AtMil(AtMilHead {
                    attention: GatedAttention::new(&mut b, "attn", d, d),
                    classifier: ScalarMlp::new(&mut b, "classifier", d, d / 2),
                })
            }
        };
        Ok(Self {
            kind,
            config,
            params,
            front,
            head,
        })
    }

    pub fn acmil(&self) -> Option<&AcMilHead> {
        match &self.head {
            Head::AcMil(h) => Some(h),
            _ => None,
        }
    }

    /// Checks that a room fits this model's vocabulary, text width and
    /// position table.
    pub fn check_room(&self, room: &PreparedRoom) -> Result<()> {
        let err = |message: String| {
            Err(Error::Room {
                room_id: room.room_id.clone(),
                message,
            })
        };
        if room.num_actions() > self.config.max_actions {
            return err(format!(
                "{} actions exceed the model's max_actions {}",
                room.num_actions(),
                self.config.max_actions
            ));
        }
        if let Some(&a) = room
            .action_ids
            .iter()
            .find(|&&a| a >= self.config.vocab_size)
        {
            return err(format!("action_type_id {a} outside the model vocabulary"));
        }
        if let Some(x) = &room.text {
            if x.ncols() != self.config.d_text {
                return err(format!(
                    "feature dimension mismatch: {} text dims, model expects {}",
                    x.ncols(),
                    self.config.d_text
                ));
            }
        }
        Ok(())
    }

    /// Builds the forward graph of one room.
    pub fn trace(&self, g: &Graph<'_>, room: &PreparedRoom) -> ForwardTrace {
        let front = self.front.forward(g, room);
        let capsules = front.capsules;
        match &self.head {
            Head::AcMil(h) => {
                let reasoner = h.reasoner.forward(g, capsules, &room.masks);
                let user = h.user_view.forward(
                    g,
                    reasoner.refined,
                    &room.user_capsules,
                    room.streamer_indicator(),
                );
                let slot = h.slot_view.forward(g, reasoner.refined, room.slot_mask());
                let h_a = h.decoder.action_proj.forward(g, front.encoded.room);
                let views = [h_a, reasoner.room, user.room, slot.room];
                let fused = h.decoder.fuse(g, views);
                let logit = h.decoder.classify(g, fused.room);
                ForwardTrace {
                    front,
                    logit,
                    acmil: Some(AcMilTrace {
                        reasoner,
                        user,
                        slot,
                        views,
                        fused,
                    }),
                    pool_weights: None,
                }
            }
            Head::MeanPool(h) => ForwardTrace {
                logit: h.classifier.forward(g, g.mean_rows(capsules)),
                front,
                acmil: None,
                pool_weights: None,
            },
            Head::AtMil(h) => {
                let weights = g.softmax_rows(g.transpose(h.attention.logits(g, capsules)));
                ForwardTrace {
                    logit: h.classifier.forward(g, g.matmul(weights, capsules)),
                    front,
                    acmil: None,
                    pool_weights: Some(weights),
                }
            }
        }
    }

    /// Evaluation-mode forward pass.
    pub fn predict(&self, room: &PreparedRoom) -> RiskOutput {
        let g = Graph::new(&self.params);
        let trace = self.trace(&g, room);
        let logit = g.scalar(trace.logit);
        let n = room.num_capsules();
        let row = |v: Var| g.value(v).iter().copied().collect::<Vec<f64>>();
        let (attribution, decoded) = match &trace.acmil {
            Some(t) => {
                let slot_w = g.value(t.slot.weights);
                let mut slot_weights = vec![0.0; n];
                for (r, (_, members)) in room.slot_capsules.iter().enumerate() {
                    for &c in members {
                        slot_weights[c] = slot_w[[r, c]];
                    }
                }
                let decoded = Decoded {
                    gates: t.fused.gates.map(|v| g.scalar(v)),
                    representations: t.views.map(row),
                    fused: row(t.fused.room),
                    user_weights: row(t.user.weights),
                    slot_weights,
                };
                (t.reasoner.attribution.clone(), Some(decoded))
            }
            None => match trace.pool_weights {
                Some(w) => (row(w), None),
                None => (vec![1.0 / n as f64; n], None),
            },
        };
        RiskOutput {
            room_id: room.room_id.clone(),
            score: sigmoid_scalar(logit),
            logit,
            attribution,
            decoded,
        }
    }

    pub fn score(&self, room: &PreparedRoom) -> f64 {
        let g = Graph::new(&self.params);
        sigmoid_scalar(g.scalar(self.trace(&g, room).logit))
    }

    /// Per-room BCE loss. With `dropout_rng` the graph runs in training mode.
    pub fn loss_graph<'p>(
        &'p self,
        room: &PreparedRoom,
        dropout_rng: Option<ChaCha8Rng>,
    ) -> (Graph<'p>, Var) {
        let g = match dropout_rng {
            Some(rng) => Graph::training(&self.params, rng),
            None => Graph::new(&self.params),
        };
        let logit = self.trace(&g, room).logit;
        let loss = g.bce_with_logits(logit, f64::from(room.label));
        (g, loss)
    }

    /// Loss and parameter gradients of one room.
    pub fn room_gradients(
        &self,
        room: &PreparedRoom,
        dropout_rng: Option<ChaCha8Rng>,
    ) -> (f64, Gradients) {
        let (g, loss) = self.loss_graph(room, dropout_rng);
        (g.scalar(loss), g.backward(loss))
    }

    /// Summed evaluation-mode loss over rooms.
    pub fn loss(&self, rooms: &[PreparedRoom]) -> f64 {
        rooms
            .iter()
            .map(|r| {
                let (g, loss) = self.loss_graph(r, None);
                g.scalar(loss)
            })
            .sum()
    }
}
