//! Relation-aware capsule graph and graph-biased self-attention.

use ndarray::{s, Array2, ArrayView2};

use crate::nn::TransformerLayer;
use crate::params::{Matrix, ParamBuilder, ParamId};
use crate::room::CapsuleGrid;
use crate::tape::{gelu_scalar, softmax_rows, Graph, Var};

/// Relation types in the order used for the `gamma` weights.
pub const RELATIONS: [&str; 4] = ["temporal", "user", "role", "residual"];

/// The four boolean relation masks over capsule pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationMasks {
    /// Same or neighboring timeslot.
    pub temporal: Array2<bool>,
    /// Same user (including the diagonal).
    pub user: Array2<bool>,
    /// Exactly one of the pair belongs to the streamer.
    pub role: Array2<bool>,
    /// None of the above.
    pub residual: Array2<bool>,
}

impl RelationMasks {
    /// Masks from per-capsule slot and user indices.
    pub fn from_parts(slots: &[usize], users: &[usize], streamer: Option<usize>) -> Self {
        assert_eq!(slots.len(), users.len());
        let n = slots.len();
        let is_streamer = |i: usize| Some(users[i]) == streamer;
        let temporal = Array2::from_shape_fn((n, n), |(i, j)| slots[i].abs_diff(slots[j]) <= 1);
        let user = Array2::from_shape_fn((n, n), |(i, j)| users[i] == users[j]);
        let role = Array2::from_shape_fn((n, n), |(i, j)| is_streamer(i) != is_streamer(j));
        let residual = Array2::from_shape_fn((n, n), |(i, j)| {
            !(temporal[[i, j]] || user[[i, j]] || role[[i, j]])
        });
        Self {
            temporal,
            user,
            role,
            residual,
        }
    }

    pub fn from_grid(grid: &CapsuleGrid) -> Self {
        let slots: Vec<usize> = grid.capsules.iter().map(|c| c.slot).collect();
        let users: Vec<usize> = grid.capsules.iter().map(|c| c.user_index).collect();
        Self::from_parts(&slots, &users, grid.streamer_index)
    }

    pub fn len(&self) -> usize {
        self.temporal.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all(&self) -> [&Array2<bool>; 4] {
        [&self.temporal, &self.user, &self.role, &self.residual]
    }

    /// The masks as 0/1 matrices, in [`RELATIONS`] order.
    pub fn as_f64(&self) -> [Matrix; 4] {
        self.all().map(|m| m.mapv(|b| if b { 1.0 } else { 0.0 }))
    }

    /// Reorders capsules: new capsule `i` is old capsule `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let p = |m: &Array2<bool>| {
            Array2::from_shape_fn((order.len(), order.len()), |(i, j)| m[[order[i], order[j]]])
        };
        Self {
            temporal: p(&self.temporal),
            user: p(&self.user),
            role: p(&self.role),
            residual: p(&self.residual),
        }
    }
}

/// `GELU(c_i . c_j)` for every capsule pair.
pub fn similarity(capsules: ArrayView2<'_, f64>) -> Matrix {
    capsules.dot(&capsules.t()).mapv(gelu_scalar)
}

/// Pre-softmax adjacency with the CLS row and column at index 0.
pub fn adjacency_logits(
    sim: &Matrix,
    masks: &RelationMasks,
    gammas: [f64; 4],
    gamma_cls: f64,
) -> Matrix {
    let n = sim.nrows();
    let mut out = Matrix::from_elem((n + 1, n + 1), gamma_cls);
    let weights = masks.as_f64();
    let mut block = Matrix::zeros((n, n));
    for (w, g) in weights.iter().zip(gammas) {
        block.scaled_add(g, w);
    }
    out.slice_mut(s![1.., 1..]).assign(&(block * sim));
    out
}

/// Row-stochastic adjacency over `[CLS, c_1..c_n]`.
pub fn build_adjacency(
    sim: &Matrix,
    masks: &RelationMasks,
    gammas: [f64; 4],
    gamma_cls: f64,
) -> Matrix {
    softmax_rows(adjacency_logits(sim, masks, gammas, gamma_cls).view())
}

/// Masks, similarity and normalized adjacency of one room.
#[derive(Clone, Debug)]
pub struct RelationStructure {
    pub masks: RelationMasks,
    pub sim: Matrix,
    pub adjacency: Matrix,
}

impl RelationStructure {
    pub fn compute(
        capsules: ArrayView2<'_, f64>,
        masks: RelationMasks,
        gammas: [f64; 4],
        gamma_cls: f64,
    ) -> Self {
        let sim = similarity(capsules);
        let adjacency = build_adjacency(&sim, &masks, gammas, gamma_cls);
        Self {
            masks,
            sim,
            adjacency,
        }
    }
}

pub struct ReasonerOutput {
    /// Capsule-level room vector, `1 x d_k`.
    pub room: Var,
    /// Refined capsule vectors, `N^c x d_k`.
    pub refined: Var,
    /// Row-stochastic adjacency, `(N^c + 1) x (N^c + 1)`.
    pub adjacency: Var,
    /// Per-capsule share of CLS attention (head-averaged, sums to 1).
    pub attribution: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RelationalReasoner {
    pub cls: ParamId,
    /// One weight per relation type, in [`RELATIONS`] order.
    pub gammas: [ParamId; 4],
    pub layers: Vec<TransformerLayer>,
    pub gamma_cls: f64,
    pub dropout: f64,
}

impl RelationalReasoner {
    pub fn new(
        b: &mut ParamBuilder<'_>,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        layers: usize,
        gamma_cls: f64,
        dropout: f64,
    ) -> Self {
        let mut b = b.scope("reasoner");
        let cls = b.normal("cls", 1, dim, 0.02);
        let gammas = RELATIONS.map(|r| b.constant(&format!("gamma_{r}"), 1, 1, 1.0));
        let layers = (0..layers)
            .map(|l| TransformerLayer::new(&mut b, &format!("layer{l}"), dim, heads, ff_dim))
            .collect();
        Self {
            cls,
            gammas,
            layers,
            gamma_cls,
            dropout,
        }
    }

    pub fn gamma_values(&self, g: &Graph<'_>) -> [f64; 4] {
        self.gammas.map(|id| g.params().get(id)[[0, 0]])
    }

    /// Differentiable adjacency from capsule vectors `c` (`n x d`).
    pub fn adjacency(&self, g: &Graph<'_>, c: Var, masks: &RelationMasks) -> Var {
        let n = masks.len();
        let sim = g.gelu(g.matmul(c, g.transpose(c)));
        let mut weight: Option<Var> = None;
        for (mask, gamma) in masks.as_f64().into_iter().zip(self.gammas) {
            let term = g.mul(g.constant(mask), g.param(gamma));
            weight = Some(match weight {
                Some(w) => g.add(w, term),
                None => term,
            });
        }
        let block = g.mul(sim, weight.expect("four relations"));
        let top = g.constant(Matrix::from_elem((1, n + 1), self.gamma_cls));
        let left = g.constant(Matrix::from_elem((n, 1), self.gamma_cls));
        let full = g.concat_rows(&[top, g.concat_cols(&[left, block])]);
        g.softmax_rows(full)
    }

    pub fn forward(&self, g: &Graph<'_>, c: Var, masks: &RelationMasks) -> ReasonerOutput {
        let n = masks.len();
        let adjacency = self.adjacency(g, c, masks);
        let mut x = g.concat_rows(&[g.param(self.cls), c]);
        let mut probs = Vec::new();
        for layer in &self.layers {
            let out = layer.forward(g, x, Some(adjacency), self.dropout);
            x = out.output;
            probs = out.probs;
        }
        ReasonerOutput {
            room: g.row(x, 0),
            refined: g.slice_rows(x, 1, n),
            adjacency,
            attribution: cls_attribution(&probs.iter().map(|&p| g.value(p)).collect::<Vec<_>>()),
        }
    }
}

/// Head-averaged CLS-row attention over capsule columns, renormalized.
pub fn cls_attribution(head_probs: &[Matrix]) -> Vec<f64> {
    let n = head_probs[0].ncols() - 1;
    let mut scores = vec![0.0; n];
    for p in head_probs {
        for (j, s) in scores.iter_mut().enumerate() {
            *s += p[[0, j + 1]];
        }
    }
    let total: f64 = scores.iter().sum();
    scores.iter_mut().for_each(|s| *s /= total);
    scores
}
