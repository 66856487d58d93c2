//! Layer building blocks on top of [`tape`](crate::tape).
//!
//! Every layer stores only [`ParamId`]s; the values live in a
//! [`ParamStore`](crate::params::ParamStore) and are pulled into a graph at
//! forward time.

use crate::params::{Matrix, ParamBuilder, ParamId};
use crate::tape::{Graph, Var};

/// `y = x W + b` with `W: in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        b: &mut ParamBuilder<'_>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let mut b = b.scope(name);
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = b.uniform("weight", in_dim, out_dim, bound);
        let bias = bias.then(|| b.uniform("bias", 1, out_dim, bound));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &Graph<'_>, x: Var) -> Var {
        let y = g.matmul(x, g.param(self.weight));
        match self.bias {
            Some(b) => g.add(y, g.param(b)),
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(b: &mut ParamBuilder<'_>, name: &str, dim: usize) -> Self {
        let mut b = b.scope(name);
        Self {
            gain: b.constant("gain", 1, dim, 1.0),
            bias: b.constant("bias", 1, dim, 0.0),
        }
    }

    pub fn forward(&self, g: &Graph<'_>, x: Var) -> Var {
        g.layer_norm(x, g.param(self.gain), g.param(self.bias), Self::EPS)
    }
}

/// Multi-head self-attention with an optional additive logit bias that is
/// shared by every head.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

pub struct AttentionOutput {
    pub output: Var,
    /// Per-head attention probabilities (before dropout), each `n x n`.
    pub probs: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, dim: usize, heads: usize) -> Self {
        assert!(
            heads > 0 && dim.is_multiple_of(heads),
            "dim {dim} not divisible by {heads} heads"
        );
        let mut b = b.scope(name);
        Self {
            query: Linear::new(&mut b, "wq", dim, dim, true),
            key: Linear::new(&mut b, "wk", dim, dim, true),
            value: Linear::new(&mut b, "wv", dim, dim, true),
            output: Linear::new(&mut b, "wo", dim, dim, true),
            heads,
            dim,
        }
    }

    /// Per head: `softmax((Q_h K_h^T + bias) / sqrt(d_head)) V_h`.
    pub fn forward(
        &self,
        g: &Graph<'_>,
        x: Var,
        bias: Option<Var>,
        dropout: f64,
    ) -> AttentionOutput {
        let q = self.query.forward(g, x);
        let k = self.key.forward(g, x);
        let v = self.value.forward(g, x);
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outputs = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * head_dim, head_dim);
            let kh = g.slice_cols(k, h * head_dim, head_dim);
            let vh = g.slice_cols(v, h * head_dim, head_dim);
            let mut logits = g.matmul(qh, g.transpose(kh));
            if let Some(bias) = bias {
                logits = g.add(logits, bias);
            }
            let p = g.softmax_rows(g.scale(logits, scale));
            probs.push(p);
            let p = g.dropout(p, dropout);
            outputs.push(g.matmul(p, vh));
        }
        let merged = g.concat_cols(&outputs);
        AttentionOutput {
            output: self.output.forward(g, merged),
            probs,
        }
    }
}

/// Post-norm Transformer layer: `x = LN(x + MHA(x)); x = LN(x + FFN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
}

impl TransformerLayer {
    pub fn new(
        b: &mut ParamBuilder<'_>,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
    ) -> Self {
        let mut b = b.scope(name);
        Self {
            attention: MultiHeadAttention::new(&mut b, "attn", dim, heads),
            norm1: LayerNorm::new(&mut b, "norm1", dim),
            ff1: Linear::new(&mut b, "ff1", dim, ff_dim, true),
            ff2: Linear::new(&mut b, "ff2", ff_dim, dim, true),
            norm2: LayerNorm::new(&mut b, "norm2", dim),
        }
    }

    pub fn forward(
        &self,
        g: &Graph<'_>,
        x: Var,
        bias: Option<Var>,
        dropout: f64,
    ) -> AttentionOutput {
        let attn = self.attention.forward(g, x, bias, dropout);
        let x = self
            .norm1
            .forward(g, g.add(x, g.dropout(attn.output, dropout)));
        let hidden = g.dropout(g.relu(self.ff1.forward(g, x)), dropout);
        let ff = self.ff2.forward(g, hidden);
        let x = self.norm2.forward(g, g.add(x, g.dropout(ff, dropout)));
        AttentionOutput {
            output: x,
            probs: attn.probs,
        }
    }
}

/// One recurrent layer. The state is a list of `n x hidden` tensors whose
/// first entry is the hidden output.
pub trait RecurrentCell {
    fn hidden_dim(&self) -> usize;
    fn state_len(&self) -> usize;
    fn step(&self, g: &Graph<'_>, input: Var, state: &[Var]) -> Vec<Var>;
}

#[derive(Clone, Debug)]
pub struct LstmCell {
    pub input: Linear,
    pub recurrent: Linear,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, in_dim: usize, hidden: usize) -> Self {
        let mut b = b.scope(name);
        let bound = 1.0 / (hidden as f64).sqrt();
        let input = Linear {
            weight: b.uniform("w_ih.weight", in_dim, 4 * hidden, bound),
            bias: Some(b.uniform("w_ih.bias", 1, 4 * hidden, bound)),
            in_dim,
            out_dim: 4 * hidden,
        };
        let recurrent = Linear {
            weight: b.uniform("w_hh.weight", hidden, 4 * hidden, bound),
            bias: None,
            in_dim: hidden,
            out_dim: 4 * hidden,
        };
        Self {
            input,
            recurrent,
            hidden,
        }
    }
}

impl RecurrentCell for LstmCell {
    fn hidden_dim(&self) -> usize {
        self.hidden
    }

    fn state_len(&self) -> usize {
        2
    }

    fn step(&self, g: &Graph<'_>, input: Var, state: &[Var]) -> Vec<Var> {
        let (h, c) = (state[0], state[1]);
        let gates = g.add(self.input.forward(g, input), self.recurrent.forward(g, h));
        let n = self.hidden;
        let i = g.sigmoid(g.slice_cols(gates, 0, n));
        let f = g.sigmoid(g.slice_cols(gates, n, n));
        let cand = g.tanh(g.slice_cols(gates, 2 * n, n));
        let o = g.sigmoid(g.slice_cols(gates, 3 * n, n));
        let c = g.add(g.mul(f, c), g.mul(i, cand));
        let h = g.mul(o, g.tanh(c));
        vec![h, c]
    }
}

#[derive(Clone, Debug)]
pub struct GruCell {
    pub input: Linear,
    pub recurrent: Linear,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, in_dim: usize, hidden: usize) -> Self {
        let mut b = b.scope(name);
        Self {
            input: Linear::new(&mut b, "w_ih", in_dim, 3 * hidden, true),
            recurrent: Linear::new(&mut b, "w_hh", hidden, 3 * hidden, true),
            hidden,
        }
    }
}

impl RecurrentCell for GruCell {
    fn hidden_dim(&self) -> usize {
        self.hidden
    }

    fn state_len(&self) -> usize {
        1
    }

    fn step(&self, g: &Graph<'_>, input: Var, state: &[Var]) -> Vec<Var> {
        let h = state[0];
        let n = self.hidden;
        let gi = self.input.forward(g, input);
        let gh = self.recurrent.forward(g, h);
        let r = g.sigmoid(g.add(g.slice_cols(gi, 0, n), g.slice_cols(gh, 0, n)));
        let z = g.sigmoid(g.add(g.slice_cols(gi, n, n), g.slice_cols(gh, n, n)));
        let cand = g.tanh(g.add(
            g.slice_cols(gi, 2 * n, n),
            g.mul(r, g.slice_cols(gh, 2 * n, n)),
        ));
        // (1 - z) * cand + z * h
        let h = g.add(cand, g.mul(z, g.sub(h, cand)));
        vec![h]
    }
}

/// A stack of recurrent layers run over many variable-length sequences at
/// once.
#[derive(Clone, Debug)]
pub struct Stacked<C> {
    pub layers: Vec<C>,
}

impl<C: RecurrentCell> Stacked<C> {
    /// Runs every sequence in `sequences` (lists of row indices into
    /// `inputs`) through the stack and returns the final hidden state of the
    /// last layer for each sequence, in input order (`num_seqs x hidden`).
    ///
    /// Sequences are packed by descending length so that at step `t` the
    /// still-active sequences form a prefix; finished sequences keep their
    /// last state untouched. Empty sequences are not allowed.
    pub fn final_states(&self, g: &Graph<'_>, inputs: Var, sequences: &[Vec<usize>]) -> Var {
        assert!(!sequences.is_empty(), "no sequences");
        assert!(sequences.iter().all(|s| !s.is_empty()), "empty sequence");
        let mut order: Vec<usize> = (0..sequences.len()).collect();
        // Stable sort keeps equal-length sequences in input order.
        order.sort_by(|&a, &b| sequences[b].len().cmp(&sequences[a].len()));
        let total = sequences.len();
        let max_len = sequences[order[0]].len();

        let mut states: Vec<Vec<Var>> = self
            .layers
            .iter()
            .map(|cell| {
                (0..cell.state_len())
                    .map(|_| g.constant(Matrix::zeros((total, cell.hidden_dim()))))
                    .collect()
            })
            .collect();

        for t in 0..max_len {
            let active = order
                .iter()
                .take_while(|&&s| sequences[s].len() > t)
                .count();
            let rows: Vec<usize> = order[..active].iter().map(|&s| sequences[s][t]).collect();
            let mut x = g.gather_rows(inputs, &rows);
            for (cell, state) in self.layers.iter().zip(states.iter_mut()) {
                let prefix: Vec<Var> = state
                    .iter()
                    .map(|&s| {
                        if active == total {
                            s
                        } else {
                            g.slice_rows(s, 0, active)
                        }
                    })
                    .collect();
                let next = cell.step(g, x, &prefix);
                x = next[0];
                for (slot, new) in state.iter_mut().zip(next) {
                    *slot = if active == total {
                        new
                    } else {
                        let rest = g.slice_rows(*slot, active, total - active);
                        g.concat_rows(&[new, rest])
                    };
                }
            }
        }

        let mut inverse = vec![0; total];
        for (pos, &s) in order.iter().enumerate() {
            inverse[s] = pos;
        }
        let last = states.last().expect("at least one layer")[0];
        let identity = inverse.iter().enumerate().all(|(i, &p)| i == p);
        if identity {
            last
        } else {
            g.gather_rows(last, &inverse)
        }
    }
}

pub type Lstm = Stacked<LstmCell>;
pub type Gru = Stacked<GruCell>;

pub fn lstm(
    b: &mut ParamBuilder<'_>,
    name: &str,
    in_dim: usize,
    hidden: usize,
    layers: usize,
) -> Lstm {
    let mut b = b.scope(name);
    Stacked {
        layers: (0..layers)
            .map(|l| {
                LstmCell::new(
                    &mut b,
                    &format!("layer{l}"),
                    if l == 0 { in_dim } else { hidden },
                    hidden,
                )
            })
            .collect(),
    }
}

pub fn gru(
    b: &mut ParamBuilder<'_>,
    name: &str,
    in_dim: usize,
    hidden: usize,
    layers: usize,
) -> Gru {
    let mut b = b.scope(name);
    Stacked {
        layers: (0..layers)
            .map(|l| {
                GruCell::new(
                    &mut b,
                    &format!("layer{l}"),
                    if l == 0 { in_dim } else { hidden },
                    hidden,
                )
            })
            .collect(),
    }
}

/// Gated attention scoring `w^T [tanh(V h) * sigmoid(U h)]`, one logit per
/// row of the input.
#[derive(Clone, Debug)]
pub struct GatedAttention {
    pub content: Linear,
    pub gate: Linear,
    pub score: Linear,
}

impl GatedAttention {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, in_dim: usize, attn_dim: usize) -> Self {
        let mut b = b.scope(name);
        Self {
            content: Linear::new(&mut b, "w_v", in_dim, attn_dim, false),
            gate: Linear::new(&mut b, "w_u", in_dim, attn_dim, false),
            score: Linear::new(&mut b, "w", attn_dim, 1, false),
        }
    }

    /// Unnormalized logits, `n x 1`.
    pub fn logits(&self, g: &Graph<'_>, x: Var) -> Var {
        let content = g.tanh(self.content.forward(g, x));
        let gate = g.sigmoid(self.gate.forward(g, x));
        self.score.forward(g, g.mul(content, gate))
    }
}

/// Two-layer perceptron with a tanh hidden layer and scalar output.
#[derive(Clone, Debug)]
pub struct ScalarMlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl ScalarMlp {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, in_dim: usize, hidden_dim: usize) -> Self {
        let mut b = b.scope(name);
        Self {
            hidden: Linear::new(&mut b, "fc1", in_dim, hidden_dim, true),
            output: Linear::new(&mut b, "fc2", hidden_dim, 1, true),
        }
    }

    pub fn forward(&self, g: &Graph<'_>, x: Var) -> Var {
        self.output.forward(g, g.tanh(self.hidden.forward(g, x)))
    }
}
