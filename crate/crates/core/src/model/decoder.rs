//! Gated fusion of the four room vectors, classification and the loss.

use crate::error::{Error, Result};
use crate::nn::{Linear, ScalarMlp};
use crate::params::ParamBuilder;
use crate::tape::{Graph, Var};

use super::config::ModelConfig;

pub const VIEWS: [&str; 4] = ["action", "capsule", "user", "slot"];

#[derive(Clone, Debug)]
pub struct RiskDecoder {
    /// Maps the `d_model` action-level vector to `d_k`.
    pub action_proj: Linear,
    /// One gate MLP per view, in [`VIEWS`] order.
    pub gates: [ScalarMlp; 4],
    pub classifier: ScalarMlp,
}

pub struct Fused {
    pub room: Var,
    /// `1 x 1` gate values in [`VIEWS`] order.
    pub gates: [Var; 4],
}

impl RiskDecoder {
    pub fn new(b: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Self {
        let mut b = b.scope("decoder");
        let hidden = cfg.d_k / 2;
        Self {
            action_proj: Linear::new(&mut b, "action_proj", cfg.d_model(), cfg.d_k, true),
            gates: VIEWS.map(|v| ScalarMlp::new(&mut b, &format!("gate_{v}"), cfg.d_k, hidden)),
            classifier: ScalarMlp::new(&mut b, "classifier", cfg.d_k, hidden),
        }
    }

    /// `h_room = sum_x sigmoid(MLP_x(h_x)) h_x`.
    pub fn fuse(&self, g: &Graph<'_>, views: [Var; 4]) -> Fused {
        let gates: [Var; 4] =
            std::array::from_fn(|i| g.sigmoid(self.gates[i].forward(g, views[i])));
        let mut room = g.mul(views[0], gates[0]);
        for i in 1..4 {
            room = g.add(room, g.mul(views[i], gates[i]));
        }
        Fused { room, gates }
    }

    /// Risk logit, `1 x 1`.
    pub fn classify(&self, g: &Graph<'_>, room: Var) -> Var {
        self.classifier.forward(g, room)
    }
}

/// Summed binary cross-entropy of logits, in the stable
/// `softplus(z) - y z` form.
pub fn bce_sum(logits: &[f64], labels: &[u8]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::Metric("empty batch".into()));
    }
    if logits.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logits for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    Ok(logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| softplus(z) - f64::from(y) * z)
        .sum())
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Matrix, ParamStore};
    use crate::tape::sigmoid_scalar;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn decoder() -> (ParamStore, RiskDecoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = ModelConfig {
            d_k: 8,
            ..ModelConfig::default()
        };
        let d = RiskDecoder::new(&mut ParamBuilder::new(&mut store, &mut rng), &cfg);
        (store, d)
    }

    #[test]
    fn bce_examples() {
        assert!((bce_sum(&[0.0], &[1]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let l = bce_sum(&[logit(0.9), logit(0.1)], &[1, 0]).unwrap();
        assert!((l - (-2.0 * 0.9f64.ln())).abs() < 1e-12);
        assert!((l - 0.2107).abs() < 1e-4);
        assert!(bce_sum(&[60.0, -60.0], &[1, 0]).unwrap() < 1e-20);
        assert!(bce_sum(&[], &[]).is_err());
    }

    #[test]
    fn zeroed_gate_outputs_give_half_gates() {
        let (mut store, d) = decoder();
        for mlp in &d.gates {
            store.get_mut(mlp.output.weight).fill(0.0);
            store.get_mut(mlp.output.bias.unwrap()).fill(0.0);
        }
        let g = Graph::new(&store);
        let views = [0.1, -0.2, 0.3, 0.7].map(|v| g.constant(Matrix::from_elem((1, 8), v)));
        let fused = d.fuse(&g, views);
        for gate in fused.gates {
            assert_eq!(g.scalar(gate), 0.5);
        }
        let room = g.value(fused.room);
        assert!(room
            .iter()
            .all(|&x| (x - 0.5 * (0.1 - 0.2 + 0.3 + 0.7)).abs() < 1e-12));
    }

    #[test]
    fn zero_views_gate_on_biases_only() {
        let (store, d) = decoder();
        let g = Graph::new(&store);
        let h_a = g.constant(Matrix::from_elem((1, 8), 0.5));
        let zero = || g.constant(Matrix::zeros((1, 8)));
        let fused = d.fuse(&g, [h_a, zero(), zero(), zero()]);
        for i in 1..4 {
            // MLP(0) = fc2(tanh(b1)).
            let mlp = &d.gates[i];
            let b1 = store.get(mlp.hidden.bias.unwrap());
            let w2 = store.get(mlp.output.weight);
            let b2 = store.get(mlp.output.bias.unwrap())[[0, 0]];
            let z: f64 = b1
                .iter()
                .zip(w2.iter())
                .map(|(b, w)| b.tanh() * w)
                .sum::<f64>()
                + b2;
            assert!((g.scalar(fused.gates[i]) - sigmoid_scalar(z)).abs() < 1e-12);
        }
        let ga = g.scalar(fused.gates[0]);
        assert!(g
            .value(fused.room)
            .iter()
            .all(|&x| (x - 0.5 * ga).abs() < 1e-12));
    }

    #[test]
    fn zero_classifier_scores_half() {
        let (mut store, d) = decoder();
        for id in [
            d.classifier.hidden.weight,
            d.classifier.hidden.bias.unwrap(),
            d.classifier.output.weight,
            d.classifier.output.bias.unwrap(),
        ] {
            store.get_mut(id).fill(0.0);
        }
        let g = Graph::new(&store);
        let z = d.classify(&g, g.constant(Matrix::from_elem((1, 8), 3.0)));
        assert_eq!(sigmoid_scalar(g.scalar(z)), 0.5);
    }
}
