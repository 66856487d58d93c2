//! One evaluation-mode AC-MIL forward pass on an untrained model: the risk
//! score, the four view gates, user-view weights and the most attributed
//! capsules.

use acmil::model::{Model, ModelConfig, ModelKind, PreparedRoom, VIEWS};
use acmil::room::PreprocessConfig;
use acmil::synth::{generate_fraud_room, room_rng, ScenarioConfig};

fn main() -> acmil::Result<()> {
    let scenario = ScenarioConfig::default();
    let room = generate_fraud_room(&mut room_rng(1, 0, 0), &scenario);
    let cfg = ModelConfig::desk();
    let model = Model::new(ModelKind::AcMil, cfg.clone())?;
    println!("{} parameters", model.params.num_scalars());

    let prepared = PreparedRoom::new(&room, &PreprocessConfig::default(), cfg.d_text)?;
    let out = model.predict(&prepared);
    let decoded = out.decoded.as_ref().expect("AC-MIL decodes all views");
    println!("risk score {:.4} (logit {:.4})", out.score, out.logit);
    for (view, gate) in VIEWS.iter().zip(decoded.gates) {
        println!("  gate {view:<8} {gate:.4}");
    }

    let mut users: Vec<(&String, f64)> = prepared
        .grid
        .users
        .iter()
        .zip(decoded.user_weights.iter().copied())
        .collect();
    users.sort_by(|a, b| b.1.total_cmp(&a.1));
    println!("user-view weights (top 3):");
    for (u, w) in users.iter().take(3) {
        println!("  {u:<10} {w:.4}");
    }

    let mut caps: Vec<usize> = (0..prepared.num_capsules()).collect();
    caps.sort_by(|&a, &b| out.attribution[b].total_cmp(&out.attribution[a]));
    println!("capsule attribution (top 3):");
    for &c in caps.iter().take(3) {
        let (user, slot) = prepared.grid.key(c);
        println!("  ({user}, slot {slot}) {:.4}", out.attribution[c]);
    }
    Ok(())
}
