//! Trains briefly, saves and reloads a checkpoint, and prints the
//! attribution heat-map of one fraud room from the reloaded model.

use acmil::checkpoint::{self, SaveRequest};
use acmil::cli::explain_room;
use acmil::model::{prepare_corpus, Model, ModelConfig, ModelKind};
use acmil::room::PreprocessConfig;
use acmil::synth::{generate_dataset, ScenarioConfig};
use acmil::train::Trainer;

fn main() -> acmil::Result<()> {
    let data = generate_dataset(&ScenarioConfig {
        num_rooms: 300,
        positive_rate: 0.25,
        ..ScenarioConfig::default()
    })?;
    let pre = PreprocessConfig::default();
    let cfg = ModelConfig {
        max_epochs: 3,
        ..ModelConfig::desk()
    };
    let (train, _) = prepare_corpus(&data.train, &pre, cfg.d_text)?;
    let (val, _) = prepare_corpus(&data.val, &pre, cfg.d_text)?;
    let mut trainer = Trainer::new(Model::new(ModelKind::AcMil, cfg)?);
    let summary = trainer.fit(&train, &val, |_| {})?;

    let dir = std::env::temp_dir().join("acmil-checkpoint-example");
    std::fs::create_dir_all(&dir).map_err(|e| acmil::Error::io(&dir, e))?;
    let path = dir.join("model.ckpt");
    checkpoint::save(
        &path,
        &SaveRequest {
            model: &trainer.model,
            preprocess: &pre,
            best_val_pr_auc: summary.best_val_pr_auc,
            threshold: summary.threshold,
            epochs_done: summary.best_epoch,
            optimizer: Some(&trainer.optimizer),
        },
    )?;
    let ckpt = checkpoint::load(&path)?;
    println!(
        "reloaded {} checkpoint: epoch {}, val PR-AUC {:.4}, groups {:?}",
        ckpt.header.kind.name(),
        ckpt.header.epochs_done,
        ckpt.header.best_val_pr_auc,
        ckpt.header
            .groups
            .iter()
            .map(|g| g.name.as_str())
            .collect::<Vec<_>>()
    );

    let room = val.iter().find(|r| r.label == 1).expect("a fraud room");
    let (explanation, heat) = explain_room(&ckpt.model, room);
    println!(
        "\n{} risk {:.4}; attribution x 100 by user and slot:",
        room.room_id, explanation.risk_score
    );
    let planted = room.planted.clone().unwrap_or_default();
    for (u, (user, row)) in room.grid.users.iter().zip(&heat).enumerate() {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(k, v)| {
                let mark = room
                    .grid
                    .capsule_at(u, k)
                    .is_some_and(|c| planted.contains(&c));
                format!("{:>4.1}{}", v * 100.0, if mark { "*" } else { " " })
            })
            .collect();
        println!("{user:>8} {}", cells.join(""));
    }
    println!("(* = planted)");
    Ok(())
}
