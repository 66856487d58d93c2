//! Trains AC-MIL and the two pooling baselines on a small synthetic corpus
//! and compares their test metrics. Takes a few minutes in release mode.
//!
//!     cargo run --release --example train_and_compare -- [rooms]

use acmil::model::{prepare_corpus, Model, ModelConfig, ModelKind};
use acmil::room::PreprocessConfig;
use acmil::synth::{generate_dataset, ScenarioConfig};
use acmil::train::{evaluate, uniform_hit_rate, Trainer};

fn main() -> acmil::Result<()> {
    let rooms = std::env::args()
        .nth(1)
        .map_or(800, |s| s.parse().expect("room count"));
    let data = generate_dataset(&ScenarioConfig {
        num_rooms: rooms,
        positive_rate: 0.2,
        ..ScenarioConfig::default()
    })?;
    let pre = PreprocessConfig::default();
    let cfg = ModelConfig {
        max_epochs: 6,
        ..ModelConfig::desk()
    };
    let (train, _) = prepare_corpus(&data.train, &pre, cfg.d_text)?;
    let (val, _) = prepare_corpus(&data.val, &pre, cfg.d_text)?;
    let (test, _) = prepare_corpus(&data.test, &pre, cfg.d_text)?;

    for kind in [ModelKind::AcMil, ModelKind::AtMil, ModelKind::MeanPool] {
        let mut trainer = Trainer::new(Model::new(kind, cfg.clone())?);
        let summary = trainer.fit(&train, &val, |log| {
            eprintln!(
                "{:>8} epoch {}: loss {:.4}, val PR-AUC {:.4}",
                kind.name(),
                log.epoch,
                log.train_loss,
                log.val_pr_auc
            )
        })?;
        let r = evaluate(&trainer.model, &test, Some(summary.threshold))?;
        println!(
            "{:>8}: PR-AUC {:.4}  F1 {:.4}  R@0.1FPR {:.4}  FPR@0.9R {:.4}  hit rate {:.4}",
            kind.name(),
            r.pr_auc,
            r.f1,
            r.recall_at_fpr01,
            r.fpr_at_recall09,
            r.attribution_hit_rate.unwrap_or(f64::NAN)
        );
    }
    println!(
        "uniform hit rate {:.4}",
        uniform_hit_rate(&test).unwrap_or(f64::NAN)
    );
    Ok(())
}
