//! The evaluation metrics on a small hand-made ranking.

use acmil::metrics::{attribution_hit_rate, best_f1, MetricReport};

fn main() -> acmil::Result<()> {
    let scores = [0.95, 0.9, 0.7, 0.7, 0.6, 0.4, 0.35, 0.2, 0.1, 0.05];
    let labels = [1, 0, 1, 0, 1, 0, 0, 0, 0, 0];
    let report = MetricReport::compute(&scores, &labels, None)?;
    println!("{}", serde_json::to_string_pretty(&report)?);

    let (f1, threshold) = best_f1(&scores, &labels)?;
    println!("best F1 {f1:.4} at score >= {threshold}");

    // Two of the three planted capsules rank in the top three.
    let attribution = [0.30, 0.05, 0.25, 0.10, 0.28, 0.02];
    let planted = [0, 2, 3];
    println!(
        "hit rate {:.4}",
        attribution_hit_rate(&attribution, &planted, None).unwrap()
    );
    Ok(())
}
