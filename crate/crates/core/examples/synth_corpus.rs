//! Generates a small labeled corpus and summarizes what was planted.
//!
//!     cargo run --example synth_corpus -- [out_dir]

use acmil::synth::{generate_dataset, write_dataset, ScenarioConfig};

fn main() -> acmil::Result<()> {
    let cfg = ScenarioConfig {
        num_rooms: 200,
        ..ScenarioConfig::default()
    };
    let data = generate_dataset(&cfg)?;
    for (name, rooms) in ["train", "val", "test"].iter().zip(data.splits()) {
        let positives = rooms.iter().filter(|r| r.is_positive()).count();
        let actions: usize = rooms.iter().map(|r| r.num_actions()).sum();
        println!(
            "{name:>5}: {:>3} rooms, {positives:>2} fraud, {:.1} actions per room",
            rooms.len(),
            actions as f64 / rooms.len() as f64
        );
    }

    let fraud = data
        .train
        .iter()
        .find(|r| r.is_positive())
        .expect("a fraud room");
    let planted = fraud
        .planted_capsules
        .as_ref()
        .expect("fraud rooms carry ground truth");
    println!("\n{} has {} planted cells:", fraud.room_id, planted.len());
    for (user, slot) in planted {
        println!("  {user} in slot {slot}");
    }

    if let Some(dir) = std::env::args().nth(1) {
        let manifest = write_dataset(&cfg, dir.as_ref())?;
        println!("\nwrote {} splits to {dir}", manifest.splits.len());
    }
    Ok(())
}
