//! Preprocesses one synthetic room and prints its user x timeslot grid of
//! capsule sizes, marking the planted cells.

use acmil::model::{ModelConfig, PreparedRoom};
use acmil::room::PreprocessConfig;
use acmil::synth::{generate_fraud_room, room_rng, ScenarioConfig};

fn main() -> acmil::Result<()> {
    let scenario = ScenarioConfig::default();
    let room = generate_fraud_room(&mut room_rng(scenario.seed, 0, 3), &scenario);
    let pre = PreprocessConfig::default();
    let prepared = PreparedRoom::new(&room, &pre, ModelConfig::default().d_text)?;
    let grid = &prepared.grid;
    println!(
        "{}: {} raw actions -> {} kept, {} users, {} capsules over {} slots of {}s",
        room.room_id,
        room.num_actions(),
        prepared.num_actions(),
        grid.num_users(),
        grid.num_capsules(),
        grid.num_slots,
        grid.slot_len_s
    );

    let planted = prepared.planted.clone().unwrap_or_default();
    print!("{:>8} ", "");
    for k in 0..grid.num_slots {
        print!("{:>3}", k);
    }
    println!();
    for (u, user) in grid.users.iter().enumerate() {
        print!("{user:>8} ");
        for k in 0..grid.num_slots {
            match grid.capsule_at(u, k) {
                Some(c) if planted.contains(&c) => print!("{:>2}*", grid.capsules[c].actions.len()),
                Some(c) => print!("{:>3}", grid.capsules[c].actions.len()),
                None => print!("{:>3}", "."),
            }
        }
        println!();
    }
    println!("\n(* = planted collusion cell, . = empty)");
    Ok(())
}
