//! The four relation masks and the normalized adjacency for a hand-built
//! four-capsule room: the streamer in slot 0, one viewer in slots 0 and 2,
//! another viewer in slot 3.

use acmil::model::{build_adjacency, similarity, RelationMasks, RELATIONS};
use ndarray::array;

fn show_bool(name: &str, m: &ndarray::Array2<bool>) {
    println!("{name}:");
    for row in m.rows() {
        let cells: Vec<&str> = row.iter().map(|&b| if b { "1" } else { "." }).collect();
        println!("  {}", cells.join(" "));
    }
}

fn main() {
    let masks = RelationMasks::from_parts(&[0, 0, 2, 3], &[0, 1, 1, 2], Some(0));
    for (name, m) in RELATIONS.iter().zip(masks.all()) {
        show_bool(name, m);
    }

    let capsules = array![[0.8, 0.1], [0.7, 0.3], [-0.2, 0.9], [0.1, -0.6]];
    let sim = similarity(capsules.view());
    for gammas in [[1.0; 4], [3.0, 0.5, 0.5, 0.0]] {
        let a = build_adjacency(&sim, &masks, gammas, 1.0);
        println!("\nadjacency with gammas {gammas:?} (row 0 is CLS):");
        for row in a.rows() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
            println!("  {}", cells.join("  "));
        }
    }
}
