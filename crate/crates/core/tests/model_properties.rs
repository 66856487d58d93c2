mod common;

use acmil::model::{Model, ModelKind, PreparedRoom};
use acmil::params::Matrix;
use acmil::room::{action, PreprocessConfig, Role, RoomRecord};
use acmil::tape::Graph;
use common::*;

fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    (a - b).iter().fold(0.0, |m, v| m.max(v.abs()))
}

#[test]
fn finite_differences_agree() {
    let checks = gradient_suite(3);
    let failures: Vec<_> = checks.iter().filter(|c| !c.passes()).collect();
    for c in &failures {
        eprintln!("{}: {:?} (tol {})", c.group, c.check, c.tolerance);
    }
    assert!(failures.is_empty());
    assert_eq!(checks.len(), 5 + 4 + 1 + 4 + 10);
}

#[test]
fn masks_match_the_loop_oracle() {
    let (mismatches, worst) = mask_oracle_check(1, 100, 12);
    assert_eq!(mismatches, 0);
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn adjacency_rows_and_attribution_sum_to_one() {
    let (rows, attr, negative) = stochasticity_check(2, 60);
    assert!(
        rows < 1e-6 && attr < 1e-6 && negative == 0,
        "{rows} {attr} {negative}"
    );
}

#[test]
fn reasoner_is_permutation_equivariant() {
    let (room, refined) = permutation_check(4, 3, 5);
    assert!(room < 1e-5 && refined < 1e-5, "{room} {refined}");
}

fn five_actions(reversed: bool) -> RoomRecord {
    let mut actions = vec![
        event("v", Role::Viewer, 1.0, action::ENTRY, None),
        event("v", Role::Viewer, 2.0, action::COMMENT, Some(vec![0.5; 16])),
        event("v", Role::Viewer, 3.0, action::LIKE, None),
        event("v", Role::Viewer, 4.0, action::GIFT, None),
        event("v", Role::Viewer, 5.0, action::SHARE, None),
    ];
    if reversed {
        let types: Vec<_> = actions
            .iter()
            .map(|a| (a.action_type_id, a.text_feature.clone()))
            .rev()
            .collect();
        for (a, (t, x)) in actions.iter_mut().zip(types) {
            a.action_type_id = t;
            a.text_feature = x;
        }
    }
    RoomRecord {
        room_id: "five".into(),
        label: 0,
        streamer_id: "s".into(),
        actions,
        planted_capsules: None,
    }
}

#[test]
fn encoder_is_order_sensitive() {
    let model = Model::new(ModelKind::AcMil, tiny_config()).unwrap();
    let pre = PreprocessConfig {
        drop_entry_only_viewers: false,
        ..PreprocessConfig::default()
    };
    let encode = |room: &RoomRecord| {
        let room = PreparedRoom::new(room, &pre, 16).unwrap();
        let g = Graph::new(&model.params);
        let e = model.front.embedding.forward_room(&g, &room);
        let enc = model.front.encoder.forward(&g, e);
        (g.value(e), g.value(enc.actions))
    };
    let (e1, a1) = encode(&five_actions(false));
    let (e2, a2) = encode(&five_actions(true));
    let reversed = Matrix::from_shape_fn(e1.dim(), |(i, k)| e1[[4 - i, k]]);
    assert_eq!(reversed, e2, "embeddings are per-action lookups");
    let reversed = Matrix::from_shape_fn(a1.dim(), |(i, k)| a1[[4 - i, k]]);
    assert!(max_abs_diff(&reversed, &a2) > 1e-6);
}

#[test]
fn capsules_are_local_without_encoder_layers() {
    let cfg = acmil::model::ModelConfig {
        encoder_layers: 0,
        ..tiny_config()
    };
    let model = Model::new(ModelKind::AcMil, cfg).unwrap();
    let base = two_user_room(16);
    let mut changed = base.clone();
    changed.actions[1].text_feature = Some(vec![2.0; 16]);
    let capsules = |room: &RoomRecord| {
        let room = PreparedRoom::new(room, &PreprocessConfig::default(), 16).unwrap();
        let g = Graph::new(&model.params);
        (g.value(model.front.forward(&g, &room).capsules), room)
    };
    let (c1, room) = capsules(&base);
    let (c2, _) = capsules(&changed);
    let touched = room
        .grid
        .capsule_at(room.grid.user_index("v").unwrap(), 0)
        .unwrap();
    for i in 0..c1.nrows() {
        let d = (0..c1.ncols())
            .map(|k| (c1[[i, k]] - c2[[i, k]]).abs())
            .fold(0.0, f64::max);
        if i == touched {
            assert!(d > 1e-6);
        } else {
            assert_eq!(d, 0.0, "capsule {i} moved");
        }
    }

    // With an encoder, the edit reaches other capsules through context.
    let contextual = Model::new(ModelKind::AcMil, tiny_config()).unwrap();
    let caps = |room: &RoomRecord| {
        let room = PreparedRoom::new(room, &PreprocessConfig::default(), 16).unwrap();
        let g = Graph::new(&contextual.params);
        g.value(contextual.front.forward(&g, &room).capsules)
    };
    let (c1, c2) = (caps(&base), caps(&changed));
    let others_moved = (0..c1.nrows())
        .filter(|&i| i != touched)
        .any(|i| (0..c1.ncols()).any(|k| c1[[i, k]] != c2[[i, k]]));
    assert!(others_moved);
}

#[test]
fn evaluation_forward_is_bit_identical() {
    let rooms = random_rooms(5, 4);
    for kind in [ModelKind::AcMil, ModelKind::MeanPool, ModelKind::AtMil] {
        let mut cfg = tiny_config();
        cfg.dropout = 0.3;
        let model = Model::new(kind, cfg.clone()).unwrap();
        let again = Model::new(kind, cfg).unwrap();
        for room in &rooms {
            let a = model.predict(room);
            assert_eq!(a, model.predict(room));
            assert_eq!(a, again.predict(room));
            assert!(a.score > 0.0 && a.score < 1.0);
            assert!((a.attribution.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn training_mode_dropout_depends_on_the_seed() {
    use rand::SeedableRng;
    let mut cfg = tiny_config();
    cfg.dropout = 0.3;
    let model = Model::new(ModelKind::AcMil, cfg).unwrap();
    let room = &random_rooms(6, 1)[0];
    let loss = |seed| {
        model
            .room_gradients(room, Some(rand_chacha::ChaCha8Rng::seed_from_u64(seed)))
            .0
    };
    assert_eq!(loss(1), loss(1));
    assert_ne!(loss(1), loss(2));
}

#[test]
fn baselines_pool_as_described() {
    let room = &random_rooms(7, 1)[0];
    let mean = Model::new(ModelKind::MeanPool, tiny_config()).unwrap();
    let out = mean.predict(room);
    let n = room.num_capsules() as f64;
    assert!(out.attribution.iter().all(|&a| (a - 1.0 / n).abs() < 1e-12));
    assert!(out.decoded.is_none());

    let at = Model::new(ModelKind::AtMil, tiny_config()).unwrap();
    let out = at.predict(room);
    assert_eq!(out.attribution.len(), room.num_capsules());
    assert!(out.attribution.iter().all(|&a| a > 0.0));
}
