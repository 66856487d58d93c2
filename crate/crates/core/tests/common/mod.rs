#![allow(dead_code)]

use acmil::gradcheck::{central_difference, relative_error, Coord};
use acmil::model::{Model, ModelConfig, PreparedRoom, RelationMasks};
use acmil::params::{Matrix, ParamStore};
use acmil::room::{action, ActionEvent, PreprocessConfig, Role, RoomRecord};
use acmil::synth::{generate_benign_room, generate_fraud_room, ScenarioConfig};
use acmil::tape::Graph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small model with dropout off, for fast exact checks.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_embed: 4,
        d_k: 8,
        num_heads: 2,
        encoder_layers: 1,
        graph_layers: 1,
        recurrent_layers: 1,
        ff_mult: 2,
        dropout: 0.0,
        max_actions: 400,
        learning_rate: 1e-2,
        batch_size: 8,
        ..ModelConfig::default()
    }
}

/// Scenario with few viewers and a short window, so rooms stay small.
pub fn small_scenario(seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        seed,
        mean_viewers: 4.0,
        mean_actions_per_viewer: 3.0,
        window_s: 600.0,
        ..ScenarioConfig::default()
    }
}

pub fn small_preprocess() -> PreprocessConfig {
    PreprocessConfig {
        window_s: 600.0,
        ..PreprocessConfig::default()
    }
}

/// A random small room, fraud with probability one half.
pub fn random_room(rng: &mut ChaCha8Rng, index: usize) -> PreparedRoom {
    let cfg = small_scenario(0);
    loop {
        let mut room = if rng.gen_bool(0.5) {
            generate_fraud_room(rng, &cfg)
        } else {
            generate_benign_room(rng, &cfg)
        };
        room.room_id = format!("r{index}");
        if let Ok(p) = PreparedRoom::new(&room, &small_preprocess(), cfg.d_text) {
            return p;
        }
    }
}

pub fn random_rooms(seed: u64, n: usize) -> Vec<PreparedRoom> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| random_room(&mut rng, i)).collect()
}

pub fn event(user: &str, role: Role, t: f64, a: usize, text: Option<Vec<f64>>) -> ActionEvent {
    ActionEvent {
        user_id: user.into(),
        role,
        timestamp_s: t,
        action_type_id: a,
        text_feature: text,
    }
}

/// Streamer `s` with one speech action and viewer `v` with comment, like
/// and gift, spread over two slots.
pub fn two_user_room(d_text: usize) -> RoomRecord {
    let text = |v: f64| Some(vec![v; d_text]);
    RoomRecord {
        room_id: "toy".into(),
        label: 1,
        streamer_id: "s".into(),
        actions: vec![
            event("s", Role::Streamer, 5.0, action::SPEECH, text(0.3)),
            event("v", Role::Viewer, 20.0, action::COMMENT, text(-0.4)),
            event("v", Role::Viewer, 60.0, action::LIKE, None),
            event("v", Role::Viewer, 130.0, action::GIFT, None),
        ],
        planted_capsules: None,
    }
}

/// Random `(slots, users, streamer)` for `n` capsules.
pub fn random_cells(rng: &mut impl Rng, n: usize) -> (Vec<usize>, Vec<usize>, Option<usize>) {
    let num_users = rng.gen_range(1..=n.max(1));
    let slots = (0..n).map(|_| rng.gen_range(0..6)).collect();
    let users = (0..n).map(|_| rng.gen_range(0..num_users)).collect();
    let streamer = rng.gen_bool(0.7).then(|| rng.gen_range(0..num_users));
    (slots, users, streamer)
}

/// Element-by-element masks, written independently of the library.
pub fn loop_masks(
    slots: &[usize],
    users: &[usize],
    streamer: Option<usize>,
) -> [Vec<Vec<bool>>; 4] {
    let n = slots.len();
    let mut out: [Vec<Vec<bool>>; 4] = std::array::from_fn(|_| vec![vec![false; n]; n]);
    for i in 0..n {
        for j in 0..n {
            let gap = slots[i].abs_diff(slots[j]);
            let t = gap <= 1;
            let u = users[i] == users[j];
            let si = streamer == Some(users[i]);
            let sj = streamer == Some(users[j]);
            let r = (si && !sj) || (sj && !si);
            out[0][i][j] = t;
            out[1][i][j] = u;
            out[2][i][j] = r;
            out[3][i][j] = !t && !u && !r;
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Scalar-loop adjacency over `[CLS, c_1..c_n]`.
pub fn loop_adjacency(
    c: &Matrix,
    masks: &[Vec<Vec<bool>>; 4],
    gammas: [f64; 4],
    gamma_cls: f64,
) -> Vec<Vec<f64>> {
    let n = c.nrows();
    let mut logits = vec![vec![gamma_cls; n + 1]; n + 1];
    for i in 0..n {
        for j in 0..n {
            let mut dot = 0.0;
            for k in 0..c.ncols() {
                dot += c[[i, k]] * c[[j, k]];
            }
            let mut w = 0.0;
            for z in 0..4 {
                if masks[z][i][j] {
                    w += gammas[z];
                }
            }
            logits[i + 1][j + 1] = gelu(dot) * w;
        }
    }
    logits
        .into_iter()
        .map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_shape_fn((rows, cols), |_| rng.gen_range(-scale..scale))
}

/// One analytic-vs-numeric gradient comparison.
#[derive(Debug)]
pub struct GradCheck {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Compares tape gradients with central differences at `coords`.
/// `probe` builds the scalar objective on a fresh graph.
pub fn grad_check<F>(
    params: &mut ParamStore,
    coords: &[Coord],
    step: f64,
    probe: F,
) -> Vec<GradCheck>
where
    F: for<'p> Fn(&Graph<'p>) -> acmil::tape::Var,
{
    let grads = {
        let g = Graph::new(params);
        let root = probe(&g);
        g.backward(root)
    };
    coords
        .iter()
        .map(|&at| {
            let analytic = grads.get(at.param).map_or(0.0, |m| m[[at.row, at.col]]);
            let numeric = central_difference(params, at, step, |p| {
                let g = Graph::new(p);
                let root = probe(&g);
                g.scalar(root)
            });
            GradCheck {
                name: format!("{}[{},{}]", params.name(at.param), at.row, at.col),
                analytic,
                numeric,
                rel_error: relative_error(analytic, numeric, 1e-6),
            }
        })
        .collect()
}

/// Random coordinates of parameters with a nonzero analytic gradient.
pub fn random_coords(
    params: &ParamStore,
    grads: &acmil::params::Gradients,
    rng: &mut impl Rng,
    n: usize,
) -> Vec<Coord> {
    let candidates: Vec<Coord> = params
        .ids()
        .flat_map(|id| {
            let m = params.get(id);
            let (r, c) = m.dim();
            (0..r).flat_map(move |row| {
                (0..c).map(move |col| Coord {
                    param: id,
                    row,
                    col,
                })
            })
        })
        .filter(|c| {
            grads
                .get(c.param)
                .is_some_and(|g| g[[c.row, c.col]].abs() > 1e-7)
        })
        .collect();
    assert!(
        candidates.len() >= n,
        "only {} parameters carry gradient",
        candidates.len()
    );
    rand::seq::index::sample(rng, candidates.len(), n)
        .into_iter()
        .map(|i| candidates[i])
        .collect()
}

/// Summed loss of `rooms` as a graph node.
pub fn batch_loss<'p>(model: &Model, g: &Graph<'p>, rooms: &[PreparedRoom]) -> acmil::tape::Var {
    let losses: Vec<_> = rooms
        .iter()
        .map(|r| g.bce_with_logits(model.trace(g, r).logit, f64::from(r.label)))
        .collect();
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = g.add(total, l);
    }
    total
}

pub fn masks_of(room: &PreparedRoom) -> &RelationMasks {
    &room.masks
}

/// Worst disagreement between the library and the loop oracles over
/// `grids` random grids: `(mask mismatches, max adjacency error)`.
pub fn mask_oracle_check(seed: u64, grids: usize, max_capsules: usize) -> (usize, f64) {
    use acmil::model::build_adjacency;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..grids {
        let n = rng.gen_range(1..=max_capsules);
        let (slots, users, streamer) = random_cells(&mut rng, n);
        let masks = RelationMasks::from_parts(&slots, &users, streamer);
        let oracle = loop_masks(&slots, &users, streamer);
        for (m, o) in masks.all().iter().zip(&oracle) {
            for i in 0..n {
                for j in 0..n {
                    mismatches += usize::from(m[[i, j]] != o[i][j]);
                }
            }
        }
        let d = rng.gen_range(1..6);
        let c = random_matrix(&mut rng, n, d, 1.5);
        let gammas = [0; 4].map(|_| rng.gen_range(-2.0..2.0));
        let gamma_cls = [1.0, 1.5, 2.0][rng.gen_range(0..3)];
        let sim = acmil::model::similarity(c.view());
        let a = build_adjacency(&sim, &masks, gammas, gamma_cls);
        let b = loop_adjacency(&c, &oracle, gammas, gamma_cls);
        for i in 0..=n {
            for j in 0..=n {
                worst = worst.max((a[[i, j]] - b[i][j]).abs());
            }
        }
    }
    (mismatches, worst)
}

/// Worst deviation from 1 of adjacency row sums and attribution sums, plus
/// the count of negative entries, over `n` random rooms.
pub fn stochasticity_check(seed: u64, n: usize) -> (f64, f64, usize) {
    let mut cfg = tiny_config();
    cfg.seed = seed;
    let model = Model::new(acmil::model::ModelKind::AcMil, cfg).unwrap();
    let head = model.acmil().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut row_err, mut attr_err, mut negative) = (0.0f64, 0.0f64, 0);
    for i in 0..n {
        let room = random_room(&mut rng, i);
        let g = Graph::new(&model.params);
        let front = model.front.forward(&g, &room);
        let out = head.reasoner.forward(&g, front.capsules, &room.masks);
        let a = g.value(out.adjacency);
        for row in a.rows() {
            row_err = row_err.max((row.sum() - 1.0).abs());
            negative += row.iter().filter(|&&v| v < 0.0).count();
        }
        attr_err = attr_err.max((out.attribution.iter().sum::<f64>() - 1.0).abs());
        negative += out.attribution.iter().filter(|&&v| v < 0.0).count();
    }
    (row_err, attr_err, negative)
}

/// Largest change of `h_c` and of the permuted `H_c` under random capsule
/// permutations: `(h_c error, H_c error)`.
pub fn permutation_check(seed: u64, rooms: usize, perms: usize) -> (f64, f64) {
    use rand::seq::SliceRandom;
    let mut cfg = tiny_config();
    cfg.seed = seed;
    cfg.graph_layers = 2;
    let model = Model::new(acmil::model::ModelKind::AcMil, cfg).unwrap();
    let reasoner = &model.acmil().unwrap().reasoner;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut room_err, mut refined_err) = (0.0f64, 0.0f64);
    for i in 0..rooms {
        let room = random_room(&mut rng, i);
        let g = Graph::new(&model.params);
        let c = g.value(model.front.forward(&g, &room).capsules);
        let base = reasoner.forward(&g, g.constant(c.clone()), &room.masks);
        let (h, hc) = (g.value(base.room), g.value(base.refined));
        let n = c.nrows();
        for _ in 0..perms {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let pc = Matrix::from_shape_fn(c.dim(), |(r, k)| c[[order[r], k]]);
            let out = reasoner.forward(&g, g.constant(pc), &room.masks.permuted(&order));
            let (ph, phc) = (g.value(out.room), g.value(out.refined));
            room_err = room_err.max((&ph - &h).iter().fold(0.0, |m, v| m.max(v.abs())));
            for r in 0..n {
                for k in 0..hc.ncols() {
                    refined_err = refined_err.max((phc[[r, k]] - hc[[order[r], k]]).abs());
                }
            }
        }
    }
    (room_err, refined_err)
}

/// One gradient comparison with the tolerance it must meet.
pub struct ToleratedCheck {
    pub group: &'static str,
    pub tolerance: f64,
    pub check: GradCheck,
}

impl ToleratedCheck {
    pub fn passes(&self) -> bool {
        self.check.rel_error <= self.tolerance
    }
}

fn coord(id: acmil::params::ParamId) -> Coord {
    Coord {
        param: id,
        row: 0,
        col: 0,
    }
}

/// All finite-difference checks: the action-level probe, relation weights,
/// streamer bias, gate biases and random deep parameters.
pub fn gradient_suite(seed: u64) -> Vec<ToleratedCheck> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = tiny_config();
    cfg.seed = seed;
    let model = Model::new(acmil::model::ModelKind::AcMil, cfg.clone()).unwrap();
    let head = model.acmil().unwrap().clone();
    let toy = PreparedRoom::new(
        &two_user_room(cfg.d_text),
        &PreprocessConfig::default(),
        cfg.d_text,
    )
    .unwrap();
    let mut params = model.params.clone();

    let probe = |g: &Graph<'_>| {
        let encoded = model.front.forward(g, &toy).encoded;
        g.sum_all(head.decoder.action_proj.forward(g, encoded.room))
    };
    let grads = {
        let g = Graph::new(&params);
        let root = probe(&g);
        g.backward(root)
    };
    let coords = random_coords(&params, &grads, &mut rng, 5);
    for check in grad_check(&mut params, &coords, 1e-4, probe) {
        out.push(ToleratedCheck {
            group: "action probe",
            tolerance: 1e-3,
            check,
        });
    }

    let loss = |g: &Graph<'_>| g.bce_with_logits(model.trace(g, &toy).logit, 1.0);
    let gammas: Vec<Coord> = head.reasoner.gammas.iter().map(|&id| coord(id)).collect();
    for check in grad_check(&mut params, &gammas, 1e-3, loss) {
        out.push(ToleratedCheck {
            group: "relation weights",
            tolerance: 1e-3,
            check,
        });
    }
    let biases: Vec<Coord> = std::iter::once(coord(head.user_view.streamer_bias))
        .chain(
            head.decoder
                .gates
                .iter()
                .map(|m| coord(m.output.bias.expect("gate bias"))),
        )
        .collect();
    for (i, check) in grad_check(&mut params, &biases, 1e-4, loss)
        .into_iter()
        .enumerate()
    {
        let group = if i == 0 {
            "streamer bias"
        } else {
            "gate biases"
        };
        out.push(ToleratedCheck {
            group,
            tolerance: 1e-3,
            check,
        });
    }

    let rooms = random_rooms(seed ^ 0x5eed, 2);
    let batch = |g: &Graph<'_>| batch_loss(&model, g, &rooms);
    let grads = {
        let g = Graph::new(&params);
        let root = batch(&g);
        g.backward(root)
    };
    let deep = random_coords(&params, &grads, &mut rng, 10);
    for check in grad_check(&mut params, &deep, 1e-5, batch) {
        out.push(ToleratedCheck {
            group: "deep parameters",
            tolerance: 1e-2,
            check,
        });
    }
    out
}
