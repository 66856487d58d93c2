//! Synthetic labeled rooms with planted collusion motifs.
//!
//! Benign rooms: a streamer speaking (and emitting OCR frames) on a jittered
//! schedule, plus viewers acting as independent Poisson processes over the
//! window. Every room draws its own topic centroid, and text features are
//! unit-variance noise around it.
//!
//! Fraud rooms start from a benign room and plant a motif in a slot pair
//! `{k, k+1}`: the streamer's speech in slot `k` moves toward a promotion
//! direction, and 2-5 shill viewers burst with gift/comment-heavy actions
//! whose text moves toward a shill direction. Every part of the motif scales
//! with `motif_strength`; at zero a fraud room has the benign distribution.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::room::{action, write_jsonl, ActionEvent, Role, RoomRecord, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub num_rooms: usize,
    pub positive_rate: f64,
    pub seed: u64,
    pub mean_viewers: f64,
    pub mean_actions_per_viewer: f64,
    /// In [0, 1]; scales every observable part of the planted motif.
    pub motif_strength: f64,
    pub d_text: usize,
    pub vocab_size: usize,
    pub window_s: f64,
    /// Slot length used to place motifs and record planted cells.
    pub slot_len_s: f64,
    /// Standard deviation of the per-room topic centroid.
    pub topic_std: f64,
    /// Probability that a benign viewer concentrates its activity in one slot.
    pub fan_burst_prob: f64,
    /// Expected extra actions per shill per motif slot at full strength.
    pub shill_burst_rate: f64,
    /// Norm of the feature shift at full strength.
    pub shift_scale: f64,
    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            num_rooms: 1000,
            positive_rate: 0.0909,
            seed: 7,
            mean_viewers: 15.0,
            mean_actions_per_viewer: 4.0,
            motif_strength: 0.8,
            d_text: 16,
            vocab_size: Vocabulary::standard().len(),
            window_s: 1800.0,
            slot_len_s: 100.0,
            topic_std: 0.5,
            fan_burst_prob: 0.1,
            shill_burst_rate: 4.0,
            shift_scale: 1.0,
            split_train: 0.8,
            split_val: 0.1,
            split_test: 0.1,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.positive_rate > 0.0 && self.positive_rate < 1.0) {
            return err("positive_rate must be in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.motif_strength) {
            return err("motif_strength must be in [0, 1]");
        }
        if self.d_text == 0 {
            return err("d_text must be positive");
        }
        if self.vocab_size != Vocabulary::standard().len() {
            return err("vocab_size must match the standard 13-action vocabulary");
        }
        if self.mean_viewers < 0.0 || self.mean_actions_per_viewer < 0.0 {
            return err("viewer counts must be non-negative");
        }
        if !(self.window_s > 0.0 && self.slot_len_s > 0.0 && self.slot_len_s * 2.0 <= self.window_s)
        {
            return err("window_s must cover at least two slots");
        }
        let fractions = [self.split_train, self.split_val, self.split_test];
        if fractions.iter().any(|&f| f < 0.0) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return err("split fractions must be non-negative and sum to 1");
        }
        Ok(())
    }

    fn num_slots(&self) -> usize {
        (self.window_s / self.slot_len_s).ceil() as usize
    }
}

const STREAMER_ID: &str = "streamer";

const BENIGN_VIEWER_TYPES: [(usize, f64); 9] = [
    (action::COMMENT, 0.25),
    (action::HIGHLIGHT, 0.03),
    (action::LEADERBOARD, 0.04),
    (action::DANMAKU, 0.15),
    (action::GIFT, 0.05),
    (action::LIKE, 0.35),
    (action::SHARE, 0.05),
    (action::CO_STREAM, 0.02),
    (action::GROUP_JOIN, 0.06),
];

const SHILL_TYPES: [(usize, f64); 3] = [
    (action::GIFT, 0.4),
    (action::COMMENT, 0.4),
    (action::LIKE, 0.2),
];

fn has_text(a: usize) -> bool {
    Vocabulary::standard().get(a).is_some_and(|s| s.has_text)
}

/// Unit direction for the promotion shift (alternating signs).
fn promotion_direction(d: usize) -> Vec<f64> {
    let n = (d as f64).sqrt();
    (0..d)
        .map(|i| if i % 2 == 0 { 1.0 / n } else { -1.0 / n })
        .collect()
}

/// Unit direction for the shill shift; orthogonal to the promotion direction
/// when `d` is a multiple of four.
fn shill_direction(d: usize) -> Vec<f64> {
    let n = (d as f64).sqrt();
    (0..d)
        .map(|i| if (i / 2) % 2 == 0 { 1.0 / n } else { -1.0 / n })
        .collect()
}

struct RoomContext {
    topic: Vec<f64>,
    noise: Normal<f64>,
}

impl RoomContext {
    fn feature(&self, rng: &mut ChaCha8Rng, shift: Option<(&[f64], f64)>) -> Vec<f64> {
        self.topic
            .iter()
            .enumerate()
            .map(|(i, &mu)| {
                let offset = shift.map_or(0.0, |(dir, m)| dir[i] * m);
                mu + offset + self.noise.sample(rng)
            })
            .collect()
    }
}

fn sample_type(rng: &mut ChaCha8Rng, strength: f64) -> usize {
    let mut weights: Vec<(usize, f64)> = BENIGN_VIEWER_TYPES
        .iter()
        .map(|&(a, w)| (a, (1.0 - strength) * w))
        .collect();
    for &(a, w) in &SHILL_TYPES {
        if let Some(entry) = weights.iter_mut().find(|(b, _)| *b == a) {
            entry.1 += strength * w;
        }
    }
    let dist = WeightedIndex::new(weights.iter().map(|w| w.1)).expect("positive weights");
    weights[dist.sample(rng)].0
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive mean").sample(rng) as usize
}

fn sort_actions(actions: &mut [ActionEvent]) {
    actions.sort_by(|a, b| a.timestamp_s.total_cmp(&b.timestamp_s));
}

fn benign_room(
    rng: &mut ChaCha8Rng,
    cfg: &ScenarioConfig,
    room_id: String,
) -> (RoomRecord, RoomContext) {
    let topic_dist = Normal::new(0.0, cfg.topic_std.max(0.0)).expect("finite std");
    let ctx = RoomContext {
        topic: (0..cfg.d_text).map(|_| topic_dist.sample(rng)).collect(),
        noise: Normal::new(0.0, 1.0).expect("unit normal"),
    };
    let mut actions = Vec::new();
    let streamer = |t: f64, a: usize, x: Option<Vec<f64>>| ActionEvent {
        user_id: STREAMER_ID.to_string(),
        role: Role::Streamer,
        timestamp_s: t,
        action_type_id: a,
        text_feature: x,
    };
    actions.push(streamer(0.0, action::STREAM_START, None));
    // Speech gaps stay below the default slot length so every slot has some.
    let mut t = rng.gen_range(0.0..20.0);
    while t <= cfg.window_s {
        actions.push(streamer(t, action::SPEECH, Some(ctx.feature(rng, None))));
        t += rng.gen_range(40.0..90.0);
    }
    let mut t = rng.gen_range(0.0..300.0);
    while t <= cfg.window_s {
        actions.push(streamer(t, action::OCR_FRAME, Some(ctx.feature(rng, None))));
        t += rng.gen_range(200.0..400.0);
    }

    let n_viewers = poisson(rng, cfg.mean_viewers);
    let activity = Gamma::new(2.0, 0.5).expect("valid gamma");
    let num_slots = cfg.num_slots();
    for next_id in 0..n_viewers {
        let user_id = format!("v{next_id:04}");
        let rate = cfg.mean_actions_per_viewer * activity.sample(rng);
        let n = poisson(rng, rate);
        if n == 0 {
            continue;
        }
        let burst_slot = if rng.gen_bool(cfg.fan_burst_prob.clamp(0.0, 1.0)) {
            Some(rng.gen_range(0..num_slots))
        } else {
            None
        };
        let mut times: Vec<f64> = (0..n)
            .map(|_| match burst_slot {
                Some(k) if rng.gen_bool(0.8) => slot_time(rng, cfg, k),
                _ => rng.gen_range(0.0..cfg.window_s),
            })
            .collect();
        times.sort_by(f64::total_cmp);
        for (i, t) in times.into_iter().enumerate() {
            let a = if i == 0 {
                action::ENTRY
            } else {
                sample_type(rng, 0.0)
            };
            let x = has_text(a).then(|| ctx.feature(rng, None));
            actions.push(ActionEvent {
                user_id: user_id.clone(),
                role: Role::Viewer,
                timestamp_s: t,
                action_type_id: a,
                text_feature: x,
            });
        }
    }
    sort_actions(&mut actions);
    let room = RoomRecord {
        room_id,
        label: 0,
        streamer_id: STREAMER_ID.to_string(),
        actions,
        planted_capsules: None,
    };
    (room, ctx)
}

fn slot_time(rng: &mut ChaCha8Rng, cfg: &ScenarioConfig, slot: usize) -> f64 {
    let start = slot as f64 * cfg.slot_len_s;
    let end = ((slot + 1) as f64 * cfg.slot_len_s).min(cfg.window_s);
    rng.gen_range(start..end)
}

fn slot_index(cfg: &ScenarioConfig, t: f64) -> usize {
    ((t / cfg.slot_len_s).floor() as usize).min(cfg.num_slots() - 1)
}

pub fn generate_benign_room(rng: &mut ChaCha8Rng, cfg: &ScenarioConfig) -> RoomRecord {
    benign_room(rng, cfg, "benign".to_string()).0
}

pub fn generate_fraud_room(rng: &mut ChaCha8Rng, cfg: &ScenarioConfig) -> RoomRecord {
    fraud_room(rng, cfg, "fraud".to_string())
}

fn fraud_room(rng: &mut ChaCha8Rng, cfg: &ScenarioConfig, room_id: String) -> RoomRecord {
    let (mut room, ctx) = benign_room(rng, cfg, room_id);
    room.label = 1;
    let s = cfg.motif_strength;
    let magnitude = s * cfg.shift_scale;
    let promo = promotion_direction(cfg.d_text);
    let shill_dir = shill_direction(cfg.d_text);
    let k = rng.gen_range(0..cfg.num_slots() - 1);
    let motif_slots = [k, k + 1];

    // Streamer promotion: speech in slot k.
    for a in room.actions.iter_mut() {
        if a.role == Role::Streamer
            && a.action_type_id == action::SPEECH
            && slot_index(cfg, a.timestamp_s) == k
        {
            a.text_feature = Some(ctx.feature(rng, Some((&promo, magnitude))));
        }
    }

    // Shills: prefer viewers that did more than enter.
    let mut eligible: Vec<String> = {
        let mut counts: std::collections::BTreeMap<&str, usize> = Default::default();
        for a in room.actions.iter().filter(|a| a.role == Role::Viewer) {
            *counts.entry(a.user_id.as_str()).or_default() += 1;
        }
        counts
            .into_iter()
            .filter(|&(_, c)| c >= 2)
            .map(|(u, _)| u.to_string())
            .collect()
    };
    eligible.shuffle(rng);
    let wanted = rng.gen_range(2..=5);
    let mut shills: Vec<String> = eligible.into_iter().take(wanted).collect();
    let mut fresh = 0;
    while shills.len() < wanted {
        let id = format!("x{fresh:04}");
        fresh += 1;
        room.actions.push(ActionEvent {
            user_id: id.clone(),
            role: Role::Viewer,
            timestamp_s: rng.gen_range(0.0..(k as f64 * cfg.slot_len_s).max(1.0)),
            action_type_id: action::ENTRY,
            text_feature: None,
        });
        room.actions.push(ActionEvent {
            user_id: id.clone(),
            role: Role::Viewer,
            timestamp_s: rng.gen_range(0.0..cfg.window_s),
            action_type_id: sample_type(rng, 0.0),
            text_feature: None,
        });
        shills.push(id);
    }

    for shill in &shills {
        let mine: Vec<usize> = (0..room.actions.len())
            .filter(|&i| &room.actions[i].user_id == shill)
            .collect();
        // Guarantee a capsule in slot k by moving one non-entry action there.
        if !mine
            .iter()
            .any(|&i| slot_index(cfg, room.actions[i].timestamp_s) == k)
        {
            let movable: Vec<usize> = mine
                .iter()
                .copied()
                .filter(|&i| room.actions[i].action_type_id != action::ENTRY)
                .collect();
            let pick = *movable.choose(rng).unwrap_or(&mine[mine.len() - 1]);
            room.actions[pick].timestamp_s = slot_time(rng, cfg, k);
        }
        for &slot in &motif_slots {
            for _ in 0..poisson(rng, s * cfg.shill_burst_rate) {
                let t = slot_time(rng, cfg, slot);
                let a = sample_type(rng, s);
                room.actions.push(ActionEvent {
                    user_id: shill.clone(),
                    role: Role::Viewer,
                    timestamp_s: t,
                    action_type_id: a,
                    text_feature: None,
                });
            }
        }
        for a in room.actions.iter_mut().filter(|a| &a.user_id == shill) {
            if motif_slots.contains(&slot_index(cfg, a.timestamp_s)) {
                a.text_feature = has_text(a.action_type_id)
                    .then(|| ctx.feature(rng, Some((&shill_dir, magnitude))));
            }
        }
    }
    sort_actions(&mut room.actions);

    let mut planted = BTreeSet::new();
    planted.insert((STREAMER_ID.to_string(), k));
    for a in room.actions.iter().filter(|a| shills.contains(&a.user_id)) {
        let slot = slot_index(cfg, a.timestamp_s);
        if motif_slots.contains(&slot) {
            planted.insert((a.user_id.clone(), slot));
        }
    }
    room.planted_capsules = Some(planted.into_iter().collect());
    room
}

/// SplitMix64 finalizer; turns (seed, split, index) into independent streams.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn room_rng(seed: u64, split: usize, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(mix(seed) ^ split as u64) ^ index as u64))
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

/// Sizes and positive counts of each split (train, val, test).
pub fn split_plan(cfg: &ScenarioConfig) -> [(usize, usize); 3] {
    let n = cfg.num_rooms;
    let train = (cfg.split_train * n as f64).round() as usize;
    let val = ((cfg.split_val * n as f64).round() as usize).min(n - train.min(n));
    let test = n - train.min(n) - val;
    let sizes = [train.min(n), val, test];
    sizes.map(|size| (size, (size as f64 * cfg.positive_rate).round() as usize))
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<RoomRecord>,
    pub val: Vec<RoomRecord>,
    pub test: Vec<RoomRecord>,
}

impl Dataset {
    pub fn splits(&self) -> [&[RoomRecord]; 3] {
        [&self.train, &self.val, &self.test]
    }
}

/// Generates one split. Labels are an exact stratified draw, shuffled with a
/// split-level stream; each room uses its own derived stream, so the result
/// does not depend on generation order.
pub fn generate_split(cfg: &ScenarioConfig, split: usize) -> Vec<RoomRecord> {
    let (size, positives) = split_plan(cfg)[split];
    let mut labels: Vec<u8> = (0..size).map(|i| u8::from(i < positives)).collect();
    let mut split_rng = room_rng(cfg.seed, split, usize::MAX);
    labels.shuffle(&mut split_rng);
    labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let mut rng = room_rng(cfg.seed, split, i);
            let id = format!("{}-{i:05}", SPLIT_NAMES[split]);
            if label == 1 {
                fraud_room(&mut rng, cfg, id)
            } else {
                benign_room(&mut rng, cfg, id).0
            }
        })
        .collect()
}

pub fn generate_dataset(cfg: &ScenarioConfig) -> Result<Dataset> {
    cfg.validate()?;
    Ok(Dataset {
        train: generate_split(cfg, 0),
        val: generate_split(cfg, 1),
        test: generate_split(cfg, 2),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthManifest {
    pub config: ScenarioConfig,
    pub seed: u64,
    pub splits: Vec<SplitSummary>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitSummary {
    pub name: String,
    pub file: String,
    pub rooms: usize,
    pub positives: usize,
}

/// Writes `train.jsonl`, `val.jsonl`, `test.jsonl` and `manifest.json`.
pub fn write_dataset(cfg: &ScenarioConfig, out_dir: &Path) -> Result<SynthManifest> {
    let data = generate_dataset(cfg)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut splits = Vec::new();
    for (name, rooms) in SPLIT_NAMES.iter().zip(data.splits()) {
        let file = format!("{name}.jsonl");
        write_jsonl(&out_dir.join(&file), rooms)?;
        splits.push(SplitSummary {
            name: name.to_string(),
            file,
            rooms: rooms.len(),
            positives: rooms.iter().filter(|r| r.is_positive()).count(),
        });
    }
    let manifest = SynthManifest {
        config: cfg.clone(),
        seed: cfg.seed,
        splits,
    };
    let path = out_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_viewers_means_streamer_only() {
        let cfg = ScenarioConfig {
            mean_viewers: 0.0,
            ..ScenarioConfig::default()
        };
        let room = generate_benign_room(&mut ChaCha8Rng::seed_from_u64(1), &cfg);
        assert_eq!(room.label, 0);
        assert!(room.actions.iter().all(|a| a.role == Role::Streamer));
    }

    #[test]
    fn fixed_seed_reproduces_rooms() {
        let cfg = ScenarioConfig::default();
        let a = generate_fraud_room(&mut ChaCha8Rng::seed_from_u64(9), &cfg);
        let b = generate_fraud_room(&mut ChaCha8Rng::seed_from_u64(9), &cfg);
        assert_eq!(a, b);
        assert_eq!(a.planted_capsules, b.planted_capsules);
        let c = generate_benign_room(&mut ChaCha8Rng::seed_from_u64(9), &cfg);
        assert_eq!(
            c,
            generate_benign_room(&mut ChaCha8Rng::seed_from_u64(9), &cfg)
        );
    }

    #[test]
    fn viewer_action_total_matches_poisson_mean() {
        let cfg = ScenarioConfig {
            mean_viewers: 30.0,
            mean_actions_per_viewer: 5.0,
            ..ScenarioConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let total: usize = (0..100)
            .map(|_| {
                generate_benign_room(&mut rng, &cfg)
                    .actions
                    .iter()
                    .filter(|a| a.role == Role::Viewer)
                    .count()
            })
            .sum();
        let mean = total as f64 / 100.0;
        assert!((mean - 150.0).abs() <= 15.0, "mean viewer actions {mean}");
    }

    #[test]
    fn every_fraud_room_has_three_planted_cells() {
        let cfg = ScenarioConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for strength in [0.0, 0.8] {
            let cfg = ScenarioConfig {
                motif_strength: strength,
                ..cfg.clone()
            };
            for _ in 0..500 {
                let room = generate_fraud_room(&mut rng, &cfg);
                let planted = room.planted_capsules.as_ref().unwrap();
                assert!(planted.len() >= 3, "only {} planted cells", planted.len());
                assert!(planted.iter().any(|(u, _)| u == STREAMER_ID));
                // Every planted cell is non-empty.
                for (u, k) in planted {
                    assert!(room
                        .actions
                        .iter()
                        .any(|a| &a.user_id == u && slot_index(&cfg, a.timestamp_s) == *k));
                }
            }
        }
    }

    #[test]
    fn split_sizes_and_stratification() {
        let cfg = ScenarioConfig::default();
        let plan = split_plan(&cfg);
        assert_eq!(plan.map(|p| p.0), [800, 100, 100]);
        let positives: usize = plan.iter().map(|p| p.1).sum();
        assert!((81..=101).contains(&positives));
        for (size, pos) in plan {
            assert!((pos as f64 / size as f64 - cfg.positive_rate).abs() <= 0.01);
        }
    }

    #[test]
    fn generated_rooms_are_valid_records() {
        let cfg = ScenarioConfig {
            num_rooms: 60,
            ..ScenarioConfig::default()
        };
        let data = generate_dataset(&cfg).unwrap();
        let vocab = Vocabulary::standard();
        for room in data.splits().into_iter().flatten() {
            let line = serde_json::to_string(room).unwrap();
            let parsed = crate::room::parse_room(&line, &vocab).unwrap();
            assert_eq!(&parsed, room);
        }
    }

    fn diag_gaussian(xs: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
        let d = xs[0].len();
        let n = xs.len() as f64;
        let mean: Vec<f64> = (0..d)
            .map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n)
            .collect();
        let var = (0..d)
            .map(|j| xs.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n)
            .collect();
        (mean, var)
    }

    fn symmetric_kl(p: &(Vec<f64>, Vec<f64>), q: &(Vec<f64>, Vec<f64>)) -> f64 {
        let kl = |a: &(Vec<f64>, Vec<f64>), b: &(Vec<f64>, Vec<f64>)| {
            (0..a.0.len())
                .map(|j| {
                    0.5 * ((b.1[j] / a.1[j]).ln() + (a.1[j] + (a.0[j] - b.0[j]).powi(2)) / b.1[j]
                        - 1.0)
                })
                .sum::<f64>()
        };
        kl(p, q) + kl(q, p)
    }

    #[test]
    fn planted_feature_divergence_grows_with_strength() {
        let mut divergences = Vec::new();
        for strength in [0.0, 0.5, 1.0] {
            let cfg = ScenarioConfig {
                motif_strength: strength,
                ..ScenarioConfig::default()
            };
            let (mut planted, mut benign) = (Vec::new(), Vec::new());
            let mut rng = ChaCha8Rng::seed_from_u64(33);
            for _ in 0..200 {
                let room = generate_fraud_room(&mut rng, &cfg);
                let cells = room.planted_capsules.clone().unwrap();
                for a in &room.actions {
                    if let Some(x) = &a.text_feature {
                        let key = (a.user_id.clone(), slot_index(&cfg, a.timestamp_s));
                        if cells.contains(&key) {
                            planted.push(x.clone());
                        }
                    }
                }
                let room = generate_benign_room(&mut rng, &cfg);
                benign.extend(room.actions.iter().filter_map(|a| a.text_feature.clone()));
            }
            divergences.push(symmetric_kl(
                &diag_gaussian(&planted),
                &diag_gaussian(&benign),
            ));
        }
        assert!(
            divergences[0] < divergences[1] && divergences[1] < divergences[2],
            "{divergences:?}"
        );
    }
}
