use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{action, Role, RoomRecord};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    /// Observation window from room start, seconds.
    pub window_s: f64,
    pub slot_len_s: f64,
    pub top_viewers: usize,
    pub max_actions: usize,
    pub drop_entry_only_viewers: bool,
    /// Action types that count as merely entering the room.
    pub entry_action_ids: Vec<usize>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            window_s: 1800.0,
            slot_len_s: 100.0,
            top_viewers: 50,
            max_actions: 2096,
            drop_entry_only_viewers: true,
            entry_action_ids: vec![action::ENTRY],
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.window_s) || !positive(self.slot_len_s) {
            return Err(Error::Config(
                "window_s and slot_len_s must be positive".into(),
            ));
        }
        if self.top_viewers == 0 || self.max_actions == 0 {
            return Err(Error::Config(
                "top_viewers and max_actions must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Number of timeslots covering the window; the last may be partial.
    pub fn num_slots(&self) -> usize {
        (self.window_s / self.slot_len_s).ceil() as usize
    }
}

#[derive(Debug)]
struct ViewerStats {
    count: usize,
    first_t: f64,
    only_entry: bool,
}

fn viewer_stats<'a>(
    room: &'a RoomRecord,
    entry: &BTreeSet<usize>,
) -> HashMap<&'a str, ViewerStats> {
    let mut stats: HashMap<&str, ViewerStats> = HashMap::new();
    for a in room.actions.iter().filter(|a| a.role == Role::Viewer) {
        let s = stats.entry(a.user_id.as_str()).or_insert(ViewerStats {
            count: 0,
            first_t: a.timestamp_s,
            only_entry: true,
        });
        s.count += 1;
        s.first_t = s.first_t.min(a.timestamp_s);
        s.only_entry &= entry.contains(&a.action_type_id);
    }
    stats
}

fn drop_entry_only(room: &mut RoomRecord, entry: &BTreeSet<usize>) {
    let inactive: BTreeSet<String> = viewer_stats(room, entry)
        .into_iter()
        .filter(|(_, s)| s.only_entry)
        .map(|(u, _)| u.to_string())
        .collect();
    if !inactive.is_empty() {
        room.actions
            .retain(|a| a.role == Role::Streamer || !inactive.contains(&a.user_id));
    }
}

/// Viewers ordered by descending action count, then earliest first action,
/// then user id.
pub(crate) fn rank_viewers(room: &RoomRecord) -> Vec<String> {
    let stats = viewer_stats(room, &BTreeSet::new());
    let mut ranked: Vec<(&str, &ViewerStats)> = stats.iter().map(|(k, v)| (*k, v)).collect();
    ranked.sort_by(|a, b| {
        b.1.count
            .cmp(&a.1.count)
            .then(a.1.first_t.total_cmp(&b.1.first_t))
            .then(a.0.cmp(b.0))
    });
    ranked.into_iter().map(|(u, _)| u.to_string()).collect()
}

/// Applies the observation window, inactive-viewer filter, top-viewer cap and
/// action-count cap, in that order.
///
/// The streamer is always kept and does not count toward `top_viewers`. The
/// action cap keeps the chronologically earliest events; viewers left with
/// only entry actions after the cap are removed again so that the function
/// is idempotent.
pub fn preprocess_room(room: &RoomRecord, cfg: &PreprocessConfig) -> Result<RoomRecord> {
    let entry: BTreeSet<usize> = cfg.entry_action_ids.iter().copied().collect();
    let mut out = room.clone();
    out.actions.retain(|a| a.timestamp_s <= cfg.window_s);

    if cfg.drop_entry_only_viewers {
        drop_entry_only(&mut out, &entry);
    }

    let ranked = rank_viewers(&out);
    if ranked.len() > cfg.top_viewers {
        let keep: BTreeSet<&str> = ranked[..cfg.top_viewers]
            .iter()
            .map(String::as_str)
            .collect();
        out.actions
            .retain(|a| a.role == Role::Streamer || keep.contains(a.user_id.as_str()));
    }

    out.actions.truncate(cfg.max_actions);
    if cfg.drop_entry_only_viewers {
        drop_entry_only(&mut out, &entry);
    }

    if out.actions.is_empty() {
        return Err(Error::EmptyAfterPreprocessing);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::room::ActionEvent;
    use rand::{Rng, SeedableRng};

    fn act(user: &str, role: Role, t: f64, a: usize) -> ActionEvent {
        ActionEvent {
            user_id: user.into(),
            role,
            timestamp_s: t,
            action_type_id: a,
            text_feature: None,
        }
    }

    fn room(actions: Vec<ActionEvent>) -> RoomRecord {
        let mut actions = actions;
        actions.sort_by(|a, b| a.timestamp_s.total_cmp(&b.timestamp_s));
        RoomRecord {
            room_id: "r".into(),
            label: 0,
            streamer_id: "s".into(),
            actions,
            planted_capsules: None,
        }
    }

    #[test]
    fn window_boundary() {
        let r = room(vec![
            act("s", Role::Streamer, 0.0, action::STREAM_START),
            act("s", Role::Streamer, 1800.0, action::SPEECH),
            act("s", Role::Streamer, 1801.0, action::SPEECH),
        ]);
        let out = preprocess_room(&r, &PreprocessConfig::default()).unwrap();
        assert_eq!(out.num_actions(), 2);
        assert!(out.actions.iter().all(|a| a.timestamp_s <= 1800.0));
    }

    #[test]
    fn entry_only_viewer_removed() {
        let r = room(vec![
            act("s", Role::Streamer, 0.0, action::STREAM_START),
            act("lurker", Role::Viewer, 10.0, action::ENTRY),
            act("fan", Role::Viewer, 11.0, action::ENTRY),
            act("fan", Role::Viewer, 12.0, action::LIKE),
        ]);
        let out = preprocess_room(&r, &PreprocessConfig::default()).unwrap();
        assert!(out.actions.iter().all(|a| a.user_id != "lurker"));
        assert_eq!(out.actions.iter().filter(|a| a.user_id == "fan").count(), 2);

        let keep_all = PreprocessConfig {
            drop_entry_only_viewers: false,
            ..PreprocessConfig::default()
        };
        assert_eq!(preprocess_room(&r, &keep_all).unwrap().num_actions(), 4);
    }

    #[test]
    fn empty_after_preprocessing() {
        let r = room(vec![act("lurker", Role::Viewer, 10.0, action::ENTRY)]);
        assert!(matches!(
            preprocess_room(&r, &PreprocessConfig::default()),
            Err(Error::EmptyAfterPreprocessing)
        ));
    }

    /// Oracle: count per viewer, sort by (-count, first_t, id), slice.
    fn top_viewers_oracle(r: &RoomRecord, k: usize) -> BTreeSet<String> {
        let mut users: Vec<String> = r
            .actions
            .iter()
            .filter(|a| a.role == Role::Viewer)
            .map(|a| a.user_id.clone())
            .collect();
        users.sort();
        users.dedup();
        let mut keyed: Vec<(i64, f64, String)> = users
            .into_iter()
            .map(|u| {
                let mine: Vec<_> = r.actions.iter().filter(|a| a.user_id == u).collect();
                let first = mine
                    .iter()
                    .map(|a| a.timestamp_s)
                    .fold(f64::INFINITY, f64::min);
                (-(mine.len() as i64), first, u)
            })
            .collect();
        keyed.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
        keyed.into_iter().take(k).map(|x| x.2).collect()
    }

    #[test]
    fn top_viewers_matches_sort_and_slice_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let mut actions = vec![act("s", Role::Streamer, 0.0, action::STREAM_START)];
            for v in 0..60 {
                let n = rng.gen_range(1..6);
                for _ in 0..n {
                    // Coarse times so first-action ties actually happen.
                    let t = rng.gen_range(0..30) as f64 * 50.0;
                    actions.push(act(&format!("v{v:02}"), Role::Viewer, t, action::LIKE));
                }
            }
            let r = room(actions);
            let cfg = PreprocessConfig::default();
            let out = preprocess_room(&r, &cfg).unwrap();
            let kept: BTreeSet<String> = out
                .actions
                .iter()
                .filter(|a| a.role == Role::Viewer)
                .map(|a| a.user_id.clone())
                .collect();
            assert_eq!(kept, top_viewers_oracle(&r, 50));
            assert!(out.actions.iter().any(|a| a.role == Role::Streamer));
        }
    }

    #[test]
    fn action_cap_keeps_earliest_and_is_idempotent() {
        let mut actions = vec![act("s", Role::Streamer, 0.0, action::STREAM_START)];
        for i in 0..40 {
            actions.push(act(
                &format!("v{}", i % 7),
                Role::Viewer,
                i as f64 * 10.0,
                if i < 7 {
                    action::ENTRY
                } else {
                    action::COMMENT
                },
            ));
        }
        let r = room(actions);
        let cfg = PreprocessConfig {
            max_actions: 12,
            ..PreprocessConfig::default()
        };
        let once = preprocess_room(&r, &cfg).unwrap();
        assert!(once.num_actions() <= 12);
        let twice = preprocess_room(&once, &cfg).unwrap();
        assert_eq!(once, twice);
        let last = once.actions.last().unwrap().timestamp_s;
        assert!(
            last <= 110.0,
            "cap must keep the earliest events, last t={last}"
        );
    }
}
