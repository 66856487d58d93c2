use std::collections::{BTreeMap, HashMap};

use super::preprocess::rank_viewers;
use super::{PreprocessConfig, Role, RoomRecord};

/// One non-empty user x timeslot cell.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Capsule {
    pub user_index: usize,
    pub slot: usize,
    /// Indices into `RoomRecord::actions`, time-ordered.
    pub actions: Vec<usize>,
}

/// Sparse partition of a room's actions into capsules.
///
/// `capsules` is in row-major order (by user, then by timeslot) and the
/// position in that list is the capsule index.
#[derive(Clone, Debug, PartialEq)]
pub struct CapsuleGrid {
    pub slot_len_s: f64,
    pub num_slots: usize,
    /// Streamer first (when it has actions), then viewers by descending
    /// action count.
    pub users: Vec<String>,
    pub streamer_index: Option<usize>,
    pub capsules: Vec<Capsule>,
    index: BTreeMap<(usize, usize), usize>,
}

impl CapsuleGrid {
    pub fn num_capsules(&self) -> usize {
        self.capsules.len()
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    /// Capsule index of a cell, if the cell is non-empty.
    pub fn capsule_at(&self, user_index: usize, slot: usize) -> Option<usize> {
        self.index.get(&(user_index, slot)).copied()
    }

    pub fn user_index(&self, user_id: &str) -> Option<usize> {
        self.users.iter().position(|u| u == user_id)
    }

    pub fn is_streamer_capsule(&self, capsule: usize) -> bool {
        self.streamer_index == Some(self.capsules[capsule].user_index)
    }

    /// Capsule indices of each user, in slot order.
    pub fn capsules_by_user(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.users.len()];
        for (i, c) in self.capsules.iter().enumerate() {
            out[c.user_index].push(i);
        }
        out
    }

    /// `(slot, capsule indices)` for every non-empty slot, ascending.
    pub fn capsules_by_slot(&self) -> Vec<(usize, Vec<usize>)> {
        let mut by_slot: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, c) in self.capsules.iter().enumerate() {
            by_slot.entry(c.slot).or_default().push(i);
        }
        by_slot.into_iter().collect()
    }

    /// `(user_id, slot)` key of a capsule.
    pub fn key(&self, capsule: usize) -> (&str, usize) {
        let c = &self.capsules[capsule];
        (self.users[c.user_index].as_str(), c.slot)
    }
}

/// Slot of a timestamp. Timestamps at or past the last slot boundary (only
/// `t == window_s` after preprocessing) fall into the last slot.
pub fn slot_of(t: f64, slot_len_s: f64, num_slots: usize) -> usize {
    ((t / slot_len_s).floor() as usize).min(num_slots.saturating_sub(1))
}

pub fn build_capsule_grid(room: &RoomRecord, cfg: &PreprocessConfig) -> CapsuleGrid {
    let num_slots = cfg.num_slots();
    let has_streamer = room.actions.iter().any(|a| a.role == Role::Streamer);
    let mut users = Vec::new();
    if has_streamer {
        users.push(room.streamer_id.clone());
    }
    users.extend(rank_viewers(room));
    let position: HashMap<&str, usize> = users
        .iter()
        .enumerate()
        .map(|(i, u)| (u.as_str(), i))
        .collect();

    let mut cells: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, a) in room.actions.iter().enumerate() {
        let u = position[a.user_id.as_str()];
        cells
            .entry((u, slot_of(a.timestamp_s, cfg.slot_len_s, num_slots)))
            .or_default()
            .push(i);
    }

    let mut capsules = Vec::with_capacity(cells.len());
    let mut index = BTreeMap::new();
    for ((user_index, slot), actions) in cells {
        index.insert((user_index, slot), capsules.len());
        capsules.push(Capsule {
            user_index,
            slot,
            actions,
        });
    }
    CapsuleGrid {
        slot_len_s: cfg.slot_len_s,
        num_slots,
        streamer_index: has_streamer.then_some(0),
        users,
        capsules,
        index,
    }
}
