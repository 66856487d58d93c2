use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::Matrix;
use crate::room::{build_capsule_grid, preprocess_room, CapsuleGrid, PreprocessConfig, RoomRecord};

use super::reasoner::RelationMasks;

/// Everything the models need from one room, computed once up front.
#[derive(Clone, Debug)]
pub struct PreparedRoom {
    pub room_id: String,
    pub label: u8,
    /// The preprocessed record the grid was built from.
    pub record: RoomRecord,
    pub grid: CapsuleGrid,
    pub action_ids: Vec<usize>,
    /// Text features of the actions that have one, stacked in action order.
    pub text: Option<Matrix>,
    /// Per action: 0 for "no text", `j + 1` for row `j` of `text`.
    pub text_index: Vec<usize>,
    pub masks: RelationMasks,
    /// Each capsule's action indices, time-ordered.
    pub capsule_actions: Vec<Vec<usize>>,
    /// Each user's capsule indices in slot order.
    pub user_capsules: Vec<Vec<usize>>,
    /// `(slot, capsule indices)` for nonempty slots, ascending.
    pub slot_capsules: Vec<(usize, Vec<usize>)>,
    /// Capsule indices of planted cells that survived preprocessing.
    pub planted: Option<Vec<usize>>,
}

impl PreparedRoom {
    pub fn new(room: &RoomRecord, cfg: &PreprocessConfig, d_text: usize) -> Result<Self> {
        let record = preprocess_room(room, cfg)?;
        Self::from_preprocessed(record, cfg, d_text)
    }

    /// Builds from a record that is already preprocessed.
    pub fn from_preprocessed(
        record: RoomRecord,
        cfg: &PreprocessConfig,
        d_text: usize,
    ) -> Result<Self> {
        if record.actions.is_empty() {
            return Err(Error::EmptyAfterPreprocessing);
        }
        let grid = build_capsule_grid(&record, cfg);
        let mut rows = Vec::new();
        let mut text_index = Vec::with_capacity(record.actions.len());
        for (i, a) in record.actions.iter().enumerate() {
            match &a.text_feature {
                Some(x) if x.len() != d_text => {
                    return Err(Error::Room {
                        room_id: record.room_id.clone(),
                        message: format!(
                            "feature dimension mismatch: action {i} has {} text dims, expected {d_text}",
                            x.len()
                        ),
                    })
                }
                Some(x) => {
                    rows.push(x.clone());
                    text_index.push(rows.len());
                }
                None => text_index.push(0),
            }
        }
        let text = (!rows.is_empty())
            .then(|| Matrix::from_shape_fn((rows.len(), d_text), |(r, c)| rows[r][c]));

        let planted = record.planted_capsules.as_ref().map(|cells| {
            let lookup: BTreeMap<(&str, usize), usize> =
                (0..grid.num_capsules()).map(|i| (grid.key(i), i)).collect();
            let mut found: Vec<usize> = cells
                .iter()
                .filter_map(|(u, k)| lookup.get(&(u.as_str(), *k)).copied())
                .collect();
            found.sort_unstable();
            found.dedup();
            found
        });

        Ok(Self {
            room_id: record.room_id.clone(),
            label: record.label,
            action_ids: record.actions.iter().map(|a| a.action_type_id).collect(),
            text,
            text_index,
            masks: RelationMasks::from_grid(&grid),
            capsule_actions: grid.capsules.iter().map(|c| c.actions.clone()).collect(),
            user_capsules: grid.capsules_by_user(),
            slot_capsules: grid.capsules_by_slot(),
            planted,
            grid,
            record,
        })
    }

    pub fn num_actions(&self) -> usize {
        self.action_ids.len()
    }

    pub fn num_capsules(&self) -> usize {
        self.capsule_actions.len()
    }

    /// `U x 1` indicator of the streamer row among users.
    pub fn streamer_indicator(&self) -> Matrix {
        let mut m = Matrix::zeros((self.grid.num_users(), 1));
        if let Some(s) = self.grid.streamer_index {
            m[[s, 0]] = 1.0;
        }
        m
    }

    /// `S x N^c` additive mask: 0 where the capsule is in the slot, -inf
    /// elsewhere.
    pub fn slot_mask(&self) -> Matrix {
        let mut m = Matrix::from_elem(
            (self.slot_capsules.len(), self.num_capsules()),
            f64::NEG_INFINITY,
        );
        for (row, (_, members)) in self.slot_capsules.iter().enumerate() {
            for &c in members {
                m[[row, c]] = 0.0;
            }
        }
        m
    }
}

/// Prepares a corpus, skipping rooms that end up empty. Returns the rooms
/// and the ids of the skipped ones.
pub fn prepare_corpus(
    rooms: &[RoomRecord],
    cfg: &PreprocessConfig,
    d_text: usize,
) -> Result<(Vec<PreparedRoom>, Vec<String>)> {
    let mut out = Vec::with_capacity(rooms.len());
    let mut skipped = Vec::new();
    for room in rooms {
        match PreparedRoom::new(room, cfg, d_text) {
            Ok(p) => out.push(p),
            Err(Error::EmptyAfterPreprocessing) => skipped.push(room.room_id.clone()),
            Err(e @ Error::Room { .. }) => return Err(e),
            Err(e) => {
                return Err(Error::Room {
                    room_id: room.room_id.clone(),
                    message: e.to_string(),
                })
            }
        }
    }
    Ok((out, skipped))
}
