//! Room-level domain types: actions, rooms, the action vocabulary, JSONL
//! ingestion, preprocessing and the user x timeslot capsule grid.

mod grid;
mod jsonl;
mod preprocess;

pub use grid::{build_capsule_grid, Capsule, CapsuleGrid};
pub use jsonl::{parse_room, read_jsonl, write_jsonl};
pub use preprocess::{preprocess_room, PreprocessConfig};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Streamer,
    Viewer,
}

/// Action type ids of the standard vocabulary.
pub mod action {
    pub const ENTRY: usize = 0;
    pub const COMMENT: usize = 1;
    pub const HIGHLIGHT: usize = 2;
    pub const LEADERBOARD: usize = 3;
    pub const DANMAKU: usize = 4;
    pub const GIFT: usize = 5;
    pub const LIKE: usize = 6;
    pub const SHARE: usize = 7;
    pub const CO_STREAM: usize = 8;
    pub const GROUP_JOIN: usize = 9;
    pub const STREAM_START: usize = 10;
    pub const SPEECH: usize = 11;
    pub const OCR_FRAME: usize = 12;
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActionSpec {
    pub name: &'static str,
    pub role: Role,
    /// Whether actions of this type normally carry a text feature.
    pub has_text: bool,
}

/// Action types partitioned into streamer-side and viewer-side subsets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    specs: Vec<ActionSpec>,
}

impl Vocabulary {
    /// Ten viewer actions followed by three streamer actions.
    pub fn standard() -> Self {
        use Role::*;
        let spec = |name, role, has_text| ActionSpec {
            name,
            role,
            has_text,
        };
        Self {
            specs: vec![
                spec("entry", Viewer, false),
                spec("comment", Viewer, true),
                spec("highlight", Viewer, true),
                spec("leaderboard", Viewer, false),
                spec("danmaku", Viewer, true),
                spec("gift", Viewer, false),
                spec("like", Viewer, false),
                spec("share", Viewer, false),
                spec("co_stream", Viewer, false),
                spec("group_join", Viewer, false),
                spec("stream_start", Streamer, false),
                spec("speech", Streamer, true),
                spec("ocr_frame", Streamer, true),
            ],
        }
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&ActionSpec> {
        self.specs.get(id)
    }

    pub fn role_of(&self, id: usize) -> Option<Role> {
        self.get(id).map(|s| s.role)
    }

    pub fn ids_for(&self, role: Role) -> impl Iterator<Item = usize> + '_ {
        self.specs
            .iter()
            .enumerate()
            .filter(move |(_, s)| s.role == role)
            .map(|(i, _)| i)
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::standard()
    }
}

/// One role-based action `(user, time, type, text)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionEvent {
    pub user_id: String,
    pub role: Role,
    #[serde(rename = "t")]
    pub timestamp_s: f64,
    #[serde(rename = "a")]
    pub action_type_id: usize,
    #[serde(rename = "x")]
    pub text_feature: Option<Vec<f64>>,
}

/// A labeled room with its time-ordered actions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoomRecord {
    pub room_id: String,
    pub label: u8,
    pub streamer_id: String,
    pub actions: Vec<ActionEvent>,
    /// Ground-truth risky `(user_id, slot_index)` cells; synthetic data only.
    #[serde(default)]
    pub planted_capsules: Option<Vec<(String, usize)>>,
}

impl RoomRecord {
    pub fn num_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn is_positive(&self) -> bool {
        self.label == 1
    }
}
