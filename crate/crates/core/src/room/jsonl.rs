use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{Role, RoomRecord, Vocabulary};
use crate::error::{Error, Result};

/// Parses and validates one JSONL room line.
///
/// On success the actions are stably sorted by timestamp.
pub fn parse_room(line: &str, vocab: &Vocabulary) -> Result<RoomRecord> {
    let mut de = serde_json::Deserializer::from_str(line);
    let mut room: RoomRecord = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        Error::schema(path, e.into_inner().to_string())
    })?;
    de.end().map_err(|e| Error::schema(".", e.to_string()))?;
    validate(&room, vocab)?;
    room.actions
        .sort_by(|a, b| a.timestamp_s.total_cmp(&b.timestamp_s));
    Ok(room)
}

fn validate(room: &RoomRecord, vocab: &Vocabulary) -> Result<()> {
    if room.label > 1 {
        return Err(Error::schema("label", "expected 0 or 1"));
    }
    let mut streamers = BTreeSet::new();
    for (i, a) in room.actions.iter().enumerate() {
        if !a.timestamp_s.is_finite() || a.timestamp_s < 0.0 {
            return Err(Error::schema(
                format!("actions[{i}].t"),
                format!(
                    "timestamp must be finite and non-negative, got {}",
                    a.timestamp_s
                ),
            ));
        }
        let Some(role) = vocab.role_of(a.action_type_id) else {
            return Err(Error::schema(
                format!("actions[{i}].a"),
                format!("unknown action_type_id {}", a.action_type_id),
            ));
        };
        if role != a.role {
            return Err(Error::schema(
                format!("actions[{i}].a"),
                format!(
                    "action_type_id {} is not a {:?} action",
                    a.action_type_id, a.role
                ),
            ));
        }
        if let Some(x) = &a.text_feature {
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::schema(
                    format!("actions[{i}].x"),
                    "non-finite text feature",
                ));
            }
        }
        match a.role {
            Role::Streamer => {
                streamers.insert(a.user_id.as_str());
            }
            Role::Viewer if a.user_id == room.streamer_id => {
                return Err(Error::schema(
                    format!("actions[{i}].role"),
                    "the streamer cannot act as a viewer",
                ));
            }
            Role::Viewer => {}
        }
    }
    if streamers.len() > 1 {
        return Err(Error::schema("actions", "multiple streamers"));
    }
    if let Some(&s) = streamers.iter().next() {
        if s != room.streamer_id {
            return Err(Error::schema(
                "streamer_id",
                format!(
                    "streamer_id `{}` does not match streamer actions by `{s}`",
                    room.streamer_id
                ),
            ));
        }
    }
    Ok(())
}

/// Reads a JSONL corpus. Blank lines are skipped; errors carry the line
/// number.
pub fn read_jsonl(path: &Path, vocab: &Vocabulary) -> Result<Vec<RoomRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rooms = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let room = parse_room(&line, vocab).map_err(|e| match e {
            Error::Schema { path, message } => Error::Schema {
                path: format!("line {}: {path}", n + 1),
                message,
            },
            other => other,
        })?;
        rooms.push(room);
    }
    Ok(rooms)
}

pub fn write_jsonl(path: &Path, rooms: &[RoomRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for room in rooms {
        serde_json::to_writer(&mut out, room)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::standard()
    }

    #[test]
    fn minimal_room() {
        let line = r#"{"room_id":"r1","label":0,"streamer_id":"s","actions":[{"user_id":"s","role":"streamer","t":0.0,"a":10,"x":null}],"planted_capsules":null}"#;
        let room = parse_room(line, &vocab()).unwrap();
        assert_eq!(room.num_actions(), 1);
        assert_eq!(room.label, 0);
        assert!(room.planted_capsules.is_none());
    }

    #[test]
    fn planted_capsules_are_optional() {
        let line = r#"{"room_id":"r","label":1,"streamer_id":"s","actions":[],"planted_capsules":[["s",3]]}"#;
        let room = parse_room(line, &vocab()).unwrap();
        assert_eq!(room.planted_capsules, Some(vec![("s".to_string(), 3)]));
        let line = r#"{"room_id":"r","label":1,"streamer_id":"s","actions":[]}"#;
        assert!(parse_room(line, &vocab())
            .unwrap()
            .planted_capsules
            .is_none());
    }

    #[test]
    fn multiple_streamers_rejected() {
        let line = r#"{"room_id":"r","label":0,"streamer_id":"s","actions":[
            {"user_id":"s","role":"streamer","t":0,"a":10,"x":null},
            {"user_id":"s2","role":"streamer","t":1,"a":11,"x":[0.5]}]}"#
            .replace('\n', "");
        let err = parse_room(&line, &vocab()).unwrap_err();
        assert!(err.to_string().contains("multiple streamers"), "{err}");
    }

    #[test]
    fn unsorted_actions_are_stably_sorted() {
        let line = r#"{"room_id":"r","label":0,"streamer_id":"s","actions":[
            {"user_id":"v1","role":"viewer","t":5,"a":1,"x":[1.0]},
            {"user_id":"v2","role":"viewer","t":2,"a":6,"x":null},
            {"user_id":"v3","role":"viewer","t":5,"a":6,"x":null},
            {"user_id":"s","role":"streamer","t":0,"a":10,"x":null}]}"#
            .replace('\n', "");
        let room = parse_room(&line, &vocab()).unwrap();
        let order: Vec<_> = room.actions.iter().map(|a| a.user_id.as_str()).collect();
        assert_eq!(order, ["s", "v2", "v1", "v3"]);
    }

    #[test]
    fn errors_carry_field_paths() {
        let missing = r#"{"room_id":"r","label":0,"streamer_id":"s","actions":[{"user_id":"v","role":"viewer","t":1}]}"#;
        let err = parse_room(missing, &vocab()).unwrap_err();
        assert!(err.to_string().contains("actions[0]"), "{err}");

        let unknown = r#"{"room_id":"r","label":0,"streamer_id":"s","actions":[{"user_id":"v","role":"viewer","t":1,"a":99,"x":null}]}"#;
        let err = parse_room(unknown, &vocab()).unwrap_err();
        assert!(err.to_string().contains("actions[0].a"), "{err}");
        assert!(err.to_string().contains("unknown action_type_id"), "{err}");

        let wrong_role = r#"{"room_id":"r","label":0,"streamer_id":"s","actions":[{"user_id":"v","role":"viewer","t":1,"a":11,"x":null}]}"#;
        assert!(parse_room(wrong_role, &vocab()).is_err());

        let no_label = r#"{"room_id":"r","streamer_id":"s","actions":[]}"#;
        let err = parse_room(no_label, &vocab()).unwrap_err();
        assert!(err.to_string().contains("label"), "{err}");

        let negative_t = r#"{"room_id":"r","label":0,"streamer_id":"s","actions":[{"user_id":"v","role":"viewer","t":-1,"a":1,"x":null}]}"#;
        let err = parse_room(negative_t, &vocab()).unwrap_err();
        assert!(err.to_string().contains("actions[0].t"), "{err}");
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rooms.jsonl");
        let line = r#"{"room_id":"r","label":1,"streamer_id":"s","actions":[{"user_id":"s","role":"streamer","t":0.25,"a":11,"x":[0.1,-2.5]}],"planted_capsules":[["s",0]]}"#;
        let room = parse_room(line, &vocab()).unwrap();
        write_jsonl(&path, &[room.clone(), room.clone()]).unwrap();
        let back = read_jsonl(&path, &vocab()).unwrap();
        assert_eq!(back, vec![room.clone(), room]);
        assert_eq!(
            std::fs::read_to_string(&path)
                .unwrap()
                .lines()
                .next()
                .unwrap(),
            line
        );
    }
}
