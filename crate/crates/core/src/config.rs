//! Flat `key = value` configuration files.
//!
//! One setting per line; `#` starts a comment. A key names a field of
//! [`PreprocessConfig`], [`ModelConfig`] or [`ScenarioConfig`], optionally
//! qualified as `preprocess.`, `model.` or `scenario.`. An unqualified key
//! sets the field in every section that has it (so `slot_len_s` reaches
//! both preprocessing and the generator). Values are JSON literals; bare
//! words are read as strings.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::room::PreprocessConfig;
use crate::synth::ScenarioConfig;

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub scenario: ScenarioConfig,
}

const SECTIONS: [&str; 3] = ["preprocess", "model", "scenario"];

fn to_map<T: Serialize>(v: &T) -> Map<String, Value> {
    match serde_json::to_value(v).expect("config serializes") {
        Value::Object(m) => m,
        _ => unreachable!("configs are structs"),
    }
}

fn from_map<T: DeserializeOwned>(section: &str, m: Map<String, Value>) -> Result<T> {
    serde_json::from_value(Value::Object(m)).map_err(|e| Error::Config(format!("{section}: {e}")))
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl RunConfig {
    /// Applies `key=value` lines on top of `self`.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        let mut maps = [
            to_map(&self.preprocess),
            to_map(&self.model),
            to_map(&self.scenario),
        ];
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, raw) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (key, raw) = (key.trim(), raw.trim());
            let (section, field) = match key.split_once('.') {
                Some((s, f)) if SECTIONS.contains(&s) => (Some(s), f),
                _ => (None, key),
            };
            let value = parse_value(raw);
            let mut hit = false;
            for (name, map) in SECTIONS.iter().zip(maps.iter_mut()) {
                if section.is_some_and(|s| s != *name) {
                    continue;
                }
                if let Some(slot) = map.get_mut(field) {
                    *slot = value.clone();
                    hit = true;
                }
            }
            if !hit {
                return Err(Error::Config(format!(
                    "line {}: unknown key `{key}`",
                    n + 1
                )));
            }
        }
        let [p, m, s] = maps;
        self.preprocess = from_map("preprocess", p)?;
        self.model = from_map("model", m)?;
        self.scenario = from_map("scenario", s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_str(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.preprocess.validate()?;
        self.model.validate()?;
        self.scenario.validate()
    }

    /// Renders every field as `section.key = value`, loadable by
    /// [`RunConfig::apply_str`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, map) in SECTIONS.iter().zip([
            to_map(&self.preprocess),
            to_map(&self.model),
            to_map(&self.scenario),
        ]) {
            for (k, v) in map {
                out.push_str(&format!("{name}.{k} = {v}\n"));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LossReduction;

    #[test]
    fn overrides_and_comments() {
        let mut cfg = RunConfig::default();
        cfg.apply_str("# desk run\nd_k = 32\nmodel.loss_reduction = mean\nslot_len_s=50  # shorter slots\n\nscenario.seed = 11\n")
            .unwrap();
        assert_eq!(cfg.model.d_k, 32);
        assert_eq!(cfg.model.loss_reduction, LossReduction::Mean);
        assert_eq!(cfg.preprocess.slot_len_s, 50.0);
        assert_eq!(cfg.scenario.slot_len_s, 50.0);
        assert_eq!(cfg.scenario.seed, 11);
        assert_eq!(cfg.model.seed, 0);
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_str("d_q = 3").unwrap_err();
        assert!(err.to_string().contains("unknown key `d_q`"), "{err}");
        assert!(cfg.apply_str("d_k = lots").is_err());
        assert!(cfg.apply_str("no equals sign").is_err());
        assert!(cfg.apply_str("model.window_s = 10").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig {
            model: ModelConfig::desk(),
            ..RunConfig::default()
        };
        cfg.scenario.motif_strength = 0.25;
        let mut back = RunConfig::default();
        back.apply_str(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }
}
