//! Flat key-value run configuration (TOML syntax, no tables).
//!
//! Dataset keys (`suite`, `num_scenes`, `data_seed` and the scene overrides in
//! [`SCENE_KEYS`]) sit next to every [`TrainConfig`] field:
//!
//! ```toml
//! suite = "hard"
//! num_scenes = 8
//! data_seed = 7
//! allow_overlap = true
//! base_lr = 0.05
//! tau_d = 0.7
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::scene::SceneConfig;
use crate::trainer::TrainConfig;

/// Scene-generator fields that may be overridden individually.
pub const SCENE_KEYS: &[&str] = &[
    "height",
    "width",
    "min_objects",
    "max_objects",
    "allow_overlap",
    "color_distractors",
    "texture_noise",
    "min_radius",
    "max_radius",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Easy,
    Hard,
}

impl Suite {
    pub fn scene_config(self) -> SceneConfig {
        match self {
            Suite::Easy => SceneConfig::easy(),
            Suite::Hard => SceneConfig::hard(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub suite: Suite,
    pub num_scenes: usize,
    pub data_seed: u64,
    pub scene: SceneConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            suite: Suite::Easy,
            num_scenes: 20,
            data_seed: 7,
            scene: SceneConfig::easy(),
            train: TrainConfig::default(),
        }
    }
}

/// Parses one `key=value` override. The value is read as a TOML value and falls
/// back to a bare string (`suite=hard`).
pub fn parse_override(text: &str) -> Result<(String, Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{text}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override `{text}` has an empty key")));
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    };
    Ok((key.to_string(), value))
}

impl RunConfig {
    pub fn from_table(mut table: Table) -> Result<Self> {
        if let Some((k, _)) = table.iter().find(|(_, v)| v.is_table()) {
            return Err(Error::Config(format!("`{k}`: tables are not allowed, keys are flat")));
        }
        let suite = match table.remove("suite") {
            Some(v) => v
                .try_into::<Suite>()
                .map_err(|e| Error::Config(format!("suite: {e}")))?,
            None => Suite::Easy,
        };
        let num_scenes = take_int(&mut table, "num_scenes")?.unwrap_or(20) as usize;
        let data_seed = take_int(&mut table, "data_seed")?.unwrap_or(7) as u64;

        let mut scene_table = Table::try_from(suite.scene_config())
            .map_err(|e| Error::Config(format!("scene preset: {e}")))?;
        for key in SCENE_KEYS {
            if let Some(v) = table.remove(*key) {
                scene_table.insert(key.to_string(), v);
            }
        }
        let scene: SceneConfig = Value::Table(scene_table)
            .try_into()
            .map_err(|e| Error::Config(format!("scene settings: {e}")))?;
        scene.validate()?;

        let train: TrainConfig = Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(format!("training settings: {e}")))?;
        train.validate()?;
        Ok(RunConfig {
            suite,
            num_scenes,
            data_seed,
            scene,
            train,
        })
    }

    /// Reads `path` (if any), applies `overrides` on top and validates the result.
    pub fn load(path: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        for (k, v) in overrides {
            table.insert(k.clone(), v.clone());
        }
        Self::from_table(table)
    }

    /// Every resolved key in one flat JSON object, for run manifests.
    pub fn resolved(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        map.insert("suite".into(), serde_json::to_value(self.suite).expect("plain enum"));
        map.insert("num_scenes".into(), self.num_scenes.into());
        map.insert("data_seed".into(), self.data_seed.into());
        let scene = serde_json::to_value(&self.scene).expect("scene config serialises");
        for key in SCENE_KEYS {
            map.insert((*key).into(), scene[*key].clone());
        }
        if let serde_json::Value::Object(train) = serde_json::to_value(&self.train).expect("train config serialises") {
            map.extend(train);
        }
        serde_json::Value::Object(map)
    }
}

fn take_int(table: &mut Table, key: &str) -> Result<Option<i64>> {
    match table.remove(key) {
        None => Ok(None),
        Some(Value::Integer(i)) if i >= 0 => Ok(Some(i)),
        Some(v) => Err(Error::Config(format!("{key} must be a non-negative integer, got {v}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(text: &str) -> Result<RunConfig> {
        RunConfig::from_table(text.parse::<Table>().unwrap())
    }

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(load("").unwrap(), RunConfig::default());
    }

    #[test]
    fn flat_keys_reach_both_halves() {
        let c = load("suite = \"hard\"\nnum_scenes = 4\nallow_overlap = false\ntau_d = 0.7\ndecay_steps = [250]").unwrap();
        assert_eq!(c.suite, Suite::Hard);
        assert_eq!(c.num_scenes, 4);
        assert!(!c.scene.allow_overlap);
        assert_eq!(c.scene.texture_noise, SceneConfig::hard().texture_noise);
        assert_eq!(c.train.tau_d, 0.7);
        assert_eq!(c.train.decay_steps, vec![250]);
    }

    #[test]
    fn typos_and_bad_values_are_rejected() {
        assert!(matches!(load("tau_dd = 0.5"), Err(Error::Config(_))));
        assert!(matches!(load("base_lr = -1.0"), Err(Error::Config(_))));
        assert!(matches!(load("suite = \"medium\""), Err(Error::Config(_))));
        assert!(matches!(load("num_scenes = -3"), Err(Error::Config(_))));
        assert!(matches!(load("[train]\nbase_lr = 0.1"), Err(Error::Config(_))));
        assert!(matches!(load("height = 2"), Err(Error::Config(_))));
    }

    #[test]
    fn overrides_parse_as_toml_with_string_fallback() {
        assert_eq!(parse_override("gamma=2").unwrap(), ("gamma".into(), Value::Integer(2)));
        assert_eq!(parse_override("tau_d = 0.3").unwrap().1, Value::Float(0.3));
        assert_eq!(parse_override("suite=hard").unwrap().1, Value::String("hard".into()));
        assert_eq!(parse_override("depth_gate=false").unwrap().1, Value::Boolean(false));
        assert!(parse_override("novalue").is_err());
        let c = RunConfig::load(None, &[parse_override("gamma=2").unwrap(), parse_override("suite=hard").unwrap()]).unwrap();
        assert_eq!(c.train.gamma, 2.0);
        assert_eq!(c.suite, Suite::Hard);
    }

    #[test]
    fn resolved_echo_is_flat_and_complete() {
        let r = RunConfig::default().resolved();
        let obj = r.as_object().unwrap();
        assert_eq!(obj["tau_m"], 0.8);
        assert_eq!(obj["height"], 96);
        assert!(obj.values().all(|v| !v.is_object()));
        let round: Table = toml::from_str(&toml::to_string(&r).unwrap()).unwrap();
        assert_eq!(RunConfig::from_table(round).unwrap(), RunConfig::default());
    }
}
