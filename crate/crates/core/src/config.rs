//! Flat `key = value` run configuration with a canonical echo.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use thiserror::Error;

use crate::data::{CdConfig, SceneConfig};
use crate::model::Preset;
use crate::train::{fnv1a64, TrainConfig};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{0}` given twice")]
    Duplicate(String),
    #[error("bad value for `{key}`: `{value}`")]
    Value { key: String, value: String },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

pub const KEYS: [&str; 19] = [
    "batch",
    "epochs",
    "lr0",
    "max_added",
    "max_buildings",
    "min_buildings",
    "min_side",
    "momentum",
    "n_points",
    "noise_amplitude",
    "noise_cell",
    "num",
    "poly_power",
    "preset",
    "remove_prob",
    "retry_limit",
    "seed",
    "size",
    "weight_decay",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub cd: CdConfig,
    /// Number of synthesized scenes or pairs.
    pub num: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_preset(Preset::Desk)
    }
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| ConfigError::Value {
        key: key.into(),
        value: v.into(),
    })
}

impl RunConfig {
    pub fn for_preset(p: Preset) -> Self {
        Self {
            train: TrainConfig::for_preset(p),
            cd: CdConfig::default(),
            num: 64,
        }
    }

    /// Preset defaults first, then every other key overrides them.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                msg: format!("expected key = value, got `{line}`"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(ConfigError::UnknownKey(k.into()));
            }
            if pairs.insert(k.to_string(), v.to_string()).is_some() {
                return Err(ConfigError::Duplicate(k.into()));
            }
        }
        let preset = match pairs.get("preset") {
            Some(v) => Preset::parse(v).ok_or_else(|| ConfigError::Value {
                key: "preset".into(),
                value: v.clone(),
            })?,
            None => Preset::Desk,
        };
        let mut cfg = Self::for_preset(preset);
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        let s = &mut self.cd.scene;
        match key {
            "batch" => t.batch = value(key, v)?,
            "epochs" => t.epochs = value(key, v)?,
            "lr0" => t.lr0 = value(key, v)?,
            "max_added" => self.cd.max_added = value(key, v)?,
            "max_buildings" => s.max_buildings = value(key, v)?,
            "min_buildings" => s.min_buildings = value(key, v)?,
            "min_side" => s.min_side = value(key, v)?,
            "momentum" => t.momentum = value(key, v)?,
            "n_points" => t.n_points = value(key, v)?,
            "noise_amplitude" => s.noise_amplitude = value(key, v)?,
            "noise_cell" => s.noise_cell = value(key, v)?,
            "num" => self.num = value(key, v)?,
            "poly_power" => t.poly_power = value(key, v)?,
            "preset" => {
                t.preset = Preset::parse(v).ok_or_else(|| ConfigError::Value {
                    key: key.into(),
                    value: v.into(),
                })?
            }
            "remove_prob" => self.cd.remove_prob = value(key, v)?,
            "retry_limit" => t.retry_limit = value(key, v)?,
            "seed" => t.seed = value(key, v)?,
            "size" => s.size = value(key, v)?,
            "weight_decay" => t.weight_decay = value(key, v)?,
            other => return Err(ConfigError::UnknownKey(other.into())),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let s: &SceneConfig = &self.cd.scene;
        fn f(v: impl Display) -> String {
            v.to_string()
        }
        vec![
            ("batch", f(t.batch)),
            ("epochs", f(t.epochs)),
            ("lr0", f(t.lr0)),
            ("max_added", f(self.cd.max_added)),
            ("max_buildings", f(s.max_buildings)),
            ("min_buildings", f(s.min_buildings)),
            ("min_side", f(s.min_side)),
            ("momentum", f(t.momentum)),
            ("n_points", f(t.n_points)),
            ("noise_amplitude", f(s.noise_amplitude)),
            ("noise_cell", f(s.noise_cell)),
            ("num", f(self.num)),
            ("poly_power", f(t.poly_power)),
            ("preset", f(t.preset.name())),
            ("remove_prob", f(self.cd.remove_prob)),
            ("retry_limit", f(t.retry_limit)),
            ("seed", f(t.seed)),
            ("size", f(s.size)),
            ("weight_decay", f(t.weight_decay)),
        ]
    }

    /// Every key, sorted, one `key = value` per line.
    pub fn echo(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn hash(&self) -> u64 {
        fnv1a64(self.echo().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_are_sorted_and_echoed() {
        let mut sorted = KEYS.to_vec();
        sorted.sort();
        assert_eq!(sorted, KEYS);
        let echo = RunConfig::default().echo();
        let keys: Vec<&str> = echo.lines().map(|l| l.split(" = ").next().unwrap()).collect();
        assert_eq!(keys, KEYS);
    }

    #[test]
    fn echo_round_trips() {
        let c = RunConfig::parse("preset = paper\nlr0=0.02 # faster\n\n# note\nsize = 32\n").unwrap();
        assert_eq!(c.train.epochs, 200);
        assert_eq!(c.train.lr0, 0.02);
        assert_eq!(c.cd.scene.size, 32);
        let again = RunConfig::parse(&c.echo()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.hash(), c.hash());
    }

    #[test]
    fn preset_applies_before_overrides_regardless_of_order() {
        let a = RunConfig::parse("epochs = 3\npreset = paper\n").unwrap();
        assert_eq!((a.train.epochs, a.train.batch), (3, 64));
    }

    #[test]
    fn errors() {
        assert_eq!(
            RunConfig::parse("lr = 1"),
            Err(ConfigError::UnknownKey("lr".into()))
        );
        assert_eq!(
            RunConfig::parse("seed = 1\nseed = 2"),
            Err(ConfigError::Duplicate("seed".into()))
        );
        assert!(matches!(
            RunConfig::parse("seed"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            RunConfig::parse("epochs = -1"),
            Err(ConfigError::Value { .. })
        ));
        assert!(matches!(
            RunConfig::parse("preset = huge"),
            Err(ConfigError::Value { .. })
        ));
    }
}
