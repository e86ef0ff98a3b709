//! Flat `key = value` run configuration.
//!
//! Every field of [`DecoderConfig`], [`SynthConfig`], [`TrainConfig`] and
//! [`EvalConfig`] is addressable. A bare key sets the field in every section
//! that has it (`category_count` reaches both the generator and the model);
//! `section.key` targets one section. Lines starting with `#` are comments.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::decoder::DecoderConfig;
use crate::eval::EvalConfig;
use crate::scene::SynthConfig;
use crate::training::TrainConfig;
use crate::{Error, Result};

pub const SECTIONS: [&str; 4] = ["decoder", "synth", "train", "eval"];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub decoder: DecoderConfig,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Applies every `key = value` line of `text`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("override `{assignment}` is not `key=value`")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (section, field) = match key.split_once('.') {
            Some((s, f)) if SECTIONS.contains(&s) => (Some(s), f),
            Some(_) => return Err(Error::Config(format!("unknown section in `{key}`"))),
            None => (None, key),
        };
        let Value::Object(mut root) = serde_json::to_value(&*self)? else {
            unreachable!("struct serializes to an object")
        };
        let mut hit = false;
        for name in SECTIONS {
            if section.is_some_and(|s| s != name) {
                continue;
            }
            let Some(Value::Object(fields)) = root.get_mut(name) else {
                unreachable!("every section is an object")
            };
            if let Some(slot) = fields.get_mut(field) {
                *slot = parse_like(slot, value).map_err(|reason| Error::validation(key, reason))?;
                hit = true;
            }
        }
        if !hit {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        *self = serde_json::from_value(Value::Object(root))
            .map_err(|e| Error::validation(key, e.to_string()))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.decoder.validate()?;
        self.synth.validate()?;
        self.train.validate()?;
        self.eval.validate()
    }

    /// Every addressable key with its current value, one `section.key = value`
    /// line each.
    pub fn to_text(&self) -> String {
        let Value::Object(root) = serde_json::to_value(self).expect("plain fields serialize") else {
            unreachable!()
        };
        let mut out = String::new();
        for name in SECTIONS {
            if let Some(Value::Object(fields)) = root.get(name) {
                write_section(&mut out, name, fields);
            }
        }
        out
    }
}

fn write_section(out: &mut String, name: &str, fields: &Map<String, Value>) {
    for (k, v) in fields {
        let v = match v {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        out.push_str(&format!("{name}.{k} = {v}\n"));
    }
}

/// Parses `text` as the same JSON kind as `current`.
fn parse_like(current: &Value, text: &str) -> std::result::Result<Value, String> {
    match current {
        Value::Bool(_) => text
            .parse::<bool>()
            .map(Value::Bool)
            .map_err(|_| format!("expected true or false, got `{text}`")),
        Value::Number(n) if n.is_u64() => text
            .parse::<u64>()
            .map(Value::from)
            .map_err(|_| format!("expected a non-negative integer, got `{text}`")),
        Value::Number(_) => match text.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(Value::from(v)),
            _ => Err(format!("expected a finite number, got `{text}`")),
        },
        Value::String(_) => Ok(Value::String(text.trim_matches('"').to_string())),
        other => Err(format!("field of kind {other} is not settable")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contrastive::PairWeighting;

    #[test]
    fn parses_file_text() {
        let mut cfg = RunConfig::default();
        cfg.apply_text(
            "# desk run\nqueries = 6\n\nbase_lr = 5e-4   # faster\nuse_rsa = false\npair_weighting = balanced\n",
        )
        .unwrap();
        assert_eq!(cfg.decoder.queries, 6);
        assert_eq!(cfg.train.base_lr, 5e-4);
        assert!(!cfg.decoder.use_rsa);
        assert_eq!(cfg.train.pair_weighting, PairWeighting::Balanced);
    }

    #[test]
    fn bare_keys_reach_every_section() {
        let mut cfg = RunConfig::default();
        cfg.set("category_count", "7").unwrap();
        assert_eq!((cfg.decoder.category_count, cfg.synth.category_count), (7, 7));
        cfg.set("synth.category_count", "3").unwrap();
        assert_eq!((cfg.decoder.category_count, cfg.synth.category_count), (7, 3));
        cfg.set("eval.mask_threshold", "0.4").unwrap();
        assert_eq!(cfg.eval.mask_threshold, 0.4);
        assert_eq!(cfg.decoder.mask_threshold, 0.5);
    }

    #[test]
    fn overrides_apply_after_file() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("epochs = 10").unwrap();
        cfg.apply_override("epochs=3").unwrap();
        assert_eq!(cfg.train.epochs, 3);
    }

    #[test]
    fn errors_are_classified() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.set("no_such_key", "1"), Err(Error::Config(_))));
        assert!(matches!(cfg.set("model.queries", "1"), Err(Error::Config(_))));
        assert!(matches!(cfg.set("queries", "-1"), Err(Error::Validation { .. })));
        assert!(matches!(cfg.set("pair_weighting", "odd"), Err(Error::Validation { .. })));
        assert!(matches!(cfg.apply_text("queries 4"), Err(Error::Parse(_))));
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("width", "16").unwrap();
        cfg.set("augment", "false").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }
}
