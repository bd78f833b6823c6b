//! Line-oriented `key = value` configuration with dotted section prefixes
//! (`block.d = 32`). Unknown keys are hard errors so typos never pass
//! silently; command-line overrides compose on top of file values.

use std::path::Path;

use thiserror::Error;

use crate::data::TaskKind;
use crate::model::FusionMode;
use crate::train::{LrDecay, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config line {line} is not 'key = value': '{text}'")]
    BadLine { line: usize, text: String },
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("bad value '{value}' for {key}: expected {expected}")]
    BadValue {
        key: String,
        value: String,
        expected: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Parse config text into ordered key/value pairs. `#` starts a comment;
/// blank lines are skipped.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::BadLine {
                line: i + 1,
                text: raw.to_string(),
            });
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_config_file(path: &Path) -> Result<Vec<(String, String)>, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config_text(&text)
}

/// Parse a `key=value` override as given on the command line.
pub fn parse_override(s: &str) -> Result<(String, String), ConfigError> {
    let Some((k, v)) = s.split_once('=') else {
        return Err(ConfigError::BadLine {
            line: 0,
            text: s.to_string(),
        });
    };
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn set_key(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<(), ConfigError> {
    let bad = |expected: &str| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        expected: expected.to_string(),
    };
    let as_usize = |v: &str| v.parse::<usize>().map_err(|_| bad("a non-negative integer"));
    let as_u64 = |v: &str| v.parse::<u64>().map_err(|_| bad("a non-negative integer"));
    let as_f64 = |v: &str| v.parse::<f64>().map_err(|_| bad("a number"));
    let as_switch = |v: &str| match v {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(bad("on|off")),
    };
    match key {
        "block.d" => cfg.block.d = as_usize(value)?,
        "block.heads" => cfg.block.heads = as_usize(value)?,
        "block.kernel" => cfg.block.kernel = as_usize(value)?,
        "block.ffn_expansion" => cfg.block.ffn_expansion = as_usize(value)?,
        "block.fusion" => {
            cfg.block.fusion = FusionMode::parse(value).map_err(|_| bad("add|concat|sfm"))?
        }
        "block.l2g" => cfg.block.l2g = as_switch(value)?,
        "block.g2l" => cfg.block.g2l = as_switch(value)?,
        "block.dyrelu" => cfg.block.dyrelu = as_switch(value)?,
        "block.dropout" => cfg.block.dropout_p = as_f64(value)?,
        "block.n_blocks" => cfg.block.n_blocks = as_usize(value)?,
        "block.sfm_bottleneck" => cfg.block.sfm_bottleneck = as_usize(value)?,
        "block.se_ratio" => cfg.block.se_ratio = as_usize(value)?,
        "block.dyrelu_ratio" => cfg.block.dyrelu_ratio = as_usize(value)?,
        "encoder.channels" => cfg.channels = as_usize(value)?,
        "task.kind" => {
            cfg.task.kind = TaskKind::parse(value)
                .map_err(|_| bad("motif-match|long-copy-detect|parity-span"))?
        }
        "task.t" => cfg.task.t = as_usize(value)?,
        "task.f" => cfg.task.f = as_usize(value)?,
        "task.classes" => cfg.task.num_classes = as_usize(value)?,
        "task.samples" => cfg.task.samples = as_usize(value)?,
        "task.seed" => cfg.task.seed = as_u64(value)?,
        "train.steps" => cfg.steps = as_usize(value)?,
        "train.batch" => cfg.batch = as_usize(value)?,
        "train.lr" => cfg.lr = as_f64(value)?,
        "train.overfit" => cfg.overfit = as_switch(value)?,
        "train.eval_every" => cfg.eval_every = as_usize(value)?,
        "train.lr_decay_every" => {
            let every = as_usize(value)?;
            let factor = cfg.lr_decay.map_or(0.5, |d| d.factor);
            cfg.lr_decay = (every > 0).then_some(LrDecay { every, factor });
        }
        "train.lr_decay_factor" => {
            let factor = as_f64(value)?;
            let every = cfg.lr_decay.map_or(0, |d| d.every);
            cfg.lr_decay = (every > 0).then_some(LrDecay { every, factor });
        }
        "train.target_val_acc" => cfg.target_val_acc = Some(as_f64(value)?),
        _ => return Err(ConfigError::UnknownKey(key.to_string())),
    }
    Ok(())
}

/// Build the run configuration: desk defaults, then the config file, then
/// overrides in order (later wins). The run seed flows in separately.
pub fn build_train_config(
    file: Option<&Path>,
    overrides: &[(String, String)],
    seed: u64,
) -> Result<TrainConfig, ConfigError> {
    let mut cfg = TrainConfig::desk_default();
    cfg.seed = seed;
    cfg.task.seed = seed;
    if let Some(path) = file {
        for (k, v) in parse_config_file(path)? {
            set_key(&mut cfg, &k, &v)?;
        }
    }
    for (k, v) in overrides {
        set_key(&mut cfg, k, v)?;
    }
    cfg.validate()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blanks() {
        let text = "\n# comment\nblock.d = 16  # inline\n\ntask.t=32\n";
        let kvs = parse_config_text(text).unwrap();
        assert_eq!(
            kvs,
            vec![
                ("block.d".to_string(), "16".to_string()),
                ("task.t".to_string(), "32".to_string())
            ]
        );
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = build_train_config(
            None,
            &[("block.dee".to_string(), "8".to_string())],
            0,
        )
        .unwrap_err();
        match err {
            ConfigError::UnknownKey(k) => assert_eq!(k, "block.dee"),
            other => panic!("expected UnknownKey, got {other}"),
        }
    }

    #[test]
    fn overrides_win_over_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "block.d = 16\nblock.heads = 2\n").unwrap();
        let cfg = build_train_config(
            Some(&path),
            &[("block.d".to_string(), "8".to_string())],
            3,
        )
        .unwrap();
        assert_eq!(cfg.block.d, 8);
        assert_eq!(cfg.block.heads, 2);
        assert_eq!(cfg.seed, 3);
    }

    #[test]
    fn bad_values_name_the_key() {
        let err = build_train_config(
            None,
            &[("train.lr".to_string(), "fast".to_string())],
            0,
        )
        .unwrap_err();
        assert!(err.to_string().contains("train.lr"));
    }

    #[test]
    fn invalid_combination_is_caught() {
        let err = build_train_config(
            None,
            &[("block.heads".to_string(), "5".to_string())],
            0,
        )
        .unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)));
    }
}
