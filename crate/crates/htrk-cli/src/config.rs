//! INI-style run configuration: `[section]` headers with `key = value`
//! lines, `#` comments. Unknown sections or keys are rejected by name so
//! typos fail fast.

use htrk::train::{Optimizer, TrainConfig};
use htrk::{Error, Result};

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub beam_width: usize,
    pub lm_weight: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            beam_width: 25,
            lm_weight: 0.01,
        }
    }
}

pub fn parse_config(text: &str, path: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut section = String::new();
    let err = |line_no: usize, msg: String| Error::Parse {
        path: path.to_string(),
        msg: format!("line {line_no}: {msg}"),
    };
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            if section != "train" && section != "decode" {
                return Err(err(line_no, format!("unknown section [{section}]")));
            }
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(err(line_no, format!("expected key = value, got {line:?}")));
        };
        let key = key.trim();
        let value = value.trim();
        let parse_usize = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| err(line_no, format!("{key}: bad integer {v:?}")))
        };
        let parse_f64 = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| err(line_no, format!("{key}: bad number {v:?}")))
        };
        match (section.as_str(), key) {
            ("train", "batch_size") => cfg.train.batch_size = parse_usize(value)?,
            ("train", "lr") => cfg.train.lr = parse_f64(value)?,
            ("train", "optimizer") => cfg.train.optimizer = Optimizer::parse(value)?,
            ("train", "early_stop_patience") => {
                cfg.train.early_stop_patience = parse_usize(value)?
            }
            ("train", "plateau_patience") => cfg.train.plateau_patience = parse_usize(value)?,
            ("train", "plateau_factor") => cfg.train.plateau_factor = parse_f64(value)?,
            ("train", "max_epochs") => cfg.train.max_epochs = parse_usize(value)?,
            ("train", "seed") => {
                cfg.train.seed = value
                    .parse::<u64>()
                    .map_err(|_| err(line_no, format!("seed: bad integer {value:?}")))?
            }
            ("train", "clip_norm") => {
                cfg.train.clip_norm = if value == "none" {
                    None
                } else {
                    Some(parse_f64(value)?)
                }
            }
            ("train", "min_delta") => cfg.train.min_delta = parse_f64(value)?,
            ("decode", "beam_width") => cfg.beam_width = parse_usize(value)?,
            ("decode", "lm_weight") => cfg.lm_weight = parse_f64(value)?,
            (_, key) => {
                return Err(err(
                    line_no,
                    format!("unknown key {key:?} in section [{section}]"),
                ))
            }
        }
    }
    cfg.train.validate()?;
    Ok(cfg)
}
