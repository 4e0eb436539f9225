//! Flat `key = value` run configuration.
//!
//! Recognized keys: `D`, `L`, `N_blocks`, `heads`, `D_ff`, `rho`,
//! `dropout`, `lr`, `batch_size`, `epochs`, `seed`, `num_items`,
//! `num_users`, `num_behaviors`. Lines starting with `#` and blank lines
//! are skipped. Unknown or duplicate keys are errors, as are values that
//! fail to parse. The vocabulary sizes are required; everything else has a
//! default.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{PbatError, Result};
use crate::params::HyperParams;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub embed_dim: usize,
    pub seq_len: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub rho: f64,
    pub dropout: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub num_items: u32,
    pub num_users: u32,
    pub num_behaviors: u32,
}

impl Config {
    pub fn hyperparams(&self) -> HyperParams {
        HyperParams {
            embed_dim: self.embed_dim,
            seq_len: self.seq_len,
            n_blocks: self.n_blocks,
            n_heads: self.n_heads,
            ffn_dim: self.ffn_dim,
            num_items: self.num_items,
            num_users: self.num_users,
            num_behaviors: self.num_behaviors,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            rho: self.rho,
            dropout: self.dropout,
            seed: self.seed,
        }
    }
}

fn bad(key: &str, msg: impl Into<String>) -> PbatError {
    PbatError::Config { key: key.to_string(), msg: msg.into() }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse::<T>().map_err(|_| bad(key, format!("cannot parse value `{value}`")))
}

pub fn parse(text: &str) -> Result<Config> {
    // defaults; the vocabulary sizes have none and must appear
    let mut embed_dim = 64usize;
    let mut seq_len = 50usize;
    let mut n_blocks = 2usize;
    let mut n_heads = 2usize;
    let mut ffn_dim = 256usize;
    let mut rho = 0.2f64;
    let mut dropout = 0.1f64;
    let mut lr = 0.001f64;
    let mut batch_size = 128usize;
    let mut epochs = 100usize;
    let mut seed = 0u64;
    let mut num_items: Option<u32> = None;
    let mut num_users: Option<u32> = None;
    let mut num_behaviors: Option<u32> = None;

    let mut seen: BTreeSet<String> = BTreeSet::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| PbatError::Parse {
            line: lineno + 1,
            msg: format!("expected `key = value`, got `{line}`"),
        })?;
        let key = key.trim();
        let value = value.trim();
        if !seen.insert(key.to_string()) {
            return Err(bad(key, "duplicate key"));
        }
        match key {
            "D" => embed_dim = parse_num(key, value)?,
            "L" => seq_len = parse_num(key, value)?,
            "N_blocks" => n_blocks = parse_num(key, value)?,
            "heads" => n_heads = parse_num(key, value)?,
            "D_ff" => ffn_dim = parse_num(key, value)?,
            "rho" => rho = parse_num(key, value)?,
            "dropout" => dropout = parse_num(key, value)?,
            "lr" => lr = parse_num(key, value)?,
            "batch_size" => batch_size = parse_num(key, value)?,
            "epochs" => epochs = parse_num(key, value)?,
            "seed" => seed = parse_num(key, value)?,
            "num_items" => num_items = Some(parse_num(key, value)?),
            "num_users" => num_users = Some(parse_num(key, value)?),
            "num_behaviors" => num_behaviors = Some(parse_num(key, value)?),
            _ => return Err(bad(key, "unknown key")),
        }
    }

    let cfg = Config {
        embed_dim,
        seq_len,
        n_blocks,
        n_heads,
        ffn_dim,
        rho,
        dropout,
        lr,
        batch_size,
        epochs,
        seed,
        num_items: num_items.ok_or_else(|| bad("num_items", "missing required key"))?,
        num_users: num_users.ok_or_else(|| bad("num_users", "missing required key"))?,
        num_behaviors: num_behaviors
            .ok_or_else(|| bad("num_behaviors", "missing required key"))?,
    };

    if !(0.0..1.0).contains(&cfg.rho) {
        return Err(bad("rho", "must be in [0, 1)"));
    }
    if !(0.0..1.0).contains(&cfg.dropout) {
        return Err(bad("dropout", "must be in [0, 1)"));
    }
    if !cfg.lr.is_finite() || cfg.lr < 0.0 {
        return Err(bad("lr", "must be a non-negative number"));
    }
    if cfg.batch_size == 0 {
        return Err(bad("batch_size", "must be at least 1"));
    }
    cfg.hyperparams().validate()?;
    Ok(cfg)
}

pub fn load(path: &Path) -> Result<Config> {
    parse(&std::fs::read_to_string(path)?)
}
