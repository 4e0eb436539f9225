//! Embedding-table lookups and personalized behavior patterns.
//!
//! Tables store means directly and variances as raw pre-activations; a
//! lookup applies `elu_plus_one` entry-wise so every distribution handed
//! out is strictly positive-variance, no matter where training pushed the
//! raw values. The item table has two extra rows: `num_items` is the
//! padding token and `num_items + 1` the cloze mask token. The behavior
//! table has one extra row for the padding behavior.
//!
//! A personalized pattern is the variance-led product of a user and a
//! behavior distribution with the shared `pattern_align` matrix on the
//! behavior mean — one Gaussian per (user, behavior) pair describing how
//! strongly that behavior characterizes that user.

use crate::error::{PbatError, Result};
use crate::gaussian::{elu_plus_one, sagp, DiagonalGaussian};
use crate::params::{ModelParams, TensorId};

fn lookup(
    params: &ModelParams,
    mean_id: TensorId,
    rawvar_id: TensorId,
    row: usize,
    what: &'static str,
    rows: usize,
) -> Result<DiagonalGaussian> {
    if row >= rows {
        return Err(PbatError::InvalidParameter {
            name: what,
            reason: format!("id {row} out of range (table has {rows} rows)"),
        });
    }
    let mean = params.store.data()[params.store.row_range(mean_id, row)].to_vec();
    let var: Vec<f64> = params.store.data()[params.store.row_range(rawvar_id, row)]
        .iter()
        .map(|&x| elu_plus_one(x))
        .collect();
    DiagonalGaussian::new(mean, var)
}

pub fn lookup_item(params: &ModelParams, item: u32) -> Result<DiagonalGaussian> {
    lookup(
        params,
        params.ids.item_mean,
        params.ids.item_rawvar,
        item as usize,
        "item",
        params.hp.num_items as usize + 2,
    )
}

pub fn lookup_user(params: &ModelParams, user: u32) -> Result<DiagonalGaussian> {
    lookup(
        params,
        params.ids.user_mean,
        params.ids.user_rawvar,
        user as usize,
        "user",
        params.hp.num_users as usize,
    )
}

pub fn lookup_behavior(params: &ModelParams, behavior: u32) -> Result<DiagonalGaussian> {
    lookup(
        params,
        params.ids.behavior_mean,
        params.ids.behavior_rawvar,
        behavior as usize,
        "behavior",
        params.hp.num_behaviors as usize + 1,
    )
}

pub fn lookup_position(params: &ModelParams, pos: usize) -> Result<DiagonalGaussian> {
    lookup(
        params,
        params.ids.position_mean,
        params.ids.position_rawvar,
        pos,
        "position",
        params.hp.seq_len,
    )
}

/// Directed relation distribution for source behavior → target behavior.
pub fn lookup_relation(params: &ModelParams, b_src: u32, b_tgt: u32) -> Result<DiagonalGaussian> {
    let b = params.hp.num_behaviors as usize;
    if b_src as usize >= b || b_tgt as usize >= b {
        return Err(PbatError::InvalidParameter {
            name: "relation",
            reason: format!("behavior pair ({b_src}, {b_tgt}) out of range for {b} behaviors"),
        });
    }
    let row = b_src as usize * b + b_tgt as usize;
    lookup(
        params,
        params.ids.relation_mean,
        params.ids.relation_rawvar,
        row,
        "relation",
        b * b,
    )
}

/// Fuses a user and a behavior distribution into the user's pattern for
/// that behavior. The component with smaller variance (higher certainty)
/// dominates the pattern mean.
pub fn personalized_pattern(
    params: &ModelParams,
    user: u32,
    behavior: u32,
) -> Result<DiagonalGaussian> {
    let u = lookup_user(params, user)?;
    let b = lookup_behavior(params, behavior)?;
    let align = params.store.tensor(params.ids.pattern_align);
    sagp(&u, &b, Some(align))
}
