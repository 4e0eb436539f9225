//! The attention encoder: a bidirectional transformer over Gaussian
//! embeddings, recorded on the autodiff tape so training can differentiate
//! through every step.
//!
//! Per block and head, for a row with `v` valid positions:
//!
//! 1. Keys, queries and values are projected per position from the running
//!    state (item stream) and the position's behavior distribution; the
//!    variance projections pass through `elu_plus_one`.
//! 2. For every source/target pair `(s, t)` an *impact factor* is built:
//!    the user's patterns for behaviors `b_s` and `b_t` are projected to
//!    head width, their squared Wasserstein distance `m` scales the
//!    directed relation distribution `relation(b_s → b_t)` (also projected
//!    to head width), with the variance floored at [`VAR_FLOOR`] (m can be
//!    zero). Every full-width distribution entering a head — pattern,
//!    position, relation — passes through that head's shared projection
//!    pair, mean linearly and variance through `elu_plus_one`.
//! 3. Key `s` and query `t` are each fused with that pair's impact factor
//!    and their own projected position distribution (three-way product with
//!    precision additivity); the attention score is the negative squared
//!    Wasserstein distance between the two fused Gaussians.
//! 4. Scores are softmax-normalized over sources per target column —
//!    padded sources never enter, so each column's weights sum to one over
//!    the valid positions — and aggregated into a Gaussian mixture (linear
//!    weights on means, squared weights on variances).
//!
//! Heads are concatenated back to width D, passed through a
//! behavior-specific feed-forward layer (one per behavior id, picked by
//! the position's behavior), and joined with a residual connection, layer
//! norm and dropout. Dropout touches only the mean stream; the covariance
//! stream is re-mapped through `elu_plus_one` after its layer norm so
//! every block hands strictly positive variances to the next.
//!
//! Work per head and block is Θ(L²·d_h): both the impact factors and the
//! fusion are recomputed for every pair. [`EncodeStats::fusion_pairs`]
//! counts exactly those pair computations so tests can pin the complexity.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{PbatError, Result};
use crate::gaussian::VAR_FLOOR;
use crate::params::{ModelParams, TensorId};
use crate::tape::{Tape, Var};

const LN_EPS: f64 = 1e-6;

/// A Gaussian on the tape: mean and variance nodes of equal length.
#[derive(Debug, Clone, Copy)]
pub struct GVar {
    pub mean: Var,
    pub var: Var,
}

#[derive(Debug, Clone)]
pub struct EncoderInput<'a> {
    pub user: u32,
    /// Item ids; the mask token at cloze positions, padding beyond
    /// `valid_len`. May be shorter than the model's `seq_len`.
    pub items: &'a [u32],
    pub behaviors: &'a [u32],
    pub valid_len: usize,
}

#[derive(Debug, Clone)]
pub struct EncodeOptions {
    /// Drop probability for the mean stream; 0 disables dropout entirely
    /// (no nodes recorded), which is what evaluation and gradient checking
    /// use.
    pub dropout: f64,
    /// Seed for the dropout masks; ignored when `dropout == 0`.
    pub dropout_seed: u64,
    /// Record per-block, per-head attention matrices into the output.
    pub collect_attention: bool,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        Self { dropout: 0.0, dropout_seed: 0, collect_attention: false }
    }
}

/// Operation counters and normalization diagnostics for one encode.
#[derive(Debug, Clone, Default)]
pub struct EncodeStats {
    /// Number of (source, target) pair fusions performed, summed over
    /// blocks and heads; equals `n_blocks · n_heads · valid_len²` and each
    /// unit is Θ(d_h) work.
    pub fusion_pairs: usize,
    /// Sum of attention weights per (block, head, target) column; each
    /// entry must be 1 up to float error.
    pub attn_col_sums: Vec<f64>,
}

pub struct EncodedSeq {
    /// Final per-position states, length = physical row length. Padded
    /// slots hold inert constants (zero mean, unit variance).
    pub states: Vec<GVar>,
    /// Full-width personalized pattern per behavior id present in the row.
    pub patterns: BTreeMap<u32, GVar>,
    pub stats: EncodeStats,
    /// Row-major `valid_len × valid_len` attention weights (source row,
    /// target column) per block·head, when requested.
    pub attention: Vec<Vec<f64>>,
}

/// Caches leaf nodes so each tensor or table row is staged onto the tape
/// at most once per encode.
struct LeafCtx {
    tensors: Vec<Option<Var>>,
    rows: BTreeMap<(TensorId, usize), Var>,
}

impl LeafCtx {
    fn new(n_tensors: usize) -> Self {
        Self { tensors: vec![None; n_tensors], rows: BTreeMap::new() }
    }

    fn tensor(&mut self, tape: &mut Tape, params: &ModelParams, id: TensorId) -> Var {
        *self.tensors[id].get_or_insert_with(|| {
            tape.leaf(params.store.data(), params.store.range(id))
        })
    }

    fn row(&mut self, tape: &mut Tape, params: &ModelParams, id: TensorId, row: usize) -> Var {
        *self.rows.entry((id, row)).or_insert_with(|| {
            tape.leaf(params.store.data(), params.store.row_range(id, row))
        })
    }
}

/// Stages one table row as a Gaussian: the mean row as-is, the raw
/// variance row through `elu_plus_one`.
fn entity(
    tape: &mut Tape,
    params: &ModelParams,
    ctx: &mut LeafCtx,
    mean_id: TensorId,
    rawvar_id: TensorId,
    row: usize,
) -> GVar {
    let mean = ctx.row(tape, params, mean_id, row);
    let raw = ctx.row(tape, params, rawvar_id, row);
    let var = tape.elu_plus_one(raw);
    GVar { mean, var }
}

/// Uncached variant for callers outside the encode loop (item scoring).
pub(crate) fn stage_entity(
    tape: &mut Tape,
    params: &ModelParams,
    mean_id: TensorId,
    rawvar_id: TensorId,
    row: usize,
) -> GVar {
    let mean = tape.leaf(params.store.data(), params.store.row_range(mean_id, row));
    let raw = tape.leaf(params.store.data(), params.store.row_range(rawvar_id, row));
    let var = tape.elu_plus_one(raw);
    GVar { mean, var }
}

/// Tape version of [`crate::gaussian::sagp`].
pub(crate) fn g_sagp(tape: &mut Tape, u: GVar, v: GVar, align: Option<Var>) -> GVar {
    let d = tape.value(u.mean).len();
    let denom_raw = tape.add(u.var, v.var);
    let denom = tape.clamp_min(denom_raw, VAR_FLOOR);
    let a1 = tape.div(v.var, denom);
    let a2 = tape.div(u.var, denom);
    let v_mean = match align {
        Some(w) => tape.matvec(v.mean, w, d),
        None => v.mean,
    };
    let t1 = tape.mul(a1, u.mean);
    let t2 = tape.mul(a2, v_mean);
    let mean = tape.add(t1, t2);
    let prod = tape.mul(u.var, v.var);
    let two = tape.scale_const(prod, 2.0);
    let var = tape.div(two, denom);
    GVar { mean, var }
}

/// Tape version of [`crate::gaussian::tri_sagp`].
fn g_tri_sagp(tape: &mut Tape, base: GVar, ip: GVar, pos: GVar, w_ip: Var, w_p: Var) -> GVar {
    let d = tape.value(base.mean).len();
    let bv = tape.clamp_min(base.var, VAR_FLOOR);
    let iv = tape.clamp_min(ip.var, VAR_FLOOR);
    let pv = tape.clamp_min(pos.var, VAR_FLOOR);
    let bp = tape.recip(bv);
    let ipp = tape.recip(iv);
    let pp = tape.recip(pv);
    let prec01 = tape.add(bp, ipp);
    let prec = tape.add(prec01, pp);
    let var = tape.recip(prec);
    let b_term = tape.mul(base.mean, bp);
    let i_scaled = tape.mul(ip.mean, ipp);
    let i_term = tape.matvec(i_scaled, w_ip, d);
    let p_scaled = tape.mul(pos.mean, pp);
    let p_term = tape.matvec(p_scaled, w_p, d);
    let sum01 = tape.add(b_term, i_term);
    let sum = tape.add(sum01, p_term);
    let mean = tape.mul(var, sum);
    GVar { mean, var }
}

/// Tape version of [`crate::gaussian::wasserstein_sq`]; returns a scalar.
pub(crate) fn g_wasserstein_sq(tape: &mut Tape, a: GVar, b: GVar) -> Var {
    let dm = tape.sub(a.mean, b.mean);
    let dm2 = tape.square(dm);
    let sa = tape.sqrt(a.var);
    let sb = tape.sqrt(b.var);
    let ds = tape.sub(sa, sb);
    let ds2 = tape.square(ds);
    let both = tape.add(dm2, ds2);
    tape.sum(both)
}

fn layer_norm(tape: &mut Tape, x: Var, gain: Var, bias: Var) -> Var {
    let d = tape.value(x).len();
    let total = tape.sum(x);
    let mu = tape.scale_const(total, 1.0 / d as f64);
    let mu_b = tape.broadcast(mu, d);
    let cent = tape.sub(x, mu_b);
    let cent2 = tape.square(cent);
    let var_sum = tape.sum(cent2);
    let var = tape.scale_const(var_sum, 1.0 / d as f64);
    let var_eps = tape.add_const(var, LN_EPS);
    let std = tape.sqrt(var_eps);
    let inv = tape.recip(std);
    let xhat = tape.mul_bcast(cent, inv);
    let scaled = tape.mul(xhat, gain);
    tape.add(scaled, bias)
}

fn feed_forward(
    tape: &mut Tape,
    x: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    hidden: usize,
    out: usize,
) -> Var {
    let h_lin = tape.matvec(x, w1, hidden);
    let h_aff = tape.add(h_lin, b1);
    let h = tape.elu(h_aff);
    let o_lin = tape.matvec(h, w2, out);
    tape.add(o_lin, b2)
}

fn validate(params: &ModelParams, input: &EncoderInput) -> Result<()> {
    let hp = &params.hp;
    if input.items.len() != input.behaviors.len() {
        return Err(PbatError::ShapeMismatch {
            name: "encoder input".into(),
            expected: vec![input.items.len()],
            got: vec![input.behaviors.len()],
        });
    }
    if input.items.len() > hp.seq_len {
        return Err(PbatError::InvalidParameter {
            name: "items",
            reason: format!("row length {} exceeds seq_len {}", input.items.len(), hp.seq_len),
        });
    }
    if input.valid_len == 0 || input.valid_len > input.items.len() {
        return Err(PbatError::InvalidParameter {
            name: "valid_len",
            reason: format!("{} out of range for row of {}", input.valid_len, input.items.len()),
        });
    }
    if input.user >= hp.num_users {
        return Err(PbatError::InvalidParameter {
            name: "user",
            reason: format!("id {} out of range ({} users)", input.user, hp.num_users),
        });
    }
    for t in 0..input.valid_len {
        if input.items[t] > hp.mask_item() {
            return Err(PbatError::InvalidParameter {
                name: "items",
                reason: format!("item id {} out of range at position {t}", input.items[t]),
            });
        }
        if input.behaviors[t] > hp.pad_behavior() {
            return Err(PbatError::InvalidParameter {
                name: "behaviors",
                reason: format!("behavior id {} out of range at position {t}", input.behaviors[t]),
            });
        }
    }
    Ok(())
}

/// Runs the full encoder on one row, recording everything on `tape`.
pub fn encode(
    tape: &mut Tape,
    params: &ModelParams,
    input: &EncoderInput,
    opts: &EncodeOptions,
) -> Result<EncodedSeq> {
    validate(params, input)?;
    let hp = &params.hp;
    let ids = &params.ids;
    let d = hp.embed_dim;
    let dh = hp.head_dim();
    let v = input.valid_len;
    let mut ctx = LeafCtx::new(params.store.metas().len());
    let mut stats = EncodeStats::default();
    let mut attention = Vec::new();
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(opts.dropout_seed);

    // Behavior distributions and the user's full-width patterns, one per
    // distinct behavior in the row. Patterns are the variance-led product
    // of user and behavior through the shared mean alignment.
    let user_g = entity(tape, params, &mut ctx, ids.user_mean, ids.user_rawvar, input.user as usize);
    let pattern_align = ctx.tensor(tape, params, ids.pattern_align);
    let mut behavior_g: BTreeMap<u32, GVar> = BTreeMap::new();
    let mut patterns: BTreeMap<u32, GVar> = BTreeMap::new();
    for t in 0..v {
        let b = input.behaviors[t];
        if !behavior_g.contains_key(&b) {
            let g = entity(tape, params, &mut ctx, ids.behavior_mean, ids.behavior_rawvar, b as usize);
            behavior_g.insert(b, g);
            patterns.insert(b, g_sagp(tape, user_g, g, Some(pattern_align)));
        }
    }

    // Initial state: the item distributions (mask token included).
    let mut states: Vec<GVar> = Vec::with_capacity(input.items.len());
    for t in 0..input.items.len() {
        if t < v {
            states.push(entity(tape, params, &mut ctx, ids.item_mean, ids.item_rawvar, input.items[t] as usize));
        } else {
            let mean = tape.constant(&vec![0.0; d]);
            let var = tape.constant(&vec![1.0; d]);
            states.push(GVar { mean, var });
        }
    }

    let position_g: Vec<GVar> = (0..v)
        .map(|t| entity(tape, params, &mut ctx, ids.position_mean, ids.position_rawvar, t))
        .collect();

    for block in &ids.blocks {
        let mut head_outputs: Vec<Vec<GVar>> = Vec::with_capacity(hp.n_heads);

        for head in &block.heads {
            let stage = |tape: &mut Tape, ctx: &mut LeafCtx, id| ctx.tensor(tape, params, id);
            let wq_im = stage(tape, &mut ctx, head.wq_item_mean);
            let wq_bm = stage(tape, &mut ctx, head.wq_behavior_mean);
            let wq_iv = stage(tape, &mut ctx, head.wq_item_var);
            let wq_bv = stage(tape, &mut ctx, head.wq_behavior_var);
            let wk_im = stage(tape, &mut ctx, head.wk_item_mean);
            let wk_bm = stage(tape, &mut ctx, head.wk_behavior_mean);
            let wk_iv = stage(tape, &mut ctx, head.wk_item_var);
            let wk_bv = stage(tape, &mut ctx, head.wk_behavior_var);
            let wv_im = stage(tape, &mut ctx, head.wv_item_mean);
            let wv_bm = stage(tape, &mut ctx, head.wv_behavior_mean);
            let wv_iv = stage(tape, &mut ctx, head.wv_item_var);
            let wv_bv = stage(tape, &mut ctx, head.wv_behavior_var);
            let align_ip = stage(tape, &mut ctx, head.align_ip);
            let align_pos = stage(tape, &mut ctx, head.align_pos);
            let proj_mean = stage(tape, &mut ctx, head.pattern_proj_mean);
            let proj_var = stage(tape, &mut ctx, head.pattern_proj_var);

            let project = |tape: &mut Tape, g: GVar, b: GVar, wm_i, wm_b, wv_i, wv_b| {
                let m1 = tape.matvec(g.mean, wm_i, dh);
                let m2 = tape.matvec(b.mean, wm_b, dh);
                let mean = tape.add(m1, m2);
                let v1 = tape.matvec(g.var, wv_i, dh);
                let v2 = tape.matvec(b.var, wv_b, dh);
                let raw = tape.add(v1, v2);
                let var = tape.elu_plus_one(raw);
                GVar { mean, var }
            };

            let mut q = Vec::with_capacity(v);
            let mut k = Vec::with_capacity(v);
            let mut val = Vec::with_capacity(v);
            let mut pos_p = Vec::with_capacity(v);
            for t in 0..v {
                let b = behavior_g[&input.behaviors[t]];
                q.push(project(tape, states[t], b, wq_im, wq_bm, wq_iv, wq_bv));
                k.push(project(tape, states[t], b, wk_im, wk_bm, wk_iv, wk_bv));
                val.push(project(tape, states[t], b, wv_im, wv_bm, wv_iv, wv_bv));
                // positions ride through the pattern projection machinery
                let pm = tape.matvec(position_g[t].mean, proj_mean, dh);
                let pv_raw = tape.matvec(position_g[t].var, proj_var, dh);
                let pv = tape.elu_plus_one(pv_raw);
                pos_p.push(GVar { mean: pm, var: pv });
            }

            // head-width pattern projections, one per behavior id
            let mut pat_p: BTreeMap<u32, GVar> = BTreeMap::new();
            for (&b, &p) in &patterns {
                let pm = tape.matvec(p.mean, proj_mean, dh);
                let pv_raw = tape.matvec(p.var, proj_var, dh);
                let pv = tape.elu_plus_one(pv_raw);
                pat_p.insert(b, GVar { mean: pm, var: pv });
            }

            // relation distributions for the behavior pairs in this row,
            // projected to head width like patterns and positions
            let nb = hp.num_behaviors as usize;
            let mut relations: BTreeMap<(u32, u32), GVar> = BTreeMap::new();
            for s in 0..v {
                for t in 0..v {
                    let key = (input.behaviors[s], input.behaviors[t]);
                    if !relations.contains_key(&key) {
                        let row = key.0 as usize * nb + key.1 as usize;
                        let g = entity(tape, params, &mut ctx, ids.relation_mean, ids.relation_rawvar, row);
                        let rm = tape.matvec(g.mean, proj_mean, dh);
                        let rv_raw = tape.matvec(g.var, proj_var, dh);
                        let rv = tape.elu_plus_one(rv_raw);
                        relations.insert(key, GVar { mean: rm, var: rv });
                    }
                }
            }

            // pairwise fusion and scores; scores[s * v + t]
            let mut scores: Vec<Var> = Vec::with_capacity(v * v);
            for s in 0..v {
                for t in 0..v {
                    let (bs, bt) = (input.behaviors[s], input.behaviors[t]);
                    let m = g_wasserstein_sq(tape, pat_p[&bs], pat_p[&bt]);
                    let rel = relations[&(bs, bt)];
                    let ip_mean = tape.mul_bcast(rel.mean, m);
                    let ip_var_raw = tape.mul_bcast(rel.var, m);
                    let ip_var = tape.clamp_min(ip_var_raw, VAR_FLOOR);
                    let ip = GVar { mean: ip_mean, var: ip_var };
                    let fused_k = g_tri_sagp(tape, k[s], ip, pos_p[s], align_ip, align_pos);
                    let fused_q = g_tri_sagp(tape, q[t], ip, pos_p[t], align_ip, align_pos);
                    let dist = g_wasserstein_sq(tape, fused_k, fused_q);
                    scores.push(tape.scale_const(dist, -1.0));
                    stats.fusion_pairs += 1;
                }
            }

            // per-target softmax over sources, then Gaussian mixture
            let v_means: Vec<Var> = val.iter().map(|g| g.mean).collect();
            let v_vars: Vec<Var> = val.iter().map(|g| g.var).collect();
            let mut out = Vec::with_capacity(v);
            let mut attn_matrix = if opts.collect_attention {
                vec![0.0; v * v]
            } else {
                Vec::new()
            };
            for t in 0..v {
                let col: Vec<Var> = (0..v).map(|s| scores[s * v + t]).collect();
                let col_v = tape.concat(&col);
                let w = tape.softmax(col_v);
                let weights = tape.value(w);
                stats.attn_col_sums.push(weights.iter().sum());
                if opts.collect_attention {
                    for s in 0..v {
                        attn_matrix[s * v + t] = weights[s];
                    }
                }
                let mean = tape.weighted_sum(w, &v_means, false);
                let var = tape.weighted_sum(w, &v_vars, true);
                out.push(GVar { mean, var });
            }
            if opts.collect_attention {
                attention.push(attn_matrix);
            }
            head_outputs.push(out);
        }

        // concat heads back to full width
        let mut att: Vec<GVar> = Vec::with_capacity(v);
        for t in 0..v {
            let means: Vec<Var> = head_outputs.iter().map(|h| h[t].mean).collect();
            let vars: Vec<Var> = head_outputs.iter().map(|h| h[t].var).collect();
            let mean = tape.concat(&means);
            let var = tape.concat(&vars);
            att.push(GVar { mean, var });
        }

        let ln_mg = ctx.tensor(tape, params, block.ln_mean_gain);
        let ln_mb = ctx.tensor(tape, params, block.ln_mean_bias);
        let ln_vg = ctx.tensor(tape, params, block.ln_var_gain);
        let ln_vb = ctx.tensor(tape, params, block.ln_var_bias);

        for t in 0..v {
            let ffl = &block.ffl[input.behaviors[t] as usize];
            let w1m = ctx.tensor(tape, params, ffl.w1_mean);
            let b1m = ctx.tensor(tape, params, ffl.b1_mean);
            let w2m = ctx.tensor(tape, params, ffl.w2_mean);
            let b2m = ctx.tensor(tape, params, ffl.b2_mean);
            let w1v = ctx.tensor(tape, params, ffl.w1_var);
            let b1v = ctx.tensor(tape, params, ffl.b1_var);
            let w2v = ctx.tensor(tape, params, ffl.w2_var);
            let b2v = ctx.tensor(tape, params, ffl.b2_var);

            let mut f_mean = feed_forward(tape, att[t].mean, w1m, b1m, w2m, b2m, hp.ffn_dim, d);
            let f_var_raw = feed_forward(tape, att[t].var, w1v, b1v, w2v, b2v, hp.ffn_dim, d);
            let f_var = tape.elu_plus_one(f_var_raw);

            if opts.dropout > 0.0 {
                let keep = 1.0 - opts.dropout;
                let mask: Vec<f64> = (0..d)
                    .map(|_| if dropout_rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                let mask_c = tape.constant(&mask);
                f_mean = tape.mul(f_mean, mask_c);
            }

            let res_mean = tape.add(states[t].mean, f_mean);
            let res_var = tape.add(states[t].var, f_var);
            let new_mean = layer_norm(tape, res_mean, ln_mg, ln_mb);
            let ln_var = layer_norm(tape, res_var, ln_vg, ln_vb);
            let new_var = tape.elu_plus_one(ln_var);
            debug_assert!(
                tape.value(new_var).iter().all(|&x| x > 0.0),
                "block output variance must stay positive"
            );
            states[t] = GVar { mean: new_mean, var: new_var };
        }
    }

    Ok(EncodedSeq { states, patterns, stats, attention })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{self, DiagonalGaussian};
    use crate::params::HyperParams;

    fn hp() -> HyperParams {
        HyperParams {
            embed_dim: 8,
            seq_len: 8,
            n_blocks: 2,
            n_heads: 2,
            ffn_dim: 16,
            num_items: 20,
            num_users: 5,
            num_behaviors: 3,
        }
    }

    fn row<'a>(items: &'a [u32], behaviors: &'a [u32], valid: usize) -> EncoderInput<'a> {
        EncoderInput { user: 1, items, behaviors, valid_len: valid }
    }

    #[test]
    fn tape_helpers_match_closed_forms() {
        let ga = DiagonalGaussian::new(vec![0.4, -1.2, 0.9], vec![0.5, 2.0, 1.1]).unwrap();
        let gb = DiagonalGaussian::new(vec![-0.3, 0.8, 0.1], vec![1.4, 0.3, 0.9]).unwrap();
        let gc = DiagonalGaussian::new(vec![1.0, 0.0, -0.5], vec![0.7, 1.9, 0.2]).unwrap();
        let w: Vec<f64> = (0..9).map(|i| (i as f64 * 0.37).sin() * 0.5).collect();

        let mut tape = Tape::new();
        let a = GVar {
            mean: tape.constant(&ga.mean),
            var: tape.constant(&ga.var),
        };
        let b = GVar {
            mean: tape.constant(&gb.mean),
            var: tape.constant(&gb.var),
        };
        let c = GVar {
            mean: tape.constant(&gc.mean),
            var: tape.constant(&gc.var),
        };
        let w_node = tape.constant(&w);

        let ws = g_wasserstein_sq(&mut tape, a, b);
        assert!(
            (tape.scalar_value(ws) - gaussian::wasserstein_sq(&ga, &gb).unwrap()).abs() < 1e-12
        );

        let sg = g_sagp(&mut tape, a, b, Some(w_node));
        let expect = gaussian::sagp(&ga, &gb, Some(&w)).unwrap();
        for i in 0..3 {
            assert!((tape.value(sg.mean)[i] - expect.mean[i]).abs() < 1e-12);
            assert!((tape.value(sg.var)[i] - expect.var[i]).abs() < 1e-12);
        }

        let eye: Vec<f64> = (0..9).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
        let eye_node = tape.constant(&eye);
        let tri = g_tri_sagp(&mut tape, a, b, c, eye_node, w_node);
        let expect = gaussian::tri_sagp(&ga, &gb, &gc, &eye, &w).unwrap();
        for i in 0..3 {
            assert!((tape.value(tri.mean)[i] - expect.mean[i]).abs() < 1e-12);
            assert!((tape.value(tri.var)[i] - expect.var[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_produces_positive_variances_and_unit_columns() {
        let m = ModelParams::init(hp(), 42).unwrap();
        let items = [3, 21, 7, 3, 20, 20, 20, 20]; // 21 = mask token
        let behaviors = [0, 1, 2, 1, 3, 3, 3, 3];
        let mut tape = Tape::new();
        let out = encode(&mut tape, &m, &row(&items, &behaviors, 4), &EncodeOptions::default())
            .unwrap();
        assert_eq!(out.states.len(), 8);
        for t in 0..4 {
            for &x in tape.value(out.states[t].var) {
                assert!(x > 0.0);
            }
            for &x in tape.value(out.states[t].mean) {
                assert!(x.is_finite());
            }
        }
        // 2 blocks × 2 heads × 4 targets = 16 columns, each summing to 1
        assert_eq!(out.stats.attn_col_sums.len(), 16);
        for s in &out.stats.attn_col_sums {
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert_eq!(out.stats.fusion_pairs, 2 * 2 * 16);
        assert_eq!(out.patterns.len(), 3, "one pattern per distinct behavior");
    }

    #[test]
    fn encode_is_deterministic() {
        let m = ModelParams::init(hp(), 7).unwrap();
        let items = [1, 2, 3, 20, 20, 20, 20, 20];
        let behaviors = [0, 1, 0, 3, 3, 3, 3, 3];
        let run = || {
            let mut tape = Tape::new();
            let out = encode(&mut tape, &m, &row(&items, &behaviors, 3), &EncodeOptions::default())
                .unwrap();
            (0..3)
                .flat_map(|t| {
                    tape.value(out.states[t].mean)
                        .iter()
                        .chain(tape.value(out.states[t].var))
                        .copied()
                        .collect::<Vec<_>>()
                })
                .collect::<Vec<f64>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn padded_tail_length_does_not_change_valid_outputs() {
        let m = ModelParams::init(hp(), 11).unwrap();
        let read = |physical: usize| {
            let mut items = vec![20u32; physical];
            let mut behaviors = vec![3u32; physical];
            for (t, &(i, b)) in [(4u32, 0u32), (9, 1), (2, 2)].iter().enumerate() {
                items[t] = i;
                behaviors[t] = b;
            }
            let mut tape = Tape::new();
            let out = encode(&mut tape, &m, &row(&items, &behaviors, 3), &EncodeOptions::default())
                .unwrap();
            (0..3)
                .flat_map(|t| {
                    tape.value(out.states[t].mean)
                        .iter()
                        .chain(tape.value(out.states[t].var))
                        .copied()
                        .collect::<Vec<_>>()
                })
                .collect::<Vec<f64>>()
        };
        let short = read(4);
        let long = read(8);
        for (a, b) in short.iter().zip(&long) {
            assert!((a - b).abs() < 1e-6, "padding length leaked into valid positions");
        }
    }

    #[test]
    fn single_valid_position_gets_full_attention() {
        let m = ModelParams::init(hp(), 3).unwrap();
        let items = [5, 20, 20, 20, 20, 20, 20, 20];
        let behaviors = [1, 3, 3, 3, 3, 3, 3, 3];
        let mut tape = Tape::new();
        let opts = EncodeOptions { collect_attention: true, ..Default::default() };
        let out = encode(&mut tape, &m, &row(&items, &behaviors, 1), &opts).unwrap();
        for matrix in &out.attention {
            assert_eq!(matrix, &vec![1.0]);
        }
    }

    #[test]
    fn dropout_changes_only_training_outputs() {
        let m = ModelParams::init(hp(), 19).unwrap();
        let items = [1, 2, 3, 4, 20, 20, 20, 20];
        let behaviors = [0, 1, 2, 0, 3, 3, 3, 3];
        let run = |dropout: f64, seed: u64| {
            let mut tape = Tape::new();
            let opts = EncodeOptions { dropout, dropout_seed: seed, collect_attention: false };
            let out = encode(&mut tape, &m, &row(&items, &behaviors, 4), &opts).unwrap();
            tape.value(out.states[0].mean).to_vec()
        };
        assert_eq!(run(0.0, 1), run(0.0, 2), "no dropout → seed must not matter");
        assert_eq!(run(0.5, 9), run(0.5, 9), "same seed → same masks");
        assert_ne!(run(0.5, 9), run(0.0, 9), "dropout must perturb the mean stream");
    }

    #[test]
    fn encode_validates_input() {
        let m = ModelParams::init(hp(), 1).unwrap();
        let items = [1u32, 2, 3];
        let behaviors = [0u32, 1, 2];
        let bad_user = EncoderInput { user: 99, items: &items, behaviors: &behaviors, valid_len: 3 };
        assert!(encode(&mut Tape::new(), &m, &bad_user, &EncodeOptions::default()).is_err());
        let bad_item = EncoderInput { user: 0, items: &[50, 2, 3], behaviors: &behaviors, valid_len: 3 };
        assert!(encode(&mut Tape::new(), &m, &bad_item, &EncodeOptions::default()).is_err());
        let bad_valid = EncoderInput { user: 0, items: &items, behaviors: &behaviors, valid_len: 0 };
        assert!(encode(&mut Tape::new(), &m, &bad_valid, &EncodeOptions::default()).is_err());
    }
}
