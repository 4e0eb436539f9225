//! Leave-one-out evaluation: next-item ranking with HR@K and NDCG@K, and
//! the behavior-dependency matrix export.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{mix_seed, MultiBehaviorSequence, SplitDataset};
use crate::embedding::{lookup_relation, personalized_pattern};
use crate::encoder::{encode, g_sagp, g_wasserstein_sq, stage_entity, EncodeOptions, EncoderInput};
use crate::error::{PbatError, Result};
use crate::gaussian::wasserstein_sq;
use crate::params::ModelParams;
use crate::tape::Tape;

#[derive(Debug, Clone)]
pub struct RankResult {
    pub user: u32,
    pub target: u32,
    /// 1-based rank of the target among the candidates.
    pub rank: usize,
    /// Top candidates by descending score, ties broken by ascending item id.
    pub top_k: Vec<u32>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub hr5: f64,
    pub hr10: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
    pub users: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CandidateMode {
    /// Rank against every item the user has not interacted with, plus the
    /// held-out target.
    All,
    /// Rank against `n` uniformly sampled unseen negatives plus the target.
    Sampled(usize),
}

// ---------------------------------------------------------------------------
// ranking
// ---------------------------------------------------------------------------

/// Encodes a row once and scores every candidate item at `mask_pos`: the
/// state there is refined by the pattern for that slot's behavior, and a
/// candidate's score is the negated squared distance between the refined
/// distribution and the candidate's item distribution. Returned scores
/// align with `candidates`.
fn candidate_scores(
    params: &ModelParams,
    user: u32,
    items: &[u32],
    behaviors: &[u32],
    valid_len: usize,
    mask_pos: usize,
    candidates: &[u32],
) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return Err(PbatError::InvalidParameter {
            name: "candidates",
            reason: "empty candidate set".into(),
        });
    }
    let z = behaviors[mask_pos];
    let mut tape = Tape::new();
    let input = EncoderInput { user, items, behaviors, valid_len };
    let out = encode(&mut tape, params, &input, &EncodeOptions::default())?;
    let refined = g_sagp(&mut tape, out.states[mask_pos], out.patterns[&z], None);

    let mut scores = Vec::with_capacity(candidates.len());
    for &item in candidates {
        if item >= params.hp.num_items {
            return Err(PbatError::InvalidParameter {
                name: "candidates",
                reason: format!("item id {item} out of range"),
            });
        }
        let item_g = stage_entity(
            &mut tape,
            params,
            params.ids.item_mean,
            params.ids.item_rawvar,
            item as usize,
        );
        let dist = g_wasserstein_sq(&mut tape, refined, item_g);
        scores.push(-tape.scalar_value(dist));
    }
    Ok(scores)
}

/// Encodes a row with a mask token at `mask_pos` and ranks `target` among
/// `candidates` by the pattern-refined score at that position.
fn rank_at_mask(
    params: &ModelParams,
    user: u32,
    items: &[u32],
    behaviors: &[u32],
    valid_len: usize,
    mask_pos: usize,
    target: u32,
    candidates: &[u32],
) -> Result<RankResult> {
    if candidates.is_empty() {
        return Err(PbatError::InvalidParameter {
            name: "candidates",
            reason: "empty candidate set".into(),
        });
    }
    if !candidates.contains(&target) {
        return Err(PbatError::InvalidParameter {
            name: "candidates",
            reason: format!("target {target} missing from candidate set"),
        });
    }
    let scores = candidate_scores(params, user, items, behaviors, valid_len, mask_pos, candidates)?;
    let mut scored: Vec<(f64, u32)> =
        scores.into_iter().zip(candidates.iter().copied()).collect();
    // descending score; equal scores resolve to the smaller item id
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    debug_assert_eq!(
        scored.iter().map(|&(_, i)| i).collect::<BTreeSet<_>>().len(),
        scored.len(),
        "candidate ranking must be a permutation"
    );
    let rank = scored.iter().position(|&(_, i)| i == target).unwrap() + 1;
    let top_k = scored.iter().take(10).map(|&(_, i)| i).collect();
    Ok(RankResult { user, target, rank, top_k })
}

/// Ranks the next item for a user: the training prefix (most recent
/// `L − 1` events) gets a mask token appended with the target behavior
/// `z`, and every candidate is scored at that mask slot.
pub fn predict_next(
    params: &ModelParams,
    train: &MultiBehaviorSequence,
    z: u32,
    target: u32,
    candidates: &[u32],
) -> Result<RankResult> {
    let n = train.valid_len;
    if n == 0 {
        return Err(PbatError::InvalidParameter {
            name: "train",
            reason: "empty training sequence".into(),
        });
    }
    let keep = n.min(params.hp.seq_len - 1);
    let start = n - keep;
    let mut items: Vec<u32> = train.items[start..n].to_vec();
    let mut behaviors: Vec<u32> = train.behaviors[start..n].to_vec();
    items.push(params.hp.mask_item());
    behaviors.push(z);
    rank_at_mask(params, train.user, &items, &behaviors, keep + 1, keep, target, candidates)
}

/// Scores every candidate for the user's next interaction with behavior
/// `z`, without ranking against a known target. The history is prepared
/// exactly as in [`predict_next`]; returned scores align with
/// `candidates`, higher meaning a closer match. All ids are validated, so
/// this is safe to call on untrusted input.
pub fn score_next(
    params: &ModelParams,
    train: &MultiBehaviorSequence,
    z: u32,
    candidates: &[u32],
) -> Result<Vec<f64>> {
    let n = train.valid_len;
    if n == 0 {
        return Err(PbatError::InvalidParameter {
            name: "train",
            reason: "empty training sequence".into(),
        });
    }
    if n > train.items.len() || n > train.behaviors.len() {
        return Err(PbatError::InvalidParameter {
            name: "train",
            reason: format!("valid_len {n} exceeds the stored sequence"),
        });
    }
    if train.user >= params.hp.num_users {
        return Err(PbatError::InvalidParameter {
            name: "user",
            reason: format!("user id {} out of range", train.user),
        });
    }
    if z >= params.hp.num_behaviors {
        return Err(PbatError::InvalidParameter {
            name: "z",
            reason: format!("behavior id {z} out of range"),
        });
    }
    for &item in &train.items[..n] {
        if item >= params.hp.num_items {
            return Err(PbatError::InvalidParameter {
                name: "train",
                reason: format!("history item id {item} out of range"),
            });
        }
    }
    for &b in &train.behaviors[..n] {
        if b >= params.hp.num_behaviors {
            return Err(PbatError::InvalidParameter {
                name: "train",
                reason: format!("history behavior id {b} out of range"),
            });
        }
    }
    let keep = n.min(params.hp.seq_len - 1);
    let start = n - keep;
    let mut items: Vec<u32> = train.items[start..n].to_vec();
    let mut behaviors: Vec<u32> = train.behaviors[start..n].to_vec();
    items.push(params.hp.mask_item());
    behaviors.push(z);
    candidate_scores(params, train.user, &items, &behaviors, keep + 1, keep, candidates)
}

/// Re-ranks the item at `pos` of the sequence itself: that position is
/// replaced by the mask token and the original item is ranked among the
/// candidates. Used to probe how well a model has memorized its training
/// rows.
pub fn rank_masked_position(
    params: &ModelParams,
    seq: &MultiBehaviorSequence,
    pos: usize,
    candidates: &[u32],
) -> Result<RankResult> {
    if pos >= seq.valid_len {
        return Err(PbatError::InvalidParameter {
            name: "pos",
            reason: format!("{pos} is not a valid position (valid_len {})", seq.valid_len),
        });
    }
    let target = seq.items[pos];
    let mut items = seq.items[..seq.valid_len].to_vec();
    items[pos] = params.hp.mask_item();
    let behaviors = &seq.behaviors[..seq.valid_len];
    rank_at_mask(params, seq.user, &items, behaviors, seq.valid_len, pos, target, candidates)
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

/// Fraction of ranks within the top K.
pub fn hr_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(PbatError::InvalidParameter {
            name: "ranks",
            reason: "empty rank list".into(),
        });
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

/// Single-relevant-item NDCG: mean of `1 / log2(rank + 1)` for ranks within
/// K, zero otherwise (ideal DCG is 1).
pub fn ndcg_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(PbatError::InvalidParameter {
            name: "ranks",
            reason: "empty rank list".into(),
        });
    }
    let total: f64 = ranks
        .iter()
        .map(|&r| if r <= k { 1.0 / ((r as f64 + 1.0).log2()) } else { 0.0 })
        .sum();
    Ok(total / ranks.len() as f64)
}

fn metrics_from_ranks(ranks: &[usize]) -> Result<MetricsReport> {
    Ok(MetricsReport {
        hr5: hr_at_k(ranks, 5)?,
        hr10: hr_at_k(ranks, 10)?,
        ndcg5: ndcg_at_k(ranks, 5)?,
        ndcg10: ndcg_at_k(ranks, 10)?,
        users: ranks.len(),
    })
}

/// Items the user has interacted with anywhere in the split (train prefix
/// plus both held-out events).
fn user_history(split_user: &crate::data::SplitUser) -> BTreeSet<u32> {
    let seq = &split_user.train;
    let mut h: BTreeSet<u32> = seq.items[..seq.valid_len].iter().copied().collect();
    h.insert(split_user.val.item);
    h.insert(split_user.test.item);
    h
}

fn build_candidates(
    mode: CandidateMode,
    num_items: u32,
    history: &BTreeSet<u32>,
    target: u32,
    rng: &mut ChaCha8Rng,
) -> Vec<u32> {
    match mode {
        CandidateMode::All => {
            let mut c: Vec<u32> = (0..num_items)
                .filter(|i| !history.contains(i) || *i == target)
                .collect();
            if !c.contains(&target) {
                c.push(target);
            }
            c
        }
        CandidateMode::Sampled(n) => {
            let mut picked = BTreeSet::new();
            picked.insert(target);
            let available = (num_items as usize).saturating_sub(history.len());
            let want = n.min(available) + 1;
            let mut guard = 0usize;
            while picked.len() < want && guard < 100_000 {
                let cand = rng.gen_range(0..num_items);
                if !history.contains(&cand) {
                    picked.insert(cand);
                }
                guard += 1;
            }
            picked.into_iter().collect()
        }
    }
}

/// Evaluates each user's held-out test event by ranking the test item at an
/// appended mask slot carrying the test behavior.
pub fn evaluate(
    params: &ModelParams,
    split: &SplitDataset,
    mode: CandidateMode,
    seed: u64,
) -> Result<MetricsReport> {
    if split.users.is_empty() {
        return Err(PbatError::InvalidParameter {
            name: "split",
            reason: "no evaluable users".into(),
        });
    }
    let mut ranks = Vec::with_capacity(split.users.len());
    for su in &split.users {
        let history = user_history(su);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, su.train.user as u64]));
        let candidates =
            build_candidates(mode, split.num_items, &history, su.test.item, &mut rng);
        let result = predict_next(params, &su.train, su.test.behavior, su.test.item, &candidates)?;
        ranks.push(result.rank);
    }
    metrics_from_ranks(&ranks)
}

// ---------------------------------------------------------------------------
// behavior-dependency matrix
// ---------------------------------------------------------------------------

/// The `|B| × |B|` behavior-dependency matrix. Without a user, entry (i, j)
/// is the norm of the directed relation mean for i → j. With a user, that
/// norm is scaled by the squared Wasserstein distance between the user's
/// personalized patterns for behaviors i and j — the same factor that
/// drives the impact factors inside the attention layer.
pub fn export_behavior_matrix(
    params: &ModelParams,
    user: Option<u32>,
) -> Result<Vec<Vec<f64>>> {
    let nb = params.hp.num_behaviors as usize;
    let patterns: Option<Vec<_>> = match user {
        Some(u) => {
            if u >= params.hp.num_users {
                return Err(PbatError::InvalidParameter {
                    name: "user",
                    reason: format!("id {u} out of range ({} users)", params.hp.num_users),
                });
            }
            Some(
                (0..nb as u32)
                    .map(|b| personalized_pattern(params, u, b))
                    .collect::<Result<_>>()?,
            )
        }
        None => None,
    };
    let mut matrix = vec![vec![0.0; nb]; nb];
    for i in 0..nb {
        for j in 0..nb {
            let rel = lookup_relation(params, i as u32, j as u32)?;
            let norm = rel.mean.iter().map(|x| x * x).sum::<f64>().sqrt();
            matrix[i][j] = match &patterns {
                Some(p) => wasserstein_sq(&p[i], &p[j])? * norm,
                None => norm,
            };
        }
    }
    Ok(matrix)
}
