//! Model hyperparameters and the flat parameter store.
//!
//! Every learnable tensor lives in one contiguous `Vec<f64>` arena with a
//! named-tensor manifest on top. Gradients, Adam moments and checkpoints
//! all reuse the same flat layout, and the autodiff tape addresses
//! parameters by arena range. Registration order is a pure function of the
//! hyperparameters, so two models built from the same shapes agree on
//! every offset.
//!
//! Naming scheme (also the checkpoint manifest):
//!
//! * tables: `item_mean`, `item_rawvar`, `user_mean`, `user_rawvar`,
//!   `behavior_mean`, `behavior_rawvar`, `position_mean`,
//!   `position_rawvar`, `relation_mean`, `relation_rawvar`
//! * `pattern_align` — D×D mean alignment used by personalized patterns
//! * per block `b`, head `h`: `block{b}.head{h}.{wq,wk,wv}_{item,behavior}_{mean,var}`,
//!   `align_ip`, `align_pos`, `pattern_proj_mean`, `pattern_proj_var`
//! * per block `b`, behavior `j` (including the padding behavior):
//!   `block{b}.ffl{j}.{w1,b1,w2,b2}_{mean,var}`
//! * per block `b`: `block{b}.ln_{mean,var}_{gain,bias}`
//!
//! `*_rawvar` tables store pre-activation values that become variances
//! through `elu_plus_one` at lookup time; `*_var` weights belong to the
//! variance stream of a projection. All matrices are row-major `[in, out]`
//! and apply as `y = x · W`.
//!
//! Initial values are drawn with a seeded ChaCha stream and rounded
//! through `f32`, so a freshly initialized model survives a checkpoint
//! round trip bit-for-bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::mix_seed;
use crate::error::{PbatError, Result};

pub const INIT_STD: f64 = 0.02;

/// Initial layer-norm gain. Starting well below 1 keeps encoder output
/// means on a small shell, so item embeddings (which start near zero) only
/// have to travel a short distance before scoring can separate candidates —
/// Adam moves each coordinate by at most ~lr per step, which makes that
/// distance the effective budget of short training runs.
pub const GAIN_INIT: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HyperParams {
    /// Embedding dimensionality D, split evenly across heads.
    pub embed_dim: usize,
    /// Model sequence length L.
    pub seq_len: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    /// Hidden width of the behavior-specific feed-forward layers.
    pub ffn_dim: usize,
    pub num_items: u32,
    pub num_users: u32,
    pub num_behaviors: u32,
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let positive: [(&str, usize); 5] = [
            ("embed_dim", self.embed_dim),
            ("seq_len", self.seq_len),
            ("n_blocks", self.n_blocks),
            ("n_heads", self.n_heads),
            ("ffn_dim", self.ffn_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(PbatError::InvalidParameter {
                    name: "hyperparams",
                    reason: format!("{name} must be positive"),
                });
            }
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(PbatError::InvalidParameter {
                name: "hyperparams",
                reason: format!(
                    "embed_dim {} must be divisible by n_heads {}",
                    self.embed_dim, self.n_heads
                ),
            });
        }
        if self.num_items == 0 || self.num_users == 0 || self.num_behaviors == 0 {
            return Err(PbatError::InvalidParameter {
                name: "hyperparams",
                reason: "vocabulary sizes must be positive".into(),
            });
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    pub fn pad_item(&self) -> u32 {
        self.num_items
    }

    pub fn mask_item(&self) -> u32 {
        self.num_items + 1
    }

    pub fn pad_behavior(&self) -> u32 {
        self.num_behaviors
    }
}

pub type TensorId = usize;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorMeta {
    pub name: String,
    pub offset: usize,
    pub dims: Vec<usize>,
}

impl TensorMeta {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Named tensors over one flat arena.
#[derive(Debug, Clone)]
pub struct ParamStore {
    metas: Vec<TensorMeta>,
    data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self { metas: Vec::new(), data: Vec::new() }
    }

    pub fn register(&mut self, name: String, dims: &[usize]) -> TensorId {
        debug_assert!(
            self.metas.iter().all(|m| m.name != name),
            "duplicate tensor name {name}"
        );
        let offset = self.data.len();
        let meta = TensorMeta { name, offset, dims: dims.to_vec() };
        self.data.resize(offset + meta.len(), 0.0);
        self.metas.push(meta);
        self.metas.len() - 1
    }

    pub fn meta(&self, id: TensorId) -> &TensorMeta {
        &self.metas[id]
    }

    pub fn metas(&self) -> &[TensorMeta] {
        &self.metas
    }

    pub fn find(&self, name: &str) -> Option<TensorId> {
        self.metas.iter().position(|m| m.name == name)
    }

    pub fn range(&self, id: TensorId) -> std::ops::Range<usize> {
        let m = &self.metas[id];
        m.offset..m.offset + m.len()
    }

    /// Arena range of one row of a rank-2 tensor (or one `[dim]` slice of
    /// the flattened leading axes of a higher-rank tensor).
    pub fn row_range(&self, id: TensorId, row: usize) -> std::ops::Range<usize> {
        let m = &self.metas[id];
        let width = *m.dims.last().expect("rank >= 1");
        let rows = m.len() / width;
        assert!(row < rows, "row {row} out of range for {}", m.name);
        let start = m.offset + row * width;
        start..start + width
    }

    pub fn tensor(&self, id: TensorId) -> &[f64] {
        &self.data[self.range(id)]
    }

    pub fn tensor_mut(&mut self, id: TensorId) -> &mut [f64] {
        let r = self.range(id);
        &mut self.data[r]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone)]
pub struct HeadIds {
    pub wq_item_mean: TensorId,
    pub wq_behavior_mean: TensorId,
    pub wq_item_var: TensorId,
    pub wq_behavior_var: TensorId,
    pub wk_item_mean: TensorId,
    pub wk_behavior_mean: TensorId,
    pub wk_item_var: TensorId,
    pub wk_behavior_var: TensorId,
    pub wv_item_mean: TensorId,
    pub wv_behavior_mean: TensorId,
    pub wv_item_var: TensorId,
    pub wv_behavior_var: TensorId,
    /// d_h×d_h alignments for the impact-factor and position means inside
    /// key/query fusion.
    pub align_ip: TensorId,
    pub align_pos: TensorId,
    /// D→d_h projections shared by personalized patterns and position
    /// distributions on this head.
    pub pattern_proj_mean: TensorId,
    pub pattern_proj_var: TensorId,
}

#[derive(Debug, Clone)]
pub struct FflIds {
    pub w1_mean: TensorId,
    pub b1_mean: TensorId,
    pub w2_mean: TensorId,
    pub b2_mean: TensorId,
    pub w1_var: TensorId,
    pub b1_var: TensorId,
    pub w2_var: TensorId,
    pub b2_var: TensorId,
}

#[derive(Debug, Clone)]
pub struct BlockIds {
    pub heads: Vec<HeadIds>,
    /// One feed-forward layer per behavior id, padding behavior included —
    /// padded positions flow through the encoder even though the loss
    /// never reads them.
    pub ffl: Vec<FflIds>,
    pub ln_mean_gain: TensorId,
    pub ln_mean_bias: TensorId,
    pub ln_var_gain: TensorId,
    pub ln_var_bias: TensorId,
}

#[derive(Debug, Clone)]
pub struct TensorIds {
    pub item_mean: TensorId,
    pub item_rawvar: TensorId,
    pub user_mean: TensorId,
    pub user_rawvar: TensorId,
    pub behavior_mean: TensorId,
    pub behavior_rawvar: TensorId,
    pub position_mean: TensorId,
    pub position_rawvar: TensorId,
    pub relation_mean: TensorId,
    pub relation_rawvar: TensorId,
    pub pattern_align: TensorId,
    pub blocks: Vec<BlockIds>,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub hp: HyperParams,
    pub store: ParamStore,
    pub ids: TensorIds,
}

impl ModelParams {
    /// Builds the full tensor layout for `hp` with zeroed values.
    pub fn zeroed(hp: HyperParams) -> Result<Self> {
        hp.validate()?;
        let d = hp.embed_dim;
        let dh = hp.head_dim();
        let v = hp.num_items as usize;
        let u = hp.num_users as usize;
        let b = hp.num_behaviors as usize;
        let mut s = ParamStore::new();

        let item_mean = s.register("item_mean".into(), &[v + 2, d]);
        let item_rawvar = s.register("item_rawvar".into(), &[v + 2, d]);
        let user_mean = s.register("user_mean".into(), &[u, d]);
        let user_rawvar = s.register("user_rawvar".into(), &[u, d]);
        let behavior_mean = s.register("behavior_mean".into(), &[b + 1, d]);
        let behavior_rawvar = s.register("behavior_rawvar".into(), &[b + 1, d]);
        let position_mean = s.register("position_mean".into(), &[hp.seq_len, d]);
        let position_rawvar = s.register("position_rawvar".into(), &[hp.seq_len, d]);
        let relation_mean = s.register("relation_mean".into(), &[b, b, d]);
        let relation_rawvar = s.register("relation_rawvar".into(), &[b, b, d]);
        let pattern_align = s.register("pattern_align".into(), &[d, d]);

        let mut blocks = Vec::with_capacity(hp.n_blocks);
        for bi in 0..hp.n_blocks {
            let mut heads = Vec::with_capacity(hp.n_heads);
            for hi in 0..hp.n_heads {
                let p = |suffix: &str| format!("block{bi}.head{hi}.{suffix}");
                heads.push(HeadIds {
                    wq_item_mean: s.register(p("wq_item_mean"), &[d, dh]),
                    wq_behavior_mean: s.register(p("wq_behavior_mean"), &[d, dh]),
                    wq_item_var: s.register(p("wq_item_var"), &[d, dh]),
                    wq_behavior_var: s.register(p("wq_behavior_var"), &[d, dh]),
                    wk_item_mean: s.register(p("wk_item_mean"), &[d, dh]),
                    wk_behavior_mean: s.register(p("wk_behavior_mean"), &[d, dh]),
                    wk_item_var: s.register(p("wk_item_var"), &[d, dh]),
                    wk_behavior_var: s.register(p("wk_behavior_var"), &[d, dh]),
                    wv_item_mean: s.register(p("wv_item_mean"), &[d, dh]),
                    wv_behavior_mean: s.register(p("wv_behavior_mean"), &[d, dh]),
                    wv_item_var: s.register(p("wv_item_var"), &[d, dh]),
                    wv_behavior_var: s.register(p("wv_behavior_var"), &[d, dh]),
                    align_ip: s.register(p("align_ip"), &[dh, dh]),
                    align_pos: s.register(p("align_pos"), &[dh, dh]),
                    pattern_proj_mean: s.register(p("pattern_proj_mean"), &[d, dh]),
                    pattern_proj_var: s.register(p("pattern_proj_var"), &[d, dh]),
                });
            }
            let mut ffl = Vec::with_capacity(b + 1);
            for ji in 0..=b {
                let p = |suffix: &str| format!("block{bi}.ffl{ji}.{suffix}");
                ffl.push(FflIds {
                    w1_mean: s.register(p("w1_mean"), &[d, hp.ffn_dim]),
                    b1_mean: s.register(p("b1_mean"), &[hp.ffn_dim]),
                    w2_mean: s.register(p("w2_mean"), &[hp.ffn_dim, d]),
                    b2_mean: s.register(p("b2_mean"), &[d]),
                    w1_var: s.register(p("w1_var"), &[d, hp.ffn_dim]),
                    b1_var: s.register(p("b1_var"), &[hp.ffn_dim]),
                    w2_var: s.register(p("w2_var"), &[hp.ffn_dim, d]),
                    b2_var: s.register(p("b2_var"), &[d]),
                });
            }
            blocks.push(BlockIds {
                heads,
                ffl,
                ln_mean_gain: s.register(format!("block{bi}.ln_mean_gain"), &[d]),
                ln_mean_bias: s.register(format!("block{bi}.ln_mean_bias"), &[d]),
                ln_var_gain: s.register(format!("block{bi}.ln_var_gain"), &[d]),
                ln_var_bias: s.register(format!("block{bi}.ln_var_bias"), &[d]),
            });
        }

        let ids = TensorIds {
            item_mean,
            item_rawvar,
            user_mean,
            user_rawvar,
            behavior_mean,
            behavior_rawvar,
            position_mean,
            position_rawvar,
            relation_mean,
            relation_rawvar,
            pattern_align,
            blocks,
        };
        Ok(Self { hp, store: s, ids })
    }

    /// Seeded initialization: every table entry and projection weight is
    /// N(0, 0.02²); square alignment matrices start at identity plus the
    /// same noise; biases start at zero and layer-norm gains at
    /// [`GAIN_INIT`]. Values are rounded through `f32` to match checkpoint
    /// precision.
    ///
    /// Three weight families additionally start from signal-preserving
    /// structure (plus the same noise) rather than from zero-mean noise
    /// alone: per-head item-value and pattern projections begin as the
    /// head's slice of the identity, so the concatenated heads initially
    /// pass attended item embeddings through unchanged and projected
    /// pattern geometry mirrors the full-width patterns, and the
    /// feed-forward weights begin as a relu(x) − relu(−x) pair, which is
    /// the identity map whenever the inner width is at least 2D. Without
    /// this structure the attention output reaches the block residual only
    /// through two near-zero linear maps, and gradients that should teach
    /// the attention *where to look* are attenuated to the point that
    /// retrieval never trains at small scale.
    pub fn init(hp: HyperParams, seed: u64) -> Result<Self> {
        let mut model = Self::zeroed(hp)?;
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x7061_7261_6d73]));

        let metas = model.store.metas().to_vec();
        for (id, meta) in metas.iter().enumerate() {
            let kind = InitKind::for_name(&meta.name);
            let dims = meta.dims.clone();
            let t = model.store.tensor_mut(id);
            match kind {
                InitKind::Gaussian => {
                    for x in t.iter_mut() {
                        *x = normal.sample(&mut rng) as f32 as f64;
                    }
                }
                InitKind::IdentityPlusNoise => {
                    let n = dims[0];
                    debug_assert_eq!(dims.len(), 2);
                    debug_assert_eq!(dims[0], dims[1]);
                    for (k, x) in t.iter_mut().enumerate() {
                        let eye = if k / n == k % n { 1.0 } else { 0.0 };
                        *x = (eye + normal.sample(&mut rng)) as f32 as f64;
                    }
                }
                InitKind::IdentitySlice(head) => {
                    let cols = dims[1];
                    for (k, x) in t.iter_mut().enumerate() {
                        let (r, c) = (k / cols, k % cols);
                        let eye = if r == head * cols + c { 1.0 } else { 0.0 };
                        *x = (eye + normal.sample(&mut rng)) as f32 as f64;
                    }
                }
                InitKind::ReluPair => {
                    let (rows, cols) = (dims[0], dims[1]);
                    let d = rows.min(cols);
                    let wide = cols > rows;
                    for (k, x) in t.iter_mut().enumerate() {
                        let (r, c) = (k / cols, k % cols);
                        let eye = if wide {
                            // D×ffn side: x and −x lanes side by side
                            if c == r {
                                1.0
                            } else if c == r + d {
                                -1.0
                            } else {
                                0.0
                            }
                        } else if r == c {
                            1.0
                        } else if r == c + d {
                            -1.0
                        } else {
                            0.0
                        };
                        *x = (eye + normal.sample(&mut rng)) as f32 as f64;
                    }
                }
                InitKind::Zero => t.fill(0.0),
                InitKind::Gain => t.fill(GAIN_INIT as f32 as f64),
            }
        }
        Ok(model)
    }
}

enum InitKind {
    Gaussian,
    IdentityPlusNoise,
    IdentitySlice(usize),
    ReluPair,
    Zero,
    Gain,
}

impl InitKind {
    fn for_name(name: &str) -> Self {
        let leaf = name.rsplit('.').next().unwrap_or(name);
        if leaf == "pattern_align" || leaf == "align_ip" || leaf == "align_pos" {
            InitKind::IdentityPlusNoise
        } else if leaf == "wv_item_mean"
            || leaf == "wv_item_var"
            || leaf == "pattern_proj_mean"
            || leaf == "pattern_proj_var"
        {
            let head = name
                .split('.')
                .find_map(|seg| seg.strip_prefix("head"))
                .and_then(|h| h.parse().ok())
                .unwrap_or(0);
            InitKind::IdentitySlice(head)
        } else if leaf.starts_with("w1_") || leaf.starts_with("w2_") {
            InitKind::ReluPair
        } else if leaf.starts_with("b1_") || leaf.starts_with("b2_") || leaf.ends_with("_bias") {
            InitKind::Zero
        } else if leaf.ends_with("_gain") {
            InitKind::Gain
        } else {
            InitKind::Gaussian
        }
    }
}
