//! Minimal reverse-mode automatic differentiation over `f64` vectors.
//!
//! The encoder's forward pass is recorded eagerly onto a tape of
//! vector-valued nodes; `backward` then sweeps the tape once in reverse
//! and scatters parameter gradients into a flat gradient arena with the
//! same layout as [`crate::params::ParamStore`]. Values for all nodes live
//! in one growable buffer, so a tape can be `reset` and reused across
//! training rows without reallocating.
//!
//! The op set is deliberately small — elementwise arithmetic, the two ELU
//! variants, square/sqrt/reciprocal/clamp, softplus, sum/broadcast,
//! row-vector × matrix products, softmax, concat/index and a fused
//! attention mixture — and every backward rule is covered by a central
//! finite-difference test at the bottom of this file.

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(u32);

#[derive(Debug, Clone)]
enum Op {
    Const,
    /// Copy of `params[off..off+len]`; gradients accumulate at the same
    /// offsets of the gradient arena.
    Leaf { param_off: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddConst(Var),
    ScaleConst(Var, f64),
    /// max(x, c) elementwise; gradient passes where x ≥ c.
    ClampMin(Var, f64),
    Elu(Var),
    EluPlusOne(Var),
    Sqrt(Var),
    Square(Var),
    Recip(Var),
    Softplus(Var),
    /// Vector → length-1 sum.
    Sum(Var),
    /// Length-1 scalar → vector of `len` copies.
    Broadcast(Var),
    /// Elementwise vector × length-1 scalar.
    MulBcast(Var, Var),
    /// y = x · W with row-major W of shape [len(x), len(y)].
    MatVec { w: Var, x: Var },
    Softmax(Var),
    Concat(Box<[Var]>),
    /// Length-1 view of one element.
    Index(Var, usize),
    /// y = Σ_i f(w_i) · xs_i with f = id (`square = false`) or f = (·)²;
    /// w is a weight vector of length len(xs), all xs the same length.
    WeightedSum { w: Var, xs: Box<[Var]>, square: bool },
}

struct Node {
    op: Op,
    off: usize,
    len: usize,
}

pub struct Tape {
    nodes: Vec<Node>,
    vals: Vec<f64>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), vals: Vec::new() }
    }

    /// Drops all nodes but keeps the allocated buffers.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.vals.clear();
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let n = &self.nodes[v.0 as usize];
        &self.vals[n.off..n.off + n.len]
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let s = self.value(v);
        debug_assert_eq!(s.len(), 1);
        s[0]
    }

    fn len_of(&self, v: Var) -> usize {
        self.nodes[v.0 as usize].len
    }

    fn push(&mut self, op: Op, len: usize) -> (Var, usize) {
        let off = self.vals.len();
        self.vals.resize(off + len, 0.0);
        self.nodes.push(Node { op, off, len });
        (Var(self.nodes.len() as u32 - 1), off)
    }

    pub fn constant(&mut self, data: &[f64]) -> Var {
        let (v, off) = self.push(Op::Const, data.len());
        self.vals[off..off + data.len()].copy_from_slice(data);
        v
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(&[x])
    }

    /// Stages `params[range]` as a differentiable leaf.
    pub fn leaf(&mut self, params: &[f64], range: std::ops::Range<usize>) -> Var {
        let len = range.len();
        let (v, off) = self.push(Op::Leaf { param_off: range.start }, len);
        self.vals[off..off + len].copy_from_slice(&params[range]);
        v
    }

    fn binary(&mut self, op: Op, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.len_of(a), self.len_of(b));
        let len = self.len_of(a);
        let (v, off) = self.push(op, len);
        let (ao, bo) = (self.nodes[a.0 as usize].off, self.nodes[b.0 as usize].off);
        for i in 0..len {
            let (x, y) = (self.vals[ao + i], self.vals[bo + i]);
            self.vals[off + i] = match &self.nodes.last().unwrap().op {
                Op::Add(..) => x + y,
                Op::Sub(..) => x - y,
                Op::Mul(..) => x * y,
                Op::Div(..) => x / y,
                _ => unreachable!(),
            };
        }
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(Op::Add(a, b), a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(Op::Sub(a, b), a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(Op::Mul(a, b), a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(Op::Div(a, b), a, b)
    }

    fn unary(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Var {
        let len = self.len_of(a);
        let (v, off) = self.push(op, len);
        let ao = self.nodes[a.0 as usize].off;
        for i in 0..len {
            self.vals[off + i] = f(self.vals[ao + i]);
        }
        v
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.unary(Op::AddConst(a), a, |x| x + c)
    }

    pub fn scale_const(&mut self, a: Var, c: f64) -> Var {
        self.unary(Op::ScaleConst(a, c), a, |x| x * c)
    }

    pub fn clamp_min(&mut self, a: Var, c: f64) -> Var {
        self.unary(Op::ClampMin(a, c), a, |x| x.max(c))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(Op::Elu(a), a, |x| if x >= 0.0 { x } else { x.exp() - 1.0 })
    }

    pub fn elu_plus_one(&mut self, a: Var) -> Var {
        self.unary(Op::EluPlusOne(a), a, |x| if x >= 0.0 { x + 1.0 } else { x.exp() })
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(Op::Sqrt(a), a, f64::sqrt)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Op::Square(a), a, |x| x * x)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(Op::Recip(a), a, f64::recip)
    }

    /// Numerically stable ln(1 + eˣ).
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Op::Softplus(a), a, |x| x.max(0.0) + (-x.abs()).exp().ln_1p())
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let ao = self.nodes[a.0 as usize].off;
        let total: f64 = self.vals[ao..ao + self.len_of(a)].iter().sum();
        let (v, off) = self.push(Op::Sum(a), 1);
        self.vals[off] = total;
        v
    }

    pub fn broadcast(&mut self, a: Var, len: usize) -> Var {
        debug_assert_eq!(self.len_of(a), 1);
        let x = self.vals[self.nodes[a.0 as usize].off];
        let (v, off) = self.push(Op::Broadcast(a), len);
        self.vals[off..off + len].fill(x);
        v
    }

    /// Vector `a` scaled by length-1 node `s`.
    pub fn mul_bcast(&mut self, a: Var, s: Var) -> Var {
        debug_assert_eq!(self.len_of(s), 1);
        let len = self.len_of(a);
        let (v, off) = self.push(Op::MulBcast(a, s), len);
        let ao = self.nodes[a.0 as usize].off;
        let sv = self.vals[self.nodes[s.0 as usize].off];
        for i in 0..len {
            self.vals[off + i] = self.vals[ao + i] * sv;
        }
        v
    }

    /// y = x · W for row-major W of shape [len(x), out_dim].
    pub fn matvec(&mut self, x: Var, w: Var, out_dim: usize) -> Var {
        let in_dim = self.len_of(x);
        debug_assert_eq!(self.len_of(w), in_dim * out_dim);
        let (v, off) = self.push(Op::MatVec { w, x }, out_dim);
        let xo = self.nodes[x.0 as usize].off;
        let wo = self.nodes[w.0 as usize].off;
        for k in 0..in_dim {
            let xk = self.vals[xo + k];
            if xk == 0.0 {
                continue;
            }
            for j in 0..out_dim {
                self.vals[off + j] += xk * self.vals[wo + k * out_dim + j];
            }
        }
        v
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let len = self.len_of(a);
        let ao = self.nodes[a.0 as usize].off;
        let max = self.vals[ao..ao + len]
            .iter()
            .fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let (v, off) = self.push(Op::Softmax(a), len);
        let mut z = 0.0;
        for i in 0..len {
            let e = (self.vals[ao + i] - max).exp();
            self.vals[off + i] = e;
            z += e;
        }
        for i in 0..len {
            self.vals[off + i] /= z;
        }
        v
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let len = parts.iter().map(|&p| self.len_of(p)).sum();
        let (v, mut off) = self.push(Op::Concat(parts.into()), len);
        for &p in parts {
            let po = self.nodes[p.0 as usize].off;
            let plen = self.nodes[p.0 as usize].len;
            for i in 0..plen {
                self.vals[off + i] = self.vals[po + i];
            }
            off += plen;
        }
        v
    }

    pub fn index(&mut self, a: Var, i: usize) -> Var {
        debug_assert!(i < self.len_of(a));
        let x = self.vals[self.nodes[a.0 as usize].off + i];
        let (v, off) = self.push(Op::Index(a, i), 1);
        self.vals[off] = x;
        v
    }

    /// Attention mixture: Σ_i w_i · xs_i, or Σ_i w_i² · xs_i when
    /// `square` is set (the variance side of a Gaussian mixture).
    pub fn weighted_sum(&mut self, w: Var, xs: &[Var], square: bool) -> Var {
        debug_assert_eq!(self.len_of(w), xs.len());
        debug_assert!(!xs.is_empty());
        let len = self.len_of(xs[0]);
        let (v, off) = self.push(Op::WeightedSum { w, xs: xs.into(), square }, len);
        let wo = self.nodes[w.0 as usize].off;
        for (i, &x) in xs.iter().enumerate() {
            debug_assert_eq!(self.len_of(x), len);
            let mut wi = self.vals[wo + i];
            if square {
                wi *= wi;
            }
            let xo = self.nodes[x.0 as usize].off;
            for j in 0..len {
                self.vals[off + j] += wi * self.vals[xo + j];
            }
        }
        v
    }

    /// Reverse sweep from the length-1 node `loss`, accumulating parameter
    /// gradients into `grad_out` (same layout as the arena the leaves were
    /// staged from). `grad_out` is added to, not overwritten.
    pub fn backward(&mut self, loss: Var, grad_out: &mut [f64]) {
        debug_assert_eq!(self.len_of(loss), 1);
        let mut g = vec![0.0; self.vals.len()];
        g[self.nodes[loss.0 as usize].off] = 1.0;

        for idx in (0..=loss.0 as usize).rev() {
            let (off, len) = (self.nodes[idx].off, self.nodes[idx].len);
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Const => {}
                Op::Leaf { param_off } => {
                    for i in 0..len {
                        grad_out[param_off + i] += g[off + i];
                    }
                }
                Op::Add(a, b) => {
                    let (ao, bo) = (self.nodes[a.0 as usize].off, self.nodes[b.0 as usize].off);
                    for i in 0..len {
                        let dy = g[off + i];
                        g[ao + i] += dy;
                        g[bo + i] += dy;
                    }
                }
                Op::Sub(a, b) => {
                    let (ao, bo) = (self.nodes[a.0 as usize].off, self.nodes[b.0 as usize].off);
                    for i in 0..len {
                        let dy = g[off + i];
                        g[ao + i] += dy;
                        g[bo + i] -= dy;
                    }
                }
                Op::Mul(a, b) => {
                    let (ao, bo) = (self.nodes[a.0 as usize].off, self.nodes[b.0 as usize].off);
                    for i in 0..len {
                        let dy = g[off + i];
                        g[ao + i] += dy * self.vals[bo + i];
                        g[bo + i] += dy * self.vals[ao + i];
                    }
                }
                Op::Div(a, b) => {
                    let (ao, bo) = (self.nodes[a.0 as usize].off, self.nodes[b.0 as usize].off);
                    for i in 0..len {
                        let dy = g[off + i];
                        let binv = 1.0 / self.vals[bo + i];
                        g[ao + i] += dy * binv;
                        g[bo + i] -= dy * self.vals[off + i] * binv;
                    }
                }
                Op::AddConst(a) => {
                    let ao = self.nodes[a.0 as usize].off;
                    for i in 0..len {
                        g[ao + i] += g[off + i];
                    }
                }
                Op::ScaleConst(a, c) => {
                    let ao = self.nodes[a.0 as usize].off;
                    for i in 0..len {
                        g[ao + i] += c * g[off + i];
                    }
                }
                Op::ClampMin(a, c) => {
                    let ao = self.nodes[a.0 as usize].off;
                    for i in 0..len {
                        if self.vals[ao + i] >= c {
                            g[ao + i] += g[off + i];
                        }
                    }
                }
                Op::Elu(a) => {
                    let ao = self.nodes[a.0 as usize].off;
                    for i in 0..len {
                        let x = self.vals[ao + i];
                        let d = if x >= 0.0 { 1.0 } else { self.vals[off + i] + 1.0 };
                        g[ao + i] += g[off + i] * d;
                    }
                }
                Op::EluPlusOne(a) => {
                    let ao = self.nodes[a.0 as usize].off;
                    for i in 0..len {
                        let x = self.vals[ao + i];
                        let d = if x >= 0.0 { 1.0 } else { self.vals[off + i] };
                        g[ao + i] += g[off + i] * d;
                    }
                }
                Op::Sqrt(a) => {
                    let ao = self.nodes[a.0 as usize].off;
                    for i in 0..len {
                        g[ao + i] += g[off + i] * 0.5 / self.vals[off + i];
                    }
                }
                Op::Square(a) => {
                    let ao = self.nodes[a.0 as usize].off;
                    for i in 0..len {
                        g[ao + i] += g[off + i] * 2.0 * self.vals[ao + i];
                    }
                }
                Op::Recip(a) => {
                    let ao = self.nodes[a.0 as usize].off;
                    for i in 0..len {
                        let y = self.vals[off + i];
                        g[ao + i] -= g[off + i] * y * y;
                    }
                }
                Op::Softplus(a) => {
                    let ao = self.nodes[a.0 as usize].off;
                    for i in 0..len {
                        let x = self.vals[ao + i];
                        let sig = 1.0 / (1.0 + (-x).exp());
                        g[ao + i] += g[off + i] * sig;
                    }
                }
                Op::Sum(a) => {
                    let ao = self.nodes[a.0 as usize].off;
                    let alen = self.nodes[a.0 as usize].len;
                    let dy = g[off];
                    for i in 0..alen {
                        g[ao + i] += dy;
                    }
                }
                Op::Broadcast(a) => {
                    let ao = self.nodes[a.0 as usize].off;
                    let mut acc = 0.0;
                    for i in 0..len {
                        acc += g[off + i];
                    }
                    g[ao] += acc;
                }
                Op::MulBcast(a, s) => {
                    let ao = self.nodes[a.0 as usize].off;
                    let so = self.nodes[s.0 as usize].off;
                    let sv = self.vals[so];
                    let mut ds = 0.0;
                    for i in 0..len {
                        let dy = g[off + i];
                        g[ao + i] += dy * sv;
                        ds += dy * self.vals[ao + i];
                    }
                    g[so] += ds;
                }
                Op::MatVec { w, x } => {
                    let xo = self.nodes[x.0 as usize].off;
                    let in_dim = self.nodes[x.0 as usize].len;
                    let wo = self.nodes[w.0 as usize].off;
                    for k in 0..in_dim {
                        let xk = self.vals[xo + k];
                        let mut dxk = 0.0;
                        for j in 0..len {
                            let dy = g[off + j];
                            dxk += dy * self.vals[wo + k * len + j];
                            g[wo + k * len + j] += dy * xk;
                        }
                        g[xo + k] += dxk;
                    }
                }
                Op::Softmax(a) => {
                    let ao = self.nodes[a.0 as usize].off;
                    let mut dot = 0.0;
                    for i in 0..len {
                        dot += g[off + i] * self.vals[off + i];
                    }
                    for i in 0..len {
                        g[ao + i] += self.vals[off + i] * (g[off + i] - dot);
                    }
                }
                Op::Concat(parts) => {
                    let mut cursor = off;
                    for p in parts.iter() {
                        let po = self.nodes[p.0 as usize].off;
                        let plen = self.nodes[p.0 as usize].len;
                        for i in 0..plen {
                            g[po + i] += g[cursor + i];
                        }
                        cursor += plen;
                    }
                }
                Op::Index(a, i) => {
                    let ao = self.nodes[a.0 as usize].off;
                    g[ao + i] += g[off];
                }
                Op::WeightedSum { w, xs, square } => {
                    let wo = self.nodes[w.0 as usize].off;
                    for (i, x) in xs.iter().enumerate() {
                        let xo = self.nodes[x.0 as usize].off;
                        let wi = self.vals[wo + i];
                        let f = if square { wi * wi } else { wi };
                        let mut dot = 0.0;
                        for j in 0..len {
                            let dy = g[off + j];
                            g[xo + j] += f * dy;
                            dot += dy * self.vals[xo + j];
                        }
                        g[wo + i] += if square { 2.0 * wi * dot } else { dot };
                    }
                }
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}
