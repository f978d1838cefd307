//! Reverse-mode differentiation over a flat value arena.
//!
//! Objectives are built as expression tapes over named parameter blocks held
//! in a [`ParamStore`]. A node's value is a short `f64` vector (scalars are
//! length-1 vectors); [`Tape::backward`] walks the tape once in reverse and
//! accumulates parameter gradients into a [`GradBuf`] aligned with the store.
//!
//! Two mechanisms exist specifically for the variance-reduced estimators:
//!
//! * [`Tape::detach`] passes a value forward and blocks the gradient, and
//! * [`Tape::frozen`] regions record ops whose parameter reads do not
//!   accumulate gradients while node-to-node flow stays intact (the
//!   "sticking the landing" / doubly-reparameterized evaluation of a
//!   density at a reparameterized sample).

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::fm;

/// Handle to a parameter block in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) u32);

/// Which side of the model a block belongs to. The generative/inference
/// partition is queryable so tied blocks can be declared [`Role::Shared`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// Generative parameters (decoder, priors).
    Theta,
    /// Inference parameters (encoder).
    Phi,
    /// Used by both sides (e.g. a tied embedding table).
    Shared,
}

#[derive(Debug, Clone)]
struct Block {
    name: String,
    role: Role,
    rows: usize,
    cols: usize,
    offset: usize,
}

/// Flat storage for named parameter blocks. Matrices are row-major
/// `rows x cols`; plain vectors use `rows == 1`.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    blocks: Vec<Block>,
    data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, role: Role, rows: usize, cols: usize, init: &[f64]) -> ParamId {
        assert_eq!(rows * cols, init.len(), "init size mismatch for {name}");
        let offset = self.data.len();
        self.data.extend_from_slice(init);
        self.blocks.push(Block {
            name: String::from(name),
            role,
            rows,
            cols,
            offset,
        });
        ParamId((self.blocks.len() - 1) as u32)
    }

    pub fn add_vec(&mut self, name: &str, role: Role, init: &[f64]) -> ParamId {
        self.add(name, role, 1, init.len(), init)
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.blocks.len() as u32).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn name(&self, p: ParamId) -> &str {
        &self.blocks[p.0 as usize].name
    }

    pub fn role(&self, p: ParamId) -> Role {
        self.blocks[p.0 as usize].role
    }

    pub fn dims(&self, p: ParamId) -> (usize, usize) {
        let b = &self.blocks[p.0 as usize];
        (b.rows, b.cols)
    }

    pub fn offset(&self, p: ParamId) -> usize {
        self.blocks[p.0 as usize].offset
    }

    pub fn block_len(&self, p: ParamId) -> usize {
        let b = &self.blocks[p.0 as usize];
        b.rows * b.cols
    }

    pub fn slice(&self, p: ParamId) -> &[f64] {
        let b = &self.blocks[p.0 as usize];
        &self.data[b.offset..b.offset + b.rows * b.cols]
    }

    pub fn slice_mut(&mut self, p: ParamId) -> &mut [f64] {
        let b = &self.blocks[p.0 as usize];
        let (o, n) = (b.offset, b.rows * b.cols);
        &mut self.data[o..o + n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Ids of blocks with the given role (Shared blocks match both roles).
    pub fn ids_with_role(&self, role: Role) -> Vec<ParamId> {
        self.ids()
            .filter(|&p| {
                let r = self.role(p);
                r == role || r == Role::Shared
            })
            .collect()
    }
}

/// Parameter gradients, flat and aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct GradBuf {
    data: Vec<f64>,
}

impl GradBuf {
    pub fn zeros(store: &ParamStore) -> Self {
        Self {
            data: vec![0.0; store.len()],
        }
    }

    pub fn clear(&mut self) {
        self.data.fill(0.0);
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn slice<'a>(&'a self, store: &ParamStore, p: ParamId) -> &'a [f64] {
        let o = store.offset(p);
        &self.data[o..o + store.block_len(p)]
    }

    pub fn scale(&mut self, c: f64) {
        for g in &mut self.data {
            *g *= c;
        }
    }

    pub fn add_scaled(&mut self, other: &GradBuf, c: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn block_norm(&self, store: &ParamStore, p: ParamId) -> f64 {
        fm::sqrt(self.slice(store, p).iter().map(|g| g * g).sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, g| m.max(fm::abs(*g)))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|g| g.is_finite())
    }
}

/// Four-accumulator dot product; the reassociation lets the backend
/// vectorize what a strict left-to-right reduction cannot.
#[inline]
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut ia = a.chunks_exact(4);
    let mut ib = b.chunks_exact(4);
    for (ca, cb) in (&mut ia).zip(&mut ib) {
        acc[0] += ca[0] * cb[0];
        acc[1] += ca[1] * cb[1];
        acc[2] += ca[2] * cb[2];
        acc[3] += ca[3] * cb[3];
    }
    let mut tail = 0.0;
    for (x, y) in ia.remainder().iter().zip(ib.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(u32);

#[derive(Debug, Clone, Copy)]
enum Op {
    Const,
    Param(ParamId),
    ParamRow(ParamId, u32),
    MatVec(ParamId, NodeId),
    AddBias(ParamId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `m * a + c`, elementwise with constants (the offset only shapes the
    /// forward value).
    AffC(NodeId, f64, #[allow(dead_code)] f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sum(NodeId),
    Dot(NodeId, NodeId),
    LogSumExp(NodeId),
    LogSoftmax(NodeId),
    Get(NodeId, u32),
    /// Inputs live in `Tape::stack_args[start..start+n]`.
    Stack(u32, u32),
    Detach(#[allow(dead_code)] NodeId),
    /// Diagonal Gaussian log-density of `z` under `(mu, sigma)`, summed.
    NormalLogPdf {
        z: NodeId,
        mu: NodeId,
        sigma: NodeId,
    },
    /// Standard-normal log-density of `z`, summed over dimensions.
    StdNormalLogPdf(NodeId),
    /// Value passthrough whose backward multiplies the gradient by a
    /// deferred coefficient (`Tape::gscale[slot]`).
    GradScale(NodeId, u32),
}

#[derive(Debug, Clone, Copy)]
struct Node {
    op: Op,
    off: u32,
    len: u32,
    frozen: bool,
}

/// Handle to a deferred gradient-scale coefficient.
#[derive(Debug, Clone, Copy)]
pub struct GradScaleSlot(u32);

/// Expression tape over a parameter store.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    buf: Vec<f64>,
    stack_args: Vec<NodeId>,
    gscale: Vec<f64>,
    freeze_depth: u32,
    adj_scratch: Vec<f64>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            buf: Vec::new(),
            stack_args: Vec::new(),
            gscale: Vec::new(),
            freeze_depth: 0,
            adj_scratch: Vec::new(),
        }
    }

    /// Drop all nodes, keeping allocations for reuse.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.buf.clear();
        self.stack_args.clear();
        self.gscale.clear();
        self.freeze_depth = 0;
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn val(&self, id: NodeId) -> &[f64] {
        let n = &self.nodes[id.0 as usize];
        &self.buf[n.off as usize..(n.off + n.len) as usize]
    }

    pub fn scalar_val(&self, id: NodeId) -> f64 {
        let v = self.val(id);
        debug_assert_eq!(v.len(), 1);
        v[0]
    }

    /// Run `f` with parameter-gradient accumulation disabled for every op it
    /// records. Node-to-node gradient flow is unaffected.
    pub fn frozen<T>(&mut self, f: impl FnOnce(&mut Self) -> T) -> T {
        self.freeze_depth += 1;
        let out = f(self);
        self.freeze_depth -= 1;
        out
    }

    fn push(&mut self, op: Op, value: &[f64]) -> NodeId {
        let off = self.buf.len() as u32;
        self.buf.extend_from_slice(value);
        self.nodes.push(Node {
            op,
            off,
            len: value.len() as u32,
            frozen: self.freeze_depth > 0,
        });
        NodeId((self.nodes.len() - 1) as u32)
    }

    fn push_with(&mut self, op: Op, len: usize, fill: impl FnOnce(&mut [f64], &[f64])) -> NodeId {
        let off = self.buf.len();
        self.buf.resize(off + len, 0.0);
        let (head, tail) = self.buf.split_at_mut(off);
        fill(tail, head);
        self.nodes.push(Node {
            op,
            off: off as u32,
            len: len as u32,
            frozen: self.freeze_depth > 0,
        });
        NodeId((self.nodes.len() - 1) as u32)
    }

    fn node_range(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0 as usize];
        (n.off as usize, n.len as usize)
    }

    // ------------------------------------------------------------------
    // Node constructors
    // ------------------------------------------------------------------

    pub fn constv(&mut self, value: &[f64]) -> NodeId {
        self.push(Op::Const, value)
    }

    pub fn scalar(&mut self, x: f64) -> NodeId {
        self.push(Op::Const, &[x])
    }

    /// Whole parameter block as a vector node.
    pub fn param(&mut self, p: ParamId) -> NodeId {
        let v = self.params.slice(p);
        let off = self.buf.len() as u32;
        self.buf.extend_from_slice(v);
        self.nodes.push(Node {
            op: Op::Param(p),
            off,
            len: v.len() as u32,
            frozen: self.freeze_depth > 0,
        });
        NodeId((self.nodes.len() - 1) as u32)
    }

    /// One row of a matrix block (embedding lookup).
    pub fn param_row(&mut self, p: ParamId, row: usize) -> NodeId {
        let (rows, cols) = self.params.dims(p);
        assert!(row < rows, "row {row} out of range for {}", self.params.name(p));
        let base = self.params.offset(p) + row * cols;
        let off = self.buf.len() as u32;
        self.buf
            .extend_from_slice(&self.params.data()[base..base + cols]);
        self.nodes.push(Node {
            op: Op::ParamRow(p, row as u32),
            off,
            len: cols as u32,
            frozen: self.freeze_depth > 0,
        });
        NodeId((self.nodes.len() - 1) as u32)
    }

    /// `W x` for a `rows x cols` block and a length-`cols` node.
    pub fn matvec(&mut self, p: ParamId, x: NodeId) -> NodeId {
        let (rows, cols) = self.params.dims(p);
        let (xo, xl) = self.node_range(x);
        assert_eq!(xl, cols, "matvec dim mismatch for {}", self.params.name(p));
        let w = &self.params.data()[self.params.offset(p)..self.params.offset(p) + rows * cols];
        let off = self.buf.len();
        self.buf.resize(off + rows, 0.0);
        let (head, out) = self.buf.split_at_mut(off);
        let xv = &head[xo..xo + cols];
        for (o, wrow) in out.iter_mut().zip(w.chunks_exact(cols)) {
            *o = dot4(wrow, xv);
        }
        self.nodes.push(Node {
            op: Op::MatVec(p, x),
            off: off as u32,
            len: rows as u32,
            frozen: self.freeze_depth > 0,
        });
        NodeId((self.nodes.len() - 1) as u32)
    }

    /// `b + x` where `b` is a vector block of the same length as `x`.
    pub fn add_bias(&mut self, p: ParamId, x: NodeId) -> NodeId {
        let (xo, xl) = self.node_range(x);
        assert_eq!(self.params.block_len(p), xl, "bias dim mismatch");
        let base = self.params.offset(p);
        let off = self.buf.len();
        self.buf.resize(off + xl, 0.0);
        for i in 0..xl {
            self.buf[off + i] = self.params.data()[base + i] + self.buf[xo + i];
        }
        self.nodes.push(Node {
            op: Op::AddBias(p, x),
            off: off as u32,
            len: xl as u32,
            frozen: self.freeze_depth > 0,
        });
        NodeId((self.nodes.len() - 1) as u32)
    }

    /// Affine layer `W x + b`.
    pub fn affine(&mut self, w: ParamId, b: ParamId, x: NodeId) -> NodeId {
        let h = self.matvec(w, x);
        self.add_bias(b, h)
    }

    fn binary(&mut self, op: Op, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> NodeId {
        let (ao, al) = self.node_range(a);
        let (bo, bl) = self.node_range(b);
        assert_eq!(al, bl, "elementwise length mismatch");
        self.push_with(op, al, |out, buf| {
            for i in 0..al {
                out[i] = f(buf[ao + i], buf[bo + i]);
            }
        })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    /// `m * a + c` elementwise.
    pub fn affc(&mut self, a: NodeId, m: f64, c: f64) -> NodeId {
        let (ao, al) = self.node_range(a);
        self.push_with(Op::AffC(a, m, c), al, |out, buf| {
            for i in 0..al {
                out[i] = m * buf[ao + i] + c;
            }
        })
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.affc(a, -1.0, 0.0)
    }

    fn unary(&mut self, op: Op, a: NodeId, f: impl Fn(f64) -> f64) -> NodeId {
        let (ao, al) = self.node_range(a);
        self.push_with(op, al, |out, buf| {
            for i in 0..al {
                out[i] = f(buf[ao + i]);
            }
        })
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Tanh(a), a, fm::tanh)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Sigmoid(a), a, fm::sigmoid)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Softplus(a), a, fm::softplus)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Exp(a), a, fm::exp)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Ln(a), a, fm::ln)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let (ao, al) = self.node_range(a);
        self.push_with(Op::Sum(a), 1, |out, buf| {
            out[0] = buf[ao..ao + al].iter().sum();
        })
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ao, al) = self.node_range(a);
        let (bo, bl) = self.node_range(b);
        assert_eq!(al, bl, "dot length mismatch");
        self.push_with(Op::Dot(a, b), 1, |out, buf| {
            let mut acc = 0.0;
            for i in 0..al {
                acc += buf[ao + i] * buf[bo + i];
            }
            out[0] = acc;
        })
    }

    pub fn logsumexp(&mut self, a: NodeId) -> NodeId {
        let (ao, al) = self.node_range(a);
        self.push_with(Op::LogSumExp(a), 1, |out, buf| {
            out[0] = fm::logsumexp(&buf[ao..ao + al]);
        })
    }

    /// `log((1/k) Σ exp(a_i))`.
    pub fn log_mean_exp(&mut self, a: NodeId) -> NodeId {
        let (_, al) = self.node_range(a);
        let lse = self.logsumexp(a);
        self.affc(lse, 1.0, -fm::ln(al as f64))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let (ao, al) = self.node_range(a);
        self.push_with(Op::LogSoftmax(a), al, |out, buf| {
            let z = fm::logsumexp(&buf[ao..ao + al]);
            for i in 0..al {
                out[i] = buf[ao + i] - z;
            }
        })
    }

    pub fn get(&mut self, a: NodeId, i: usize) -> NodeId {
        let (ao, al) = self.node_range(a);
        assert!(i < al, "get index out of range");
        self.push_with(Op::Get(a, i as u32), 1, |out, buf| {
            out[0] = buf[ao + i];
        })
    }

    /// Concatenate nodes into one vector node.
    pub fn stack(&mut self, parts: &[NodeId]) -> NodeId {
        let start = self.stack_args.len() as u32;
        self.stack_args.extend_from_slice(parts);
        let total: usize = parts.iter().map(|&p| self.node_range(p).1).sum();
        let off = self.buf.len();
        self.buf.resize(off + total, 0.0);
        let mut cur = off;
        for &p in parts {
            let (po, pl) = self.node_range(p);
            for i in 0..pl {
                self.buf[cur + i] = self.buf[po + i];
            }
            cur += pl;
        }
        self.nodes.push(Node {
            op: Op::Stack(start, parts.len() as u32),
            off: off as u32,
            len: total as u32,
            frozen: self.freeze_depth > 0,
        });
        NodeId((self.nodes.len() - 1) as u32)
    }

    /// Forward the value, block the gradient.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let (ao, al) = self.node_range(a);
        self.push_with(Op::Detach(a), al, |out, buf| {
            out.copy_from_slice(&buf[ao..ao + al]);
        })
    }

    /// Forward the value; the backward pass multiplies the flowing gradient
    /// by a coefficient that may be set after the forward pass (the doubly
    /// reparameterized estimators need weights that depend on downstream
    /// values). The coefficient defaults to 1.
    pub fn grad_scale_deferred(&mut self, a: NodeId) -> (NodeId, GradScaleSlot) {
        let slot = self.gscale.len() as u32;
        self.gscale.push(1.0);
        let (ao, al) = self.node_range(a);
        let id = self.push_with(Op::GradScale(a, slot), al, |out, buf| {
            out.copy_from_slice(&buf[ao..ao + al]);
        });
        (id, GradScaleSlot(slot))
    }

    pub fn set_grad_scale(&mut self, slot: GradScaleSlot, c: f64) {
        self.gscale[slot.0 as usize] = c;
    }

    /// Summed log-density of `z` under a diagonal Gaussian `(mu, sigma)`.
    pub fn normal_log_pdf(&mut self, z: NodeId, mu: NodeId, sigma: NodeId) -> NodeId {
        let (zo, zl) = self.node_range(z);
        let (mo, ml) = self.node_range(mu);
        let (so, sl) = self.node_range(sigma);
        assert!(zl == ml && ml == sl, "normal_log_pdf dim mismatch");
        self.push_with(Op::NormalLogPdf { z, mu, sigma }, 1, |out, buf| {
            let mut acc = 0.0;
            for i in 0..zl {
                let s = buf[so + i];
                let d = (buf[zo + i] - buf[mo + i]) / s;
                acc += -0.5 * fm::LN_2PI - fm::ln(s) - 0.5 * d * d;
            }
            out[0] = acc;
        })
    }

    /// Summed standard-normal log-density of `z`.
    pub fn std_normal_log_pdf(&mut self, z: NodeId) -> NodeId {
        let (zo, zl) = self.node_range(z);
        self.push_with(Op::StdNormalLogPdf(z), 1, |out, buf| {
            let mut acc = 0.0;
            for i in 0..zl {
                let v = buf[zo + i];
                acc += -0.5 * fm::LN_2PI - 0.5 * v * v;
            }
            out[0] = acc;
        })
    }

    /// Weighted sum `Σ w_i get(a, i)` with constant weights.
    pub fn weighted_sum(&mut self, a: NodeId, weights: &[f64]) -> NodeId {
        let w = self.constv(weights);
        self.dot(a, w)
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Accumulate `scale * d(root)/d(params)` into `grads`. `root` must be a
    /// scalar node. The tape may be reused for further nodes afterwards.
    pub fn backward(&mut self, root: NodeId, grads: &mut GradBuf, scale: f64) {
        assert_eq!(self.node_range(root).1, 1, "backward root must be scalar");
        let n_buf = self.buf.len();
        self.adj_scratch.clear();
        self.adj_scratch.resize(n_buf, 0.0);

        // Seed the root.
        let (ro, _) = self.node_range(root);
        self.adj_scratch[ro] = scale;

        let pstore = self.params;
        let gdata = grads.data_mut();
        let nodes = &self.nodes;
        let buf = &self.buf;
        let stack_args = &self.stack_args;
        let gscale = &self.gscale;
        fn nr(nodes: &[Node], id: NodeId) -> (usize, usize) {
            let n = &nodes[id.0 as usize];
            (n.off as usize, n.len as usize)
        }

        // Inputs always precede their consumers in the arena, so splitting
        // the adjoint buffer at the node's offset yields one mutable slice
        // holding every input adjoint and a read-only view of the node's own.
        for idx in (0..=root.0).rev() {
            let node = nodes[idx as usize];
            let (no, nl) = (node.off as usize, node.len as usize);
            let (lo, hi) = self.adj_scratch.split_at_mut(no);
            let g: &[f64] = &hi[..nl];
            match node.op {
                Op::Const => {}
                Op::Param(p) => {
                    if !node.frozen {
                        let base = pstore.offset(p);
                        for (out, gi) in gdata[base..base + nl].iter_mut().zip(g) {
                            *out += gi;
                        }
                    }
                }
                Op::ParamRow(p, row) => {
                    if !node.frozen {
                        let (_, cols) = pstore.dims(p);
                        let base = pstore.offset(p) + row as usize * cols;
                        for (out, gi) in gdata[base..base + nl].iter_mut().zip(g) {
                            *out += gi;
                        }
                    }
                }
                Op::MatVec(p, x) => {
                    let (rows, cols) = pstore.dims(p);
                    let (xo, _) = nr(nodes, x);
                    let wbase = pstore.offset(p);
                    let w = &pstore.data()[wbase..wbase + rows * cols];
                    let xv = &buf[xo..xo + cols];
                    let dx = &mut lo[xo..xo + cols];
                    for r in 0..rows {
                        let gr = g[r];
                        if gr == 0.0 {
                            continue;
                        }
                        let wrow = &w[r * cols..(r + 1) * cols];
                        if !node.frozen {
                            let dwrow = &mut gdata[wbase + r * cols..wbase + (r + 1) * cols];
                            for (dw, xi) in dwrow.iter_mut().zip(xv) {
                                *dw += gr * xi;
                            }
                        }
                        for (d, wi) in dx.iter_mut().zip(wrow) {
                            *d += gr * wi;
                        }
                    }
                }
                Op::AddBias(p, x) => {
                    let (xo, _) = nr(nodes, x);
                    if !node.frozen {
                        let base = pstore.offset(p);
                        for (out, gi) in gdata[base..base + nl].iter_mut().zip(g) {
                            *out += gi;
                        }
                    }
                    for (d, gi) in lo[xo..xo + nl].iter_mut().zip(g) {
                        *d += gi;
                    }
                }
                Op::Add(a, b) => {
                    let (ao, _) = nr(nodes, a);
                    let (bo, _) = nr(nodes, b);
                    for (d, gi) in lo[ao..ao + nl].iter_mut().zip(g) {
                        *d += gi;
                    }
                    for (d, gi) in lo[bo..bo + nl].iter_mut().zip(g) {
                        *d += gi;
                    }
                }
                Op::Sub(a, b) => {
                    let (ao, _) = nr(nodes, a);
                    let (bo, _) = nr(nodes, b);
                    for (d, gi) in lo[ao..ao + nl].iter_mut().zip(g) {
                        *d += gi;
                    }
                    for (d, gi) in lo[bo..bo + nl].iter_mut().zip(g) {
                        *d -= gi;
                    }
                }
                Op::Mul(a, b) => {
                    let (ao, _) = nr(nodes, a);
                    let (bo, _) = nr(nodes, b);
                    {
                        let bv = &buf[bo..bo + nl];
                        for ((d, gi), bvi) in lo[ao..ao + nl].iter_mut().zip(g).zip(bv) {
                            *d += gi * bvi;
                        }
                    }
                    let av = &buf[ao..ao + nl];
                    for ((d, gi), avi) in lo[bo..bo + nl].iter_mut().zip(g).zip(av) {
                        *d += gi * avi;
                    }
                }
                Op::AffC(a, m, _) => {
                    let (ao, _) = nr(nodes, a);
                    for (d, gi) in lo[ao..ao + nl].iter_mut().zip(g) {
                        *d += m * gi;
                    }
                }
                Op::Tanh(a) => {
                    let (ao, _) = nr(nodes, a);
                    let yv = &buf[no..no + nl];
                    for ((d, gi), y) in lo[ao..ao + nl].iter_mut().zip(g).zip(yv) {
                        *d += (1.0 - y * y) * gi;
                    }
                }
                Op::Sigmoid(a) => {
                    let (ao, _) = nr(nodes, a);
                    let yv = &buf[no..no + nl];
                    for ((d, gi), y) in lo[ao..ao + nl].iter_mut().zip(g).zip(yv) {
                        *d += y * (1.0 - y) * gi;
                    }
                }
                Op::Softplus(a) => {
                    let (ao, _) = nr(nodes, a);
                    let xv = &buf[ao..ao + nl];
                    for ((d, gi), x) in lo[ao..ao + nl].iter_mut().zip(g).zip(xv) {
                        *d += fm::sigmoid(*x) * gi;
                    }
                }
                Op::Exp(a) => {
                    let (ao, _) = nr(nodes, a);
                    let yv = &buf[no..no + nl];
                    for ((d, gi), y) in lo[ao..ao + nl].iter_mut().zip(g).zip(yv) {
                        *d += y * gi;
                    }
                }
                Op::Ln(a) => {
                    let (ao, _) = nr(nodes, a);
                    let xv = &buf[ao..ao + nl];
                    for ((d, gi), x) in lo[ao..ao + nl].iter_mut().zip(g).zip(xv) {
                        *d += gi / x;
                    }
                }
                Op::Sum(a) => {
                    let (ao, al) = nr(nodes, a);
                    let gs = g[0];
                    if gs != 0.0 {
                        for d in lo[ao..ao + al].iter_mut() {
                            *d += gs;
                        }
                    }
                }
                Op::Dot(a, b) => {
                    let (ao, al) = nr(nodes, a);
                    let (bo, _) = nr(nodes, b);
                    let gs = g[0];
                    if gs != 0.0 {
                        {
                            let bv = &buf[bo..bo + al];
                            for (d, bvi) in lo[ao..ao + al].iter_mut().zip(bv) {
                                *d += gs * bvi;
                            }
                        }
                        let av = &buf[ao..ao + al];
                        for (d, avi) in lo[bo..bo + al].iter_mut().zip(av) {
                            *d += gs * avi;
                        }
                    }
                }
                Op::LogSumExp(a) => {
                    let (ao, al) = nr(nodes, a);
                    let gs = g[0];
                    if gs != 0.0 {
                        let y = buf[no];
                        let xv = &buf[ao..ao + al];
                        for (d, x) in lo[ao..ao + al].iter_mut().zip(xv) {
                            *d += gs * fm::exp(x - y);
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    let (ao, al) = nr(nodes, a);
                    let gsum: f64 = g.iter().sum();
                    let yv = &buf[no..no + nl];
                    for ((d, gi), y) in lo[ao..ao + al].iter_mut().zip(g).zip(yv) {
                        *d += gi - fm::exp(*y) * gsum;
                    }
                }
                Op::Get(a, i) => {
                    let (ao, _) = nr(nodes, a);
                    lo[ao + i as usize] += g[0];
                }
                Op::Stack(start, n) => {
                    let mut cur = 0usize;
                    for j in 0..n {
                        let part = stack_args[(start + j) as usize];
                        let (po, pl) = nr(nodes, part);
                        for (d, gi) in lo[po..po + pl].iter_mut().zip(&g[cur..cur + pl]) {
                            *d += gi;
                        }
                        cur += pl;
                    }
                }
                Op::Detach(_) => {}
                Op::NormalLogPdf { z, mu, sigma } => {
                    let gs = g[0];
                    if gs != 0.0 {
                        let (zo, zl) = nr(nodes, z);
                        let (mo, _) = nr(nodes, mu);
                        let (so, _) = nr(nodes, sigma);
                        for i in 0..zl {
                            let s = buf[so + i];
                            let d = buf[zo + i] - buf[mo + i];
                            lo[zo + i] += gs * (-d / (s * s));
                            lo[mo + i] += gs * (d / (s * s));
                            lo[so + i] += gs * (d * d / (s * s * s) - 1.0 / s);
                        }
                    }
                }
                Op::StdNormalLogPdf(z) => {
                    let gs = g[0];
                    if gs != 0.0 {
                        let (zo, zl) = nr(nodes, z);
                        let zv = &buf[zo..zo + zl];
                        for (d, z) in lo[zo..zo + zl].iter_mut().zip(zv) {
                            *d -= gs * z;
                        }
                    }
                }
                Op::GradScale(a, slot) => {
                    let c = gscale[slot as usize];
                    if c != 0.0 {
                        let (ao, _) = nr(nodes, a);
                        for (d, gi) in lo[ao..ao + nl].iter_mut().zip(g) {
                            *d += c * gi;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences over every parameter of the store.
    fn fd_grads(store: &mut ParamStore, f: &dyn Fn(&ParamStore) -> f64, eps: f64) -> Vec<f64> {
        let n = store.len();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let orig = store.data()[i];
            store.data_mut()[i] = orig + eps;
            let fp = f(store);
            store.data_mut()[i] = orig - eps;
            let fm_ = f(store);
            store.data_mut()[i] = orig;
            out.push((fp - fm_) / (2.0 * eps));
        }
        out
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            let denom = 1.0f64.max(fm::abs(*x)).max(fm::abs(*y));
            assert!(
                fm::abs(x - y) / denom < tol,
                "coord {i}: {x} vs {y}"
            );
        }
    }

    /// A scalar expression exercising every op, checked against finite
    /// differences.
    fn omnibus(store: &ParamStore) -> f64 {
        let mut t = Tape::new(store);
        let w = ParamId(0);
        let b = ParamId(1);
        let v = ParamId(2);
        let e = ParamId(3);

        let x = t.param(v);
        let h = t.affine(w, b, x);
        let h = t.tanh(h);
        let s = t.sigmoid(h);
        let sp = t.softplus(s);
        let row = t.param_row(e, 1);
        let cat = t.stack(&[sp, row]);
        let ls = t.log_softmax(cat);
        let picked = t.get(ls, 2);
        let lse = t.logsumexp(cat);
        let m = t.mul(sp, sp);
        let d = t.dot(m, h);
        let ex = t.exp(picked);
        let pos = t.affc(ex, 0.5, 1.5);
        let ln = t.ln(pos);
        let sub = t.sub(sp, s);
        let sum = t.sum(sub);
        let z = t.constv(&[0.3, -0.4, 0.25]);
        let mu = t.affc(h, 0.5, 0.0);
        let sig = t.affc(s, 1.0, 0.1);
        let nl = t.normal_log_pdf(z, mu, sig);
        let sn = t.std_normal_log_pdf(mu);
        let parts = t.stack(&[picked, lse, d, ln, sum, nl, sn]);
        let lme = t.log_mean_exp(parts);
        t.scalar_val(lme)
    }

    fn omnibus_store() -> ParamStore {
        let mut store = ParamStore::new();
        store.add(
            "w",
            Role::Phi,
            3,
            3,
            &[0.2, -0.1, 0.4, 0.05, 0.3, -0.2, -0.3, 0.1, 0.2],
        );
        store.add_vec("b", Role::Phi, &[0.01, -0.02, 0.03]);
        store.add_vec("v", Role::Theta, &[0.5, -0.25, 0.75]);
        store.add("e", Role::Theta, 2, 4, &[0.1, 0.2, 0.3, 0.4, -0.1, -0.2, 0.25, 0.15]);
        store
    }

    #[test]
    fn omnibus_gradient_matches_finite_differences() {
        let mut store = omnibus_store();
        let mut grads = GradBuf::zeros(&store);
        {
            let mut t = Tape::new(&store);
            let w = ParamId(0);
            let b = ParamId(1);
            let v = ParamId(2);
            let e = ParamId(3);
            let x = t.param(v);
            let h = t.affine(w, b, x);
            let h = t.tanh(h);
            let s = t.sigmoid(h);
            let sp = t.softplus(s);
            let row = t.param_row(e, 1);
            let cat = t.stack(&[sp, row]);
            let ls = t.log_softmax(cat);
            let picked = t.get(ls, 2);
            let lse = t.logsumexp(cat);
            let m = t.mul(sp, sp);
            let d = t.dot(m, h);
            let ex = t.exp(picked);
            let pos = t.affc(ex, 0.5, 1.5);
            let ln = t.ln(pos);
            let sub = t.sub(sp, s);
            let sum = t.sum(sub);
            let z = t.constv(&[0.3, -0.4, 0.25]);
            let mu = t.affc(h, 0.5, 0.0);
            let sig = t.affc(s, 1.0, 0.1);
            let nl = t.normal_log_pdf(z, mu, sig);
            let sn = t.std_normal_log_pdf(mu);
            let parts = t.stack(&[picked, lse, d, ln, sum, nl, sn]);
            let lme = t.log_mean_exp(parts);
            t.backward(lme, &mut grads, 1.0);
        }
        let fd = fd_grads(&mut store, &omnibus, 1e-6);
        assert_close(grads.data(), &fd, 1e-6);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut store = ParamStore::new();
        let p = store.add_vec("p", Role::Phi, &[0.7]);
        let mut grads = GradBuf::zeros(&store);
        let mut t = Tape::new(&store);
        let a = t.param(p);
        let d = t.detach(a);
        let prod = t.mul(a, d); // value p^2, gradient should be p (not 2p)
        let root = t.sum(prod);
        t.backward(root, &mut grads, 1.0);
        assert!(fm::abs(t.scalar_val(root) - 0.49) < 1e-15);
        assert!(fm::abs(grads.data()[0] - 0.7) < 1e-15);
    }

    #[test]
    fn frozen_region_blocks_param_grads_but_not_flow() {
        let mut store = ParamStore::new();
        let a = store.add_vec("a", Role::Phi, &[0.5]);
        let w = store.add("w", Role::Theta, 1, 1, &[2.0]);
        let mut grads = GradBuf::zeros(&store);
        let mut t = Tape::new(&store);
        let x = t.param(a);
        // y = w*x inside a frozen region: dy/dw must not accumulate, dy/dx must.
        let y = t.frozen(|t| t.matvec(w, x));
        let root = t.sum(y);
        t.backward(root, &mut grads, 1.0);
        assert_eq!(grads.slice(&store, w)[0], 0.0);
        assert!(fm::abs(grads.slice(&store, a)[0] - 2.0) < 1e-15);
    }

    #[test]
    fn backward_scale_and_accumulation() {
        let mut store = ParamStore::new();
        let p = store.add_vec("p", Role::Phi, &[1.5]);
        let mut grads = GradBuf::zeros(&store);
        let mut t = Tape::new(&store);
        let x = t.param(p);
        let y = t.mul(x, x);
        let root = t.sum(y);
        t.backward(root, &mut grads, 0.5);
        t.backward(root, &mut grads, 0.5);
        // 2 * (0.5 * 2p) = 2p
        assert!(fm::abs(grads.data()[0] - 3.0) < 1e-15);
    }

    #[test]
    fn grad_scale_multiplies_only_the_gradient() {
        let mut store = ParamStore::new();
        let p = store.add_vec("p", Role::Phi, &[2.0]);
        let mut grads = GradBuf::zeros(&store);
        let mut t = Tape::new(&store);
        let x = t.param(p);
        let (xs, slot) = t.grad_scale_deferred(x);
        let y = t.mul(xs, xs); // value p^2, gradient 2p * c
        let root = t.sum(y);
        assert!(fm::abs(t.scalar_val(root) - 4.0) < 1e-15);
        t.set_grad_scale(slot, 0.25);
        t.backward(root, &mut grads, 1.0);
        assert!(fm::abs(grads.data()[0] - 1.0) < 1e-15, "{}", grads.data()[0]);
    }

    #[test]
    fn clear_reuses_allocation() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        for _ in 0..3 {
            let a = t.constv(&[1.0, 2.0]);
            let s = t.sum(a);
            assert!(fm::abs(t.scalar_val(s) - 3.0) < 1e-15);
            t.clear();
            assert_eq!(t.n_nodes(), 0);
        }
    }

    #[test]
    fn roles_are_queryable() {
        let store = omnibus_store();
        assert_eq!(store.role(ParamId(0)), Role::Phi);
        assert_eq!(store.role(ParamId(2)), Role::Theta);
        assert_eq!(store.ids_with_role(Role::Phi).len(), 2);
        assert_eq!(store.ids_with_role(Role::Theta).len(), 2);
        let mut s2 = ParamStore::new();
        s2.add_vec("tied", Role::Shared, &[0.0]);
        assert_eq!(s2.ids_with_role(Role::Phi).len(), 1);
        assert_eq!(s2.ids_with_role(Role::Theta).len(), 1);
    }
}
