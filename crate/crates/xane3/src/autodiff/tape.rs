use std::sync::Arc;

use crate::error::{Result, XaneError};

use super::tensor::Tensor;

/// Sparse 3-index coefficient tensor used by the batched contraction op.
/// Stored as its nonzero entries (k1, k2, k3, value).
#[derive(Debug, Clone)]
pub struct Coeff3 {
    pub d1: usize,
    pub d2: usize,
    pub d3: usize,
    pub nonzeros: Vec<(usize, usize, usize, f64)>,
}

impl Coeff3 {
    pub fn from_dense(d1: usize, d2: usize, d3: usize, values: &[f64]) -> Self {
        assert_eq!(values.len(), d1 * d2 * d3);
        let mut nonzeros = Vec::new();
        for k1 in 0..d1 {
            for k2 in 0..d2 {
                for k3 in 0..d3 {
                    let v = values[(k1 * d2 + k2) * d3 + k3];
                    if v != 0.0 {
                        nonzeros.push((k1, k2, k3, v));
                    }
                }
            }
        }
        Coeff3 {
            d1,
            d2,
            d3,
            nonzeros,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// A handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf,
    Bin(BinKind),
    Scale(f64),
    AddScalar(#[allow(dead_code)] f64),
    MatMul,
    /// x: [n, m_in*comps], w: [m_in, m_out] -> [n, m_out*comps]; mixes
    /// channels while leaving the `comps` components of each channel intact.
    ChannelMatMul {
        comps: usize,
    },
    /// Batched contraction over a fixed 3-index coefficient tensor:
    /// out[e, co*d3+k3] = norm * sum_{ci,k1,k2} w[e,ci*m_out+co] *
    ///                    x[e,ci*d1+k1] * y[e,k2] * C[k1,k2,k3]
    TensorContract {
        cg: Arc<Coeff3>,
        m_in: usize,
        m_out: usize,
        norm: f64,
    },
    SumAxis {
        axis: usize,
    },
    MeanAxis {
        axis: usize,
    },
    SumAll,
    MeanAll,
    GatherRows {
        idx: Arc<Vec<usize>>,
    },
    ScatterAddRows {
        idx: Arc<Vec<usize>>,
        #[allow(dead_code)]
        n_rows: usize,
    },
    ConcatCols {
        widths: Vec<usize>,
    },
    ConcatRows {
        heights: Vec<usize>,
    },
    Transpose,
    SliceCols {
        start: usize,
        orig_cols: usize,
    },
    RepeatInterleaveCols {
        k: usize,
    },
    SumColsGrouped {
        k: usize,
    },
    Silu,
    Sigmoid,
    Exp,
    Sqrt,
    Abs,
    Softplus,
    Detach,
    /// Per-segment mean over rows where mask is true; segments without any
    /// masked row yield zeros.
    SegmentMeanMasked {
        segments: Arc<Vec<usize>>,
        mask: Arc<Vec<bool>>,
        n_seg: usize,
    },
    /// Softmax over the allowed rows of each segment; disallowed rows get 0.
    SegmentSoftmax {
        segments: Arc<Vec<usize>>,
        allowed: Arc<Vec<bool>>,
        n_seg: usize,
    },
    SegmentSum {
        segments: Arc<Vec<usize>>,
        #[allow(dead_code)]
        n_seg: usize,
    },
}

struct Node {
    op: Op,
    parents: Vec<usize>,
    value: Tensor,
    needs_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in topological order by
/// construction; backward walks them once in reverse.
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

fn bcast_shape(
    op: &'static str,
    a: (usize, usize),
    b: (usize, usize),
) -> Result<(usize, usize)> {
    let r = if a.0 == b.0 {
        a.0
    } else if a.0 == 1 {
        b.0
    } else if b.0 == 1 {
        a.0
    } else {
        return Err(XaneError::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", a, b),
        });
    };
    let c = if a.1 == b.1 {
        a.1
    } else if a.1 == 1 {
        b.1
    } else if b.1 == 1 {
        a.1
    } else {
        return Err(XaneError::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", a, b),
        });
    };
    Ok((r, c))
}

/// Reduce `g` (shape `from`) onto shape `to` by summing over broadcast dims.
fn reduce_to(g: &Tensor, to: (usize, usize)) -> Tensor {
    if g.shape() == to {
        return g.clone();
    }
    let mut out = Tensor::zeros(to.0, to.1);
    let (gr, gc) = g.shape();
    for r in 0..gr {
        let tr = if to.0 == 1 { 0 } else { r };
        for c in 0..gc {
            let tc = if to.1 == 1 { 0 } else { c };
            let v = out.at(tr, tc) + g.at(r, c);
            out.set(tr, tc, v);
        }
    }
    out
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, parents: Vec<usize>, value: Tensor) -> Result<Var> {
        value.check_finite(op_name(&op))?;
        let needs_grad = match op {
            Op::Leaf => false, // set by leaf()
            Op::Detach => false,
            _ => parents.iter().any(|&p| self.nodes[p].needs_grad),
        };
        self.nodes.push(Node {
            op,
            parents,
            value,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        value.check_finite("leaf")?;
        self.nodes.push(Node {
            op: Op::Leaf,
            parents: Vec::new(),
            value,
            needs_grad: requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    fn bin(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let (r, c) = bcast_shape(bin_name(kind), sa, sb)?;
        let mut out = Tensor::zeros(r, c);
        {
            let ta = self.value(a);
            let tb = self.value(b);
            let od = out.data_mut();
            for i in 0..r {
                let ia = if sa.0 == 1 { 0 } else { i };
                let ib = if sb.0 == 1 { 0 } else { i };
                for j in 0..c {
                    let ja = if sa.1 == 1 { 0 } else { j };
                    let jb = if sb.1 == 1 { 0 } else { j };
                    let x = ta.at(ia, ja);
                    let y = tb.at(ib, jb);
                    od[i * c + j] = match kind {
                        BinKind::Add => x + y,
                        BinKind::Sub => x - y,
                        BinKind::Mul => x * y,
                        BinKind::Div => x / y,
                    };
                }
            }
        }
        self.push(Op::Bin(kind), vec![a.0, b.0], out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinKind::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            *v *= s;
        }
        self.push(Op::Scale(s), vec![a.0], out)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            *v += s;
        }
        self.push(Op::AddScalar(s), vec![a.0], out)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(a).shape();
        let (k2, m) = self.value(b).shape();
        if k != k2 {
            return Err(XaneError::ShapeMismatch {
                op: "matmul",
                detail: format!("{}x{} * {}x{}", n, k, k2, m),
            });
        }
        let mut out = Tensor::zeros(n, m);
        {
            let ta = self.value(a);
            let tb = self.value(b);
            let od = out.data_mut();
            for i in 0..n {
                let ar = ta.row_slice(i);
                let orow = &mut od[i * m..(i + 1) * m];
                for (p, &av) in ar.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    let br = tb.row_slice(p);
                    for (j, &bv) in br.iter().enumerate() {
                        orow[j] += av * bv;
                    }
                }
            }
        }
        self.push(Op::MatMul, vec![a.0, b.0], out)
    }

    pub fn channel_matmul(&mut self, x: Var, w: Var, comps: usize) -> Result<Var> {
        let (n, xc) = self.value(x).shape();
        let (m_in, m_out) = self.value(w).shape();
        if xc != m_in * comps {
            return Err(XaneError::ShapeMismatch {
                op: "channel_matmul",
                detail: format!("x cols {} != m_in {} * comps {}", xc, m_in, comps),
            });
        }
        let mut out = Tensor::zeros(n, m_out * comps);
        {
            let tx = self.value(x);
            let tw = self.value(w);
            let od = out.data_mut();
            for r in 0..n {
                let xr = tx.row_slice(r);
                let orow = &mut od[r * m_out * comps..(r + 1) * m_out * comps];
                for ci in 0..m_in {
                    let wrow = tw.row_slice(ci);
                    let xblk = &xr[ci * comps..(ci + 1) * comps];
                    for (co, &wv) in wrow.iter().enumerate() {
                        if wv == 0.0 {
                            continue;
                        }
                        let ob = &mut orow[co * comps..(co + 1) * comps];
                        for (j, &xv) in xblk.iter().enumerate() {
                            ob[j] += wv * xv;
                        }
                    }
                }
            }
        }
        self.push(Op::ChannelMatMul { comps }, vec![x.0, w.0], out)
    }

    /// The fused tensor-product path contraction. `x` holds `m_in` channels
    /// of a (2l1+1)-component irrep laid out channel-major, `y` a single
    /// (2l2+1)-component block per row, `w` per-row channel-mixing weights.
    pub fn tensor_contract(
        &mut self,
        x: Var,
        y: Var,
        w: Var,
        cg: Arc<Coeff3>,
        m_in: usize,
        m_out: usize,
        norm: f64,
    ) -> Result<Var> {
        let (n, xc) = self.value(x).shape();
        let (ny, yc) = self.value(y).shape();
        let (nw, wc) = self.value(w).shape();
        if xc != m_in * cg.d1 || yc != cg.d2 || wc != m_in * m_out || ny != n || nw != n {
            return Err(XaneError::ShapeMismatch {
                op: "tensor_contract",
                detail: format!(
                    "x {}x{}, y {}x{}, w {}x{}, m_in {}, m_out {}, dims ({},{},{})",
                    n, xc, ny, yc, nw, wc, m_in, m_out, cg.d1, cg.d2, cg.d3
                ),
            });
        }
        let d1 = cg.d1;
        let d3 = cg.d3;
        let mut out = Tensor::zeros(n, m_out * d3);
        {
            let tx = self.value(x);
            let ty = self.value(y);
            let tw = self.value(w);
            let od = out.data_mut();
            let mut t = vec![0.0; m_in * d3];
            for e in 0..n {
                let xr = tx.row_slice(e);
                let yr = ty.row_slice(e);
                let wr = tw.row_slice(e);
                t.iter_mut().for_each(|v| *v = 0.0);
                for &(k1, k2, k3, c) in &cg.nonzeros {
                    let cy = c * yr[k2];
                    if cy == 0.0 {
                        continue;
                    }
                    for ci in 0..m_in {
                        t[ci * d3 + k3] += cy * xr[ci * d1 + k1];
                    }
                }
                let orow = &mut od[e * m_out * d3..(e + 1) * m_out * d3];
                for ci in 0..m_in {
                    let tb = &t[ci * d3..(ci + 1) * d3];
                    let wb = &wr[ci * m_out..(ci + 1) * m_out];
                    for (co, &wv) in wb.iter().enumerate() {
                        if wv == 0.0 {
                            continue;
                        }
                        let s = norm * wv;
                        let ob = &mut orow[co * d3..(co + 1) * d3];
                        for (k3, &tv) in tb.iter().enumerate() {
                            ob[k3] += s * tv;
                        }
                    }
                }
            }
        }
        self.push(
            Op::TensorContract {
                cg,
                m_in,
                m_out,
                norm,
            },
            vec![x.0, y.0, w.0],
            out,
        )
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.value(a).shape();
        let out = match axis {
            0 => {
                let mut o = Tensor::zeros(1, c);
                for i in 0..r {
                    for j in 0..c {
                        o.data_mut()[j] += self.value(a).at(i, j);
                    }
                }
                o
            }
            1 => {
                let mut o = Tensor::zeros(r, 1);
                for i in 0..r {
                    o.data_mut()[i] = self.value(a).row_slice(i).iter().sum();
                }
                o
            }
            _ => {
                return Err(XaneError::InvalidArgument(format!(
                    "sum_axis: axis {} out of range",
                    axis
                )))
            }
        };
        self.push(Op::SumAxis { axis }, vec![a.0], out)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.value(a).shape();
        let denom = if axis == 0 { r } else { c } as f64;
        let s = self.sum_axis(a, axis)?;
        // fold the 1/denom into a dedicated node so the tape stays simple
        let v = self.value(s).clone();
        let mut out = v;
        for x in out.data_mut() {
            *x /= denom;
        }
        self.nodes.pop();
        self.push(Op::MeanAxis { axis }, vec![a.0], out)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Op::SumAll, vec![a.0], Tensor::scalar(s))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Op::MeanAll, vec![a.0], Tensor::scalar(s / n))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let (r, c) = self.value(a).shape();
        for &i in idx.iter() {
            if i >= r {
                return Err(XaneError::InvalidArgument(format!(
                    "gather_rows: index {} >= rows {}",
                    i, r
                )));
            }
        }
        let mut out = Tensor::zeros(idx.len(), c);
        for (o, &i) in idx.iter().enumerate() {
            let src = self.value(a).row_slice(i).to_vec();
            out.data_mut()[o * c..(o + 1) * c].copy_from_slice(&src);
        }
        self.push(Op::GatherRows { idx }, vec![a.0], out)
    }

    pub fn scatter_add_rows(
        &mut self,
        a: Var,
        idx: Arc<Vec<usize>>,
        n_rows: usize,
    ) -> Result<Var> {
        let (r, c) = self.value(a).shape();
        if idx.len() != r {
            return Err(XaneError::ShapeMismatch {
                op: "scatter_add_rows",
                detail: format!("idx len {} != rows {}", idx.len(), r),
            });
        }
        for &i in idx.iter() {
            if i >= n_rows {
                return Err(XaneError::InvalidArgument(format!(
                    "scatter_add_rows: index {} >= n_rows {}",
                    i, n_rows
                )));
            }
        }
        let mut out = Tensor::zeros(n_rows, c);
        // rows processed in tape order: deterministic accumulation
        for (src_row, &dst) in idx.iter().enumerate() {
            let src = self.value(a).row_slice(src_row).to_vec();
            let od = &mut out.data_mut()[dst * c..(dst + 1) * c];
            for (j, v) in src.iter().enumerate() {
                od[j] += v;
            }
        }
        self.push(Op::ScatterAddRows { idx, n_rows }, vec![a.0], out)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(XaneError::InvalidArgument("concat_cols: empty".into()));
        }
        let r = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.value(p).shape();
            if pr != r {
                return Err(XaneError::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("row counts {} vs {}", r, pr),
                });
            }
            widths.push(pc);
            total += pc;
        }
        let mut out = Tensor::zeros(r, total);
        for i in 0..r {
            let mut off = 0;
            for (pi, &p) in parts.iter().enumerate() {
                let src = self.value(p).row_slice(i).to_vec();
                out.data_mut()[i * total + off..i * total + off + widths[pi]]
                    .copy_from_slice(&src);
                off += widths[pi];
            }
        }
        self.push(
            Op::ConcatCols { widths },
            parts.iter().map(|v| v.0).collect(),
            out,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(XaneError::InvalidArgument("concat_rows: empty".into()));
        }
        let c = self.value(parts[0]).cols();
        let mut heights = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.value(p).shape();
            if pc != c {
                return Err(XaneError::ShapeMismatch {
                    op: "concat_rows",
                    detail: format!("col counts {} vs {}", c, pc),
                });
            }
            heights.push(pr);
            total += pr;
        }
        let mut data = Vec::with_capacity(total * c);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::from_vec(total, c, data)?;
        self.push(
            Op::ConcatRows { heights },
            parts.iter().map(|v| v.0).collect(),
            out,
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).shape();
        let mut out = Tensor::zeros(c, r);
        for i in 0..r {
            for j in 0..c {
                let v = self.value(a).at(i, j);
                out.set(j, i, v);
            }
        }
        self.push(Op::Transpose, vec![a.0], out)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(a).shape();
        if start + len > c {
            return Err(XaneError::ShapeMismatch {
                op: "slice_cols",
                detail: format!("slice [{}, {}) of {} cols", start, start + len, c),
            });
        }
        let mut out = Tensor::zeros(r, len);
        for i in 0..r {
            let src = self.value(a).row_slice(i)[start..start + len].to_vec();
            out.data_mut()[i * len..(i + 1) * len].copy_from_slice(&src);
        }
        self.push(
            Op::SliceCols {
                start,
                orig_cols: c,
            },
            vec![a.0],
            out,
        )
    }

    pub fn repeat_interleave_cols(&mut self, a: Var, k: usize) -> Result<Var> {
        let (r, c) = self.value(a).shape();
        let mut out = Tensor::zeros(r, c * k);
        for i in 0..r {
            for j in 0..c {
                let v = self.value(a).at(i, j);
                for t in 0..k {
                    out.set(i, j * k + t, v);
                }
            }
        }
        self.push(Op::RepeatInterleaveCols { k }, vec![a.0], out)
    }

    pub fn sum_cols_grouped(&mut self, a: Var, k: usize) -> Result<Var> {
        let (r, c) = self.value(a).shape();
        if c % k != 0 {
            return Err(XaneError::ShapeMismatch {
                op: "sum_cols_grouped",
                detail: format!("cols {} not divisible by {}", c, k),
            });
        }
        let g = c / k;
        let mut out = Tensor::zeros(r, g);
        for i in 0..r {
            for j in 0..g {
                let mut s = 0.0;
                for t in 0..k {
                    s += self.value(a).at(i, j * k + t);
                }
                out.set(i, j, s);
            }
        }
        self.push(Op::SumColsGrouped { k }, vec![a.0], out)
    }

    fn unary(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Result<Var> {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            *v = f(*v);
        }
        self.push(op, vec![a.0], out)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Silu, a, |x| x * sigmoid(x))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Sigmoid, a, sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Exp, a, f64::exp)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Sqrt, a, f64::sqrt)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Abs, a, f64::abs)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Softplus, a, softplus)
    }

    /// Value-equal tensor through which no gradient flows.
    pub fn detach(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).clone();
        self.push(Op::Detach, vec![a.0], out)
    }

    pub fn segment_mean_masked(
        &mut self,
        a: Var,
        segments: Arc<Vec<usize>>,
        mask: Arc<Vec<bool>>,
        n_seg: usize,
    ) -> Result<Var> {
        let (r, c) = self.value(a).shape();
        if segments.len() != r || mask.len() != r {
            return Err(XaneError::ShapeMismatch {
                op: "segment_mean_masked",
                detail: format!("rows {} vs segments {} mask {}", r, segments.len(), mask.len()),
            });
        }
        let mut counts = vec![0usize; n_seg];
        for i in 0..r {
            if mask[i] {
                counts[segments[i]] += 1;
            }
        }
        let mut out = Tensor::zeros(n_seg, c);
        for i in 0..r {
            if !mask[i] {
                continue;
            }
            let s = segments[i];
            let inv = 1.0 / counts[s] as f64;
            let src = self.value(a).row_slice(i).to_vec();
            let od = &mut out.data_mut()[s * c..(s + 1) * c];
            for (j, v) in src.iter().enumerate() {
                od[j] += v * inv;
            }
        }
        self.push(
            Op::SegmentMeanMasked {
                segments,
                mask,
                n_seg,
            },
            vec![a.0],
            out,
        )
    }

    pub fn segment_softmax(
        &mut self,
        scores: Var,
        segments: Arc<Vec<usize>>,
        allowed: Arc<Vec<bool>>,
        n_seg: usize,
    ) -> Result<Var> {
        let (r, c) = self.value(scores).shape();
        if c != 1 || segments.len() != r || allowed.len() != r {
            return Err(XaneError::ShapeMismatch {
                op: "segment_softmax",
                detail: format!("scores {}x{}, segments {}", r, c, segments.len()),
            });
        }
        let mut maxes = vec![f64::NEG_INFINITY; n_seg];
        for i in 0..r {
            if allowed[i] {
                let s = segments[i];
                maxes[s] = maxes[s].max(self.value(scores).at(i, 0));
            }
        }
        let mut sums = vec![0.0; n_seg];
        let mut ex = vec![0.0; r];
        for i in 0..r {
            if allowed[i] {
                let s = segments[i];
                ex[i] = (self.value(scores).at(i, 0) - maxes[s]).exp();
                sums[s] += ex[i];
            }
        }
        let mut out = Tensor::zeros(r, 1);
        for i in 0..r {
            if allowed[i] {
                out.data_mut()[i] = ex[i] / sums[segments[i]];
            }
        }
        self.push(
            Op::SegmentSoftmax {
                segments,
                allowed,
                n_seg,
            },
            vec![scores.0],
            out,
        )
    }

    pub fn segment_sum(
        &mut self,
        a: Var,
        segments: Arc<Vec<usize>>,
        n_seg: usize,
    ) -> Result<Var> {
        let (r, c) = self.value(a).shape();
        if segments.len() != r {
            return Err(XaneError::ShapeMismatch {
                op: "segment_sum",
                detail: format!("rows {} vs segments {}", r, segments.len()),
            });
        }
        let mut out = Tensor::zeros(n_seg, c);
        for i in 0..r {
            let s = segments[i];
            let src = self.value(a).row_slice(i).to_vec();
            let od = &mut out.data_mut()[s * c..(s + 1) * c];
            for (j, v) in src.iter().enumerate() {
                od[j] += v;
            }
        }
        self.push(Op::SegmentSum { segments, n_seg }, vec![a.0], out)
    }

    /// Reverse pass from a scalar loss. Gradients of all grad-requiring
    /// nodes are returned; others stay `None`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.shape() != (1, 1) {
            return Err(XaneError::InvalidArgument(format!(
                "backward: loss must be scalar, got {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[id];
            if !node.needs_grad && !matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            self.backward_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor>], id: usize, add: Tensor) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut grads[id] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(add.data()) {
                    *a += b;
                }
            }
            None => grads[id] = Some(add),
        }
    }

    fn backward_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let p = &node.parents;
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::Bin(kind) => {
                let sa = self.nodes[p[0]].value.shape();
                let sb = self.nodes[p[1]].value.shape();
                let (r, c) = node.value.shape();
                let ta = &self.nodes[p[0]].value;
                let tb = &self.nodes[p[1]].value;
                let mut ga = Tensor::zeros(r, c);
                let mut gb = Tensor::zeros(r, c);
                for i in 0..r {
                    let ia = if sa.0 == 1 { 0 } else { i };
                    let ib = if sb.0 == 1 { 0 } else { i };
                    for j in 0..c {
                        let ja = if sa.1 == 1 { 0 } else { j };
                        let jb = if sb.1 == 1 { 0 } else { j };
                        let gv = g.at(i, j);
                        match kind {
                            BinKind::Add => {
                                ga.set(i, j, gv);
                                gb.set(i, j, gv);
                            }
                            BinKind::Sub => {
                                ga.set(i, j, gv);
                                gb.set(i, j, -gv);
                            }
                            BinKind::Mul => {
                                ga.set(i, j, gv * tb.at(ib, jb));
                                gb.set(i, j, gv * ta.at(ia, ja));
                            }
                            BinKind::Div => {
                                let bv = tb.at(ib, jb);
                                ga.set(i, j, gv / bv);
                                gb.set(i, j, -gv * ta.at(ia, ja) / (bv * bv));
                            }
                        }
                    }
                }
                self.accum(grads, p[0], reduce_to(&ga, sa));
                self.accum(grads, p[1], reduce_to(&gb, sb));
            }
            Op::Scale(s) => {
                let mut ga = g.clone();
                for v in ga.data_mut() {
                    *v *= s;
                }
                self.accum(grads, p[0], ga);
            }
            Op::AddScalar(_) => {
                self.accum(grads, p[0], g.clone());
            }
            Op::MatMul => {
                let a = &self.nodes[p[0]].value;
                let b = &self.nodes[p[1]].value;
                let (n, k) = a.shape();
                let (_, m) = b.shape();
                // dA = g * B^T
                let mut ga = Tensor::zeros(n, k);
                for i in 0..n {
                    let grow = g.row_slice(i);
                    let garow = &mut ga.data_mut()[i * k..(i + 1) * k];
                    for pp in 0..k {
                        let brow = b.row_slice(pp);
                        let mut s = 0.0;
                        for j in 0..m {
                            s += grow[j] * brow[j];
                        }
                        garow[pp] = s;
                    }
                }
                // dB = A^T * g
                let mut gb = Tensor::zeros(k, m);
                for i in 0..n {
                    let arow = a.row_slice(i);
                    let grow = g.row_slice(i);
                    for (pp, &av) in arow.iter().enumerate() {
                        if av == 0.0 {
                            continue;
                        }
                        let gbrow = &mut gb.data_mut()[pp * m..(pp + 1) * m];
                        for (j, &gv) in grow.iter().enumerate() {
                            gbrow[j] += av * gv;
                        }
                    }
                }
                self.accum(grads, p[0], ga);
                self.accum(grads, p[1], gb);
            }
            Op::ChannelMatMul { comps } => {
                let x = &self.nodes[p[0]].value;
                let w = &self.nodes[p[1]].value;
                let (n, _) = x.shape();
                let (m_in, m_out) = w.shape();
                let k = *comps;
                let mut gx = Tensor::zeros(n, m_in * k);
                let mut gw = Tensor::zeros(m_in, m_out);
                for r in 0..n {
                    let xr = x.row_slice(r);
                    let gr = g.row_slice(r);
                    let gxr = &mut gx.data_mut()[r * m_in * k..(r + 1) * m_in * k];
                    for ci in 0..m_in {
                        let wrow = w.row_slice(ci);
                        for co in 0..m_out {
                            let wv = wrow[co];
                            let gb = &gr[co * k..(co + 1) * k];
                            let xb = &xr[ci * k..(ci + 1) * k];
                            let mut dw = 0.0;
                            for j in 0..k {
                                gxr[ci * k + j] += wv * gb[j];
                                dw += xb[j] * gb[j];
                            }
                            let cur = gw.at(ci, co);
                            gw.set(ci, co, cur + dw);
                        }
                    }
                }
                self.accum(grads, p[0], gx);
                self.accum(grads, p[1], gw);
            }
            Op::TensorContract {
                cg,
                m_in,
                m_out,
                norm,
            } => {
                let x = &self.nodes[p[0]].value;
                let y = &self.nodes[p[1]].value;
                let w = &self.nodes[p[2]].value;
                let (n, _) = x.shape();
                let (m_in, m_out) = (*m_in, *m_out);
                let (d1, d2, d3) = (cg.d1, cg.d2, cg.d3);
                let need_x = self.nodes[p[0]].needs_grad;
                let need_y = self.nodes[p[1]].needs_grad;
                let need_w = self.nodes[p[2]].needs_grad;
                let mut gx = if need_x {
                    Some(Tensor::zeros(n, m_in * d1))
                } else {
                    None
                };
                let mut gy = if need_y {
                    Some(Tensor::zeros(n, d2))
                } else {
                    None
                };
                let mut gw = if need_w {
                    Some(Tensor::zeros(n, m_in * m_out))
                } else {
                    None
                };
                let mut t = vec![0.0; m_in * d3];
                let mut gt = vec![0.0; m_in * d3];
                for e in 0..n {
                    let xr = x.row_slice(e);
                    let yr = y.row_slice(e);
                    let wr = w.row_slice(e);
                    let gr = g.row_slice(e);
                    // recompute t[ci,k3]
                    t.iter_mut().for_each(|v| *v = 0.0);
                    for &(k1, k2, k3, c) in &cg.nonzeros {
                        let cy = c * yr[k2];
                        if cy == 0.0 {
                            continue;
                        }
                        for ci in 0..m_in {
                            t[ci * d3 + k3] += cy * xr[ci * d1 + k1];
                        }
                    }
                    // dW and dT
                    gt.iter_mut().for_each(|v| *v = 0.0);
                    for ci in 0..m_in {
                        let tb = &t[ci * d3..(ci + 1) * d3];
                        for co in 0..m_out {
                            let gb = &gr[co * d3..(co + 1) * d3];
                            if need_w {
                                let mut s = 0.0;
                                for k3 in 0..d3 {
                                    s += tb[k3] * gb[k3];
                                }
                                gw.as_mut().unwrap().data_mut()[e * m_in * m_out + ci * m_out + co] =
                                    norm * s;
                            }
                            if need_x || need_y {
                                let wv = norm * wr[ci * m_out + co];
                                if wv != 0.0 {
                                    let gtb = &mut gt[ci * d3..(ci + 1) * d3];
                                    for k3 in 0..d3 {
                                        gtb[k3] += wv * gb[k3];
                                    }
                                }
                            }
                        }
                    }
                    if need_x || need_y {
                        for &(k1, k2, k3, c) in &cg.nonzeros {
                            if need_x {
                                let cy = c * yr[k2];
                                if cy != 0.0 {
                                    let gxr = gx.as_mut().unwrap();
                                    let base = e * m_in * d1;
                                    for ci in 0..m_in {
                                        gxr.data_mut()[base + ci * d1 + k1] +=
                                            cy * gt[ci * d3 + k3];
                                    }
                                }
                            }
                            if need_y {
                                let mut s = 0.0;
                                for ci in 0..m_in {
                                    s += xr[ci * d1 + k1] * gt[ci * d3 + k3];
                                }
                                gy.as_mut().unwrap().data_mut()[e * d2 + k2] += c * s;
                            }
                        }
                    }
                }
                if let Some(gx) = gx {
                    self.accum(grads, p[0], gx);
                }
                if let Some(gy) = gy {
                    self.accum(grads, p[1], gy);
                }
                if let Some(gw) = gw {
                    self.accum(grads, p[2], gw);
                }
            }
            Op::SumAxis { axis } | Op::MeanAxis { axis } => {
                let (r, c) = self.nodes[p[0]].value.shape();
                let denom = match node.op {
                    Op::MeanAxis { .. } => {
                        if *axis == 0 {
                            r as f64
                        } else {
                            c as f64
                        }
                    }
                    _ => 1.0,
                };
                let mut gp = Tensor::zeros(r, c);
                for i in 0..r {
                    for j in 0..c {
                        let gv = if *axis == 0 { g.at(0, j) } else { g.at(i, 0) };
                        gp.set(i, j, gv / denom);
                    }
                }
                self.accum(grads, p[0], gp);
            }
            Op::SumAll | Op::MeanAll => {
                let (r, c) = self.nodes[p[0]].value.shape();
                let denom = if matches!(node.op, Op::MeanAll) {
                    (r * c) as f64
                } else {
                    1.0
                };
                let gv = g.item() / denom;
                self.accum(grads, p[0], Tensor::full(r, c, gv));
            }
            Op::GatherRows { idx } => {
                let (r, c) = self.nodes[p[0]].value.shape();
                let mut gp = Tensor::zeros(r, c);
                for (o, &i) in idx.iter().enumerate() {
                    let src = g.row_slice(o);
                    let od = &mut gp.data_mut()[i * c..(i + 1) * c];
                    for j in 0..c {
                        od[j] += src[j];
                    }
                }
                self.accum(grads, p[0], gp);
            }
            Op::ScatterAddRows { idx, .. } => {
                let (r, c) = self.nodes[p[0]].value.shape();
                let mut gp = Tensor::zeros(r, c);
                for (src_row, &dst) in idx.iter().enumerate() {
                    let src = g.row_slice(dst);
                    gp.data_mut()[src_row * c..(src_row + 1) * c].copy_from_slice(src);
                }
                self.accum(grads, p[0], gp);
            }
            Op::ConcatCols { widths } => {
                let r = node.value.rows();
                let mut off = 0;
                for (pi, &w) in widths.iter().enumerate() {
                    let mut gp = Tensor::zeros(r, w);
                    for i in 0..r {
                        gp.data_mut()[i * w..(i + 1) * w]
                            .copy_from_slice(&g.row_slice(i)[off..off + w]);
                    }
                    self.accum(grads, p[pi], gp);
                    off += w;
                }
            }
            Op::ConcatRows { heights } => {
                let c = node.value.cols();
                let mut off = 0;
                for (pi, &h) in heights.iter().enumerate() {
                    let mut gp = Tensor::zeros(h, c);
                    gp.data_mut()
                        .copy_from_slice(&g.data()[off * c..(off + h) * c]);
                    self.accum(grads, p[pi], gp);
                    off += h;
                }
            }
            Op::Transpose => {
                let (r, c) = self.nodes[p[0]].value.shape();
                let mut gp = Tensor::zeros(r, c);
                for i in 0..r {
                    for j in 0..c {
                        gp.set(i, j, g.at(j, i));
                    }
                }
                self.accum(grads, p[0], gp);
            }
            Op::SliceCols { start, orig_cols } => {
                let r = node.value.rows();
                let len = node.value.cols();
                let mut gp = Tensor::zeros(r, *orig_cols);
                for i in 0..r {
                    gp.data_mut()[i * orig_cols + start..i * orig_cols + start + len]
                        .copy_from_slice(g.row_slice(i));
                }
                self.accum(grads, p[0], gp);
            }
            Op::RepeatInterleaveCols { k } => {
                let (r, c) = self.nodes[p[0]].value.shape();
                let mut gp = Tensor::zeros(r, c);
                for i in 0..r {
                    for j in 0..c {
                        let mut s = 0.0;
                        for t in 0..*k {
                            s += g.at(i, j * k + t);
                        }
                        gp.set(i, j, s);
                    }
                }
                self.accum(grads, p[0], gp);
            }
            Op::SumColsGrouped { k } => {
                let (r, c) = self.nodes[p[0]].value.shape();
                let gcols = c / k;
                let mut gp = Tensor::zeros(r, c);
                for i in 0..r {
                    for j in 0..gcols {
                        let gv = g.at(i, j);
                        for t in 0..*k {
                            gp.set(i, j * k + t, gv);
                        }
                    }
                }
                self.accum(grads, p[0], gp);
            }
            Op::Silu => {
                let x = &self.nodes[p[0]].value;
                let mut gp = g.clone();
                for (gv, &xv) in gp.data_mut().iter_mut().zip(x.data()) {
                    let s = sigmoid(xv);
                    *gv *= s * (1.0 + xv * (1.0 - s));
                }
                self.accum(grads, p[0], gp);
            }
            Op::Sigmoid => {
                let mut gp = g.clone();
                for (gv, &ov) in gp.data_mut().iter_mut().zip(node.value.data()) {
                    *gv *= ov * (1.0 - ov);
                }
                self.accum(grads, p[0], gp);
            }
            Op::Exp => {
                let mut gp = g.clone();
                for (gv, &ov) in gp.data_mut().iter_mut().zip(node.value.data()) {
                    *gv *= ov;
                }
                self.accum(grads, p[0], gp);
            }
            Op::Sqrt => {
                let mut gp = g.clone();
                for (gv, &ov) in gp.data_mut().iter_mut().zip(node.value.data()) {
                    *gv *= 0.5 / ov;
                }
                self.accum(grads, p[0], gp);
            }
            Op::Abs => {
                let x = &self.nodes[p[0]].value;
                let mut gp = g.clone();
                for (gv, &xv) in gp.data_mut().iter_mut().zip(x.data()) {
                    *gv *= if xv > 0.0 {
                        1.0
                    } else if xv < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
                self.accum(grads, p[0], gp);
            }
            Op::Softplus => {
                let x = &self.nodes[p[0]].value;
                let mut gp = g.clone();
                for (gv, &xv) in gp.data_mut().iter_mut().zip(x.data()) {
                    *gv *= sigmoid(xv);
                }
                self.accum(grads, p[0], gp);
            }
            Op::SegmentMeanMasked {
                segments,
                mask,
                n_seg,
            } => {
                let (r, c) = self.nodes[p[0]].value.shape();
                let mut counts = vec![0usize; *n_seg];
                for i in 0..r {
                    if mask[i] {
                        counts[segments[i]] += 1;
                    }
                }
                let mut gp = Tensor::zeros(r, c);
                for i in 0..r {
                    if !mask[i] {
                        continue;
                    }
                    let s = segments[i];
                    let inv = 1.0 / counts[s] as f64;
                    let grow = g.row_slice(s);
                    let od = &mut gp.data_mut()[i * c..(i + 1) * c];
                    for j in 0..c {
                        od[j] = grow[j] * inv;
                    }
                }
                self.accum(grads, p[0], gp);
            }
            Op::SegmentSoftmax {
                segments,
                allowed,
                n_seg,
            } => {
                // y_i = softmax within segment; ds_i = y_i*(g_i - sum_j y_j g_j)
                let r = node.value.rows();
                let y = &node.value;
                let mut dot = vec![0.0; *n_seg];
                for i in 0..r {
                    if allowed[i] {
                        dot[segments[i]] += y.at(i, 0) * g.at(i, 0);
                    }
                }
                let mut gp = Tensor::zeros(r, 1);
                for i in 0..r {
                    if allowed[i] {
                        let yi = y.at(i, 0);
                        gp.data_mut()[i] = yi * (g.at(i, 0) - dot[segments[i]]);
                    }
                }
                self.accum(grads, p[0], gp);
            }
            Op::SegmentSum { segments, .. } => {
                let (r, c) = self.nodes[p[0]].value.shape();
                let mut gp = Tensor::zeros(r, c);
                for i in 0..r {
                    let grow = g.row_slice(segments[i]);
                    gp.data_mut()[i * c..(i + 1) * c].copy_from_slice(grow);
                }
                self.accum(grads, p[0], gp);
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Bin(k) => bin_name(*k),
        Op::Scale(_) => "scale",
        Op::AddScalar(_) => "add_scalar",
        Op::MatMul => "matmul",
        Op::ChannelMatMul { .. } => "channel_matmul",
        Op::TensorContract { .. } => "tensor_contract",
        Op::SumAxis { .. } => "sum_axis",
        Op::MeanAxis { .. } => "mean_axis",
        Op::SumAll => "sum_all",
        Op::MeanAll => "mean_all",
        Op::GatherRows { .. } => "gather_rows",
        Op::ScatterAddRows { .. } => "scatter_add_rows",
        Op::ConcatCols { .. } => "concat_cols",
        Op::ConcatRows { .. } => "concat_rows",
        Op::Transpose => "transpose",
        Op::SliceCols { .. } => "slice_cols",
        Op::RepeatInterleaveCols { .. } => "repeat_interleave_cols",
        Op::SumColsGrouped { .. } => "sum_cols_grouped",
        Op::Silu => "silu",
        Op::Sigmoid => "sigmoid",
        Op::Exp => "exp",
        Op::Sqrt => "sqrt",
        Op::Abs => "abs",
        Op::Softplus => "softplus",
        Op::Detach => "detach",
        Op::SegmentMeanMasked { .. } => "segment_mean_masked",
        Op::SegmentSoftmax { .. } => "segment_softmax",
        Op::SegmentSum { .. } => "segment_sum",
    }
}

fn bin_name(k: BinKind) -> &'static str {
    match k {
        BinKind::Add => "add",
        BinKind::Sub => "sub",
        BinKind::Mul => "mul",
        BinKind::Div => "div",
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
