//! Forward constructors for every recorded op and their backward rules.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Op, Var};
use crate::real::{gemm, Real};
use crate::shape::{
    axis_split, broadcast_shape, broadcast_strides, contiguous_strides, for_each_broadcast, numel,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
enum Bin {
    Add,
    Sub,
    Mul,
    Div,
}

impl Bin {
    fn name(self) -> &'static str {
        match self {
            Bin::Add => "add",
            Bin::Sub => "sub",
            Bin::Mul => "mul",
            Bin::Div => "div",
        }
    }

    #[inline]
    fn apply<T: Real>(self, a: T, b: T) -> T {
        match self {
            Bin::Add => a + b,
            Bin::Sub => a - b,
            Bin::Mul => a * b,
            Bin::Div => a / b,
        }
    }
}

/// Bilinear footprint of a continuous query in a `h×w` grid whose cell
/// centres sit at `(j + 0.5, i + 0.5)`.
///
/// Returns four `(flat index, weight)` taps and whether the 2×2 footprint
/// lies inside the grid. Outside queries are clamped to the border.
pub fn bilinear_taps<T: Real>(h: usize, w: usize, x: T, y: T) -> ([(usize, T); 4], bool) {
    let half = T::c(0.5);
    let fx = x - half;
    let fy = y - half;
    let wmax = T::from_usize(w - 1).unwrap();
    let hmax = T::from_usize(h - 1).unwrap();
    let valid = fx.is_finite()
        && fy.is_finite()
        && fx >= T::zero()
        && fy >= T::zero()
        && fx <= wmax
        && fy <= hmax;
    let cx = if fx.is_finite() { fx.max(T::zero()).min(wmax) } else { T::zero() };
    let cy = if fy.is_finite() { fy.max(T::zero()).min(hmax) } else { T::zero() };
    let x0 = cx.floor().to_usize().unwrap().min(w - 1);
    let y0 = cy.floor().to_usize().unwrap().min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let ax = cx - T::from_usize(x0).unwrap();
    let ay = cy - T::from_usize(y0).unwrap();
    let one = T::one();
    (
        [
            (y0 * w + x0, (one - ax) * (one - ay)),
            (y0 * w + x1, ax * (one - ay)),
            (y1 * w + x0, (one - ax) * ay),
            (y1 * w + x1, ax * ay),
        ],
        valid,
    )
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        Err(TensorError::InvalidAxis { op, axis, rank })
    } else {
        Ok(())
    }
}

impl<T: Real> Graph<T> {
    // ----- broadcasting binary ops -----

    fn binary(&mut self, a: Var, b: Var, kind: Bin) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let out_shape =
            broadcast_shape(av.shape(), bv.shape()).ok_or_else(|| TensorError::ShapeMismatch {
                op: kind.name(),
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            })?;
        let data = if av.shape() == bv.shape() {
            av.data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| kind.apply(x, y))
                .collect()
        } else {
            let sa = broadcast_strides(av.shape(), &out_shape);
            let sb = broadcast_strides(bv.shape(), &out_shape);
            let (ad, bd) = (av.data(), bv.data());
            let mut out = vec![T::zero(); numel(&out_shape)];
            for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| {
                out[o] = kind.apply(ad[ia], bd[ib])
            });
            out
        };
        let op = match kind {
            Bin::Add => Op::Add(a, b),
            Bin::Sub => Op::Sub(a, b),
            Bin::Mul => Op::Mul(a, b),
            Bin::Div => Op::Div(a, b),
        };
        Ok(self.push(Tensor::from_parts(out_shape, data), op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Bin::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Bin::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Bin::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Bin::Div)
    }

    // ----- unary ops -----

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Log(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    /// ELU with α = 1.
    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| if v > T::zero() { v } else { v.exp_m1() },
            Op::Elu(x),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.sqrt(), Op::Sqrt(x))
    }

    // ----- linear algebra -----

    /// `[m,k] · [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            T::zero(),
        );
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    /// Batched product `[B,m,k] · [B,k,n]`, or `[B,m,k] · [B,n,k]ᵀ` when
    /// `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bad = || TensorError::ShapeMismatch {
            op: "bmm",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (bsz, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![T::zero(); bsz * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..bsz {
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..],
                false,
                &bd[i * k * n..],
                trans_b,
                &mut out[i * m * n..],
                T::zero(),
            );
        }
        Ok(self.push(
            Tensor::from_parts(vec![bsz, m, n], out),
            Op::BatchMatMul { a, b, trans_b },
            &[a, b],
        ))
    }

    // ----- reductions -----

    pub fn sum(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("sum", axis, shape.len())?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &xd[(o * len + l) * inner..][..inner];
                let dst = &mut out[o * inner..][..inner];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
            }
        }
        let out_shape = reduced_shape(&shape, axis, keepdim);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Sum { x, axis }, &[x]))
    }

    /// Minimum along `axis`; the gradient flows to the first minimiser.
    pub fn min(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("min", axis, shape.len())?;
        let (outer, len, inner) = axis_split(&shape, axis);
        if len == 0 {
            return Err(TensorError::Invalid {
                op: "min",
                msg: "empty axis".into(),
            });
        }
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        let mut arg = vec![0u32; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = xd[o * len * inner + i];
                let mut bi = 0;
                for l in 1..len {
                    let v = xd[(o * len + l) * inner + i];
                    if v < best {
                        best = v;
                        bi = l;
                    }
                }
                out[o * inner + i] = best;
                arg[o * inner + i] = bi as u32;
            }
        }
        let out_shape = reduced_shape(&shape, axis, keepdim);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Min { x, axis, arg },
            &[x],
        ))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("softmax", axis, shape.len())?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mut mx = T::neg_infinity();
                for l in 0..len {
                    mx = mx.max(xd[at(l)]);
                }
                let mut s = T::zero();
                for l in 0..len {
                    let e = (xd[at(l)] - mx).exp();
                    out[at(l)] = e;
                    s += e;
                }
                for l in 0..len {
                    out[at(l)] /= s;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x, axis }, &[x]))
    }

    /// `y_k = Σ_{j<k} x_j` along `axis`.
    pub fn cumsum_exclusive(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("cumsum_exclusive", axis, shape.len())?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = T::zero();
                for l in 0..len {
                    let at = (o * len + l) * inner + i;
                    out[at] = acc;
                    acc += xd[at];
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::CumsumExclusive { x, axis },
            &[x],
        ))
    }

    // ----- layout -----

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        check_axis("concat", axis, first.len())?;
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut out = vec![T::zero(); numel(&out_shape)];
        let mut offset = 0;
        for &v in xs {
            let len = self.shape(v)[axis];
            let xd = self.value(v).data();
            for o in 0..outer {
                let src = &xd[o * len * inner..][..len * inner];
                out[(o * total + offset) * inner..][..len * inner].copy_from_slice(src);
            }
            offset += len;
        }
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("narrow", axis, shape.len())?;
        if start + len > shape[axis] {
            return Err(TensorError::Invalid {
                op: "narrow",
                msg: format!("range {start}..{} exceeds axis of {}", start + len, shape[axis]),
            });
        }
        let (outer, full, inner) = axis_split(&shape, axis);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xd[(o * full + start) * inner..][..len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Narrow { x, axis, start },
            &[x],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if numel(shape) != v.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: v.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor::from_parts(shape.to_vec(), v.data().to_vec());
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Reorders axes: output axis `j` is input axis `perm[j]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of rank {}", shape.len()),
            });
        }
        let in_strides = contiguous_strides(&shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let zeros = vec![0; shape.len()];
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for_each_broadcast(&out_shape, &strides, &zeros, |o, i, _| out[o] = xd[i]);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        ))
    }

    /// Materialises `x` broadcast (trailing alignment) to `shape`.
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        match broadcast_shape(&xs, shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "broadcast_to",
                    lhs: xs,
                    rhs: shape.to_vec(),
                })
            }
        }
        let sx = broadcast_strides(&xs, shape);
        let zeros = vec![0; shape.len()];
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); numel(shape)];
        for_each_broadcast(shape, &sx, &zeros, |o, i, _| out[o] = xd[i]);
        Ok(self.push(
            Tensor::from_parts(shape.to_vec(), out),
            Op::BroadcastTo(x),
            &[x],
        ))
    }

    // ----- image ops -----

    /// 2-D convolution of `[B,C,H,W]` by `[O,C,k,k]` with zero padding.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        let bad = || TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: si.clone(),
            rhs: sw.clone(),
        };
        if si.len() != 4 || sw.len() != 4 || si[1] != sw[1] || sw[2] != sw[3] || stride == 0 {
            return Err(bad());
        }
        let (b, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (o, k) = (sw[0], sw[2]);
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(bad());
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [o] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![o],
                    rhs: self.shape(bv).to_vec(),
                });
            }
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let geo = ConvGeom {
            c,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        };
        let ckk = c * k * k;
        let hw = ho * wo;
        let xd = self.value(input).data();
        let mut cols = vec![T::zero(); b * ckk * hw];
        for bi in 0..b {
            im2col(&geo, &xd[bi * c * h * w..][..c * h * w], &mut cols[bi * ckk * hw..][..ckk * hw]);
        }
        let wd = self.value(weight).data();
        let mut out = vec![T::zero(); b * o * hw];
        for bi in 0..b {
            let dst = &mut out[bi * o * hw..][..o * hw];
            if let Some(bv) = bias {
                let bd = self.value(bv).data();
                for oc in 0..o {
                    dst[oc * hw..][..hw].iter_mut().for_each(|v| *v = bd[oc]);
                }
            }
            gemm(o, ckk, hw, wd, false, &cols[bi * ckk * hw..], false, dst, T::one());
        }
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            Tensor::from_parts(vec![b, o, ho, wo], out),
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
                cols,
            },
            &inputs,
        ))
    }

    /// Nearest-neighbour ×2 upsampling of `[B,C,H,W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(TensorError::Invalid {
                op: "upsample2x",
                msg: format!("expected rank 4, got {s:?}"),
            });
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); planes * 4 * h * w];
        for p in 0..planes {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + xx] = xd[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![s[0], s[1], 2 * h, 2 * w], out),
            Op::Upsample2x(x),
            &[x],
        ))
    }

    /// Bilinear lookup into a stack of channel-last maps `[V,h,w,C]`.
    ///
    /// Each query is `(map index, x, y)` in map pixel units (cell centres
    /// at `+0.5`). Returns `[Q,C]` and per-query footprint validity.
    pub fn bilinear(&mut self, map: Var, queries: &[(usize, T, T)]) -> Result<(Var, Vec<bool>)> {
        let s = self.shape(map).to_vec();
        if s.len() != 4 {
            return Err(TensorError::Invalid {
                op: "bilinear",
                msg: format!("expected [V,h,w,C], got {s:?}"),
            });
        }
        let (nv, h, w, c) = (s[0], s[1], s[2], s[3]);
        let md = self.value(map).data();
        let mut out = vec![T::zero(); queries.len() * c];
        let mut taps = Vec::with_capacity(queries.len());
        let mut valid = Vec::with_capacity(queries.len());
        for (q, &(view, x, y)) in queries.iter().enumerate() {
            if view >= nv {
                return Err(TensorError::Invalid {
                    op: "bilinear",
                    msg: format!("map index {view} out of {nv}"),
                });
            }
            let (t, ok) = bilinear_taps(h, w, x, y);
            let base = view * h * w;
            let mut rec = [(0u32, T::zero()); 4];
            let dst = &mut out[q * c..][..c];
            for (slot, &(idx, wt)) in rec.iter_mut().zip(&t) {
                let row = base + idx;
                *slot = (row as u32, wt);
                if wt != T::zero() {
                    let src = &md[row * c..][..c];
                    dst.iter_mut().zip(src).for_each(|(d, &v)| *d += wt * v);
                }
            }
            taps.push(rec);
            valid.push(ok);
        }
        let v = self.push(
            Tensor::from_parts(vec![queries.len(), c], out),
            Op::Bilinear { map, taps },
            &[map],
        );
        Ok((v, valid))
    }

    // ----- backward -----

    pub(crate) fn backward_node(&mut self, i: usize, g: &[T]) {
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        self.dispatch(i, &op, g);
        self.nodes[i].op = op;
    }

    fn dispatch(&mut self, i: usize, op: &Op<T>, g: &[T]) {
        let out = Var(i);
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => self.binary_back(out, g, a, b, |g, _, _| g, |g, _, _| g),
            Op::Sub(a, b) => self.binary_back(out, g, a, b, |g, _, _| g, |g, _, _| -g),
            Op::Mul(a, b) => self.binary_back(out, g, a, b, |g, _, y| g * y, |g, x, _| g * x),
            Op::Div(a, b) => {
                self.binary_back(out, g, a, b, |g, _, y| g / y, |g, x, y| -g * x / (y * y))
            }
            Op::Neg(x) => self.unary_back(out, g, x, |_, _| -T::one()),
            Op::Scale(x, c) => self.unary_back(out, g, x, move |_, _| c),
            Op::AddScalar(x) => self.add_grad(x, g),
            Op::Exp(x) => self.unary_back(out, g, x, |_, y| y),
            Op::Log(x) => self.unary_back(out, g, x, |x, _| T::one() / x),
            Op::Relu(x) => self.unary_back(out, g, x, |x, _| {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }),
            Op::Elu(x) => self.unary_back(out, g, x, |x, y| {
                if x > T::zero() {
                    T::one()
                } else {
                    y + T::one()
                }
            }),
            Op::Sigmoid(x) => self.unary_back(out, g, x, |_, y| y * (T::one() - y)),
            Op::Softplus(x) => self.unary_back(out, g, x, |x, _| sigmoid(x)),
            Op::Tanh(x) => self.unary_back(out, g, x, |_, y| T::one() - y * y),
            Op::Sqrt(x) => self.unary_back(out, g, x, |_, y| T::c(0.5) / y),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                self.with_grad(a, |ga, nodes| {
                    gemm(m, n, k, g, false, nodes[b.0].value.data(), true, ga, T::one())
                });
                self.with_grad(b, |gb, nodes| {
                    gemm(k, m, n, nodes[a.0].value.data(), true, g, false, gb, T::one())
                });
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (bsz, m, k) = (self.shape(a)[0], self.shape(a)[1], self.shape(a)[2]);
                let n = if trans_b { self.shape(b)[1] } else { self.shape(b)[2] };
                self.with_grad(a, |ga, nodes| {
                    let bd = nodes[b.0].value.data();
                    for s in 0..bsz {
                        gemm(
                            m,
                            n,
                            k,
                            &g[s * m * n..],
                            false,
                            &bd[s * k * n..],
                            !trans_b,
                            &mut ga[s * m * k..],
                            T::one(),
                        );
                    }
                });
                self.with_grad(b, |gb, nodes| {
                    let ad = nodes[a.0].value.data();
                    for s in 0..bsz {
                        if trans_b {
                            gemm(n, m, k, &g[s * m * n..], true, &ad[s * m * k..], false, &mut gb[s * k * n..], T::one());
                        } else {
                            gemm(k, m, n, &ad[s * m * k..], true, &g[s * m * n..], false, &mut gb[s * k * n..], T::one());
                        }
                    }
                });
            }
            Op::Sum { x, axis } => {
                let (outer, len, inner) = axis_split(self.shape(x), axis);
                self.with_grad(x, |gx, _| {
                    for o in 0..outer {
                        for l in 0..len {
                            let dst = &mut gx[(o * len + l) * inner..][..inner];
                            dst.iter_mut()
                                .zip(&g[o * inner..][..inner])
                                .for_each(|(d, &s)| *d += s);
                        }
                    }
                });
            }
            Op::Min { x, axis, ref arg } => {
                let (outer, len, inner) = axis_split(self.shape(x), axis);
                self.with_grad(x, |gx, _| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let l = arg[o * inner + ii] as usize;
                            gx[(o * len + l) * inner + ii] += g[o * inner + ii];
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(self.shape(x), axis);
                self.with_grad(x, |gx, nodes| {
                    let y = nodes[i].value.data();
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + ii;
                            let mut dot = T::zero();
                            for l in 0..len {
                                dot += g[at(l)] * y[at(l)];
                            }
                            for l in 0..len {
                                gx[at(l)] += y[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                });
            }
            Op::CumsumExclusive { x, axis } => {
                let (outer, len, inner) = axis_split(self.shape(x), axis);
                self.with_grad(x, |gx, _| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let mut acc = T::zero();
                            for l in (0..len).rev() {
                                let at = (o * len + l) * inner + ii;
                                gx[at] += acc;
                                acc += g[at];
                            }
                        }
                    }
                });
            }
            Op::Concat { ref xs, axis } => {
                let out_shape = self.shape(out).to_vec();
                let (outer, total, inner) = axis_split(&out_shape, axis);
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[axis];
                    self.with_grad(v, |gv, _| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..][..len * inner];
                            gv[o * len * inner..][..len * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &s)| *d += s);
                        }
                    });
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let len = self.shape(out)[axis];
                let (outer, full, inner) = axis_split(self.shape(x), axis);
                self.with_grad(x, |gx, _| {
                    for o in 0..outer {
                        gx[(o * full + start) * inner..][..len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..][..len * inner])
                            .for_each(|(d, &s)| *d += s);
                    }
                });
            }
            Op::Reshape(x) => self.add_grad(x, g),
            Op::Permute { x, ref perm } => {
                let in_strides = contiguous_strides(self.shape(x));
                let out_shape = self.shape(out).to_vec();
                let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
                let zeros = vec![0; strides.len()];
                self.with_grad(x, |gx, _| {
                    for_each_broadcast(&out_shape, &strides, &zeros, |o, ix, _| gx[ix] += g[o]);
                });
            }
            Op::BroadcastTo(x) => {
                let out_shape = self.shape(out).to_vec();
                let sx = broadcast_strides(self.shape(x), &out_shape);
                let zeros = vec![0; out_shape.len()];
                self.with_grad(x, |gx, _| {
                    for_each_broadcast(&out_shape, &sx, &zeros, |o, ix, _| gx[ix] += g[o]);
                });
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
                ref cols,
            } => {
                let si = self.shape(input).to_vec();
                let sw = self.shape(weight).to_vec();
                let so = self.shape(out).to_vec();
                let (b, c, h, w) = (si[0], si[1], si[2], si[3]);
                let (o, k) = (sw[0], sw[2]);
                let (ho, wo) = (so[2], so[3]);
                let geo = ConvGeom {
                    c,
                    h,
                    w,
                    k,
                    stride,
                    pad,
                    ho,
                    wo,
                };
                let ckk = c * k * k;
                let hw = ho * wo;
                self.with_grad(weight, |gw, _| {
                    for bi in 0..b {
                        gemm(o, hw, ckk, &g[bi * o * hw..], false, &cols[bi * ckk * hw..], true, gw, T::one());
                    }
                });
                if let Some(bv) = bias {
                    self.with_grad(bv, |gb, _| {
                        for bi in 0..b {
                            for (oc, acc) in gb.iter_mut().enumerate() {
                                *acc += g[(bi * o + oc) * hw..][..hw].iter().copied().sum::<T>();
                            }
                        }
                    });
                }
                self.with_grad(input, |gx, nodes| {
                    let wd = nodes[weight.0].value.data();
                    let mut gcols = vec![T::zero(); ckk * hw];
                    for bi in 0..b {
                        gemm(ckk, o, hw, wd, true, &g[bi * o * hw..], false, &mut gcols, T::zero());
                        col2im(&geo, &gcols, &mut gx[bi * c * h * w..][..c * h * w]);
                    }
                });
            }
            Op::Upsample2x(x) => {
                let s = self.shape(x).to_vec();
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                self.with_grad(x, |gx, _| {
                    for p in 0..planes {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                gx[(p * h + y / 2) * w + xx / 2] += g[(p * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                });
            }
            Op::Bilinear { map, ref taps } => {
                let c = self.shape(map)[3];
                self.with_grad(map, |gm, _| {
                    for (q, rec) in taps.iter().enumerate() {
                        let gq = &g[q * c..][..c];
                        for &(row, wt) in rec {
                            if wt == T::zero() {
                                continue;
                            }
                            gm[row as usize * c..][..c]
                                .iter_mut()
                                .zip(gq)
                                .for_each(|(d, &s)| *d += wt * s);
                        }
                    }
                });
            }
        }
    }

    fn binary_back(
        &mut self,
        out: Var,
        g: &[T],
        a: Var,
        b: Var,
        da: impl Fn(T, T, T) -> T,
        db: impl Fn(T, T, T) -> T,
    ) {
        let out_shape = self.shape(out).to_vec();
        let sa = broadcast_strides(self.shape(a), &out_shape);
        let sb = broadcast_strides(self.shape(b), &out_shape);
        self.with_grad(a, |ga, nodes| {
            let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| {
                ga[ia] += da(g[o], av[ia], bv[ib])
            });
        });
        self.with_grad(b, |gb, nodes| {
            let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| {
                gb[ib] += db(g[o], av[ia], bv[ib])
            });
        });
    }

    /// `dx += g · d(x, y)` elementwise.
    fn unary_back(&mut self, out: Var, g: &[T], x: Var, d: impl Fn(T, T) -> T) {
        self.with_grad(x, |gx, nodes| {
            let xv = nodes[x.0].value.data();
            let yv = nodes[out.0].value.data();
            for k in 0..gx.len() {
                gx[k] += g[k] * d(xv[k], yv[k]);
            }
        });
    }
}

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keepdim {
        s[axis] = 1;
    } else {
        s.remove(axis);
    }
    s
}

#[inline]
pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Real>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    /// Input coordinate along one axis, `None` inside the zero padding.
    #[inline]
    fn src(&self, out: usize, tap: usize, limit: usize) -> Option<usize> {
        let p = (out * self.stride + tap) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < limit).then_some(p as usize)
    }
}

fn im2col<T: Real>(geo: &ConvGeom, x: &[T], cols: &mut [T]) {
    let hw = geo.ho * geo.wo;
    for ch in 0..geo.c {
        for ki in 0..geo.k {
            for kj in 0..geo.k {
                let row = &mut cols[((ch * geo.k + ki) * geo.k + kj) * hw..][..hw];
                for oy in 0..geo.ho {
                    let Some(iy) = geo.src(oy, ki, geo.h) else {
                        row[oy * geo.wo..][..geo.wo].fill(T::zero());
                        continue;
                    };
                    for ox in 0..geo.wo {
                        row[oy * geo.wo + ox] = match geo.src(ox, kj, geo.w) {
                            Some(ix) => x[(ch * geo.h + iy) * geo.w + ix],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(geo: &ConvGeom, cols: &[T], gx: &mut [T]) {
    let hw = geo.ho * geo.wo;
    for ch in 0..geo.c {
        for ki in 0..geo.k {
            for kj in 0..geo.k {
                let row = &cols[((ch * geo.k + ki) * geo.k + kj) * hw..][..hw];
                for oy in 0..geo.ho {
                    let Some(iy) = geo.src(oy, ki, geo.h) else {
                        continue;
                    };
                    for ox in 0..geo.wo {
                        if let Some(ix) = geo.src(ox, kj, geo.w) {
                            gx[(ch * geo.h + iy) * geo.w + ix] += row[oy * geo.wo + ox];
                        }
                    }
                }
            }
        }
    }
}
