//! Dense array operations recorded on a [`Graph`].
//!
//! Shapes are row-major. Elementwise binary ops require identical shapes;
//! the only broadcasts are the explicit ones (`add_bias`, `scale_rows`).

use std::rc::Rc;

use super::graph::{Graph, Var};
use crate::error::{Error, Result};

fn mismatch(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch(format!("{op}: {a:?} vs {b:?}"))
}

/// `(outer, n, inner)` view of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn removed_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

macro_rules! unary {
    ($(#[$m:meta])* $name:ident, |$x:ident| $f:expr, |$xx:ident, $y:ident| $df:expr) => {
        $(#[$m])*
        pub fn $name(&mut self, a: Var) -> Var {
            let av = self.value_rc(a);
            let out: Vec<f64> = av.iter().map(|&$x| $f).collect();
            let outv: Rc<[f64]> = out.clone().into();
            let shape = self.shape(a).to_vec();
            self.push(shape, out, &[a], move |g, p| {
                if let Some(ga) = p[0].as_deref_mut() {
                    for i in 0..g.len() {
                        let $xx = av[i];
                        let $y = outv[i];
                        ga[i] += g[i] * $df;
                    }
                }
            })
        }
    };
}

pub fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus_f(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Graph {
    fn binary_same(&self, op: &str, a: Var, b: Var) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_same("add", a, b)?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(shape, out, &[a, b], |g, p| {
            for slot in p.iter_mut().flatten() {
                for (s, gi) in slot.iter_mut().zip(g) {
                    *s += gi;
                }
            }
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_same("sub", a, b)?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        Ok(self.push(shape, out, &[a, b], |g, p| {
            if let Some(ga) = p[0].as_deref_mut() {
                ga.iter_mut().zip(g).for_each(|(s, gi)| *s += gi);
            }
            if let Some(gb) = p[1].as_deref_mut() {
                gb.iter_mut().zip(g).for_each(|(s, gi)| *s -= gi);
            }
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_same("mul", a, b)?;
        let (av, bv) = (self.value_rc(a), self.value_rc(b));
        let out: Vec<f64> = av.iter().zip(bv.iter()).map(|(x, y)| x * y).collect();
        Ok(self.push(shape, out, &[a, b], move |g, p| {
            if let Some(ga) = p[0].as_deref_mut() {
                for i in 0..g.len() {
                    ga[i] += g[i] * bv[i];
                }
            }
            if let Some(gb) = p[1].as_deref_mut() {
                for i in 0..g.len() {
                    gb[i] += g[i] * av[i];
                }
            }
        }))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_same("div", a, b)?;
        let (av, bv) = (self.value_rc(a), self.value_rc(b));
        let out: Vec<f64> = av.iter().zip(bv.iter()).map(|(x, y)| x / y).collect();
        Ok(self.push(shape, out, &[a, b], move |g, p| {
            if let Some(ga) = p[0].as_deref_mut() {
                for i in 0..g.len() {
                    ga[i] += g[i] / bv[i];
                }
            }
            if let Some(gb) = p[1].as_deref_mut() {
                for i in 0..g.len() {
                    gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                }
            }
        }))
    }

    /// `x + b` with `b` broadcast along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let m = *xs.last().unwrap_or(&1);
        if self.value(b).len() != m {
            return Err(mismatch("add_bias", &xs, self.shape(b)));
        }
        let bv = self.value_rc(b);
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[i % m])
            .collect();
        Ok(self.push(xs, out, &[x, b], move |g, p| {
            if let Some(gx) = p[0].as_deref_mut() {
                gx.iter_mut().zip(g).for_each(|(s, gi)| *s += gi);
            }
            if let Some(gb) = p[1].as_deref_mut() {
                for row in g.chunks(m) {
                    gb.iter_mut().zip(row).for_each(|(s, gi)| *s += gi);
                }
            }
        }))
    }

    /// Scales each slice `x[i, ...]` by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let n = xs.first().copied().unwrap_or(1);
        if self.value(s).len() != n {
            return Err(mismatch("scale_rows", &xs, self.shape(s)));
        }
        let inner = self.value(x).len() / n.max(1);
        let (xv, sv) = (self.value_rc(x), self.value_rc(s));
        let mut out = vec![0.0; xv.len()];
        for i in 0..n {
            for j in 0..inner {
                out[i * inner + j] = xv[i * inner + j] * sv[i];
            }
        }
        Ok(self.push(xs, out, &[x, s], move |g, p| {
            if let Some(gx) = p[0].as_deref_mut() {
                for i in 0..n {
                    for j in 0..inner {
                        gx[i * inner + j] += g[i * inner + j] * sv[i];
                    }
                }
            }
            if let Some(gs) = p[1].as_deref_mut() {
                for i in 0..n {
                    let mut acc = 0.0;
                    for j in 0..inner {
                        acc += g[i * inner + j] * xv[i * inner + j];
                    }
                    gs[i] += acc;
                }
            }
        }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, &[a], move |g, p| {
            if let Some(ga) = p[0].as_deref_mut() {
                ga.iter_mut().zip(g).for_each(|(s, gi)| *s += gi * c);
            }
        })
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|x| x + c).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, &[a], |g, p| {
            if let Some(ga) = p[0].as_deref_mut() {
                ga.iter_mut().zip(g).for_each(|(s, gi)| *s += gi);
            }
        })
    }

    /// Elementwise product with a constant array of the same length.
    pub fn mul_const(&mut self, a: Var, c: Rc<[f64]>) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(Error::ShapeMismatch(format!(
                "mul_const: {} vs {}",
                self.value(a).len(),
                c.len()
            )));
        }
        let out: Vec<f64> = self.value(a).iter().zip(c.iter()).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, &[a], move |g, p| {
            if let Some(ga) = p[0].as_deref_mut() {
                for i in 0..g.len() {
                    ga[i] += g[i] * c[i];
                }
            }
        }))
    }

    /// Elementwise sum with a constant array of the same length.
    pub fn add_const(&mut self, a: Var, c: &[f64]) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(Error::ShapeMismatch(format!(
                "add_const: {} vs {}",
                self.value(a).len(),
                c.len()
            )));
        }
        let out: Vec<f64> = self.value(a).iter().zip(c).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, &[a], |g, p| {
            if let Some(ga) = p[0].as_deref_mut() {
                ga.iter_mut().zip(g).for_each(|(s, gi)| *s += gi);
            }
        }))
    }

    unary!(relu, |x| x.max(0.0), |x, _y| if x > 0.0 { 1.0 } else { 0.0 });
    unary!(sigmoid, |x| sigmoid_f(x), |_x, y| y * (1.0 - y));
    unary!(softplus, |x| softplus_f(x), |x, _y| sigmoid_f(x));
    unary!(exp, |x| x.exp(), |_x, y| y);
    unary!(log, |x| x.ln(), |x, _y| 1.0 / x);
    unary!(tanh, |x| x.tanh(), |_x, y| 1.0 - y * y);
    unary!(sin, |x| x.sin(), |x, _y| x.cos());
    unary!(cos, |x| x.cos(), |x, _y| -x.sin());
    unary!(abs, |x| x.abs(), |x, _y| if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    });
    unary!(square, |x| x * x, |x, _y| 2.0 * x);
    unary!(sqrt, |x| x.sqrt(), |_x, y| 0.5 / y);

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Sum of all elements; scalar output.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).iter().sum();
        self.push(vec![], vec![s], &[a], |g, p| {
            if let Some(ga) = p[0].as_deref_mut() {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::ShapeMismatch(format!("sum_axis {axis} of {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let av = self.value(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &av[(o * n + k) * inner..(o * n + k + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        Ok(self.push(removed_axis(&shape, axis), out, &[a], move |g, p| {
            if let Some(ga) = p[0].as_deref_mut() {
                for o in 0..outer {
                    for k in 0..n {
                        let dst = &mut ga[(o * n + k) * inner..(o * n + k + 1) * inner];
                        dst.iter_mut()
                            .zip(&g[o * inner..(o + 1) * inner])
                            .for_each(|(d, s)| *d += s);
                    }
                }
            }
        }))
    }

    /// Index of the maximum along `axis` for every slice; lowest index wins ties.
    pub fn argmax_indices(&self, a: Var, axis: usize) -> Result<Vec<usize>> {
        let shape = self.shape(a);
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::ShapeMismatch(format!("argmax axis {axis} of {shape:?}")));
        }
        let (outer, n, inner) = split_axis(shape, axis);
        let av = self.value(a);
        let mut idx = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = av[o * n * inner + i];
                let mut arg = 0;
                for k in 1..n {
                    let v = av[(o * n + k) * inner + i];
                    if v > best {
                        best = v;
                        arg = k;
                    }
                }
                idx[o * inner + i] = arg;
            }
        }
        Ok(idx)
    }

    /// Non-differentiable index tensor (indices stored as floats).
    pub fn argmax_over_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let idx = self.argmax_indices(a, axis)?;
        let shape = removed_axis(self.shape(a), axis);
        Ok(self.detached(shape, idx.into_iter().map(|i| i as f64).collect()))
    }

    /// Maximum along `axis`. The subgradient goes to the argmax element only.
    pub fn max_over_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let idx = self.argmax_indices(a, axis)?;
        let shape = self.shape(a).to_vec();
        let (_, n, inner) = split_axis(&shape, axis);
        let av = self.value(a);
        let src: Vec<usize> = idx
            .iter()
            .enumerate()
            .map(|(j, &k)| {
                let (o, i) = (j / inner, j % inner);
                (o * n + k) * inner + i
            })
            .collect();
        let out: Vec<f64> = src.iter().map(|&s| av[s]).collect();
        Ok(self.push(removed_axis(&shape, axis), out, &[a], move |g, p| {
            if let Some(ga) = p[0].as_deref_mut() {
                for (j, &s) in src.iter().enumerate() {
                    ga[s] += g[j];
                }
            }
        }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::ShapeMismatch(format!("concat axis {axis} of {first:?}")));
        }
        let mut total = 0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(k, (a, b))| k == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", &first, s));
            }
            widths.push(s[axis]);
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * total * inner];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p);
            for o in 0..outer {
                let dst = (o * total + offset) * inner;
                out[dst..dst + w * inner].copy_from_slice(&v[o * w * inner..(o + 1) * w * inner]);
            }
            offset += w;
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(shape, out, parts, move |g, p| {
            let mut offset = 0;
            for (slot, &w) in p.iter_mut().zip(&widths) {
                if let Some(gp) = slot.as_deref_mut() {
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        gp[o * w * inner..(o + 1) * w * inner]
                            .iter_mut()
                            .zip(&g[src..src + w * inner])
                            .for_each(|(d, s)| *d += s);
                    }
                }
                offset += w;
            }
        }))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::ShapeMismatch(format!(
                "narrow [{start}, {}) on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let av = self.value(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * n + start) * inner;
            out.extend_from_slice(&av[s..s + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        Ok(self.push(new_shape, out, &[a], move |g, p| {
            if let Some(ga) = p[0].as_deref_mut() {
                for o in 0..outer {
                    let s = (o * n + start) * inner;
                    ga[s..s + len * inner]
                        .iter_mut()
                        .zip(&g[o * len * inner..(o + 1) * len * inner])
                        .for_each(|(d, x)| *d += x);
                }
            }
        }))
    }

    /// Rows `a[idx[i], ...]` stacked along a new leading axis.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = shape.first().copied().unwrap_or(0);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::ShapeMismatch(format!("gather index {bad} of {n} rows")));
        }
        let inner = self.value(a).len() / n.max(1);
        let av = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            out.extend_from_slice(&av[i * inner..(i + 1) * inner]);
        }
        let mut new_shape = shape;
        if new_shape.is_empty() {
            new_shape.push(idx.len());
        } else {
            new_shape[0] = idx.len();
        }
        let idx: Rc<[usize]> = idx.into();
        Ok(self.push(new_shape, out, &[a], move |g, p| {
            if let Some(ga) = p[0].as_deref_mut() {
                for (r, &i) in idx.iter().enumerate() {
                    ga[i * inner..(i + 1) * inner]
                        .iter_mut()
                        .zip(&g[r * inner..(r + 1) * inner])
                        .for_each(|(d, x)| *d += x);
                }
            }
        }))
    }

    /// Scatter-add of rows into `n_segments` buckets: `out[seg[i]] += a[i]`.
    pub fn segment_sum(&mut self, a: Var, seg: &[usize], n_segments: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = shape.first().copied().unwrap_or(0);
        if seg.len() != n {
            return Err(Error::LengthMismatch {
                left: seg.len(),
                right: n,
            });
        }
        if seg.iter().any(|&s| s >= n_segments) {
            return Err(Error::ShapeMismatch("segment id out of range".into()));
        }
        let inner = self.value(a).len() / n.max(1);
        let av = self.value(a);
        let mut out = vec![0.0; n_segments * inner];
        for (i, &s) in seg.iter().enumerate() {
            out[s * inner..(s + 1) * inner]
                .iter_mut()
                .zip(&av[i * inner..(i + 1) * inner])
                .for_each(|(d, x)| *d += x);
        }
        let mut new_shape = shape;
        new_shape[0] = n_segments;
        let seg: Rc<[usize]> = seg.into();
        Ok(self.push(new_shape, out, &[a], move |g, p| {
            if let Some(ga) = p[0].as_deref_mut() {
                for (i, &s) in seg.iter().enumerate() {
                    ga[i * inner..(i + 1) * inner]
                        .iter_mut()
                        .zip(&g[s * inner..(s + 1) * inner])
                        .for_each(|(d, x)| *d += x);
                }
            }
        }))
    }

    /// `[n, k] × [k, m] → [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value_rc(a), self.value_rc(b));
        let mut out = vec![0.0; n * m];
        matmul_into(&av, &bv, &mut out, k, m);
        Ok(self.push(vec![n, m], out, &[a, b], move |g, p| {
            if let Some(ga) = p[0].as_deref_mut() {
                // dA = G · Bᵀ
                gemm_acc(MatRef::new(g, m), MatRef::transposed(&bv[..], m), ga, m, k);
            }
            if let Some(gb) = p[1].as_deref_mut() {
                // dB = Aᵀ · G
                gemm_acc(MatRef::transposed(&av[..], k), MatRef::new(g, m), gb, n, m);
            }
        }))
    }

    /// Same values under a new shape with the same element count.
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(mismatch("reshape", self.shape(a), &shape));
        }
        let out = self.value(a).to_vec();
        Ok(self.push(shape, out, &[a], |g, p| {
            if let Some(ga) = p[0].as_deref_mut() {
                ga.iter_mut().zip(g).for_each(|(d, x)| *d += x);
            }
        }))
    }

    /// Exclusive prefix sum along the last axis: `out[.., i] = Σ_{j<i} a[.., j]`.
    pub fn cumsum_exclusive(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().unwrap_or(&1);
        let av = self.value(a);
        let mut out = vec![0.0; av.len()];
        for (src, dst) in av.chunks(n).zip(out.chunks_mut(n)) {
            let mut acc = 0.0;
            for (d, s) in dst.iter_mut().zip(src) {
                *d = acc;
                acc += s;
            }
        }
        self.push(shape, out, &[a], move |g, p| {
            if let Some(ga) = p[0].as_deref_mut() {
                for (gs, dst) in g.chunks(n).zip(ga.chunks_mut(n)) {
                    // d out_i / d a_j = 1 for j < i
                    let mut acc = 0.0;
                    for j in (0..n).rev() {
                        dst[j] += acc;
                        acc += gs[j];
                    }
                }
            }
        })
    }
}

/// Row-major `[rows, cols]` operand, possibly transposed in place.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Transpose of the row-major `[cols, rows]` matrix in `data`.
    pub fn transposed(data: &'a [f64], rows: usize) -> Self {
        MatRef {
            data,
            row_stride: 1,
            col_stride: rows,
        }
    }

    fn rows_from(self, r: usize) -> &'a [f64] {
        &self.data[r * self.row_stride..]
    }
}

/// `out += a · b` with `a: [n, k]`, `b: [k, m]`, `out: [n, m]` row-major.
/// Rows of `out` are computed in fixed blocks, so the result does not depend
/// on the thread count.
pub(crate) fn gemm_acc(a: MatRef, b: MatRef, out: &mut [f64], k: usize, m: usize) {
    const BLOCK: usize = 64;
    if m == 0 || k == 0 {
        return;
    }
    crate::exec::for_each_chunk_mut(out, m * BLOCK, |ci, chunk| {
        let rows = chunk.len() / m;
        let a_rows = a.rows_from(ci * BLOCK);
        // SAFETY: the strides address a `[rows, k]` block inside `a_rows`,
        // a `[k, m]` block inside `b.data`, and exactly `chunk`.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                m,
                1.0,
                a_rows.as_ptr(),
                a.row_stride as isize,
                a.col_stride as isize,
                b.data.as_ptr(),
                b.row_stride as isize,
                b.col_stride as isize,
                1.0,
                chunk.as_mut_ptr(),
                m as isize,
                1,
            );
        }
    });
}

/// `out += a · b` for row-major `a: [n, k]`, `b: [k, m]`, `out: [n, m]`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize) {
    gemm_acc(MatRef::new(a, k), MatRef::new(b, m), out, k, m);
}
