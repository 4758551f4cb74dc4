//! Forward primitives and their adjoints.
//!
//! Each op validates shapes, rejects non-finite outputs, and records itself
//! on the tape when any input is part of the gradient graph. Convolutions
//! run as im2col + a row-major GEMM, parallelized over disjoint output rows
//! so results are bit-identical for any worker count.

use rayon::prelude::*;

use super::{check_finite, invalid, Op, Result, Tape, Tensor, TensorError};

// ── elementwise binary ops (scalar-tensor broadcast only) ─────────────

enum Pairing {
    Same,
    ScalarLhs,
    ScalarRhs,
}

fn pair_shapes(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(Pairing, Vec<usize>)> {
    if a.shape() == b.shape() {
        Ok((Pairing::Same, a.shape().to_vec()))
    } else if a.is_scalar() {
        Ok((Pairing::ScalarLhs, b.shape().to_vec()))
    } else if b.is_scalar() {
        Ok((Pairing::ScalarRhs, a.shape().to_vec()))
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
    tape: &Tape,
    make: impl FnOnce(Tensor, Tensor, Tensor) -> Op,
) -> Result<Tensor> {
    let (pairing, shape) = pair_shapes(op, a, b)?;
    let data: Vec<f64> = match pairing {
        Pairing::Same => a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        Pairing::ScalarLhs => {
            let x = a.value();
            b.data().iter().map(|&y| f(x, y)).collect()
        }
        Pairing::ScalarRhs => {
            let y = b.value();
            a.data().iter().map(|&x| f(x, y)).collect()
        }
    };
    check_finite(op, &data)?;
    let tracked = a.tracked() || b.tracked();
    let out = Tensor::from_op(data, shape, tracked);
    if tracked {
        tape.record(make(a.clone(), b.clone(), out.clone()));
    }
    Ok(out)
}

fn unary(
    op: &'static str,
    x: &Tensor,
    f: impl Fn(f64) -> f64,
    tape: &Tape,
    make: impl FnOnce(Tensor, Tensor) -> Op,
) -> Result<Tensor> {
    let data: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    check_finite(op, &data)?;
    let out = Tensor::from_op(data, x.shape().to_vec(), x.tracked());
    if x.tracked() {
        tape.record(make(x.clone(), out.clone()));
    }
    Ok(out)
}

impl Tensor {
    pub fn add(&self, rhs: &Tensor, tape: &Tape) -> Result<Tensor> {
        binary("add", self, rhs, |x, y| x + y, tape, |a, b, out| Op::Add { a, b, out })
    }

    pub fn sub(&self, rhs: &Tensor, tape: &Tape) -> Result<Tensor> {
        binary("sub", self, rhs, |x, y| x - y, tape, |a, b, out| Op::Sub { a, b, out })
    }

    pub fn mul(&self, rhs: &Tensor, tape: &Tape) -> Result<Tensor> {
        binary("mul", self, rhs, |x, y| x * y, tape, |a, b, out| Op::Mul { a, b, out })
    }

    /// Multiply by a compile-time constant (not differentiated through).
    pub fn scale(&self, k: f64, tape: &Tape) -> Result<Tensor> {
        if !k.is_finite() {
            return Err(TensorError::NonFinite { op: "scale" });
        }
        let data: Vec<f64> = self.data().iter().map(|&v| v * k).collect();
        check_finite("scale", &data)?;
        let out = Tensor::from_op(data, self.shape().to_vec(), self.tracked());
        if self.tracked() {
            tape.record(Op::Scale { a: self.clone(), k, out: out.clone() });
        }
        Ok(out)
    }

    /// Add a constant to every element (not differentiated through).
    pub fn offset(&self, k: f64, tape: &Tape) -> Result<Tensor> {
        if !k.is_finite() {
            return Err(TensorError::NonFinite { op: "offset" });
        }
        let data: Vec<f64> = self.data().iter().map(|&v| v + k).collect();
        check_finite("offset", &data)?;
        let out = Tensor::from_op(data, self.shape().to_vec(), self.tracked());
        if self.tracked() {
            tape.record(Op::Offset { a: self.clone(), out: out.clone() });
        }
        Ok(out)
    }

    pub fn relu(&self, tape: &Tape) -> Result<Tensor> {
        unary("relu", self, |v| v.max(0.0), tape, |x, out| Op::Relu { x, out })
    }

    pub fn leaky_relu(&self, slope: f64, tape: &Tape) -> Result<Tensor> {
        unary(
            "leaky_relu",
            self,
            |v| if v > 0.0 { v } else { slope * v },
            tape,
            move |x, out| Op::LeakyRelu { x, slope, out },
        )
    }

    pub fn tanh(&self, tape: &Tape) -> Result<Tensor> {
        unary("tanh", self, f64::tanh, tape, |x, out| Op::Tanh { x, out })
    }

    pub fn sigmoid(&self, tape: &Tape) -> Result<Tensor> {
        unary("sigmoid", self, |v| 1.0 / (1.0 + (-v).exp()), tape, |x, out| Op::Sigmoid { x, out })
    }

    pub fn abs(&self, tape: &Tape) -> Result<Tensor> {
        unary("abs", self, f64::abs, tape, |x, out| Op::Abs { x, out })
    }

    /// Natural log; errors on non-positive inputs (no silent NaN).
    pub fn log(&self, tape: &Tape) -> Result<Tensor> {
        unary("log", self, f64::ln, tape, |x, out| Op::Log { x, out })
    }

    /// Mean over all elements, yielding a scalar.
    pub fn mean_all(&self, tape: &Tape) -> Result<Tensor> {
        if self.numel() == 0 {
            return Err(invalid("mean_all", "empty tensor"));
        }
        let m = self.data().iter().sum::<f64>() / self.numel() as f64;
        check_finite("mean_all", &[m])?;
        let out = Tensor::from_op(vec![m], vec![1], self.tracked());
        if self.tracked() {
            tape.record(Op::MeanAll { x: self.clone(), out: out.clone() });
        }
        Ok(out)
    }

    /// Same data, new shape with identical element count.
    pub fn reshape(&self, shape: &[usize], tape: &Tape) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = Tensor::from_op(self.data().to_vec(), shape.to_vec(), self.tracked());
        if self.tracked() {
            tape.record(Op::Reshape { x: self.clone(), out: out.clone() });
        }
        Ok(out)
    }

    /// 2-D matrix product: `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, rhs: &Tensor, tape: &Tape) -> Result<Tensor> {
        let (a, b) = (self, rhs);
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut data = vec![0.0; m * n];
        matmul_into(a.data(), b.data(), &mut data, m, k, n);
        check_finite("matmul", &data)?;
        let tracked = a.tracked() || b.tracked();
        let out = Tensor::from_op(data, vec![m, n], tracked);
        if tracked {
            tape.record(Op::Matmul { a: a.clone(), b: b.clone(), out: out.clone() });
        }
        Ok(out)
    }

    /// 2-D convolution over `[B,C,H,W]` with kernel `[O,C,kh,kw]`.
    /// Output side length is `(H + 2*padding - kh) / stride + 1` (floor).
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        padding: usize,
        tape: &Tape,
    ) -> Result<Tensor> {
        let geom = ConvGeom::resolve("conv2d", self.shape(), weight.shape(), bias, stride, padding)?;
        let data = conv_forward(self.data(), weight.data(), bias.map(|b| b.data()), &geom);
        check_finite("conv2d", &data)?;
        let tracked =
            self.tracked() || weight.tracked() || bias.map(|b| b.tracked()).unwrap_or(false);
        let out = Tensor::from_op(data, geom.out_shape(), tracked);
        if tracked {
            tape.record(Op::Conv2d {
                x: self.clone(),
                w: weight.clone(),
                b: bias.cloned(),
                stride,
                padding,
                out: out.clone(),
            });
        }
        Ok(out)
    }

    /// Fractionally-strided convolution (stride 1/2): zero-insertion
    /// upsampling onto a `[2H, 2W]` canvas followed by a stride-1
    /// convolution. Output side length is `2H + 2*padding - kh + 1`
    /// (`2H` for the usual 3x3 kernel with padding 1).
    pub fn frac_conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        padding: usize,
        tape: &Tape,
    ) -> Result<Tensor> {
        let (canvas, canvas_shape) = zero_insert_upsample("frac_conv2d", self)?;
        let geom =
            ConvGeom::resolve("frac_conv2d", &canvas_shape, weight.shape(), bias, 1, padding)?;
        let data = conv_forward(&canvas, weight.data(), bias.map(|b| b.data()), &geom);
        check_finite("frac_conv2d", &data)?;
        let tracked =
            self.tracked() || weight.tracked() || bias.map(|b| b.tracked()).unwrap_or(false);
        let out = Tensor::from_op(data, geom.out_shape(), tracked);
        if tracked {
            tape.record(Op::FracConv2d {
                x: self.clone(),
                w: weight.clone(),
                b: bias.cloned(),
                padding,
                out: out.clone(),
            });
        }
        Ok(out)
    }

    /// Instance normalization over `[B,C,H,W]`: each `(b,c)` plane is
    /// shifted to zero mean and unit variance (epsilon inside the sqrt).
    pub fn instance_norm(&self, eps: f64, tape: &Tape) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 4 {
            return Err(invalid(
                "instance_norm",
                format!("expected [B,C,H,W], got {:?}", shape),
            ));
        }
        let (bsz, ch, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let plane = h * w;
        if plane == 0 {
            return Err(invalid("instance_norm", "empty spatial plane"));
        }
        let x = self.data();
        let mut data = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; bsz * ch];
        for g in 0..bsz * ch {
            let xs = &x[g * plane..(g + 1) * plane];
            let mean = xs.iter().sum::<f64>() / plane as f64;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[g] = inv;
            for (o, &v) in data[g * plane..(g + 1) * plane].iter_mut().zip(xs) {
                *o = (v - mean) * inv;
            }
        }
        check_finite("instance_norm", &data)?;
        let out = Tensor::from_op(data, shape.to_vec(), self.tracked());
        if self.tracked() {
            tape.record(Op::InstanceNorm { x: self.clone(), inv_std, out: out.clone() });
        }
        Ok(out)
    }
}

// ── dense kernels ──────────────────────────────────────────────────────

fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

struct ConvGeom {
    batch: usize,
    in_ch: usize,
    in_h: usize,
    in_w: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn resolve(
        op: &'static str,
        x_shape: &[usize],
        w_shape: &[usize],
        bias: Option<&Tensor>,
        stride: usize,
        padding: usize,
    ) -> Result<ConvGeom> {
        if x_shape.len() != 4 || w_shape.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: x_shape.to_vec(),
                rhs: w_shape.to_vec(),
            });
        }
        if x_shape[1] != w_shape[1] {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: x_shape.to_vec(),
                rhs: w_shape.to_vec(),
            });
        }
        if stride == 0 {
            return Err(invalid(op, "stride must be >= 1"));
        }
        let (kh, kw) = (w_shape[2], w_shape[3]);
        let (h, w) = (x_shape[2], x_shape[3]);
        let span_h = (h + 2 * padding).checked_sub(kh);
        let span_w = (w + 2 * padding).checked_sub(kw);
        let (span_h, span_w) = match (span_h, span_w) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(invalid(
                    op,
                    format!("kernel {kh}x{kw} larger than padded input {h}x{w} (padding {padding})"),
                ))
            }
        };
        if let Some(b) = bias {
            if b.shape() != [w_shape[0]] {
                return Err(TensorError::ShapeMismatch {
                    op,
                    lhs: b.shape().to_vec(),
                    rhs: vec![w_shape[0]],
                });
            }
        }
        Ok(ConvGeom {
            batch: x_shape[0],
            in_ch: x_shape[1],
            in_h: h,
            in_w: w,
            out_ch: w_shape[0],
            kh,
            kw,
            stride,
            padding,
            out_h: span_h / stride + 1,
            out_w: span_w / stride + 1,
        })
    }

    fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_ch, self.out_h, self.out_w]
    }

    fn cols_rows(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn cols_len(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

/// Patch matrix transposed: row `k = (c, ky, kx)`, column `m = (b, oy, ox)`.
fn im2col_t(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let m_len = g.cols_len();
    let mut cols = vec![0.0; g.cols_rows() * m_len];
    let plane = g.in_h * g.in_w;
    cols.par_chunks_mut(m_len).enumerate().for_each(|(k, row)| {
        let c = k / (g.kh * g.kw);
        let ky = (k / g.kw) % g.kh;
        let kx = k % g.kw;
        for b in 0..g.batch {
            let xplane = &x[(b * g.in_ch + c) * plane..(b * g.in_ch + c + 1) * plane];
            for oy in 0..g.out_h {
                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                if iy < 0 || iy >= g.in_h as isize {
                    continue;
                }
                let xrow = &xplane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                let mbase = (b * g.out_h + oy) * g.out_w;
                for ox in 0..g.out_w {
                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                    if ix >= 0 && ix < g.in_w as isize {
                        row[mbase + ox] = xrow[ix as usize];
                    }
                }
            }
        }
    });
    cols
}

/// `row += sum_j coeff_j * rows_j`, four source rows per sweep.
fn axpy4(row: &mut [f64], coeffs: &[f64], stride: usize, mat: &[f64], k0: usize, k_len: usize, m: usize) {
    let mut k = k0;
    while k + 4 <= k_len {
        let (w0, w1, w2, w3) = (
            coeffs[k * stride],
            coeffs[(k + 1) * stride],
            coeffs[(k + 2) * stride],
            coeffs[(k + 3) * stride],
        );
        let c0 = &mat[k * m..(k + 1) * m];
        let c1 = &mat[(k + 1) * m..(k + 2) * m];
        let c2 = &mat[(k + 2) * m..(k + 3) * m];
        let c3 = &mat[(k + 3) * m..(k + 4) * m];
        for ((((r, &a), &b), &c), &d) in
            row.iter_mut().zip(c0).zip(c1).zip(c2).zip(c3)
        {
            *r += w0 * a + w1 * b + w2 * c + w3 * d;
        }
        k += 4;
    }
    while k < k_len {
        let wv = coeffs[k * stride];
        if wv != 0.0 {
            let crow = &mat[k * m..(k + 1) * m];
            for (r, &cv) in row.iter_mut().zip(crow) {
                *r += wv * cv;
            }
        }
        k += 1;
    }
}

fn conv_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let m_len = g.cols_len();
    let k_len = g.cols_rows();
    let cols = im2col_t(x, g);
    let mut out_t = vec![0.0; g.out_ch * m_len];
    out_t.par_chunks_mut(m_len).enumerate().for_each(|(o, row)| {
        if let Some(b) = bias {
            row.fill(b[o]);
        }
        axpy4(row, &w[o * k_len..(o + 1) * k_len], 1, &cols, 0, k_len, m_len);
    });
    // out_t is [O, B*OH*OW]; reorder to [B, O, OH, OW].
    let opl = g.out_h * g.out_w;
    let mut out = vec![0.0; g.batch * g.out_ch * opl];
    for b in 0..g.batch {
        for o in 0..g.out_ch {
            let src = &out_t[o * m_len + b * opl..o * m_len + (b + 1) * opl];
            out[(b * g.out_ch + o) * opl..(b * g.out_ch + o + 1) * opl].copy_from_slice(src);
        }
    }
    out
}

struct ConvGrads {
    dx: Vec<f64>,
    dw: Vec<f64>,
    db: Vec<f64>,
}

fn conv_backward(x: &[f64], w: &[f64], g_out: &[f64], g: &ConvGeom) -> ConvGrads {
    let m_len = g.cols_len();
    let k_len = g.cols_rows();
    let opl = g.out_h * g.out_w;

    // Upstream gradient transposed to [O, B*OH*OW].
    let mut g_t = vec![0.0; g.out_ch * m_len];
    for b in 0..g.batch {
        for o in 0..g.out_ch {
            let src = &g_out[(b * g.out_ch + o) * opl..(b * g.out_ch + o + 1) * opl];
            g_t[o * m_len + b * opl..o * m_len + (b + 1) * opl].copy_from_slice(src);
        }
    }

    let cols = im2col_t(x, g);

    let mut dw = vec![0.0; g.out_ch * k_len];
    dw.par_chunks_mut(k_len).enumerate().for_each(|(o, wrow)| {
        let grow = &g_t[o * m_len..(o + 1) * m_len];
        for (k, wv) in wrow.iter_mut().enumerate() {
            let crow = &cols[k * m_len..(k + 1) * m_len];
            *wv = grow.iter().zip(crow).map(|(&a, &b)| a * b).sum();
        }
    });

    let mut db = vec![0.0; g.out_ch];
    for (o, dbv) in db.iter_mut().enumerate() {
        *dbv = g_t[o * m_len..(o + 1) * m_len].iter().sum();
    }

    let mut d_cols = vec![0.0; k_len * m_len];
    d_cols.par_chunks_mut(m_len).enumerate().for_each(|(k, row)| {
        // coefficients stride over the weight matrix column k
        axpy4(row, &w[k..], k_len, &g_t, 0, g.out_ch, m_len);
    });

    // col2im scatter, parallel over batch images (disjoint output slices).
    let plane = g.in_h * g.in_w;
    let mut dx = vec![0.0; g.batch * g.in_ch * plane];
    dx.par_chunks_mut(g.in_ch * plane).enumerate().for_each(|(b, dxi)| {
        for k in 0..k_len {
            let c = k / (g.kh * g.kw);
            let ky = (k / g.kw) % g.kh;
            let kx = k % g.kw;
            let row = &d_cols[k * m_len..(k + 1) * m_len];
            for oy in 0..g.out_h {
                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                if iy < 0 || iy >= g.in_h as isize {
                    continue;
                }
                let mbase = (b * g.out_h + oy) * g.out_w;
                let dplane = &mut dxi[c * plane + iy as usize * g.in_w..];
                for ox in 0..g.out_w {
                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                    if ix >= 0 && ix < g.in_w as isize {
                        dplane[ix as usize] += row[mbase + ox];
                    }
                }
            }
        }
    });

    ConvGrads { dx, dw, db }
}

fn zero_insert_upsample(op: &'static str, x: &Tensor) -> Result<(Vec<f64>, Vec<usize>)> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(invalid(op, format!("expected [B,C,H,W], got {:?}", shape)));
    }
    let (bsz, ch, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (uh, uw) = (2 * h, 2 * w);
    let mut canvas = vec![0.0; bsz * ch * uh * uw];
    let xd = x.data();
    for bc in 0..bsz * ch {
        for y in 0..h {
            let src = &xd[(bc * h + y) * w..(bc * h + y + 1) * w];
            let dst = &mut canvas[(bc * uh + 2 * y) * uw..(bc * uh + 2 * y + 1) * uw];
            for (xi, &v) in src.iter().enumerate() {
                dst[2 * xi] = v;
            }
        }
    }
    Ok((canvas, vec![bsz, ch, uh, uw]))
}

// ── adjoints ───────────────────────────────────────────────────────────

/// Adjoint of one recorded op: distribute `g` (d loss / d out) onto inputs.
pub(crate) fn backward_op(op: &Op, g: &[f64], acc: &mut dyn FnMut(&Tensor, &[f64])) {
    match op {
        Op::Add { a, b, .. } => {
            spread(a, g, acc, |_, gv| gv);
            spread(b, g, acc, |_, gv| gv);
        }
        Op::Sub { a, b, .. } => {
            spread(a, g, acc, |_, gv| gv);
            spread(b, g, acc, |_, gv| -gv);
        }
        Op::Mul { a, b, .. } => {
            if a.tracked() {
                mul_adjoint(a, b, g, acc);
            }
            if b.tracked() {
                mul_adjoint(b, a, g, acc);
            }
        }
        Op::Scale { a, k, .. } => {
            let da: Vec<f64> = g.iter().map(|&gv| k * gv).collect();
            acc(a, &da);
        }
        Op::Offset { a, .. } => acc(a, g),
        Op::Matmul { a, b, .. } => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if a.tracked() {
                // dA[i,kk] = sum_j g[i,j] * B[kk,j]
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for kk in 0..k {
                        let brow = &b.data()[kk * n..(kk + 1) * n];
                        da[i * k + kk] = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                    }
                }
                acc(a, &da);
            }
            if b.tracked() {
                // dB[kk,j] = sum_i A[i,kk] * g[i,j]
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for kk in 0..k {
                        let av = a.data()[i * k + kk];
                        if av == 0.0 {
                            continue;
                        }
                        let dbrow = &mut db[kk * n..(kk + 1) * n];
                        for (d, &gv) in dbrow.iter_mut().zip(grow) {
                            *d += av * gv;
                        }
                    }
                }
                acc(b, &db);
            }
        }
        Op::Conv2d { x, w, b, stride, padding, .. } => {
            let geom = ConvGeom::resolve("conv2d", x.shape(), w.shape(), b.as_ref(), *stride, *padding)
                .expect("geometry validated in forward");
            let grads = conv_backward(x.data(), w.data(), g, &geom);
            if x.tracked() {
                acc(x, &grads.dx);
            }
            if w.tracked() {
                acc(w, &grads.dw);
            }
            if let Some(bias) = b {
                if bias.tracked() {
                    acc(bias, &grads.db);
                }
            }
        }
        Op::FracConv2d { x, w, b, padding, .. } => {
            let (canvas, canvas_shape) =
                zero_insert_upsample("frac_conv2d", x).expect("validated in forward");
            let geom =
                ConvGeom::resolve("frac_conv2d", &canvas_shape, w.shape(), b.as_ref(), 1, *padding)
                    .expect("geometry validated in forward");
            let grads = conv_backward(&canvas, w.data(), g, &geom);
            if x.tracked() {
                // Pick the even-index lattice back out of the canvas gradient.
                let s = x.shape();
                let (bsz, ch, h, w_in) = (s[0], s[1], s[2], s[3]);
                let (uh, uw) = (2 * h, 2 * w_in);
                let mut dx = vec![0.0; x.numel()];
                for bc in 0..bsz * ch {
                    for y in 0..h {
                        let src = &grads.dx[(bc * uh + 2 * y) * uw..(bc * uh + 2 * y + 1) * uw];
                        let dst = &mut dx[(bc * h + y) * w_in..(bc * h + y + 1) * w_in];
                        for (xi, d) in dst.iter_mut().enumerate() {
                            *d = src[2 * xi];
                        }
                    }
                }
                acc(x, &dx);
            }
            if w.tracked() {
                acc(w, &grads.dw);
            }
            if let Some(bias) = b {
                if bias.tracked() {
                    acc(bias, &grads.db);
                }
            }
        }
        Op::Relu { x, .. } => {
            let dx: Vec<f64> =
                x.data().iter().zip(g).map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 }).collect();
            acc(x, &dx);
        }
        Op::LeakyRelu { x, slope, .. } => {
            let dx: Vec<f64> = x
                .data()
                .iter()
                .zip(g)
                .map(|(&v, &gv)| if v > 0.0 { gv } else { slope * gv })
                .collect();
            acc(x, &dx);
        }
        Op::Tanh { x, out } => {
            let dx: Vec<f64> =
                out.data().iter().zip(g).map(|(&y, &gv)| gv * (1.0 - y * y)).collect();
            acc(x, &dx);
        }
        Op::Sigmoid { x, out } => {
            let dx: Vec<f64> =
                out.data().iter().zip(g).map(|(&y, &gv)| gv * y * (1.0 - y)).collect();
            acc(x, &dx);
        }
        Op::InstanceNorm { x, inv_std, out } => {
            let shape = x.shape();
            let plane = shape[2] * shape[3];
            let mut dx = vec![0.0; x.numel()];
            for (grp, &inv) in inv_std.iter().enumerate() {
                let ys = &out.data()[grp * plane..(grp + 1) * plane];
                let gs = &g[grp * plane..(grp + 1) * plane];
                let g_mean = gs.iter().sum::<f64>() / plane as f64;
                let gy_mean = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<f64>() / plane as f64;
                for ((d, &gv), &y) in dx[grp * plane..(grp + 1) * plane].iter_mut().zip(gs).zip(ys)
                {
                    *d = inv * (gv - g_mean - y * gy_mean);
                }
            }
            acc(x, &dx);
        }
        Op::MeanAll { x, .. } => {
            let gv = g[0] / x.numel() as f64;
            let dx = vec![gv; x.numel()];
            acc(x, &dx);
        }
        Op::Abs { x, .. } => {
            // L1 subgradient at 0 is defined as 0.
            let dx: Vec<f64> = x
                .data()
                .iter()
                .zip(g)
                .map(|(&v, &gv)| if v > 0.0 { gv } else if v < 0.0 { -gv } else { 0.0 })
                .collect();
            acc(x, &dx);
        }
        Op::Log { x, .. } => {
            let dx: Vec<f64> = x.data().iter().zip(g).map(|(&v, &gv)| gv / v).collect();
            acc(x, &dx);
        }
        Op::Reshape { x, .. } => acc(x, g),
    }
}

/// Route an output gradient to one operand of add/sub, collapsing when the
/// operand was scalar-broadcast.
fn spread(t: &Tensor, g: &[f64], acc: &mut dyn FnMut(&Tensor, &[f64]), f: impl Fn(usize, f64) -> f64) {
    if !t.tracked() {
        return;
    }
    if t.numel() == g.len() {
        let dt: Vec<f64> = g.iter().enumerate().map(|(i, &gv)| f(i, gv)).collect();
        acc(t, &dt);
    } else {
        // operand was a broadcast scalar
        let total: f64 = g.iter().enumerate().map(|(i, &gv)| f(i, gv)).sum();
        acc(t, &[total]);
    }
}

fn mul_adjoint(target: &Tensor, other: &Tensor, g: &[f64], acc: &mut dyn FnMut(&Tensor, &[f64])) {
    match (target.numel() == g.len(), other.numel() == g.len()) {
        (true, true) => {
            let dt: Vec<f64> = g.iter().zip(other.data()).map(|(&gv, &ov)| gv * ov).collect();
            acc(target, &dt);
        }
        (true, false) => {
            // other is the broadcast scalar
            let ov = other.value();
            let dt: Vec<f64> = g.iter().map(|&gv| gv * ov).collect();
            acc(target, &dt);
        }
        (false, true) => {
            // target is the broadcast scalar
            let total: f64 = g.iter().zip(other.data()).map(|(&gv, &ov)| gv * ov).sum();
            acc(target, &[total]);
        }
        (false, false) => {
            // both scalar: g has length 1 as well
            acc(target, &[g[0] * other.value()]);
        }
    }
}
