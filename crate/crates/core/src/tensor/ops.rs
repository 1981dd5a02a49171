//! Differentiable operations.

use rand::Rng;

use super::kernels::{dot, gemm, gemm_nt, gemm_tn};
use super::{numel, Real, Tensor};
use crate::error::{PalError, Result};

/// Attention masking regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Query `t` sees keys `0..=t`.
    Causal,
    /// Every query sees every key.
    Full,
}

fn same_shape<F: Real>(a: &Tensor<F>, b: &Tensor<F>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(PalError::Dimension(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Splits a shape into (rows, last-axis width).
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = shape.last().copied().unwrap_or(1);
    let rows = if cols == 0 { 0 } else { numel(shape) / cols };
    (rows, cols)
}

fn need(t: &Tensor<impl Real>) -> bool {
    t.requires_grad()
}

impl<F: Real> Tensor<F> {
    /// Matrix product of a: M×K and b: K×N.
    pub fn matmul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        if self.rank() != 2 || other.rank() != 2 || self.shape()[1] != other.shape()[0] {
            return Err(PalError::Dimension(format!(
                "matmul: cannot multiply {:?} by {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let (m, k, n) = (self.shape()[0], self.shape()[1], other.shape()[1]);
        let mut out = vec![F::zero(); m * n];
        gemm(&self.data(), &other.data(), &mut out, m, k, n);
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            vec![self.clone(), other.clone()],
            move |g, _| {
                let ga = need(&a).then(|| {
                    let mut da = vec![F::zero(); m * k];
                    gemm_nt(g, &b.data(), &mut da, m, n, k);
                    da
                });
                let gb = need(&b).then(|| {
                    let mut db = vec![F::zero(); k * n];
                    gemm_tn(&a.data(), g, &mut db, m, k, n);
                    db
                });
                vec![ga, gb]
            },
        ))
    }

    pub fn add(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        same_shape(self, other, "add")?;
        let out: Vec<F> = self.data().iter().zip(other.data().iter()).map(|(&x, &y)| x + y).collect();
        let (na, nb) = (need(self), need(other));
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            move |g, _| vec![na.then(|| g.to_vec()), nb.then(|| g.to_vec())],
        ))
    }

    pub fn sub(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        same_shape(self, other, "sub")?;
        let out: Vec<F> = self.data().iter().zip(other.data().iter()).map(|(&x, &y)| x - y).collect();
        let (na, nb) = (need(self), need(other));
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            move |g, _| {
                vec![
                    na.then(|| g.to_vec()),
                    nb.then(|| g.iter().map(|&v| -v).collect()),
                ]
            },
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        same_shape(self, other, "mul")?;
        let out: Vec<F> = self.data().iter().zip(other.data().iter()).map(|(&x, &y)| x * y).collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            move |g, _| {
                let ga = need(&a).then(|| g.iter().zip(b.data().iter()).map(|(&gi, &bi)| gi * bi).collect());
                let gb = need(&b).then(|| g.iter().zip(a.data().iter()).map(|(&gi, &ai)| gi * ai).collect());
                vec![ga, gb]
            },
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor<F> {
        let c = F::of(c);
        let out = self.data().iter().map(|&x| x * c).collect();
        Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], move |g, _| {
            vec![Some(g.iter().map(|&v| v * c).collect())]
        })
    }

    /// Adds a bias vector of width N to every row of a …×N tensor.
    pub fn add_row(&self, bias: &Tensor<F>) -> Result<Tensor<F>> {
        let (rows, cols) = rows_cols(self.shape());
        if bias.numel() != cols {
            return Err(PalError::Dimension(format!(
                "add_row: bias {:?} does not match rows of {:?}",
                bias.shape(),
                self.shape()
            )));
        }
        let mut out = self.to_vec();
        {
            let b = bias.data();
            for row in out.chunks_mut(cols) {
                for (o, &bi) in row.iter_mut().zip(b.iter()) {
                    *o += bi;
                }
            }
        }
        let (na, nb) = (need(self), need(bias));
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), bias.clone()],
            move |g, _| {
                let gb = nb.then(|| {
                    let mut acc = vec![F::zero(); cols];
                    for row in g.chunks(cols).take(rows) {
                        for (a, &v) in acc.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    acc
                });
                vec![na.then(|| g.to_vec()), gb]
            },
        ))
    }

    /// `x · w + b` for x: M×K, w: K×N, b: N.
    pub fn linear(&self, weight: &Tensor<F>, bias: Option<&Tensor<F>>) -> Result<Tensor<F>> {
        let y = self.matmul(weight)?;
        match bias {
            Some(b) => y.add_row(b),
            None => Ok(y),
        }
    }

    pub fn sum(&self) -> Tensor<F> {
        let s: F = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(vec![s], Vec::new(), vec![self.clone()], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self) -> Tensor<F> {
        let n = self.numel().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Same values under a new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<F>> {
        if numel(shape) != self.numel() {
            return Err(PalError::Dimension(format!(
                "reshape: {:?} cannot become {:?}",
                self.shape(),
                shape
            )));
        }
        Ok(Tensor::from_op(self.to_vec(), shape.to_vec(), vec![self.clone()], |g, _| {
            vec![Some(g.to_vec())]
        }))
    }

    /// x · sigmoid(x).
    pub fn silu(&self) -> Tensor<F> {
        let x = self.to_vec();
        let out = x.iter().map(|&v| v / (F::one() + (-v).exp())).collect();
        Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], move |g, _| {
            let gx = x
                .iter()
                .zip(g)
                .map(|(&v, &gi)| {
                    let s = F::one() / (F::one() + (-v).exp());
                    gi * s * (F::one() + v * (F::one() - s))
                })
                .collect();
            vec![Some(gx)]
        })
    }

    fn check_finite(&self, what: &str) -> Result<()> {
        if self.data().iter().any(|v| !v.is_finite()) {
            return Err(PalError::Numeric(format!("{what}: non-finite input")));
        }
        Ok(())
    }

    /// Softmax along the last axis, max-subtracted.
    pub fn softmax(&self) -> Result<Tensor<F>> {
        self.check_finite("softmax")?;
        let (_, cols) = rows_cols(self.shape());
        let mut out = self.to_vec();
        for row in out.chunks_mut(cols) {
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        Ok(Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], move |g, y| {
            let mut gx = vec![F::zero(); y.len()];
            for ((gr, yr), xr) in g.chunks(cols).zip(y.chunks(cols)).zip(gx.chunks_mut(cols)) {
                let s = dot(gr, yr);
                for ((o, &gi), &yi) in xr.iter_mut().zip(gr).zip(yr) {
                    *o = yi * (gi - s);
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Log-softmax along the last axis, max-subtracted.
    pub fn log_softmax(&self) -> Result<Tensor<F>> {
        self.check_finite("log_softmax")?;
        let (_, cols) = rows_cols(self.shape());
        let mut out = self.to_vec();
        for row in out.chunks_mut(cols) {
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let z: F = row.iter().map(|&v| (v - m).exp()).sum();
            let lz = m + z.ln();
            for v in row.iter_mut() {
                *v = *v - lz;
            }
        }
        Ok(Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], move |g, y| {
            let mut gx = vec![F::zero(); y.len()];
            for ((gr, yr), xr) in g.chunks(cols).zip(y.chunks(cols)).zip(gx.chunks_mut(cols)) {
                let s: F = gr.iter().copied().sum();
                for ((o, &gi), &yi) in xr.iter_mut().zip(gr).zip(yr) {
                    *o = gi - yi.exp() * s;
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Root-mean-square normalization over the last axis with a learned gain.
    pub fn rmsnorm(&self, gain: &Tensor<F>, eps: f64) -> Result<Tensor<F>> {
        let (rows, d) = rows_cols(self.shape());
        if d == 0 || gain.numel() != d {
            return Err(PalError::Dimension(format!(
                "rmsnorm: gain {:?} does not match {:?}",
                gain.shape(),
                self.shape()
            )));
        }
        let eps = F::of(eps);
        let dn = F::of(d as f64);
        let x = self.to_vec();
        let gv = gain.to_vec();
        let mut inv = vec![F::zero(); rows];
        let mut out = vec![F::zero(); x.len()];
        for (r, (xr, or)) in x.chunks(d).zip(out.chunks_mut(d)).enumerate() {
            let ms = dot(xr, xr) / dn;
            let ir = F::one() / (ms + eps).sqrt();
            inv[r] = ir;
            for ((o, &xi), &gi) in or.iter_mut().zip(xr).zip(&gv) {
                *o = xi * ir * gi;
            }
        }
        let (nx, ng) = (need(self), need(gain));
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), gain.clone()],
            move |g, _| {
                let mut gx = nx.then(|| vec![F::zero(); x.len()]);
                let mut gg = ng.then(|| vec![F::zero(); d]);
                for r in 0..rows {
                    let xr = &x[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let ir = inv[r];
                    if let Some(gg) = gg.as_mut() {
                        for j in 0..d {
                            gg[j] += gr[j] * xr[j] * ir;
                        }
                    }
                    if let Some(gx) = gx.as_mut() {
                        let mut s = F::zero();
                        for j in 0..d {
                            s += gr[j] * gv[j] * xr[j];
                        }
                        let c = s * ir * ir * ir / dn;
                        for j in 0..d {
                            gx[r * d + j] = gr[j] * gv[j] * ir - xr[j] * c;
                        }
                    }
                }
                vec![gx, gg]
            },
        ))
    }

    /// Strided 1-D convolution over time. x: T×Din, weight: k×Din×Dout,
    /// bias: Dout. Output length `floor((T + 2·padding − k)/stride) + 1`.
    pub fn conv1d(
        &self,
        weight: &Tensor<F>,
        bias: Option<&Tensor<F>>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<F>> {
        if weight.rank() != 3 || self.rank() != 2 || weight.shape()[1] != self.shape()[1] {
            return Err(PalError::Dimension(format!(
                "conv1d: input {:?} incompatible with kernel {:?}",
                self.shape(),
                weight.shape()
            )));
        }
        let (k, din, dout) = (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
        if k == 0 || stride == 0 {
            return Err(PalError::Config(format!("conv1d: kernel {k} / stride {stride} must be ≥ 1")));
        }
        let t_in = self.shape()[0];
        let t_out = conv_out_len(t_in, k, stride, padding).ok_or_else(|| {
            PalError::Input(format!(
                "conv1d: input of {t_in} frames too short for kernel {k}, stride {stride}, padding {padding}"
            ))
        })?;
        let kd = k * din;
        // im2col: each output row gathers k input rows, zero outside [0, T).
        let mut cols = vec![F::zero(); t_out * kd];
        {
            let x = self.data();
            for t in 0..t_out {
                for j in 0..k {
                    let src = (t * stride + j) as isize - padding as isize;
                    if src >= 0 && (src as usize) < t_in {
                        let s = src as usize;
                        cols[t * kd + j * din..t * kd + (j + 1) * din]
                            .copy_from_slice(&x[s * din..(s + 1) * din]);
                    }
                }
            }
        }
        let mut out = vec![F::zero(); t_out * dout];
        gemm(&cols, &weight.data(), &mut out, t_out, kd, dout);
        if let Some(b) = bias {
            if b.numel() != dout {
                return Err(PalError::Dimension(format!(
                    "conv1d: bias {:?} for {dout} output channels",
                    b.shape()
                )));
            }
            let bv = b.data();
            for row in out.chunks_mut(dout) {
                for (o, &bi) in row.iter_mut().zip(bv.iter()) {
                    *o += bi;
                }
            }
        }
        let w = weight.clone();
        let nx = need(self);
        let nw = need(weight);
        let nb = bias.map(need).unwrap_or(false);
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let has_bias = bias.is_some();
        Ok(Tensor::from_op(out, vec![t_out, dout], parents, move |g, _| {
            let gx = nx.then(|| {
                let mut gcols = vec![F::zero(); t_out * kd];
                gemm_nt(g, &w.data(), &mut gcols, t_out, dout, kd);
                let mut gx = vec![F::zero(); t_in * din];
                for t in 0..t_out {
                    for j in 0..k {
                        let src = (t * stride + j) as isize - padding as isize;
                        if src >= 0 && (src as usize) < t_in {
                            let s = src as usize;
                            let from = &gcols[t * kd + j * din..t * kd + (j + 1) * din];
                            for (a, &b) in gx[s * din..(s + 1) * din].iter_mut().zip(from) {
                                *a += b;
                            }
                        }
                    }
                }
                gx
            });
            let gw = nw.then(|| {
                let mut gw = vec![F::zero(); kd * dout];
                gemm_tn(&cols, g, &mut gw, t_out, kd, dout);
                gw
            });
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(nb.then(|| {
                    let mut gb = vec![F::zero(); dout];
                    for row in g.chunks(dout) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    gb
                }));
            }
            grads
        }))
    }

    /// Inverted dropout. Identity in eval mode or at rate 0.
    pub fn dropout<R: Rng + ?Sized>(&self, rate: f64, train: bool, rng: &mut R) -> Result<Tensor<F>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(PalError::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(self.clone());
        }
        let keep = F::of(1.0 / (1.0 - rate));
        let mask: Vec<F> = (0..self.numel())
            .map(|_| if rng.gen::<f64>() < rate { F::zero() } else { keep })
            .collect();
        let out = self.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        Ok(Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], move |g, _| {
            vec![Some(g.iter().zip(&mask).map(|(&gi, &m)| gi * m).collect())]
        }))
    }

    /// Rotary position embedding. Accepts T×H×Dh, or T×(H·Dh) with `n_head`
    /// heads. Dimension `i` of each head is rotated together with
    /// `i + Dh/2` by angle `position · base^(−2i/Dh)`.
    pub fn rope(&self, n_head: usize, positions: &[usize], base: f64) -> Result<Tensor<F>> {
        let t = self.shape()[0];
        let width = self.numel() / t.max(1);
        if n_head == 0 || width % n_head != 0 {
            return Err(PalError::Config(format!("rope: width {width} not divisible into {n_head} heads")));
        }
        let dh = width / n_head;
        if dh % 2 != 0 {
            return Err(PalError::Config(format!("rope: head dimension {dh} must be even")));
        }
        if positions.len() != t {
            return Err(PalError::Dimension(format!(
                "rope: {} positions for {t} rows",
                positions.len()
            )));
        }
        let half = dh / 2;
        let mut cos = vec![F::zero(); t * half];
        let mut sin = vec![F::zero(); t * half];
        for (r, &p) in positions.iter().enumerate() {
            for i in 0..half {
                let theta = p as f64 * base.powf(-2.0 * i as f64 / dh as f64);
                cos[r * half + i] = F::of(theta.cos());
                sin[r * half + i] = F::of(theta.sin());
            }
        }
        let rotate = move |src: &[F], sign: F| -> Vec<F> {
            let mut dst = vec![F::zero(); src.len()];
            for r in 0..t {
                for h in 0..n_head {
                    let base_idx = r * width + h * dh;
                    for i in 0..half {
                        let (c, s) = (cos[r * half + i], sin[r * half + i] * sign);
                        let a = src[base_idx + i];
                        let b = src[base_idx + half + i];
                        dst[base_idx + i] = a * c - b * s;
                        dst[base_idx + half + i] = a * s + b * c;
                    }
                }
            }
            dst
        };
        let out = rotate(&self.data(), F::one());
        Ok(Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], move |g, _| {
            vec![Some(rotate(g, -F::one()))]
        }))
    }

    /// Multi-head scaled dot-product attention over q, k, v of shape
    /// T×(H·Dh), scores scaled by 1/√Dh.
    pub fn attention(
        q: &Tensor<F>,
        k: &Tensor<F>,
        v: &Tensor<F>,
        n_head: usize,
        mask: MaskMode,
    ) -> Result<Tensor<F>> {
        same_shape(q, k, "attention q/k")?;
        same_shape(q, v, "attention q/v")?;
        if q.rank() != 2 || n_head == 0 || q.shape()[1] % n_head != 0 {
            return Err(PalError::Dimension(format!(
                "attention: {:?} not splittable into {n_head} heads",
                q.shape()
            )));
        }
        let (t, width) = (q.shape()[0], q.shape()[1]);
        let dh = width / n_head;
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let split = move |src: &[F]| -> Vec<Vec<F>> {
            (0..n_head)
                .map(|h| {
                    let mut out = Vec::with_capacity(t * dh);
                    for r in 0..t {
                        out.extend_from_slice(&src[r * width + h * dh..r * width + (h + 1) * dh]);
                    }
                    out
                })
                .collect()
        };
        let (qh, kh, vh) = (split(&q.data()), split(&k.data()), split(&v.data()));
        let mut probs: Vec<Vec<F>> = Vec::with_capacity(n_head);
        let mut out = vec![F::zero(); t * width];
        for h in 0..n_head {
            let mut s = vec![F::zero(); t * t];
            gemm_nt(&qh[h], &kh[h], &mut s, t, dh, t);
            for (i, row) in s.chunks_mut(t).enumerate() {
                let visible = match mask {
                    MaskMode::Causal => i + 1,
                    MaskMode::Full => t,
                };
                let mut m = F::neg_infinity();
                for v in row[..visible].iter_mut() {
                    *v *= scale;
                    m = m.max(*v);
                }
                let mut z = F::zero();
                for v in row[..visible].iter_mut() {
                    *v = (*v - m).exp();
                    z += *v;
                }
                for v in row[..visible].iter_mut() {
                    *v /= z;
                }
                for v in row[visible..].iter_mut() {
                    *v = F::zero();
                }
            }
            let mut o = vec![F::zero(); t * dh];
            gemm(&s, &vh[h], &mut o, t, t, dh);
            for r in 0..t {
                out[r * width + h * dh..r * width + (h + 1) * dh].copy_from_slice(&o[r * dh..(r + 1) * dh]);
            }
            probs.push(s);
        }
        let (nq, nk, nv) = (need(q), need(k), need(v));
        Ok(Tensor::from_op(
            out,
            vec![t, width],
            vec![q.clone(), k.clone(), v.clone()],
            move |g, _| {
                let gh = split(g);
                let mut gq = nq.then(|| vec![F::zero(); t * width]);
                let mut gk = nk.then(|| vec![F::zero(); t * width]);
                let mut gv = nv.then(|| vec![F::zero(); t * width]);
                let scatter = |dst: &mut Vec<F>, src: &[F], h: usize| {
                    for r in 0..t {
                        dst[r * width + h * dh..r * width + (h + 1) * dh]
                            .copy_from_slice(&src[r * dh..(r + 1) * dh]);
                    }
                };
                for h in 0..n_head {
                    let p = &probs[h];
                    if let Some(gv) = gv.as_mut() {
                        let mut d = vec![F::zero(); t * dh];
                        gemm_tn(p, &gh[h], &mut d, t, t, dh);
                        scatter(gv, &d, h);
                    }
                    if gq.is_none() && gk.is_none() {
                        continue;
                    }
                    let mut dp = vec![F::zero(); t * t];
                    gemm_nt(&gh[h], &vh[h], &mut dp, t, dh, t);
                    // Softmax backward, then fold in the 1/√Dh scale.
                    for (dr, pr) in dp.chunks_mut(t).zip(p.chunks(t)) {
                        let s = dot(dr, pr);
                        for (d, &pi) in dr.iter_mut().zip(pr) {
                            *d = pi * (*d - s) * scale;
                        }
                    }
                    if let Some(gq) = gq.as_mut() {
                        let mut d = vec![F::zero(); t * dh];
                        gemm(&dp, &kh[h], &mut d, t, t, dh);
                        scatter(gq, &d, h);
                    }
                    if let Some(gk) = gk.as_mut() {
                        let mut d = vec![F::zero(); t * dh];
                        gemm_tn(&dp, &qh[h], &mut d, t, t, dh);
                        scatter(gk, &d, h);
                    }
                }
                vec![gq, gk, gv]
            },
        ))
    }

    /// Row lookup: table V×D indexed by `ids` gives len(ids)×D.
    pub fn embedding(table: &Tensor<F>, ids: &[usize]) -> Result<Tensor<F>> {
        if table.rank() != 2 {
            return Err(PalError::Dimension(format!("embedding table must be 2-D, got {:?}", table.shape())));
        }
        let (v, d) = (table.shape()[0], table.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(PalError::Input(format!("token {bad} outside vocabulary of {v}")));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        {
            let tab = table.data();
            for &i in ids {
                out.extend_from_slice(&tab[i * d..(i + 1) * d]);
            }
        }
        let ids = ids.to_vec();
        Ok(Tensor::from_op(out, vec![ids.len(), d], vec![table.clone()], move |g, _| {
            let mut gt = vec![F::zero(); v * d];
            for (r, &i) in ids.iter().enumerate() {
                for (a, &b) in gt[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                    *a += b;
                }
            }
            vec![Some(gt)]
        }))
    }

    /// Mean negative log-likelihood of `targets` under row-wise
    /// log-probabilities T×V.
    pub fn nll_loss(&self, targets: &[usize]) -> Result<Tensor<F>> {
        let (rows, v) = rows_cols(self.shape());
        if targets.len() != rows {
            return Err(PalError::Dimension(format!(
                "nll_loss: {} targets for {rows} rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(PalError::Input(format!("target {bad} outside {v} classes")));
        }
        let n = F::of(rows.max(1) as f64);
        let total: F = {
            let lp = self.data();
            targets.iter().enumerate().map(|(r, &y)| -lp[r * v + y]).sum()
        };
        let targets = targets.to_vec();
        Ok(Tensor::from_op(vec![total / n], Vec::new(), vec![self.clone()], move |g, _| {
            let mut gx = vec![F::zero(); rows * v];
            for (r, &y) in targets.iter().enumerate() {
                gx[r * v + y] = -g[0] / n;
            }
            vec![Some(gx)]
        }))
    }
}

/// Output length of a strided convolution, `None` when it would be < 1.
pub fn conv_out_len(t: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let span = t + 2 * padding;
    if span < k || stride == 0 {
        return None;
    }
    Some((span - k) / stride + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Seed;
    use crate::tensor::grad_check;

    fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_f64(data, shape).unwrap()
    }

    fn p(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::param(data.to_vec(), shape).unwrap()
    }

    fn rand_vals(seed: u64, n: usize) -> Vec<f64> {
        use rand::Rng;
        let mut rng = Seed(seed).rng();
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Naive triple loop, independent of the gemm kernels.
    fn triple_loop(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for q in 0..k {
                    c[i * n + j] += a[i * k + q] * b[q * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_examples() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let eye = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        assert_eq!(a.matmul(&eye).unwrap().to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
        let b = t(&[5.0, 6.0, 7.0, 8.0], &[2, 2]);
        let expect = triple_loop(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2);
        assert_eq!(expect, vec![19.0, 22.0, 43.0, 50.0]);
        assert_eq!(a.matmul(&b).unwrap().to_vec(), expect);
        let z = Tensor::<f64>::zeros(&[2, 3]);
        assert!(a.matmul(&z).unwrap().to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.matches("[2, 3]").count() == 2, "{msg}");
    }

    #[test]
    fn matmul_grad_matches_finite_differences() {
        let b = t(&rand_vals(2, 12), &[4, 3]);
        let a = p(&rand_vals(1, 8), &[2, 4]);
        let err = grad_check(|x| Ok(x.matmul(&b)?.mul(&x.matmul(&b)?)?.sum()), &a, 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
        let a = t(&rand_vals(3, 8), &[2, 4]);
        let b = p(&rand_vals(4, 12), &[4, 3]);
        let err = grad_check(|x| Ok(a.matmul(x)?.sum()), &b, 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn softmax_examples() {
        let s = t(&[0.0, 0.0], &[1, 2]).softmax().unwrap().to_vec();
        assert_eq!(s, vec![0.5, 0.5]);
        let s = t(&[0.0, 3f64.ln()], &[1, 2]).softmax().unwrap().to_vec();
        assert!((s[0] - 0.25).abs() < 1e-15 && (s[1] - 0.75).abs() < 1e-15);
        let x = rand_vals(7, 12);
        let shifted: Vec<f64> = x.iter().map(|v| v + 17.25).collect();
        let a = t(&x, &[3, 4]).softmax().unwrap().to_vec();
        let b = t(&shifted, &[3, 4]).softmax().unwrap().to_vec();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
        for row in a.chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_is_log_of_softmax() {
        let x = t(&rand_vals(9, 20), &[4, 5]);
        let ls = x.log_softmax().unwrap().to_vec();
        let s = x.softmax().unwrap().to_vec();
        for (a, b) in ls.iter().zip(&s) {
            assert!((a - b.ln()).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let x = t(&[0.0, f64::NAN], &[1, 2]);
        assert!(matches!(x.softmax(), Err(PalError::Numeric(_))));
        assert!(matches!(x.log_softmax(), Err(PalError::Numeric(_))));
    }

    #[test]
    fn conv1d_examples() {
        let x = Tensor::<f64>::zeros(&[100, 2]);
        let w = Tensor::<f64>::zeros(&[3, 2, 4]);
        assert_eq!(x.conv1d(&w, None, 2, 1).unwrap().shape(), &[50, 4]);

        let x = t(&rand_vals(11, 15), &[5, 3]);
        let eye = t(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[1, 3, 3]);
        let zero_b = Tensor::<f64>::zeros(&[3]);
        assert_eq!(x.conv1d(&eye, Some(&zero_b), 1, 0).unwrap().to_vec(), x.to_vec());

        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0], &[5, 1]);
        let w = t(&[1.0, 1.0, 1.0], &[3, 1, 1]);
        // Direct sliding-window sums of the input.
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let expect: Vec<f64> = xs.windows(3).map(|w| w.iter().sum()).collect();
        assert_eq!(expect, vec![6.0, 9.0, 12.0]);
        assert_eq!(x.conv1d(&w, None, 1, 0).unwrap().to_vec(), expect);
    }

    #[test]
    fn conv1d_too_short_is_input_error() {
        let x = Tensor::<f64>::zeros(&[2, 1]);
        let w = Tensor::<f64>::zeros(&[5, 1, 1]);
        assert!(matches!(x.conv1d(&w, None, 1, 0), Err(PalError::Input(_))));
    }

    #[test]
    fn conv_length_formula_exhaustive() {
        for t_len in 1..=32usize {
            for k in 1..=5usize {
                for stride in 1..=4usize {
                    for pad in 0..=2usize {
                        let span = t_len as isize + 2 * pad as isize - k as isize;
                        let expect = if span < 0 { None } else { Some(span as usize / stride + 1) };
                        assert_eq!(conv_out_len(t_len, k, stride, pad), expect);
                        if let Some(e) = expect {
                            let x = Tensor::<f64>::zeros(&[t_len, 1]);
                            let w = Tensor::<f64>::zeros(&[k, 1, 1]);
                            assert_eq!(x.conv1d(&w, None, stride, pad).unwrap().shape()[0], e);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn rmsnorm_examples() {
        let ones = Tensor::<f64>::full(&[4], 1.0);
        let x = Tensor::<f64>::full(&[1, 4], 1.0);
        assert_eq!(x.rmsnorm(&ones, 0.0).unwrap().to_vec(), vec![1.0; 4]);
        let g2 = Tensor::<f64>::full(&[2], 1.0);
        let y = t(&[3.0, 4.0], &[1, 2]).rmsnorm(&g2, 0.0).unwrap().to_vec();
        let r = 12.5f64.sqrt();
        assert!((y[0] - 3.0 / r).abs() < 1e-12 && (y[1] - 4.0 / r).abs() < 1e-12);
        assert!((y[0] - 0.8485).abs() < 1e-4 && (y[1] - 1.1314).abs() < 1e-4);
        let x = rand_vals(5, 6);
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let g3 = Tensor::<f64>::full(&[6], 1.0);
        let a = t(&x, &[1, 6]).rmsnorm(&g3, 0.0).unwrap().to_vec();
        let b = t(&x2, &[1, 6]).rmsnorm(&g3, 0.0).unwrap().to_vec();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_examples() {
        let mut rng = Seed(3).rng();
        let x = t(&rand_vals(1, 10), &[10]);
        assert_eq!(x.dropout(0.5, false, &mut rng).unwrap().to_vec(), x.to_vec());
        assert_eq!(x.dropout(0.0, true, &mut rng).unwrap().to_vec(), x.to_vec());
        let ones = Tensor::<f64>::full(&[100_000], 1.0);
        let y = ones.dropout(0.5, true, &mut rng).unwrap().to_vec();
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        assert!((0.98..=1.02).contains(&mean), "{mean}");
        assert!(y.iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(matches!(x.dropout(1.0, true, &mut rng), Err(PalError::Config(_))));
        assert!(matches!(x.dropout(-0.1, true, &mut rng), Err(PalError::Config(_))));
    }

    #[test]
    fn rope_examples() {
        let x = t(&rand_vals(21, 2 * 2 * 4), &[2, 2, 4]);
        let y = x.rope(2, &[0, 0], 10000.0).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());

        let y = x.rope(2, &[3, 11], 10000.0).unwrap().to_vec();
        let xv = x.to_vec();
        for row in 0..2 {
            for h in 0..2 {
                let b = row * 8 + h * 4;
                for i in 0..2 {
                    let n0 = xv[b + i].hypot(xv[b + 2 + i]);
                    let n1 = y[b + i].hypot(y[b + 2 + i]);
                    assert!((n0 - n1).abs() < 1e-6);
                }
            }
        }

        // Relative-position property by direct evaluation.
        let q = rand_vals(31, 8);
        let k = rand_vals(32, 8);
        let score = |pq: usize, pk: usize| {
            let rq = t(&q, &[1, 1, 8]).rope(1, &[pq], 10000.0).unwrap().to_vec();
            let rk = t(&k, &[1, 1, 8]).rope(1, &[pk], 10000.0).unwrap().to_vec();
            rq.iter().zip(&rk).map(|(a, b)| a * b).sum::<f64>()
        };
        assert!((score(5, 3) - score(7, 5)).abs() < 1e-6);

        let odd = Tensor::<f64>::zeros(&[1, 1, 3]);
        assert!(matches!(odd.rope(1, &[0], 10000.0), Err(PalError::Config(_))));
    }

    #[test]
    fn attention_uniform_scores_average_values() {
        let q = t(&rand_vals(41, 8), &[4, 2]);
        let k = Tensor::<f64>::zeros(&[4, 2]);
        let vv = rand_vals(42, 8);
        let v = t(&vv, &[4, 2]);
        let full = Tensor::attention(&q, &k, &v, 1, MaskMode::Full).unwrap().to_vec();
        let causal = Tensor::attention(&q, &k, &v, 1, MaskMode::Causal).unwrap().to_vec();
        for c in 0..2 {
            let mean: f64 = (0..4).map(|r| vv[r * 2 + c]).sum::<f64>() / 4.0;
            for r in 0..4 {
                assert!((full[r * 2 + c] - mean).abs() < 1e-12);
                let prefix: f64 = (0..=r).map(|s| vv[s * 2 + c]).sum::<f64>() / (r + 1) as f64;
                assert!((causal[r * 2 + c] - prefix).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn embedding_and_nll() {
        let table = p(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0], &[3, 2]);
        let e = Tensor::embedding(&table, &[2, 0, 2]).unwrap();
        assert_eq!(e.to_vec(), vec![4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
        e.sum().backward().unwrap();
        assert_eq!(table.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(matches!(Tensor::embedding(&table, &[3]), Err(PalError::Input(_))));

        let lp = t(&[0.5f64.ln(), 0.5f64.ln(), 0.25f64.ln(), 0.75f64.ln()], &[2, 2]);
        let loss = lp.nll_loss(&[0, 1]).unwrap().item();
        assert!((loss - (-(0.5f64.ln()) - 0.75f64.ln()) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn primitive_gradients() {
        let x = p(&rand_vals(50, 12), &[3, 4]);
        let w = t(&rand_vals(51, 12), &[3, 4]);
        let gain = t(&rand_vals(52, 4), &[4]);
        let bias = t(&rand_vals(53, 4), &[4]);
        type F = fn(&Tensor<f64>, &Tensor<f64>, &Tensor<f64>, &Tensor<f64>) -> Result<Tensor<f64>>;
        let cases: Vec<(&str, F)> = vec![
            ("add", |x, w, _, _| Ok(x.add(w)?.mul(x)?.sum())),
            ("sub", |x, w, _, _| Ok(w.sub(x)?.mul(x)?.sum())),
            ("mul", |x, w, _, _| Ok(x.mul(w)?.mul(x)?.sum())),
            ("scale", |x, w, _, _| Ok(x.scale(-1.7).mul(w)?.sum())),
            ("add_row", |x, w, _, b| Ok(x.add_row(b)?.mul(w)?.sum())),
            ("silu", |x, w, _, _| Ok(x.silu().mul(w)?.sum())),
            ("softmax", |x, w, _, _| Ok(x.softmax()?.mul(w)?.sum())),
            ("log_softmax", |x, w, _, _| Ok(x.log_softmax()?.mul(w)?.sum())),
            ("rmsnorm", |x, w, g, _| Ok(x.rmsnorm(g, 1e-6)?.mul(w)?.sum())),
            ("reshape", |x, w, _, _| Ok(x.reshape(&[4, 3])?.reshape(&[3, 4])?.mul(w)?.sum())),
            ("mean", |x, w, _, _| Ok(x.mul(w)?.mean())),
            ("rope", |x, w, _, _| Ok(x.rope(2, &[0, 4, 9], 10000.0)?.mul(w)?.sum())),
            ("nll", |x, _, _, _| x.log_softmax()?.nll_loss(&[1, 3, 0])),
        ];
        for (name, f) in cases {
            let err = grad_check(|x| f(x, &w, &gain, &bias), &x, 1e-5).unwrap();
            assert!(err < 1e-4, "{name}: {err}");
        }
        // Gain and bias gradients.
        let g = p(&rand_vals(54, 4), &[4]);
        let xc = t(&rand_vals(55, 12), &[3, 4]);
        let err = grad_check(|g| Ok(xc.rmsnorm(g, 1e-6)?.mul(&w)?.sum()), &g, 1e-5).unwrap();
        assert!(err < 1e-4, "rmsnorm gain: {err}");
        let err = grad_check(|b| Ok(xc.add_row(b)?.mul(&w)?.sum()), &g, 1e-5).unwrap();
        assert!(err < 1e-4, "bias: {err}");
    }

    #[test]
    fn conv_attention_embedding_gradients() {
        let x = p(&rand_vals(60, 14), &[7, 2]);
        let wk = p(&rand_vals(61, 18), &[3, 2, 3]);
        let b = p(&rand_vals(62, 3), &[3]);
        let probe = t(&rand_vals(63, 12), &[4, 3]);
        let conv = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| -> Result<Tensor<f64>> {
            Ok(x.conv1d(w, Some(b), 2, 1)?.mul(&probe)?.sum())
        };
        for (name, err) in [
            ("conv x", grad_check(|x| conv(x, &wk, &b), &x, 1e-5).unwrap()),
            ("conv w", grad_check(|w| conv(&x, w, &b), &wk, 1e-5).unwrap()),
            ("conv b", grad_check(|bb| conv(&x, &wk, bb), &b, 1e-5).unwrap()),
        ] {
            assert!(err < 1e-4, "{name}: {err}");
        }

        let q = p(&rand_vals(70, 20), &[5, 4]);
        let k = p(&rand_vals(71, 20), &[5, 4]);
        let v = p(&rand_vals(72, 20), &[5, 4]);
        let probe = t(&rand_vals(73, 20), &[5, 4]);
        for mask in [MaskMode::Causal, MaskMode::Full] {
            let f = |q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>| -> Result<Tensor<f64>> {
                Ok(Tensor::attention(q, k, v, 2, mask)?.mul(&probe)?.sum())
            };
            let eq = grad_check(|q| f(q, &k, &v), &q, 1e-5).unwrap();
            let ek = grad_check(|k| f(&q, k, &v), &k, 1e-5).unwrap();
            let ev = grad_check(|v| f(&q, &k, v), &v, 1e-5).unwrap();
            assert!(eq < 1e-4 && ek < 1e-4 && ev < 1e-4, "{mask:?}: {eq} {ek} {ev}");
        }

        let table = p(&rand_vals(80, 8), &[4, 2]);
        let probe = t(&rand_vals(81, 6), &[3, 2]);
        let err = grad_check(|tb| Ok(Tensor::embedding(tb, &[1, 3, 1])?.mul(&probe)?.sum()), &table, 1e-5).unwrap();
        assert!(err < 1e-4, "embedding: {err}");
    }
}
