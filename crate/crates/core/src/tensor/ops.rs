//! Differentiable operations. Each forward lives on [`Graph`]; the matching
//! vector-Jacobian product lives in [`Op::backward`].

use super::kernels::{gemm, View};
use super::{Graph, Real, Tensor};
use crate::error::{Error, Result};

pub(super) enum Op<F: Real> {
    MatMul {
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        rows: usize,
        k: usize,
        n: usize,
    },
    Add,
    AddBroadcast {
        inner: usize,
    },
    Mul,
    Scale(F),
    Sum,
    Mean,
    Reshape,
    Gelu,
    Softmax {
        n: usize,
        out: Vec<F>,
    },
    LayerNorm {
        d: usize,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    PrependToken {
        m: usize,
        n: usize,
        d: usize,
    },
    SelectToken {
        m: usize,
        n: usize,
        d: usize,
        index: usize,
    },
    MeanTokens {
        m: usize,
        n: usize,
        d: usize,
    },
    Attention {
        m: usize,
        n: usize,
        heads: usize,
        probs: Vec<F>,
    },
    CrossEntropy {
        classes: usize,
        probs: Vec<F>,
        targets: Vec<F>,
    },
}

fn f<F: Real>(v: f64) -> F {
    F::from_f64_lossy(v)
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn rank3(op: &'static str, t: &[usize]) -> Result<(usize, usize, usize)> {
    match *t {
        [m, n, d] => Ok((m, n, d)),
        _ => Err(Error::InvalidShape {
            op,
            reason: format!("expected a rank-3 tensor, got {t:?}"),
        }),
    }
}

fn gelu_value<F: Real>(x: F) -> F {
    f::<F>(0.5) * x * (F::one() + (x * f(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_slope<F: Real>(x: F) -> F {
    let cdf = f::<F>(0.5) * (F::one() + (x * f(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * f(0.5)).exp() * f(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

/// Numerically stable softmax of each length-`n` row, written into `out`.
fn softmax_rows<F: Real>(x: &[F], n: usize, out: &mut [F]) {
    for (row, dst) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut total = F::zero();
        for (o, &v) in dst.iter_mut().zip(row) {
            *o = (v - max).exp();
            total = total + *o;
        }
        let inv = F::one() / total;
        dst.iter_mut().for_each(|o| *o = *o * inv);
    }
}

impl<F: Real> Graph<F> {
    /// Matrix product of `a: [m, k]` and `b: [k, n]`.
    pub fn matmul(&self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
            return Err(shape_err("matmul", a.shape(), b.shape()));
        };
        if k != k2 {
            return Err(shape_err("matmul", a.shape(), b.shape()));
        }
        let mut out = vec![F::zero(); m * n];
        gemm(
            F::one(),
            a.data(),
            View::rm(0, m, k),
            b.data(),
            View::rm(0, k, n),
            F::zero(),
            &mut out,
            View::rm(0, m, n),
        );
        self.record(Op::MatMul { m, k, n }, &[a, b], vec![m, n], out)
    }

    /// `x · w + bias` over the last axis of `x`; `w: [k, n]`, `bias: [n]`.
    pub fn linear(&self, x: &Tensor<F>, w: &Tensor<F>, bias: &Tensor<F>) -> Result<Tensor<F>> {
        let &[k, n] = w.shape() else {
            return Err(shape_err("linear", x.shape(), w.shape()));
        };
        if x.shape().last() != Some(&k) {
            return Err(shape_err("linear", x.shape(), w.shape()));
        }
        if bias.shape() != [n] {
            return Err(shape_err("linear", w.shape(), bias.shape()));
        }
        let rows = x.numel() / k;
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(bias.data());
        }
        gemm(
            F::one(),
            x.data(),
            View::rm(0, rows, k),
            w.data(),
            View::rm(0, k, n),
            F::one(),
            &mut out,
            View::rm(0, rows, n),
        );
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.record(Op::Linear { rows, k, n }, &[x, w, bias], shape, out)
    }

    pub fn add(&self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        if a.shape() != b.shape() {
            return Err(shape_err("add", a.shape(), b.shape()));
        }
        let out = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        self.record(Op::Add, &[a, b], a.shape().to_vec(), out)
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s shape.
    pub fn add_broadcast(&self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        if !a.shape().ends_with(b.shape()) {
            return Err(shape_err("add_broadcast", a.shape(), b.shape()));
        }
        let inner = b.numel();
        let mut out = a.to_vec();
        for chunk in out.chunks_exact_mut(inner) {
            for (o, &v) in chunk.iter_mut().zip(b.data()) {
                *o = *o + v;
            }
        }
        self.record(Op::AddBroadcast { inner }, &[a, b], a.shape().to_vec(), out)
    }

    pub fn mul(&self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        if a.shape() != b.shape() {
            return Err(shape_err("mul", a.shape(), b.shape()));
        }
        let out = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        self.record(Op::Mul, &[a, b], a.shape().to_vec(), out)
    }

    pub fn scale(&self, a: &Tensor<F>, c: F) -> Result<Tensor<F>> {
        let out = a.data().iter().map(|&x| x * c).collect();
        self.record(Op::Scale(c), &[a], a.shape().to_vec(), out)
    }

    pub fn sum(&self, a: &Tensor<F>) -> Result<Tensor<F>> {
        let total = a.data().iter().copied().sum();
        self.record(Op::Sum, &[a], vec![1], vec![total])
    }

    pub fn mean(&self, a: &Tensor<F>) -> Result<Tensor<F>> {
        let total: F = a.data().iter().copied().sum();
        let mean = total / f(a.numel() as f64);
        self.record(Op::Mean, &[a], vec![1], vec![mean])
    }

    pub fn reshape(&self, a: &Tensor<F>, shape: &[usize]) -> Result<Tensor<F>> {
        if shape.iter().product::<usize>() != a.numel() || shape.contains(&0) {
            return Err(shape_err("reshape", a.shape(), shape));
        }
        self.record(Op::Reshape, &[a], shape.to_vec(), a.to_vec())
    }

    /// Exact-erf GELU, `x · Φ(x)`.
    pub fn gelu(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let out = x.data().iter().map(|&v| gelu_value(v)).collect();
        self.record(Op::Gelu, &[x], x.shape().to_vec(), out)
    }

    /// Softmax over the last axis, stabilized by row-max subtraction.
    pub fn softmax(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let n = *x.shape().last().expect("non-empty shape");
        let mut out = vec![F::zero(); x.numel()];
        softmax_rows(x.data(), n, &mut out);
        let saved = if self.is_recording() && x.requires_grad() {
            out.clone()
        } else {
            Vec::new()
        };
        self.record(Op::Softmax { n, out: saved }, &[x], x.shape().to_vec(), out)
    }

    /// Layer normalization over the last axis followed by `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(
        &self,
        x: &Tensor<F>,
        gamma: &Tensor<F>,
        beta: &Tensor<F>,
        eps: f64,
    ) -> Result<Tensor<F>> {
        let d = *x.shape().last().expect("non-empty shape");
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(shape_err("layer_norm", x.shape(), gamma.shape()));
        }
        let rows = x.numel() / d;
        let inv_d = f::<F>(1.0 / d as f64);
        let eps = f::<F>(eps);
        let mut xhat = vec![F::zero(); x.numel()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = gamma.data()[j] * h + beta.data()[j];
            }
        }
        let recording = self.is_recording()
            && (x.requires_grad() || gamma.requires_grad() || beta.requires_grad());
        let op = if recording {
            Op::LayerNorm { d, xhat, rstd }
        } else {
            Op::LayerNorm {
                d,
                xhat: Vec::new(),
                rstd: Vec::new(),
            }
        };
        self.record(op, &[x, gamma, beta], x.shape().to_vec(), out)
    }

    /// `[m, n, d]` → `[m, n + 1, d]` with `token: [d]` inserted at position 0.
    pub fn prepend_token(&self, x: &Tensor<F>, token: &Tensor<F>) -> Result<Tensor<F>> {
        let (m, n, d) = rank3("prepend_token", x.shape())?;
        if token.shape() != [d] {
            return Err(shape_err("prepend_token", x.shape(), token.shape()));
        }
        let mut out = Vec::with_capacity(m * (n + 1) * d);
        for row in x.data().chunks_exact(n * d) {
            out.extend_from_slice(token.data());
            out.extend_from_slice(row);
        }
        self.record(
            Op::PrependToken { m, n, d },
            &[x, token],
            vec![m, n + 1, d],
            out,
        )
    }

    /// `[m, n, d]` → `[m, d]`, keeping token `index` of every sequence.
    pub fn select_token(&self, x: &Tensor<F>, index: usize) -> Result<Tensor<F>> {
        let (m, n, d) = rank3("select_token", x.shape())?;
        if index >= n {
            return Err(Error::InvalidShape {
                op: "select_token",
                reason: format!("token {index} out of range for length {n}"),
            });
        }
        let mut out = Vec::with_capacity(m * d);
        for row in x.data().chunks_exact(n * d) {
            out.extend_from_slice(&row[index * d..(index + 1) * d]);
        }
        self.record(
            Op::SelectToken { m, n, d, index },
            &[x],
            vec![m, d],
            out,
        )
    }

    /// `[m, n, d]` → `[m, d]`, averaging over the middle axis.
    pub fn mean_tokens(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let (m, n, d) = rank3("mean_tokens", x.shape())?;
        let inv = f::<F>(1.0 / n as f64);
        let mut out = vec![F::zero(); m * d];
        for (dst, row) in out.chunks_exact_mut(d).zip(x.data().chunks_exact(n * d)) {
            for tok in row.chunks_exact(d) {
                for (o, &v) in dst.iter_mut().zip(tok) {
                    *o = *o + v;
                }
            }
            dst.iter_mut().for_each(|o| *o = *o * inv);
        }
        self.record(Op::MeanTokens { m, n, d }, &[x], vec![m, d], out)
    }

    /// Multi-head scaled dot-product attention core. `q`, `k`, `v` are
    /// `[m, n, d]` with heads laid out contiguously along `d`; the output has
    /// the same layout.
    pub fn attention(
        &self,
        q: &Tensor<F>,
        k: &Tensor<F>,
        v: &Tensor<F>,
        heads: usize,
    ) -> Result<Tensor<F>> {
        let (m, n, d) = rank3("attention", q.shape())?;
        if k.shape() != q.shape() || v.shape() != q.shape() {
            return Err(shape_err("attention", q.shape(), k.shape()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidShape {
                op: "attention",
                reason: format!("width {d} is not divisible by {heads} heads"),
            });
        }
        let dh = d / heads;
        let scale = f::<F>(1.0 / (dh as f64).sqrt());
        let mut probs = vec![F::zero(); m * heads * n * n];
        let mut scores = vec![F::zero(); n * n];
        let mut out = vec![F::zero(); m * n * d];
        for b in 0..m {
            for h in 0..heads {
                let base = b * n * d + h * dh;
                let qv = View::strided(base, n, dh, d);
                gemm(
                    scale,
                    q.data(),
                    qv,
                    k.data(),
                    qv.t(),
                    F::zero(),
                    &mut scores,
                    View::rm(0, n, n),
                );
                let p_off = (b * heads + h) * n * n;
                softmax_rows(&scores, n, &mut probs[p_off..p_off + n * n]);
                gemm(
                    F::one(),
                    &probs,
                    View::rm(p_off, n, n),
                    v.data(),
                    qv,
                    F::zero(),
                    &mut out,
                    qv,
                );
            }
        }
        let saved = if self.is_recording()
            && (q.requires_grad() || k.requires_grad() || v.requires_grad())
        {
            probs
        } else {
            Vec::new()
        };
        self.record(
            Op::Attention {
                m,
                n,
                heads,
                probs: saved,
            },
            &[q, k, v],
            vec![m, n, d],
            out,
        )
    }

    /// Mean cross-entropy of `logits: [batch, classes]` against integer
    /// labels, with optional uniform label smoothing.
    pub fn cross_entropy(
        &self,
        logits: &Tensor<F>,
        labels: &[usize],
        smoothing: f64,
    ) -> Result<Tensor<F>> {
        let &[batch, classes] = logits.shape() else {
            return Err(Error::InvalidShape {
                op: "cross_entropy",
                reason: format!("expected [batch, classes], got {:?}", logits.shape()),
            });
        };
        if labels.len() != batch {
            return Err(shape_err("cross_entropy", logits.shape(), &[labels.len()]));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::LabelOutOfRange {
                index,
                label,
                classes,
            });
        }
        let off = f::<F>(smoothing / classes as f64);
        let on = f::<F>(1.0 - smoothing) + off;
        let mut targets = vec![off; batch * classes];
        for (b, &l) in labels.iter().enumerate() {
            targets[b * classes + l] = on;
        }
        let mut probs = vec![F::zero(); batch * classes];
        let mut total = F::zero();
        for b in 0..batch {
            let row = &logits.data()[b * classes..(b + 1) * classes];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
            for c in 0..classes {
                let log_p = row[c] - max - lse;
                probs[b * classes + c] = log_p.exp();
                let t = targets[b * classes + c];
                if t > F::zero() {
                    total = total - t * log_p;
                }
            }
        }
        let loss = total / f(batch as f64);
        self.record(
            Op::CrossEntropy {
                classes,
                probs,
                targets,
            },
            &[logits],
            vec![1],
            vec![loss],
        )
    }
}

fn need(t: &Tensor<impl Real>) -> bool {
    t.requires_grad()
}

impl<F: Real> Op<F> {
    /// Gradients for each input given the output gradient `g`. Entries are
    /// `None` for inputs that do not require a gradient.
    pub(super) fn backward(&self, inputs: &[Tensor<F>], g: &[F]) -> Vec<Option<Vec<F>>> {
        match self {
            Op::MatMul { m, k, n } => {
                let (a, b) = (&inputs[0], &inputs[1]);
                let da = need(a).then(|| {
                    let mut da = vec![F::zero(); m * k];
                    gemm(
                        F::one(),
                        g,
                        View::rm(0, *m, *n),
                        b.data(),
                        View::rm(0, *k, *n).t(),
                        F::zero(),
                        &mut da,
                        View::rm(0, *m, *k),
                    );
                    da
                });
                let db = need(b).then(|| {
                    let mut db = vec![F::zero(); k * n];
                    gemm(
                        F::one(),
                        a.data(),
                        View::rm(0, *m, *k).t(),
                        g,
                        View::rm(0, *m, *n),
                        F::zero(),
                        &mut db,
                        View::rm(0, *k, *n),
                    );
                    db
                });
                vec![da, db]
            }
            Op::Linear { rows, k, n } => {
                let (x, w, bias) = (&inputs[0], &inputs[1], &inputs[2]);
                let dx = need(x).then(|| {
                    let mut dx = vec![F::zero(); rows * k];
                    gemm(
                        F::one(),
                        g,
                        View::rm(0, *rows, *n),
                        w.data(),
                        View::rm(0, *k, *n).t(),
                        F::zero(),
                        &mut dx,
                        View::rm(0, *rows, *k),
                    );
                    dx
                });
                let dw = need(w).then(|| {
                    let mut dw = vec![F::zero(); k * n];
                    gemm(
                        F::one(),
                        x.data(),
                        View::rm(0, *rows, *k).t(),
                        g,
                        View::rm(0, *rows, *n),
                        F::zero(),
                        &mut dw,
                        View::rm(0, *k, *n),
                    );
                    dw
                });
                let db = need(bias).then(|| {
                    let mut db = vec![F::zero(); *n];
                    for row in g.chunks_exact(*n) {
                        for (o, &v) in db.iter_mut().zip(row) {
                            *o = *o + v;
                        }
                    }
                    db
                });
                vec![dx, dw, db]
            }
            Op::Add => vec![
                need(&inputs[0]).then(|| g.to_vec()),
                need(&inputs[1]).then(|| g.to_vec()),
            ],
            Op::AddBroadcast { inner } => {
                let db = need(&inputs[1]).then(|| {
                    let mut db = vec![F::zero(); *inner];
                    for chunk in g.chunks_exact(*inner) {
                        for (o, &v) in db.iter_mut().zip(chunk) {
                            *o = *o + v;
                        }
                    }
                    db
                });
                vec![need(&inputs[0]).then(|| g.to_vec()), db]
            }
            Op::Mul => {
                let (a, b) = (&inputs[0], &inputs[1]);
                vec![
                    need(a).then(|| g.iter().zip(b.data()).map(|(&g, &y)| g * y).collect()),
                    need(b).then(|| g.iter().zip(a.data()).map(|(&g, &x)| g * x).collect()),
                ]
            }
            Op::Scale(c) => vec![Some(g.iter().map(|&v| v * *c).collect())],
            Op::Sum => vec![Some(vec![g[0]; inputs[0].numel()])],
            Op::Mean => {
                let n = inputs[0].numel();
                vec![Some(vec![g[0] / f(n as f64); n])]
            }
            Op::Reshape => vec![Some(g.to_vec())],
            Op::Gelu => vec![Some(
                inputs[0]
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &g)| g * gelu_slope(x))
                    .collect(),
            )],
            Op::Softmax { n, out } => {
                let mut dx = vec![F::zero(); g.len()];
                for ((dst, y), gr) in dx
                    .chunks_exact_mut(*n)
                    .zip(out.chunks_exact(*n))
                    .zip(g.chunks_exact(*n))
                {
                    let dot: F = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..*n {
                        dst[j] = y[j] * (gr[j] - dot);
                    }
                }
                vec![Some(dx)]
            }
            Op::LayerNorm { d, xhat, rstd } => {
                let d = *d;
                let (x, gamma, beta) = (&inputs[0], &inputs[1], &inputs[2]);
                let inv_d = f::<F>(1.0 / d as f64);
                let dx = need(x).then(|| {
                    let mut dx = vec![F::zero(); g.len()];
                    let mut dxhat = vec![F::zero(); d];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_dxhat = F::zero();
                        let mut mean_dxhat_xhat = F::zero();
                        for j in 0..d {
                            dxhat[j] = gr[j] * gamma.data()[j];
                            mean_dxhat = mean_dxhat + dxhat[j];
                            mean_dxhat_xhat = mean_dxhat_xhat + dxhat[j] * xh[j];
                        }
                        mean_dxhat = mean_dxhat * inv_d;
                        mean_dxhat_xhat = mean_dxhat_xhat * inv_d;
                        for j in 0..d {
                            dx[r * d + j] = rs * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
                        }
                    }
                    dx
                });
                let dgamma = need(gamma).then(|| {
                    let mut dg = vec![F::zero(); d];
                    for (gr, xh) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] = dg[j] + gr[j] * xh[j];
                        }
                    }
                    dg
                });
                let dbeta = need(beta).then(|| {
                    let mut db = vec![F::zero(); d];
                    for gr in g.chunks_exact(d) {
                        for j in 0..d {
                            db[j] = db[j] + gr[j];
                        }
                    }
                    db
                });
                vec![dx, dgamma, dbeta]
            }
            Op::PrependToken { m, n, d } => {
                let (m, n, d) = (*m, *n, *d);
                let dx = need(&inputs[0]).then(|| {
                    let mut dx = Vec::with_capacity(m * n * d);
                    for row in g.chunks_exact((n + 1) * d) {
                        dx.extend_from_slice(&row[d..]);
                    }
                    dx
                });
                let dt = need(&inputs[1]).then(|| {
                    let mut dt = vec![F::zero(); d];
                    for row in g.chunks_exact((n + 1) * d) {
                        for j in 0..d {
                            dt[j] = dt[j] + row[j];
                        }
                    }
                    dt
                });
                vec![dx, dt]
            }
            Op::SelectToken { m, n, d, index } => {
                let (m, n, d) = (*m, *n, *d);
                let mut dx = vec![F::zero(); m * n * d];
                for (b, gr) in g.chunks_exact(d).enumerate() {
                    let off = b * n * d + index * d;
                    dx[off..off + d].copy_from_slice(gr);
                }
                vec![Some(dx)]
            }
            Op::MeanTokens { m, n, d } => {
                let (m, n, d) = (*m, *n, *d);
                let inv = f::<F>(1.0 / n as f64);
                let mut dx = Vec::with_capacity(m * n * d);
                for gr in g.chunks_exact(d) {
                    for _ in 0..n {
                        dx.extend(gr.iter().map(|&v| v * inv));
                    }
                }
                vec![Some(dx)]
            }
            Op::Attention { m, n, heads, probs } => {
                attention_backward(inputs, g, *m, *n, *heads, probs)
            }
            Op::CrossEntropy {
                classes,
                probs,
                targets,
            } => {
                let batch = probs.len() / classes;
                let s = g[0] / f(batch as f64);
                vec![Some(
                    probs
                        .iter()
                        .zip(targets)
                        .map(|(&p, &t)| (p - t) * s)
                        .collect(),
                )]
            }
        }
    }
}

fn attention_backward<F: Real>(
    inputs: &[Tensor<F>],
    g: &[F],
    m: usize,
    n: usize,
    heads: usize,
    probs: &[F],
) -> Vec<Option<Vec<F>>> {
    let (q, k, v) = (&inputs[0], &inputs[1], &inputs[2]);
    let d = q.shape()[2];
    let dh = d / heads;
    let scale = f::<F>(1.0 / (dh as f64).sqrt());
    let mut dq = vec![F::zero(); m * n * d];
    let mut dk = vec![F::zero(); m * n * d];
    let mut dv = vec![F::zero(); m * n * d];
    let mut dp = vec![F::zero(); n * n];
    for b in 0..m {
        for h in 0..heads {
            let qv = View::strided(b * n * d + h * dh, n, dh, d);
            let pv = View::rm((b * heads + h) * n * n, n, n);
            let p = &probs[pv.offset..pv.offset + n * n];
            // dV = Pᵀ dO
            gemm(F::one(), probs, pv.t(), g, qv, F::zero(), &mut dv, qv);
            // dP = dO Vᵀ
            gemm(
                F::one(),
                g,
                qv,
                v.data(),
                qv.t(),
                F::zero(),
                &mut dp,
                View::rm(0, n, n),
            );
            // dS = P ⊙ (dP − rowsum(dP ⊙ P))
            for (dpr, pr) in dp.chunks_exact_mut(n).zip(p.chunks_exact(n)) {
                let dot: F = dpr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                for (x, &pj) in dpr.iter_mut().zip(pr) {
                    *x = pj * (*x - dot);
                }
            }
            gemm(
                scale,
                &dp,
                View::rm(0, n, n),
                k.data(),
                qv,
                F::zero(),
                &mut dq,
                qv,
            );
            gemm(
                scale,
                &dp,
                View::rm(0, n, n).t(),
                q.data(),
                qv,
                F::zero(),
                &mut dk,
                qv,
            );
        }
    }
    vec![
        need(q).then_some(dq),
        need(k).then_some(dk),
        need(v).then_some(dv),
    ]
}
