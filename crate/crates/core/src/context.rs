//! Scaled dot-product attention over context tokens, the contextual
//! adaptation factor, and the reconstruction-trained context encoder.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::environment::ContextState;
use crate::error::{shape_err, Error, Result};
use crate::numerics::{relu_backward_in_place, relu_in_place, sigmoid, softmax, AffineLayer, Matrix, Optimizer, Parameters};

/// Attention weights: row-wise softmax of `Q Kᵀ / √d_k`.
fn attention_weights(q: &Matrix, k: &Matrix) -> Result<Matrix> {
    if q.cols() != k.cols() {
        return Err(shape_err("attention Q/K width", q.cols(), k.cols()));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut s = q.matmul_transposed(k)?;
    s.scale(scale);
    for r in 0..s.rows() {
        let p = softmax(s.row(r))?;
        s.row_mut(r).copy_from_slice(&p);
    }
    Ok(s)
}

/// `softmax(Q Kᵀ / √d_k) V`, softmax taken per row.
pub fn attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    if k.rows() != v.rows() {
        return Err(shape_err("attention K/V rows", k.rows(), v.rows()));
    }
    attention_weights(q, k)?.matmul(v)
}

/// Gradients of [`attention`] with respect to Q, K and V.
pub struct AttentionGrads {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

pub fn attention_backward(q: &Matrix, k: &Matrix, v: &Matrix, d_out: &Matrix) -> Result<AttentionGrads> {
    let p = attention_weights(q, k)?;
    if d_out.rows() != p.rows() || d_out.cols() != v.cols() {
        return Err(shape_err("attention backward", v.cols(), d_out.cols()));
    }
    let d_v = p.transposed_matmul(d_out)?;
    let d_p = d_out.matmul_transposed(v)?;
    let mut d_s = Matrix::zeros(p.rows(), p.cols());
    for r in 0..p.rows() {
        let (pr, dpr) = (p.row(r), d_p.row(r));
        let inner: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
        for (c, ds) in d_s.row_mut(r).iter_mut().enumerate() {
            *ds = pr[c] * (dpr[c] - inner);
        }
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    d_s.scale(scale);
    Ok(AttentionGrads {
        q: d_s.matmul(k)?,
        k: d_s.transposed_matmul(q)?,
        v: d_v,
    })
}

/// Per-head projections `X W^Q_i`, `X W^K_i`, `X W^V_i` and output `W^O`, all bias-free.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub w_q: Vec<Matrix>,
    pub w_k: Vec<Matrix>,
    pub w_v: Vec<Matrix>,
    /// `(h·d_v) × d_model`
    pub w_o: Matrix,
}

/// Intermediates of one multi-head forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadCache {
    tokens: Matrix,
    q: Vec<Matrix>,
    k: Vec<Matrix>,
    v: Vec<Matrix>,
    concat: Matrix,
}

impl AttentionParams {
    pub fn init<R: Rng + ?Sized>(heads: usize, token_width: usize, d_k: usize, d_v: usize, d_model: usize, rng: &mut R) -> Self {
        let proj = |cols: usize, rng: &mut R| Matrix::random_uniform(token_width, cols, (1.0 / token_width as f64).sqrt(), rng);
        let mut w_q = Vec::with_capacity(heads);
        let mut w_k = Vec::with_capacity(heads);
        let mut w_v = Vec::with_capacity(heads);
        for _ in 0..heads {
            w_q.push(proj(d_k, rng));
            w_k.push(proj(d_k, rng));
            w_v.push(proj(d_v, rng));
        }
        let fan_in = (heads * d_v) as f64;
        Self {
            w_q,
            w_k,
            w_v,
            w_o: Matrix::random_uniform(heads * d_v, d_model, (1.0 / fan_in).sqrt(), rng),
        }
    }

    pub fn heads(&self) -> usize {
        self.w_q.len()
    }

    pub fn d_model(&self) -> usize {
        self.w_o.cols()
    }

    fn validate(&self, tokens: &Matrix) -> Result<()> {
        let h = self.heads();
        if h == 0 || self.w_k.len() != h || self.w_v.len() != h {
            return Err(shape_err("multi_head head count", h, self.w_k.len().min(self.w_v.len())));
        }
        let d_v = self.w_v[0].cols();
        for i in 0..h {
            for w in [&self.w_q[i], &self.w_k[i], &self.w_v[i]] {
                if w.rows() != tokens.cols() {
                    return Err(shape_err("multi_head projection rows", tokens.cols(), w.rows()));
                }
            }
            if self.w_q[i].cols() != self.w_k[i].cols() || self.w_v[i].cols() != d_v {
                return Err(shape_err("multi_head projection widths", d_v, self.w_v[i].cols()));
            }
        }
        if self.w_o.rows() != h * d_v {
            return Err(shape_err("multi_head W^O rows", h * d_v, self.w_o.rows()));
        }
        Ok(())
    }

    /// `mean_tokens(Concat(head_1..head_h) W^O)`, width `d_model`.
    pub fn forward(&self, tokens: &Matrix) -> Result<(Vec<f64>, MultiHeadCache)> {
        self.validate(tokens)?;
        let n = tokens.rows();
        let d_v = self.w_v[0].cols();
        let mut concat = Matrix::zeros(n, self.heads() * d_v);
        let (mut qs, mut ks, mut vs) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..self.heads() {
            let q = tokens.matmul(&self.w_q[i])?;
            let k = tokens.matmul(&self.w_k[i])?;
            let v = tokens.matmul(&self.w_v[i])?;
            let head = attention(&q, &k, &v)?;
            for r in 0..n {
                concat.row_mut(r)[i * d_v..(i + 1) * d_v].copy_from_slice(head.row(r));
            }
            qs.push(q);
            ks.push(k);
            vs.push(v);
        }
        let y = concat.matmul(&self.w_o)?;
        let mut pooled = vec![0.0; y.cols()];
        for r in 0..n {
            for (p, x) in pooled.iter_mut().zip(y.row(r)) {
                *p += x / n as f64;
            }
        }
        Ok((pooled, MultiHeadCache { tokens: tokens.clone(), q: qs, k: ks, v: vs, concat }))
    }

    /// Accumulates parameter gradients and returns the token gradient.
    pub fn backward(&self, cache: &MultiHeadCache, d_pooled: &[f64], grads: &mut AttentionParams) -> Result<Matrix> {
        if d_pooled.len() != self.d_model() {
            return Err(shape_err("multi_head backward", self.d_model(), d_pooled.len()));
        }
        let n = cache.tokens.rows();
        let mut d_y = Matrix::zeros(n, self.d_model());
        for r in 0..n {
            for (d, g) in d_y.row_mut(r).iter_mut().zip(d_pooled) {
                *d = g / n as f64;
            }
        }
        grads.w_o.add_assign(&cache.concat.transposed_matmul(&d_y)?)?;
        let d_concat = d_y.matmul_transposed(&self.w_o)?;
        let d_v_width = self.w_v[0].cols();
        let mut d_tokens = Matrix::zeros(n, cache.tokens.cols());
        for i in 0..self.heads() {
            let mut d_head = Matrix::zeros(n, d_v_width);
            for r in 0..n {
                d_head
                    .row_mut(r)
                    .copy_from_slice(&d_concat.row(r)[i * d_v_width..(i + 1) * d_v_width]);
            }
            let g = attention_backward(&cache.q[i], &cache.k[i], &cache.v[i], &d_head)?;
            grads.w_q[i].add_assign(&cache.tokens.transposed_matmul(&g.q)?)?;
            grads.w_k[i].add_assign(&cache.tokens.transposed_matmul(&g.k)?)?;
            grads.w_v[i].add_assign(&cache.tokens.transposed_matmul(&g.v)?)?;
            d_tokens.add_assign(&g.q.matmul_transposed(&self.w_q[i])?)?;
            d_tokens.add_assign(&g.k.matmul_transposed(&self.w_k[i])?)?;
            d_tokens.add_assign(&g.v.matmul_transposed(&self.w_v[i])?)?;
        }
        Ok(d_tokens)
    }
}

impl Parameters for AttentionParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        for i in 0..self.heads() {
            f(&format!("attention.head{i}.w_q"), self.w_q[i].data());
            f(&format!("attention.head{i}.w_k"), self.w_k[i].data());
            f(&format!("attention.head{i}.w_v"), self.w_v[i].data());
        }
        f("attention.w_o", self.w_o.data());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for i in 0..self.w_q.len() {
            f(&format!("attention.head{i}.w_q"), self.w_q[i].data_mut());
            f(&format!("attention.head{i}.w_k"), self.w_k[i].data_mut());
            f(&format!("attention.head{i}.w_v"), self.w_v[i].data_mut());
        }
        f("attention.w_o", self.w_o.data_mut());
    }
}

/// Multi-head attention over the state's context tokens, pooled to `d_model`.
pub fn multi_head(state: &ContextState, params: &AttentionParams) -> Result<Vec<f64>> {
    Ok(params.forward(&state.tokens())?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationParams {
    /// `W_α`, one weight per state feature.
    pub w: Vec<f64>,
    pub b: f64,
    /// Amplitude `A` of `τ(t) = A sin(2πt / period)`.
    pub amplitude: f64,
    pub period: f64,
}

impl AdaptationParams {
    pub fn zeros(n_ctx: usize) -> Self {
        Self {
            w: vec![0.0; n_ctx],
            b: 0.0,
            amplitude: 0.0,
            period: 1.0,
        }
    }

    /// Small random `W_α`, zero bias, `A = 0.5`.
    pub fn init<R: Rng + ?Sized>(n_ctx: usize, period: f64, rng: &mut R) -> Self {
        let bound = 0.5 / (n_ctx.max(1) as f64).sqrt();
        Self {
            w: (0..n_ctx).map(|_| rng.random_range(-bound..=bound)).collect(),
            b: 0.0,
            amplitude: 0.5,
            period,
        }
    }

    pub fn tau(&self, t: usize) -> f64 {
        if self.period > 0.0 {
            self.amplitude * (2.0 * PI * t as f64 / self.period).sin()
        } else {
            0.0
        }
    }
}

/// `sigmoid(W_α · s + b_α + τ(t))` with the identity context encoding.
pub fn adaptation_factor(state: &ContextState, t: usize, params: &AdaptationParams) -> Result<f64> {
    let x = state.to_vector();
    adaptation_factor_raw(&x, t, params)
}

pub fn adaptation_factor_raw(x: &[f64], t: usize, params: &AdaptationParams) -> Result<f64> {
    if x.len() != params.w.len() {
        return Err(shape_err("adaptation_factor", params.w.len(), x.len()));
    }
    let z: f64 = params.w.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + params.b + params.tau(t);
    if !z.is_finite() {
        return Err(Error::Evaluation(format!("adaptation logit is {z}")));
    }
    Ok(sigmoid(z))
}

/// Autoencoder `E(·; φ)`: `n_ctx → hidden (relu) → d_z`, mirrored by the decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextEncoder {
    pub enc_hidden: AffineLayer,
    pub enc_out: AffineLayer,
    pub dec_hidden: AffineLayer,
    pub dec_out: AffineLayer,
}

impl ContextEncoder {
    pub fn init<R: Rng + ?Sized>(n_ctx: usize, hidden: usize, d_z: usize, rng: &mut R) -> Self {
        Self {
            enc_hidden: AffineLayer::init(n_ctx, hidden, rng),
            enc_out: AffineLayer::init(hidden, d_z, rng),
            dec_hidden: AffineLayer::init(d_z, hidden, rng),
            dec_out: AffineLayer::init(hidden, n_ctx, rng),
        }
    }

    pub fn n_ctx(&self) -> usize {
        self.enc_hidden.inputs()
    }

    pub fn latent_width(&self) -> usize {
        self.enc_out.outputs()
    }

    pub fn encode_vector(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut h = self.enc_hidden.apply(x)?;
        relu_in_place(&mut h);
        self.enc_out.apply(&h)
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        let mut h = self.dec_hidden.apply(z)?;
        relu_in_place(&mut h);
        self.dec_out.apply(&h)
    }

    /// Mean over the batch of `‖decode(encode(s)) − s‖²` and its gradient.
    pub fn loss_and_grad(&self, batch: &[Vec<f64>]) -> Result<(f64, ContextEncoder)> {
        if batch.is_empty() {
            return Err(Error::Argument("encoder batch is empty".into()));
        }
        let mut grads = self.clone();
        grads.zero();
        let inv_b = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for x in batch {
            let h1_pre = self.enc_hidden.apply(x)?;
            let mut h1 = h1_pre.clone();
            relu_in_place(&mut h1);
            let z = self.enc_out.apply(&h1)?;
            let h2_pre = self.dec_hidden.apply(&z)?;
            let mut h2 = h2_pre.clone();
            relu_in_place(&mut h2);
            let out = self.dec_out.apply(&h2)?;
            let diff: Vec<f64> = out.iter().zip(x).map(|(a, b)| a - b).collect();
            loss += diff.iter().map(|d| d * d).sum::<f64>() * inv_b;
            let d_out: Vec<f64> = diff.iter().map(|d| 2.0 * d * inv_b).collect();
            let mut d_h2 = self.dec_out.accumulate_backward(&h2, &d_out, &mut grads.dec_out);
            relu_backward_in_place(&h2_pre, &mut d_h2);
            let d_z = self.dec_hidden.accumulate_backward(&z, &d_h2, &mut grads.dec_hidden);
            let mut d_h1 = self.enc_out.accumulate_backward(&h1, &d_z, &mut grads.enc_out);
            relu_backward_in_place(&h1_pre, &mut d_h1);
            self.enc_hidden.accumulate_backward(x, &d_h1, &mut grads.enc_hidden);
        }
        Ok((loss, grads))
    }
}

impl Parameters for ContextEncoder {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.enc_hidden.visit_named("encoder.enc_hidden", f);
        self.enc_out.visit_named("encoder.enc_out", f);
        self.dec_hidden.visit_named("encoder.dec_hidden", f);
        self.dec_out.visit_named("encoder.dec_out", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.enc_hidden.visit_named_mut("encoder.enc_hidden", f);
        self.enc_out.visit_named_mut("encoder.enc_out", f);
        self.dec_hidden.visit_named_mut("encoder.dec_hidden", f);
        self.dec_out.visit_named_mut("encoder.dec_out", f);
    }
}

/// Latent `z` of the full state vector.
pub fn encode(state: &ContextState, params: &ContextEncoder) -> Result<Vec<f64>> {
    params.encode_vector(&state.to_vector())
}

/// One optimizer step on the reconstruction loss; returns the loss before the step.
pub fn encoder_update(batch: &[Vec<f64>], params: &mut ContextEncoder, optimizer: &mut Optimizer) -> Result<f64> {
    let (loss, grads) = params.loss_and_grad(batch)?;
    if !loss.is_finite() {
        return Err(Error::Diverged(format!("encoder loss is {loss}")));
    }
    optimizer.step(params, &grads);
    Ok(loss)
}
