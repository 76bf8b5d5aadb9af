//! Multi-head Q-network over the action-template catalog, context-scaled
//! exploration, Bellman targets and the replay mini-batch update.
//!
//! Every pathway into the shared trunk is optional so the same machinery
//! serves the full context-aware agent and the context-blind DQN baseline.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::context::{AdaptationParams, AttentionParams, ContextEncoder, MultiHeadCache};
use crate::environment::state::{TOKEN_COUNT, TOKEN_WIDTH};
use crate::environment::{ContextState, StakeholderWeights};
use crate::error::{config_err, shape_err, Error, Result};
use crate::graph::{GnnEncoderCache, GnnParams, HeteroGraph, NODE_FEATURES};
use crate::numerics::{axpy, dot, relu_backward_in_place, relu_in_place, AffineLayer, Matrix, Optimizer, Parameters};
use crate::training::Transition;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionShape {
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub d_model: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GnnShape {
    pub width: usize,
    pub layers: usize,
}

/// Architecture of a [`QNetParams`]; fully determines its parameter layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QNetConfig {
    pub n_heads: usize,
    pub n_templates: usize,
    pub embed_width: usize,
    pub trunk_width: usize,
    pub head_hidden: usize,
    pub attention: Option<AttentionShape>,
    pub gnn: Option<GnnShape>,
    /// Width of the encoder latent `z` fed as a stop-gradient input; 0 disables it.
    pub latent_width: usize,
    /// Width of the raw per-vehicle and per-station feature block; 0 disables it.
    pub entity_width: usize,
}

/// Upper bound on any single dimension accepted from untrusted configs.
const MAX_DIM: usize = 4096;
/// Upper bound on total parameters accepted from untrusted configs.
const MAX_PARAMS: usize = 50_000_000;

impl QNetConfig {
    /// Five stakeholder heads over attention, GNN, latent and entity pathways.
    pub fn cama(n_templates: usize, entity_width: usize, latent_width: usize) -> Self {
        Self {
            n_heads: 5,
            n_templates,
            embed_width: 8,
            trunk_width: 64,
            head_hidden: 32,
            attention: Some(AttentionShape { heads: 2, d_k: 8, d_v: 8, d_model: 16 }),
            gnn: Some(GnnShape { width: 16, layers: 2 }),
            latent_width,
            entity_width,
        }
    }

    /// One head over entity features only: no context tokens, graph or latent.
    pub fn dqn(n_templates: usize, entity_width: usize) -> Self {
        Self {
            n_heads: 1,
            n_templates,
            embed_width: 8,
            trunk_width: 64,
            head_hidden: 32,
            attention: None,
            gnn: None,
            latent_width: 0,
            entity_width,
        }
    }

    pub fn input_width(&self) -> usize {
        self.attention.map_or(0, |a| a.d_model) + self.gnn.map_or(0, |g| g.width) + self.latent_width + self.entity_width
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_heads", self.n_heads),
            ("n_templates", self.n_templates),
            ("embed_width", self.embed_width),
            ("trunk_width", self.trunk_width),
            ("head_hidden", self.head_hidden),
        ];
        for (name, v) in dims {
            if v == 0 || v > MAX_DIM {
                return Err(config_err(format!("network.{name}"), format!("must be in 1..={MAX_DIM}, got {v}")));
            }
        }
        for (name, v) in [("latent_width", self.latent_width), ("entity_width", self.entity_width)] {
            if v > MAX_DIM {
                return Err(config_err(format!("network.{name}"), format!("must be <= {MAX_DIM}, got {v}")));
            }
        }
        if let Some(a) = self.attention {
            for (name, v) in [("heads", a.heads), ("d_k", a.d_k), ("d_v", a.d_v), ("d_model", a.d_model)] {
                if v == 0 || v > MAX_DIM {
                    return Err(config_err(format!("network.attention.{name}"), format!("must be in 1..={MAX_DIM}, got {v}")));
                }
            }
        }
        if let Some(g) = self.gnn {
            if g.width == 0 || g.width > MAX_DIM || g.layers > 64 {
                return Err(config_err("network.gnn", format!("width must be in 1..={MAX_DIM} and layers <= 64, got {g:?}")));
            }
        }
        if self.input_width() == 0 {
            return Err(config_err("network", "at least one input pathway must be enabled"));
        }
        match self.param_count() {
            Some(n) if n <= MAX_PARAMS => Ok(()),
            _ => Err(config_err("network", format!("parameter count exceeds {MAX_PARAMS}"))),
        }
    }

    /// Parameter count implied by the architecture, `None` on overflow.
    pub fn param_count(&self) -> Option<usize> {
        let m = |a: usize, b: usize| a.checked_mul(b);
        let mut n: usize = 0;
        if let Some(a) = self.attention {
            let proj = m(TOKEN_WIDTH, 2 * a.d_k + a.d_v)?;
            n = n.checked_add(m(a.heads, proj)?)?.checked_add(m(m(a.heads, a.d_v)?, a.d_model)?)?;
        }
        if let Some(g) = self.gnn {
            let layer = m(m(g.width, g.width)?, 5)?;
            n = n.checked_add(m(NODE_FEATURES + 1, g.width)?)?.checked_add(m(g.layers, layer)?)?;
        }
        n = n.checked_add(m(self.input_width() + 1, self.trunk_width)?)?;
        n = n.checked_add(m(self.n_templates, self.embed_width)?)?;
        let head = m(self.head_hidden, self.trunk_width + self.embed_width + 2)?.checked_add(1)?;
        n.checked_add(m(self.n_heads, head)?)
    }
}

/// `q = out(relu(W_x f + W_a Embed(a) + b))` for one stakeholder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QHead {
    pub w_x: Matrix,
    pub w_a: Matrix,
    pub b: Vec<f64>,
    pub out: AffineLayer,
}

/// Online or target parameters θ of the Q-network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QNetParams {
    pub config: QNetConfig,
    pub attention: Option<AttentionParams>,
    pub gnn: Option<GnnParams>,
    pub trunk: AffineLayer,
    /// `n_templates × embed_width` action embedding table.
    pub embed: Matrix,
    pub heads: Vec<QHead>,
}

/// What the network reads for one state: the observation plus the encoder latent.
#[derive(Debug, Clone, Copy)]
pub struct QInput<'a> {
    pub state: &'a ContextState,
    pub graph: Option<&'a HeteroGraph>,
    pub latent: &'a [f64],
}

/// A state as stored in replay: the vector observation and its graph view.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub state: ContextState,
    pub graph: Option<HeteroGraph>,
}

impl Observation {
    pub fn input<'a>(&'a self, latent: &'a [f64]) -> QInput<'a> {
        QInput { state: &self.state, graph: self.graph.as_ref(), latent }
    }
}

struct TrunkCache {
    attention: Option<MultiHeadCache>,
    gnn: Option<GnnEncoderCache>,
    x: Vec<f64>,
    pre: Vec<f64>,
    f: Vec<f64>,
}

impl QNetParams {
    pub fn init<R: Rng + ?Sized>(config: QNetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let attention = config
            .attention
            .map(|a| AttentionParams::init(a.heads, TOKEN_WIDTH, a.d_k, a.d_v, a.d_model, rng));
        let gnn = config.gnn.map(|g| GnnParams::init(g.width, g.layers, rng));
        let trunk = AffineLayer::init(config.input_width(), config.trunk_width, rng);
        let embed = Matrix::random_uniform(config.n_templates, config.embed_width, 1.0, rng);
        let heads = (0..config.n_heads)
            .map(|_| {
                let fan_in = (config.trunk_width + config.embed_width) as f64;
                let bound = (6.0 / fan_in).sqrt();
                QHead {
                    w_x: Matrix::random_uniform(config.head_hidden, config.trunk_width, bound, rng),
                    w_a: Matrix::random_uniform(config.head_hidden, config.embed_width, bound, rng),
                    b: vec![0.0; config.head_hidden],
                    out: AffineLayer::init(config.head_hidden, 1, rng),
                }
            })
            .collect();
        Ok(Self { config, attention, gnn, trunk, embed, heads })
    }

    /// All-zero parameters with the layout implied by `config`.
    pub fn zeros(config: QNetConfig) -> Result<Self> {
        let mut p = Self::init(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        p.zero();
        Ok(p)
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn n_templates(&self) -> usize {
        self.embed.rows()
    }

    fn trunk_forward(&self, input: &QInput) -> Result<(Vec<f64>, TrunkCache)> {
        let mut x = Vec::with_capacity(self.config.input_width());
        let attention = match &self.attention {
            Some(a) => {
                let tokens = input.state.tokens();
                debug_assert_eq!(tokens.rows(), TOKEN_COUNT);
                let (pooled, cache) = a.forward(&tokens)?;
                x.extend_from_slice(&pooled);
                Some(cache)
            }
            None => None,
        };
        let gnn = match &self.gnn {
            Some(g) => {
                let graph = input
                    .graph
                    .ok_or_else(|| Error::Argument("network has a GNN pathway but no graph was supplied".into()))?;
                let (pooled, cache) = g.forward(graph)?;
                x.extend_from_slice(&pooled);
                Some(cache)
            }
            None => None,
        };
        if input.latent.len() != self.config.latent_width {
            return Err(shape_err("q-network latent", self.config.latent_width, input.latent.len()));
        }
        x.extend_from_slice(input.latent);
        if self.config.entity_width > 0 {
            let (b, s) = (&input.state.base, &input.state.spatial);
            if b.len() + s.len() != self.config.entity_width {
                return Err(shape_err("q-network entity block", self.config.entity_width, b.len() + s.len()));
            }
            x.extend_from_slice(b);
            x.extend_from_slice(s);
        }
        let pre = self.trunk.apply(&x)?;
        let mut f = pre.clone();
        relu_in_place(&mut f);
        Ok((f.clone(), TrunkCache { attention, gnn, x, pre, f }))
    }

    /// Shared hidden term `W_x f + b` of head `i`.
    fn head_base(&self, i: usize, f: &[f64]) -> Result<Vec<f64>> {
        let head = &self.heads[i];
        let mut u = head.w_x.matvec(f)?;
        axpy(1.0, &head.b, &mut u);
        Ok(u)
    }

    /// Pre-activation of head `i` at template `a` given its base term.
    fn head_pre(&self, i: usize, base: &[f64], a: usize) -> Vec<f64> {
        let head = &self.heads[i];
        let e = self.embed.row(a);
        base.iter()
            .enumerate()
            .map(|(r, u)| u + dot(head.w_a.row(r), e))
            .collect()
    }

    fn head_output(&self, i: usize, pre: &[f64]) -> f64 {
        let out = &self.heads[i].out;
        out.weight
            .row(0)
            .iter()
            .zip(pre)
            .map(|(w, p)| w * p.max(0.0))
            .sum::<f64>()
            + out.bias[0]
    }

    fn head_all(&self, i: usize, f: &[f64]) -> Result<Vec<f64>> {
        let base = self.head_base(i, f)?;
        Ok((0..self.n_templates())
            .map(|a| self.head_output(i, &self.head_pre(i, &base, a)))
            .collect())
    }

    /// `Q_i(s, ·)` for every head, one trunk pass.
    pub fn evaluate(&self, input: &QInput) -> Result<Vec<Vec<f64>>> {
        let (f, _) = self.trunk_forward(input)?;
        (0..self.n_heads()).map(|i| self.head_all(i, &f)).collect()
    }

    /// Mean over samples and heads of `(y_i − Q_i(s, a))²`, with its gradient.
    ///
    /// The latent input is treated as a constant.
    pub fn loss_and_grad(&self, samples: &[Sample]) -> Result<(f64, QNetParams)> {
        if samples.is_empty() {
            return Err(Error::Argument("batch is empty".into()));
        }
        let mut grads = self.clone();
        grads.zero();
        let n_heads = self.n_heads();
        let scale = 1.0 / (samples.len() * n_heads) as f64;
        let mut loss = 0.0;
        for s in samples {
            if s.action >= self.n_templates() {
                return Err(Error::Action(format!("template {} out of range 0..{}", s.action, self.n_templates())));
            }
            if s.targets.len() != n_heads {
                return Err(shape_err("batch targets", n_heads, s.targets.len()));
            }
            let (f, cache) = self.trunk_forward(&s.input)?;
            let mut d_f = vec![0.0; f.len()];
            for i in 0..n_heads {
                let head = &self.heads[i];
                let pre = self.head_pre(i, &self.head_base(i, &f)?, s.action);
                let q = self.head_output(i, &pre);
                let err = s.targets[i] - q;
                loss += err * err * scale;
                let d_q = -2.0 * err * scale;
                let g = &mut grads.heads[i];
                let hidden: Vec<f64> = pre.iter().map(|p| p.max(0.0)).collect();
                axpy(d_q, &hidden, g.out.weight.row_mut(0));
                g.out.bias[0] += d_q;
                let mut d_h: Vec<f64> = head.out.weight.row(0).iter().map(|w| w * d_q).collect();
                relu_backward_in_place(&pre, &mut d_h);
                g.w_x.add_outer(1.0, &d_h, &f);
                axpy(1.0, &d_h, &mut g.b);
                g.w_a.add_outer(1.0, &d_h, self.embed.row(s.action));
                let d_e = head.w_a.transpose_matvec(&d_h)?;
                axpy(1.0, &d_e, grads.embed.row_mut(s.action));
                axpy(1.0, &head.w_x.transpose_matvec(&d_h)?, &mut d_f);
            }
            self.trunk_backward(&s.input, &cache, d_f, &mut grads)?;
        }
        Ok((loss, grads))
    }

    fn trunk_backward(&self, input: &QInput, cache: &TrunkCache, mut d_f: Vec<f64>, grads: &mut QNetParams) -> Result<()> {
        debug_assert_eq!(cache.f.len(), d_f.len());
        relu_backward_in_place(&cache.pre, &mut d_f);
        let d_x = self.trunk.accumulate_backward(&cache.x, &d_f, &mut grads.trunk);
        let mut offset = 0;
        if let (Some(a), Some(c), Some(g)) = (&self.attention, &cache.attention, grads.attention.as_mut()) {
            let w = a.d_model();
            a.backward(c, &d_x[offset..offset + w], g)?;
            offset += w;
        }
        if let (Some(gnn), Some(c), Some(g)) = (&self.gnn, &cache.gnn, grads.gnn.as_mut()) {
            let w = gnn.width();
            let graph = input
                .graph
                .ok_or_else(|| Error::Argument("network has a GNN pathway but no graph was supplied".into()))?;
            gnn.backward(graph, c, &d_x[offset..offset + w], g)?;
        }
        Ok(())
    }

    /// Smallest non-zero `|pre-activation|` of any ReLU the loss at
    /// `(input, action)` passes through; finite-difference checks need it to
    /// exceed the step.
    pub fn relu_margin(&self, input: &QInput, action: usize) -> Result<f64> {
        let (f, cache) = self.trunk_forward(input)?;
        let mut margin = cache.gnn.as_ref().map_or(f64::INFINITY, GnnEncoderCache::relu_margin);
        let mut visit = |v: &f64| {
            if *v != 0.0 {
                margin = margin.min(v.abs());
            }
        };
        cache.pre.iter().for_each(&mut visit);
        for i in 0..self.n_heads() {
            self.head_pre(i, &self.head_base(i, &f)?, action).iter().for_each(&mut visit);
        }
        Ok(margin)
    }

    /// Rescales `grads` in place so its global L2 norm is at most `max_norm`.
    fn clip(grads: &mut QNetParams, max_norm: f64) {
        let mut sq = 0.0;
        grads.visit(&mut |_, s| sq += s.iter().map(|v| v * v).sum::<f64>());
        let norm = sq.sqrt();
        if norm > max_norm {
            let k = max_norm / norm;
            grads.visit_mut(&mut |_, s| s.iter_mut().for_each(|v| *v *= k));
        }
    }
}

impl Parameters for QNetParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        if let Some(a) = &self.attention {
            a.visit(f);
        }
        if let Some(g) = &self.gnn {
            g.visit(f);
        }
        self.trunk.visit_named("trunk", f);
        f("embed", self.embed.data());
        for (i, h) in self.heads.iter().enumerate() {
            f(&format!("head{i}.w_x"), h.w_x.data());
            f(&format!("head{i}.w_a"), h.w_a.data());
            f(&format!("head{i}.b"), &h.b);
            h.out.visit_named(&format!("head{i}.out"), f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        if let Some(a) = &mut self.attention {
            a.visit_mut(f);
        }
        if let Some(g) = &mut self.gnn {
            g.visit_mut(f);
        }
        self.trunk.visit_named_mut("trunk", f);
        f("embed", self.embed.data_mut());
        for (i, h) in self.heads.iter_mut().enumerate() {
            f(&format!("head{i}.w_x"), h.w_x.data_mut());
            f(&format!("head{i}.w_a"), h.w_a.data_mut());
            f(&format!("head{i}.b"), &mut h.b);
            h.out.visit_named_mut(&format!("head{i}.out"), f);
        }
    }
}

/// One regression sample: the online input, executed template, and per-head targets.
#[derive(Debug, Clone)]
pub struct Sample<'a> {
    pub input: QInput<'a>,
    pub action: usize,
    pub targets: Vec<f64>,
}

fn check_weights(w: &[f64], n_heads: usize) -> Result<()> {
    if w.len() != n_heads {
        return Err(shape_err("head weights", n_heads, w.len()));
    }
    if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Invariant(format!("head weights must be finite and >= 0, got {w:?}")));
    }
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > StakeholderWeights::TOLERANCE {
        return Err(Error::Invariant(format!("head weights must sum to 1, got {sum}")));
    }
    Ok(())
}

/// The weight vector a network with `n_heads` heads combines under: the
/// stakeholder weights for five heads, `[1]` for a single shared head.
pub fn head_weights(n_heads: usize, w: &StakeholderWeights) -> Result<Vec<f64>> {
    match n_heads {
        1 => Ok(vec![1.0]),
        n if n == w.as_array().len() => Ok(w.as_array().to_vec()),
        n => Err(shape_err("head weights", w.as_array().len(), n)),
    }
}

/// Elementwise `Σ_i w_i q_i`.
pub fn combine(per_head: &[Vec<f64>], w: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; per_head.first().map_or(0, Vec::len)];
    for (q, wi) in per_head.iter().zip(w) {
        axpy(*wi, q, &mut out);
    }
    out
}

/// Index of the maximum; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// `Q_i(s, a)` for every template `a`.
pub fn q_values(input: &QInput, params: &QNetParams, head: usize) -> Result<Vec<f64>> {
    if head >= params.n_heads() {
        return Err(Error::Argument(format!("head {head} out of range 0..{}", params.n_heads())));
    }
    let (f, _) = params.trunk_forward(input)?;
    params.head_all(head, &f)
}

/// `Σ_i w_i Q_i(s, ·)`.
pub fn q_total(input: &QInput, params: &QNetParams, w: &[f64]) -> Result<Vec<f64>> {
    check_weights(w, params.n_heads())?;
    Ok(combine(&params.evaluate(input)?, w))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplorationParams {
    pub eps_base: f64,
    pub lambda_t: f64,
    pub lambda_c: f64,
    pub eps_min: f64,
}

impl Default for ExplorationParams {
    fn default() -> Self {
        Self { eps_base: 0.9, lambda_t: 0.02, lambda_c: 0.5, eps_min: 0.05 }
    }
}

impl ExplorationParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eps_base) {
            return Err(config_err("eps_0", format!("must be in [0, 1], got {}", self.eps_base)));
        }
        if !(0.0..=1.0).contains(&self.eps_min) {
            return Err(config_err("eps_min", format!("must be in [0, 1], got {}", self.eps_min)));
        }
        for (name, v) in [("lambda_t", self.lambda_t), ("lambda_c", self.lambda_c)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(config_err(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// `ε_base · exp(−λ_t t) · exp(−λ_c c)`, clamped to `[ε_min, 1]`.
pub fn epsilon_ctx(t: usize, complexity: f64, p: &ExplorationParams) -> f64 {
    let eps = p.eps_base * (-p.lambda_t * t as f64).exp() * (-p.lambda_c * complexity).exp();
    eps.clamp(p.eps_min.min(1.0), 1.0)
}

/// ε-greedy over `q_total`; returns the template and whether it was the greedy choice.
///
/// Exactly one uniform draw is consumed per call, plus one template draw
/// when exploring.
pub fn select_action<R: Rng + ?Sized>(input: &QInput, params: &QNetParams, w: &[f64], eps: f64, rng: &mut R) -> Result<(usize, bool)> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::Argument(format!("epsilon must be in [0, 1], got {eps}")));
    }
    if rng.random::<f64>() < eps {
        return Ok((rng.random_range(0..params.n_templates()), false));
    }
    Ok((argmax(&q_total(input, params, w)?), true))
}

/// `r` when done, else `r + γ max_a Q_total(s′, a; θ⁻)`.
pub fn td_target(r: f64, next: &QInput, target: &QNetParams, w: &[f64], gamma: f64, done: bool) -> Result<f64> {
    if done {
        return Ok(r);
    }
    let q = q_total(next, target, w)?;
    Ok(r + gamma * q[argmax(&q)])
}

pub fn td_error(y: f64, q_sa: f64) -> f64 {
    y - q_sa
}

/// Per-head regression targets
/// `y_i = (1 − γ_c) R_i + γ_c r_coord + γ (1 − done) Q_i(s′, a*; θ⁻)`,
/// with `a*` the greedy template of `Q_total(s′; θ⁻)`.
///
/// `Σ_i w_i y_i` equals [`td_target`] on `r_coord` whenever `r_coord = Σ_i w_i R_i`.
#[allow(clippy::too_many_arguments)]
pub fn head_targets(
    rewards: &[f64],
    r_coord: f64,
    next: &QInput,
    target: &QNetParams,
    w: &[f64],
    gamma: f64,
    gamma_coord: f64,
    done: bool,
) -> Result<Vec<f64>> {
    if rewards.len() != target.n_heads() {
        return Err(shape_err("head rewards", target.n_heads(), rewards.len()));
    }
    check_weights(w, target.n_heads())?;
    let mut y: Vec<f64> = rewards.iter().map(|r| (1.0 - gamma_coord) * r + gamma_coord * r_coord).collect();
    if !done {
        let per_head = target.evaluate(next)?;
        let a_star = argmax(&combine(&per_head, w));
        for (yi, q) in y.iter_mut().zip(&per_head) {
            *yi += gamma * q[a_star];
        }
    }
    Ok(y)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateParams {
    pub gamma: f64,
    pub gamma_coord: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

/// Rewards each head regresses on: all stakeholders for a five-head network,
/// the coordinated reward for a single head.
fn rewards_for(t: &Transition, n_heads: usize) -> Result<Vec<f64>> {
    match n_heads {
        1 => Ok(vec![t.r_coord]),
        n if n == t.rewards.len() => Ok(t.rewards.to_vec()),
        n => Err(shape_err("transition rewards", n, t.rewards.len())),
    }
}

/// Latent for an observation under the current encoder, empty when the
/// network has no latent pathway.
pub fn latent_for(obs: &Observation, encoder: Option<&ContextEncoder>, latent_width: usize) -> Result<Vec<f64>> {
    if latent_width == 0 {
        return Ok(Vec::new());
    }
    let enc = encoder.ok_or_else(|| Error::Argument("network reads a latent but no encoder was supplied".into()))?;
    crate::context::encode(&obs.state, enc)
}

/// One optimizer step on the batch's squared TD error; returns the pre-step loss.
pub fn batch_update(
    batch: &[&Transition],
    online: &mut QNetParams,
    target: &QNetParams,
    encoder: Option<&ContextEncoder>,
    w: &[f64],
    params: &UpdateParams,
    optimizer: &mut Optimizer,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Argument("batch is empty".into()));
    }
    let width = online.config.latent_width;
    let mut latents = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    for t in batch {
        let z_next = latent_for(&t.next, encoder, width)?;
        let y = head_targets(
            &rewards_for(t, online.n_heads())?,
            t.r_coord,
            &t.next.input(&z_next),
            target,
            w,
            params.gamma,
            params.gamma_coord,
            t.done,
        )?;
        targets.push(y);
        latents.push(latent_for(&t.state, encoder, width)?);
    }
    let samples: Vec<Sample> = batch
        .iter()
        .zip(&latents)
        .zip(targets)
        .map(|((t, z), y)| Sample { input: t.state.input(z), action: t.action, targets: y })
        .collect();
    let (loss, mut grads) = online.loss_and_grad(&samples)?;
    if !loss.is_finite() || !grads.all_finite() {
        return Err(Error::Diverged(format!("Q loss is {loss} on a batch of {}", batch.len())));
    }
    if let Some(max) = params.max_grad_norm {
        QNetParams::clip(&mut grads, max);
    }
    optimizer.step(online, &grads);
    Ok(loss)
}

pub const CHECKPOINT_FORMAT: &str = "camac-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderShape {
    pub n_ctx: usize,
    pub hidden: usize,
    pub d_z: usize,
}

impl EncoderShape {
    fn param_count(&self) -> Option<usize> {
        let enc = self.hidden.checked_mul(self.n_ctx + 1)?.checked_add(self.d_z.checked_mul(self.hidden + 1)?)?;
        let dec = self.hidden.checked_mul(self.d_z + 1)?.checked_add(self.n_ctx.checked_mul(self.hidden + 1)?)?;
        enc.checked_add(dec)
    }
}

/// Serialized form: architecture header, named layout, then flat values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub network: QNetConfig,
    pub encoder: Option<EncoderShape>,
    pub adaptation: AdaptationParams,
    /// Head weights used for greedy evaluation.
    pub weights: Vec<f64>,
    pub layout: Vec<(String, usize)>,
    pub values: Vec<f64>,
}

/// Everything needed to act greedily after training.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub network: QNetParams,
    pub encoder: Option<ContextEncoder>,
    pub adaptation: AdaptationParams,
    pub weights: Vec<f64>,
}

impl Model {
    pub fn latent(&self, obs: &Observation) -> Result<Vec<f64>> {
        latent_for(obs, self.encoder.as_ref(), self.network.config.latent_width)
    }

    /// Greedy template under the evaluation weights.
    pub fn act(&self, obs: &Observation) -> Result<usize> {
        let z = self.latent(obs)?;
        Ok(argmax(&q_total(&obs.input(&z), &self.network, &self.weights)?))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut layout = self.network.layout();
        let mut values = self.network.flatten();
        let encoder = self.encoder.as_ref().map(|e| {
            layout.extend(e.layout());
            values.extend(e.flatten());
            EncoderShape { n_ctx: e.n_ctx(), hidden: e.enc_hidden.outputs(), d_z: e.latent_width() }
        });
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            network: self.network.config.clone(),
            encoder,
            adaptation: self.adaptation.clone(),
            weights: self.weights.clone(),
            layout,
            values,
        }
    }

    pub fn from_checkpoint(cp: Checkpoint) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if cp.format != CHECKPOINT_FORMAT {
            return Err(bad(format!("format is {:?}, expected {CHECKPOINT_FORMAT:?}", cp.format)));
        }
        if cp.version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {}", cp.version)));
        }
        cp.network.validate()?;
        let net_count = cp.network.param_count().unwrap_or(usize::MAX);
        let enc_count = match cp.encoder {
            Some(e) => {
                if [e.n_ctx, e.hidden, e.d_z].iter().any(|d| *d == 0 || *d > MAX_DIM) {
                    return Err(bad(format!("encoder dimensions out of range: {e:?}")));
                }
                if e.d_z != cp.network.latent_width {
                    return Err(bad(format!("encoder latent {} does not match network latent {}", e.d_z, cp.network.latent_width)));
                }
                e.param_count().unwrap_or(usize::MAX)
            }
            None if cp.network.latent_width > 0 => return Err(bad("network reads a latent but no encoder is stored".into())),
            None => 0,
        };
        if net_count.checked_add(enc_count) != Some(cp.values.len()) {
            return Err(bad(format!("expected {} values, found {}", net_count.saturating_add(enc_count), cp.values.len())));
        }
        if cp.values.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite parameter value".into()));
        }
        check_weights(&cp.weights, cp.network.n_heads).map_err(|e| bad(e.to_string()))?;
        if cp.adaptation.w.len() > MAX_DIM * 64
            || !cp.adaptation.w.iter().chain([&cp.adaptation.b, &cp.adaptation.amplitude, &cp.adaptation.period]).all(|v| v.is_finite())
        {
            return Err(bad("adaptation parameters are not finite".into()));
        }
        let mut network = QNetParams::zeros(cp.network.clone())?;
        let mut encoder = cp.encoder.map(|e| {
            let mut enc = ContextEncoder::init(e.n_ctx, e.hidden, e.d_z, &mut ChaCha8Rng::seed_from_u64(0));
            enc.zero();
            enc
        });
        let mut layout = network.layout();
        if let Some(e) = &encoder {
            layout.extend(e.layout());
        }
        if layout != cp.layout {
            return Err(bad("layout does not match the declared architecture".into()));
        }
        network.assign(&cp.values[..net_count])?;
        if let Some(e) = encoder.as_mut() {
            e.assign(&cp.values[net_count..])?;
        }
        Ok(Self { network, encoder, adaptation: cp.adaptation, weights: cp.weights })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_checkpoint())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cp: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Self::from_checkpoint(cp)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests;
