//! Frozen toy backbone with low-rank adapters and dual-path gated attention.
//!
//! Each layer projects its input through `W' = W_fixed + (α/r)·B·A` into
//! per-head queries, keys and values. A head mixes two paths:
//!
//! * linear: delta-rule memory write then read, `o_lin = S_t q_t`;
//! * softmax: causal softmax attention over the last `W` tokens.
//!
//! `o = α ⊙ o_lin + (1 − α) ⊙ o_sm` with `α = σ(gate logit)`. Heads are
//! concatenated, projected by the frozen `W_o`, and added to the residual
//! stream. A frozen head maps the final residual to logits.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{self, MemoryState, UpdateRule, WriteStep};
use crate::numerics::{self, dot, sigmoid, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// One logit per (layer, head).
    #[default]
    Scalar,
    /// One logit per (layer, head, channel).
    Vector,
}

fn default_true() -> bool {
    true
}

fn default_window() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub head_dim: usize,
    pub heads: usize,
    pub layers: usize,
    #[serde(default = "default_window")]
    pub window: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    #[serde(default)]
    pub gate_mode: GateMode,
    /// Adds a per-(layer, head) weight vector so `β_t = σ(b + w·x_t)`.
    #[serde(default)]
    pub per_token_beta: bool,
    #[serde(default = "default_true")]
    pub normalize_keys: bool,
}

impl ModelConfig {
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 32,
            head_dim: 16,
            heads: 2,
            layers: 2,
            window: 32,
            lora_rank: 16,
            lora_alpha: 32.0,
            gate_mode: GateMode::Scalar,
            per_token_beta: false,
            normalize_keys: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("head_dim", self.head_dim),
            ("heads", self.heads),
            ("layers", self.layers),
            ("window", self.window),
            ("lora_rank", self.lora_rank),
        ];
        for (field, value) in checks {
            if value == 0 {
                return Err(Error::Config {
                    field: format!("model.{field}"),
                    message: "must be positive".into(),
                });
            }
        }
        if !(self.lora_alpha.is_finite() && self.lora_alpha > 0.0) {
            return Err(Error::Config {
                field: "model.lora_alpha".into(),
                message: "must be a positive number".into(),
            });
        }
        Ok(())
    }

    /// Width of the concatenated heads.
    pub fn inner_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Analytic size of the frozen backbone.
    pub fn backbone_param_count(&self) -> usize {
        let v = self.vocab_size;
        let dm = self.d_model;
        v * dm + self.layers * self.heads * 4 * dm * self.head_dim + dm * v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    /// `H·d × d_model` each.
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    /// `d_model × H·d`.
    pub wo: Matrix,
}

/// The frozen backbone. Nothing in here is ever trained.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub config: ModelConfig,
    /// `V × d_model`.
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    /// `V × d_model`; logits are `head · h`.
    pub head: Matrix,
}

pub fn init_backbone(config: &ModelConfig, rng: &mut Rng) -> Result<BackboneParams> {
    config.validate()?;
    let dm = config.d_model;
    let inner = config.inner_dim();
    let embedding = Matrix::gaussian(config.vocab_size, dm, 1.0, rng);
    let proj_std = 1.0 / (dm as f64).sqrt();
    let out_std = 1.0 / (inner as f64).sqrt();
    let layers = (0..config.layers)
        .map(|_| LayerWeights {
            wq: Matrix::gaussian(inner, dm, proj_std, rng),
            wk: Matrix::gaussian(inner, dm, proj_std, rng),
            wv: Matrix::gaussian(inner, dm, proj_std, rng),
            wo: Matrix::gaussian(dm, inner, out_std, rng),
        })
        .collect();
    let head = Matrix::gaussian(config.vocab_size, dm, proj_std, rng);
    Ok(BackboneParams {
        config: config.clone(),
        embedding,
        layers,
        head,
    })
}

impl BackboneParams {
    pub fn param_count(&self) -> usize {
        self.embedding.len()
            + self
                .layers
                .iter()
                .map(|l| l.wq.len() + l.wk.len() + l.wv.len() + l.wo.len())
                .sum::<usize>()
            + self.head.len()
    }
}

/// Low-rank adapter `ΔW = (α/r)·B·A`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    /// `r × d_in`.
    pub a: Matrix,
    /// `d_out × r`.
    pub b: Matrix,
    pub alpha: f64,
}

impl LoraPair {
    /// `A ~ N(0, 1/r)`, `B = 0`.
    pub fn init(d_in: usize, d_out: usize, rank: usize, alpha: f64, rng: &mut Rng) -> Self {
        Self {
            a: Matrix::gaussian(rank, d_in, (1.0 / rank as f64).sqrt(), rng),
            b: Matrix::zeros(d_out, rank),
            alpha,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// `W_fixed + (α/r)·B·A`, materialized.
    pub fn dense(&self, w_fixed: &Matrix) -> Result<Matrix> {
        let ba = numerics::matmul(&self.b, &self.a)?;
        w_fixed.add(&ba.scaled(self.scale()))
    }
}

/// `(W_fixed + (α/r)·B·A)·x` without materializing `B·A`.
pub fn adapted_projection(x: &[f64], w_fixed: &Matrix, lora: &LoraPair) -> Result<Vec<f64>> {
    if w_fixed.cols() != x.len()
        || lora.a.cols() != x.len()
        || lora.b.rows() != w_fixed.rows()
        || lora.b.cols() != lora.a.rows()
    {
        return Err(Error::Shape {
            op: "adapted_projection",
            left: format!(
                "W {}, A {}, B {}",
                w_fixed.shape_str(),
                lora.a.shape_str(),
                lora.b.shape_str()
            ),
            right: format!("x {}", x.len()),
        });
    }
    Ok(project(x, w_fixed, lora).0)
}

/// Returns the projection and the rank-space activation `A x`.
fn project(x: &[f64], w_fixed: &Matrix, lora: &LoraPair) -> (Vec<f64>, Vec<f64>) {
    let ax = lora.a.matvec_unchecked(x);
    let mut y = w_fixed.matvec_unchecked(x);
    let bax = lora.b.matvec_unchecked(&ax);
    numerics::axpy(lora.scale(), &bax, &mut y);
    (y, ax)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerLora {
    pub q: LoraPair,
    pub k: LoraPair,
    pub v: LoraPair,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub mode: GateMode,
    /// `L·H` (scalar) or `L·H·d` (vector) logits, layer-major.
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BetaParams {
    /// `L·H` write-strength logits.
    pub logits: Vec<f64>,
    /// `L·H × d_model` token-dependent weights, when enabled.
    pub token_weights: Option<Matrix>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Lora,
    Gate,
    Beta,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::Lora, ParamGroup::Gate, ParamGroup::Beta];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Lora => "lora",
            ParamGroup::Gate => "gate",
            ParamGroup::Beta => "beta",
        }
    }
}

/// Trainable rule parameters `θ`. Also used as the container for gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaParams {
    pub lora: Vec<LayerLora>,
    pub gate: GateParams,
    pub beta: BetaParams,
}

/// Per-group parameter counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub lora: usize,
    pub gate: usize,
    pub beta: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.lora + self.gate + self.beta
    }

    pub fn group(&self, g: ParamGroup) -> usize {
        match g {
            ParamGroup::Lora => self.lora,
            ParamGroup::Gate => self.gate,
            ParamGroup::Beta => self.beta,
        }
    }
}

/// A borrowed view of one named tensor inside [`MetaParams`].
#[derive(Debug, Clone)]
pub struct TensorRef<'a> {
    pub group: ParamGroup,
    pub name: String,
    pub shape: [usize; 2],
    pub values: &'a [f64],
}

pub const BETA_LOGIT_INIT: f64 = -2.0;

impl MetaParams {
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let dm = config.d_model;
        let inner = config.inner_dim();
        let r = config.lora_rank;
        let lora = (0..config.layers)
            .map(|_| LayerLora {
                q: LoraPair::init(dm, inner, r, config.lora_alpha, rng),
                k: LoraPair::init(dm, inner, r, config.lora_alpha, rng),
                v: LoraPair::init(dm, inner, r, config.lora_alpha, rng),
            })
            .collect();
        let lh = config.layers * config.heads;
        let gate_len = match config.gate_mode {
            GateMode::Scalar => lh,
            GateMode::Vector => lh * config.head_dim,
        };
        Ok(Self {
            lora,
            gate: GateParams {
                mode: config.gate_mode,
                logits: vec![0.0; gate_len],
            },
            beta: BetaParams {
                logits: vec![BETA_LOGIT_INIT; lh],
                token_weights: config.per_token_beta.then(|| Matrix::zeros(lh, dm)),
            },
        })
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|_, v| v.iter_mut().for_each(|x| *x = 0.0));
        z
    }

    /// Ordered list of named tensors; the order is the flattening order.
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        for (l, layer) in self.lora.iter().enumerate() {
            for (p, pair) in [("q", &layer.q), ("k", &layer.k), ("v", &layer.v)] {
                out.push(TensorRef {
                    group: ParamGroup::Lora,
                    name: format!("layer{l}.{p}.lora_a"),
                    shape: [pair.a.rows(), pair.a.cols()],
                    values: pair.a.as_slice(),
                });
                out.push(TensorRef {
                    group: ParamGroup::Lora,
                    name: format!("layer{l}.{p}.lora_b"),
                    shape: [pair.b.rows(), pair.b.cols()],
                    values: pair.b.as_slice(),
                });
            }
        }
        out.push(TensorRef {
            group: ParamGroup::Gate,
            name: "gate.logits".into(),
            shape: [1, self.gate.logits.len()],
            values: &self.gate.logits,
        });
        out.push(TensorRef {
            group: ParamGroup::Beta,
            name: "beta.logits".into(),
            shape: [1, self.beta.logits.len()],
            values: &self.beta.logits,
        });
        if let Some(w) = &self.beta.token_weights {
            out.push(TensorRef {
                group: ParamGroup::Beta,
                name: "beta.token_weights".into(),
                shape: [w.rows(), w.cols()],
                values: w.as_slice(),
            });
        }
        out
    }

    /// Visits every tensor mutably in flattening order.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(ParamGroup, &mut [f64])) {
        for layer in &mut self.lora {
            for pair in [&mut layer.q, &mut layer.k, &mut layer.v] {
                f(ParamGroup::Lora, pair.a.as_mut_slice());
                f(ParamGroup::Lora, pair.b.as_mut_slice());
            }
        }
        f(ParamGroup::Gate, &mut self.gate.logits);
        f(ParamGroup::Beta, &mut self.beta.logits);
        if let Some(w) = &mut self.beta.token_weights {
            f(ParamGroup::Beta, w.as_mut_slice());
        }
    }

    /// Pairs each tensor of `self` with the congruent tensor of `other`.
    pub fn zip_mut(&mut self, other: &MetaParams, mut f: impl FnMut(ParamGroup, &mut [f64], &[f64])) {
        let theirs: Vec<&[f64]> = other.tensors().iter().map(|t| t.values).collect();
        let mut i = 0;
        self.for_each_mut(|g, mine| {
            f(g, mine, theirs[i]);
            i += 1;
        });
    }

    pub fn counts(&self) -> ParamCounts {
        let mut c = ParamCounts {
            lora: 0,
            gate: 0,
            beta: 0,
        };
        for t in self.tensors() {
            match t.group {
                ParamGroup::Lora => c.lora += t.values.len(),
                ParamGroup::Gate => c.gate += t.values.len(),
                ParamGroup::Beta => c.beta += t.values.len(),
            }
        }
        c
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|t| t.values.iter().copied())
            .collect()
    }

    /// Overwrites all values from a flat vector laid out as [`flatten`](Self::flatten).
    pub fn unflatten_from(&mut self, flat: &[f64]) -> Result<()> {
        let total = self.counts().total();
        if flat.len() != total {
            return Err(Error::Shape {
                op: "MetaParams::unflatten_from",
                left: format!("{total} parameters"),
                right: format!("{} values", flat.len()),
            });
        }
        let mut offset = 0;
        self.for_each_mut(|_, v| {
            v.copy_from_slice(&flat[offset..offset + v.len()]);
            offset += v.len();
        });
        Ok(())
    }

    pub fn is_congruent(&self, other: &MetaParams) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len()
            && a
                .iter()
                .zip(&b)
                .all(|(x, y)| x.name == y.name && x.shape == y.shape && x.group == y.group)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.values.iter().all(|v| v.is_finite()))
    }

    /// Global L2 norm over the given groups.
    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.values.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Exact per-group counts.
pub fn count_params(theta: &MetaParams) -> ParamCounts {
    theta.counts()
}

/// Analytic counts from a configuration, without building parameters.
pub fn expected_counts(config: &ModelConfig) -> ParamCounts {
    let lh = config.layers * config.heads;
    let lora = config.layers * 3 * config.lora_rank * (config.d_model + config.inner_dim());
    let gate = match config.gate_mode {
        GateMode::Scalar => lh,
        GateMode::Vector => lh * config.head_dim,
    };
    let beta = lh + if config.per_token_beta { lh * config.d_model } else { 0 };
    ParamCounts { lora, gate, beta }
}

/// How the memory gate is determined during a pass.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum GateOverride {
    #[default]
    Learned,
    /// Every head uses this fixed mixing weight and the gate is not trained.
    Pinned(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    pub rule: UpdateRule,
    pub window: usize,
    pub gate: GateOverride,
}

impl ForwardOptions {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            rule: UpdateRule::Delta,
            window: config.window,
            gate: GateOverride::Learned,
        }
    }

    pub fn with_rule(mut self, rule: UpdateRule) -> Self {
        self.rule = rule;
        self
    }

    pub fn with_gate(mut self, gate: GateOverride) -> Self {
        self.gate = gate;
        self
    }
}

/// Per-head activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct HeadTrace {
    /// Rows are tokens.
    pub q: Matrix,
    pub k_raw: Matrix,
    /// Keys as written to memory (normalized when enabled).
    pub k: Matrix,
    pub v: Matrix,
    pub beta: Vec<f64>,
    pub o_lin: Matrix,
    pub o_sm: Matrix,
    /// Softmax weights over `[t − len + 1, t]`.
    pub attn: Vec<Vec<f64>>,
    /// Mixing weights, one per channel.
    pub alpha: Vec<f64>,
    /// `S_0 … S_T`.
    pub trajectory: Vec<Matrix>,
}

#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Layer input, `T × d_model`.
    pub input: Matrix,
    /// Rank-space activations `A x` for q, k, v (`T × r`).
    pub ax: [Matrix; 3],
    pub heads: Vec<HeadTrace>,
}

/// Everything a forward pass computed.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub options: ForwardOptions,
    pub tokens: Vec<usize>,
    pub layers: Vec<LayerTrace>,
    /// Final residual, `T × d_model`.
    pub hidden: Matrix,
    /// `T × V`.
    pub logits: Matrix,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub(crate) fn check_tokens(tokens: &[usize], vocab: usize) -> Result<()> {
    if let Some((t, &tok)) = tokens.iter().enumerate().find(|(_, &tok)| tok >= vocab) {
        return Err(Error::contract(format!(
            "token {tok} at position {t} outside vocabulary of size {vocab}"
        )));
    }
    Ok(())
}

fn check_theta(backbone: &BackboneParams, theta: &MetaParams) -> Result<()> {
    let cfg = &backbone.config;
    let want = expected_counts(cfg);
    let mut got = theta.counts();
    if theta.beta.token_weights.is_some() != cfg.per_token_beta || theta.gate.mode != cfg.gate_mode {
        got.beta = usize::MAX;
    }
    if got != want || theta.lora.len() != cfg.layers {
        return Err(Error::Shape {
            op: "forward",
            left: format!("config expects {want:?}"),
            right: format!("theta has {:?}", theta.counts()),
        });
    }
    Ok(())
}

/// Mixing weights for layer `l`, head `h`.
pub(crate) fn head_alpha(
    theta: &MetaParams,
    cfg: &ModelConfig,
    gate: GateOverride,
    l: usize,
    h: usize,
) -> Vec<f64> {
    let d = cfg.head_dim;
    match gate {
        GateOverride::Pinned(a) => vec![a; d],
        GateOverride::Learned => match theta.gate.mode {
            GateMode::Scalar => vec![sigmoid(theta.gate.logits[l * cfg.heads + h]); d],
            GateMode::Vector => {
                let base = (l * cfg.heads + h) * d;
                theta.gate.logits[base..base + d].iter().map(|&g| sigmoid(g)).collect()
            }
        },
    }
}

pub(crate) fn beta_logit(theta: &MetaParams, cfg: &ModelConfig, l: usize, h: usize, x: &[f64]) -> f64 {
    let idx = l * cfg.heads + h;
    let mut z = theta.beta.logits[idx];
    if let Some(w) = &theta.beta.token_weights {
        z += dot(w.row(idx), x);
    }
    z
}

pub(crate) fn normalize(k: &[f64], enabled: bool) -> Vec<f64> {
    if !enabled {
        return k.to_vec();
    }
    let n = numerics::norm(k);
    if n == 0.0 {
        k.to_vec()
    } else {
        k.iter().map(|x| x / n).collect()
    }
}

/// Full-sequence forward pass retaining everything needed for BPTT.
pub fn forward(
    tokens: &[usize],
    backbone: &BackboneParams,
    theta: &MetaParams,
    options: ForwardOptions,
) -> Result<ForwardTrace> {
    let cfg = &backbone.config;
    check_tokens(tokens, cfg.vocab_size)?;
    check_theta(backbone, theta)?;
    if options.window < 1 {
        return Err(Error::contract("attention window must be at least 1"));
    }
    let t_len = tokens.len();
    let dm = cfg.d_model;
    let d = cfg.head_dim;
    let scale = 1.0 / (d as f64).sqrt();

    let mut x = Matrix::zeros(t_len, dm);
    for (t, &tok) in tokens.iter().enumerate() {
        x.row_mut(t).copy_from_slice(backbone.embedding.row(tok));
    }

    let mut layers = Vec::with_capacity(cfg.layers);
    for (l, (weights, lora)) in backbone.layers.iter().zip(&theta.lora).enumerate() {
        let r = lora.q.rank();
        let mut ys = [
            Matrix::zeros(t_len, cfg.inner_dim()),
            Matrix::zeros(t_len, cfg.inner_dim()),
            Matrix::zeros(t_len, cfg.inner_dim()),
        ];
        let mut ax = [
            Matrix::zeros(t_len, r),
            Matrix::zeros(t_len, r),
            Matrix::zeros(t_len, r),
        ];
        for t in 0..t_len {
            let xt = x.row(t);
            for (p, (w, pair)) in [(&weights.wq, &lora.q), (&weights.wk, &lora.k), (&weights.wv, &lora.v)]
                .into_iter()
                .enumerate()
            {
                let (y, a) = project(xt, w, pair);
                ys[p].row_mut(t).copy_from_slice(&y);
                ax[p].row_mut(t).copy_from_slice(&a);
            }
        }

        let mut concat = Matrix::zeros(t_len, cfg.inner_dim());
        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let cols = h * d..(h + 1) * d;
            let mut q = Matrix::zeros(t_len, d);
            let mut k_raw = Matrix::zeros(t_len, d);
            let mut k = Matrix::zeros(t_len, d);
            let mut v = Matrix::zeros(t_len, d);
            let mut beta = Vec::with_capacity(t_len);
            for t in 0..t_len {
                q.row_mut(t).copy_from_slice(&ys[0].row(t)[cols.clone()]);
                k_raw.row_mut(t).copy_from_slice(&ys[1].row(t)[cols.clone()]);
                v.row_mut(t).copy_from_slice(&ys[2].row(t)[cols.clone()]);
                let kn = normalize(k_raw.row(t), cfg.normalize_keys);
                k.row_mut(t).copy_from_slice(&kn);
                beta.push(sigmoid(beta_logit(theta, cfg, l, h, x.row(t))));
            }
            let alpha = head_alpha(theta, cfg, options.gate, l, h);

            let mut s = Matrix::zeros(d, d);
            let mut trajectory = Vec::with_capacity(t_len + 1);
            trajectory.push(s.clone());
            let mut o_lin = Matrix::zeros(t_len, d);
            let mut o_sm = Matrix::zeros(t_len, d);
            let mut attn = Vec::with_capacity(t_len);
            for t in 0..t_len {
                let step = WriteStep {
                    k: k.row(t).to_vec(),
                    v: v.row(t).to_vec(),
                    beta: beta[t],
                };
                memory::update_in_place(&mut s, &step, options.rule);
                o_lin.row_mut(t).copy_from_slice(&s.matvec_unchecked(q.row(t)));
                trajectory.push(s.clone());

                let start = (t + 1).saturating_sub(options.window);
                let scores: Vec<f64> = (start..=t).map(|j| scale * dot(q.row(t), k_raw.row(j))).collect();
                let p = numerics::softmax_unchecked(&scores);
                let out = o_sm.row_mut(t);
                for (offset, &pj) in p.iter().enumerate() {
                    numerics::axpy(pj, v.row(start + offset), out);
                }
                attn.push(p);

                let mix = &mut concat.row_mut(t)[cols.clone()];
                for i in 0..d {
                    mix[i] = alpha[i] * o_lin.get(t, i) + (1.0 - alpha[i]) * o_sm.get(t, i);
                }
            }
            heads.push(HeadTrace {
                q,
                k_raw,
                k,
                v,
                beta,
                o_lin,
                o_sm,
                attn,
                alpha,
                trajectory,
            });
        }

        let mut next = x.clone();
        for t in 0..t_len {
            let delta = weights.wo.matvec_unchecked(concat.row(t));
            numerics::axpy(1.0, &delta, next.row_mut(t));
        }
        layers.push(LayerTrace {
            input: x,
            ax,
            heads,
        });
        x = next;
    }

    let mut logits = Matrix::zeros(t_len, cfg.vocab_size);
    for t in 0..t_len {
        let row = backbone.head.matvec_unchecked(x.row(t));
        if !row.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                stage: "forward logits",
                layer: cfg.layers,
                token: t,
            });
        }
        logits.row_mut(t).copy_from_slice(&row);
    }
    Ok(ForwardTrace {
        options,
        tokens: tokens.to_vec(),
        layers,
        hidden: x,
        logits,
    })
}

/// Token-at-a-time inference keeping only the memory states and the softmax
/// window. Produces the same logits as [`forward`].
#[derive(Debug, Clone)]
pub struct StreamingModel<'a> {
    backbone: &'a BackboneParams,
    theta: &'a MetaParams,
    options: ForwardOptions,
    states: Vec<MemoryState>,
    /// Per (layer, head): last `W` raw keys and values.
    windows: Vec<VecDeque<(Vec<f64>, Vec<f64>)>>,
    alphas: Vec<Vec<f64>>,
    peak_bytes: usize,
    tokens_seen: usize,
}

impl<'a> StreamingModel<'a> {
    pub fn new(backbone: &'a BackboneParams, theta: &'a MetaParams, options: ForwardOptions) -> Result<Self> {
        check_theta(backbone, theta)?;
        if options.window < 1 {
            return Err(Error::contract("attention window must be at least 1"));
        }
        let cfg = &backbone.config;
        let lh = cfg.layers * cfg.heads;
        let alphas = (0..lh)
            .map(|i| head_alpha(theta, cfg, options.gate, i / cfg.heads, i % cfg.heads))
            .collect();
        let mut model = Self {
            backbone,
            theta,
            options,
            states: vec![MemoryState::zeros(cfg.head_dim, cfg.head_dim); lh],
            windows: vec![VecDeque::with_capacity(options.window); lh],
            alphas,
            peak_bytes: 0,
            tokens_seen: 0,
        };
        model.peak_bytes = model.resident_bytes();
        Ok(model)
    }

    /// Consumes one token and returns its logits.
    pub fn step(&mut self, token: usize) -> Result<Vec<f64>> {
        let cfg = &self.backbone.config;
        check_tokens(&[token], cfg.vocab_size)?;
        let d = cfg.head_dim;
        let scale = 1.0 / (d as f64).sqrt();
        let mut x = self.backbone.embedding.row(token).to_vec();
        for (l, (weights, lora)) in self.backbone.layers.iter().zip(&self.theta.lora).enumerate() {
            let (yq, _) = project(&x, &weights.wq, &lora.q);
            let (yk, _) = project(&x, &weights.wk, &lora.k);
            let (yv, _) = project(&x, &weights.wv, &lora.v);
            let mut concat = vec![0.0; cfg.inner_dim()];
            for h in 0..cfg.heads {
                let idx = l * cfg.heads + h;
                let cols = h * d..(h + 1) * d;
                let q = &yq[cols.clone()];
                let k_raw = yk[cols.clone()].to_vec();
                let v = yv[cols.clone()].to_vec();
                let beta = sigmoid(beta_logit(self.theta, cfg, l, h, &x));
                let step = WriteStep {
                    k: normalize(&k_raw, cfg.normalize_keys),
                    v: v.clone(),
                    beta,
                };
                memory::update_in_place(self.states[idx].matrix_mut(), &step, self.options.rule);
                let o_lin = memory::read(&self.states[idx], q)?;

                let window = &mut self.windows[idx];
                if window.len() == self.options.window {
                    window.pop_front();
                }
                window.push_back((k_raw, v));
                let scores: Vec<f64> = window.iter().map(|(kj, _)| scale * dot(q, kj)).collect();
                let p = numerics::softmax_unchecked(&scores);
                let mut o_sm = vec![0.0; d];
                for (pj, (_, vj)) in p.iter().zip(window.iter()) {
                    numerics::axpy(*pj, vj, &mut o_sm);
                }
                let alpha = &self.alphas[idx];
                for i in 0..d {
                    concat[h * d + i] = alpha[i] * o_lin[i] + (1.0 - alpha[i]) * o_sm[i];
                }
            }
            let delta = weights.wo.matvec_unchecked(&concat);
            numerics::axpy(1.0, &delta, &mut x);
        }
        self.tokens_seen += 1;
        self.peak_bytes = self.peak_bytes.max(self.resident_bytes());
        let logits = self.backbone.head.matvec_unchecked(&x);
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                stage: "streaming logits",
                layer: cfg.layers,
                token: self.tokens_seen - 1,
            });
        }
        Ok(logits)
    }

    /// Live bytes: memory states plus window buffers currently held.
    pub fn resident_bytes(&self) -> usize {
        let f = std::mem::size_of::<f64>();
        let states: usize = self.states.iter().map(MemoryState::byte_size).sum();
        let windows: usize = self
            .windows
            .iter()
            .map(|w| w.iter().map(|(k, v)| (k.len() + v.len()) * f).sum::<usize>())
            .sum();
        states + windows
    }

    pub fn peak_bytes(&self) -> usize {
        self.peak_bytes
    }

    pub fn tokens_seen(&self) -> usize {
        self.tokens_seen
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            d_model: 8,
            head_dim: 4,
            heads: 2,
            layers: 2,
            window: 3,
            lora_rank: 2,
            lora_alpha: 4.0,
            gate_mode: GateMode::Scalar,
            per_token_beta: true,
            normalize_keys: true,
        }
    }

    fn perturbed(cfg: &ModelConfig, seed: u64) -> MetaParams {
        let mut rng = Rng::new(seed);
        let mut theta = MetaParams::init(cfg, &mut rng).unwrap();
        theta.for_each_mut(|_, v| v.iter_mut().for_each(|x| *x += 0.3 * rng.normal()));
        theta
    }

    #[test]
    fn backbone_is_deterministic_and_counted() {
        let cfg = ModelConfig {
            vocab_size: 32,
            d_model: 32,
            head_dim: 16,
            heads: 2,
            layers: 1,
            ..ModelConfig::toy(32)
        };
        let a = init_backbone(&cfg, &mut Rng::new(1)).unwrap();
        let b = init_backbone(&cfg, &mut Rng::new(1)).unwrap();
        let c = init_backbone(&cfg, &mut Rng::new(2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.param_count(), 32 * 32 + 2 * 4 * 32 * 16 + 32 * 32);
        assert_eq!(a.param_count(), cfg.backbone_param_count());
    }

    #[test]
    fn adapted_projection_cases() {
        let mut rng = Rng::new(3);
        let w = Matrix::gaussian(5, 4, 1.0, &mut rng);
        let x: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let fresh = LoraPair::init(4, 5, 2, 4.0, &mut rng);
        assert_eq!(adapted_projection(&x, &w, &fresh).unwrap(), w.matvec(&x).unwrap());

        // Rank-1 by hand: W = 0, A = [1 0 0 0], B = [1 2 3 4 5]ᵀ, α/r = 2.
        let lora = LoraPair {
            a: Matrix::from_rows(&[&[1.0, 0.0, 0.0, 0.0]]).unwrap(),
            b: Matrix::from_vec(5, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(),
            alpha: 2.0,
        };
        let got = adapted_projection(&[3.0, 9.0, 9.0, 9.0], &Matrix::zeros(5, 4), &lora).unwrap();
        assert_eq!(got, vec![6.0, 12.0, 18.0, 24.0, 30.0]);

        let mut lora = LoraPair::init(4, 5, 3, 6.0, &mut rng);
        lora.b = Matrix::gaussian(5, 3, 1.0, &mut rng);
        let dense = lora.dense(&w).unwrap().matvec(&x).unwrap();
        let got = adapted_projection(&x, &w, &lora).unwrap();
        for (a, b) in got.iter().zip(&dense) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert!(adapted_projection(&x[..3], &w, &lora).is_err());
    }

    #[test]
    fn counts() {
        let mut rng = Rng::new(0);
        let pair = LoraPair::init(64, 64, 16, 32.0, &mut rng);
        assert_eq!(pair.param_count(), 2048);
        assert_eq!(LoraPair::init(64, 64, 1, 2.0, &mut rng).param_count(), 128);

        let cfg = ModelConfig {
            per_token_beta: false,
            ..tiny()
        };
        let theta = MetaParams::init(&cfg, &mut rng).unwrap();
        let c = count_params(&theta);
        assert_eq!(c.gate, cfg.layers * cfg.heads);
        assert_eq!(c, expected_counts(&cfg));
        let vec_cfg = ModelConfig {
            gate_mode: GateMode::Vector,
            ..tiny()
        };
        let theta = MetaParams::init(&vec_cfg, &mut rng).unwrap();
        assert_eq!(count_params(&theta), expected_counts(&vec_cfg));
        assert!(ModelConfig {
            lora_rank: 0,
            ..tiny()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn flatten_round_trip() {
        let theta = perturbed(&tiny(), 5);
        let flat = theta.flatten();
        let mut other = theta.zeros_like();
        other.unflatten_from(&flat).unwrap();
        assert_eq!(other, theta);
        assert!(other.unflatten_from(&flat[1..]).is_err());
    }

    #[test]
    fn fresh_lora_is_transparent() {
        let cfg = tiny();
        let mut rng = Rng::new(9);
        let bb = init_backbone(&cfg, &mut rng).unwrap();
        let theta = MetaParams::init(&cfg, &mut rng).unwrap();
        let mut bare = theta.clone();
        for layer in &mut bare.lora {
            for pair in [&mut layer.q, &mut layer.k, &mut layer.v] {
                pair.a = Matrix::zeros(pair.a.rows(), pair.a.cols());
            }
        }
        let tokens: Vec<usize> = (0..10).map(|_| rng.below(16)).collect();
        let opts = ForwardOptions::new(&cfg);
        let a = forward(&tokens, &bb, &theta, opts).unwrap();
        let b = forward(&tokens, &bb, &bare, opts).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn single_token_softmax_returns_value() {
        let cfg = tiny();
        let mut rng = Rng::new(4);
        let bb = init_backbone(&cfg, &mut rng).unwrap();
        let theta = perturbed(&cfg, 4);
        let trace = forward(&[7], &bb, &theta, ForwardOptions::new(&cfg)).unwrap();
        for head in &trace.layers[0].heads {
            assert_eq!(head.attn[0], vec![1.0]);
            assert_eq!(head.o_sm.row(0), head.v.row(0));
        }
    }

    #[test]
    fn closed_gate_matches_pinned_softmax() {
        let cfg = tiny();
        let mut rng = Rng::new(6);
        let bb = init_backbone(&cfg, &mut rng).unwrap();
        let mut theta = perturbed(&cfg, 6);
        theta.gate.logits.iter_mut().for_each(|g| *g = -1e9);
        let tokens: Vec<usize> = (0..12).map(|_| rng.below(16)).collect();
        let opts = ForwardOptions::new(&cfg);
        let closed = forward(&tokens, &bb, &theta, opts).unwrap();
        let pinned = forward(
            &tokens,
            &bb,
            &perturbed(&cfg, 6),
            opts.with_gate(GateOverride::Pinned(0.0)).with_rule(UpdateRule::Hebbian),
        )
        .unwrap();
        assert_eq!(closed.logits, pinned.logits);
    }

    #[test]
    fn gate_is_convex_combination() {
        let cfg = tiny();
        let mut rng = Rng::new(10);
        let bb = init_backbone(&cfg, &mut rng).unwrap();
        let theta = perturbed(&cfg, 10);
        let tokens: Vec<usize> = (0..9).map(|_| rng.below(16)).collect();
        let trace = forward(&tokens, &bb, &theta, ForwardOptions::new(&cfg)).unwrap();
        for head in &trace.layers[0].heads {
            let a = head.alpha[0];
            assert!(a > 0.0 && a < 1.0);
        }
        let lin = forward(
            &tokens,
            &bb,
            &theta,
            ForwardOptions::new(&cfg).with_gate(GateOverride::Pinned(1.0)),
        )
        .unwrap();
        // At α = 1 the first layer's mixed output is exactly the linear path.
        let wo = &bb.layers[0].wo;
        for t in 0..tokens.len() {
            let mut concat = Vec::new();
            for head in &lin.layers[0].heads {
                concat.extend_from_slice(head.o_lin.row(t));
            }
            let mut want = lin.layers[0].input.row(t).to_vec();
            numerics::axpy(1.0, &wo.matvec(&concat).unwrap(), &mut want);
            assert_eq!(lin.layers[1].input.row(t), &want[..]);
        }
    }

    #[test]
    fn causal() {
        let cfg = tiny();
        let mut rng = Rng::new(12);
        let bb = init_backbone(&cfg, &mut rng).unwrap();
        let theta = perturbed(&cfg, 12);
        let tokens: Vec<usize> = (0..15).map(|_| rng.below(16)).collect();
        let mut changed = tokens.clone();
        for tok in &mut changed[8..] {
            *tok = (*tok + 5) % 16;
        }
        let opts = ForwardOptions::new(&cfg);
        let a = forward(&tokens, &bb, &theta, opts).unwrap();
        let b = forward(&changed, &bb, &theta, opts).unwrap();
        for t in 0..8 {
            assert_eq!(a.logits.row(t), b.logits.row(t));
        }
        assert_ne!(a.logits.row(8), b.logits.row(8));
    }

    #[test]
    fn out_of_vocab_rejected() {
        let cfg = tiny();
        let mut rng = Rng::new(1);
        let bb = init_backbone(&cfg, &mut rng).unwrap();
        let theta = MetaParams::init(&cfg, &mut rng).unwrap();
        let err = forward(&[1, 16], &bb, &theta, ForwardOptions::new(&cfg)).unwrap_err();
        assert!(err.to_string().contains("position 1"));
    }

    #[test]
    fn streaming_matches_batch_and_is_bounded() {
        let cfg = tiny();
        let mut rng = Rng::new(13);
        let bb = init_backbone(&cfg, &mut rng).unwrap();
        let theta = perturbed(&cfg, 13);
        let tokens: Vec<usize> = (0..40).map(|_| rng.below(16)).collect();
        let opts = ForwardOptions::new(&cfg);
        let batch = forward(&tokens, &bb, &theta, opts).unwrap();
        let mut stream = StreamingModel::new(&bb, &theta, opts).unwrap();
        for (t, &tok) in tokens.iter().enumerate() {
            let logits = stream.step(tok).unwrap();
            for (a, b) in logits.iter().zip(batch.logits.row(t)) {
                assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
            }
        }
        let lh = cfg.layers * cfg.heads;
        let d = cfg.head_dim;
        assert_eq!(stream.peak_bytes(), lh * (d * d + cfg.window * 2 * d) * 8);
    }
}
