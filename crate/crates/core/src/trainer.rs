//! Rule learning: task loss, reverse-mode gradients through the memory
//! trajectory, and the local optimizer.
//!
//! The memory adjoint `G_t = ∂L/∂S_t` is carried backwards in time:
//!
//! ```text
//! G_t     += ∂L/∂o_t · q_tᵀ                       (read at t)
//! G_{t−1}  = G_t (I − β_t k_t k_tᵀ)               (delta transition)
//! ∂L/∂v_t  = β_t G_t k_t
//! ∂L/∂β_t  = (v_t − S_{t−1} k_t) · G_t k_t
//! ∂L/∂k_t  = β_t (G_tᵀ (v_t − S_{t−1} k_t) − S_{t−1}ᵀ G_t k_t)
//! ```
//!
//! For the Hebbian rule the transition is the identity and the write is
//! `β v kᵀ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::UpdateRule;
use crate::model::{self, BackboneParams, ForwardOptions, ForwardTrace, GateMode, GateOverride, MetaParams, ParamGroup};
use crate::numerics::{self, axpy, dot, Matrix, Rng};

/// Gradients, shape-congruent with [`MetaParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet(pub MetaParams);

impl GradientSet {
    pub fn zeros_like(theta: &MetaParams) -> Self {
        Self(theta.zeros_like())
    }

    pub fn params(&self) -> &MetaParams {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.0.flatten()
    }

    pub fn add_scaled(&mut self, s: f64, other: &GradientSet) {
        self.0.zip_mut(&other.0, |_, mine, theirs| axpy(s, theirs, mine));
    }

    pub fn scale(&mut self, s: f64) {
        self.0.for_each_mut(|_, v| v.iter_mut().for_each(|x| *x *= s));
    }

    /// Zeroes every group for which `keep` is false.
    pub fn mask(&mut self, keep: impl Fn(ParamGroup) -> bool) {
        self.0.for_each_mut(|g, v| {
            if !keep(g) {
                v.iter_mut().for_each(|x| *x = 0.0);
            }
        });
    }
}

/// Whether the memory adjoint is propagated through time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BpttMode {
    #[default]
    Full,
    /// Drops the recursive term: each write only receives gradient from the
    /// read at the same step.
    DirectOnly,
}

fn check_lengths(trace: &ForwardTrace, targets: &[usize], mask: &[bool]) -> Result<usize> {
    if targets.len() != trace.len() || mask.len() != trace.len() {
        return Err(Error::contract(format!(
            "trace has {} positions but {} targets and {} mask entries",
            trace.len(),
            targets.len(),
            mask.len()
        )));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::contract("loss mask selects no positions"));
    }
    let vocab = trace.logits.cols();
    for (t, (&y, &m)) in targets.iter().zip(mask).enumerate() {
        if m && y >= vocab {
            return Err(Error::contract(format!("target {y} at position {t} outside vocabulary")));
        }
    }
    Ok(n)
}

/// Mean cross-entropy over masked positions.
pub fn task_loss(trace: &ForwardTrace, targets: &[usize], mask: &[bool]) -> Result<f64> {
    let n = check_lengths(trace, targets, mask)?;
    let mut total = 0.0;
    for t in 0..trace.len() {
        if mask[t] {
            total += numerics::cross_entropy_unchecked(trace.logits.row(t), targets[t]);
        }
    }
    Ok(total / n as f64)
}

/// `∂L/∂logits` for the masked mean cross-entropy.
fn logit_grads(trace: &ForwardTrace, targets: &[usize], mask: &[bool]) -> Result<Matrix> {
    let n = check_lengths(trace, targets, mask)?;
    let mut g = Matrix::zeros(trace.len(), trace.logits.cols());
    for t in 0..trace.len() {
        if !mask[t] {
            continue;
        }
        let p = numerics::softmax_unchecked(trace.logits.row(t));
        let row = g.row_mut(t);
        for (i, pi) in p.into_iter().enumerate() {
            row[i] = pi / n as f64;
        }
        row[targets[t]] -= 1.0 / n as f64;
    }
    Ok(g)
}

/// `dL/dθ` for the masked mean cross-entropy of `trace`.
pub fn backward(
    trace: &ForwardTrace,
    targets: &[usize],
    mask: &[bool],
    backbone: &BackboneParams,
    theta: &MetaParams,
) -> Result<GradientSet> {
    backward_with(trace, targets, mask, backbone, theta, BpttMode::Full)
}

pub fn backward_with(
    trace: &ForwardTrace,
    targets: &[usize],
    mask: &[bool],
    backbone: &BackboneParams,
    theta: &MetaParams,
    mode: BpttMode,
) -> Result<GradientSet> {
    let cfg = &backbone.config;
    let t_len = trace.len();
    let d = cfg.head_dim;
    let dm = cfg.d_model;
    let scale = 1.0 / (d as f64).sqrt();
    let opts = trace.options;
    let mut grads = GradientSet::zeros_like(theta);

    let dlogits = logit_grads(trace, targets, mask)?;
    // ∂L/∂h for the current layer output.
    let mut dh = Matrix::zeros(t_len, dm);
    for t in 0..t_len {
        backbone.head.t_matvec_acc(dlogits.row(t), dh.row_mut(t));
    }

    for l in (0..cfg.layers).rev() {
        let layer = &trace.layers[l];
        let weights = &backbone.layers[l];
        let lora = &theta.lora[l];
        // Residual path.
        let mut dx = dh.clone();
        let mut dys = [
            Matrix::zeros(t_len, cfg.inner_dim()),
            Matrix::zeros(t_len, cfg.inner_dim()),
            Matrix::zeros(t_len, cfg.inner_dim()),
        ];
        let mut dconcat = Matrix::zeros(t_len, cfg.inner_dim());
        for t in 0..t_len {
            weights.wo.t_matvec_acc(dh.row(t), dconcat.row_mut(t));
        }

        for (h, head) in layer.heads.iter().enumerate() {
            let cols = h * d..(h + 1) * d;
            let idx = l * cfg.heads + h;
            let mut dq = Matrix::zeros(t_len, d);
            let mut dk_raw = Matrix::zeros(t_len, d);
            let mut dk = Matrix::zeros(t_len, d);
            let mut dv = Matrix::zeros(t_len, d);
            let mut do_lin = Matrix::zeros(t_len, d);
            let mut dbeta = vec![0.0; t_len];

            // Gate and path split.
            for t in 0..t_len {
                let dout = &dconcat.row(t)[cols.clone()];
                for i in 0..d {
                    let a = head.alpha[i];
                    do_lin.set(t, i, a * dout[i]);
                }
                if let GateOverride::Learned = opts.gate {
                    let gate = &mut grads.0.gate.logits;
                    for i in 0..d {
                        let a = head.alpha[i];
                        let dalpha = dout[i] * (head.o_lin.get(t, i) - head.o_sm.get(t, i));
                        let gidx = match theta.gate.mode {
                            GateMode::Scalar => idx,
                            GateMode::Vector => idx * d + i,
                        };
                        gate[gidx] += dalpha * a * (1.0 - a);
                    }
                }

                // Windowed softmax path.
                let p = &head.attn[t];
                let start = t + 1 - p.len();
                let dsm: Vec<f64> = (0..d).map(|i| (1.0 - head.alpha[i]) * dout[i]).collect();
                if dsm.iter().all(|&x| x == 0.0) {
                    continue;
                }
                let dp: Vec<f64> = (0..p.len()).map(|j| dot(&dsm, head.v.row(start + j))).collect();
                let mean: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for (j, (&pj, &dpj)) in p.iter().zip(&dp).enumerate() {
                    let tj = start + j;
                    axpy(pj, &dsm, dv.row_mut(tj));
                    let ds = pj * (dpj - mean) * scale;
                    if ds != 0.0 {
                        axpy(ds, head.k_raw.row(tj), dq.row_mut(t));
                        axpy(ds, head.q.row(t), dk_raw.row_mut(tj));
                    }
                }
            }

            // Linear path, reverse time.
            let mut g = Matrix::zeros(d, d);
            for t in (0..t_len).rev() {
                let dol = do_lin.row(t);
                let s_t = &head.trajectory[t + 1];
                s_t.t_matvec_acc(dol, dq.row_mut(t));
                g.add_outer(1.0, dol, head.q.row(t));

                let s_prev = &head.trajectory[t];
                let k = head.k.row(t);
                let v = head.v.row(t);
                let beta = head.beta[t];
                let u = g.matvec_unchecked(k);
                match opts.rule {
                    UpdateRule::Delta => {
                        let sk = s_prev.matvec_unchecked(k);
                        let e: Vec<f64> = v.iter().zip(&sk).map(|(a, b)| a - b).collect();
                        dbeta[t] = dot(&e, &u);
                        axpy(beta, &u, dv.row_mut(t));
                        let gte = g.t_matvec_unchecked(&e);
                        let stu = s_prev.t_matvec_unchecked(&u);
                        let dkr = dk.row_mut(t);
                        for i in 0..d {
                            dkr[i] += beta * (gte[i] - stu[i]);
                        }
                        g.add_outer(-beta, &u, k);
                    }
                    UpdateRule::Hebbian => {
                        dbeta[t] = dot(v, &u);
                        axpy(beta, &u, dv.row_mut(t));
                        let gtv = g.t_matvec_unchecked(v);
                        axpy(beta, &gtv, dk.row_mut(t));
                    }
                }
                if mode == BpttMode::DirectOnly {
                    g.as_mut_slice().iter_mut().for_each(|x| *x = 0.0);
                }
            }

            for t in 0..t_len {
                // Key normalization.
                let kr = dk_raw.row_mut(t);
                if cfg.normalize_keys {
                    let raw = head.k_raw.row(t);
                    let n = numerics::norm(raw);
                    if n > 0.0 {
                        let kh = head.k.row(t);
                        let dkh = dk.row(t);
                        let proj = dot(kh, dkh);
                        for i in 0..d {
                            kr[i] += (dkh[i] - kh[i] * proj) / n;
                        }
                    }
                } else {
                    axpy(1.0, dk.row(t), kr);
                }

                // Write strength.
                let b = head.beta[t];
                let dz = dbeta[t] * b * (1.0 - b);
                grads.0.beta.logits[idx] += dz;
                if let (Some(gw), Some(w)) = (&mut grads.0.beta.token_weights, &theta.beta.token_weights) {
                    axpy(dz, layer.input.row(t), gw.row_mut(idx));
                    axpy(dz, w.row(idx), dx.row_mut(t));
                }

                dys[0].row_mut(t)[cols.clone()].copy_from_slice(dq.row(t));
                dys[1].row_mut(t)[cols.clone()].copy_from_slice(dk_raw.row(t));
                dys[2].row_mut(t)[cols.clone()].copy_from_slice(dv.row(t));
            }
        }

        // Adapted projections.
        let glora = &mut grads.0.lora[l];
        for (p, (w, pair, gpair)) in [
            (&weights.wq, &lora.q, &mut glora.q),
            (&weights.wk, &lora.k, &mut glora.k),
            (&weights.wv, &lora.v, &mut glora.v),
        ]
        .into_iter()
        .enumerate()
        {
            let s = pair.scale();
            for t in 0..t_len {
                let dy = dys[p].row(t);
                if !dy.iter().all(|x| x.is_finite()) {
                    return Err(Error::NonFinite {
                        stage: "backward projection",
                        layer: l,
                        token: t,
                    });
                }
                let ax = layer.ax[p].row(t);
                gpair.b.add_outer(s, dy, ax);
                let btdy = pair.b.t_matvec_unchecked(dy);
                gpair.a.add_outer(s, &btdy, layer.input.row(t));
                let dxt = dx.row_mut(t);
                w.t_matvec_acc(dy, dxt);
                let at = pair.a.t_matvec_unchecked(&btdy);
                axpy(s, &at, dxt);
            }
        }
        dh = dx;
    }

    if !grads.0.is_finite() {
        return Err(Error::NonFinite {
            stage: "backward gradients",
            layer: 0,
            token: 0,
        });
    }
    Ok(grads)
}

/// One training sequence: inputs, next-token targets and the loss mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

impl Sequence {
    /// Next-token targets at every position but the last.
    pub fn language_model(tokens: Vec<usize>) -> Self {
        let n = tokens.len();
        let mut targets: Vec<usize> = tokens.iter().skip(1).copied().collect();
        targets.push(0);
        let mut mask = vec![true; n];
        if let Some(last) = mask.last_mut() {
            *last = false;
        }
        Self { tokens, targets, mask }
    }

    /// Loss only on the final position, whose target is `answer`.
    pub fn answer_only(tokens: Vec<usize>, answer: usize) -> Self {
        let n = tokens.len();
        let mut targets: Vec<usize> = tokens.iter().skip(1).copied().collect();
        targets.push(answer);
        let mut mask = vec![false; n];
        if let Some(last) = mask.last_mut() {
            *last = true;
        }
        Self { tokens, targets, mask }
    }
}

/// Forward + loss + backward for one sequence.
pub fn loss_and_grad(
    seq: &Sequence,
    backbone: &BackboneParams,
    theta: &MetaParams,
    options: ForwardOptions,
) -> Result<(f64, GradientSet)> {
    let trace = model::forward(&seq.tokens, backbone, theta, options)?;
    let loss = task_loss(&trace, &seq.targets, &seq.mask)?;
    let grads = backward(&trace, &seq.targets, &seq.mask, backbone, theta)?;
    Ok((loss, grads))
}

pub fn sequence_loss(
    seq: &Sequence,
    backbone: &BackboneParams,
    theta: &MetaParams,
    options: ForwardOptions,
) -> Result<f64> {
    let trace = model::forward(&seq.tokens, backbone, theta, options)?;
    task_loss(&trace, &seq.targets, &seq.mask)
}

/// Local optimizer: SGD, optionally with a proximal pull towards an anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    /// Proximal coefficient; `0` is plain SGD.
    pub mu: f64,
    pub anchor: Option<MetaParams>,
    /// Clip the global gradient norm to this value when set.
    pub clip_norm: Option<f64>,
    pub step: usize,
}

impl OptimizerState {
    pub fn sgd(lr: f64) -> Self {
        Self {
            lr,
            mu: 0.0,
            anchor: None,
            clip_norm: None,
            step: 0,
        }
    }

    pub fn fedprox(lr: f64, mu: f64, anchor: MetaParams) -> Self {
        Self {
            lr,
            mu,
            anchor: Some(anchor),
            clip_norm: None,
            step: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::contract(format!("learning rate {} must be non-negative", self.lr)));
        }
        if !(self.mu.is_finite() && self.mu >= 0.0) {
            return Err(Error::contract(format!("proximal coefficient {} must be non-negative", self.mu)));
        }
        Ok(())
    }
}

/// `θ' = θ − lr·(g + μ·(θ − θ_anchor))`.
pub fn sgd_step(theta: &MetaParams, grads: &GradientSet, opt: &mut OptimizerState) -> Result<MetaParams> {
    if !theta.is_congruent(&grads.0) {
        return Err(Error::contract("gradient set is not congruent with parameters"));
    }
    let mut g = grads.clone();
    if let Some(max) = opt.clip_norm {
        let n = g.norm();
        if n > max {
            g.scale(max / n);
        }
    }
    let mut next = theta.clone();
    next.zip_mut(&g.0, |_, p, gv| {
        for (x, &gx) in p.iter_mut().zip(gv) {
            *x -= opt.lr * gx;
        }
    });
    if opt.mu > 0.0 {
        if let Some(anchor) = &opt.anchor {
            let lr_mu = opt.lr * opt.mu;
            let theta_vals: Vec<Vec<f64>> = theta.tensors().iter().map(|t| t.values.to_vec()).collect();
            let mut i = 0;
            next.zip_mut(anchor, |_, p, a| {
                for ((x, &t), &av) in p.iter_mut().zip(&theta_vals[i]).zip(a) {
                    *x -= lr_mu * (t - av);
                }
                i += 1;
            });
        }
    }
    opt.step += 1;
    Ok(next)
}

/// Which parameter groups a run may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub lora: bool,
    pub gate: bool,
    pub beta: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable {
        lora: true,
        gate: true,
        beta: true,
    };

    pub fn allows(&self, g: ParamGroup) -> bool {
        match g {
            ParamGroup::Lora => self.lora,
            ParamGroup::Gate => self.gate,
            ParamGroup::Beta => self.beta,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub options: ForwardOptions,
    pub trainable: Trainable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalMetrics {
    /// Mean training loss over the dataset before any update.
    pub initial_loss: f64,
    /// Mean training loss over the dataset after the last update.
    pub final_loss: f64,
    pub steps: Vec<StepRecord>,
}

fn mean_loss(
    data: &[Sequence],
    backbone: &BackboneParams,
    theta: &MetaParams,
    options: ForwardOptions,
) -> Result<f64> {
    let mut total = 0.0;
    for seq in data {
        total += sequence_loss(seq, backbone, theta, options)?;
    }
    Ok(total / data.len() as f64)
}

/// Level-1 loop: `epochs` passes of minibatch SGD. Memory starts from zero for
/// every sequence. Batch order is shuffled from `rng`.
pub fn train_local(
    client: usize,
    data: &[Sequence],
    theta0: &MetaParams,
    cfg: &LocalTrainConfig,
    opt: &mut OptimizerState,
    backbone: &BackboneParams,
    rng: &mut Rng,
) -> Result<(MetaParams, LocalMetrics)> {
    if data.is_empty() {
        return Err(Error::contract(format!("client {client} has no training data")));
    }
    opt.validate()?;
    let batch = cfg.batch_size.max(1);
    let initial_loss = mean_loss(data, backbone, theta0, cfg.options)?;
    let mut theta = theta0.clone();
    let mut steps = Vec::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch) {
            let mut acc = GradientSet::zeros_like(&theta);
            let mut loss = 0.0;
            for &i in chunk {
                let (l, g) = loss_and_grad(&data[i], backbone, &theta, cfg.options)?;
                loss += l;
                acc.add_scaled(1.0, &g);
            }
            let inv = 1.0 / chunk.len() as f64;
            acc.scale(inv);
            loss *= inv;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    client,
                    epoch,
                    step: steps.len(),
                    loss,
                });
            }
            acc.mask(|g| cfg.trainable.allows(g));
            let grad_norm = acc.norm();
            theta = sgd_step(&theta, &acc, opt)?;
            steps.push(StepRecord {
                step: steps.len(),
                loss,
                grad_norm,
            });
        }
    }
    let final_loss = if cfg.epochs == 0 {
        initial_loss
    } else {
        mean_loss(data, backbone, &theta, cfg.options)?
    };
    if !final_loss.is_finite() || !theta.is_finite() {
        return Err(Error::Divergence {
            client,
            epoch: cfg.epochs,
            step: steps.len(),
            loss: final_loss,
        });
    }
    Ok((
        theta,
        LocalMetrics {
            initial_loss,
            final_loss,
            steps,
        },
    ))
}

/// Result of comparing analytic gradients against central differences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

/// Central finite differences of the sequence loss w.r.t. every coordinate of
/// `θ`, compared with [`backward`]. The relative error is
/// `|a − f| / (|a| + |f| + 1e-8)`.
pub fn grad_check(
    seq: &Sequence,
    backbone: &BackboneParams,
    theta: &MetaParams,
    options: ForwardOptions,
    h: f64,
) -> Result<GradCheckReport> {
    let (_, grads) = loss_and_grad(seq, backbone, theta, options)?;
    let analytic = grads.flatten();
    let base = theta.flatten();
    let mut probe = theta.clone();
    let mut worst = (0.0f64, 0usize);
    let mut flat = base.clone();
    for i in 0..base.len() {
        flat[i] = base[i] + h;
        probe.unflatten_from(&flat)?;
        let plus = sequence_loss(seq, backbone, &probe, options)?;
        flat[i] = base[i] - h;
        probe.unflatten_from(&flat)?;
        let minus = sequence_loss(seq, backbone, &probe, options)?;
        flat[i] = base[i];
        let fd = (plus - minus) / (2.0 * h);
        let rel = (analytic[i] - fd).abs() / (analytic[i].abs() + fd.abs() + 1e-8);
        if rel > worst.0 {
            worst = (rel, i);
        }
    }
    Ok(GradCheckReport {
        coordinates: base.len(),
        max_rel_error: worst.0,
        worst_index: worst.1,
    })
}
