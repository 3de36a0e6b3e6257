//! Delta-rule associative memory: the per-token inner loop.
//!
//! A [`MemoryState`] is a `d_v × d_k` matrix `S` mapping keys to values. Each
//! token writes `(k, v)` with strength `β`:
//!
//! ```text
//! delta:    S ← S + β (v − S k) kᵀ   = S (I − β k kᵀ) + β v kᵀ
//! hebbian:  S ← S + β v kᵀ
//! ```
//!
//! The delta write is exactly one gradient step of size `β` on
//! `½‖S k − v‖²`. Reads are `o = S q`.
//!
//! [`chunkwise_forward`] evaluates the same recurrence as a boundary-state
//! recurrence over chunks plus a triangular intra-chunk solve, and must agree
//! with [`sequential_forward`] to rounding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, dot, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryState {
    s: Matrix,
}

impl MemoryState {
    /// `S₀ = 0`.
    pub fn zeros(d_k: usize, d_v: usize) -> Self {
        Self {
            s: Matrix::zeros(d_v, d_k),
        }
    }

    pub fn from_matrix(s: Matrix) -> Self {
        Self { s }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.s
    }

    pub(crate) fn matrix_mut(&mut self) -> &mut Matrix {
        &mut self.s
    }

    pub fn into_matrix(self) -> Matrix {
        self.s
    }

    pub fn d_k(&self) -> usize {
        self.s.cols()
    }

    pub fn d_v(&self) -> usize {
        self.s.rows()
    }

    /// Resident bytes of the state; depends only on the shape.
    pub fn byte_size(&self) -> usize {
        self.s.len() * std::mem::size_of::<f64>()
    }
}

/// One memory write: key, value, and write strength.
#[derive(Debug, Clone, PartialEq)]
pub struct WriteStep {
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub beta: f64,
}

impl WriteStep {
    /// Builds a step with the key used as given. `beta` must lie in `[0, 1]`.
    pub fn new(k: Vec<f64>, v: Vec<f64>, beta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::contract(format!("write strength {beta} outside [0, 1]")));
        }
        if !k.iter().chain(&v).all(|x| x.is_finite()) {
            return Err(Error::contract("non-finite key or value"));
        }
        Ok(Self { k, v, beta })
    }

    /// Builds a step with the key L2-normalized. A zero key stays zero.
    pub fn normalized(k: Vec<f64>, v: Vec<f64>, beta: f64) -> Result<Self> {
        let n = numerics::norm(&k);
        let k = if n > 0.0 {
            k.into_iter().map(|x| x / n).collect()
        } else {
            k
        };
        Self::new(k, v, beta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    #[default]
    Delta,
    Hebbian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkPlan {
    chunk_size: usize,
    len: usize,
}

impl ChunkPlan {
    pub fn new(chunk_size: usize, len: usize) -> Result<Self> {
        if chunk_size < 1 {
            return Err(Error::contract("chunk size must be at least 1"));
        }
        if len > 0 && chunk_size > len {
            return Err(Error::contract(format!(
                "chunk size {chunk_size} exceeds sequence length {len}"
            )));
        }
        Ok(Self { chunk_size, len })
    }

    pub fn chunk_size(&self) -> usize {
        self.chunk_size
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn num_chunks(&self) -> usize {
        self.len.div_ceil(self.chunk_size)
    }

    /// Half-open token ranges of each chunk.
    pub fn chunks(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        (0..self.num_chunks()).map(move |b| {
            let start = b * self.chunk_size;
            start..(start + self.chunk_size).min(self.len)
        })
    }
}

fn check_step(s: &MemoryState, step: &WriteStep, op: &'static str) -> Result<()> {
    if step.k.len() != s.d_k() || step.v.len() != s.d_v() {
        return Err(Error::Shape {
            op,
            left: format!("state {}", s.s.shape_str()),
            right: format!("k {}, v {}", step.k.len(), step.v.len()),
        });
    }
    Ok(())
}

/// `½‖S k − v‖² + (1/2η)‖S − S_prev‖²_F`.
pub fn memory_loss(s: &MemoryState, step: &WriteStep, s_prev: &MemoryState, eta: f64) -> Result<f64> {
    check_step(s, step, "memory_loss")?;
    if s.s.shape() != s_prev.s.shape() {
        return Err(Error::Shape {
            op: "memory_loss",
            left: s.s.shape_str(),
            right: s_prev.s.shape_str(),
        });
    }
    if !(eta > 0.0) {
        return Err(Error::contract(format!("memory loss step size {eta} must be positive")));
    }
    let sk = s.s.matvec_unchecked(&step.k);
    let recon: f64 = sk.iter().zip(&step.v).map(|(a, b)| (a - b) * (a - b)).sum();
    let prox: f64 = s
        .s
        .as_slice()
        .iter()
        .zip(s_prev.s.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(0.5 * recon + prox / (2.0 * eta))
}

/// `S + β (v − S k) kᵀ`.
pub fn delta_update(s: &MemoryState, step: &WriteStep) -> Result<MemoryState> {
    check_step(s, step, "delta_update")?;
    let mut next = s.clone();
    delta_in_place(&mut next.s, step);
    Ok(next)
}

/// `S + β v kᵀ`.
pub fn hebbian_update(s: &MemoryState, step: &WriteStep) -> Result<MemoryState> {
    check_step(s, step, "hebbian_update")?;
    let mut next = s.clone();
    next.s.add_outer(step.beta, &step.v, &step.k);
    Ok(next)
}

pub fn update(s: &MemoryState, step: &WriteStep, rule: UpdateRule) -> Result<MemoryState> {
    match rule {
        UpdateRule::Delta => delta_update(s, step),
        UpdateRule::Hebbian => hebbian_update(s, step),
    }
}

pub(crate) fn delta_in_place(s: &mut Matrix, step: &WriteStep) {
    let sk = s.matvec_unchecked(&step.k);
    let err: Vec<f64> = step.v.iter().zip(&sk).map(|(v, p)| v - p).collect();
    s.add_outer(step.beta, &err, &step.k);
}

pub(crate) fn update_in_place(s: &mut Matrix, step: &WriteStep, rule: UpdateRule) {
    match rule {
        UpdateRule::Delta => delta_in_place(s, step),
        UpdateRule::Hebbian => s.add_outer(step.beta, &step.v, &step.k),
    }
}

/// `o = S q`.
pub fn read(s: &MemoryState, q: &[f64]) -> Result<Vec<f64>> {
    if q.len() != s.d_k() {
        return Err(Error::Shape {
            op: "read",
            left: format!("state {}", s.s.shape_str()),
            right: format!("q {}", q.len()),
        });
    }
    Ok(s.s.matvec_unchecked(q))
}

/// `∂S_t/∂S_{t−1}` acting on rows of `S`: `I − β k kᵀ` (`d_k × d_k`).
pub fn transition_jacobian(step: &WriteStep) -> Matrix {
    let d = step.k.len();
    let mut w = Matrix::identity(d);
    w.add_outer(-step.beta, &step.k, &step.k);
    w
}

/// Output of [`sequential_forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct SequentialOutput {
    pub outputs: Vec<Vec<f64>>,
    /// `S_0 … S_T`.
    pub trajectory: Vec<MemoryState>,
}

/// Token-by-token recurrence: `S_t = update(S_{t−1}, step_t)`, `o_t = S_t q_t`.
pub fn sequential_forward(
    s0: &MemoryState,
    steps: &[WriteStep],
    queries: &[Vec<f64>],
    rule: UpdateRule,
) -> Result<SequentialOutput> {
    check_stream(s0, steps, queries)?;
    let mut trajectory = Vec::with_capacity(steps.len() + 1);
    trajectory.push(s0.clone());
    let mut outputs = Vec::with_capacity(steps.len());
    let mut s = s0.s.clone();
    for (step, q) in steps.iter().zip(queries) {
        update_in_place(&mut s, step, rule);
        outputs.push(s.matvec_unchecked(q));
        trajectory.push(MemoryState { s: s.clone() });
    }
    Ok(SequentialOutput {
        outputs,
        trajectory,
    })
}

fn check_stream(s0: &MemoryState, steps: &[WriteStep], queries: &[Vec<f64>]) -> Result<()> {
    if steps.len() != queries.len() {
        return Err(Error::contract(format!(
            "{} write steps but {} queries",
            steps.len(),
            queries.len()
        )));
    }
    for (t, (step, q)) in steps.iter().zip(queries).enumerate() {
        if step.k.len() != s0.d_k() || step.v.len() != s0.d_v() || q.len() != s0.d_k() {
            return Err(Error::contract(format!(
                "shape mismatch at t={t}: state {}, k {}, v {}, q {}",
                s0.s.shape_str(),
                step.k.len(),
                step.v.len(),
                q.len()
            )));
        }
    }
    Ok(())
}

/// Streaming reader/writer holding a single state; memory use is independent
/// of how many tokens have been processed.
#[derive(Debug, Clone)]
pub struct StreamingMemory {
    state: MemoryState,
    rule: UpdateRule,
    tokens_seen: usize,
}

impl StreamingMemory {
    pub fn new(s0: MemoryState, rule: UpdateRule) -> Self {
        Self {
            state: s0,
            rule,
            tokens_seen: 0,
        }
    }

    /// Writes one step and returns `S_t q`.
    pub fn step(&mut self, step: &WriteStep, q: &[f64]) -> Result<Vec<f64>> {
        check_step(&self.state, step, "StreamingMemory::step")?;
        update_in_place(&mut self.state.s, step, self.rule);
        self.tokens_seen += 1;
        read(&self.state, q)
    }

    pub fn state(&self) -> &MemoryState {
        &self.state
    }

    pub fn tokens_seen(&self) -> usize {
        self.tokens_seen
    }

    pub fn resident_bytes(&self) -> usize {
        self.state.byte_size()
    }
}

/// Chunk-wise evaluation of the delta recurrence.
///
/// Per chunk `[i, j]`:
/// * intra-chunk: pseudo-values `u_τ = β_τ (v_τ − Σ_{σ<τ} (k_σ·k_τ) u_σ)` from a
///   unit-lower-triangular solve, giving the zero-init local state
///   `S̃_t = Σ_{τ≤t} u_τ k_τᵀ` and local outputs `Σ_{τ≤t} (k_τ·q_t) u_τ`;
/// * history: `(S_{b−1} P_t) q_t` with `P_t = W_i ⋯ W_t`, `W_τ = I − β_τ k_τ k_τᵀ`;
/// * boundary: `S_b = S_{b−1} P_j + S̃_j`.
pub fn chunkwise_forward(
    s0: &MemoryState,
    steps: &[WriteStep],
    queries: &[Vec<f64>],
    plan: ChunkPlan,
) -> Result<Vec<Vec<f64>>> {
    if plan.len() != steps.len() {
        return Err(Error::contract(format!(
            "chunk plan covers {} tokens but {} steps given",
            plan.len(),
            steps.len()
        )));
    }
    check_stream(s0, steps, queries)?;
    let d_k = s0.d_k();
    let d_v = s0.d_v();
    let mut boundary = s0.s.clone();
    let mut outputs = Vec::with_capacity(steps.len());

    for range in plan.chunks() {
        let chunk = &steps[range.clone()];
        let qs = &queries[range];
        let c = chunk.len();

        // Gram matrix of keys within the chunk.
        let mut gram = vec![0.0; c * c];
        for a in 0..c {
            for b in 0..a {
                gram[a * c + b] = dot(&chunk[a].k, &chunk[b].k);
            }
        }
        // Forward substitution for the pseudo-values.
        let mut u: Vec<Vec<f64>> = Vec::with_capacity(c);
        for tau in 0..c {
            let mut acc = chunk[tau].v.clone();
            for (sigma, u_sigma) in u.iter().enumerate() {
                numerics::axpy(-gram[tau * c + sigma], u_sigma, &mut acc);
            }
            for x in &mut acc {
                *x *= chunk[tau].beta;
            }
            u.push(acc);
        }

        let mut decay = Matrix::identity(d_k);
        for t in 0..c {
            let w = transition_jacobian(&chunk[t]);
            decay = numerics::matmul(&decay, &w)?;
            let history_query = decay.matvec_unchecked(&qs[t]);
            let mut o = boundary.matvec_unchecked(&history_query);
            for tau in 0..=t {
                numerics::axpy(dot(&chunk[tau].k, &qs[t]), &u[tau], &mut o);
            }
            outputs.push(o);
        }

        let mut local_end = Matrix::zeros(d_v, d_k);
        for (tau, u_tau) in u.iter().enumerate() {
            local_end.add_outer(1.0, u_tau, &chunk[tau].k);
        }
        boundary = numerics::matmul(&boundary, &decay)?.add(&local_end)?;
    }
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Rng, Vector};

    fn state(rows: &[&[f64]]) -> MemoryState {
        MemoryState::from_matrix(Matrix::from_rows(rows).unwrap())
    }

    fn random_steps(rng: &mut Rng, t: usize, d: usize) -> (Vec<WriteStep>, Vec<Vec<f64>>) {
        let mut steps = Vec::new();
        let mut qs = Vec::new();
        for _ in 0..t {
            let k = Vector::gaussian(d, 1.0, rng).0;
            let v = Vector::gaussian(d, 1.0, rng).0;
            let beta = 0.05 + 0.9 * rng.uniform();
            steps.push(WriteStep::normalized(k, v, beta).unwrap());
            qs.push(Vector::gaussian(d, 1.0, rng).0);
        }
        (steps, qs)
    }

    #[test]
    fn memory_loss_zero_state_and_optimum() {
        let z = MemoryState::zeros(2, 2);
        let step = WriteStep::new(vec![1.0, 0.0], vec![2.0, 3.0], 0.5).unwrap();
        assert_eq!(memory_loss(&z, &step, &z, 0.1).unwrap(), 0.5 * 13.0);

        let s = state(&[&[2.0, 0.0], &[3.0, 0.0]]);
        assert_eq!(memory_loss(&s, &step, &s, 0.1).unwrap(), 0.0);
        assert!(memory_loss(&s, &step, &s, 0.0).is_err());
    }

    #[test]
    fn memory_loss_matches_scalar_loop() {
        let mut rng = Rng::new(8);
        let s = MemoryState::from_matrix(Matrix::gaussian(3, 4, 1.0, &mut rng));
        let p = MemoryState::from_matrix(Matrix::gaussian(3, 4, 1.0, &mut rng));
        let k = Vector::gaussian(4, 1.0, &mut rng).0;
        let v = Vector::gaussian(3, 1.0, &mut rng).0;
        let eta = 0.37;
        let mut recon = 0.0;
        for i in 0..3 {
            let mut sk = 0.0;
            for j in 0..4 {
                sk += s.matrix().get(i, j) * k[j];
            }
            recon += (sk - v[i]).powi(2);
        }
        let mut prox = 0.0;
        for i in 0..3 {
            for j in 0..4 {
                prox += (s.matrix().get(i, j) - p.matrix().get(i, j)).powi(2);
            }
        }
        let want = 0.5 * recon + prox / (2.0 * eta);
        let step = WriteStep::new(k, v, 0.5).unwrap();
        let got = memory_loss(&s, &step, &p, eta).unwrap();
        assert!((got - want).abs() <= 1e-12);
    }

    #[test]
    fn rank_one_write_to_empty_memory() {
        let z = MemoryState::zeros(2, 2);
        let step = WriteStep::new(vec![1.0, 0.0], vec![2.0, 3.0], 1.0).unwrap();
        let want = state(&[&[2.0, 0.0], &[3.0, 0.0]]);
        assert_eq!(delta_update(&z, &step).unwrap(), want);
        assert_eq!(hebbian_update(&z, &step).unwrap(), want);
    }

    #[test]
    fn zero_strength_leaves_state() {
        let mut rng = Rng::new(1);
        let s = MemoryState::from_matrix(Matrix::gaussian(2, 2, 1.0, &mut rng));
        let step = WriteStep::new(vec![0.6, 0.8], vec![1.0, -1.0], 0.0).unwrap();
        assert_eq!(delta_update(&s, &step).unwrap(), s);
        assert_eq!(hebbian_update(&s, &step).unwrap(), s);
    }

    #[test]
    fn delta_overwrites_hebbian_accumulates() {
        let k = vec![0.6, 0.8];
        let z = MemoryState::zeros(2, 2);
        let first = WriteStep::new(k.clone(), vec![2.0, 3.0], 1.0).unwrap();
        let second = WriteStep::new(k.clone(), vec![0.0, 0.0], 1.0).unwrap();
        let s2 = delta_update(&delta_update(&z, &first).unwrap(), &second).unwrap();
        let r = read(&s2, &k).unwrap();
        assert!(r.iter().all(|x| x.abs() < 1e-15), "{r:?}");

        let v = vec![2.0, 3.0];
        let rep = WriteStep::new(k.clone(), v.clone(), 1.0).unwrap();
        let h2 = hebbian_update(&hebbian_update(&z, &rep).unwrap(), &rep).unwrap();
        let r = read(&h2, &k).unwrap();
        assert!((r[0] - 4.0).abs() < 1e-12 && (r[1] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn read_cases() {
        let z = MemoryState::zeros(3, 2);
        assert_eq!(read(&z, &[1.0, 2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
        assert!(read(&z, &[1.0]).is_err());

        let k = Vector(vec![1.0, 2.0, 2.0]).normalized().0;
        let step = WriteStep::new(k.clone(), vec![5.0, -1.0], 1.0).unwrap();
        let s = delta_update(&z, &step).unwrap();
        let r = read(&s, &k).unwrap();
        assert!((r[0] - 5.0).abs() < 1e-15 && (r[1] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn update_shape_mismatch_rejected() {
        let z = MemoryState::zeros(2, 2);
        let bad = WriteStep::new(vec![1.0], vec![1.0, 1.0], 0.5).unwrap();
        assert!(delta_update(&z, &bad).is_err());
        assert!(hebbian_update(&z, &bad).is_err());
        assert!(WriteStep::new(vec![1.0], vec![1.0], 1.5).is_err());
    }

    #[test]
    fn jacobian_special_cases() {
        let step = WriteStep::new(vec![0.6, 0.8], vec![0.0, 0.0], 0.0).unwrap();
        assert_eq!(transition_jacobian(&step), Matrix::identity(2));

        // β = 1 with unit key: projector with P k = 0 and P k⊥ = k⊥.
        let step = WriteStep::new(vec![0.6, 0.8], vec![0.0, 0.0], 1.0).unwrap();
        let p = transition_jacobian(&step);
        let pk = p.matvec(&[0.6, 0.8]).unwrap();
        let pperp = p.matvec(&[-0.8, 0.6]).unwrap();
        assert!(pk.iter().all(|x| x.abs() < 1e-15));
        assert!((pperp[0] + 0.8).abs() < 1e-15 && (pperp[1] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn sequential_degenerate_and_definitional() {
        let s0 = MemoryState::zeros(3, 3);
        let out = sequential_forward(&s0, &[], &[], UpdateRule::Delta).unwrap();
        assert!(out.outputs.is_empty());
        assert_eq!(out.trajectory, vec![s0.clone()]);

        let mut rng = Rng::new(2);
        let (steps, qs) = random_steps(&mut rng, 1, 3);
        let out = sequential_forward(&s0, &steps, &qs, UpdateRule::Delta).unwrap();
        let s1 = delta_update(&s0, &steps[0]).unwrap();
        assert_eq!(out.outputs[0], read(&s1, &qs[0]).unwrap());
        assert_eq!(out.trajectory[1], s1);
    }

    #[test]
    fn sequential_matches_manual_steps() {
        let mut rng = Rng::new(64);
        let (steps, qs) = random_steps(&mut rng, 64, 5);
        let s0 = MemoryState::zeros(5, 5);
        let out = sequential_forward(&s0, &steps, &qs, UpdateRule::Delta).unwrap();
        let mut s = s0;
        for step in &steps {
            s = delta_update(&s, step).unwrap();
        }
        assert_eq!(out.trajectory.last().unwrap(), &s);
        assert_eq!(out.trajectory.len(), 65);
    }

    #[test]
    fn sequential_reports_bad_token() {
        let mut rng = Rng::new(4);
        let (steps, mut qs) = random_steps(&mut rng, 4, 3);
        qs[2] = vec![1.0];
        let err = sequential_forward(&MemoryState::zeros(3, 3), &steps, &qs, UpdateRule::Delta)
            .unwrap_err();
        assert!(err.to_string().contains("t=2"), "{err}");
    }

    fn max_rel_dev(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        let scale = b
            .iter()
            .flatten()
            .fold(0.0f64, |m, x| m.max(x.abs()))
            .max(1e-300);
        a.iter()
            .flatten()
            .zip(b.iter().flatten())
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
            / scale
    }

    #[test]
    fn chunkwise_degenerate_chunkings() {
        let mut rng = Rng::new(16);
        let (steps, qs) = random_steps(&mut rng, 20, 4);
        let s0 = MemoryState::from_matrix(Matrix::gaussian(4, 4, 0.5, &mut rng));
        let seq = sequential_forward(&s0, &steps, &qs, UpdateRule::Delta).unwrap();
        for c in [1, 20] {
            let plan = ChunkPlan::new(c, 20).unwrap();
            let got = chunkwise_forward(&s0, &steps, &qs, plan).unwrap();
            assert!(max_rel_dev(&got, &seq.outputs) <= 1e-10);
        }
    }

    #[test]
    fn chunkwise_long_stream() {
        let mut rng = Rng::new(128);
        let (steps, qs) = random_steps(&mut rng, 128, 8);
        let s0 = MemoryState::zeros(8, 8);
        let seq = sequential_forward(&s0, &steps, &qs, UpdateRule::Delta).unwrap();
        let got = chunkwise_forward(&s0, &steps, &qs, ChunkPlan::new(16, 128).unwrap()).unwrap();
        assert!(max_rel_dev(&got, &seq.outputs) <= 1e-8);
    }

    #[test]
    fn chunk_plan_rules() {
        assert!(ChunkPlan::new(0, 4).is_err());
        assert!(ChunkPlan::new(5, 4).is_err());
        let p = ChunkPlan::new(3, 10).unwrap();
        assert_eq!(p.num_chunks(), 4);
        assert_eq!(p.chunks().last().unwrap(), 9..10);
    }

    #[test]
    fn streaming_footprint_is_constant() {
        let mut rng = Rng::new(9);
        let mut mem = StreamingMemory::new(MemoryState::zeros(4, 4), UpdateRule::Delta);
        let before = mem.resident_bytes();
        let (steps, qs) = random_steps(&mut rng, 300, 4);
        for (s, q) in steps.iter().zip(&qs) {
            mem.step(s, q).unwrap();
        }
        assert_eq!(mem.resident_bytes(), before);
        assert_eq!(mem.tokens_seen(), 300);
    }
}

#[cfg(test)]
mod proptests {
    use super::*;
    use crate::numerics::{Rng, Vector};
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn delta_is_gradient_step(seed in any::<u64>(), d_k in 1usize..6, d_v in 1usize..6, beta in 0.0f64..1.0) {
            let mut rng = Rng::new(seed);
            let s = MemoryState::from_matrix(Matrix::gaussian(d_v, d_k, 1.0, &mut rng));
            let k = Vector::gaussian(d_k, 1.0, &mut rng).0;
            let v = Vector::gaussian(d_v, 1.0, &mut rng).0;
            let step = WriteStep::new(k.clone(), v.clone(), beta).unwrap();
            let next = delta_update(&s, &step).unwrap();
            // ∇S ½‖Sk − v‖² = (Sk − v) kᵀ
            let mut want = s.matrix().clone();
            for i in 0..d_v {
                let mut sk = 0.0;
                for j in 0..d_k { sk += s.matrix().get(i, j) * k[j]; }
                for j in 0..d_k {
                    want.set(i, j, want.get(i, j) - beta * (sk - v[i]) * k[j]);
                }
            }
            prop_assert!(next.matrix().sub(&want).unwrap().frobenius_norm() <= 1e-12);
        }

        #[test]
        fn reconstruction_error_never_increases(seed in any::<u64>(), d in 1usize..6, frac in 0.0f64..1.0) {
            let mut rng = Rng::new(seed);
            let s = MemoryState::from_matrix(Matrix::gaussian(d, d, 1.0, &mut rng));
            let k = Vector::gaussian(d, 1.0, &mut rng).0;
            let v = Vector::gaussian(d, 1.0, &mut rng).0;
            let beta = (frac / numerics::dot(&k, &k)).min(1.0);
            let step = WriteStep::new(k, v, beta).unwrap();
            let first = |m: &MemoryState| memory_loss(m, &step, m, 1.0).unwrap();
            let next = delta_update(&s, &step).unwrap();
            prop_assert!(first(&next) <= first(&s) + 1e-12);
        }

        #[test]
        fn state_norm_bound(seed in any::<u64>(), t in 0usize..40) {
            let mut rng = Rng::new(seed);
            let d = 4;
            let s0 = MemoryState::from_matrix(Matrix::gaussian(d, d, 1.0, &mut rng));
            let mut bound = s0.matrix().frobenius_norm();
            let mut s = s0;
            for _ in 0..t {
                let step = WriteStep::normalized(
                    Vector::gaussian(d, 1.0, &mut rng).0,
                    Vector::gaussian(d, 1.0, &mut rng).0,
                    rng.uniform(),
                ).unwrap();
                bound += step.beta * numerics::norm(&step.v) * numerics::norm(&step.k);
                s = delta_update(&s, &step).unwrap();
                prop_assert!(s.matrix().frobenius_norm() <= bound + 1e-9);
            }
        }

        #[test]
        fn chunkwise_equals_sequential(seed in any::<u64>(), t in 1usize..48, c_frac in 0.0f64..1.0) {
            let mut rng = Rng::new(seed);
            let d = 4;
            let c = 1 + ((t - 1) as f64 * c_frac) as usize;
            let mut steps = Vec::new();
            let mut qs = Vec::new();
            for _ in 0..t {
                steps.push(WriteStep::normalized(
                    Vector::gaussian(d, 1.0, &mut rng).0,
                    Vector::gaussian(d, 1.0, &mut rng).0,
                    rng.uniform(),
                ).unwrap());
                qs.push(Vector::gaussian(d, 1.0, &mut rng).0);
            }
            let s0 = MemoryState::zeros(d, d);
            let seq = sequential_forward(&s0, &steps, &qs, UpdateRule::Delta).unwrap();
            let got = chunkwise_forward(&s0, &steps, &qs, ChunkPlan::new(c, t).unwrap()).unwrap();
            let scale = seq.outputs.iter().flatten().fold(1e-300f64, |m, x| m.max(x.abs()));
            for (a, b) in got.iter().flatten().zip(seq.outputs.iter().flatten()) {
                prop_assert!((a - b).abs() / scale <= 1e-8);
            }
        }
    }
}
