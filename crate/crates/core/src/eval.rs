//! Metrics: retrieval accuracy by client and depth, streaming CE curves,
//! aggregation drop and live-state footprint.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{score_answer, ClientDataset, NiahExample, StreamSequence, Vocab};
use crate::error::{Error, Result};
use crate::model::{BackboneParams, ForwardOptions, MetaParams, StreamingModel};
use crate::numerics::{cross_entropy, Rng};

/// Something that maps a token prefix to next-token logits.
pub trait Scorer: Sync {
    /// Logits after every prefix `tokens[..=t]`, plus the peak live-state
    /// bytes reached while reading the sequence.
    fn run(&self, client: usize, tokens: &[usize]) -> Result<ScoredRun>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredRun {
    pub logits: Vec<Vec<f64>>,
    pub peak_bytes: usize,
}

/// A trained arm: shared backbone, per-client or shared parameters.
pub struct ModelArm<'a> {
    pub backbone: &'a BackboneParams,
    pub options: ForwardOptions,
    /// One entry shared by every client, or one per client.
    pub params: Vec<MetaParams>,
}

impl<'a> ModelArm<'a> {
    pub fn shared(backbone: &'a BackboneParams, options: ForwardOptions, theta: MetaParams) -> Self {
        Self {
            backbone,
            options,
            params: vec![theta],
        }
    }

    pub fn params_for(&self, client: usize) -> &MetaParams {
        if self.params.len() == 1 {
            &self.params[0]
        } else {
            &self.params[client]
        }
    }
}

impl Scorer for ModelArm<'_> {
    fn run(&self, client: usize, tokens: &[usize]) -> Result<ScoredRun> {
        let mut m = StreamingModel::new(self.backbone, self.params_for(client), self.options)?;
        let logits = tokens.iter().map(|&t| m.step(t)).collect::<Result<Vec<_>>>()?;
        Ok(ScoredRun {
            logits,
            peak_bytes: m.peak_bytes(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Retrieval,
    StreamingCe,
}

/// One row of the metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub kind: MetricKind,
    pub arm: String,
    pub round: usize,
    pub client_id: usize,
    /// Haystack depth for retrieval rows, stream length for CE rows.
    pub depth: usize,
    pub accuracy: Option<f64>,
    /// Token-mean CE per bin divided by the first bin's.
    pub ce_per_bin: Vec<f64>,
    pub peak_state_bytes: usize,
    pub examples: usize,
}

pub const CSV_HEADER: &str = "kind,arm,round,client_id,depth,examples,accuracy,peak_state_bytes,ce_per_bin";

impl EvalRecord {
    pub fn csv_row(&self) -> String {
        let kind = match self.kind {
            MetricKind::Retrieval => "retrieval",
            MetricKind::StreamingCe => "streaming_ce",
        };
        let acc = self.accuracy.map(|a| format!("{a:.6}")).unwrap_or_default();
        let bins: Vec<String> = self.ce_per_bin.iter().map(|c| format!("{c:.6}")).collect();
        format!(
            "{kind},{},{},{},{},{},{acc},{},{}",
            self.arm,
            self.round,
            self.client_id,
            self.depth,
            self.examples,
            self.peak_state_bytes,
            bins.join(";")
        )
    }
}

pub fn write_csv(records: &[EvalRecord], mut w: impl Write) -> Result<()> {
    let io = |e| Error::io("<csv>", e);
    writeln!(w, "{CSV_HEADER}").map_err(io)?;
    for r in records {
        writeln!(w, "{}", r.csv_row()).map_err(io)?;
    }
    Ok(())
}

fn answer_correct(scorer: &dyn Scorer, client: usize, ex: &NiahExample, vocab: &Vocab) -> Result<(bool, usize)> {
    let run = scorer.run(client, &ex.tokens)?;
    let last = run
        .logits
        .last()
        .ok_or_else(|| Error::contract("empty prompt"))?;
    Ok((score_answer(last, vocab) == ex.gold_letter, run.peak_bytes))
}

fn accuracy_on(scorer: &dyn Scorer, client: usize, items: &[&NiahExample], vocab: &Vocab) -> Result<(f64, usize)> {
    let results: Vec<(bool, usize)> = items
        .par_iter()
        .map(|ex| answer_correct(scorer, client, ex, vocab))
        .collect::<Result<_>>()?;
    let correct = results.iter().filter(|r| r.0).count();
    let peak = results.iter().map(|r| r.1).max().unwrap_or(0);
    Ok((correct as f64 / items.len() as f64, peak))
}

/// Held-out accuracy for every (client, depth) cell that has examples.
pub fn eval_retrieval(
    arm: &str,
    round: usize,
    scorer: &dyn Scorer,
    datasets: &[ClientDataset],
    depths: &[usize],
    vocab: &Vocab,
) -> Result<Vec<EvalRecord>> {
    if depths.is_empty() {
        return Err(Error::contract("depth grid is empty"));
    }
    let mut out = Vec::new();
    for (index, ds) in datasets.iter().enumerate() {
        for &depth in depths {
            let items: Vec<&NiahExample> = ds.eval.iter().filter(|e| e.depth == depth).collect();
            if items.is_empty() {
                continue;
            }
            let (acc, peak) = accuracy_on(scorer, index, &items, vocab)?;
            out.push(EvalRecord {
                kind: MetricKind::Retrieval,
                arm: arm.to_string(),
                round,
                client_id: ds.client_id,
                depth,
                accuracy: Some(acc),
                ce_per_bin: Vec::new(),
                peak_state_bytes: peak,
                examples: items.len(),
            });
        }
    }
    Ok(out)
}

/// Example-weighted mean accuracy per depth across clients.
pub fn accuracy_by_depth(records: &[EvalRecord]) -> Vec<(usize, f64, usize)> {
    let mut depths: Vec<usize> = records.iter().map(|r| r.depth).collect();
    depths.sort_unstable();
    depths.dedup();
    depths
        .into_iter()
        .map(|d| {
            let rows: Vec<&EvalRecord> = records.iter().filter(|r| r.depth == d && r.accuracy.is_some()).collect();
            let n: usize = rows.iter().map(|r| r.examples).sum();
            let hits: f64 = rows.iter().map(|r| r.accuracy.unwrap() * r.examples as f64).sum();
            (d, hits / n as f64, n)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamingCe {
    /// Token-mean CE per bin, pooled over streams.
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    pub tokens_per_bin: Vec<usize>,
    pub peak_bytes: usize,
}

/// Per-bin next-token CE over eligible positions divided by the first bin.
pub fn eval_streaming_ce(scorer: &dyn Scorer, client: usize, streams: &[StreamSequence], bin_size: usize) -> Result<StreamingCe> {
    if streams.is_empty() {
        return Err(Error::contract("no streams to evaluate"));
    }
    if bin_size == 0 {
        return Err(Error::contract("bin size must be positive"));
    }
    let nbins = streams.iter().map(|s| s.len().div_ceil(bin_size)).max().unwrap();
    if let Some(s) = streams.iter().find(|s| s.len() < 2 * bin_size) {
        return Err(Error::contract(format!(
            "stream of {} tokens is shorter than two bins of {bin_size}",
            s.len()
        )));
    }
    let per_stream: Vec<(Vec<(f64, usize)>, usize)> = streams
        .par_iter()
        .map(|s| {
            let run = scorer.run(client, &s.tokens[..s.len() - 1])?;
            let mut bins = vec![(0.0, 0usize); nbins];
            for t in 1..s.len() {
                if s.eligible[t] {
                    let b = &mut bins[t / bin_size];
                    b.0 += cross_entropy(&run.logits[t - 1], s.tokens[t])?;
                    b.1 += 1;
                }
            }
            Ok((bins, run.peak_bytes))
        })
        .collect::<Result<_>>()?;
    let mut totals = vec![(0.0, 0usize); nbins];
    for (bins, _) in &per_stream {
        for (acc, b) in totals.iter_mut().zip(bins) {
            acc.0 += b.0;
            acc.1 += b.1;
        }
    }
    let raw: Vec<f64> = totals
        .iter()
        .map(|&(s, n)| if n == 0 { f64::NAN } else { s / n as f64 })
        .collect();
    if !(raw[0] > 0.0) {
        return Err(Error::contract("first-bin CE is zero; normalization is degenerate"));
    }
    let normalized = raw.iter().map(|&c| c / raw[0]).collect();
    Ok(StreamingCe {
        raw,
        normalized,
        tokens_per_bin: totals.iter().map(|t| t.1).collect(),
        peak_bytes: per_stream.iter().map(|p| p.1).max().unwrap_or(0),
    })
}

/// Mean next-token CE over the positions selected by `pick`.
pub fn mean_ce(
    scorer: &dyn Scorer,
    client: usize,
    streams: &[StreamSequence],
    pick: impl Fn(&StreamSequence, usize) -> bool + Sync,
) -> Result<f64> {
    let parts: Vec<(f64, usize)> = streams
        .par_iter()
        .map(|s| {
            let run = scorer.run(client, &s.tokens[..s.len() - 1])?;
            let mut acc = (0.0, 0usize);
            for t in 1..s.len() {
                if s.eligible[t] && pick(s, t) {
                    acc.0 += cross_entropy(&run.logits[t - 1], s.tokens[t])?;
                    acc.1 += 1;
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let (sum, n) = parts.iter().fold((0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    if n == 0 {
        return Err(Error::contract("no positions selected"));
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropRow {
    pub client_id: usize,
    pub local_accuracy: f64,
    pub global_accuracy: f64,
    /// Positive when aggregation hurt the client.
    pub drop: f64,
    pub examples: usize,
}

/// `acc(local_k on k) − acc(global on k)` over each client's eval split.
pub fn eval_aggregation_drop(
    local: &dyn Scorer,
    global: &dyn Scorer,
    datasets: &[ClientDataset],
    vocab: &Vocab,
) -> Result<Vec<DropRow>> {
    datasets
        .iter()
        .enumerate()
        .map(|(index, ds)| {
            if ds.eval.is_empty() {
                return Err(Error::contract(format!("client {} has no eval data", ds.client_id)));
            }
            let items: Vec<&NiahExample> = ds.eval.iter().collect();
            let (l, _) = accuracy_on(local, index, &items, vocab)?;
            let (g, _) = accuracy_on(global, index, &items, vocab)?;
            Ok(DropRow {
                client_id: ds.client_id,
                local_accuracy: l,
                global_accuracy: g,
                drop: l - g,
                examples: items.len(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FootprintRow {
    pub length: usize,
    /// Measured live bytes of the streaming model after `length` tokens.
    pub model_bytes: usize,
    /// Key/value cache of full causal softmax attention over `length` tokens.
    pub full_softmax_bytes: usize,
    /// Memory states alone.
    pub state_bytes: usize,
}

/// Streams `lengths.last()` tokens and records live bytes at each length.
pub fn probe_memory_footprint(
    backbone: &BackboneParams,
    theta: &MetaParams,
    options: ForwardOptions,
    lengths: &[usize],
    seed: u64,
) -> Result<Vec<FootprintRow>> {
    if lengths.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::contract("footprint lengths must be sorted ascending"));
    }
    let cfg = &backbone.config;
    let f = std::mem::size_of::<f64>();
    let lh = cfg.layers * cfg.heads;
    let state = lh * cfg.head_dim * cfg.head_dim * f;
    let mut m = StreamingModel::new(backbone, theta, options)?;
    let mut rng = Rng::new(seed);
    let mut out = Vec::with_capacity(lengths.len());
    for &len in lengths {
        while m.tokens_seen() < len {
            m.step(rng.below(cfg.vocab_size))?;
        }
        out.push(FootprintRow {
            length: len,
            model_bytes: m.resident_bytes(),
            full_softmax_bytes: lh * len * 2 * cfg.head_dim * f,
            state_bytes: state,
        });
    }
    Ok(out)
}
