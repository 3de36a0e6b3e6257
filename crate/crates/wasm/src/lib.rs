//! Browser bindings for three small demos: overwriting a key in memory,
//! checking the chunk-wise scan against the token loop, and accounting for
//! bytes on the wire and in memory. Every export returns a JSON string.

use fednl_core::data::Vocab;
use fednl_core::eval::probe_memory_footprint;
use fednl_core::federation::{payload_bytes, scope_ratio, Arm, Scope};
use fednl_core::memory::{
    chunkwise_forward, read, sequential_forward, update, ChunkPlan, MemoryState, UpdateRule, WriteStep,
};
use fednl_core::model::{expected_counts, init_backbone, ForwardOptions, MetaParams, ModelConfig};
use fednl_core::numerics::Rng;
use fednl_core::Error;
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn to_js<T: Serialize>(r: Result<T, Error>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).expect("plain data serializes"),
        Err(e) => serde_json::json!({ "error": e.to_string() }).to_string(),
    }
}

fn unit(rng: &mut Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[derive(Serialize)]
pub struct OverwriteStep {
    pub write: usize,
    pub delta_err_new: f64,
    pub delta_err_old: f64,
    pub hebbian_err_new: f64,
    pub hebbian_err_old: f64,
}

/// Stores `(k, v_old)`, then writes `(k, v_new)` `writes` times with the
/// same β, reporting after each write how far a read of `k` sits from the
/// old and the new value under both rules.
pub fn overwrite(d: usize, beta: f64, writes: usize, seed: u64) -> Result<Vec<OverwriteStep>, Error> {
    let mut rng = Rng::new(seed);
    let k = unit(&mut rng, d);
    let old: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let new: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let first = WriteStep::new(k.clone(), old.clone(), 0.999)?;
    let again = WriteStep::new(k.clone(), new.clone(), beta)?;
    let zero = MemoryState::zeros(d, d);
    let mut states = [
        (UpdateRule::Delta, update(&zero, &first, UpdateRule::Delta)?),
        (UpdateRule::Hebbian, update(&zero, &first, UpdateRule::Hebbian)?),
    ];
    let mut out = Vec::with_capacity(writes);
    for w in 1..=writes {
        let mut errs = [(0.0, 0.0); 2];
        for (i, (rule, s)) in states.iter_mut().enumerate() {
            *s = update(s, &again, *rule)?;
            let r = read(s, &k)?;
            errs[i] = (dist(&r, &new), dist(&r, &old));
        }
        out.push(OverwriteStep {
            write: w,
            delta_err_new: errs[0].0,
            delta_err_old: errs[0].1,
            hebbian_err_new: errs[1].0,
            hebbian_err_old: errs[1].1,
        });
    }
    Ok(out)
}

#[derive(Serialize)]
pub struct ChunkReport {
    pub tokens: usize,
    pub chunk: usize,
    pub chunks: usize,
    pub max_abs_gap: f64,
    pub max_output: f64,
}

/// Runs one random delta-rule sequence token by token and chunk-wise.
pub fn chunk_check(d: usize, tokens: usize, chunk: usize, seed: u64) -> Result<ChunkReport, Error> {
    let mut rng = Rng::new(seed);
    let steps: Vec<WriteStep> = (0..tokens)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            WriteStep::new(unit(&mut rng, d), v, rng.uniform().clamp(0.01, 0.99))
        })
        .collect::<Result<_, _>>()?;
    let queries: Vec<Vec<f64>> = (0..tokens).map(|_| (0..d).map(|_| rng.normal()).collect()).collect();
    let s0 = MemoryState::zeros(d, d);
    let plan = ChunkPlan::new(chunk, tokens)?;
    let seq = sequential_forward(&s0, &steps, &queries, UpdateRule::Delta)?;
    let par = chunkwise_forward(&s0, &steps, &queries, plan)?;
    let mut gap = 0.0f64;
    let mut peak = 0.0f64;
    for (a, b) in par.iter().zip(&seq.outputs) {
        for (x, y) in a.iter().zip(b) {
            gap = gap.max((x - y).abs());
            peak = peak.max(y.abs());
        }
    }
    Ok(ChunkReport {
        tokens,
        chunk,
        chunks: tokens.div_ceil(chunk),
        max_abs_gap: gap,
        max_output: peak,
    })
}

#[derive(Serialize)]
pub struct Accounting {
    pub lora_params: usize,
    pub gate_params: usize,
    pub beta_params: usize,
    pub all_meta_bytes: usize,
    pub rules_only_bytes: usize,
    pub ratio: f64,
    pub lengths: Vec<usize>,
    pub live_bytes: Vec<usize>,
    pub softmax_kv_bytes: Vec<usize>,
}

/// Upload sizes for both scopes and measured streaming bytes at 256 and
/// `tokens` for a model of the given shape.
pub fn accounting(d_model: usize, heads: usize, layers: usize, rank: usize, tokens: usize) -> Result<Accounting, Error> {
    let vocab = Vocab::standard();
    let mut cfg = ModelConfig::toy(vocab.len());
    cfg.d_model = d_model;
    cfg.heads = heads;
    cfg.head_dim = d_model / heads.max(1);
    cfg.layers = layers;
    cfg.lora_rank = rank;
    cfg.lora_alpha = 2.0 * rank as f64;
    cfg.validate()?;
    let counts = expected_counts(&cfg);
    let mut rng = Rng::new(1);
    let bb = init_backbone(&cfg, &mut rng)?;
    let theta = MetaParams::init(&cfg, &mut rng)?;
    let lengths = if tokens > 256 { vec![256, tokens] } else { vec![tokens] };
    let opts = Arm::Fednl.forward_options(ForwardOptions::new(&cfg));
    let rows = probe_memory_footprint(&bb, &theta, opts, &lengths, 2)?;
    Ok(Accounting {
        lora_params: counts.lora,
        gate_params: counts.gate,
        beta_params: counts.beta,
        all_meta_bytes: payload_bytes(Scope::AllMeta.param_count(&counts)),
        rules_only_bytes: payload_bytes(Scope::MemoryRulesOnly.param_count(&counts)),
        ratio: scope_ratio(&counts),
        lengths,
        live_bytes: rows.iter().map(|r| r.model_bytes).collect(),
        softmax_kv_bytes: rows.iter().map(|r| r.full_softmax_bytes).collect(),
    })
}

#[wasm_bindgen(js_name = overwriteDemo)]
pub fn overwrite_js(d: usize, beta: f64, writes: usize, seed: u32) -> String {
    to_js(overwrite(d, beta, writes, seed as u64))
}

#[wasm_bindgen(js_name = chunkDemo)]
pub fn chunk_js(d: usize, tokens: usize, chunk: usize, seed: u32) -> String {
    to_js(chunk_check(d, tokens, chunk, seed as u64))
}

#[wasm_bindgen(js_name = accountingDemo)]
pub fn accounting_js(d_model: usize, heads: usize, layers: usize, rank: usize, tokens: usize) -> String {
    to_js(accounting(d_model, heads, layers, rank.max(1), tokens.clamp(1, 8192)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_overwrites_and_hebbian_blends() {
        let steps = overwrite(8, 0.9, 3, 4).unwrap();
        let last = steps.last().unwrap();
        assert!(last.delta_err_new < 1e-2);
        assert!(last.hebbian_err_new > 0.5);
    }

    #[test]
    fn chunk_scan_agrees() {
        let r = chunk_check(8, 50, 7, 1).unwrap();
        assert_eq!(r.chunks, 8);
        assert!(r.max_abs_gap < 1e-10);
    }

    #[test]
    fn accounting_and_errors_serialize() {
        let a: serde_json::Value = serde_json::from_str(&accounting_js(32, 2, 2, 16, 1024)).unwrap();
        assert_eq!(a["live_bytes"][0], a["live_bytes"][1]);
        assert!(a["ratio"].as_f64().unwrap() > 50.0);
        let bad: serde_json::Value = serde_json::from_str(&chunk_js(4, 5, 9, 0)).unwrap();
        assert!(bad["error"].is_string());
    }
}
