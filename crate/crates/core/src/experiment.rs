//! Experiment runner: config loading, per-arm federated runs, checkpoints,
//! metrics sinks and cross-run comparison.
//!
//! Output layout for `run_experiment` with root `out/`:
//!
//! ```text
//! out/manifest.json            config hash, code version, seed, arms
//! out/config.json              normalized config
//! out/timing.json              wall-clock seconds per arm (not deterministic)
//! out/<arm>/run.json           arm name and the config it ran
//! out/<arm>/rounds.jsonl       one RoundReport per round
//! out/<arm>/metrics.csv        EvalRecord rows, header first
//! out/<arm>/metrics.jsonl      same rows as JSON
//! out/<arm>/drop.csv           NIAH runs: local vs global accuracy per client
//! out/<arm>/footprint.csv      live bytes against stream length
//! out/<arm>/checkpoints/round_NNN.fnlc
//! out/<arm>/FAILED             only when the arm aborted
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    build_federation, build_stream_federation, write_jsonl, ClientDataset, DatasetsConfig, StreamClient,
    StreamTaskConfig, Vocab,
};
use crate::error::{Error, Result};
use crate::eval::{
    accuracy_by_depth, eval_aggregation_drop, eval_retrieval, eval_streaming_ce, probe_memory_footprint, write_csv,
    DropRow, EvalRecord, MetricKind, ModelArm,
};
use crate::federation::{communication_summary, Arm, ClientHandle, Federation, RoundConfig, RoundReport};
use crate::model::{init_backbone, BackboneParams, MetaParams, ModelConfig};
use crate::numerics::Rng;
use crate::records::Checkpoint;
use crate::trainer::{grad_check, GradCheckReport, Sequence};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Environment variable that replaces `output_dir` when set.
pub const OUTPUT_ROOT_ENV: &str = "FEDNL_OUTPUT_ROOT";

fn default_footprint() -> Vec<usize> {
    vec![256, 4096]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub federation: RoundConfig,
    /// Arms to run; empty means `federation.arm` alone.
    #[serde(default)]
    pub arms: Vec<Arm>,
    /// NIAH retrieval clients. Exactly one of `data` and `streams` is set.
    #[serde(default)]
    pub data: Option<DatasetsConfig>,
    /// Streaming language-model clients.
    #[serde(default)]
    pub streams: Option<StreamTaskConfig>,
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_footprint")]
    pub footprint_lengths: Vec<usize>,
}

fn config_error(field: &str, message: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            // serde names the offending field between backticks.
            let field = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.starts_with("missing field") || msg.starts_with("unknown field"))
                .unwrap_or("<config>")
                .to_string();
            Error::Config { field, message: msg }
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::parse(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn arms(&self) -> Vec<Arm> {
        if self.arms.is_empty() {
            vec![self.federation.arm]
        } else {
            self.arms.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let vocab = Vocab::standard();
        if self.model.vocab_size != vocab.len() {
            return Err(config_error(
                "model.vocab_size",
                format!("{} does not match the task vocabulary of {} tokens", self.model.vocab_size, vocab.len()),
            ));
        }
        self.federation.validate()?;
        let mut arms = self.arms();
        arms.sort();
        if arms.windows(2).any(|w| w[0] == w[1]) {
            return Err(config_error("arms", "an arm is listed twice"));
        }
        match (&self.data, &self.streams) {
            (Some(d), None) => d.validate()?,
            (None, Some(s)) => s.validate()?,
            _ => return Err(config_error("data", "exactly one of `data` and `streams` must be given")),
        }
        if self.footprint_lengths.windows(2).any(|w| w[0] > w[1]) {
            return Err(config_error("footprint_lengths", "must be ascending"));
        }
        Ok(())
    }

    /// SHA-256 of the normalized JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(bytes))
    }

    /// The root for outputs, honouring [`OUTPUT_ROOT_ENV`].
    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if !root.is_empty() => PathBuf::from(root),
            _ => self.output_dir.clone(),
        }
    }

    pub fn backbone(&self) -> Result<BackboneParams> {
        init_backbone(&self.model, &mut Rng::derive(self.seed, &[0]))
    }

    pub fn initial_theta(&self) -> Result<MetaParams> {
        MetaParams::init(&self.model, &mut Rng::derive(self.seed, &[1]))
    }

    /// Same experiment with a single arm, as recorded in each arm directory.
    fn for_arm(&self, arm: Arm) -> Self {
        let mut c = self.clone();
        c.federation.arm = arm;
        c.arms = vec![arm];
        c
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text)
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub code_version: String,
    pub seed: u64,
    pub arms: Vec<Arm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmRun {
    pub arm: Arm,
    pub config: ExperimentConfig,
}

/// Everything one arm produced.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmOutcome {
    pub arm: Arm,
    pub reports: Vec<RoundReport>,
    pub records: Vec<EvalRecord>,
    pub drops: Vec<DropRow>,
    pub final_theta: MetaParams,
    /// Every encoded client update, in round order.
    pub messages: Vec<Vec<u8>>,
}

enum Clients {
    Niah(Vec<ClientDataset>),
    Streams(Vec<StreamClient>),
}

impl Clients {
    fn build(cfg: &ExperimentConfig, vocab: &Vocab) -> Result<Self> {
        match (&cfg.data, &cfg.streams) {
            (Some(d), _) => Ok(Clients::Niah(build_federation(d, cfg.seed, vocab)?)),
            (None, Some(s)) => Ok(Clients::Streams(build_stream_federation(s, cfg.seed, vocab)?)),
            (None, None) => Err(config_error("data", "no data section")),
        }
    }

    fn handles(&self, vocab: &Vocab) -> Vec<ClientHandle> {
        match self {
            Clients::Niah(ds) => ds
                .iter()
                .map(|c| ClientHandle::new(c.client_id, c.train.iter().map(|e| e.to_sequence(vocab)).collect()))
                .collect(),
            Clients::Streams(ss) => ss
                .iter()
                .map(|c| ClientHandle::new(c.client_id, c.train.iter().map(|s| s.to_sequence()).collect()))
                .collect(),
        }
    }
}

fn evaluate_round(
    arm: Arm,
    fed: &Federation<'_>,
    clients: &Clients,
    backbone: &BackboneParams,
    vocab: &Vocab,
    report: &mut RoundReport,
) -> Result<Vec<EvalRecord>> {
    let model = ModelArm {
        backbone,
        options: fed.options(),
        params: (0..fed.clients().len()).map(|i| fed.client_params(i)).collect(),
    };
    let round = report.round;
    match clients {
        Clients::Niah(ds) => {
            let depths = {
                let mut d: Vec<usize> = ds.iter().flat_map(|c| c.eval.iter().map(|e| e.depth)).collect();
                d.sort_unstable();
                d.dedup();
                d
            };
            let records = eval_retrieval(arm.as_str(), round, &model, ds, &depths, vocab)?;
            let mut hits = 0.0;
            let mut n = 0;
            for (depth, acc, count) in accuracy_by_depth(&records) {
                report.eval.insert(format!("accuracy@{depth}"), acc);
                hits += acc * count as f64;
                n += count;
            }
            report.eval.insert("accuracy".into(), hits / n as f64);
            Ok(records)
        }
        Clients::Streams(ss) => {
            let mut out = Vec::with_capacity(ss.len());
            let mut last = 0.0;
            for (i, c) in ss.iter().enumerate() {
                let ce = eval_streaming_ce(&model, i, &c.eval, c.config.bin_size)?;
                let examples = c.eval.len();
                last += *ce.normalized.last().unwrap();
                report.eval.insert(format!("client{}_ce", c.client_id), ce.raw.iter().sum::<f64>() / ce.raw.len() as f64);
                out.push(EvalRecord {
                    kind: MetricKind::StreamingCe,
                    arm: arm.as_str().to_string(),
                    round,
                    client_id: c.client_id,
                    depth: c.config.length,
                    accuracy: None,
                    ce_per_bin: ce.normalized.clone(),
                    peak_state_bytes: ce.peak_bytes,
                    examples,
                });
            }
            report.eval.insert("final_bin_ce".into(), last / ss.len() as f64);
            Ok(out)
        }
    }
}

fn drop_csv(rows: &[DropRow]) -> String {
    let mut s = String::from("client_id,examples,local_accuracy,global_accuracy,drop\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6}\n",
            r.client_id, r.examples, r.local_accuracy, r.global_accuracy, r.drop
        ));
    }
    s
}

/// Runs one arm, writing into `dir` as it goes.
pub fn run_arm(cfg: &ExperimentConfig, arm: Arm, dir: &Path) -> Result<ArmOutcome> {
    let vocab = Vocab::standard();
    mkdir(&dir.join("checkpoints"))?;
    write_json(
        &dir.join("run.json"),
        &ArmRun {
            arm,
            config: cfg.for_arm(arm),
        },
    )?;
    let backbone = cfg.backbone()?;
    let theta0 = cfg.initial_theta()?;
    let clients = Clients::build(cfg, &vocab)?;
    let mut round_cfg = cfg.federation.clone();
    round_cfg.arm = arm;
    let mut fed = Federation::new(&backbone, theta0, clients.handles(&vocab), round_cfg, cfg.seed)?;

    let mut reports = Vec::new();
    let mut records = Vec::new();
    let mut messages = Vec::new();
    let mut rounds_jsonl = Vec::new();
    for _ in 0..cfg.federation.rounds {
        let (mut report, msgs) = fed.run_round()?;
        records.extend(evaluate_round(arm, &fed, &clients, &backbone, &vocab, &mut report)?);
        let ck = Checkpoint {
            round: report.round,
            theta: fed.global().clone(),
        };
        write_file(&dir.join(format!("checkpoints/round_{:03}.fnlc", report.round)), ck.encode())?;
        write_jsonl(std::slice::from_ref(&report), &mut rounds_jsonl)?;
        write_file(&dir.join("rounds.jsonl"), &rounds_jsonl)?;
        let mut csv = Vec::new();
        write_csv(&records, &mut csv)?;
        write_file(&dir.join("metrics.csv"), csv)?;
        let mut jsonl = Vec::new();
        write_jsonl(&records, &mut jsonl)?;
        write_file(&dir.join("metrics.jsonl"), jsonl)?;
        reports.push(report);
        messages.extend(msgs);
    }

    let drops = match &clients {
        Clients::Niah(ds) => {
            let local = ModelArm {
                backbone: &backbone,
                options: fed.options(),
                params: (0..ds.len()).map(|i| fed.local_params(i).clone()).collect(),
            };
            let global = ModelArm {
                backbone: &backbone,
                options: fed.options(),
                params: (0..ds.len()).map(|i| fed.client_params(i)).collect(),
            };
            let rows = eval_aggregation_drop(&local, &global, ds, &vocab)?;
            write_file(&dir.join("drop.csv"), drop_csv(&rows))?;
            rows
        }
        Clients::Streams(_) => Vec::new(),
    };

    if !cfg.footprint_lengths.is_empty() {
        let rows = probe_memory_footprint(&backbone, fed.global(), fed.options(), &cfg.footprint_lengths, cfg.seed)?;
        let mut s = String::from("length,model_bytes,state_bytes,full_softmax_bytes\n");
        for r in rows {
            s.push_str(&format!("{},{},{},{}\n", r.length, r.model_bytes, r.state_bytes, r.full_softmax_bytes));
        }
        write_file(&dir.join("footprint.csv"), s)?;
    }

    Ok(ArmOutcome {
        arm,
        reports,
        records,
        drops,
        final_theta: fed.global().clone(),
        messages,
    })
}

/// Runs every configured arm under `root`, one after another unless
/// `concurrent`. A failing arm leaves its partial outputs and a `FAILED`
/// marker; the first failure is returned after all arms have been attempted.
pub fn run_experiment(cfg: &ExperimentConfig, root: &Path, concurrent: bool) -> Result<Vec<ArmOutcome>> {
    cfg.validate()?;
    mkdir(root)?;
    let arms = cfg.arms();
    write_json(&root.join("config.json"), cfg)?;
    write_json(
        &root.join("manifest.json"),
        &Manifest {
            config_hash: cfg.hash(),
            code_version: CODE_VERSION.into(),
            seed: cfg.seed,
            arms: arms.clone(),
        },
    )?;
    let one = |arm: Arm| {
        let dir = root.join(arm.as_str());
        let _ = fs::remove_file(dir.join("FAILED"));
        let start = Instant::now();
        let res = run_arm(cfg, arm, &dir);
        if let Err(e) = &res {
            let _ = mkdir(&dir);
            let _ = write_file(&dir.join("FAILED"), format!("{e}\n"));
        }
        (res, start.elapsed().as_secs_f64())
    };
    let results: Vec<(Result<ArmOutcome>, f64)> = if concurrent {
        arms.par_iter().map(|&a| one(a)).collect()
    } else {
        arms.iter().map(|&a| one(a)).collect()
    };
    let timing: BTreeMap<&str, f64> = arms.iter().zip(&results).map(|(a, r)| (a.as_str(), r.1)).collect();
    write_json(&root.join("timing.json"), &timing)?;
    results.into_iter().map(|r| r.0).collect()
}

/// Writes every client's datasets as JSONL under `root/data`.
pub fn gen_data(cfg: &ExperimentConfig, root: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let vocab = Vocab::standard();
    let dir = root.join("data");
    mkdir(&dir)?;
    let mut written = Vec::new();
    let mut emit = |name: String, bytes: Vec<u8>| -> Result<()> {
        let p = dir.join(name);
        write_file(&p, bytes)?;
        written.push(p);
        Ok(())
    };
    match Clients::build(cfg, &vocab)? {
        Clients::Niah(ds) => {
            for c in &ds {
                for (split, items) in [("train", &c.train), ("eval", &c.eval)] {
                    let mut buf = Vec::new();
                    write_jsonl(items, &mut buf)?;
                    emit(format!("client_{}_{split}.jsonl", c.client_id), buf)?;
                }
            }
        }
        Clients::Streams(ss) => {
            for c in &ss {
                for (split, items) in [("train", &c.train), ("eval", &c.eval)] {
                    let mut buf = Vec::new();
                    write_jsonl(items, &mut buf)?;
                    emit(format!("client_{}_{split}_streams.jsonl", c.client_id), buf)?;
                }
            }
        }
    }
    Ok(written)
}

/// Finite-difference check of the full gradient on a short language-model
/// slice of client 0's first training item.
pub fn grad_check_config(cfg: &ExperimentConfig, tokens: usize) -> Result<GradCheckReport> {
    cfg.validate()?;
    let vocab = Vocab::standard();
    let backbone = cfg.backbone()?;
    let theta = cfg.initial_theta()?;
    let clients = Clients::build(cfg, &vocab)?;
    let first = clients.handles(&vocab).remove(0).train.remove(0);
    let n = tokens.clamp(2, first.tokens.len());
    let seq = Sequence::language_model(first.tokens[..n].to_vec());
    let options = cfg.federation.arm.forward_options(crate::model::ForwardOptions::new(&cfg.model));
    grad_check(&seq, &backbone, &theta, options, 1e-5)
}

/// Cross-run tables rendered from finished arm directories.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub arms: Vec<Arm>,
    /// `client_id,<arm>...` final-round accuracy.
    pub accuracy_csv: String,
    /// `depth,<arm>...` final-round accuracy.
    pub depth_csv: String,
    /// `arm,client_id,bin,normalized_ce` final round.
    pub streaming_csv: String,
    /// `arm,scope,round,upload_bytes_per_client,round_bytes,cumulative_bytes`.
    pub communication_csv: String,
}

impl Comparison {
    pub fn write(&self, dir: &Path) -> Result<()> {
        mkdir(dir)?;
        write_file(&dir.join("accuracy.csv"), &self.accuracy_csv)?;
        write_file(&dir.join("depth.csv"), &self.depth_csv)?;
        write_file(&dir.join("streaming_ce.csv"), &self.streaming_csv)?;
        write_file(&dir.join("communication.csv"), &self.communication_csv)
    }
}

fn flatten_json(prefix: &str, v: &serde_json::Value, out: &mut BTreeMap<String, String>) {
    match v {
        serde_json::Value::Object(m) => {
            for (k, x) in m {
                flatten_json(&format!("{prefix}.{k}"), x, out);
            }
        }
        serde_json::Value::Array(a) => {
            for (i, x) in a.iter().enumerate() {
                flatten_json(&format!("{prefix}[{i}]"), x, out);
            }
        }
        other => {
            out.insert(prefix.trim_start_matches('.').to_string(), other.to_string());
        }
    }
}

/// Field-by-field differences between two configs, ignoring arm selection and
/// output location.
pub fn config_diff(a: &ExperimentConfig, b: &ExperimentConfig) -> Vec<String> {
    let norm = |c: &ExperimentConfig| {
        let mut c = c.for_arm(Arm::Fednl);
        c.output_dir = PathBuf::new();
        let mut m = BTreeMap::new();
        flatten_json("", &serde_json::to_value(c).expect("config serializes"), &mut m);
        m
    };
    let (x, y) = (norm(a), norm(b));
    let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .filter(|k| x.get(*k) != y.get(*k))
        .map(|k| {
            let show = |m: &BTreeMap<String, String>| m.get(k).cloned().unwrap_or_else(|| "<absent>".into());
            format!("{k}: {} != {}", show(&x), show(&y))
        })
        .collect()
}

fn arm_dirs(dirs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for d in dirs {
        if d.join("run.json").is_file() {
            out.push(d.clone());
            continue;
        }
        let manifest = d.join("manifest.json");
        let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        out.extend(m.arms.iter().map(|a| d.join(a.as_str())));
    }
    Ok(out)
}

fn read_arm(dir: &Path) -> Result<(ArmRun, Vec<RoundReport>, Vec<EvalRecord>)> {
    if dir.join("FAILED").exists() {
        return Err(Error::contract(format!("{} did not complete", dir.display())));
    }
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
    };
    let run: ArmRun = serde_json::from_str(&read("run.json")?)?;
    let reports = crate::data::read_jsonl(read("rounds.jsonl")?.as_bytes())?;
    let records = crate::data::read_jsonl(read("metrics.jsonl")?.as_bytes())?;
    Ok((run, reports, records))
}

/// Accepts arm directories or experiment roots. All runs must share one
/// config apart from the arm; otherwise the differences are reported.
pub fn compare_arms(dirs: &[PathBuf]) -> Result<Comparison> {
    let dirs = arm_dirs(dirs)?;
    if dirs.is_empty() {
        return Err(Error::contract("no runs to compare"));
    }
    let runs: Vec<_> = dirs.iter().map(|d| read_arm(d)).collect::<Result<_>>()?;
    let base = &runs[0].0.config;
    for (d, (run, _, _)) in dirs.iter().zip(&runs).skip(1) {
        let diff = config_diff(base, &run.config);
        if !diff.is_empty() {
            return Err(config_error(
                "config",
                format!("{} is not comparable with {}:\n  {}", d.display(), dirs[0].display(), diff.join("\n  ")),
            ));
        }
    }
    let mut arms: Vec<Arm> = runs.iter().map(|r| r.0.arm).collect();
    let mut sorted = arms.clone();
    sorted.sort();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::contract("the same arm appears in more than one run"));
    }

    let final_rows = |records: &[EvalRecord], reports: &[RoundReport], kind: MetricKind| -> Vec<EvalRecord> {
        let last = reports.last().map(|r| r.round).unwrap_or(0);
        records.iter().filter(|r| r.round == last && r.kind == kind).cloned().collect()
    };
    let header = |first: &str, arms: &[Arm]| {
        let names: Vec<&str> = arms.iter().map(|a| a.as_str()).collect();
        format!("{first},{}\n", names.join(","))
    };

    let retrieval: Vec<Vec<EvalRecord>> =
        runs.iter().map(|(_, rep, rec)| final_rows(rec, rep, MetricKind::Retrieval)).collect();
    let mut clients: Vec<usize> = retrieval.iter().flatten().map(|r| r.client_id).collect();
    clients.sort_unstable();
    clients.dedup();
    let mut accuracy_csv = header("client_id", &arms);
    for c in &clients {
        let cells: Vec<String> = retrieval
            .iter()
            .map(|rows| {
                let mine: Vec<EvalRecord> = rows.iter().filter(|r| r.client_id == *c).cloned().collect();
                let by = accuracy_by_depth(&mine);
                let n: usize = by.iter().map(|b| b.2).sum();
                let acc: f64 = by.iter().map(|b| b.1 * b.2 as f64).sum::<f64>() / n.max(1) as f64;
                format!("{acc:.6}")
            })
            .collect();
        accuracy_csv.push_str(&format!("{c},{}\n", cells.join(",")));
    }
    let mut depth_csv = header("depth", &arms);
    let by_depth: Vec<Vec<(usize, f64, usize)>> = retrieval.iter().map(|r| accuracy_by_depth(r)).collect();
    let mut depths: Vec<usize> = by_depth.iter().flatten().map(|d| d.0).collect();
    depths.sort_unstable();
    depths.dedup();
    for d in depths {
        let cells: Vec<String> = by_depth
            .iter()
            .map(|rows| {
                rows.iter()
                    .find(|r| r.0 == d)
                    .map(|r| format!("{:.6}", r.1))
                    .unwrap_or_default()
            })
            .collect();
        depth_csv.push_str(&format!("{d},{}\n", cells.join(",")));
    }

    let mut streaming_csv = String::from("arm,client_id,bin,normalized_ce\n");
    for (run, rep, rec) in &runs {
        for r in final_rows(rec, rep, MetricKind::StreamingCe) {
            for (b, ce) in r.ce_per_bin.iter().enumerate() {
                streaming_csv.push_str(&format!("{},{},{b},{ce:.6}\n", run.arm.as_str(), r.client_id));
            }
        }
    }

    let pairs: Vec<(Arm, &[RoundReport])> = runs.iter().map(|(run, rep, _)| (run.arm, rep.as_slice())).collect();
    let comm = communication_summary(&pairs)?;
    let mut communication_csv =
        String::from("arm,scope,round,upload_bytes_per_client,round_bytes,cumulative_bytes\n");
    for r in &comm.rows {
        communication_csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.arm.as_str(),
            r.scope.as_str(),
            r.round,
            r.upload_bytes_per_client,
            r.round_bytes,
            r.cumulative_bytes
        ));
    }
    arms.dedup();
    Ok(Comparison {
        arms,
        accuracy_csv,
        depth_csv,
        streaming_csv,
        communication_csv,
    })
}
