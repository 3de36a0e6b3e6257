//! Server loop: client selection, broadcast, parallel local training,
//! weighted aggregation and traffic accounting.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::UpdateRule;
use crate::model::{BackboneParams, ForwardOptions, GateOverride, MetaParams, ParamCounts, ParamGroup};
use crate::numerics::Rng;
use crate::records::{apply_records, write_records, Reader, TensorRecord};
use crate::trainer::{self, LocalMetrics, LocalTrainConfig, OptimizerState, Sequence, Trainable};

/// Bytes per communicated parameter (16-bit accounting).
pub const BYTES_PER_PARAM: usize = 2;

/// Method arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    #[default]
    Fednl,
    /// Softmax path only: gate pinned at 0.
    FedavgStatic,
    /// `FedavgStatic` with a proximal term.
    Fedprox,
    FednlHebbian,
    /// Linear path only: gate pinned at 1.
    FednlNoGate,
    FednlFrozenLora,
}

impl Arm {
    pub const ALL: [Arm; 6] = [
        Arm::Fednl,
        Arm::FedavgStatic,
        Arm::Fedprox,
        Arm::FednlHebbian,
        Arm::FednlNoGate,
        Arm::FednlFrozenLora,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Fednl => "fednl",
            Arm::FedavgStatic => "fedavg_static",
            Arm::Fedprox => "fedprox",
            Arm::FednlHebbian => "fednl_hebbian",
            Arm::FednlNoGate => "fednl_no_gate",
            Arm::FednlFrozenLora => "fednl_frozen_lora",
        }
    }

    pub fn forward_options(self, base: ForwardOptions) -> ForwardOptions {
        match self {
            Arm::Fednl | Arm::FednlFrozenLora => base.with_rule(UpdateRule::Delta).with_gate(GateOverride::Learned),
            Arm::FedavgStatic | Arm::Fedprox => base.with_gate(GateOverride::Pinned(0.0)),
            Arm::FednlHebbian => base.with_rule(UpdateRule::Hebbian).with_gate(GateOverride::Learned),
            Arm::FednlNoGate => base.with_rule(UpdateRule::Delta).with_gate(GateOverride::Pinned(1.0)),
        }
    }

    pub fn trainable(self) -> Trainable {
        match self {
            Arm::FednlFrozenLora => Trainable {
                lora: false,
                gate: true,
                beta: true,
            },
            _ => Trainable::ALL,
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which parameter groups travel between client and server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    #[default]
    AllMeta,
    /// Gate and write strength only; adapters stay on the client.
    MemoryRulesOnly,
}

impl Scope {
    pub fn includes(self, g: ParamGroup) -> bool {
        match self {
            Scope::AllMeta => true,
            Scope::MemoryRulesOnly => matches!(g, ParamGroup::Gate | ParamGroup::Beta),
        }
    }

    pub fn param_count(self, counts: &ParamCounts) -> usize {
        ParamGroup::ALL
            .iter()
            .filter(|&&g| self.includes(g))
            .map(|&g| counts.group(g))
            .sum()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scope::AllMeta => "all_meta",
            Scope::MemoryRulesOnly => "memory_rules_only",
        }
    }
}

pub fn payload_bytes(params: usize) -> usize {
    params * BYTES_PER_PARAM
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundConfig {
    pub rounds: usize,
    #[serde(default = "one")]
    pub local_epochs: usize,
    #[serde(default = "full")]
    pub participation: f64,
    #[serde(default)]
    pub scope: Scope,
    #[serde(default)]
    pub arm: Arm,
    pub lr: f64,
    /// Proximal coefficient; only the fedprox arm uses it.
    #[serde(default)]
    pub mu: f64,
    #[serde(default = "one")]
    pub batch_size: usize,
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

fn one() -> usize {
    1
}

fn full() -> f64 {
    1.0
}

impl RoundConfig {
    pub fn new(arm: Arm, rounds: usize, lr: f64) -> Self {
        Self {
            rounds,
            local_epochs: 1,
            participation: 1.0,
            scope: Scope::AllMeta,
            arm,
            lr,
            mu: 0.0,
            batch_size: 1,
            clip_norm: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| {
            Err(Error::Config {
                field: format!("federation.{field}"),
                message,
            })
        };
        if self.rounds == 0 {
            return bad("rounds", "must be at least 1".into());
        }
        if self.local_epochs == 0 {
            return bad("local_epochs", "must be at least 1".into());
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return bad("participation", format!("{} not in (0, 1]", self.participation));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr", format!("{} must be non-negative", self.lr));
        }
        if !(self.mu.is_finite() && self.mu >= 0.0) {
            return bad("mu", format!("{} must be non-negative", self.mu));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return bad("clip_norm", format!("{c} must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientHandle {
    pub id: usize,
    pub train: Vec<Sequence>,
}

impl ClientHandle {
    pub fn new(id: usize, train: Vec<Sequence>) -> Self {
        Self { id, train }
    }

    /// `N_k`.
    pub fn weight(&self) -> usize {
        self.train.len()
    }
}

/// `max(1, ⌊fraction·K⌋)` distinct clients, returned in ascending id order.
pub fn select_clients(all: &[ClientHandle], fraction: f64, rng: &mut Rng) -> Result<Vec<usize>> {
    if all.is_empty() {
        return Err(Error::contract("no clients to select from"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::contract(format!("participation fraction {fraction} not in (0, 1]")));
    }
    let mut ids: Vec<usize> = all.iter().map(|c| c.id).collect();
    let m = ((fraction * ids.len() as f64).floor() as usize).max(1);
    if m < ids.len() {
        rng.shuffle(&mut ids);
        ids.truncate(m);
    }
    ids.sort_unstable();
    Ok(ids)
}

/// Serialized client → server message: header plus the in-scope tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub weight: usize,
    pub scope: Scope,
    pub records: Vec<TensorRecord>,
}

const UPDATE_MAGIC: &[u8; 4] = b"FNLU";

impl ClientUpdate {
    pub fn from_params(client_id: usize, weight: usize, theta: &MetaParams, scope: Scope) -> Self {
        Self {
            client_id,
            weight,
            scope,
            records: TensorRecord::collect(theta, |g| scope.includes(g)),
        }
    }

    pub fn param_count(&self) -> usize {
        self.records.iter().map(|r| r.values.len()).sum()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(UPDATE_MAGIC);
        out.extend(crate::records::VERSION.to_le_bytes());
        out.extend((self.client_id as u64).to_le_bytes());
        out.extend((self.weight as u64).to_le_bytes());
        out.push(match self.scope {
            Scope::AllMeta => 0,
            Scope::MemoryRulesOnly => 1,
        });
        write_records(&mut out, &self.records);
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, "client update");
        r.header(UPDATE_MAGIC)?;
        let client_id = r.u64()? as usize;
        let weight = r.u64()? as usize;
        let scope = match r.take(1)?[0] {
            0 => Scope::AllMeta,
            1 => Scope::MemoryRulesOnly,
            s => {
                return Err(Error::Format {
                    what: "client update",
                    message: format!("unknown scope {s}"),
                })
            }
        };
        let records = r.records()?;
        r.finish()?;
        if let Some(bad) = records.iter().find(|rec| !scope.includes(rec.group)) {
            return Err(Error::Format {
                what: "client update",
                message: format!("tensor {} outside scope {}", bad.name, scope.as_str()),
            });
        }
        Ok(Self {
            client_id,
            weight,
            scope,
            records,
        })
    }
}

/// Weighted average `Σ (N_k / N) θ_k` over the in-scope groups, summed in
/// ascending client id; out-of-scope groups come from `previous`.
pub fn aggregate(updates: &[(usize, &MetaParams, usize)], scope: Scope, previous: &MetaParams) -> Result<MetaParams> {
    if updates.is_empty() {
        return Err(Error::contract("no client updates to aggregate"));
    }
    let mut order: Vec<&(usize, &MetaParams, usize)> = updates.iter().collect();
    order.sort_by_key(|u| u.0);
    if order.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::contract("duplicate client id in updates"));
    }
    let total: usize = order.iter().map(|u| u.2).sum();
    for &&(id, theta, n) in &order {
        if n == 0 {
            return Err(Error::contract(format!("client {id} has zero weight")));
        }
        if !theta.is_congruent(previous) {
            return Err(Error::contract(format!("client {id} update is not congruent with the global parameters")));
        }
    }
    let mut out = previous.clone();
    let mut first = true;
    for &&(_, theta, n) in &order {
        let w = n as f64 / total as f64;
        out.zip_mut(theta, |g, acc, val| {
            if !scope.includes(g) {
                return;
            }
            if first {
                acc.iter_mut().zip(val).for_each(|(a, &v)| *a = w * v);
            } else {
                acc.iter_mut().zip(val).for_each(|(a, &v)| *a += w * v);
            }
        });
        first = false;
    }
    // Rounding can leave a coordinate an ulp outside the clients' range.
    let mut first = true;
    let mut lo = previous.clone();
    let mut hi = previous.clone();
    for &&(_, theta, _) in &order {
        lo.zip_mut(theta, |g, acc, val| {
            if scope.includes(g) {
                acc.iter_mut().zip(val).for_each(|(a, &v)| *a = if first { v } else { a.min(v) });
            }
        });
        hi.zip_mut(theta, |g, acc, val| {
            if scope.includes(g) {
                acc.iter_mut().zip(val).for_each(|(a, &v)| *a = if first { v } else { a.max(v) });
            }
        });
        first = false;
    }
    clamp_between(&mut out, &lo, &hi);
    Ok(out)
}

fn clamp_between(x: &mut MetaParams, lo: &MetaParams, hi: &MetaParams) {
    let lo: Vec<&[f64]> = lo.tensors().iter().map(|t| t.values).collect();
    let hi: Vec<&[f64]> = hi.tensors().iter().map(|t| t.values).collect();
    let mut i = 0;
    x.for_each_mut(|_, v| {
        for ((x, &l), &h) in v.iter_mut().zip(lo[i]).zip(hi[i]) {
            *x = x.clamp(l, h);
        }
        i += 1;
    });
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundStats {
    pub client_id: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
    pub upload_bytes: usize,
    pub download_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub arm: Arm,
    pub scope: Scope,
    pub clients: Vec<ClientRoundStats>,
    /// Filled by the caller after evaluating the aggregate.
    #[serde(default)]
    pub eval: BTreeMap<String, f64>,
    pub round_bytes: usize,
    pub cumulative_bytes: usize,
}

/// Server state across rounds.
pub struct Federation<'a> {
    backbone: &'a BackboneParams,
    clients: Vec<ClientHandle>,
    global: MetaParams,
    /// Personal parameters kept on each client between rounds.
    local: Vec<MetaParams>,
    cfg: RoundConfig,
    base_options: ForwardOptions,
    seed: u64,
    round: usize,
    cumulative_bytes: usize,
}

impl<'a> Federation<'a> {
    pub fn new(
        backbone: &'a BackboneParams,
        theta0: MetaParams,
        clients: Vec<ClientHandle>,
        cfg: RoundConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if clients.is_empty() {
            return Err(Error::contract("federation needs at least one client"));
        }
        let mut ids: Vec<usize> = clients.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != clients.len() {
            return Err(Error::contract("client ids must be unique"));
        }
        if let Some(c) = clients.iter().find(|c| c.train.is_empty()) {
            return Err(Error::contract(format!("client {} has no training data", c.id)));
        }
        let local = vec![theta0.clone(); clients.len()];
        Ok(Self {
            backbone,
            base_options: ForwardOptions::new(&backbone.config),
            clients,
            global: theta0,
            local,
            cfg,
            seed,
            round: 0,
            cumulative_bytes: 0,
        })
    }

    pub fn global(&self) -> &MetaParams {
        &self.global
    }

    pub fn config(&self) -> &RoundConfig {
        &self.cfg
    }

    pub fn options(&self) -> ForwardOptions {
        self.cfg.arm.forward_options(self.base_options)
    }

    pub fn clients(&self) -> &[ClientHandle] {
        &self.clients
    }

    /// Parameters client `index` evaluates with: the global rules plus, when
    /// adapters are not aggregated, its own adapters.
    pub fn client_params(&self, index: usize) -> MetaParams {
        match self.cfg.scope {
            Scope::AllMeta => self.global.clone(),
            Scope::MemoryRulesOnly => self.merge(&self.local[index]),
        }
    }

    /// Client `index`'s parameters straight after its latest local training.
    pub fn local_params(&self, index: usize) -> &MetaParams {
        &self.local[index]
    }

    pub fn round(&self) -> usize {
        self.round
    }

    fn merge(&self, personal: &MetaParams) -> MetaParams {
        let mut out = personal.clone();
        out.zip_mut(&self.global, |g, mine, global| {
            if self.cfg.scope.includes(g) {
                mine.copy_from_slice(global);
            }
        });
        out
    }

    fn train_one(&self, index: usize, start: &MetaParams) -> Result<(MetaParams, LocalMetrics)> {
        let client = &self.clients[index];
        let lcfg = LocalTrainConfig {
            epochs: self.cfg.local_epochs,
            batch_size: self.cfg.batch_size,
            options: self.options(),
            trainable: self.cfg.arm.trainable(),
        };
        let mut opt = if self.cfg.arm == Arm::Fedprox {
            OptimizerState::fedprox(self.cfg.lr, self.cfg.mu, start.clone())
        } else {
            OptimizerState::sgd(self.cfg.lr)
        };
        opt.clip_norm = self.cfg.clip_norm;
        let mut rng = Rng::derive(self.seed, &[self.round as u64, client.id as u64]);
        trainer::train_local(client.id, &client.train, start, &lcfg, &mut opt, self.backbone, &mut rng)
    }

    /// One round. Returns the wire messages alongside the report so callers
    /// can inspect exactly what left each client.
    pub fn run_round(&mut self) -> Result<(RoundReport, Vec<Vec<u8>>)> {
        if self.round >= self.cfg.rounds {
            return Err(Error::contract(format!("all {} rounds already ran", self.cfg.rounds)));
        }
        let mut sel_rng = Rng::derive(self.seed, &[self.round as u64, u64::MAX]);
        let selected = select_clients(&self.clients, self.cfg.participation, &mut sel_rng)?;
        let index_of = |id: usize| self.clients.iter().position(|c| c.id == id).unwrap();
        let scope = self.cfg.scope;
        let in_scope = scope.param_count(&self.global.counts());

        let starts: Vec<(usize, MetaParams)> = selected
            .iter()
            .map(|&id| {
                let i = index_of(id);
                (i, self.merge(&self.local[i]))
            })
            .collect();
        let results: Vec<Result<(MetaParams, LocalMetrics)>> =
            starts.par_iter().map(|(i, start)| self.train_one(*i, start)).collect();

        let mut messages = Vec::with_capacity(selected.len());
        let mut stats = Vec::with_capacity(selected.len());
        let mut trained = Vec::with_capacity(selected.len());
        for ((i, _), res) in starts.iter().zip(results) {
            let (theta, metrics) = res?;
            let client = &self.clients[*i];
            let msg = ClientUpdate::from_params(client.id, client.weight(), &theta, scope).encode();
            stats.push(ClientRoundStats {
                client_id: client.id,
                initial_loss: metrics.initial_loss,
                final_loss: metrics.final_loss,
                steps: metrics.steps.len(),
                upload_bytes: payload_bytes(in_scope),
                download_bytes: payload_bytes(in_scope),
            });
            messages.push(msg);
            trained.push((*i, theta));
        }

        // Server side: only the decoded messages are used.
        let decoded: Vec<ClientUpdate> = messages.iter().map(|m| ClientUpdate::decode(m)).collect::<Result<_>>()?;
        let rebuilt: Vec<MetaParams> = decoded
            .iter()
            .map(|u| apply_records(&self.global, &u.records))
            .collect::<Result<_>>()?;
        let updates: Vec<(usize, &MetaParams, usize)> =
            decoded.iter().zip(&rebuilt).map(|(u, t)| (u.client_id, t, u.weight)).collect();
        let next = aggregate(&updates, scope, &self.global)?;

        for (i, theta) in trained {
            self.local[i] = theta;
        }
        self.global = next;
        let round_bytes: usize = stats.iter().map(|s| s.upload_bytes + s.download_bytes).sum();
        self.cumulative_bytes += round_bytes;
        let report = RoundReport {
            round: self.round,
            arm: self.cfg.arm,
            scope,
            clients: stats,
            eval: BTreeMap::new(),
            round_bytes,
            cumulative_bytes: self.cumulative_bytes,
        };
        self.round += 1;
        Ok((report, messages))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommRow {
    pub arm: Arm,
    pub scope: Scope,
    pub round: usize,
    pub upload_bytes_per_client: usize,
    pub round_bytes: usize,
    pub cumulative_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommSummary {
    pub rows: Vec<CommRow>,
    /// Per-client upload of each arm relative to the first arm.
    pub ratios: Vec<(Arm, Scope, f64)>,
}

/// Per-arm per-round payloads and their ratio to the first arm's payload.
pub fn communication_summary(runs: &[(Arm, &[RoundReport])]) -> Result<CommSummary> {
    let mut rows = Vec::new();
    let mut ratios = Vec::new();
    let mut reference = None;
    for &(arm, reports) in runs {
        let first = reports
            .first()
            .ok_or_else(|| Error::contract(format!("arm {arm} has no rounds")))?;
        let upload = first.clients.first().map(|c| c.upload_bytes).unwrap_or(0);
        for r in reports {
            rows.push(CommRow {
                arm,
                scope: r.scope,
                round: r.round,
                upload_bytes_per_client: r.clients.first().map(|c| c.upload_bytes).unwrap_or(0),
                round_bytes: r.round_bytes,
                cumulative_bytes: r.cumulative_bytes,
            });
        }
        let base = *reference.get_or_insert(upload);
        ratios.push((arm, first.scope, upload as f64 / base as f64));
    }
    Ok(CommSummary { rows, ratios })
}

/// `all_meta` payload over `memory_rules_only` payload.
pub fn scope_ratio(counts: &ParamCounts) -> f64 {
    Scope::AllMeta.param_count(counts) as f64 / Scope::MemoryRulesOnly.param_count(counts) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_backbone, GateMode, ModelConfig};

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            d_model: 8,
            head_dim: 4,
            heads: 2,
            layers: 1,
            window: 4,
            lora_rank: 2,
            lora_alpha: 4.0,
            gate_mode: GateMode::Scalar,
            per_token_beta: false,
            normalize_keys: true,
        }
    }

    fn clients(k: usize, rng: &mut Rng) -> Vec<ClientHandle> {
        (0..k)
            .map(|id| {
                let data = (0..2 + id)
                    .map(|_| Sequence::language_model((0..8).map(|_| rng.below(12)).collect()))
                    .collect();
                ClientHandle::new(id, data)
            })
            .collect()
    }

    #[test]
    fn selection_cases() {
        let mut rng = Rng::new(1);
        let cs = clients(7, &mut rng);
        assert_eq!(select_clients(&cs, 1.0, &mut rng).unwrap(), (0..7).collect::<Vec<_>>());
        let a = select_clients(&cs, 0.5, &mut Rng::new(4)).unwrap();
        let b = select_clients(&cs, 0.5, &mut Rng::new(4)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert_eq!(select_clients(&cs[..1], 0.1, &mut rng).unwrap(), vec![0]);
        assert!(select_clients(&[], 1.0, &mut rng).is_err());
        assert!(select_clients(&cs, 0.0, &mut rng).is_err());
    }

    #[test]
    fn aggregate_cases() {
        let cfg = tiny();
        let mut rng = Rng::new(2);
        let theta = MetaParams::init(&cfg, &mut rng).unwrap();
        let same = aggregate(&[(0, &theta, 3), (1, &theta, 5)], Scope::AllMeta, &theta).unwrap();
        assert_eq!(same, theta);

        let mut a = theta.zeros_like();
        let mut b = theta.zeros_like();
        a.gate.logits[0] = 0.0;
        b.gate.logits[0] = 4.0;
        let out = aggregate(&[(0, &a, 1), (1, &b, 3)], Scope::AllMeta, &theta).unwrap();
        assert_eq!(out.gate.logits[0], 3.0);

        b.lora[0].q.b.set(0, 0, 9.0);
        let rules = aggregate(&[(0, &a, 1), (1, &b, 3)], Scope::MemoryRulesOnly, &theta).unwrap();
        assert_eq!(rules.lora, theta.lora);
        assert_eq!(rules.gate.logits[0], 3.0);

        let other = MetaParams::init(&ModelConfig { layers: 2, ..cfg }, &mut rng).unwrap();
        assert!(aggregate(&[(0, &other, 1)], Scope::AllMeta, &theta).is_err());
    }

    #[test]
    fn update_message_round_trip() {
        let cfg = ModelConfig { per_token_beta: true, ..tiny() };
        let theta = MetaParams::init(&cfg, &mut Rng::new(3)).unwrap();
        for scope in [Scope::AllMeta, Scope::MemoryRulesOnly] {
            let u = ClientUpdate::from_params(4, 17, &theta, scope);
            let bytes = u.encode();
            let back = ClientUpdate::decode(&bytes).unwrap();
            assert_eq!(back, u);
            assert_eq!(back.param_count(), scope.param_count(&theta.counts()));
            assert!(ClientUpdate::decode(&bytes[..bytes.len() - 1]).is_err());
        }
    }

    #[test]
    fn single_client_round_returns_its_parameters() {
        let cfg = tiny();
        let mut rng = Rng::new(5);
        let bb = init_backbone(&cfg, &mut rng).unwrap();
        let theta = MetaParams::init(&cfg, &mut rng).unwrap();
        let cs = clients(1, &mut rng);
        let rc = RoundConfig::new(Arm::Fednl, 1, 0.1);
        let mut fed = Federation::new(&bb, theta.clone(), cs.clone(), rc.clone(), 9).unwrap();
        let (report, _) = fed.run_round().unwrap();
        let lcfg = LocalTrainConfig {
            epochs: 1,
            batch_size: 1,
            options: fed.options(),
            trainable: Trainable::ALL,
        };
        let (solo, _) = trainer::train_local(
            0,
            &cs[0].train,
            &theta,
            &lcfg,
            &mut OptimizerState::sgd(0.1),
            &bb,
            &mut Rng::derive(9, &[0, 0]),
        )
        .unwrap();
        assert_eq!(fed.global(), &solo);
        assert_eq!(report.clients.len(), 1);
        assert!(fed.run_round().is_err());
    }

    #[test]
    fn zero_lr_keeps_theta_and_counts_traffic() {
        let cfg = tiny();
        let mut rng = Rng::new(6);
        let bb = init_backbone(&cfg, &mut rng).unwrap();
        let theta = MetaParams::init(&cfg, &mut rng).unwrap();
        let rc = RoundConfig::new(Arm::Fednl, 2, 0.0);
        let mut fed = Federation::new(&bb, theta.clone(), clients(3, &mut rng), rc, 1).unwrap();
        let (r0, _) = fed.run_round().unwrap();
        let (r1, _) = fed.run_round().unwrap();
        assert_eq!(fed.global(), &theta);
        let per = payload_bytes(theta.counts().total());
        assert_eq!(r0.round_bytes, 3 * 2 * per);
        assert!(r1.cumulative_bytes > r0.cumulative_bytes);
    }

    #[test]
    fn scope_accounting() {
        let cfg = ModelConfig::toy(175);
        let counts = crate::model::expected_counts(&cfg);
        assert_eq!(Scope::AllMeta.param_count(&counts), counts.total());
        assert_eq!(Scope::MemoryRulesOnly.param_count(&counts), counts.gate + counts.beta);
        assert!(scope_ratio(&counts) > 50.0);
        assert_eq!(payload_bytes(11_300_000), 22_600_000);
    }
}
