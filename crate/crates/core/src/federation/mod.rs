//! Round-based training across demographic subgroups: local-only, pooled,
//! federated (size- or attention-weighted aggregation, IRT-weighted
//! interpolation) and meta-learned personalized variants.

pub mod aggregate;
pub mod meta;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{StudentRecord, SubgroupKey};
use crate::error::{Error, Result};
use crate::eval::auc;
use crate::irt::{fit_rasch, irt_confidence, ResponseMatrix};
use crate::neural::train::{batch_gradient, batches, plain_epoch, predict_pass, BatchSettings};
use crate::neural::{params_cosine, ModelParams, OptState, OptimizerKind, DEFAULT_HIDDEN};
use crate::rng::{self, StreamRng};

pub use aggregate::{
    fedatt_aggregate, fedavg_aggregate, weighted_sum, AttentionWeights, AttnAggConfig,
    AttnWeightMode,
};
pub use meta::{meta_gradient, MetaConfig, MetaMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    Local,
    Central,
    FedAvg,
    FedAtt,
    #[serde(rename = "FedIRT")]
    FedIrt,
    PerFedAvgAgg,
    PerFedAttn,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Local,
        Strategy::Central,
        Strategy::FedAvg,
        Strategy::FedAtt,
        Strategy::FedIrt,
        Strategy::PerFedAvgAgg,
        Strategy::PerFedAttn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Local => "Local",
            Strategy::Central => "Central",
            Strategy::FedAvg => "FedAvg",
            Strategy::FedAtt => "FedAtt",
            Strategy::FedIrt => "FedIRT",
            Strategy::PerFedAvgAgg => "PerFedAvgAgg",
            Strategy::PerFedAttn => "PerFedAttn",
        }
    }

    /// Local phases use meta-updates.
    pub fn is_meta(self) -> bool {
        matches!(self, Strategy::PerFedAvgAgg | Strategy::PerFedAttn)
    }

    /// Evaluated on per-subgroup models adapted from the global model.
    pub fn is_personalized(self) -> bool {
        self.is_meta() || self == Strategy::FedIrt
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown strategy {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationSchedule {
    /// Global rounds `K`.
    pub rounds: usize,
    /// Local epochs per round `E`.
    pub local_iters: usize,
}

impl Default for FederationSchedule {
    fn default() -> Self {
        Self {
            rounds: 10,
            local_iters: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub hidden: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: DEFAULT_HIDDEN,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            lr_decay: 1e-3,
            batch_size: 8,
            dropout: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn batch_settings(&self) -> BatchSettings {
        BatchSettings {
            batch_size: self.batch_size,
            dropout: self.dropout,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IrtSettings {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for IrtSettings {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    pub schedule: FederationSchedule,
    pub train: TrainConfig,
    pub meta: MetaConfig,
    pub attention: AttnAggConfig,
    pub irt: IrtSettings,
}

impl FederationConfig {
    /// Collects every out-of-range field.
    pub fn validate(&self) -> Result<()> {
        let mut issues = Vec::new();
        if self.schedule.local_iters < 1 {
            issues.push("schedule.local_iters must be at least 1".to_string());
        }
        let t = &self.train;
        if t.hidden < 1 {
            issues.push("train.hidden must be at least 1".into());
        }
        if !(t.learning_rate >= 0.0 && t.learning_rate.is_finite()) {
            issues.push(format!(
                "train.learning_rate must be non-negative, got {}",
                t.learning_rate
            ));
        }
        if !(t.lr_decay >= 0.0 && t.lr_decay.is_finite()) {
            issues.push(format!(
                "train.lr_decay must be non-negative, got {}",
                t.lr_decay
            ));
        }
        if t.batch_size < 1 {
            issues.push("train.batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&t.dropout) {
            issues.push(format!(
                "train.dropout must lie in [0, 1), got {}",
                t.dropout
            ));
        }
        if let Err(e) = self.meta.validate() {
            issues.push(e.to_string());
        }
        if !(self.attention.step > 0.0 && self.attention.step.is_finite()) {
            issues.push(format!(
                "attention.step must be positive, got {}",
                self.attention.step
            ));
        }
        if !(self.irt.tol > 0.0) {
            issues.push(format!("irt.tol must be positive, got {}", self.irt.tol));
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidSpec(issues))
        }
    }

    fn optimizer_for(&self, strategy: Strategy, dims: crate::neural::Dims) -> OptState {
        let lr = if strategy.is_meta() {
            self.meta.outer_step.unwrap_or(self.train.learning_rate)
        } else {
            self.train.learning_rate
        };
        OptState::new(self.train.optimizer, lr, self.train.lr_decay, dims)
    }
}

/// Students available to one subgroup.
#[derive(Clone, Debug)]
pub struct ClientData<'a> {
    pub key: SubgroupKey,
    pub train: Vec<&'a StudentRecord>,
    pub val: Vec<&'a StudentRecord>,
}

#[derive(Clone, Debug)]
pub struct ClientState<'a> {
    /// Position in subgroup order; keys the client's random streams.
    pub index: usize,
    pub data: ClientData<'a>,
    pub model: ModelParams,
    /// Local model at the end of the previous round.
    pub previous: Option<ModelParams>,
    pub opt: OptState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalState {
    pub model: ModelParams,
    pub round: usize,
    pub strategy: Strategy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundMetric {
    /// Global round for federated strategies, epoch for Local and Central.
    pub round: usize,
    pub subgroup: SubgroupKey,
    pub strategy: Strategy,
    pub val_auc: Option<f64>,
    pub train_loss: f64,
}

#[derive(Clone, Debug)]
pub struct FederationOutcome {
    pub global: GlobalState,
    pub metrics: Vec<RoundMetric>,
    /// Model each subgroup is evaluated with: the best-validation checkpoint,
    /// adapted per subgroup for personalized strategies.
    pub checkpoints: BTreeMap<SubgroupKey, ModelParams>,
    /// Round (or epoch) the checkpoints come from; per-subgroup for Local,
    /// where this holds the latest one.
    pub best_round: usize,
    /// End-of-training models: `"global"`, or one per subgroup tag for Local.
    pub final_models: BTreeMap<String, ModelParams>,
}

/// Shared settings of one federation run.
#[derive(Clone, Copy)]
pub struct RunContext<'c> {
    pub strategy: Strategy,
    pub cfg: &'c FederationConfig,
    pub seed: u64,
}

impl RunContext<'_> {
    fn epoch_rng(&self, client: usize, round: usize, epoch: usize) -> StreamRng {
        rng::stream(&[
            self.seed,
            rng::name_key("train"),
            client as u64,
            round as u64,
            epoch as u64,
        ])
    }

    /// One local epoch: meta-updates for personalized meta strategies, plain
    /// descent otherwise. Returns the mean per-student loss at the visited
    /// parameters.
    pub fn local_epoch(
        &self,
        params: &mut ModelParams,
        opt: &mut OptState,
        data: &[&StudentRecord],
        rng: &mut StreamRng,
        epoch: usize,
    ) -> Result<f64> {
        let settings = self.cfg.train.batch_settings();
        if !self.strategy.is_meta() {
            return plain_epoch(params, opt, data, settings, rng, epoch);
        }
        if data.is_empty() {
            return Err(Error::Invalid("no training students".into()));
        }
        let mut total = 0.0;
        for batch in batches(data, settings.batch_size, rng) {
            let seed: u64 = rng.gen();
            let mut first_loss = None;
            let g = meta_gradient(params, &self.cfg.meta, |p| {
                let (loss, g) = batch_gradient(p, &batch, settings.dropout, seed)?;
                first_loss.get_or_insert(loss);
                Ok(g)
            })?;
            opt.step(params, &g, epoch)?;
            total += first_loss.unwrap_or(0.0);
        }
        Ok(total / data.len() as f64)
    }
}

/// Validation AUC, or `None` when the students are single-class.
pub fn validation_auc(model: &ModelParams, students: &[&StudentRecord]) -> Result<Option<f64>> {
    let scores = predict_pass(model, students)?;
    let labels: Vec<u8> = students.iter().map(|s| s.label).collect();
    match auc(&scores, &labels) {
        Ok(a) => Ok(Some(a)),
        Err(Error::UndefinedAuc(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn mean_defined(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.into_iter().flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Whether `candidate` beats the current best; undefined scores only win
/// against nothing, so the last round is kept when no score is defined.
fn improves(candidate: Option<f64>, best: Option<Option<f64>>) -> bool {
    match (candidate, best) {
        (_, None) => true,
        (Some(c), Some(Some(b))) => c > b,
        (Some(_), Some(None)) => true,
        (None, Some(None)) => true,
        (None, Some(Some(_))) => false,
    }
}

/// FedIRT round start: `lambda * previous + (1 - lambda) * global` with
/// `lambda = cos(previous, global)`, or the global model when no previous
/// local model exists. Returns `(lambda, init)`.
pub fn fedirt_init(
    previous: Option<&ModelParams>,
    global: &ModelParams,
) -> Result<(f64, ModelParams)> {
    let Some(prev) = previous else {
        return Ok((0.0, global.clone()));
    };
    let lambda = params_cosine(prev, global)?;
    let mut init = global.clone();
    init.scale(1.0 - lambda);
    init.add_scaled(lambda, prev)?;
    Ok((lambda, init))
}

/// IRT confidence weights from a Rasch fit of each client's training
/// responses.
pub fn irt_weights(
    clients: &[ClientData<'_>],
    settings: &IrtSettings,
) -> Result<BTreeMap<SubgroupKey, f64>> {
    let mut fits = BTreeMap::new();
    for c in clients {
        let fit = ResponseMatrix::from_records(&c.train)
            .and_then(|m| fit_rasch(&m, settings.max_iters, settings.tol))
            .map_err(|e| e.in_round(0, c.key.to_string()))?;
        fits.insert(c.key.clone(), fit);
    }
    Ok(irt_confidence(&fits))
}

/// One client's local phase of round `round`; leaves the result in
/// `client.model` and returns the mean training loss over the round.
fn local_round(
    ctx: &RunContext<'_>,
    client: &mut ClientState<'_>,
    global: &ModelParams,
    round: usize,
) -> Result<f64> {
    client.model = if ctx.strategy == Strategy::FedIrt {
        fedirt_init(client.previous.as_ref(), global)?.1
    } else {
        global.clone()
    };
    let e_count = ctx.cfg.schedule.local_iters;
    let mut loss = 0.0;
    for e in 0..e_count {
        let mut r = ctx.epoch_rng(client.index, round, e);
        let epoch = (round - 1) * e_count + e;
        loss += ctx.local_epoch(
            &mut client.model,
            &mut client.opt,
            &client.data.train,
            &mut r,
            epoch,
        )?;
    }
    client.previous = Some(client.model.clone());
    Ok(loss / e_count as f64)
}

/// Personalized evaluation model: one local epoch from `global` on a copy of
/// the client's optimizer state. Global strategies get `global` back.
pub fn adapt_for_eval(
    ctx: &RunContext<'_>,
    global: &ModelParams,
    client: &ClientState<'_>,
    round: usize,
) -> Result<ModelParams> {
    if !ctx.strategy.is_personalized() {
        return Ok(global.clone());
    }
    let mut model = global.clone();
    let mut opt = client.opt.clone();
    let mut r = rng::stream(&[
        ctx.seed,
        rng::name_key("adapt"),
        client.index as u64,
        round as u64,
    ]);
    let epoch = round * ctx.cfg.schedule.local_iters;
    ctx.local_epoch(&mut model, &mut opt, &client.data.train, &mut r, epoch)?;
    Ok(model)
}

/// Aggregates the clients' local models into a new global model.
fn aggregate(
    ctx: &RunContext<'_>,
    global: &ModelParams,
    clients: &[ClientState<'_>],
    irt: &BTreeMap<SubgroupKey, f64>,
) -> Result<ModelParams> {
    match ctx.strategy {
        Strategy::FedAvg | Strategy::PerFedAvgAgg => {
            let locals: Vec<_> = clients
                .iter()
                .map(|c| (&c.model, c.data.train.len()))
                .collect();
            fedavg_aggregate(&locals)
        }
        Strategy::FedAtt | Strategy::PerFedAttn => {
            let locals: Vec<_> = clients.iter().map(|c| &c.model).collect();
            fedatt_aggregate(global, &locals, &ctx.cfg.attention).map(|(m, _)| m)
        }
        Strategy::FedIrt => {
            let terms = clients
                .iter()
                .map(|c| {
                    irt.get(&c.data.key)
                        .map(|&w| (&c.model, w))
                        .ok_or_else(|| Error::Invalid(format!("no IRT weight for {}", c.data.key)))
                })
                .collect::<Result<Vec<_>>>()?;
            weighted_sum(terms)
        }
        Strategy::Local | Strategy::Central => Err(Error::Invalid(format!(
            "{} does not aggregate",
            ctx.strategy
        ))),
    }
}

/// Runs one strategy from `init` over the given clients.
pub fn run_federation(
    strategy: Strategy,
    cfg: &FederationConfig,
    clients: Vec<ClientData<'_>>,
    init: ModelParams,
    seed: u64,
) -> Result<FederationOutcome> {
    cfg.validate()?;
    if clients.is_empty() {
        return Err(Error::Invalid("no subgroups to train".into()));
    }
    for c in &clients {
        if c.train.is_empty() {
            return Err(
                Error::Invalid("empty training split".into()).in_round(0, c.key.to_string())
            );
        }
    }
    let ctx = RunContext {
        strategy,
        cfg,
        seed,
    };
    match strategy {
        Strategy::Local => run_local(&ctx, clients, init),
        Strategy::Central => run_central(&ctx, clients, init),
        _ => run_federated(&ctx, clients, init),
    }
}

fn new_states<'a>(
    ctx: &RunContext<'_>,
    clients: Vec<ClientData<'a>>,
    init: &ModelParams,
) -> Vec<ClientState<'a>> {
    clients
        .into_iter()
        .enumerate()
        .map(|(index, data)| ClientState {
            index,
            data,
            model: init.clone(),
            previous: None,
            opt: ctx.cfg.optimizer_for(ctx.strategy, init.dims()),
        })
        .collect()
}

fn run_federated(
    ctx: &RunContext<'_>,
    clients: Vec<ClientData<'_>>,
    init: ModelParams,
) -> Result<FederationOutcome> {
    let irt = if ctx.strategy == Strategy::FedIrt {
        irt_weights(&clients, &ctx.cfg.irt)?
    } else {
        BTreeMap::new()
    };
    let mut states = new_states(ctx, clients, &init);
    let mut global = init;
    let mut metrics = Vec::new();
    let mut best: Option<Option<f64>> = None;
    let mut best_round = 0;
    let mut checkpoints: BTreeMap<SubgroupKey, ModelParams> = states
        .iter()
        .map(|c| (c.data.key.clone(), global.clone()))
        .collect();

    for k in 1..=ctx.cfg.schedule.rounds {
        let losses: Vec<f64> = states
            .par_iter_mut()
            .map(|c| {
                local_round(ctx, c, &global, k).map_err(|e| e.in_round(k, c.data.key.to_string()))
            })
            .collect::<Result<_>>()?;
        global = aggregate(ctx, &global, &states, &irt).map_err(|e| e.in_round(k, "all"))?;
        if !global.is_finite() {
            return Err(Error::Optimizer("non-finite global model".into()).in_round(k, "all"));
        }
        let evals: Vec<(ModelParams, Option<f64>)> = states
            .par_iter()
            .map(|c| {
                let model = adapt_for_eval(ctx, &global, c, k)?;
                let auc = validation_auc(&model, &c.data.val)?;
                Ok((model, auc))
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.in_round(k, "evaluation"))?;
        for ((c, loss), (_, auc)) in states.iter().zip(&losses).zip(&evals) {
            metrics.push(RoundMetric {
                round: k,
                subgroup: c.data.key.clone(),
                strategy: ctx.strategy,
                val_auc: *auc,
                train_loss: *loss,
            });
        }
        let score = mean_defined(evals.iter().map(|(_, a)| *a));
        log::debug!("{} round {k}: mean validation AUC {score:?}", ctx.strategy);
        if improves(score, best) {
            best = Some(score);
            best_round = k;
            checkpoints = states
                .iter()
                .map(|c| c.data.key.clone())
                .zip(evals.into_iter().map(|(m, _)| m))
                .collect();
        }
    }
    let final_models = BTreeMap::from([("global".to_string(), global.clone())]);
    Ok(FederationOutcome {
        global: GlobalState {
            model: global,
            round: ctx.cfg.schedule.rounds,
            strategy: ctx.strategy,
        },
        metrics,
        checkpoints,
        best_round,
        final_models,
    })
}

/// Each subgroup trains alone for `E * K` epochs and keeps its own
/// best-validation epoch.
fn run_local(
    ctx: &RunContext<'_>,
    clients: Vec<ClientData<'_>>,
    init: ModelParams,
) -> Result<FederationOutcome> {
    let e_count = ctx.cfg.schedule.local_iters;
    let total = e_count * ctx.cfg.schedule.rounds;
    let mut states = new_states(ctx, clients, &init);
    type LocalResult = (Vec<RoundMetric>, ModelParams, usize);
    let results: Vec<LocalResult> = states
        .par_iter_mut()
        .map(|c| {
            let mut metrics = Vec::with_capacity(total);
            let mut best: Option<Option<f64>> = None;
            let mut best_model = c.model.clone();
            let mut best_epoch = 0;
            for j in 0..total {
                let mut r = ctx.epoch_rng(c.index, j / e_count + 1, j % e_count);
                let loss = ctx
                    .local_epoch(&mut c.model, &mut c.opt, &c.data.train, &mut r, j)
                    .map_err(|e| e.in_round(j + 1, c.data.key.to_string()))?;
                let auc = validation_auc(&c.model, &c.data.val)?;
                metrics.push(RoundMetric {
                    round: j + 1,
                    subgroup: c.data.key.clone(),
                    strategy: ctx.strategy,
                    val_auc: auc,
                    train_loss: loss,
                });
                if improves(auc, best) {
                    best = Some(auc);
                    best_model = c.model.clone();
                    best_epoch = j + 1;
                }
            }
            Ok((metrics, best_model, best_epoch))
        })
        .collect::<Result<_>>()?;
    let mut metrics = Vec::new();
    let mut checkpoints = BTreeMap::new();
    let mut best_round = 0;
    for (c, (m, model, epoch)) in states.iter().zip(results) {
        metrics.extend(m);
        checkpoints.insert(c.data.key.clone(), model);
        best_round = best_round.max(epoch);
    }
    metrics.sort_by_key(|m| m.round);
    let final_models = states
        .iter()
        .map(|c| (c.data.key.to_string(), c.model.clone()))
        .collect();
    Ok(FederationOutcome {
        global: GlobalState {
            model: init,
            round: ctx.cfg.schedule.rounds,
            strategy: ctx.strategy,
        },
        metrics,
        checkpoints,
        best_round,
        final_models,
    })
}

/// One model on the union of all training splits, selected by mean
/// per-subgroup validation AUC after each epoch.
fn run_central(
    ctx: &RunContext<'_>,
    clients: Vec<ClientData<'_>>,
    init: ModelParams,
) -> Result<FederationOutcome> {
    let e_count = ctx.cfg.schedule.local_iters;
    let total = e_count * ctx.cfg.schedule.rounds;
    let pooled: Vec<&StudentRecord> = clients
        .iter()
        .flat_map(|c| c.train.iter().copied())
        .collect();
    let mut model = init;
    let mut opt = ctx.cfg.optimizer_for(ctx.strategy, model.dims());
    let mut metrics = Vec::new();
    let mut best: Option<Option<f64>> = None;
    let mut best_model = model.clone();
    let mut best_round = 0;
    for j in 0..total {
        let mut r = ctx.epoch_rng(0, j / e_count + 1, j % e_count);
        let loss = ctx
            .local_epoch(&mut model, &mut opt, &pooled, &mut r, j)
            .map_err(|e| e.in_round(j + 1, "pooled"))?;
        let aucs = clients
            .iter()
            .map(|c| validation_auc(&model, &c.val))
            .collect::<Result<Vec<_>>>()?;
        for (c, auc) in clients.iter().zip(&aucs) {
            metrics.push(RoundMetric {
                round: j + 1,
                subgroup: c.key.clone(),
                strategy: ctx.strategy,
                val_auc: *auc,
                train_loss: loss,
            });
        }
        let score = mean_defined(aucs);
        if improves(score, best) {
            best = Some(score);
            best_model = model.clone();
            best_round = j + 1;
        }
    }
    let checkpoints = clients
        .iter()
        .map(|c| (c.key.clone(), best_model.clone()))
        .collect();
    let final_models = BTreeMap::from([("global".to_string(), model.clone())]);
    Ok(FederationOutcome {
        global: GlobalState {
            model,
            round: ctx.cfg.schedule.rounds,
            strategy: ctx.strategy,
        },
        metrics,
        checkpoints,
        best_round,
        final_models,
    })
}

/// Writes per-round metrics as CSV.
pub fn write_metrics_csv<W: std::io::Write>(w: W, metrics: &[RoundMetric]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["round", "subgroup", "strategy", "val_auc", "train_loss"])?;
    for m in metrics {
        out.write_record([
            m.round.to_string(),
            m.subgroup.to_string(),
            m.strategy.to_string(),
            m.val_auc.map(|a| a.to_string()).unwrap_or_default(),
            m.train_loss.to_string(),
        ])?;
    }
    out.flush().map_err(|e| Error::io("metrics", e))?;
    Ok(())
}
