//! Cross-validated evaluation: AUC, per-subgroup reports, embedding export
//! and the audit of which students each phase read.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::access::{Access, Phase, StudentStore};
use crate::data::{
    build_subgroups, kfold_splits, non_empty, DatasetSplit, StudentRecord, SubgroupKey, Variable,
    UNSPECIFIED,
};
use crate::error::{Error, Result};
use crate::federation::{run_federation, ClientData, FederationConfig, RoundMetric, Strategy};
use crate::neural::model::{infer, Head};
use crate::neural::train::predict_pass;
use crate::neural::{Dims, ModelParams};
use crate::pretrain::{pretrain, transfer_weights, PretrainConfig};
use crate::rng;

/// Area under the ROC curve with pass (`1`) as the positive class, via the
/// Mann-Whitney rank statistic with midranks for tied scores.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Domain(format!("label {l} is not binary")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Domain("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc(format!(
            "{n_pos} positive and {n_neg} negative students"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean.
        let midrank = (i + j + 2) as f64 / 2.0;
        pos_rank_sum += midrank * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Test-time record of one student.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredStudent {
    pub student_id: String,
    pub subgroup: SubgroupKey,
    pub pass_probability: f64,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub strategy: Strategy,
    pub variable: Variable,
    pub subgroup: String,
    pub mean_auc: Option<f64>,
    pub std_auc: Option<f64>,
    pub n_runs: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

/// Sample mean and standard deviation (`n - 1` denominator, 0 for one value).
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Some((mean, std))
}

impl EvalReport {
    /// Aggregates test AUCs over runs. Runs with an undefined AUC for a
    /// subgroup are left out of that subgroup's statistics.
    pub fn from_runs(runs: &[RunRecord]) -> Self {
        let mut cells: BTreeMap<(Strategy, SubgroupKey), Vec<f64>> = BTreeMap::new();
        for run in runs {
            for (key, a) in &run.test_auc {
                let cell = cells.entry((run.strategy, key.clone())).or_default();
                cell.extend(a);
            }
        }
        let rows = cells
            .into_iter()
            .map(|((strategy, key), values)| {
                let stats = mean_std(&values);
                ReportRow {
                    strategy,
                    variable: key.variable,
                    subgroup: key.group,
                    mean_auc: stats.map(|s| s.0),
                    std_auc: stats.map(|s| s.1),
                    n_runs: values.len(),
                }
            })
            .collect();
        Self { rows }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "strategy", "variable", "subgroup", "mean_auc", "std_auc", "n_runs",
        ])?;
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.rows {
            out.write_record([
                r.strategy.to_string(),
                r.variable.tag().to_string(),
                r.subgroup.clone(),
                fmt(r.mean_auc),
                fmt(r.std_auc),
                r.n_runs.to_string(),
            ])?;
        }
        out.flush().map_err(|e| Error::io("report", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut input = csv::Reader::from_reader(r);
        let parse_opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse()
                    .map(Some)
                    .map_err(|_| Error::Invalid(format!("bad number {s:?} in report")))
            }
        };
        let mut rows = Vec::new();
        for rec in input.records() {
            let rec = rec?;
            if rec.len() != 6 {
                return Err(Error::Invalid(format!(
                    "report row has {} fields, expected 6",
                    rec.len()
                )));
            }
            rows.push(ReportRow {
                strategy: rec[0].parse()?,
                variable: rec[1].parse()?,
                subgroup: rec[2].to_string(),
                mean_auc: parse_opt(&rec[3])?,
                std_auc: parse_opt(&rec[4])?,
                n_runs: rec[5]
                    .parse()
                    .map_err(|_| Error::Invalid(format!("bad run count {:?}", &rec[5])))?,
            });
        }
        Ok(Self { rows })
    }

    /// Fixed-width table for terminals.
    pub fn pretty(&self) -> String {
        let mut s = format!(
            "{:<14} {:<4} {:<12} {:>9} {:>9} {:>6}\n",
            "strategy", "var", "subgroup", "mean_auc", "std_auc", "runs"
        );
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<14} {:<4} {:<12} {:>9} {:>9} {:>6}",
                r.strategy.as_str(),
                r.variable.tag(),
                r.subgroup,
                fmt(r.mean_auc),
                fmt(r.std_auc),
                r.n_runs
            );
        }
        s
    }
}

/// Everything `cross_validate` needs besides the data.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub variable: Variable,
    pub include_unspecified: bool,
    pub strategies: Vec<Strategy>,
    pub federation: FederationConfig,
    pub pretrain: PretrainConfig,
    /// Fold count; values below 2 mean a single 4:1 split.
    pub folds: usize,
    /// Initialization seeds; every fold is run once per seed.
    pub seeds: Vec<u64>,
    /// Seed of the fold assignment, shared by all runs.
    pub split_seed: u64,
    /// Activity encoding width.
    pub input_width: usize,
}

/// One (strategy, fold, seed) run.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub strategy: Strategy,
    pub fold: usize,
    pub seed: u64,
    pub test_auc: BTreeMap<SubgroupKey, Option<f64>>,
    pub scores: Vec<ScoredStudent>,
    pub metrics: Vec<RoundMetric>,
    pub best_round: usize,
    pub final_models: BTreeMap<String, ModelParams>,
    /// Per-epoch pretraining losses of the (fold, seed) pair; empty when
    /// pretraining is off.
    pub pretrain_losses: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct CrossValidation {
    pub splits: Vec<DatasetSplit>,
    pub runs: Vec<RunRecord>,
    pub report: EvalReport,
}

/// Fixed folds from the split seed.
pub fn experiment_splits(store: &StudentStore, exp: &Experiment) -> Result<Vec<DatasetSplit>> {
    let records = store.all(0, Phase::Splitting);
    let groups = non_empty(build_subgroups(
        records.iter().copied(),
        exp.variable,
        exp.include_unspecified,
    ));
    if groups.is_empty() {
        return Err(Error::Invalid("no students in any subgroup".into()));
    }
    let labels: HashMap<String, u8> = records
        .iter()
        .map(|r| (r.student_id.clone(), r.label))
        .collect();
    kfold_splits(&groups, &labels, exp.folds, exp.split_seed)
}

/// Runs every strategy on every fold and seed. Runs execute on the current
/// rayon pool; results do not depend on its size.
pub fn cross_validate(store: &StudentStore, exp: &Experiment) -> Result<CrossValidation> {
    exp.federation.validate()?;
    if exp.seeds.is_empty() {
        return Err(Error::Invalid("no seeds configured".into()));
    }
    if exp.strategies.is_empty() {
        return Err(Error::Invalid("no strategies configured".into()));
    }
    let splits = experiment_splits(store, exp)?;
    let tasks: Vec<(usize, u64)> = (0..splits.len())
        .flat_map(|f| exp.seeds.iter().map(move |&s| (f, s)))
        .collect();
    let runs: Vec<Vec<RunRecord>> = tasks
        .par_iter()
        .map(|&(fold, seed)| run_fold(store, exp, &splits[fold], fold, seed))
        .collect::<Result<_>>()?;
    let mut runs: Vec<RunRecord> = runs.into_iter().flatten().collect();
    runs.sort_by_key(|r| (r.strategy, r.fold, r.seed));
    let report = EvalReport::from_runs(&runs);
    Ok(CrossValidation {
        splits,
        runs,
        report,
    })
}

/// Initial model of a (fold, seed) pair, with pretrained encoder weights
/// when enabled. Returns the model and the pretraining losses.
pub fn initial_model(
    store: &StudentStore,
    exp: &Experiment,
    split: &DatasetSplit,
    fold: usize,
    seed: u64,
) -> Result<(ModelParams, Vec<f64>)> {
    let dims = Dims::new(exp.input_width, exp.federation.train.hidden);
    let init = ModelParams::init(dims, &mut rng::stream(&[seed, rng::name_key("init")]));
    if !exp.pretrain.enabled {
        return Ok((init, Vec::new()));
    }
    let corpus_records = store.fetch(&split.train_union(), fold, Phase::Pretraining)?;
    let corpus: Vec<&[_]> = corpus_records
        .iter()
        .map(|r| r.sequence.as_slice())
        .collect();
    let t = &exp.federation.train;
    let (pretrained, losses) = pretrain(
        init.clone(),
        &corpus,
        &exp.pretrain,
        (t.optimizer, t.learning_rate, t.lr_decay),
        t.batch_size,
        rng::mix(&[seed, fold as u64]),
    )?;
    Ok((transfer_weights(&pretrained, &init)?, losses))
}

fn run_fold(
    store: &StudentStore,
    exp: &Experiment,
    split: &DatasetSplit,
    fold: usize,
    seed: u64,
) -> Result<Vec<RunRecord>> {
    let (init, pretrain_losses) = initial_model(store, exp, split, fold, seed)?;
    let run_seed = rng::mix(&[seed, fold as u64]);
    let mut out = Vec::with_capacity(exp.strategies.len());
    for &strategy in &exp.strategies {
        let clients = split
            .groups
            .iter()
            .map(|(key, s)| {
                Ok(ClientData {
                    key: key.clone(),
                    train: store.fetch(&s.train, fold, Phase::Training)?,
                    val: store.fetch(&s.val, fold, Phase::Validation)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let outcome = run_federation(strategy, &exp.federation, clients, init.clone(), run_seed)?;
        let mut test_auc = BTreeMap::new();
        let mut scores = Vec::new();
        for (key, s) in &split.groups {
            let test = store.fetch(&s.test, fold, Phase::Evaluation)?;
            let model = &outcome.checkpoints[key];
            let probs = predict_pass(model, &test)?;
            let labels: Vec<u8> = test.iter().map(|r| r.label).collect();
            let a = match auc(&probs, &labels) {
                Ok(a) => Some(a),
                Err(Error::UndefinedAuc(msg)) => {
                    log::warn!(
                        "{strategy} fold {fold} seed {seed}: AUC undefined for {key}: {msg}"
                    );
                    None
                }
                Err(e) => return Err(e),
            };
            test_auc.insert(key.clone(), a);
            scores.extend(test.iter().zip(&probs).map(|(r, &p)| ScoredStudent {
                student_id: r.student_id.clone(),
                subgroup: key.clone(),
                pass_probability: p,
                label: r.label,
            }));
        }
        log::info!("{strategy} fold {fold} seed {seed}: test AUC {test_auc:?}");
        out.push(RunRecord {
            strategy,
            fold,
            seed,
            test_auc,
            scores,
            metrics: outcome.metrics,
            best_round: outcome.best_round,
            final_models: outcome.final_models,
            pretrain_losses: pretrain_losses.clone(),
        });
    }
    Ok(out)
}

/// Reads that let a test student influence fitted parameters: any
/// pretraining or training access to a student in the same fold's test
/// split.
pub fn leak_violations(log: &[Access], splits: &[DatasetSplit]) -> Vec<Access> {
    let tests: Vec<BTreeSet<String>> = splits.iter().map(DatasetSplit::all_test).collect();
    log.iter()
        .filter(|a| {
            a.phase.fits_parameters()
                && tests.get(a.fold).is_some_and(|t| t.contains(&a.student_id))
        })
        .cloned()
        .collect()
}

/// Attention-pooled student representations.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingDump {
    pub hidden: usize,
    /// `(student_id, subgroup tag, pooled vector)`.
    pub rows: Vec<(String, String, Vec<f64>)>,
}

/// One pooled hidden vector per student, dropout off. Students are tagged
/// with their group on `variable`.
pub fn export_embeddings(
    model: &ModelParams,
    students: &[&StudentRecord],
    variable: Variable,
) -> Result<EmbeddingDump> {
    let rows = students
        .iter()
        .map(|s| {
            let trace = infer(model, &s.sequence, Head::Outcome)
                .map_err(|e| Error::Shape(format!("student {}: {e}", s.student_id)))?;
            let group = s.demographics.group(variable).unwrap_or(UNSPECIFIED);
            Ok((s.student_id.clone(), group.to_string(), trace.pooled))
        })
        .collect::<Result<_>>()?;
    Ok(EmbeddingDump {
        hidden: model.dims().hidden,
        rows,
    })
}

impl EmbeddingDump {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["student_id".to_string(), "subgroup".to_string()];
        header.extend((1..=self.hidden).map(|i| format!("h_{i}")));
        out.write_record(&header)?;
        for (id, group, h) in &self.rows {
            let mut rec = vec![id.clone(), group.clone()];
            rec.extend(h.iter().map(f64::to_string));
            out.write_record(&rec)?;
        }
        out.flush().map_err(|e| Error::io("embeddings", e))?;
        Ok(())
    }
}
