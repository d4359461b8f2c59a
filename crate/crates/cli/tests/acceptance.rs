//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use perfed_cli::{experiment, load_store, ExperimentConfig};
use perfed_core::access::StudentStore;
use perfed_core::data::{
    encode_event, ActivityEvent, ActivityKind, EncodedActivity, SubgroupKey, Variable,
};
use perfed_core::eval::{auc, cross_validate, leak_violations, CrossValidation, Experiment};
use perfed_core::federation::{
    fedatt_aggregate, fedavg_aggregate, meta_gradient, run_federation, AttnAggConfig,
    AttnWeightMode, ClientData, FederationConfig, FederationSchedule, MetaConfig, MetaMode,
    Strategy, TrainConfig,
};
use perfed_core::irt::{fit_rasch, response_probability, ResponseMatrix};
use perfed_core::neural::model::{backward, infer, student_bce, Head, Target};
use perfed_core::neural::{Dims, ModelParams};
use perfed_core::pretrain::PretrainConfig;
use perfed_core::rng;
use perfed_core::synthgen::{generate_cohort, profile_divergence, CohortSpec};
use rand::Rng;

type Outcome = Result<String, String>;

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_activity(r: &mut impl Rng, n_videos: usize) -> EncodedActivity {
    let kind = ActivityKind::ALL[r.gen_range(0..ActivityKind::ALL.len())];
    let event = if kind.is_watch() {
        ActivityEvent::watch("u", 0, kind, r.gen_range(0..n_videos))
    } else {
        ActivityEvent::forum("u", 0, kind)
    };
    encode_event(&event, None, n_videos).expect("valid event")
}

fn uniform_params(dims: Dims, r: &mut impl Rng, scale: f64) -> ModelParams {
    let n = ModelParams::zeros(dims).len();
    ModelParams::from_vec(dims, (0..n).map(|_| r.gen_range(-scale..scale)).collect())
        .expect("sized")
}

/// Summed outcome loss of a batch and its analytic gradient.
fn outcome_loss(params: &ModelParams, batch: &[(Vec<EncodedActivity>, u8)]) -> f64 {
    batch
        .iter()
        .map(|(seq, y)| student_bce(&infer(params, seq, Head::Outcome).unwrap().probs, *y))
        .sum()
}

fn gradient_correctness() -> Outcome {
    let (k, d, len, h) = (4, 10, 6, 1e-5);
    let dims = Dims::new(d, k);
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let mut r = rng::stream(&[seed, 17]);
        let params = uniform_params(dims, &mut r, 0.8);
        let batch: Vec<(Vec<EncodedActivity>, u8)> = (0..3)
            .map(|i| {
                (
                    (0..len).map(|_| random_activity(&mut r, d - 7)).collect(),
                    (i % 2) as u8,
                )
            })
            .collect();
        let mut analytic = ModelParams::zeros(dims);
        for (seq, y) in &batch {
            let trace = infer(&params, seq, Head::Outcome).unwrap();
            let (_, g) = backward(&trace, Target::Outcome(*y), &params).unwrap();
            analytic.add_scaled(1.0, &g).unwrap();
        }
        for i in 0..params.len() {
            let mut plus = params.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = params.clone();
            minus.as_mut_slice()[i] -= h;
            let numeric = (outcome_loss(&plus, &batch) - outcome_loss(&minus, &batch)) / (2.0 * h);
            let a = analytic.as_slice()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    check(worst <= 1e-4, || format!("max relative error {worst:.3e}"))?;
    Ok(format!("max relative error {worst:.2e} over 20 models"))
}

fn meta_gradient_oracle() -> Outcome {
    let (a, alpha) = (2.0, 0.1);
    let theta = [0.7, -1.3, 0.25, 2.0];
    let dims = Dims::new(8, 1);
    let mut params = ModelParams::zeros(dims);
    for (p, t) in params.as_mut_slice().iter_mut().zip(theta.iter().cycle()) {
        *p = *t;
    }
    let grad = |p: &ModelParams| {
        let mut g = p.clone();
        g.scale(a);
        Ok(g)
    };
    let mut errs = Vec::new();
    for (mode, factor, tol) in [
        (MetaMode::FirstOrder, a * (1.0 - alpha * a), 1e-10),
        (MetaMode::HessianFd, a * (1.0 - alpha * a).powi(2), 1e-6),
    ] {
        let cfg = MetaConfig {
            inner_step: alpha,
            mode,
            ..MetaConfig::default()
        };
        let g = meta_gradient(&params, &cfg, grad).map_err(|e| e.to_string())?;
        let err = g
            .as_slice()
            .iter()
            .zip(params.as_slice())
            .map(|(g, t)| (g - factor * t).abs())
            .fold(0.0, f64::max);
        check(err <= tol, || {
            format!("{mode:?} error {err:.3e} exceeds {tol:e}")
        })?;
        errs.push(format!("{mode:?} {err:.1e}"));
    }
    Ok(format!("errors: {}", errs.join(", ")))
}

fn tiny_spec(population: usize) -> CohortSpec {
    let row = |stay: f64, i: usize| -> Vec<f64> {
        (0..7)
            .map(|j| (1.0 - stay) / 7.0 + if i == j { stay } else { 0.0 })
            .collect()
    };
    let profile = |name: &str, stay: f64, wf: f64| {
        serde_json::json!({
            "name": name,
            "population": population,
            "transition": (0..7).map(|i| row(stay, i)).collect::<Vec<_>>(),
            "video_access": [0.25, 0.25, 0.25, 0.25],
            "quiz_correct_prob": 0.5,
            "length_dist": {"mean": 6.0},
            "pass_model": {"intercept": -1.0, "weight_on_correct_fraction": 3.0, "weight_on_forum_fraction": wf}
        })
    };
    serde_json::from_value(serde_json::json!({
        "n_videos": 4,
        "quiz_videos": [1, 3],
        "demographic_variable": "G",
        "profiles": [profile("M", 0.6, 2.0), profile("F", 0.2, -2.0)]
    }))
    .expect("valid spec")
}

fn aggregation_oracles() -> Outcome {
    let dims = Dims::new(9, 3);
    let mut worst: f64 = 0.0;
    for seed in 0..50u64 {
        let mut r = rng::stream(&[seed, 23]);
        let m = r.gen_range(1..6);
        let models: Vec<ModelParams> = (0..m).map(|_| uniform_params(dims, &mut r, 3.0)).collect();
        let sizes: Vec<usize> = (0..m).map(|_| r.gen_range(1..500)).collect();
        let pairs: Vec<(&ModelParams, usize)> = models.iter().zip(sizes.iter().copied()).collect();
        let got = fedavg_aggregate(&pairs).map_err(|e| e.to_string())?;
        let total: usize = sizes.iter().sum();
        for i in 0..got.len() {
            let expect: f64 = models
                .iter()
                .zip(&sizes)
                .map(|(p, n)| p.as_slice()[i] * *n as f64)
                .sum::<f64>()
                / total as f64;
            worst = worst.max((got.as_slice()[i] - expect).abs());
        }
    }
    check(worst <= 1e-12, || {
        format!("fedavg deviates from weighted mean by {worst:.3e}")
    })?;

    let mut r = rng::stream(&[5, 29]);
    let theta = uniform_params(dims, &mut r, 1.0);
    for mode in [AttnWeightMode::PerLayer, AttnWeightMode::ScalarSum] {
        let locals = vec![&theta; 3];
        let cfg = AttnAggConfig {
            step: 0.7,
            weight_mode: mode,
        };
        let (next, _) = fedatt_aggregate(&theta, &locals, &cfg).map_err(|e| e.to_string())?;
        check(next == theta, || {
            format!("{mode:?}: equal locals moved the global model")
        })?;
    }

    let cohort = generate_cohort(&tiny_spec(30), 4).map_err(|e| e.to_string())?;
    let data = &cohort.records;
    let cfg = FederationConfig {
        schedule: FederationSchedule {
            rounds: 3,
            local_iters: 2,
        },
        train: TrainConfig {
            hidden: 4,
            learning_rate: 0.01,
            ..TrainConfig::default()
        },
        ..FederationConfig::default()
    };
    let init = ModelParams::init(Dims::new(11, 4), &mut rng::stream(&[8]));
    let client = || {
        vec![ClientData {
            key: SubgroupKey::new(Variable::Gender, "M"),
            train: data[..48].iter().collect(),
            val: data[48..].iter().collect(),
        }]
    };
    let fed = run_federation(Strategy::FedAvg, &cfg, client(), init.clone(), 12)
        .map_err(|e| e.to_string())?;
    let cen =
        run_federation(Strategy::Central, &cfg, client(), init, 12).map_err(|e| e.to_string())?;
    let diff = fed
        .global
        .model
        .as_slice()
        .iter()
        .zip(cen.global.model.as_slice())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    check(diff <= 1e-12, || {
        format!("single-client FedAvg differs from Central by {diff:.3e}")
    })?;
    Ok(format!(
        "fedavg error {worst:.1e}, fixed point exact, FedAvg vs Central {diff:.1e}"
    ))
}

fn pair_count_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        for (j, &z) in labels.iter().enumerate() {
            if y == 1 && z == 0 {
                pairs += 1.0;
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

fn auc_oracle() -> Outcome {
    let mut r = rng::stream(&[31]);
    let mut done = 0;
    while done < 200 {
        let n = r.gen_range(2..=50);
        let levels = r.gen_range(2..8);
        let scores: Vec<f64> = (0..n)
            .map(|_| r.gen_range(0..levels) as f64 / levels as f64)
            .collect();
        let labels: Vec<u8> = (0..n).map(|_| r.gen_range(0..2)).collect();
        if labels.iter().all(|&y| y == labels[0]) {
            continue;
        }
        let got = auc(&scores, &labels).map_err(|e| e.to_string())?;
        let expect = pair_count_auc(&scores, &labels);
        check(got == expect, || {
            format!("instance {done}: rank AUC {got} vs pair count {expect}")
        })?;
        done += 1;
    }
    Ok("200 tied instances match exactly".into())
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn rasch_recovery() -> Outcome {
    let (ns, ni) = (200, 20);
    let mut r = rng::stream(&[41]);
    let normal = rand_distr::StandardNormal;
    let ability: Vec<f64> = (0..ns).map(|_| r.sample(normal)).collect();
    let mut difficulty: Vec<f64> = (0..ni).map(|_| r.sample(normal)).collect();
    let mean = difficulty.iter().sum::<f64>() / ni as f64;
    difficulty.iter_mut().for_each(|b| *b -= mean);
    let entries: Vec<Vec<Option<bool>>> = ability
        .iter()
        .map(|&t| {
            difficulty
                .iter()
                .map(|&b| Some(r.gen::<f64>() < response_probability(t, b)))
                .collect()
        })
        .collect();
    let matrix = ResponseMatrix::new(
        (0..ns).map(|u| format!("s{u}")).collect(),
        (0..ni).collect(),
        entries,
    )
    .map_err(|e| e.to_string())?;
    let fit = fit_rasch(&matrix, 2000, 1e-7).map_err(|e| e.to_string())?;
    let corr = pearson(&fit.difficulties, &difficulty);
    let rmse = (fit
        .difficulties
        .iter()
        .zip(&difficulty)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / ni as f64)
        .sqrt();
    let monotone = fit.objective_trace.windows(2).all(|w| w[1] >= w[0] - 1e-9);
    check(corr >= 0.9, || format!("difficulty correlation {corr:.3}"))?;
    check(rmse <= 0.3, || format!("difficulty RMSE {rmse:.3}"))?;
    check(monotone, || "objective decreased between sweeps".into())?;
    Ok(format!(
        "correlation {corr:.3}, RMSE {rmse:.3}, {} monotone sweeps, converged {}",
        fit.iterations, fit.converged
    ))
}

/// Mean over runs of the per-run mean per-subgroup test AUC, per seed.
fn per_seed_auc(cv: &CrossValidation, strategy: Strategy) -> BTreeMap<u64, f64> {
    let mut out: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for run in cv.runs.iter().filter(|r| r.strategy == strategy) {
        let aucs: Vec<f64> = run.test_auc.values().flatten().copied().collect();
        out.entry(run.seed)
            .or_default()
            .push(aucs.iter().sum::<f64>() / aucs.len() as f64);
    }
    out.into_iter()
        .map(|(s, v)| (s, v.iter().sum::<f64>() / v.len() as f64))
        .collect()
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

struct HeterogeneityRun {
    store: StudentStore,
    exp: Experiment,
    cv: CrossValidation,
}

fn heterogeneity_run() -> Result<HeterogeneityRun, String> {
    let path = workspace_root().join("configs/experiment.json");
    let cfg = ExperimentConfig::load(&path).map_err(|e| e.to_string())?;
    let (store, width) = load_store(&cfg, false).map_err(|e| e.to_string())?;
    let mut exp = experiment(&cfg, width);
    exp.strategies = vec![Strategy::Local, Strategy::FedAvg, Strategy::PerFedAttn];
    let cv = cross_validate(&store, &exp).map_err(|e| e.to_string())?;
    Ok(HeterogeneityRun { store, exp, cv })
}

fn heterogeneity_ordering(run: &Result<HeterogeneityRun, String>) -> Outcome {
    let run = run.as_ref().map_err(Clone::clone)?;
    let cfg = ExperimentConfig::load(&workspace_root().join("configs/experiment.json"))
        .map_err(|e| e.to_string())?;
    let perfed_cli::DataSource::Generated { spec, .. } = &cfg.data else {
        return Err("experiment config must use a generated cohort".into());
    };
    let spec = CohortSpec::load(spec).map_err(|e| e.to_string())?;
    check(
        spec.profiles.len() == 2 && spec.profiles.iter().all(|p| p.population == 400),
        || "cohort must be 2 subgroups of 400 students".into(),
    )?;
    let div =
        profile_divergence(&spec.profiles[0], &spec.profiles[1]).map_err(|e| e.to_string())?;
    check(div >= 0.8, || {
        format!("profile divergence {div:.3} below 0.8")
    })?;
    let sched = &run.exp.federation.schedule;
    check(sched.rounds == 10 && sched.local_iters == 5, || {
        "schedule must be K=10, E=5".into()
    })?;
    check(run.exp.seeds.len() == 5, || "five seeds required".into())?;
    let score = |s| mean(per_seed_auc(&run.cv, s).into_values());
    let (pf, fa, lo) = (
        score(Strategy::PerFedAttn),
        score(Strategy::FedAvg),
        score(Strategy::Local),
    );
    let detail = format!("divergence {div:.2}; PerFedAttn {pf:.4}, FedAvg {fa:.4}, Local {lo:.4}");
    check(pf >= fa + 0.03 && pf >= lo + 0.03, || detail.clone())?;
    Ok(detail)
}

fn pretraining_non_regression(run: &Result<HeterogeneityRun, String>) -> Outcome {
    let run = run.as_ref().map_err(Clone::clone)?;
    let mut exp = run.exp.clone();
    exp.strategies = vec![Strategy::PerFedAttn];
    exp.pretrain = PretrainConfig {
        enabled: !run.exp.pretrain.enabled,
        ..run.exp.pretrain.clone()
    };
    let other = cross_validate(&run.store, &exp).map_err(|e| e.to_string())?;
    let (with, without) = if exp.pretrain.enabled {
        (
            per_seed_auc(&other, Strategy::PerFedAttn),
            per_seed_auc(&run.cv, Strategy::PerFedAttn),
        )
    } else {
        (
            per_seed_auc(&run.cv, Strategy::PerFedAttn),
            per_seed_auc(&other, Strategy::PerFedAttn),
        )
    };
    let improved = with.iter().filter(|(s, a)| **a > without[*s]).count();
    let (mw, mo) = (
        mean(with.values().copied()),
        mean(without.values().copied()),
    );
    let detail = format!(
        "with {mw:.4}, without {mo:.4}, improved in {improved}/{} seeds",
        with.len()
    );
    check(mw >= mo - 0.01 && improved >= 3, || detail.clone())?;
    Ok(detail)
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = serde_json::to_string_pretty(&tiny_spec(40)).map_err(|e| e.to_string())?;
    fs::write(dir.path().join("cohort.json"), spec).map_err(|e| e.to_string())?;
    let cfg = serde_json::json!({
        "version": 1,
        "data": {"generated": {"spec": "cohort.json", "seed": 2}},
        "variable": "G",
        "federation": {"schedule": {"rounds": 2, "local_iters": 1}, "train": {"hidden": 5}},
        "pretrain": {"enabled": true, "epochs": 1},
        "folds": 2,
        "seeds": [1, 2]
    });
    let cfg_path = dir.path().join("experiment.json");
    fs::write(&cfg_path, cfg.to_string()).map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for jobs in ["1", "2"] {
        let out = dir.path().join(format!("jobs{jobs}"));
        let o = Command::new(env!("CARGO_BIN_EXE_perfed"))
            .args([
                "run",
                "--config",
                cfg_path.to_str().unwrap(),
                "--jobs",
                jobs,
                "--out",
                out.to_str().unwrap(),
            ])
            .output()
            .map_err(|e| e.to_string())?;
        check(o.status.success(), || {
            String::from_utf8_lossy(&o.stderr).into_owned()
        })?;
        let mut files = BTreeMap::new();
        files.insert(
            "report.csv".to_string(),
            fs::read(out.join("report.csv")).map_err(|e| e.to_string())?,
        );
        for entry in fs::read_dir(out.join("models")).map_err(|e| e.to_string())? {
            let p = entry.map_err(|e| e.to_string())?.path();
            files.insert(
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            );
        }
        outputs.push(files);
    }
    check(outputs[0].len() > 1, || "no models were written".into())?;
    check(outputs[0].keys().eq(outputs[1].keys()), || {
        "artifact sets differ".into()
    })?;
    for (name, bytes) in &outputs[0] {
        check(*bytes == outputs[1][name], || {
            format!("{name} differs between --jobs 1 and --jobs 2")
        })?;
    }
    Ok(format!(
        "report.csv and {} models byte-identical",
        outputs[0].len() - 1
    ))
}

fn leak_check() -> Outcome {
    let cohort = generate_cohort(&tiny_spec(40), 6).map_err(|e| e.to_string())?;
    let store = StudentStore::instrumented(cohort.records).map_err(|e| e.to_string())?;
    let mut federation = FederationConfig::default();
    federation.schedule = FederationSchedule {
        rounds: 2,
        local_iters: 1,
    };
    federation.train.hidden = 4;
    let exp = Experiment {
        variable: Variable::Gender,
        include_unspecified: false,
        strategies: Strategy::ALL.to_vec(),
        federation,
        pretrain: PretrainConfig {
            enabled: true,
            epochs: 1,
            ..PretrainConfig::default()
        },
        folds: 3,
        seeds: vec![1, 2],
        split_seed: 0,
        input_width: 11,
    };
    let cv = cross_validate(&store, &exp).map_err(|e| e.to_string())?;
    let log = store.access_log();
    let fitting = log.iter().filter(|a| a.phase.fits_parameters()).count();
    check(fitting > 0, || "no fitting reads were logged".into())?;
    let leaks = leak_violations(&log, &cv.splits);
    check(leaks.is_empty(), || {
        format!(
            "{} test reads while fitting, first {:?}",
            leaks.len(),
            leaks[0]
        )
    })?;
    Ok(format!(
        "{} logged reads, {fitting} while fitting, 0 of test students",
        log.len()
    ))
}

fn main() {
    panic::set_hook(Box::new(|_| {}));
    let guard = |f: &dyn Fn() -> Outcome| -> Outcome {
        panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        })
    };
    let mut failed = 0;
    let mut report = |n: usize, name: &str, f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let res = guard(f);
        let secs = t.elapsed().as_secs_f64();
        match &res {
            Ok(d) => println!("PASS {n} {name}: {d} [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("FAIL {n} {name}: {d} [{secs:.1}s]")
            }
        }
    };
    report(1, "gradient correctness", &gradient_correctness);
    report(2, "meta-gradient oracle", &meta_gradient_oracle);
    report(3, "aggregation oracles", &aggregation_oracles);
    report(4, "AUC oracle", &auc_oracle);
    report(5, "Rasch recovery", &rasch_recovery);
    let hetero = match panic::catch_unwind(heterogeneity_run) {
        Ok(r) => r,
        Err(_) => Err("heterogeneity run panicked".into()),
    };
    report(6, "heterogeneity ordering", &|| {
        heterogeneity_ordering(&hetero)
    });
    report(7, "pretraining non-regression", &|| {
        pretraining_non_regression(&hetero)
    });
    report(8, "end-to-end determinism", &determinism);
    report(9, "leak check", &leak_check);
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
