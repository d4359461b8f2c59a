//! One-parameter (Rasch) item response model on first-attempt quiz scores,
//! and the per-subgroup confidence weights derived from its fit.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Serialize;

use crate::data::{StudentRecord, SubgroupKey};
use crate::error::{Error, Result};

/// Weight of the Gaussian prior on abilities and difficulties.
pub const L2_PRIOR: f64 = 0.01;

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// `P(correct) = sigmoid(ability - difficulty)`.
pub fn response_probability(ability: f64, difficulty: f64) -> f64 {
    sigmoid(ability - difficulty)
}

fn response_ll(correct: bool, logit: f64) -> f64 {
    if correct {
        log_sigmoid(logit)
    } else {
        log_sigmoid(-logit)
    }
}

/// Students x items, `None` where a student never answered the item.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseMatrix {
    pub students: Vec<String>,
    pub items: Vec<usize>,
    pub entries: Vec<Vec<Option<bool>>>,
}

impl ResponseMatrix {
    pub fn new(
        students: Vec<String>,
        items: Vec<usize>,
        entries: Vec<Vec<Option<bool>>>,
    ) -> Result<Self> {
        let m = Self {
            students,
            items,
            entries,
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        if self.entries.len() != self.students.len() {
            return Err(Error::Irt(format!(
                "{} rows for {} students",
                self.entries.len(),
                self.students.len()
            )));
        }
        if self.students.is_empty() || self.items.is_empty() {
            return Err(Error::Irt("empty response matrix".into()));
        }
        for (s, row) in self.students.iter().zip(&self.entries) {
            if row.len() != self.items.len() {
                return Err(Error::Irt(format!(
                    "row of student {s} has {} entries",
                    row.len()
                )));
            }
            if row.iter().all(Option::is_none) {
                return Err(Error::Irt(format!("student {s} has no observed response")));
            }
        }
        for (j, item) in self.items.iter().enumerate() {
            if self.entries.iter().all(|row| row[j].is_none()) {
                return Err(Error::Irt(format!("item {item} has no observed response")));
            }
        }
        Ok(())
    }

    /// Builds the matrix from the students' first-attempt scores. Students
    /// without any quiz response are left out; items are the quiz videos
    /// answered by at least one remaining student.
    pub fn from_records(records: &[&StudentRecord]) -> Result<Self> {
        let items: Vec<usize> = records
            .iter()
            .flat_map(|r| r.quiz_responses.keys().copied())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut students = Vec::new();
        let mut entries = Vec::new();
        for r in records.iter().filter(|r| !r.quiz_responses.is_empty()) {
            students.push(r.student_id.clone());
            entries.push(
                items
                    .iter()
                    .map(|v| r.quiz_responses.get(v).map(|&s| s == 1))
                    .collect(),
            );
        }
        Self::new(students, items, entries)
    }

    pub fn observed(&self) -> usize {
        self.entries
            .iter()
            .flatten()
            .filter(|e| e.is_some())
            .count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RaschFit {
    pub students: Vec<String>,
    pub items: Vec<usize>,
    pub abilities: Vec<f64>,
    /// Anchored to mean zero.
    pub difficulties: Vec<f64>,
    pub mean_log_likelihood: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Penalized log-likelihood after each sweep (the maximized objective).
    pub objective_trace: Vec<f64>,
}

impl RaschFit {
    pub fn probability(&self, student: usize, item: usize) -> f64 {
        response_probability(self.abilities[student], self.difficulties[item])
    }
}

fn log_likelihood(m: &ResponseMatrix, theta: &[f64], b: &[f64]) -> f64 {
    m.entries
        .iter()
        .enumerate()
        .flat_map(|(u, row)| {
            row.iter()
                .enumerate()
                .filter_map(move |(i, e)| e.map(|y| (u, i, y)))
        })
        .map(|(u, i, y)| response_ll(y, theta[u] - b[i]))
        .sum()
}

fn objective(m: &ResponseMatrix, theta: &[f64], b: &[f64]) -> f64 {
    let prior: f64 = theta.iter().chain(b).map(|v| v * v).sum();
    log_likelihood(m, theta, b) - 0.5 * L2_PRIOR * prior
}

/// Damped Newton ascent on one coordinate of a concave objective given its
/// observations as `(correct, offset)` with logit `sign * x + offset`.
fn newton_coordinate(x: f64, obs: &[(bool, f64)], sign: f64) -> f64 {
    let local = |v: f64| -> f64 {
        obs.iter()
            .map(|&(y, off)| response_ll(y, sign * v + off))
            .sum::<f64>()
            - 0.5 * L2_PRIOR * v * v
    };
    let mut grad = -L2_PRIOR * x;
    let mut hess = L2_PRIOR;
    for &(y, off) in obs {
        let p = sigmoid(sign * x + off);
        grad += sign * (f64::from(u8::from(y)) - p);
        hess += p * (1.0 - p);
    }
    let base = local(x);
    let mut step = grad / hess;
    for _ in 0..40 {
        let cand = x + step;
        if local(cand) >= base {
            return cand;
        }
        step *= 0.5;
    }
    x
}

/// Penalized maximum likelihood by alternating per-coordinate Newton sweeps
/// over abilities and difficulties. Stops when the largest parameter change
/// of a sweep drops below `tol`; difficulties are then shifted to mean zero
/// (abilities move with them, leaving every probability unchanged).
pub fn fit_rasch(matrix: &ResponseMatrix, max_iters: usize, tol: f64) -> Result<RaschFit> {
    matrix.validate()?;
    let (ns, ni) = (matrix.students.len(), matrix.items.len());
    let mut theta = vec![0.0; ns];
    let mut b = vec![0.0; ni];
    let mut trace = vec![objective(matrix, &theta, &b)];
    let mut converged = false;
    let mut iterations = 0;
    let mut obs = Vec::new();
    while iterations < max_iters {
        iterations += 1;
        let mut change: f64 = 0.0;
        for u in 0..ns {
            obs.clear();
            obs.extend(
                matrix.entries[u]
                    .iter()
                    .enumerate()
                    .filter_map(|(i, e)| e.map(|y| (y, -b[i]))),
            );
            let next = newton_coordinate(theta[u], &obs, 1.0);
            change = change.max((next - theta[u]).abs());
            theta[u] = next;
        }
        for i in 0..ni {
            obs.clear();
            obs.extend((0..ns).filter_map(|u| matrix.entries[u][i].map(|y| (y, theta[u]))));
            let next = newton_coordinate(b[i], &obs, -1.0);
            change = change.max((next - b[i]).abs());
            b[i] = next;
        }
        trace.push(objective(matrix, &theta, &b));
        if change < tol {
            converged = true;
            break;
        }
    }
    let shift = b.iter().sum::<f64>() / ni as f64;
    b.iter_mut().for_each(|v| *v -= shift);
    theta.iter_mut().for_each(|v| *v -= shift);
    let mean_log_likelihood = log_likelihood(matrix, &theta, &b) / matrix.observed() as f64;
    Ok(RaschFit {
        students: matrix.students.clone(),
        items: matrix.items.clone(),
        abilities: theta,
        difficulties: b,
        mean_log_likelihood,
        converged,
        iterations,
        objective_trace: trace,
    })
}

/// Per-subgroup confidence: the geometric-mean response likelihood
/// `exp(mean log-likelihood)` of each fit, normalized to sum to one.
pub fn irt_confidence(fits: &BTreeMap<SubgroupKey, RaschFit>) -> BTreeMap<SubgroupKey, f64> {
    let raw: BTreeMap<_, _> = fits
        .iter()
        .map(|(k, f)| (k.clone(), f.mean_log_likelihood.exp()))
        .collect();
    let total: f64 = raw.values().sum();
    raw.into_iter().map(|(k, v)| (k, v / total)).collect()
}

pub fn write_fit_csv(path: &Path, fit: &RaschFit) -> Result<()> {
    #[derive(Serialize)]
    struct Row<'a> {
        entity: &'a str,
        kind: &'a str,
        value: f64,
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for (s, v) in fit.students.iter().zip(&fit.abilities) {
        w.serialize(Row {
            entity: s,
            kind: "ability",
            value: *v,
        })?;
    }
    for (i, v) in fit.items.iter().zip(&fit.difficulties) {
        w.serialize(Row {
            entity: &i.to_string(),
            kind: "difficulty",
            value: *v,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
