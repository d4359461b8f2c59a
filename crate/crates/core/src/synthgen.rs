//! Synthetic cohorts with controllable between-subgroup heterogeneity.
//!
//! Each subgroup profile drives a Markov walk over activity kinds. Watch
//! steps pick a video from the profile's access distribution; on quiz videos
//! the student answers (correct with `quiz_correct_prob` on the first
//! attempt, reused afterwards) unless the walk is in `watch_noanswer`. The
//! pass label is drawn from a logistic model on the realized fraction of quiz
//! videos answered correctly and the fraction of forum activity.

use std::collections::BTreeMap;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_distr::{Exp, Gamma, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::{
    encode_event, ActivityEvent, ActivityKind, Demographics, StudentRecord, Variable,
    DEFAULT_MAX_SEQ_LEN, N_KINDS,
};
use crate::error::{Error, Result};
use crate::ingest::EventRow;
use crate::rng::{self, StreamRng};

const ROW_TOL: f64 = 1e-9;
const START_TIMESTAMP: i64 = 1_600_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthDist {
    pub mean: f64,
    /// Negative-binomial dispersion; 1 gives a geometric length.
    #[serde(default = "one")]
    pub dispersion: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PassModel {
    pub intercept: f64,
    pub weight_on_correct_fraction: f64,
    pub weight_on_forum_fraction: f64,
}

impl PassModel {
    pub fn probability(&self, correct_fraction: f64, forum_fraction: f64) -> f64 {
        let z = self.intercept
            + self.weight_on_correct_fraction * correct_fraction
            + self.weight_on_forum_fraction * forum_fraction;
        1.0 / (1.0 + (-z).exp())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubgroupProfile {
    /// Group tag of the cohort's demographic variable (e.g. `M`, `EU`, `80~90`).
    pub name: String,
    pub population: usize,
    /// 7x7 row-stochastic matrix in `ActivityKind::ALL` order.
    pub transition: Vec<Vec<f64>>,
    pub video_access: Vec<f64>,
    pub quiz_correct_prob: f64,
    pub length_dist: LengthDist,
    pub pass_model: PassModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortSpec {
    pub n_videos: usize,
    pub quiz_videos: Vec<usize>,
    pub profiles: Vec<SubgroupProfile>,
    pub demographic_variable: Variable,
    #[serde(default)]
    pub unspecified_fraction: f64,
    #[serde(default = "default_max_len")]
    pub max_seq_len: usize,
}

fn default_max_len() -> usize {
    DEFAULT_MAX_SEQ_LEN
}

fn check_distribution(name: &str, p: &[f64], len: usize, issues: &mut Vec<String>) {
    if p.len() != len {
        issues.push(format!("{name}: expected {len} entries, found {}", p.len()));
        return;
    }
    if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
        issues.push(format!("{name}: entries must lie in [0, 1]"));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > ROW_TOL {
        issues.push(format!("{name}: sums to {sum}, not 1"));
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        let mut issues = Vec::new();
        if self.n_videos == 0 {
            issues.push("n_videos must be positive".to_string());
        }
        let mut seen = std::collections::BTreeSet::new();
        for &v in &self.quiz_videos {
            if v >= self.n_videos {
                issues.push(format!("quiz video {v} is outside [0, {})", self.n_videos));
            }
            if !seen.insert(v) {
                issues.push(format!("quiz video {v} is listed twice"));
            }
        }
        if self.profiles.is_empty() {
            issues.push("at least one profile is required".to_string());
        }
        if !(0.0..1.0).contains(&self.unspecified_fraction) {
            issues.push(format!(
                "unspecified_fraction {} must lie in [0, 1)",
                self.unspecified_fraction
            ));
        }
        if self.max_seq_len == 0 {
            issues.push("max_seq_len must be positive".to_string());
        }
        let mut names = std::collections::BTreeSet::new();
        for (i, p) in self.profiles.iter().enumerate() {
            let tag = format!("profiles[{i}] ({})", p.name);
            if !names.insert(p.name.as_str()) {
                issues.push(format!("{tag}: duplicate profile name"));
            }
            if !self
                .demographic_variable
                .groups()
                .contains(&p.name.as_str())
            {
                issues.push(format!(
                    "{tag}: name must be one of {:?} for variable {}",
                    self.demographic_variable.groups(),
                    self.demographic_variable
                ));
            }
            if p.population == 0 {
                issues.push(format!("{tag}: population must be at least 1"));
            }
            if p.transition.len() != N_KINDS {
                issues.push(format!(
                    "{tag}: transition needs {N_KINDS} rows, found {}",
                    p.transition.len()
                ));
            }
            for (r, row) in p.transition.iter().enumerate() {
                check_distribution(
                    &format!("{tag}: transition row {r}"),
                    row,
                    N_KINDS,
                    &mut issues,
                );
            }
            check_distribution(
                &format!("{tag}: video_access"),
                &p.video_access,
                self.n_videos,
                &mut issues,
            );
            if !(0.0..=1.0).contains(&p.quiz_correct_prob) {
                issues.push(format!("{tag}: quiz_correct_prob must lie in [0, 1]"));
            }
            if !(p.length_dist.mean >= 1.0) {
                issues.push(format!("{tag}: length mean must be at least 1"));
            }
            if !(p.length_dist.dispersion > 0.0) {
                issues.push(format!("{tag}: length dispersion must be positive"));
            }
            let pm = &p.pass_model;
            if ![
                pm.intercept,
                pm.weight_on_correct_fraction,
                pm.weight_on_forum_fraction,
            ]
            .iter()
            .all(|v| v.is_finite())
            {
                issues.push(format!("{tag}: pass_model coefficients must be finite"));
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidSpec(issues))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: CohortSpec = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn input_width(&self) -> usize {
        self.n_videos + N_KINDS
    }
}

#[derive(Clone, Debug)]
pub struct GeneratedCohort {
    pub records: Vec<StudentRecord>,
    /// Raw events in emission order, for CSV export.
    pub events: Vec<EventRow>,
    /// Generating profile of each record. Diagnostics only.
    pub profile_of: Vec<usize>,
}

fn sample_length(dist: &LengthDist, max_len: usize, rng: &mut StreamRng) -> usize {
    let extra_mean = dist.mean - 1.0;
    let extra = if extra_mean <= 0.0 {
        0
    } else {
        let rate = Gamma::new(dist.dispersion, extra_mean / dist.dispersion)
            .expect("validated gamma parameters")
            .sample(rng);
        if rate <= 0.0 {
            0
        } else {
            Poisson::new(rate)
                .map(|p| p.sample(rng) as usize)
                .unwrap_or(0)
        }
    };
    (1 + extra).min(max_len)
}

struct StudentDraw {
    record: StudentRecord,
    events: Vec<EventRow>,
}

fn generate_student(
    spec: &CohortSpec,
    profile: &SubgroupProfile,
    student_id: String,
    quiz: &[bool],
    rng: &mut StreamRng,
) -> Result<StudentDraw> {
    let len = sample_length(&profile.length_dist, spec.max_seq_len, rng);
    let rows: Vec<WeightedIndex<f64>> = profile
        .transition
        .iter()
        .map(|r| WeightedIndex::new(r).expect("validated transition row"))
        .collect();
    let initial: Vec<f64> = (0..N_KINDS)
        .map(|j| profile.transition.iter().map(|r| r[j]).sum::<f64>() / N_KINDS as f64)
        .collect();
    let initial = WeightedIndex::new(&initial).expect("validated transition rows");
    let videos = WeightedIndex::new(&profile.video_access).expect("validated video access");
    let gap = Exp::new(1.0 / 1800.0).expect("positive rate");

    let mut timestamp = START_TIMESTAMP + rng.gen_range(0..7 * 86_400);
    let mut state = ActivityKind::ALL[initial.sample(rng)];
    let mut first_attempt: BTreeMap<usize, u8> = BTreeMap::new();
    let mut events = Vec::with_capacity(len);
    let mut sequence = Vec::with_capacity(len);
    let mut forum = 0usize;
    for step in 0..len {
        if step > 0 {
            timestamp += 1 + gap.sample(rng) as i64;
            state = ActivityKind::ALL[rows[state.index()].sample(rng)];
        }
        let (event, outcome) = if state.is_watch() {
            let v = videos.sample(rng);
            if !quiz[v] {
                (
                    ActivityEvent::watch(&student_id, timestamp, ActivityKind::WatchNoquiz, v),
                    None,
                )
            } else if state == ActivityKind::WatchNoanswer {
                (
                    ActivityEvent::watch(&student_id, timestamp, ActivityKind::WatchNoanswer, v),
                    None,
                )
            } else {
                let score = *first_attempt
                    .entry(v)
                    .or_insert_with(|| u8::from(rng.gen_bool(profile.quiz_correct_prob)));
                let kind = if score == 1 {
                    ActivityKind::WatchCorrect
                } else {
                    ActivityKind::WatchIncorrect
                };
                let outcome = crate::data::QuizOutcome::new(f64::from(score), 1.0)?;
                (
                    ActivityEvent::watch(&student_id, timestamp, kind, v),
                    Some(outcome),
                )
            }
        } else {
            forum += 1;
            (ActivityEvent::forum(&student_id, timestamp, state), None)
        };
        sequence.push(encode_event(&event, outcome.as_ref(), spec.n_videos)?);
        events.push(EventRow { event, outcome });
    }

    let n_quiz = quiz.iter().filter(|q| **q).count();
    let correct_fraction = if n_quiz == 0 {
        0.0
    } else {
        first_attempt.values().filter(|s| **s == 1).count() as f64 / n_quiz as f64
    };
    let forum_fraction = forum as f64 / len as f64;
    let label = u8::from(
        rng.gen_bool(
            profile
                .pass_model
                .probability(correct_fraction, forum_fraction),
        ),
    );

    let mut demographics = Demographics::default();
    if !rng.gen_bool(spec.unspecified_fraction) {
        demographics.set_group(spec.demographic_variable, &profile.name);
    }
    Ok(StudentDraw {
        record: StudentRecord {
            student_id,
            demographics,
            sequence,
            quiz_responses: first_attempt,
            label,
        },
        events,
    })
}

/// Samples every profile's population. Student `j` of profile `i` draws from
/// the stream `(seed, i, j)`, so the cohort is a pure function of
/// `(spec, seed)`.
pub fn generate_cohort(spec: &CohortSpec, seed: u64) -> Result<GeneratedCohort> {
    spec.validate()?;
    let mut quiz = vec![false; spec.n_videos];
    for &v in &spec.quiz_videos {
        quiz[v] = true;
    }
    let mut cohort = GeneratedCohort {
        records: Vec::new(),
        events: Vec::new(),
        profile_of: Vec::new(),
    };
    let mut next_id = 0usize;
    for (pi, profile) in spec.profiles.iter().enumerate() {
        for j in 0..profile.population {
            let mut r = rng::stream(&[seed, pi as u64, j as u64]);
            let draw = generate_student(spec, profile, format!("u{next_id:06}"), &quiz, &mut r)?;
            next_id += 1;
            cohort.records.push(draw.record);
            cohort.events.extend(draw.events);
            cohort.profile_of.push(pi);
        }
    }
    Ok(cohort)
}

fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Mean total-variation distance between corresponding transition rows plus
/// the total-variation distance of the video-access distributions; in `[0, 2]`.
pub fn profile_divergence(a: &SubgroupProfile, b: &SubgroupProfile) -> Result<f64> {
    if a.video_access.len() != b.video_access.len() {
        return Err(Error::Shape(format!(
            "video access over {} vs {} videos",
            a.video_access.len(),
            b.video_access.len()
        )));
    }
    if a.transition.len() != N_KINDS || b.transition.len() != N_KINDS {
        return Err(Error::Shape("transition matrices must have 7 rows".into()));
    }
    let mut rows = 0.0;
    for (ra, rb) in a.transition.iter().zip(&b.transition) {
        if ra.len() != N_KINDS || rb.len() != N_KINDS {
            return Err(Error::Shape("transition rows must have 7 entries".into()));
        }
        rows += total_variation(ra, rb);
    }
    Ok(rows / N_KINDS as f64 + total_variation(&a.video_access, &b.video_access))
}

/// Per-time-step kind frequencies over the first `steps` activities: row `t`
/// holds, for each kind, the share of students (among those with a `t`-th
/// activity) whose `t`-th activity has that kind. This approximates a
/// "fraction of students engaged" heatmap.
pub fn activity_heatmap(records: &[&StudentRecord], steps: usize) -> Vec<[f64; N_KINDS]> {
    (0..steps)
        .map(|t| {
            let mut row = [0.0; N_KINDS];
            let mut count = 0usize;
            for r in records {
                if let Some(kind) = r.sequence.get(t).and_then(|a| a.kind()) {
                    row[kind.index()] += 1.0;
                    count += 1;
                }
            }
            if count > 0 {
                row.iter_mut().for_each(|v| *v /= count as f64);
            }
            row
        })
        .collect()
}

/// Mean per-step L1 distance between two heatmaps.
pub fn heatmap_l1(a: &[[f64; N_KINDS]], b: &[[f64; N_KINDS]]) -> f64 {
    let steps = a.len().min(b.len());
    if steps == 0 {
        return 0.0;
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()).sum::<f64>())
        .sum::<f64>()
        / steps as f64
}
