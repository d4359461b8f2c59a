//! CSV ingest and export of cohorts and splits.
//!
//! `events.csv`: `student_id,unix_timestamp,kind,video_index,points,max_points`
//! with the last three columns optional. `students.csv`:
//! `student_id,gender,continent,birth_year,label` with the demographic columns
//! optional (blank means undisclosed). Splits are written as
//! `student_id,subgroup,role` with role one of `train`, `val`, `test`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{
    cap_sequence, encode_event, ActivityEvent, ActivityKind, Continent, DatasetSplit, Demographics,
    Gender, QuizOutcome, StudentRecord,
};
use crate::error::{Error, Result};

/// An event together with the quiz outcome recorded for it, if any.
#[derive(Clone, Debug, PartialEq)]
pub struct EventRow {
    pub event: ActivityEvent,
    pub outcome: Option<QuizOutcome>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EventCsv {
    student_id: String,
    unix_timestamp: i64,
    kind: String,
    video_index: Option<usize>,
    points: Option<f64>,
    max_points: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StudentCsv {
    student_id: String,
    gender: Option<String>,
    continent: Option<String>,
    birth_year: Option<i32>,
    label: u8,
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitCsv {
    student_id: String,
    subgroup: String,
    role: String,
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Reader::from_reader(file))
}

pub fn write_events(path: &Path, rows: &[EventRow]) -> Result<()> {
    let mut w = writer(path)?;
    for row in rows {
        w.serialize(EventCsv {
            student_id: row.event.student_id.clone(),
            unix_timestamp: row.event.timestamp,
            kind: row.event.kind.as_str().to_string(),
            video_index: row.event.video_index,
            points: row.outcome.map(|o| o.points),
            max_points: row.outcome.map(|o| o.max_points),
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_events(path: &Path) -> Result<Vec<EventRow>> {
    let mut rows = Vec::new();
    for (line, rec) in reader(path)?.deserialize::<EventCsv>().enumerate() {
        let rec = rec?;
        let context =
            |e: Error| Error::Invalid(format!("{}: row {}: {e}", path.display(), line + 2));
        let kind: ActivityKind = rec.kind.parse().map_err(context)?;
        let outcome = match (rec.points, rec.max_points) {
            (Some(p), Some(m)) => Some(QuizOutcome::new(p, m).map_err(context)?),
            (None, None) => None,
            _ => {
                return Err(context(Error::Invalid(
                    "points and max_points must be given together".into(),
                )))
            }
        };
        rows.push(EventRow {
            event: ActivityEvent {
                student_id: rec.student_id,
                timestamp: rec.unix_timestamp,
                kind,
                video_index: rec.video_index,
            },
            outcome,
        });
    }
    Ok(rows)
}

pub fn write_students(path: &Path, records: &[StudentRecord]) -> Result<()> {
    let mut w = writer(path)?;
    for r in records {
        w.serialize(StudentCsv {
            student_id: r.student_id.clone(),
            gender: r.demographics.gender.map(|g| g.tag().to_string()),
            continent: r.demographics.continent.map(|c| c.tag().to_string()),
            birth_year: r.demographics.birth_year,
            label: r.label,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Builds student records from an event table and a student table.
///
/// Events are ordered by timestamp with ties kept in file order. Every
/// answered watch of a video is encoded with the student's first-attempt
/// outcome on that video. Students without any event are skipped.
pub fn assemble_records(
    students: &Path,
    rows: Vec<EventRow>,
    n_videos: usize,
    max_seq_len: usize,
) -> Result<Vec<StudentRecord>> {
    let mut by_student: HashMap<String, Vec<EventRow>> = HashMap::new();
    for row in rows {
        by_student
            .entry(row.event.student_id.clone())
            .or_default()
            .push(row);
    }

    let mut records = Vec::new();
    for rec in reader(students)?.deserialize::<StudentCsv>() {
        let rec = rec?;
        let bad = |what: &str, v: &str| {
            Error::Invalid(format!(
                "{}: student {}: bad {what} {v:?}",
                students.display(),
                rec.student_id
            ))
        };
        let gender = match rec.gender.as_deref() {
            None | Some("") => None,
            Some(g) => Some(Gender::parse(g).ok_or_else(|| bad("gender", g))?),
        };
        let continent = match rec.continent.as_deref() {
            None | Some("") => None,
            Some(c) => Some(Continent::parse(c).ok_or_else(|| bad("continent", c))?),
        };
        if rec.label > 1 {
            return Err(bad("label", &rec.label.to_string()));
        }
        let Some(mut events) = by_student.remove(&rec.student_id) else {
            log::warn!("student {} has no events; skipped", rec.student_id);
            continue;
        };
        events.sort_by_key(|r| r.event.timestamp);

        let mut first: BTreeMap<usize, QuizOutcome> = BTreeMap::new();
        for row in &events {
            if let (Some(v), Some(o)) = (row.event.video_index, row.outcome) {
                first.entry(v).or_insert(o);
            }
        }
        let sequence = events
            .iter()
            .map(|row| {
                let outcome = row
                    .outcome
                    .and(row.event.video_index.and_then(|v| first.get(&v)));
                encode_event(&row.event, outcome, n_videos)
            })
            .collect::<Result<Vec<_>>>()?;
        records.push(StudentRecord {
            student_id: rec.student_id,
            demographics: Demographics {
                gender,
                continent,
                birth_year: rec.birth_year,
            },
            sequence: cap_sequence(sequence, max_seq_len),
            quiz_responses: first
                .into_iter()
                .map(|(v, o)| (v, o.first_attempt_score()))
                .collect(),
            label: rec.label,
        });
    }
    if let Some(orphan) = by_student.keys().min() {
        return Err(Error::Invalid(format!(
            "events reference student {orphan:?} absent from {}",
            students.display()
        )));
    }
    Ok(records)
}

pub fn read_cohort(
    events: &Path,
    students: &Path,
    n_videos: usize,
    max_seq_len: usize,
) -> Result<Vec<StudentRecord>> {
    assemble_records(students, read_events(events)?, n_videos, max_seq_len)
}

pub fn write_split(path: &Path, split: &DatasetSplit) -> Result<()> {
    let mut w = writer(path)?;
    for (key, s) in &split.groups {
        for (role, ids) in [("train", &s.train), ("val", &s.val), ("test", &s.test)] {
            for id in ids {
                w.serialize(SplitCsv {
                    student_id: id.clone(),
                    subgroup: key.to_string(),
                    role: role.to_string(),
                })?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_split(path: &Path) -> Result<DatasetSplit> {
    let mut split = DatasetSplit::default();
    for rec in reader(path)?.deserialize::<SplitCsv>() {
        let rec = rec?;
        let s = split.groups.entry(rec.subgroup.parse()?).or_default();
        match rec.role.as_str() {
            "train" => s.train.push(rec.student_id),
            "val" => s.val.push(rec.student_id),
            "test" => s.test.push(rec.student_id),
            other => return Err(Error::Invalid(format!("unknown split role {other:?}"))),
        }
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SubgroupKey, SubgroupSplit, Variable};

    #[test]
    fn ties_keep_file_order_and_first_attempt_wins() {
        let dir = tempfile::tempdir().unwrap();
        let events = dir.path().join("events.csv");
        let students = dir.path().join("students.csv");
        std::fs::write(
            &events,
            "student_id,unix_timestamp,kind,video_index,points,max_points\n\
             a,20,watch_correct,1,1,2\n\
             a,10,forum_view,,,\n\
             a,10,forum_post,,,\n\
             a,30,watch_correct,1,2,2\n",
        )
        .unwrap();
        std::fs::write(
            &students,
            "student_id,gender,continent,birth_year,label\na,F,,1985,1\n",
        )
        .unwrap();
        let recs = read_cohort(&events, &students, 3, 256).unwrap();
        assert_eq!(recs.len(), 1);
        let kinds: Vec<_> = recs[0].sequence.iter().map(|e| e.kind().unwrap()).collect();
        assert_eq!(
            kinds,
            vec![
                ActivityKind::ForumView,
                ActivityKind::ForumPost,
                ActivityKind::WatchIncorrect,
                ActivityKind::WatchIncorrect
            ]
        );
        assert_eq!(recs[0].quiz_responses[&1], 0);
        assert_eq!(recs[0].demographics.gender, Some(Gender::F));
        assert_eq!(
            recs[0].demographics.group(Variable::BirthYear),
            Some("80~90")
        );
    }

    #[test]
    fn orphan_events_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let events = dir.path().join("events.csv");
        let students = dir.path().join("students.csv");
        std::fs::write(
            &events,
            "student_id,unix_timestamp,kind,video_index,points,max_points\nz,1,forum_view,,,\n",
        )
        .unwrap();
        std::fs::write(&students, "student_id,gender,continent,birth_year,label\n").unwrap();
        assert!(read_cohort(&events, &students, 3, 256).is_err());
    }

    #[test]
    fn split_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.csv");
        let mut split = DatasetSplit::default();
        split.groups.insert(
            SubgroupKey::new(Variable::Continent, "unspecified"),
            SubgroupSplit {
                train: vec!["a".into(), "b".into()],
                val: vec!["c".into()],
                test: vec!["d".into()],
            },
        );
        write_split(&path, &split).unwrap();
        assert_eq!(read_split(&path).unwrap(), split);
    }
}
