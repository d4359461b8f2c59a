//! Student lookup with an optional access log, used to audit which
//! students each pipeline phase reads.

use std::collections::HashMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::data::StudentRecord;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Label lookups while building stratified splits.
    Splitting,
    Pretraining,
    /// Model fitting, including IRT confidence estimation.
    Training,
    Validation,
    Evaluation,
}

impl Phase {
    /// Phases that may influence fitted parameters.
    pub fn fits_parameters(self) -> bool {
        matches!(self, Phase::Pretraining | Phase::Training)
    }
}

/// One logged read: which student, in which fold, by which phase.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Access {
    pub fold: usize,
    pub phase: Phase,
    pub student_id: String,
}

#[derive(Debug)]
pub struct StudentStore {
    records: Vec<StudentRecord>,
    index: HashMap<String, usize>,
    log: Option<Mutex<Vec<Access>>>,
}

impl StudentStore {
    pub fn new(records: Vec<StudentRecord>) -> Result<Self> {
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if index.insert(r.student_id.clone(), i).is_some() {
                return Err(Error::Invalid(format!(
                    "duplicate student id {}",
                    r.student_id
                )));
            }
        }
        Ok(Self {
            records,
            index,
            log: None,
        })
    }

    /// A store that records every read.
    pub fn instrumented(records: Vec<StudentRecord>) -> Result<Self> {
        let mut store = Self::new(records)?;
        store.log = Some(Mutex::new(Vec::new()));
        Ok(store)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn record(&self, fold: usize, phase: Phase, ids: impl Iterator<Item = String>) {
        if let Some(log) = &self.log {
            let mut log = log.lock().expect("access log poisoned");
            log.extend(ids.map(|student_id| Access {
                fold,
                phase,
                student_id,
            }));
        }
    }

    /// Records for `ids`, in order.
    pub fn fetch(&self, ids: &[String], fold: usize, phase: Phase) -> Result<Vec<&StudentRecord>> {
        let out = ids
            .iter()
            .map(|id| {
                self.index
                    .get(id)
                    .map(|&i| &self.records[i])
                    .ok_or_else(|| Error::Invalid(format!("unknown student id {id}")))
            })
            .collect::<Result<Vec<_>>>()?;
        self.record(fold, phase, ids.iter().cloned());
        Ok(out)
    }

    /// Every record, in load order.
    pub fn all(&self, fold: usize, phase: Phase) -> Vec<&StudentRecord> {
        self.record(
            fold,
            phase,
            self.records.iter().map(|r| r.student_id.clone()),
        );
        self.records.iter().collect()
    }

    /// Sorted copy of the access log; empty for uninstrumented stores.
    pub fn access_log(&self) -> Vec<Access> {
        let mut log = self
            .log
            .as_ref()
            .map(|l| l.lock().expect("access log poisoned").clone())
            .unwrap_or_default();
        log.sort();
        log
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Demographics;
    use std::collections::BTreeMap;

    fn rec(id: &str) -> StudentRecord {
        StudentRecord {
            student_id: id.into(),
            demographics: Demographics::default(),
            sequence: vec![],
            quiz_responses: BTreeMap::new(),
            label: 0,
        }
    }

    #[test]
    fn logs_only_when_instrumented() {
        let plain = StudentStore::new(vec![rec("a"), rec("b")]).unwrap();
        plain.fetch(&["a".into()], 0, Phase::Training).unwrap();
        assert!(plain.access_log().is_empty());

        let store = StudentStore::instrumented(vec![rec("a"), rec("b")]).unwrap();
        let got = store.fetch(&["b".into()], 2, Phase::Evaluation).unwrap();
        assert_eq!(got[0].student_id, "b");
        assert_eq!(
            store.access_log(),
            vec![Access {
                fold: 2,
                phase: Phase::Evaluation,
                student_id: "b".into()
            }]
        );
        assert!(store.fetch(&["zz".into()], 0, Phase::Training).is_err());
        assert!(StudentStore::new(vec![rec("a"), rec("a")]).is_err());
    }
}
