//! Clickstream activity encoding, demographic subgroups and train/test splits.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Number of activity kinds: four video-watching kinds and three forum kinds.
pub const N_KINDS: usize = 7;

/// Default cap on stored sequence length; longer sequences keep their most
/// recent events.
pub const DEFAULT_MAX_SEQ_LEN: usize = 256;

/// Group tag for students who did not disclose the demographic variable.
pub const UNSPECIFIED: &str = "unspecified";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivityKind {
    WatchNoquiz,
    WatchCorrect,
    WatchIncorrect,
    WatchNoanswer,
    ForumPost,
    ForumReply,
    ForumView,
}

impl ActivityKind {
    pub const ALL: [ActivityKind; N_KINDS] = [
        ActivityKind::WatchNoquiz,
        ActivityKind::WatchCorrect,
        ActivityKind::WatchIncorrect,
        ActivityKind::WatchNoanswer,
        ActivityKind::ForumPost,
        ActivityKind::ForumReply,
        ActivityKind::ForumView,
    ];

    /// Offset of this kind inside the concatenated (a^v; a^f) block.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn is_watch(self) -> bool {
        self.index() < 4
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ActivityKind::WatchNoquiz => "watch_noquiz",
            ActivityKind::WatchCorrect => "watch_correct",
            ActivityKind::WatchIncorrect => "watch_incorrect",
            ActivityKind::WatchNoanswer => "watch_noanswer",
            ActivityKind::ForumPost => "forum_post",
            ActivityKind::ForumReply => "forum_reply",
            ActivityKind::ForumView => "forum_view",
        }
    }
}

impl fmt::Display for ActivityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ActivityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Encoding(format!("unknown activity kind {s:?}")))
    }
}

/// One raw clickstream event.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActivityEvent {
    pub student_id: String,
    pub timestamp: i64,
    pub kind: ActivityKind,
    pub video_index: Option<usize>,
}

impl ActivityEvent {
    pub fn watch(student_id: &str, timestamp: i64, kind: ActivityKind, video: usize) -> Self {
        Self {
            student_id: student_id.to_string(),
            timestamp,
            kind,
            video_index: Some(video),
        }
    }

    pub fn forum(student_id: &str, timestamp: i64, kind: ActivityKind) -> Self {
        Self {
            student_id: student_id.to_string(),
            timestamp,
            kind,
            video_index: None,
        }
    }
}

/// Points awarded on an end-of-video quiz attempt.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuizOutcome {
    pub points: f64,
    pub max_points: f64,
}

impl QuizOutcome {
    pub fn new(points: f64, max_points: f64) -> Result<Self> {
        score_first_attempt(points, max_points)?;
        Ok(Self { points, max_points })
    }

    pub fn first_attempt_score(&self) -> u8 {
        u8::from(self.points == self.max_points)
    }
}

/// Binary first-attempt credit: 1 only for full points.
pub fn score_first_attempt(points: f64, max_points: f64) -> Result<u8> {
    if !(max_points > 0.0) || !max_points.is_finite() {
        return Err(Error::Domain(format!(
            "max_points must be positive, got {max_points}"
        )));
    }
    if !(points >= 0.0) || points > max_points {
        return Err(Error::Domain(format!(
            "points must lie in [0, {max_points}], got {points}"
        )));
    }
    Ok(u8::from(points == max_points))
}

/// One-hot activity vector `(v_id; a^v; a^f)` of width `n + 7`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct EncodedActivity {
    bits: Vec<u8>,
}

impl EncodedActivity {
    /// The all-zero vector used to mask a position.
    pub fn zeros(width: usize) -> Self {
        Self {
            bits: vec![0; width],
        }
    }

    pub fn from_bits(bits: Vec<u8>) -> Result<Self> {
        if bits.len() < N_KINDS {
            return Err(Error::Encoding(format!(
                "width {} is below {N_KINDS}",
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Encoding("bits must be 0 or 1".into()));
        }
        Ok(Self { bits })
    }

    pub fn width(&self) -> usize {
        self.bits.len()
    }

    pub fn n_videos(&self) -> usize {
        self.bits.len() - N_KINDS
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// Indices of set bits, ascending.
    pub fn active(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b != 0)
            .map(|(i, _)| i)
    }

    pub fn is_zero(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }

    pub fn kind(&self) -> Option<ActivityKind> {
        let n = self.n_videos();
        (0..N_KINDS)
            .find(|&j| self.bits[n + j] != 0)
            .and_then(ActivityKind::from_index)
    }

    pub fn video(&self) -> Option<usize> {
        self.bits[..self.n_videos()].iter().position(|&b| b != 0)
    }

    /// Checks the one-hot layout: watch events set one video bit and one
    /// a^v bit, forum events set exactly one a^f bit.
    pub fn is_well_formed(&self) -> bool {
        let n = self.n_videos();
        let vid = self.bits[..n].iter().filter(|&&b| b != 0).count();
        let av = self.bits[n..n + 4].iter().filter(|&&b| b != 0).count();
        let af = self.bits[n + 4..].iter().filter(|&&b| b != 0).count();
        matches!((vid, av, af), (1, 1, 0) | (0, 0, 1))
    }
}

/// Encodes one event.
///
/// Watch kinds other than `watch_noquiz` mark a video that carries a quiz; for
/// those the supplied outcome decides between `watch_correct` and
/// `watch_incorrect`. Without an outcome the event kind is kept as recorded.
pub fn encode_event(
    event: &ActivityEvent,
    outcome: Option<&QuizOutcome>,
    n: usize,
) -> Result<EncodedActivity> {
    let mut bits = vec![0u8; n + N_KINDS];
    if event.kind.is_watch() {
        let video = event.video_index.ok_or_else(|| {
            Error::Encoding(format!("{} event without a video index", event.kind))
        })?;
        if video >= n {
            return Err(Error::Encoding(format!(
                "video index {video} out of range for {n} videos"
            )));
        }
        let kind = match (event.kind, outcome) {
            (ActivityKind::WatchNoquiz, Some(_)) => {
                return Err(Error::Encoding(format!(
                    "quiz outcome supplied for video {video} which has no quiz"
                )))
            }
            (_, Some(o)) => {
                if score_first_attempt(o.points, o.max_points)? == 1 {
                    ActivityKind::WatchCorrect
                } else {
                    ActivityKind::WatchIncorrect
                }
            }
            (kind, None) => kind,
        };
        bits[video] = 1;
        bits[n + kind.index()] = 1;
    } else {
        if event.video_index.is_some() {
            return Err(Error::Encoding(format!(
                "{} event carries a video index",
                event.kind
            )));
        }
        if outcome.is_some() {
            return Err(Error::Encoding(format!(
                "quiz outcome supplied for {} event",
                event.kind
            )));
        }
        bits[n + event.kind.index()] = 1;
    }
    Ok(EncodedActivity { bits })
}

/// Keeps the `max_len` most recent activities.
pub fn cap_sequence(mut seq: Vec<EncodedActivity>, max_len: usize) -> Vec<EncodedActivity> {
    if seq.len() > max_len {
        seq.drain(..seq.len() - max_len);
    }
    seq
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variable {
    #[serde(rename = "G")]
    Gender,
    #[serde(rename = "C")]
    Continent,
    #[serde(rename = "Y")]
    BirthYear,
}

impl Variable {
    pub fn tag(self) -> &'static str {
        match self {
            Variable::Gender => "G",
            Variable::Continent => "C",
            Variable::BirthYear => "Y",
        }
    }

    /// Named (disclosed) groups of this variable.
    pub fn groups(self) -> &'static [&'static str] {
        match self {
            Variable::Gender => &["M", "F"],
            Variable::Continent => &["AS", "AF", "EU", "NA", "SA"],
            Variable::BirthYear => &["~80", "80~90", "90~"],
        }
    }
}

impl fmt::Display for Variable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "G" => Ok(Variable::Gender),
            "C" => Ok(Variable::Continent),
            "Y" => Ok(Variable::BirthYear),
            _ => Err(Error::Invalid(format!(
                "unknown demographic variable {s:?} (want G, C or Y)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Gender {
    M,
    F,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Continent {
    AS,
    AF,
    EU,
    NA,
    SA,
}

impl Gender {
    pub fn tag(self) -> &'static str {
        match self {
            Gender::M => "M",
            Gender::F => "F",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "M" => Some(Gender::M),
            "F" => Some(Gender::F),
            _ => None,
        }
    }
}

impl Continent {
    pub fn tag(self) -> &'static str {
        match self {
            Continent::AS => "AS",
            Continent::AF => "AF",
            Continent::EU => "EU",
            Continent::NA => "NA",
            Continent::SA => "SA",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Continent::AS,
            Continent::AF,
            Continent::EU,
            Continent::NA,
            Continent::SA,
        ]
        .into_iter()
        .find(|c| c.tag() == s)
    }
}

/// Birth-year bands: `Y <= 1980`, `1980 < Y <= 1990`, `Y > 1990`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BirthBand {
    UpTo1980,
    From1981To1990,
    After1990,
}

impl BirthBand {
    pub fn of(year: i32) -> Self {
        if year <= 1980 {
            BirthBand::UpTo1980
        } else if year <= 1990 {
            BirthBand::From1981To1990
        } else {
            BirthBand::After1990
        }
    }

    pub const fn tag(self) -> &'static str {
        match self {
            BirthBand::UpTo1980 => "~80",
            BirthBand::From1981To1990 => "80~90",
            BirthBand::After1990 => "90~",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            BirthBand::UpTo1980,
            BirthBand::From1981To1990,
            BirthBand::After1990,
        ]
        .into_iter()
        .find(|b| b.tag() == s)
    }

    /// A birth year inside the band.
    pub fn representative_year(self) -> i32 {
        match self {
            BirthBand::UpTo1980 => 1975,
            BirthBand::From1981To1990 => 1985,
            BirthBand::After1990 => 1995,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Demographics {
    pub gender: Option<Gender>,
    pub continent: Option<Continent>,
    pub birth_year: Option<i32>,
}

impl Demographics {
    /// Group tag for `variable`, or `None` when undisclosed.
    pub fn group(&self, variable: Variable) -> Option<&'static str> {
        match variable {
            Variable::Gender => self.gender.map(Gender::tag),
            Variable::Continent => self.continent.map(Continent::tag),
            Variable::BirthYear => self.birth_year.map(|y| BirthBand::of(y).tag()),
        }
    }

    /// Sets `variable` from a group tag. Returns false for an unknown tag.
    pub fn set_group(&mut self, variable: Variable, group: &str) -> bool {
        match variable {
            Variable::Gender => Gender::parse(group)
                .map(|g| self.gender = Some(g))
                .is_some(),
            Variable::Continent => Continent::parse(group)
                .map(|c| self.continent = Some(c))
                .is_some(),
            Variable::BirthYear => BirthBand::parse(group)
                .map(|b| self.birth_year = Some(b.representative_year()))
                .is_some(),
        }
    }

    pub fn clear(&mut self, variable: Variable) {
        match variable {
            Variable::Gender => self.gender = None,
            Variable::Continent => self.continent = None,
            Variable::BirthYear => self.birth_year = None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudentRecord {
    pub student_id: String,
    pub demographics: Demographics,
    /// Timestamp-ordered activity encodings.
    pub sequence: Vec<EncodedActivity>,
    /// First-attempt score per quiz video.
    pub quiz_responses: BTreeMap<usize, u8>,
    /// 1 = pass.
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubgroupKey {
    pub variable: Variable,
    pub group: String,
}

impl SubgroupKey {
    pub fn new(variable: Variable, group: impl Into<String>) -> Self {
        Self {
            variable,
            group: group.into(),
        }
    }

    pub fn is_unspecified(&self) -> bool {
        self.group == UNSPECIFIED
    }
}

impl fmt::Display for SubgroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.variable, self.group)
    }
}

impl FromStr for SubgroupKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (v, g) = s
            .split_once(':')
            .ok_or_else(|| Error::Invalid(format!("malformed subgroup key {s:?}")))?;
        Ok(SubgroupKey::new(v.parse()?, g))
    }
}

pub type SubgroupMap = BTreeMap<SubgroupKey, Vec<String>>;

/// Partitions students by one demographic variable.
///
/// Every named group of the variable appears in the result, possibly empty.
/// Undisclosed students go to the `unspecified` group when
/// `include_unspecified` is set and are dropped otherwise.
pub fn build_subgroups<'a>(
    records: impl IntoIterator<Item = &'a StudentRecord>,
    variable: Variable,
    include_unspecified: bool,
) -> SubgroupMap {
    let mut groups: SubgroupMap = variable
        .groups()
        .iter()
        .map(|g| (SubgroupKey::new(variable, *g), Vec::new()))
        .collect();
    if include_unspecified {
        groups.insert(SubgroupKey::new(variable, UNSPECIFIED), Vec::new());
    }
    for r in records {
        let group = match r.demographics.group(variable) {
            Some(g) => g,
            None if include_unspecified => UNSPECIFIED,
            None => continue,
        };
        groups
            .get_mut(&SubgroupKey::new(variable, group))
            .expect("every group tag is pre-registered")
            .push(r.student_id.clone());
    }
    for (key, ids) in &groups {
        if ids.is_empty() {
            log::warn!("subgroup {key} is empty");
        }
    }
    groups
}

/// Drops empty groups.
pub fn non_empty(groups: SubgroupMap) -> SubgroupMap {
    groups
        .into_iter()
        .filter(|(_, ids)| !ids.is_empty())
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgroupSplit {
    /// Students the model is fitted on.
    pub train: Vec<String>,
    /// Held out from fitting, used for checkpoint selection.
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub groups: BTreeMap<SubgroupKey, SubgroupSplit>,
}

impl DatasetSplit {
    pub fn train_union(&self) -> Vec<String> {
        self.groups
            .values()
            .flat_map(|s| s.train.iter().cloned())
            .collect()
    }

    pub fn all_test(&self) -> BTreeSet<String> {
        self.groups
            .values()
            .flat_map(|s| s.test.iter().cloned())
            .collect()
    }
}

fn carve_validation(mut train: Vec<String>) -> SubgroupSplit {
    let n_val = if train.len() >= 2 {
        (train.len() / 5).max(1)
    } else {
        0
    };
    let val = train.drain(..n_val).collect();
    SubgroupSplit {
        train,
        val,
        test: Vec::new(),
    }
}

/// Per-subgroup 4:1 train/test split, then 20% of train held out for
/// validation. Sizes are floored with a minimum of one per bucket.
pub fn split_train_test(groups: &SubgroupMap, seed: u64) -> Result<DatasetSplit> {
    let mut split = DatasetSplit::default();
    for (key, ids) in groups {
        if ids.len() < 2 {
            return Err(Error::Split {
                group: key.to_string(),
                reason: format!("{} student(s) cannot fill both train and test", ids.len()),
            });
        }
        let mut ids = ids.clone();
        ids.shuffle(&mut rng::stream(&[seed, rng::name_key(&key.to_string())]));
        let n_train = (ids.len() * 4 / 5).max(1);
        let test = ids.split_off(n_train);
        let mut s = carve_validation(ids);
        s.test = test;
        split.groups.insert(key.clone(), s);
    }
    Ok(split)
}

/// Stratified k-fold partition: per subgroup and per label, students are
/// dealt round-robin into `folds` test folds. Returns one split per fold,
/// each with 20% of its training part held out for validation.
pub fn kfold_splits(
    groups: &SubgroupMap,
    labels: &HashMap<String, u8>,
    folds: usize,
    seed: u64,
) -> Result<Vec<DatasetSplit>> {
    if folds < 2 {
        return split_train_test(groups, seed).map(|s| vec![s]);
    }
    let mut out = vec![DatasetSplit::default(); folds];
    for (key, ids) in groups {
        if ids.len() < folds {
            return Err(Error::Split {
                group: key.to_string(),
                reason: format!("{} student(s) cannot fill {folds} folds", ids.len()),
            });
        }
        let mut rng = rng::stream(&[seed, rng::name_key(&key.to_string()), 1]);
        let mut dealt = Vec::with_capacity(ids.len());
        for class in [1u8, 0u8] {
            let mut members: Vec<String> = ids
                .iter()
                .filter(|id| labels.get(*id).copied().unwrap_or(0) == class)
                .cloned()
                .collect();
            members.shuffle(&mut rng);
            dealt.extend(members);
        }
        for (f, split) in out.iter_mut().enumerate() {
            let mut train = Vec::new();
            let mut test = Vec::new();
            for (i, id) in dealt.iter().enumerate() {
                if i % folds == f {
                    test.push(id.clone());
                } else {
                    train.push(id.clone());
                }
            }
            train.shuffle(&mut rng::stream(&[
                seed,
                rng::name_key(&key.to_string()),
                2,
                f as u64,
            ]));
            let mut s = carve_validation(train);
            s.test = test;
            split.groups.insert(key.clone(), s);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, demo: Demographics) -> StudentRecord {
        StudentRecord {
            student_id: id.into(),
            demographics: demo,
            sequence: vec![],
            quiz_responses: BTreeMap::new(),
            label: 0,
        }
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    #[test]
    fn encodes_watch_and_forum_events() {
        let ev = ActivityEvent::watch("u", 0, ActivityKind::WatchCorrect, 2);
        let enc = encode_event(&ev, None, 5).unwrap();
        assert_eq!(enc.bits(), &[0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 0, 0]);

        let ev = ActivityEvent::forum("u", 0, ActivityKind::ForumView);
        let enc = encode_event(&ev, None, 5).unwrap();
        assert_eq!(enc.bits(), &[0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1]);

        let enc = encode_event(&ev, None, 43).unwrap();
        assert_eq!(enc.width(), 50);
    }

    #[test]
    fn outcome_resolves_quiz_watches() {
        let ev = ActivityEvent::watch("u", 0, ActivityKind::WatchNoanswer, 1);
        let full = QuizOutcome::new(2.0, 2.0).unwrap();
        let partial = QuizOutcome::new(1.0, 2.0).unwrap();
        assert_eq!(
            encode_event(&ev, Some(&full), 3).unwrap().kind(),
            Some(ActivityKind::WatchCorrect)
        );
        assert_eq!(
            encode_event(&ev, Some(&partial), 3).unwrap().kind(),
            Some(ActivityKind::WatchIncorrect)
        );
        assert_eq!(
            encode_event(&ev, None, 3).unwrap().kind(),
            Some(ActivityKind::WatchNoanswer)
        );
    }

    #[test]
    fn encoding_errors() {
        let ev = ActivityEvent::watch("u", 0, ActivityKind::WatchNoquiz, 5);
        assert!(matches!(
            encode_event(&ev, None, 5),
            Err(Error::Encoding(_))
        ));
        let ev = ActivityEvent::forum("u", 0, ActivityKind::ForumPost);
        let o = QuizOutcome::new(1.0, 1.0).unwrap();
        assert!(matches!(
            encode_event(&ev, Some(&o), 5),
            Err(Error::Encoding(_))
        ));
        let ev = ActivityEvent::watch("u", 0, ActivityKind::WatchNoquiz, 1);
        assert!(matches!(
            encode_event(&ev, Some(&o), 5),
            Err(Error::Encoding(_))
        ));
    }

    #[test]
    fn first_attempt_scoring() {
        assert_eq!(score_first_attempt(1.0, 1.0).unwrap(), 1);
        assert_eq!(score_first_attempt(0.0, 1.0).unwrap(), 0);
        assert_eq!(score_first_attempt(0.5, 1.0).unwrap(), 0);
        assert!(matches!(
            score_first_attempt(2.0, 1.0),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            score_first_attempt(0.0, 0.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn birth_bands_follow_boundaries() {
        assert_eq!(BirthBand::of(1980), BirthBand::UpTo1980);
        assert_eq!(BirthBand::of(1981), BirthBand::From1981To1990);
        assert_eq!(BirthBand::of(1990), BirthBand::From1981To1990);
        assert_eq!(BirthBand::of(1991), BirthBand::After1990);
    }

    #[test]
    fn subgroups_with_and_without_unspecified() {
        let recs = vec![
            record(
                "a",
                Demographics {
                    gender: Some(Gender::M),
                    ..Default::default()
                },
            ),
            record(
                "b",
                Demographics {
                    gender: Some(Gender::F),
                    ..Default::default()
                },
            ),
            record("c", Demographics::default()),
        ];
        let g = build_subgroups(&recs, Variable::Gender, true);
        assert_eq!(g.len(), 3);
        assert_eq!(g[&SubgroupKey::new(Variable::Gender, "M")], vec!["a"]);
        assert_eq!(g[&SubgroupKey::new(Variable::Gender, "F")], vec!["b"]);
        assert_eq!(
            g[&SubgroupKey::new(Variable::Gender, UNSPECIFIED)],
            vec!["c"]
        );

        let g = build_subgroups(&recs, Variable::Gender, false);
        assert_eq!(g.len(), 2);
        assert_eq!(g.values().map(Vec::len).sum::<usize>(), 2);

        let g = build_subgroups(&recs, Variable::Continent, true);
        assert_eq!(g.len(), 6);
        assert_eq!(
            g[&SubgroupKey::new(Variable::Continent, UNSPECIFIED)].len(),
            3
        );
    }

    #[test]
    fn split_sizes() {
        let mut groups = SubgroupMap::new();
        groups.insert(SubgroupKey::new(Variable::Gender, "M"), ids(100));
        groups.insert(SubgroupKey::new(Variable::Gender, "F"), ids(10));
        let split = split_train_test(&groups, 3).unwrap();
        let m = &split.groups[&SubgroupKey::new(Variable::Gender, "M")];
        assert_eq!((m.train.len(), m.val.len(), m.test.len()), (64, 16, 20));
        let f = &split.groups[&SubgroupKey::new(Variable::Gender, "F")];
        assert_eq!((f.train.len(), f.val.len(), f.test.len()), (7, 1, 2));
        assert_eq!(split, split_train_test(&groups, 3).unwrap());
        assert_ne!(split, split_train_test(&groups, 4).unwrap());
    }

    #[test]
    fn singleton_group_cannot_split() {
        let mut groups = SubgroupMap::new();
        groups.insert(SubgroupKey::new(Variable::Gender, "F"), ids(1));
        match split_train_test(&groups, 0) {
            Err(Error::Split { group, .. }) => assert_eq!(group, "G:F"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn kfold_is_stratified_partition() {
        let mut groups = SubgroupMap::new();
        let all = ids(53);
        groups.insert(SubgroupKey::new(Variable::Gender, "M"), all.clone());
        let labels: HashMap<String, u8> = all
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), u8::from(i % 4 == 0)))
            .collect();
        let folds = kfold_splits(&groups, &labels, 5, 9).unwrap();
        let mut tested = BTreeSet::new();
        for split in &folds {
            let s = &split.groups[&SubgroupKey::new(Variable::Gender, "M")];
            assert!(s.test.len() == 10 || s.test.len() == 11);
            let positives = s.test.iter().filter(|id| labels[*id] == 1).count();
            assert!((2..=3).contains(&positives));
            let mut seen: BTreeSet<_> = s.train.iter().chain(&s.val).collect();
            assert_eq!(seen.len(), s.train.len() + s.val.len());
            for id in &s.test {
                assert!(seen.insert(id));
                tested.insert(id.clone());
            }
            assert_eq!(seen.len(), 53);
        }
        assert_eq!(tested.len(), 53);
    }

    #[test]
    fn cap_keeps_most_recent() {
        let seq: Vec<_> = (0..5)
            .map(|v| {
                encode_event(
                    &ActivityEvent::watch("u", 0, ActivityKind::WatchNoquiz, v),
                    None,
                    5,
                )
                .unwrap()
            })
            .collect();
        let capped = cap_sequence(seq, 2);
        assert_eq!(
            capped
                .iter()
                .map(|e| e.video().unwrap())
                .collect::<Vec<_>>(),
            vec![3, 4]
        );
    }
}
