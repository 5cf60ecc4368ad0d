//! Pairwise-comparison datasets: parsing, serialization and stratification.
//!
//! A vote compares two models and records one of four outcomes. Votes whose
//! outcome is `BothBad` are kept in the [`VoteSet`] (so ids stay aligned with
//! input rows) but are excluded from every fit and every stratum.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Read, Write};
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Default minimum stratum size.
pub const DEFAULT_MIN_VOTES: usize = 50;

/// Family returned for languages missing from the mapping table.
pub const OTHER_FAMILY: &str = "Other";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    AWins,
    BWins,
    Tie,
    BothBad,
}

impl Outcome {
    pub fn as_winner_str(self) -> &'static str {
        match self {
            Outcome::AWins => "model_a",
            Outcome::BWins => "model_b",
            Outcome::Tie => "tie",
            Outcome::BothBad => "both_bad",
        }
    }
}

impl FromStr for Outcome {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "model_a" => Ok(Outcome::AWins),
            "model_b" => Ok(Outcome::BWins),
            "tie" => Ok(Outcome::Tie),
            "both_bad" => Ok(Outcome::BothBad),
            other => Err(Error::validation(format!("winner `{other}` is not one of model_a, model_b, tie, both_bad"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    pub id: usize,
    pub model_a: String,
    pub model_b: String,
    pub outcome: Outcome,
    pub language: String,
    pub tasks: BTreeSet<String>,
    /// UTC seconds.
    pub timestamp: i64,
    /// Raw columns outside the fixed schema, kept for custom stratification.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, String>,
}

impl Vote {
    pub fn is_excluded(&self) -> bool {
        self.outcome == Outcome::BothBad
    }

    pub fn is_decisive(&self) -> bool {
        matches!(self.outcome, Outcome::AWins | Outcome::BWins)
    }

    /// `(winner, loser)` for decisive votes.
    pub fn winner_loser(&self) -> Option<(&str, &str)> {
        match self.outcome {
            Outcome::AWins => Some((&self.model_a, &self.model_b)),
            Outcome::BWins => Some((&self.model_b, &self.model_a)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VoteSet {
    votes: Vec<Vote>,
    models: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    JsonLines,
    Csv,
}

impl VoteSet {
    /// Builds a set from votes, re-validating the model and id invariants.
    pub fn new(votes: Vec<Vote>) -> Result<Self> {
        let mut ids = BTreeSet::new();
        let mut models = BTreeSet::new();
        for v in &votes {
            if v.model_a == v.model_b {
                return Err(Error::validation(format!("vote {} compares `{}` with itself", v.id, v.model_a)));
            }
            if !ids.insert(v.id) {
                return Err(Error::validation(format!("duplicate vote id {}", v.id)));
            }
            models.insert(v.model_a.clone());
            models.insert(v.model_b.clone());
        }
        Ok(Self { votes, models })
    }

    pub fn votes(&self) -> &[Vote] {
        &self.votes
    }

    pub fn models(&self) -> &BTreeSet<String> {
        &self.models
    }

    pub fn len(&self) -> usize {
        self.votes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.votes.is_empty()
    }

    /// Votes that take part in fitting: decisive votes and ties.
    pub fn included(&self) -> impl Iterator<Item = &Vote> {
        self.votes.iter().filter(|v| !v.is_excluded())
    }

    pub fn decisive(&self) -> impl Iterator<Item = &Vote> {
        self.votes.iter().filter(|v| v.is_decisive())
    }

    pub fn n_decisive(&self) -> usize {
        self.decisive().count()
    }

    /// Looks up a vote by id. Ids produced by the parsers equal the row index.
    pub fn get(&self, id: usize) -> Option<&Vote> {
        match self.votes.get(id) {
            Some(v) if v.id == id => Some(v),
            _ => self.votes.iter().find(|v| v.id == id),
        }
    }

    /// The member votes of a stratum, in id order.
    pub fn slice<'a>(&'a self, stratum: &'a Stratum) -> impl Iterator<Item = &'a Vote> + 'a {
        stratum.member_ids.iter().filter_map(move |&id| self.get(id))
    }

    pub fn parse<R: Read>(source: R, format: Format) -> Result<Self> {
        match format {
            Format::JsonLines => parse_jsonl(source),
            Format::Csv => parse_csv(source),
        }
    }

    pub fn write<W: Write>(&self, sink: W, format: Format) -> Result<()> {
        match format {
            Format::JsonLines => self.write_jsonl(sink),
            Format::Csv => self.write_csv(sink),
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut sink: W) -> Result<()> {
        for v in &self.votes {
            let mut obj = Map::new();
            obj.insert("model_a".into(), Value::String(v.model_a.clone()));
            obj.insert("model_b".into(), Value::String(v.model_b.clone()));
            obj.insert("winner".into(), Value::String(v.outcome.as_winner_str().into()));
            obj.insert("language".into(), Value::String(v.language.clone()));
            obj.insert("tasks".into(), Value::Array(v.tasks.iter().cloned().map(Value::String).collect()));
            obj.insert("timestamp".into(), Value::from(v.timestamp));
            for (k, val) in &v.extra {
                obj.insert(k.clone(), Value::String(val.clone()));
            }
            serde_json::to_writer(&mut sink, &Value::Object(obj))?;
            sink.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let extra_cols: BTreeSet<&String> = self.votes.iter().flat_map(|v| v.extra.keys()).collect();
        let mut w = csv::Writer::from_writer(sink);
        let mut header: Vec<&str> = vec!["model_a", "model_b", "winner", "language", "tasks", "timestamp"];
        header.extend(extra_cols.iter().map(|s| s.as_str()));
        w.write_record(&header).map_err(csv_io)?;
        for v in &self.votes {
            let tasks = v.tasks.iter().cloned().collect::<Vec<_>>().join(";");
            let mut rec = vec![
                v.model_a.clone(),
                v.model_b.clone(),
                v.outcome.as_winner_str().to_string(),
                v.language.clone(),
                tasks,
                v.timestamp.to_string(),
            ];
            for col in &extra_cols {
                rec.push(v.extra.get(*col).cloned().unwrap_or_default());
            }
            w.write_record(&rec).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn split_tasks(raw: &str) -> BTreeSet<String> {
    raw.split([';', ',']).map(str::trim).filter(|t| !t.is_empty()).map(str::to_string).collect()
}

const FIXED_COLUMNS: [&str; 6] = ["model_a", "model_b", "winner", "language", "tasks", "timestamp"];

fn parse_jsonl<R: Read>(source: R) -> Result<VoteSet> {
    let reader = std::io::BufReader::new(source);
    let mut votes = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::Parse { line: lineno, message: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: lineno, message: e.to_string() })?;
        let obj =
            value.as_object().ok_or_else(|| Error::Parse { line: lineno, message: "expected a JSON object".into() })?;
        votes.push(vote_from_json(votes.len(), obj, lineno)?);
    }
    VoteSet::new(votes)
}

fn vote_from_json(id: usize, obj: &Map<String, Value>, line: usize) -> Result<Vote> {
    let field = |name: &str| -> Result<&Value> {
        obj.get(name).ok_or_else(|| Error::Parse { line, message: format!("missing field `{name}`") })
    };
    let string = |name: &str| -> Result<String> {
        field(name)?
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::Parse { line, message: format!("field `{name}` must be a string") })
    };
    let winner = string("winner")?;
    let outcome = winner.parse::<Outcome>().map_err(|e| match e {
        Error::Validation(m) => Error::Validation(format!("line {line}: {m}")),
        other => other,
    })?;
    let tasks = match field("tasks")? {
        Value::Array(items) => items
            .iter()
            .map(|t| {
                t.as_str()
                    .map(|s| s.trim().to_string())
                    .ok_or_else(|| Error::Parse { line, message: "`tasks` entries must be strings".into() })
            })
            .filter(|r| r.as_ref().map_or(true, |s| !s.is_empty()))
            .collect::<Result<BTreeSet<_>>>()?,
        Value::String(s) => split_tasks(s),
        Value::Null => BTreeSet::new(),
        _ => {
            return Err(Error::Parse { line, message: "`tasks` must be an array".into() });
        }
    };
    let timestamp = field("timestamp")?
        .as_i64()
        .ok_or_else(|| Error::Parse { line, message: "`timestamp` must be an integer".into() })?;
    let mut extra = BTreeMap::new();
    for (k, v) in obj {
        if FIXED_COLUMNS.contains(&k.as_str()) {
            continue;
        }
        let s = match v {
            Value::String(s) => s.clone(),
            Value::Number(n) => n.to_string(),
            Value::Bool(b) => b.to_string(),
            _ => continue,
        };
        extra.insert(k.clone(), s);
    }
    let vote = Vote {
        id,
        model_a: string("model_a")?,
        model_b: string("model_b")?,
        outcome,
        language: string("language")?,
        tasks,
        timestamp,
        extra,
    };
    if vote.model_a == vote.model_b {
        return Err(Error::Parse { line, message: format!("model `{}` compared with itself", vote.model_a) });
    }
    Ok(vote)
}

fn parse_csv<R: Read>(source: R) -> Result<VoteSet> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(source);
    let headers = match rdr.headers() {
        Ok(h) => h.clone(),
        Err(e) => return Err(Error::Parse { line: 1, message: e.to_string() }),
    };
    if headers.is_empty() {
        return Ok(VoteSet::default());
    }
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Parse { line: 1, message: format!("missing column `{name}`") })
    };
    let idx = [col("model_a")?, col("model_b")?, col("winner")?, col("language")?, col("tasks")?, col("timestamp")?];
    let extra_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| !FIXED_COLUMNS.contains(&h.trim()))
        .map(|(i, h)| (i, h.trim().to_string()))
        .collect();

    let mut votes = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::Parse { line, message: e.to_string() }
        })?;
        let line = rec.position().map_or(votes.len() + 2, |p| p.line() as usize);
        let get = |i: usize| rec.get(i).unwrap_or("").to_string();
        let outcome = get(idx[2]).parse::<Outcome>().map_err(|e| match e {
            Error::Validation(m) => Error::Validation(format!("line {line}: {m}")),
            other => other,
        })?;
        let timestamp = get(idx[5])
            .trim()
            .parse::<i64>()
            .map_err(|_| Error::Parse { line, message: format!("timestamp `{}` is not an integer", get(idx[5])) })?;
        let vote = Vote {
            id: votes.len(),
            model_a: get(idx[0]),
            model_b: get(idx[1]),
            outcome,
            language: get(idx[3]),
            tasks: split_tasks(&get(idx[4])),
            timestamp,
            extra: extra_cols
                .iter()
                .filter(|(i, _)| rec.get(*i).is_some_and(|s| !s.is_empty()))
                .map(|(i, name)| (name.clone(), get(*i)))
                .collect(),
        };
        if vote.model_a.is_empty() || vote.model_b.is_empty() {
            return Err(Error::Parse { line, message: "empty model id".into() });
        }
        if vote.model_a == vote.model_b {
            return Err(Error::Parse { line, message: format!("model `{}` compared with itself", vote.model_a) });
        }
        votes.push(vote);
    }
    VoteSet::new(votes)
}

// ---------------------------------------------------------------------------
// Language families

/// Language → family lookup table.
#[derive(Debug, Clone, Default)]
pub struct FamilyMap {
    map: HashMap<String, String>,
}

const SHIPPED_FAMILIES: &str = include_str!("../data/language_families.csv");

impl FamilyMap {
    pub fn from_csv<R: Read>(source: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(source);
        let mut map = HashMap::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Parse {
                line: e.position().map_or(0, |p| p.line() as usize),
                message: e.to_string(),
            })?;
            if let (Some(lang), Some(fam)) = (rec.get(0), rec.get(1)) {
                map.insert(lang.trim().to_string(), fam.trim().to_string());
            }
        }
        Ok(Self { map })
    }

    /// The table shipped with the crate (116 languages).
    pub fn shipped() -> &'static FamilyMap {
        static MAP: OnceLock<FamilyMap> = OnceLock::new();
        MAP.get_or_init(|| FamilyMap::from_csv(SHIPPED_FAMILIES.as_bytes()).expect("shipped table parses"))
    }

    pub fn family<'a>(&'a self, language: &str) -> &'a str {
        if let Some(f) = self.map.get(language) {
            return f;
        }
        let lower = language.trim().to_lowercase();
        self.map.iter().find(|(k, _)| k.to_lowercase() == lower).map_or(OTHER_FAMILY, |(_, f)| f.as_str())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Family of `language` under the shipped table; `"Other"` when unmapped.
pub fn language_family(language: &str) -> &'static str {
    FamilyMap::shipped().family(language)
}

// ---------------------------------------------------------------------------
// Stratification

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Dimension {
    Global,
    Language,
    Family,
    Task,
    FamilyXTask,
    LanguageXTask,
    /// Any raw column. `hour` and `day` are derived from the timestamp when
    /// no such column exists.
    Custom(String),
}

impl Dimension {
    pub fn name(&self) -> String {
        match self {
            Dimension::Global => "global".into(),
            Dimension::Language => "language".into(),
            Dimension::Family => "family".into(),
            Dimension::Task => "task".into(),
            Dimension::FamilyXTask => "family_x_task".into(),
            Dimension::LanguageXTask => "language_x_task".into(),
            Dimension::Custom(c) => format!("custom.{c}"),
        }
    }

    /// Every key this vote belongs to under the dimension.
    fn keys_of(&self, v: &Vote, families: &FamilyMap) -> Vec<Vec<String>> {
        match self {
            Dimension::Global => vec![vec![]],
            Dimension::Language => vec![vec![v.language.clone()]],
            Dimension::Family => vec![vec![families.family(&v.language).to_string()]],
            Dimension::Task => v.tasks.iter().map(|t| vec![t.clone()]).collect(),
            Dimension::FamilyXTask => {
                let fam = families.family(&v.language);
                v.tasks.iter().map(|t| vec![fam.to_string(), t.clone()]).collect()
            }
            Dimension::LanguageXTask => v.tasks.iter().map(|t| vec![v.language.clone(), t.clone()]).collect(),
            Dimension::Custom(col) => custom_value(v, col).map(|s| vec![vec![s]]).unwrap_or_default(),
        }
    }
}

fn custom_value(v: &Vote, col: &str) -> Option<String> {
    if let Some(s) = v.extra.get(col) {
        return Some(s.clone());
    }
    match col {
        "hour" => Some(v.timestamp.rem_euclid(86_400).div_euclid(3_600).to_string()),
        "day" => Some(v.timestamp.div_euclid(86_400).to_string()),
        "language" => Some(v.language.clone()),
        _ => None,
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Dimension {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Ok(match s.to_ascii_lowercase().as_str() {
            "global" => Dimension::Global,
            "language" => Dimension::Language,
            "family" => Dimension::Family,
            "task" => Dimension::Task,
            "family_x_task" | "familyxtask" => Dimension::FamilyXTask,
            "language_x_task" | "languagextask" => Dimension::LanguageXTask,
            _ => match s.strip_prefix("custom.").or_else(|| s.strip_prefix("custom:")) {
                Some(col) if !col.is_empty() => Dimension::Custom(col.to_string()),
                _ => return Err(Error::validation(format!("unknown stratification `{s}`"))),
            },
        })
    }
}

/// Selector identifying one stratum, e.g. `language=German` or
/// `family_x_task=Germanic+code`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StratumKey {
    pub dimension: Dimension,
    pub values: Vec<String>,
}

impl StratumKey {
    pub fn global() -> Self {
        Self { dimension: Dimension::Global, values: vec![] }
    }

    /// True when the selector predicate holds for `v`.
    pub fn matches(&self, v: &Vote, families: &FamilyMap) -> bool {
        !v.is_excluded() && self.dimension.keys_of(v, families).iter().any(|k| k == &self.values)
    }

    /// File-system friendly rendering.
    pub fn file_stem(&self) -> String {
        self.to_string()
            .chars()
            .map(|c| if c.is_alphanumeric() || matches!(c, '-' | '_' | '=' | '+' | '.') { c } else { '_' })
            .collect()
    }
}

impl fmt::Display for StratumKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.dimension == Dimension::Global {
            return f.write_str("global");
        }
        write!(f, "{}={}", self.dimension, self.values.join("+"))
    }
}

impl FromStr for StratumKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "global" {
            return Ok(Self::global());
        }
        let (dim, vals) = s.split_once('=').ok_or_else(|| Error::validation(format!("malformed stratum key `{s}`")))?;
        Ok(Self { dimension: dim.parse()?, values: vals.split('+').map(str::to_string).collect() })
    }
}

impl Serialize for StratumKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for StratumKey {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stratum {
    pub key: StratumKey,
    pub member_ids: Vec<usize>,
}

/// Every stratum of `scheme` with at least `min_votes` members, in key order.
pub fn stratify(vs: &VoteSet, scheme: &Dimension, min_votes: usize) -> Vec<Stratum> {
    stratify_with(vs, scheme, min_votes, FamilyMap::shipped())
}

pub fn stratify_with(vs: &VoteSet, scheme: &Dimension, min_votes: usize, families: &FamilyMap) -> Vec<Stratum> {
    let min_votes = min_votes.max(1);
    let mut groups: BTreeMap<Vec<String>, BTreeSet<usize>> = BTreeMap::new();
    for v in vs.included() {
        for key in scheme.keys_of(v, families) {
            groups.entry(key).or_default().insert(v.id);
        }
    }
    groups
        .into_iter()
        .filter(|(_, ids)| ids.len() >= min_votes)
        .map(|(values, ids)| Stratum {
            key: StratumKey { dimension: scheme.clone(), values },
            member_ids: ids.into_iter().collect(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vote(id: usize, a: &str, b: &str, outcome: Outcome, lang: &str, tasks: &[&str]) -> Vote {
        Vote {
            id,
            model_a: a.into(),
            model_b: b.into(),
            outcome,
            language: lang.into(),
            tasks: tasks.iter().map(|s| s.to_string()).collect(),
            timestamp: 1_700_000_000 + id as i64,
            extra: BTreeMap::new(),
        }
    }

    #[test]
    fn csv_row_maps_fields() {
        let src = "model_a,model_b,winner,language,tasks,timestamp\nm1,m2,model_a,English,code,1700000000\n";
        let vs = VoteSet::parse(src.as_bytes(), Format::Csv).unwrap();
        assert_eq!(vs.len(), 1);
        let v = &vs.votes()[0];
        assert_eq!(v.outcome, Outcome::AWins);
        assert_eq!(v.language, "English");
        assert_eq!(v.tasks, BTreeSet::from(["code".to_string()]));
        assert_eq!(v.timestamp, 1_700_000_000);
        assert_eq!(vs.models().len(), 2);
    }

    #[test]
    fn both_bad_is_flagged_and_not_decisive() {
        let src = concat!(
            r#"{"model_a":"m1","model_b":"m2","winner":"model_a","language":"English","tasks":[],"timestamp":1}"#,
            "\n",
            r#"{"model_a":"m1","model_b":"m2","winner":"both_bad","language":"English","tasks":[],"timestamp":2}"#,
            "\n"
        );
        let vs = VoteSet::parse(src.as_bytes(), Format::JsonLines).unwrap();
        assert_eq!(vs.len(), 2);
        assert!(vs.votes()[1].is_excluded());
        assert_eq!(vs.n_decisive(), 1);
        assert_eq!(vs.included().count(), 1);
    }

    #[test]
    fn empty_stream_gives_empty_set() {
        let vs = VoteSet::parse(&b""[..], Format::JsonLines).unwrap();
        assert!(vs.is_empty());
        assert!(vs.models().is_empty());
        let vs = VoteSet::parse(&b""[..], Format::Csv).unwrap();
        assert!(vs.is_empty());
    }

    #[test]
    fn malformed_row_names_line() {
        let src = concat!(
            r#"{"model_a":"m1","model_b":"m2","winner":"model_a","language":"English","tasks":[],"timestamp":1}"#,
            "\n{not json\n"
        );
        match VoteSet::parse(src.as_bytes(), Format::JsonLines) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let src = "model_a,model_b,winner,language,tasks,timestamp\nm1,m2,model_a,English,code,1\nm1,m2,model_a,English,code,notanumber\n";
        match VoteSet::parse(src.as_bytes(), Format::Csv) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_winner_is_validation_error() {
        let src = "model_a,model_b,winner,language,tasks,timestamp\nm1,m2,draw,English,code,1\n";
        assert!(matches!(VoteSet::parse(src.as_bytes(), Format::Csv), Err(Error::Validation(_))));
    }

    #[test]
    fn shipped_family_table() {
        assert_eq!(language_family("German"), "Germanic");
        assert_eq!(language_family("Tamil"), "Dravidian");
        assert_eq!(language_family("Klingon"), "Constructed");
        assert_eq!(language_family("Volapük"), "Constructed");
        assert_eq!(language_family("Toki Pona"), OTHER_FAMILY);
        assert_eq!(FamilyMap::shipped().len(), 116);
    }

    fn german_dutch() -> VoteSet {
        let mut votes = Vec::new();
        for i in 0..100 {
            let lang = if i < 60 { "German" } else { "Dutch" };
            votes.push(vote(i, "m1", "m2", Outcome::AWins, lang, &["code"]));
        }
        VoteSet::new(votes).unwrap()
    }

    #[test]
    fn language_threshold_filter() {
        let vs = german_dutch();
        let s = stratify(&vs, &Dimension::Language, 50);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].key.values, vec!["German".to_string()]);
        assert_eq!(s[0].member_ids.len(), 60);
    }

    #[test]
    fn family_union() {
        let vs = german_dutch();
        let s = stratify(&vs, &Dimension::Family, 50);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].key.to_string(), "family=Germanic");
        assert_eq!(s[0].member_ids.len(), 100);
    }

    #[test]
    fn global_single_stratum() {
        let vs = german_dutch();
        let s = stratify(&vs, &Dimension::Global, 50);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].member_ids.len(), 100);
        assert_eq!(s[0].key, StratumKey::global());
    }

    #[test]
    fn multi_task_votes_join_each_task() {
        let votes = vec![
            vote(0, "a", "b", Outcome::AWins, "English", &["code", "math"]),
            vote(1, "a", "b", Outcome::Tie, "English", &["code"]),
            vote(2, "a", "b", Outcome::BothBad, "English", &["code"]),
        ];
        let vs = VoteSet::new(votes).unwrap();
        let s = stratify(&vs, &Dimension::Task, 1);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].member_ids, vec![0, 1]);
        assert_eq!(s[1].member_ids, vec![0]);
        let s = stratify(&vs, &Dimension::FamilyXTask, 1);
        assert_eq!(s[0].key.to_string(), "family_x_task=Germanic+code");
    }

    #[test]
    fn custom_hour_column() {
        let mut v = vote(0, "a", "b", Outcome::AWins, "English", &[]);
        v.timestamp = 3 * 3600 + 5;
        let vs = VoteSet::new(vec![v]).unwrap();
        let s = stratify(&vs, &Dimension::Custom("hour".into()), 1);
        assert_eq!(s[0].key.to_string(), "custom.hour=3");
    }

    #[test]
    fn key_round_trips_through_string() {
        for k in ["global", "language=German", "family_x_task=Germanic+code", "custom.hour=3"] {
            assert_eq!(k.parse::<StratumKey>().unwrap().to_string(), k);
        }
    }

    #[test]
    fn self_comparison_rejected() {
        let v = vote(0, "a", "a", Outcome::AWins, "English", &[]);
        assert!(VoteSet::new(vec![v]).is_err());
    }
}
