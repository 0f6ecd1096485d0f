//! Patients, visits and code taxonomies.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::rng::{substream, Stream};
use crate::scalar::Real;

/// Minimum inter-visit gap in days (one hour).
pub const MIN_GAP_DAYS: f64 = 1.0 / 24.0;

/// Ordered, closed set of code identifiers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeTaxonomy {
    codes: Vec<String>,
    index: HashMap<String, usize>,
    groups: Option<Vec<String>>,
}

impl CodeTaxonomy {
    /// Build from any identifiers; the result is sorted lexicographically and deduplicated.
    pub fn new<I, S>(codes: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set: BTreeSet<String> = codes.into_iter().map(Into::into).collect();
        if set.is_empty() {
            return invalid("taxonomy must contain at least one code");
        }
        if set.iter().any(|c| c.trim().is_empty()) {
            return invalid("empty code identifier");
        }
        let codes: Vec<String> = set.into_iter().collect();
        let index = codes.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
        Ok(Self { codes, index, groups: None })
    }

    /// One code identifier per line; blank lines are ignored.
    pub fn from_reader(r: impl Read) -> Result<Self> {
        let mut codes = Vec::new();
        for line in BufReader::new(r).lines() {
            let line = line?;
            let t = line.trim();
            if !t.is_empty() {
                codes.push(t.to_string());
            }
        }
        Self::new(codes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_reader(std::fs::File::open(path)?)
    }

    /// Attach a `code,group` CSV map; it must cover every code.
    pub fn with_group_map(mut self, r: impl Read) -> Result<Self> {
        let mut map = HashMap::new();
        for (n, line) in BufReader::new(r).lines().enumerate() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() || (n == 0 && t.eq_ignore_ascii_case("code,group")) {
                continue;
            }
            let (code, group) = t
                .split_once(',')
                .ok_or_else(|| Error::Parse { line: n + 1, msg: "expected `code,group`".into() })?;
            map.insert(code.trim().to_string(), group.trim().to_string());
        }
        let mut groups = Vec::with_capacity(self.codes.len());
        for c in &self.codes {
            match map.get(c) {
                Some(g) => groups.push(g.clone()),
                None => return invalid(format!("group map has no entry for code `{c}`")),
            }
        }
        self.groups = Some(groups);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    pub fn code(&self, i: usize) -> &str {
        &self.codes[i]
    }

    pub fn index_of(&self, code: &str) -> Option<usize> {
        self.index.get(code).copied()
    }

    pub fn group(&self, i: usize) -> Option<&str> {
        self.groups.as_ref().map(|g| g[i].as_str())
    }

    /// Content hash identifying the code order.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.codes {
            h.update(c.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    pub fn write(&self, mut w: impl Write) -> Result<()> {
        for c in &self.codes {
            writeln!(w, "{c}")?;
        }
        Ok(())
    }
}

/// One timestamped visit; `codes` is a sorted, non-empty set of taxonomy indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Visit {
    pub time: f64,
    pub codes: Vec<usize>,
}

impl Visit {
    pub fn new(time: f64, codes: impl IntoIterator<Item = usize>) -> Result<Self> {
        if !time.is_finite() || time < 0.0 {
            return invalid(format!("visit time {time} must be finite and non-negative"));
        }
        let set: BTreeSet<usize> = codes.into_iter().collect();
        if set.is_empty() {
            return invalid("visit has no codes");
        }
        Ok(Self { time, codes: set.into_iter().collect() })
    }

    pub fn multi_hot<T: Real>(&self, n_codes: usize) -> Vec<T> {
        let mut x = vec![T::zero(); n_codes];
        for &c in &self.codes {
            x[c] = T::one();
        }
        x
    }

    pub fn has_code(&self, c: usize) -> bool {
        self.codes.binary_search(&c).is_ok()
    }
}

/// Codes recovered from a multi-hot vector.
pub fn codes_of<T: Real>(x: &[T]) -> Vec<usize> {
    x.iter().enumerate().filter(|(_, v)| **v > T::zero()).map(|(i, _)| i).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patient {
    pub id: String,
    pub visits: Vec<Visit>,
}

impl Patient {
    /// Sorts visits by time and pushes ties forward so gaps are at least
    /// [`MIN_GAP_DAYS`].
    pub fn new(id: impl Into<String>, mut visits: Vec<Visit>) -> Result<Self> {
        if visits.is_empty() {
            return invalid("patient has no visits");
        }
        visits.sort_by(|a, b| a.time.total_cmp(&b.time));
        for i in 1..visits.len() {
            let floor = visits[i - 1].time + MIN_GAP_DAYS;
            if visits[i].time < floor {
                visits[i].time = floor;
            }
        }
        Ok(Self { id: id.into(), visits })
    }

    pub fn len(&self) -> usize {
        self.visits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visits.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.visits.iter().map(|v| v.time).collect()
    }

    /// The most recent `max_len` visits.
    pub fn recent(&self, max_len: usize) -> &[Visit] {
        let n = self.visits.len();
        &self.visits[n.saturating_sub(max_len)..]
    }
}

/// Log of the gap between two times in days, with the gap floored at one hour.
pub fn log_gap<T: Real>(t_prev: T, t_cur: T) -> Result<T> {
    if t_cur < t_prev {
        return invalid(format!("time {t_cur} precedes {t_prev}"));
    }
    Ok((t_cur - t_prev).max(T::lit(MIN_GAP_DAYS)).ln())
}

/// Log gaps of a visit sequence; the first visit gets `ln(MIN_GAP_DAYS)`.
pub fn log_gaps<T: Real>(visits: &[Visit]) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(visits.len());
    out.push(T::lit(MIN_GAP_DAYS).ln());
    for w in visits.windows(2) {
        out.push(log_gap(T::lit(w[0].time), T::lit(w[1].time))?);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct RawVisit {
    t: f64,
    codes: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct RawPatient {
    id: String,
    visits: Vec<RawVisit>,
}

/// Parse the JSONL patient format. Without a taxonomy, the union of observed
/// codes becomes one.
pub fn parse_jsonl(r: impl Read, taxonomy: Option<CodeTaxonomy>) -> Result<(CodeTaxonomy, Vec<Patient>)> {
    let mut raws = Vec::new();
    for (n, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawPatient =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: n + 1, msg: e.to_string() })?;
        if raw.visits.iter().any(|v| v.codes.is_empty()) {
            return Err(Error::Parse { line: n + 1, msg: "visit with an empty code set".into() });
        }
        raws.push((n + 1, raw));
    }
    let taxonomy = match taxonomy {
        Some(t) => t,
        None => CodeTaxonomy::new(raws.iter().flat_map(|(_, r)| r.visits.iter().flat_map(|v| v.codes.iter().cloned())))?,
    };
    let mut patients = Vec::with_capacity(raws.len());
    for (line, raw) in raws {
        let mut visits = Vec::with_capacity(raw.visits.len());
        for v in raw.visits {
            let mut idx = Vec::with_capacity(v.codes.len());
            for c in &v.codes {
                match taxonomy.index_of(c) {
                    Some(i) => idx.push(i),
                    None => return Err(Error::Parse { line, msg: format!("unknown code `{c}`") }),
                }
            }
            visits.push(Visit::new(v.t, idx).map_err(|e| Error::Parse { line, msg: e.to_string() })?);
        }
        patients.push(Patient::new(raw.id, visits).map_err(|e| Error::Parse { line, msg: e.to_string() })?);
    }
    Ok((taxonomy, patients))
}

pub fn load_jsonl(path: impl AsRef<Path>, taxonomy: Option<CodeTaxonomy>) -> Result<(CodeTaxonomy, Vec<Patient>)> {
    parse_jsonl(std::fs::File::open(path)?, taxonomy)
}

/// Map a JSON visit list (`[{"t":..,"codes":[..]}]`) onto a closed taxonomy.
pub fn parse_visits(json: &str, taxonomy: &CodeTaxonomy) -> Result<Vec<Visit>> {
    let raw: Vec<RawVisit> = serde_json::from_str(json)?;
    let mut visits = Vec::with_capacity(raw.len());
    for v in raw {
        let mut idx = Vec::with_capacity(v.codes.len());
        for c in &v.codes {
            idx.push(taxonomy.index_of(c).ok_or_else(|| Error::Invalid(format!("unknown code `{c}`")))?);
        }
        visits.push(Visit::new(v.t, idx)?);
    }
    Ok(Patient::new("prefix", visits)?.visits)
}

/// Canonical JSON line for one patient.
pub fn patient_json(p: &Patient, taxonomy: &CodeTaxonomy) -> Result<String> {
    let raw = RawPatient {
        id: p.id.clone(),
        visits: p
            .visits
            .iter()
            .map(|v| RawVisit { t: v.time, codes: v.codes.iter().map(|&c| taxonomy.code(c).to_string()).collect() })
            .collect(),
    };
    Ok(serde_json::to_string(&raw)?)
}

pub fn write_jsonl(mut w: impl Write, patients: &[Patient], taxonomy: &CodeTaxonomy) -> Result<()> {
    for p in patients {
        writeln!(w, "{}", patient_json(p, taxonomy)?)?;
    }
    Ok(())
}

/// Train / validation / test partition of the multi-visit patients.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Patient>,
    pub validation: Vec<Patient>,
    pub test: Vec<Patient>,
}

pub const MIN_SPLIT_PATIENTS: usize = 20;

/// Drop single-visit patients, shuffle by seed and cut 80:5:15.
pub fn split(patients: &[Patient], seed: u64) -> Result<DatasetSplit> {
    let mut kept: Vec<Patient> = patients.iter().filter(|p| p.len() >= 2).cloned().collect();
    let p = kept.len();
    if p < MIN_SPLIT_PATIENTS {
        return invalid(format!("need at least {MIN_SPLIT_PATIENTS} multi-visit patients, got {p}"));
    }
    kept.shuffle(&mut substream(seed, Stream::Split, 0));
    let n_train = p * 80 / 100;
    let n_val = p * 5 / 100;
    let test = kept.split_off(n_train + n_val);
    let validation = kept.split_off(n_train);
    Ok(DatasetSplit { train: kept, validation, test })
}

/// Basic corpus statistics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorpusStats {
    pub patients: usize,
    pub visits: usize,
    pub avg_visits_per_patient: f64,
    pub median_visits_per_patient: f64,
    pub unique_codes: usize,
    pub avg_codes_per_visit: f64,
    pub max_codes_per_visit: usize,
}

pub fn corpus_stats(patients: &[Patient]) -> CorpusStats {
    let visits: usize = patients.iter().map(Patient::len).sum();
    let codes: usize = patients.iter().flat_map(|p| &p.visits).map(|v| v.codes.len()).sum();
    let max_codes = patients.iter().flat_map(|p| &p.visits).map(|v| v.codes.len()).max().unwrap_or(0);
    let unique: BTreeSet<usize> = patients.iter().flat_map(|p| &p.visits).flat_map(|v| v.codes.iter().copied()).collect();
    let mut lens: Vec<usize> = patients.iter().map(Patient::len).collect();
    lens.sort_unstable();
    let median = match lens.len() {
        0 => 0.0,
        n if n % 2 == 1 => lens[n / 2] as f64,
        n => (lens[n / 2 - 1] + lens[n / 2]) as f64 / 2.0,
    };
    CorpusStats {
        patients: patients.len(),
        visits,
        avg_visits_per_patient: visits as f64 / patients.len().max(1) as f64,
        median_visits_per_patient: median,
        unique_codes: unique.len(),
        avg_codes_per_visit: codes as f64 / visits.max(1) as f64,
        max_codes_per_visit: max_codes,
    }
}
