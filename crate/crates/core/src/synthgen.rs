//! Synthetic multimorbidity corpora with known cascade structure.
//!
//! Each patient carries a few chronic conditions. Every condition emits
//! visits as a Hawkes process sampled through its branching structure, so
//! each visit knows the visit that triggered it. Triggered visits repeat part
//! of their parent's codes; with several conditions interleaved, the parent
//! is often not the immediately preceding visit.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Exp, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{CodeTaxonomy, Patient, Visit};
use crate::error::{invalid, Result};
use crate::rng::{substream, Rng, Stream};

/// Generator settings. Rates are per day.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub n_codes: usize,
    /// Size of the condition catalog.
    pub n_conditions: usize,
    pub min_conditions: usize,
    pub max_conditions: usize,
    /// Codes per condition pool.
    pub pool_size: usize,
    /// Fraction of each pool borrowed from other pools.
    pub pool_overlap: f64,
    pub horizon_days: f64,
    /// Immigrant rate range of a condition.
    pub mu_range: (f64, f64),
    /// Log-scale spread of a per-patient multiplier on every immigrant rate
    /// (mean-one lognormal), so visit counts vary by patient rather than by
    /// number of conditions alone.
    pub frailty_sd: f64,
    /// Kernel decay range.
    pub decay_range: (f64, f64),
    /// Branching ratio `a / b` range; must stay below one.
    pub branching_range: (f64, f64),
    /// Mean of the Poisson extra-code count (each visit has at least one code).
    pub codes_per_visit_mean: f64,
    /// Probability that a triggered visit repeats each of its parent's codes.
    pub inherit_prob: f64,
    /// Subtypes per condition. A patient gets one subtype per condition and
    /// draws fresh codes mostly from its subset of the pool.
    pub n_subtypes: usize,
    /// Codes per subtype subset; 0 disables subtypes.
    pub subtype_size: usize,
    /// Chance that a fresh code comes from the patient's subtype subset.
    pub subtype_prob: f64,
    /// Patients with fewer visits are redrawn.
    pub min_visits: usize,
    /// Longer patients are redrawn.
    pub max_visits: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    /// The default cascade corpus: 1,000 patients with histories long
    /// enough to populate every cold-start bucket.
    fn default() -> Self {
        Self {
            n_patients: 1000,
            n_codes: 240,
            n_conditions: 16,
            min_conditions: 1,
            max_conditions: 1,
            pool_size: 24,
            pool_overlap: 0.1,
            horizon_days: 730.0,
            mu_range: (0.004, 0.01),
            frailty_sd: 1.0,
            decay_range: (0.02, 0.08),
            branching_range: (0.5, 0.8),
            codes_per_visit_mean: 2.0,
            inherit_prob: 0.5,
            n_subtypes: 6,
            subtype_size: 6,
            subtype_prob: 0.7,
            min_visits: 2,
            max_visits: 20,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Scale of the MIMIC-III cohort: 7,499 patients, about 2.66 visits per
    /// patient and 13.1 codes per visit over 294 code groups.
    pub fn mimic_like() -> Self {
        Self {
            n_patients: 7499,
            n_codes: 294,
            n_conditions: 30,
            min_conditions: 1,
            max_conditions: 4,
            pool_size: 30,
            pool_overlap: 0.1,
            horizon_days: 1500.0,
            mu_range: (0.0001, 0.0002),
            frailty_sd: 0.0,
            decay_range: (0.01, 0.05),
            branching_range: (0.1, 0.3),
            codes_per_visit_mean: 12.1,
            inherit_prob: 0.5,
            n_subtypes: 3,
            subtype_size: 6,
            subtype_prob: 0.85,
            min_visits: 2,
            max_visits: 64,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return invalid("need at least one patient");
        }
        if self.n_conditions == 0 || self.pool_size == 0 || self.pool_size > self.n_codes {
            return invalid("need conditions with non-empty pools no larger than the code set");
        }
        if self.min_conditions == 0 || self.min_conditions > self.max_conditions || self.max_conditions > self.n_conditions {
            return invalid("conditions per patient must satisfy 1 <= min <= max <= catalog size");
        }
        if !(self.horizon_days > 0.0) {
            return invalid("horizon must be positive");
        }
        let ordered = |r: (f64, f64)| r.0 <= r.1;
        if !(self.frailty_sd >= 0.0) {
            return invalid("frailty spread must be non-negative");
        }
        if !(self.mu_range.0 > 0.0 && ordered(self.mu_range)) || !(self.decay_range.0 > 0.0 && ordered(self.decay_range)) {
            return invalid("rate ranges must be positive and ordered");
        }
        if !(self.branching_range.0 >= 0.0 && ordered(self.branching_range) && self.branching_range.1 < 1.0) {
            return invalid("branching ratios must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.pool_overlap) || !(0.0..=1.0).contains(&self.inherit_prob) || !(0.0..=1.0).contains(&self.subtype_prob) {
            return invalid("overlap and inheritance probabilities must lie in [0, 1]");
        }
        if self.codes_per_visit_mean < 0.0 || self.min_visits == 0 || self.min_visits > self.max_visits {
            return invalid("invalid per-visit code mean or visit-count bounds");
        }
        Ok(())
    }
}

/// One condition of the catalog.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionTemplate {
    pub id: usize,
    pub pool: Vec<usize>,
    pub mu: f64,
    pub a: f64,
    pub b: f64,
    pub codes_per_visit_mean: f64,
    /// Subsets of `pool` that patients specialise to.
    pub subtypes: Vec<Vec<usize>>,
}

/// How a visit came about.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub condition: usize,
    /// Index of the triggering visit, or `None` for a spontaneous visit.
    pub parent: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedPatient {
    pub patient: Patient,
    pub provenance: Vec<Provenance>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub taxonomy: CodeTaxonomy,
    pub conditions: Vec<ConditionTemplate>,
    pub patients: Vec<GeneratedPatient>,
    /// Redraws caused by the visit-count bounds.
    pub redraws: usize,
}

impl Corpus {
    pub fn plain_patients(&self) -> Vec<Patient> {
        self.patients.iter().map(|g| g.patient.clone()).collect()
    }
}

fn code_name(i: usize, n: usize) -> String {
    let width = n.saturating_sub(1).to_string().len();
    format!("D{i:0width$}")
}

fn catalog(cfg: &SynthConfig, rng: &mut Rng) -> Vec<ConditionTemplate> {
    let mut all: Vec<usize> = (0..cfg.n_codes).collect();
    all.shuffle(rng);
    let borrowed = ((cfg.pool_size as f64) * cfg.pool_overlap).round() as usize;
    let own = cfg.pool_size - borrowed;
    let mut conditions = Vec::with_capacity(cfg.n_conditions);
    for id in 0..cfg.n_conditions {
        // own codes come from a cyclic walk over the shuffled code list
        let mut pool: Vec<usize> = (0..own).map(|k| all[(id * own + k) % cfg.n_codes]).collect();
        while pool.len() < cfg.pool_size {
            let c = all[rng.gen_range(0..cfg.n_codes)];
            if !pool.contains(&c) {
                pool.push(c);
            }
        }
        pool.sort_unstable();
        let subtypes = if cfg.subtype_size > 0 && cfg.subtype_size < pool.len() {
            (0..cfg.n_subtypes)
                .map(|_| {
                    let mut sub: Vec<usize> = pool.choose_multiple(rng, cfg.subtype_size).copied().collect();
                    sub.sort_unstable();
                    sub
                })
                .collect()
        } else {
            Vec::new()
        };
        let b = rng.gen_range(cfg.decay_range.0..=cfg.decay_range.1);
        let ratio = rng.gen_range(cfg.branching_range.0..=cfg.branching_range.1);
        conditions.push(ConditionTemplate {
            id,
            pool,
            mu: rng.gen_range(cfg.mu_range.0..=cfg.mu_range.1),
            a: ratio * b,
            b,
            codes_per_visit_mean: cfg.codes_per_visit_mean,
            subtypes,
        });
    }
    conditions
}

struct RawEvent {
    time: f64,
    condition: usize,
    parent: Option<usize>,
    codes: Vec<usize>,
}

/// Codes of one visit: inherited parent codes first, then fresh draws that
/// favour the patient's subtype subset of the condition pool.
fn draw_codes(pool: &[usize], personal: &[usize], cfg: &SynthConfig, inherited: &[usize], rng: &mut Rng) -> Vec<usize> {
    let mean = cfg.codes_per_visit_mean;
    let mut target = 1 + if mean > 0.0 { Poisson::new(mean).expect("positive mean").sample(rng) as usize } else { 0 };
    target = target.min(pool.len());
    let mut codes: Vec<usize> = inherited.iter().copied().filter(|_| rng.gen::<f64>() < cfg.inherit_prob).collect();
    codes.truncate(target);
    let mut mine: Vec<usize> = personal.iter().copied().filter(|c| !codes.contains(c)).collect();
    let mut rest: Vec<usize> = pool.iter().copied().filter(|c| !codes.contains(c) && !personal.contains(c)).collect();
    mine.shuffle(rng);
    rest.shuffle(rng);
    while codes.len() < target {
        let from_mine = !mine.is_empty() && (rest.is_empty() || rng.gen::<f64>() < cfg.subtype_prob);
        codes.push(if from_mine { mine.pop() } else { rest.pop() }.expect("pool larger than target"));
    }
    codes.sort_unstable();
    codes
}

/// Branching-structure sample of one condition's Hawkes process on `[0, horizon]`.
fn condition_events(c: &ConditionTemplate, frailty: f64, cfg: &SynthConfig, rng: &mut Rng, out: &mut Vec<RawEvent>) {
    let first = out.len();
    let personal: &[usize] = if c.subtypes.is_empty() { &c.pool } else { &c.subtypes[rng.gen_range(0..c.subtypes.len())] };
    let n_imm = Poisson::new(frailty * c.mu * cfg.horizon_days).map(|p| p.sample(rng) as usize).unwrap_or(0);
    for _ in 0..n_imm {
        let time = rng.gen_range(0.0..cfg.horizon_days);
        let codes = draw_codes(&c.pool, personal, cfg, &[], rng);
        out.push(RawEvent { time, condition: c.id, parent: None, codes });
    }
    let ratio = c.a / c.b;
    let delay = Exp::new(c.b).expect("positive decay");
    let mut k = first;
    while k < out.len() {
        let n_kids = if ratio > 0.0 { Poisson::new(ratio).expect("positive").sample(rng) as usize } else { 0 };
        for _ in 0..n_kids {
            let time = out[k].time + delay.sample(rng);
            if time > cfg.horizon_days {
                continue;
            }
            let parent_codes = out[k].codes.clone();
            let codes = draw_codes(&c.pool, personal, cfg, &parent_codes, rng);
            out.push(RawEvent { time, condition: c.id, parent: Some(k), codes });
        }
        k += 1;
    }
}

fn one_patient(cfg: &SynthConfig, conditions: &[ConditionTemplate], rng: &mut Rng) -> Vec<RawEvent> {
    let k = rng.gen_range(cfg.min_conditions..=cfg.max_conditions);
    let chosen: Vec<usize> = rand::seq::index::sample(rng, conditions.len(), k).into_vec();
    let sd = cfg.frailty_sd;
    let frailty = if sd > 0.0 { (sd * rng.sample::<f64, _>(StandardNormal) - sd * sd / 2.0).exp() } else { 1.0 };
    // conditions share the patient's spontaneous visit budget
    let share = frailty / k as f64;
    let mut events = Vec::new();
    for &c in &chosen {
        condition_events(&conditions[c], share, cfg, rng, &mut events);
    }
    events
}

/// Order events by time and rewrite parent links to sorted positions.
fn to_patient(id: String, events: Vec<RawEvent>) -> Result<GeneratedPatient> {
    let mut order: Vec<usize> = (0..events.len()).collect();
    order.sort_by(|&x, &y| events[x].time.total_cmp(&events[y].time).then(x.cmp(&y)));
    let mut pos = vec![0; events.len()];
    for (p, &e) in order.iter().enumerate() {
        pos[e] = p;
    }
    let mut visits = Vec::with_capacity(events.len());
    let mut provenance = Vec::with_capacity(events.len());
    for &e in &order {
        let ev = &events[e];
        visits.push(Visit::new(ev.time, ev.codes.iter().copied())?);
        provenance.push(Provenance { condition: ev.condition, parent: ev.parent.map(|p| pos[p]) });
    }
    Ok(GeneratedPatient { patient: Patient::new(id, visits)?, provenance })
}

/// Generate a corpus. Patients outside the visit-count bounds are redrawn
/// from the same per-patient stream, up to 1,000 times.
pub fn generate(cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    let conditions = catalog(cfg, &mut substream(cfg.seed, Stream::Generation, 0));
    let names: Vec<String> = (0..cfg.n_codes).map(|i| code_name(i, cfg.n_codes)).collect();
    let taxonomy = CodeTaxonomy::new(names.iter().cloned())?;
    // taxonomy order is lexicographic; zero padding keeps it numeric
    debug_assert!(names.iter().enumerate().all(|(i, n)| taxonomy.index_of(n) == Some(i)));
    let mut patients = Vec::with_capacity(cfg.n_patients);
    let mut redraws = 0;
    for p in 0..cfg.n_patients {
        let mut rng = substream(cfg.seed, Stream::Generation, p as u64 + 1);
        let mut events = one_patient(cfg, &conditions, &mut rng);
        let mut attempts = 0;
        while events.len() < cfg.min_visits || events.len() > cfg.max_visits {
            attempts += 1;
            if attempts > 1000 {
                return invalid(format!(
                    "could not draw a patient with {}..={} visits; widen the horizon or the rates",
                    cfg.min_visits, cfg.max_visits
                ));
            }
            events = one_patient(cfg, &conditions, &mut rng);
        }
        redraws += attempts;
        patients.push(to_patient(format!("P{p:05}"), events)?);
    }
    if redraws > cfg.n_patients / 2 {
        log::warn!("{redraws} redraws for {} patients: horizon or rates yield few visits", cfg.n_patients);
    }
    Ok(Corpus { taxonomy, conditions, patients, redraws })
}

/// `(visit index, triggering visit index)` for every visit.
pub fn ancestor_truth(p: &GeneratedPatient) -> Vec<(usize, Option<usize>)> {
    p.provenance.iter().enumerate().map(|(i, pr)| (i, pr.parent)).collect()
}

/// Share of triggered visits whose parent is not the immediately preceding visit.
pub fn non_adjacent_share(patients: &[GeneratedPatient]) -> f64 {
    let (mut far, mut triggered) = (0usize, 0usize);
    for p in patients {
        for (i, parent) in ancestor_truth(p) {
            if let Some(j) = parent {
                triggered += 1;
                if j + 1 != i {
                    far += 1;
                }
            }
        }
    }
    if triggered == 0 {
        0.0
    } else {
        far as f64 / triggered as f64
    }
}

/// Provenance sidecar: one JSON object per patient, aligned with the corpus file.
pub fn write_provenance(mut w: impl Write, patients: &[GeneratedPatient]) -> Result<()> {
    #[derive(Serialize)]
    struct Row<'a> {
        id: &'a str,
        provenance: &'a [Provenance],
    }
    for p in patients {
        serde_json::to_writer(&mut w, &Row { id: &p.patient.id, provenance: &p.provenance })?;
        writeln!(w)?;
    }
    Ok(())
}
