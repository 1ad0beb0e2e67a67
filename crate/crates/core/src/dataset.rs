//! Event-record study datasets: parsing, validation, censoring and covariate summaries.
//!
//! The on-disk format is a comma-separated file with the header
//! `ID,TIME,EVID,AMT,DV,MDV,WT,AGE,SEX,VOLGRP,AAG` (any column order), `.` for
//! missing values. TIME is in minutes, AMT in mg, DV in mg/L, WT in kg and AGE
//! in months. SEX is `0` (male) or `1` (female); VOLGRP is `0` (low volume) or
//! `1` (high volume).
//!
//! Each subject carries exactly one dose record (a single bolus into the depot)
//! and any number of observation records. Covariates must be constant within a
//! subject.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::summary;

/// Default lower limit of quantification, mg/L.
pub const DEFAULT_LLOQ: f64 = 0.05;

pub const COLUMNS: [&str; 11] = [
    "ID", "TIME", "EVID", "AMT", "DV", "MDV", "WT", "AGE", "SEX", "VOLGRP", "AAG",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sex {
    Male,
    Female,
}

impl Sex {
    pub fn code(self) -> u8 {
        match self {
            Sex::Male => 0,
            Sex::Female => 1,
        }
    }
}

/// Injected-volume arm: 0.2 mL/kg of 0.2% (low) or 0.4 mL/kg of 0.1% (high).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VolumeGroup {
    Low,
    High,
}

impl VolumeGroup {
    pub fn code(self) -> u8 {
        match self {
            VolumeGroup::Low => 0,
            VolumeGroup::High => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Evid {
    Observation,
    Dose,
}

/// Time-constant subject covariates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Covariates {
    /// Body weight, kg.
    pub wt: f64,
    /// Age, months.
    pub age: f64,
    pub sex: Sex,
    pub volgrp: VolumeGroup,
    /// Orosomucoid (alpha-1 acid glycoprotein), g/L.
    pub aag: Option<f64>,
}

/// One dataset row, minus the covariates (held once per subject).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub time: f64,
    pub evid: Evid,
    /// Dose amount in mg; present only on dose rows.
    pub amt: Option<f64>,
    /// Raw measured concentration in mg/L; kept even when `mdv` is set.
    pub dv: Option<f64>,
    pub mdv: bool,
}

impl EventRecord {
    pub fn dose(time: f64, amt: f64) -> Self {
        EventRecord { time, evid: Evid::Dose, amt: Some(amt), dv: None, mdv: true }
    }

    pub fn observation(time: f64, dv: f64) -> Self {
        EventRecord { time, evid: Evid::Observation, amt: None, dv: Some(dv), mdv: false }
    }

    pub fn is_observation(&self) -> bool {
        self.evid == Evid::Observation
    }

    /// Concentration that enters the likelihood, if any.
    pub fn usable_dv(&self) -> Option<f64> {
        match (self.evid, self.mdv) {
            (Evid::Observation, false) => self.dv,
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: u32,
    pub covariates: Covariates,
    /// Sorted by time, dose before observation at equal times.
    pub records: Vec<EventRecord>,
}

impl Subject {
    /// Build a subject from a dose and observation records, sorting them.
    pub fn new(id: u32, covariates: Covariates, mut records: Vec<EventRecord>) -> Result<Self> {
        sort_records(&mut records);
        let subject = Subject { id, covariates, records };
        subject.validate()?;
        Ok(subject)
    }

    fn validate(&self) -> Result<()> {
        if !(self.covariates.wt > 0.0) {
            return Err(Error::Domain(format!("subject {}: weight must be > 0", self.id)));
        }
        let doses = self.records.iter().filter(|r| r.evid == Evid::Dose).count();
        if doses != 1 {
            return Err(Error::Domain(format!(
                "subject {} has {doses} dose records; exactly one is supported",
                self.id
            )));
        }
        Ok(())
    }

    pub fn dose_record(&self) -> &EventRecord {
        self.records
            .iter()
            .find(|r| r.evid == Evid::Dose)
            .expect("validated subject has a dose record")
    }

    pub fn dose_amount(&self) -> f64 {
        self.dose_record().amt.unwrap_or(0.0)
    }

    pub fn dose_time(&self) -> f64 {
        self.dose_record().time
    }

    pub fn observations(&self) -> impl Iterator<Item = &EventRecord> {
        self.records.iter().filter(|r| r.is_observation())
    }

    /// `(time, dv)` for observations that enter the likelihood.
    pub fn usable_observations(&self) -> Vec<(f64, f64)> {
        self.records
            .iter()
            .filter_map(|r| r.usable_dv().map(|dv| (r.time, dv)))
            .collect()
    }

    pub fn n_usable(&self) -> usize {
        self.records.iter().filter(|r| r.usable_dv().is_some()).count()
    }
}

fn sort_records(records: &mut [EventRecord]) {
    records.sort_by(|a, b| {
        a.time.total_cmp(&b.time).then_with(|| {
            let rank = |e: Evid| if e == Evid::Dose { 0 } else { 1 };
            rank(a.evid).cmp(&rank(b.evid))
        })
    });
}

/// A validated dataset: subjects sorted by id, records sorted by time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyDataset {
    pub subjects: Vec<Subject>,
    /// Lower limit of quantification, mg/L.
    pub lloq: f64,
}

impl StudyDataset {
    pub fn new(mut subjects: Vec<Subject>, lloq: f64) -> Result<Self> {
        subjects.sort_by_key(|s| s.id);
        for pair in subjects.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(Error::Domain(format!("duplicate subject id {}", pair[0].id)));
            }
        }
        for s in &subjects {
            s.validate()?;
        }
        Ok(StudyDataset { subjects, lloq }.with_lloq(lloq))
    }

    /// Parse CSV text with the default LLOQ.
    pub fn parse(text: &str) -> Result<Self> {
        parse_dataset(text, DEFAULT_LLOQ)
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    /// Number of observation rows, censored or not.
    pub fn n_observation_rows(&self) -> usize {
        self.subjects.iter().map(|s| s.observations().count()).sum()
    }

    pub fn n_usable_observations(&self) -> usize {
        self.subjects.iter().map(Subject::n_usable).sum()
    }

    /// Observation rows flagged MDV=1.
    pub fn n_missing(&self) -> usize {
        self.subjects
            .iter()
            .flat_map(|s| s.observations())
            .filter(|r| r.mdv)
            .count()
    }

    /// Flag every observation strictly below `lloq` as missing (MDV=1). The
    /// raw DV is kept. Existing MDV=1 flags are never cleared.
    pub fn with_lloq(mut self, lloq: f64) -> Self {
        for s in &mut self.subjects {
            for r in &mut s.records {
                if r.is_observation() {
                    if let Some(dv) = r.dv {
                        if dv < lloq {
                            r.mdv = true;
                        }
                    }
                }
            }
        }
        self.lloq = lloq;
        self
    }

    pub fn to_csv(&self) -> String {
        let mut out = COLUMNS.join(",");
        out.push('\n');
        for s in &self.subjects {
            let c = &s.covariates;
            for r in &s.records {
                let evid = match r.evid {
                    Evid::Observation => 0,
                    Evid::Dose => 1,
                };
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{},{}",
                    s.id,
                    r.time,
                    evid,
                    opt(r.amt),
                    opt(r.dv),
                    u8::from(r.mdv),
                    c.wt,
                    c.age,
                    c.sex.code(),
                    c.volgrp.code(),
                    opt(c.aag),
                );
            }
        }
        out
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| ".".to_string(), |x| x.to_string())
}

/// Parse and validate a dataset, applying LLOQ censoring to observation rows.
pub fn parse_dataset(text: &str, lloq: f64) -> Result<StudyDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());

    let headers = reader
        .headers()
        .map_err(|e| Error::Schema(format!("cannot read header: {e}")))?
        .clone();
    let mut index = BTreeMap::new();
    for (i, h) in headers.iter().enumerate() {
        let name = h.to_ascii_uppercase();
        if !COLUMNS.contains(&name.as_str()) {
            return Err(Error::Schema(format!("unknown column \"{h}\"")));
        }
        if index.insert(name.clone(), i).is_some() {
            return Err(Error::Schema(format!("duplicate column \"{name}\"")));
        }
    }
    for col in COLUMNS {
        if !index.contains_key(col) {
            return Err(Error::Schema(format!("missing column \"{col}\"")));
        }
    }
    let col = |name: &str| index[name];

    struct Pending {
        first_row: usize,
        covariates: Covariates,
        records: Vec<(usize, EventRecord)>,
    }
    let mut groups: BTreeMap<u32, Pending> = BTreeMap::new();

    for result in reader.records() {
        let rec = result.map_err(|e| Error::Schema(format!("malformed CSV: {e}")))?;
        let row = rec.position().map_or(0, |p| p.line() as usize);
        let field = |name: &str| rec.get(col(name)).unwrap_or("");
        let row_err = |message: String| Error::Row { row, message };

        let number = |name: &str| -> Result<Option<f64>> {
            let s = field(name);
            if s.is_empty() || s == "." {
                return Ok(None);
            }
            let v: f64 = s
                .parse()
                .map_err(|_| row_err(format!("{name}: non-numeric value \"{s}\"")))?;
            if !v.is_finite() {
                return Err(row_err(format!("{name}: non-finite value \"{s}\"")));
            }
            Ok(Some(v))
        };
        let required = |name: &str| -> Result<f64> {
            number(name)?.ok_or_else(|| row_err(format!("{name} is required")))
        };
        let flag = |name: &str| -> Result<u8> {
            match required(name)? {
                v if v == 0.0 => Ok(0),
                v if v == 1.0 => Ok(1),
                v => Err(row_err(format!("{name} must be 0 or 1, got {v}"))),
            }
        };

        let id_raw = required("ID")?;
        if id_raw < 0.0 || id_raw.fract() != 0.0 || id_raw > u32::MAX as f64 {
            return Err(row_err(format!("ID must be a non-negative integer, got {id_raw}")));
        }
        let id = id_raw as u32;
        let time = required("TIME")?;
        if time < 0.0 {
            return Err(row_err(format!("TIME must be >= 0, got {time}")));
        }
        let evid = match flag("EVID")? {
            0 => Evid::Observation,
            _ => Evid::Dose,
        };
        let amt = number("AMT")?;
        let dv = number("DV")?;
        let mdv = flag("MDV")? == 1;

        let record = match evid {
            Evid::Dose => {
                if dv.is_some() {
                    return Err(row_err("dose row must not carry DV".into()));
                }
                match amt {
                    Some(a) if a > 0.0 => EventRecord { time, evid, amt, dv: None, mdv: true },
                    _ => return Err(row_err("dose row requires AMT > 0".into())),
                }
            }
            Evid::Observation => {
                if amt.is_some() {
                    return Err(row_err("observation row must not carry AMT".into()));
                }
                if dv.is_none() && !mdv {
                    return Err(row_err("observation row with MDV=0 requires DV".into()));
                }
                let censored = dv.is_some_and(|v| v < lloq);
                EventRecord { time, evid, amt: None, dv, mdv: mdv || censored }
            }
        };

        let wt = required("WT")?;
        if wt <= 0.0 {
            return Err(row_err(format!("WT must be > 0, got {wt}")));
        }
        let age = required("AGE")?;
        if age < 0.0 {
            return Err(row_err(format!("AGE must be >= 0, got {age}")));
        }
        let sex = if flag("SEX")? == 1 { Sex::Female } else { Sex::Male };
        let volgrp = if flag("VOLGRP")? == 1 { VolumeGroup::High } else { VolumeGroup::Low };
        let aag = number("AAG")?;
        if aag.is_some_and(|a| a <= 0.0) {
            return Err(row_err("AAG must be > 0 when present".into()));
        }
        let covariates = Covariates { wt, age, sex, volgrp, aag };

        let entry = groups.entry(id).or_insert_with(|| Pending {
            first_row: row,
            covariates,
            records: Vec::new(),
        });
        if entry.covariates != covariates {
            return Err(row_err(format!(
                "covariates of subject {id} differ from its first row {}",
                entry.first_row
            )));
        }
        if let Some((prev, _)) = entry
            .records
            .iter()
            .find(|(_, r)| r.time == time && r.evid == evid)
        {
            return Err(row_err(format!(
                "duplicate (ID, TIME, EVID) = ({id}, {time}, {}) first seen at row {prev}",
                u8::from(evid == Evid::Dose)
            )));
        }
        if evid == Evid::Dose {
            if let Some((prev, _)) = entry.records.iter().find(|(_, r)| r.evid == Evid::Dose) {
                return Err(row_err(format!(
                    "subject {id} already has a dose at row {prev}; multiple doses are not supported"
                )));
            }
        }
        entry.records.push((row, record));
    }

    let mut subjects = Vec::with_capacity(groups.len());
    for (id, pending) in groups {
        if !pending.records.iter().any(|(_, r)| r.evid == Evid::Dose) {
            return Err(Error::Row {
                row: pending.first_row,
                message: format!("subject {id} has no dose record"),
            });
        }
        let mut records: Vec<EventRecord> = pending.records.into_iter().map(|(_, r)| r).collect();
        sort_records(&mut records);
        subjects.push(Subject { id, covariates: pending.covariates, records });
    }
    Ok(StudyDataset { subjects, lloq })
}

/// Continuous covariate summary over subjects with a value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContinuousSummary {
    pub name: String,
    pub n: usize,
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub q1: Option<f64>,
    pub q3: Option<f64>,
}

impl ContinuousSummary {
    pub fn from_values(name: &str, values: &[f64]) -> Self {
        let q = summary::quartiles(values);
        ContinuousSummary {
            name: name.to_string(),
            n: values.len(),
            mean: summary::mean(values),
            median: q.map(|q| q.median),
            q1: q.map(|q| q.q1),
            q3: q.map(|q| q.q3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelCount {
    pub label: String,
    pub n: usize,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoricalSummary {
    pub name: String,
    pub levels: Vec<LevelCount>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CovariateSummary {
    pub continuous: Vec<ContinuousSummary>,
    pub categorical: Vec<CategoricalSummary>,
}

impl CovariateSummary {
    pub fn continuous(&self, name: &str) -> Option<&ContinuousSummary> {
        self.continuous.iter().find(|c| c.name == name)
    }

    pub fn categorical(&self, name: &str) -> Option<&CategoricalSummary> {
        self.categorical.iter().find(|c| c.name == name)
    }
}

/// One value per subject; a subject missing a covariate is left out of that
/// covariate's summary only.
pub fn summarize_covariates(ds: &StudyDataset) -> CovariateSummary {
    let covs: Vec<&Covariates> = ds.subjects.iter().map(|s| &s.covariates).collect();
    let collect = |f: &dyn Fn(&Covariates) -> Option<f64>| -> Vec<f64> {
        covs.iter().filter_map(|c| f(c)).collect()
    };
    let continuous = vec![
        ContinuousSummary::from_values("AGE", &collect(&|c| Some(c.age))),
        ContinuousSummary::from_values("WT", &collect(&|c| Some(c.wt))),
        ContinuousSummary::from_values("AAG", &collect(&|c| c.aag)),
    ];

    let levels = |pairs: Vec<(&str, usize)>| -> Vec<LevelCount> {
        let total: usize = pairs.iter().map(|(_, n)| n).sum();
        pairs
            .into_iter()
            .map(|(label, n)| LevelCount {
                label: label.to_string(),
                n,
                percent: if total == 0 { 0.0 } else { 100.0 * n as f64 / total as f64 },
            })
            .collect()
    };
    let count = |pred: &dyn Fn(&Covariates) -> bool| covs.iter().filter(|c| pred(c)).count();
    let categorical = vec![
        CategoricalSummary {
            name: "SEX".into(),
            levels: levels(vec![
                ("female", count(&|c| c.sex == Sex::Female)),
                ("male", count(&|c| c.sex == Sex::Male)),
            ]),
        },
        CategoricalSummary {
            name: "VOLGRP".into(),
            levels: levels(vec![
                ("low_volume", count(&|c| c.volgrp == VolumeGroup::Low)),
                ("high_volume", count(&|c| c.volgrp == VolumeGroup::High)),
            ]),
        },
    ];
    CovariateSummary { continuous, categorical }
}
