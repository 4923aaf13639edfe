//! Geographic hierarchy, study records, covariates and population tables.
//!
//! All tables are immutable once built. CSV readers check the fixed headers
//! and report the offending file and line on failure.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IngestError, IngestErrorKind, Result};
use crate::scalar::Scalar;

pub const HIERARCHY_HEADER: [&str; 3] = ["country_id", "subregion_id", "region_id"];
pub const STUDIES_HEADER: [&str; 10] = [
    "study_id",
    "country_id",
    "year",
    "coverage",
    "study_urbanization",
    "age_lo",
    "age_hi",
    "mean",
    "sd",
    "n",
];
pub const COVARIATES_HEADER: [&str; 8] = [
    "country_id",
    "year",
    "income",
    "urbanization",
    "food_pc1",
    "food_pc2",
    "food_pc3",
    "food_pc4",
];
pub const POPULATION_HEADER: [&str; 5] = ["country_id", "year", "age_lo", "age_hi", "pop"];
pub const STANDARD_POP_HEADER: [&str; 3] = ["age_lo", "age_hi", "weight"];

/// Number of lags in the triangular covariate smoother.
pub const SMOOTHING_WIDTH: usize = 10;

pub const N_COVARIATES: usize = 6;
pub const N_DESIGN: usize = 11;

pub const DESIGN_COLUMNS: [&str; N_DESIGN] = [
    "income",
    "urbanization",
    "income_x_time",
    "urbanization_x_time",
    "food_pc1",
    "food_pc2",
    "food_pc3",
    "food_pc4",
    "nonnational",
    "nonnational_x_time",
    "urbanization_difference",
];

pub type CovariateValues = [f64; N_COVARIATES];
pub type DesignRow = [f64; N_DESIGN];

// ---------------------------------------------------------------------------
// hierarchy

/// Country → subregion → region map with dense 0-based ids assigned in order
/// of first appearance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoHierarchy {
    country_labels: Vec<String>,
    subregion_labels: Vec<String>,
    region_labels: Vec<String>,
    subregion_of: Vec<usize>,
    region_of_subregion: Vec<usize>,
}

impl GeoHierarchy {
    /// Builds from `(country, subregion, region)` label triples.
    pub fn from_labels<S: AsRef<str>>(
        triples: &[(S, S, S)],
    ) -> std::result::Result<Self, (usize, IngestErrorKind)> {
        if triples.is_empty() {
            return Err((0, IngestErrorKind::EmptyFile));
        }
        let mut h = GeoHierarchy {
            country_labels: Vec::new(),
            subregion_labels: Vec::new(),
            region_labels: Vec::new(),
            subregion_of: Vec::new(),
            region_of_subregion: Vec::new(),
        };
        let mut countries: HashMap<String, usize> = HashMap::new();
        let mut subregions: HashMap<String, usize> = HashMap::new();
        let mut regions: HashMap<String, usize> = HashMap::new();
        for (idx, (c, s, r)) in triples.iter().enumerate() {
            let (c, s, r) = (c.as_ref().trim(), s.as_ref().trim(), r.as_ref().trim());
            if c.is_empty() {
                return Err((idx, IngestErrorKind::InvalidValue {
                    field: "country_id".into(),
                    value: String::new(),
                }));
            }
            if s.is_empty() {
                return Err((idx, IngestErrorKind::OrphanId(c.to_string())));
            }
            if r.is_empty() {
                return Err((idx, IngestErrorKind::OrphanId(s.to_string())));
            }
            if countries.contains_key(c) {
                return Err((idx, IngestErrorKind::DuplicateId(c.to_string())));
            }
            let l = *regions.entry(r.to_string()).or_insert_with(|| {
                h.region_labels.push(r.to_string());
                h.region_labels.len() - 1
            });
            let k = match subregions.get(s) {
                Some(&k) => {
                    let existing = h.region_of_subregion[k];
                    if existing != l {
                        return Err((idx, IngestErrorKind::ConflictingParent {
                            child: s.to_string(),
                            first: h.region_labels[existing].clone(),
                            second: r.to_string(),
                        }));
                    }
                    k
                }
                None => {
                    h.subregion_labels.push(s.to_string());
                    h.region_of_subregion.push(l);
                    subregions.insert(s.to_string(), h.subregion_labels.len() - 1);
                    h.subregion_labels.len() - 1
                }
            };
            countries.insert(c.to_string(), h.country_labels.len());
            h.country_labels.push(c.to_string());
            h.subregion_of.push(k);
        }
        Ok(h)
    }

    /// Builds from index maps, generating labels `C0..`, `S0..`, `R0..`.
    pub fn from_indices(subregion_of: Vec<usize>, region_of_subregion: Vec<usize>) -> Result<Self> {
        let n_sub = region_of_subregion.len();
        let n_reg = region_of_subregion.iter().max().map_or(0, |m| m + 1);
        if subregion_of.is_empty() || subregion_of.iter().any(|&k| k >= n_sub) {
            return Err(Error::InvalidArgument("subregion index out of range".into()));
        }
        for k in 0..n_sub {
            if !subregion_of.contains(&k) {
                return Err(Error::InvalidArgument(format!("subregion {k} has no countries")));
            }
        }
        for l in 0..n_reg {
            if !region_of_subregion.contains(&l) {
                return Err(Error::InvalidArgument(format!("region {l} has no subregions")));
            }
        }
        Ok(Self {
            country_labels: (0..subregion_of.len()).map(|j| format!("C{j}")).collect(),
            subregion_labels: (0..n_sub).map(|k| format!("S{k}")).collect(),
            region_labels: (0..n_reg).map(|l| format!("R{l}")).collect(),
            subregion_of,
            region_of_subregion,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let rows = read_csv(path, &HIERARCHY_HEADER)?;
        let triples: Vec<(String, String, String)> = rows
            .iter()
            .map(|(_, r)| (r[0].to_string(), r[1].to_string(), r[2].to_string()))
            .collect();
        GeoHierarchy::from_labels(&triples).map_err(|(idx, kind)| {
            let line = rows.get(idx).map(|(l, _)| *l);
            IngestError::new(path, line, kind).into()
        })
    }

    pub fn n_countries(&self) -> usize {
        self.country_labels.len()
    }

    pub fn n_subregions(&self) -> usize {
        self.subregion_labels.len()
    }

    pub fn n_regions(&self) -> usize {
        self.region_labels.len()
    }

    pub fn subregion_of(&self, country: usize) -> usize {
        self.subregion_of[country]
    }

    pub fn region_of(&self, country: usize) -> usize {
        self.region_of_subregion[self.subregion_of[country]]
    }

    pub fn region_of_subregion(&self, subregion: usize) -> usize {
        self.region_of_subregion[subregion]
    }

    pub fn country_index(&self, label: &str) -> Option<usize> {
        self.country_labels.iter().position(|c| c == label)
    }

    pub fn country_label(&self, j: usize) -> &str {
        &self.country_labels[j]
    }

    pub fn subregion_label(&self, k: usize) -> &str {
        &self.subregion_labels[k]
    }

    pub fn region_label(&self, l: usize) -> &str {
        &self.region_labels[l]
    }

    pub fn countries_in_subregion(&self, k: usize) -> Vec<usize> {
        (0..self.n_countries()).filter(|&j| self.subregion_of[j] == k).collect()
    }

    pub fn countries_in_region(&self, l: usize) -> Vec<usize> {
        (0..self.n_countries()).filter(|&j| self.region_of(j) == l).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(HIERARCHY_HEADER)?;
        for j in 0..self.n_countries() {
            let k = self.subregion_of[j];
            w.write_record([
                &self.country_labels[j],
                &self.subregion_labels[k],
                &self.region_labels[self.region_of_subregion[k]],
            ])?;
        }
        write_atomic(path, &finish(w)?)
    }
}

// ---------------------------------------------------------------------------
// time window and ages

/// Inclusive range of integer analysis years.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub t_min: i32,
    pub t_max: i32,
}

impl Window {
    pub fn new(t_min: i32, t_max: i32) -> Result<Self> {
        if t_max < t_min {
            return Err(Error::Config(format!("window [{t_min}, {t_max}] is not ordered")));
        }
        Ok(Self { t_min, t_max })
    }

    pub fn len(&self) -> usize {
        (self.t_max - self.t_min + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, year: i32) -> bool {
        (self.t_min..=self.t_max).contains(&year)
    }

    pub fn offset(&self, year: i32) -> usize {
        debug_assert!(self.contains(year));
        (year - self.t_min) as usize
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.t_min as f64 + self.t_max as f64)
    }

    /// Year minus the window midpoint.
    pub fn centered(&self, year: i32) -> f64 {
        year as f64 - self.midpoint()
    }

    pub fn years(&self) -> impl Iterator<Item = i32> {
        self.t_min..=self.t_max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgeGroup {
    pub lo: f64,
    pub hi: f64,
}

impl AgeGroup {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn contains(&self, age: f64) -> bool {
        age >= self.lo && age <= self.hi
    }

    pub fn label(&self) -> String {
        format!("{}-{}", self.lo, self.hi)
    }
}

// ---------------------------------------------------------------------------
// studies

/// Representativeness class of a study; selects its `ν` and `τ²`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Coverage {
    WeightedNational,
    UnweightedNational,
    Subnational,
    Community,
}

impl Coverage {
    pub const ALL: [Coverage; 4] = [
        Coverage::WeightedNational,
        Coverage::UnweightedNational,
        Coverage::Subnational,
        Coverage::Community,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_national(self) -> bool {
        matches!(self, Coverage::WeightedNational | Coverage::UnweightedNational)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Coverage::WeightedNational => "weighted_national",
            Coverage::UnweightedNational => "unweighted_national",
            Coverage::Subnational => "subnational",
            Coverage::Community => "community",
        }
    }

    /// Short suffix used in parameter names (`w`, `u`, `s`, `c`).
    pub fn suffix(self) -> &'static str {
        match self {
            Coverage::WeightedNational => "w",
            Coverage::UnweightedNational => "u",
            Coverage::Subnational => "s",
            Coverage::Community => "c",
        }
    }
}

impl fmt::Display for Coverage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Coverage {
    type Err = IngestErrorKind;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| !matches!(c, '_' | '-' | ' '))
            .flat_map(char::to_lowercase)
            .collect();
        match key.as_str() {
            "weightednational" | "w" => Ok(Coverage::WeightedNational),
            "unweightednational" | "u" => Ok(Coverage::UnweightedNational),
            "subnational" | "s" => Ok(Coverage::Subnational),
            "community" | "c" => Ok(Coverage::Community),
            _ => Err(IngestErrorKind::InvalidValue {
                field: "coverage".into(),
                value: s.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeRow {
    pub age_lo: f64,
    pub age_hi: f64,
    /// Sample mean.
    pub y: f64,
    /// Sample standard deviation.
    pub s: f64,
    pub n: u32,
    /// Midpoint age used for the spline.
    pub z: f64,
}

impl AgeRow {
    pub fn new(age_lo: f64, age_hi: f64, y: f64, s: f64, n: u32) -> std::result::Result<Self, IngestErrorKind> {
        if !(age_lo < age_hi) || !age_lo.is_finite() || !age_hi.is_finite() || age_lo < 0.0 {
            return Err(IngestErrorKind::AgeRange {
                lo: age_lo,
                hi: age_hi,
            });
        }
        if n < 1 {
            return Err(IngestErrorKind::SampleSize(n as i64));
        }
        if !(s > 0.0) || !s.is_finite() {
            return Err(IngestErrorKind::NonPositiveSd(s));
        }
        if !y.is_finite() {
            return Err(IngestErrorKind::InvalidValue {
                field: "mean".into(),
                value: y.to_string(),
            });
        }
        Ok(Self {
            age_lo,
            age_hi,
            y,
            s,
            n,
            z: 0.5 * (age_lo + age_hi),
        })
    }

    /// Known sampling variance of the mean, `s²/n`.
    pub fn sampling_variance(&self) -> f64 {
        self.s * self.s / self.n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub study_id: String,
    pub country: usize,
    pub year: i32,
    pub coverage: Coverage,
    pub study_urbanization: f64,
    pub rows: Vec<AgeRow>,
}

pub fn load_studies(path: &Path, hierarchy: &GeoHierarchy, window: Window) -> Result<Vec<StudyRecord>> {
    let rows = read_csv(path, &STUDIES_HEADER)?;
    let err = |line: u64, kind| Error::from(IngestError::new(path, Some(line), kind));
    let mut order: Vec<String> = Vec::new();
    let mut by_id: HashMap<String, StudyRecord> = HashMap::new();
    for (line, rec) in &rows {
        let line = *line;
        let study_id = rec[0].trim().to_string();
        if study_id.is_empty() {
            return Err(err(line, IngestErrorKind::InvalidValue {
                field: "study_id".into(),
                value: String::new(),
            }));
        }
        let country_label = rec[1].trim();
        let country = hierarchy
            .country_index(country_label)
            .ok_or_else(|| err(line, IngestErrorKind::UnknownCountry(country_label.to_string())))?;
        let year: i32 = parse_field(rec, 2, "year").map_err(|k| err(line, k))?;
        if !window.contains(year) {
            return Err(err(line, IngestErrorKind::YearOutOfWindow {
                year,
                min: window.t_min,
                max: window.t_max,
            }));
        }
        let coverage: Coverage = rec[3].trim().parse().map_err(|k| err(line, k))?;
        let study_urbanization: f64 = parse_field(rec, 4, "study_urbanization").map_err(|k| err(line, k))?;
        if !(0.0..=1.0).contains(&study_urbanization) {
            return Err(err(line, IngestErrorKind::InvalidValue {
                field: "study_urbanization".into(),
                value: study_urbanization.to_string(),
            }));
        }
        let age_lo: f64 = parse_field(rec, 5, "age_lo").map_err(|k| err(line, k))?;
        let age_hi: f64 = parse_field(rec, 6, "age_hi").map_err(|k| err(line, k))?;
        let y: f64 = parse_field(rec, 7, "mean").map_err(|k| err(line, k))?;
        let s: f64 = parse_field(rec, 8, "sd").map_err(|k| err(line, k))?;
        let n = parse_count(rec, 9).map_err(|k| err(line, k))?;
        let row = AgeRow::new(age_lo, age_hi, y, s, n).map_err(|k| err(line, k))?;

        match by_id.get_mut(&study_id) {
            Some(study) => {
                let mismatch = if study.country != country {
                    Some("country_id")
                } else if study.year != year {
                    Some("year")
                } else if study.coverage != coverage {
                    Some("coverage")
                } else if study.study_urbanization != study_urbanization {
                    Some("study_urbanization")
                } else {
                    None
                };
                if let Some(field) = mismatch {
                    return Err(err(line, IngestErrorKind::InconsistentStudy {
                        study: study_id,
                        field: field.into(),
                    }));
                }
                study.rows.push(row);
            }
            None => {
                order.push(study_id.clone());
                by_id.insert(study_id.clone(), StudyRecord {
                    study_id,
                    country,
                    year,
                    coverage,
                    study_urbanization,
                    rows: vec![row],
                });
            }
        }
    }
    Ok(order
        .into_iter()
        .map(|id| by_id.remove(&id).expect("study recorded"))
        .collect())
}

pub fn write_studies(path: &Path, hierarchy: &GeoHierarchy, studies: &[StudyRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(STUDIES_HEADER)?;
    for st in studies {
        for r in &st.rows {
            w.write_record([
                st.study_id.clone(),
                hierarchy.country_label(st.country).to_string(),
                st.year.to_string(),
                st.coverage.to_string(),
                st.study_urbanization.to_string(),
                r.age_lo.to_string(),
                r.age_hi.to_string(),
                r.y.to_string(),
                r.s.to_string(),
                r.n.to_string(),
            ])?;
        }
    }
    write_atomic(path, &finish(w)?)
}

// ---------------------------------------------------------------------------
// covariates

/// Normalized triangular weights `w_d ∝ width − d` for lags `d = 0..width`.
pub fn triangular_weights<T: Scalar>(width: usize) -> Vec<T> {
    let total = T::from_count(width * (width + 1) / 2);
    (0..width).map(|d| T::from_count(width - d) / total).collect()
}

/// Triangularly weighted trailing moving average. Lags before the start of
/// the series are dropped and the remaining weights renormalized.
pub fn smooth_covariate<T: Scalar>(series: &[T], width: usize) -> Result<Vec<T>> {
    if series.is_empty() {
        return Err(Error::InvalidArgument("cannot smooth an empty series".into()));
    }
    if width == 0 {
        return Err(Error::InvalidArgument("smoothing width must be >= 1".into()));
    }
    let raw_w: Vec<T> = (0..width).map(|d| T::from_count(width - d)).collect();
    Ok((0..series.len())
        .map(|t| {
            let lags = width.min(t + 1);
            let norm: T = raw_w[..lags].iter().copied().sum();
            (0..lags).map(|d| raw_w[d] * series[t - d]).sum::<T>() / norm
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CountrySeries {
    first_year: i32,
    raw: Vec<CovariateValues>,
    smoothed: Vec<CovariateValues>,
}

/// Country-year covariates with their smoothed counterparts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateTable {
    series: Vec<CountrySeries>,
    country_labels: Vec<String>,
}

impl CovariateTable {
    /// `series[j] = (first_year, consecutive yearly values)`; every country must
    /// cover `window`.
    pub fn from_series(
        hierarchy: &GeoHierarchy,
        window: Window,
        series: Vec<(i32, Vec<CovariateValues>)>,
    ) -> std::result::Result<Self, IngestErrorKind> {
        assert_eq!(series.len(), hierarchy.n_countries(), "one series per country");
        let mut out = Vec::with_capacity(series.len());
        for (j, (first_year, raw)) in series.into_iter().enumerate() {
            let last = first_year + raw.len() as i32 - 1;
            if raw.is_empty() || first_year > window.t_min || last < window.t_max {
                let year = if raw.is_empty() || first_year > window.t_min {
                    window.t_min
                } else {
                    window.t_max
                };
                return Err(IngestErrorKind::MissingCovariate {
                    country: hierarchy.country_label(j).to_string(),
                    year,
                });
            }
            for v in &raw {
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(IngestErrorKind::InvalidValue {
                        field: "covariate".into(),
                        value: format!("{v:?}"),
                    });
                }
                if !(0.0..=1.0).contains(&v[1]) {
                    return Err(IngestErrorKind::InvalidValue {
                        field: "urbanization".into(),
                        value: v[1].to_string(),
                    });
                }
            }
            let mut smoothed = vec![[0.0; N_COVARIATES]; raw.len()];
            for c in 0..N_COVARIATES {
                let col: Vec<f64> = raw.iter().map(|v| v[c]).collect();
                let s = smooth_covariate(&col, SMOOTHING_WIDTH).expect("non-empty");
                for (t, v) in s.into_iter().enumerate() {
                    smoothed[t][c] = v;
                }
            }
            out.push(CountrySeries {
                first_year,
                raw,
                smoothed,
            });
        }
        Ok(Self {
            series: out,
            country_labels: (0..hierarchy.n_countries())
                .map(|j| hierarchy.country_label(j).to_string())
                .collect(),
        })
    }

    pub fn load(path: &Path, hierarchy: &GeoHierarchy, window: Window) -> Result<Self> {
        let rows = read_csv(path, &COVARIATES_HEADER)?;
        let err = |line: Option<u64>, kind| Error::from(IngestError::new(path, line, kind));
        let mut cells: Vec<BTreeMap<i32, (u64, CovariateValues)>> =
            vec![BTreeMap::new(); hierarchy.n_countries()];
        for (line, rec) in &rows {
            let line = *line;
            let label = rec[0].trim();
            let j = hierarchy
                .country_index(label)
                .ok_or_else(|| err(Some(line), IngestErrorKind::UnknownCountry(label.to_string())))?;
            let year: i32 = parse_field(rec, 1, "year").map_err(|k| err(Some(line), k))?;
            let mut v = [0.0; N_COVARIATES];
            for (c, slot) in v.iter_mut().enumerate() {
                *slot = parse_field(rec, c + 2, COVARIATES_HEADER[c + 2]).map_err(|k| err(Some(line), k))?;
            }
            if !(0.0..=1.0).contains(&v[1]) {
                return Err(err(Some(line), IngestErrorKind::InvalidValue {
                    field: "urbanization".into(),
                    value: v[1].to_string(),
                }));
            }
            if cells[j].insert(year, (line, v)).is_some() {
                return Err(err(Some(line), IngestErrorKind::DuplicateCell(format!("{label} {year}"))));
            }
        }
        let mut series = Vec::with_capacity(cells.len());
        for (j, map) in cells.into_iter().enumerate() {
            let Some((&first, _)) = map.iter().next() else {
                return Err(err(None, IngestErrorKind::MissingCovariate {
                    country: hierarchy.country_label(j).to_string(),
                    year: window.t_min,
                }));
            };
            let mut raw = Vec::with_capacity(map.len());
            for (expected, (&year, &(_, v))) in (first..).zip(map.iter()) {
                if year != expected {
                    return Err(err(None, IngestErrorKind::MissingCovariate {
                        country: hierarchy.country_label(j).to_string(),
                        year: expected,
                    }));
                }
                raw.push(v);
            }
            series.push((first, raw));
        }
        Self::from_series(hierarchy, window, series).map_err(|k| err(None, k))
    }

    fn cell(&self, country: usize, year: i32) -> Option<(usize, &CountrySeries)> {
        let s = self.series.get(country)?;
        let idx = year - s.first_year;
        (idx >= 0 && (idx as usize) < s.raw.len()).then_some((idx as usize, s))
    }

    fn missing(&self, country: usize, year: i32) -> Error {
        Error::MissingCovariate {
            country: self
                .country_labels
                .get(country)
                .cloned()
                .unwrap_or_else(|| country.to_string()),
            year,
        }
    }

    pub fn raw(&self, country: usize, year: i32) -> Result<CovariateValues> {
        self.cell(country, year)
            .map(|(i, s)| s.raw[i])
            .ok_or_else(|| self.missing(country, year))
    }

    pub fn smoothed(&self, country: usize, year: i32) -> Result<CovariateValues> {
        self.cell(country, year)
            .map(|(i, s)| s.smoothed[i])
            .ok_or_else(|| self.missing(country, year))
    }

    pub fn year_range(&self, country: usize) -> (i32, i32) {
        let s = &self.series[country];
        (s.first_year, s.first_year + s.raw.len() as i32 - 1)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(COVARIATES_HEADER)?;
        for (j, s) in self.series.iter().enumerate() {
            for (t, v) in s.raw.iter().enumerate() {
                let mut rec = vec![self.country_labels[j].clone(), (s.first_year + t as i32).to_string()];
                rec.extend(v.iter().map(|x| x.to_string()));
                w.write_record(rec)?;
            }
        }
        write_atomic(path, &finish(w)?)
    }
}

/// Design row for one (country, year) under a given representativeness setting.
pub fn design_row(
    covariates: &CovariateTable,
    window: &Window,
    country: usize,
    year: i32,
    nonnational: bool,
    study_urbanization: Option<f64>,
) -> Result<DesignRow> {
    let sm = covariates.smoothed(country, year)?;
    let raw = covariates.raw(country, year)?;
    let tc = window.centered(year);
    let ind = if nonnational { 1.0 } else { 0.0 };
    let urban_diff = study_urbanization.map_or(0.0, |u| u - raw[1]);
    Ok([
        sm[0],
        sm[1],
        sm[0] * tc,
        sm[1] * tc,
        sm[2],
        sm[3],
        sm[4],
        sm[5],
        ind,
        ind * tc,
        urban_diff,
    ])
}

pub fn build_design_rows(
    studies: &[StudyRecord],
    covariates: &CovariateTable,
    window: &Window,
) -> Result<Vec<DesignRow>> {
    studies
        .iter()
        .map(|s| {
            design_row(
                covariates,
                window,
                s.country,
                s.year,
                !s.coverage.is_national(),
                Some(s.study_urbanization),
            )
        })
        .collect()
}

// ---------------------------------------------------------------------------
// population

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationTable {
    age_groups: Vec<AgeGroup>,
    standard_weights: Vec<f64>,
    counts: HashMap<(usize, i32, usize), f64>,
}

impl PopulationTable {
    /// Standard weights are renormalized to sum to exactly 1 after checking they
    /// sum to 1 within 1e-6.
    pub fn new(age_groups: Vec<AgeGroup>, standard_weights: Vec<f64>) -> std::result::Result<Self, IngestErrorKind> {
        if age_groups.is_empty() || age_groups.len() != standard_weights.len() {
            return Err(IngestErrorKind::EmptyFile);
        }
        let total: f64 = standard_weights.iter().sum();
        if standard_weights.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-6 {
            return Err(IngestErrorKind::StandardWeights(total));
        }
        Ok(Self {
            age_groups,
            standard_weights: standard_weights.iter().map(|w| w / total).collect(),
            counts: HashMap::new(),
        })
    }

    pub fn insert(&mut self, country: usize, year: i32, age_index: usize, count: f64) -> std::result::Result<(), IngestErrorKind> {
        if !(count >= 0.0) || !count.is_finite() {
            return Err(IngestErrorKind::InvalidValue {
                field: "pop".into(),
                value: count.to_string(),
            });
        }
        if self.counts.insert((country, year, age_index), count).is_some() {
            return Err(IngestErrorKind::DuplicateCell(format!("{country} {year} {age_index}")));
        }
        Ok(())
    }

    pub fn load(population: &Path, standard: &Path, hierarchy: &GeoHierarchy) -> Result<Self> {
        let srows = read_csv(standard, &STANDARD_POP_HEADER)?;
        let mut groups = Vec::new();
        let mut weights = Vec::new();
        for (line, rec) in &srows {
            let e = |k| Error::from(IngestError::new(standard, Some(*line), k));
            let lo: f64 = parse_field(rec, 0, "age_lo").map_err(e)?;
            let hi: f64 = parse_field(rec, 1, "age_hi").map_err(e)?;
            if !(lo < hi) {
                return Err(e(IngestErrorKind::AgeRange { lo, hi }));
            }
            groups.push(AgeGroup::new(lo, hi));
            weights.push(parse_field(rec, 2, "weight").map_err(e)?);
        }
        let mut table = Self::new(groups, weights).map_err(|k| IngestError::new(standard, None, k))?;
        let prows = read_csv(population, &POPULATION_HEADER)?;
        for (line, rec) in &prows {
            let e = |k| Error::from(IngestError::new(population, Some(*line), k));
            let label = rec[0].trim();
            let j = hierarchy
                .country_index(label)
                .ok_or_else(|| e(IngestErrorKind::UnknownCountry(label.to_string())))?;
            let year: i32 = parse_field(rec, 1, "year").map_err(e)?;
            let lo: f64 = parse_field(rec, 2, "age_lo").map_err(e)?;
            let hi: f64 = parse_field(rec, 3, "age_hi").map_err(e)?;
            let a = table
                .age_index(lo, hi)
                .ok_or_else(|| e(IngestErrorKind::AgeRange { lo, hi }))?;
            let pop: f64 = parse_field(rec, 4, "pop").map_err(e)?;
            table.insert(j, year, a, pop).map_err(e)?;
        }
        Ok(table)
    }

    pub fn age_groups(&self) -> &[AgeGroup] {
        &self.age_groups
    }

    pub fn standard_weights(&self) -> &[f64] {
        &self.standard_weights
    }

    pub fn age_index(&self, lo: f64, hi: f64) -> Option<usize> {
        self.age_groups.iter().position(|g| g.lo == lo && g.hi == hi)
    }

    pub fn count(&self, country: usize, year: i32, age_index: usize) -> Option<f64> {
        self.counts.get(&(country, year, age_index)).copied()
    }

    pub fn write_csv(&self, population: &Path, standard: &Path, hierarchy: &GeoHierarchy) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(STANDARD_POP_HEADER)?;
        for (g, wt) in self.age_groups.iter().zip(&self.standard_weights) {
            w.write_record([g.lo.to_string(), g.hi.to_string(), wt.to_string()])?;
        }
        write_atomic(standard, &finish(w)?)?;

        let mut keys: Vec<_> = self.counts.keys().copied().collect();
        keys.sort_unstable();
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(POPULATION_HEADER)?;
        for (j, year, a) in keys {
            let g = self.age_groups[a];
            w.write_record([
                hierarchy.country_label(j).to_string(),
                year.to_string(),
                g.lo.to_string(),
                g.hi.to_string(),
                self.counts[&(j, year, a)].to_string(),
            ])?;
        }
        write_atomic(population, &finish(w)?)
    }
}

// ---------------------------------------------------------------------------
// bundled dataset

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputPaths {
    pub hierarchy: PathBuf,
    pub studies: PathBuf,
    pub covariates: PathBuf,
    pub population: PathBuf,
    pub standard_pop: PathBuf,
}

impl InputPaths {
    /// The five standard file names inside `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            hierarchy: dir.join("hierarchy.csv"),
            studies: dir.join("studies.csv"),
            covariates: dir.join("covariates.csv"),
            population: dir.join("population.csv"),
            standard_pop: dir.join("standard_pop.csv"),
        }
    }
}

/// Everything the sampler needs: hierarchy, window, studies, covariates and
/// one design row per study.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub hierarchy: GeoHierarchy,
    pub window: Window,
    pub studies: Vec<StudyRecord>,
    pub covariates: CovariateTable,
    pub design: Vec<DesignRow>,
}

impl Dataset {
    pub fn new(
        hierarchy: GeoHierarchy,
        window: Window,
        studies: Vec<StudyRecord>,
        covariates: CovariateTable,
    ) -> Result<Self> {
        let design = build_design_rows(&studies, &covariates, &window)?;
        Ok(Self {
            hierarchy,
            window,
            studies,
            covariates,
            design,
        })
    }

    pub fn load(paths: &InputPaths, window: Window) -> Result<Self> {
        let hierarchy = GeoHierarchy::load(&paths.hierarchy)?;
        let studies = load_studies(&paths.studies, &hierarchy, window)?;
        let covariates = CovariateTable::load(&paths.covariates, &hierarchy, window)?;
        Self::new(hierarchy, window, studies, covariates)
    }

    /// Same geography and covariates, keeping only studies with `keep[i]`.
    pub fn subset(&self, keep: &[bool]) -> Self {
        assert_eq!(keep.len(), self.studies.len());
        let pick = |i: &usize| keep[*i];
        let idx: Vec<usize> = (0..self.studies.len()).filter(pick).collect();
        Self {
            hierarchy: self.hierarchy.clone(),
            window: self.window,
            studies: idx.iter().map(|&i| self.studies[i].clone()).collect(),
            covariates: self.covariates.clone(),
            design: idx.iter().map(|&i| self.design[i]).collect(),
        }
    }

    /// Same geography and covariates with no studies at all.
    pub fn without_studies(&self) -> Self {
        self.subset(&vec![false; self.studies.len()])
    }

    pub fn n_rows(&self) -> usize {
        self.studies.iter().map(|s| s.rows.len()).sum()
    }
}

// ---------------------------------------------------------------------------
// csv helpers

type Record = csv::StringRecord;

fn read_csv(path: &Path, header: &[&str]) -> Result<Vec<(u64, Record)>> {
    let file = std::fs::File::open(path)
        .map_err(|e| IngestError::new(path, None, IngestErrorKind::Io(e.to_string())))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(std::io::BufReader::new(file));
    let found = rdr
        .headers()
        .map_err(|e| IngestError::new(path, Some(1), IngestErrorKind::Csv(e.to_string())))?
        .clone();
    let found_str: Vec<&str> = found.iter().map(|h| h.trim_start_matches('\u{feff}')).collect();
    if found_str != header {
        return Err(IngestError::new(path, Some(1), IngestErrorKind::Header {
            expected: header.join(","),
            found: found_str.join(","),
        })
        .into());
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line());
            IngestError::new(path, line, IngestErrorKind::Csv(e.to_string()))
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        out.push((line, rec));
    }
    if out.is_empty() {
        return Err(IngestError::new(path, None, IngestErrorKind::EmptyFile).into());
    }
    Ok(out)
}

fn parse_field<T: FromStr>(rec: &Record, idx: usize, name: &str) -> std::result::Result<T, IngestErrorKind> {
    let raw = rec.get(idx).unwrap_or("").trim();
    raw.parse().map_err(|_| IngestErrorKind::InvalidValue {
        field: name.to_string(),
        value: raw.to_string(),
    })
}

fn parse_count(rec: &Record, idx: usize) -> std::result::Result<u32, IngestErrorKind> {
    let raw = rec.get(idx).unwrap_or("").trim();
    let value: i64 = match raw.parse::<i64>() {
        Ok(v) => v,
        Err(_) => match raw.parse::<f64>() {
            Ok(f) if f.fract() == 0.0 && f.is_finite() => f as i64,
            _ => {
                return Err(IngestErrorKind::InvalidValue {
                    field: "n".into(),
                    value: raw.to_string(),
                })
            }
        },
    };
    if value < 1 {
        return Err(IngestErrorKind::SampleSize(value));
    }
    u32::try_from(value).map_err(|_| IngestErrorKind::InvalidValue {
        field: "n".into(),
        value: raw.to_string(),
    })
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
