use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use trendfuse::geo_data::{AgeGroup, InputPaths, Window};
use trendfuse::sampler::SamplerConfig;
use trendfuse::validation::{SyntheticSpec, DEFAULT_MASK_FRACTION};

use crate::CliError;

/// Input files: either a directory holding the five standard names, or
/// explicit paths (which win over `dir`).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputSection {
    pub dir: Option<PathBuf>,
    pub hierarchy: Option<PathBuf>,
    pub studies: Option<PathBuf>,
    pub covariates: Option<PathBuf>,
    pub population: Option<PathBuf>,
    pub standard_pop: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSection {
    pub start: i32,
    pub end: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    /// Fit directory to read; defaults to the output directory.
    pub draws: Option<PathBuf>,
    /// `[lo, hi]` pairs; defaults to the standard population's groups.
    pub ages: Option<Vec<[f64; 2]>>,
    pub reference_age: f64,
    pub include_study_effect: bool,
    pub svg: bool,
    pub prediction_seed: u64,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self {
            draws: None,
            ages: None,
            reference_age: 50.0,
            include_study_effect: false,
            svg: false,
            prediction_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateSection {
    pub checks: Vec<String>,
    pub mask_fraction: f64,
    pub allow_empty_levels: bool,
    pub coverage_bounds: [f64; 2],
    pub ppc_bounds: [f64; 2],
    pub replicates: usize,
    pub max_abs_mean_z: f64,
}

impl Default for ValidateSection {
    fn default() -> Self {
        Self {
            checks: vec!["crossval".into(), "ppc".into()],
            mask_fraction: DEFAULT_MASK_FRACTION,
            allow_empty_levels: false,
            coverage_bounds: [0.90, 0.99],
            ppc_bounds: [0.01, 0.99],
            replicates: 50,
            max_abs_mean_z: 0.5,
        }
    }
}

/// Everything a run needs. Read from TOML, then overridden by flags; the
/// resolved value is echoed into the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub jobs: Option<usize>,
    pub out: PathBuf,
    pub window: Option<WindowSection>,
    pub input: InputSection,
    pub sampler: SamplerConfig,
    pub simulate: Option<SyntheticSpec>,
    pub report: ReportSection,
    pub validate: ValidateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            jobs: None,
            out: PathBuf::from("out"),
            window: None,
            input: InputSection::default(),
            sampler: SamplerConfig::default(),
            simulate: None,
            report: ReportSection::default(),
            validate: ValidateSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn window(&self) -> Result<Window, CliError> {
        let w = self
            .window
            .ok_or_else(|| CliError::Config("`[window]` with `start` and `end` is required".into()))?;
        Ok(Window::new(w.start, w.end)?)
    }

    pub fn input_paths(&self) -> Result<InputPaths, CliError> {
        let i = &self.input;
        let base = i.dir.as_deref().map(InputPaths::in_dir);
        let pick = |explicit: &Option<PathBuf>, from_dir: Option<PathBuf>, name: &str| {
            explicit
                .clone()
                .or(from_dir)
                .ok_or_else(|| CliError::Config(format!("no path for the {name} file; set `input.dir` or `input.{name}`")))
        };
        let paths = InputPaths {
            hierarchy: pick(&i.hierarchy, base.as_ref().map(|b| b.hierarchy.clone()), "hierarchy")?,
            studies: pick(&i.studies, base.as_ref().map(|b| b.studies.clone()), "studies")?,
            covariates: pick(&i.covariates, base.as_ref().map(|b| b.covariates.clone()), "covariates")?,
            population: pick(&i.population, base.as_ref().map(|b| b.population.clone()), "population")?,
            standard_pop: pick(&i.standard_pop, base.as_ref().map(|b| b.standard_pop.clone()), "standard_pop")?,
        };
        Ok(paths)
    }

    /// Synthetic spec from the config, or the standard fixture at `seed`.
    pub fn spec(&self) -> SyntheticSpec {
        self.simulate.clone().unwrap_or_else(|| SyntheticSpec::standard(self.seed))
    }

    pub fn ages(&self) -> Option<Vec<AgeGroup>> {
        self.report
            .ages
            .as_ref()
            .map(|v| v.iter().map(|[lo, hi]| AgeGroup::new(*lo, *hi)).collect())
    }
}
