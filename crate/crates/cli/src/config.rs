use std::path::{Path, PathBuf};

use flowtraj::measure::{gen_circle, gen_three_clusters, read_point_csv};
use flowtraj::schedule::edm_grid;
use flowtraj::{DiscreteMeasure, IntegrateOptions, Method, Schedule, SigmaGrid};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    ThreeClusters,
    Circle,
    TwoPoint,
    CustomFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub seed: u64,
    /// Number of points for the circle generator.
    pub n: usize,
    pub radius: f64,
    /// Source file for `custom-file`.
    pub file: Option<PathBuf>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::ThreeClusters,
            seed: 7,
            n: 2048,
            radius: 1.0,
            file: None,
        }
    }
}

impl DatasetSpec {
    pub fn build(&self) -> Result<DiscreteMeasure, CliError> {
        Ok(match self.kind {
            DatasetKind::ThreeClusters => gen_three_clusters(self.seed),
            DatasetKind::Circle => gen_circle(self.n, self.radius, [0.0, 0.0])?,
            DatasetKind::TwoPoint => DiscreteMeasure::two_point(),
            DatasetKind::CustomFile => {
                let path = self
                    .file
                    .as_ref()
                    .ok_or_else(|| CliError::Usage("custom-file needs a data file".into()))?;
                load_measure(path)?
            }
        })
    }
}

/// Reads a point CSV; a missing `w` column means uniform weights.
pub fn load_measure(path: &Path) -> Result<DiscreteMeasure, CliError> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let (points, weights) = read_point_csv(file)?;
    Ok(match weights {
        Some(w) => {
            let total: f64 = w.iter().sum();
            if (total - 1.0).abs() <= 1e-12 {
                DiscreteMeasure::new(points, w)?
            } else {
                DiscreteMeasure::normalized(points, w)?
            }
        }
        None => DiscreteMeasure::uniform(points)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleSpec {
    Rectified,
    Tabulated(PathBuf),
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<Schedule, CliError> {
        Ok(match self {
            ScheduleSpec::Rectified => Schedule::Rectified,
            ScheduleSpec::Tabulated(p) => {
                if !p.exists() {
                    return Err(CliError::Usage(format!("schedule file {} does not exist", p.display())));
                }
                Schedule::load_tabulated(p)?
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub rho: f64,
    pub steps: usize,
    pub substeps: usize,
    pub method: Method,
    pub snap: bool,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            sigma_max: 80.0,
            sigma_min: 0.002,
            rho: 7.0,
            steps: 18,
            substeps: 4,
            method: Method::Rk4,
            snap: true,
        }
    }
}

impl GridSpec {
    pub fn grid(&self) -> Result<SigmaGrid, CliError> {
        Ok(edm_grid(self.sigma_max, self.sigma_min, self.rho, self.steps)?)
    }

    pub fn options(&self) -> IntegrateOptions {
        IntegrateOptions::new(self.method, self.substeps).with_snap(self.snap)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub denoiser: f64,
    pub jacobian: f64,
    pub equivariance: f64,
    pub equivariance_scaled: f64,
    pub subspace: f64,
    pub memorize: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            denoiser: 1e-12,
            jacobian: 1e-5,
            equivariance: 1e-6,
            equivariance_scaled: 1e-5,
            subspace: 1e-8,
            memorize: 1e-2,
        }
    }
}

/// One experiment, as stored in a `--config` JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: String,
    pub dataset: DatasetSpec,
    pub schedule: ScheduleSpec,
    pub grid: GridSpec,
    /// Seed of the Gaussian start points.
    pub seed: u64,
    pub starts: usize,
    pub out: PathBuf,
    pub tolerances: Tolerances,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: "run".into(),
            dataset: DatasetSpec::default(),
            schedule: ScheduleSpec::Rectified,
            grid: GridSpec::default(),
            seed: 0,
            starts: 1,
            out: PathBuf::from("out"),
            tolerances: Tolerances::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if let Some(f) = &self.dataset.file {
            if !f.exists() {
                return Err(CliError::Usage(format!("data file {} does not exist", f.display())));
            }
        }
        if self.grid.substeps == 0 {
            return Err(CliError::Usage("substeps must be at least 1".into()));
        }
        if self.starts == 0 {
            return Err(CliError::Usage("starts must be at least 1".into()));
        }
        self.grid.grid()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"grid": {"steps": 10}, "dataset": {"kind": "two-point"}}"#).unwrap();
        assert_eq!(cfg.grid.steps, 10);
        assert_eq!(cfg.grid.sigma_max, 80.0);
        assert_eq!(cfg.dataset.kind, DatasetKind::TwoPoint);
        assert_eq!(cfg.dataset.seed, 7);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"gird": {}}"#).is_err());
    }

    #[test]
    fn round_trip() {
        let cfg = RunConfig {
            schedule: ScheduleSpec::Tabulated("s.csv".into()),
            ..RunConfig::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
    }
}
