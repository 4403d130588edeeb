//! Command-line front end for `flowtraj`: dataset generation, trajectory runs,
//! stage reports, check suites and batch denoising.
//!
//! Exit codes: `0` success, `1` a check failed, `2` usage or I/O error.

pub mod config;
pub mod suites;
pub mod svg;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use flowtraj::denoiser::denoise;
use flowtraj::integrate::integrate_many;
use flowtraj::measure::{read_point_csv, seeded_rng, three_cluster_specs, PRNG_NAME};
use flowtraj::stages::{stage_report, StageParams};
use flowtraj::{DiscreteMeasure, Method, Trajectory};
use rand::Rng;
use rand_distr::StandardNormal;
use serde_json::json;
use thiserror::Error;

use config::{DatasetKind, DatasetSpec, RunConfig};
use suites::{run_suite, Suite};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error(transparent)]
    Core(#[from] flowtraj::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "flowtraj", version, about = "Flow-matching ODE trajectories with exact denoisers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a dataset as CSV plus a JSON summary.
    GenData(GenDataArgs),
    /// Integrate trajectories from seeded Gaussian starts.
    Trajectory {
        #[command(flatten)]
        run: RunArgs,
        /// Also write an SVG plot (2D data only).
        #[arg(long)]
        svg: bool,
    },
    /// Integrate and annotate trajectories with stage thresholds.
    Stages {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 0.5)]
        zeta: f64,
        /// Cluster ε; defaults to a quarter of each cluster's diameter.
        #[arg(long)]
        cluster_eps: Option<f64>,
        /// Voronoi ε; defaults to a third of each point's separation.
        #[arg(long)]
        terminal_eps: Option<f64>,
    },
    /// Run a check suite and emit JSON verdicts.
    Verify {
        #[arg(value_enum)]
        suite: Suite,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, hide = true)]
        corrupt_denoiser: bool,
    },
    /// Evaluate the denoiser on a batch of query points.
    Denoise {
        #[command(flatten)]
        run: RunArgs,
        /// CSV of query points with columns x0..x{d-1}.
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        sigma: f64,
    },
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(value_enum)]
    pub kind: DatasetKind,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Number of circle points.
    #[arg(long, default_value_t = 2048)]
    pub n: usize,
    #[arg(long, default_value_t = 1.0)]
    pub radius: f64,
    /// Source CSV for `custom-file`.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

/// Flags shared by the run commands; each overrides the matching config key.
#[derive(Debug, Default, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Measure CSV (columns `[w,]x0..`); replaces the configured generator.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub dataset: Option<DatasetKind>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// Seed of the start points.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub starts: Option<usize>,
    #[arg(long)]
    pub sigma_max: Option<f64>,
    #[arg(long)]
    pub sigma_min: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub substeps: Option<usize>,
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long, overrides_with = "no_snap")]
    pub snap: bool,
    #[arg(long, overrides_with = "snap")]
    pub no_snap: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(k) = self.dataset {
            cfg.dataset.kind = k;
        }
        if let Some(p) = &self.data {
            cfg.dataset.kind = DatasetKind::CustomFile;
            cfg.dataset.file = Some(p.clone());
        }
        if let Some(s) = self.data_seed {
            cfg.dataset.seed = s;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = self.starts {
            cfg.starts = n;
        }
        let g = &mut cfg.grid;
        if let Some(v) = self.sigma_max {
            g.sigma_max = v;
        }
        if let Some(v) = self.sigma_min {
            g.sigma_min = v;
        }
        if let Some(v) = self.rho {
            g.rho = v;
        }
        if let Some(v) = self.steps {
            g.steps = v;
        }
        if let Some(v) = self.substeps {
            g.substeps = v;
        }
        if let Some(v) = self.method {
            g.method = v;
        }
        if self.snap {
            g.snap = true;
        }
        if self.no_snap {
            g.snap = false;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs one command. `Ok(false)` means a check failed.
pub fn run(cli: Cli) -> Result<bool, CliError> {
    match cli.command {
        Command::GenData(args) => gen_data(&args).map(|_| true),
        Command::Trajectory { run, svg } => trajectory(&run.resolve()?, svg).map(|_| true),
        Command::Stages {
            run,
            zeta,
            cluster_eps,
            terminal_eps,
        } => {
            let params = StageParams {
                zeta,
                delta: 0.0,
                cluster_epsilon: cluster_eps,
                terminal_epsilon: terminal_eps,
            };
            stages(&run.resolve()?, params).map(|_| true)
        }
        Command::Verify {
            suite,
            run,
            corrupt_denoiser,
        } => verify(&run.resolve()?, suite, corrupt_denoiser),
        Command::Denoise { run, points, sigma } => denoise_batch(&run.resolve()?, &points, sigma).map(|_| true),
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let path = dir.join(name);
    let f = File::create(&path).map_err(|e| CliError::io(&path, e))?;
    Ok(BufWriter::new(f))
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<(), CliError> {
    let mut w = create(dir, name)?;
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(&dir.join(name), e))
}

fn write_measure(dir: &Path, m: &DiscreteMeasure, source: serde_json::Value) -> Result<(), CliError> {
    let mut w = create(dir, "data.csv")?;
    m.write_csv(&mut w)?;
    w.flush().map_err(|e| CliError::io(&dir.join("data.csv"), e))?;
    let s = m.summary();
    let doc = json!({
        "source": source,
        "prng": PRNG_NAME,
        "n": s.n,
        "d": s.d,
        "mean": s.mean,
        "diam": s.diam,
        "second_moment": s.second_moment,
        "digest": m.digest(),
    });
    write_text(dir, "summary.json", &(serde_json::to_string_pretty(&doc)? + "\n"))
}

pub fn gen_data(args: &GenDataArgs) -> Result<DiscreteMeasure, CliError> {
    if args.kind == DatasetKind::CustomFile && args.input.is_none() {
        return Err(CliError::Usage("custom-file needs --input FILE".into()));
    }
    let spec = DatasetSpec {
        kind: args.kind,
        seed: args.seed,
        n: args.n,
        radius: args.radius,
        file: args.input.clone(),
    };
    let m = spec.build()?;
    write_measure(&args.out, &m, serde_json::to_value(&spec)?)?;
    Ok(m)
}

/// Start points `σ_max · Z` drawn in order from the start seed.
pub fn prior_starts(cfg: &RunConfig, d: usize) -> Vec<Vec<f64>> {
    let mut rng = seeded_rng(cfg.seed);
    (0..cfg.starts)
        .map(|_| {
            (0..d)
                .map(|_| cfg.grid.sigma_max * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

fn run_trajectories(cfg: &RunConfig, m: &DiscreteMeasure) -> Result<Vec<Trajectory>, CliError> {
    let grid = cfg.grid.grid()?;
    let starts = prior_starts(cfg, m.dim());
    let mut trajs = integrate_many(m, &starts, &grid, cfg.grid.options())?;
    let id = m.digest();
    for t in &mut trajs {
        t.meta.measure_id = Some(id.clone());
        t.meta.seed = Some(cfg.seed);
    }
    Ok(trajs)
}

fn indexed(stem: &str, ext: &str, k: usize, total: usize) -> String {
    if total == 1 {
        format!("{stem}.{ext}")
    } else {
        format!("{stem}_{k:03}.{ext}")
    }
}

fn write_run_record(cfg: &RunConfig, m: &DiscreteMeasure) -> Result<(), CliError> {
    let doc = json!({
        "config": cfg,
        "measure_digest": m.digest(),
        "prng": PRNG_NAME,
    });
    write_text(&cfg.out, "run.json", &(serde_json::to_string_pretty(&doc)? + "\n"))
}

pub fn trajectory(cfg: &RunConfig, svg: bool) -> Result<Vec<Trajectory>, CliError> {
    cfg.schedule.build()?;
    let m = cfg.dataset.build()?;
    let trajs = run_trajectories(cfg, &m)?;
    for (k, t) in trajs.iter().enumerate() {
        let name = indexed("trajectory", "csv", k, trajs.len());
        let mut w = create(&cfg.out, &name)?;
        t.write_csv(&mut w)?;
        w.flush().map_err(|e| CliError::io(&cfg.out.join(&name), e))?;
    }
    if svg {
        if m.dim() == 2 {
            let paths: Vec<Vec<Vec<f64>>> = trajs
                .iter()
                .map(|t| {
                    let mut p = t.states.clone();
                    p.push(t.terminal_state.clone());
                    p
                })
                .collect();
            write_text(&cfg.out, "trajectory.svg", &svg::render(&m.to_points(), &paths))?;
        } else {
            eprintln!("warning: --svg needs 2D data (d = {}); plot skipped", m.dim());
        }
    }
    write_run_record(cfg, &m)?;
    Ok(trajs)
}

pub fn stages(cfg: &RunConfig, params: StageParams) -> Result<(), CliError> {
    let m = cfg.dataset.build()?;
    let clusters = if cfg.dataset.kind == DatasetKind::ThreeClusters {
        three_cluster_specs(&m)?
    } else {
        Vec::new()
    };
    let trajs = run_trajectories(cfg, &m)?;
    for (k, t) in trajs.iter().enumerate() {
        let report = stage_report(t, &m, &clusters, params)?;
        write_text(
            &cfg.out,
            &indexed("stages", "json", k, trajs.len()),
            &(report.to_json()? + "\n"),
        )?;
    }
    write_run_record(cfg, &m)
}

pub fn verify(cfg: &RunConfig, suite: Suite, corrupt: bool) -> Result<bool, CliError> {
    let verdicts = run_suite(suite, cfg, corrupt)?;
    for v in &verdicts {
        println!(
            "{} {} statistic={:e} bound={:e}",
            if v.holds { "PASS" } else { "FAIL" },
            v.name,
            v.statistic,
            v.bound
        );
    }
    write_text(&cfg.out, "verdicts.json", &(serde_json::to_string_pretty(&verdicts)? + "\n"))?;
    let failed: Vec<&str> = verdicts.iter().filter(|v| !v.holds).map(|v| v.name.as_str()).collect();
    if !failed.is_empty() {
        eprintln!("failing checks: {}", failed.join(", "));
    }
    Ok(failed.is_empty())
}

pub fn denoise_batch(cfg: &RunConfig, points: &Path, sigma: f64) -> Result<(), CliError> {
    let m = cfg.dataset.build()?;
    let file = File::open(points).map_err(|e| CliError::io(points, e))?;
    let (queries, _) = read_point_csv(file)?;
    let d = m.dim();
    let mut rows = Vec::with_capacity(queries.len() + 1);
    let mut header: Vec<String> = (0..d).map(|k| format!("x{k}")).collect();
    header.extend((0..d).map(|k| format!("m{k}")));
    header.push("entropy".into());
    rows.push(header.join(","));
    for q in &queries {
        let e = denoise(&m, sigma, q)?;
        let cells: Vec<String> = q
            .iter()
            .chain(&e.m)
            .map(f64::to_string)
            .chain(std::iter::once(e.entropy().to_string()))
            .collect();
        rows.push(cells.join(","));
    }
    write_text(&cfg.out, "denoised.csv", &(rows.join("\n") + "\n"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str], out: &Path) -> Result<bool, CliError> {
        let mut argv = vec!["flowtraj"];
        argv.extend_from_slice(args);
        argv.extend_from_slice(&["--out", out.to_str().unwrap()]);
        run(Cli::try_parse_from(argv).map_err(|e| CliError::Usage(e.to_string()))?)
    }

    fn lines(path: &Path) -> Vec<String> {
        std::fs::read_to_string(path)
            .unwrap()
            .lines()
            .map(str::to_owned)
            .collect()
    }

    #[test]
    fn gen_data_writes_expected_rows() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("tc");
        assert!(run_args(&["gen-data", "three-clusters"], &out).unwrap());
        assert_eq!(lines(&out.join("data.csv")).len(), 145);
        let summary: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
        assert_eq!(summary["n"], 144);
        assert_eq!(summary["prng"], PRNG_NAME);

        let out = tmp.path().join("tp");
        assert!(run_args(&["gen-data", "two-point"], &out).unwrap());
        assert_eq!(lines(&out.join("data.csv")), ["w,x0", "0.5,-1", "0.5,1"]);
    }

    #[test]
    fn gen_data_custom_file_round_trips() {
        let tmp = tempfile::tempdir().unwrap();
        let src = tmp.path().join("pts.csv");
        std::fs::write(&src, "x0,x1\n0,0\n1,2\n").unwrap();
        let out = tmp.path().join("c");
        let input = src.to_str().unwrap();
        assert!(run_args(&["gen-data", "custom-file", "--input", input], &out).unwrap());
        assert_eq!(lines(&out.join("data.csv")), ["w,x0,x1", "0.5,0,0", "0.5,1,2"]);
        assert!(matches!(
            run_args(&["gen-data", "custom-file"], &tmp.path().join("none")),
            Err(CliError::Usage(_))
        ));
    }

    #[test]
    fn trajectory_files_and_terminal_row() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("one");
        assert!(run_args(&["trajectory", "--svg"], &out).unwrap());
        let rows = lines(&out.join("trajectory.csv"));
        assert_eq!(rows[0], "step,sigma,lambda,x0,x1");
        assert_eq!(rows.len(), 1 + 19 + 1);
        assert!(rows.last().unwrap().starts_with("-1,0,inf,"));
        assert!(out.join("trajectory.svg").exists());
        assert!(out.join("run.json").exists());

        let out = tmp.path().join("many");
        assert!(run_args(&["trajectory", "--starts", "3", "--no-snap", "--steps", "5"], &out).unwrap());
        for k in 0..3 {
            let rows = lines(&out.join(format!("trajectory_{k:03}.csv")));
            assert_eq!(rows.len(), 1 + 6 + 1);
            assert!(rows.last().unwrap().starts_with("-1,0.002,"));
        }
    }

    #[test]
    fn flags_override_config_file() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tmp.path().join("run.json");
        std::fs::write(&cfg, r#"{"seed": 3, "starts": 2, "grid": {"steps": 4, "method": "euler"}}"#).unwrap();
        let args = RunArgs {
            config: Some(cfg),
            starts: Some(5),
            method: Some(Method::Heun),
            ..RunArgs::default()
        };
        let resolved = args.resolve().unwrap();
        assert_eq!(resolved.seed, 3);
        assert_eq!(resolved.starts, 5);
        assert_eq!(resolved.grid.steps, 4);
        assert_eq!(resolved.grid.method, Method::Heun);
    }

    #[test]
    fn starts_are_seeded_and_prefix_stable() {
        let mut cfg = RunConfig {
            starts: 4,
            ..RunConfig::default()
        };
        let four = prior_starts(&cfg, 2);
        cfg.starts = 2;
        assert_eq!(prior_starts(&cfg, 2), four[..2]);
        cfg.seed = 1;
        assert_ne!(prior_starts(&cfg, 2), four[..2]);
    }

    #[test]
    fn stages_report_has_markers() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("st");
        assert!(run_args(&["stages"], &out).unwrap());
        let doc: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("stages.json")).unwrap()).unwrap();
        assert_eq!(doc["thresholds"]["clusters"].as_array().unwrap().len(), 3);
        assert_eq!(doc["per_node"].as_array().unwrap().len(), 19);
    }

    #[test]
    fn verify_passes_and_corruption_is_caught() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(run_args(&["verify", "denoiser"], &tmp.path().join("ok")).unwrap());
        let bad = tmp.path().join("bad");
        assert!(!run_args(&["verify", "denoiser", "--corrupt-denoiser"], &bad).unwrap());
        let verdicts: Vec<serde_json::Value> =
            serde_json::from_str(&std::fs::read_to_string(bad.join("verdicts.json")).unwrap()).unwrap();
        assert!(verdicts.iter().any(|v| v["holds"] == false));
    }

    #[test]
    fn denoise_batch_matches_closed_form() {
        let tmp = tempfile::tempdir().unwrap();
        let q = tmp.path().join("q.csv");
        std::fs::write(&q, "x0\n0.5\n-2\n").unwrap();
        let out = tmp.path().join("dn");
        let qs = q.to_str().unwrap();
        assert!(run_args(&["denoise", "--dataset", "two-point", "--points", qs, "--sigma", "1"], &out).unwrap());
        let rows = lines(&out.join("denoised.csv"));
        assert_eq!(rows[0], "x0,m0,entropy");
        let m: f64 = rows[1].split(',').nth(1).unwrap().parse().unwrap();
        assert!((m - 0.5f64.tanh()).abs() < 1e-15);
        // query dimension must match the data
        let res = run_args(&["denoise", "--points", qs, "--sigma", "1"], &tmp.path().join("bad"));
        assert!(matches!(res, Err(CliError::Core(_))));
    }

    #[test]
    fn bad_inputs_are_usage_errors() {
        let tmp = tempfile::tempdir().unwrap();
        let o = tmp.path();
        assert!(run_args(&["trajectory", "--data", "/no/such.csv"], o).is_err());
        assert!(run_args(&["trajectory", "--steps", "0"], o).is_err());
        assert!(run_args(&["trajectory", "--method", "midpoint"], o).is_err());
        assert!(run_args(&["trajectory", "--sigma-min", "100"], o).is_err());
    }
}
