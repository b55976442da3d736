//! Batch front end: configuration, CSV input and output, subcommands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::data::{median, Dataset, Matrix};
use crate::error::{Error, Result};
use crate::inference::confidence_band;
use crate::pipeline::{
    fit_conditional_density, marginal_density, variable_importance, BetaMethod, FitConfig, Mode,
};
use crate::quadrature::step_grid;
use crate::simlab::{run_monte_carlo, simulate, DgpKind, DgpSpec};
use crate::tuning::select_tuning;

#[derive(Debug, Parser)]
#[command(name = "rcdensity", version, about = "Conditional random-coefficient density estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    Simulate,
    Fit,
    Band,
    Cv,
    Importance,
    Marginal,
}

impl CommandKind {
    pub fn name(self) -> &'static str {
        match self {
            CommandKind::Simulate => "simulate",
            CommandKind::Fit => "fit",
            CommandKind::Band => "band",
            CommandKind::Cv => "cv",
            CommandKind::Importance => "importance",
            CommandKind::Marginal => "marginal",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a sample from a simulation design, or run a Monte Carlo study with `--reps`.
    Simulate(Options),
    /// Fit the conditional density at the test point.
    Fit(Options),
    /// Pointwise confidence band for the slope density.
    Band(Options),
    /// Cross-validated choice of K2 and sigma_t.
    Cv(Options),
    /// Variable importance for shape and mean.
    Importance(Options),
    /// Marginal slope density.
    Marginal(Options),
}

impl Command {
    pub fn kind(&self) -> CommandKind {
        match self {
            Command::Simulate(_) => CommandKind::Simulate,
            Command::Fit(_) => CommandKind::Fit,
            Command::Band(_) => CommandKind::Band,
            Command::Cv(_) => CommandKind::Cv,
            Command::Importance(_) => CommandKind::Importance,
            Command::Marginal(_) => CommandKind::Marginal,
        }
    }

    pub fn options(&self) -> &Options {
        match self {
            Command::Simulate(o)
            | Command::Fit(o)
            | Command::Band(o)
            | Command::Cv(o)
            | Command::Importance(o)
            | Command::Marginal(o) => o,
        }
    }
}

/// Flags shared by every subcommand. Each flag overrides the key of the
/// same name in the `--config` file.
#[derive(Debug, Default, Clone, Args)]
pub struct Options {
    /// `key = value` file; command-line flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub output: Option<String>,
    #[arg(long)]
    pub k1: Option<String>,
    #[arg(long)]
    pub k2: Option<String>,
    #[arg(long)]
    pub sigma_t: Option<String>,
    /// Number of cross-fit splits M.
    #[arg(long)]
    pub splits: Option<String>,
    /// `plain` or `orthogonal_w`.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub n_trees: Option<String>,
    #[arg(long)]
    pub min_leaf: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub alpha: Option<String>,
    /// `median` or a comma-separated vector.
    #[arg(long)]
    pub test_point: Option<String>,
    /// `start:end:step`.
    #[arg(long)]
    pub b0_grid: Option<String>,
    /// `start:end:step`.
    #[arg(long)]
    pub b1_grid: Option<String>,
    /// `dgp1` or `dgp2`.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub n: Option<String>,
    #[arg(long)]
    pub p: Option<String>,
    #[arg(long)]
    pub reps: Option<String>,
    /// Comma-separated K2 values for `cv`.
    #[arg(long)]
    pub k2_values: Option<String>,
    /// Comma-separated sigma_t values for `cv`.
    #[arg(long)]
    pub sigma_t_values: Option<String>,
    /// `causal` or `moments`.
    #[arg(long)]
    pub beta_method: Option<String>,
    #[arg(long)]
    pub clip: Option<String>,
    #[arg(long)]
    pub holdout_w: Option<String>,
    #[arg(long)]
    pub ridge: Option<String>,
    #[arg(long)]
    pub measure_nodes: Option<String>,
    #[arg(long)]
    pub threads: Option<String>,
}

impl Options {
    fn pairs(&self) -> Vec<(&'static str, &String)> {
        let fields = [
            ("input", &self.input),
            ("output", &self.output),
            ("k1", &self.k1),
            ("k2", &self.k2),
            ("sigma_t", &self.sigma_t),
            ("splits", &self.splits),
            ("mode", &self.mode),
            ("n_trees", &self.n_trees),
            ("min_leaf", &self.min_leaf),
            ("seed", &self.seed),
            ("alpha", &self.alpha),
            ("test_point", &self.test_point),
            ("b0_grid", &self.b0_grid),
            ("b1_grid", &self.b1_grid),
            ("kind", &self.kind),
            ("n", &self.n),
            ("p", &self.p),
            ("reps", &self.reps),
            ("k2_values", &self.k2_values),
            ("sigma_t_values", &self.sigma_t_values),
            ("beta_method", &self.beta_method),
            ("clip", &self.clip),
            ("holdout_w", &self.holdout_w),
            ("ridge", &self.ridge),
            ("measure_nodes", &self.measure_nodes),
            ("threads", &self.threads),
        ];
        fields.into_iter().filter_map(|(k, v)| v.as_ref().map(|v| (k, v))).collect()
    }
}

const KEYS: &[&str] = &[
    "input",
    "output",
    "k1",
    "k2",
    "sigma_t",
    "splits",
    "mode",
    "n_trees",
    "min_leaf",
    "seed",
    "alpha",
    "test_point",
    "b0_grid",
    "b1_grid",
    "kind",
    "n",
    "p",
    "reps",
    "k2_values",
    "sigma_t_values",
    "beta_method",
    "clip",
    "holdout_w",
    "ridge",
    "measure_nodes",
    "threads",
];

fn canonical_key(raw: &str) -> Option<&'static str> {
    let key = raw.trim().to_ascii_lowercase().replace('-', "_");
    let key = if key == "m" { "splits".to_string() } else { key };
    KEYS.iter().copied().find(|k| *k == key)
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<&'static str, String>> {
    let mut out = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", no + 1)))?;
        let key = canonical_key(k)
            .ok_or_else(|| Error::config(format!("line {}: unknown key `{}`", no + 1, k.trim())))?;
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum TestPoint {
    Median,
    Explicit(Vec<f64>),
}

/// Grid `start:end:step`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub start: f64,
    pub end: f64,
    pub step: f64,
}

impl GridSpec {
    pub fn values(&self) -> Vec<f64> {
        step_grid(self.start, self.end, self.step)
    }
}

impl std::fmt::Display for GridSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}:{}", self.start, self.end, self.step)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: CommandKind,
    pub input: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub k1: usize,
    pub k2: usize,
    pub sigma_t: f64,
    pub splits: usize,
    pub mode: Mode,
    pub n_trees: usize,
    pub min_leaf: usize,
    pub seed: u64,
    pub alpha: f64,
    pub test_point: TestPoint,
    pub b0_grid: GridSpec,
    pub b1_grid: GridSpec,
    pub kind: Option<DgpKind>,
    pub n: Option<usize>,
    pub p: usize,
    pub reps: Option<usize>,
    pub k2_values: Vec<usize>,
    pub sigma_t_values: Vec<f64>,
    pub beta_method: BetaMethod,
    pub clip: bool,
    pub holdout_w: bool,
    pub ridge: f64,
    pub measure_nodes: usize,
    pub threads: Option<usize>,
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::config(format!("key `{key}`: cannot parse `{v}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse_value(key, s)).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::config(format!("key `{key}`: expected a boolean, got `{v}`"))),
    }
}

fn parse_grid(key: &str, v: &str) -> Result<GridSpec> {
    let parts: Vec<f64> = v.split(':').map(|s| parse_value(key, s)).collect::<Result<_>>()?;
    match parts[..] {
        [start, end, step] if start < end && step > 0.0 && ((end - start) / step) < 1e6 => {
            Ok(GridSpec { start, end, step })
        }
        _ => Err(Error::config(format!("key `{key}`: expected `start:end:step`, got `{v}`"))),
    }
}

impl RunConfig {
    /// Builds a configuration from file values overridden by `overrides`.
    pub fn from_maps(
        command: CommandKind,
        file: &BTreeMap<&'static str, String>,
        overrides: &BTreeMap<&'static str, String>,
    ) -> Result<Self> {
        let mut m = file.clone();
        m.extend(overrides.iter().map(|(k, v)| (*k, v.clone())));
        let get = |k: &str| m.get(k).map(String::as_str);

        let mut cfg = RunConfig {
            command,
            input: get("input").map(PathBuf::from),
            output_dir: PathBuf::from(get("output").unwrap_or(".")),
            k1: 3,
            k2: 3,
            sigma_t: 1.0,
            splits: 1,
            mode: Mode::Plain,
            n_trees: 2000,
            min_leaf: 5,
            seed: 0,
            alpha: 0.05,
            test_point: TestPoint::Median,
            b0_grid: GridSpec {
                start: -6.0,
                end: 6.0,
                step: 0.1,
            },
            b1_grid: GridSpec {
                start: -8.0,
                end: 8.0,
                step: 0.05,
            },
            kind: None,
            n: None,
            p: 10,
            reps: None,
            k2_values: vec![3, 5, 7],
            sigma_t_values: vec![1.0],
            beta_method: BetaMethod::CausalForest,
            clip: false,
            holdout_w: false,
            ridge: 0.0,
            measure_nodes: FitConfig::default().measure_nodes,
            threads: None,
        };
        for (&k, v) in &m {
            match k {
                "input" | "output" => {}
                "k1" => cfg.k1 = parse_value(k, v)?,
                "k2" => cfg.k2 = parse_value(k, v)?,
                "sigma_t" => cfg.sigma_t = parse_value(k, v)?,
                "splits" => cfg.splits = parse_value(k, v)?,
                "mode" => {
                    cfg.mode = match v.as_str() {
                        "plain" => Mode::Plain,
                        "orthogonal_w" => Mode::OrthogonalW,
                        _ => return Err(Error::config(format!("key `mode`: unknown mode `{v}`"))),
                    }
                }
                "n_trees" => cfg.n_trees = parse_value(k, v)?,
                "min_leaf" => cfg.min_leaf = parse_value(k, v)?,
                "seed" => cfg.seed = parse_value(k, v)?,
                "alpha" => cfg.alpha = parse_value(k, v)?,
                "test_point" => {
                    cfg.test_point = if v.trim() == "median" {
                        TestPoint::Median
                    } else {
                        TestPoint::Explicit(parse_list(k, v)?)
                    }
                }
                "b0_grid" => cfg.b0_grid = parse_grid(k, v)?,
                "b1_grid" => cfg.b1_grid = parse_grid(k, v)?,
                "kind" => {
                    cfg.kind = Some(match v.as_str() {
                        "dgp1" => DgpKind::Dgp1,
                        "dgp2" => DgpKind::Dgp2,
                        _ => return Err(Error::config(format!("key `kind`: unknown design `{v}`"))),
                    })
                }
                "n" => cfg.n = Some(parse_value(k, v)?),
                "p" => cfg.p = parse_value(k, v)?,
                "reps" => cfg.reps = Some(parse_value(k, v)?),
                "k2_values" => cfg.k2_values = parse_list(k, v)?,
                "sigma_t_values" => cfg.sigma_t_values = parse_list(k, v)?,
                "beta_method" => {
                    cfg.beta_method = match v.as_str() {
                        "causal" => BetaMethod::CausalForest,
                        "moments" => BetaMethod::MomentRatio,
                        _ => return Err(Error::config(format!("key `beta_method`: unknown method `{v}`"))),
                    }
                }
                "clip" => cfg.clip = parse_bool(k, v)?,
                "holdout_w" => cfg.holdout_w = parse_bool(k, v)?,
                "ridge" => cfg.ridge = parse_value(k, v)?,
                "measure_nodes" => cfg.measure_nodes = parse_value(k, v)?,
                "threads" => cfg.threads = Some(parse_value(k, v)?),
                _ => unreachable!("keys are canonical"),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let missing = |key: &str| Err(Error::config(format!("missing required key `{key}`")));
        match self.command {
            CommandKind::Simulate => {
                if self.kind.is_none() {
                    return missing("kind");
                }
                if self.n.is_none() {
                    return missing("n");
                }
            }
            _ => {
                if self.input.is_none() {
                    return missing("input");
                }
            }
        }
        if self.k1 == 0 || self.k2 == 0 || self.k2_values.contains(&0) {
            return Err(Error::config("K1 and K2 must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 0.5) {
            return Err(Error::config(format!("alpha must lie in (0, 0.5], got {}", self.alpha)));
        }
        if !(self.sigma_t > 0.0) || self.sigma_t_values.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::config("sigma_t must be positive"));
        }
        if self.threads == Some(0) {
            return Err(Error::config("threads must be positive"));
        }
        Ok(())
    }

    pub fn fit_config(&self) -> FitConfig {
        let mut f = FitConfig {
            k1: self.k1,
            k2: self.k2,
            sigma_t: self.sigma_t,
            measure_nodes: self.measure_nodes,
            splits: self.splits,
            mode: self.mode,
            holdout_w: self.holdout_w,
            ridge: self.ridge,
            clip_renormalize: self.clip,
            beta_method: self.beta_method,
            seed: self.seed,
            ..FitConfig::default()
        };
        f.regressor.forest.n_trees = self.n_trees;
        f.regressor.forest.min_leaf = self.min_leaf;
        f
    }

    fn echo(&self) -> String {
        let mut s = String::new();
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        let list = |v: Vec<String>| v.join(",");
        let _ = writeln!(s, "command = {}", self.command.name());
        let _ = writeln!(s, "input = {}", opt(self.input.as_ref().map(|p| p.display().to_string())));
        let _ = writeln!(s, "k1 = {}", self.k1);
        let _ = writeln!(s, "k2 = {}", self.k2);
        let _ = writeln!(s, "sigma_t = {}", self.sigma_t);
        let _ = writeln!(s, "splits = {}", self.splits);
        let _ = writeln!(
            s,
            "mode = {}",
            match self.mode {
                Mode::Plain => "plain",
                Mode::OrthogonalW => "orthogonal_w",
            }
        );
        let _ = writeln!(s, "n_trees = {}", self.n_trees);
        let _ = writeln!(s, "min_leaf = {}", self.min_leaf);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "alpha = {}", self.alpha);
        let tp = match &self.test_point {
            TestPoint::Median => "median".to_string(),
            TestPoint::Explicit(v) => list(v.iter().map(f64::to_string).collect()),
        };
        let _ = writeln!(s, "test_point = {tp}");
        let _ = writeln!(s, "b0_grid = {}", self.b0_grid);
        let _ = writeln!(s, "b1_grid = {}", self.b1_grid);
        let kind = self.kind.map(|k| match k {
            DgpKind::Dgp1 => "dgp1".to_string(),
            DgpKind::Dgp2 => "dgp2".to_string(),
        });
        let _ = writeln!(s, "kind = {}", opt(kind));
        let _ = writeln!(s, "n = {}", opt(self.n.map(|v| v.to_string())));
        let _ = writeln!(s, "p = {}", self.p);
        let _ = writeln!(s, "reps = {}", opt(self.reps.map(|v| v.to_string())));
        let _ = writeln!(s, "k2_values = {}", list(self.k2_values.iter().map(usize::to_string).collect()));
        let _ = writeln!(
            s,
            "sigma_t_values = {}",
            list(self.sigma_t_values.iter().map(f64::to_string).collect())
        );
        let _ = writeln!(
            s,
            "beta_method = {}",
            match self.beta_method {
                BetaMethod::CausalForest => "causal",
                BetaMethod::MomentRatio => "moments",
            }
        );
        let _ = writeln!(s, "clip = {}", self.clip);
        let _ = writeln!(s, "holdout_w = {}", self.holdout_w);
        let _ = writeln!(s, "ridge = {}", self.ridge);
        let _ = writeln!(s, "measure_nodes = {}", self.measure_nodes);
        s
    }
}

/// Merges the config file named in `opts` with the command-line flags.
pub fn parse_config(command: CommandKind, opts: &Options) -> Result<RunConfig> {
    let file = match &opts.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::config(format!("cannot read config file {}: {e}", path.display())))?;
            parse_config_text(&text)?
        }
        None => BTreeMap::new(),
    };
    let overrides = opts.pairs().into_iter().map(|(k, v)| (k, v.clone())).collect();
    RunConfig::from_maps(command, &file, &overrides)
}

/// Reads a header-keyed CSV with columns `Y`, `W` and `X1..Xd`.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::data(format!("cannot read header: {e}")))?
        .clone();
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let y_col = find("Y").ok_or_else(|| Error::data("missing column `Y`"))?;
    let w_col = find("W").ok_or_else(|| Error::data("missing column `W`"))?;
    let d = headers
        .iter()
        .filter(|h| h.trim().strip_prefix('X').is_some_and(|r| r.parse::<usize>().is_ok()))
        .count();
    let x_cols = (1..=d)
        .map(|j| find(&format!("X{j}")).ok_or_else(|| Error::data(format!("missing column `X{j}`"))))
        .collect::<Result<Vec<_>>>()?;

    let (mut y, mut w, mut x) = (Vec::new(), Vec::new(), Vec::new());
    for (r, record) in reader.records().enumerate() {
        let row = r + 2;
        let record = record.map_err(|e| Error::data(format!("row {row}: {e}")))?;
        let cell = |c: usize| -> Result<f64> {
            let raw = record.get(c).unwrap_or("");
            raw.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::data(format!("row {row}, column `{}`: `{raw}` is not a number", &headers[c])))
        };
        y.push(cell(y_col)?);
        w.push(cell(w_col)?);
        for &c in &x_cols {
            x.push(cell(c)?);
        }
    }
    let n = y.len();
    Dataset::new(y, w, Matrix::new(n, d, x)?)
}

/// CSV text with a `Y,W,X1..Xd` header.
pub fn dataset_csv(data: &Dataset) -> String {
    let mut s = String::from("Y,W");
    for j in 1..=data.d() {
        let _ = write!(s, ",X{j}");
    }
    s.push('\n');
    for i in 0..data.n() {
        let _ = write!(s, "{},{}", data.y[i], data.w[i]);
        for v in data.x.row(i) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

fn resolve_point(cfg: &RunConfig, data: &Dataset) -> Result<Vec<f64>> {
    match &cfg.test_point {
        TestPoint::Median => Ok(data.x_medians()),
        TestPoint::Explicit(v) if v.len() == data.d() => Ok(v.clone()),
        TestPoint::Explicit(v) => Err(Error::config(format!(
            "test point has {} coordinates but the data have {} controls",
            v.len(),
            data.d()
        ))),
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

fn series_csv(header: &str, columns: &[&[f64]]) -> String {
    let mut s = format!("{header}\n");
    for i in 0..columns[0].len() {
        let row: Vec<String> = columns.iter().map(|c| c[i].to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// Files produced by one command, written only once everything succeeded.
pub type Artifacts = Vec<(String, String)>;

/// Executes a command and returns the files it produces.
pub fn run_command(cfg: &RunConfig) -> Result<Artifacts> {
    let mut meta = cfg.echo();
    let mut files = Vec::new();
    let load = || load_csv(cfg.input.as_deref().expect("validated"));
    match cfg.command {
        CommandKind::Simulate => {
            let spec = DgpSpec {
                kind: cfg.kind.expect("validated"),
                n: cfg.n.expect("validated"),
                p: cfg.p,
                seed: cfg.seed,
            };
            match cfg.reps {
                None => files.push(("data.csv".into(), dataset_csv(&simulate(&spec)?.data))),
                Some(reps) => {
                    let report = run_monte_carlo(&spec, &cfg.fit_config(), reps)?;
                    let mut ise = report.ise.clone();
                    let ise_median = median(&mut ise);
                    let _ = writeln!(meta, "failures = {}", report.failures);
                    let _ = writeln!(meta, "ise_median = {ise_median}");
                    let _ = writeln!(meta, "ise = {}", join(&report.ise));
                    files.push((
                        "mc_report.csv".into(),
                        series_csv(
                            "b1,truth,median,q05,q95",
                            &[
                                &report.b1_grid,
                                &report.true_density,
                                &report.median_curve,
                                &report.q05_curve,
                                &report.q95_curve,
                            ],
                        ),
                    ));
                }
            }
        }
        CommandKind::Fit => {
            let data = load()?;
            let x = resolve_point(cfg, &data)?;
            let mut fc = cfg.fit_config();
            fc.test_points = vec![x.clone()];
            let model = fit_conditional_density(&data, &fc)?;
            let b0 = cfg.b0_grid.values();
            let b1 = cfg.b1_grid.values();
            let joint = model.evaluate_density(&x, &b0, &b1)?;
            let slope = model.slope_density(&x, &b1)?;
            let mut s = String::from("b0,b1,density\n");
            for (i, a) in b0.iter().enumerate() {
                for (j, b) in b1.iter().enumerate() {
                    let _ = writeln!(s, "{a},{b},{}", joint.values[i][j]);
                }
            }
            files.push(("density.csv".into(), s));
            files.push(("slope_density.csv".into(), series_csv("b1,density", &[&b1, &slope.values])));
            let _ = writeln!(meta, "resolved_test_point = {}", join(&x));
            let _ = writeln!(meta, "min_eig = {}", model.min_eig());
            let _ = writeln!(meta, "imag_ratio = {}", joint.imag_ratio);
            let _ = writeln!(meta, "slope_imag_ratio = {}", slope.imag_ratio);
        }
        CommandKind::Band => {
            let data = load()?;
            let x = resolve_point(cfg, &data)?;
            let mut fc = cfg.fit_config();
            fc.test_points = vec![x.clone()];
            fc.inference = true;
            let model = fit_conditional_density(&data, &fc)?;
            let b1 = cfg.b1_grid.values();
            let band = confidence_band(&model, &x, &b1, cfg.alpha)?;
            files.push((
                "band.csv".into(),
                series_csv("b1,point,lower,upper", &[&band.b1_grid, &band.point, &band.lower, &band.upper]),
            ));
            let _ = writeln!(meta, "resolved_test_point = {}", join(&x));
            let _ = writeln!(meta, "min_eig = {}", model.min_eig());
            let _ = writeln!(meta, "splits_used = {}", band.m_used);
        }
        CommandKind::Cv => {
            let data = load()?;
            let x = resolve_point(cfg, &data)?;
            let grid = select_tuning(&data, &cfg.fit_config(), &cfg.k2_values, &cfg.sigma_t_values, &x)?;
            let mut s = String::from("row,K2,sigma_t,criterion\n");
            for (i, k) in grid.k2_values.iter().enumerate() {
                for (j, t) in grid.sigma_t_values.iter().enumerate() {
                    let _ = writeln!(s, "cell,{k},{t},{}", grid.criterion[i][j]);
                }
            }
            let _ = writeln!(s, "selected,{},{},{}", grid.selected.0, grid.selected.1, grid.selected_value());
            files.push(("cv_table.csv".into(), s));
            let _ = writeln!(meta, "resolved_test_point = {}", join(&x));
        }
        CommandKind::Importance => {
            let data = load()?;
            let model = fit_conditional_density(&data, &cfg.fit_config())?;
            let vi = variable_importance(&model)?;
            let mut s = String::from("feature,VI_shape,VI_mean\n");
            for j in 0..data.d() {
                let _ = writeln!(s, "X{},{},{}", j + 1, vi.shape[j], vi.mean[j]);
            }
            files.push(("importance.csv".into(), s));
            let _ = writeln!(meta, "min_eig = {}", model.min_eig());
        }
        CommandKind::Marginal => {
            let data = load()?;
            let b1 = cfg.b1_grid.values();
            let f = marginal_density(&data, &cfg.fit_config(), &b1)?;
            files.push(("marginal.csv".into(), series_csv("b1,density", &[&b1, &f])));
        }
    }
    files.push(("metadata.txt".into(), meta));
    Ok(files)
}

/// Writes all artifacts into `dir`, removing them again if any write fails.
pub fn write_artifacts(dir: &Path, files: &Artifacts) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| Error::config(format!("cannot create output directory {}: {e}", dir.display())))?;
    let mut written = Vec::new();
    for (name, contents) in files {
        let path = dir.join(name);
        if let Err(e) = fs::write(&path, contents) {
            for p in &written {
                let _ = fs::remove_file(p);
            }
            return Err(Error::data(format!("cannot write {}: {e}", path.display())));
        }
        written.push(path);
    }
    Ok(())
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Domain(_) | Error::Unsupported(_) => 2,
        Error::Data(_) => 3,
        Error::Numeric(_) => 4,
    }
}

fn execute(cfg: &RunConfig) -> Result<()> {
    let files = match cfg.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::config(format!("cannot build thread pool: {e}")))?
            .install(|| run_command(cfg))?,
        None => run_command(cfg)?,
    };
    write_artifacts(&cfg.output_dir, &files)?;
    info!("wrote {} files to {}", files.len(), cfg.output_dir.display());
    Ok(())
}

/// Runs the command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let kind = cli.command.kind();
    let result = parse_config(kind, cli.command.options()).and_then(|cfg| execute(&cfg));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> Options {
        Options::default()
    }

    #[test]
    fn command_line_overrides_file() {
        let file = parse_config_text("# settings\nK2 = 5\ninput = a.csv\n\nsigma_t=2 # wide\n").unwrap();
        let mut o = opts();
        o.k2 = Some("7".into());
        let over = o.pairs().into_iter().map(|(k, v)| (k, v.clone())).collect();
        let cfg = RunConfig::from_maps(CommandKind::Fit, &file, &over).unwrap();
        assert_eq!(cfg.k2, 7);
        assert_eq!(cfg.sigma_t, 2.0);
        assert_eq!(cfg.input, Some(PathBuf::from("a.csv")));
    }

    #[test]
    fn flags_alone_form_a_valid_config() {
        let file = parse_config_text("").unwrap();
        let mut o = opts();
        o.input = Some("d.csv".into());
        o.k1 = Some("2".into());
        o.splits = Some("3".into());
        o.test_point = Some("0,0.3,0".into());
        o.b1_grid = Some("-2:2:0.5".into());
        let over = o.pairs().into_iter().map(|(k, v)| (k, v.clone())).collect();
        let cfg = RunConfig::from_maps(CommandKind::Band, &file, &over).unwrap();
        assert_eq!((cfg.k1, cfg.splits), (2, 3));
        assert_eq!(cfg.test_point, TestPoint::Explicit(vec![0.0, 0.3, 0.0]));
        assert_eq!(cfg.b1_grid.values(), vec![-2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0]);
    }

    #[test]
    fn rejections() {
        assert!(parse_config_text("bogus = 1").is_err());
        assert!(parse_config_text("no equals sign").is_err());
        let empty = BTreeMap::new();
        let with = |k: &'static str, v: &str| {
            let mut m = BTreeMap::new();
            m.insert("input", "d.csv".to_string());
            m.insert(k, v.to_string());
            m
        };
        let e = RunConfig::from_maps(CommandKind::Fit, &empty, &empty).unwrap_err();
        assert!(e.to_string().contains("input"));
        assert_eq!(exit_code(&e), 2);
        assert!(RunConfig::from_maps(CommandKind::Band, &empty, &with("alpha", "0.7")).is_err());
        assert!(RunConfig::from_maps(CommandKind::Fit, &empty, &with("k2", "five")).is_err());
        assert!(RunConfig::from_maps(CommandKind::Fit, &empty, &with("k2", "0")).is_err());
        assert!(RunConfig::from_maps(CommandKind::Fit, &empty, &with("mode", "other")).is_err());
        assert!(RunConfig::from_maps(CommandKind::Fit, &empty, &with("b1_grid", "1:0:0.1")).is_err());
        let e = RunConfig::from_maps(CommandKind::Simulate, &empty, &with("kind", "dgp1")).unwrap_err();
        assert!(e.to_string().contains("`n`"));
    }

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(exit_code(&Error::config("x")), 2);
        assert_eq!(exit_code(&Error::data("x")), 3);
        assert_eq!(exit_code(&Error::numeric("x")), 4);
    }
}
