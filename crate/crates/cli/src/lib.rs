//! `kstnet`: synthesize, evaluate and verify constructed transformers.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage, parse, domain or
//! cap error.

pub mod expr;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use kst_core::assembly::{build_transformer, eval_transformer, BuildOptions, Metric, TransformerPipeline};
use kst_core::harness::{run_suite, Suite, SuiteOptions};
use kst_core::inner::InnerVariant;
use kst_core::memo::{build_label_table, LabelAnchor, MemoBackend, DEFAULT_ENUM_CAP};
use kst_core::scalar::{f64_to_rational, parse_rational};
use kst_core::target::TargetOracle;
use kst_core::{KstError, Matrix, Mode, Scalar};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] KstError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config: {0}")]
    Config(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|source| CliError::Io { path: path.into(), source })
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|source| CliError::Io { path: path.into(), source })
}

fn default_variant() -> InnerVariant {
    InnerVariant::Floor
}

fn default_backend() -> MemoBackend {
    MemoBackend::Bitpack
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub d: usize,
    pub n: usize,
    pub beta: f64,
    #[serde(rename = "Q", alias = "q")]
    pub q: f64,
    pub epsilon: f64,
    /// `"linf"` or `{"lp": p}`.
    pub metric: Metric,
    #[serde(default = "default_variant")]
    pub inner_variant: InnerVariant,
    #[serde(default = "default_backend")]
    pub memo_backend: MemoBackend,
    /// Builtin name, a number for a constant, or an expression over `x[p,q]`.
    pub target: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub anchor: Option<LabelAnchor>,
    #[serde(default)]
    pub winding_delta: Option<f64>,
    #[serde(default)]
    pub winding_budget: Option<u64>,
    #[serde(default)]
    pub kdn_cap: Option<usize>,
}

impl Config {
    pub fn load(path: &Path) -> CliResult<Config> {
        serde_json::from_str(&read(path)?).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn build_options(&self) -> BuildOptions {
        let mut opts = BuildOptions::default();
        if let Some(a) = self.anchor {
            opts.anchor = a;
        }
        opts.winding_delta = self.winding_delta;
        if let Some(b) = self.winding_budget {
            opts.winding_budget = b;
        }
        if let Some(c) = self.kdn_cap {
            opts.kdn_cap = c;
        }
        opts
    }

    /// Target with the declared Hölder data; builtins keep their own formula.
    pub fn target(&self) -> CliResult<TargetOracle> {
        let (d, n) = (self.d, self.n);
        let name = self.target.trim();
        let base = match name {
            "mean" => TargetOracle::mean(d, n)?,
            "row_mean" => TargetOracle::row_mean(d, n)?,
            "column_mean" => TargetOracle::column_mean(d, n)?,
            "min" => TargetOracle::min(d, n)?,
            "max" => TargetOracle::max(d, n)?,
            _ => match name.parse::<f64>() {
                Ok(c) => TargetOracle::constant(d, n, c)?,
                Err(_) => {
                    let e = expr::parse_expr(name, d, n)?;
                    TargetOracle::broadcast(name, d, n, self.beta, self.q, move |x| e.eval(x))?
                }
            },
        };
        Ok(base.with_holder(self.beta, self.q)?)
    }
}

/// Declared Hölder constants are unverifiable; flag obvious violations.
fn holder_warning(f: &TargetOracle, seed: u64) -> CliResult<Option<String>> {
    let ratio = f.holder_spot_check(2000, seed)?;
    Ok((ratio > f.q() * (1.0 + 1e-9)).then(|| {
        format!(
            "warning: target `{}` shows |f(x)-f(y)|/|x-y|^beta = {ratio:.4} > declared Q = {}",
            f.name(),
            f.q()
        )
    }))
}

#[derive(Parser, Debug)]
#[command(name = "kstnet", version, about = "Constructive transformer approximation of Hölder targets")]
pub struct Cli {
    /// Worker threads for synthesis and verification (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum EvalMode {
    Exact,
    Float,
    /// Exact when every stage allows it.
    Auto,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SuiteArg {
    Inner,
    Memo,
    E2e,
    All,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Suite {
        match s {
            SuiteArg::Inner => Suite::Inner,
            SuiteArg::Memo => Suite::Memo,
            SuiteArg::E2e => Suite::E2e,
            SuiteArg::All => Suite::All,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build a pipeline from a JSON config.
    Synth {
        config: PathBuf,
        #[arg(short, long, default_value = "pipeline.json")]
        output: PathBuf,
        /// Also write the label table as CSV (m, s, r, label).
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Evaluate a pipeline on one input matrix.
    Eval {
        pipeline: PathBuf,
        /// Rows separated by `;`, entries by `,`; entries may be `p/q`.
        #[arg(long, conflicts_with = "csv", required_unless_present = "csv")]
        input: Option<String>,
        /// CSV file with one matrix row per line, no header.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "auto")]
        mode: EvalMode,
    },
    /// Run verification suites; exits 1 if any check fails.
    Verify {
        config: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        suite: SuiteArg,
        /// Verify this pipeline file instead of rebuilding from the config.
        #[arg(long)]
        pipeline: Option<PathBuf>,
        /// Write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        inner_random: usize,
        #[arg(long, default_value_t = 1000)]
        memo_points: usize,
        #[arg(long, default_value_t = 1000)]
        dinf_random: usize,
        #[arg(long, default_value_t = 10_000)]
        dp_samples: usize,
    },
}

/// Exact decimal or `p/q` parse, so `0.1` means one tenth in exact mode.
fn parse_entry(text: &str, mode: Mode) -> CliResult<Scalar> {
    let t = text.trim();
    let bad = || KstError::Parse(format!("`{t}` is not a number"));
    if mode == Mode::Float {
        if t.contains('/') {
            return Ok(Scalar::Exact(parse_rational(t)?).convert(Mode::Float)?);
        }
        return Ok(Scalar::float(t.parse().map_err(|_| bad())?));
    }
    if t.contains('/') {
        return Ok(Scalar::Exact(parse_rational(t)?));
    }
    let v: f64 = t.parse().map_err(|_| bad())?;
    let (neg, digits) = match t.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, t.strip_prefix('+').unwrap_or(t)),
    };
    let decimal = match digits.split_once('.') {
        Some((int, frac)) if !digits.contains(['e', 'E']) => Some(format!("{int}{frac}/1{}", "0".repeat(frac.len()))),
        None if digits.chars().all(|c| c.is_ascii_digit()) => Some(format!("{digits}/1")),
        _ => None,
    };
    let r = match decimal {
        Some(s) => parse_rational(&s)?,
        None => f64_to_rational(v)?,
    };
    Ok(Scalar::Exact(if neg { -r } else { r }))
}

fn parse_rows(rows: Vec<Vec<String>>, mode: Mode) -> CliResult<Matrix<Scalar>> {
    let parsed = rows
        .into_iter()
        .map(|r| r.iter().map(|e| parse_entry(e, mode)).collect::<CliResult<Vec<_>>>())
        .collect::<CliResult<Vec<_>>>()?;
    Ok(Matrix::from_rows(parsed)?)
}

pub fn parse_inline(text: &str, mode: Mode) -> CliResult<Matrix<Scalar>> {
    let rows = text.split(';').map(|r| r.split(',').map(str::to_string).collect()).collect();
    parse_rows(rows, mode)
}

pub fn parse_csv(path: &Path, mode: Mode) -> CliResult<Matrix<Scalar>> {
    let text = read(path)?;
    let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(text.as_bytes());
    let rows = reader
        .records()
        .map(|r| r.map(|rec| rec.iter().map(str::to_string).collect()))
        .collect::<Result<Vec<Vec<String>>, _>>()?;
    parse_rows(rows, mode)
}

fn summary(p: &TransformerPipeline) -> String {
    let m = &p.manifest;
    let mut out = format!(
        "target {}  d={} n={}  K={} H={}  |Lambda|={}  M_total={}  g=[{}, {}]\n",
        p.params.target, p.params.d, p.params.n, m.k, m.h, m.lambda_size, m.m_total, p.params.g_min, p.params.g_max
    );
    for s in &m.stages {
        out += &format!("  {:<12} depth {:>2}  width {:>3}  [{}]\n", s.stage, s.depth, s.width, s.activations.join(", "));
    }
    out
}

fn cmd_synth(config: &Path, output: &Path, labels: Option<&Path>) -> CliResult<i32> {
    let cfg = Config::load(config)?;
    let f = cfg.target()?;
    if let Some(w) = holder_warning(&f, cfg.seed)? {
        eprintln!("{w}");
    }
    let p = build_transformer(&f, cfg.epsilon, cfg.metric, cfg.inner_variant, cfg.memo_backend, cfg.seed, &cfg.build_options())?;
    write(output, &p.to_json()?)?;
    if let Some(path) = labels {
        let table = build_label_table(&f, p.params.k, p.params.anchor, DEFAULT_ENUM_CAP)?;
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["m", "s", "r", "label"])?;
        for (m, s, r, v) in table.rows() {
            w.write_record([m, s.to_string(), r.to_string(), format!("{v:?}")])?;
        }
        w.flush().map_err(|source| CliError::Io { path: path.into(), source })?;
    }
    for warning in &p.manifest.warnings {
        eprintln!("warning: {warning}");
    }
    print!("{}", summary(&p));
    println!("wrote {}", output.display());
    Ok(EXIT_OK)
}

fn cmd_eval(pipeline: &Path, input: Option<&str>, csv_path: Option<&Path>, mode: EvalMode) -> CliResult<i32> {
    let p = TransformerPipeline::from_json(&read(pipeline)?)?;
    let mode = match mode {
        EvalMode::Exact => Mode::Exact,
        EvalMode::Float => Mode::Float,
        EvalMode::Auto => p.preferred_mode(),
    };
    let x = match (input, csv_path) {
        (Some(text), _) => parse_inline(text, mode)?,
        (None, Some(path)) => parse_csv(path, mode)?,
        (None, None) => return Err(CliError::Config("eval needs --input or --csv".into())),
    };
    let out = eval_transformer(&p, &x, mode)?;
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    for row in out.to_rows() {
        let cells: Vec<String> = row.iter().map(ToString::to_string).collect();
        let _ = writeln!(lock, "{}", cells.join(","));
    }
    Ok(EXIT_OK)
}

#[allow(clippy::too_many_arguments)]
fn cmd_verify(
    config: &Path,
    suite: Suite,
    pipeline: Option<&Path>,
    report: Option<&Path>,
    opts: &SuiteOptions,
) -> CliResult<i32> {
    let cfg = Config::load(config)?;
    let f = cfg.target()?;
    let p = match pipeline {
        Some(path) => TransformerPipeline::from_json(&read(path)?)?,
        None => build_transformer(&f, cfg.epsilon, cfg.metric, cfg.inner_variant, cfg.memo_backend, cfg.seed, &cfg.build_options())?,
    };
    if p.params.target != f.name() {
        eprintln!("warning: pipeline was built for `{}`, verifying against `{}`", p.params.target, f.name());
    }
    let opts = SuiteOptions { seed: cfg.seed, ..opts.clone() };
    let result = run_suite(&p, &f, suite, &opts)?;
    print!("{}", result.to_text());
    if let Some(path) = report {
        write(path, &result.to_json()?)?;
    }
    Ok(if result.passed() { EXIT_OK } else { EXIT_VERIFY_FAILED })
}

pub fn execute(cli: Cli) -> CliResult<i32> {
    if let Some(t) = cli.threads {
        kst_core::set_threads(t)?;
    }
    match cli.command {
        Command::Synth { config, output, labels } => cmd_synth(&config, &output, labels.as_deref()),
        Command::Eval { pipeline, input, csv, mode } => cmd_eval(&pipeline, input.as_deref(), csv.as_deref(), mode),
        Command::Verify { config, suite, pipeline, report, inner_random, memo_points, dinf_random, dp_samples } => {
            let opts = SuiteOptions { seed: 0, inner_random, memo_points, dinf_random, dp_samples };
            cmd_verify(&config, suite.into(), pipeline.as_deref(), report.as_deref(), &opts)
        }
    }
}

/// Parses arguments, runs the command and maps the outcome to an exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decimal_entries_are_exact() {
        let r = Scalar::ratio;
        assert_eq!(parse_entry("0.1", Mode::Exact).unwrap(), r(1, 10));
        assert_eq!(parse_entry("-1.25", Mode::Exact).unwrap(), r(-5, 4));
        assert_eq!(parse_entry("3", Mode::Exact).unwrap(), r(3, 1));
        assert_eq!(parse_entry("1/3", Mode::Exact).unwrap(), r(1, 3));
        assert_eq!(parse_entry("0.5", Mode::Float).unwrap(), Scalar::float(0.5));
        assert!(parse_entry("abc", Mode::Exact).is_err());
    }

    #[test]
    fn config_defaults_and_targets() {
        let cfg: Config = serde_json::from_str(
            r#"{"d":1,"n":2,"beta":1,"Q":1,"epsilon":0.25,"metric":"linf","target":"(x[1,1]+x[1,2])/2"}"#,
        )
        .unwrap();
        assert_eq!(cfg.inner_variant, InnerVariant::Floor);
        assert_eq!(cfg.memo_backend, MemoBackend::Bitpack);
        let f = cfg.target().unwrap();
        let x = Matrix::from_rows(vec![vec![0.5, 0.0]]).unwrap();
        assert_eq!(f.evaluate(&x).unwrap().get(0, 1), &0.25);
        let lp: Config = serde_json::from_str(
            r#"{"d":1,"n":1,"beta":1,"q":1,"epsilon":0.5,"metric":{"lp":2},"target":"0.7"}"#,
        )
        .unwrap();
        assert_eq!(lp.metric, Metric::Lp(2.0));
        assert_eq!(lp.target().unwrap().evaluate(&Matrix::filled(1, 1, 0.3)).unwrap().get(0, 0), &0.7);
        assert!(serde_json::from_str::<Config>(r#"{"d":1}"#).is_err());
    }
}
