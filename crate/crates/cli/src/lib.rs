//! `tlpe` command-line driver.
//!
//! Exit codes: 0 on success, 1 for configuration or input errors (including
//! malformed CSV), 2 when an estimation or experiment fails.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use tlpe_egle::harness::{
    are_line, bic_demo, estimate, four_component_spec, monte_carlo_run, sensitivity_initialization,
    sensitivity_noise_levels, ConfigFile, McConfig, Method, REPORT_SCHEMA_VERSION,
};
use tlpe_egle::estimators::ls_estimate;
use tlpe_egle::tlpe::{
    build_system, inject_noise, line_params_to_y, read_measurements_file, simulate_measurements,
    write_measurements_file, LineParameters, YVector,
};
use tlpe_egle::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_ESTIMATION: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Parser)]
#[command(name = "tlpe", version, about = "Transmission-line parameter estimation under Gaussian-mixture noise")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the scenario seed and the Monte-Carlo base seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for output files (created if missing).
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// What to print on stdout: the JSON report or the CSV table.
    #[arg(long, global = true, value_enum, default_value = "json")]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate measurements and write measurement CSVs plus ground truth.
    Generate,
    /// Estimate line parameters from a measurement CSV.
    Estimate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "egle")]
        method: String,
        /// Starting line parameters `r,x,b`; least squares when absent.
        #[arg(long)]
        x0: Option<String>,
        /// Ground-truth JSON; `ground_truth.json` beside the input is used when present.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Monte-Carlo comparison of methods.
    Mc {
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        methods: Option<String>,
    },
    /// Monte-Carlo runs at scaled noise levels.
    SweepNoise {
        #[arg(long, default_value = "1,2,5,10")]
        scales: String,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        methods: Option<String>,
    },
    /// Monte-Carlo runs per initial-guess distance bin.
    SweepInit {
        /// Bins as `lo-hi` pairs separated by commas.
        #[arg(long, default_value = "0-0.1,0.1-0.2,0.2-0.3")]
        bins: String,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        methods: Option<String>,
    },
    /// BIC order selection on samples of the four-component mixture.
    BicDemo {
        #[arg(long, default_value_t = 10000)]
        samples: usize,
        #[arg(long, default_value_t = 10)]
        m_max: usize,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 8)]
        restarts: usize,
    },
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Estimation(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Estimation(_) => EXIT_ESTIMATION,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Estimation(m) => m,
        }
    }
}

/// Configuration, parse and file errors are the caller's to fix; everything
/// else means the numerics failed.
fn classify(e: Error) -> CliError {
    match e {
        Error::Config(_) | Error::Parse { .. } | Error::Io(_) => CliError::Config(e.to_string()),
        other => CliError::Estimation(other.to_string()),
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parse `argv` (including the program name), run, and return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(stdout) => {
            print!("{stdout}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

fn load_config(cli: &Cli) -> CliResult<ConfigFile> {
    let file = match &cli.config {
        Some(p) => ConfigFile::load(p).map_err(classify)?,
        None => ConfigFile::default(),
    };
    Ok(match cli.seed {
        Some(s) => file.with_seed(s),
        None => file,
    })
}

fn write_file(dir: &Path, name: &str, contents: &str) -> CliResult<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("reports serialize");
    s.push('\n');
    s
}

fn mc_overrides(file: &ConfigFile, runs: Option<usize>, methods: Option<&str>) -> CliResult<McConfig> {
    let mut mc = file.mc_config().map_err(classify)?;
    if let Some(r) = runs {
        mc.runs = r;
    }
    if let Some(m) = methods {
        mc.methods = Method::parse_list(m).map_err(classify)?;
    }
    mc.validate().map_err(classify)?;
    Ok(mc)
}

fn parse_floats(s: &str, what: &str) -> CliResult<Vec<f64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Config(format!("{what}: '{p}' is not a number")))
        })
        .collect()
}

fn parse_bins(s: &str) -> CliResult<Vec<[f64; 2]>> {
    s.split(',')
        .map(|b| {
            let (lo, hi) = b
                .trim()
                .split_once('-')
                .ok_or_else(|| CliError::Config(format!("bin '{b}' is not of the form lo-hi")))?;
            let v = parse_floats(&format!("{lo},{hi}"), "bins")?;
            Ok([v[0], v[1]])
        })
        .collect()
}

fn execute(cli: &Cli) -> CliResult<String> {
    let file = load_config(cli)?;
    let out = &cli.out_dir;
    match &cli.command {
        Command::Generate => {
            let sc = file.scenario_config().map_err(classify)?;
            let clean = simulate_measurements(&sc).map_err(classify)?;
            let noisy = inject_noise(&clean, &sc.noise_c, &sc.noise_d, sc.seed.wrapping_add(1)).map_err(classify)?;
            fs::create_dir_all(out).map_err(|e| CliError::Config(format!("cannot create {}: {e}", out.display())))?;
            write_measurements_file(&out.join("measurements.csv"), &noisy.noisy).map_err(classify)?;
            write_measurements_file(&out.join("measurements_clean.csv"), &clean).map_err(classify)?;
            let truth = json!({
                "schema_version": REPORT_SCHEMA_VERSION,
                "kind": "generate",
                "true_params": sc.true_params,
                "true_y": line_params_to_y(&sc.true_params).map_err(classify)?.0,
                "instants": clean.len(),
                "scenario": sc,
                "files": {"noisy": "measurements.csv", "clean": "measurements_clean.csv"},
            });
            let text = to_json(&truth);
            write_file(out, "ground_truth.json", &text)?;
            Ok(match cli.format {
                Format::Json => text,
                Format::Csv => fs::read_to_string(out.join("measurements.csv")).unwrap_or_default(),
            })
        }
        Command::Estimate {
            input,
            method,
            x0,
            truth,
        } => {
            let method: Method = method.parse().map_err(classify)?;
            let settings = file.settings().map_err(classify)?;
            let records = read_measurements_file(input).map_err(classify)?;
            let x0y = match x0 {
                Some(s) => {
                    let v = parse_floats(s, "x0")?;
                    if v.len() != 3 {
                        return Err(CliError::Config("x0 needs three values r,x,b".into()));
                    }
                    let start = LineParameters {
                        r: v[0],
                        x: v[1],
                        b: v[2],
                    };
                    start.validate().map_err(classify)?;
                    line_params_to_y(&start).map_err(|e| CliError::Config(format!("x0: {e}")))?
                }
                None => match &settings.egle.x0 {
                    Some(v) => YVector::from_slice(v).map_err(classify)?,
                    None => {
                        let sys = build_system(&records).map_err(classify)?;
                        YVector::from(&ls_estimate(&sys).map_err(classify)?)
                    }
                },
            };
            let truth_path = truth.clone().or_else(|| {
                let p = input.parent().unwrap_or(Path::new(".")).join("ground_truth.json");
                p.exists().then_some(p)
            });
            let truth = match truth_path {
                Some(p) => Some(read_truth(&p)?),
                None => None,
            };
            let est = estimate(method, &records, &x0y, &settings).map_err(classify)?;
            let are = match &truth {
                Some(t) => Some(are_line(&est.line, t).map_err(classify)?),
                None => None,
            };
            let report = json!({
                "schema_version": REPORT_SCHEMA_VERSION,
                "kind": "estimate",
                "method": method,
                "input": input.display().to_string(),
                "instants": records.len(),
                "x0": x0y.0,
                "y": est.y,
                "line": est.line,
                "truth": truth,
                "are": are,
                "are_net": are.map(|a| a.iter().sum::<f64>()),
                "converged": est.converged,
                "box_active": est.box_active,
                "mtee_iterations": est.mtee_iterations,
                "mtee_entropy_trace": est.mtee_entropy_trace,
                "egle": est.egle,
            });
            let text = to_json(&report);
            write_file(out, "estimate_report.json", &text)?;
            Ok(match cli.format {
                Format::Json => text,
                Format::Csv => {
                    let mut s = String::from("method,parameter,estimate,are\n");
                    for (k, (name, v)) in [("r", est.line.r), ("x", est.line.x), ("b", est.line.b)].iter().enumerate() {
                        let a = are.map_or(String::new(), |a| format!("{:e}", a[k]));
                        s.push_str(&format!("{method},{name},{v:e},{a}\n"));
                    }
                    s
                }
            })
        }
        Command::Mc { runs, methods } => {
            let mc = mc_overrides(&file, *runs, methods.as_deref())?;
            let rep = monte_carlo_run(&mc).map_err(classify)?;
            let text = to_json(&rep);
            let csv = rep.summary_csv();
            write_file(out, "mc_report.json", &text)?;
            write_file(out, "mc_summary.csv", &csv)?;
            Ok(pick(cli.format, &text, csv))
        }
        Command::SweepNoise { scales, runs, methods } => {
            let mc = mc_overrides(&file, *runs, methods.as_deref())?;
            let scales = parse_floats(scales, "scales")?;
            let rep = sensitivity_noise_levels(&mc, &scales).map_err(classify)?;
            let text = to_json(&rep);
            let csv = rep.table_csv();
            write_file(out, "noise_sweep.json", &text)?;
            write_file(out, "noise_sweep.csv", &csv)?;
            Ok(pick(cli.format, &text, csv))
        }
        Command::SweepInit { bins, runs, methods } => {
            let mc = mc_overrides(&file, *runs, methods.as_deref())?;
            let bins = parse_bins(bins)?;
            let rep = sensitivity_initialization(&mc, &bins).map_err(classify)?;
            let text = to_json(&rep);
            let csv = rep.table_csv();
            write_file(out, "init_sweep.json", &text)?;
            write_file(out, "init_sweep.csv", &csv)?;
            Ok(pick(cli.format, &text, csv))
        }
        Command::BicDemo {
            samples,
            m_max,
            trials,
            restarts,
        } => {
            let egle = file.settings().map_err(classify)?.egle;
            let rep = bic_demo(
                &four_component_spec(),
                *samples,
                *m_max,
                *trials,
                file.mc.base_seed,
                &egle.em,
                *restarts,
                egle.execution,
            )
            .map_err(classify)?;
            let text = to_json(&rep);
            let csv = rep.table_csv();
            write_file(out, "bic_demo.json", &text)?;
            write_file(out, "bic_demo.csv", &csv)?;
            Ok(pick(cli.format, &text, csv))
        }
    }
}

fn pick(format: Format, json: &str, csv: String) -> String {
    match format {
        Format::Json => json.to_string(),
        Format::Csv => csv,
    }
}

fn read_truth(path: &Path) -> CliResult<LineParameters> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let v: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_value(v.get("true_params").cloned().unwrap_or(Value::Null))
        .map_err(|e| CliError::Config(format!("{}: true_params: {e}", path.display())))
}
