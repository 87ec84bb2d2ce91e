//! `hyad`: validate, simulate, differentiate and optimize block diagrams.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hybrid_ad::diagram::{agdm_diff, derivative_output_name, parse_diagram, Diagram, DiagramError};
use hybrid_ad::optimize::{optimize, CostSpec, Jacobian, OptimizeConfig, OptimizeError};
use hybrid_ad::sim::{flatten, integrate, csv_field, sensitivity_extend_many, Method, SimConfig, SimError, Trajectory};
use hybrid_ad::{models, tables};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Simulation(String),
    #[error("{0}")]
    Optimization(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Simulation(_) => 3,
            CliError::Optimization(_) => 4,
        }
    }
}

impl From<DiagramError> for CliError {
    fn from(e: DiagramError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Diagram(_)
            | SimError::Expr(_)
            | SimError::UnknownParameter { .. }
            | SimError::InvalidConfig(_)
            | SimError::InvalidModel(_) => CliError::Validation(e.to_string()),
            _ => CliError::Simulation(e.to_string()),
        }
    }
}

impl From<OptimizeError> for CliError {
    fn from(e: OptimizeError) -> Self {
        match e {
            OptimizeError::Sim(s) => s.into(),
            OptimizeError::UnknownOutput(_) | OptimizeError::BadDecimation(_) => CliError::Validation(e.to_string()),
            OptimizeError::NoConvergence { ref history } | OptimizeError::Stalled { ref history, .. } => {
                let mut s = format!("{e}\niter\ttheta\tcost\tgradient");
                for (i, h) in history.iter().enumerate() {
                    s.push_str(&format!("\n{i}\t{}\t{}\t{}", h.theta, h.cost, h.gradient));
                }
                CliError::Optimization(s)
            }
            _ => CliError::Optimization(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "hyad", version, about = "Derivatives of hybrid block-diagram models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct SimFlags {
    #[arg(long, default_value_t = 1e-3)]
    step: f64,
    #[arg(long, default_value_t = 0.0)]
    t0: f64,
    #[arg(long, default_value_t = 1.0)]
    tf: f64,
    #[arg(long, value_enum, default_value_t = MethodArg::Rk4)]
    method: MethodArg,
    #[arg(long, default_value_t = 1e-10)]
    event_tol: f64,
    #[arg(long, default_value_t = 1e3)]
    heaviside_a: f64,
}

impl SimFlags {
    fn config(&self) -> SimConfig {
        SimConfig {
            method: match self.method {
                MethodArg::Midpoint => Method::Midpoint,
                MethodArg::Rk4 => Method::Rk4,
            },
            step: self.step,
            t0: self.t0,
            tf: self.tf,
            event_tol: self.event_tol,
            heaviside_a: self.heaviside_a,
            ..SimConfig::default()
        }
    }
}

#[derive(ValueEnum, Clone, Copy)]
enum MethodArg {
    Midpoint,
    Rk4,
}

#[derive(ValueEnum, Clone, Copy, PartialEq)]
enum Route {
    Agdm,
    Sensode,
    Both,
}

#[derive(ValueEnum, Clone, Copy)]
enum JacobianArg {
    Ad,
    Fd,
}

#[derive(ValueEnum, Clone, Copy)]
enum Example {
    FirstOrder,
    SecondOrder,
    DiscreteLoop,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parse and validate a diagram.
    Validate { diagram: PathBuf },
    /// Simulate a diagram and write states and outputs as CSV.
    Simulate {
        diagram: PathBuf,
        #[command(flatten)]
        sim: SimFlags,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the diagram augmented with its derivative blocks.
    Diff {
        diagram: PathBuf,
        #[arg(long)]
        theta: String,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
        order: u8,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Outputs and their parameter derivatives as CSV.
    Sens {
        diagram: PathBuf,
        /// Comma-separated parameter names.
        #[arg(long, value_delimiter = ',', required = true)]
        theta: Vec<String>,
        #[arg(long, value_enum, default_value_t = Route::Sensode)]
        route: Route,
        #[command(flatten)]
        sim: SimFlags,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Minimize an accumulated cost over one parameter.
    Optimize {
        diagram: PathBuf,
        #[arg(long)]
        theta: String,
        #[arg(long)]
        theta0: f64,
        /// Output holding the cost integrand.
        #[arg(long)]
        integrand: String,
        /// Output accumulating the integrand; its final value is the cost.
        #[arg(long)]
        accumulator: Option<String>,
        #[arg(long, value_enum, default_value_t = JacobianArg::Ad)]
        jacobian: JacobianArg,
        /// Sample the integrand every this many seconds.
        #[arg(long)]
        decimate: Option<f64>,
        #[arg(long, num_args = 2, value_names = ["LO", "HI"])]
        bounds: Option<Vec<f64>>,
        #[command(flatten)]
        sim: SimFlags,
    },
    /// Regenerate a numeric table.
    Table {
        #[arg(value_parser = tables::TABLES)]
        which: String,
    },
    /// Write one of the reference diagrams.
    Example {
        #[arg(value_enum)]
        name: Example,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(path: &Path) -> Result<Diagram> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    Ok(parse_diagram(&text)?)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| CliError::Io(format!("{}: {e}", p.display()))),
        None => {
            let mut o = std::io::stdout().lock();
            match o.write_all(text.as_bytes()).and_then(|_| o.flush()) {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::Io(e.to_string())),
                _ => Ok(()),
            }
        }
    }
}

fn simulate(d: &Diagram, cfg: &SimConfig) -> Result<Trajectory> {
    Ok(integrate(&flatten(d)?, cfg)?)
}

/// Rows of `t`, then every output, then every `dy/dθ` grouped by θ.
struct SensTable {
    header: Vec<String>,
    times: Vec<f64>,
    rows: Vec<Vec<f64>>,
}

impl SensTable {
    fn to_csv(&self) -> String {
        let mut s = String::from("t");
        for h in &self.header {
            s.push(',');
            s.push_str(&csv_field(h));
        }
        s.push('\n');
        for (t, r) in self.times.iter().zip(&self.rows) {
            s.push_str(&format!("{t:.16e}"));
            for v in r {
                s.push_str(&format!(",{v:.16e}"));
            }
            s.push('\n');
        }
        s
    }
}

fn sens_columns(d: &Diagram, thetas: &[String]) -> Vec<String> {
    let ys: Vec<&String> = d.outputs.iter().map(|o| &o.name).collect();
    let mut cols: Vec<String> = ys.iter().map(|y| y.to_string()).collect();
    for th in thetas {
        cols.extend(ys.iter().map(|y| derivative_output_name(y, th)));
    }
    cols
}

fn gather(traj: &[(Trajectory, Vec<String>)], header: &[String]) -> Result<SensTable> {
    let times = traj[0].0.times.clone();
    let mut cols = vec![];
    for (j, h) in header.iter().enumerate() {
        let (tr, _) = traj.iter().find(|(_, names)| names.contains(h)).unwrap_or(&traj[0]);
        if tr.times != times {
            return Err(CliError::Simulation("derivative runs produced different time grids".into()));
        }
        let c = tr.output(h).ok_or_else(|| CliError::Simulation(format!("missing column `{h}` (#{j})")))?;
        cols.push(c);
    }
    let rows = (0..times.len()).map(|i| cols.iter().map(|c| c[i]).collect()).collect();
    Ok(SensTable { header: header.to_vec(), times, rows })
}

fn sens_agdm(d: &Diagram, thetas: &[String], cfg: &SimConfig) -> Result<SensTable> {
    let header = sens_columns(d, thetas);
    let mut runs = vec![];
    for th in thetas {
        let dd = agdm_diff(d, th)?;
        let names: Vec<String> = d.outputs.iter().map(|o| derivative_output_name(&o.name, th)).collect();
        runs.push((simulate(&dd, cfg)?, names));
    }
    gather(&runs, &header)
}

fn sens_ode(d: &Diagram, thetas: &[String], cfg: &SimConfig) -> Result<SensTable> {
    let header = sens_columns(d, thetas);
    for th in thetas {
        d.require_param(th)?;
    }
    let refs: Vec<&str> = thetas.iter().map(String::as_str).collect();
    let m = sensitivity_extend_many(&flatten(d)?, &refs)?;
    let tr = integrate(&m, cfg)?;
    gather(&[(tr, header.clone())], &header)
}

fn max_discrepancy(a: &SensTable, b: &SensTable) -> Result<(f64, String)> {
    if a.times.len() != b.times.len() {
        return Err(CliError::Simulation("routes produced different time grids".into()));
    }
    let mut worst = (0.0, a.header.first().cloned().unwrap_or_default());
    for (ra, rb) in a.rows.iter().zip(&b.rows) {
        for (j, (x, y)) in ra.iter().zip(rb).enumerate() {
            let e = (x - y).abs();
            if e > worst.0 || e.is_nan() {
                worst = (e, a.header[j].clone());
            }
        }
    }
    Ok(worst)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Validate { diagram } => {
            let d = load(&diagram)?;
            println!("ok: {} ({} blocks, {} links, {} outputs)", d.name, d.blocks.len(), d.links.len(), d.outputs.len());
        }
        Cmd::Simulate { diagram, sim, out } => {
            let d = load(&diagram)?;
            emit(out.as_deref(), &simulate(&d, &sim.config())?.to_csv())?;
        }
        Cmd::Diff { diagram, theta, order, out } => {
            let d = load(&diagram)?;
            let mut dd = agdm_diff(&d, &theta)?;
            if order == 2 {
                dd = agdm_diff(&dd, &theta)?;
            }
            let summary = format!(
                "{}: {} -> {} blocks, {} -> {} links, outputs: {}",
                d.name,
                d.blocks.len(),
                dd.blocks.len(),
                d.links.len(),
                dd.links.len(),
                dd.outputs.iter().map(|o| o.name.as_str()).collect::<Vec<_>>().join(", ")
            );
            match out {
                Some(p) => {
                    emit(Some(&p), &dd.to_json())?;
                    println!("{summary}");
                }
                None => {
                    emit(None, &dd.to_json())?;
                    eprintln!("{summary}");
                }
            }
        }
        Cmd::Sens { diagram, theta, route, sim, out } => {
            let d = load(&diagram)?;
            let cfg = sim.config();
            let table = match route {
                Route::Agdm => sens_agdm(&d, &theta, &cfg)?,
                Route::Sensode => sens_ode(&d, &theta, &cfg)?,
                Route::Both => {
                    let a = sens_agdm(&d, &theta, &cfg)?;
                    let b = sens_ode(&d, &theta, &cfg)?;
                    let (e, col) = max_discrepancy(&a, &b)?;
                    eprintln!("max discrepancy between routes: {e:e} (column {col})");
                    b
                }
            };
            emit(out.as_deref(), &table.to_csv())?;
        }
        Cmd::Optimize { diagram, theta, theta0, integrand, accumulator, jacobian, decimate, bounds, sim } => {
            let d = load(&diagram)?;
            d.require_param(&theta)?;
            let m = flatten(&d)?;
            let mut cfg = OptimizeConfig::new(&theta, theta0, CostSpec { integrand, accumulator, decimate }, sim.config());
            cfg.jacobian = match jacobian {
                JacobianArg::Ad => Jacobian::Ad,
                JacobianArg::Fd => Jacobian::Fd,
            };
            if let Some(b) = bounds {
                cfg.bounds = (b[0], b[1]);
            }
            let r = optimize(&m, &cfg)?;
            println!("theta\t{}", theta);
            println!("optimum\t{:.12}", r.theta);
            println!("cost\t{:.12e}", r.cost);
            println!("gradient\t{:.3e}", r.gradient);
            println!("iterations\t{}", r.iterations);
        }
        Cmd::Table { which } => {
            emit(None, &tables::table(&which).map_err(|e| CliError::Simulation(e.to_string()))?)?;
        }
        Cmd::Example { name, out } => {
            let d = match name {
                Example::FirstOrder => models::first_order(1.0, 0.5),
                Example::SecondOrder => models::second_order(0.1),
                Example::DiscreteLoop => models::discrete_loop(),
            };
            emit(out.as_deref(), &d.to_json())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
