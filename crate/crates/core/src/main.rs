use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use narrowforge::coupling::{compile_acf, compile_inn, AcfSpec, CouplingFlow, InnProgram, RidgeSum};
use narrowforge::pipeline::{compile_pipeline, min_width_bound, ActivationClass, DiffeoTarget};
use narrowforge::pwl1d::{compile_increasing_pwl, PwlFunction};
use narrowforge::sct::{compile_sct_with, SctOptions, SctOracle};
use narrowforge::verify::{sup_error, VerifyReport};
use narrowforge::{Box, Error, Network, Result};

#[derive(Parser)]
#[command(name = "narrowforge", version, about = "Compile maps into deep narrow MLPs and measure them on grids")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// Box as `lo:hi` per coordinate, comma separated; defaults to the unit cube.
    #[arg(long = "box")]
    domain: Option<String>,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    /// Verification lattice points per side.
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write the compiled network.
    #[arg(short = 'o', long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Exact width-1 network for an increasing piecewise-linear function.
    CompilePwl {
        input: PathBuf,
        #[arg(short = 'o', long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
    },
    /// Width-d network for an affine coupling map.
    CompileAcf {
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Width-d network for a program of affine and coupling stages.
    CompileInn {
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Width-d network for a single-coordinate transformation.
    CompileSct {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 8)]
        slices: usize,
        /// Dump the slice table here.
        #[arg(long)]
        table: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Network `ℝⁿ → ℝᵐ` for a diffeomorphism target.
    CompilePipeline {
        input: PathBuf,
        /// `leaky-relu`, `relu` or `general:<name>`.
        #[arg(long, default_value = "leaky-relu")]
        activation: String,
        #[command(flatten)]
        common: Common,
    },
    /// Measures a stored network against an oracle file.
    Verify {
        network: PathBuf,
        #[arg(long)]
        oracle: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Prints max(2n+1, m) + α for the activation class.
    Bound {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        m: usize,
        #[arg(long, default_value = "leaky-relu")]
        activation: String,
    },
}

/// Reference maps accepted by `verify`.
#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Oracle {
    Network(Network),
    Pwl(PwlFunction),
    Acf(AcfSpec),
    Inn(InnProgram),
    Target(DiffeoTarget),
    Flow(CouplingFlow),
}

impl Oracle {
    fn input_dim(&self) -> usize {
        match self {
            Oracle::Network(n) => n.input_dim,
            Oracle::Pwl(_) => 1,
            Oracle::Acf(a) => a.d,
            Oracle::Inn(p) => p.d,
            Oracle::Target(t) => t.n,
            Oracle::Flow(f) => f.d,
        }
    }

    fn eval(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Oracle::Network(n) => n.evaluate(x).unwrap_or_else(|_| vec![f64::NAN]),
            Oracle::Pwl(f) => vec![f.eval(x[0])],
            Oracle::Acf(a) => a.eval(x),
            Oracle::Inn(p) => p.eval(x),
            Oracle::Target(t) => t.eval(x),
            Oracle::Flow(f) => f.eval(x),
        }
    }
}

/// `τ` for `compile-sct`: the last output of a ridge sum, network or (for d = 1) PWL.
#[derive(Deserialize)]
struct SctSpec {
    d: usize,
    tau: TauSpec,
}

#[derive(Deserialize, Clone)]
#[serde(rename_all = "snake_case")]
enum TauSpec {
    Ridge(RidgeSum),
    Network(Network),
    Pwl(PwlFunction),
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn parse_box(spec: Option<&str>, d: usize) -> Result<Box> {
    let Some(spec) = spec else { return Ok(Box::unit(d)) };
    let (mut lo, mut hi) = (Vec::new(), Vec::new());
    for part in spec.split(',') {
        let (a, b) = part
            .split_once(':')
            .ok_or_else(|| Error::invalid(format!("box side `{part}` is not `lo:hi`")))?;
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| Error::invalid(format!("bad number `{s}`")));
        lo.push(num(a)?);
        hi.push(num(b)?);
    }
    if lo.len() != d {
        return Err(Error::Dimension { layer: 0, expected: d, got: lo.len() });
    }
    Box::new(lo, hi)
}

fn default_grid(d: usize) -> usize {
    match d {
        0 | 1 => 1001,
        2 => 101,
        3 => 21,
        _ => 7,
    }
}

fn write_network(net: &Network, out: Option<&Path>) -> Result<()> {
    if let Some(path) = out {
        let mut text = net.to_json();
        text.push('\n');
        fs::write(path, text)?;
    }
    Ok(())
}

fn measure(net: &Network, oracle: impl Fn(&[f64]) -> Vec<f64> + Sync, domain: &Box, grid: usize, tol: f64, seed: u64) -> Result<VerifyReport> {
    let mut rep = sup_error(net, &oracle, domain, grid)?.with_tol(tol);
    rep.seed = seed;
    Ok(rep)
}

fn run(cli: Cli) -> Result<bool> {
    let report = match cli.cmd {
        Cmd::Bound { n, m, activation } => {
            let cls: ActivationClass = activation.parse()?;
            println!("{}", min_width_bound(n, m, &cls));
            return Ok(true);
        }
        Cmd::CompilePwl { input, output, tol } => {
            let f: PwlFunction = read_json(&input)?;
            let net = compile_increasing_pwl(&f)?;
            write_network(&net, output.as_deref())?;
            let xs = f.breakpoints.iter().chain(std::iter::once(&f.anchor.0));
            let (lo, hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(*v), h.max(*v)));
            let domain = Box::new(vec![lo - 1.0], vec![hi + 1.0])?;
            measure(&net, |x| vec![f.eval(x[0])], &domain, default_grid(1), tol, 0)?
        }
        Cmd::CompileAcf { input, common } => {
            let spec: AcfSpec = read_json(&input)?;
            let domain = parse_box(common.domain.as_deref(), spec.d)?;
            let net = compile_acf(&spec, &domain, common.tol)?;
            write_network(&net, common.output.as_deref())?;
            let grid = common.grid.unwrap_or(default_grid(spec.d));
            measure(&net, |x| spec.eval(x), &domain, grid, common.tol, common.seed)?
        }
        Cmd::CompileInn { input, common } => {
            let prog: InnProgram = read_json(&input)?;
            let domain = parse_box(common.domain.as_deref(), prog.d)?;
            let out = compile_inn(&prog, &domain, common.tol)?;
            write_network(&out.network, common.output.as_deref())?;
            let grid = common.grid.unwrap_or(default_grid(prog.d));
            let mut rep = measure(&out.network, |x| prog.eval(x), &domain, grid, common.tol, common.seed)?;
            rep.per_stage_errors = out.budgets;
            rep
        }
        Cmd::CompileSct { spec, slices, table, common } => {
            let spec: SctSpec = read_json(&spec)?;
            let d = spec.d;
            let domain = parse_box(common.domain.as_deref(), d)?;
            let tau = spec.tau.clone();
            if let TauSpec::Network(n) = &tau {
                n.validate()?;
            }
            let oracle = SctOracle::new(d, move |x| match &tau {
                TauSpec::Ridge(r) => r.eval(x),
                TauSpec::Network(n) => n.evaluate(x).map(|y| y[d - 1]).unwrap_or(f64::NAN),
                TauSpec::Pwl(f) => f.eval(x[d - 1]),
            });
            let opts = SctOptions { fit: narrowforge::coupling::FitOptions { seed: common.seed, ..Default::default() }, ..Default::default() };
            let out = compile_sct_with(&oracle, &domain, slices, common.tol, &opts)?;
            write_network(&out.network, common.output.as_deref())?;
            if let Some(path) = table {
                fs::write(path, serde_json::to_string_pretty(&out.table)? + "\n")?;
            }
            // Only the slices are matched within tol; the report carries the
            // worst slice error and the measured gap to τ between slices.
            let slice_err = out.slice_errors.iter().cloned().fold(0.0, f64::max);
            let grid = common.grid.unwrap_or(default_grid(d));
            let mut rep = measure(&out.network, |x| oracle.eval(x), &domain, grid, common.tol, common.seed)?;
            rep.within_tol = Some(slice_err <= common.tol);
            rep.per_stage_errors = out.slice_errors;
            rep
        }
        Cmd::CompilePipeline { input, activation, common } => {
            let target: DiffeoTarget = read_json(&input)?;
            let cls: ActivationClass = activation.parse()?;
            let domain = parse_box(common.domain.as_deref(), target.n)?;
            let out = compile_pipeline(&target, &cls, &domain, common.tol)?;
            write_network(&out.network, common.output.as_deref())?;
            let grid = common.grid.unwrap_or(default_grid(target.n));
            measure(&out.network, |x| target.eval(x), &domain, grid, common.tol, common.seed)?
        }
        Cmd::Verify { network, oracle, common } => {
            let net = Network::from_json(&fs::read_to_string(&network)?)?;
            let oracle: Oracle = read_json(&oracle)?;
            if oracle.input_dim() != net.input_dim {
                return Err(Error::Dimension { layer: 0, expected: net.input_dim, got: oracle.input_dim() });
            }
            let domain = parse_box(common.domain.as_deref(), net.input_dim)?;
            let grid = common.grid.unwrap_or(default_grid(net.input_dim));
            measure(&net, |x| oracle.eval(x), &domain, grid, common.tol, common.seed)?
        }
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(report.within_tol.unwrap_or(false))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
