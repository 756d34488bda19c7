use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context};
use clap::{ArgAction, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use msfem::analysis::{coarse_size, resonance_risk, run_solve, run_study, FitVariable, SolveOutcome, StudyConfig};
use msfem::cell::{homogenized_tensor, solve_corrector};
use msfem::coeff::{check_ellipticity, check_ellipticity_random, CoefficientField, DIM};
use msfem::config::{canonical_json, load_config, CellConfig, SolveConfig};
use msfem::mesh::RefinedGrid;
use msfem::msfem::{broken_h1_norm, fine_h, jump_seminorm, prolongate};

#[derive(Parser, Debug)]
#[command(name = "msfem", version, about = "Multiscale finite element experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (TOML, or JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for studies.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Basis cache directory.
    #[arg(long, global = true, env = "MSFEM_CACHE")]
    cache: Option<PathBuf>,
    /// Seed for random-direction ellipticity sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Skip SVG plots.
    #[arg(long, global = true)]
    no_plot: bool,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Solve the cell problems and print the homogenized tensor.
    Cell,
    /// Solve one multiscale problem.
    Solve,
    /// Run a convergence study.
    Study,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Cell => "cell",
            Command::Solve => "solve",
            Command::Study => "study",
        }
    }
}

/// How a command ended, mapped onto exit codes 2, 1 and 1.
#[derive(Debug)]
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
    Partial(Vec<String>),
}

type CmdResult<T> = std::result::Result<T, Failure>;

fn usage<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Usage(e.into())
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}

#[derive(Serialize)]
struct RunManifest {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    config_path: String,
    config_hash: String,
    started_unix: f64,
    finished_unix: f64,
    seed: Option<u64>,
    workers: usize,
    cache: Option<String>,
    inputs: Vec<serde_json::Value>,
    outputs: Vec<String>,
}

struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> CmdResult<Self> {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("cannot create output directory {}", dir.display()))
            .map_err(usage)?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> CmdResult<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, contents)
            .with_context(|| format!("cannot write {}", path.display()))
            .map_err(runtime)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn write_json(&mut self, name: &str, value: &impl Serialize) -> CmdResult<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(runtime)?;
        text.push('\n');
        self.write(name, text)
    }
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn config_path(cli: &Cli) -> CmdResult<&Path> {
    cli.config
        .as_deref()
        .ok_or_else(|| usage(anyhow!("--config <path> is required for `{}`", cli.command.name())))
}

fn config_hash(path: &Path) -> CmdResult<String> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))
        .map_err(usage)?;
    let canon = canonical_json(&text, path.extension().and_then(|e| e.to_str())).map_err(usage)?;
    Ok(Sha256::digest(canon.as_bytes()).iter().map(|b| format!("{b:02x}")).collect())
}

fn build_field(descriptor: &msfem::coeff::FieldDescriptor) -> CmdResult<CoefficientField> {
    descriptor.build().context("invalid coefficient field").map_err(usage)
}

/// Compact number for stdout rows: ten significant digits, tiny values as 0.
fn fmt_num(x: f64) -> String {
    if x.abs() < 1e-12 {
        return "0".into();
    }
    let r: f64 = format!("{x:.9e}").parse().unwrap_or(x);
    format!("{r}")
}

fn cmd_cell(cli: &Cli, out: &mut Outputs, inputs: &mut Vec<serde_json::Value>) -> CmdResult<()> {
    let mut cfg: CellConfig = load_config(config_path(cli)?).map_err(usage)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    inputs.push(serde_json::to_value(&cfg.field).map_err(runtime)?);
    let field = build_field(&cfg.field)?;
    let grid_bounds = check_ellipticity(&field, cfg.ellipticity_samples, 16).map_err(usage)?;
    let random_bounds =
        check_ellipticity_random(&field, cfg.ellipticity_samples, 16, cfg.seed).map_err(usage)?;
    let chi = solve_corrector(&field, cfg.n_cell).map_err(runtime)?;
    let hat = homogenized_tensor(&field, &chi).map_err(runtime)?;
    let m = field.m();

    out.write("correctors.csv", chi.to_csv())?;
    out.write("a_hat.csv", hat.to_csv())?;
    let first = chi.to_fe_function(0, 0).map_err(runtime)?;
    out.write("cell_mesh.msh", first.mesh.to_msh2())?;
    let mut nodal = String::from("vertex");
    for j in 0..DIM {
        for b in 0..m {
            for g in 0..m {
                nodal.push_str(&format!(",chi_{}_{}_{}", j + 1, b + 1, g + 1));
            }
        }
    }
    nodal.push('\n');
    let funcs = (0..DIM)
        .flat_map(|j| (0..m).map(move |b| (j, b)))
        .map(|(j, b)| chi.to_fe_function(j, b))
        .collect::<Result<Vec<_>, _>>()
        .map_err(runtime)?;
    for v in 0..first.mesh.n_vertices() {
        nodal.push_str(&v.to_string());
        for f in &funcs {
            for g in 0..m {
                nodal.push_str(&format!(",{:.12e}", f.values[v * m + g]));
            }
        }
        nodal.push('\n');
    }
    out.write("chi_nodal.csv", nodal)?;
    let grad_l2: Vec<Vec<f64>> = (0..DIM).map(|j| (0..m).map(|b| chi.grad_l2(j, b)).collect()).collect();
    out.write_json(
        "diagnostics.json",
        &serde_json::json!({
            "n_cell": cfg.n_cell,
            "m": m,
            "residual": chi.residual,
            "iterations": chi.iterations,
            "ellipticity_grid": { "lambda": grid_bounds.lambda, "big_lambda": grid_bounds.big_lambda },
            "ellipticity_random": { "lambda": random_bounds.lambda, "big_lambda": random_bounds.big_lambda, "seed": cfg.seed },
            "grad_l2": grad_l2,
            "max_abs": chi.max_abs(),
            "a_hat_symmetric": hat.tensor.is_symmetric(1e-8),
            "a_hat": hat.tensor,
        }),
    )?;
    let dm = hat.tensor.dm();
    let entries: Vec<String> = (0..dm * dm).map(|k| fmt_num(hat.tensor.at(k / dm, k % dm))).collect();
    println!("a_hat {}", entries.join(" "));
    Ok(())
}

fn cmd_solve(cli: &Cli, out: &mut Outputs, inputs: &mut Vec<serde_json::Value>) -> CmdResult<()> {
    let mut cfg: SolveConfig = load_config(config_path(cli)?).map_err(usage)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    inputs.push(serde_json::to_value(&cfg.field).map_err(runtime)?);
    let field = build_field(&cfg.field)?;
    check_ellipticity_random(&field, 32, 16, cfg.seed).map_err(usage)?;
    cfg.domain.validate().map_err(usage)?;
    coarse_size(cfg.domain, cfg.h).map_err(usage)?;
    if !(cfg.eps > 0.0) {
        return Err(usage(anyhow!("eps must be positive, got {}", cfg.eps)));
    }
    if resonance_risk(cfg.h, cfg.eps) {
        log::warn!(
            "resonance: h = {} is comparable to eps = {} (h/eps = {:.3}); the eps/h error term dominates here",
            cfg.h,
            cfg.eps,
            cfg.h / cfg.eps
        );
    }
    let SolveOutcome {
        n,
        basis,
        system,
        solution: sol,
    } = run_solve(&cfg, cli.cache.as_deref()).map_err(runtime)?;
    let coarse = basis.coarse.clone();

    out.write("coarse_mesh.msh", coarse.to_msh2())?;
    let m = basis.m;
    let mut csv = String::from("vertex,x,y");
    for c in 0..m {
        csv.push_str(&format!(",u{}", c + 1));
    }
    csv.push('\n');
    for (v, x) in coarse.vertices().iter().enumerate() {
        csv.push_str(&format!("{v},{},{}", x[0], x[1]));
        for c in 0..m {
            csv.push_str(&format!(",{:.12e}", sol.coefficients[v * m + c]));
        }
        csv.push('\n');
    }
    out.write("coarse_solution.csv", csv)?;
    let mut mtx = Vec::new();
    system.reduced_matrix().write_matrix_market(&mut mtx).map_err(runtime)?;
    out.write("system.mtx", mtx)?;
    if cfg.write_fine {
        let grid = RefinedGrid::new(cfg.domain, n << basis.levels).map_err(runtime)?;
        let fine = prolongate(&sol, &basis, &grid).map_err(runtime)?;
        out.write("fine_mesh.msh", grid.mesh.to_msh2())?;
        let mut csv = String::from("vertex");
        for c in 0..m {
            csv.push_str(&format!(",u{}", c + 1));
        }
        csv.push('\n');
        for v in 0..grid.mesh.n_vertices() {
            csv.push_str(&v.to_string());
            for c in 0..m {
                csv.push_str(&format!(",{:.12e}", fine.values[v * m + c]));
            }
            csv.push('\n');
        }
        out.write("fine_solution.csv", csv)?;
    }
    let jump = jump_seminorm(&sol, &basis).map_err(runtime)?;
    out.write_json(
        "solve_report.json",
        &serde_json::json!({
            "report": sol.report,
            "mode": cfg.mode,
            "h": cfg.h,
            "eps": cfg.eps,
            "n": n,
            "levels": basis.levels,
            "fine_h": fine_h(&basis),
            "dofs": basis.n_dofs(),
            "local_iterations": basis.total_local_iterations(),
            "basis_key": basis.key,
            "broken_h1_norm": broken_h1_norm(&sol, &basis),
            "jump_seminorm": jump,
            "resonance_risk": resonance_risk(cfg.h, cfg.eps),
        }),
    )?;
    println!(
        "solved {} h={} eps={}: {} coarse dofs, {} iterations, residual {:.2e}",
        cfg.mode.as_str(),
        cfg.h,
        cfg.eps,
        basis.n_dofs(),
        sol.report.iterations,
        sol.report.residual
    );
    Ok(())
}

fn cmd_study(cli: &Cli, out: &mut Outputs, inputs: &mut Vec<serde_json::Value>) -> CmdResult<()> {
    let mut cfg: StudyConfig = load_config(config_path(cli)?).map_err(usage)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    inputs.push(serde_json::to_value(&cfg.field).map_err(runtime)?);
    cfg.validate().map_err(usage)?;
    let field = build_field(&cfg.field)?;
    check_ellipticity_random(&field, 32, 16, cfg.seed).map_err(usage)?;
    let report = run_study(&cfg, cli.workers, cli.cache.as_deref()).map_err(runtime)?;
    out.write("study.csv", report.to_csv())?;
    out.write_json("summary.json", &report.summary_json())?;
    out.write_json("report.json", &report)?;
    if !cli.no_plot {
        for (name, svg) in report.plots() {
            out.write(&name, svg)?;
        }
    }
    for f in &report.fits {
        println!(
            "slope {} {} vs {}: {:.3} (residual {:.3}, {} points)",
            f.mode.as_str(),
            f.norm.as_str(),
            match f.variable {
                FitVariable::H => "h",
                FitVariable::Eps => "eps",
            },
            f.slope,
            f.residual,
            f.points
        );
    }
    println!("resonance {}", report.resonance);
    if report.complete {
        Ok(())
    } else {
        Err(Failure::Partial(
            report
                .failures
                .iter()
                .map(|f| format!("h={} eps={} {}: {}", f.h, f.eps, f.mode.as_str(), f.message))
                .collect(),
        ))
    }
}

fn run(cli: &Cli) -> CmdResult<()> {
    let started = now();
    let mut out = Outputs::new(&cli.out)?;
    let path = config_path(cli)?;
    let hash = config_hash(path)?;
    let mut inputs = vec![serde_json::json!({ "config": path.display().to_string() })];
    let result = match cli.command {
        Command::Cell => cmd_cell(cli, &mut out, &mut inputs),
        Command::Solve => cmd_solve(cli, &mut out, &mut inputs),
        Command::Study => cmd_study(cli, &mut out, &mut inputs),
    };
    if matches!(result, Err(Failure::Usage(_))) {
        return result;
    }
    let mut outputs = out.files.clone();
    outputs.push("manifest.json".into());
    let manifest = RunManifest {
        tool: "msfem",
        version: env!("CARGO_PKG_VERSION"),
        command: cli.command.name(),
        config_path: path.display().to_string(),
        config_hash: hash,
        started_unix: started,
        finished_unix: now(),
        seed: cli.seed,
        workers: cli.workers,
        cache: cli.cache.as_ref().map(|p| p.display().to_string()),
        inputs,
        outputs,
    };
    out.write_json("manifest.json", &manifest)?;
    result
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Partial(list)) => {
            eprintln!("error: {} study cells failed:", list.len());
            for l in list {
                eprintln!("  {l}");
            }
            ExitCode::from(1)
        }
    }
}
