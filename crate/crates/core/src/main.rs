use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use chordal_sdp::error::{Error, Result};
use chordal_sdp::harness::{
    generate, parse_switch, read_record_dir, run_local, run_noise_study, run_relaxation, run_timing_study,
    summarize_noise, write_metadata, write_report, ExperimentConfig, Instance, Problem, SolverKind,
};

#[derive(Parser)]
#[command(name = "chordal-sdp", version, about = "Certifiable localization via chordal SDP relaxations")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Base random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file (generate) or directory (studies, report).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Redundant constraints for the MW lifting: on or off.
    #[arg(long, global = true, value_parser = parse_on_off)]
    redundant: Option<bool>,
    /// Interior-point tolerance.
    #[arg(long, global = true)]
    tol: Option<f64>,
}

fn parse_on_off(s: &str) -> std::result::Result<bool, String> {
    parse_switch(s).map_err(|e| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Write one instance as JSON.
    Generate(InstanceArgs),
    /// Solve one instance with one solver and print a JSON line.
    Solve {
        #[command(flatten)]
        inst: InstanceArgs,
        #[arg(long, default_value = "dsdp")]
        solver: SolverKind,
        /// Load the instance from a JSON file instead of generating it.
        #[arg(long)]
        instance: Option<PathBuf>,
    },
    /// Timing sweep over the configured sizes.
    Timing {
        #[arg(long)]
        problem: Option<Problem>,
    },
    /// Noise sweep over the configured noise levels.
    Noise {
        #[arg(long)]
        problem: Option<Problem>,
    },
    /// Turn record CSVs in a directory into plot-ready TSV series.
    Report {
        /// Directory holding the record CSVs.
        input: PathBuf,
    },
}

#[derive(Args)]
struct InstanceArgs {
    #[arg(long, default_value = "ctro")]
    problem: Problem,
    #[arg(long, default_value_t = 4)]
    n: usize,
    #[arg(long, default_value_t = 8)]
    n_landmarks: usize,
    /// Range noise for CT-RO, pixel noise for MW; defaults per problem.
    #[arg(long)]
    noise: Option<f64>,
}

fn load_config(g: &Global, problem: Option<Problem>) -> Result<ExperimentConfig> {
    let mut c = match &g.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::defaults(problem.unwrap_or(Problem::Ctro)),
    };
    if let Some(p) = problem {
        if p != c.problem {
            let keep = c.clone();
            c = ExperimentConfig::defaults(p);
            c.solvers = keep.solvers;
            c.n_seeds = keep.n_seeds;
            c.solver = keep.solver;
            c.admm = keep.admm;
            c.gn = keep.gn;
        }
    }
    if let Some(s) = g.seed {
        c.seed = s;
    }
    if let Some(r) = g.redundant {
        c.redundant = r;
    }
    if let Some(t) = g.tol {
        c.solver.tol = t;
    }
    if let Some(o) = &g.out {
        c.out_dir = o.clone();
    }
    c.validate()?;
    Ok(c)
}

fn make_instance(a: &InstanceArgs, seed: u64) -> Result<Instance> {
    generate(a.problem, a.n, a.n_landmarks, a.noise, seed)
}

fn solve_one(instance: &Instance, solver: SolverKind, config: &ExperimentConfig) -> Result<serde_json::Value> {
    let rec = match solver {
        SolverKind::Local | SolverKind::LocalGt => {
            run_local(instance, solver == SolverKind::LocalGt, config.seed, &config.gn)?.0
        }
        _ => run_relaxation(instance, solver, config)?.record,
    };
    Ok(json!({
        "problem": rec.problem,
        "solver": rec.solver,
        "N": rec.n,
        "N_m": rec.n_m,
        "seed": rec.seed,
        "objective": rec.objective,
        "evr": rec.evr,
        "accuracy": { "pos_rmse": rec.pos_rmse, "rot_rmse": rec.rot_rmse },
        "time_s": rec.wall_time_s,
        "assembly_time_s": rec.assembly_time_s,
        "iterations": rec.iterations,
        "status": rec.status,
    }))
}

fn study(config: &ExperimentConfig, name: &str) -> Result<()> {
    let dir = &config.out_dir;
    let csv = dir.join(format!("{name}_{}.csv", config.problem));
    write_metadata(&dir.join(format!("{name}_{}_metadata.json", config.problem)), name, config)?;
    let recs = match name {
        "timing" => run_timing_study(config, Some(&csv))?,
        _ => run_noise_study(config, Some(&csv))?,
    };
    eprintln!("{} records written to {}", recs.len(), csv.display());
    if name == "noise" {
        for s in summarize_noise(&recs) {
            println!("{}", serde_json::to_string(&s)?);
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Generate(a) => {
            let inst = make_instance(a, g.seed.unwrap_or(0))?;
            let text = inst.to_json()?;
            match &g.out {
                Some(p) => std::fs::write(p, text)?,
                None => println!("{text}"),
            }
        }
        Command::Solve { inst, solver, instance } => {
            let instance = match instance {
                Some(p) => Instance::from_json(&std::fs::read_to_string(p)?)?,
                None => make_instance(inst, g.seed.unwrap_or(0))?,
            };
            let config = load_config(g, Some(instance.problem()))?;
            println!("{}", solve_one(&instance, *solver, &config)?);
        }
        Command::Timing { problem } => study(&load_config(g, *problem)?, "timing")?,
        Command::Noise { problem } => study(&load_config(g, *problem)?, "noise")?,
        Command::Report { input } => {
            let recs = read_record_dir(input)?;
            if recs.is_empty() {
                return Err(Error::InvalidConfig(format!("no records under {}", input.display())));
            }
            let out = g.out.clone().unwrap_or_else(|| input.join("plots"));
            for p in write_report(&recs, Path::new(&out))? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
