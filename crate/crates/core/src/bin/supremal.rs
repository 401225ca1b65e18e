use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use supremal::scenario::{self, ScenarioConfig};

#[derive(Parser)]
#[command(name = "supremal", version, about = "p-harmonic continuation lab for vector-valued supremal problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario from a TOML file or a preset name.
    Run {
        /// Path to a TOML config, or the name of a preset.
        config: String,
        /// Write nodal fields for every stage.
        #[arg(long)]
        fields: bool,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the mesh size.
        #[arg(long)]
        h: Option<f64>,
        /// Override the largest exponent of the doubling schedule.
        #[arg(long)]
        p_max: Option<f64>,
        /// Worker threads (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// List the built-in presets.
    Presets {
        /// Print the full TOML of one preset.
        #[arg(long)]
        show: Option<String>,
    },
    /// Re-verify a stored run from its manifest.
    Check { manifest: PathBuf },
}

fn load(config: &str) -> supremal::error::Result<ScenarioConfig> {
    let path = PathBuf::from(config);
    if path.exists() {
        ScenarioConfig::load(&path)
    } else {
        scenario::preset(config)
    }
}

fn print_checks(checks: &[scenario::Check]) {
    for c in checks {
        let value = c.value.map_or("n/a".to_string(), |v| format!("{v:.3e}"));
        println!(
            "{} {:<28} value {:>11} limit {:>10.3e}  {}",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            value,
            c.limit,
            c.detail
        );
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Presets { show: Some(name) } => match scenario::preset(&name).and_then(|c| c.to_toml()) {
            Ok(text) => {
                print!("{text}");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::FAILURE
            }
        },
        Command::Presets { show: None } => {
            for p in scenario::list_presets() {
                println!("{:<16} N={}  {:<40} {}", p.name, p.n, p.domain, p.reproduces);
            }
            ExitCode::SUCCESS
        }
        Command::Run {
            config,
            fields,
            out,
            h,
            p_max,
            threads,
        } => {
            if let Some(n) = threads {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("error: {e}");
                    return ExitCode::FAILURE;
                }
            }
            let mut cfg = match load(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::FAILURE;
                }
            };
            cfg.write_fields |= fields;
            if out.is_some() {
                cfg.out_dir = out;
            }
            if let Some(h) = h {
                cfg.h = h;
            }
            if let Some(p) = p_max {
                cfg.schedule.p_list = None;
                cfg.schedule.p_max = Some(p);
            }
            match scenario::run_scenario(&cfg) {
                Ok(run) => {
                    for s in &run.stages {
                        println!(
                            "p = {:>7}  e_p = {:.10}  E_inf = {:.10}  newton {:>3}  residual {:.2e}",
                            s.record.p, s.record.e_p, s.record.e_inf, s.record.newton_iterations, s.record.residual
                        );
                    }
                    print_checks(&run.manifest.checks);
                    println!("output: {}", run.manifest.out_dir.display());
                    if run.manifest.pass {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::FAILURE
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::FAILURE
                }
            }
        }
        Command::Check { manifest } => match scenario::check(&manifest) {
            Ok(outcome) => {
                print_checks(&outcome.checks);
                for f in &outcome.missing_files {
                    println!("MISSING {f}");
                }
                if !outcome.consistent {
                    println!("recomputed checks differ from the stored manifest");
                }
                if outcome.pass {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::FAILURE
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::FAILURE
            }
        },
    }
}
