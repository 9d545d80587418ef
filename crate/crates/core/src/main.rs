use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pucci_kac::bench::{convergence_study, run, write_outputs, Knob, RunError};
use pucci_kac::config::{load_config, to_canonical_toml, DEFAULTS_TEXT};

#[derive(Parser)]
#[command(name = "pucci-kac", version, about = "Solve 1/2 P+(D^2 u) + f = 0 with Dirichlet data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the solver described by a config file.
    Solve {
        /// TOML config; optional with --print-defaults.
        config: Option<PathBuf>,
        /// Worker threads (overrides PUCCI_KAC_THREADS and solver.threads).
        #[arg(long)]
        threads: Option<usize>,
        /// Print every key with its default (and the resolved config, if
        /// one is given), then exit.
        #[arg(long)]
        print_defaults: bool,
        /// Refinement study, e.g. `h=0.1,0.05,0.025`.
        #[arg(long, value_name = "KNOB=A,B,C")]
        study: Option<String>,
    },
}

fn parse_study(s: &str) -> Result<(Knob, Vec<f64>), String> {
    let (name, values) = s
        .split_once('=')
        .ok_or_else(|| format!("--study expects knob=a,b,c (got `{s}`)"))?;
    let knob = Knob::parse(name.trim()).ok_or_else(|| format!("unknown study knob `{name}` (dt, h, n_paths)"))?;
    let ladder = values
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| format!("bad ladder value `{v}`")))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((knob, ladder))
}

fn threads_from_env() -> Result<Option<usize>, String> {
    match std::env::var("PUCCI_KAC_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(format!("PUCCI_KAC_THREADS must be a positive integer (got `{v}`)")),
        },
        Err(_) => Ok(None),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Command::Solve {
        config,
        threads,
        print_defaults,
        study,
    } = cli.command;

    if print_defaults {
        print!("{DEFAULTS_TEXT}");
        if let Some(path) = &config {
            match load_config(path) {
                Ok((spec, cfg)) => {
                    println!("\n# resolved: {}", path.display());
                    print!("{}", to_canonical_toml(&spec, &cfg));
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(1);
                }
            }
        }
        return ExitCode::SUCCESS;
    }
    let Some(path) = config else {
        eprintln!("error: a config file is required");
        return ExitCode::from(1);
    };
    let (spec, cfg) = match load_config(&path) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let study = match study.as_deref().map(parse_study).transpose() {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let env_threads = match threads_from_env() {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let n_threads = threads.or(env_threads).or(cfg.threads);
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = n_threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        builder = builder.num_threads(n);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::from(1);
        }
    };

    let result: Result<i32, RunError> = pool.install(|| {
        if let Some((knob, ladder)) = &study {
            let table = convergence_study(&spec, &cfg, *knob, ladder)?;
            std::fs::create_dir_all(&cfg.output).map_err(|source| RunError::Io {
                path: cfg.output.display().to_string(),
                source,
            })?;
            let path = cfg.output.join("study.csv");
            let mut buf = Vec::new();
            table.write_csv(&mut buf).expect("in-memory write");
            std::fs::write(&path, &buf).map_err(|source| RunError::Io {
                path: path.display().to_string(),
                source,
            })?;
            print!("{}", String::from_utf8_lossy(&buf));
            return Ok(0);
        }
        let outcome = run(&spec, &cfg)?;
        write_outputs(&spec, &cfg, &outcome)?;
        print!("{}", outcome.report);
        Ok(outcome.exit_code())
    });
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
