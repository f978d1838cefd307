//! `piwo` — verification suites, semi-supervised experiments, and plots.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use piwo_cli::manifest::{ExperimentManifest, Preset, ENV_PREFIX};
use piwo_cli::plot::plot_run_dir;
use piwo_cli::runner::run_experiment;
use piwo_cli::verify::run_suites;
use piwo_cli::{EXIT_OK, EXIT_USAGE, EXIT_VERIFY_FAILED};

const USAGE: &str = "\
piwo — semi-supervised variational objectives workbench

USAGE:
    piwo verify <identities|bounds|gradients|all> [--fixture <path>] [--report <path>]
    piwo run --manifest <path> [--seed <u64>] [--jobs <n>] [--out <dir>] [--preset <desk|paper>]
    piwo plot --run-dir <dir>
    piwo help

Environment overrides (flags take precedence): PIWO_SEED, PIWO_JOBS,
PIWO_OUT, PIWO_PRESET.

Exit codes: 0 success, 1 verification/assertion failure, 2 usage or
configuration error.";

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let code = match args.first().map(String::as_str) {
        Some("verify") => cmd_verify(&args[1..]),
        Some("run") => cmd_run(&args[1..]),
        Some("plot") => cmd_plot(&args[1..]),
        Some("help") | Some("--help") | Some("-h") => {
            println!("{USAGE}");
            EXIT_OK
        }
        Some(other) => {
            eprintln!("unknown command {other:?}\n\n{USAGE}");
            EXIT_USAGE
        }
        None => {
            eprintln!("{USAGE}");
            EXIT_USAGE
        }
    };
    ExitCode::from(code as u8)
}

/// Pull `--flag value` out of an argument list.
fn take_flag(args: &mut Vec<String>, flag: &str) -> Result<Option<String>, String> {
    if let Some(pos) = args.iter().position(|a| a == flag) {
        if pos + 1 >= args.len() {
            return Err(format!("{flag} needs a value"));
        }
        let value = args.remove(pos + 1);
        args.remove(pos);
        Ok(Some(value))
    } else {
        Ok(None)
    }
}

fn cmd_verify(args: &[String]) -> i32 {
    let mut args = args.to_vec();
    let fixture = match take_flag(&mut args, "--fixture") {
        Ok(v) => v.map(PathBuf::from),
        Err(e) => {
            eprintln!("{e}");
            return EXIT_USAGE;
        }
    };
    let report_path = match take_flag(&mut args, "--report") {
        Ok(v) => v.map(PathBuf::from),
        Err(e) => {
            eprintln!("{e}");
            return EXIT_USAGE;
        }
    };
    let suite = match args.as_slice() {
        [s] => s.clone(),
        _ => {
            eprintln!("verify needs exactly one suite\n\n{USAGE}");
            return EXIT_USAGE;
        }
    };
    let started = Instant::now();
    let reports = match run_suites(&suite, fixture.as_deref()) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{e}");
            return EXIT_USAGE;
        }
    };
    let mut tsv = String::new();
    for report in &reports {
        tsv.push_str(&report.to_tsv());
        print!("{}", report.to_tsv());
    }
    if let Some(path) = report_path {
        if let Err(e) = piwo_cli::formats::write_atomic(&path, tsv.as_bytes()) {
            eprintln!("failed to write report: {e}");
            return EXIT_USAGE;
        }
    }
    println!("verify {suite}: {:.1}s", started.elapsed().as_secs_f64());
    for report in &reports {
        if let Some(first) = report.first_failure() {
            eprintln!(
                "FAIL {}::{} — {}",
                report.suite, first.name, first.detail
            );
            return EXIT_VERIFY_FAILED;
        }
    }
    EXIT_OK
}

fn cmd_run(args: &[String]) -> i32 {
    let mut args = args.to_vec();
    let get = |args: &mut Vec<String>, flag: &str| -> Result<Option<String>, String> {
        take_flag(args, flag)
    };
    let manifest_path = match get(&mut args, "--manifest") {
        Ok(Some(p)) => PathBuf::from(p),
        Ok(None) => {
            eprintln!("run requires --manifest <path>\n\n{USAGE}");
            return EXIT_USAGE;
        }
        Err(e) => {
            eprintln!("{e}");
            return EXIT_USAGE;
        }
    };
    let mut overrides = Vec::with_capacity(4);
    for flag in ["--seed", "--jobs", "--out", "--preset"] {
        match get(&mut args, flag) {
            Ok(v) => overrides.push(v),
            Err(e) => {
                eprintln!("{e}");
                return EXIT_USAGE;
            }
        }
    }
    if !args.is_empty() {
        eprintln!("unexpected arguments {args:?}\n\n{USAGE}");
        return EXIT_USAGE;
    }
    let text = match std::fs::read_to_string(&manifest_path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("cannot read manifest {}: {e}", manifest_path.display());
            return EXIT_USAGE;
        }
    };
    let mut manifest = match ExperimentManifest::parse(&text) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("{e}");
            return EXIT_USAGE;
        }
    };
    // Flags override both the manifest and PIWO_* environment values.
    let mut it = overrides.into_iter();
    let (seed, jobs, out, preset) = (
        it.next().flatten(),
        it.next().flatten(),
        it.next().flatten(),
        it.next().flatten(),
    );
    if let Some(seed) = seed {
        match seed.parse() {
            Ok(s) => manifest.train.seed = s,
            Err(_) => {
                eprintln!("bad --seed {seed:?}");
                return EXIT_USAGE;
            }
        }
    }
    if let Some(jobs) = jobs {
        match jobs.parse() {
            Ok(j) => manifest.jobs = j,
            Err(_) => {
                eprintln!("bad --jobs {jobs:?}");
                return EXIT_USAGE;
            }
        }
    }
    if let Some(out) = out {
        manifest.out = PathBuf::from(out);
    }
    if let Some(preset) = preset {
        match Preset::parse(&preset) {
            Ok(p) => manifest.preset = p,
            Err(e) => {
                eprintln!("{e}");
                return EXIT_USAGE;
            }
        }
    }
    let _ = ENV_PREFIX;

    let started = Instant::now();
    match run_experiment(&manifest) {
        Ok(summary) => {
            for cell in &summary.cells {
                match &cell.status {
                    Ok(s) => println!(
                        "{:<6} rate {:<8} mean {:.4} (std {:.4}) log10(alpha) {:.2}",
                        cell.flavor.name(),
                        cell.rate,
                        s.mean_accuracy,
                        s.std_accuracy,
                        s.mean_log10_alpha
                    ),
                    Err(e) => println!("{:<6} rate {:<8} ERROR {e}", cell.flavor.name(), cell.rate),
                }
            }
            println!(
                "run complete in {:.1}s — outputs in {}",
                started.elapsed().as_secs_f64(),
                summary.out.display()
            );
            if summary.cells.is_empty() || summary.any_ok() {
                EXIT_OK
            } else {
                EXIT_VERIFY_FAILED
            }
        }
        Err(e) => {
            eprintln!("{e}");
            EXIT_USAGE
        }
    }
}

fn cmd_plot(args: &[String]) -> i32 {
    let mut args = args.to_vec();
    let dir = match take_flag(&mut args, "--run-dir") {
        Ok(Some(d)) => PathBuf::from(d),
        Ok(None) => {
            eprintln!("plot requires --run-dir <dir>\n\n{USAGE}");
            return EXIT_USAGE;
        }
        Err(e) => {
            eprintln!("{e}");
            return EXIT_USAGE;
        }
    };
    if !args.is_empty() {
        eprintln!("unexpected arguments {args:?}\n\n{USAGE}");
        return EXIT_USAGE;
    }
    match plot_run_dir(&dir) {
        Ok(files) => {
            for f in files {
                println!("wrote {}", dir.join(f).display());
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("{e}");
            EXIT_USAGE
        }
    }
}
