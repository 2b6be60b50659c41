use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dlnet::synthdata::{generate, write_dataset};
use dlnet::trainer::{evaluate_checkpoint, gradcheck_suite, run, Precision, Scaling, TrainConfig};
use dlnet::{linattn, Error, Result};

/// Self-supervised monocular depth with linear-attention networks.
#[derive(Parser, Debug)]
#[command(name = "dlnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset of three-frame sequences.
    Gen {
        #[arg(long, default_value_t = 200)]
        scenes: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// WIDTHxHEIGHT
        #[arg(long, default_value = "128x64")]
        resolution: String,
    },
    /// Train the depth and pose networks.
    Train {
        /// Flat `key = value` file; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        precision: Option<Precision>,
        /// Start from the full-scale schedule and resolution instead of the desk defaults.
        #[arg(long)]
        full_scale: bool,
        #[arg(long)]
        resume: bool,
        /// Extra `key=value` overrides, applied last.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Score a checkpoint against ground-truth depth.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "median")]
        scaling: Scaling,
    },
    /// Time full against linear attention over sequence lengths; prints CSV.
    BenchAttn {
        #[arg(long, value_delimiter = ',', default_value = "1024,2048,4096")]
        n_list: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        k_proj: usize,
        #[arg(long, default_value_t = 64)]
        d: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite in 64-bit precision.
    Gradcheck,
}

fn parse_resolution(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("resolution `{s}` is not WIDTHxHEIGHT"));
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((w.trim().parse().map_err(|_| bad())?, h.trim().parse().map_err(|_| bad())?))
}

fn print_json<S: serde::Serialize>(v: &S) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn execute(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Gen {
            scenes,
            out,
            seed,
            resolution,
        } => {
            let (w, h) = parse_resolution(&resolution)?;
            let seqs = generate(scenes, seed, h, w)?;
            write_dataset(&seqs, &out)?;
            eprintln!("wrote {} sequences at {w}x{h} to {}", seqs.len(), out.display());
        }
        Command::Train {
            config,
            data,
            eval_data,
            out,
            seed,
            precision,
            full_scale,
            resume,
            overrides,
        } => {
            let mut cfg = if full_scale { TrainConfig::full_scale() } else { TrainConfig::default() };
            if let Some(path) = config {
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
                cfg.apply_text(&text)?;
            }
            if let Some(d) = data {
                cfg.data = Some(d);
            }
            if let Some(d) = eval_data {
                cfg.eval_data = Some(d);
            }
            if let Some(o) = out {
                cfg.out = o;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(p) = precision {
                cfg.precision = p;
            }
            cfg.resume |= resume;
            for kv in &overrides {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("override `{kv}` is not KEY=VALUE")))?;
                cfg.set(k.trim(), v)?;
            }
            let outcome = run(&cfg)?;
            print_json(&outcome)?;
        }
        Command::Eval {
            checkpoint,
            data,
            scaling,
        } => print_json(&evaluate_checkpoint(&checkpoint, &data, scaling)?)?,
        Command::BenchAttn {
            n_list,
            k_proj,
            d,
            repeats,
            seed,
            out,
        } => {
            let rows = linattn::benchmark(&n_list, k_proj, d, repeats, seed)?;
            let mut csv = String::from("n,k_proj,d,sdpa_median_s,sdpla_median_s,sdpa_peak,sdpla_peak,peak_ratio\n");
            for r in &rows {
                csv.push_str(&format!(
                    "{},{},{},{:e},{:e},{},{},{}\n",
                    r.n,
                    r.k_proj,
                    r.d,
                    r.sdpa_median_s,
                    r.sdpla_median_s,
                    r.sdpa_peak,
                    r.sdpla_peak,
                    r.sdpla_peak as f64 / r.sdpa_peak as f64
                ));
            }
            print!("{csv}");
            std::io::stdout().flush()?;
            if let Some(path) = out {
                std::fs::write(path, csv)?;
            }
        }
        Command::Gradcheck => {
            let results = gradcheck_suite()?;
            let failed = results.iter().filter(|r| !r.passed).count();
            for r in &results {
                println!("{:<56} {:>10.3e}  {}", r.name, r.error, if r.passed { "ok" } else { "FAIL" });
            }
            println!("{} checks, {failed} failed", results.len());
            return Ok(failed == 0);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    dlnet::tune_allocator();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(4),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
