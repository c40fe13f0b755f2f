use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use mcfqkd::commands::{self, Context, Figure, Overrides};
use mcfqkd::config::RunConfig;

/// Simulate and analyze entanglement-based QKD over a 19-core fiber.
#[derive(Parser)]
#[command(name = "mcfqkd", version)]
struct Cli {
    /// JSON run config; the built-in reference config when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write one timetag file per pair and party, plus ground truth.
    Simulate,
    /// Coincidence analysis and key rates of timetag files or directories.
    Analyze {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Coincidence window width in ps.
        #[arg(long)]
        window_ps: Option<u64>,
    },
    /// Key rate versus fiber length for both rings.
    Linkbudget {
        #[arg(long)]
        lmax_km: Option<f64>,
        #[arg(long)]
        step_km: Option<f64>,
    },
    /// Long-term QBER and key rate of one pair under polarization drift.
    Stability {
        #[arg(long)]
        hours: Option<f64>,
        #[arg(long)]
        switch_min: Option<f64>,
    },
    /// Data and plots of a figure.
    Reproduce {
        #[arg(value_enum)]
        figure: Figure,
    },
    /// Write the effective config as JSON.
    Config,
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load_or_reference(cli.config.as_deref())?;
    let mut o = Overrides {
        seed: cli.seed,
        ..Overrides::default()
    };
    match &cli.command {
        Command::Analyze { window_ps, .. } => o.window_ps = *window_ps,
        Command::Linkbudget { lmax_km, step_km } => {
            o.lmax_km = *lmax_km;
            o.step_km = *step_km;
        }
        Command::Stability { hours, switch_min } => {
            o.hours = *hours;
            o.switch_min = *switch_min;
        }
        _ => {}
    }
    o.apply(&mut cfg)?;
    let out = cli.out.as_path();
    if let Command::Config = cli.command {
        std::fs::create_dir_all(out)?;
        let path = out.join("config.json");
        std::fs::write(&path, cfg.to_json())?;
        println!("wrote {}", path.display());
        return Ok(());
    }
    let ctx = Context::new(cfg)?;
    match cli.command {
        Command::Simulate => {
            let s = commands::simulate(&ctx, out)?;
            println!(
                "simulated {} pairs emitted, {} true coincidences; wrote {} files to {}",
                s.truth.total_emitted(),
                s.truth.pairs.iter().map(|p| p.true_coincidences).sum::<u64>(),
                s.files.len(),
                out.display()
            );
        }
        Command::Analyze { inputs, .. } => {
            let r = commands::analyze(&ctx, &inputs, out)?;
            for p in &r.report.pairs {
                println!(
                    "pair {} ({}): qber {} / {}, key rate {:.1} bit/s",
                    p.pair_id,
                    p.ring.name(),
                    pct(p.qber_hv),
                    pct(p.qber_da),
                    p.skr_bits_s
                );
            }
            for t in &r.report.rings {
                println!("{} ring: {:.1} bit/s over {} pairs", t.ring.name(), t.skr_bits_s, t.pairs);
            }
        }
        Command::Linkbudget { .. } => {
            for c in commands::linkbudget(&ctx, out)? {
                let max = c.max_length_km.map_or("unbounded".to_string(), |l| format!("{l:.1} km"));
                println!(
                    "{} ring: {:.1} bit/s at {} km, max length {max}",
                    c.ring.name(),
                    c.reference.skr_ring_bits_s,
                    c.reference.length_km
                );
            }
        }
        Command::Stability { .. } => {
            let r = commands::stability(&ctx, out)?;
            println!(
                "{} points, mean qber {:.2} %, mean key rate {:.1} bit/s",
                r.points.len(),
                100.0 * r.qber_mean,
                r.skr_mean_bits_s
            );
        }
        Command::Reproduce { figure } => {
            for p in commands::reproduce(&ctx, figure, out)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Config => unreachable!("handled above"),
    }
    Ok(())
}

fn pct(q: Option<f64>) -> String {
    q.map_or("n/a".into(), |q| format!("{:.2} %", 100.0 * q))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
