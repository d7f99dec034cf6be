//! `ksformer`: synthesize data, train, evaluate, run and inspect the
//! dehazing network.
//!
//! Exit status: 0 on success, 1 on a usage error, 2 on a runtime error.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use ksformer_core::gradcheck::GradCheck;
use ksformer_core::haze::{load_dataset, make_dataset, read_ppm, save_dataset, write_ppm};
use ksformer_core::network::{flop_count, FlopReport};
use ksformer_core::reference::{check_network_gradients, probe};
use ksformer_core::train::{ablate, evaluate, evaluate_identity, split_holdout, train, ExperimentConfig};
use ksformer_core::{Error, KsformerModel, Result, Variant};

#[derive(Parser, Debug)]
#[command(name = "ksformer", version, about = "Toy-scale dehazing with routed window attention")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic clean / hazy PPM pairs.
    SynthData {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        side: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a pair directory; the last tenth is held out for validation.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Parameter initialization seed.
        #[arg(long, default_value_t = 0)]
        init_seed: u64,
    },
    /// Mean PSNR / SSIM of a checkpoint on a pair directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Dehaze one PPM image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate all four variants with one budget and seed.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        init_seed: u64,
    },
    /// Analytic multiply-accumulate counts, routed vs dense.
    Flops {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        side: usize,
    },
    /// End-to-end gradient check of the configured network.
    GradCheck {
        #[arg(long)]
        config: PathBuf,
        /// Probed coordinates per parameter tensor.
        #[arg(long, default_value_t = 4)]
        coords: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f32,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let mut out = std::io::stdout().lock();
    match run(cli.command, &mut out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = out.flush();
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn stdout_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn run(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::SynthData { count, side, seed, out: dir } => {
            let pairs = make_dataset(count, side, seed)?;
            save_dataset(&dir, &pairs)?;
            writeln!(out, "wrote {count} pairs of {side}x{side} to {}", dir.display()).map_err(stdout_err)
        }
        Command::Train { config, data, out: dir, init_seed } => {
            let exp = ExperimentConfig::load(&config)?;
            let pairs = load_dataset(&data)?;
            let (train_set, val_set) = split_holdout(&pairs);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let log_path = dir.join("train.csv");
            let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
            let mut log = BufWriter::new(file);
            let mut model = KsformerModel::new(exp.network, init_seed)?;
            writeln!(out, "training {} ({} params) on {} pairs, {} held out", model.config.variant.label(), model.param_count(), train_set.len(), val_set.len())
                .map_err(stdout_err)?;
            let report = train(&mut model, train_set, val_set, &exp.train, &mut log, Some(&dir))?;
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            if let Some(last) = report.losses.last() {
                writeln!(out, "final loss {last:.6}").map_err(stdout_err)?;
            }
            if let Some(m) = report.final_val {
                let hazy = evaluate_identity(val_set)?;
                writeln!(out, "held-out PSNR {:.3} dB (hazy {:.3} dB), SSIM {:.4} (hazy {:.4})", m.psnr_db, hazy.psnr_db, m.ssim, hazy.ssim)
                    .map_err(stdout_err)?;
            }
            writeln!(out, "checkpoint {}", dir.join("model.ksf").display()).map_err(stdout_err)
        }
        Command::Eval { ckpt, data } => {
            let model = KsformerModel::load(&ckpt)?;
            let pairs = load_dataset(&data)?;
            let m = evaluate(&model, &pairs)?;
            let hazy = evaluate_identity(&pairs)?;
            writeln!(out, "pairs {}", pairs.len()).map_err(stdout_err)?;
            writeln!(out, "model  PSNR {:.3} dB  SSIM {:.4}", m.psnr_db, m.ssim).map_err(stdout_err)?;
            writeln!(out, "hazy   PSNR {:.3} dB  SSIM {:.4}", hazy.psnr_db, hazy.ssim).map_err(stdout_err)
        }
        Command::Infer { ckpt, input, out: path } => {
            let model = KsformerModel::load(&ckpt)?;
            let img = read_ppm(&input)?;
            let dehazed = model.infer(&img)?;
            write_ppm(&path, &dehazed)?;
            writeln!(out, "wrote {}", path.display()).map_err(stdout_err)
        }
        Command::Ablate { config, data, init_seed } => {
            let exp = ExperimentConfig::load(&config)?;
            let pairs = load_dataset(&data)?;
            let (train_set, val_set) = split_holdout(&pairs);
            let hazy = evaluate_identity(val_set)?;
            writeln!(out, "{:<20} {:>9} {:>10} {:>7}", "Model", "Params", "PSNR (dB)", "SSIM").map_err(stdout_err)?;
            writeln!(out, "{:<20} {:>9} {:>10.3} {:>7.4}", "Hazy input", "-", hazy.psnr_db, hazy.ssim).map_err(stdout_err)?;
            let mut write_err = None;
            let rows = ablate(&exp.network, &exp.train, init_seed, train_set, val_set, |r| {
                if let Err(e) = writeln!(out, "{:<20} {:>9} {:>10.3} {:>7.4}", r.variant.label(), r.params, r.psnr_db, r.ssim) {
                    write_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = write_err {
                return Err(stdout_err(e));
            }
            let psnr = |v| rows.iter().find(|r| r.variant == v).map(|r| r.psnr_db);
            if let (Some(full), Some(base)) = (psnr(Variant::Full), psnr(Variant::Base)) {
                let verdict = if full >= base { "holds" } else { "does not hold" };
                writeln!(out, "Full >= Base: {verdict} ({:+.3} dB)", full - base).map_err(stdout_err)?;
            }
            Ok(())
        }
        Command::Flops { config, side } => {
            let exp = ExperimentConfig::load(&config)?;
            let report = flop_count(&exp.network, side)?;
            print_flops(out, &report).map_err(stdout_err)
        }
        Command::GradCheck { config, coords, seed, tolerance } => {
            let exp = ExperimentConfig::load(&config)?;
            let (model, hazy) = probe(exp.network, seed)?;
            let checks = check_network_gradients(&model, &hazy, seed, GradCheck { max_coords: coords, ..Default::default() })?;
            let mut worst = ("", 0.0f32);
            for (name, c) in &checks {
                writeln!(out, "{name:<32} probed {:>3}  |grad| {:.3e}  rel {:.3e}", c.probed, c.analytic_norm, c.rel_error).map_err(stdout_err)?;
                if c.rel_error >= worst.1 {
                    worst = (name, c.rel_error);
                }
            }
            writeln!(out, "worst {} {:.3e} (tolerance {tolerance:e})", worst.0, worst.1).map_err(stdout_err)?;
            if worst.1 < tolerance {
                Ok(())
            } else {
                Err(Error::Eval(format!("gradient check failed: {} has relative error {:e}", worst.0, worst.1)))
            }
        }
    }
}

fn print_flops(out: &mut dyn Write, r: &FlopReport) -> std::io::Result<()> {
    let gm = |m: u64| m as f64 / 1e6;
    writeln!(out, "side {}  attention modules {}", r.side, r.attention_modules)?;
    writeln!(out, "{:<22} {:>14} {:>14}", "", "routed MACs", "dense MACs")?;
    writeln!(out, "{:<22} {:>14} {:>14}", "convolutions", r.conv_macs, r.conv_macs)?;
    writeln!(out, "{:<22} {:>14} {:>14}", "fusion 1x1", r.fusion_macs, r.fusion_macs)?;
    writeln!(out, "{:<22} {:>14} {:>14}", "projections+routing", r.routing_macs, r.routing_macs)?;
    writeln!(out, "{:<22} {:>14} {:>14}", "attention", r.attention_macs, r.attention_dense_macs)?;
    for b in 0..r.branch_attention_macs.len() {
        writeln!(out, "{:<22} {:>14} {:>14}", format!("  branch {} (per module)", b + 1), r.branch_attention_macs[b], r.branch_attention_dense_macs[b])?;
    }
    writeln!(out, "{:<22} {:>14} {:>14}", "total", r.total_macs(), r.total_dense_macs())?;
    let ratio = if r.total_dense_macs() == 0 { 1.0 } else { r.total_macs() as f64 / r.total_dense_macs() as f64 };
    writeln!(out, "total {:.2} M vs dense {:.2} M MACs, routed/dense {:.4}", gm(r.total_macs()), gm(r.total_dense_macs()), ratio)
}
