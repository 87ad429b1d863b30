use std::fs::File;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use gcnet::bench::{bench, write_csv};
use gcnet::check::{check_contraction, compare, Tolerance, RELAXED_REL_TOL};
use gcnet::image::{colorize, encode_pgm, encode_ppm, read_ppm};
use gcnet::model_file::{load_model, save_model};
use gcnet::segment::segment;
use gcnet_core::cost::count_params_flops;
use gcnet_core::network::{Form, Network, NetworkConfig, Variant};
use gcnet_core::reparam::contract_network;
use gcnet_core::train::{toy_train_run, ToyConfig};
use gcnet_core::{Dims, Tensor4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "gcnet", version, about = "Build, contract, verify and benchmark GCNet segmentation models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ArchArgs {
    /// S, M or L
    #[arg(long, default_value = "S")]
    variant: Variant,
    #[arg(long, default_value_t = 19)]
    classes: usize,
    /// Overrides the variant's base width C.
    #[arg(long)]
    base_channels: Option<usize>,
}

impl ArchArgs {
    fn config(&self) -> NetworkConfig {
        let cfg = NetworkConfig::new(self.variant, self.classes);
        match self.base_channels {
            Some(c) => cfg.with_base_channels(c),
            None => cfg,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a randomly initialized training-form model.
    Build {
        #[command(flatten)]
        arch: ArchArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Set batch-norm running statistics from one seeded random batch, so
        /// eval-mode activations stay in a sane range.
        #[arg(long)]
        calibrate: bool,
        #[arg(long, default_value_t = 128)]
        calibrate_h: usize,
        #[arg(long, default_value_t = 256)]
        calibrate_w: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Contract a training-form model into its inference form.
    Contract {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a training-form model against its contraction on random inputs.
    Check {
        #[arg(long)]
        model: PathBuf,
        /// Compare against this stored inference-form model instead of
        /// contracting in memory; uses the relaxed relative tolerance.
        #[arg(long)]
        against: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        /// Absolute tolerance for in-memory contraction.
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        #[arg(long, default_value_t = 64)]
        h: usize,
        #[arg(long, default_value_t = 128)]
        w: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time single-image forwards.
    Bench {
        #[arg(long)]
        model: PathBuf,
        /// Also time the contracted form of a training-form model.
        #[arg(long)]
        both: bool,
        #[arg(long, default_value_t = 256)]
        h: usize,
        #[arg(long, default_value_t = 512)]
        w: usize,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        #[arg(long, default_value_t = 20)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Report parameters and operations of both forms of an architecture.
    Count {
        #[command(flatten)]
        arch: ArchArgs,
        #[arg(long, default_value_t = 1024)]
        h: usize,
        #[arg(long, default_value_t = 2048)]
        w: usize,
    },
    /// Train the narrow network on the synthetic shapes set.
    TrainToy {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        iters: usize,
        /// CSV trace: iter, lr, loss, L_sh, L_ash, val_miou
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a per-pixel label map for a binary PPM image.
    Segment {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Binary PGM of class indices.
        #[arg(long)]
        output: PathBuf,
        /// Also write a colorized PPM.
        #[arg(long)]
        palette: Option<PathBuf>,
    },
}

fn load(path: &PathBuf) -> anyhow::Result<Network<f64>> {
    load_model(path).with_context(|| format!("loading {}", path.display()))
}

fn run(cmd: Cmd) -> anyhow::Result<bool> {
    match cmd {
        Cmd::Build { arch, seed, calibrate, calibrate_h, calibrate_w, out } => {
            let mut net = Network::<f64>::build(arch.config(), seed)?;
            if calibrate {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
                net.calibrate_bn(&Tensor4::randn(Dims::new(2, 3, calibrate_h, calibrate_w), &mut rng))?;
            }
            save_model(&net, &out)?;
            println!("wrote GCNet-{} ({} params) to {}", net.cfg.variant.name(), net.param_count(), out.display());
        }
        Cmd::Contract { model, out } => {
            let net = contract_network(&load(&model)?)?;
            save_model(&net, &out)?;
            println!("wrote inference form ({} params) to {}", net.param_count(), out.display());
        }
        Cmd::Check { model, against, trials, tol, h, w, seed } => {
            let net = load(&model)?;
            let report = match against {
                Some(p) => {
                    let other = load(&p)?;
                    if net.form != Form::Training || other.form != Form::Inference {
                        bail!("--model must be a training-form file and --against an inference-form file");
                    }
                    compare(&net, &other, trials, h, w, seed, Tolerance::Rel(RELAXED_REL_TOL))?
                }
                None => check_contraction(&net, trials, h, w, seed, Tolerance::Abs(tol))?,
            };
            println!("{report}");
            return Ok(report.pass);
        }
        Cmd::Bench { model, both, h, w, warmup, iters, seed, csv } => {
            let net = load(&model)?.cast::<f32>();
            let mut reports = vec![bench(&net, h, w, warmup, iters, seed)?];
            if both {
                reports.push(bench(&contract_network(&net)?, h, w, warmup, iters, seed)?);
            }
            for r in &reports {
                println!("{r}");
            }
            if let [a, b] = &reports[..] {
                println!("speedup {:.2}x", a.median_ms / b.median_ms);
            }
            if let Some(p) = csv {
                write_csv(File::create(&p)?, &reports)?;
            }
        }
        Cmd::Count { arch, h, w } => {
            let train = Network::<f32>::skeleton(arch.config(), Form::Training)?;
            let inf = Network::<f32>::skeleton(arch.config(), Form::Inference)?;
            for (name, net) in [("training", &train), ("inference", &inf)] {
                let c = count_params_flops(net, h, w)?;
                println!("{name:>9}: {:.3} M params, {:.2} GMACs, {:.2} GFLOPs at {h}x{w}", c.params_m(), c.gmacs(), c.gflops());
            }
        }
        Cmd::TrainToy { seed, iters, trace, out } => {
            let cfg = ToyConfig::default();
            let run = toy_train_run::<f32>(&cfg, seed, iters)?;
            for r in run.trace.iter().filter(|r| r.val_miou.is_some()) {
                println!("iter {:>4} lr {:.5} loss {:.4} val mIoU {:.4}", r.iter, r.lr, r.loss.total, r.val_miou.unwrap_or(f64::NAN));
            }
            println!("final validation mIoU {:.4}", run.final_miou);
            if let Some(p) = trace {
                let mut wr = csv::Writer::from_path(&p)?;
                wr.write_record(["iter", "lr", "loss", "L_sh", "L_ash", "val_miou"])?;
                for r in &run.trace {
                    let miou = r.val_miou.map(|m| format!("{m:.6}")).unwrap_or_default();
                    wr.write_record([r.iter.to_string(), format!("{:.8}", r.lr), format!("{:.6}", r.loss.total), format!("{:.6}", r.loss.l_sh), format!("{:.6}", r.loss.l_ash), miou])?;
                }
                wr.flush()?;
            }
            if let Some(p) = out {
                save_model(&run.net, &p)?;
            }
        }
        Cmd::Segment { model, input, output, palette } => {
            let net = load(&model)?.cast::<f32>();
            let img = read_ppm(&input)?;
            let seg = segment(&net, &img)?;
            if let Some(w) = &seg.warning {
                eprintln!("warning: {w}");
            }
            std::fs::write(&output, encode_pgm(seg.width, seg.height, &seg.labels))?;
            if let Some(p) = palette {
                std::fs::write(p, encode_ppm(&colorize(seg.width, seg.height, &seg.labels)))?;
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse().cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
