use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cascade_denoise::config::Config;
use cascade_denoise::error::{Error, Result};
use cascade_denoise::gate::{ExitPolarity, ExitPolicy};
use cascade_denoise::harness::metrics::{fmt_metric, psnr, ssim};
use cascade_denoise::harness::{bench, denoise_video, tune_threshold, BenchSpec, DenoiseOptions};
use cascade_denoise::io::{load_sequence, parse_manifest, read_frame, save_sequence};
use cascade_denoise::synth::TextureKind;
use cascade_denoise::train::{train_with, TrainConfig};
use cascade_denoise::Model;
use clap::{Parser, Subcommand};

/// Environment variable overriding the `seed` key of train and bench configs.
const SEED_ENV: &str = "CASCADE_SEED";

#[derive(Parser)]
#[command(name = "cascade-denoise", version, about = "Multi-frame video denoiser with uncertainty-gated refinement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on synthetic sequences described by a key=value config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Parameter file to write (default: `params_out` from the config).
        #[arg(long)]
        params_out: Option<PathBuf>,
        /// Training log CSV (default: `log_out` from the config).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Denoise the frames listed in a manifest.
    Denoise {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        no_gate: bool,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long, default_value_t = 8)]
        radius: usize,
        #[arg(long, default_value = "low")]
        polarity: ExitPolarity,
    },
    /// Compare predicted frames against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Gated vs full-iteration benchmark on a synthetic mixed-noise suite.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: &Path) -> Result<Config> {
    let mut cfg = Config::load(path)?;
    if let Ok(seed) = std::env::var(SEED_ENV) {
        let seed: u64 = seed.trim().parse().map_err(|_| Error::param(format!("{SEED_ENV}=`{seed}` is not an integer")))?;
        cfg.set("seed", seed);
    }
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, params_out, log } => {
            let cfg = load_config(&config)?;
            let tc = TrainConfig::from_config(&cfg)?;
            let params_out = params_out.or_else(|| cfg.path("params_out")).unwrap_or_else(|| config.with_file_name("params.bin"));
            let log_out = log.or_else(|| cfg.path("log_out")).unwrap_or_else(|| config.with_file_name("train_log.csv"));
            let every = (tc.steps / 20).max(1);
            let (params, log) = train_with(&tc, |r| {
                if r.step % every == 0 || r.step + 1 == tc.steps {
                    eprintln!("step {:>5}  loss {:>10.5}  grad {:>8.3}  epe {:.3} -> {:.3}", r.step, r.loss, r.grad_norm, r.epe_first, r.epe_last);
                }
            })?;
            let model = Model { cfg: tc.model.clone(), params };
            model.save(&params_out)?;
            write(&log_out, &log.to_csv())?;
            println!("params: {}", params_out.display());
            println!("log: {}", log_out.display());
        }
        Command::Denoise { input, out, params, no_gate, threshold, max_iters, radius, polarity } => {
            let model = Model::load(&params)?;
            let defaults = ExitPolicy::default();
            let policy = ExitPolicy {
                enabled: !no_gate,
                threshold: threshold.unwrap_or(defaults.threshold),
                max_iters: max_iters.unwrap_or(defaults.max_iters),
                polarity,
            };
            let noisy = load_sequence(&input)?;
            let opts = DenoiseOptions { policy, stride: 0, search_radius: radius };
            let (clean, report) = denoise_video(&model, &noisy, &opts)?;
            save_sequence(&clean, &out)?;
            let mut csv = String::from("frame,x,y,iterations,mean_variance\n");
            for p in &report.patches {
                csv.push_str(&format!("{},{},{},{},{:.10e}\n", p.frame, p.origin.0, p.origin.1, p.iterations, p.mean_variance));
            }
            write(&out.join("patches.csv"), &csv)?;
            let summary = format!("frames,patches,mean_iterations,savings\n{},{},{:.6},{:.6}\n", clean.len(), report.patches.len(), report.mean_iterations, report.savings);
            write(&out.join("summary.csv"), &summary)?;
            println!("wrote {} frames to {}; mean iterations {:.3}, savings {:.1}%", clean.len(), out.display(), report.mean_iterations, 100.0 * report.savings);
        }
        Command::Eval { pred, gt, report } => {
            let (p, g) = (dir_frames(&pred)?, dir_frames(&gt)?);
            if p.len() != g.len() || p.is_empty() {
                return Err(Error::param(format!("{} predicted frames vs {} ground-truth frames", p.len(), g.len())));
            }
            let mut csv = String::from("frame,psnr,ssim\n");
            let (mut sp, mut ss) = (0.0, 0.0);
            for (i, (a, b)) in p.iter().zip(&g).enumerate() {
                let (fa, fb) = (read_frame(a)?, read_frame(b)?);
                let (ps, sm) = (psnr(&fa, &fb, 1.0)?, ssim(&fa, &fb)?);
                csv.push_str(&format!("{i},{},{sm:.6}\n", fmt_metric(ps)));
                sp += ps;
                ss += sm;
            }
            let n = p.len() as f64;
            csv.push_str(&format!("mean,{},{:.6}\n", fmt_metric(sp / n), ss / n));
            write(&report, &csv)?;
            println!("PSNR {} dB, SSIM {:.4} over {} frames", fmt_metric(sp / n), ss / n, p.len());
        }
        Command::Bench { config, report } => {
            let cfg = load_config(&config)?;
            let params = cfg.path("params").ok_or_else(|| Error::param(format!("{}: missing `params`", config.display())))?;
            let model = Model::load(&params)?;
            let textures: Vec<String> = cfg.list_or("textures", vec!["perlin".into(), "checker".into(), "gradient".into()])?;
            let spec = BenchSpec {
                seed: cfg.get_or("seed", 1u64)?,
                sigmas: cfg.list_or("sigmas", vec![0.02, 0.05, 0.1])?,
                per_sigma: cfg.get_or("per_sigma", 3)?,
                size: (cfg.get_or("height", 64)?, cfg.get_or("width", 64)?),
                frames: cfg.get_or("frames", 3)?,
                channels: model.cfg.channels,
                max_motion: cfg.get_or("max_motion", 2.0)?,
                textures: textures.iter().map(|t| t.parse::<TextureKind>().map_err(Error::Param)).collect::<Result<_>>()?,
                search_radius: cfg.get_or("radius", 8)?,
            };
            let max_iters = cfg.get_or("max_iters", 12)?;
            let mut threshold = cfg.get_or("threshold", 0.002)?;
            let mut tuned = None;
            if cfg.get_or("tune", false)? {
                let calib = BenchSpec { seed: cfg.get_or("calib_seed", spec.seed.wrapping_add(1000))?, ..spec.clone() };
                let t = tune_threshold(&model, &calib, max_iters, cfg.get_or("max_drop_db", 0.05)?)?;
                threshold = t.threshold;
                tuned = Some(t);
            }
            let policy = ExitPolicy { enabled: true, threshold, max_iters, polarity: cfg.get_or("polarity", ExitPolarity::LowUncertainty)? };
            let heatmaps = report.parent().map(|d| d.join("heatmaps"));
            let rep = bench(&model, &spec, &policy, heatmaps.as_deref())?;
            write(&report, &rep.to_csv())?;
            write(&report.with_extension("patches.csv"), &rep.patches_csv())?;
            if let Some(t) = tuned {
                println!("tuned threshold {:.6e} (calibration drop {:.4} dB, mean iterations {:.3})", t.threshold, t.psnr_drop, t.mean_iterations);
            }
            println!(
                "gating off: PSNR {} dB, SSIM {:.4}; gating on: PSNR {} dB, SSIM {:.4}, mean iterations {:.3}/{}, savings {:.1}%; pearson r {}",
                fmt_metric(rep.ungated.psnr),
                rep.ungated.ssim,
                fmt_metric(rep.gated.psnr),
                rep.gated.ssim,
                rep.gated.mean_iterations,
                max_iters,
                100.0 * rep.gated.savings,
                rep.ungated.pearson_r.map_or("undefined".into(), |r| format!("{r:.4}"))
            );
        }
    }
    Ok(())
}

/// Frames of a directory: its `manifest.txt` when present, otherwise every
/// `.pgm`/`.ppm` file in name order.
fn dir_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let manifest = dir.join("manifest.txt");
    if manifest.is_file() {
        let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        return parse_manifest(&text, dir, &manifest.display().to_string());
    }
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm")))
        .collect();
    v.sort();
    Ok(v)
}
