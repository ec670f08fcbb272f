use std::fs;
use std::path::{Path, PathBuf};

use grtn_core::data::io::{load_sequence, save_sequence};
use grtn_core::data::probe::{attention_probe, ProbeConfig};
use grtn_core::data::{add_awgn, synth_sequence, FrameSequence, Source, SynthKind};
use grtn_core::harness::checkpoint::precision_of;
use grtn_core::harness::eval::evaluate_sequence;
use grtn_core::harness::gradsuite::{self, run_suite};
use grtn_core::harness::{
    ablate, denoise_sequence, evaluate, peek, stored_param_count, Checkpoint, Precision, RunConfig,
    Trainer, Variant,
};
use grtn_core::net::{count_params, GrtnParams};
use grtn_core::{Element, Error, Result};
use log::info;

use crate::{Cli, Command, Global};

/// Seed offset keeping held-out sequences apart from training clips.
const HELD_OUT: u64 = 0x4E1D_0117;

pub fn run(cli: Cli) -> Result<u8> {
    let g = &cli.global;
    if let Some(n) = g.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("--threads: {e}")))?;
    }
    fs::create_dir_all(&g.out)?;
    match cli.command {
        Command::Train { resume, until } => train(g, resume.as_deref(), until),
        Command::Denoise {
            input,
            sigma,
            checkpoint,
            noisy,
            clean,
        } => {
            let ck = checkpoint.unwrap_or_else(|| g.out.join("checkpoint.bin"));
            let req = DenoiseRequest {
                input: &input,
                sigma,
                noisy,
                clean: clean.as_deref(),
            };
            match load_precision(&ck)? {
                Precision::F32 => denoise::<f32>(g, &ck, &req),
                Precision::F64 => denoise::<f64>(g, &ck, &req),
            }
        }
        Command::Eval {
            checkpoint,
            inputs,
            sigmas,
            frames,
            size,
        } => {
            let ck = checkpoint.unwrap_or_else(|| g.out.join("checkpoint.bin"));
            match load_precision(&ck)? {
                Precision::F32 => eval::<f32>(g, &ck, &inputs, &sigmas, frames, size),
                Precision::F64 => eval::<f64>(g, &ck, &inputs, &sigmas, frames, size),
            }
        }
        Command::Ablate {
            variants,
            sigmas,
            frames,
            size,
        } => {
            let run = load_run(g)?;
            let variants = variants
                .iter()
                .map(|v| v.parse::<Variant>())
                .collect::<Result<Vec<_>>>()?;
            match run.train.precision {
                Precision::F32 => run_ablation::<f32>(g, &run, &variants, &sigmas, frames, size),
                Precision::F64 => run_ablation::<f64>(g, &run, &variants, &sigmas, frames, size),
            }
        }
        Command::ProbeAttn {
            sigma,
            window,
            trials,
            token_size,
            source,
        } => probe(g, sigma, &window, trials, token_size, &source),
        Command::Gradcheck => gradcheck(g),
        Command::Params { checkpoint } => params(g, checkpoint.as_deref()),
    }
}

/// Config file (or the toy preset), then `--set` overrides, then `--seed`.
pub fn load_run(g: &Global) -> Result<RunConfig> {
    let mut run = match &g.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::preset("toy")?,
    };
    for kv in &g.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        run.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = g.seed {
        run.train.seed = seed;
    }
    run.validate()?;
    Ok(run)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn load_precision(path: &Path) -> Result<Precision> {
    Ok(peek(&fs::read(path)?)?.0)
}

fn train(g: &Global, resume: Option<&Path>, until: Option<usize>) -> Result<u8> {
    match resume {
        Some(path) => match load_precision(path)? {
            Precision::F32 => train_with(g, Trainer::<f32>::from_checkpoint(Checkpoint::load(path)?)?, until),
            Precision::F64 => train_with(g, Trainer::<f64>::from_checkpoint(Checkpoint::load(path)?)?, until),
        },
        None => {
            let run = load_run(g)?;
            match run.train.precision {
                Precision::F32 => train_with(g, Trainer::<f32>::new(run)?, until),
                Precision::F64 => train_with(g, Trainer::<f64>::new(run)?, until),
            }
        }
    }
}

fn train_with<T: Element>(g: &Global, mut trainer: Trainer<T>, until: Option<usize>) -> Result<u8> {
    let until = until.unwrap_or(trainer.run.train.iterations);
    info!(
        "training {} ({}) from iteration {} to {until}",
        trainer.run.train.preset,
        precision_of::<T>().name(),
        trainer.iteration
    );
    write(&g.out.join("config.txt"), &trainer.run.to_string())?;
    let log = trainer.run_until(until, |row| {
        info!(
            "iter {:>5}  loss {:.6}  val_psnr {:.3} dB",
            row.iteration, row.loss, row.val_psnr
        )
    })?;
    trainer.checkpoint().save(&g.out.join("checkpoint.bin"))?;
    info!("wrote {}", g.out.join("checkpoint.bin").display());
    write(&g.out.join("loss_curve.csv"), &log.to_csv())?;
    Ok(0)
}

struct DenoiseRequest<'a> {
    input: &'a Path,
    sigma: f64,
    noisy: bool,
    clean: Option<&'a Path>,
}

fn seed_of(g: &Global, run: &RunConfig) -> u64 {
    g.seed.unwrap_or(run.train.seed)
}

fn denoise<T: Element>(g: &Global, ck: &Path, req: &DenoiseRequest) -> Result<u8> {
    let ck = Checkpoint::<T>::load(ck)?;
    let params = GrtnParams::from_store(&ck.run.model, ck.params)?;
    let input = load_sequence(req.input)?;
    if input.is_empty() {
        return Err(Error::Data(format!("no PGM/PPM frames in {}", req.input.display())));
    }
    let (clean, noisy) = if req.noisy {
        let clean = req.clean.map(load_sequence).transpose()?;
        let noisy = FrameSequence {
            sigma: req.sigma,
            source: Source::Noisy,
            ..input
        };
        (clean, noisy)
    } else {
        let noisy = add_awgn(&input, req.sigma, seed_of(g, &ck.run))?;
        save_sequence(&g.out.join("noisy"), &noisy.frames)?;
        (Some(input), noisy)
    };
    let denoised = match &clean {
        Some(clean) => {
            if clean.len() != noisy.len() {
                return Err(Error::Data(format!(
                    "clean reference has {} frames, input has {}",
                    clean.len(),
                    noisy.len()
                )));
            }
            let (result, denoised) = evaluate_sequence(&params, "input", clean, &noisy)?;
            write(&g.out.join("metrics.csv"), &grtn_core::data::metrics_csv(&result.frames))?;
            println!(
                "sigma {}: noisy {:.3} dB -> denoised {:.3} dB",
                req.sigma, result.mean_noisy, result.mean_denoised
            );
            denoised
        }
        None => denoise_sequence(&params, &noisy)?,
    };
    let written = save_sequence(&g.out.join("denoised"), &denoised)?;
    info!("wrote {} denoised frames to {}", written.len(), g.out.join("denoised").display());
    Ok(0)
}

fn held_out(run: &RunConfig, inputs: &[PathBuf], frames: usize, size: usize) -> Result<Vec<(String, FrameSequence)>> {
    if !inputs.is_empty() {
        return inputs
            .iter()
            .map(|p| {
                let name = p.file_name().map_or("seq".into(), |n| n.to_string_lossy().into_owned());
                Ok((name, load_sequence(p)?))
            })
            .collect();
    }
    SynthKind::ALL
        .iter()
        .map(|&kind| {
            let seq = synth_sequence(
                kind,
                frames,
                (size, size),
                run.model.image_channels,
                run.train.seed ^ HELD_OUT,
            )?;
            Ok((kind.name().to_string(), seq))
        })
        .collect()
}

fn eval<T: Element>(g: &Global, ck: &Path, inputs: &[PathBuf], sigmas: &[f64], frames: usize, size: usize) -> Result<u8> {
    let ck = Checkpoint::<T>::load(ck)?;
    let params = GrtnParams::from_store(&ck.run.model, ck.params)?;
    let sequences = held_out(&ck.run, inputs, frames, size)?;
    let report = evaluate(&params, &sequences, sigmas, seed_of(g, &ck.run))?;
    let summary = report.summary_csv();
    print!("{summary}");
    write(&g.out.join("eval_summary.csv"), &summary)?;
    let dir = g.out.join("eval");
    fs::create_dir_all(&dir)?;
    for (i, r) in report.results.iter().enumerate() {
        write(&dir.join(format!("{}_sigma{}.csv", r.sequence, r.sigma)), &report.frames_csv(i))?;
    }
    Ok(0)
}

fn run_ablation<T: Element>(
    g: &Global,
    run: &RunConfig,
    variants: &[Variant],
    sigmas: &[f64],
    frames: usize,
    size: usize,
) -> Result<u8> {
    let sequences = held_out(run, &[], frames, size)?;
    let report = ablate::<T>(run, variants, &sequences, sigmas, |v, it| {
        info!("{}: iteration {it}", v.name())
    })?;
    for row in &report.rows {
        write(&g.out.join(format!("ablation_{}_curve.csv", row.variant.name())), &row.log.to_csv())?;
    }
    let table = report.to_csv();
    print!("{table}");
    write(&g.out.join("ablation.csv"), &table)?;
    Ok(0)
}

fn probe(g: &Global, sigma: f64, windows: &[usize], trials: usize, token_size: usize, source: &str) -> Result<u8> {
    let source: SynthKind = source.parse()?;
    for &window in windows {
        let cfg = ProbeConfig {
            sigma,
            window,
            token_size,
            trials,
            seed: g.seed.unwrap_or(0),
            source,
        };
        let report = attention_probe(&cfg)?;
        println!(
            "M={window} sigma={sigma}: dot {:.4}  euclidean {:.4}  euclidean wins {:.0}% of {trials}",
            report.dot_mean,
            report.euclidean_mean,
            100.0 * report.euclidean_win_rate
        );
        write(&g.out.join(format!("probe_attn_m{window}.csv")), &report.to_csv())?;
    }
    Ok(0)
}

fn gradcheck(g: &Global) -> Result<u8> {
    let cases = run_suite()?;
    println!("{:<26} {:>14} {:>8}  status", "op", "max_rel_error", "checked");
    for c in &cases {
        println!(
            "{:<26} {:>14.3e} {:>8}  {}",
            c.name,
            c.report.max_rel_error,
            c.report.checked,
            if c.passed() { "pass" } else { "FAIL" }
        );
    }
    write(&g.out.join("gradcheck.csv"), &gradsuite::to_csv(&cases))?;
    Ok(if cases.iter().all(|c| c.passed()) { 0 } else { 3 })
}

fn params(g: &Global, checkpoint: Option<&Path>) -> Result<u8> {
    let (count, label) = match checkpoint {
        Some(path) => {
            let bytes = fs::read(path)?;
            let (precision, _) = peek(&bytes)?;
            let count = match precision {
                Precision::F32 => count_params(&Checkpoint::<f32>::from_bytes(&bytes)?.params),
                Precision::F64 => count_params(&Checkpoint::<f64>::from_bytes(&bytes)?.params),
            };
            debug_assert_eq!(count.total, stored_param_count(&bytes)?);
            (count, path.display().to_string())
        }
        None => {
            let run = load_run(g)?;
            (GrtnParams::<f32>::init(&run.model, run.train.seed)?.count(), run.train.preset)
        }
    };
    let mut csv = String::from("module,params\n");
    for (m, n) in &count.per_module {
        csv.push_str(&format!("{m},{n}\n"));
        println!("{m:<16} {n:>10}");
    }
    csv.push_str(&format!("total,{}\n", count.total));
    println!("{:<16} {:>10}  ({label})", "total", count.total);
    write(&g.out.join("params.csv"), &csv)?;
    Ok(0)
}
