//! `vwv`: synthesize data, meta-train the encoder, segment videos, score
//! predictions and run ablation sweeps.

mod config;
mod error;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use vwv::adapt::{segment_video, AdaptConfig, Supervision, VideoRun};
use vwv::dataio::{
    generate_dataset, load_dataset, load_encoder, mask_path, save_dictionary, save_encoder, write_mask, Video,
};
use vwv::dictionary::{DictionaryConfig, Representation};
use vwv::encoder::{init_params, EncoderParams};
use vwv::metrics::{evaluate, evaluate_run, write_report, EvalConfig, EvalReport, VideoEval};
use vwv::train::meta_train_with;

use config::RunConfig;
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "vwv", version, about = "Visual-word video object segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic train/test benchmark.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Meta-train the encoder on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
    /// Segment every frame of a video (or every video of a dataset split).
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// JSON file holding only the adaptation settings.
        #[arg(long)]
        adapt_config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Initialise from the frame-0 boxes instead of the mask.
        #[arg(long)]
        bbox: bool,
        /// Adaptation interval, or `na` to disable adaptation.
        #[arg(long, value_parser = parse_delta)]
        delta: Option<Delta>,
        #[arg(long)]
        alpha: Option<f32>,
        /// Also write per-pixel confidence maps.
        #[arg(long)]
        confidence: bool,
    },
    /// Score predicted masks against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        tolerance: Option<usize>,
    },
    /// Sweep one setting and tabulate the scores.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        sweep: Sweep,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy)]
struct Delta(Option<usize>);

fn parse_delta(s: &str) -> Result<Delta, String> {
    if s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("none") {
        return Ok(Delta(None));
    }
    s.parse::<usize>()
        .map(|d| Delta(Some(d)))
        .map_err(|_| format!("expected a frame count or `na`, got `{s}`"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Sweep {
    K,
    Delta,
    Alpha,
    Repr,
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("VWV_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("VWV_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Internal(e.to_string()))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Internal(format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Internal(format!("{}: {e}", path.display())))
}

/// Accepts a training output directory or the checkpoint directory itself.
fn read_checkpoint(path: &Path) -> Result<EncoderParams, CliError> {
    let nested = path.join("checkpoint");
    let dir = if path.join("encoder.json").exists() || !nested.is_dir() {
        path
    } else {
        &nested
    };
    Ok(load_encoder(dir)?)
}

fn load_eval_videos(root: &Path, cfg: &RunConfig) -> Result<Vec<Video>, CliError> {
    let videos = load_dataset(root, cfg.data.eval_split.as_deref())?;
    if videos.is_empty() {
        return Err(CliError::Data(format!(
            "{} holds no videos in split {:?}",
            root.display(),
            cfg.data.eval_split
        )));
    }
    Ok(videos)
}

fn cmd_synth(config: Option<PathBuf>, out: PathBuf, seed: Option<u64>) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config.as_deref())?;
    if let Some(s) = seed {
        cfg.synth.seed = s;
    }
    cfg.validate()?;
    let manifest = generate_dataset(&out, &cfg.synth)?;
    cfg.write_resolved(&out)?;
    info!("wrote {} videos to {}", manifest.videos.len(), out.display());
    Ok(())
}

fn cmd_train(
    data: PathBuf,
    config: Option<PathBuf>,
    out: PathBuf,
    episodes: Option<usize>,
    seed: Option<u64>,
    checkpoint_every: Option<usize>,
) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config.as_deref())?;
    if let Some(e) = episodes {
        cfg.train.episodes = e;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(c) = checkpoint_every {
        cfg.train.checkpoint_every = c;
    }
    cfg.validate()?;
    let videos = load_dataset(&data, cfg.data.train_split.as_deref())?;
    create_dir(&out)?;
    cfg.write_resolved(&out)?;
    let tc = cfg.train;
    let every = cfg.data.report_every;
    let mut window = 0.0f64;
    let trained = meta_train_with(&videos, &tc, init_params(tc.seed, tc.encoder), |p| {
        window += p.loss as f64;
        let done = p.episode + 1;
        if done % every == 0 || done == tc.episodes {
            let n = (done - 1) % every + 1;
            info!("episode {done}/{}: mean loss {:.4}", tc.episodes, window / n as f64);
            window = 0.0;
        }
        if tc.checkpoint_every > 0 && done % tc.checkpoint_every == 0 {
            let dir = out.join("checkpoints").join(format!("episode_{done:06}"));
            save_encoder(&dir, p.params)?;
        }
        Ok::<_, CliError>(())
    })?;
    save_encoder(&out.join("checkpoint"), &trained.params)?;
    let mut csv = String::from("episode_index,loss\n");
    for (i, l) in trained.losses.iter().enumerate() {
        writeln!(csv, "{i},{l:.9}").expect("write to string");
    }
    write_text(&out.join("loss.csv"), &csv)?;
    info!("checkpoint written to {}", out.join("checkpoint").display());
    Ok(())
}

fn write_run(dir: &Path, run: &VideoRun, confidence: bool) -> Result<(), CliError> {
    create_dir(dir)?;
    for (t, m) in run.predictions.iter().enumerate() {
        write_mask(&mask_path(dir, t), m)?;
    }
    if confidence {
        for (t, c) in run.confidence.iter().enumerate() {
            write_mask(&dir.join(format!("conf_{t:05}.pgm")), c)?;
        }
    }
    write_text(&dir.join("adapt_log.csv"), &run.log.to_csv())?;
    save_dictionary(&dir.join("dictionary"), &run.dictionary)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_infer(
    checkpoint: PathBuf,
    video: PathBuf,
    config: Option<PathBuf>,
    adapt_config: Option<PathBuf>,
    out: PathBuf,
    bbox: bool,
    delta: Option<Delta>,
    alpha: Option<f32>,
    confidence: bool,
) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config.as_deref())?;
    if let Some(p) = adapt_config {
        cfg.load_adapt(&p)?;
    }
    if let Some(Delta(d)) = delta {
        cfg.adapt.delta = d;
    }
    if let Some(a) = alpha {
        cfg.adapt.alpha = a;
    }
    if bbox {
        cfg.infer.supervision = Supervision::BBox;
    }
    cfg.infer.confidence_maps |= confidence;
    cfg.validate()?;
    let params = read_checkpoint(&checkpoint)?;
    let videos = load_eval_videos(&video, &cfg)?;
    create_dir(&out)?;
    cfg.write_resolved(&out)?;
    for v in &videos {
        let run = segment_video(&params, v, &cfg.dictionary, &cfg.adapt, cfg.infer.supervision)?;
        write_run(&out.join(&v.name), &run, cfg.infer.confidence_maps)?;
        info!(
            "{}: {} frames, {} adaptation rounds, {} words",
            v.name,
            v.len(),
            run.log.rounds(),
            run.dictionary.len()
        );
    }
    Ok(())
}

fn cmd_eval(
    pred: PathBuf,
    gt: PathBuf,
    config: Option<PathBuf>,
    out: PathBuf,
    tolerance: Option<usize>,
) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config.as_deref())?;
    if tolerance.is_some() {
        cfg.eval.boundary_tolerance = tolerance;
    }
    cfg.validate()?;
    if !pred.is_dir() {
        return Err(CliError::Missing(format!("prediction directory {}", pred.display())));
    }
    let report = evaluate_run(&pred, &gt, cfg.data.eval_split.as_deref(), &cfg.eval)?;
    write_report(&out, &report)?;
    cfg.write_resolved(&out)?;
    info!(
        "J {:.4}  F {:.4}  J&F {:.4}",
        report.j_mean, report.f_mean, report.jf_mean
    );
    Ok(())
}

fn score(
    params: &EncoderParams,
    videos: &[Video],
    dict: &DictionaryConfig,
    adapt: &AdaptConfig,
    supervision: Supervision,
    eval: &EvalConfig,
) -> Result<EvalReport, CliError> {
    let runs = videos
        .iter()
        .map(|v| segment_video(params, v, dict, adapt, supervision))
        .collect::<Result<Vec<_>, _>>()?;
    let evals: Vec<VideoEval<'_>> = videos
        .iter()
        .zip(&runs)
        .map(|(v, r)| VideoEval {
            name: &v.name,
            num_classes: v.num_classes,
            predictions: &r.predictions,
            ground_truth: &v.masks,
        })
        .collect();
    Ok(evaluate(&evals, eval)?)
}

/// `(label, dictionary, adaptation)` for every row of a sweep.
fn sweep_settings(sweep: Sweep, cfg: &RunConfig) -> Vec<(String, DictionaryConfig, AdaptConfig)> {
    let (d, a) = (cfg.dictionary, cfg.adapt);
    match sweep {
        Sweep::K => [1, 2, 4, 8, 16]
            .into_iter()
            .map(|k| (k.to_string(), DictionaryConfig { k_foreground: k, ..d }, a))
            .collect(),
        Sweep::Delta => [None, Some(10), Some(5), Some(2), Some(1)]
            .into_iter()
            .map(|delta| {
                let label = delta.map_or("NA".to_string(), |x: usize| x.to_string());
                (label, d, AdaptConfig { delta, ..a })
            })
            .collect(),
        Sweep::Alpha => [0.0, 0.1, 0.3, 0.5, 0.7, 1.0, 1.4]
            .into_iter()
            .map(|alpha: f32| (alpha.to_string(), d, AdaptConfig { alpha, ..a }))
            .collect(),
        Sweep::Repr => vec![
            (
                "prototype".into(),
                DictionaryConfig {
                    k_foreground: 1,
                    background_multiplier: 1,
                    representation: Representation::Clusters,
                    ..d
                },
                a,
            ),
            (
                "nearest_neighbor".into(),
                DictionaryConfig {
                    representation: Representation::PerPixel,
                    ..d
                },
                a,
            ),
            (
                "words".into(),
                DictionaryConfig {
                    representation: Representation::Clusters,
                    ..d
                },
                a,
            ),
        ],
    }
}

fn cmd_ablate(
    data: PathBuf,
    checkpoint: PathBuf,
    sweep: Sweep,
    config: Option<PathBuf>,
    out: PathBuf,
) -> Result<(), CliError> {
    let cfg = RunConfig::load(config.as_deref())?;
    cfg.validate()?;
    let params = read_checkpoint(&checkpoint)?;
    let videos = load_eval_videos(&data, &cfg)?;
    create_dir(&out)?;
    cfg.write_resolved(&out)?;
    let name = sweep.to_possible_value().expect("named variant").get_name().to_string();
    let mut csv = String::from("sweep,value,J_mean,F_mean,JF_mean,J_decay\n");
    for (label, dict, adapt) in sweep_settings(sweep, &cfg) {
        let r = score(&params, &videos, &dict, &adapt, cfg.infer.supervision, &cfg.eval)?;
        let decay = r.j_decay_mean.map_or(String::new(), |x| format!("{x:.6}"));
        writeln!(
            csv,
            "{name},{label},{:.6},{:.6},{:.6},{decay}",
            r.j_mean, r.f_mean, r.jf_mean
        )
        .expect("write to string");
        info!("{name}={label}: J {:.4}", r.j_mean);
    }
    write_text(&out.join("ablation.csv"), &csv)
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Synth { config, out, seed } => cmd_synth(config, out, seed),
        Command::Train {
            data,
            config,
            out,
            episodes,
            seed,
            checkpoint_every,
        } => cmd_train(data, config, out, episodes, seed, checkpoint_every),
        Command::Infer {
            checkpoint,
            video,
            config,
            adapt_config,
            out,
            bbox,
            delta,
            alpha,
            confidence,
        } => cmd_infer(
            checkpoint,
            video,
            config,
            adapt_config,
            out,
            bbox,
            delta,
            alpha,
            confidence,
        ),
        Command::Eval {
            pred,
            gt,
            config,
            out,
            tolerance,
        } => cmd_eval(pred, gt, config, out, tolerance),
        Command::Ablate {
            data,
            checkpoint,
            sweep,
            config,
            out,
        } => cmd_ablate(data, checkpoint, sweep, config, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
