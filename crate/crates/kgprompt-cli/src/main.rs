//! Command line surface: validate knowledge graphs, generate descriptions
//! and synthetic datasets, train detectors, run evaluation protocols and
//! score images.

mod config;

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use kgprompt::describe::{
    generate_descriptions, save_cache, HttpLanguageModel, LanguageModel, OfflineLanguageModel,
};
use kgprompt::encoder::{encode, EncoderBackend, ImageTensor};
use kgprompt::error::{Error, Result};
use kgprompt::eval::{
    eer_threshold, render_report, render_roc_svg, run_cross_dataset, run_loocv, score_samples,
    to_train_samples, train_dev_split, SubjectProfile,
};
use kgprompt::fixtures::MASKPAD_KG_JSON;
use kgprompt::kg::parse_kg;
use kgprompt::manifest::{encode_manifest, load_manifest, EncodedSample};
use kgprompt::model::ModelState;
use kgprompt::synth::{generate_dataset, SplitPlan, SynthConfig};
use kgprompt::trainer::{fit, Checkpoint};

use config::RunConfig;

/// Writes formatted text to stdout; exits quietly once the reader is gone.
fn emit(args: std::fmt::Arguments) {
    let mut out = std::io::stdout().lock();
    if out.write_fmt(args).is_err() {
        std::process::exit(0);
    }
}

/// Like `outln!` but tolerant of a closed pipe.
macro_rules! outln {
    ($($arg:tt)*) => { emit(std::format_args!("{}\n", std::format_args!($($arg)*))) };
}

#[derive(Parser)]
#[command(
    name = "kgprompt",
    version,
    about = "Knowledge-driven 3D mask detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a knowledge graph file; no path validates the bundled graph.
    KgValidate { path: Option<PathBuf> },
    /// Generate triple descriptions and write the cache file.
    Describe {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic labelled dataset with a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 6)]
        subjects: usize,
        #[arg(long, default_value_t = 8)]
        per_class: usize,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        tint: f64,
        /// Comma-separated train,dev,test subject counts; omitted means auto.
        #[arg(long)]
        split: Option<String>,
    },
    /// Train a detector; writes a checkpoint and a loss log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an evaluation protocol from a checkpoint; writes report and plot.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = ["loocv", "cross"])]
        protocol: String,
        #[arg(long)]
        train_manifest: PathBuf,
        #[arg(long)]
        test_manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        rounds: usize,
        #[arg(long, default_value_t = 8)]
        train_subjects: usize,
        #[arg(long, default_value_t = 8)]
        dev_subjects: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score one image or a whole manifest with a trained checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(
            long,
            conflicts_with = "manifest",
            required_unless_present = "manifest"
        )]
        image: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io { .. } => 1,
        Error::NetworkError(_)
        | Error::UnparseableResponse(_)
        | Error::EmptyResponse
        | Error::EncoderFailure(_)
        | Error::BackendUnavailable(_)
        | Error::NonFiniteGradient(_)
        | Error::NonFiniteUpdate(_)
        | Error::NonFiniteLoss { .. } => 3,
        _ => 2,
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::KgValidate { path } => cmd_kg_validate(path.as_deref()),
        Command::Describe { config, out } => cmd_describe(config.as_deref(), out.as_deref()),
        Command::Synth {
            out,
            subjects,
            per_class,
            image_size,
            seed,
            tint,
            split,
        } => cmd_synth(
            &out,
            subjects,
            per_class,
            image_size,
            seed,
            tint,
            split.as_deref(),
        ),
        Command::Train { config, seed, out } => cmd_train(&config, seed, out.as_deref()),
        Command::Eval {
            checkpoint,
            protocol,
            train_manifest,
            test_manifest,
            rounds,
            train_subjects,
            dev_subjects,
            seed,
            out,
        } => cmd_eval(
            &checkpoint,
            &protocol,
            &train_manifest,
            test_manifest.as_deref(),
            rounds,
            SubjectProfile {
                train_subjects,
                dev_subjects,
            },
            seed,
            &out,
        ),
        Command::Infer {
            checkpoint,
            image,
            manifest,
            threshold,
        } => cmd_infer(
            &checkpoint,
            image.as_deref(),
            manifest.as_deref(),
            threshold,
        ),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn cmd_kg_validate(path: Option<&Path>) -> Result<()> {
    let graph = match path {
        Some(p) => {
            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
            parse_kg(&bytes)?
        }
        None => parse_kg(MASKPAD_KG_JSON.as_bytes())?,
    };
    outln!(
        "valid: {} entities, {} relations, {} triples",
        graph.entities().len(),
        graph.relations().len(),
        graph.triples().len()
    );
    Ok(())
}

fn cmd_describe(config: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let graph = cfg.load_graph()?;
    let mut cache = cfg.load_cache()?;
    let model: Box<dyn LanguageModel> = match &cfg.llm_url {
        Some(url) => Box::new(HttpLanguageModel::new(url.clone())),
        None => Box::new(OfflineLanguageModel),
    };
    let descriptions = generate_descriptions(&graph, &mut cache, model.as_ref())?;
    let out_dir = out.unwrap_or(&cfg.out_dir);
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join("descriptions.json");
    save_cache(&cache, &path)?;
    outln!("{} descriptions -> {}", descriptions.len(), path.display());
    Ok(())
}

fn cmd_synth(
    out: &Path,
    subjects: usize,
    per_class: usize,
    image_size: usize,
    seed: u64,
    tint: f64,
    split: Option<&str>,
) -> Result<()> {
    let plan = match split {
        None => SplitPlan::Auto,
        Some(text) => {
            let parts: Vec<usize> = text
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|_| Error::InvalidConfig(format!("bad split count `{p}`")))
                })
                .collect::<Result<_>>()?;
            match parts.as_slice() {
                &[train, dev, test] => SplitPlan::Subjects { train, dev, test },
                _ => {
                    return Err(Error::InvalidConfig(
                        "split needs exactly three counts: train,dev,test".into(),
                    ))
                }
            }
        }
    };
    let cfg = SynthConfig {
        subjects,
        per_class,
        image_size,
        seed,
        tint,
        plan,
        ..SynthConfig::default()
    };
    let manifest = generate_dataset(out, &cfg)?;
    outln!("{}", manifest.display());
    Ok(())
}

fn load_samples(manifest: &Path, backend: &EncoderBackend) -> Result<Vec<EncodedSample>> {
    let rows = load_manifest(manifest)?;
    encode_manifest(&rows, backend)
}

fn render_loss_log(stats: &[kgprompt::trainer::EpochStats]) -> String {
    let mut out = String::from("epoch,srd,sce,total\n");
    for row in stats {
        let _ = writeln!(out, "{},{},{},{}", row.epoch, row.srd, row.sce, row.total);
    }
    out
}

fn cmd_train(config: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(out) = out {
        cfg.out_dir = out.to_path_buf();
    }
    let graph = cfg.load_graph()?;
    let cache = cfg.load_cache()?;
    let backend = cfg.encoder_backend();
    let train_cfg = cfg.train_config();
    let manifest = cfg
        .train_manifest
        .clone()
        .ok_or_else(|| Error::InvalidConfig("config needs train_manifest".into()))?;
    let samples = load_samples(&manifest, &backend)?;
    let (train_refs, dev_refs) = train_dev_split(&samples, cfg.seed);

    let mut model = cfg.model_spec().build(&graph, &cache, cfg.seed)?;
    let stats = fit(
        &mut model,
        &to_train_samples(&graph, &train_refs)?,
        &train_cfg,
    )?;

    let threshold = if dev_refs.is_empty() {
        None
    } else {
        let dev_scores = score_samples(&model, &dev_refs)?;
        Some(eer_threshold(&dev_scores)?.0.value)
    };

    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let ckpt_path = cfg.out_dir.join("checkpoint.json");
    let ckpt = Checkpoint::from_parts(
        &model,
        &graph,
        &cache,
        &train_cfg,
        cfg.image_size,
        &backend,
        threshold,
    );
    ckpt.save(&ckpt_path)?;
    let log_path = cfg.out_dir.join("loss_log.csv");
    fs::write(&log_path, render_loss_log(&stats)).map_err(|e| Error::io(&log_path, e))?;

    let final_loss = stats.last().map(|s| s.total).unwrap_or(f64::NAN);
    outln!("checkpoint: {}", ckpt_path.display());
    outln!(
        "loss log: {} ({} epochs, final total {final_loss:.6})",
        log_path.display(),
        stats.len()
    );
    match threshold {
        Some(t) => outln!("dev threshold: {t:.6}"),
        None => outln!("dev threshold: none (no dev split)"),
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    checkpoint: &Path,
    protocol: &str,
    train_manifest: &Path,
    test_manifest: Option<&Path>,
    rounds: usize,
    profile: SubjectProfile,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let restored = ckpt.restore()?;
    let spec = ckpt.spec();
    let mut train_cfg = ckpt.train.clone();
    if let Some(seed) = seed {
        train_cfg.seed = seed;
    }
    let run_seed = train_cfg.seed;
    let train_samples = load_samples(train_manifest, &ckpt.backend)?;

    let report = match protocol {
        "loocv" => run_loocv(
            &restored.graph,
            &restored.cache,
            &spec,
            &train_cfg,
            &train_samples,
            &profile,
            rounds,
            run_seed,
        )?,
        "cross" => {
            let test_path = test_manifest.ok_or_else(|| {
                Error::InvalidConfig("protocol `cross` needs --test-manifest".into())
            })?;
            let test_samples = load_samples(test_path, &ckpt.backend)?;
            run_cross_dataset(
                &restored.graph,
                &restored.cache,
                &spec,
                &train_cfg,
                &train_samples,
                &test_samples,
                run_seed,
            )?
        }
        other => {
            return Err(Error::InvalidConfig(format!("unknown protocol `{other}`")));
        }
    };

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let report_path = out.join("report.txt");
    let text = render_report(&report);
    fs::write(&report_path, &text).map_err(|e| Error::io(&report_path, e))?;
    let plot_path = out.join("roc.svg");
    fs::write(&plot_path, render_roc_svg(&report.roc)).map_err(|e| Error::io(&plot_path, e))?;
    emit(format_args!("{text}"));
    outln!("report: {}", report_path.display());
    outln!("plot: {}", plot_path.display());
    Ok(())
}

fn infer_line(
    model: &ModelState,
    path: &Path,
    features: &kgprompt::encoder::EncoderOutput,
    threshold: f64,
) -> Result<String> {
    let real = model
        .class_index("real face")
        .ok_or_else(|| Error::InvalidConfig("model lacks the `real face` class".into()))?;
    let p_real = model.score(features)?[real];
    let decision = if p_real > threshold { "real" } else { "mask" };
    Ok(format!("{}, {p_real:.6}, {decision}", path.display()))
}

fn cmd_infer(
    checkpoint: &Path,
    image: Option<&Path>,
    manifest: Option<&Path>,
    threshold: Option<f64>,
) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let restored = ckpt.restore()?;
    let threshold = threshold.or(ckpt.threshold).ok_or_else(|| {
        Error::InvalidConfig(
            "no decision threshold: pass --threshold or train with a dev split".into(),
        )
    })?;
    if let Some(path) = image {
        let img = ImageTensor::from_png(path)?;
        let features = encode(&img, &ckpt.backend)?;
        outln!(
            "{}",
            infer_line(&restored.model, path, &features, threshold)?
        );
    }
    if let Some(path) = manifest {
        let samples = load_samples(path, &ckpt.backend)?;
        for sample in &samples {
            outln!(
                "{}",
                infer_line(&restored.model, &sample.path, &sample.features, threshold)?
            );
        }
    }
    Ok(())
}
