//! Command-line front end wiring all pipeline modules together.
//!
//! Every command resolves a single `RunConfig` (defaults, overlaid by
//! `--config`, then by `--seed`), echoes it into the run directory as
//! `config.json`, and derives all randomness from it — re-running a command
//! from its echoed config reproduces its outputs byte-identically. Errors
//! are emitted as one JSON object on stderr with a family-specific exit
//! code.

use clap::{Parser, Subcommand};
use microdiff_core::adapters::{
    control_train, init_control_params, AdapterTrainConfig, ControlExample, LoraSet,
};
use microdiff_core::backbone::{Backbone, BackboneConfig, ModelParams};
use microdiff_core::codec::{Codec, CodecConfig};
use microdiff_core::diffusion::{NoiseSchedule, ScheduleConfig};
use microdiff_core::embedder::{ConditionGrid, Embedder, EmbedderConfig};
use microdiff_core::flow::{
    flow_train, stain_translate_pipeline, FlowTrainConfig, VelocityNet, VelocityNetConfig,
};
use microdiff_core::imagebuf::ImageTensor;
use microdiff_core::ingest::{
    build_manifest, make_toy_corpus, precompute_caches, write_manifest, SourceImage, ToyCorpusSpec,
    ToyGenerator,
};
use microdiff_core::io::{bytes_sha256, file_sha256, Checkpoint, CheckpointMeta};
use microdiff_core::metrics::{full_image_fid, ToyFeatureExtractor};
use microdiff_core::pipeline::{
    generate_variations, train_stage, StageInit, StageSpec, TrainConfig,
};
use microdiff_core::rng::derive_rng_indexed;
use microdiff_core::sampler::{argmin_w, sample, SamplerConfig, SweepRow};
use microdiff_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "microdiff", about = "Desk-scale latent diffusion pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// JSON run configuration overlaying the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the top-level seed of the resolved configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory receiving all outputs (config echo, checkpoints, logs).
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,
    /// Print the resolved configuration and exit without doing work.
    #[arg(long, global = true)]
    dry_run: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the toy corpus, build its manifest, and fill the caches.
    Ingest,
    /// Train one curriculum stage.
    Train {
        #[arg(long)]
        stage: usize,
    },
    /// Sample images conditioned on a reference embedding.
    Sample {
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Generate variation sets for several reference images.
    Variations {
        #[arg(long, default_value_t = 2)]
        count: usize,
        #[arg(long, default_value_t = 2)]
        refs: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the mask-control branch against a frozen base.
    ControlnetTrain {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fine-tune low-rank adapters on the target domain.
    LoraTrain {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the embedding-translation flow on paired domains.
    FlowTrain,
    /// Translate source-domain tiles end to end.
    Translate {
        #[arg(long, default_value_t = 2)]
        refs: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        flow_checkpoint: Option<PathBuf>,
        #[arg(long)]
        lora: Option<PathBuf>,
    },
    /// FID between two directories of PNG images.
    Eval {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Pick the best guidance scale from a sweep table.
    Sweep {
        #[arg(long)]
        fixture: PathBuf,
    },
}

/// Flow model description carried in the run configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct FlowSection {
    width: usize,
    depth: usize,
    time_dim: usize,
    /// Euler steps at translation time.
    steps: usize,
    train: FlowTrainConfig,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct LoraSection {
    rank: usize,
    alpha: f32,
    train: AdapterTrainConfig,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct ControlSection {
    /// Control scale applied at sampling time.
    scale: f64,
    train: AdapterTrainConfig,
}

/// Everything a run depends on, in one serializable document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    seed: u64,
    schedule: ScheduleConfig,
    backbone: BackboneConfig,
    codec: CodecConfig,
    embedder: EmbedderConfig,
    train: TrainConfig,
    stages: Vec<StageSpec>,
    sampler: SamplerConfig,
    corpus: ToyCorpusSpec,
    /// Condition-token grid laid over each tile.
    grid: (usize, usize),
    flow: FlowSection,
    lora: LoraSection,
    control: ControlSection,
    /// Manifest split fraction and tiling for `ingest`.
    test_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            schedule: ScheduleConfig::default(),
            backbone: BackboneConfig::default(),
            codec: CodecConfig::default(),
            embedder: EmbedderConfig::default(),
            train: TrainConfig::default(),
            stages: vec![
                StageSpec::toy(1).expect("stage 1"),
                StageSpec::toy(2).expect("stage 2"),
                StageSpec::toy(3).expect("stage 3"),
            ],
            sampler: SamplerConfig::default(),
            corpus: ToyCorpusSpec {
                generator: ToyGenerator::Textures,
                n: 32,
                resolution: 32,
                seed: 0,
                density: 0.3,
            },
            grid: (4, 4),
            flow: FlowSection {
                width: 128,
                depth: 4,
                time_dim: 16,
                steps: 50,
                train: FlowTrainConfig::default(),
            },
            lora: LoraSection {
                rank: 4,
                alpha: 8.0,
                train: AdapterTrainConfig::default(),
            },
            control: ControlSection {
                scale: 1.0,
                train: AdapterTrainConfig::default(),
            },
            test_fraction: 0.1,
        }
    }
}

#[derive(Serialize)]
struct CliError {
    error: &'static str,
    message: String,
}

fn fail(family: &'static str, code: u8, message: String) -> ExitCode {
    let payload = CliError {
        error: family,
        message,
    };
    eprintln!("{}", serde_json::to_string(&payload).expect("error json"));
    ExitCode::from(code)
}

fn exit_for(err: microdiff_core::Error) -> ExitCode {
    use microdiff_core::Error as E;
    match err {
        E::StageContract(m) => fail("stage prerequisite", 2, m),
        E::Config(m) => fail("config", 3, m),
        E::Io(e) => fail("io", 4, e.to_string()),
        E::Checkpoint(m) => fail("checkpoint", 5, m),
        other => fail("internal", 1, other.to_string()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => return fail("io", 4, format!("cannot read config {}: {e}", path.display())),
        };
        cfg = match serde_json::from_str(&text) {
            Ok(c) => c,
            Err(e) => return fail("config", 3, format!("invalid config: {e}")),
        };
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
        cfg.corpus.seed = seed;
        cfg.sampler.seed = seed;
        cfg.flow.train.seed = seed;
        cfg.lora.train.seed = seed;
        cfg.control.train.seed = seed;
    }

    let echo = match serde_json::to_string_pretty(&cfg) {
        Ok(s) => s,
        Err(e) => return fail("config", 3, e.to_string()),
    };
    if cli.dry_run {
        println!("{echo}");
        return ExitCode::SUCCESS;
    }
    if let Err(e) = std::fs::create_dir_all(&cli.run_dir) {
        return fail("io", 4, e.to_string());
    }
    if let Err(e) = std::fs::write(cli.run_dir.join("config.json"), format!("{echo}\n")) {
        return fail("io", 4, e.to_string());
    }

    let result = match &cli.cmd {
        Cmd::Ingest => cmd_ingest(&cfg, &cli.run_dir),
        Cmd::Train { stage } => cmd_train(&cfg, &cli.run_dir, *stage),
        Cmd::Sample { count, checkpoint } => {
            cmd_sample(&cfg, &cli.run_dir, *count, checkpoint.as_deref())
        }
        Cmd::Variations {
            count,
            refs,
            checkpoint,
        } => cmd_variations(&cfg, &cli.run_dir, *count, *refs, checkpoint.as_deref()),
        Cmd::ControlnetTrain { checkpoint } => {
            cmd_controlnet_train(&cfg, &cli.run_dir, checkpoint.as_deref())
        }
        Cmd::LoraTrain { checkpoint } => cmd_lora_train(&cfg, &cli.run_dir, checkpoint.as_deref()),
        Cmd::FlowTrain => cmd_flow_train(&cfg, &cli.run_dir),
        Cmd::Translate {
            refs,
            checkpoint,
            flow_checkpoint,
            lora,
        } => cmd_translate(
            &cfg,
            &cli.run_dir,
            *refs,
            checkpoint.as_deref(),
            flow_checkpoint.as_deref(),
            lora.as_deref(),
        ),
        Cmd::Eval { a, b } => cmd_eval(a, b),
        Cmd::Sweep { fixture } => cmd_sweep(fixture),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => exit_for(e),
    }
}

type Result<T> = microdiff_core::Result<T>;

fn config_sha256(cfg: &RunConfig) -> Result<String> {
    Ok(bytes_sha256(serde_json::to_string(cfg)?.as_bytes()))
}

fn build_schedule(cfg: &RunConfig) -> Result<NoiseSchedule> {
    NoiseSchedule::from_config(&cfg.schedule)
}

/// Encode + embed the whole toy corpus into (latent, grid) training pairs.
fn training_pairs(
    images: &[ImageTensor],
    codec: &Codec,
    embedder: &Embedder,
    grid: (usize, usize),
) -> Result<Vec<(Tensor, ConditionGrid)>> {
    images
        .iter()
        .map(|img| Ok((codec.encode(img)?, embedder.embed_grid(img, grid.0, grid.1)?)))
        .collect()
}

/// Newest checkpoint in `run_dir/checkpoints` whose file name starts with
/// the given prefix, by highest step suffix.
fn find_checkpoint(run_dir: &Path, prefix: &str) -> Option<PathBuf> {
    let dir = run_dir.join("checkpoints");
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in std::fs::read_dir(dir).ok()? {
        let path = entry.ok()?.path();
        let name = path.file_name()?.to_str()?.to_string();
        if let Some(rest) = name
            .strip_prefix(prefix)
            .and_then(|r| r.strip_prefix("_step"))
            .and_then(|r| r.strip_suffix(".ckpt"))
        {
            if let Ok(step) = rest.parse::<u64>() {
                if best.as_ref().map(|(s, _)| step > *s).unwrap_or(true) {
                    best = Some((step, path));
                }
            }
        }
    }
    best.map(|(_, p)| p)
}

fn load_base_checkpoint(
    run_dir: &Path,
    explicit: Option<&Path>,
    wanted: &str,
) -> Result<(Checkpoint, PathBuf)> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => find_checkpoint(run_dir, wanted).ok_or_else(|| {
            microdiff_core::Error::StageContract(format!(
                "no {wanted} checkpoint found in {}",
                run_dir.join("checkpoints").display()
            ))
        })?,
    };
    Ok((Checkpoint::load(&path)?, path))
}

fn write_png(path: &Path, img: &ImageTensor) -> Result<()> {
    let mut buf = image::RgbImage::new(img.width() as u32, img.height() as u32);
    for y in 0..img.height() {
        for x in 0..img.width() {
            let p = img.pixel(y, x);
            let to8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            buf.put_pixel(x as u32, y as u32, image::Rgb([to8(p[0]), to8(p[1]), to8(p[2])]));
        }
    }
    buf.save(path)
        .map_err(|e| microdiff_core::Error::Checkpoint(format!("png write failed: {e}")))?;
    Ok(())
}

fn read_png(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path)
        .map_err(|e| microdiff_core::Error::Checkpoint(format!("png read failed: {e}")))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = ImageTensor::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            out.set_pixel(
                y,
                x,
                [
                    p[0] as f32 / 255.0,
                    p[1] as f32 / 255.0,
                    p[2] as f32 / 255.0,
                ],
            );
        }
    }
    Ok(out)
}

fn cmd_ingest(cfg: &RunConfig, run_dir: &Path) -> Result<()> {
    let corpus = make_toy_corpus(&cfg.corpus)?;
    let sources: Vec<SourceImage> = corpus
        .images
        .iter()
        .enumerate()
        .map(|(i, img)| SourceImage {
            name: format!("toy{i:04}"),
            tag: format!("{:?}", cfg.corpus.generator).to_lowercase(),
            image: img.clone(),
        })
        .collect();
    let patch = cfg.corpus.resolution;
    let manifest = build_manifest(&sources, patch, patch, cfg.test_fraction, cfg.seed)?;
    write_manifest(&run_dir.join("manifest.jsonl"), &manifest)?;
    let lookup: HashMap<String, ImageTensor> = sources
        .iter()
        .map(|s| (s.name.clone(), s.image.clone()))
        .collect();
    let codec = Codec::new(cfg.codec);
    let embedder = Embedder::new(cfg.embedder);
    let report = precompute_caches(
        &manifest,
        &lookup,
        &codec,
        &embedder,
        cfg.grid,
        &run_dir.join("cache"),
    )?;
    println!(
        "{}",
        serde_json::json!({
            "entries": manifest.len(),
            "cached": report.written,
            "skipped": report.skipped,
            "errors": report.errors.len(),
        })
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, run_dir: &Path, stage: usize) -> Result<()> {
    let spec = *cfg
        .stages
        .iter()
        .find(|s| s.stage == stage)
        .ok_or_else(|| microdiff_core::Error::Config(format!("no stage {stage} in config")))?;
    let backbone = Backbone::new(cfg.backbone)?;
    let schedule = build_schedule(cfg)?;
    let codec = Codec::new(cfg.codec);
    let embedder = Embedder::new(cfg.embedder);
    let corpus = make_toy_corpus(&cfg.corpus)?;
    let pairs = training_pairs(&corpus.images, &codec, &embedder, cfg.grid)?;

    let prev;
    let init = if stage == 1 {
        StageInit::Fresh(cfg.seed)
    } else {
        let prefix = format!("stage{}", stage - 1);
        let path = find_checkpoint(run_dir, &prefix).ok_or_else(|| {
            microdiff_core::Error::StageContract(format!(
                "stage {stage} requires a {prefix} checkpoint in {}",
                run_dir.join("checkpoints").display()
            ))
        })?;
        prev = Checkpoint::load(&path)?;
        StageInit::Warm(&prev)
    };
    let out = train_stage(
        &backbone,
        init,
        &pairs,
        &schedule,
        &spec,
        &cfg.train,
        Some(run_dir),
    )?;
    println!(
        "{}",
        serde_json::json!({
            "stage": stage,
            "steps": spec.steps,
            "final_loss": out.losses.last(),
            "checkpoint": out.checkpoint_path,
        })
    );
    Ok(())
}

/// The newest curriculum checkpoint of the highest completed stage.
fn latest_stage_checkpoint(run_dir: &Path) -> Option<PathBuf> {
    for stage in (1..=3).rev() {
        if let Some(p) = find_checkpoint(run_dir, &format!("stage{stage}")) {
            return Some(p);
        }
    }
    None
}

fn load_model(
    cfg: &RunConfig,
    run_dir: &Path,
    explicit: Option<&Path>,
) -> Result<(Backbone, ModelParams, PathBuf)> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => latest_stage_checkpoint(run_dir).ok_or_else(|| {
            microdiff_core::Error::StageContract(format!(
                "no trained checkpoint in {}",
                run_dir.join("checkpoints").display()
            ))
        })?,
    };
    let ckpt = Checkpoint::load(&path)?;
    let backbone = Backbone::new(cfg.backbone)?;
    Ok((backbone, ckpt.tensors, path))
}

#[derive(Serialize)]
struct SampleSidecar {
    seeds: Vec<u64>,
    files: Vec<String>,
    config_sha256: String,
    checkpoint_sha256: String,
    sampler: SamplerConfig,
}

fn cmd_sample(
    cfg: &RunConfig,
    run_dir: &Path,
    count: usize,
    checkpoint: Option<&Path>,
) -> Result<()> {
    let (backbone, params, ckpt_path) = load_model(cfg, run_dir, checkpoint)?;
    let schedule = build_schedule(cfg)?;
    let codec = Codec::new(cfg.codec);
    let embedder = Embedder::new(cfg.embedder);
    let corpus = make_toy_corpus(&cfg.corpus)?;
    let reference = corpus
        .images
        .first()
        .ok_or_else(|| microdiff_core::Error::EmptyInput("toy corpus".into()))?;
    let grid = embedder.embed_grid(reference, cfg.grid.0, cfg.grid.1)?;
    let f = cfg.codec.factor;
    let shape = [
        reference.height() / f,
        reference.width() / f,
        cfg.codec.latent_channels(),
    ];
    let model = microdiff_core::backbone::DitEpsModel {
        backbone: &backbone,
        params: &params,
        t_max: schedule.t_steps(),
        null_dims: (grid.rows(), grid.cols()),
    };
    let out_dir = run_dir.join("samples");
    std::fs::create_dir_all(&out_dir)?;
    let mut seeds = Vec::with_capacity(count);
    let mut files = Vec::with_capacity(count);
    for k in 0..count {
        let seed: u64 = derive_rng_indexed(cfg.sampler.seed, "cli-sample", &[k as u64]).gen();
        let s_cfg = SamplerConfig {
            seed,
            ..cfg.sampler
        };
        let lat = sample(&model, &schedule, Some(&grid), &shape, &s_cfg)?;
        let img = codec.decode(&lat)?.clamp01();
        let name = format!("sample_{k:03}.png");
        write_png(&out_dir.join(&name), &img)?;
        seeds.push(seed);
        files.push(name);
    }
    let sidecar = SampleSidecar {
        seeds,
        files,
        config_sha256: config_sha256(cfg)?,
        checkpoint_sha256: file_sha256(&ckpt_path)?,
        sampler: cfg.sampler,
    };
    std::fs::write(
        out_dir.join("samples.json"),
        format!("{}\n", serde_json::to_string_pretty(&sidecar)?),
    )?;
    println!("{}", serde_json::json!({ "samples": count, "dir": out_dir }));
    Ok(())
}

fn cmd_variations(
    cfg: &RunConfig,
    run_dir: &Path,
    count: usize,
    refs: usize,
    checkpoint: Option<&Path>,
) -> Result<()> {
    let (backbone, params, ckpt_path) = load_model(cfg, run_dir, checkpoint)?;
    let schedule = build_schedule(cfg)?;
    let codec = Codec::new(cfg.codec);
    let embedder = Embedder::new(cfg.embedder);
    let corpus = make_toy_corpus(&cfg.corpus)?;
    let refs: Vec<ImageTensor> = corpus.images.into_iter().take(refs).collect();
    let set = generate_variations(
        &refs,
        &backbone,
        &params,
        &codec,
        &embedder,
        cfg.grid,
        &schedule,
        &cfg.sampler,
        count,
    )?;
    let out_dir = run_dir.join("variations");
    std::fs::create_dir_all(&out_dir)?;
    for rec in &set.records {
        let name = format!("ref{:03}_var{:03}.png", rec.reference, rec.index);
        write_png(&out_dir.join(name), &set.images[rec.reference][rec.index])?;
    }
    std::fs::write(
        out_dir.join("variations.json"),
        format!(
            "{}\n",
            serde_json::to_string_pretty(&serde_json::json!({
                "records": set.records,
                "config_sha256": config_sha256(cfg)?,
                "checkpoint_sha256": file_sha256(&ckpt_path)?,
            }))?
        ),
    )?;
    println!(
        "{}",
        serde_json::json!({ "references": refs.len(), "per_ref": count, "dir": out_dir })
    );
    Ok(())
}

fn masked_corpus(cfg: &RunConfig) -> ToyCorpusSpec {
    ToyCorpusSpec {
        generator: ToyGenerator::MaskedCells,
        ..cfg.corpus
    }
}

fn cmd_controlnet_train(cfg: &RunConfig, run_dir: &Path, checkpoint: Option<&Path>) -> Result<()> {
    let (backbone, base, ckpt_path) = load_model(cfg, run_dir, checkpoint)?;
    let schedule = build_schedule(cfg)?;
    let codec = Codec::new(cfg.codec);
    let embedder = Embedder::new(cfg.embedder);
    let corpus = make_toy_corpus(&masked_corpus(cfg))?;
    let masks = corpus
        .masks
        .as_ref()
        .ok_or_else(|| microdiff_core::Error::Config("masked corpus has no masks".into()))?;
    let data: Vec<ControlExample> = corpus
        .images
        .iter()
        .zip(masks)
        .map(|(img, mask)| {
            Ok(ControlExample {
                latent: codec.encode(img)?,
                cond: embedder.embed_grid(img, cfg.grid.0, cfg.grid.1)?,
                mask: mask.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let mut ctrl = init_control_params(&backbone, &base, cfg.seed);
    let losses = control_train(&backbone, &base, &mut ctrl, &schedule, &data, &cfg.control.train)?;
    let ckpts = run_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpts)?;
    let path = ckpts.join(format!("controlnet_step{}.ckpt", cfg.control.train.steps));
    Checkpoint {
        meta: CheckpointMeta {
            stage: "controlnet".into(),
            step: cfg.control.train.steps as u64,
            config: serde_json::to_value(cfg.control)?,
            base_hash: Some(file_sha256(&ckpt_path)?),
        },
        tensors: ctrl,
    }
    .save(&path)?;
    println!(
        "{}",
        serde_json::json!({ "final_loss": losses.last(), "checkpoint": path })
    );
    Ok(())
}

fn cmd_lora_train(cfg: &RunConfig, run_dir: &Path, checkpoint: Option<&Path>) -> Result<()> {
    let (backbone, base, _) = load_model(cfg, run_dir, checkpoint)?;
    let schedule = build_schedule(cfg)?;
    let codec = Codec::new(cfg.codec);
    let embedder = Embedder::new(cfg.embedder);
    let spec = ToyCorpusSpec {
        generator: ToyGenerator::TwoDomain,
        ..cfg.corpus
    };
    let corpus = make_toy_corpus(&spec)?;
    let targets = corpus
        .pairs
        .as_ref()
        .ok_or_else(|| microdiff_core::Error::Config("two-domain corpus has no pairs".into()))?;
    let pairs = training_pairs(targets, &codec, &embedder, cfg.grid)?;
    let set = LoraSet::init_for_backbone(&backbone, &base, cfg.lora.rank, cfg.lora.alpha, cfg.seed)?;
    let (trained, losses) =
        microdiff_core::adapters::lora_finetune(&backbone, &base, &set, &schedule, &pairs, &cfg.lora.train)?;
    let ckpts = run_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpts)?;
    let path = ckpts.join(format!("lora_step{}.ckpt", cfg.lora.train.steps));
    microdiff_core::adapters::save_lora(&path, &trained, &base, cfg.lora.train.steps as u64)?;
    println!(
        "{}",
        serde_json::json!({ "final_loss": losses.last(), "checkpoint": path })
    );
    Ok(())
}

fn flow_net(cfg: &RunConfig) -> Result<VelocityNet> {
    VelocityNet::new(VelocityNetConfig {
        dim: cfg.embedder.dim,
        width: cfg.flow.width,
        depth: cfg.flow.depth,
        time_dim: cfg.flow.time_dim,
    })
}

/// Token-level embedding pairs from the paired two-domain corpus.
fn domain_token_pairs(cfg: &RunConfig) -> Result<Vec<(Vec<f32>, Vec<f32>)>> {
    let spec = ToyCorpusSpec {
        generator: ToyGenerator::TwoDomain,
        ..cfg.corpus
    };
    let corpus = make_toy_corpus(&spec)?;
    let targets = corpus
        .pairs
        .as_ref()
        .ok_or_else(|| microdiff_core::Error::Config("two-domain corpus has no pairs".into()))?;
    let embedder = Embedder::new(cfg.embedder);
    let mut out = Vec::new();
    for (src, tgt) in corpus.images.iter().zip(targets) {
        let gs = embedder.embed_grid(src, cfg.grid.0, cfg.grid.1)?;
        let gt = embedder.embed_grid(tgt, cfg.grid.0, cfg.grid.1)?;
        for r in 0..gs.rows() {
            for c in 0..gs.cols() {
                out.push((gs.token(r, c).to_vec(), gt.token(r, c).to_vec()));
            }
        }
    }
    Ok(out)
}

fn cmd_flow_train(cfg: &RunConfig, run_dir: &Path) -> Result<()> {
    let net = flow_net(cfg)?;
    let mut params = net.init_params(cfg.seed);
    let pairs = domain_token_pairs(cfg)?;
    let losses = flow_train(&net, &mut params, &pairs, &cfg.flow.train)?;
    let ckpts = run_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpts)?;
    let path = ckpts.join(format!("flow_step{}.ckpt", cfg.flow.train.steps));
    Checkpoint {
        meta: CheckpointMeta {
            stage: "flow".into(),
            step: cfg.flow.train.steps as u64,
            config: serde_json::to_value(cfg.flow)?,
            base_hash: None,
        },
        tensors: params,
    }
    .save(&path)?;
    println!(
        "{}",
        serde_json::json!({ "pairs": pairs.len(), "final_loss": losses.last(), "checkpoint": path })
    );
    Ok(())
}

fn cmd_translate(
    cfg: &RunConfig,
    run_dir: &Path,
    refs: usize,
    checkpoint: Option<&Path>,
    flow_checkpoint: Option<&Path>,
    lora: Option<&Path>,
) -> Result<()> {
    let (backbone, base, ckpt_path) = load_model(cfg, run_dir, checkpoint)?;
    let (flow_ckpt, flow_path) = load_base_checkpoint(run_dir, flow_checkpoint, "flow")?;
    if flow_ckpt.meta.stage != "flow" {
        return Err(microdiff_core::Error::Checkpoint(format!(
            "expected a flow checkpoint, got `{}`",
            flow_ckpt.meta.stage
        )));
    }
    let lora_set = match lora {
        Some(p) => Some(microdiff_core::adapters::load_lora(p, &base)?),
        None => None,
    };
    let net = flow_net(cfg)?;
    let schedule = build_schedule(cfg)?;
    let codec = Codec::new(cfg.codec);
    let embedder = Embedder::new(cfg.embedder);
    let spec = ToyCorpusSpec {
        generator: ToyGenerator::TwoDomain,
        ..cfg.corpus
    };
    let corpus = make_toy_corpus(&spec)?;
    let out_dir = run_dir.join("translated");
    std::fs::create_dir_all(&out_dir)?;
    let mut files = Vec::new();
    for (i, src) in corpus.images.iter().take(refs).enumerate() {
        let img = stain_translate_pipeline(
            src,
            &codec,
            &embedder,
            cfg.grid,
            &net,
            &flow_ckpt.tensors,
            cfg.flow.steps,
            &backbone,
            &base,
            lora_set.as_ref(),
            &schedule,
            &cfg.sampler,
        )
        .map_err(|e| {
            microdiff_core::Error::Checkpoint(format!("translation failed at tile {i}: {e}"))
        })?;
        let name = format!("translated_{i:03}.png");
        write_png(&out_dir.join(&name), &img)?;
        files.push(name);
    }
    std::fs::write(
        out_dir.join("translate.json"),
        format!(
            "{}\n",
            serde_json::to_string_pretty(&serde_json::json!({
                "files": files,
                "config_sha256": config_sha256(cfg)?,
                "checkpoint_sha256": file_sha256(&ckpt_path)?,
                "flow_sha256": file_sha256(&flow_path)?,
            }))?
        ),
    )?;
    println!("{}", serde_json::json!({ "translated": files.len(), "dir": out_dir }));
    Ok(())
}

fn read_image_dir(dir: &Path) -> Result<Vec<ImageTensor>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(microdiff_core::Error::EmptyInput(format!(
            "no png files in {}",
            dir.display()
        )));
    }
    paths.iter().map(|p| read_png(p)).collect()
}

fn cmd_eval(a: &Path, b: &Path) -> Result<()> {
    let imgs_a = read_image_dir(a)?;
    let imgs_b = read_image_dir(b)?;
    let extractor = ToyFeatureExtractor::default();
    let fid = full_image_fid(&imgs_a, &imgs_b, &extractor)?;
    println!(
        "{}",
        serde_json::json!({
            "metric": "fid",
            "value": fid,
            "protocol": { "extractor": "toy-embed", "a": imgs_a.len(), "b": imgs_b.len() },
        })
    );
    Ok(())
}

fn cmd_sweep(fixture: &Path) -> Result<()> {
    let rows: Vec<SweepRow> = serde_json::from_str(&std::fs::read_to_string(fixture)?)?;
    let best = argmin_w(&rows)?;
    println!(
        "{}",
        serde_json::json!({ "best_w": best, "rows": rows.len() })
    );
    Ok(())
}
