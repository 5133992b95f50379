//! `refvfx`: data generation, training, adaptation, sampling, evaluation,
//! attention benchmarks and media export.

mod config;
mod export;
mod videos;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use refvfx::adapt::{self, AdaptConfig};
use refvfx::assembly::SegmentLayout;
use refvfx::checkpoint::{self, ConceptManifest, TrainingInfo};
use refvfx::data::{self, Family, PairSample};
use refvfx::denoiser::{self, DenoiserParams};
use refvfx::diffusion::{self, Phase, TrainConfig, TrainPair};
use refvfx::eval::{self, EvalReport, RemoteConfig, RemoteJudge, Templates, Truth};
use refvfx::icmask::MaskMode;
use refvfx::manifest;
use refvfx::parallel::Exec;
use refvfx::rng;
use refvfx::tensor::Tensor;

use config::{Overrides, RunConfig, StepsTarget};

#[derive(Parser, Debug)]
#[command(name = "refvfx", version, about = "Reference-conditioned toy video effects")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    mask_mode: Option<MaskArg>,
    /// Same as `--mask-mode none`.
    #[arg(long, global = true, conflicts_with = "mask_mode")]
    no_attn_mask: bool,
    /// Optimiser steps for train/adapt, sampler steps for infer/evaluate.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Run batch elements one after another.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MaskArg {
    Canonical,
    None,
}

impl From<MaskArg> for MaskMode {
    fn from(m: MaskArg) -> Self {
        match m {
            MaskArg::Canonical => MaskMode::Canonical,
            MaskArg::None => MaskMode::None,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PhaseArg {
    Backbone,
    InContext,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum JudgeArg {
    Oracle,
    Remote,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic effect dataset.
    GenerateData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        pairs: Option<usize>,
        /// Comma-separated effect families.
        #[arg(long, value_delimiter = ',')]
        families: Option<Vec<Family>>,
    },
    /// Train a denoiser; without `--init` an unconditional pretraining run comes first.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, value_enum)]
        phase: Option<PhaseArg>,
    },
    /// Learn concept tokens from one clip of a dataset.
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Pair whose target clip is the single example.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Sidecar root; tokens land in `<out>/<effect>/`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        tokens: Option<usize>,
    },
    /// Generate videos for the pairs of a dataset.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Concept-token sidecar directory.
        #[arg(long)]
        with_ce: Option<PathBuf>,
        /// Number of pairs; all when omitted.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Score generated videos, or the dataset's own targets without `--checkpoint`.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        with_ce: Option<PathBuf>,
        #[arg(long, value_enum)]
        judge: Option<JudgeArg>,
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long)]
        clips: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time masked-full against decomposed attention.
    BenchAttention {
        /// Segment lengths `g_tgt,g_ref,z_tgt,z_ref[,z_ce]`.
        #[arg(long, value_delimiter = ',', default_value = "8,8,256,256")]
        layout: Vec<usize>,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 16)]
        head_dim: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write videos as PNG frames or GIFs.
    Export {
        /// Dataset or video-set directory.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "png-strip")]
        format: export::Format,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        scale: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    let target = match &cli.command {
        Command::Train { .. } => StepsTarget::Train,
        Command::Adapt { .. } => StepsTarget::Adapt,
        Command::Infer { .. } | Command::Evaluate { .. } => StepsTarget::Sample,
        _ => StepsTarget::None,
    };
    let mask_mode = if cli.no_attn_mask {
        Some(MaskMode::None)
    } else {
        cli.mask_mode.map(MaskMode::from)
    };
    cfg.apply(
        &Overrides {
            seed: cli.seed,
            mask_mode,
            steps: cli.steps,
        },
        target,
    );
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match cli.command {
        Command::GenerateData { out, pairs, families } => {
            if let Some(p) = pairs {
                cfg.data.pairs = p;
            }
            if let Some(f) = families {
                cfg.data.families = f;
            }
            log_config(&cfg)?;
            let m = data::build_dataset(cfg.data.pairs, &cfg.data.families, &out, cfg.seed, exec, Some(&cfg.to_table()?))?;
            info!("wrote {} pairs to {}", m.pairs.len(), out.display());
        }
        Command::Train { data, out, init, phase } => {
            if let Some(p) = phase {
                cfg.train.phase = match p {
                    PhaseArg::Backbone => Phase::Backbone,
                    PhaseArg::InContext => Phase::InContext,
                };
            }
            log_config(&cfg)?;
            train(&cfg, &data, &out, init.as_deref(), exec)?;
        }
        Command::Adapt { checkpoint, data, index, out, tokens } => {
            if let Some(t) = tokens {
                cfg.adapt.concept_tokens = t;
            }
            log_config(&cfg)?;
            run_adapt(&cfg.adapt, &checkpoint, &data, index, &out, exec)?;
        }
        Command::Infer { checkpoint, data, out, with_ce, count } => {
            log_config(&cfg)?;
            let (_, pairs) = data::load_dataset(&data)?;
            let n = count.unwrap_or(pairs.len()).min(pairs.len());
            let gens = generate(&cfg, &checkpoint, with_ce.as_deref(), &pairs[..n], exec)?;
            let named: Vec<_> = gens.into_iter().enumerate().map(|(i, v)| (format!("sample{i:04}"), v)).collect();
            videos::write(&out, &named, &cfg.to_table()?)?;
            info!("wrote {} videos to {}", named.len(), out.display());
        }
        Command::Evaluate { data, checkpoint, with_ce, judge, endpoint, clips, out } => {
            if let Some(j) = judge {
                cfg.eval.judge = match j {
                    JudgeArg::Oracle => "oracle",
                    JudgeArg::Remote => "remote",
                }
                .into();
            }
            if endpoint.is_some() {
                cfg.eval.endpoint = endpoint;
            }
            if let Some(c) = clips {
                cfg.eval.clips = c;
            }
            log_config(&cfg)?;
            evaluate(&cfg, &data, checkpoint.as_deref(), with_ce.as_deref(), &out, exec)?;
        }
        Command::BenchAttention { layout, heads, head_dim, repeats, out } => {
            log_config(&cfg)?;
            let l = match layout.as_slice() {
                [a, b, c, d] => SegmentLayout::in_context(*a, *b, *c, *d, None)?,
                [a, b, c, d, e] => SegmentLayout::in_context(*a, *b, *c, *d, Some(*e))?,
                _ => bail!("--layout needs 4 or 5 segment lengths"),
            };
            let table = cfg.train.mask_mode.table();
            let report = denoiser::bench_attention(&l, &table, heads, head_dim, repeats, cfg.seed)?;
            let text = report.to_text();
            print!("{text}");
            if let Some(path) = out {
                manifest::write_atomic(&path, text.as_bytes())?;
            }
        }
        Command::Export { input, format, out, scale } => {
            let vids = videos::read(&input)?;
            let files = export::export(&vids, format, &out, scale)?;
            info!("wrote {} files to {}", files.len(), out.display());
        }
    }
    Ok(())
}

fn log_config(cfg: &RunConfig) -> Result<()> {
    info!("resolved config:\n{}", cfg.to_text()?);
    Ok(())
}

fn train_pairs(dir: &Path) -> Result<Vec<TrainPair>> {
    let (_, pairs) = data::load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    pairs.iter().map(|p| p.train_pair().map_err(Into::into)).collect()
}

fn progress(label: &'static str, total: usize) -> impl FnMut(usize, f64) {
    let every = (total / 20).max(1);
    move |step, loss| {
        if step % every == 0 || step + 1 == total {
            info!("{label} step {step}/{total} loss {loss:.5}");
        }
    }
}

fn train(cfg: &RunConfig, data: &Path, out: &Path, init: Option<&Path>, exec: Exec) -> Result<()> {
    let pairs = train_pairs(data)?;
    let mut params = match init {
        Some(dir) => checkpoint::load::<f32>(dir)?.0,
        None => DenoiserParams::<f32>::init(cfg.model.clone(), cfg.seed)?,
    };
    let mut csv = String::from("stage,step,loss\n");
    if init.is_none() && cfg.train.phase != Phase::Backbone && cfg.pretrain.steps > 0 {
        let pre = TrainConfig {
            phase: Phase::Backbone,
            ..cfg.pretrain.clone()
        };
        let log = diffusion::train(&mut params, &pairs, &pre, exec, progress("pretrain", pre.steps))?;
        csv.push_str(&tag_csv("pretrain", &log.to_csv()));
    }
    let attention_before = params.checksum(&[denoiser::ParamGroup::Backbone, denoiser::ParamGroup::Concept]);
    let log = diffusion::train(&mut params, &pairs, &cfg.train, exec, progress("train", cfg.train.steps))?;
    if cfg.train.phase == Phase::InContext
        && params.checksum(&[denoiser::ParamGroup::Backbone, denoiser::ParamGroup::Concept]) != attention_before
    {
        bail!("in-context training changed frozen parameters");
    }
    csv.push_str(&tag_csv("train", &log.to_csv()));
    let info = TrainingInfo {
        phase: format!("{:?}", cfg.train.phase),
        steps: cfg.train.steps,
        seed: cfg.seed,
        trainable: cfg.train.phase.trainable().to_vec(),
        final_loss: log.losses.last().copied(),
    };
    checkpoint::save(out, &params, &info, Some(&cfg.to_table()?))?;
    manifest::write_atomic(&out.join("loss.csv"), csv.as_bytes())?;
    info!("checkpoint written to {}", out.display());
    Ok(())
}

fn tag_csv(stage: &str, csv: &str) -> String {
    csv.lines().skip(1).map(|l| format!("{stage},{l}\n")).collect()
}

fn run_adapt(cfg: &AdaptConfig, ckpt: &Path, data: &Path, index: usize, out: &Path, exec: Exec) -> Result<()> {
    let (params, _) = checkpoint::load::<f32>(ckpt)?;
    let (_, pairs) = data::load_dataset(data)?;
    let pair = pairs.get(index).ok_or_else(|| anyhow!("dataset has no pair {index}"))?;
    let outcome = adapt::adapt(
        &params,
        &pair.target.prompt,
        &pair.target.video,
        cfg,
        exec,
        progress("adapt", cfg.steps),
    )?;
    let effect = pair.effect.family.name();
    let dir = checkpoint::concept_dir(out, effect);
    let info = ConceptManifest {
        format: String::new(),
        version: 0,
        effect: effect.into(),
        dtype: String::new(),
        tokens: 0,
        model_dim: 0,
        backbone_checksum: outcome.backbone_checksum,
        steps: cfg.steps,
        seed: cfg.seed,
    };
    checkpoint::save_concept(&dir, &outcome.tokens, &info)?;
    info!("concept tokens for `{effect}` written to {}", dir.display());
    Ok(())
}

fn load_tokens(params: &DenoiserParams<f32>, dir: &Path) -> Result<Tensor<f32>> {
    let (tokens, m) = checkpoint::load_concept::<f32>(dir)?;
    if m.backbone_checksum != params.backbone_checksum() {
        bail!("concept tokens `{}` were trained against a different checkpoint", m.effect);
    }
    Ok(tokens)
}

fn generate(cfg: &RunConfig, ckpt: &Path, with_ce: Option<&Path>, pairs: &[PairSample], exec: Exec) -> Result<Vec<refvfx::codec::PixelVideo>> {
    let (params, _) = checkpoint::load::<f32>(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let tokens = with_ce.map(|d| load_tokens(&params, d)).transpose()?;
    let results = exec.map(pairs.len(), |i| -> Result<_> {
        let p = &pairs[i];
        let tp = p.train_pair()?;
        let sc = diffusion::SampleConfig {
            seed: rng::derive(cfg.sample.seed, i as u64),
            ..cfg.sample
        };
        let first = p.target.video.frame(0);
        let v = match &tokens {
            Some(t) => adapt::infer_with_ce(&params, &tp.reference, &p.target.prompt, &first, data::FRAMES, t, &sc)?,
            None => diffusion::sample(&params, Some(&tp.reference), &p.target.prompt, &first, data::FRAMES, &sc)?,
        };
        Ok(v)
    });
    results.into_iter().collect()
}

fn evaluate(cfg: &RunConfig, data: &Path, ckpt: Option<&Path>, with_ce: Option<&Path>, out: &Path, exec: Exec) -> Result<()> {
    let (_, pairs) = data::load_dataset(data)?;
    let n = if cfg.eval.clips == 0 { pairs.len() } else { cfg.eval.clips.min(pairs.len()) };
    let pairs = &pairs[..n];
    let gens = match ckpt {
        Some(c) => generate(cfg, c, with_ce, pairs, exec)?,
        None => {
            if with_ce.is_some() {
                bail!("--with-ce needs --checkpoint");
            }
            pairs.iter().map(|p| p.target.video.clone()).collect()
        }
    };
    let verdicts: Vec<eval::VfxConsVerdict> = match cfg.eval.judge.as_str() {
        "oracle" => pairs
            .iter()
            .zip(&gens)
            .map(|(p, g)| {
                let truth = Truth {
                    effect: p.effect,
                    target: p.target.scene,
                    reference: p.reference.scene,
                };
                eval::oracle_judge(&p.reference.video, g, &truth, &cfg.eval.oracle).map(|r| r.verdict)
            })
            .collect::<refvfx::Result<_>>()?,
        "remote" => {
            let endpoint = cfg
                .eval
                .endpoint
                .clone()
                .ok_or_else(|| anyhow!("remote judge needs --endpoint or eval.endpoint"))?;
            let mut rc = RemoteConfig::from_env(endpoint)?;
            rc.cache_dir = cfg.eval.cache_dir.clone();
            let judge = RemoteJudge::new(rc, Templates::default());
            let items: Vec<_> = pairs.iter().zip(&gens).map(|(p, g)| (&p.reference.video, g)).collect();
            let v = judge.judge_all(&items).into_iter().collect::<refvfx::Result<_>>()?;
            info!("remote judge: {} requests, {} cache hits", judge.requests(), judge.cache_hits());
            v
        }
        other => bail!("unknown judge `{other}`"),
    };
    let report = EvalReport {
        rows: verdicts
            .into_iter()
            .enumerate()
            .map(|(i, v)| (format!("pair{i:04}_{}", pairs[i].effect.family), v))
            .collect(),
    };
    let summary = report.summary();
    #[derive(serde::Serialize)]
    struct Saved {
        rates: eval::Rates,
        run: toml::Table,
    }
    let saved = manifest::to_text(&Saved {
        rates: report.rates(),
        run: cfg.to_table()?,
    })?;
    std::fs::create_dir_all(out)?;
    manifest::write_atomic(&out.join("report.csv"), report.to_csv().as_bytes())?;
    manifest::write_atomic(&out.join("summary.txt"), summary.as_bytes())?;
    manifest::write_atomic(&out.join("report.toml"), saved.as_bytes())?;
    print!("{summary}");
    Ok(())
}
