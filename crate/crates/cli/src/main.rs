//! `psunet`: dataset generation, training, sampling, evaluation and sweeps.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::{Array3, Axis};

use psunet_core::checkpoint::Checkpoint;
use psunet_core::config::RunConfig;
use psunet_core::eval::{self, EvalConfig, EvalModel, TrackInput};
use psunet_core::sampler::{
    self, repeat_batch, CfgConvention, GuidanceConfig, GuidanceMode, MaskSpec, Scenario,
};
use psunet_core::synth::{self, SynthSample};
use psunet_core::train::{RunArtifacts, TrainData, Trainer};
use psunet_core::{Backbone, Error, MultimodalState};

const SCENARIO_RULES: &str = "\
Scenario argument rules (sample):
  uncond        forbids --caption and --image
  t2i           requires --caption, forbids --image
  i2t           requires --image, forbids --caption
  img-infill    requires --caption and --image
  text-infill   requires --caption and --image, plus masked words
  joint-infill  requires --caption and --image, plus masked words
--image-mask applies only to img-infill and joint-infill.
Masked caption words are given with --text-mask or written as `_` in --caption.

Errors are reported on stderr as `error: <category>: <detail>`.";

#[derive(Parser, Debug)]
#[command(name = "psunet", version, about = "Joint text-image diffusion with a partially shared U-Net", after_help = SCENARIO_RULES)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Render a synthetic dataset split to disk.
    GenData(GenDataArgs),
    /// Train a backbone on the synthetic dataset.
    Train(TrainArgs),
    /// Sample in one of the six scenarios.
    Sample(SampleArgs),
    /// Score a checkpoint on one scenario.
    Eval(EvalArgs),
    /// Score a checkpoint across guidance scales.
    Sweep(SweepArgs),
    /// Score every checkpoint of one or more runs over training time.
    Track(TrackArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Number of samples.
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Split name used for the file names.
    #[arg(long, default_value = "train")]
    split: String,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML run configuration; defaults to the desk preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoints, metrics and the resolved config.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Config override `section.key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Stop after this many total updates (defaults to train.total_steps).
    #[arg(long)]
    steps: Option<usize>,
    /// Progress line interval on stderr.
    #[arg(long, default_value_t = 50)]
    log_every: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GuidanceArg {
    MaskedCfg,
    None,
    UnidiffuserFree,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ConventionArg {
    Conditional,
    Substituted,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
enum ModalityArg {
    Both,
    Image,
    Text,
}

#[derive(Args, Debug, Clone)]
struct SamplingArgs {
    /// Guidance scale.
    #[arg(long)]
    w: Option<f64>,
    /// Reverse steps; the schedule length selects ancestral sampling,
    /// fewer steps use strided deterministic sampling.
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum)]
    guidance: Option<GuidanceArg>,
    /// Which forward gets the (1 + w) weight under masked guidance.
    #[arg(long, value_enum, default_value = "conditional")]
    convention: ConventionArg,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_parser = parse_scenario)]
    scenario: Scenario,
    /// Conditioning caption; `_` marks a word to generate.
    #[arg(long)]
    caption: Option<String>,
    /// Conditioning image (PNG or PPM, 32x32 RGB).
    #[arg(long)]
    image: Option<PathBuf>,
    /// `center-half` or a file of 0/1 rows over the patch grid.
    #[arg(long)]
    image_mask: Option<String>,
    /// Comma-separated token indices, or a file holding them.
    #[arg(long)]
    text_mask: Option<String>,
    #[command(flatten)]
    sampling: SamplingArgs,
    /// Number of samples.
    #[arg(long, default_value_t = 1)]
    n: usize,
    /// Worker threads for independent sample draws.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Unconditional generation of a single modality (partial activation).
    #[arg(long, value_enum, default_value = "both")]
    modality: ModalityArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_parser = parse_scenario)]
    scenario: Scenario,
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 1234)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long)]
    w: Option<f64>,
    #[arg(long, value_enum)]
    guidance: Option<GuidanceArg>,
    #[arg(long, default_value_t = 50)]
    batch: usize,
    /// Directory for report.txt.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated guidance scales.
    #[arg(long, value_delimiter = ',', required = true)]
    w_list: Vec<f64>,
    #[arg(long, value_parser = parse_scenario)]
    scenario: Scenario,
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 1234)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, value_enum)]
    guidance: Option<GuidanceArg>,
    #[arg(long, default_value_t = 50)]
    batch: usize,
    /// Label used in the table's model column.
    #[arg(long, default_value = "model")]
    label: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrackArgs {
    /// `label=run_dir`; every `step_*.ckpt` in the directory is scored.
    #[arg(long = "run", required = true)]
    runs: Vec<String>,
    #[arg(long, value_parser = parse_scenario, default_value = "t2i")]
    scenario: Scenario,
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 1234)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long)]
    w: Option<f64>,
    #[arg(long, default_value_t = 50)]
    batch: usize,
    /// Fréchet threshold for the steps-to-threshold ratio.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_scenario(s: &str) -> std::result::Result<Scenario, String> {
    s.parse::<Scenario>().map_err(|e| e.to_string())
}

fn guidance_from(mode: Option<GuidanceArg>, w: Option<f64>, convention: ConventionArg, scenario: Scenario) -> GuidanceConfig {
    let w = w.unwrap_or(3.0);
    let mut g = scenario.default_guidance(w);
    if let Some(m) = mode {
        g.mode = match m {
            GuidanceArg::MaskedCfg => GuidanceMode::MaskedCfg,
            GuidanceArg::None => GuidanceMode::None,
            GuidanceArg::UnidiffuserFree => GuidanceMode::UnidiffuserFree,
        };
    }
    g.convention = match convention {
        ConventionArg::Conditional => CfgConvention::Conditional,
        ConventionArg::Substituted => CfgConvention::Substituted,
    };
    g
}

fn category(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) => "config",
                Error::Shape(_) => "shape",
                Error::Timestep { .. } => "timestep",
                Error::NonFinite(_) => "non_finite",
                Error::Vocab(_) => "vocab",
                Error::Mode(_) => "mode",
                Error::Checkpoint(_) => "checkpoint",
                Error::Data(_) => "data",
                Error::Io(_) => "io",
            };
        }
        if cause.downcast_ref::<UsageError>().is_some() {
            return "usage";
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
        if cause.downcast_ref::<image::ImageError>().is_some() {
            return "data";
        }
    }
    "internal"
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage: {first}");
            eprint!("{text}");
            return ExitCode::from(2);
        }
    };
    let result = match cli.cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Train(a) => train(a),
        Cmd::Sample(a) => sample(a),
        Cmd::Eval(a) => evaluate(a),
        Cmd::Sweep(a) => sweep(a),
        Cmd::Track(a) => track(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let detail = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {}: {detail}", category(&e));
            ExitCode::from(1)
        }
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let samples = synth::make_dataset(a.n, a.seed)?;
    synth::export_split(&a.out, &a.split, &samples)?;
    println!("split={} samples={} dir={}", a.split, samples.len(), a.out.display());
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = RunConfig::load(a.config.as_deref(), &a.overrides)?;
    std::fs::create_dir_all(&a.out)?;
    write_text(&a.out.join("config.toml"), &cfg.to_toml())?;

    let samples: Vec<SynthSample> = match &cfg.data.dir {
        Some(dir) => synth::load_split(dir, "train")?,
        None => synth::make_dataset(cfg.data.n_train, cfg.data.seed)?,
    };
    let (mut trainer, vocab, codec) = match &a.resume {
        Some(path) => {
            let (tr, ck) = Trainer::<f32>::resume(path, Some(cfg.train))?;
            let vocab = ck.vocab.clone().ok_or_else(|| anyhow!("checkpoint lacks a vocabulary"))?;
            let codec = ck.codec.clone().ok_or_else(|| anyhow!("checkpoint lacks the text codec"))?;
            Trainer::check_vocab(&ck, &vocab)?;
            if ck.meta.backbone != cfg.model {
                return Err(Error::Shape("checkpoint model config differs from the run config".into()).into());
            }
            (tr, vocab, codec)
        }
        None => {
            let (vocab, codec) = cfg.build_codec()?;
            let model = Backbone::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
            (Trainer::new(model, cfg.schedule, cfg.train)?, vocab, codec)
        }
    };
    let data = TrainData::<f32>::from_samples(&samples, &vocab, &codec, cfg.model.text_len)?;
    let arts = RunArtifacts {
        dir: a.out.clone(),
        vocab: Some(vocab),
        codec: Some(codec),
    };
    let until = a.steps.unwrap_or(cfg.train.total_steps);
    eprintln!(
        "training {} params ({:?}) from step {} to {until}",
        trainer.model.param_count(psunet_core::ActivationMode::Joint),
        trainer.model.arch(),
        trainer.step()
    );
    let every = a.log_every.max(1);
    let records = trainer.fit(&data, until, Some(&arts), |r, _| {
        if r.step % every == 0 {
            eprintln!("step {} loss {:.5} lr {:.3e} {:.1}s", r.step, r.loss, r.lr, r.wall_s);
        }
        Ok(true)
    })?;
    let last = records.last();
    println!(
        "steps={} final_loss={} checkpoint={}",
        trainer.step(),
        last.map(|r| format!("{:.6}", r.loss)).unwrap_or_else(|| "na".into()),
        arts.latest_path().display()
    );
    Ok(())
}

fn load_image(path: &Path, hw: usize) -> Result<Array3<f32>> {
    let img = image::open(path)
        .with_context(|| format!("reading {}", path.display()))?
        .to_rgb8();
    if img.width() as usize != hw || img.height() as usize != hw {
        return Err(Error::Shape(format!(
            "image is {}x{}, model expects {hw}x{hw}",
            img.width(),
            img.height()
        ))
        .into());
    }
    Ok(Array3::from_shape_fn((3, hw, hw), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 127.5 - 1.0
    }))
}

fn save_image(path: &Path, img: &Array3<f32>) -> Result<()> {
    let (_, h, w) = img.dim();
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (((img[[c, y as usize, x as usize]].clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    buf.save(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint<f32>> {
    eval::load_for_eval(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Caption with `_` placeholders replaced and their positions returned.
fn caption_placeholders(caption: &str, filler: &str) -> (String, Vec<usize>) {
    let mut masked = Vec::new();
    let words: Vec<String> = caption
        .split_whitespace()
        .enumerate()
        .map(|(i, w)| {
            if w == "_" {
                masked.push(i);
                filler.to_string()
            } else {
                w.to_string()
            }
        })
        .collect();
    (words.join(" "), masked)
}

fn check_scenario_args(a: &SampleArgs) -> Result<()> {
    let s = a.scenario;
    if s.needs_caption() && a.caption.is_none() {
        return Err(usage(format!("scenario {s} requires --caption")));
    }
    if !s.needs_caption() && a.caption.is_some() {
        return Err(usage(format!("scenario {s} forbids --caption")));
    }
    if s.needs_image() && a.image.is_none() {
        return Err(usage(format!("scenario {s} requires --image")));
    }
    if !s.needs_image() && a.image.is_some() {
        return Err(usage(format!("scenario {s} forbids --image")));
    }
    if a.image_mask.is_some() && !matches!(s, Scenario::ImageInfill | Scenario::JointInfill) {
        return Err(usage(format!("--image-mask does not apply to scenario {s}")));
    }
    if a.text_mask.is_some() && !matches!(s, Scenario::TextInfill | Scenario::JointInfill) {
        return Err(usage(format!("--text-mask does not apply to scenario {s}")));
    }
    if a.modality != ModalityArg::Both && s != Scenario::Unconditional {
        return Err(usage("--modality applies only to uncond"));
    }
    if a.n == 0 || a.jobs == 0 {
        return Err(usage("--n and --jobs must be positive"));
    }
    Ok(())
}

fn sample(a: SampleArgs) -> Result<()> {
    check_scenario_args(&a)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let cfg = ck.meta.backbone.clone();
    let vocab = ck.vocab.as_ref().expect("checked on load");
    let codec = ck.codec.as_ref().expect("checked on load");
    let sched = ck.meta.schedule.build()?;
    let (grid, text_len) = (cfg.grid(), cfg.text_len);

    let mut text_masked: Vec<usize> = Vec::new();
    let text = match &a.caption {
        Some(c) => {
            let (clean, placeholders) = caption_placeholders(c, vocab.word(0));
            text_masked.extend(placeholders);
            codec.encode::<f32>(vocab, &clean, text_len)?
        }
        None => ndarray::Array2::zeros((text_len, cfg.embed_dim)),
    };
    let image = match &a.image {
        Some(p) => load_image(p, cfg.image_hw)?,
        None => Array3::zeros((cfg.image_channels, cfg.image_hw, cfg.image_hw)),
    };
    if let Some(tm) = &a.text_mask {
        let spec = if Path::new(tm).is_file() {
            std::fs::read_to_string(tm)?
        } else {
            tm.clone()
        };
        let m = sampler::parse_text_mask(&spec, text_len)?;
        text_masked.extend(m.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i));
    }
    let image_mask = match a.image_mask.as_deref() {
        None | Some("center-half") => None,
        Some(path) => Some(sampler::load_image_mask(Path::new(path), grid)?),
    };
    let text_mask = if text_masked.is_empty() {
        None
    } else {
        Some(MaskSpec::text_positions(text_len, &text_masked)?)
    };
    if matches!(a.scenario, Scenario::TextInfill | Scenario::JointInfill) && text_mask.is_none() {
        return Err(usage(format!(
            "scenario {} needs masked words (--text-mask or `_` in --caption)",
            a.scenario
        )));
    }
    let mut mask = a.scenario.mask(grid, text_len, image_mask, text_mask)?;
    let one = MultimodalState::joint(image.insert_axis(Axis(0)), text.insert_axis(Axis(0)));
    let mut observed = repeat_batch(&one, a.n);
    match a.modality {
        ModalityArg::Both => {}
        ModalityArg::Image => {
            mask.text = None;
            observed.text = None;
        }
        ModalityArg::Text => {
            mask.image = None;
            observed.image = None;
        }
    }
    let mode = sampler::activation_mode_for(&mask);
    let guidance = guidance_from(a.sampling.guidance, a.sampling.w, a.sampling.convention, a.scenario);

    std::fs::create_dir_all(&a.out)?;
    let echo = format!(
        "checkpoint = {:?}\nscenario = {:?}\ncaption = {:?}\nimage = {:?}\nn = {}\nsteps = {}\nseed = {}\nactivation = {:?}\n\n[guidance]\nw = {}\nmode = {:?}\nconvention = {:?}\n\n{}",
        a.checkpoint.display().to_string(),
        a.scenario.name(),
        a.caption.clone().unwrap_or_default(),
        a.image.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        a.n,
        a.sampling.steps,
        a.sampling.seed,
        mode.name(),
        guidance.w,
        format!("{:?}", guidance.mode),
        format!("{:?}", guidance.convention),
        toml_meta(&ck)?,
    );
    write_text(&a.out.join("config.toml"), &echo)?;

    // Fixed chunking keeps results independent of --jobs.
    const CHUNK: usize = 8;
    let chunks: Vec<(usize, usize)> = (0..a.n).step_by(CHUNK).map(|lo| (lo, (lo + CHUNK).min(a.n))).collect();
    let model = &ck.model;
    let run_chunk = |k: usize| -> psunet_core::Result<MultimodalState<f32>> {
        let (lo, hi) = chunks[k];
        let part = MultimodalState {
            image: observed.image.as_ref().map(|x| x.slice(ndarray::s![lo..hi, .., .., ..]).to_owned()),
            text: observed.text.as_ref().map(|x| x.slice(ndarray::s![lo..hi, .., ..]).to_owned()),
        };
        sampler::joint_infill(model, &part, &mask, &sched, a.sampling.steps, &guidance, a.sampling.seed.wrapping_add(k as u64))
    };
    let mut results: Vec<Option<psunet_core::Result<MultimodalState<f32>>>> = (0..chunks.len()).map(|_| None).collect();
    let jobs = a.jobs.min(chunks.len()).max(1);
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..jobs)
            .map(|j| {
                let run_chunk = &run_chunk;
                let n_chunks = chunks.len();
                scope.spawn(move || {
                    (j..n_chunks).step_by(jobs).map(|k| (k, run_chunk(k))).collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (k, r) in h.join().expect("sampling worker panicked") {
                results[k] = Some(r);
            }
        }
    });

    let mut stdout = std::io::stdout().lock();
    let mut captions = String::new();
    let mut idx = 0usize;
    for r in results {
        let out = r.expect("every chunk ran")?;
        let b = out.batch()?;
        for i in 0..b {
            if let Some(img) = eval::example_image(&out, i) {
                if a.scenario.generates_image() || a.scenario == Scenario::ImageToText || a.scenario == Scenario::TextInfill {
                    let path = a.out.join(format!("image_{idx:03}.png"));
                    save_image(&path, &img)?;
                    writeln!(stdout, "image={}", path.display())?;
                }
            }
            if let Some(t) = &out.text {
                let cap = codec.decode(vocab, t.index_axis(Axis(0), i));
                writeln!(stdout, "caption={cap}")?;
                captions.push_str(&cap);
                captions.push('\n');
            }
            idx += 1;
        }
    }
    if !captions.is_empty() {
        write_text(&a.out.join("captions.txt"), &captions)?;
    }
    eprintln!("sampled {idx} example(s) in {} mode into {}", mode.name(), a.out.display());
    Ok(())
}

fn toml_meta(ck: &Checkpoint<f32>) -> Result<String> {
    Ok(psunet_core::config::to_toml_string(&ck.meta))
}

fn eval_config(n: usize, seed: u64, steps: usize, batch: usize, guidance: GuidanceConfig) -> EvalConfig {
    EvalConfig {
        n,
        seed,
        steps,
        guidance,
        batch,
        ..EvalConfig::default()
    }
}

fn evaluate(a: EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let sched = ck.meta.schedule.build()?;
    let em = EvalModel {
        model: &ck.model,
        vocab: ck.vocab.as_ref().expect("checked on load"),
        codec: ck.codec.as_ref().expect("checked on load"),
        sched: &sched,
    };
    let g = guidance_from(a.guidance, a.w, ConventionArg::Conditional, a.scenario);
    let cfg = eval_config(a.n, a.seed, a.steps, a.batch, g);
    let report = eval::conditional_consistency(&em, a.scenario, &cfg)?;
    let text = report.to_text();
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir)?;
        write_text(&dir.join("report.txt"), &text)?;
        write_text(&dir.join("config.toml"), &toml_meta(&ck)?)?;
    }
    print!("{text}");
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let sched = ck.meta.schedule.build()?;
    let em = EvalModel {
        model: &ck.model,
        vocab: ck.vocab.as_ref().expect("checked on load"),
        codec: ck.codec.as_ref().expect("checked on load"),
        sched: &sched,
    };
    let g = guidance_from(a.guidance, None, ConventionArg::Conditional, a.scenario);
    let cfg = eval_config(a.n, a.seed, a.steps, a.batch, g);
    let rows = eval::cfg_scale_sweep(&em, &a.w_list, a.scenario, &cfg)?;
    let table = eval::sweep_table(&a.label, &rows);
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir)?;
        write_text(&dir.join("sweep.tsv"), &table)?;
        write_text(&dir.join("config.toml"), &toml_meta(&ck)?)?;
    }
    print!("{table}");
    Ok(())
}

fn list_checkpoints(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(step) = name.strip_prefix("step_").and_then(|s| s.strip_suffix(".ckpt")) {
            if let Ok(step) = step.parse() {
                out.push((step, path.clone()));
            }
        }
    }
    if out.is_empty() {
        bail!(Error::Data(format!("no step_*.ckpt files in {}", dir.display())));
    }
    out.sort();
    Ok(out)
}

fn track(a: TrackArgs) -> Result<()> {
    let mut inputs = Vec::new();
    for r in &a.runs {
        let (label, dir) = r
            .split_once('=')
            .ok_or_else(|| usage(format!("--run expects label=dir, got {r:?}")))?;
        inputs.push(TrackInput {
            label: label.to_string(),
            checkpoints: list_checkpoints(Path::new(dir))?,
            eval_seed: a.seed,
        });
    }
    let g = guidance_from(None, a.w, ConventionArg::Conditional, a.scenario);
    let cfg = eval_config(a.n, a.seed, a.steps, a.batch, g);
    let rows = eval::convergence_track(&inputs, a.scenario, &cfg)?;
    let mut table = eval::track_table(&rows);
    if let Some(th) = a.threshold {
        table.push('\n');
        table.push_str("model\tsteps_to_threshold\n");
        let mut reached = Vec::new();
        for inp in &inputs {
            let s = eval::steps_to_threshold(&rows, &inp.label, th);
            reached.push(s);
            table.push_str(&format!(
                "{}\t{}\n",
                inp.label,
                s.map(|v| v.to_string()).unwrap_or_else(|| "na".into())
            ));
        }
        if let [Some(x), Some(y)] = reached[..] {
            table.push_str(&format!("step_ratio\t{:.3}\n", y as f64 / x.max(1) as f64));
        }
    }
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir)?;
        write_text(&dir.join("convergence.tsv"), &table)?;
    }
    print!("{table}");
    Ok(())
}
