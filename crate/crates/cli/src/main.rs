//! `egic`: dataset generation, training, coding, evaluation and α sweeps.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or model
//! incompatibility, 3 numerical divergence.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use egic::checkpoint::Checkpoint;
use egic::data::{generate_dataset, load_dataset, save_dataset, LabeledImage};
use egic::discriminator::OasisC;
use egic::entropy_coding::Bitstream;
use egic::evaluation::{
    perception_score, psnr, DiscriminatorFeatures, EvalReport, FeatureMap, ImageRecord, Perception, PixelFeatures,
};
use egic::image::ImagePlane;
use egic::model::Model;
use egic::realism::sweep_alpha;
use egic::training::{
    load_feature_discriminator, run_disc_pretrain, run_orp, run_stage1, run_stage2, DiscriminatorKind, RunDir,
    Stage, Strategy,
};
use egic::Error;
use egic_tensor::ParamStore;
use log::{info, warn};

use config::{Features, RunConfig};

#[derive(Parser)]
#[command(name = "egic", version, about = "Generative image compression with decode-time realism control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled-shapes dataset.
    GenData(GenDataArgs),
    /// Run or resume one training stage.
    Train(TrainArgs),
    /// Encode an image into a bitstream.
    Compress(CompressArgs),
    /// Decode a bitstream at a chosen α.
    Decompress(DecompressArgs),
    /// Rate, PSNR and perception score of a model on a dataset.
    Eval(EvalArgs),
    /// Rate, PSNR and perception score across α values.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// TOML configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    /// Class count including the background.
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write into a non-empty directory.
    #[arg(long)]
    force: bool,
    out: Option<PathBuf>,
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    match s {
        "1" | "stage1" => Ok(Stage::Stage1),
        "2" | "stage2" => Ok(Stage::Stage2),
        "orp" => Ok(Stage::Orp),
        "disc" | "disc_pretrain" => Ok(Stage::DiscPretrain),
        _ => Err(format!("unknown stage `{s}` (expected 1, 2, orp or disc)")),
    }
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    match s {
        "I" | "1" => Ok(Strategy::I),
        "II" | "2" => Ok(Strategy::II),
        _ => Err(format!("unknown strategy `{s}` (expected I or II)")),
    }
}

fn parse_discriminator(s: &str) -> Result<DiscriminatorKind, String> {
    match s {
        "oasis" | "oasis_c" => Ok(DiscriminatorKind::OasisC),
        "patchgan" | "patch_gan" => Ok(DiscriminatorKind::PatchGan),
        _ => Err(format!("unknown discriminator `{s}` (expected oasis or patchgan)")),
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    /// 1, 2, orp or disc.
    #[arg(long, value_parser = parse_stage)]
    stage: Option<Stage>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    disc_lr: Option<f64>,
    /// Stage-two objective, I or II.
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
    /// oasis or patchgan.
    #[arg(long, value_parser = parse_discriminator)]
    discriminator: Option<DiscriminatorKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    held_out: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    run: Option<PathBuf>,
    /// Checkpoint of the previous stage.
    #[arg(long)]
    from: Option<PathBuf>,
    /// Pretrained discriminator checkpoint.
    #[arg(long)]
    disc: Option<PathBuf>,
}

#[derive(Args)]
struct CompressArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    input: PathBuf,
    output: PathBuf,
}

#[derive(Args)]
struct DecompressArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    input: PathBuf,
    output: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Directory of decoded images to score instead of a checkpoint.
    #[arg(long)]
    decoded: Option<PathBuf>,
    /// Discriminator checkpoint for perception features.
    #[arg(long)]
    disc: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long, value_enum)]
    features: Option<Features>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    disc: Option<PathBuf>,
    /// Comma-separated α values.
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long, value_enum)]
    features: Option<Features>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, flag: Option<T>) {
    if flag.is_some() {
        *slot = flag;
    }
}

fn required<'a>(value: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::Config(format!("{what} is required")).into())
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.cfg.config.as_deref())?;
    set(&mut cfg.data.num_samples, args.n);
    set(&mut cfg.data.image_size, args.size);
    set(&mut cfg.data.num_classes, args.classes);
    set(&mut cfg.data.seed, args.seed);
    set_opt(&mut cfg.gen_data.out, args.out);
    cfg.gen_data.force |= args.force;
    let out = required(&cfg.gen_data.out, "output directory")?.to_owned();
    cfg.data.validate()?;
    let occupied = fs::read_dir(&out).map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied && !cfg.gen_data.force {
        return Err(Error::Config(format!("{} is not empty; pass --force to overwrite", out.display())).into());
    }
    let samples = generate_dataset(&cfg.data)?;
    save_dataset(&out, &cfg.data, &samples)?;
    cfg.echo(&out)?;
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

fn load_samples(dir: &Path) -> Result<Vec<LabeledImage>> {
    let (_, samples) = load_dataset(dir)?;
    if samples.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 }.into());
    }
    Ok(samples)
}

fn prerequisite(path: &Option<PathBuf>, stage: &str, needed: &str) -> Result<Checkpoint> {
    let Some(path) = path else {
        return Err(Error::MissingPrerequisite(format!("{stage} needs a {needed} checkpoint; pass --from")).into());
    };
    if !path.exists() {
        return Err(Error::MissingPrerequisite(format!(
            "{stage} needs a {needed} checkpoint, {} does not exist",
            path.display()
        ))
        .into());
    }
    Ok(Checkpoint::load(path)?)
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.cfg.config.as_deref())?;
    let t = &mut cfg.train;
    set_opt(&mut t.stage, args.stage);
    set_opt(&mut t.steps, args.steps);
    set_opt(&mut t.batch_size, args.batch_size);
    set_opt(&mut t.lr, args.lr);
    set_opt(&mut t.disc_lr, args.disc_lr);
    set_opt(&mut t.strategy, args.strategy);
    set_opt(&mut t.discriminator, args.discriminator);
    set_opt(&mut t.seed, args.seed);
    set_opt(&mut t.checkpoint_every, args.checkpoint_every);
    set_opt(&mut t.held_out, args.held_out);
    set_opt(&mut t.data, args.data);
    set_opt(&mut t.run, args.run);
    set_opt(&mut t.from, args.from);
    set_opt(&mut t.disc, args.disc);
    set(&mut cfg.weights.lambda, args.lambda);
    set(&mut cfg.weights.beta, args.beta);

    let plan = cfg.train.resolve(&mut cfg.weights)?;
    let samples = load_samples(required(&cfg.train.data, "dataset directory (--data)")?)?;
    let disc_cfg = (plan.stage == Stage::DiscPretrain).then(|| {
        let classes = samples.iter().map(|s| s.labels.max_class()).max().unwrap_or(1);
        let size = samples[0].image.width();
        cfg.disc.resolve(size, usize::from(classes).max(2), cfg.codec.latent_channels)
    });
    let t = &cfg.train;
    let held_out = t.held_out.unwrap_or(samples.len() / 4);
    if held_out >= samples.len() {
        return Err(Error::Config(format!("held_out {held_out} leaves no training samples")).into());
    }
    let (train_set, held) = samples.split_at(samples.len() - held_out);
    let run = RunDir::open(required(&t.run, "run directory (--run)")?)?;
    {
        // Refuse before touching the echo of a run in progress.
        let _lock = run.lock()?;
        cfg.echo(run.root())?;
    }
    info!("{} for {} steps in {}", plan.stage.name(), plan.steps, run.root().display());
    let report = match plan.stage {
        Stage::Stage1 => run_stage1(&run, &plan, &cfg.codec, train_set, held)?,
        Stage::Stage2 => {
            let stage1 = prerequisite(&t.from, "stage 2", "stage-1")?;
            let disc = t.disc.as_deref().map(Checkpoint::load).transpose()?;
            run_stage2(&run, &plan, &stage1, disc.as_ref(), train_set)?
        }
        Stage::Orp => {
            let stage2 = prerequisite(&t.from, "ORP training", "stage-2")?;
            run_orp(&run, &plan, cfg.orp, &stage2, train_set, held)?
        }
        Stage::DiscPretrain => {
            let disc_cfg = disc_cfg.expect("resolved for this stage");
            run_disc_pretrain(&run, &plan, &disc_cfg, train_set, held)?
        }
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn compress(args: CompressArgs) -> Result<()> {
    let model = Model::load(&args.checkpoint)?;
    let image = ImagePlane::load(&args.input)?;
    let stream = model.compress(&image)?;
    fs::write(&args.output, stream.to_bytes()).with_context(|| format!("writing {}", args.output.display()))?;
    println!("bpp {:.6}", stream.bpp());
    Ok(())
}

/// Decodes at `alpha`, falling back to α = 1 when the model has no head.
fn decode(model: &Model, stream: &Bitstream, alpha: f64) -> Result<ImagePlane> {
    if model.orp.is_none() && alpha != 1.0 {
        warn!("checkpoint has no ORP head; ignoring alpha {alpha}");
        return Ok(model.decompress(stream, 1.0)?);
    }
    Ok(model.decompress(stream, alpha)?)
}

fn read_stream(path: &Path) -> Result<Bitstream> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Bitstream::from_bytes(&bytes)?)
}

fn decompress(args: DecompressArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&args.alpha) {
        return Err(Error::Config(format!("alpha {} is outside [0, 1]", args.alpha)).into());
    }
    let model = Model::load(&args.checkpoint)?;
    let stream = read_stream(&args.input)?;
    decode(&model, &stream, args.alpha)?.save_png(&args.output)?;
    Ok(())
}

/// The feature map for perception scores, with the network it borrows.
enum FeatureSource {
    Pixels,
    Disc(OasisC, ParamStore),
}

impl FeatureSource {
    fn new(choice: Features, disc: &Option<PathBuf>) -> Result<Self> {
        let load = |p: &Path| -> Result<Self> {
            let (d, params) = load_feature_discriminator(&Checkpoint::load(p)?)?;
            Ok(Self::Disc(d, params))
        };
        match (choice, disc) {
            (Features::Pixels, _) | (Features::Auto, None) => Ok(Self::Pixels),
            (_, Some(p)) => load(p),
            (Features::Discriminator, None) => {
                Err(Error::Config("discriminator features need a disc checkpoint".into()).into())
            }
        }
    }

    fn map(&self) -> Box<dyn FeatureMap + '_> {
        match self {
            Self::Pixels => Box::new(PixelFeatures),
            Self::Disc(disc, params) => Box::new(DiscriminatorFeatures { disc, params }),
        }
    }
}

fn eval(args: EvalArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.cfg.config.as_deref())?;
    let e = &mut cfg.eval;
    set_opt(&mut e.data, args.data);
    set_opt(&mut e.checkpoint, args.checkpoint);
    set_opt(&mut e.decoded, args.decoded);
    set_opt(&mut e.disc, args.disc);
    set_opt(&mut e.out, args.out);
    set(&mut e.alpha, args.alpha);
    set(&mut e.patch, args.patch);
    set(&mut e.features, args.features);
    let e = &cfg.eval;
    if !(0.0..=1.0).contains(&e.alpha) {
        return Err(Error::Config(format!("alpha {} is outside [0, 1]", e.alpha)).into());
    }
    let samples = load_samples(required(&e.data, "dataset directory (--data)")?)?;
    let out = required(&e.out, "output directory (--out)")?;
    let features = FeatureSource::new(e.features, &e.disc)?;

    let mut records = Vec::with_capacity(samples.len());
    let mut decoded = Vec::with_capacity(samples.len());
    match (&e.checkpoint, &e.decoded) {
        (Some(ck), None) => {
            let model = Model::load(ck)?;
            for s in &samples {
                let stream = model.compress(&s.image)?;
                let x = decode(&model, &stream, e.alpha)?;
                records.push(ImageRecord {
                    image_id: s.id.clone(),
                    bpp: stream.bpp(),
                    psnr_db: psnr(&s.image, &x)?,
                });
                decoded.push(x);
            }
        }
        (None, Some(dir)) => {
            for s in &samples {
                let x = ImagePlane::load(&dir.join(format!("{}.png", s.id)))?;
                let stream = dir.join(format!("{}.egic", s.id));
                let bpp = if stream.exists() { read_stream(&stream)?.bpp() } else { 0.0 };
                records.push(ImageRecord {
                    image_id: s.id.clone(),
                    bpp,
                    psnr_db: psnr(&s.image, &x)?,
                });
                decoded.push(x);
            }
        }
        _ => bail!(Error::Config("pass exactly one of --checkpoint and --decoded".into())),
    }
    let real: Vec<ImagePlane> = samples.into_iter().map(|s| s.image).collect();
    let score = perception_score(&real, &decoded, e.patch, features.map().as_ref())?;
    let report = EvalReport::new(e.alpha, records, Some(score));
    report.save(out)?;
    cfg.echo(out)?;
    println!(
        "bpp {:.6} psnr {:.4} dB perception {score:.6}",
        report.mean_bpp, report.mean_psnr_db
    );
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.cfg.config.as_deref())?;
    let s = &mut cfg.sweep;
    set_opt(&mut s.data, args.data);
    set_opt(&mut s.checkpoint, args.checkpoint);
    set_opt(&mut s.disc, args.disc);
    set_opt(&mut s.out, args.out);
    set(&mut s.alphas, args.alphas);
    set(&mut s.patch, args.patch);
    set(&mut s.features, args.features);
    let s = &cfg.sweep;
    let samples = load_samples(required(&s.data, "dataset directory (--data)")?)?;
    let model = Model::load(required(&s.checkpoint, "checkpoint (--checkpoint)")?)?;
    let out = required(&s.out, "output directory (--out)")?;
    let features = FeatureSource::new(s.features, &s.disc)?;
    let map = features.map();
    let perception = Perception {
        features: map.as_ref(),
        patch: s.patch,
    };
    let table = sweep_alpha(&model, &model, &samples, &s.alphas, Some(perception))?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("sweep.csv"), table.to_csv())?;
    fs::write(out.join("sweep.svg"), table.to_svg())?;
    fs::write(out.join("sweep.json"), serde_json::to_string_pretty(&table)?)?;
    cfg.echo(out)?;
    for r in table.aggregates() {
        println!(
            "alpha {:.4} bpp {:.6} psnr {:.4} dB perception {:.6}",
            r.alpha,
            r.bpp,
            r.psnr_db,
            r.perception_score.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) => 1,
                Error::Divergence { .. } => 3,
                _ => 2,
            };
        }
        if cause.is::<toml::de::Error>() {
            return 1;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(u8::from(e.use_stderr()));
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Compress(a) => compress(a),
        Command::Decompress(a) => decompress(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
