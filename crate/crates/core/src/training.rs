//! Training schedules: rate-distortion pretraining, adversarial fine-tuning
//! of the generator, discriminator segmentation pretraining and ORP head
//! training.
//!
//! Every stage runs inside a run directory holding `plan.json`,
//! `metrics.jsonl` (one record per step), periodic checkpoints under
//! `checkpoints/`, `final.egck` and `report.json`. All randomness is derived
//! from `(seed, stage, step)`, so a resumed run reproduces an uninterrupted
//! one bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use egic_tensor::{Adam, Array, Binding, ParamStore, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::codec::{rd_loss, Codec, CodecConfig};
use crate::data::{splitmix64, Batcher, LabeledImage};
use crate::digest;
use crate::discriminator::{evaluate_miou, segmentation_step, OasisC, OasisConfig, PatchGan};
use crate::error::{Error, IoContext, Result};
use crate::evaluation::psnr;
use crate::image::{ImagePlane, LabelMap};
use crate::losses::{
    batch_pixel_weights, discriminator_loss_oasis, distortion, generator_adv_oasis, labelmix,
    labelmix_consistency_logits, labelmix_mask, mse, nonsaturating_pair, LossWeights, RandomConvFeatures,
};
use crate::model::{tags, Model};
use crate::realism::{train_orp_range, FrozenFeatures, OrpConfig, OrpHead, OrpSettings};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Stage2,
    Orp,
    DiscPretrain,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::Orp => "orp",
            Stage::DiscPretrain => "disc_pretrain",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Stage::Stage1 => 1,
            Stage::Stage2 => 2,
            Stage::Orp => 3,
            Stage::DiscPretrain => 4,
        }
    }
}

/// Stage-two objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    /// Distortion plus `β`-weighted adversarial loss.
    I,
    /// Adversarial loss only, with `β = 1`.
    II,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscriminatorKind {
    OasisC,
    PatchGan,
}

/// Step-decay learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub value: f64,
    /// Step from which `decayed` applies.
    pub decay_step: Option<u64>,
    pub decayed: f64,
}

impl LrSchedule {
    pub fn constant(value: f64) -> Self {
        Self {
            value,
            decay_step: None,
            decayed: value,
        }
    }

    pub fn at(&self, step: u64) -> f64 {
        match self.decay_step {
            Some(d) if step >= d => self.decayed,
            _ => self.value,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub stage: Stage,
    pub strategy: Strategy,
    pub discriminator: DiscriminatorKind,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: LrSchedule,
    /// Discriminator learning rate in stage two.
    pub disc_lr: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Checkpoint cadence in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
}

impl TrainPlan {
    /// Desk-scale defaults for a stage.
    pub fn desk(stage: Stage) -> Self {
        let (steps, lr) = match stage {
            Stage::Stage1 => (3000, 1e-3),
            Stage::Stage2 => (3000, 1e-4),
            Stage::Orp => (2000, 1e-3),
            Stage::DiscPretrain => (2000, 1e-3),
        };
        Self {
            stage,
            strategy: Strategy::I,
            discriminator: DiscriminatorKind::OasisC,
            steps,
            batch_size: 4,
            lr: LrSchedule::constant(lr),
            disc_lr: 1e-4,
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 500,
        }
    }

    /// The learning rates used at full scale: 1e-4 decaying to 1e-5 after
    /// 90% of stage one, and a fixed 1e-5 in stage two.
    pub fn reference(stage: Stage) -> Self {
        let mut plan = Self::desk(stage);
        plan.lr = match stage {
            Stage::Stage1 => LrSchedule {
                value: 1e-4,
                decay_step: Some(plan.steps * 9 / 10),
                decayed: 1e-5,
            },
            Stage::Stage2 => LrSchedule::constant(1e-5),
            _ => LrSchedule::constant(1e-4),
        };
        plan.disc_lr = 1e-4;
        plan
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        for (name, v) in [
            ("lr", self.lr.value),
            ("lr decayed", self.lr.decayed),
            ("disc_lr", self.disc_lr),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        self.weights.validate()
    }

    /// Strategy II drops the distortion term and sets `β = 1`.
    pub fn effective_weights(&self) -> LossWeights {
        match (self.stage, self.strategy) {
            (Stage::Stage2, Strategy::II) => LossWeights {
                k_m: 0.0,
                k_p: 0.0,
                beta: 1.0,
                ..self.weights
            },
            _ => self.weights,
        }
    }

    fn same_run(&self, other: &TrainPlan) -> bool {
        let strip = |p: &TrainPlan| TrainPlan { steps: 0, ..p.clone() };
        strip(self) == strip(other)
    }
}

/// RNG seed for one step of one stage.
pub fn step_seed(seed: u64, stage: Stage, step: u64) -> u64 {
    seed ^ splitmix64((stage.stream() << 48) ^ step)
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub stage: Stage,
    pub step: u64,
    pub values: BTreeMap<String, f64>,
}

/// Files of one training run.
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

const CHECKPOINT_PREFIX: &str = "step-";
const CHECKPOINT_EXT: &str = "egck";

impl RunDir {
    pub fn open(root: &Path) -> Result<Self> {
        let ck = root.join("checkpoints");
        fs::create_dir_all(&ck).at(&ck)?;
        Ok(Self {
            root: root.to_owned(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn plan_path(&self) -> PathBuf {
        self.root.join("plan.json")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn report_path(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.root.join("final.egck")
    }

    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.root
            .join("checkpoints")
            .join(format!("{CHECKPOINT_PREFIX}{step:08}.{CHECKPOINT_EXT}"))
    }

    /// Takes the advisory lock on `run.lock`. The OS releases it when the
    /// file is dropped or the process dies, so a crashed run can resume.
    pub fn lock(&self) -> Result<fs::File> {
        let path = self.root.join("run.lock");
        let file = fs::OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .at(&path)?;
        match file.try_lock() {
            Ok(()) => Ok(file),
            Err(fs::TryLockError::WouldBlock) => Err(Error::Config(format!(
                "{} is in use by another run",
                self.root.display()
            ))),
            Err(fs::TryLockError::Error(e)) => Err(e).at(&path),
        }
    }

    /// Highest-step periodic checkpoint.
    pub fn latest_checkpoint(&self) -> Result<Option<(u64, PathBuf)>> {
        let dir = self.root.join("checkpoints");
        let mut best = None;
        for entry in fs::read_dir(&dir).at(&dir)? {
            let path = entry.at(&dir)?.path();
            let step = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_prefix(CHECKPOINT_PREFIX))
                .and_then(|n| n.strip_suffix(&format!(".{CHECKPOINT_EXT}")))
                .and_then(|n| n.parse::<u64>().ok());
            if let Some(step) = step {
                if best.as_ref().is_none_or(|(b, _)| step > *b) {
                    best = Some((step, path));
                }
            }
        }
        Ok(best)
    }

    pub fn read_metrics(&self) -> Result<Vec<MetricRecord>> {
        let path = self.metrics_path();
        if !path.exists() {
            return Ok(Vec::new());
        }
        let file = fs::File::open(&path).at(&path)?;
        BufReader::new(file)
            .lines()
            .map(|line| Ok(serde_json::from_str(&line.at(&path)?)?))
            .collect()
    }

    pub fn read_report(&self) -> Result<StageReport> {
        let path = self.report_path();
        Ok(serde_json::from_slice(&fs::read(&path).at(&path)?)?)
    }
}

/// Summary written to `report.json` when a stage finishes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Option<Stage>,
    pub steps: u64,
    /// Mean of each logged value over the last 100 steps.
    pub final_metrics: BTreeMap<String, f64>,
    /// Stage-specific evaluation values.
    pub eval: BTreeMap<String, f64>,
    /// Hex parameter digests of frozen components, before and after.
    pub frozen_digests: BTreeMap<String, (String, String)>,
}

/// A stage as a resumable sequence of steps.
trait StageRunner {
    fn stage(&self) -> Stage;
    fn step(&mut self, step: u64) -> Result<BTreeMap<String, f64>>;
    /// Everything needed to continue, plus the stage's outputs.
    fn save(&self, ck: &mut Checkpoint) -> Result<()>;
    fn restore(&mut self, ck: &Checkpoint) -> Result<()>;
    fn finish(&mut self, report: &mut StageReport) -> Result<()>;
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct StateMeta {
    stage: Stage,
    step: u64,
    plan: TrainPlan,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct AdamMeta {
    lr: f64,
    step: u64,
}

const STATE: &str = "state";

fn save_adam(ck: &mut Checkpoint, tag: &str, adam: &Adam) -> Result<()> {
    ck.insert(
        &format!("adam.{tag}"),
        &AdamMeta {
            lr: adam.lr,
            step: adam.step,
        },
        adam.state(),
    )
}

fn load_adam(ck: &Checkpoint, tag: &str) -> Result<Adam> {
    let tag = format!("adam.{tag}");
    let meta: AdamMeta = ck.meta(&tag)?;
    Ok(Adam::from_state(meta.lr, meta.step, ck.params(&tag)?))
}

/// Stage of a finished checkpoint.
pub fn checkpoint_stage(ck: &Checkpoint) -> Result<Stage> {
    Ok(ck.meta::<StateMeta>(STATE)?.stage)
}

fn require_stage(ck: &Checkpoint, want: &[Stage], what: &str) -> Result<()> {
    let stage = checkpoint_stage(ck)?;
    if want.contains(&stage) {
        Ok(())
    } else {
        Err(Error::MissingPrerequisite(format!(
            "{what} needs a {} checkpoint, got {}",
            want.iter().map(|s| s.name()).collect::<Vec<_>>().join(" or "),
            stage.name()
        )))
    }
}

fn hex(d: u64) -> String {
    format!("{d:016x}")
}

fn checkpoint_of(runner: &dyn StageRunner, plan: &TrainPlan, step: u64) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new();
    runner.save(&mut ck)?;
    ck.insert(
        STATE,
        &StateMeta {
            stage: runner.stage(),
            step,
            plan: plan.clone(),
        },
        ParamStore::new(),
    )?;
    Ok(ck)
}

/// Runs (or resumes) a stage to `plan.steps` and returns its report.
fn drive(run: &RunDir, plan: &TrainPlan, runner: &mut dyn StageRunner) -> Result<StageReport> {
    plan.validate()?;
    let _lock = run.lock()?;
    let plan_path = run.plan_path();
    if plan_path.exists() {
        let old: TrainPlan = serde_json::from_slice(&fs::read(&plan_path).at(&plan_path)?)?;
        if !old.same_run(plan) {
            return Err(Error::Config(format!(
                "{} holds a different plan; use a fresh run directory",
                run.root().display()
            )));
        }
    }
    fs::write(&plan_path, serde_json::to_vec_pretty(plan)?).at(&plan_path)?;

    let mut start = 0;
    if let Some((step, path)) = run.latest_checkpoint()? {
        if step > plan.steps {
            return Err(Error::Config(format!(
                "run already reached step {step}, beyond the requested {}",
                plan.steps
            )));
        }
        let ck = Checkpoint::load(&path)?;
        let state: StateMeta = ck.meta(STATE)?;
        if state.stage != runner.stage() {
            return Err(Error::Config("run directory belongs to another stage".into()));
        }
        runner.restore(&ck)?;
        start = state.step;
        log::info!("{}: resuming at step {start}", runner.stage().name());
    }

    // Keep only records before the resume point so the log matches an
    // uninterrupted run.
    let mut history: Vec<MetricRecord> = run.read_metrics()?.into_iter().filter(|r| r.step < start).collect();
    let metrics_path = run.metrics_path();
    let mut log = fs::File::create(&metrics_path).at(&metrics_path)?;
    for r in &history {
        writeln!(log, "{}", serde_json::to_string(r)?).at(&metrics_path)?;
    }

    for step in start..plan.steps {
        let values = runner.step(step)?;
        if let Some(&loss) = values.get("loss") {
            if !loss.is_finite() {
                return Err(Error::Divergence { step, loss });
            }
        }
        let record = MetricRecord {
            stage: runner.stage(),
            step,
            values,
        };
        writeln!(log, "{}", serde_json::to_string(&record)?).at(&metrics_path)?;
        history.push(record);
        let done = step + 1;
        if plan.checkpoint_every > 0 && done % plan.checkpoint_every == 0 && done < plan.steps {
            checkpoint_of(runner, plan, done)?.save(&run.checkpoint_path(done))?;
        }
        if done % 100 == 0 {
            log::info!("{} step {done}/{}", runner.stage().name(), plan.steps);
        }
    }
    log.flush().at(&metrics_path)?;

    let final_ck = checkpoint_of(runner, plan, plan.steps)?;
    final_ck.save(&run.checkpoint_path(plan.steps))?;
    final_ck.save(&run.final_checkpoint())?;

    let mut report = StageReport {
        stage: Some(runner.stage()),
        steps: plan.steps,
        final_metrics: tail_means(&history, 100),
        ..StageReport::default()
    };
    runner.finish(&mut report)?;
    let report_path = run.report_path();
    fs::write(&report_path, serde_json::to_vec_pretty(&report)?).at(&report_path)?;
    Ok(report)
}

fn tail_means(history: &[MetricRecord], n: usize) -> BTreeMap<String, f64> {
    let tail = &history[history.len().saturating_sub(n)..];
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in tail {
        for (k, v) in &r.values {
            let e = sums.entry(k.clone()).or_default();
            e.0 += v;
            e.1 += 1;
        }
    }
    sums.into_iter().map(|(k, (s, c))| (k, s / c as f64)).collect()
}

fn batch_of(data: &[LabeledImage], idx: &[usize]) -> (Array, Vec<LabelMap>) {
    let images: Vec<ImagePlane> = idx.iter().map(|&i| data[i].image.clone()).collect();
    let labels = idx.iter().map(|&i| data[i].labels.clone()).collect();
    (ImagePlane::batch_to_array(&images), labels)
}

fn psnr_of_mse(m: f64) -> f64 {
    if m <= 0.0 {
        crate::evaluation::PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / m).log10()).min(crate::evaluation::PSNR_CAP_DB)
    }
}

/// Mean bitstream bpp and PSNR of a model (α = 1) over a set.
pub fn evaluate_model(model: &Model, images: &[LabeledImage]) -> Result<(f64, f64)> {
    let mut bpp = 0.0;
    let mut p = 0.0;
    for s in images {
        let stream = model.compress(&s.image)?;
        bpp += stream.bpp();
        p += psnr(&s.image, &model.decompress(&stream, 1.0)?)?;
    }
    let n = images.len().max(1) as f64;
    Ok((bpp / n, p / n))
}

struct Stage1<'a> {
    plan: &'a TrainPlan,
    codec: Codec,
    encoder: ParamStore,
    entropy: ParamStore,
    generator: ParamStore,
    adam: [Adam; 3],
    data: &'a [LabeledImage],
    eval: &'a [LabeledImage],
    batcher: Batcher,
    perceptual: RandomConvFeatures,
    init_eval: Option<(f64, f64)>,
}

impl Stage1<'_> {
    fn model(&self) -> Model {
        Model {
            codec: self.codec.clone(),
            encoder: self.encoder.clone(),
            entropy: self.entropy.clone(),
            generator: self.generator.clone(),
            orp: None,
        }
    }
}

impl StageRunner for Stage1<'_> {
    fn stage(&self) -> Stage {
        Stage::Stage1
    }

    fn step(&mut self, step: u64) -> Result<BTreeMap<String, f64>> {
        let w = self.plan.weights;
        let (x, _) = batch_of(self.data, &self.batcher.batch(step));
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed(self.plan.seed, Stage::Stage1, step));
        let tape = Tape::new();
        let eb = Binding::trainable(&tape, &self.encoder);
        let pb = Binding::trainable(&tape, &self.entropy);
        let gb = Binding::trainable(&tape, &self.generator);
        let x = tape.constant(x);
        let fwd = self.codec.forward_train(&eb, &pb, &gb, x, &mut rng)?;
        let perceptual = &self.perceptual;
        let loss = rd_loss(x, fwd.x_hat, fwd.bits, w.lambda, |a, b| {
            distortion(a, b, w.k_m, w.k_p, perceptual)
        });
        let (n, _, h, wd) = x.value().dims4();
        let bpp = fwd.bits.item() / (n * h * wd) as f64;
        let m = mse(x, fwd.x_hat).item();
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        let grads = tape.backward(loss);
        let lr = self.plan.lr.at(step);
        let (ge, gp, gg) = (eb.gradients(&grads), pb.gradients(&grads), gb.gradients(&grads));
        drop((eb, pb, gb));
        for a in &mut self.adam {
            a.lr = lr;
        }
        self.adam[0].update(&mut self.encoder, &ge);
        self.adam[1].update(&mut self.entropy, &gp);
        self.adam[2].update(&mut self.generator, &gg);
        Ok(BTreeMap::from([
            ("loss".into(), value),
            ("bpp".into(), bpp),
            ("mse".into(), m),
            ("psnr".into(), psnr_of_mse(m)),
        ]))
    }

    fn save(&self, ck: &mut Checkpoint) -> Result<()> {
        self.model().write_into(ck)?;
        for (tag, a) in [tags::ENCODER, tags::ENTROPY, tags::GENERATOR].iter().zip(&self.adam) {
            save_adam(ck, tag, a)?;
        }
        Ok(())
    }

    fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        let m = Model::from_checkpoint(ck)?;
        if m.codec.config() != self.codec.config() {
            return Err(Error::Config("checkpoint codec differs from the plan".into()));
        }
        self.encoder = m.encoder;
        self.entropy = m.entropy;
        self.generator = m.generator;
        for (tag, a) in [tags::ENCODER, tags::ENTROPY, tags::GENERATOR].iter().zip(&mut self.adam) {
            *a = load_adam(ck, tag)?;
        }
        Ok(())
    }

    fn finish(&mut self, report: &mut StageReport) -> Result<()> {
        if self.eval.is_empty() {
            return Ok(());
        }
        if let Some((bpp, p)) = self.init_eval {
            report.eval.insert("init_bpp".into(), bpp);
            report.eval.insert("init_psnr".into(), p);
        }
        let (bpp, p) = evaluate_model(&self.model(), self.eval)?;
        report.eval.insert("bpp".into(), bpp);
        report.eval.insert("psnr".into(), p);
        Ok(())
    }
}

/// Rate-distortion training of encoder, entropy model and generator.
/// `eval` images, when given, are compressed for real before and after.
pub fn run_stage1(
    run: &RunDir,
    plan: &TrainPlan,
    codec_cfg: &CodecConfig,
    data: &[LabeledImage],
    eval: &[LabeledImage],
) -> Result<StageReport> {
    if plan.stage != Stage::Stage1 {
        return Err(Error::Config("plan is not for stage 1".into()));
    }
    let codec = Codec::new(codec_cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let encoder = codec.init_encoder(&mut rng);
    let entropy = codec.init_entropy(&mut rng);
    let generator = codec.init_generator(&mut rng);
    let lr = plan.lr.at(0);
    let mut runner = Stage1 {
        plan,
        batcher: Batcher::new(data.len(), plan.batch_size, plan.seed)?,
        codec,
        encoder,
        entropy,
        generator,
        adam: [Adam::new(lr), Adam::new(lr), Adam::new(lr)],
        data,
        eval,
        perceptual: RandomConvFeatures::new(),
        init_eval: None,
    };
    if !eval.is_empty() {
        runner.init_eval = Some(evaluate_model(&runner.model(), eval)?);
    }
    drive(run, plan, &mut runner)
}

/// Which discriminator stage two trains against, with its parameters.
#[derive(Clone, Debug)]
pub enum Discriminator {
    OasisC(OasisC),
    PatchGan(PatchGan, usize),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum DiscMeta {
    OasisC { config: OasisConfig },
    PatchGan { latent_channels: usize },
}

pub const DISC: &str = "disc";

impl Discriminator {
    fn meta(&self) -> DiscMeta {
        match self {
            Discriminator::OasisC(d) => DiscMeta::OasisC {
                config: d.config().clone(),
            },
            Discriminator::PatchGan(_, c) => DiscMeta::PatchGan { latent_channels: *c },
        }
    }

    fn from_meta(meta: DiscMeta) -> Result<Self> {
        Ok(match meta {
            DiscMeta::OasisC { config } => Discriminator::OasisC(OasisC::new(config)?),
            DiscMeta::PatchGan { latent_channels } => {
                Discriminator::PatchGan(PatchGan::new(latent_channels), latent_channels)
            }
        })
    }

    /// The discriminator stored in a checkpoint with its parameters.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, ParamStore)> {
        Ok((Self::from_meta(ck.meta(DISC)?)?, ck.params(DISC)?.clone()))
    }

    fn init(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match self {
            Discriminator::OasisC(d) => d.init(&mut rng),
            Discriminator::PatchGan(d, _) => d.init(&mut rng),
        }
    }
}

struct Stage2<'a> {
    plan: &'a TrainPlan,
    weights: LossWeights,
    model: Model,
    generator_mse: ParamStore,
    disc: Discriminator,
    disc_params: ParamStore,
    adam_g: Adam,
    adam_d: Adam,
    data: &'a [LabeledImage],
    batcher: Batcher,
    perceptual: RandomConvFeatures,
    frozen_before: (u64, u64),
}

impl Stage2<'_> {
    /// Rounded latents from the frozen encoder.
    fn latents(&self, x: &Array) -> Result<Array> {
        let tape = Tape::new();
        let eb = Binding::frozen(&tape, &self.model.encoder);
        let y = self.model.codec.analyze(&eb, tape.constant(x.clone()))?;
        Ok(y.value().map(f64::round_ties_even))
    }
}

/// Share of pixels an OASIS-C field classifies correctly: reals as their
/// class, fakes as the extra class.
fn oasis_accuracy(real: &Array, fake: &Array, labels: &[LabelMap]) -> f64 {
    let (n, c, h, w) = real.dims4();
    let hw = h * w;
    let argmax = |a: &Array, i: usize, k: usize| {
        (0..c).fold(0, |best, ch| {
            if a.data()[(i * c + ch) * hw + k] > a.data()[(i * c + best) * hw + k] {
                ch
            } else {
                best
            }
        })
    };
    let mut correct = 0usize;
    for (i, l) in labels.iter().enumerate().take(n) {
        for k in 0..hw {
            correct += usize::from(argmax(real, i, k) + 1 == usize::from(l.data()[k]));
            correct += usize::from(argmax(fake, i, k) == c - 1);
        }
    }
    correct as f64 / (2 * n * hw) as f64
}

impl StageRunner for Stage2<'_> {
    fn stage(&self) -> Stage {
        Stage::Stage2
    }

    fn step(&mut self, step: u64) -> Result<BTreeMap<String, f64>> {
        let w = self.weights;
        let (x_arr, labels) = batch_of(self.data, &self.batcher.batch(step));
        let y_arr = self.latents(&x_arr)?;
        let pixel_w = batch_pixel_weights(&labels);
        let seed = step_seed(self.plan.seed, Stage::Stage2, step);
        let mut out = BTreeMap::new();

        // Generator update against the current discriminator.
        let fake = {
            let tape = Tape::new();
            let gb = Binding::trainable(&tape, &self.model.generator);
            let db = Binding::frozen(&tape, &self.disc_params);
            let x = tape.constant(x_arr.clone());
            let y = tape.constant(y_arr.clone());
            let x_hat = self.model.codec.synthesize(&gb, y)?.image;
            let adv = match &self.disc {
                Discriminator::OasisC(d) => {
                    let logits = d.forward(&db, x_hat, Some(y))?.logits;
                    generator_adv_oasis(logits, &labels, Some(&pixel_w), w.beta)?
                }
                Discriminator::PatchGan(d, _) => {
                    let lf = d.forward(&db, x_hat, y)?;
                    let lr = d.forward(&db, x, y)?;
                    nonsaturating_pair(lr, lf, w.beta).generator
                }
            };
            let loss = if w.k_m > 0.0 || w.k_p > 0.0 {
                let d = distortion(x, x_hat, w.k_m, w.k_p, &self.perceptual);
                out.insert("distortion".into(), d.item());
                d + adv
            } else {
                adv
            };
            out.insert("adv_g".into(), adv.item());
            out.insert("loss".into(), loss.item());
            out.insert("psnr".into(), psnr_of_mse(mse(x, x_hat).item()));
            let grads = tape.backward(loss);
            let g = gb.gradients(&grads);
            let fake = (*x_hat.value()).clone();
            drop((gb, db));
            self.adam_g.lr = self.plan.lr.at(step);
            self.adam_g.update(&mut self.model.generator, &g);
            fake
        };

        // Discriminator update on the same (pre-update) fakes.
        let tape = Tape::new();
        let db = Binding::trainable(&tape, &self.disc_params);
        let x = tape.constant(x_arr);
        let xf = tape.constant(fake);
        let y = tape.constant(y_arr);
        let loss_d = match &self.disc {
            Discriminator::OasisC(d) => {
                let lr = d.forward(&db, x, Some(y))?.logits;
                let lf = d.forward(&db, xf, Some(y))?.logits;
                let ce = discriminator_loss_oasis(lr, lf, &labels, Some(&pixel_w))?;
                out.insert("d_acc".into(), oasis_accuracy(&lr.value(), &lf.value(), &labels));
                if w.labelmix > 0.0 {
                    let masks: Vec<Array> = labels
                        .iter()
                        .enumerate()
                        .map(|(i, l)| labelmix_mask(l, seed ^ splitmix64(i as u64)))
                        .collect();
                    let mask = Array::stack_batch(&masks);
                    let lm = d.forward(&db, labelmix(x, xf, &mask), Some(y))?.logits;
                    let lm = labelmix_consistency_logits(lm, lr, lf, &mask);
                    out.insert("labelmix".into(), lm.item());
                    ce + lm.scale(w.labelmix)
                } else {
                    ce
                }
            }
            Discriminator::PatchGan(d, _) => {
                let lr = d.forward(&db, x, y)?;
                let lf = d.forward(&db, xf, y)?;
                let right = lr.value().data().iter().filter(|&&v| v > 0.0).count()
                    + lf.value().data().iter().filter(|&&v| v <= 0.0).count();
                out.insert("d_acc".into(), right as f64 / (2 * lr.value().len()) as f64);
                nonsaturating_pair(lr, lf, 1.0).discriminator()
            }
        };
        let value = loss_d.item();
        if !value.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        out.insert("loss_d".into(), value);
        let grads = tape.backward(loss_d);
        let g = db.gradients(&grads);
        drop(db);
        self.adam_d.lr = self.plan.disc_lr;
        self.adam_d.update(&mut self.disc_params, &g);
        Ok(out)
    }

    fn save(&self, ck: &mut Checkpoint) -> Result<()> {
        self.model.write_into(ck)?;
        ck.insert(tags::GENERATOR_MSE, &(), self.generator_mse.clone())?;
        ck.insert(DISC, &self.disc.meta(), self.disc_params.clone())?;
        save_adam(ck, tags::GENERATOR, &self.adam_g)?;
        save_adam(ck, DISC, &self.adam_d)
    }

    fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        let m = Model::from_checkpoint(ck)?;
        self.model.generator = m.generator;
        self.disc_params = ck.params(DISC)?.clone();
        self.adam_g = load_adam(ck, tags::GENERATOR)?;
        self.adam_d = load_adam(ck, DISC)?;
        Ok(())
    }

    fn finish(&mut self, report: &mut StageReport) -> Result<()> {
        let (e0, p0) = self.frozen_before;
        report.frozen_digests.insert(
            tags::ENCODER.into(),
            (hex(e0), hex(digest::params(&self.model.encoder))),
        );
        report.frozen_digests.insert(
            tags::ENTROPY.into(),
            (hex(p0), hex(digest::params(&self.model.entropy))),
        );
        Ok(())
    }
}

/// Adversarial fine-tuning of the generator. E and P stay frozen; G2 starts
/// from G1. `pretrained_disc` is a segmentation-pretraining checkpoint used
/// to initialise OASIS-C.
pub fn run_stage2(
    run: &RunDir,
    plan: &TrainPlan,
    stage1: &Checkpoint,
    pretrained_disc: Option<&Checkpoint>,
    data: &[LabeledImage],
) -> Result<StageReport> {
    if plan.stage != Stage::Stage2 {
        return Err(Error::Config("plan is not for stage 2".into()));
    }
    require_stage(stage1, &[Stage::Stage1], "stage 2")?;
    let model = Model::from_checkpoint(stage1)?;
    let cy = model.codec.config().latent_channels;
    let (disc, disc_params) = match (plan.discriminator, pretrained_disc) {
        (DiscriminatorKind::OasisC, Some(ck)) => {
            require_stage(ck, &[Stage::DiscPretrain], "OASIS-C initialisation")?;
            let (d, p) = Discriminator::from_checkpoint(ck)?;
            match &d {
                Discriminator::OasisC(o) if o.config().latent_channels == cy => (d, p),
                _ => {
                    return Err(Error::Config(
                        "pretrained discriminator does not match the codec latent".into(),
                    ))
                }
            }
        }
        (DiscriminatorKind::OasisC, None) => {
            let size = data
                .first()
                .map(|s| s.image.height())
                .ok_or_else(|| Error::Config("empty training set".into()))?;
            let classes = data.iter().map(|s| s.labels.max_class()).max().unwrap_or(1);
            let d = Discriminator::OasisC(OasisC::new(OasisConfig::desk(size, classes.into(), cy))?);
            let p = d.init(step_seed(plan.seed, Stage::Stage2, u64::MAX));
            (d, p)
        }
        (DiscriminatorKind::PatchGan, _) => {
            let d = Discriminator::PatchGan(PatchGan::new(cy), cy);
            let p = d.init(step_seed(plan.seed, Stage::Stage2, u64::MAX));
            (d, p)
        }
    };
    let frozen_before = (digest::params(&model.encoder), digest::params(&model.entropy));
    let mut runner = Stage2 {
        plan,
        weights: plan.effective_weights(),
        generator_mse: model.generator.clone(),
        model,
        disc,
        disc_params,
        adam_g: Adam::new(plan.lr.at(0)),
        adam_d: Adam::new(plan.disc_lr),
        batcher: Batcher::new(data.len(), plan.batch_size, plan.seed)?,
        data,
        perceptual: RandomConvFeatures::new(),
        frozen_before,
    };
    drive(run, plan, &mut runner)
}

struct OrpStage<'a> {
    plan: &'a TrainPlan,
    model: Model,
    base: Checkpoint,
    head: OrpHead,
    params: ParamStore,
    adam: Adam,
    images: Vec<ImagePlane>,
    cache: FrozenFeatures,
    eval: &'a [LabeledImage],
    frozen_before: u64,
}

impl StageRunner for OrpStage<'_> {
    fn stage(&self) -> Stage {
        Stage::Orp
    }

    fn step(&mut self, step: u64) -> Result<BTreeMap<String, f64>> {
        self.adam.lr = self.plan.lr.at(step);
        let settings = OrpSettings {
            batch_size: self.plan.batch_size,
            learning_rate: self.adam.lr,
            seed: self.plan.seed,
        };
        let losses = train_orp_range(
            &self.head,
            &mut self.params,
            &mut self.adam,
            &self.images,
            &self.cache,
            &settings,
            step,
            step + 1,
        )?;
        Ok(BTreeMap::from([("loss".into(), losses[0])]))
    }

    fn save(&self, ck: &mut Checkpoint) -> Result<()> {
        // Carry every stage-two section forward, then add the head.
        for tag in self.base.tags() {
            if tag != STATE && !tag.starts_with("adam.") {
                let s = self.base.section(tag)?;
                ck.insert(tag, &s.meta, s.params.clone())?;
            }
        }
        ck.insert(tags::ORP, &self.head.config(), self.params.clone())?;
        save_adam(ck, tags::ORP, &self.adam)
    }

    fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        self.params = ck.params(tags::ORP)?.clone();
        self.adam = load_adam(ck, tags::ORP)?;
        Ok(())
    }

    fn finish(&mut self, report: &mut StageReport) -> Result<()> {
        report.frozen_digests.insert(
            tags::GENERATOR.into(),
            (hex(self.frozen_before), hex(digest::params(&self.model.generator))),
        );
        if self.eval.is_empty() {
            return Ok(());
        }
        let model = Model {
            codec: self.model.codec.clone(),
            encoder: self.model.encoder.clone(),
            entropy: self.model.entropy.clone(),
            generator: self.model.generator.clone(),
            orp: Some((self.head.clone(), self.params.clone())),
        };
        for (alpha, key) in [(0.0, "psnr_alpha0"), (1.0, "psnr_alpha1")] {
            let mut p = 0.0;
            for s in self.eval {
                p += psnr(&s.image, &model.decompress(&model.compress(&s.image)?, alpha)?)?;
            }
            report.eval.insert(key.into(), p / self.eval.len() as f64);
        }
        Ok(())
    }
}

/// Trains the ORP head on a stage-two checkpoint; everything else is frozen.
pub fn run_orp(
    run: &RunDir,
    plan: &TrainPlan,
    orp_cfg: OrpConfig,
    stage2: &Checkpoint,
    data: &[LabeledImage],
    eval: &[LabeledImage],
) -> Result<StageReport> {
    if plan.stage != Stage::Orp {
        return Err(Error::Config("plan is not for ORP training".into()));
    }
    require_stage(stage2, &[Stage::Stage2], "ORP training")?;
    let model = Model::from_checkpoint(stage2)?;
    let head = OrpHead::new(&model.codec, orp_cfg)?;
    let params = head.init(
        &model.codec,
        &model.generator,
        &mut ChaCha8Rng::seed_from_u64(step_seed(plan.seed, Stage::Orp, u64::MAX)),
    )?;
    let images: Vec<ImagePlane> = data.iter().map(|s| s.image.clone()).collect();
    let cache = FrozenFeatures::compute(&model.codec, &model.encoder, &model.generator, &images)?;
    let mut runner = OrpStage {
        plan,
        frozen_before: digest::params(&model.generator),
        model,
        base: stage2.clone(),
        head,
        params,
        adam: Adam::new(plan.lr.at(0)),
        images,
        cache,
        eval,
    };
    drive(run, plan, &mut runner)
}

struct DiscPretrain<'a> {
    plan: &'a TrainPlan,
    disc: OasisC,
    params: ParamStore,
    adam: Adam,
    data: &'a [LabeledImage],
    held_out: &'a [LabeledImage],
    batcher: Batcher,
}

impl StageRunner for DiscPretrain<'_> {
    fn stage(&self) -> Stage {
        Stage::DiscPretrain
    }

    fn step(&mut self, step: u64) -> Result<BTreeMap<String, f64>> {
        let idx = self.batcher.batch(step);
        let images: Vec<ImagePlane> = idx.iter().map(|&i| self.data[i].image.clone()).collect();
        let labels: Vec<LabelMap> = idx.iter().map(|&i| self.data[i].labels.clone()).collect();
        let (loss, grads) = segmentation_step(&self.disc, &self.params, &images, &labels)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        self.adam.lr = self.plan.lr.at(step);
        self.adam.update(&mut self.params, &grads);
        Ok(BTreeMap::from([("loss".into(), loss)]))
    }

    fn save(&self, ck: &mut Checkpoint) -> Result<()> {
        let meta = DiscMeta::OasisC {
            config: self.disc.config().clone(),
        };
        ck.insert(DISC, &meta, self.params.clone())?;
        save_adam(ck, DISC, &self.adam)
    }

    fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        self.params = ck.params(DISC)?.clone();
        self.adam = load_adam(ck, DISC)?;
        Ok(())
    }

    fn finish(&mut self, report: &mut StageReport) -> Result<()> {
        if !self.held_out.is_empty() {
            let miou = evaluate_miou(&self.disc, &self.params, self.held_out)?;
            report.eval.insert("miou".into(), miou);
        }
        Ok(())
    }
}

/// Unconditional segmentation pretraining of OASIS-C. The held-out mIoU is
/// stored in the report.
pub fn run_disc_pretrain(
    run: &RunDir,
    plan: &TrainPlan,
    cfg: &OasisConfig,
    data: &[LabeledImage],
    held_out: &[LabeledImage],
) -> Result<StageReport> {
    if plan.stage != Stage::DiscPretrain {
        return Err(Error::Config("plan is not for discriminator pretraining".into()));
    }
    let disc = OasisC::new(cfg.clone())?;
    let params = disc.init(&mut ChaCha8Rng::seed_from_u64(plan.seed));
    let mut runner = DiscPretrain {
        plan,
        disc,
        params,
        adam: Adam::new(plan.lr.at(0)),
        batcher: Batcher::new(data.len(), plan.batch_size, plan.seed)?,
        data,
        held_out,
    };
    drive(run, plan, &mut runner)
}

/// The OASIS-C network and parameters of a pretraining checkpoint, for
/// perception features.
pub fn load_feature_discriminator(ck: &Checkpoint) -> Result<(OasisC, ParamStore)> {
    match Discriminator::from_checkpoint(ck)? {
        (Discriminator::OasisC(d), p) => Ok((d, p)),
        _ => Err(Error::Config("feature extractor must be an OASIS-C discriminator".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategy_two_overrides_weights() {
        let mut plan = TrainPlan::desk(Stage::Stage2);
        plan.strategy = Strategy::II;
        let w = plan.effective_weights();
        assert_eq!((w.k_m, w.k_p, w.beta), (0.0, 0.0, 1.0));
        plan.strategy = Strategy::I;
        assert_eq!(plan.effective_weights(), plan.weights);
    }

    #[test]
    fn schedule_decays_at_the_step() {
        let s = LrSchedule {
            value: 1e-4,
            decay_step: Some(10),
            decayed: 1e-5,
        };
        assert_eq!((s.at(9), s.at(10)), (1e-4, 1e-5));
    }

    #[test]
    fn step_seeds_differ_by_stage_and_step() {
        let a = step_seed(7, Stage::Stage1, 3);
        assert_ne!(a, step_seed(7, Stage::Stage2, 3));
        assert_ne!(a, step_seed(7, Stage::Stage1, 4));
        assert_eq!(a, step_seed(7, Stage::Stage1, 3));
    }

    #[test]
    fn plans_differing_in_steps_are_one_run() {
        let a = TrainPlan::desk(Stage::Stage1);
        let mut b = a.clone();
        b.steps += 10;
        assert!(a.same_run(&b));
        b.seed = 1;
        assert!(!a.same_run(&b));
    }
}
