//! Decode-time realism control.
//!
//! The ORP head reads the GAN generator's penultimate features and predicts
//! the distortion-optimised reconstruction `m`. With `R = m − g` the output is
//! `g + (1 − α) R`: `α = 1` is the generator's own output, `α = 0` is `m`.
//! Image and weight interpolation between two generators are kept as
//! baselines.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use egic_tensor::{Adam, Array, Binding, Conv2d, Norm, ParamStore, Tape, Var};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{Codec, LatentCode};
use crate::data::{Batcher, LabeledImage};
use crate::error::{Error, Result};
use crate::evaluation::{perception_score, psnr, scatter_svg, Perception, Series};
use crate::image::ImagePlane;
use crate::layers::ResBlock;
use crate::losses::orp_loss;
use crate::model::Model;

/// The seven-point α grid used for sweeps.
pub const ALPHA_GRID: [f64; 7] = [0.0, 1.0 / 6.0, 1.0 / 3.0, 0.5, 2.0 / 3.0, 5.0 / 6.0, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrpConfig {
    /// Bottleneck width of the residual block.
    pub hidden: usize,
}

impl Default for OrpConfig {
    fn default() -> Self {
        Self { hidden: 6 }
    }
}

/// One residual block plus an output convolution on the generator features.
#[derive(Clone, Debug)]
pub struct OrpHead {
    cfg: OrpConfig,
    res: ResBlock,
    out: Conv2d,
}

impl OrpHead {
    pub fn new(codec: &Codec, cfg: OrpConfig) -> Result<Self> {
        if cfg.hidden == 0 {
            return Err(Error::Config("ORP hidden width must be positive".into()));
        }
        let c = codec.feature_channels();
        Ok(Self {
            cfg,
            res: ResBlock::new("orp.res", c, cfg.hidden, Norm::None),
            out: Conv2d::new("orp.out", c, 3, 3),
        })
    }

    pub fn config(&self) -> OrpConfig {
        self.cfg
    }

    /// Random bottleneck, zero second conv and the generator's own output
    /// layer, so the untrained head reproduces the generator (`R = 0`).
    pub fn init(&self, codec: &Codec, generator: &ParamStore, rng: &mut impl Rng) -> Result<ParamStore> {
        let mut s = ParamStore::new();
        self.res.init(&mut s, rng);
        self.res.conv2.zero(&mut s);
        let src = &codec.output_conv().name;
        for suffix in ["w", "b"] {
            let p = generator.get(&format!("{src}.{suffix}")).ok_or_else(|| {
                Error::MissingPrerequisite(format!("generator has no `{src}.{suffix}`"))
            })?;
            s.insert(format!("{}.{suffix}", self.out.name), p.clone());
        }
        Ok(s)
    }

    /// Predicted distortion-optimised output `m`.
    pub fn predict<'t>(&self, b: &Binding<'t, '_>, features: Var<'t>) -> Var<'t> {
        self.out.forward(b, self.res.forward(b, features))
    }

    pub fn predict_array(&self, params: &ParamStore, features: &Array) -> Array {
        let tape = Tape::new();
        let b = Binding::frozen(&tape, params);
        (*self.predict(&b, tape.constant(features.clone())).value()).clone()
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::Contract(format!("alpha {alpha} outside [0, 1]")))
    }
}

/// `g + (1 − α)(m − g)` on the tape. The endpoints return their operand
/// itself, so `α = 1` is bit-exact.
pub fn blend<'t>(g: Var<'t>, m: Var<'t>, alpha: f64) -> Result<Var<'t>> {
    check_alpha(alpha)?;
    Ok(if alpha == 1.0 {
        g
    } else if alpha == 0.0 {
        m
    } else {
        g + (m - g).scale(1.0 - alpha)
    })
}

/// ORP output from the generator output and its features. The head is not
/// evaluated at `α = 1`.
pub fn orp_output(
    g2_out: &Array,
    features: &Array,
    head: &OrpHead,
    params: &ParamStore,
    alpha: f64,
) -> Result<Array> {
    check_alpha(alpha)?;
    if alpha == 1.0 {
        return Ok(g2_out.clone());
    }
    let m = head.predict_array(params, features);
    if m.shape() != g2_out.shape() {
        return Err(Error::Contract("features do not belong to this output".into()));
    }
    if alpha == 0.0 {
        return Ok(m);
    }
    Ok(g2_out.zip_map(&m, |g, m| g + (1.0 - alpha) * (m - g)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrpSettings {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

/// Generator outputs and features per training image. E and G2 are frozen
/// during ORP training, so they are evaluated once.
pub struct FrozenFeatures {
    pub outputs: Vec<Array>,
    pub features: Vec<Array>,
}

impl FrozenFeatures {
    pub fn compute(codec: &Codec, encoder: &ParamStore, generator: &ParamStore, images: &[ImagePlane]) -> Result<Self> {
        let per_image: Vec<Result<(Array, Array)>> = images
            .par_iter()
            .map(|img| {
                let tape = Tape::new();
                let eb = Binding::frozen(&tape, encoder);
                let gb = Binding::frozen(&tape, generator);
                let y = codec.analyze(&eb, tape.constant(img.to_array()))?;
                let syn = codec.synthesize(&gb, y.round_ste())?;
                Ok(((*syn.image.value()).clone(), (*syn.features.value()).clone()))
            })
            .collect();
        let mut outputs = Vec::with_capacity(images.len());
        let mut features = Vec::with_capacity(images.len());
        for r in per_image {
            let (o, f) = r?;
            outputs.push(o);
            features.push(f);
        }
        Ok(Self { outputs, features })
    }
}

/// Loss and head gradients for one batch at `α = 0`.
pub fn orp_step(
    head: &OrpHead,
    params: &ParamStore,
    targets: &Array,
    features: &Array,
) -> (f64, BTreeMap<String, Array>) {
    let tape = Tape::new();
    let b = Binding::trainable(&tape, params);
    let m = head.predict(&b, tape.constant(features.clone()));
    let loss = orp_loss(tape.constant(targets.clone()), m);
    let grads = tape.backward(loss);
    (loss.item(), b.gradients(&grads))
}

/// Runs steps `start..end` of ORP training over cached generator features.
/// Returns the per-step losses.
#[allow(clippy::too_many_arguments)]
pub fn train_orp_range(
    head: &OrpHead,
    params: &mut ParamStore,
    adam: &mut Adam,
    images: &[ImagePlane],
    cache: &FrozenFeatures,
    settings: &OrpSettings,
    start: u64,
    end: u64,
) -> Result<Vec<f64>> {
    let batcher = Batcher::new(images.len(), settings.batch_size, settings.seed)?;
    let mut losses = Vec::new();
    for step in start..end {
        let idx = batcher.batch(step);
        let targets = Array::stack_batch(&idx.iter().map(|&i| images[i].to_array()).collect::<Vec<_>>());
        let feats = Array::stack_batch(&idx.iter().map(|&i| cache.features[i].clone()).collect::<Vec<_>>());
        let (loss, grads) = orp_step(head, params, &targets, &feats);
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        adam.update(params, &grads);
        losses.push(loss);
    }
    Ok(losses)
}

/// Trains the head alone for `steps` steps; the codec is never modified.
pub fn train_orp(
    model: &Model,
    head: &OrpHead,
    mut params: ParamStore,
    data: &[LabeledImage],
    steps: u64,
    settings: &OrpSettings,
) -> Result<(ParamStore, Vec<f64>)> {
    let images: Vec<ImagePlane> = data.iter().map(|s| s.image.clone()).collect();
    if steps == 0 {
        return Ok((params, Vec::new()));
    }
    let cache = FrozenFeatures::compute(&model.codec, &model.encoder, &model.generator, &images)?;
    let mut adam = Adam::new(settings.learning_rate);
    let losses = train_orp_range(head, &mut params, &mut adam, &images, &cache, settings, 0, steps)?;
    Ok((params, losses))
}

/// `(1 − α) x1 + α x2`.
pub fn image_interpolate(x1: &ImagePlane, x2: &ImagePlane, alpha: f64) -> Result<ImagePlane> {
    check_alpha(alpha)?;
    if x1.size() != x2.size() {
        return Err(Error::Contract("interpolated images differ in size".into()));
    }
    let (h, w) = x1.size();
    let data = if alpha == 0.0 {
        x1.data().to_vec()
    } else if alpha == 1.0 {
        x2.data().to_vec()
    } else {
        x1.data()
            .iter()
            .zip(x2.data())
            .map(|(a, b)| (1.0 - alpha) * a + alpha * b)
            .collect()
    };
    Ok(ImagePlane::new(h, w, data))
}

/// `(1 − α) θ1 + α θ2` per parameter.
pub fn weight_interpolate(theta1: &ParamStore, theta2: &ParamStore, alpha: f64) -> Result<ParamStore> {
    check_alpha(alpha)?;
    if !theta1.same_structure(theta2) {
        return Err(Error::Contract("parameter sets differ in structure".into()));
    }
    Ok(theta1
        .iter()
        .map(|(name, a)| {
            let b = theta2.get(name).expect("same structure");
            let v = if alpha == 0.0 {
                a.clone()
            } else if alpha == 1.0 {
                b.clone()
            } else {
                a.zip_map(b, |a, b| (1.0 - alpha) * a + alpha * b)
            };
            (name.clone(), v)
        })
        .collect())
}

/// How a decoded latent becomes an image at a given α.
pub trait AlphaDecoder: Sync {
    fn render(&self, y: &LatentCode, size: (usize, usize), alphas: &[f64]) -> Result<Vec<ImagePlane>>;
}

/// ORP on a model with a trained head.
impl AlphaDecoder for Model {
    fn render(&self, y: &LatentCode, size: (usize, usize), alphas: &[f64]) -> Result<Vec<ImagePlane>> {
        let (g2, features) = self.synthesize(y)?;
        alphas.iter().map(|&a| self.finish(&g2, &features, a, size)).collect()
    }
}

/// Pixel blend of a distortion generator (α = 0) and a GAN generator (α = 1)
/// on the same latent.
pub struct ImageInterpolation<'a> {
    pub model: &'a Model,
    pub generator_mse: &'a ParamStore,
}

impl AlphaDecoder for ImageInterpolation<'_> {
    fn render(&self, y: &LatentCode, size: (usize, usize), alphas: &[f64]) -> Result<Vec<ImagePlane>> {
        let (x1, _) = self.model.codec.decode_image(self.generator_mse, y)?;
        let (x2, _) = self.model.codec.decode_image(&self.model.generator, y)?;
        let (x1, x2) = (ImagePlane::from_array(&x1, 0), ImagePlane::from_array(&x2, 0));
        alphas
            .iter()
            .map(|&a| crate::data::crop_to_size(&image_interpolate(&x1, &x2, a)?, size))
            .collect()
    }
}

/// Blend of the two generators' parameters.
pub struct WeightInterpolation<'a> {
    pub model: &'a Model,
    pub generator_mse: &'a ParamStore,
}

impl AlphaDecoder for WeightInterpolation<'_> {
    fn render(&self, y: &LatentCode, size: (usize, usize), alphas: &[f64]) -> Result<Vec<ImagePlane>> {
        alphas
            .iter()
            .map(|&a| {
                let theta = weight_interpolate(self.generator_mse, &self.model.generator, a)?;
                let (x, _) = self.model.codec.decode_image(&theta, y)?;
                crate::data::crop_to_size(&ImagePlane::from_array(&x, 0), size)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub image_id: String,
    pub alpha: f64,
    pub bpp: f64,
    pub psnr_db: f64,
    /// Set-level score, present on the aggregate rows only.
    pub perception_score: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

/// Id of the per-α aggregate rows.
pub const AGGREGATE_ID: &str = "all";

impl SweepTable {
    pub fn aggregates(&self) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(|r| r.image_id == AGGREGATE_ID)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("image_id,alpha,bpp,psnr_db,perception_score\n");
        for r in &self.rows {
            let p = r.perception_score.map(|p| format!("{p:.6}")).unwrap_or_default();
            let _ = writeln!(s, "{},{:.6},{:.6},{:.6},{p}", r.image_id, r.alpha, r.bpp, r.psnr_db);
        }
        s
    }

    /// Distortion-perception scatter of the aggregate rows.
    pub fn to_svg(&self) -> String {
        let points = self
            .aggregates()
            .filter_map(|r| r.perception_score.map(|p| (r.psnr_db, p)))
            .collect();
        scatter_svg(
            "Distortion-perception sweep",
            "PSNR (dB)",
            "perception score",
            &[Series { label: "alpha", points }],
        )
    }
}

/// Compresses every image once and decodes it at each α. Per-image rows
/// carry bpp and PSNR; one aggregate row per α adds the mean values and the
/// set-level perception score when `perception` is given.
pub fn sweep_alpha(
    model: &Model,
    decoder: &dyn AlphaDecoder,
    images: &[LabeledImage],
    alphas: &[f64],
    perception: Option<Perception<'_>>,
) -> Result<SweepTable> {
    for &a in alphas {
        check_alpha(a)?;
    }
    let decoded: Vec<Result<(f64, Vec<ImagePlane>)>> = images
        .par_iter()
        .map(|s| {
            let stream = model.compress(&s.image)?;
            let y = model.decode_latent(&stream)?;
            Ok((stream.bpp(), decoder.render(&y, s.image.size(), alphas)?))
        })
        .collect();
    let decoded = decoded.into_iter().collect::<Result<Vec<_>>>()?;
    let mut table = SweepTable::default();
    let originals: Vec<ImagePlane> = images.iter().map(|s| s.image.clone()).collect();
    for (k, &alpha) in alphas.iter().enumerate() {
        let mut sum_bpp = 0.0;
        let mut sum_psnr = 0.0;
        let mut recon = Vec::with_capacity(images.len());
        for (s, (bpp, outs)) in images.iter().zip(&decoded) {
            let p = psnr(&s.image, &outs[k])?;
            sum_bpp += bpp;
            sum_psnr += p;
            recon.push(outs[k].clone());
            table.rows.push(SweepRow {
                image_id: s.id.clone(),
                alpha,
                bpp: *bpp,
                psnr_db: p,
                perception_score: None,
            });
        }
        let n = images.len().max(1) as f64;
        let score = match perception {
            Some(p) => Some(perception_score(&originals, &recon, p.patch, p.features)?),
            None => None,
        };
        table.rows.push(SweepRow {
            image_id: AGGREGATE_ID.into(),
            alpha,
            bpp: sum_bpp / n,
            psnr_db: sum_psnr / n,
            perception_score: score,
        });
    }
    Ok(table)
}
