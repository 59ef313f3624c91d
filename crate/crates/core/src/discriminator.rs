//! OASIS-C: a U-Net segmentation discriminator over `N + 1` classes with
//! pixel-wise projection conditioning on the latent, plus the PatchGAN
//! baseline.
//!
//! Residual blocks apply their convolutions at the cheaper resolution: the
//! down block pools between its two convolutions and the up block upsamples
//! between them. The 1×1 shortcut commutes with pooling and nearest
//! upsampling, so it too runs at the low resolution.

use std::collections::BTreeMap;

use egic_tensor::{Adam, Array, Binding, Conv2d, Norm, ParamStore, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batcher, LabeledImage};
use crate::error::{Error, Result};
use crate::image::{ImagePlane, LabelMap};
use crate::layers::lrelu;
use crate::losses::{batch_pixel_weights, segmentation_ce};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OasisConfig {
    pub image_size: usize,
    pub num_classes: usize,
    pub latent_channels: usize,
    pub down_channels: Vec<usize>,
    pub up_channels: Vec<usize>,
    /// Width of the latent pre-processing conv; equals the last up width so
    /// the projection is a per-pixel inner product.
    pub prep_width: usize,
}

impl OasisConfig {
    /// Depth 4 with a quarter of the reference channel schedule.
    pub fn desk(image_size: usize, num_classes: usize, latent_channels: usize) -> Self {
        Self {
            image_size,
            num_classes,
            latent_channels,
            down_channels: vec![32, 32, 64, 64],
            up_channels: vec![64, 32, 32, 16],
            prep_width: 16,
        }
    }

    /// The full six-level schedule for 256-px inputs.
    pub fn reference(num_classes: usize, latent_channels: usize) -> Self {
        Self {
            image_size: 256,
            num_classes,
            latent_channels,
            down_channels: vec![128, 128, 256, 256, 512, 512],
            up_channels: vec![512, 256, 256, 128, 128, 64],
            prep_width: 64,
        }
    }

    pub fn depth(&self) -> usize {
        self.down_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let depth = self.depth();
        if depth < 2 {
            return Err(Error::Config("discriminator depth must be at least 2".into()));
        }
        if self.up_channels.len() != depth {
            return Err(Error::Config("up and down channel schedules differ in length".into()));
        }
        if self.image_size % (1 << depth) != 0 || self.image_size >> depth < 4 {
            return Err(Error::Config(format!(
                "image size {} leaves no 4x4 bottleneck at depth {depth}",
                self.image_size
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if Some(&self.prep_width) != self.up_channels.last() {
            return Err(Error::Config(
                "prep_width must equal the last up-block width".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct DownBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    shortcut: Conv2d,
    preact: bool,
}

impl DownBlock {
    fn forward<'t>(&self, b: &Binding<'t, '_>, x: Var<'t>) -> Var<'t> {
        let h = if self.preact { lrelu(x) } else { x };
        let h = lrelu(self.conv1.forward(b, h)).avg_pool(2);
        let h = self.conv2.forward(b, h);
        h + self.shortcut.forward(b, x.avg_pool(2))
    }
}

#[derive(Clone, Debug)]
struct UpBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    shortcut: Conv2d,
}

impl UpBlock {
    fn forward<'t>(&self, b: &Binding<'t, '_>, x: Var<'t>) -> Var<'t> {
        let h = lrelu(self.conv1.forward(b, lrelu(x))).upsample_nearest(2);
        let h = self.conv2.forward(b, h);
        h + self.shortcut.forward(b, x).upsample_nearest(2)
    }
}

/// Output of one discriminator pass.
pub struct OasisOutput<'t> {
    /// `[n, N+1, H, W]` logits including the projection term.
    pub logits: Var<'t>,
    /// Last down-block activation.
    pub bottleneck: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct OasisC {
    cfg: OasisConfig,
    down: Vec<DownBlock>,
    up: Vec<UpBlock>,
    out: Conv2d,
    prep: Conv2d,
}

/// Parameter-name prefix of the latent pre-processing conv.
pub const PREP_PREFIX: &str = "disc.prep";

impl OasisC {
    pub fn new(cfg: OasisConfig) -> Result<Self> {
        cfg.validate()?;
        let wn = Norm::Weight;
        let depth = cfg.depth();
        let mut down = Vec::with_capacity(depth);
        let mut cin = 3;
        for (i, &c) in cfg.down_channels.iter().enumerate() {
            down.push(DownBlock {
                conv1: Conv2d::new(format!("disc.down{i}.conv1"), cin, c, 3).norm(wn),
                conv2: Conv2d::new(format!("disc.down{i}.conv2"), c, c, 3).norm(wn),
                shortcut: Conv2d::new(format!("disc.down{i}.skip"), cin, c, 1).norm(wn),
                preact: i > 0,
            });
            cin = c;
        }
        let mut up = Vec::with_capacity(depth);
        for (i, &c) in cfg.up_channels.iter().enumerate() {
            // Up block i > 0 also receives the skip from down block depth-1-i.
            let skip = if i == 0 { 0 } else { cfg.down_channels[depth - 1 - i] };
            let cin_up = cin + skip;
            up.push(UpBlock {
                conv1: Conv2d::new(format!("disc.up{i}.conv1"), cin_up, c, 3).norm(wn),
                conv2: Conv2d::new(format!("disc.up{i}.conv2"), c, c, 3).norm(wn),
                shortcut: Conv2d::new(format!("disc.up{i}.skip"), cin_up, c, 1).norm(wn),
            });
            cin = c;
        }
        let out = Conv2d::new("disc.out", cin, cfg.num_classes + 1, 1).norm(wn);
        let prep = Conv2d::new(PREP_PREFIX, cfg.latent_channels, cfg.prep_width, 3).norm(wn);
        Ok(Self {
            cfg,
            down,
            up,
            out,
            prep,
        })
    }

    pub fn config(&self) -> &OasisConfig {
        &self.cfg
    }

    fn convs(&self) -> impl Iterator<Item = &Conv2d> {
        self.down
            .iter()
            .flat_map(|b| [&b.conv1, &b.conv2, &b.shortcut])
            .chain(self.up.iter().flat_map(|b| [&b.conv1, &b.conv2, &b.shortcut]))
            .chain([&self.out, &self.prep])
    }

    pub fn init(&self, rng: &mut impl Rng) -> ParamStore {
        let mut s = ParamStore::new();
        for c in self.convs() {
            c.init(&mut s, rng);
        }
        s
    }

    /// Down path activations, shallowest first.
    pub fn encode<'t>(&self, b: &Binding<'t, '_>, x: Var<'t>) -> Vec<Var<'t>> {
        let mut skips = Vec::with_capacity(self.down.len());
        let mut h = x;
        for block in &self.down {
            h = block.forward(b, h);
            skips.push(h);
        }
        skips
    }

    /// Latent pre-processing: conv, leaky ReLU, nearest resize to `target`.
    pub fn prep_latent<'t>(&self, b: &Binding<'t, '_>, y: Var<'t>, target: usize) -> Result<Var<'t>> {
        let (_, _, h, w) = y.value().dims4();
        if h == 0 || h != w || target % h != 0 {
            return Err(Error::Contract(format!(
                "cannot resize a {h}x{w} latent to {target}x{target}"
            )));
        }
        Ok(lrelu(self.prep.forward(b, y)).upsample_nearest(target / h))
    }

    /// Logits; `y = None` gives the unconditional network.
    pub fn forward<'t>(&self, b: &Binding<'t, '_>, x: Var<'t>, y: Option<Var<'t>>) -> Result<OasisOutput<'t>> {
        let (_, c, h, w) = x.value().dims4();
        if c != 3 || h != self.cfg.image_size || w != self.cfg.image_size {
            return Err(Error::Contract(format!(
                "discriminator expects 3x{0}x{0} input, got {c}x{h}x{w}",
                self.cfg.image_size
            )));
        }
        let skips = self.encode(b, x);
        let depth = skips.len();
        let bottleneck = skips[depth - 1];
        let mut h = bottleneck;
        for (i, block) in self.up.iter().enumerate() {
            if i > 0 {
                h = Var::concat_channels(&[h, skips[depth - 1 - i]]);
            }
            h = block.forward(b, h);
        }
        let out = self.out.forward(b, h);
        let logits = match y {
            Some(y) => {
                let y_prep = self.prep_latent(b, y, self.cfg.image_size)?;
                out.add_channel_broadcast(project(h, y_prep)?)
            }
            None => out,
        };
        Ok(OasisOutput { logits, bottleneck })
    }

    /// Globally pooled bottleneck, `[n, C]`: the frozen feature map used for
    /// perception scores.
    pub fn pooled_features(&self, params: &ParamStore, x: &Array) -> Array {
        let tape = Tape::new();
        let b = Binding::frozen(&tape, params);
        let skips = self.encode(&b, tape.constant(x.clone()));
        let f = skips.last().expect("depth >= 2").value();
        let (n, c, h, w) = f.dims4();
        let hw = (h * w) as f64;
        Array::from_fn([n, c], |i| f.data()[i * h * w..(i + 1) * h * w].iter().sum::<f64>() / hw)
    }
}

/// Per-pixel inner product across channels, `[n, 1, H, W]`.
pub fn project<'t>(u: Var<'t>, y_prep: Var<'t>) -> Result<Var<'t>> {
    if u.shape() != y_prep.shape() {
        return Err(Error::Contract(format!(
            "projection operands differ: {:?} vs {:?}",
            u.shape(),
            y_prep.shape()
        )));
    }
    Ok((u * y_prep).sum_channels())
}

/// PatchGAN on `concat(x, upsampled 12-filter latent features)`.
#[derive(Clone, Debug)]
pub struct PatchGan {
    prep: Conv2d,
    convs: Vec<Conv2d>,
    out: Conv2d,
}

pub const PATCHGAN_PREP_FILTERS: usize = 12;

impl PatchGan {
    pub fn new(latent_channels: usize) -> Self {
        let sn = Norm::Spectral;
        let widths = [3 + PATCHGAN_PREP_FILTERS, 16, 32, 64];
        let convs = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                Conv2d::new(format!("patch.conv{i}"), w[0], w[1], 4)
                    .stride(2)
                    .padding(1)
                    .norm(sn)
            })
            .collect();
        Self {
            prep: Conv2d::new("patch.prep", latent_channels, PATCHGAN_PREP_FILTERS, 3).norm(sn),
            convs,
            out: Conv2d::new("patch.out", 64, 1, 3).norm(sn),
        }
    }

    pub fn init(&self, rng: &mut impl Rng) -> ParamStore {
        let mut s = ParamStore::new();
        for c in std::iter::once(&self.prep).chain(&self.convs).chain([&self.out]) {
            c.init(&mut s, rng);
        }
        s
    }

    /// The discriminator's input: image channels followed by latent features.
    pub fn conditioned_input<'t>(&self, b: &Binding<'t, '_>, x: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
        let (_, _, h, _) = x.value().dims4();
        let (_, _, yh, _) = y.value().dims4();
        if yh == 0 || h % yh != 0 {
            return Err(Error::Contract("latent does not tile the image".into()));
        }
        let y_prep = lrelu(self.prep.forward(b, y)).upsample_nearest(h / yh);
        Ok(Var::concat_channels(&[x, y_prep]))
    }

    /// One logit per patch, `[n, 1, H/8, W/8]`.
    pub fn forward<'t>(&self, b: &Binding<'t, '_>, x: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
        let mut h = self.conditioned_input(b, x, y)?;
        for c in &self.convs {
            h = lrelu(c.forward(b, h));
        }
        Ok(self.out.forward(b, h))
    }
}

/// Confusion matrix `[true][predicted]` over classes `1..=N` (zero-based).
pub fn confusion_matrix(truth: &[LabelMap], predicted: &[LabelMap], num_classes: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; num_classes]; num_classes];
    for (t, p) in truth.iter().zip(predicted) {
        for (&a, &b) in t.data().iter().zip(p.data()) {
            m[usize::from(a) - 1][usize::from(b) - 1] += 1;
        }
    }
    m
}

/// Mean IoU over classes that occur in either truth or prediction.
pub fn mean_iou(confusion: &[Vec<u64>]) -> f64 {
    let n = confusion.len();
    let mut total = 0.0;
    let mut present = 0;
    for c in 0..n {
        let tp = confusion[c][c];
        let fn_: u64 = confusion[c].iter().sum::<u64>() - tp;
        let fp: u64 = (0..n).map(|r| confusion[r][c]).sum::<u64>() - tp;
        let union = tp + fp + fn_;
        if union > 0 {
            total += tp as f64 / union as f64;
            present += 1;
        }
    }
    if present == 0 {
        0.0
    } else {
        total / present as f64
    }
}

/// Arg-max over the real-class channels, as label maps.
pub fn predict_labels(disc: &OasisC, params: &ParamStore, images: &[ImagePlane]) -> Result<Vec<LabelMap>> {
    let n_classes = disc.cfg.num_classes;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(8) {
        let tape = Tape::new();
        let b = Binding::frozen(&tape, params);
        let x = tape.constant(ImagePlane::batch_to_array(chunk));
        let logits = disc.forward(&b, x, None)?.logits.value();
        let (n, c, h, w) = logits.dims4();
        let hw = h * w;
        for i in 0..n {
            let labels = (0..hw)
                .map(|k| {
                    let at = |ch: usize| logits.data()[(i * c + ch) * hw + k];
                    let best = (0..n_classes).fold(0, |best, ch| if at(ch) > at(best) { ch } else { best });
                    best as u16 + 1
                })
                .collect();
            out.push(LabelMap::new(h, w, labels));
        }
    }
    Ok(out)
}

pub fn evaluate_miou(disc: &OasisC, params: &ParamStore, samples: &[LabeledImage]) -> Result<f64> {
    let images: Vec<ImagePlane> = samples.iter().map(|s| s.image.clone()).collect();
    let truth: Vec<LabelMap> = samples.iter().map(|s| s.labels.clone()).collect();
    let predicted = predict_labels(disc, params, &images)?;
    Ok(mean_iou(&confusion_matrix(&truth, &predicted, disc.cfg.num_classes)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSettings {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

/// Loss and gradients of one unconditional segmentation batch.
pub fn segmentation_step(
    disc: &OasisC,
    params: &ParamStore,
    images: &[ImagePlane],
    labels: &[LabelMap],
) -> Result<(f64, BTreeMap<String, Array>)> {
    let weights = batch_pixel_weights(labels);
    let tape = Tape::new();
    let b = Binding::trainable(&tape, params);
    let x = tape.constant(ImagePlane::batch_to_array(images));
    let logits = disc.forward(&b, x, None)?.logits;
    let loss = segmentation_ce(logits, labels, Some(&weights))?;
    let grads = tape.backward(loss);
    Ok((loss.item(), b.gradients(&grads)))
}

/// Result of segmentation pretraining.
pub struct Pretrained {
    pub params: ParamStore,
    pub optimizer: Adam,
    pub miou: f64,
    pub losses: Vec<f64>,
}

/// Trains the unconditional network on weighted `N`-class cross entropy.
/// The latent pre-processing conv never enters the graph, so it keeps its
/// initial values.
pub fn pretrain_segmentation(
    disc: &OasisC,
    mut params: ParamStore,
    train: &[LabeledImage],
    held_out: &[LabeledImage],
    settings: &PretrainSettings,
) -> Result<Pretrained> {
    let batcher = Batcher::new(train.len(), settings.batch_size, settings.seed)?;
    let mut adam = Adam::new(settings.learning_rate);
    let mut losses = Vec::with_capacity(settings.steps as usize);
    for step in 0..settings.steps {
        let idx = batcher.batch(step);
        let images: Vec<ImagePlane> = idx.iter().map(|&i| train[i].image.clone()).collect();
        let labels: Vec<LabelMap> = idx.iter().map(|&i| train[i].labels.clone()).collect();
        let (value, grads) = segmentation_step(disc, &params, &images, &labels)?;
        if !value.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        losses.push(value);
        adam.update(&mut params, &grads);
    }
    let miou = evaluate_miou(disc, &params, held_out)?;
    Ok(Pretrained {
        params,
        optimizer: adam,
        miou,
        losses,
    })
}

/// Deterministic parameters for tests and fresh runs.
pub fn init_seeded(disc: &OasisC, seed: u64) -> ParamStore {
    disc.init(&mut ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> OasisC {
        OasisC::new(OasisConfig {
            image_size: 16,
            num_classes: 4,
            latent_channels: 3,
            down_channels: vec![4, 4],
            up_channels: vec![4, 4],
            prep_width: 4,
        })
        .unwrap()
    }

    #[test]
    fn desk_shapes() {
        let d = OasisC::new(OasisConfig::desk(64, 4, 32)).unwrap();
        let p = init_seeded(&d, 0);
        let tape = Tape::new();
        let b = Binding::frozen(&tape, &p);
        let x = tape.constant(Array::full([1, 3, 64, 64], 0.5));
        let y = tape.constant(Array::full([1, 32, 8, 8], 0.1));
        let out = d.forward(&b, x, Some(y)).unwrap();
        assert_eq!(out.logits.shape(), [1, 5, 64, 64]);
        assert_eq!(out.bottleneck.shape(), [1, 64, 4, 4]);
        assert_eq!(d.prep_latent(&b, y, 64).unwrap().shape(), [1, 16, 64, 64]);
    }

    #[test]
    fn config_guards() {
        let mut c = OasisConfig::desk(64, 4, 32);
        c.prep_width = 64;
        assert!(OasisC::new(c).is_err());
        let mut c = OasisConfig::desk(32, 4, 32);
        c.image_size = 32;
        assert!(OasisC::new(c).is_err(), "2x2 bottleneck must be rejected");
        let mut c = OasisConfig::desk(64, 4, 32);
        c.up_channels.pop();
        assert!(OasisC::new(c).is_err());
    }

    #[test]
    fn zero_latent_gives_unconditional_output() {
        let d = tiny();
        let mut p = init_seeded(&d, 1);
        // A zero latent with zero prep bias makes y_prep vanish.
        p.get_mut("disc.prep.b").unwrap().data_mut().fill(0.0);
        let tape = Tape::new();
        let b = Binding::frozen(&tape, &p);
        let x = tape.constant(Array::from_fn([2, 3, 16, 16], |i| (i % 13) as f64 / 13.0));
        let y = tape.constant(Array::zeros([2, 3, 4, 4]));
        let cond = d.forward(&b, x, Some(y)).unwrap().logits.value();
        let uncond = d.forward(&b, x, None).unwrap().logits.value();
        assert_eq!(cond.data(), uncond.data());
    }

    #[test]
    fn projection_of_ones() {
        let tape = Tape::new();
        let u = tape.constant(Array::full([1, 64, 2, 2], 1.0));
        let p = project(u, u).unwrap();
        assert!(p.value().data().iter().all(|&v| v == 64.0));
        let v = tape.constant(Array::full([1, 63, 2, 2], 1.0));
        assert!(matches!(project(u, v), Err(Error::Contract(_))));
    }

    #[test]
    fn patchgan_grid_and_input_width() {
        let g = PatchGan::new(32);
        let p = g.init(&mut ChaCha8Rng::seed_from_u64(3));
        let tape = Tape::new();
        let b = Binding::frozen(&tape, &p);
        let x = tape.constant(Array::full([1, 3, 64, 64], 0.2));
        let y = tape.constant(Array::full([1, 32, 8, 8], 0.3));
        assert_eq!(g.conditioned_input(&b, x, y).unwrap().shape()[1], 15);
        let a = g.forward(&b, x, y).unwrap();
        assert_eq!(a.shape(), [1, 1, 8, 8]);
        let again = g.forward(&b, x, y).unwrap();
        assert_eq!(a.value().data(), again.value().data());
    }

    #[test]
    fn miou_of_perfect_and_disjoint_predictions() {
        let t = vec![LabelMap::new(1, 4, vec![1, 1, 2, 2])];
        assert_eq!(mean_iou(&confusion_matrix(&t, &t, 3)), 1.0);
        let p = vec![LabelMap::new(1, 4, vec![2, 2, 1, 1])];
        assert_eq!(mean_iou(&confusion_matrix(&t, &p, 3)), 0.0);
    }
}
