//! Training objectives.
//!
//! Every loss is mean-reduced over batch and pixels, so weights such as `λ`
//! and `β` keep their meaning across image sizes.

use std::f64::consts::TAU;

use egic_tensor::{Array, Binding, Conv2d, ParamStore, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::LabelMap;
use crate::layers::lrelu;
use crate::segments::connected_components;

/// Segments smaller than this many pixels get the small-instance weight.
pub const SMALL_AREA: usize = 64 * 64;
pub const SMALL_WEIGHT: f64 = 3.0;
/// Multiplier of the LabelMix term in the discriminator objective.
pub const LABELMIX_COEFFICIENT: f64 = 10.0;

/// Scalar weights of every training objective.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Rate weight, per bit per pixel.
    pub lambda: f64,
    pub k_m: f64,
    pub k_p: f64,
    pub beta: f64,
    pub labelmix: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            k_m: 150.0,
            k_p: 1.0,
            beta: 0.30,
            labelmix: LABELMIX_COEFFICIENT,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda", self.lambda),
            ("k_m", self.k_m),
            ("k_p", self.k_p),
            ("beta", self.beta),
            ("labelmix", self.labelmix),
        ];
        for (name, v) in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

pub fn mse<'t>(x: Var<'t>, x_hat: Var<'t>) -> Var<'t> {
    (x - x_hat).square().mean()
}

/// A frozen feature-space distance standing in for a learned perceptual
/// metric.
pub trait Perceptual {
    fn distance<'t>(&self, x: Var<'t>, x_hat: Var<'t>) -> Var<'t>;
}

/// Three random convolutions (fixed seed, never trained); the distance is
/// the sum over layers of the mean squared feature difference.
#[derive(Clone, Debug)]
pub struct RandomConvFeatures {
    convs: Vec<Conv2d>,
    params: ParamStore,
}

impl RandomConvFeatures {
    pub const SEED: u64 = 0x5eed_fea7;

    pub fn new() -> Self {
        let convs = vec![
            Conv2d::new("feat0", 3, 16, 3),
            Conv2d::new("feat1", 16, 16, 3).stride(2),
            Conv2d::new("feat2", 16, 16, 3).stride(2),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(Self::SEED);
        let mut params = ParamStore::new();
        for c in &convs {
            c.init(&mut params, &mut rng);
        }
        Self { convs, params }
    }
}

impl Default for RandomConvFeatures {
    fn default() -> Self {
        Self::new()
    }
}

impl Perceptual for RandomConvFeatures {
    fn distance<'t>(&self, x: Var<'t>, x_hat: Var<'t>) -> Var<'t> {
        let bind = Binding::frozen(x.tape(), &self.params);
        let (mut a, mut b) = (x, x_hat);
        let mut total = None;
        for c in &self.convs {
            a = lrelu(c.forward(&bind, a));
            b = lrelu(c.forward(&bind, b));
            let d = mse(a, b);
            total = Some(match total {
                None => d,
                Some(t) => t + d,
            });
        }
        total.expect("at least one layer")
    }
}

/// `k_M · MSE + k_P · perceptual`; the perceptual term is skipped when
/// `k_P` is zero.
pub fn distortion<'t>(
    x: Var<'t>,
    x_hat: Var<'t>,
    k_m: f64,
    k_p: f64,
    perceptual: &dyn Perceptual,
) -> Var<'t> {
    let d = mse(x, x_hat).scale(k_m);
    if k_p == 0.0 {
        return d;
    }
    d + perceptual.distance(x, x_hat).scale(k_p)
}

/// Weight 3 on pixels of connected same-class segments smaller than
/// 64×64 pixels, 1 elsewhere. Shape `[1, 1, h, w]`.
pub fn pixel_weights(labels: &LabelMap) -> Array {
    let seg = connected_components(labels);
    let (h, w) = labels.size();
    Array::new(
        [1, 1, h, w],
        seg.ids
            .iter()
            .map(|&id| if seg.areas[id] < SMALL_AREA { SMALL_WEIGHT } else { 1.0 })
            .collect(),
    )
}

pub fn batch_pixel_weights(labels: &[LabelMap]) -> Array {
    Array::stack_batch(&labels.iter().map(pixel_weights).collect::<Vec<_>>())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CeTarget {
    /// The true semantic class of each pixel, weighted.
    RealClasses,
    /// The extra fake class, unweighted.
    FakeClass,
}

/// Mean per-pixel cross entropy of `[n, N+1, h, w]` logits.
pub fn weighted_ce<'t>(
    logits: Var<'t>,
    labels: &[LabelMap],
    weights: Option<&Array>,
    target: CeTarget,
) -> Result<Var<'t>> {
    let (n, classes, h, w) = logits.value().dims4();
    let num_real = classes - 1;
    if labels.len() != n || labels.iter().any(|l| l.size() != (h, w)) {
        return Err(Error::Contract("labels do not match the logit field".into()));
    }
    let index: Vec<usize> = match target {
        CeTarget::RealClasses => {
            for l in labels {
                l.validate(num_real)?;
            }
            LabelMap::batch_indices(labels)
        }
        CeTarget::FakeClass => vec![num_real; n * h * w],
    };
    let nll = -logits.log_softmax_channels().gather_channels(&index);
    let nll = match (target, weights) {
        (CeTarget::RealClasses, Some(wts)) => {
            if wts.shape() != [n, 1, h, w] {
                return Err(Error::Contract("pixel weights do not match the logit field".into()));
            }
            nll * logits.tape().constant(wts.clone())
        }
        _ => nll,
    };
    Ok(nll.mean())
}

/// Weighted `N`-class cross entropy on the real-class channels of
/// `[n, N+1, h, w]` logits, ignoring the fake channel entirely. Used to
/// pretrain the discriminator as a plain segmenter.
pub fn segmentation_ce<'t>(logits: Var<'t>, labels: &[LabelMap], weights: Option<&Array>) -> Result<Var<'t>> {
    let (n, classes, h, w) = logits.value().dims4();
    if classes < 3 {
        return Err(Error::Contract("segmentation logits need N + 1 >= 3 channels".into()));
    }
    let real = logits.slice_channels(0, classes - 1);
    if labels.len() != n || labels.iter().any(|l| l.size() != (h, w)) {
        return Err(Error::Contract("labels do not match the logit field".into()));
    }
    for l in labels {
        l.validate(classes - 1)?;
    }
    let nll = -real.log_softmax_channels().gather_channels(&LabelMap::batch_indices(labels));
    let nll = match weights {
        Some(wts) => {
            if wts.shape() != [n, 1, h, w] {
                return Err(Error::Contract("pixel weights do not match the logit field".into()));
            }
            nll * logits.tape().constant(wts.clone())
        }
        None => nll,
    };
    Ok(nll.mean())
}

/// `β · L_wce(x')` against the true classes: the generator is rewarded when
/// the discriminator sees real semantics in its output.
pub fn generator_adv_oasis<'t>(
    logits_fake: Var<'t>,
    labels: &[LabelMap],
    weights: Option<&Array>,
    beta: f64,
) -> Result<Var<'t>> {
    Ok(weighted_ce(logits_fake, labels, weights, CeTarget::RealClasses)?.scale(beta))
}

/// Weighted CE of reals against their classes plus CE of fakes against the
/// fake class.
pub fn discriminator_loss_oasis<'t>(
    logits_real: Var<'t>,
    logits_fake: Var<'t>,
    labels: &[LabelMap],
    weights: Option<&Array>,
) -> Result<Var<'t>> {
    let real = weighted_ce(logits_real, labels, weights, CeTarget::RealClasses)?;
    let fake = weighted_ce(logits_fake, labels, None, CeTarget::FakeClass)?;
    Ok(real + fake)
}

/// Fair coin per connected same-class segment, in segment order.
/// Shape `[1, 1, h, w]` with values in {0, 1}.
pub fn labelmix_mask(labels: &LabelMap, seed: u64) -> Array {
    let seg = connected_components(labels);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coins: Vec<f64> = (0..seg.count())
        .map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
        .collect();
    let (h, w) = labels.size();
    Array::new([1, 1, h, w], seg.ids.iter().map(|&id| coins[id]).collect())
}

/// `M ⊙ a + (1 − M) ⊙ b` with a `[n, 1, h, w]` mask broadcast over channels.
pub fn labelmix<'t>(a: Var<'t>, b: Var<'t>, mask: &Array) -> Var<'t> {
    let tape = a.tape();
    let m = tape.constant(mask.clone());
    let inv = tape.constant(mask.map(|v| 1.0 - v));
    a.mul_channel_broadcast(m) + b.mul_channel_broadcast(inv)
}

/// Mean squared difference between the logits of the mixed image and the
/// mix of the logits. Not yet multiplied by [`LABELMIX_COEFFICIENT`].
pub fn labelmix_consistency<'t>(
    d_logits: impl Fn(Var<'t>) -> Var<'t>,
    x: Var<'t>,
    x_fake: Var<'t>,
    mask: &Array,
) -> Var<'t> {
    let mixed = d_logits(labelmix(x, x_fake, mask));
    labelmix_consistency_logits(mixed, d_logits(x), d_logits(x_fake), mask)
}

/// [`labelmix_consistency`] from precomputed logits, so a training step can
/// share the real and fake passes with the cross-entropy terms.
pub fn labelmix_consistency_logits<'t>(
    logits_mixed: Var<'t>,
    logits_real: Var<'t>,
    logits_fake: Var<'t>,
    mask: &Array,
) -> Var<'t> {
    (logits_mixed - labelmix(logits_real, logits_fake, mask)).square().mean()
}

/// Non-saturating GAN terms from patch logits (sigmoid applied inside, in
/// the numerically stable softplus form).
pub struct NonSaturating<'t> {
    /// `β · E[−log D(x')]`.
    pub generator: Var<'t>,
    /// `E[−log(1 − D(x'))]`.
    pub disc_fake: Var<'t>,
    /// `E[−log D(x)]`.
    pub disc_real: Var<'t>,
}

impl<'t> NonSaturating<'t> {
    pub fn discriminator(&self) -> Var<'t> {
        self.disc_fake + self.disc_real
    }
}

pub fn nonsaturating_pair<'t>(
    logits_real: Var<'t>,
    logits_fake: Var<'t>,
    beta: f64,
) -> NonSaturating<'t> {
    NonSaturating {
        generator: (-logits_fake).softplus().mean().scale(beta),
        disc_fake: logits_fake.softplus().mean(),
        disc_real: (-logits_real).softplus().mean(),
    }
}

/// Orthonormal DFT basis of length `n`: `(cos, sin)` matrices with entries
/// `cos(2πuk/n)/√n` and `sin(2πuk/n)/√n`.
fn dft_basis(n: usize) -> (Array, Array) {
    let s = 1.0 / (n as f64).sqrt();
    let angle = |u: usize, k: usize| TAU * ((u * k) % n) as f64 / n as f64;
    (
        Array::from_fn([n, n], |i| angle(i / n, i % n).cos() * s),
        Array::from_fn([n, n], |i| angle(i / n, i % n).sin() * s),
    )
}

/// Real and imaginary parts of the orthonormal 2-D DFT of every plane.
pub fn dft2<'t>(x: Var<'t>) -> (Var<'t>, Var<'t>) {
    let shape = x.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let (ch, sh) = dft_basis(h);
    let (cw, sw) = dft_basis(w);
    // e^{-iθ₁}e^{-iθ₂} = (c₁c₂ − s₁s₂) − i(s₁c₂ + c₁s₂); basis matrices are
    // symmetric, so they serve as their own transposes.
    let re = x.planar_transform(&ch, &cw) - x.planar_transform(&sh, &sw);
    let im = -(x.planar_transform(&sh, &cw) + x.planar_transform(&ch, &sw));
    (re, im)
}

/// Spectrum weights `|F_x − F_x'|`, normalised to a maximum of 1 in every
/// plane. Treated as constants by the loss.
pub fn focal_frequency_weights(x: &Array, x_hat: &Array) -> Array {
    let tape = egic_tensor::Tape::new();
    let diff = tape.constant(x.clone()) - tape.constant(x_hat.clone());
    let (re, im) = dft2(diff);
    let mag = (re.square() + im.square()).value().map(f64::sqrt);
    let shape = mag.shape().to_vec();
    let plane = shape[shape.len() - 2] * shape[shape.len() - 1];
    let mut data = mag.into_data();
    for chunk in data.chunks_mut(plane) {
        let max = chunk.iter().copied().fold(0.0, f64::max);
        for v in chunk.iter_mut() {
            *v = if max > 0.0 { *v / max } else { 0.0 };
        }
    }
    Array::new(shape, data)
}

/// Mean over frequencies of `w · |F_x − F_x'|²` for given weights.
pub fn focal_frequency_loss_weighted<'t>(x: Var<'t>, x_hat: Var<'t>, weights: &Array) -> Var<'t> {
    let (re, im) = dft2(x - x_hat);
    let power = re.square() + im.square();
    (power * x.tape().constant(weights.clone())).mean()
}

/// Focal frequency loss with focal exponent 1.
pub fn focal_frequency_loss<'t>(x: Var<'t>, x_hat: Var<'t>) -> Var<'t> {
    let weights = focal_frequency_weights(&x.value(), &x_hat.value());
    focal_frequency_loss_weighted(x, x_hat, &weights)
}

/// MSE between the image and the α = 0 output.
pub fn orp_loss<'t>(x: Var<'t>, x_alpha0: Var<'t>) -> Var<'t> {
    mse(x, x_alpha0)
}
