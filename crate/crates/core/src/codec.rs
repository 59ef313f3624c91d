//! Encoder, generators and the learned entropy model.
//!
//! Parameters live in three separate stores so stages can freeze them
//! independently: the encoder (`enc.*`), the entropy model (`hyper.*`,
//! `prior.*`) and a generator (`dec.*`). G1 and G2 share one architecture and
//! differ only in their store.

use egic_tensor::{Array, Binding, Conv2d, Norm, ParamStore, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{lrelu, ResBlock};

/// Smallest scale of any latent Gaussian.
pub const SCALE_FLOOR: f64 = 0.01;
/// Smallest probability mass used in rate estimates.
pub const LIKELIHOOD_FLOOR: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub latent_channels: usize,
    pub downsample_factor: usize,
    pub base_width: usize,
    pub hyper_width: usize,
    pub hyper_channels: usize,
    pub lambda: f64,
    pub use_hyperprior: bool,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            latent_channels: 32,
            downsample_factor: 8,
            base_width: 32,
            hyper_width: 32,
            hyper_channels: 8,
            lambda: 1.0,
            use_hyperprior: true,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        let f = self.downsample_factor;
        if f < 2 || !f.is_power_of_two() {
            return Err(Error::Config(format!(
                "downsample_factor must be a power of two >= 2, got {f}"
            )));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.latent_channels == 0 || self.base_width < 2 {
            return Err(Error::Config("latent_channels and base_width must be positive".into()));
        }
        if self.use_hyperprior && (self.hyper_width == 0 || self.hyper_channels == 0) {
            return Err(Error::Config("hyperprior widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    /// Adds i.i.d. `Uniform(-0.5, 0.5)` noise.
    Noise,
    /// Rounds half to even; no gradient.
    Round,
    /// Rounds forward, identity gradient backward.
    RoundSte,
}

pub fn quantize<'t>(v: Var<'t>, mode: QuantMode, rng: &mut impl Rng) -> Var<'t> {
    match mode {
        QuantMode::Noise => {
            let noise = Array::from_fn(v.shape(), |_| rng.random_range(-0.5..0.5));
            v + v.tape().constant(noise)
        }
        QuantMode::Round => v.tape().constant(v.value().map(f64::round_ties_even)),
        QuantMode::RoundSte => v.round_ste(),
    }
}

/// Total bits `Σ -log2 P(y_i)` of `y` under per-element discretised
/// Gaussians.
pub fn rate_bits<'t>(y: Var<'t>, mu: Var<'t>, sigma: Var<'t>) -> Var<'t> {
    Var::gaussian_likelihood(y, mu, sigma, LIKELIHOOD_FLOOR)
        .ln()
        .sum()
        .scale(-std::f64::consts::LOG2_E)
}

/// `λ · bpp + d(x, x')`, with `bits` the total over the batch.
pub fn rd_loss<'t>(
    x: Var<'t>,
    x_hat: Var<'t>,
    bits: Var<'t>,
    lambda: f64,
    distortion: impl FnOnce(Var<'t>, Var<'t>) -> Var<'t>,
) -> Var<'t> {
    let (n, _, h, w) = x.value().dims4();
    let bpp = bits.scale(1.0 / (n * h * w) as f64);
    bpp.scale(lambda) + distortion(x, x_hat)
}

/// An integer latent of one image, `[channels, height, width]` row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatentCode {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<i32>,
}

impl LatentCode {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<i32>) -> Self {
        assert_eq!(values.len(), channels * height * width, "latent length");
        Self {
            channels,
            height,
            width,
            values,
        }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::new(channels, height, width, vec![0; channels * height * width])
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Rounds sample `index` of a `[n, c, h, w]` array.
    pub fn from_array(array: &Array, index: usize) -> Self {
        let (_, c, h, w) = array.dims4();
        let item = array.batch_item(index);
        Self::new(
            c,
            h,
            w,
            item.data().iter().map(|v| v.round_ties_even() as i32).collect(),
        )
    }

    /// `[1, c, h, w]` array.
    pub fn to_array(&self) -> Array {
        Array::new(
            [1, self.channels, self.height, self.width],
            self.values.iter().map(|&v| f64::from(v)).collect(),
        )
    }

    pub fn digest(&self) -> u64 {
        let mut bytes = Vec::with_capacity(12 + 4 * self.values.len());
        for d in [self.channels, self.height, self.width] {
            bytes.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        crate::digest::bytes(&bytes)
    }
}

/// Per-element Gaussian parameters of a latent, in the latent's layout.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianField {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// A generator output before clamping, plus its penultimate features.
pub struct Synthesis<'t> {
    pub image: Var<'t>,
    pub features: Var<'t>,
}

/// Everything a training step needs from one codec pass.
pub struct TrainForward<'t> {
    pub y: Var<'t>,
    /// Straight-through rounded latent fed to the generator.
    pub y_hat: Var<'t>,
    pub x_hat: Var<'t>,
    pub features: Var<'t>,
    /// Total bits over the batch, estimated on noisy latents.
    pub bits: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct Codec {
    cfg: CodecConfig,
    enc_down: Vec<Conv2d>,
    enc_res: ResBlock,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_res: ResBlock,
    dec_up: Vec<Conv2d>,
    dec_out: Conv2d,
    hyper_a: [Conv2d; 2],
    hyper_s: [Conv2d; 2],
}

impl Codec {
    pub fn new(cfg: CodecConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.base_width;
        let stages = cfg.downsample_factor.trailing_zeros() as usize;
        let enc_down = (0..stages)
            .map(|i| {
                let cin = if i == 0 { 3 } else { w };
                Conv2d::new(format!("enc.down{i}"), cin, w, 5).stride(2)
            })
            .collect();
        let dec_up = (0..stages)
            .map(|i| {
                let cout = if i + 1 == stages { w / 2 } else { w };
                Conv2d::new(format!("dec.up{i}"), w, cout, 3)
            })
            .collect();
        let (cy, hw, cz) = (cfg.latent_channels, cfg.hyper_width, cfg.hyper_channels);
        Ok(Self {
            enc_down,
            enc_res: ResBlock::new("enc.res", w, w, Norm::None),
            enc_out: Conv2d::new("enc.out", w, cy, 3),
            dec_in: Conv2d::new("dec.in", cy, w, 3),
            dec_res: ResBlock::new("dec.res", w, w, Norm::None),
            dec_up,
            dec_out: Conv2d::new("dec.out", w / 2, 3, 3),
            hyper_a: [
                Conv2d::new("hyper.a0", cy, hw, 3),
                Conv2d::new("hyper.a1", hw, cz, 3).stride(2),
            ],
            hyper_s: [
                Conv2d::new("hyper.s0", cz, hw, 3),
                Conv2d::new("hyper.s1", hw, 2 * cy, 3),
            ],
            cfg,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    /// Images are padded to multiples of this before analysis. With the
    /// hyperprior the latent itself is halved once more.
    pub fn pad_factor(&self) -> usize {
        self.cfg.downsample_factor * if self.cfg.use_hyperprior { 2 } else { 1 }
    }

    pub fn latent_dims(&self, height: usize, width: usize) -> (usize, usize, usize) {
        let f = self.cfg.downsample_factor;
        (self.cfg.latent_channels, height / f, width / f)
    }

    /// Hyper-latent dimensions, or zeros without a hyperprior.
    pub fn hyper_dims(&self, height: usize, width: usize) -> (usize, usize, usize) {
        if !self.cfg.use_hyperprior {
            return (0, 0, 0);
        }
        let f = 2 * self.cfg.downsample_factor;
        (self.cfg.hyper_channels, height / f, width / f)
    }

    /// Channel count of the generator's penultimate feature field.
    pub fn feature_channels(&self) -> usize {
        self.cfg.base_width / 2
    }

    /// The generator's final convolution (features to RGB).
    pub fn output_conv(&self) -> &Conv2d {
        &self.dec_out
    }

    pub fn init_encoder(&self, rng: &mut impl Rng) -> ParamStore {
        let mut s = ParamStore::new();
        for c in &self.enc_down {
            c.init(&mut s, rng);
        }
        self.enc_res.init(&mut s, rng);
        self.enc_out.init(&mut s, rng);
        s
    }

    pub fn init_generator(&self, rng: &mut impl Rng) -> ParamStore {
        let mut s = ParamStore::new();
        self.dec_in.init(&mut s, rng);
        self.dec_res.init(&mut s, rng);
        for c in &self.dec_up {
            c.init(&mut s, rng);
        }
        self.dec_out.init(&mut s, rng);
        s
    }

    pub fn init_entropy(&self, rng: &mut impl Rng) -> ParamStore {
        let mut s = ParamStore::new();
        // Raw scale 0.5413 gives softplus(raw) = 1.
        let unit = 0.541_324_854_612_918_1;
        if self.cfg.use_hyperprior {
            for c in self.hyper_a.iter().chain(&self.hyper_s) {
                c.init(&mut s, rng);
            }
            let cz = self.cfg.hyper_channels;
            s.insert("prior.z.mu", Array::zeros([cz]));
            s.insert("prior.z.scale", Array::full([cz], unit));
        } else {
            let cy = self.cfg.latent_channels;
            s.insert("prior.y.mu", Array::zeros([cy]));
            s.insert("prior.y.scale", Array::full([cy], unit));
        }
        s
    }

    fn check_image(&self, x: &Array) -> Result<()> {
        let (_, c, h, w) = x.dims4();
        let f = self.pad_factor();
        if c != 3 {
            return Err(Error::Contract(format!("expected 3 image channels, got {c}")));
        }
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::Contract(format!(
                "image {h}x{w} is not padded to a multiple of {f}"
            )));
        }
        Ok(())
    }

    /// Continuous latent `[n, C_y, H/f, W/f]`.
    pub fn analyze<'t>(&self, enc: &Binding<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        self.check_image(&x.value())?;
        let mut h = x;
        for c in &self.enc_down {
            h = lrelu(c.forward(enc, h));
        }
        let h = self.enc_res.forward(enc, h);
        Ok(self.enc_out.forward(enc, h))
    }

    /// Unclamped reconstruction and penultimate features.
    pub fn synthesize<'t>(&self, gen: &Binding<'t, '_>, y: Var<'t>) -> Result<Synthesis<'t>> {
        let (_, c, _, _) = y.value().dims4();
        if c != self.cfg.latent_channels {
            return Err(Error::Contract(format!(
                "latent has {c} channels, codec expects {}",
                self.cfg.latent_channels
            )));
        }
        let mut h = lrelu(self.dec_in.forward(gen, y));
        h = self.dec_res.forward(gen, h);
        for c in &self.dec_up {
            h = lrelu(c.forward(gen, h.upsample_nearest(2)));
        }
        Ok(Synthesis {
            image: self.dec_out.forward(gen, h),
            features: h,
        })
    }

    pub fn hyper_analyze<'t>(&self, ent: &Binding<'t, '_>, y: Var<'t>) -> Var<'t> {
        let h = lrelu(self.hyper_a[0].forward(ent, y));
        self.hyper_a[1].forward(ent, h)
    }

    /// Conditional mean and scale of `y` given a quantised hyper-latent.
    pub fn hyper_synthesize<'t>(&self, ent: &Binding<'t, '_>, z_hat: Var<'t>) -> (Var<'t>, Var<'t>) {
        let h = lrelu(self.hyper_s[0].forward(ent, z_hat.upsample_nearest(2)));
        let out = self.hyper_s[1].forward(ent, h);
        let cy = self.cfg.latent_channels;
        let mu = out.slice_channels(0, cy);
        let sigma = out.slice_channels(cy, cy).softplus().clamp_min(SCALE_FLOOR);
        (mu, sigma)
    }

    /// Per-channel factorised prior (`which` is `"z"` or `"y"`), broadcast to
    /// `[n, c, h, w]`.
    pub fn factorized<'t>(
        &self,
        ent: &Binding<'t, '_>,
        which: &str,
        n: usize,
        h: usize,
        w: usize,
    ) -> (Var<'t>, Var<'t>) {
        let mu = ent.param(&format!("prior.{which}.mu")).expand_channels(n, h, w);
        let sigma = ent
            .param(&format!("prior.{which}.scale"))
            .softplus()
            .clamp_min(SCALE_FLOOR)
            .expand_channels(n, h, w);
        (mu, sigma)
    }

    /// Training pass: rate on noisy latents, generator on straight-through
    /// rounded latents.
    pub fn forward_train<'t>(
        &self,
        enc: &Binding<'t, '_>,
        ent: &Binding<'t, '_>,
        gen: &Binding<'t, '_>,
        x: Var<'t>,
        rng: &mut impl Rng,
    ) -> Result<TrainForward<'t>> {
        let y = self.analyze(enc, x)?;
        let y_noisy = quantize(y, QuantMode::Noise, rng);
        let y_hat = quantize(y, QuantMode::RoundSte, rng);
        let bits = self.latent_bits(ent, y, y_noisy, QuantMode::Noise, rng);
        let syn = self.synthesize(gen, y_hat)?;
        Ok(TrainForward {
            y,
            y_hat,
            x_hat: syn.image,
            features: syn.features,
            bits,
        })
    }

    /// Bits of a quantised latent `y_q` (noisy or rounded); `y` is the
    /// continuous latent the hyper-analysis sees.
    pub fn latent_bits<'t>(
        &self,
        ent: &Binding<'t, '_>,
        y: Var<'t>,
        y_q: Var<'t>,
        mode: QuantMode,
        rng: &mut impl Rng,
    ) -> Var<'t> {
        let (n, _, h, w) = y.value().dims4();
        if self.cfg.use_hyperprior {
            let z = self.hyper_analyze(ent, y);
            let z_q = quantize(z, mode, rng);
            let z_hat = match mode {
                QuantMode::Noise | QuantMode::RoundSte => z.round_ste(),
                QuantMode::Round => z_q,
            };
            let (mu, sigma) = self.hyper_synthesize(ent, z_hat);
            let (_, _, zh, zw) = z.value().dims4();
            let (zmu, zsigma) = self.factorized(ent, "z", n, zh, zw);
            rate_bits(y_q, mu, sigma) + rate_bits(z_q, zmu, zsigma)
        } else {
            let (mu, sigma) = self.factorized(ent, "y", n, h, w);
            rate_bits(y_q, mu, sigma)
        }
    }

    /// Deterministic encoder side of compression for one padded image:
    /// rounded latent and hyper-latent.
    pub fn encode_latents(
        &self,
        enc: &ParamStore,
        ent: &ParamStore,
        x: &Array,
    ) -> Result<(LatentCode, Option<LatentCode>)> {
        let tape = Tape::new();
        let eb = Binding::frozen(&tape, enc);
        let y = self.analyze(&eb, tape.constant(x.clone()))?;
        let y_code = LatentCode::from_array(&y.value(), 0);
        let z_code = if self.cfg.use_hyperprior {
            let pb = Binding::frozen(&tape, ent);
            let z = self.hyper_analyze(&pb, y);
            Some(LatentCode::from_array(&z.value(), 0))
        } else {
            None
        };
        Ok((y_code, z_code))
    }

    /// Distribution of the hyper-latent (`[c, h, w]`) under its factorised prior.
    pub fn hyper_distribution(&self, ent: &ParamStore, dims: (usize, usize, usize)) -> GaussianField {
        let tape = Tape::new();
        let pb = Binding::frozen(&tape, ent);
        let (_, h, w) = dims;
        let (mu, sigma) = self.factorized(&pb, "z", 1, h, w);
        GaussianField {
            mu: mu.value().data().to_vec(),
            sigma: sigma.value().data().to_vec(),
        }
    }

    /// Distribution of `y` given the decoded hyper-latent (or the factorised
    /// fallback when there is none).
    pub fn latent_distribution(
        &self,
        ent: &ParamStore,
        z: Option<&LatentCode>,
        dims: (usize, usize, usize),
    ) -> Result<GaussianField> {
        let tape = Tape::new();
        let pb = Binding::frozen(&tape, ent);
        let (c, h, w) = dims;
        let (mu, sigma) = match (self.cfg.use_hyperprior, z) {
            (true, Some(z)) => {
                if (z.height * 2, z.width * 2) != (h, w) {
                    return Err(Error::Contract("hyper-latent does not match latent size".into()));
                }
                self.hyper_synthesize(&pb, tape.constant(z.to_array()))
            }
            (false, None) => self.factorized(&pb, "y", 1, h, w),
            _ => {
                return Err(Error::Contract(
                    "hyper-latent presence does not match the codec configuration".into(),
                ))
            }
        };
        if mu.value().shape() != [1, c, h, w] {
            return Err(Error::Contract("latent dims do not match the codec".into()));
        }
        Ok(GaussianField {
            mu: mu.value().data().to_vec(),
            sigma: sigma.value().data().to_vec(),
        })
    }

    /// Clamped reconstruction of a rounded latent.
    pub fn decode_image(&self, gen: &ParamStore, y: &LatentCode) -> Result<(Array, Array)> {
        let tape = Tape::new();
        let gb = Binding::frozen(&tape, gen);
        let syn = self.synthesize(&gb, tape.constant(y.to_array()))?;
        let image = syn.image.value().map(|v| v.clamp(0.0, 1.0));
        Ok((image, (*syn.features.value()).clone()))
    }
}
