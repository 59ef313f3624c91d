//! A trained codec bundled for inference: compression, decompression at any
//! α, and checkpoint I/O.

use std::path::Path;

use egic_tensor::{Array, Binding, ParamStore, Tape};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::codec::{Codec, CodecConfig, LatentCode};
use crate::data::{crop_to_size, pad_to_factor};
use crate::entropy_coding::{decode_stream, encode_stream, Bitstream, CodecEntropy};
use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::realism::{orp_output, OrpConfig, OrpHead};

/// Checkpoint section tags.
pub mod tags {
    pub const CODEC: &str = "codec";
    pub const ENCODER: &str = "encoder";
    pub const ENTROPY: &str = "entropy";
    pub const GENERATOR: &str = "generator";
    /// The stage-one generator, kept for interpolation baselines.
    pub const GENERATOR_MSE: &str = "generator_mse";
    pub const ORP: &str = "orp";
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CodecMeta {
    config: CodecConfig,
}

pub struct Model {
    pub codec: Codec,
    pub encoder: ParamStore,
    pub entropy: ParamStore,
    pub generator: ParamStore,
    pub orp: Option<(OrpHead, ParamStore)>,
}

impl Model {
    pub fn entropy_model(&self) -> CodecEntropy<'_> {
        CodecEntropy {
            codec: &self.codec,
            params: &self.entropy,
        }
    }

    /// Pads, encodes and entropy-codes one image.
    pub fn compress(&self, image: &ImagePlane) -> Result<Bitstream> {
        let (h, w) = image.size();
        let (padded, _) = pad_to_factor(image, self.codec.pad_factor());
        let (y, z) = self.codec.encode_latents(&self.encoder, &self.entropy, &padded.to_array())?;
        encode_stream(w, h, &y, z.as_ref(), &self.entropy_model())
    }

    pub fn decode_latent(&self, stream: &Bitstream) -> Result<LatentCode> {
        Ok(decode_stream(stream, &self.entropy_model())?.0)
    }

    /// Unclamped generator output and its penultimate features.
    pub fn synthesize(&self, y: &LatentCode) -> Result<(Array, Array)> {
        let tape = Tape::new();
        let gb = Binding::frozen(&tape, &self.generator);
        let syn = self.codec.synthesize(&gb, tape.constant(y.to_array()))?;
        Ok(((*syn.image.value()).clone(), (*syn.features.value()).clone()))
    }

    /// Applies α, clamps to `[0, 1]` and crops the padding away.
    pub fn finish(&self, g2: &Array, features: &Array, alpha: f64, size: (usize, usize)) -> Result<ImagePlane> {
        let out = match &self.orp {
            Some((head, params)) => orp_output(g2, features, head, params, alpha)?,
            None if alpha == 1.0 => g2.clone(),
            None => {
                return Err(Error::MissingPrerequisite(format!(
                    "alpha {alpha} needs a trained ORP head"
                )))
            }
        };
        crop_to_size(&ImagePlane::from_array(&out, 0).clamped(), size)
    }

    pub fn decompress(&self, stream: &Bitstream, alpha: f64) -> Result<ImagePlane> {
        let y = self.decode_latent(stream)?;
        let (g2, features) = self.synthesize(&y)?;
        let size = (usize::from(stream.header.height), usize::from(stream.header.width));
        self.finish(&g2, &features, alpha, size)
    }

    pub fn write_into(&self, ck: &mut Checkpoint) -> Result<()> {
        ck.insert(
            tags::CODEC,
            &CodecMeta {
                config: self.codec.config().clone(),
            },
            ParamStore::new(),
        )?;
        ck.insert(tags::ENCODER, &(), self.encoder.clone())?;
        ck.insert(tags::ENTROPY, &(), self.entropy.clone())?;
        ck.insert(tags::GENERATOR, &(), self.generator.clone())?;
        if let Some((head, params)) = &self.orp {
            ck.insert(tags::ORP, &head.config(), params.clone())?;
        }
        Ok(())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: CodecMeta = ck.meta(tags::CODEC)?;
        let codec = Codec::new(meta.config)?;
        let orp = if ck.contains(tags::ORP) {
            let cfg: OrpConfig = ck.meta(tags::ORP)?;
            Some((OrpHead::new(&codec, cfg)?, ck.params(tags::ORP)?.clone()))
        } else {
            None
        };
        Ok(Self {
            encoder: ck.params(tags::ENCODER)?.clone(),
            entropy: ck.params(tags::ENTROPY)?.clone(),
            generator: ck.params(tags::GENERATOR)?.clone(),
            codec,
            orp,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
