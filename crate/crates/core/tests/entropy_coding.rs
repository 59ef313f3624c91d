mod common;

use common::rng;
use egic::codec::{Codec, CodecConfig, GaussianField};
use egic::entropy_coding::*;
use egic::image::ImagePlane;
use egic::model::Model;
use egic::Error;
use proptest::prelude::*;
use rand::Rng;

/// Bin mass of `v` under N(μ, σ²) by composite Simpson integration of the
/// density.
fn bin_mass_oracle(v: f64, mu: f64, sigma: f64) -> f64 {
    let n = 2000;
    let (a, b) = (v - 0.5, v + 0.5);
    let h = (b - a) / n as f64;
    let pdf = |x: f64| (-0.5 * ((x - mu) / sigma).powi(2)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    let mut s = pdf(a) + pdf(b);
    for i in 1..n {
        s += pdf(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

#[test]
fn estimated_bits_match_integrated_density() {
    let mut r = rng(1);
    for _ in 0..200 {
        let mu: f64 = r.random_range(-5.0..5.0);
        let sigma: f64 = r.random_range(0.2..8.0);
        let v = (mu + r.random_range(-2.0..2.0) * sigma).round() as i32;
        let field = GaussianField { mu: vec![mu], sigma: vec![sigma] };
        let want = -bin_mass_oracle(f64::from(v), mu, sigma).log2();
        let got = estimate_bits(&[v], &field);
        assert!((got - want).abs() < 1e-6 * want.max(1.0), "{got} vs {want}");
    }
}

fn model() -> Model {
    let codec = Codec::new(CodecConfig {
        latent_channels: 4,
        base_width: 8,
        hyper_width: 8,
        hyper_channels: 2,
        ..CodecConfig::default()
    })
    .unwrap();
    let mut r = rng(2);
    Model {
        encoder: codec.init_encoder(&mut r),
        entropy: codec.init_entropy(&mut r),
        generator: codec.init_generator(&mut r),
        orp: None,
        codec,
    }
}

#[test]
fn streams_refuse_a_different_model() {
    let a = model();
    let mut b = model();
    let name = b.entropy.iter().next().unwrap().0.clone();
    b.entropy.get_mut(&name).unwrap().data_mut()[0] += 1.0;
    let img = ImagePlane::filled(16, 16, 0.3);
    let stream = a.compress(&img).unwrap();
    assert!(matches!(b.decode_latent(&stream), Err(Error::IncompatibleModel { .. })));
    assert!(a.decode_latent(&stream).is_ok());
}

#[test]
fn image_stream_round_trips_its_latent() {
    let m = model();
    let mut r = rng(3);
    let img = ImagePlane::new(24, 40, (0..3 * 24 * 40).map(|_| r.random()).collect());
    let (padded, _) = egic::data::pad_to_factor(&img, m.codec.pad_factor());
    let (y, z) = m.codec.encode_latents(&m.encoder, &m.entropy, &padded.to_array()).unwrap();
    let stream = m.compress(&img).unwrap();
    let back = Bitstream::from_bytes(&stream.to_bytes()).unwrap();
    let (y2, z2) = decode_stream(&back, &m.entropy_model()).unwrap();
    assert_eq!(y2, y);
    assert_eq!(z2, z);
    assert_eq!((back.header.width, back.header.height), (40, 24));
    assert_eq!(stream.total_bytes(), stream.to_bytes().len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn symbols_round_trip_within_the_rate_bound(
        cells in prop::collection::vec((-50.0f64..50.0, 0.02f64..40.0, -4.0f64..4.0), 0..200),
    ) {
        let field = GaussianField {
            mu: cells.iter().map(|c| c.0).collect(),
            sigma: cells.iter().map(|c| c.1).collect(),
        };
        let values: Vec<i32> = cells.iter().map(|(m, s, z)| (m + s * z).round() as i32).collect();
        let payload = encode_symbols(&values, &field).unwrap();
        prop_assert_eq!(decode_symbols(&payload, &field).unwrap(), values.clone());
        let bits = estimate_bits(&values, &field);
        prop_assert!(8.0 * payload.len() as f64 <= bits * 1.02 + 32.0);
    }

    #[test]
    fn extreme_values_escape_and_survive(values in prop::collection::vec(-1_000_000i32..1_000_000, 1..40)) {
        let field = GaussianField { mu: vec![0.0; values.len()], sigma: vec![1.0; values.len()] };
        let payload = encode_symbols(&values, &field).unwrap();
        prop_assert_eq!(decode_symbols(&payload, &field).unwrap(), values);
    }

    #[test]
    fn damaged_files_fail_cleanly(flip in 0usize..64, bit in 0u8..8, cut in 0usize..64) {
        let b = Bitstream {
            header: Header {
                version: VERSION,
                digest: 42,
                width: 16,
                height: 16,
                latent: (2, 2, 4),
                hyper: (1, 1, 2),
            },
            payload: (0..20).collect(),
        };
        let mut bytes = b.to_bytes();
        let i = flip % bytes.len();
        bytes[i] ^= 1 << bit;
        prop_assert!(Bitstream::from_bytes(&bytes).is_err());
        let bytes = b.to_bytes();
        prop_assert!(Bitstream::from_bytes(&bytes[..cut.min(bytes.len() - 1)]).is_err());
    }
}
