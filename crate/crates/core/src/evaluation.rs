//! Distortion and perception metrics, spectra and report emission.
//!
//! The perception score is a Fréchet distance between Gaussian fits of patch
//! features. The default feature map is the pooled bottleneck of the
//! segmentation-pretrained discriminator, so scores compare runs within this
//! repository only.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use egic_tensor::ParamStore;
use image::GrayImage;
use nalgebra::{DMatrix, DVector, Dyn, SymmetricEigen};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::discriminator::OasisC;
use crate::error::{Error, IoContext, Result};
use crate::image::ImagePlane;

/// Returned for identical images instead of infinity.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Patch edge used for the patched Fréchet score on 64-px images.
pub const DEFAULT_PATCH: usize = 32;

pub fn psnr(x: &ImagePlane, x_hat: &ImagePlane) -> Result<f64> {
    if x.size() != x_hat.size() {
        return Err(Error::Contract(format!(
            "PSNR of {:?} against {:?}",
            x.size(),
            x_hat.size()
        )));
    }
    let n = x.data().len() as f64;
    let mse = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    Ok(if mse == 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    })
}

/// Mean and unbiased covariance of a feature sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl FeatureStats {
    /// Two-pass estimate over rows of equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::InsufficientSamples {
                needed: 2,
                got: rows.len(),
            });
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Contract("feature rows differ in length".into()));
        }
        let n = rows.len();
        let mut mean = DVector::zeros(d);
        for r in rows {
            mean += DVector::from_column_slice(r);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for r in rows {
            let c = DVector::from_column_slice(r) - &mean;
            cov.ger(1.0, &c, &c, 1.0);
        }
        cov /= (n - 1) as f64;
        // Symmetrise away rounding in the rank-one updates.
        let cov = (&cov + cov.transpose()) * 0.5;
        Ok(Self { mean, cov, count: n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sweep cap for symmetric eigendecompositions; nalgebra's default never
/// gives up.
const EIGEN_MAX_ITER: usize = 100_000;

fn symmetric_eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("covariance has non-finite entries".into()));
    }
    SymmetricEigen::try_new(m, f64::EPSILON, EIGEN_MAX_ITER)
        .ok_or_else(|| Error::Contract("eigendecomposition did not converge".into()))
}

/// Square root of a symmetric PSD matrix, clipping negative eigenvalues.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = symmetric_eigen(m.clone())?;
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `‖μa − μb‖² + tr(Σa + Σb − 2 (Σa Σb)^½)`.
///
/// The cross term uses `tr((Σa Σb)^½) = tr((√Σa Σb √Σa)^½)`, whose argument is
/// symmetric PSD, so both roots come from symmetric eigendecompositions.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Contract(format!(
            "feature dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let diff = &a.mean - &b.mean;
    let root_a = sqrtm_psd(&a.cov)?;
    let inner = &root_a * &b.cov * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = symmetric_eigen(inner)?
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let d = diff.norm_squared() + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    // Rounding can leave a tiny negative value for identical inputs.
    Ok(d.max(0.0))
}

/// Non-overlapping `patch × patch` tiles in raster order; ragged borders are
/// dropped.
pub fn extract_patches(images: &[ImagePlane], patch: usize) -> Result<Vec<ImagePlane>> {
    if patch == 0 {
        return Err(Error::Contract("patch size must be positive".into()));
    }
    let mut out = Vec::new();
    for img in images {
        let (h, w) = img.size();
        if h < patch || w < patch {
            return Err(Error::Contract(format!(
                "{h}x{w} image is smaller than a {patch}-px patch"
            )));
        }
        for py in 0..h / patch {
            for px in 0..w / patch {
                out.push(ImagePlane::from_fn(patch, patch, |c, y, x| {
                    img.get(c, py * patch + y, px * patch + x)
                }));
            }
        }
    }
    Ok(out)
}

/// A deterministic frozen map from patches to feature vectors.
pub trait FeatureMap: Sync {
    fn features(&self, patches: &[ImagePlane]) -> Vec<Vec<f64>>;
}

/// Raw pixels as features.
pub struct PixelFeatures;

impl FeatureMap for PixelFeatures {
    fn features(&self, patches: &[ImagePlane]) -> Vec<Vec<f64>> {
        patches.iter().map(|p| p.data().to_vec()).collect()
    }
}

/// Globally pooled bottleneck of a discriminator's down path.
pub struct DiscriminatorFeatures<'a> {
    pub disc: &'a OasisC,
    pub params: &'a ParamStore,
}

impl FeatureMap for DiscriminatorFeatures<'_> {
    fn features(&self, patches: &[ImagePlane]) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(16) {
            let f = self
                .disc
                .pooled_features(self.params, &ImagePlane::batch_to_array(chunk));
            let d = f.shape()[1];
            out.extend(f.data().chunks(d).map(<[f64]>::to_vec));
        }
        out
    }
}

/// A feature map with the patch size it is applied at.
#[derive(Clone, Copy)]
pub struct Perception<'a> {
    pub features: &'a dyn FeatureMap,
    pub patch: usize,
}

/// Patched Fréchet distance between two image sets.
pub fn perception_score(
    real: &[ImagePlane],
    fake: &[ImagePlane],
    patch: usize,
    features: &dyn FeatureMap,
) -> Result<f64> {
    let real = extract_patches(real, patch)?;
    let fake = extract_patches(fake, patch)?;
    for set in [&real, &fake] {
        if set.len() < 2 {
            return Err(Error::InsufficientSamples {
                needed: 2,
                got: set.len(),
            });
        }
    }
    let a = FeatureStats::from_rows(&features.features(&real))?;
    let b = FeatureStats::from_rows(&features.features(&fake))?;
    frechet_distance(&a, &b)
}

/// Unnormalised forward 2-D DFT of a row-major `n × n` plane.
pub fn dft2(plane: &[f64], n: usize) -> Result<Vec<Complex<f64>>> {
    if n == 0 || plane.len() != n * n {
        return Err(Error::Contract(format!(
            "spectrum needs a square plane, got {} values for side {n}",
            plane.len()
        )));
    }
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut data: Vec<Complex<f64>> = plane.iter().map(|&v| Complex::new(v, 0.0)).collect();
    for row in data.chunks_mut(n) {
        fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); n];
    for x in 0..n {
        for y in 0..n {
            col[y] = data[y * n + x];
        }
        fft.process(&mut col);
        for y in 0..n {
            data[y * n + x] = col[y];
        }
    }
    Ok(data)
}

/// Centred `log(1 + |F|)`, rescaled to `[0, 1]` (all zeros for a zero plane).
pub fn spectrum(plane: &[f64], n: usize) -> Result<Vec<f64>> {
    let f = dft2(plane, n)?;
    let half = n / 2;
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let (sy, sx) = ((y + half) % n, (x + half) % n);
            out[sy * n + sx] = f[y * n + x].norm().ln_1p();
        }
    }
    let max = out.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        out.iter_mut().for_each(|v| *v /= max);
    }
    Ok(out)
}

/// Luma spectrum of an image as an 8-bit PNG.
pub fn save_spectrum_png(img: &ImagePlane, path: &Path) -> Result<()> {
    let (h, w) = img.size();
    if h != w {
        return Err(Error::Contract("spectrum needs a square image".into()));
    }
    let luma: Vec<f64> = (0..h * w)
        .map(|i| 0.299 * img.channel(0)[i] + 0.587 * img.channel(1)[i] + 0.114 * img.channel(2)[i])
        .collect();
    let s = spectrum(&luma, h)?;
    let gray = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(s[y as usize * w + x as usize] * 255.0).round() as u8])
    });
    gray.save(path).map_err(|source| Error::Image {
        path: path.to_owned(),
        source,
    })
}

/// Metrics of one decoded image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub bpp: f64,
    pub psnr_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub alpha: f64,
    pub images: Vec<ImageRecord>,
    pub mean_bpp: f64,
    pub mean_psnr_db: f64,
    pub perception_score: Option<f64>,
}

impl EvalReport {
    pub fn new(alpha: f64, images: Vec<ImageRecord>, perception_score: Option<f64>) -> Self {
        let n = images.len().max(1) as f64;
        let mean_bpp = images.iter().map(|r| r.bpp).sum::<f64>() / n;
        let mean_psnr_db = images.iter().map(|r| r.psnr_db).sum::<f64>() / n;
        Self {
            alpha,
            images,
            mean_bpp,
            mean_psnr_db,
            perception_score,
        }
    }

    /// Per-image rows followed by an aggregate row with id `mean`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("image_id,alpha,bpp,psnr_db,perception_score\n");
        for r in &self.images {
            let _ = writeln!(s, "{},{},{:.6},{:.6},", r.image_id, self.alpha, r.bpp, r.psnr_db);
        }
        let perception = self.perception_score.map(|p| format!("{p:.6}")).unwrap_or_default();
        let _ = writeln!(
            s,
            "mean,{},{:.6},{:.6},{perception}",
            self.alpha, self.mean_bpp, self.mean_psnr_db
        );
        s
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).at(dir)?;
        let json = dir.join("report.json");
        fs::write(&json, serde_json::to_vec_pretty(self)?).at(&json)?;
        let csv = dir.join("report.csv");
        fs::write(&csv, self.to_csv()).at(&csv)
    }
}

/// A labelled point series for [`scatter_svg`].
pub struct Series<'a> {
    pub label: &'a str,
    pub points: Vec<(f64, f64)>,
}

/// Minimal SVG scatter plot with connected points per series.
pub fn scatter_svg(title: &str, x_label: &str, y_label: &str, series: &[Series<'_>]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 360.0;
    const M: f64 = 50.0;
    const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let pts = || series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts() {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let pad = |lo: f64, hi: f64| if hi - lo < 1e-12 { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
    let ((x0, x1), (y0, y1)) = (pad(x0, x1), pad(y0, y1));
    let sx = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">{title}</text>\n\
         <line x1=\"{M}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x_label}</text>\n\
         <text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{y_label}</text>\n",
        W / 2.0,
        H - M,
        W - M,
        H - M,
        H - M,
        W / 2.0,
        H - 12.0,
        H / 2.0,
        H / 2.0,
    );
    for (v, anchor, x, y) in [
        (x0, "start", sx(x0), H - M + 14.0),
        (x1, "end", sx(x1), H - M + 14.0),
    ] {
        let _ = writeln!(s, "<text x=\"{x:.1}\" y=\"{y:.1}\" text-anchor=\"{anchor}\">{v:.3}</text>");
    }
    for v in [y0, y1] {
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.3}</text>",
            M - 4.0,
            sy(v) + 4.0
        );
    }
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = ser
            .points
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\"/>",
            path.join(" ")
        );
        for &(x, y) in &ser.points {
            let _ = writeln!(
                s,
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>",
                sx(x),
                sy(y)
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"{color}\">{}</text>",
            W - M - 80.0,
            M + 14.0 * i as f64,
            ser.label
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_cap_and_half_gray() {
        let a = ImagePlane::filled(4, 4, 0.0);
        let b = ImagePlane::filled(4, 4, 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        assert!((psnr(&a, &b).unwrap() - 6.020_599_913_279_624).abs() < 1e-9);
        assert!(psnr(&a, &ImagePlane::filled(2, 4, 0.0)).is_err());
    }

    #[test]
    fn patches_tile_in_raster_order() {
        let img = ImagePlane::from_fn(64, 64, |c, y, x| (c * 4096 + y * 64 + x) as f64);
        let p = extract_patches(&[img.clone()], 32).unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!(p[1].get(0, 0, 0), img.get(0, 0, 32));
        assert_eq!(p[2].get(2, 5, 7), img.get(2, 37, 7));
        let whole = extract_patches(&[img.clone()], 64).unwrap();
        assert_eq!(whole[0], img);
    }

    #[test]
    fn stats_need_two_rows() {
        assert!(matches!(
            FeatureStats::from_rows(&[vec![1.0]]),
            Err(Error::InsufficientSamples { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn constant_plane_has_dc_only() {
        let f = dft2(&[0.25; 16], 4).unwrap();
        assert!((f[0].re - 4.0).abs() < 1e-12);
        assert!(f[1..].iter().all(|c| c.norm() < 1e-12));
    }

    #[test]
    fn svg_is_well_formed_enough() {
        let svg = scatter_svg(
            "t",
            "x",
            "y",
            &[Series {
                label: "a",
                points: vec![(0.0, 1.0), (1.0, 2.0)],
            }],
        );
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<circle").count(), 2);
    }
}
