//! Foreground and background intensity distributions.
//!
//! Inside the fan, intensities follow a two-component Gaussian mixture; the
//! background is uniform on `[lo, hi]`. Both are estimated from fixed image
//! patches: 5x5 boxes at image centres for the foreground, 2x2 boxes at the
//! four corners for the background.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;

pub const SIGMA_FLOOR: f64 = 1e-3;
pub const SUPPORT_FLOOR: f64 = 1e-2;
pub const SUPPORT_PAD: f64 = 1e-2;
/// Background density assigned outside the uniform support.
pub const EPS_DENSITY: f64 = 1e-6;

pub const CENTER_PATCH: usize = 5;
pub const CORNER_PATCH: usize = 2;

const MIN_FG_SAMPLES: usize = 10;
const MIN_BG_SAMPLES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForegroundModel {
    pub weight: f64,
    pub mu1: f64,
    pub sigma1: f64,
    pub mu2: f64,
    pub sigma2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackgroundModel {
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmmConfig {
    pub max_iters: usize,
    /// Stop when the mean per-sample log-likelihood gains less than this.
    pub tol: f64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            tol: 1e-8,
        }
    }
}

#[inline]
fn log_normal(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * PI).ln()
}

#[inline]
fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

impl ForegroundModel {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.weight, self.mu1, self.sigma1, self.mu2, self.sigma2]
            .iter()
            .all(|v| v.is_finite());
        if !finite
            || !(self.weight > 0.0 && self.weight < 1.0)
            || self.sigma1 < SIGMA_FLOOR
            || self.sigma2 < SIGMA_FLOOR
            || self.mu1 > self.mu2
        {
            return Err(Error::InvalidParameter(format!(
                "invalid foreground model {self:?}"
            )));
        }
        Ok(())
    }

    /// Mixture mean.
    pub fn mean(&self) -> f64 {
        self.weight * self.mu1 + (1.0 - self.weight) * self.mu2
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.weight * (self.sigma1.powi(2) + (self.mu1 - m).powi(2))
            + (1.0 - self.weight) * (self.sigma2.powi(2) + (self.mu2 - m).powi(2))
    }

    /// `ln fg_pdf(i)`, finite for every finite `i`.
    pub fn ln_pdf(&self, i: f64) -> f64 {
        log_add_exp(
            self.weight.ln() + log_normal(i, self.mu1, self.sigma1),
            (1.0 - self.weight).ln() + log_normal(i, self.mu2, self.sigma2),
        )
    }
}

impl BackgroundModel {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.lo && self.lo < self.hi && self.hi <= 1.0)
            || self.hi - self.lo < SUPPORT_FLOOR - 1e-12
        {
            return Err(Error::InvalidParameter(format!(
                "invalid background model {self:?}"
            )));
        }
        Ok(())
    }

    pub fn ln_pdf(&self, i: f64) -> f64 {
        bg_pdf(i, self).ln()
    }
}

/// `w N(i; mu1, sigma1^2) + (1 - w) N(i; mu2, sigma2^2)`.
pub fn fg_pdf(i: f64, m: &ForegroundModel) -> f64 {
    let n = |mu: f64, s: f64| {
        let z = (i - mu) / s;
        (-0.5 * z * z).exp() / (s * (2.0 * PI).sqrt())
    };
    m.weight * n(m.mu1, m.sigma1) + (1.0 - m.weight) * n(m.mu2, m.sigma2)
}

/// Uniform density on `[lo, hi]`, [`EPS_DENSITY`] outside.
pub fn bg_pdf(i: f64, m: &BackgroundModel) -> f64 {
    if (m.lo..=m.hi).contains(&i) {
        1.0 / (m.hi - m.lo)
    } else {
        EPS_DENSITY
    }
}

/// `fg / (fg + bg)` evaluated in log space.
pub fn likelihood_ratio(i: f64, fg: &ForegroundModel, bg: &BackgroundModel) -> f64 {
    crate::geometry::sigmoid(fg.ln_pdf(i) - bg.ln_pdf(i))
}

fn check_min_size(img: &GrayImage, size: usize) -> Result<()> {
    if img.width() < size || img.height() < size {
        return Err(Error::ImageTooSmall {
            width: img.width(),
            height: img.height(),
            required: size,
        });
    }
    Ok(())
}

fn push_box(out: &mut Vec<f64>, img: &GrayImage, x0: usize, y0: usize, size: usize) {
    for y in y0..y0 + size {
        for x in x0..x0 + size {
            out.push(img.get(x, y));
        }
    }
}

/// Intensities of the centred `size x size` box of each image, in image order
/// then row-major.
pub fn extract_center_patches(images: &[GrayImage], size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(images.len() * size * size);
    for img in images {
        check_min_size(img, size)?;
        let x0 = (img.width() - size) / 2;
        let y0 = (img.height() - size) / 2;
        push_box(&mut out, img, x0, y0, size);
    }
    Ok(out)
}

/// The four corner boxes (top-left, top-right, bottom-left, bottom-right) of each image.
pub fn extract_corner_patches(images: &[GrayImage], size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(images.len() * 4 * size * size);
    for img in images {
        check_min_size(img, size)?;
        let right = img.width() - size;
        let bottom = img.height() - size;
        for (x0, y0) in [(0, 0), (right, 0), (0, bottom), (right, bottom)] {
            push_box(&mut out, img, x0, y0, size);
        }
    }
    Ok(out)
}

fn mean_ll(samples: &[f64], m: &ForegroundModel) -> f64 {
    samples.iter().map(|&x| m.ln_pdf(x)).sum::<f64>() / samples.len() as f64
}

fn moments(values: impl Iterator<Item = (f64, f64)>) -> (f64, f64, f64) {
    // (total weight, mean, variance) of weighted values.
    let (mut sw, mut swx) = (0.0, 0.0);
    let pairs: Vec<(f64, f64)> = values.collect();
    for &(w, x) in &pairs {
        sw += w;
        swx += w * x;
    }
    let mean = swx / sw;
    let var = pairs
        .iter()
        .map(|&(w, x)| w * (x - mean).powi(2))
        .sum::<f64>()
        / sw;
    (sw, mean, var)
}

/// Two-Gaussian EM fit. Returns the model and the mean log-likelihood after
/// initialization and after every iteration.
pub fn fit_foreground_traced(
    samples: &[f64],
    cfg: &GmmConfig,
) -> Result<(ForegroundModel, Vec<f64>)> {
    if samples.len() < MIN_FG_SAMPLES {
        return Err(Error::TooFewSamples {
            needed: MIN_FG_SAMPLES,
            got: samples.len(),
        });
    }
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Err(Error::DegenerateSamples);
    }

    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let half = sorted.len() / 2;
    let (low, high) = sorted.split_at(half);
    let (_, m1, v1) = moments(low.iter().map(|&x| (1.0, x)));
    let (_, m2, v2) = moments(high.iter().map(|&x| (1.0, x)));
    let mut model = ForegroundModel {
        weight: 0.5,
        mu1: m1,
        sigma1: v1.sqrt().max(SIGMA_FLOOR),
        mu2: m2,
        sigma2: v2.sqrt().max(SIGMA_FLOOR),
    };

    let mut trace = vec![mean_ll(samples, &model)];
    let mut resp = vec![0.0; samples.len()];
    for _ in 0..cfg.max_iters {
        for (r, &x) in resp.iter_mut().zip(samples) {
            let a = model.weight.ln() + log_normal(x, model.mu1, model.sigma1);
            let b = (1.0 - model.weight).ln() + log_normal(x, model.mu2, model.sigma2);
            *r = crate::geometry::sigmoid(a - b);
        }
        let (w1, mu1, var1) = moments(resp.iter().zip(samples).map(|(&r, &x)| (r, x)));
        let (w2, mu2, var2) = moments(resp.iter().zip(samples).map(|(&r, &x)| (1.0 - r, x)));
        if !(w1 > 0.0 && w2 > 0.0) {
            break;
        }
        let next = ForegroundModel {
            weight: (w1 / (w1 + w2)).clamp(1e-12, 1.0 - 1e-12),
            mu1,
            sigma1: var1.sqrt().max(SIGMA_FLOOR),
            mu2,
            sigma2: var2.sqrt().max(SIGMA_FLOOR),
        };
        let ll = mean_ll(samples, &next);
        let gain = ll - trace[trace.len() - 1];
        model = next;
        trace.push(ll);
        if gain < cfg.tol {
            break;
        }
    }

    if model.mu1 > model.mu2 {
        model = ForegroundModel {
            weight: 1.0 - model.weight,
            mu1: model.mu2,
            sigma1: model.sigma2,
            mu2: model.mu1,
            sigma2: model.sigma1,
        };
    }
    Ok((model, trace))
}

pub fn fit_foreground(samples: &[f64], cfg: &GmmConfig) -> Result<ForegroundModel> {
    fit_foreground_traced(samples, cfg).map(|(m, _)| m)
}

/// `[min - pad, max + pad]` clamped to `[0, 1]` and widened to [`SUPPORT_FLOOR`].
pub fn fit_background(samples: &[f64]) -> Result<BackgroundModel> {
    if samples.len() < MIN_BG_SAMPLES {
        return Err(Error::TooFewSamples {
            needed: MIN_BG_SAMPLES,
            got: samples.len(),
        });
    }
    let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let max = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut lo = (min - SUPPORT_PAD).clamp(0.0, 1.0);
    let mut hi = (max + SUPPORT_PAD).clamp(0.0, 1.0);
    if hi - lo < SUPPORT_FLOOR {
        hi = lo + SUPPORT_FLOOR;
        if hi > 1.0 {
            hi = 1.0;
            lo = 1.0 - SUPPORT_FLOOR;
        }
    }
    Ok(BackgroundModel { lo, hi })
}

/// Both models, with the on-disk JSON layout
/// `{weight, mu1, sigma1, mu2, sigma2, bg_lo, bg_hi}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntensityModels {
    pub fg: ForegroundModel,
    pub bg: BackgroundModel,
}

#[derive(Serialize, Deserialize)]
struct ModelsFile {
    weight: f64,
    mu1: f64,
    sigma1: f64,
    mu2: f64,
    sigma2: f64,
    bg_lo: f64,
    bg_hi: f64,
}

impl IntensityModels {
    /// Fits both models from the centre and corner patches of `images`.
    pub fn fit(images: &[GrayImage], cfg: &GmmConfig) -> Result<Self> {
        let fg = fit_foreground(&extract_center_patches(images, CENTER_PATCH)?, cfg)?;
        let bg = fit_background(&extract_corner_patches(images, CORNER_PATCH)?)?;
        Ok(Self { fg, bg })
    }

    pub fn to_json(&self) -> String {
        let file = ModelsFile {
            weight: self.fg.weight,
            mu1: self.fg.mu1,
            sigma1: self.fg.sigma1,
            mu2: self.fg.mu2,
            sigma2: self.fg.sigma2,
            bg_lo: self.bg.lo,
            bg_hi: self.bg.hi,
        };
        serde_json::to_string_pretty(&file).expect("plain struct serializes")
    }

    pub fn from_json(s: &str) -> std::result::Result<Self, serde_json::Error> {
        let f: ModelsFile = serde_json::from_str(s)?;
        Ok(Self {
            fg: ForegroundModel {
                weight: f.weight,
                mu1: f.mu1,
                sigma1: f.sigma1,
                mu2: f.mu2,
                sigma2: f.sigma2,
            },
            bg: BackgroundModel {
                lo: f.bg_lo,
                hi: f.bg_hi,
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let models = Self::from_json(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        models.fg.validate()?;
        models.bg.validate()?;
        Ok(models)
    }
}
