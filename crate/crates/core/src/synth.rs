//! Synthetic ultrasound-like images with known ground truth.
//!
//! Pixels inside the fan are drawn iid from the foreground mixture (clamped
//! to `[0, 1]`), pixels outside from the uniform background. Bright
//! rectangles and crosses stand in for caliper marks and text.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{sign_mask, FanEvaluator, FanParams, Point};
use crate::image::{BinaryMask, GrayImage};
use crate::intensity::{BackgroundModel, ForegroundModel, CENTER_PATCH, CORNER_PATCH};

pub const MIN_AREA: f64 = 0.2;
pub const MAX_AREA: f64 = 0.7;
const MAX_RETRIES: usize = 100;
const PLACEMENT_TRIES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub width: usize,
    pub height: usize,
    /// `None` draws a random shape within the area bounds.
    #[serde(default)]
    pub theta: Option<FanParams>,
    pub fg: ForegroundModel,
    pub bg: BackgroundModel,
    pub annotation_count: usize,
    pub rng_seed: u64,
}

impl SynthSpec {
    /// Random shape, a mid-gray two-component foreground and a near-black background.
    pub fn random(width: usize, height: usize, annotation_count: usize, rng_seed: u64) -> Self {
        Self {
            width,
            height,
            theta: None,
            fg: default_foreground(),
            bg: default_background(),
            annotation_count,
            rng_seed,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

pub fn default_foreground() -> ForegroundModel {
    ForegroundModel {
        weight: 0.5,
        mu1: 0.15,
        sigma1: 0.05,
        mu2: 0.35,
        sigma2: 0.08,
    }
}

pub fn default_background() -> BackgroundModel {
    BackgroundModel { lo: 0.0, hi: 0.05 }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub image: GrayImage,
    /// The same pixels before annotations were stamped.
    pub clean: GrayImage,
    pub fan: BinaryMask,
    pub annotations: BinaryMask,
    pub theta: FanParams,
}

fn box_inside(mask: &BinaryMask, x0: usize, y0: usize, size: usize, want: bool) -> bool {
    (y0..y0 + size).all(|y| (x0..x0 + size).all(|x| mask.get(x, y) == want))
}

/// True when the fan covers the centre patch and misses all corner patches,
/// so the intensity models can be estimated from this image.
fn patches_consistent(fan: &BinaryMask) -> bool {
    let (w, h) = fan.dims();
    if w < CENTER_PATCH || h < CENTER_PATCH {
        return false;
    }
    let c = CORNER_PATCH;
    box_inside(
        fan,
        (w - CENTER_PATCH) / 2,
        (h - CENTER_PATCH) / 2,
        CENTER_PATCH,
        true,
    ) && [(0, 0), (w - c, 0), (0, h - c), (w - c, h - c)]
        .iter()
        .all(|&(x, y)| box_inside(fan, x, y, c, false))
}

/// Draws parameters whose summed field is `S (y - y0 - k (x - x0)^2)`: a
/// region that is narrow at the top and widens toward the bottom edge.
fn random_theta(rng: &mut ChaCha8Rng, width: usize, height: usize) -> FanParams {
    let (w, h) = (width as f64, height as f64);
    let anchor = Point::image_center(width, height);
    let beta_l = rng.random_range(25.0..45.0) * PI / 180.0;
    let beta_r = rng.random_range(25.0..45.0) * PI / 180.0;
    let slope = beta_l.sin() + beta_r.sin();
    let cx = beta_l.cos() - beta_r.cos();

    let y0 = rng.random_range(0.12..0.35) * h;
    let x0 = w / 2.0 + rng.random_range(-0.06..0.06) * w;
    let half_width = rng.random_range(0.28..0.4) * w;
    let k = (h - y0) / (half_width * half_width);

    let c_top = rng.random_range(0.5..2.0) / w;
    let c_bottom = c_top + slope * k;
    let vx_top = w / 2.0 + rng.random_range(-0.05..0.05) * w;
    let vx_bottom = (2.0 * slope * k * x0 - cx + 2.0 * c_top * vx_top) / (2.0 * c_bottom);
    let vy_top = rng.random_range(0.05..0.2) * h;
    let vy_bottom = vy_top + rng.random_range(0.5..0.8) * h;

    let offset_sum = -cx * anchor.x - slope * anchor.y + c_top * vx_top * vx_top
        - c_bottom * vx_bottom * vx_bottom
        + vy_bottom
        - vy_top
        + slope * y0
        + slope * k * x0 * x0;
    let split = rng.random_range(0.3..0.7);
    FanParams {
        left_line_angle: beta_l,
        left_line_offset: split * offset_sum,
        right_line_angle: PI - beta_r,
        right_line_offset: (1.0 - split) * offset_sum,
        top_parabola_curv: c_top,
        top_parabola_vx: vx_top,
        top_parabola_vy: vy_top,
        bottom_parabola_curv: c_bottom,
        bottom_parabola_vx: vx_bottom,
        bottom_parabola_vy: vy_bottom,
    }
}

fn draw_shape(rng: &mut ChaCha8Rng, spec: &SynthSpec) -> Result<FanParams> {
    for _ in 0..MAX_RETRIES {
        let theta = random_theta(rng, spec.width, spec.height);
        if theta.validate().is_err() {
            continue;
        }
        let fan = sign_mask(&theta, spec.width, spec.height);
        let area = fan.area_fraction();
        if (MIN_AREA..=MAX_AREA).contains(&area) && patches_consistent(&fan) {
            return Ok(theta);
        }
    }
    Err(Error::FanAreaOutOfBounds {
        lo: MIN_AREA,
        hi: MAX_AREA,
        tries: MAX_RETRIES,
    })
}

/// Pixel offsets of one annotation relative to its top-left corner.
fn annotation_shape(rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    if rng.random_bool(0.5) {
        let w = rng.random_range(8..=24);
        let h = rng.random_range(4..=9);
        (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).collect()
    } else {
        let arm = rng.random_range(4..=8);
        let thick = rng.random_range(1..=2);
        let size = 2 * arm + thick;
        (0..size)
            .flat_map(|y| (0..size).map(move |x| (x, y)))
            .filter(|&(x, y)| (arm..arm + thick).contains(&x) || (arm..arm + thick).contains(&y))
            .collect()
    }
}

fn stamp_annotations(
    rng: &mut ChaCha8Rng,
    image: &mut [f64],
    fan: &BinaryMask,
    count: usize,
) -> BinaryMask {
    let (w, h) = fan.dims();
    let mut annotations = BinaryMask::empty(w, h).expect("valid dims");
    for _ in 0..count {
        let shape = annotation_shape(rng);
        let sw = shape.iter().map(|p| p.0).max().unwrap_or(0) + 1;
        let sh = shape.iter().map(|p| p.1).max().unwrap_or(0) + 1;
        let level = rng.random_range(0.9..=1.0);
        if sw > w || sh > h {
            continue;
        }
        let mut origin = None;
        for _ in 0..PLACEMENT_TRIES {
            let ox = rng.random_range(0..=w - sw);
            let oy = rng.random_range(0..=h - sh);
            if shape.iter().all(|&(x, y)| fan.get(ox + x, oy + y)) {
                origin = Some((ox, oy));
                break;
            }
        }
        let Some((ox, oy)) = origin else { continue };
        for &(x, y) in &shape {
            let (px, py) = (ox + x, oy + y);
            image[py * w + px] = level;
            annotations.set(px, py, true);
        }
    }
    annotations
}

/// Generates one image. Fully determined by `spec`, including its seed.
pub fn generate(spec: &SynthSpec) -> Result<SynthImage> {
    if spec.width < 16 || spec.height < 16 {
        return Err(Error::ImageTooSmall {
            width: spec.width,
            height: spec.height,
            required: 16,
        });
    }
    spec.fg.validate()?;
    spec.bg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let theta = match spec.theta {
        Some(t) => t,
        None => draw_shape(&mut rng, spec)?,
    };
    let fan = sign_mask(&theta, spec.width, spec.height);

    let c1 = Normal::new(spec.fg.mu1, spec.fg.sigma1).expect("validated sigma");
    let c2 = Normal::new(spec.fg.mu2, spec.fg.sigma2).expect("validated sigma");
    let mut pixels = Vec::with_capacity(spec.width * spec.height);
    for &inside in fan.data() {
        let v = if inside {
            let s = if rng.random::<f64>() < spec.fg.weight {
                c1.sample(&mut rng)
            } else {
                c2.sample(&mut rng)
            };
            s.clamp(0.0, 1.0)
        } else {
            rng.random_range(spec.bg.lo..=spec.bg.hi)
        };
        pixels.push(v);
    }
    let clean = GrayImage::from_raw_clamped(spec.width, spec.height, pixels.clone());
    let annotations = stamp_annotations(&mut rng, &mut pixels, &fan, spec.annotation_count);
    let image = GrayImage::from_raw_clamped(spec.width, spec.height, pixels);
    Ok(SynthImage {
        image,
        clean,
        fan,
        annotations,
        theta,
    })
}

/// Field value at the centre pixel; positive when the centre is inside.
pub fn center_field(theta: &FanParams, width: usize, height: usize) -> f64 {
    let c = Point::image_center(width, height);
    FanEvaluator::new(theta, c).field(c.x, c.y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{hard_mask, rasterize_prior, SteepnessConfig};
    use statrs::distribution::{ContinuousCDF, Normal as StatNormal};

    #[test]
    fn no_annotations_means_empty_mask() {
        let s = generate(&SynthSpec::random(64, 64, 0, 1)).unwrap();
        assert_eq!(s.annotations.count(), 0);
        assert_eq!(s.image, s.clean);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate(&SynthSpec::random(96, 80, 5, 77)).unwrap();
        let b = generate(&SynthSpec::random(96, 80, 5, 77)).unwrap();
        assert_eq!(a, b);
        let c = generate(&SynthSpec::random(96, 80, 5, 78)).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn random_shapes_respect_bounds() {
        for seed in 0..40 {
            let s = generate(&SynthSpec::random(128, 128, 6, seed)).unwrap();
            let area = s.fan.area_fraction();
            assert!((MIN_AREA..=MAX_AREA).contains(&area), "seed {seed}: {area}");
            assert!(patches_consistent(&s.fan));
            assert!(s.theta.validate().is_ok());
            assert!(center_field(&s.theta, 128, 128) > 0.0);
            assert!(s.annotations.is_subset_of(&s.fan));
            let prior = rasterize_prior(&s.theta, 128, 128, SteepnessConfig::default());
            assert_eq!(hard_mask(&prior, 0.5), s.fan);
        }
    }

    #[test]
    fn interior_mean_matches_mixture() {
        let spec = SynthSpec::random(256, 256, 0, 3);
        let s = generate(&spec).unwrap();
        let inside: Vec<f64> = s
            .image
            .data()
            .iter()
            .zip(s.fan.data())
            .filter(|(_, &f)| f)
            .map(|(&v, _)| v)
            .collect();
        let n = inside.len() as f64;
        let mean = inside.iter().sum::<f64>() / n;
        let se = (spec.fg.variance() / n).sqrt();
        assert!(
            (mean - spec.fg.mean()).abs() < 3.0 * se,
            "{mean} vs {}",
            spec.fg.mean()
        );
        let exterior_max = s
            .image
            .data()
            .iter()
            .zip(s.fan.data())
            .filter(|(_, &f)| !f)
            .map(|(&v, _)| v)
            .fold(0.0, f64::max);
        assert!(exterior_max <= spec.bg.hi);
    }

    #[test]
    fn interior_passes_kolmogorov_smirnov() {
        let spec = SynthSpec::random(256, 256, 0, 11);
        let s = generate(&spec).unwrap();
        let mut inside: Vec<f64> = s
            .image
            .data()
            .iter()
            .zip(s.fan.data())
            .filter(|(_, &f)| f)
            .map(|(&v, _)| v)
            .collect();
        assert!(inside.len() >= 10_000);
        inside.sort_by(f64::total_cmp);
        let a = StatNormal::new(spec.fg.mu1, spec.fg.sigma1).unwrap();
        let b = StatNormal::new(spec.fg.mu2, spec.fg.sigma2).unwrap();
        // CDF of the mixture clamped to [0, 1]: point masses at both ends.
        let cdf = |x: f64| {
            if x >= 1.0 {
                1.0
            } else {
                spec.fg.weight * a.cdf(x) + (1.0 - spec.fg.weight) * b.cdf(x)
            }
        };
        let n = inside.len() as f64;
        let mut d: f64 = 0.0;
        let mut i = 0;
        while i < inside.len() {
            let x = inside[i];
            let mut j = i;
            while j < inside.len() && inside[j] == x {
                j += 1;
            }
            d = d.max((j as f64 / n - cdf(x)).abs());
            // The only atom below 1 sits at 0, where the left limit is 0 on both sides.
            if x > 0.0 {
                d = d.max((i as f64 / n - cdf(x)).abs());
            }
            i = j;
        }
        // Asymptotic two-sided critical value at alpha = 0.01.
        let critical = 1.628 / n.sqrt();
        assert!(d < critical, "D = {d}, critical {critical}");
    }

    #[test]
    fn explicit_theta_is_used() {
        let base = generate(&SynthSpec::random(64, 64, 0, 5)).unwrap();
        let spec = SynthSpec {
            theta: Some(base.theta),
            rng_seed: 99,
            ..SynthSpec::random(64, 64, 0, 0)
        };
        let s = generate(&spec).unwrap();
        assert_eq!(s.theta, base.theta);
        assert_eq!(s.fan, base.fan);
    }

    #[test]
    fn spec_json_roundtrip() {
        let spec = SynthSpec::random(64, 48, 3, 9);
        let text = serde_json::to_string(&spec).unwrap();
        let back: SynthSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
        assert!(generate(&SynthSpec::random(8, 8, 0, 0)).is_err());
    }
}
