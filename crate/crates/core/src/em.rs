//! EM fit of the fan parameters to one image.
//!
//! The E-step turns the current prior field and the per-pixel intensity
//! likelihoods into a posterior `U`. The M-step minimizes the binary
//! cross-entropy between `U` and the prior field, which is the
//! parameter-dependent part of the variational lower bound, with L-BFGS.
//! Progress is tracked with the exact marginal log-likelihood.

use crate::error::{Error, Result};
use crate::geometry::{
    sigmoid, softplus, FanEvaluator, FanParams, Point, SteepnessConfig, N_PARAMS,
};
use crate::image::{GrayImage, ProbField};
use crate::intensity::{BackgroundModel, ForegroundModel};
use crate::lbfgs::{self, LbfgsConfig};
use crate::par;

/// `ln p(theta)` and its gradient; plugged into the M-step when the
/// parameter prior is not uniform.
pub type LogPrior<'a> = &'a (dyn Fn(&FanParams) -> (f64, [f64; N_PARAMS]) + Sync);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmConfig {
    pub max_em_iters: usize,
    /// Minimum marginal log-likelihood gain per megapixel; scaled by the image area.
    pub loglik_tol: f64,
    pub lbfgs: LbfgsConfig,
    pub steep: SteepnessConfig,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_em_iters: 50,
            loglik_tol: 1e-3,
            lbfgs: LbfgsConfig::default(),
            steep: SteepnessConfig::default(),
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_em_iters == 0 || self.loglik_tol.is_nan() || self.loglik_tol <= 0.0 {
            return Err(Error::InvalidParameter(
                "max_em_iters must be >= 1 and loglik_tol > 0".into(),
            ));
        }
        self.lbfgs.validate()?;
        self.steep.validate()
    }

    /// Absolute stopping threshold for a `width x height` image.
    pub fn absolute_tol(&self, width: usize, height: usize) -> f64 {
        self.loglik_tol * (width * height) as f64 / 1e6
    }
}

/// Marginal log-likelihood and parameters, starting with the initial
/// parameters and extended after every M-step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitTrace {
    pub log_likelihood: Vec<f64>,
    pub thetas: Vec<FanParams>,
}

impl FitTrace {
    /// EM iterations performed.
    pub fn iterations(&self) -> usize {
        self.log_likelihood.len().saturating_sub(1)
    }

    /// Largest drop between consecutive entries (0 for a monotone trace).
    pub fn max_decrease(&self) -> f64 {
        self.log_likelihood
            .windows(2)
            .map(|w| w[0] - w[1])
            .fold(0.0, f64::max)
    }
}

/// Per-pixel `ln fg_pdf` and `ln bg_pdf`; fixed for the whole fit.
struct PixelLikelihoods {
    width: usize,
    height: usize,
    ln_fg: Vec<f64>,
    ln_bg: Vec<f64>,
}

impl PixelLikelihoods {
    fn new(img: &GrayImage, fg: &ForegroundModel, bg: &BackgroundModel) -> Self {
        let ln_fg = img.data().iter().map(|&i| fg.ln_pdf(i)).collect();
        let ln_bg = img.data().iter().map(|&i| bg.ln_pdf(i)).collect();
        Self {
            width: img.width(),
            height: img.height(),
            ln_fg,
            ln_bg,
        }
    }

    fn posterior(&self, theta: &FanParams, steep: SteepnessConfig) -> ProbField {
        let w = self.width;
        let eval = FanEvaluator::new(theta, Point::image_center(w, self.height));
        let bands = par::map_row_bands(self.height, |rows| {
            let mut out = Vec::with_capacity(rows.len() * w);
            for y in rows {
                let py = y as f64 + 0.5;
                for x in 0..w {
                    let i = y * w + x;
                    let t = steep.kappa * eval.field(x as f64 + 0.5, py);
                    // logit U = logit r + logit p
                    out.push(sigmoid(self.ln_fg[i] - self.ln_bg[i] + t));
                }
            }
            out
        });
        ProbField::from_raw(w, self.height, bands.concat())
    }

    fn log_likelihood(&self, theta: &FanParams, steep: SteepnessConfig) -> f64 {
        let w = self.width;
        let eval = FanEvaluator::new(theta, Point::image_center(w, self.height));
        let bands = par::map_row_bands(self.height, |rows| {
            let mut row_sums = Vec::with_capacity(rows.len());
            let mut terms = vec![0.0; w];
            for y in rows {
                let py = y as f64 + 0.5;
                for (x, term) in terms.iter_mut().enumerate() {
                    let i = y * w + x;
                    let t = steep.kappa * eval.field(x as f64 + 0.5, py);
                    let a = self.ln_fg[i] - softplus(-t);
                    let b = self.ln_bg[i] - softplus(t);
                    let m = a.max(b);
                    *term = m + (-(a - b).abs()).exp().ln_1p();
                }
                row_sums.push(par::pairwise_sum(&terms));
            }
            par::pairwise_sum(&row_sums)
        });
        par::pairwise_sum(&bands)
    }
}

/// Posterior label probability `U_i = r p / (r p + (1 - r)(1 - p))`.
pub fn e_step(
    img: &GrayImage,
    theta: &FanParams,
    fg: &ForegroundModel,
    bg: &BackgroundModel,
    steep: SteepnessConfig,
) -> ProbField {
    PixelLikelihoods::new(img, fg, bg).posterior(theta, steep)
}

/// `sum_i ln(fg_i p_i + bg_i (1 - p_i))` over all pixels.
pub fn marginal_log_likelihood(
    img: &GrayImage,
    theta: &FanParams,
    fg: &ForegroundModel,
    bg: &BackgroundModel,
    steep: SteepnessConfig,
) -> f64 {
    PixelLikelihoods::new(img, fg, bg).log_likelihood(theta, steep)
}

/// Cross-entropy `sum_i -[U_i ln p_i + (1 - U_i) ln(1 - p_i)]` and its
/// gradient in the ten parameters.
pub fn m_step_objective(
    theta: &FanParams,
    u: &ProbField,
    steep: SteepnessConfig,
) -> (f64, [f64; N_PARAMS]) {
    let (w, h) = u.dims();
    let eval = FanEvaluator::new(theta, Point::image_center(w, h));
    let data = u.data();
    let kappa = steep.kappa;
    let bands = par::map_row_bands(h, |rows| {
        let mut row_sums = Vec::with_capacity(rows.len());
        let mut terms = vec![0.0; w];
        let mut grad = [0.0; N_PARAMS];
        for y in rows {
            let py = y as f64 + 0.5;
            for (x, term) in terms.iter_mut().enumerate() {
                let px = x as f64 + 0.5;
                let ui = data[y * w + x];
                let t = kappa * eval.field(px, py);
                // -[u ln s(t) + (1 - u) ln s(-t)] = softplus(t) - u t
                *term = softplus(t) - ui * t;
                let r = sigmoid(t) - ui;
                if r != 0.0 {
                    let fg = eval.field_grad(px, py);
                    for (g, d) in grad.iter_mut().zip(fg) {
                        *g += r * d;
                    }
                }
            }
            row_sums.push(par::pairwise_sum(&terms));
        }
        (par::pairwise_sum(&row_sums), grad)
    });
    let values: Vec<f64> = bands.iter().map(|b| b.0).collect();
    let grad = std::array::from_fn(|k| {
        let parts: Vec<f64> = bands.iter().map(|b| b.1[k]).collect();
        kappa * par::pairwise_sum(&parts)
    });
    (par::pairwise_sum(&values), grad)
}

/// Per-parameter scale so that a unit change in the optimizer's variables
/// moves the field by roughly one pixel somewhere in the image.
fn parameter_scale(width: usize, height: usize) -> [f64; N_PARAMS] {
    let half = width.max(height) as f64 / 2.0;
    let inv = 1.0 / half;
    let inv2 = inv * inv;
    [inv, 1.0, inv, 1.0, inv2, 1.0, 1.0, inv2, 1.0, 1.0]
}

/// One M-step: L-BFGS on the cross-entropy (minus the log prior, if any),
/// warm-started at `theta0`.
pub fn m_step_with_prior(
    u: &ProbField,
    theta0: &FanParams,
    cfg: &EmConfig,
    prior: Option<LogPrior<'_>>,
) -> Result<FanParams> {
    let (w, h) = u.dims();
    let scale = parameter_scale(w, h);
    let to_theta = |z: &[f64]| {
        let mut v = [0.0; N_PARAMS];
        for k in 0..N_PARAMS {
            v[k] = z[k] * scale[k];
        }
        FanParams::from_array(v)
    };
    let objective = |z: &[f64]| {
        let theta = to_theta(z);
        let (mut f, mut g) = m_step_objective(&theta, u, cfg.steep);
        if let Some(prior) = prior {
            let (lp, lg) = prior(&theta);
            f -= lp;
            for (gk, lk) in g.iter_mut().zip(lg) {
                *gk -= lk;
            }
        }
        (f, g.iter().zip(&scale).map(|(gk, s)| gk * s).collect())
    };
    let z0: Vec<f64> = theta0
        .to_array()
        .iter()
        .zip(&scale)
        .map(|(t, s)| t / s)
        .collect();
    let result = lbfgs::minimize(objective, &z0, &cfg.lbfgs)?;
    log::trace!(
        "m-step: {} iterations, objective {} -> {}, stop {:?}",
        result.iters,
        result.trace[0],
        result.f_star,
        result.stop
    );
    Ok(to_theta(&result.x_star))
}

pub fn m_step(u: &ProbField, theta0: &FanParams, cfg: &EmConfig) -> Result<FanParams> {
    m_step_with_prior(u, theta0, cfg, None)
}

fn check_models(fg: &ForegroundModel, bg: &BackgroundModel) -> Result<()> {
    fg.validate()?;
    bg.validate()
}

/// Full EM loop from `theta0` until the log-likelihood gain drops below the
/// area-scaled tolerance or the iteration budget runs out.
pub fn fit_with_prior(
    img: &GrayImage,
    fg: &ForegroundModel,
    bg: &BackgroundModel,
    theta0: &FanParams,
    cfg: &EmConfig,
    prior: Option<LogPrior<'_>>,
) -> Result<(FanParams, FitTrace)> {
    cfg.validate()?;
    check_models(fg, bg)?;
    let pix = PixelLikelihoods::new(img, fg, bg);
    let tol = cfg.absolute_tol(img.width(), img.height());

    let mut theta = *theta0;
    let mut trace = FitTrace {
        log_likelihood: vec![pix.log_likelihood(&theta, cfg.steep)],
        thetas: vec![theta],
    };
    for iter in 0..cfg.max_em_iters {
        let u = pix.posterior(&theta, cfg.steep);
        theta = m_step_with_prior(&u, &theta, cfg, prior)?;
        let ll = pix.log_likelihood(&theta, cfg.steep);
        let gain = ll - trace.log_likelihood[trace.log_likelihood.len() - 1];
        trace.log_likelihood.push(ll);
        trace.thetas.push(theta);
        log::debug!(
            "em iteration {}: log-likelihood {ll:.6} (gain {gain:.3e})",
            iter + 1
        );
        if gain < tol {
            break;
        }
    }
    Ok((theta, trace))
}

pub fn fit(
    img: &GrayImage,
    fg: &ForegroundModel,
    bg: &BackgroundModel,
    theta0: &FanParams,
    cfg: &EmConfig,
) -> Result<(FanParams, FitTrace)> {
    fit_with_prior(img, fg, bg, theta0, cfg, None)
}

/// Symmetric starting shape: lines 35 degrees either side of vertical, arc
/// vertices on the centre column at 12% and 92% of the height, curvatures
/// `2 / width`. The two line offsets are shifted equally so the summed field
/// vanishes at the image centre, which makes the starting mask the lower half
/// of the image for every aspect ratio.
pub fn default_init(width: usize, height: usize) -> Result<FanParams> {
    if width < 16 || height < 16 {
        return Err(Error::ImageTooSmall {
            width,
            height,
            required: 16,
        });
    }
    let (w, h) = (width as f64, height as f64);
    let anchor = Point::image_center(width, height);
    let apex = Point::new(w / 2.0, 0.05 * h);
    let left = 35f64.to_radians();
    let right = std::f64::consts::PI - left;
    let through_apex = |a: f64| a.cos() * (apex.x - anchor.x) + a.sin() * (apex.y - anchor.y);
    let mut theta = FanParams {
        left_line_angle: left,
        left_line_offset: through_apex(left),
        right_line_angle: right,
        right_line_offset: through_apex(right),
        top_parabola_curv: 2.0 / w,
        top_parabola_vx: w / 2.0,
        top_parabola_vy: 0.12 * h,
        bottom_parabola_curv: 2.0 / w,
        bottom_parabola_vx: w / 2.0,
        bottom_parabola_vy: 0.92 * h,
    };
    let at_center = FanEvaluator::new(&theta, anchor).field(anchor.x, anchor.y);
    theta.left_line_offset += at_center / 2.0;
    theta.right_line_offset += at_center / 2.0;
    Ok(theta)
}
