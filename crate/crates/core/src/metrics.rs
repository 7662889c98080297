//! Reconstruction quality metrics: PSNR, SSIM, relative data consistency,
//! and a lower-bound estimator for the solution-set diameter.

use rand::Rng;

use crate::diffusion::AdamState;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::linops::LinearOperator;
use crate::priors::GmmPrior;

/// PSNR is capped here: exactly matching inputs report 300 dB instead of
/// infinity.
pub const PSNR_CAP_DB: f64 = 300.0;

/// Per-run metric bundle. `dc` is undefined exactly when the noise level is
/// zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub dc: Option<f64>,
}

/// Measurement noise description.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseModel {
    /// `y + sigma * eta`, `eta ~ N(0, I)`.
    Gaussian { sigma: f64 },
    /// `y + delta * sqrt(|y|) * eta` with `delta^2 = sigma_equiv^2 * m / sum|y_i|`,
    /// variance-matched to the Gaussian model at level `sigma_equiv`.
    SignalDependent { sigma_equiv: f64 },
}

impl NoiseModel {
    pub fn level(&self) -> f64 {
        match self {
            NoiseModel::Gaussian { sigma } => *sigma,
            NoiseModel::SignalDependent { sigma_equiv } => *sigma_equiv,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            NoiseModel::Gaussian { .. } => "gaussian",
            NoiseModel::SignalDependent { .. } => "signal_dependent",
        }
    }
}

/// `-10 log10(||x - x_true||^2 / #pixels)` for dynamic range `[0,1]`.
pub fn psnr(x: &Image, x_true: &Image) -> Result<f64> {
    if x.width() != x_true.width() || x.height() != x_true.height() {
        return Err(Error::shape("psnr: shape mismatch"));
    }
    let n = x.data().len() as f64;
    let mse = x
        .data()
        .iter()
        .zip(x_true.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP_DB))
}

/// Mean local SSIM with an 11x11 Gaussian window (sigma 1.5) over all fully
/// contained window positions; constants `C1 = 0.01^2`, `C2 = 0.03^2` on the
/// `[0,1]` range.
pub fn ssim(x: &Image, x_true: &Image) -> Result<f64> {
    const WIN: usize = 11;
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    if x.width() != x_true.width() || x.height() != x_true.height() {
        return Err(Error::shape("ssim: shape mismatch"));
    }
    let (w, h) = (x.width(), x.height());
    if w < WIN || h < WIN {
        return Err(Error::param(format!("ssim needs at least {WIN}x{WIN}, got {w}x{h}")));
    }

    // Normalized 11x11 Gaussian weights, sigma = 1.5.
    let sigma = 1.5;
    let mut weights = [[0.0f64; WIN]; WIN];
    let mut sum = 0.0;
    for (i, row) in weights.iter_mut().enumerate() {
        for (j, wgt) in row.iter_mut().enumerate() {
            let di = i as f64 - (WIN as f64 - 1.0) / 2.0;
            let dj = j as f64 - (WIN as f64 - 1.0) / 2.0;
            *wgt = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            sum += *wgt;
        }
    }
    weights.iter_mut().flatten().for_each(|v| *v /= sum);

    let mut acc = 0.0;
    let mut count = 0usize;
    for r0 in 0..=(h - WIN) {
        for c0 in 0..=(w - WIN) {
            let (mut m1, mut m2, mut q1, mut q2, mut q12) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..WIN {
                for j in 0..WIN {
                    let wgt = weights[i][j];
                    let a = x.at(r0 + i, c0 + j);
                    let b = x_true.at(r0 + i, c0 + j);
                    m1 += wgt * a;
                    m2 += wgt * b;
                    q1 += wgt * a * a;
                    q2 += wgt * b * b;
                    q12 += wgt * a * b;
                }
            }
            let v1 = q1 - m1 * m1;
            let v2 = q2 - m2 * m2;
            let cov = q12 - m1 * m2;
            let local = ((2.0 * m1 * m2 + C1) * (2.0 * cov + C2))
                / ((m1 * m1 + m2 * m2 + C1) * (v1 + v2 + C2));
            acc += local;
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

/// Relative data consistency `||Ax - y||^2 / E||A x_true - y||^2` with the
/// expectation evaluated analytically: `m sigma^2` for Gaussian noise and
/// `delta^2 sum|y_i|` (which equals `m sigma_equiv^2` by construction) for the
/// signal-dependent model. Undefined (`None`) at noise level zero.
pub fn data_consistency(
    x: &[f64],
    y: &[f64],
    a: &LinearOperator,
    nm: &NoiseModel,
) -> Result<Option<f64>> {
    if x.len() != a.in_len() || y.len() != a.out_len() {
        return Err(Error::shape("data_consistency: shape mismatch"));
    }
    if nm.level() == 0.0 {
        return Ok(None);
    }
    let ax = a.apply(x)?;
    let num: f64 = ax.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
    let m = y.len() as f64;
    let denom = match nm {
        NoiseModel::Gaussian { sigma } => m * sigma * sigma,
        NoiseModel::SignalDependent { sigma_equiv } => m * sigma_equiv * sigma_equiv,
    };
    Ok(Some(num / denom))
}

/// Tuning for the diameter lower-bound search.
#[derive(Debug, Clone)]
pub struct DiameterParams {
    /// Weight of the data-consistency violation penalty.
    pub rho: f64,
    /// Weight of the log-prior inside the penalty.
    pub kappa: f64,
    pub ascent_iters: usize,
    pub step_size: f64,
}

impl Default for DiameterParams {
    fn default() -> Self {
        DiameterParams { rho: 1e3, kappa: 1e-2, ascent_iters: 400, step_size: 0.05 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DiameterEstimate {
    /// Best feasible pair distance found; a lower bound on the true diameter.
    pub value: f64,
    /// False when no restart produced a data-consistent pair; the value is
    /// then 0 and should be treated as a warning, not a bound.
    pub feasible: bool,
}

/// Lower bound on `diam(S_y^delta)`: from random prior restarts, ascend
/// `||x1 - x2||^2 - rho sum_i [max(0, ||A x_i - y||^2 - delta^2)^2 - kappa log p(x_i)]`
/// and report the best pair distance among data-consistent results.
pub fn estimate_diameter<R: Rng>(
    a: &LinearOperator,
    y: &[f64],
    delta: f64,
    prior: &GmmPrior,
    restarts: usize,
    params: &DiameterParams,
    rng: &mut R,
) -> Result<DiameterEstimate> {
    if delta <= 0.0 {
        return Err(Error::param("estimate_diameter: delta must be positive"));
    }
    if restarts == 0 {
        return Err(Error::param("estimate_diameter: need at least one restart"));
    }
    if y.len() != a.out_len() || a.in_len() != prior.dim() {
        return Err(Error::shape("estimate_diameter: shapes disagree"));
    }
    let n = prior.dim();
    let delta2 = delta * delta;

    let mut best: Option<f64> = None;
    for _ in 0..restarts {
        let mut x1 = prior.sample(rng);
        let mut x2 = prior.sample(rng);
        let mut adam1 = AdamState::new(n);
        let mut adam2 = AdamState::new(n);
        for _ in 0..params.ascent_iters {
            let g1 = pair_gradient(a, y, delta2, prior, &x1, &x2, params)?;
            let g2 = pair_gradient(a, y, delta2, prior, &x2, &x1, params)?;
            // Ascent: Adam expects gradients to descend, so negate.
            let neg1: Vec<f64> = g1.iter().map(|v| -v).collect();
            let neg2: Vec<f64> = g2.iter().map(|v| -v).collect();
            let u1 = adam1.step(&neg1, params.step_size);
            let u2 = adam2.step(&neg2, params.step_size);
            for i in 0..n {
                x1[i] += u1[i];
                x2[i] += u2[i];
            }
        }
        let f1 = residual_sq(a, y, &x1)?;
        let f2 = residual_sq(a, y, &x2)?;
        if f1 <= delta2 * (1.0 + 1e-9) && f2 <= delta2 * (1.0 + 1e-9) {
            let d = x1.iter().zip(&x2).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
            best = Some(best.map_or(d, |b: f64| b.max(d)));
        }
    }
    match best {
        Some(value) => Ok(DiameterEstimate { value, feasible: true }),
        None => Ok(DiameterEstimate { value: 0.0, feasible: false }),
    }
}

fn residual_sq(a: &LinearOperator, y: &[f64], x: &[f64]) -> Result<f64> {
    let ax = a.apply(x)?;
    Ok(ax.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum())
}

/// Gradient of the pair objective with respect to its first argument.
fn pair_gradient(
    a: &LinearOperator,
    y: &[f64],
    delta2: f64,
    prior: &GmmPrior,
    x: &[f64],
    other: &[f64],
    params: &DiameterParams,
) -> Result<Vec<f64>> {
    let n = x.len();
    let ax = a.apply(x)?;
    let resid: Vec<f64> = ax.iter().zip(y).map(|(p, q)| p - q).collect();
    let violation = resid.iter().map(|r| r * r).sum::<f64>() - delta2;
    let mut grad: Vec<f64> = (0..n).map(|i| 2.0 * (x[i] - other[i])).collect();
    if violation > 0.0 {
        let atr = a.adjoint(&resid)?;
        let c = params.rho * 4.0 * violation;
        for (g, r) in grad.iter_mut().zip(&atr) {
            *g -= c * r;
        }
    }
    let score = prior.score(x);
    for (g, s) in grad.iter_mut().zip(&score) {
        *g += params.rho * params.kappa * s;
    }
    Ok(grad)
}
