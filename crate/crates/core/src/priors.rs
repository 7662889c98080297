//! Analytic Gaussian-mixture priors.
//!
//! An isotropic GMM admits closed forms for everything a diffusion or flow
//! solver asks of a trained network: the noise-prediction model, the Tweedie
//! posterior mean and its Jacobian-vector products, and the flow-matching
//! velocity field. All mixture arithmetic goes through log-sum-exp.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::image::Image;

const RESP_CLAMP: f64 = 1e-300;
const EM_VAR_FLOOR: f64 = 1e-6;

/// Isotropic Gaussian mixture in image space.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmPrior {
    weights: Vec<f64>,
    /// One mean per component, each of length `dim`.
    means: Vec<Vec<f64>>,
    /// Per-component isotropic variance `s_k^2`.
    variances: Vec<f64>,
    dim: usize,
}

impl GmmPrior {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || variances.len() != k {
            return Err(Error::param("gmm: component counts disagree"));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim) {
            return Err(Error::param("gmm: inconsistent mean dimensions"));
        }
        let wsum: f64 = weights.iter().sum();
        if (wsum - 1.0).abs() > 1e-12 || weights.iter().any(|&w| w < 0.0) {
            return Err(Error::param("gmm: weights must be non-negative and sum to 1"));
        }
        if variances.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::param("gmm: variances must be positive"));
        }
        Ok(GmmPrior { weights, means, variances, dim })
    }

    /// Single Gaussian `N(mean, s2 I)`.
    pub fn single(mean: Vec<f64>, s2: f64) -> Result<Self> {
        GmmPrior::new(vec![1.0], vec![mean], vec![s2])
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    /// `log p(x)` under the mixture.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        self.scaled(1.0, |_| 0.0).log_density(x)
    }

    /// `grad log p(x)`.
    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        self.scaled(1.0, |_| 0.0).score(x)
    }

    /// `log p_t(x)` of the diffusion marginal at step `t`: the mixture with
    /// means `sqrt(abar_t) mu_k` and variances `abar_t s_k^2 + 1 - abar_t`.
    pub fn marginal_log_density(&self, sch: &DiffusionSchedule, x: &[f64], t: usize) -> f64 {
        let (abar, rest) = (sch.alpha_bar(t), 1.0 - sch.alpha_bar(t));
        self.scaled(abar.sqrt(), |_| rest).log_density(x)
    }

    /// Noise-prediction model for the diffusion marginal at step `t`:
    /// `eps(x,t) = -sqrt(1 - abar_t) * grad log p_t(x)`.
    pub fn eps_model(&self, sch: &DiffusionSchedule, x: &[f64], t: usize) -> Vec<f64> {
        let (abar, rest) = (sch.alpha_bar(t), 1.0 - sch.alpha_bar(t));
        let mut s = self.scaled(abar.sqrt(), |_| rest).score(x);
        let c = -rest.sqrt();
        s.iter_mut().for_each(|v| *v *= c);
        s
    }

    /// Jacobian-vector product of [`GmmPrior::eps_model`] in `x`.
    pub fn eps_jvp(&self, sch: &DiffusionSchedule, x: &[f64], t: usize, v: &[f64]) -> Vec<f64> {
        let (abar, rest) = (sch.alpha_bar(t), 1.0 - sch.alpha_bar(t));
        let mut s = self.scaled(abar.sqrt(), |_| rest).score_jvp(x, v);
        let c = -rest.sqrt();
        s.iter_mut().for_each(|u| *u *= c);
        s
    }

    /// Tweedie posterior mean `E[x0 | x_t]`, evaluated through the exact
    /// per-component conditional means.
    pub fn posterior_mean(&self, sch: &DiffusionSchedule, x: &[f64], t: usize) -> Vec<f64> {
        let (abar, rest) = (sch.alpha_bar(t), 1.0 - sch.alpha_bar(t));
        self.scaled(abar.sqrt(), |_| rest).cond_mean(x)
    }

    /// Exact Jacobian-vector product of [`GmmPrior::posterior_mean`].
    pub fn posterior_mean_jvp(
        &self,
        sch: &DiffusionSchedule,
        x: &[f64],
        t: usize,
        v: &[f64],
    ) -> Vec<f64> {
        let (abar, rest) = (sch.alpha_bar(t), 1.0 - sch.alpha_bar(t));
        self.scaled(abar.sqrt(), |_| rest).cond_mean_jvp(x, v)
    }

    /// Draws one sample: component by weight, then an isotropic Gaussian.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let s = self.variances[k].sqrt();
        self.means[k]
            .iter()
            .map(|&m| m + s * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// Mixture view with means scaled by `a` and variance `a^2 s_k^2 + extra`.
    fn scaled<F: Fn(usize) -> f64>(&self, a: f64, extra: F) -> ScaledMixture<'_> {
        let vars = (0..self.n_components())
            .map(|k| a * a * self.variances[k] + extra(k))
            .collect();
        ScaledMixture { prior: self, a, vars }
    }

    fn flow_mixture(&self, t: f64) -> ScaledMixture<'_> {
        let rest = (1.0 - t) * (1.0 - t);
        self.scaled(t, |_| rest)
    }

    /// Serializes as CSV: a `K,n` header, the weights row, one mean per row,
    /// then the variances row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{},{}", self.n_components(), self.dim)?;
        writeln!(f, "{}", join_row(&self.weights))?;
        for m in &self.means {
            writeln!(f, "{}", join_row(m))?;
        }
        writeln!(f, "{}", join_row(&self.variances))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let f = BufReader::new(std::fs::File::open(path)?);
        let mut lines = f.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::param(format!("{}: empty gmm file", path.display())))??;
        let hdr: Vec<usize> = header
            .trim()
            .split(',')
            .map(|s| s.trim().parse::<usize>().map_err(|_| Error::param("bad gmm header")))
            .collect::<Result<_>>()?;
        if hdr.len() != 2 {
            return Err(Error::param("gmm header must be K,n"));
        }
        let (k, n) = (hdr[0], hdr[1]);
        let mut parse_row = |what: &str| -> Result<Vec<f64>> {
            let line = lines
                .next()
                .ok_or_else(|| Error::param(format!("gmm file truncated at {what}")))??;
            line.trim()
                .split(',')
                .map(|s| {
                    s.trim().parse::<f64>().map_err(|_| Error::param(format!("bad {what} entry")))
                })
                .collect()
        };
        let weights = parse_row("weights")?;
        let mut means = Vec::with_capacity(k);
        for i in 0..k {
            let m = parse_row(&format!("mean {i}"))?;
            if m.len() != n {
                return Err(Error::shape("gmm mean length != n"));
            }
            means.push(m);
        }
        let variances = parse_row("variances")?;
        GmmPrior::new(weights, means, variances)
    }
}

/// Mixture with component means `a mu_k` and isotropic variances `vars[k]`.
/// Shared by the diffusion marginals (`a = sqrt(abar_t)`) and the flow
/// interpolation marginals (`a = t`).
struct ScaledMixture<'a> {
    prior: &'a GmmPrior,
    a: f64,
    vars: Vec<f64>,
}

impl ScaledMixture<'_> {
    fn k(&self) -> usize {
        self.prior.n_components()
    }

    fn log_comp(&self, x: &[f64], k: usize) -> f64 {
        let n = x.len() as f64;
        let v = self.vars[k];
        let mut sq = 0.0;
        for (xi, mi) in x.iter().zip(&self.prior.means[k]) {
            let d = xi - self.a * mi;
            sq += d * d;
        }
        self.prior.weights[k].max(RESP_CLAMP).ln()
            - 0.5 * n * (2.0 * std::f64::consts::PI * v).ln()
            - 0.5 * sq / v
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let logs: Vec<f64> = (0..self.k()).map(|k| self.log_comp(x, k)).collect();
        log_sum_exp(&logs)
    }

    /// Posterior component probabilities, clamped before normalization.
    fn responsibilities(&self, x: &[f64]) -> Vec<f64> {
        let logs: Vec<f64> = (0..self.k()).map(|k| self.log_comp(x, k)).collect();
        let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut r: Vec<f64> = logs.iter().map(|l| (l - m).exp().max(RESP_CLAMP)).collect();
        let sum: f64 = r.iter().sum();
        r.iter_mut().for_each(|v| *v /= sum);
        r
    }

    /// `grad log p(x) = sum_k r_k (a mu_k - x) / v_k`.
    fn score(&self, x: &[f64]) -> Vec<f64> {
        let r = self.responsibilities(x);
        let mut out = vec![0.0; x.len()];
        for k in 0..self.k() {
            let c = r[k] / self.vars[k];
            for (o, (xi, mi)) in out.iter_mut().zip(x.iter().zip(&self.prior.means[k])) {
                *o += c * (self.a * mi - xi);
            }
        }
        out
    }

    /// `E[X1 | X_t = x] = sum_k r_k (mu_k + c_k (x - a mu_k))` with
    /// `c_k = a s_k^2 / v_k`.
    fn cond_mean(&self, x: &[f64]) -> Vec<f64> {
        let r = self.responsibilities(x);
        let mut out = vec![0.0; x.len()];
        for k in 0..self.k() {
            let c = self.a * self.prior.variances[k] / self.vars[k];
            for (o, (xi, mi)) in out.iter_mut().zip(x.iter().zip(&self.prior.means[k])) {
                *o += r[k] * (mi + c * (xi - self.a * mi));
            }
        }
        out
    }

    /// Per-component Gaussian log-gradients `g_k = (a mu_k - x) / v_k` and
    /// their responsibility-weighted mean; the building blocks of every JVP.
    fn grads(&self, x: &[f64], r: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut gs = Vec::with_capacity(self.k());
        let mut gbar = vec![0.0; x.len()];
        for k in 0..self.k() {
            let g: Vec<f64> = x
                .iter()
                .zip(&self.prior.means[k])
                .map(|(xi, mi)| (self.a * mi - xi) / self.vars[k])
                .collect();
            for (b, gi) in gbar.iter_mut().zip(&g) {
                *b += r[k] * gi;
            }
            gs.push(g);
        }
        (gs, gbar)
    }

    /// Exact JVP of [`ScaledMixture::cond_mean`]:
    /// `J v = (sum_k r_k c_k) v + sum_k r_k ((g_k - gbar) . v) m_k(x)`.
    fn cond_mean_jvp(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        let r = self.responsibilities(x);
        let (gs, gbar) = self.grads(x, &r);
        let mut out = vec![0.0; x.len()];
        let mut diag = 0.0;
        for k in 0..self.k() {
            let c = self.a * self.prior.variances[k] / self.vars[k];
            diag += r[k] * c;
            let dir: f64 =
                gs[k].iter().zip(&gbar).zip(v).map(|((g, b), vi)| (g - b) * vi).sum();
            let w = r[k] * dir;
            if w != 0.0 {
                for (o, (xi, mi)) in out.iter_mut().zip(x.iter().zip(&self.prior.means[k])) {
                    *o += w * (mi + c * (xi - self.a * mi));
                }
            }
        }
        for (o, vi) in out.iter_mut().zip(v) {
            *o += diag * vi;
        }
        out
    }

    /// Exact JVP of [`ScaledMixture::score`]:
    /// `J v = -(sum_k r_k / v_k) v + sum_k r_k ((g_k - gbar) . v) g_k`.
    fn score_jvp(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        let r = self.responsibilities(x);
        let (gs, gbar) = self.grads(x, &r);
        let mut out = vec![0.0; x.len()];
        let mut diag = 0.0;
        for k in 0..self.k() {
            diag -= r[k] / self.vars[k];
            let dir: f64 =
                gs[k].iter().zip(&gbar).zip(v).map(|((g, b), vi)| (g - b) * vi).sum();
            let w = r[k] * dir;
            if w != 0.0 {
                for (o, g) in out.iter_mut().zip(&gs[k]) {
                    *o += w * g;
                }
            }
        }
        for (o, vi) in out.iter_mut().zip(v) {
            *o += diag * vi;
        }
        out
    }
}

fn log_sum_exp(logs: &[f64]) -> f64 {
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + logs.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
}

fn join_row(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// DDPM-style noise schedule tables.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t` for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    /// `abar_t` with the convention `abar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }
}

/// Linear beta schedule from `beta_first` to `beta_last` over `t_steps` steps.
pub fn make_schedule(t_steps: usize, beta_first: f64, beta_last: f64) -> Result<DiffusionSchedule> {
    if t_steps == 0 {
        return Err(Error::param("schedule needs at least one step"));
    }
    if !(beta_first > 0.0 && beta_first <= beta_last && beta_last < 1.0) {
        return Err(Error::param("need 0 < beta_first <= beta_last < 1"));
    }
    let betas: Vec<f64> = if t_steps == 1 {
        vec![beta_first]
    } else {
        (0..t_steps)
            .map(|i| beta_first + (beta_last - beta_first) * i as f64 / (t_steps - 1) as f64)
            .collect()
    };
    let mut alpha_bars = Vec::with_capacity(t_steps);
    let mut prod = 1.0;
    for &b in &betas {
        prod *= 1.0 - b;
        alpha_bars.push(prod);
    }
    Ok(DiffusionSchedule { betas, alpha_bars })
}

/// A flow-matching prior: target `X1` distributed as the GMM, latent `X0`
/// standard normal, interpolation `X_t = (1-t) X0 + t X1`.
#[derive(Debug, Clone)]
pub struct FlowPrior {
    target: GmmPrior,
}

impl FlowPrior {
    pub fn new(target: GmmPrior) -> Self {
        FlowPrior { target }
    }

    pub fn target(&self) -> &GmmPrior {
        &self.target
    }

    /// Closed-form flow-matching velocity
    /// `v_t(x) = (E[X1 | X_t = x] - x) / (1 - t)` for `t in [0, 1)`.
    pub fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        if !(0.0..1.0).contains(&t) {
            return Err(Error::param(format!("flow velocity undefined at t={t}")));
        }
        let cm = self.target.flow_mixture(t).cond_mean(x);
        Ok(cm.iter().zip(x).map(|(c, xi)| (c - xi) / (1.0 - t)).collect())
    }

    /// `E[X1 | X_t = x]`, the rescaled denoiser `x + (1-t) v_t(x)`.
    pub fn cond_mean(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        if !(0.0..1.0).contains(&t) {
            return Err(Error::param(format!("flow conditional mean undefined at t={t}")));
        }
        Ok(self.target.flow_mixture(t).cond_mean(x))
    }
}

/// Result of an EM fit: the prior and the per-iteration log-likelihood trace.
#[derive(Debug, Clone)]
pub struct EmFit {
    pub prior: GmmPrior,
    pub log_likelihood: Vec<f64>,
}

/// Fits an isotropic GMM by expectation-maximization. Means are initialized
/// from `k` distinct samples drawn with the given seed; degenerate components
/// keep their mean and get a floored variance.
pub fn fit_gmm_em(samples: &[Vec<f64>], k: usize, iters: usize, seed: u64) -> Result<EmFit> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    if samples.is_empty() {
        return Err(Error::param("em: no samples"));
    }
    if k == 0 || samples.len() < k {
        return Err(Error::param("em: need at least k samples"));
    }
    let n = samples[0].len();
    if samples.iter().any(|s| s.len() != n) {
        return Err(Error::shape("em: inconsistent sample dimensions"));
    }
    let n_samples = samples.len();

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n_samples).collect();
    idx.shuffle(&mut rng);
    let mut means: Vec<Vec<f64>> = idx[..k].iter().map(|&i| samples[i].clone()).collect();

    // Global spread as the initial isotropic variance.
    let mut gmean = vec![0.0; n];
    for s in samples {
        for (g, v) in gmean.iter_mut().zip(s) {
            *g += v / n_samples as f64;
        }
    }
    let spread = samples
        .iter()
        .map(|s| s.iter().zip(&gmean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum::<f64>()
        / (n_samples * n) as f64;
    let mut vars = vec![spread.max(EM_VAR_FLOOR); k];
    let mut weights = vec![1.0 / k as f64; k];

    let mut ll_trace = Vec::with_capacity(iters);
    let mut resp = vec![0.0; n_samples * k];
    for _ in 0..iters {
        // E-step.
        let mut ll = 0.0;
        for (i, s) in samples.iter().enumerate() {
            let logs: Vec<f64> = (0..k)
                .map(|j| {
                    let mut sq = 0.0;
                    for (a, b) in s.iter().zip(&means[j]) {
                        sq += (a - b) * (a - b);
                    }
                    weights[j].max(RESP_CLAMP).ln()
                        - 0.5 * n as f64 * (2.0 * std::f64::consts::PI * vars[j]).ln()
                        - 0.5 * sq / vars[j]
                })
                .collect();
            let lz = log_sum_exp(&logs);
            ll += lz;
            for j in 0..k {
                resp[i * k + j] = (logs[j] - lz).exp().max(RESP_CLAMP);
            }
            let rsum: f64 = resp[i * k..(i + 1) * k].iter().sum();
            for j in 0..k {
                resp[i * k + j] /= rsum;
            }
        }
        ll_trace.push(ll);

        // M-step.
        for j in 0..k {
            let nk: f64 = (0..n_samples).map(|i| resp[i * k + j]).sum();
            weights[j] = nk / n_samples as f64;
            if nk <= 1e-12 {
                vars[j] = EM_VAR_FLOOR;
                continue;
            }
            let mut mu = vec![0.0; n];
            for (i, s) in samples.iter().enumerate() {
                let r = resp[i * k + j];
                for (m, v) in mu.iter_mut().zip(s) {
                    *m += r * v;
                }
            }
            mu.iter_mut().for_each(|m| *m /= nk);
            let mut sq = 0.0;
            for (i, s) in samples.iter().enumerate() {
                let r = resp[i * k + j];
                sq += r * s.iter().zip(&mu).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
            means[j] = mu;
            vars[j] = (sq / (nk * n as f64)).max(EM_VAR_FLOOR);
        }
        let wsum: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= wsum);
    }

    Ok(EmFit { prior: GmmPrior::new(weights, means, vars)?, log_likelihood: ll_trace })
}

/// Sampling ranges for the synthetic ellipse scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct EllipseSceneParams {
    pub max_ellipses: usize,
    pub image_size: usize,
    /// Additive intensity per ellipse.
    pub intensity_range: (f64, f64),
    /// Minor/major axis ratio.
    pub eccentricity_range: (f64, f64),
    /// Semi-major axis as a fraction of the image size.
    pub axis_frac_range: (f64, f64),
}

impl EllipseSceneParams {
    pub fn new(image_size: usize) -> Self {
        EllipseSceneParams {
            max_ellipses: 70,
            image_size,
            intensity_range: (0.1, 1.0),
            eccentricity_range: (0.2, 1.0),
            axis_frac_range: (0.05, 0.4),
        }
    }
}

/// Superimposes a random number of filled ellipses (uniform in
/// `[0, max_ellipses]`), clips to `[0,1]`. Centers are constrained to the
/// circle inscribed in the image square.
pub fn generate_ellipse_image<R: Rng>(params: &EllipseSceneParams, rng: &mut R) -> Image {
    let size = params.image_size;
    let mut data = vec![0.0; size * size];
    let c = (size as f64 - 1.0) / 2.0;
    let rmax = size as f64 / 2.0;
    let count = rng.gen_range(0..=params.max_ellipses);
    for _ in 0..count {
        // Uniform over the inscribed disk via the sqrt trick.
        let rad = rmax * rng.gen::<f64>().sqrt();
        let phi = rng.gen::<f64>() * 2.0 * std::f64::consts::PI;
        let (cx, cy) = (c + rad * phi.cos(), c + rad * phi.sin());
        let theta = rng.gen::<f64>() * std::f64::consts::PI;
        let value = rng.gen_range(params.intensity_range.0..params.intensity_range.1);
        let ecc = rng.gen_range(params.eccentricity_range.0..params.eccentricity_range.1);
        let a = rng.gen_range(params.axis_frac_range.0..params.axis_frac_range.1) * size as f64;
        let b = ecc * a;
        let (sin, cos) = theta.sin_cos();

        let reach = a.max(b) + 1.0;
        let r0 = ((cy - reach).floor().max(0.0)) as usize;
        let r1 = ((cy + reach).ceil().min(size as f64 - 1.0)) as usize;
        let c0 = ((cx - reach).floor().max(0.0)) as usize;
        let c1 = ((cx + reach).ceil().min(size as f64 - 1.0)) as usize;
        for row in r0..=r1 {
            for col in c0..=c1 {
                let dx = col as f64 - cx;
                let dy = row as f64 - cy;
                let u = dx * cos + dy * sin;
                let w = -dx * sin + dy * cos;
                if (u / a) * (u / a) + (w / b) * (w / b) <= 1.0 {
                    data[row * size + col] += value;
                }
            }
        }
    }
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Image::new(size, size, data).expect("ellipse image is finite by construction")
}
