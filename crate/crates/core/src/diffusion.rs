//! Diffusion-based inverse-problem solvers driven by the analytic
//! mixture noise-prediction model: unconditional DDPM/DDIM sampling, guidance
//! (DPS), half-quadratic plug-and-play (DiffPIR), variational regularization
//! by denoising (RED-diff), and latent-space optimization (DMPlug).

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linops::LinearOperator;
use crate::priors::{DiffusionSchedule, GmmPrior};
use crate::variational::prox_data_approx;

/// Noise-prediction model: the analytic stand-in for a trained network,
/// backed by a mixture prior and a noise schedule.
#[derive(Debug, Clone, Copy)]
pub struct EpsModel<'a> {
    prior: &'a GmmPrior,
    schedule: &'a DiffusionSchedule,
}

impl<'a> EpsModel<'a> {
    pub fn new(prior: &'a GmmPrior, schedule: &'a DiffusionSchedule) -> Self {
        EpsModel { prior, schedule }
    }

    pub fn dim(&self) -> usize {
        self.prior.dim()
    }

    pub fn t_max(&self) -> usize {
        self.schedule.t_max()
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        self.schedule
    }

    pub fn prior(&self) -> &GmmPrior {
        self.prior
    }

    pub fn eps(&self, x: &[f64], t: usize) -> Vec<f64> {
        self.prior.eps_model(self.schedule, x, t)
    }

    pub fn eps_jvp(&self, x: &[f64], t: usize, v: &[f64]) -> Vec<f64> {
        self.prior.eps_jvp(self.schedule, x, t, v)
    }

    pub fn posterior_mean(&self, x: &[f64], t: usize) -> Vec<f64> {
        self.prior.posterior_mean(self.schedule, x, t)
    }

    pub fn posterior_mean_jvp(&self, x: &[f64], t: usize, v: &[f64]) -> Vec<f64> {
        self.prior.posterior_mean_jvp(self.schedule, x, t, v)
    }
}

/// Guidance-based posterior sampling.
#[derive(Debug, Clone)]
pub struct DpsConfig {
    /// Guidance scale; the per-step size is `guidance / ||y - A xhat||`.
    pub guidance: f64,
    pub steps: usize,
}

impl Default for DpsConfig {
    fn default() -> Self {
        DpsConfig { guidance: 1.0, steps: 1000 }
    }
}

/// Which weight the data proximal subproblem uses.
///
/// The two published forms disagree by a square root; both are provided and
/// `EqForm` is the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RhoRule {
    /// `rho_t = lambda sigma_y^2 abar_t / (1 - abar_t)`
    EqForm,
    /// `rho_t = lambda sigma_y^2 / sqrt((1 - abar_t) / abar_t)`
    AlgForm,
}

#[derive(Debug, Clone)]
pub struct DiffPirConfig {
    pub lambda: f64,
    /// Stochasticity of the noise re-injection, in `[0, 1]`.
    pub zeta: f64,
    pub steps: usize,
    pub sigma_y: f64,
    pub rho_rule: RhoRule,
    /// Iteration budget for the inner data-proximal CG. The subproblem is run
    /// best-effort, matching the few-step CG prescription of the scheme; at
    /// early timesteps `rho_t` is tiny and an exact solve of the then nearly
    /// unregularized system is neither reachable nor needed.
    pub cg_iters: usize,
}

impl Default for DiffPirConfig {
    fn default() -> Self {
        DiffPirConfig {
            lambda: 1.0,
            zeta: 0.7,
            steps: 1000,
            sigma_y: 0.01,
            rho_rule: RhoRule::EqForm,
            cg_iters: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RedDiffConfig {
    /// Data term scale.
    pub data_weight: f64,
    /// Regularization strength; the per-step weight is
    /// `reg_weight * sqrt((1 - abar_t) / abar_t)`.
    pub reg_weight: f64,
    pub step_size: f64,
    pub steps: usize,
}

impl Default for RedDiffConfig {
    fn default() -> Self {
        RedDiffConfig { data_weight: 1.0, reg_weight: 0.01, step_size: 0.05, steps: 1000 }
    }
}

#[derive(Debug, Clone)]
pub struct DmPlugConfig {
    /// Unrolled deterministic sampling steps inside the generator.
    pub unrolled_steps: usize,
    pub step_size: f64,
    pub max_grad_steps: usize,
    /// Window length for the iterate-variance early stop.
    pub es_window: usize,
    /// Stop after this many consecutive steps without a new variance minimum.
    pub es_patience: usize,
}

impl Default for DmPlugConfig {
    fn default() -> Self {
        DmPlugConfig {
            unrolled_steps: 4,
            step_size: 0.01,
            max_grad_steps: 1500,
            es_window: 50,
            es_patience: 100,
        }
    }
}

/// Bias-corrected Adam state.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_stab: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], step: 0, beta1: 0.9, beta2: 0.999, eps_stab: 1e-8 }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Advances the moments and returns the additive update
    /// `-step_size * mhat / (sqrt(vhat) + eps_stab)`.
    pub fn step(&mut self, grad: &[f64], step_size: f64) -> Vec<f64> {
        assert_eq!(grad.len(), self.m.len(), "adam: gradient shape mismatch");
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        let mut update = vec![0.0; grad.len()];
        for i in 0..grad.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            update[i] = -step_size * mhat / (vhat.sqrt() + self.eps_stab);
        }
        update
    }
}

/// Descending timestep ladder `[t_max, ..., 0]` with `k+1` entries.
pub(crate) fn timesteps_down(t_max: usize, k: usize) -> Vec<usize> {
    let k = k.clamp(1, t_max);
    (0..=k)
        .map(|j| ((t_max as f64) * (k - j) as f64 / k as f64).round() as usize)
        .collect()
}

/// Coefficients of one reverse DDPM step from `t` to `prev`. Consecutive
/// steps reuse the schedule's own `alpha_t`/`beta_t` so full-schedule runs are
/// bit-reproducible; respaced steps fall back to the `abar` ratio.
fn ddpm_step_coeffs(sch: &DiffusionSchedule, t: usize, prev: usize) -> (f64, f64) {
    if prev + 1 == t {
        (sch.alpha(t), sch.beta(t))
    } else {
        let alpha_eff = sch.alpha_bar(t) / sch.alpha_bar(prev);
        (alpha_eff, 1.0 - alpha_eff)
    }
}

fn draw_standard_normal<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Unconditional ancestral sampling: the reverse recursion from
/// `x_T ~ N(0, I)` down to `x_0`, injecting `sqrt(beta_t)`-scaled noise at
/// every step.
pub fn ddpm_sample<R: Rng>(model: &EpsModel, rng: &mut R) -> Vec<f64> {
    let n = model.dim();
    let mut x = draw_standard_normal(rng, n);
    for t in (1..=model.t_max()).rev() {
        let noise = draw_standard_normal(rng, n);
        x = ddpm_reverse_step(model, &x, t, t - 1, &noise, None);
    }
    x
}

/// One reverse step; `guidance` is subtracted after the unconditional update.
fn ddpm_reverse_step(
    model: &EpsModel,
    x: &[f64],
    t: usize,
    prev: usize,
    noise: &[f64],
    guidance: Option<(&[f64], f64)>,
) -> Vec<f64> {
    let sch = model.schedule();
    let (alpha, beta) = ddpm_step_coeffs(sch, t, prev);
    let abar = sch.alpha_bar(t);
    let eps = model.eps(x, t);
    let c_eps = beta / (1.0 - abar).sqrt();
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let sqrt_beta = beta.sqrt();
    let mut out: Vec<f64> = (0..x.len())
        .map(|i| inv_sqrt_alpha * (x[i] - c_eps * eps[i]) + sqrt_beta * noise[i])
        .collect();
    if let Some((grad, step)) = guidance {
        for (o, g) in out.iter_mut().zip(grad) {
            *o -= step * g;
        }
    }
    out
}

/// Deterministic DDIM generator `G(z)` over `k_steps` evenly spaced
/// timesteps. Differentiable through the analytic model's JVPs.
pub fn ddim_generate(z: &[f64], model: &EpsModel, k_steps: usize) -> Vec<f64> {
    ddim_generate_with_trajectory(z, model, k_steps).0
}

/// Same as [`ddim_generate`] but keeps the input of every step, which the
/// transpose sweep needs.
pub fn ddim_generate_with_trajectory(
    z: &[f64],
    model: &EpsModel,
    k_steps: usize,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let taus = timesteps_down(model.t_max(), k_steps);
    let sch = model.schedule();
    let mut x = z.to_vec();
    let mut traj = Vec::with_capacity(taus.len() - 1);
    for j in 0..taus.len() - 1 {
        let (t, next) = (taus[j], taus[j + 1]);
        traj.push(x.clone());
        let abar_t = sch.alpha_bar(t);
        let abar_n = sch.alpha_bar(next);
        let eps = model.eps(&x, t);
        x = (0..x.len())
            .map(|i| {
                let xhat = (x[i] - (1.0 - abar_t).sqrt() * eps[i]) / abar_t.sqrt();
                abar_n.sqrt() * xhat + (1.0 - abar_n).sqrt() * eps[i]
            })
            .collect();
    }
    (x, traj)
}

/// JVP of one DDIM step evaluated at the stored step input.
fn ddim_step_jvp(model: &EpsModel, x: &[f64], t: usize, next: usize, v: &[f64]) -> Vec<f64> {
    let sch = model.schedule();
    let abar_t = sch.alpha_bar(t);
    let abar_n = sch.alpha_bar(next);
    let jeps = model.eps_jvp(x, t, v);
    (0..x.len())
        .map(|i| {
            let jhat = (v[i] - (1.0 - abar_t).sqrt() * jeps[i]) / abar_t.sqrt();
            abar_n.sqrt() * jhat + (1.0 - abar_n).sqrt() * jeps[i]
        })
        .collect()
}

/// JVP of the full generator `G` along `v`, via the stored trajectory.
pub fn ddim_jvp(model: &EpsModel, traj: &[Vec<f64>], k_steps: usize, v: &[f64]) -> Vec<f64> {
    let taus = timesteps_down(model.t_max(), k_steps);
    let mut w = v.to_vec();
    for j in 0..taus.len() - 1 {
        w = ddim_step_jvp(model, &traj[j], taus[j], taus[j + 1], &w);
    }
    w
}

/// Transpose-Jacobian product `G'(z)^T w`. Every step Jacobian is a linear
/// combination of the identity and the model's eps Jacobian, which is a
/// scaled log-density Hessian and therefore symmetric; the transpose chain is
/// the same step-JVPs applied in reverse order.
pub fn ddim_vjp(model: &EpsModel, traj: &[Vec<f64>], k_steps: usize, w: &[f64]) -> Vec<f64> {
    let taus = timesteps_down(model.t_max(), k_steps);
    let mut u = w.to_vec();
    for j in (0..taus.len() - 1).rev() {
        u = ddim_step_jvp(model, &traj[j], taus[j], taus[j + 1], &u);
    }
    u
}

/// Diffusion posterior sampling: the reverse recursion plus a likelihood
/// descent step `-gamma_t grad ||y - A xhat_t||^2`, with the gradient taken
/// through the exact posterior-mean Jacobian.
pub fn dps<R: Rng>(
    y: &[f64],
    a: &LinearOperator,
    sigma_y: f64,
    model: &EpsModel,
    cfg: &DpsConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if sigma_y < 0.0 {
        return Err(Error::param("dps: sigma_y must be non-negative"));
    }
    if cfg.guidance < 0.0 {
        return Err(Error::param("dps: guidance must be non-negative"));
    }
    if y.len() != a.out_len() || a.in_len() != model.dim() {
        return Err(Error::shape("dps: operator/model shapes disagree"));
    }
    let n = model.dim();
    let taus = timesteps_down(model.t_max(), cfg.steps);
    let mut x = draw_standard_normal(rng, n);
    for j in 0..taus.len() - 1 {
        let (t, prev) = (taus[j], taus[j + 1]);
        let xhat = model.posterior_mean(&x, t);
        let ax = a.apply(&xhat)?;
        let resid: Vec<f64> = y.iter().zip(&ax).map(|(yi, ai)| yi - ai).collect();
        // grad_x ||y - A xhat(x)||^2 = -2 J^T A^T (y - A xhat); J symmetric.
        let atr = a.adjoint(&resid)?;
        let mut grad = model.posterior_mean_jvp(&x, t, &atr);
        grad.iter_mut().for_each(|g| *g *= -2.0);
        let resid_norm = resid.iter().map(|r| r * r).sum::<f64>().sqrt();
        let gamma_t = cfg.guidance / resid_norm.max(1e-12);
        let noise = draw_standard_normal(rng, n);
        x = ddpm_reverse_step(model, &x, t, prev, &noise, Some((&grad, gamma_t)));
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged(format!("dps: non-finite iterate at t={t}")));
        }
    }
    Ok(x)
}

/// Noise re-injection of the plug-and-play scheme: moves the data-consistent
/// estimate back onto the diffusion manifold at the previous level, mixing
/// the effective noise with fresh noise by `zeta`.
pub(crate) fn diffpir_reinject(
    xhat: &[f64],
    eps_eff: &[f64],
    eps_rand: &[f64],
    abar_prev: f64,
    zeta: f64,
) -> Vec<f64> {
    let a = abar_prev.sqrt();
    let b = (1.0 - abar_prev).sqrt();
    let w_eff = (1.0 - zeta).sqrt();
    let w_rand = zeta.sqrt();
    (0..xhat.len())
        .map(|i| a * xhat[i] + b * (w_eff * eps_eff[i] + w_rand * eps_rand[i]))
        .collect()
}

/// DiffPIR: alternates Tweedie denoising, the data proximal subproblem with
/// weight `rho_t`, and noise re-injection.
pub fn diffpir<R: Rng>(
    y: &[f64],
    a: &LinearOperator,
    model: &EpsModel,
    cfg: &DiffPirConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if cfg.sigma_y <= 0.0 {
        return Err(Error::param("diffpir: sigma_y must be positive for the rho rule"));
    }
    if !(0.0..=1.0).contains(&cfg.zeta) {
        return Err(Error::param("diffpir: zeta must be in [0,1]"));
    }
    if cfg.lambda <= 0.0 {
        return Err(Error::param("diffpir: lambda must be positive"));
    }
    if y.len() != a.out_len() || a.in_len() != model.dim() {
        return Err(Error::shape("diffpir: operator/model shapes disagree"));
    }
    let n = model.dim();
    let sch = model.schedule();
    let taus = timesteps_down(model.t_max(), cfg.steps);
    let mut x = draw_standard_normal(rng, n);
    for j in 0..taus.len() - 1 {
        let (t, prev) = (taus[j], taus[j + 1]);
        let abar = sch.alpha_bar(t);
        let snr2 = (1.0 - abar) / abar;
        let rho = match cfg.rho_rule {
            RhoRule::EqForm => cfg.lambda * cfg.sigma_y * cfg.sigma_y / snr2,
            RhoRule::AlgForm => cfg.lambda * cfg.sigma_y * cfg.sigma_y / snr2.sqrt(),
        };
        let p_t = model.posterior_mean(&x, t);
        // argmin ||Ax - y||^2 + rho ||x - p_t||^2 == prox with gamma = 1/rho.
        let xhat = prox_data_approx(&p_t, a, y, 1.0 / rho, 1e-8, cfg.cg_iters)?;
        let eps_eff: Vec<f64> = (0..n)
            .map(|i| (x[i] - abar.sqrt() * xhat[i]) / (1.0 - abar).sqrt())
            .collect();
        let eps_rand = draw_standard_normal(rng, n);
        x = diffpir_reinject(&xhat, &eps_eff, &eps_rand, sch.alpha_bar(prev), cfg.zeta);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged(format!("diffpir: non-finite iterate at t={t}")));
        }
    }
    Ok(x)
}

/// RED-diff: Adam on the data term plus the annealed denoising-residual
/// regularizer; the score term carries stop-gradient semantics, so each step
/// only adds `lambda_t (eps_theta(z_t, t) - eps)` to the gradient.
pub fn reddiff<R: Rng>(
    y: &[f64],
    a: &LinearOperator,
    model: &EpsModel,
    cfg: &RedDiffConfig,
    x_init: &[f64],
    rng: &mut R,
) -> Result<Vec<f64>> {
    if cfg.step_size <= 0.0 {
        return Err(Error::param("reddiff: step size must be positive"));
    }
    if x_init.len() != model.dim() || y.len() != a.out_len() || a.in_len() != model.dim() {
        return Err(Error::shape("reddiff: shapes disagree"));
    }
    let n = model.dim();
    let sch = model.schedule();
    let taus = timesteps_down(model.t_max(), cfg.steps);
    let mut x = x_init.to_vec();
    let mut adam = AdamState::new(n);
    for &t in taus.iter().take_while(|&&t| t >= 1) {
        let abar = sch.alpha_bar(t);
        let lambda_t = cfg.reg_weight * ((1.0 - abar) / abar).sqrt();
        let eps = draw_standard_normal(rng, n);
        let z_t: Vec<f64> =
            (0..n).map(|i| abar.sqrt() * x[i] + (1.0 - abar).sqrt() * eps[i]).collect();
        let eps_pred = model.eps(&z_t, t);
        let ax = a.apply(&x)?;
        let resid: Vec<f64> = ax.iter().zip(y).map(|(p, q)| p - q).collect();
        let atr = a.adjoint(&resid)?;
        let grad: Vec<f64> = (0..n)
            .map(|i| cfg.data_weight * atr[i] + lambda_t * (eps_pred[i] - eps[i]))
            .collect();
        let update = adam.step(&grad, cfg.step_size);
        for (xi, u) in x.iter_mut().zip(&update) {
            *xi += u;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged(format!("reddiff: non-finite iterate at t={t}")));
        }
    }
    Ok(x)
}

/// DMPlug output: the reconstruction at the early-stop point plus the loss
/// trace for inspection.
#[derive(Debug, Clone)]
pub struct DmPlugResult {
    pub x: Vec<f64>,
    pub loss_trace: Vec<f64>,
    pub stopped_at: usize,
}

/// DMPlug: Adam over the latent code of the unrolled deterministic generator,
/// minimizing `||A G(z) - y||^2`, with windowed-variance early stopping.
pub fn dmplug<R: Rng>(
    y: &[f64],
    a: &LinearOperator,
    model: &EpsModel,
    cfg: &DmPlugConfig,
    rng: &mut R,
) -> Result<DmPlugResult> {
    if cfg.unrolled_steps == 0 {
        return Err(Error::param("dmplug: need at least one unrolled step"));
    }
    if y.len() != a.out_len() || a.in_len() != model.dim() {
        return Err(Error::shape("dmplug: shapes disagree"));
    }
    let n = model.dim();
    let mut z = draw_standard_normal(rng, n);
    let mut adam = AdamState::new(n);
    let mut loss_trace = Vec::with_capacity(cfg.max_grad_steps);
    let mut window: std::collections::VecDeque<Vec<f64>> =
        std::collections::VecDeque::with_capacity(cfg.es_window);
    let mut best_var = f64::INFINITY;
    let mut best_x: Option<Vec<f64>> = None;
    let mut stale = 0usize;
    let mut stopped_at = 0usize;
    let mut last_x = vec![0.0; n];

    for iter in 0..cfg.max_grad_steps {
        let (x0, traj) = ddim_generate_with_trajectory(&z, model, cfg.unrolled_steps);
        let ax = a.apply(&x0)?;
        let resid: Vec<f64> = ax.iter().zip(y).map(|(p, q)| p - q).collect();
        let loss: f64 = resid.iter().map(|r| r * r).sum();
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("dmplug: non-finite loss at step {iter}")));
        }
        loss_trace.push(loss);
        last_x = x0.clone();
        stopped_at = iter;

        if cfg.es_window > 0 {
            if window.len() == cfg.es_window {
                window.pop_front();
            }
            window.push_back(x0.clone());
            if window.len() == cfg.es_window {
                let var = window_variance(&window);
                if var < best_var {
                    best_var = var;
                    best_x = Some(x0.clone());
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= cfg.es_patience {
                        break;
                    }
                }
            }
        }

        let mut grad_x = a.adjoint(&resid)?;
        grad_x.iter_mut().for_each(|g| *g *= 2.0);
        let grad_z = ddim_vjp(model, &traj, cfg.unrolled_steps, &grad_x);
        let update = adam.step(&grad_z, cfg.step_size);
        for (zi, u) in z.iter_mut().zip(&update) {
            *zi += u;
        }
    }

    Ok(DmPlugResult { x: best_x.unwrap_or(last_x), loss_trace, stopped_at })
}

/// Mean squared deviation of the window members from their mean.
fn window_variance(window: &std::collections::VecDeque<Vec<f64>>) -> f64 {
    let n = window[0].len();
    let w = window.len() as f64;
    let mut mean = vec![0.0; n];
    for x in window {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v / w;
        }
    }
    window
        .iter()
        .map(|x| x.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum::<f64>()
        / w
}
