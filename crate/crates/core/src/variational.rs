//! Solvers for the variational reconstruction problem
//! `min_x 0.5 ||Ax - y||^2 + lambda R(x)`:
//! isotropic TV via the Condat-Vu primal-dual scheme, smooth regularizers via
//! accelerated gradient descent with momentum restart, and the quadratic
//! data-term proximal map via conjugate gradient.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::linops::{op_norm, LinearOperator};
use crate::priors::GmmPrior;

pub const CG_DEFAULT_TOL: f64 = 1e-10;
pub const CG_DEFAULT_MAX_ITERS: usize = 500;

/// Regularizers with a closed-form value and gradient.
#[derive(Debug, Clone)]
pub enum Regularizer<'a> {
    /// `0.5 ||x||^2`
    TikhonovIdentity,
    /// `0.5 ||Dx||^2` with the forward-difference gradient on a `w x h` grid.
    TikhonovGradient { width: usize, height: usize },
    /// `-log p(x)` under an analytic mixture prior (smooth).
    GmmNegLog(&'a GmmPrior),
}

impl Regularizer<'_> {
    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            Regularizer::TikhonovIdentity => 0.5 * x.iter().map(|v| v * v).sum::<f64>(),
            Regularizer::TikhonovGradient { width, height } => {
                let (gx, gy) = grad2(x, *width, *height);
                0.5 * (gx.iter().map(|v| v * v).sum::<f64>()
                    + gy.iter().map(|v| v * v).sum::<f64>())
            }
            Regularizer::GmmNegLog(p) => -p.log_density(x),
        }
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Regularizer::TikhonovIdentity => x.to_vec(),
            Regularizer::TikhonovGradient { width, height } => {
                let (gx, gy) = grad2(x, *width, *height);
                grad2_transpose(&gx, &gy, *width, *height)
            }
            Regularizer::GmmNegLog(p) => {
                let mut g = p.score(x);
                g.iter_mut().for_each(|v| *v = -*v);
                g
            }
        }
    }

    /// Upper-bound hint on the gradient Lipschitz constant; backtracking in
    /// the solver copes with underestimates.
    fn lipschitz_hint(&self) -> f64 {
        match self {
            Regularizer::TikhonovIdentity => 1.0,
            Regularizer::TikhonovGradient { .. } => 8.0,
            Regularizer::GmmNegLog(p) => {
                1.0 / p.variances().iter().cloned().fold(f64::INFINITY, f64::min)
            }
        }
    }
}

/// Parameters for the Condat-Vu primal-dual TV solver.
#[derive(Debug, Clone)]
pub struct PdParams {
    pub max_iters: usize,
    pub rel_tol: f64,
    /// Primal step; `None` derives it from the operator norms.
    pub tau: Option<f64>,
    /// Dual step; `None` uses `1 / ||D||^2`.
    pub sigma: Option<f64>,
}

impl Default for PdParams {
    fn default() -> Self {
        PdParams { max_iters: 2000, rel_tol: 1e-6, tau: None, sigma: None }
    }
}

/// Parameters for the accelerated smooth solver.
#[derive(Debug, Clone)]
pub struct AgdParams {
    pub max_iters: usize,
    pub rel_tol: f64,
    /// Gradient Lipschitz estimate; `None` uses `||A||^2 + lambda * hint`.
    pub lipschitz: Option<f64>,
}

impl Default for AgdParams {
    fn default() -> Self {
        AgdParams { max_iters: 1000, rel_tol: 1e-8, lipschitz: None }
    }
}

/// One solver trace checkpoint.
#[derive(Debug, Clone, Copy)]
pub struct TraceRow {
    pub iter: usize,
    pub objective: f64,
    pub residual: f64,
}

/// Writes a solver trace as CSV (`iteration,objective,residual`).
pub fn write_trace_csv(path: &std::path::Path, trace: &[TraceRow]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "iteration,objective,residual")?;
    for row in trace {
        writeln!(f, "{},{},{}", row.iter, row.objective, row.residual)?;
    }
    Ok(())
}

/// Result of a conjugate-gradient solve.
#[derive(Debug, Clone)]
pub struct CgResult {
    pub x: Vec<f64>,
    pub iters: usize,
    pub rel_residual: f64,
    pub converged: bool,
}

/// Conjugate gradient for `M x = b` with `M` symmetric positive definite,
/// given as a closure. Stops at `||Mx - b|| <= tol ||b||` or `max_iters`.
pub fn cg_solve<F>(spd_apply: F, b: &[f64], x0: Option<&[f64]>, tol: f64, max_iters: usize) -> Result<CgResult>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let n = b.len();
    let b_norm = l2(b);
    if b_norm == 0.0 {
        return Ok(CgResult { x: vec![0.0; n], iters: 0, rel_residual: 0.0, converged: true });
    }
    let mut x = match x0 {
        Some(x0) => {
            if x0.len() != n {
                return Err(Error::shape("cg: x0 length mismatch"));
            }
            x0.to_vec()
        }
        None => vec![0.0; n],
    };
    let mx = spd_apply(&x);
    let mut r: Vec<f64> = b.iter().zip(&mx).map(|(bi, mi)| bi - mi).collect();
    let mut p = r.clone();
    let mut rs = dot(&r, &r);
    let mut iters = 0;
    if rs.sqrt() <= tol * b_norm {
        return Ok(CgResult { x, iters, rel_residual: rs.sqrt() / b_norm, converged: true });
    }
    for _ in 0..max_iters {
        let mp = spd_apply(&p);
        let pap = dot(&p, &mp);
        if !(pap > 0.0) {
            return Err(Error::CgFailure(format!(
                "zero curvature (p'Mp = {pap:e}) after {iters} iterations"
            )));
        }
        let alpha = rs / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * mp[i];
        }
        iters += 1;
        let rs_new = dot(&r, &r);
        if rs_new.sqrt() <= tol * b_norm {
            return Ok(CgResult { x, iters, rel_residual: rs_new.sqrt() / b_norm, converged: true });
        }
        let beta = rs_new / rs;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rs = rs_new;
    }
    Ok(CgResult { x, iters, rel_residual: rs.sqrt() / b_norm, converged: false })
}

/// Proximal map of `(gamma/2) ||A . - y||^2` at `z`:
/// solves `(A'A + I/gamma) x = A'y + z/gamma` by CG started at `z`.
/// `gamma = 0` returns `z` unchanged.
pub fn prox_data(z: &[f64], a: &LinearOperator, y: &[f64], gamma: f64) -> Result<Vec<f64>> {
    prox_data_with(z, a, y, gamma, CG_DEFAULT_TOL, CG_DEFAULT_MAX_ITERS)
}

pub fn prox_data_with(
    z: &[f64],
    a: &LinearOperator,
    y: &[f64],
    gamma: f64,
    tol: f64,
    max_iters: usize,
) -> Result<Vec<f64>> {
    let res = prox_data_cg(z, a, y, gamma, tol, max_iters)?;
    match res {
        ProxOutcome::Exact(x) => Ok(x),
        ProxOutcome::Truncated { rel_residual, iters, .. } => Err(Error::CgFailure(format!(
            "prox_data did not converge: rel residual {rel_residual:e} after {iters} iterations"
        ))),
    }
}

/// Best-effort variant for plug-and-play chains that intentionally run only a
/// few CG steps: the iterate is returned even when the tolerance was not
/// reached. Genuine breakdown (loss of positive curvature) still fails.
pub fn prox_data_approx(
    z: &[f64],
    a: &LinearOperator,
    y: &[f64],
    gamma: f64,
    tol: f64,
    max_iters: usize,
) -> Result<Vec<f64>> {
    Ok(match prox_data_cg(z, a, y, gamma, tol, max_iters)? {
        ProxOutcome::Exact(x) => x,
        ProxOutcome::Truncated { x, .. } => x,
    })
}

enum ProxOutcome {
    Exact(Vec<f64>),
    Truncated { x: Vec<f64>, rel_residual: f64, iters: usize },
}

fn prox_data_cg(
    z: &[f64],
    a: &LinearOperator,
    y: &[f64],
    gamma: f64,
    tol: f64,
    max_iters: usize,
) -> Result<ProxOutcome> {
    if gamma < 0.0 {
        return Err(Error::param("prox_data: gamma must be non-negative"));
    }
    if gamma == 0.0 {
        return Ok(ProxOutcome::Exact(z.to_vec()));
    }
    let aty = a.adjoint(y)?;
    let b: Vec<f64> = aty.iter().zip(z).map(|(ai, zi)| ai + zi / gamma).collect();
    let apply = |v: &[f64]| {
        let av = a.apply(v).expect("prox_data: shape invariant");
        let mut out = a.adjoint(&av).expect("prox_data: shape invariant");
        for (o, vi) in out.iter_mut().zip(v) {
            *o += vi / gamma;
        }
        out
    };
    let res = cg_solve(apply, &b, Some(z), tol, max_iters)?;
    if res.converged {
        Ok(ProxOutcome::Exact(res.x))
    } else {
        Ok(ProxOutcome::Truncated {
            x: res.x,
            rel_residual: res.rel_residual,
            iters: res.iters,
        })
    }
}

/// Isotropic total-variation reconstruction by the Condat-Vu primal-dual
/// scheme: `min_x 0.5 ||Ax - y||^2 + lambda ||Dx||_{2,1}` with the
/// forward-difference gradient `D` (Neumann boundary).
pub fn solve_tv(
    y: &[f64],
    a: &LinearOperator,
    lambda: f64,
    shape: (usize, usize),
    params: &PdParams,
) -> Result<Image> {
    Ok(solve_tv_traced(y, a, lambda, shape, params)?.0)
}

pub fn solve_tv_traced(
    y: &[f64],
    a: &LinearOperator,
    lambda: f64,
    shape: (usize, usize),
    params: &PdParams,
) -> Result<(Image, Vec<TraceRow>)> {
    let (width, height) = shape;
    let n = width * height;
    if a.in_len() != n {
        return Err(Error::shape("solve_tv: operator input does not match shape"));
    }
    if y.len() != a.out_len() {
        return Err(Error::shape("solve_tv: data length does not match operator"));
    }
    if lambda < 0.0 {
        return Err(Error::param("solve_tv: lambda must be non-negative"));
    }

    // ||D||^2 <= 8 for the 2-D forward-difference stencil.
    let d_norm_sq = 8.0;
    let a_norm = op_norm(a, 50, 0x7ad0);
    let sigma = params.sigma.unwrap_or(1.0 / d_norm_sq);
    // Condat-Vu condition 1/tau - sigma ||D||^2 >= ||A||^2 / 2 with margin 1.01.
    let tau = params
        .tau
        .unwrap_or(1.0 / (sigma * d_norm_sq + 1.01 * a_norm * a_norm / 2.0));

    let mut x = vec![0.0; n];
    let mut ux = vec![0.0; n];
    let mut uy = vec![0.0; n];
    let mut trace = Vec::new();

    let objective = |x: &[f64]| -> f64 {
        let ax = a.apply(x).expect("shape checked");
        let data: f64 = ax.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() * 0.5;
        let (gx, gy) = grad2(x, width, height);
        let tv: f64 = gx.iter().zip(&gy).map(|(p, q)| (p * p + q * q).sqrt()).sum();
        data + lambda * tv
    };

    for iter in 0..params.max_iters {
        // Primal: x+ = x - tau (A'(Ax - y) + D'u).
        let ax = a.apply(&x)?;
        let resid: Vec<f64> = ax.iter().zip(y).map(|(p, q)| p - q).collect();
        let grad_data = a.adjoint(&resid)?;
        let dtu = grad2_transpose(&ux, &uy, width, height);
        let x_new: Vec<f64> = (0..n).map(|i| x[i] - tau * (grad_data[i] + dtu[i])).collect();

        // Dual: u+ = proj_{|u_i| <= lambda}(u + sigma D(2x+ - x)).
        let xbar: Vec<f64> = (0..n).map(|i| 2.0 * x_new[i] - x[i]).collect();
        let (gx, gy) = grad2(&xbar, width, height);
        for i in 0..n {
            let px = ux[i] + sigma * gx[i];
            let py = uy[i] + sigma * gy[i];
            let norm = (px * px + py * py).sqrt();
            let scale = if norm > lambda { lambda / norm } else { 1.0 };
            ux[i] = px * scale;
            uy[i] = py * scale;
        }

        let delta = rel_change(&x_new, &x);
        x = x_new;

        if iter % 50 == 0 || delta <= params.rel_tol || iter + 1 == params.max_iters {
            let obj = objective(&x);
            if !obj.is_finite() {
                return Err(Error::Diverged(format!("solve_tv objective non-finite at iter {iter}")));
            }
            trace.push(TraceRow { iter, objective: obj, residual: delta });
        }
        if delta <= params.rel_tol {
            break;
        }
    }

    Ok((Image::new(width, height, x)?, trace))
}

/// Smooth variational reconstruction by accelerated gradient descent with
/// momentum restart on objective increase and backtracking on the Lipschitz
/// estimate. Monotone overall: the returned objective never exceeds the
/// initial one.
pub fn solve_smooth(
    y: &[f64],
    a: &LinearOperator,
    lambda: f64,
    reg: &Regularizer,
    params: &AgdParams,
    x_init: &[f64],
) -> Result<Image> {
    let n = a.in_len();
    if x_init.len() != n || y.len() != a.out_len() {
        return Err(Error::shape("solve_smooth: shape mismatch"));
    }
    if lambda < 0.0 {
        return Err(Error::param("solve_smooth: lambda must be non-negative"));
    }
    let shape = infer_shape(reg, n);

    let objective = |x: &[f64]| -> f64 {
        let ax = a.apply(x).expect("shape checked");
        0.5 * ax.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>()
            + lambda * reg.value(x)
    };
    let gradient = |x: &[f64]| -> Vec<f64> {
        let ax = a.apply(x).expect("shape checked");
        let resid: Vec<f64> = ax.iter().zip(y).map(|(p, q)| p - q).collect();
        let mut g = a.adjoint(&resid).expect("shape checked");
        if lambda > 0.0 {
            let rg = reg.grad(x);
            for (gi, ri) in g.iter_mut().zip(&rg) {
                *gi += lambda * ri;
            }
        }
        g
    };

    let a_norm = op_norm(a, 50, 0x7ad1);
    let mut lip = params
        .lipschitz
        .unwrap_or(a_norm * a_norm + lambda * reg.lipschitz_hint())
        .max(1e-12);

    let mut x = x_init.to_vec();
    let mut x_prev = x.clone();
    let mut f_x = objective(&x);
    if !f_x.is_finite() {
        return Err(Error::Diverged("solve_smooth: non-finite initial objective".into()));
    }
    let mut since_restart = 0usize;

    // Backtracked descent step from `base`: halving overshoots of 1/L until the
    // quadratic upper bound holds.
    let descend = |base: &[f64], g: &[f64], f_base: f64, lip: &mut f64| -> (Vec<f64>, f64) {
        loop {
            let cand: Vec<f64> = base.iter().zip(g).map(|(b, gi)| b - gi / *lip).collect();
            let f_cand = objective(&cand);
            let lin: f64 = g.iter().zip(cand.iter().zip(base)).map(|(gi, (c, b))| gi * (c - b)).sum();
            let quad: f64 =
                cand.iter().zip(base).map(|(c, b)| (c - b) * (c - b)).sum::<f64>() * *lip / 2.0;
            if f_cand.is_finite() && f_cand <= f_base + lin + quad + 1e-15 * f_base.abs() {
                return (cand, f_cand);
            }
            *lip *= 2.0;
            if *lip > 1e18 {
                return (base.to_vec(), f_base);
            }
        }
    };

    for _ in 0..params.max_iters {
        let mom = since_restart as f64 / (since_restart as f64 + 3.0);
        let yk: Vec<f64> =
            x.iter().zip(&x_prev).map(|(xi, pi)| xi + mom * (xi - pi)).collect();
        let g_y = gradient(&yk);
        let f_y = objective(&yk);
        if !f_y.is_finite() {
            return Err(Error::Diverged("solve_smooth: non-finite objective".into()));
        }
        let (mut x_new, mut f_new) = descend(&yk, &g_y, f_y, &mut lip);

        if f_new > f_x {
            // Objective increased: restart momentum, plain step from x.
            since_restart = 0;
            let g_x = gradient(&x);
            let (xr, fr) = descend(&x, &g_x, f_x, &mut lip);
            x_new = xr;
            f_new = fr;
        } else {
            since_restart += 1;
        }

        x_prev = x;
        x = x_new;
        f_x = f_new;

        let g_now = gradient(&x);
        let crit = l2(&g_now) / l2(&x).max(1.0);
        if crit <= params.rel_tol {
            break;
        }
    }

    Image::new(shape.0, shape.1, x)
}

fn infer_shape(reg: &Regularizer, n: usize) -> (usize, usize) {
    match reg {
        Regularizer::TikhonovGradient { width, height } => (*width, *height),
        _ => (n, 1),
    }
}

/// Forward differences with Neumann boundary: `gx[r,c] = x[r,c+1] - x[r,c]`
/// (zero on the last column), likewise `gy` on rows.
pub(crate) fn grad2(x: &[f64], width: usize, height: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; width * height];
    let mut gy = vec![0.0; width * height];
    for r in 0..height {
        for c in 0..width {
            let i = r * width + c;
            if c + 1 < width {
                gx[i] = x[i + 1] - x[i];
            }
            if r + 1 < height {
                gy[i] = x[i + width] - x[i];
            }
        }
    }
    (gx, gy)
}

/// Exact transpose of [`grad2`] (negative divergence).
pub(crate) fn grad2_transpose(gx: &[f64], gy: &[f64], width: usize, height: usize) -> Vec<f64> {
    let mut out = vec![0.0; width * height];
    for r in 0..height {
        for c in 0..width {
            let i = r * width + c;
            if c + 1 < width {
                out[i + 1] += gx[i];
                out[i] -= gx[i];
            }
            if r + 1 < height {
                out[i + width] += gy[i];
                out[i] -= gy[i];
            }
        }
    }
    out
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rel_change(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    num / l2(b).max(1.0)
}
