//! Shared test oracles. Everything here is independent of the library's
//! solver paths: direct algorithms, dense linear algebra, quadrature and
//! Monte Carlo estimators used to freeze expected values.

#![allow(dead_code)]

use invbench_core::linops::LinearOperator;

/// Exact 1-D total-variation denoising by the direct non-iterative taut-string
/// sweep: `argmin_x 0.5 ||x - y||^2 + lam * sum |x_{i+1} - x_i|`.
pub fn tv1d_exact(y: &[f64], lam: f64) -> Vec<f64> {
    let n = y.len();
    let mut out = vec![0.0; n];
    if n == 0 {
        return out;
    }
    if lam <= 0.0 || n == 1 {
        return y.to_vec();
    }
    let (mut k, mut k0, mut kplus, mut kminus) = (0usize, 0usize, 0usize, 0usize);
    let mut umin = lam;
    let mut umax = -lam;
    let mut vmin = y[0] - lam;
    let mut vmax = y[0] + lam;
    let twolam = 2.0 * lam;
    loop {
        while k == n - 1 {
            if umin < 0.0 {
                loop {
                    out[k0] = vmin;
                    k0 += 1;
                    if k0 > kminus {
                        break;
                    }
                }
                k = k0;
                kminus = k;
                vmin = y[kminus];
                umin = lam;
                umax = vmin + umin - vmax;
            } else if umax > 0.0 {
                loop {
                    out[k0] = vmax;
                    k0 += 1;
                    if k0 > kplus {
                        break;
                    }
                }
                k = k0;
                kplus = k;
                vmax = y[kplus];
                umax = -lam;
                umin = vmax + umax - vmin;
            } else {
                vmin += umin / (k - k0 + 1) as f64;
                loop {
                    out[k0] = vmin;
                    k0 += 1;
                    if k0 > k {
                        break;
                    }
                }
                return out;
            }
            if k == n {
                return out;
            }
        }
        umin += y[k + 1] - vmin;
        if umin < -lam {
            loop {
                out[k0] = vmin;
                k0 += 1;
                if k0 > kminus {
                    break;
                }
            }
            k = k0;
            kminus = k;
            kplus = k;
            vmin = y[k0];
            vmax = vmin + twolam;
            umin = lam;
            umax = -lam;
        } else {
            umax += y[k + 1] - vmax;
            if umax > lam {
                loop {
                    out[k0] = vmax;
                    k0 += 1;
                    if k0 > kplus {
                        break;
                    }
                }
                k = k0;
                kminus = k;
                kplus = k;
                vmax = y[k0];
                vmin = vmax - twolam;
                umin = lam;
                umax = -lam;
            } else {
                k += 1;
                if umin >= lam {
                    vmin += (umin - lam) / (k - k0 + 1) as f64;
                    umin = lam;
                    kminus = k;
                }
                if umax <= -lam {
                    vmax += (umax + lam) / (k - k0 + 1) as f64;
                    umax = -lam;
                    kplus = k;
                }
            }
        }
    }
}

/// Slow-but-sure reference for `tv1d_exact`: projected gradient on the dual
/// `min_u 0.5 ||y - D'u||^2 s.t. |u_i| <= lam`, run to stagnation.
pub fn tv1d_dual_reference(y: &[f64], lam: f64, iters: usize) -> Vec<f64> {
    let n = y.len();
    if n <= 1 {
        return y.to_vec();
    }
    let m = n - 1;
    let mut u = vec![0.0; m];
    let step = 0.25;
    for _ in 0..iters {
        // x = y - D'u; grad wrt u is -(Dx).
        let x = primal_from_dual(y, &u);
        for i in 0..m {
            u[i] = (u[i] + step * (x[i + 1] - x[i])).clamp(-lam, lam);
        }
    }
    primal_from_dual(y, &u)
}

fn primal_from_dual(y: &[f64], u: &[f64]) -> Vec<f64> {
    let mut x = y.to_vec();
    for i in 0..u.len() {
        x[i] += u[i];
        x[i + 1] -= u[i];
    }
    x
}

/// Dense matrix of a linear operator, column by column.
pub fn materialize(op: &LinearOperator) -> nalgebra::DMatrix<f64> {
    let (m, n) = (op.out_len(), op.in_len());
    let mut a = nalgebra::DMatrix::zeros(m, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        let col = op.apply(&e).expect("materialize: apply");
        e[j] = 0.0;
        for i in 0..m {
            a[(i, j)] = col[i];
        }
    }
    a
}

/// Largest singular value by dense SVD.
pub fn spectral_norm_dense(op: &LinearOperator) -> f64 {
    let a = materialize(op);
    a.svd(false, false).singular_values.max()
}

/// Double-double (compensated) running product, the higher-precision route
/// for schedule tables.
pub fn dd_product(factors: &[f64]) -> f64 {
    // (hi, lo) value representation with Dekker splitting.
    let split = |a: f64| {
        let c = 134217729.0 * a; // 2^27 + 1
        let hi = c - (c - a);
        (hi, a - hi)
    };
    let two_prod = |a: f64, b: f64| {
        let p = a * b;
        let (ah, al) = split(a);
        let (bh, bl) = split(b);
        let err = ((ah * bh - p) + ah * bl + al * bh) + al * bl;
        (p, err)
    };
    let (mut hi, mut lo) = (1.0f64, 0.0f64);
    for &f in factors {
        let (p, e) = two_prod(hi, f);
        lo = lo * f + e;
        hi = p + lo;
        lo = (p - hi) + lo;
    }
    hi + lo
}

/// Self-normalized importance-sampling mean with per-coordinate standard
/// errors: `sum w_i x_i / sum w_i` from log-weights.
pub fn snis_mean(samples: &[Vec<f64>], log_w: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = samples[0].len();
    let wmax = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|l| (l - wmax).exp()).collect();
    let wsum: f64 = w.iter().sum();
    let wn: Vec<f64> = w.iter().map(|v| v / wsum).collect();
    let mut mean = vec![0.0; n];
    for (x, &wi) in samples.iter().zip(&wn) {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += wi * v;
        }
    }
    // Delta-method standard error of the ratio estimator.
    let mut se = vec![0.0; n];
    for (x, &wi) in samples.iter().zip(&wn) {
        for j in 0..n {
            se[j] += wi * wi * (x[j] - mean[j]) * (x[j] - mean[j]);
        }
    }
    se.iter_mut().for_each(|s| *s = s.sqrt());
    (mean, se)
}

/// Log-density of `N(x; mu, var I)`.
pub fn log_normal_iso(x: &[f64], mu_scale: f64, mu: &[f64], var: f64) -> f64 {
    let n = x.len() as f64;
    let sq: f64 = x
        .iter()
        .zip(mu)
        .map(|(a, b)| (a - mu_scale * b) * (a - mu_scale * b))
        .sum();
    -0.5 * n * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * sq / var
}

pub fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    num / l2(b).max(1e-300)
}

pub fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

