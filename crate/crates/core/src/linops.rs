//! Linear forward operators with exact adjoints.
//!
//! Every operator is immutable after construction; `apply` and `adjoint` are
//! pure. The Radon transform is discretized once into a sparse matrix and the
//! adjoint is the literal transpose of that matrix, so the dot-product
//! identity `<Ax, y> = <x, A'y>` holds to round-off for all operator kinds.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{Image, Sinogram};

/// Parallel-beam acquisition geometry for a square image.
#[derive(Debug, Clone, PartialEq)]
pub struct RadonGeometry {
    pub image_size: usize,
    /// Projection angles in degrees, strictly increasing, in `[0, 180)`.
    pub angles: Vec<f64>,
    pub n_detectors: usize,
    /// Detector bin width in pixel units.
    pub detector_spacing: f64,
}

impl RadonGeometry {
    pub fn new(
        image_size: usize,
        angles: Vec<f64>,
        n_detectors: usize,
        detector_spacing: f64,
    ) -> Result<Self> {
        if image_size == 0 || n_detectors == 0 {
            return Err(Error::param("radon geometry needs positive sizes"));
        }
        if detector_spacing <= 0.0 {
            return Err(Error::param("detector spacing must be positive"));
        }
        if angles.is_empty() {
            return Err(Error::param("radon geometry needs at least one angle"));
        }
        for w in angles.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::param("angles must be strictly increasing"));
            }
        }
        if angles[0] < 0.0 || *angles.last().unwrap() >= 180.0 {
            return Err(Error::param("angles must lie in [0, 180)"));
        }
        Ok(RadonGeometry { image_size, angles, n_detectors, detector_spacing })
    }

    /// `n_angles` equi-spaced angles over `[0, 180)`; detector count equals
    /// the image size at unit spacing.
    pub fn uniform(image_size: usize, n_angles: usize) -> Result<Self> {
        let angles = (0..n_angles).map(|i| 180.0 * i as f64 / n_angles as f64).collect();
        RadonGeometry::new(image_size, angles, image_size, 1.0)
    }

    pub fn n_angles(&self) -> usize {
        self.angles.len()
    }
}

/// Compressed sparse row matrix; the only sparse format we need.
#[derive(Debug, Clone)]
pub(crate) struct Csr {
    nrows: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl Csr {
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for r in 0..self.nrows {
            let mut acc = 0.0;
            for k in self.indptr[r]..self.indptr[r + 1] {
                acc += self.values[k] * x[self.indices[k] as usize];
            }
            out[r] = acc;
        }
    }

    fn apply_transpose(&self, y: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for r in 0..self.nrows {
            let yr = y[r];
            if yr == 0.0 {
                continue;
            }
            for k in self.indptr[r]..self.indptr[r + 1] {
                out[self.indices[k] as usize] += self.values[k] * yr;
            }
        }
    }
}

/// Builds the sparse Radon matrix: for each (angle, detector) ray, sample at
/// unit-pixel steps along the ray and deposit bilinear interpolation weights.
pub(crate) fn radon_matrix(geom: &RadonGeometry) -> Csr {
    let size = geom.image_size;
    let n_det = geom.n_detectors;
    let c = (size as f64 - 1.0) / 2.0;
    let half = ((size as f64) * std::f64::consts::SQRT_2 / 2.0).ceil() as i64 + 1;

    let mut indptr = Vec::with_capacity(geom.n_angles() * n_det + 1);
    let mut indices: Vec<u32> = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    indptr.push(0);

    // Dense accumulator reused per row; rays touch few pixels so we track them.
    let mut acc = vec![0.0f64; size * size];
    let mut touched: Vec<u32> = Vec::new();

    for &deg in &geom.angles {
        let th = deg.to_radians();
        let (sin, cos) = th.sin_cos();
        for d in 0..n_det {
            let s = (d as f64 - (n_det as f64 - 1.0) / 2.0) * geom.detector_spacing;
            // Ray through center + s*(cos,sin), direction (-sin, cos).
            let ox = c + s * cos;
            let oy = c + s * sin;
            for k in -half..=half {
                let u = k as f64;
                let px = ox - u * sin;
                let py = oy + u * cos;
                let x0 = px.floor();
                let y0 = py.floor();
                let fx = px - x0;
                let fy = py - y0;
                let (ix, iy) = (x0 as i64, y0 as i64);
                let mut put = |xx: i64, yy: i64, w: f64| {
                    if w != 0.0 && xx >= 0 && yy >= 0 && (xx as usize) < size && (yy as usize) < size
                    {
                        let idx = yy as usize * size + xx as usize;
                        if acc[idx] == 0.0 {
                            touched.push(idx as u32);
                        }
                        acc[idx] += w;
                    }
                };
                put(ix, iy, (1.0 - fx) * (1.0 - fy));
                put(ix + 1, iy, fx * (1.0 - fy));
                put(ix, iy + 1, (1.0 - fx) * fy);
                put(ix + 1, iy + 1, fx * fy);
            }
            touched.sort_unstable();
            for &idx in &touched {
                indices.push(idx);
                values.push(acc[idx as usize]);
                acc[idx as usize] = 0.0;
            }
            touched.clear();
            indptr.push(indices.len());
        }
    }

    Csr { nrows: geom.n_angles() * n_det, indptr, indices, values }
}

#[derive(Debug, Clone)]
enum OpKind {
    Identity,
    Radon { geom: RadonGeometry, matrix: Csr },
    /// `true` marks an observed pixel.
    InpaintMask { mask: Vec<bool> },
    /// Circular 2-D convolution with an arbitrary kernel.
    BlurConv { kernel: Vec<f64>, kw: usize, kh: usize, width: usize, height: usize },
    /// Gaussian low-pass (sigma = factor/2, circular) followed by stride-`factor` subsampling.
    Downsample { factor: usize, width: usize, height: usize, taps: Vec<f64> },
    /// Children applied in sequence: x -> children[0](x) -> children[1](...) -> ...
    Composition { children: Vec<LinearOperator> },
}

/// A linear map with an exact adjoint.
#[derive(Debug, Clone)]
pub struct LinearOperator {
    kind: OpKind,
    in_len: usize,
    out_len: usize,
}

impl LinearOperator {
    pub fn identity(n: usize) -> Self {
        LinearOperator { kind: OpKind::Identity, in_len: n, out_len: n }
    }

    pub fn radon(geom: RadonGeometry) -> Self {
        let matrix = radon_matrix(&geom);
        let in_len = geom.image_size * geom.image_size;
        let out_len = geom.n_angles() * geom.n_detectors;
        LinearOperator { kind: OpKind::Radon { geom, matrix }, in_len, out_len }
    }

    pub fn inpaint_mask(mask: Vec<bool>) -> Result<Self> {
        if mask.is_empty() {
            return Err(Error::param("empty mask"));
        }
        let n = mask.len();
        Ok(LinearOperator { kind: OpKind::InpaintMask { mask }, in_len: n, out_len: n })
    }

    /// Random mask observing a `1 - missing_fraction` share of the pixels.
    pub fn random_mask(n: usize, missing_fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&missing_fraction) {
            return Err(Error::param("missing fraction must be in [0,1]"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = (0..n).map(|_| rng.gen::<f64>() >= missing_fraction).collect();
        LinearOperator::inpaint_mask(mask)
    }

    pub fn blur_conv(kernel: Vec<f64>, kw: usize, kh: usize, width: usize, height: usize) -> Result<Self> {
        if kernel.len() != kw * kh {
            return Err(Error::shape("kernel length != kw*kh"));
        }
        if kw > width || kh > height {
            return Err(Error::param("kernel larger than image"));
        }
        Ok(LinearOperator {
            kind: OpKind::BlurConv { kernel, kw, kh, width, height },
            in_len: width * height,
            out_len: width * height,
        })
    }

    pub fn downsample(factor: usize, width: usize, height: usize) -> Result<Self> {
        if factor == 0 || width % factor != 0 || height % factor != 0 {
            return Err(Error::param("downsample factor must divide both dimensions"));
        }
        let sigma = factor as f64 / 2.0;
        let taps = gaussian_taps(sigma);
        Ok(LinearOperator {
            kind: OpKind::Downsample { factor, width, height, taps },
            in_len: width * height,
            out_len: (width / factor) * (height / factor),
        })
    }

    pub fn composition(children: Vec<LinearOperator>) -> Result<Self> {
        if children.is_empty() {
            return Err(Error::param("composition needs at least one child"));
        }
        for w in children.windows(2) {
            if w[0].out_len != w[1].in_len {
                return Err(Error::shape(format!(
                    "composition shape break: {} -> {}",
                    w[0].out_len, w[1].in_len
                )));
            }
        }
        let in_len = children.first().unwrap().in_len;
        let out_len = children.last().unwrap().out_len;
        Ok(LinearOperator { kind: OpKind::Composition { children }, in_len, out_len })
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.out_len
    }

    pub fn kind_name(&self) -> &'static str {
        match &self.kind {
            OpKind::Identity => "identity",
            OpKind::Radon { .. } => "radon",
            OpKind::InpaintMask { .. } => "inpaint_mask",
            OpKind::BlurConv { .. } => "blur_conv",
            OpKind::Downsample { .. } => "downsample",
            OpKind::Composition { .. } => "composition",
        }
    }

    pub fn radon_geometry(&self) -> Option<&RadonGeometry> {
        match &self.kind {
            OpKind::Radon { geom, .. } => Some(geom),
            _ => None,
        }
    }

    /// `y = A x`.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_len {
            return Err(Error::shape(format!("apply: got {}, expected {}", x.len(), self.in_len)));
        }
        let mut out = vec![0.0; self.out_len];
        match &self.kind {
            OpKind::Identity => out.copy_from_slice(x),
            OpKind::Radon { matrix, .. } => matrix.apply(x, &mut out),
            OpKind::InpaintMask { mask } => {
                for (i, (&v, &m)) in x.iter().zip(mask).enumerate() {
                    out[i] = if m { v } else { 0.0 };
                }
            }
            OpKind::BlurConv { kernel, kw, kh, width, height } => {
                conv2_circular(x, *width, *height, kernel, *kw, *kh, false, &mut out);
            }
            OpKind::Downsample { factor, width, height, taps } => {
                let low = conv2_separable_circular(x, *width, *height, taps, false);
                let (ow, oh) = (width / factor, height / factor);
                for r in 0..oh {
                    for c in 0..ow {
                        out[r * ow + c] = low[(r * factor) * width + c * factor];
                    }
                }
            }
            OpKind::Composition { children } => {
                let mut cur = x.to_vec();
                for child in children {
                    cur = child.apply(&cur)?;
                }
                out.copy_from_slice(&cur);
            }
        }
        Ok(out)
    }

    /// `x = A' y`, the exact matrix transpose of [`LinearOperator::apply`].
    pub fn adjoint(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.out_len {
            return Err(Error::shape(format!(
                "adjoint: got {}, expected {}",
                y.len(),
                self.out_len
            )));
        }
        let mut out = vec![0.0; self.in_len];
        match &self.kind {
            OpKind::Identity => out.copy_from_slice(y),
            OpKind::Radon { matrix, .. } => matrix.apply_transpose(y, &mut out),
            OpKind::InpaintMask { mask } => {
                for (i, (&v, &m)) in y.iter().zip(mask).enumerate() {
                    out[i] = if m { v } else { 0.0 };
                }
            }
            OpKind::BlurConv { kernel, kw, kh, width, height } => {
                conv2_circular(y, *width, *height, kernel, *kw, *kh, true, &mut out);
            }
            OpKind::Downsample { factor, width, height, taps } => {
                let (ow, _oh) = (width / factor, height / factor);
                let mut stuffed = vec![0.0; width * height];
                for (i, &v) in y.iter().enumerate() {
                    let (r, c) = (i / ow, i % ow);
                    stuffed[(r * factor) * width + c * factor] = v;
                }
                // Gaussian taps are symmetric, so correlation equals convolution.
                out = conv2_separable_circular(&stuffed, *width, *height, taps, true);
            }
            OpKind::Composition { children } => {
                let mut cur = y.to_vec();
                for child in children.iter().rev() {
                    cur = child.adjoint(&cur)?;
                }
                out.copy_from_slice(&cur);
            }
        }
        Ok(out)
    }
}

/// Discrete line integrals of `img` at the configured angles.
pub fn radon_apply(img: &Image, geom: &RadonGeometry) -> Result<Sinogram> {
    if img.width() != img.height() {
        return Err(Error::shape("radon expects a square image"));
    }
    if img.width() != geom.image_size {
        return Err(Error::shape(format!(
            "image size {} does not match geometry {}",
            img.width(),
            geom.image_size
        )));
    }
    let m = radon_matrix(geom);
    let mut out = vec![0.0; m.nrows];
    m.apply(img.data(), &mut out);
    Sinogram::new(geom.n_angles(), geom.n_detectors, out)
}

/// Reconstruction filter for [`fbp`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FbpFilter {
    Ramp,
    Hann,
}

/// Filtered backprojection. Each sinogram row is convolved with the
/// band-limited ramp kernel (optionally Hann-apodized), then backprojected
/// with linear detector interpolation.
pub fn fbp(sino: &Sinogram, geom: &RadonGeometry, filter: FbpFilter) -> Result<Image> {
    if sino.n_angles() != geom.n_angles() || sino.n_detectors() != geom.n_detectors {
        return Err(Error::shape("sinogram does not match geometry"));
    }
    let n_det = geom.n_detectors;
    let tau = geom.detector_spacing;
    let kernel = ramp_kernel(n_det, tau, filter);

    // Filter per angle: q[d] = tau * sum_k kernel[k] * p[d-k].
    let mut filtered = vec![0.0; sino.data().len()];
    for a in 0..geom.n_angles() {
        let row = &sino.data()[a * n_det..(a + 1) * n_det];
        let out = &mut filtered[a * n_det..(a + 1) * n_det];
        for d in 0..n_det {
            let mut acc = 0.0;
            for (j, &p) in row.iter().enumerate() {
                let k = d as i64 - j as i64;
                acc += kernel[(k + n_det as i64 - 1) as usize] * p;
            }
            out[d] = acc * tau;
        }
    }

    let size = geom.image_size;
    let c = (size as f64 - 1.0) / 2.0;
    let dth = std::f64::consts::PI / geom.n_angles() as f64;
    let mut img = vec![0.0; size * size];
    for (a, &deg) in geom.angles.iter().enumerate() {
        let (sin, cos) = deg.to_radians().sin_cos();
        let frow = &filtered[a * n_det..(a + 1) * n_det];
        for r in 0..size {
            let y = r as f64 - c;
            for col in 0..size {
                let x = col as f64 - c;
                let s = x * cos + y * sin;
                let t = s / tau + (n_det as f64 - 1.0) / 2.0;
                let t0 = t.floor();
                let i0 = t0 as i64;
                let f = t - t0;
                let mut v = 0.0;
                if i0 >= 0 && (i0 as usize) < n_det {
                    v += (1.0 - f) * frow[i0 as usize];
                }
                if i0 + 1 >= 0 && ((i0 + 1) as usize) < n_det {
                    v += f * frow[(i0 + 1) as usize];
                }
                img[r * size + col] += v * dth;
            }
        }
    }
    Image::new(size, size, img)
}

/// Band-limited ramp kernel on `[-(n-1), n-1]` for detector spacing `tau`.
fn ramp_kernel(n_det: usize, tau: f64, filter: FbpFilter) -> Vec<f64> {
    let m = 2 * n_det - 1;
    let mut kernel = vec![0.0; m];
    match filter {
        FbpFilter::Ramp => {
            // Ram-Lak: h[0] = 1/(4 tau^2), h[k odd] = -1/(pi^2 k^2 tau^2).
            for k in -(n_det as i64 - 1)..=(n_det as i64 - 1) {
                let idx = (k + n_det as i64 - 1) as usize;
                kernel[idx] = if k == 0 {
                    1.0 / (4.0 * tau * tau)
                } else if k % 2 != 0 {
                    -1.0 / (std::f64::consts::PI * std::f64::consts::PI * (k * k) as f64 * tau * tau)
                } else {
                    0.0
                };
            }
        }
        FbpFilter::Hann => {
            // h[k] = 2/tau^2 * int_0^(1/2) f * hann(f) * cos(2 pi f k) df,
            // computed by Simpson quadrature once per call.
            let steps = 4096;
            let h = 0.5 / steps as f64;
            for k in -(n_det as i64 - 1)..=(n_det as i64 - 1) {
                let integrand = |f: f64| {
                    let w = 0.5 * (1.0 + (2.0 * std::f64::consts::PI * f).cos());
                    f * w * (2.0 * std::f64::consts::PI * f * k as f64).cos()
                };
                let mut acc = integrand(0.0) + integrand(0.5);
                for i in 1..steps {
                    let f = i as f64 * h;
                    acc += if i % 2 == 1 { 4.0 } else { 2.0 } * integrand(f);
                }
                kernel[(k + n_det as i64 - 1) as usize] = 2.0 * acc * h / 3.0 / (tau * tau);
            }
        }
    }
    kernel
}

/// Power-iteration estimate of the spectral norm of `op`.
///
/// The Rayleigh quotient of `A'A` is monotone non-decreasing over iterations,
/// so more iterations never lower the estimate (up to round-off).
pub fn op_norm(op: &LinearOperator, iters: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = op.in_len();
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
    let norm = l2(&v);
    if norm == 0.0 {
        return 0.0;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    let mut est = 0.0;
    for _ in 0..iters.max(1) {
        let av = op.apply(&v).expect("op_norm: shape invariant");
        est = l2(&av);
        if est == 0.0 {
            return 0.0;
        }
        let mut w = op.adjoint(&av).expect("op_norm: shape invariant");
        let wn = l2(&w);
        if wn == 0.0 {
            return est;
        }
        w.iter_mut().for_each(|x| *x /= wn);
        v = w;
    }
    est
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Circular 2-D convolution (or correlation when `transpose` is set) with the
/// kernel centered at `(kh/2, kw/2)`.
fn conv2_circular(
    x: &[f64],
    width: usize,
    height: usize,
    kernel: &[f64],
    kw: usize,
    kh: usize,
    transpose: bool,
    out: &mut [f64],
) {
    let (cx, cy) = ((kw / 2) as i64, (kh / 2) as i64);
    for r in 0..height {
        for c in 0..width {
            let mut acc = 0.0;
            for i in 0..kh {
                for j in 0..kw {
                    let (di, dj) = (i as i64 - cy, j as i64 - cx);
                    let (sr, sc) = if !transpose {
                        (r as i64 - di, c as i64 - dj)
                    } else {
                        (r as i64 + di, c as i64 + dj)
                    };
                    let sr = sr.rem_euclid(height as i64) as usize;
                    let sc = sc.rem_euclid(width as i64) as usize;
                    acc += kernel[i * kw + j] * x[sr * width + sc];
                }
            }
            out[r * width + c] = acc;
        }
    }
}

/// Separable circular convolution with symmetric 1-D taps.
fn conv2_separable_circular(
    x: &[f64],
    width: usize,
    height: usize,
    taps: &[f64],
    _transpose: bool,
) -> Vec<f64> {
    let radius = (taps.len() - 1) / 2;
    let mut tmp = vec![0.0; width * height];
    for r in 0..height {
        for c in 0..width {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                let off = k as i64 - radius as i64;
                let sc = (c as i64 - off).rem_euclid(width as i64) as usize;
                acc += t * x[r * width + sc];
            }
            tmp[r * width + c] = acc;
        }
    }
    let mut out = vec![0.0; width * height];
    for r in 0..height {
        for c in 0..width {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                let off = k as i64 - radius as i64;
                let sr = (r as i64 - off).rem_euclid(height as i64) as usize;
                acc += t * tmp[sr * width + c];
            }
            out[r * width + c] = acc;
        }
    }
    out
}

/// Normalized Gaussian taps truncated at four standard deviations.
pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil().max(1.0) as i64;
    let mut taps: Vec<f64> =
        (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Normalized 2-D Gaussian kernel truncated at four standard deviations.
pub fn gaussian_kernel_2d(sigma: f64) -> (Vec<f64>, usize, usize) {
    let taps = gaussian_taps(sigma);
    let k = taps.len();
    let mut kernel = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            kernel[i * k + j] = taps[i] * taps[j];
        }
    }
    (kernel, k, k)
}

/// Horizontal motion blur: a normalized length-`len` line kernel.
pub fn motion_blur_kernel(len: usize) -> (Vec<f64>, usize, usize) {
    let len = len.max(1);
    (vec![1.0 / len as f64; len], len, 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn randvec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen::<f64>() - 0.5).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn adjoint_check(op: &LinearOperator, trials: usize, tol: f64) {
        for t in 0..trials {
            let x = randvec(op.in_len(), 100 + t as u64);
            let y = randvec(op.out_len(), 200 + t as u64);
            let ax = op.apply(&x).unwrap();
            let aty = op.adjoint(&y).unwrap();
            let lhs = dot(&ax, &y);
            let rhs = dot(&x, &aty);
            let scale = l2(&ax) * l2(&y);
            assert!(
                (lhs - rhs).abs() <= tol * scale.max(1e-30),
                "adjoint identity broken for {}: {} vs {}",
                op.kind_name(),
                lhs,
                rhs
            );
        }
    }

    #[test]
    fn identity_roundtrip() {
        let op = LinearOperator::identity(7);
        let x = randvec(7, 3);
        assert_eq!(op.apply(&x).unwrap(), x);
        assert_eq!(op.adjoint(&x).unwrap(), x);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let op = LinearOperator::identity(7);
        assert!(op.apply(&[1.0; 6]).is_err());
        assert!(op.adjoint(&[1.0; 8]).is_err());
    }

    #[test]
    fn mask_zeroes_missing_and_is_self_adjoint() {
        let op = LinearOperator::random_mask(100, 0.6, 9).unwrap();
        let x = randvec(100, 4);
        let y = op.apply(&x).unwrap();
        let z = op.adjoint(&x).unwrap();
        assert_eq!(y, z);
        let mut missing = 0;
        for i in 0..100 {
            if y[i] == 0.0 && x[i] != 0.0 {
                missing += 1;
            } else {
                assert_eq!(y[i], x[i]);
            }
        }
        assert!(missing > 30 && missing < 90, "unexpected mask density {missing}");
    }

    #[test]
    fn radon_zero_image_gives_zero_sinogram() {
        let geom = RadonGeometry::uniform(16, 8).unwrap();
        let s = radon_apply(&Image::zeros(16, 16), &geom).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn radon_is_homogeneous() {
        let geom = RadonGeometry::uniform(16, 8).unwrap();
        let x = randvec(256, 5);
        let img = Image::new(16, 16, x.clone()).unwrap();
        let img2 = Image::new(16, 16, x.iter().map(|v| 2.0 * v).collect()).unwrap();
        let s1 = radon_apply(&img, &geom).unwrap();
        let s2 = radon_apply(&img2, &geom).unwrap();
        for (a, b) in s1.data().iter().zip(s2.data()) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn radon_rotational_symmetry() {
        // A smooth radial bump supported inside the inscribed circle must
        // produce near-identical rows at every angle. Angle 0 samples exactly
        // on the grid, so the deviation of oblique angles is the raw bilinear
        // interpolation error.
        let size = 97;
        let c = (size as f64 - 1.0) / 2.0;
        let rmax = 0.8 * size as f64 / 2.0;
        let mut data = vec![0.0; size * size];
        for r in 0..size {
            for col in 0..size {
                let d2 = (r as f64 - c).powi(2) + (col as f64 - c).powi(2);
                let q = d2 / (rmax * rmax);
                if q < 1.0 {
                    data[r * size + col] = (1.0 - q).powi(4);
                }
            }
        }
        let img = Image::new(size, size, data).unwrap();
        let geom = RadonGeometry::uniform(size, 16).unwrap();
        let s = radon_apply(&img, &geom).unwrap();
        let row0: Vec<f64> = (0..size).map(|d| s.at(0, d)).collect();
        let peak = row0.iter().cloned().fold(0.0, f64::max);
        for a in 1..16 {
            for d in 0..size {
                assert!(
                    (s.at(a, d) - row0[d]).abs() <= 1e-3 * peak,
                    "angle {} bin {} deviates",
                    a,
                    d
                );
            }
        }
    }

    #[test]
    fn adjoint_identity_all_kinds() {
        let geom = RadonGeometry::uniform(16, 8).unwrap();
        let (mk, mw, mh) = motion_blur_kernel(5);
        let (gk, gw, gh) = gaussian_kernel_2d(1.0);
        let ops = vec![
            LinearOperator::identity(64),
            LinearOperator::radon(geom),
            LinearOperator::random_mask(64, 0.6, 1).unwrap(),
            LinearOperator::blur_conv(mk, mw, mh, 8, 8).unwrap(),
            LinearOperator::downsample(2, 16, 16).unwrap(),
            LinearOperator::composition(vec![
                LinearOperator::blur_conv(gk, gw, gh, 16, 16).unwrap(),
                LinearOperator::downsample(2, 16, 16).unwrap(),
            ])
            .unwrap(),
        ];
        for op in &ops {
            adjoint_check(op, 20, 1e-10);
        }
    }

    #[test]
    fn composition_applies_children_in_sequence() {
        let (gk, gw, gh) = gaussian_kernel_2d(1.0);
        let blur = LinearOperator::blur_conv(gk, gw, gh, 16, 16).unwrap();
        let down = LinearOperator::downsample(2, 16, 16).unwrap();
        let comp = LinearOperator::composition(vec![blur.clone(), down.clone()]).unwrap();
        let x = randvec(256, 11);
        let direct = down.apply(&blur.apply(&x).unwrap()).unwrap();
        let composed = comp.apply(&x).unwrap();
        for (a, b) in direct.iter().zip(&composed) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn op_norm_identity_and_mask() {
        let id = LinearOperator::identity(50);
        assert!((op_norm(&id, 30, 7) - 1.0).abs() <= 1e-8);
        let mask = LinearOperator::random_mask(50, 0.5, 3).unwrap();
        assert!((op_norm(&mask, 60, 7) - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn op_norm_monotone_in_iters() {
        let geom = RadonGeometry::uniform(12, 6).unwrap();
        let op = LinearOperator::radon(geom);
        let mut prev = 0.0f64;
        for iters in [1, 2, 4, 8, 16, 32] {
            let est = op_norm(&op, iters, 42);
            assert!(est >= prev - 1e-9 * prev.abs().max(1.0));
            prev = est;
        }
    }

    #[test]
    fn fbp_zero_and_linear() {
        let geom = RadonGeometry::uniform(16, 12).unwrap();
        let z = fbp(&Sinogram::zeros(12, 16), &geom, FbpFilter::Ramp).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));

        let s1 = Sinogram::new(12, 16, randvec(192, 21)).unwrap();
        let s2 = Sinogram::new(12, 16, randvec(192, 22)).unwrap();
        let (a, b) = (0.7, -1.3);
        let combo = Sinogram::new(
            12,
            16,
            s1.data().iter().zip(s2.data()).map(|(u, v)| a * u + b * v).collect(),
        )
        .unwrap();
        let f1 = fbp(&s1, &geom, FbpFilter::Hann).unwrap();
        let f2 = fbp(&s2, &geom, FbpFilter::Hann).unwrap();
        let fc = fbp(&combo, &geom, FbpFilter::Hann).unwrap();
        for ((u, v), w) in f1.data().iter().zip(f2.data()).zip(fc.data()) {
            assert!((a * u + b * v - w).abs() <= 1e-10);
        }
    }

    #[test]
    fn deterministic_apply() {
        let geom = RadonGeometry::uniform(16, 8).unwrap();
        let op = LinearOperator::radon(geom);
        let x = randvec(256, 77);
        let y1 = op.apply(&x).unwrap();
        let y2 = op.apply(&x).unwrap();
        assert_eq!(y1, y2);
    }
}
