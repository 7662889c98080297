//! Experiment harness: problem/solver specifications, noise injection,
//! operator and noise-model mismatch, grid search, the noise-to-zero sweep,
//! noise-realization stability, and CSV emission.
//!
//! Determinism contract: every run seed is derived from
//! `(master, problem id, solver id, grid index, realization index)` with a
//! stable hash, so any single CSV row can be reproduced in isolation.

pub mod config;

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffusion::{
    diffpir, dmplug, dps, reddiff, DiffPirConfig, DmPlugConfig, DpsConfig, EpsModel,
    RedDiffConfig,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::linops::{fbp, FbpFilter, LinearOperator, RadonGeometry};
use crate::metrics::{data_consistency, psnr, ssim, MetricReport, NoiseModel};
use crate::pnpflow::{pnpflow, PnpFlowConfig};
use crate::priors::{
    generate_ellipse_image, make_schedule, EllipseSceneParams, FlowPrior, GmmPrior,
};
use crate::variational::{solve_smooth, solve_tv, AgdParams, PdParams, Regularizer};

/// Stable 64-bit FNV-1a over the run coordinates; the single source of every
/// per-run seed.
pub fn derive_seed(
    master: u64,
    problem_id: &str,
    solver_id: &str,
    grid_index: u64,
    realization: u64,
) -> u64 {
    const OFFSET: u64 = 0xcbf29ce484222325;
    const PRIME: u64 = 0x100000001b3;
    let mut h = OFFSET;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(PRIME);
        }
    };
    eat(&master.to_le_bytes());
    eat(problem_id.as_bytes());
    eat(&[0xff]);
    eat(solver_id.as_bytes());
    eat(&[0xff]);
    eat(&grid_index.to_le_bytes());
    eat(&realization.to_le_bytes());
    h
}

/// Adds measurement noise. Gaussian: `y + sigma eta`. Signal-dependent:
/// `y + delta sqrt(|y|) eta` with `delta^2 = sigma^2 m / sum|y_i|`, matching
/// the Gaussian total variance at the same level.
pub fn add_noise<R: Rng>(y_clean: &[f64], nm: &NoiseModel, rng: &mut R) -> Vec<f64> {
    match nm {
        NoiseModel::Gaussian { sigma } => {
            if *sigma == 0.0 {
                return y_clean.to_vec();
            }
            y_clean
                .iter()
                .map(|&v| v + sigma * rng.sample::<f64, _>(StandardNormal))
                .collect()
        }
        NoiseModel::SignalDependent { sigma_equiv } => {
            if *sigma_equiv == 0.0 {
                return y_clean.to_vec();
            }
            let m = y_clean.len() as f64;
            let total: f64 = y_clean.iter().map(|v| v.abs()).sum();
            let delta = (sigma_equiv * sigma_equiv * m / total.max(1e-300)).sqrt();
            y_clean
                .iter()
                .map(|&v| v + delta * v.abs().sqrt() * rng.sample::<f64, _>(StandardNormal))
                .collect()
        }
    }
}

/// Shifts every projection angle by an independent uniform draw in
/// `[-max_deg, max_deg]`.
pub fn perturb_angles<R: Rng>(
    geom: &RadonGeometry,
    max_deg: f64,
    rng: &mut R,
) -> Result<RadonGeometry> {
    if max_deg < 0.0 {
        return Err(Error::param("perturb_angles: max_deg must be non-negative"));
    }
    let angles: Vec<f64> = geom
        .angles
        .iter()
        .map(|&a| {
            let shift = if max_deg == 0.0 { 0.0 } else { rng.gen_range(-max_deg..=max_deg) };
            (a + shift).clamp(0.0, 180.0 - 1e-9)
        })
        .collect();
    RadonGeometry::new(geom.image_size, angles, geom.n_detectors, geom.detector_spacing)
}

/// Ellipse-dataset flavors for the synthetic priors; different flavors stand
/// in for different training datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EllipseStyle {
    /// Moderate scene, the in-distribution default.
    Default,
    /// Few large structures.
    Sparse,
    /// Many small high-contrast structures.
    Dense,
}

impl EllipseStyle {
    pub fn params(&self, image_size: usize) -> EllipseSceneParams {
        let mut p = EllipseSceneParams::new(image_size);
        match self {
            EllipseStyle::Default => {
                p.max_ellipses = 12;
            }
            EllipseStyle::Sparse => {
                p.max_ellipses = 3;
                p.axis_frac_range = (0.25, 0.4);
                p.intensity_range = (0.5, 1.0);
            }
            EllipseStyle::Dense => {
                p.max_ellipses = 40;
                p.axis_frac_range = (0.03, 0.12);
            }
        }
        p
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(EllipseStyle::Default),
            "sparse" => Ok(EllipseStyle::Sparse),
            "dense" => Ok(EllipseStyle::Dense),
            other => Err(Error::Config(format!("unknown ellipse style {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EllipseStyle::Default => "default",
            EllipseStyle::Sparse => "sparse",
            EllipseStyle::Dense => "dense",
        }
    }
}

/// Builds a mixture prior whose means are ellipse phantoms from one synthetic
/// dataset; the desk-scale stand-in for a prior trained on that dataset.
pub fn synthetic_gmm(
    image_size: usize,
    components: usize,
    dataset_seed: u64,
    variance: f64,
    style: EllipseStyle,
) -> Result<GmmPrior> {
    if components == 0 {
        return Err(Error::param("synthetic_gmm: need at least one component"));
    }
    let params = style.params(image_size);
    let means: Vec<Vec<f64>> = (0..components)
        .map(|k| {
            let seed = derive_seed(dataset_seed, "synthetic-gmm", style.name(), k as u64, 0);
            let img = generate_ellipse_image(&params, &mut ChaCha8Rng::seed_from_u64(seed));
            img.into_data()
        })
        .collect();
    let weights = vec![1.0 / components as f64; components];
    let variances = vec![variance; components];
    GmmPrior::new(weights, means, variances)
}

/// Where the ground-truth images come from.
#[derive(Debug, Clone)]
pub enum GroundTruth {
    /// Draws from a mixture prior; `label` names the dataset for the records.
    Gmm { label: String, prior: GmmPrior },
    Ellipses { params: EllipseSceneParams },
    /// A fixed image from disk (PGM or CSV grid).
    ImageFile { path: PathBuf },
}

impl GroundTruth {
    pub fn label(&self) -> String {
        match self {
            GroundTruth::Gmm { label, .. } => label.clone(),
            GroundTruth::Ellipses { .. } => "ellipses".to_string(),
            GroundTruth::ImageFile { path } => path.display().to_string(),
        }
    }
}

/// Forward-operator description, resolved once per problem.
#[derive(Debug, Clone)]
pub enum OperatorSpec {
    Identity,
    Radon { n_angles: usize },
    Mask { missing_fraction: f64, mask_seed: u64 },
    GaussianBlur { sigma: f64 },
    MotionBlur { len: usize },
    Downsample { factor: usize },
}

/// One inverse problem: operator, noise model and ground-truth source.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub id: String,
    pub image_size: usize,
    pub operator: OperatorSpec,
    pub noise: NoiseModel,
    pub truth: GroundTruth,
    /// Informational I/II/III annotation.
    pub problem_type: Option<String>,
}

/// A problem instantiated for one seed.
pub struct ResolvedProblem {
    pub operator: LinearOperator,
    pub x_true: Vec<f64>,
    pub y: Vec<f64>,
}

impl ProblemSpec {
    pub fn build_operator(&self) -> Result<LinearOperator> {
        let s = self.image_size;
        let n = s * s;
        Ok(match &self.operator {
            OperatorSpec::Identity => LinearOperator::identity(n),
            OperatorSpec::Radon { n_angles } => {
                LinearOperator::radon(RadonGeometry::uniform(s, *n_angles)?)
            }
            OperatorSpec::Mask { missing_fraction, mask_seed } => {
                LinearOperator::random_mask(n, *missing_fraction, *mask_seed)?
            }
            OperatorSpec::GaussianBlur { sigma } => {
                let (k, kw, kh) = crate::linops::gaussian_kernel_2d(*sigma);
                LinearOperator::blur_conv(k, kw, kh, s, s)?
            }
            OperatorSpec::MotionBlur { len } => {
                let (k, kw, kh) = crate::linops::motion_blur_kernel(*len);
                LinearOperator::blur_conv(k, kw, kh, s, s)?
            }
            OperatorSpec::Downsample { factor } => LinearOperator::downsample(*factor, s, s)?,
        })
    }

    pub fn draw_truth(&self, truth_seed: u64) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(truth_seed);
        Ok(match &self.truth {
            GroundTruth::Gmm { prior, .. } => prior.sample(&mut rng),
            GroundTruth::Ellipses { params } => generate_ellipse_image(params, &mut rng).into_data(),
            GroundTruth::ImageFile { path } => {
                let img = if path.extension().is_some_and(|e| e == "pgm") {
                    Image::read_pgm(path)?
                } else {
                    Image::read_csv(path)?
                };
                if img.width() != self.image_size || img.height() != self.image_size {
                    return Err(Error::shape(format!(
                        "{}: image is {}x{}, problem expects {}",
                        path.display(),
                        img.width(),
                        img.height(),
                        self.image_size
                    )));
                }
                img.into_data()
            }
        })
    }

    /// Resolves `(A, x_true, y)` for one run seed. Ground truth and noise use
    /// independent derived streams.
    pub fn resolve(&self, seed: u64) -> Result<ResolvedProblem> {
        let operator = self.build_operator()?;
        self.resolve_with(&operator, None, seed, seed)
    }

    /// Resolution with explicit truth/noise seeds and an optional mismatched
    /// operator used only for generating the data.
    pub fn resolve_with(
        &self,
        operator: &LinearOperator,
        data_operator: Option<&LinearOperator>,
        truth_seed: u64,
        noise_seed: u64,
    ) -> Result<ResolvedProblem> {
        let x_true = self.draw_truth(derive_seed(truth_seed, &self.id, "truth", 0, 0))?;
        let gen_op = data_operator.unwrap_or(operator);
        let y_clean = gen_op.apply(&x_true)?;
        let mut noise_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(noise_seed, &self.id, "noise", 0, 0));
        let y = add_noise(&y_clean, &self.noise, &mut noise_rng);
        Ok(ResolvedProblem { operator: operator.clone(), x_true, y })
    }
}

/// Smooth regularizer selection for the variational solver.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmoothRegKind {
    TikhonovIdentity,
    TikhonovGradient,
    GmmNegLog,
}

/// Reconstruction method plus its hyperparameters.
#[derive(Debug, Clone)]
pub enum Method {
    Fbp { filter: FbpFilter },
    Tv { lambda: f64, params: PdParams },
    SmoothReg { lambda: f64, kind: SmoothRegKind, params: AgdParams },
    Dps { cfg: DpsConfig },
    DiffPir { cfg: DiffPirConfig },
    RedDiff { cfg: RedDiffConfig },
    DmPlug { cfg: DmPlugConfig },
    PnpFlow { cfg: PnpFlowConfig },
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Fbp { .. } => "fbp",
            Method::Tv { .. } => "tv",
            Method::SmoothReg { .. } => "smooth_reg",
            Method::Dps { .. } => "dps",
            Method::DiffPir { .. } => "diffpir",
            Method::RedDiff { .. } => "reddiff",
            Method::DmPlug { .. } => "dmplug",
            Method::PnpFlow { .. } => "pnpflow",
        }
    }

    /// Applies one named hyperparameter; the hook the grid search drives.
    pub fn set_param(&mut self, key: &str, value: f64) -> Result<()> {
        let name = self.name();
        let bad = move || Error::Config(format!("method {name} has no parameter {key:?}"));
        match self {
            Method::Fbp { .. } => return Err(bad()),
            Method::Tv { lambda, .. } => match key {
                "lambda" => *lambda = value,
                _ => return Err(bad()),
            },
            Method::SmoothReg { lambda, .. } => match key {
                "lambda" => *lambda = value,
                _ => return Err(bad()),
            },
            Method::Dps { cfg } => match key {
                "gamma" => cfg.guidance = value,
                _ => return Err(bad()),
            },
            Method::DiffPir { cfg } => match key {
                "lambda" => cfg.lambda = value,
                "zeta" => cfg.zeta = value,
                _ => return Err(bad()),
            },
            Method::RedDiff { cfg } => match key {
                "gamma" => cfg.data_weight = value,
                "lambda" => cfg.reg_weight = value,
                "lr" => cfg.step_size = value,
                _ => return Err(bad()),
            },
            Method::DmPlug { cfg } => match key {
                "lr" => cfg.step_size = value,
                _ => return Err(bad()),
            },
            Method::PnpFlow { cfg } => match key {
                "gamma" => cfg.strength = value,
                "alpha" => cfg.scaling_exponent = value,
                _ => return Err(bad()),
            },
        }
        Ok(())
    }

    fn params_value(&self) -> serde_json::Value {
        match self {
            Method::Fbp { filter } => serde_json::json!({
                "filter": if *filter == FbpFilter::Ramp { "ramp" } else { "hann" },
            }),
            Method::Tv { lambda, params } => serde_json::json!({
                "lambda": lambda,
                "max_iters": params.max_iters,
            }),
            Method::SmoothReg { lambda, kind, params } => serde_json::json!({
                "lambda": lambda,
                "reg": match kind {
                    SmoothRegKind::TikhonovIdentity => "tikhonov",
                    SmoothRegKind::TikhonovGradient => "tikhonov_gradient",
                    SmoothRegKind::GmmNegLog => "gmm",
                },
                "max_iters": params.max_iters,
            }),
            Method::Dps { cfg } => serde_json::json!({
                "gamma": cfg.guidance,
                "steps": cfg.steps,
            }),
            Method::DiffPir { cfg } => serde_json::json!({
                "lambda": cfg.lambda,
                "zeta": cfg.zeta,
                "steps": cfg.steps,
                "sigma_y": cfg.sigma_y,
            }),
            Method::RedDiff { cfg } => serde_json::json!({
                "gamma": cfg.data_weight,
                "lambda": cfg.reg_weight,
                "lr": cfg.step_size,
                "steps": cfg.steps,
            }),
            Method::DmPlug { cfg } => serde_json::json!({
                "k": cfg.unrolled_steps,
                "lr": cfg.step_size,
                "max_steps": cfg.max_grad_steps,
            }),
            Method::PnpFlow { cfg } => serde_json::json!({
                "gamma": cfg.strength,
                "alpha": cfg.scaling_exponent,
                "steps": cfg.steps,
                "k": cfg.noise_realizations,
                "variant": match cfg.variant {
                    crate::pnpflow::PnpFlowVariant::Explicit => "explicit",
                    crate::pnpflow::PnpFlowVariant::Implicit => "implicit",
                },
            }),
        }
    }
}

/// A solver with an optional reconstruction prior (which may differ from the
/// ground-truth prior in the OOD protocol) and an optional tuning grid.
#[derive(Debug, Clone)]
pub struct SolverSpec {
    pub id: String,
    pub method: Method,
    /// Reconstruction prior for the learned-model stand-ins.
    pub prior: Option<GmmPrior>,
    /// Label of the reconstruction prior, recorded next to the truth label.
    pub prior_label: Option<String>,
    /// Diffusion schedule length for the diffusion-based methods.
    pub schedule_t: usize,
    /// Hyperparameter grid: `(key, candidate values)` per axis.
    pub grid: Vec<(String, Vec<f64>)>,
}

impl SolverSpec {
    pub fn new(id: impl Into<String>, method: Method) -> Self {
        SolverSpec {
            id: id.into(),
            method,
            prior: None,
            prior_label: None,
            schedule_t: 1000,
            grid: Vec::new(),
        }
    }

    pub fn with_prior(mut self, label: impl Into<String>, prior: GmmPrior) -> Self {
        self.prior = Some(prior);
        self.prior_label = Some(label.into());
        self
    }

    /// JSON string of the effective hyperparameters, recorded in the CSV.
    pub fn params_json(&self, truth_label: &str) -> String {
        let mut v = self.method.params_value();
        let obj = v.as_object_mut().expect("params_value is an object");
        obj.insert("method".into(), serde_json::json!(self.method.name()));
        obj.insert("truth_prior".into(), serde_json::json!(truth_label));
        if let Some(label) = &self.prior_label {
            obj.insert("recon_prior".into(), serde_json::json!(label));
        }
        serde_json::Value::Object(std::mem::take(obj)).to_string()
    }

    fn needs_prior(&self) -> bool {
        matches!(
            self.method,
            Method::Dps { .. }
                | Method::DiffPir { .. }
                | Method::RedDiff { .. }
                | Method::DmPlug { .. }
                | Method::PnpFlow { .. }
        ) || matches!(
            self.method,
            Method::SmoothReg { kind: SmoothRegKind::GmmNegLog, .. }
        )
    }

    /// Runs the solver on a resolved problem. `seed` drives all solver
    /// randomness.
    pub fn run(&self, problem: &ProblemSpec, resolved: &ResolvedProblem, seed: u64) -> Result<Vec<f64>> {
        let a = &resolved.operator;
        let y = &resolved.y;
        let size = problem.image_size;
        if self.needs_prior() && self.prior.is_none() {
            return Err(Error::Config(format!("solver {} needs a prior", self.id)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &problem.id, &self.id, 0, 1));

        let x = match &self.method {
            Method::Fbp { filter } => {
                let geom = a
                    .radon_geometry()
                    .ok_or_else(|| Error::Config("fbp needs a radon operator".into()))?;
                let sino = crate::image::Sinogram::new(geom.n_angles(), geom.n_detectors, y.clone())?;
                fbp(&sino, geom, *filter)?.into_data()
            }
            Method::Tv { lambda, params } => {
                solve_tv(y, a, *lambda, (size, size), params)?.into_data()
            }
            Method::SmoothReg { lambda, kind, params } => {
                let x_init = self.default_init(a, y)?;
                let reg_prior;
                let reg = match kind {
                    SmoothRegKind::TikhonovIdentity => Regularizer::TikhonovIdentity,
                    SmoothRegKind::TikhonovGradient => {
                        Regularizer::TikhonovGradient { width: size, height: size }
                    }
                    SmoothRegKind::GmmNegLog => {
                        reg_prior = self.prior.clone().unwrap();
                        Regularizer::GmmNegLog(&reg_prior)
                    }
                };
                solve_smooth(y, a, *lambda, &reg, params, &x_init)?.into_data()
            }
            Method::Dps { cfg } => {
                let prior = self.prior.as_ref().unwrap();
                let sch = make_schedule(self.schedule_t, 1e-4, 0.02)?;
                let model = EpsModel::new(prior, &sch);
                dps(y, a, problem.noise.level(), &model, cfg, &mut rng)?
            }
            Method::DiffPir { cfg } => {
                let prior = self.prior.as_ref().unwrap();
                let sch = make_schedule(self.schedule_t, 1e-4, 0.02)?;
                let model = EpsModel::new(prior, &sch);
                diffpir(y, a, &model, cfg, &mut rng)?
            }
            Method::RedDiff { cfg } => {
                let prior = self.prior.as_ref().unwrap();
                let sch = make_schedule(self.schedule_t, 1e-4, 0.02)?;
                let model = EpsModel::new(prior, &sch);
                let x_init = self.default_init(a, y)?;
                reddiff(y, a, &model, cfg, &x_init, &mut rng)?
            }
            Method::DmPlug { cfg } => {
                let prior = self.prior.as_ref().unwrap();
                let sch = make_schedule(self.schedule_t, 1e-4, 0.02)?;
                let model = EpsModel::new(prior, &sch);
                dmplug(y, a, &model, cfg, &mut rng)?.x
            }
            Method::PnpFlow { cfg } => {
                let prior = self.prior.as_ref().unwrap();
                let fp = FlowPrior::new(prior.clone());
                let x_init = self.default_init(a, y)?;
                pnpflow(y, a, &fp, cfg, &mut rng, &x_init)?
            }
        };
        Ok(x)
    }

    /// FBP for tomography, `A'y` otherwise.
    fn default_init(&self, a: &LinearOperator, y: &[f64]) -> Result<Vec<f64>> {
        if let Some(geom) = a.radon_geometry() {
            let sino = crate::image::Sinogram::new(geom.n_angles(), geom.n_detectors, y.to_vec())?;
            Ok(fbp(&sino, geom, FbpFilter::Ramp)?.into_data())
        } else {
            a.adjoint(y)
        }
    }
}

/// One evaluated (problem, solver, seed) cell.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub problem: String,
    pub solver: String,
    pub params: String,
    pub seed: u64,
    pub metrics: Option<MetricReport>,
    pub error: Option<String>,
    pub wall_ms: f64,
}

/// Runs one cell and measures it.
pub fn run_one(problem: &ProblemSpec, solver: &SolverSpec, seed: u64) -> RunRecord {
    let start = std::time::Instant::now();
    let outcome = (|| -> Result<MetricReport> {
        let resolved = problem.resolve(seed)?;
        evaluate(problem, solver, &resolved, seed)
    })();
    finish_record(problem, solver, seed, outcome, start)
}

fn finish_record(
    problem: &ProblemSpec,
    solver: &SolverSpec,
    seed: u64,
    outcome: Result<MetricReport>,
    start: std::time::Instant,
) -> RunRecord {
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    let (metrics, error) = match outcome {
        Ok(m) => (Some(m), None),
        Err(e) => (None, Some(e.to_string())),
    };
    RunRecord {
        problem: problem.id.clone(),
        solver: solver.id.clone(),
        params: solver.params_json(&problem.truth.label()),
        seed,
        metrics,
        error,
        wall_ms,
    }
}

fn evaluate(
    problem: &ProblemSpec,
    solver: &SolverSpec,
    resolved: &ResolvedProblem,
    seed: u64,
) -> Result<MetricReport> {
    let x = solver.run(problem, resolved, seed)?;
    let size = problem.image_size;
    let xi = Image::new(size, size, x.clone())?;
    let ti = Image::new(size, size, resolved.x_true.clone())?;
    let psnr_db = psnr(&xi, &ti)?;
    let ssim_v = ssim(&xi, &ti)?;
    let dc = data_consistency(&x, &resolved.y, &resolved.operator, &problem.noise)?;
    Ok(MetricReport { psnr_db, ssim: ssim_v, dc })
}

/// Bounded-worker parallel map preserving input order. `jobs = 1` runs
/// inline.
pub fn parallel_map<T, R, F>(jobs: usize, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = (0..items.len()).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().expect("slot poisoned") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot poisoned").expect("task completed"))
        .collect()
}

/// Evaluates every solver on every seed; failures are recorded per cell and
/// the run continues. Records come back sorted by (problem, solver, seed).
pub fn run_experiment(
    problem: &ProblemSpec,
    solvers: &[SolverSpec],
    test_seeds: &[u64],
    jobs: usize,
) -> Vec<RunRecord> {
    let cells: Vec<(usize, u64)> = solvers
        .iter()
        .enumerate()
        .flat_map(|(si, _)| test_seeds.iter().map(move |&s| (si, s)))
        .collect();
    let mut records = parallel_map(jobs, &cells, |&(si, seed)| {
        run_one(problem, &solvers[si], seed)
    });
    records.sort_by(|a, b| {
        (&a.problem, &a.solver, a.seed).cmp(&(&b.problem, &b.solver, b.seed))
    });
    records
}

/// One grid-search row.
#[derive(Debug, Clone)]
pub struct GridRow {
    pub index: usize,
    pub params: Vec<(String, f64)>,
    pub mean_psnr: f64,
    pub sd_psnr: f64,
    pub n_ok: usize,
}

#[derive(Debug, Clone)]
pub struct GridSearchResult {
    pub best: SolverSpec,
    pub best_index: usize,
    pub table: Vec<GridRow>,
}

/// Expands the solver's grid (cartesian product, first axis slowest) and
/// returns the configuration with the highest mean validation PSNR. Ties keep
/// the earliest grid point.
pub fn grid_search(
    problem: &ProblemSpec,
    solver: &SolverSpec,
    val_seeds: &[u64],
    jobs: usize,
) -> Result<GridSearchResult> {
    let points = expand_grid(&solver.grid);
    if points.is_empty() {
        return Err(Error::Config("grid_search: empty grid".into()));
    }
    let mut variants = Vec::with_capacity(points.len());
    for assignment in &points {
        let mut v = solver.clone();
        for (key, value) in assignment {
            v.method.set_param(key, *value)?;
        }
        v.grid.clear();
        variants.push(v);
    }

    let cells: Vec<(usize, u64)> = variants
        .iter()
        .enumerate()
        .flat_map(|(gi, _)| val_seeds.iter().map(move |&s| (gi, s)))
        .collect();
    let results = parallel_map(jobs, &cells, |&(gi, seed)| {
        // Validation seeds are offset through the grid index so each grid
        // point sees the same problems.
        run_one(problem, &variants[gi], seed)
    });

    let mut table = Vec::with_capacity(points.len());
    let mut best_index = None;
    let mut best_mean = f64::NEG_INFINITY;
    for (gi, assignment) in points.iter().enumerate() {
        let vals: Vec<f64> = results
            .iter()
            .enumerate()
            .filter(|(ci, _)| cells[*ci].0 == gi)
            .filter_map(|(_, r)| r.metrics.map(|m| m.psnr_db))
            .collect();
        let n_ok = vals.len();
        let (mean, sd) = mean_sd(&vals);
        let mean = if n_ok == 0 { f64::NEG_INFINITY } else { mean };
        table.push(GridRow { index: gi, params: assignment.clone(), mean_psnr: mean, sd_psnr: sd, n_ok });
        if mean > best_mean {
            best_mean = mean;
            best_index = Some(gi);
        }
    }
    let best_index =
        best_index.ok_or_else(|| Error::Diverged("grid_search: all runs failed".into()))?;
    if best_mean == f64::NEG_INFINITY {
        return Err(Error::Diverged("grid_search: all runs failed".into()));
    }
    Ok(GridSearchResult { best: variants[best_index].clone(), best_index, table })
}

fn expand_grid(grid: &[(String, Vec<f64>)]) -> Vec<Vec<(String, f64)>> {
    let mut points: Vec<Vec<(String, f64)>> = vec![Vec::new()];
    for (key, values) in grid {
        let mut next = Vec::with_capacity(points.len() * values.len());
        for p in &points {
            for &v in values {
                let mut q = p.clone();
                q.push((key.clone(), v));
                next.push(q);
            }
        }
        points = next;
    }
    points
}

pub fn mean_sd(vals: &[f64]) -> (f64, f64) {
    if vals.is_empty() {
        return (0.0, 0.0);
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    if vals.len() < 2 {
        return (mean, 0.0);
    }
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Noise-to-zero sweep: re-tunes each solver per level (when it has a grid)
/// and evaluates on the test seeds. `sigma_list` must be strictly decreasing.
pub struct SweepResult {
    pub records: Vec<RunRecord>,
    /// `(solver id, sigma, mean psnr over test seeds)` per level.
    pub curves: Vec<(String, f64, f64)>,
}

pub fn sweep_noise_to_zero(
    problem: &ProblemSpec,
    solvers: &[SolverSpec],
    sigma_list: &[f64],
    master_seed: u64,
    val_count: usize,
    test_count: usize,
    jobs: usize,
) -> Result<SweepResult> {
    if sigma_list.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::param("sweep: sigma list must be strictly decreasing"));
    }
    let mut records = Vec::new();
    let mut curves = Vec::new();
    for (li, &sigma) in sigma_list.iter().enumerate() {
        let mut level_problem = problem.clone();
        level_problem.noise = match problem.noise {
            NoiseModel::Gaussian { .. } => NoiseModel::Gaussian { sigma },
            NoiseModel::SignalDependent { .. } => NoiseModel::SignalDependent { sigma_equiv: sigma },
        };
        level_problem.id = format!("{}@{}", problem.id, sigma);
        for solver in solvers {
            let tuned = if solver.grid.is_empty() {
                solver.clone()
            } else {
                let val_seeds: Vec<u64> = (0..val_count)
                    .map(|i| {
                        derive_seed(master_seed, &level_problem.id, &solver.id, li as u64, 1_000_000 + i as u64)
                    })
                    .collect();
                grid_search(&level_problem, solver, &val_seeds, jobs)?.best
            };
            let test_seeds: Vec<u64> = (0..test_count)
                .map(|i| derive_seed(master_seed, &level_problem.id, &solver.id, li as u64, i as u64))
                .collect();
            let recs = run_experiment(&level_problem, &[tuned], &test_seeds, jobs);
            let vals: Vec<f64> =
                recs.iter().filter_map(|r| r.metrics.map(|m| m.psnr_db)).collect();
            let (mean, _) = mean_sd(&vals);
            curves.push((solver.id.clone(), sigma, if vals.is_empty() { f64::NAN } else { mean }));
            records.extend(recs);
        }
    }
    Ok(SweepResult { records, curves })
}

/// Per-metric stability summary over repeated noise realizations.
#[derive(Debug, Clone)]
pub struct StabilityReport {
    pub records: Vec<RunRecord>,
    /// Standard deviation per image, averaged over images: psnr, ssim, dc.
    pub avg_sd: (f64, f64, f64),
    /// Maximum per-image standard deviation: psnr, ssim, dc.
    pub max_sd: (f64, f64, f64),
}

/// Fixes `n_images` ground truths and varies only the noise seed
/// `n_realizations` times for each.
pub fn stability_over_noise(
    problem: &ProblemSpec,
    solver: &SolverSpec,
    n_realizations: usize,
    n_images: usize,
    master_seed: u64,
    jobs: usize,
) -> Result<StabilityReport> {
    if n_realizations < 2 {
        return Err(Error::param("stability: need at least two realizations"));
    }
    if n_images == 0 {
        return Err(Error::param("stability: need at least one image"));
    }
    let operator = problem.build_operator()?;
    let cells: Vec<(usize, usize)> = (0..n_images)
        .flat_map(|i| (0..n_realizations).map(move |r| (i, r)))
        .collect();
    let records = parallel_map(jobs, &cells, |&(img, real)| {
        let start = std::time::Instant::now();
        let truth_seed = derive_seed(master_seed, &problem.id, "stability-image", img as u64, 0);
        let noise_seed =
            derive_seed(master_seed, &problem.id, &solver.id, img as u64, real as u64);
        let outcome = problem
            .resolve_with(&operator, None, truth_seed, noise_seed)
            .and_then(|resolved| evaluate(problem, solver, &resolved, noise_seed));
        let mut rec = finish_record(problem, solver, noise_seed, outcome, start);
        rec.problem = format!("{}#img{}", problem.id, img);
        rec
    });

    let mut psnr_sds = Vec::new();
    let mut ssim_sds = Vec::new();
    let mut dc_sds = Vec::new();
    for img in 0..n_images {
        let sub: Vec<&RunRecord> = records
            .iter()
            .filter(|r| r.problem == format!("{}#img{}", problem.id, img))
            .collect();
        let psnrs: Vec<f64> = sub.iter().filter_map(|r| r.metrics.map(|m| m.psnr_db)).collect();
        let ssims: Vec<f64> = sub.iter().filter_map(|r| r.metrics.map(|m| m.ssim)).collect();
        let dcs: Vec<f64> = sub.iter().filter_map(|r| r.metrics.and_then(|m| m.dc)).collect();
        psnr_sds.push(mean_sd(&psnrs).1);
        ssim_sds.push(mean_sd(&ssims).1);
        dc_sds.push(mean_sd(&dcs).1);
    }
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let max = |v: &[f64]| v.iter().cloned().fold(0.0, f64::max);
    Ok(StabilityReport {
        records,
        avg_sd: (avg(&psnr_sds), avg(&ssim_sds), avg(&dc_sds)),
        max_sd: (max(&psnr_sds), max(&ssim_sds), max(&dc_sds)),
    })
}

/// Mismatch settings of one robustness run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MismatchSetting {
    Matched,
    PerturbedAngles,
    SignalDependentNoise,
}

impl MismatchSetting {
    pub fn tag(&self) -> &'static str {
        match self {
            MismatchSetting::Matched => "matched",
            MismatchSetting::PerturbedAngles => "angles",
            MismatchSetting::SignalDependentNoise => "noise_model",
        }
    }
}

/// Runs matched / perturbed-angle / signal-dependent-noise settings with
/// paired seeds. The perturbed geometry generates the data; reconstruction
/// always uses the nominal operator.
pub fn mismatch_experiment(
    problem: &ProblemSpec,
    solvers: &[SolverSpec],
    max_deg: f64,
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<RunRecord>> {
    let nominal = problem.build_operator()?;
    let geom = nominal
        .radon_geometry()
        .ok_or_else(|| Error::Config("mismatch protocol needs a radon problem".into()))?
        .clone();

    let settings = [
        MismatchSetting::Matched,
        MismatchSetting::PerturbedAngles,
        MismatchSetting::SignalDependentNoise,
    ];
    let cells: Vec<(usize, usize, u64)> = settings
        .iter()
        .enumerate()
        .flat_map(|(mi, _)| {
            solvers
                .iter()
                .enumerate()
                .flat_map(move |(si, _)| seeds.iter().map(move |&s| (mi, si, s)))
        })
        .collect();

    let records = parallel_map(jobs, &cells, |&(mi, si, seed)| {
        let setting = settings[mi];
        let solver = &solvers[si];
        let start = std::time::Instant::now();
        let outcome = (|| -> Result<MetricReport> {
            let mut sub_problem = problem.clone();
            let data_op = match setting {
                MismatchSetting::Matched => None,
                MismatchSetting::PerturbedAngles => {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                        seed,
                        &problem.id,
                        "angle-perturbation",
                        0,
                        0,
                    ));
                    let pert = perturb_angles(&geom, max_deg, &mut rng)?;
                    Some(LinearOperator::radon(pert))
                }
                MismatchSetting::SignalDependentNoise => {
                    sub_problem.noise =
                        NoiseModel::SignalDependent { sigma_equiv: problem.noise.level() };
                    None
                }
            };
            let resolved = sub_problem.resolve_with(&nominal, data_op.as_ref(), seed, seed)?;
            // Metrics keep the nominal noise model so DC stays comparable.
            let reportable = ProblemSpec { noise: problem.noise, ..sub_problem };
            evaluate(&reportable, solver, &resolved, seed)
        })();
        let mut rec = finish_record(problem, solver, seed, outcome, start);
        rec.problem = format!("{}#{}", problem.id, setting.tag());
        rec
    });
    let mut records = records;
    records.sort_by(|a, b| (&a.problem, &a.solver, a.seed).cmp(&(&b.problem, &b.solver, b.seed)));
    Ok(records)
}

/// CSV schema shared by writer and reader.
pub const CSV_HEADER: [&str; 8] =
    ["problem", "solver", "params", "seed", "psnr", "ssim", "dc", "wall_ms"];

/// Writes records (header + one row each); blank `dc` means undefined, blank
/// metric triple means the run failed. The file appears atomically: content
/// goes to a temp file in the same directory first.
pub fn emit_csv(records: &[RunRecord], path: &Path) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    if !dir.as_os_str().is_empty() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("csv.tmp");
    {
        let mut w =
            csv::Writer::from_path(&tmp).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        w.write_record(CSV_HEADER)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        for r in records {
            let (psnr_s, ssim_s, dc_s) = match &r.metrics {
                Some(m) => (
                    m.psnr_db.to_string(),
                    m.ssim.to_string(),
                    m.dc.map(|d| d.to_string()).unwrap_or_default(),
                ),
                None => (String::new(), String::new(), String::new()),
            };
            w.write_record([
                r.problem.as_str(),
                r.solver.as_str(),
                r.params.as_str(),
                &r.seed.to_string(),
                &psnr_s,
                &ssim_s,
                &dc_s,
                &format!("{:.3}", r.wall_ms),
            ])
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads back an emitted CSV (used for round-trip checks and by downstream
/// tooling).
pub fn read_csv_records(path: &Path) -> Result<Vec<RunRecord>> {
    let mut rdr =
        csv::Reader::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::Io(std::io::Error::other(e)))?;
        if row.len() != CSV_HEADER.len() {
            return Err(Error::Config(format!("csv row has {} fields", row.len())));
        }
        let parse_opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse::<f64>()
                    .map(Some)
                    .map_err(|_| Error::Config(format!("bad float {s:?}")))
            }
        };
        let psnr_v = parse_opt(&row[4])?;
        let ssim_v = parse_opt(&row[5])?;
        let dc_v = parse_opt(&row[6])?;
        let metrics = match (psnr_v, ssim_v) {
            (Some(p), Some(s)) => Some(MetricReport { psnr_db: p, ssim: s, dc: dc_v }),
            _ => None,
        };
        out.push(RunRecord {
            problem: row[0].to_string(),
            solver: row[1].to_string(),
            params: row[2].to_string(),
            seed: row[3].parse().map_err(|_| Error::Config("bad seed".into()))?,
            metrics,
            error: None,
            wall_ms: row[7].parse().unwrap_or(0.0),
        });
    }
    Ok(out)
}

/// Writes per-solver plot data (`x,y` columns) for a sweep curve set.
pub fn emit_curves(curves: &[(String, f64, f64)], dir: &Path) -> Result<Vec<PathBuf>> {
    use std::io::Write;
    std::fs::create_dir_all(dir)?;
    let mut by_solver: std::collections::BTreeMap<&str, Vec<(f64, f64)>> = Default::default();
    for (id, x, y) in curves {
        by_solver.entry(id).or_default().push((*x, *y));
    }
    let mut paths = Vec::new();
    for (id, pts) in by_solver {
        let path = dir.join(format!("{id}.curve.csv"));
        let tmp = path.with_extension("csv.tmp");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            writeln!(f, "sigma,psnr")?;
            for (x, y) in pts {
                writeln!(f, "{x},{y}")?;
            }
        }
        std::fs::rename(&tmp, &path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Convenience used by tests and the CLI: derived seed lists.
pub fn seed_range(master: u64, problem_id: &str, solver_id: &str, count: usize, base: u64) -> Vec<u64> {
    (0..count)
        .map(|i| derive_seed(master, problem_id, solver_id, 0, base + i as u64))
        .collect()
}

/// Rolling buffer used by the CLI for compact progress summaries.
#[derive(Debug, Default)]
pub struct RecentFailures {
    buf: VecDeque<String>,
}

impl RecentFailures {
    pub fn push(&mut self, msg: String) {
        if self.buf.len() >= 5 {
            self.buf.pop_front();
        }
        self.buf.push_back(msg);
    }

    pub fn iter(&self) -> impl Iterator<Item = &String> {
        self.buf.iter()
    }
}
