//! Line-oriented experiment spec files.
//!
//! Format: `key = value` pairs under `[problem <id>]`, `[solver <id>]` and
//! `[bench]` section headers; `#` starts a comment. The file must begin by
//! declaring `spec_version = 1`. Paths are resolved relative to the spec
//! file. See `specs/` in the repository root for annotated examples.

use std::path::{Path, PathBuf};

use crate::diffusion::{DiffPirConfig, DmPlugConfig, DpsConfig, RedDiffConfig, RhoRule};
use crate::error::{Error, Result};
use crate::linops::FbpFilter;
use crate::metrics::NoiseModel;
use crate::pnpflow::{PnpFlowConfig, PnpFlowVariant};
use crate::priors::{EllipseSceneParams, GmmPrior};
use crate::variational::{AgdParams, PdParams};

use super::{
    synthetic_gmm, EllipseStyle, GroundTruth, Method, OperatorSpec, ProblemSpec, SmoothRegKind,
    SolverSpec,
};

pub const SPEC_VERSION: u64 = 1;

/// Parsed experiment description.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub problems: Vec<ProblemSpec>,
    pub solvers: Vec<SolverSpec>,
    /// Validation seed count for grid search.
    pub val_seeds: usize,
    /// Test seed count for evaluation.
    pub test_seeds: usize,
}

struct Section {
    header: String,
    line: usize,
    entries: Vec<(String, String, usize)>,
}

fn split_sections(text: &str) -> Result<(Vec<(String, String, usize)>, Vec<Section>)> {
    let mut preamble = Vec::new();
    let mut sections: Vec<Section> = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = ln + 1;
        let content = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let content = content.trim();
        if content.is_empty() {
            continue;
        }
        if content.starts_with('[') {
            if !content.ends_with(']') {
                return Err(Error::Config(format!("line {line}: unterminated section header")));
            }
            sections.push(Section {
                header: content[1..content.len() - 1].trim().to_string(),
                line,
                entries: Vec::new(),
            });
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {line}: expected key = value")))?;
        let entry = (key.trim().to_string(), value.trim().to_string(), line);
        match sections.last_mut() {
            Some(s) => s.entries.push(entry),
            None => preamble.push(entry),
        }
    }
    Ok((preamble, sections))
}

/// Key/value accessor that tracks which keys were consumed, so typos are
/// rejected instead of silently ignored.
struct Keys {
    entries: Vec<(String, String, usize)>,
    used: Vec<bool>,
}

impl Keys {
    fn new(entries: Vec<(String, String, usize)>) -> Self {
        let used = vec![false; entries.len()];
        Keys { entries, used }
    }

    fn get(&mut self, key: &str) -> Option<String> {
        for (i, (k, v, _)) in self.entries.iter().enumerate() {
            if k == key {
                self.used[i] = true;
                return Some(v.clone());
            }
        }
        None
    }

    fn require(&mut self, key: &str, ctx: &str) -> Result<String> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("{ctx}: missing required key {key:?}")))
    }

    fn get_f64(&mut self, key: &str) -> Result<Option<f64>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<f64>()
                .map(Some)
                .map_err(|_| Error::Config(format!("key {key:?}: bad number {v:?}"))),
        }
    }

    fn get_usize(&mut self, key: &str) -> Result<Option<usize>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<usize>()
                .map(Some)
                .map_err(|_| Error::Config(format!("key {key:?}: bad integer {v:?}"))),
        }
    }

    fn get_u64(&mut self, key: &str) -> Result<Option<u64>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<u64>()
                .map(Some)
                .map_err(|_| Error::Config(format!("key {key:?}: bad integer {v:?}"))),
        }
    }

    /// Grid axes: every `grid.<param> = v1,v2,...` entry.
    fn grids(&mut self) -> Result<Vec<(String, Vec<f64>)>> {
        let mut out = Vec::new();
        for (i, (k, v, line)) in self.entries.iter().enumerate() {
            if let Some(param) = k.strip_prefix("grid.") {
                let vals: Vec<f64> = v
                    .split(',')
                    .map(|s| {
                        s.trim().parse::<f64>().map_err(|_| {
                            Error::Config(format!("line {line}: bad grid value {s:?}"))
                        })
                    })
                    .collect::<Result<_>>()?;
                if vals.is_empty() {
                    return Err(Error::Config(format!("line {line}: empty grid")));
                }
                out.push((param.to_string(), vals));
                self.used[i] = true;
            }
        }
        Ok(out)
    }

    fn finish(&self, ctx: &str) -> Result<()> {
        for (i, (k, _, line)) in self.entries.iter().enumerate() {
            if !self.used[i] {
                return Err(Error::Config(format!("{ctx}: unknown key {k:?} (line {line})")));
            }
        }
        Ok(())
    }
}

/// Parses `path` into an [`ExperimentSpec`].
pub fn parse_spec_file(path: &Path) -> Result<ExperimentSpec> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_spec_text(&text, base)
}

pub fn parse_spec_text(text: &str, base_dir: &Path) -> Result<ExperimentSpec> {
    let (preamble, sections) = split_sections(text)?;
    let mut pre = Keys::new(preamble);
    let version = pre
        .get_u64("spec_version")?
        .ok_or_else(|| Error::Config("missing spec_version".into()))?;
    if version != SPEC_VERSION {
        return Err(Error::Config(format!("unsupported spec_version {version}")));
    }
    pre.finish("preamble")?;

    let mut problems = Vec::new();
    let mut solvers = Vec::new();
    let mut val_seeds = 3usize;
    let mut test_seeds = 5usize;

    for section in sections {
        let mut words = section.header.split_whitespace();
        let kind = words.next().unwrap_or_default();
        let id = words.next().unwrap_or_default().to_string();
        let mut keys = Keys::new(section.entries);
        match kind {
            "problem" => {
                if id.is_empty() {
                    return Err(Error::Config(format!(
                        "line {}: problem section needs an id",
                        section.line
                    )));
                }
                problems.push(parse_problem(&id, &mut keys, base_dir)?);
                keys.finish(&format!("problem {id}"))?;
            }
            "solver" => {
                if id.is_empty() {
                    return Err(Error::Config(format!(
                        "line {}: solver section needs an id",
                        section.line
                    )));
                }
                solvers.push(parse_solver(&id, &mut keys, base_dir)?);
                keys.finish(&format!("solver {id}"))?;
            }
            "bench" => {
                if let Some(v) = keys.get_usize("val_seeds")? {
                    val_seeds = v;
                }
                if let Some(v) = keys.get_usize("test_seeds")? {
                    test_seeds = v;
                }
                keys.finish("bench")?;
            }
            other => {
                return Err(Error::Config(format!(
                    "line {}: unknown section kind {other:?}",
                    section.line
                )))
            }
        }
    }
    if problems.is_empty() {
        return Err(Error::Config("spec defines no problems".into()));
    }
    if solvers.is_empty() {
        return Err(Error::Config("spec defines no solvers".into()));
    }
    Ok(ExperimentSpec { problems, solvers, val_seeds, test_seeds })
}

fn parse_problem(id: &str, keys: &mut Keys, base: &Path) -> Result<ProblemSpec> {
    let ctx = format!("problem {id}");
    let size = keys
        .get_usize("size")?
        .ok_or_else(|| Error::Config(format!("{ctx}: missing size")))?;

    let operator = match keys.require("operator", &ctx)?.as_str() {
        "identity" => OperatorSpec::Identity,
        "radon" => {
            let n_angles = keys
                .get_usize("angles")?
                .ok_or_else(|| Error::Config(format!("{ctx}: radon needs angles")))?;
            OperatorSpec::Radon { n_angles }
        }
        "mask" => OperatorSpec::Mask {
            missing_fraction: keys.get_f64("missing")?.unwrap_or(0.6),
            mask_seed: keys.get_u64("mask_seed")?.unwrap_or(0),
        },
        "gaussian_blur" => OperatorSpec::GaussianBlur { sigma: keys.get_f64("blur_sigma")?.unwrap_or(1.5) },
        "motion_blur" => OperatorSpec::MotionBlur { len: keys.get_usize("blur_len")?.unwrap_or(5) },
        "downsample" => OperatorSpec::Downsample { factor: keys.get_usize("factor")?.unwrap_or(2) },
        other => return Err(Error::Config(format!("{ctx}: unknown operator {other:?}"))),
    };

    let sigma = keys.get_f64("sigma")?.unwrap_or(0.01);
    let noise = match keys.get("noise").as_deref().unwrap_or("gaussian") {
        "gaussian" => NoiseModel::Gaussian { sigma },
        "signal" | "signal_dependent" => NoiseModel::SignalDependent { sigma_equiv: sigma },
        other => return Err(Error::Config(format!("{ctx}: unknown noise kind {other:?}"))),
    };

    let truth_value = keys.require("truth", &ctx)?;
    let truth = parse_truth(&truth_value, size, keys, base, &ctx)?;
    let problem_type = keys.get("type");

    Ok(ProblemSpec { id: id.to_string(), image_size: size, operator, noise, truth, problem_type })
}

fn parse_truth(
    value: &str,
    size: usize,
    keys: &mut Keys,
    base: &Path,
    ctx: &str,
) -> Result<GroundTruth> {
    if value == "synthetic-gmm" {
        let components = keys.get_usize("components")?.unwrap_or(3);
        let seed = keys.get_u64("truth_seed")?.unwrap_or(1);
        let var = keys.get_f64("truth_var")?.unwrap_or(0.0025);
        let style = EllipseStyle::from_name(
            keys.get("truth_style").as_deref().unwrap_or("default"),
        )?;
        let prior = synthetic_gmm(size, components, seed, var, style)?;
        let label = format!("synthetic-gmm:{}:{}:{}", style.name(), components, seed);
        return Ok(GroundTruth::Gmm { label, prior });
    }
    if value == "ellipses" {
        let mut params = EllipseSceneParams::new(size);
        if let Some(m) = keys.get_usize("max_ellipses")? {
            params.max_ellipses = m;
        }
        return Ok(GroundTruth::Ellipses { params });
    }
    if let Some(path) = value.strip_prefix("gmm:") {
        let full = base.join(path);
        let prior = GmmPrior::read_csv(&full)?;
        if prior.dim() != size * size {
            return Err(Error::Config(format!(
                "{ctx}: prior dim {} does not match size {size}",
                prior.dim()
            )));
        }
        return Ok(GroundTruth::Gmm { label: path.to_string(), prior });
    }
    if let Some(path) = value.strip_prefix("image:") {
        return Ok(GroundTruth::ImageFile { path: base.join(path) });
    }
    Err(Error::Config(format!("{ctx}: unknown truth source {value:?}")))
}

fn parse_solver(id: &str, keys: &mut Keys, base: &Path) -> Result<SolverSpec> {
    let ctx = format!("solver {id}");
    let method_name = keys.require("method", &ctx)?;
    let steps = keys.get_usize("steps")?;
    let schedule_t = keys.get_usize("schedule_t")?.unwrap_or(1000);

    let method = match method_name.as_str() {
        "fbp" => {
            let filter = match keys.get("filter").as_deref().unwrap_or("ramp") {
                "ramp" => FbpFilter::Ramp,
                "hann" => FbpFilter::Hann,
                other => return Err(Error::Config(format!("{ctx}: unknown filter {other:?}"))),
            };
            Method::Fbp { filter }
        }
        "tv" => Method::Tv {
            lambda: keys.get_f64("lambda")?.unwrap_or(0.001),
            params: PdParams {
                max_iters: keys.get_usize("max_iters")?.unwrap_or(2000),
                rel_tol: keys.get_f64("rel_tol")?.unwrap_or(1e-6),
                ..Default::default()
            },
        },
        "smooth" | "smooth_reg" => {
            let kind = match keys.get("reg").as_deref().unwrap_or("gmm") {
                "tikhonov" => SmoothRegKind::TikhonovIdentity,
                "tikhonov_gradient" => SmoothRegKind::TikhonovGradient,
                "gmm" => SmoothRegKind::GmmNegLog,
                other => return Err(Error::Config(format!("{ctx}: unknown reg {other:?}"))),
            };
            Method::SmoothReg {
                lambda: keys.get_f64("lambda")?.unwrap_or(0.001),
                kind,
                params: AgdParams {
                    max_iters: keys.get_usize("max_iters")?.unwrap_or(1000),
                    rel_tol: keys.get_f64("rel_tol")?.unwrap_or(1e-8),
                    lipschitz: None,
                },
            }
        }
        "dps" => Method::Dps {
            cfg: DpsConfig {
                guidance: keys.get_f64("gamma")?.unwrap_or(10.0),
                steps: steps.unwrap_or(1000),
            },
        },
        "diffpir" => Method::DiffPir {
            cfg: DiffPirConfig {
                lambda: keys.get_f64("lambda")?.unwrap_or(1.0),
                zeta: keys.get_f64("zeta")?.unwrap_or(0.7),
                steps: steps.unwrap_or(1000),
                sigma_y: keys.get_f64("sigma_y")?.unwrap_or(0.01),
                rho_rule: match keys.get("rho_rule").as_deref().unwrap_or("eq") {
                    "eq" => RhoRule::EqForm,
                    "alg" => RhoRule::AlgForm,
                    other => {
                        return Err(Error::Config(format!("{ctx}: unknown rho rule {other:?}")))
                    }
                },
                cg_iters: keys.get_usize("cg_iters")?.unwrap_or(100),
            },
        },
        "reddiff" => Method::RedDiff {
            cfg: RedDiffConfig {
                data_weight: keys.get_f64("gamma")?.unwrap_or(1.0),
                reg_weight: keys.get_f64("lambda")?.unwrap_or(0.01),
                step_size: keys.get_f64("lr")?.unwrap_or(0.05),
                steps: steps.unwrap_or(1000),
            },
        },
        "dmplug" => Method::DmPlug {
            cfg: DmPlugConfig {
                unrolled_steps: keys.get_usize("k")?.unwrap_or(4),
                step_size: keys.get_f64("lr")?.unwrap_or(0.01),
                max_grad_steps: steps.unwrap_or(1500),
                ..Default::default()
            },
        },
        "pnpflow" => Method::PnpFlow {
            cfg: PnpFlowConfig {
                steps: steps.unwrap_or(100),
                noise_realizations: keys.get_usize("k")?.unwrap_or(5),
                scaling_exponent: keys.get_f64("alpha")?.unwrap_or(1.0),
                strength: keys.get_f64("gamma")?.unwrap_or(1000.0),
                variant: match keys.get("variant").as_deref().unwrap_or("implicit") {
                    "implicit" => PnpFlowVariant::Implicit,
                    "explicit" => PnpFlowVariant::Explicit,
                    other => {
                        return Err(Error::Config(format!("{ctx}: unknown variant {other:?}")))
                    }
                },
                cg_iters: keys.get_usize("cg_iters")?.unwrap_or(300),
                ..Default::default()
            },
        },
        other => return Err(Error::Config(format!("{ctx}: unknown method {other:?}"))),
    };

    let mut spec = SolverSpec::new(id, method);
    spec.schedule_t = schedule_t;
    spec.grid = keys.grids()?;

    if let Some(prior_value) = keys.get("prior") {
        let (label, prior) = parse_prior(&prior_value, keys, base, &ctx)?;
        spec = spec.with_prior(label, prior);
    }
    Ok(spec)
}

fn parse_prior(
    value: &str,
    keys: &mut Keys,
    base: &Path,
    ctx: &str,
) -> Result<(String, GmmPrior)> {
    if value == "synthetic" {
        let size = keys
            .get_usize("prior_size")?
            .ok_or_else(|| Error::Config(format!("{ctx}: synthetic prior needs prior_size")))?;
        let components = keys.get_usize("prior_components")?.unwrap_or(3);
        let seed = keys.get_u64("prior_seed")?.unwrap_or(1);
        let var = keys.get_f64("prior_var")?.unwrap_or(0.0025);
        let style =
            EllipseStyle::from_name(keys.get("prior_style").as_deref().unwrap_or("default"))?;
        let prior = synthetic_gmm(size, components, seed, var, style)?;
        let label = format!("synthetic-gmm:{}:{}:{}", style.name(), components, seed);
        return Ok((label, prior));
    }
    if let Some(path) = value.strip_prefix("file:") {
        let full: PathBuf = base.join(path);
        return Ok((path.to_string(), GmmPrior::read_csv(&full)?));
    }
    Err(Error::Config(format!("{ctx}: unknown prior source {value:?}")))
}
