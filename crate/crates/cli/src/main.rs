//! Command-line driver: dataset generation, prior fitting, single runs, the
//! tuned benchmark, the noise-to-zero sweep, the noise-stability protocol and
//! the operator/noise mismatch protocol.
//!
//! All randomness flows from `--seed`; there is no wall-clock entropy, so any
//! invocation is reproducible bit for bit (wall-time column aside). Output
//! files are written to a temp file and renamed, never left partial.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use invbench_core::bench::{
    self, config::parse_spec_file, derive_seed, emit_csv, emit_curves, grid_search,
    mismatch_experiment, run_experiment, stability_over_noise, sweep_noise_to_zero, EllipseStyle,
    RunRecord,
};
use invbench_core::priors::{fit_gmm_em, generate_ellipse_image};

#[derive(Parser)]
#[command(
    name = "invbench",
    about = "Benchmark generative and variational reconstruction on linear inverse problems",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonRun {
    /// Experiment spec file (see specs/ for the format).
    #[arg(long)]
    spec: PathBuf,
    /// Master seed; every per-run seed derives from it.
    #[arg(long)]
    seed: u64,
    /// Output path (file or directory depending on the subcommand).
    /// Defaults into $INVBENCH_OUT_DIR or the current directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for independent runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic ellipse dataset (PGM + CSV pairs).
    GenData {
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 10)]
        count: usize,
        /// Scene flavor: default | sparse | dense.
        #[arg(long, default_value = "default")]
        style: String,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit an isotropic mixture prior to a directory of images by EM.
    FitPrior {
        /// Directory of .csv or .pgm images (all the same size).
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 3)]
        components: usize,
        #[arg(long, default_value_t = 40)]
        iters: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every solver on every problem with the configured parameters.
    Solve(CommonRun),
    /// Grid-tune each solver on validation seeds, then evaluate on test seeds.
    Bench(CommonRun),
    /// Re-tuned runs over a decreasing noise ladder; writes per-solver curves.
    SweepNoise {
        #[command(flatten)]
        common: CommonRun,
        /// Strictly decreasing noise levels.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.005, 0.002, 0.001, 0.0])]
        sigmas: Vec<f64>,
    },
    /// Fix ground truths, vary only the noise realization.
    Stability {
        #[command(flatten)]
        common: CommonRun,
        #[arg(long, default_value_t = 40)]
        realizations: usize,
        #[arg(long, default_value_t = 3)]
        images: usize,
    },
    /// Matched vs perturbed-angle vs signal-dependent-noise settings.
    Mismatch {
        #[command(flatten)]
        common: CommonRun,
        /// Maximum angle perturbation in degrees.
        #[arg(long, default_value_t = 0.7)]
        max_deg: f64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints usage/help itself; help and version are successes.
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(2),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if e.downcast_ref::<UsageError>().is_some() {
                eprintln!("error: {e}");
                ExitCode::from(2)
            } else {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        }
    }
}

/// Problems reported with exit code 2 (bad invocation) rather than 1.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn out_base() -> PathBuf {
    std::env::var_os("INVBENCH_OUT_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
}

fn resolve_out(out: Option<PathBuf>, default_name: &str) -> PathBuf {
    out.unwrap_or_else(|| out_base().join(default_name))
}

fn load_spec(path: &Path) -> anyhow::Result<invbench_core::bench::config::ExperimentSpec> {
    if !path.exists() {
        bail!(UsageError(format!("spec file {} does not exist", path.display())));
    }
    parse_spec_file(path).with_context(|| format!("parsing {}", path.display()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { size, count, style, seed, out } => {
            let style = EllipseStyle::from_name(&style)?;
            let dir = resolve_out(out, "data");
            std::fs::create_dir_all(&dir)?;
            let params = style.params(size);
            for i in 0..count {
                let s = derive_seed(seed, "gen-data", style.name(), i as u64, 0);
                let img = generate_ellipse_image(&params, &mut ChaCha8Rng::seed_from_u64(s));
                img.write_pgm(&dir.join(format!("img_{i:04}.pgm")))?;
                img.write_csv(&dir.join(format!("img_{i:04}.csv")))?;
            }
            println!("wrote {count} images to {}", dir.display());
            Ok(())
        }
        Command::FitPrior { data, components, iters, seed, out } => {
            let samples = load_image_dir(&data)?;
            if samples.is_empty() {
                bail!(UsageError(format!("no images found under {}", data.display())));
            }
            let fit = fit_gmm_em(&samples, components, iters, seed)?;
            let out = resolve_out(out, "prior.gmm.csv");
            fit.prior.write_csv(&out)?;
            println!(
                "fitted K={components} on {} samples; final log-likelihood {:.3}; wrote {}",
                samples.len(),
                fit.log_likelihood.last().copied().unwrap_or(f64::NAN),
                out.display()
            );
            Ok(())
        }
        Command::Solve(c) => {
            let spec = load_spec(&c.spec)?;
            let mut records = Vec::new();
            for problem in &spec.problems {
                for solver in &spec.solvers {
                    let seeds =
                        bench::seed_range(c.seed, &problem.id, &solver.id, spec.test_seeds, 0);
                    records.extend(run_experiment(problem, std::slice::from_ref(solver), &seeds, c.jobs));
                }
            }
            let out = resolve_out(c.out, "solve.csv");
            emit_csv(&records, &out)?;
            summarize(&records);
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Bench(c) => {
            let spec = load_spec(&c.spec)?;
            let mut records = Vec::new();
            for problem in &spec.problems {
                for solver in &spec.solvers {
                    let tuned = if solver.grid.is_empty() {
                        solver.clone()
                    } else {
                        let val_seeds = bench::seed_range(
                            c.seed,
                            &problem.id,
                            &solver.id,
                            spec.val_seeds,
                            1_000_000,
                        );
                        let gs = grid_search(problem, solver, &val_seeds, c.jobs)?;
                        eprintln!(
                            "tuned {} / {}: grid point {} of {}",
                            problem.id,
                            solver.id,
                            gs.best_index,
                            gs.table.len()
                        );
                        gs.best
                    };
                    let seeds =
                        bench::seed_range(c.seed, &problem.id, &solver.id, spec.test_seeds, 0);
                    records.extend(run_experiment(problem, &[tuned], &seeds, c.jobs));
                }
            }
            let out = resolve_out(c.out, "bench.csv");
            emit_csv(&records, &out)?;
            summarize(&records);
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::SweepNoise { common: c, sigmas } => {
            let spec = load_spec(&c.spec)?;
            let dir = resolve_out(c.out, "sweep");
            std::fs::create_dir_all(&dir)?;
            let mut all_records = Vec::new();
            for problem in &spec.problems {
                let sweep = sweep_noise_to_zero(
                    problem,
                    &spec.solvers,
                    &sigmas,
                    c.seed,
                    spec.val_seeds,
                    spec.test_seeds,
                    c.jobs,
                )?;
                let curve_dir = dir.join(&problem.id);
                let paths = emit_curves(&sweep.curves, &curve_dir)?;
                for p in paths {
                    println!("curve {}", p.display());
                }
                all_records.extend(sweep.records);
            }
            emit_csv(&all_records, &dir.join("records.csv"))?;
            summarize(&all_records);
            println!("wrote {}", dir.join("records.csv").display());
            Ok(())
        }
        Command::Stability { common: c, realizations, images } => {
            let spec = load_spec(&c.spec)?;
            let mut records = Vec::new();
            for problem in &spec.problems {
                for solver in &spec.solvers {
                    let rep = stability_over_noise(
                        problem,
                        solver,
                        realizations,
                        images,
                        c.seed,
                        c.jobs,
                    )?;
                    println!(
                        "{} / {}: avg sd psnr={:.4} ssim={:.5} dc={:.5}; max sd psnr={:.4} ssim={:.5} dc={:.5}",
                        problem.id,
                        solver.id,
                        rep.avg_sd.0,
                        rep.avg_sd.1,
                        rep.avg_sd.2,
                        rep.max_sd.0,
                        rep.max_sd.1,
                        rep.max_sd.2
                    );
                    records.extend(rep.records);
                }
            }
            let out = resolve_out(c.out, "stability.csv");
            emit_csv(&records, &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Mismatch { common: c, max_deg } => {
            let spec = load_spec(&c.spec)?;
            let mut records = Vec::new();
            for problem in &spec.problems {
                let seeds: Vec<u64> = (0..spec.test_seeds)
                    .map(|i| derive_seed(c.seed, &problem.id, "mismatch", 0, i as u64))
                    .collect();
                records.extend(mismatch_experiment(
                    problem,
                    &spec.solvers,
                    max_deg,
                    &seeds,
                    c.jobs,
                )?);
            }
            let out = resolve_out(c.out, "mismatch.csv");
            emit_csv(&records, &out)?;
            summarize(&records);
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

fn load_image_dir(dir: &Path) -> anyhow::Result<Vec<Vec<f64>>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv" || e == "pgm"))
        .collect();
    paths.sort();
    // Prefer CSV when both forms of the same image exist.
    let mut seen = std::collections::BTreeMap::new();
    for p in paths {
        let stem = p.file_stem().unwrap_or_default().to_owned();
        let is_csv = p.extension().is_some_and(|e| e == "csv");
        seen.entry(stem)
            .and_modify(|q: &mut PathBuf| {
                if is_csv {
                    *q = p.clone();
                }
            })
            .or_insert(p);
    }
    let mut out = Vec::new();
    for p in seen.values() {
        let img = if p.extension().is_some_and(|e| e == "pgm") {
            invbench_core::image::Image::read_pgm(p)?
        } else {
            invbench_core::image::Image::read_csv(p)?
        };
        out.push(img.into_data());
    }
    Ok(out)
}

/// Per-(problem, solver) mean PSNR lines on stdout.
fn summarize(records: &[RunRecord]) {
    use std::collections::BTreeMap;
    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    let mut failures: BTreeMap<(String, String), usize> = BTreeMap::new();
    for r in records {
        let key = (r.problem.clone(), r.solver.clone());
        match &r.metrics {
            Some(m) => groups.entry(key).or_default().push(m.psnr_db),
            None => *failures.entry(key).or_default() += 1,
        }
    }
    for ((p, s), vals) in &groups {
        let (mean, sd) = invbench_core::bench::mean_sd(vals);
        println!("{p} / {s}: psnr {mean:.3} +- {sd:.3} dB over {} runs", vals.len());
    }
    for ((p, s), n) in &failures {
        println!("{p} / {s}: {n} failed runs");
    }
}
