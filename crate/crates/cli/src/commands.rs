use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use orthosync::datagen::{
    generate, load_edge_list, load_instance, save_instance, save_poses, SynthParams,
};
use orthosync::metrics::evaluate;
use orthosync::solver::{
    run, run_from, spectral_init, Algorithm, EigMethod, IterationTrace, SolverConfig, StopReason,
};
use orthosync::theory::{check_lemma_error_contraction, check_ns_region, run_loo_suite};
use orthosync::{BlockStack, SyncInstance};

use crate::args::{AlignArgs, BenchArgs, Cli, Format, SolveArgs, SynthArgs, VerifyArgs};
use crate::error::{CliError, CliResult};

pub const RESULT_SCHEMA_VERSION: u32 = 1;

const LOO_GROWTH_LIMIT: f64 = 3.0;
const INCOHERENCE_LIMIT: f64 = 2.0;

fn out_dir(cli: &Cli) -> CliResult<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T], format: Format) -> CliResult<()> {
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_path(path)?;
            for r in rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
        Format::Json => write_json(path, &rows)?,
    }
    Ok(())
}

fn table_name(stem: &str, format: Format) -> String {
    match format {
        Format::Csv => format!("{stem}.csv"),
        Format::Json => format!("{stem}.json"),
    }
}

pub fn synth(cli: &Cli, args: &SynthArgs) -> CliResult<()> {
    let dir = cli
        .out
        .clone()
        .ok_or_else(|| CliError::Usage("synth needs --out <DIR>".into()))?;
    let params = SynthParams {
        n: args.n,
        d: args.d,
        sigma: args.sigma,
        p: args.p,
        seed: cli.seed,
    };
    let inst = generate(&params)?;
    save_instance(&dir, &inst)?;
    println!("{}", dir.display());
    println!(
        "n={} d={} sigma={} p={} seed={} observed_pairs={} ({:.4} of all pairs)",
        params.n,
        params.d,
        params.sigma,
        params.p,
        params.seed,
        inst.observation.num_edges(),
        inst.observation.observed_fraction()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct SolveResult<'a> {
    schema_version: u32,
    n: usize,
    d: usize,
    config: &'a SolverConfig,
    mu: f64,
    iterations: usize,
    stop_reason: StopReason,
    init_method: Option<EigMethod>,
    init_time_s: f64,
    solve_time_s: f64,
    objective: f64,
    rel_err: Option<f64>,
    d_f: Option<f64>,
    mse: Option<f64>,
    threads: usize,
}

fn solve_result<'a>(
    cli: &Cli,
    inst: &SyncInstance,
    config: &'a SolverConfig,
    x: &BlockStack,
    trace: &IterationTrace,
) -> CliResult<SolveResult<'a>> {
    let eval = match &inst.ground_truth {
        Some(z) => Some(evaluate(x, z)?),
        None => None,
    };
    Ok(SolveResult {
        schema_version: RESULT_SCHEMA_VERSION,
        n: inst.n(),
        d: inst.d(),
        config,
        mu: trace.mu,
        iterations: trace.iterations(),
        stop_reason: trace.stop_reason,
        init_method: trace.init_method,
        init_time_s: trace.init_time_s,
        solve_time_s: trace.solve_time_s(),
        objective: trace.last().objective,
        rel_err: eval.as_ref().map(|e| e.rel_err),
        d_f: eval.as_ref().map(|e| e.d_f),
        mse: eval.as_ref().map(|e| e.mse),
        threads: cli.threads,
    })
}

fn print_solve_summary(result: &SolveResult<'_>) {
    let mut line = format!(
        "iterations={} stop={:?} objective={:.6e} init={:.3}s solve={:.3}s",
        result.iterations, result.stop_reason, result.objective, result.init_time_s, result.solve_time_s
    );
    if let (Some(r), Some(m)) = (result.rel_err, result.mse) {
        line.push_str(&format!(" rel_err={r:.4e} mse={m:.4e}"));
    }
    println!("{line}");
}

pub fn solve(cli: &Cli, args: &SolveArgs) -> CliResult<()> {
    let inst = load_instance(&args.instance)?;
    let config = args.solver.config(cli.threads > 1);
    let out = run(&inst.observation, &config, inst.ground_truth.as_ref())?;
    let dir = out_dir(cli)?;
    let result = solve_result(cli, &inst, &config, &out.x, &out.trace)?;
    write_json(&dir.join("result.json"), &result)?;
    write_rows(&dir.join(table_name("trace", cli.format)), &out.trace.records, cli.format)?;
    print_solve_summary(&result);
    Ok(())
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    n: usize,
    d: usize,
    sigma: f64,
    p: f64,
}

#[derive(Debug, Clone, Copy)]
struct Variant {
    algorithm: Algorithm,
    t_s: Option<usize>,
}

#[derive(Debug, Serialize)]
struct BenchRow {
    n: usize,
    d: usize,
    sigma: f64,
    p: f64,
    algorithm: &'static str,
    t_s: Option<usize>,
    trials: usize,
    rel_err_mean: f64,
    rel_err_std: f64,
    dfn_mean: f64,
    time_mean_s: f64,
    time_std_s: f64,
    iters_mean: f64,
    status: String,
}

#[derive(Debug, Default)]
struct Samples {
    rel_err: Vec<f64>,
    dfn: Vec<f64>,
    time: Vec<f64>,
    iters: Vec<f64>,
    errors: Vec<String>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn algorithm_name(a: Algorithm) -> &'static str {
    match a {
        Algorithm::NsRgs => "ns_rgs",
        Algorithm::Gpm => "gpm",
    }
}

/// Trials of one cell; every variant sees the same instances and the same
/// spectral initialization.
fn bench_cell(
    cell: Cell,
    variants: &[Variant],
    trials: usize,
    seed_base: u64,
    base: &SolverConfig,
) -> Vec<BenchRow> {
    let mut samples: Vec<Samples> = variants.iter().map(|_| Samples::default()).collect();
    for trial in 0..trials {
        let seed = seed_base + trial as u64;
        let prepared = generate(&SynthParams {
            n: cell.n,
            d: cell.d,
            sigma: cell.sigma,
            p: cell.p,
            seed,
        })
        .and_then(|inst| {
            let start = Instant::now();
            let x0 = spectral_init(&inst.observation)?.x0;
            Ok((inst, x0, start.elapsed().as_secs_f64()))
        });
        let (inst, x0, init_time) = match prepared {
            Ok(v) => v,
            Err(e) => {
                for s in &mut samples {
                    s.errors.push(format!("seed {seed}: {e}"));
                }
                continue;
            }
        };
        let z = inst.truth().expect("synthetic instances carry truth");
        for (variant, s) in variants.iter().zip(&mut samples) {
            let config = SolverConfig {
                algorithm: variant.algorithm,
                t_s: variant.t_s.unwrap_or(base.t_s),
                retraction: match variant.algorithm {
                    Algorithm::NsRgs => base.retraction,
                    Algorithm::Gpm => orthosync::solver::Retraction::ExactSvd,
                },
                ..base.clone()
            };
            match run_from(&inst.observation, x0.clone(), &config, Some(z)) {
                Ok(out) => {
                    let last = out.trace.last();
                    s.rel_err.push(last.rel_err.unwrap_or(f64::NAN));
                    s.dfn.push(last.d_f.unwrap_or(f64::NAN) / (cell.n as f64).sqrt());
                    s.time.push(init_time + out.trace.solve_time_s());
                    s.iters.push(out.trace.iterations() as f64);
                }
                Err(e) => s.errors.push(format!("seed {seed}: {e}")),
            }
        }
    }
    variants
        .iter()
        .zip(samples)
        .map(|(variant, s)| {
            let (rel_err_mean, rel_err_std) = mean_std(&s.rel_err);
            let (time_mean_s, time_std_s) = mean_std(&s.time);
            let status = match s.errors.first() {
                None => "ok".to_string(),
                Some(first) => format!("failed {}/{trials}: {first}", s.errors.len()),
            };
            BenchRow {
                n: cell.n,
                d: cell.d,
                sigma: cell.sigma,
                p: cell.p,
                algorithm: algorithm_name(variant.algorithm),
                t_s: variant.t_s,
                trials,
                rel_err_mean,
                rel_err_std,
                dfn_mean: mean_std(&s.dfn).0,
                time_mean_s,
                time_std_s,
                iters_mean: mean_std(&s.iters).0,
                status,
            }
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct BenchMeta {
    schema_version: u32,
    threads: usize,
    parallel_cells: bool,
    seed_base: u64,
    trials: usize,
    cells: usize,
    time_includes_init: bool,
}

pub fn bench(cli: &Cli, args: &BenchArgs) -> CliResult<()> {
    if args.trials < 1 {
        return Err(CliError::Usage("--trials must be >= 1".into()));
    }
    if args.algorithms.is_empty() || args.t_s.is_empty() {
        return Err(CliError::Usage("--algorithms and --t-s must be non-empty".into()));
    }
    let mut cells = Vec::new();
    for &n in &args.n {
        for &d in &args.d {
            for &sigma in &args.sigma {
                for &p in &args.p {
                    SynthParams {
                        n,
                        d,
                        sigma,
                        p,
                        seed: 0,
                    }
                    .validate()?;
                    cells.push(Cell { n, d, sigma, p });
                }
            }
        }
    }
    if cells.is_empty() {
        return Err(CliError::Usage("bench grid is empty".into()));
    }
    let mut variants = Vec::new();
    for a in &args.algorithms {
        let cfg = crate::args::SolverArgs {
            algorithm: *a,
            retraction: None,
            t_s: 1,
            mu: None,
            max_iter: args.max_iter,
            stop_tol: args.stop_tol,
            degree_normalized: false,
        }
        .config(false);
        match cfg.algorithm {
            Algorithm::NsRgs => variants.extend(args.t_s.iter().map(|&t| Variant {
                algorithm: Algorithm::NsRgs,
                t_s: Some(t),
            })),
            Algorithm::Gpm => variants.push(Variant {
                algorithm: Algorithm::Gpm,
                t_s: None,
            }),
        }
    }
    let base = SolverConfig {
        max_iter: args.max_iter,
        stop_tol: args.stop_tol,
        step_stats: false,
        parallel: !cli.parallel_cells && cli.threads > 1,
        ..SolverConfig::default()
    };
    base.validate()?;
    for v in &variants {
        SolverConfig {
            t_s: v.t_s.unwrap_or(1),
            ..base.clone()
        }
        .validate()?;
    }

    let rows: Vec<BenchRow> = if cli.parallel_cells {
        cells
            .par_iter()
            .map(|&c| bench_cell(c, &variants, args.trials, cli.seed, &base))
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect()
    } else {
        cells
            .iter()
            .flat_map(|&c| {
                let rows = bench_cell(c, &variants, args.trials, cli.seed, &base);
                for r in &rows {
                    eprintln!(
                        "n={} d={} sigma={} p={} {} t_s={}: rel_err {:.4e} time {:.3}s {}",
                        r.n,
                        r.d,
                        r.sigma,
                        r.p,
                        r.algorithm,
                        r.t_s.map_or("-".to_string(), |t| t.to_string()),
                        r.rel_err_mean,
                        r.time_mean_s,
                        r.status
                    );
                }
                rows
            })
            .collect()
    };

    let path = cli
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(table_name("bench", cli.format)));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_rows(&path, &rows, cli.format)?;
    write_json(
        &path.with_extension("meta.json"),
        &BenchMeta {
            schema_version: RESULT_SCHEMA_VERSION,
            threads: cli.threads,
            parallel_cells: cli.parallel_cells,
            seed_base: cli.seed,
            trials: args.trials,
            cells: cells.len(),
            time_includes_init: true,
        },
    )?;
    println!("{}", path.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct CheckLine {
    check: &'static str,
    status: &'static str,
    detail: String,
}

#[derive(Debug, Serialize)]
struct VerifySummary {
    schema_version: u32,
    n: usize,
    d: usize,
    sigma: Option<f64>,
    t_max: usize,
    checks: Vec<CheckLine>,
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

/// Numerical failures become a failed check; anything else aborts.
fn numerical(checks: &mut Vec<CheckLine>, check: &'static str, e: orthosync::SyncError) -> CliResult<()> {
    if e.is_numerical() {
        checks.push(CheckLine {
            check,
            status: "FAIL",
            detail: format!("solver error: {e}"),
        });
        Ok(())
    } else {
        Err(e.into())
    }
}

pub fn verify(cli: &Cli, args: &VerifyArgs) -> CliResult<()> {
    let inst = match &args.instance {
        Some(dir) => load_instance(dir)?,
        None => generate(&SynthParams {
            n: args.n,
            d: args.d,
            sigma: args.sigma,
            p: args.p,
            seed: cli.seed,
        })?,
    };
    if inst.ground_truth.is_none() {
        return Err(CliError::Usage("verify needs an instance with ground truth".into()));
    }
    if inst.n() > args.max_n {
        return Err(CliError::Usage(format!(
            "n = {} exceeds --max-n {} (verify runs n+1 solver sequences)",
            inst.n(),
            args.max_n
        )));
    }
    let config = args.solver.config(cli.threads > 1);
    config.validate()?;
    let dir = out_dir(cli)?;
    let mut checks = Vec::new();
    match run(&inst.observation, &config, inst.ground_truth.as_ref()) {
        Ok(out) => checks.push(CheckLine {
            check: "ns_region",
            status: verdict(check_ns_region(&out.trace)),
            detail: match out.trace.max_ns_defect() {
                Some(v) => format!("max ||I - F^T F||_2 = {v:.3e}"),
                None => "no Newton-Schulz statistics (gpm)".into(),
            },
        }),
        Err(e) => numerical(&mut checks, "ns_region", e)?,
    }
    match check_lemma_error_contraction(&inst, &config, args.t_max) {
        Ok(c) => checks.push(CheckLine {
            check: "contraction",
            status: verdict(c.pass),
            detail: format!(
                "C = {:.3e} vs 8 sigma sqrt(nd) = {:.3e}; max d_F/sqrt(n) = {:.3e}",
                c.constant, c.threshold, c.max_dist_ratio
            ),
        }),
        Err(e) => numerical(&mut checks, "contraction", e)?,
    }
    match run_loo_suite(&inst, &config, args.t_max) {
        Ok(rep) => {
            let growth = rep.loo_growth();
            let inc = rep.max_incoherence_ratio();
            checks.push(CheckLine {
                check: "loo_boundedness",
                status: verdict(growth <= LOO_GROWTH_LIMIT),
                detail: format!("max_t D_t / D_1 = {growth:.3} (limit {LOO_GROWTH_LIMIT})"),
            });
            checks.push(CheckLine {
                check: "incoherence",
                status: verdict(inc <= INCOHERENCE_LIMIT),
                detail: format!("max ratio = {inc:.4} (limit {INCOHERENCE_LIMIT})"),
            });
            checks.push(CheckLine {
                check: "sigma_min_bound",
                status: verdict(rep.sigma_min_bound_holds()),
                detail: "sigma_min(Z^T X^t) >= n - d_F^2 / 2".into(),
            });
            let path = dir.join(table_name("theory", cli.format));
            match cli.format {
                Format::Csv => fs::write(path, rep.to_long_csv())?,
                Format::Json => write_json(&path, &rep)?,
            }
        }
        Err(e) => numerical(&mut checks, "loo_suite", e)?,
    }

    for c in &checks {
        println!("{} {}: {}", c.status, c.check, c.detail);
    }
    write_json(
        &dir.join("verify.json"),
        &VerifySummary {
            schema_version: RESULT_SCHEMA_VERSION,
            n: inst.n(),
            d: inst.d(),
            sigma: inst.sigma(),
            t_max: args.t_max,
            checks,
        },
    )?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct ResidualRow {
    node: usize,
    residual: f64,
}

pub fn align(cli: &Cli, args: &AlignArgs) -> CliResult<()> {
    let inst = load_edge_list(&args.edges, args.truth.as_deref())?;
    let config = args.solver.config(cli.threads > 1);
    let out = run(&inst.observation, &config, inst.ground_truth.as_ref())?;
    let dir = out_dir(cli)?;
    save_poses(&dir.join("poses.txt"), &out.x)?;
    if let Some(z) = &inst.ground_truth {
        let eval = evaluate(&out.x, z)?;
        let rows: Vec<ResidualRow> = eval
            .residuals
            .iter()
            .enumerate()
            .map(|(i, &residual)| ResidualRow { node: i + 1, residual })
            .collect();
        write_rows(&dir.join(table_name("residuals", cli.format)), &rows, cli.format)?;
    }
    let result = solve_result(cli, &inst, &config, &out.x, &out.trace)?;
    write_json(&dir.join("result.json"), &result)?;
    print_solve_summary(&result);
    Ok(())
}
