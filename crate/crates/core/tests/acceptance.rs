//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines always reach the terminal.

use std::process::ExitCode;
use std::time::Instant;

use freetime_qrnet::harness::config::RunConfig;
use freetime_qrnet::harness::experiment::{prepare, run_benchmark, strategy_rows};
use freetime_qrnet::harness::metrics::{write_metrics_csv, MetricsRow};
use freetime_qrnet::harness::oracle::{
    free_time_vs_grid, gradient_oracle, marching_benefit, riccati_properties, riccati_vs_ddp, rk4_order,
    terminal_identity, OracleResult,
};
use freetime_qrnet::policy::Architecture;
use freetime_qrnet::Result;

struct Line {
    id: usize,
    title: &'static str,
    passed: bool,
    detail: String,
    seconds: f64,
}

fn from_oracle(id: usize, title: &'static str, start: Instant, r: Result<OracleResult>) -> Line {
    let seconds = start.elapsed().as_secs_f64();
    match r {
        Ok(r) => Line {
            id,
            title,
            passed: r.passed,
            detail: format!("measured {:.3e} vs {:.3e}; {}", r.measured, r.tolerance, r.detail),
            seconds,
        },
        Err(e) => Line { id, title, passed: false, detail: format!("error: {e}"), seconds },
    }
}

fn ensemble<'a>(rows: &'a [MetricsRow], strategy: &str, seed: u64) -> &'a MetricsRow {
    rows.iter()
        .find(|r| r.strategy == strategy && r.seed == seed && r.iteration == "ensemble")
        .expect("ensemble row present")
}

fn csv_bytes(rows: &[MetricsRow]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_metrics_csv(rows, &mut buf).expect("in-memory csv");
    buf
}

/// QRnet rows for both strategies and MLP rows for IVP-ART, sharing the
/// labeled data of each seed.
fn benchmark_rows(cfg: &RunConfig) -> Result<(Vec<MetricsRow>, Vec<MetricsRow>)> {
    let solver = cfg.solver_config()?;
    let mut qrnet = Vec::new();
    let mut mlp = Vec::new();
    for &seed in &cfg.experiment.seeds {
        let prepared = prepare(cfg, seed)?;
        let initial = prepared.initial_policy(cfg, Architecture::Qrnet)?;
        let m0 = prepared.evaluate(cfg, &initial)?;
        for strategy in [cfg.ivp_art(), cfg.dagger()] {
            let run = prepared.run(cfg, &solver, &initial, strategy.clone(), Architecture::Qrnet)?;
            qrnet.extend(strategy_rows(cfg, &prepared, &m0, &run, strategy.name())?);
        }
        let initial = prepared.initial_policy(cfg, Architecture::Mlp)?;
        let m0 = prepared.evaluate(cfg, &initial)?;
        let run = prepared.run(cfg, &solver, &initial, cfg.ivp_art(), Architecture::Mlp)?;
        mlp.extend(strategy_rows(cfg, &prepared, &m0, &run, "ivp-art-mlp")?);
    }
    Ok((qrnet, mlp))
}

fn end_to_end(cfg: &RunConfig, qrnet: &[MetricsRow]) -> (bool, String) {
    let seeds = &cfg.experiment.seeds;
    let n = seeds.len() as f64;
    let ivp: Vec<&MetricsRow> = seeds.iter().map(|&s| ensemble(qrnet, "ivp-art", s)).collect();
    let success = ivp.iter().map(|r| r.success_rate).sum::<f64>() / n;
    let ratio = ivp.iter().map(|r| r.mean_ratio).sum::<f64>() / n;
    let a = success >= 0.90 && ratio <= 1.5;
    let b = seeds
        .iter()
        .all(|&s| ensemble(qrnet, "ivp-art", s).mean_ratio <= ensemble(qrnet, "dagger", s).mean_ratio);
    let mut steps = 0;
    let mut rising = 0;
    for &s in seeds {
        let rates: Vec<f64> = (0..=cfg.sampling.iterations)
            .filter_map(|k| {
                let k = k.to_string();
                qrnet.iter().find(|r| r.strategy == "ivp-art" && r.seed == s && r.iteration == k)
            })
            .map(|r| r.success_rate)
            .collect();
        for w in rates.windows(2) {
            steps += 1;
            rising += (w[1] >= w[0]) as usize;
        }
    }
    let c = rising >= 4;
    let per_seed: Vec<String> = seeds
        .iter()
        .map(|&s| {
            format!(
                "seed {s}: ivp-art {:.3} vs dagger {:.3}",
                ensemble(qrnet, "ivp-art", s).mean_ratio,
                ensemble(qrnet, "dagger", s).mean_ratio
            )
        })
        .collect();
    let detail = format!(
        "(a) success {success:.3}, ratio {ratio:.3} [{}]; (b) {} [{}]; (c) {rising}/{steps} non-decreasing [{}]",
        pass(a),
        per_seed.join(", "),
        pass(b),
        pass(c)
    );
    (a && b && c, detail)
}

fn pass(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn main() -> ExitCode {
    let _ = env_logger::builder().is_test(true).try_init();
    let mut lines = Vec::new();

    let t = Instant::now();
    let ddp = RunConfig::default().solver.ddp;
    lines.push(from_oracle(1, "DDP matches Riccati on the LQ double integrator", t, Ok(riccati_vs_ddp(&ddp))));

    let t = Instant::now();
    lines.push(from_oracle(2, "free-time optimum matches grid search", t, free_time_vs_grid(2e-3)));

    let t = Instant::now();
    lines.push(from_oracle(3, "marching converges at least as often", t, marching_benefit(&RunConfig::default())));

    let t = Instant::now();
    lines.push(from_oracle(4, "QRnet terminal identity", t, terminal_identity(100)));

    let t = Instant::now();
    lines.push(from_oracle(5, "training-loss gradients match finite differences", t, gradient_oracle()));

    let t = Instant::now();
    lines.push(from_oracle(6, "Riccati table properties", t, riccati_properties(5e-4)));

    let cfg = RunConfig::benchmark();
    let t = Instant::now();
    match benchmark_rows(&cfg) {
        Ok((qrnet, mlp)) => {
            let seconds = t.elapsed().as_secs_f64();
            let (ok, detail) = end_to_end(&cfg, &qrnet);
            lines.push(Line { id: 7, title: "scaled end-to-end benchmark", passed: ok, detail, seconds });

            let seeds = &cfg.experiment.seeds;
            let n = seeds.len() as f64;
            let q = seeds.iter().map(|&s| ensemble(&qrnet, "ivp-art", s).success_rate).sum::<f64>() / n;
            let m = seeds.iter().map(|&s| ensemble(&mlp, "ivp-art-mlp", s).success_rate).sum::<f64>() / n;
            lines.push(Line {
                id: 8,
                title: "plain MLP trails QRnet",
                passed: m <= q - 0.3,
                detail: format!("ensemble success MLP {m:.3}, QRnet {q:.3}"),
                seconds,
            });

            let t = Instant::now();
            let again = run_benchmark(&cfg, &[cfg.ivp_art(), cfg.dagger()], Architecture::Qrnet);
            let seconds = t.elapsed().as_secs_f64();
            let (passed, detail) = match again {
                Ok(rows) => {
                    let same = csv_bytes(&rows) == csv_bytes(&qrnet);
                    (same, format!("{} rows, metrics CSV {}", rows.len(), if same { "identical" } else { "differs" }))
                }
                Err(e) => (false, format!("error: {e}")),
            };
            lines.push(Line { id: 9, title: "repeat run is byte-identical", passed, detail, seconds });
        }
        Err(e) => {
            let seconds = t.elapsed().as_secs_f64();
            for (id, title) in [
                (7, "scaled end-to-end benchmark"),
                (8, "plain MLP trails QRnet"),
                (9, "repeat run is byte-identical"),
            ] {
                lines.push(Line { id, title, passed: false, detail: format!("error: {e}"), seconds });
            }
        }
    }

    let t = Instant::now();
    lines.push(from_oracle(10, "RK4 order", t, rk4_order().map(|r| r.0)));

    println!();
    for l in &lines {
        println!("[{}] criterion {:>2}: {} ({:.1} s) {}", pass(l.passed), l.id, l.title, l.seconds, l.detail);
    }
    let failed = lines.iter().filter(|l| !l.passed).count();
    println!("acceptance: {} passed, {failed} failed", lines.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
