//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on failure.

use std::fs;
use std::time::{Duration, Instant};

use num_rational::BigRational;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kst_core::assembly::{build_transformer, BuildOptions, Metric, TransformerPipeline};
use kst_core::harness::{estimate_flaw_measure, lp_decomposition_bound, measure_dinf, measure_dp, verify_inner_equality, verify_memo};
use kst_core::inner::{phi_k_reference, synth_inner_floor, synth_inner_relu, InnerVariant};
use kst_core::memo::{synth_memo_bitpack, synth_memo_winding, winding_row_block, LabelAnchor, MemoBackend, WindingBackend};
use kst_core::scalar::f64_to_rational;
use kst_core::target::TargetOracle;
use kst_core::Matrix;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit_s: u64, detail: String) -> Outcome {
    check(elapsed.as_secs_f64() < limit_s as f64, format!("{detail}, {:.2}s (limit {limit_s}s)", elapsed.as_secs_f64()))
}

/// Zero error of the floor inner network on every K-bit dyadic and 10^3 random points.
fn phi_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checked = 0usize;
    for (d, n) in [(1, 1), (1, 2), (2, 2)] {
        for k in 1..=5usize {
            let net = synth_inner_floor(k, d, n).block().lower::<BigRational>().map_err(|e| e.to_string())?;
            let dyadics = (0..1u64 << k).map(|i| BigRational::new(i.into(), (1u64 << k).into()));
            let randoms: Vec<BigRational> = (0..1000).map(|_| f64_to_rational(rng.gen()).unwrap()).collect();
            for x in dyadics.chain(randoms) {
                let got = net.eval(&Matrix::filled(1, 1, x.clone())).map_err(|e| e.to_string())?;
                let want = phi_k_reference(&x, k, d * n).map_err(|e| e.to_string())?;
                if got.get(0, 0) != &want {
                    return Err(format!("dn={} K={k} x={x}: got {} want {want}", d * n, got.get(0, 0)));
                }
                checked += 1;
            }
        }
    }
    within(start.elapsed(), 10, format!("{checked} points, zero error"))
}

fn inner_identity() -> Outcome {
    let start = Instant::now();
    let mut total = 0;
    for (d, n, k) in [(1, 1, 1), (1, 2, 1), (1, 2, 2), (2, 2, 1), (2, 2, 2)] {
        let r = verify_inner_equality(k, d, n, InnerVariant::Floor, 200, 7, 1.0, 1.0).map_err(|e| e.to_string())?;
        if !r.passed {
            return Err(format!("(d,n,K)=({d},{n},{k}): {}", r.first_failure.unwrap_or_default()));
        }
        total += r.checked;
    }
    within(start.elapsed(), 60, format!("{total} points exact over 5 shapes"))
}

fn relu_flaw_contract() -> Outcome {
    let mut details = Vec::new();
    let mut ok = true;
    for (d, n, k, p, beta) in [(1usize, 2usize, 3usize, 1.0, 1.0), (1, 2, 3, 2.0, 0.5)] {
        let (net, report) = synth_inner_relu(k, d, n, p, beta).map_err(|e| e.to_string())?;
        let m = estimate_flaw_measure(&net, k, d * n, 100_000, 11, Some(&report)).map_err(|e| e.to_string())?;
        let limit = 1.5 * (-(k as f64) * beta * p).exp2();
        ok &= m.fraction <= limit && m.unflagged_mismatches == 0;
        details.push(format!(
            "p={p} beta={beta}: fraction {:.2e} <= {limit:.3e}, {} mismatches off flaw set",
            m.fraction, m.unflagged_mismatches
        ));
    }
    check(ok, details.join("; "))
}

fn bitpack_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for m_total in [8usize, 162, 512] {
        for trial in 0..50 {
            let theta: Vec<u8> = (0..m_total).map(|_| rng.gen_range(0..=1)).collect();
            let net = synth_memo_bitpack(&theta).map_err(|e| e.to_string())?.lower::<BigRational>().map_err(|e| e.to_string())?;
            for (i, bit) in theta.iter().enumerate() {
                let m = BigRational::from_integer((i as i64 + 1).into());
                let out = net.eval(&Matrix::filled(1, 1, m)).map_err(|e| e.to_string())?;
                if out.get(0, 0) != &BigRational::from_integer((*bit as i64).into()) {
                    return Err(format!("M={m_total} trial {trial}: wrong bit at m={}", i + 1));
                }
            }
        }
    }
    within(start.elapsed(), 10, "150 bit vectors reproduced at every m".into())
}

fn winding_memorization() -> Outcome {
    let delta = 0.05;
    let mut lines = Vec::new();
    let mut ok = true;
    for backend in [WindingBackend::Np, WindingBackend::Rc] {
        let (mut successes, mut runs) = (0, 0);
        for m_total in [2usize, 3, 4] {
            for set in 0..20u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(1000 * m_total as u64 + set);
                let points: Vec<(f64, f64)> = (1..=m_total).map(|m| (m as f64, rng.gen())).collect();
                runs += 1;
                let Ok(params) = synth_memo_winding(&points, delta, backend, 1_000_000, set) else { continue };
                // Re-verify through the formula and through the network realization.
                let block = winding_row_block(&params, false).map_err(|e| e.to_string())?.lower::<f64>().map_err(|e| e.to_string())?;
                let verified = points.iter().all(|(m, xi)| {
                    let net = block.eval(&Matrix::filled(1, 1, *m)).map(|o| *o.get(0, 0)).unwrap_or(f64::NAN);
                    (params.eval(*m) - xi).abs() <= delta && (net - xi).abs() <= delta + 1e-9
                });
                if !verified {
                    return Err(format!("{backend:?} M={m_total} set {set}: reported success fails re-evaluation"));
                }
                successes += 1;
            }
        }
        let rate = successes as f64 / runs as f64;
        ok &= rate >= 0.9;
        lines.push(format!("{backend:?} {successes}/{runs}"));
    }
    check(ok, format!("success rates {} (need >= 90%)", lines.join(", ")))
}

fn targets() -> Vec<TargetOracle> {
    vec![
        TargetOracle::constant(1, 2, 0.7).unwrap(),
        TargetOracle::projection(1, 2, 1, 1).unwrap(),
        TargetOracle::mean(1, 2).unwrap(),
    ]
}

fn build(f: &TargetOracle, eps: f64, metric: Metric, variant: InnerVariant, anchor: LabelAnchor) -> Result<TransformerPipeline, String> {
    let opts = BuildOptions { anchor, ..BuildOptions::default() };
    build_transformer(f, eps, metric, variant, MemoBackend::Bitpack, 0, &opts).map_err(|e| e.to_string())
}

fn end_to_end_linf() -> Outcome {
    let start = Instant::now();
    let mut details = Vec::new();
    let mut ok = true;
    for f in targets() {
        for eps in [0.5, 0.25] {
            let p = build(&f, eps, Metric::Linf, InnerVariant::Floor, LabelAnchor::Center)?;
            let r = measure_dinf(&p, &f, 1 << (p.params.k + 2), 1000, 3).map_err(|e| e.to_string())?;
            ok &= r.sup <= eps;
            details.push(format!("{} eps={eps}: {:.4}", f.name(), r.sup));
        }
    }
    check(ok, details.join("; ")).and_then(|d| within(start.elapsed(), 120, d))
}

fn end_to_end_lp() -> Outcome {
    let (p_exp, eps) = (2.0, 0.5);
    let mut details = Vec::new();
    let mut ok = true;
    for f in targets() {
        let p = build(&f, eps, Metric::Lp(p_exp), InnerVariant::Relu, LabelAnchor::Center)?;
        let r = measure_dp(&p, &f, p_exp, 10_000, 5).map_err(|e| e.to_string())?;
        let bound = lp_decomposition_bound(&p).map_err(|e| e.to_string())?;
        let dp_ok = r.estimate <= eps + 3.0 * r.std_error;
        let decomposition_ok = r.integral <= bound + 3.0 * r.integral_std_error;
        ok &= dp_ok && decomposition_ok;
        details.push(format!(
            "{} K={}: d_p {:.4} (se {:.1e}), d_p^p {:.2e} <= {:.2e}",
            f.name(),
            p.params.k,
            r.estimate,
            r.std_error,
            r.integral,
            bound
        ));
    }
    check(ok, details.join("; "))
}

fn telescoping_bound() -> Outcome {
    let mut details = Vec::new();
    let mut ok = true;
    for f in targets() {
        for eps in [0.5, 0.25] {
            let p = build(&f, eps, Metric::Linf, InnerVariant::Floor, LabelAnchor::Corner)?;
            let r = verify_memo(&p, &f, 1000, 0).map_err(|e| e.to_string())?;
            ok &= r.passed && r.exhaustive;
            details.push(format!("{} eps={eps}: {} pts, {:.4} <= {:.4}", f.name(), r.checked, r.max_deviation, r.bound));
        }
    }
    check(ok, details.join("; "))
}

fn determinism() -> Outcome {
    let config = r#"{"d":1,"n":2,"beta":1,"Q":1,"epsilon":0.5,"metric":{"lp":2},"inner_variant":"relu","memo_backend":"bitpack","target":"(x[1,1]+x[1,2])/2","seed":9}"#;
    let mut artifacts = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let cfg = dir.path().join("config.json");
        let pipe = dir.path().join("pipeline.json");
        let report = dir.path().join("report.json");
        let labels = dir.path().join("labels.csv");
        fs::write(&cfg, config).map_err(|e| e.to_string())?;
        let synth = kst_cli::run([
            "kstnet".as_ref(),
            "synth".as_ref(),
            cfg.as_os_str(),
            "-o".as_ref(),
            pipe.as_os_str(),
            "--labels".as_ref(),
            labels.as_os_str(),
        ]);
        let verify = kst_cli::run([
            "kstnet".as_ref(),
            "verify".as_ref(),
            cfg.as_os_str(),
            "--pipeline".as_ref(),
            pipe.as_os_str(),
            "--report".as_ref(),
            report.as_os_str(),
            "--dp-samples".as_ref(),
            "2000".as_ref(),
        ]);
        if synth != 0 || verify != 0 {
            return Err(format!("exit codes synth {synth}, verify {verify}"));
        }
        let read = |p: &std::path::Path| fs::read(p).map_err(|e| e.to_string());
        artifacts.push((read(&pipe)?, read(&report)?, read(&labels)?));
    }
    check(artifacts[0] == artifacts[1], format!("pipeline {} bytes, report {} bytes, identical", artifacts[0].0.len(), artifacts[0].1.len()))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("1 phi_K exactness", phi_exactness),
        ("2 inner-matrix identity", inner_identity),
        ("3 ReLU flaw contract", relu_flaw_contract),
        ("4 bitpack memorization", bitpack_exactness),
        ("5 winding memorization", winding_memorization),
        ("6 end-to-end d_inf", end_to_end_linf),
        ("7 end-to-end d_p", end_to_end_lp),
        ("8 error-bound telescoping", telescoping_bound),
        ("9 determinism", determinism),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        match run() {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
