//! End-to-end acceptance checks, one PASS/FAIL line each.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{max_rel_error, random_shape, random_tensor, rng, storing_backprop};
use edtrain_core::bfp::{decode_group, dot_groups, encode_group, BfpConfig};
use edtrain_core::duplex::model::{build_variant, DuDnnSpec, ModelConfig, Variant};
use edtrain_core::duplex::network::{dudnn_backward, dudnn_forward, softmax_cross_entropy};
use edtrain_core::duplex::{
    forward_block, invert_block, FaultConfig, Precision, ResidualFuncParams, ReversibleBlockParams,
};
use edtrain_core::harness::{
    run_compare, run_lifetime, run_sweep, run_train, ComparisonReport, Experiment,
    ExperimentConfig, HardwareProfile, RefreshPolicy, SweepAxis,
};
use edtrain_core::memory::{refreshes_required, RetentionModel};
use edtrain_core::scheduler::{
    closed_form_lifetimes, measure_lifetimes, peak_transient_elements, training_step_schedule,
    LatencyModel, MacConvention, NetworkShape,
};
use edtrain_core::systolic::{
    expected_stats, gating_stats, job_energy, ArrayConfig, EnergyConstants, MatmulJob,
};
use rand::Rng;

type Outcome = Result<String, String>;

struct Runner {
    failures: usize,
}

impl Runner {
    fn check(
        &mut self,
        id: usize,
        name: &str,
        limit: Option<Duration>,
        f: impl FnOnce() -> Outcome,
    ) {
        let t = Instant::now();
        let mut out = f();
        let took = t.elapsed();
        if let (Ok(_), Some(limit)) = (&out, limit) {
            if took > limit {
                out = Err(format!("took {took:.1?}, limit {limit:?}"));
            }
        }
        let (tag, detail) = match &out {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        if out.is_err() {
            self.failures += 1;
        }
        println!("{tag} {id:>2} {name} [{took:.1?}] {detail}");
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn secs(s: u64) -> Option<Duration> {
    Some(Duration::from_secs(s))
}

fn reversibility() -> Outcome {
    let mut r = rng(1001);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let c = r.gen_range(1..=6);
        let side = r.gen_range(2..=8);
        let p = ReversibleBlockParams::new(
            ResidualFuncParams::branch(random_tensor([c, c, 3, 3], &mut r, 0.5)),
            ResidualFuncParams::branch(random_tensor([c, c, 3, 3], &mut r, 0.5)),
        )
        .map_err(|e| e.to_string())?;
        let x1 = random_tensor([2, c, side, side], &mut r, 2.0);
        let x2 = random_tensor([2, c, side, side], &mut r, 2.0);
        let (y1, y2) = forward_block(&x1, &x2, &p, &Precision::Exact).map_err(|e| e.to_string())?;
        let (a, b) = invert_block(&y1, &y2, &p, &Precision::Exact).map_err(|e| e.to_string())?;
        for (u, v) in a
            .data()
            .iter()
            .chain(b.data())
            .zip(x1.data().iter().chain(x2.data()))
        {
            worst = worst.max((u - v).abs());
        }
    }
    ensure(worst <= 1e-10, || format!("max abs error {worst:e}"))?;
    Ok(format!("max abs error {worst:e} over 100 blocks"))
}

fn small_model(blocks: usize) -> ModelConfig {
    ModelConfig {
        blocks,
        image_size: 8,
        pool_factor: 2,
        ..ModelConfig::default()
    }
}

fn recompute_vs_store() -> Outcome {
    let mut worst = 0.0f64;
    for blocks in [2, 4, 8] {
        let spec = DuDnnSpec::new(&small_model(blocks), &mut rng(2000 + blocks as u64))
            .map_err(|e| e.to_string())?;
        let mut r = rng(2100 + blocks as u64);
        let images = random_tensor([4, 1, 8, 8], &mut r, 1.0);
        let labels: Vec<usize> = (0..4).map(|_| r.gen_range(0..8)).collect();
        let (logits, state) =
            dudnn_forward(&spec, &images, &Precision::Exact).map_err(|e| e.to_string())?;
        let (_, g, _) = softmax_cross_entropy(&logits, &labels).map_err(|e| e.to_string())?;
        let grads = dudnn_backward(&spec, &state, &g, &Precision::Exact, None)
            .map_err(|e| e.to_string())?;
        let (_, oracle) = storing_backprop(&spec, &images, &labels);
        let err = max_rel_error(&grads.flatten(), &oracle);
        ensure(err <= 1e-10, || format!("L={blocks}: rel error {err:e}"))?;
        worst = worst.max(err);
    }
    Ok(format!("max rel error {worst:e} for L in {{2, 4, 8}}"))
}

fn finite_differences() -> Outcome {
    let spec = DuDnnSpec::new(&small_model(3), &mut rng(3000)).map_err(|e| e.to_string())?;
    let mut r = rng(3001);
    let images = random_tensor([4, 1, 8, 8], &mut r, 1.0);
    let labels: Vec<usize> = (0..4).map(|_| r.gen_range(0..8)).collect();
    let loss = |s: &DuDnnSpec| -> f64 {
        let (logits, _) = dudnn_forward(s, &images, &Precision::Exact).unwrap();
        softmax_cross_entropy(&logits, &labels).unwrap().0
    };
    let (logits, state) =
        dudnn_forward(&spec, &images, &Precision::Exact).map_err(|e| e.to_string())?;
    let (_, g, _) = softmax_cross_entropy(&logits, &labels).map_err(|e| e.to_string())?;
    let grads =
        dudnn_backward(&spec, &state, &g, &Precision::Exact, None).map_err(|e| e.to_string())?;
    let eps = 1e-5;
    let mut worst = 0.0f64;
    let mut samples = 0;
    for l in 0..3 {
        for second in [false, true] {
            let analytic = if second {
                &grads.blocks[l].1
            } else {
                &grads.blocks[l].0
            };
            for _ in 0..4 {
                let i = r.gen_range(0..analytic.len());
                let nudge = |d: f64| {
                    let mut p = spec.clone();
                    let f = if second {
                        &mut p.blocks[l].f2
                    } else {
                        &mut p.blocks[l].f1
                    };
                    f.weight.data_mut()[i] += d;
                    loss(&p)
                };
                let fd = (nudge(eps) - nudge(-eps)) / (2.0 * eps);
                let an = analytic.data()[i];
                // Entries whose gradient is at the noise floor of the difference quotient carry no signal.
                if an.abs() < 1e-6 {
                    continue;
                }
                let rel = (fd - an).abs() / an.abs();
                worst = worst.max(rel);
                samples += 1;
            }
        }
    }
    ensure(samples >= 12, || format!("only {samples} usable samples"))?;
    ensure(worst <= 1e-4, || format!("max rel error {worst:e}"))?;
    Ok(format!(
        "max rel error {worst:e} over {samples} sampled weights"
    ))
}

fn bfp_format() -> Outcome {
    let cfg = BfpConfig::default();
    ensure(cfg.encoded_size_bits() == 58, || {
        format!("{} bits", cfg.encoded_size_bits())
    })?;
    let mut r = rng(4000);
    for n in 0..10_000 {
        let scale_a = 2f64.powi(r.gen_range(-6..6));
        let scale_b = 2f64.powi(r.gen_range(-6..6));
        let va: Vec<f64> = (0..9).map(|_| scale_a * r.gen_range(-1.0..1.0)).collect();
        let vb: Vec<f64> = (0..9).map(|_| scale_b * r.gen_range(-1.0..1.0)).collect();
        let a = encode_group(&va, &cfg).map_err(|e| e.to_string())?;
        let b = encode_group(&vb, &cfg).map_err(|e| e.to_string())?;
        ensure(a.to_bits(&cfg) < 1u128 << 58, || {
            "encoding wider than 58 bits".into()
        })?;
        let oracle: f64 = decode_group(&a, &cfg)
            .iter()
            .zip(decode_group(&b, &cfg))
            .map(|(x, y)| x * y)
            .sum();
        let got = dot_groups(&a, &b, &cfg).value;
        ensure(got == oracle, || format!("pair {n}: {got} != {oracle}"))?;
    }
    Ok("58-bit groups; 10^4 dot products exact".into())
}

fn lifetime_equivalence() -> Outcome {
    let mut r = rng(5000);
    let cases = 150;
    for case in 0..cases {
        let variant = [Variant::DuDnn, Variant::Ca, Variant::Bo][case % 3];
        let shape = random_shape(&mut r, variant);
        let latency = LatencyModel::Analytical {
            macs_per_unit: r.gen_range(1..=500),
            convention: if r.gen_bool(0.5) {
                MacConvention::PerOutputChannel
            } else {
                MacConvention::Full
            },
        };
        let closed = closed_form_lifetimes(&shape, &latency).map_err(|e| e.to_string())?;
        let measured = measure_lifetimes(&shape, &latency, 1.0).map_err(|e| e.to_string())?;
        ensure(closed.t_data == measured.t_data, || {
            format!(
                "case {case}: closed {} vs traced {}",
                closed.t_data, measured.t_data
            )
        })?;
        ensure(closed.layers == measured.layers, || {
            format!("case {case}: per-layer terms differ")
        })?;
    }
    Ok(format!("{cases} random specs agree exactly"))
}

fn reference_refreshes() -> Outcome {
    let short = [2.66, 2.87, 3.03, 3.10];
    let long = [3.86, 4.02, 3.40, 4.13];
    let count = |v: &[f64]| -> Result<Vec<u64>, String> {
        v.iter()
            .map(|&l| refreshes_required(l, 3.35).map_err(|e| e.to_string()))
            .collect()
    };
    let (a, b) = (count(&short)?, count(&long)?);
    ensure(a == [0, 0, 0, 0] && b == [1, 1, 1, 1], || {
        format!("{a:?} {b:?}")
    })?;
    Ok(format!("{a:?} and {b:?}"))
}

fn retention_endpoints() -> Outcome {
    let m = RetentionModel::default();
    let hot = m.retention_at(100.0).map_err(|e| e.to_string())?;
    let cold = m.retention_at(-30.0).map_err(|e| e.to_string())?;
    ensure(hot == 3.35 && cold == 30.0, || format!("{hot} / {cold}"))?;
    let mut prev = cold;
    for i in 1..=20 {
        let t = -30.0 + 130.0 * i as f64 / 21.0;
        let v = m.retention_at(t).map_err(|e| e.to_string())?;
        ensure(v < prev, || format!("not decreasing at {t} °C"))?;
        prev = v;
    }
    ensure(prev > hot, || "interior below the hot endpoint".into())?;
    Ok("3.35 µs at 100 °C, 30 µs at -30 °C, strictly decreasing between".into())
}

fn memory_scaling() -> Outcome {
    let depths = [2usize, 4, 8];
    let peak = |blocks: usize, variant: Variant| -> Result<(usize, usize), String> {
        let cfg = ModelConfig {
            blocks,
            ..ModelConfig::default()
        };
        let base = DuDnnSpec::new(&cfg, &mut rng(0)).map_err(|e| e.to_string())?;
        let spec = build_variant(&base, variant).map_err(|e| e.to_string())?;
        let shape = NetworkShape::from_spec(&spec, 32);
        let l0 = &shape.layers[0];
        let buffer = l0.batch * l0.f1.c_in * l0.f1.height * l0.f1.width;
        let p =
            peak_transient_elements(&training_step_schedule(&shape).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
        Ok((p, buffer))
    };
    let mut du = Vec::new();
    let mut fi = Vec::new();
    let mut buffer = 0;
    for &l in &depths {
        let (p, b) = peak(l, Variant::DuDnn)?;
        du.push(p);
        buffer = b;
        fi.push(peak(l, Variant::Fi)?.0);
    }
    let spread = du.iter().max().unwrap() - du.iter().min().unwrap();
    ensure(spread <= buffer, || {
        format!("DuDNN peaks {du:?} vary by more than one buffer ({buffer})")
    })?;
    let xs: Vec<f64> = depths.iter().map(|&d| d as f64).collect();
    let ys: Vec<f64> = fi.iter().map(|&p| p as f64).collect();
    let r2 = r_squared(&xs, &ys);
    ensure(r2 >= 0.99 && ys[2] > ys[0], || {
        format!("FI peaks {fi:?}, R² {r2}")
    })?;
    Ok(format!("DuDNN {du:?}, FI {fi:?} (R² {r2:.5})"))
}

fn r_squared(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - (my + slope * (a - mx))).powi(2))
        .sum();
    let ss_tot: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    1.0 - ss_res / ss_tot
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn desk_comparison() -> Result<ComparisonReport, String> {
    let mut cfg = ExperimentConfig::default();
    cfg.experiment = Experiment::Compare {
        variants: vec![Variant::DuDnn, Variant::Fi, Variant::Ca, Variant::Bo],
        profiles: vec![HardwareProfile::hybrid_desk(), HardwareProfile::sram_desk()],
        seeds: SEEDS.to_vec(),
    };
    let report = run_compare(&cfg).map_err(|e| e.to_string())?;
    match &report.failure {
        Some(f) => Err(f.clone()),
        None => Ok(report),
    }
}

fn variant_ordering(report: &ComparisonReport) -> Outcome {
    let acc = |v: Variant| {
        report
            .cell(v, "hybrid-desk")
            .map(|c| c.mean_final_accuracy)
            .ok_or_else(|| format!("missing {v} cell"))
    };
    let (du, fi, ca, bo) = (
        acc(Variant::DuDnn)?,
        acc(Variant::Fi)?,
        acc(Variant::Ca)?,
        acc(Variant::Bo)?,
    );
    let line = format!("FI {fi:.4}, DuDNN {du:.4}, CA {ca:.4}, BO {bo:.4}");
    ensure(fi >= du - 0.01 && du > ca && ca > bo, || line.clone())?;
    Ok(line)
}

fn fault_robustness(clean_mean: f64) -> Outcome {
    let mut faulty = 0.0;
    let mut expired = 0.0;
    for &seed in &SEEDS {
        let mut c = ExperimentConfig::default();
        c.seed = seed;
        c.train.faults = Some(FaultConfig {
            read_yield: 0.999,
            expire_stored_activations: false,
        });
        faulty += run_train(&c).map_err(|e| e.to_string())?.final_accuracy;

        let mut f = ExperimentConfig::default().for_variant(Variant::Fi);
        f.seed = seed;
        f.hardware.refresh = RefreshPolicy::Disabled;
        let run = run_train(&f).map_err(|e| e.to_string())?;
        ensure(run.stored_data_expired, || {
            "FI activations did not outlive retention".into()
        })?;
        expired += run.final_accuracy;
    }
    let n = SEEDS.len() as f64;
    let (faulty, expired) = (faulty / n, expired / n);
    let chance = 1.0 / ModelConfig::default().classes as f64;
    let line = format!(
        "DuDNN clean {clean_mean:.4} vs yield 0.999 {faulty:.4}; FI expired {expired:.4} (chance {chance:.3})"
    );
    ensure(
        clean_mean - faulty <= 0.01 && expired <= 2.0 * chance,
        || line.clone(),
    )?;
    Ok(line)
}

fn gating_energy() -> Outcome {
    let cfg = BfpConfig::default();
    let k = EnergyConstants::default();
    let mut r = rng(11_000);
    let groups = 500;
    let dense: Vec<Vec<f64>> = (0..2 * groups)
        .map(|_| (0..9).map(|_| r.gen_range(0.5..2.0)).collect())
        .collect();
    let mut energies = Vec::new();
    for i in 0..=10 {
        let zeros = groups * i / 10;
        let mut a = Vec::new();
        let mut b = Vec::new();
        for g in 0..groups {
            let av = if g < zeros {
                vec![0.0; 9]
            } else {
                dense[g].clone()
            };
            a.push(encode_group(&av, &cfg).map_err(|e| e.to_string())?);
            b.push(encode_group(&dense[groups + g], &cfg).map_err(|e| e.to_string())?);
        }
        let stats = gating_stats(&a, &b).map_err(|e| e.to_string())?;
        if i == 10 {
            ensure(stats.macs_executed == 0, || {
                format!("{} MACs on an all-zero operand", stats.macs_executed)
            })?;
        }
        energies.push(job_energy(&stats, &k));
    }
    ensure(energies.windows(2).all(|w| w[1] < w[0]), || {
        format!("{energies:?}")
    })?;

    let model: Vec<f64> = (0..=10)
        .map(|i| {
            let job = MatmulJob {
                zero_group_fraction: i as f64 / 10.0,
                ..MatmulJob::dense(64, 8, 16)
            };
            job_energy(&expected_stats(&ArrayConfig::default(), &job).unwrap(), &k)
        })
        .collect();
    ensure(model.windows(2).all(|w| w[1] < w[0]), || {
        format!("{model:?}")
    })?;
    let all_zero = MatmulJob {
        zero_group_fraction: 1.0,
        ..MatmulJob::dense(64, 8, 16)
    };
    let s = expected_stats(&ArrayConfig::default(), &all_zero).map_err(|e| e.to_string())?;
    ensure(s.macs_executed == 0, || {
        "expected stats execute MACs on zeros".into()
    })?;
    Ok(format!(
        "energy {:.1} -> {:.1} over 11 points",
        energies[0], energies[10]
    ))
}

fn system_comparison(report: &ComparisonReport) -> Outcome {
    let best = report
        .cell(Variant::DuDnn, "hybrid-desk")
        .ok_or("missing DuDNN hybrid-desk cell")?;
    ensure(best.reached, || {
        "DuDNN on hybrid-desk never reached the target".into()
    })?;
    let others: Vec<_> = report.cells.iter().filter(|c| c.reached).collect();
    for c in &others {
        ensure(best.tta_us <= c.tta_us && best.eta <= c.eta, || {
            format!(
                "{} on {}: TTA {:.3} µs / ETA {:.1} beats {:.3} / {:.1}",
                c.variant, c.profile, c.tta_us, c.eta, best.tta_us, best.eta
            )
        })?;
    }
    Ok(format!(
        "DuDNN+hybrid-desk TTA {:.2} µs, ETA {:.0}; {} of {} cells reached {}",
        best.tta_us,
        best.eta,
        others.len(),
        report.cells.len(),
        report.target_accuracy
    ))
}

fn determinism() -> Outcome {
    let mut quick = ExperimentConfig::default();
    quick.seed = 9;
    quick.data.train_size = 128;
    quick.data.val_size = 64;
    quick.train.epochs = 1;
    let twice = |f: &dyn Fn() -> Result<String, String>| -> Result<(), String> {
        let (a, b) = (f()?, f()?);
        ensure(a == b, || "reports differ between reruns".into())
    };
    let json = |v: serde_json::Result<String>| v.map_err(|e| e.to_string());
    twice(&|| {
        json(serde_json::to_string_pretty(
            &run_lifetime(&quick).map_err(|e| e.to_string())?,
        ))
    })?;
    twice(&|| {
        json(serde_json::to_string_pretty(
            &run_train(&quick).map_err(|e| e.to_string())?,
        ))
    })?;
    let mut sweep = quick.clone();
    sweep.experiment = Experiment::Sweep {
        axis: SweepAxis::Temperature,
        values: vec![-30.0, 0.0, 50.0, 100.0],
    };
    twice(&|| {
        json(serde_json::to_string_pretty(
            &run_sweep(&sweep).map_err(|e| e.to_string())?,
        ))
    })?;
    let mut compare = quick.clone();
    compare.experiment = Experiment::Compare {
        variants: vec![Variant::DuDnn, Variant::Fi],
        profiles: vec![HardwareProfile::hybrid_desk(), HardwareProfile::sram_desk()],
        seeds: vec![1, 2],
    };
    twice(&|| {
        json(serde_json::to_string_pretty(
            &run_compare(&compare).map_err(|e| e.to_string())?,
        ))
    })?;
    Ok("lifetime, train, sweep and compare reports byte-identical on rerun".into())
}

fn main() -> ExitCode {
    let mut run = Runner { failures: 0 };
    run.check(1, "reversibility oracle", secs(10), reversibility);
    run.check(
        2,
        "recompute vs store backprop",
        secs(60),
        recompute_vs_store,
    );
    run.check(3, "finite differences", secs(60), finite_differences);
    run.check(4, "BFP format", secs(5), bfp_format);
    run.check(5, "lifetime equivalence", secs(30), lifetime_equivalence);
    run.check(6, "reference refresh counts", None, reference_refreshes);
    run.check(7, "retention endpoints", None, retention_endpoints);
    run.check(8, "memory scaling", secs(10), memory_scaling);

    // One comparison run trains every variant on every seed; criteria 9, 10
    // and 12 all read from it.
    let t = Instant::now();
    let report = desk_comparison();
    let compare_time = t.elapsed();
    println!("     (8-cell desk comparison trained in {compare_time:.1?})");
    let within = |limit: u64| {
        move || -> Result<(), String> {
            ensure(compare_time <= Duration::from_secs(limit), || {
                format!("comparison took {compare_time:.1?}")
            })
        }
    };
    run.check(9, "variant ordering", None, || {
        within(600)()?;
        variant_ordering(report.as_ref().map_err(Clone::clone)?)
    });
    run.check(10, "fault robustness", secs(600), || {
        let r = report.as_ref().map_err(Clone::clone)?;
        let clean = r
            .cell(Variant::DuDnn, "hybrid-desk")
            .ok_or("missing DuDNN cell")?
            .mean_final_accuracy;
        fault_robustness(clean)
    });
    run.check(11, "gating energy", secs(5), gating_energy);
    run.check(12, "system comparison", None, || {
        within(900)()?;
        system_comparison(report.as_ref().map_err(Clone::clone)?)
    });
    run.check(13, "determinism", None, determinism);

    println!("{} of 13 criteria passed", 13 - run.failures);
    if run.failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
