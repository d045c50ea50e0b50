mod common;

use common::{random_tensor, rng};
use edtrain_core::bfp::{encode_group, BfpConfig};
use edtrain_core::systolic::grid::simulate_matmul;
use edtrain_core::systolic::{
    analytical_cycles, detailed_cycles, expected_stats, gating_stats, job_energy, ArrayConfig,
    Dataflow, EnergyConstants, MatmulJob,
};
use edtrain_core::tensor::{conv2d, Padding};
use proptest::prelude::*;
use rand::Rng;

const DATAFLOWS: [Dataflow; 3] = [
    Dataflow::WsForward,
    Dataflow::WsBackwardTransposed,
    Dataflow::AccumStationary,
];

fn naive(m: usize, kl: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..kl).map(|k| a[i * kl + k] * b[k * n + j]).sum();
        }
    }
    out
}

fn random_vec(len: usize, r: &mut impl Rng) -> Vec<f64> {
    (0..len).map(|_| r.gen_range(-1.0..1.0)).collect()
}

#[test]
fn tiled_twelve_by_twelve_matches_grid_simulation() {
    let mut r = rng(1);
    let (m, k, n) = (12, 18, 12);
    let a = random_vec(m * k * 9, &mut r);
    let b = random_vec(k * 9 * n, &mut r);
    let want = naive(m, k * 9, n, &a, &b);
    for df in DATAFLOWS {
        let cfg = ArrayConfig::default().with_dataflow(df);
        let run = simulate_matmul(&cfg, m, k, n, &a, &b).unwrap();
        assert_eq!(
            run.cycles,
            detailed_cycles(&cfg, &MatmulJob::dense(m, k, n)).unwrap(),
            "{df:?}"
        );
        let err = run
            .output
            .iter()
            .zip(&want)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-12, "{df:?}: {err}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn detailed_cycles_match_simulation_and_bound_analytical(
        m in 1usize..14, k in 1usize..9, n in 1usize..14,
        rows in 1usize..5, cols in 1usize..5, df in 0usize..3, seed in any::<u64>(),
    ) {
        let cfg = ArrayConfig { rows, cols, group_size: 2, ..ArrayConfig::default() }.with_dataflow(DATAFLOWS[df]);
        let job = MatmulJob::dense(m, k, n);
        let detailed = detailed_cycles(&cfg, &job).unwrap();
        let analytical = analytical_cycles(&cfg, &job).unwrap();
        prop_assert!(detailed >= analytical);
        let mut r = rng(seed);
        let a = random_vec(m * k * 2, &mut r);
        let b = random_vec(k * 2 * n, &mut r);
        prop_assert_eq!(simulate_matmul(&cfg, m, k, n, &a, &b).unwrap().cycles, detailed);
    }

    #[test]
    fn analytical_cycles_cover_all_macs(m in 1usize..40, k in 1usize..40, n in 1usize..40) {
        let cfg = ArrayConfig::default();
        let job = MatmulJob::dense(m, k, n);
        let c = analytical_cycles(&cfg, &job).unwrap();
        let macs = job.lane_ops(cfg.group_size);
        prop_assert!(c * cfg.macs_per_cycle() >= macs);
        prop_assert_eq!(c * cfg.macs_per_cycle() == macs, macs.is_multiple_of(cfg.macs_per_cycle()));
    }

    #[test]
    fn energy_never_rises_with_sparsity(z1 in 0.0f64..1.0, z2 in 0.0f64..1.0, g1 in 0.0f64..1.0, g2 in 0.0f64..1.0) {
        let cfg = ArrayConfig::default();
        let k = EnergyConstants::default();
        let job = |z: f64, g: f64| MatmulJob { zero_group_fraction: z, zero_mantissa_fraction: g, ..MatmulJob::dense(30, 7, 11) };
        let e = |z, g| job_energy(&expected_stats(&cfg, &job(z, g)).unwrap(), &k);
        let (zl, zh) = (z1.min(z2), z1.max(z2));
        let (gl, gh) = (g1.min(g2), g1.max(g2));
        prop_assert!(e(zh, gl) <= e(zl, gl) + 1e-9);
        prop_assert!(e(zl, gh) <= e(zl, gl) + 1e-9);
    }
}

/// Unfold a zero-padded convolution into `[B·H·W, Cin·k²]` rows, padded up to whole groups.
fn im2col(x: &edtrain_core::Tensor, k: usize, g: usize) -> (Vec<f64>, usize) {
    let [b, c, h, w] = x.shape();
    let half = (k / 2) as isize;
    let len = c * k * k;
    let kl = len.div_ceil(g) * g;
    let mut out = vec![0.0; b * h * w * kl];
    for n in 0..b {
        for i in 0..h {
            for j in 0..w {
                let row = (n * h + i) * w + j;
                for ch in 0..c {
                    for di in 0..k {
                        for dj in 0..k {
                            let (y, xx) = (
                                i as isize + di as isize - half,
                                j as isize + dj as isize - half,
                            );
                            if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                                out[row * kl + (ch * k + di) * k + dj] =
                                    x.get(n, ch, y as usize, xx as usize);
                            }
                        }
                    }
                }
            }
        }
    }
    (out, kl)
}

#[test]
fn dataflow_choice_leaves_convolution_results_unchanged() {
    let mut r = rng(4);
    let x = random_tensor([2, 3, 5, 5], &mut r, 1.0);
    let w = random_tensor([4, 3, 3, 3], &mut r, 1.0);
    let want = conv2d(&x, &w, Padding::Zero).unwrap();
    let (a, kl) = im2col(&x, 3, 9);
    let mut bmat = vec![0.0; kl * 4];
    for co in 0..4 {
        for i in 0..27 {
            bmat[i * 4 + co] = w.data()[co * 27 + i];
        }
    }
    for df in DATAFLOWS {
        let cfg = ArrayConfig::default().with_dataflow(df);
        let run = simulate_matmul(&cfg, 50, kl / 9, 4, &a, &bmat).unwrap();
        for n in 0..2 {
            for co in 0..4 {
                for p in 0..25 {
                    let got = run.output[(n * 25 + p) * 4 + co];
                    let exp = want.data()[(n * 4 + co) * 25 + p];
                    assert!((got - exp).abs() < 1e-12, "{df:?}");
                }
            }
        }
    }
}

fn streams(
    zero_fraction: f64,
    seed: u64,
) -> (Vec<edtrain_core::BfpGroup>, Vec<edtrain_core::BfpGroup>) {
    let cfg = BfpConfig::default();
    let mut r = rng(seed);
    let groups = 400;
    let zeros = (groups as f64 * zero_fraction).round() as usize;
    let mut a = Vec::new();
    let mut b = Vec::new();
    for i in 0..groups {
        let av: Vec<f64> = if i < zeros {
            vec![0.0; 9]
        } else {
            (0..9).map(|_| r.gen_range(0.5..2.0)).collect()
        };
        let bv: Vec<f64> = (0..9).map(|_| r.gen_range(0.5..2.0)).collect();
        a.push(encode_group(&av, &cfg).unwrap());
        b.push(encode_group(&bv, &cfg).unwrap());
    }
    (a, b)
}

#[test]
fn dense_streams_are_not_skipped() {
    let (a, b) = streams(0.0, 2);
    let s = gating_stats(&a, &b).unwrap();
    assert_eq!(s.zero_group_skips, 0);
    assert_eq!(s.lane_ops(), 400 * 9);
}

#[test]
fn zero_groups_lower_energy_monotonically() {
    let k = EnergyConstants::default();
    let energies: Vec<f64> = (0..=10)
        .map(|i| {
            let (a, b) = streams(i as f64 / 10.0, 3);
            job_energy(&gating_stats(&a, &b).unwrap(), &k)
        })
        .collect();
    for w in energies.windows(2) {
        assert!(w[1] <= w[0], "{energies:?}");
    }
    let (a, b) = streams(0.3, 3);
    assert!(job_energy(&gating_stats(&a, &b).unwrap(), &k) < energies[0]);
}
