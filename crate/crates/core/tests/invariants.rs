use funcito::calculus::{vertical_gradient, vertical_hessian, DerivativeConfig};
use funcito::comparison::{conclude, psd_slack, Verdict};
use funcito::functionals::{Combination, Functional, FunctionalSpec, MonitorFn, ScalarFn, WeightFn};
use funcito::models::{simulate_stream, simulate_with_ledger, Atom, ModelSpec};
use funcito::pathspace::{d_infty, stop, vertical_bump, GridPath, TimeGrid};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn jump_diffusion(x0: f64) -> ModelSpec {
    ModelSpec::LevyJumpDiffusion {
        x0,
        drift: 0.1,
        sigma: 0.3,
        rate: 2.0,
        atoms: vec![Atom { size: 0.2, prob: 0.5 }, Atom { size: -0.1, prob: 0.5 }],
    }
}

fn library() -> Vec<FunctionalSpec> {
    vec![
        FunctionalSpec::IntegralOfFunction {
            g: ScalarFn::Sin,
            rho: WeightFn::Exponential { rate: 0.5 },
        },
        FunctionalSpec::Asian {
            f_tilde: ScalarFn::Square,
        },
        FunctionalSpec::DiscreteMonitor {
            monitor_times: vec![0.25, 0.5],
            h: ScalarFn::Tanh,
            g: MonitorFn::default(),
        },
        FunctionalSpec::IntegralPayoff {
            f_tilde: ScalarFn::Logistic {
                center: 0.0,
                width: 0.5,
            },
        },
        FunctionalSpec::Terminal {
            f_tilde: ScalarFn::Cos,
        },
    ]
}

fn grid() -> TimeGrid {
    TimeGrid::new(1.0, 40).unwrap()
}

/// Same path up to index `k`, independent noise afterwards.
fn rewrite_future(p: &GridPath, k: usize, seed: u64) -> GridPath {
    let other = simulate_stream(&jump_diffusion(0.0), p.grid(), seed, 1);
    let values: Vec<f64> = (0..p.len())
        .map(|i| if i <= k { p.value(i)[0] } else { p.value(k)[0] + other.value(i)[0] })
        .collect();
    let jumps: Vec<bool> = (0..p.len()).map(|i| i > k || p.is_jump(i)).collect();
    GridPath::new(*p.grid(), 1, values, jumps).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn functionals_do_not_look_ahead(seed in 0u64..1000, k in 0usize..=40, x0 in -1.0f64..1.0) {
        let p = simulate_stream(&jump_diffusion(x0), &grid(), seed, 0);
        let q = rewrite_future(&p, k, seed + 1);
        for f in library() {
            let a = f.eval(&stop(&p, k).unwrap()).unwrap();
            let b = f.eval(&stop(&q, k).unwrap()).unwrap();
            prop_assert_eq!(a, b, "{}", f.name());
        }
    }

    #[test]
    fn bumps_compose(seed in 0u64..1000, k in 0usize..=40, a in -1.0f64..1.0, b in -1.0f64..1.0) {
        let p = simulate_stream(&jump_diffusion(0.0), &grid(), seed, 0);
        let sp = stop(&p, k).unwrap();
        let twice = vertical_bump(&vertical_bump(&sp, &[a]).unwrap(), &[b]).unwrap();
        let once = vertical_bump(&sp, &[a + b]).unwrap();
        prop_assert!(d_infty(&twice, &once).unwrap() <= 1e-12);
        for f in library() {
            let diff = (f.eval(&twice).unwrap() - f.eval(&once).unwrap()).abs();
            prop_assert!(diff <= 1e-10, "{} differs by {diff}", f.name());
        }
    }

    #[test]
    fn d_infty_is_a_metric(s1 in 0u64..500, s2 in 0u64..500, s3 in 0u64..500, k1 in 0usize..=40, k2 in 0usize..=40, k3 in 0usize..=40) {
        let g = grid();
        let m = jump_diffusion(0.3);
        let a = stop(&simulate_stream(&m, &g, s1, 0), k1).unwrap();
        let b = stop(&simulate_stream(&m, &g, s2, 0), k2).unwrap();
        let c = stop(&simulate_stream(&m, &g, s3, 0), k3).unwrap();
        let ab = d_infty(&a, &b).unwrap();
        prop_assert_eq!(d_infty(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(ab, d_infty(&b, &a).unwrap());
        prop_assert!(ab <= d_infty(&a, &c).unwrap() + d_infty(&c, &b).unwrap() + 1e-12);
    }

    #[test]
    fn csv_round_trip(seed in 0u64..1000) {
        let p = simulate_stream(&jump_diffusion(0.1), &grid(), seed, 0);
        let mut buf = Vec::new();
        p.to_csv(&mut buf).unwrap();
        let q = GridPath::from_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(p, q);
    }

    #[test]
    fn gradient_is_linear(seed in 0u64..1000, k in 0usize..40, w1 in -2.0f64..2.0, w2 in -2.0f64..2.0) {
        let p = simulate_stream(&jump_diffusion(0.0), &grid(), seed, 0);
        let sp = stop(&p, k).unwrap();
        let f1 = FunctionalSpec::Asian { f_tilde: ScalarFn::Tanh };
        let f2 = FunctionalSpec::IntegralPayoff { f_tilde: ScalarFn::Sin };
        let combo = Combination { terms: vec![(w1, &f1 as &dyn Functional), (w2, &f2)] };
        let cfg = DerivativeConfig::default().pinned(&combo, &sp);
        let lhs = vertical_gradient(&combo, &sp, &cfg).unwrap()[0];
        let rhs = w1 * vertical_gradient(&f1, &sp, &cfg).unwrap()[0] + w2 * vertical_gradient(&f2, &sp, &cfg).unwrap()[0];
        prop_assert!((lhs - rhs).abs() <= 1e-8 * (1.0 + rhs.abs()));
    }

    #[test]
    fn hessian_of_convex_payoff_is_nonnegative(seed in 0u64..1000, k in 0usize..40) {
        let p = simulate_stream(&jump_diffusion(0.0), &grid(), seed, 0);
        let sp = stop(&p, k).unwrap();
        let f = FunctionalSpec::IntegralPayoff { f_tilde: ScalarFn::SoftplusCall { strike: 0.0, width: 0.5 } };
        let h = vertical_hessian(&f, &sp, &DerivativeConfig::default()).unwrap();
        prop_assert!(h.matrix[(0, 0)] >= -1e-9);
    }

    #[test]
    fn psd_slack_is_antisymmetric_on_scalars(a in 0.0f64..4.0, b in 0.0f64..4.0) {
        let ma = DMatrix::from_element(1, 1, a);
        let mb = DMatrix::from_element(1, 1, b);
        let ab = psd_slack(&ma, &mb, 1e-12).unwrap();
        prop_assert!((ab - (b - a)).abs() <= 1e-12);
        prop_assert!((ab + psd_slack(&mb, &ma, 1e-12).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn reversal_negates_margin(ex in -5.0f64..5.0, ey in -5.0f64..5.0, sx in 1e-3f64..1.0, sy in 1e-3f64..1.0) {
        let f = conclude(ex, ey, sx, sy, false, 3.0);
        let r = conclude(ex, ey, sx, sy, true, 3.0);
        prop_assert!((f.margin + r.margin).abs() <= 1e-12);
        prop_assert_eq!(f.verdict == Verdict::Ordered, f.margin >= -3.0);
    }

    #[test]
    fn streams_are_reproducible(seed in 0u64..1000, stream in 0u64..1000) {
        let m = jump_diffusion(0.0);
        prop_assert_eq!(simulate_stream(&m, &grid(), seed, stream), simulate_stream(&m, &grid(), seed, stream));
    }
}

#[test]
fn zero_noise_path_is_constant() {
    let m = ModelSpec::Brownian {
        x0: 0.7,
        drift: 0.0,
        sigma: 0.0,
    };
    let p = simulate_stream(&m, &grid(), 3, 0);
    assert!((0..p.len()).all(|i| p.value(i)[0] == 0.7));
    assert_eq!(p.jump_count(), 0);
}

#[test]
fn compound_poisson_jump_count_mean() {
    let m = ModelSpec::CompoundPoisson {
        x0: 0.0,
        rate: 2.0,
        atoms: vec![Atom { size: 0.1, prob: 1.0 }],
    };
    let g = TimeGrid::new(1.0, 20).unwrap();
    let n = 20_000;
    let counts: Vec<f64> = (0..n)
        .map(|i| simulate_with_ledger(&m, &g, 5, i).1.jump_counts.iter().sum::<u32>() as f64)
        .collect();
    let mean = counts.iter().sum::<f64>() / n as f64;
    let se = (2.0 / n as f64).sqrt();
    assert!((mean - 2.0).abs() <= 4.0 * se, "mean jump count {mean}");
}
