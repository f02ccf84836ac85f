use fcppn_core::optim::{
    line_search, minimize, two_loop_direction, LbfgsOptions, LbfgsState, Termination,
};
use fcppn_core::Result;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256StarStar;

fn matvec(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    a.iter().map(|row| row.iter().zip(x).map(|(r, v)| r * v).sum()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// SPD matrix `BᵀB/d + λI` from a seeded normal `B`.
fn random_spd(d: usize, ridge: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let b: Vec<Vec<f64>> = (0..d)
        .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    (0..d)
        .map(|i| {
            (0..d)
                .map(|j| {
                    let s: f64 = (0..d).map(|k| b[k][i] * b[k][j]).sum();
                    s / d as f64 + if i == j { ridge } else { 0.0 }
                })
                .collect()
        })
        .collect()
}

/// `½(x−a)ᵀA(x−a)`, minimum 0 at `a`.
fn spd_quadratic(
    a_mat: Vec<Vec<f64>>,
    a: Vec<f64>,
) -> impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)> {
    move |x| {
        let d: Vec<f64> = x.iter().zip(&a).map(|(x, a)| x - a).collect();
        let g = matvec(&a_mat, &d);
        Ok((0.5 * dot(&d, &g), g))
    }
}

fn rosenbrock(x: &[f64]) -> Result<(f64, Vec<f64>)> {
    let (a, b) = (x[0], x[1]);
    let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
    let ga = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
    let gb = 200.0 * (b - a * a);
    Ok((f, vec![ga, gb]))
}

#[test]
fn rosenbrock_reaches_minimum() {
    let opts = LbfgsOptions {
        max_iters: 100,
        grad_tolerance: 0.0,
        ..Default::default()
    };
    let m = minimize(rosenbrock, vec![-1.2, 1.0], &opts).unwrap();
    let first = m.trace.iter().find(|t| t.loss < 1e-8).expect("reached 1e-8");
    assert!(first.iter <= 100);
    assert!((m.x[0] - 1.0).abs() < 1e-3 && (m.x[1] - 1.0).abs() < 1e-3);
}

#[test]
fn spd_quadratic_twenty_dims() {
    let d = 20;
    let opts = LbfgsOptions {
        max_iters: d + 2,
        grad_tolerance: 0.0,
        ..Default::default()
    };
    let a: Vec<f64> = (0..d).map(|i| (i as f64 * 0.37).sin()).collect();
    let m = minimize(spd_quadratic(random_spd(d, 0.5, 11), a), vec![0.0; d], &opts).unwrap();
    let reached = m.trace.iter().find(|t| t.loss < 1e-10);
    assert!(reached.is_some(), "final loss {}", m.loss);
}

#[test]
fn accepted_losses_never_increase() {
    let opts = LbfgsOptions {
        max_iters: 60,
        ..Default::default()
    };
    let m = minimize(rosenbrock, vec![-1.2, 1.0], &opts).unwrap();
    for w in m.trace.windows(2) {
        assert!(w[1].loss <= w[0].loss);
    }
}

#[test]
fn identical_runs_give_identical_traces() {
    let opts = LbfgsOptions::default();
    let a = minimize(rosenbrock, vec![-1.2, 1.0], &opts).unwrap();
    let b = minimize(rosenbrock, vec![-1.2, 1.0], &opts).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.x, b.x);
}

#[test]
fn newton_direction_with_full_history() {
    let a = vec![
        vec![4.0, 1.0, 0.5],
        vec![1.0, 3.0, 0.25],
        vec![0.5, 0.25, 2.0],
    ];
    // A-conjugate displacements by Gram-Schmidt in the A inner product
    let mut s: Vec<Vec<f64>> = Vec::new();
    for e in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] {
        let mut v = e.to_vec();
        for p in &s {
            let ap = matvec(&a, p);
            let c = dot(&v, &ap) / dot(p, &ap);
            v.iter_mut().zip(p).for_each(|(vi, pi)| *vi -= c * pi);
        }
        s.push(v);
    }
    let mut state = LbfgsState::new(5);
    for si in &s {
        assert!(state.push_pair(si.clone(), matvec(&a, si)));
    }
    let g = [0.3, -1.1, 0.7];
    // closed-form inverse by cofactors
    let det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
    let cof = |i: usize, j: usize| {
        let r: Vec<usize> = (0..3).filter(|&k| k != j).collect();
        let c: Vec<usize> = (0..3).filter(|&k| k != i).collect();
        let m = a[r[0]][c[0]] * a[r[1]][c[1]] - a[r[0]][c[1]] * a[r[1]][c[0]];
        if (i + j) % 2 == 0 {
            m
        } else {
            -m
        }
    };
    let newton: Vec<f64> = (0..3)
        .map(|i| -(0..3).map(|j| cof(i, j) / det * g[j]).sum::<f64>())
        .collect();
    let d = two_loop_direction(&state, &g);
    for (x, y) in d.iter().zip(&newton) {
        assert!((x - y).abs() < 1e-8, "{d:?} vs {newton:?}");
    }
}

#[test]
fn line_search_failure_is_reported_not_fatal() {
    // gradient lies about the slope, so no step decreases the loss
    let lying = |x: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((x[0] * x[0] + 1.0, vec![-1.0])) };
    let opts = LbfgsOptions {
        max_iters: 10,
        ..Default::default()
    };
    let m = minimize(lying, vec![0.0], &opts).unwrap();
    assert_eq!(m.termination, Termination::LineSearchFailed);
    assert_eq!(m.x, vec![0.0]);
    let mut f = lying;
    let err = line_search(&mut f, &[0.0], 1.0, &[-1.0], &[1.0], 1.0, &opts);
    assert!(err.is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn convex_quadratics_converge_within_d_plus_two(
        d in 2usize..=20,
        seed in any::<u64>(),
        ridge in 0.2f64..2.0,
    ) {
        let a: Vec<f64> = (0..d).map(|i| ((i as u64 + seed % 97) as f64).cos()).collect();
        let opts = LbfgsOptions {
            history: d,
            max_iters: d + 2,
            grad_tolerance: 0.0,
            ..Default::default()
        };
        let m = minimize(spd_quadratic(random_spd(d, ridge, seed), a), vec![0.0; d], &opts).unwrap();
        prop_assert!(m.trace.iter().any(|t| t.loss < 1e-10), "final loss {}", m.loss);
    }
}
