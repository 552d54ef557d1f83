#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use spillsynth::panel::PanelData;
use spillsynth::solver::SimplexLsProblem;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn normal_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Random point on the simplex with a few exact zeros.
pub fn simplex_point(rng: &mut ChaCha8Rng, q: usize) -> DVector<f64> {
    let mut w = DVector::from_fn(q, |_, _| if rng.random::<f64>() < 0.3 { 0.0 } else { rng.random::<f64>() });
    if w.sum() == 0.0 {
        w[rng.random_range(0..q)] = 1.0;
    }
    let s = w.sum();
    w / s
}

/// Random `B` with zero diagonal and simplex rows.
pub fn weight_matrix(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let mut b = DMatrix::zeros(n, n);
    for i in 0..n {
        let w = simplex_point(rng, n - 1);
        let mut k = 0;
        for j in 0..n {
            if j != i {
                b[(i, j)] = w[k];
                k += 1;
            }
        }
    }
    b
}

/// A target built from donors plus noise, so the optimum is interior or on a face.
pub fn random_problem(rng: &mut ChaCha8Rng, t: usize, q: usize) -> SimplexLsProblem {
    let x = normal_matrix(rng, t, q) + DMatrix::from_element(t, q, 1.0);
    let w = simplex_point(rng, q);
    let noise = normal_vector(rng, t) * rng.random_range(0.0..1.5);
    let shift = rng.random_range(-2.0..2.0);
    let y = &x * w + noise + DVector::from_element(t, shift);
    SimplexLsProblem::new(y, x).unwrap()
}

/// Brute-force minimum over a simplex grid with step `1/steps`; the
/// intercept is profiled out exactly.
pub fn grid_oracle(problem: &SimplexLsProblem, steps: usize) -> f64 {
    let q = problem.n_donors();
    let mut best = f64::INFINITY;
    let mut eval = |w: DVector<f64>| {
        let resid = problem.targets() - problem.regressors() * &w;
        let a = resid.mean();
        best = best.min(problem.objective(a, &w));
    };
    match q {
        1 => eval(DVector::from_element(1, 1.0)),
        2 => {
            for i in 0..=steps {
                let x = i as f64 / steps as f64;
                eval(DVector::from_vec(vec![x, 1.0 - x]));
            }
        }
        3 => {
            for i in 0..=steps {
                for j in 0..=steps - i {
                    let (x, y) = (i as f64 / steps as f64, j as f64 / steps as f64);
                    eval(DVector::from_vec(vec![x, y, 1.0 - x - y]));
                }
            }
        }
        _ => panic!("grid oracle supports q <= 3"),
    }
    best
}

pub fn random_panel(rng: &mut ChaCha8Rng, n: usize, t: usize, m: usize) -> PanelData {
    PanelData::from_matrix(normal_matrix(rng, n, t + m), t).unwrap()
}
