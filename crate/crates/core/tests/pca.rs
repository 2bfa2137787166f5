#[path = "support/jacobi.rs"]
mod jacobi;

use bvv_core::pca::{symmetric_eigen, PcaModel};
use jacobi::{covariance, jacobi_eigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn random_data(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Vec<f64> {
    // Anisotropic scales keep eigenvalues well separated.
    let scales: Vec<f64> = (0..dim).map(|j| 1.0 + 0.7 * j as f64).collect();
    (0..rows * dim)
        .map(|i| {
            let x: f64 = StandardNormal.sample(rng);
            x * scales[i % dim] + 0.3
        })
        .collect()
}

#[test]
fn fit_matches_jacobi_oracle_on_random_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..20 {
        let dim = rng.random_range(2..=16);
        let rows = rng.random_range(dim + 2..=64);
        let data = random_data(&mut rng, rows, dim);
        let model = PcaModel::fit(&data, rows, dim, dim).unwrap();
        let (values, vectors) = jacobi_eigen(&covariance(&data, rows, dim), dim);
        for i in 0..dim {
            assert!(
                (model.variances()[i] - values[i]).abs() <= 1e-8 * values[0].max(1.0),
                "case {case}: eigenvalue {i}: {} vs {}",
                model.variances()[i],
                values[i]
            );
            for (a, b) in model.component(i).iter().zip(&vectors[i]) {
                assert!((a - b).abs() <= 1e-8, "case {case}: component {i}");
            }
        }
    }
}

#[test]
fn symmetric_eigen_matches_jacobi() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for n in 1..=12 {
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let x = rng.random_range(-3.0..3.0);
                a[i * n + j] = x;
                a[j * n + i] = x;
            }
        }
        let eig = symmetric_eigen(a.clone(), n).unwrap();
        let (values, _) = jacobi_eigen(&a, n);
        for (rank, &idx) in eig.order.iter().enumerate() {
            assert!((eig.values[idx] - values[rank]).abs() < 1e-9);
            // A v = λ v for the solver's own vectors.
            let v = &eig.vectors[idx * n..(idx + 1) * n];
            for i in 0..n {
                let av: f64 = (0..n).map(|j| a[i * n + j] * v[j]).sum();
                assert!((av - eig.values[idx] * v[i]).abs() < 1e-9);
            }
        }
    }
}

fn reconstruction_error(data: &[f64], rows: usize, dim: usize, mean: &[f64], basis: &[Vec<f64>]) -> f64 {
    let mut err = 0.0;
    for r in 0..rows {
        let x: Vec<f64> = (0..dim).map(|j| data[r * dim + j] - mean[j]).collect();
        let mut rec = vec![0.0; dim];
        for b in basis {
            let c: f64 = x.iter().zip(b).map(|(p, q)| p * q).sum();
            rec.iter_mut().zip(b).for_each(|(o, q)| *o += c * q);
        }
        err += x.iter().zip(&rec).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
    }
    err
}

fn gram_schmidt(mut vs: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    for i in 0..vs.len() {
        for j in 0..i {
            let d: f64 = vs[i].iter().zip(&vs[j]).map(|(a, b)| a * b).sum();
            let vj = vs[j].clone();
            vs[i].iter_mut().zip(&vj).for_each(|(a, b)| *a -= d * b);
        }
        let norm = vs[i].iter().map(|a| a * a).sum::<f64>().sqrt();
        vs[i].iter_mut().for_each(|a| *a /= norm);
    }
    vs
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Top-k PCA reconstruction error equals (N − 1) times the sum of the
    /// discarded eigenvalues and beats any other k-dimensional basis.
    #[test]
    fn top_k_reconstruction_is_optimal(seed in any::<u64>(), dim in 3usize..10, k in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = 40;
        let data = random_data(&mut rng, rows, dim);
        let model = PcaModel::fit(&data, rows, dim, k).unwrap();
        let basis: Vec<Vec<f64>> = (0..k).map(|i| model.component(i).to_vec()).collect();
        let err = reconstruction_error(&data, rows, dim, model.mean(), &basis);

        let (values, _) = jacobi_eigen(&covariance(&data, rows, dim), dim);
        let tail: f64 = values[k..].iter().sum::<f64>() * (rows - 1) as f64;
        prop_assert!((err - tail).abs() <= 1e-8 * tail.max(1.0));

        let other = gram_schmidt((0..k).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect());
        let other_err = reconstruction_error(&data, rows, dim, model.mean(), &other);
        prop_assert!(err <= other_err + 1e-9);
    }

    #[test]
    fn components_are_orthonormal(seed in any::<u64>(), dim in 2usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = random_data(&mut rng, 30, dim);
        let model = PcaModel::fit(&data, 30, dim, dim).unwrap();
        for i in 0..dim {
            for j in 0..dim {
                let d: f64 = model.component(i).iter().zip(model.component(j)).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((d - want).abs() < 1e-10);
            }
            let c = model.component(i);
            let argmax = (0..dim).fold(0, |b, t| if c[t].abs() > c[b].abs() { t } else { b });
            prop_assert!(c[argmax] > 0.0);
        }
    }
}
