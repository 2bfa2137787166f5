//! Reference eigensolver for tests: cyclic Jacobi rotations on a dense
//! symmetric matrix, plus a two-pass sample covariance.

/// Eigenpairs of a symmetric `n × n` matrix, sorted by eigenvalue
/// descending, each vector's largest-magnitude entry made positive.
pub fn jacobi_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut a = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..n)
        .map(|j| {
            let mut col: Vec<f64> = (0..n).map(|i| v[i * n + j]).collect();
            let mut best = 0;
            for i in 1..n {
                if col[i].abs() > col[best].abs() {
                    best = i;
                }
            }
            if col[best] < 0.0 {
                col.iter_mut().for_each(|x| *x = -*x);
            }
            (a[j * n + j], col)
        })
        .collect();
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0));
    pairs.into_iter().unzip()
}

/// Sample covariance (divisor `N − 1`) of `rows × dim` row-major data.
pub fn covariance(data: &[f64], rows: usize, dim: usize) -> Vec<f64> {
    let mean: Vec<f64> = (0..dim)
        .map(|j| (0..rows).map(|i| data[i * dim + j]).sum::<f64>() / rows as f64)
        .collect();
    let mut cov = vec![0.0; dim * dim];
    for a in 0..dim {
        for b in 0..dim {
            cov[a * dim + b] = (0..rows)
                .map(|i| (data[i * dim + a] - mean[a]) * (data[i * dim + b] - mean[b]))
                .sum::<f64>()
                / (rows - 1) as f64;
        }
    }
    cov
}
