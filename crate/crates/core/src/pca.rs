//! Deterministic principal component analysis.
//!
//! The covariance matrix (divisor `N − 1`) is decomposed with Householder
//! tridiagonalization followed by implicit QL iterations. Components are
//! sorted by eigenvalue, descending, with ties kept in solver order, and each
//! component's sign is fixed so that its largest-magnitude entry (first one
//! on ties) is positive.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PcaError {
    #[error("requested {k} components from {dim}-dimensional data")]
    TooManyComponents { k: usize, dim: usize },
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("input contains non-finite values")]
    NonFinite,
    #[error("vector length {found} does not match dimension {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("eigensolver did not converge")]
    NoConvergence,
}

/// Fitted projection: `transform(v) = components · (v − mean)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    dim: usize,
    k: usize,
    mean: Vec<f64>,
    /// `k × dim`, row-major; rows are orthonormal.
    components: Vec<f64>,
    variances: Vec<f64>,
    total_variance: f64,
}

impl PcaModel {
    /// Fit on `n_rows × dim` row-major data.
    pub fn fit(data: &[f64], n_rows: usize, dim: usize, k: usize) -> Result<Self, PcaError> {
        check_shape(n_rows, dim, k)?;
        if data.len() != n_rows * dim {
            return Err(PcaError::LengthMismatch {
                expected: n_rows * dim,
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(PcaError::NonFinite);
        }
        let mut mean = vec![0.0; dim];
        for row in data.chunks_exact(dim) {
            for (m, &x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n_rows as f64);

        let mut cov = vec![0.0; dim * dim];
        let mut centered = vec![0.0; dim];
        for row in data.chunks_exact(dim) {
            for ((c, &x), &m) in centered.iter_mut().zip(row).zip(&mean) {
                *c = x - m;
            }
            for i in 0..dim {
                let ci = centered[i];
                if ci == 0.0 {
                    continue;
                }
                let out = &mut cov[i * dim + i..(i + 1) * dim];
                for (o, &cj) in out.iter_mut().zip(&centered[i..]) {
                    *o += ci * cj;
                }
            }
        }
        let denom = (n_rows - 1) as f64;
        for i in 0..dim {
            for j in i..dim {
                let v = cov[i * dim + j] / denom;
                cov[i * dim + j] = v;
                cov[j * dim + i] = v;
            }
        }
        Self::from_covariance(mean, cov, dim, k)
    }

    /// Fit on 0/1 data stored one byte per entry. Uses sparse co-occurrence
    /// counts, which is much cheaper than [`PcaModel::fit`] for ink bitmaps.
    pub fn fit_binary(bits: &[u8], n_rows: usize, dim: usize, k: usize) -> Result<Self, PcaError> {
        check_shape(n_rows, dim, k)?;
        if bits.len() != n_rows * dim {
            return Err(PcaError::LengthMismatch {
                expected: n_rows * dim,
                found: bits.len(),
            });
        }
        let mut counts = vec![0u64; dim];
        let mut gram = vec![0u32; dim * dim];
        let mut on = Vec::with_capacity(dim);
        for row in bits.chunks_exact(dim) {
            on.clear();
            on.extend(row.iter().enumerate().filter(|(_, &b)| b != 0).map(|(i, _)| i));
            for (a, &i) in on.iter().enumerate() {
                counts[i] += 1;
                let base = i * dim;
                for &j in &on[a..] {
                    gram[base + j] += 1;
                }
            }
        }
        let n = n_rows as f64;
        let mean: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
        let denom = n - 1.0;
        let mut cov = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in i..dim {
                let v = (gram[i * dim + j] as f64 - n * mean[i] * mean[j]) / denom;
                cov[i * dim + j] = v;
                cov[j * dim + i] = v;
            }
        }
        Self::from_covariance(mean, cov, dim, k)
    }

    /// Build from a precomputed symmetric covariance matrix.
    pub fn from_covariance(
        mean: Vec<f64>,
        cov: Vec<f64>,
        dim: usize,
        k: usize,
    ) -> Result<Self, PcaError> {
        if k > dim {
            return Err(PcaError::TooManyComponents { k, dim });
        }
        let total_variance: f64 = (0..dim).map(|i| cov[i * dim + i]).sum::<f64>().max(0.0);
        let eig = symmetric_eigen(cov, dim)?;
        let mut components = Vec::with_capacity(k * dim);
        let mut variances = Vec::with_capacity(k);
        for &idx in eig.order.iter().take(k) {
            let mut v = eig.vectors[idx * dim..(idx + 1) * dim].to_vec();
            fix_sign(&mut v);
            components.extend_from_slice(&v);
            variances.push(eig.values[idx].max(0.0));
        }
        Ok(Self {
            dim,
            k,
            mean,
            components,
            variances,
            total_variance,
        })
    }

    /// Reassemble a model from persisted parts (variances are not stored).
    pub fn from_parts(mean: Vec<f64>, components: Vec<f64>, k: usize) -> Self {
        let dim = mean.len();
        assert_eq!(components.len(), k * dim, "component matrix shape");
        Self {
            dim,
            k,
            mean,
            components,
            variances: Vec::new(),
            total_variance: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn components(&self) -> &[f64] {
        &self.components
    }

    pub fn component(&self, i: usize) -> &[f64] {
        &self.components[i * self.dim..(i + 1) * self.dim]
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn total_variance(&self) -> f64 {
        self.total_variance
    }

    pub fn transform(&self, v: &[f64]) -> Result<Vec<f64>, PcaError> {
        if v.len() != self.dim {
            return Err(PcaError::LengthMismatch {
                expected: self.dim,
                found: v.len(),
            });
        }
        let centered: Vec<f64> = v.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        Ok(self
            .components
            .chunks_exact(self.dim)
            .map(|c| c.iter().zip(&centered).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// Fraction of total variance carried by each kept component. All zero
    /// when the data has no variance.
    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        if self.total_variance <= 0.0 {
            return vec![0.0; self.variances.len()];
        }
        self.variances
            .iter()
            .map(|v| (v / self.total_variance).clamp(0.0, 1.0))
            .collect()
    }

    /// Projector specialised for 0/1 inputs.
    pub fn binary_projector(&self) -> BinaryProjector<'_> {
        let mut transposed = vec![0.0; self.dim * self.k];
        for c in 0..self.k {
            for d in 0..self.dim {
                transposed[d * self.k + c] = self.components[c * self.dim + d];
            }
        }
        let offset = self
            .components
            .chunks_exact(self.dim)
            .map(|c| c.iter().zip(&self.mean).map(|(a, b)| a * b).sum())
            .collect();
        BinaryProjector {
            model: self,
            transposed,
            offset,
        }
    }
}

/// Projects bit vectors by summing component columns at set positions.
pub struct BinaryProjector<'a> {
    model: &'a PcaModel,
    transposed: Vec<f64>,
    offset: Vec<f64>,
}

impl BinaryProjector<'_> {
    pub fn transform(&self, bits: &[u8]) -> Vec<f64> {
        let k = self.model.k;
        let mut acc = vec![0.0; k];
        for (d, _) in bits.iter().enumerate().filter(|(_, &b)| b != 0) {
            for (a, &c) in acc.iter_mut().zip(&self.transposed[d * k..(d + 1) * k]) {
                *a += c;
            }
        }
        acc.iter().zip(&self.offset).map(|(a, o)| a - o).collect()
    }
}

fn check_shape(n_rows: usize, dim: usize, k: usize) -> Result<(), PcaError> {
    if k > dim {
        return Err(PcaError::TooManyComponents { k, dim });
    }
    if n_rows < 2 {
        return Err(PcaError::TooFewSamples(n_rows));
    }
    Ok(())
}

/// Flip `v` so that its largest-magnitude entry is positive.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Eigen-decomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    /// Eigenvalues in solver order.
    pub values: Vec<f64>,
    /// Eigenvectors as rows (`n × n`), matching `values`.
    pub vectors: Vec<f64>,
    /// Indices into `values`, sorted descending; ties keep the lower index.
    pub order: Vec<usize>,
}

/// Householder reduction to tridiagonal form then implicit QL, after the
/// classic EISPACK `tred2`/`tql2` pair.
pub fn symmetric_eigen(a: Vec<f64>, n: usize) -> Result<SymmetricEigen, PcaError> {
    assert_eq!(a.len(), n * n, "matrix must be n×n");
    if n == 0 {
        return Ok(SymmetricEigen {
            values: vec![],
            vectors: vec![],
            order: vec![],
        });
    }
    let mut v = a;
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tred2(&mut v, &mut d, &mut e, n);
    // tql2 rotates column pairs; work on the transpose so rows are contiguous.
    let mut vt = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            vt[j * n + i] = v[i * n + j];
        }
    }
    tql2(&mut vt, &mut d, &mut e, n)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[j].total_cmp(&d[i]).then(i.cmp(&j)));
    Ok(SymmetricEigen {
        values: d,
        vectors: vt,
        order,
    })
}

fn tred2(v: &mut [f64], d: &mut [f64], e: &mut [f64], n: usize) {
    let at = |i: usize, j: usize| i * n + j;
    for j in 0..n {
        d[j] = v[at(n - 1, j)];
    }
    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for dk in d.iter().take(i) {
            scale += dk.abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[at(i - 1, j)];
                v[at(i, j)] = 0.0;
                v[at(j, i)] = 0.0;
            }
        } else {
            for dk in d.iter_mut().take(i) {
                *dk /= scale;
                h += *dk * *dk;
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in e.iter_mut().take(i) {
                *ej = 0.0;
            }
            for j in 0..i {
                f = d[j];
                v[at(j, i)] = f;
                g = e[j] + v[at(j, j)] * f;
                for k in j + 1..i {
                    g += v[at(k, j)] * d[k];
                    e[k] += v[at(k, j)] * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    v[at(k, j)] -= f * e[k] + g * d[k];
                }
                d[j] = v[at(i - 1, j)];
                v[at(i, j)] = 0.0;
            }
        }
        d[i] = h;
    }
    for i in 0..n - 1 {
        v[at(n - 1, i)] = v[at(i, i)];
        v[at(i, i)] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[at(k, i + 1)] / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v[at(k, i + 1)] * v[at(k, j)];
                }
                for k in 0..=i {
                    v[at(k, j)] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[at(k, i + 1)] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[at(n - 1, j)];
        v[at(n - 1, j)] = 0.0;
    }
    v[at(n - 1, n - 1)] = 1.0;
    e[0] = 0.0;
}

/// `vt` holds eigenvectors as rows (transpose of the EISPACK layout).
fn tql2(vt: &mut [f64], d: &mut [f64], e: &mut [f64], n: usize) -> Result<(), PcaError> {
    const MAX_ITER: usize = 64;
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    let mut f = 0.0;
    let mut tst1: f64 = 0.0;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > MAX_ITER {
                    return Err(PcaError::NoConvergence);
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().skip(l + 2) {
                    *di -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    let (lo, hi) = vt.split_at_mut((i + 1) * n);
                    let row_i = &mut lo[i * n..];
                    let row_next = &mut hi[..n];
                    for (a, b) in row_i.iter_mut().zip(row_next.iter_mut()) {
                        let hk = *b;
                        *b = s * *a + c * hk;
                        *a = c * *a - s * hk;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    Ok(())
}
