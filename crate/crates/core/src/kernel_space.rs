//! PCA of the flattened blur-kernel space, used to initialize the embedding
//! layer of the deblur module.
//!
//! The projection is uncentered: rows are the leading eigenvectors of the
//! second-moment matrix `poolᵀ·pool / count`, so projecting is one linear map
//! with no bias.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::container;
use crate::degradation::{gaussian_kernel, BlurKernel};
use crate::error::{invalid, shape, Result};
use crate::rng;

pub const DEFAULT_EMBED_DIM: usize = 15;
pub const DEFAULT_POOL_SIZE: usize = 10_000;

/// `count` flattened kernels, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelPool {
    count: usize,
    kernel_size: usize,
    kernels: Vec<f64>,
}

impl KernelPool {
    pub fn from_kernels(kernels: &[BlurKernel]) -> Result<Self> {
        let first = kernels.first().ok_or_else(|| invalid("empty kernel pool"))?;
        let k = first.size();
        if kernels.iter().any(|kk| kk.size() != k) {
            return Err(shape("kernels in a pool must share a size"));
        }
        Ok(Self {
            count: kernels.len(),
            kernel_size: k,
            kernels: kernels.iter().flat_map(|kk| kk.weights().iter().copied()).collect(),
        })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn dim(&self) -> usize {
        self.kernel_size * self.kernel_size
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.kernels[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.kernels.chunks_exact(self.dim())
    }
}

/// `n` Gaussian kernels with widths uniform in `width_range`.
pub fn build_kernel_pool(n: usize, width_range: (f64, f64), kernel_size: usize, seed: u64) -> Result<KernelPool> {
    if n < DEFAULT_EMBED_DIM {
        return Err(invalid(format!("kernel pool needs at least {DEFAULT_EMBED_DIM} kernels, got {n}")));
    }
    let (lo, hi) = width_range;
    if !(lo > 0.0) || !(lo <= hi) {
        return Err(invalid(format!("bad width range [{lo}, {hi}]")));
    }
    let mut r = rng::stream(seed, 2);
    let kernels = (0..n)
        .map(|_| {
            let w = if lo == hi { lo } else { r.gen_range(lo..=hi) };
            gaussian_kernel(w, kernel_size)
        })
        .collect::<Result<Vec<_>>>()?;
    KernelPool::from_kernels(&kernels)
}

/// `dim x input_dim` projection with orthonormal rows, plus the full
/// non-increasing eigenvalue spectrum it was cut from.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaProjection {
    dim: usize,
    input_dim: usize,
    matrix: Vec<f64>,
    eigenvalues: Vec<f64>,
}

impl PcaProjection {
    pub fn from_rows(dim: usize, input_dim: usize, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != dim * input_dim {
            return Err(shape(format!("{} values for a {dim}x{input_dim} projection", matrix.len())));
        }
        Ok(Self {
            dim,
            input_dim,
            matrix,
            eigenvalues: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Row-major `dim x input_dim`.
    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix[i * self.input_dim..(i + 1) * self.input_dim]
    }

    /// Empty when the projection was loaded from disk.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Share of the pool's second moment captured by the kept directions.
    pub fn explained_ratio(&self) -> Option<f64> {
        let total: f64 = self.eigenvalues.iter().sum();
        (total > 0.0).then(|| self.eigenvalues[..self.dim].iter().sum::<f64>() / total)
    }

    pub fn project(&self, kernel: &BlurKernel) -> Result<Vec<f64>> {
        self.project_slice(kernel.weights())
    }

    pub fn project_slice(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.input_dim {
            return Err(shape(format!("{}-vector into a {}-input projection", v.len(), self.input_dim)));
        }
        Ok((0..self.dim)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// `Pᵀ·coeffs`.
    pub fn reconstruct(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        if coeffs.len() != self.dim {
            return Err(shape(format!("{} coefficients for a {}-dim projection", coeffs.len(), self.dim)));
        }
        let mut out = vec![0.0; self.input_dim];
        for (i, &c) in coeffs.iter().enumerate() {
            for (o, &p) in out.iter_mut().zip(self.row(i)) {
                *o += c * p;
            }
        }
        Ok(out)
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.matrix.iter().map(|&v| v as f32).collect()
    }

    /// SHA-256 of the stored `f32` matrix, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.dim as u32).to_le_bytes());
        h.update((self.input_dim as u32).to_le_bytes());
        for v in self.to_f32() {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        container::write_array(path, container::MAGIC_PCA, &[self.dim, self.input_dim], &self.to_f32())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let (dims, data) = container::read_array(path, container::MAGIC_PCA)?;
        if dims.len() != 2 {
            return Err(shape(format!("projection dims {dims:?}")));
        }
        Self::from_rows(dims[0], dims[1], data.into_iter().map(f64::from).collect())
    }
}

/// Leading `dim` eigenvectors of the uncentered second moment, largest
/// eigenvalue first; each row's largest-magnitude entry is made positive.
///
/// Rank-deficient pools still yield `dim` orthonormal rows: the symmetric
/// eigensolver returns a full basis, so null-space directions complete it.
pub fn compute_pca(pool: &KernelPool, dim: usize) -> Result<PcaProjection> {
    let d = pool.dim();
    if dim == 0 || dim > d {
        return Err(invalid(format!("projection dim {dim} outside 1..={d}")));
    }
    if pool.count() < dim {
        return Err(invalid(format!("pool of {} kernels for dim {dim}", pool.count())));
    }
    let mut m = DMatrix::<f64>::zeros(d, d);
    for row in pool.rows() {
        for i in 0..d {
            let ri = row[i];
            if ri == 0.0 {
                continue;
            }
            for j in i..d {
                m[(i, j)] += ri * row[j];
            }
        }
    }
    let n = pool.count() as f64;
    for i in 0..d {
        for j in i..d {
            let v = m[(i, j)] / n;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let tol = eigenvalues[0] * 1e-12;
    let rank = eigenvalues.iter().filter(|&&v| v > tol).count();
    if rank < dim {
        log::warn!("kernel pool has rank {rank} < {dim}; padding with an orthonormal completion");
    }
    let mut matrix = Vec::with_capacity(dim * d);
    for &col in &order[..dim] {
        let v = eig.eigenvectors.column(col);
        let pivot = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        matrix.extend(v.iter().map(|&x| x * sign));
    }
    Ok(PcaProjection {
        dim,
        input_dim: d,
        matrix,
        eigenvalues,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Cyclic Jacobi eigensolver, independent of nalgebra. Returns
    /// eigenvalues and eigenvectors (columns of a row-major matrix).
    fn jacobi_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            v[i * n + i] = 1.0;
        }
        for _sweep in 0..100 {
            let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i * n + j].powi(2)).sum();
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
                        let (akp, akq) = (a[k * n + p], a[k * n + q]);
                        a[k * n + p] = c * akp - s * akq;
                        a[k * n + q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                        a[p * n + k] = c * apk - s * aqk;
                        a[q * n + k] = s * apk + c * aqk;
                    }
                    for k in 0..n {
                        let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                        v[k * n + p] = c * vkp - s * vkq;
                        v[k * n + q] = s * vkp + c * vkq;
                    }
                }
            }
        }
        ((0..n).map(|i| a[i * n + i]).collect(), v)
    }

    fn second_moment(pool: &KernelPool) -> Vec<f64> {
        let d = pool.dim();
        let mut m = vec![0.0; d * d];
        for row in pool.rows() {
            for i in 0..d {
                for j in 0..d {
                    m[i * d + j] += row[i] * row[j] / pool.count() as f64;
                }
            }
        }
        m
    }

    fn rmse(a: &[f64], b: &[f64]) -> f64 {
        (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
    }

    fn max_reconstruction_rmse(pool: &KernelPool, rows: &[Vec<f64>]) -> f64 {
        pool.rows()
            .map(|k| {
                let coeffs: Vec<f64> = rows.iter().map(|r| r.iter().zip(k).map(|(a, b)| a * b).sum()).collect();
                let mut rec = vec![0.0; k.len()];
                for (c, r) in coeffs.iter().zip(rows) {
                    for (o, v) in rec.iter_mut().zip(r) {
                        *o += c * v;
                    }
                }
                rmse(k, &rec)
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn pool_rows_are_normalized_and_reproducible() {
        let pool = build_kernel_pool(200, (0.2, 3.0), 15, 3).unwrap();
        assert_eq!((pool.count(), pool.dim()), (200, 225));
        assert!(pool.rows().all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-6));
        assert_eq!(pool, build_kernel_pool(200, (0.2, 3.0), 15, 3).unwrap());
        let same = build_kernel_pool(20, (1.1, 1.1), 15, 0).unwrap();
        assert!(same.rows().all(|r| r == same.row(0)));
        assert!(build_kernel_pool(14, (0.2, 3.0), 15, 0).is_err());
    }

    #[test]
    fn projection_is_orthonormal_and_matches_jacobi_oracle() {
        let pool = build_kernel_pool(2000, (0.2, 3.0), 15, 11).unwrap();
        let p = compute_pca(&pool, 15).unwrap();
        for i in 0..15 {
            for j in 0..15 {
                let d: f64 = p.row(i).iter().zip(p.row(j)).map(|(a, b)| a * b).sum();
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((d - e).abs() < 1e-6, "({i},{j}) = {d}");
            }
        }
        assert!(p.eigenvalues().windows(2).all(|w| w[0] >= w[1]));
        for i in 0..15 {
            let r = p.row(i);
            let pivot = r.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            assert!(pivot > 0.0);
        }

        let (vals, vecs) = jacobi_eigen(second_moment(&pool), 225);
        let mut order: Vec<usize> = (0..225).collect();
        order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
        let oracle_rows: Vec<Vec<f64>> = order[..15].iter().map(|&c| (0..225).map(|r| vecs[r * 225 + c]).collect()).collect();
        for (i, &c) in order[..15].iter().enumerate() {
            assert!((vals[c] - p.eigenvalues()[i]).abs() < 1e-9 * vals[order[0]]);
        }
        let ours: Vec<Vec<f64>> = (0..15).map(|i| p.row(i).to_vec()).collect();
        let bound = max_reconstruction_rmse(&pool, &oracle_rows);
        let got = max_reconstruction_rmse(&pool, &ours);
        assert!((got - bound).abs() < 1e-7 + 1e-3 * bound, "ours {got} vs oracle {bound}");

        // Explained share of the second moment at dim 15.
        let total: f64 = vals.iter().sum();
        let kept: f64 = order[..15].iter().map(|&c| vals[c]).sum();
        assert!(kept / total >= 0.99);
        assert!((p.explained_ratio().unwrap() - kept / total).abs() < 1e-9);
    }

    #[test]
    fn rank_one_pool_gives_normalized_kernel() {
        let k = gaussian_kernel(1.4, 15).unwrap();
        let pool = KernelPool::from_kernels(&vec![k.clone(); 20]).unwrap();
        let p = compute_pca(&pool, 15).unwrap();
        let norm = k.weights().iter().map(|v| v * v).sum::<f64>().sqrt();
        for (a, b) in p.row(0).iter().zip(k.weights()) {
            assert!((a - b / norm).abs() < 1e-9);
        }
        // Padding directions keep the rows orthonormal.
        for i in 0..15 {
            let n: f64 = p.row(i).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn projection_is_linear() {
        let pool = build_kernel_pool(500, (0.2, 3.0), 15, 1).unwrap();
        let p = compute_pca(&pool, 15).unwrap();
        let zero = BlurKernel::new(15, vec![0.0; 225]).unwrap();
        assert!(p.project(&zero).unwrap().iter().all(|&v| v == 0.0));
        let (k1, k2) = (gaussian_kernel(0.9, 15).unwrap(), gaussian_kernel(2.2, 15).unwrap());
        let mix: Vec<f64> = k1.weights().iter().zip(k2.weights()).map(|(a, b)| 0.3 * a - 1.7 * b).collect();
        let lhs = p.project_slice(&mix).unwrap();
        let (a, b) = (p.project(&k1).unwrap(), p.project(&k2).unwrap());
        for i in 0..15 {
            assert!((lhs[i] - (0.3 * a[i] - 1.7 * b[i])).abs() < 1e-12);
        }
        assert!(p.project_slice(&[0.0; 10]).is_err());
    }

    #[test]
    fn projection_file_round_trip() {
        let pool = build_kernel_pool(100, (0.2, 3.0), 15, 1).unwrap();
        let p = compute_pca(&pool, 15).unwrap();
        let dir = tempfile::tempdir().unwrap();
        p.write(dir.path().join("p.bin")).unwrap();
        let back = PcaProjection::read(dir.path().join("p.bin")).unwrap();
        assert_eq!(back.hash(), p.hash());
        assert_eq!((back.dim(), back.input_dim()), (15, 225));
    }
}
