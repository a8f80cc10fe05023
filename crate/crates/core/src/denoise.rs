//! Low-rank denoising of explanation components.
//!
//! Components `[C, H, W]` are viewed as a `C x K` matrix (`K = H * W`), each row
//! is centered, and the matrix is rebuilt from its leading singular triplets
//! before the row means are restored.

use crate::cam::RelevanceStack;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_KEEP_FRACTION: f64 = 0.10;

const MAX_SWEEPS: usize = 80;
const JACOBI_TOL: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    /// `[rows, r]`, orthonormal columns.
    pub u: Tensor,
    /// Length `r = min(rows, cols)`, non-increasing.
    pub singular_values: Vec<f32>,
    /// `[cols, r]`, orthonormal columns.
    pub v: Tensor,
}

/// Thin SVD in f64, column-major factors: `a = sum_i s[i] * u[i] v[i]^T`.
pub(crate) struct Svd64 {
    pub u: Vec<Vec<f64>>,
    pub s: Vec<f64>,
    pub v: Vec<Vec<f64>>,
}

/// One-sided Jacobi SVD of a row-major `rows x cols` matrix.
pub(crate) fn svd_f64(a: &[f64], rows: usize, cols: usize) -> Result<Svd64> {
    if rows == 0 || cols == 0 || a.len() != rows * cols {
        return Err(Error::shape(
            "svd",
            format!("{rows}x{cols} with {} values", a.len()),
        ));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("svd input"));
    }
    // Orthogonalize the columns of the tall orientation.
    let transposed = rows < cols;
    let (m, n) = if transposed {
        (cols, rows)
    } else {
        (rows, cols)
    };
    let mut work: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            (0..m)
                .map(|i| {
                    if transposed {
                        a[j * cols + i]
                    } else {
                        a[i * cols + j]
                    }
                })
                .collect()
        })
        .collect();
    let mut right: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = work[p].iter().map(|v| v * v).sum();
                let beta: f64 = work[q].iter().map(|v| v * v).sum();
                let gamma: f64 = work[p].iter().zip(&work[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut work, p, q, c, s);
                rotate(&mut right, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut s: Vec<f64> = work
        .iter()
        .map(|col| col.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]).then(i.cmp(&j)));
    let s_max = s.iter().copied().fold(0.0, f64::max);
    let cutoff = s_max * 1e-12 * m as f64;

    let mut left: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut sorted_s = Vec::with_capacity(n);
    let mut sorted_right = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for &j in &order {
        if s[j] > cutoff && s[j] > 0.0 {
            left.push(work[j].iter().map(|v| v / s[j]).collect());
        } else {
            s[j] = 0.0;
            deficient.push(left.len());
            left.push(vec![0.0; m]);
        }
        sorted_s.push(s[j]);
        sorted_right.push(right[j].clone());
    }
    complete_basis(&mut left, &deficient);

    Ok(if transposed {
        Svd64 {
            u: sorted_right,
            s: sorted_s,
            v: left,
        }
    } else {
        Svd64 {
            u: left,
            s: sorted_s,
            v: sorted_right,
        }
    })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    for (x, y) in head[p].iter_mut().zip(tail[0].iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fill the listed zero columns with unit vectors orthogonal to all others.
fn complete_basis(cols: &mut [Vec<f64>], missing: &[usize]) {
    let m = cols.first().map_or(0, Vec::len);
    let mut candidate = 0;
    for &slot in missing {
        while candidate < m {
            let mut v = vec![0.0; m];
            v[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for (k, col) in cols.iter().enumerate() {
                    if k == slot {
                        continue;
                    }
                    let dot: f64 = col.iter().zip(&v).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(col).for_each(|(x, c)| *x -= dot * c);
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                cols[slot] = v.into_iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}

/// Thin SVD of a small rank-2 matrix.
pub fn svd_small(matrix: &Tensor) -> Result<SvdResult> {
    let [rows, cols] = *matrix.shape() else {
        return Err(Error::shape(
            "svd_small",
            format!("expected a matrix, got {:?}", matrix.shape()),
        ));
    };
    let svd = svd_f64(&matrix.to_f64(), rows, cols)?;
    let r = svd.s.len();
    let pack = |factor: &[Vec<f64>], len: usize| -> Result<Tensor> {
        let mut data = vec![0f32; len * r];
        for (j, col) in factor.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                data[i * r + j] = v as f32;
            }
        }
        Tensor::new(vec![len, r], data)
    };
    Ok(SvdResult {
        u: pack(&svd.u, rows)?,
        singular_values: svd.s.iter().map(|&s| s as f32).collect(),
        v: pack(&svd.v, cols)?,
    })
}

/// Number of singular triplets kept for a `rows x cols` matrix.
pub fn kept_rank(keep_fraction: f64, rows: usize, cols: usize) -> usize {
    ((keep_fraction * rows.min(cols) as f64).round() as usize).max(1)
}

pub fn denoise_components(
    components: &RelevanceStack,
    keep_fraction: f64,
) -> Result<RelevanceStack> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "keep fraction must lie in (0, 1], got {keep_fraction}"
        )));
    }
    let (c, h, w) = components.values.dims3()?;
    let k = h * w;
    let mut matrix = components.values.to_f64();
    let means: Vec<f64> = matrix
        .chunks(k)
        .map(|row| row.iter().sum::<f64>() / k as f64)
        .collect();
    for (row, mean) in matrix.chunks_mut(k).zip(&means) {
        row.iter_mut().for_each(|v| *v -= mean);
    }
    let svd = svd_f64(&matrix, c, k)?;
    let rank = kept_rank(keep_fraction, c, k);

    let mut rebuilt = vec![0f64; c * k];
    for t in 0..rank {
        let (u, s, v) = (&svd.u[t], svd.s[t], &svd.v[t]);
        for (i, row) in rebuilt.chunks_mut(k).enumerate() {
            let scale = u[i] * s;
            row.iter_mut().zip(v).for_each(|(x, vj)| *x += scale * vj);
        }
    }
    for (row, mean) in rebuilt.chunks_mut(k).zip(&means) {
        row.iter_mut().for_each(|v| *v += mean);
    }
    Ok(RelevanceStack::new(
        components.layer.clone(),
        Tensor::from_f64(vec![c, h, w], &rebuilt)?,
    ))
}
