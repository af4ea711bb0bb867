//! Exact ΔW-space representations used for merging.
//!
//! A layer update is either a dense `d_out x d_in` matrix or a sum of low-rank
//! products held as one concatenated pair `B·A`. Low-rank sums are kept while
//! they are cheaper than the dense matrix, which lets full-size shapes be
//! merged without allocating gigabytes per slot.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen, SVD};

use crate::adapter::{LayerKey, LoraAdapter};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum LayerDelta {
    Dense(DMatrix<f64>),
    /// `ΔW = b · a`, with `b: d_out x R` and `a: R x d_in`.
    LowRank { b: DMatrix<f64>, a: DMatrix<f64> },
}

/// Truncated factorization of one layer update.
#[derive(Debug, Clone)]
pub struct Truncation {
    /// `rank x d_in`, rows scaled by `sqrt(sigma)`.
    pub a: DMatrix<f64>,
    /// `d_out x rank`, columns scaled by `sqrt(sigma)`.
    pub b: DMatrix<f64>,
    /// All singular values, descending.
    pub singular_values: Vec<f64>,
    /// `||ΔW - ΔW_r||_F / ||ΔW||_F`, or 0 for a zero update.
    pub residual: f64,
}

impl LayerDelta {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            LayerDelta::Dense(m) => (m.nrows(), m.ncols()),
            LayerDelta::LowRank { b, a } => (b.nrows(), a.ncols()),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            LayerDelta::Dense(m) => m.clone(),
            LayerDelta::LowRank { b, a } => b * a,
        }
    }

    pub fn into_dense(self) -> DMatrix<f64> {
        match self {
            LayerDelta::Dense(m) => m,
            LayerDelta::LowRank { b, a } => b * a,
        }
    }

    pub fn is_dense(&self) -> bool {
        matches!(self, LayerDelta::Dense(_))
    }

    pub fn scaled(&self, c: f64) -> LayerDelta {
        match self {
            LayerDelta::Dense(m) => LayerDelta::Dense(m * c),
            LayerDelta::LowRank { b, a } => LayerDelta::LowRank {
                b: b * c,
                a: a.clone(),
            },
        }
    }

    /// `cx · x + cy · y`.
    pub fn combine(x: &LayerDelta, cx: f64, y: &LayerDelta, cy: f64) -> LayerDelta {
        match (x, y) {
            (LayerDelta::LowRank { b: bx, a: ax }, LayerDelta::LowRank { b: by, a: ay }) => {
                let (d_out, d_in) = x.shape();
                let inner = ax.nrows() + ay.nrows();
                let mut b = DMatrix::zeros(d_out, inner);
                b.columns_mut(0, bx.ncols()).copy_from(&(bx * cx));
                b.columns_mut(bx.ncols(), by.ncols()).copy_from(&(by * cy));
                let mut a = DMatrix::zeros(inner, d_in);
                a.rows_mut(0, ax.nrows()).copy_from(ax);
                a.rows_mut(ax.nrows(), ay.nrows()).copy_from(ay);
                LayerDelta::LowRank { b, a }.compacted()
            }
            _ => LayerDelta::Dense(x.to_dense() * cx + y.to_dense() * cy),
        }
    }

    /// Switches to dense storage once the factored form stops being smaller.
    fn compacted(self) -> LayerDelta {
        match self {
            LayerDelta::LowRank { ref b, ref a } if b.ncols() * (b.nrows() + a.ncols()) >= b.nrows() * a.ncols() => {
                LayerDelta::Dense(self.into_dense())
            }
            other => other,
        }
    }

    /// Singular values (descending) with the leading `keep` left and right
    /// singular vectors, as `(U: d_out x k, s, Vᵀ: k x d_in)`.
    fn leading_svd(&self, keep: usize) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
        match self {
            LayerDelta::Dense(m) => {
                let (u, s, v_t) = sorted_svd(m.clone());
                let k = keep.min(s.len());
                (u.columns(0, k).into_owned(), s, v_t.rows(0, k).into_owned())
            }
            LayerDelta::LowRank { b, a } => {
                // b = Qb·Sb and aᵀ = Qa·Sa with orthonormal Q, so ΔW = Qb (Sb Saᵀ) Qaᵀ
                // and only the small core needs an SVD. Q is never formed: only
                // the kept singular vectors are mapped back through b and a.
                let (d_out, d_in) = self.shape();
                let (t_b, s_b) = gram_basis(b);
                let a_t = a.transpose();
                let (t_a, s_a) = gram_basis(&a_t);
                if s_b.nrows() == 0 || s_a.nrows() == 0 {
                    return (DMatrix::zeros(d_out, 0), Vec::new(), DMatrix::zeros(0, d_in));
                }
                let (u_c, s, v_t_c) = sorted_svd(&s_b * s_a.transpose());
                let k = keep.min(s.len());
                let u = b * (t_b * u_c.columns(0, k));
                let v = a_t * (t_a * v_t_c.rows(0, k).transpose());
                (u, s, v.transpose())
            }
        }
    }

    /// Best rank-`rank` approximation (Eckart-Young), padded with zero
    /// components when the update has lower rank.
    pub fn truncate(&self, rank: usize) -> Truncation {
        let (d_out, d_in) = self.shape();
        let (u, s, v_t) = self.leading_svd(rank);
        let total: f64 = s.iter().map(|v| v * v).sum();
        let mut a = DMatrix::zeros(rank, d_in);
        let mut b = DMatrix::zeros(d_out, rank);
        if total == 0.0 {
            return Truncation {
                a,
                b,
                singular_values: s,
                residual: 0.0,
            };
        }
        let kept = u.ncols();
        for i in 0..kept {
            let root = s[i].sqrt();
            b.column_mut(i).copy_from(&(u.column(i) * root));
            a.row_mut(i).copy_from(&(v_t.row(i) * root));
        }
        let tail: f64 = s[kept..].iter().map(|v| v * v).sum();
        Truncation {
            a,
            b,
            residual: (tail / total).sqrt(),
            singular_values: s,
        }
    }
}

/// Eigenvalues of a Gram matrix below this fraction of the largest are
/// treated as zero; the dropped directions carry under 1e-6 of the norm,
/// below the f32 resolution of stored factors.
const GRAM_CUTOFF: f64 = 1e-13;

/// For `m: d x R`, returns `(t, s)` with `m·t` orthonormal (`d x k`) and
/// `m = (m·t)·s`, from the eigen-decomposition of `mᵀm`.
fn gram_basis(m: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    // An explicit transpose lets the product run through the blocked gemm.
    let eig = SymmetricEigen::new(m.transpose() * m);
    let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let kept: Vec<usize> = (0..eig.eigenvalues.len())
        .filter(|&i| top > 0.0 && eig.eigenvalues[i] > top * GRAM_CUTOFF)
        .collect();
    let r = m.ncols();
    let mut t = DMatrix::zeros(r, kept.len());
    let mut s = DMatrix::zeros(kept.len(), r);
    for (j, &i) in kept.iter().enumerate() {
        let root = eig.eigenvalues[i].sqrt();
        let v = eig.eigenvectors.column(i);
        t.column_mut(j).copy_from(&(v / root));
        s.row_mut(j).copy_from(&(v.transpose() * root));
    }
    (t, s)
}

fn sorted_svd(m: DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let svd = SVD::new(m, true, true);
    let u = svd.u.expect("left vectors requested");
    let v_t = svd.v_t.expect("right vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let s = order.iter().map(|&i| svd.singular_values[i]).collect();
    let u = DMatrix::from_fn(u.nrows(), order.len(), |r, c| u[(r, order[c])]);
    let v_t = DMatrix::from_fn(order.len(), v_t.ncols(), |r, c| v_t[(order[r], c)]);
    (u, s, v_t)
}

/// A ΔW-space merge result: one exact update per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedDelta {
    pub layers: BTreeMap<LayerKey, LayerDelta>,
    /// Number of single-task adapters folded into this result.
    pub merge_count: usize,
}

impl MergedDelta {
    /// Exact (unmerged) ΔW of one adapter, in factored form.
    pub fn from_adapter(adapter: &LoraAdapter) -> Self {
        let scaling = adapter.scaling();
        let layers = adapter
            .layers()
            .iter()
            .map(|(k, p)| {
                let delta = LayerDelta::LowRank {
                    b: p.b_matrix() * scaling,
                    a: p.a_matrix(),
                };
                (*k, delta.compacted())
            })
            .collect();
        MergedDelta {
            layers,
            merge_count: 1,
        }
    }

    pub fn signature(&self) -> Vec<(LayerKey, usize, usize)> {
        self.layers
            .iter()
            .map(|(k, d)| {
                let (d_out, d_in) = d.shape();
                (*k, d_in, d_out)
            })
            .collect()
    }

    pub fn check_compatible(&self, other: &MergedDelta) -> Result<()> {
        let (sx, sy) = (self.signature(), other.signature());
        if sx != sy {
            return Err(Error::IncompatibleAdapters(
                "merge operands differ in layer keys or shapes".into(),
            ));
        }
        Ok(())
    }

    pub fn dense(&self, key: &LayerKey) -> Result<DMatrix<f64>> {
        self.layers
            .get(key)
            .map(LayerDelta::to_dense)
            .ok_or(Error::KeyNotFound(*key))
    }

    /// `||self - other||_F / ||other||_F` over all layers (absolute if `other` is zero).
    pub fn relative_distance(&self, other: &MergedDelta) -> Result<f64> {
        self.check_compatible(other)?;
        let mut diff = 0.0;
        let mut norm = 0.0;
        for (k, d) in &self.layers {
            let x = d.to_dense();
            let y = other.layers[k].to_dense();
            diff += (&x - &y).norm_squared();
            norm += y.norm_squared();
        }
        Ok(if norm == 0.0 {
            diff.sqrt()
        } else {
            (diff / norm).sqrt()
        })
    }
}

impl From<&LoraAdapter> for MergedDelta {
    fn from(adapter: &LoraAdapter) -> Self {
        MergedDelta::from_adapter(adapter)
    }
}

pub(crate) fn check_adapter_against(delta: &MergedDelta, adapter: &LoraAdapter) -> Result<()> {
    let sig = adapter.signature();
    if delta.signature() != sig {
        return Err(Error::IncompatibleAdapters(format!(
            "`{}` does not match the merge operand's layer keys or shapes",
            adapter.task_id
        )));
    }
    Ok(())
}
