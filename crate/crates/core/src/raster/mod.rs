//! Point-to-grid rasterization: key prediction, multilinear footprints,
//! max/sum/mean scatter, bilinear gather, and the key-gradient balancing rule.

mod footprint;
mod keys;
mod lemma;
mod scatter;

pub use footprint::{
    corner_offsets, key_jacobian_check, lemma_d_matrix, make_footprint, Footprint,
};
pub use keys::{compute_keys, random_rotation, KeyMode, KeyParams};
pub use lemma::{verify_lemma2, Lemma2Report};
pub use scatter::{
    balance_key_gradient, derasterize, gather_kernel, rasterize, rasterize_max, rasterize_mean,
    rasterize_sum, scatter_kernel, Aggregation, GridMap, ScatterOutput,
};

use crate::error::{Error, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

/// A batch of point sets: positions `[B, N, 3]`, features `[B, N, f]`, and
/// optional per-point labels and foreground mask, both flattened `[B * N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloudBatch {
    pub positions: Tensor,
    pub features: Tensor,
    pub labels: Option<Vec<usize>>,
    pub fg_mask: Option<Vec<u8>>,
}

impl PointCloudBatch {
    pub fn new(positions: Tensor, features: Tensor) -> Result<Self> {
        let ps = positions.shape();
        let fs = features.shape();
        if ps.len() != 3 || ps[2] != 3 || fs.len() != 3 || fs[0] != ps[0] || fs[1] != ps[1] {
            return Err(Error::shape("point_cloud", &[ps, fs]));
        }
        if !positions.all_finite() {
            return Err(Error::invalid("point_cloud", "positions must be finite"));
        }
        Ok(Self {
            positions,
            features,
            labels: None,
            fg_mask: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.batch() * self.points() {
            return Err(Error::invalid(
                "point_cloud",
                "one label per point required",
            ));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_fg_mask(mut self, mask: Vec<u8>) -> Result<Self> {
        if mask.len() != self.batch() * self.points() || mask.iter().any(|&m| m > 1) {
            return Err(Error::invalid(
                "point_cloud",
                "fg mask must be 0/1 per point",
            ));
        }
        self.fg_mask = Some(mask);
        Ok(self)
    }

    pub fn batch(&self) -> usize {
        self.positions.shape()[0]
    }

    pub fn points(&self) -> usize {
        self.positions.shape()[1]
    }

    pub fn feature_width(&self) -> usize {
        self.features.shape()[2]
    }

    /// Applies the same per-cloud point permutation to positions, features,
    /// labels and mask.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let (b, n) = (self.batch(), self.points());
        let permute_rows = |t: &Tensor| {
            let d = t.last_dim();
            let mut out = Vec::with_capacity(t.len());
            for bi in 0..b {
                for &src in perm {
                    let r = (bi * n + src) * d;
                    out.extend_from_slice(&t.data()[r..r + d]);
                }
            }
            Tensor::new(t.shape(), out).expect("same shape")
        };
        let permute_flat = |v: &[usize]| -> Vec<usize> {
            (0..b)
                .flat_map(|bi| perm.iter().map(move |&src| bi * n + src))
                .map(|i| v[i])
                .collect()
        };
        Self {
            positions: permute_rows(&self.positions),
            features: permute_rows(&self.features),
            labels: self.labels.as_ref().map(|l| permute_flat(l)),
            fg_mask: self.fg_mask.as_ref().map(|m| {
                let wide: Vec<usize> = m.iter().map(|&x| x as usize).collect();
                permute_flat(&wide).into_iter().map(|x| x as u8).collect()
            }),
        }
    }
}

/// Tape-side view of a point cloud flowing through the blocks.
#[derive(Clone, Copy, Debug)]
pub struct Cloud {
    pub positions: Var,
    pub features: Var,
}
