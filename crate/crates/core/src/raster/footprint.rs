use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Enclosing cell and multilinear weights of every key.
///
/// Corners are ordered lexicographically over (lo/hi) per axis with the first
/// axis most significant, so for 2D heads the order is `00, 01, 10, 11`.
#[derive(Clone, Debug)]
pub struct Footprint {
    pub dims: usize,
    pub w: usize,
    pub batch: usize,
    pub points: usize,
    /// `[B * N * dims]`
    pub cell_lo: Vec<usize>,
    /// `[B * N * dims]`
    pub cell_hi: Vec<usize>,
    /// `[B * N * dims]`, fractional offset inside the cell.
    pub frac: Vec<f64>,
    /// `[B * N * 2^dims]`
    pub weights: Vec<f64>,
}

impl Footprint {
    pub fn corners(&self) -> usize {
        1 << self.dims
    }

    /// Cells per sample grid.
    pub fn cells(&self) -> usize {
        self.w.pow(self.dims as u32)
    }

    /// Flat cell index (within one sample grid) of `corner` for global point
    /// index `p` (= b * N + i).
    pub fn corner_cell(&self, p: usize, corner: usize) -> usize {
        let mut cell = 0;
        for a in 0..self.dims {
            let hi = (corner >> (self.dims - 1 - a)) & 1 == 1;
            let idx = if hi {
                self.cell_hi[p * self.dims + a]
            } else {
                self.cell_lo[p * self.dims + a]
            };
            cell = cell * self.w + idx;
        }
        cell
    }

    pub fn point_weights(&self, p: usize) -> &[f64] {
        let c = self.corners();
        &self.weights[p * c..(p + 1) * c]
    }

    /// `d weight[corner] / d key[axis]` for point `p`, flattened
    /// `[corner * dims + axis]`. The key-to-grid scale is `w - 1`.
    pub fn weight_jacobian(&self, p: usize) -> Vec<f64> {
        let (d, c) = (self.dims, self.corners());
        let t = &self.frac[p * d..(p + 1) * d];
        let scale = (self.w - 1) as f64;
        let mut jac = vec![0.0; c * d];
        for corner in 0..c {
            for axis in 0..d {
                let mut v = scale;
                for a in 0..d {
                    let hi = (corner >> (d - 1 - a)) & 1 == 1;
                    if a == axis {
                        v *= if hi { 1.0 } else { -1.0 };
                    } else {
                        v *= if hi { t[a] } else { 1.0 - t[a] };
                    }
                }
                jac[corner * d + axis] = v;
            }
        }
        jac
    }

    /// Chain rule from weight cotangents `[B * N * 2^dims]` to key cotangents
    /// `[B * N * dims]`.
    pub fn key_cotangent(&self, weight_grad: &[f64]) -> Vec<f64> {
        let (d, c) = (self.dims, self.corners());
        let mut out = vec![0.0; self.batch * self.points * d];
        for p in 0..self.batch * self.points {
            let jac = self.weight_jacobian(p);
            let gw = &weight_grad[p * c..(p + 1) * c];
            for axis in 0..d {
                out[p * d + axis] = (0..c).map(|k| gw[k] * jac[k * d + axis]).sum();
            }
        }
        out
    }

    /// Smallest distance (in key units) from any key to a cell boundary.
    pub fn boundary_margin(&self) -> f64 {
        let scale = (self.w - 1) as f64;
        self.frac
            .iter()
            .zip(self.cell_lo.iter().zip(&self.cell_hi))
            .filter(|(_, (lo, hi))| lo != hi)
            .map(|(t, _)| t.min(1.0 - t) / scale)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Per-axis lo/hi selector for every corner, in footprint order.
pub fn corner_offsets(dims: usize) -> Vec<Vec<usize>> {
    (0..1usize << dims)
        .map(|c| (0..dims).map(|a| (c >> (dims - 1 - a)) & 1).collect())
        .collect()
}

/// Footprints of keys `[B, N, dims]` on a grid of resolution `w`.
pub fn make_footprint(keys: &Tensor, w: usize) -> Result<Footprint> {
    if w < 2 {
        return Err(Error::invalid(
            "make_footprint",
            format!("grid size {w} < 2"),
        ));
    }
    let s = keys.shape();
    if s.len() != 3 || !(2..=3).contains(&s[2]) {
        return Err(Error::shape("make_footprint", &[s]));
    }
    let (batch, points, dims) = (s[0], s[1], s[2]);
    let scale = (w - 1) as f64;
    let n = batch * points;
    let mut cell_lo = Vec::with_capacity(n * dims);
    let mut cell_hi = Vec::with_capacity(n * dims);
    let mut frac = Vec::with_capacity(n * dims);
    for (i, &k) in keys.data().iter().enumerate() {
        if !(0.0..=1.0).contains(&k) {
            return Err(Error::invalid(
                "make_footprint",
                format!("key {k} at flat index {i} outside [0, 1]"),
            ));
        }
        let u = scale * k;
        let lo = (u.floor() as usize).min(w - 1);
        let hi = (lo + 1).min(w - 1);
        cell_lo.push(lo);
        cell_hi.push(hi);
        frac.push(if lo == hi { 0.0 } else { u - lo as f64 });
    }
    let corners = 1usize << dims;
    let mut weights = Vec::with_capacity(n * corners);
    for p in 0..n {
        let t = &frac[p * dims..(p + 1) * dims];
        for c in 0..corners {
            let mut v = 1.0;
            for (a, &ta) in t.iter().enumerate() {
                let hi = (c >> (dims - 1 - a)) & 1 == 1;
                v *= if hi { ta } else { 1.0 - ta };
            }
            weights.push(v);
        }
    }
    Ok(Footprint {
        dims,
        w,
        batch,
        points,
        cell_lo,
        cell_hi,
        frac,
        weights,
    })
}

/// The 4x2 matrix `D` of the bilinear-weight Jacobian written with floor and
/// ceiling of the scaled key, row-major. `scale` is the grid span `w - 1`.
pub fn lemma_d_matrix(key: [f64; 2], scale: f64) -> [[f64; 2]; 4] {
    let (u0, u1) = (scale * key[0], scale * key[1]);
    let (c0, f0) = (u0.floor() + 1.0, u0.floor());
    let (c1, f1) = (u1.floor() + 1.0, u1.floor());
    [
        [u1 - c1, u0 - c0],
        [-(u1 - f1), -(u0 - c0)],
        [-(u1 - c1), -(u0 - f0)],
        [u1 - f1, u0 - f0],
    ]
}

/// Max absolute difference between the closed-form Jacobian `(w-1) * D` and
/// a central finite-difference Jacobian of the footprint weights of a single
/// 2D key on a grid of resolution `w`.
pub fn key_jacobian_check(key: [f64; 2], w: usize) -> Result<f64> {
    let scale = (w - 1) as f64;
    let d = lemma_d_matrix(key, scale);
    let weights_at = |k: [f64; 2]| -> Result<Vec<f64>> {
        let t = Tensor::new(&[1, 1, 2], k.to_vec())?;
        Ok(make_footprint(&t, w)?.weights)
    };
    let h = 1e-7;
    let mut err: f64 = 0.0;
    for axis in 0..2 {
        let mut up = key;
        let mut down = key;
        up[axis] += h;
        down[axis] -= h;
        let (wu, wd) = (weights_at(up)?, weights_at(down)?);
        for corner in 0..4 {
            let fd = (wu[corner] - wd[corner]) / (2.0 * h);
            err = err.max((fd - scale * d[corner][axis]).abs());
        }
    }
    Ok(err)
}
