use std::rc::Rc;

use crate::error::{Error, Result};
use crate::raster::Footprint;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Aggregation {
    Max,
    Sum,
    Mean,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Self::Max),
            "sum" => Ok(Self::Sum),
            "mean" => Ok(Self::Mean),
            other => Err(Error::invalid(
                "aggregation",
                format!("unknown aggregation {other:?}"),
            )),
        }
    }
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Max => "max",
            Self::Sum => "sum",
            Self::Mean => "mean",
        })
    }
}

/// A rasterized (or convolved) feature grid living on the tape.
#[derive(Clone, Debug)]
pub struct GridMap {
    pub dims: usize,
    pub w: usize,
    pub c: usize,
    pub batch: usize,
    /// `[B, w, w, c]` or `[B, w, w, w, c]`.
    pub data: Var,
    /// Winning point per (sample, cell, channel) of a max scatter, -1 where
    /// no contribution beat the zero initializer.
    pub argmax: Option<Rc<Vec<i32>>>,
}

impl GridMap {
    pub fn cells(&self) -> usize {
        self.w.pow(self.dims as u32)
    }

    pub fn grid_shape(batch: usize, dims: usize, w: usize, c: usize) -> Vec<usize> {
        let mut s = vec![batch];
        s.extend(std::iter::repeat_n(w, dims));
        s.push(c);
        s
    }
}

/// Result of the forward scatter kernel.
pub struct ScatterOutput {
    /// `[B * cells * c]`
    pub grid: Vec<f64>,
    /// Max only: winning point index within its cloud, or -1.
    pub argmax: Vec<i32>,
    /// Max only: footprint corner of the winner.
    pub winner_corner: Vec<u8>,
    /// Mean only: bilinear mass per `[B * cells]`.
    pub mass: Vec<f64>,
    /// Max only: smallest gap between the winner and the runner-up
    /// (including the zero initializer) over touched cells.
    pub tie_margin: f64,
}

/// Forward scatter of `values [B * N * c]`. Points are visited in ascending
/// index and corners in footprint order; a max contribution replaces the cell
/// only if strictly greater, so exact ties keep the earliest contributor.
pub fn scatter_kernel(values: &[f64], c: usize, fp: &Footprint, agg: Aggregation) -> ScatterOutput {
    let cells = fp.cells();
    let total = fp.batch * cells * c;
    let mut grid = vec![0.0; total];
    let mut argmax = Vec::new();
    let mut winner_corner = Vec::new();
    let mut mass = Vec::new();
    let mut tie_margin = f64::INFINITY;
    match agg {
        Aggregation::Max => {
            argmax = vec![-1i32; total];
            winner_corner = vec![0u8; total];
            let mut second = vec![f64::NEG_INFINITY; total];
            let mut touched = vec![false; total];
            for b in 0..fp.batch {
                for i in 0..fp.points {
                    let p = b * fp.points + i;
                    let v = &values[p * c..(p + 1) * c];
                    let wts = fp.point_weights(p);
                    for (corner, &wt) in wts.iter().enumerate() {
                        let base = (b * cells + fp.corner_cell(p, corner)) * c;
                        for ch in 0..c {
                            let x = wt * v[ch];
                            let slot = base + ch;
                            touched[slot] = true;
                            if x > grid[slot] {
                                second[slot] = grid[slot];
                                grid[slot] = x;
                                argmax[slot] = i as i32;
                                winner_corner[slot] = corner as u8;
                            } else if x > second[slot] {
                                second[slot] = x;
                            }
                        }
                    }
                }
            }
            for slot in 0..total {
                if touched[slot] {
                    tie_margin = tie_margin.min(grid[slot] - second[slot]);
                }
            }
        }
        Aggregation::Sum | Aggregation::Mean => {
            if agg == Aggregation::Mean {
                mass = vec![0.0; fp.batch * cells];
            }
            for b in 0..fp.batch {
                for i in 0..fp.points {
                    let p = b * fp.points + i;
                    let v = &values[p * c..(p + 1) * c];
                    for (corner, &wt) in fp.point_weights(p).iter().enumerate() {
                        let cell = b * cells + fp.corner_cell(p, corner);
                        if agg == Aggregation::Mean {
                            mass[cell] += wt;
                        }
                        grid[cell * c..(cell + 1) * c]
                            .iter_mut()
                            .zip(v)
                            .for_each(|(g, x)| *g += wt * x);
                    }
                }
            }
            if agg == Aggregation::Mean {
                for (cell, &m) in mass.iter().enumerate() {
                    let row = &mut grid[cell * c..(cell + 1) * c];
                    if m > 0.0 {
                        row.iter_mut().for_each(|g| *g /= m);
                    } else {
                        row.iter_mut().for_each(|g| *g = 0.0);
                    }
                }
            }
        }
    }
    ScatterOutput {
        grid,
        argmax,
        winner_corner,
        mass,
        tie_margin,
    }
}

/// Bilinear (or trilinear) sampling of `grid [B * cells * c]` at every key.
pub fn gather_kernel(grid: &[f64], c: usize, fp: &Footprint) -> Vec<f64> {
    let cells = fp.cells();
    let mut out = vec![0.0; fp.batch * fp.points * c];
    for b in 0..fp.batch {
        for i in 0..fp.points {
            let p = b * fp.points + i;
            let o = &mut out[p * c..(p + 1) * c];
            for (corner, &wt) in fp.point_weights(p).iter().enumerate() {
                if wt == 0.0 {
                    continue;
                }
                let base = (b * cells + fp.corner_cell(p, corner)) * c;
                o.iter_mut()
                    .zip(&grid[base..base + c])
                    .for_each(|(o, g)| *o += wt * g);
            }
        }
    }
    out
}

/// Divides key cotangents by the grid resolution.
pub fn balance_key_gradient(key_cotangent: &mut [f64], w: usize) {
    let inv = 1.0 / w as f64;
    key_cotangent.iter_mut().for_each(|g| *g *= inv);
}

fn check_inputs(
    op: &'static str,
    tape: &Tape,
    values: Var,
    keys: Var,
    fp: &Footprint,
) -> Result<usize> {
    let vs = tape.shape(values);
    let ks = tape.shape(keys);
    if vs.len() != 3
        || ks.len() != 3
        || vs[0] != fp.batch
        || vs[1] != fp.points
        || ks[0] != fp.batch
        || ks[1] != fp.points
        || ks[2] != fp.dims
    {
        return Err(Error::shape(op, &[vs, ks, &[fp.batch, fp.points, fp.dims]]));
    }
    Ok(vs[2])
}

/// Rasterizes `values [B, N, c]` at the footprint of `keys [B, N, dims]`.
///
/// `fp` must have been built from the current value of `keys`. Gradients flow
/// to both values and keys; with `balance` the key cotangent produced here is
/// divided by `w`.
pub fn rasterize(
    tape: &mut Tape,
    values: Var,
    keys: Var,
    fp: &Rc<Footprint>,
    agg: Aggregation,
    balance: bool,
) -> Result<GridMap> {
    let c = check_inputs("rasterize", tape, values, keys, fp)?;
    let out = scatter_kernel(tape.value(values).data(), c, fp, agg);
    if agg == Aggregation::Max {
        tape.note_kink(out.tie_margin);
    }
    tape.note_kink(fp.boundary_margin());
    let shape = GridMap::grid_shape(fp.batch, fp.dims, fp.w, c);
    let grid_t = Tensor::new(&shape, out.grid)?;
    let argmax = Rc::new(out.argmax);
    let saved_argmax = Rc::clone(&argmax);
    let winner_corner = out.winner_corner;
    let mass = out.mass;
    let fp2 = Rc::clone(fp);
    let op = match agg {
        Aggregation::Max => "rasterize_max",
        Aggregation::Sum => "rasterize_sum",
        Aggregation::Mean => "rasterize_mean",
    };
    let data = tape.custom(
        op,
        &[values, keys],
        grid_t,
        Box::new(move |args| {
            let fp = &*fp2;
            let v = args.inputs[0].data();
            let cells = fp.cells();
            let corners = fp.corners();
            let mut gv = vec![0.0; v.len()];
            let mut gw = vec![0.0; fp.batch * fp.points * corners];
            match agg {
                Aggregation::Max => {
                    for b in 0..fp.batch {
                        for cell in 0..cells {
                            for ch in 0..c {
                                let slot = (b * cells + cell) * c + ch;
                                let winner = saved_argmax[slot];
                                if winner < 0 {
                                    continue;
                                }
                                let p = b * fp.points + winner as usize;
                                let corner = winner_corner[slot] as usize;
                                let g = args.grad[slot];
                                gv[p * c + ch] += g * fp.weights[p * corners + corner];
                                gw[p * corners + corner] += g * v[p * c + ch];
                            }
                        }
                    }
                }
                Aggregation::Sum | Aggregation::Mean => {
                    let grid = args.output.data();
                    for b in 0..fp.batch {
                        for i in 0..fp.points {
                            let p = b * fp.points + i;
                            let vp = &v[p * c..(p + 1) * c];
                            for corner in 0..corners {
                                let cell = b * cells + fp.corner_cell(p, corner);
                                let wt = fp.weights[p * corners + corner];
                                let g = &args.grad[cell * c..(cell + 1) * c];
                                let (norm, centre) = if agg == Aggregation::Mean {
                                    if mass[cell] <= 0.0 {
                                        continue;
                                    }
                                    (1.0 / mass[cell], Some(&grid[cell * c..(cell + 1) * c]))
                                } else {
                                    (1.0, None)
                                };
                                let mut acc = 0.0;
                                for ch in 0..c {
                                    gv[p * c + ch] += wt * norm * g[ch];
                                    let centred = match centre {
                                        Some(m) => vp[ch] - m[ch],
                                        None => vp[ch],
                                    };
                                    acc += g[ch] * centred * norm;
                                }
                                gw[p * corners + corner] += acc;
                            }
                        }
                    }
                }
            }
            let mut gk = Vec::new();
            if args.needs[1] {
                gk = fp.key_cotangent(&gw);
                if balance {
                    balance_key_gradient(&mut gk, fp.w);
                }
            }
            Ok(vec![gv, gk])
        }),
    );
    Ok(GridMap {
        dims: fp.dims,
        w: fp.w,
        c,
        batch: fp.batch,
        data,
        argmax: if agg == Aggregation::Max {
            Some(argmax)
        } else {
            None
        },
    })
}

pub fn rasterize_max(
    tape: &mut Tape,
    values: Var,
    keys: Var,
    fp: &Rc<Footprint>,
    balance: bool,
) -> Result<GridMap> {
    rasterize(tape, values, keys, fp, Aggregation::Max, balance)
}

pub fn rasterize_sum(
    tape: &mut Tape,
    values: Var,
    keys: Var,
    fp: &Rc<Footprint>,
    balance: bool,
) -> Result<GridMap> {
    rasterize(tape, values, keys, fp, Aggregation::Sum, balance)
}

pub fn rasterize_mean(
    tape: &mut Tape,
    values: Var,
    keys: Var,
    fp: &Rc<Footprint>,
    balance: bool,
) -> Result<GridMap> {
    rasterize(tape, values, keys, fp, Aggregation::Mean, balance)
}

/// Samples `grid` at every key: `[B, N, c]`. Differentiable with respect to
/// both the grid and the keys.
pub fn derasterize(
    tape: &mut Tape,
    grid: &GridMap,
    keys: Var,
    fp: &Rc<Footprint>,
    balance: bool,
) -> Result<Var> {
    let gs = tape.shape(grid.data).to_vec();
    let ks = tape.shape(keys).to_vec();
    if grid.w != fp.w
        || grid.dims != fp.dims
        || grid.batch != fp.batch
        || ks.len() != 3
        || ks[0] != fp.batch
        || ks[1] != fp.points
        || ks[2] != fp.dims
    {
        return Err(Error::shape("derasterize", &[&gs, &ks]));
    }
    let c = grid.c;
    let out = gather_kernel(tape.value(grid.data).data(), c, fp);
    let out = Tensor::new(&[fp.batch, fp.points, c], out)?;
    let fp2 = Rc::clone(fp);
    Ok(tape.custom(
        "derasterize",
        &[grid.data, keys],
        out,
        Box::new(move |args| {
            let fp = &*fp2;
            let grid = args.inputs[0].data();
            let cells = fp.cells();
            let corners = fp.corners();
            let mut gg = vec![0.0; grid.len()];
            let mut gw = vec![0.0; fp.batch * fp.points * corners];
            for b in 0..fp.batch {
                for i in 0..fp.points {
                    let p = b * fp.points + i;
                    let g = &args.grad[p * c..(p + 1) * c];
                    for corner in 0..corners {
                        let base = (b * cells + fp.corner_cell(p, corner)) * c;
                        let wt = fp.weights[p * corners + corner];
                        let mut acc = 0.0;
                        for ch in 0..c {
                            gg[base + ch] += wt * g[ch];
                            acc += grid[base + ch] * g[ch];
                        }
                        gw[p * corners + corner] = acc;
                    }
                }
            }
            let mut gk = Vec::new();
            if args.needs[1] {
                gk = fp.key_cotangent(&gw);
                if balance {
                    balance_key_gradient(&mut gk, fp.w);
                }
            }
            Ok(vec![gg, gk])
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::make_footprint;

    fn setup(keys: &[f64], dims: usize, w: usize) -> (Tensor, Rc<Footprint>) {
        let k = Tensor::new(&[1, keys.len() / dims, dims], keys.to_vec()).unwrap();
        let fp = Rc::new(make_footprint(&k, w).unwrap());
        (k, fp)
    }

    #[test]
    fn single_point_at_node() {
        let (k, fp) = setup(&[0.5, 0.5], 2, 3);
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::new(&[1, 1, 2], vec![1.5, -0.5]).unwrap());
        let kv = tape.leaf(k);
        let g = rasterize_max(&mut tape, v, kv, &fp, true).unwrap();
        let data = tape.value(g.data).data().to_vec();
        // centre cell (1, 1) carries the positive channel only; the negative
        // channel loses to the zero initializer
        let mut expect = vec![0.0; 18];
        expect[4 * 2] = 1.5;
        assert_eq!(data, expect);
        let argmax = g.argmax.unwrap();
        assert_eq!(argmax[8], 0);
        assert_eq!(argmax[9], -1);
    }

    #[test]
    fn losing_point_gets_zero_gradient() {
        // both points at the same node, weighted values 2 and 3
        let (k, fp) = setup(&[0.0, 0.0, 0.0, 0.0], 2, 2);
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::new(&[1, 2, 1], vec![2.0, 3.0]).unwrap());
        let kv = tape.leaf(k);
        let g = rasterize_max(&mut tape, v, kv, &fp, false).unwrap();
        assert_eq!(tape.value(g.data).data()[0], 3.0);
        let s = tape.sum(g.data).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(v).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn sum_and_mean_hand_values() {
        // two points in cell (0,0)-(1,1) of a 2x2 grid: key (0.25, 0) gives
        // weights [0.75, 0, 0.25, 0]; key (0.5, 0) gives [0.5, 0, 0.5, 0]
        let (k, fp) = setup(&[0.25, 0.0, 0.5, 0.0], 2, 2);
        let values = [2.0 / 0.75, 3.0 / 0.5];
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::new(&[1, 2, 1], values.to_vec()).unwrap());
        let kv = tape.leaf(k);
        let s = rasterize_sum(&mut tape, v, kv, &fp, false).unwrap();
        let m = rasterize_mean(&mut tape, v, kv, &fp, false).unwrap();
        let sum0 = tape.value(s.data).data()[0];
        let mean0 = tape.value(m.data).data()[0];
        assert!((sum0 - 5.0).abs() < 1e-12);
        assert!((mean0 - 5.0 / 1.25).abs() < 1e-12);
    }

    #[test]
    fn all_negative_values_leave_zero_grid() {
        let (k, fp) = setup(&[0.1, 0.7, 0.4, 0.4, 0.9, 0.2], 2, 4);
        let mut tape = Tape::new();
        let v =
            tape.leaf(Tensor::new(&[1, 3, 2], vec![-1.0, -0.2, -3.0, -0.5, -0.1, -2.0]).unwrap());
        let kv = tape.leaf(k);
        let g = rasterize_max(&mut tape, v, kv, &fp, true).unwrap();
        assert!(tape.value(g.data).data().iter().all(|&x| x == 0.0));
        assert!(g.argmax.unwrap().iter().all(|&a| a == -1));
    }

    #[test]
    fn scatter_gather_round_trip_at_node() {
        let (k, fp) = setup(&[0.25, 0.5, 0.75], 3, 5);
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::new(&[1, 1, 3], vec![0.7, 2.5, 1e-3]).unwrap());
        let kv = tape.leaf(k);
        let g = rasterize_max(&mut tape, v, kv, &fp, true).unwrap();
        let back = derasterize(&mut tape, &g, kv, &fp, true).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(v).data());
    }

    #[test]
    fn balancing_divides_key_gradient_by_w() {
        let run = |balance: bool| {
            let (k, fp) = setup(&[0.31, 0.62], 2, 16);
            let mut tape = Tape::new();
            let v = tape.leaf(Tensor::new(&[1, 1, 2], vec![0.8, 1.3]).unwrap());
            let kv = tape.leaf(k);
            let g = rasterize_sum(&mut tape, v, kv, &fp, balance).unwrap();
            let sq = tape.mul(g.data, g.data).unwrap();
            let s = tape.sum(sq).unwrap();
            tape.backward(s).unwrap().get(kv).unwrap().to_vec()
        };
        let (off, on) = (run(false), run(true));
        for (a, b) in off.iter().zip(&on) {
            assert!(a.abs() > 1e-6);
            assert!((a / 16.0 - b).abs() <= 1e-15 * a.abs());
        }
    }

    #[test]
    fn balance_factor_for_w2() {
        let mut g = vec![3.0, -1.0];
        balance_key_gradient(&mut g, 2);
        assert_eq!(g, vec![1.5, -0.5]);
        let mut g = vec![16.0];
        balance_key_gradient(&mut g, 16);
        assert_eq!(g, vec![1.0]);
    }
}
