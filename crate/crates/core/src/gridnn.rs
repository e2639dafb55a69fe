//! Dense layers on grids and point features: same-resolution convolution,
//! batch/instance/adaptive-instance normalization, pooling, residual blocks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{uniform_init, Forward, ParamId, ParamStore};
use crate::raster::GridMap;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
pub const RUNNING_MOMENTUM: f64 = 0.9;

/// Fully connected layer over the last axis.
#[derive(Clone, Debug)]
pub struct Dense {
    pub d_in: usize,
    pub d_out: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            uniform_init(rng, &[d_in, d_out], d_in),
            true,
        );
        let bias = store.add(
            format!("{name}.bias"),
            uniform_init(rng, &[d_out], d_in),
            true,
        );
        Self {
            d_in,
            d_out,
            weight,
            bias,
        }
    }

    pub fn forward(&self, fwd: &mut Forward<'_>, x: Var) -> Result<Var> {
        let (w, b) = (fwd.param(self.weight), fwd.param(self.bias));
        fwd.tape.affine(x, w, Some(b))
    }
}

/// Precomputed neighbourhood of every cell for a cubic kernel of side `k`.
struct Stencil {
    cells: usize,
    taps: usize,
    /// `[cells * taps]`, input cell index or `usize::MAX` outside the grid.
    table: Vec<usize>,
}

impl Stencil {
    fn new(dims: usize, w: usize, k: usize) -> Self {
        let cells = w.pow(dims as u32);
        let taps = k.pow(dims as u32);
        let half = (k / 2) as isize;
        let mut table = Vec::with_capacity(cells * taps);
        let mut coord = vec![0isize; dims];
        for cell in 0..cells {
            let mut rem = cell;
            for a in (0..dims).rev() {
                coord[a] = (rem % w) as isize;
                rem /= w;
            }
            for tap in 0..taps {
                let mut t = tap;
                let mut idx = 0usize;
                let mut inside = true;
                let mut offs = vec![0isize; dims];
                for a in (0..dims).rev() {
                    offs[a] = (t % k) as isize - half;
                    t /= k;
                }
                for a in 0..dims {
                    let c = coord[a] + offs[a];
                    if c < 0 || c >= w as isize {
                        inside = false;
                        break;
                    }
                    idx = idx * w + c as usize;
                }
                table.push(if inside { idx } else { usize::MAX });
            }
        }
        Self { cells, taps, table }
    }
}

/// Zero-padded cross-correlation that keeps the spatial resolution.
#[derive(Clone, Debug)]
pub struct Conv {
    pub dims: usize,
    pub ksize: usize,
    pub c_in: usize,
    pub c_out: usize,
    /// `[k^dims, c_in, c_out]`
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dims: usize,
        ksize: usize,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        assert!(ksize % 2 == 1, "odd kernel sizes only");
        let taps = ksize.pow(dims as u32);
        let fan_in = taps * c_in;
        let kernel = store.add(
            format!("{name}.kernel"),
            uniform_init(rng, &[taps, c_in, c_out], fan_in),
            true,
        );
        let bias = store.add(
            format!("{name}.bias"),
            uniform_init(rng, &[c_out], fan_in),
            true,
        );
        Self {
            dims,
            ksize,
            c_in,
            c_out,
            kernel,
            bias,
        }
    }

    pub fn forward(&self, fwd: &mut Forward<'_>, grid: &GridMap) -> Result<GridMap> {
        let (k, b) = (fwd.param(self.kernel), fwd.param(self.bias));
        conv_same(&mut fwd.tape, grid, k, b, self.ksize)
    }
}

/// `kernel [k^dims, c_in, c_out]`, `bias [c_out]`.
pub fn conv_same(
    tape: &mut Tape,
    grid: &GridMap,
    kernel: Var,
    bias: Var,
    ksize: usize,
) -> Result<GridMap> {
    let ks = tape.shape(kernel).to_vec();
    let (dims, w, c_in) = (grid.dims, grid.w, grid.c);
    let taps = ksize.pow(dims as u32);
    if ks.len() != 3 || ks[0] != taps || ks[1] != c_in || tape.value(bias).len() != ks[2] {
        return Err(Error::shape(
            "conv_same",
            &[tape.shape(grid.data), &ks, tape.shape(bias)],
        ));
    }
    let c_out = ks[2];
    let st = Stencil::new(dims, w, ksize);
    let batch = grid.batch;
    let input = tape.value(grid.data).data();
    let kd = tape.value(kernel).data();
    let bd = tape.value(bias).data();
    let mut out = vec![0.0; batch * st.cells * c_out];
    for b in 0..batch {
        for cell in 0..st.cells {
            let o = &mut out[(b * st.cells + cell) * c_out..(b * st.cells + cell + 1) * c_out];
            o.copy_from_slice(bd);
            for tap in 0..st.taps {
                let src = st.table[cell * st.taps + tap];
                if src == usize::MAX {
                    continue;
                }
                let x = &input[(b * st.cells + src) * c_in..(b * st.cells + src + 1) * c_in];
                let kt = &kd[tap * c_in * c_out..(tap + 1) * c_in * c_out];
                for (ci, &xv) in x.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let krow = &kt[ci * c_out..(ci + 1) * c_out];
                    o.iter_mut().zip(krow).for_each(|(o, k)| *o += xv * k);
                }
            }
        }
    }
    let out = Tensor::new(&GridMap::grid_shape(batch, dims, w, c_out), out)?;
    let data = tape.custom(
        "conv_same",
        &[grid.data, kernel, bias],
        out,
        Box::new(move |args| {
            let input = args.inputs[0].data();
            let kd = args.inputs[1].data();
            let g = args.grad;
            let mut gi = if args.needs[0] {
                vec![0.0; input.len()]
            } else {
                Vec::new()
            };
            let mut gk = if args.needs[1] {
                vec![0.0; kd.len()]
            } else {
                Vec::new()
            };
            let mut gb = vec![0.0; c_out];
            for b in 0..batch {
                for cell in 0..st.cells {
                    let go = &g[(b * st.cells + cell) * c_out..(b * st.cells + cell + 1) * c_out];
                    gb.iter_mut().zip(go).for_each(|(a, g)| *a += g);
                    for tap in 0..st.taps {
                        let src = st.table[cell * st.taps + tap];
                        if src == usize::MAX {
                            continue;
                        }
                        let base = (b * st.cells + src) * c_in;
                        let kt = &kd[tap * c_in * c_out..(tap + 1) * c_in * c_out];
                        for ci in 0..c_in {
                            let krow = &kt[ci * c_out..(ci + 1) * c_out];
                            if !gi.is_empty() {
                                gi[base + ci] +=
                                    krow.iter().zip(go).map(|(k, g)| k * g).sum::<f64>();
                            }
                            if !gk.is_empty() {
                                let xv = input[base + ci];
                                if xv != 0.0 {
                                    let grow = &mut gk
                                        [(tap * c_in + ci) * c_out..(tap * c_in + ci + 1) * c_out];
                                    grow.iter_mut().zip(go).for_each(|(a, g)| *a += xv * g);
                                }
                            }
                        }
                    }
                }
            }
            Ok(vec![gi, gk, gb])
        }),
    );
    Ok(GridMap {
        dims,
        w,
        c: c_out,
        batch,
        data,
        argmax: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NormKind {
    Batch,
    Instance,
    AdaptiveInstance,
}

impl std::str::FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(Self::Batch),
            "instance" => Ok(Self::Instance),
            "adaptive" | "adaptive-instance" | "adain" => Ok(Self::AdaptiveInstance),
            other => Err(Error::invalid(
                "norm_kind",
                format!("unknown norm kind {other:?}"),
            )),
        }
    }
}

/// Normalization over the leading axis groups of `x [B, ..., c]` per channel.
#[derive(Clone, Debug)]
pub struct Norm {
    pub kind: NormKind,
    pub c: usize,
    pub scale: Option<ParamId>,
    pub shift: Option<ParamId>,
    pub running_mean: Option<ParamId>,
    pub running_var: Option<ParamId>,
    /// Adaptive kind: conditioning vector to `[scale | shift]`.
    pub style_map: Option<Dense>,
}

impl Norm {
    /// `style_dim` is required for the adaptive kind.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        kind: NormKind,
        c: usize,
        style_dim: Option<usize>,
    ) -> Self {
        let mut n = Norm {
            kind,
            c,
            scale: None,
            shift: None,
            running_mean: None,
            running_var: None,
            style_map: None,
        };
        match kind {
            NormKind::Batch | NormKind::Instance => {
                n.scale = Some(store.add(format!("{name}.scale"), Tensor::full(&[c], 1.0), true));
                n.shift = Some(store.add(format!("{name}.shift"), Tensor::zeros(&[c]), true));
                if kind == NormKind::Batch {
                    n.running_mean =
                        Some(store.add(format!("{name}.running_mean"), Tensor::zeros(&[c]), false));
                    n.running_var = Some(store.add(
                        format!("{name}.running_var"),
                        Tensor::full(&[c], 1.0),
                        false,
                    ));
                }
            }
            NormKind::AdaptiveInstance => {
                let sd = style_dim.expect("adaptive normalization needs a style width");
                let dense = Dense::new(store, rng, &format!("{name}.style"), sd, 2 * c);
                // start from unit scale, zero shift
                let bias = store.value_mut(dense.bias);
                for (j, v) in bias.data_mut().iter_mut().enumerate() {
                    *v = if j < c { 1.0 } else { 0.0 };
                }
                let s = 0.1 / (sd as f64).sqrt();
                for v in store.value_mut(dense.weight).data_mut() {
                    *v = rng.random_range(-s..s);
                }
                n.style_map = Some(dense);
            }
        }
        n
    }

    /// `cond [B, style_dim]` is consumed by the adaptive kind only.
    pub fn forward(&self, fwd: &mut Forward<'_>, x: Var, cond: Option<Var>) -> Result<Var> {
        let style = match (&self.style_map, cond) {
            (Some(dense), Some(cond)) => Some(dense.forward(fwd, cond)?),
            (Some(_), None) => {
                return Err(Error::invalid(
                    "normalize",
                    "adaptive normalization requires a style vector",
                ))
            }
            _ => None,
        };
        normalize(fwd, x, self, style)
    }
}

/// Normalizes `x [B, ..., c]`. For the adaptive kind `style [B, 2c]` supplies
/// per-sample scale (first half) and shift (second half).
pub fn normalize(fwd: &mut Forward<'_>, x: Var, p: &Norm, style: Option<Var>) -> Result<Var> {
    let shape = fwd.value(x).shape().to_vec();
    if *shape.last().unwrap() != p.c {
        return Err(Error::shape("normalize", &[&shape, &[p.c]]));
    }
    let batch = shape[0];
    match p.kind {
        NormKind::Batch => {
            let xhat = if fwd.train {
                let (xhat, mean, var) = standardize(&mut fwd.tape, x, 1)?;
                let (rm, rv) = (p.running_mean.unwrap(), p.running_var.unwrap());
                let store = fwd.store_mut();
                for (r, m) in store.value_mut(rm).data_mut().iter_mut().zip(&mean) {
                    *r = RUNNING_MOMENTUM * *r + (1.0 - RUNNING_MOMENTUM) * m;
                }
                for (r, v) in store.value_mut(rv).data_mut().iter_mut().zip(&var) {
                    *r = RUNNING_MOMENTUM * *r + (1.0 - RUNNING_MOMENTUM) * v;
                }
                xhat
            } else {
                let mean = fwd.store().value(p.running_mean.unwrap()).data().to_vec();
                let var = fwd.store().value(p.running_var.unwrap()).data().to_vec();
                let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
                let shift: Vec<f64> = mean.iter().zip(&inv).map(|(m, i)| -m * i).collect();
                let inv = fwd.input(Tensor::new(&[p.c], inv)?);
                let shift = fwd.input(Tensor::new(&[p.c], shift)?);
                let y = fwd.tape.mul_cols(x, inv)?;
                fwd.tape.add_bias(y, shift)?
            };
            affine_cols(fwd, xhat, p)
        }
        NormKind::Instance => {
            let (xhat, _, _) = standardize(&mut fwd.tape, x, batch)?;
            affine_cols(fwd, xhat, p)
        }
        NormKind::AdaptiveInstance => {
            let style = style.ok_or_else(|| {
                Error::invalid(
                    "normalize",
                    "adaptive normalization requires a style vector",
                )
            })?;
            let ss = fwd.value(style).shape().to_vec();
            if ss != [batch, 2 * p.c] {
                return Err(Error::shape("normalize", &[&shape, &ss]));
            }
            let (xhat, _, _) = standardize(&mut fwd.tape, x, batch)?;
            modulate(&mut fwd.tape, xhat, style)
        }
    }
}

fn affine_cols(fwd: &mut Forward<'_>, xhat: Var, p: &Norm) -> Result<Var> {
    let (s, b) = (fwd.param(p.scale.unwrap()), fwd.param(p.shift.unwrap()));
    let y = fwd.tape.mul_cols(xhat, s)?;
    fwd.tape.add_bias(y, b)
}

/// Zero-mean unit-variance per (group, channel); `x` is viewed as
/// `[groups, rows, c]`. Returns the standardized tensor and the per-channel
/// batch statistics of the first group (used for running averages when
/// `groups == 1`).
pub fn standardize(tape: &mut Tape, x: Var, groups: usize) -> Result<(Var, Vec<f64>, Vec<f64>)> {
    let xv = tape.value(x);
    let c = xv.last_dim();
    let rows = xv.rows();
    if groups == 0 || !rows.is_multiple_of(groups) {
        return Err(Error::shape("standardize", &[xv.shape(), &[groups]]));
    }
    let m = rows / groups;
    let data = xv.data();
    let mut mean = vec![0.0; groups * c];
    let mut var = vec![0.0; groups * c];
    for g in 0..groups {
        let block = &data[g * m * c..(g + 1) * m * c];
        let mu = &mut mean[g * c..(g + 1) * c];
        for row in block.chunks(c) {
            mu.iter_mut().zip(row).for_each(|(a, x)| *a += x);
        }
        mu.iter_mut().for_each(|a| *a /= m as f64);
        let vv = &mut var[g * c..(g + 1) * c];
        for row in block.chunks(c) {
            for j in 0..c {
                let d = row[j] - mu[j];
                vv[j] += d * d;
            }
        }
        vv.iter_mut().for_each(|a| *a /= m as f64);
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
    let mut out = Vec::with_capacity(data.len());
    for g in 0..groups {
        for row in data[g * m * c..(g + 1) * m * c].chunks(c) {
            for j in 0..c {
                out.push((row[j] - mean[g * c + j]) * inv_std[g * c + j]);
            }
        }
    }
    let out = Tensor::new(xv.shape(), out)?;
    let stats = (mean[..c].to_vec(), var[..c].to_vec());
    let v = tape.custom(
        "standardize",
        &[x],
        out,
        Box::new(move |args| {
            let xhat = args.output.data();
            let g = args.grad;
            let mut gx = vec![0.0; g.len()];
            for grp in 0..groups {
                let range = grp * m * c..(grp + 1) * m * c;
                let mut mean_g = vec![0.0; c];
                let mut mean_gx = vec![0.0; c];
                for (gr, xr) in g[range.clone()]
                    .chunks(c)
                    .zip(xhat[range.clone()].chunks(c))
                {
                    for j in 0..c {
                        mean_g[j] += gr[j];
                        mean_gx[j] += gr[j] * xr[j];
                    }
                }
                mean_g.iter_mut().for_each(|a| *a /= m as f64);
                mean_gx.iter_mut().for_each(|a| *a /= m as f64);
                let out = &mut gx[range.clone()];
                for ((o, gr), xr) in out
                    .chunks_mut(c)
                    .zip(g[range.clone()].chunks(c))
                    .zip(xhat[range].chunks(c))
                {
                    for j in 0..c {
                        o[j] = inv_std[grp * c + j] * (gr[j] - mean_g[j] - xr[j] * mean_gx[j]);
                    }
                }
            }
            Ok(vec![gx])
        }),
    );
    Ok((v, stats.0, stats.1))
}

/// `y[b, .., j] = x[b, .., j] * style[b, j] + style[b, c + j]`.
pub fn modulate(tape: &mut Tape, x: Var, style: Var) -> Result<Var> {
    let xv = tape.value(x);
    let sv = tape.value(style);
    let batch = xv.shape()[0];
    let c = xv.last_dim();
    if sv.shape() != [batch, 2 * c] {
        return Err(Error::shape("modulate", &[xv.shape(), sv.shape()]));
    }
    let per = xv.len() / batch;
    let mut out = xv.data().to_vec();
    for b in 0..batch {
        let s = &sv.data()[b * 2 * c..(b + 1) * 2 * c];
        for row in out[b * per..(b + 1) * per].chunks_mut(c) {
            for j in 0..c {
                row[j] = row[j] * s[j] + s[c + j];
            }
        }
    }
    let out = Tensor::new(xv.shape(), out)?;
    Ok(tape.custom(
        "modulate",
        &[x, style],
        out,
        Box::new(move |args| {
            let (x, s) = (args.inputs[0].data(), args.inputs[1].data());
            let mut gx = vec![0.0; x.len()];
            let mut gs = vec![0.0; s.len()];
            for b in 0..batch {
                let sb = &s[b * 2 * c..(b + 1) * 2 * c];
                for r in 0..per / c {
                    let off = b * per + r * c;
                    for j in 0..c {
                        let g = args.grad[off + j];
                        gx[off + j] = g * sb[j];
                        gs[b * 2 * c + j] += g * x[off + j];
                        gs[b * 2 * c + c + j] += g;
                    }
                }
            }
            Ok(vec![gx, gs])
        }),
    ))
}

/// Stride-2 max pooling with a 2^dims window; odd trailing cells are dropped.
/// Ties route the cotangent to the first element in window order.
pub fn max_pool(tape: &mut Tape, grid: &GridMap) -> Result<GridMap> {
    let (dims, w, c, batch) = (grid.dims, grid.w, grid.c, grid.batch);
    let wo = w / 2;
    if wo == 0 {
        return Err(Error::invalid(
            "max_pool",
            format!("grid of size {w} cannot be pooled"),
        ));
    }
    let in_cells = w.pow(dims as u32);
    let out_cells = wo.pow(dims as u32);
    let window = 1usize << dims;
    let mut sources = Vec::with_capacity(out_cells * window);
    for oc in 0..out_cells {
        let mut rem = oc;
        let mut coord = vec![0usize; dims];
        for a in (0..dims).rev() {
            coord[a] = rem % wo;
            rem /= wo;
        }
        for k in 0..window {
            let mut idx = 0;
            for a in 0..dims {
                let bit = (k >> (dims - 1 - a)) & 1;
                idx = idx * w + 2 * coord[a] + bit;
            }
            sources.push(idx);
        }
    }
    let input = tape.value(grid.data).data();
    let mut out = vec![0.0; batch * out_cells * c];
    let mut winners = vec![0usize; batch * out_cells * c];
    let mut margin = f64::INFINITY;
    for b in 0..batch {
        for oc in 0..out_cells {
            for ch in 0..c {
                let vals =
                    (0..window).map(|k| input[(b * in_cells + sources[oc * window + k]) * c + ch]);
                let mut best = f64::NEG_INFINITY;
                let mut second = f64::NEG_INFINITY;
                let mut arg = 0;
                for (k, v) in vals.enumerate() {
                    if v > best {
                        second = best;
                        best = v;
                        arg = k;
                    } else if v > second && v < best {
                        second = v;
                    }
                }
                // exact ties are copies of one value (constant regions)
                if second < best {
                    margin = margin.min(best - second);
                }
                let slot = (b * out_cells + oc) * c + ch;
                out[slot] = best;
                winners[slot] = (b * in_cells + sources[oc * window + arg]) * c + ch;
            }
        }
    }
    let n_in = input.len();
    tape.note_kink(margin);
    let out = Tensor::new(&GridMap::grid_shape(batch, dims, wo, c), out)?;
    let data = tape.custom(
        "max_pool",
        &[grid.data],
        out,
        Box::new(move |args| {
            let mut gx = vec![0.0; n_in];
            for (&src, g) in winners.iter().zip(args.grad) {
                gx[src] += g;
            }
            Ok(vec![gx])
        }),
    );
    Ok(GridMap {
        dims,
        w: wo,
        c,
        batch,
        data,
        argmax: None,
    })
}

/// Mean over every spatial position: `[B, c]`.
pub fn avg_pool_global(tape: &mut Tape, grid: &GridMap) -> Result<Var> {
    let (c, batch) = (grid.c, grid.batch);
    let cells = grid.cells();
    let input = tape.value(grid.data).data();
    let mut out = vec![0.0; batch * c];
    for b in 0..batch {
        let o = &mut out[b * c..(b + 1) * c];
        for row in input[b * cells * c..(b + 1) * cells * c].chunks(c) {
            o.iter_mut().zip(row).for_each(|(a, x)| *a += x);
        }
        o.iter_mut().for_each(|a| *a /= cells as f64);
    }
    let out = Tensor::new(&[batch, c], out)?;
    Ok(tape.custom(
        "avg_pool_global",
        &[grid.data],
        out,
        Box::new(move |args| {
            let mut gx = Vec::with_capacity(batch * cells * c);
            for b in 0..batch {
                let g = &args.grad[b * c..(b + 1) * c];
                for _ in 0..cells {
                    gx.extend(g.iter().map(|v| v / cells as f64));
                }
            }
            Ok(vec![gx])
        }),
    ))
}

/// conv → norm → relu → conv → norm, plus identity or 1x1-conv skip, then relu.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv,
    pub norm1: Norm,
    pub conv2: Conv,
    pub norm2: Norm,
    pub skip: Option<Conv>,
}

impl ResBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dims: usize,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        Self {
            conv1: Conv::new(store, rng, &format!("{name}.conv1"), dims, 3, c_in, c_out),
            norm1: Norm::new(
                store,
                rng,
                &format!("{name}.norm1"),
                NormKind::Batch,
                c_out,
                None,
            ),
            conv2: Conv::new(store, rng, &format!("{name}.conv2"), dims, 3, c_out, c_out),
            norm2: Norm::new(
                store,
                rng,
                &format!("{name}.norm2"),
                NormKind::Batch,
                c_out,
                None,
            ),
            skip: (c_in != c_out)
                .then(|| Conv::new(store, rng, &format!("{name}.skip"), dims, 1, c_in, c_out)),
        }
    }

    pub fn forward(&self, fwd: &mut Forward<'_>, grid: &GridMap) -> Result<GridMap> {
        let h = self.conv1.forward(fwd, grid)?;
        let h = self.norm1.forward(fwd, h.data, None)?;
        let h = fwd.tape.relu(h)?;
        let hg = GridMap {
            data: h,
            c: self.conv1.c_out,
            argmax: None,
            ..grid.clone()
        };
        let h = self.conv2.forward(fwd, &hg)?;
        let h = self.norm2.forward(fwd, h.data, None)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(fwd, grid)?.data,
            None => grid.data,
        };
        let sum = fwd.tape.add(h, skip)?;
        let out = fwd.tape.relu(sum)?;
        Ok(GridMap {
            data: out,
            c: self.conv2.c_out,
            argmax: None,
            ..grid.clone()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid_on(tape: &mut Tape, dims: usize, w: usize, c: usize, data: Vec<f64>) -> GridMap {
        let shape = GridMap::grid_shape(1, dims, w, c);
        let data = tape.leaf(Tensor::new(&shape, data).unwrap());
        GridMap {
            dims,
            w,
            c,
            batch: 1,
            data,
            argmax: None,
        }
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut tape = Tape::new();
        let input: Vec<f64> = (0..2 * 16).map(|i| (i as f64 * 0.37).sin()).collect();
        let g = grid_on(&mut tape, 2, 4, 2, input.clone());
        let mut k = vec![0.0; 9 * 2 * 2];
        // centre tap is index 4; identity over channels
        k[4 * 4] = 1.0;
        k[4 * 4 + 3] = 1.0;
        let k = tape.leaf(Tensor::new(&[9, 2, 2], k).unwrap());
        let b = tape.leaf(Tensor::zeros(&[2]));
        let out = conv_same(&mut tape, &g, k, b, 3).unwrap();
        assert_eq!(tape.value(out.data).data(), &input[..]);
    }

    #[test]
    fn ones_kernel_on_one_hot_gives_clipped_block() {
        let mut tape = Tape::new();
        let mut input = vec![0.0; 16];
        input[0] = 1.0; // corner (0, 0)
        let g = grid_on(&mut tape, 2, 4, 1, input);
        let k = tape.leaf(Tensor::full(&[9, 1, 1], 1.0));
        let b = tape.leaf(Tensor::zeros(&[1]));
        let out = conv_same(&mut tape, &g, k, b, 3).unwrap();
        let mut expect = vec![0.0; 16];
        for (r, c) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            expect[r * 4 + c] = 1.0;
        }
        assert_eq!(tape.value(out.data).data(), &expect[..]);
    }

    #[test]
    fn conv_preserves_spatial_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for dims in [2, 3] {
            for w in [2usize, 5, 9] {
                let mut tape = Tape::new();
                let cells = w.pow(dims as u32);
                let g = grid_on(
                    &mut tape,
                    dims,
                    w,
                    2,
                    (0..cells * 2).map(|_| rng.random()).collect(),
                );
                let k = tape.leaf(Tensor::from_fn(&[3usize.pow(dims as u32), 2, 3], |_| {
                    rng.random()
                }));
                let b = tape.leaf(Tensor::zeros(&[3]));
                let out = conv_same(&mut tape, &g, k, b, 3).unwrap();
                assert_eq!(
                    tape.shape(out.data),
                    &GridMap::grid_shape(1, dims, w, 3)[..]
                );
            }
        }
    }

    #[test]
    fn conv_channel_mismatch() {
        let mut tape = Tape::new();
        let g = grid_on(&mut tape, 2, 3, 2, vec![0.0; 18]);
        let k = tape.leaf(Tensor::zeros(&[9, 3, 1]));
        let b = tape.leaf(Tensor::zeros(&[1]));
        assert!(conv_same(&mut tape, &g, k, b, 3).is_err());
    }

    #[test]
    fn pools() {
        let mut tape = Tape::new();
        let g = grid_on(&mut tape, 2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]);
        let m = max_pool(&mut tape, &g).unwrap();
        assert_eq!(tape.value(m.data).data(), &[4.0]);
        let g = grid_on(&mut tape, 3, 3, 2, [0.7, -2.0].repeat(27));
        let a = avg_pool_global(&mut tape, &g).unwrap();
        let v = tape.value(a).data();
        assert!((v[0] - 0.7).abs() < 1e-15 && (v[1] + 2.0).abs() < 1e-15);
    }

    #[test]
    fn constant_input_batch_norm_is_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let norm = Norm::new(&mut store, &mut rng, "n", NormKind::Batch, 3, None);
        let mut fwd = Forward::new(&mut store, true);
        let x = fwd.input(Tensor::full(&[2, 5, 3], 4.2));
        let y = norm.forward(&mut fwd, x, None).unwrap();
        assert!(fwd.value(y).data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn adaptive_with_identity_style_matches_instance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_fn(&[2, 7, 3], |_| rng.random_range(-2.0..2.0));
        let mut store = ParamStore::new();
        let inst = Norm::new(&mut store, &mut rng, "i", NormKind::Instance, 3, None);
        let ada = Norm::new(
            &mut store,
            &mut rng,
            "a",
            NormKind::AdaptiveInstance,
            3,
            Some(4),
        );
        let mut fwd = Forward::new(&mut store, true);
        let xv = fwd.input(x);
        let style =
            fwd.input(Tensor::new(&[2, 6], [1.0, 1.0, 1.0, 0.0, 0.0, 0.0].repeat(2)).unwrap());
        let a = normalize(&mut fwd, xv, &ada, Some(style)).unwrap();
        let b = normalize(&mut fwd, xv, &inst, None).unwrap();
        assert_eq!(fwd.value(a).data(), fwd.value(b).data());
    }

    #[test]
    fn adaptive_requires_style() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ada = Norm::new(
            &mut store,
            &mut rng,
            "a",
            NormKind::AdaptiveInstance,
            3,
            Some(4),
        );
        let mut fwd = Forward::new(&mut store, true);
        let x = fwd.input(Tensor::zeros(&[1, 4, 3]));
        assert!(ada.forward(&mut fwd, x, None).is_err());
    }

    #[test]
    fn batch_norm_moments() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let norm = Norm::new(&mut store, &mut rng, "n", NormKind::Batch, 4, None);
        let mut fwd = Forward::new(&mut store, true);
        let x = fwd.input(Tensor::from_fn(&[4, 32, 4], |i| {
            rng.random_range(-3.0..5.0) * (1 + i % 4) as f64
        }));
        let y = norm.forward(&mut fwd, x, None).unwrap();
        let d = fwd.value(y).data();
        for ch in 0..4 {
            let vals: Vec<f64> = d.iter().skip(ch).step_by(4).copied().collect();
            let mu = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / vals.len() as f64;
            assert!(mu.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    /// `sum(out * r)` for a fixed pseudo-random `r`, so no cotangent is trivial.
    fn probe(tape: &mut Tape, out: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = tape.shape(out).to_vec();
        let r = tape.constant(Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0)));
        let m = tape.mul(out, r).unwrap();
        tape.sum(m).unwrap()
    }

    fn assert_check(report: crate::gradcheck::GradCheckReport) {
        assert!(report.passed(), "{:?}", report.worst());
    }

    #[test]
    fn conv_gradients() {
        use crate::gradcheck::{check_tape_fn, GradCheckOptions};
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (dims, w, k) in [(2, 4, 3), (3, 3, 3), (2, 3, 1)] {
            let inputs = vec![
                Tensor::from_fn(&GridMap::grid_shape(2, dims, w, 2), |_| {
                    rng.random_range(-1.0..1.0)
                }),
                Tensor::from_fn(&[k * k * if dims == 3 { k } else { 1 }, 2, 3], |_| {
                    rng.random_range(-1.0..1.0)
                }),
                Tensor::from_fn(&[3], |_| rng.random_range(-1.0..1.0)),
            ];
            let report = check_tape_fn(&inputs, &GradCheckOptions::default(), |tape, v| {
                let g = GridMap {
                    dims,
                    w,
                    c: 2,
                    batch: 2,
                    data: v[0],
                    argmax: None,
                };
                let out = conv_same(tape, &g, v[1], v[2], k)?;
                Ok(probe(tape, out.data, 7))
            })
            .unwrap();
            assert_check(report);
        }
    }

    #[test]
    fn standardize_and_modulate_gradients() {
        use crate::gradcheck::{check_tape_fn, GradCheckOptions};
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs = vec![
            Tensor::from_fn(&[3, 5, 2], |_| rng.random_range(-2.0..2.0)),
            Tensor::from_fn(&[3, 4], |_| rng.random_range(-2.0..2.0)),
        ];
        for groups in [1, 3] {
            let report = check_tape_fn(&inputs, &GradCheckOptions::default(), |tape, v| {
                let (xhat, _, _) = standardize(tape, v[0], groups)?;
                let y = modulate(tape, xhat, v[1])?;
                Ok(probe(tape, y, 1))
            })
            .unwrap();
            assert_check(report);
        }
    }

    #[test]
    fn pooling_gradients() {
        use crate::gradcheck::{check_tape_fn, GradCheckOptions};
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for dims in [2, 3] {
            let inputs = vec![Tensor::from_fn(&GridMap::grid_shape(2, dims, 4, 2), |_| {
                rng.random_range(-1.0..1.0)
            })];
            let report = check_tape_fn(&inputs, &GradCheckOptions::default(), |tape, v| {
                let g = GridMap {
                    dims,
                    w: 4,
                    c: 2,
                    batch: 2,
                    data: v[0],
                    argmax: None,
                };
                let m = max_pool(tape, &g)?;
                let a = avg_pool_global(tape, &g)?;
                let pm = probe(tape, m.data, 2);
                let pa = probe(tape, a, 3);
                tape.add(pm, pa)
            })
            .unwrap();
            assert!(report.kink_margin > 1e-4);
            assert_check(report);
        }
    }

    #[test]
    fn res_block_gradients() {
        use crate::gradcheck::{check_params, GradCheckOptions};
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let block = ResBlock::new(&mut store, &mut rng, "rb", 2, 2, 3);
        let x = Tensor::from_fn(&GridMap::grid_shape(2, 2, 4, 2), |_| {
            rng.random_range(-1.0..1.0)
        });
        let report = check_params(&mut store, &GradCheckOptions::default(), |fwd| {
            let data = fwd.input(x.clone());
            let g = GridMap {
                dims: 2,
                w: 4,
                c: 2,
                batch: 2,
                data,
                argmax: None,
            };
            let out = block.forward(fwd, &g)?;
            Ok(probe(&mut fwd.tape, out.data, 5))
        })
        .unwrap();
        assert_check(report);
    }
}
