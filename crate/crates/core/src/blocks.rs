//! Single-head cloud transform, the multi-headed block, the three-block
//! cascade, and multi-headed cloud pooling.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::gridnn::{avg_pool_global, max_pool, Conv, Dense, Norm, NormKind, ResBlock};
use crate::params::{Forward, ParamStore};
use crate::raster::{
    compute_keys, derasterize, make_footprint, rasterize, Aggregation, Cloud, GridMap, KeyMode,
    KeyParams,
};
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub dims: usize,
    pub w: usize,
    pub c: usize,
    pub key_mode: KeyMode,
    pub aggregation: Aggregation,
    pub anisotropic_scale: bool,
}

impl HeadConfig {
    pub fn new(dims: usize, w: usize, c: usize) -> Self {
        Self {
            dims,
            w,
            c,
            key_mode: KeyMode::ResidualRigid,
            aggregation: Aggregation::Max,
            anisotropic_scale: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.dims) || self.w < 2 || self.c < 1 {
            return Err(Error::invalid(
                "head_config",
                format!(
                    "dims {} w {} c {}: need dims in {{2, 3}}, w >= 2, c >= 1",
                    self.dims, self.w, self.c
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockConfig {
    pub heads: Vec<HeadConfig>,
    pub g: usize,
    pub norm_kind: NormKind,
    pub gradient_balancing: bool,
    /// Width of the conditioning vector; required for adaptive normalization.
    pub style_dim: Option<usize>,
}

impl BlockConfig {
    /// `n2` two-dimensional heads of size `w2`/`c2` and `n3` three-dimensional
    /// heads of size `w3`/`c3`.
    pub fn mixed(
        g: usize,
        n2: usize,
        w2: usize,
        c2: usize,
        n3: usize,
        w3: usize,
        c3: usize,
    ) -> Self {
        let mut heads = vec![HeadConfig::new(2, w2, c2); n2];
        heads.extend(vec![HeadConfig::new(3, w3, c3); n3]);
        Self {
            heads,
            g,
            norm_kind: NormKind::Batch,
            gradient_balancing: true,
            style_dim: None,
        }
    }

    /// 4 two-dimensional heads (w 16, c 16) and 4 three-dimensional heads
    /// (w 8, c 8) on g = 64 features.
    pub fn desk() -> Self {
        Self::mixed(64, 4, 16, 16, 4, 8, 8)
    }

    pub fn with_aggregation(mut self, agg: Aggregation) -> Self {
        self.heads.iter_mut().for_each(|h| h.aggregation = agg);
        self
    }

    pub fn with_key_mode(mut self, mode: KeyMode) -> Self {
        self.heads.iter_mut().for_each(|h| h.key_mode = mode);
        self
    }

    pub fn adaptive(mut self, style_dim: usize) -> Self {
        self.norm_kind = NormKind::AdaptiveInstance;
        self.style_dim = Some(style_dim);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads.is_empty() || self.g == 0 {
            return Err(Error::invalid(
                "block_config",
                "need at least one head and g >= 1",
            ));
        }
        if self.norm_kind == NormKind::AdaptiveInstance && self.style_dim.is_none() {
            return Err(Error::invalid(
                "block_config",
                "adaptive normalization needs style_dim",
            ));
        }
        self.heads.iter().try_for_each(HeadConfig::validate)
    }

    /// The three blocks of a cascade: grids halve and head channels double
    /// from one block to the next (grids never drop below 2).
    pub fn cascade(&self) -> [BlockConfig; 3] {
        std::array::from_fn(|i| {
            let mut b = self.clone();
            for h in &mut b.heads {
                h.w = (h.w >> i).max(2);
                h.c <<= i;
            }
            b
        })
    }
}

/// Parameters of one cloud-transform head.
#[derive(Clone, Debug)]
pub struct Head {
    pub cfg: HeadConfig,
    pub balance: bool,
    pub keys: KeyParams,
    pub value: Dense,
    pub value_norm: Norm,
    pub conv: Conv,
    pub out_norm: Norm,
    pub lift: Dense,
}

/// Head output together with the intermediate tape nodes that diagnostics
/// need.
#[derive(Clone, Debug)]
pub struct HeadOutput {
    pub values: Var,
    pub keys: Var,
    pub grid: GridMap,
}

impl Head {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cfg: &HeadConfig,
        block: &BlockConfig,
    ) -> Self {
        let (c, g) = (cfg.c, block.g);
        let kind = block.norm_kind;
        Self {
            cfg: cfg.clone(),
            balance: block.gradient_balancing,
            keys: KeyParams::new(
                store,
                rng,
                &format!("{name}.keys"),
                cfg.key_mode,
                g,
                cfg.anisotropic_scale,
            ),
            value: Dense::new(store, rng, &format!("{name}.value"), g, c),
            value_norm: Norm::new(
                store,
                rng,
                &format!("{name}.value_norm"),
                kind,
                c,
                block.style_dim,
            ),
            conv: Conv::new(store, rng, &format!("{name}.conv"), cfg.dims, 3, c, c),
            out_norm: Norm::new(
                store,
                rng,
                &format!("{name}.out_norm"),
                kind,
                c,
                block.style_dim,
            ),
            lift: Dense::new(store, rng, &format!("{name}.lift"), c, g),
        }
    }

    /// keys → value affine + norm → footprint → rasterize → conv →
    /// derasterize → norm + relu → affine back to the block width.
    pub fn forward(
        &self,
        fwd: &mut Forward<'_>,
        cloud: Cloud,
        style: Option<Var>,
    ) -> Result<HeadOutput> {
        let keys = compute_keys(fwd, cloud, &self.keys, self.cfg.dims)?;
        let v = self.value.forward(fwd, cloud.features)?;
        let v = self.value_norm.forward(fwd, v, style)?;
        let fp = Rc::new(make_footprint(fwd.value(keys), self.cfg.w)?);
        let grid = rasterize(
            &mut fwd.tape,
            v,
            keys,
            &fp,
            self.cfg.aggregation,
            self.balance,
        )?;
        let conv = self.conv.forward(fwd, &grid)?;
        let back = derasterize(&mut fwd.tape, &conv, keys, &fp, self.balance)?;
        let h = self.out_norm.forward(fwd, back, style)?;
        let h = fwd.tape.relu(h)?;
        let values = self.lift.forward(fwd, h)?;
        Ok(HeadOutput { values, keys, grid })
    }
}

/// Multi-headed cloud transform block.
#[derive(Clone, Debug)]
pub struct Mhct {
    pub cfg: BlockConfig,
    pub heads: Vec<Head>,
    pub norm: Norm,
}

impl Mhct {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cfg: &BlockConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let heads = cfg
            .heads
            .iter()
            .enumerate()
            .map(|(i, h)| Head::new(store, rng, &format!("{name}.head{i}"), h, cfg))
            .collect();
        let norm = Norm::new(
            store,
            rng,
            &format!("{name}.norm"),
            cfg.norm_kind,
            cfg.g,
            cfg.style_dim,
        );
        Ok(Self {
            cfg: cfg.clone(),
            heads,
            norm,
        })
    }

    /// Sum of the head outputs in head order, before the block norm.
    pub fn head_sum(
        &self,
        fwd: &mut Forward<'_>,
        cloud: Cloud,
        style: Option<Var>,
    ) -> Result<(Var, Vec<HeadOutput>)> {
        let width = fwd.value(cloud.features).last_dim();
        if width != self.cfg.g {
            return Err(Error::shape(
                "mhct",
                &[fwd.value(cloud.features).shape(), &[self.cfg.g]],
            ));
        }
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut total: Option<Var> = None;
        for head in &self.heads {
            let out = head.forward(fwd, cloud, style)?;
            total = Some(match total {
                Some(t) => fwd.tape.add(t, out.values)?,
                None => out.values,
            });
            outs.push(out);
        }
        Ok((total.expect("validated non-empty"), outs))
    }

    pub fn forward(
        &self,
        fwd: &mut Forward<'_>,
        cloud: Cloud,
        style: Option<Var>,
    ) -> Result<Cloud> {
        Ok(self.forward_traced(fwd, cloud, style)?.0)
    }

    pub fn forward_traced(
        &self,
        fwd: &mut Forward<'_>,
        cloud: Cloud,
        style: Option<Var>,
    ) -> Result<(Cloud, Vec<HeadOutput>)> {
        let (sum, outs) = self.head_sum(fwd, cloud, style)?;
        let h = self.norm.forward(fwd, sum, style)?;
        let h = fwd.tape.relu(h)?;
        let features = fwd.tape.add(cloud.features, h)?;
        Ok((
            Cloud {
                positions: cloud.positions,
                features,
            },
            outs,
        ))
    }

    /// Zeroes every head's output affine, which turns the block into the
    /// identity on features.
    pub fn zero_branches(&self, store: &mut ParamStore) {
        for h in &self.heads {
            store.value_mut(h.lift.weight).data_mut().fill(0.0);
            store.value_mut(h.lift.bias).data_mut().fill(0.0);
        }
    }
}

/// Three multi-headed blocks applied in sequence.
#[derive(Clone, Debug)]
pub struct Cmhct {
    pub blocks: Vec<Mhct>,
}

impl Cmhct {
    /// Builds the cascade of `base` (see [`BlockConfig::cascade`]).
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        base: &BlockConfig,
    ) -> Result<Self> {
        Self::from_configs(store, rng, name, &base.cascade())
    }

    pub fn from_configs(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cfgs: &[BlockConfig],
    ) -> Result<Self> {
        if cfgs.is_empty() || cfgs.iter().any(|c| c.g != cfgs[0].g) {
            return Err(Error::invalid(
                "cmhct",
                "blocks must share the feature width g",
            ));
        }
        let blocks = cfgs
            .iter()
            .enumerate()
            .map(|(i, c)| Mhct::new(store, rng, &format!("{name}.block{i}"), c))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn forward(
        &self,
        fwd: &mut Forward<'_>,
        cloud: Cloud,
        style: Option<Var>,
    ) -> Result<Cloud> {
        self.blocks
            .iter()
            .try_fold(cloud, |c, b| b.forward(fwd, c, style))
    }

    pub fn zero_branches(&self, store: &mut ParamStore) {
        self.blocks.iter().for_each(|b| b.zero_branches(store));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolHeadConfig {
    pub dims: usize,
    pub w: usize,
    /// Channels rasterized onto the grid.
    pub c: usize,
    /// Output widths of the three residual blocks.
    pub widths: [usize; 3],
    pub key_mode: KeyMode,
}

impl PoolHeadConfig {
    pub fn new(dims: usize, w: usize, c: usize) -> Self {
        Self {
            dims,
            w,
            c,
            widths: [c, 2 * c, 4 * c],
            key_mode: KeyMode::ResidualRigid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.dims) || self.c == 0 || self.widths.contains(&0) {
            return Err(Error::invalid(
                "pool_config",
                format!("bad pool head {self:?}"),
            ));
        }
        if self.w < 8 {
            return Err(Error::invalid(
                "pool_config",
                format!(
                    "grid size {} too small for three stride-2 pools (need >= 8)",
                    self.w
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolConfig {
    pub heads: Vec<PoolHeadConfig>,
    pub g: usize,
    pub class_dim: usize,
    pub gradient_balancing: bool,
}

impl PoolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads.is_empty() || self.g == 0 || self.class_dim == 0 {
            return Err(Error::invalid(
                "pool_config",
                "need heads, g >= 1 and class_dim >= 1",
            ));
        }
        self.heads.iter().try_for_each(PoolHeadConfig::validate)
    }
}

#[derive(Clone, Debug)]
pub struct PoolHead {
    pub cfg: PoolHeadConfig,
    pub keys: KeyParams,
    pub value: Dense,
    pub res: [ResBlock; 3],
}

/// Multi-headed cloud pooling: per head, rasterize with max aggregation and
/// reduce the grid to a vector with a small residual CNN.
#[derive(Clone, Debug)]
pub struct CloudPool {
    pub cfg: PoolConfig,
    pub heads: Vec<PoolHead>,
    pub out: Dense,
}

impl CloudPool {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cfg: &PoolConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut heads = Vec::new();
        let mut concat = 0;
        for (i, h) in cfg.heads.iter().enumerate() {
            let n = format!("{name}.head{i}");
            let [a, b, c] = h.widths;
            heads.push(PoolHead {
                cfg: h.clone(),
                keys: KeyParams::new(store, rng, &format!("{n}.keys"), h.key_mode, cfg.g, false),
                value: Dense::new(store, rng, &format!("{n}.value"), cfg.g, h.c),
                res: [
                    ResBlock::new(store, rng, &format!("{n}.res0"), h.dims, h.c, a),
                    ResBlock::new(store, rng, &format!("{n}.res1"), h.dims, a, b),
                    ResBlock::new(store, rng, &format!("{n}.res2"), h.dims, b, c),
                ],
            });
            concat += c;
        }
        let out = Dense::new(store, rng, &format!("{name}.out"), concat, cfg.class_dim);
        Ok(Self {
            cfg: cfg.clone(),
            heads,
            out,
        })
    }

    /// `[B, class_dim]`
    pub fn forward(&self, fwd: &mut Forward<'_>, cloud: Cloud) -> Result<Var> {
        let mut parts = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            parts.push(self.head_vector(fwd, cloud, head)?);
        }
        let cat = fwd.tape.concat(&parts)?;
        self.out.forward(fwd, cat)
    }

    /// Global-average vector of one head's mini-CNN, `[B, widths[2]]`.
    pub fn head_vector(&self, fwd: &mut Forward<'_>, cloud: Cloud, head: &PoolHead) -> Result<Var> {
        let keys = compute_keys(fwd, cloud, &head.keys, head.cfg.dims)?;
        let v = head.value.forward(fwd, cloud.features)?;
        let fp = Rc::new(make_footprint(fwd.value(keys), head.cfg.w)?);
        let grid = rasterize(
            &mut fwd.tape,
            v,
            keys,
            &fp,
            Aggregation::Max,
            self.cfg.gradient_balancing,
        )?;
        mini_cnn(fwd, &head.res, grid)
    }
}

/// Residual block, 2x max pool, repeated three times, then global average.
pub fn mini_cnn(fwd: &mut Forward<'_>, res: &[ResBlock; 3], grid: GridMap) -> Result<Var> {
    let mut g = grid;
    for block in res {
        g = block.forward(fwd, &g)?;
        g = max_pool(&mut fwd.tape, &g)?;
    }
    avg_pool_global(&mut fwd.tape, &g)
}

/// Constant `[B, N, g]` features for tests and diagnostics.
pub fn constant_features(batch: usize, n: usize, g: usize, v: f64) -> Tensor {
    Tensor::full(&[batch, n, g], v)
}
