use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::params::{uniform_init, Forward, ParamId, ParamStore};
use crate::raster::Cloud;
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum KeyMode {
    /// `sigmoid(T(p + d(x)))` with a learnable rigid-initialised `T` and a
    /// single-layer residual `d`.
    ResidualRigid,
    /// `sigmoid(Linear(x))`.
    Linear,
    /// `sigmoid(T0 p)` with a frozen random rotation `T0`.
    FixedRandom,
}

impl std::str::FromStr for KeyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "residual" | "residual-se3" => Ok(Self::ResidualRigid),
            "linear" => Ok(Self::Linear),
            "fixed" | "fixed-random" => Ok(Self::FixedRandom),
            other => Err(Error::invalid(
                "key_mode",
                format!("unknown key mode {other:?}"),
            )),
        }
    }
}

impl std::fmt::Display for KeyMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::ResidualRigid => "residual",
            Self::Linear => "linear",
            Self::FixedRandom => "fixed",
        })
    }
}

/// Parameters of one head's key predictor.
#[derive(Clone, Debug)]
pub struct KeyParams {
    pub mode: KeyMode,
    pub feature_width: usize,
    /// `[f, 3]`; the residual perceptron (or the whole map in linear mode).
    pub residual_weight: Option<ParamId>,
    pub residual_bias: Option<ParamId>,
    /// `[3, 3]`, acting on row vectors (`q @ M`).
    pub transform_linear: Option<ParamId>,
    pub transform_translation: Option<ParamId>,
    /// Per-axis log scale applied after the transform.
    pub log_scale: Option<ParamId>,
}

/// Uniformly distributed rotation matrix, row-major.
pub fn random_rotation(rng: &mut impl Rng) -> [[f64; 3]; 3] {
    let mut q: [f64; 4] = [0.0; 4];
    loop {
        for v in q.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-8 {
            q.iter_mut().for_each(|v| *v /= n);
            break;
        }
    }
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

impl KeyParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        mode: KeyMode,
        feature_width: usize,
        anisotropic_scale: bool,
    ) -> Self {
        let mut kp = KeyParams {
            mode,
            feature_width,
            residual_weight: None,
            residual_bias: None,
            transform_linear: None,
            transform_translation: None,
            log_scale: None,
        };
        if mode != KeyMode::FixedRandom {
            kp.residual_weight = Some(store.add(
                format!("{prefix}.residual_weight"),
                uniform_init(rng, &[feature_width, 3], feature_width),
                true,
            ));
            kp.residual_bias = Some(store.add(
                format!("{prefix}.residual_bias"),
                uniform_init(rng, &[3], feature_width),
                true,
            ));
        }
        if mode != KeyMode::Linear {
            let r = random_rotation(rng);
            // stored transposed so that keys are computed as row @ M
            let m = Tensor::from_fn(&[3, 3], |i| r[i % 3][i / 3]);
            let trainable = mode == KeyMode::ResidualRigid;
            kp.transform_linear =
                Some(store.add(format!("{prefix}.transform_linear"), m, trainable));
            kp.transform_translation = Some(store.add(
                format!("{prefix}.transform_translation"),
                Tensor::zeros(&[3]),
                trainable,
            ));
        }
        if anisotropic_scale {
            kp.log_scale =
                Some(store.add(format!("{prefix}.log_scale"), Tensor::zeros(&[3]), true));
        }
        kp
    }
}

/// Keys `[B, N, dims]` in (0, 1) for every point of `cloud`.
pub fn compute_keys(
    fwd: &mut Forward<'_>,
    cloud: Cloud,
    kp: &KeyParams,
    dims: usize,
) -> Result<Var> {
    if !(2..=3).contains(&dims) {
        return Err(Error::invalid(
            "compute_keys",
            format!("head dims {dims} not in {{2, 3}}"),
        ));
    }
    if fwd.value(cloud.features).last_dim() != kp.feature_width {
        return Err(Error::shape(
            "compute_keys",
            &[fwd.value(cloud.features).shape(), &[kp.feature_width, 3]],
        ));
    }
    let pre = match kp.mode {
        KeyMode::ResidualRigid => {
            let (wd, bd) = (
                fwd.param(kp.residual_weight.unwrap()),
                fwd.param(kp.residual_bias.unwrap()),
            );
            let resid = fwd.tape.affine(cloud.features, wd, Some(bd))?;
            let moved = fwd.tape.add(cloud.positions, resid)?;
            let (m, t) = (
                fwd.param(kp.transform_linear.unwrap()),
                fwd.param(kp.transform_translation.unwrap()),
            );
            fwd.tape.affine(moved, m, Some(t))?
        }
        KeyMode::Linear => {
            let (wd, bd) = (
                fwd.param(kp.residual_weight.unwrap()),
                fwd.param(kp.residual_bias.unwrap()),
            );
            fwd.tape.affine(cloud.features, wd, Some(bd))?
        }
        KeyMode::FixedRandom => {
            let (m, t) = (
                fwd.param(kp.transform_linear.unwrap()),
                fwd.param(kp.transform_translation.unwrap()),
            );
            fwd.tape.affine(cloud.positions, m, Some(t))?
        }
    };
    let scaled = match kp.log_scale {
        Some(ls) => {
            let ls = fwd.param(ls);
            let s = fwd.tape.exp(ls)?;
            fwd.tape.mul_cols(pre, s)?
        }
        None => pre,
    };
    let projected = if dims == 2 {
        fwd.tape.slice_last(scaled, 0, 2)?
    } else {
        scaled
    };
    let keys = fwd.tape.sigmoid(projected)?;
    let kv = fwd.value(keys);
    let per_batch = kv.len() / kv.shape()[0];
    if let Some(bad) = kv.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "compute_keys",
            batch: bad / per_batch,
        });
    }
    Ok(keys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rotation_is_proper() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let r = random_rotation(&mut rng);
            let m = nalgebra::Matrix3::from_fn(|i, j| r[i][j]);
            assert!((m.determinant() - 1.0).abs() < 1e-12);
            assert!((m * m.transpose() - nalgebra::Matrix3::identity()).norm() < 1e-12);
        }
    }

    fn identity_keys(p: [f64; 3], dims: usize) -> Vec<f64> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let kp = KeyParams::new(&mut store, &mut rng, "k", KeyMode::ResidualRigid, 2, false);
        // d ≡ 0, T = identity
        *store.value_mut(kp.residual_weight.unwrap()) = Tensor::zeros(&[2, 3]);
        *store.value_mut(kp.residual_bias.unwrap()) = Tensor::zeros(&[3]);
        *store.value_mut(kp.transform_linear.unwrap()) =
            Tensor::new(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let mut fwd = Forward::new(&mut store, true);
        let positions = fwd.input(Tensor::new(&[1, 1, 3], p.to_vec()).unwrap());
        let features = fwd.input(Tensor::new(&[1, 1, 2], vec![0.4, -0.9]).unwrap());
        let k = compute_keys(
            &mut fwd,
            Cloud {
                positions,
                features,
            },
            &kp,
            dims,
        )
        .unwrap();
        fwd.value(k).data().to_vec()
    }

    #[test]
    fn origin_maps_to_grid_centre() {
        assert_eq!(identity_keys([0.0, 0.0, 0.0], 2), vec![0.5, 0.5]);
    }

    #[test]
    fn identity_transform_is_sigmoid_of_xy() {
        let k = identity_keys([0.3, -1.2, 4.0], 2);
        assert_eq!(
            k,
            vec![crate::tape::sigmoid(0.3), crate::tape::sigmoid(-1.2)]
        );
        let k3 = identity_keys([0.3, -1.2, 4.0], 3);
        assert_eq!(k3.len(), 3);
    }

    #[test]
    fn width_mismatch_rejected() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let kp = KeyParams::new(&mut store, &mut rng, "k", KeyMode::Linear, 4, false);
        let mut fwd = Forward::new(&mut store, true);
        let positions = fwd.input(Tensor::zeros(&[1, 2, 3]));
        let features = fwd.input(Tensor::zeros(&[1, 2, 5]));
        assert!(compute_keys(
            &mut fwd,
            Cloud {
                positions,
                features
            },
            &kp,
            2
        )
        .is_err());
    }
}
