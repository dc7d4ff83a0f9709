//! Local-feature branch: 3-D convolutions over the spectral cube and 2-D
//! convolutions over SAR, each stage blended with projected diffusion features
//! through a trainable scalar.

use rand::Rng;

use crate::autograd::{Conv3dSpec, Var};
use crate::error::{Error, Result};
use crate::nn::{scalar_param, Conv2d, Conv3d, Ctx, ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct CnnDims {
    pub bands: usize,
    pub sar_channels: usize,
    /// `None` disables diffusion guidance.
    pub dif_channels: Option<usize>,
    pub embed: usize,
}

/// Output of the first two 3-D stages along the spectral axis.
pub fn spectral_depths(bands: usize) -> (usize, usize) {
    let d1 = (bands + 2 * 3 - 7) / 2 + 1;
    let d2 = (d1 + 2 * 2 - 5) / 2 + 1;
    (d1, d2)
}

const C1: usize = 8;
const C2: usize = 16;
const SAR_WIDTH: usize = 32;

#[derive(Clone, Debug)]
pub struct CnnBranch {
    pub dims: CnnDims,
    s1: Conv3d,
    s2: Conv3d,
    s3: Conv3d,
    dif1: Option<Conv2d>,
    dif2: Option<Conv2d>,
    dif3: Option<Conv2d>,
    sar: Conv2d,
    sar_proj: Conv2d,
    head: Conv2d,
    pub alpha: Option<ParamId>,
    pub beta: Option<ParamId>,
    pub gamma: Option<ParamId>,
    d1: usize,
    d2: usize,
}

pub struct CnnOutput<'g, S: Scalar> {
    /// Pooled embedding `[N, embed]`.
    pub feature: Var<'g, S>,
    /// Pre-pooling map `[N, embed, P, P]`.
    pub map: Var<'g, S>,
    pub f1: Var<'g, S>,
    pub f2: Var<'g, S>,
    pub f3: Var<'g, S>,
}

impl CnnBranch {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        dims: CnnDims,
        rng: &mut R,
    ) -> Self {
        let (d1, d2) = spectral_depths(dims.bands);
        let e = dims.embed;
        let s1 = Conv3d::new(
            store,
            "cnn.s1",
            1,
            C1,
            [7, 3, 3],
            Conv3dSpec {
                stride: [2, 1, 1],
                pad: [3, 1, 1],
            },
            rng,
        );
        let s2 = Conv3d::new(
            store,
            "cnn.s2",
            C1,
            C2,
            [5, 3, 3],
            Conv3dSpec {
                stride: [2, 1, 1],
                pad: [2, 1, 1],
            },
            rng,
        );
        let s3 = Conv3d::new(
            store,
            "cnn.s3",
            C2,
            e,
            [d2, 3, 3],
            Conv3dSpec {
                stride: [1, 1, 1],
                pad: [0, 1, 1],
            },
            rng,
        );
        let (dif1, dif2, dif3) = match dims.dif_channels {
            Some(cd) => (
                Some(Conv2d::pointwise(store, "cnn.dif1", cd, C1 * d1, rng)),
                Some(Conv2d::pointwise(store, "cnn.dif2", cd, C2 * d2, rng)),
                Some(Conv2d::same3(store, "cnn.dif3", cd, SAR_WIDTH, rng)),
            ),
            None => (None, None, None),
        };
        let sar = Conv2d::same3(store, "cnn.sar", dims.sar_channels, SAR_WIDTH, rng);
        let sar_proj = Conv2d::pointwise(store, "cnn.sar_proj", SAR_WIDTH, e, rng);
        let head = Conv2d::same3(store, "cnn.head", e, e, rng);
        let guided = dims.dif_channels.is_some();
        let mix =
            |store: &mut ParamStore<S>, name: &str| guided.then(|| scalar_param(store, name, 0.5));
        let alpha = mix(store, "cnn.alpha");
        let beta = mix(store, "cnn.beta");
        let gamma = mix(store, "cnn.gamma");
        Self {
            dims,
            s1,
            s2,
            s3,
            dif1,
            dif2,
            dif3,
            sar,
            sar_proj,
            head,
            alpha,
            beta,
            gamma,
            d1,
            d2,
        }
    }

    /// `w * a + (1 - w) * b`
    fn blend<'g, S: Scalar>(w: Var<'g, S>, a: Var<'g, S>, b: Var<'g, S>) -> Result<Var<'g, S>> {
        a.mul(w)?.add(b.mul(w.neg().add_scalar(S::one()))?)
    }

    pub fn forward<'g, S: Scalar>(
        &self,
        cx: &Ctx<'g, S>,
        spec: Var<'g, S>,
        sar: Var<'g, S>,
        dif: Option<Var<'g, S>>,
    ) -> Result<CnnOutput<'g, S>> {
        let ss = spec.shape();
        if ss.len() != 4 || ss[1] != self.dims.bands {
            return Err(Error::Shape(format!(
                "cnn spectral input {ss:?}, expected {} bands",
                self.dims.bands
            )));
        }
        let (n, p, q) = (ss[0], ss[2], ss[3]);
        if sar.shape() != [n, self.dims.sar_channels, p, q] {
            return Err(Error::Shape(format!(
                "cnn SAR input {:?} vs spectral {ss:?}",
                sar.shape()
            )));
        }
        let dif = match (dif, self.dims.dif_channels) {
            (Some(d), Some(cd)) if d.shape() == [n, cd, p, q] => Some(d),
            (None, None) => None,
            (d, _) => {
                return Err(Error::Shape(format!(
                    "cnn diffusion input {:?} vs configured {:?}",
                    d.map(|v| v.shape()),
                    self.dims.dif_channels
                )))
            }
        };
        let x = spec.reshape(&[n, 1, self.dims.bands, p, q])?;
        let img1 = self.s1.forward(cx, x)?;
        let f1 = match (dif, &self.dif1, self.beta) {
            (Some(d), Some(w), Some(b)) => {
                let g = w.forward(cx, d)?.reshape(&[n, C1, self.d1, p, q])?;
                Self::blend(cx.p(b), img1, g)?
            }
            _ => img1,
        }
        .silu();
        let img2 = self.s2.forward(cx, f1)?;
        let f2 = match (dif, &self.dif2, self.gamma) {
            (Some(d), Some(w), Some(c)) => {
                let g = w.forward(cx, d)?.reshape(&[n, C2, self.d2, p, q])?;
                Self::blend(cx.p(c), img2, g)?
            }
            _ => img2,
        }
        .silu();
        let sar_feat = self.sar.forward(cx, sar)?;
        let f3 = match (dif, &self.dif3, self.alpha) {
            (Some(d), Some(w), Some(a)) => Self::blend(cx.p(a), sar_feat, w.forward(cx, d)?)?,
            _ => sar_feat,
        }
        .silu();
        let spectral = self
            .s3
            .forward(cx, f2)?
            .reshape(&[n, self.dims.embed, p, q])?;
        let joint = spectral.add(self.sar_proj.forward(cx, f3)?)?.silu();
        let map = self.head.forward(cx, joint)?.silu();
        let feature = map
            .reshape(&[n, self.dims.embed, p * q])?
            .mean_axis(2, false)?;
        Ok(CnnOutput {
            feature,
            map,
            f1,
            f2,
            f3,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(bands: usize, guided: bool) -> (ParamStore<f64>, CnnBranch) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let dims = CnnDims {
            bands,
            sar_channels: 2,
            dif_channels: guided.then_some(6),
            embed: 64,
        };
        let b = CnnBranch::new(&mut store, dims, &mut rng);
        (store, b)
    }

    fn inputs(bands: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            Tensor::randn(&[2, bands, 5, 5], 1.0, &mut rng),
            Tensor::randn(&[2, 2, 5, 5], 1.0, &mut rng),
            Tensor::randn(&[2, 6, 5, 5], 1.0, &mut rng),
        )
    }

    #[test]
    fn width_is_fixed_across_band_counts() {
        for bands in [8, 32, 180] {
            let (store, b) = build(bands, true);
            let (s, r, d) = inputs(bands, 1);
            let g = Graph::inference();
            let cx = Ctx::new(&g, &store);
            let out = b
                .forward(&cx, g.constant(s), g.constant(r), Some(g.constant(d)))
                .unwrap();
            assert_eq!(out.feature.shape(), vec![2, 64]);
            assert_eq!(out.map.shape(), vec![2, 64, 5, 5]);
            assert!(out.feature.value().all_finite());
        }
    }

    #[test]
    fn beta_zero_ignores_spectral_input() {
        let (mut store, b) = build(8, true);
        store.set(b.beta.unwrap(), Tensor::scalar(0.0)).unwrap();
        let (s, r, d) = inputs(8, 2);
        let f1 = |s: Tensor<f64>| {
            let g = Graph::inference();
            let cx = Ctx::new(&g, &store);
            let out = b
                .forward(
                    &cx,
                    g.constant(s),
                    g.constant(r.clone()),
                    Some(g.constant(d.clone())),
                )
                .unwrap();
            let v = out.f1.value().clone();
            v
        };
        assert_eq!(f1(s.clone()), f1(s.map(|v| v * 3.0 + 1.0)));
    }

    #[test]
    fn unit_mix_drops_diffusion() {
        let (mut store, b) = build(8, true);
        for id in [b.alpha, b.beta, b.gamma] {
            store.set(id.unwrap(), Tensor::scalar(1.0)).unwrap();
        }
        let (s, r, d) = inputs(8, 3);
        let feat = |d: Tensor<f64>| {
            let g = Graph::inference();
            let cx = Ctx::new(&g, &store);
            let out = b
                .forward(
                    &cx,
                    g.constant(s.clone()),
                    g.constant(r.clone()),
                    Some(g.constant(d)),
                )
                .unwrap();
            let v = out.feature.value().clone();
            v
        };
        assert_eq!(feat(d.clone()), feat(d.map(|v| -2.0 * v)));
    }

    #[test]
    fn unguided_branch_runs() {
        let (store, b) = build(8, false);
        let (s, r, _) = inputs(8, 4);
        let g = Graph::inference();
        let cx = Ctx::new(&g, &store);
        assert!(b
            .forward(&cx, g.constant(s.clone()), g.constant(r.clone()), None)
            .is_ok());
        let d = g.constant(Tensor::zeros(&[2, 6, 5, 5]));
        assert!(b
            .forward(&cx, g.constant(s), g.constant(r), Some(d))
            .is_err());
    }
}
