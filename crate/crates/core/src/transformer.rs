//! Global-attention branch: spatially weighted token mapping, per-stream
//! self-attention and class-token cross-attention across streams.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{init_uniform, Conv2d, Ctx, Linear, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformerReadout {
    /// Sum of the three final class tokens.
    #[default]
    ClsSum,
    /// Sum of the token means of the three final sequences.
    PooledSum,
}

/// Per-pixel token projection with learned spatial importance and a class token.
#[derive(Clone, Debug)]
pub struct SpatialMap {
    /// Absent for streams mapped without spatial weighting.
    conv: Option<Conv2d>,
    att: Option<Conv2d>,
    pub map: Linear,
    pub cls: ParamId,
    embed: usize,
}

impl SpatialMap {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        in_ch: usize,
        embed: usize,
        weighted: bool,
        rng: &mut R,
    ) -> Self {
        let (conv, att) = if weighted {
            (
                Some(Conv2d::same3(
                    store,
                    &format!("{name}.conv"),
                    in_ch,
                    embed,
                    rng,
                )),
                Some(Conv2d::pointwise(
                    store,
                    &format!("{name}.att"),
                    embed,
                    1,
                    rng,
                )),
            )
        } else {
            (None, None)
        };
        let map = Linear::new(store, &format!("{name}.map"), in_ch, embed, false, rng);
        let cls = store.add(
            format!("{name}.cls"),
            init_uniform(&[1, 1, embed], embed, rng),
        );
        Self {
            conv,
            att,
            map,
            cls,
            embed,
        }
    }

    /// Spatial weights `[N, P*P]` (mean 1 per sample), if this stream has them.
    pub fn weights<'g, S: Scalar>(
        &self,
        cx: &Ctx<'g, S>,
        x: Var<'g, S>,
    ) -> Result<Option<Var<'g, S>>> {
        let (Some(conv), Some(att)) = (&self.conv, &self.att) else {
            return Ok(None);
        };
        let s = x.shape();
        let positions = s[2] * s[3];
        let logits = att
            .forward(cx, conv.forward(cx, x)?)?
            .reshape(&[s[0], positions])?;
        Ok(Some(logits.softmax()?.scale(S::lit(positions as f64))))
    }

    /// `[N, C, P, P]` to `[N, 1 + P*P, embed]`, class token first.
    pub fn forward<'g, S: Scalar>(&self, cx: &Ctx<'g, S>, x: Var<'g, S>) -> Result<Var<'g, S>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.map.in_dim {
            return Err(Error::Shape(format!(
                "token map expects [N, {}, H, W], got {s:?}",
                self.map.in_dim
            )));
        }
        let (n, positions) = (s[0], s[2] * s[3]);
        let pixels = x.reshape(&[n, s[1], positions])?.permute(&[0, 2, 1])?;
        let mut tokens = self.map.forward(cx, pixels)?;
        if let Some(w) = self.weights(cx, x)? {
            tokens = tokens.mul(w.reshape(&[n, positions, 1])?)?;
        }
        let cls = cx
            .constant(Tensor::zeros(&[n, 1, self.embed]))
            .add(cx.p(self.cls))?;
        cx.g.concat(&[cls, tokens], 1)
    }
}

/// Single-head scaled dot-product attention with residual connection.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    embed: usize,
}

impl Attention {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        embed: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), embed, embed, true, rng),
            k: Linear::new(store, &format!("{name}.k"), embed, embed, true, rng),
            v: Linear::new(store, &format!("{name}.v"), embed, embed, true, rng),
            embed,
        }
    }

    fn attend<'g, S: Scalar>(
        &self,
        cx: &Ctx<'g, S>,
        query: Var<'g, S>,
        keys: Var<'g, S>,
    ) -> Result<(Var<'g, S>, Var<'g, S>)> {
        let q = self.q.forward(cx, query)?;
        let k = self.k.forward(cx, keys)?;
        let v = self.v.forward(cx, keys)?;
        let scores = q
            .matmul(k.t()?)?
            .scale(S::one() / S::lit((self.embed as f64).sqrt()));
        let weights = scores.softmax()?;
        Ok((weights.matmul(v)?, weights))
    }

    /// Returns the updated sequence and the row-stochastic weights `[N, T, T]`.
    pub fn self_attend<'g, S: Scalar>(
        &self,
        cx: &Ctx<'g, S>,
        seq: Var<'g, S>,
    ) -> Result<(Var<'g, S>, Var<'g, S>)> {
        let (upd, w) = self.attend(cx, seq, seq)?;
        Ok((upd.add(seq)?, w))
    }

    /// Updates only the class token of `query` from the patch tokens of `key`;
    /// the query's patch tokens are passed through unchanged.
    pub fn cross_attend<'g, S: Scalar>(
        &self,
        cx: &Ctx<'g, S>,
        query: Var<'g, S>,
        key: Var<'g, S>,
    ) -> Result<(Var<'g, S>, Var<'g, S>)> {
        let (tq, tk) = (query.shape()[1], key.shape()[1]);
        if tk < 2 {
            return Err(Error::Shape(
                "cross-attention key has no patch tokens".into(),
            ));
        }
        let cls = query.narrow(1, 0, 1)?;
        let own = query.narrow(1, 1, tq - 1)?;
        let (upd, w) = self.attend(cx, cls, key.narrow(1, 1, tk - 1)?)?;
        Ok((cx.g.concat(&[upd.add(cls)?, own], 1)?, w))
    }
}

#[derive(Clone, Debug)]
pub struct TransformerDims {
    pub bands: usize,
    pub sar_channels: usize,
    pub dif_channels: Option<usize>,
    pub embed: usize,
    pub readout: TransformerReadout,
}

#[derive(Clone, Debug)]
pub struct TransformerBranch {
    pub dims: TransformerDims,
    pub map_spec: SpatialMap,
    pub map_sar: SpatialMap,
    pub map_dif: Option<SpatialMap>,
    pub sa_spec: Attention,
    pub sa_sar: Attention,
    pub sa_dif: Option<Attention>,
    pub ca_spec: Attention,
    pub ca_sar: Attention,
    pub ca_dif: Option<Attention>,
}

impl TransformerBranch {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        dims: TransformerDims,
        rng: &mut R,
    ) -> Self {
        let e = dims.embed;
        let map_spec = SpatialMap::new(store, "trans.map_spec", dims.bands, e, true, rng);
        let map_sar = SpatialMap::new(store, "trans.map_sar", dims.sar_channels, e, true, rng);
        let map_dif = dims
            .dif_channels
            .map(|cd| SpatialMap::new(store, "trans.map_dif", cd, e, false, rng));
        let sa_spec = Attention::new(store, "trans.sa_spec", e, rng);
        let sa_sar = Attention::new(store, "trans.sa_sar", e, rng);
        let sa_dif = dims
            .dif_channels
            .map(|_| Attention::new(store, "trans.sa_dif", e, rng));
        let ca_spec = Attention::new(store, "trans.ca_spec", e, rng);
        let ca_sar = Attention::new(store, "trans.ca_sar", e, rng);
        let ca_dif = dims
            .dif_channels
            .map(|_| Attention::new(store, "trans.ca_dif", e, rng));
        Self {
            dims,
            map_spec,
            map_sar,
            map_dif,
            sa_spec,
            sa_sar,
            sa_dif,
            ca_spec,
            ca_sar,
            ca_dif,
        }
    }

    fn readout<'g, S: Scalar>(&self, seq: Var<'g, S>) -> Result<Var<'g, S>> {
        let e = self.dims.embed;
        let n = seq.shape()[0];
        match self.dims.readout {
            TransformerReadout::ClsSum => seq.narrow(1, 0, 1)?.reshape(&[n, e]),
            TransformerReadout::PooledSum => seq.mean_axis(1, false),
        }
    }

    /// Branch embedding `[N, embed]`.
    pub fn forward<'g, S: Scalar>(
        &self,
        cx: &Ctx<'g, S>,
        spec: Var<'g, S>,
        sar: Var<'g, S>,
        dif: Option<Var<'g, S>>,
    ) -> Result<Var<'g, S>> {
        let (s, _) = self
            .sa_spec
            .self_attend(cx, self.map_spec.forward(cx, spec)?)?;
        let (r, _) = self
            .sa_sar
            .self_attend(cx, self.map_sar.forward(cx, sar)?)?;
        let (s2, _) = self.ca_spec.cross_attend(cx, s, r)?;
        let (r2, _) = self.ca_sar.cross_attend(cx, r, s)?;
        let mut out = self.readout(s2)?.add(self.readout(r2)?)?;
        match (dif, &self.map_dif, &self.sa_dif, &self.ca_dif) {
            (Some(d), Some(map), Some(sa), Some(ca)) => {
                let (dseq, _) = sa.self_attend(cx, map.forward(cx, d)?)?;
                let merged = s2.add(r2)?;
                let (m2, _) = ca.cross_attend(cx, merged, dseq)?;
                out = out.add(self.readout(m2)?)?;
            }
            (None, None, _, _) => {}
            _ => {
                return Err(Error::Shape(
                    "diffusion input does not match transformer guidance setting".into(),
                ))
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn token_count_and_zero_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let m = SpatialMap::new(&mut store, "m", 4, 8, true, &mut rng);
        let g = Graph::inference();
        let cx = Ctx::new(&g, &store);
        let seq = m
            .forward(&cx, g.constant(Tensor::zeros(&[2, 4, 9, 9])))
            .unwrap();
        assert_eq!(seq.shape(), vec![2, 82, 8]);
        let v = seq.value();
        let cls = store.get(m.cls);
        for j in 0..8 {
            assert_eq!(v.at(&[1, 0, j]), cls.data()[j]);
            for t in 1..82 {
                assert_eq!(v.at(&[0, t, j]), 0.0);
            }
        }
    }

    #[test]
    fn self_attention_residual_and_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let a = Attention::new(&mut store, "a", 6, &mut rng);
        let x = Tensor::<f64>::randn(&[2, 5, 6], 1.0, &mut rng);
        {
            let g = Graph::inference();
            let cx = Ctx::new(&g, &store);
            let (_, w) = a.self_attend(&cx, g.constant(x.clone())).unwrap();
            for row in w.value().data().chunks(5) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        store.set(a.v.w, Tensor::zeros(&[6, 6])).unwrap();
        store.set(a.v.b.unwrap(), Tensor::zeros(&[6])).unwrap();
        let g = Graph::inference();
        let cx = Ctx::new(&g, &store);
        let (y, _) = a.self_attend(&cx, g.constant(x.clone())).unwrap();
        assert_eq!(*y.value(), x);
    }

    #[test]
    fn cross_attention_passes_patch_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let a = Attention::new(&mut store, "a", 6, &mut rng);
        let q = Tensor::<f64>::randn(&[2, 5, 6], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[2, 2, 6], 1.0, &mut rng);
        let g = Graph::inference();
        let cx = Ctx::new(&g, &store);
        let (y, w) = a
            .cross_attend(&cx, g.constant(q.clone()), g.constant(k.clone()))
            .unwrap();
        assert_eq!(
            y.value().narrow(1, 1, 4).unwrap(),
            q.narrow(1, 1, 4).unwrap()
        );
        // single key token takes all the weight
        assert!(w.value().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn branch_output_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let dims = TransformerDims {
            bands: 7,
            sar_channels: 2,
            dif_channels: Some(3),
            embed: 16,
            readout: TransformerReadout::ClsSum,
        };
        let b = TransformerBranch::new(&mut store, dims, &mut rng);
        let g = Graph::inference();
        let cx = Ctx::new(&g, &store);
        let spec = g.constant(Tensor::randn(&[3, 7, 5, 5], 1.0, &mut rng));
        let sar = g.constant(Tensor::randn(&[3, 2, 5, 5], 1.0, &mut rng));
        let dif = g.constant(Tensor::randn(&[3, 3, 5, 5], 1.0, &mut rng));
        assert_eq!(
            b.forward(&cx, spec, sar, Some(dif)).unwrap().shape(),
            vec![3, 16]
        );
        assert!(b.forward(&cx, spec, sar, None).is_err());
    }
}
