//! Sequence branch: gated selective state-space blocks over band-major
//! spectral tokens and raster-order SAR tokens, followed by group channel
//! attention that mixes in the diffusion and CNN feature maps.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{scalar_param, Conv2d, Ctx, Linear, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Initial step-size bias; softplus(-3) is about 0.05.
const DT_BIAS_INIT: f64 = -3.0;

#[derive(Clone, Debug)]
pub struct SsmBlock {
    pub fc_in: Linear,
    pub fc_gate: Linear,
    pub fc_dt: Linear,
    pub fc_b: Linear,
    pub fc_c: Linear,
    pub fc_out: Linear,
    /// `A = -exp(a_log)`, shape `[width, state]`.
    pub a_log: ParamId,
    pub skip: ParamId,
    pub width: usize,
    pub state: usize,
    pub bidirectional: bool,
}

pub struct SsmBlockOutput<'g, S: Scalar> {
    /// Gated scan output before the output projection and residual.
    pub gated: Var<'g, S>,
    pub out: Var<'g, S>,
}

impl SsmBlock {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        width: usize,
        state: usize,
        bidirectional: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if state == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "ssm width {width} and state {state} must be positive"
            )));
        }
        let fc_in = Linear::new(store, &format!("{name}.in"), width, width, true, rng);
        let fc_gate = Linear::new(store, &format!("{name}.gate"), width, width, true, rng);
        let fc_dt = Linear::new(store, &format!("{name}.dt"), width, width, true, rng);
        if let Some(b) = fc_dt.b {
            store.set(b, Tensor::full(&[width], S::lit(DT_BIAS_INIT)))?;
        }
        let fc_b = Linear::new(store, &format!("{name}.b"), width, state, false, rng);
        let fc_c = Linear::new(store, &format!("{name}.c"), width, state, false, rng);
        let fc_out = Linear::new(store, &format!("{name}.out"), width, width, true, rng);
        let a: Vec<S> = (0..width)
            .flat_map(|_| (1..=state).map(|s| S::lit((s as f64).ln())))
            .collect();
        let a_log = store.add(
            format!("{name}.a_log"),
            Tensor::from_vec(&[width, state], a)?,
        );
        let skip = store.add(format!("{name}.skip"), Tensor::ones(&[width]));
        Ok(Self {
            fc_in,
            fc_gate,
            fc_dt,
            fc_b,
            fc_c,
            fc_out,
            a_log,
            skip,
            width,
            state,
            bidirectional,
        })
    }

    fn scan<'g, S: Scalar>(&self, cx: &Ctx<'g, S>, u: Var<'g, S>) -> Result<Var<'g, S>> {
        let delta = self.fc_dt.forward(cx, u)?.softplus();
        let b = self.fc_b.forward(cx, u)?;
        let c = self.fc_c.forward(cx, u)?;
        let a = cx.p(self.a_log).exp().neg();
        u.selective_scan(delta, a, b, c, cx.p(self.skip))
    }

    /// Tokens `[N, L, width]` to the same shape.
    pub fn forward<'g, S: Scalar>(
        &self,
        cx: &Ctx<'g, S>,
        x: Var<'g, S>,
    ) -> Result<SsmBlockOutput<'g, S>> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.width {
            return Err(Error::Shape(format!(
                "ssm block expects [N, L, {}], got {s:?}",
                self.width
            )));
        }
        let u = self.fc_in.forward(cx, x)?.silu();
        let mut y = self.scan(cx, u)?;
        if self.bidirectional {
            let rev: Vec<usize> = (0..s[1]).rev().collect();
            let back = self
                .scan(cx, u.index_select(1, &rev)?)?
                .index_select(1, &rev)?;
            y = y.add(back)?;
        }
        let gated = y.mul(self.fc_gate.forward(cx, x)?.silu())?;
        let out = self.fc_out.forward(cx, gated)?.add(x)?;
        Ok(SsmBlockOutput { gated, out })
    }
}

/// Channel self-attention over a token-major map `[N, positions, C]`.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub lambda: ParamId,
}

pub struct ChannelAttentionOutput<'g, S: Scalar> {
    /// `max_j E_ij - E_ij`, shape `[N, C, C]`.
    pub shifted: Var<'g, S>,
    pub weights: Var<'g, S>,
    pub value: Var<'g, S>,
    pub out: Var<'g, S>,
}

impl ChannelAttention {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), channels, channels, true, rng),
            k: Linear::new(store, &format!("{name}.k"), channels, channels, true, rng),
            v: Linear::new(store, &format!("{name}.v"), channels, channels, true, rng),
            lambda: scalar_param(store, &format!("{name}.lambda"), 0.0),
        }
    }

    pub fn forward<'g, S: Scalar>(
        &self,
        cx: &Ctx<'g, S>,
        f: Var<'g, S>,
    ) -> Result<ChannelAttentionOutput<'g, S>> {
        let q = self.q.forward(cx, f)?;
        let k = self.k.forward(cx, f)?;
        let value = self.v.forward(cx, f)?;
        let energy = q.t()?.matmul(k)?;
        let shifted = energy.max_axis(2, true)?.sub(energy)?;
        let weights = shifted.softmax()?;
        let attended = value.matmul(weights.t()?)?;
        let out = attended.mul(cx.p(self.lambda))?.add(value)?;
        Ok(ChannelAttentionOutput {
            shifted,
            weights,
            value,
            out,
        })
    }
}

/// Per-stream channel attention fused into a channel gate on the spectral tokens.
#[derive(Clone, Debug)]
pub struct GroupAttention {
    pub spec: ChannelAttention,
    pub dif: Option<ChannelAttention>,
    pub cnn: Option<ChannelAttention>,
    pub gate: Linear,
    pub channels: usize,
}

impl GroupAttention {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        channels: usize,
        with_dif: bool,
        with_cnn: bool,
        rng: &mut R,
    ) -> Self {
        let spec = ChannelAttention::new(store, "ssm.ga_spec", channels, rng);
        let dif = with_dif.then(|| ChannelAttention::new(store, "ssm.ga_dif", channels, rng));
        let cnn = with_cnn.then(|| ChannelAttention::new(store, "ssm.ga_cnn", channels, rng));
        let streams = 1 + usize::from(with_dif) + usize::from(with_cnn);
        let gate = Linear::new(
            store,
            "ssm.ga_gate",
            streams * channels,
            channels,
            true,
            rng,
        );
        Self {
            spec,
            dif,
            cnn,
            gate,
            channels,
        }
    }

    /// All inputs token-major `[N, positions, C]`; returns the shape of `spec`.
    pub fn forward<'g, S: Scalar>(
        &self,
        cx: &Ctx<'g, S>,
        spec: Var<'g, S>,
        dif: Option<Var<'g, S>>,
        cnn: Option<Var<'g, S>>,
    ) -> Result<Var<'g, S>> {
        let n = spec.shape()[0];
        let mut pooled = Vec::with_capacity(3);
        for (att, x) in [
            (Some(&self.spec), Some(spec)),
            (self.dif.as_ref(), dif),
            (self.cnn.as_ref(), cnn),
        ] {
            match (att, x) {
                (Some(att), Some(x)) => {
                    let s = x.shape();
                    if s.len() != 3 || s[0] != n || s[2] != self.channels {
                        return Err(Error::Shape(format!(
                            "group attention stream {s:?}, expected [{n}, _, {}]",
                            self.channels
                        )));
                    }
                    pooled.push(att.forward(cx, x)?.out.mean_axis(1, false)?);
                }
                (None, None) => {}
                _ => {
                    return Err(Error::Shape(
                        "group attention stream does not match configuration".into(),
                    ))
                }
            }
        }
        let gate =
            self.gate
                .forward(cx, cx.g.concat(&pooled, 1)?)?
                .reshape(&[n, 1, self.channels])?;
        spec.mul(gate)?.add(spec)
    }
}

#[derive(Clone, Debug)]
pub struct SsmDims {
    pub bands: usize,
    pub sar_channels: usize,
    pub patch: usize,
    pub dif_channels: Option<usize>,
    /// Width of the CNN map fed to group attention, if any.
    pub cnn_channels: Option<usize>,
    pub embed: usize,
    pub state: usize,
    pub bidirectional: bool,
}

#[derive(Clone, Debug)]
pub struct SsmBranch {
    pub dims: SsmDims,
    pub spec_tokens: Linear,
    pub sar_tokens: Linear,
    pub dif_proj: Option<Conv2d>,
    pub cnn_proj: Option<Conv2d>,
    pub spec_block: SsmBlock,
    pub sar_block: SsmBlock,
    pub group: GroupAttention,
}

impl SsmBranch {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        dims: SsmDims,
        rng: &mut R,
    ) -> Result<Self> {
        let e = dims.embed;
        let spec_tokens = Linear::new(
            store,
            "ssm.spec_tokens",
            dims.patch * dims.patch,
            e,
            true,
            rng,
        );
        let sar_tokens = Linear::new(store, "ssm.sar_tokens", dims.sar_channels, e, true, rng);
        let dif_proj = dims
            .dif_channels
            .map(|cd| Conv2d::pointwise(store, "ssm.dif_proj", cd, e, rng));
        let cnn_proj = dims
            .cnn_channels
            .map(|cc| Conv2d::pointwise(store, "ssm.cnn_proj", cc, e, rng));
        let spec_block = SsmBlock::new(store, "ssm.spec", e, dims.state, dims.bidirectional, rng)?;
        let sar_block = SsmBlock::new(store, "ssm.sar", e, dims.state, dims.bidirectional, rng)?;
        let group = GroupAttention::new(
            store,
            e,
            dims.dif_channels.is_some(),
            dims.cnn_channels.is_some(),
            rng,
        );
        Ok(Self {
            dims,
            spec_tokens,
            sar_tokens,
            dif_proj,
            cnn_proj,
            spec_block,
            sar_block,
            group,
        })
    }

    fn token_major<'g, S: Scalar>(x: Var<'g, S>) -> Result<Var<'g, S>> {
        let s = x.shape();
        x.reshape(&[s[0], s[1], s[2] * s[3]])?.permute(&[0, 2, 1])
    }

    /// Branch embedding `[N, embed]`. `cnn_map` is the CNN branch's pre-pooling map.
    pub fn forward<'g, S: Scalar>(
        &self,
        cx: &Ctx<'g, S>,
        spec: Var<'g, S>,
        sar: Var<'g, S>,
        dif: Option<Var<'g, S>>,
        cnn_map: Option<Var<'g, S>>,
    ) -> Result<Var<'g, S>> {
        let s = spec.shape();
        let p = self.dims.patch;
        if s.len() != 4 || s[1] != self.dims.bands || s[2] != p || s[3] != p {
            return Err(Error::Shape(format!("ssm spectral input {s:?}")));
        }
        let n = s[0];
        let spec_seq = self
            .spec_tokens
            .forward(cx, spec.reshape(&[n, s[1], p * p])?)?;
        let sar_seq = self.sar_tokens.forward(cx, Self::token_major(sar)?)?;
        let spec_m = self.spec_block.forward(cx, spec_seq)?.out;
        let sar_m = self.sar_block.forward(cx, sar_seq)?.out;
        let project =
            |proj: &Option<Conv2d>, x: Option<Var<'g, S>>| -> Result<Option<Var<'g, S>>> {
                match (proj, x) {
                    (Some(c), Some(x)) => Ok(Some(Self::token_major(c.forward(cx, x)?)?)),
                    (None, None) => Ok(None),
                    _ => Err(Error::Shape(
                        "ssm auxiliary stream does not match configuration".into(),
                    )),
                }
            };
        let dif = project(&self.dif_proj, dif)?;
        let cnn = project(&self.cnn_proj, cnn_map)?;
        let fused = self.group.forward(cx, spec_m, dif, cnn)?;
        fused.mean_axis(1, false)?.add(sar_m.mean_axis(1, false)?)
    }
}
