//! Mutual-learning objective across the three branches: feature cosine
//! similarity, prediction entropy, an adaptive temperature per branch pair and
//! temperature-weighted KL terms added to the fused cross-entropy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{invalid, Error, Result};
use crate::nn::{Ctx, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LOG_DELTA: f64 = 1e-12;
pub const COSINE_DELTA: f64 = 1e-12;
pub const TEMPERATURE_FLOOR: f64 = 1e-6;

/// `a.b / (|a| |b| + delta)`; 0 when both vectors are zero.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(dot / (na * nb + COSINE_DELTA))
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Shannon entropy in nats of `softmax(logits)`.
pub fn entropy(logits: &[f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    softmax(logits)
        .iter()
        .zip(logits)
        .map(|(p, z)| -p * (z - lse))
        .sum()
}

/// `ln(1 + exp(pre)) + 1e-6`.
pub fn temperature_from(pre: f64) -> f64 {
    let sp = if pre > 0.0 {
        pre + (-pre).exp().ln_1p()
    } else {
        pre.exp().ln_1p()
    };
    sp + TEMPERATURE_FLOOR
}

/// `T^2 * mean_i sum_j p_t (ln p_t - ln p_s)` over rows of width `classes`.
pub fn kl_mutual(
    p_teacher: &[f64],
    p_student: &[f64],
    classes: usize,
    temperature: f64,
) -> Result<f64> {
    if classes == 0 || p_teacher.len() != p_student.len() || p_teacher.len() % classes != 0 {
        return Err(Error::Shape(format!(
            "kl rows: {} and {} values for {classes} classes",
            p_teacher.len(),
            p_student.len()
        )));
    }
    if !(temperature > 0.0) {
        return Err(invalid(format!(
            "temperature {temperature} must be positive"
        )));
    }
    if p_teacher.iter().chain(p_student).any(|&p| p < 0.0) {
        return Err(invalid("negative probability"));
    }
    let rows = p_teacher.len() / classes;
    let total: f64 = p_teacher
        .iter()
        .zip(p_student)
        .map(|(&t, &s)| t * ((t + LOG_DELTA).ln() - (s + LOG_DELTA).ln()))
        .sum();
    Ok(temperature * temperature * total / rows.max(1) as f64)
}

/// Row-wise cosine similarity of `[N, E]` features, `[N]`.
///
/// A tiny constant under the square root keeps the gradient finite at zero vectors.
pub fn cosine_rows<'g, S: Scalar>(a: Var<'g, S>, b: Var<'g, S>) -> Result<Var<'g, S>> {
    let dot = a.mul(b)?.sum_axis(1, false)?;
    let norm = |v: Var<'g, S>| -> Result<Var<'g, S>> {
        Ok(v.square()
            .sum_axis(1, false)?
            .add_scalar(S::lit(1e-30))
            .sqrt())
    };
    dot.div(norm(a)?.mul(norm(b)?)?.add_scalar(S::lit(COSINE_DELTA)))
}

/// Row-wise entropy of `softmax(z)` for `[N, C]` logits, `[N]`.
pub fn entropy_rows<S: Scalar>(z: Var<'_, S>) -> Result<Var<'_, S>> {
    let logp = z.log_softmax()?;
    logp.exp().mul(logp)?.sum_axis(1, false).map(|v| v.neg())
}

/// `mean_i T_i^2 KL(p_t,i || p_s,i)`; `temperature` is rank-0, `[1]` or `[N]`.
pub fn kl_rows<'g, S: Scalar>(
    p_teacher: Var<'g, S>,
    p_student: Var<'g, S>,
    temperature: Var<'g, S>,
) -> Result<Var<'g, S>> {
    let d = S::lit(LOG_DELTA);
    let diff = p_teacher
        .add_scalar(d)
        .ln()
        .sub(p_student.add_scalar(d).ln())?;
    let kl = p_teacher.mul(diff)?.sum_axis(1, false)?;
    kl.mul(temperature.square())?.mean_all()
}

/// Affine map from (similarity, entropy sum) to a positive temperature.
#[derive(Clone, Debug)]
pub struct TemperatureNet {
    pub fc: Linear,
}

impl TemperatureNet {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        rng: &mut R,
    ) -> Self {
        Self {
            fc: Linear::new(store, name, 2, 1, true, rng),
        }
    }

    /// `[k]` similarities and entropy sums to `[k]` temperatures.
    pub fn forward<'g, S: Scalar>(
        &self,
        cx: &Ctx<'g, S>,
        sim: Var<'g, S>,
        h_sum: Var<'g, S>,
    ) -> Result<Var<'g, S>> {
        let k = sim.shape().iter().product::<usize>();
        let x =
            cx.g.concat(&[sim.reshape(&[k, 1])?, h_sum.reshape(&[k, 1])?], 1)?;
        Ok(self
            .fc
            .forward(cx, x)?
            .reshape(&[k])?
            .softplus()
            .add_scalar(S::lit(TEMPERATURE_FLOOR)))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlMode {
    /// One direction per pair with the teacher detached.
    #[default]
    Asymmetric,
    /// Both directions per pair, each with its teacher detached.
    Symmetric,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftmaxMode {
    /// Temperature only as the `T^2` prefactor.
    #[default]
    Plain,
    /// Logits divided by `T` inside both softmaxes.
    Distillation,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureGranularity {
    /// One temperature per pair from batch-mean similarity and entropy.
    #[default]
    Batch,
    /// One temperature per pair and sample.
    Sample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MutualConfig {
    pub enabled: bool,
    pub kl_mode: KlMode,
    pub softmax_mode: SoftmaxMode,
    pub branch_ce: bool,
    pub detach_teacher: bool,
    pub temperature_granularity: TemperatureGranularity,
}

impl Default for MutualConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            kl_mode: KlMode::Asymmetric,
            softmax_mode: SoftmaxMode::Plain,
            branch_ce: false,
            detach_teacher: true,
            temperature_granularity: TemperatureGranularity::Batch,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    Cnn,
    Trans,
    Mamba,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Cnn, Branch::Trans, Branch::Mamba];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Cnn => "cnn",
            Branch::Trans => "trans",
            Branch::Mamba => "mamba",
        }
    }
}

/// (teacher, student) pairs: trans teaches cnn, mamba teaches cnn, mamba teaches trans.
pub const PAIRS: [(Branch, Branch); 3] = [
    (Branch::Trans, Branch::Cnn),
    (Branch::Mamba, Branch::Cnn),
    (Branch::Mamba, Branch::Trans),
];

/// Branch embeddings `[N, E]`; disabled branches are `None`.
#[derive(Clone, Copy)]
pub struct BranchFeatures<'g, S: Scalar> {
    pub cnn: Option<Var<'g, S>>,
    pub trans: Option<Var<'g, S>>,
    pub mamba: Option<Var<'g, S>>,
}

impl<'g, S: Scalar> BranchFeatures<'g, S> {
    pub fn get(&self, b: Branch) -> Option<Var<'g, S>> {
        match b {
            Branch::Cnn => self.cnn,
            Branch::Trans => self.trans,
            Branch::Mamba => self.mamba,
        }
    }

    /// Fusion order: trans, cnn, mamba.
    fn fusion_order(&self) -> Vec<Var<'g, S>> {
        [self.trans, self.cnn, self.mamba]
            .into_iter()
            .flatten()
            .collect()
    }
}

/// Per-pair diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct PairTerm {
    pub teacher: Branch,
    pub student: Branch,
    /// Mean over samples when the temperature is per sample.
    pub temperature: f64,
    pub loss: f64,
}

pub struct LossOutput<'g, S: Scalar> {
    pub total: Var<'g, S>,
    pub logits: Var<'g, S>,
    pub ce: f64,
    pub pairs: Vec<PairTerm>,
}

/// Classification heads, fusion layer and temperature nets.
#[derive(Clone, Debug)]
pub struct MutualHead {
    pub config: MutualConfig,
    pub classes: usize,
    pub heads: Vec<(Branch, Linear)>,
    pub fusion: Linear,
    pub temps: Vec<((Branch, Branch), TemperatureNet)>,
}

pub fn cross_entropy<'g, S: Scalar>(
    cx: &Ctx<'g, S>,
    logits: Var<'g, S>,
    labels: &[usize],
) -> Result<Var<'g, S>> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::Shape(format!(
            "logits {s:?} for {} labels",
            labels.len()
        )));
    }
    let c = s[1];
    let mut onehot = Tensor::<S>::zeros(&s);
    for (i, &l) in labels.iter().enumerate() {
        if l >= c {
            return Err(invalid(format!("label {l} outside {c} classes")));
        }
        onehot.data_mut()[i * c + l] = S::one();
    }
    Ok(logits
        .log_softmax()?
        .mul(cx.constant(onehot))?
        .sum_axis(1, false)?
        .mean_all()?
        .neg())
}

fn finite<S: Scalar>(v: &Var<'_, S>, what: &str) -> Result<f64> {
    let x = v.value().item().as_f64();
    if !x.is_finite() {
        return Err(Error::NonFinite(format!("{what} diverged ({x})")));
    }
    Ok(x)
}

impl MutualHead {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        config: MutualConfig,
        enabled: &[Branch],
        embed: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if enabled.is_empty() {
            return Err(invalid("at least one branch must be enabled"));
        }
        let has = |b: Branch| enabled.contains(&b);
        let heads = if config.enabled || config.branch_ce {
            Branch::ALL
                .into_iter()
                .filter(|&b| has(b))
                .map(|b| {
                    (
                        b,
                        Linear::new(
                            store,
                            &format!("head.{}", b.name()),
                            embed,
                            classes,
                            true,
                            rng,
                        ),
                    )
                })
                .collect()
        } else {
            Vec::new()
        };
        let fusion = Linear::new(
            store,
            "head.fusion",
            embed * enabled.len(),
            classes,
            true,
            rng,
        );
        let temps = if config.enabled {
            PAIRS
                .into_iter()
                .filter(|&(t, s)| has(t) && has(s))
                .map(|(t, s)| {
                    (
                        (t, s),
                        TemperatureNet::new(store, &format!("temp.{}_{}", t.name(), s.name()), rng),
                    )
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            config,
            classes,
            heads,
            fusion,
            temps,
        })
    }

    pub fn fused_logits<'g, S: Scalar>(
        &self,
        cx: &Ctx<'g, S>,
        feats: &BranchFeatures<'g, S>,
    ) -> Result<Var<'g, S>> {
        let parts = feats.fusion_order();
        let x = if parts.len() == 1 {
            parts[0]
        } else {
            cx.g.concat(&parts, 1)?
        };
        self.fusion.forward(cx, x)
    }

    fn kl_term<'g, S: Scalar>(
        &self,
        zt: Var<'g, S>,
        zs: Var<'g, S>,
        temp: Var<'g, S>,
    ) -> Result<Var<'g, S>> {
        let (zt, zs) = match self.config.softmax_mode {
            SoftmaxMode::Plain => (zt, zs),
            SoftmaxMode::Distillation => {
                let col = temp.reshape(&[temp.shape().iter().product(), 1])?;
                (zt.div(col)?, zs.div(col)?)
            }
        };
        let mut pt = zt.softmax()?;
        if self.config.detach_teacher {
            pt = pt.detach();
        }
        let ps = zs.softmax()?;
        kl_rows(pt, ps, temp)
    }

    pub fn loss<'g, S: Scalar>(
        &self,
        cx: &Ctx<'g, S>,
        feats: &BranchFeatures<'g, S>,
        labels: &[usize],
    ) -> Result<LossOutput<'g, S>> {
        let logits = self.fused_logits(cx, feats)?;
        let ce_var = cross_entropy(cx, logits, labels)?;
        let ce = finite(&ce_var, "fused cross-entropy")?;
        let mut total = ce_var;
        let mut branch_logits = Vec::with_capacity(3);
        for (b, head) in &self.heads {
            let f = feats
                .get(*b)
                .ok_or_else(|| invalid(format!("missing {} features", b.name())))?;
            let z = head.forward(cx, f)?;
            if self.config.branch_ce {
                let l = cross_entropy(cx, z, labels)?;
                finite(&l, &format!("{} cross-entropy", b.name()))?;
                total = total.add(l)?;
            }
            branch_logits.push((*b, z, f));
        }
        let lookup = |b: Branch| {
            branch_logits
                .iter()
                .find(|(x, _, _)| *x == b)
                .map(|&(_, z, f)| (z, f))
        };
        let mut pairs = Vec::new();
        for ((t, s), net) in &self.temps {
            let ((zt, ft), (zs, fs)) = match (lookup(*t), lookup(*s)) {
                (Some(a), Some(b)) => (a, b),
                _ => continue,
            };
            let mut sim = cosine_rows(ft, fs)?;
            let mut h = entropy_rows(zt)?.add(entropy_rows(zs)?)?;
            if self.config.temperature_granularity == TemperatureGranularity::Batch {
                sim = sim.mean_all()?;
                h = h.mean_all()?;
            }
            let temp = net.forward(cx, sim, h)?;
            let mut term = self.kl_term(zt, zs, temp)?;
            if self.config.kl_mode == KlMode::Symmetric {
                term = term.add(self.kl_term(zs, zt, temp)?)?;
            }
            let what = format!("kl {}->{}", t.name(), s.name());
            let loss = finite(&term, &what)?;
            let temperature = finite(&temp.mean_all()?, &what)?;
            pairs.push(PairTerm {
                teacher: *t,
                student: *s,
                temperature,
                loss,
            });
            total = total.add(term)?;
        }
        finite(&total, "total loss")?;
        Ok(LossOutput {
            total,
            logits,
            ce,
            pairs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn closed_form_values() {
        assert!(
            (cosine_similarity(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap() - 0.974632).abs()
                < 1e-6
        );
        assert_eq!(cosine_similarity(&[0.0; 3], &[0.0; 3]).unwrap(), 0.0);
        assert!((entropy(&[1.0, 0.0]) - 0.582203).abs() < 1e-6);
        assert!((entropy(&[0.3; 7]) - 7f64.ln()).abs() < 1e-12);
        assert!(entropy(&[1e4, 0.0, 0.0]) < 1e-12);
        assert!((temperature_from(0.0) - 0.693148).abs() < 1e-6);
        assert!((temperature_from(2.0) - 2.126929).abs() < 1e-6);
        assert!((temperature_from(-50.0) - 1e-6).abs() < 1e-12);
        let direct = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        assert!((kl_mutual(&[0.9, 0.1], &[0.5, 0.5], 2, 1.0).unwrap() - direct).abs() < 1e-9);
        assert!((direct - 0.368064).abs() < 1e-6);
        assert!(kl_mutual(&[1.2, -0.2], &[0.5, 0.5], 2, 1.0).is_err());
    }

    #[test]
    fn graph_versions_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let g = Graph::<f64>::new();
        let cos = cosine_rows(g.constant(a.clone()), g.constant(b.clone())).unwrap();
        let ent = entropy_rows(g.constant(a.clone())).unwrap();
        for i in 0..3 {
            let (ra, rb) = (&a.data()[i * 4..i * 4 + 4], &b.data()[i * 4..i * 4 + 4]);
            assert!((cos.value().data()[i] - cosine_similarity(ra, rb).unwrap()).abs() < 1e-12);
            assert!((ent.value().data()[i] - entropy(ra)).abs() < 1e-12);
        }
        let pa = g.constant(a.clone()).softmax().unwrap().value().clone();
        let pb = g.constant(b.clone()).softmax().unwrap().value().clone();
        let (pt, ps) = (g.constant(pa), g.constant(pb));
        let kl = kl_rows(pt, ps, g.scalar(1.5)).unwrap().value().item();
        let oracle = kl_mutual(pt.value().data(), ps.value().data(), 4, 1.5).unwrap();
        assert!((kl - oracle).abs() < 1e-12);
    }

    #[test]
    fn total_loss_reaches_all_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let head = MutualHead::new(
            &mut store,
            MutualConfig::default(),
            &Branch::ALL,
            5,
            3,
            &mut rng,
        )
        .unwrap();
        let g = Graph::new();
        let cx = Ctx::new(&g, &store);
        let feats = BranchFeatures {
            cnn: Some(g.input(Tensor::randn(&[4, 5], 1.0, &mut rng))),
            trans: Some(g.input(Tensor::randn(&[4, 5], 1.0, &mut rng))),
            mamba: Some(g.input(Tensor::randn(&[4, 5], 1.0, &mut rng))),
        };
        let out = head.loss(&cx, &feats, &[0, 1, 2, 1]).unwrap();
        assert_eq!(out.pairs.len(), 3);
        assert!(out.total.value().item() > 0.0);
        let grads = g.backward(out.total).unwrap();
        for (id, gr) in store.ids().zip(grads.for_store(&store)) {
            let gr = gr.unwrap_or_else(|| panic!("no grad for {}", store.name(id)));
            assert!(gr.max_abs() > 0.0, "zero grad for {}", store.name(id));
        }
        for b in Branch::ALL {
            assert!(grads.wrt(feats.get(b).unwrap()).unwrap().max_abs() > 0.0);
        }
    }

    #[test]
    fn loss_variants_run() {
        for (gran, mode, kl) in [
            (
                TemperatureGranularity::Sample,
                SoftmaxMode::Distillation,
                KlMode::Symmetric,
            ),
            (
                TemperatureGranularity::Batch,
                SoftmaxMode::Distillation,
                KlMode::Asymmetric,
            ),
            (
                TemperatureGranularity::Sample,
                SoftmaxMode::Plain,
                KlMode::Asymmetric,
            ),
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut store = ParamStore::<f64>::new();
            let config = MutualConfig {
                temperature_granularity: gran,
                softmax_mode: mode,
                kl_mode: kl,
                branch_ce: true,
                ..Default::default()
            };
            let head = MutualHead::new(&mut store, config, &Branch::ALL, 5, 3, &mut rng).unwrap();
            let g = Graph::new();
            let cx = Ctx::new(&g, &store);
            let mut f = || Some(g.constant(Tensor::randn(&[4, 5], 1.0, &mut rng)));
            let feats = BranchFeatures {
                cnn: f(),
                trans: f(),
                mamba: f(),
            };
            let out = head.loss(&cx, &feats, &[0, 1, 2, 0]).unwrap();
            assert!(out.total.value().item() > out.ce);
            assert!(out
                .pairs
                .iter()
                .all(|p| p.temperature > 0.0 && p.loss >= 0.0));
            g.backward(out.total).unwrap();
        }
    }

    #[test]
    fn single_branch_has_no_kl() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let head = MutualHead::new(
            &mut store,
            MutualConfig::default(),
            &[Branch::Cnn],
            5,
            3,
            &mut rng,
        )
        .unwrap();
        let g = Graph::new();
        let cx = Ctx::new(&g, &store);
        let feats = BranchFeatures {
            cnn: Some(g.constant(Tensor::randn(&[2, 5], 1.0, &mut rng))),
            trans: None,
            mamba: None,
        };
        let out = head.loss(&cx, &feats, &[0, 2]).unwrap();
        assert!(out.pairs.is_empty());
        assert_eq!(out.total.value().item(), out.ce);
    }
}
