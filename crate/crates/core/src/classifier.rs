//! Three-branch classifier assembled from the configured toggles.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::cnn::{CnnBranch, CnnDims};
use crate::config::Toggles;
use crate::error::{invalid, Error, Result};
use crate::mutual::{BranchFeatures, LossOutput, MutualConfig, MutualHead, PairTerm};
use crate::nn::{Ctx, ParamStore};
use crate::optim::Adam;
use crate::scalar::Scalar;
use crate::ssm::{SsmBranch, SsmDims};
use crate::tensor::Tensor;
use crate::transformer::{TransformerBranch, TransformerDims, TransformerReadout};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub bands: usize,
    pub sar_channels: usize,
    pub patch: usize,
    pub classes: usize,
    /// Width of the diffusion feature map.
    pub dif_channels: usize,
    pub toggles: Toggles,
    pub embed: usize,
    pub ssm_state: usize,
    pub ssm_bidirectional: bool,
    pub readout: TransformerReadout,
    pub mutual: MutualConfig,
}

/// Network inputs for one batch; `dif` is required when any guidance is on.
#[derive(Clone, Debug)]
pub struct ClassifierInputs<S> {
    pub spectral: Tensor<S>,
    pub sar: Tensor<S>,
    pub dif: Option<Tensor<S>>,
}

impl<S: Scalar> ClassifierInputs<S> {
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let pick =
            |t: &Tensor<S>| Tensor::stack(&idx.iter().map(|&i| t.index0(i)).collect::<Vec<_>>());
        Ok(Self {
            spectral: pick(&self.spectral)?,
            sar: pick(&self.sar)?,
            dif: self.dif.as_ref().map(pick).transpose()?,
        })
    }

    pub fn len(&self) -> usize {
        self.spectral.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct Classifier<S> {
    pub config: ClassifierConfig,
    pub store: ParamStore<S>,
    pub cnn: Option<CnnBranch>,
    pub trans: Option<TransformerBranch>,
    pub ssm: Option<SsmBranch>,
    pub head: MutualHead,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub ce: f64,
    pub pairs: Vec<PairTerm>,
    pub batch_accuracy: f64,
}

fn argmax_rows<S: Scalar>(logits: &Tensor<S>) -> Vec<usize> {
    logits.argmax_last()
}

impl<S: Scalar> Classifier<S> {
    pub fn new(config: ClassifierConfig, seed: u64) -> Result<Self> {
        let t = config.toggles;
        if t.branches().is_empty() {
            return Err(invalid("at least one branch must be enabled"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dif = |on: bool| on.then_some(config.dif_channels);
        let cnn = t.enable_cnn.then(|| {
            let dims = CnnDims {
                bands: config.bands,
                sar_channels: config.sar_channels,
                dif_channels: dif(t.guide_cnn),
                embed: config.embed,
            };
            CnnBranch::new(&mut store, dims, &mut rng)
        });
        let trans = t.enable_trans.then(|| {
            let dims = TransformerDims {
                bands: config.bands,
                sar_channels: config.sar_channels,
                dif_channels: dif(t.guide_trans),
                embed: config.embed,
                readout: config.readout,
            };
            TransformerBranch::new(&mut store, dims, &mut rng)
        });
        let ssm = if t.enable_ssm {
            let dims = SsmDims {
                bands: config.bands,
                sar_channels: config.sar_channels,
                patch: config.patch,
                dif_channels: dif(t.guide_ssm),
                cnn_channels: t.enable_cnn.then_some(config.embed),
                embed: config.embed,
                state: config.ssm_state,
                bidirectional: config.ssm_bidirectional,
            };
            Some(SsmBranch::new(&mut store, dims, &mut rng)?)
        } else {
            None
        };
        let head = MutualHead::new(
            &mut store,
            config.mutual.clone(),
            &t.branches(),
            config.embed,
            config.classes,
            &mut rng,
        )?;
        Ok(Self {
            config,
            store,
            cnn,
            trans,
            ssm,
            head,
        })
    }

    pub fn features<'g>(
        &self,
        cx: &Ctx<'g, S>,
        spec: Var<'g, S>,
        sar: Var<'g, S>,
        dif: Option<Var<'g, S>>,
    ) -> Result<BranchFeatures<'g, S>> {
        let t = self.config.toggles;
        let guide = |on: bool| -> Result<Option<Var<'g, S>>> {
            if !on {
                return Ok(None);
            }
            dif.map(Some)
                .ok_or_else(|| invalid("diffusion features required by an enabled guidance module"))
        };
        let cnn_out = match &self.cnn {
            Some(b) => Some(b.forward(cx, spec, sar, guide(t.guide_cnn)?)?),
            None => None,
        };
        let trans = match &self.trans {
            Some(b) => Some(b.forward(cx, spec, sar, guide(t.guide_trans)?)?),
            None => None,
        };
        let mamba = match &self.ssm {
            Some(b) => Some(b.forward(
                cx,
                spec,
                sar,
                guide(t.guide_ssm)?,
                cnn_out.as_ref().map(|o| o.map),
            )?),
            None => None,
        };
        Ok(BranchFeatures {
            cnn: cnn_out.map(|o| o.feature),
            trans,
            mamba,
        })
    }

    fn bind<'g>(&self, cx: &Ctx<'g, S>, x: &ClassifierInputs<S>) -> Result<BranchFeatures<'g, S>> {
        let dif = x.dif.as_ref().map(|d| cx.constant(d.clone()));
        self.features(
            cx,
            cx.constant(x.spectral.clone()),
            cx.constant(x.sar.clone()),
            dif,
        )
    }

    pub fn loss<'g>(
        &self,
        cx: &Ctx<'g, S>,
        x: &ClassifierInputs<S>,
        labels: &[usize],
    ) -> Result<LossOutput<'g, S>> {
        let feats = self.bind(cx, x)?;
        self.head.loss(cx, &feats, labels)
    }

    /// Fused logits `[N, classes]`.
    pub fn logits(&self, x: &ClassifierInputs<S>) -> Result<Tensor<S>> {
        let g = Graph::inference();
        let cx = Ctx::new(&g, &self.store);
        let feats = self.bind(&cx, x)?;
        let z = self.head.fused_logits(&cx, &feats)?;
        let v = z.value().clone();
        Ok(v)
    }

    pub fn predict(&self, x: &ClassifierInputs<S>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(x)?))
    }

    /// Branch embeddings as plain tensors (missing branches are `None`).
    pub fn embeddings(&self, x: &ClassifierInputs<S>) -> Result<[Option<Tensor<S>>; 3]> {
        let g = Graph::inference();
        let cx = Ctx::new(&g, &self.store);
        let f = self.bind(&cx, x)?;
        let take = |v: Option<Var<'_, S>>| v.map(|v| v.value().clone());
        Ok([take(f.cnn), take(f.trans), take(f.mamba)])
    }

    pub fn train_step(
        &mut self,
        opt: &mut Adam<S>,
        x: &ClassifierInputs<S>,
        labels: &[usize],
        lr: f64,
    ) -> Result<StepStats> {
        let g = Graph::new();
        let cx = Ctx::new(&g, &self.store);
        let out = self.loss(&cx, x, labels)?;
        let loss = out.total.value().item().as_f64();
        let pred = argmax_rows(&out.logits.value());
        let correct = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        let grads = g.backward(out.total)?.for_store(&self.store);
        let stats = StepStats {
            loss,
            ce: out.ce,
            pairs: out.pairs,
            batch_accuracy: correct as f64 / labels.len().max(1) as f64,
        };
        opt.step(&mut self.store, &grads, lr).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("{m} at loss {loss}")),
            e => e,
        })?;
        Ok(stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn cfg(toggles: Toggles) -> ClassifierConfig {
        ClassifierConfig {
            bands: 6,
            sar_channels: 2,
            patch: 5,
            classes: 3,
            dif_channels: 4,
            toggles,
            embed: 8,
            ssm_state: 4,
            ssm_bidirectional: false,
            readout: TransformerReadout::ClsSum,
            mutual: MutualConfig {
                enabled: toggles.enable_mutual,
                ..Default::default()
            },
        }
    }

    fn inputs(n: usize) -> ClassifierInputs<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        ClassifierInputs {
            spectral: Tensor::uniform(&[n, 6, 5, 5], 0.0, 1.0, &mut rng),
            sar: Tensor::uniform(&[n, 2, 5, 5], 0.0, 1.0, &mut rng),
            dif: Some(Tensor::randn(&[n, 4, 5, 5], 1.0, &mut rng)),
        }
    }

    #[test]
    fn every_ablation_row_trains_a_step() {
        let x = inputs(4);
        for n in 1..=12 {
            let toggles = Toggles::experiment(n).unwrap();
            let mut m = Classifier::<f64>::new(cfg(toggles), 0).unwrap();
            let mut opt = Adam::new(&m.store);
            let s = m.train_step(&mut opt, &x, &[0, 1, 2, 0], 1e-3).unwrap();
            assert!(s.loss.is_finite(), "experiment {n}");
            assert_eq!(m.predict(&x).unwrap().len(), 4);
        }
    }

    #[test]
    fn missing_diffusion_is_an_error() {
        let m = Classifier::<f64>::new(cfg(Toggles::all()), 0).unwrap();
        let mut x = inputs(2);
        x.dif = None;
        assert!(m.predict(&x).is_err());
        let unguided = Toggles {
            guide_cnn: false,
            guide_trans: false,
            guide_ssm: false,
            ..Toggles::all()
        };
        assert!(Classifier::<f64>::new(cfg(unguided), 0)
            .unwrap()
            .predict(&x)
            .is_ok());
    }

    #[test]
    fn predictions_do_not_depend_on_batch_composition() {
        let m = Classifier::<f64>::new(cfg(Toggles::all()), 1).unwrap();
        let x = inputs(5);
        let all = m.logits(&x).unwrap();
        let part = m.logits(&x.select(&[3]).unwrap()).unwrap();
        for j in 0..3 {
            assert!((all.at(&[3, j]) - part.at(&[0, j])).abs() < 1e-12);
        }
    }
}
