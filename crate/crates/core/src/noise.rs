//! Speckle and Gaussian noise models, and the progressive masking schedule
//! applied to the spectral stack during pre-training.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

/// L-look multiplicative speckle with mean intensity `mean`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeckleParams {
    pub looks: f64,
    pub mean: f64,
}

impl SpeckleParams {
    pub fn new(looks: f64, mean: f64) -> Result<Self> {
        let p = Self { looks, mean };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.looks > 0.0 && self.looks.is_finite())
            || !(self.mean > 0.0 && self.mean.is_finite())
        {
            return Err(invalid(format!(
                "speckle looks {} and mean {} must be positive",
                self.looks, self.mean
            )));
        }
        Ok(())
    }

    /// Variance of the Gamma(L, I/L) factor, `I^2 / L`.
    pub fn variance(&self) -> f64 {
        self.mean * self.mean / self.looks
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub variance: f64,
}

impl GaussianParams {
    pub fn new(variance: f64) -> Result<Self> {
        if !(variance >= 0.0 && variance.is_finite()) {
            return Err(invalid(format!(
                "gaussian variance {variance} must be nonnegative"
            )));
        }
        Ok(Self { variance })
    }
}

/// Gamma density `(L/I)^L n^(L-1) / Gamma(L) * exp(-L n / I)`, evaluated in log space.
pub fn speckle_pdf(n: f64, params: SpeckleParams) -> Result<f64> {
    params.validate()?;
    if !(n > 0.0) {
        return Err(invalid(format!("speckle density needs n > 0, got {n}")));
    }
    let SpeckleParams { looks: l, mean: i } = params;
    let log_p = l * (l / i).ln() + (l - 1.0) * n.ln() - ln_gamma(l) - l * n / i;
    Ok(log_p.exp())
}

/// I.i.d. Gamma(shape L, scale I/L) draws.
pub fn sample_speckle<S: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    params: SpeckleParams,
    rng: &mut R,
) -> Result<Tensor<S>> {
    params.validate()?;
    let dist =
        Gamma::new(params.looks, params.mean / params.looks).map_err(|e| invalid(e.to_string()))?;
    let data = (0..numel(shape))
        .map(|_| S::lit(dist.sample(rng)))
        .collect();
    Tensor::from_vec(shape, data)
}

/// Zero-mean additive Gaussian noise.
pub fn sample_gaussian<S: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    params: GaussianParams,
    rng: &mut R,
) -> Tensor<S> {
    let sd = params.variance.sqrt();
    let data = (0..numel(shape))
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            S::lit(z * sd)
        })
        .collect();
    Tensor::from_vec(shape, data).expect("numel matches")
}

/// Keep probability `tanh(epo)` for training progress `epo` in [0, 1].
pub fn mask_probability(epo: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&epo) {
        return Err(invalid(format!("training progress {epo} outside [0, 1]")));
    }
    Ok(epo.tanh())
}

/// Sample-level and element-level binary masks for the spectral stack.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPair<S> {
    /// One entry per batch element, shape `[N]`.
    pub sample_mask: Tensor<S>,
    /// Same shape as the spectral batch.
    pub structure_mask: Tensor<S>,
    pub keep_probability: f64,
}

impl<S: Scalar> MaskPair<S> {
    /// Masks that keep everything.
    pub fn ones(batch: usize, sample_shape: &[usize]) -> Self {
        let mut shape = vec![batch];
        shape.extend_from_slice(sample_shape);
        Self {
            sample_mask: Tensor::ones(&[batch]),
            structure_mask: Tensor::ones(&shape),
            keep_probability: 1.0,
        }
    }

    pub fn batch(&self) -> usize {
        self.sample_mask.numel()
    }
}

/// Draws both masks with a shared Bernoulli(`tanh(epo)`) parameter at 1x1x1 granularity.
pub fn draw_masks<S: Scalar, R: Rng + ?Sized>(
    batch: usize,
    sample_shape: &[usize],
    epo: f64,
    rng: &mut R,
) -> Result<MaskPair<S>> {
    let p = mask_probability(epo)?;
    let mut bern = |n: usize| -> Vec<S> {
        (0..n)
            .map(|_| {
                if rng.random_bool(p) {
                    S::one()
                } else {
                    S::zero()
                }
            })
            .collect()
    };
    let sample_mask = Tensor::from_vec(&[batch], bern(batch))?;
    let mut shape = vec![batch];
    shape.extend_from_slice(sample_shape);
    let structure_mask = Tensor::from_vec(&shape, bern(numel(&shape)))?;
    Ok(MaskPair {
        sample_mask,
        structure_mask,
        keep_probability: p,
    })
}

/// Elementwise `M_s M_r x`: zero wherever either mask is zero.
pub fn apply_masks<S: Scalar>(spectral: &Tensor<S>, masks: &MaskPair<S>) -> Result<Tensor<S>> {
    if spectral.shape() != masks.structure_mask.shape()
        || spectral.shape().first() != Some(&masks.batch())
    {
        return Err(Error::Shape(format!(
            "spectral batch {:?} vs structure mask {:?} and {} sample entries",
            spectral.shape(),
            masks.structure_mask.shape(),
            masks.batch()
        )));
    }
    let per = spectral.numel() / masks.batch().max(1);
    let mut out = spectral.clone();
    let (sm, rm) = (masks.sample_mask.data(), masks.structure_mask.data());
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = *v * rm[i] * sm[i / per];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
        let c = 0.5 * (a + b);
        let whole = (b - a) / 6.0 * (f(a) + 4.0 * f(c) + f(b));
        adapt(f, a, b, f(a), f(c), f(b), whole, tol, depth)
    }

    #[allow(clippy::too_many_arguments)]
    fn adapt(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fc: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let c = 0.5 * (a + b);
        let (d, e) = (0.5 * (a + c), 0.5 * (c + b));
        let (fd, fe) = (f(d), f(e));
        let left = (c - a) / 6.0 * (fa + 4.0 * fd + fc);
        let right = (b - c) / 6.0 * (fc + 4.0 * fe + fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            return left + right + (left + right - whole) / 15.0;
        }
        adapt(f, a, c, fa, fd, fc, left, tol / 2.0, depth - 1)
            + adapt(f, c, b, fc, fe, fb, right, tol / 2.0, depth - 1)
    }

    #[test]
    fn exponential_special_case() {
        let p = speckle_pdf(1.0, SpeckleParams::new(1.0, 1.0).unwrap()).unwrap();
        assert!((p - (-1.0f64).exp()).abs() < 1e-12);
        assert!(speckle_pdf(0.0, SpeckleParams::new(1.0, 1.0).unwrap()).is_err());
    }

    #[test]
    fn density_integrates_to_one() {
        for l in [1.0, 2.0, 4.0, 8.0] {
            let params = SpeckleParams::new(l, 1.0).unwrap();
            let f = |n: f64| {
                if n <= 0.0 {
                    if l == 1.0 {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    speckle_pdf(n, params).unwrap()
                }
            };
            let total: f64 = (0..120)
                .map(|k| simpson(&f, k as f64 * 0.5, (k + 1) as f64 * 0.5, 1e-13, 30))
                .sum();
            assert!((total - 1.0).abs() < 1e-6, "L={l}: {total}");
        }
    }

    #[test]
    fn density_mode_for_four_looks() {
        let params = SpeckleParams::new(4.0, 1.0).unwrap();
        let (mut best, mut arg) = (0.0, 0.0);
        for i in 1..=20000 {
            let n = i as f64 * 1e-4;
            let p = speckle_pdf(n, params).unwrap();
            if p > best {
                best = p;
                arg = n;
            }
        }
        assert!((arg - 0.75).abs() < 2e-4);
    }

    #[test]
    fn speckle_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = SpeckleParams::new(4.0, 1.0).unwrap();
        let x: Tensor<f64> = sample_speckle(&[100_000], params, &mut rng).unwrap();
        let mean = x.mean();
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.numel() as f64;
        assert!((mean - 1.0).abs() < 0.01);
        assert!((var - 0.25).abs() / 0.25 < 0.05);
        assert!(x.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn probability_values() {
        assert_eq!(mask_probability(0.0).unwrap(), 0.0);
        let e = std::f64::consts::E;
        assert!((mask_probability(1.0).unwrap() - (e - 1.0 / e) / (e + 1.0 / e)).abs() < 1e-15);
        assert!((mask_probability(0.5).unwrap() - 0.462117).abs() < 1e-6);
        assert!(mask_probability(1.5).is_err());
    }

    #[test]
    fn masks_at_start_are_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m: MaskPair<f32> = draw_masks(4, &[3, 2, 2], 0.0, &mut rng).unwrap();
        assert_eq!(m.sample_mask.sum(), 0.0);
        assert_eq!(m.structure_mask.sum(), 0.0);
    }

    #[test]
    fn mask_frequency_at_end() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m: MaskPair<f64> = draw_masks(10, &[100, 10, 100], 1.0, &mut rng).unwrap();
        let frac = m.structure_mask.mean();
        assert!((frac - 1f64.tanh()).abs() < 0.005);
    }

    #[test]
    fn drop_whole_sample() {
        let x = Tensor::<f64>::ones(&[2, 3]);
        let mut m = MaskPair::ones(2, &[3]);
        m.sample_mask.data_mut()[1] = 0.0;
        let y = apply_masks(&x, &m).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        assert!(apply_masks(&Tensor::<f64>::ones(&[2, 4]), &m).is_err());
    }
}
