//! Small synthetic spectral + SAR scenes with known class structure.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::{Scene, SceneHeader};
use crate::error::{invalid, Error, Result};
use crate::noise::{sample_gaussian, sample_speckle, GaussianParams, SpeckleParams};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub sar_channels: usize,
    /// `[classes][bands]` mean spectra.
    pub signatures: Vec<Vec<f64>>,
    /// `[classes][sar_channels]` mean reflectivity.
    pub sar_means: Vec<Vec<f64>>,
    /// Speckle looks per class.
    pub sar_looks: Vec<f64>,
    /// Standard deviation of additive spectral noise.
    pub noise_level: f64,
    /// Voronoi sites per class used to paint the label map.
    pub regions_per_class: usize,
}

impl SyntheticSpec {
    /// Gaussian-bump spectra with centers spread across the bands, and SAR
    /// reflectivities ramping in opposite directions across channels.
    pub fn standard(
        classes: usize,
        height: usize,
        width: usize,
        bands: usize,
        sar_channels: usize,
    ) -> Self {
        let signatures = (0..classes)
            .map(|k| {
                let center = (k as f64 + 0.5) / classes as f64;
                (0..bands)
                    .map(|b| {
                        let x = (b as f64 + 0.5) / bands as f64 - center;
                        0.2 + 0.6 * (-x * x / 0.02).exp()
                    })
                    .collect()
            })
            .collect();
        let sar_means = (0..classes)
            .map(|k| {
                let r = if classes > 1 {
                    k as f64 / (classes - 1) as f64
                } else {
                    0.0
                };
                (0..sar_channels)
                    .map(|c| {
                        if c % 2 == 0 {
                            0.3 + 0.5 * r
                        } else {
                            0.8 - 0.5 * r
                        }
                    })
                    .collect()
            })
            .collect();
        Self {
            classes,
            height,
            width,
            bands,
            sar_channels,
            signatures,
            sar_means,
            sar_looks: vec![4.0; classes],
            noise_level: 0.05,
            regions_per_class: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(invalid("synthetic scene needs at least two classes"));
        }
        if self.height == 0
            || self.width == 0
            || self.bands == 0
            || self.sar_channels == 0
            || self.regions_per_class == 0
        {
            return Err(invalid("synthetic scene dimensions must be positive"));
        }
        let rows_ok =
            |v: &[Vec<f64>], n: usize| v.len() == self.classes && v.iter().all(|r| r.len() == n);
        if !rows_ok(&self.signatures, self.bands)
            || !rows_ok(&self.sar_means, self.sar_channels)
            || self.sar_looks.len() != self.classes
        {
            return Err(Error::Shape(
                "per-class signature tables do not match the scene dimensions".into(),
            ));
        }
        for i in 0..self.classes {
            for j in i + 1..self.classes {
                if self.signatures[i] == self.signatures[j] {
                    return Err(invalid(format!(
                        "classes {} and {} share a signature",
                        i + 1,
                        j + 1
                    )));
                }
            }
        }
        if !(self.noise_level >= 0.0) {
            return Err(invalid("noise level must be nonnegative"));
        }
        Ok(())
    }
}

/// Voronoi label map; pixels nearly equidistant from two sites are left unlabeled.
fn paint_labels<R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Vec<u16> {
    let sites: Vec<(f64, f64, u16)> = (0..spec.classes * spec.regions_per_class)
        .map(|i| {
            let r = rng.random_range(0.0..spec.height as f64);
            let c = rng.random_range(0.0..spec.width as f64);
            (r, c, (i % spec.classes) as u16 + 1)
        })
        .collect();
    let mut labels = Vec::with_capacity(spec.height * spec.width);
    for r in 0..spec.height {
        for c in 0..spec.width {
            let mut nearest = vec![f64::INFINITY; spec.classes];
            for &(sr, sc, l) in &sites {
                let d = ((r as f64 - sr).powi(2) + (c as f64 - sc).powi(2)).sqrt();
                let k = l as usize - 1;
                nearest[k] = nearest[k].min(d);
            }
            let mut order: Vec<usize> = (0..spec.classes).collect();
            order.sort_by(|&a, &b| nearest[a].total_cmp(&nearest[b]));
            let (best, second) = (nearest[order[0]], nearest[order[1]]);
            let label = order[0] as u16 + 1;
            labels.push(if second - best < 0.5 { 0 } else { label });
        }
    }
    labels
}

pub fn generate_scene(spec: &SyntheticSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = paint_labels(spec, &mut rng);
    // make sure every class owns at least one pixel
    for k in 1..=spec.classes as u16 {
        if !labels.contains(&k) {
            let i = rng.random_range(0..labels.len());
            labels[i] = k;
        }
    }
    let (h, w, b, cs) = (spec.height, spec.width, spec.bands, spec.sar_channels);
    let noise: Tensor<f64> = sample_gaussian(
        &[h * w, b],
        GaussianParams::new(spec.noise_level.powi(2))?,
        &mut rng,
    );
    // unlabeled pixels take the first class's appearance
    let class_of = |i: usize| labels[i].saturating_sub(1) as usize;
    let mut spectral = Vec::with_capacity(h * w * b);
    for i in 0..h * w {
        let sig = &spec.signatures[class_of(i)];
        spectral.extend((0..b).map(|j| (sig[j] + noise.data()[i * b + j]) as f32));
    }
    let mut sar = Vec::with_capacity(h * w * cs);
    let speckle: Vec<Tensor<f64>> = spec
        .sar_looks
        .iter()
        .map(|&l| sample_speckle(&[h * w, cs], SpeckleParams::new(l, 1.0)?, &mut rng))
        .collect::<Result<_>>()?;
    for i in 0..h * w {
        let k = class_of(i);
        sar.extend((0..cs).map(|j| (spec.sar_means[k][j] * speckle[k].data()[i * cs + j]) as f32));
    }
    let header = SceneHeader {
        height: h,
        width: w,
        bands: b,
        sar_channels: cs,
        dtype: "float32".into(),
        class_names: (1..=spec.classes).map(|k| format!("class_{k}")).collect(),
    };
    Ok(Scene {
        header,
        spectral: Tensor::from_vec(&[h, w, b], spectral)?,
        sar: Tensor::from_vec(&[h, w, cs], sar)?,
        labels,
    })
}

/// Nearest-class-mean prediction on raw spectra, used as a separability check.
pub fn nearest_mean_predict(scene: &Scene, signatures: &[Vec<f64>]) -> Vec<Option<usize>> {
    let b = scene.header.bands;
    scene
        .spectral
        .data()
        .chunks(b)
        .zip(&scene.labels)
        .map(|(px, &l)| {
            (l != 0).then(|| {
                let dist = |s: &Vec<f64>| {
                    px.iter()
                        .zip(s)
                        .map(|(&x, &m)| (x as f64 - m).powi(2))
                        .sum::<f64>()
                };
                (0..signatures.len())
                    .min_by(|&i, &j| dist(&signatures[i]).total_cmp(&dist(&signatures[j])))
                    .unwrap()
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{load_scene, write_scene};

    #[test]
    fn round_trips_through_disk() {
        let spec = SyntheticSpec::standard(3, 48, 48, 16, 2);
        let scene = generate_scene(&spec, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_scene(dir.path(), &scene).unwrap();
        let back = load_scene(dir.path(), None).unwrap();
        assert_eq!(back, scene);
        assert_eq!(back.header.num_classes(), 3);
        for k in 1..=3u16 {
            assert!(scene.labels.contains(&k));
        }
        assert!(scene.labeled_count() < 48 * 48);
    }

    #[test]
    fn deterministic_under_seed() {
        let spec = SyntheticSpec::standard(3, 16, 16, 8, 2);
        assert_eq!(
            generate_scene(&spec, 1).unwrap(),
            generate_scene(&spec, 1).unwrap()
        );
        assert_ne!(
            generate_scene(&spec, 1).unwrap().spectral,
            generate_scene(&spec, 2).unwrap().spectral
        );
    }

    #[test]
    fn noiseless_classes_are_constant_and_separable() {
        let mut spec = SyntheticSpec::standard(4, 24, 24, 10, 2);
        spec.noise_level = 0.0;
        let scene = generate_scene(&spec, 3).unwrap();
        for (px, &l) in scene.spectral.data().chunks(10).zip(&scene.labels) {
            if l != 0 {
                let sig = &spec.signatures[l as usize - 1];
                assert!(px.iter().zip(sig).all(|(&x, &m)| x == m as f32));
            }
        }
        let pred = nearest_mean_predict(&scene, &spec.signatures);
        assert!(pred
            .iter()
            .zip(&scene.labels)
            .all(|(p, &l)| *p == (l != 0).then(|| l as usize - 1)));
    }

    #[test]
    fn class_means_recovered() {
        let spec = SyntheticSpec::standard(3, 48, 48, 16, 2);
        let scene = generate_scene(&spec, 5).unwrap();
        for k in 0..3 {
            let pix: Vec<&[f32]> = scene
                .spectral
                .data()
                .chunks(16)
                .zip(&scene.labels)
                .filter(|(_, &l)| l as usize == k + 1)
                .map(|(p, _)| p)
                .collect();
            let tol = 4.0 * spec.noise_level / (pix.len() as f64).sqrt();
            for j in 0..16 {
                let m = pix.iter().map(|p| p[j] as f64).sum::<f64>() / pix.len() as f64;
                assert!(
                    (m - spec.signatures[k][j]).abs() < tol,
                    "class {k} band {j}"
                );
            }
        }
    }

    #[test]
    fn rejects_duplicate_signatures() {
        let mut spec = SyntheticSpec::standard(3, 8, 8, 4, 1);
        spec.signatures[2] = spec.signatures[0].clone();
        assert!(generate_scene(&spec, 0).is_err());
        assert!(SyntheticSpec::standard(1, 8, 8, 4, 1).validate().is_err());
    }
}
