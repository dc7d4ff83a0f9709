//! Scene directories, patch extraction, per-class splits and normalization.
//!
//! A scene directory holds `spectral.bin` and `sar.bin` (little-endian f32,
//! `[height, width, channels]` row-major), `labels.bin` (little-endian u16,
//! 0 = unlabeled, 1..=C = classes) and `header.json`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SPECTRAL_FILE: &str = "spectral.bin";
pub const SAR_FILE: &str = "sar.bin";
pub const LABELS_FILE: &str = "labels.bin";
pub const HEADER_FILE: &str = "header.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneHeader {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub sar_channels: usize,
    #[serde(default = "default_dtype")]
    pub dtype: String,
    pub class_names: Vec<String>,
}

fn default_dtype() -> String {
    "float32".into()
}

impl SceneHeader {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Expected scene layout plus the patch/split protocol applied to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneDescriptor {
    pub name: String,
    pub spectral_shape: (usize, usize, usize),
    pub sar_shape: (usize, usize, usize),
    pub class_names: Vec<String>,
    pub patch_size: usize,
    pub samples_per_class: usize,
}

impl SceneDescriptor {
    pub fn validate(&self) -> Result<()> {
        let (h, w, _) = self.spectral_shape;
        let (hs, ws, _) = self.sar_shape;
        if (h, w) != (hs, ws) {
            return Err(Error::Shape(format!("spectral {h}x{w} vs SAR {hs}x{ws}")));
        }
        validate_patch_size(self.patch_size)?;
        if self.class_names.len() < 2 {
            return Err(invalid("a scene needs at least two classes"));
        }
        Ok(())
    }

    pub fn from_header(
        name: &str,
        h: &SceneHeader,
        patch_size: usize,
        samples_per_class: usize,
    ) -> Self {
        Self {
            name: name.into(),
            spectral_shape: (h.height, h.width, h.bands),
            sar_shape: (h.height, h.width, h.sar_channels),
            class_names: h.class_names.clone(),
            patch_size,
            samples_per_class,
        }
    }
}

pub fn validate_patch_size(p: usize) -> Result<()> {
    if p < 3 || p % 2 == 0 {
        return Err(invalid(format!("patch size {p} must be odd and >= 3")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub header: SceneHeader,
    /// `[height, width, bands]`
    pub spectral: Tensor<f32>,
    /// `[height, width, sar_channels]`
    pub sar: Tensor<f32>,
    /// Row-major, 0 = unlabeled.
    pub labels: Vec<u16>,
}

impl Scene {
    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_f32(path: &Path, expect: usize) -> Result<Vec<f32>> {
    let bytes = read_bytes(path)?;
    if bytes.len() != expect * 4 {
        return Err(Error::format(
            path,
            format!("expected {} bytes, found {}", expect * 4, bytes.len()),
        ));
    }
    Ok(bytes.chunks_exact(4).map(f32::read_le).collect())
}

pub fn read_header(dir: &Path) -> Result<SceneHeader> {
    let path = dir.join(HEADER_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let header: SceneHeader =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if header.dtype != "float32" {
        return Err(Error::format(
            &path,
            format!("unsupported dtype {}", header.dtype),
        ));
    }
    Ok(header)
}

/// Reads a scene, checking it against `descriptor` when one is given.
pub fn load_scene(dir: &Path, descriptor: Option<&SceneDescriptor>) -> Result<Scene> {
    let header = read_header(dir)?;
    if let Some(d) = descriptor {
        d.validate()?;
        let got = (
            (header.height, header.width, header.bands),
            (header.height, header.width, header.sar_channels),
        );
        if got != (d.spectral_shape, d.sar_shape) || header.class_names.len() != d.class_names.len()
        {
            return Err(Error::Shape(format!(
                "scene {} has spectral {:?}, SAR {:?}, {} classes; expected {:?}, {:?}, {}",
                dir.display(),
                got.0,
                got.1,
                header.class_names.len(),
                d.spectral_shape,
                d.sar_shape,
                d.class_names.len()
            )));
        }
    }
    let (h, w) = (header.height, header.width);
    let spectral = read_f32(&dir.join(SPECTRAL_FILE), h * w * header.bands)?;
    let sar = read_f32(&dir.join(SAR_FILE), h * w * header.sar_channels)?;
    let lpath = dir.join(LABELS_FILE);
    let lbytes = read_bytes(&lpath)?;
    if lbytes.len() != h * w * 2 {
        return Err(Error::format(
            &lpath,
            format!("expected {} bytes, found {}", h * w * 2, lbytes.len()),
        ));
    }
    let labels: Vec<u16> = lbytes
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect();
    if let Some(&bad) = labels
        .iter()
        .find(|&&l| l as usize > header.class_names.len())
    {
        return Err(Error::format(
            &lpath,
            format!(
                "label {bad} exceeds class count {}",
                header.class_names.len()
            ),
        ));
    }
    Ok(Scene {
        spectral: Tensor::from_vec(&[h, w, header.bands], spectral)?,
        sar: Tensor::from_vec(&[h, w, header.sar_channels], sar)?,
        labels,
        header,
    })
}

pub fn write_scene(dir: &Path, scene: &Scene) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, bytes: Vec<u8>| {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    };
    let f32_bytes = |t: &Tensor<f32>| {
        t.data()
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect::<Vec<u8>>()
    };
    write(SPECTRAL_FILE, f32_bytes(&scene.spectral))?;
    write(SAR_FILE, f32_bytes(&scene.sar))?;
    write(
        LABELS_FILE,
        scene.labels.iter().flat_map(|v| v.to_le_bytes()).collect(),
    )?;
    let header = serde_json::to_string_pretty(&scene.header).expect("header serializes");
    write(HEADER_FILE, header.into_bytes())
}

/// Reflect index into `[0, n)` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m >= n as isize { period - m } else { m }) as usize
}

/// `[P, P, C]` window centered on `center` of an `[H, W, C]` cube, reflected at borders.
pub fn extract_patch<S: Scalar>(
    cube: &Tensor<S>,
    center: (usize, usize),
    patch_size: usize,
) -> Result<Tensor<S>> {
    validate_patch_size(patch_size)?;
    if cube.rank() != 3 {
        return Err(Error::Shape(format!(
            "cube must be [H, W, C], got {:?}",
            cube.shape()
        )));
    }
    let (h, w, c) = (cube.dim(0), cube.dim(1), cube.dim(2));
    if center.0 >= h || center.1 >= w {
        return Err(invalid(format!("center {center:?} outside {h}x{w}")));
    }
    let r = (patch_size / 2) as isize;
    let mut out = Vec::with_capacity(patch_size * patch_size * c);
    for dy in -r..=r {
        let y = reflect(center.0 as isize + dy, h);
        for dx in -r..=r {
            let x = reflect(center.1 as isize + dx, w);
            let base = (y * w + x) * c;
            out.extend_from_slice(&cube.data()[base..base + c]);
        }
    }
    Tensor::from_vec(&[patch_size, patch_size, c], out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SplitMode {
    /// Uniform random pixels per class.
    #[default]
    Random,
    /// Training pixels drawn from whole square blocks; test pixels come only
    /// from blocks holding no training pixel.
    SpatialBlocks { block: usize },
}

/// Pixel indices (row-major) of the train and test sets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Stable digest used to detect evaluation against a different split.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (tag, list) in [(b'r', &self.train), (b'e', &self.test)] {
            h.update([tag]);
            for &i in list {
                h.update((i as u64).to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Class-stratified split: up to `samples_per_class` training pixels per class.
pub fn make_splits(
    labels: &[u16],
    width: usize,
    num_classes: usize,
    samples_per_class: usize,
    seed: u64,
    mode: SplitMode,
) -> Result<Split> {
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l != 0 {
            let c = l as usize - 1;
            if c >= num_classes {
                return Err(invalid(format!(
                    "label {l} exceeds class count {num_classes}"
                )));
            }
            by_class[c].push(i);
        }
    }
    if let Some(c) = by_class.iter().position(Vec::is_empty) {
        return Err(invalid(format!("class {} has no labeled pixels", c + 1)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    match mode {
        SplitMode::Random => {
            for (c, pix) in by_class.iter_mut().enumerate() {
                if pix.len() < samples_per_class {
                    log::warn!(
                        "class {} has {} pixels, fewer than {samples_per_class}; using all",
                        c + 1,
                        pix.len()
                    );
                }
                pix.shuffle(&mut rng);
                train.extend_from_slice(&pix[..samples_per_class.min(pix.len())]);
            }
            let mut is_train = vec![false; labels.len()];
            train.iter().for_each(|&i| is_train[i] = true);
            let test = (0..labels.len())
                .filter(|&i| labels[i] != 0 && !is_train[i])
                .collect();
            Ok(Split { train, test })
        }
        SplitMode::SpatialBlocks { block } => {
            if block == 0 {
                return Err(invalid("spatial block size must be positive"));
            }
            let block_of = |i: usize| ((i / width) / block, (i % width) / block);
            let mut used = std::collections::HashSet::new();
            for (c, pix) in by_class.iter().enumerate() {
                let mut blocks: Vec<(usize, usize)> = pix.iter().map(|&i| block_of(i)).collect();
                blocks.sort_unstable();
                blocks.dedup();
                blocks.shuffle(&mut rng);
                let mut taken = 0;
                for b in blocks {
                    if taken >= samples_per_class {
                        break;
                    }
                    used.insert(b);
                    for &i in pix.iter().filter(|&&i| block_of(i) == b) {
                        if taken < samples_per_class {
                            train.push(i);
                            taken += 1;
                        }
                    }
                }
                if taken < samples_per_class {
                    log::warn!(
                        "class {} has {taken} pixels, fewer than {samples_per_class}; using all",
                        c + 1
                    );
                }
            }
            let test = (0..labels.len())
                .filter(|&i| labels[i] != 0 && !used.contains(&block_of(i)))
                .collect();
            Ok(Split { train, test })
        }
    }
}

/// Per-band min-max scaling of the last axis to [0, 1]; constant bands map to 0.
pub fn normalize<S: Scalar>(cube: &Tensor<S>) -> Result<Tensor<S>> {
    if !cube.all_finite() {
        return Err(Error::NonFinite("cube contains NaN or infinity".into()));
    }
    let c = *cube
        .shape()
        .last()
        .ok_or_else(|| Error::Shape("normalize of rank-0".into()))?;
    let mut lo = vec![S::infinity(); c];
    let mut hi = vec![S::neg_infinity(); c];
    for px in cube.data().chunks(c) {
        for (b, &v) in px.iter().enumerate() {
            lo[b] = lo[b].min(v);
            hi[b] = hi[b].max(v);
        }
    }
    let mut out = cube.clone();
    for px in out.data_mut().chunks_mut(c) {
        for (b, v) in px.iter_mut().enumerate() {
            let range = hi[b] - lo[b];
            *v = if range > S::zero() {
                (*v - lo[b]) / range
            } else {
                S::zero()
            };
        }
    }
    Ok(out)
}

/// Co-registered patches around one pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalSample<S> {
    /// `[P, P, bands]`
    pub spectral_patch: Tensor<S>,
    /// `[P, P, sar_channels]`
    pub sar_patch: Tensor<S>,
    /// 0-based class index.
    pub label: Option<usize>,
    pub center: (usize, usize),
}

/// Channel-first batch consumed by the networks.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<S> {
    /// `[N, bands, P, P]`
    pub spectral: Tensor<S>,
    /// `[N, sar_channels, P, P]`
    pub sar: Tensor<S>,
    /// 0-based class per row; empty when unlabeled.
    pub labels: Vec<usize>,
}

impl<S: Scalar> Batch<S> {
    pub fn len(&self) -> usize {
        self.spectral.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn from_samples(samples: &[MultimodalSample<S>]) -> Result<Self> {
        let to_chw = |t: &Tensor<S>| t.permute(&[2, 0, 1]);
        let spectral = Tensor::stack(
            &samples
                .iter()
                .map(|s| to_chw(&s.spectral_patch))
                .collect::<Vec<_>>(),
        )?;
        let sar = Tensor::stack(
            &samples
                .iter()
                .map(|s| to_chw(&s.sar_patch))
                .collect::<Vec<_>>(),
        )?;
        let labels = if samples.iter().all(|s| s.label.is_some()) {
            samples.iter().map(|s| s.label.unwrap()).collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            spectral,
            sar,
            labels,
        })
    }

    /// Rows `idx` of this batch, in order.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let pick =
            |t: &Tensor<S>| Tensor::stack(&idx.iter().map(|&i| t.index0(i)).collect::<Vec<_>>());
        Ok(Self {
            spectral: pick(&self.spectral)?,
            sar: pick(&self.sar)?,
            labels: if self.labels.is_empty() {
                Vec::new()
            } else {
                idx.iter().map(|&i| self.labels[i]).collect()
            },
        })
    }
}

/// Scene with both cubes already normalized to [0, 1].
#[derive(Clone, Debug)]
pub struct PreparedScene<S> {
    pub header: SceneHeader,
    pub spectral: Tensor<S>,
    pub sar: Tensor<S>,
    pub labels: Vec<u16>,
}

impl<S: Scalar> PreparedScene<S> {
    pub fn new(scene: &Scene) -> Result<Self> {
        Ok(Self {
            header: scene.header.clone(),
            spectral: normalize(&scene.spectral.cast())?,
            sar: normalize(&scene.sar.cast())?,
            labels: scene.labels.clone(),
        })
    }

    pub fn sample(&self, pixel: usize, patch_size: usize) -> Result<MultimodalSample<S>> {
        let center = (pixel / self.header.width, pixel % self.header.width);
        let l = self.labels[pixel];
        Ok(MultimodalSample {
            spectral_patch: extract_patch(&self.spectral, center, patch_size)?,
            sar_patch: extract_patch(&self.sar, center, patch_size)?,
            label: (l != 0).then(|| l as usize - 1),
            center,
        })
    }

    pub fn batch(&self, pixels: &[usize], patch_size: usize) -> Result<Batch<S>> {
        let samples = pixels
            .iter()
            .map(|&p| self.sample(p, patch_size))
            .collect::<Result<Vec<_>>>()?;
        Batch::from_samples(&samples)
    }
}

/// Reads a C- or Fortran-ordered `.npy` array of any real or integer dtype as f64.
pub fn read_npy(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    use npyz::{NpyFile, Order};
    let bytes = read_bytes(path)?;
    let npy = NpyFile::new(&bytes[..]).map_err(|e| Error::format(path, e.to_string()))?;
    let shape: Vec<usize> = npy.shape().iter().map(|&d| d as usize).collect();
    let order = npy.order();
    let fail = |e: std::io::Error| Error::format(path, e.to_string());
    let mut data: Vec<f64> = match npy.try_data::<f64>() {
        Ok(r) => r.collect::<std::io::Result<Vec<_>>>().map_err(fail)?,
        Err(npy) => match npy.try_data::<f32>() {
            Ok(r) => r
                .collect::<std::io::Result<Vec<_>>>()
                .map_err(fail)?
                .into_iter()
                .map(f64::from)
                .collect(),
            Err(npy) => match npy.try_data::<i64>() {
                Ok(r) => r
                    .collect::<std::io::Result<Vec<_>>>()
                    .map_err(fail)?
                    .into_iter()
                    .map(|v| v as f64)
                    .collect(),
                Err(npy) => match npy.try_data::<i32>() {
                    Ok(r) => r
                        .collect::<std::io::Result<Vec<_>>>()
                        .map_err(fail)?
                        .into_iter()
                        .map(f64::from)
                        .collect(),
                    Err(npy) => match npy.try_data::<u16>() {
                        Ok(r) => r
                            .collect::<std::io::Result<Vec<_>>>()
                            .map_err(fail)?
                            .into_iter()
                            .map(f64::from)
                            .collect(),
                        Err(npy) => match npy.try_data::<u8>() {
                            Ok(r) => r
                                .collect::<std::io::Result<Vec<_>>>()
                                .map_err(fail)?
                                .into_iter()
                                .map(f64::from)
                                .collect(),
                            Err(npy) => {
                                return Err(Error::format(
                                    path,
                                    format!("unsupported dtype {:?}", npy.dtype()),
                                ))
                            }
                        },
                    },
                },
            },
        },
    };
    if order == Order::Fortran && shape.len() > 1 {
        let t = Tensor::<f64>::from_vec(&shape.iter().rev().copied().collect::<Vec<_>>(), data)?;
        let perm: Vec<usize> = (0..shape.len()).rev().collect();
        data = t.permute(&perm).into_data();
    }
    Ok((shape, data))
}

/// Converts `.npy` arrays (spectral `[H, W, B]`, SAR `[H, W, C]` or `[H, W]`,
/// labels `[H, W]`) into a scene directory.
pub fn import_npy(
    spectral: &Path,
    sar: &Path,
    labels: &Path,
    class_names: Vec<String>,
    out: &Path,
) -> Result<Scene> {
    let (ss, sd) = read_npy(spectral)?;
    let (rs, rd) = read_npy(sar)?;
    let (ls, ld) = read_npy(labels)?;
    if ss.len() != 3 {
        return Err(Error::format(
            spectral,
            format!("expected [H, W, B], got {ss:?}"),
        ));
    }
    let rs = match rs.len() {
        2 => vec![rs[0], rs[1], 1],
        3 => rs,
        _ => {
            return Err(Error::format(
                sar,
                format!("expected [H, W, C], got {rs:?}"),
            ))
        }
    };
    if rs[..2] != ss[..2] || ls != ss[..2] {
        return Err(Error::Shape(format!(
            "spectral {ss:?}, SAR {rs:?}, labels {ls:?} disagree spatially"
        )));
    }
    let max_label = ld.iter().fold(0.0f64, |m, &v| m.max(v));
    let class_names = if class_names.is_empty() {
        (1..=max_label as usize)
            .map(|c| format!("class{c}"))
            .collect()
    } else {
        class_names
    };
    if ld
        .iter()
        .any(|&v| v < 0.0 || v.fract() != 0.0 || v as usize > class_names.len())
    {
        return Err(Error::format(
            labels,
            "labels must be integers in 0..=class count",
        ));
    }
    let scene = Scene {
        header: SceneHeader {
            height: ss[0],
            width: ss[1],
            bands: ss[2],
            sar_channels: rs[2],
            dtype: default_dtype(),
            class_names,
        },
        spectral: Tensor::from_vec(&ss, sd.into_iter().map(|v| v as f32).collect())?,
        sar: Tensor::from_vec(&rs, rd.into_iter().map(|v| v as f32).collect())?,
        labels: ld.into_iter().map(|v| v as u16).collect(),
    };
    write_scene(out, &scene)?;
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> Tensor<f64> {
        Tensor::from_vec(&[h, w, c], (0..h * w * c).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }

    #[test]
    fn corner_patch_reflects() {
        let cube = ramp(12, 12, 2);
        let p = extract_patch(&cube, (0, 0), 9).unwrap();
        assert_eq!(p.shape(), &[9, 9, 2]);
        // (-4,-4) reflects to (4,4)
        assert_eq!(p.at(&[0, 0, 1]), cube.at(&[4, 4, 1]));
        assert_eq!(p.at(&[4, 4, 0]), cube.at(&[0, 0, 0]));
    }

    #[test]
    fn interior_patch_is_raw_window() {
        let cube = ramp(12, 12, 3);
        let p = extract_patch(&cube, (6, 5), 9).unwrap();
        for y in 0..9 {
            for x in 0..9 {
                for c in 0..3 {
                    assert_eq!(p.at(&[y, x, c]), cube.at(&[2 + y, 1 + x, c]));
                }
            }
        }
        assert!(extract_patch(&cube, (12, 0), 9).is_err());
        assert!(extract_patch(&cube, (1, 1), 4).is_err());
    }

    #[test]
    fn split_partitions_labels() {
        let labels: Vec<u16> = (0..100).map(|i| (i % 4) as u16).collect();
        let s = make_splits(&labels, 10, 3, 5, 9, SplitMode::Random).unwrap();
        assert_eq!(s.train.len(), 15);
        let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
        all.sort_unstable();
        let labeled: Vec<usize> = (0..100).filter(|&i| labels[i] != 0).collect();
        assert_eq!(all, labeled);
        assert_eq!(
            s,
            make_splits(&labels, 10, 3, 5, 9, SplitMode::Random).unwrap()
        );
        assert_ne!(
            s.fingerprint(),
            make_splits(&labels, 10, 3, 5, 10, SplitMode::Random)
                .unwrap()
                .fingerprint()
        );
    }

    #[test]
    fn split_rejects_empty_class() {
        let labels = vec![1u16, 1, 0, 2];
        assert!(make_splits(&labels, 2, 3, 1, 0, SplitMode::Random).is_err());
    }

    #[test]
    fn spatial_split_keeps_blocks_apart() {
        let labels: Vec<u16> = (0..400)
            .map(|i| if (i % 20) < 10 { 1 } else { 2 })
            .collect();
        let s = make_splits(&labels, 20, 2, 8, 3, SplitMode::SpatialBlocks { block: 4 }).unwrap();
        assert_eq!(s.train.len(), 16);
        let block = |i: usize| ((i / 20) / 4, (i % 20) / 4);
        for t in &s.test {
            assert!(s.train.iter().all(|&r| block(r) != block(*t)));
        }
    }

    #[test]
    fn normalize_bands() {
        let cube =
            Tensor::<f64>::from_vec(&[3, 1, 2], vec![10.0, 7.0, 15.0, 7.0, 20.0, 7.0]).unwrap();
        let n = normalize(&cube).unwrap();
        assert_eq!(n.data(), &[0.0, 0.0, 0.5, 0.0, 1.0, 0.0]);
        let bad = Tensor::<f64>::from_vec(&[1, 1, 1], vec![f64::NAN]).unwrap();
        assert!(normalize(&bad).is_err());
    }

    #[test]
    fn scene_round_trip_and_descriptor_check() {
        let dir = tempfile::tempdir().unwrap();
        let scene = Scene {
            header: SceneHeader {
                height: 4,
                width: 3,
                bands: 2,
                sar_channels: 1,
                dtype: "float32".into(),
                class_names: vec!["a".into(), "b".into()],
            },
            spectral: ramp(4, 3, 2).cast(),
            sar: ramp(4, 3, 1).cast(),
            labels: vec![0, 1, 2, 0, 0, 0, 1, 1, 2, 0, 0, 0],
        };
        write_scene(dir.path(), &scene).unwrap();
        assert_eq!(load_scene(dir.path(), None).unwrap(), scene);
        let mut d = SceneDescriptor::from_header("x", &scene.header, 3, 1);
        assert!(load_scene(dir.path(), Some(&d)).is_ok());
        d.spectral_shape.2 = 5;
        d.sar_shape.2 = 1;
        assert!(matches!(
            load_scene(dir.path(), Some(&d)),
            Err(Error::Shape(_))
        ));
        fs::write(dir.path().join(SAR_FILE), [0u8; 3]).unwrap();
        assert!(matches!(
            load_scene(dir.path(), None),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn npy_import() {
        use npyz::WriterBuilder;
        let dir = tempfile::tempdir().unwrap();
        let write = |name: &str, shape: &[u64], data: Vec<f32>| {
            let p = dir.path().join(name);
            let mut buf = Vec::new();
            {
                let mut w = npyz::WriteOptions::<f32>::new()
                    .default_dtype()
                    .shape(shape)
                    .writer(&mut buf)
                    .begin_nd()
                    .unwrap();
                w.extend(data).unwrap();
                w.finish().unwrap();
            }
            fs::write(&p, buf).unwrap();
            p
        };
        let s = write("s.npy", &[2, 2, 3], (0..12).map(|v| v as f32).collect());
        let r = write("r.npy", &[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let l = write("l.npy", &[2, 2], vec![0.0, 1.0, 2.0, 1.0]);
        let out = dir.path().join("scene");
        let scene = import_npy(&s, &r, &l, Vec::new(), &out).unwrap();
        assert_eq!(scene.header.class_names.len(), 2);
        assert_eq!(scene.header.sar_channels, 1);
        assert_eq!(load_scene(&out, None).unwrap(), scene);
    }
}
