//! Confusion-matrix metrics, multi-run summaries and classification-map rendering.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// `counts[truth * classes + prediction]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::Shape(format!(
                "{} counts for {classes} classes",
                counts.len()
            )));
        }
        Ok(Self { classes, counts })
    }

    pub fn from_pairs(classes: usize, truth: &[usize], pred: &[usize]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::Shape(format!(
                "{} labels vs {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        let mut cm = Self::new(classes);
        for (&t, &p) in truth.iter().zip(pred) {
            cm.add(t, p)?;
        }
        Ok(cm)
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.classes || pred >= self.classes {
            return Err(invalid(format!(
                "class pair ({truth}, {pred}) outside {} classes",
                self.classes
            )));
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Recall per class; `None` for classes without test samples.
    pub per_class: Vec<Option<f64>>,
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
}

/// OA, AA (mean recall over classes present) and Cohen's kappa.
pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let c = cm.classes;
    let total = cm.total();
    if total == 0 {
        return Err(invalid("confusion matrix is empty"));
    }
    let n = total as f64;
    let rows: Vec<u64> = (0..c).map(|i| (0..c).map(|j| cm.get(i, j)).sum()).collect();
    let cols: Vec<u64> = (0..c).map(|j| (0..c).map(|i| cm.get(i, j)).sum()).collect();
    let diag: u64 = (0..c).map(|i| cm.get(i, i)).sum();
    let per_class: Vec<Option<f64>> = (0..c)
        .map(|i| (rows[i] > 0).then(|| cm.get(i, i) as f64 / rows[i] as f64))
        .collect();
    for (i, _) in per_class.iter().enumerate().filter(|(_, v)| v.is_none()) {
        log::warn!("class {} has no samples; excluded from AA", i + 1);
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let aa = present.iter().sum::<f64>() / present.len() as f64;
    let oa = diag as f64 / n;
    let pe = rows
        .iter()
        .zip(&cols)
        .map(|(&r, &k)| r as f64 * k as f64)
        .sum::<f64>()
        / (n * n);
    // both raters put everything in one class: agreement is total
    let kappa = if (1.0 - pe).abs() < f64::EPSILON {
        1.0
    } else {
        (oa - pe) / (1.0 - pe)
    };
    Ok(Metrics {
        per_class,
        oa,
        aa,
        kappa,
    })
}

/// One line of the metrics output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    pub per_class: Vec<Option<f64>>,
}

impl RunRecord {
    pub fn new(seed: u64, m: &Metrics) -> Self {
        Self {
            seed,
            oa: m.oa,
            aa: m.aa,
            kappa: m.kappa,
            per_class: m.per_class.clone(),
        }
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(invalid("mean of no values"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

/// Fractions rendered as percentages, e.g. `93.57±0.51`.
pub fn format_mean_std(values: &[f64]) -> Result<String> {
    let (m, s) = mean_std(values)?;
    Ok(format!("{:.2}±{:.2}", 100.0 * m, 100.0 * s))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub runs: usize,
    pub oa: String,
    pub aa: String,
    pub kappa: String,
    pub per_class: Vec<Option<String>>,
}

pub fn summarize(records: &[RunRecord]) -> Result<Summary> {
    let col =
        |f: &dyn Fn(&RunRecord) -> f64| format_mean_std(&records.iter().map(f).collect::<Vec<_>>());
    let classes = records.first().map_or(0, |r| r.per_class.len());
    let per_class = (0..classes)
        .map(|c| {
            let v: Vec<f64> = records
                .iter()
                .filter_map(|r| r.per_class.get(c).copied().flatten())
                .collect();
            if v.is_empty() {
                Ok(None)
            } else {
                format_mean_std(&v).map(Some)
            }
        })
        .collect::<Result<_>>()?;
    Ok(Summary {
        runs: records.len(),
        oa: col(&|r| r.oa)?,
        aa: col(&|r| r.aa)?,
        kappa: col(&|r| r.kappa)?,
        per_class,
    })
}

/// Class colors by index (class 1 first).
pub const PALETTE: [[u8; 3]; 15] = [
    [0xFF, 0x00, 0x00],
    [0x00, 0xFF, 0x00],
    [0x00, 0x00, 0xFF],
    [0xFF, 0xFF, 0x00],
    [0x00, 0xFF, 0xFF],
    [0xFF, 0x00, 0xFF],
    [0xC0, 0xC0, 0xC0],
    [0x80, 0x80, 0x80],
    [0x80, 0x00, 0x00],
    [0x80, 0x80, 0x00],
    [0x00, 0x80, 0x00],
    [0x80, 0x00, 0x80],
    [0x00, 0x80, 0x80],
    [0x00, 0x00, 0xFF],
    [0xFF, 0xA5, 0x00],
];

/// RGB raster for per-pixel predictions (`None` renders black).
pub fn map_pixels(
    predictions: &[Option<usize>],
    classes: usize,
    palette: &[[u8; 3]],
) -> Result<Vec<u8>> {
    if palette.len() < classes {
        return Err(invalid(format!(
            "palette has {} colors for {classes} classes",
            palette.len()
        )));
    }
    let mut rgb = Vec::with_capacity(predictions.len() * 3);
    for p in predictions {
        match p {
            Some(c) if *c < classes => rgb.extend_from_slice(&palette[*c]),
            Some(c) => return Err(invalid(format!("prediction {c} outside {classes} classes"))),
            None => rgb.extend_from_slice(&[0, 0, 0]),
        }
    }
    Ok(rgb)
}

pub fn render_map(
    path: &Path,
    predictions: &[Option<usize>],
    height: usize,
    width: usize,
    classes: usize,
    palette: &[[u8; 3]],
) -> Result<()> {
    if predictions.len() != height * width {
        return Err(Error::Shape(format!(
            "{} predictions for a {height}x{width} map",
            predictions.len()
        )));
    }
    let rgb = map_pixels(predictions, classes, palette)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::format(path, e.to_string());
    let mut w = enc.write_header().map_err(png_err)?;
    w.write_image_data(&rgb).map_err(png_err)?;
    w.finish().map_err(png_err)
}
