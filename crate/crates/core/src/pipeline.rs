//! End-to-end commands: diffusion pre-training, classifier training,
//! evaluation and feature dumping. Each is a pure function of the config,
//! the input files and the seed.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::classifier::{Classifier, ClassifierConfig, ClassifierInputs};
use crate::config::RunConfig;
use crate::data_io::{load_scene, make_splits, PreparedScene, Scene, Split};
use crate::diffusion::{
    extract_features, pretrain_step, Denoiser, DenoiserConfig, NoiseSchedule, ScheduleConfig,
};
use crate::error::{Error, Result};
use crate::metrics::{
    compute_metrics, render_map, summarize, ConfusionMatrix, Metrics, RunRecord, Summary, PALETTE,
};
use crate::optim::Adam;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DENOISER_KIND: &str = "denoiser";
pub const CLASSIFIER_KIND: &str = "classifier";

/// Independent stream seed for `purpose` under run seed `seed` (splitmix64 finalizer).
pub fn derive_seed(seed: u64, purpose: u64) -> u64 {
    let mut z = seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const PURPOSE_DENOISER_INIT: u64 = 1;
const PURPOSE_PRETRAIN: u64 = 2;
const PURPOSE_CLASSIFIER_INIT: u64 = 3;
const PURPOSE_TRAIN: u64 = 4;
const PURPOSE_FEATURE_NOISE: u64 = 5;

#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
    pub denoiser: PathBuf,
    pub classifier: PathBuf,
}

impl RunPaths {
    pub fn new(cfg: &RunConfig, seed: u64) -> Self {
        let root = cfg.out_dir.join(format!("seed_{seed}"));
        Self {
            denoiser: root.join(DENOISER_KIND),
            classifier: root.join(CLASSIFIER_KIND),
            root,
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Checkpoint(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Scene, prepared tensors and the split for `seed`.
pub struct Workspace<S> {
    pub scene: Scene,
    pub prepared: PreparedScene<S>,
    pub split: Split,
}

impl<S: Scalar> Workspace<S> {
    pub fn load(cfg: &RunConfig, seed: u64) -> Result<Self> {
        let scene = load_scene(&cfg.scene, None)?;
        let prepared = PreparedScene::new(&scene)?;
        let h = &scene.header;
        let split = make_splits(
            &scene.labels,
            h.width,
            h.num_classes(),
            cfg.samples_per_class,
            seed,
            cfg.split,
        )?;
        Ok(Self {
            scene,
            prepared,
            split,
        })
    }

    pub fn labels_of(&self, pixels: &[usize]) -> Vec<usize> {
        pixels
            .iter()
            .map(|&p| self.scene.labels[p] as usize - 1)
            .collect()
    }
}

pub fn denoiser_config(cfg: &RunConfig, bands: usize, sar_channels: usize) -> DenoiserConfig {
    DenoiserConfig {
        base_channels: cfg.pretrain.base_channels,
        depth: cfg.pretrain.depth,
        time_embed_dim: cfg.pretrain.time_embed_dim,
        exchange_rate: cfg.pretrain.exchange_rate,
        spectral_channels: bands,
        sar_channels,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserMeta {
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub seed: u64,
    pub steps: usize,
    pub masked: bool,
    pub trained: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub checkpoint: PathBuf,
    pub weights_sha256: String,
    pub losses: Vec<f64>,
}

pub fn cmd_pretrain<S: Scalar>(cfg: &RunConfig, seed: u64) -> Result<PretrainReport> {
    cfg.validate()?;
    let ws = Workspace::<S>::load(cfg, seed)?;
    let paths = RunPaths::new(cfg, seed);
    let h = &ws.scene.header;
    let dcfg = denoiser_config(cfg, h.bands, h.sar_channels);
    let schedule = NoiseSchedule::build(&cfg.schedule)?;
    let mut model = Denoiser::<S>::new(
        dcfg.clone(),
        &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, PURPOSE_DENOISER_INIT)),
    )?;
    let mut opt = Adam::new(&model.store);
    opt.grad_clip = cfg.pretrain.grad_clip;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, PURPOSE_PRETRAIN));
    let steps = cfg.pretrain.steps;
    let pixels = h.pixels();
    let mut losses = Vec::with_capacity(steps);
    for i in 0..steps {
        let idx: Vec<usize> = (0..cfg.pretrain.batch_size)
            .map(|_| rng.random_range(0..pixels))
            .collect();
        let batch = ws.prepared.batch(&idx, cfg.patch_size)?;
        let epo = if steps > 1 {
            i as f64 / (steps - 1) as f64
        } else {
            1.0
        };
        match pretrain_step(
            &mut model,
            &mut opt,
            &batch,
            epo,
            &schedule,
            cfg.toggles.enable_mask,
            cfg.pretrain.learning_rate,
            &mut rng,
        ) {
            Ok(l) => losses.push(l),
            Err(e @ Error::NonFinite(_)) => {
                write_json(&paths.root.join("pretrain_trajectory.json"), &losses)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        }
        if (i + 1) % 50 == 0 {
            log::info!(
                "pretrain seed {seed} step {}/{steps} loss {:.5}",
                i + 1,
                losses[i]
            );
        }
    }
    model.trained = true;
    let meta = DenoiserMeta {
        denoiser: dcfg,
        schedule: cfg.schedule.clone(),
        seed,
        steps,
        masked: cfg.toggles.enable_mask,
        trained: true,
    };
    let digest = checkpoint::save(&paths.denoiser, DENOISER_KIND, &model.store, &meta)?;
    write_json(&paths.root.join("pretrain_log.json"), &losses)?;
    Ok(PretrainReport {
        checkpoint: paths.denoiser,
        weights_sha256: digest,
        losses,
    })
}

pub fn load_denoiser<S: Scalar>(dir: &Path) -> Result<(Denoiser<S>, NoiseSchedule, String)> {
    let manifest: checkpoint::Manifest<DenoiserMeta> = checkpoint::read_manifest(dir)?;
    let meta = manifest.meta;
    // weights are overwritten, so the init stream is irrelevant
    let mut model = Denoiser::<S>::new(meta.denoiser.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    checkpoint::load_into(dir, DENOISER_KIND, &mut model.store)?;
    model.trained = meta.trained;
    Ok((
        model,
        NoiseSchedule::build(&meta.schedule)?,
        manifest.weights_sha256,
    ))
}

/// Loaded feature extractor with its readout settings.
pub struct FeatureSource<S> {
    pub model: Denoiser<S>,
    pub schedule: NoiseSchedule,
    pub digest: String,
    pub t_star: usize,
    pub stage: usize,
    pub seed: u64,
}

impl<S: Scalar> FeatureSource<S> {
    pub fn load(cfg: &RunConfig, seed: u64) -> Result<Self> {
        let paths = RunPaths::new(cfg, seed);
        let (model, schedule, digest) = load_denoiser(&paths.denoiser)?;
        let stage = cfg.feature_stage();
        if stage >= model.config.depth {
            return Err(Error::Config(format!(
                "feature stage {stage} exceeds checkpoint depth {}",
                model.config.depth
            )));
        }
        Ok(Self {
            model,
            schedule,
            digest,
            t_star: cfg.features.t_star,
            stage,
            seed,
        })
    }

    pub fn channels(&self) -> usize {
        self.model.config.stage_width(self.stage)
    }

    /// Diffusion features `[N, C, P, P]` with per-pixel noise seeds.
    pub fn features(&self, ws: &Workspace<S>, pixels: &[usize], patch: usize) -> Result<Tensor<S>> {
        let batch = ws.prepared.batch(pixels, patch)?;
        let seeds: Vec<u64> = pixels
            .iter()
            .map(|&p| derive_seed(self.seed ^ p as u64, PURPOSE_FEATURE_NOISE))
            .collect();
        Ok(extract_features(
            &self.model,
            &batch,
            &self.schedule,
            self.t_star,
            self.stage,
            &seeds,
        )?
        .features)
    }
}

/// Network inputs for `pixels`, built in chunks of `chunk`.
pub fn build_inputs<S: Scalar>(
    ws: &Workspace<S>,
    source: Option<&FeatureSource<S>>,
    pixels: &[usize],
    patch: usize,
    chunk: usize,
) -> Result<ClassifierInputs<S>> {
    let (mut spec, mut sar, mut dif) = (Vec::new(), Vec::new(), Vec::new());
    for part in pixels.chunks(chunk.max(1)) {
        let b = ws.prepared.batch(part, patch)?;
        spec.push(b.spectral);
        sar.push(b.sar);
        if let Some(src) = source {
            dif.push(src.features(ws, part, patch)?);
        }
    }
    let cat = |v: &[Tensor<S>]| Tensor::concat(&v.iter().collect::<Vec<_>>(), 0);
    Ok(ClassifierInputs {
        spectral: cat(&spec)?,
        sar: cat(&sar)?,
        dif: if source.is_some() {
            Some(cat(&dif)?)
        } else {
            None
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMeta {
    pub classifier: ClassifierConfig,
    pub seed: u64,
    pub split_fingerprint: String,
    pub denoiser_sha256: Option<String>,
    pub t_star: usize,
    pub feature_stage: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    pub batch_accuracy: Vec<f64>,
    pub temperatures: Vec<Vec<f64>>,
    pub train_metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub checkpoint: PathBuf,
    pub weights_sha256: String,
    pub train_oa: f64,
    pub log: TrainLog,
}

pub fn classifier_config(cfg: &RunConfig, scene: &Scene, dif_channels: usize) -> ClassifierConfig {
    let h = &scene.header;
    ClassifierConfig {
        bands: h.bands,
        sar_channels: h.sar_channels,
        patch: cfg.patch_size,
        classes: h.num_classes(),
        dif_channels,
        toggles: cfg.toggles,
        embed: cfg.model.embedding_dim,
        ssm_state: cfg.model.ssm_state,
        ssm_bidirectional: cfg.model.ssm_bidirectional,
        readout: cfg.model.transformer_readout,
        mutual: cfg.mutual_config(),
    }
}

fn predict_all<S: Scalar>(
    model: &Classifier<S>,
    x: &ClassifierInputs<S>,
    chunk: usize,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(x.len());
    let idx: Vec<usize> = (0..x.len()).collect();
    for part in idx.chunks(chunk.max(1)) {
        out.extend(model.predict(&x.select(part)?)?);
    }
    Ok(out)
}

fn metrics_for(classes: usize, truth: &[usize], pred: &[usize]) -> Result<Metrics> {
    compute_metrics(&ConfusionMatrix::from_pairs(classes, truth, pred)?)
}

pub fn cmd_train<S: Scalar>(cfg: &RunConfig, seed: u64) -> Result<TrainReport> {
    cfg.validate()?;
    let ws = Workspace::<S>::load(cfg, seed)?;
    let paths = RunPaths::new(cfg, seed);
    let source = if cfg.toggles.needs_diffusion() {
        let s = FeatureSource::<S>::load(cfg, seed)?;
        if !s.model.trained {
            return Err(Error::Checkpoint(
                "denoiser checkpoint was never pre-trained".into(),
            ));
        }
        Some(s)
    } else {
        None
    };
    let dif_channels = source.as_ref().map_or(0, |s| s.channels());
    let ccfg = classifier_config(cfg, &ws.scene, dif_channels);
    let mut model = Classifier::<S>::new(ccfg.clone(), derive_seed(seed, PURPOSE_CLASSIFIER_INIT))?;
    let train_px = ws.split.train.clone();
    let labels = ws.labels_of(&train_px);
    let inputs = build_inputs(
        &ws,
        source.as_ref(),
        &train_px,
        cfg.patch_size,
        cfg.eval.batch_size,
    )?;
    let mut opt = Adam::new(&model.store);
    opt.grad_clip = cfg.train.grad_clip;
    let lr = cfg.train.schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, PURPOSE_TRAIN));
    let mut order: Vec<usize> = (0..train_px.len()).collect();
    let mut cursor = order.len();
    let bs = cfg.train.batch_size.min(order.len());
    let mut log = TrainLog {
        losses: Vec::new(),
        batch_accuracy: Vec::new(),
        temperatures: Vec::new(),
        train_metrics: Metrics {
            per_class: vec![],
            oa: 0.0,
            aa: 0.0,
            kappa: 0.0,
        },
    };
    for step in 0..cfg.train.steps {
        if cursor + bs > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + bs];
        cursor += bs;
        let x = inputs.select(idx)?;
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let stats = model.train_step(&mut opt, &x, &y, lr.lr_at(step))?;
        log.losses.push(stats.loss);
        log.batch_accuracy.push(stats.batch_accuracy);
        log.temperatures
            .push(stats.pairs.iter().map(|p| p.temperature).collect());
        if (step + 1) % 50 == 0 {
            log::info!(
                "train seed {seed} step {}/{} loss {:.4} acc {:.3}",
                step + 1,
                cfg.train.steps,
                stats.loss,
                stats.batch_accuracy
            );
        }
    }
    let pred = predict_all(&model, &inputs, cfg.eval.batch_size)?;
    log.train_metrics = metrics_for(ccfg.classes, &labels, &pred)?;
    let meta = ClassifierMeta {
        classifier: ccfg,
        seed,
        split_fingerprint: ws.split.fingerprint(),
        denoiser_sha256: source.as_ref().map(|s| s.digest.clone()),
        t_star: cfg.features.t_star,
        feature_stage: cfg.feature_stage(),
    };
    let digest = checkpoint::save(&paths.classifier, CLASSIFIER_KIND, &model.store, &meta)?;
    write_json(&paths.root.join("train_log.json"), &log)?;
    Ok(TrainReport {
        checkpoint: paths.classifier,
        weights_sha256: digest,
        train_oa: log.train_metrics.oa,
        log,
    })
}

/// Trained classifier and the feature source it was trained against.
pub struct TrainedModel<S> {
    pub classifier: Classifier<S>,
    pub source: Option<FeatureSource<S>>,
    pub meta: ClassifierMeta,
}

pub fn load_trained<S: Scalar>(
    cfg: &RunConfig,
    seed: u64,
    ws: &Workspace<S>,
) -> Result<TrainedModel<S>> {
    let paths = RunPaths::new(cfg, seed);
    let manifest: checkpoint::Manifest<ClassifierMeta> =
        checkpoint::read_manifest(&paths.classifier)?;
    let meta = manifest.meta;
    if meta.split_fingerprint != ws.split.fingerprint() {
        return Err(Error::Checkpoint(
            "evaluation split differs from the training split".into(),
        ));
    }
    let mut classifier = Classifier::<S>::new(meta.classifier.clone(), 0)?;
    checkpoint::load_into(&paths.classifier, CLASSIFIER_KIND, &mut classifier.store)?;
    let source = match &meta.denoiser_sha256 {
        Some(d) => {
            let mut s = FeatureSource::<S>::load(cfg, seed)?;
            if &s.digest != d {
                return Err(Error::Checkpoint(
                    "denoiser checkpoint changed since training".into(),
                ));
            }
            s.t_star = meta.t_star;
            s.stage = meta.feature_stage;
            Some(s)
        }
        None => None,
    };
    Ok(TrainedModel {
        classifier,
        source,
        meta,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: EvalSplit,
    pub evaluated: usize,
    pub record: RunRecord,
    pub map: Option<PathBuf>,
}

/// Every `k`-th element so that at most `cap` remain.
fn stride_cap(pixels: &[usize], cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(c) if c > 0 && pixels.len() > c => {
            let step = pixels.len().div_ceil(c);
            pixels.iter().step_by(step).copied().collect()
        }
        _ => pixels.to_vec(),
    }
}

pub fn cmd_eval<S: Scalar>(cfg: &RunConfig, seed: u64, split: EvalSplit) -> Result<EvalReport> {
    cfg.validate()?;
    let ws = Workspace::<S>::load(cfg, seed)?;
    let tm = load_trained(cfg, seed, &ws)?;
    let paths = RunPaths::new(cfg, seed);
    let pixels = match split {
        EvalSplit::Train => ws.split.train.clone(),
        EvalSplit::Test => stride_cap(&ws.split.test, cfg.eval.max_test),
    };
    if pixels.is_empty() {
        return Err(Error::InvalidArgument("no pixels to evaluate".into()));
    }
    let classes = tm.meta.classifier.classes;
    let mut pred = Vec::with_capacity(pixels.len());
    for part in pixels.chunks(cfg.eval.batch_size) {
        let x = build_inputs(
            &ws,
            tm.source.as_ref(),
            part,
            cfg.patch_size,
            cfg.eval.batch_size,
        )?;
        pred.extend(tm.classifier.predict(&x)?);
    }
    let metrics = metrics_for(classes, &ws.labels_of(&pixels), &pred)?;
    let record = RunRecord::new(seed, &metrics);
    let map = if cfg.eval.render_map {
        let h = &ws.scene.header;
        let mut full = vec![None; h.pixels()];
        for (&p, &c) in pixels.iter().zip(&pred) {
            full[p] = Some(c);
        }
        let rest: Vec<usize> = (0..h.pixels())
            .filter(|&i| ws.scene.labels[i] != 0 && full[i].is_none())
            .collect();
        for part in rest.chunks(cfg.eval.batch_size) {
            let x = build_inputs(
                &ws,
                tm.source.as_ref(),
                part,
                cfg.patch_size,
                cfg.eval.batch_size,
            )?;
            for (&p, c) in part.iter().zip(tm.classifier.predict(&x)?) {
                full[p] = Some(c);
            }
        }
        let path = paths.root.join("classification_map.png");
        fs::create_dir_all(&paths.root).map_err(|e| Error::io(&paths.root, e))?;
        render_map(&path, &full, h.height, h.width, classes, &PALETTE)?;
        Some(path)
    } else {
        None
    };
    let report = EvalReport {
        split,
        evaluated: pixels.len(),
        record,
        map,
    };
    let name = match split {
        EvalSplit::Train => "eval_train.json",
        EvalSplit::Test => "eval_test.json",
    };
    write_json(&paths.root.join(name), &report)?;
    Ok(report)
}

/// Evaluates every configured seed and writes `summary.json`.
pub fn cmd_eval_all<S: Scalar>(
    cfg: &RunConfig,
    split: EvalSplit,
) -> Result<(Vec<EvalReport>, Summary)> {
    let reports = cfg
        .seeds
        .iter()
        .map(|&s| cmd_eval::<S>(cfg, s, split))
        .collect::<Result<Vec<_>>>()?;
    let records: Vec<RunRecord> = reports.iter().map(|r| r.record.clone()).collect();
    let summary = summarize(&records)?;
    write_json(&cfg.out_dir.join("summary.json"), &summary)?;
    Ok((reports, summary))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpColumn {
    pub name: String,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpHeader {
    pub rows: usize,
    pub dtype: String,
    pub columns: Vec<DumpColumn>,
    pub pixels: Vec<usize>,
}

pub const FEATDUMP_FILE: &str = "features.bin";

/// Writes a JSON header line followed by little-endian f32 rows
/// `[label (-1 if unlabeled), cnn, trans, mamba, diffusion (spatial mean)]`.
pub fn cmd_featdump<S: Scalar>(
    cfg: &RunConfig,
    seed: u64,
    pixels: Option<Vec<usize>>,
) -> Result<PathBuf> {
    cfg.validate()?;
    let ws = Workspace::<S>::load(cfg, seed)?;
    let tm = load_trained(cfg, seed, &ws)?;
    let guided = tm.source.is_some();
    let source = match tm.source {
        Some(s) => s,
        None => FeatureSource::<S>::load(cfg, seed)?,
    };
    let pixels = pixels.unwrap_or_else(|| ws.split.train.clone());
    let npx = ws.scene.header.pixels();
    if let Some(&bad) = pixels.iter().find(|&&p| p >= npx) {
        return Err(Error::InvalidArgument(format!(
            "pixel index {bad} outside a {npx}-pixel scene"
        )));
    }
    let embed = tm.meta.classifier.embed;
    let t = tm.meta.classifier.toggles;
    let widths = [
        ("cnn", if t.enable_cnn { embed } else { 0 }),
        ("trans", if t.enable_trans { embed } else { 0 }),
        ("mamba", if t.enable_ssm { embed } else { 0 }),
        ("diffusion", source.channels()),
    ];
    let mut columns = vec![DumpColumn {
        name: "label".into(),
        width: 1,
    }];
    columns.extend(widths.iter().map(|&(n, w)| DumpColumn {
        name: n.into(),
        width: w,
    }));
    let header = DumpHeader {
        rows: pixels.len(),
        dtype: "float32".into(),
        columns,
        pixels: pixels.clone(),
    };
    let mut body = Vec::new();
    for part in pixels.chunks(cfg.eval.batch_size) {
        let dif = source.features(&ws, part, cfg.patch_size)?;
        let mut x = build_inputs(&ws, None, part, cfg.patch_size, cfg.eval.batch_size)?;
        if guided {
            x.dif = Some(dif.clone());
        }
        let emb = tm.classifier.embeddings(&x)?;
        let s = dif.shape().to_vec();
        let pooled = dif.reshape(&[s[0], s[1], s[2] * s[3]])?;
        for (r, &p) in part.iter().enumerate() {
            let label = ws.scene.labels[p] as f32 - 1.0;
            body.extend(label.to_le_bytes());
            for e in emb.iter().flatten() {
                let w = e.dim(1);
                for j in 0..w {
                    body.extend((e.data()[r * w + j].as_f64() as f32).to_le_bytes());
                }
            }
            for c in 0..s[1] {
                let m = (0..s[2] * s[3])
                    .map(|k| pooled.at(&[r, c, k]).as_f64())
                    .sum::<f64>()
                    / (s[2] * s[3]) as f64;
                body.extend((m as f32).to_le_bytes());
            }
        }
    }
    let paths = RunPaths::new(cfg, seed);
    fs::create_dir_all(&paths.root).map_err(|e| Error::io(&paths.root, e))?;
    let path = paths.root.join(FEATDUMP_FILE);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let line = serde_json::to_string(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    f.write_all(line.as_bytes())
        .and_then(|_| f.write_all(b"\n"))
        .and_then(|_| f.write_all(&body))
        .map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Parses a feature dump back into its header and rows.
pub fn read_featdump(path: &Path) -> Result<(DumpHeader, Vec<Vec<f32>>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, "missing header line"))?;
    let header: DumpHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::format(path, e.to_string()))?;
    let width: usize = header.columns.iter().map(|c| c.width).sum();
    let body = &bytes[nl + 1..];
    if body.len() != header.rows * width * 4 {
        return Err(Error::format(
            path,
            format!(
                "{} body bytes for {} rows of {width}",
                body.len(),
                header.rows
            ),
        ));
    }
    let vals: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let rows = if width == 0 {
        vec![Vec::new(); header.rows]
    } else {
        vals.chunks(width).map(<[f32]>::to_vec).collect()
    };
    Ok((header, rows))
}
