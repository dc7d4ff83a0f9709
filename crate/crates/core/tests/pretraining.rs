use bdgf::config::RunConfig;
use bdgf::data_io::PreparedScene;
use bdgf::diffusion::{pretrain_step, Denoiser, NoiseSchedule};
use bdgf::optim::Adam;
use bdgf::pipeline::{cmd_pretrain, denoiser_config};
use bdgf::synthetic::{generate_scene, SyntheticSpec};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn losses(use_masks: bool, seed: u64) -> Vec<f64> {
    let spec = SyntheticSpec::standard(3, 32, 32, 16, 2);
    let scene = generate_scene(&spec, 5).unwrap();
    let prepared = PreparedScene::<f32>::new(&scene).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels: Vec<usize> = (0..32 * 32).collect();
    pixels.shuffle(&mut rng);
    let batch = prepared.batch(&pixels[..64], 9).unwrap();
    let cfg = RunConfig::default();
    let sched = NoiseSchedule::build(&cfg.schedule).unwrap();
    let mut model = Denoiser::<f32>::new(denoiser_config(&cfg, 16, 2), &mut rng).unwrap();
    let mut opt = Adam::new(&model.store);
    opt.grad_clip = cfg.pretrain.grad_clip;
    (0..200)
        .map(|i| {
            let epo = i as f64 / 199.0;
            pretrain_step(
                &mut model,
                &mut opt,
                &batch,
                epo,
                &sched,
                use_masks,
                cfg.pretrain.learning_rate,
                &mut rng,
            )
            .unwrap()
        })
        .collect()
}

fn drop_ratio(l: &[f64]) -> f64 {
    let head = l[..10].iter().sum::<f64>() / 10.0;
    let tail = l[l.len() - 10..].iter().sum::<f64>() / 10.0;
    1.0 - tail / head
}

#[test]
fn loss_on_a_fixed_set_falls_by_thirty_percent() {
    let l = losses(true, 1);
    assert!(l.iter().all(|v| v.is_finite() && *v > 0.0));
    let d = drop_ratio(&l);
    assert!(d >= 0.3, "loss fell by {:.1}%", 100.0 * d);
}

#[test]
fn same_seed_same_trajectory() {
    let spec = SyntheticSpec::standard(2, 12, 12, 6, 1);
    let dir = tempfile::tempdir().unwrap();
    bdgf::data_io::write_scene(
        &dir.path().join("scene"),
        &generate_scene(&spec, 2).unwrap(),
    )
    .unwrap();
    let mut cfg = RunConfig {
        scene: dir.path().join("scene"),
        out_dir: dir.path().join("a"),
        patch_size: 5,
        ..RunConfig::default()
    };
    cfg.pretrain.steps = 5;
    cfg.pretrain.batch_size = 4;
    let a = cmd_pretrain::<f32>(&cfg, 7).unwrap();
    cfg.out_dir = dir.path().join("b");
    let b = cmd_pretrain::<f32>(&cfg, 7).unwrap();
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.weights_sha256, b.weights_sha256);
    assert_eq!(
        std::fs::read(a.checkpoint.join("weights.bin")).unwrap(),
        std::fs::read(b.checkpoint.join("weights.bin")).unwrap()
    );
}

#[test]
fn scene_pretraining_loss_trends_down() {
    let spec = SyntheticSpec::standard(3, 32, 32, 16, 2);
    let dir = tempfile::tempdir().unwrap();
    bdgf::data_io::write_scene(
        &dir.path().join("scene"),
        &generate_scene(&spec, 4).unwrap(),
    )
    .unwrap();
    let mut cfg = RunConfig {
        scene: dir.path().join("scene"),
        out_dir: dir.path().join("runs"),
        ..RunConfig::default()
    };
    cfg.pretrain.steps = 200;
    let report = cmd_pretrain::<f32>(&cfg, 0).unwrap();
    assert!(report.checkpoint.join("manifest.json").exists());
    let d = drop_ratio(&report.losses);
    assert!(d >= 0.3, "loss fell by {:.1}%", 100.0 * d);
}
