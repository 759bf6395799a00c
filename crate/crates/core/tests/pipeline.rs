use std::path::Path;

use scn_core::checkpoint::load_checkpoint;
use scn_core::data::{save_image, synthetic_corpus, Corpus};
use scn_core::eval::{eval_run, evaluate, EvalData, EvalOptions};
use scn_core::model::{ModelConfig, Task, Variant};
use scn_core::resample::ResamplerKind;
use scn_core::train::{best_path, train, TrainConfig, TrainData};
use scn_core::Ratio;

fn sr_config(n_scales: usize) -> ModelConfig {
    ModelConfig {
        task: Task::SuperResolution { factor: 2 },
        n_scales,
        ratio: Ratio::HALF,
        n_blocks: 2,
        width: 8,
        width_mult: 2,
        k: 1,
        resampler: ResamplerKind::Bilinear,
        variant: Variant::ScnShared,
        in_channels: 3,
    }
}

fn write_corpus(dir: &Path, corpus: &Corpus) {
    std::fs::create_dir_all(dir).unwrap();
    for (name, img) in &corpus.images {
        save_image(img, dir.join(name)).unwrap();
    }
}

#[test]
fn evaluation_reproduces_final_validation_metric() {
    let dir = tempfile::tempdir().unwrap();
    let (train_dir, val_dir) = (dir.path().join("train"), dir.path().join("val"));
    write_corpus(&train_dir, &synthetic_corpus(2, 32, 32, 3, 1));
    write_corpus(&val_dir, &synthetic_corpus(2, 32, 32, 3, 2));
    let cfg = sr_config(3);
    let tcfg = TrainConfig {
        epochs: 2,
        patches_per_image: 16,
        patch: 10,
        batch: 4,
        seed: 4,
        train_dir: Some(train_dir),
        val_dir: Some(val_dir.clone()),
        ..TrainConfig::default()
    };
    let data = TrainData::load(&cfg, &tcfg).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let outcome = train(&cfg, &tcfg, &data, Some(&ckpt)).unwrap();
    let logged = outcome.log.last().unwrap().val_psnr;

    let setup = EvalData {
        dir: val_dir,
        noise_sigma: 25.0,
        pairs_dir: None,
        seed: 0,
    };
    let report = eval_run(&ckpt, &setup, &EvalOptions::default()).unwrap();
    assert_eq!(report.mean_psnr, logged);
    assert_eq!((report.eval_n_scales, report.eval_ratio), (3, Ratio::HALF));

    let (best, _) = load_checkpoint(best_path(&ckpt)).unwrap();
    let best_report = evaluate(&cfg, &best, &data.val, &EvalOptions::default()).unwrap();
    assert_eq!(Some(best_report.mean_psnr), outcome.best_val_psnr);
    assert!(outcome.log.iter().all(|e| e.val_psnr <= best_report.mean_psnr));

    let single = eval_run(
        &ckpt,
        &setup,
        &EvalOptions {
            n_scales: Some(1),
            ..EvalOptions::default()
        },
    )
    .unwrap();
    assert_eq!(single.eval_n_scales, 1);
    assert!(single.mean_psnr.is_finite());
}

#[test]
fn self_ensemble_does_not_hurt_a_trained_model() {
    let cfg = sr_config(2);
    let tcfg = TrainConfig {
        epochs: 1,
        patches_per_image: 200,
        patch: 10,
        batch: 8,
        seed: 2,
        ..TrainConfig::default()
    };
    let train_set = synthetic_corpus(2, 40, 40, 3, 5);
    let held_out = synthetic_corpus(1, 40, 40, 3, 6);
    let data = TrainData::from_corpus(&cfg, &tcfg, &train_set, &held_out).unwrap();
    let weights = train(&cfg, &tcfg, &data, None).unwrap().weights;
    let single = evaluate(&cfg, &weights, &data.val, &EvalOptions::default()).unwrap();
    let ensemble = evaluate(
        &cfg,
        &weights,
        &data.val,
        &EvalOptions {
            self_ensemble: true,
            ..EvalOptions::default()
        },
    )
    .unwrap();
    assert!(ensemble.self_ensemble);
    assert!(
        ensemble.mean_psnr >= single.mean_psnr - 0.05,
        "ensemble {} vs single {}",
        ensemble.mean_psnr,
        single.mean_psnr
    );
}

#[test]
fn denoising_trains_on_grayscale_with_online_noise() {
    let cfg = ModelConfig {
        in_channels: 1,
        ..ModelConfig {
            task: Task::Denoise,
            ..sr_config(2)
        }
    };
    let tcfg = TrainConfig {
        epochs: 1,
        patches_per_image: 40,
        patch: 12,
        batch: 4,
        noise_sigma: 15.0,
        ..TrainConfig::default()
    };
    let corpus = synthetic_corpus(2, 24, 24, 3, 8);
    let gray = Corpus {
        images: corpus
            .images
            .into_iter()
            .map(|(p, t)| (p, scn_core::data::to_channels(&t, 1).unwrap()))
            .collect(),
    };
    let data = TrainData::from_corpus(&cfg, &tcfg, &gray, &Corpus::default()).unwrap();
    assert_eq!(data.online_noise, Some(15.0));
    let outcome = train(&cfg, &tcfg, &data, None).unwrap();
    assert_eq!(outcome.steps, 20);
    assert!(outcome.log[0].train_loss.is_finite());
}
