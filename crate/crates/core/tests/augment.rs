//! Augmentation statistics and the training paths that consume them.

use std::path::Path;

use t2i_forge::config::RunConfig;
use t2i_forge::cropaug::sample_crop;
use t2i_forge::cutmix::{curate_in_memory, CutMixPattern};
use t2i_forge::data::{build_dataset, CaptionChoice};
use t2i_forge::manifest::ImageSource;
use t2i_forge::schedule::GateParams;
use t2i_forge::trainer::{read_checkpoint, train, write_checkpoint, CheckpointMeta, Denoiser};
use t2i_forge::{toy, Error};

#[test]
fn crop_sides_average_three_quarters() {
    let n = 100_000u64;
    let (mut sw, mut sh) = (0.0, 0.0);
    for seed in 0..n {
        let c = sample_crop(seed);
        sw += c.width();
        sh += c.height();
    }
    let (mw, mh) = (sw / n as f64, sh / n as f64);
    assert!((mw - 0.75).abs() <= 0.01, "mean width {mw}");
    assert!((mh - 0.75).abs() <= 0.01, "mean height {mh}");
}

fn small_run() -> RunConfig {
    RunConfig {
        steps: 20,
        batch: 8,
        hidden: 16,
        lr: 0.05,
        tau: 10,
        horizon: 50,
        seed: 2,
        ..RunConfig::default()
    }
}

#[test]
fn crop_branch_trains_and_counts_augmented_slots() {
    let (m, images) = toy::toy_dataset(4, 1).unwrap();
    let run = small_run();
    let data = build_dataset(&m, Some(&images), Path::new("."), ImageSource::Original, CaptionChoice::Aio, run.shape())
        .unwrap();
    let mut cfg = run.train_config();
    cfg.gate = GateParams { tau: 0, aug_prob: 0.0 };
    cfg.crop_prob = 0.5;
    cfg.patch_size = 2;
    let (_, reports) = train(&cfg, data.shape(), &data, None).unwrap();
    assert_eq!(reports.len(), 20);
    let n_aug: usize = reports.iter().map(|r| r.n_aug).sum();
    assert!(n_aug > 0 && n_aug < 20 * 8, "{n_aug}");
    assert!(reports.iter().all(|r| r.loss.is_finite()));
}

#[test]
fn crop_and_cutmix_are_exclusive() {
    let (m, images) = toy::toy_dataset(4, 1).unwrap();
    let run = small_run();
    let original =
        build_dataset(&m, Some(&images), Path::new("."), ImageSource::Original, CaptionChoice::Aio, run.shape()).unwrap();
    let mut cfg = run.train_config();
    cfg.crop_prob = 0.5;
    let err = train(&cfg, original.shape(), &original, Some(&original)).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err:?}");
}

#[test]
fn cutmix_branch_trains_on_curated_images() {
    let (mut m, images) = toy::toy_dataset(4, 1).unwrap();
    let items = curate_in_memory(&m, &images, CutMixPattern::All, 8, 5).unwrap();
    let mut all_images = images.clone();
    for item in items {
        // Stub TA captions stand in for a captioning service.
        let caption = t2i_forge::captioner::stub_caption(&item.record, 0).unwrap();
        m.captions.push(t2i_forge::manifest::CaptionRecord {
            image_id: item.record.id.clone(),
            text: caption,
            kind: t2i_forge::manifest::CaptionKind::CutmixTa,
            generator: "stub".into(),
        });
        all_images.insert(item.record.id.clone(), item.image);
        m.records.push(item.record);
    }
    let run = small_run();
    let shape = run.shape();
    let original =
        build_dataset(&m, Some(&all_images), Path::new("."), ImageSource::Original, CaptionChoice::Aio, shape).unwrap();
    let cutmix =
        build_dataset(&m, Some(&all_images), Path::new("."), ImageSource::Cutmix, CaptionChoice::Ta, shape).unwrap();
    let cfg = run.train_config();
    let (model, reports) = train(&cfg, shape, &original, Some(&cutmix)).unwrap();
    assert!(reports.iter().map(|r| r.n_aug).sum::<usize>() > 0);
    for r in &reports {
        assert!(r.n_aug <= r.batch);
    }

    let mut buf = Vec::new();
    let meta = CheckpointMeta { shape: *model.shape(), config: cfg.clone() };
    write_checkpoint(&mut buf, &meta, &model).unwrap();
    let (meta_back, back): (CheckpointMeta, Denoiser) = read_checkpoint(buf.as_slice()).unwrap();
    assert_eq!(meta_back.shape, *model.shape());
    for (a, b) in back.params().iter().zip(model.params()) {
        assert_eq!(*a, *b as f32 as f64);
    }
    assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
}
