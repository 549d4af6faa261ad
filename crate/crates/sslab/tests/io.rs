use std::fs;

use proptest::prelude::*;
use sslab::checkpoint::{load_checkpoint, load_tensor, save_checkpoint, save_tensor};
use sslab::core::codec::Checkpoint;
use sslab::core::data::{Image, SplitConfig, SplitKind};
use sslab::core::kv::KvMap;
use sslab::core::{ParamStore, Tensor};
use sslab::dataset::{ingest_external_images, load_qa, read_info, read_manifest, write_dataset};
use sslab::error::AppError;
use sslab::ppm::{decode_ppm, encode_ppm, grid};
use sslab::tables::{write_csv, AurocSummary, EbmRow, SweepRow};

fn image(w: usize, h: usize, seed: u8) -> Image {
    let data = (0..w * h * 3).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
    Image::from_rgb(w, h, data).unwrap()
}

proptest! {
    #[test]
    fn ppm_round_trip(w in 1usize..20, h in 1usize..20, seed in any::<u8>()) {
        let img = image(w, h, seed);
        prop_assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap(), img);
    }
}

#[test]
fn ppm_header_comments_gray_and_maxval() {
    let mut bytes = b"P5\n# a comment\n2 1\n# another\n15\n".to_vec();
    bytes.extend_from_slice(&[0, 15]);
    let img = decode_ppm(&bytes).unwrap();
    assert_eq!(img.pixel(0, 0), [0, 0, 0]);
    assert_eq!(img.pixel(1, 0), [255, 255, 255]);
}

#[test]
fn ppm_rejects_bad_input() {
    assert!(decode_ppm(b"P3\n1 1\n255\n0 0 0").is_err());
    assert!(decode_ppm(b"P6\n2 2\n255\n\x00\x00").is_err());
    assert!(decode_ppm(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00").is_err());
}

#[test]
fn grid_layout() {
    let imgs: Vec<Image> = (0..5).map(|k| image(4, 3, k)).collect();
    let g = grid(&imgs, 2).unwrap();
    assert_eq!((g.width, g.height), (2 * 5 + 1, 3 * 4 + 1));
    assert_eq!(g.pixel(0, 0), [0, 0, 0]);
    assert_eq!(g.pixel(1, 1), imgs[0].pixel(0, 0));
    assert_eq!(g.pixel(6, 5), imgs[3].pixel(0, 0));
    assert!(grid(&[], 2).is_err());
}

#[test]
fn checkpoint_file_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let mut store = ParamStore::new();
    store.add("enc.w", Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-7, 9.0]).unwrap());
    store.add("cls.b", Tensor::new(vec![3], vec![0.25, 0.5, 0.75]).unwrap());
    let mut config = KvMap::new();
    config.set("model.kind", "vqa");
    let ck = Checkpoint::new(config.clone(), store);
    let path = tmp.path().join("m.ssck");
    save_checkpoint(&path, &ck).unwrap();
    assert_eq!(&fs::read(&path).unwrap()[..4], b"SSCK");
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ck);
    back.check_architecture(&config).unwrap();

    let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let tp = tmp.path().join("t.sstf");
    save_tensor(&tp, &t).unwrap();
    assert_eq!(&fs::read(&tp).unwrap()[..4], b"SSTF");
    assert_eq!(load_tensor(&tp).unwrap(), t);
}

#[test]
fn missing_checkpoint_is_a_missing_dependency() {
    let err = load_checkpoint(std::path::Path::new("/nonexistent/x.ssck")).unwrap_err();
    assert!(matches!(err, AppError::Missing(_)));
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn corrupt_checkpoint_is_a_format_error() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.ssck");
    fs::write(&path, b"SSCK\x01\x00\x00\x00garbage").unwrap();
    assert!(matches!(load_checkpoint(&path).unwrap_err(), AppError::Format(_)));
}

#[test]
fn dataset_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = SplitConfig {
        scale: 0.01,
        seed: 3,
        ..SplitConfig::default()
    };
    let info = write_dataset(tmp.path(), &cfg).unwrap();
    assert_eq!(read_info(tmp.path()).unwrap(), info);
    for kind in SplitKind::ALL {
        let recs = read_manifest(tmp.path(), kind).unwrap();
        assert_eq!(recs.len(), cfg.count(kind));
        assert_eq!(info.counts[kind.name()], recs.len());
        for r in &recs {
            assert_eq!(r.split, kind.name());
            assert!(tmp.path().join(&r.image).exists());
            let spec = r.spec().unwrap();
            assert_eq!(spec.color.name(), r.color);
            assert_eq!(kind == SplitKind::Pretrain, r.question.is_none());
        }
    }
    let qa = load_qa(tmp.path(), SplitKind::Train).unwrap();
    assert_eq!(qa.images.shape(), &[cfg.count(SplitKind::Train), 3, 64, 64]);
    assert!(load_qa(tmp.path(), SplitKind::Pretrain).is_err());
}

#[test]
fn missing_manifest_is_a_missing_dependency() {
    let tmp = tempfile::tempdir().unwrap();
    let err = read_manifest(tmp.path(), SplitKind::Train).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn external_images_skip_unreadable_files() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("a.ppm"), encode_ppm(&image(80, 40, 1))).unwrap();
    fs::write(tmp.path().join("b.ppm"), b"not an image").unwrap();
    let imgs = ingest_external_images(tmp.path()).unwrap();
    assert_eq!(imgs.len(), 1);
    assert_eq!((imgs[0].width, imgs[0].height), (64, 64));

    let empty = tempfile::tempdir().unwrap();
    assert!(ingest_external_images(empty.path()).is_err());
}

#[test]
fn csv_headers_match_formats() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("h.csv");
    write_csv(
        &p,
        &[EbmRow {
            step: 1,
            loss: 0.5,
            mean_e_real: 1.0,
            mean_e_fake: -1.0,
            buffer_size: 32,
        }],
    )
    .unwrap();
    let text = fs::read_to_string(&p).unwrap();
    assert!(text.starts_with("step,loss,mean_E_real,mean_E_fake,buffer_size\n"), "{text}");

    let p = tmp.path().join("s.csv");
    write_csv(
        &p,
        &[SweepRow {
            fraction: 0.5,
            seed: 2,
            test_accuracy: f64::NAN,
            val_accuracy: 0.25,
        }],
    )
    .unwrap();
    assert_eq!(fs::read_to_string(&p).unwrap(), "fraction,seed,test_accuracy,val_accuracy\n0.5,2,NaN,0.25\n");
}

#[test]
fn auroc_summary_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let mut s = AurocSummary::default();
    s.push("ebm", &[("noise".into(), 1.0), ("cone".into(), 0.5)]).unwrap();
    s.push("cl", &[("noise".into(), 0.75), ("cone".into(), 0.25)]).unwrap();
    assert!(s.push("bad", &[("noise".into(), 0.5)]).is_err());
    let p = tmp.path().join("a.csv");
    s.write(&p).unwrap();
    assert_eq!(fs::read_to_string(&p).unwrap(), "model,noise,cone\nebm,1,0.5\ncl,0.75,0.25\n");
}
