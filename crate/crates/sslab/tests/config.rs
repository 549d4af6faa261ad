use std::fs;

use sslab::config::RunConfig;
use sslab::error::AppError;

fn flags(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

#[test]
fn no_file_no_flags_gives_defaults() {
    assert_eq!(RunConfig::parse(None, &[]).unwrap(), RunConfig::defaults());
}

#[test]
fn flags_override_file_over_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("c.txt");
    fs::write(&file, "# comment\nseed = 5\ntrain.epochs=7\n").unwrap();
    let cfg = RunConfig::parse(Some(&file), &flags(&["seed=9"])).unwrap();
    assert_eq!(cfg.seed().unwrap(), 9);
    assert_eq!(cfg.vqa_train().unwrap().epochs, 7);
    assert_eq!(cfg.contrastive().unwrap().epochs, RunConfig::defaults().contrastive().unwrap().epochs);
}

#[test]
fn echo_round_trips() {
    let cfg = RunConfig::parse(None, &flags(&["seed=3", "data.scale=0.2", "augment.hue=0.5", "langevin.noise=0.01"])).unwrap();
    let back = RunConfig::from_text(&cfg.echo()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.echo(), cfg.echo());
}

#[test]
fn errors_name_the_key() {
    for (flag, key) in [
        ("bogus.key=1", "bogus.key"),
        ("train.epochs=abc", "train.epochs"),
        ("train.fraction=1.5", "train.fraction"),
        ("sweep.fractions=0.5,0", "sweep.fractions"),
        ("sweep.seeds=0", "sweep.seeds"),
        ("ebm.reinit_prob=2", "ebm.reinit_prob"),
    ] {
        let err = RunConfig::parse(None, &flags(&[flag])).unwrap_err();
        assert!(matches!(err, AppError::Usage(_)), "{flag}: {err}");
        assert!(err.to_string().contains(key), "{flag}: {err}");
        assert_eq!(err.exit_code(), 1);
    }
}

#[test]
fn malformed_flag_is_usage_error() {
    let err = RunConfig::parse(None, &flags(&["novalue"])).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn core_validation_errors_surface() {
    assert!(RunConfig::parse(None, &flags(&["langevin.detach=false"])).is_err());
    assert!(RunConfig::parse(None, &flags(&["cl.temperature=0"])).is_err());
    assert!(RunConfig::parse(None, &flags(&["data.scheme=nope"])).is_err());
}

#[test]
fn sweep_defaults() {
    let s = RunConfig::defaults().sweep().unwrap();
    assert_eq!(s.fractions, vec![1.0, 0.5, 0.2, 0.1, 0.02]);
    assert_eq!(s.seeds, 3);
}
