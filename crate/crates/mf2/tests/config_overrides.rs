use std::fs;

use mf2::config::{parse_config, ConfigError, RunConfig};
use mf2_core::dfn::Tap;

fn set(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

#[test]
fn no_file_gives_defaults() {
    assert_eq!(parse_config(None, &[]).unwrap(), RunConfig::default());
}

#[test]
fn overrides_apply_after_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    fs::write(&path, "seed = 4\n[train]\nlr = 0.5\nepochs = 3\n").unwrap();
    let c = parse_config(Some(&path), &set(&["train.lr=0.01", "dfn.tap=\"cls\""])).unwrap();
    assert_eq!(c.train.lr, 0.01);
    assert_eq!(c.train.epochs, 3);
    assert_eq!(c.seed, 4);
    assert_eq!(c.dfn.tap, Tap::ClsLastLayer);
    assert!(c.to_string().contains("lr = 0.01"));
}

#[test]
fn unknown_keys_are_named() {
    assert_eq!(
        parse_config(None, &set(&["train.lrr=0.01"])).unwrap_err(),
        ConfigError::UnknownKey("train.lrr".into())
    );
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    fs::write(&path, "[dfn]\nrank = 4\n").unwrap();
    assert_eq!(
        parse_config(Some(&path), &[]).unwrap_err(),
        ConfigError::UnknownKey("dfn.rank".into())
    );
}

#[test]
fn wrong_types_and_missing_files_are_errors() {
    assert!(matches!(
        parse_config(None, &set(&["train.epochs=\"many\""])),
        Err(ConfigError::TypeError { key, .. }) if key == "train.epochs"
    ));
    let missing = std::path::Path::new("/nonexistent/run.toml");
    assert_eq!(
        parse_config(Some(missing), &[]).unwrap_err(),
        ConfigError::MissingFile(missing.to_path_buf())
    );
    assert!(matches!(
        parse_config(None, &set(&["train.lr"])),
        Err(ConfigError::BadOverride(_))
    ));
}
