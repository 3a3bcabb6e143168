use psunet_core::config::*;
use psunet_core::sampler::GuidanceMode;
use psunet_core::{BackboneConfig, Error};

#[test]
fn empty_document_is_the_desk_preset() {
    let c = RunConfig::from_toml_str("", &[]).unwrap();
    assert_eq!(c, RunConfig::preset("desk").unwrap());
    assert_eq!(c.model, BackboneConfig::desk());
    assert_eq!(c.schedule.steps, 1000);
}

#[test]
fn documents_layer_over_their_preset() {
    let doc = r#"
preset = "full"
[model]
n_shared = 3
[train]
lr = 1e-4
[guidance]
w = 1.5
mode = "unidiffuser_free"
"#;
    let c = RunConfig::from_toml_str(doc, &[]).unwrap();
    assert_eq!(c.model.n_shared, 3);
    assert_eq!(c.model.embed_dim, 768);
    assert_eq!(c.train.lr, 1e-4);
    assert_eq!(c.train.batch_size, 64);
    assert_eq!(c.guidance.w, 1.5);
    assert_eq!(c.guidance.mode, GuidanceMode::UnidiffuserFree);
}

#[test]
fn overrides_win_over_the_document() {
    let doc = "[train]\nlr = 1e-4\n";
    let o = vec!["train.lr=3e-4".to_string(), "data.dir=/tmp/x".to_string(), "sample.steps=1000".to_string()];
    let c = RunConfig::from_toml_str(doc, &o).unwrap();
    assert_eq!(c.train.lr, 3e-4);
    assert_eq!(c.data.dir.as_deref(), Some(std::path::Path::new("/tmp/x")));
    assert_eq!(c.sample.steps, 1000);
    let c = RunConfig::from_toml_str("", &["preset=desk_uvit".into()]).unwrap();
    assert_eq!(c.model, BackboneConfig::desk_uvit());
}

#[test]
fn resolved_config_round_trips() {
    let c = RunConfig::from_toml_str("", &["train.seed=9".into()]).unwrap();
    let again = RunConfig::from_toml_str(&c.to_toml(), &[]).unwrap();
    assert_eq!(c, again);
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = |doc: &str, o: &[&str]| {
        let o: Vec<String> = o.iter().map(|s| s.to_string()).collect();
        matches!(RunConfig::from_toml_str(doc, &o), Err(Error::Config(_)))
    };
    assert!(bad("[model]\nwidth = 3\n", &[]));
    assert!(bad("[train]\nlr = -1.0\n", &[]));
    assert!(bad("", &["schedule.beta_end=2.0"]));
    assert!(bad("", &["sample.steps=0"]));
    assert!(bad("", &["guidance.w=-1"]));
    assert!(bad("", &["preset=huge"]));
    assert!(bad("", &["no_equals_sign"]));
    assert!(bad("", &["train.lr.x=1"]));
    assert!(bad("not toml [", &[]));
    assert!(bad("", &["model.n_heads=3"]));
}

#[test]
fn codec_must_match_vocabulary_size() {
    let c = RunConfig::from_toml_str("", &["model.vocab_size=30".into()]).unwrap();
    assert!(matches!(c.build_codec(), Err(Error::Config(_))));
    let c = RunConfig::from_toml_str("", &["codec.epochs=1".into()]).unwrap();
    let (v, t) = c.build_codec().unwrap();
    assert_eq!(v.len(), 23);
    assert_eq!(t.embed_dim(), 128);
}

#[test]
fn load_reads_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("run.toml");
    std::fs::write(&p, "[train]\nseed = 4\n").unwrap();
    assert_eq!(RunConfig::load(Some(&p), &[]).unwrap().train.seed, 4);
    assert!(RunConfig::load(Some(&dir.path().join("missing.toml")), &[]).is_err());
    assert_eq!(RunConfig::load(None, &[]).unwrap(), RunConfig::preset("desk").unwrap());
}
