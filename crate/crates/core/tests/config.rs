use diffaudio::config::{Preset, RunConfig};
use diffaudio::encoder::ClsPosition;
use diffaudio::Error;

#[test]
fn full_scale_preset_values() {
    let c = RunConfig::preset(Preset::Paper);
    assert_eq!((c.encoder.d_model, c.encoder.heads, c.encoder.layers), (768, 8, 12));
    assert_eq!(c.encoder.lambda, 0.3);
    assert_eq!(c.encoder.cls_position, ClsPosition::Head);
    assert_eq!(c.objective.alpha, 0.5);
    assert_eq!(c.masking.clones, 16);
    assert_eq!(c.masking.finetune_ratio, 0.2);
    assert_eq!((c.optim.total_epochs, c.optim.batch_size), (20.0, 48));
    assert_eq!((c.optim.beta1, c.optim.beta2, c.optim.weight_decay), (0.9, 0.95, 0.05));
    assert_eq!((c.optim.peak_lr, c.optim.warmup_epochs), (5e-4, 2.5));
    assert_eq!((c.decoder.layers, c.decoder.kernel, c.decoder.groups), (6, 3, 16));
    assert_eq!((c.frontend.patch, c.frontend.fbank.n_mels), (16, 128));
}

#[test]
fn desk_preset_values() {
    let c = RunConfig::preset(Preset::Desk);
    assert_eq!((c.encoder.d_model, c.encoder.heads, c.encoder.layers), (64, 4, 2));
    assert_eq!(c.masking.clones, 4);
    assert_eq!((c.optim.total_epochs, c.optim.batch_size), (5.0, 4));
}

#[test]
fn json_round_trip_and_partial_configs() {
    let c = RunConfig::paper();
    assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    let partial = RunConfig::from_json(r#"{"seed": 9, "encoder": {"lambda": 0.1}}"#).unwrap();
    assert_eq!(partial.seed, 9);
    assert_eq!(partial.encoder.lambda, 0.1);
    assert_eq!(partial.encoder.d_model, 64);
}

#[test]
fn unknown_keys_are_rejected_at_every_level() {
    for text in [
        r#"{"sede": 1}"#,
        r#"{"encoder": {"dmodel": 64}}"#,
        r#"{"frontend": {"fbank": {"mels": 64}}}"#,
        r#"{"optim": {"lr": 0.1}}"#,
    ] {
        assert!(matches!(RunConfig::from_json(text), Err(Error::Config(_))), "{text}");
    }
}

#[test]
fn cross_field_constraints() {
    for text in [
        r#"{"encoder": {"d_model": 64, "heads": 5}}"#,
        r#"{"encoder": {"lambda": -0.1}}"#,
        r#"{"masking": {"ratio": 1.0}}"#,
        r#"{"masking": {"finetune_ratio": 1.2}}"#,
        r#"{"optim": {"warmup_epochs": 6.0, "total_epochs": 5.0}}"#,
        r#"{"decoder": {"groups": 7}}"#,
        r#"{"frontend": {"patch": 12}}"#,
        r#"{"objective": {"alpha": -1}}"#,
    ] {
        assert!(RunConfig::from_json(text).is_err(), "{text}");
    }
}

#[test]
fn load_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("run.json");
    std::fs::write(&p, RunConfig::desk().to_json()).unwrap();
    assert_eq!(RunConfig::load(&p).unwrap(), RunConfig::desk());
    assert!(matches!(RunConfig::load(dir.path().join("nope.json")), Err(Error::Io(_))));
}
