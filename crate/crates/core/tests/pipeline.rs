use gems_core::config::profile;
use gems_core::encoder::lifecycle::MemoryStore;
use gems_core::numerics::checkpoint::{load_params, save_params};
use gems_core::numerics::Precision;
use gems_core::pipeline::{build_model, compress, evaluate_run, prepare, train_compressor, train_main, Prepared};
use gems_core::RunConfig;

fn toy() -> (RunConfig, Prepared) {
    let mut cfg = profile("toy").unwrap();
    cfg.data.users = 80;
    cfg.train.steps = [4, 8, 4, 4];
    let prep = prepare(&cfg).unwrap();
    (cfg, prep)
}

#[test]
fn reloaded_artifacts_reproduce_the_report() {
    let (cfg, prep) = toy();
    let dir = tempfile::tempdir().unwrap();
    let (mut store, model) = build_model(&cfg, &prep).unwrap();
    train_compressor(&cfg, &prep, &mut store, &model).unwrap();
    let memories = compress(&cfg, &prep, &store, &model).unwrap();
    train_main(&cfg, &prep, &mut store, &model, &memories).unwrap();
    let before = evaluate_run(&cfg, &prep, &store, &model, &memories, "run").unwrap();

    let manifest = cfg.manifest("train");
    save_params(&dir.path().join("model.ckpt"), &store, Precision::F64, &manifest).unwrap();
    memories.save(&dir.path().join("memories.bin")).unwrap();

    let (mut fresh, model2) = build_model(&cfg, &prep).unwrap();
    let file = load_params(&dir.path().join("model.ckpt"), &mut fresh).unwrap();
    assert_eq!(file.manifest, manifest);
    let mem2 = MemoryStore::load(&dir.path().join("memories.bin")).unwrap();
    assert_eq!(mem2, memories);
    let after = evaluate_run(&cfg, &prep, &fresh, &model2, &mem2, "run").unwrap();
    assert_eq!(before, after);
}

#[test]
fn f32_checkpoints_stay_close() {
    let (cfg, prep) = toy();
    let dir = tempfile::tempdir().unwrap();
    let (store, model) = build_model(&cfg, &prep).unwrap();
    let path = dir.path().join("m.ckpt");
    save_params(&path, &store, Precision::F32, "# m").unwrap();
    let (mut fresh, _) = build_model(&RunConfig { seed: cfg.seed + 1, ..cfg.clone() }, &prep).unwrap();
    load_params(&path, &mut fresh).unwrap();
    for id in model.decoder.codes.iter() {
        let (a, b) = (store.get(*id).data(), fresh.get(*id).data());
        assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-6 * x.abs().max(1.0)));
    }
}

#[test]
fn damaged_files_are_rejected() {
    let (cfg, prep) = toy();
    let dir = tempfile::tempdir().unwrap();
    let (store, model) = build_model(&cfg, &prep).unwrap();
    let memories = compress(&cfg, &prep, &store, &model).unwrap();
    let path = dir.path().join("memories.bin");
    memories.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(MemoryStore::load(&path).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    assert!(MemoryStore::load(&path).is_err());

    let ckpt = dir.path().join("model.ckpt");
    save_params(&ckpt, &store, Precision::F64, "# m").unwrap();
    let mut other = cfg.clone();
    other.model.d_h *= 2;
    let (mut wider, _) = build_model(&other, &prep).unwrap();
    assert!(load_params(&ckpt, &mut wider).is_err());
}

#[test]
fn training_lowers_the_next_token_loss() {
    let (mut cfg, prep) = toy();
    cfg.train.steps = [4, 60, 0, 0];
    let (mut store, model) = build_model(&cfg, &prep).unwrap();
    train_compressor(&cfg, &prep, &mut store, &model).unwrap();
    let memories = compress(&cfg, &prep, &store, &model).unwrap();
    let reports = train_main(&cfg, &prep, &mut store, &model, &memories).unwrap();
    let mean = |r: &[gems_core::training::LossReport]| r.iter().map(|x| x.ntp).sum::<f64>() / r.len() as f64;
    assert_eq!(reports.len(), 60);
    assert!(mean(&reports[50..]) < mean(&reports[..10]));
}
