use std::fs;

use selfvalnet::harness::weights;
use selfvalnet::netmodel::{Model, ModelKind, NetConfig};
use selfvalnet::scenesim::{checksums, read_dataset, synth_sample, write_dataset, DiskSplit, SampleSource, SimConfig, SimError, Split, SynthSplit};

fn small() -> SimConfig {
    SimConfig { resolution: (32, 32), clip_len: 3, size: (6, 9), objects: (2, 4), ..SimConfig::default() }
}

#[test]
fn dataset_roundtrip_and_corruption() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small();
    let src = SynthSplit::new(cfg.clone(), Split::Train, 4).unwrap();
    let m = write_dataset(&src, &cfg, tmp.path()).unwrap();
    assert_eq!(m.count, 4);
    let back = read_dataset(tmp.path()).unwrap();
    for (i, s) in back.iter().enumerate() {
        assert_eq!(*s, src.get(i).unwrap());
    }
    let disk = DiskSplit::open(tmp.path()).unwrap();
    assert_eq!(disk.len(), 4);
    assert!(matches!(disk.get(9), Err(SimError::OutOfRange { .. })));

    let again = tempfile::tempdir().unwrap();
    assert_eq!(checksums(&write_dataset(&src, &cfg, again.path()).unwrap()), checksums(&m));

    let blob = tmp.path().join(&m.samples[1].frames.file);
    let mut bytes = fs::read(&blob).unwrap();
    bytes[17] ^= 1;
    fs::write(&blob, &bytes).unwrap();
    assert!(matches!(disk.get(1), Err(SimError::Checksum { sample: 1, .. })));
    fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
    assert!(matches!(disk.get(1), Err(SimError::Truncated { .. })));
    fs::remove_file(&blob).unwrap();
    assert!(disk.get(1).is_err());
    assert!(disk.get(0).is_ok());
}

#[test]
fn manifest_version_is_checked() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small();
    let src = SynthSplit::new(cfg.clone(), Split::Test, 1).unwrap();
    write_dataset(&src, &cfg, tmp.path()).unwrap();
    let path = tmp.path().join("manifest.json");
    let text = fs::read_to_string(&path).unwrap().replacen("\"version\": 1", "\"version\": 99", 1);
    fs::write(&path, text).unwrap();
    assert!(matches!(DiskSplit::open(tmp.path()), Err(SimError::Version { found: 99, .. })));
    assert!(matches!(DiskSplit::open(&tmp.path().join("absent")), Err(SimError::MissingFile(_))));
}

#[test]
fn weights_roundtrip_preserves_predictions() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = NetConfig::toy(5);
    let sample = synth_sample(&SimConfig::default(), 11).unwrap();
    for kind in [ModelKind::Mrnet, ModelKind::Joint, ModelKind::Cascade] {
        let model = Model::new(cfg.clone(), kind, 3).unwrap();
        let path = tmp.path().join(format!("{kind}.svnw"));
        weights::save(&model, &path).unwrap();
        let back = weights::load(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.forward(&sample).unwrap(), model.forward(&sample).unwrap());
    }
    let bytes = fs::read(tmp.path().join("mrnet.svnw")).unwrap();
    assert!(weights::decode(&bytes[..bytes.len() / 2]).is_err());
    assert!(weights::decode(b"nope").is_err());
}
