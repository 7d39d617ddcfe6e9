use neurossm::checkpoint::{self, ArtifactKind, ModelArtifact};
use neurossm::config::{ExperimentConfig, Stage};
use neurossm::model::{Network, NetworkConfig};
use neurossm::quant::{ptq, IntegerNetwork};
use neurossm::ExecPolicy;

fn calib(n: usize, len: usize) -> Vec<Vec<f32>> {
    (0..n).map(|i| (0..len).map(|t| ((i * 31 + t * 7) % 17) as f32 / 17.0).collect()).collect()
}

#[test]
fn quantized_pipeline_survives_checkpoints() {
    let cfg = NetworkConfig::tiny(1, 6, 4, 2, 10, 40);
    let net = Network::<f32>::init(&cfg, 5).unwrap();
    let q = ptq(&net, &Default::default(), &calib(256, 40), ExecPolicy::Sequential).unwrap();
    let inet = IntegerNetwork::extract(&q).unwrap();
    let dir = tempfile::tempdir().unwrap();

    for (name, art) in [
        ("f.ckpt", ModelArtifact::Float(net.clone())),
        ("q.ckpt", ModelArtifact::Quantized(q.clone())),
        ("i.ckpt", ModelArtifact::Integer(inet.clone())),
    ] {
        let p = dir.path().join(name);
        let digest = checkpoint::save(&p, &art, 5, Some("abc")).unwrap();
        let (back, info) = checkpoint::load(&p).unwrap();
        assert_eq!(info.digest, digest);
        assert_eq!(info.config_hash.as_deref(), Some("abc"));
        assert_eq!(back.kind(), art.kind());
        match (back, art) {
            (ModelArtifact::Float(a), ModelArtifact::Float(b)) => assert_eq!(a, b),
            (ModelArtifact::Quantized(a), ModelArtifact::Quantized(b)) => {
                // a restored network extracts to the same integer program
                assert_eq!(IntegerNetwork::extract(&a).unwrap(), IntegerNetwork::extract(&b).unwrap())
            }
            (ModelArtifact::Integer(a), ModelArtifact::Integer(b)) => assert_eq!(a, b),
            _ => unreachable!(),
        }
    }

    let (art, _) = checkpoint::load(&dir.path().join("i.ckpt")).unwrap();
    assert_eq!(art.kind(), ArtifactKind::Integer);
    let ModelArtifact::Integer(restored) = art else { unreachable!() };
    let u = &calib(1, 40)[0];
    assert_eq!(restored.classify(u).unwrap(), inet.classify(u).unwrap());
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let net = Network::<f32>::init(&NetworkConfig::tiny(1, 4, 2, 1, 10, 8), 0).unwrap();
    let mut bytes = checkpoint::encode(&ModelArtifact::Float(net), 0, None).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    assert!(checkpoint::decode(&bytes).is_err());
}

#[test]
fn stage_hashes_follow_their_inputs() {
    let base = ExperimentConfig::from_toml_str("", &[]).unwrap();
    let qaft_lr = ExperimentConfig::from_toml_str("", &["qaft.learning_rate=0.001".into()]).unwrap();
    let bits = ExperimentConfig::from_toml_str("", &["quant.weight_bits=6".into()]).unwrap();
    assert_eq!(base.stage_hash(Stage::Train), qaft_lr.stage_hash(Stage::Train));
    assert_eq!(base.stage_hash(Stage::Ptq), qaft_lr.stage_hash(Stage::Ptq));
    assert_ne!(base.stage_hash(Stage::Qaft), qaft_lr.stage_hash(Stage::Qaft));
    assert_eq!(base.stage_hash(Stage::Train), bits.stage_hash(Stage::Train));
    assert_ne!(base.stage_hash(Stage::Ptq), bits.stage_hash(Stage::Ptq));
}

#[test]
fn shipped_configs_are_valid() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["smnist_desk", "smnist", "psmnist", "scifar"] {
        let cfg = ExperimentConfig::load(Some(&root.join(format!("{name}.toml"))), &[]).unwrap();
        cfg.validate().unwrap();
    }
}
