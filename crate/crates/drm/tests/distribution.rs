use lic_core::codec::{LicConfig, LicModel, TrainConfig};
use lic_core::image::synthetic_corpus;
use lic_core::quantizer::{calibrate, QuantContext, QuantizedModel};
use lic_core::watermark::{derive_watermark, qaw_finetune, KeyMatrix, ProviderKey, QawConfig};
use lic_drm::{
    package, trace_leak, unlock_and_load, ClientIdentity, DrmError, EncryptedContainer, Registry, WatermarkPolicy,
};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

const POLICY: WatermarkPolicy = WatermarkPolicy { target_layer: 3, bits: 32 };

struct Fixture {
    provider: ProviderKey,
    clients: Vec<ClientIdentity>,
    registry: Registry,
    plain: QuantizedModel,
    marked: QuantizedModel,
}

fn fixture() -> Fixture {
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let provider = ProviderKey::generate(&mut rng);
    let clients: Vec<_> = (0..10).map(|i| ClientIdentity::generate(format!("client-{i:02}"), &mut rng)).collect();
    let mut registry = Registry::new(POLICY);
    for c in &clients {
        registry.register(&c.public(), &provider);
    }
    let model = LicModel::new(LicConfig { stages: 2, channels: 8, ..LicConfig::default() }, 3).unwrap();
    let data = synthetic_corpus(4, 16, 2);
    let ctx = QuantContext::new(&model, &calibrate(&model, &data).unwrap()).unwrap();
    let plain = QuantizedModel::export(&model, &ctx, &data).unwrap();

    let rec = registry.get("client-03").unwrap();
    let key = KeyMatrix::for_model(rec.key_seed, &model, POLICY.target_layer, POLICY.bits).unwrap();
    let bits = derive_watermark(&rec.public_key, &rec.salt, POLICY.bits).unwrap();
    let tc = TrainConfig { steps: 40, batch_size: 2, crop: 16, seed: 4, ..TrainConfig::default() };
    let cfg = QawConfig { bits: POLICY.bits, check_interval: 10, ..QawConfig::default() };
    let (mut m, mut c) = (model, ctx);
    let marked = qaw_finetune(&mut m, &mut c, &key, &bits, &data, &data, &tc, &cfg).unwrap().quantized;
    Fixture { provider, clients, registry, plain, marked }
}

#[test]
fn package_unlock_and_trace() {
    let f = fixture();
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let owner = &f.clients[3];

    // The gate refuses a model not marked for the recipient.
    let err = package(&f.marked, &f.clients[4].public(), &f.provider, &POLICY, &mut rng).unwrap_err();
    assert!(matches!(err, DrmError::WatermarkMismatch { .. }));
    assert!(package(&f.plain, &owner.public(), &f.provider, &POLICY, &mut rng).is_err());

    let sealed = package(&f.marked, &owner.public(), &f.provider, &POLICY, &mut rng).unwrap();
    let bytes = sealed.to_bytes();
    let (meta, engine) = unlock_and_load(&EncryptedContainer::from_bytes(&bytes).unwrap(), owner).unwrap();
    assert_eq!(engine.quantized.to_bytes(), f.marked.to_bytes());
    assert_eq!(meta.model_hash, hex::encode(f.marked.hash()));
    assert_eq!((meta.target_layer, meta.bits), (3, 32));
    assert!(matches!(unlock_and_load(&sealed, &f.clients[0]), Err(DrmError::WrongRecipient { .. })));

    let matches = trace_leak(&engine.quantized, &f.registry).unwrap();
    assert_eq!(matches.len(), 10);
    assert_eq!(matches[0].client, "client-03");
    assert_eq!(matches[0].c_ber, 100.0);
    assert!(!matches[0].in_chance_band);
    assert!(matches[1].c_ber < 90.0);

    // An unmarked model scores inside the chance band for most clients.
    let unmarked = trace_leak(&f.plain, &f.registry).unwrap();
    assert!(unmarked.iter().all(|m| m.c_ber < 100.0));
    assert!(unmarked.iter().filter(|m| m.in_chance_band).count() >= 8);

    let reg = Registry::from_json(&f.registry.to_json()).unwrap();
    assert_eq!(reg, f.registry);
    assert!(matches!(trace_leak(&f.plain, &Registry::new(POLICY)), Err(DrmError::EmptyRegistry)));
}

#[test]
fn registry_and_keys_survive_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(6);
    let provider = ProviderKey::generate(&mut rng);
    let alice = ClientIdentity::generate("alice", &mut rng);
    let mut registry = Registry::new(POLICY);
    registry.register(&alice.public(), &provider);
    let path = dir.path().join("registry.json");
    registry.save(&path).unwrap();
    assert_eq!(Registry::load(&path).unwrap(), registry);

    let key_path = dir.path().join("alice.key");
    std::fs::write(&key_path, alice.to_pem(Some("pw"), &mut rng).unwrap()).unwrap();
    let text = std::fs::read_to_string(&key_path).unwrap();
    let back = ClientIdentity::from_pem(&text, Some("pw")).unwrap();
    assert_eq!(back.public().bytes(), alice.public().bytes());
    assert!(ClientIdentity::from_pem(&text, Some("wrong")).is_err());
    assert!(Registry::load(&dir.path().join("missing.json")).is_err());
}
