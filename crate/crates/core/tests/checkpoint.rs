use mltr::checkpoint::{self, Checkpoint, RawTensor, MAGIC, VERSION};
use mltr::config::RunConfig;
use mltr::model::{Mltr, ModelConfig};
use mltr::train::{from_checkpoint, optimizer_from_checkpoint, to_checkpoint};
use mltr::{Error, Tensor};

fn tiny_cfg() -> RunConfig {
    RunConfig { model: ModelConfig::tiny(), ..RunConfig::overfit() }
}

fn images(n: usize) -> Vec<Tensor<f32>> {
    (0..n)
        .map(|i| Tensor::new(vec![1, 8, 8], (0..64).map(|j| ((i * 64 + j) % 17) as f32 / 17.0).collect()).unwrap())
        .collect()
}

fn bits(logits: &[Vec<f32>]) -> Vec<Vec<u32>> {
    logits.iter().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect()
}

/// Name, dtype tag and dims of one stored tensor.
type TensorHeader = (String, u8, Vec<u64>);

/// Walks the byte layout field by field and returns (config, step, names).
fn parse_layout(bytes: &[u8]) -> (String, u64, Vec<TensorHeader>) {
    let mut at = 0;
    let mut take = |n: usize| {
        let s = &bytes[at..at + n];
        at += n;
        s
    };
    assert_eq!(take(4), b"MLTR");
    assert_eq!(u32::from_le_bytes(take(4).try_into().unwrap()), 1);
    let len = u64::from_le_bytes(take(8).try_into().unwrap()) as usize;
    let config = String::from_utf8(take(len).to_vec()).unwrap();
    let step = u64::from_le_bytes(take(8).try_into().unwrap());
    let count = u32::from_le_bytes(take(4).try_into().unwrap());
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(4).try_into().unwrap()) as usize;
        let name = String::from_utf8(take(name_len).to_vec()).unwrap();
        let dtype = take(1)[0];
        let rank = u32::from_le_bytes(take(4).try_into().unwrap());
        let dims: Vec<u64> = (0..rank).map(|_| u64::from_le_bytes(take(8).try_into().unwrap())).collect();
        let width = if dtype == 0 { 4 } else { 8 };
        take(dims.iter().product::<u64>() as usize * width);
        tensors.push((name, dtype, dims));
    }
    let crc = u32::from_le_bytes(take(4).try_into().unwrap());
    assert_eq!(at, bytes.len());
    assert_eq!(crc, crc32fast::hash(&bytes[..bytes.len() - 4]));
    (config, step, tensors)
}

#[test]
fn encoding_follows_the_documented_layout() {
    let cfg = tiny_cfg();
    let model = Mltr::<f32>::new(cfg.model.clone(), 1).unwrap();
    let ck = to_checkpoint(&cfg, &model, None).unwrap();
    let (config, step, tensors) = parse_layout(&ck.encode());
    assert_eq!(RunConfig::from_json(&config).unwrap(), cfg);
    assert_eq!(step, 0);
    assert_eq!(tensors.len(), model.params().len());
    for ((name, dtype, dims), (_, p)) in tensors.iter().zip(model.params().iter()) {
        assert_eq!(name, &p.name);
        assert_eq!(*dtype, 0);
        assert_eq!(dims.iter().map(|&d| d as usize).collect::<Vec<_>>(), p.value.shape());
    }
    assert_eq!((MAGIC, VERSION), (b"MLTR", 1));
}

#[test]
fn save_load_save_is_byte_identical_and_logits_match() {
    let cfg = tiny_cfg();
    let model = Mltr::<f32>::new(cfg.model.clone(), 3).unwrap();
    let opt = mltr::optim::Optimizer::new(model.params(), cfg.train.adam, cfg.train.lookahead).unwrap();
    let first = to_checkpoint(&cfg, &model, Some(&opt)).unwrap().encode();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    std::fs::write(&path, &first).unwrap();
    let ck = Checkpoint::read(&path).unwrap();
    let (cfg2, loaded) = from_checkpoint(&ck).unwrap();
    let opt2 = optimizer_from_checkpoint(&cfg2, &loaded, &ck).unwrap();
    assert_eq!(to_checkpoint(&cfg2, &loaded, Some(&opt2)).unwrap().encode(), first);

    let xs = images(5);
    assert_eq!(bits(&model.predict_batch(&xs).unwrap()), bits(&loaded.predict_batch(&xs).unwrap()));
}

#[test]
fn truncated_and_damaged_files_are_corrupt() {
    let cfg = tiny_cfg();
    let bytes = to_checkpoint(&cfg, &Mltr::new(cfg.model.clone(), 0).unwrap(), None).unwrap().encode();
    for cut in [0, 4, 8, bytes.len() / 2, bytes.len() - 4, bytes.len() - 1] {
        assert!(matches!(Checkpoint::decode(&bytes[..cut]), Err(Error::Corrupt(_))), "cut at {cut}");
    }
    let mut flipped = bytes.clone();
    let mid = bytes.len() / 2;
    flipped[mid] ^= 0x40;
    assert!(matches!(Checkpoint::decode(&flipped), Err(Error::Corrupt(_))));
}

#[test]
fn future_version_fails_closed_even_with_valid_checksum() {
    let cfg = tiny_cfg();
    let mut bytes = to_checkpoint(&cfg, &Mltr::new(cfg.model.clone(), 0).unwrap(), None).unwrap().encode();
    bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
    let n = bytes.len();
    let crc = crc32fast::hash(&bytes[..n - 4]);
    bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
    assert!(matches!(Checkpoint::decode(&bytes), Err(Error::Corrupt(_))));
}

#[test]
fn shape_and_name_mismatches_are_listed() {
    let cfg = tiny_cfg();
    let mut ck = to_checkpoint(&cfg, &Mltr::new(cfg.model.clone(), 0).unwrap(), None).unwrap();
    let dropped = ck.tensors.remove(0).name;
    let reshaped = ck.tensors[0].name.clone();
    ck.tensors[0] = RawTensor::from_tensor(reshaped.clone(), &Tensor::<f32>::zeros(&[3]));
    ck.tensors.push(RawTensor::from_tensor("extra.w", &Tensor::<f32>::zeros(&[1])));
    match from_checkpoint(&ck) {
        Err(Error::Mismatch(items)) => {
            assert_eq!(items.len(), 3, "{items:?}");
            for name in [&dropped, &reshaped, &"extra.w".to_string()] {
                assert!(items.iter().any(|i| i.starts_with(name.as_str())), "{name} not in {items:?}");
            }
        }
        other => panic!("expected mismatch, got {other:?}"),
    }
}

#[test]
fn failed_load_leaves_store_untouched() {
    let cfg = tiny_cfg();
    let mut model = Mltr::<f32>::new(cfg.model.clone(), 0).unwrap();
    let before: Vec<_> = model.params().iter().map(|(_, p)| p.value.clone()).collect();
    let mut tensors = checkpoint::store_tensors(Mltr::<f32>::new(cfg.model.clone(), 1).unwrap().params());
    tensors.pop();
    assert!(checkpoint::load_into(model.params_mut(), &tensors, |_| true, true).is_err());
    let after: Vec<_> = model.params().iter().map(|(_, p)| p.value.clone()).collect();
    assert_eq!(before, after);
}

#[test]
fn dtype_mismatch_is_reported() {
    let t = RawTensor::from_tensor("x", &Tensor::<f64>::zeros(&[2]));
    assert!(matches!(t.to_tensor::<f32>(), Err(Error::Mismatch(_))));
}
