//! File formats through the filesystem.

use std::fs;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use peft_core::adalora::init_adalora;
use peft_core::lora::init_lora;
use peft_core::quantize::QuantizedTensor;
use peft_core::quantize::{dequantize, AffineMode, Codec, QuantScheme};
use peft_core::trainer::{train_model_with, write_checkpoint, AdapterConfig, Precision, RunConfig};
use peft_core::{Adapter, AdapterKind, Exec, Matrix};

#[test]
fn tensor_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = Matrix::random_normal(7, 3, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let path = dir.path().join("m.pft1");
    m.write_to(fs::File::create(&path).unwrap()).unwrap();
    let back = Matrix::read_from(fs::File::open(&path).unwrap()).unwrap();
    assert_eq!(back, m);
    let bytes = fs::read(&path).unwrap();
    assert_eq!(bytes.len(), 4 + 16 + 4 * 21);
    assert!(Matrix::read_from(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Matrix::read_from(&bad[..]).is_err());
}

#[test]
fn adapter_files_round_trip() {
    for adapter in [
        Adapter::Lora(init_lora(5, 3, 2, 0.1, 9).unwrap()),
        Adapter::AdaLora(init_adalora(5, 3, 2, 0.2, 9).unwrap()),
    ] {
        let bytes = adapter.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"PFTA");
        assert_eq!(Adapter::from_bytes(&bytes).unwrap(), adapter);
        assert!(Adapter::from_bytes(&bytes[..bytes.len() - 2]).is_err());
    }
}

#[test]
fn checkpoint_files_reload() {
    let mut config = RunConfig {
        seed: 3,
        eta: 0.5,
        steps: 20,
        dataset_size: 16,
        adapter: AdapterConfig {
            kind: AdapterKind::AdaLora,
            ..AdapterConfig::default()
        },
        ..RunConfig::default()
    };
    config.quantization.precision = Precision::Int8;
    config.quantization.block_size = 16;
    let (_, model) = train_model_with(&config, Exec::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let paths = write_checkpoint(&model, dir.path()).unwrap();
    let names: Vec<String> = paths
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["q.pfta", "wq.pftq", "k.pfta", "wk.pftq", "v.pfta", "wv.pftq"]);
    let q = Adapter::from_bytes(&fs::read(&paths[0]).unwrap()).unwrap();
    assert_eq!(q.kind(), AdapterKind::AdaLora);
    let wq = QuantizedTensor::from_bytes(&fs::read(&paths[1]).unwrap()).unwrap();
    assert_eq!(wq.codec(), Codec::AffineInt8);
    assert_eq!(wq.shape(), (config.dims.d_model, config.dims.d_k));
}

fn scheme_strategy() -> impl Strategy<Value = QuantScheme> {
    (
        prop_oneof![Just(Codec::AffineInt8), Just(Codec::AffineInt4), Just(Codec::Nf4)],
        prop_oneof![Just(AffineMode::Symmetric), Just(AffineMode::Asymmetric)],
        1usize..40,
        prop::option::of(1usize..8),
    )
        .prop_map(|(codec, mode, block_size, double_quant)| QuantScheme {
            codec,
            mode: if codec == Codec::Nf4 {
                AffineMode::Symmetric
            } else {
                mode
            },
            block_size,
            double_quant,
        })
}

proptest! {
    #[test]
    fn quantized_files_round_trip(
        scheme in scheme_strategy(),
        rows in 1usize..9,
        cols in 1usize..9,
        seed in any::<u64>(),
    ) {
        let m = Matrix::random_normal(rows, cols, 2.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let qt = scheme.apply(&m).unwrap();
        let bytes = qt.to_bytes();
        prop_assert_eq!(bytes.len(), qt.storage_report().total_bytes);
        let back = QuantizedTensor::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &qt);
        prop_assert_eq!(dequantize(&back).unwrap(), dequantize(&qt).unwrap());
        prop_assert!(QuantizedTensor::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
