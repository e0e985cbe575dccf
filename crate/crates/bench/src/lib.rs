//! Fixtures shared by the criterion benchmarks.

use longhorn_core::autodiff::ParamRegistry;
use longhorn_core::longhorn::{make_scan_elements, LonghornParams};
use longhorn_core::model::{Model, ModelConfig};
use longhorn_core::tasks::{mqar_batch, Example, MqarSpec};
use longhorn_core::{Result, ScanElement, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Scan elements for a `t_len`-step Longhorn layer of width `d` and state size `m`.
pub fn scan_fixture(t_len: usize, d: usize, m: usize, seed: u64) -> Result<(Vec<ScanElement<f32>>, Tensor<f32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = LonghornParams::<f32>::init(&mut ParamRegistry::new(), "bench", d, m, None, &mut rng)?;
    let x = Tensor::randn(&[t_len, d], 1.0, &mut rng);
    Ok((make_scan_elements(&x, &params)?, Tensor::zeros(&[d, m])))
}

/// A small MQAR model and a batch to take gradients on.
pub fn train_fixture(batch: usize, seed: u64) -> Result<(Model<f32>, Vec<Example>)> {
    let spec = MqarSpec {
        seed,
        ..MqarSpec::default()
    };
    let cfg = ModelConfig {
        vocab: spec.vocab(),
        context: spec.seq_len,
        layers: 2,
        d_model: 64,
        state_dim: 8,
        seed,
        ..ModelConfig::default()
    };
    Ok((Model::init(&cfg)?, mqar_batch(&spec, batch)?))
}
