//! Fixtures shared by the benchmark targets.

use djkd_core::data::synth_mixed;
use djkd_core::models::student_spec;
use djkd_core::{Network, NetworkHandle, Role, SegBatch, StudentConfig, Tensor};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// Uniform values in `[-0.5, 0.5)`.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = StdRng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random::<f32>() - 0.5)
}

/// Values in `(0, 1)`, usable as probability maps.
pub fn random_probs(shape: &[usize], seed: u64) -> Tensor<f32> {
    random_tensor(shape, seed).map(|v| 0.02 + 0.96 * (v + 0.5))
}

/// Half benign, half malignant synthetic lesions.
pub fn synthetic_batch(n: usize, resolution: usize, seed: u64) -> SegBatch {
    let samples = synth_mixed(n.div_ceil(2), n / 2, resolution, seed).expect("synthetic samples");
    SegBatch::from_samples(&samples).expect("batch")
}

pub fn student(resolution: usize) -> NetworkHandle {
    let spec = student_spec(&StudentConfig { resolution, ..StudentConfig::default() }).expect("student spec");
    Network::new(spec, Role::Student, 0).expect("student network")
}
