//! Shared fixtures for the kernel benchmarks.

use logitreg_core::attacks::ThreatModel;
use logitreg_core::data::{make_synthetic_dataset, Dataset, Split, SyntheticSpec};
use logitreg_core::models::{ModelConfig, ModelParams};

/// Conv testbed matching the evaluation experiments: blobs in a 10-class
/// 8x8 single-channel layout.
pub fn conv_fixture(batch: usize) -> (ModelParams, Dataset) {
    let spec = SyntheticSpec::blobs(vec![1, 8, 8], 10, 0.15);
    let dataset = make_synthetic_dataset(&spec, batch, Split::Test, 7).expect("synthetic data");
    let model = ModelConfig::small_conv(vec![1, 8, 8], 8, 1, 10);
    let params = ModelParams::init(model, 7).expect("init");
    (params, dataset)
}

pub fn bench_threat() -> ThreatModel {
    ThreatModel::new(0.1, 0.025, 5, (0.0, 1.0)).expect("threat")
}
