#![allow(dead_code)]

use std::sync::{Arc, OnceLock};

use bifseg::eval::{generate_dataset, EvalCase, SyntheticSpec};
use bifseg::nn::{train, ArchConfig, SegmenterModel, TrainConfig, TrainingSet};

pub const TARGET: usize = 48;

pub fn small_spec() -> SyntheticSpec {
    SyntheticSpec { seed: 11, image_size: 48, train_per_class: 8, test_per_class: 4, ..Default::default() }
}

/// A briefly trained toy model, shared by the tests of one binary.
pub fn small_model() -> Arc<SegmenterModel> {
    static MODEL: OnceLock<Arc<SegmenterModel>> = OnceLock::new();
    MODEL
        .get_or_init(|| {
            let data = generate_dataset(&small_spec()).unwrap();
            let images: Vec<_> = data.train.iter().map(|c| (c.image.clone(), c.labels.clone())).collect();
            let inst: Vec<_> = (0..images.len()).map(|i| (i, 1u32)).collect();
            let set = TrainingSet::from_instances(&images, &inst, TARGET, 1).unwrap();
            let cfg = TrainConfig { learning_rate: 0.01, max_iterations: 200, lr_halve_every: 100, ..Default::default() };
            Arc::new(train(&set, &ArchConfig::toy(), &cfg, 3).unwrap())
        })
        .clone()
}

pub fn test_cases() -> Vec<EvalCase> {
    let data = generate_dataset(&small_spec()).unwrap();
    data.test.iter().enumerate().map(|(i, c)| EvalCase::from_synthetic(c, 50 + i as u64)).collect()
}
