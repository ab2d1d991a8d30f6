#![allow(dead_code)]

use aesm2::data::{Dataset, SampleCounts, SyntheticSpec, SyntheticWorld};
use aesm2::model::{Layout, Model, ModelConfig, ModelKind};
use aesm2::train::init_model;

/// Default synthetic world with small sample counts.
pub fn synthetic(train: usize, seed: u64) -> Dataset {
    let spec = SyntheticSpec {
        samples: SampleCounts { train, val: 0, test: 0 },
        ..SyntheticSpec::default()
    };
    SyntheticWorld::new(&spec, seed).unwrap().sample(train, 0).unwrap()
}

pub fn layout() -> Layout {
    Layout::from_schema(&SyntheticSpec::default().schema())
}

pub fn model(kind: ModelKind, seed: u64) -> Model {
    init_model(ModelConfig { kind, ..ModelConfig::default() }, layout(), seed).unwrap()
}

pub fn model_with(config: ModelConfig, seed: u64) -> Model {
    init_model(config, layout(), seed).unwrap()
}

/// Copies every tensor the two models share by name.
pub fn share_weights(from: &Model, to: &mut Model) {
    for p in to.params_mut() {
        if let Some(t) = from.param(&p.name) {
            p.tensor = t.clone();
        }
    }
}
