//! Times one forward/backward/update step for each six-layer family.

use std::time::Instant;

use encap_core::data::{synth_generate, SyntheticSpec};
use encap_core::model::{Family, NetworkConfig};
use encap_core::train::{RunConfig, TrainConfig, Trainer};

fn main() {
    let batch: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(128);
    let ds = synth_generate(&SyntheticSpec {
        classes: 10,
        per_class: batch.div_ceil(10),
        size: 28,
        noise: 0.1,
        seed: 1,
    })
    .unwrap();
    for family in [Family::Encapnet, Family::CapnetDynamic, Family::CapnetEm, Family::VanillaCnn] {
        for lambda in [0.0, 10.0] {
            if lambda > 0.0 && family != Family::Encapnet {
                continue;
            }
            let train = TrainConfig {
                batch_size: batch,
                lambda,
                augment: false,
                train_samples: batch,
                ..TrainConfig::default()
            };
            let mut t = Trainer::<f32>::new(RunConfig {
                network: NetworkConfig::six_layer(family),
                train,
            })
            .unwrap();
            t.train_epoch(&ds.take(batch), 0).unwrap();
            let start = Instant::now();
            t.train_epoch(&ds.take(batch), 1).unwrap();
            println!("{family:?} lambda={lambda}: {:.3}s per step of {batch}", start.elapsed().as_secs_f64());
        }
    }
}
