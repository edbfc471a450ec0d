//! Per-component cost probe: compare step times across ablations that
//! skip parts of the pipeline.

use ravengen::data::{Batch, ProblemSource, SynthDataset};
use ravengen::trainer::{train_step, AblationKind, TrainConfig, TrainState};
use std::time::Instant;

fn main() {
    let batch_size = 32;
    let data = SynthDataset::new(
        vec!["shape.number.progression".parse().unwrap()],
        batch_size,
        7,
    )
    .unwrap();
    let problems: Vec<_> = (0..batch_size).map(|i| data.get(i).unwrap()).collect();
    let batch = Batch::from_problems(&problems, &candle_core::Device::Cpu).unwrap();

    for ablation in [
        AblationKind::Full,
        AblationKind::NoVae,
        AblationKind::PixelCond,
        AblationKind::MseCond,
    ] {
        let config = TrainConfig {
            batch_size,
            width_mult: 0.125,
            seed: 1,
            ablation,
            epoch_checkpoints: false,
            ..TrainConfig::default()
        };
        let mut state = TrainState::new(config).unwrap();
        state.epoch = 5;
        train_step(&mut state, &batch).unwrap(); // warm
        let t0 = Instant::now();
        for _ in 0..2 {
            train_step(&mut state, &batch).unwrap();
        }
        println!("{ablation}: {:.2}s/step", t0.elapsed().as_secs_f64() / 2.0);
    }
}
