//! Isolate the conditioned-loss backward cost.

use candle_core::{DType, Device, Tensor};
use ravengen::data::{Batch, ProblemSource, SynthDataset};
use ravengen::losses::cond_loss;
use ravengen::nets::{Model, LATENT_DIM};
use ravengen::nn::Mode;
use ravengen::pipeline::{critic_codes, encode_choices, encode_context, generation_from_trace};
use std::time::Instant;

fn main() {
    let dev = Device::Cpu;
    let b = 32;
    let model = Model::new(0.125, true, 1).unwrap();
    let data = SynthDataset::new(vec!["shape.number.progression".parse().unwrap()], b, 7).unwrap();
    let problems: Vec<_> = (0..b).map(|i| data.get(i).unwrap()).collect();
    let batch = Batch::from_problems(&problems, &dev).unwrap();

    let build = || {
        let ctx = encode_context(&model, &batch.context, Mode::Train).unwrap();
        let choice_emb = encode_choices(&model, &batch.choices, Mode::Train).unwrap();
        let noise = Tensor::zeros((b, LATENT_DIM), DType::F32, &dev).unwrap();
        let gen = generation_from_trace(&model, ctx, &noise, Mode::Train).unwrap();
        let codes = critic_codes(&model, &gen.ctx, &choice_emb, &gen.image, true, Mode::Train).unwrap();
        cond_loss(&codes, &batch.target, 1.0).unwrap()
    };

    let (pos, _neg) = build();
    let t0 = Instant::now();
    let _ = pos.backward().unwrap();
    println!("backward(pos only): {:.2}s", t0.elapsed().as_secs_f64());

    let (pos, neg) = build();
    let total = (pos + neg).unwrap();
    let t0 = Instant::now();
    let _ = total.backward().unwrap();
    println!("backward(pos+neg):  {:.2}s", t0.elapsed().as_secs_f64());
}
