//! Raw matmul timings at im2col-layout shapes.

use candle_core::{Device, Tensor};
use std::time::Instant;

fn bench(label: &str, iters: usize, flops: f64, mut f: impl FnMut()) {
    let t0 = Instant::now();
    for _ in 0..iters {
        f();
    }
    let dt = t0.elapsed().as_secs_f64() / iters as f64;
    println!("{label}: {:.0} ms  ({:.1} GFLOP/s)", dt * 1e3, flops / dt / 1e9);
}

fn main() -> candle_core::Result<()> {
    let dev = Device::Cpu;
    // RM head conv at w=0.125: cols (230400, 216) @ (216, 8)
    let cols = Tensor::randn(0f32, 1f32, (230400, 216), &dev)?;
    let w = Tensor::randn(0f32, 1f32, (216, 8), &dev)?;
    let g = Tensor::randn(0f32, 1f32, (230400, 8), &dev)?;
    let fl = 230400f64 * 216.0 * 8.0 * 2.0;
    bench("fwd cols@w", 5, fl, || {
        let _ = cols.matmul(&w).unwrap();
    });
    bench("grad_cols g@wT", 5, fl, || {
        let _ = g.matmul(&w.t().unwrap()).unwrap();
    });
    bench("grad_w colsT@g", 5, fl, || {
        let _ = cols.t().unwrap().matmul(&g).unwrap();
    });

    // Wider variant (width 0.25): N = 16
    let w2 = Tensor::randn(0f32, 1f32, (216, 16), &dev)?;
    bench("fwd cols@w N=16", 5, 2.0 * fl, || {
        let _ = cols.matmul(&w2).unwrap();
    });

    // E^C_h conv1: (819200, 49) @ (49, 4)
    let cols2 = Tensor::randn(0f32, 1f32, (819200, 49), &dev)?;
    let w3 = Tensor::randn(0f32, 1f32, (49, 4), &dev)?;
    let fl2 = 819200f64 * 49.0 * 4.0 * 2.0;
    bench("ECh conv1 fwd cols@w", 5, fl2, || {
        let _ = cols2.matmul(&w3).unwrap();
    });
    Ok(())
}
