//! Times forward+backward through a four-layer 3x3 conv stack (96 channels).
//!
//! `cargo run --release -p tapegrad --example conv_bench -- 64`

use std::time::Instant;
use tapegrad::{Graph, Tensor};

fn main() -> tapegrad::Result<()> {
    let size: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(64);
    let widths = [8, 96, 96, 96, 3];
    let layers: Vec<(Tensor<f32>, Tensor<f32>)> = widths
        .windows(2)
        .map(|w| {
            let n = w[0] * w[1] * 9;
            let weight = (0..n).map(|i| ((i % 17) as f32 - 8.0) * 1e-3).collect();
            (
                Tensor::new(&[w[1], w[0], 3, 3], weight).unwrap(),
                Tensor::zeros(&[w[1]]),
            )
        })
        .collect();
    let input = Tensor::full(&[8, size, size], 0.5f32);
    let reps = 5;
    let start = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new();
        let mut h = g.constant(input.clone());
        for (i, (w, b)) in layers.iter().enumerate() {
            let (w, b) = (g.param(w.clone()), g.param(b.clone()));
            h = g.conv2d(h, w, b)?;
            if i + 1 < layers.len() {
                h = g.relu(h);
            }
        }
        let sq = g.sqr(h);
        let loss = g.mean(sq);
        g.backward(loss)?;
    }
    println!(
        "{size}x{size}: {:.1} ms per forward+backward",
        start.elapsed().as_secs_f64() * 1e3 / reps as f64
    );
    Ok(())
}
