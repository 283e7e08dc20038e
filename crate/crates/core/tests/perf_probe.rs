//! Manual throughput probe: `cargo test -p dust-core --test perf_probe -- --ignored --nocapture`

use std::time::Instant;

use dust_core::{Graph, Tensor};

#[test]
#[ignore]
fn conv_throughput() {
    // Representative mid-network layer: [8,32,32,32] x [32,32,3,3], pad 1.
    let (b, c, h, w) = (8usize, 32usize, 32usize, 32usize);
    let x = Tensor::<f32>::from_fn(vec![b, c, h, w], |i| (i as f32 * 0.001).sin());
    let wt = Tensor::<f32>::from_fn(vec![c, c, 3, 3], |i| (i as f32 * 0.01).cos() * 0.1);
    let bias = Tensor::<f32>::zeros(vec![c]);

    let macs = b * c * h * w * c * 9;
    let reps = 30;

    let t0 = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::<f32>::new();
        let xi = g.leaf(x.clone(), true);
        let wi = g.leaf(wt.clone(), true);
        let bi = g.leaf(bias.clone(), true);
        let y = g.conv2d(xi, wi, Some(bi), 1).unwrap();
        let loss = g.mean_all(y);
        g.backward(loss).unwrap();
        std::hint::black_box(g.grad(wi).unwrap()[0]);
    }
    let dt = t0.elapsed().as_secs_f64();
    let gflops_fwd_bwd = (macs * 2 * 3) as f64 * reps as f64 / dt / 1e9;
    println!(
        "conv fwd+bwd: {:.3} s for {} reps -> ~{:.1} GFLOP/s effective",
        dt, reps, gflops_fwd_bwd
    );
}
