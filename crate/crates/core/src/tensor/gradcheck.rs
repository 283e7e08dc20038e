//! Finite-difference verification of every differentiable primitive.
//!
//! Checks run in 64-bit: analytic gradients from [`Graph::backward`] against
//! central differences with step 1e-6, on small random inputs drawn from a
//! seeded RNG. Kinked primitives (relu family, max pooling) are sampled away
//! from their non-differentiable points.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId, Tensor};

const FD_STEP: f64 = 1e-6;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Primitive {
    Conv2d,
    TransposedConv2d,
    BilinearUpsample,
    MaxPool2d,
    Relu,
    LeakyRelu,
    InstanceNorm,
    Add,
    Multiply,
    Concat,
    LinearCombination,
    Softmax,
    Log,
    Exp,
    SumAll,
    MeanAll,
    SumChannels,
    SumSpatial,
    /// log(softmax(x)) composition; exercises the chained VJPs.
    SoftmaxLog,
}

pub const ALL_PRIMITIVES: &[Primitive] = &[
    Primitive::Conv2d,
    Primitive::TransposedConv2d,
    Primitive::BilinearUpsample,
    Primitive::MaxPool2d,
    Primitive::Relu,
    Primitive::LeakyRelu,
    Primitive::InstanceNorm,
    Primitive::Add,
    Primitive::Multiply,
    Primitive::Concat,
    Primitive::LinearCombination,
    Primitive::Softmax,
    Primitive::Log,
    Primitive::Exp,
    Primitive::SumAll,
    Primitive::MeanAll,
    Primitive::SumChannels,
    Primitive::SumSpatial,
    Primitive::SoftmaxLog,
];

impl Primitive {
    pub fn name(self) -> &'static str {
        match self {
            Primitive::Conv2d => "conv2d",
            Primitive::TransposedConv2d => "transposed_conv2d",
            Primitive::BilinearUpsample => "bilinear_upsample",
            Primitive::MaxPool2d => "max_pool2d",
            Primitive::Relu => "relu",
            Primitive::LeakyRelu => "leaky_relu",
            Primitive::InstanceNorm => "instance_norm",
            Primitive::Add => "add",
            Primitive::Multiply => "multiply",
            Primitive::Concat => "concat",
            Primitive::LinearCombination => "linear_combination",
            Primitive::Softmax => "softmax",
            Primitive::Log => "log",
            Primitive::Exp => "exp",
            Primitive::SumAll => "sum_all",
            Primitive::MeanAll => "mean_all",
            Primitive::SumChannels => "sum_channels",
            Primitive::SumSpatial => "sum_spatial",
            Primitive::SoftmaxLog => "softmax_log",
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Away-from-kink samples: |x| in [0.1, 1.1].
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let mag = 0.1 + rng.gen_range(0.0..1.0);
        if rng.gen_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}

/// Values whose 2x2 pooling windows have pairwise gaps >= 1e-3, so the
/// argmax cannot flip under the finite-difference step.
fn pool_safe(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let (h, w) = (shape[2], shape[3]);
    let mut t = Tensor::zeros(shape.to_vec());
    let plane = h * w;
    let windows = shape[0] * shape[1] * (h / 2) * (w / 2);
    for win in 0..windows {
        let per_row = w / 2;
        let bc = win / ((h / 2) * per_row);
        let rem = win % ((h / 2) * per_row);
        let (oy, ox) = (rem / per_row, rem % per_row);
        loop {
            let vals: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut ok = true;
            for i in 0..4 {
                for j in i + 1..4 {
                    if (vals[i] - vals[j]).abs() < 1e-3 {
                        ok = false;
                    }
                }
            }
            if ok {
                let base = bc * plane + 2 * oy * w + 2 * ox;
                t.data_mut()[base] = vals[0];
                t.data_mut()[base + 1] = vals[1];
                t.data_mut()[base + w] = vals[2];
                t.data_mut()[base + w + 1] = vals[3];
                break;
            }
        }
    }
    t
}

fn gen_inputs(primitive: Primitive, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    match primitive {
        Primitive::Conv2d => vec![
            uniform(rng, &[1, 2, 5, 5], -1.0, 1.0),
            uniform(rng, &[3, 2, 3, 3], -1.0, 1.0),
            uniform(rng, &[3], -0.5, 0.5),
        ],
        Primitive::TransposedConv2d => vec![
            uniform(rng, &[1, 2, 3, 3], -1.0, 1.0),
            uniform(rng, &[2, 3, 2, 2], -1.0, 1.0),
            uniform(rng, &[3], -0.5, 0.5),
        ],
        Primitive::BilinearUpsample => vec![uniform(rng, &[1, 2, 3, 3], -1.0, 1.0)],
        Primitive::MaxPool2d => vec![pool_safe(rng, &[1, 2, 4, 4])],
        Primitive::Relu | Primitive::LeakyRelu => vec![off_zero(rng, &[2, 7])],
        Primitive::InstanceNorm => vec![
            uniform(rng, &[2, 2, 3, 3], -1.0, 1.0),
            uniform(rng, &[2], 0.5, 1.5),
            uniform(rng, &[2], -0.5, 0.5),
        ],
        Primitive::Add | Primitive::Multiply => vec![
            uniform(rng, &[2, 3, 2, 2], -1.0, 1.0),
            uniform(rng, &[2, 3, 2, 2], -1.0, 1.0),
        ],
        Primitive::Concat => vec![
            uniform(rng, &[1, 2, 2, 2], -1.0, 1.0),
            uniform(rng, &[1, 3, 2, 2], -1.0, 1.0),
        ],
        Primitive::LinearCombination => vec![
            uniform(rng, &[2, 3], -1.0, 1.0),
            uniform(rng, &[2, 3], -1.0, 1.0),
            uniform(rng, &[2, 3], -1.0, 1.0),
        ],
        Primitive::Softmax | Primitive::SoftmaxLog => vec![uniform(rng, &[1, 4, 2, 2], -2.0, 2.0)],
        Primitive::Log => vec![uniform(rng, &[2, 3], 0.2, 2.0)],
        Primitive::Exp => vec![uniform(rng, &[2, 3], -1.0, 1.0)],
        Primitive::SumAll | Primitive::MeanAll => vec![uniform(rng, &[2, 3, 2], -1.0, 1.0)],
        Primitive::SumChannels | Primitive::SumSpatial => {
            vec![uniform(rng, &[2, 3, 2, 2], -1.0, 1.0)]
        }
    }
}

fn apply(primitive: Primitive, g: &mut Graph<f64>, ids: &[NodeId]) -> NodeId {
    match primitive {
        Primitive::Conv2d => g.conv2d(ids[0], ids[1], Some(ids[2]), 1).unwrap(),
        Primitive::TransposedConv2d => g.conv_transpose2d(ids[0], ids[1], Some(ids[2])).unwrap(),
        Primitive::BilinearUpsample => g.bilinear_upsample2x(ids[0]).unwrap(),
        Primitive::MaxPool2d => g.max_pool2x2(ids[0]).unwrap(),
        Primitive::Relu => g.relu(ids[0]),
        Primitive::LeakyRelu => g.leaky_relu(ids[0]),
        Primitive::InstanceNorm => g.instance_norm(ids[0], ids[1], ids[2]).unwrap(),
        Primitive::Add => g.add(ids[0], ids[1]).unwrap(),
        Primitive::Multiply => g.mul(ids[0], ids[1]).unwrap(),
        Primitive::Concat => g.concat_channels(ids[0], ids[1]).unwrap(),
        Primitive::LinearCombination => g
            .lincomb(&[(0.7, ids[0]), (-1.3, ids[1]), (0.4, ids[2])])
            .unwrap(),
        Primitive::Softmax => g.softmax_channels(ids[0]).unwrap(),
        Primitive::Log => g.log(ids[0]),
        Primitive::Exp => g.exp(ids[0]),
        Primitive::SumAll => g.sum_all(ids[0]),
        Primitive::MeanAll => g.mean_all(ids[0]),
        Primitive::SumChannels => g.sum_channels(ids[0]).unwrap(),
        Primitive::SumSpatial => g.sum_spatial(ids[0]).unwrap(),
        Primitive::SoftmaxLog => {
            let s = g.softmax_channels(ids[0]).unwrap();
            g.log(s)
        }
    }
}

/// Scalar projection of the primitive's output against fixed random weights;
/// the quantity whose gradient is compared.
fn project(
    primitive: Primitive,
    inputs: &[Tensor<f64>],
    proj: &Tensor<f64>,
    track: bool,
) -> (f64, Option<Vec<Vec<f64>>>) {
    let mut g = Graph::<f64>::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), track)).collect();
    let out = apply(primitive, &mut g, &ids);
    let pid = g.constant(proj.clone());
    let prod = g.mul(out, pid).unwrap();
    let loss = g.sum_all(prod);
    let loss_val = g.value(loss).data()[0];
    if !track {
        return (loss_val, None);
    }
    g.backward(loss).expect("scalar loss");
    let grads = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| {
            g.grad(id)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();
    (loss_val, Some(grads))
}

/// Compares analytic and central-difference gradients for one primitive at a
/// random point; returns the max relative error over all input coordinates.
pub fn grad_check(primitive: Primitive, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = gen_inputs(primitive, &mut rng);
    // Output shape needed for the projection weights: probe once.
    let out_shape = {
        let mut g = Graph::<f64>::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = apply(primitive, &mut g, &ids);
        g.value(out).shape().to_vec()
    };
    let proj = uniform(&mut rng, &out_shape, -1.0, 1.0);

    let (_, grads) = project(primitive, &inputs, &proj, true);
    let grads = grads.expect("tracked");

    let mut worst = 0.0f64;
    let mut perturbed = inputs.clone();
    for (k, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            perturbed[k].data_mut()[j] = orig + FD_STEP;
            let (lp, _) = project(primitive, &perturbed, &proj, false);
            perturbed[k].data_mut()[j] = orig - FD_STEP;
            let (lm, _) = project(primitive, &perturbed, &proj, false);
            perturbed[k].data_mut()[j] = orig;
            let numeric = (lp - lm) / (2.0 * FD_STEP);
            let rel = (grads[k][j] - numeric).abs() / numeric.abs().max(1e-8);
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes_spot_check() {
        for &p in ALL_PRIMITIVES {
            for trial in 0..3u64 {
                let err = grad_check(p, 0x5eed + trial);
                assert!(err < 1e-5, "{} trial {trial}: rel err {err:e}", p.name());
            }
        }
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![1], vec![0.0]).unwrap(), true);
        let y = g.relu(x);
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0]);
    }
}
