//! Dual-decoder U-Net: one encoder, two decoders that differ only in how
//! they upsample. The main decoder uses stride-2 transposed convolutions and
//! produces the predictions and pseudo labels; the auxiliary decoder uses
//! bilinear upsampling followed by a 1x1 channel-reduction conv and exists to
//! expose prediction disagreement.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::{ClassMap, Graph, NodeId, Scalar, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum UnetError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("both decoders declare the same upsampling kind ({0:?}); they must differ")]
    SameUpsampleKinds(UpsampleKind),
    #[error(
        "input spatial dims {h}x{w} must be divisible by {divisor} (2^(depth-1) for depth {depth})"
    )]
    SpatialNotDivisible {
        h: usize,
        w: usize,
        divisor: usize,
        depth: usize,
    },
    #[error("input must be [B,1,H,W] grayscale, got shape {0:?}")]
    BadInputShape(Vec<usize>),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum UpsampleKind {
    /// Learned stride-2 transposed convolution.
    TransposedConv,
    /// Fixed bilinear interpolation followed by a 1x1 conv.
    BilinearConv,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub n_classes: usize,
    pub use_instance_norm: bool,
    pub main_upsample: UpsampleKind,
    pub aux_upsample: UpsampleKind,
}

impl ArchConfig {
    pub fn new(depth: usize, base_channels: usize, n_classes: usize) -> Self {
        Self {
            depth,
            base_channels,
            n_classes,
            use_instance_norm: true,
            main_upsample: UpsampleKind::TransposedConv,
            aux_upsample: UpsampleKind::BilinearConv,
        }
    }

    /// Channel width at encoder level `l`: doubles per level.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn spatial_divisor(&self) -> usize {
        1 << (self.depth - 1)
    }
}

/// Named, ordered parameter set of the dual-decoder network.
#[derive(Clone, Debug)]
pub struct ModelParams {
    arch: ArchConfig,
    entries: Vec<(String, Tensor<f32>)>,
    index: HashMap<String, usize>,
}

/// The two per-pixel class-probability maps one forward pass produces,
/// each `[B, n_classes, H, W]` and summing to 1 over classes.
#[derive(Clone, Debug)]
pub struct DualPrediction {
    pub main_prob: Tensor<f32>,
    pub aux_prob: Tensor<f32>,
}

/// He-style fan-in scaled Gaussian draw.
pub fn he_normal(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let std = (2.0 / fan_in as f64).sqrt() as f32;
    Tensor::from_fn(shape, |_| {
        let z: f32 = rng.sample(StandardNormal);
        z * std
    })
}

/// Fresh parameters for the default architecture (transposed-conv main
/// decoder, bilinear aux decoder, instance norm on). Deterministic in `seed`.
pub fn init_params(
    depth: usize,
    base_channels: usize,
    n_classes: usize,
    seed: u64,
) -> Result<ModelParams, UnetError> {
    init_params_with(ArchConfig::new(depth, base_channels, n_classes), seed)
}

pub fn init_params_with(arch: ArchConfig, seed: u64) -> Result<ModelParams, UnetError> {
    if arch.depth < 2 {
        return Err(UnetError::InvalidArch(format!(
            "depth must be >= 2, got {}",
            arch.depth
        )));
    }
    if arch.base_channels < 4 {
        return Err(UnetError::InvalidArch(format!(
            "base_channels must be >= 4, got {}",
            arch.base_channels
        )));
    }
    if arch.n_classes < 2 {
        return Err(UnetError::InvalidArch(format!(
            "n_classes must be >= 2, got {}",
            arch.n_classes
        )));
    }
    if arch.main_upsample == arch.aux_upsample {
        return Err(UnetError::SameUpsampleKinds(arch.main_upsample));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams {
        arch: arch.clone(),
        entries: Vec::new(),
        index: HashMap::new(),
    };

    let mut conv = |p: &mut ModelParams, name: &str, c_out: usize, c_in: usize, k: usize, rng: &mut ChaCha8Rng| {
        p.insert(
            format!("{name}.w"),
            he_normal(vec![c_out, c_in, k, k], c_in * k * k, rng),
        );
        p.insert(format!("{name}.b"), Tensor::zeros(vec![c_out]));
    };
    let norm = |p: &mut ModelParams, name: &str, c: usize| {
        p.insert(format!("{name}.g"), Tensor::full(vec![c], 1.0));
        p.insert(format!("{name}.b"), Tensor::zeros(vec![c]));
    };
    let block = |p: &mut ModelParams,
                 name: &str,
                 c_out: usize,
                 c_in: usize,
                 use_norm: bool,
                 rng: &mut ChaCha8Rng| {
        conv(p, name, c_out, c_in, 3, rng);
        if use_norm {
            norm(p, &format!("{name}.norm"), c_out);
        }
    };

    let use_norm = arch.use_instance_norm;
    // Encoder.
    for l in 0..arch.depth {
        let c = arch.channels(l);
        let c_prev = if l == 0 { 1 } else { arch.channels(l - 1) };
        block(&mut p, &format!("enc{l}.conv1"), c, c_prev, use_norm, &mut rng);
        block(&mut p, &format!("enc{l}.conv2"), c, c, use_norm, &mut rng);
    }
    // Decoders, top of the U first.
    for (prefix, kind) in [("dec_main", arch.main_upsample), ("dec_aux", arch.aux_upsample)] {
        for l in (0..arch.depth - 1).rev() {
            let c = arch.channels(l);
            let c_deep = arch.channels(l + 1);
            match kind {
                UpsampleKind::TransposedConv => {
                    // weight layout [c_in, c_out, 2, 2]
                    p.insert(
                        format!("{prefix}{l}.up.w"),
                        he_normal(vec![c_deep, c, 2, 2], c_deep * 4, &mut rng),
                    );
                    p.insert(format!("{prefix}{l}.up.b"), Tensor::zeros(vec![c]));
                }
                UpsampleKind::BilinearConv => {
                    conv(&mut p, &format!("{prefix}{l}.up"), c, c_deep, 1, &mut rng);
                }
            }
            block(&mut p, &format!("{prefix}{l}.conv1"), c, 2 * c, use_norm, &mut rng);
            block(&mut p, &format!("{prefix}{l}.conv2"), c, c, use_norm, &mut rng);
        }
    }
    conv(&mut p, "head_main", arch.n_classes, arch.base_channels, 1, &mut rng);
    conv(&mut p, "head_aux", arch.n_classes, arch.base_channels, 1, &mut rng);
    Ok(p)
}

impl ModelParams {
    fn insert(&mut self, name: String, value: Tensor<f32>) {
        assert!(
            self.index.insert(name.clone(), self.entries.len()).is_none(),
            "duplicate parameter {name}"
        );
        self.entries.push((name, value));
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn entries(&self) -> &[(String, Tensor<f32>)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<f32>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> &Tensor<f32> {
        &self.entries[self.index[name]].1
    }

    pub fn set(&mut self, name: &str, value: Tensor<f32>) {
        let idx = self.index[name];
        assert_eq!(self.entries[idx].1.shape(), value.shape());
        self.entries[idx].1 = value;
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn validate_input(&self, shape: &[usize]) -> Result<(), UnetError> {
        if shape.len() != 4 || shape[1] != 1 {
            return Err(UnetError::BadInputShape(shape.to_vec()));
        }
        let d = self.arch.spatial_divisor();
        if shape[2] % d != 0 || shape[3] % d != 0 {
            return Err(UnetError::SpatialNotDivisible {
                h: shape[2],
                w: shape[3],
                divisor: d,
                depth: self.arch.depth,
            });
        }
        Ok(())
    }
}

/// Parameter leaves of one graph, aligned with [`ModelParams::entries`].
pub struct BoundParams {
    ids: Vec<NodeId>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn node(&self, name: &str) -> NodeId {
        self.ids[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }
}

/// Injects every parameter into `g` as a leaf; `trainable` turns gradient
/// tracking on.
pub fn bind_params<E: Scalar>(
    g: &mut Graph<E>,
    params: &ModelParams,
    trainable: bool,
) -> BoundParams {
    let ids = params
        .entries
        .iter()
        .map(|(_, t)| g.leaf(t.cast::<E>(), trainable))
        .collect();
    BoundParams {
        ids,
        index: params.index.clone(),
    }
}

fn conv_block<E: Scalar>(
    g: &mut Graph<E>,
    bound: &BoundParams,
    arch: &ArchConfig,
    name: &str,
    x: NodeId,
) -> Result<NodeId, UnetError> {
    let mut y = g.conv2d(x, bound.node(&format!("{name}.w")), Some(bound.node(&format!("{name}.b"))), 1)?;
    if arch.use_instance_norm {
        y = g.instance_norm(
            y,
            bound.node(&format!("{name}.norm.g")),
            bound.node(&format!("{name}.norm.b")),
        )?;
    }
    Ok(g.leaky_relu(y))
}

fn decode<E: Scalar>(
    g: &mut Graph<E>,
    bound: &BoundParams,
    arch: &ArchConfig,
    prefix: &str,
    kind: UpsampleKind,
    bottleneck: NodeId,
    skips: &[NodeId],
    head: &str,
) -> Result<NodeId, UnetError> {
    let mut x = bottleneck;
    for l in (0..arch.depth - 1).rev() {
        x = match kind {
            UpsampleKind::TransposedConv => g.conv_transpose2d(
                x,
                bound.node(&format!("{prefix}{l}.up.w")),
                Some(bound.node(&format!("{prefix}{l}.up.b"))),
            )?,
            UpsampleKind::BilinearConv => {
                let up = g.bilinear_upsample2x(x)?;
                g.conv2d(
                    up,
                    bound.node(&format!("{prefix}{l}.up.w")),
                    Some(bound.node(&format!("{prefix}{l}.up.b"))),
                    0,
                )?
            }
        };
        x = g.concat_channels(x, skips[l])?;
        x = conv_block(g, bound, arch, &format!("{prefix}{l}.conv1"), x)?;
        x = conv_block(g, bound, arch, &format!("{prefix}{l}.conv2"), x)?;
    }
    Ok(g.conv2d(
        x,
        bound.node(&format!("{head}.w")),
        Some(bound.node(&format!("{head}.b"))),
        0,
    )?)
}

/// Full dual forward pass; returns raw logits `(main, aux)`.
pub fn forward_dual<E: Scalar>(
    g: &mut Graph<E>,
    bound: &BoundParams,
    arch: &ArchConfig,
    input: NodeId,
) -> Result<(NodeId, NodeId), UnetError> {
    let mut skips = Vec::with_capacity(arch.depth - 1);
    let mut x = input;
    for l in 0..arch.depth {
        x = conv_block(g, bound, arch, &format!("enc{l}.conv1"), x)?;
        x = conv_block(g, bound, arch, &format!("enc{l}.conv2"), x)?;
        if l < arch.depth - 1 {
            skips.push(x);
            x = g.max_pool2x2(x)?;
        }
    }
    let main = decode(g, bound, arch, "dec_main", arch.main_upsample, x, &skips, "head_main")?;
    let aux = decode(g, bound, arch, "dec_aux", arch.aux_upsample, x, &skips, "head_aux")?;
    Ok((main, aux))
}

/// Eval-mode forward: both softmax probability maps for a `[B,1,H,W]` batch.
pub fn predict_dual(params: &ModelParams, batch: &Tensor<f32>) -> Result<DualPrediction, UnetError> {
    params.validate_input(batch.shape())?;
    let mut g = Graph::<f32>::new();
    let bound = bind_params(&mut g, params, false);
    let input = g.constant(batch.clone());
    let (main, aux) = forward_dual(&mut g, &bound, &params.arch, input)?;
    let main_prob = g.softmax_channels(main)?;
    let aux_prob = g.softmax_channels(aux)?;
    Ok(DualPrediction {
        main_prob: g.value(main_prob).clone(),
        aux_prob: g.value(aux_prob).clone(),
    })
}

/// Hard labels from the main decoder: per-pixel argmax over classes, ties
/// broken toward the lowest class index.
pub fn predict_main_labels(params: &ModelParams, batch: &Tensor<f32>) -> Result<ClassMap, UnetError> {
    let pred = predict_dual(params, batch)?;
    Ok(argmax_channels(&pred.main_prob))
}

/// Per-pixel argmax over the class axis of a `[B,n,H,W]` map.
pub fn argmax_channels(prob: &Tensor<f32>) -> ClassMap {
    let s = prob.shape();
    let (b, n, h, w) = (s[0], s[1], s[2], s[3]);
    let plane = h * w;
    let data = prob.data();
    let mut out = vec![0u8; b * plane];
    for bi in 0..b {
        for p in 0..plane {
            let mut best_c = 0usize;
            let mut best = data[(bi * n) * plane + p];
            for c in 1..n {
                let v = data[(bi * n + c) * plane + p];
                if v > best {
                    best = v;
                    best_c = c;
                }
            }
            out[bi * plane + p] = best_c as u8;
        }
    }
    ClassMap::new(b, h, w, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelParams {
        init_params(3, 4, 3, 11).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_params(4, 16, 4, 7).unwrap();
        let b = init_params(4, 16, 4, 7).unwrap();
        assert_eq!(a.entries.len(), b.entries.len());
        for ((na, ta), (nb, tb)) in a.entries.iter().zip(b.entries.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data(), "{na} differs");
        }
    }

    #[test]
    fn biases_start_at_zero() {
        let p = tiny();
        for (name, t) in p.entries() {
            if name.ends_with(".b") && !name.contains(".norm") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name} not zero");
            }
        }
    }

    #[test]
    fn norm_affine_starts_at_identity() {
        let p = tiny();
        for (name, t) in p.entries() {
            if name.ends_with(".norm.g") {
                assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
            }
            if name.ends_with(".norm.b") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn he_init_std_matches_fan_in() {
        // 3x3 kernel over 16 input channels: std should be sqrt(2/144).
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let t = he_normal(vec![80, 16, 3, 3], 16 * 9, &mut rng);
        assert!(t.numel() >= 10_000);
        let mean: f64 = t.data().iter().map(|&v| v as f64).sum::<f64>() / t.numel() as f64;
        let var: f64 = t.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>()
            / t.numel() as f64;
        let expected = (2.0f64 / 144.0).sqrt();
        let actual = var.sqrt();
        assert!(
            (actual - expected).abs() / expected < 0.10,
            "std {actual} vs expected {expected}"
        );
    }

    #[test]
    fn rejects_matching_upsample_kinds() {
        let mut arch = ArchConfig::new(3, 4, 2);
        arch.aux_upsample = UpsampleKind::TransposedConv;
        assert!(matches!(
            init_params_with(arch, 0),
            Err(UnetError::SameUpsampleKinds(_))
        ));
    }

    #[test]
    fn rejects_degenerate_arch() {
        assert!(init_params(1, 16, 4, 0).is_err());
        assert!(init_params(4, 2, 4, 0).is_err());
        assert!(init_params(4, 16, 1, 0).is_err());
    }

    #[test]
    fn predict_shapes_and_softmax_law() {
        let p = init_params(4, 4, 4, 3).unwrap();
        let batch = Tensor::from_fn(vec![2, 1, 16, 16], |i| ((i % 97) as f32) / 97.0);
        let pred = predict_dual(&p, &batch).unwrap();
        assert_eq!(pred.main_prob.shape(), &[2, 4, 16, 16]);
        assert_eq!(pred.aux_prob.shape(), &[2, 4, 16, 16]);
        for prob in [&pred.main_prob, &pred.aux_prob] {
            let plane = 16 * 16;
            for bi in 0..2 {
                for px in 0..plane {
                    let s: f32 = (0..4).map(|c| prob.data()[(bi * 4 + c) * plane + px]).sum();
                    assert!((s - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn fresh_decoders_disagree() {
        let p = tiny();
        let batch = Tensor::from_fn(vec![1, 1, 8, 8], |i| (i as f32 * 0.3).sin());
        let pred = predict_dual(&p, &batch).unwrap();
        let mean_abs: f32 = pred
            .main_prob
            .data()
            .iter()
            .zip(pred.aux_prob.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f32>()
            / pred.main_prob.numel() as f32;
        assert!(mean_abs > 0.0);
    }

    #[test]
    fn indivisible_input_names_divisor() {
        let p = init_params(4, 4, 4, 3).unwrap();
        let batch = Tensor::zeros(vec![1, 1, 12, 12]);
        let err = predict_dual(&p, &batch).unwrap_err();
        assert!(err.to_string().contains('8'), "{err}");
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let prob = Tensor::new(vec![1, 4, 1, 1], vec![0.25, 0.25, 0.25, 0.25]).unwrap();
        let labels = argmax_channels(&prob);
        assert_eq!(labels.data, vec![0]);
        let prob = Tensor::new(vec![1, 4, 1, 1], vec![0.1, 0.7, 0.1, 0.1]).unwrap();
        assert_eq!(argmax_channels(&prob).data, vec![1]);
    }

    #[test]
    fn argmax_invariant_under_log() {
        let p = tiny();
        let batch = Tensor::from_fn(vec![1, 1, 8, 8], |i| (i as f32 * 0.17).cos());
        let pred = predict_dual(&p, &batch).unwrap();
        let direct = argmax_channels(&pred.main_prob);
        let logged = Tensor::new(
            pred.main_prob.shape().to_vec(),
            pred.main_prob.data().iter().map(|&v| v.ln()).collect(),
        )
        .unwrap();
        assert_eq!(direct, argmax_channels(&logged));
    }

    #[test]
    fn param_count_matches_independent_formula() {
        for (depth, c0, n, use_norm) in [(4usize, 16usize, 4usize, true), (3, 8, 2, true), (2, 4, 5, false)] {
            let mut arch = ArchConfig::new(depth, c0, n);
            arch.use_instance_norm = use_norm;
            let p = init_params_with(arch, 5).unwrap();

            // Counted from the layer list, not from the parameter store.
            let ch = |l: usize| c0 << l;
            let conv = |cout: usize, cin: usize, k: usize| cout * cin * k * k + cout;
            let norm = |c: usize| if use_norm { 2 * c } else { 0 };
            let block = |cout: usize, cin: usize| conv(cout, cin, 3) + norm(cout);
            let mut expect = 0usize;
            for l in 0..depth {
                let cin = if l == 0 { 1 } else { ch(l - 1) };
                expect += block(ch(l), cin) + block(ch(l), ch(l));
            }
            for l in 0..depth - 1 {
                // main: transposed conv 2x2
                expect += ch(l + 1) * ch(l) * 4 + ch(l);
                expect += block(ch(l), 2 * ch(l)) + block(ch(l), ch(l));
                // aux: 1x1 conv after bilinear
                expect += conv(ch(l), ch(l + 1), 1);
                expect += block(ch(l), 2 * ch(l)) + block(ch(l), ch(l));
            }
            expect += 2 * conv(n, c0, 1);
            assert_eq!(p.param_count(), expect, "depth {depth} c0 {c0}");
        }
    }
}
