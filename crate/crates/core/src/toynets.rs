//! Built-in desk-scale networks on 16x16 single-channel inputs, 10 classes.
//!
//! All weights are He-initialized from a seeded generator so any two builds
//! with the same seed are identical. `random_net` produces randomized
//! topologies (chains, residual blocks, optional batch-norm and hidden
//! linear layers) for property tests.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::diff::Tensor;
use crate::net::{Edge, EdgeKind, LayerKind, LayerSpec, NetworkSpec, Nonlinearity};
use crate::seed::rng_from_seed;

pub const INPUT_RESOLUTION: (usize, usize, usize) = (1, 16, 16);
pub const NUM_CLASSES: usize = 10;

fn he_conv(rng: &mut ChaCha8Rng, out: usize, inp: usize, kh: usize, kw: usize) -> Tensor<f32> {
    let std = (2.0 / (inp * kh * kw) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("std > 0");
    let data: Vec<f32> = (0..out * inp * kh * kw).map(|_| dist.sample(rng) as f32).collect();
    Tensor::new(vec![out, inp, kh, kw], data).expect("sized")
}

fn he_linear(rng: &mut ChaCha8Rng, out: usize, inp: usize) -> Tensor<f32> {
    let std = (2.0 / inp as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("std > 0");
    let data: Vec<f32> = (0..out * inp).map(|_| dist.sample(rng) as f32).collect();
    Tensor::new(vec![out, inp], data).expect("sized")
}

fn small_bias(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f32> {
    let dist = Normal::new(0.0, 0.05).expect("std > 0");
    let data: Vec<f32> = (0..n).map(|_| dist.sample(rng) as f32).collect();
    Tensor::new(vec![n], data).expect("sized")
}

/// Incremental builder tracking each layer's output shape.
struct Builder {
    layers: Vec<LayerSpec>,
    edges: Vec<Edge>,
    shapes: Vec<(usize, Option<(usize, usize)>)>,
}

impl Builder {
    fn new(res: (usize, usize, usize)) -> Self {
        let input = LayerSpec::new(0, LayerKind::Input, res.0, res.0);
        Self {
            layers: vec![input],
            edges: Vec::new(),
            shapes: vec![(res.0, Some((res.1, res.2)))],
        }
    }

    fn link(&mut self, src: usize, dst: usize, kind: EdgeKind) {
        self.edges.push(Edge::new(src, dst, kind));
    }

    fn conv(
        &mut self,
        rng: &mut ChaCha8Rng,
        from: usize,
        out: usize,
        k: usize,
        pad: usize,
        act: Nonlinearity,
    ) -> usize {
        let (c, hw) = self.shapes[from];
        let (h, w) = hw.expect("conv provider is spatial");
        let id = self.layers.len();
        let mut l = LayerSpec::new(id, LayerKind::Conv2d, c, out)
            .with_kernel(k, k)
            .with_padding(pad, pad)
            .with_activation(act)
            .prunable(true);
        l.weights = Some(he_conv(rng, out, c, k, k));
        l.bias = Some(small_bias(rng, out));
        self.layers.push(l);
        self.link(from, id, EdgeKind::Regular);
        let ho = (h + 2 * pad - k) + 1;
        let wo = (w + 2 * pad - k) + 1;
        self.shapes.push((out, Some((ho, wo))));
        id
    }

    fn batchnorm(&mut self, rng: &mut ChaCha8Rng, from: usize, act: Nonlinearity) -> usize {
        let (c, hw) = self.shapes[from];
        let id = self.layers.len();
        let mut l = LayerSpec::new(id, LayerKind::BatchNorm, c, c).with_activation(act);
        let gamma: Vec<f32> = (0..c).map(|_| rng.gen_range(0.8..1.2)).collect();
        let beta: Vec<f32> = (0..c).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let mean: Vec<f32> = (0..c).map(|_| rng.gen_range(-0.2..0.2)).collect();
        let var: Vec<f32> = (0..c).map(|_| rng.gen_range(0.5..1.5)).collect();
        l.weights = Some(Tensor::new(vec![c], gamma).expect("sized"));
        l.bias = Some(Tensor::new(vec![c], beta).expect("sized"));
        l.bn_mean = Some(Tensor::new(vec![c], mean).expect("sized"));
        l.bn_var = Some(Tensor::new(vec![c], var).expect("sized"));
        self.layers.push(l);
        self.link(from, id, EdgeKind::Regular);
        self.shapes.push((c, hw));
        id
    }

    fn pool(&mut self, from: usize) -> usize {
        let (c, hw) = self.shapes[from];
        let (h, w) = hw.expect("pool provider is spatial");
        let id = self.layers.len();
        self.layers.push(
            LayerSpec::new(id, LayerKind::Pool, c, c)
                .with_kernel(2, 2)
                .with_stride(2, 2),
        );
        self.link(from, id, EdgeKind::Regular);
        self.shapes.push((c, Some((h / 2, w / 2))));
        id
    }

    fn add(&mut self, main: usize, shortcut: usize, act: Nonlinearity) -> usize {
        let (c, hw) = self.shapes[main];
        let id = self.layers.len();
        self.layers
            .push(LayerSpec::new(id, LayerKind::Add, c, c).with_activation(act));
        self.link(main, id, EdgeKind::Regular);
        self.link(shortcut, id, EdgeKind::Residual);
        self.shapes.push((c, hw));
        id
    }

    fn flatten(&mut self, from: usize) -> usize {
        let (c, hw) = self.shapes[from];
        let (h, w) = hw.expect("flatten provider is spatial");
        let id = self.layers.len();
        self.layers
            .push(LayerSpec::new(id, LayerKind::Flatten, c, c * h * w));
        self.link(from, id, EdgeKind::Regular);
        self.shapes.push((c * h * w, None));
        id
    }

    fn linear(
        &mut self,
        rng: &mut ChaCha8Rng,
        from: usize,
        out: usize,
        act: Nonlinearity,
        prunable: bool,
    ) -> usize {
        let (feats, _) = self.shapes[from];
        let id = self.layers.len();
        let mut l = LayerSpec::new(id, LayerKind::Linear, feats, out)
            .with_activation(act)
            .prunable(prunable);
        l.weights = Some(he_linear(rng, out, feats));
        l.bias = Some(small_bias(rng, out));
        self.layers.push(l);
        self.link(from, id, EdgeKind::Regular);
        self.shapes.push((out, None));
        id
    }

    fn finish(mut self, from: usize) -> NetworkSpec {
        let (feats, hw) = self.shapes[from];
        let id = self.layers.len();
        self.layers.push(LayerSpec::new(id, LayerKind::Output, feats, feats));
        self.link(from, id, EdgeKind::Regular);
        let _ = hw;
        NetworkSpec::new(self.layers, self.edges, INPUT_RESOLUTION).expect("builder produces valid nets")
    }
}

/// Plain chain: conv16 - pool - conv32 - pool - flatten - linear10.
/// 48 decision units.
pub fn chain_net(seed: u64) -> NetworkSpec {
    let mut rng = rng_from_seed(seed);
    let mut b = Builder::new(INPUT_RESOLUTION);
    let c1 = b.conv(&mut rng, 0, 16, 3, 1, Nonlinearity::Relu);
    let p1 = b.pool(c1);
    let c2 = b.conv(&mut rng, p1, 32, 3, 1, Nonlinearity::Relu);
    let p2 = b.pool(c2);
    let f = b.flatten(p2);
    let l = b.linear(&mut rng, f, NUM_CLASSES as usize, Nonlinearity::None, false);
    b.finish(l)
}

/// Identity residual block: conv16 - pool - conv32 - conv32 - add - pool -
/// flatten - linear10. The add couples both 32-channel convs (48 units).
pub fn toy_resnet(seed: u64) -> NetworkSpec {
    let mut rng = rng_from_seed(seed);
    let mut b = Builder::new(INPUT_RESOLUTION);
    let c1 = b.conv(&mut rng, 0, 16, 3, 1, Nonlinearity::Relu);
    let p1 = b.pool(c1);
    let c2 = b.conv(&mut rng, p1, 32, 3, 1, Nonlinearity::Relu);
    let c3 = b.conv(&mut rng, c2, 32, 3, 1, Nonlinearity::None);
    let a = b.add(c3, c2, Nonlinearity::Relu);
    let p2 = b.pool(a);
    let f = b.flatten(p2);
    let l = b.linear(&mut rng, f, NUM_CLASSES as usize, Nonlinearity::None, false);
    b.finish(l)
}

/// Residual block with a 1x1 convolution on the shortcut path (48 units).
pub fn shortcut_net(seed: u64) -> NetworkSpec {
    let mut rng = rng_from_seed(seed);
    let mut b = Builder::new(INPUT_RESOLUTION);
    let c1 = b.conv(&mut rng, 0, 16, 3, 1, Nonlinearity::Relu);
    let p1 = b.pool(c1);
    let main = b.conv(&mut rng, p1, 32, 3, 1, Nonlinearity::Relu);
    let sc = b.conv(&mut rng, p1, 32, 1, 0, Nonlinearity::None);
    let a = b.add(main, sc, Nonlinearity::Relu);
    let p2 = b.pool(a);
    let f = b.flatten(p2);
    let l = b.linear(&mut rng, f, NUM_CLASSES as usize, Nonlinearity::None, false);
    b.finish(l)
}

/// Two chained identity blocks: three 12-channel convs share one decision
/// per channel (12 units spanning 3 atoms each, plus the first conv's 12).
pub fn chained_res_net(seed: u64) -> NetworkSpec {
    let mut rng = rng_from_seed(seed);
    let mut b = Builder::new(INPUT_RESOLUTION);
    let c0 = b.conv(&mut rng, 0, 12, 3, 1, Nonlinearity::Relu);
    let p0 = b.pool(c0);
    let c1 = b.conv(&mut rng, p0, 12, 3, 1, Nonlinearity::Relu);
    let c2 = b.conv(&mut rng, c1, 12, 3, 1, Nonlinearity::None);
    let a1 = b.add(c2, c1, Nonlinearity::Relu);
    let c3 = b.conv(&mut rng, a1, 12, 3, 1, Nonlinearity::None);
    let a2 = b.add(c3, a1, Nonlinearity::Relu);
    let p2 = b.pool(a2);
    let f = b.flatten(p2);
    let l = b.linear(&mut rng, f, NUM_CLASSES as usize, Nonlinearity::None, false);
    b.finish(l)
}

/// Chain with a batch-norm layer carrying non-trivial running statistics.
pub fn bn_chain_net(seed: u64) -> NetworkSpec {
    let mut rng = rng_from_seed(seed);
    let mut b = Builder::new(INPUT_RESOLUTION);
    let c1 = b.conv(&mut rng, 0, 8, 3, 1, Nonlinearity::None);
    let bn = b.batchnorm(&mut rng, c1, Nonlinearity::Relu);
    let p1 = b.pool(bn);
    let c2 = b.conv(&mut rng, p1, 16, 3, 1, Nonlinearity::Relu);
    let p2 = b.pool(c2);
    let f = b.flatten(p2);
    let l = b.linear(&mut rng, f, NUM_CLASSES as usize, Nonlinearity::None, false);
    b.finish(l)
}

/// Randomized topology for property tests: 1-2 stages, optional batch-norm,
/// optional residual block (identity or 1x1 shortcut), optional prunable
/// hidden linear layer.
pub fn random_net(rng: &mut ChaCha8Rng) -> NetworkSpec {
    let mut b = Builder::new(INPUT_RESOLUTION);
    let c1_out = rng.gen_range(3..=8);
    let mut cur = b.conv(rng, 0, c1_out, 3, 1, Nonlinearity::Relu);
    if rng.gen_bool(0.3) {
        cur = b.batchnorm(rng, cur, Nonlinearity::Relu);
    }
    cur = b.pool(cur);

    let c2_out = rng.gen_range(4..=10);
    if rng.gen_bool(0.5) {
        // residual block, identity or 1x1-conv shortcut
        let entry = b.conv(rng, cur, c2_out, 3, 1, Nonlinearity::Relu);
        cur = if rng.gen_bool(0.5) {
            let main = b.conv(rng, entry, c2_out, 3, 1, Nonlinearity::None);
            b.add(main, entry, Nonlinearity::Relu)
        } else {
            let main = b.conv(rng, entry, c2_out, 3, 1, Nonlinearity::None);
            let sc = b.conv(rng, entry, c2_out, 1, 0, Nonlinearity::None);
            b.add(main, sc, Nonlinearity::Relu)
        };
    } else {
        cur = b.conv(rng, cur, c2_out, 3, 1, Nonlinearity::Relu);
    }
    cur = b.pool(cur);
    cur = b.flatten(cur);
    if rng.gen_bool(0.3) {
        let h = rng.gen_range(6..=12);
        cur = b.linear(rng, cur, h, Nonlinearity::Relu, true);
    }
    let out = b.linear(rng, cur, NUM_CLASSES as usize, Nonlinearity::None, false);
    b.finish(out)
}
