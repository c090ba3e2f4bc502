//! Network building blocks: linear layers, leaky-ReLU MLPs, Gaussian output
//! heads (softplus std with pre-activation gradient clipping), and the tiny
//! stride-2 conv stack for 16x16 image observations.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Param, ParamGroup, Tape, Tensor};
use crate::distributions::DiagGaussian;

/// Gradient clip bound applied to pre-softplus std activations.
pub const STD_PRE_CLIP: f64 = 10.0;
/// Floor added to every softplus std head to keep KL terms finite.
pub const STD_FLOOR: f64 = 1e-4;

/// How parameters enter a tape: trainable leaves or stop-gradient constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bind {
    Trainable,
    Frozen,
}

fn bind(tape: &Tape, p: &Param, mode: Bind) -> Tensor {
    match mode {
        Bind::Trainable => tape.param(p),
        Bind::Frozen => tape.param_frozen(p),
    }
}

fn uniform_init(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

#[derive(Clone)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let bound = if in_dim > 0 { 1.0 / (in_dim as f64).sqrt() } else { 0.0 };
        Linear {
            w: Param::new(format!("{name}/w"), vec![in_dim, out_dim], uniform_init(rng, in_dim * out_dim, bound)),
            b: Param::new(format!("{name}/b"), vec![out_dim], uniform_init(rng, out_dim, bound)),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor, mode: Bind) -> Tensor {
        let w = bind(tape, &self.w, mode);
        let b = bind(tape, &self.b, mode);
        x.matmul(&w) + b
    }

    pub fn params(&self, group: &mut ParamGroup) {
        group.push(self.w.clone());
        group.push(self.b.clone());
    }
}

/// Fully connected trunk with leaky-ReLU hidden layers and a linear output.
/// Zero hidden layers collapse to a single linear map, which the hand-set
/// linear-Gaussian tests rely on.
#[derive(Clone)]
pub struct Mlp {
    pub hidden: Vec<Linear>,
    pub out: Linear,
}

impl Mlp {
    pub fn new(
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden.len());
        let mut d = in_dim;
        for (i, h) in hidden.iter().enumerate() {
            layers.push(Linear::new(rng, &format!("{name}/h{i}"), d, *h));
            d = *h;
        }
        Mlp { hidden: layers, out: Linear::new(rng, &format!("{name}/out"), d, out_dim) }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor, mode: Bind) -> Tensor {
        let mut h = x.clone();
        for layer in &self.hidden {
            h = layer.forward(tape, &h, mode).leaky_relu();
        }
        self.out.forward(tape, &h, mode)
    }

    pub fn params(&self, group: &mut ParamGroup) {
        for layer in &self.hidden {
            layer.params(group);
        }
        self.out.params(group);
    }
}

/// MLP trunk with a diagonal-Gaussian head: mean from one linear output, std
/// via softplus of another, with the pre-activation gradient clipped
/// elementwise to [-10, 10] and a small positive floor on the std.
#[derive(Clone)]
pub struct GaussianNet {
    pub trunk: Vec<Linear>,
    pub mean: Linear,
    pub std_pre: Linear,
}

impl GaussianNet {
    pub fn new(
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
    ) -> Self {
        let mut trunk = Vec::with_capacity(hidden.len());
        let mut d = in_dim;
        for (i, h) in hidden.iter().enumerate() {
            trunk.push(Linear::new(rng, &format!("{name}/h{i}"), d, *h));
            d = *h;
        }
        GaussianNet {
            trunk,
            mean: Linear::new(rng, &format!("{name}/mean"), d, out_dim),
            std_pre: Linear::new(rng, &format!("{name}/std"), d, out_dim),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor, mode: Bind) -> DiagGaussian {
        self.forward_scaled(tape, x, mode, 1.0)
    }

    /// Same head with the std multiplied by a constant (policy pre-squash
    /// scale knob).
    pub fn forward_scaled(&self, tape: &Tape, x: &Tensor, mode: Bind, std_scale: f64) -> DiagGaussian {
        let mut h = x.clone();
        for layer in &self.trunk {
            h = layer.forward(tape, &h, mode).leaky_relu();
        }
        let mean = self.mean.forward(tape, &h, mode);
        let pre = self.std_pre.forward(tape, &h, mode).clip_grad(STD_PRE_CLIP);
        let std = pre.softplus().scale(std_scale).add_scalar(STD_FLOOR);
        DiagGaussian::new(mean, std)
    }

    pub fn params(&self, group: &mut ParamGroup) {
        for layer in &self.trunk {
            layer.params(group);
        }
        self.mean.params(group);
        self.std_pre.params(group);
    }
}

/// 3-layer stride-2 conv encoder for 16x16 single-channel images:
/// 16 -> 8 -> 4 -> 2 spatially, then a linear readout to the feature width.
#[derive(Clone)]
pub struct ConvEncoder {
    pub kernels: Vec<Param>,
    pub biases: Vec<Param>,
    pub readout: Linear,
    pub channels: Vec<usize>,
}

pub const CONV_CHANNELS: [usize; 3] = [8, 16, 32];
pub const IMAGE_HW: usize = 16;

impl ConvEncoder {
    pub fn new(rng: &mut ChaCha8Rng, name: &str, in_channels: usize, feature_dim: usize) -> Self {
        let mut kernels = Vec::new();
        let mut biases = Vec::new();
        let mut c_in = in_channels;
        let mut channels = vec![in_channels];
        for (i, c_out) in CONV_CHANNELS.iter().enumerate() {
            let fan_in = c_in * 9;
            let bound = 1.0 / (fan_in as f64).sqrt();
            kernels.push(Param::new(
                format!("{name}/conv{i}/k"),
                vec![*c_out, c_in, 3, 3],
                uniform_init(rng, c_out * c_in * 9, bound),
            ));
            biases.push(Param::new(
                format!("{name}/conv{i}/b"),
                vec![1, *c_out, 1, 1],
                uniform_init(rng, *c_out, bound),
            ));
            channels.push(*c_out);
            c_in = *c_out;
        }
        let flat = CONV_CHANNELS[2] * 2 * 2;
        ConvEncoder { kernels, biases, readout: Linear::new(rng, &format!("{name}/read"), flat, feature_dim), channels }
    }

    /// Input [batch, c * 16 * 16] flattened; output [batch, feature_dim].
    pub fn forward(&self, tape: &Tape, x: &Tensor, mode: Bind) -> Tensor {
        let batch = x.shape()[0];
        let mut h = x.reshape(&[batch, self.channels[0], IMAGE_HW, IMAGE_HW]);
        for i in 0..self.kernels.len() {
            let k = bind(tape, &self.kernels[i], mode);
            let b = bind(tape, &self.biases[i], mode);
            h = (h.conv2d_s2(&k) + b).leaky_relu();
        }
        let flat = h.numel() / batch;
        self.readout.forward(tape, &h.reshape(&[batch, flat]), mode)
    }

    pub fn params(&self, group: &mut ParamGroup) {
        for k in &self.kernels {
            group.push(k.clone());
        }
        for b in &self.biases {
            group.push(b.clone());
        }
        self.readout.params(group);
    }
}

/// Mirror of the encoder: linear from latent to 2x2 feature maps, then
/// 3 stride-2 transposed convs back to 16x16.
#[derive(Clone)]
pub struct ConvDecoder {
    pub expand: Linear,
    pub kernels: Vec<Param>,
    pub biases: Vec<Param>,
    pub out_channels: usize,
}

impl ConvDecoder {
    pub fn new(rng: &mut ChaCha8Rng, name: &str, latent_dim: usize, out_channels: usize) -> Self {
        let flat = CONV_CHANNELS[2] * 2 * 2;
        let expand = Linear::new(rng, &format!("{name}/expand"), latent_dim, flat);
        let chain = [CONV_CHANNELS[2], CONV_CHANNELS[1], CONV_CHANNELS[0], out_channels];
        let mut kernels = Vec::new();
        let mut biases = Vec::new();
        for i in 0..3 {
            let (c_in, c_out) = (chain[i], chain[i + 1]);
            let bound = 1.0 / ((c_in * 9) as f64).sqrt();
            kernels.push(Param::new(
                format!("{name}/deconv{i}/k"),
                vec![c_in, c_out, 3, 3],
                uniform_init(rng, c_in * c_out * 9, bound),
            ));
            biases.push(Param::new(
                format!("{name}/deconv{i}/b"),
                vec![1, c_out, 1, 1],
                uniform_init(rng, c_out, bound),
            ));
        }
        ConvDecoder { expand, kernels, biases, out_channels }
    }

    /// Input [batch, latent]; output [batch, c * 16 * 16] flattened means.
    pub fn forward(&self, tape: &Tape, z: &Tensor, mode: Bind) -> Tensor {
        let batch = z.shape()[0];
        let mut h = self
            .expand
            .forward(tape, z, mode)
            .leaky_relu()
            .reshape(&[batch, CONV_CHANNELS[2], 2, 2]);
        for i in 0..self.kernels.len() {
            let k = bind(tape, &self.kernels[i], mode);
            let b = bind(tape, &self.biases[i], mode);
            h = h.conv_transpose2d_s2(&k) + b;
            if i + 1 < self.kernels.len() {
                h = h.leaky_relu();
            }
        }
        let flat = h.numel() / batch;
        h.reshape(&[batch, flat])
    }

    pub fn params(&self, group: &mut ParamGroup) {
        self.expand.params(group);
        for k in &self.kernels {
            group.push(k.clone());
        }
        for b in &self.biases {
            group.push(b.clone());
        }
    }
}
