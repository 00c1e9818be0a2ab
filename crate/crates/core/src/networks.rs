//! Perturbation generator and real/fake discriminator.
//!
//! Generator: `d64 d128 d256 | R256 x4 | u128 u64 | conv3x3-tanh`, fed the
//! image and the watermark mask stacked as four channels. Discriminator:
//! `C64 C128 C256 C512 C1024` (4x4, stride 2, LeakyReLU 0.2, instance norm on
//! all but the first) followed by one convolution that collapses the
//! remaining `H/32 x W/32` extent to a single logit.
//!
//! Channel counts scale with [`ArchConfig`]; the defaults are the full-size
//! 64-filter networks.

use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::image::{Image, Watermark, CHANNELS};
use crate::layers::{self, Cache, Conv2d, ConvTranspose2d, Grads, Op, PadMode, ParamSet};
use crate::rng::{seeded, stream};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const RESIDUAL_BLOCKS: usize = 4;
/// Five stride-2 discriminator layers.
pub const SIZE_MULTIPLE: usize = 32;

/// Base filter counts. Generator layers use `g, 2g, 4g`; discriminator
/// layers use `d, 2d, 4d, 8d, 16d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub generator_width: usize,
    pub discriminator_width: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig { generator_width: 64, discriminator_width: 64 }
    }
}

/// Monotone evaluation counter that survives `Clone` as a snapshot.
#[derive(Debug, Default)]
pub struct Counter(AtomicUsize);

impl Counter {
    pub fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    pub fn get(&self) -> usize {
        self.0.load(Ordering::Relaxed)
    }
}

impl Clone for Counter {
    fn clone(&self) -> Self {
        Counter(AtomicUsize::new(self.get()))
    }
}

/// Generator output: per-pixel deltas in `(-1, 1)` full-range units, `3 x H x W`.
pub type PerturbationField = Tensor;

#[derive(Debug, Clone)]
pub struct Generator {
    pub params: ParamSet,
    ops: Vec<Op>,
    pub image_size: (usize, usize),
    pub arch: ArchConfig,
    pub forward_calls: Counter,
    pub backward_calls: Counter,
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    pub params: ParamSet,
    ops: Vec<Op>,
    pub image_size: (usize, usize),
    pub arch: ArchConfig,
    pub forward_calls: Counter,
    pub backward_calls: Counter,
}

pub fn check_image_size(size: (usize, usize)) -> Result<()> {
    let (h, w) = size;
    if h == 0 || w == 0 || h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
        bail!(Argument, "image size {h}x{w} must be positive multiples of {SIZE_MULTIPLE}");
    }
    Ok(())
}

/// Deterministic initialization of both networks from one seed.
pub fn init_networks(seed: u64, image_size: (usize, usize), arch: ArchConfig) -> Result<(Generator, Discriminator)> {
    check_image_size(image_size)?;
    if arch.generator_width == 0 || arch.discriminator_width == 0 {
        bail!(Argument, "network widths must be positive");
    }
    Ok((Generator::new(seed, image_size, arch), Discriminator::new(seed, image_size, arch)))
}

impl Generator {
    fn new(seed: u64, image_size: (usize, usize), arch: ArchConfig) -> Self {
        let mut rng = seeded(seed, stream::GENERATOR_INIT);
        let mut params = ParamSet::default();
        let g = arch.generator_width;
        let mut ops = Vec::new();
        let reflect = PadMode::Reflect;

        // d64 keeps full resolution so the two upsampling layers restore H x W
        let encoder = [(CHANNELS + 1, g, 1), (g, 2 * g, 2), (2 * g, 4 * g, 2)];
        for (i, &(cin, cout, stride)) in encoder.iter().enumerate() {
            let name = alloc::format!("enc{i}");
            ops.push(Op::Conv(Conv2d::new_init(&mut params, &name, cin, cout, (3, 3), stride, 1, reflect, &mut rng)));
            ops.push(Op::InstanceNorm);
            ops.push(Op::Relu);
        }
        for r in 0..RESIDUAL_BLOCKS {
            let c = 4 * g;
            let a = Conv2d::new_init(&mut params, &alloc::format!("res{r}.a"), c, c, (3, 3), 1, 1, reflect, &mut rng);
            let b = Conv2d::new_init(&mut params, &alloc::format!("res{r}.b"), c, c, (3, 3), 1, 1, reflect, &mut rng);
            ops.push(Op::Residual(alloc::vec![Op::Conv(a), Op::InstanceNorm, Op::Relu, Op::Conv(b), Op::InstanceNorm]));
        }
        for (i, &(cin, cout)) in [(4 * g, 2 * g), (2 * g, g)].iter().enumerate() {
            let name = alloc::format!("dec{i}");
            ops.push(Op::ConvTranspose(ConvTranspose2d::new_init(&mut params, &name, cin, cout, 3, 2, 1, 1, &mut rng)));
            ops.push(Op::InstanceNorm);
            ops.push(Op::Relu);
        }
        ops.push(Op::Conv(Conv2d::new_init(&mut params, "head", g, CHANNELS, (3, 3), 1, 1, reflect, &mut rng)));
        ops.push(Op::Tanh);

        Generator {
            params,
            ops,
            image_size,
            arch,
            forward_calls: Counter::default(),
            backward_calls: Counter::default(),
        }
    }

    /// Rebuilds a generator around previously saved parameters.
    pub fn with_params(image_size: (usize, usize), arch: ArchConfig, params: ParamSet) -> Result<Self> {
        check_image_size(image_size)?;
        let mut g = Generator::new(0, image_size, arch);
        if !g.params.same_layout(&params) {
            bail!(Shape, "generator parameters do not match the {}-wide architecture", arch.generator_width);
        }
        g.params = params;
        Ok(g)
    }

    pub fn ops(&self) -> &[Op] {
        &self.ops
    }

    fn input(&self, x: &Image, m: &Watermark) -> Result<Tensor> {
        if x.dims() != m.dims() {
            bail!(Shape, "image is {:?} but watermark is {:?}", x.dims(), m.dims());
        }
        if x.dims() != self.image_size {
            bail!(Shape, "generator expects {:?} inputs, got {:?}", self.image_size, x.dims());
        }
        let mut data = x.to_signed_tensor().data;
        data.extend(m.to_signed_plane());
        Ok(Tensor::from_vec(CHANNELS + 1, x.height, x.width, data))
    }

    /// `G(x | m)`: perturbation in `(-1, 1)` full-range pixel units.
    pub fn forward(&self, x: &Image, m: &Watermark) -> Result<PerturbationField> {
        let input = self.input(x, m)?;
        self.forward_calls.bump();
        Ok(layers::forward(&self.ops, &self.params, input, None))
    }

    pub fn forward_taped(&self, x: &Image, m: &Watermark) -> Result<(PerturbationField, Vec<Cache>)> {
        let input = self.input(x, m)?;
        self.forward_calls.bump();
        let mut tape = Vec::new();
        let out = layers::forward(&self.ops, &self.params, input, Some(&mut tape));
        Ok((out, tape))
    }

    /// Accumulates parameter gradients of a scalar whose gradient with respect
    /// to the perturbation is `d_pert`.
    pub fn backward(&self, tape: Vec<Cache>, d_pert: PerturbationField, grads: &mut Grads) {
        self.backward_calls.bump();
        let _ = layers::backward(&self.ops, &self.params, tape, d_pert, Some(grads));
    }
}

impl Discriminator {
    fn new(seed: u64, image_size: (usize, usize), arch: ArchConfig) -> Self {
        let mut rng = seeded(seed, stream::DISCRIMINATOR_INIT);
        let mut params = ParamSet::default();
        let d = arch.discriminator_width;
        let mut ops = Vec::new();
        let mut cin = CHANNELS;
        for (i, mult) in [1, 2, 4, 8, 16].into_iter().enumerate() {
            let cout = d * mult;
            let name = alloc::format!("c{i}");
            ops.push(Op::Conv(Conv2d::new_init(&mut params, &name, cin, cout, (4, 4), 2, 1, PadMode::Zero, &mut rng)));
            // normalizing a single-pixel plane would zero it
            let plane = (image_size.0 >> (i + 1)) * (image_size.1 >> (i + 1));
            if i > 0 && plane > 1 {
                ops.push(Op::InstanceNorm);
            }
            ops.push(Op::LeakyRelu(LEAKY_SLOPE));
            cin = cout;
        }
        let kernel = (image_size.0 / SIZE_MULTIPLE, image_size.1 / SIZE_MULTIPLE);
        ops.push(Op::Conv(Conv2d::new_init(&mut params, "out", cin, 1, kernel, 1, 0, PadMode::Zero, &mut rng)));
        Discriminator {
            params,
            ops,
            image_size,
            arch,
            forward_calls: Counter::default(),
            backward_calls: Counter::default(),
        }
    }

    pub fn with_params(image_size: (usize, usize), arch: ArchConfig, params: ParamSet) -> Result<Self> {
        check_image_size(image_size)?;
        let mut d = Discriminator::new(0, image_size, arch);
        if !d.params.same_layout(&params) {
            bail!(
                Shape,
                "discriminator parameters do not match the {}-wide architecture at {:?}",
                arch.discriminator_width,
                image_size
            );
        }
        d.params = params;
        Ok(d)
    }

    /// Spatial size of the collapsing output kernel.
    pub fn final_kernel(&self) -> (usize, usize) {
        match self.ops.last() {
            Some(Op::Conv(c)) => c.kernel,
            _ => unreachable!("discriminator always ends in a convolution"),
        }
    }

    pub fn ops(&self) -> &[Op] {
        &self.ops
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if (x.height, x.width) != self.image_size || x.channels != CHANNELS {
            bail!(Shape, "discriminator expects 3x{:?} inputs, got {:?}", self.image_size, x.shape());
        }
        Ok(())
    }

    /// Pre-sigmoid score for a `[-1, 1]`-scaled image tensor.
    pub fn logit(&self, x: &Tensor) -> Result<f64> {
        self.check(x)?;
        self.forward_calls.bump();
        Ok(layers::forward(&self.ops, &self.params, x.clone(), None).data[0])
    }

    pub fn logit_taped(&self, x: &Tensor) -> Result<(f64, Vec<Cache>)> {
        self.check(x)?;
        self.forward_calls.bump();
        let mut tape = Vec::new();
        let out = layers::forward(&self.ops, &self.params, x.clone(), Some(&mut tape));
        Ok((out.data[0], tape))
    }

    /// Back-propagates `d_logit`; returns the gradient with respect to the
    /// `[-1, 1]`-scaled input and accumulates parameter gradients if asked.
    pub fn backward(&self, tape: Vec<Cache>, d_logit: f64, grads: Option<&mut Grads>) -> Tensor {
        self.backward_calls.bump();
        let dy = Tensor::from_vec(1, 1, 1, alloc::vec![d_logit]);
        layers::backward(&self.ops, &self.params, tape, dy, grads)
    }

    /// `D(x)`: probability that `x` is an original image.
    pub fn forward(&self, x: &Image) -> Result<f64> {
        Ok(sigmoid(self.logit(&x.to_signed_tensor())?))
    }

    pub fn forward_batch(&self, xs: &[Image]) -> Result<Vec<f64>> {
        xs.iter().map(|x| self.forward(x)).collect()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-z))
}
