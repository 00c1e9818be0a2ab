//! Frozen image-to-latent encoders targeted by the adversarial loss.
//!
//! [`LatentEncoder`] is the contract any encoder honors (deterministic,
//! parameters never change, differentiable in its input). [`ToyEncoder`]
//! is a small convolutional stand-in with the same geometry as a latent
//! diffusion VAE: spatial factor 8, four latent channels.

use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::image::{Image, CHANNELS};
use crate::layers::{self, Conv2d, Op, PadMode, ParamSet};
use crate::networks::Counter;
use crate::rng::{seeded, standard_normal, stream};
use crate::tensor::Tensor;

/// `C x H/f x W/f` latent values.
pub type LatentCode = Tensor;

pub trait LatentEncoder {
    fn downsample_factor(&self) -> usize;
    fn latent_channels(&self) -> usize;
    /// Deterministic latent of an image in `[0, 1]` pixel units.
    fn encode(&self, img: &Image) -> Result<LatentCode>;
    /// Gradient of `<encode(img), upstream>` with respect to the pixels of `img`.
    fn encode_vjp(&self, img: &Image, upstream: &LatentCode) -> Result<Tensor>;
    /// Fingerprint of the frozen parameters.
    fn checksum(&self) -> u64;
    /// Number of encode / encode_vjp evaluations so far.
    fn calls(&self) -> usize;

    fn encode_batch(&self, imgs: &[Image]) -> Result<Vec<LatentCode>> {
        imgs.iter().map(|x| self.encode(x)).collect()
    }

    fn check_dims(&self, img: &Image) -> Result<()> {
        let f = self.downsample_factor();
        if img.height % f != 0 || img.width % f != 0 {
            bail!(Argument, "image {}x{} is not divisible by the encoder factor {f}", img.height, img.width);
        }
        Ok(())
    }
}

pub const TOY_FACTOR: usize = 8;
pub const TOY_LATENT_CHANNELS: usize = 4;
const TOY_WIDTHS: [usize; 3] = [16, 32, 32];
const CALIBRATION_SIZE: usize = 64;

/// Three non-overlapping 2x2 stride-2 convolutions with tanh, then a 1x1
/// projection to four channels. Every convolution is rescaled at
/// construction so its pre-activation output has unit variance on
/// standard-normal input, which bounds the Lipschitz constant of the stack.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    params: ParamSet,
    ops: Vec<Op>,
    pub seed: u64,
    calls: Counter,
}

impl ToyEncoder {
    pub fn new(seed: u64) -> Self {
        let mut rng = seeded(seed, stream::ENCODER_INIT);
        let mut params = ParamSet::default();
        let mut ops = Vec::new();
        let mut cin = CHANNELS;
        for (i, &cout) in TOY_WIDTHS.iter().enumerate() {
            let name = alloc::format!("enc{i}");
            ops.push(Op::Conv(Conv2d::new_init(&mut params, &name, cin, cout, (2, 2), 2, 0, PadMode::Zero, &mut rng)));
            ops.push(Op::Tanh);
            cin = cout;
        }
        ops.push(Op::Conv(Conv2d::new_init(
            &mut params,
            "proj",
            cin,
            TOY_LATENT_CHANNELS,
            (1, 1),
            1,
            0,
            PadMode::Zero,
            &mut rng,
        )));

        for t in params.tensors.iter_mut() {
            let w = t.data.len();
            if t.name.ends_with("bias") {
                t.data.iter_mut().for_each(|b| *b = 0.0);
            } else {
                let fan_in = (w / t.shape[0]) as f64;
                let std = 1.0 / libm::sqrt(fan_in);
                t.data.iter_mut().for_each(|v| *v = std * standard_normal(&mut rng));
            }
        }

        let noise = Tensor::from_vec(
            CHANNELS,
            CALIBRATION_SIZE,
            CALIBRATION_SIZE,
            (0..CHANNELS * CALIBRATION_SIZE * CALIBRATION_SIZE).map(|_| standard_normal(&mut rng)).collect(),
        );
        for i in (0..ops.len()).filter(|&i| matches!(ops[i], Op::Conv(_))) {
            let pre = layers::forward(&ops[..=i], &params, noise.clone(), None);
            let n = pre.data.len() as f64;
            let mean = pre.data.iter().sum::<f64>() / n;
            let var = pre.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let Op::Conv(conv) = &ops[i] else { unreachable!() };
            let s = 1.0 / libm::sqrt(var);
            params.tensors[conv.weight].data.iter_mut().for_each(|v| *v *= s);
        }

        ToyEncoder { params, ops, seed, calls: Counter::default() }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }
}

impl LatentEncoder for ToyEncoder {
    fn downsample_factor(&self) -> usize {
        TOY_FACTOR
    }

    fn latent_channels(&self) -> usize {
        TOY_LATENT_CHANNELS
    }

    fn encode(&self, img: &Image) -> Result<LatentCode> {
        self.check_dims(img)?;
        self.calls.bump();
        Ok(layers::forward(&self.ops, &self.params, img.to_signed_tensor(), None))
    }

    fn encode_vjp(&self, img: &Image, upstream: &LatentCode) -> Result<Tensor> {
        self.check_dims(img)?;
        let expect = (TOY_LATENT_CHANNELS, img.height / TOY_FACTOR, img.width / TOY_FACTOR);
        if upstream.shape() != expect {
            bail!(Shape, "latent gradient has shape {:?}, expected {expect:?}", upstream.shape());
        }
        self.calls.bump();
        let mut tape = Vec::new();
        let _ = layers::forward(&self.ops, &self.params, img.to_signed_tensor(), Some(&mut tape));
        // d(2x - 1)/dx = 2
        Ok(layers::backward(&self.ops, &self.params, tape, upstream.clone(), None).map(|g| 2.0 * g))
    }

    fn checksum(&self) -> u64 {
        self.params.checksum()
    }

    fn calls(&self) -> usize {
        self.calls.get()
    }
}
