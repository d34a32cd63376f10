//! The segmentation network and the surrogate that imitates the contour
//! solver. Both are small U-Net style encoder–decoders with padded 3×3
//! convolutions, 2×2 max pooling, and nearest upsampling followed by
//! convolution on the way up.

use rand::Rng;

use crate::autodiff::{ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::grid::{Image, Mask};

/// Shape of an encoder–decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetConfig {
    /// Number of down (and up) blocks.
    pub depth: usize,
    /// Channels after the first block; doubles per level.
    pub base_channels: usize,
    /// 3×3 convolutions per block.
    pub convs_per_block: usize,
}

impl NetConfig {
    pub const SEG_DEFAULT: NetConfig = NetConfig { depth: 2, base_channels: 8, convs_per_block: 2 };
    pub const APPROX_DEFAULT: NetConfig = NetConfig { depth: 3, base_channels: 8, convs_per_block: 2 };

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial sizes must be multiples of this.
    pub fn stride(&self) -> usize {
        1 << self.depth
    }

    /// Number of scalar parameters for a single-channel input.
    pub fn param_count(&self) -> usize {
        let conv3 = |i: usize, o: usize| 9 * i * o + o;
        let conv1 = |i: usize, o: usize| i * o + o;
        let block = |i: usize, o: usize| conv3(i, o) + (self.convs_per_block - 1) * conv3(o, o);
        let mut total = 0;
        let mut ch_in = 1;
        for l in 0..self.depth {
            total += block(ch_in, self.channels(l));
            ch_in = self.channels(l);
        }
        total += block(ch_in, self.channels(self.depth));
        for l in 0..self.depth {
            total += conv1(self.channels(l + 1), self.channels(l)) + block(2 * self.channels(l), self.channels(l));
        }
        total + conv1(self.channels(0), 1)
    }
}

/// Parameters and topology of an encoder–decoder with one input and one
/// output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderDecoder {
    cfg: NetConfig,
    params: ParamSet,
}

fn uniform_init<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let a = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-a..a))
}

impl EncoderDecoder {
    /// Weights drawn uniformly from `±√(6 / fan_in)`, biases zero.
    pub fn new<R: Rng + ?Sized>(cfg: NetConfig, rng: &mut R) -> Result<Self> {
        if cfg.depth == 0 || cfg.base_channels == 0 || cfg.convs_per_block == 0 {
            return Err(Error::InvalidArgument(format!("invalid network shape {cfg:?}")));
        }
        let mut params = ParamSet::new();
        let mut conv = |params: &mut ParamSet, name: String, i: usize, o: usize, k: usize| {
            params.push(format!("{name}.w"), uniform_init(rng, &[o, i, k, k], i * k * k));
            params.push(format!("{name}.b"), Tensor::zeros(&[o]));
        };
        let mut ch_in = 1;
        for l in 0..cfg.depth {
            for c in 0..cfg.convs_per_block {
                let i = if c == 0 { ch_in } else { cfg.channels(l) };
                conv(&mut params, format!("enc{l}.conv{c}"), i, cfg.channels(l), 3);
            }
            ch_in = cfg.channels(l);
        }
        for c in 0..cfg.convs_per_block {
            let i = if c == 0 { ch_in } else { cfg.channels(cfg.depth) };
            conv(&mut params, format!("mid.conv{c}"), i, cfg.channels(cfg.depth), 3);
        }
        for l in (0..cfg.depth).rev() {
            conv(&mut params, format!("dec{l}.reduce"), cfg.channels(l + 1), cfg.channels(l), 1);
            for c in 0..cfg.convs_per_block {
                let i = if c == 0 { 2 * cfg.channels(l) } else { cfg.channels(l) };
                conv(&mut params, format!("dec{l}.conv{c}"), i, cfg.channels(l), 3);
            }
        }
        conv(&mut params, "out".into(), cfg.channels(0), 1, 1);
        Ok(Self { cfg, params })
    }

    /// A network whose output equals `scale · input` for non-negative inputs:
    /// channel 0 is carried through the top level and the skip connection,
    /// every other weight is zero.
    pub fn passthrough(cfg: NetConfig, scale: f64) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut net = Self::new(cfg, &mut rng)?;
        for t in net.params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let identity = |t: &mut Tensor| {
            let [_, _, k, _] = t.dims4("weight").expect("rank-4 weight");
            // out 0, in 0, center tap
            t.data_mut()[(k / 2) * k + k / 2] = 1.0;
        };
        for c in 0..cfg.convs_per_block {
            identity(net.params.get_mut(&format!("enc0.conv{c}.w")).unwrap());
            identity(net.params.get_mut(&format!("dec0.conv{c}.w")).unwrap());
        }
        net.params.get_mut("out.w").unwrap().data_mut()[0] = scale;
        Ok(net)
    }

    pub fn config(&self) -> NetConfig {
        self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.params.bind(tape, requires_grad)
    }

    /// `x: [B,1,H,W]` → `[B,1,H,W]`, with `params` from [`Self::bind`].
    pub fn forward(&self, tape: &mut Tape, x: Var, params: &[Var]) -> Result<Var> {
        let [_, c, h, w] = tape.value(x).dims4("network input")?;
        if c != 1 {
            return Err(Error::Shape(format!("network expects one input channel, got {c}")));
        }
        let s = self.cfg.stride();
        if h % s != 0 || w % s != 0 {
            return Err(Error::Shape(format!("spatial size {h}x{w} is not divisible by {s}")));
        }
        if params.len() != self.params.len() {
            return Err(Error::Shape(format!("{} bound parameters, expected {}", params.len(), self.params.len())));
        }
        let mut p = params.iter().copied();
        let mut next = || p.next().expect("parameter count checked");
        let block = |tape: &mut Tape, mut h: Var, next: &mut dyn FnMut() -> Var| -> Result<Var> {
            for _ in 0..self.cfg.convs_per_block {
                let (wt, b) = (next(), next());
                h = tape.conv2d(h, wt, b, 1, 1)?;
                h = tape.relu(h)?;
            }
            Ok(h)
        };

        let mut skips = Vec::with_capacity(self.cfg.depth);
        let mut h = x;
        for _ in 0..self.cfg.depth {
            h = block(tape, h, &mut next)?;
            skips.push(h);
            h = tape.maxpool2x2(h)?;
        }
        h = block(tape, h, &mut next)?;
        for skip in skips.into_iter().rev() {
            let (wt, b) = (next(), next());
            h = tape.conv2d(h, wt, b, 0, 1)?;
            h = tape.relu(h)?;
            h = tape.upsample2x(h)?;
            h = tape.concat_channels(skip, h)?;
            h = block(tape, h, &mut next)?;
        }
        let (wt, b) = (next(), next());
        tape.conv2d(h, wt, b, 0, 1)
    }
}

/// Stacks equally sized images into a `[B,1,H,W]` tensor.
pub fn stack_images(images: &[&Image]) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(Error::Shape("empty image batch".into()));
    };
    let (h, w) = first.shape();
    let mut data = Vec::with_capacity(images.len() * h * w);
    for im in images {
        if im.shape() != (h, w) {
            return Err(Error::Shape(format!("image {:?} in a batch of {:?}", im.shape(), (h, w))));
        }
        data.extend_from_slice(im.data());
    }
    Tensor::new(&[images.len(), 1, h, w], data)
}

/// The segmentation network ψ producing the output map.
#[derive(Clone, Debug, PartialEq)]
pub struct SegNet(pub EncoderDecoder);

impl SegNet {
    pub fn new<R: Rng + ?Sized>(cfg: NetConfig, rng: &mut R) -> Result<Self> {
        EncoderDecoder::new(cfg, rng).map(Self)
    }

    pub fn net(&self) -> &EncoderDecoder {
        &self.0
    }

    pub fn net_mut(&mut self) -> &mut EncoderDecoder {
        &mut self.0
    }

    /// Real-valued output map with no final nonlinearity.
    pub fn forward(&self, tape: &mut Tape, image: Var, params: &[Var]) -> Result<Var> {
        self.0.forward(tape, image, params)
    }

    /// Inference on a batch of images, one output map per image.
    pub fn predict(&self, exec: Exec, images: &[&Image]) -> Result<Vec<Image>> {
        let mut tape = Tape::with_exec(exec);
        let params = self.0.bind(&mut tape, false);
        let x = tape.constant(stack_images(images)?);
        let y = self.forward(&mut tape, x, &params)?;
        let (h, w) = images[0].shape();
        tape.value(y)
            .data()
            .chunks(h * w)
            .map(|c| Image::from_vec(h, w, c.to_vec()))
            .collect()
    }
}

/// The surrogate F: maps a batch of warped maps `[B,1,N,M]` to per-line
/// softmax distributions `[B,N,M]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ApproxNet(pub EncoderDecoder);

impl ApproxNet {
    pub fn new<R: Rng + ?Sized>(cfg: NetConfig, rng: &mut R) -> Result<Self> {
        EncoderDecoder::new(cfg, rng).map(Self)
    }

    pub fn net(&self) -> &EncoderDecoder {
        &self.0
    }

    pub fn net_mut(&mut self) -> &mut EncoderDecoder {
        &mut self.0
    }

    /// The grid is zero-padded on the bottom and right to a multiple of the
    /// network stride, and the logits are cropped back to `N × M`.
    pub fn forward(&self, tape: &mut Tape, g: Var, params: &[Var]) -> Result<Var> {
        let [b, _, n, m] = tape.value(g).dims4("surrogate input")?;
        let s = self.0.cfg.stride();
        let (pn, pm) = (n.div_ceil(s) * s, m.div_ceil(s) * s);
        let x = if (pn, pm) != (n, m) { tape.pad2d(g, pn, pm)? } else { g };
        let mut y = self.0.forward(tape, x, params)?;
        if (pn, pm) != (n, m) {
            y = tape.crop2d(y, n, m)?;
        }
        let y = tape.reshape(y, &[b, n, m])?;
        tape.softmax_rows(y)
    }
}

/// Mean per-pixel binary cross-entropy of `sigmoid(output)` against the masks.
pub fn baseline_seg_loss(tape: &mut Tape, output: Var, masks: &[&Mask]) -> Result<Var> {
    let target: Vec<f64> = masks
        .iter()
        .flat_map(|m| m.data().iter().map(|&b| if b { 1.0 } else { 0.0 }))
        .collect();
    tape.bce_with_logits(output, &target)
}
