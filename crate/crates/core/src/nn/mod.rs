//! Layers, the toy generator/encoder/discriminator architectures and the
//! model bundle that ties them together.

mod bundle;
mod weights;

pub use bundle::{ModelBundle, NormConstants, SignalKind};
pub use weights::{load_weights, save_weights, WEIGHTS_MAGIC, WEIGHTS_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn code(self) -> u32 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::LeakyRelu => 2,
            Activation::Tanh => 3,
            Activation::Sigmoid => 4,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        Ok(match code {
            0 => Activation::Identity,
            1 => Activation::Relu,
            2 => Activation::LeakyRelu,
            3 => Activation::Tanh,
            4 => Activation::Sigmoid,
            c => return Err(Error::Format(format!("unknown activation code {c}"))),
        })
    }

    pub fn apply<'t>(self, x: Var<'t>) -> Result<Var<'t>> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Relu => x.relu(),
            Activation::LeakyRelu => x.leaky_relu(LEAKY_SLOPE),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => x.sigmoid(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    TransposeConv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    /// `x + conv(leaky_relu(conv(x)))`, both convs same-padded.
    ResidualBlock {
        channels: usize,
        kernel: usize,
    },
    Activation(Activation),
    Reshape(Vec<usize>),
}

/// Width of one encoded layer row in the architecture descriptor.
pub(crate) const ARCH_ROW: usize = 8;

impl LayerSpec {
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let numel: usize = input.iter().product();
        let spatial = |op: &'static str, ch: usize| -> Result<(usize, usize)> {
            match *input {
                [c, h, w] if c == ch => Ok((h, w)),
                _ => Err(Error::shape(
                    op,
                    format!("input {input:?} does not have {ch} channels"),
                )),
            }
        };
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                if numel != inputs {
                    return Err(Error::shape(
                        "dense",
                        format!("{input:?} has {numel} elements, expected {inputs}"),
                    ));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
            } => {
                let (h, w) = spatial("conv2d", in_ch)?;
                if h + 2 * pad < kernel || w + 2 * pad < kernel || stride == 0 {
                    return Err(Error::shape(
                        "conv2d",
                        format!("kernel {kernel} too large for {input:?}"),
                    ));
                }
                Ok(vec![
                    out_ch,
                    (h + 2 * pad - kernel) / stride + 1,
                    (w + 2 * pad - kernel) / stride + 1,
                ])
            }
            LayerSpec::TransposeConv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
            } => {
                let (h, w) = spatial("transpose_conv2d", in_ch)?;
                let ho = (h - 1) * stride + kernel;
                let wo = (w - 1) * stride + kernel;
                if ho <= 2 * pad || wo <= 2 * pad {
                    return Err(Error::shape("transpose_conv2d", "padding exceeds output"));
                }
                Ok(vec![out_ch, ho - 2 * pad, wo - 2 * pad])
            }
            LayerSpec::ResidualBlock { channels, kernel } => {
                spatial("residual_block", channels)?;
                if kernel % 2 == 0 {
                    return Err(Error::shape("residual_block", "kernel must be odd"));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Activation(_) => Ok(input.to_vec()),
            LayerSpec::Reshape(ref shape) => {
                if shape.iter().product::<usize>() != numel {
                    return Err(Error::shape("reshape", format!("{input:?} -> {shape:?}")));
                }
                Ok(shape.clone())
            }
        }
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => vec![vec![outputs, inputs], vec![outputs, 1]],
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => vec![vec![out_ch, in_ch, kernel, kernel], vec![out_ch]],
            LayerSpec::TransposeConv2d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => vec![vec![in_ch, out_ch, kernel, kernel], vec![out_ch]],
            LayerSpec::ResidualBlock { channels, kernel } => vec![
                vec![channels, channels, kernel, kernel],
                vec![channels],
                vec![channels, channels, kernel, kernel],
                vec![channels],
            ],
            LayerSpec::Activation(_) | LayerSpec::Reshape(_) => Vec::new(),
        }
    }

    pub(crate) fn encode(&self) -> [u32; ARCH_ROW] {
        let mut row = [0u32; ARCH_ROW];
        let fill = |row: &mut [u32; ARCH_ROW], kind: u32, vals: &[usize]| {
            row[0] = kind;
            for (slot, v) in row[1..].iter_mut().zip(vals) {
                *slot = *v as u32;
            }
        };
        match *self {
            LayerSpec::Dense { inputs, outputs } => fill(&mut row, 1, &[inputs, outputs]),
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
            } => fill(&mut row, 2, &[in_ch, out_ch, kernel, stride, pad]),
            LayerSpec::TransposeConv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
            } => fill(&mut row, 3, &[in_ch, out_ch, kernel, stride, pad]),
            LayerSpec::ResidualBlock { channels, kernel } => fill(&mut row, 4, &[channels, kernel]),
            LayerSpec::Activation(a) => fill(&mut row, 5, &[a.code() as usize]),
            LayerSpec::Reshape(ref shape) => {
                let mut vals = vec![shape.len()];
                vals.extend(shape);
                fill(&mut row, 6, &vals)
            }
        }
        row
    }

    pub(crate) fn decode(row: &[u32]) -> Result<Self> {
        let v = |i: usize| row[i] as usize;
        Ok(match row[0] {
            1 => LayerSpec::Dense {
                inputs: v(1),
                outputs: v(2),
            },
            2 | 3 => {
                let (in_ch, out_ch, kernel, stride, pad) = (v(1), v(2), v(3), v(4), v(5));
                if row[0] == 2 {
                    LayerSpec::Conv2d {
                        in_ch,
                        out_ch,
                        kernel,
                        stride,
                        pad,
                    }
                } else {
                    LayerSpec::TransposeConv2d {
                        in_ch,
                        out_ch,
                        kernel,
                        stride,
                        pad,
                    }
                }
            }
            4 => LayerSpec::ResidualBlock {
                channels: v(1),
                kernel: v(2),
            },
            5 => LayerSpec::Activation(Activation::from_code(row[1])?),
            6 => {
                let rank = v(1);
                if rank == 0 || rank > ARCH_ROW - 2 {
                    return Err(Error::Format(format!("bad reshape rank {rank}")));
                }
                LayerSpec::Reshape(row[2..2 + rank].iter().map(|&d| d as usize).collect())
            }
            k => return Err(Error::Format(format!("unknown layer kind {k}"))),
        })
    }

    fn fan_in(&self) -> f64 {
        match *self {
            LayerSpec::Dense { inputs, .. } => inputs as f64,
            LayerSpec::Conv2d { in_ch, kernel, .. } => (in_ch * kernel * kernel) as f64,
            LayerSpec::TransposeConv2d {
                in_ch,
                kernel,
                stride,
                ..
            } => (in_ch * kernel * kernel) as f64 / (stride * stride) as f64,
            LayerSpec::ResidualBlock { channels, kernel } => (channels * kernel * kernel) as f64,
            _ => 1.0,
        }
    }
}

/// A feed-forward stack of layers with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    params: Vec<Tensor>,
}

impl Network {
    /// Builds a network with Kaiming-uniform weights and zero biases.
    pub fn new(
        input_shape: Vec<usize>,
        output_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut params = Vec::new();
        for layer in &layers {
            let gain = (6.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * layer.fan_in())).sqrt();
            for (j, shape) in layer.param_shapes().into_iter().enumerate() {
                let n: usize = shape.iter().product();
                let is_bias = j % 2 == 1;
                // Second conv of a residual branch starts small so blocks begin near identity.
                let scale = if matches!(layer, LayerSpec::ResidualBlock { .. }) && j == 2 {
                    0.1
                } else {
                    1.0
                };
                let data = if is_bias {
                    vec![0.0; n]
                } else {
                    (0..n).map(|_| rng.gen_range(-gain..gain) * scale).collect()
                };
                params.push(Tensor::new(shape, data)?);
            }
        }
        Self::from_parts(input_shape, output_shape, layers, params)
    }

    /// Assembles a network from explicit parameters, validating shapes.
    pub fn from_parts(
        input_shape: Vec<usize>,
        output_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        params: Vec<Tensor>,
    ) -> Result<Self> {
        let net = Network {
            input_shape,
            output_shape,
            layers,
            params,
        };
        net.check_shapes()?;
        Ok(net)
    }

    /// Verifies that layer shapes compose and end at the declared output shape,
    /// and that every parameter has its layer's shape.
    pub fn check_shapes(&self) -> Result<()> {
        let computed = self.computed_output_shape()?;
        if computed != self.output_shape {
            return Err(Error::shape(
                "network",
                format!(
                    "declared output {:?}, computed {computed:?}",
                    self.output_shape
                ),
            ));
        }
        let expected: Vec<Vec<usize>> = self.layers.iter().flat_map(|l| l.param_shapes()).collect();
        if expected.len() != self.params.len() {
            return Err(Error::shape(
                "network",
                format!(
                    "{} parameters, expected {}",
                    self.params.len(),
                    expected.len()
                ),
            ));
        }
        for (p, e) in self.params.iter().zip(&expected) {
            if p.shape() != e.as_slice() {
                return Err(Error::shape(
                    "network",
                    format!("parameter {:?}, expected {e:?}", p.shape()),
                ));
            }
        }
        Ok(())
    }

    pub fn computed_output_shape(&self) -> Result<Vec<usize>> {
        self.layers
            .iter()
            .try_fold(self.input_shape.clone(), |shape, l| l.output_shape(&shape))
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Zeroes the weights and bias of the last parametric layer.
    pub fn zero_last_layer(&mut self) {
        let Some(pos) = self
            .layers
            .iter()
            .rposition(|l| !l.param_shapes().is_empty())
        else {
            return;
        };
        let start: usize = self.layers[..pos]
            .iter()
            .map(|l| l.param_shapes().len())
            .sum();
        let count = self.layers[pos].param_shapes().len();
        for p in &mut self.params[start..start + count] {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Puts the parameters on `tape`, tracked when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.clone(), trainable))
            .collect()
    }

    pub fn forward<'t>(&self, params: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        let mut taps = self.run(params, x, false)?;
        Ok(taps.pop().expect("at least the input"))
    }

    /// Every intermediate value: index 0 is the input, index `i` the output of layer `i - 1`.
    pub fn forward_taps<'t>(&self, params: &[Var<'t>], x: Var<'t>) -> Result<Vec<Var<'t>>> {
        self.run(params, x, true)
    }

    fn run<'t>(&self, params: &[Var<'t>], x: Var<'t>, keep: bool) -> Result<Vec<Var<'t>>> {
        if x.value().shape() != self.input_shape.as_slice() {
            return Err(Error::shape(
                "network",
                format!("input {:?}, expected {:?}", x.shape(), self.input_shape),
            ));
        }
        if params.len() != self.params.len() {
            return Err(Error::shape("network", "parameter count mismatch"));
        }
        let mut taps = vec![x];
        let mut cur = x;
        let mut p = params.iter().copied();
        let mut next = || p.next().expect("parameter count checked");
        for layer in &self.layers {
            cur = match *layer {
                LayerSpec::Dense { inputs, outputs } => {
                    let (w, b) = (next(), next());
                    w.matmul(cur.reshape(vec![inputs, 1])?)?
                        .add(b)?
                        .reshape(vec![outputs])?
                }
                LayerSpec::Conv2d { stride, pad, .. } => {
                    let (w, b) = (next(), next());
                    cur.conv2d(w, Some(b), stride, pad)?
                }
                LayerSpec::TransposeConv2d { stride, pad, .. } => {
                    let (w, b) = (next(), next());
                    cur.transpose_conv2d(w, Some(b), stride, pad)?
                }
                LayerSpec::ResidualBlock { kernel, .. } => {
                    let (w1, b1, w2, b2) = (next(), next(), next(), next());
                    let pad = kernel / 2;
                    let h = cur.conv2d(w1, Some(b1), 1, pad)?.leaky_relu(LEAKY_SLOPE)?;
                    cur.add(h.conv2d(w2, Some(b2), 1, pad)?)?
                }
                LayerSpec::Activation(a) => a.apply(cur)?,
                LayerSpec::Reshape(ref shape) => cur.reshape(shape.clone())?,
            };
            if keep {
                taps.push(cur);
            } else {
                taps[0] = cur;
            }
        }
        if !keep {
            return Ok(vec![cur]);
        }
        Ok(taps)
    }

    /// Forward pass on a fresh tape without gradient tracking.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let params = self.bind(&tape, false);
        let out = self.forward(&params, tape.constant(x.clone()))?;
        Ok((*out.value()).clone())
    }
}

/// Architecture families shipped with the crate.
pub mod arch {
    use super::Activation::*;
    use super::LayerSpec::{self, *};

    const BASE: usize = 16;

    fn tconv(in_ch: usize, out_ch: usize) -> LayerSpec {
        TransposeConv2d {
            in_ch,
            out_ch,
            kernel: 4,
            stride: 2,
            pad: 1,
        }
    }

    fn conv(in_ch: usize, out_ch: usize) -> LayerSpec {
        Conv2d {
            in_ch,
            out_ch,
            kernel: 4,
            stride: 2,
            pad: 1,
        }
    }

    /// latent -> dense -> 16x4x4 -> three stride-2 transposed convs with two
    /// residual blocks -> `channels`x32x32, tanh.
    pub fn image_generator(latent_dim: usize, channels: usize) -> Vec<LayerSpec> {
        vec![
            Dense {
                inputs: latent_dim,
                outputs: BASE * 16,
            },
            Activation(LeakyRelu),
            Reshape(vec![BASE, 4, 4]),
            tconv(BASE, BASE),
            Activation(LeakyRelu),
            ResidualBlock {
                channels: BASE,
                kernel: 3,
            },
            tconv(BASE, 8),
            Activation(LeakyRelu),
            ResidualBlock {
                channels: 8,
                kernel: 3,
            },
            tconv(8, channels),
            Activation(Tanh),
        ]
    }

    pub fn image_encoder(latent_dim: usize, channels: usize) -> Vec<LayerSpec> {
        vec![
            conv(channels, 8),
            Activation(LeakyRelu),
            conv(8, BASE),
            Activation(LeakyRelu),
            conv(BASE, BASE),
            Activation(LeakyRelu),
            Reshape(vec![BASE * 16]),
            Dense {
                inputs: BASE * 16,
                outputs: latent_dim,
            },
        ]
    }

    pub fn image_discriminator(channels: usize) -> Vec<LayerSpec> {
        vec![
            conv(channels, 8),
            Activation(LeakyRelu),
            conv(8, BASE),
            Activation(LeakyRelu),
            Reshape(vec![BASE * 64]),
            Dense {
                inputs: BASE * 64,
                outputs: 1,
            },
        ]
    }

    /// Same topology as the image generator, with two more stride-2 stages
    /// to reach a 1x128x128 mel-spectrogram.
    pub fn speech_generator(latent_dim: usize) -> Vec<LayerSpec> {
        vec![
            Dense {
                inputs: latent_dim,
                outputs: BASE * 16,
            },
            Activation(LeakyRelu),
            Reshape(vec![BASE, 4, 4]),
            tconv(BASE, BASE),
            Activation(LeakyRelu),
            ResidualBlock {
                channels: BASE,
                kernel: 3,
            },
            tconv(BASE, 12),
            Activation(LeakyRelu),
            ResidualBlock {
                channels: 12,
                kernel: 3,
            },
            tconv(12, 8),
            Activation(LeakyRelu),
            tconv(8, 8),
            Activation(LeakyRelu),
            tconv(8, 1),
            Activation(Tanh),
        ]
    }

    pub fn speech_encoder(latent_dim: usize) -> Vec<LayerSpec> {
        vec![
            conv(1, 8),
            Activation(LeakyRelu),
            conv(8, 8),
            Activation(LeakyRelu),
            conv(8, BASE),
            Activation(LeakyRelu),
            conv(BASE, BASE),
            Activation(LeakyRelu),
            conv(BASE, BASE),
            Activation(LeakyRelu),
            Reshape(vec![BASE * 16]),
            Dense {
                inputs: BASE * 16,
                outputs: latent_dim,
            },
        ]
    }

    pub fn speech_discriminator() -> Vec<LayerSpec> {
        vec![
            conv(1, 8),
            Activation(LeakyRelu),
            conv(8, BASE),
            Activation(LeakyRelu),
            conv(BASE, BASE),
            Activation(LeakyRelu),
            Reshape(vec![BASE * 256]),
            Dense {
                inputs: BASE * 256,
                outputs: 1,
            },
        ]
    }
}

pub(crate) fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_rows_round_trip() {
        let layers = [
            arch::image_generator(64, 1),
            arch::speech_encoder(512),
            arch::image_discriminator(3),
        ];
        for l in layers.iter().flatten() {
            assert_eq!(&LayerSpec::decode(&l.encode()).unwrap(), l);
        }
    }

    #[test]
    fn declared_and_computed_shapes_disagree() {
        let mut rng = seeded(0);
        let err = Network::new(
            vec![8],
            vec![1, 16, 16],
            arch::image_generator(8, 1),
            &mut rng,
        );
        assert!(err.is_err());
    }

    #[test]
    fn residual_block_preserves_shape() {
        let l = LayerSpec::ResidualBlock {
            channels: 4,
            kernel: 3,
        };
        assert_eq!(l.output_shape(&[4, 9, 7]).unwrap(), vec![4, 9, 7]);
        assert!(l.output_shape(&[3, 9, 7]).is_err());
    }
}
