use super::{arch, seeded, Activation, LayerSpec, Network};
use crate::error::{Error, Result};
use crate::quant::Codebook;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SignalKind {
    Image,
    Speech,
}

impl SignalKind {
    pub fn code(self) -> u8 {
        match self {
            SignalKind::Image => 0,
            SignalKind::Speech => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(SignalKind::Image),
            1 => Ok(SignalKind::Speech),
            c => Err(Error::Format(format!("unknown signal kind {c}"))),
        }
    }
}

impl std::str::FromStr for SignalKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(SignalKind::Image),
            "speech" => Ok(SignalKind::Speech),
            other => Err(Error::InvalidArgument(format!(
                "unknown signal kind {other:?}"
            ))),
        }
    }
}

/// Log-domain range mapped onto `[-1, 1]` by the speech front end.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormConstants {
    pub floor: f64,
    pub ceiling: f64,
}

impl Default for NormConstants {
    fn default() -> Self {
        NormConstants {
            floor: -5.0,
            ceiling: 2.0,
        }
    }
}

fn round_f32(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
}

/// Generator, encoder and (optionally) discriminator with the metadata a
/// blob needs to be decoded. Immutable once built; parameters are kept on
/// the `f32` grid so the weight file round-trips exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    signal: SignalKind,
    latent_dim: usize,
    generator: Network,
    encoder: Network,
    discriminator: Option<Network>,
    norm: NormConstants,
    codebook: Option<Codebook>,
}

impl ModelBundle {
    pub fn new(
        signal: SignalKind,
        mut generator: Network,
        mut encoder: Network,
        mut discriminator: Option<Network>,
        norm: NormConstants,
        codebook: Option<Codebook>,
    ) -> Result<Self> {
        generator.check_shapes()?;
        encoder.check_shapes()?;
        let latent_dim = match *generator.input_shape() {
            [d] => d,
            ref s => {
                return Err(Error::shape(
                    "bundle",
                    format!("generator input {s:?} is not a vector"),
                ))
            }
        };
        if encoder.output_shape() != [latent_dim] {
            return Err(Error::shape(
                "bundle",
                format!(
                    "encoder output {:?}, latent_dim {latent_dim}",
                    encoder.output_shape()
                ),
            ));
        }
        let signal_shape = generator.output_shape().to_vec();
        if signal_shape.len() != 3 || encoder.input_shape() != signal_shape.as_slice() {
            return Err(Error::shape(
                "bundle",
                format!(
                    "encoder input {:?} vs generator output {signal_shape:?}",
                    encoder.input_shape()
                ),
            ));
        }
        if generator.layers().last() != Some(&LayerSpec::Activation(Activation::Tanh)) {
            return Err(Error::InvalidArgument("generator must end in tanh".into()));
        }
        if let Some(d) = &discriminator {
            d.check_shapes()?;
            if d.input_shape() != signal_shape.as_slice() || d.output_shape() != [1] {
                return Err(Error::shape(
                    "bundle",
                    "discriminator does not match signal shape",
                ));
            }
        }
        if signal == SignalKind::Speech && signal_shape != [1, 128, 128] {
            return Err(Error::shape(
                "bundle",
                format!("speech output must be 1x128x128, got {signal_shape:?}"),
            ));
        }
        if !(norm.ceiling > norm.floor) {
            return Err(Error::InvalidArgument(
                "norm ceiling must exceed floor".into(),
            ));
        }

        let nets = [
            Some(&mut generator),
            Some(&mut encoder),
            discriminator.as_mut(),
        ];
        for net in nets.into_iter().flatten() {
            net.params_mut().iter_mut().for_each(round_f32);
        }
        let norm = NormConstants {
            floor: norm.floor as f32 as f64,
            ceiling: norm.ceiling as f32 as f64,
        };
        Ok(ModelBundle {
            signal,
            latent_dim,
            generator,
            encoder,
            discriminator,
            norm,
            codebook,
        })
    }

    /// Freshly initialized toy architecture for `signal`. `channels` is
    /// ignored for speech (always one channel).
    pub fn init(signal: SignalKind, latent_dim: usize, channels: usize, seed: u64) -> Result<Self> {
        if latent_dim == 0 {
            return Err(Error::InvalidArgument("latent_dim must be positive".into()));
        }
        let mut rng = seeded(seed);
        let (g, e, d, shape) = match signal {
            SignalKind::Image => (
                arch::image_generator(latent_dim, channels),
                arch::image_encoder(latent_dim, channels),
                arch::image_discriminator(channels),
                vec![channels, 32, 32],
            ),
            SignalKind::Speech => (
                arch::speech_generator(latent_dim),
                arch::speech_encoder(latent_dim),
                arch::speech_discriminator(),
                vec![1, 128, 128],
            ),
        };
        let generator = Network::new(vec![latent_dim], shape.clone(), g, &mut rng)?;
        let encoder = Network::new(shape.clone(), vec![latent_dim], e, &mut rng)?;
        let discriminator = Network::new(shape, vec![1], d, &mut rng)?;
        ModelBundle::new(
            signal,
            generator,
            encoder,
            Some(discriminator),
            NormConstants::default(),
            None,
        )
    }

    pub fn signal(&self) -> SignalKind {
        self.signal
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn signal_shape(&self) -> &[usize] {
        self.generator.output_shape()
    }

    pub fn generator(&self) -> &Network {
        &self.generator
    }

    pub fn encoder(&self) -> &Network {
        &self.encoder
    }

    pub fn discriminator(&self) -> Option<&Network> {
        self.discriminator.as_ref()
    }

    pub fn norm(&self) -> NormConstants {
        self.norm
    }

    pub fn codebook(&self) -> Option<&Codebook> {
        self.codebook.as_ref()
    }

    pub fn with_codebook(mut self, codebook: Codebook) -> Self {
        self.codebook = Some(codebook);
        self
    }

    pub fn with_norm(self, norm: NormConstants) -> Result<Self> {
        ModelBundle::new(
            self.signal,
            self.generator,
            self.encoder,
            self.discriminator,
            norm,
            self.codebook,
        )
    }

    pub fn without_discriminator(mut self) -> Self {
        self.discriminator = None;
        self
    }

    pub fn into_networks(self) -> (Network, Network, Option<Network>) {
        (self.generator, self.encoder, self.discriminator)
    }

    /// 64-bit content hash of the serialized weights.
    pub fn model_id(&self) -> u64 {
        super::weights::content_hash(&super::save_weights(self))
    }

    pub fn generator_forward(&self, z: &[f64]) -> Result<Tensor> {
        if z.len() != self.latent_dim {
            return Err(Error::shape(
                "generator_forward",
                format!(
                    "latent has {} elements, expected {}",
                    z.len(),
                    self.latent_dim
                ),
            ));
        }
        self.generator.infer(&Tensor::from_vec(z.to_vec()))
    }

    pub fn encoder_forward(&self, x: &Tensor) -> Result<Vec<f64>> {
        if x.shape() != self.signal_shape() {
            return Err(Error::shape(
                "encoder_forward",
                format!("signal {:?}, expected {:?}", x.shape(), self.signal_shape()),
            ));
        }
        Ok(self.encoder.infer(x)?.into_data())
    }
}
