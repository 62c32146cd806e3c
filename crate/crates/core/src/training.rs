//! Two-stage toy training: an LSGAN with a cascaded encoder trained on
//! continuous latents, a codebook fitted on searched latents, then
//! fine-tuning on quantized encoder latents with a straight-through
//! estimator.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::admm::{latent_search, AdmmConfig};
use crate::error::{Error, Result};
use crate::losses::{mse, LossSpec};
use crate::nn::{ModelBundle, Network, NormConstants, SignalKind};
use crate::pipelines::speech::{mel_forward, stft, LOG_EPS, SEGMENT_SAMPLES};
use crate::pipelines::{self, load_image, load_wav, Waveform};
use crate::quant::{fit_codebook, quantize_project, Codebook, SourceStats};
use crate::tensor::{Tape, Tensor, Var};

/// Signals of one kind, all with the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    signal: SignalKind,
    items: Vec<Tensor>,
    norm: Option<NormConstants>,
}

impl Dataset {
    pub fn new(
        signal: SignalKind,
        items: Vec<Tensor>,
        norm: Option<NormConstants>,
    ) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if items.iter().any(|t| t.shape() != items[0].shape()) {
            return Err(Error::shape("dataset", "items differ in shape"));
        }
        Ok(Dataset {
            signal,
            items,
            norm,
        })
    }

    pub fn signal(&self) -> SignalKind {
        self.signal
    }

    pub fn items(&self) -> &[Tensor] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn shape(&self) -> &[usize] {
        self.items[0].shape()
    }

    /// Log-mel range of a speech corpus.
    pub fn norm(&self) -> Option<NormConstants> {
        self.norm
    }

    /// Splits off the last `n` items as a held-out set.
    pub fn split(mut self, n: usize) -> Result<(Dataset, Dataset)> {
        if n == 0 || n >= self.items.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot hold out {n} of {} items",
                self.items.len()
            )));
        }
        let test = self.items.split_off(self.items.len() - n);
        let norm = self.norm;
        Ok((self.clone(), Dataset::new(self.signal, test, norm)?))
    }
}

/// `synthetic:shapes[:count=N,seed=S]`, `synthetic:tones[:...]`, or a directory.
#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    Shapes { count: usize, seed: u64 },
    Tones { count: usize, seed: u64 },
    Directory(PathBuf),
}

impl std::str::FromStr for DatasetSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let Some(rest) = s.strip_prefix("synthetic:") else {
            return Ok(DatasetSpec::Directory(PathBuf::from(s)));
        };
        let (kind, opts) = rest.split_once(':').unwrap_or((rest, ""));
        let (mut count, mut seed) = (256, 0);
        for kv in opts.split(',').filter(|o| !o.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("bad dataset option {kv:?}")))?;
            let n: u64 = v
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad dataset option value {kv:?}")))?;
            match k {
                "count" => count = n as usize,
                "seed" => seed = n,
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown dataset option {k:?}"
                    )))
                }
            }
        }
        match kind {
            "shapes" => Ok(DatasetSpec::Shapes { count, seed }),
            "tones" => Ok(DatasetSpec::Tones { count, seed }),
            _ => Err(Error::InvalidArgument(format!(
                "unknown synthetic dataset {kind:?}"
            ))),
        }
    }
}

impl DatasetSpec {
    pub fn signal(&self) -> Option<SignalKind> {
        match self {
            DatasetSpec::Shapes { .. } => Some(SignalKind::Image),
            DatasetSpec::Tones { .. } => Some(SignalKind::Speech),
            DatasetSpec::Directory(_) => None,
        }
    }

    pub fn load(&self, signal: SignalKind) -> Result<Dataset> {
        match *self {
            DatasetSpec::Shapes { count, seed } => shapes_dataset(count, seed),
            DatasetSpec::Tones { count, seed } => tones_dataset(count, seed),
            DatasetSpec::Directory(ref dir) => directory_dataset(dir, signal),
        }
    }
}

pub const SHAPE_SIZE: usize = 32;

/// One 32x32 grayscale image: a shaded background with one to three
/// rectangles or discs.
pub fn synthetic_shape(rng: &mut impl Rng) -> Tensor {
    let n = SHAPE_SIZE;
    let base = rng.gen_range(-0.9..-0.1);
    let (gx, gy) = (rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
    let mut img: Vec<f64> = (0..n * n)
        .map(|i| {
            let (y, x) = ((i / n) as f64 / n as f64, (i % n) as f64 / n as f64);
            base + gx * (x - 0.5) + gy * (y - 0.5)
        })
        .collect();
    for _ in 0..rng.gen_range(1..=3) {
        let level = rng.gen_range(-0.2..0.95);
        let (cx, cy) = (rng.gen_range(6.0..26.0), rng.gen_range(6.0..26.0));
        if rng.gen_bool(0.5) {
            let (hw, hh) = (rng.gen_range(3.0..10.0), rng.gen_range(3.0..10.0));
            for (i, p) in img.iter_mut().enumerate() {
                let (y, x) = ((i / n) as f64 + 0.5, (i % n) as f64 + 0.5);
                if (x - cx).abs() <= hw && (y - cy).abs() <= hh {
                    *p = level;
                }
            }
        } else {
            let r = rng.gen_range(3.0..9.0);
            for (i, p) in img.iter_mut().enumerate() {
                let (y, x) = ((i / n) as f64 + 0.5, (i % n) as f64 + 0.5);
                if (x - cx).powi(2) + (y - cy).powi(2) <= r * r {
                    *p = level;
                }
            }
        }
    }
    img.iter_mut().for_each(|p| *p = p.clamp(-1.0, 1.0));
    Tensor::new(vec![1, n, n], img).expect("fixed shape")
}

pub fn shapes_dataset(count: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Dataset::new(
        SignalKind::Image,
        (0..count).map(|_| synthetic_shape(&mut rng)).collect(),
        None,
    )
}

/// One 16384-sample segment: a gliding harmonic tone with an amplitude
/// envelope over low-level noise.
pub fn synthetic_tone(rng: &mut impl Rng) -> Vec<f64> {
    let f0 = rng.gen_range(100.0..300.0);
    let glide = rng.gen_range(-0.3..0.3);
    let harmonics = rng.gen_range(3..=8);
    let decay: f64 = rng.gen_range(0.5..0.9);
    let amp = rng.gen_range(0.1..0.4);
    let noise = rng.gen_range(0.001..0.02);
    let (on, off) = (rng.gen_range(0.0..0.3), rng.gen_range(0.7..1.0));
    let mut phase = 0.0;
    (0..SEGMENT_SAMPLES)
        .map(|i| {
            let t = i as f64 / SEGMENT_SAMPLES as f64;
            let f = f0 * (1.0 + glide * t);
            phase += 2.0 * PI * f / 16000.0;
            let env = if t < on || t > off {
                0.05
            } else {
                (PI * (t - on) / (off - on)).sin().max(0.05)
            };
            let tone: f64 = (1..=harmonics)
                .map(|h| decay.powi(h as i32 - 1) * (h as f64 * phase).sin())
                .sum();
            amp * env * tone / harmonics as f64 * 2.0 + noise * rng.gen_range(-1.0..1.0)
        })
        .collect()
}

/// Linear mel energies (`128 x 128`) of one segment.
fn segment_mel(segment: &[f64]) -> Result<Vec<f64>> {
    let spec = stft(segment)?;
    mel_forward(&spec.magnitudes(), spec.frames())
}

/// Log-mel range of a corpus, floored at `log10(eps)`.
pub fn fit_norm(mels: &[Vec<f64>]) -> Result<NormConstants> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for m in mels.iter().flatten() {
        let l = (m + LOG_EPS).log10();
        lo = lo.min(l);
        hi = hi.max(l);
    }
    if !(hi > lo) {
        return Err(Error::InvalidArgument("corpus has no dynamic range".into()));
    }
    Ok(NormConstants {
        floor: lo.max(LOG_EPS.log10()),
        ceiling: hi,
    })
}

fn speech_dataset(segments: Vec<Vec<f64>>) -> Result<Dataset> {
    if segments.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mels = segments
        .iter()
        .map(|s| segment_mel(s))
        .collect::<Result<Vec<_>>>()?;
    let norm = fit_norm(&mels)?;
    let norm = NormConstants {
        floor: norm.floor as f32 as f64,
        ceiling: norm.ceiling as f32 as f64,
    };
    let items = mels
        .iter()
        .map(|m| Tensor::new(vec![1, 128, 128], pipelines::log_normalize(m, norm)?))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(SignalKind::Speech, items, Some(norm))
}

pub fn tones_dataset(count: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    speech_dataset((0..count).map(|_| synthetic_tone(&mut rng)).collect())
}

/// Every `.pgm`/`.ppm` (images) or `.wav` (speech) file in `dir`, in name order.
pub fn directory_dataset(dir: &Path, signal: SignalKind) -> Result<Dataset> {
    let exts: &[&str] = match signal {
        SignalKind::Image => &["pgm", "ppm"],
        SignalKind::Speech => &["wav"],
    };
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| exts.contains(&e))
        })
        .collect();
    paths.sort();
    match signal {
        SignalKind::Image => {
            let items = paths
                .iter()
                .map(|p| load_image(p).map(|i| i.into_pixels()))
                .collect::<Result<Vec<_>>>()?;
            Dataset::new(signal, items, None)
        }
        SignalKind::Speech => {
            let mut segs = Vec::new();
            for p in &paths {
                let w: Waveform = load_wav(p)?;
                segs.extend(crate::pipelines::speech::segments(&w));
            }
            speech_dataset(segs)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub signal: SignalKind,
    pub latent_dim: usize,
    pub epochs: usize,
    pub stage_two_epochs: usize,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_encoder: f64,
    pub lr_discriminator: f64,
    pub lambda_adv: f64,
    pub seed: u64,
    /// Codebook size fitted between the stages.
    pub levels: usize,
    /// Held-out items taken from the end of the dataset.
    pub holdout: usize,
    /// Update encoder and discriminator in stage two as well as the generator.
    pub stage_two_update_all: bool,
    /// Training items searched when fitting the codebook (0 = all).
    pub codebook_samples: usize,
    /// Search schedule used when fitting the codebook.
    pub codebook_search: AdmmConfig,
}

impl TrainConfig {
    pub fn new(signal: SignalKind) -> Self {
        TrainConfig {
            signal,
            latent_dim: match signal {
                SignalKind::Image => 64,
                SignalKind::Speech => 128,
            },
            epochs: 20,
            stage_two_epochs: 10,
            batch_size: 16,
            lr_generator: 2e-3,
            lr_encoder: 2e-3,
            lr_discriminator: 1e-3,
            lambda_adv: 0.1,
            seed: 0,
            levels: 16,
            holdout: 50,
            stage_two_update_all: true,
            codebook_samples: 64,
            codebook_search: AdmmConfig {
                admm_iters: 10,
                ..AdmmConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr_generator, self.lr_encoder, self.lr_discriminator];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) || !(self.lambda_adv >= 0.0) {
            return Err(Error::InvalidArgument(
                "learning rates must be positive and lambda_adv >= 0".into(),
            ));
        }
        if self.batch_size == 0 || self.latent_dim == 0 {
            return Err(Error::InvalidArgument(
                "batch_size and latent_dim must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Adam over a list of parameter tensors.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.5;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(lr: f64, params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|p| Tensor::zeros(p.shape().to_vec()))
            .collect();
        Adam {
            lr,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = Self::BETA1 * m[j] + (1.0 - Self::BETA1) * gj;
                v[j] = Self::BETA2 * v[j] + (1.0 - Self::BETA2) * gj * gj;
                *w -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub stage: u8,
    pub epoch: usize,
    pub recon: f64,
    pub adv_generator: f64,
    pub loss_discriminator: f64,
    /// Held-out MSE of `G(E(x))` in stage one, `G(Q(E(x)))` in stage two.
    pub heldout_recon: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Format(e.to_string());
        w.write_record([
            "stage",
            "epoch",
            "recon",
            "adv_generator",
            "loss_discriminator",
            "heldout_recon",
        ])
        .map_err(io)?;
        for r in &self.rows {
            w.write_record([
                r.stage.to_string(),
                r.epoch.to_string(),
                format!("{:.8e}", r.recon),
                format!("{:.8e}", r.adv_generator),
                format!("{:.8e}", r.loss_discriminator),
                format!("{:.8e}", r.heldout_recon),
            ])
            .map_err(io)?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Format(e.to_string()))?)
            .map_err(|e| Error::Format(e.to_string()))
    }
}

struct Nets {
    g: Network,
    e: Network,
    d: Network,
}

/// Mean held-out MSE of `G(E(x))`, or `G(Q(E(x)))` with a codebook.
pub fn heldout_mse(
    bundle: &ModelBundle,
    data: &Dataset,
    codebook: Option<&Codebook>,
) -> Result<f64> {
    heldout_nets(bundle.generator(), bundle.encoder(), data, codebook)
}

fn heldout_nets(
    g: &Network,
    e: &Network,
    data: &Dataset,
    codebook: Option<&Codebook>,
) -> Result<f64> {
    let mut total = 0.0;
    for x in data.items() {
        let mut z = e.infer(x)?.into_data();
        if let Some(cb) = codebook {
            z = quantize_project(&z, cb).0;
        }
        let g = g.infer(&Tensor::from_vec(z))?;
        total += crate::losses::mse_value(x, &g)?;
    }
    Ok(total / data.len() as f64)
}

fn accumulate<'t>(acc: &mut Option<Var<'t>>, v: Var<'t>) -> Result<()> {
    *acc = Some(match acc.take() {
        Some(s) => s.add(v)?,
        None => v,
    });
    Ok(())
}

fn lsgan_term<'t>(d_out: Var<'t>, target: f64) -> Result<Var<'t>> {
    d_out.add_scalar(-target)?.square()?.sum()
}

fn prior_latent(rng: &mut ChaCha8Rng, dim: usize) -> Tensor {
    Tensor::from_vec(
        (0..dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect(),
    )
}

/// One optimizer step for the discriminator, then one for the generator
/// (and encoder). Returns (recon, adversarial, discriminator) batch losses.
fn train_batch(
    nets: &mut Nets,
    opts: &mut [Adam; 3],
    batch: &[&Tensor],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    codebook: Option<&Codebook>,
    update_encoder: bool,
    update_discriminator: bool,
    step: usize,
) -> Result<(f64, f64, f64)> {
    let dim = config.latent_dim;
    let priors: Vec<Tensor> = batch.iter().map(|_| prior_latent(rng, dim)).collect();
    let encode = |e: &Network, x: &Tensor| -> Result<Vec<f64>> {
        let z = e.infer(x)?.into_data();
        Ok(match codebook {
            Some(cb) => quantize_project(&z, cb).0,
            None => z,
        })
    };

    let mut loss_d = 0.0;
    if update_discriminator && config.lambda_adv > 0.0 {
        let tape = Tape::new();
        let dp = nets.d.bind(&tape, true);
        let mut total: Option<Var> = None;
        for (x, zp) in batch.iter().zip(&priors) {
            let real = nets.d.forward(&dp, tape.constant((*x).clone()))?;
            accumulate(&mut total, lsgan_term(real, 1.0)?)?;
            let fake = nets.g.infer(&Tensor::from_vec(encode(&nets.e, x)?))?;
            accumulate(
                &mut total,
                lsgan_term(nets.d.forward(&dp, tape.constant(fake))?, 0.0)?,
            )?;
            let prior_fake = nets.g.infer(zp)?;
            accumulate(
                &mut total,
                lsgan_term(nets.d.forward(&dp, tape.constant(prior_fake))?, 0.0)?,
            )?;
        }
        let loss = total
            .expect("non-empty batch")
            .scale(1.0 / batch.len() as f64)?;
        loss_d = loss.item();
        let grads = tape.backward(loss).map_err(|e| diverged(e, step))?;
        let g: Vec<Tensor> = dp.iter().map(|&p| grads.wrt(p)).collect();
        opts[2].step(nets.d.params_mut(), &g);
    }

    let tape = Tape::new();
    let gp = nets.g.bind(&tape, true);
    let ep = nets.e.bind(&tape, update_encoder);
    let dp = nets.d.bind(&tape, false);
    let mut recon: Option<Var> = None;
    let mut adv: Option<Var> = None;
    for (x, zp) in batch.iter().zip(&priors) {
        let xv = tape.constant((*x).clone());
        let mut z = nets.e.forward(&ep, xv)?;
        if let Some(cb) = codebook {
            let (q, _) = quantize_project(z.value().data(), cb);
            z = z.straight_through(Tensor::from_vec(q))?;
        }
        let xh = nets.g.forward(&gp, z)?;
        accumulate(&mut recon, mse(xv, xh)?)?;
        if config.lambda_adv > 0.0 {
            accumulate(&mut adv, lsgan_term(nets.d.forward(&dp, xh)?, 1.0)?)?;
            let g_prior = nets.g.forward(&gp, tape.constant(zp.clone()))?;
            accumulate(&mut adv, lsgan_term(nets.d.forward(&dp, g_prior)?, 1.0)?)?;
        }
    }
    let n = batch.len() as f64;
    let recon = recon.expect("non-empty batch").scale(1.0 / n)?;
    let (loss, adv_value) = match adv {
        Some(a) => {
            let a = a.scale(1.0 / n)?;
            (recon.add(a.scale(config.lambda_adv)?)?, a.item())
        }
        None => (recon, 0.0),
    };
    let recon_value = recon.item();
    let grads = tape.backward(loss).map_err(|e| diverged(e, step))?;
    let g: Vec<Tensor> = gp.iter().map(|&p| grads.wrt(p)).collect();
    opts[0].step(nets.g.params_mut(), &g);
    if update_encoder {
        let g: Vec<Tensor> = ep.iter().map(|&p| grads.wrt(p)).collect();
        opts[1].step(nets.e.params_mut(), &g);
    }
    Ok((recon_value, adv_value, loss_d))
}

fn diverged(e: Error, iteration: usize) -> Error {
    match e {
        Error::NonFinite(_) => Error::Divergence { iteration },
        e => e,
    }
}

#[allow(clippy::too_many_arguments)]
fn run_epochs(
    nets: &mut Nets,
    config: &TrainConfig,
    train: &Dataset,
    heldout: &Dataset,
    epochs: usize,
    stage: u8,
    codebook: Option<&Codebook>,
    rng: &mut ChaCha8Rng,
    log: &mut TrainLog,
) -> Result<()> {
    let update_all = stage == 1 || config.stage_two_update_all;
    let mut opts = [
        Adam::new(config.lr_generator, nets.g.params()),
        Adam::new(config.lr_encoder, nets.e.params()),
        Adam::new(config.lr_discriminator, nets.d.params()),
    ];
    log.rows.push(LogRow {
        stage,
        epoch: 0,
        recon: f64::NAN,
        adv_generator: f64::NAN,
        loss_discriminator: f64::NAN,
        heldout_recon: heldout_nets(&nets.g, &nets.e, heldout, codebook)?,
    });
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for epoch in 1..=epochs {
        order.shuffle(rng);
        let (mut r, mut a, mut d, mut batches) = (0.0, 0.0, 0.0, 0);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Tensor> = chunk.iter().map(|&i| &train.items()[i]).collect();
            step += 1;
            let (br, ba, bd) = train_batch(
                nets, &mut opts, &batch, config, rng, codebook, update_all, update_all, step,
            )?;
            if !(br.is_finite() && ba.is_finite() && bd.is_finite()) {
                return Err(Error::Divergence { iteration: step });
            }
            r += br;
            a += ba;
            d += bd;
            batches += 1;
        }
        let b = batches as f64;
        log.rows.push(LogRow {
            stage,
            epoch,
            recon: r / b,
            adv_generator: a / b,
            loss_discriminator: d / b,
            heldout_recon: heldout_nets(&nets.g, &nets.e, heldout, codebook)?,
        });
    }
    Ok(())
}

fn check_data(config: &TrainConfig, train: &Dataset) -> Result<()> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if train.signal() != config.signal {
        return Err(Error::InvalidArgument(
            "dataset signal kind does not match the config".into(),
        ));
    }
    Ok(())
}

/// Stage one: GAN plus autoencoder reconstruction on continuous latents.
pub fn train_stage_one(
    config: &TrainConfig,
    train: &Dataset,
    heldout: &Dataset,
) -> Result<(ModelBundle, TrainLog)> {
    check_data(config, train)?;
    let channels = train.shape()[0];
    let init = ModelBundle::init(config.signal, config.latent_dim, channels, config.seed)?;
    if init.signal_shape() != train.shape() {
        return Err(Error::shape(
            "train",
            format!(
                "dataset items {:?}, model expects {:?}",
                train.shape(),
                init.signal_shape()
            ),
        ));
    }
    let norm = train.norm().unwrap_or_default();
    let (g, e, d) = init.into_networks();
    let mut nets = Nets {
        g,
        e,
        d: d.expect("init builds a discriminator"),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0001);
    let mut log = TrainLog::default();
    run_epochs(
        &mut nets,
        config,
        train,
        heldout,
        config.epochs,
        1,
        None,
        &mut rng,
        &mut log,
    )?;
    let bundle = ModelBundle::new(config.signal, nets.g, nets.e, Some(nets.d), norm, None)?;
    Ok((bundle, log))
}

/// Pools the unconstrained search latents of (up to `samples`) training
/// items and fits a `k`-level codebook to them.
pub fn fit_stage_codebook(
    bundle: &ModelBundle,
    train: &Dataset,
    k: usize,
    samples: usize,
    search: &AdmmConfig,
    seed: u64,
) -> Result<Codebook> {
    let pool = search_latents(bundle, train, samples, search)?;
    codebook_from_pool(&pool, k, seed)
}

pub fn search_latents(
    bundle: &ModelBundle,
    train: &Dataset,
    samples: usize,
    search: &AdmmConfig,
) -> Result<Vec<f64>> {
    let spec = LossSpec::for_bundle(bundle);
    let n = if samples == 0 {
        train.len()
    } else {
        samples.min(train.len())
    };
    let mut pool = Vec::with_capacity(n * bundle.latent_dim());
    for x in &train.items()[..n] {
        pool.extend(latent_search(bundle, x, &spec, search)?.0);
    }
    Ok(pool)
}

pub fn codebook_from_pool(pool: &[f64], k: usize, seed: u64) -> Result<Codebook> {
    let cb = fit_codebook(pool, k, seed)?;
    let mean = pool.iter().sum::<f64>() / pool.len() as f64;
    let variance = pool.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / pool.len() as f64;
    Ok(cb.with_source(SourceStats {
        count: pool.len() as u64,
        mean: mean as f32 as f64,
        variance: variance as f32 as f64,
    }))
}

/// Stage two: fine-tune on `Q(E(x))` with a straight-through gradient.
/// The returned bundle carries no codebook; attach one with `with_codebook`.
pub fn train_stage_two(
    bundle: &ModelBundle,
    codebook: &Codebook,
    config: &TrainConfig,
    train: &Dataset,
    heldout: &Dataset,
) -> Result<(ModelBundle, TrainLog)> {
    check_data(config, train)?;
    if bundle.latent_dim() != config.latent_dim {
        return Err(Error::InvalidArgument(
            "config latent_dim does not match the bundle".into(),
        ));
    }
    let mut log = TrainLog::default();
    if config.stage_two_epochs == 0 {
        return Ok((bundle.clone(), log));
    }
    let disc = bundle
        .discriminator()
        .ok_or(Error::MissingDiscriminator)?
        .clone();
    let mut nets = Nets {
        g: bundle.generator().clone(),
        e: bundle.encoder().clone(),
        d: disc,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0002);
    run_epochs(
        &mut nets,
        config,
        train,
        heldout,
        config.stage_two_epochs,
        2,
        Some(codebook),
        &mut rng,
        &mut log,
    )?;
    let out = ModelBundle::new(
        bundle.signal(),
        nets.g,
        nets.e,
        Some(nets.d),
        bundle.norm(),
        None,
    )?;
    Ok((out, log))
}

/// Everything `train` produces.
pub struct Trained {
    pub bundle: ModelBundle,
    pub stage_one: ModelBundle,
    pub log: TrainLog,
    pub heldout: Dataset,
}

/// Stage one, codebook fit, stage two; the final bundle carries the codebook.
pub fn train(config: &TrainConfig, data: Dataset) -> Result<Trained> {
    let holdout = config.holdout.min(data.len().saturating_sub(1)).max(1);
    let (train_set, heldout) = data.split(holdout)?;
    let (stage_one, mut log) = train_stage_one(config, &train_set, &heldout)?;
    let cb = fit_stage_codebook(
        &stage_one,
        &train_set,
        config.levels,
        config.codebook_samples,
        &config.codebook_search,
        config.seed,
    )?;
    let (stage_two, log2) = train_stage_two(&stage_one, &cb, config, &train_set, &heldout)?;
    log.rows.extend(log2.rows);
    Ok(Trained {
        bundle: stage_two.with_codebook(cb),
        stage_one,
        log,
        heldout,
    })
}
