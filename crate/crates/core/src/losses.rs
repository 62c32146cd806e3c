//! Reconstruction objectives `F(x, G(z))` and evaluation metrics.
//!
//! Signals live in `[-1, 1]`. MS-SSIM is evaluated on the signals mapped to
//! `[0, 1]` so that its stabilizing constants match the usual 8-bit
//! definition (`C1 = 0.01^2`, `C2 = 0.03^2` for unit dynamic range).

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::nn::{ModelBundle, Network, SignalKind};
use crate::tensor::{kernels::gaussian_window, Tape, Tensor, Var};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
/// Standard five-scale MS-SSIM exponents; fewer scales use a renormalized prefix.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const PSNR_CAP: f64 = 99.0;

const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;
/// Lower clamp on per-scale factors before exponentiation.
const FACTOR_FLOOR: f64 = 1e-8;

pub const DEFAULT_IMAGE_ALPHA: f64 = 10.0;
pub const DEFAULT_SPEECH_ALPHA: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct LossSpec {
    pub kind: SignalKind,
    pub alpha: f64,
    pub ms_ssim_scales: usize,
    /// Discriminator tap indices for the feature loss; 0 is the raw input.
    pub feature_layers: Vec<usize>,
}

impl LossSpec {
    pub fn image(alpha: f64, ms_ssim_scales: usize) -> Self {
        LossSpec {
            kind: SignalKind::Image,
            alpha,
            ms_ssim_scales,
            feature_layers: Vec::new(),
        }
    }

    pub fn speech(alpha: f64, feature_layers: Vec<usize>) -> Self {
        LossSpec {
            kind: SignalKind::Speech,
            alpha,
            ms_ssim_scales: 1,
            feature_layers,
        }
    }

    /// Defaults for a bundle: the most MS-SSIM scales the image size allows
    /// (up to 5) with alpha 10, or activation taps after each discriminator
    /// conv block with alpha 1 for speech.
    pub fn for_bundle(bundle: &ModelBundle) -> Self {
        match bundle.signal() {
            SignalKind::Image => {
                let shape = bundle.signal_shape();
                LossSpec::image(DEFAULT_IMAGE_ALPHA, max_scales(shape[1], shape[2]).max(1))
            }
            SignalKind::Speech => LossSpec::speech(DEFAULT_SPEECH_ALPHA, vec![2, 4]),
        }
    }

    pub fn validate(&self, bundle: &ModelBundle) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        let shape = bundle.signal_shape();
        match self.kind {
            SignalKind::Image => check_scales(shape[1], shape[2], self.ms_ssim_scales),
            SignalKind::Speech => {
                let disc = bundle.discriminator().ok_or(Error::MissingDiscriminator)?;
                let taps = disc.layers().len() + 1;
                match self.feature_layers.iter().find(|&&l| l >= taps) {
                    Some(l) => Err(Error::InvalidArgument(format!(
                        "feature layer {l} out of range for {taps} taps"
                    ))),
                    None => Ok(()),
                }
            }
        }
    }
}

/// Largest scale count whose coarsest level still fits the window.
pub fn max_scales(h: usize, w: usize) -> usize {
    (1..=MS_SSIM_WEIGHTS.len())
        .take_while(|&m| h.min(w) >= SSIM_WINDOW << (m - 1))
        .last()
        .unwrap_or(0)
}

fn check_scales(h: usize, w: usize, scales: usize) -> Result<()> {
    if scales == 0 || scales > MS_SSIM_WEIGHTS.len() {
        return Err(Error::InvalidArgument(format!(
            "ms_ssim_scales must be in 1..=5, got {scales}"
        )));
    }
    if h.min(w) < SSIM_WINDOW << (scales - 1) {
        return Err(Error::InvalidArgument(format!(
            "{h}x{w} image too small for {scales} MS-SSIM scales (needs {})",
            SSIM_WINDOW << (scales - 1)
        )));
    }
    Ok(())
}

pub fn ms_ssim_weights(scales: usize) -> Vec<f64> {
    let w = &MS_SSIM_WEIGHTS[..scales];
    let total: f64 = w.iter().sum();
    w.iter().map(|v| v / total).collect()
}

/// Mean of squared element differences.
pub fn mse<'t>(x: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
    x.sub(y)?.square()?.mean()
}

/// Multi-scale structural similarity of two `[C, H, W]` signals in `[-1, 1]`.
pub fn ms_ssim<'t>(x: Var<'t>, y: Var<'t>, scales: usize) -> Result<Var<'t>> {
    let shape = x.shape();
    if shape != y.shape() {
        return Err(Error::shape(
            "ms_ssim",
            format!("{:?} vs {:?}", shape, y.shape()),
        ));
    }
    let [_, h, w] = shape[..] else {
        return Err(Error::shape(
            "ms_ssim",
            format!("expected [C, H, W], got {shape:?}"),
        ));
    };
    check_scales(h, w, scales)?;
    let window: Rc<[f64]> = gaussian_window(SSIM_WINDOW, SSIM_SIGMA).into();
    let weights = ms_ssim_weights(scales);

    let mut a = x.add_scalar(1.0)?.scale(0.5)?;
    let mut b = y.add_scalar(1.0)?.scale(0.5)?;
    let mut result: Option<Var<'t>> = None;
    for (j, &wj) in weights.iter().enumerate() {
        if j > 0 {
            a = a.avg_pool2()?;
            b = b.avg_pool2()?;
        }
        let blur = |v: Var<'t>| v.gaussian_blur(window.clone());
        let mu_a = blur(a)?;
        let mu_b = blur(b)?;
        let mu_ab = mu_a.mul(mu_b)?;
        let mu_aa = mu_a.square()?;
        let mu_bb = mu_b.square()?;
        let var_a = blur(a.square()?)?.sub(mu_aa)?;
        let var_b = blur(b.square()?)?.sub(mu_bb)?;
        let cov = blur(a.mul(b)?)?.sub(mu_ab)?;
        let cs_map = cov
            .scale(2.0)?
            .add_scalar(C2)?
            .div(var_a.add(var_b)?.add_scalar(C2)?)?;
        let factor = if j + 1 == scales {
            let lum = mu_ab
                .scale(2.0)?
                .add_scalar(C1)?
                .div(mu_aa.add(mu_bb)?.add_scalar(C1)?)?;
            lum.mul(cs_map)?.mean()?
        } else {
            cs_map.mean()?
        };
        let term = factor.clamp_min(FACTOR_FLOOR)?.powf(wj)?;
        result = Some(match result {
            Some(r) => r.mul(term)?,
            None => term,
        });
    }
    Ok(result.expect("scales >= 1"))
}

/// `(1 - MS-SSIM(x, g)) + alpha * MSE(x, g)`.
pub fn image_loss<'t>(x: Var<'t>, g: Var<'t>, alpha: f64, scales: usize) -> Result<Var<'t>> {
    let structural = ms_ssim(x, g, scales)?.scale(-1.0)?.add_scalar(1.0)?;
    if alpha == 0.0 {
        return Ok(structural);
    }
    structural.add(mse(x, g)?.scale(alpha)?)
}

/// Discriminator activations of a fixed target at the given taps.
pub fn feature_targets(disc: &Network, x: &Tensor, layers: &[usize]) -> Result<Vec<Tensor>> {
    let tape = Tape::new();
    let params = disc.bind(&tape, false);
    let taps = disc.forward_taps(&params, tape.constant(x.clone()))?;
    layers
        .iter()
        .map(|&l| {
            taps.get(l)
                .map(|v| (*v.value()).clone())
                .ok_or_else(|| Error::InvalidArgument(format!("feature layer {l} out of range")))
        })
        .collect()
}

/// `sum_l mean((D_l(x) - D_l(g))^2) + alpha * MSE(x, g)` with precomputed `D_l(x)`.
pub fn feature_loss_with_targets<'t>(
    x: Var<'t>,
    g: Var<'t>,
    disc: &Network,
    disc_params: &[Var<'t>],
    layers: &[usize],
    targets: &[Tensor],
    alpha: f64,
) -> Result<Var<'t>> {
    let tape = g.tape();
    let taps = disc.forward_taps(disc_params, g)?;
    let mut total = mse(x, g)?.scale(alpha)?;
    for (&l, t) in layers.iter().zip(targets) {
        let tap = *taps
            .get(l)
            .ok_or_else(|| Error::InvalidArgument(format!("feature layer {l} out of range")))?;
        total = total.add(mse(tape.constant(t.clone()), tap)?)?;
    }
    Ok(total)
}

pub fn feature_loss<'t>(
    x: Var<'t>,
    g: Var<'t>,
    bundle: &ModelBundle,
    spec: &LossSpec,
) -> Result<Var<'t>> {
    let disc = bundle.discriminator().ok_or(Error::MissingDiscriminator)?;
    let targets = feature_targets(disc, &x.value(), &spec.feature_layers)?;
    let params = disc.bind(g.tape(), false);
    feature_loss_with_targets(
        x,
        g,
        disc,
        &params,
        &spec.feature_layers,
        &targets,
        spec.alpha,
    )
}

/// Objective for `spec.kind` between a target and a generated signal.
pub fn signal_loss<'t>(
    x: Var<'t>,
    g: Var<'t>,
    bundle: &ModelBundle,
    spec: &LossSpec,
) -> Result<Var<'t>> {
    match spec.kind {
        SignalKind::Image => image_loss(x, g, spec.alpha, spec.ms_ssim_scales),
        SignalKind::Speech => feature_loss(x, g, bundle, spec),
    }
}

pub fn mse_value(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::shape(
            "mse",
            format!("{:?} vs {:?}", x.shape(), y.shape()),
        ));
    }
    Ok(x.data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64)
}

pub fn ms_ssim_value(x: &Tensor, y: &Tensor, scales: usize) -> Result<f64> {
    let tape = Tape::new();
    Ok(ms_ssim(tape.constant(x.clone()), tape.constant(y.clone()), scales)?.item())
}

/// Peak signal-to-noise ratio of two 8-bit images, capped at 99 dB.
pub fn psnr(x: &[u8], y: &[u8]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::shape(
            "psnr",
            format!("{} vs {} pixels", x.len(), y.len()),
        ));
    }
    let se: u64 = x
        .iter()
        .zip(y)
        .map(|(&a, &b)| {
            let d = a as i64 - b as i64;
            (d * d) as u64
        })
        .sum();
    Ok(psnr_from_mse(se as f64 / x.len() as f64))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_of<F>(f: F) -> f64
    where
        F: for<'t> Fn(&'t Tape) -> Result<Var<'t>>,
    {
        let tape = Tape::new();
        f(&tape).unwrap().item()
    }

    #[test]
    fn mse_hand_values() {
        let v = scalar_of(|t| {
            mse(
                t.constant(Tensor::from_vec(vec![0.0, 0.0])),
                t.constant(Tensor::from_vec(vec![1.0, 1.0])),
            )
        });
        assert_eq!(v, 1.0);
        let same = Tensor::from_vec(vec![0.3, -0.2, 0.9]);
        assert_eq!(mse_value(&same, &same).unwrap(), 0.0);
    }

    #[test]
    fn ms_ssim_self_similarity_is_one() {
        let x = Tensor::new(
            vec![1, 32, 32],
            (0..1024)
                .map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0)
                .collect(),
        )
        .unwrap();
        assert!((ms_ssim_value(&x, &x, 2).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ms_ssim_decreases_with_constant_offset() {
        let base = Tensor::full(vec![1, 32, 32], 0.0);
        let mut prev = 1.0;
        for d in [0.1, 0.3, 0.6, 1.0] {
            let other = Tensor::full(vec![1, 32, 32], d);
            let v = ms_ssim_value(&base, &other, 2).unwrap();
            assert!(v < prev, "{d}: {v} !< {prev}");
            prev = v;
        }
    }

    #[test]
    fn too_small_for_scales() {
        let x = Tensor::zeros(vec![1, 32, 32]);
        assert!(ms_ssim_value(&x, &x, 3).is_err());
        assert_eq!(max_scales(32, 32), 2);
        assert_eq!(max_scales(64, 64), 3);
        assert_eq!(max_scales(10, 64), 0);
    }

    #[test]
    fn psnr_endpoints() {
        assert_eq!(psnr(&[7, 8, 9], &[7, 8, 9]).unwrap(), 99.0);
        assert!((psnr(&[0; 16], &[255; 16]).unwrap() - 0.0).abs() < 1e-12);
        let target = 255.0f64 * 255.0 / 10f64.powf(3.29);
        assert!((psnr_from_mse(target) - 32.9).abs() < 0.01);
        assert!(psnr(&[1, 2], &[1]).is_err());
    }

    #[test]
    fn weights_renormalize() {
        let w = ms_ssim_weights(3);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((w[0] - 0.0448 / 0.6305).abs() < 1e-15);
    }
}
