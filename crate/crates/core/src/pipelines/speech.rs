//! Speech front end: 16 kHz waveform -> STFT -> 128-bin mel -> log
//! normalization to `[-1, 1]`, and the inverse through a mel pseudo-inverse
//! and Griffin-Lim phase recovery.

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::nn::NormConstants;
use crate::tensor::Tensor;

use super::Waveform;

pub const SAMPLE_RATE: u32 = 16_000;
pub const FRAME: usize = 512;
pub const HOP: usize = 128;
pub const PAD: usize = (FRAME - HOP) / 2;
pub const N_BINS: usize = FRAME / 2 + 1;
pub const N_MELS: usize = 128;
pub const SEGMENT_FRAMES: usize = 128;
/// Samples per segment: `(128 - 1) * 128 + 512 - 2 * 192`.
pub const SEGMENT_SAMPLES: usize = (SEGMENT_FRAMES - 1) * HOP + FRAME - 2 * PAD;
pub const MEL_FMAX: f64 = 8000.0;
pub const LOG_EPS: f64 = 1e-5;
pub const GRIFFIN_LIM_ITERS: usize = 60;
pub const GRIFFIN_LIM_MOMENTUM: f64 = 0.99;
const GRIFFIN_LIM_SEED: u64 = 0x6c69_6d;

/// Complex STFT, `frames x 257` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    frames: usize,
    data: Vec<Complex64>,
}

impl Spectrogram {
    pub fn new(frames: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != frames * N_BINS {
            return Err(Error::shape(
                "spectrogram",
                format!("{} values for {frames} frames", data.len()),
            ));
        }
        Ok(Spectrogram { frames, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.data[t * N_BINS..(t + 1) * N_BINS]
    }

    /// `frames x 257` magnitudes.
    pub fn magnitudes(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm()).collect()
    }
}

/// Log-normalized mel-spectrogram, `128 mel bins x 128 frames`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    values: Tensor,
    norm: NormConstants,
}

impl MelSpectrogram {
    pub fn new(values: Tensor, norm: NormConstants) -> Result<Self> {
        let shape = values.shape();
        if shape != [N_MELS, SEGMENT_FRAMES] && shape != [1, N_MELS, SEGMENT_FRAMES] {
            return Err(Error::shape(
                "mel spectrogram",
                format!("expected 128x128, got {shape:?}"),
            ));
        }
        if values.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(
                "mel values must lie in [-1, 1]".into(),
            ));
        }
        Ok(MelSpectrogram {
            values: values.reshape(vec![N_MELS, SEGMENT_FRAMES])?,
            norm,
        })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn norm(&self) -> NormConstants {
        self.norm
    }

    /// As a `1 x 128 x 128` generator signal.
    pub fn to_signal(&self) -> Tensor {
        self.values
            .reshape(vec![1, N_MELS, SEGMENT_FRAMES])
            .expect("same size")
    }
}

fn hann() -> &'static [f64] {
    static W: OnceLock<Vec<f64>> = OnceLock::new();
    W.get_or_init(|| {
        (0..FRAME)
            .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / FRAME as f64).cos())
            .collect()
    })
}

fn plans() -> &'static (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    static P: OnceLock<(Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>)> = OnceLock::new();
    P.get_or_init(|| {
        let mut planner = FftPlanner::new();
        (
            planner.plan_fft_forward(FRAME),
            planner.plan_fft_inverse(FRAME),
        )
    })
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// `floor((len + 384 - 512) / 128) + 1`, or one frame if the padded signal
/// is shorter than a frame.
pub fn frame_count(len: usize) -> usize {
    let padded = len + 2 * PAD;
    if padded < FRAME {
        1
    } else {
        (padded - FRAME) / HOP + 1
    }
}

/// Hann-windowed STFT with 192 samples of reflect padding on each side.
pub fn stft(samples: &[f64]) -> Result<Spectrogram> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty waveform".into()));
    }
    let n = samples.len();
    let frames = frame_count(n);
    let padded_len = ((frames - 1) * HOP + FRAME).max(n + 2 * PAD);
    let padded: Vec<f64> = (0..padded_len)
        .map(|i| {
            if i < n + 2 * PAD {
                samples[reflect(i as isize - PAD as isize, n)]
            } else {
                0.0
            }
        })
        .collect();
    let (fwd, _) = plans();
    let window = hann();
    let mut data = Vec::with_capacity(frames * N_BINS);
    let mut buf = vec![Complex64::new(0.0, 0.0); FRAME];
    for t in 0..frames {
        let start = t * HOP;
        for (k, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(padded[start + k] * window[k], 0.0);
        }
        fwd.process(&mut buf);
        data.extend_from_slice(&buf[..N_BINS]);
    }
    Spectrogram::new(frames, data)
}

/// Weighted overlap-add inverse of [`stft`], normalized by the summed
/// squared window, returning `len` samples.
pub fn istft(spec: &Spectrogram, len: usize) -> Vec<f64> {
    let (_, inv) = plans();
    let window = hann();
    let total = (spec.frames - 1) * HOP + FRAME;
    let mut acc = vec![0.0; total];
    let mut wsum = vec![0.0; total];
    let mut buf = vec![Complex64::new(0.0, 0.0); FRAME];
    for t in 0..spec.frames {
        let frame = spec.frame(t);
        buf[..N_BINS].copy_from_slice(frame);
        buf[0].im = 0.0;
        buf[N_BINS - 1].im = 0.0;
        for k in N_BINS..FRAME {
            buf[k] = frame[FRAME - k].conj();
        }
        inv.process(&mut buf);
        let start = t * HOP;
        for k in 0..FRAME {
            acc[start + k] += buf[k].re / FRAME as f64 * window[k];
            wsum[start + k] += window[k] * window[k];
        }
    }
    (0..len)
        .map(|i| {
            let j = i + PAD;
            if j < total && wsum[j] > 1e-10 {
                acc[j] / wsum[j]
            } else {
                0.0
            }
        })
        .collect()
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangle corner frequencies `(left, center, right)` of each filter.
/// Triangles are widened to at least one FFT bin on each side of their
/// center so that no low-frequency filter falls between bins.
pub fn mel_filter_edges() -> Vec<(f64, f64, f64)> {
    let bin_hz = SAMPLE_RATE as f64 / FRAME as f64;
    let top = hz_to_mel(MEL_FMAX);
    let points: Vec<f64> = (0..N_MELS + 2)
        .map(|i| mel_to_hz(top * i as f64 / (N_MELS + 1) as f64))
        .collect();
    (0..N_MELS)
        .map(|m| {
            let c = points[m + 1];
            (
                (points[m]).min(c - bin_hz),
                c,
                (points[m + 2]).max(c + bin_hz),
            )
        })
        .collect()
}

/// `128 x 257` filterbank, each row peak-normalized to 1.
pub fn mel_filterbank() -> &'static [f64] {
    static FB: OnceLock<Vec<f64>> = OnceLock::new();
    FB.get_or_init(|| {
        let bin_hz = SAMPLE_RATE as f64 / FRAME as f64;
        let mut fb = vec![0.0; N_MELS * N_BINS];
        for (m, (l, c, r)) in mel_filter_edges().into_iter().enumerate() {
            let row = &mut fb[m * N_BINS..(m + 1) * N_BINS];
            for (k, w) in row.iter_mut().enumerate() {
                let f = k as f64 * bin_hz;
                *w = ((f - l) / (c - l)).min((r - f) / (r - c)).max(0.0);
            }
            let peak = row.iter().copied().fold(0.0, f64::max);
            row.iter_mut().for_each(|w| *w /= peak);
        }
        fb
    })
}

/// `frames x 257` magnitudes to `128 x frames` mel energies.
pub fn mel_forward(magnitudes: &[f64], frames: usize) -> Result<Vec<f64>> {
    if magnitudes.len() != frames * N_BINS {
        return Err(Error::shape(
            "mel_forward",
            format!(
                "expected {frames} frames of {N_BINS} bins, got {} values",
                magnitudes.len()
            ),
        ));
    }
    let fb = mel_filterbank();
    let mut out = vec![0.0; N_MELS * frames];
    for t in 0..frames {
        let mag = &magnitudes[t * N_BINS..(t + 1) * N_BINS];
        for m in 0..N_MELS {
            let row = &fb[m * N_BINS..(m + 1) * N_BINS];
            out[m * frames + t] = row.iter().zip(mag).map(|(w, v)| w * v).sum();
        }
    }
    Ok(out)
}

fn mel_pinv() -> &'static DMatrix<f64> {
    static P: OnceLock<DMatrix<f64>> = OnceLock::new();
    P.get_or_init(|| {
        DMatrix::from_row_slice(N_MELS, N_BINS, mel_filterbank())
            .pseudo_inverse(1e-10)
            .expect("filterbank pseudo-inverse")
    })
}

/// Least-squares `frames x 257` magnitudes for `128 x frames` mel energies,
/// negative values clamped to zero.
pub fn mel_inverse(mel: &[f64], frames: usize) -> Result<Vec<f64>> {
    if mel.len() != N_MELS * frames {
        return Err(Error::shape(
            "mel_inverse",
            format!("{} values for {frames} frames", mel.len()),
        ));
    }
    let m = DMatrix::from_row_slice(N_MELS, frames, mel);
    let lin = mel_pinv() * m;
    let mut out = vec![0.0; frames * N_BINS];
    for t in 0..frames {
        for k in 0..N_BINS {
            out[t * N_BINS + k] = lin[(k, t)].max(0.0);
        }
    }
    Ok(out)
}

fn check_norm(norm: NormConstants) -> Result<()> {
    if !(norm.ceiling > norm.floor) {
        return Err(Error::InvalidArgument(format!(
            "norm ceiling {} must exceed floor {}",
            norm.ceiling, norm.floor
        )));
    }
    Ok(())
}

/// `clip(2 (log10(m + eps) - floor) / (ceiling - floor) - 1, -1, 1)`.
pub fn log_normalize(mel: &[f64], norm: NormConstants) -> Result<Vec<f64>> {
    check_norm(norm)?;
    if mel.iter().any(|&m| !(m >= 0.0)) {
        return Err(Error::InvalidArgument(
            "mel energies must be non-negative".into(),
        ));
    }
    let span = norm.ceiling - norm.floor;
    Ok(mel
        .iter()
        .map(|&m| (2.0 * ((m + LOG_EPS).log10() - norm.floor) / span - 1.0).clamp(-1.0, 1.0))
        .collect())
}

pub fn denormalize(values: &[f64], norm: NormConstants) -> Result<Vec<f64>> {
    check_norm(norm)?;
    let span = norm.ceiling - norm.floor;
    Ok(values
        .iter()
        .map(|&x| (10f64.powf((x + 1.0) / 2.0 * span + norm.floor) - LOG_EPS).max(0.0))
        .collect())
}

/// One 16384-sample segment to its normalized 128x128 mel-spectrogram.
pub fn segment_to_mel(segment: &[f64], norm: NormConstants) -> Result<MelSpectrogram> {
    if segment.len() != SEGMENT_SAMPLES {
        return Err(Error::shape(
            "segment",
            format!("expected {SEGMENT_SAMPLES} samples, got {}", segment.len()),
        ));
    }
    let spec = stft(segment)?;
    let mel = mel_forward(&spec.magnitudes(), spec.frames())?;
    let values = log_normalize(&mel, norm)?;
    MelSpectrogram::new(Tensor::new(vec![N_MELS, SEGMENT_FRAMES], values)?, norm)
}

/// Splits into 16384-sample segments, zero-padding the last.
pub fn segments(w: &Waveform) -> Vec<Vec<f64>> {
    let s = w.samples();
    let n = s.len().div_ceil(SEGMENT_SAMPLES).max(1);
    (0..n)
        .map(|i| {
            let mut seg = s
                [(i * SEGMENT_SAMPLES).min(s.len())..((i + 1) * SEGMENT_SAMPLES).min(s.len())]
                .to_vec();
            seg.resize(SEGMENT_SAMPLES, 0.0);
            seg
        })
        .collect()
}

pub fn waveform_to_mels(w: &Waveform, norm: NormConstants) -> Result<Vec<MelSpectrogram>> {
    segments(w)
        .iter()
        .map(|s| segment_to_mel(s, norm))
        .collect()
}

/// Griffin-Lim phase recovery with momentum, from `frames x 257` magnitudes.
pub fn griffin_lim(
    magnitudes: &[f64],
    frames: usize,
    iters: usize,
    len: usize,
) -> Result<Vec<f64>> {
    if magnitudes.len() != frames * N_BINS {
        return Err(Error::shape("griffin_lim", "magnitude size"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(GRIFFIN_LIM_SEED);
    let mut angles: Vec<Complex64> = (0..magnitudes.len())
        .map(|_| Complex64::from_polar(1.0, rng.gen_range(0.0..2.0 * PI)))
        .collect();
    let mut prev = vec![Complex64::new(0.0, 0.0); magnitudes.len()];
    let build = |angles: &[Complex64]| {
        let data = magnitudes.iter().zip(angles).map(|(m, a)| a * m).collect();
        Spectrogram { frames, data }
    };
    let damping = GRIFFIN_LIM_MOMENTUM / (1.0 + GRIFFIN_LIM_MOMENTUM);
    // an analysis span long enough that stft(istft(.)) has the same frame count
    let span = (frames - 1) * HOP + FRAME - 2 * PAD;
    for _ in 0..iters {
        let rebuilt = stft(&istft(&build(&angles), span))?;
        for ((a, r), p) in angles.iter_mut().zip(&rebuilt.data).zip(prev.iter_mut()) {
            let v = r - *p * damping;
            let n = v.norm();
            *a = if n > 1e-16 {
                v / n
            } else {
                Complex64::new(1.0, 0.0)
            };
            *p = *r;
        }
    }
    Ok(istft(&build(&angles), len))
}

/// Normalized mel-spectrogram back to a 16384-sample waveform.
pub fn invert_speech(m: &MelSpectrogram) -> Result<Waveform> {
    let mel = denormalize(m.values.data(), m.norm)?;
    let mags = mel_inverse(&mel, SEGMENT_FRAMES)?;
    let samples = griffin_lim(&mags, SEGMENT_FRAMES, GRIFFIN_LIM_ITERS, SEGMENT_SAMPLES)?;
    Waveform::new(samples)
}

/// Inverts consecutive segments and concatenates them, truncated to `len`.
pub fn invert_segments(mels: &[MelSpectrogram], len: usize) -> Result<Waveform> {
    let mut samples = Vec::with_capacity(mels.len() * SEGMENT_SAMPLES);
    for m in mels {
        samples.extend(invert_speech(m)?.into_samples());
    }
    samples.truncate(len);
    Waveform::new(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_constants() {
        assert_eq!(PAD, 192);
        assert_eq!(SEGMENT_SAMPLES, 16384);
        assert_eq!(frame_count(16384), 128);
        assert_eq!(frame_count(1), 1);
    }

    #[test]
    fn reflect_indices() {
        let idx: Vec<usize> = (-3..6).map(|i| reflect(i, 4)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 1, 2, 3, 2, 1]);
        assert_eq!(reflect(-5, 1), 0);
    }

    #[test]
    fn zero_waveform_zero_magnitude() {
        let s = stft(&vec![0.0; 4000]).unwrap();
        assert!(s.magnitudes().iter().all(|&m| m == 0.0));
        assert!(stft(&[]).is_err());
    }

    #[test]
    fn normalization_endpoints() {
        let norm = NormConstants {
            floor: LOG_EPS.log10(),
            ceiling: 2.0,
        };
        assert_eq!(log_normalize(&[0.0], norm).unwrap(), vec![-1.0]);
        let top = 10f64.powi(2) - LOG_EPS;
        assert!((log_normalize(&[top], norm).unwrap()[0] - 1.0).abs() < 1e-12);
        assert!(log_normalize(
            &[1.0],
            NormConstants {
                floor: 1.0,
                ceiling: 1.0
            }
        )
        .is_err());
    }

    #[test]
    fn filters_peak_at_one() {
        let fb = mel_filterbank();
        for m in 0..N_MELS {
            let peak = fb[m * N_BINS..(m + 1) * N_BINS]
                .iter()
                .copied()
                .fold(0.0, f64::max);
            assert!((peak - 1.0).abs() < 1e-12);
        }
    }
}
