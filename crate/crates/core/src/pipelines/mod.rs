//! Signal ingestion and reconstruction: binary NetPBM images, 16 kHz PCM16
//! WAV audio, and the speech mel front end.

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub mod speech;

pub use speech::{
    denormalize, invert_segments, invert_speech, istft, log_normalize, mel_filterbank, mel_forward,
    segment_to_mel, stft, waveform_to_mels, MelSpectrogram, Spectrogram, SAMPLE_RATE,
    SEGMENT_SAMPLES,
};

/// Mono audio at 16 kHz.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("waveform"));
        }
        Ok(Waveform { samples })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }
}

/// Side length every image dimension must be a multiple of.
pub const IMAGE_BLOCK: usize = 32;

/// `C x H x W` pixels mapped from 8 bits to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSignal {
    pixels: Tensor,
}

pub fn pixel_to_unit(p: u8) -> f64 {
    p as f64 / 127.5 - 1.0
}

pub fn unit_to_pixel(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

impl ImageSignal {
    pub fn new(pixels: Tensor) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 3 || !(s[0] == 1 || s[0] == 3) {
            return Err(Error::shape(
                "image",
                format!("expected [1|3, H, W], got {s:?}"),
            ));
        }
        if s[1] % IMAGE_BLOCK != 0 || s[2] % IMAGE_BLOCK != 0 {
            return Err(Error::shape(
                "image",
                format!("{}x{} is not a multiple of {IMAGE_BLOCK}", s[1], s[2]),
            ));
        }
        if pixels.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(
                "pixel values must lie in [-1, 1]".into(),
            ));
        }
        Ok(ImageSignal { pixels })
    }

    pub fn from_pnm(img: &Pnm) -> Result<Self> {
        let (c, h, w) = (img.channels, img.height, img.width);
        let mut data = vec![0.0; c * h * w];
        for (i, &p) in img.data.iter().enumerate() {
            // interleaved HWC -> planar CHW
            let ch = i % c;
            let pix = i / c;
            data[ch * h * w + pix] = pixel_to_unit(p);
        }
        ImageSignal::new(Tensor::new(vec![c, h, w], data)?)
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn into_pixels(self) -> Tensor {
        self.pixels
    }

    pub fn to_pnm(&self) -> Pnm {
        let s = self.pixels.shape();
        tensor_to_pnm(&self.pixels, s[0], s[1], s[2])
    }

    pub fn pixel_count(&self) -> usize {
        let s = self.pixels.shape();
        s[1] * s[2]
    }
}

/// Interleaved 8-bit pixels of a P5 (gray) or P6 (RGB) image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

fn tensor_to_pnm(t: &Tensor, c: usize, h: usize, w: usize) -> Pnm {
    let d = t.data();
    let mut data = vec![0u8; c * h * w];
    for ch in 0..c {
        for pix in 0..h * w {
            data[pix * c + ch] = unit_to_pixel(d[ch * h * w + pix]);
        }
    }
    Pnm {
        channels: c,
        width: w,
        height: h,
        data,
    }
}

/// Quantizes any `[C, H, W]` tensor in `[-1, 1]` to 8-bit pixels.
pub fn tensor_to_pixels(t: &Tensor) -> Result<Pnm> {
    match *t.shape() {
        [c, h, w] if c == 1 || c == 3 => Ok(tensor_to_pnm(t, c, h, w)),
        ref s => Err(Error::shape(
            "image",
            format!("expected [1|3, H, W], got {s:?}"),
        )),
    }
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Pnm> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => {
            return Err(Error::BadMagic {
                expected: "P5 or P6",
            })
        }
    };
    let mut pos = 2;
    let mut field = || -> Result<usize> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::Truncated),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("bad NetPBM header field".into()))
    };
    let width = field()?;
    let height = field()?;
    let maxval = field()?;
    if maxval != 255 {
        return Err(Error::Unsupported(format!(
            "NetPBM maxval {maxval}; only 8-bit (255) is supported"
        )));
    }
    if width == 0 || height == 0 {
        return Err(Error::Format("zero image dimension".into()));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format(
            "missing whitespace after NetPBM header".into(),
        ));
    }
    pos += 1;
    let n = width * height * channels;
    let data = bytes.get(pos..pos + n).ok_or(Error::Truncated)?.to_vec();
    Ok(Pnm {
        channels,
        width,
        height,
        data,
    })
}

pub fn encode_pnm(img: &Pnm) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageSignal> {
    ImageSignal::from_pnm(&decode_pnm(&std::fs::read(path)?)?)
}

pub fn save_image(path: impl AsRef<Path>, img: &ImageSignal) -> Result<()> {
    std::fs::write(path, encode_pnm(&img.to_pnm()))?;
    Ok(())
}

fn sample_to_pcm(v: f64) -> i16 {
    (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

fn wav_spec() -> hound::WavSpec {
    hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    }
}

pub fn decode_wav(bytes: &[u8]) -> Result<Waveform> {
    let reader = hound::WavReader::new(Cursor::new(bytes))?;
    let spec = reader.spec();
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::Unsupported(format!(
            "sample rate {} Hz; expected 16000",
            spec.sample_rate
        )));
    }
    if spec.channels != 1 {
        return Err(Error::Unsupported(format!(
            "{} channels; expected mono",
            spec.channels
        )));
    }
    if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Unsupported(format!(
            "{}-bit samples; expected PCM16",
            spec.bits_per_sample
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Waveform::new(samples)
}

pub fn encode_wav(w: &Waveform) -> Result<Vec<u8>> {
    let mut cur = Cursor::new(Vec::new());
    {
        let mut writer = hound::WavWriter::new(&mut cur, wav_spec())?;
        for &s in w.samples() {
            writer.write_sample(sample_to_pcm(s))?;
        }
        writer.finalize()?;
    }
    Ok(cur.into_inner())
}

pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    decode_wav(&std::fs::read(path)?)
}

pub fn save_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    std::fs::write(path, encode_wav(w)?)?;
    Ok(())
}
