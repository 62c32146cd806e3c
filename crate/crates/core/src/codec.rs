//! The `.bpgc` container and end-to-end compress / decompress.
//!
//! ```text
//! "BPGC" | version u16 | signal_kind u8 | model_id u64 | latent_dim u32
//! | k u16 | k x f32 centers | k x u8 code lengths
//! | payload bit length u64 | payload bytes | CRC32 u32
//! ```
//!
//! Integers are little-endian; the CRC covers every preceding byte of the
//! blob. A speech file holds one blob per 16384-sample segment, back to back.

use rayon::prelude::*;

use crate::admm::{admm_quantized_search, AdmmConfig, AdmmReport};
use crate::entropy::{build_table, decode, encode, frequencies, BitReader, BitWriter, CodeTable};
use crate::error::{Error, Result};
use crate::losses::LossSpec;
use crate::nn::{ModelBundle, SignalKind};
use crate::pipelines::speech::SEGMENT_SAMPLES;
use crate::pipelines::{invert_segments, waveform_to_mels, MelSpectrogram, Waveform, SAMPLE_RATE};
use crate::quant::{dequantize, Codebook};
use crate::tensor::Tensor;
use crate::training::{codebook_from_pool, search_latents, Dataset};

pub const BLOB_MAGIC: &[u8; 4] = b"BPGC";
pub const BLOB_VERSION: u16 = 1;
/// Magic, version, kind, model id, latent dim, k, payload length, CRC.
pub const FIXED_HEADER_BYTES: u64 = 4 + 2 + 1 + 8 + 4 + 2 + 8 + 4;

#[derive(Clone, Debug, PartialEq)]
pub struct CompressedBlob {
    pub signal: SignalKind,
    pub model_id: u64,
    pub latent_dim: u32,
    pub codebook: Codebook,
    /// Huffman code length of each codebook index (0 = unused).
    pub lengths: Vec<u8>,
    pub payload_bits: u64,
    pub payload: Vec<u8>,
}

impl CompressedBlob {
    /// Huffman-codes `indices` under a table built from their own histogram.
    pub fn pack(
        signal: SignalKind,
        model_id: u64,
        codebook: &Codebook,
        indices: &[usize],
    ) -> Result<Self> {
        let latent_dim = u32::try_from(indices.len())
            .map_err(|_| Error::InvalidArgument("latent too long for the container".into()))?;
        let freqs = frequencies(indices, codebook.k())?;
        let (lengths, payload_bits, payload) = if indices.is_empty() {
            (vec![0; codebook.k()], 0, Vec::new())
        } else {
            let table = build_table(&freqs)?;
            let mut w = BitWriter::new();
            let bits = encode(indices, &table, &mut w)?;
            (table.lengths().to_vec(), bits, w.into_bytes())
        };
        Ok(CompressedBlob {
            signal,
            model_id,
            latent_dim,
            codebook: codebook.clone(),
            lengths,
            payload_bits,
            payload,
        })
    }

    /// Decodes exactly `latent_dim` codebook indices.
    pub fn unpack(&self) -> Result<Vec<usize>> {
        if self.latent_dim == 0 {
            return Ok(Vec::new());
        }
        let table = CodeTable::from_lengths(self.lengths.clone())?;
        let mut r = BitReader::new(&self.payload, self.payload_bits)?;
        let indices = decode(&mut r, &table, self.latent_dim as usize)?;
        if r.remaining() != 0 {
            return Err(Error::Format(format!(
                "{} unread payload bits",
                r.remaining()
            )));
        }
        Ok(indices)
    }

    pub fn header_bits(&self) -> u64 {
        header_bits(self.codebook.k())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let k = self.codebook.k();
        let mut out =
            Vec::with_capacity((FIXED_HEADER_BYTES as usize) + 5 * k + self.payload.len());
        out.extend_from_slice(BLOB_MAGIC);
        out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
        out.push(self.signal.code());
        out.extend_from_slice(&self.model_id.to_le_bytes());
        out.extend_from_slice(&self.latent_dim.to_le_bytes());
        out.extend_from_slice(&(k as u16).to_le_bytes());
        for &c in self.codebook.centers() {
            out.extend_from_slice(&(c as f32).to_le_bytes());
        }
        out.extend_from_slice(&self.lengths);
        out.extend_from_slice(&self.payload_bits.to_le_bytes());
        out.extend_from_slice(&self.payload);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses a buffer holding exactly one blob. The checksum is verified
    /// before any field is interpreted.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < FIXED_HEADER_BYTES as usize {
            return Err(Error::Truncated);
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let (blob, used) = parse(bytes)?;
        if used != bytes.len() {
            return Err(Error::Format("trailing bytes after blob".into()));
        }
        Ok(blob)
    }
}

/// `8 * (fixed header + 4k centers + k lengths)`.
pub fn header_bits(k: usize) -> u64 {
    8 * (FIXED_HEADER_BYTES + 5 * k as u64)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(Error::Truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }
}

/// Parses one blob from the front of `bytes`; returns it and its length.
fn parse(bytes: &[u8]) -> Result<(CompressedBlob, usize)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != BLOB_MAGIC {
        return Err(Error::BadMagic { expected: "BPGC" });
    }
    let version = u16::from_le_bytes(c.array()?);
    if version != BLOB_VERSION {
        return Err(Error::Version(version));
    }
    let signal = SignalKind::from_code(c.array::<1>()?[0])?;
    let model_id = u64::from_le_bytes(c.array()?);
    let latent_dim = u32::from_le_bytes(c.array()?);
    let k = u16::from_le_bytes(c.array()?) as usize;
    let centers = (0..k)
        .map(|_| Ok(f32::from_le_bytes(c.array()?) as f64))
        .collect::<Result<Vec<_>>>()?;
    let codebook = Codebook::from_centers(centers)?;
    let lengths = c.take(k)?.to_vec();
    let payload_bits = u64::from_le_bytes(c.array()?);
    let payload_len = usize::try_from(payload_bits.div_ceil(8)).map_err(|_| Error::Truncated)?;
    let payload = c.take(payload_len)?.to_vec();
    let body_end = c.pos;
    let stored = u32::from_le_bytes(c.array()?);
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let blob = CompressedBlob {
        signal,
        model_id,
        latent_dim,
        codebook,
        lengths,
        payload_bits,
        payload,
    };
    Ok((blob, c.pos))
}

/// Concatenated blobs, as written to a `.bpgc` file.
pub fn write_blobs(blobs: &[CompressedBlob]) -> Vec<u8> {
    blobs.iter().flat_map(|b| b.to_bytes()).collect()
}

pub fn read_blobs(bytes: &[u8]) -> Result<Vec<CompressedBlob>> {
    if bytes.is_empty() {
        return Err(Error::Truncated);
    }
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let (blob, used) = parse(&bytes[pos..])?;
        out.push(blob);
        pos += used;
    }
    Ok(out)
}

/// Extent of the signal a rate is measured over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Extent {
    Pixels(u64),
    /// Samples at 16 kHz.
    Samples(u64),
}

impl Extent {
    pub fn unit(self) -> &'static str {
        match self {
            Extent::Pixels(_) => "bpp",
            Extent::Samples(_) => "bps",
        }
    }

    /// `bits / extent` as an exact ratio `(numerator, denominator)`.
    pub fn ratio(self, bits: u64) -> (u64, u64) {
        match self {
            Extent::Pixels(p) => (bits, p),
            Extent::Samples(s) => (bits * SAMPLE_RATE as u64, s),
        }
    }

    /// Bits per pixel or bits per second.
    pub fn rate(self, bits: u64) -> f64 {
        let (n, d) = self.ratio(bits);
        n as f64 / d as f64
    }

    pub fn of_signal(signal: SignalKind, shape: &[usize]) -> Extent {
        match signal {
            SignalKind::Image => Extent::Pixels((shape[1] * shape[2]) as u64),
            SignalKind::Speech => Extent::Samples(SEGMENT_SAMPLES as u64),
        }
    }
}

/// Exact bit accounting of a set of blobs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateReport {
    pub header_bits: u64,
    pub payload_bits: u64,
    /// Bits in the serialized blobs, including payload byte padding.
    pub total_bits: u64,
    /// `latent_dim * log2(k)` summed over blobs.
    pub fixed_length_bits: u64,
    pub extent: Extent,
}

impl RateReport {
    pub fn rate(&self) -> f64 {
        self.extent.rate(self.total_bits)
    }

    pub fn payload_rate(&self) -> f64 {
        self.extent.rate(self.payload_bits)
    }

    pub fn pre_huffman_rate(&self) -> f64 {
        self.extent.rate(self.fixed_length_bits)
    }

    pub fn unit(&self) -> &'static str {
        self.extent.unit()
    }
}

pub fn measure_rate(blobs: &[CompressedBlob], extent: Extent) -> RateReport {
    let mut r = RateReport {
        header_bits: 0,
        payload_bits: 0,
        total_bits: 0,
        fixed_length_bits: 0,
        extent,
    };
    for b in blobs {
        r.header_bits += b.header_bits();
        r.payload_bits += b.payload_bits;
        r.total_bits += b.header_bits() + 8 * b.payload.len() as u64;
        r.fixed_length_bits += b.latent_dim as u64 * b.codebook.index_bits() as u64;
    }
    r
}

/// Bits of a fixed-length code: `dim * log2(levels)`.
pub fn fixed_length_bits(dim: u64, levels: u64) -> Result<u64> {
    if levels < 2 || !levels.is_power_of_two() {
        return Err(Error::InvalidArgument(format!(
            "levels must be a power of two >= 2, got {levels}"
        )));
    }
    Ok(dim * levels.trailing_zeros() as u64)
}

fn bundle_codebook(bundle: &ModelBundle) -> Result<&Codebook> {
    bundle
        .codebook()
        .ok_or_else(|| Error::InvalidArgument("model has no codebook; train with stage two".into()))
}

/// Searches a quantized latent for one signal and packs it.
pub fn compress(
    x: &Tensor,
    bundle: &ModelBundle,
    spec: &LossSpec,
    config: &AdmmConfig,
) -> Result<(CompressedBlob, AdmmReport, Vec<f64>)> {
    let codebook = bundle_codebook(bundle)?;
    let before = bundle.model_id();
    let (indices, u, report) = admm_quantized_search(bundle, x, spec, codebook, config)?;
    let after = bundle.model_id();
    if before != after {
        return Err(Error::HashMismatch {
            stored: before,
            computed: after,
        });
    }
    let blob = CompressedBlob::pack(bundle.signal(), before, codebook, &indices)?;
    Ok((blob, report, u))
}

/// Quantized latent of a blob, checked against the bundle.
pub fn decode_latent(blob: &CompressedBlob, bundle: &ModelBundle) -> Result<Vec<f64>> {
    let actual = bundle.model_id();
    if blob.model_id != actual {
        return Err(Error::ModelMismatch {
            expected: blob.model_id,
            actual,
        });
    }
    if blob.signal != bundle.signal() || blob.latent_dim as usize != bundle.latent_dim() {
        return Err(Error::Format(
            "blob signal kind or latent size disagrees with the model".into(),
        ));
    }
    dequantize(&blob.unpack()?, &blob.codebook)
}

pub fn decompress(blob: &CompressedBlob, bundle: &ModelBundle) -> Result<Tensor> {
    bundle.generator_forward(&decode_latent(blob, bundle)?)
}

/// Per-signal outcome of a batch compression.
#[derive(Clone, Debug)]
pub struct Compressed {
    pub blob: CompressedBlob,
    pub report: AdmmReport,
}

/// Runs `f` on a pool of `LATENTCODEC_THREADS` workers (default: all cores).
pub fn with_pool<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    let threads = std::env::var("LATENTCODEC_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Compresses signals in parallel; results keep input order.
pub fn compress_many(
    signals: &[Tensor],
    bundle: &ModelBundle,
    spec: &LossSpec,
    config: &AdmmConfig,
) -> Result<Vec<Compressed>> {
    with_pool(|| {
        signals
            .par_iter()
            .map(|x| {
                compress(x, bundle, spec, config)
                    .map(|(blob, report, _)| Compressed { blob, report })
            })
            .collect::<Result<Vec<_>>>()
    })?
}

/// Splits a waveform into segments and compresses each.
pub fn compress_speech(
    w: &Waveform,
    bundle: &ModelBundle,
    spec: &LossSpec,
    config: &AdmmConfig,
) -> Result<Vec<Compressed>> {
    let mels = waveform_to_mels(w, bundle.norm())?;
    let signals: Vec<Tensor> = mels.iter().map(MelSpectrogram::to_signal).collect();
    compress_many(&signals, bundle, spec, config)
}

/// Decodes every segment blob and inverts the mel-spectrograms.
pub fn decompress_speech(blobs: &[CompressedBlob], bundle: &ModelBundle) -> Result<Waveform> {
    let mels = blobs
        .iter()
        .map(|b| {
            let x = decompress(b, bundle)?;
            let x = x.map(|v| v.clamp(-1.0, 1.0));
            MelSpectrogram::new(x, bundle.norm())
        })
        .collect::<Result<Vec<_>>>()?;
    invert_segments(&mels, mels.len() * SEGMENT_SAMPLES)
}

/// One cell of a rate–quality sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub latent_dim: usize,
    pub levels: usize,
    pub unit: &'static str,
    /// `latent_dim * log2(levels) / extent`.
    pub pre_huffman_rate: f64,
    /// Mean Huffman payload bits over the evaluation set, per unit extent.
    pub post_huffman_rate: f64,
    /// Mean serialized blob bits, per unit extent.
    pub total_rate: f64,
    pub mean_loss: f64,
    pub signals: usize,
}

/// Grid over `models` (one per latent size) x `levels`. Each cell fits a
/// codebook to search latents of `fit`, then compresses every `eval` signal.
/// Rows come back in grid order whatever the pool size.
pub fn sweep(
    models: &[ModelBundle],
    levels: &[usize],
    fit: &Dataset,
    eval: &[Tensor],
    codebook_samples: usize,
    config: &AdmmConfig,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if models.is_empty() || levels.is_empty() || eval.is_empty() {
        return Err(Error::InvalidArgument(
            "sweep needs at least one model, level and signal".into(),
        ));
    }
    let mut rows = Vec::with_capacity(models.len() * levels.len());
    for bundle in models {
        let spec = LossSpec::for_bundle(bundle);
        let extent = Extent::of_signal(bundle.signal(), bundle.signal_shape());
        let pool = with_pool(|| search_latents(bundle, fit, codebook_samples, config))??;
        for &k in levels {
            let pre = fixed_length_bits(bundle.latent_dim() as u64, k as u64)?;
            let cb = codebook_from_pool(&pool, k, seed)?;
            let cell = bundle.clone().with_codebook(cb);
            let out = compress_many(eval, &cell, &spec, config)?;
            let n = out.len() as u64;
            let blobs: Vec<CompressedBlob> = out.iter().map(|c| c.blob.clone()).collect();
            let r = measure_rate(&blobs, extent);
            rows.push(SweepRow {
                latent_dim: bundle.latent_dim(),
                levels: k,
                unit: extent.unit(),
                pre_huffman_rate: extent.rate(pre),
                post_huffman_rate: extent.rate(r.payload_bits) / n as f64,
                total_rate: extent.rate(r.total_bits) / n as f64,
                mean_loss: out.iter().map(|c| c.report.final_loss).sum::<f64>() / n as f64,
                signals: out.len(),
            });
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Format(format!("csv: {e}"));
    w.write_record([
        "latent_dim",
        "levels",
        "unit",
        "pre_huffman_rate",
        "post_huffman_rate",
        "total_rate",
        "mean_loss",
        "signals",
    ])
    .map_err(io)?;
    for r in rows {
        w.write_record([
            r.latent_dim.to_string(),
            r.levels.to_string(),
            r.unit.to_string(),
            r.pre_huffman_rate.to_string(),
            r.post_huffman_rate.to_string(),
            r.total_rate.to_string(),
            r.mean_loss.to_string(),
            r.signals.to_string(),
        ])
        .map_err(io)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Format(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cb16() -> Codebook {
        Codebook::from_centers((0..16).map(|i| i as f64 * 0.25 - 2.0).collect()).unwrap()
    }

    #[test]
    fn pack_round_trip() {
        let idx: Vec<usize> = (0..100).map(|i| (i * 7) % 16).collect();
        let blob = CompressedBlob::pack(SignalKind::Image, 42, &cb16(), &idx).unwrap();
        let back = CompressedBlob::from_bytes(&blob.to_bytes()).unwrap();
        assert_eq!(back, blob);
        assert_eq!(back.unpack().unwrap(), idx);
    }

    #[test]
    fn header_arithmetic() {
        assert_eq!(FIXED_HEADER_BYTES, 33);
        assert_eq!(header_bits(16), 8 * (33 + 64 + 16));
        let blob = CompressedBlob::pack(SignalKind::Image, 1, &cb16(), &[3, 3, 5]).unwrap();
        assert_eq!(
            blob.to_bytes().len() as u64 * 8,
            blob.header_bits() + 8 * blob.payload.len() as u64
        );
    }

    #[test]
    fn empty_payload() {
        let blob = CompressedBlob::pack(SignalKind::Image, 1, &cb16(), &[]).unwrap();
        let r = measure_rate(std::slice::from_ref(&blob), Extent::Pixels(1024));
        assert_eq!(r.payload_bits, 0);
        assert_eq!(
            CompressedBlob::from_bytes(&blob.to_bytes())
                .unwrap()
                .unpack()
                .unwrap(),
            Vec::<usize>::new()
        );
    }

    #[test]
    fn uniform_speech_rate_is_2000_bps() {
        let idx: Vec<usize> = (0..512).map(|i| i % 16).collect();
        let blob = CompressedBlob::pack(SignalKind::Speech, 1, &cb16(), &idx).unwrap();
        let r = measure_rate(&[blob], Extent::Samples(16384));
        assert_eq!(r.payload_bits, 2048);
        assert_eq!(
            Extent::Samples(16384).ratio(r.payload_bits),
            (2048 * 16000, 16384)
        );
        assert_eq!(r.payload_rate(), 2000.0);
    }

    #[test]
    fn corrupt_byte_is_a_checksum_error() {
        let blob = CompressedBlob::pack(SignalKind::Image, 9, &cb16(), &[1, 2, 3, 4]).unwrap();
        let mut bytes = blob.to_bytes();
        bytes[20] ^= 0x10;
        assert!(matches!(
            CompressedBlob::from_bytes(&bytes),
            Err(Error::Checksum { .. })
        ));
    }

    #[test]
    fn concatenated_blobs() {
        let a = CompressedBlob::pack(SignalKind::Speech, 9, &cb16(), &[1, 2]).unwrap();
        let b = CompressedBlob::pack(SignalKind::Speech, 9, &cb16(), &[3, 3, 3]).unwrap();
        let bytes = write_blobs(&[a.clone(), b.clone()]);
        assert_eq!(read_blobs(&bytes).unwrap(), vec![a, b]);
        assert!(read_blobs(&bytes[..bytes.len() - 1]).is_err());
    }
}
