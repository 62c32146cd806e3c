//! Weight file layout (all integers little-endian):
//!
//! ```text
//! "BPGW" | version u16 | record count u16
//! per record: name_len u8 | name | rank u8 | dims u32 * rank | data f32 * numel
//! content hash u64 (FNV-1a over every preceding byte)
//! ```
//!
//! Records: `meta`, `<net>.arch`, `<net>.<i>` for every parameter of
//! `generator`, `encoder` and optionally `discriminator`, then optionally
//! `codebook` and `codebook.stats`.

use std::collections::HashMap;
use std::hash::Hasher;

use fnv::FnvHasher;

use super::{LayerSpec, ModelBundle, Network, NormConstants, SignalKind, ARCH_ROW};
use crate::error::{Error, Result};
use crate::quant::{Codebook, SourceStats};
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"BPGW";
pub const WEIGHTS_VERSION: u16 = 1;

pub(crate) fn content_hash(bytes_with_trailer: &[u8]) -> u64 {
    let body = &bytes_with_trailer[..bytes_with_trailer.len() - 8];
    let mut h = FnvHasher::default();
    h.write(body);
    h.finish()
}

struct Writer {
    buf: Vec<u8>,
    records: u16,
}

impl Writer {
    fn record(&mut self, name: &str, shape: &[usize], data: impl IntoIterator<Item = f64>) {
        assert!(name.len() <= u8::MAX as usize && shape.len() <= u8::MAX as usize);
        self.buf.push(name.len() as u8);
        self.buf.extend_from_slice(name.as_bytes());
        self.buf.push(shape.len() as u8);
        for &d in shape {
            self.buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in data {
            self.buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        self.records += 1;
    }

    fn network(&mut self, prefix: &str, net: &Network) {
        let mut rows = Vec::with_capacity((net.layers().len() + 1) * ARCH_ROW);
        let io_row = |shape: &[usize]| -> Vec<f64> {
            let mut r = vec![shape.len() as f64];
            r.extend(shape.iter().map(|&d| d as f64));
            r.resize(ARCH_ROW / 2, 0.0);
            r
        };
        rows.extend(io_row(net.input_shape()));
        rows.extend(io_row(net.output_shape()));
        for l in net.layers() {
            rows.extend(l.encode().iter().map(|&v| v as f64));
        }
        self.record(
            &format!("{prefix}.arch"),
            &[net.layers().len() + 1, ARCH_ROW],
            rows,
        );
        for (i, p) in net.params().iter().enumerate() {
            self.record(
                &format!("{prefix}.{i}"),
                p.shape(),
                p.data().iter().copied(),
            );
        }
    }
}

pub fn save_weights(bundle: &ModelBundle) -> Vec<u8> {
    let mut w = Writer {
        buf: Vec::new(),
        records: 0,
    };
    let norm = bundle.norm();
    w.record(
        "meta",
        &[6],
        [
            bundle.signal().code() as f64,
            bundle.latent_dim() as f64,
            bundle.discriminator().is_some() as u8 as f64,
            bundle.codebook().is_some() as u8 as f64,
            norm.floor,
            norm.ceiling,
        ],
    );
    w.network("generator", bundle.generator());
    w.network("encoder", bundle.encoder());
    if let Some(d) = bundle.discriminator() {
        w.network("discriminator", d);
    }
    if let Some(cb) = bundle.codebook() {
        w.record("codebook", &[cb.k()], cb.centers().iter().copied());
        if let Some(s) = cb.source() {
            w.record("codebook.stats", &[3], [s.count as f64, s.mean, s.variance]);
        }
    }

    let mut out = Vec::with_capacity(w.buf.len() + 16);
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&w.records.to_le_bytes());
    out.extend_from_slice(&w.buf);
    let mut h = FnvHasher::default();
    h.write(&out);
    out.extend_from_slice(&h.finish().to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("weight file truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load_weights(bytes: &[u8]) -> Result<ModelBundle> {
    if bytes.len() < 4 || &bytes[..4] != WEIGHTS_MAGIC {
        return Err(Error::BadMagic { expected: "BPGW" });
    }
    if bytes.len() < 8 + 8 {
        return Err(Error::Format("weight file truncated".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != WEIGHTS_VERSION {
        return Err(Error::Version(version));
    }
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    let computed = content_hash(bytes);
    if stored != computed {
        return Err(Error::HashMismatch { stored, computed });
    }

    let body = &bytes[..bytes.len() - 8];
    let mut r = Reader {
        bytes: body,
        pos: 6,
    };
    let count = r.u16()?;
    let mut records: HashMap<String, Tensor> = HashMap::new();
    for _ in 0..count {
        let name_len = r.u8()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Format("record name is not UTF-8".into()))?;
        let rank = r.u8()? as usize;
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let raw = r.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Format("record too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        records.insert(name, Tensor::new(dims, data)?);
    }
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes after records".into()));
    }

    let mut get = |name: &str| {
        records
            .remove(name)
            .ok_or_else(|| Error::Format(format!("missing record {name:?}")))
    };
    let meta = get("meta")?;
    let m = meta.data();
    if m.len() != 6 {
        return Err(Error::Format("meta record has wrong length".into()));
    }
    let signal = SignalKind::from_code(m[0] as u8)?;
    let norm = NormConstants {
        floor: m[4],
        ceiling: m[5],
    };
    let generator = read_network(&mut get, "generator")?;
    let encoder = read_network(&mut get, "encoder")?;
    let discriminator = if m[2] != 0.0 {
        Some(read_network(&mut get, "discriminator")?)
    } else {
        None
    };
    let codebook = if m[3] != 0.0 {
        let mut cb = Codebook::from_centers(get("codebook")?.into_data())?;
        if let Ok(stats) = get("codebook.stats") {
            let s = stats.data();
            cb = cb.with_source(SourceStats {
                count: s[0] as u64,
                mean: s[1],
                variance: s[2],
            });
        }
        Some(cb)
    } else {
        None
    };
    let bundle = ModelBundle::new(signal, generator, encoder, discriminator, norm, codebook)?;
    if bundle.latent_dim() != m[1] as usize {
        return Err(Error::Format(
            "meta latent_dim disagrees with generator".into(),
        ));
    }
    Ok(bundle)
}

fn read_network(get: &mut impl FnMut(&str) -> Result<Tensor>, prefix: &str) -> Result<Network> {
    let arch = get(&format!("{prefix}.arch"))?;
    let rows: Vec<u32> = arch.data().iter().map(|&v| v as u32).collect();
    if arch.rank() != 2 || arch.shape()[1] != ARCH_ROW || rows.is_empty() {
        return Err(Error::Format(format!("{prefix}.arch has bad shape")));
    }
    let io = |r: &[u32]| -> Result<Vec<usize>> {
        let rank = r[0] as usize;
        if rank == 0 || rank >= ARCH_ROW / 2 {
            return Err(Error::Format(format!("{prefix}: bad io rank {rank}")));
        }
        Ok(r[1..=rank].iter().map(|&d| d as usize).collect())
    };
    let input = io(&rows[..ARCH_ROW / 2])?;
    let output = io(&rows[ARCH_ROW / 2..ARCH_ROW])?;
    let layers = rows[ARCH_ROW..]
        .chunks(ARCH_ROW)
        .map(LayerSpec::decode)
        .collect::<Result<Vec<_>>>()?;
    let n_params: usize = layers.iter().map(|l| l.param_shapes().len()).sum();
    let params = (0..n_params)
        .map(|i| get(&format!("{prefix}.{i}")))
        .collect::<Result<Vec<_>>>()?;
    Network::from_parts(input, output, layers, params)
}
