//! Canonical Huffman coding over quantization indices, with MSB-first bit I/O.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

/// Longest codeword the coder will emit or accept.
pub const MAX_CODE_LEN: usize = 64;

/// Append-only bit buffer, most significant bit first within each byte.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BitWriter {
    bytes: Vec<u8>,
    bits: u64,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn write_bits(&mut self, value: u64, count: usize) {
        for i in (0..count).rev() {
            self.write_bit((value >> i) & 1 == 1);
        }
    }

    pub fn write_bit(&mut self, bit: bool) {
        let offset = (self.bits % 8) as u8;
        if offset == 0 {
            self.bytes.push(0);
        }
        if bit {
            *self.bytes.last_mut().unwrap() |= 0x80 >> offset;
        }
        self.bits += 1;
    }

    pub fn bit_len(&self) -> u64 {
        self.bits
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}

/// Cursor over a bit buffer holding exactly `bit_len` meaningful bits.
#[derive(Clone, Debug)]
pub struct BitReader<'a> {
    bytes: &'a [u8],
    bit_len: u64,
    pos: u64,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8], bit_len: u64) -> Result<Self> {
        if bit_len > bytes.len() as u64 * 8 {
            return Err(Error::Truncated);
        }
        Ok(BitReader {
            bytes,
            bit_len,
            pos: 0,
        })
    }

    pub fn read_bit(&mut self) -> Result<bool> {
        if self.pos >= self.bit_len {
            return Err(Error::Truncated);
        }
        let byte = self.bytes[(self.pos / 8) as usize];
        let bit = byte & (0x80 >> (self.pos % 8)) != 0;
        self.pos += 1;
        Ok(bit)
    }

    pub fn position(&self) -> u64 {
        self.pos
    }

    pub fn remaining(&self) -> u64 {
        self.bit_len - self.pos
    }
}

/// Code lengths plus the canonical codewords derived from them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeTable {
    lengths: Vec<u8>,
    codes: Vec<u64>,
    /// Symbols ordered by (length, index).
    sorted: Vec<usize>,
    /// Number of codewords of each length, index 0 unused.
    counts: Vec<u64>,
}

impl CodeTable {
    /// Rebuilds the canonical code from a length array (0 = unused symbol).
    pub fn from_lengths(lengths: Vec<u8>) -> Result<Self> {
        let max = lengths.iter().copied().max().unwrap_or(0) as usize;
        if max == 0 {
            return Err(Error::EmptyAlphabet);
        }
        if max > MAX_CODE_LEN {
            return Err(Error::CodeTooLong(max));
        }
        let mut counts = vec![0u64; max + 1];
        for &l in &lengths {
            if l > 0 {
                counts[l as usize] += 1;
            }
        }
        // Kraft: sum 2^-len <= 1, checked in integer arithmetic scaled by 2^max.
        let kraft: u128 = (1..=max).map(|l| (counts[l] as u128) << (max - l)).sum();
        if kraft > 1u128 << max {
            return Err(Error::Format(
                "code lengths violate the Kraft inequality".into(),
            ));
        }
        let mut sorted: Vec<usize> = (0..lengths.len()).filter(|&s| lengths[s] > 0).collect();
        sorted.sort_by_key(|&s| (lengths[s], s));
        let mut codes = vec![0u64; lengths.len()];
        let mut code: u64 = 0;
        let mut prev_len = lengths[sorted[0]];
        for (i, &s) in sorted.iter().enumerate() {
            let len = lengths[s];
            if i > 0 {
                code = (code + 1) << (len - prev_len);
            }
            codes[s] = code;
            prev_len = len;
        }
        Ok(CodeTable {
            lengths,
            codes,
            sorted,
            counts,
        })
    }

    pub fn lengths(&self) -> &[u8] {
        &self.lengths
    }

    pub fn code(&self, symbol: usize) -> Option<(u64, u8)> {
        match self.lengths.get(symbol) {
            Some(&l) if l > 0 => Some((self.codes[symbol], l)),
            _ => None,
        }
    }

    pub fn alphabet_size(&self) -> usize {
        self.lengths.len()
    }

    /// Total encoded size of a sequence with the given symbol frequencies.
    pub fn cost(&self, freqs: &[u64]) -> u64 {
        freqs
            .iter()
            .zip(&self.lengths)
            .map(|(&f, &l)| f * l as u64)
            .sum()
    }
}

/// Optimal prefix code lengths for `freqs`, canonicalized by (length, symbol).
/// A lone used symbol gets a one-bit code.
pub fn build_table(freqs: &[u64]) -> Result<CodeTable> {
    let used: Vec<usize> = (0..freqs.len()).filter(|&s| freqs[s] > 0).collect();
    if used.is_empty() {
        return Err(Error::EmptyAlphabet);
    }
    let mut lengths = vec![0u8; freqs.len()];
    if used.len() == 1 {
        lengths[used[0]] = 1;
        return CodeTable::from_lengths(lengths);
    }

    // Nodes 0..n are leaves (by position in `used`), the rest internal.
    let n = used.len();
    let mut parent = vec![usize::MAX; 2 * n - 1];
    let mut heap: BinaryHeap<Reverse<(u64, usize)>> = used
        .iter()
        .enumerate()
        .map(|(i, &s)| Reverse((freqs[s], i)))
        .collect();
    let mut next = n;
    while heap.len() > 1 {
        let Reverse((wa, a)) = heap.pop().unwrap();
        let Reverse((wb, b)) = heap.pop().unwrap();
        parent[a] = next;
        parent[b] = next;
        heap.push(Reverse((wa.saturating_add(wb), next)));
        next += 1;
    }
    // Parents always have larger ids, so depths resolve from the root down.
    let mut depth = vec![0usize; 2 * n - 1];
    for node in (0..2 * n - 2).rev() {
        depth[node] = depth[parent[node]] + 1;
    }
    for (i, &s) in used.iter().enumerate() {
        if depth[i] > MAX_CODE_LEN {
            return Err(Error::CodeTooLong(depth[i]));
        }
        lengths[s] = depth[i] as u8;
    }
    CodeTable::from_lengths(lengths)
}

/// Symbol histogram over an alphabet of `alphabet` symbols.
pub fn frequencies(symbols: &[usize], alphabet: usize) -> Result<Vec<u64>> {
    let mut freqs = vec![0u64; alphabet];
    for &s in symbols {
        *freqs.get_mut(s).ok_or(Error::IndexOutOfRange {
            index: s,
            k: alphabet,
        })? += 1;
    }
    Ok(freqs)
}

/// Writes the codeword of every symbol; returns the number of bits emitted.
pub fn encode(symbols: &[usize], table: &CodeTable, out: &mut BitWriter) -> Result<u64> {
    let start = out.bit_len();
    for &s in symbols {
        let (code, len) = table.code(s).ok_or(Error::MissingCodeword(s))?;
        out.write_bits(code, len as usize);
    }
    Ok(out.bit_len() - start)
}

/// Reads exactly `n` symbols.
pub fn decode(input: &mut BitReader<'_>, table: &CodeTable, n: usize) -> Result<Vec<usize>> {
    let max = table.counts.len() - 1;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut code: u64 = 0;
        let mut first: u64 = 0;
        let mut index: u64 = 0;
        let mut found = None;
        for len in 1..=max {
            code |= input.read_bit()? as u64;
            let count = table.counts[len];
            if code < first + count {
                found = Some(table.sorted[(index + code - first) as usize]);
                break;
            }
            index += count;
            first = (first + count) << 1;
            code <<= 1;
        }
        out.push(found.ok_or(Error::InvalidPrefix)?);
    }
    Ok(out)
}

/// Shannon entropy in bits/symbol of the empirical distribution `freqs`.
pub fn entropy_bits(freqs: &[u64]) -> f64 {
    let total: u64 = freqs.iter().sum();
    if total == 0 {
        return 0.0;
    }
    freqs
        .iter()
        .filter(|&&f| f > 0)
        .map(|&f| {
            let p = f as f64 / total as f64;
            -p * p.log2()
        })
        .sum()
}
