//! Scalar non-uniform quantization: a shared 1-D K-means codebook and
//! nearest-center projection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const MAX_LLOYD_ITERS: usize = 100;
const MOVE_TOL: f64 = 1e-6;

/// Summary of the samples a codebook was fitted on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SourceStats {
    pub count: u64,
    pub mean: f64,
    pub variance: f64,
}

/// Sorted quantization centers shared by every latent element.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    centers: Vec<f64>,
    source: Option<SourceStats>,
}

fn f32_exact(v: f64) -> f64 {
    v as f32 as f64
}

impl Codebook {
    /// Rounds `centers` to f32 and validates that they are finite, strictly
    /// increasing, and that their count is a power of two in `2..=256`.
    pub fn from_centers(centers: Vec<f64>) -> Result<Self> {
        let centers: Vec<f64> = centers.into_iter().map(f32_exact).collect();
        let k = centers.len();
        if !(2..=256).contains(&k) || !k.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "codebook size must be a power of two in 2..=256, got {k}"
            )));
        }
        if centers.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument(
                "codebook center is not finite".into(),
            ));
        }
        if centers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "codebook centers must be strictly increasing".into(),
            ));
        }
        Ok(Codebook {
            centers,
            source: None,
        })
    }

    pub fn with_source(mut self, source: SourceStats) -> Self {
        self.source = Some(source);
        self
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn source(&self) -> Option<&SourceStats> {
        self.source.as_ref()
    }

    /// Bits of a fixed-length index, `log2(k)`.
    pub fn index_bits(&self) -> u32 {
        self.k().trailing_zeros()
    }

    /// Index of the nearest center; on an exact tie the lower index wins.
    pub fn nearest(&self, v: f64) -> usize {
        let c = &self.centers;
        let hi = c.partition_point(|&x| x < v);
        if hi == 0 {
            return 0;
        }
        if hi == c.len() {
            return c.len() - 1;
        }
        if v - c[hi - 1] <= c[hi] - v {
            hi - 1
        } else {
            hi
        }
    }

    /// Mean squared distance from each sample to its nearest center.
    pub fn distortion(&self, samples: &[f64]) -> f64 {
        if samples.is_empty() {
            return 0.0;
        }
        let total: f64 = samples
            .iter()
            .map(|&v| {
                let d = v - self.centers[self.nearest(v)];
                d * d
            })
            .sum();
        total / samples.len() as f64
    }
}

/// Projects every element onto its nearest center, returning the projected
/// values and their codebook indices.
pub fn quantize_project(z: &[f64], cb: &Codebook) -> (Vec<f64>, Vec<usize>) {
    let indices: Vec<usize> = z.iter().map(|&v| cb.nearest(v)).collect();
    let values = indices.iter().map(|&i| cb.centers[i]).collect();
    (values, indices)
}

pub fn dequantize(indices: &[usize], cb: &Codebook) -> Result<Vec<f64>> {
    indices
        .iter()
        .map(|&i| {
            cb.centers.get(i).copied().ok_or(Error::IndexOutOfRange {
                index: i,
                k: cb.k(),
            })
        })
        .collect()
}

/// Fits a `k`-center codebook by 1-D K-means (k-means++ seeding, Lloyd
/// iterations). Deterministic for a given `seed`.
pub fn fit_codebook(samples: &[f64], k: usize, seed: u64) -> Result<Codebook> {
    fit_codebook_traced(samples, k, seed).map(|(cb, _)| cb)
}

/// Like [`fit_codebook`], also returning the mean distortion after every
/// Lloyd iteration.
pub fn fit_codebook_traced(samples: &[f64], k: usize, seed: u64) -> Result<(Codebook, Vec<f64>)> {
    if k < 2 || !k.is_power_of_two() || k > 256 {
        return Err(Error::InvalidArgument(format!(
            "codebook size must be a power of two in 2..=256, got {k}"
        )));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite sample".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let distinct = {
        let mut d = sorted.clone();
        d.dedup();
        d
    };
    if distinct.len() < k {
        return Err(Error::TooFewDistinct {
            needed: k,
            found: distinct.len(),
        });
    }

    let n = sorted.len();
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    for &v in &sorted {
        prefix.push(prefix.last().unwrap() + v);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = seed_plus_plus(&sorted, k, &mut rng);
    let mut trace = Vec::new();

    for _ in 0..MAX_LLOYD_ITERS {
        centers.sort_by(f64::total_cmp);
        let bounds = cluster_bounds(&sorted, &centers);
        let mut next = centers.clone();
        let mut empty = Vec::new();
        for j in 0..k {
            let (lo, hi) = (bounds[j], bounds[j + 1]);
            if hi > lo {
                next[j] = (prefix[hi] - prefix[lo]) / (hi - lo) as f64;
            } else {
                empty.push(j);
            }
        }
        for j in empty {
            next[j] = farthest_sample(&sorted, &next);
        }
        let moved = centers
            .iter()
            .zip(&next)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        centers = next;
        centers.sort_by(f64::total_cmp);
        trace.push(mean_distortion(&sorted, &centers));
        if moved < MOVE_TOL {
            break;
        }
    }

    // Centers are transmitted as f32, so the codebook itself lives on the f32 grid.
    let mut rounded: Vec<f64> = centers.iter().map(|&c| f32_exact(c)).collect();
    rounded.sort_by(f64::total_cmp);
    let mean = prefix[n] / n as f64;
    let variance = sorted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let cb = Codebook::from_centers(rounded)?.with_source(SourceStats {
        count: n as u64,
        mean: f32_exact(mean),
        variance: f32_exact(variance),
    });
    Ok((cb, trace))
}

fn seed_plus_plus(sorted: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = sorted.len();
    let mut centers = vec![sorted[rng.gen_range(0..n)]];
    let mut d2: Vec<f64> = sorted.iter().map(|v| (v - centers[0]).powi(2)).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            // Rounding can land on a zero-weight tail; step back to a real candidate.
            while d2[chosen] == 0.0 && chosen > 0 {
                chosen -= 1;
            }
            chosen
        } else {
            break;
        };
        let c = sorted[pick];
        centers.push(c);
        for (d, v) in d2.iter_mut().zip(sorted) {
            *d = d.min((v - c).powi(2));
        }
    }
    centers
}

/// `bounds[j]..bounds[j + 1]` is the slice of `sorted` nearest to `centers[j]`.
fn cluster_bounds(sorted: &[f64], centers: &[f64]) -> Vec<usize> {
    let mut bounds = Vec::with_capacity(centers.len() + 1);
    bounds.push(0);
    for w in centers.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        // Ties at the midpoint go to the lower center.
        bounds.push(sorted.partition_point(|&v| v <= mid));
    }
    bounds.push(sorted.len());
    bounds
}

fn farthest_sample(sorted: &[f64], centers: &[f64]) -> f64 {
    let mut cs = centers.to_vec();
    cs.sort_by(f64::total_cmp);
    let mut best = (0.0, sorted[0]);
    for &v in sorted {
        let hi = cs.partition_point(|&c| c < v);
        let d = match hi {
            0 => cs[0] - v,
            h if h == cs.len() => v - cs[h - 1],
            h => (v - cs[h - 1]).min(cs[h] - v),
        };
        if d > best.0 {
            best = (d, v);
        }
    }
    best.1
}

fn mean_distortion(sorted: &[f64], centers: &[f64]) -> f64 {
    let bounds = cluster_bounds(sorted, centers);
    let mut total = 0.0;
    for (j, c) in centers.iter().enumerate() {
        for v in &sorted[bounds[j]..bounds[j + 1]] {
            total += (v - c) * (v - c);
        }
    }
    total / sorted.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_center_and_tie_rule() {
        let cb = Codebook::from_centers(vec![-1.0, 1.0]).unwrap();
        let (u, idx) = quantize_project(&[0.2, -3.0], &cb);
        assert_eq!(u, vec![1.0, -1.0]);
        assert_eq!(idx, vec![1, 0]);
        let (u, idx) = quantize_project(&[0.0], &cb);
        assert_eq!(u, vec![-1.0]);
        assert_eq!(idx, vec![0]);
    }

    #[test]
    fn projection_of_centers_is_identity() {
        let cb = Codebook::from_centers(vec![-2.0, -0.5, 0.25, 3.0]).unwrap();
        let z = vec![0.25, -2.0, 3.0, -0.5, 0.25];
        assert_eq!(quantize_project(&z, &cb).0, z);
    }

    #[test]
    fn dequantize_lookup_and_bounds() {
        let cb = Codebook::from_centers(vec![-1.0, 1.0]).unwrap();
        assert_eq!(dequantize(&[0, 1], &cb).unwrap(), vec![-1.0, 1.0]);
        assert!(matches!(
            dequantize(&[2], &cb),
            Err(Error::IndexOutOfRange { index: 2, k: 2 })
        ));
    }

    #[test]
    fn two_clusters_of_four_points() {
        let cb = fit_codebook(&[0.0, 1.0, 10.0, 11.0], 2, 7).unwrap();
        assert_eq!(cb.centers(), &[0.5, 10.5]);
    }

    #[test]
    fn k_equal_to_distinct_count_reproduces_samples() {
        let samples = [3.0, -1.0, 0.5, 3.0, 7.25, -1.0, 0.5, 2.0];
        let cb = fit_codebook(&samples, 4, 1);
        // five distinct values, k = 4 works; k = 8 must fail
        assert!(cb.is_ok());
        assert!(matches!(
            fit_codebook(&samples, 8, 1),
            Err(Error::TooFewDistinct {
                needed: 8,
                found: 5
            })
        ));
        let exact = [4.0, -2.0, 0.0, 1.5];
        let cb = fit_codebook(&exact, 4, 3).unwrap();
        assert_eq!(cb.centers(), &[-2.0, 0.0, 1.5, 4.0]);
        assert_eq!(cb.distortion(&exact), 0.0);
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(fit_codebook(&[1.0, 2.0, 3.0], 3, 0).is_err());
        assert!(Codebook::from_centers(vec![1.0, 1.0]).is_err());
        assert!(Codebook::from_centers(vec![0.0; 512]).is_err());
    }
}
