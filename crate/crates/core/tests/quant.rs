use latentcodec::quant::*;
use latentcodec::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Minimum mean squared distortion of any `k`-level scalar quantizer of
/// `samples`: optimal clusters are contiguous runs of the sorted samples.
fn dp_optimum(samples: &[f64], k: usize) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let mut p1 = vec![0.0; n + 1];
    let mut p2 = vec![0.0; n + 1];
    for i in 0..n {
        p1[i + 1] = p1[i] + s[i];
        p2[i + 1] = p2[i] + s[i] * s[i];
    }
    // squared error of s[a..b] around its mean
    let cost = |a: usize, b: usize| {
        let m = (b - a) as f64;
        let sum = p1[b] - p1[a];
        (p2[b] - p2[a]) - sum * sum / m
    };
    let mut prev: Vec<f64> = (0..=n)
        .map(|b| if b == 0 { 0.0 } else { cost(0, b) })
        .collect();
    for j in 2..=k {
        let mut cur = vec![f64::INFINITY; n + 1];
        for b in j..=n {
            for a in (j - 1)..b {
                let c = prev[a] + cost(a, b);
                if c < cur[b] {
                    cur[b] = c;
                }
            }
        }
        prev = cur;
    }
    prev[n] / n as f64
}

fn normal(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

#[test]
fn two_clusters_match_exhaustive_split() {
    let samples = [0.0, 1.0, 10.0, 11.0];
    let cb = fit_codebook(&samples, 2, 0).unwrap();
    assert_eq!(cb.centers(), &[0.5, 10.5]);
    assert!((cb.distortion(&samples) - dp_optimum(&samples, 2)).abs() < 1e-12);
}

#[test]
fn normal_k16_within_five_percent_of_optimum() {
    let samples = normal(10_000, 7);
    let cb = fit_codebook(&samples, 16, 1).unwrap();
    let got = cb.distortion(&samples);
    let best = dp_optimum(&samples, 16);
    assert!(got <= 1.05 * best, "{got} vs optimum {best}");
}

#[test]
fn lloyd_distortion_never_increases() {
    for seed in 0..5 {
        let samples = normal(2000, seed);
        let (_, trace) = fit_codebook_traced(&samples, 8, seed).unwrap();
        assert!(trace.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{trace:?}");
    }
}

#[test]
fn fitting_is_deterministic() {
    let samples = normal(3000, 3);
    assert_eq!(
        fit_codebook(&samples, 32, 9).unwrap(),
        fit_codebook(&samples, 32, 9).unwrap()
    );
}

#[test]
fn centers_are_cluster_means() {
    let samples = normal(500, 4);
    let cb = fit_codebook(&samples, 4, 0).unwrap();
    let (_, idx) = quantize_project(&samples, &cb);
    for j in 0..4 {
        let members: Vec<f64> = samples
            .iter()
            .zip(&idx)
            .filter(|(_, &i)| i == j)
            .map(|(v, _)| *v)
            .collect();
        let mean = members.iter().sum::<f64>() / members.len() as f64;
        // centers travel as f32
        assert!((cb.centers()[j] - mean).abs() < 1e-6, "center {j}");
    }
}

#[test]
fn too_few_distinct_values() {
    assert!(matches!(
        fit_codebook(&[1.0, 1.0, 2.0, 2.0], 4, 0),
        Err(Error::TooFewDistinct {
            needed: 4,
            found: 2
        })
    ));
}

#[test]
fn projection_examples() {
    let cb = Codebook::from_centers(vec![-1.0, 1.0]).unwrap();
    assert_eq!(
        quantize_project(&[0.2, -3.0], &cb),
        (vec![1.0, -1.0], vec![1, 0])
    );
    assert_eq!(quantize_project(&[0.0], &cb), (vec![-1.0], vec![0]));
    assert_eq!(dequantize(&[0, 1], &cb).unwrap(), vec![-1.0, 1.0]);
    assert!(matches!(
        dequantize(&[2], &cb),
        Err(Error::IndexOutOfRange { index: 2, k: 2 })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn projection_is_optimal_and_idempotent(
        centers in proptest::collection::btree_set(-1000i32..1000, 8),
        z in proptest::collection::vec(-15.0f64..15.0, 1..64),
    ) {
        let centers: Vec<f64> = centers.into_iter().map(|c| c as f64 / 64.0).collect();
        let cb = Codebook::from_centers(centers.clone()).unwrap();
        let (u, idx) = quantize_project(&z, &cb);
        for (i, &v) in z.iter().enumerate() {
            for &c in &centers {
                prop_assert!((v - u[i]).abs() <= (v - c).abs());
            }
        }
        let (uu, _) = quantize_project(&u, &cb);
        prop_assert_eq!(&uu, &u);
        let back = dequantize(&idx, &cb).unwrap();
        prop_assert_eq!(back.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), u.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}
