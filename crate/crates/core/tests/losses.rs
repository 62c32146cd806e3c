use latentcodec::losses::*;
use latentcodec::nn::{Activation, LayerSpec, ModelBundle, Network, NormConstants, SignalKind};
use latentcodec::tensor::{grad_check, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
    Tensor::new(
        vec![1, h, w],
        (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn constant(h: usize, w: usize, v: f64) -> Tensor {
    Tensor::full(vec![1, h, w], v)
}

/// Plain 2-D MS-SSIM on one channel: full 11x11 outer-product window,
/// direct loops, no shared code with the tape version.
mod reference {
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;

    fn window() -> Vec<Vec<f64>> {
        let g: Vec<f64> = (0..11)
            .map(|i| (-((i as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5)).exp())
            .collect();
        let s: f64 = g.iter().sum();
        let g: Vec<f64> = g.iter().map(|v| v / s).collect();
        g.iter()
            .map(|a| g.iter().map(|b| a * b).collect())
            .collect()
    }

    fn filter(img: &[Vec<f64>], win: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let (h, w) = (img.len(), img[0].len());
        (0..h - 10)
            .map(|i| {
                (0..w - 10)
                    .map(|j| {
                        let mut acc = 0.0;
                        for (di, row) in win.iter().enumerate() {
                            for (dj, k) in row.iter().enumerate() {
                                acc += k * img[i + di][j + dj];
                            }
                        }
                        acc
                    })
                    .collect()
            })
            .collect()
    }

    fn map2(a: &[Vec<f64>], b: &[Vec<f64>], f: impl Fn(f64, f64) -> f64) -> Vec<Vec<f64>> {
        a.iter()
            .zip(b)
            .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| f(*x, *y)).collect())
            .collect()
    }

    fn mean(a: &[Vec<f64>]) -> f64 {
        let n = (a.len() * a[0].len()) as f64;
        a.iter().flatten().sum::<f64>() / n
    }

    fn downsample(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
        (0..a.len() / 2)
            .map(|i| {
                (0..a[0].len() / 2)
                    .map(|j| {
                        (a[2 * i][2 * j]
                            + a[2 * i + 1][2 * j]
                            + a[2 * i][2 * j + 1]
                            + a[2 * i + 1][2 * j + 1])
                            / 4.0
                    })
                    .collect()
            })
            .collect()
    }

    pub fn ms_ssim(x: &[f64], y: &[f64], h: usize, w: usize, scales: usize) -> f64 {
        let all = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
        let total: f64 = all[..scales].iter().sum();
        let to_img = |v: &[f64]| -> Vec<Vec<f64>> {
            (0..h)
                .map(|i| (0..w).map(|j| (v[i * w + j] + 1.0) / 2.0).collect())
                .collect()
        };
        let (mut a, mut b) = (to_img(x), to_img(y));
        let win = window();
        let mut out = 1.0;
        for s in 0..scales {
            if s > 0 {
                a = downsample(&a);
                b = downsample(&b);
            }
            let ma = filter(&a, &win);
            let mb = filter(&b, &win);
            let saa = filter(&map2(&a, &a, |p, q| p * q), &win);
            let sbb = filter(&map2(&b, &b, |p, q| p * q), &win);
            let sab = filter(&map2(&a, &b, |p, q| p * q), &win);
            let mut cs = Vec::new();
            let mut full = Vec::new();
            for i in 0..ma.len() {
                let mut rc = Vec::new();
                let mut rf = Vec::new();
                for j in 0..ma[0].len() {
                    let (mx, my) = (ma[i][j], mb[i][j]);
                    let vx = saa[i][j] - mx * mx;
                    let vy = sbb[i][j] - my * my;
                    let cov = sab[i][j] - mx * my;
                    let c = (2.0 * cov + C2) / (vx + vy + C2);
                    rc.push(c);
                    rf.push(c * (2.0 * mx * my + C1) / (mx * mx + my * my + C1));
                }
                cs.push(rc);
                full.push(rf);
            }
            let factor = if s + 1 == scales {
                mean(&full)
            } else {
                mean(&cs)
            };
            out *= factor.max(1e-8).powf(all[s] / total);
        }
        out
    }
}

#[test]
fn ms_ssim_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (h, w, scales) in [(32, 32, 1), (32, 32, 2), (64, 64, 3), (48, 64, 2)] {
        for _ in 0..3 {
            let x = random_image(&mut rng, h, w);
            // a correlated pair keeps every factor well above the clamp
            let noise = random_image(&mut rng, h, w);
            let mixed = x
                .data()
                .iter()
                .zip(noise.data())
                .map(|(a, n)| 0.8 * a + 0.2 * n)
                .collect();
            let y = Tensor::new(vec![1, h, w], mixed).unwrap();
            let got = ms_ssim_value(&x, &y, scales).unwrap();
            let want = reference::ms_ssim(x.data(), y.data(), h, w, scales);
            assert!(
                (got - want).abs() < 1e-6,
                "{h}x{w}/{scales}: {got} vs {want}"
            );
        }
    }
}

#[test]
fn ms_ssim_identity_and_symmetry() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random_image(&mut rng, 32, 32);
    let y = random_image(&mut rng, 32, 32);
    assert!((ms_ssim_value(&x, &x, 2).unwrap() - 1.0).abs() < 1e-9);
    let (a, b) = (
        ms_ssim_value(&x, &y, 2).unwrap(),
        ms_ssim_value(&y, &x, 2).unwrap(),
    );
    assert!((a - b).abs() < 1e-9);
    assert!((0.0..1.0).contains(&a));
}

#[test]
fn ms_ssim_scale_limits() {
    assert_eq!(max_scales(32, 32), 2);
    assert_eq!(max_scales(64, 64), 3);
    assert_eq!(max_scales(10, 64), 0);
    let x = constant(32, 32, 0.0);
    assert!(ms_ssim_value(&x, &x, 3).is_err());
}

#[test]
fn constant_images_decrease_with_distance() {
    let base = constant(32, 32, -0.2);
    let mut last = 1.0;
    for d in [0.05, 0.1, 0.3, 0.6, 1.0] {
        let v = ms_ssim_value(&base, &constant(32, 32, -0.2 + d), 2).unwrap();
        assert!(v < last, "offset {d}: {v} !< {last}");
        last = v;
    }
}

#[test]
fn image_loss_hand_value() {
    // constant images: every contrast-structure factor is exactly 1
    let (a, b) = (-0.5f64, 0.25f64);
    let (pa, pb) = ((a + 1.0) / 2.0, (b + 1.0) / 2.0);
    let c1 = 1e-4;
    let lum = (2.0 * pa * pb + c1) / (pa * pa + pb * pb + c1);
    let w_last = 0.2856 / (0.0448 + 0.2856);
    let want = 1.0 - lum.powf(w_last) + 10.0 * (a - b).powi(2);
    let tape = Tape::new();
    let x = tape.constant(constant(32, 32, a));
    let g = tape.constant(constant(32, 32, b));
    let got = image_loss(x, g, 10.0, 2).unwrap().item();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn image_loss_alpha_zero_is_structural_term() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (x, y) = (
        random_image(&mut rng, 32, 32),
        random_image(&mut rng, 32, 32),
    );
    let tape = Tape::new();
    let (vx, vy) = (tape.constant(x.clone()), tape.constant(y.clone()));
    assert_eq!(
        image_loss(vx, vy, 0.0, 2).unwrap().item(),
        1.0 - ms_ssim_value(&x, &y, 2).unwrap()
    );
    assert!(image_loss(vx, vx, 10.0, 2).unwrap().item().abs() < 1e-12);
}

#[test]
fn mse_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let y: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut sum = 0.0;
    for i in 0..8 {
        for j in 0..8 {
            sum += (x[i * 8 + j] - y[i * 8 + j]).powi(2);
        }
    }
    let tx = Tensor::new(vec![8, 8], x).unwrap();
    let ty = Tensor::new(vec![8, 8], y).unwrap();
    let tape = Tape::new();
    let got = mse(tape.constant(tx.clone()), tape.constant(ty.clone()))
        .unwrap()
        .item();
    assert!((got - sum / 64.0).abs() < 1e-15);
    assert_eq!(mse_value(&tx, &ty).unwrap(), got);
    assert!(mse_value(&tx, &Tensor::zeros(vec![64])).is_err());
}

fn disc_bundle() -> ModelBundle {
    ModelBundle::init(SignalKind::Image, 8, 1, 21).unwrap()
}

/// Output of the first `layers` layers, computed by a truncated copy of the network.
fn prefix_output(net: &Network, layers: usize, x: &Tensor) -> Tensor {
    if layers == 0 {
        return x.clone();
    }
    let specs = net.layers()[..layers].to_vec();
    let count: usize = specs.iter().map(|l| l.param_shapes().len()).sum();
    let mut shape = net.input_shape().to_vec();
    for l in &specs {
        shape = l.output_shape(&shape).unwrap();
    }
    let prefix = Network::from_parts(
        net.input_shape().to_vec(),
        shape,
        specs,
        net.params()[..count].to_vec(),
    )
    .unwrap();
    prefix.infer(x).unwrap()
}

#[test]
fn feature_loss_matches_manual_taps() {
    let bundle = disc_bundle();
    let disc = bundle.discriminator().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let (x, g) = (
        random_image(&mut rng, 32, 32),
        random_image(&mut rng, 32, 32),
    );
    let spec = LossSpec::speech(0.7, vec![2, 4]);
    let mut want = 0.7 * mse_value(&x, &g).unwrap();
    for &l in &spec.feature_layers {
        let (fx, fg) = (prefix_output(disc, l, &x), prefix_output(disc, l, &g));
        let sq: f64 = fx
            .data()
            .iter()
            .zip(fg.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        want += sq / fx.len() as f64;
    }
    let tape = Tape::new();
    let got = feature_loss(tape.constant(x), tape.constant(g), &bundle, &spec)
        .unwrap()
        .item();
    assert!(
        (got - want).abs() < 1e-12 * want.max(1.0),
        "{got} vs {want}"
    );
}

#[test]
fn feature_loss_degenerate_cases() {
    let bundle = disc_bundle();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let (x, g) = (
        random_image(&mut rng, 32, 32),
        random_image(&mut rng, 32, 32),
    );
    let tape = Tape::new();
    let (vx, vg) = (tape.constant(x.clone()), tape.constant(g.clone()));
    assert_eq!(
        feature_loss(vx, vx, &bundle, &LossSpec::speech(1.0, vec![2, 4]))
            .unwrap()
            .item(),
        0.0
    );
    // tap 0 is the raw input
    let got = feature_loss(vx, vg, &bundle, &LossSpec::speech(0.5, vec![0]))
        .unwrap()
        .item();
    assert!((got - 1.5 * mse_value(&x, &g).unwrap()).abs() < 1e-12);
    let bare = bundle.without_discriminator();
    assert!(feature_loss(vx, vg, &bare, &LossSpec::speech(1.0, vec![2])).is_err());
}

/// Same topology as `disc_bundle`, with tanh in place of leaky ReLU so that
/// finite differences never straddle a kink.
fn smooth_disc_bundle() -> ModelBundle {
    let (g, e, d) = disc_bundle().into_networks();
    let d = d.unwrap();
    let layers: Vec<LayerSpec> = d
        .layers()
        .iter()
        .map(|l| match l {
            LayerSpec::Activation(_) => LayerSpec::Activation(Activation::Tanh),
            other => other.clone(),
        })
        .collect();
    let d = Network::from_parts(
        d.input_shape().to_vec(),
        d.output_shape().to_vec(),
        layers,
        d.params().to_vec(),
    )
    .unwrap();
    ModelBundle::new(
        SignalKind::Image,
        g,
        e,
        Some(d),
        NormConstants::default(),
        None,
    )
    .unwrap()
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let bundle = smooth_disc_bundle();
    let spec = LossSpec::speech(0.5, vec![2, 4]);
    for trial in 0..10 {
        let x = random_image(&mut rng, 32, 32);
        // correlated with the target, like a search iterate, so no MS-SSIM
        // factor sits at its clamp
        let noise = random_image(&mut rng, 32, 32);
        let mixed = x
            .data()
            .iter()
            .zip(noise.data())
            .map(|(a, n)| 0.7 * a + 0.3 * n)
            .collect();
        let g = Tensor::new(vec![1, 32, 32], mixed).unwrap();
        let target = x.clone();
        let checks: [(&str, f64); 4] = [
            (
                "mse",
                grad_check(|t, v| mse(t.constant(target.clone()), v), &g, 1e-5).unwrap(),
            ),
            // corner pixels barely touch the window (gradients ~1e-9), where a
            // 1e-5 step is dominated by rounding
            (
                "ms_ssim",
                grad_check(|t, v| ms_ssim(t.constant(target.clone()), v, 2), &g, 1e-3).unwrap(),
            ),
            (
                "image_loss",
                grad_check(
                    |t, v| image_loss(t.constant(target.clone()), v, 10.0, 2),
                    &g,
                    1e-5,
                )
                .unwrap(),
            ),
            (
                "feature_loss",
                grad_check(
                    |t, v| feature_loss(t.constant(target.clone()), v, &bundle, &spec),
                    &g,
                    1e-5,
                )
                .unwrap(),
            ),
        ];
        for (name, err) in checks {
            assert!(err < 1e-4, "{name} trial {trial}: {err}");
        }
    }
}

#[test]
fn psnr_values() {
    assert_eq!(psnr(&[3; 64], &[3; 64]).unwrap(), 99.0);
    assert_eq!(psnr(&[0; 64], &[255; 64]).unwrap(), 0.0);
    let mse = 255.0f64 * 255.0 / 10f64.powf(3.29);
    assert!((psnr_from_mse(mse) - 32.9).abs() < 0.01);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn image_loss_is_non_negative(seed in any::<u64>(), alpha in 0.0f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y) = (random_image(&mut rng, 32, 32), random_image(&mut rng, 32, 32));
        let tape = Tape::new();
        prop_assert!(image_loss(tape.constant(x), tape.constant(y), alpha, 2).unwrap().item() > 0.0);
    }

    #[test]
    fn psnr_strictly_decreasing_in_mse(a in 1e-6f64..1e4, b in 1e-6f64..1e4) {
        prop_assume!(a < b);
        prop_assume!(psnr_from_mse(a) < 99.0);
        prop_assert!(psnr_from_mse(a) > psnr_from_mse(b));
    }
}
