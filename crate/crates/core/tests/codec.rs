use latentcodec::admm::AdmmConfig;
use latentcodec::codec::*;
use latentcodec::losses::LossSpec;
use latentcodec::nn::{ModelBundle, SignalKind};
use latentcodec::pipelines::Waveform;
use latentcodec::quant::Codebook;
use latentcodec::tensor::Tensor;
use latentcodec::training::shapes_dataset;
use latentcodec::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn quick() -> AdmmConfig {
    AdmmConfig {
        admm_iters: 4,
        inner_steps: 3,
        ..AdmmConfig::default()
    }
}

fn image_bundle(seed: u64) -> ModelBundle {
    let cb = Codebook::from_centers((0..16).map(|i| (i as f64 - 7.5) * 0.3).collect()).unwrap();
    ModelBundle::init(SignalKind::Image, 32, 1, seed)
        .unwrap()
        .with_codebook(cb)
}

fn shape(seed: u64) -> Tensor {
    shapes_dataset(1, seed).unwrap().items()[0].clone()
}

#[test]
fn hand_counted_blob() {
    let cb = Codebook::from_centers(vec![-1.0, 1.0]).unwrap();
    let blob = CompressedBlob::pack(SignalKind::Image, 7, &cb, &[0, 0, 0, 1]).unwrap();
    // two used symbols -> one bit each
    assert_eq!(blob.lengths, vec![1, 1]);
    assert_eq!(blob.payload_bits, 4);
    let bytes = blob.to_bytes();
    // 33 fixed + 2 * 4 centers + 2 lengths + 1 payload byte
    assert_eq!(bytes.len(), 44);
    let r = measure_rate(&[blob], Extent::Pixels(1024));
    assert_eq!(r.header_bits, 8 * 43);
    assert_eq!(r.total_bits, 352);
    assert_eq!(r.fixed_length_bits, 4);
}

#[test]
fn payload_is_sum_of_codeword_lengths() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cb = Codebook::from_centers((0..64).map(|i| i as f64).collect()).unwrap();
    for _ in 0..20 {
        let idx: Vec<usize> = (0..500)
            .map(|_| rng.gen_range(0..64usize).min(rng.gen_range(0..64)))
            .collect();
        let blob = CompressedBlob::pack(SignalKind::Image, 1, &cb, &idx).unwrap();
        let sum: u64 = idx.iter().map(|&i| blob.lengths[i] as u64).sum();
        assert_eq!(blob.payload_bits, sum);
        assert_eq!(blob.payload.len() as u64, sum.div_ceil(8));
    }
}

#[test]
fn paper_scale_rate_arithmetic() {
    // 512 x log2(16) bits over 16384 samples
    let bits = fixed_length_bits(512, 16).unwrap();
    assert_eq!(Extent::Samples(16384).ratio(bits), (2048 * 16000, 16384));
    assert_eq!(Extent::Samples(16384).rate(bits), 2000.0);
    // 20000 x log2(64) bits over 768 x 512 pixels
    let bits = fixed_length_bits(20_000, 64).unwrap();
    let (n, d) = Extent::Pixels(768 * 512).ratio(bits);
    assert_eq!((n, d), (120_000, 393_216));
    assert_eq!((n * 10_000 + d / 2) / d, 3052);
    assert!(fixed_length_bits(10, 12).is_err());
}

#[test]
fn compress_is_deterministic_and_lossless() {
    let bundle = image_bundle(1);
    let spec = LossSpec::for_bundle(&bundle);
    let x = shape(5);
    let (a, report, u) = compress(&x, &bundle, &spec, &quick()).unwrap();
    let (b, _, _) = compress(&x, &bundle, &spec, &quick()).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    let back = CompressedBlob::from_bytes(&a.to_bytes()).unwrap();
    let z = decode_latent(&back, &bundle).unwrap();
    assert_eq!(
        z.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        u.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    let y1 = decompress(&back, &bundle).unwrap();
    let y2 = decompress(&back, &bundle).unwrap();
    assert_eq!(y1, y2);
    assert_eq!(y1.shape(), x.shape());
    assert!(y1.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    assert!(report.final_loss.is_finite());
}

#[test]
fn wrong_model_is_rejected() {
    let bundle = image_bundle(1);
    let spec = LossSpec::for_bundle(&bundle);
    let (blob, _, _) = compress(&shape(2), &bundle, &spec, &quick()).unwrap();
    let other = image_bundle(2);
    assert!(matches!(
        decompress(&blob, &other),
        Err(Error::ModelMismatch { .. })
    ));
}

#[test]
fn bundle_without_codebook_cannot_compress() {
    let bundle = ModelBundle::init(SignalKind::Image, 16, 1, 0).unwrap();
    let spec = LossSpec::for_bundle(&bundle);
    assert!(compress(&shape(0), &bundle, &spec, &quick()).is_err());
}

#[test]
fn batch_matches_single_calls() {
    let bundle = image_bundle(4);
    let spec = LossSpec::for_bundle(&bundle);
    let xs: Vec<Tensor> = (0..4).map(shape).collect();
    let many = compress_many(&xs, &bundle, &spec, &quick()).unwrap();
    for (x, c) in xs.iter().zip(&many) {
        assert_eq!(compress(x, &bundle, &spec, &quick()).unwrap().0, c.blob);
    }
}

#[test]
fn speech_file_round_trip() {
    let cb = Codebook::from_centers((0..16).map(|i| (i as f64 - 7.5) * 0.3).collect()).unwrap();
    let bundle = ModelBundle::init(SignalKind::Speech, 32, 1, 3)
        .unwrap()
        .with_codebook(cb);
    let spec = LossSpec::for_bundle(&bundle);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = Waveform::new((0..20_000).map(|_| rng.gen_range(-0.3..0.3)).collect()).unwrap();
    let config = AdmmConfig {
        admm_iters: 1,
        inner_steps: 1,
        ..AdmmConfig::default()
    };
    let out = compress_speech(&w, &bundle, &spec, &config).unwrap();
    assert_eq!(out.len(), 2);
    let blobs: Vec<CompressedBlob> = out.into_iter().map(|c| c.blob).collect();
    let bytes = write_blobs(&blobs);
    let back = read_blobs(&bytes).unwrap();
    assert_eq!(back, blobs);
    let y = decompress_speech(&back, &bundle).unwrap();
    assert_eq!(y.samples().len(), 2 * 16384);
}

#[test]
fn sweep_grid_and_csv() {
    let models: Vec<ModelBundle> = [8, 16]
        .iter()
        .map(|&d| ModelBundle::init(SignalKind::Image, d, 1, 0).unwrap())
        .collect();
    let fit = shapes_dataset(4, 1).unwrap();
    let eval: Vec<Tensor> = (10..12).map(shape).collect();
    let rows = sweep(&models, &[4, 16], &fit, &eval, 4, &quick(), 0).unwrap();
    assert_eq!(rows.len(), 4);
    for r in &rows {
        let exact = (r.latent_dim * r.levels.trailing_zeros() as usize) as f64 / 1024.0;
        assert_eq!(r.pre_huffman_rate, exact);
        assert!(r.post_huffman_rate <= r.pre_huffman_rate);
    }
    assert_eq!(sweep_csv(&rows).unwrap().lines().count(), 5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn any_single_bit_flip_fails_checksum(
        idx in proptest::collection::vec(0usize..16, 0..200),
        pos in any::<prop::sample::Index>(),
        bit in 0u8..8,
    ) {
        let cb = Codebook::from_centers((0..16).map(|i| i as f64).collect()).unwrap();
        let blob = CompressedBlob::pack(SignalKind::Image, 99, &cb, &idx).unwrap();
        let mut bytes = blob.to_bytes();
        let at = pos.index(bytes.len());
        bytes[at] ^= 1 << bit;
        let checksum_error = matches!(CompressedBlob::from_bytes(&bytes), Err(Error::Checksum { .. }));
        prop_assert!(checksum_error);
    }

    #[test]
    fn truncation_is_an_error(idx in proptest::collection::vec(0usize..16, 1..100), cut in 1usize..20) {
        let cb = Codebook::from_centers((0..16).map(|i| i as f64).collect()).unwrap();
        let bytes = CompressedBlob::pack(SignalKind::Image, 5, &cb, &idx).unwrap().to_bytes();
        let cut = cut.min(bytes.len());
        prop_assert!(CompressedBlob::from_bytes(&bytes[..bytes.len() - cut]).is_err());
        prop_assert!(read_blobs(&bytes[..bytes.len() - cut]).is_err());
    }
}
