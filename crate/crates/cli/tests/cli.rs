use std::path::Path;
use std::process::{Command, Output};

use latentcodec::nn::{load_weights, save_weights, ModelBundle, SignalKind};
use latentcodec::pipelines::{encode_pnm, save_wav, Pnm, Waveform};
use latentcodec::quant::Codebook;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latentcodec"))
        .args(args)
        .env("LATENTCODEC_THREADS", "2")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_model(path: &Path, signal: SignalKind, latent: usize, seed: u64) -> ModelBundle {
    let cb = Codebook::from_centers((0..16).map(|i| (i as f64 - 7.5) * 0.25).collect()).unwrap();
    let bundle = ModelBundle::init(signal, latent, 1, seed)
        .unwrap()
        .with_codebook(cb);
    std::fs::write(path, save_weights(&bundle)).unwrap();
    bundle
}

fn gradient_image(path: &Path, offset: u8) {
    let data = (0..32 * 32)
        .map(|i| ((i % 32) * 6 + (i / 32) * 2) as u8 + offset)
        .collect();
    let img = Pnm {
        channels: 1,
        width: 32,
        height: 32,
        data,
    };
    std::fs::write(path, encode_pnm(&img)).unwrap();
}

/// The number after `key` in whitespace-separated output.
fn field(out: &str, key: &str) -> f64 {
    let mut words = out.split_whitespace();
    while let Some(w) = words.next() {
        if w == key {
            return words.next().unwrap().parse().unwrap();
        }
    }
    panic!("{key} not in {out:?}");
}

#[test]
fn missing_data_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["train", "--out", p(&dir.path().join("m.bpgw"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--data"));
}

#[test]
fn train_writes_model_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.bpgw");
    let cfg = dir.path().join("train.cfg");
    std::fs::write(
        &cfg,
        "# toy run\nlatent_dim=6\nlevels=8\nholdout=4\nbatch_size=4\n",
    )
    .unwrap();
    let args = [
        "train",
        "--config",
        p(&cfg),
        "--data",
        "synthetic:shapes:count=12,seed=2",
        "--out",
        p(&model),
        "--epochs",
        "1",
        "--stage2",
        "--stage2-epochs",
        "1",
        "--latent-dim",
        "8",
    ];
    ok(&args);
    let bundle = load_weights(&std::fs::read(&model).unwrap()).unwrap();
    // the flag beats the config file; config-only keys still apply
    assert_eq!(bundle.latent_dim(), 8);
    assert_eq!(bundle.codebook().unwrap().k(), 8);
    let log = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
    assert!(log.lines().count() >= 4, "{log}");
    // same seed, same bytes
    let first = std::fs::read(&model).unwrap();
    ok(&args);
    assert_eq!(std::fs::read(&model).unwrap(), first);
}

#[test]
fn image_compress_decompress() {
    let dir = tempfile::tempdir().unwrap();
    let (model, input, blob, output) = (
        dir.path().join("m.bpgw"),
        dir.path().join("in.pgm"),
        dir.path().join("in.bpgc"),
        dir.path().join("out.pgm"),
    );
    write_model(&model, SignalKind::Image, 16, 1);
    gradient_image(&input, 0);
    let report = dir.path().join("search.log");
    let out = ok(&[
        "compress",
        "--model",
        p(&model),
        "--input",
        p(&input),
        "--out",
        p(&blob),
        "--iters",
        "3",
        "--inner-steps",
        "2",
        "--report",
        p(&report),
    ]);
    let bits = std::fs::metadata(&blob).unwrap().len() * 8;
    assert_eq!(field(&out, "rate"), bits as f64 / 1024.0);
    assert!(field(&out, "final_loss").is_finite());
    assert!(std::fs::read_to_string(&report)
        .unwrap()
        .contains("final_loss"));
    ok(&[
        "decompress",
        "--model",
        p(&model),
        "--input",
        p(&blob),
        "--out",
        p(&output),
    ]);
    let img = latentcodec::pipelines::decode_pnm(&std::fs::read(&output).unwrap()).unwrap();
    assert_eq!((img.channels, img.width, img.height), (1, 32, 32));
}

#[test]
fn corrupt_blob_and_wrong_model_fail() {
    let dir = tempfile::tempdir().unwrap();
    let (model, other, input, blob) = (
        dir.path().join("m.bpgw"),
        dir.path().join("o.bpgw"),
        dir.path().join("in.pgm"),
        dir.path().join("in.bpgc"),
    );
    write_model(&model, SignalKind::Image, 16, 1);
    write_model(&other, SignalKind::Image, 16, 2);
    gradient_image(&input, 0);
    ok(&[
        "compress",
        "--model",
        p(&model),
        "--input",
        p(&input),
        "--out",
        p(&blob),
        "--iters",
        "1",
    ]);
    let out_png = dir.path().join("o.pgm");

    let out = run(&[
        "decompress",
        "--model",
        p(&other),
        "--input",
        p(&blob),
        "--out",
        p(&out_png),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("model mismatch"));

    let mut bytes = std::fs::read(&blob).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x01;
    std::fs::write(&blob, bytes).unwrap();
    let out = run(&[
        "decompress",
        "--model",
        p(&model),
        "--input",
        p(&blob),
        "--out",
        p(&out_png),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum"));
    assert!(!out_png.exists());
}

#[test]
fn compress_checks_requested_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let (model, input) = (dir.path().join("m.bpgw"), dir.path().join("in.pgm"));
    write_model(&model, SignalKind::Image, 16, 1);
    gradient_image(&input, 0);
    let blob = dir.path().join("x.bpgc");
    let out = run(&[
        "compress",
        "--model",
        p(&model),
        "--input",
        p(&input),
        "--out",
        p(&blob),
        "--levels",
        "64",
    ]);
    assert!(!out.status.success());
}

#[test]
fn speech_rate_is_2000_bps_plus_header() {
    let dir = tempfile::tempdir().unwrap();
    let (model, input, blob, output) = (
        dir.path().join("s.bpgw"),
        dir.path().join("a.wav"),
        dir.path().join("a.bpgc"),
        dir.path().join("b.wav"),
    );
    write_model(&model, SignalKind::Speech, 512, 3);
    let samples = (0..16384).map(|i| 0.3 * (i as f64 * 0.07).sin()).collect();
    save_wav(&input, &Waveform::new(samples).unwrap()).unwrap();
    let out = ok(&[
        "compress",
        "--model",
        p(&model),
        "--input",
        p(&input),
        "--out",
        p(&blob),
        "--levels",
        "16",
        "--latent-dim",
        "512",
        "--iters",
        "1",
        "--inner-steps",
        "1",
    ]);
    let header = field(&out, "header_bits") as u64;
    assert_eq!(header, 8 * (33 + 5 * 16));
    let payload = field(&out, "payload_bits") as u64;
    // Huffman never loses to the 4-bit fixed code, whose rate is 2000 bps
    assert!(payload <= 2048);
    assert_eq!(field(&out, "pre_huffman_rate"), 2000.0);
    let total = std::fs::metadata(&blob).unwrap().len() * 8;
    assert_eq!(field(&out, "rate"), (total * 16000) as f64 / 16384.0);
    ok(&[
        "decompress",
        "--model",
        p(&model),
        "--input",
        p(&blob),
        "--out",
        p(&output),
    ]);
    assert_eq!(
        latentcodec::pipelines::load_wav(&output)
            .unwrap()
            .samples()
            .len(),
        16384
    );
}

#[test]
fn eval_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.pgm"), dir.path().join("b.pgm"));
    gradient_image(&a, 0);
    gradient_image(&b, 3);
    let out = ok(&["eval", "--original", p(&a), "--reconstructed", p(&a)]);
    assert_eq!(field(&out, "psnr"), 99.0);
    assert_eq!(field(&out, "ms_ssim"), 1.0);
    let out = ok(&["eval", "--original", p(&a), "--reconstructed", p(&b)]);
    let expected = 10.0 * (255.0f64 * 255.0 / 9.0).log10();
    assert!((field(&out, "psnr") - expected).abs() < 1e-3, "{out}");

    let mismatch = dir.path().join("c.pgm");
    let img = Pnm {
        channels: 1,
        width: 64,
        height: 32,
        data: vec![0; 2048],
    };
    std::fs::write(&mismatch, encode_pnm(&img)).unwrap();
    assert!(
        !run(&["eval", "--original", p(&a), "--reconstructed", p(&mismatch)])
            .status
            .success()
    );
}

#[test]
fn eval_batch_directory() {
    let dir = tempfile::tempdir().unwrap();
    let (orig, recon) = (dir.path().join("orig"), dir.path().join("recon"));
    std::fs::create_dir_all(&orig).unwrap();
    std::fs::create_dir_all(&recon).unwrap();
    for i in 0..3u8 {
        gradient_image(&orig.join(format!("{i}.pgm")), 0);
        gradient_image(&recon.join(format!("{i}.pgm")), i);
    }
    let csv = dir.path().join("m.csv");
    ok(&[
        "eval",
        "--original",
        p(&orig),
        "--reconstructed",
        p(&recon),
        "--out",
        p(&csv),
    ]);
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 4);
}

#[test]
fn sweep_grid_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (m8, m16) = (dir.path().join("m8.bpgw"), dir.path().join("m16.bpgw"));
    write_model(&m8, SignalKind::Image, 8, 1);
    write_model(&m16, SignalKind::Image, 16, 1);
    let csv = dir.path().join("sweep.csv");
    let common = [
        "--data",
        "synthetic:shapes:count=6",
        "--holdout",
        "2",
        "--codebook-samples",
        "4",
        "--iters",
        "2",
        "--inner-steps",
        "2",
        "--out",
        p(&csv),
    ];
    let mut args = vec![
        "sweep",
        "--model",
        p(&m8),
        "--model",
        p(&m16),
        "--levels",
        "4,16",
    ];
    args.extend(common);
    ok(&args);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 5);
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let (dim, levels): (f64, f64) = (f[0].parse().unwrap(), f[1].parse().unwrap());
        assert_eq!(f[3].parse::<f64>().unwrap(), dim * levels.log2() / 1024.0);
    }

    let mut args = vec!["sweep", "--model", p(&m8), "--latent-dim", "32"];
    args.extend(common);
    let out = run(&args);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("latent size 32"));
}
