use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use latentcodec::admm::{AdmmConfig, Init, Optimizer};
use latentcodec::codec::{
    compress, compress_speech, decompress, decompress_speech, measure_rate, read_blobs, sweep,
    sweep_csv, write_blobs, CompressedBlob, Extent,
};
use latentcodec::losses::{max_scales, ms_ssim_value, mse_value, psnr, LossSpec};
use latentcodec::nn::{load_weights, save_weights, ModelBundle, SignalKind};
use latentcodec::pipelines::{
    decode_pnm, encode_pnm, load_image, load_wav, mel_forward, pixel_to_unit, save_wav, stft,
    tensor_to_pixels, Pnm,
};
use latentcodec::tensor::Tensor;
use latentcodec::training::{train, DatasetSpec, TrainConfig};

#[derive(Parser)]
#[command(
    name = "latentcodec",
    version,
    about = "Generative latent-search codec for images and speech"
)]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Two-stage training; writes a weight file and a CSV log.
    Train(TrainArgs),
    /// Signal file (.pgm/.ppm/.wav) to .bpgc.
    Compress(CompressArgs),
    /// .bpgc to .pgm/.ppm/.wav.
    Decompress(DecompressArgs),
    /// Quality metrics between original and reconstructed files or directories.
    Eval(EvalArgs),
    /// Rate-quality grid over latent sizes and codebook levels.
    Sweep(SweepArgs),
}

/// Every command also takes `--config FILE` of `key=value` lines; flags win.
#[derive(Args)]
struct TrainArgs {
    /// `synthetic:shapes[:count=N,seed=S]`, `synthetic:tones[...]` or a directory.
    #[arg(long)]
    data: String,
    #[arg(long)]
    out: PathBuf,
    /// Training log CSV (default: `<out>.csv`).
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    signal: Option<SignalKind>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long, default_value_t = 16)]
    levels: usize,
    #[arg(long)]
    epochs: Option<usize>,
    /// Fine-tune on quantized latents after fitting the codebook.
    #[arg(long)]
    stage2: bool,
    #[arg(long)]
    stage2_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    holdout: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone)]
struct SearchArgs {
    /// Weight of the MS-SSIM term (images) or feature term (speech).
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    /// ADMM iterations.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    inner_steps: Option<usize>,
    #[arg(long)]
    step_size: Option<f64>,
    /// `encoder` or `zeros`.
    #[arg(long)]
    init: Option<Init>,
    /// `adam` or `sgd`.
    #[arg(long)]
    optimizer: Option<Optimizer>,
}

impl SearchArgs {
    fn config(&self) -> Result<AdmmConfig> {
        let mut c = AdmmConfig::default();
        if let Some(v) = self.mu {
            c.mu = v;
        }
        if let Some(v) = self.iters {
            c.admm_iters = v;
        }
        if let Some(v) = self.inner_steps {
            c.inner_steps = v;
        }
        if let Some(v) = self.step_size {
            c.step_size = v;
        }
        if let Some(v) = &self.init {
            c.init = v.clone();
        }
        if let Some(v) = self.optimizer {
            c.optimizer = v;
        }
        c.validate()?;
        Ok(c)
    }

    fn loss(&self, bundle: &ModelBundle) -> Result<LossSpec> {
        let mut spec = LossSpec::for_bundle(bundle);
        if let Some(a) = self.alpha {
            spec.alpha = a;
        }
        spec.validate(bundle)?;
        Ok(spec)
    }
}

#[derive(Args)]
struct CompressArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Expected latent size; checked against the model.
    #[arg(long)]
    latent_dim: Option<usize>,
    /// Expected codebook size; checked against the model.
    #[arg(long)]
    levels: Option<usize>,
    /// Write the per-iteration search log here.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    search: SearchArgs,
}

#[derive(Args)]
struct DecompressArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Original file, or a directory for batch mode.
    #[arg(long)]
    original: PathBuf,
    /// Reconstructed file, or a directory holding files of the same names.
    #[arg(long)]
    reconstructed: PathBuf,
    /// Metrics CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Weight files, one per latent size.
    #[arg(long, required = true, num_args = 1.., value_delimiter = ',')]
    model: Vec<PathBuf>,
    /// Latent sizes to sweep; each needs a model (default: every model).
    #[arg(long, value_delimiter = ',')]
    latent_dim: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [4usize, 16, 64])]
    levels: Vec<usize>,
    /// Dataset; the last `--holdout` items are evaluated, the rest fit codebooks.
    #[arg(long)]
    data: String,
    #[arg(long, default_value_t = 20)]
    holdout: usize,
    #[arg(long, default_value_t = 32)]
    codebook_samples: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    search: SearchArgs,
}

/// Splices `key=value` lines of a `--config` file in front of the command
/// line flags. Later flags override earlier ones, so explicit flags win.
fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut path = None;
    let mut rest = Vec::with_capacity(args.len());
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            path = Some(PathBuf::from(it.next().context("--config needs a file")?));
        } else if let Some(p) = s.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
        } else {
            rest.push(a);
        }
    }
    let Some(path) = path else { return Ok(rest) };
    let text =
        std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let mut injected = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .with_context(|| format!("{}:{}: expected key=value", path.display(), n + 1))?;
        let flag = format!("--{}", k.trim().replace('_', "-"));
        match v.trim() {
            "true" => injected.push(flag.into()),
            "false" => {}
            v => {
                injected.push(flag.into());
                injected.push(v.into());
            }
        }
    }
    // bin name and subcommand come first
    if rest.len() < 2 {
        bail!("--config must follow a subcommand");
    }
    let mut out: Vec<OsString> = rest[..2].to_vec();
    out.extend(injected);
    out.extend_from_slice(&rest[2..]);
    Ok(out)
}

fn load_model(path: &Path) -> Result<ModelBundle> {
    let bytes = std::fs::read(path).with_context(|| format!("reading model {}", path.display()))?;
    Ok(load_weights(&bytes).with_context(|| format!("loading model {}", path.display()))?)
}

fn extension(path: &Path) -> String {
    path.extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default()
}

fn is_wav(path: &Path) -> bool {
    extension(path) == "wav"
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let data: DatasetSpec = a.data.parse()?;
    let signal = a.signal.or(data.signal()).unwrap_or(SignalKind::Image);
    let mut config = TrainConfig::new(signal);
    config.levels = a.levels;
    config.seed = a.seed;
    if let Some(v) = a.latent_dim {
        config.latent_dim = v;
    }
    if let Some(v) = a.epochs {
        config.epochs = v;
    }
    config.stage_two_epochs = if a.stage2 {
        a.stage2_epochs.unwrap_or(config.stage_two_epochs)
    } else {
        0
    };
    if let Some(v) = a.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = a.holdout {
        config.holdout = v;
    }
    let dataset = data.load(signal)?;
    println!(
        "training on {} {signal:?} items, latent {}",
        dataset.len(),
        config.latent_dim
    );
    let trained = train(&config, dataset)?;
    std::fs::write(&a.out, save_weights(&trained.bundle))
        .with_context(|| format!("writing {}", a.out.display()))?;
    let log_path = a.log.unwrap_or_else(|| a.out.with_extension("csv"));
    std::fs::write(&log_path, trained.log.to_csv()?)
        .with_context(|| format!("writing {}", log_path.display()))?;
    if let Some(last) = trained.log.rows.last() {
        println!("held-out recon {:.6}", last.heldout_recon);
    }
    println!(
        "model {} (id {:016x})",
        a.out.display(),
        trained.bundle.model_id()
    );
    println!("log {}", log_path.display());
    Ok(())
}

fn cmd_compress(a: CompressArgs) -> Result<()> {
    let bundle = load_model(&a.model)?;
    let Some(codebook) = bundle.codebook() else {
        bail!("model {} has no codebook", a.model.display());
    };
    if let Some(d) = a.latent_dim.filter(|&d| d != bundle.latent_dim()) {
        bail!(
            "--latent-dim {d} but the model latent size is {}",
            bundle.latent_dim()
        );
    }
    if let Some(k) = a.levels.filter(|&k| k != codebook.k()) {
        bail!(
            "--levels {k} but the model codebook has {} levels",
            codebook.k()
        );
    }
    let spec = a.search.loss(&bundle)?;
    let config = a.search.config()?;
    let (blobs, reports, extent) = if is_wav(&a.input) {
        if bundle.signal() != SignalKind::Speech {
            bail!(
                "{} is audio but the model is an image model",
                a.input.display()
            );
        }
        let w = load_wav(&a.input)?;
        let out = compress_speech(&w, &bundle, &spec, &config)?;
        let extent = Extent::Samples((out.len() * latentcodec::pipelines::SEGMENT_SAMPLES) as u64);
        let (blobs, reports) = out
            .into_iter()
            .map(|c| (c.blob, c.report))
            .unzip::<_, _, Vec<_>, Vec<_>>();
        (blobs, reports, extent)
    } else {
        if bundle.signal() != SignalKind::Image {
            bail!(
                "{} is an image but the model is a speech model",
                a.input.display()
            );
        }
        let img = load_image(&a.input)?;
        let extent = Extent::Pixels(img.pixel_count() as u64);
        let (blob, report, _) = compress(img.pixels(), &bundle, &spec, &config)?;
        (vec![blob], vec![report], extent)
    };
    std::fs::write(&a.out, write_blobs(&blobs))
        .with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(path) = &a.report {
        let log: String = reports.iter().map(|r| r.to_log()).collect();
        std::fs::write(path, log).with_context(|| format!("writing {}", path.display()))?;
    }
    let r = measure_rate(&blobs, extent);
    let final_loss = reports.iter().map(|r| r.final_loss).sum::<f64>() / reports.len() as f64;
    let unit = r.unit();
    println!("rate {} {unit}", r.rate());
    println!("payload_rate {} {unit}", r.payload_rate());
    println!("pre_huffman_rate {} {unit}", r.pre_huffman_rate());
    println!("header_bits {}", r.header_bits);
    println!("payload_bits {}", r.payload_bits);
    println!("total_bits {}", r.total_bits);
    println!("final_loss {final_loss:.6e}");
    Ok(())
}

fn cmd_decompress(a: DecompressArgs) -> Result<()> {
    let bundle = load_model(&a.model)?;
    let bytes =
        std::fs::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let blobs = if bundle.signal() == SignalKind::Image {
        vec![CompressedBlob::from_bytes(&bytes)?]
    } else {
        read_blobs(&bytes)?
    };
    match bundle.signal() {
        SignalKind::Image => {
            let x = decompress(&blobs[0], &bundle)?;
            std::fs::write(&a.out, encode_pnm(&tensor_to_pixels(&x)?))?;
        }
        SignalKind::Speech => save_wav(&a.out, &decompress_speech(&blobs, &bundle)?)?,
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn pnm_tensor(p: &Pnm) -> Result<Tensor> {
    let (c, h, w) = (p.channels, p.height, p.width);
    let mut data = vec![0.0; c * h * w];
    for (i, &v) in p.data.iter().enumerate() {
        data[(i % c) * h * w + i / c] = pixel_to_unit(v);
    }
    Ok(Tensor::new(vec![c, h, w], data)?)
}

struct Metrics {
    psnr: Option<f64>,
    ms_ssim: Option<f64>,
    spectrogram_rel_l2: Option<f64>,
    mse: f64,
}

fn eval_pair(original: &Path, recon: &Path) -> Result<Metrics> {
    if is_wav(original) {
        let (a, b) = (load_wav(original)?, load_wav(recon)?);
        if a.samples().len() != b.samples().len() {
            bail!(
                "length mismatch: {} vs {} samples",
                a.samples().len(),
                b.samples().len()
            );
        }
        let mel = |s: &[f64]| -> Result<Vec<f64>> {
            let spec = stft(s)?;
            Ok(mel_forward(&spec.magnitudes(), spec.frames())?)
        };
        let (ma, mb) = (mel(a.samples())?, mel(b.samples())?);
        let num: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = ma.iter().map(|x| x * x).sum();
        let n = a.samples().len().max(1) as f64;
        let mse = a
            .samples()
            .iter()
            .zip(b.samples())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            / n;
        let rel = if den > 0.0 {
            (num / den).sqrt()
        } else if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        return Ok(Metrics {
            psnr: None,
            ms_ssim: None,
            spectrogram_rel_l2: Some(rel),
            mse,
        });
    }
    let read = |p: &Path| -> Result<Pnm> {
        Ok(decode_pnm(
            &std::fs::read(p).with_context(|| format!("reading {}", p.display()))?,
        )?)
    };
    let (a, b) = (read(original)?, read(recon)?);
    if (a.channels, a.width, a.height) != (b.channels, b.width, b.height) {
        bail!(
            "shape mismatch: {}x{}x{} vs {}x{}x{}",
            a.channels,
            a.height,
            a.width,
            b.channels,
            b.height,
            b.width
        );
    }
    let (ta, tb) = (pnm_tensor(&a)?, pnm_tensor(&b)?);
    let scales = max_scales(a.height, a.width);
    Ok(Metrics {
        psnr: Some(psnr(&a.data, &b.data)?),
        ms_ssim: if scales > 0 {
            Some(ms_ssim_value(&ta, &tb, scales)?)
        } else {
            None
        },
        spectrogram_rel_l2: None,
        mse: mse_value(&ta, &tb)?,
    })
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let pairs: Vec<(PathBuf, PathBuf)> = if a.original.is_dir() {
        let mut names: Vec<PathBuf> = std::fs::read_dir(&a.original)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        names.retain(|p| matches!(extension(p).as_str(), "pgm" | "ppm" | "pnm" | "wav"));
        names.sort();
        names
            .into_iter()
            .map(|p| {
                let other = a.reconstructed.join(p.file_name().unwrap());
                (p, other)
            })
            .collect()
    } else {
        vec![(a.original.clone(), a.reconstructed.clone())]
    };
    if pairs.is_empty() {
        bail!("no signal files in {}", a.original.display());
    }
    let fmt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    let mut csv = csv::Writer::from_writer(Vec::new());
    csv.write_record([
        "original",
        "reconstructed",
        "psnr",
        "ms_ssim",
        "spectrogram_rel_l2",
        "mse",
    ])?;
    for (o, r) in &pairs {
        let m = eval_pair(o, r).with_context(|| format!("{} vs {}", o.display(), r.display()))?;
        match (m.psnr, m.ms_ssim) {
            (Some(p), s) => println!(
                "{}: psnr {p:.4} ms_ssim {} mse {:.6e}",
                o.display(),
                fmt(s),
                m.mse
            ),
            _ => println!(
                "{}: spectrogram_rel_l2 {:.6} mse {:.6e}",
                o.display(),
                m.spectrogram_rel_l2.unwrap_or(f64::NAN),
                m.mse
            ),
        }
        csv.write_record([
            o.display().to_string(),
            r.display().to_string(),
            fmt(m.psnr),
            fmt(m.ms_ssim),
            fmt(m.spectrogram_rel_l2),
            m.mse.to_string(),
        ])?;
    }
    if let Some(out) = &a.out {
        std::fs::write(out, csv.into_inner()?)
            .with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let mut models = a
        .model
        .iter()
        .map(|p| load_model(p))
        .collect::<Result<Vec<_>>>()?;
    if !a.latent_dim.is_empty() {
        let mut picked = Vec::with_capacity(a.latent_dim.len());
        for &d in &a.latent_dim {
            let Some(i) = models.iter().position(|m| m.latent_dim() == d) else {
                bail!("no model with latent size {d} among --model");
            };
            picked.push(models[i].clone());
        }
        models = picked;
    }
    let signal = models[0].signal();
    if models.iter().any(|m| m.signal() != signal) {
        bail!("sweep models must share a signal kind");
    }
    let data = a.data.parse::<DatasetSpec>()?.load(signal)?;
    let holdout = a.holdout.min(data.len().saturating_sub(1)).max(1);
    let (fit, eval) = data.split(holdout)?;
    let config = a.search.config()?;
    if a.search.alpha.is_some() {
        bail!("--alpha is not supported by sweep; it uses each model's default loss");
    }
    let rows = sweep(
        &models,
        &a.levels,
        &fit,
        eval.items(),
        a.codebook_samples,
        &config,
        a.seed,
    )?;
    let text = sweep_csv(&rows)?;
    std::fs::write(&a.out, &text).with_context(|| format!("writing {}", a.out.display()))?;
    print!("{text}");
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse_from(expand_config(std::env::args_os().collect())?);
    match cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Compress(a) => cmd_compress(a),
        Cmd::Decompress(a) => cmd_decompress(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Sweep(a) => cmd_sweep(a),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
