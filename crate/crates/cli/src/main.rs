use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use lance_core::decoder::{self, read_ppm, write_pgm, write_ppm, Architecture, Image};
use lance_core::encoder::{self, EncodeConfig, EncodeError, OperatingPoint};
use lance_core::eval::{self, RdCurve, RdPoint};
use lance_core::pyramid::ResampleMode;

#[derive(Parser, Debug)]
#[command(name = "lance", version, about = "Overfitted image codec with a spatial hyperprior")]
struct Cli {
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,

    /// Worker threads for parallel decoding and sweeps.
    #[arg(long, global = true, env = "LANCE_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Overfit a model to an image and write a bitstream.
    Encode(EncodeArgs),
    /// Decode a bitstream to a PPM image.
    Decode(DecodeArgs),
    /// PSNR and rate of a decoded image against its original.
    Eval(EvalArgs),
    /// BD-rate between two rate-PSNR curves.
    Bdrate(BdrateArgs),
    /// Decoder MACs per pixel for a configuration.
    Complexity(ComplexityArgs),
    /// Per-section byte composition of a bitstream.
    Breakdown(InputArgs),
    /// Write the decoded spatial hyperprior as a grayscale PGM.
    DumpHyperprior(DumpArgs),
    /// Encode images over several λ values and seeds and average.
    Sweep(SweepArgs),
}

#[derive(Args, Debug, Clone, Default)]
struct ModelArgs {
    /// TOML file with encoder settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Operation point: hop, mop or lop.
    #[arg(long = "op")]
    operating_point: Option<OperatingPoint>,
    /// Context window size N (3, 5, 8 or 16).
    #[arg(long)]
    context_size: Option<usize>,
    /// Synthesis channels C.
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    /// Hyperprior downsampling exponent d.
    #[arg(long)]
    downsampling: Option<usize>,
    /// Total training iterations (10% straight-through).
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_hyperprior: bool,
    #[arg(long)]
    no_layer_index: bool,
    /// Hyperprior resampler: bicubic or area.
    #[arg(long, value_parser = parse_resample)]
    resample: Option<ResampleMode>,
    #[arg(long)]
    no_med: bool,
    #[arg(long)]
    no_cphi: bool,
    /// Omit per-section CRC32 checksums.
    #[arg(long)]
    no_checksum: bool,
}

fn parse_resample(s: &str) -> Result<ResampleMode, String> {
    match s.to_ascii_lowercase().as_str() {
        "bicubic" => Ok(ResampleMode::Bicubic),
        "area" => Ok(ResampleMode::Area),
        _ => Err(format!("unknown resampler '{}'", s)),
    }
}

/// Config file contents: every encoder field plus a total iteration count.
#[derive(Debug, Deserialize, Default)]
struct FileConfig {
    iterations: Option<usize>,
    #[serde(flatten)]
    encode: EncodeConfig,
}

impl ModelArgs {
    fn resolve(&self) -> Result<EncodeConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let file: FileConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
                match file.iterations {
                    Some(n) => file.encode.with_iterations(n),
                    None => file.encode,
                }
            }
            None => EncodeConfig::default(),
        };
        if let Some(v) = self.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = self.operating_point {
            cfg.operating_point = v;
        }
        if self.context_size.is_some() {
            cfg.context_size = self.context_size;
        }
        if self.channels.is_some() {
            cfg.synth_channels = self.channels;
        }
        if let Some(v) = self.layers {
            cfg.layers = v;
        }
        if let Some(v) = self.downsampling {
            cfg.downsampling = v;
        }
        if let Some(n) = self.iterations {
            cfg = cfg.with_iterations(n);
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.resample {
            cfg.ablation.resample_mode = v;
        }
        cfg.ablation.use_hyperprior &= !self.no_hyperprior;
        cfg.ablation.use_layer_index &= !self.no_layer_index;
        cfg.ablation.med &= !self.no_med;
        cfg.ablation.cphi &= !self.no_cphi;
        cfg.checksum &= !self.no_checksum;
        cfg.validate().map_err(|e| anyhow!(e))?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct EncodeArgs {
    /// Input image (PPM, or PNG with the `png` feature).
    #[arg(short, long)]
    input: PathBuf,
    /// Output bitstream.
    #[arg(short, long)]
    output: PathBuf,
    /// Also write the reconstruction as PPM.
    #[arg(long)]
    recon: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[arg(short, long)]
    input: PathBuf,
    /// Output PPM image.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    original: PathBuf,
    /// Bitstream to decode and evaluate.
    #[arg(long, conflicts_with = "decoded")]
    bitstream: Option<PathBuf>,
    /// Already decoded image; rate is reported only with --rate-from.
    #[arg(long)]
    decoded: Option<PathBuf>,
    /// Bitstream whose size gives the rate for --decoded.
    #[arg(long, requires = "decoded")]
    rate_from: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BdrateArgs {
    /// Reference curve: CSV of `bpp,psnr` lines.
    #[arg(long)]
    reference: PathBuf,
    /// Test curve in the same format.
    #[arg(long)]
    test: PathBuf,
}

#[derive(Args, Debug)]
struct ComplexityArgs {
    #[arg(long, default_value_t = 768)]
    width: usize,
    #[arg(long, default_value_t = 512)]
    height: usize,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug)]
struct InputArgs {
    #[arg(short, long)]
    input: PathBuf,
}

#[derive(Args, Debug)]
struct DumpArgs {
    #[arg(short, long)]
    input: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Input images.
    #[arg(required = true)]
    images: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = encoder::LAMBDAS)]
    lambdas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64])]
    seeds: Vec<u64>,
    #[command(flatten)]
    model: ModelArgs,
}

/// Failure class, mapped to the process exit code.
#[derive(Debug)]
enum Failure {
    Usage(anyhow::Error),
    Decode(anyhow::Error),
    Encode(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Decode(_) => 2,
            Failure::Encode(_) => 3,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Decode(e) | Failure::Encode(e) => e,
        }
    }
}

fn usage(e: anyhow::Error) -> Failure {
    Failure::Usage(e)
}

fn read_image(path: &Path) -> Result<Image> {
    let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if is_png {
        return read_png(path);
    }
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_ppm(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

#[cfg(feature = "png")]
fn read_png(path: &Path) -> Result<Image> {
    let img = image::open(path).with_context(|| format!("reading {}", path.display()))?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Image::new(w as usize, h as usize, img.into_raw())?)
}

#[cfg(not(feature = "png"))]
fn read_png(path: &Path) -> Result<Image> {
    bail!("{}: PNG input requires the `png` feature", path.display())
}

fn write_image(path: &Path, img: &Image) -> Result<()> {
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_ppm(BufWriter::new(f), img)?;
    Ok(())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn read_curve(path: &Path) -> Result<RdCurve> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut points = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split(',').map(str::trim);
        let (Some(r), Some(p), None) = (cols.next(), cols.next(), cols.next()) else {
            bail!("{}:{}: expected `bpp,psnr`", path.display(), n + 1);
        };
        let parse = |s: &str| s.parse::<f64>().with_context(|| format!("{}:{}: bad number '{}'", path.display(), n + 1, s));
        match (parse(r), parse(p)) {
            (Ok(rate), Ok(psnr)) => points.push(RdPoint { rate, psnr }),
            // A header row such as `bpp,psnr`.
            _ if n == 0 => continue,
            (Err(e), _) | (_, Err(e)) => return Err(e),
        }
    }
    Ok(RdCurve::new(points)?)
}

fn print<T: Serialize>(json: bool, value: &T, text: impl FnOnce() -> String) -> Result<()> {
    if json {
        println!("{}", serde_json::to_string_pretty(value)?);
    } else {
        println!("{}", text());
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    psnr: f64,
    bpp: Option<f64>,
    bytes: Option<usize>,
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{:.4}", v)
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let json = cli.json;
    match cli.command {
        Command::Encode(args) => {
            let config = args.model.resolve().map_err(usage)?;
            let img = read_image(&args.input).map_err(usage)?;
            info!("encoding {} ({}x{}) with λ={}", args.input.display(), img.width, img.height, config.lambda);
            let enc = encoder::encode(&img, &config).map_err(|e| match e {
                EncodeError::Config(_) => Failure::Usage(e.into()),
                _ => Failure::Encode(e.into()),
            })?;
            fs::write(&args.output, &enc.bytes).with_context(|| format!("writing {}", args.output.display())).map_err(usage)?;
            if let Some(path) = &args.recon {
                write_image(path, &enc.reconstruction).map_err(usage)?;
            }
            let r = &enc.report;
            print(json, r, || {
                let mut s = format!("{} bytes, {:.4} bpp, PSNR {} dB\n", r.total_bytes, r.bpp, fmt_db(r.psnr));
                for sec in &r.sections {
                    s += &format!("  {:<16} {:>8} B", sec.name, sec.bytes);
                    if let Some(ce) = sec.cross_entropy_bits {
                        s += &format!("  (table CE {:.1} bits)", ce);
                    }
                    s.push('\n');
                }
                s.trim_end().to_string()
            })
            .map_err(usage)
        }
        Command::Decode(args) => {
            let bytes = read_bytes(&args.input).map_err(usage)?;
            let img = decoder::decode(&bytes).map_err(|e| Failure::Decode(e.into()))?;
            write_image(&args.output, &img).map_err(usage)?;
            #[derive(Serialize)]
            struct Out {
                width: usize,
                height: usize,
            }
            print(json, &Out { width: img.width, height: img.height }, || format!("decoded {}x{}", img.width, img.height)).map_err(usage)
        }
        Command::Eval(args) => {
            let original = read_image(&args.original).map_err(usage)?;
            let (decoded, size) = match (&args.bitstream, &args.decoded) {
                (Some(b), _) => {
                    let bytes = read_bytes(b).map_err(usage)?;
                    (decoder::decode(&bytes).map_err(|e| Failure::Decode(e.into()))?, Some(bytes.len()))
                }
                (None, Some(d)) => {
                    let size = match &args.rate_from {
                        Some(p) => Some(fs::metadata(p).with_context(|| format!("reading {}", p.display())).map_err(usage)?.len() as usize),
                        None => None,
                    };
                    (read_image(d).map_err(usage)?, size)
                }
                (None, None) => return Err(usage(anyhow!("either --bitstream or --decoded is required"))),
            };
            let psnr = eval::psnr(&original, &decoded).map_err(|e| usage(e.into()))?;
            let pixels = (original.width * original.height) as f64;
            let report = EvalReport { psnr, bpp: size.map(|b| b as f64 * 8.0 / pixels), bytes: size };
            print(json, &report, || match report.bpp {
                Some(bpp) => format!("PSNR {} dB, {:.4} bpp", fmt_db(psnr), bpp),
                None => format!("PSNR {} dB", fmt_db(psnr)),
            })
            .map_err(usage)
        }
        Command::Bdrate(args) => {
            let reference = read_curve(&args.reference).map_err(usage)?;
            let test = read_curve(&args.test).map_err(usage)?;
            let bd = eval::bd_rate(&reference, &test).map_err(|e| usage(e.into()))?;
            #[derive(Serialize)]
            struct Out {
                bd_rate_percent: f64,
            }
            print(json, &Out { bd_rate_percent: bd }, || format!("BD-rate {:+.4}%", bd)).map_err(usage)
        }
        Command::Complexity(args) => {
            let cfg = args.model.resolve().map_err(usage)?;
            let arch: Architecture = cfg.architecture(args.height, args.width).map_err(|e| usage(e.into()))?;
            let r = eval::mac_per_pixel(&arch);
            print(json, &r, || {
                format!(
                    "context C_xi   {:>10.2}\nupsampler      {:>10.2}\nsynthesis      {:>10.2}\ncontext C_phi  {:>10.2}\nresampler      {:>10.2}\ntotal          {:>10.2}",
                    r.context_xi, r.upsampler, r.synthesis, r.context_phi, r.resampler, r.total
                )
            })
            .map_err(usage)
        }
        Command::Breakdown(args) => {
            let bytes = read_bytes(&args.input).map_err(usage)?;
            let b = eval::report_breakdown(&bytes).map_err(|e| Failure::Decode(e.into()))?;
            print(json, &b, || {
                let mut s = format!("total {} bytes\n", b.total_bytes);
                for e in &b.shares {
                    s += &format!("  {:<12} {:>8} B {:>7.2}%\n", e.component, e.bytes, e.percent);
                }
                s.trim_end().to_string()
            })
            .map_err(usage)
        }
        Command::DumpHyperprior(args) => {
            let bytes = read_bytes(&args.input).map_err(usage)?;
            let map = eval::dump_hyperprior(&bytes).map_err(|e| Failure::Decode(e.into()))?;
            let f = fs::File::create(&args.output).with_context(|| format!("creating {}", args.output.display())).map_err(usage)?;
            write_pgm(BufWriter::new(f), map.width, map.height, &map.data).map_err(|e| usage(e.into()))?;
            #[derive(Serialize)]
            struct Out {
                width: usize,
                height: usize,
            }
            print(json, &Out { width: map.width, height: map.height }, || format!("wrote {}x{} map", map.width, map.height)).map_err(usage)
        }
        Command::Sweep(args) => {
            let base = args.model.resolve().map_err(usage)?;
            let images = args
                .images
                .iter()
                .map(|p| Ok((p.display().to_string(), read_image(p)?)))
                .collect::<Result<Vec<_>>>()
                .map_err(usage)?;
            let report = eval::sweep(&images, &args.lambdas, &args.seeds, &base).map_err(|e| Failure::Encode(e.into()))?;
            print(json, &report, || {
                let mut s = String::from("image                 lambda     seeds      bpp     PSNR\n");
                for a in &report.averages {
                    s += &format!("{:<20} {:>8} {:>7} {:>8.4} {:>8}\n", a.image, a.lambda, a.seeds, a.bpp, fmt_db(a.psnr));
                }
                s.trim_end().to_string()
            })
            .map_err(usage)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {}", e);
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}
