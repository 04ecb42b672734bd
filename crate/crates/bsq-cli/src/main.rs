//! `bsq` — train the toy tokenizer, turn images into token files, entropy-code
//! the tokens, and inspect the results.
//!
//! Every command is deterministic given its flags: stochastic commands take a
//! mandatory `--seed`, and all file writes go through a temp-file-then-rename
//! so a crash never leaves a half-written artifact.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use bsq::autoencoder::{
    make_synthetic_dataset, train, DatasetKind, QuantizerKind, ToyModel, TrainConfig, PATCH,
};
use bsq::container::{
    compress, decompress, stats, CompressedFile, ModelChoice, StatsReport, TokenFile,
    TokenGeometry,
};
use bsq::netpbm::{parse_gray, GrayImage};

#[derive(Parser)]
#[command(
    name = "bsq",
    about = "Binary spherical quantization toolkit: tokenize, compress, inspect",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy patch autoencoder on a synthetic dataset
    Train(TrainArgs),
    /// Encode an image (or synthetic patches) into a token file
    Tokenize(TokenizeArgs),
    /// Reconstruct a PGM image from a token file
    Detokenize(DetokenizeArgs),
    /// Entropy-code a token file into a compressed container
    Compress(CompressArgs),
    /// Recover the token file from a compressed container
    Decompress(DecompressArgs),
    /// Report sizes, bits per pixel, and savings for token files
    Stats(StatsArgs),
    /// Print distortion bounds for a code width
    Bounds(BoundsArgs),
    /// Measure the factorized-entropy approximation gap on random latents
    EntropyAudit(EntropyAuditArgs),
    /// Run the built-in self-check battery
    Verify,
}

#[derive(Clone, Copy, ValueEnum)]
enum CliQuantizer {
    Bsq,
    Lfq,
    Vq,
    None,
}

impl From<CliQuantizer> for QuantizerKind {
    fn from(q: CliQuantizer) -> Self {
        match q {
            CliQuantizer::Bsq => QuantizerKind::Bsq,
            CliQuantizer::Lfq => QuantizerKind::Lfq,
            CliQuantizer::Vq => QuantizerKind::Vq,
            CliQuantizer::None => QuantizerKind::None,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CliDataset {
    LowRank,
    Gabor,
    Checker,
}

impl From<CliDataset> for DatasetKind {
    fn from(d: CliDataset) -> Self {
        match d {
            CliDataset::LowRank => DatasetKind::LowRank,
            CliDataset::Gabor => DatasetKind::Gabor,
            CliDataset::Checker => DatasetKind::Checker,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CliModelKind {
    Uniform,
    AdaptiveBit,
    Context,
}

#[derive(Args)]
struct TrainArgs {
    /// Synthetic dataset family to train on
    #[arg(long, value_enum, default_value_t = CliDataset::LowRank)]
    dataset: CliDataset,
    /// Number of patches to generate
    #[arg(long, default_value_t = 256)]
    count: usize,
    /// Seed for dataset generation, initialization, and batch order
    #[arg(long)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = CliQuantizer::Bsq)]
    quantizer: CliQuantizer,
    #[arg(long, default_value_t = 16)]
    latent_dim: usize,
    /// Token width L in bits
    #[arg(long, alias = "L", default_value_t = 8)]
    bits: usize,
    /// Soft-assignment temperature
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    /// Weight of the dataset-entropy (code-spreading) term
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, default_value_t = 0.1)]
    weight_entropy: f64,
    #[arg(long, default_value_t = 0.0)]
    weight_commit: f64,
    #[arg(long, default_value_t = 0.3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    /// Checkpoint output path
    #[arg(long, default_value = "model.bsqm")]
    out: PathBuf,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("input").required(true))]
struct TokenizeArgs {
    /// Trained checkpoint to tokenize with
    #[arg(long)]
    model: PathBuf,
    /// Input image (binary PGM or PPM; dimensions divisible by the patch size)
    #[arg(long, group = "input")]
    image: Option<PathBuf>,
    /// Tokenize generated patches instead of an image
    #[arg(long, value_enum, group = "input")]
    synthetic: Option<CliDataset>,
    /// Number of synthetic patches
    #[arg(long, default_value_t = 64, requires = "synthetic")]
    count: usize,
    /// Seed for synthetic patch generation (mandatory with --synthetic)
    #[arg(long, requires = "synthetic")]
    seed: Option<u64>,
    #[arg(long, default_value = "tokens.bsqt")]
    out: PathBuf,
}

#[derive(Args)]
struct DetokenizeArgs {
    /// Checkpoint that produced the tokens
    #[arg(long)]
    model: PathBuf,
    /// Token file to reconstruct from
    #[arg(long)]
    tokens: PathBuf,
    /// Output PGM path (frames are stacked vertically)
    #[arg(long, default_value = "recon.pgm")]
    out: PathBuf,
}

#[derive(Args)]
struct CompressArgs {
    #[arg(long)]
    tokens: PathBuf,
    /// Probability model for the arithmetic coder
    #[arg(long, value_enum, default_value_t = CliModelKind::AdaptiveBit)]
    model_kind: CliModelKind,
    /// Context length in tokens (context model only)
    #[arg(long, default_value_t = 1)]
    order: usize,
    #[arg(long, default_value = "tokens.bsqc")]
    out: PathBuf,
}

#[derive(Args)]
struct DecompressArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "tokens.bsqt")]
    out: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    tokens: PathBuf,
    /// Optional compressed container to compare against
    #[arg(long)]
    compressed: Option<PathBuf>,
}

#[derive(Args)]
struct BoundsArgs {
    /// Token width L in bits
    #[arg(long, alias = "L", default_value_t = 8)]
    bits: usize,
    /// Monte Carlo sample count (0 skips the estimate)
    #[arg(long, default_value_t = 0)]
    mc_samples: usize,
    /// Seed for the Monte Carlo draw (mandatory when --mc-samples > 0)
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EntropyAuditArgs {
    /// Token width L in bits
    #[arg(long, alias = "L", default_value_t = 8)]
    bits: usize,
    /// Soft-assignment temperature
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    /// Number of random unit latents to audit
    #[arg(long, default_value_t = 64)]
    batch: usize,
    /// Seed for the random latents
    #[arg(long)]
    seed: u64,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Tokenize(args) => cmd_tokenize(args),
        Command::Detokenize(args) => cmd_detokenize(args),
        Command::Compress(args) => cmd_compress(args),
        Command::Decompress(args) => cmd_decompress(args),
        Command::Stats(args) => cmd_stats(args),
        Command::Bounds(args) => cmd_bounds(args),
        Command::EntropyAudit(args) => cmd_entropy_audit(args),
        Command::Verify => cmd_verify(),
    }
}

/// Writes through a sibling temp file so the destination is never partial.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .with_context(|| format!("creating temp file next to {}", path.display()))?;
    tmp.write_all(bytes).context("writing temp file")?;
    tmp.persist(path)
        .with_context(|| format!("renaming into place at {}", path.display()))?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn load_model(path: &Path) -> Result<ToyModel> {
    let bytes = read_file(path)?;
    ToyModel::from_bytes(&bytes)
        .with_context(|| format!("parsing checkpoint {}", path.display()))
}

fn load_tokens(path: &Path) -> Result<TokenFile> {
    let bytes = read_file(path)?;
    TokenFile::from_bytes(&bytes)
        .with_context(|| format!("parsing token file {}", path.display()))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let config = TrainConfig {
        quantizer: args.quantizer.into(),
        latent_dim: args.latent_dim,
        bits: args.bits,
        tau: args.tau,
        gamma: args.gamma,
        weight_entropy: args.weight_entropy,
        weight_commit: args.weight_commit,
        learning_rate: args.learning_rate,
        batch_size: args.batch_size,
        steps: args.steps,
        seed: args.seed,
    };
    let dataset = make_synthetic_dataset(args.dataset.into(), args.count, args.seed);
    let (model, report) = train(&config, &dataset)?;
    write_atomic(&args.out, &model.to_bytes())?;
    println!("quantizer={}", config.quantizer);
    println!("dataset={}", DatasetKind::from(args.dataset));
    println!("patches={}", dataset.len());
    println!("steps={}", config.steps);
    println!("loss_first={}", report.loss_curve.first().map(|t| t.total).unwrap_or(f64::NAN));
    println!("loss_last={}", report.loss_curve.last().map(|t| t.total).unwrap_or(f64::NAN));
    println!("final_mse={}", report.final_mse);
    if let Some(usage) = report.code_usage {
        println!("code_usage={usage}");
    }
    println!("checkpoint={}", args.out.display());
    Ok(())
}

fn cmd_tokenize(args: TokenizeArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let (patches, geometry) = if let Some(image_path) = &args.image {
        let image = parse_gray(&read_file(image_path)?)
            .with_context(|| format!("parsing image {}", image_path.display()))?;
        let patches = image
            .to_patches(PATCH)
            .with_context(|| format!("splitting {} into patches", image_path.display()))?;
        let geometry = TokenGeometry {
            bits: model.bits,
            patch: PATCH,
            frames: 1,
            grid_h: (image.height / PATCH) as u32,
            grid_w: (image.width / PATCH) as u32,
        };
        (patches, geometry)
    } else {
        let kind = args.synthetic.expect("clap enforces the input group");
        let seed = args.seed.context("--seed is required with --synthetic")?;
        let patches = make_synthetic_dataset(kind.into(), args.count, seed);
        let geometry = TokenGeometry {
            bits: model.bits,
            patch: PATCH,
            frames: args.count as u32,
            grid_h: 1,
            grid_w: 1,
        };
        (patches, geometry)
    };
    let codes: Vec<u64> = patches
        .iter()
        .map(|p| model.tokenize_patch(p).map(|t| t.code))
        .collect::<Result<_, _>>()?;
    let file = TokenFile::new(geometry, codes)?;
    write_atomic(&args.out, &file.to_bytes())?;
    println!("tokens={}", file.codes.len());
    println!("bits_per_token={}", file.geometry.bits);
    println!("out={}", args.out.display());
    Ok(())
}

fn cmd_detokenize(args: DetokenizeArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let file = load_tokens(&args.tokens)?;
    let g = &file.geometry;
    if g.bits != model.bits {
        bail!(
            "token file carries {} bits per token but the checkpoint quantizes to {}",
            g.bits,
            model.bits
        );
    }
    if g.patch != PATCH {
        bail!("token file uses patch size {}, this build supports {PATCH}", g.patch);
    }
    let patches: Vec<Vec<f64>> = file
        .codes
        .iter()
        .map(|&code| {
            let token = bsq::quantizer::TokenCode::new(code, g.bits)?;
            Ok(model.decode_patch(token)?)
        })
        .collect::<Result<_>>()?;
    // Frames stack vertically: frame-major token order is exactly row-major
    // patch order in the stacked image.
    let rows = (g.frames * g.grid_h) as usize;
    let cols = g.grid_w as usize;
    let image = GrayImage::from_patches(&patches, rows, cols, PATCH);
    write_atomic(&args.out, &image.to_pgm_bytes())?;
    println!("width={}", image.width);
    println!("height={}", image.height);
    println!("out={}", args.out.display());
    Ok(())
}

fn model_choice(kind: CliModelKind, order: usize) -> ModelChoice {
    match kind {
        CliModelKind::Uniform => ModelChoice::Uniform,
        CliModelKind::AdaptiveBit => ModelChoice::AdaptiveBit,
        CliModelKind::Context => ModelChoice::Context { order },
    }
}

fn cmd_compress(args: CompressArgs) -> Result<()> {
    let tokens = load_tokens(&args.tokens)?;
    let choice = model_choice(args.model_kind, args.order);
    let file = compress(&tokens, choice)?;
    write_atomic(&args.out, &file.to_bytes())?;
    let report = stats(&tokens, Some(&file))?;
    print_stats_keys(&tokens, &report);
    println!("out={}", args.out.display());
    Ok(())
}

fn cmd_decompress(args: DecompressArgs) -> Result<()> {
    let bytes = read_file(&args.input)?;
    let file = CompressedFile::from_bytes(&bytes)
        .with_context(|| format!("parsing compressed file {}", args.input.display()))?;
    let tokens = decompress(&file)?;
    write_atomic(&args.out, &tokens.to_bytes())?;
    println!("tokens={}", tokens.codes.len());
    println!("out={}", args.out.display());
    Ok(())
}

fn print_stats_keys(tokens: &TokenFile, report: &StatsReport) {
    let g = &tokens.geometry;
    println!("tokens={}", g.token_count());
    println!("bits_per_token={}", g.bits);
    println!("patch={}", g.patch);
    println!("frames={}", g.frames);
    println!("grid_h={}", g.grid_h);
    println!("grid_w={}", g.grid_w);
    println!("raw_bits={}", report.raw_bits);
    println!("pixel_count={}", report.pixel_count);
    println!("raw_bpp={}", report.raw_bpp);
    if let Some(coded) = &report.coded {
        println!("coded_bits={}", coded.coded_bits);
        println!("coded_bpp={}", coded.coded_bpp);
        println!("savings={}", coded.savings);
    }
}

fn cmd_stats(args: StatsArgs) -> Result<()> {
    let tokens = load_tokens(&args.tokens)?;
    let compressed = match &args.compressed {
        Some(path) => {
            let bytes = read_file(path)?;
            Some(
                CompressedFile::from_bytes(&bytes)
                    .with_context(|| format!("parsing compressed file {}", path.display()))?,
            )
        }
        None => None,
    };
    let report = stats(&tokens, compressed.as_ref())?;
    print_stats_keys(&tokens, &report);

    let mut table = String::new();
    let g = &tokens.geometry;
    let _ = writeln!(table, "\n  {:<16} {}", "tokens", g.token_count());
    let _ = writeln!(
        table,
        "  {:<16} {} frame(s) of {}x{} tokens, {}x{} px patches",
        "geometry", g.frames, g.grid_h, g.grid_w, g.patch, g.patch
    );
    let _ = writeln!(table, "  {:<16} {} ({} per token)", "raw bits", report.raw_bits, g.bits);
    let _ = writeln!(table, "  {:<16} {:.5} over {} px", "raw bpp", report.raw_bpp, report.pixel_count);
    if let Some(coded) = &report.coded {
        let _ = writeln!(table, "  {:<16} {}", "coded bits", coded.coded_bits);
        let _ = writeln!(table, "  {:<16} {:.5}", "coded bpp", coded.coded_bpp);
        let _ = writeln!(table, "  {:<16} {:.2}%", "savings", coded.savings * 100.0);
    }
    print!("{table}");
    Ok(())
}

fn cmd_bounds(args: BoundsArgs) -> Result<()> {
    if args.bits < 1 {
        bail!("--bits must be at least 1");
    }
    println!("bits={}", args.bits);
    println!("bound_loose={}", bsq::bounds::bound_loose(args.bits));
    match bsq::bounds::bound_tight(args.bits) {
        Ok(tight) => println!("bound_tight={tight}"),
        Err(_) => println!("bound_tight=n/a"),
    }
    if args.mc_samples > 0 {
        let seed = args.seed.context("--seed is required when --mc-samples > 0")?;
        let report = bsq::bounds::mc_quant_error(args.bits, args.mc_samples, seed);
        println!("mc_mean={}", report.mean);
        println!("mc_stderr={}", report.stderr);
        println!("mc_samples={}", report.n_samples);
    }
    Ok(())
}

fn random_unit_latents(bits: usize, batch: usize, seed: u64) -> Vec<bsq::quantizer::SphereVec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..batch)
        .map(|_| loop {
            let v: Vec<f64> = (0..bits).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            if let Ok(u) = bsq::quantizer::project_to_sphere(&v) {
                break u;
            }
        })
        .collect()
}

fn cmd_entropy_audit(args: EntropyAuditArgs) -> Result<()> {
    if args.batch < 1 {
        bail!("--batch must be at least 1");
    }
    let latents = random_unit_latents(args.bits, args.batch, args.seed);
    let assignments: Vec<_> =
        latents.iter().map(|u| bsq::entropy::soft_assign(u, args.tau)).collect();
    let mean_per_sample: f64 = assignments.iter().map(bsq::entropy::per_sample_entropy).sum::<f64>()
        / args.batch as f64;
    let approx = bsq::entropy::dataset_entropy_approx(&assignments)?;
    let gap = bsq::entropy::approximation_gap(&latents, args.tau)?;
    println!("bits={}", args.bits);
    println!("tau={}", args.tau);
    println!("batch={}", args.batch);
    println!("mean_per_sample_entropy={mean_per_sample}");
    println!("dataset_entropy_factorized={approx}");
    println!("gap={gap}");
    Ok(())
}

fn cmd_verify() -> Result<()> {
    let checks: Vec<(&str, fn() -> Result<(), String>)> = vec![
        ("quantizer-corner-round-trip", verify_quantizer),
        ("soft-assignment-factorization", verify_factorization),
        ("entropy-matches-brute-force", verify_entropy),
        ("distortion-bounds", verify_bounds),
        ("ste-orthogonality", verify_ste),
        ("dense-layer-gradients", verify_dense_grads),
        ("arithmetic-coder-round-trip", verify_coder),
        ("container-round-trip", verify_container),
        ("causal-mask", verify_mask),
        ("netpbm-round-trip", verify_netpbm),
        ("checkpoint-round-trip", verify_checkpoint),
        ("training-smoke", verify_training),
    ];
    let mut failed = 0;
    for (name, check) in &checks {
        match check() {
            Ok(()) => println!("ok {name}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL {name}: {msg}");
            }
        }
    }
    println!("verify: {} checks, {failed} failed", checks.len());
    if failed > 0 {
        bail!("{failed} self-checks failed");
    }
    Ok(())
}

fn verify_quantizer() -> Result<(), String> {
    use bsq::quantizer::{corner_coord, decode_token, encode_token};
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for _ in 0..50 {
        let bits = rng.gen_range(1..=16);
        let v: Vec<f64> = (0..bits).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let token = encode_token(&v).map_err(|e| e.to_string())?;
        let corner = decode_token(token).map_err(|e| e.to_string())?;
        let s = corner_coord(bits);
        for (&vd, &cd) in v.iter().zip(corner.values()) {
            let expect = if vd >= 0.0 { s } else { -s };
            if cd != expect {
                return Err(format!("corner coordinate {cd} for latent {vd}"));
            }
        }
        let again = encode_token(corner.values()).map_err(|e| e.to_string())?;
        if again != token {
            return Err("re-encoding a corner moved the token".into());
        }
    }
    Ok(())
}

fn verify_factorization() -> Result<(), String> {
    use bsq::entropy::{brute_force_code_dist, soft_assign};
    use bsq::quantizer::TokenCode;
    let latents = random_unit_latents(8, 20, 102);
    for u in &latents {
        for tau in [0.5, 2.0] {
            let a = soft_assign(u, tau);
            let dist = brute_force_code_dist(u, tau).map_err(|e| e.to_string())?;
            for code in [0u64, 1, 37, 255] {
                let token = TokenCode::new(code, 8).unwrap();
                let gap = (a.code_mass(token) - dist.mass()[code as usize]).abs();
                if gap > 1e-9 {
                    return Err(format!("factorized mass off by {gap}"));
                }
            }
        }
    }
    Ok(())
}

fn verify_entropy() -> Result<(), String> {
    use bsq::entropy::{brute_force_code_dist, per_sample_entropy, soft_assign};
    let latents = random_unit_latents(8, 20, 103);
    for u in &latents {
        let factorized = per_sample_entropy(&soft_assign(u, 1.0));
        let brute = brute_force_code_dist(u, 1.0).map_err(|e| e.to_string())?.entropy_bits();
        if (factorized - brute).abs() > 1e-9 {
            return Err(format!("entropy {factorized} vs brute force {brute}"));
        }
    }
    Ok(())
}

fn verify_bounds() -> Result<(), String> {
    use bsq::bounds::{bound_loose, mc_quant_error};
    if (bound_loose(4) - 1.0).abs() > 1e-15 {
        return Err(format!("loose bound at L=4 is {}", bound_loose(4)));
    }
    let mc = mc_quant_error(4, 20_000, 104);
    if !(mc.mean > 0.0 && mc.mean < bound_loose(4)) {
        return Err(format!("MC mean {} escapes (0, {})", mc.mean, bound_loose(4)));
    }
    Ok(())
}

fn verify_ste() -> Result<(), String> {
    use bsq::grad::bsq_ste_backward;
    use bsq::quantizer::project_to_sphere;
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    for _ in 0..20 {
        let v: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let upstream: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g = bsq_ste_backward(&v, &upstream).map_err(|e| e.to_string())?;
        let u = match project_to_sphere(&v) {
            Ok(u) => u,
            Err(_) => continue,
        };
        let dot: f64 = g.iter().zip(u.values()).map(|(a, b)| a * b).sum();
        if dot.abs() > 1e-9 {
            return Err(format!("gradient has a radial component {dot}"));
        }
    }
    Ok(())
}

fn verify_dense_grads() -> Result<(), String> {
    use bsq::grad::{
        dense_backward, dense_forward, finite_diff_grad, grad_check, Activation, DenseLayer,
        FD_STEP,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    for _ in 0..5 {
        let layer = DenseLayer::new(
            3,
            2,
            (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            Activation::Tanh,
        )
        .map_err(|e| e.to_string())?;
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = dense_forward(&layer, &x).map_err(|e| e.to_string())?;
        // Loss: sum of outputs.
        let upstream = vec![1.0; 2];
        let grads = dense_backward(&layer, &x, &y, &upstream).map_err(|e| e.to_string())?;
        let numeric = finite_diff_grad(
            |xs: &[f64]| dense_forward(&layer, xs).unwrap().iter().sum::<f64>(),
            &x,
            FD_STEP,
        )
        .map_err(|e| e.to_string())?;
        let report = grad_check(&grads.input, &numeric, 1e-4);
        if !report.passed {
            return Err(format!("input gradient max rel err {}", report.max_rel_err));
        }
    }
    Ok(())
}

fn verify_coder() -> Result<(), String> {
    use bsq::coder::{ac_decode_verified, ac_encode};
    use bsq::prob::{AdaptiveBitModel, UniformModel};
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    for case in 0..100 {
        let k = [2usize, 4, 256][case % 3];
        let n = rng.gen_range(0..200);
        let symbols: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let mut enc = UniformModel::new(k).map_err(|e| e.to_string())?;
        let stream = ac_encode(&mut enc, &symbols).map_err(|e| e.to_string())?;
        let mut dec = UniformModel::new(k).map_err(|e| e.to_string())?;
        let back =
            ac_decode_verified(&mut dec, &stream, symbols.len()).map_err(|e| e.to_string())?;
        if back != symbols {
            return Err(format!("uniform round trip changed {n} symbols (K={k})"));
        }
    }
    for _ in 0..100 {
        let n = rng.gen_range(0..200);
        let symbols: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let mut enc = AdaptiveBitModel::new(4).map_err(|e| e.to_string())?;
        let stream = ac_encode(&mut enc, &symbols).map_err(|e| e.to_string())?;
        let mut dec = AdaptiveBitModel::new(4).map_err(|e| e.to_string())?;
        let back =
            ac_decode_verified(&mut dec, &stream, symbols.len()).map_err(|e| e.to_string())?;
        if back != symbols {
            return Err(format!("adaptive round trip changed {n} symbols"));
        }
    }
    Ok(())
}

fn verify_container() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    for choice in [ModelChoice::Uniform, ModelChoice::AdaptiveBit, ModelChoice::Context { order: 1 }] {
        let geometry = TokenGeometry { bits: 6, patch: 8, frames: 2, grid_h: 3, grid_w: 4 };
        let codes: Vec<u64> = (0..geometry.token_count()).map(|_| rng.gen_range(0..64)).collect();
        let tokens = TokenFile::new(geometry, codes).map_err(|e| e.to_string())?;
        let parsed = TokenFile::from_bytes(&tokens.to_bytes()).map_err(|e| e.to_string())?;
        if parsed != tokens {
            return Err("token container round trip drifted".into());
        }
        let compressed = compress(&tokens, choice).map_err(|e| e.to_string())?;
        let reparsed =
            CompressedFile::from_bytes(&compressed.to_bytes()).map_err(|e| e.to_string())?;
        let back = decompress(&reparsed).map_err(|e| e.to_string())?;
        if back != tokens {
            return Err(format!("compressed round trip drifted under {choice:?}"));
        }
    }
    Ok(())
}

fn verify_mask() -> Result<(), String> {
    use bsq::mask::blockwise_causal_mask;
    for frames in 1..=8usize {
        for tokens_per_frame in 1..=8usize {
            let mask = blockwise_causal_mask(frames, tokens_per_frame);
            let n = frames * tokens_per_frame;
            for i in 0..n {
                for j in 0..n {
                    let expect = j / tokens_per_frame <= i / tokens_per_frame;
                    if mask.allows(i, j) != expect {
                        return Err(format!(
                            "mask({frames}, {tokens_per_frame}) wrong at ({i}, {j})"
                        ));
                    }
                }
            }
        }
    }
    Ok(())
}

fn verify_netpbm() -> Result<(), String> {
    let pixels: Vec<u8> = (0..128).map(|i| (i * 2) as u8).collect();
    let image = GrayImage::new(16, 8, pixels);
    let parsed = parse_gray(&image.to_pgm_bytes()).map_err(|e| e.to_string())?;
    if parsed != image {
        return Err("PGM round trip drifted".into());
    }
    let patches = parsed.to_patches(8).map_err(|e| e.to_string())?;
    let back = GrayImage::from_patches(&patches, 1, 2, 8);
    if back != image {
        return Err("patch round trip drifted".into());
    }
    Ok(())
}

fn verify_checkpoint() -> Result<(), String> {
    let config = TrainConfig {
        quantizer: QuantizerKind::Bsq,
        latent_dim: 8,
        bits: 4,
        tau: 1.0,
        gamma: 1.0,
        weight_entropy: 0.1,
        weight_commit: 0.0,
        learning_rate: 0.1,
        batch_size: 8,
        steps: 1,
        seed: 109,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let model = ToyModel::init(&config, &mut rng).map_err(|e| e.to_string())?;
    let back = ToyModel::from_bytes(&model.to_bytes()).map_err(|e| e.to_string())?;
    if back != model {
        return Err("checkpoint round trip drifted".into());
    }
    Ok(())
}

fn verify_training() -> Result<(), String> {
    let config = TrainConfig {
        quantizer: QuantizerKind::Bsq,
        latent_dim: 8,
        bits: 4,
        tau: 1.0,
        gamma: 1.0,
        weight_entropy: 0.1,
        weight_commit: 0.0,
        learning_rate: 0.3,
        batch_size: 8,
        steps: 100,
        seed: 110,
    };
    let dataset = make_synthetic_dataset(DatasetKind::Checker, 32, 110);
    let (_, report) = train(&config, &dataset).map_err(|e| e.to_string())?;
    let head: f64 = report.loss_curve[..10].iter().map(|t| t.total).sum::<f64>() / 10.0;
    let tail: f64 = report.loss_curve[90..].iter().map(|t| t.total).sum::<f64>() / 10.0;
    if !(tail.is_finite() && tail < head) {
        return Err(format!("loss went from {head} to {tail}"));
    }
    let usage = report.code_usage.ok_or("missing code usage")?;
    if !(usage > 0.0 && usage <= 1.0) {
        return Err(format!("code usage {usage} outside (0, 1]"));
    }
    Ok(())
}
