//! Command-line driver: phantom generation, correlation analysis, training,
//! prediction, evaluation, and checkpoint inspection.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use corrseg::correlation::parse_pairing;
use corrseg::ndarray;
use corrseg::imageio::{write_pgm, write_ppm};
use corrseg::network::{checkpoint_summary, load_checkpoint};
use corrseg::phantom::{
    foreground_pairs, generate_phantom, joint_histogram_from_pairs, write_histogram_pgm,
    write_histogram_text, write_phantom_dataset, PhantomConfig,
};
use corrseg::trainer::{
    evaluate, parse_run_config, predict, prepare_dataset, train, RunConfig, StopReason,
};
use corrseg::volume::{pearson_foreground, read_manifest, write_raw_label, ManifestEntry};

#[derive(Parser)]
#[command(
    name = "corrseg",
    version,
    about = "Multi-modal 3D segmentation with correlation-constrained fusion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic correlated multi-modal dataset.
    MakePhantom(MakePhantomArgs),
    /// Joint intensity histograms and Pearson correlations per modality pair.
    AnalyzeCorrelation(AnalyzeArgs),
    /// Train the segmentation network on a manifest dataset.
    Train(TrainArgs),
    /// Segment cases with a trained checkpoint.
    Predict(PredictArgs),
    /// Per-region dice and Hausdorff metrics against ground truth.
    Evaluate(EvaluateArgs),
    /// Print checkpoint config and parameter table.
    InspectCheckpoint(InspectArgs),
}

#[derive(Args)]
struct MakePhantomArgs {
    /// Output directory for volumes and the manifest.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of cases to generate.
    #[arg(long, default_value_t = 4)]
    cases: usize,
    /// Cube edge or D,H,W.
    #[arg(long, default_value = "32")]
    shape: String,
    #[arg(long, default_value_t = 0.05)]
    noise_std: f64,
    /// Per-modality affine coefficients "a:b,a:b,..." (defaults to four
    /// positive-scale modalities).
    #[arg(long)]
    coeffs: Option<String>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Dataset manifest.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    bins: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest.
    #[arg(long)]
    data: PathBuf,
    /// Output directory (checkpoints + history.csv).
    #[arg(long)]
    out: PathBuf,
    /// Run config file (flat key=value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Correlation loss weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// Disable the dual-attention fusion block (plain concatenation).
    #[arg(long)]
    no_fusion: bool,
    /// Disable the correlation block and loss.
    #[arg(long)]
    no_correlation: bool,
    /// Correlation pairs, e.g. "FLAIR>T1,T1>T1c,T1c>T2".
    #[arg(long)]
    pairs: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Network input shape (cube edge or D,H,W).
    #[arg(long)]
    shape: Option<String>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Case id to segment (defaults to every case in the manifest).
    #[arg(long)]
    case: Option<String>,
    /// Also emit mid-slice overlay images per region.
    #[arg(long, default_value_t = true)]
    overlays: bool,
    /// Dump per-level modality attention weights as CSV.
    #[arg(long)]
    attention_csv: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

fn parse_shape_arg(s: &str) -> anyhow::Result<[usize; 3]> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let one = |p: &str| -> anyhow::Result<usize> {
        p.parse().map_err(|_| anyhow!("bad dimension '{p}'"))
    };
    match parts.len() {
        1 => {
            let d = one(parts[0])?;
            Ok([d, d, d])
        }
        3 => Ok([one(parts[0])?, one(parts[1])?, one(parts[2])?]),
        _ => bail!("bad shape '{s}', use D or D,H,W"),
    }
}

fn parse_coeffs(s: &str) -> anyhow::Result<Vec<(f64, f64)>> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (a, b) = part
            .split_once(':')
            .ok_or_else(|| anyhow!("bad coefficient '{part}', expected a:b"))?;
        out.push((a.trim().parse()?, b.trim().parse()?));
    }
    Ok(out)
}

fn cmd_make_phantom(args: MakePhantomArgs) -> anyhow::Result<()> {
    let mut config = PhantomConfig {
        seed: args.seed,
        shape: parse_shape_arg(&args.shape)?,
        n_cases: args.cases,
        noise_std: args.noise_std,
        ..Default::default()
    };
    if let Some(c) = &args.coeffs {
        config.modality_coeffs = parse_coeffs(c)?;
    }
    let cases = generate_phantom(&config)?;
    let manifest = write_phantom_dataset(&args.out, &cases)?;
    println!(
        "wrote {} cases of shape {:?} to {}",
        cases.len(),
        config.shape,
        manifest.display()
    );
    Ok(())
}

fn cmd_analyze(args: AnalyzeArgs) -> anyhow::Result<()> {
    let entries = read_manifest(&args.data)?;
    if entries.is_empty() {
        bail!("manifest {} has no cases", args.data.display());
    }
    std::fs::create_dir_all(&args.out)?;
    let cases: Vec<_> = entries
        .iter()
        .map(ManifestEntry::load)
        .collect::<corrseg::Result<_>>()?;
    let n_mod = cases[0].modalities.len();

    let mut pearson_csv = String::from("case_id,pair,pearson\n");
    let mut summary_csv = String::from("pair,mean_pearson,off_diagonal_fraction\n");
    for i in 0..n_mod {
        for j in (i + 1)..n_mod {
            let pair_name = format!(
                "{}-{}",
                cases[0].modalities[i].modality, cases[0].modalities[j].modality
            );
            let mut pooled_pairs = Vec::new();
            let mut pearson_sum = 0.0;
            let mut pearson_n = 0usize;
            for case in &cases {
                let (a, b) = (&case.modalities[i], &case.modalities[j]);
                let r = pearson_foreground(a, b)?;
                pearson_csv.push_str(&format!("{},{},{:.9}\n", case.case_id, pair_name, r));
                if r.is_finite() {
                    pearson_sum += r;
                    pearson_n += 1;
                }
                pooled_pairs.extend(foreground_pairs(a, b)?);
            }
            let hist = joint_histogram_from_pairs(&pooled_pairs, args.bins)?;
            write_histogram_pgm(&args.out.join(format!("histogram_{pair_name}.pgm")), &hist)?;
            write_histogram_text(&args.out.join(format!("histogram_{pair_name}.txt")), &hist)?;
            let mean_pearson = pearson_sum / pearson_n.max(1) as f64;
            summary_csv.push_str(&format!(
                "{},{:.9},{:.9}\n",
                pair_name,
                mean_pearson,
                hist.off_diagonal_fraction(1)
            ));
        }
    }
    std::fs::write(args.out.join("pearson.csv"), pearson_csv)?;
    std::fs::write(args.out.join("summary.csv"), &summary_csv)?;
    print!("{summary_csv}");
    Ok(())
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let mut rc: RunConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            parse_run_config(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        rc.train.seed = seed;
    }
    if let Some(lambda) = args.lambda {
        rc.train.lambda = lambda;
        rc.net.lambda_corr = lambda;
    }
    if args.no_fusion {
        rc.train.use_fusion = false;
        rc.net.use_fusion = false;
    }
    if args.no_correlation {
        rc.train.use_correlation = false;
        rc.net.use_correlation = false;
    }
    if let Some(pairs) = &args.pairs {
        rc.net.pairing = parse_pairing(pairs, rc.net.n_modalities)?;
    }
    if let Some(epochs) = args.epochs {
        rc.train.max_epochs = epochs;
    }
    if let Some(shape) = &args.shape {
        rc.net.input_shape = parse_shape_arg(shape)?;
    }

    let entries = read_manifest(&args.data)?;
    let dataset = prepare_dataset(&entries, &rc.net)?;
    let outcome = train(&rc.train, &rc.net, &dataset, &args.out)?;
    let reason = match outcome.stop_reason {
        StopReason::MaxEpochs => "MAX_EPOCHS",
        StopReason::EarlyStop => "EARLY_STOP",
        StopReason::TargetReached => "TARGET_REACHED",
    };
    println!(
        "trained {} epochs (stop: {reason}), best val loss {:.6}",
        outcome.state.history.len(),
        outcome.state.best_val_loss
    );
    println!("checkpoint: {}", outcome.checkpoint_path.display());
    println!("history:    {}", args.out.join("history.csv").display());
    Ok(())
}

/// Grayscale mid-axial slice of a (D, H, W) volume, min/max scaled.
fn slice_to_gray(vol: &ndarray::Array3<f32>) -> (usize, usize, Vec<u8>) {
    let (d, h, w) = vol.dim();
    let z = d / 2;
    let slice = vol.slice(ndarray::s![z, .., ..]);
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in slice.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = (hi - lo).max(1e-12);
    let gray: Vec<u8> = slice
        .iter()
        .map(|&v| (255.0 * (v - lo) / span).round().clamp(0.0, 255.0) as u8)
        .collect();
    (h, w, gray)
}

fn write_overlays(
    out_dir: &Path,
    case_id: &str,
    base: &ndarray::Array3<f32>,
    labels: &ndarray::Array3<u8>,
) -> anyhow::Result<()> {
    let (h, w, gray) = slice_to_gray(base);
    let z = labels.dim().0 / 2;
    let label_slice = labels.slice(ndarray::s![z, .., ..]);

    // per-region grayscale overlays: dimmed base, region at full white
    for (region, name) in [
        (corrseg::metrics::Region::WholeTumor, "wt"),
        (corrseg::metrics::Region::TumorCore, "tc"),
        (corrseg::metrics::Region::Enhancing, "et"),
    ] {
        let mask = corrseg::metrics::region_mask(&labels.to_owned(), region);
        let mask_slice = mask.slice(ndarray::s![z, .., ..]);
        let pixels: Vec<u8> = gray
            .iter()
            .zip(mask_slice.iter())
            .map(|(&g, &m)| if m { 255 } else { (g as f32 * 0.7) as u8 })
            .collect();
        write_pgm(
            &out_dir.join(format!("{case_id}_overlay_{name}.pgm")),
            w,
            h,
            &pixels,
        )?;
    }

    // combined color overlay: red necrotic/non-enhancing, yellow edema,
    // green enhancing
    let mut rgb = Vec::with_capacity(3 * h * w);
    for (&g, &l) in gray.iter().zip(label_slice.iter()) {
        let (cr, cg, cb) = match l {
            1 => (255u8, 0u8, 0u8),
            2 => (255, 255, 0),
            4 => (0, 255, 0),
            _ => (g, g, g),
        };
        if l == 0 {
            rgb.extend_from_slice(&[cr, cg, cb]);
        } else {
            let blend = |c: u8| ((0.55 * c as f32) + (0.45 * g as f32)) as u8;
            rgb.extend_from_slice(&[blend(cr), blend(cg), blend(cb)]);
        }
    }
    write_ppm(&out_dir.join(format!("{case_id}_overlay.ppm")), w, h, &rgb)?;
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> anyhow::Result<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let entries = read_manifest(&args.data)?;
    let selected: Vec<&ManifestEntry> = match &args.case {
        Some(id) => {
            let entry = entries
                .iter()
                .find(|e| &e.case_id == id)
                .ok_or_else(|| anyhow!("case '{id}' not in manifest"))?;
            vec![entry]
        }
        None => entries.iter().collect(),
    };
    std::fs::create_dir_all(&args.out)?;
    for entry in selected {
        let case = entry.load()?;
        let (prepared, labels) = predict(&model, &case)?;
        let label_path = args.out.join(format!("{}_pred.mmsv", entry.case_id));
        write_raw_label(&label_path, &labels.data)?;
        if args.overlays {
            let base = prepared.input.index_axis(ndarray::Axis(0), 0).to_owned();
            write_overlays(&args.out, &entry.case_id, &base, &labels.data)?;
        }
        if args.attention_csv {
            let mut x = ndarray::Array5::zeros({
                let (n, d, h, w) = prepared.input.dim();
                (1, n, d, h, w)
            });
            x.index_axis_mut(ndarray::Axis(0), 0).assign(&prepared.input);
            let (out, _) = model.forward(&x)?;
            let mut csv = String::from("level,unit,weight\n");
            for (level, weights) in &out.attention_weights {
                for (k, wv) in weights.row(0).iter().enumerate() {
                    csv.push_str(&format!("{level},{k},{wv:.9}\n"));
                }
            }
            std::fs::write(
                args.out.join(format!("{}_attention.csv", entry.case_id)),
                csv,
            )?;
        }
        println!("{} -> {}", entry.case_id, label_path.display());
    }
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let entries = read_manifest(&args.data)?;
    let dataset = prepare_dataset(&entries, &model.config)?;
    let report = evaluate(&model, &dataset)?;
    if report.rows.is_empty() {
        bail!("no labeled cases to evaluate");
    }
    std::fs::create_dir_all(&args.out)?;
    let csv = report.to_csv();
    std::fs::write(args.out.join("metrics.csv"), &csv)?;
    for line in csv.lines().filter(|l| l.starts_with("MEAN")) {
        println!("{line}");
    }
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> anyhow::Result<()> {
    let (config, version, entries) = checkpoint_summary(&args.checkpoint)?;
    println!("checkpoint version: {version}");
    println!("config: {config:?}");
    let total: usize = entries.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    println!("parameters: {total} in {} tensors", entries.len());
    for (name, shape) in entries {
        println!("  {name}  {shape:?}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::MakePhantom(args) => cmd_make_phantom(args),
        Command::AnalyzeCorrelation(args) => cmd_analyze(args),
        Command::Train(args) => cmd_train(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::InspectCheckpoint(args) => cmd_inspect(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
