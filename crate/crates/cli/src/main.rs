//! `airt`: synthetic panels, baselines, masked autoencoder training and
//! defect-visibility evaluation.
//!
//! Every command writes its outputs plus `<output>.manifest.json`. Failures
//! print a single JSON line on stderr and exit with 2 (flags), 3 (input
//! file), 4 (divergence) or 1 (anything else).

mod manifest;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use airt_core::baselines::{pca, ppt, tsr};
use airt_core::caae::{
    checkpoint_hash, encode_sequence, read_checkpoint, reconstruct_sequence, train_with_progress, write_checkpoint,
    CaaeConfig, CaaeError, ModelState,
};
use airt_core::data::{read_pgm_mask, read_tsq, write_pgm_mask, write_pgm_u16, write_tsq};
use airt_core::metrics::{best_of_stack, denoise_then_pca_eval, IdentityReconstructor, MetricsReport, PcCurveRow, RegionMask};
use airt_core::synth::{generate, PanelSpec, DEFAULT_DT, DEFAULT_N_T, DEFAULT_NOISE_REL_PEAK};
use airt_core::{reshape_raster, ImageStack, ThermogramSequence};
use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use manifest::{sha256_hex, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "airt", version, about = "Active thermography pipeline: synth, train, encode, baselines, evaluation")]
struct Cli {
    /// Root seed; every stage derives its own stream from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: available cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic panel: TSQ sequence, PGM defect mask and panel JSON.
    Synth(SynthArgs),
    /// Train the masked autoencoder on a sequence.
    Train(TrainArgs),
    /// Encode every pixel into a latent image stack.
    Encode(ModelIoArgs),
    /// Rebuild the sequence from the autoencoder reconstructions.
    Reconstruct(ModelIoArgs),
    /// Principal component score images.
    Pca(PcaArgs),
    /// Log-log polynomial coefficients and derivative images.
    Tsr(TsrArgs),
    /// Phase images of the per-pixel DFT.
    Ppt(PptArgs),
    /// Contrast/SNR of an image stack (or raw frames) and optional IoU.
    Eval(EvalArgs),
    /// PCA on the reconstructed (or raw) sequence, scored per component.
    DenoiseEval(DenoiseEvalArgs),
    /// Write each image of a stack as a 16-bit PGM.
    Export(ExportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Preset {
    /// 64×64 plate with four defect depths.
    Default,
    /// 180×180 plate with the same layout.
    Large,
}

#[derive(Debug, Args, Serialize)]
struct SynthArgs {
    #[arg(long, value_enum, default_value_t = Preset::Default)]
    preset: Preset,
    /// Frames.
    #[arg(long, default_value_t = DEFAULT_N_T)]
    n_t: usize,
    /// Frame interval, seconds.
    #[arg(long, default_value_t = DEFAULT_DT)]
    dt: f64,
    /// Noise standard deviation as a fraction of the peak signal.
    #[arg(long, default_value_t = DEFAULT_NOISE_REL_PEAK)]
    noise_rel: f64,
    /// Output TSQ; the mask and panel JSON go next to it (`.mask.pgm`, `.panel.json`).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SubsetArg(Option<usize>);

fn parse_subset(s: &str) -> std::result::Result<SubsetArg, String> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(SubsetArg(None));
    }
    match s.parse::<usize>() {
        Ok(0) | Err(_) => Err(format!("expected a positive count or ALL, got {s:?}")),
        Ok(n) => Ok(SubsetArg(Some(n))),
    }
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    tsq: PathBuf,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    /// Training pixels: a count or ALL.
    #[arg(long, value_parser = parse_subset, default_value = "1000")]
    subset: SubsetArg,
    #[arg(long, default_value_t = 0.5)]
    mask_ratio: f64,
    #[arg(long, default_value_t = 8)]
    patch_len: usize,
    /// Noise std as a fraction of the batch std.
    #[arg(long, default_value_t = 0.05)]
    noise_rel: f64,
    /// Weight of the distillation term.
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, default_value_t = 2e-5)]
    lr: f64,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 16)]
    channels: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 32)]
    latent_dim: usize,
    #[arg(long, default_value_t = 128)]
    mlp_hidden: usize,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Loss history CSV (default: `<out>.loss.csv`).
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct ModelIoArgs {
    #[arg(long)]
    tsq: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct PcaArgs {
    #[arg(long)]
    tsq: PathBuf,
    #[arg(long, default_value_t = 20)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct TsrArgs {
    #[arg(long)]
    tsq: PathBuf,
    #[arg(long, default_value_t = airt_core::baselines::DEFAULT_TSR_DEGREE)]
    degree: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct PptArgs {
    #[arg(long)]
    tsq: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct MaskSource {
    /// Panel JSON from `synth`; gives one class per defect depth.
    #[arg(long, conflicts_with = "mask")]
    panel: Option<PathBuf>,
    /// Binary PGM mask; all defects form one class.
    #[arg(long)]
    mask: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    /// Image stack to score.
    #[arg(long, conflicts_with = "tsq")]
    stack: Option<PathBuf>,
    /// Score the raw frames of a sequence instead of a stack.
    #[arg(long)]
    tsq: Option<PathBuf>,
    #[command(flatten)]
    truth: MaskSource,
    /// Predicted binary mask compared with the ground truth by IoU.
    #[arg(long)]
    pred_mask: Option<PathBuf>,
    /// JSON report; the CSV goes to the same path with `.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct DenoiseEvalArgs {
    #[arg(long)]
    tsq: PathBuf,
    /// Autoencoder checkpoint; without it the raw sequence is used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    truth: MaskSource,
    #[arg(long, default_value_t = 20)]
    k: usize,
    /// CSV `pc_index,contrast,snr_db`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct ExportArgs {
    #[arg(long)]
    stack: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Runtime,
    Usage,
    Input,
    Diverged,
}

impl Kind {
    fn code(self) -> u8 {
        match self {
            Kind::Runtime => 1,
            Kind::Usage => 2,
            Kind::Input => 3,
            Kind::Diverged => 4,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Kind::Runtime => "runtime",
            Kind::Usage => "usage",
            Kind::Input => "input",
            Kind::Diverged => "divergence",
        }
    }
}

/// An error tagged with its exit class.
#[derive(Debug)]
struct Failure {
    kind: Kind,
    source: anyhow::Error,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.source)
    }
}

impl std::error::Error for Failure {}

fn fail(kind: Kind, source: impl Into<anyhow::Error>) -> anyhow::Error {
    Failure {
        kind,
        source: source.into(),
    }
    .into()
}

trait Classify<T> {
    fn or_kind(self, kind: Kind, what: impl FnOnce() -> String) -> Result<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for std::result::Result<T, E> {
    fn or_kind(self, kind: Kind, what: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|e| fail(kind, e.into().context(what())))
    }
}

fn report(kind: Kind, message: &str) -> ExitCode {
    let line = json!({ "error": kind.name(), "code": kind.code(), "message": message });
    eprintln!("{line}");
    ExitCode::from(kind.code())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return report(Kind::Usage, first.trim_start_matches("error: "));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => match e.downcast_ref::<Failure>() {
            Some(f) => report(f.kind, &f.to_string()),
            None => report(Kind::Runtime, &format!("{e:#}")),
        },
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(fail(Kind::Usage, anyhow!("--threads must be positive")));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let seed = cli.seed;
    match cli.command {
        Command::Synth(a) => cmd_synth(a, seed),
        Command::Train(a) => cmd_train(a, seed),
        Command::Encode(a) => cmd_encode(a, seed),
        Command::Reconstruct(a) => cmd_reconstruct(a, seed),
        Command::Pca(a) => cmd_pca(a, seed),
        Command::Tsr(a) => cmd_tsr(a, seed),
        Command::Ppt(a) => cmd_ppt(a, seed),
        Command::Eval(a) => cmd_eval(a, seed),
        Command::DenoiseEval(a) => cmd_denoise_eval(a, seed),
        Command::Export(a) => cmd_export(a, seed),
    }
}

fn flags(args: &impl Serialize) -> serde_json::Value {
    serde_json::to_value(args).unwrap_or(serde_json::Value::Null)
}

/// `panel.tsq` → `panel.<suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

fn load_tsq(path: &Path, m: &mut RunManifest) -> Result<ThermogramSequence> {
    let seq = m.time("read", || read_tsq(path)).or_kind(Kind::Input, || format!("reading {}", path.display()))?;
    m.input(path)?;
    Ok(seq)
}

fn load_checkpoint(path: &Path, m: &mut RunManifest) -> Result<ModelState> {
    let model = m
        .time("read", || read_checkpoint(path))
        .or_kind(Kind::Input, || format!("reading checkpoint {}", path.display()))?;
    m.input(path)?;
    Ok(model)
}

fn load_stack(path: &Path, m: &mut RunManifest) -> Result<ImageStack> {
    let stack = m
        .time("read", || ImageStack::read(path))
        .or_kind(Kind::Input, || format!("reading stack {}", path.display()))?;
    m.input(path)?;
    Ok(stack)
}

#[derive(Serialize, Deserialize)]
struct PanelFile {
    panel: PanelSpec,
    n_t: usize,
    dt: f64,
}

fn load_truth(src: &MaskSource, m: &mut RunManifest) -> Result<Option<RegionMask>> {
    if let Some(path) = &src.panel {
        let text = fs::read_to_string(path).or_kind(Kind::Input, || format!("reading {}", path.display()))?;
        let pf: PanelFile =
            serde_json::from_str(&text).or_kind(Kind::Input, || format!("parsing panel JSON {}", path.display()))?;
        pf.panel
            .validate()
            .or_kind(Kind::Input, || format!("panel in {}", path.display()))?;
        m.input(path)?;
        return Ok(Some(pf.panel.region_mask()));
    }
    if let Some(path) = &src.mask {
        return Ok(Some(load_binary_mask(path, m)?));
    }
    Ok(None)
}

fn load_binary_mask(path: &Path, m: &mut RunManifest) -> Result<RegionMask> {
    let (n_y, n_x, flags) = read_pgm_mask(path).or_kind(Kind::Input, || format!("reading mask {}", path.display()))?;
    m.input(path)?;
    RegionMask::binary(n_y, n_x, &flags).or_kind(Kind::Input, || format!("mask {}", path.display()))
}

fn write_stack(stack: &ImageStack, path: &Path, m: &mut RunManifest) -> Result<()> {
    m.time("write", || stack.write(path))
        .with_context(|| format!("writing {}", path.display()))?;
    m.output(path)
}

fn cmd_synth(a: SynthArgs, seed: u64) -> Result<()> {
    let mut m = RunManifest::new("synth", flags(&a), seed);
    let panel = match a.preset {
        Preset::Default => PanelSpec::default_panel(seed),
        Preset::Large => PanelSpec::large_panel(seed),
    };
    if !(a.dt > 0.0) || !(a.noise_rel >= 0.0) {
        return Err(fail(Kind::Usage, anyhow!("--dt must be > 0 and --noise-rel >= 0")));
    }
    let panel = panel.with_relative_noise(a.noise_rel, a.dt);
    let (seq, mask) = m
        .time("generate", || generate(&panel, a.n_t, a.dt))
        .or_kind(Kind::Usage, || "invalid panel settings".into())?;
    let mask_path = sibling(&a.out, "mask.pgm");
    let panel_path = sibling(&a.out, "panel.json");
    m.time("write", || -> Result<()> {
        write_tsq(&seq, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
        write_pgm_mask(&mask_path, mask.n_y(), mask.n_x(), &mask.defect_flags())?;
        let pf = PanelFile {
            panel: panel.clone(),
            n_t: a.n_t,
            dt: a.dt,
        };
        fs::write(&panel_path, serde_json::to_string_pretty(&pf)? + "\n")?;
        Ok(())
    })?;
    for p in [&a.out, &mask_path, &panel_path] {
        m.output(p)?;
    }
    m.details = json!({ "n_y": seq.n_y(), "n_x": seq.n_x(), "n_t": seq.n_t(), "noise_sigma": panel.noise_sigma });
    m.write_beside(&a.out)?;
    Ok(())
}

fn cmd_train(a: TrainArgs, seed: u64) -> Result<()> {
    let mut m = RunManifest::new("train", flags(&a), seed);
    let seq = load_tsq(&a.tsq, &mut m)?;
    let mut cfg = CaaeConfig::new(seq.n_t()).with_width(a.channels, a.heads);
    cfg.latent_dim = a.latent_dim;
    cfg.mlp_hidden = a.mlp_hidden;
    cfg.mask_ratio = a.mask_ratio;
    cfg.patch_len = a.patch_len;
    cfg.noise_sigma_rel = a.noise_rel;
    cfg.kd_weight = a.alpha;
    cfg.lr = a.lr;
    cfg.batch_size = a.batch_size;
    cfg.epochs = a.epochs;
    cfg.subset_size = a.subset.0;
    cfg.seed = seed;
    cfg.validate().or_kind(Kind::Usage, || "training configuration".into())?;
    if let Some(n) = cfg.subset_size {
        if n > seq.n_pixels() {
            return Err(fail(
                Kind::Usage,
                anyhow!("--subset {n} exceeds the {} pixels of the sequence", seq.n_pixels()),
            ));
        }
    }
    let pm = m.time("prepare", || reshape_raster(&seq).center()).context("centering")?;

    let loss_csv = a.loss_csv.clone().unwrap_or_else(|| sibling(&a.out, "loss.csv"));
    let trained = m.time("train", || {
        train_with_progress(&pm, &cfg, |e| {
            log::info!("epoch {} total {:.6} rec {:.6} kd {:.6} ({:.2}s)", e.epoch, e.total, e.rec, e.kd, e.wall_seconds)
        })
    });
    let out = match trained {
        Ok(out) => out,
        Err(CaaeError::Diverged {
            epoch,
            step,
            reason,
            last_good,
            history,
        }) => {
            let last = sibling(&a.out, "last_good.ckpt");
            write_checkpoint(&last_good, &last)?;
            fs::write(&loss_csv, history.to_csv())?;
            m.output(&last)?;
            m.output(&loss_csv)?;
            m.details = json!({ "diverged": { "epoch": epoch, "step": step, "reason": reason } });
            m.write_beside(&a.out)?;
            return Err(fail(
                Kind::Diverged,
                anyhow!("diverged at epoch {epoch}, step {step}: {reason}; last good checkpoint in {}", last.display()),
            ));
        }
        Err(e @ CaaeError::Config(_)) => return Err(fail(Kind::Usage, e)),
        Err(e) => return Err(e.into()),
    };

    m.time("write", || -> Result<()> {
        write_checkpoint(&out.model, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
        fs::write(&loss_csv, out.history.to_csv()).with_context(|| format!("writing {}", loss_csv.display()))?;
        Ok(())
    })?;
    m.output(&a.out)?;
    m.output(&loss_csv)?;

    let epochs = &out.history.epochs;
    let epoch_seconds: Vec<f64> = epochs.iter().map(|e| e.wall_seconds).collect();
    let mean_epoch = if epoch_seconds.is_empty() {
        0.0
    } else {
        epoch_seconds.iter().sum::<f64>() / epoch_seconds.len() as f64
    };
    m.timings.insert("epoch_mean".into(), mean_epoch);
    // the loss CSV carries wall-clock times, so hash the losses alone as well
    let losses: String = epochs
        .iter()
        .map(|e| format!("{},{:?},{:?},{:?}\n", e.epoch, e.total, e.rec, e.kd))
        .collect();
    m.details = json!({
        "config": cfg,
        "n_parameters": out.model.n_parameters(),
        "training_pixels": out.subset.len(),
        "teacher_rank": out.teacher_rank,
        "input_scale": out.model.input_scale,
        "first_epoch_loss": epochs.first().map(|e| e.total),
        "final_epoch_loss": epochs.last().map(|e| e.total),
        "epoch_seconds": epoch_seconds,
        "loss_history_sha256": sha256_hex(losses.as_bytes()),
        "checkpoint_sha256": checkpoint_hash(&out.model)?,
    });
    m.write_beside(&a.out)?;
    Ok(())
}

fn cmd_encode(a: ModelIoArgs, seed: u64) -> Result<()> {
    let mut m = RunManifest::new("encode", flags(&a), seed);
    let seq = load_tsq(&a.tsq, &mut m)?;
    let model = load_checkpoint(&a.checkpoint, &mut m)?;
    check_length(&seq, &model)?;
    let stack = m.time("encode", || encode_sequence(&seq, &model))?;
    write_stack(&stack, &a.out, &mut m)?;
    m.details = json!({ "images": stack.len(), "n_y": stack.n_y, "n_x": stack.n_x });
    m.write_beside(&a.out)?;
    Ok(())
}

fn cmd_reconstruct(a: ModelIoArgs, seed: u64) -> Result<()> {
    let mut m = RunManifest::new("reconstruct", flags(&a), seed);
    let seq = load_tsq(&a.tsq, &mut m)?;
    let model = load_checkpoint(&a.checkpoint, &mut m)?;
    check_length(&seq, &model)?;
    let rec = m.time("reconstruct", || reconstruct_sequence(&seq, &model))?;
    m.time("write", || write_tsq(&rec, &a.out))
        .with_context(|| format!("writing {}", a.out.display()))?;
    m.output(&a.out)?;
    m.write_beside(&a.out)?;
    Ok(())
}

fn check_length(seq: &ThermogramSequence, model: &ModelState) -> Result<()> {
    if seq.n_t() != model.config.n_t {
        return Err(fail(
            Kind::Input,
            anyhow!("sequence has {} frames, checkpoint expects {}", seq.n_t(), model.config.n_t),
        ));
    }
    Ok(())
}

fn cmd_pca(a: PcaArgs, seed: u64) -> Result<()> {
    let mut m = RunManifest::new("pca", flags(&a), seed);
    let seq = load_tsq(&a.tsq, &mut m)?;
    let pm = reshape_raster(&seq).center()?;
    let max_k = pm.n_rows().min(pm.n_t());
    if a.k == 0 || a.k > max_k {
        return Err(fail(Kind::Usage, anyhow!("--k {} outside 1..={max_k}", a.k)));
    }
    let res = m.time("pca", || pca(&pm, a.k))?;
    let labels = (1..=a.k).map(|j| format!("pc{j}")).collect();
    let mut stack = ImageStack::with_labels(seq.n_y(), seq.n_x(), "pca", res.score_images(), labels)?;
    stack.provenance = json!({
        "explained_ratio": res.explained_ratio(),
        "rank": res.rank,
        "dataset_sha256": airt_core::caae::sequence_hash(&seq),
    });
    write_stack(&stack, &a.out, &mut m)?;
    m.details = json!({ "rank": res.rank, "explained_ratio": res.explained_ratio() });
    m.write_beside(&a.out)?;
    Ok(())
}

fn cmd_tsr(a: TsrArgs, seed: u64) -> Result<()> {
    let mut m = RunManifest::new("tsr", flags(&a), seed);
    let seq = load_tsq(&a.tsq, &mut m)?;
    let pm = reshape_raster(&seq);
    let res = m
        .time("tsr", || tsr(&pm, a.degree))
        .or_kind(Kind::Usage, || "TSR fit".into())?;
    let mut images = res.coefficients.clone();
    let mut labels: Vec<String> = (0..=a.degree).map(|j| format!("c{j}")).collect();
    images.push(res.first_derivative.clone());
    labels.push("dlnT_dlnt".into());
    images.push(res.second_derivative.clone());
    labels.push("d2lnT_dlnt2".into());
    let mut stack = ImageStack::with_labels(seq.n_y(), seq.n_x(), "tsr", images, labels)?;
    stack.provenance = json!({
        "degree": a.degree,
        "eval_time": res.eval_time,
        "invalid_pixels": res.n_invalid(),
        "dataset_sha256": airt_core::caae::sequence_hash(&seq),
    });
    if res.n_invalid() > 0 {
        log::warn!("{} pixels had non-positive samples and were set to zero", res.n_invalid());
    }
    write_stack(&stack, &a.out, &mut m)?;
    m.details = json!({ "invalid_pixels": res.n_invalid(), "eval_time": res.eval_time });
    m.write_beside(&a.out)?;
    Ok(())
}

fn cmd_ppt(a: PptArgs, seed: u64) -> Result<()> {
    let mut m = RunManifest::new("ppt", flags(&a), seed);
    let seq = load_tsq(&a.tsq, &mut m)?;
    let pm = reshape_raster(&seq);
    let res = m.time("ppt", || ppt(&pm))?;
    let labels = (0..res.phase.len()).map(|f| format!("phase{f}")).collect();
    let mut stack = ImageStack::with_labels(seq.n_y(), seq.n_x(), "ppt", res.phase.clone(), labels)?;
    stack.provenance = json!({
        "transform": res.transform,
        "dataset_sha256": airt_core::caae::sequence_hash(&seq),
    });
    write_stack(&stack, &a.out, &mut m)?;
    m.details = json!({ "bins": res.phase.len(), "transform": res.transform });
    m.write_beside(&a.out)?;
    Ok(())
}

fn frames_stack(seq: &ThermogramSequence) -> Result<ImageStack> {
    let images = (0..seq.n_t()).map(|k| seq.frame(k).to_vec()).collect();
    let labels = (0..seq.n_t()).map(|k| format!("frame{k}")).collect();
    Ok(ImageStack::with_labels(seq.n_y(), seq.n_x(), "raw", images, labels)?)
}

fn cmd_eval(a: EvalArgs, seed: u64) -> Result<()> {
    let mut m = RunManifest::new("eval", flags(&a), seed);
    let truth = load_truth(&a.truth, &mut m)?
        .ok_or_else(|| fail(Kind::Usage, anyhow!("give the ground truth with --panel or --mask")))?;
    let stack = match (&a.stack, &a.tsq) {
        (Some(p), _) => Some(load_stack(p, &mut m)?),
        (None, Some(p)) => Some(frames_stack(&load_tsq(p, &mut m)?)?),
        (None, None) => None,
    };
    let mut report = match &stack {
        Some(s) => m
            .time("metrics", || best_of_stack(s, &truth))
            .or_kind(Kind::Input, || "scoring the stack against the mask".into())?,
        None => MetricsReport {
            method: "masks".into(),
            ..Default::default()
        },
    };
    if let Some(p) = &a.pred_mask {
        let pred = load_binary_mask(p, &mut m)?;
        report
            .add_iou(p.display().to_string(), &pred, &truth)
            .or_kind(Kind::Input, || "comparing masks".into())?;
    }
    let csv_path = sibling(&a.out, "csv");
    m.time("write", || -> Result<()> {
        fs::write(&a.out, serde_json::to_string_pretty(&report)? + "\n")?;
        let mut csv = if stack.is_some() { report.to_csv() } else { String::new() };
        if !report.iou.is_empty() {
            if !csv.is_empty() {
                csv.push('\n');
            }
            csv.push_str(&report.iou_csv());
        }
        fs::write(&csv_path, csv)?;
        Ok(())
    })
    .with_context(|| format!("writing {}", a.out.display()))?;
    m.output(&a.out)?;
    m.output(&csv_path)?;
    m.details = json!({
        "aggregate": report.aggregate(),
        "iou": report.iou,
    });
    m.write_beside(&a.out)?;
    Ok(())
}

fn cmd_denoise_eval(a: DenoiseEvalArgs, seed: u64) -> Result<()> {
    let mut m = RunManifest::new("denoise-eval", flags(&a), seed);
    let seq = load_tsq(&a.tsq, &mut m)?;
    let truth = load_truth(&a.truth, &mut m)?
        .ok_or_else(|| fail(Kind::Usage, anyhow!("give the ground truth with --panel or --mask")))?;
    let max_k = seq.n_pixels().min(seq.n_t());
    if a.k == 0 || a.k > max_k {
        return Err(fail(Kind::Usage, anyhow!("--k {} outside 1..={max_k}", a.k)));
    }
    let rows = match &a.checkpoint {
        Some(p) => {
            let model = load_checkpoint(p, &mut m)?;
            check_length(&seq, &model)?;
            m.time("evaluate", || denoise_then_pca_eval(&seq, &model, a.k, &truth))?
        }
        None => m.time("evaluate", || denoise_then_pca_eval(&seq, &IdentityReconstructor, a.k, &truth))?,
    };
    fs::write(&a.out, PcCurveRow::csv(&rows)).with_context(|| format!("writing {}", a.out.display()))?;
    m.output(&a.out)?;
    m.details = json!({ "best": PcCurveRow::best(&rows) });
    m.write_beside(&a.out)?;
    Ok(())
}

#[derive(Serialize)]
struct ExportEntry {
    label: String,
    file: String,
    min: f64,
    max: f64,
}

fn cmd_export(a: ExportArgs, seed: u64) -> Result<()> {
    let mut m = RunManifest::new("export", flags(&a), seed);
    let stack = load_stack(&a.stack, &mut m)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let mut entries = Vec::with_capacity(stack.len());
    for ((img, label), (lo, hi)) in stack.images.iter().zip(&stack.labels).zip(stack.ranges()) {
        let file = format!("{:03}_{}.pgm", entries.len(), sanitize(label));
        let path = a.out_dir.join(&file);
        let range = hi - lo;
        let samples: Vec<u16> = img
            .iter()
            .map(|&v| {
                if range > 0.0 {
                    ((v - lo) / range * 65535.0).round().clamp(0.0, 65535.0) as u16
                } else {
                    0
                }
            })
            .collect();
        m.time("write", || write_pgm_u16(&path, stack.n_y, stack.n_x, &samples))
            .with_context(|| format!("writing {}", path.display()))?;
        m.output(&path)?;
        entries.push(ExportEntry {
            label: label.clone(),
            file,
            min: lo,
            max: hi,
        });
    }
    let index = a.out_dir.join("normalization.json");
    fs::write(&index, serde_json::to_string_pretty(&entries)? + "\n")?;
    m.output(&index)?;
    m.details = json!({ "images": entries.len(), "method": stack.method });
    m.write_beside(&index)?;
    Ok(())
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}
