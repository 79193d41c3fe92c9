//! Command-line driver: synthetic data generation, both training steps,
//! pseudo-label export, evaluation, and visualization.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use refseg_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use refseg_core::config::{AttnVAxis, EncoderKind, PsiMode, RescaleMode, RunConfig};
use refseg_core::data::synthetic::{generate_dataset, SyntheticSceneSpec};
use refseg_core::data::Dataset;
use refseg_core::error::Error as CoreError;
use refseg_core::pipeline::{generate_pseudo_labels, tokenize, Step1Model};
use refseg_core::segmentor::{predict_mask, Step2Model};
use refseg_core::train::{
    eval_pseudo_dir, eval_step1_maps, eval_step2_model, train_step1, train_step2, EpochLog,
};
use refseg_core::vocab::Vocab;

#[derive(Parser)]
#[command(
    name = "refseg",
    about = "Weakly-supervised referring image segmentation pipeline",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic shapes dataset with referring expressions.
    GenSynth(GenSynthArgs),
    /// Train step 1 (response-map learning).
    TrainStep1(TrainStep1Args),
    /// Export pseudo labels from a step-1 checkpoint.
    GenPseudo(GenPseudoArgs),
    /// Train step 2 (segmentation network) on pseudo labels.
    TrainStep2(TrainStep2Args),
    /// Evaluate a checkpoint or a pseudo-label directory against ground truth.
    Eval(EvalArgs),
    /// Render input / response heatmap / predicted mask side by side.
    Visualize(VisualizeArgs),
}

/// Config resolution: `--config` file (or `REFSEG_CONFIG`) over `--preset`,
/// individual flags over everything.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON config file; a full RunConfig document.
    #[arg(long, env = "REFSEG_CONFIG", global = true)]
    config: Option<PathBuf>,
    /// Built-in preset: "full" (published settings) or "desk" (CPU-sized).
    #[arg(long, global = true)]
    preset: Option<String>,

    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    n_negatives: Option<usize>,
    #[arg(long)]
    k_calibration: Option<usize>,
    #[arg(long)]
    c_d: Option<usize>,
    #[arg(long)]
    c_v: Option<usize>,
    #[arg(long)]
    c_l: Option<usize>,
    #[arg(long)]
    s: Option<usize>,
    #[arg(long)]
    lambda_cls: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    t_max: Option<usize>,
    #[arg(long)]
    lr_schedule: Option<String>,
    #[arg(long)]
    lr_poly_power: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    min_component_px: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Encoder kind: "toy" or "adapter".
    #[arg(long)]
    encoder: Option<String>,
    /// Score regularizer: "zero" or "focal".
    #[arg(long)]
    psi_mode: Option<String>,
    /// Text-to-visual attention axis: "queries" or "pixels".
    #[arg(long)]
    attn_v_axis: Option<String>,
    #[arg(long)]
    enable_t2v: Option<bool>,
    #[arg(long)]
    enable_v2t: Option<bool>,
    #[arg(long)]
    calibration_pos_term: Option<bool>,
    #[arg(long)]
    calibration_neg_term: Option<bool>,
    #[arg(long)]
    scoring_frozen: Option<bool>,
    #[arg(long)]
    epsilon_clamp: Option<f64>,
    /// Cosine rescale: "affine" or "sigmoid".
    #[arg(long)]
    rescale_mode: Option<String>,
    #[arg(long)]
    rescale_temp: Option<f64>,
    #[arg(long)]
    data_root: Option<String>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(_) | CoreError::Checkpoint(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

impl ConfigArgs {
    fn base(&self) -> CliResult<RunConfig> {
        if let Some(path) = &self.config {
            return Ok(RunConfig::from_json_file(path)
                .map_err(|e| usage(format!("config file {}: {e}", path.display())))?);
        }
        match self.preset.as_deref() {
            None | Some("full") => Ok(RunConfig::default()),
            Some("desk") => Ok(RunConfig::desk()),
            Some(other) => Err(usage(format!("unknown preset '{other}' (full|desk)"))),
        }
    }

    fn apply_overrides(&self, cfg: &mut RunConfig) -> CliResult<()> {
        macro_rules! set {
            ($field:ident) => {
                if let Some(v) = &self.$field {
                    cfg.$field = v.clone();
                }
            };
        }
        set!(alpha);
        set!(beta);
        set!(n_negatives);
        set!(k_calibration);
        set!(c_d);
        set!(c_v);
        set!(c_l);
        set!(s);
        set!(lambda_cls);
        set!(lr);
        set!(weight_decay);
        set!(epochs);
        set!(batch);
        set!(image_size);
        set!(t_max);
        set!(lr_schedule);
        set!(lr_poly_power);
        set!(threshold);
        set!(min_component_px);
        set!(seed);
        set!(enable_t2v);
        set!(enable_v2t);
        set!(calibration_pos_term);
        set!(calibration_neg_term);
        set!(scoring_frozen);
        set!(epsilon_clamp);
        set!(rescale_temp);
        if let Some(v) = &self.encoder {
            cfg.encoder = match v.as_str() {
                "toy" => EncoderKind::Toy,
                "adapter" => EncoderKind::Adapter,
                other => return Err(usage(format!("unknown encoder '{other}'"))),
            };
        }
        if let Some(v) = &self.psi_mode {
            cfg.psi_mode = match v.as_str() {
                "zero" => PsiMode::Zero,
                "focal" => PsiMode::Focal,
                other => return Err(usage(format!("unknown psi_mode '{other}'"))),
            };
        }
        if let Some(v) = &self.attn_v_axis {
            cfg.attn_v_axis = match v.as_str() {
                "queries" => AttnVAxis::Queries,
                "pixels" => AttnVAxis::Pixels,
                other => return Err(usage(format!("unknown attn_v_axis '{other}'"))),
            };
        }
        if let Some(v) = &self.rescale_mode {
            cfg.rescale_mode = match v.as_str() {
                "affine" => RescaleMode::Affine,
                "sigmoid" => RescaleMode::Sigmoid,
                other => return Err(usage(format!("unknown rescale_mode '{other}'"))),
            };
        }
        if let Some(v) = &self.data_root {
            cfg.data_root = Some(v.clone());
        }
        Ok(())
    }

    /// Resolve against the built-in defaults / preset / file.
    fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = self.base()?;
        self.apply_overrides(&mut cfg)?;
        cfg.validate().map_err(CliError::from)?;
        Ok(cfg)
    }

    /// Resolve on top of a checkpoint snapshot (used by eval/visualize when
    /// no explicit config file is given).
    fn resolve_over(&self, snapshot: &RunConfig) -> CliResult<RunConfig> {
        let mut cfg = if self.config.is_some() {
            self.base()?
        } else {
            snapshot.clone()
        };
        self.apply_overrides(&mut cfg)?;
        cfg.validate().map_err(CliError::from)?;
        Ok(cfg)
    }
}

fn ensure_toy_encoder(cfg: &RunConfig) -> CliResult<()> {
    if cfg.encoder == EncoderKind::Adapter {
        return Err(usage(
            "encoder = adapter selects the external pretrained-encoder interface; \
             no adapter implementation ships with this build (see ImageTextEncoder)",
        ));
    }
    Ok(())
}

fn data_root(cfg: &RunConfig, flag: &Option<PathBuf>) -> CliResult<PathBuf> {
    if let Some(p) = flag {
        return Ok(p.clone());
    }
    if let Some(p) = &cfg.data_root {
        return Ok(PathBuf::from(p));
    }
    Err(usage("no dataset root: pass --data or set data_root in the config"))
}

// ---- gen-synth --------------------------------------------------------------

#[derive(Args)]
struct GenSynthArgs {
    /// Output dataset root directory.
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    train: usize,
    #[arg(long, default_value_t = 0)]
    val: usize,
    #[arg(long, default_value_t = 0)]
    test: usize,
    #[arg(long, default_value_t = 2)]
    min_objects: usize,
    #[arg(long, default_value_t = 4)]
    max_objects: usize,
    #[arg(long, default_value_t = 4)]
    size_min: usize,
    #[arg(long, default_value_t = 6)]
    size_max: usize,
    #[arg(long, default_value_t = 4)]
    grid: usize,
    #[arg(long, default_value_t = 1)]
    jitter: usize,
    #[command(flatten)]
    config: ConfigArgs,
}

fn cmd_gen_synth(args: &GenSynthArgs) -> CliResult<()> {
    let cfg = args.config.resolve()?;
    let spec = SyntheticSceneSpec {
        canvas: cfg.image_size,
        min_objects: args.min_objects,
        max_objects: args.max_objects,
        size_range: (args.size_min, args.size_max),
        grid: args.grid,
        jitter: args.jitter,
        seed: cfg.seed,
        ..Default::default()
    };
    spec.validate().map_err(CliError::from)?;
    let plan: Vec<(&str, usize)> = [("train", args.train), ("val", args.val), ("test", args.test)]
        .into_iter()
        .filter(|(_, n)| *n > 0)
        .collect();
    if plan.is_empty() {
        return Err(usage("nothing to generate: pass --train/--val/--test counts"));
    }
    let summary = generate_dataset(&spec, &plan, &args.out_dir).map_err(CliError::from)?;
    println!(
        "generated {} scenes ({} records) into {}; skipped {}",
        summary.scenes_written,
        summary.records_written,
        args.out_dir.display(),
        summary.scenes_skipped
    );
    if summary.skip_fraction() > 0.10 {
        return Err(CliError::Runtime(format!(
            "skipped {:.1}% of scenes (> 10%): placement constraints too tight",
            summary.skip_fraction() * 100.0
        )));
    }
    Ok(())
}

// ---- train-step1 ------------------------------------------------------------

#[derive(Args)]
struct TrainStep1Args {
    /// Dataset root (overrides config data_root).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long, default_value = "step1.ckpt")]
    out: PathBuf,
    /// Resume from an existing step-1 checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

fn print_epoch(log: &EpochLog) {
    println!(
        "epoch {:>3}: lambda*L_cls {:>10.6}  L_cal {:>10.6}  total {:>10.6}  lr {:.3e}",
        log.epoch, log.weighted_cls, log.calibration, log.total, log.lr
    );
}

fn cmd_train_step1(args: &TrainStep1Args) -> CliResult<()> {
    let resume = match &args.resume {
        Some(p) => {
            let ck = load_checkpoint(p).map_err(CliError::from)?;
            if ck.kind != "step1" {
                return Err(usage(format!("{} is a {} checkpoint", p.display(), ck.kind)));
            }
            Some(ck)
        }
        None => None,
    };
    let cfg = match &resume {
        Some(ck) => args.config.resolve_over(&ck.config)?,
        None => args.config.resolve()?,
    };
    ensure_toy_encoder(&cfg)?;
    let root = data_root(&cfg, &args.data)?;
    let dataset = Dataset::load(&root, "train").map_err(CliError::from)?;
    for w in &dataset.warnings {
        eprintln!("warning: {w}");
    }
    let trained = train_step1(&cfg, &dataset, resume.as_ref(), Some(&mut print_epoch))
        .map_err(CliError::from)?;
    save_checkpoint(
        &args.out,
        "step1",
        &cfg,
        trained.vocab.words(),
        &trained.store,
        Some(&trained.optimizer),
        trained.epoch,
        trained.global_step,
    )
    .map_err(CliError::from)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

// ---- gen-pseudo -------------------------------------------------------------

#[derive(Args)]
struct GenPseudoArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for masks and the sidecar index.
    #[arg(long)]
    out: PathBuf,
    /// Dataset split to label.
    #[arg(long, default_value = "train")]
    split: String,
    #[command(flatten)]
    config: ConfigArgs,
}

fn load_step1(path: &Path, cfg: &RunConfig) -> CliResult<(Checkpoint, Step1Model, Vocab)> {
    if !path.is_file() {
        return Err(usage(format!("checkpoint {} does not exist", path.display())));
    }
    let ck = load_checkpoint(path).map_err(CliError::from)?;
    if ck.kind != "step1" {
        return Err(usage(format!("{} is a {} checkpoint, need step1", path.display(), ck.kind)));
    }
    let vocab = Vocab::from_words(ck.vocab.clone());
    let model = Step1Model::from_config(cfg, vocab.len()).map_err(CliError::from)?;
    Ok((ck, model, vocab))
}

fn cmd_gen_pseudo(args: &GenPseudoArgs) -> CliResult<()> {
    if !args.checkpoint.is_file() {
        return Err(usage(format!("checkpoint {} does not exist", args.checkpoint.display())));
    }
    let ck = load_checkpoint(&args.checkpoint).map_err(CliError::from)?;
    let cfg = args.config.resolve_over(&ck.config)?;
    ck.check_structural(&cfg).map_err(CliError::from)?;
    ensure_toy_encoder(&cfg)?;
    let (ck, model, vocab) = load_step1(&args.checkpoint, &cfg)?;
    let root = data_root(&cfg, &args.data)?;
    let dataset = Dataset::load(&root, &args.split).map_err(CliError::from)?;
    let summary = generate_pseudo_labels(&cfg, &model, &ck.params, &dataset, &vocab, &args.out)
        .map_err(CliError::from)?;
    println!(
        "wrote {} pseudo labels to {} ({} degenerate, {:.1}%)",
        summary.total,
        args.out.display(),
        summary.degenerate,
        summary.degenerate_fraction() * 100.0
    );
    if summary.degenerate_fraction() > 0.5 {
        return Err(CliError::Runtime(format!(
            "{:.1}% of pseudo labels are degenerate (> 50%)",
            summary.degenerate_fraction() * 100.0
        )));
    }
    Ok(())
}

// ---- train-step2 ------------------------------------------------------------

#[derive(Args)]
struct TrainStep2Args {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Pseudo-label directory from gen-pseudo.
    #[arg(long)]
    pseudo: PathBuf,
    #[arg(long, default_value = "step2.ckpt")]
    out: PathBuf,
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

fn cmd_train_step2(args: &TrainStep2Args) -> CliResult<()> {
    let resume = match &args.resume {
        Some(p) => {
            let ck = load_checkpoint(p).map_err(CliError::from)?;
            if ck.kind != "step2" {
                return Err(usage(format!("{} is a {} checkpoint", p.display(), ck.kind)));
            }
            Some(ck)
        }
        None => None,
    };
    let cfg = match &resume {
        Some(ck) => args.config.resolve_over(&ck.config)?,
        None => args.config.resolve()?,
    };
    ensure_toy_encoder(&cfg)?;
    let root = data_root(&cfg, &args.data)?;
    let dataset = Dataset::load(&root, "train").map_err(CliError::from)?;
    let trained = train_step2(&cfg, &dataset, &args.pseudo, resume.as_ref(), Some(&mut print_epoch))
        .map_err(CliError::from)?;
    save_checkpoint(
        &args.out,
        "step2",
        &cfg,
        trained.vocab.words(),
        &trained.store,
        Some(&trained.optimizer),
        trained.epoch,
        trained.global_step,
    )
    .map_err(CliError::from)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

// ---- eval ---------------------------------------------------------------------

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate (step1 or step2).
    #[arg(long, conflicts_with = "pseudo")]
    checkpoint: Option<PathBuf>,
    /// Pseudo-label directory to evaluate instead of a checkpoint.
    #[arg(long)]
    pseudo: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "val")]
    split: String,
    /// Report path prefix; writes `<prefix>.jsonl` and `<prefix>.json`.
    #[arg(long, default_value = "eval_report")]
    report: PathBuf,
    /// Evaluate even if the checkpoint snapshot disagrees on structural keys.
    #[arg(long, default_value_t = false)]
    force: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    let (report, cfg) = match (&args.checkpoint, &args.pseudo) {
        (Some(ckpath), None) => {
            if !ckpath.is_file() {
                return Err(usage(format!("checkpoint {} does not exist", ckpath.display())));
            }
            let ck = load_checkpoint(ckpath).map_err(CliError::from)?;
            let cfg = args.config.resolve_over(&ck.config)?;
            if !args.force {
                ck.check_structural(&cfg).map_err(CliError::from)?;
            }
            ensure_toy_encoder(&cfg)?;
            let root = data_root(&cfg, &args.data)?;
            let dataset = Dataset::load(&root, &args.split).map_err(CliError::from)?;
            let vocab = Vocab::from_words(ck.vocab.clone());
            let report = match ck.kind.as_str() {
                "step1" => {
                    let model =
                        Step1Model::from_config(&cfg, vocab.len()).map_err(CliError::from)?;
                    eval_step1_maps(&cfg, &model, &ck.params, &dataset, &vocab)
                        .map_err(CliError::from)?
                }
                "step2" => {
                    let mut scratch = refseg_core::params::ParamStore::new();
                    let model = Step2Model::init(&mut scratch, &cfg, vocab.len(), "step2")
                        .map_err(CliError::from)?;
                    eval_step2_model(&model, &ck.params, &dataset, &vocab)
                        .map_err(CliError::from)?
                }
                other => return Err(usage(format!("unknown checkpoint kind '{other}'"))),
            };
            (report, cfg)
        }
        (None, Some(pseudo)) => {
            let cfg = args.config.resolve()?;
            let root = data_root(&cfg, &args.data)?;
            let dataset = Dataset::load(&root, &args.split).map_err(CliError::from)?;
            (eval_pseudo_dir(pseudo, &dataset).map_err(CliError::from)?, cfg)
        }
        _ => return Err(usage("pass exactly one of --checkpoint or --pseudo")),
    };

    println!("{}", report.summary_table());
    let jsonl_path = args.report.with_extension("jsonl");
    std::fs::write(&jsonl_path, report.to_jsonl()).map_err(|e| CliError::Runtime(e.to_string()))?;
    let summary = serde_json::json!({
        "metrics": {
            "mean_iou": report.mean_iou,
            "overall_iou": report.overall_iou,
            "prec_at_05": report.prec_at_05,
            "point_it": report.point_it,
            "point_m": report.point_m,
            "acc_box": report.acc_box,
            "sample_count": report.sample_count,
        },
        "config": cfg.to_json(),
    });
    let json_path = args.report.with_extension("json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&summary).unwrap())
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("wrote {} and {}", jsonl_path.display(), json_path.display());
    Ok(())
}

// ---- visualize ----------------------------------------------------------------

#[derive(Args)]
struct VisualizeArgs {
    /// Step-1 checkpoint for the response heatmap panel.
    #[arg(long)]
    step1: Option<PathBuf>,
    /// Step-2 checkpoint for the predicted-mask panel.
    #[arg(long)]
    step2: Option<PathBuf>,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    expression: String,
    #[arg(long, default_value = "visualization.png")]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

fn cmd_visualize(args: &VisualizeArgs) -> CliResult<()> {
    use refseg_core::viz::{compose_panels, draw_cross, render_heatmap, render_mask};
    if args.step1.is_none() && args.step2.is_none() {
        return Err(usage("pass --step1 and/or --step2 checkpoints"));
    }
    for p in [&args.step1, &args.step2].into_iter().flatten() {
        if !p.is_file() {
            return Err(usage(format!("checkpoint {} does not exist", p.display())));
        }
    }
    let image = refseg_core::data::load_image_file(&args.image).map_err(CliError::from)?;
    let mut panels = vec![image.pixels().clone()];

    if let Some(p) = &args.step1 {
        let ck = load_checkpoint(p).map_err(CliError::from)?;
        if ck.kind != "step1" {
            return Err(usage(format!("{} is not a step1 checkpoint", p.display())));
        }
        let cfg = args.config.resolve_over(&ck.config)?;
        let vocab = Vocab::from_words(ck.vocab.clone());
        let model = Step1Model::from_config(&cfg, vocab.len()).map_err(CliError::from)?;
        let tokens = tokenize(&vocab, &args.expression).map_err(CliError::from)?;
        let rmap = model
            .response_for_query(&ck.params, &image, &tokens)
            .map_err(CliError::from)?;
        let (mut heat, peak) =
            render_heatmap(&rmap.column_2d(0), image.height(), image.width());
        draw_cross(&mut heat, peak.0, peak.1, [1.0, 1.0, 1.0], 3);
        panels.push(heat);
    }

    if let Some(p) = &args.step2 {
        let ck = load_checkpoint(p).map_err(CliError::from)?;
        if ck.kind != "step2" {
            return Err(usage(format!("{} is not a step2 checkpoint", p.display())));
        }
        let cfg = args.config.resolve_over(&ck.config)?;
        let vocab = Vocab::from_words(ck.vocab.clone());
        let mut scratch = refseg_core::params::ParamStore::new();
        let model =
            Step2Model::init(&mut scratch, &cfg, vocab.len(), "step2").map_err(CliError::from)?;
        let tokens = tokenize(&vocab, &args.expression).map_err(CliError::from)?;
        let seg = model
            .forward(&ck.params, &image, &tokens)
            .map_err(CliError::from)?;
        panels.push(render_mask(&predict_mask(&seg)));
    }

    let composed = compose_panels(&panels, 2);
    refseg_core::data::save_image_file(&args.out, &composed).map_err(CliError::from)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::GenSynth(a) => cmd_gen_synth(a),
        Cmd::TrainStep1(a) => cmd_train_step1(a),
        Cmd::GenPseudo(a) => cmd_gen_pseudo(a),
        Cmd::TrainStep2(a) => cmd_train_step2(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Visualize(a) => cmd_visualize(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
