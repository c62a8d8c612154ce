//! `gescf` command-line entry point.
//!
//! Exit codes: 0 success, 2 usage or input error, 1 internal failure.

mod backend;
mod render;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gescf::bench::{emit_report, run_eval, score_external, snapshot, EvalReport};
use gescf::config::{BackendKind, OutFormat, PipelineConfig};
use gescf::data::{load_dataset, read_image, write_mask, GtKind, Layout};
use gescf::metrics::AverageMode;
use gescf::{detect_changes_detailed, Error, RegistrationMode};
use serde_json::json;

#[derive(Parser)]
#[command(name = "gescf", version, about = "Zero-shot scene change detection")]
struct Cli {
    #[command(flatten)]
    global: Global,

    #[command(subcommand)]
    command: Command,
}

/// Flags overriding the config file.
#[derive(Args)]
struct Global {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Feature backend: synthetic | vith-adapter.
    #[arg(long, global = true)]
    backend: Option<BackendKind>,

    /// Encoder weights (safetensors) for the vith-adapter backend.
    #[arg(long, global = true)]
    weights: Option<PathBuf>,

    /// Registration mode: none | homography.
    #[arg(long, global = true)]
    register: Option<RegistrationMode>,

    #[arg(long, global = true)]
    ransac_iters: Option<usize>,

    #[arg(long, global = true)]
    ransac_thresh_px: Option<f64>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Ground truth to score against: fwd | bwd | inter.
    #[arg(long, global = true)]
    gt: Option<GtKind>,

    /// Per-dataset pooling: macro | micro.
    #[arg(long, global = true)]
    average: Option<AverageMode>,

    /// Report formats, comma separated: json, csv, md.
    #[arg(long, global = true, value_delimiter = ',')]
    out_format: Option<Vec<OutFormat>>,

    /// Also write the similarity heatmap, pseudo-mask and proposal overlay.
    #[arg(long, global = true)]
    emit_intermediates: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Detect changes between two images and write the change mask.
    Detect {
        img0: PathBuf,
        img1: PathBuf,
        /// Output mask PNG.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Evaluate on one or more datasets (one report row per dataset).
    Evaluate {
        #[arg(required = true)]
        roots: Vec<PathBuf>,
        /// Directory layout: scd | changevpr.
        #[arg(long, default_value = "scd")]
        layout: Layout,
        /// Directory for report files; stdout only when absent.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Write `<id>_fwd.png` / `<id>_bwd.png` predictions here (one
        /// subdirectory per dataset).
        #[arg(long)]
        save_predictions: Option<PathBuf>,
    },
    /// Score third-party predictions stored as `<id>_fwd.png` / `<id>_bwd.png`.
    ScoreExternal {
        /// Prediction directory.
        pred: PathBuf,
        /// Dataset root.
        root: PathBuf,
        #[arg(long, default_value = "scd")]
        layout: Layout,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Write a synthetic fixture dataset.
    MakeFixture {
        root: PathBuf,
        #[arg(long, default_value = "scd")]
        layout: Layout,
        #[arg(long, default_value_t = 6)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Core(e) if e.is_input_error() => 2,
            Failure::Core(_) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => f.write_str(m),
            Failure::Core(e) => write!(f, "{e}"),
        }
    }
}

fn effective_config(g: &Global) -> Result<PipelineConfig, Failure> {
    let mut cfg = match &g.config {
        Some(p) => PipelineConfig::from_file(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(b) = g.backend {
        cfg.backend = b;
    }
    if let Some(w) = &g.weights {
        cfg.weights_path = Some(w.clone());
    }
    if let Some(m) = g.register {
        cfg.registration.mode = m;
    }
    if let Some(n) = g.ransac_iters {
        cfg.registration.ransac_iters = n;
    }
    if let Some(t) = g.ransac_thresh_px {
        cfg.registration.ransac_thresh_px = t;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(gt) = g.gt {
        cfg.eval.gt = gt;
    }
    if let Some(a) = g.average {
        cfg.eval.average = a;
    }
    if let Some(f) = &g.out_format {
        cfg.output.formats = f.clone();
    }
    if g.emit_intermediates {
        cfg.output.emit_intermediates = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Writes to stdout; a closed pipe is not an error.
fn emit(text: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes());
    if !text.ends_with('\n') {
        let _ = out.write_all(b"\n");
    }
}

fn create_dir(p: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(p).map_err(|e| {
        Failure::Core(Error::Io {
            path: p.to_owned(),
            source: e,
        })
    })
}

fn write_file(p: &Path, bytes: &[u8]) -> Result<(), Failure> {
    std::fs::write(p, bytes).map_err(|e| {
        Failure::Core(Error::Io {
            path: p.to_owned(),
            source: e,
        })
    })
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("change");
    out.with_file_name(format!("{stem}_{suffix}.png"))
}

fn cmd_detect(cfg: &PipelineConfig, img0: &Path, img1: &Path, out: &Path) -> Result<(), Failure> {
    let a = read_image(img0)?;
    let b = read_image(img1)?;
    if !a.same_size(&b) {
        return Err(Failure::Usage(format!(
            "{} is {}x{} but {} is {}x{}",
            img0.display(),
            a.width(),
            a.height(),
            img1.display(),
            b.width(),
            b.height()
        )));
    }
    let backend = backend::build(cfg)?;
    let d = detect_changes_detailed(backend.as_ref(), &a, &b, cfg)?;
    write_mask(&d.change.mask, out)?;
    let mut written = vec![out.to_owned()];
    if cfg.output.emit_intermediates {
        let paths = [
            sibling(out, "similarity"),
            sibling(out, "pseudo"),
            sibling(out, "proposals"),
        ];
        render::heatmap(&d.similarity).save(&paths[0]).map_err(|source| Error::ImageIo {
            path: paths[0].clone(),
            source,
        })?;
        write_mask(&d.pseudo.mask, &paths[1])?;
        let kept: Vec<_> = d
            .change
            .retained
            .iter()
            .map(|r| match r.source {
                gescf::matching::Epoch::T0 => d.proposals_t0[r.index].mask(),
                gescf::matching::Epoch::T1 => d.proposals_t1[r.index].mask(),
            })
            .collect();
        render::overlay(&a, &kept).save(&paths[2]).map_err(|source| Error::ImageIo {
            path: paths[2].clone(),
            source,
        })?;
        written.extend(paths);
    }
    let summary = json!({
        "backend_id": backend.id(),
        "changed_pixels": d.change.mask.count(),
        "retained": d.change.retained,
        "used_fallback": d.change.used_fallback,
        "pseudo": { "skew": d.pseudo.skew, "threshold": d.pseudo.threshold_used, "branch": d.pseudo.branch },
        "registration": d.registration,
        "outputs": written,
        "config": cfg,
    });
    emit(&serde_json::to_string_pretty(&summary).expect("serializable"));
    Ok(())
}

fn write_reports(report: &EvalReport, cfg: &PipelineConfig, out_dir: Option<&Path>) -> Result<(), Failure> {
    if let Some(dir) = out_dir {
        create_dir(dir)?;
        for f in &cfg.output.formats {
            write_file(&dir.join(format!("report.{}", f.extension())), &emit_report(report, *f))?;
        }
    }
    emit(&String::from_utf8(emit_report(report, OutFormat::Md)).expect("utf-8"));
    Ok(())
}

fn cmd_evaluate(
    cfg: &PipelineConfig,
    roots: &[PathBuf],
    layout: Layout,
    out_dir: Option<&Path>,
    save: Option<&Path>,
) -> Result<(), Failure> {
    let manifests = roots
        .iter()
        .map(|r| load_dataset(r, layout))
        .collect::<Result<Vec<_>, _>>()?;
    let backend = backend::build(cfg)?;
    let mut rows = Vec::with_capacity(manifests.len());
    for m in &manifests {
        let dir = save.map(|s| s.join(&m.name));
        if let Some(d) = &dir {
            create_dir(d)?;
        }
        rows.push(run_eval(backend.as_ref(), m, cfg, dir.as_deref()));
    }
    let report = EvalReport::new(rows, snapshot(backend.id(), cfg));
    write_reports(&report, cfg, out_dir)
}

fn cmd_score_external(
    cfg: &PipelineConfig,
    pred: &Path,
    root: &Path,
    layout: Layout,
    out_dir: Option<&Path>,
) -> Result<(), Failure> {
    if !pred.is_dir() {
        return Err(Failure::Usage(format!(
            "prediction directory {} does not exist",
            pred.display()
        )));
    }
    let m = load_dataset(root, layout)?;
    let row = score_external(pred, &m, cfg.eval.gt, cfg.eval.average)?;
    let report = EvalReport::new(vec![row], snapshot("external", cfg));
    write_reports(&report, cfg, out_dir)
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Command::MakeFixture {
        root,
        layout,
        count,
        size,
        seed,
    } = &cli.command
    {
        if *count == 0 || *size < 16 {
            return Err(Failure::Usage("--count must be >= 1 and --size >= 16".into()));
        }
        match layout {
            Layout::Scd => gescf::fixtures::write_scd_fixture(root, *count, *size, *seed)?,
            Layout::Changevpr => gescf::fixtures::write_changevpr_fixture(root, *count, *size, *seed)?,
        }
        emit(&format!("wrote {count} pairs to {}", root.display()));
        return Ok(());
    }
    let cfg = effective_config(&cli.global)?;
    match &cli.command {
        Command::Detect { img0, img1, out } => cmd_detect(&cfg, img0, img1, out),
        Command::Evaluate {
            roots,
            layout,
            out_dir,
            save_predictions,
        } => cmd_evaluate(&cfg, roots, *layout, out_dir.as_deref(), save_predictions.as_deref()),
        Command::ScoreExternal {
            pred,
            root,
            layout,
            out_dir,
        } => cmd_score_external(&cfg, pred, root, *layout, out_dir.as_deref()),
        Command::MakeFixture { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
