//! Subcommand implementations behind the `smart-kit` binary. Each returns
//! `Ok(())` on success; the binary maps errors to exit code 1.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Subcommand};

use crate::config::RunConfig;
use crate::encoder::{self, AdaptedEncoder};
use crate::error::{Error, Result};
use crate::eval::{load_predictions, render_report, split_report, ReportFormat};
use crate::qtype::{classify_all, ClassificationRecord, ExecBackend, RuleBackend, TypeBackend};
use crate::scene::{load_icon_library, synth_dataset, IconLibrary, INDEX_FILE};
use crate::template::{
    build_model_input, ingest_detections, ingest_ocr, parse_model_input, ModelInput, TemplateRecord,
};
use crate::types::{load_instances, load_manifest, PuzzleInstance};

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render synthetic icon scenes with detector labels.
    Synth(SynthArgs),
    /// Assign a question type to every puzzle by majority vote.
    Classify(ClassifyArgs),
    /// Build model-input template strings for every instance.
    Template(TemplateArgs),
    /// Train type-routed adapters on the toy counting task.
    Train(TrainArgs),
    /// Score a predictions file with weighted option selection accuracy.
    Eval(EvalArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Icon library: one subdirectory of PNGs per class.
    #[arg(long)]
    pub icons: PathBuf,
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    /// Instances JSON-lines file.
    #[arg(long)]
    pub instances: PathBuf,
    /// `rule` or `exec:PATH`.
    #[arg(long)]
    pub backend: Option<String>,
    /// Instances sampled per puzzle.
    #[arg(long)]
    pub k: Option<usize>,
    /// Output JSON-lines file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TemplateArgs {
    #[arg(long)]
    pub instances: PathBuf,
    /// Classification records from `classify`.
    #[arg(long = "types")]
    pub classifications: PathBuf,
    /// Directory of `<image stem>.json` detection files.
    #[arg(long)]
    pub detections: Option<PathBuf>,
    /// Directory of `<image stem>.json` OCR files.
    #[arg(long)]
    pub ocr: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Re-parse every template and fail on any mismatch.
    #[arg(long)]
    pub verify: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Icon library; the built-in glyph set when omitted.
    #[arg(long)]
    pub icons: Option<PathBuf>,
    /// Scenes in the counting task.
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Train the head only, with adapters left at zero.
    #[arg(long)]
    pub head_only: bool,
    /// Directory for `checkpoint.json` and `report.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// `table` or `json`.
    #[arg(long, default_value = "table")]
    pub format: String,
    /// Also write the JSON report here.
    #[arg(long)]
    pub json_out: Option<PathBuf>,
    /// Row label in the table.
    #[arg(long, default_value = "ours")]
    pub method: String,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub cases: Option<usize>,
    #[arg(long)]
    pub eps: Option<f64>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const REPORT_FILE: &str = "report.json";

/// Glyph recolorings used when no icon directory is given.
pub const PROCEDURAL_VARIANTS: usize = 4;

pub fn run(cmd: &Command, cfg: &RunConfig) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a, cfg),
        Command::Classify(a) => classify(a, cfg),
        Command::Template(a) => template(a, cfg),
        Command::Train(a) => train(a, cfg),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a, cfg),
    }
}

/// Writes to `path`, or to stdout when `None`.
fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Error::io("<stdout>", e)),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn jsonl<T: serde::Serialize>(records: &[T]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

pub fn synth(a: &SynthArgs, cfg: &RunConfig) -> Result<()> {
    let lib = load_icon_library(&a.icons)?;
    let index = synth_dataset(a.count, &cfg.scene, &lib, cfg.seed, &a.out, cfg.jobs)?;
    println!("{}", a.out.join(INDEX_FILE).display());
    println!(
        "scenes: {}  annotations: {}  skipped: {}",
        index.scenes.len(),
        index.total_annotations,
        index.total_skipped
    );
    Ok(())
}

pub fn make_backend(spec: &str, args: &[String]) -> Result<Box<dyn TypeBackend>> {
    match spec.split_once(':') {
        None if spec == "rule" => Ok(Box::new(RuleBackend)),
        Some(("exec", path)) if !path.is_empty() => Ok(Box::new(ExecBackend::new(path, args.to_vec()))),
        _ => Err(Error::invalid(
            "backend",
            format!("`{spec}` (use rule or exec:PATH)"),
        )),
    }
}

pub fn classify(a: &ClassifyArgs, cfg: &RunConfig) -> Result<()> {
    let backend_spec = a.backend.as_deref().unwrap_or(&cfg.classify.backend);
    let k = a.k.unwrap_or(cfg.classify.k);
    let backend = make_backend(backend_spec, &cfg.classify.backend_args)?;
    let instances = load_instances(&a.instances)?;
    let records = classify_all(backend.as_ref(), &instances, k, cfg.seed, &cfg.types)?;
    for r in &records {
        log::info!(
            "puzzle {}: {} ({} unparseable)",
            r.puzzle_id,
            r.qtype,
            r.unparseable
        );
    }
    emit(a.out.as_deref(), &jsonl(&records))
}

fn load_classifications(path: &Path) -> Result<BTreeMap<u64, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let r: ClassificationRecord = serde_json::from_str(line)
            .map_err(|e| Error::json(format!("{}:{}", path.display(), n + 1), e))?;
        out.insert(r.puzzle_id, r.qtype);
    }
    Ok(out)
}

fn image_stem(inst: &PuzzleInstance) -> Result<String> {
    inst.image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| {
            Error::invalid(
                "instance",
                format!(
                    "{}/{}: image path has no file name",
                    inst.puzzle_id, inst.instance_id
                ),
            )
        })
}

fn template_for(a: &TemplateArgs, cfg: &RunConfig, inst: &PuzzleInstance, qtype: &str) -> Result<String> {
    let qtype = cfg.types.get(qtype)?;
    let stem = image_stem(inst)?;
    let side_file = |dir: &Option<PathBuf>| {
        dir.as_ref()
            .map(|d| d.join(format!("{stem}.json")))
            .filter(|p| p.exists())
    };
    let detections = match side_file(&a.detections) {
        Some(p) => {
            let f = ingest_detections(&p)?;
            if f.dropped > 0 {
                log::warn!("{}: dropped {} empty boxes", p.display(), f.dropped);
            }
            f.detections
        }
        None => Vec::new(),
    };
    let ocr = match side_file(&a.ocr) {
        Some(p) => {
            let f = ingest_ocr(&p)?;
            if f.dropped > 0 {
                log::warn!("{}: dropped {} empty boxes", p.display(), f.dropped);
            }
            f.spans
        }
        None => Vec::new(),
    };
    let mi = ModelInput::assemble(qtype, &detections, &ocr, &inst.question, inst.options.clone());
    let text = build_model_input(&mi);
    if a.verify {
        let back = parse_model_input(&text, &cfg.types)?;
        if back != mi {
            return Err(Error::invalid("template", "does not round-trip"));
        }
    }
    Ok(text)
}

pub fn template(a: &TemplateArgs, cfg: &RunConfig) -> Result<()> {
    let instances = load_instances(&a.instances)?;
    let types = load_classifications(&a.classifications)?;
    let records = instances
        .iter()
        .map(|inst| {
            let tag = |e: Error| {
                Error::invalid(
                    "instance",
                    format!("puzzle {} instance {}: {e}", inst.puzzle_id, inst.instance_id),
                )
            };
            let qtype = types
                .get(&inst.puzzle_id)
                .ok_or_else(|| tag(Error::invalid("classification", "no record for this puzzle")))?;
            Ok(TemplateRecord {
                puzzle_id: inst.puzzle_id,
                instance_id: inst.instance_id,
                template: template_for(a, cfg, inst, qtype).map_err(tag)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    log::info!(
        "{} templates{}",
        records.len(),
        if a.verify { ", all verified" } else { "" }
    );
    emit(a.out.as_deref(), &jsonl(&records))
}

pub fn train(a: &TrainArgs, cfg: &RunConfig) -> Result<()> {
    let lib = match &a.icons {
        Some(dir) => load_icon_library(dir)?,
        None => IconLibrary::procedural(PROCEDURAL_VARIANTS),
    };
    let scenes = a.scenes.unwrap_or(cfg.counting_scenes);
    let mut tc = cfg.train.clone();
    if let Some(s) = a.steps {
        tc.steps = s;
    }
    if let Some(lr) = a.lr {
        tc.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        tc.batch_size = b;
    }
    if a.head_only {
        tc.train_adapters = false;
    }
    tc.validate()?;

    let data = encoder::make_counting_task(
        &lib,
        scenes,
        crate::rng::derive_seed(cfg.seed, 1),
        &cfg.encoder,
        &cfg.types,
        &cfg.counting,
    )?;
    log::info!(
        "counting task: {} train / {} val",
        data.train.len(),
        data.val.len()
    );
    let mut enc = AdaptedEncoder::init(&cfg.encoder, &cfg.types, crate::rng::derive_seed(cfg.seed, 0))?;

    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let report_path = a.out.join(REPORT_FILE);
    let report = match encoder::train(&mut enc, &data, &tc) {
        Ok(r) => r,
        Err(Error::Diverged { step, loss, report }) => {
            write_json(&report_path, &report)?;
            return Err(Error::Diverged { step, loss, report });
        }
        Err(e) => return Err(e),
    };
    write_json(&report_path, &report)?;
    encoder::save_checkpoint(&enc, &a.out.join(CHECKPOINT_FILE))?;
    println!(
        "final loss {:.4}  train acc {:.2}%  val acc {}  backbone {}",
        report.final_loss,
        100.0 * report.train_accuracy,
        report
            .val_accuracy
            .map_or_else(|| "-".into(), |v| format!("{:.2}%", 100.0 * v)),
        if report.backbone_checksum_before == report.backbone_checksum_after {
            "unchanged"
        } else {
            "CHANGED"
        }
    );
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let format: ReportFormat = a.format.parse()?;
    let manifest = load_manifest(&a.manifest)?;
    let records = load_predictions(&a.predictions, &manifest)?;
    let report = split_report(&records, &manifest)?;
    print!("{}", render_report(&report, format, &a.method));
    if let Some(p) = &a.json_out {
        emit(Some(p), &render_report(&report, ReportFormat::Json, &a.method))?;
    }
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs, cfg: &RunConfig) -> Result<()> {
    let cases = a.cases.unwrap_or(cfg.gradcheck.cases);
    let eps = a.eps.unwrap_or(cfg.gradcheck.eps);
    let results = encoder::run_suite(cases, cfg.seed, eps)?;
    let mut worst = 0.0f64;
    for (i, r) in results.iter().enumerate() {
        println!(
            "case {i:3}: {:6} params  max rel err {:.3e}  ({})",
            r.checked, r.max_rel_error, r.worst_param
        );
        worst = worst.max(r.max_rel_error);
    }
    println!(
        "max relative error {worst:.3e} (tolerance {:.0e})",
        cfg.gradcheck.tolerance
    );
    if worst > cfg.gradcheck.tolerance || worst.is_nan() {
        return Err(Error::invalid(
            "gradient check",
            format!(
                "max relative error {worst:.3e} exceeds {:.0e}",
                cfg.gradcheck.tolerance
            ),
        ));
    }
    Ok(())
}
