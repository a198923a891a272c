use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::{info, warn};
use serde_json::json;

use zsl_core::dataset::{
    assemble_dataset, generate_synthetic, load_feature_file, make_split, write_feature_file,
    Assembly, ClassVectorSet, FeatureTable, Manifest, SplitSpec, SyntheticConfig,
};
use zsl_core::evaluator::{
    candidate_labels, evaluate, render_report, seen_class_eval, summarize, CandidateMode,
    EvalConfig, EvalReport, ReportFormat, SearchBackend,
};
use zsl_core::network::{load_checkpoint, save_checkpoint, Activation, ArchConfig, Model};
use zsl_core::semantic_space::{IndexOptions, NeighborSearch, SemanticIndex};
use zsl_core::trainer::{
    gradient_check, tiny_arch, train_with_observer, GradCheckProblem, TrainConfig,
};

use crate::*;

const LOCK_FILE: &str = ".zsl.lock";
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

/// Holds an exclusive advisory lock on `dir` until dropped.
struct DirLock(#[allow(dead_code)] File);

fn lock_dir(dir: &Path) -> Result<DirLock> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(LOCK_FILE);
    let file = File::options()
        .create(true)
        .truncate(false)
        .write(true)
        .open(&path)
        .with_context(|| format!("opening {}", path.display()))?;
    match file.try_lock() {
        Ok(()) => Ok(DirLock(file)),
        Err(fs::TryLockError::WouldBlock) => Err(exit(
            EXIT_USAGE,
            format!("{} is in use by another zsl process", dir.display()),
        )),
        Err(fs::TryLockError::Error(e)) => {
            Err(e).with_context(|| format!("locking {}", path.display()))
        }
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let out = a.out.unwrap_or(a.data_dir);
    let cfg = SyntheticConfig {
        nonnegative: a.nonnegative,
        ..SyntheticConfig::new(
            a.classes,
            a.image_dim,
            a.text_dim,
            a.sem_dim,
            a.per_class,
            a.noise,
            a.seed,
        )
    };
    let data = generate_synthetic(&cfg)?;
    let _lock = lock_dir(&out)?;
    write_feature_file(&data.images, out.join(IMAGES_FILE))?;
    write_feature_file(&data.texts, out.join(TEXTS_FILE))?;
    data.class_vectors.save(out.join(CLASS_VECTORS_FILE))?;
    data.manifest.save(out.join(MANIFEST_FILE))?;
    println!(
        "wrote {} classes, {} samples to {}",
        a.classes,
        data.images.len(),
        out.display()
    );
    Ok(())
}

fn load_cv(data: &DataArgs) -> Result<ClassVectorSet> {
    let path = data.class_vectors();
    ClassVectorSet::load(&path).with_context(|| format!("reading {}", path.display()))
}

fn load_manifest(data: &DataArgs) -> Result<Manifest> {
    let path = data.manifest();
    Manifest::load(&path).with_context(|| format!("reading {}", path.display()))
}

fn load_table(path: PathBuf) -> Result<FeatureTable> {
    load_feature_file(&path).with_context(|| format!("reading {}", path.display()))
}

fn load_split(data: &DataArgs) -> Result<SplitSpec> {
    let path = data.split();
    SplitSpec::load(&path).with_context(|| format!("reading {}", path.display()))
}

fn split(a: SplitArgs) -> Result<()> {
    let manifest = load_manifest(&a.data)?;
    let cv = load_cv(&a.data)?;
    let (kept, dropped): (Vec<&str>, Vec<&str>) = manifest.labels().partition(|l| cv.contains(l));
    for label in &dropped {
        warn!("class '{label}' has no class vector; dropped");
    }
    let spec = make_split(&kept, a.unseen, a.seed)?;
    let out = a.out.unwrap_or_else(|| a.data.split());
    let dir = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let _lock = lock_dir(&dir)?;
    spec.save(&out)?;
    println!(
        "seen={} unseen={} dropped={} -> {}",
        spec.seen_labels.len(),
        spec.unseen_labels.len(),
        dropped.len(),
        out.display()
    );
    Ok(())
}

fn assemble(data: &DataArgs) -> Result<(Assembly, ClassVectorSet)> {
    let split = load_split(data)?;
    let manifest = load_manifest(data)?;
    let cv = load_cv(data)?;
    let images = load_table(data.images())?;
    let texts = load_table(data.texts())?;
    let assembly = assemble_dataset(&images, &texts, &cv, &manifest, &split)?;
    for w in &assembly.warnings {
        warn!("{w}");
    }
    Ok((assembly, cv))
}

fn arch_config(a: &ArchArgs, n1: usize, n2: usize, sem: usize, seed: u64) -> Result<ArchConfig> {
    let mut arch = ArchConfig::tapered(n1, n2, sem, a.init_seed.unwrap_or(seed));
    if let Some(w) = &a.reducer {
        arch.reducer_widths = ArchConfig::parse_widths(w)?;
    }
    if let Some(w) = &a.trunk {
        arch.trunk_hidden = ArchConfig::parse_widths(w)?;
    }
    arch.semantic_activation = match a.semantic_activation {
        SemanticActivation::Relu => Activation::Relu,
        SemanticActivation::Linear => Activation::Linear,
    };
    if let Some(p) = a.reducer_dropout {
        arch.reducer_dropout = p;
    }
    if let Some(p) = a.trunk_dropout {
        arch.trunk_dropout = p;
    }
    arch.reducer_batchnorm = !a.no_batchnorm;
    arch.trainable_output = a.trainable_output;
    arch.validate()?;
    Ok(arch)
}

fn train_config(o: &OptimArgs, seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: o.lr,
        batch_size: o.batch,
        max_epochs: o.epochs,
        early_stop_patience: o.patience,
        seed,
        shuffle: !o.no_shuffle,
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let (assembly, cv) = assemble(&a.data)?;
    let data = assembly.train;
    let arch = arch_config(&a.arch, data.image_dim, data.text_dim, cv.dim(), a.seed)?;
    let config = train_config(&a.optim, a.seed);
    let out = a.out.clone().unwrap_or_else(|| a.data.run_dir());
    let _lock = lock_dir(&out)?;

    let mut model = zsl_core::network::init_model(&cv, &data.label_order, &arch)?;
    info!(
        "training on {} rows, {} classes, {} trainable parameters",
        data.len(),
        data.num_classes(),
        model.num_trainable()
    );
    let log_path = out.join("history.log");
    let mut log =
        File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let best_path = out.join(BEST_FILE);
    let history = train_with_observer(&mut model, &data, &config, |stats, model, is_best| {
        let line = stats.log_line();
        println!("{line}");
        writeln!(log, "{line}")?;
        if is_best {
            save_checkpoint(model, &best_path)?;
        }
        Ok(())
    });
    let history = match history {
        Ok(h) => h,
        Err(zsl_core::Error::Diverged { epoch, loss }) => {
            return Err(exit(
                EXIT_NUMERIC,
                format!("training diverged at epoch {epoch} (loss {loss}); try a lower --lr"),
            ))
        }
        Err(e) => return Err(e.into()),
    };
    save_checkpoint(&model, out.join(MODEL_FILE))?;
    let summary = json!({
        "arch": arch,
        "train": config,
        "epochs_run": history.epochs.len(),
        "stopped_early": history.stopped_early,
        "final_loss": history.final_loss(),
    });
    fs::write(
        out.join("train.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    println!(
        "epochs={} stopped_early={} checkpoint={}",
        history.epochs.len(),
        history.stopped_early,
        out.join(MODEL_FILE).display()
    );
    Ok(())
}

fn checkpoint_path(data: &DataArgs, explicit: &Option<PathBuf>) -> PathBuf {
    explicit
        .clone()
        .unwrap_or_else(|| data.run_dir().join(MODEL_FILE))
}

fn load_model(path: &Path) -> Result<Model<f32>> {
    require_file(path, EXIT_MISMATCH, "checkpoint")?;
    load_checkpoint(path).map_err(|e| match e {
        zsl_core::Error::Io(_)
        | zsl_core::Error::Format(_)
        | zsl_core::Error::Corrupt(_)
        | zsl_core::Error::Json(_) => exit(
            EXIT_MISMATCH,
            format!("unreadable checkpoint {}: {e}", path.display()),
        ),
        other => other.into(),
    })
}

fn check_compatible(model: &Model<f32>, assembly: &Assembly, cv: &ClassVectorSet) -> Result<()> {
    let mismatch = |msg: String| Err(exit(EXIT_MISMATCH, msg));
    let data = &assembly.train;
    if model.config.image_dim != data.image_dim || model.config.text_dim != data.text_dim {
        return mismatch(format!(
            "checkpoint expects features ({}, {}), data has ({}, {})",
            model.config.image_dim, model.config.text_dim, data.image_dim, data.text_dim
        ));
    }
    if model.semantic_dim() != cv.dim() {
        return mismatch(format!(
            "checkpoint semantic dim {} differs from class-vector dim {}",
            model.semantic_dim(),
            cv.dim()
        ));
    }
    if model.label_order != data.label_order {
        return mismatch("checkpoint was trained on a different set of seen classes".into());
    }
    Ok(())
}

fn parse_ks(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|k| {
            k.trim()
                .parse::<usize>()
                .map_err(|e| exit(EXIT_USAGE, format!("bad k '{k}': {e}")))
        })
        .collect()
}

fn emit(text: &str, out: &Option<PathBuf>) -> Result<()> {
    print!("{text}");
    if let Some(path) = out {
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = checkpoint_path(&a.data, &a.checkpoint);
    let model = load_model(&ckpt)?;
    let (assembly, cv) = assemble(&a.data)?;
    check_compatible(&model, &assembly, &cv)?;
    if a.repeats == 0 {
        return Err(exit(EXIT_USAGE, "--repeats must be at least 1"));
    }
    if a.repeats > 1 && a.mode != EvalMode::Seen {
        return Err(exit(EXIT_USAGE, "--repeats applies to --mode seen only"));
    }
    let format = match a.format {
        Format::Text => ReportFormat::Text,
        Format::Json => ReportFormat::Json,
    };
    let samples = a.samples || format == ReportFormat::Json;
    let base = EvalConfig {
        ks: parse_ks(&a.ks)?,
        candidate_mode: match a.mode {
            EvalMode::Unseen => CandidateMode::UnseenOnly,
            EvalMode::All => CandidateMode::AllClasses,
            EvalMode::Seen => CandidateMode::SeenOnly,
        },
        seen_holdout_fraction: a.holdout,
        seed: a.seed,
        normalize_class_vectors: a.normalize,
        search: if a.brute_force {
            SearchBackend::LinearScan
        } else {
            SearchBackend::KdTree
        },
    };

    if a.mode != EvalMode::Seen {
        let report = evaluate(&model, &assembly.zeroshot, &cv, &base)?;
        return emit(&render_report(&report, format, samples)?, &a.out);
    }

    let mut reports: Vec<EvalReport> = Vec::with_capacity(a.repeats);
    for r in 0..a.repeats as u64 {
        let seed = a.seed + r;
        let config = EvalConfig {
            seed,
            ..base.clone()
        };
        let arch = ArchConfig {
            seed: model.config.seed + r,
            ..model.config.clone()
        };
        let outcome = seen_class_eval(
            &arch,
            &train_config(&a.optim, seed),
            &assembly.train,
            &cv,
            &config,
        )?;
        info!(
            "repeat {}: trained on {} rows for {} epochs, {} held out",
            r + 1,
            outcome.train_rows,
            outcome.history.epochs.len(),
            outcome.holdout_rows
        );
        reports.push(outcome.report);
    }
    if reports.len() == 1 {
        return emit(&render_report(&reports[0], format, samples)?, &a.out);
    }
    let summary = summarize(&reports);
    let text = match format {
        ReportFormat::Json => {
            let summary: BTreeMap<_, BTreeMap<_, _>> = summary
                .iter()
                .map(|(mode, ks)| {
                    let ks = ks
                        .iter()
                        .map(|(k, (mean, sd))| (k.clone(), json!({"mean": mean, "sd": sd})))
                        .collect();
                    (mode.clone(), ks)
                })
                .collect();
            let reports = serde_json::to_value(&reports)?;
            serde_json::to_string_pretty(&json!({"repeats": reports, "summary": summary}))? + "\n"
        }
        ReportFormat::Text => {
            let mut s = String::new();
            for r in &reports {
                s.push_str(&render_report(r, format, a.samples)?);
                s.push('\n');
            }
            s.push_str(&format!("mean ± sd over {} repeats\n", reports.len()));
            for (mode, ks) in &summary {
                let cells: Vec<String> = base
                    .ks
                    .iter()
                    .filter_map(|k| {
                        ks.get(&format!("top{k}"))
                            .map(|(m, sd)| format!("top-{k} {:.2}±{:.2}%", m * 100.0, sd * 100.0))
                    })
                    .collect();
                s.push_str(&format!("{mode:<13} {}\n", cells.join("  ")));
            }
            s
        }
    };
    emit(&text, &a.out)
}

fn parse_vector(s: &str, what: &str) -> Result<Vec<f32>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f32>()
                .map_err(|e| exit(EXIT_USAGE, format!("bad {what} component '{v}': {e}")))
        })
        .collect()
}

fn predict(a: PredictArgs) -> Result<()> {
    let model = load_model(&checkpoint_path(&a.data, &a.checkpoint))?;
    let cv = load_cv(&a.data)?;
    if cv.dim() != model.semantic_dim() {
        return Err(exit(
            EXIT_MISMATCH,
            format!(
                "class vectors have dim {}, checkpoint predicts {}",
                cv.dim(),
                model.semantic_dim()
            ),
        ));
    }

    let image = match (&a.image_id, &a.image_vector) {
        (Some(id), _) => {
            let images = load_table(a.data.images())?;
            images
                .get(id)
                .map(<[f32]>::to_vec)
                .ok_or_else(|| exit(EXIT_USAGE, format!("unknown image id '{id}'")))?
        }
        (None, Some(v)) => parse_vector(v, "image")?,
        (None, None) => return Err(exit(EXIT_USAGE, "give --image-id or --image-vector")),
    };
    let text = match (&a.text_id, &a.text_vector, &a.image_id) {
        (_, Some(v), _) => parse_vector(v, "text")?,
        (Some(id), None, _) => lookup_text(&a.data, id)?,
        (None, None, Some(image_id)) => {
            let manifest = load_manifest(&a.data)?;
            let doc = manifest
                .samples
                .iter()
                .find(|s| &s.image_id == image_id)
                .and_then(|s| manifest.class(&s.class_label))
                .map(|c| c.text_doc_id.clone())
                .ok_or_else(|| {
                    exit(
                        EXIT_USAGE,
                        format!("image '{image_id}' has no class text in the manifest"),
                    )
                })?;
            lookup_text(&a.data, &doc)?
        }
        (None, None, None) => return Err(exit(EXIT_USAGE, "give --text-id or --text-vector")),
    };

    let semantic = model.predict_semantic(&image, &text)?;
    let mode = match a.candidates {
        Candidates::All => CandidateMode::AllClasses,
        Candidates::Seen => CandidateMode::SeenOnly,
        Candidates::Unseen => CandidateMode::UnseenOnly,
    };
    let candidates = candidate_labels(mode, &model.label_order, &cv);
    if candidates.is_empty() {
        return Err(exit(EXIT_USAGE, format!("no {} candidates", mode.as_str())));
    }
    let index = SemanticIndex::build(
        &cv,
        Some(&candidates),
        IndexOptions {
            normalize: a.normalize,
        },
    )?;
    let k = a.k;
    if k > index.len() {
        return Err(exit(
            EXIT_USAGE,
            format!("--k {k} exceeds the {} candidate labels", index.len()),
        ));
    }
    let ranked = index.query_k_nearest(&semantic, k)?;
    match a.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&ranked)?),
        Format::Text => {
            for (i, n) in ranked.entries.iter().enumerate() {
                println!("{}\t{}\t{:.6}", i + 1, n.label, n.distance);
            }
        }
    }
    Ok(())
}

fn lookup_text(data: &DataArgs, id: &str) -> Result<Vec<f32>> {
    let texts = load_table(data.texts())?;
    texts
        .get(id)
        .map(<[f32]>::to_vec)
        .ok_or_else(|| exit(EXIT_USAGE, format!("unknown text id '{id}'")))
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let arch = tiny_arch(a.seed);
    let report = if a.batch_stats {
        let problem = GradCheckProblem::random(&arch, a.seed)?;
        zsl_core::trainer::check_problem(&problem, a.eps, true)?
    } else {
        gradient_check(&arch, a.seed, a.eps)?
    };
    println!(
        "max_rel_err={:e} max_abs_err={:e} checked={} excluded={}",
        report.max_relative_error, report.max_absolute_error, report.checked, report.excluded
    );
    if let Some((name, idx)) = &report.worst {
        info!("worst parameter: {name}[{idx}]");
    }
    if report.max_relative_error < GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(exit(
            EXIT_NUMERIC,
            format!(
                "gradient check failed: {} >= {GRADCHECK_TOLERANCE}",
                report.max_relative_error
            ),
        ))
    }
}
