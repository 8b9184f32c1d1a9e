use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use hybrid_attn::cka::{cka_grid, Pooling};
use hybrid_attn::curation::{
    balanced_subsample, cross_similarity, grayscale_file, greedy_dedup, interval_sample,
    mix_manifests, CurationReport, EmbeddingSet, SimilarityRow, SourceTransform,
};
use hybrid_attn::data::{load_corpus, load_image, save_corpus, synth_shapes, Image};
use hybrid_attn::distill::{run_distillation, DistillCorpus, DistillPlan};
use hybrid_attn::io::{
    decode_attention_dump, decode_checkpoint, decode_feature_dump, encode_attention_dump,
    encode_checkpoint, encode_feature_dump, parse_manifest, write_atomic, write_manifest,
    CorpusManifest, Modality, Provenance, ATTENTION_MAGIC, FEATURE_MAGIC,
};
use hybrid_attn::metrics::{analyze_stacks, report_from_nmi, Grid, NmiReport, PatternThresholds};
use hybrid_attn::model::{forward, pretrain_segmenter, ModelConfig, ParamStore, PretrainSettings};
use hybrid_attn::probe::{train_probe, ProbeMode, ProbeSettings, PyramidConfig};
use hybrid_attn::{DType, Error, FeatureStack};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::args::*;

/// Why a command failed; decides the exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(Error::Io(e))
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn format_error(msg: impl Into<String>) -> Failure {
    Failure::Core(Error::Codec(msg.into()))
}

pub fn run(command: Command) -> Outcome {
    match command {
        Command::Nmi(a) => nmi(a),
        Command::SelectLayer(a) => select_layer(a),
        Command::Cka(a) => cka(a),
        Command::Distill(a) => distill(a),
        Command::Probe(a) => probe(a),
        Command::Curate { step } => curate(step),
        Command::Report(a) => report(a),
        Command::Synth(a) => synth(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Dump(a) => dump(a),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Outcome {
    match out {
        Some(path) => Ok(write_atomic(path, text.as_bytes())?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn pretty(value: &Value) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("json serializes");
    s.push('\n');
    s
}

fn read(path: &Path) -> Outcome<Vec<u8>> {
    fs::read(path).map_err(|e| {
        Failure::Core(Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        )))
    })
}

fn read_text(path: &Path) -> Outcome<String> {
    String::from_utf8(read(path)?)
        .map_err(|_| format_error(format!("{} is not UTF-8", path.display())))
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Outcome<T> {
    toml::from_str(&read_text(path)?)
        .map_err(|e| Failure::Core(Error::Config(format!("{}: {e}", path.display()))))
}

fn read_manifest(path: &Path) -> Outcome<CorpusManifest> {
    Ok(parse_manifest(&read_text(path)?)?)
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load_images(manifest_path: &Path) -> Outcome<(CorpusManifest, Vec<Image>)> {
    let manifest = read_manifest(manifest_path)?;
    let base = base_dir(manifest_path);
    let images = manifest
        .records
        .iter()
        .map(|r| load_image(&base.join(&r.path)))
        .collect::<Result<_, _>>()?;
    Ok((manifest, images))
}

fn load_model(path: &Path) -> Outcome<(ModelConfig, ParamStore)> {
    let ckpt = decode_checkpoint(&read(path)?)?;
    let model = ckpt.config.get("model").ok_or_else(|| {
        format_error(format!(
            "{}: checkpoint config has no `model` entry",
            path.display()
        ))
    })?;
    let config: ModelConfig = serde_json::from_value(model.clone())
        .map_err(|e| format_error(format!("{}: bad model config: {e}", path.display())))?;
    config.validate()?;
    Ok((config, ckpt.params))
}

fn save_model(path: &Path, params: &ParamStore, config: Value) -> Outcome {
    let bytes = encode_checkpoint(params.iter().map(|(k, v)| (k.as_str(), v)), &config)?;
    Ok(write_atomic(path, &bytes)?)
}

fn thresholds(flags: &SelectionFlags) -> Outcome<PatternThresholds> {
    Ok(PatternThresholds::new(flags.hybrid_low, flags.hybrid_high)?)
}

fn nmi_json(report: &NmiReport) -> String {
    let mut value = serde_json::to_value(report).expect("report serializes");
    value["per_layer_nmi"] = json!(report.per_layer_nmi());
    pretty(&value)
}

fn parse_grid(text: &str) -> Outcome<Grid> {
    let (r, c) = text
        .split_once('x')
        .and_then(|(r, c)| Some((r.trim().parse().ok()?, c.trim().parse().ok()?)))
        .ok_or_else(|| usage(format!("--grid expects ROWSxCOLS, got `{text}`")))?;
    Ok(Grid::new(r, c))
}

fn nmi(a: NmiArgs) -> Outcome {
    let stacks = a
        .input
        .iter()
        .map(|p| Ok(decode_attention_dump(&read(p)?)?))
        .collect::<Outcome<Vec<_>>>()?;
    let grid = a.grid.as_deref().map(parse_grid).transpose()?;
    let report = analyze_stacks(
        &stacks,
        grid,
        a.selection.s,
        a.selection.half_only,
        thresholds(&a.selection)?,
    )?;
    emit(a.out.as_deref(), &nmi_json(&report))
}

fn parse_numbers(text: &str) -> Outcome<Vec<f64>> {
    if let Ok(v) = serde_json::from_str::<Vec<f64>>(text) {
        return Ok(v);
    }
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| format_error(format!("`{t}` is not a number")))
        })
        .collect()
}

fn select_layer(a: SelectArgs) -> Outcome {
    let values = match (&a.values, &a.nmi) {
        (Some(v), _) => v.clone(),
        (None, Some(path)) => parse_numbers(&read_text(path)?)?,
        (None, None) => return Err(usage("one of --nmi or --values is required")),
    };
    let report = report_from_nmi(
        &values,
        a.selection.s,
        a.selection.half_only,
        thresholds(&a.selection)?,
    )?;
    emit(a.out.as_deref(), &nmi_json(&report))
}

fn read_features(paths: &[PathBuf]) -> Outcome<Vec<FeatureStack>> {
    paths
        .iter()
        .map(|p| Ok(decode_feature_dump(&read(p)?)?))
        .collect()
}

fn cka(a: CkaArgs) -> Outcome {
    let (fa, fb) = (read_features(&a.a)?, read_features(&a.b)?);
    let pooling = match a.pooling {
        PoolingArg::Pooled => Pooling::Pooled,
        PoolingArg::PerImage => Pooling::PerImage,
    };
    let grid = cka_grid(&fa, &fb, pooling)?;
    let value = json!({
        "pooling": pooling,
        "images": fa.len(),
        "layers_a": fa[0].layers(),
        "layers_b": fb[0].layers(),
        "cka": grid,
    });
    emit(a.out.as_deref(), &pretty(&value))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanFile {
    /// Trailing manifest records used for held-out evaluation.
    heldout: usize,
    student: ModelConfig,
    distill: DistillPlan,
}

fn distill(a: DistillArgs) -> Outcome {
    let plan: PlanFile = read_toml(&a.plan)?;
    let (teacher, teacher_params) = load_model(&a.teacher)?;
    let init = a.init.as_deref().map(load_model).transpose()?;
    if let Some((config, _)) = &init {
        if *config != plan.student {
            return Err(Failure::Core(Error::Config(
                "--init checkpoint does not match the plan's student".into(),
            )));
        }
    }
    let (_, mut images) = load_images(&a.corpus)?;
    if plan.heldout == 0 || plan.heldout >= images.len() {
        return Err(Failure::Core(Error::Config(format!(
            "heldout {} must be between 1 and {} for this corpus",
            plan.heldout,
            images.len().saturating_sub(1)
        ))));
    }
    let heldout = images.split_off(images.len() - plan.heldout);
    let corpus = DistillCorpus {
        train: images,
        heldout,
    };
    let result = run_distillation(
        &teacher,
        &teacher_params,
        &plan.student,
        &corpus,
        &plan.distill,
        init.as_ref().map(|(_, p)| p),
    )?;
    save_model(
        &a.out,
        &result.params,
        json!({"model": result.config, "distill": plan.distill}),
    )?;
    if let Some(log) = &a.log {
        write_atomic(log, result.log.to_jsonl().as_bytes())?;
    }
    Ok(())
}

fn probe_mode(a: &ProbeArgs, depth: usize) -> Outcome<ProbeMode> {
    Ok(match a.mode {
        ModeArg::LlFpn => ProbeMode::LlFpn,
        ModeArg::MultiLayer => {
            let layers = match &a.layers {
                None => PyramidConfig::default_layers(depth),
                Some(l) => <[usize; 4]>::try_from(l.as_slice()).map_err(|_| {
                    usage(format!(
                        "--layers needs four values for multi-layer, got {}",
                        l.len()
                    ))
                })?,
            };
            ProbeMode::MultiLayer(layers)
        }
        ModeArg::Lp => ProbeMode::Lp(a.layers.clone().unwrap_or_else(|| (1..=depth).collect())),
        ModeArg::Layerwise => ProbeMode::Layerwise(
            a.layer
                .ok_or_else(|| usage("--layer is required with --mode layerwise"))?,
        ),
    })
}

fn probe(a: ProbeArgs) -> Outcome {
    let (config, params) = load_model(&a.checkpoint)?;
    let mode = probe_mode(&a, config.depth)?;
    let mut items = load_corpus(&a.corpus)?;
    if a.heldout == 0 || a.heldout >= items.len() {
        return Err(usage(format!(
            "--heldout must be between 1 and {}",
            items.len().saturating_sub(1)
        )));
    }
    let heldout = items.split_off(items.len() - a.heldout);
    let settings = ProbeSettings {
        epochs: a.epochs,
        batch_size: a.batch_size,
        base_lr: a.base_lr,
        classes: a.classes,
        seed: a.seed,
        optimizer: Default::default(),
    };
    let result = train_probe(&config, &params, &items, &heldout, &mode, &settings)?;
    let value = json!({
        "mode": mode,
        "settings": settings,
        "miou": result.iou.mean,
        "per_class_iou": result.iou.per_class,
        "final_loss": result.step_loss.last(),
        "steps": result.step_loss.len(),
    });
    emit(a.out.as_deref(), &pretty(&value))
}

fn write_report(path: Option<&Path>, report: &CurationReport) -> Outcome {
    match path {
        Some(p) => Ok(write_atomic(p, report.to_json().as_bytes())?),
        None => Ok(()),
    }
}

fn write_manifest_file(path: &Path, manifest: &CorpusManifest) -> Outcome {
    Ok(write_atomic(path, write_manifest(manifest).as_bytes())?)
}

fn read_embeddings(path: &Path) -> Outcome<EmbeddingSet> {
    Ok(EmbeddingSet::from_features(&decode_feature_dump(&read(
        path,
    )?)?)?)
}

fn named_path(text: &str) -> Outcome<(String, PathBuf)> {
    let (name, path) = text
        .split_once('=')
        .filter(|(n, p)| !n.is_empty() && !p.is_empty())
        .ok_or_else(|| usage(format!("expected NAME=PATH, got `{text}`")))?;
    Ok((name.to_string(), PathBuf::from(path)))
}

fn curate(step: CurateStep) -> Outcome {
    match step {
        CurateStep::Interval {
            manifest,
            k,
            out,
            report,
        } => {
            let input = read_manifest(&manifest)?;
            let kept = interval_sample(&input, k)?;
            write_manifest_file(&out, &kept)?;
            write_report(
                report.as_deref(),
                &CurationReport::new("interval", input.len(), kept.len()).with("k", k),
            )
        }
        CurateStep::Dedup {
            manifest,
            embeddings,
            threshold,
            out,
            report,
        } => {
            let input = read_manifest(&manifest)?;
            let set = read_embeddings(&embeddings)?;
            if set.len() != input.len() {
                return Err(Failure::Core(Error::Shape(format!(
                    "{} embeddings for {} manifest records",
                    set.len(),
                    input.len()
                ))));
            }
            let kept = greedy_dedup(&set, threshold)?;
            let mut result =
                CorpusManifest::new(kept.iter().map(|&i| input.records[i].clone()).collect())?;
            result.provenance = input.provenance.clone();
            result.provenance.push(Provenance::new(
                "dedup",
                format!(
                    "threshold={threshold}; {} -> {} records",
                    input.len(),
                    kept.len()
                ),
            ));
            write_manifest_file(&out, &result)?;
            write_report(
                report.as_deref(),
                &CurationReport::new("dedup", input.len(), kept.len()).with("threshold", threshold),
            )
        }
        CurateStep::Grayscale {
            manifest,
            out_dir,
            report,
        } => {
            let input = read_manifest(&manifest)?;
            let base = base_dir(&manifest);
            let mut converted = 0usize;
            for r in &input.records {
                let dst = out_dir.join(&r.path);
                if r.modality == Modality::Rgb {
                    grayscale_file(&base.join(&r.path), &dst)?;
                    converted += 1;
                } else {
                    copy_into(&base.join(&r.path), &dst)?;
                }
                if let Some(label) = &r.label_path {
                    copy_into(&base.join(label), &out_dir.join(label))?;
                }
            }
            let mut result = input.clone();
            result.provenance.push(Provenance::new(
                "grayscale",
                format!("{converted} RGB records converted to luma"),
            ));
            write_manifest_file(&out_dir.join("manifest.jsonl"), &result)?;
            write_report(
                report.as_deref(),
                &CurationReport::new("grayscale", input.len(), input.len())
                    .with("converted", converted),
            )
        }
        CurateStep::Balance {
            manifest,
            n,
            seed,
            out,
            report,
        } => {
            let input = read_manifest(&manifest)?;
            let result = balanced_subsample(&input, n, seed)?;
            write_manifest_file(&out, &result)?;
            write_report(
                report.as_deref(),
                &CurationReport::new("balance", input.len(), result.len())
                    .with("n", n)
                    .with("seed", seed),
            )
        }
        CurateStep::Mix {
            sources,
            out,
            report,
        } => {
            let mut inputs = Vec::with_capacity(sources.len());
            for spec in &sources {
                let (path, transform) = match spec.rsplit_once(':') {
                    Some((p, "grayscale")) => (p, SourceTransform::Grayscale),
                    Some((p, "none")) => (p, SourceTransform::None),
                    _ => (spec.as_str(), SourceTransform::None),
                };
                inputs.push((read_manifest(Path::new(path))?, transform));
            }
            let total = inputs.iter().map(|(m, _)| m.len()).sum();
            let result = mix_manifests(&inputs)?;
            write_manifest_file(&out, &result)?;
            write_report(
                report.as_deref(),
                &CurationReport::new("mix", total, result.len()).with("sources", sources.len()),
            )
        }
        CurateStep::Similarity {
            reference,
            against,
            pair_cap,
            seed,
            out,
        } => {
            let (ref_name, ref_path) = named_path(&reference)?;
            let ref_set = read_embeddings(&ref_path)?;
            let mut report = CurationReport::new("similarity", ref_set.len(), ref_set.len())
                .with("pair_cap", pair_cap)
                .with("seed", seed);
            for item in &against {
                let (name, path) = named_path(item)?;
                let estimate =
                    cross_similarity(&ref_set, &read_embeddings(&path)?, pair_cap, seed)?;
                report.similarity.push(SimilarityRow {
                    a: ref_name.clone(),
                    b: name,
                    estimate,
                });
            }
            emit(out.as_deref(), &report.to_json())
        }
    }
}

fn copy_into(src: &Path, dst: &Path) -> Outcome {
    if let Some(dir) = dst.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(write_atomic(dst, &read(src)?)?)
}

fn report(a: ReportArgs) -> Outcome {
    let bytes = read(&a.input)?;
    let value = if bytes.starts_with(ATTENTION_MAGIC) {
        let stack = decode_attention_dump(&bytes)?;
        let nmi = hybrid_attn::metrics::nmi_heads_by_layer(&stack)?;
        json!({
            "kind": "attention_dump",
            "shape": [stack.layers(), stack.heads(), stack.tokens(), stack.tokens()],
            "dtype": stack.dtype(),
            "head_nmi": nmi,
        })
    } else if bytes.starts_with(FEATURE_MAGIC) {
        let stack = decode_feature_dump(&bytes)?;
        let norms: Vec<f64> = (0..stack.layers())
            .map(|l| {
                let layer = stack.layer(l);
                let sq: f64 = layer.iter().map(|v| v * v).sum();
                (sq / stack.tokens() as f64).sqrt()
            })
            .collect();
        json!({
            "kind": "feature_dump",
            "shape": [stack.layers(), stack.tokens(), stack.dim()],
            "dtype": stack.dtype(),
            "mean_token_norm": norms,
        })
    } else if bytes.starts_with(b"CKPT") {
        let ckpt = decode_checkpoint(&bytes)?;
        let tensors: Vec<Value> = ckpt
            .params
            .iter()
            .map(|(name, t)| json!({"name": name, "shape": t.shape(), "dtype": t.dtype()}))
            .collect();
        let count: usize = ckpt.params.values().map(|t| t.len()).sum();
        json!({"kind": "checkpoint", "config": ckpt.config, "parameters": count, "tensors": tensors})
    } else {
        let text =
            String::from_utf8(bytes).map_err(|_| format_error("unrecognized binary input"))?;
        text_report(&text)?
    };
    emit(a.out.as_deref(), &pretty(&value))
}

fn text_report(text: &str) -> Outcome<Value> {
    let first: Option<Value> = text
        .lines()
        .next()
        .and_then(|l| serde_json::from_str(l).ok());
    if let Some(teacher_nmi) = first.as_ref().and_then(|v| v.get("teacher_nmi")) {
        let lines: Vec<Value> = text
            .lines()
            .filter_map(|l| serde_json::from_str(l).ok())
            .collect();
        let epochs: Vec<&Value> = lines.iter().filter(|v| v.get("epoch").is_some()).collect();
        let steps = lines.iter().filter(|v| v.get("step").is_some()).count();
        let initial = epochs.first().map(|v| v["heldout_loss"].clone());
        let last = epochs.last().copied().cloned().unwrap_or(Value::Null);
        let ratio = match (
            initial.as_ref().and_then(Value::as_f64),
            last["heldout_loss"].as_f64(),
        ) {
            (Some(i), Some(f)) if i > 0.0 => json!(f / i),
            _ => Value::Null,
        };
        return Ok(json!({
            "kind": "distill_log",
            "steps": steps,
            "teacher_nmi": teacher_nmi,
            "initial_heldout_loss": initial,
            "final_heldout_loss": last["heldout_loss"],
            "final_student_nmi": last["student_nmi"],
            "heldout_loss_ratio": ratio,
        }));
    }
    let manifest = parse_manifest(text)?;
    let mut sources: BTreeMap<&str, usize> = BTreeMap::new();
    let mut modalities: BTreeMap<String, usize> = BTreeMap::new();
    for r in &manifest.records {
        *sources.entry(r.source_dataset.as_str()).or_default() += 1;
        *modalities
            .entry(
                serde_json::to_value(r.modality)
                    .expect("modality")
                    .as_str()
                    .unwrap_or("?")
                    .to_string(),
            )
            .or_default() += 1;
    }
    Ok(json!({
        "kind": "manifest",
        "records": manifest.len(),
        "sources": sources,
        "modalities": modalities,
        "provenance": manifest.provenance,
    }))
}

fn synth(a: SynthArgs) -> Outcome {
    let items = synth_shapes(a.count, a.size, a.seed);
    let mut manifest = save_corpus(&a.out_dir, &items, &a.source)?;
    manifest.provenance.push(Provenance::new(
        "synth",
        format!("seed={}; size={}", a.seed, a.size),
    ));
    write_manifest_file(&a.out_dir.join("manifest.jsonl"), &manifest)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PretrainFile {
    model: ModelConfig,
    train: PretrainSettings,
}

fn pretrain(a: PretrainArgs) -> Outcome {
    let file: PretrainFile = read_toml(&a.config)?;
    file.model.validate()?;
    let corpus = load_corpus(&a.corpus)?;
    let (params, losses) = pretrain_segmenter(&file.model, &corpus, &file.train)?;
    save_model(
        &a.out,
        &params,
        json!({"model": file.model, "pretrain": file.train}),
    )?;
    if let Some(log) = &a.log {
        let text: String = losses
            .iter()
            .enumerate()
            .map(|(i, l)| format!("{}\n", json!({"step": i, "loss": l})))
            .collect();
        write_atomic(log, text.as_bytes())?;
    }
    Ok(())
}

fn dump(a: DumpArgs) -> Outcome {
    if a.out_dir.is_none() && a.embeddings.is_none() {
        return Err(usage("dump needs --out-dir, --embeddings or both"));
    }
    let (config, params) = load_model(&a.checkpoint)?;
    let (manifest, images) = load_images(&a.corpus)?;
    let outputs = forward(&config, &params, &images)?;
    if let Some(dir) = &a.out_dir {
        fs::create_dir_all(dir)?;
        for (record, out) in manifest.records.iter().zip(&outputs) {
            let stem = Path::new(&record.path)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| record.path.clone());
            write_atomic(
                &dir.join(format!("{stem}.atn")),
                &encode_attention_dump(&out.attention_stack()?)?,
            )?;
            write_atomic(
                &dir.join(format!("{stem}.fetd")),
                &encode_feature_dump(&out.features)?,
            )?;
        }
    }
    if let Some(path) = &a.embeddings {
        let (n, d) = (config.tokens(), config.dim);
        let mut values = Vec::with_capacity(outputs.len() * d);
        for out in &outputs {
            let last = out.features.layer(config.depth - 1);
            values.extend((0..d).map(|c| (0..n).map(|t| last[t * d + c]).sum::<f64>() / n as f64));
        }
        let stack = FeatureStack::new(1, outputs.len(), d, DType::F32, values)?;
        write_atomic(path, &encode_feature_dump(&stack)?)?;
    }
    Ok(())
}
