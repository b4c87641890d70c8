use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::ExitCode;

use rrld_core::augment::{default_policy, parse_policy};
use rrld_core::backbone::BackboneConfig;
use rrld_core::checkpoint;
use rrld_core::data::{
    corrupt as corrupt_dataset, export_image_folder, generate_synthetic, load_image_folder, load_image_folder_any,
    MultiDomainDataset, NoiseKind, NoiseSpec, SynthConfig,
};
use rrld_core::manifest::{check_schema, read_json, write_json, DatasetManifest, RunManifest, RunRecord, SCHEMA_VERSION};
use rrld_core::report::{build_report, format_cell};
use rrld_core::rng;
use rrld_core::selfcheck::{run_selftest, SelfTestOptions};
use rrld_core::trainer::{evaluate, run_protocol, FitResult, RunResult, TrainConfig};
use rrld_core::{Error, LossConfig, Result};
use serde::Serialize;

use crate::{CorruptArgs, DataArgs, EvalArgs, Fault, ReportArgs, SelftestArgs, SynthArgs, TrainArgs};

pub const DATASET_MANIFEST: &str = "dataset.json";
pub const RUN_MANIFEST: &str = "manifest.json";
pub const RUN_RESULT: &str = "result.json";

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Dataset manifest, if the directory has one.
fn dataset_manifest(root: &Path) -> Result<Option<DatasetManifest>> {
    let path = root.join(DATASET_MANIFEST);
    if !path.exists() {
        return Ok(None);
    }
    let m: DatasetManifest = read_json(&path)?;
    check_schema(m.schema_version)?;
    Ok(Some(m))
}

fn load(args: &DataArgs, min_one_domain: bool) -> Result<(MultiDomainDataset, Option<DatasetManifest>)> {
    let manifest = dataset_manifest(&args.data)?;
    let shape = manifest.as_ref().map(|m| m.summary.shape);
    let size = args.image_size.or(shape.map(|s| s.height)).unwrap_or(32);
    let channels = args.channels.or(shape.map(|s| s.channels)).unwrap_or(3);
    let ds = if min_one_domain {
        load_image_folder_any(&args.data, size, channels)?
    } else {
        load_image_folder(&args.data, size, channels)?
    };
    Ok((ds, manifest))
}

pub fn synth(a: SynthArgs) -> Result<ExitCode> {
    let cfg = SynthConfig {
        classes: a.classes,
        domains: a.domains,
        per_domain: a.per_domain,
        image_size: a.image_size,
        channels: a.channels,
        seed: a.seed,
    };
    let ds = generate_synthetic(&cfg)?;
    create_dir(&a.out)?;
    export_image_folder(&ds, &a.out)?;
    let manifest = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        summary: ds.summary(),
        synth: Some(cfg),
        noise: vec![],
        noise_domain: None,
        noise_assign_seed: None,
        source: None,
    };
    write_json(&a.out.join(DATASET_MANIFEST), &manifest)?;
    println!("wrote {} images in {} domains to {}", ds.len(), ds.domains().len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn corrupt(a: CorruptArgs) -> Result<ExitCode> {
    let mut specs = Vec::with_capacity(a.kinds.len());
    for name in &a.kinds {
        let kind: NoiseKind = name.trim().parse()?;
        let param = match kind {
            NoiseKind::Gaussian => a.sigma,
            NoiseKind::Impulse => a.impulse_p,
            NoiseKind::Speckle => a.speckle_sigma,
            NoiseKind::Shot => a.shot_scale,
        };
        let seed = rng::derive_seed(a.seed, &[rng::tag(kind.as_str())]);
        specs.push(NoiseSpec::new(kind, param, seed)?);
    }
    let (clean, source_manifest) = load(&a.source, true)?;
    let noisy = corrupt_dataset(&clean, &specs, &a.domain_name, a.seed)?;
    create_dir(&a.out)?;
    export_image_folder(&noisy, &a.out)?;
    let manifest = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        summary: noisy.summary(),
        synth: source_manifest.and_then(|m| m.synth),
        noise: specs,
        noise_domain: Some(a.domain_name.clone()),
        noise_assign_seed: Some(a.seed),
        source: Some(a.source.data.clone()),
    };
    write_json(&a.out.join(DATASET_MANIFEST), &manifest)?;
    println!(
        "wrote {} images ({} clean + {} in '{}') to {}",
        noisy.len(),
        clean.len(),
        noisy.len() - clean.len(),
        a.domain_name,
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn run_manifest_from_flags(a: &TrainArgs, data: &Path) -> Result<(RunManifest, MultiDomainDataset)> {
    let (ds, dataset_manifest) = load(
        &DataArgs {
            data: data.to_path_buf(),
            image_size: a.image_size,
            channels: a.channels,
        },
        false,
    )?;
    let policy = match &a.policy {
        Some(p) => parse_policy(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => default_policy(),
    };
    let shape = ds.shape();
    let backbone = BackboneConfig {
        image_size: shape.height,
        in_channels: shape.channels,
        patch_size: a.patch_size,
        embed_dim: a.embed_dim,
        depth: a.depth,
        heads: a.heads,
        mlp_ratio: a.mlp_ratio,
        num_classes: ds.num_classes(),
        seed: 0,
    };
    backbone.validate()?;
    let defaults = TrainConfig::default();
    let train = TrainConfig {
        loss: LossConfig {
            t1: a.t1,
            t2: a.t2,
            lambda: a.lambda,
            gamma: a.gamma,
            detach_ibsd_teacher: a.detach_ibsd_teacher,
        },
        learning_rate: a.lr,
        batch_size: a.batch_size,
        weight_decay: a.weight_decay,
        max_steps: a.steps.unwrap_or(defaults.max_steps),
        eval_every: a.eval_every,
        seeds: a.seeds.clone().unwrap_or(defaults.seeds),
        variant: a.variant.unwrap_or(defaults.variant),
        tap_range: a.tap_range,
        base_augment: a.base_augment,
        grad_clip: a.grad_clip,
        targets: a.targets.clone(),
    };
    train.validate()?;
    let out = match &a.out {
        Some(o) => o.clone(),
        None => a.output_root.join(train.variant.as_str()),
    };
    let manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        version: env!("CARGO_PKG_VERSION").to_string(),
        data: data.to_path_buf(),
        dataset: ds.summary(),
        backbone,
        seeds: train.seeds.clone(),
        train,
        policy,
        noise: dataset_manifest.map(|m| m.noise).unwrap_or_default(),
        output_dir: out,
    };
    Ok((manifest, ds))
}

fn run_manifest_from_file(a: &TrainArgs, path: &Path) -> Result<(RunManifest, MultiDomainDataset)> {
    let mut m: RunManifest = read_json(path)?;
    m.validate()?;
    if let Some(d) = &a.data {
        m.data = d.clone();
    }
    if let Some(o) = &a.out {
        m.output_dir = o.clone();
    }
    let ds = load_image_folder(&m.data, m.dataset.shape.height, m.dataset.shape.channels)?;
    if ds.summary() != m.dataset {
        return Err(Error::Dataset(format!(
            "{} no longer matches the dataset recorded in {}",
            m.data.display(),
            path.display()
        )));
    }
    Ok((m, ds))
}

fn run_stem(fit: &FitResult) -> String {
    format!("{}_seed{}", fit.target, fit.seed)
}

fn write_metrics(dir: &Path, fit: &FitResult) -> Result<()> {
    let path = dir.join("metrics").join(format!("{}.jsonl", run_stem(fit)));
    let mut text = String::new();
    for m in &fit.metrics {
        text.push_str(&serde_json::to_string(m)?);
        text.push('\n');
    }
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn train(a: TrainArgs) -> Result<ExitCode> {
    let (manifest, ds) = match (&a.manifest, &a.data) {
        (Some(m), _) => run_manifest_from_file(&a, m)?,
        (None, Some(d)) => run_manifest_from_flags(&a, d)?,
        (None, None) => return Err(Error::Config("either --data or --manifest is required".into())),
    };
    let out = manifest.output_dir.clone();
    create_dir(&out.join("metrics"))?;
    create_dir(&out.join("checkpoints"))?;
    write_json(&out.join(RUN_MANIFEST), &manifest)?;

    let result = run_protocol(&ds, &manifest.backbone, &manifest.train, &manifest.policy, |fit| {
        write_metrics(&out, fit)?;
        let ckpt = out.join("checkpoints").join(format!("{}.ckpt", run_stem(fit)));
        checkpoint::save(&ckpt, &fit.best_model, Some(&fit.best_optimizer))?;
        eprintln!(
            "{} seed {}: best val {:.4} at step {}, test {:.4}",
            fit.target, fit.seed, fit.best_val_acc, fit.best_step, fit.test_acc
        );
        Ok(())
    })?;
    if let Some(leak) = result.targets.iter().flat_map(|t| &t.runs).find(|r| r.early_target_reads > 0) {
        return Err(Error::Contract(format!(
            "target domain read {} times before final evaluation",
            leak.early_target_reads
        )));
    }
    write_json(
        &out.join(RUN_RESULT),
        &RunRecord {
            schema_version: SCHEMA_VERSION,
            result: result.clone(),
        },
    )?;
    print_run(&result);
    println!("run directory: {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn print_run(r: &RunResult) {
    println!("{}", r.variant);
    for t in &r.targets {
        let accs: Vec<String> = t.runs.iter().map(|s| format!("{:.4}", s.test_acc)).collect();
        println!(
            "  {:<12} {}  [{}]",
            t.target,
            format_cell(rrld_core::report::Cell { mean: t.mean, std: t.std }),
            accs.join(", ")
        );
    }
    println!("  {:<12} {:.3}", "Average", r.average);
}

#[derive(Debug, Serialize)]
struct DomainScore {
    domain: String,
    samples: usize,
    accuracy: f64,
}

pub fn eval(a: EvalArgs) -> Result<ExitCode> {
    let ckpt = checkpoint::load(&a.checkpoint)?;
    let cfg = ckpt.model.config().clone();
    let args = DataArgs {
        image_size: a.data.image_size.or(Some(cfg.image_size)),
        channels: a.data.channels.or(Some(cfg.in_channels)),
        data: a.data.data.clone(),
    };
    let (ds, _) = load(&args, true)?;
    if ds.num_classes() != cfg.num_classes {
        return Err(Error::Dataset(format!(
            "checkpoint predicts {} classes, dataset has {}",
            cfg.num_classes,
            ds.num_classes()
        )));
    }
    let domains: Vec<usize> = match &a.domain {
        Some(name) => vec![ds.domain_index(name)?],
        None => (0..ds.domains().len()).collect(),
    };
    let mut scores = Vec::new();
    for d in domains {
        let ids = ds.domain_ids(d);
        scores.push(DomainScore {
            domain: ds.domains()[d].clone(),
            samples: ids.len(),
            accuracy: evaluate(&ckpt.model, ids.iter().map(|&i| &ds.samples()[i]))?,
        });
    }
    if a.json {
        println!("{}", serde_json::to_string_pretty(&scores)?);
    } else {
        for s in &scores {
            println!("{:<12} {:>6} samples  accuracy {:.4}", s.domain, s.samples, s.accuracy);
        }
    }
    Ok(ExitCode::SUCCESS)
}

pub fn report(a: ReportArgs) -> Result<ExitCode> {
    let mut runs: Vec<(String, RunResult)> = Vec::with_capacity(a.runs.len());
    for dir in &a.runs {
        let rec: RunRecord = read_json(&dir.join(RUN_RESULT))?;
        check_schema(rec.schema_version)?;
        runs.push((rec.result.variant.to_string(), rec.result));
    }
    // Disambiguate repeated variants with their directory names.
    let labels: Vec<String> = runs.iter().map(|(l, _)| l.clone()).collect();
    for (i, (label, _)) in runs.iter_mut().enumerate() {
        if labels.iter().filter(|l| *l == label).count() > 1 {
            *label = format!("{label} ({})", dir_name(&a.runs[i]));
        }
    }
    let table = build_report(&runs)?;
    print!("{}", table.render());
    if let Some(path) = &a.json {
        write_json(path, &table)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn dir_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string())
}

pub fn selftest(a: SelftestArgs) -> Result<ExitCode> {
    let opts = SelfTestOptions {
        break_stopgrad: a.fault == Some(Fault::Stopgrad),
        seed: a.seed,
        ..SelfTestOptions::default()
    };
    let _ = a.float64;
    let outcomes = run_selftest(&opts);
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    if a.json {
        println!("{}", serde_json::to_string_pretty(&outcomes)?);
    } else {
        let mut out = std::io::stdout().lock();
        for o in &outcomes {
            let _ = writeln!(out, "[{}] {:<24} {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
        }
        let _ = writeln!(out, "{} of {} checks passed", outcomes.len() - failed, outcomes.len());
    }
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

