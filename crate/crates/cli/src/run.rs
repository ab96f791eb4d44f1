//! Command implementations: prune, transfer, report, flops, masks-export,
//! pretrain.

use crate::config::{ExperimentConfig, Profile, PromptSection};
use anyhow::{anyhow, bail, Context};
use promptprune::analysis::{count_flops, plot_accuracy_vs_flops, sparsity_report, PlotSeries};
use promptprune::baselines::{baseline_masks, BaselineMethod, BaselineSpec};
use promptprune::data::{
    load_cifar10, load_cifar100, load_image_folder, make_task, Dataset, TaskSpec,
};
use promptprune::hypernet::{HypernetConfig, HypernetState};
use promptprune::netgraph::{
    build_graph, load_graph, save_graph, Allocation, MaskSet, ModelGraph,
};
use promptprune::pipeline::{
    append_record_csv, config_hash, pretrain, stage1_learn, stage1_prompt_only, stage2_finetune,
    transfer_hypernet, transfer_masks, RunRecord, Stage2Result, TrainTrace,
};
use promptprune::prompt::{PromptMode, VisualPrompt};
use serde_json::json;
use std::path::{Path, PathBuf};

/// Failures split by exit code: configuration problems exit 2, runtime
/// problems exit 3.
#[derive(Debug)]
pub enum CliError {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    pub fn message(&self) -> String {
        match self {
            CliError::Config(e) => format!("config error: {e:#}"),
            CliError::Runtime(e) => format!("runtime error: {e:#}"),
        }
    }
}

fn cfg_err<T>(r: anyhow::Result<T>) -> Result<T, CliError> {
    r.map_err(CliError::Config)
}

fn rt_err<T>(r: anyhow::Result<T>) -> Result<T, CliError> {
    r.map_err(CliError::Runtime)
}

// ------------------------------------------------------------- datasets

fn task_classes(task: &str, root: Option<&Path>) -> anyhow::Result<usize> {
    Ok(match task {
        "cifar10" => 10,
        "synthetic-a" | "synthetic-b" | "synthetic-source" => 40,
        "cifar100" => 100,
        "folder" => {
            let root = root.context("folder task needs dataset_root")?;
            let train = root.join("train");
            let mut n = 0;
            for entry in std::fs::read_dir(&train)
                .with_context(|| format!("cannot list {}", train.display()))?
            {
                if entry?.path().is_dir() {
                    n += 1;
                }
            }
            n
        }
        other => bail!("unknown task `{other}`"),
    })
}

/// Per-class sample counts: desk keeps ~5k train / ~1k test images total.
fn per_class_counts(cfg: &ExperimentConfig, classes: usize) -> (usize, usize) {
    let scale = match cfg.profile {
        Profile::Desk => 1,
        Profile::Full => 10,
    };
    let train = cfg.train_per_class.unwrap_or(scale * (5000 / classes).max(1));
    let test = cfg.test_per_class.unwrap_or(scale * (1000 / classes).max(1));
    (train, test)
}

/// Balanced prefix subsample: the first `per_class` samples of each class.
fn subsample_per_class(ds: &Dataset, per_class: usize) -> anyhow::Result<Dataset> {
    let mut taken = vec![0usize; ds.num_classes];
    let mut idx = Vec::new();
    for (i, &l) in ds.labels.iter().enumerate() {
        if taken[l] < per_class {
            taken[l] += 1;
            idx.push(i);
        }
    }
    let (images, labels) = ds.batch(&idx);
    Ok(Dataset::new(&ds.name, images, labels, ds.num_classes)?)
}

/// Load a task by name at the resolution the architecture expects.
fn load_named_task(
    cfg: &ExperimentConfig,
    task: &str,
    hw: (usize, usize),
) -> anyhow::Result<(Dataset, Dataset)> {
    let synth = |classes: usize, seed: u64| -> anyhow::Result<(Dataset, Dataset)> {
        let (train_pc, test_pc) = per_class_counts(cfg, classes);
        let spec = TaskSpec {
            image_hw: hw,
            ..TaskSpec::new(task, classes, train_pc, test_pc, seed)
        };
        Ok(make_task(&spec)?)
    };
    let subsampled = |pair: (Dataset, Dataset)| -> anyhow::Result<(Dataset, Dataset)> {
        let classes = pair.0.num_classes;
        let (train_pc, test_pc) = per_class_counts(cfg, classes);
        if cfg.profile == Profile::Full && cfg.train_per_class.is_none() {
            return Ok(pair);
        }
        Ok((subsample_per_class(&pair.0, train_pc)?, subsample_per_class(&pair.1, test_pc)?))
    };
    match task {
        "synthetic-a" => synth(40, 2000),
        "synthetic-b" => synth(40, 3000),
        "synthetic-source" => synth(40, 1000),
        "cifar10" | "cifar100" => {
            if hw != (32, 32) {
                bail!("`{}` images are 32x32 but `{}` expects {}x{}", task, cfg.arch, hw.0, hw.1);
            }
            let root = cfg.dataset_root.as_ref().context("missing dataset_root")?;
            let pair = if task == "cifar10" { load_cifar10(root) } else { load_cifar100(root) }
                .with_context(|| format!("cannot load {task} from {}", root.display()))?;
            subsampled(pair)
        }
        "folder" => {
            let root = cfg.dataset_root.as_ref().context("missing dataset_root")?;
            let pair = (
                load_image_folder(&root.join("train"), hw)?,
                load_image_folder(&root.join("test"), hw)?,
            );
            subsampled(pair)
        }
        other => bail!("unknown task `{other}`"),
    }
}

/// The task the source model is pretrained on: the shared synthetic source
/// task for synthetic targets, the target task itself otherwise.
fn source_task_name(task: &str) -> &str {
    if task.starts_with("synthetic") {
        "synthetic-source"
    } else {
        task
    }
}

// --------------------------------------------------------- source model

const PRETRAIN_SEED: u64 = 1000;

/// Load the configured source model, or pretrain one (cached under
/// `out_dir/source/`, keyed by everything that shapes it).
fn ensure_source_model(cfg: &ExperimentConfig) -> anyhow::Result<(ModelGraph, PathBuf)> {
    if let Some(path) = &cfg.source_model {
        let g = load_graph(path)
            .with_context(|| format!("missing source checkpoint {}", path.display()))?;
        return Ok((g, path.clone()));
    }
    let source_task = source_task_name(&cfg.task);
    let classes = task_classes(source_task, cfg.dataset_root.as_deref())?;
    let key = json!({
        "arch": cfg.arch,
        "task": source_task,
        "profile": cfg.profile,
        "pretrain": cfg.pretrain,
        "train_per_class": cfg.train_per_class,
        "seed": PRETRAIN_SEED,
    });
    let hash8: String = config_hash(&key).chars().take(8).collect();
    let dir = cfg.out_dir.join("source").join(format!("{}-{}-{}", cfg.arch, source_task, hash8));
    if dir.join("manifest.json").exists() {
        let g = load_graph(&dir)
            .with_context(|| format!("corrupt source checkpoint {}", dir.display()))?;
        return Ok((g, dir));
    }
    let graph = build_graph(&cfg.arch, classes, PRETRAIN_SEED)?;
    let hw = (graph.input_shape.1, graph.input_shape.2);
    let (train, test) = load_named_task(cfg, source_task, hw)?;
    println!(
        "pretraining {} on {source_task} ({} train images, {} epochs)...",
        cfg.arch,
        train.len(),
        cfg.pretrain.epochs
    );
    let out = pretrain(
        graph,
        &train,
        &test,
        &cfg.pretrain.optim,
        cfg.pretrain.epochs,
        cfg.pretrain.batch_size,
        PRETRAIN_SEED,
    )?;
    std::fs::create_dir_all(&dir)?;
    save_graph(&out.graph, &dir)?;
    std::fs::write(
        dir.join("pretrain.json"),
        serde_json::to_string_pretty(&json!({
            "key": key,
            "test_acc": out.test_acc,
            "trace": out.trace,
        }))?,
    )?;
    println!("source model test accuracy {:.2}% -> {}", out.test_acc, dir.display());
    Ok((out.graph, dir))
}

fn build_prompt(section: &PromptSection, hw: (usize, usize)) -> anyhow::Result<VisualPrompt> {
    Ok(match section.mode {
        PromptMode::Additive => VisualPrompt::additive(3, hw, section.size, section.placement)?,
        PromptMode::Expansive => VisualPrompt::expansive(3, hw, section.size)?,
    })
}

// --------------------------------------------------------------- prune

pub fn cmd_prune(
    cfg: &ExperimentConfig,
    allow_full: bool,
    parallel_seeds: usize,
    no_csv: bool,
) -> Result<(), CliError> {
    cfg_err(gate_profile(cfg, allow_full))?;
    cfg_err(build_graph(&cfg.arch, 2, 0).map_err(|e| anyhow!(e)).map(|_| ()))?;
    let hash = config_hash(&cfg.to_value());

    if parallel_seeds > 1 && cfg.seeds.len() > 1 {
        return run_parallel(cfg, parallel_seeds);
    }

    let (graph, _src) = rt_err(ensure_source_model(cfg))?;
    let hw = (graph.input_shape.1, graph.input_shape.2);
    cfg_err(build_prompt(&cfg.prompt, hw).map(|_| ()))?;
    let (train, test) = rt_err(load_named_task(cfg, &cfg.task, hw))?;
    for &seed in &cfg.seeds {
        for &s in &cfg.sparsity {
            let record = rt_err(run_one(cfg, &graph, &train, &test, seed, s, &hash))?;
            if !no_csv {
                rt_err(
                    append_record_csv(&cfg.out_dir.join("record.csv"), &record)
                        .map_err(|e| anyhow!(e)),
                )?;
            }
            println!(
                "{} s={:.2} seed={}: acc {:.2}% ({} MACs)",
                cfg.method, s, seed, record.acc, record.flops
            );
        }
    }
    Ok(())
}

fn gate_profile(cfg: &ExperimentConfig, allow_full: bool) -> anyhow::Result<()> {
    if cfg.profile == Profile::Full && !allow_full {
        bail!(
            "profile `full` trains on complete datasets and can take hours; \
             rerun with --allow-full to confirm"
        );
    }
    Ok(())
}

/// Fork one child process per seed, then rebuild the CSV from the records
/// the children wrote (children skip the CSV to avoid interleaved writes).
fn run_parallel(cfg: &ExperimentConfig, width: usize) -> Result<(), CliError> {
    let exe = rt_err(std::env::current_exe().map_err(|e| anyhow!(e)))?;
    rt_err(std::fs::create_dir_all(&cfg.out_dir).map_err(|e| anyhow!(e)))?;
    // Materialize the shared source model once, before forking.
    rt_err(ensure_source_model(cfg).map(|_| ()))?;
    let mut pending: Vec<std::process::Child> = Vec::new();
    let mut configs = Vec::new();
    for (i, &seed) in cfg.seeds.iter().enumerate() {
        let mut one = cfg.clone();
        one.seeds = vec![seed];
        let path = cfg.out_dir.join(format!(".seed-{seed}.json"));
        rt_err(
            std::fs::write(&path, serde_json::to_string_pretty(&one).unwrap())
                .map_err(|e| anyhow!(e)),
        )?;
        configs.push(path.clone());
        while pending.len() >= width {
            wait_one(&mut pending)?;
        }
        let child = std::process::Command::new(&exe)
            .arg("prune")
            .arg("--config")
            .arg(&path)
            .arg("--no-csv")
            .arg("--allow-full")
            .spawn()
            .with_context(|| format!("cannot fork worker for seed {seed}"))
            .map_err(CliError::Runtime)?;
        pending.push(child);
        let _ = i;
    }
    while !pending.is_empty() {
        wait_one(&mut pending)?;
    }
    for path in configs {
        let _ = std::fs::remove_file(path);
    }
    rebuild_csv(&cfg.out_dir)
}

fn wait_one(pending: &mut Vec<std::process::Child>) -> Result<(), CliError> {
    let mut child = pending.remove(0);
    let status = rt_err(child.wait().map_err(|e| anyhow!(e)))?;
    if !status.success() {
        return Err(CliError::Runtime(anyhow!("worker exited with {status}")));
    }
    Ok(())
}

/// Re-derive `record.csv` from every `record.json` under `out_dir/runs`.
fn rebuild_csv(out_dir: &Path) -> Result<(), CliError> {
    let csv = out_dir.join("record.csv");
    for rec in rt_err(collect_records(&[out_dir.join("runs")]))? {
        rt_err(append_record_csv(&csv, &rec).map_err(|e| anyhow!(e)))?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_one(
    cfg: &ExperimentConfig,
    graph: &ModelGraph,
    train: &Dataset,
    test: &Dataset,
    seed: u64,
    s: f32,
    hash: &str,
) -> anyhow::Result<RunRecord> {
    let allocation: Allocation = cfg.allocation.parse()?;
    let hw = (graph.input_shape.1, graph.input_shape.2);
    let prompt = build_prompt(&cfg.prompt, hw)?;
    let mut s1cfg = cfg.stage1.clone();
    s1cfg.seed = seed;
    let mut s2cfg = cfg.stage2.clone();
    s2cfg.seed = seed;

    let dir = cfg.out_dir.join("runs").join(run_dir_name(cfg, s, seed, hash));
    std::fs::create_dir_all(&dir)?;

    let (masks, prompt, s1_trace, hypernet) = match cfg.method.as_str() {
        "pass" => {
            let mut hcfg = HypernetConfig::for_graph(graph, allocation);
            hcfg.hidden_size = cfg.hypernet.hidden_size;
            hcfg.ablation = cfg.hypernet.ablation.clone();
            hcfg.cell_init = cfg.hypernet.cell_init;
            let hn = HypernetState::new(graph, hcfg, seed)?;
            let out = stage1_learn(graph, train, prompt, hn, &s1cfg, s, allocation)?;
            (out.masks, out.prompt, out.trace, Some(out.hypernet))
        }
        baseline => {
            let method = match baseline {
                "group_l1" => BaselineMethod::GroupL1,
                "random" => BaselineMethod::Random,
                other => bail!("unknown method `{other}`"),
            };
            let spec = BaselineSpec { method, s, allocation, seed };
            let masks = baseline_masks(graph, &spec)?;
            let (prompt, _map, trace) =
                stage1_prompt_only(graph, train, prompt, &masks, &s1cfg)?;
            (masks, prompt, trace, None)
        }
    };

    let s2 = stage2_finetune(graph, &masks, train, test, prompt, &s2cfg)?;
    let record = RunRecord {
        task: cfg.task.clone(),
        arch: cfg.arch.clone(),
        method: cfg.method.clone(),
        sparsity: s,
        allocation: cfg.allocation.clone(),
        flops: s2.flops,
        params: s2.params,
        acc: s2.final_acc,
        seed,
        epoch_time_s: s1_trace.epoch_time_s,
        epoch_loss: s1_trace.epoch_loss.clone(),
        epoch_acc: s1_trace.epoch_acc.clone(),
        config_hash: hash.to_string(),
    };
    write_run_artifacts(&dir, cfg, hash, &masks, &s2, &record, &s1_trace, hypernet.as_ref())?;
    Ok(record)
}

fn run_dir_name(cfg: &ExperimentConfig, s: f32, seed: u64, hash: &str) -> String {
    let hash8: String = hash.chars().take(8).collect();
    format!(
        "{}-{}-{}-{}-s{:.2}-seed{}-{}",
        cfg.task, cfg.arch, cfg.method, cfg.allocation, s, seed, hash8
    )
}

#[allow(clippy::too_many_arguments)]
fn write_run_artifacts(
    dir: &Path,
    cfg: &ExperimentConfig,
    hash: &str,
    masks: &MaskSet,
    s2: &Stage2Result,
    record: &RunRecord,
    s1_trace: &TrainTrace,
    hypernet: Option<&HypernetState>,
) -> anyhow::Result<()> {
    let mut cfg_value = cfg.to_value();
    cfg_value["config_hash"] = json!(hash);
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&cfg_value)?)?;
    masks.write_to(&dir.join("maskset.json"))?;
    std::fs::write(dir.join("record.json"), record.to_json_string())?;
    let flops = count_flops(&s2.graph, Some(masks))?;
    std::fs::write(dir.join("flops.json"), flops.to_json_string())?;
    let sparsity = sparsity_report(&s2.graph, &[masks])?;
    std::fs::write(dir.join("sparsity.csv"), sparsity.to_csv_string())?;
    std::fs::write(dir.join("sparsity.txt"), sparsity.to_text_table())?;
    std::fs::write(
        dir.join("label_map.json"),
        serde_json::to_string_pretty(&s2.label_map)?,
    )?;
    std::fs::write(
        dir.join("stage1_trace.json"),
        serde_json::to_string_pretty(s1_trace)?,
    )?;
    std::fs::write(
        dir.join("stage2_trace.json"),
        serde_json::to_string_pretty(&json!({
            "trace": s2.trace,
            "test_acc": s2.test_acc,
        }))?,
    )?;
    s2.prompt.save(&dir.join("prompt"))?;
    save_graph(&s2.graph, &dir.join("model"))?;
    if let Some(hn) = hypernet {
        hn.save(&dir.join("hypernet"))?;
    }
    Ok(())
}

// ------------------------------------------------------------- transfer

pub fn cmd_transfer(
    cfg: &ExperimentConfig,
    source_run: &Path,
    modes: &[String],
) -> Result<(), CliError> {
    for m in modes {
        if !matches!(m.as_str(), "mask" | "hypernet") {
            return Err(CliError::Config(anyhow!(
                "unknown transfer mode `{m}` (expected mask or hypernet)"
            )));
        }
    }
    if modes.is_empty() {
        return Err(CliError::Config(anyhow!("no transfer modes requested")));
    }
    let record_path = source_run.join("record.json");
    let source_record: RunRecord = rt_err(
        std::fs::read_to_string(&record_path)
            .with_context(|| format!("missing source checkpoint {}", record_path.display()))
            .and_then(|t| Ok(serde_json::from_str(&t)?)),
    )?;
    let allocation: Allocation =
        cfg_err(source_record.allocation.parse().map_err(|e| anyhow!("{e}")))?;
    let hash = config_hash(&cfg.to_value());

    let (graph, _src) = rt_err(ensure_source_model(cfg))?;
    let hw = (graph.input_shape.1, graph.input_shape.2);
    let (train, test) = rt_err(load_named_task(cfg, &cfg.task, hw))?;

    for &seed in &cfg.seeds {
        let mut s1cfg = cfg.stage1.clone();
        s1cfg.seed = seed;
        let mut s2cfg = cfg.stage2.clone();
        s2cfg.seed = seed;
        for mode in modes {
            let method = format!("{mode}_transfer");
            let (masks, s2, s1_trace, hypernet) = match mode.as_str() {
                "mask" => {
                    let mask_path = source_run.join("maskset.json");
                    let masks = rt_err(MaskSet::read_from(&mask_path).map_err(|e| {
                        anyhow!("missing source checkpoint {}: {e}", mask_path.display())
                    }))?;
                    rt_err(masks.validate(&graph).map_err(|e| anyhow!(e)))?;
                    let prompt = rt_err(build_prompt(&cfg.prompt, hw))?;
                    let s2 = rt_err(
                        transfer_masks(&graph, &masks, &train, &test, prompt, &s2cfg)
                            .map_err(|e| anyhow!(e)),
                    )?;
                    (masks, s2, TrainTrace::default(), None)
                }
                _ => {
                    let hn_path = source_run.join("hypernet");
                    let hn = rt_err(HypernetState::load(&hn_path).map_err(|e| {
                        anyhow!("missing source checkpoint {}: {e}", hn_path.display())
                    }))?;
                    let prompt = rt_err(build_prompt(&cfg.prompt, hw))?;
                    let (s1, s2) = rt_err(
                        transfer_hypernet(
                            &graph,
                            &hn,
                            &train,
                            &test,
                            prompt,
                            &s1cfg,
                            &s2cfg,
                            source_record.sparsity,
                            allocation,
                        )
                        .map_err(|e| anyhow!(e)),
                    )?;
                    (s1.masks, s2, s1.trace, Some(s1.hypernet))
                }
            };
            let record = RunRecord {
                task: cfg.task.clone(),
                arch: cfg.arch.clone(),
                method: method.clone(),
                sparsity: source_record.sparsity,
                allocation: source_record.allocation.clone(),
                flops: s2.flops,
                params: s2.params,
                acc: s2.final_acc,
                seed,
                epoch_time_s: s1_trace.epoch_time_s,
                epoch_loss: s1_trace.epoch_loss.clone(),
                epoch_acc: s1_trace.epoch_acc.clone(),
                config_hash: hash.clone(),
            };
            let mut named = cfg.clone();
            named.method = method.clone();
            let dir = cfg
                .out_dir
                .join("runs")
                .join(run_dir_name(&named, source_record.sparsity, seed, &hash));
            rt_err(std::fs::create_dir_all(&dir).map_err(|e| anyhow!(e)))?;
            rt_err(write_run_artifacts(
                &dir,
                &named,
                &hash,
                &masks,
                &s2,
                &record,
                &s1_trace,
                hypernet.as_ref(),
            ))?;
            rt_err(
                append_record_csv(&cfg.out_dir.join("record.csv"), &record)
                    .map_err(|e| anyhow!(e)),
            )?;
            rt_err(append_transfer_csv(&cfg.out_dir.join("transfer.csv"), &record))?;
            println!("{method} seed={seed}: acc {:.2}%", record.acc);
        }
    }
    Ok(())
}

/// Comparison CSV for transfer runs, idempotent on
/// (mode, task, arch, sparsity, allocation, seed).
fn append_transfer_csv(path: &Path, record: &RunRecord) -> anyhow::Result<()> {
    let header = "mode,task,arch,sparsity,allocation,seed,acc";
    let mut lines: Vec<String> = Vec::new();
    if path.exists() {
        lines = std::fs::read_to_string(path)?
            .lines()
            .skip(1)
            .map(|s| s.to_string())
            .collect();
    }
    let key = format!(
        "{},{},{},{},{},{}",
        record.method, record.task, record.arch, record.sparsity, record.allocation, record.seed
    );
    lines.retain(|l| !l.starts_with(&key));
    lines.push(format!("{key},{}", record.acc));
    std::fs::write(path, format!("{header}\n{}\n", lines.join("\n")))?;
    Ok(())
}

// --------------------------------------------------------------- report

fn collect_records(roots: &[PathBuf]) -> anyhow::Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    for root in roots {
        if !root.exists() {
            continue;
        }
        for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
            let entry = entry?;
            if entry.file_type().is_file() && entry.file_name() == "record.json" {
                let text = std::fs::read_to_string(entry.path())?;
                let rec: RunRecord = serde_json::from_str(&text)
                    .with_context(|| format!("malformed record {}", entry.path().display()))?;
                out.push(rec);
            }
        }
    }
    Ok(out)
}

pub fn cmd_report(runs: &[PathBuf], out: &Path) -> Result<(), CliError> {
    let records = rt_err(collect_records(runs))?;
    if records.is_empty() {
        return Err(CliError::Config(anyhow!(
            "no record.json files found under the given run directories"
        )));
    }
    rt_err(std::fs::create_dir_all(out).map_err(|e| anyhow!(e)))?;

    // Group by everything except the seed.
    let mut groups: std::collections::BTreeMap<(String, String, String, String, u32), Vec<&RunRecord>> =
        Default::default();
    for r in &records {
        let key = (
            r.task.clone(),
            r.arch.clone(),
            r.method.clone(),
            r.allocation.clone(),
            (r.sparsity * 1e4).round() as u32,
        );
        groups.entry(key).or_default().push(r);
    }

    let mut csv = String::from(
        "task,arch,method,allocation,sparsity,seeds,acc_mean,acc_std,flops,params,epoch_time_s\n",
    );
    let mut series: std::collections::BTreeMap<String, Vec<(f64, f64)>> = Default::default();
    for ((task, arch, method, alloc, s4), rs) in &groups {
        let accs: Vec<f64> = rs.iter().map(|r| r.acc).collect();
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let std = if accs.len() > 1 {
            (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (accs.len() - 1) as f64)
                .sqrt()
        } else {
            0.0
        };
        let flops = rs.iter().map(|r| r.flops as f64).sum::<f64>() / rs.len() as f64;
        let params = rs.iter().map(|r| r.params as f64).sum::<f64>() / rs.len() as f64;
        let time = rs.iter().map(|r| r.epoch_time_s).sum::<f64>() / rs.len() as f64;
        let sparsity = *s4 as f64 / 1e4;
        use std::fmt::Write;
        let _ = writeln!(
            csv,
            "{task},{arch},{method},{alloc},{sparsity},{},{mean:.4},{std:.4},{flops:.0},{params:.0},{time:.4}",
            rs.len()
        );
        series
            .entry(format!("{method} ({alloc})"))
            .or_default()
            .push((flops / 1e6, mean));
    }
    rt_err(std::fs::write(out.join("report.csv"), &csv).map_err(|e| anyhow!(e)))?;

    let mut plot_series: Vec<PlotSeries> = series
        .into_iter()
        .map(|(label, mut points)| {
            points.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            PlotSeries { label, points }
        })
        .collect();
    plot_series.sort_by(|a, b| a.label.cmp(&b.label));
    let svg = rt_err(
        plot_accuracy_vs_flops(&plot_series, "accuracy vs FLOPs").map_err(|e| anyhow!(e)),
    )?;
    rt_err(std::fs::write(out.join("accuracy_vs_flops.svg"), svg).map_err(|e| anyhow!(e)))?;
    println!("report over {} records -> {}", records.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------- flops

pub fn cmd_flops(
    arch: &str,
    classes: usize,
    maskset: Option<&Path>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let graph = cfg_err(build_graph(arch, classes, 0).map_err(|e| anyhow!(e)))?;
    let masks = match maskset {
        Some(p) => Some(rt_err(MaskSet::read_from(p).map_err(|e| anyhow!(e)))?),
        None => None,
    };
    if let Some(m) = &masks {
        rt_err(m.validate(&graph).map_err(|e| anyhow!(e)))?;
    }
    let report = rt_err(count_flops(&graph, masks.as_ref()).map_err(|e| anyhow!(e)))?;
    let text = report.to_json_string();
    match out {
        Some(p) => rt_err(std::fs::write(p, text).map_err(|e| anyhow!(e)))?,
        None => println!("{text}"),
    }
    Ok(())
}

// --------------------------------------------------------- masks-export

pub fn cmd_masks_export(run: &Path, out: &Path) -> Result<(), CliError> {
    let src = run.join("maskset.json");
    let masks = rt_err(
        MaskSet::read_from(&src)
            .map_err(|e| anyhow!("missing source checkpoint {}: {e}", src.display())),
    )?;
    rt_err(masks.write_to(out).map_err(|e| anyhow!(e)))?;
    let kept: usize = masks.masks.values().map(|m| m.kept()).sum();
    let total: usize = masks.masks.values().map(|m| m.len()).sum();
    println!("exported {} layer masks ({kept}/{total} channels kept) -> {}", masks.masks.len(), out.display());
    Ok(())
}

// ------------------------------------------------------------- pretrain

pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<(), CliError> {
    if cfg.source_model.is_some() {
        return Err(CliError::Config(anyhow!(
            "config already points at a source model; remove `source_model` to pretrain"
        )));
    }
    let (_, dir) = rt_err(ensure_source_model(cfg))?;
    println!("source model ready at {}", dir.display());
    Ok(())
}
