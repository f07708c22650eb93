use std::path::{Path, PathBuf};

use specialist_ensemble::bands::RuleRegistry;
use specialist_ensemble::downstream::{evaluate, finetune as adapt, DownstreamConfig};
use specialist_ensemble::ensemble::{
    build_ensemble as assemble, dataset_variance_report, load_ensemble, save_ensemble, variance_csv, variance_svg,
    EnsembleModel, EnsembleOptions, NormMode,
};
use specialist_ensemble::metrics::{aggregate_runs_csv, report, ResultTable};
use specialist_ensemble::pruning::{prune as prune_model, scaling_sweep as sweep, sweep_csv, sweep_svg, SweepConfig};
use specialist_ensemble::synthetic::{make_dataset, CueLayout, Dataset, DatasetConfig, Modality, SplitName, TaskSpec};
use specialist_ensemble::training::{train_specialist as train, TrainConfig};
use specialist_ensemble::zoo::{build_encoder, save_checkpoint, EncoderConfig, SpecialistRegistry, REGISTRY_FILE};

use crate::settings::{Failure, Outcome, Settings};
use crate::{
    AggregateRuns, BenchDtb, BuildEnsemble, Finetune, GenData, Prune, RunRecord, ScalingSweep, TrainSpecialist,
    VarianceReport,
};

/// Prints a line to stdout; a closed pipe is not an error.
fn say(line: std::fmt::Arguments) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{line}");
}

fn out_dir(s: &Settings, flag: Option<PathBuf>, rec: &mut RunRecord) -> Outcome<PathBuf> {
    let dir = s.path("out", flag)?.ok_or_else(|| Failure::Usage("--out is required".into()))?;
    std::fs::create_dir_all(&dir).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    rec.output(&dir);
    Ok(dir)
}

fn write(path: &Path, text: impl AsRef<[u8]>, rec: &mut RunRecord) -> Outcome<()> {
    std::fs::write(path, text).map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))?;
    rec.output(path);
    Ok(())
}

fn csv_text(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

fn task(s: &Settings, flag: Option<String>) -> Outcome<Option<TaskSpec>> {
    match s.optional::<String>("task", flag)? {
        None => Ok(None),
        Some(t) => TaskSpec::parse(&t).map(Some).map_err(|e| Failure::Usage(format!("--task: {e}"))),
    }
}

fn load_dataset(s: &Settings, flag: Option<PathBuf>, rec: &mut RunRecord) -> Outcome<Dataset> {
    let p = s.input("dataset", flag)?;
    rec.input("dataset", &p);
    Ok(Dataset::load(&p)?)
}

fn load_registry(s: &Settings, flag: Option<PathBuf>, rec: &mut RunRecord) -> Outcome<SpecialistRegistry> {
    let p = s.input("registry", flag)?;
    rec.input("registry", &p);
    let reg = SpecialistRegistry::load(&p)?;
    if reg.is_empty() {
        return Err(Failure::Runtime(format!("registry {} holds no encoders", p.display())));
    }
    Ok(reg)
}

fn result_row(name: &str, dataset: &Dataset, task: &TaskSpec, score: f64, seed: u64) -> String {
    csv_text(
        &["model", "dataset", "metric", "direction", "score", "seed"],
        [vec![
            name.to_string(),
            dataset.config.name.clone(),
            task.metric.to_string(),
            task.direction.to_string(),
            format!("{score:.6}"),
            seed.to_string(),
        ]],
    )
}

fn selection_csv(model: &EnsembleModel) -> String {
    let active = model.active_encoders(model.selection.k).expect("model k is valid");
    csv_text(
        &["encoder_id", "w", "active"],
        model
            .encoders
            .iter()
            .zip(model.selection.weights())
            .zip(active)
            .map(|((e, w), a)| vec![e.encoder_id.clone(), format!("{w:.6}"), a.to_string()]),
    )
}

pub fn gen_data(s: &Settings, a: GenData, seed: u64, rec: &mut RunRecord) -> Outcome<()> {
    let task = task(s, a.task)?.unwrap_or_else(|| TaskSpec::classification(10));
    let modality: Modality = s.parsed("modality", a.modality)?.unwrap_or(Modality::Rgb);
    let cues: CueLayout = s.parsed("cues", a.cues)?.unwrap_or_default();
    let n = s.pick("n", a.n, 1000)?;
    let size = s.pick("size", a.size, 32)?;
    let ratios = match s.optional::<String>("ratios", a.ratios)? {
        None => [0.8, 0.1, 0.1],
        Some(r) => {
            let parts: Vec<f64> = r
                .split(',')
                .map(|p| p.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| Failure::Usage(format!("--ratios: {e}")))?;
            parts
                .try_into()
                .map_err(|_| Failure::Usage("--ratios: expected three comma-separated fractions".into()))?
        }
    };
    let mut cfg = DatasetConfig::new(task, modality, n, seed, ratios).with_cues(cues).with_size(size);
    if let Some(name) = s.optional::<String>("name", a.name)? {
        cfg = cfg.with_name(&name);
    }
    let out = out_dir(s, a.out, rec)?;
    let ds = make_dataset(&cfg)?;
    ds.save(&out)?;
    let rows = SplitName::ALL.into_iter().flat_map(|split| {
        ds.split(split).iter().map(move |x| {
            vec![
                split.as_str().to_string(),
                x.index.to_string(),
                x.scene_seed.to_string(),
                x.scene_class.to_string(),
            ]
        })
    });
    write(&out.join("index.csv"), csv_text(&["split", "index", "scene_seed", "scene_class"], rows), rec)?;
    eprintln!("{} samples ({} / {} / {}) in {}", ds.len(), ds.train.len(), ds.val.len(), ds.test.len(), out.display());
    Ok(())
}

pub fn train_specialist(s: &Settings, a: TrainSpecialist, seed: u64, rec: &mut RunRecord) -> Outcome<()> {
    let ds = load_dataset(s, a.dataset, rec)?;
    let task = task(s, a.task)?.unwrap_or_else(|| ds.task());
    let enc_cfg = match s.path("encoder-config", a.encoder_config)? {
        None => EncoderConfig::default(),
        Some(p) => {
            let p = crate::settings::existing("encoder-config", p)?;
            rec.input("encoder-config", &p);
            let text = std::fs::read_to_string(&p)
                .map_err(|e| Failure::Runtime(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| Failure::Runtime(format!("{}: {}", p.display(), e.message())))?
        }
    };
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        max_epochs: s.pick("epochs", a.epochs, d.max_epochs)?,
        batch_size: s.pick("batch", a.batch, d.batch_size)?,
        learning_rate: s.pick("lr", a.lr, d.learning_rate)?,
        patience: s.pick("patience", a.patience, d.patience)?,
        tile_size: s.optional("tile-size", a.tile_size)?,
        seed,
    };
    let id = s.pick("id", a.id, ds.config.name.clone())?;
    let registry = s.path("registry", a.registry)?;
    let out = out_dir(s, a.out, rec)?;
    let enc = build_encoder(&id, &enc_cfg, ds.spec(), seed)?;
    let outcome = train(&enc, &ds, &task, &cfg)?;
    save_checkpoint(&outcome.encoder, &out)?;
    write(&out.join("history.csv"), outcome.history.to_csv(), rec)?;
    if let Some(dir) = registry {
        let mut reg = if dir.join(REGISTRY_FILE).exists() {
            SpecialistRegistry::load(&dir)?
        } else {
            SpecialistRegistry::new()
        };
        reg.register(outcome.encoder.clone())?;
        reg.save(&dir)?;
        rec.output(&dir);
    }
    eprintln!(
        "{id}: best {} {:.4} at epoch {}",
        task.metric, outcome.history.best_val, outcome.history.best_epoch
    );
    Ok(())
}

fn norm_mode(s: &Settings, flag: Option<String>) -> Outcome<NormMode> {
    Ok(s.parsed("norm", flag)?.unwrap_or(NormMode::Batch))
}

pub fn build_ensemble(s: &Settings, a: BuildEnsemble, seed: u64, rec: &mut RunRecord) -> Outcome<()> {
    let reg = load_registry(s, a.registry, rec)?;
    let modality: Modality = s.parsed("modality", a.modality)?.unwrap_or(Modality::Ms);
    let task = task(s, a.task)?.ok_or_else(|| Failure::Usage("--task is required".into()))?;
    let rules = match s.path("rules", a.rules)? {
        None => RuleRegistry::standard(),
        Some(p) => {
            let p = crate::settings::existing("rules", p)?;
            rec.input("rules", &p);
            let text = std::fs::read_to_string(&p)
                .map_err(|e| Failure::Runtime(format!("cannot read {}: {e}", p.display())))?;
            RuleRegistry::parse(&text)?
        }
    };
    let encoders = match s.optional::<String>("encoders", a.encoders)? {
        None => reg.encoders().to_vec(),
        Some(list) => list
            .split(',')
            .map(|id| {
                reg.get(id.trim())
                    .cloned()
                    .ok_or_else(|| Failure::Usage(format!("--encoders: `{id}` is not in the registry")))
            })
            .collect::<Outcome<_>>()?,
    };
    let opts = EnsembleOptions {
        norm_mode: norm_mode(s, a.norm)?,
        k: s.optional("k", a.k)?,
        warmup_epochs: s.pick("warmup", a.warmup, EnsembleOptions::default().warmup_epochs)?,
        seed,
        ..EnsembleOptions::default()
    };
    let out = out_dir(s, a.out, rec)?;
    let model = assemble(encoders, rules, modality.spec(), task, &opts)?;
    save_ensemble(&model, &out)?;
    let rows = model
        .branches()
        .iter()
        .map(|b| vec![b.branch.encoder_id.clone(), b.branch.rule_id.clone()]);
    write(&out.join("branches.csv"), csv_text(&["encoder_id", "rule_id"], rows), rec)?;
    eprintln!("{} encoders, {} branches", model.len(), model.branches().len());
    Ok(())
}

fn downstream_config(
    s: &Settings,
    epochs: Option<usize>,
    batch: Option<usize>,
    lr: Option<f64>,
    seed: u64,
) -> Outcome<DownstreamConfig> {
    let d = DownstreamConfig::default();
    Ok(DownstreamConfig {
        epochs: s.pick("epochs", epochs, d.epochs)?,
        batch_size: s.pick("batch", batch, d.batch_size)?,
        learning_rate: s.pick("lr", lr, d.learning_rate)?,
        seed,
        ..d
    })
}

/// Adapts `model`, then writes checkpoint, history, selection and result rows.
fn adapt_and_save(
    model: &EnsembleModel,
    ds: &Dataset,
    cfg: &DownstreamConfig,
    name: &str,
    out: &Path,
    rec: &mut RunRecord,
) -> Outcome<()> {
    let (best, history) = adapt(model, ds, cfg, |epoch, m| {
        let w: Vec<String> = m.selection.weights().iter().map(|w| format!("{w:.3}")).collect();
        eprintln!("epoch {epoch}: w = [{}]", w.join(", "));
    })?;
    save_ensemble(&best, out)?;
    write(&out.join("history.csv"), history.to_csv(), rec)?;
    write(&out.join("selection.csv"), selection_csv(&best), rec)?;
    let score = evaluate(&best, &ds.test, &best.task)?;
    write(&out.join("result.csv"), result_row(name, ds, &best.task, score, cfg.seed), rec)?;
    eprintln!(
        "best val {} {:.4} at epoch {}; test {score:.4}",
        best.task.metric, history.best_val, history.best_epoch
    );
    Ok(())
}

pub fn finetune(s: &Settings, a: Finetune, seed: u64, rec: &mut RunRecord) -> Outcome<()> {
    let dir = s.input("ensemble", a.ensemble)?;
    rec.input("ensemble", &dir);
    let model = load_ensemble(&dir)?;
    let ds = load_dataset(s, a.dataset, rec)?;
    if let Some(t) = task(s, a.task)? {
        if t != model.task {
            return Err(Failure::Runtime(format!("ensemble was built for {}, not {t}", model.task)));
        }
    }
    let cfg = DownstreamConfig {
        label_fraction: s.pick("label-fraction", a.label_fraction, 1.0)?,
        k: s.optional("k", a.k)?,
        warmup_epochs: s.pick("warmup", a.warmup, model.selection.warmup_epochs)?,
        ..downstream_config(s, a.epochs, a.batch, a.lr, seed)?
    };
    let name = s.pick("name", a.name, format!("ensemble-k{}", cfg.k.unwrap_or(model.selection.k)))?;
    let out = out_dir(s, a.out, rec)?;
    adapt_and_save(&model, &ds, &cfg, &name, &out, rec)
}

pub fn prune(s: &Settings, a: Prune, seed: u64, rec: &mut RunRecord) -> Outcome<()> {
    let dir = s.input("model", a.model)?;
    rec.input("model", &dir);
    let model = load_ensemble(&dir)?;
    let k = s.optional("k", a.k)?.ok_or_else(|| Failure::Usage("--k is required".into()))?;
    let refit = match s.path("refinetune", a.refinetune)? {
        None => None,
        Some(p) => Some(load_dataset(s, Some(p), rec)?),
    };
    let cfg = downstream_config(s, a.epochs, a.batch, a.lr, seed)?;
    let out = out_dir(s, a.out, rec)?;
    let pruned = prune_model(&model, k)?;
    if pruned.degenerate {
        eprintln!("warning: all selection weights are equal; kept the first {k} encoders");
    }
    let w = pruned.model.selection.weights().to_vec();
    let rows = pruned.kept.iter().zip(&w).map(|(id, w)| vec![id.clone(), format!("{w:.6}")]);
    write(&out.join("kept.csv"), csv_text(&["encoder_id", "w"], rows), rec)?;
    eprintln!("kept {} ({} parameters, was {})", pruned.kept.join(", "), pruned.model.param_count(), model.param_count());
    match refit {
        None => save_ensemble(&pruned.model, &out)?,
        Some(ds) => {
            let cfg = DownstreamConfig {
                warmup_epochs: 0,
                ..cfg
            };
            adapt_and_save(&pruned.model, &ds, &cfg, &format!("ensemble-pruned-k{k}"), &out, rec)?;
        }
    }
    Ok(())
}

fn parse_list(flag: &str, text: &str, n: usize) -> Outcome<Vec<u64>> {
    let bad = |e: String| Failure::Usage(format!("--{flag}: {e}"));
    let num = |t: &str| -> Outcome<u64> {
        match t.trim() {
            "N" | "n" => Ok(n as u64),
            t => t.parse().map_err(|e| bad(format!("`{t}`: {e}"))),
        }
    };
    if let Some((lo, hi)) = text.split_once("..") {
        let (lo, hi) = (num(lo)?, num(hi)?);
        if lo > hi {
            return Err(bad(format!("empty range `{text}`")));
        }
        return Ok((lo..=hi).collect());
    }
    text.split(',').map(num).collect()
}

pub fn scaling_sweep(s: &Settings, a: ScalingSweep, seed: u64, rec: &mut RunRecord) -> Outcome<()> {
    let reg = load_registry(s, a.registry, rec)?;
    let ds = load_dataset(s, a.dataset, rec)?;
    let task = task(s, a.task)?.unwrap_or_else(|| ds.task());
    let rules = RuleRegistry::standard();
    let n = reg
        .encoders()
        .iter()
        .filter(|e| !rules.applicable_rules(&ds.spec(), &e.required_spec).is_empty())
        .count();
    let ks = parse_list("ks", &s.pick("ks", a.ks, "1..N".to_string())?, n)?;
    let seeds = parse_list("seeds", &s.pick("seeds", a.seeds, "0,1,2".to_string())?, n)?;
    let cfg = SweepConfig {
        ks: ks.into_iter().map(|k| k as usize).collect(),
        seeds,
        ensemble: EnsembleOptions {
            norm_mode: norm_mode(s, a.norm)?,
            seed,
            ..EnsembleOptions::default()
        },
        downstream: DownstreamConfig {
            label_fraction: s.pick("label-fraction", a.label_fraction, 1.0)?,
            warmup_epochs: s.pick("warmup", a.warmup, DownstreamConfig::default().warmup_epochs)?,
            ..downstream_config(s, a.epochs, a.batch, a.lr, seed)?
        },
    };
    let out = out_dir(s, a.out, rec)?;
    let rows = sweep(reg.encoders(), &rules, &ds, &task, &cfg)?;
    write(&out.join("sweep.csv"), sweep_csv(&rows), rec)?;
    write(&out.join("sweep.svg"), sweep_svg(&rows, task.metric.as_str()), rec)?;
    for (k, m) in specialist_ensemble::pruning::median_curve(&rows) {
        eprintln!("k={k}: median {} {m:.4}", task.metric);
    }
    Ok(())
}

pub fn variance_report(s: &Settings, a: VarianceReport, seed: u64, rec: &mut RunRecord) -> Outcome<()> {
    let ds = load_dataset(s, a.dataset, rec)?;
    let model = match (s.path("ensemble", a.ensemble)?, s.path("registry", a.registry)?) {
        (Some(dir), _) => {
            let dir = crate::settings::existing("ensemble", dir)?;
            rec.input("ensemble", &dir);
            load_ensemble(&dir)?
        }
        (None, Some(dir)) => {
            let reg = load_registry(s, Some(dir), rec)?;
            let opts = EnsembleOptions {
                seed,
                ..EnsembleOptions::default()
            };
            assemble(reg.encoders().to_vec(), RuleRegistry::standard(), ds.spec(), ds.task(), &opts)?
        }
        (None, None) => return Err(Failure::Usage("--ensemble or --registry is required".into())),
    };
    let batches = s.pick("batches", a.batches, 4)?;
    let batch = s.pick("batch", a.batch, 8)?;
    let out = out_dir(s, a.out, rec)?;
    let rows = dataset_variance_report(&model, &ds, batches, batch)?;
    write(&out.join("variance.csv"), variance_csv(&rows), rec)?;
    write(&out.join("variance.svg"), variance_svg(&rows), rec)?;
    Ok(())
}

pub fn bench_dtb(s: &Settings, a: BenchDtb, rec: &mut RunRecord) -> Outcome<()> {
    let input = s.input("in", a.input)?;
    rec.input("in", &input);
    let out = out_dir(s, a.out, rec)?;
    let rows = report(&ResultTable::load(&input)?, &out)?;
    rec.output(&out.join("dtb.csv"));
    rec.output(&out.join("dtb.svg"));
    for r in rows {
        say(format_args!("{:<24} {:>8.4} {:>3}", r.model, r.avg_dtb, r.top2));
    }
    Ok(())
}

pub fn aggregate_runs(s: &Settings, a: AggregateRuns, rec: &mut RunRecord) -> Outcome<()> {
    let input = s.input("in", a.input)?;
    rec.input("in", &input);
    let text = std::fs::read_to_string(&input)
        .map_err(|e| Failure::Runtime(format!("cannot read {}: {e}", input.display())))?;
    let stats = aggregate_runs_csv(&text)?;
    let out = out_dir(s, a.out, rec)?;
    let rows = stats.iter().map(|(name, st)| {
        vec![
            name.clone(),
            st.values.len().to_string(),
            format!("{:.2}", st.mean),
            format!("{:.2}", st.std),
            st.to_string(),
        ]
    });
    write(&out.join("runs.csv"), csv_text(&["name", "runs", "mean", "std", "summary"], rows), rec)?;
    for (name, st) in &stats {
        say(format_args!("{name}: {st}"));
    }
    Ok(())
}
