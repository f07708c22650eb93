//! Physical removal of non-selected encoders, and the ensemble-size sweep.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bands::RuleRegistry;
use crate::downstream::{finetune_cached, subsample_stratified, DownstreamConfig, FeatureCache};
use crate::ensemble::{build_ensemble, top_k, EnsembleModel, EnsembleOptions};
use crate::error::{Error, Result};
use crate::synthetic::{Dataset, TaskSpec};
use crate::zoo::SpecialistEncoder;

#[derive(Clone, Debug)]
pub struct PruneOutcome {
    pub model: EnsembleModel,
    pub kept: Vec<String>,
    /// Every selection weight was equal, so the kept set is simply the first
    /// `k` registered encoders.
    pub degenerate: bool,
}

/// Keeps the top-`k` encoders by selection weight (ties to the earlier
/// registration) with their branches, normalizer slots and fusion columns.
pub fn prune(model: &EnsembleModel, k: usize) -> Result<PruneOutcome> {
    let n = model.len();
    let keep = top_k(model.selection.weights(), k)?;
    let degenerate = k < n && model.selection.is_uniform();
    let pruned = if k == n {
        model.clone()
    } else {
        let mut m = model.restrict(&keep)?;
        m.selection.k = k;
        m
    };
    Ok(PruneOutcome {
        kept: pruned.encoders.iter().map(|e| e.encoder_id.clone()).collect(),
        model: pruned,
        degenerate,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub seed: u64,
    pub metric: f64,
}

#[derive(Clone, Debug)]
pub struct SweepConfig {
    pub ks: Vec<usize>,
    pub seeds: Vec<u64>,
    pub ensemble: EnsembleOptions,
    pub downstream: DownstreamConfig,
}

/// Best validation metric of a fresh adaptation for every `(k, seed)`.
/// `k` ranges over the encoders that can see the dataset's modality.
/// Cells run in parallel; rows come back ordered by `(k, seed)`.
pub fn scaling_sweep(
    encoders: &[SpecialistEncoder],
    rules: &RuleRegistry,
    dataset: &Dataset,
    task: &TaskSpec,
    cfg: &SweepConfig,
) -> Result<Vec<SweepRow>> {
    let build = |seed: u64| {
        let opts = EnsembleOptions {
            seed,
            k: None,
            ..cfg.ensemble.clone()
        };
        build_ensemble(encoders.to_vec(), rules.clone(), dataset.spec(), task.clone(), &opts)
    };
    let base = build(cfg.ensemble.seed)?;
    let n = base.len();
    if let Some(&k) = cfg.ks.iter().find(|&&k| k == 0 || k > n) {
        return Err(Error::Sparsity { k, n });
    }
    let train_set = if cfg.downstream.label_fraction < 1.0 {
        subsample_stratified(dataset, cfg.downstream.label_fraction, cfg.downstream.seed)?.train
    } else {
        dataset.train.clone()
    };
    let train = FeatureCache::build(&base, &train_set, cfg.downstream.batch_size)?;
    let val = FeatureCache::build(&base, &dataset.val, cfg.downstream.batch_size)?;
    let cells: Vec<(usize, u64)> = cfg
        .ks
        .iter()
        .flat_map(|&k| cfg.seeds.iter().map(move |&s| (k, s)))
        .collect();
    let mut rows = cells
        .par_iter()
        .map(|&(k, seed)| {
            let model = build(seed)?;
            let dc = DownstreamConfig {
                k: Some(k),
                seed,
                ..cfg.downstream.clone()
            };
            let (_, history) = finetune_cached(&model, &train_set, &train, &dataset.val, &val, &dc, |_, _| {})?;
            Ok(SweepRow {
                k,
                seed,
                metric: history.best_val,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| (a.k, a.seed).cmp(&(b.k, b.seed)));
    Ok(rows)
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => values[n / 2],
        _ => (values[n / 2 - 1] + values[n / 2]) / 2.0,
    }
}

/// `(k, median metric)` in ascending `k`.
pub fn median_curve(rows: &[SweepRow]) -> Vec<(usize, f64)> {
    let mut ks: Vec<usize> = rows.iter().map(|r| r.k).collect();
    ks.dedup();
    ks.into_iter()
        .map(|k| {
            let mut v: Vec<f64> = rows.iter().filter(|r| r.k == k).map(|r| r.metric).collect();
            (k, median(&mut v))
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(["k", "seed", "metric"]).expect("in-memory write");
    for r in rows {
        w.write_record([r.k.to_string(), r.seed.to_string(), format!("{:.6}", r.metric)])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

pub fn sweep_svg(rows: &[SweepRow], metric_name: &str) -> String {
    let line: Vec<(f64, f64)> = median_curve(rows).into_iter().map(|(k, m)| (k as f64, m)).collect();
    let dots: Vec<(f64, f64)> = rows.iter().map(|r| (r.k as f64, r.metric)).collect();
    crate::plot::line_chart("Validation metric by ensemble size", "k", metric_name, &line, &dots)
}
