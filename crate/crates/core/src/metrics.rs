//! Metric kernels, Distance-To-Best over a score table, and multi-run
//! aggregation.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{read_text, write_file, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::HigherBetter => "higher_better",
            Direction::LowerBetter => "lower_better",
        }
    }

    /// True when `a` is strictly better than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            Direction::HigherBetter => a > b,
            Direction::LowerBetter => a < b,
        }
    }

    pub fn best(self, values: impl IntoIterator<Item = f64>) -> Option<f64> {
        values
            .into_iter()
            .reduce(|a, b| if self.better(b, a) { b } else { a })
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "higher_better" => Ok(Direction::HigherBetter),
            "lower_better" => Ok(Direction::LowerBetter),
            other => Err(Error::UnknownDirection {
                token: other.to_string(),
                line: 0,
            }),
        }
    }
}

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("prediction has {a} elements, ground truth {b}")));
    }
    Ok(())
}

/// Mean IoU over the classes present in `gt ∪ pred`.
pub fn miou(pred: &[usize], gt: &[usize], num_classes: usize) -> Result<f64> {
    same_len(pred.len(), gt.len())?;
    let mut inter = vec![0usize; num_classes];
    let mut union = vec![0usize; num_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        if p >= num_classes || g >= num_classes {
            return Err(Error::Shape(format!("label {} outside [0, {num_classes})", p.max(g))));
        }
        if p == g {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[g] += 1;
        }
    }
    let present: Vec<f64> = inter
        .iter()
        .zip(&union)
        .filter(|(_, &u)| u > 0)
        .map(|(&i, &u)| i as f64 / u as f64)
        .collect();
    if present.is_empty() {
        return Err(Error::Empty("no labels to score".into()));
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

pub fn rmse(pred: &[f64], gt: &[f64]) -> Result<f64> {
    same_len(pred.len(), gt.len())?;
    if pred.is_empty() {
        return Err(Error::Empty("no values to score".into()));
    }
    let sq: f64 = pred.iter().zip(gt).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sq / pred.len() as f64).sqrt())
}

pub fn accuracy(pred: &[usize], gt: &[usize]) -> Result<f64> {
    same_len(pred.len(), gt.len())?;
    if pred.is_empty() {
        return Err(Error::Empty("no labels to score".into()));
    }
    let hits = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Model × dataset score matrix with one optimization direction per dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultTable {
    datasets: Vec<(String, Direction)>,
    rows: Vec<(String, Vec<f64>)>,
}

#[derive(Debug, Deserialize, Serialize)]
struct LongRecord {
    model: String,
    dataset: String,
    direction: String,
    score: f64,
}

pub const RESULT_HEADER: [&str; 4] = ["model", "dataset", "direction", "score"];

impl ResultTable {
    pub fn new(datasets: Vec<(String, Direction)>, rows: Vec<(String, Vec<f64>)>) -> Result<Self> {
        for (model, scores) in &rows {
            if scores.len() != datasets.len() {
                return Err(Error::Shape(format!(
                    "row `{model}` has {} scores for {} datasets",
                    scores.len(),
                    datasets.len()
                )));
            }
        }
        for (i, (d, _)) in datasets.iter().enumerate() {
            if datasets[..i].iter().any(|(o, _)| o == d) {
                return Err(Error::DuplicateId(d.clone()));
            }
        }
        for (i, (m, _)) in rows.iter().enumerate() {
            if rows[..i].iter().any(|(o, _)| o == m) {
                return Err(Error::DuplicateId(m.clone()));
            }
        }
        Ok(Self { datasets, rows })
    }

    pub fn datasets(&self) -> &[(String, Direction)] {
        &self.datasets
    }

    pub fn rows(&self) -> &[(String, Vec<f64>)] {
        &self.rows
    }

    /// Pivots long-format CSV (`model,dataset,direction,score`). Models and
    /// datasets keep first-appearance order.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let header = reader.headers()?.clone();
        if header.iter().ne(RESULT_HEADER) {
            return Err(Error::Parse {
                line: 1,
                reason: format!("header must be `{}`", RESULT_HEADER.join(",")),
            });
        }
        let mut datasets: Vec<(String, Direction)> = Vec::new();
        let mut models: Vec<String> = Vec::new();
        let mut cells: HashMap<(usize, usize), f64> = HashMap::new();
        for record in reader.records() {
            let record = record?;
            let line = record.position().map_or(0, |p| p.line() as usize);
            let rec: LongRecord = record.deserialize(Some(&header)).map_err(|e| Error::Parse {
                line,
                reason: e.to_string(),
            })?;
            let direction: Direction = rec.direction.parse().map_err(|_| Error::UnknownDirection {
                token: rec.direction.clone(),
                line,
            })?;
            if !rec.score.is_finite() {
                return Err(Error::Parse {
                    line,
                    reason: format!("score `{}` is not finite", rec.score),
                });
            }
            let d = match datasets.iter().position(|(n, _)| *n == rec.dataset) {
                Some(d) if datasets[d].1 != direction => {
                    return Err(Error::Parse {
                        line,
                        reason: format!(
                            "dataset `{}` declared both {} and {direction}",
                            rec.dataset, datasets[d].1
                        ),
                    })
                }
                Some(d) => d,
                None => {
                    datasets.push((rec.dataset.clone(), direction));
                    datasets.len() - 1
                }
            };
            let m = models.iter().position(|n| *n == rec.model).unwrap_or_else(|| {
                models.push(rec.model.clone());
                models.len() - 1
            });
            if cells.insert((m, d), rec.score).is_some() {
                return Err(Error::DuplicateCell {
                    model: rec.model,
                    dataset: rec.dataset,
                });
            }
        }
        if models.is_empty() {
            return Err(Error::Empty("result table has no rows".into()));
        }
        let mut rows = Vec::with_capacity(models.len());
        for (m, model) in models.iter().enumerate() {
            let scores = datasets
                .iter()
                .enumerate()
                .map(|(d, (dataset, _))| {
                    cells.get(&(m, d)).copied().ok_or_else(|| Error::MissingCell {
                        model: model.clone(),
                        dataset: dataset.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push((model.clone(), scores));
        }
        Self::new(datasets, rows)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(RESULT_HEADER).expect("in-memory write");
        for (model, scores) in &self.rows {
            for ((dataset, dir), score) in self.datasets.iter().zip(scores) {
                w.write_record([model.as_str(), dataset, dir.as_str(), &score.to_string()])
                    .expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_csv(&read_text(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_csv())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DtbRow {
    pub model: String,
    pub avg_dtb: f64,
    /// Datasets on which the model ranks first or second.
    pub top2: usize,
}

/// Average Distance-To-Best per model, where the best score on each dataset
/// ranges over every row of the table. Sorted descending by `avg_dtb`; equal
/// values keep table order.
pub fn dtb(table: &ResultTable) -> Result<Vec<DtbRow>> {
    if table.rows.is_empty() || table.datasets.is_empty() {
        return Err(Error::Empty("DTB needs at least one model and one dataset".into()));
    }
    let best: Vec<f64> = table
        .datasets
        .iter()
        .enumerate()
        .map(|(d, (_, dir))| dir.best(table.rows.iter().map(|(_, s)| s[d])).expect("non-empty"))
        .collect();
    let mut out: Vec<DtbRow> = table
        .rows
        .iter()
        .map(|(model, scores)| {
            let total: f64 = scores.iter().zip(&best).map(|(s, b)| (b - s).abs()).sum();
            let top2 = table
                .datasets
                .iter()
                .enumerate()
                .filter(|(d, (_, dir))| {
                    let strictly_better = table.rows.iter().filter(|(_, o)| dir.better(o[*d], scores[*d])).count();
                    strictly_better < 2
                })
                .count();
            DtbRow {
                model: model.clone(),
                avg_dtb: total / best.len() as f64,
                top2,
            }
        })
        .collect();
    out.sort_by(|a, b| b.avg_dtb.total_cmp(&a.avg_dtb));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunStats {
    pub values: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator); 0 for a single run.
    pub std: f64,
}

impl fmt::Display for RunStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.std)
    }
}

pub fn aggregate_runs(values: &[f64]) -> Result<RunStats> {
    if values.is_empty() {
        return Err(Error::Empty("no runs to aggregate".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(RunStats {
        values: values.to_vec(),
        mean,
        std,
    })
}

/// Groups a `name,score` CSV by name (first-appearance order) and aggregates
/// each group.
pub fn aggregate_runs_csv(text: &str) -> Result<Vec<(String, RunStats)>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = reader.headers()?.clone();
    if header.len() != 2 {
        return Err(Error::Parse {
            line: 1,
            reason: "expected a two-column `name,score` header".into(),
        });
    }
    let mut groups: Vec<(String, Vec<f64>)> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let (name, raw) = (&record[0], &record[1]);
        let value: f64 = raw
            .trim_end_matches('*')
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| Error::Parse {
                line,
                reason: format!("bad score `{raw}`"),
            })?;
        match groups.iter_mut().find(|(n, _)| n == name) {
            Some((_, v)) => v.push(value),
            None => groups.push((name.to_string(), vec![value])),
        }
    }
    if groups.is_empty() {
        return Err(Error::Empty("no runs to aggregate".into()));
    }
    groups
        .into_iter()
        .map(|(name, v)| Ok((name, aggregate_runs(&v)?)))
        .collect()
}

/// Writes `dtb.csv` (model, avg_dtb, top2) and a horizontal bar chart.
pub fn report(table: &ResultTable, out_dir: &Path) -> Result<Vec<DtbRow>> {
    crate::error::create_dir(out_dir)?;
    let rows = dtb(table)?;
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(["model", "avg_dtb", "top2"])?;
    for r in &rows {
        w.write_record([r.model.as_str(), &format!("{:.4}", r.avg_dtb), &r.top2.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io {
        path: out_dir.join("dtb.csv"),
        source: e.into_error(),
    })?;
    write_file(&out_dir.join("dtb.csv"), bytes)?;
    let bars: Vec<(String, f64)> = rows.iter().rev().map(|r| (r.model.clone(), r.avg_dtb)).collect();
    write_file(&out_dir.join("dtb.svg"), crate::plot::bar_chart("Avg DTB (lower is better)", &bars))?;
    Ok(rows)
}
