//! Bootstrap hyperparameter-importance analysis over sweep results.
//!
//! Given a table of runs, each tagged with hyperparameter values and final
//! metrics, the analyzer estimates how often each value of one
//! hyperparameter "wins" under resampling. Runs are drawn with replacement,
//! weighted inversely by how many runs share their hyperparameter value (so
//! a value tried 50 times does not drown out one tried 5 times); within a
//! resample each value's best metric competes, and the fraction of resamples
//! a value wins — together with a percentile confidence interval over its
//! per-resample best scores — quantifies that value's importance.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, stream};

/// One completed run: its hyperparameter assignment and final metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub run_id: String,
    /// Hyperparameter values as written, keyed by `hp_*` column name.
    pub hyperparameters: BTreeMap<String, String>,
    /// Metrics keyed by `m_*` column name.
    pub metrics: BTreeMap<String, f64>,
}

/// Per-value statistics in an importance report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueReport {
    pub value: String,
    /// Runs in the input carrying this value.
    pub n_runs: usize,
    /// Fraction of bootstrap iterations this value won.
    pub win_rate: f64,
    /// Mean of the per-iteration best scores (None if the value never
    /// appeared in a resample).
    pub mean_score: Option<f64>,
    /// 2.5th percentile of per-iteration best scores.
    pub ci_lo: Option<f64>,
    /// 97.5th percentile of per-iteration best scores.
    pub ci_hi: Option<f64>,
    /// Number of resamples in which this value appeared.
    pub n_samples: usize,
}

/// Full bootstrap result for one hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub hp: String,
    pub metric: String,
    pub iters: usize,
    pub n_records: usize,
    /// Sorted by descending win rate, ties broken by value name.
    pub values: Vec<ValueReport>,
}

impl ImportanceReport {
    /// The winning value: highest win rate, ties to the lexicographically
    /// smallest value.
    pub fn winner(&self) -> &ValueReport {
        &self.values[0]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(serde_json::to_string_pretty(self)?.as_bytes())?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::input(format!("{}: malformed report: {e}", path.display())))
    }
}

/// Linear-interpolation percentile of a sorted sample (the same convention
/// as numpy's default): `p` in [0, 1].
fn percentile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty(), "percentile of an empty sample");
    if sorted.len() == 1 {
        return sorted[0];
    }
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Runs the weighted bootstrap for one hyperparameter.
///
/// Every record must carry `hp` and a finite `metric`. Each iteration draws
/// `records.len()` records with replacement, with probability proportional
/// to `1 / |group(value)|`; the iteration's winner is the value whose best
/// drawn metric is highest (ties to the lexicographically smallest value).
pub fn bootstrap_importance(
    records: &[RunRecord],
    hp: &str,
    metric: &str,
    iters: usize,
    seed: u64,
) -> Result<ImportanceReport> {
    if records.is_empty() {
        return Err(Error::input("no run records to analyze"));
    }
    if iters == 0 {
        return Err(Error::domain("iters must be >= 1"));
    }

    // Validate and index.
    let mut values: Vec<&str> = Vec::with_capacity(records.len());
    for record in records {
        let value = record.hyperparameters.get(hp).ok_or_else(|| {
            Error::domain(format!(
                "run {} lacks hyperparameter {hp:?}; available: {:?}",
                record.run_id,
                record.hyperparameters.keys().collect::<Vec<_>>()
            ))
        })?;
        let m = record.metrics.get(metric).ok_or_else(|| {
            Error::domain(format!(
                "run {} lacks metric {metric:?}; available: {:?}",
                record.run_id,
                record.metrics.keys().collect::<Vec<_>>()
            ))
        })?;
        if !m.is_finite() {
            return Err(Error::domain(format!(
                "run {} has non-finite {metric:?} = {m}",
                record.run_id
            )));
        }
        values.push(value);
    }

    let mut group_sizes: BTreeMap<&str, usize> = BTreeMap::new();
    for &v in &values {
        *group_sizes.entry(v).or_insert(0) += 1;
    }

    // Inverse-group-size weights, normalized, as a cumulative distribution.
    let raw: Vec<f64> = values.iter().map(|v| 1.0 / group_sizes[v] as f64).collect();
    let total: f64 = raw.iter().sum();
    let mut cumulative = Vec::with_capacity(raw.len());
    let mut acc = 0.0;
    for w in &raw {
        acc += w / total;
        cumulative.push(acc);
    }
    *cumulative.last_mut().unwrap() = 1.0; // guard against fp shortfall

    let metrics: Vec<f64> = records.iter().map(|r| r.metrics[metric]).collect();

    let mut rng = rng::stream_rng(seed, &[stream::BOOTSTRAP]);
    let n = records.len();
    let mut wins: BTreeMap<&str, usize> = group_sizes.keys().map(|&v| (v, 0)).collect();
    let mut scores: BTreeMap<&str, Vec<f64>> =
        group_sizes.keys().map(|&v| (v, Vec::new())).collect();
    let mut best_in_iter: BTreeMap<&str, f64> = BTreeMap::new();
    for _ in 0..iters {
        best_in_iter.clear();
        for _ in 0..n {
            let u: f64 = rng.random();
            let idx = cumulative.partition_point(|&c| c <= u).min(n - 1);
            let value = values[idx];
            let m = metrics[idx];
            best_in_iter
                .entry(value)
                .and_modify(|b| *b = b.max(m))
                .or_insert(m);
        }
        // Winner: best score, ties to the smallest value. BTreeMap iterates
        // in key order, so strict `>` keeps the first (smallest) maximizer.
        let mut winner = None;
        let mut best = f64::NEG_INFINITY;
        for (&value, &score) in &best_in_iter {
            if score > best {
                best = score;
                winner = Some(value);
            }
            scores.get_mut(value).expect("value seen in draw must be indexed").push(score);
        }
        *wins.get_mut(winner.expect("at least one draw per iteration")).unwrap() += 1;
    }

    let mut reports: Vec<ValueReport> = group_sizes
        .iter()
        .map(|(&value, &n_runs)| {
            let mut samples = scores.remove(value).unwrap();
            samples.sort_by(f64::total_cmp);
            let n_samples = samples.len();
            let (mean_score, ci_lo, ci_hi) = if samples.is_empty() {
                (None, None, None)
            } else {
                (
                    Some(samples.iter().sum::<f64>() / n_samples as f64),
                    Some(percentile(&samples, 0.025)),
                    Some(percentile(&samples, 0.975)),
                )
            };
            ValueReport {
                value: value.to_string(),
                n_runs,
                win_rate: wins[value] as f64 / iters as f64,
                mean_score,
                ci_lo,
                ci_hi,
                n_samples,
            }
        })
        .collect();
    reports.sort_by(|a, b| {
        b.win_rate.total_cmp(&a.win_rate).then_with(|| a.value.cmp(&b.value))
    });

    Ok(ImportanceReport {
        hp: hp.to_string(),
        metric: metric.to_string(),
        iters,
        n_records: records.len(),
        values: reports,
    })
}

/// Bootstraps every listed hyperparameter over the pooled records and
/// returns each one's winning value.
pub fn aggregate_select(
    records: &[RunRecord],
    hps: &[String],
    metric: &str,
    iters: usize,
    seed: u64,
) -> Result<BTreeMap<String, String>> {
    let mut sorted: Vec<&String> = hps.iter().collect();
    sorted.sort();
    sorted.dedup();
    let mut selected = BTreeMap::new();
    for (idx, hp) in sorted.iter().enumerate() {
        let report = bootstrap_importance(
            records,
            hp,
            metric,
            iters,
            rng::mix(seed, &[stream::BOOTSTRAP, idx as u64]),
        )?;
        selected.insert(hp.to_string(), report.winner().value.clone());
    }
    Ok(selected)
}

/// Reads a results CSV: a `run_id` column, an optional `status` column
/// (rows whose status is not `ok` are skipped), `hp_*` hyperparameter
/// columns, and numeric `m_*` metric columns. Kept rows must have every
/// `hp_*`/`m_*` cell populated; duplicates and malformed cells are input
/// errors naming the offending row.
pub fn load_results(path: &Path) -> Result<Vec<RunRecord>> {
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_path(path)?;
    let headers = reader.headers()?.clone();
    let mut run_id_col = None;
    let mut status_col = None;
    let mut hp_cols = Vec::new();
    let mut metric_cols = Vec::new();
    for (i, name) in headers.iter().enumerate() {
        if name == "run_id" {
            run_id_col = Some(i);
        } else if name == "status" {
            status_col = Some(i);
        } else if name.starts_with("hp_") {
            hp_cols.push((i, name.to_string()));
        } else if name.starts_with("m_") {
            metric_cols.push((i, name.to_string()));
        }
        // Other columns are ignored: sweeps are free to log extras.
    }
    let run_id_col = run_id_col
        .ok_or_else(|| Error::input(format!("{}: missing run_id column", path.display())))?;

    let mut records = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (idx, row) in reader.records().enumerate() {
        let row = row?;
        let rowno = idx + 2; // 1-based, counting the header line
        if let Some(c) = status_col {
            if row.get(c).map(str::trim) != Some("ok") {
                continue;
            }
        }
        let run_id = row
            .get(run_id_col)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::input(format!("{}: row {rowno}: empty run_id", path.display())))?
            .to_string();
        if !seen.insert(run_id.clone()) {
            return Err(Error::input(format!(
                "{}: row {rowno}: duplicate run_id {run_id:?}",
                path.display()
            )));
        }
        let mut hyperparameters = BTreeMap::new();
        for (c, name) in &hp_cols {
            let cell = row.get(*c).map(str::trim).unwrap_or("");
            if cell.is_empty() {
                return Err(Error::input(format!(
                    "{}: row {rowno}: empty {name} cell",
                    path.display()
                )));
            }
            hyperparameters.insert(name.clone(), cell.to_string());
        }
        let mut metrics = BTreeMap::new();
        for (c, name) in &metric_cols {
            let cell = row.get(*c).map(str::trim).unwrap_or("");
            let value: f64 = cell.parse().map_err(|_| {
                Error::input(format!(
                    "{}: row {rowno}: {name} cell {cell:?} is not a number",
                    path.display()
                ))
            })?;
            metrics.insert(name.clone(), value);
        }
        records.push(RunRecord { run_id, hyperparameters, metrics });
    }
    if records.is_empty() {
        return Err(Error::input(format!(
            "{}: no usable result rows (all missing or non-ok)",
            path.display()
        )));
    }
    Ok(records)
}

/// Writes records to CSV in the format [`load_results`] reads: `run_id`,
/// `status` (always `ok`), then the union of hyperparameter and metric
/// columns in sorted order.
pub fn save_results(records: &[RunRecord], path: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::input("no records to save"));
    }
    let mut hp_names = std::collections::BTreeSet::new();
    let mut metric_names = std::collections::BTreeSet::new();
    for r in records {
        hp_names.extend(r.hyperparameters.keys().cloned());
        metric_names.extend(r.metrics.keys().cloned());
    }
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec!["run_id".to_string(), "status".to_string()];
    header.extend(hp_names.iter().cloned());
    header.extend(metric_names.iter().cloned());
    writer.write_record(&header)?;
    for r in records {
        let mut row = vec![r.run_id.clone(), "ok".to_string()];
        for name in &hp_names {
            let cell = r.hyperparameters.get(name).cloned().ok_or_else(|| {
                Error::input(format!("run {} lacks hyperparameter {name}", r.run_id))
            })?;
            row.push(cell);
        }
        for name in &metric_names {
            let value = r.metrics.get(name).ok_or_else(|| {
                Error::input(format!("run {} lacks metric {name}", r.run_id))
            })?;
            row.push(format!("{value}"));
        }
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}
