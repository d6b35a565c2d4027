use std::path::PathBuf;

use super::{load_report, report_path, RunError, RunManifest};
use crate::tagging::LtStrategy;

pub const COMPARISON_HEADER: &str = "run\tstrategy\tsupervised_bleu\tzero_shot_bleu\toff_target_pct\treport";

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub run: String,
    pub strategy: LtStrategy,
    pub supervised_bleu: f64,
    pub zero_shot_bleu: f64,
    pub off_target_pct: f64,
    /// Report file the numbers were read from, relative to the run directory.
    pub report: String,
}

/// Rows are grouped by run, strategies in canonical order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
    pub notes: Vec<String>,
}

impl ComparisonTable {
    pub fn to_tsv(&self) -> String {
        let mut out = format!("{COMPARISON_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{:.2}\t{:.2}\t{:.2}\t{}\n",
                r.run, r.strategy, r.supervised_bleu, r.zero_shot_bleu, r.off_target_pct, r.report
            ));
        }
        for n in &self.notes {
            out.push_str(&format!("# {n}\n"));
        }
        out
    }

    /// Fixed-width text with the columns Supervised, Zero-Shot, Off-Target.
    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|r| r.run.len()).max().unwrap_or(3).max(3);
        let mut out = format!(
            "{:<width$}  {:<12}  {:>10}  {:>10}  {:>10}\n",
            "run", "strategy", "Supervised", "Zero-Shot", "Off-Target"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<width$}  {:<12}  {:>10.2}  {:>10.2}  {:>9.2}%\n",
                r.run,
                r.strategy.name(),
                r.supervised_bleu,
                r.zero_shot_bleu,
                r.off_target_pct
            ));
        }
        for n in &self.notes {
            out.push_str(&format!("note: {n}\n"));
        }
        out
    }
}

/// Table over labelled runs sharing one data hash.
pub(super) fn table_for(runs: &[(String, PathBuf, RunManifest)]) -> Result<ComparisonTable, RunError> {
    let Some((_, _, first)) = runs.first() else { return Ok(ComparisonTable::default()) };
    let data = first.data_hash.clone().ok_or_else(|| RunError::Manifest("run has no data stage".into()))?;
    for (_, root, m) in runs {
        match &m.data_hash {
            Some(h) if *h == data => {}
            other => {
                return Err(RunError::DataMismatch {
                    a: data.clone(),
                    b: format!("{} in {}", other.as_deref().unwrap_or("none"), root.display()),
                })
            }
        }
    }
    let mut table = ComparisonTable::default();
    let mut present = vec![Vec::new(); runs.len()];
    for (i, (name, root, m)) in runs.iter().enumerate() {
        for s in LtStrategy::ALL {
            if let Some(rep) = load_report(root, m, s)? {
                present[i].push(s);
                table.rows.push(ComparisonRow {
                    run: name.clone(),
                    strategy: s,
                    supervised_bleu: rep.aggregate.supervised_bleu,
                    zero_shot_bleu: rep.aggregate.zero_shot_bleu,
                    off_target_pct: rep.aggregate.off_target_pct,
                    report: report_path(s),
                });
            }
        }
    }
    for s in LtStrategy::ALL {
        if present.iter().any(|p| p.contains(&s)) {
            for (i, (name, _, _)) in runs.iter().enumerate() {
                if !present[i].contains(&s) {
                    table.notes.push(format!("{name} has no {} report", s.name()));
                }
            }
        }
    }
    Ok(table)
}

/// Compares at least two runs, labelled by their directories; refuses runs
/// over different data.
pub fn compare_strategies(runs: &[(PathBuf, RunManifest)]) -> Result<ComparisonTable, RunError> {
    if runs.len() < 2 {
        return Err(RunError::Invalid(format!("compare needs at least two manifests, got {}", runs.len())));
    }
    let labelled: Vec<(String, PathBuf, RunManifest)> =
        runs.iter().map(|(root, m)| (root.display().to_string(), root.clone(), m.clone())).collect();
    table_for(&labelled)
}
