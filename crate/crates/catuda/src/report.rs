//! Multi-run aggregation: per-task means over seeds, per-method averages,
//! and average ranks across tasks (ties share the mean rank).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{CatError, Result};

/// Final-epoch summary of one completed run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub method: String,
    pub task: String,
    pub seed: u64,
    pub target_acc: f64,
    pub target_ece: f64,
}

/// Mean metrics of one (method, task) cell over its seeds.
#[derive(Debug, Clone)]
pub struct TaskCell {
    pub method: String,
    pub task: String,
    pub n_seeds: usize,
    pub mean_acc: f64,
    pub mean_ece: f64,
}

#[derive(Debug, Clone)]
pub struct AggregateReport {
    /// One row per (method, task) with at least one run, tasks then methods
    /// in lexicographic order.
    pub cells: Vec<TaskCell>,
    /// Per-method accuracy averaged over the tasks it covers.
    pub method_avg_acc: Vec<(String, f64)>,
    /// Per-method rank (1 = best accuracy) averaged over tasks.
    pub method_avg_rank: Vec<(String, f64)>,
    /// Missing (method, task) combinations and other aggregation caveats.
    pub warnings: Vec<String>,
}

/// Ranks for scores where larger is better: best gets 1, ties share the
/// mean of the positions they span.
pub fn rank_descending(scores: &[f64]) -> Vec<f64> {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Positions i..=j (0-based) share the mean 1-based rank.
        let shared = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = shared;
        }
        i = j + 1;
    }
    ranks
}

pub fn aggregate(runs: &[RunSummary]) -> Result<AggregateReport> {
    if runs.is_empty() {
        return Err(CatError::Data("no runs to aggregate".into()));
    }
    let mut by_cell: BTreeMap<(String, String), Vec<&RunSummary>> = BTreeMap::new();
    for r in runs {
        by_cell
            .entry((r.task.clone(), r.method.clone()))
            .or_default()
            .push(r);
    }
    let tasks: Vec<String> = {
        let mut t: Vec<String> = by_cell.keys().map(|(task, _)| task.clone()).collect();
        t.dedup();
        t
    };
    let methods: Vec<String> = {
        let mut m: Vec<String> = by_cell.keys().map(|(_, method)| method.clone()).collect();
        m.sort();
        m.dedup();
        m
    };

    let mut warnings = Vec::new();
    let mut cells = Vec::new();
    for ((task, method), cell_runs) in &by_cell {
        let n = cell_runs.len();
        let mut seeds: Vec<u64> = cell_runs.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != n {
            return Err(CatError::Data(format!(
                "duplicate seed among runs for method {} on task {}",
                method, task
            )));
        }
        cells.push(TaskCell {
            method: method.clone(),
            task: task.clone(),
            n_seeds: n,
            mean_acc: cell_runs.iter().map(|r| r.target_acc).sum::<f64>() / n as f64,
            mean_ece: cell_runs.iter().map(|r| r.target_ece).sum::<f64>() / n as f64,
        });
    }
    for task in &tasks {
        for method in &methods {
            if !by_cell.contains_key(&(task.clone(), method.clone())) {
                warnings.push(format!("missing runs for method {} on task {}", method, task));
            }
        }
    }

    // Per-task ranks over the methods present for that task, then averaged
    // per method across the tasks it covers.
    let mut rank_sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut acc_sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for task in &tasks {
        let present: Vec<&TaskCell> = cells.iter().filter(|c| &c.task == task).collect();
        let scores: Vec<f64> = present.iter().map(|c| c.mean_acc).collect();
        let ranks = rank_descending(&scores);
        for (cell, rank) in present.iter().zip(ranks) {
            let e = rank_sums.entry(cell.method.clone()).or_insert((0.0, 0));
            e.0 += rank;
            e.1 += 1;
            let a = acc_sums.entry(cell.method.clone()).or_insert((0.0, 0));
            a.0 += cell.mean_acc;
            a.1 += 1;
        }
    }
    let method_avg_acc = methods
        .iter()
        .map(|m| {
            let (sum, n) = acc_sums[m];
            (m.clone(), sum / n as f64)
        })
        .collect();
    let method_avg_rank = methods
        .iter()
        .map(|m| {
            let (sum, n) = rank_sums[m];
            (m.clone(), sum / n as f64)
        })
        .collect();

    Ok(AggregateReport {
        cells,
        method_avg_acc,
        method_avg_rank,
        warnings,
    })
}

pub fn report_csv(report: &AggregateReport) -> String {
    let mut out = String::from("method,task,n_seeds,mean_target_acc,mean_target_ece\n");
    for c in &report.cells {
        writeln!(
            out,
            "{},{},{},{},{}",
            c.method, c.task, c.n_seeds, c.mean_acc, c.mean_ece
        )
        .unwrap();
    }
    out.push_str("method,average_acc,average_rank\n");
    for ((m, acc), (_, rank)) in report.method_avg_acc.iter().zip(&report.method_avg_rank) {
        writeln!(out, "{},{},{}", m, acc, rank).unwrap();
    }
    out
}

pub fn report_table(report: &AggregateReport) -> String {
    let mut out = String::new();
    let width = report
        .cells
        .iter()
        .map(|c| c.method.len())
        .max()
        .unwrap_or(6)
        .max(6);
    writeln!(
        out,
        "{:width$}  {:24}  {:>5}  {:>8}  {:>8}",
        "method",
        "task",
        "seeds",
        "acc",
        "ece",
        width = width
    )
    .unwrap();
    for c in &report.cells {
        writeln!(
            out,
            "{:width$}  {:24}  {:>5}  {:>8.4}  {:>8.4}",
            c.method,
            c.task,
            c.n_seeds,
            c.mean_acc,
            c.mean_ece,
            width = width
        )
        .unwrap();
    }
    writeln!(out).unwrap();
    writeln!(
        out,
        "{:width$}  {:>11}  {:>12}",
        "method",
        "average acc",
        "average rank",
        width = width
    )
    .unwrap();
    for ((m, acc), (_, rank)) in report.method_avg_acc.iter().zip(&report.method_avg_rank) {
        writeln!(
            out,
            "{:width$}  {:>11.4}  {:>12.2}",
            m,
            acc,
            rank,
            width = width
        )
        .unwrap();
    }
    for w in &report.warnings {
        writeln!(out, "warning: {}", w).unwrap();
    }
    out
}
