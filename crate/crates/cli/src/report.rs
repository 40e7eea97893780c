//! Report structures and their console tables.

use std::fmt::Write as _;

use dpwate::noise::BudgetLedger;
use dpwate::sim::ReplicateFailure;
use serde::Serialize;

use crate::config::RunConfig;

pub const UNPROTECTED: &str = "NOT privacy-protected";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Release {
    pub point: f64,
    pub variance: f64,
    pub ci: [f64; 2],
    /// A noised denominator was floored.
    pub denominator_floored: bool,
    /// The variance release was replaced by its fallback bound.
    pub variance_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LedgerLine {
    pub label: String,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LedgerReport {
    pub total: f64,
    pub spent: f64,
    pub entries: Vec<LedgerLine>,
}

impl From<&BudgetLedger> for LedgerReport {
    fn from(l: &BudgetLedger) -> Self {
        Self {
            total: l.total(),
            spent: l.spent(),
            entries: l.entries().iter().map(|e| LedgerLine { label: e.label.clone(), epsilon: e.amount }).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceRow {
    pub label: String,
    pub values: Vec<f64>,
}

/// Weighted difference in covariate means between arms, one row per
/// weighting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceTable {
    pub notice: String,
    pub covariates: Vec<String>,
    pub rows: Vec<BalanceRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NonPrivateReport {
    pub protected: bool,
    pub notice: String,
    pub point: f64,
    pub variance: f64,
    pub ci: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepEntry {
    pub eta: f64,
    pub seed: u64,
    pub epsilon: f64,
    pub release: Release,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalyzeReport {
    pub command: &'static str,
    pub estimand: String,
    pub n: usize,
    pub n_treated: usize,
    pub n_control: usize,
    pub estimate: Release,
    pub ledger: LedgerReport,
    pub seed: u64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub eta_sweep: Vec<SweepEntry>,
    /// Privacy cost of everything in this report.
    pub total_epsilon: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nonprivate: Option<NonPrivateReport>,
    pub balance: BalanceTable,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceReport {
    pub command: &'static str,
    pub estimand: String,
    pub seed: u64,
    pub total_epsilon: f64,
    pub balance: BalanceTable,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationRow {
    pub n: usize,
    pub mse: f64,
    pub relative_bias: f64,
    pub bias: f64,
    pub coverage: f64,
    pub interval_length: f64,
    pub replicates: usize,
    pub failures: Vec<ReplicateFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulateReport {
    pub command: &'static str,
    pub scenario: String,
    pub estimand: String,
    pub epsilon: f64,
    pub truth: f64,
    pub seed: u64,
    pub rows: Vec<SimulationRow>,
    pub config: RunConfig,
}

/// Right-aligned columns, first column left-aligned.
fn aligned(header: &[String], rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..header.len())
        .map(|j| rows.iter().map(|r| r[j].len()).chain([header[j].len()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for line in std::iter::once(header).chain(rows.iter().map(Vec::as_slice)) {
        let cells: Vec<String> = line
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(j, (c, &w))| if j == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        writeln!(out, "{}", cells.join("  ").trim_end()).unwrap();
    }
    out
}

pub fn render_balance(table: &BalanceTable) -> String {
    let header: Vec<String> = std::iter::once("Estimator".to_string()).chain(table.covariates.iter().cloned()).collect();
    let rows: Vec<Vec<String>> = table
        .rows
        .iter()
        .map(|r| std::iter::once(r.label.clone()).chain(r.values.iter().map(|v| format!("{v:.4}"))).collect())
        .collect();
    format!("{}{}\n", aligned(&header, &rows), table.notice)
}

pub fn render_simulation(report: &SimulateReport) -> String {
    let header: Vec<String> = ["N", "MSE", "Rel. bias", "Coverage", "CI length", "Failures"].map(String::from).to_vec();
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.n.to_string(),
                format!("{:.5}", r.mse),
                format!("{:.4}", r.relative_bias),
                format!("{:.3}", r.coverage),
                format!("{:.4}", r.interval_length),
                r.failures.len().to_string(),
            ]
        })
        .collect();
    format!(
        "{} scenario, {}, epsilon = {}, truth = {:.6}\n{}",
        report.scenario,
        report.estimand,
        report.epsilon,
        report.truth,
        aligned(&header, &rows)
    )
}
