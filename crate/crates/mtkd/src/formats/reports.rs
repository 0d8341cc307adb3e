use std::path::Path;

use mtkd_core::strategies::SelectionLedger;
use mtkd_core::training::{EpochLog, EvalReport};
use serde::Serialize;

use super::create_parent;
use crate::{Error, Result};

/// A writer whose header row is written up front, so empty tables still
/// carry their columns.
fn writer<S: AsRef<str>>(path: &Path, header: &[S]) -> Result<csv::Writer<std::fs::File>> {
    create_parent(path)?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_err(path))?;
    w.write_record(header.iter().map(AsRef::as_ref)).map_err(csv_err(path))?;
    Ok(w)
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn write_rows<R: Serialize>(path: &Path, header: &[&str], rows: &[R]) -> Result<()> {
    let mut w = writer(path, header)?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(Error::io(path))
}

fn tokens(t: &[usize]) -> String {
    t.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

/// Columns `epoch, train_loss, valid_er, lr`; epoch 0 has no train loss.
pub fn write_train_log(path: &Path, history: &[EpochLog]) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        epoch: usize,
        train_loss: Option<f64>,
        valid_er: f64,
        lr: f64,
    }
    let rows: Vec<Row> = history
        .iter()
        .map(|h| Row {
            epoch: h.epoch,
            train_loss: h.train_loss,
            valid_er: h.valid_er,
            lr: h.lr,
        })
        .collect();
    write_rows(path, &["epoch", "train_loss", "valid_er", "lr"], &rows)
}

/// Columns `teacher_id, top1_count, topk_count`.
pub fn write_selection(path: &Path, ledger: &SelectionLedger) -> Result<()> {
    write_rows(path, &["teacher_id", "top1_count", "topk_count"], &ledger.selection_report())
}

/// Columns `batch_index, w_1 .. w_M`.
pub fn write_weight_trace(path: &Path, ledger: &SelectionLedger) -> Result<()> {
    let mut w = writer(path, &ledger.trace_header())?;
    for row in ledger.trace() {
        let mut rec = vec![row.batch_index.to_string()];
        rec.extend(row.weights.iter().map(f64::to_string));
        w.write_record(&rec).map_err(csv_err(path))?;
    }
    w.flush().map_err(Error::io(path))
}

/// One row per sentence: `id, reference, hypothesis, errors, length, er`.
pub fn write_evaluation(path: &Path, report: &EvalReport) -> Result<()> {
    #[derive(Serialize)]
    struct Row<'a> {
        id: &'a str,
        reference: String,
        hypothesis: String,
        errors: usize,
        length: usize,
        er: f64,
    }
    let rows: Vec<Row> = report
        .sentences
        .iter()
        .map(|s| Row {
            id: &s.id,
            reference: tokens(&s.reference),
            hypothesis: tokens(&s.hypothesis),
            errors: s.error.errors,
            length: s.error.length,
            er: s.error.value(),
        })
        .collect();
    write_rows(path, &["id", "reference", "hypothesis", "errors", "length", "er"], &rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TeacherSummaryRow {
    pub teacher_id: usize,
    pub cell: String,
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub parameters: usize,
    pub best_epoch: usize,
    pub valid_er: f64,
    pub test_er: f64,
    /// `*` on the lowest-validation-ER teacher.
    pub selected: &'static str,
}

pub fn write_teacher_summary(path: &Path, rows: &[TeacherSummaryRow]) -> Result<()> {
    let header = [
        "teacher_id", "cell", "hidden", "layers", "dropout", "batch_size", "lr", "epochs", "seed", "parameters",
        "best_epoch", "valid_er", "test_er", "selected",
    ];
    write_rows(path, &header, rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub run: String,
    pub strategy: String,
    pub alpha: f64,
    pub beta: f64,
    pub epochs: usize,
    pub seed: u64,
    pub best_epoch: usize,
    pub valid_er: f64,
    pub test_er: f64,
}

pub fn write_comparison(path: &Path, rows: &[ComparisonRow]) -> Result<()> {
    let header = ["run", "strategy", "alpha", "beta", "epochs", "seed", "best_epoch", "valid_er", "test_er"];
    write_rows(path, &header, rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HomophoneRow {
    pub teacher_id: usize,
    pub valid_er: f64,
    pub substitutions: usize,
    pub with_partner: usize,
    pub to_partner: usize,
    pub observed_rate: Option<f64>,
    pub uniform_rate: Option<f64>,
    pub p_value: Option<f64>,
}

pub fn write_homophones(path: &Path, rows: &[HomophoneRow]) -> Result<()> {
    let header = [
        "teacher_id", "valid_er", "substitutions", "with_partner", "to_partner", "observed_rate", "uniform_rate",
        "p_value",
    ];
    write_rows(path, &header, rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelectionCountRow {
    pub run: String,
    pub teacher_id: usize,
    pub top1_count: u64,
    pub topk_count: u64,
}

pub fn write_selection_counts(path: &Path, rows: &[SelectionCountRow]) -> Result<()> {
    write_rows(path, &["run", "teacher_id", "top1_count", "topk_count"], rows)
}
