//! Line-oriented report artifacts: training metrics, refinement and
//! quantify reports, the appended results file, and the rendered summary.
//! Numeric fields in rendered outputs are echoed exactly as they appear in
//! the source rows.

use crate::error::{Error, Result};
use crate::fs_util::{artifact_header, atomic_write, lines_of, parse_artifact_header, read_to_string};
use crate::maml::MetaModel;
use crate::quantify::ModelScore;
use crate::refine::RoundStats;
use std::path::Path;

/// Per-iteration losses of one meta-training run:
/// iteration, comma-joined task losses, meta loss.
pub fn write_train_metrics(path: &Path, model: &MetaModel, config_hash: &str) -> Result<()> {
    let mut text = artifact_header(
        "mmq-train-metrics",
        config_hash,
        &[("round", model.round.to_string())],
    );
    for log in &model.training_log {
        let tasks = log
            .task_losses
            .iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join(",");
        text.push_str(&format!("{}\t{}\t{}\n", log.iteration, tasks, log.meta_loss));
    }
    atomic_write(path, text.as_bytes())
}

/// Refinement report rows:
/// round, demoted, promoted, |M|, |U|, mislabeled count inside M.
pub fn write_refinement_report(path: &Path, rounds: &[RoundStats], config_hash: &str) -> Result<()> {
    let mut text = artifact_header("mmq-refinement", config_hash, &[]);
    for r in rounds {
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            r.round, r.demoted, r.promoted, r.m_size, r.u_size, r.noisy_in_m
        ));
    }
    atomic_write(path, text.as_bytes())
}

pub fn read_refinement_report(path: &Path) -> Result<(Vec<RoundStats>, String)> {
    let text = read_to_string(path)?;
    let mut lines = lines_of(&text);
    let (hash, _) = parse_artifact_header(&mut lines, "mmq-refinement")?;
    let mut rounds = Vec::new();
    for (line_no, line) in lines {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 6 fields, got {}", fields.len()),
            });
        }
        let mut parsed = [0usize; 6];
        for (slot, f) in parsed.iter_mut().zip(&fields) {
            *slot = f.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("bad count {:?}", f),
            })?;
        }
        rounds.push(RoundStats {
            round: parsed[0],
            demoted: parsed[1],
            promoted: parsed[2],
            m_size: parsed[3],
            u_size: parsed[4],
            noisy_in_m: parsed[5],
        });
    }
    Ok((rounds, hash))
}

/// Quantify report rows:
/// round, accumulated label confidence, accumulated diversity,
/// accumulated fused score, selection flag.
pub fn write_quantify_report(path: &Path, scores: &[ModelScore], config_hash: &str) -> Result<()> {
    let mut text = artifact_header("mmq-quantify", config_hash, &[]);
    for s in scores {
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            s.round,
            s.sum_gt_prob,
            s.sum_diversity,
            s.sum_fused,
            if s.selected { 1 } else { 0 }
        ));
    }
    atomic_write(path, text.as_bytes())
}

/// Selected model rounds in rank order, best first.
pub fn read_quantify_selection(path: &Path) -> Result<(Vec<usize>, String)> {
    let text = read_to_string(path)?;
    let mut lines = lines_of(&text);
    let (hash, _) = parse_artifact_header(&mut lines, "mmq-quantify")?;
    let mut rows: Vec<(usize, f32)> = Vec::new();
    for (line_no, line) in lines {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 5 fields, got {}", fields.len()),
            });
        }
        let round: usize = fields[0].parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("bad round {:?}", fields[0]),
        })?;
        let fused: f32 = fields[3].parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("bad fused score {:?}", fields[3]),
        })?;
        if fields[4] == "1" {
            rows.push((round, fused));
        }
    }
    rows.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    Ok((rows.into_iter().map(|(round, _)| round).collect(), hash))
}

/// One appended downstream result row.
#[derive(Debug, Clone)]
pub struct ResultRow {
    pub config_hash: String,
    pub m: usize,
    pub n: usize,
    pub seed: u64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub wall_time_s: f64,
}

/// Append a row to the results file, creating it (with a header) first.
/// Rows from a different configuration are rejected.
pub fn append_result(path: &Path, row: &ResultRow) -> Result<()> {
    let mut text = if path.exists() {
        let existing = read_to_string(path)?;
        let (hash, _) = parse_artifact_header(&mut lines_of(&existing), "mmq-results")?;
        if hash != row.config_hash {
            return Err(Error::Contract(format!(
                "results file {} was produced by config {}, refusing to append rows for {}",
                path.display(),
                hash,
                row.config_hash
            )));
        }
        existing
    } else {
        artifact_header("mmq-results", &row.config_hash, &[])
    };
    text.push_str(&format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
        row.config_hash, row.m, row.n, row.seed, row.train_accuracy, row.test_accuracy, row.wall_time_s
    ));
    atomic_write(path, text.as_bytes())
}

/// A results row kept as raw strings so rendering can echo values exactly.
#[derive(Debug, Clone)]
pub struct RawResultRow {
    pub fields: Vec<String>,
    pub m: usize,
    pub n: usize,
}

pub const RESULT_COLUMNS: [&str; 7] =
    ["config", "m", "n", "seed", "train_acc", "test_acc", "wall_time_s"];

pub fn read_results(path: &Path) -> Result<(Vec<RawResultRow>, String)> {
    let text = read_to_string(path)?;
    let mut lines = lines_of(&text);
    let (hash, _) = parse_artifact_header(&mut lines, "mmq-results")?;
    let mut rows = Vec::new();
    for (line_no, line) in lines {
        let fields: Vec<String> = line.split('\t').map(str::to_string).collect();
        if fields.len() != RESULT_COLUMNS.len() {
            return Err(Error::Parse {
                line: line_no,
                msg: format!(
                    "expected {} fields, got {}",
                    RESULT_COLUMNS.len(),
                    fields.len()
                ),
            });
        }
        let m = fields[1].parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("bad m {:?}", fields[1]),
        })?;
        let n = fields[2].parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("bad n {:?}", fields[2]),
        })?;
        rows.push(RawResultRow { fields, m, n });
    }
    Ok((rows, hash))
}

/// Render results as an aligned human-readable table plus a sorted
/// machine-readable record, both with rows ordered by (m, n) and values
/// echoed verbatim.
pub fn render_results(rows: &[RawResultRow], config_hash: &str) -> Result<(String, String)> {
    if rows.is_empty() {
        return Err(Error::Contract("no result rows to render".into()));
    }
    let mut sorted: Vec<&RawResultRow> = rows.iter().collect();
    sorted.sort_by(|a, b| (a.m, a.n).cmp(&(b.m, b.n)));

    let mut widths: Vec<usize> = RESULT_COLUMNS.iter().map(|c| c.len()).collect();
    for row in &sorted {
        for (w, f) in widths.iter_mut().zip(&row.fields) {
            *w = (*w).max(f.len());
        }
    }
    let mut table = String::new();
    for (i, col) in RESULT_COLUMNS.iter().enumerate() {
        table.push_str(&format!("{:<width$}  ", col, width = widths[i]));
    }
    table.push('\n');
    for (i, _) in RESULT_COLUMNS.iter().enumerate() {
        table.push_str(&"-".repeat(widths[i]));
        table.push_str("  ");
    }
    table.push('\n');
    for row in &sorted {
        for (i, f) in row.fields.iter().enumerate() {
            table.push_str(&format!("{:<width$}  ", f, width = widths[i]));
        }
        table.push('\n');
    }

    let mut machine = artifact_header("mmq-summary", config_hash, &[]);
    for row in &sorted {
        machine.push_str(&row.fields.join("\t"));
        machine.push('\n');
    }
    Ok((table, machine))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(m: usize, n: usize, seed: u64) -> ResultRow {
        ResultRow {
            config_hash: "cafe".into(),
            m,
            n,
            seed,
            train_accuracy: 0.875,
            test_accuracy: 0.8125,
            wall_time_s: 1.5,
        }
    }

    #[test]
    fn results_round_trip_and_sort() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.tsv");
        append_result(&path, &row(5, 3, 1)).unwrap();
        append_result(&path, &row(3, 1, 1)).unwrap();
        append_result(&path, &row(4, 2, 1)).unwrap();
        let (rows, hash) = read_results(&path).unwrap();
        assert_eq!(hash, "cafe");
        assert_eq!(rows.len(), 3);
        let (table, machine) = render_results(&rows, &hash).unwrap();
        let data_lines: Vec<&str> = machine.lines().skip(1).collect();
        assert!(data_lines[0].starts_with("cafe\t3\t1"));
        assert!(data_lines[1].starts_with("cafe\t4\t2"));
        assert!(data_lines[2].starts_with("cafe\t5\t3"));
        // Accuracy fields echoed bit-for-bit.
        assert!(table.contains("0.8125"));
        assert!(machine.contains("\t0.8125\t"));
    }

    #[test]
    fn single_row_renders_single_line_table() {
        let rows = vec![RawResultRow {
            fields: vec![
                "h".into(),
                "1".into(),
                "1".into(),
                "0".into(),
                "0.5".into(),
                "0.25".into(),
                "2".into(),
            ],
            m: 1,
            n: 1,
        }];
        let (table, machine) = render_results(&rows, "h").unwrap();
        assert_eq!(table.lines().count(), 3); // header, rule, one row
        assert_eq!(machine.lines().count(), 2);
    }

    #[test]
    fn malformed_row_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.tsv");
        std::fs::write(&path, "# mmq-results 1 config=x\na\tb\n").unwrap();
        let err = read_results(&path).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn mixed_hash_append_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.tsv");
        append_result(&path, &row(5, 3, 1)).unwrap();
        let mut other = row(5, 3, 2);
        other.config_hash = "beef".into();
        assert!(matches!(
            append_result(&path, &other),
            Err(Error::Contract(_))
        ));
    }
}
