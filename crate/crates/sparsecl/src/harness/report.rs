//! Aggregates sweep CSVs into a summary table: for every
//! (activation, optimizer) pair, the best grid point by mean accuracy with
//! its 95% confidence interval.

use std::collections::BTreeMap;

use super::sweep::aggregate_ci;

/// One line of the summary: the best grid point for a pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub activation: String,
    pub optimizer: String,
    pub best_assignment: String,
    pub seeds: usize,
    pub mean_accuracy: f32,
    pub ci_half_width: f32,
}

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("sweep csv line {line}: {msg}")]
    Malformed { line: usize, msg: String },
}

/// Kind name without the hyperparameter suffix, e.g.
/// `hard_ash(alpha=4,...)` -> `hard_ash`.
fn kind_of(descriptor: &str) -> &str {
    descriptor.split('(').next().unwrap_or(descriptor)
}

/// Parses one or more `sweep.csv` bodies and reduces them to one row per
/// (activation kind, optimizer kind): the assignment with the highest mean
/// accuracy across seeds. Rows sort by descending accuracy.
pub fn report_from_csv(csvs: &[String]) -> Result<Vec<ReportRow>, ReportError> {
    // (activation kind, optimizer kind, assignment+full descriptors) -> accs.
    type Key = (String, String, String, String, String);
    let mut cells: BTreeMap<Key, Vec<f32>> = BTreeMap::new();
    for csv in csvs {
        for (line_no, line) in csv.lines().enumerate() {
            if line_no == 0 || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 6 {
                return Err(ReportError::Malformed {
                    line: line_no + 1,
                    msg: format!("expected 6 fields, got {}", fields.len()),
                });
            }
            let mean: f32 = fields[4].parse().map_err(|e| ReportError::Malformed {
                line: line_no + 1,
                msg: format!("mean_accuracy: {e}"),
            })?;
            let key = (
                kind_of(fields[1]).to_string(),
                kind_of(fields[2]).to_string(),
                fields[0].to_string(),
                fields[1].to_string(),
                fields[2].to_string(),
            );
            cells.entry(key).or_default().push(mean);
        }
    }

    // Best assignment per (activation, optimizer) pair.
    let mut best: BTreeMap<(String, String), ReportRow> = BTreeMap::new();
    for ((act_kind, opt_kind, assignment, _act, _opt), accs) in cells {
        let (mean, ci) = if accs.len() >= 2 {
            aggregate_ci(&accs).expect("n >= 2")
        } else {
            (accs[0], 0.0)
        };
        let row = ReportRow {
            activation: act_kind.clone(),
            optimizer: opt_kind.clone(),
            best_assignment: assignment,
            seeds: accs.len(),
            mean_accuracy: mean,
            ci_half_width: ci,
        };
        best.entry((act_kind, opt_kind))
            .and_modify(|cur| {
                if row.mean_accuracy > cur.mean_accuracy {
                    *cur = row.clone();
                }
            })
            .or_insert(row);
    }
    let mut rows: Vec<ReportRow> = best.into_values().collect();
    rows.sort_by(|a, b| b.mean_accuracy.total_cmp(&a.mean_accuracy));
    Ok(rows)
}

/// Renders report rows as CSV.
pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out =
        String::from("activation,optimizer,best_assignment,seeds,mean_accuracy_pct,ci_pct\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.2},{:.2}\n",
            r.activation,
            r.optimizer,
            r.best_assignment,
            r.seeds,
            r.mean_accuracy * 100.0,
            r.ci_half_width * 100.0
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn picks_best_assignment_per_pair() {
        let csv = "\
assignment,activation,optimizer,seed,mean_accuracy,overall_accuracy
alpha=3,hard_ash(alpha=3),adagrad(lr=0.0002),0,0.70,0.71
alpha=3,hard_ash(alpha=3),adagrad(lr=0.0002),1,0.72,0.73
alpha=4,hard_ash(alpha=4),adagrad(lr=0.0002),0,0.78,0.78
alpha=4,hard_ash(alpha=4),adagrad(lr=0.0002),1,0.80,0.80
k=64,top_k_subtract(k=64),adagrad(lr=0.0002),0,0.75,0.76
k=64,top_k_subtract(k=64),adagrad(lr=0.0002),1,0.75,0.76
"
        .to_string();
        let rows = report_from_csv(&[csv]).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].activation, "hard_ash");
        assert_eq!(rows[0].best_assignment, "alpha=4");
        assert!((rows[0].mean_accuracy - 0.79).abs() < 1e-6);
        assert_eq!(rows[0].seeds, 2);
        assert_eq!(rows[1].activation, "top_k_subtract");
        let rendered = report_csv(&rows);
        assert!(rendered.starts_with("activation,optimizer"));
        assert!(rendered.contains("hard_ash,adagrad,alpha=4,2,79.00"));
    }

    #[test]
    fn malformed_rows_error_with_line_numbers() {
        let err = report_from_csv(&["header\nbad,row\n".to_string()]).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
