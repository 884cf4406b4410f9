//! Per-epoch training metrics and their CSV form.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub lr: f64,
    pub lambda: f64,
    pub train_ce: f64,
    pub train_cons: f64,
    pub grad_norm_ce: f64,
    pub grad_norm_cons: f64,
    pub test_err_student: f64,
    pub test_err_teacher: f64,
    /// One entry per averager, in configuration order.
    pub test_err_averagers: Vec<f64>,
    pub diversity_vs_prev_epoch: f64,
}

/// Rows strictly increasing in epoch, one column per averager.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsLog {
    averager_names: Vec<String>,
    rows: Vec<MetricsRow>,
}

const LEADING: [&str; 9] = [
    "epoch",
    "lr",
    "lambda",
    "train_ce",
    "train_cons",
    "grad_norm_ce",
    "grad_norm_cons",
    "test_err_student",
    "test_err_teacher",
];

impl MetricsLog {
    /// `averager_names` become the `test_err_<name>` columns.
    pub fn new(averager_names: Vec<String>) -> Self {
        Self {
            averager_names,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: MetricsRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.epoch <= last.epoch {
                return Err(Error::InvalidArgument(format!(
                    "epoch {} after {}",
                    row.epoch, last.epoch
                )));
            }
        }
        if row.test_err_averagers.len() != self.averager_names.len() {
            return Err(Error::LengthMismatch {
                expected: self.averager_names.len(),
                actual: row.test_err_averagers.len(),
            });
        }
        let scalars = [
            row.lr,
            row.lambda,
            row.train_ce,
            row.train_cons,
            row.grad_norm_ce,
            row.grad_norm_cons,
            row.test_err_student,
            row.test_err_teacher,
            row.diversity_vs_prev_epoch,
        ];
        if scalars
            .iter()
            .chain(&row.test_err_averagers)
            .any(|v| !v.is_finite())
        {
            return Err(Error::InvalidArgument(format!(
                "non-finite metric at epoch {}",
                row.epoch
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn header(&self) -> Vec<String> {
        LEADING
            .iter()
            .map(|s| s.to_string())
            .chain(self.averager_names.iter().map(|n| format!("test_err_{n}")))
            .chain(std::iter::once("diversity_vs_prev_epoch".to_string()))
            .collect()
    }

    /// CSV text. Floats use the shortest representation that round-trips.
    pub fn to_csv(&self) -> String {
        let mut s = self.header().join(",");
        s.push('\n');
        for r in &self.rows {
            write!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.epoch,
                r.lr,
                r.lambda,
                r.train_ce,
                r.train_cons,
                r.grad_norm_ce,
                r.grad_norm_cons,
                r.test_err_student,
                r.test_err_teacher
            )
            .expect("write to String");
            for v in &r.test_err_averagers {
                write!(s, ",{v}").expect("write to String");
            }
            writeln!(s, ",{}", r.diversity_vs_prev_epoch).expect("write to String");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(epoch: usize) -> MetricsRow {
        MetricsRow {
            epoch,
            lr: 0.1,
            lambda: 1.0,
            train_ce: 0.5,
            train_cons: 0.01,
            grad_norm_ce: 1.0,
            grad_norm_cons: 0.2,
            test_err_student: 0.25,
            test_err_teacher: 0.2,
            test_err_averagers: vec![0.125, 0.1],
            diversity_vs_prev_epoch: 0.05,
        }
    }

    #[test]
    fn header_and_rows() {
        let mut log = MetricsLog::new(vec!["swa".into(), "fast_swa".into()]);
        assert_eq!(
            log.to_csv(),
            "epoch,lr,lambda,train_ce,train_cons,grad_norm_ce,grad_norm_cons,test_err_student,\
             test_err_teacher,test_err_swa,test_err_fast_swa,diversity_vs_prev_epoch\n"
        );
        log.push(row(0)).unwrap();
        assert!(log.to_csv().ends_with("0,0.1,1,0.5,0.01,1,0.2,0.25,0.2,0.125,0.1,0.05\n"));
    }

    #[test]
    fn rejects_bad_rows() {
        let mut log = MetricsLog::new(vec!["swa".into(), "fast_swa".into()]);
        log.push(row(1)).unwrap();
        assert!(log.push(row(1)).is_err());
        let mut r = row(2);
        r.lr = f64::NAN;
        assert!(log.push(r).is_err());
        let mut r = row(3);
        r.test_err_averagers.pop();
        assert!(log.push(r).is_err());
    }
}
