//! CSV renderings of analysis results. Floats use the shortest
//! representation that round-trips.

use std::fmt::Write as _;

use super::{HessianDecomp, IterateSimReport, RayProfile, TraceEstimate};
use crate::error::{Error, Result};

fn line(out: &mut String, fields: &[String]) {
    writeln!(out, "{}", fields.join(",")).expect("write to String");
}

pub fn ray_profile_csv(p: &RayProfile) -> String {
    let mut s = String::from("t_or_s,distance,train_err,test_err\n");
    for q in &p.points {
        line(&mut s, &[q.coord, q.distance, q.train_err, q.test_err].map(|v| v.to_string()));
    }
    s
}

/// Square matrix with row and column labels, e.g. pairwise diversity.
pub fn matrix_csv(names: &[String], values: &[Vec<f64>]) -> Result<String> {
    if values.len() != names.len() || values.iter().any(|r| r.len() != names.len()) {
        return Err(Error::LengthMismatch {
            expected: names.len(),
            actual: values.len(),
        });
    }
    let mut s = String::new();
    let mut head = vec!["model".to_string()];
    head.extend(names.iter().cloned());
    line(&mut s, &head);
    for (n, row) in names.iter().zip(values) {
        let mut f = vec![n.clone()];
        f.extend(row.iter().map(|v| v.to_string()));
        line(&mut s, &f);
    }
    Ok(s)
}

/// One row per model pair: `model_a,model_b,ensemble_gain,average_gain`.
pub fn gains_csv(rows: &[(String, String, f64, f64)]) -> String {
    let mut s = String::from("model_a,model_b,ensemble_gain,average_gain\n");
    for (a, b, e, g) in rows {
        line(&mut s, &[a.clone(), b.clone(), e.to_string(), g.to_string()]);
    }
    s
}

pub fn trace_report_csv(est: &TraceEstimate, exact: Option<f64>) -> String {
    let mut s = String::from("q_hat,exact,stderr,probes_per_point,points,epsilon\n");
    line(
        &mut s,
        &[
            est.q_hat.to_string(),
            exact.map(|e| e.to_string()).unwrap_or_default(),
            est.std_error.to_string(),
            est.probes_per_point.to_string(),
            est.points.to_string(),
            est.epsilon.to_string(),
        ],
    );
    s
}

pub fn hessian_report_csv(rows: &[(usize, HessianDecomp)]) -> String {
    let mut s = String::from("example,tr_h,gn_term,residual,residual_oracle,loss\n");
    for (i, d) in rows {
        let mut f = vec![i.to_string()];
        f.extend([d.tr_h, d.gn_term, d.residual, d.residual_oracle, d.loss].map(|v| v.to_string()));
        line(&mut s, &f);
    }
    s
}

pub fn simulation_report_csv(rows: &[(usize, IterateSimReport)]) -> String {
    let mut s = String::from(
        "m,swa_mse,swa_stderr,swa_closed,fast_swa_mse,fast_swa_stderr,fast_swa_closed,diff,diff_stderr,threshold\n",
    );
    for (m, r) in rows {
        let mut f = vec![m.to_string()];
        f.extend(
            [
                r.swa_mse,
                r.swa_std_error,
                r.swa_closed_form,
                r.fast_swa_mse,
                r.fast_swa_std_error,
                r.fast_swa_closed_form,
                r.diff_mean,
                r.diff_std_error,
                r.threshold,
            ]
            .map(|v| v.to_string()),
        );
        line(&mut s, &f);
    }
    s
}
