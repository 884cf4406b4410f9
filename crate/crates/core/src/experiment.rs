//! Running a configured experiment end to end and writing its artifacts.
//!
//! An output directory holds `metrics.csv`, one checkpoint per final model
//! (`student.fswa`, `teacher.fswa`, one per averager that collected at least
//! once, `epoch_<e>.fswa` for snapshots) and any requested reports. A run
//! that diverges leaves `metrics.csv`, `last_good.fswa` and a `PARTIAL`
//! marker naming the epoch and step.

use std::fs;
use std::path::{Path, PathBuf};

use crate::averaging::{save_checkpoint, AveragingKind, CheckpointHeader, Role};
use crate::config::{DataSource, ExperimentConfig, ReportKind};
use crate::consistency::{train, TeacherMode, TrainError, TrainOutcome};
use crate::data::{load_idx, make_dataset, DatasetSplit};
use crate::error::{Error, Result};
use crate::geometry::{
    average_gain, diversity, ensemble_gain_of, jacobian_trace_estimate, ray_profile, report,
    DirectionKind, EvalSet, RaySpec, TraceOptions,
};
use crate::nets::{forward, MlpSpec, ParamVector};

pub const METRICS_FILE: &str = "metrics.csv";
pub const PARTIAL_MARKER: &str = "PARTIAL";
pub const LAST_GOOD_FILE: &str = "last_good.fswa";

/// Distances used for random-direction rays.
pub const RAY_DISTANCES: [f64; 11] = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];

/// Builds the train/test split a configuration describes.
pub fn load_data(src: &DataSource, seed: u64) -> Result<DatasetSplit> {
    match src {
        DataSource::Synthetic(spec) => make_dataset(spec, seed),
        DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            n_labeled,
        } => {
            let (tr, tr_y) = load_idx(train_images, train_labels)?;
            let (te, te_y) = load_idx(test_images, test_labels)?;
            if (tr.height, tr.width) != (te.height, te.width) {
                return Err(Error::Dataset(format!(
                    "train images are {}x{}, test images {}x{}",
                    tr.height, tr.width, te.height, te.width
                )));
            }
            let classes = tr_y.iter().chain(&te_y).max().map_or(0, |m| m + 1).max(2);
            DatasetSplit::from_pool(
                tr.height * tr.width,
                classes,
                &tr.pixels,
                &tr_y,
                *n_labeled,
                te.pixels,
                te_y,
                seed,
            )
        }
    }
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub output_dir: PathBuf,
    pub outcome: TrainOutcome,
    /// Named final models, in the order their checkpoints were written.
    pub models: Vec<(String, ParamVector)>,
}

/// Runs the experiment into [`ExperimentConfig::output_dir`].
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    run_experiment_in(cfg, &cfg.output_dir())
}

/// Runs the experiment into `dir`, creating it if needed.
pub fn run_experiment_in(cfg: &ExperimentConfig, dir: &Path) -> Result<ExperimentOutcome> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    // stale markers from an earlier run would misdescribe this one
    let marker = dir.join(PARTIAL_MARKER);
    if marker.exists() {
        fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    }
    let data = load_data(&cfg.data, cfg.train.seed)?;
    let tc = &cfg.train;
    let out = match train(tc, &data) {
        Ok(o) => o,
        Err(TrainError::Other(e)) => return Err(e),
        Err(TrainError::Diverged(d)) => {
            write_file(&dir.join(METRICS_FILE), d.log.to_csv())?;
            let pos = d.epoch as f64;
            let h = CheckpointHeader::new(&tc.model, Role::Student, d.epoch, d.step, tc.seed, pos);
            save_checkpoint(dir.join(LAST_GOOD_FILE), &d.last_good, &h)?;
            write_file(&marker, format!("diverged epoch={} step={}\n", d.epoch, d.step))?;
            return Err(Error::Diverged {
                epoch: d.epoch,
                step: d.step,
            });
        }
    };
    write_file(&dir.join(METRICS_FILE), out.log.to_csv())?;

    let spe = out.steps_per_epoch;
    let (epochs, pos) = (tc.epochs, tc.epochs as f64);
    let header = |role| CheckpointHeader::new(&tc.model, role, epochs, epochs * spe, tc.seed, pos);
    let mut models = vec![("student".to_string(), out.student.clone())];
    save_checkpoint(dir.join("student.fswa"), &out.student, &header(Role::Student))?;
    save_checkpoint(dir.join("teacher.fswa"), &out.teacher.weights, &header(Role::Teacher))?;
    if tc.consistency.teacher_mode == TeacherMode::Ema {
        models.push(("teacher".to_string(), out.teacher.weights.clone()));
    }
    for (name, st) in tc.averager_names().into_iter().zip(&out.averagers) {
        let Some(avg) = st.averaged() else { continue };
        let role = match st.policy.kind {
            AveragingKind::Swa => Role::Swa,
            AveragingKind::FastSwa => Role::FastSwa,
        };
        save_checkpoint(dir.join(format!("{name}.fswa")), avg, &header(role))?;
        models.push((name, avg.clone()));
    }
    for (e, w) in &out.snapshots {
        let h = CheckpointHeader::new(&tc.model, Role::Student, *e, e * spe, tc.seed, *e as f64);
        save_checkpoint(dir.join(format!("epoch_{e}.fswa")), w, &h)?;
        models.push((format!("epoch_{e}"), w.clone()));
    }

    write_reports(dir, &tc.model, &models, &data, &cfg.reports, tc.seed)?;
    Ok(ExperimentOutcome {
        output_dir: dir.to_path_buf(),
        outcome: out,
        models,
    })
}

fn write_file(path: &Path, text: String) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the requested analyses of `models` on `data` into `dir`.
pub fn write_reports(
    dir: &Path,
    spec: &MlpSpec,
    models: &[(String, ParamVector)],
    data: &DatasetSplit,
    reports: &[ReportKind],
    seed: u64,
) -> Result<()> {
    if reports.is_empty() {
        return Ok(());
    }
    let test_x = data.test_tensor()?;
    let train_x = data.labeled_tensor()?;
    let train = EvalSet {
        x: &train_x,
        y: &data.labeled_y,
    };
    let test = EvalSet {
        x: &test_x,
        y: &data.test_y,
    };
    let names: Vec<String> = models.iter().map(|(n, _)| n.clone()).collect();
    for kind in reports {
        match kind {
            ReportKind::Diversity => {
                let preds = models
                    .iter()
                    .map(|(_, w)| forward(w, spec, &test_x, None, 0))
                    .collect::<Result<Vec<_>>>()?;
                let m = preds
                    .iter()
                    .map(|p| preds.iter().map(|q| diversity(p, q)).collect::<Result<Vec<_>>>())
                    .collect::<Result<Vec<_>>>()?;
                write_file(&dir.join("diversity.csv"), report::matrix_csv(&names, &m)?)?;
            }
            ReportKind::Gains => {
                let mut rows = Vec::new();
                for (i, (a, wa)) in models.iter().enumerate() {
                    for (b, wb) in &models[i + 1..] {
                        let pa = forward(wa, spec, &test_x, None, 0)?;
                        let pb = forward(wb, spec, &test_x, None, 0)?;
                        let eg = ensemble_gain_of(&pa, &pb, &data.test_y)?;
                        let ag = average_gain(wa, wb, spec, &test_x, &data.test_y)?;
                        rows.push((a.clone(), b.clone(), eg, ag));
                    }
                }
                write_file(&dir.join("gains.csv"), report::gains_csv(&rows))?;
            }
            ReportKind::Rays => {
                for (name, w) in models {
                    let ray = RaySpec::random(w.clone(), seed, RAY_DISTANCES.to_vec());
                    let p = ray_profile(&ray, spec, train, test)?;
                    write_file(&dir.join(format!("rays_{name}.csv")), report::ray_profile_csv(&p))?;
                }
                let (first, w0) = &models[0];
                for (name, w) in &models[1..] {
                    let ray = RaySpec {
                        origin: w0.clone(),
                        direction: DirectionKind::SgdSgd(w.clone()),
                        grid: (0..=20).map(|i| i as f64 / 20.0).collect(),
                    };
                    let p = ray_profile(&ray, spec, train, test)?;
                    let file = format!("segment_{first}_{name}.csv");
                    write_file(&dir.join(file), report::ray_profile_csv(&p))?;
                }
            }
            ReportKind::Trace => {
                let opts = TraceOptions {
                    seed,
                    ..TraceOptions::default()
                };
                for (name, w) in models {
                    let est = jacobian_trace_estimate(w, spec, &test_x, &opts)?;
                    write_file(&dir.join(format!("trace_{name}.csv")), report::trace_report_csv(&est, None))?;
                }
            }
        }
    }
    Ok(())
}
