//! Method comparisons (library size, sparsity, extrapolation under the three
//! noise cases) and closed-loop tracking with model-based compensation.

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{fmt_f64, Dataset};
use crate::dynamics::{JointState, ManipulatorModel};
use crate::error::{Error, Result};
use crate::pipeline::{PredictTorque, StepwiseModel};
use crate::regression::SparseModel;
use crate::trajectory::{add_noise, NoiseSpec};

/// Measurement-noise case: SNRs in dB for (position, velocity, acceleration),
/// or noise-free.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseCase {
    pub name: String,
    #[serde(default)]
    pub snr: Option<[f64; 3]>,
}

impl NoiseCase {
    pub fn case1() -> Self {
        Self {
            name: "case1".into(),
            snr: None,
        }
    }

    pub fn case2() -> Self {
        Self {
            name: "case2".into(),
            snr: Some([70.0, 50.0, 30.0]),
        }
    }

    pub fn case3() -> Self {
        Self {
            name: "case3".into(),
            snr: Some([60.0, 40.0, 30.0]),
        }
    }

    pub fn standard() -> Vec<Self> {
        vec![Self::case1(), Self::case2(), Self::case3()]
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains([',', '\n', '"']) {
            return Err(Error::Invalid(format!("noise case name `{}`", self.name)));
        }
        if let Some(snr) = self.snr {
            if snr.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                return Err(Error::Invalid(format!(
                    "noise case {} SNR {snr:?}",
                    self.name
                )));
            }
        }
        Ok(())
    }

    pub fn noise(&self, seed: u64) -> NoiseSpec {
        let [p, v, a] = match self.snr {
            Some(s) => s.map(Some),
            None => [None; 3],
        };
        NoiseSpec {
            position: p,
            velocity: v,
            acceleration: a,
            torque: None,
            seed,
        }
    }

    /// The dataset as measured under this case; torques stay clean.
    pub fn apply(&self, dataset: &Dataset, seed: u64) -> Result<Dataset> {
        self.validate()?;
        if self.snr.is_none() {
            return Ok(dataset.clone());
        }
        add_noise(dataset, &self.noise(seed))
    }
}

/// Per-joint counts of raw coefficients with magnitude above a threshold.
pub trait ActiveTerms {
    fn active_counts_at(&self, threshold: f64) -> Vec<usize>;
}

impl ActiveTerms for SparseModel {
    fn active_counts_at(&self, threshold: f64) -> Vec<usize> {
        let mut out = vec![0; self.dof()];
        for (coef, &j) in self.coefficients.iter().zip(&self.outputs) {
            out[j] += coef.iter().filter(|c| c.abs() > threshold).count();
        }
        out
    }
}

impl ActiveTerms for StepwiseModel {
    /// Summed over the three steps; direction-split models report the larger
    /// of the forward and backward chains of each joint.
    fn active_counts_at(&self, threshold: f64) -> Vec<usize> {
        let mut out = vec![0; self.dof];
        for part in &self.parts {
            let mut sum = vec![0; self.dof];
            for m in &part.steps {
                for (s, c) in sum.iter_mut().zip(m.active_counts_at(threshold)) {
                    *s += c;
                }
            }
            match part.joint {
                None => out = sum,
                Some(j) => out[j] = out[j].max(sum[j]),
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActiveRow {
    pub method: String,
    pub case: String,
    pub joint: usize,
    pub active: usize,
}

/// Active-term counts for `(method, case, model)` triples.
pub fn sparsity_report(
    models: &[(&str, &str, &dyn ActiveTerms)],
    threshold: f64,
) -> Vec<ActiveRow> {
    let mut rows = Vec::new();
    for (method, case, model) in models {
        for (j, active) in model.active_counts_at(threshold).into_iter().enumerate() {
            rows.push(ActiveRow {
                method: method.to_string(),
                case: case.to_string(),
                joint: j + 1,
                active,
            });
        }
    }
    rows
}

/// RMS(τ̂ − τ)/RMS(τ) per joint over `test`, whose torques must be the clean
/// oracle values at its (clean) states.
pub fn extrapolation_test(model: &dyn PredictTorque, test: &Dataset) -> Result<Vec<f64>> {
    if test.is_empty() {
        return Err(Error::Invalid("empty test dataset".into()));
    }
    let n = test.dof;
    let mut err = vec![0.0; n];
    let mut power = vec![0.0; n];
    for s in &test.samples {
        let p = model.predict_torque(&s.state())?;
        for j in 0..n {
            err[j] += (p[j] - s.tau[j]).powi(2);
            power[j] += s.tau[j].powi(2);
        }
    }
    (0..n)
        .map(|j| {
            if power[j] == 0.0 {
                Err(Error::Invalid(format!(
                    "joint {} reference torque has zero power",
                    j + 1
                )))
            } else {
                Ok((err[j] / power[j]).sqrt())
            }
        })
        .collect()
}

/// Per-joint sinusoid `c + a·sin(2πft + φ)`. The default keeps speeds
/// (≤ 0.13 rad/s) inside the envelope of the default excitation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeriodicReference {
    pub center: Vec<f64>,
    pub amplitude: Vec<f64>,
    /// [Hz]
    pub frequency: Vec<f64>,
    /// [rad]
    pub phase: Vec<f64>,
}

impl Default for PeriodicReference {
    fn default() -> Self {
        Self {
            center: vec![0.0, 0.3, -0.6],
            amplitude: vec![0.2, 0.15, 0.2],
            frequency: vec![0.1, 0.12, 0.08],
            phase: vec![0.0, 0.5, 1.0],
        }
    }
}

impl PeriodicReference {
    pub fn dof(&self) -> usize {
        self.center.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dof();
        for (name, v) in [
            ("amplitude", &self.amplitude),
            ("frequency", &self.frequency),
            ("phase", &self.phase),
        ] {
            if v.len() != n {
                return Err(Error::dim(format!("reference {name}"), n, v.len()));
            }
        }
        let all = self
            .center
            .iter()
            .chain(&self.amplitude)
            .chain(&self.frequency)
            .chain(&self.phase);
        if all.clone().any(|v| !v.is_finite()) || self.frequency.iter().any(|f| *f < 0.0) {
            return Err(Error::Invalid("reference trajectory parameters".into()));
        }
        Ok(())
    }

    /// Desired position, velocity and acceleration at time `t`.
    pub fn at(&self, t: f64) -> JointState {
        let n = self.dof();
        let (mut q, mut qd, mut qdd) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for j in 0..n {
            let w = TAU * self.frequency[j];
            let (s, c) = (w * t + self.phase[j]).sin_cos();
            q[j] = self.center[j] + self.amplitude[j] * s;
            qd[j] = self.amplitude[j] * w * c;
            qdd[j] = -self.amplitude[j] * w * w * s;
        }
        JointState::new(q, qd, qdd)
    }
}

/// Diagonal PID gains, loop settings and limits shared by every controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerGains {
    pub kp: Vec<f64>,
    pub ki: Vec<f64>,
    pub kd: Vec<f64>,
    /// Control and integration rate [Hz].
    pub rate: f64,
    /// Simulated time [s].
    pub horizon: f64,
    /// Clamp on each integral state [rad·s].
    pub integral_limit: Vec<f64>,
    /// Actuator saturation [N·m].
    pub torque_limit: Vec<f64>,
    /// Abort when any tracking error exceeds this [rad].
    pub divergence: f64,
}

impl Default for ControllerGains {
    fn default() -> Self {
        Self {
            kp: vec![40.0, 60.0, 30.0],
            ki: vec![10.0, 15.0, 8.0],
            kd: vec![6.0, 8.0, 4.0],
            rate: 1000.0,
            horizon: 10.0,
            integral_limit: vec![0.5, 0.5, 0.5],
            torque_limit: vec![80.0, 120.0, 60.0],
            divergence: 10.0,
        }
    }
}

impl ControllerGains {
    pub fn validate(&self, n: usize) -> Result<()> {
        for (name, v) in [
            ("kp", &self.kp),
            ("ki", &self.ki),
            ("kd", &self.kd),
            ("integral_limit", &self.integral_limit),
            ("torque_limit", &self.torque_limit),
        ] {
            if v.len() != n {
                return Err(Error::dim(format!("controller {name}"), n, v.len()));
            }
            if v.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
                return Err(Error::Invalid(format!(
                    "controller {name} must be finite and >= 0"
                )));
            }
        }
        if self.torque_limit.contains(&0.0) {
            return Err(Error::Invalid("controller torque_limit must be > 0".into()));
        }
        if !(self.rate > 0.0
            && self.rate.is_finite()
            && self.horizon > 0.0
            && self.horizon.is_finite())
        {
            return Err(Error::Invalid("controller rate/horizon".into()));
        }
        if !(self.divergence > 0.0) {
            return Err(Error::Invalid("controller divergence bound".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    Pid,
    PidGravity,
    PidFull,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 3] = [Self::Pid, Self::PidGravity, Self::PidFull];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Pid => "pid",
            Self::PidGravity => "pid+gravity",
            Self::PidFull => "pid+full",
        }
    }
}

/// Per-step record of a closed-loop run.
#[derive(Debug, Clone, Default)]
pub struct TrackingLog {
    pub time: Vec<f64>,
    pub q: Vec<Vec<f64>>,
    pub error: Vec<Vec<f64>>,
    pub torque: Vec<Vec<f64>>,
    /// Steps on which at least one joint hit its torque limit.
    pub saturated_steps: usize,
}

impl TrackingLog {
    pub fn rms_error(&self) -> Vec<f64> {
        let n = self.error.first().map_or(0, Vec::len);
        let len = self.error.len().max(1) as f64;
        (0..n)
            .map(|j| (self.error.iter().map(|e| e[j] * e[j]).sum::<f64>() / len).sqrt())
            .collect()
    }
}

/// Simulate PID tracking of `reference` on `plant`. The feedforward is
/// `compensation` evaluated on the desired signal (position, velocity and
/// acceleration): a step-1 model gives Ĝ(q_d), a full model
/// M̂(q_d)q̈_d + Ĉ(q_d, q̇_d)q̇_d + Ĝ(q_d). The plant starts on the reference.
pub fn closed_loop_track(
    compensation: Option<&dyn PredictTorque>,
    gains: &ControllerGains,
    reference: &PeriodicReference,
    plant: &ManipulatorModel,
) -> Result<TrackingLog> {
    let n = plant.dof();
    gains.validate(n)?;
    reference.validate()?;
    if reference.dof() != n {
        return Err(Error::dim("reference trajectory", n, reference.dof()));
    }
    let dt = 1.0 / gains.rate;
    let steps = (gains.horizon * gains.rate).round() as usize;
    let start = reference.at(0.0);
    let (mut q, mut qd) = (start.q.clone(), start.qd.clone());
    let mut integral = vec![0.0; n];
    let mut log = TrackingLog::default();
    for k in 0..steps {
        let t = k as f64 * dt;
        let d = reference.at(t);
        let ff = match compensation {
            Some(m) => m.predict_torque(&d)?,
            None => vec![0.0; n],
        };
        let e: Vec<f64> = (0..n).map(|j| d.q[j] - q[j]).collect();
        if e.iter().any(|x| !(x.abs() <= gains.divergence)) {
            return Err(Error::Numerical(format!(
                "tracking diverged at t = {t:.3} s"
            )));
        }
        let mut tau = vec![0.0; n];
        let mut saturated = false;
        for j in 0..n {
            let ed = d.qd[j] - qd[j];
            let lim = gains.integral_limit[j];
            integral[j] = (integral[j] + e[j] * dt).clamp(-lim, lim);
            let u = gains.kp[j] * e[j] + gains.ki[j] * integral[j] + gains.kd[j] * ed + ff[j];
            let cap = gains.torque_limit[j];
            saturated |= u.abs() > cap;
            tau[j] = u.clamp(-cap, cap);
        }
        log.saturated_steps += usize::from(saturated);
        log.time.push(t);
        log.q.push(q.clone());
        log.error.push(e);
        log.torque.push(tau.clone());
        let (qn, qdn) = plant.forward_dynamics_step(&q, &qd, &tau, dt)?;
        q = qn;
        qd = qdn;
    }
    Ok(log)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LibrarySizeRow {
    pub case: String,
    pub method: String,
    /// `S1`, `S2`, `S3`, `total` or `full`.
    pub library: String,
    pub n1: usize,
    pub n2: usize,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NrmsRow {
    pub case: String,
    pub method: String,
    pub joint: usize,
    pub nrms: f64,
    /// Training residual RMS of the method on this joint [N·m].
    pub train_rms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackingRow {
    pub controller: String,
    pub joint: usize,
    pub rms: f64,
    pub saturated_steps: usize,
}

/// Everything the comparison tables hold. Fit wall-times are kept in memory
/// only so that emitted tables are reproducible byte for byte.
#[derive(Debug, Clone, Default)]
pub struct EvaluationReport {
    pub library_sizes: Vec<LibrarySizeRow>,
    pub active_terms: Vec<ActiveRow>,
    pub extrapolation: Vec<NrmsRow>,
    pub tracking: Vec<TrackingRow>,
    pub fit_seconds: Vec<(String, String, f64)>,
}

/// Fitted models of one noise case.
pub struct CaseModels<'a> {
    pub case: &'a str,
    pub stepwise: &'a StepwiseModel,
    pub monolithic: &'a SparseModel,
    /// Training data the models were fitted on (measured states, clean torques).
    pub train: &'a Dataset,
}

/// Reconstructions of the tracking plant, with the data they relate to.
pub struct PlantModels<'a> {
    pub split: &'a StepwiseModel,
    pub plain: &'a StepwiseModel,
    pub train: &'a Dataset,
    pub test: &'a Dataset,
}

/// Case label of the plant rows in the extrapolation table.
pub const PLANT_CASE: &str = "plant";

/// Per-joint training residual RMS of `model` on `train`.
pub fn residual_rms(model: &dyn PredictTorque, train: &Dataset) -> Result<Vec<f64>> {
    if train.is_empty() {
        return Err(Error::Invalid("empty training dataset".into()));
    }
    let mut acc = vec![0.0; train.dof];
    for s in &train.samples {
        let p = model.predict_torque(&s.state())?;
        for (a, (p, t)) in acc.iter_mut().zip(p.iter().zip(&s.tau)) {
            *a += (p - t).powi(2);
        }
    }
    Ok(acc
        .into_iter()
        .map(|a| (a / train.len() as f64).sqrt())
        .collect())
}

/// Assemble the comparison tables from fitted models and tracking runs.
pub fn build_report(
    cases: &[CaseModels<'_>],
    test: &Dataset,
    threshold: f64,
    plant: &PlantModels<'_>,
    tracking: &[(ControllerKind, TrackingLog)],
) -> Result<EvaluationReport> {
    let mut missing = Vec::new();
    if cases.is_empty() {
        missing.push("fitted models for at least one noise case".to_string());
    }
    if test.is_empty() {
        missing.push("held-out test dataset".to_string());
    }
    if plant.train.is_empty() || plant.test.is_empty() {
        missing.push("plant training and test datasets".to_string());
    }
    for kind in ControllerKind::ALL {
        if !tracking.iter().any(|(k, _)| *k == kind) {
            missing.push(format!("tracking log for {}", kind.as_str()));
        }
    }
    if !missing.is_empty() {
        return Err(Error::Invalid(format!(
            "report inputs missing: {}",
            missing.join("; ")
        )));
    }
    let mut report = EvaluationReport::default();
    for c in cases {
        let mut total = 0;
        for part in c.stepwise.parts.iter().take(1) {
            for m in &part.steps {
                let spec = &m.library.spec;
                total += m.library.len();
                report.library_sizes.push(LibrarySizeRow {
                    case: c.case.into(),
                    method: "stepwise".into(),
                    library: spec.step.to_string(),
                    n1: spec.n1,
                    n2: spec.n2,
                    size: m.library.len(),
                });
            }
        }
        report.library_sizes.push(LibrarySizeRow {
            case: c.case.into(),
            method: "stepwise".into(),
            library: "total".into(),
            n1: 0,
            n2: 0,
            size: total,
        });
        let spec = &c.monolithic.library.spec;
        report.library_sizes.push(LibrarySizeRow {
            case: c.case.into(),
            method: "monolithic".into(),
            library: spec.step.to_string(),
            n1: spec.n1,
            n2: spec.n2,
            size: c.monolithic.library.len(),
        });
        report.active_terms.extend(sparsity_report(
            &[
                ("stepwise", c.case, c.stepwise as &dyn ActiveTerms),
                ("monolithic", c.case, c.monolithic as &dyn ActiveTerms),
            ],
            threshold,
        ));
        for (method, model) in [
            ("stepwise", c.stepwise as &dyn PredictTorque),
            ("monolithic", c.monolithic as &dyn PredictTorque),
        ] {
            let nrms = extrapolation_test(model, test)?;
            let train = residual_rms(model, c.train)?;
            for (j, (nrms, train_rms)) in nrms.into_iter().zip(train).enumerate() {
                report.extrapolation.push(NrmsRow {
                    case: c.case.into(),
                    method: method.into(),
                    joint: j + 1,
                    nrms,
                    train_rms,
                });
            }
        }
    }
    for (method, model) in [("direction-split", plant.split), ("plain", plant.plain)] {
        let nrms = extrapolation_test(model, plant.test)?;
        let train = residual_rms(model, plant.train)?;
        for (j, (nrms, train_rms)) in nrms.into_iter().zip(train).enumerate() {
            report.extrapolation.push(NrmsRow {
                case: PLANT_CASE.into(),
                method: method.into(),
                joint: j + 1,
                nrms,
                train_rms,
            });
        }
    }
    for (kind, log) in tracking {
        for (j, rms) in log.rms_error().into_iter().enumerate() {
            report.tracking.push(TrackingRow {
                controller: kind.as_str().into(),
                joint: j + 1,
                rms,
                saturated_steps: log.saturated_steps,
            });
        }
    }
    let finite = report
        .extrapolation
        .iter()
        .all(|r| r.nrms.is_finite() && r.train_rms.is_finite())
        && report.tracking.iter().all(|r| r.rms.is_finite());
    if !finite {
        return Err(Error::NonFinite("evaluation metrics".into()));
    }
    Ok(report)
}

impl EvaluationReport {
    pub fn library_sizes_csv(&self) -> String {
        let mut s = String::from("case,method,library,n1,n2,size\n");
        for r in &self.library_sizes {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.case, r.method, r.library, r.n1, r.n2, r.size
            );
        }
        s
    }

    pub fn active_terms_csv(&self) -> String {
        let mut s = String::from("case,method,joint,active_terms\n");
        for r in &self.active_terms {
            let _ = writeln!(s, "{},{},{},{}", r.case, r.method, r.joint, r.active);
        }
        s
    }

    pub fn extrapolation_csv(&self) -> String {
        let mut s = String::from("case,method,joint,nrms,train_residual_rms\n");
        for r in &self.extrapolation {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.case,
                r.method,
                r.joint,
                fmt_f64(r.nrms),
                fmt_f64(r.train_rms)
            );
        }
        s
    }

    pub fn tracking_csv(&self) -> String {
        let mut s = String::from("controller,joint,rms_error,saturated_steps\n");
        for r in &self.tracking {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                r.controller,
                r.joint,
                fmt_f64(r.rms),
                r.saturated_steps
            );
        }
        s
    }

    /// Write the four tables into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, body) in [
            ("library_sizes.csv", self.library_sizes_csv()),
            ("active_terms.csv", self.active_terms_csv()),
            ("extrapolation_nrms.csv", self.extrapolation_csv()),
            ("tracking_rms.csv", self.tracking_csv()),
        ] {
            std::fs::write(dir.join(name), body)?;
        }
        Ok(())
    }

    pub fn nrms(&self, case: &str, method: &str) -> Vec<f64> {
        self.extrapolation
            .iter()
            .filter(|r| r.case == case && r.method == method)
            .map(|r| r.nrms)
            .collect()
    }

    pub fn active(&self, case: &str, method: &str) -> Vec<usize> {
        self.active_terms
            .iter()
            .filter(|r| r.case == case && r.method == method)
            .map(|r| r.active)
            .collect()
    }

    pub fn tracking_rms(&self, kind: ControllerKind) -> Vec<f64> {
        self.tracking
            .iter()
            .filter(|r| r.controller == kind.as_str())
            .map(|r| r.rms)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Oracle(ManipulatorModel);

    impl PredictTorque for Oracle {
        fn predict_torque(&self, state: &JointState) -> Result<Vec<f64>> {
            self.0.inverse_dynamics(state, true)
        }
    }

    #[test]
    fn reference_derivatives_match_finite_differences() {
        let r = PeriodicReference::default();
        let h = 1e-5;
        for t in [0.0, 0.7, 3.3] {
            let (a, b, c) = (r.at(t - h), r.at(t), r.at(t + h));
            for j in 0..3 {
                assert!(((c.q[j] - a.q[j]) / (2.0 * h) - b.qd[j]).abs() < 1e-8);
                assert!(((c.qd[j] - a.qd[j]) / (2.0 * h) - b.qdd[j]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn exact_feedforward_tracks_tightly() {
        let gains = ControllerGains {
            horizon: 2.0,
            ..ControllerGains::default()
        };
        let worst = |plant: &ManipulatorModel| {
            let oracle = Oracle(plant.clone());
            let log =
                closed_loop_track(Some(&oracle), &gains, &PeriodicReference::default(), plant)
                    .unwrap();
            log.error
                .iter()
                .flatten()
                .fold(0.0f64, |m, e| m.max(e.abs()))
        };
        // Only the zero-order hold on the torque separates plant and model.
        let smooth = worst(&ManipulatorModel::default_arm());
        assert!(smooth < 1e-5, "max error {smooth}");
        // Dry friction switches inside a control period at velocity reversals.
        let dry = worst(&ManipulatorModel::default_arm_with_friction());
        assert!(dry < 1e-3, "max error {dry}");
    }

    #[test]
    fn unactuated_arm_falls() {
        let plant = ManipulatorModel::default_arm();
        let gains = ControllerGains {
            kp: vec![0.0; 3],
            ki: vec![0.0; 3],
            kd: vec![0.0; 3],
            horizon: 1.0,
            ..ControllerGains::default()
        };
        let log = closed_loop_track(None, &gains, &PeriodicReference::default(), &plant).unwrap();
        let first = log.error[100][1].abs();
        let last = log.error.last().unwrap()[1].abs();
        assert!(last > 10.0 * first && last > 0.1, "{first} -> {last}");
    }

    #[test]
    fn infinite_threshold_counts_nothing() {
        use crate::features::{FeatureLibrary, LibrarySpec, Step};
        let lib = FeatureLibrary::build(LibrarySpec {
            n: 3,
            n1: 2,
            n2: 1,
            step: Step::S1,
            friction: None,
        })
        .unwrap();
        let mut m = SparseModel::zeros(lib, vec![0, 1, 2], 0.1);
        m.coefficients[1][0] = 0.5;
        m.coefficients[1][1] = 0.09;
        m.coefficients[1][2] = -0.3;
        assert_eq!(m.active_counts_at(0.1), vec![0, 2, 0]);
        assert_eq!(m.active_counts_at(f64::INFINITY), vec![0, 0, 0]);
    }

    #[test]
    fn empty_report_names_missing_cells() {
        let empty = Dataset::new(3, vec![]);
        let model = StepwiseModel {
            dof: 3,
            parts: vec![],
            deadband: None,
            dataset_hash: String::new(),
            clusters: vec![],
        };
        let plant = PlantModels {
            split: &model,
            plain: &model,
            train: &empty,
            test: &empty,
        };
        let err = build_report(&[], &empty, 0.1, &plant, &[])
            .unwrap_err()
            .to_string();
        for needle in [
            "noise case",
            "test dataset",
            "plant",
            "pid+gravity",
            "pid+full",
        ] {
            assert!(err.contains(needle), "{err}");
        }
    }
}
