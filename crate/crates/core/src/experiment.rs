//! End-to-end runs: simulate the suites, measure them under each noise case,
//! cluster, fit both methods and tabulate the comparison.

use std::time::Instant;

use crate::clustering::{cluster_dataset, ClusterResult};
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::Result;
use crate::evaluation::{
    build_report, closed_loop_track, CaseModels, ControllerKind, EvaluationReport, PlantModels,
    TrackingLog,
};
use crate::pipeline::{reconstruct_monolithic, reconstruct_stepwise, PredictTorque, StepwiseModel};
use crate::regression::SparseModel;
use crate::trajectory::generate;

pub struct Simulated {
    pub train: Dataset,
    pub test: Dataset,
    /// Training data as measured under each noise case (torques clean).
    pub cases: Vec<(String, Dataset)>,
}

pub fn simulate(cfg: &RunConfig) -> Result<Simulated> {
    let train = generate(&cfg.manipulator, &cfg.training.build()?)?;
    let test = generate(&cfg.manipulator, &cfg.test.build()?)?;
    let cases = cfg
        .noise_cases
        .iter()
        .map(|c| Ok((c.name.clone(), c.apply(&train, cfg.seed)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Simulated { train, test, cases })
}

pub fn cluster(cfg: &RunConfig, dataset: &Dataset) -> Result<ClusterResult> {
    cluster_dataset(dataset, &cfg.activation, &cfg.clustering)
}

pub struct CaseFit {
    pub clusters: ClusterResult,
    pub annotated: Dataset,
    pub stepwise: StepwiseModel,
    pub monolithic: SparseModel,
    pub stepwise_seconds: f64,
    pub monolithic_seconds: f64,
}

/// Cluster the measured data, then fit the stepwise model on the resulting
/// patterns and the monolithic model on everything.
pub fn fit_case(cfg: &RunConfig, measured: &Dataset) -> Result<CaseFit> {
    let clusters = cluster(cfg, measured)?;
    let annotated = clusters.annotate(measured)?;
    let t = Instant::now();
    let stepwise = reconstruct_stepwise(&annotated, &cfg.pipeline)?;
    let stepwise_seconds = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let monolithic = reconstruct_monolithic(measured, &cfg.pipeline)?;
    let monolithic_seconds = t.elapsed().as_secs_f64();
    Ok(CaseFit {
        clusters,
        annotated,
        stepwise,
        monolithic,
        stepwise_seconds,
        monolithic_seconds,
    })
}

/// Clean data of the tracking plant.
pub struct PlantData {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn simulate_plant(cfg: &RunConfig) -> Result<PlantData> {
    let plant = cfg.plant();
    Ok(PlantData {
        train: generate(&plant, &cfg.control.training.build()?)?,
        test: generate(&plant, &cfg.control.test.build()?)?,
    })
}

/// Reconstructions of the tracking plant: direction-split (the compensation
/// model) and the plain pipeline for comparison.
pub struct PlantFit {
    pub split: StepwiseModel,
    pub plain: StepwiseModel,
}

pub fn fit_plant(cfg: &RunConfig, train: &Dataset) -> Result<PlantFit> {
    let annotated = cluster(cfg, train)?.annotate(train)?;
    Ok(PlantFit {
        split: reconstruct_stepwise(&annotated, &cfg.control_pipeline())?,
        plain: reconstruct_stepwise(&annotated, &cfg.pipeline)?,
    })
}

/// The three controllers on the configured plant and reference: no
/// compensation, the gravity step only, and the complete model.
pub fn track_all(
    cfg: &RunConfig,
    model: &StepwiseModel,
) -> Result<Vec<(ControllerKind, TrackingLog)>> {
    let plant = cfg.plant();
    let gravity = model.step_model(1);
    ControllerKind::ALL
        .iter()
        .map(|&kind| {
            let compensation: Option<&dyn PredictTorque> = match kind {
                ControllerKind::Pid => None,
                ControllerKind::PidGravity => Some(&gravity),
                ControllerKind::PidFull => Some(model),
            };
            let log = closed_loop_track(
                compensation,
                &cfg.control.gains,
                &cfg.control.reference,
                &plant,
            )?;
            Ok((kind, log))
        })
        .collect()
}

/// Tables for already fitted models, one `(case, stepwise, monolithic)`
/// triple per configured noise case, plus the plant reconstructions.
pub fn evaluate_models(
    cfg: &RunConfig,
    sim: &Simulated,
    models: &[(String, StepwiseModel, SparseModel)],
    plant_data: &PlantData,
    plant_fit: &PlantFit,
) -> Result<EvaluationReport> {
    let mut cases = Vec::new();
    for (name, stepwise, monolithic) in models {
        let train = &sim
            .cases
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| crate::Error::Invalid(format!("no measured data for case `{name}`")))?
            .1;
        cases.push(CaseModels {
            case: name,
            stepwise,
            monolithic,
            train,
        });
    }
    let plant = PlantModels {
        split: &plant_fit.split,
        plain: &plant_fit.plain,
        train: &plant_data.train,
        test: &plant_data.test,
    };
    let tracking = track_all(cfg, &plant_fit.split)?;
    build_report(
        &cases,
        &sim.test,
        cfg.pipeline.regression.threshold,
        &plant,
        &tracking,
    )
}

/// Full comparison from scratch; fit times are attached to the report.
pub fn evaluate(cfg: &RunConfig) -> Result<EvaluationReport> {
    let sim = simulate(cfg)?;
    let mut models = Vec::new();
    let mut seconds = Vec::new();
    for (name, measured) in &sim.cases {
        let fit = fit_case(cfg, measured)?;
        seconds.push((name.clone(), "stepwise".to_string(), fit.stepwise_seconds));
        seconds.push((
            name.clone(),
            "monolithic".to_string(),
            fit.monolithic_seconds,
        ));
        models.push((name.clone(), fit.stepwise, fit.monolithic));
    }
    let plant_data = simulate_plant(cfg)?;
    let plant_fit = fit_plant(cfg, &plant_data.train)?;
    let mut report = evaluate_models(cfg, &sim, &models, &plant_data, &plant_fit)?;
    report.fit_seconds = seconds;
    Ok(report)
}
