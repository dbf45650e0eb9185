//! Three-step reconstruction on pattern-labelled data (gravity on static
//! samples, Coriolis/centrifugal on uniform ones, inertia on variable ones,
//! each fitted to the residual of the steps before it), the one-shot
//! monolithic baseline, and composite torque prediction.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{fmt_f64, Dataset, Phase};
use crate::dynamics::JointState;
use crate::error::{Error, Result, StepName};
use crate::features::{FeatureLibrary, LibrarySpec, Step, DEFAULT_FRICTION_SCALES};
use crate::regression::{fit_sparse, select_order, OrderRange, RegressionConfig, SparseModel};
use crate::trajectory::direction_indices;

pub const STEP_NAMES: [StepName; 3] = [
    StepName("S1 (gravity)"),
    StepName("S2 (Coriolis/centrifugal)"),
    StepName("S3 (inertia)"),
];
const MONOLITHIC: StepName = StepName("monolithic");
const STEPS: [Step; 3] = [Step::S1, Step::S2, Step::S3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Orders {
    pub n1: usize,
    pub n2: usize,
}

/// Library orders per step and for the monolithic library.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrderPlan {
    pub s1: Orders,
    pub s2: Orders,
    pub s3: Orders,
    pub full: Orders,
}

impl Default for OrderPlan {
    fn default() -> Self {
        Self {
            s1: Orders { n1: 2, n2: 1 },
            s2: Orders { n1: 4, n2: 2 },
            s3: Orders { n1: 4, n2: 1 },
            full: Orders { n1: 4, n2: 2 },
        }
    }
}

impl OrderPlan {
    pub fn step(&self, step: Step) -> Orders {
        match step {
            Step::S1 => self.s1,
            Step::S2 => self.s2,
            Step::S3 => self.s3,
            Step::Full => self.full,
        }
    }
}

/// Direction-split reconstruction for joints with dry friction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrictionMode {
    /// Velocity scales of the exponential (Stribeck-shape) features.
    #[serde(default = "default_scales")]
    pub scales: Vec<f64>,
    /// |q̇ᵢ| below this belongs to neither direction.
    pub deadband: f64,
    /// Uniform-pattern samples with every |q̇ᵢ| at or below this speed form
    /// the quasi-static data of step 1.
    pub quasi_static_speed: f64,
}

fn default_scales() -> Vec<f64> {
    DEFAULT_FRICTION_SCALES.to_vec()
}

impl Default for FrictionMode {
    fn default() -> Self {
        Self {
            scales: default_scales(),
            deadband: 1e-3,
            quasi_static_speed: 0.03,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub orders: OrderPlan,
    /// Select orders from the data instead of using `orders`.
    #[serde(default)]
    pub auto_orders: Option<OrderRange>,
    #[serde(default)]
    pub regression: RegressionConfig,
    #[serde(default)]
    pub friction: Option<FrictionMode>,
}

/// Where a step's training data came from.
#[derive(Debug, Clone, PartialEq)]
pub struct StepProvenance {
    pub step: Step,
    pub pattern: Phase,
    /// Dataset rows the step was trained on.
    pub rows: Vec<usize>,
    pub orders: Orders,
}

/// One chain of three step models. Plain reconstruction has a single part
/// covering every joint; friction mode has a forward and a backward part per
/// joint.
#[derive(Debug, Clone)]
pub struct StepwisePart {
    pub joint: Option<usize>,
    /// +1 forward, −1 backward, 0 both.
    pub direction: i8,
    pub steps: Vec<SparseModel>,
    pub provenance: Vec<StepProvenance>,
}

impl StepwisePart {
    /// Per-step predictions (gravity, Coriolis/centrifugal, inertia).
    fn components(&self, state: &JointState) -> Result<Vec<Vec<f64>>> {
        self.steps.iter().map(|m| m.predict(state)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct StepwiseModel {
    pub dof: usize,
    pub parts: Vec<StepwisePart>,
    /// Friction-mode deadband; `None` for plain reconstruction.
    pub deadband: Option<f64>,
    /// SHA-256 of the training dataset's CSV form.
    pub dataset_hash: String,
    /// Pattern of each cluster id seen in the training annotations.
    pub clusters: Vec<(usize, Phase)>,
}

/// Anything that maps a joint state to joint torques.
pub trait PredictTorque {
    fn predict_torque(&self, state: &JointState) -> Result<Vec<f64>>;
}

impl PredictTorque for SparseModel {
    fn predict_torque(&self, state: &JointState) -> Result<Vec<f64>> {
        self.predict(state)
    }
}

impl PredictTorque for StepwiseModel {
    fn predict_torque(&self, state: &JointState) -> Result<Vec<f64>> {
        let c = self.components(state)?;
        Ok((0..self.dof).map(|j| c[0][j] + c[1][j] + c[2][j]).collect())
    }
}

/// Model restricted to its first `steps` steps (1 = gravity only).
pub struct Truncated<'a> {
    pub model: &'a StepwiseModel,
    pub steps: usize,
}

impl PredictTorque for Truncated<'_> {
    fn predict_torque(&self, state: &JointState) -> Result<Vec<f64>> {
        let c = self.model.components(state)?;
        Ok((0..self.model.dof)
            .map(|j| c[..self.steps].iter().fold(0.0, |acc, v| acc + v[j]))
            .collect())
    }
}

impl StepwiseModel {
    pub fn step_model(&self, steps: usize) -> Truncated<'_> {
        Truncated { model: self, steps }
    }

    /// Step-wise torque contributions `[Ĝ, Ĉq̇, M̂q̈]` at `state`.
    pub fn components(&self, state: &JointState) -> Result<Vec<Vec<f64>>> {
        state.check(self.dof)?;
        let Some(deadband) = self.deadband else {
            return self.parts[0].components(state);
        };
        let mut out = vec![vec![0.0; self.dof]; 3];
        for j in 0..self.dof {
            let v = state.qd[j];
            let part = |dir: i8| {
                self.parts
                    .iter()
                    .find(|p| p.joint == Some(j) && p.direction == dir)
                    .ok_or_else(|| {
                        Error::Invalid(format!("no direction {dir} model for joint {}", j + 1))
                    })
            };
            let picked: Vec<&StepwisePart> = if v >= deadband {
                vec![part(1)?]
            } else if v <= -deadband {
                vec![part(-1)?]
            } else {
                vec![part(1)?, part(-1)?]
            };
            let w = 1.0 / picked.len() as f64;
            for p in picked {
                let c = p.components(state)?;
                for s in 0..3 {
                    out[s][j] += w * c[s][j];
                }
            }
        }
        Ok(out)
    }

    /// Active-term counts per joint, summed over the steps (and averaged
    /// over directions in friction mode, rounded up).
    pub fn active_counts(&self) -> Vec<usize> {
        let mut total = vec![0usize; self.dof];
        let mut parts = vec![0usize; self.dof];
        for p in &self.parts {
            for m in &p.steps {
                for (k, &j) in m.outputs.iter().enumerate() {
                    total[j] += m.active_terms(k).len();
                }
            }
            match p.joint {
                Some(j) => parts[j] += 1,
                None => parts.iter_mut().for_each(|c| *c += 1),
            }
        }
        total
            .iter()
            .zip(&parts)
            .map(|(t, p)| t.div_ceil((*p).max(1)))
            .collect()
    }

    pub fn export(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "stepwise-model");
        let _ = writeln!(s, "dof={}", self.dof);
        let _ = writeln!(
            s,
            "deadband={}",
            self.deadband.map(fmt_f64).unwrap_or_else(|| "none".into())
        );
        let _ = writeln!(s, "dataset={}", self.dataset_hash);
        let clusters: Vec<String> = self
            .clusters
            .iter()
            .map(|(c, p)| format!("{c}:{p}"))
            .collect();
        let _ = writeln!(s, "clusters={}", clusters.join(","));
        let _ = writeln!(s, "parts={}", self.parts.len());
        for part in &self.parts {
            let joint = part
                .joint
                .map(|j| (j + 1).to_string())
                .unwrap_or_else(|| "all".into());
            let _ = writeln!(s, "[part joint={joint} direction={}]", part.direction);
            for (m, p) in part.steps.iter().zip(&part.provenance) {
                let _ = writeln!(
                    s,
                    "provenance step={} pattern={} n1={} n2={} rows={}",
                    p.step,
                    p.pattern,
                    p.orders.n1,
                    p.orders.n2,
                    encode_rows(&p.rows)
                );
                s.push_str(&m.export());
            }
        }
        let _ = writeln!(s, "end");
        s
    }

    pub fn import(text: &str) -> Result<StepwiseModel> {
        let mut lines = text.lines();
        let mut next = || {
            lines
                .next()
                .ok_or_else(|| Error::Parse("truncated stepwise model".into()))
        };
        if next()? != "stepwise-model" {
            return Err(Error::Parse("expected `stepwise-model`".into()));
        }
        let field = |line: &str, key: &str| -> Result<String> {
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix('='))
                .map(str::to_string)
                .ok_or_else(|| Error::Parse(format!("expected `{key}=` but found `{line}`")))
        };
        let int = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::Parse(format!("bad integer `{s}`")))
        };
        let dof = int(&field(next()?, "dof")?)?;
        let deadband = match field(next()?, "deadband")?.as_str() {
            "none" => None,
            v => Some(
                v.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("bad deadband `{v}`")))?,
            ),
        };
        let dataset_hash = field(next()?, "dataset")?;
        let clusters = field(next()?, "clusters")?
            .split(',')
            .filter(|t| !t.is_empty())
            .map(|t| {
                let (c, p) = t
                    .split_once(':')
                    .ok_or_else(|| Error::Parse(format!("bad cluster entry `{t}`")))?;
                Ok((int(c)?, p.parse()?))
            })
            .collect::<Result<Vec<_>>>()?;
        let count = int(&field(next()?, "parts")?)?;
        let mut parts = Vec::with_capacity(count);
        for _ in 0..count {
            let header = next()?;
            let inner = header
                .strip_prefix("[part joint=")
                .and_then(|r| r.strip_suffix(']'))
                .ok_or_else(|| Error::Parse(format!("bad part header `{header}`")))?;
            let (joint, direction) = inner
                .split_once(" direction=")
                .ok_or_else(|| Error::Parse(format!("bad part header `{header}`")))?;
            let joint = match joint {
                "all" => None,
                j => Some(
                    int(j)?
                        .checked_sub(1)
                        .ok_or_else(|| Error::Parse("joint 0".into()))?,
                ),
            };
            let direction: i8 = direction
                .parse()
                .ok()
                .filter(|d: &i8| (-1..=1).contains(d))
                .ok_or_else(|| Error::Parse(format!("bad direction in `{header}`")))?;
            let mut steps = Vec::new();
            let mut provenance = Vec::new();
            for _ in 0..3 {
                provenance.push(parse_provenance(next()?)?);
                // The sparse-model block consumes its own lines.
                let mut block = Vec::new();
                loop {
                    let line = next()?;
                    block.push(line);
                    if line == "end" {
                        break;
                    }
                }
                steps.push(SparseModel::parse_lines(&mut block.into_iter())?);
            }
            parts.push(StepwisePart {
                joint,
                direction,
                steps,
                provenance,
            });
        }
        if next()? != "end" {
            return Err(Error::Parse("expected final `end`".into()));
        }
        let model = StepwiseModel {
            dof,
            parts,
            deadband,
            dataset_hash,
            clusters,
        };
        model.check()?;
        Ok(model)
    }

    fn check(&self) -> Result<()> {
        if self.parts.is_empty() {
            return Err(Error::Parse("stepwise model has no parts".into()));
        }
        for p in &self.parts {
            for (m, s) in p.steps.iter().zip(STEPS) {
                if m.dof() != self.dof || m.step() != s {
                    return Err(Error::Parse(format!(
                        "part step {s} does not match the model"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn encode_rows(rows: &[usize]) -> String {
    let mut out: Vec<String> = Vec::new();
    let mut i = 0;
    while i < rows.len() {
        let mut j = i;
        while j + 1 < rows.len() && rows[j + 1] == rows[j] + 1 {
            j += 1;
        }
        out.push(if i == j {
            rows[i].to_string()
        } else {
            format!("{}-{}", rows[i], rows[j])
        });
        i = j + 1;
    }
    out.join(",")
}

fn decode_rows(text: &str) -> Result<Vec<usize>> {
    let bad = || Error::Parse(format!("bad row list `{text}`"));
    let mut rows = Vec::new();
    for item in text.split(',').filter(|t| !t.is_empty()) {
        match item.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) =
                    (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
                if b < a {
                    return Err(bad());
                }
                rows.extend(a..=b);
            }
            None => rows.push(item.parse().map_err(|_| bad())?),
        }
    }
    Ok(rows)
}

fn parse_provenance(line: &str) -> Result<StepProvenance> {
    let rest = line
        .strip_prefix("provenance ")
        .ok_or_else(|| Error::Parse(format!("expected provenance line, found `{line}`")))?;
    let mut step = None;
    let mut pattern = None;
    let mut n1 = None;
    let mut n2 = None;
    let mut rows = None;
    for item in rest.split(' ') {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("bad provenance item `{item}`")))?;
        let int = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::Parse(format!("bad integer `{s}`")))
        };
        match k {
            "step" => step = Some(v.parse::<Step>()?),
            "pattern" => pattern = Some(v.parse::<Phase>()?),
            "n1" => n1 = Some(int(v)?),
            "n2" => n2 = Some(int(v)?),
            "rows" => rows = Some(decode_rows(v)?),
            _ => return Err(Error::Parse(format!("unknown provenance key `{k}`"))),
        }
    }
    let missing = || Error::Parse(format!("incomplete provenance `{line}`"));
    Ok(StepProvenance {
        step: step.ok_or_else(missing)?,
        pattern: pattern.ok_or_else(missing)?,
        rows: rows.ok_or_else(missing)?,
        orders: Orders {
            n1: n1.ok_or_else(missing)?,
            n2: n2.ok_or_else(missing)?,
        },
    })
}

/// SHA-256 of the dataset's CSV form.
pub fn dataset_hash(dataset: &Dataset) -> Result<String> {
    let mut buf = Vec::new();
    dataset.write_csv(&mut buf)?;
    Ok(Sha256::digest(&buf)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

fn patterns(dataset: &Dataset) -> Result<Vec<Phase>> {
    dataset
        .annotations
        .as_ref()
        .map(|a| a.iter().map(|x| x.pattern).collect())
        .ok_or_else(|| {
            Error::Invalid(
                "stepwise reconstruction needs cluster/pattern columns in the dataset".into(),
            )
        })
}

fn cluster_table(dataset: &Dataset) -> Vec<(usize, Phase)> {
    let mut t: Vec<(usize, Phase)> = dataset
        .annotations
        .iter()
        .flatten()
        .map(|a| (a.cluster, a.pattern))
        .collect();
    t.sort();
    t.dedup();
    t
}

/// Measured torque of `outputs` on `rows` minus what `previous` predicts there.
pub fn residual_targets(
    dataset: &Dataset,
    rows: &[usize],
    outputs: &[usize],
    previous: &[SparseModel],
) -> Result<Vec<Vec<f64>>> {
    let mut targets: Vec<Vec<f64>> = outputs
        .iter()
        .map(|&j| rows.iter().map(|&r| dataset.samples[r].tau[j]).collect())
        .collect();
    for (i, &r) in rows.iter().enumerate() {
        let state = dataset.samples[r].state();
        for m in previous {
            let p = m.predict(&state)?;
            for (t, &j) in targets.iter_mut().zip(outputs) {
                t[i] -= p[j];
            }
        }
    }
    Ok(targets)
}

fn step_spec(dof: usize, step: Step, orders: Orders, friction: Option<&[f64]>) -> LibrarySpec {
    LibrarySpec {
        n: dof,
        n1: orders.n1,
        n2: if step == Step::S1 { 1 } else { orders.n2 },
        step,
        friction: friction.map(<[f64]>::to_vec),
    }
}

/// Fit the three steps on the given row groups with residual chaining.
fn fit_chain(
    dataset: &Dataset,
    groups: [(Phase, Vec<usize>); 3],
    outputs: &[usize],
    friction: Option<&[f64]>,
    config: &PipelineConfig,
) -> Result<(Vec<SparseModel>, Vec<StepProvenance>)> {
    let mut steps: Vec<SparseModel> = Vec::new();
    let mut provenance = Vec::new();
    for (k, (pattern, rows)) in groups.into_iter().enumerate() {
        let step = STEPS[k];
        let name = STEP_NAMES[k];
        let subset = dataset.subset(&rows);
        let targets = residual_targets(dataset, &rows, outputs, &steps)?;
        // Quasi-static data only fixes the friction level, which the constant
        // of the gravity library absorbs; the shape over speed is fitted on
        // uniform motion.
        let fr = if step == Step::S2 { friction } else { None };
        let orders = match &config.auto_orders {
            None => config.orders.step(step),
            Some(range) => {
                let sel = select_order(&subset, step, range, fr, &targets)
                    .map_err(|e| rename(e, name))?;
                Orders {
                    n1: sel.n1,
                    n2: sel.n2,
                }
            }
        };
        let library = FeatureLibrary::build(step_spec(dataset.dof, step, orders, fr))?;
        if subset.len() < library.len() {
            return Err(Error::Underdetermined {
                step: name,
                samples: subset.len(),
                columns: library.len(),
            });
        }
        let design = library.evaluate(&subset)?;
        let model = fit_sparse(
            &library,
            &design,
            &targets,
            outputs,
            &config.regression,
            name,
        )?;
        steps.push(model);
        provenance.push(StepProvenance {
            step,
            pattern,
            rows,
            orders,
        });
    }
    Ok((steps, provenance))
}

fn rename(e: Error, step: StepName) -> Error {
    match e {
        Error::Underdetermined {
            samples, columns, ..
        } => Error::Underdetermined {
            step,
            samples,
            columns,
        },
        other => other,
    }
}

/// Gravity-only model from the static-pattern samples.
pub fn reconstruct_gravity(dataset: &Dataset, config: &PipelineConfig) -> Result<SparseModel> {
    let pats = patterns(dataset)?;
    let rows: Vec<usize> = (0..dataset.len())
        .filter(|&i| pats[i] == Phase::Static)
        .collect();
    let outputs: Vec<usize> = (0..dataset.dof).collect();
    let subset = dataset.subset(&rows);
    let targets = residual_targets(dataset, &rows, &outputs, &[])?;
    let orders = match &config.auto_orders {
        None => config.orders.s1,
        Some(range) => {
            let sel = select_order(&subset, Step::S1, range, None, &targets)
                .map_err(|e| rename(e, STEP_NAMES[0]))?;
            Orders { n1: sel.n1, n2: 1 }
        }
    };
    let library = FeatureLibrary::build(step_spec(dataset.dof, Step::S1, orders, None))?;
    let design = library.evaluate(&subset)?;
    fit_sparse(
        &library,
        &design,
        &targets,
        &outputs,
        &config.regression,
        STEP_NAMES[0],
    )
}

/// Stepwise reconstruction from a pattern-annotated dataset.
pub fn reconstruct_stepwise(dataset: &Dataset, config: &PipelineConfig) -> Result<StepwiseModel> {
    let pats = patterns(dataset)?;
    let dof = dataset.dof;
    let mut parts = Vec::new();
    match &config.friction {
        None => {
            let rows =
                |p: Phase| -> Vec<usize> { (0..dataset.len()).filter(|&i| pats[i] == p).collect() };
            let groups = [
                (Phase::Static, rows(Phase::Static)),
                (Phase::Uniform, rows(Phase::Uniform)),
                (Phase::Variable, rows(Phase::Variable)),
            ];
            let outputs: Vec<usize> = (0..dof).collect();
            let (steps, provenance) = fit_chain(dataset, groups, &outputs, None, config)?;
            parts.push(StepwisePart {
                joint: None,
                direction: 0,
                steps,
                provenance,
            });
        }
        Some(fr) => {
            if !(fr.deadband > 0.0 && fr.quasi_static_speed > fr.deadband) {
                return Err(Error::Invalid(
                    "friction mode needs 0 < deadband < quasi_static_speed".into(),
                ));
            }
            let slow = |i: usize| {
                dataset.samples[i]
                    .qd
                    .iter()
                    .all(|v| v.abs() <= fr.quasi_static_speed)
            };
            for j in 0..dof {
                let (fwd, bwd) = direction_indices(dataset, j, fr.deadband)?;
                for (direction, side) in [(1i8, fwd), (-1i8, bwd)] {
                    let pick = |f: &dyn Fn(usize) -> bool| -> Vec<usize> {
                        side.iter().copied().filter(|&i| f(i)).collect()
                    };
                    let groups = [
                        (
                            Phase::Uniform,
                            pick(&|i| pats[i] == Phase::Uniform && slow(i)),
                        ),
                        (Phase::Uniform, pick(&|i| pats[i] == Phase::Uniform)),
                        (Phase::Variable, pick(&|i| pats[i] == Phase::Variable)),
                    ];
                    let (steps, provenance) =
                        fit_chain(dataset, groups, &[j], Some(&fr.scales), config)?;
                    parts.push(StepwisePart {
                        joint: Some(j),
                        direction,
                        steps,
                        provenance,
                    });
                }
            }
        }
    }
    Ok(StepwiseModel {
        dof,
        parts,
        deadband: config.friction.as_ref().map(|f| f.deadband),
        dataset_hash: dataset_hash(dataset)?,
        clusters: cluster_table(dataset),
    })
}

/// One LASSO fit per joint over the full library on every sample.
pub fn reconstruct_monolithic(dataset: &Dataset, config: &PipelineConfig) -> Result<SparseModel> {
    if dataset.is_empty() {
        return Err(Error::Invalid(
            "monolithic reconstruction on an empty dataset".into(),
        ));
    }
    let outputs: Vec<usize> = (0..dataset.dof).collect();
    let rows: Vec<usize> = (0..dataset.len()).collect();
    let targets = residual_targets(dataset, &rows, &outputs, &[])?;
    let orders = match &config.auto_orders {
        None => config.orders.full,
        Some(range) => {
            let sel = select_order(dataset, Step::Full, range, None, &targets)
                .map_err(|e| rename(e, MONOLITHIC))?;
            Orders {
                n1: sel.n1,
                n2: sel.n2,
            }
        }
    };
    let library = FeatureLibrary::build(step_spec(dataset.dof, Step::Full, orders, None))?;
    if dataset.len() < library.len() {
        return Err(Error::Underdetermined {
            step: MONOLITHIC,
            samples: dataset.len(),
            columns: library.len(),
        });
    }
    let design = library.evaluate(dataset)?;
    fit_sparse(
        &library,
        &design,
        &targets,
        &outputs,
        &config.regression,
        MONOLITHIC,
    )
}

/// Dataset annotated with its ground-truth phases as patterns (cluster id =
/// phase index), for experiments that bypass clustering.
pub fn with_phase_patterns(dataset: &Dataset) -> Dataset {
    let mut out = dataset.clone();
    out.annotations = Some(
        dataset
            .samples
            .iter()
            .map(|s| crate::dataset::Annotation {
                cluster: Phase::ALL.iter().position(|p| *p == s.phase).unwrap_or(0),
                pattern: s.phase,
            })
            .collect(),
    );
    out
}
