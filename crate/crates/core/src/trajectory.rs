//! Excitation trajectories made of hold, constant-velocity and sinusoidal
//! phases, sampled into labeled datasets; additive-noise injection and
//! direction splitting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Phase, Sample};
use crate::dynamics::{JointState, ManipulatorModel};
use crate::error::{ensure_finite, Error, Result};

/// One phase of an excitation trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PhaseSpec {
    /// Stand still, either where the previous phase left the arm or at
    /// explicit `angles`.
    Hold {
        duration: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        angles: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        blend_in: Option<f64>,
    },
    /// Constant joint rates [rad/s].
    Ramp {
        duration: f64,
        rates: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        blend_in: Option<f64>,
    },
    /// `q0 + A (sin(2π f t + φ) − sin φ)` per joint.
    Sine {
        duration: f64,
        amplitude: Vec<f64>,
        frequency: Vec<f64>,
        phase: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        blend_in: Option<f64>,
    },
}

impl PhaseSpec {
    pub fn duration(&self) -> f64 {
        match self {
            PhaseSpec::Hold { duration, .. }
            | PhaseSpec::Ramp { duration, .. }
            | PhaseSpec::Sine { duration, .. } => *duration,
        }
    }

    fn blend_in(&self) -> Option<f64> {
        match self {
            PhaseSpec::Hold { blend_in, .. }
            | PhaseSpec::Ramp { blend_in, .. }
            | PhaseSpec::Sine { blend_in, .. } => *blend_in,
        }
    }

    pub fn label(&self) -> Phase {
        match self {
            PhaseSpec::Hold { .. } => Phase::Static,
            PhaseSpec::Ramp { .. } => Phase::Uniform,
            PhaseSpec::Sine { .. } => Phase::Variable,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySpec {
    pub sample_rate: f64,
    /// Duration of the quintic blend inserted between consecutive phases [s].
    pub blend_time: f64,
    pub initial: Vec<f64>,
    /// `[lower, upper]` per joint [rad].
    pub joint_limits: Vec<[f64; 2]>,
    pub phases: Vec<PhaseSpec>,
}

impl TrajectorySpec {
    pub fn dof(&self) -> usize {
        self.initial.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dof();
        if n == 0 {
            return Err(Error::Invalid("trajectory: empty initial position".into()));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return Err(Error::Invalid(format!(
                "trajectory: sample rate {}",
                self.sample_rate
            )));
        }
        if !(self.blend_time >= 0.0 && self.blend_time.is_finite()) {
            return Err(Error::Invalid(format!(
                "trajectory: blend time {}",
                self.blend_time
            )));
        }
        if self.phases.is_empty() {
            return Err(Error::Invalid("trajectory: no phases".into()));
        }
        ensure_finite(&self.initial, "trajectory initial position")?;
        if self.joint_limits.len() != n {
            return Err(Error::dim("joint limits", n, self.joint_limits.len()));
        }
        if self.joint_limits.iter().any(|[lo, hi]| !(lo < hi)) {
            return Err(Error::Invalid(
                "trajectory: joint limit lower >= upper".into(),
            ));
        }
        for (k, phase) in self.phases.iter().enumerate() {
            let d = phase.duration();
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::Invalid(format!(
                    "trajectory phase {k}: duration {d}"
                )));
            }
            if let Some(b) = phase.blend_in() {
                if !(b >= 0.0 && b.is_finite()) {
                    return Err(Error::Invalid(format!("trajectory phase {k}: blend {b}")));
                }
            }
            let vectors: Vec<&Vec<f64>> = match phase {
                PhaseSpec::Hold { angles, .. } => angles.iter().collect(),
                PhaseSpec::Ramp { rates, .. } => vec![rates],
                PhaseSpec::Sine {
                    amplitude,
                    frequency,
                    phase,
                    ..
                } => {
                    if frequency.iter().any(|f| !(*f > 0.0)) {
                        return Err(Error::Invalid(format!(
                            "trajectory phase {k}: frequency must be > 0"
                        )));
                    }
                    vec![amplitude, frequency, phase]
                }
            };
            for v in vectors {
                if v.len() != n {
                    return Err(Error::dim(
                        format!("trajectory phase {k} parameters"),
                        n,
                        v.len(),
                    ));
                }
                ensure_finite(v, &format!("trajectory phase {k} parameters"))?;
            }
        }
        Ok(())
    }

    /// Piecewise-analytic plan of the whole trajectory.
    pub fn plan(&self) -> Result<Plan> {
        self.validate()?;
        let mut plan = Plan {
            segments: Vec::new(),
        };
        for phase in &self.phases {
            plan.push(phase, self.blend_time, &self.initial);
        }
        Ok(plan)
    }

    pub fn total_duration(&self) -> Result<f64> {
        Ok(self.plan()?.end_time())
    }
}

#[derive(Debug, Clone)]
enum Motion {
    Hold(Vec<f64>),
    Ramp {
        start: Vec<f64>,
        rates: Vec<f64>,
    },
    Sine {
        start: Vec<f64>,
        amplitude: Vec<f64>,
        omega: Vec<f64>,
        phase: Vec<f64>,
    },
    /// Per-joint quintic coefficients in local time.
    Blend(Vec<[f64; 6]>),
}

#[derive(Debug, Clone)]
struct Segment {
    start: f64,
    duration: f64,
    label: Phase,
    motion: Motion,
}

impl Segment {
    fn eval(&self, tau: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        match &self.motion {
            Motion::Hold(q) => (q.clone(), vec![0.0; q.len()], vec![0.0; q.len()]),
            Motion::Ramp { start, rates } => (
                start.iter().zip(rates).map(|(s, r)| s + r * tau).collect(),
                rates.clone(),
                vec![0.0; rates.len()],
            ),
            Motion::Sine {
                start,
                amplitude,
                omega,
                phase,
            } => {
                let n = start.len();
                let mut q = Vec::with_capacity(n);
                let mut qd = Vec::with_capacity(n);
                let mut qdd = Vec::with_capacity(n);
                for i in 0..n {
                    let arg = omega[i] * tau + phase[i];
                    q.push(start[i] + amplitude[i] * (arg.sin() - phase[i].sin()));
                    qd.push(amplitude[i] * omega[i] * arg.cos());
                    qdd.push(-amplitude[i] * omega[i] * omega[i] * arg.sin());
                }
                (q, qd, qdd)
            }
            Motion::Blend(coeffs) => {
                let t = tau;
                let mut q = Vec::with_capacity(coeffs.len());
                let mut qd = Vec::with_capacity(coeffs.len());
                let mut qdd = Vec::with_capacity(coeffs.len());
                for c in coeffs {
                    q.push(c[0] + t * (c[1] + t * (c[2] + t * (c[3] + t * (c[4] + t * c[5])))));
                    qd.push(
                        c[1] + t
                            * (2.0 * c[2] + t * (3.0 * c[3] + t * (4.0 * c[4] + t * 5.0 * c[5]))),
                    );
                    qdd.push(2.0 * c[2] + t * (6.0 * c[3] + t * (12.0 * c[4] + t * 20.0 * c[5])));
                }
                (q, qd, qdd)
            }
        }
    }

    fn end_state(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        self.eval(self.duration)
    }
}

/// Quintic matching position, velocity and acceleration at both ends.
fn quintic(p0: f64, v0: f64, a0: f64, p1: f64, v1: f64, a1: f64, t: f64) -> [f64; 6] {
    let h = p1 - p0;
    let (t2, t3) = (t * t, t * t * t);
    [
        p0,
        v0,
        0.5 * a0,
        (20.0 * h - (8.0 * v1 + 12.0 * v0) * t - (3.0 * a0 - a1) * t2) / (2.0 * t3),
        (-30.0 * h + (14.0 * v1 + 16.0 * v0) * t + (3.0 * a0 - 2.0 * a1) * t2) / (2.0 * t3 * t),
        (12.0 * h - 6.0 * (v1 + v0) * t + (a1 - a0) * t2) / (2.0 * t3 * t2),
    ]
}

/// Analytic trajectory as a sequence of time segments.
#[derive(Debug, Clone)]
pub struct Plan {
    segments: Vec<Segment>,
}

impl Plan {
    pub fn end_time(&self) -> f64 {
        self.segments
            .last()
            .map(|s| s.start + s.duration)
            .unwrap_or(0.0)
    }

    /// Position, velocity and acceleration at the end of the plan.
    pub fn end_state(&self) -> Option<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        self.segments.last().map(Segment::end_state)
    }

    fn push(&mut self, phase: &PhaseSpec, default_blend: f64, initial: &[f64]) {
        let n = initial.len();
        // Velocity and acceleration the phase starts with, independent of where
        // it starts.
        let (v1, a1): (Vec<f64>, Vec<f64>) = match phase {
            PhaseSpec::Hold { .. } => (vec![0.0; n], vec![0.0; n]),
            PhaseSpec::Ramp { rates, .. } => (rates.clone(), vec![0.0; n]),
            PhaseSpec::Sine {
                amplitude,
                frequency,
                phase,
                ..
            } => (0..n)
                .map(|i| {
                    let w = 2.0 * std::f64::consts::PI * frequency[i];
                    (
                        amplitude[i] * w * phase[i].cos(),
                        -amplitude[i] * w * w * phase[i].sin(),
                    )
                })
                .unzip(),
        };

        let start = match self.end_state() {
            None => match phase {
                PhaseSpec::Hold {
                    angles: Some(a), ..
                } => a.clone(),
                _ => initial.to_vec(),
            },
            Some((p0, v0, a0)) => {
                let t = phase.blend_in().unwrap_or(default_blend);
                let p1: Vec<f64> = match phase {
                    PhaseSpec::Hold {
                        angles: Some(a), ..
                    } => a.clone(),
                    // Endpoint of the quartic whose velocity is the cubic
                    // Hermite interpolant between the two velocity states.
                    _ => (0..n)
                        .map(|i| p0[i] + t * (v0[i] + v1[i]) / 2.0 + t * t * (a0[i] - a1[i]) / 12.0)
                        .collect(),
                };
                if t > 0.0 {
                    let coeffs = (0..n)
                        .map(|i| quintic(p0[i], v0[i], a0[i], p1[i], v1[i], a1[i], t))
                        .collect();
                    self.segments.push(Segment {
                        start: self.end_time(),
                        duration: t,
                        label: Phase::Variable,
                        motion: Motion::Blend(coeffs),
                    });
                }
                p1
            }
        };

        let motion = match phase {
            PhaseSpec::Hold { .. } => Motion::Hold(start),
            PhaseSpec::Ramp { rates, .. } => Motion::Ramp {
                start,
                rates: rates.clone(),
            },
            PhaseSpec::Sine {
                amplitude,
                frequency,
                phase,
                ..
            } => Motion::Sine {
                start,
                amplitude: amplitude.clone(),
                omega: frequency
                    .iter()
                    .map(|f| 2.0 * std::f64::consts::PI * f)
                    .collect(),
                phase: phase.clone(),
            },
        };
        self.segments.push(Segment {
            start: self.end_time(),
            duration: phase.duration(),
            label: phase.label(),
            motion,
        });
    }

    /// Per-joint position range over the segments from `first` on.
    fn bounds_from(&self, first: usize) -> (Vec<f64>, Vec<f64>) {
        let n = self.segments[0].eval(0.0).0.len();
        let (mut lo, mut hi) = (vec![f64::INFINITY; n], vec![f64::NEG_INFINITY; n]);
        for seg in &self.segments[first..] {
            for k in 0..=64 {
                let q = seg.eval(seg.duration * k as f64 / 64.0).0;
                for i in 0..n {
                    lo[i] = lo[i].min(q[i]);
                    hi[i] = hi[i].max(q[i]);
                }
            }
        }
        (lo, hi)
    }

    /// State and label at time `t` (clamped to the plan).
    pub fn eval(&self, t: f64) -> (JointState, Phase) {
        let idx = self
            .segments
            .partition_point(|s| s.start <= t)
            .saturating_sub(1);
        let seg = &self.segments[idx];
        let tau = (t - seg.start).clamp(0.0, seg.duration);
        let (q, qd, qdd) = seg.eval(tau);
        (JointState::new(q, qd, qdd), seg.label)
    }

    /// Sample times `i / rate` strictly before the end of the plan.
    pub fn sample_times(&self, rate: f64) -> Vec<f64> {
        let end = self.end_time();
        let count = (end * rate - 1e-9).ceil().max(0.0) as usize;
        (0..count).map(|i| i as f64 / rate).collect()
    }
}

/// Sample the trajectory and compute torques with the ground-truth model
/// (including friction when the model defines it).
pub fn generate(model: &ManipulatorModel, spec: &TrajectorySpec) -> Result<Dataset> {
    let n = model.dof();
    if spec.dof() != n {
        return Err(Error::dim("trajectory joint count", n, spec.dof()));
    }
    let plan = spec.plan()?;
    let friction = model.has_friction();
    let mut samples = Vec::new();
    for t in plan.sample_times(spec.sample_rate) {
        let (state, phase) = plan.eval(t);
        for (i, (&q, [lo, hi])) in state.q.iter().zip(&spec.joint_limits).enumerate() {
            if q < *lo || q > *hi {
                return Err(Error::Invalid(format!(
                    "trajectory leaves joint {} limits [{lo}, {hi}] at t = {t:.3} s (q = {q:.4})",
                    i + 1
                )));
            }
        }
        let tau = model.inverse_dynamics(&state, friction)?;
        let dir = state
            .qd
            .iter()
            .map(|v| crate::dynamics::sign(*v) as i8)
            .collect();
        samples.push(Sample {
            t,
            q: state.q,
            qd: state.qd,
            qdd: state.qdd,
            tau,
            phase,
            dir,
        });
    }
    Ok(Dataset::new(n, samples))
}

/// Per-channel signal-to-noise ratios in dB; `None` disables a channel.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    #[serde(default)]
    pub position: Option<f64>,
    #[serde(default)]
    pub velocity: Option<f64>,
    #[serde(default)]
    pub acceleration: Option<f64>,
    #[serde(default)]
    pub torque: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl NoiseSpec {
    pub fn is_disabled(&self) -> bool {
        [self.position, self.velocity, self.acceleration, self.torque]
            .iter()
            .all(Option::is_none)
    }
}

/// Add white Gaussian noise so each column's SNR (mean square of the clean
/// column over the dataset, relative to the noise variance) equals the
/// requested value. Every column draws from its own seed-derived stream.
pub fn add_noise(dataset: &Dataset, noise: &NoiseSpec) -> Result<Dataset> {
    if dataset.is_empty() {
        return Err(Error::Invalid(
            "cannot add noise to an empty dataset".into(),
        ));
    }
    let mut out = dataset.clone();
    let n = dataset.dof;
    let channels: [(Option<f64>, &str); 4] = [
        (noise.position, "position"),
        (noise.velocity, "velocity"),
        (noise.acceleration, "acceleration"),
        (noise.torque, "torque"),
    ];
    for (c, (snr, name)) in channels.iter().enumerate() {
        let Some(snr) = *snr else { continue };
        if !(snr > 0.0 && snr.is_finite()) {
            return Err(Error::Invalid(format!("{name} SNR {snr} dB")));
        }
        for j in 0..n {
            let power = out
                .samples
                .iter_mut()
                .map(|s| channel(s, c, j).powi(2))
                .sum::<f64>()
                / out.len() as f64;
            if power == 0.0 {
                return Err(Error::Invalid(format!(
                    "{name} channel of joint {} has zero power; SNR undefined",
                    j + 1
                )));
            }
            let sigma = (power / 10f64.powf(snr / 10.0)).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
            rng.set_stream((c * n + j) as u64);
            for s in out.samples.iter_mut() {
                let e: f64 = rng.sample(StandardNormal);
                *channel(s, c, j) += sigma * e;
            }
        }
    }
    Ok(out)
}

fn channel(s: &mut Sample, c: usize, j: usize) -> &mut f64 {
    match c {
        0 => &mut s.q[j],
        1 => &mut s.qd[j],
        2 => &mut s.qdd[j],
        _ => &mut s.tau[j],
    }
}

/// Partition by the direction of `joint`: forward for positive noise-free
/// velocity, backward for negative. Samples whose measured speed is below
/// `deadband` (or whose direction is zero) go to neither part.
pub fn split_by_direction(
    dataset: &Dataset,
    joint: usize,
    deadband: f64,
) -> Result<(Dataset, Dataset)> {
    let (fwd, bwd) = direction_indices(dataset, joint, deadband)?;
    Ok((dataset.subset(&fwd), dataset.subset(&bwd)))
}

/// Sample indices of the forward and backward parts of [`split_by_direction`].
pub fn direction_indices(
    dataset: &Dataset,
    joint: usize,
    deadband: f64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if joint >= dataset.dof {
        return Err(Error::Invalid(format!(
            "joint index {joint} for a {}-joint dataset",
            dataset.dof
        )));
    }
    let mut fwd = Vec::new();
    let mut bwd = Vec::new();
    for (k, s) in dataset.samples.iter().enumerate() {
        if s.qd[joint].abs() < deadband {
            continue;
        }
        match s.dir[joint] {
            1 => fwd.push(k),
            -1 => bwd.push(k),
            _ => {}
        }
    }
    Ok((fwd, bwd))
}

/// Generator for the default excitation suite: repeated cycles of
/// hold → constant-velocity ramp → hold → multi-joint sinusoid, with random
/// per-cycle parameters drawn from a seeded stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub cycles: usize,
    pub sample_rate: f64,
    pub blend_time: f64,
    pub hold_duration: f64,
    pub ramp_duration: f64,
    pub sine_duration: f64,
    /// Range of per-joint ramp speeds [rad/s].
    pub ramp_speed: [f64; 2],
    pub sine_frequency: f64,
    /// Range of per-joint peak sinusoid accelerations [rad/s²].
    pub sine_acceleration: [f64; 2],
    pub initial: Vec<f64>,
    pub joint_limits: Vec<[f64; 2]>,
    /// Fraction of each joint range the generator steers within.
    #[serde(default = "default_working_fraction")]
    pub working_fraction: f64,
    /// Optional slow ramp after the first hold of each cycle (quasi-static
    /// data for friction identification); zero disables it.
    #[serde(default)]
    pub creep_duration: f64,
    #[serde(default)]
    pub creep_speed: [f64; 2],
    pub seed: u64,
}

fn default_working_fraction() -> f64 {
    0.7
}

impl SuiteConfig {
    /// Training suite for the default arm.
    pub fn default_training() -> Self {
        Self {
            cycles: 200,
            sample_rate: 4.0,
            blend_time: 1.0,
            hold_duration: 1.5,
            ramp_duration: 8.0,
            sine_duration: 10.0,
            ramp_speed: [0.06, 0.15],
            sine_frequency: 0.1,
            sine_acceleration: [0.05, 0.1],
            initial: vec![0.0, 0.3, -0.6],
            joint_limits: vec![[-3.1, 3.1], [-1.4, 1.6], [-2.6, 2.6]],
            working_fraction: 0.9,
            creep_duration: 0.0,
            creep_speed: [0.0, 0.0],
            seed: 7,
        }
    }

    /// Held-out suite with different speeds, frequency and seed, inside a
    /// slightly narrower range.
    pub fn default_test() -> Self {
        Self {
            cycles: 12,
            sample_rate: 10.0,
            ramp_speed: [0.07, 0.13],
            sine_frequency: 0.13,
            sine_acceleration: [0.06, 0.09],
            initial: vec![0.4, 0.1, -0.9],
            working_fraction: 0.8,
            seed: 1234,
            ..Self::default_training()
        }
    }

    /// Training suite with a slow creep after each first hold, for arms
    /// with joint friction.
    pub fn friction_training() -> Self {
        Self {
            creep_duration: 8.0,
            creep_speed: [0.01, 0.03],
            ..Self::default_training()
        }
    }

    pub fn friction_test() -> Self {
        Self {
            creep_duration: 8.0,
            creep_speed: [0.012, 0.025],
            ..Self::default_test()
        }
    }

    pub fn build(&self) -> Result<TrajectorySpec> {
        let n = self.initial.len();
        if self.joint_limits.len() != n {
            return Err(Error::dim("suite joint limits", n, self.joint_limits.len()));
        }
        if self.cycles == 0 {
            return Err(Error::Invalid("trajectory suite has zero cycles".into()));
        }
        let [smin, smax] = self.ramp_speed;
        let [amin, amax] = self.sine_acceleration;
        let [cmin, cmax] = self.creep_speed;
        if !(0.0 <= smin
            && smin <= smax
            && self.creep_duration >= 0.0
            && (self.creep_duration == 0.0 || (0.0 < cmin && cmin <= cmax))
            && 0.0 <= amin
            && amin <= amax
            && self.sine_frequency > 0.0)
        {
            return Err(Error::Invalid("trajectory suite ranges".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut spec = TrajectorySpec {
            sample_rate: self.sample_rate,
            blend_time: self.blend_time,
            initial: self.initial.clone(),
            joint_limits: self.joint_limits.clone(),
            phases: Vec::new(),
        };
        let centers: Vec<f64> = self
            .joint_limits
            .iter()
            .map(|[lo, hi]| 0.5 * (lo + hi))
            .collect();
        let half: Vec<f64> = self
            .joint_limits
            .iter()
            .map(|[lo, hi]| 0.5 * (hi - lo) * self.working_fraction)
            .collect();
        let omega = 2.0 * std::f64::consts::PI * self.sine_frequency;

        let hold = |d: f64| PhaseSpec::Hold {
            duration: d,
            angles: None,
            blend_in: None,
        };
        let inside = |lo: &[f64], hi: &[f64]| {
            (0..n).all(|i| {
                (lo[i] - centers[i]).abs() <= half[i] && (hi[i] - centers[i]).abs() <= half[i]
            })
        };
        // Append `draw()` once it keeps the arm inside the working range.
        let append = |spec: &mut TrajectorySpec,
                      rng: &mut ChaCha8Rng,
                      draw: &dyn Fn(&mut ChaCha8Rng, &[f64], f64) -> PhaseSpec|
         -> Result<()> {
            let (p, first) = if spec.phases.is_empty() {
                (spec.initial.clone(), 0)
            } else {
                let plan = spec.plan()?;
                (
                    plan.end_state().map(|s| s.0).unwrap_or_default(),
                    plan.segments.len(),
                )
            };
            for attempt in 0..64 {
                // Shrink the motion every few rejected draws.
                let shrink = 0.85f64.powi(attempt / 8);
                spec.phases.push(draw(rng, &p, shrink));
                let (lo, hi) = spec.plan()?.bounds_from(first);
                if inside(&lo, &hi) {
                    return Ok(());
                }
                spec.phases.pop();
            }
            Err(Error::Invalid(
                "trajectory suite cannot stay inside the working range".into(),
            ))
        };
        let (centers, half) = (&centers, &half);
        let ramp = |duration: f64, [lo, hi]: [f64; 2]| {
            let travel = duration + self.blend_time;
            move |rng: &mut ChaCha8Rng, p: &[f64], shrink: f64| {
                let rates = (0..n)
                    .map(|i| {
                        let speed = shrink * rng.random_range(lo..=hi);
                        let up = centers[i] + half[i] - p[i];
                        let down = p[i] - (centers[i] - half[i]);
                        let reach = speed * travel;
                        let forward = if reach <= up && reach <= down {
                            // Bias towards the centre of the range.
                            let p_center = 0.5 - 0.5 * (p[i] - centers[i]) / half[i];
                            rng.random_bool(p_center.clamp(0.0, 1.0))
                        } else {
                            up >= down
                        };
                        let room = if forward { up } else { down };
                        let speed = speed.min(0.95 * room.max(0.0) / travel);
                        if forward {
                            speed
                        } else {
                            -speed
                        }
                    })
                    .collect();
                PhaseSpec::Ramp {
                    duration,
                    rates,
                    blend_in: None,
                }
            }
        };
        let draw_ramp = ramp(self.ramp_duration, self.ramp_speed);
        let draw_creep = ramp(self.creep_duration, self.creep_speed);
        let draw_sine = |rng: &mut ChaCha8Rng, _: &[f64], shrink: f64| {
            let offset = rng.random_range(0.0..std::f64::consts::TAU);
            let mut amplitude = Vec::with_capacity(n);
            let mut phase = Vec::with_capacity(n);
            for i in 0..n {
                amplitude.push(shrink * rng.random_range(amin..=amax) / (omega * omega));
                let phi = offset + i as f64 * std::f64::consts::PI / n as f64;
                phase.push(phi.rem_euclid(std::f64::consts::TAU));
            }
            PhaseSpec::Sine {
                duration: self.sine_duration,
                amplitude,
                frequency: vec![self.sine_frequency; n],
                phase,
                blend_in: None,
            }
        };
        let draw_hold = |_: &mut ChaCha8Rng, _: &[f64], _: f64| hold(self.hold_duration);
        for _ in 0..self.cycles {
            append(&mut spec, &mut rng, &draw_hold)?;
            if self.creep_duration > 0.0 {
                append(&mut spec, &mut rng, &draw_creep)?;
                append(&mut spec, &mut rng, &draw_hold)?;
            }
            append(&mut spec, &mut rng, &draw_ramp)?;
            append(&mut spec, &mut rng, &draw_hold)?;
            append(&mut spec, &mut rng, &draw_sine)?;
        }
        spec.phases.push(hold(self.hold_duration));
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_with(phases: Vec<PhaseSpec>) -> TrajectorySpec {
        TrajectorySpec {
            sample_rate: 100.0,
            blend_time: 0.2,
            initial: vec![0.0, 0.3, -0.5],
            joint_limits: vec![[-3.0, 3.0]; 3],
            phases,
        }
    }

    #[test]
    fn hold_samples_are_at_rest_with_gravity_torque() {
        let model = ManipulatorModel::default_arm();
        let spec = spec_with(vec![PhaseSpec::Hold {
            duration: 0.5,
            angles: Some(vec![0.1, 0.2, 0.3]),
            blend_in: None,
        }]);
        let ds = generate(&model, &spec).unwrap();
        assert_eq!(ds.len(), 50);
        for s in &ds.samples {
            assert_eq!(s.phase, Phase::Static);
            assert!(s.qd.iter().chain(&s.qdd).all(|v| *v == 0.0));
            let g = model
                .inverse_dynamics(&JointState::at_rest(s.q.clone()), false)
                .unwrap();
            assert_eq!(s.tau, g);
        }
    }

    #[test]
    fn ramp_interior_has_constant_rate() {
        let model = ManipulatorModel::default_arm();
        let rates = vec![0.2, -0.1, 0.05];
        let spec = spec_with(vec![
            PhaseSpec::Hold {
                duration: 0.3,
                angles: None,
                blend_in: None,
            },
            PhaseSpec::Ramp {
                duration: 1.0,
                rates: rates.clone(),
                blend_in: None,
            },
        ]);
        let ds = generate(&model, &spec).unwrap();
        let uniform: Vec<_> = ds
            .samples
            .iter()
            .filter(|s| s.phase == Phase::Uniform)
            .collect();
        assert!(!uniform.is_empty());
        for s in uniform {
            assert_eq!(s.qd, rates);
            assert!(s.qdd.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn sine_peak_velocity_matches_derivative() {
        let model = ManipulatorModel::default_arm();
        let (a, f) = (0.3, 0.5);
        let spec = spec_with(vec![PhaseSpec::Sine {
            duration: 4.0,
            amplitude: vec![a, 0.1, 0.1],
            frequency: vec![f, 0.5, 0.5],
            phase: vec![0.0, 1.0, 2.0],
            blend_in: None,
        }]);
        let ds = generate(&model, &spec).unwrap();
        let peak = ds.samples.iter().map(|s| s.qd[0].abs()).fold(0.0, f64::max);
        let expected = 2.0 * std::f64::consts::PI * f * a;
        assert!((peak - expected).abs() / expected < 0.01);
    }

    #[test]
    fn blends_keep_acceleration_continuous() {
        let spec = spec_with(vec![
            PhaseSpec::Sine {
                duration: 1.3,
                amplitude: vec![0.2; 3],
                frequency: vec![0.4; 3],
                phase: vec![0.3, 1.2, 2.5],
                blend_in: None,
            },
            PhaseSpec::Ramp {
                duration: 1.0,
                rates: vec![0.1, 0.2, -0.1],
                blend_in: None,
            },
            PhaseSpec::Hold {
                duration: 0.5,
                angles: Some(vec![0.5, 0.5, 0.0]),
                blend_in: Some(1.0),
            },
        ]);
        let plan = spec.plan().unwrap();
        let eps = 1e-9;
        for seg in &plan.segments[1..] {
            let (before, _) = plan.eval(seg.start - eps);
            let (after, _) = plan.eval(seg.start);
            for i in 0..3 {
                assert!((before.q[i] - after.q[i]).abs() < 1e-7);
                assert!((before.qd[i] - after.qd[i]).abs() < 1e-7);
                assert!((before.qdd[i] - after.qdd[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn joint_limit_violation_is_an_error() {
        let model = ManipulatorModel::default_arm();
        let spec = spec_with(vec![PhaseSpec::Ramp {
            duration: 5.0,
            rates: vec![1.0, 0.0, 0.0],
            blend_in: None,
        }]);
        assert!(matches!(generate(&model, &spec), Err(Error::Invalid(_))));
    }

    #[test]
    fn disabled_noise_is_identity_and_db_scaling_holds() {
        let model = ManipulatorModel::default_arm();
        let ds = generate(&model, &SuiteConfig::default_test().build().unwrap()).unwrap();
        assert_eq!(add_noise(&ds, &NoiseSpec::default()).unwrap(), ds);
        let at = |db: f64| {
            add_noise(
                &ds,
                &NoiseSpec {
                    velocity: Some(db),
                    seed: 3,
                    ..Default::default()
                },
            )
            .unwrap()
        };
        let (n30, n50) = (at(30.0), at(50.0));
        for ((a, b), c) in n30.samples.iter().zip(&n50.samples).zip(&ds.samples) {
            let e30 = a.qd[1] - c.qd[1];
            let e50 = b.qd[1] - c.qd[1];
            assert!((e30 - 10.0 * e50).abs() <= 1e-9 * e30.abs().max(1e-12));
            assert_eq!(a.t, c.t);
            assert_eq!(a.phase, c.phase);
        }
    }

    #[test]
    fn zero_power_channel_is_rejected() {
        let model = ManipulatorModel::default_arm();
        let spec = spec_with(vec![PhaseSpec::Hold {
            duration: 0.2,
            angles: None,
            blend_in: None,
        }]);
        let ds = generate(&model, &spec).unwrap();
        let noise = NoiseSpec {
            velocity: Some(40.0),
            ..Default::default()
        };
        assert!(add_noise(&ds, &noise).is_err());
    }

    #[test]
    fn direction_split() {
        let model = ManipulatorModel::default_arm();
        let ramp = spec_with(vec![PhaseSpec::Ramp {
            duration: 1.0,
            rates: vec![0.3, 0.1, 0.1],
            blend_in: None,
        }]);
        let ds = generate(&model, &ramp).unwrap();
        let (fwd, bwd) = split_by_direction(&ds, 0, 1e-3).unwrap();
        assert_eq!(fwd.len(), ds.len());
        assert!(bwd.is_empty());
        assert!(split_by_direction(&ds, 3, 1e-3).is_err());

        let sine = spec_with(vec![PhaseSpec::Sine {
            duration: 2.0,
            amplitude: vec![0.2; 3],
            frequency: vec![1.0; 3],
            phase: vec![0.0; 3],
            blend_in: None,
        }]);
        let ds = generate(&model, &sine).unwrap();
        let (fwd, bwd) = split_by_direction(&ds, 0, 1e-3).unwrap();
        assert!((fwd.len() as i64 - bwd.len() as i64).abs() <= 1);
    }

    #[test]
    fn deadband_excludes_hold_samples() {
        let model = ManipulatorModel::default_arm();
        let ds = generate(&model, &SuiteConfig::default_test().build().unwrap()).unwrap();
        let holds = ds.indices_with_phase(Phase::Static).len();
        let (fwd, bwd) = split_by_direction(&ds, 1, 1e-3).unwrap();
        assert!(fwd
            .samples
            .iter()
            .chain(&bwd.samples)
            .all(|s| s.phase != Phase::Static));
        let slow = ds
            .samples
            .iter()
            .filter(|s| s.phase != Phase::Static && s.qd[1].abs() < 1e-3)
            .count();
        assert_eq!(fwd.len() + bwd.len() + holds + slow, ds.len());
    }

    #[test]
    fn suite_is_reproducible() {
        let model = ManipulatorModel::default_arm();
        let a = generate(&model, &SuiteConfig::default_training().build().unwrap()).unwrap();
        let b = generate(&model, &SuiteConfig::default_training().build().unwrap()).unwrap();
        assert_eq!(a, b);
        for s in &a.samples {
            match s.phase {
                Phase::Static => assert!(s.qd.iter().chain(&s.qdd).all(|v| *v == 0.0)),
                Phase::Uniform => assert!(s.qdd.iter().all(|v| *v == 0.0)),
                Phase::Variable => {}
            }
        }
    }
}
