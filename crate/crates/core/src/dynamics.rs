//! Ground-truth rigid-body dynamics of all-revolute serial chains.
//!
//! Links follow the standard Denavit–Hartenberg convention: frame `i` sits at
//! the distal end of link `i`, and joint `i` rotates about the `z` axis of
//! frame `i - 1`. Centers of mass and inertia tensors are expressed in the
//! link's own frame. Torques are computed with the recursive Newton–Euler
//! algorithm; everything else (mass matrix, bias terms, forward dynamics) is
//! derived from it by probing.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// Joint friction following the Stribeck curve with viscous damping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrictionParams {
    /// Coulomb level [N·m].
    pub coulomb: f64,
    /// Static (breakaway) level [N·m].
    pub stiction: f64,
    /// Viscous coefficient [N·m·s/rad].
    pub viscous: f64,
    /// Stribeck velocity [rad/s].
    pub stribeck_velocity: f64,
}

impl FrictionParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.coulomb >= 0.0
            && self.stiction >= self.coulomb
            && self.viscous >= 0.0
            && self.stribeck_velocity > 0.0
            && [
                self.coulomb,
                self.stiction,
                self.viscous,
                self.stribeck_velocity,
            ]
            .iter()
            .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!(
                "friction parameters {self:?}: need stiction >= coulomb >= 0, viscous >= 0, stribeck_velocity > 0"
            )))
        }
    }
}

/// Stribeck friction torque at joint velocity `v`, with `sign(0) = 0`.
pub fn friction_torque(params: &FrictionParams, v: f64) -> f64 {
    let ratio = v / params.stribeck_velocity;
    let level = params.coulomb + (params.stiction - params.coulomb) * (-(ratio * ratio)).exp();
    level * sign(v) + params.viscous * v
}

/// Sign with `sign(0) = 0`.
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One revolute link in standard DH form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Link {
    /// Link length `a` [m].
    pub length: f64,
    /// Link twist `alpha` [rad].
    pub twist: f64,
    /// Link offset `d` [m].
    pub offset: f64,
    pub mass: f64,
    /// Center of mass in the link frame [m].
    pub com: [f64; 3],
    /// Inertia tensor about the center of mass, link-frame axes [kg·m²].
    pub inertia: [[f64; 3]; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub friction: Option<FrictionParams>,
}

/// Kinematic, inertial and friction parameters of an n-DoF serial arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManipulatorModel {
    pub gravity: [f64; 3],
    pub links: Vec<Link>,
}

/// Joint positions, velocities and accelerations.
#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
    pub qdd: Vec<f64>,
}

impl JointState {
    pub fn new(q: Vec<f64>, qd: Vec<f64>, qdd: Vec<f64>) -> Self {
        Self { q, qd, qdd }
    }

    pub fn at_rest(q: Vec<f64>) -> Self {
        let n = q.len();
        Self {
            q,
            qd: vec![0.0; n],
            qdd: vec![0.0; n],
        }
    }

    pub fn dof(&self) -> usize {
        self.q.len()
    }

    pub(crate) fn check(&self, n: usize) -> Result<()> {
        for (name, v) in [("q", &self.q), ("qd", &self.qd), ("qdd", &self.qdd)] {
            if v.len() != n {
                return Err(Error::dim(format!("joint state {name}"), n, v.len()));
            }
            ensure_finite(v, &format!("joint state {name}"))?;
        }
        Ok(())
    }
}

/// Mass matrix, velocity-product term and gravity term at one state.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub mass: DMatrix<f64>,
    pub coriolis: Vec<f64>,
    pub gravity: Vec<f64>,
}

fn uniform_rod(mass: f64, length: f64, radius: f64, axis: usize) -> [[f64; 3]; 3] {
    let axial = 0.5 * mass * radius * radius;
    let transverse = mass * (3.0 * radius * radius + length * length) / 12.0;
    let mut inertia = [[0.0; 3]; 3];
    for (k, row) in inertia.iter_mut().enumerate() {
        row[k] = if k == axis { axial } else { transverse };
    }
    inertia
}

impl ManipulatorModel {
    /// Default 3-DoF anthropomorphic arm.
    ///
    /// A vertical base column of 0.4 m followed by two horizontal-axis links of
    /// 0.4 m and 0.3 m; masses 5, 3 and 1 kg. Each link is a uniform solid
    /// cylinder of radius 5 cm with its center of mass at mid-length.
    pub fn default_arm() -> Self {
        let radius = 0.05;
        Self {
            gravity: [0.0, 0.0, -9.81],
            links: vec![
                Link {
                    length: 0.0,
                    twist: std::f64::consts::FRAC_PI_2,
                    offset: 0.4,
                    mass: 5.0,
                    // The column runs along the frame-1 y axis.
                    com: [0.0, -0.2, 0.0],
                    inertia: uniform_rod(5.0, 0.4, radius, 1),
                    friction: None,
                },
                Link {
                    length: 0.4,
                    twist: 0.0,
                    offset: 0.0,
                    mass: 3.0,
                    com: [-0.2, 0.0, 0.0],
                    inertia: uniform_rod(3.0, 0.4, radius, 0),
                    friction: None,
                },
                Link {
                    length: 0.3,
                    twist: 0.0,
                    offset: 0.0,
                    mass: 1.0,
                    com: [-0.15, 0.0, 0.0],
                    inertia: uniform_rod(1.0, 0.3, radius, 0),
                    friction: None,
                },
            ],
        }
    }

    /// Friction parameters used for the friction-augmented default arm.
    pub fn default_friction() -> Vec<FrictionParams> {
        vec![
            FrictionParams {
                coulomb: 0.6,
                stiction: 0.9,
                viscous: 0.4,
                stribeck_velocity: 0.1,
            },
            FrictionParams {
                coulomb: 0.8,
                stiction: 1.2,
                viscous: 0.5,
                stribeck_velocity: 0.1,
            },
            FrictionParams {
                coulomb: 0.4,
                stiction: 0.6,
                viscous: 0.3,
                stribeck_velocity: 0.1,
            },
        ]
    }

    /// Default arm with [`Self::default_friction`] on every joint.
    pub fn default_arm_with_friction() -> Self {
        let mut model = Self::default_arm();
        for (link, f) in model.links.iter_mut().zip(Self::default_friction()) {
            link.friction = Some(f);
        }
        model
    }

    pub fn dof(&self) -> usize {
        self.links.len()
    }

    pub fn has_friction(&self) -> bool {
        self.links.iter().any(|l| l.friction.is_some())
    }

    pub fn without_friction(&self) -> Self {
        let mut m = self.clone();
        for l in &mut m.links {
            l.friction = None;
        }
        m
    }

    pub fn validate(&self) -> Result<()> {
        if self.links.is_empty() {
            return Err(Error::Invalid(
                "manipulator: at least one link required".into(),
            ));
        }
        ensure_finite(&self.gravity, "gravity vector")?;
        for (i, link) in self.links.iter().enumerate() {
            let scalars = [link.length, link.twist, link.offset, link.mass];
            ensure_finite(&scalars, &format!("link {} parameters", i + 1))?;
            ensure_finite(&link.com, &format!("link {} center of mass", i + 1))?;
            if link.mass < 0.0 {
                return Err(Error::Invalid(format!("link {}: negative mass", i + 1)));
            }
            let inertia = Matrix3::from_fn(|r, c| link.inertia[r][c]);
            if inertia.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("link {} inertia", i + 1)));
            }
            let scale = inertia.abs().max().max(1.0);
            if (inertia - inertia.transpose()).abs().max() > 1e-12 * scale {
                return Err(Error::Invalid(format!(
                    "link {}: inertia not symmetric",
                    i + 1
                )));
            }
            let eig = SymmetricEigen::new(inertia).eigenvalues;
            if eig.min() < -1e-12 * scale {
                return Err(Error::Invalid(format!(
                    "link {}: inertia not positive semi-definite",
                    i + 1
                )));
            }
            if let Some(f) = &link.friction {
                f.validate()?;
            }
        }
        Ok(())
    }

    /// Joint torques for the given state; friction is added when requested and
    /// configured on a joint.
    pub fn inverse_dynamics(&self, state: &JointState, include_friction: bool) -> Result<Vec<f64>> {
        state.check(self.dof())?;
        let mut tau = self.rne(&state.q, &state.qd, &state.qdd, true);
        if include_friction {
            self.add_friction(&state.qd, &mut tau);
        }
        Ok(tau)
    }

    /// Sum of per-joint friction torques at velocity `qd` (zero where unset).
    pub fn friction(&self, qd: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dof()];
        self.add_friction(qd, &mut out);
        out
    }

    fn add_friction(&self, qd: &[f64], tau: &mut [f64]) {
        for ((t, link), v) in tau.iter_mut().zip(&self.links).zip(qd) {
            if let Some(f) = &link.friction {
                *t += friction_torque(f, *v);
            }
        }
    }

    /// Gravity, velocity-product and mass-matrix terms by unit-acceleration
    /// probing of the recursion.
    pub fn decompose(&self, state: &JointState) -> Result<Decomposition> {
        state.check(self.dof())?;
        let n = self.dof();
        let zeros = vec![0.0; n];
        let gravity = self.rne(&state.q, &zeros, &zeros, true);
        let with_velocity = self.rne(&state.q, &state.qd, &zeros, true);
        let coriolis = with_velocity
            .iter()
            .zip(&gravity)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Decomposition {
            mass: self.mass_matrix_unchecked(&state.q),
            coriolis,
            gravity,
        })
    }

    /// Joint-space mass matrix at configuration `q`.
    pub fn mass_matrix(&self, q: &[f64]) -> Result<DMatrix<f64>> {
        if q.len() != self.dof() {
            return Err(Error::dim("joint positions", self.dof(), q.len()));
        }
        ensure_finite(q, "joint positions")?;
        Ok(self.mass_matrix_unchecked(q))
    }

    fn mass_matrix_unchecked(&self, q: &[f64]) -> DMatrix<f64> {
        let n = self.dof();
        let zeros = vec![0.0; n];
        let mut unit = vec![0.0; n];
        let mut mass = DMatrix::zeros(n, n);
        for i in 0..n {
            unit[i] = 1.0;
            let col = self.rne(q, &zeros, &unit, false);
            mass.set_column(i, &DVector::from_vec(col));
            unit[i] = 0.0;
        }
        mass
    }

    /// Joint accelerations produced by torque `tau` at state `(q, qd)`.
    pub fn forward_dynamics(&self, q: &[f64], qd: &[f64], tau: &[f64]) -> Result<Vec<f64>> {
        let n = self.dof();
        for (name, v) in [("q", q), ("qd", qd), ("tau", tau)] {
            if v.len() != n {
                return Err(Error::dim(name, n, v.len()));
            }
            ensure_finite(v, name)?;
        }
        let zeros = vec![0.0; n];
        let bias = self.rne(q, qd, &zeros, true);
        let friction = self.friction(qd);
        let rhs = DVector::from_iterator(
            n,
            tau.iter()
                .zip(&bias)
                .zip(&friction)
                .map(|((t, b), f)| t - b - f),
        );
        let mass = self.mass_matrix_unchecked(q);
        let chol = mass
            .cholesky()
            .ok_or_else(|| Error::Numerical("mass matrix is not positive definite".into()))?;
        let qdd = chol.solve(&rhs);
        ensure_finite(qdd.as_slice(), "forward-dynamics accelerations")?;
        Ok(qdd.iter().copied().collect())
    }

    /// One fixed step of classical fourth-order Runge–Kutta with the torque held
    /// constant over the step.
    pub fn forward_dynamics_step(
        &self,
        q: &[f64],
        qd: &[f64],
        tau: &[f64],
        dt: f64,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Invalid(format!("integration step {dt}")));
        }
        let axpy = |x: &[f64], a: f64, y: &[f64]| -> Vec<f64> {
            x.iter().zip(y).map(|(xi, yi)| xi + a * yi).collect()
        };
        let k1v = self.forward_dynamics(q, qd, tau)?;
        let k1q = qd.to_vec();

        let q2 = axpy(q, 0.5 * dt, &k1q);
        let v2 = axpy(qd, 0.5 * dt, &k1v);
        let k2v = self.forward_dynamics(&q2, &v2, tau)?;
        let k2q = v2;

        let q3 = axpy(q, 0.5 * dt, &k2q);
        let v3 = axpy(qd, 0.5 * dt, &k2v);
        let k3v = self.forward_dynamics(&q3, &v3, tau)?;
        let k3q = v3;

        let q4 = axpy(q, dt, &k3q);
        let v4 = axpy(qd, dt, &k3v);
        let k4v = self.forward_dynamics(&q4, &v4, tau)?;
        let k4q = v4;

        let combine = |x: &[f64], k1: &[f64], k2: &[f64], k3: &[f64], k4: &[f64]| -> Vec<f64> {
            (0..x.len())
                .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
                .collect()
        };
        let q_next = combine(q, &k1q, &k2q, &k3q, &k4q);
        let qd_next = combine(qd, &k1v, &k2v, &k3v, &k4v);
        ensure_finite(&q_next, "integrated positions")?;
        ensure_finite(&qd_next, "integrated velocities")?;
        Ok((q_next, qd_next))
    }

    /// Total mechanical energy (kinetic plus gravitational potential).
    pub fn energy(&self, q: &[f64], qd: &[f64]) -> Result<f64> {
        let mass = self.mass_matrix(q)?;
        let v = DVector::from_column_slice(qd);
        let kinetic = 0.5 * v.dot(&(&mass * &v));
        Ok(kinetic + self.potential_energy(q))
    }

    /// Gravitational potential energy `-Σ m g·p_com` with the base at the origin.
    pub fn potential_energy(&self, q: &[f64]) -> f64 {
        let g = Vector3::from(self.gravity);
        let mut rot = Matrix3::identity();
        let mut pos = Vector3::zeros();
        let mut energy = 0.0;
        for (link, &qi) in self.links.iter().zip(q) {
            let r = link_rotation(qi, link.twist);
            let pstar = Vector3::new(
                link.length,
                link.offset * link.twist.sin(),
                link.offset * link.twist.cos(),
            );
            rot *= r;
            pos += rot * pstar;
            let com = pos + rot * Vector3::from(link.com);
            energy -= link.mass * g.dot(&com);
        }
        energy
    }

    /// Recursive Newton–Euler; `with_gravity = false` drops the base
    /// acceleration term. Inputs are assumed validated.
    fn rne(&self, q: &[f64], qd: &[f64], qdd: &[f64], with_gravity: bool) -> Vec<f64> {
        let n = self.dof();
        let z0 = Vector3::z();
        let mut rots = Vec::with_capacity(n);
        let mut pstars = Vec::with_capacity(n);
        let mut forces = Vec::with_capacity(n);
        let mut moments = Vec::with_capacity(n);

        let mut w = Vector3::zeros();
        let mut wd = Vector3::zeros();
        let mut vd = if with_gravity {
            -Vector3::from(self.gravity)
        } else {
            Vector3::zeros()
        };

        for (i, link) in self.links.iter().enumerate() {
            let r = link_rotation(q[i], link.twist);
            let rt = r.transpose();
            let pstar = Vector3::new(
                link.length,
                link.offset * link.twist.sin(),
                link.offset * link.twist.cos(),
            );
            let rc = Vector3::from(link.com);
            let inertia = Matrix3::from_fn(|a, b| link.inertia[a][b]);

            let w_next = rt * (w + z0 * qd[i]);
            let wd_next = rt * (wd + z0 * qdd[i] + w.cross(&(z0 * qd[i])));
            let vd_next = rt * vd + wd_next.cross(&pstar) + w_next.cross(&w_next.cross(&pstar));
            w = w_next;
            wd = wd_next;
            vd = vd_next;

            let vc = vd + wd.cross(&rc) + w.cross(&w.cross(&rc));
            forces.push(vc * link.mass);
            moments.push(inertia * wd + w.cross(&(inertia * w)));
            rots.push(r);
            pstars.push(pstar);
        }

        let mut tau = vec![0.0; n];
        let mut f = Vector3::zeros();
        let mut nm = Vector3::zeros();
        for i in (0..n).rev() {
            let rc = Vector3::from(self.links[i].com);
            let (f_child, n_child) = if i + 1 < n {
                (rots[i + 1] * f, rots[i + 1] * nm)
            } else {
                (Vector3::zeros(), Vector3::zeros())
            };
            nm = n_child
                + pstars[i].cross(&f_child)
                + (pstars[i] + rc).cross(&forces[i])
                + moments[i];
            f = f_child + forces[i];
            tau[i] = nm.dot(&(rots[i].transpose() * z0));
        }
        tau
    }
}

/// Rotation from frame `i-1` to frame `i`: `Rz(theta) * Rx(alpha)`.
fn link_rotation(theta: f64, alpha: f64) -> Matrix3<f64> {
    let (st, ct) = theta.sin_cos();
    let (sa, ca) = alpha.sin_cos();
    Matrix3::new(ct, -st * ca, st * sa, st, ct * ca, -ct * sa, 0.0, sa, ca)
}
