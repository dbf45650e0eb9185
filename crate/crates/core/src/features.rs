//! Symbolic candidate functions: canonical products of trigonometric,
//! velocity, acceleration and Stribeck-shape factors, the stepwise libraries
//! built from them, and their evaluation into design matrices.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Dataset;
use crate::dynamics::JointState;
use crate::error::{Error, Result};

/// Elementary function of one joint (0-based index).
#[derive(Debug, Clone, Copy)]
pub enum Factor {
    Sin(usize),
    Cos(usize),
    Vel(usize),
    Acc(usize),
    /// `exp(-(dq/scale)^2)`
    Stribeck {
        joint: usize,
        scale: f64,
    },
}

impl Factor {
    fn key(&self) -> (u8, usize, u64) {
        match *self {
            Factor::Sin(j) => (0, j, 0),
            Factor::Cos(j) => (1, j, 0),
            Factor::Vel(j) => (2, j, 0),
            Factor::Acc(j) => (3, j, 0),
            // Scales are positive, so the bit pattern orders like the value.
            Factor::Stribeck { joint, scale } => (4, joint, scale.to_bits()),
        }
    }

    pub fn joint(&self) -> usize {
        self.key().1
    }

    pub fn eval(&self, q: &[f64], qd: &[f64], qdd: &[f64]) -> f64 {
        match *self {
            Factor::Sin(j) => q[j].sin(),
            Factor::Cos(j) => q[j].cos(),
            Factor::Vel(j) => qd[j],
            Factor::Acc(j) => qdd[j],
            Factor::Stribeck { joint, scale } => (-(qd[joint] / scale).powi(2)).exp(),
        }
    }
}

impl PartialEq for Factor {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}
impl Eq for Factor {}
impl Hash for Factor {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.key().hash(state)
    }
}
impl PartialOrd for Factor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Factor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key().cmp(&other.key())
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Factor::Sin(j) => write!(f, "sin(q{})", j + 1),
            Factor::Cos(j) => write!(f, "cos(q{})", j + 1),
            Factor::Vel(j) => write!(f, "dq{}", j + 1),
            Factor::Acc(j) => write!(f, "ddq{}", j + 1),
            Factor::Stribeck { joint, scale } => write!(f, "exp(-(dq{}/{})^2)", joint + 1, scale),
        }
    }
}

fn parse_joint(s: &str) -> Option<usize> {
    let j: usize = s.parse().ok()?;
    (j >= 1 && s == j.to_string()).then(|| j - 1)
}

impl FromStr for Factor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("unknown factor `{s}`"));
        let inner = |prefix: &str, suffix: &str| {
            s.strip_prefix(prefix).and_then(|r| r.strip_suffix(suffix))
        };
        if let Some(j) = inner("sin(q", ")") {
            return parse_joint(j).map(Factor::Sin).ok_or_else(bad);
        }
        if let Some(j) = inner("cos(q", ")") {
            return parse_joint(j).map(Factor::Cos).ok_or_else(bad);
        }
        if let Some(body) = inner("exp(-(dq", ")^2)") {
            let (j, scale) = body.split_once('/').ok_or_else(bad)?;
            let scale: f64 = scale.parse().map_err(|_| bad())?;
            if !(scale > 0.0 && scale.is_finite()) {
                return Err(bad());
            }
            let joint = parse_joint(j).ok_or_else(bad)?;
            return Ok(Factor::Stribeck { joint, scale });
        }
        if let Some(j) = s.strip_prefix("ddq") {
            return parse_joint(j).map(Factor::Acc).ok_or_else(bad);
        }
        if let Some(j) = s.strip_prefix("dq") {
            return parse_joint(j).map(Factor::Vel).ok_or_else(bad);
        }
        Err(bad())
    }
}

/// Product of factors with multiplicities, kept sorted and merged so equal
/// products compare equal. The empty product is the constant feature `1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Feature {
    factors: Vec<(Factor, u32)>,
}

impl Feature {
    pub fn constant() -> Self {
        Self::default()
    }

    pub fn from_factors<I: IntoIterator<Item = Factor>>(factors: I) -> Self {
        let mut all: Vec<Factor> = factors.into_iter().collect();
        all.sort();
        let mut merged: Vec<(Factor, u32)> = Vec::with_capacity(all.len());
        for f in all {
            match merged.last_mut() {
                Some((g, m)) if *g == f => *m += 1,
                _ => merged.push((f, 1)),
            }
        }
        Self { factors: merged }
    }

    pub fn factors(&self) -> &[(Factor, u32)] {
        &self.factors
    }

    pub fn is_constant(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn mul(&self, other: &Feature) -> Feature {
        let expanded = self
            .factors
            .iter()
            .chain(&other.factors)
            .flat_map(|(f, m)| std::iter::repeat_n(*f, *m as usize));
        Feature::from_factors(expanded)
    }

    /// Highest joint index referenced, if any.
    pub fn max_joint(&self) -> Option<usize> {
        self.factors.iter().map(|(f, _)| f.joint()).max()
    }

    pub fn eval(&self, q: &[f64], qd: &[f64], qdd: &[f64]) -> f64 {
        self.factors
            .iter()
            .map(|(f, m)| f.eval(q, qd, qdd).powi(*m as i32))
            .product()
    }

    pub fn eval_state(&self, s: &JointState) -> f64 {
        self.eval(&s.q, &s.qd, &s.qdd)
    }

    /// True if the feature contains a velocity or acceleration factor.
    pub fn depends_on_motion(&self) -> bool {
        self.factors
            .iter()
            .any(|(f, _)| !matches!(f, Factor::Sin(_) | Factor::Cos(_)))
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.factors.is_empty() {
            return f.write_str("1");
        }
        for (k, (factor, m)) in self.factors.iter().enumerate() {
            if k > 0 {
                f.write_str("*")?;
            }
            if *m == 1 {
                write!(f, "{factor}")?;
            } else {
                write!(f, "{factor}^{m}")?;
            }
        }
        Ok(())
    }
}

impl FromStr for Feature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "1" {
            return Ok(Feature::constant());
        }
        let mut factors = Vec::new();
        for token in s.split('*') {
            let (base, mult) = match token.rsplit_once('^') {
                Some((b, m)) if !m.is_empty() && m.bytes().all(|c| c.is_ascii_digit()) => {
                    let m: u32 = m
                        .parse()
                        .map_err(|_| Error::Parse(format!("bad exponent in `{token}`")))?;
                    if m < 2 {
                        return Err(Error::Parse(format!("non-canonical exponent in `{token}`")));
                    }
                    (b, m)
                }
                _ => (token, 1),
            };
            let factor: Factor = base.parse()?;
            factors.extend(std::iter::repeat_n(factor, mult as usize));
        }
        let feature = Feature::from_factors(factors);
        if feature.to_string() != s {
            return Err(Error::Parse(format!(
                "feature `{s}` is not in canonical form ({feature})"
            )));
        }
        Ok(feature)
    }
}

/// Which variables the second feature set may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Step {
    /// Gravity: F2 = {1}.
    S1,
    /// Coriolis/centrifugal: velocity monomials.
    S2,
    /// Inertia: velocity and acceleration monomials.
    S3,
    /// Single-shot library: the constant plus velocity and acceleration
    /// monomials.
    Full,
}

impl Step {
    pub fn as_str(self) -> &'static str {
        match self {
            Step::S1 => "S1",
            Step::S2 => "S2",
            Step::S3 => "S3",
            Step::Full => "full",
        }
    }
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Step {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "S1" => Ok(Step::S1),
            "S2" => Ok(Step::S2),
            "S3" => Ok(Step::S3),
            "full" => Ok(Step::Full),
            _ => Err(Error::Parse(format!("unknown step `{s}`"))),
        }
    }
}

/// Multisets of size `k` over `0..m`, in lexicographic order.
fn multisets(m: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(m: usize, k: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..m {
            cur.push(i);
            rec(m, k, i, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(m, k, 0, &mut Vec::with_capacity(k), &mut out);
    out
}

fn dedup_in_order(features: impl IntoIterator<Item = Feature>) -> Vec<Feature> {
    let mut seen = HashSet::new();
    features
        .into_iter()
        .filter(|f| seen.insert(f.clone()))
        .collect()
}

/// All products of exactly `n1` factors drawn with repetition from
/// {1, sin q1, cos q1, …, sin qn, cos qn}.
pub fn build_f1(n: usize, n1: usize) -> Vec<Feature> {
    let mut items: Vec<Option<Factor>> = vec![None];
    for j in 0..n {
        items.push(Some(Factor::Sin(j)));
        items.push(Some(Factor::Cos(j)));
    }
    dedup_in_order(
        multisets(items.len(), n1)
            .into_iter()
            .map(|idx| Feature::from_factors(idx.into_iter().filter_map(|i| items[i]))),
    )
}

/// Monomials of degree 1..=`n2` in the variables the step allows
/// (the constant alone for S1; the constant is prepended for Full).
pub fn build_f2(n: usize, n2: usize, step: Step) -> Vec<Feature> {
    let vars: Vec<Factor> = match step {
        Step::S1 => return vec![Feature::constant()],
        Step::S2 => (0..n).map(Factor::Vel).collect(),
        Step::S3 | Step::Full => (0..n)
            .map(Factor::Vel)
            .chain((0..n).map(Factor::Acc))
            .collect(),
    };
    let mut out = Vec::new();
    if step == Step::Full {
        out.push(Feature::constant());
    }
    for d in 1..=n2 {
        out.extend(
            multisets(vars.len(), d)
                .into_iter()
                .map(|idx| Feature::from_factors(idx.into_iter().map(|i| vars[i]))),
        );
    }
    dedup_in_order(out)
}

/// Default Stribeck-shape scales [rad/s].
pub const DEFAULT_FRICTION_SCALES: [f64; 4] = [0.01, 0.05, 0.1, 0.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LibrarySpec {
    pub n: usize,
    pub n1: usize,
    pub n2: usize,
    pub step: Step,
    /// Stribeck-shape scales of the appended friction features; `None`
    /// disables them.
    #[serde(default)]
    pub friction: Option<Vec<f64>>,
}

/// Ordered, duplicate-free set of features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLibrary {
    pub spec: LibrarySpec,
    features: Vec<Feature>,
}

impl FeatureLibrary {
    pub fn build(spec: LibrarySpec) -> Result<Self> {
        if spec.n == 0 {
            return Err(Error::Invalid("library for zero joints".into()));
        }
        if spec.step != Step::S1 && spec.n2 == 0 {
            return Err(Error::Invalid(format!("step {} needs N2 >= 1", spec.step)));
        }
        if let Some(scales) = &spec.friction {
            if scales.is_empty() || scales.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::Invalid(
                    "friction feature scales must be positive".into(),
                ));
            }
        }
        let f1 = build_f1(spec.n, spec.n1);
        let f2 = build_f2(spec.n, spec.n2, spec.step);
        let mut all: Vec<Feature> = f2
            .iter()
            .flat_map(|b| f1.iter().map(move |a| a.mul(b)))
            .collect();
        if let Some(scales) = &spec.friction {
            // The level of the dry-friction part needs an offset.
            all.push(Feature::constant());
            for j in 0..spec.n {
                all.push(Feature::from_factors([Factor::Vel(j)]));
                for &scale in scales {
                    all.push(Feature::from_factors([Factor::Stribeck {
                        joint: j,
                        scale,
                    }]));
                }
            }
        }
        Ok(Self {
            features: dedup_in_order(all),
            spec,
        })
    }

    /// Library from an explicit feature list (e.g. a re-loaded model).
    pub fn from_features(spec: LibrarySpec, features: Vec<Feature>) -> Result<Self> {
        let unique: HashSet<&Feature> = features.iter().collect();
        if unique.len() != features.len() {
            return Err(Error::Invalid("library contains duplicate features".into()));
        }
        if features
            .iter()
            .any(|f| f.max_joint().is_some_and(|j| j >= spec.n))
        {
            return Err(Error::Invalid(format!(
                "library feature references a joint beyond {}",
                spec.n
            )));
        }
        Ok(Self { spec, features })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    /// One canonical feature string per line.
    pub fn manifest(&self) -> String {
        let mut s = String::new();
        for f in &self.features {
            s.push_str(&f.to_string());
            s.push('\n');
        }
        s
    }

    /// Hex SHA-256 of the manifest.
    pub fn manifest_hash(&self) -> String {
        Sha256::digest(self.manifest().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Evaluate every feature at one state.
    pub fn eval_row(&self, state: &JointState) -> Vec<f64> {
        self.features.iter().map(|f| f.eval_state(state)).collect()
    }

    /// Raw design matrix (rows = samples) with column ℓ2 norms.
    pub fn evaluate(&self, dataset: &Dataset) -> Result<DesignMatrix> {
        if dataset.dof != self.spec.n {
            return Err(Error::dim(
                "dataset joint count for library",
                self.spec.n,
                dataset.dof,
            ));
        }
        dataset.check()?;
        let rows = dataset.len();
        let n = self.spec.n;
        // Per-factor columns, computed once.
        let mut cache: std::collections::HashMap<Factor, Vec<f64>> =
            std::collections::HashMap::new();
        for f in &self.features {
            for (factor, _) in f.factors() {
                cache.entry(*factor).or_insert_with(|| {
                    dataset
                        .samples
                        .iter()
                        .map(|s| factor.eval(&s.q, &s.qd, &s.qdd))
                        .collect()
                });
            }
        }
        debug_assert!(self
            .features
            .iter()
            .all(|f| f.max_joint().is_none_or(|j| j < n)));
        let mut x = DMatrix::<f64>::zeros(rows, self.features.len());
        for (c, f) in self.features.iter().enumerate() {
            let mut col = x.column_mut(c);
            col.fill(1.0);
            for (factor, m) in f.factors() {
                let base = &cache[factor];
                for (v, b) in col.iter_mut().zip(base) {
                    *v *= b.powi(*m as i32);
                }
            }
        }
        let norms = x.column_iter().map(|c| c.norm()).collect();
        Ok(DesignMatrix { x, norms })
    }
}

/// Columns whose norm is below this fraction of the largest one carry no
/// usable signal and are treated as zero.
pub const NEGLIGIBLE_COLUMN: f64 = 1e-8;

/// Raw feature values and their column norms; regression works on the
/// unit-norm columns `x[:, j] / norms[j]` (zero and negligible columns stay
/// zero).
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub x: DMatrix<f64>,
    pub norms: Vec<f64>,
}

impl DesignMatrix {
    pub fn rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn cols(&self) -> usize {
        self.x.ncols()
    }

    /// Multiplicative factors turning raw columns into their unit-norm form.
    pub fn inv_scales(&self) -> Vec<f64> {
        let largest = self.norms.iter().fold(0.0f64, |m, v| m.max(*v));
        self.norms
            .iter()
            .map(|&v| {
                if v > NEGLIGIBLE_COLUMN * largest {
                    1.0 / v
                } else {
                    0.0
                }
            })
            .collect()
    }

    pub fn standardized(&self) -> DMatrix<f64> {
        let mut s = self.x.clone();
        for (mut col, inv) in s.column_iter_mut().zip(self.inv_scales()) {
            col *= inv;
        }
        s
    }
}

/// Binomial coefficient for library-size bookkeeping.
pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

/// Closed-form library size (without friction features).
pub fn library_size(n: usize, n1: usize, n2: usize, step: Step) -> usize {
    let f1 = binomial(2 * n + n1, n1);
    let monomials = |m: usize| (1..=n2).map(|d| binomial(m + d - 1, d)).sum::<usize>();
    let f2 = match step {
        Step::S1 => 1,
        Step::S2 => monomials(n),
        Step::S3 => monomials(2 * n),
        Step::Full => 1 + monomials(2 * n),
    };
    f1 * f2
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lib(n: usize, n1: usize, n2: usize, step: Step) -> FeatureLibrary {
        FeatureLibrary::build(LibrarySpec {
            n,
            n1,
            n2,
            step,
            friction: None,
        })
        .unwrap()
    }

    #[test]
    fn f1_sizes() {
        let one = build_f1(1, 1);
        let names: Vec<String> = one.iter().map(|f| f.to_string()).collect();
        assert_eq!(names, ["1", "sin(q1)", "cos(q1)"]);
        assert_eq!(build_f1(3, 2).len(), 28);
        let small: HashSet<_> = build_f1(3, 1).into_iter().collect();
        let big: HashSet<_> = build_f1(3, 2).into_iter().collect();
        assert_eq!(small.len(), 7);
        assert!(small.is_subset(&big) && small != big);
        assert_eq!(build_f1(2, 0), vec![Feature::constant()]);
    }

    #[test]
    fn f2_sizes() {
        assert_eq!(build_f2(3, 2, Step::S1), vec![Feature::constant()]);
        assert_eq!(build_f2(3, 2, Step::S2).len(), 9);
        assert_eq!(build_f2(3, 1, Step::S3).len(), 6);
        assert_eq!(build_f2(3, 1, Step::Full).len(), 7);
    }

    #[test]
    fn library_sizes_match_closed_form() {
        for n in 1..=3 {
            for n1 in 0..=4 {
                for n2 in 1..=2 {
                    for step in [Step::S1, Step::S2, Step::S3, Step::Full] {
                        assert_eq!(lib(n, n1, n2, step).len(), library_size(n, n1, n2, step));
                    }
                }
            }
        }
        assert_eq!(lib(3, 2, 1, Step::S1).len(), 28);
        let stepwise = lib(3, 4, 2, Step::S1).len()
            + lib(3, 4, 2, Step::S2).len()
            + lib(3, 4, 1, Step::S3).len();
        assert!(stepwise < lib(3, 4, 2, Step::Full).len());
    }

    #[test]
    fn canonical_strings_round_trip() {
        let f = Feature::from_factors([
            Factor::Acc(1),
            Factor::Cos(2),
            Factor::Sin(0),
            Factor::Sin(0),
        ]);
        assert_eq!(f.to_string(), "sin(q1)^2*cos(q3)*ddq2");
        assert_eq!("sin(q1)^2*cos(q3)*ddq2".parse::<Feature>().unwrap(), f);
        let g = Feature::from_factors([
            Factor::Stribeck {
                joint: 0,
                scale: 0.1,
            },
            Factor::Vel(0),
        ]);
        assert_eq!(g.to_string(), "dq1*exp(-(dq1/0.1)^2)");
        assert_eq!(g.to_string().parse::<Feature>().unwrap(), g);
        assert_eq!("1".parse::<Feature>().unwrap(), Feature::constant());
        for bad in ["", "sin(q0)", "cos(q1)*sin(q1)", "dq1^1", "tan(q1)", "dq01"] {
            assert!(bad.parse::<Feature>().is_err(), "{bad}");
        }
    }

    #[test]
    fn permutations_share_a_key() {
        let a = Feature::from_factors([Factor::Sin(1), Factor::Vel(0), Factor::Sin(1)]);
        let b = Feature::from_factors([Factor::Vel(0), Factor::Sin(1), Factor::Sin(1)]);
        assert_eq!(a, b);
        assert_eq!(a.to_string(), b.to_string());
    }

    #[test]
    fn friction_features_are_appended_once() {
        let spec = LibrarySpec {
            n: 2,
            n1: 1,
            n2: 1,
            step: Step::S2,
            friction: Some(DEFAULT_FRICTION_SCALES.to_vec()),
        };
        let l = FeatureLibrary::build(spec).unwrap();
        // dq_i is already in S2; the constant and the exponentials are new.
        assert_eq!(
            l.len(),
            library_size(2, 1, 1, Step::S2) + 1 + 2 * DEFAULT_FRICTION_SCALES.len()
        );
    }

    #[test]
    fn evaluation_matches_direct_arithmetic() {
        use crate::dataset::{Phase, Sample};
        let s = Sample {
            t: 0.0,
            q: vec![0.3, -1.1, 2.0],
            qd: vec![0.2, 0.1, -0.4],
            qdd: vec![1.5, -0.7, 0.9],
            tau: vec![0.0; 3],
            phase: Phase::Variable,
            dir: vec![1, 1, -1],
        };
        let ds = Dataset::new(3, vec![s.clone(), s]);
        let library = lib(3, 2, 1, Step::S3);
        let dm = library.evaluate(&ds).unwrap();
        let target: Feature = "sin(q1)*cos(q2)*ddq3".parse().unwrap();
        let j = library
            .features()
            .iter()
            .position(|f| *f == target)
            .unwrap();
        let direct = 0.3f64.sin() * (-1.1f64).cos() * 0.9;
        assert!((dm.x[(0, j)] - direct).abs() < 1e-15);
        let k = library.features().iter().position(Feature::is_constant);
        assert!(k.is_none(), "S3 library has no constant");
        let full = lib(3, 2, 1, Step::Full);
        let dm = full.evaluate(&ds).unwrap();
        let k = full
            .features()
            .iter()
            .position(Feature::is_constant)
            .unwrap();
        assert!(dm.x.column(k).iter().all(|v| *v == 1.0));
        let st = dm.standardized();
        for (j, col) in st.column_iter().enumerate() {
            if dm.norms[j] > 0.0 {
                assert!((col.norm() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn manifest_hash_is_stable() {
        let a = lib(3, 2, 1, Step::S1);
        assert_eq!(a.manifest_hash(), lib(3, 2, 1, Step::S1).manifest_hash());
        assert_ne!(a.manifest_hash(), lib(3, 1, 1, Step::S1).manifest_hash());
        assert_eq!(a.manifest().lines().count(), 28);
    }
}
