//! Time-stamped motion/torque records and their CSV form.
//!
//! Header: `t,q1..qn,dq1..dqn,ddq1..ddqn,tau1..taun,phase,dir1..dirn`, with
//! `cluster,pattern` appended once a dataset has been clustered. Floats are
//! written with 17 significant digits so a file parses back bit-exactly.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dynamics::JointState;
use crate::error::{Error, Result};

/// Motion pattern of a sample: ground-truth phase kind or cluster label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Static,
    Uniform,
    Variable,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Static, Phase::Uniform, Phase::Variable];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Static => "static",
            Phase::Uniform => "uniform",
            Phase::Variable => "variable",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(Phase::Static),
            "uniform" => Ok(Phase::Uniform),
            "variable" => Ok(Phase::Variable),
            other => Err(Error::Parse(format!("unknown phase `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
    pub qdd: Vec<f64>,
    pub tau: Vec<f64>,
    pub phase: Phase,
    /// Sign of each joint velocity on the noise-free trajectory.
    pub dir: Vec<i8>,
}

impl Sample {
    pub fn state(&self) -> JointState {
        JointState::new(self.q.clone(), self.qd.clone(), self.qdd.clone())
    }
}

/// Cluster id and motion pattern attached to a sample after clustering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Annotation {
    pub cluster: usize,
    pub pattern: Phase,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dof: usize,
    pub samples: Vec<Sample>,
    pub annotations: Option<Vec<Annotation>>,
}

impl Dataset {
    pub fn new(dof: usize, samples: Vec<Sample>) -> Self {
        Self {
            dof,
            samples,
            annotations: None,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sub-dataset with the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            dof: self.dof,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            annotations: self
                .annotations
                .as_ref()
                .map(|a| indices.iter().map(|&i| a[i]).collect()),
        }
    }

    /// Indices whose cluster pattern equals `pattern`.
    pub fn indices_with_pattern(&self, pattern: Phase) -> Option<Vec<usize>> {
        self.annotations.as_ref().map(|a| {
            a.iter()
                .enumerate()
                .filter(|(_, ann)| ann.pattern == pattern)
                .map(|(i, _)| i)
                .collect()
        })
    }

    pub fn indices_with_phase(&self, phase: Phase) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.phase == phase)
            .map(|(i, _)| i)
            .collect()
    }

    /// Concatenate datasets of equal dimension; annotations are kept only when
    /// every part carries them.
    pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
        let dof = parts.first().map(|d| d.dof).unwrap_or(0);
        let mut samples = Vec::new();
        let mut annotations = Some(Vec::new());
        for p in parts {
            if p.dof != dof {
                return Err(Error::dim("dataset joint count", dof, p.dof));
            }
            samples.extend(p.samples.iter().cloned());
            match (&mut annotations, &p.annotations) {
                (Some(acc), Some(a)) => acc.extend_from_slice(a),
                _ => annotations = None,
            }
        }
        Ok(Dataset {
            dof,
            samples,
            annotations,
        })
    }

    pub(crate) fn check(&self) -> Result<()> {
        for (k, s) in self.samples.iter().enumerate() {
            for (name, v) in [("q", &s.q), ("dq", &s.qd), ("ddq", &s.qdd), ("tau", &s.tau)] {
                if v.len() != self.dof {
                    return Err(Error::dim(format!("sample {k} {name}"), self.dof, v.len()));
                }
                if v.iter().any(|x| !x.is_finite()) || !s.t.is_finite() {
                    return Err(Error::NonFinite(format!("sample {k} {name}")));
                }
            }
            if s.dir.len() != self.dof {
                return Err(Error::dim(format!("sample {k} dir"), self.dof, s.dir.len()));
            }
        }
        if let Some(a) = &self.annotations {
            if a.len() != self.samples.len() {
                return Err(Error::dim("annotations", self.samples.len(), a.len()));
            }
        }
        Ok(())
    }

    pub fn header(&self) -> Vec<String> {
        let n = self.dof;
        let mut h = vec!["t".to_string()];
        for prefix in ["q", "dq", "ddq", "tau"] {
            h.extend((1..=n).map(|i| format!("{prefix}{i}")));
        }
        h.push("phase".into());
        h.extend((1..=n).map(|i| format!("dir{i}")));
        if self.annotations.is_some() {
            h.push("cluster".into());
            h.push("pattern".into());
        }
        h
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        self.check()?;
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(self.header())?;
        let mut row: Vec<String> = Vec::new();
        for (k, s) in self.samples.iter().enumerate() {
            row.clear();
            row.push(fmt_f64(s.t));
            for v in [&s.q, &s.qd, &s.qdd, &s.tau] {
                row.extend(v.iter().map(|x| fmt_f64(*x)));
            }
            row.push(s.phase.to_string());
            row.extend(s.dir.iter().map(|d| d.to_string()));
            if let Some(a) = &self.annotations {
                row.push(a[k].cluster.to_string());
                row.push(a[k].pattern.to_string());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Dataset> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(reader);
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let annotated = header.last().map(String::as_str) == Some("pattern");
        let base_cols = if annotated {
            header.len() - 2
        } else {
            header.len()
        };
        if base_cols < 2 || (base_cols - 2) % 5 != 0 {
            return Err(Error::Parse(format!(
                "unexpected dataset header {header:?}"
            )));
        }
        let n = (base_cols - 2) / 5;
        if n == 0 {
            return Err(Error::Parse("dataset header names no joints".into()));
        }
        let mut probe = Dataset::new(n, vec![]);
        if annotated {
            probe.annotations = Some(vec![]);
        }
        if probe.header() != header {
            return Err(Error::Parse(format!(
                "dataset header mismatch: expected {:?}, found {:?}",
                probe.header(),
                header
            )));
        }

        let mut samples = Vec::new();
        let mut annotations = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or("");
            let num = |i: usize| -> Result<f64> {
                field(i).parse::<f64>().map_err(|_| {
                    Error::Parse(format!("row {}: bad number `{}`", line + 2, field(i)))
                })
            };
            let block =
                |start: usize| -> Result<Vec<f64>> { (start..start + n).map(num).collect() };
            let t = num(0)?;
            let q = block(1)?;
            let qd = block(1 + n)?;
            let qdd = block(1 + 2 * n)?;
            let tau = block(1 + 3 * n)?;
            let phase: Phase = field(1 + 4 * n).parse()?;
            let dir = (2 + 4 * n..2 + 5 * n)
                .map(|i| {
                    field(i)
                        .parse::<i8>()
                        .ok()
                        .filter(|d| (-1..=1).contains(d))
                        .ok_or_else(|| {
                            Error::Parse(format!("row {}: bad direction `{}`", line + 2, field(i)))
                        })
                })
                .collect::<Result<Vec<i8>>>()?;
            if annotated {
                let cluster = field(base_cols)
                    .parse::<usize>()
                    .map_err(|_| Error::Parse(format!("row {}: bad cluster id", line + 2)))?;
                let pattern: Phase = field(base_cols + 1).parse()?;
                annotations.push(Annotation { cluster, pattern });
            }
            samples.push(Sample {
                t,
                q,
                qd,
                qdd,
                tau,
                phase,
                dir,
            });
        }
        let ds = Dataset {
            dof: n,
            samples,
            annotations: annotated.then_some(annotations),
        };
        ds.check()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let file = std::fs::File::open(path)?;
        Dataset::read_csv(std::io::BufReader::new(file))
    }
}

/// 17 significant digits, round-trip exact.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}
