//! Sparse regression: covariance-update coordinate-descent LASSO, least
//! squares, block cross-validated λ selection, library-order selection, and
//! the sparse-model text format.
//!
//! Convention: the LASSO objective is `½‖y − Xβ‖² + λ‖β‖₁` on unit-ℓ2-norm
//! columns of X, so a single column has the solution `soft(xᵀy, λ)` and the
//! smallest λ giving an all-zero solution is `max |Xᵀy|`.

use std::fmt::Write as _;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{fmt_f64, Dataset};
use crate::dynamics::JointState;
use crate::error::{ensure_finite, Error, Result, StepName};
use crate::features::{DesignMatrix, Feature, FeatureLibrary, LibrarySpec, Step};

/// Rows per block when accumulating Gram matrices.
const GRAM_CHUNK: usize = 1024;
/// Above this many columns least squares goes through the normal equations.
const SVD_MAX_COLS: usize = 400;
/// Ridge added to a unit-diagonal Gram matrix when Cholesky fails.
pub const RIDGE: f64 = 1e-8;
/// Validation errors below this relative mean square count as an exact fit.
const CV_FLOOR: f64 = 1e-20;
/// The λ path stops after this many consecutive grid points whose CV error
/// is outside the tie margin of the best so far.
const CV_PATIENCE: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LambdaSpec {
    Fixed {
        value: f64,
    },
    /// Log grid from `max |Xᵀy|` down to `min_ratio` of it, chosen by
    /// contiguous-block cross-validation.
    Grid {
        points: usize,
        min_ratio: f64,
        folds: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionConfig {
    pub lambda: LambdaSpec,
    /// Convergence tolerance on the largest coefficient change per sweep
    /// (unit-norm columns, unit-norm target).
    pub tolerance: f64,
    pub max_sweeps: usize,
    /// Sweep cap per point of the cross-validation path; the support refit
    /// makes full convergence there unnecessary.
    #[serde(default = "default_path_sweeps")]
    pub path_sweeps: usize,
    /// Active-term threshold on raw coefficients.
    pub threshold: f64,
    pub standardize: bool,
    /// Re-estimate the LASSO support by least squares.
    pub refit: bool,
    /// CV errors within this relative margin of the minimum count as ties
    /// (the larger λ wins).
    #[serde(default = "default_tie")]
    pub cv_tie: f64,
}

fn default_tie() -> f64 {
    1e-2
}

fn default_path_sweeps() -> usize {
    2000
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            lambda: LambdaSpec::Grid {
                points: 20,
                min_ratio: 1e-7,
                folds: 5,
            },
            tolerance: 1e-10,
            max_sweeps: 100_000,
            path_sweeps: default_path_sweeps(),
            threshold: 0.1,
            standardize: true,
            refit: true,
            cv_tie: default_tie(),
        }
    }
}

impl RegressionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0)
            || self.max_sweeps == 0
            || self.path_sweeps == 0
            || !(self.threshold > 0.0)
            || !(self.cv_tie >= 0.0)
        {
            return Err(Error::Invalid(
                "regression tolerance/sweeps/threshold".into(),
            ));
        }
        match self.lambda {
            LambdaSpec::Fixed { value } if !(value >= 0.0 && value.is_finite()) => {
                Err(Error::Invalid(format!("lambda {value}")))
            }
            LambdaSpec::Grid {
                points,
                min_ratio,
                folds,
            } if points < 1 || !(min_ratio > 0.0 && min_ratio < 1.0) || folds < 2 => {
                Err(Error::Invalid("lambda grid".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Result of one coordinate-descent run.
#[derive(Debug, Clone)]
pub struct CdResult {
    pub beta: Vec<f64>,
    pub sweeps: usize,
    pub converged: bool,
    /// Objective after each sweep.
    pub objective: Vec<f64>,
}

fn soft(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Coordinate descent on `½(yᵀy − 2βᵀc + βᵀGβ) + λ‖β‖₁`, alternating full
/// sweeps with sweeps over the current non-zero set. Active sweeps run on the
/// compact sub-Gram of that set; `Gβ` is brought up to date before each full
/// sweep.
pub fn cd_gram(
    g: &DMatrix<f64>,
    c: &[f64],
    yty: f64,
    lambda: f64,
    warm: Option<&[f64]>,
    tol: f64,
    max_sweeps: usize,
) -> CdResult {
    let p = c.len();
    let mut beta = warm.map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p]);
    let mut gb = vec![0.0; p];
    for (j, &b) in beta.iter().enumerate() {
        if b != 0.0 {
            for (acc, gij) in gb.iter_mut().zip(g.column(j).iter()) {
                *acc += gij * b;
            }
        }
    }
    // Only non-zero coefficients contribute, so the sums can skip the rest.
    let objective = |idx: &[usize], beta: &[f64], gb: &[f64], c: &[f64]| {
        let mut quad = 0.0;
        let mut lin = 0.0;
        let mut l1 = 0.0;
        for &j in idx {
            quad += beta[j] * gb[j];
            lin += beta[j] * c[j];
            l1 += beta[j].abs();
        }
        0.5 * (yty - 2.0 * lin + quad) + lambda * l1
    };
    let all: Vec<usize> = (0..p).collect();

    let mut trace = Vec::new();
    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < max_sweeps {
        let mut max_delta: f64 = 0.0;
        for j in 0..p {
            let gjj = g[(j, j)];
            if gjj <= 0.0 {
                continue;
            }
            let z = c[j] - gb[j] + gjj * beta[j];
            let new = soft(z, lambda) / gjj;
            let d = new - beta[j];
            if d != 0.0 {
                for (acc, gij) in gb.iter_mut().zip(g.column(j).iter()) {
                    *acc += gij * d;
                }
                beta[j] = new;
                max_delta = max_delta.max(d.abs());
            }
        }
        sweeps += 1;
        trace.push(objective(&all, &beta, &gb, c));
        if max_delta < tol {
            converged = true;
            break;
        }

        let active: Vec<usize> = (0..p)
            .filter(|&j| beta[j] != 0.0 && g[(j, j)] > 0.0)
            .collect();
        let m = active.len();
        let ga = DMatrix::from_fn(m, m, |a, b| g[(active[a], active[b])]);
        let ca: Vec<f64> = active.iter().map(|&j| c[j]).collect();
        let start: Vec<f64> = active.iter().map(|&j| beta[j]).collect();
        let mut ba = start.clone();
        let mut gba: Vec<f64> = active.iter().map(|&j| gb[j]).collect();
        let local: Vec<usize> = (0..m).collect();
        while sweeps < max_sweeps {
            let mut max_delta: f64 = 0.0;
            for k in 0..m {
                if ba[k] == 0.0 {
                    continue;
                }
                let gkk = ga[(k, k)];
                let z = ca[k] - gba[k] + gkk * ba[k];
                let new = soft(z, lambda) / gkk;
                let d = new - ba[k];
                if d != 0.0 {
                    for (acc, gik) in gba.iter_mut().zip(ga.column(k).iter()) {
                        *acc += gik * d;
                    }
                    ba[k] = new;
                    max_delta = max_delta.max(d.abs());
                }
            }
            sweeps += 1;
            trace.push(objective(&local, &ba, &gba, &ca));
            if max_delta < tol {
                break;
            }
        }
        for (k, &j) in active.iter().enumerate() {
            let d = ba[k] - start[k];
            if d != 0.0 {
                for (acc, gij) in gb.iter_mut().zip(g.column(j).iter()) {
                    *acc += gij * d;
                }
                beta[j] = ba[k];
            }
        }
    }
    CdResult {
        beta,
        sweeps,
        converged,
        objective: trace,
    }
}

/// `XᵀX` of the standardized rows in `rows`, accumulated block-wise.
fn gram_rows(x: &DMatrix<f64>, inv_scale: &[f64], rows: Range<usize>) -> DMatrix<f64> {
    let p = x.ncols();
    let mut g = DMatrix::zeros(p, p);
    let mut start = rows.start;
    while start < rows.end {
        let len = GRAM_CHUNK.min(rows.end - start);
        let mut block = x.rows(start, len).clone_owned();
        for (j, mut col) in block.column_iter_mut().enumerate() {
            col *= inv_scale[j];
        }
        let bt = block.transpose();
        g.gemm(1.0, &bt, &block, 1.0);
        start += len;
    }
    g
}

fn xty_rows(x: &DMatrix<f64>, inv_scale: &[f64], y: &[f64], rows: Range<usize>) -> Vec<f64> {
    (0..x.ncols())
        .map(|j| {
            let col = x.column(j);
            rows.clone().map(|r| col[r] * y[r]).sum::<f64>() * inv_scale[j]
        })
        .collect()
}

/// Least-squares solution with diagnostics.
#[derive(Debug, Clone)]
pub struct LsSolution {
    pub beta: Vec<f64>,
    pub rank: usize,
    /// Estimated 2-norm condition number of the (standardized) design.
    pub condition: f64,
    pub ridge: bool,
}

/// Minimum-norm least squares on the columns of `x` (already scaled):
/// QR then SVD of R for narrow problems, normal equations otherwise.
pub fn least_squares(x: &DMatrix<f64>, y: &[f64]) -> Result<LsSolution> {
    let (n, p) = x.shape();
    if y.len() != n {
        return Err(Error::dim("least-squares target", n, y.len()));
    }
    if p == 0 {
        return Ok(LsSolution {
            beta: vec![],
            rank: 0,
            condition: 1.0,
            ridge: false,
        });
    }
    if p <= SVD_MAX_COLS {
        let yv = DVector::from_column_slice(y);
        let (r, rhs) = if n > p {
            let qr = x.clone().qr();
            let mut qty = yv.clone();
            qr.q_tr_mul(&mut qty);
            (qr.r(), qty.rows(0, p).clone_owned())
        } else {
            (x.clone(), yv)
        };
        let svd = r.svd(true, true);
        let smax = svd.singular_values.max();
        let eps = smax * (n.max(p) as f64) * f64::EPSILON;
        let rank = svd.singular_values.iter().filter(|s| **s > eps).count();
        let smin = svd
            .singular_values
            .iter()
            .copied()
            .filter(|s| *s > eps)
            .fold(f64::INFINITY, f64::min);
        let beta = svd
            .solve(&rhs, eps)
            .map_err(|e| Error::Numerical(format!("SVD solve: {e}")))?;
        return Ok(LsSolution {
            beta: beta.iter().copied().collect(),
            rank,
            condition: if rank > 0 { smax / smin } else { f64::INFINITY },
            ridge: false,
        });
    }
    let inv = vec![1.0; p];
    let g = gram_rows(x, &inv, 0..n);
    let c = xty_rows(x, &inv, y, 0..n);
    least_squares_gram(&g, &c)
}

/// Solve `G β = c` by Cholesky, adding a ridge of `RIDGE · mean(diag G)`
/// when the factorization fails or is too ill-conditioned.
pub fn least_squares_gram(g: &DMatrix<f64>, c: &[f64]) -> Result<LsSolution> {
    let p = c.len();
    let scale = (0..p).map(|j| g[(j, j)]).sum::<f64>() / p.max(1) as f64;
    let attempt = |ridge: f64| {
        let mut m = g.clone();
        for j in 0..p {
            m[(j, j)] += ridge;
        }
        m.cholesky()
    };
    let cond_of = |l: &DMatrix<f64>| {
        let d: Vec<f64> = (0..p).map(|j| l[(j, j)]).collect();
        let max = d.iter().copied().fold(0.0, f64::max);
        let min = d.iter().copied().fold(f64::INFINITY, f64::min);
        // The pivot ratio of L estimates cond(X) = sqrt(cond(G)).
        max / min
    };
    let mut ridge = false;
    let chol = match attempt(0.0) {
        Some(ch) if cond_of(&ch.l()) < 1e6 => ch,
        _ => {
            ridge = true;
            attempt(RIDGE * scale.max(f64::MIN_POSITIVE))
                .ok_or_else(|| Error::Numerical("Cholesky failed even with ridge".into()))?
        }
    };
    let l = chol.l();
    let condition = cond_of(&l);
    let beta = chol.solve(&DVector::from_column_slice(c));
    ensure_finite(beta.as_slice(), "least-squares solution")?;
    Ok(LsSolution {
        beta: beta.iter().copied().collect(),
        rank: p,
        condition,
        ridge,
    })
}

/// Outcome of a single-target LASSO fit on raw features.
#[derive(Debug, Clone)]
pub struct LassoFit {
    /// Raw-space coefficients.
    pub coef: Vec<f64>,
    pub objective: Vec<f64>,
    pub sweeps: usize,
    pub converged: bool,
    pub warnings: Vec<String>,
}

fn column_norms(x: &DMatrix<f64>, standardize: bool) -> Vec<f64> {
    if standardize {
        x.column_iter().map(|c| c.norm()).collect()
    } else {
        vec![1.0; x.ncols()]
    }
}

fn inverse(norms: &[f64]) -> Vec<f64> {
    norms
        .iter()
        .map(|v| if *v > 0.0 { 1.0 / v } else { 0.0 })
        .collect()
}

/// LASSO on the columns of `x` (standardized internally when configured);
/// the objective trace is reported in the scale of the raw target.
pub fn lasso_fit(
    x: &DMatrix<f64>,
    y: &[f64],
    lambda: f64,
    config: &RegressionConfig,
) -> Result<LassoFit> {
    let (n, p) = x.shape();
    if n == 0 || y.len() != n {
        return Err(Error::dim("LASSO target", n, y.len()));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Invalid(format!("lambda {lambda}")));
    }
    ensure_finite(x.as_slice(), "design matrix")?;
    ensure_finite(y, "regression target")?;
    let norms = column_norms(x, config.standardize);
    let inv = inverse(&norms);
    let mut warnings = Vec::new();

    if lambda == 0.0 {
        let mut xs = x.clone();
        for (j, mut col) in xs.column_iter_mut().enumerate() {
            col *= inv[j];
        }
        let probe = least_squares(&xs, y)?;
        if probe.rank < p {
            warnings.push(format!(
                "rank-deficient design at lambda = 0 (rank {} of {p}); minimum-norm solution returned",
                probe.rank
            ));
            let coef = probe.beta.iter().zip(&inv).map(|(b, s)| b * s).collect();
            return Ok(LassoFit {
                coef,
                objective: vec![],
                sweeps: 0,
                converged: true,
                warnings,
            });
        }
    }

    let ynorm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if ynorm == 0.0 {
        return Ok(LassoFit {
            coef: vec![0.0; p],
            objective: vec![0.0],
            sweeps: 0,
            converged: true,
            warnings,
        });
    }
    let g = gram_rows(x, &inv, 0..n);
    let c: Vec<f64> = xty_rows(x, &inv, y, 0..n)
        .iter()
        .map(|v| v / ynorm)
        .collect();
    let res = cd_gram(
        &g,
        &c,
        1.0,
        lambda / ynorm,
        None,
        config.tolerance,
        config.max_sweeps,
    );
    if !res.converged {
        warnings.push(format!(
            "coordinate descent stopped after {} sweeps",
            res.sweeps
        ));
    }
    Ok(LassoFit {
        coef: res
            .beta
            .iter()
            .zip(&inv)
            .map(|(b, s)| b * s * ynorm)
            .collect(),
        objective: res.objective.iter().map(|o| o * ynorm * ynorm).collect(),
        sweeps: res.sweeps,
        converged: res.converged,
        warnings,
    })
}

/// Contiguous, nearly equal row blocks.
pub fn fold_ranges(rows: usize, folds: usize) -> Vec<Range<usize>> {
    (0..folds)
        .map(|k| (k * rows / folds)..((k + 1) * rows / folds))
        .collect()
}

/// Per-target fit summary.
#[derive(Debug, Clone, Default)]
pub struct FitDiagnostics {
    pub lambda: f64,
    /// Objective of the LASSO problem at the selected λ (unit-norm target).
    pub objective: f64,
    pub sweeps: usize,
    pub converged: bool,
    pub support: usize,
    pub residual_rms: f64,
    pub condition: f64,
    /// `(λ, mean validation MSE)` over the grid, largest λ first.
    pub cv_curve: Vec<(f64, f64)>,
    pub warnings: Vec<String>,
}

/// Design prepared for repeated fits against several targets.
struct Problem<'a> {
    x: &'a DMatrix<f64>,
    inv: Vec<f64>,
    folds: Vec<Range<usize>>,
    /// Gram of all rows outside each fold (empty without cross-validation).
    train_grams: Vec<DMatrix<f64>>,
    full: DMatrix<f64>,
}

impl<'a> Problem<'a> {
    fn new(design: &'a DesignMatrix, config: &RegressionConfig) -> Self {
        let x = &design.x;
        let inv = if config.standardize {
            design.inv_scales()
        } else {
            vec![1.0; design.cols()]
        };
        let folds = match config.lambda {
            LambdaSpec::Grid { folds, .. } => fold_ranges(x.nrows(), folds),
            LambdaSpec::Fixed { .. } => vec![0..x.nrows()],
        };
        let mut train_grams: Vec<DMatrix<f64>> = folds
            .iter()
            .map(|r| gram_rows(x, &inv, r.clone()))
            .collect();
        let mut full = train_grams[0].clone();
        for g in &train_grams[1..] {
            full += g;
        }
        if folds.len() > 1 {
            for g in &mut train_grams {
                g.neg_mut();
                *g += &full;
            }
        } else {
            train_grams.clear();
        }
        Self {
            x,
            inv,
            folds,
            train_grams,
            full,
        }
    }

    fn scaled_rows(&self, rows: Range<usize>, support: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), support.len(), |r, k| {
            self.x[(rows.start + r, support[k])] * self.inv[support[k]]
        })
    }

    /// Least squares on `support` using the Gram `g` and moments `c`.
    fn refit_gram(g: &DMatrix<f64>, c: &[f64], support: &[usize]) -> Result<Vec<f64>> {
        let sub = DMatrix::from_fn(support.len(), support.len(), |a, b| {
            g[(support[a], support[b])]
        });
        let rhs: Vec<f64> = support.iter().map(|&j| c[j]).collect();
        Ok(least_squares_gram(&sub, &rhs)?.beta)
    }

    fn residual(&self, y: &[f64], rows: Range<usize>, support: &[usize], beta: &[f64]) -> f64 {
        rows.map(|r| {
            let pred: f64 = support
                .iter()
                .zip(beta)
                .map(|(&j, b)| self.x[(r, j)] * self.inv[j] * b)
                .sum();
            (y[r] - pred).powi(2)
        })
        .sum()
    }

    /// Estimator at one λ from a LASSO solution: support and coefficients
    /// (unit-norm column scale).
    fn estimate(
        &self,
        g: &DMatrix<f64>,
        c: &[f64],
        beta: &[f64],
        refit: bool,
    ) -> Result<(Vec<usize>, Vec<f64>)> {
        let support: Vec<usize> = (0..beta.len()).filter(|&j| beta[j] != 0.0).collect();
        if !refit || support.is_empty() {
            let b = support.iter().map(|&j| beta[j]).collect();
            return Ok((support, b));
        }
        let b = Self::refit_gram(g, c, &support)?;
        Ok((support, b))
    }

    fn fit(&self, y: &[f64], config: &RegressionConfig) -> Result<(Vec<f64>, FitDiagnostics)> {
        let n = self.x.nrows();
        let p = self.x.ncols();
        let ynorm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut diag = FitDiagnostics::default();
        if ynorm == 0.0 {
            diag.converged = true;
            return Ok((vec![0.0; p], diag));
        }
        let yu: Vec<f64> = y.iter().map(|v| v / ynorm).collect();
        let fold_c: Vec<Vec<f64>> = self
            .folds
            .iter()
            .map(|r| xty_rows(self.x, &self.inv, &yu, r.clone()))
            .collect();
        let c_full: Vec<f64> = (0..p).map(|j| fold_c.iter().map(|c| c[j]).sum()).collect();
        let lambda_max = c_full.iter().fold(0.0f64, |m, v| m.max(v.abs()));

        let lambda_u = match config.lambda {
            LambdaSpec::Fixed { value } => value / ynorm,
            LambdaSpec::Grid {
                points, min_ratio, ..
            } => {
                let grid: Vec<f64> = (0..points)
                    .map(|k| {
                        let f = if points == 1 {
                            0.0
                        } else {
                            k as f64 / (points - 1) as f64
                        };
                        lambda_max * min_ratio.powf(f)
                    })
                    .collect();
                let sweeps = config.path_sweeps.min(config.max_sweeps);
                let folds: Vec<_> = self
                    .folds
                    .iter()
                    .zip(&self.train_grams)
                    .enumerate()
                    .map(|(k, (rows, g))| {
                        let c: Vec<f64> = (0..p).map(|j| c_full[j] - fold_c[k][j]).collect();
                        let held: f64 = rows.clone().map(|r| yu[r] * yu[r]).sum();
                        (rows.clone(), g, c, 1.0 - held, CV_FLOOR * held / n as f64)
                    })
                    .collect();
                let mut warm: Vec<Option<Vec<f64>>> = vec![None; folds.len()];
                let mut cv = Vec::with_capacity(points);
                let mut best = f64::INFINITY;
                let mut worse = 0;
                for &lam in &grid {
                    // Errors are clamped at an exact-fit floor; once every
                    // fold sits on it the rest of the path cannot change the
                    // pick.
                    let mut err = 0.0;
                    let mut exact = true;
                    for (k, (rows, g, c, yty, floor)) in folds.iter().enumerate() {
                        let res = cd_gram(
                            g,
                            c,
                            *yty,
                            lam,
                            warm[k].as_deref(),
                            config.tolerance,
                            sweeps,
                        );
                        let (support, b) = self.estimate(g, c, &res.beta, config.refit)?;
                        let e =
                            (self.residual(&yu, rows.clone(), &support, &b) / n as f64).max(*floor);
                        exact &= e <= *floor;
                        err += e;
                        warm[k] = Some(res.beta);
                    }
                    cv.push(err);
                    if exact {
                        break;
                    }
                    if err <= best * (1.0 + config.cv_tie) {
                        worse = 0;
                    } else {
                        worse += 1;
                        if worse >= CV_PATIENCE {
                            break;
                        }
                    }
                    best = best.min(err);
                }
                let best = cv.iter().copied().fold(f64::INFINITY, f64::min);
                let pick = cv
                    .iter()
                    .position(|e| *e <= best * (1.0 + config.cv_tie))
                    .unwrap_or(cv.len() - 1);
                diag.cv_curve = grid
                    .iter()
                    .zip(&cv)
                    .map(|(l, e)| (l * ynorm, e * ynorm * ynorm))
                    .collect();
                grid[pick]
            }
        };

        // Final fit on all rows, warm-started down a short path.
        let mut warm: Option<Vec<f64>> = None;
        let mut res = None;
        let steps = 8;
        for s in 0..=steps {
            let lam = if lambda_u >= lambda_max || lambda_u == 0.0 {
                if s < steps {
                    continue;
                }
                lambda_u
            } else {
                lambda_max * (lambda_u / lambda_max).powf(s as f64 / steps as f64)
            };
            let r = cd_gram(
                &self.full,
                &c_full,
                1.0,
                lam,
                warm.as_deref(),
                config.tolerance,
                config.max_sweeps,
            );
            warm = Some(r.beta.clone());
            res = Some(r);
        }
        let res = res.expect("path has at least one step");
        let support: Vec<usize> = (0..p).filter(|&j| res.beta[j] != 0.0).collect();
        let mut beta_u = vec![0.0; p];
        if config.refit && !support.is_empty() {
            let ls = if support.len() <= SVD_MAX_COLS {
                least_squares(&self.scaled_rows(0..n, &support), &yu)?
            } else {
                let sub = DMatrix::from_fn(support.len(), support.len(), |a, b| {
                    self.full[(support[a], support[b])]
                });
                let rhs: Vec<f64> = support.iter().map(|&j| c_full[j]).collect();
                least_squares_gram(&sub, &rhs)?
            };
            if ls.ridge {
                diag.warnings.push("ridge fallback in support refit".into());
            }
            diag.condition = ls.condition;
            for (k, &j) in support.iter().enumerate() {
                beta_u[j] = ls.beta[k];
            }
        } else {
            beta_u = res.beta.clone();
        }
        if !res.converged {
            diag.warnings.push(format!(
                "coordinate descent stopped after {} sweeps",
                res.sweeps
            ));
        }
        let b_support: Vec<f64> = support.iter().map(|&j| beta_u[j]).collect();
        diag.residual_rms =
            (self.residual(&yu, 0..n, &support, &b_support) / n as f64).sqrt() * ynorm;
        diag.lambda = lambda_u * ynorm;
        diag.objective = res.objective.last().copied().unwrap_or(0.0);
        diag.sweeps = res.sweeps;
        diag.converged = res.converged;
        diag.support = support.len();
        let coef = beta_u
            .iter()
            .zip(&self.inv)
            .map(|(b, s)| b * s * ynorm)
            .collect();
        Ok((coef, diag))
    }
}

/// Coefficients over a library for a set of output joints.
#[derive(Debug, Clone)]
pub struct SparseModel {
    pub library: FeatureLibrary,
    /// 0-based joint index of each coefficient row.
    pub outputs: Vec<usize>,
    /// Raw-feature coefficients, one vector per output.
    pub coefficients: Vec<Vec<f64>>,
    pub lambda: Vec<f64>,
    pub threshold: f64,
    pub diagnostics: Vec<FitDiagnostics>,
}

/// Fit one sparse model per target column; `targets[k]` is the torque of
/// joint `outputs[k]` on every row of the design.
pub fn fit_sparse(
    library: &FeatureLibrary,
    design: &DesignMatrix,
    targets: &[Vec<f64>],
    outputs: &[usize],
    config: &RegressionConfig,
    step: StepName,
) -> Result<SparseModel> {
    config.validate()?;
    if targets.len() != outputs.len() {
        return Err(Error::dim(
            "regression outputs",
            outputs.len(),
            targets.len(),
        ));
    }
    let (n, p) = (design.rows(), design.cols());
    if n < p || n == 0 {
        return Err(Error::Underdetermined {
            step,
            samples: n,
            columns: p,
        });
    }
    ensure_finite(design.x.as_slice(), "design matrix")?;
    let problem = Problem::new(design, config);
    let mut coefficients = Vec::new();
    let mut lambda = Vec::new();
    let mut diagnostics = Vec::new();
    for y in targets {
        if y.len() != n {
            return Err(Error::dim("regression target", n, y.len()));
        }
        ensure_finite(y, "regression target")?;
        let (coef, diag) = problem.fit(y, config)?;
        lambda.push(diag.lambda);
        coefficients.push(coef);
        diagnostics.push(diag);
    }
    Ok(SparseModel {
        library: library.clone(),
        outputs: outputs.to_vec(),
        coefficients,
        lambda,
        threshold: config.threshold,
        diagnostics,
    })
}

impl SparseModel {
    pub fn step(&self) -> Step {
        self.library.spec.step
    }

    pub fn dof(&self) -> usize {
        self.library.spec.n
    }

    /// Model with every coefficient zero.
    pub fn zeros(library: FeatureLibrary, outputs: Vec<usize>, threshold: f64) -> Self {
        let p = library.len();
        Self {
            coefficients: vec![vec![0.0; p]; outputs.len()],
            lambda: vec![0.0; outputs.len()],
            diagnostics: vec![FitDiagnostics::default(); outputs.len()],
            library,
            outputs,
            threshold,
        }
    }

    /// Torque vector of length n; joints without a coefficient row get 0.
    pub fn predict(&self, state: &JointState) -> Result<Vec<f64>> {
        state.check(self.dof())?;
        let mut tau = vec![0.0; self.dof()];
        for (c, f) in self.library.features().iter().enumerate() {
            if self.coefficients.iter().all(|coef| coef[c] == 0.0) {
                continue;
            }
            let v = f.eval_state(state);
            for (k, &j) in self.outputs.iter().enumerate() {
                tau[j] += v * self.coefficients[k][c];
            }
        }
        Ok(tau)
    }

    /// Predictions for every sample of a design evaluated from this library.
    pub fn predict_design(&self, design: &DesignMatrix) -> Vec<Vec<f64>> {
        self.coefficients
            .iter()
            .map(|coef| {
                let b = DVector::from_column_slice(coef);
                (&design.x * b).iter().copied().collect()
            })
            .collect()
    }

    /// `(feature, coefficient)` above the threshold for output row `k`,
    /// largest magnitude first.
    pub fn active_terms(&self, k: usize) -> Vec<(Feature, f64)> {
        active_terms(
            self.library.features(),
            &self.coefficients[k],
            self.threshold,
        )
    }

    pub fn active_counts(&self) -> Vec<usize> {
        (0..self.outputs.len())
            .map(|k| self.active_terms(k).len())
            .collect()
    }

    /// Text form: header lines `key=value`, then a `[joint i]` block per
    /// output listing every feature with its coefficient.
    pub fn export(&self) -> String {
        let spec = &self.library.spec;
        let mut s = String::new();
        let _ = writeln!(s, "sparse-model");
        let _ = writeln!(s, "library={}", self.library.manifest_hash());
        let _ = writeln!(s, "step={}", spec.step);
        let _ = writeln!(s, "n={}", spec.n);
        let _ = writeln!(s, "n1={}", spec.n1);
        let _ = writeln!(s, "n2={}", spec.n2);
        let friction = match &spec.friction {
            None => "none".to_string(),
            Some(v) => v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(";"),
        };
        let _ = writeln!(s, "friction={friction}");
        let _ = writeln!(s, "threshold={}", fmt_f64(self.threshold));
        let _ = writeln!(
            s,
            "lambda={}",
            self.lambda
                .iter()
                .map(|x| fmt_f64(*x))
                .collect::<Vec<_>>()
                .join(",")
        );
        for (k, &j) in self.outputs.iter().enumerate() {
            let _ = writeln!(s, "[joint {}]", j + 1);
            for (f, c) in self.library.features().iter().zip(&self.coefficients[k]) {
                let _ = writeln!(s, "{f},{}", fmt_f64(*c));
            }
        }
        let _ = writeln!(s, "end");
        s
    }

    /// Parse one model block from `lines`, consuming through its `end` line.
    pub fn parse_lines<'a, I: Iterator<Item = &'a str>>(lines: &mut I) -> Result<SparseModel> {
        let mut next = || {
            lines
                .next()
                .ok_or_else(|| Error::Parse("truncated model".into()))
        };
        if next()? != "sparse-model" {
            return Err(Error::Parse("expected `sparse-model`".into()));
        }
        let mut field = |key: &str| -> Result<String> {
            let line = next()?;
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix('='))
                .map(str::to_string)
                .ok_or_else(|| Error::Parse(format!("expected `{key}=` but found `{line}`")))
        };
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Parse(format!("bad number `{s}`")))
        };
        let int = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::Parse(format!("bad integer `{s}`")))
        };
        let hash = field("library")?;
        let step: Step = field("step")?.parse()?;
        let n = int(&field("n")?)?;
        let n1 = int(&field("n1")?)?;
        let n2 = int(&field("n2")?)?;
        let friction = match field("friction")?.as_str() {
            "none" => None,
            v => Some(v.split(';').map(num).collect::<Result<Vec<_>>>()?),
        };
        let threshold = num(&field("threshold")?)?;
        let lambda_text = field("lambda")?;
        let lambda = if lambda_text.is_empty() {
            vec![]
        } else {
            lambda_text
                .split(',')
                .map(num)
                .collect::<Result<Vec<_>>>()?
        };

        let mut outputs = Vec::new();
        let mut features: Option<Vec<Feature>> = None;
        let mut coefficients = Vec::new();
        let mut current: Option<(Vec<Feature>, Vec<f64>)> = None;
        let finish = |cur: Option<(Vec<Feature>, Vec<f64>)>,
                      features: &mut Option<Vec<Feature>>,
                      coefficients: &mut Vec<Vec<f64>>|
         -> Result<()> {
            if let Some((f, c)) = cur {
                match features {
                    None => *features = Some(f),
                    Some(existing) if *existing == f => {}
                    Some(_) => {
                        return Err(Error::Parse("joint blocks list different features".into()))
                    }
                }
                coefficients.push(c);
            }
            Ok(())
        };
        loop {
            let line = next()?;
            if line == "end" {
                finish(current.take(), &mut features, &mut coefficients)?;
                break;
            }
            if let Some(j) = line
                .strip_prefix("[joint ")
                .and_then(|r| r.strip_suffix(']'))
            {
                finish(current.take(), &mut features, &mut coefficients)?;
                let j = int(j)?;
                if j == 0 || j > n {
                    return Err(Error::Parse(format!("joint {j} out of range")));
                }
                outputs.push(j - 1);
                current = Some((Vec::new(), Vec::new()));
                continue;
            }
            let (f, c) = line
                .rsplit_once(',')
                .ok_or_else(|| Error::Parse(format!("bad coefficient line `{line}`")))?;
            let cur = current
                .as_mut()
                .ok_or_else(|| Error::Parse("coefficient outside a joint block".into()))?;
            cur.0.push(f.parse()?);
            cur.1.push(num(c)?);
        }
        if lambda.len() != outputs.len() {
            return Err(Error::Parse(
                "lambda count differs from joint blocks".into(),
            ));
        }
        let spec = LibrarySpec {
            n,
            n1,
            n2,
            step,
            friction,
        };
        let library = FeatureLibrary::from_features(spec, features.unwrap_or_default())?;
        if library.manifest_hash() != hash {
            return Err(Error::Parse(
                "library hash does not match the listed features".into(),
            ));
        }
        let k = outputs.len();
        Ok(SparseModel {
            library,
            outputs,
            coefficients,
            lambda,
            threshold,
            diagnostics: vec![FitDiagnostics::default(); k],
        })
    }

    pub fn import(text: &str) -> Result<SparseModel> {
        let mut lines = text.lines();
        let m = Self::parse_lines(&mut lines)?;
        if lines.any(|l| !l.trim().is_empty()) {
            return Err(Error::Parse("trailing content after model".into()));
        }
        Ok(m)
    }
}

/// Entries with `|coefficient| > threshold`, sorted by magnitude descending
/// (ties keep library order).
pub fn active_terms(features: &[Feature], coef: &[f64], threshold: f64) -> Vec<(Feature, f64)> {
    let mut terms: Vec<(Feature, f64)> = features
        .iter()
        .zip(coef)
        .filter(|(_, c)| c.abs() > threshold)
        .map(|(f, c)| (f.clone(), *c))
        .collect();
    terms.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()));
    terms
}

/// Inclusive order ranges searched by [`select_order`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrderRange {
    pub n1: [usize; 2],
    pub n2: [usize; 2],
    /// A step to higher order must cut the error by at least this fraction.
    #[serde(default = "default_plateau")]
    pub plateau: f64,
    /// Errors below this are treated as exact and stop the search.
    #[serde(default = "default_floor")]
    pub floor: f64,
}

fn default_plateau() -> f64 {
    0.05
}
fn default_floor() -> f64 {
    1e-9
}

impl Default for OrderRange {
    fn default() -> Self {
        Self {
            n1: [1, 4],
            n2: [1, 2],
            plateau: default_plateau(),
            floor: default_floor(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OrderSelection {
    pub n1: usize,
    pub n2: usize,
    /// Every evaluated `(n1, n2, relative residual RMS)`, in visiting order.
    pub curve: Vec<(usize, usize, f64)>,
}

/// Relative least-squares residual of the step library at one order pair,
/// pooled over the target columns.
pub fn order_error(
    dataset: &Dataset,
    step: Step,
    n1: usize,
    n2: usize,
    friction: Option<&[f64]>,
    targets: &[Vec<f64>],
) -> Result<f64> {
    let library = FeatureLibrary::build(LibrarySpec {
        n: dataset.dof,
        n1,
        n2,
        step,
        friction: friction.map(<[f64]>::to_vec),
    })?;
    let design = library.evaluate(dataset)?;
    if design.rows() < design.cols() {
        return Err(Error::Underdetermined {
            step: StepName(step.as_str()),
            samples: design.rows(),
            columns: design.cols(),
        });
    }
    let xs = design.standardized();
    let (mut num, mut den) = (0.0, 0.0);
    let gram = if xs.ncols() > SVD_MAX_COLS {
        let inv = vec![1.0; xs.ncols()];
        Some(gram_rows(&xs, &inv, 0..xs.nrows()))
    } else {
        None
    };
    for y in targets {
        let beta = match &gram {
            None => least_squares(&xs, y)?.beta,
            Some(g) => {
                let c: Vec<f64> = xs
                    .column_iter()
                    .map(|col| col.iter().zip(y).map(|(a, b)| a * b).sum())
                    .collect();
                least_squares_gram(g, &c)?.beta
            }
        };
        let pred = &xs * DVector::from_column_slice(&beta);
        num += y
            .iter()
            .zip(pred.iter())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>();
        den += y.iter().map(|a| a * a).sum::<f64>();
    }
    Ok(if den > 0.0 { (num / den).sqrt() } else { 0.0 })
}

/// Greedy ascent over (N1, N2) from the lowest orders: move to the better
/// neighbour while it improves the relative residual by at least the
/// plateau fraction, stopping early once the error is below the floor.
pub fn select_order(
    dataset: &Dataset,
    step: Step,
    range: &OrderRange,
    friction: Option<&[f64]>,
    targets: &[Vec<f64>],
) -> Result<OrderSelection> {
    let [a1, b1] = range.n1;
    let [a2, b2] = if step == Step::S1 { [1, 1] } else { range.n2 };
    if a1 > b1 || a2 > b2 || (step != Step::S1 && a2 == 0) {
        return Err(Error::Invalid("empty order range".into()));
    }
    let mut curve = Vec::new();
    let eval =
        |n1: usize, n2: usize, curve: &mut Vec<(usize, usize, f64)>| -> Result<Option<f64>> {
            if let Some(e) = curve.iter().find(|c| c.0 == n1 && c.1 == n2) {
                return Ok(Some(e.2));
            }
            match order_error(dataset, step, n1, n2, friction, targets) {
                Ok(e) => {
                    curve.push((n1, n2, e));
                    Ok(Some(e))
                }
                Err(Error::Underdetermined { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        };
    let (mut n1, mut n2) = (a1, a2);
    let mut err = eval(n1, n2, &mut curve)?.ok_or_else(|| Error::Underdetermined {
        step: StepName(step.as_str()),
        samples: dataset.len(),
        columns: crate::features::library_size(dataset.dof, n1, n2, step),
    })?;
    while err > range.floor {
        let mut best: Option<(usize, usize, f64)> = None;
        for (c1, c2) in [(n1 + 1, n2), (n1, n2 + 1)] {
            if c1 > b1 || c2 > b2 {
                continue;
            }
            if let Some(e) = eval(c1, c2, &mut curve)? {
                if best.is_none_or(|b| e < b.2) {
                    best = Some((c1, c2, e));
                }
            }
        }
        match best {
            Some((c1, c2, e)) if e <= err * (1.0 - range.plateau) => {
                n1 = c1;
                n2 = c2;
                err = e;
            }
            _ => break,
        }
    }
    Ok(OrderSelection { n1, n2, curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, p: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn single_column_soft_threshold() {
        let x = DMatrix::from_column_slice(4, 1, &[0.5, 0.5, 0.5, 0.5]);
        let y = [1.0, 2.0, 0.5, -0.3];
        let xty: f64 = y.iter().map(|v| v * 0.5).sum();
        let cfg = RegressionConfig::default();
        for lambda in [0.0, 0.1, 0.5, 1.5] {
            let fit = lasso_fit(&x, &y, lambda, &cfg).unwrap();
            // Unit-norm column; raw coefficient = standardized / norm(=1).
            let expected = soft(xty, lambda);
            assert!((fit.coef[0] - expected).abs() < 1e-10, "{lambda}");
        }
    }

    #[test]
    fn lambda_above_max_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_matrix(&mut rng, 30, 6);
        let y: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        let inv = inverse(&column_norms(&x, true));
        let lmax = xty_rows(&x, &inv, &y, 0..30)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let fit = lasso_fit(&x, &y, lmax * 1.0001, &RegressionConfig::default()).unwrap();
        assert!(fit.coef.iter().all(|c| *c == 0.0));
    }

    #[test]
    fn objective_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_matrix(&mut rng, 40, 15);
        let y: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        for lambda in [0.0, 0.01, 0.3] {
            let fit = lasso_fit(&x, &y, lambda, &RegressionConfig::default()).unwrap();
            for w in fit.objective.windows(2) {
                assert!(w[1] <= w[0] + 1e-12 * w[0].abs());
            }
        }
    }

    #[test]
    fn rank_deficient_zero_lambda_is_min_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut x = random_matrix(&mut rng, 20, 3);
        let dup = x.column(0).clone_owned();
        x = x.insert_column(3, 0.0);
        x.set_column(3, &dup);
        let y: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fit = lasso_fit(&x, &y, 0.0, &RegressionConfig::default()).unwrap();
        assert_eq!(fit.warnings.len(), 1);
        assert!((fit.coef[0] - fit.coef[3]).abs() < 1e-10);
    }

    #[test]
    fn cv_fit_recovers_planted_sparse_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_matrix(&mut rng, 200, 30);
        let truth: Vec<f64> = (0..30)
            .map(|j| if j % 7 == 0 { 1.0 + j as f64 } else { 0.0 })
            .collect();
        let y: Vec<f64> = (0..200)
            .map(|r| (0..30).map(|j| x[(r, j)] * truth[j]).sum())
            .collect();
        let design = DesignMatrix {
            norms: x.column_iter().map(|c| c.norm()).collect(),
            x,
        };
        let library = FeatureLibrary::from_features(
            LibrarySpec {
                n: 1,
                n1: 0,
                n2: 1,
                step: Step::Full,
                friction: None,
            },
            vec![],
        )
        .unwrap();
        let m = fit_sparse(
            &library,
            &design,
            &[y],
            &[0],
            &RegressionConfig::default(),
            StepName("test"),
        )
        .unwrap();
        for j in 0..30 {
            assert!((m.coefficients[0][j] - truth[j]).abs() < 1e-9, "{j}");
        }
    }

    #[test]
    fn folds_cover_rows() {
        let f = fold_ranges(23, 5);
        assert_eq!(f.first().unwrap().start, 0);
        assert_eq!(f.last().unwrap().end, 23);
        for w in f.windows(2) {
            assert_eq!(w[0].end, w[1].start);
        }
    }
}
