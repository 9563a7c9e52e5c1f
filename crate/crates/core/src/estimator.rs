//! Event-study two-way fixed-effects estimation.
//!
//! The outcome of unit `i` in period `t` is modelled as
//! `y = sum_tau beta_tau * D_tau + unit_i + period_t + e`, where `D_tau` is
//! one for treated units in period `tau` and the base period carries no
//! dummy. Fixed effects are absorbed by alternating projections on unit
//! and period means; the coefficients then come from least squares on the
//! demeaned data. A full dummy-variable regression is kept as a second,
//! independent route ([`Solver::DummyOls`]).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::geo::HexId;
use crate::panel::PanelCell;
use crate::time::Month;

/// Two-sided 95% normal critical value used for confidence bands.
pub const Z_95: f64 = 1.959_963_984_540_054;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeMode {
    Hc1,
    #[default]
    ClusterByUnit,
}

impl FromStr for SeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "hc1" => Ok(SeMode::Hc1),
            "cluster" | "cluster_by_unit" => Ok(SeMode::ClusterByUnit),
            other => Err(Error::Config(format!("unknown se_mode {other:?}"))),
        }
    }
}

impl fmt::Display for SeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SeMode::Hc1 => "hc1",
            SeMode::ClusterByUnit => "cluster_by_unit",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    /// Alternating projections, then least squares on the demeaned data.
    #[default]
    Demeaning,
    /// Least squares with explicit unit and period dummies.
    DummyOls,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventStudySpec {
    /// Period whose dummy is omitted.
    pub base_period: Month,
    pub se_mode: SeMode,
    /// Weight cells by `n_devices`.
    pub weighted: bool,
    /// Treated units; when `None`, units with any `cable` cell.
    pub treated_units: Option<BTreeSet<HexId>>,
    pub solver: Solver,
    /// Relative convergence tolerance of the demeaning sweeps.
    pub tolerance: f64,
    pub max_sweeps: usize,
}

impl EventStudySpec {
    pub fn new(base_period: Month) -> Self {
        Self {
            base_period,
            se_mode: SeMode::ClusterByUnit,
            weighted: false,
            treated_units: None,
            solver: Solver::Demeaning,
            tolerance: 1e-10,
            max_sweeps: 10_000,
        }
    }
}

/// Panel observations indexed by unit and period.
#[derive(Clone, Debug)]
struct Design {
    units: Vec<HexId>,
    periods: Vec<Month>,
    unit: Vec<usize>,
    period: Vec<usize>,
    y: Vec<f64>,
    w: Vec<f64>,
    cable: Vec<bool>,
    treated: Vec<bool>,
}

impl Design {
    fn new(panel: &[PanelCell], spec: &EventStudySpec) -> Result<Self> {
        let units: Vec<HexId> = panel.iter().map(|c| c.hex_id).collect::<BTreeSet<_>>().into_iter().collect();
        let periods: Vec<Month> = panel.iter().map(|c| c.month).collect::<BTreeSet<_>>().into_iter().collect();
        if units.len() < 2 || periods.len() < 2 {
            return Err(Error::Estimation(format!(
                "need at least 2 units and 2 periods, got {} and {}",
                units.len(),
                periods.len()
            )));
        }
        if !periods.contains(&spec.base_period) {
            return Err(Error::Estimation(format!("base period {} not in panel", spec.base_period)));
        }
        let uidx: BTreeMap<HexId, usize> = units.iter().enumerate().map(|(i, u)| (*u, i)).collect();
        let pidx: BTreeMap<Month, usize> = periods.iter().enumerate().map(|(i, p)| (*p, i)).collect();
        let mut seen = BTreeSet::new();
        for c in panel {
            if !seen.insert((c.hex_id, c.month)) {
                return Err(Error::InvalidInput(format!("duplicate panel cell {} {}", c.hex_id, c.month)));
            }
            if !c.y.is_finite() {
                return Err(Error::InvalidInput(format!("non-finite outcome in cell {} {}", c.hex_id, c.month)));
            }
        }
        let mut treated = vec![false; units.len()];
        match &spec.treated_units {
            Some(set) => {
                for (i, u) in units.iter().enumerate() {
                    treated[i] = set.contains(u);
                }
                if let Some(c) = panel.iter().find(|c| c.cable && !set.contains(&c.hex_id)) {
                    return Err(Error::InvalidInput(format!("unit {} has cable=1 but is not treated", c.hex_id)));
                }
            }
            None => {
                for c in panel.iter().filter(|c| c.cable) {
                    treated[uidx[&c.hex_id]] = true;
                }
            }
        }
        if treated.iter().all(|&t| t) || treated.iter().all(|&t| !t) {
            return Err(Error::Singular(
                "need at least one treated and one untreated unit; treatment dummies are absorbed by the fixed effects".into(),
            ));
        }
        let w = panel
            .iter()
            .map(|c| if spec.weighted { c.n_devices as f64 } else { 1.0 })
            .collect::<Vec<_>>();
        if w.iter().any(|&w| w <= 0.0) {
            return Err(Error::InvalidInput("weighted fit needs n_devices >= 1".into()));
        }
        Ok(Self {
            unit: panel.iter().map(|c| uidx[&c.hex_id]).collect(),
            period: panel.iter().map(|c| pidx[&c.month]).collect(),
            y: panel.iter().map(|c| c.y).collect(),
            cable: panel.iter().map(|c| c.cable).collect(),
            w,
            units,
            periods,
            treated,
        })
    }

    fn n(&self) -> usize {
        self.y.len()
    }

    fn first_cable_period(&self) -> Option<Month> {
        (0..self.n()).filter(|&i| self.cable[i]).map(|i| self.periods[self.period[i]]).min()
    }

    fn event_columns(&self, base: Month) -> (Vec<String>, Vec<Month>, Vec<Vec<f64>>) {
        let terms: Vec<Month> = self.periods.iter().copied().filter(|&p| p != base).collect();
        let cols = terms
            .iter()
            .map(|&tau| {
                (0..self.n())
                    .map(|i| (self.treated[self.unit[i]] && self.periods[self.period[i]] == tau) as u8 as f64)
                    .collect()
            })
            .collect();
        (terms.iter().map(|m| format!("treated x {m}")).collect(), terms, cols)
    }

    fn post_column(&self, opening: Month) -> Vec<f64> {
        (0..self.n())
            .map(|i| (self.treated[self.unit[i]] && self.periods[self.period[i]] >= opening) as u8 as f64)
            .collect()
    }
}

/// Result of sweeping unit and period means out of one vector.
struct Demeaned {
    values: Vec<f64>,
    unit_fx: Vec<f64>,
    period_fx: Vec<f64>,
    sweeps: usize,
}

fn demean(v: &[f64], d: &Design, tol: f64, max_sweeps: usize) -> Result<Demeaned> {
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
    let mut out = v.to_vec();
    let mut unit_fx = vec![0.0; d.units.len()];
    let mut period_fx = vec![0.0; d.periods.len()];
    let mut unit_w = vec![0.0; d.units.len()];
    let mut period_w = vec![0.0; d.periods.len()];
    for i in 0..d.n() {
        unit_w[d.unit[i]] += d.w[i];
        period_w[d.period[i]] += d.w[i];
    }
    let mut sums_u = vec![0.0; d.units.len()];
    let mut sums_p = vec![0.0; d.periods.len()];
    let mut last_change = f64::INFINITY;
    for sweep in 1..=max_sweeps {
        sums_u.iter_mut().for_each(|s| *s = 0.0);
        for i in 0..d.n() {
            sums_u[d.unit[i]] += d.w[i] * out[i];
        }
        for (s, w) in sums_u.iter_mut().zip(&unit_w) {
            *s /= w;
        }
        for i in 0..d.n() {
            out[i] -= sums_u[d.unit[i]];
        }
        sums_p.iter_mut().for_each(|s| *s = 0.0);
        for i in 0..d.n() {
            sums_p[d.period[i]] += d.w[i] * out[i];
        }
        for (s, w) in sums_p.iter_mut().zip(&period_w) {
            *s /= w;
        }
        for i in 0..d.n() {
            out[i] -= sums_p[d.period[i]];
        }
        for (fx, s) in unit_fx.iter_mut().zip(&sums_u) {
            *fx += s;
        }
        for (fx, s) in period_fx.iter_mut().zip(&sums_p) {
            *fx += s;
        }
        let change = sums_u.iter().chain(&sums_p).fold(0.0f64, |m, x| m.max(x.abs()));
        last_change = change;
        if change <= tol * scale {
            return Ok(Demeaned {
                values: out,
                unit_fx,
                period_fx,
                sweeps: sweep,
            });
        }
    }
    Err(Error::NonConvergence {
        sweeps: max_sweeps,
        last_change,
    })
}

/// Checks the Gram matrix for terms absorbed by the fixed effects or
/// collinear with earlier terms, naming them in the error.
fn check_rank(gram: &DMatrix<f64>, raw_norms: &[f64], names: &[String]) -> Result<()> {
    let k = gram.nrows();
    let mut absorbed = Vec::new();
    for j in 0..k {
        if raw_norms[j] == 0.0 || gram[(j, j)] <= 1e-10 * raw_norms[j] {
            absorbed.push(names[j].clone());
        }
    }
    if !absorbed.is_empty() {
        return Err(Error::Singular(format!(
            "terms without variation after absorbing fixed effects: {}",
            absorbed.join(", ")
        )));
    }
    // Cholesky in column order; a tiny pivot marks a term collinear with
    // the ones before it.
    let mut l = DMatrix::<f64>::zeros(k, k);
    let mut collinear = Vec::new();
    for j in 0..k {
        let mut pivot = gram[(j, j)];
        for m in 0..j {
            pivot -= l[(j, m)] * l[(j, m)];
        }
        if pivot <= 1e-10 * gram[(j, j)] {
            collinear.push(names[j].clone());
            continue;
        }
        let ljj = pivot.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..k {
            let mut s = gram[(i, j)];
            for m in 0..j {
                s -= l[(i, m)] * l[(j, m)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    if !collinear.is_empty() {
        return Err(Error::Singular(format!("collinear terms: {}", collinear.join(", "))));
    }
    Ok(())
}

/// Scalar small-sample factor applied to the sandwich.
fn small_sample_factor(mode: SeMode, n: usize, k: usize, n_units: usize, n_periods: usize) -> f64 {
    let n = n as f64;
    match mode {
        SeMode::Hc1 => {
            let params = (k + n_units + n_periods - 1) as f64;
            if n > params {
                n / (n - params)
            } else {
                f64::NAN
            }
        }
        SeMode::ClusterByUnit => {
            // unit effects are nested in the clusters and not counted
            let params = (k + n_periods - 1) as f64;
            let g = n_units as f64;
            if n > params && g > 1.0 {
                g / (g - 1.0) * (n - 1.0) / (n - params)
            } else {
                f64::NAN
            }
        }
    }
}

/// Sandwich covariance of the first `k` coefficients given regressor
/// rows `x` (n x p), residuals, weights and the bread `(X'WX)^-1`.
fn sandwich(
    x: &DMatrix<f64>,
    resid: &[f64],
    d: &Design,
    bread: &DMatrix<f64>,
    mode: SeMode,
    factor: f64,
) -> DMatrix<f64> {
    let p = x.ncols();
    let mut meat = DMatrix::<f64>::zeros(p, p);
    match mode {
        SeMode::Hc1 => {
            for i in 0..d.n() {
                let s = d.w[i] * resid[i];
                let row = x.row(i);
                meat += (row.transpose() * row) * (s * s);
            }
        }
        SeMode::ClusterByUnit => {
            let mut scores = DMatrix::<f64>::zeros(d.units.len(), p);
            for i in 0..d.n() {
                let s = d.w[i] * resid[i];
                let mut g = scores.row_mut(d.unit[i]);
                g += x.row(i) * s;
            }
            meat = scores.transpose() * &scores;
        }
    }
    bread * meat * bread * factor
}

/// Coefficients, covariance and residuals of one least-squares problem.
struct LsFit {
    beta: Vec<f64>,
    cov: DMatrix<f64>,
    resid: Vec<f64>,
    fitted_fx: Option<(Vec<f64>, Vec<f64>)>,
    sweeps: usize,
    max_score: f64,
}

fn solve_demeaned(d: &Design, names: &[String], cols: &[Vec<f64>], spec: &EventStudySpec) -> Result<LsFit> {
    let k = cols.len();
    let n = d.n();
    let dy = demean(&d.y, d, spec.tolerance, spec.max_sweeps)?;
    let mut sweeps = dy.sweeps;
    let mut x = DMatrix::<f64>::zeros(n, k);
    let mut raw_norms = vec![0.0; k];
    for (j, col) in cols.iter().enumerate() {
        let dc = demean(col, d, spec.tolerance, spec.max_sweeps)?;
        sweeps = sweeps.max(dc.sweeps);
        raw_norms[j] = col.iter().zip(&d.w).map(|(v, w)| w * v * v).sum();
        for i in 0..n {
            x[(i, j)] = dc.values[i];
        }
    }
    let mut gram = DMatrix::<f64>::zeros(k, k);
    let mut rhs = DVector::<f64>::zeros(k);
    for i in 0..n {
        let w = d.w[i];
        for a in 0..k {
            let xa = w * x[(i, a)];
            rhs[a] += xa * dy.values[i];
            for b in 0..=a {
                gram[(a, b)] += xa * x[(i, b)];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            gram[(b, a)] = gram[(a, b)];
        }
    }
    check_rank(&gram, &raw_norms, names)?;
    let chol = gram
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("Gram matrix not positive definite".into()))?;
    let beta = chol.solve(&rhs);
    let bread = chol.inverse();
    let resid: Vec<f64> = (0..n)
        .map(|i| dy.values[i] - (0..k).map(|j| x[(i, j)] * beta[j]).sum::<f64>())
        .collect();
    let max_score = (0..k)
        .map(|j| (0..n).map(|i| d.w[i] * x[(i, j)] * resid[i]).sum::<f64>().abs())
        .fold(0.0, f64::max);
    let factor = small_sample_factor(spec.se_mode, n, k, d.units.len(), d.periods.len());
    let cov = sandwich(&x, &resid, d, &bread, spec.se_mode, factor);

    // fixed effects of y - X beta, normalised so the first period is zero
    let partial: Vec<f64> = (0..n)
        .map(|i| d.y[i] - cols.iter().zip(beta.iter()).map(|(c, b)| c[i] * b).sum::<f64>())
        .collect();
    let fx = demean(&partial, d, spec.tolerance, spec.max_sweeps)?;
    let shift = fx.period_fx[0];
    let unit_fx = fx.unit_fx.iter().map(|u| u + shift).collect();
    let period_fx = fx.period_fx.iter().map(|p| p - shift).collect();

    Ok(LsFit {
        beta: beta.iter().copied().collect(),
        cov,
        resid,
        fitted_fx: Some((unit_fx, period_fx)),
        sweeps,
        max_score,
    })
}

fn solve_dummies(d: &Design, names: &[String], cols: &[Vec<f64>], spec: &EventStudySpec) -> Result<LsFit> {
    let k = cols.len();
    let n = d.n();
    let nu = d.units.len();
    let np = d.periods.len();
    let p = k + nu + np - 1;
    if n < p {
        return Err(Error::Singular(format!("{n} observations for {p} parameters")));
    }
    let mut x = DMatrix::<f64>::zeros(n, p);
    for i in 0..n {
        for (j, c) in cols.iter().enumerate() {
            x[(i, j)] = c[i];
        }
        x[(i, k + d.unit[i])] = 1.0;
        if d.period[i] > 0 {
            x[(i, k + nu + d.period[i] - 1)] = 1.0;
        }
    }
    let sw: Vec<f64> = d.w.iter().map(|w| w.sqrt()).collect();
    let mut xw = x.clone();
    let mut yw = DVector::<f64>::zeros(n);
    for i in 0..n {
        let mut row = xw.row_mut(i);
        row *= sw[i];
        yw[i] = d.y[i] * sw[i];
    }
    let qr = xw.clone().qr();
    let r = qr.r();
    let rmax = (0..p).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
    let bad: Vec<String> = (0..p)
        .filter(|&j| r[(j, j)].abs() <= 1e-10 * rmax)
        .map(|j| {
            if j < k {
                names[j].clone()
            } else if j < k + nu {
                format!("unit {}", d.units[j - k])
            } else {
                format!("period {}", d.periods[j - k - nu + 1])
            }
        })
        .collect();
    if !bad.is_empty() {
        return Err(Error::Singular(format!("collinear terms: {}", bad.join(", "))));
    }
    let qty = qr.q().transpose() * &yw;
    let coef = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::Singular("triangular solve failed".into()))?;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .ok_or_else(|| Error::Singular("triangular inverse failed".into()))?;
    let bread = &r_inv * r_inv.transpose();
    let fitted = &x * &coef;
    let resid: Vec<f64> = (0..n).map(|i| d.y[i] - fitted[i]).collect();
    let max_score = (0..k)
        .map(|j| (0..n).map(|i| d.w[i] * x[(i, j)] * resid[i]).sum::<f64>().abs())
        .fold(0.0, f64::max);
    let factor = small_sample_factor(spec.se_mode, n, k, nu, np);
    let cov_full = sandwich(&x, &resid, d, &bread, spec.se_mode, factor);
    let cov = cov_full.view((0, 0), (k, k)).into_owned();
    let unit_fx = (0..nu).map(|u| coef[k + u]).collect();
    let period_fx = (0..np).map(|t| if t == 0 { 0.0 } else { coef[k + nu + t - 1] }).collect();
    Ok(LsFit {
        beta: coef.iter().take(k).copied().collect(),
        cov,
        resid,
        fitted_fx: Some((unit_fx, period_fx)),
        sweeps: 0,
        max_score,
    })
}

fn solve(d: &Design, names: &[String], cols: &[Vec<f64>], spec: &EventStudySpec) -> Result<LsFit> {
    match spec.solver {
        Solver::Demeaning => solve_demeaned(d, names, cols, spec),
        Solver::DummyOls => solve_dummies(d, names, cols, spec),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PooledEffect {
    pub beta: f64,
    pub se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub solver: Solver,
    pub sweeps: usize,
    /// Largest |X' W e| over the event-time regressors.
    pub max_abs_score: f64,
    pub max_abs_unit_resid_mean: f64,
    pub max_abs_period_resid_mean: f64,
}

#[derive(Clone, Debug)]
pub struct EventStudyFit {
    pub spec: EventStudySpec,
    /// Periods carrying a coefficient, in order (base period absent).
    pub terms: Vec<Month>,
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    pub cov: DMatrix<f64>,
    pub pooled: PooledEffect,
    /// First period with `cable = 1`.
    pub opening: Month,
    pub residuals: Vec<f64>,
    pub unit_effects: Vec<(HexId, f64)>,
    pub time_effects: Vec<(Month, f64)>,
    pub n_obs: usize,
    pub n_units: usize,
    pub n_periods: usize,
    pub dof: i64,
    pub diagnostics: SolverDiagnostics,
    design: Arc<Design>,
}

impl EventStudyFit {
    pub fn beta_at(&self, month: Month) -> Option<f64> {
        self.terms.iter().position(|&m| m == month).map(|i| self.beta[i])
    }

    pub fn se_at(&self, month: Month) -> Option<f64> {
        self.terms.iter().position(|&m| m == month).map(|i| self.se[i])
    }

    pub fn pooled_post_beta(&self) -> f64 {
        self.pooled.beta
    }

    /// Fitted value `sum beta D + unit + period` of every observation, in
    /// panel order.
    pub fn fitted(&self) -> Vec<f64> {
        let d = &self.design;
        let (_, terms, cols) = d.event_columns(self.spec.base_period);
        debug_assert_eq!(terms, self.terms);
        (0..d.n())
            .map(|i| {
                cols.iter().zip(&self.beta).map(|(c, b)| c[i] * b).sum::<f64>()
                    + self.unit_effects[d.unit[i]].1
                    + self.time_effects[d.period[i]].1
            })
            .collect()
    }

    pub fn observed(&self) -> &[f64] {
        &self.design.y
    }
}

/// Fits the event-study model; `panel` order defines residual order.
pub fn fit_event_study(panel: &[PanelCell], spec: &EventStudySpec) -> Result<EventStudyFit> {
    let design = Design::new(panel, spec)?;
    let opening = design
        .first_cable_period()
        .ok_or_else(|| Error::Estimation("no cell has cable = 1".into()))?;
    let (names, terms, cols) = design.event_columns(spec.base_period);
    let fit = solve(&design, &names, &cols, spec)?;
    let se: Vec<f64> = (0..terms.len()).map(|j| fit.cov[(j, j)].sqrt()).collect();

    let pooled = pooled_on(&design, spec, opening)?;

    let (unit_fx, period_fx) = fit.fitted_fx.expect("fixed effects recovered");
    let mut unit_sum = vec![0.0; design.units.len()];
    let mut unit_w = vec![0.0; design.units.len()];
    let mut period_sum = vec![0.0; design.periods.len()];
    let mut period_w = vec![0.0; design.periods.len()];
    for i in 0..design.n() {
        unit_sum[design.unit[i]] += design.w[i] * fit.resid[i];
        unit_w[design.unit[i]] += design.w[i];
        period_sum[design.period[i]] += design.w[i] * fit.resid[i];
        period_w[design.period[i]] += design.w[i];
    }
    let max_mean = |s: &[f64], w: &[f64]| s.iter().zip(w).map(|(a, b)| (a / b).abs()).fold(0.0, f64::max);
    let n_params = terms.len() + design.units.len() + design.periods.len() - 1;

    Ok(EventStudyFit {
        spec: spec.clone(),
        beta: fit.beta,
        se,
        cov: fit.cov,
        pooled,
        opening,
        unit_effects: design.units.iter().copied().zip(unit_fx).collect(),
        time_effects: design.periods.iter().copied().zip(period_fx).collect(),
        n_obs: design.n(),
        n_units: design.units.len(),
        n_periods: design.periods.len(),
        dof: design.n() as i64 - n_params as i64,
        diagnostics: SolverDiagnostics {
            solver: spec.solver,
            sweeps: fit.sweeps,
            max_abs_score: fit.max_score,
            max_abs_unit_resid_mean: max_mean(&unit_sum, &unit_w),
            max_abs_period_resid_mean: max_mean(&period_sum, &period_w),
        },
        residuals: fit.resid,
        terms,
        design: Arc::new(design),
    })
}

fn pooled_on(design: &Design, spec: &EventStudySpec, opening: Month) -> Result<PooledEffect> {
    if !design.periods.iter().any(|&p| p >= opening) {
        return Err(Error::Estimation(format!("no period at or after opening {opening}")));
    }
    let col = design.post_column(opening);
    let fit = solve(design, &[format!("treated x post {opening}")], &[col], spec)?;
    Ok(PooledEffect {
        beta: fit.beta[0],
        se: fit.cov[(0, 0)].sqrt(),
    })
}

/// Average post-opening effect: the same model with a single
/// treated-and-post dummy in place of the event-time dummies.
pub fn pooled_att(fit: &EventStudyFit, opening: Month) -> Result<PooledEffect> {
    pooled_on(&fit.design, &fit.spec, opening)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaldTest {
    pub stat: f64,
    pub df: usize,
    pub p: f64,
}

/// Joint Wald test that every pre-opening coefficient is zero.
pub fn pretrend_test(fit: &EventStudyFit) -> Result<WaldTest> {
    let pre: Vec<usize> = (0..fit.terms.len()).filter(|&j| fit.terms[j] < fit.opening).collect();
    if pre.is_empty() {
        return Err(Error::Estimation("no pre-period coefficient besides the base".into()));
    }
    let q = pre.len();
    let b = DVector::from_iterator(q, pre.iter().map(|&j| fit.beta[j]));
    if b.iter().all(|&v| v == 0.0) {
        return Ok(WaldTest { stat: 0.0, df: q, p: 1.0 });
    }
    let v = DMatrix::from_fn(q, q, |a, c| fit.cov[(pre[a], pre[c])]);
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Estimation("covariance is undefined (no residual degrees of freedom)".into()));
    }
    let chol = v
        .cholesky()
        .ok_or_else(|| Error::Singular("pre-period covariance is singular".into()))?;
    let stat = b.dot(&chol.solve(&b));
    let dist = ChiSquared::new(q as f64).map_err(|e| Error::Estimation(e.to_string()))?;
    Ok(WaldTest {
        stat,
        df: q,
        p: dist.sf(stat),
    })
}

// ---------------------------------------------------------------------------
// Serialised results
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeriodRow {
    pub month: Month,
    pub beta: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

impl PeriodRow {
    pub fn excludes_zero(&self) -> bool {
        self.ci_lo > 0.0 || self.ci_hi < 0.0
    }
}

/// Machine-readable fit output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub outcome: String,
    pub base_period: Month,
    pub opening: Month,
    pub se_mode: SeMode,
    pub weighted: bool,
    pub periods: Vec<PeriodRow>,
    pub pooled: PooledEffect,
    pub pretrend: Option<WaldTest>,
    pub n_obs: usize,
    pub n_units: usize,
    pub n_periods: usize,
    pub dof: i64,
    pub diagnostics: SolverDiagnostics,
}

impl FitReport {
    pub fn new(outcome: &str, fit: &EventStudyFit) -> Self {
        let periods = fit
            .terms
            .iter()
            .zip(fit.beta.iter().zip(&fit.se))
            .map(|(&month, (&beta, &se))| PeriodRow {
                month,
                beta,
                se,
                ci_lo: beta - Z_95 * se,
                ci_hi: beta + Z_95 * se,
            })
            .collect();
        Self {
            outcome: outcome.to_owned(),
            base_period: fit.spec.base_period,
            opening: fit.opening,
            se_mode: fit.spec.se_mode,
            weighted: fit.spec.weighted,
            periods,
            pooled: fit.pooled,
            pretrend: pretrend_test(fit).ok(),
            n_obs: fit.n_obs,
            n_units: fit.n_units,
            n_periods: fit.n_periods,
            dof: fit.dof,
            diagnostics: fit.diagnostics.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(s: &str) -> Month {
        s.parse().unwrap()
    }

    fn cell(u: i32, month: Month, y: f64, cable: bool) -> PanelCell {
        PanelCell {
            hex_id: HexId { q: u, r: 0 },
            month,
            y,
            n_devices: 1,
            cable,
        }
    }

    #[test]
    fn two_by_two_did_is_exact() {
        let (pre, post) = (m("2018-11"), m("2018-12"));
        let delta = 3.25;
        let panel = vec![
            cell(0, pre, 1.0, false),
            cell(0, post, 2.0, false),
            cell(1, pre, 1.0, false),
            cell(1, post, 2.0 + delta, true),
        ];
        for solver in [Solver::Demeaning, Solver::DummyOls] {
            let mut spec = EventStudySpec::new(pre);
            spec.solver = solver;
            let fit = fit_event_study(&panel, &spec).unwrap();
            assert_eq!(fit.terms, vec![post]);
            assert!((fit.beta[0] - delta).abs() < 1e-12, "{solver:?}: {}", fit.beta[0]);
            assert!((fit.pooled.beta - delta).abs() < 1e-12);
        }
    }

    #[test]
    fn all_units_treated_is_singular() {
        let panel = vec![
            cell(0, m("2018-11"), 1.0, false),
            cell(0, m("2018-12"), 2.0, true),
            cell(1, m("2018-11"), 1.0, false),
            cell(1, m("2018-12"), 2.0, true),
        ];
        let err = fit_event_study(&panel, &EventStudySpec::new(m("2018-11"))).unwrap_err();
        assert!(matches!(err, Error::Singular(_)));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn missing_treated_period_names_the_term() {
        // treated unit absent in 2018-10: that dummy is all zero
        let panel = vec![
            cell(0, m("2018-10"), 1.0, false),
            cell(0, m("2018-11"), 1.5, false),
            cell(0, m("2018-12"), 2.0, false),
            cell(2, m("2018-10"), 0.3, false),
            cell(2, m("2018-11"), 1.0, false),
            cell(2, m("2018-12"), 1.1, false),
            cell(1, m("2018-11"), 1.0, false),
            cell(1, m("2018-12"), 3.0, true),
        ];
        match fit_event_study(&panel, &EventStudySpec::new(m("2018-11"))) {
            Err(Error::Singular(msg)) => assert!(msg.contains("2018-10"), "{msg}"),
            other => panic!("expected singular, got {other:?}"),
        }
    }

    #[test]
    fn base_period_must_exist() {
        let panel = vec![cell(0, m("2018-11"), 1.0, false), cell(1, m("2018-12"), 1.0, true)];
        assert!(fit_event_study(&panel, &EventStudySpec::new(m("2018-09"))).is_err());
    }

    #[test]
    fn zero_effect_additive_panel() {
        let months: Vec<Month> = Month::range(m("2018-07"), m("2019-06")).collect();
        let mut panel = Vec::new();
        for u in 0..6 {
            for (t, &mo) in months.iter().enumerate() {
                let y = 3.0 * u as f64 + (t as f64).sin() * 5.0;
                panel.push(cell(u, mo, y, u >= 3 && mo >= m("2018-12")));
            }
        }
        let fit = fit_event_study(&panel, &EventStudySpec::new(m("2018-11"))).unwrap();
        assert!(fit.beta.iter().all(|b| b.abs() < 1e-8));
        assert!(fit.pooled.beta.abs() < 1e-8);
        // exact fit: zero residuals leave no covariance to invert
        assert!(matches!(pretrend_test(&fit), Err(Error::Singular(_))));
    }

    #[test]
    fn exact_zero_pre_coefficients_give_p_one() {
        let months: Vec<Month> = Month::range(m("2018-09"), m("2019-01")).collect();
        let mut panel = Vec::new();
        for u in 0..4 {
            for &mo in &months {
                let treated = u >= 2;
                let y = u as f64 + if treated && mo >= m("2018-12") { 2.0 } else { 0.0 };
                panel.push(cell(u, mo, y, treated && mo >= m("2018-12")));
            }
        }
        let mut fit = fit_event_study(&panel, &EventStudySpec::new(m("2018-11"))).unwrap();
        for j in 0..fit.terms.len() {
            if fit.terms[j] < fit.opening {
                fit.beta[j] = 0.0;
            }
        }
        let w = pretrend_test(&fit).unwrap();
        assert_eq!((w.stat, w.p), (0.0, 1.0));
    }

    #[test]
    fn se_mode_and_solver_parse() {
        assert_eq!("hc1".parse::<SeMode>().unwrap(), SeMode::Hc1);
        assert_eq!("cluster".parse::<SeMode>().unwrap(), SeMode::ClusterByUnit);
        assert!("robust".parse::<SeMode>().is_err());
    }
}
