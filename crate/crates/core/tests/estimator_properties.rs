mod common;

use std::collections::BTreeSet;

use common::*;
use mobiscope::estimator::{fit_event_study, pretrend_test, EventStudySpec, SeMode, Solver};
use mobiscope::geo::HexId;
use mobiscope::panel::PanelCell;
use mobiscope::Error;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn spec_for(panel: &RandomPanel) -> EventStudySpec {
    let mut spec = EventStudySpec::new(panel.base);
    spec.treated_units = Some(panel.treated.clone());
    spec
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// Balanced panel of `units` hexes over `periods` months; hexes with odd q
/// are treated from `opening` on. `effect(k)` is added to treated cells in
/// period k.
fn balanced(units: i32, periods: i32, opening: i32, effect: impl Fn(i32) -> f64, seed: u64) -> (Vec<PanelCell>, BTreeSet<HexId>) {
    use rand::Rng;
    let mut g = rng(seed);
    let start = month("2018-07");
    let mut cells = Vec::new();
    let mut treated = BTreeSet::new();
    for u in 0..units {
        let hex = HexId { q: u, r: 0 };
        let is_treated = u % 2 == 1;
        if is_treated {
            treated.insert(hex);
        }
        let fx = g.random_range(80.0..120.0);
        for k in 0..periods {
            cells.push(PanelCell {
                hex_id: hex,
                month: start.offset(k),
                y: fx + k as f64 * 0.3 + if is_treated { effect(k) } else { 0.0 } + g.random_range(-4.0..4.0),
                n_devices: g.random_range(1..9),
                cable: is_treated && k >= opening,
            });
        }
    }
    (cells, treated)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn demeaning_equals_dummy_ols(seed in any::<u64>(), weighted in any::<bool>(), hc1 in any::<bool>()) {
        let panel = random_panel(seed, 40, 9);
        let mut spec = spec_for(&panel);
        spec.weighted = weighted;
        spec.se_mode = if hc1 { SeMode::Hc1 } else { SeMode::ClusterByUnit };
        let a = fit_event_study(&panel.cells, &spec).unwrap();
        spec.solver = Solver::DummyOls;
        let b = fit_event_study(&panel.cells, &spec).unwrap();
        prop_assert!(max_rel(&a.beta, &b.beta) <= 1e-8);
        prop_assert!(max_rel(&a.se, &b.se) <= 1e-8);
        prop_assert!((a.pooled.beta - b.pooled.beta).abs() <= 1e-8 * b.pooled.beta.abs().max(1.0));
        let oracle: Vec<f64> = dummy_ols_betas(&panel, weighted).into_iter().map(|(_, b)| b).collect();
        prop_assert!(max_rel(&a.beta, &oracle) <= 1e-8);
    }

    #[test]
    fn shift_and_scale(seed in any::<u64>(), shift in -1e3f64..1e3, scale in -20.0f64..20.0) {
        prop_assume!(scale.abs() > 0.05);
        let panel = random_panel(seed, 30, 8);
        let spec = spec_for(&panel);
        let base = fit_event_study(&panel.cells, &spec).unwrap();
        let moved: Vec<PanelCell> = panel.cells.iter().map(|c| PanelCell { y: c.y + shift, ..c.clone() }).collect();
        let shifted = fit_event_study(&moved, &spec).unwrap();
        prop_assert!(max_rel(&shifted.beta, &base.beta) <= 1e-8);
        let scaled: Vec<PanelCell> = panel.cells.iter().map(|c| PanelCell { y: c.y * scale, ..c.clone() }).collect();
        let scaled = fit_event_study(&scaled, &spec).unwrap();
        let expect: Vec<f64> = base.beta.iter().map(|b| b * scale).collect();
        prop_assert!(max_rel(&scaled.beta, &expect) <= 1e-8);
        let expect_se: Vec<f64> = base.se.iter().map(|s| s * scale.abs()).collect();
        prop_assert!(max_rel(&scaled.se, &expect_se) <= 1e-8);
    }

    #[test]
    fn changing_the_base_shifts_every_beta(seed in any::<u64>()) {
        let panel = random_panel(seed, 30, 8);
        let a = fit_event_study(&panel.cells, &spec_for(&panel)).unwrap();
        let months: Vec<_> = panel.cells.iter().map(|c| c.month).collect::<BTreeSet<_>>().into_iter().collect();
        let other = *months.iter().find(|&&m| m != panel.base).unwrap();
        let mut spec = spec_for(&panel);
        spec.base_period = other;
        let b = fit_event_study(&panel.cells, &spec).unwrap();
        // beta_t(other base) = beta_t(base) - beta_other(base), with beta_base = 0
        let at = |fit: &mobiscope::estimator::EventStudyFit, m| fit.beta_at(m).unwrap_or(0.0);
        let offset = at(&a, other);
        for &m in &months {
            prop_assert!((at(&b, m) - (at(&a, m) - offset)).abs() <= 1e-8 * (1.0 + offset.abs()));
        }
    }

    #[test]
    fn residuals_are_orthogonal_and_fit_reproduces_y(seed in any::<u64>(), weighted in any::<bool>()) {
        let panel = random_panel(seed, 40, 10);
        let mut spec = spec_for(&panel);
        spec.weighted = weighted;
        let fit = fit_event_study(&panel.cells, &spec).unwrap();
        let scale = panel.cells.iter().fold(0.0f64, |m, c| m.max(c.y.abs()));
        let d = &fit.diagnostics;
        prop_assert!(d.max_abs_unit_resid_mean <= 1e-10 * scale);
        prop_assert!(d.max_abs_period_resid_mean <= 1e-10 * scale);
        prop_assert!(d.max_abs_score <= 1e-8 * scale * panel.cells.len() as f64);
        let fitted = fit.fitted();
        for ((f, e), y) in fitted.iter().zip(&fit.residuals).zip(fit.observed()) {
            prop_assert!((f + e - y).abs() <= 1e-9 * scale);
        }
    }
}

#[test]
fn balanced_beta_is_raw_difference_in_means() {
    let (cells, treated) = balanced(10, 8, 4, |k| k as f64, 3);
    let base = month("2018-10");
    let mut spec = EventStudySpec::new(base);
    spec.treated_units = Some(treated.clone());
    let fit = fit_event_study(&cells, &spec).unwrap();
    let gap = |m| {
        let mean = |t: bool| {
            let ys: Vec<f64> = cells
                .iter()
                .filter(|c| c.month == m && treated.contains(&c.hex_id) == t)
                .map(|c| c.y)
                .collect();
            ys.iter().sum::<f64>() / ys.len() as f64
        };
        mean(true) - mean(false)
    };
    for (k, &m) in fit.terms.iter().enumerate() {
        let raw = gap(m) - gap(base);
        assert!((fit.beta[k] - raw).abs() <= 1e-10, "{m}: {} vs {raw}", fit.beta[k]);
    }
}

#[test]
fn heterogeneous_effects_pool_like_single_dummy_ols() {
    let effects = [0.0, 0.0, 5.0, 6.0, 7.0, 7.0, 7.0, 7.0];
    let (cells, treated) = balanced(12, 8, 2, |k| effects[k as usize], 11);
    let mut spec = EventStudySpec::new(month("2018-08"));
    spec.treated_units = Some(treated.clone());
    let fit = fit_event_study(&cells, &spec).unwrap();

    // y on [cable, unit dummies, period dummies but the first]
    let units: Vec<HexId> = cells.iter().map(|c| c.hex_id).collect::<BTreeSet<_>>().into_iter().collect();
    let months: Vec<_> = cells.iter().map(|c| c.month).collect::<BTreeSet<_>>().into_iter().collect();
    let p = 1 + units.len() + months.len() - 1;
    let mut x = DMatrix::zeros(cells.len(), p);
    let mut y = DVector::zeros(cells.len());
    for (i, c) in cells.iter().enumerate() {
        x[(i, 0)] = c.cable as u8 as f64;
        x[(i, 1 + units.iter().position(|&u| u == c.hex_id).unwrap())] = 1.0;
        let t = months.iter().position(|&m| m == c.month).unwrap();
        if t > 0 {
            x[(i, units.len() + t)] = 1.0;
        }
        y[i] = c.y;
    }
    let b = least_squares(&x, &y);
    assert!((fit.pooled.beta - b[0]).abs() <= 1e-8 * b[0].abs(), "{} vs {}", fit.pooled.beta, b[0]);
}

#[test]
fn constant_effect_pools_to_that_constant_and_zero_to_zero() {
    let exact = |c: f64| {
        let mut cells = Vec::new();
        let mut treated = BTreeSet::new();
        for u in 0..6 {
            let hex = HexId { q: u, r: 1 };
            if u >= 3 {
                treated.insert(hex);
            }
            for k in 0..6 {
                let post = u >= 3 && k >= 3;
                cells.push(PanelCell {
                    hex_id: hex,
                    month: month("2019-01").offset(k),
                    y: 10.0 * u as f64 + [0.0, 2.0, -1.0, 4.0, 3.0, 0.5][k as usize] + if post { c } else { 0.0 },
                    n_devices: 1,
                    cable: post,
                });
            }
        }
        let mut spec = EventStudySpec::new(month("2019-03"));
        spec.treated_units = Some(treated);
        fit_event_study(&cells, &spec).unwrap().pooled.beta
    };
    assert!((exact(2.5) - 2.5).abs() <= 1e-8);
    assert!(exact(0.0).abs() <= 1e-8);
}

#[test]
fn one_pre_period_wald_is_t_squared() {
    let (cells, treated) = balanced(14, 5, 2, |k| [0.0, 0.0, 3.0, 3.0, 3.0][k as usize], 5);
    let mut spec = EventStudySpec::new(month("2018-08"));
    spec.treated_units = Some(treated);
    let fit = fit_event_study(&cells, &spec).unwrap();
    let w = pretrend_test(&fit).unwrap();
    let pre = month("2018-07");
    let t = fit.beta_at(pre).unwrap() / fit.se_at(pre).unwrap();
    assert_eq!(w.df, 1);
    assert!((w.stat - t * t).abs() <= 1e-10 * (1.0 + t * t));
}

#[test]
fn no_pre_period_is_an_error() {
    let (cells, treated) = balanced(6, 3, 1, |_| 1.0, 9);
    let mut spec = EventStudySpec::new(month("2018-07"));
    spec.treated_units = Some(treated);
    let fit = fit_event_study(&cells, &spec).unwrap();
    assert!(pretrend_test(&fit).is_err());
}

/// Sandwich SEs computed from an explicit dummy design.
fn dense_se(cells: &[PanelCell], treated: &BTreeSet<HexId>, base: mobiscope::time::Month, weighted: bool, cluster: bool) -> Vec<f64> {
    let units: Vec<HexId> = cells.iter().map(|c| c.hex_id).collect::<BTreeSet<_>>().into_iter().collect();
    let months: Vec<_> = cells.iter().map(|c| c.month).collect::<BTreeSet<_>>().into_iter().collect();
    let terms: Vec<_> = months.iter().copied().filter(|&m| m != base).collect();
    let k = terms.len();
    let p = k + units.len() + months.len() - 1;
    let n = cells.len();
    let mut x = DMatrix::zeros(n, p);
    let mut y = DVector::zeros(n);
    for (i, c) in cells.iter().enumerate() {
        let w = if weighted { (c.n_devices as f64).sqrt() } else { 1.0 };
        if treated.contains(&c.hex_id) {
            if let Some(j) = terms.iter().position(|&m| m == c.month) {
                x[(i, j)] = w;
            }
        }
        x[(i, k + units.iter().position(|&u| u == c.hex_id).unwrap())] = w;
        let t = months.iter().position(|&m| m == c.month).unwrap();
        if t > 0 {
            x[(i, k + units.len() + t - 1)] = w;
        }
        y[i] = w * c.y;
    }
    let b = least_squares(&x, &y);
    let e = &y - &x * b;
    let bread = (x.transpose() * &x).try_inverse().unwrap();
    let mut meat = DMatrix::zeros(p, p);
    let factor = if cluster {
        for u in &units {
            let mut s = DVector::zeros(p);
            for (i, c) in cells.iter().enumerate() {
                if c.hex_id == *u {
                    s += x.row(i).transpose() * e[i];
                }
            }
            meat += &s * s.transpose();
        }
        let g = units.len() as f64;
        let kk = (k + months.len() - 1) as f64;
        g / (g - 1.0) * (n as f64 - 1.0) / (n as f64 - kk)
    } else {
        for i in 0..n {
            let r = x.row(i).transpose();
            meat += &r * r.transpose() * (e[i] * e[i]);
        }
        n as f64 / (n - p) as f64
    };
    let v = &bread * meat * &bread * factor;
    (0..k).map(|j| v[(j, j)].sqrt()).collect()
}

#[test]
fn sandwich_standard_errors_match_dense_computation() {
    for seed in 0..12 {
        let panel = random_panel(seed, 25, 7);
        for (weighted, cluster) in [(false, false), (false, true), (true, false), (true, true)] {
            let mut spec = spec_for(&panel);
            spec.weighted = weighted;
            spec.se_mode = if cluster { SeMode::ClusterByUnit } else { SeMode::Hc1 };
            let fit = fit_event_study(&panel.cells, &spec).unwrap();
            let want = dense_se(&panel.cells, &panel.treated, panel.base, weighted, cluster);
            assert!(
                max_rel(&fit.se, &want) <= 1e-8,
                "seed {seed} weighted {weighted} cluster {cluster}: {:?} vs {want:?}",
                fit.se
            );
        }
    }
}

#[test]
fn duplicate_cells_are_rejected() {
    let panel = random_panel(1, 6, 4);
    let mut cells = panel.cells.clone();
    cells.push(cells[0].clone());
    assert!(matches!(fit_event_study(&cells, &spec_for(&panel)), Err(Error::InvalidInput(_))));
}
