//! Independent reference implementations and fixture builders shared by the
//! integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::sync::Arc;

use mobiscope::geo::{geodesic_distance, GeoPoint, HexId};
use mobiscope::ingest::Ping;
use mobiscope::panel::PanelCell;
use mobiscope::stays::{Poi, StayParams};
use mobiscope::time::Month;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn ping(dev: &Arc<str>, t: i64, loc: GeoPoint) -> Ping {
    Ping {
        device_id: dev.clone(),
        t,
        loc,
        accuracy_m: None,
    }
}

/// Great-circle distance written out from the haversine formula, kept apart
/// from the library's version.
pub fn haversine_m(a: GeoPoint, b: GeoPoint) -> f64 {
    const R: f64 = 6_371_000.0;
    let (p1, p2) = (a.lat().to_radians(), b.lat().to_radians());
    let dp = p2 - p1;
    let dl = (b.lon() - a.lon()).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * R * h.sqrt().min(1.0).asin()
}

// ---------------------------------------------------------------------------
// Stays
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct RefStay {
    pub first: usize,
    pub last: usize,
    pub start: i64,
    pub end: i64,
    pub centroid: GeoPoint,
}

fn centroid_of(pings: &[Ping]) -> GeoPoint {
    let mut lat = 0.0;
    let mut lon = 0.0;
    for p in pings {
        lat += p.loc.lat();
        lon += p.loc.lon();
    }
    let n = pings.len() as f64;
    GeoPoint::new(lat / n, lon / n).unwrap()
}

/// Quadratic reference for the greedy stay rule: a ping joins the open
/// candidate when the span stays within the maximum duration, the ping is
/// within the radius of the current centroid, and every member (the new
/// ping included) is within the radius of the recomputed centroid. Each
/// test recomputes the centroid and all member distances from scratch.
pub fn reference_stays(pings: &[Ping], params: &StayParams) -> Vec<RefStay> {
    let mut out = Vec::new();
    if pings.is_empty() {
        return out;
    }
    let r = params.radius_m;
    let mut first = 0;
    for i in 1..pings.len() {
        let current = centroid_of(&pings[first..i]);
        let next = centroid_of(&pings[first..=i]);
        let joins = pings[i].t - pings[first].t <= params.max_duration_s
            && geodesic_distance(pings[i].loc, current) <= r
            && pings[first..=i].iter().all(|q| geodesic_distance(q.loc, next) <= r);
        if !joins {
            close(pings, first, i - 1, params, &mut out);
            first = i;
        }
    }
    close(pings, first, pings.len() - 1, params, &mut out);
    out
}

fn close(pings: &[Ping], first: usize, last: usize, params: &StayParams, out: &mut Vec<RefStay>) {
    let (start, end) = (pings[first].t, pings[last].t);
    if end - start < params.min_duration_s || end - start > params.max_duration_s {
        return;
    }
    out.push(RefStay {
        first,
        last,
        start,
        end,
        centroid: centroid_of(&pings[first..=last]),
    });
}

/// Random time-ordered trace mixing dwells of varied spread, travel legs,
/// long gaps, repeated timestamps and multi-day dwells.
pub fn random_trace(seed: u64, dev: &Arc<str>) -> Vec<Ping> {
    let mut g = rng(seed);
    let n = g.random_range(1..=500);
    let mut here = GeoPoint::new(4.6 + g.random_range(-0.05..0.05), -74.1 + g.random_range(-0.05..0.05)).unwrap();
    let mut t: i64 = 1_533_081_600 + g.random_range(0..86_400);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        match g.random_range(0..10) {
            0..=5 => {
                let spread = [5.0, 30.0, 60.0, 90.0, 140.0][g.random_range(0..5)];
                let step = [20, 60, 240, 900, 3_600, 7_200][g.random_range(0..6)];
                for _ in 0..g.random_range(1..40) {
                    if out.len() == n {
                        break;
                    }
                    let p = here.destination(g.random_range(0.0..360.0), g.random_range(0.0..spread));
                    out.push(ping(dev, t, p));
                    t += if g.random_bool(0.1) { 0 } else { g.random_range(1..=step) };
                }
            }
            6 | 7 => {
                let bearing = g.random_range(0.0..360.0);
                for _ in 0..g.random_range(1..15) {
                    if out.len() == n {
                        break;
                    }
                    here = here.destination(bearing, g.random_range(10.0..400.0));
                    out.push(ping(dev, t, here));
                    t += g.random_range(30..600);
                }
            }
            8 => t += g.random_range(3_600..40 * 3_600),
            _ => {
                here = here.destination(g.random_range(0.0..360.0), g.random_range(100.0..5_000.0));
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// POIs
// ---------------------------------------------------------------------------

/// Linear scan: nearest POI within `radius_m`, ties to the smaller id.
pub fn linear_scan_poi(pois: &[Poi], p: GeoPoint, radius_m: f64) -> Option<&Poi> {
    pois.iter()
        .map(|q| (geodesic_distance(p, q.loc), q))
        .filter(|(d, _)| *d <= radius_m)
        .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.poi_id.cmp(&b.1.poi_id)))
        .map(|(_, q)| q)
}

// ---------------------------------------------------------------------------
// Panels
// ---------------------------------------------------------------------------

pub fn month(s: &str) -> Month {
    s.parse().unwrap()
}

pub struct RandomPanel {
    pub cells: Vec<PanelCell>,
    pub treated: BTreeSet<HexId>,
    pub base: Month,
    pub opening: Month,
}

/// Unbalanced panel with unit and period effects, a treatment path and
/// noise. The first control and first treated unit are complete so every
/// event term is identified.
pub fn random_panel(seed: u64, max_units: usize, max_periods: usize) -> RandomPanel {
    let mut g = rng(seed);
    let units = g.random_range(4..=max_units);
    let periods = g.random_range(3..=max_periods) as i32;
    let start = month("2018-01");
    let opening = start.offset(g.random_range(1..periods));
    let base = opening.pred();
    let drop = g.random_range(0.0..0.3);
    let period_fx: Vec<f64> = (0..periods).map(|_| g.random_range(-5.0..5.0)).collect();
    let mut cells = Vec::new();
    let mut treated = BTreeSet::new();
    for u in 0..units {
        let hex = HexId { q: u as i32, r: -(u as i32) / 2 };
        let is_treated = u == 1 || (u > 1 && g.random_bool(0.4));
        if is_treated {
            treated.insert(hex);
        }
        let unit_fx = g.random_range(50.0..150.0);
        for k in 0..periods {
            if u > 1 && g.random_bool(drop) {
                continue;
            }
            let m = start.offset(k);
            let cable = is_treated && m >= opening;
            let effect = if is_treated { (k as f64 - base.since(start) as f64) * 0.7 } else { 0.0 };
            cells.push(PanelCell {
                hex_id: hex,
                month: m,
                y: unit_fx + period_fx[k as usize] + effect + g.random_range(-3.0..3.0),
                n_devices: g.random_range(1..20),
                cable,
            });
        }
    }
    RandomPanel {
        cells,
        treated,
        base,
        opening,
    }
}

/// Event-study coefficients by least squares on an explicit dummy design
/// with square-root weights.
pub fn dummy_ols_betas(panel: &RandomPanel, weighted: bool) -> Vec<(Month, f64)> {
    let units: Vec<HexId> = panel.cells.iter().map(|c| c.hex_id).collect::<BTreeSet<_>>().into_iter().collect();
    let months: Vec<Month> = panel.cells.iter().map(|c| c.month).collect::<BTreeSet<_>>().into_iter().collect();
    let terms: Vec<Month> = months.iter().copied().filter(|&m| m != panel.base).collect();
    let k = terms.len();
    let p = k + units.len() + months.len() - 1;
    let n = panel.cells.len();
    let mut x = DMatrix::zeros(n, p);
    let mut y = DVector::zeros(n);
    for (row, c) in panel.cells.iter().enumerate() {
        let w = if weighted { (c.n_devices as f64).sqrt() } else { 1.0 };
        if panel.treated.contains(&c.hex_id) {
            if let Some(j) = terms.iter().position(|&m| m == c.month) {
                x[(row, j)] = w;
            }
        }
        let u = units.iter().position(|&h| h == c.hex_id).unwrap();
        x[(row, k + u)] = w;
        let t = months.iter().position(|&m| m == c.month).unwrap();
        if t > 0 {
            x[(row, k + units.len() + t - 1)] = w;
        }
        y[row] = w * c.y;
    }
    let b = least_squares(&x, &y);
    terms.into_iter().zip(b.iter().copied()).collect()
}

/// Normal equations solved by Cholesky, then refined against the residual
/// until the correction stops shrinking.
pub fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let xt = x.transpose();
    let chol = (&xt * x).cholesky().expect("full-rank design");
    let mut b = chol.solve(&(&xt * y));
    for _ in 0..10 {
        let r = y - x * &b;
        let step = chol.solve(&(&xt * r));
        b += &step;
        if step.amax() <= 1e-15 * b.amax() {
            break;
        }
    }
    b
}
