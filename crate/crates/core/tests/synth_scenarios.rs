mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use common::month;
use mobiscope::estimator::{pretrend_test, EventStudySpec};
use mobiscope::geo::Line;
use mobiscope::panel::Outcome;
use mobiscope::pipeline::{analyze_traces, device_passes, simulate_and_fit, AnalysisParams, Geography};
use mobiscope::stays::detect_stays;
use mobiscope::synth::{perturb, Knob, Scenario, ScenarioConfig, ScenarioPaths};
use statrs::distribution::{ContinuousCDF, Normal};

fn small(seed: u64, per_arm: usize, background: usize) -> ScenarioConfig {
    ScenarioConfig {
        seed,
        n_devices_per_arm: per_arm,
        n_background_devices: background,
        ..Default::default()
    }
}

#[test]
fn same_seed_writes_identical_files() {
    let write = |seed| {
        let dir = tempfile::tempdir().unwrap();
        let paths = ScenarioPaths::in_dir(dir.path());
        Scenario::new(small(seed, 15, 5)).unwrap().write(&paths).unwrap();
        let files: Vec<Vec<u8>> = [&paths.pings, &paths.pois, &paths.stations, &paths.zones, &paths.regions, &paths.ground_truth]
            .iter()
            .map(|p| std::fs::read(p).unwrap())
            .collect();
        files
    };
    let a = write(9);
    assert_eq!(a, write(9));
    assert_ne!(a[0], write(10)[0]);
}

#[test]
fn ground_truth_totals_equal_trip_events() {
    let scenario = Scenario::new(small(4, 10, 5)).unwrap();
    let (traces, truth) = scenario.generate().unwrap();
    assert_eq!(traces.len(), truth.devices.len());
    let mut events = 0u64;
    for d in &truth.devices {
        for m in &d.months {
            assert_eq!(m.trips as usize, m.destinations.len());
            if !m.present {
                assert_eq!(m.trips, 0);
            }
            events += m.destinations.len() as u64;
        }
    }
    assert_eq!(truth.total_trips(), events);
}

#[test]
fn generated_trips_are_detectable_stays() {
    // Each trip leaves two or more pings spanning at least six minutes at
    // one place, so nearly every trip shows up as a stay.
    let scenario = Scenario::new(small(6, 6, 2)).unwrap();
    let params = AnalysisParams::for_scenario(&scenario);
    for idx in 0..scenario.config.n_devices() {
        let (pings, truth) = scenario.device(idx).unwrap();
        let stays = detect_stays(&pings, &params.stay).unwrap();
        let trips: u64 = truth.months.iter().map(|m| m.trips as u64).sum();
        assert!(stays.len() as u64 >= trips * 99 / 100, "{}: {} stays for {trips} trips", truth.device_id, stays.len());
        for w in stays.windows(2) {
            assert!(w[0].end < w[1].start, "overlapping stays");
        }
    }
}

#[test]
fn detected_trips_match_ground_truth_per_device_month() {
    let scenario = Scenario::new(ScenarioConfig::default()).unwrap();
    let geo = Geography::from_scenario(&scenario, 100.0, 50.0).unwrap();
    let params = AnalysisParams::for_scenario(&scenario);
    let (traces, truth) = scenario.generate().unwrap();
    let analysis = analyze_traces(&traces, &params, &geo).unwrap();
    let mut detected: BTreeMap<(Arc<str>, _), u64> = BTreeMap::new();
    for t in &analysis.trips {
        *detected.entry((t.device_id.clone(), params.clock.month_of(t.start))).or_insert(0) += 1;
    }
    let mut checked = 0;
    let mut worst = 0.0f64;
    for d in &truth.devices {
        for m in d.months.iter().filter(|m| m.present && m.trips > 0) {
            let got = detected.get(&(d.device_id.clone(), m.month)).copied().unwrap_or(0) as f64;
            let rel = (got - m.trips as f64).abs() / m.trips as f64;
            worst = worst.max(rel);
            checked += 1;
        }
    }
    assert!(checked >= 12 * 1_000);
    assert!(worst <= 0.02, "worst device-month relative error {worst}");
}

#[test]
fn null_scenario_arms_share_the_trip_distribution() {
    // Device-month counts pooled over 20 seeds; Welch z-test on the means.
    let mut arms: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for seed in 1..=20 {
        let mut cfg = small(seed, 500, 0);
        cfg.effect_trips = 0.0;
        let scenario = Scenario::new(cfg).unwrap();
        for idx in 0..scenario.config.n_devices() {
            let arm = if scenario.device_id(idx).starts_with('t') { 0 } else { 1 };
            arms[arm].extend(scenario.device_counts(idx).iter().map(|m| m.trips as f64));
        }
    }
    let moments = |v: &[f64]| {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var / n)
    };
    let (m1, v1) = moments(&arms[0]);
    let (m0, v0) = moments(&arms[1]);
    let z = (m1 - m0) / (v1 + v0).sqrt();
    let p = 2.0 * Normal::standard().sf(z.abs());
    assert!(p > 0.01, "treatment mean {m1:.3}, control {m0:.3}, z {z:.3}, p {p:.4}");
}

#[test]
fn attrition_knob_leaves_an_unbalanced_panel() {
    let scenario = Scenario::new(perturb(&small(3, 60, 0), Knob::Attrition)).unwrap();
    let (analysis, fit) = simulate_and_fit(&scenario, &Outcome::TripsTotal, &EventStudySpec::new(month("2018-11"))).unwrap();
    let mut months_per_device: BTreeMap<Arc<str>, usize> = BTreeMap::new();
    for r in &analysis.records {
        *months_per_device.entry(r.device_id.clone()).or_insert(0) += 1;
    }
    assert!(months_per_device.values().any(|&n| n < 12));
    assert!(fit.n_obs < fit.n_units * fit.n_periods, "{} cells for {} x {}", fit.n_obs, fit.n_units, fit.n_periods);
}

#[test]
fn sparse_knob_devices_fail_the_filter() {
    let scenario = Scenario::new(perturb(&small(8, 40, 20), Knob::SparseDevices)).unwrap();
    let params = AnalysisParams::for_scenario(&scenario);
    let n = scenario.config.n_devices();
    let mut sparse = 0;
    for idx in 0..n {
        let (pings, truth) = scenario.device(idx).unwrap();
        assert_eq!(device_passes(&pings, &params), !truth.sparse, "{}", truth.device_id);
        sparse += truth.sparse as usize;
    }
    let share = sparse as f64 / n as f64;
    assert!((share - 0.2).abs() <= 0.1, "sparse share {share}");
}

#[test]
fn homes_are_unique_per_device_month_and_processing_order_is_irrelevant() {
    let scenario = Scenario::new(small(12, 20, 10)).unwrap();
    let geo = Geography::from_scenario(&scenario, 100.0, 50.0).unwrap();
    let params = AnalysisParams::for_scenario(&scenario);
    let (traces, _) = scenario.generate().unwrap();
    let forward = analyze_traces(&traces, &params, &geo).unwrap();
    let reversed: Vec<_> = traces.into_iter().rev().collect();
    let backward = analyze_traces(&reversed, &params, &geo).unwrap();
    assert_eq!(forward.records, backward.records);
    assert_eq!(forward.profiles, backward.profiles);
    assert_eq!(forward.exposure, backward.exposure);
    let mut seen = std::collections::BTreeSet::new();
    for h in &forward.homes {
        assert!(seen.insert((h.device_id.clone(), h.month)), "two homes for {} {}", h.device_id, h.month);
        assert!(h.night_ping_count >= 5);
    }
}

#[test]
fn pretrend_knob_is_detected_with_high_power() {
    // Monte Carlo power of the joint pre-period test at slope 1.
    const SEEDS: u64 = 100;
    let mut rejections = 0;
    for seed in 1..=SEEDS {
        let cfg = perturb(&small(20_000 + seed, 500, 0), Knob::PretrendViolation);
        assert_eq!(cfg.pretrend_slope, 1.0);
        let scenario = Scenario::new(cfg).unwrap();
        let (_, fit) = simulate_and_fit(&scenario, &Outcome::TripsTotal, &EventStudySpec::new(month("2018-11"))).unwrap();
        if pretrend_test(&fit).unwrap().p < 0.05 {
            rejections += 1;
        }
    }
    let power = rejections as f64 / SEEDS as f64;
    println!("pretrend power at slope 1: {power:.2}");
    assert!(power >= 0.80, "power {power:.2} over {SEEDS} seeds");
}

#[test]
fn treated_devices_live_near_treatment_stations() {
    let scenario = Scenario::new(small(2, 10, 5)).unwrap();
    let (_, truth) = scenario.generate().unwrap();
    for d in &truth.devices {
        match d.device_id.chars().next().unwrap() {
            't' => assert_eq!(d.arm, Some(Line::Treatment)),
            'c' => assert_eq!(d.arm, Some(Line::Control)),
            _ => assert_eq!(d.arm, None),
        }
    }
}
