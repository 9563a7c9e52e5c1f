//! Visitor-mix metrics of POIs and the monthly exposure of individuals.
//!
//! Profiles are computed once over the whole window from all matched trips
//! whose visitor has a home stratum that month, then held fixed while the
//! exposure of each device-month is averaged over its visits.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use crate::stays::Stay;
use crate::time::{LocalClock, Month};

/// Upper bound of the six-stratum entropy, in nats.
pub const MAX_ENTROPY: f64 = 1.791_759_469_228_055; // ln 6

/// A set of strata 1..=6.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StratumSet([bool; 6]);

impl StratumSet {
    pub fn new(strata: &[u8]) -> Self {
        let mut set = [false; 6];
        for &s in strata {
            if (1..=6).contains(&s) {
                set[s as usize - 1] = true;
            }
        }
        Self(set)
    }

    pub fn contains(&self, stratum: u8) -> bool {
        (1..=6).contains(&stratum) && self.0[stratum as usize - 1]
    }

    pub fn members(&self) -> Vec<u8> {
        (1..=6).filter(|&s| self.contains(s)).collect()
    }

    /// Visitor-side high income group: strata 4, 5 and 6.
    pub fn high_income_visitors() -> Self {
        Self::new(&[4, 5, 6])
    }
}

/// Shannon entropy in nats over the non-zero counts.
pub fn shannon_entropy(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let total = total as f64;
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum();
    // a single populated stratum gives -1*ln(1) = -0.0
    h.max(0.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoiVisitorProfile {
    pub poi_id: Arc<str>,
    pub visits_by_stratum: [u64; 6],
    pub entropy: f64,
    pub high_income_share: f64,
}

impl PoiVisitorProfile {
    pub fn from_counts(poi_id: Arc<str>, visits_by_stratum: [u64; 6], high_income: &StratumSet) -> Option<Self> {
        let total: u64 = visits_by_stratum.iter().sum();
        if total == 0 {
            return None;
        }
        let high: u64 = (1..=6u8)
            .filter(|&s| high_income.contains(s))
            .map(|s| visits_by_stratum[s as usize - 1])
            .sum();
        Some(Self {
            poi_id,
            visits_by_stratum,
            entropy: shannon_entropy(&visits_by_stratum),
            high_income_share: high as f64 / total as f64,
        })
    }

    pub fn total_visits(&self) -> u64 {
        self.visits_by_stratum.iter().sum()
    }

    pub fn low_mid_share(&self) -> f64 {
        1.0 - self.high_income_share
    }
}

/// Home stratum of a device in a month.
pub type HomeStrata = HashMap<(Arc<str>, Month), u8>;

/// Per-POI visit counts by visitor home stratum. Trips without a POI, or
/// whose visitor has no home stratum that month, are skipped.
pub fn poi_visit_counts(trips: &[Stay], home_strata: &HomeStrata, clock: &LocalClock) -> BTreeMap<Arc<str>, [u64; 6]> {
    let mut counts: BTreeMap<Arc<str>, [u64; 6]> = BTreeMap::new();
    for s in trips {
        let Some(poi) = &s.poi_id else { continue };
        let key = (s.device_id.clone(), clock.month_of(s.start));
        let Some(&stratum) = home_strata.get(&key) else { continue };
        if !(1..=6).contains(&stratum) {
            continue;
        }
        counts.entry(poi.clone()).or_insert([0; 6])[stratum as usize - 1] += 1;
    }
    counts
}

/// Visitor profiles sorted by `poi_id`; POIs without attributable visits
/// are absent.
pub fn poi_profiles(
    trips: &[Stay],
    home_strata: &HomeStrata,
    clock: &LocalClock,
    high_income: &StratumSet,
) -> Vec<PoiVisitorProfile> {
    poi_visit_counts(trips, home_strata, clock)
        .into_iter()
        .filter_map(|(poi, counts)| PoiVisitorProfile::from_counts(poi, counts, high_income))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ExposureWeighting {
    /// Every visit counts once.
    #[default]
    Visit,
    /// Each distinct POI of the month counts once.
    DistinctPoi,
}

impl std::str::FromStr for ExposureWeighting {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s.trim() {
            "visit" => Ok(Self::Visit),
            "distinct_poi" => Ok(Self::DistinctPoi),
            other => Err(crate::Error::Config(format!("unknown exposure weighting {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExposureRecord {
    pub device_id: Arc<str>,
    pub month: Month,
    pub mean_entropy: f64,
    pub mean_high_income_share: f64,
    /// Visits to profiled POIs.
    pub poi_visit_count: u64,
    pub unique_poi_count: u64,
}

/// Mean profile entropy and high-income share over each device-month's
/// visits to profiled POIs. Output is sorted by (device, month).
pub fn exposure_by_device_month(
    trips: &[Stay],
    profiles: &[PoiVisitorProfile],
    clock: &LocalClock,
    weighting: ExposureWeighting,
) -> Vec<ExposureRecord> {
    let table: HashMap<&str, &PoiVisitorProfile> = profiles.iter().map(|p| (&*p.poi_id, p)).collect();
    let mut visits: BTreeMap<(Arc<str>, Month), Vec<&PoiVisitorProfile>> = BTreeMap::new();
    for s in trips {
        let Some(poi) = &s.poi_id else { continue };
        let Some(profile) = table.get(&**poi) else { continue };
        visits
            .entry((s.device_id.clone(), clock.month_of(s.start)))
            .or_default()
            .push(profile);
    }
    visits
        .into_iter()
        .map(|((device_id, month), v)| {
            let unique: BTreeSet<&str> = v.iter().map(|p| &*p.poi_id).collect();
            let (entropy, share) = match weighting {
                ExposureWeighting::Visit => mean_pair(v.iter().copied()),
                ExposureWeighting::DistinctPoi => mean_pair(unique.iter().map(|id| table[id])),
            };
            ExposureRecord {
                device_id,
                month,
                mean_entropy: entropy,
                mean_high_income_share: share,
                poi_visit_count: v.len() as u64,
                unique_poi_count: unique.len() as u64,
            }
        })
        .collect()
}

fn mean_pair<'a>(it: impl Iterator<Item = &'a PoiVisitorProfile>) -> (f64, f64) {
    let (mut e, mut h, mut n) = (0.0, 0.0, 0usize);
    for p in it {
        e += p.entropy;
        h += p.high_income_share;
        n += 1;
    }
    (e / n as f64, h / n as f64)
}
