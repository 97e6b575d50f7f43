//! Seeded synthetic markets with planted common drivers.

use chrono::{Datelike, Days, NaiveDate, Weekday};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::ReturnPanel;
use crate::rng::{derive_seed, NormalStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwoClusterSpec {
    pub seed: u64,
    pub n_assets: usize,
    pub n_candidates: usize,
    pub n_rows: usize,
    pub start: NaiveDate,
    pub driver_vol: f64,
    pub noise_vol: f64,
    /// Daily drift added to every asset.
    pub drift: f64,
}

impl Default for TwoClusterSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            n_assets: 14,
            n_candidates: 8,
            n_rows: 504,
            start: NaiveDate::from_ymd_opt(2020, 1, 1).expect("valid date"),
            driver_vol: 0.01,
            noise_vol: 0.006,
            drift: 0.0002,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticMarket {
    pub assets: ReturnPanel,
    pub candidates: ReturnPanel,
    /// Candidate names of the two planted drivers (first drives the first half of the assets).
    pub planted: [String; 2],
    /// Cluster label (0 or 1) per asset.
    pub cluster: Vec<usize>,
}

/// Weekdays starting at `start` (inclusive when it is a weekday).
pub fn business_days(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d = d + Days::new(1);
    }
    out
}

/// Assets `0..n/2` load on one planted driver and the rest on the other; the
/// remaining candidates are independent noise. Planted drivers sit at candidate
/// positions chosen by the seed.
pub fn two_cluster_market(spec: &TwoClusterSpec) -> Result<SyntheticMarket> {
    if spec.n_assets < 2 || spec.n_candidates < 2 || spec.n_rows < 3 {
        return Err(Error::InvalidInput("need at least 2 assets, 2 candidates and 3 rows".into()));
    }
    let t = spec.n_rows;
    let mut pos = NormalStream::new(derive_seed(spec.seed, "positions"), 0);
    let mut slots: Vec<usize> = (0..spec.n_candidates).collect();
    pos.shuffle(&mut slots);
    let (slot_a, slot_b) = (slots[0], slots[1]);

    let mut cand_cols: Vec<Vec<f64>> = Vec::with_capacity(spec.n_candidates);
    for k in 0..spec.n_candidates {
        let mut s = NormalStream::new(derive_seed(spec.seed, "candidates"), k as u64);
        cand_cols.push((0..t).map(|_| spec.driver_vol * s.normal()).collect());
    }
    let mut load = NormalStream::new(derive_seed(spec.seed, "loadings"), 0);
    let half = spec.n_assets / 2;
    let mut cluster = Vec::with_capacity(spec.n_assets);
    let mut asset_cols = Vec::with_capacity(spec.n_assets);
    for i in 0..spec.n_assets {
        let c = usize::from(i >= half);
        let driver = &cand_cols[if c == 0 { slot_a } else { slot_b }];
        let beta = 0.7 + 0.6 * load.uniform();
        let noise = spec.noise_vol * (0.6 + 0.8 * load.uniform());
        let mut s = NormalStream::new(derive_seed(spec.seed, "noise"), i as u64);
        asset_cols.push((0..t).map(|r| spec.drift + beta * driver[r] + noise * s.normal()).collect::<Vec<f64>>());
        cluster.push(c);
    }
    let dates = business_days(spec.start, t);
    let asset_names: Vec<String> = (1..=spec.n_assets).map(|i| format!("A{i:02}")).collect();
    let cand_names: Vec<String> = (1..=spec.n_candidates).map(|k| format!("X{k}")).collect();
    Ok(SyntheticMarket {
        assets: ReturnPanel::from_columns(dates.clone(), asset_names, &asset_cols)?,
        planted: [cand_names[slot_a].clone(), cand_names[slot_b].clone()],
        candidates: ReturnPanel::from_columns(dates, cand_names, &cand_cols)?,
        cluster,
    })
}
