//! Localization, heading and navigation metrics.
//!
//! Percentages are in `[0, 100]`. Threshold metrics count strictly-below
//! values: a 15 m error does not count toward LSR@15.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geogrid::{ang_diff, nearest_rst, RelCoord, RsbIndex, WorldPoint};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("metric is undefined on an empty record set")]
    Empty,
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("{0}")]
    Io(String),
}

/// Per-sample localization outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizationRecord {
    pub sample_id: u64,
    pub rsb: RsbIndex,
    pub rel_pred: RelCoord,
    pub rel_true: RelCoord,
    pub pred: WorldPoint,
    pub truth: WorldPoint,
    pub heading_pred_deg: f64,
    pub heading_true_deg: f64,
    pub alpha: [f64; 4],
}

impl LocalizationRecord {
    pub fn loc_error_m(&self) -> f64 {
        self.pred.dist(self.truth)
    }

    pub fn heading_error_deg(&self) -> f64 {
        ang_diff(self.heading_pred_deg, self.heading_true_deg)
    }
}

/// How the predicted tile of Recall@1 is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecallRule {
    /// Largest similarity weight α.
    #[default]
    Alpha,
    /// Tile nearest to the regressed position.
    Position,
}

fn argmax(v: &[f64; 4]) -> usize {
    let mut best = 0;
    for j in 1..4 {
        if v[j] > v[best] {
            best = j;
        }
    }
    best
}

fn nonempty<T>(xs: &[T]) -> Result<(), MetricError> {
    if xs.is_empty() {
        Err(MetricError::Empty)
    } else {
        Ok(())
    }
}

fn percent(hits: usize, n: usize) -> f64 {
    100.0 * hits as f64 / n as f64
}

pub fn recall_at_1(records: &[LocalizationRecord], rule: RecallRule) -> Result<f64, MetricError> {
    nonempty(records)?;
    let hits = records
        .iter()
        .filter(|r| {
            let pred = match rule {
                RecallRule::Alpha => argmax(&r.alpha),
                RecallRule::Position => nearest_rst(r.rel_pred),
            };
            pred == nearest_rst(r.rel_true)
        })
        .count();
    Ok(percent(hits, records.len()))
}

fn positive(r: f64) -> Result<(), MetricError> {
    if r > 0.0 {
        Ok(())
    } else {
        Err(MetricError::Invalid(format!("threshold must be positive, got {r}")))
    }
}

/// Localization success rate: percent of samples with error `< r_m`.
pub fn lsr(records: &[LocalizationRecord], r_m: f64) -> Result<f64, MetricError> {
    positive(r_m)?;
    nonempty(records)?;
    Ok(percent(records.iter().filter(|r| r.loc_error_m() < r_m).count(), records.len()))
}

/// Heading success rate: percent of samples with heading error `< r_deg`.
pub fn hsr(records: &[LocalizationRecord], r_deg: f64) -> Result<f64, MetricError> {
    positive(r_deg)?;
    nonempty(records)?;
    Ok(percent(records.iter().filter(|r| r.heading_error_deg() < r_deg).count(), records.len()))
}

pub fn mean(xs: &[f64]) -> Result<f64, MetricError> {
    nonempty(xs)?;
    Ok(xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Median; the mean of the two middle values for even lengths.
pub fn median(xs: &[f64]) -> Result<f64, MetricError> {
    nonempty(xs)?;
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn loc_errors(records: &[LocalizationRecord]) -> Vec<f64> {
    records.iter().map(LocalizationRecord::loc_error_m).collect()
}

fn heading_errors(records: &[LocalizationRecord]) -> Vec<f64> {
    records.iter().map(LocalizationRecord::heading_error_deg).collect()
}

pub fn mle(records: &[LocalizationRecord]) -> Result<f64, MetricError> {
    mean(&loc_errors(records))
}

pub fn medle(records: &[LocalizationRecord]) -> Result<f64, MetricError> {
    median(&loc_errors(records))
}

pub fn mhe(records: &[LocalizationRecord]) -> Result<f64, MetricError> {
    mean(&heading_errors(records))
}

pub fn medhe(records: &[LocalizationRecord]) -> Result<f64, MetricError> {
    median(&heading_errors(records))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationSummary {
    pub count: usize,
    pub recall_at_1: f64,
    pub lsr15: f64,
    pub hsr15: f64,
    pub hsr30: f64,
    pub mle: f64,
    pub medle: f64,
    pub mhe: f64,
    pub medhe: f64,
}

pub fn summarize(records: &[LocalizationRecord], rule: RecallRule) -> Result<LocalizationSummary, MetricError> {
    Ok(LocalizationSummary {
        count: records.len(),
        recall_at_1: recall_at_1(records, rule)?,
        lsr15: lsr(records, 15.0)?,
        hsr15: hsr(records, 15.0)?,
        hsr30: hsr(records, 30.0)?,
        mle: mle(records)?,
        medle: medle(records)?,
        mhe: mhe(records)?,
        medhe: medhe(records)?,
    })
}

/// Outcome of one navigation episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub route_id: String,
    pub seed: u64,
    /// The navigator believed it reached the final waypoint.
    pub reached_goal: bool,
    /// `reached_goal` and the real final position is within the success
    /// radius of the goal.
    pub success: bool,
    /// Distance actually flown, in meters.
    pub path_len_m: f64,
    /// Waypoint polyline length, in meters.
    pub shortest_len_m: f64,
    /// Real final position to goal, in meters.
    pub final_dist_m: f64,
    pub steps: usize,
    pub reason: String,
}

/// Percent of episodes that reached the goal and ended within `r_m` of it.
pub fn sr_at(episodes: &[EpisodeRecord], r_m: f64) -> Result<f64, MetricError> {
    positive(r_m)?;
    nonempty(episodes)?;
    Ok(percent(episodes.iter().filter(|e| e.reached_goal && e.final_dist_m < r_m).count(), episodes.len()))
}

/// Success weighted by path length, `(1/N)·Σ S_i·l_i/max(p_i, l_i)`.
pub fn spl(episodes: &[EpisodeRecord]) -> Result<f64, MetricError> {
    nonempty(episodes)?;
    let mut total = 0.0;
    for e in episodes {
        if e.shortest_len_m <= 0.0 {
            return Err(MetricError::Invalid(format!("route {} has no length", e.route_id)));
        }
        if e.success {
            total += e.shortest_len_m / e.path_len_m.max(e.shortest_len_m);
        }
    }
    Ok(total / episodes.len() as f64)
}

/// Mean real final distance to the goal.
pub fn ne(episodes: &[EpisodeRecord]) -> Result<f64, MetricError> {
    mean(&episodes.iter().map(|e| e.final_dist_m).collect::<Vec<_>>())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavigationSummary {
    pub episodes: usize,
    pub sr20: f64,
    pub spl: f64,
    pub ne: f64,
}

pub fn summarize_navigation(episodes: &[EpisodeRecord]) -> Result<NavigationSummary, MetricError> {
    Ok(NavigationSummary {
        episodes: episodes.len(),
        sr20: sr_at(episodes, 20.0)?,
        spl: spl(episodes)?,
        ne: ne(episodes)?,
    })
}

/// Flat CSV form of a [`LocalizationRecord`] plus its derived errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub sample_id: u64,
    pub rsb_ix: usize,
    pub rsb_iy: usize,
    pub rel_pred_x: f64,
    pub rel_pred_y: f64,
    pub rel_true_x: f64,
    pub rel_true_y: f64,
    pub pred_x_m: f64,
    pub pred_y_m: f64,
    pub true_x_m: f64,
    pub true_y_m: f64,
    pub heading_pred_deg: f64,
    pub heading_true_deg: f64,
    pub alpha_0: f64,
    pub alpha_1: f64,
    pub alpha_2: f64,
    pub alpha_3: f64,
    pub loc_error_m: f64,
    pub heading_error_deg: f64,
}

impl From<&LocalizationRecord> for ErrorRow {
    fn from(r: &LocalizationRecord) -> Self {
        Self {
            sample_id: r.sample_id,
            rsb_ix: r.rsb.ix,
            rsb_iy: r.rsb.iy,
            rel_pred_x: r.rel_pred.x,
            rel_pred_y: r.rel_pred.y,
            rel_true_x: r.rel_true.x,
            rel_true_y: r.rel_true.y,
            pred_x_m: r.pred.x_m,
            pred_y_m: r.pred.y_m,
            true_x_m: r.truth.x_m,
            true_y_m: r.truth.y_m,
            heading_pred_deg: r.heading_pred_deg,
            heading_true_deg: r.heading_true_deg,
            alpha_0: r.alpha[0],
            alpha_1: r.alpha[1],
            alpha_2: r.alpha[2],
            alpha_3: r.alpha[3],
            loc_error_m: r.loc_error_m(),
            heading_error_deg: r.heading_error_deg(),
        }
    }
}

impl From<&ErrorRow> for LocalizationRecord {
    fn from(r: &ErrorRow) -> Self {
        Self {
            sample_id: r.sample_id,
            rsb: RsbIndex { ix: r.rsb_ix, iy: r.rsb_iy },
            rel_pred: RelCoord::new(r.rel_pred_x, r.rel_pred_y),
            rel_true: RelCoord::new(r.rel_true_x, r.rel_true_y),
            pred: WorldPoint::new(r.pred_x_m, r.pred_y_m),
            truth: WorldPoint::new(r.true_x_m, r.true_y_m),
            heading_pred_deg: r.heading_pred_deg,
            heading_true_deg: r.heading_true_deg,
            alpha: [r.alpha_0, r.alpha_1, r.alpha_2, r.alpha_3],
        }
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), MetricError> {
    let err = |e: csv::Error| MetricError::Io(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| MetricError::Io(format!("{}: {e}", path.display())))
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, MetricError> {
    let err = |e: csv::Error| MetricError::Io(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    r.deserialize().collect::<Result<Vec<T>, _>>().map_err(err)
}

/// Writes errors.csv: one [`ErrorRow`] per record.
pub fn export_errors(records: &[LocalizationRecord], path: &Path) -> Result<(), MetricError> {
    write_rows(path, records.iter().map(ErrorRow::from))
}

pub fn read_errors(path: &Path) -> Result<Vec<LocalizationRecord>, MetricError> {
    Ok(read_rows::<ErrorRow>(path)?.iter().map(LocalizationRecord::from).collect())
}

/// Writes episodes.csv: one [`EpisodeRecord`] per row.
pub fn export_episodes(episodes: &[EpisodeRecord], path: &Path) -> Result<(), MetricError> {
    write_rows(path, episodes)
}

pub fn read_episodes(path: &Path) -> Result<Vec<EpisodeRecord>, MetricError> {
    read_rows(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockErrors {
    pub count: usize,
    pub mean_loc_error_m: f64,
    pub mean_heading_error_deg: f64,
}

/// Mean errors grouped by block.
pub fn per_rsb_means(records: &[LocalizationRecord]) -> BTreeMap<RsbIndex, BlockErrors> {
    let mut acc: BTreeMap<RsbIndex, (usize, f64, f64)> = BTreeMap::new();
    for r in records {
        let e = acc.entry(r.rsb).or_default();
        e.0 += 1;
        e.1 += r.loc_error_m();
        e.2 += r.heading_error_deg();
    }
    acc.into_iter()
        .map(|(k, (n, l, h))| {
            (k, BlockErrors { count: n, mean_loc_error_m: l / n as f64, mean_heading_error_deg: h / n as f64 })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rec(err_m: f64, h_pred: f64, h_true: f64) -> LocalizationRecord {
        LocalizationRecord {
            sample_id: 0,
            rsb: RsbIndex { ix: 0, iy: 0 },
            rel_pred: RelCoord::new(0.5, 0.5),
            rel_true: RelCoord::new(0.5, 0.5),
            pred: WorldPoint::new(100.0 + err_m, 100.0),
            truth: WorldPoint::new(100.0, 100.0),
            heading_pred_deg: h_pred,
            heading_true_deg: h_true,
            alpha: [0.1, 0.2, 0.6, 0.1],
        }
    }

    fn ep(success: bool, p: f64, l: f64, d: f64) -> EpisodeRecord {
        EpisodeRecord {
            route_id: "r".into(),
            seed: 0,
            reached_goal: success,
            success,
            path_len_m: p,
            shortest_len_m: l,
            final_dist_m: d,
            steps: 0,
            reason: "goal".into(),
        }
    }

    #[test]
    fn threshold_metrics() {
        let set = [rec(5.0, 0.0, 0.0), rec(10.0, 0.0, 0.0), rec(20.0, 0.0, 0.0)];
        assert!((lsr(&set, 15.0).unwrap() - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(lsr(&[rec(15.0, 0.0, 0.0)], 15.0).unwrap(), 0.0);
        assert_eq!(hsr(&[rec(0.0, 15.0, 0.0)], 15.0).unwrap(), 0.0);
        assert_eq!(lsr(&[rec(0.0, 0.0, 0.0)], 15.0).unwrap(), 100.0);
        assert!(lsr(&set, 0.0).is_err());
    }

    #[test]
    fn means_and_medians() {
        let set = [rec(1.0, 0.0, 0.0), rec(2.0, 0.0, 0.0), rec(30.0, 0.0, 0.0)];
        assert!((mle(&set).unwrap() - 11.0).abs() < 1e-12);
        assert!((medle(&set).unwrap() - 2.0).abs() < 1e-12);
        assert!((mhe(&[rec(0.0, 1.0, 359.0)]).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(mle(&[]), Err(MetricError::Empty));
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]).unwrap(), 2.5);
    }

    #[test]
    fn recall_rules() {
        let mut r = rec(0.0, 0.0, 0.0);
        r.rel_true = RelCoord::new(0.3, 0.4);
        assert_eq!(recall_at_1(&[r], RecallRule::Alpha).unwrap(), 100.0);
        r.alpha = [0.7, 0.1, 0.1, 0.1];
        assert_eq!(recall_at_1(&[r], RecallRule::Alpha).unwrap(), 0.0);
        assert_eq!(recall_at_1(&[r], RecallRule::Position).unwrap(), 100.0);
        assert_eq!(recall_at_1(&[], RecallRule::Alpha), Err(MetricError::Empty));
    }

    #[test]
    fn navigation_metrics() {
        assert_eq!(spl(&[ep(true, 100.0, 100.0, 3.0)]).unwrap(), 1.0);
        assert_eq!(spl(&[ep(true, 200.0, 100.0, 3.0)]).unwrap(), 0.5);
        assert_eq!(spl(&[ep(false, 100.0, 100.0, 3.0)]).unwrap(), 0.0);
        let set = [ep(true, 120.0, 100.0, 4.0), ep(false, 300.0, 100.0, 50.0)];
        assert_eq!(sr_at(&set, 20.0).unwrap(), 50.0);
        assert_eq!(ne(&set).unwrap(), 27.0);
        assert!(spl(&[ep(true, 1.0, 0.0, 0.0)]).is_err());
    }

    #[test]
    fn csv_round_trip_reproduces_metrics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let recs: Vec<LocalizationRecord> = (0..50)
            .map(|i| LocalizationRecord {
                sample_id: i,
                rsb: RsbIndex { ix: rng.random_range(0..3), iy: rng.random_range(0..3) },
                rel_pred: RelCoord::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
                rel_true: RelCoord::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
                pred: WorldPoint::new(rng.random_range(0.0..500.0), rng.random_range(0.0..500.0)),
                truth: WorldPoint::new(rng.random_range(0.0..500.0), rng.random_range(0.0..500.0)),
                heading_pred_deg: rng.random_range(0.0..360.0),
                heading_true_deg: rng.random_range(0.0..360.0),
                alpha: [0.1, 0.2, 0.3, 0.4],
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("errors.csv");
        export_errors(&recs, &path).unwrap();
        let back = read_errors(&path).unwrap();
        assert_eq!(back, recs);
        assert_eq!(summarize(&back, RecallRule::Alpha).unwrap(), summarize(&recs, RecallRule::Alpha).unwrap());

        let groups = per_rsb_means(&recs);
        for (k, g) in &groups {
            let members: Vec<&LocalizationRecord> = recs.iter().filter(|r| r.rsb == *k).collect();
            let m = members.iter().map(|r| r.loc_error_m()).sum::<f64>() / members.len() as f64;
            assert_eq!(g.count, members.len());
            assert!((g.mean_loc_error_m - m).abs() < 1e-12);
        }
        assert_eq!(groups.values().map(|g| g.count).sum::<usize>(), 50);
    }

    proptest! {
        #[test]
        fn spl_never_exceeds_sr(eps in prop::collection::vec((any::<bool>(), 1.0f64..500.0, 1.0f64..500.0, 0.0f64..40.0), 1..30)) {
            let set: Vec<EpisodeRecord> = eps.iter().map(|&(s, p, l, d)| ep(s && d < 20.0, p, l, d)).collect();
            prop_assert!(spl(&set).unwrap() <= sr_at(&set, 20.0).unwrap() / 100.0 + 1e-12);
        }

        #[test]
        fn metrics_are_permutation_invariant(errs in prop::collection::vec(0.0f64..100.0, 1..20), seed in any::<u64>()) {
            let set: Vec<LocalizationRecord> = errs.iter().map(|&e| rec(e, e, 0.0)).collect();
            let mut shuffled = set.clone();
            rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(medle(&set).unwrap(), medle(&shuffled).unwrap());
            prop_assert!((mle(&set).unwrap() - mle(&shuffled).unwrap()).abs() < 1e-9);
            prop_assert_eq!(hsr(&set, 15.0).unwrap(), hsr(&shuffled, 15.0).unwrap());
        }
    }
}
