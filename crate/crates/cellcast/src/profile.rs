//! Per-cell daily peak hours, representative peaks over the training
//! window, the 24 peak-hour groups with their mean profiles, and the
//! Pearson correlation between group profiles.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::ingest::HourlyCellSeries;

/// How often each hour of the day was a cell's daily peak.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeakHistogram {
    pub cell_id: u32,
    pub counts: [u32; 24],
    pub n_days: u32,
}

/// One peak-hour group: its member cells and the per-hour cross-cell mean
/// traffic over the training window.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupProfile {
    /// Peak hour (0-23) shared by the members.
    pub group_id: u8,
    pub members: BTreeSet<u32>,
    pub profile: Vec<f64>,
    /// Arithmetic mean of `profile`.
    pub mean: f64,
}

impl GroupProfile {
    /// True when every profile entry equals the first; Pearson correlation
    /// is undefined for such groups.
    pub fn is_constant(&self) -> bool {
        self.profile.windows(2).all(|w| w[0] == w[1])
    }

    /// 24-entry profile averaged by hour of day. Requires whole days.
    pub fn folded_daily(&self) -> Result<Vec<f64>> {
        if self.profile.is_empty() || !self.profile.len().is_multiple_of(24) {
            return Err(Error::Validation(format!(
                "group {}: cannot fold {} hours into days",
                self.group_id,
                self.profile.len()
            )));
        }
        let days = self.profile.len() / 24;
        let mut folded = vec![0.0; 24];
        for (i, v) in self.profile.iter().enumerate() {
            folded[i % 24] += v;
        }
        for v in &mut folded {
            *v /= days as f64;
        }
        Ok(folded)
    }
}

fn day_slice(series: &HourlyCellSeries, day: usize) -> Result<&[f64]> {
    let start = day * 24;
    if start + 24 > series.values.len() {
        return Err(Error::Data(format!(
            "cell {}: day {day} not fully covered by series of {} hours",
            series.cell_id,
            series.values.len()
        )));
    }
    Ok(&series.values[start..start + 24])
}

/// Hour (0-23) with the day's maximum traffic; ties break toward the
/// earliest hour. Day indices count from the series start, which must be
/// aligned to a local-day boundary.
pub fn daily_peak_hour(series: &HourlyCellSeries, day: usize) -> Result<u8> {
    if series.start_hour.rem_euclid(24) != 0 {
        return Err(Error::Data(format!(
            "cell {}: series starts at hour {} which is not a day boundary",
            series.cell_id, series.start_hour
        )));
    }
    let values = day_slice(series, day)?;
    let mut best = 0usize;
    for (hour, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = hour;
        }
    }
    Ok(best as u8)
}

/// Counts each day's peak hour over the first `n_days` days.
pub fn peak_histogram(series: &HourlyCellSeries, n_days: u32) -> Result<PeakHistogram> {
    if n_days == 0 {
        return Err(Error::Validation("peak histogram needs n_days >= 1".into()));
    }
    let mut counts = [0u32; 24];
    for day in 0..n_days {
        counts[daily_peak_hour(series, day as usize)? as usize] += 1;
    }
    Ok(PeakHistogram {
        cell_id: series.cell_id,
        counts,
        n_days,
    })
}

/// Mode of the daily peak hours over `n_days`; ties break toward the
/// earliest hour. Depends only on the multiset of daily peaks.
pub fn representative_peak_hour(series: &HourlyCellSeries, n_days: u32) -> Result<u8> {
    let hist = peak_histogram(series, n_days)?;
    let mut best = 0usize;
    for (hour, count) in hist.counts.iter().enumerate() {
        if *count > hist.counts[best] {
            best = hour;
        }
    }
    Ok(best as u8)
}

/// Partitions cells into groups keyed by representative peak hour and
/// computes each group's per-hour mean profile over the full window.
/// Groups with no members are omitted. All series must share the same
/// day-aligned span of whole days.
pub fn group_by_peak_hour(
    cells: &BTreeMap<u32, HourlyCellSeries>,
) -> Result<BTreeMap<u8, GroupProfile>> {
    let mut iter = cells.values();
    let Some(first) = iter.next() else {
        return Err(Error::Data("no cells to group".into()));
    };
    let (start, h) = (first.start_hour, first.values.len());
    if h == 0 || h % 24 != 0 {
        return Err(Error::Data(format!(
            "training window of {h} hours is not a whole number of days"
        )));
    }
    for s in iter {
        if s.start_hour != start || s.values.len() != h {
            return Err(Error::Data(format!(
                "cell {}: span differs from the shared training window",
                s.cell_id
            )));
        }
    }
    let n_days = (h / 24) as u32;

    let mut groups: BTreeMap<u8, GroupProfile> = BTreeMap::new();
    for series in cells.values() {
        let peak = representative_peak_hour(series, n_days)?;
        let group = groups.entry(peak).or_insert_with(|| GroupProfile {
            group_id: peak,
            members: BTreeSet::new(),
            profile: vec![0.0; h],
            mean: 0.0,
        });
        group.members.insert(series.cell_id);
        for (acc, v) in group.profile.iter_mut().zip(&series.values) {
            *acc += v;
        }
    }
    for group in groups.values_mut() {
        let c = group.members.len() as f64;
        for v in &mut group.profile {
            *v /= c;
        }
        group.mean = group.profile.iter().sum::<f64>() / h as f64;
    }
    Ok(groups)
}

/// Pearson correlation coefficient between two equal-length sequences:
/// the covariance about the means normalized by the product of the root
/// sums of squared deviations. Constant input has no defined correlation
/// and is reported as a distinct error.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "pearson: lengths {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::Validation(
            "pearson needs at least 2 observations".into(),
        ));
    }
    let constant = |v: &[f64]| v.windows(2).all(|w| w[0] == w[1]);
    if constant(x) || constant(y) {
        return Err(Error::UndefinedCorrelation(Vec::new()));
    }
    let n = x.len() as f64;
    let mean_x = x.iter().sum::<f64>() / n;
    let mean_y = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let dx = a - mean_x;
        let dy = b - mean_y;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation(Vec::new()));
    }
    let r = sxy / (sxx.sqrt() * syy.sqrt());
    if !r.is_finite() {
        return Err(Error::Numeric("pearson produced a non-finite value".into()));
    }
    Ok(r.clamp(-1.0, 1.0))
}

/// Correlation of two group profiles (optionally folded to 24 hours).
pub fn group_pearson(x: &GroupProfile, y: &GroupProfile, fold_daily: bool) -> Result<f64> {
    let map_err = |e: Error| match e {
        Error::UndefinedCorrelation(_) => {
            let mut ids = Vec::new();
            if x.is_constant() {
                ids.push(x.group_id);
            }
            if y.is_constant() || ids.is_empty() {
                ids.push(y.group_id);
            }
            Error::UndefinedCorrelation(ids)
        }
        other => other,
    };
    if fold_daily {
        pearson(&x.folded_daily()?, &y.folded_daily()?).map_err(map_err)
    } else {
        pearson(&x.profile, &y.profile).map_err(map_err)
    }
}

/// CSV export `group_id,hour_index,mean_value`.
pub fn write_group_profiles_csv(
    path: &Path,
    groups: &BTreeMap<u8, GroupProfile>,
) -> Result<()> {
    let file = File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "group_id,hour_index,mean_value").map_err(Error::io(path))?;
    for group in groups.values() {
        for (hour, value) in group.profile.iter().enumerate() {
            writeln!(w, "{},{},{}", group.group_id, hour, value).map_err(Error::io(path))?;
        }
    }
    w.flush().map_err(Error::io(path))
}

/// CSV export `cell_id,hour,count`.
pub fn write_peak_histograms_csv(path: &Path, histograms: &[PeakHistogram]) -> Result<()> {
    let file = File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "cell_id,hour,count").map_err(Error::io(path))?;
    for hist in histograms {
        for (hour, count) in hist.counts.iter().enumerate() {
            writeln!(w, "{},{},{}", hist.cell_id, hour, count).map_err(Error::io(path))?;
        }
    }
    w.flush().map_err(Error::io(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(cell: u32, values: Vec<f64>) -> HourlyCellSeries {
        HourlyCellSeries {
            cell_id: cell,
            start_hour: 0,
            values,
        }
    }

    fn day_with_peak(peak: usize, peak_value: f64) -> Vec<f64> {
        let mut day = vec![1.0; 24];
        day[peak] = peak_value;
        day
    }

    #[test]
    fn argmax_of_unique_peak() {
        let s = series(1, day_with_peak(15, 9.0));
        assert_eq!(daily_peak_hour(&s, 0).unwrap(), 15);
    }

    #[test]
    fn all_equal_day_breaks_to_hour_zero() {
        let s = series(1, vec![3.0; 24]);
        assert_eq!(daily_peak_hour(&s, 0).unwrap(), 0);
    }

    #[test]
    fn day_out_of_range_is_an_error() {
        let s = series(1, vec![1.0; 24]);
        assert!(daily_peak_hour(&s, 1).is_err());
    }

    #[test]
    fn representative_is_the_mode() {
        // Daily peaks: 15 x 12 days, 14 x 5 days, 16 x 3 days.
        let mut values = Vec::new();
        for day in 0..20 {
            let peak = if day < 12 {
                15
            } else if day < 17 {
                14
            } else {
                16
            };
            values.extend(day_with_peak(peak, 5.0));
        }
        let s = series(1, values);
        assert_eq!(representative_peak_hour(&s, 20).unwrap(), 15);
    }

    #[test]
    fn mode_tie_breaks_to_earliest_hour() {
        let mut values = Vec::new();
        for day in 0..20 {
            let peak = if day % 2 == 0 { 9 } else { 18 };
            values.extend(day_with_peak(peak, 5.0));
        }
        let s = series(1, values);
        assert_eq!(representative_peak_hour(&s, 20).unwrap(), 9);
    }

    #[test]
    fn representative_is_permutation_invariant() {
        let days: Vec<usize> = vec![15, 14, 15, 16, 15, 14, 15, 15, 16, 14];
        let build = |order: &[usize]| {
            let mut values = Vec::new();
            for peak in order {
                values.extend(day_with_peak(*peak, 5.0));
            }
            series(1, values)
        };
        let forward = representative_peak_hour(&build(&days), 10).unwrap();
        let mut reversed = days.clone();
        reversed.reverse();
        let backward = representative_peak_hour(&build(&reversed), 10).unwrap();
        assert_eq!(forward, backward);
    }

    #[test]
    fn incomplete_coverage_is_an_error() {
        let s = series(1, vec![1.0; 30]);
        assert!(representative_peak_hour(&s, 2).is_err());
    }

    #[test]
    fn groups_mean_two_members() {
        let v1: Vec<f64> = day_with_peak(15, 4.0);
        let v2: Vec<f64> = day_with_peak(15, 8.0);
        let cells = BTreeMap::from([(1, series(1, v1.clone())), (2, series(2, v2.clone()))]);
        let groups = group_by_peak_hour(&cells).unwrap();
        assert_eq!(groups.len(), 1);
        let g = &groups[&15];
        assert_eq!(g.members, BTreeSet::from([1, 2]));
        for (i, p) in g.profile.iter().enumerate() {
            assert_eq!(*p, (v1[i] + v2[i]) / 2.0);
        }
    }

    #[test]
    fn groups_partition_cells() {
        let cells = BTreeMap::from([
            (1, series(1, day_with_peak(15, 4.0))),
            (2, series(2, day_with_peak(15, 2.0))),
            (3, series(3, day_with_peak(21, 2.0))),
        ]);
        let groups = group_by_peak_hour(&cells).unwrap();
        assert_eq!(groups[&15].members.len(), 2);
        assert_eq!(groups[&21].members.len(), 1);
        let all: BTreeSet<u32> = groups.values().flat_map(|g| g.members.clone()).collect();
        assert_eq!(all, BTreeSet::from([1, 2, 3]));
        let total: usize = groups.values().map(|g| g.members.len()).sum();
        assert_eq!(total, 3);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(group_by_peak_hour(&BTreeMap::new()).is_err());
    }

    #[test]
    fn pearson_hand_example() {
        let r = pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-15);
    }

    #[test]
    fn pearson_self_is_one() {
        let x = [0.5, 1.0, -2.0, 4.0, 0.0];
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_negated_is_minus_one() {
        let x = [0.5, 1.0, -2.0, 4.0, 0.0];
        let y: Vec<f64> = x.iter().map(|v| -v + 3.0).collect();
        assert!((pearson(&x, &y).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_constant_input_is_distinct_error() {
        let err = pearson(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).unwrap_err();
        assert!(matches!(err, Error::UndefinedCorrelation(_)));
    }

    #[test]
    fn group_pearson_reports_offending_group() {
        let constant = GroupProfile {
            group_id: 7,
            members: BTreeSet::from([1]),
            profile: vec![1.0; 48],
            mean: 1.0,
        };
        let varying = GroupProfile {
            group_id: 9,
            members: BTreeSet::from([2]),
            profile: (0..48).map(|i| i as f64).collect(),
            mean: 23.5,
        };
        let err = group_pearson(&constant, &varying, false).unwrap_err();
        match err {
            Error::UndefinedCorrelation(ids) => assert_eq!(ids, vec![7]),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn folded_profile_averages_by_hour_of_day() {
        let mut profile = vec![0.0; 48];
        profile[3] = 2.0;
        profile[27] = 4.0;
        let g = GroupProfile {
            group_id: 0,
            members: BTreeSet::from([1]),
            profile,
            mean: 0.0,
        };
        let folded = g.folded_daily().unwrap();
        assert_eq!(folded.len(), 24);
        assert_eq!(folded[3], 3.0);
        assert_eq!(folded[0], 0.0);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        /// Two-pass oracle: explicit means, then explicit deviation sums.
        pub fn pearson_two_pass(x: &[f64], y: &[f64]) -> f64 {
            let n = x.len() as f64;
            let mx = x.iter().sum::<f64>() / n;
            let my = y.iter().sum::<f64>() / n;
            let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
            let vx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
            let vy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
            cov / (vx.sqrt() * vy.sqrt())
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn affine_invariance(
                xs in proptest::collection::vec(-1e3f64..1e3, 8..64),
                a in proptest::sample::select(vec![-3.0f64, -0.5, 0.25, 2.0]),
                b in -100.0f64..100.0,
            ) {
                prop_assume!(xs.windows(2).any(|w| w[0] != w[1]));
                let ys: Vec<f64> = xs.iter().map(|v| a * v + b).collect();
                let r = pearson(&xs, &ys).unwrap();
                let expected = if a > 0.0 { 1.0 } else { -1.0 };
                prop_assert!((r - expected).abs() < 1e-9);
            }

            #[test]
            fn matches_two_pass_oracle(
                pair in proptest::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 16..128),
            ) {
                let xs: Vec<f64> = pair.iter().map(|p| p.0).collect();
                let ys: Vec<f64> = pair.iter().map(|p| p.1).collect();
                prop_assume!(xs.windows(2).any(|w| w[0] != w[1]));
                prop_assume!(ys.windows(2).any(|w| w[0] != w[1]));
                let r = pearson(&xs, &ys).unwrap();
                prop_assert!((r - pearson_two_pass(&xs, &ys)).abs() < 1e-12);
            }
        }
    }
}
