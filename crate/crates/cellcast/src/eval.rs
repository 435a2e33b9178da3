//! MAPE and MAE metrics, rolling one-step evaluation of trained models
//! over the held-out days, and the CSV exports backing the comparison
//! table, prediction traces and grid heatmap.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ingest::{HourlyCellSeries, GRID_SIDE};
use crate::model::ModelGraph;
use crate::nn::{Differentiable, NdArray};
use crate::trainer::NormStats;

/// Targets at or below this magnitude are excluded from MAPE (the ratio
/// is undefined at zero); they still count into MAE.
pub const MAPE_ZERO_THRESHOLD: f64 = 1e-9;

/// Mean absolute percentage error in percent, with the number of
/// zero-target points that were skipped.
pub fn mape(actual: &[f64], predicted: &[f64]) -> Result<(f64, usize)> {
    if actual.len() != predicted.len() {
        return Err(Error::Shape(format!(
            "mape: lengths {} vs {}",
            actual.len(),
            predicted.len()
        )));
    }
    if actual.is_empty() {
        return Err(Error::UndefinedMetric("mape over empty input".into()));
    }
    let mut sum = 0.0;
    let mut kept = 0usize;
    for (q, q_hat) in actual.iter().zip(predicted) {
        if *q > MAPE_ZERO_THRESHOLD {
            sum += ((q - q_hat) / q).abs();
            kept += 1;
        }
    }
    let skipped = actual.len() - kept;
    if kept == 0 {
        return Err(Error::UndefinedMetric(
            "mape: every target is zero".into(),
        ));
    }
    Ok((100.0 * sum / kept as f64, skipped))
}

/// Mean absolute error in traffic units; nothing is skipped.
pub fn mae(actual: &[f64], predicted: &[f64]) -> Result<f64> {
    if actual.len() != predicted.len() {
        return Err(Error::Shape(format!(
            "mae: lengths {} vs {}",
            actual.len(),
            predicted.len()
        )));
    }
    if actual.is_empty() {
        return Err(Error::UndefinedMetric("mae over empty input".into()));
    }
    let sum: f64 = actual
        .iter()
        .zip(predicted)
        .map(|(q, q_hat)| (q - q_hat).abs())
        .sum();
    Ok(sum / actual.len() as f64)
}

/// Per-cell evaluation detail: the prediction trace and cell-local
/// metrics (MAPE is None when every target in the cell was zero).
#[derive(Debug, Clone, PartialEq)]
pub struct CellEval {
    pub cell_id: u32,
    pub trace: Vec<TracePoint>,
    pub mape_percent: Option<f64>,
    pub mae: f64,
    pub skipped_zero_targets: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TracePoint {
    pub hour: i64,
    pub actual: f64,
    pub predicted: f64,
}

/// Pooled metrics for one variant over all evaluated cells and hours.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub variant: String,
    pub n: usize,
    pub mape_percent: f64,
    pub mape_fraction: f64,
    pub mae: f64,
    pub skipped_zero_targets: usize,
    pub cells: BTreeMap<u32, CellEval>,
}

/// Rolling forecast over `eval_split`: each window of true history
/// (normalized with the model's training stats) predicts the next
/// `horizon` hours, stepping by the horizon so every hour is predicted
/// exactly once. Inputs may reach back before the split; targets never do.
pub fn predict_series(
    model: &mut ModelGraph,
    norm: &NormStats,
    series: &HourlyCellSeries,
    eval_split: Range<i64>,
) -> Result<Vec<TracePoint>> {
    let window = model.window() as i64;
    let horizon = model.horizon() as i64;
    if eval_split.start - window < series.start_hour {
        return Err(Error::Data(format!(
            "cell {}: not enough history before hour {} for a {window} hour window",
            series.cell_id, eval_split.start
        )));
    }
    let mut out = Vec::new();
    let mut t0 = eval_split.start;
    while t0 + horizon <= eval_split.end {
        let history = series.slice(t0 - window..t0)?;
        let data: Vec<f64> = history.values.iter().map(|v| norm.normalize(*v)).collect();
        let input = NdArray::from_vec(&[window as usize, 1], data)?;
        let prediction = model.forward(&input)?;
        for (step, z) in prediction.data().iter().enumerate() {
            let hour = t0 + step as i64;
            let actual = series.value_at(hour).ok_or_else(|| {
                Error::Data(format!("cell {}: missing hour {hour}", series.cell_id))
            })?;
            out.push(TracePoint {
                hour,
                actual,
                predicted: norm.denormalize(*z),
            });
        }
        t0 += horizon;
    }
    Ok(out)
}

/// Evaluates routed models over the evaluation split, pooling metrics
/// across all cells and hours. `route` maps every cell to a model id
/// ("cluster<i>" or "all"); a cell without a route is an error.
pub fn evaluate(
    models: &mut BTreeMap<String, (ModelGraph, NormStats)>,
    route: &BTreeMap<u32, String>,
    cells: &BTreeMap<u32, HourlyCellSeries>,
    eval_split: Range<i64>,
    variant: &str,
) -> Result<EvalReport> {
    let mut pooled_actual = Vec::new();
    let mut pooled_predicted = Vec::new();
    let mut per_cell = BTreeMap::new();

    for (cell_id, series) in cells {
        let model_id = route.get(cell_id).ok_or_else(|| {
            Error::Data(format!("cell {cell_id} is not routed to any model"))
        })?;
        let (model, norm) = models.get_mut(model_id).ok_or_else(|| {
            Error::Data(format!("cell {cell_id} routed to unknown model {model_id}"))
        })?;
        let trace = predict_series(model, norm, series, eval_split.clone())?;
        let actual: Vec<f64> = trace.iter().map(|p| p.actual).collect();
        let predicted: Vec<f64> = trace.iter().map(|p| p.predicted).collect();
        pooled_actual.extend_from_slice(&actual);
        pooled_predicted.extend_from_slice(&predicted);

        let cell_mae = mae(&actual, &predicted)?;
        let (cell_mape, cell_skipped) = match mape(&actual, &predicted) {
            Ok((m, s)) => (Some(m), s),
            Err(Error::UndefinedMetric(_)) => (None, actual.len()),
            Err(e) => return Err(e),
        };
        per_cell.insert(
            *cell_id,
            CellEval {
                cell_id: *cell_id,
                trace,
                mape_percent: cell_mape,
                mae: cell_mae,
                skipped_zero_targets: cell_skipped,
            },
        );
    }

    let (mape_percent, skipped) = mape(&pooled_actual, &pooled_predicted)?;
    let mae_value = mae(&pooled_actual, &pooled_predicted)?;
    Ok(EvalReport {
        variant: variant.to_string(),
        n: pooled_actual.len() - skipped,
        mape_percent,
        mape_fraction: mape_percent / 100.0,
        mae: mae_value,
        skipped_zero_targets: skipped,
        cells: per_cell,
    })
}

// --- exports ---------------------------------------------------------------

/// Single-row summary CSV for one variant.
pub fn write_summary_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let file = File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "variant,mape_percent,mape_fraction,mae,n,skipped").map_err(Error::io(path))?;
    writeln!(
        w,
        "{},{},{},{},{},{}",
        report.variant,
        report.mape_percent,
        report.mape_fraction,
        report.mae,
        report.n,
        report.skipped_zero_targets
    )
    .map_err(Error::io(path))?;
    w.flush().map_err(Error::io(path))
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<String>> {
    let file = File::open(path).map_err(Error::io(path))?;
    let reader = BufReader::new(file);
    let mut rows = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(Error::io(path))?;
        if idx == 0 {
            if line.trim() != "variant,mape_percent,mape_fraction,mae,n,skipped" {
                return Err(Error::Data(format!(
                    "{}: unexpected header {line:?}",
                    path.display()
                )));
            }
            continue;
        }
        if !line.trim().is_empty() {
            rows.push(line);
        }
    }
    Ok(rows)
}

/// Per-cell metrics CSV (`mape_percent` empty when undefined).
pub fn write_cells_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let file = File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "cell_id,mape_percent,mae,n,skipped").map_err(Error::io(path))?;
    for cell in report.cells.values() {
        let mape_text = cell
            .mape_percent
            .map(|m| m.to_string())
            .unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{}",
            cell.cell_id,
            mape_text,
            cell.mae,
            cell.trace.len() - cell.skipped_zero_targets,
            cell.skipped_zero_targets
        )
        .map_err(Error::io(path))?;
    }
    w.flush().map_err(Error::io(path))
}

/// Per-variant trace CSV `cell_id,hour,actual,predicted`.
pub fn write_trace_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let file = File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "cell_id,hour,actual,predicted").map_err(Error::io(path))?;
    for cell in report.cells.values() {
        for point in &cell.trace {
            writeln!(
                w,
                "{},{},{},{}",
                cell.cell_id, point.hour, point.actual, point.predicted
            )
            .map_err(Error::io(path))?;
        }
    }
    w.flush().map_err(Error::io(path))
}

/// Merges per-variant traces into one CSV with a predicted_<variant>
/// column per report, joined on (cell, hour).
pub fn export_traces(path: &Path, reports: &[&EvalReport]) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::Data("no evaluation reports to export".into()));
    }
    // (cell, hour) -> (actual, per-variant prediction)
    type MergedTraces = BTreeMap<(u32, i64), (f64, Vec<Option<f64>>)>;
    let mut merged: MergedTraces = BTreeMap::new();
    for (vi, report) in reports.iter().enumerate() {
        for cell in report.cells.values() {
            for point in &cell.trace {
                let entry = merged
                    .entry((cell.cell_id, point.hour))
                    .or_insert_with(|| (point.actual, vec![None; reports.len()]));
                entry.1[vi] = Some(point.predicted);
            }
        }
    }
    let file = File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    let header: Vec<String> = reports
        .iter()
        .map(|r| format!("predicted_{}", r.variant))
        .collect();
    writeln!(w, "cell_id,hour,actual,{}", header.join(",")).map_err(Error::io(path))?;
    for ((cell, hour), (actual, predictions)) in &merged {
        let cols: Vec<String> = predictions
            .iter()
            .map(|p| p.map(|v| v.to_string()).unwrap_or_default())
            .collect();
        writeln!(w, "{cell},{hour},{actual},{}", cols.join(",")).map_err(Error::io(path))?;
    }
    w.flush().map_err(Error::io(path))
}

/// Grid heatmap CSV `row,col,mean_traffic`: the span mean of every cell
/// in the series map, with row/col derived from the row-major grid id.
pub fn export_grid_heatmap(path: &Path, cells: &BTreeMap<u32, HourlyCellSeries>) -> Result<()> {
    let file = File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "row,col,mean_traffic").map_err(Error::io(path))?;
    for (cell_id, series) in cells {
        if series.values.is_empty() {
            return Err(Error::Data(format!("cell {cell_id} has an empty series")));
        }
        let mean = series.values.iter().sum::<f64>() / series.values.len() as f64;
        let row = (cell_id - 1) / GRID_SIDE + 1;
        let col = (cell_id - 1) % GRID_SIDE + 1;
        writeln!(w, "{row},{col},{mean}").map_err(Error::io(path))?;
    }
    w.flush().map_err(Error::io(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mape_hand_example() {
        let (m, skipped) = mape(&[100.0, 200.0], &[110.0, 180.0]).unwrap();
        assert!((m - 10.0).abs() < 1e-12);
        assert_eq!(skipped, 0);
    }

    #[test]
    fn mape_perfect_prediction() {
        let (m, _) = mape(&[5.0, 7.0, 9.0], &[5.0, 7.0, 9.0]).unwrap();
        assert_eq!(m, 0.0);
    }

    #[test]
    fn mape_skips_zero_targets() {
        let (m, skipped) = mape(&[0.0, 100.0], &[5.0, 100.0]).unwrap();
        assert_eq!(m, 0.0);
        assert_eq!(skipped, 1);
    }

    #[test]
    fn mape_all_zero_targets_is_undefined() {
        let err = mape(&[0.0, 0.0], &[1.0, 2.0]).unwrap_err();
        assert!(matches!(err, Error::UndefinedMetric(_)));
    }

    #[test]
    fn mae_hand_example() {
        assert!((mae(&[100.0, 200.0], &[110.0, 180.0]).unwrap() - 15.0).abs() < 1e-12);
    }

    #[test]
    fn mae_identical_is_zero() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn mae_detects_constant_offset_exactly() {
        let q: Vec<f64> = (0..50).map(|v| v as f64).collect();
        let shifted: Vec<f64> = q.iter().map(|v| v + 3.25).collect();
        assert_eq!(mae(&q, &shifted).unwrap(), 3.25);
    }

    #[test]
    fn mae_empty_is_an_error() {
        assert!(mae(&[], &[]).is_err());
    }

    fn constant_model(window: usize) -> ModelGraph {
        // Zero weights predict 0 in normalized space, i.e. the scope mean
        // after denormalization: a constant-mean predictor.
        let mut model = crate::model::build_baseline_mlp(&[], window, 1, 0).unwrap();
        for p in crate::nn::Differentiable::params_mut(&mut model) {
            p.value.fill(0.0);
        }
        model
    }

    fn eval_fixture(values: Vec<f64>) -> BTreeMap<u32, HourlyCellSeries> {
        BTreeMap::from([(
            1u32,
            HourlyCellSeries {
                cell_id: 1,
                start_hour: 0,
                values,
            },
        )])
    }

    #[test]
    fn perfect_prediction_scores_zero() {
        // On a constant series the mean predictor is exact.
        let cells = eval_fixture(vec![40.0; 720]);
        let norm = NormStats {
            scope: "all".into(),
            mean: 40.0,
            std: 1.0,
        };
        let mut models = BTreeMap::from([("all".to_string(), (constant_model(24), norm))]);
        let route = BTreeMap::from([(1u32, "all".to_string())]);
        let report = evaluate(&mut models, &route, &cells, 480..720, "test").unwrap();
        assert_eq!(report.mape_percent, 0.0);
        assert_eq!(report.mae, 0.0);
        assert_eq!(report.n, 240);
    }

    #[test]
    fn constant_mean_predictor_matches_brute_force_metrics() {
        let values: Vec<f64> = (0..720).map(|h| 30.0 + ((h % 24) as f64)).collect();
        let cells = eval_fixture(values.clone());
        let mean = 41.5;
        let norm = NormStats {
            scope: "all".into(),
            mean,
            std: 3.0,
        };
        let mut models = BTreeMap::from([("all".to_string(), (constant_model(24), norm))]);
        let route = BTreeMap::from([(1u32, "all".to_string())]);
        let report = evaluate(&mut models, &route, &cells, 480..720, "test").unwrap();

        let actual = &values[480..720];
        let brute_mape =
            100.0 * actual.iter().map(|q| ((q - mean) / q).abs()).sum::<f64>() / 240.0;
        let brute_mae = actual.iter().map(|q| (q - mean).abs()).sum::<f64>() / 240.0;
        assert!((report.mape_percent - brute_mape).abs() < 1e-12);
        assert!((report.mae - brute_mae).abs() < 1e-12);
    }

    #[test]
    fn unrouted_cell_is_an_error() {
        let cells = eval_fixture(vec![1.0; 720]);
        let mut models = BTreeMap::new();
        let route = BTreeMap::new();
        let err = evaluate(&mut models, &route, &cells, 480..720, "t").unwrap_err();
        assert!(err.to_string().contains("not routed"));
    }

    #[test]
    fn eval_targets_stay_inside_the_split() {
        let cells = eval_fixture((0..720).map(|h| 10.0 + h as f64).collect());
        let norm = NormStats {
            scope: "all".into(),
            mean: 0.0,
            std: 1.0,
        };
        let mut models = BTreeMap::from([("all".to_string(), (constant_model(24), norm))]);
        let route = BTreeMap::from([(1u32, "all".to_string())]);
        let report = evaluate(&mut models, &route, &cells, 480..720, "t").unwrap();
        let trace = &report.cells[&1].trace;
        assert_eq!(trace.len(), 240);
        assert!(trace.iter().all(|p| (480..720).contains(&p.hour)));
    }

    #[test]
    fn heatmap_mean_hand_example() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("heatmap.csv");
        let cells = BTreeMap::from([(
            101u32,
            HourlyCellSeries {
                cell_id: 101,
                start_hour: 0,
                values: vec![1.0, 2.0, 6.0],
            },
        )]);
        export_grid_heatmap(&path, &cells).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        // Cell 101 sits at row 2, col 1 of the 100-wide grid; mean is 3.
        assert_eq!(text, "row,col,mean_traffic\n2,1,3\n");
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn brute_force_mape(actual: &[f64], predicted: &[f64]) -> Option<(f64, usize)> {
            let mut ratios = Vec::new();
            let mut skipped = 0;
            for i in 0..actual.len() {
                if actual[i] > MAPE_ZERO_THRESHOLD {
                    ratios.push((actual[i] - predicted[i]).abs() / actual[i]);
                } else {
                    skipped += 1;
                }
            }
            if ratios.is_empty() {
                return None;
            }
            Some((
                100.0 * ratios.iter().sum::<f64>() / ratios.len() as f64,
                skipped,
            ))
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn matches_brute_force(
                pairs in proptest::collection::vec((0.0f64..1e6, -1e6f64..1e6), 1..200),
            ) {
                let actual: Vec<f64> = pairs.iter().map(|p| p.0).collect();
                let predicted: Vec<f64> = pairs.iter().map(|p| p.1).collect();
                match (mape(&actual, &predicted), brute_force_mape(&actual, &predicted)) {
                    (Ok((m, s)), Some((bm, bs))) => {
                        prop_assert!((m - bm).abs() < 1e-12);
                        prop_assert_eq!(s, bs);
                    }
                    (Err(Error::UndefinedMetric(_)), None) => {}
                    (got, want) => prop_assert!(false, "mismatch: {got:?} vs {want:?}"),
                }
                let e = mae(&actual, &predicted).unwrap();
                let brute: f64 = actual
                    .iter()
                    .zip(&predicted)
                    .map(|(a, p)| (a - p).abs())
                    .sum::<f64>() / actual.len() as f64;
                prop_assert!((e - brute).abs() < 1e-9 * brute.max(1.0));
            }
        }
    }
}
