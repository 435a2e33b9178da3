//! Raw grid records -> hourly per-cell traffic series, central-block cell
//! selection, and the labeled synthetic generator used to exercise the
//! clustering and training pipeline.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const MS_PER_SLOT: i64 = 600_000;
pub const MS_PER_HOUR: i64 = 3_600_000;
pub const GRID_SIDE: u32 = 100;
pub const GRID_CELLS: u32 = GRID_SIDE * GRID_SIDE;

/// One line of the raw tab-separated activity dump. Activity fields that
/// were absent in the input are zero here.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub cell_id: u32,
    pub timestamp_ms: i64,
    pub country_code: i64,
    pub sms_in: f64,
    pub sms_out: f64,
    pub call_in: f64,
    pub call_out: f64,
    pub internet: f64,
}

impl RawRecord {
    pub fn activity(&self, selector: ActivitySelector) -> f64 {
        match selector {
            ActivitySelector::Internet => self.internet,
            ActivitySelector::Total => {
                self.sms_in + self.sms_out + self.call_in + self.call_out + self.internet
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivitySelector {
    Internet,
    Total,
}

impl std::str::FromStr for ActivitySelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "internet" => Ok(ActivitySelector::Internet),
            "total" => Ok(ActivitySelector::Total),
            other => Err(Error::Usage(format!(
                "unknown selector {other:?} (expected internet or total)"
            ))),
        }
    }
}

impl std::fmt::Display for ActivitySelector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ActivitySelector::Internet => write!(f, "internet"),
            ActivitySelector::Total => write!(f, "total"),
        }
    }
}

/// Hourly traffic volumes for one cell over a contiguous span of hours.
#[derive(Debug, Clone, PartialEq)]
pub struct HourlyCellSeries {
    pub cell_id: u32,
    /// Epoch hour index of values[0].
    pub start_hour: i64,
    pub values: Vec<f64>,
}

impl HourlyCellSeries {
    pub fn end_hour(&self) -> i64 {
        self.start_hour + self.values.len() as i64
    }

    pub fn value_at(&self, hour: i64) -> Option<f64> {
        if hour < self.start_hour || hour >= self.end_hour() {
            return None;
        }
        Some(self.values[(hour - self.start_hour) as usize])
    }

    /// Copy of the sub-series covering `range` (half-open hour indices).
    pub fn slice(&self, range: Range<i64>) -> Result<HourlyCellSeries> {
        if range.start < self.start_hour || range.end > self.end_hour() || range.start > range.end
        {
            return Err(Error::Data(format!(
                "cell {}: slice {}..{} outside span {}..{}",
                self.cell_id,
                range.start,
                range.end,
                self.start_hour,
                self.end_hour()
            )));
        }
        let a = (range.start - self.start_hour) as usize;
        let b = (range.end - self.start_hour) as usize;
        Ok(HourlyCellSeries {
            cell_id: self.cell_id,
            start_hour: range.start,
            values: self.values[a..b].to_vec(),
        })
    }
}

/// Parses one tab-separated record line. `line_no` is 1-based and only
/// used for error reporting.
pub fn parse_record(line: &str, line_no: usize) -> Result<RawRecord> {
    let fields: Vec<&str> = line.trim_end_matches(['\r', '\n']).split('\t').collect();
    if fields.len() < 3 {
        return Err(Error::Parse {
            line: line_no,
            msg: format!("expected at least 3 tab-separated fields, got {}", fields.len()),
        });
    }
    if fields.len() > 8 {
        return Err(Error::Parse {
            line: line_no,
            msg: format!("expected at most 8 fields, got {}", fields.len()),
        });
    }
    let cell_id: u32 = fields[0].parse().map_err(|_| Error::Parse {
        line: line_no,
        msg: format!("malformed cell id {:?}", fields[0]),
    })?;
    if !(1..=GRID_CELLS).contains(&cell_id) {
        return Err(Error::Validation(format!(
            "line {line_no}: cell id {cell_id} outside [1, {GRID_CELLS}]"
        )));
    }
    let timestamp_ms: i64 = fields[1].parse().map_err(|_| Error::Parse {
        line: line_no,
        msg: format!("malformed timestamp {:?}", fields[1]),
    })?;
    if timestamp_ms.rem_euclid(MS_PER_SLOT) != 0 {
        return Err(Error::Validation(format!(
            "line {line_no}: timestamp {timestamp_ms} not aligned to a 10-minute slot"
        )));
    }
    let country_code: i64 = match fields.get(2) {
        Some(&"") | None => 0,
        Some(s) => s.parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("malformed country code {:?}", s),
        })?,
    };
    let mut activity = [0.0f64; 5];
    for (slot, value) in activity.iter_mut().enumerate() {
        let field = fields.get(3 + slot).copied().unwrap_or("");
        if field.is_empty() {
            continue;
        }
        let parsed: f64 = field.parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("malformed activity value {field:?}"),
        })?;
        if parsed < 0.0 {
            return Err(Error::Validation(format!(
                "line {line_no}: negative activity value {parsed}"
            )));
        }
        *value = parsed;
    }
    Ok(RawRecord {
        cell_id,
        timestamp_ms,
        country_code,
        sms_in: activity[0],
        sms_out: activity[1],
        call_in: activity[2],
        call_out: activity[3],
        internet: activity[4],
    })
}

/// Epoch hour index of a record after applying the local-time offset.
pub fn record_hour(record: &RawRecord, tz_offset_hours: i64) -> i64 {
    record.timestamp_ms.div_euclid(MS_PER_HOUR) + tz_offset_hours
}

/// Result of hourly accumulation over a record stream.
#[derive(Debug, Default)]
pub struct HourlyAggregate {
    pub cells: BTreeMap<u32, HourlyCellSeries>,
    pub skipped_out_of_span: u64,
}

/// Sums the selected activity per (cell, hour) over all country codes.
/// Hours without records stay zero; every returned series covers the full
/// span. Records outside the span are counted and skipped.
pub fn aggregate_hourly(
    records: impl IntoIterator<Item = RawRecord>,
    selector: ActivitySelector,
    span: Range<i64>,
    tz_offset_hours: i64,
) -> Result<HourlyAggregate> {
    if span.start >= span.end {
        return Err(Error::Validation(format!(
            "empty aggregation span {}..{}",
            span.start, span.end
        )));
    }
    let n_hours = (span.end - span.start) as usize;
    let mut agg = HourlyAggregate::default();
    for record in records {
        let hour = record_hour(&record, tz_offset_hours);
        if hour < span.start || hour >= span.end {
            agg.skipped_out_of_span += 1;
            continue;
        }
        let series = agg
            .cells
            .entry(record.cell_id)
            .or_insert_with(|| HourlyCellSeries {
                cell_id: record.cell_id,
                start_hour: span.start,
                values: vec![0.0; n_hours],
            });
        series.values[(hour - span.start) as usize] += record.activity(selector);
    }
    Ok(agg)
}

/// The centered `block_side x block_side` block of a row-major
/// `grid_side x grid_side` grid with ids starting at 1. The block is
/// symmetric about the grid center, so it is invariant to row/column
/// flips of the orientation convention.
pub fn select_central_cells(grid_side: u32, block_side: u32) -> Result<BTreeSet<u32>> {
    if grid_side == 0 || block_side == 0 {
        return Err(Error::Validation("grid and block sides must be positive".into()));
    }
    if block_side > grid_side {
        return Err(Error::Validation(format!(
            "block side {block_side} exceeds grid side {grid_side}"
        )));
    }
    if !(grid_side - block_side).is_multiple_of(2) {
        return Err(Error::Validation(format!(
            "grid side {grid_side} and block side {block_side} differ by an odd margin; \
             the block cannot be centered"
        )));
    }
    let margin = (grid_side - block_side) / 2;
    let lo = margin + 1;
    let hi = margin + block_side;
    let mut out = BTreeSet::new();
    for row in lo..=hi {
        for col in lo..=hi {
            out.insert((row - 1) * grid_side + col);
        }
    }
    Ok(out)
}

/// One synthetic traffic regime: a daily bump at `peak_hour` on top of a
/// flat base, with multiplicative log-normal noise on the bump term.
#[derive(Debug, Clone, PartialEq)]
pub struct Regime {
    pub peak_hour: u8,
    pub base_level: f64,
    pub amplitude: f64,
    pub noise_sigma: f64,
    pub cell_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_cells: u32,
    pub regimes: Vec<Regime>,
    pub n_days: u32,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_cells == 0 || self.n_days == 0 || self.regimes.is_empty() {
            return Err(Error::Validation(
                "synthetic spec needs cells, days and at least one regime".into(),
            ));
        }
        let mut peaks = BTreeSet::new();
        let mut fraction_sum = 0.0;
        for r in &self.regimes {
            if r.peak_hour > 23 {
                return Err(Error::Validation(format!(
                    "regime peak hour {} outside 0..=23",
                    r.peak_hour
                )));
            }
            if !peaks.insert(r.peak_hour) {
                return Err(Error::Validation(format!(
                    "duplicate regime peak hour {}",
                    r.peak_hour
                )));
            }
            if r.base_level <= 0.0 || r.amplitude < 0.0 || r.noise_sigma < 0.0 {
                return Err(Error::Validation(
                    "regime needs base_level > 0, amplitude >= 0, noise_sigma >= 0".into(),
                ));
            }
            if r.cell_fraction <= 0.0 || r.cell_fraction > 1.0 {
                return Err(Error::Validation(
                    "regime cell_fraction must be in (0, 1]".into(),
                ));
            }
            fraction_sum += r.cell_fraction;
        }
        if (fraction_sum - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!(
                "regime cell fractions sum to {fraction_sum}, expected 1"
            )));
        }
        Ok(())
    }
}

/// Smooth circular bump peaking at delta = 0 with a fixed 2-hour width.
fn daily_bump(delta_hours: f64) -> f64 {
    const WIDTH_HOURS: f64 = 2.0;
    let d = delta_hours.rem_euclid(24.0);
    let circ = d.min(24.0 - d);
    (-circ * circ / (2.0 * WIDTH_HOURS * WIDTH_HOURS)).exp()
}

/// Deterministic labeled synthetic traffic. Cells 1..=n are assigned to
/// regimes in contiguous runs whose sizes follow the cumulative cell
/// fractions (rounded), so label counts are reproducible. Returns the
/// series map and the cell -> regime-index labels.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
) -> Result<(BTreeMap<u32, HourlyCellSeries>, BTreeMap<u32, usize>)> {
    spec.validate()?;
    let n = spec.n_cells as usize;
    let n_hours = (spec.n_days * 24) as usize;

    let mut boundaries = Vec::with_capacity(spec.regimes.len() + 1);
    boundaries.push(0usize);
    let mut cum = 0.0;
    for r in &spec.regimes {
        cum += r.cell_fraction;
        boundaries.push((cum * n as f64).round() as usize);
    }
    *boundaries.last_mut().unwrap() = n;

    let mut series = BTreeMap::new();
    let mut labels = BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    for (regime_idx, regime) in spec.regimes.iter().enumerate() {
        for cell_idx in boundaries[regime_idx]..boundaries[regime_idx + 1] {
            let cell_id = cell_idx as u32 + 1;
            let mut values = Vec::with_capacity(n_hours);
            for hour in 0..n_hours {
                let delta = (hour % 24) as f64 - regime.peak_hour as f64;
                let bump = regime.amplitude * daily_bump(delta);
                let noisy_bump = if regime.noise_sigma > 0.0 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    bump * (regime.noise_sigma * z).exp()
                } else {
                    bump
                };
                values.push(regime.base_level + noisy_bump);
            }
            series.insert(
                cell_id,
                HourlyCellSeries {
                    cell_id,
                    start_hour: 0,
                    values,
                },
            );
            labels.insert(cell_id, regime_idx);
        }
    }
    Ok((series, labels))
}

// --- series persistence -------------------------------------------------

const SERIES_MAGIC: &[u8; 8] = b"CCSERIES";
const SERIES_VERSION: u32 = 1;

/// CSV export with header `cell_id,hour_index,value`; hour indices are
/// absolute. Values print in shortest round-trip form.
pub fn write_series_csv(path: &Path, cells: &BTreeMap<u32, HourlyCellSeries>) -> Result<()> {
    let file = File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "cell_id,hour_index,value").map_err(Error::io(path))?;
    for series in cells.values() {
        for (offset, value) in series.values.iter().enumerate() {
            writeln!(
                w,
                "{},{},{}",
                series.cell_id,
                series.start_hour + offset as i64,
                value
            )
            .map_err(Error::io(path))?;
        }
    }
    w.flush().map_err(Error::io(path))
}

pub fn read_series_csv(path: &Path) -> Result<BTreeMap<u32, HourlyCellSeries>> {
    let file = File::open(path).map_err(Error::io(path))?;
    let reader = BufReader::new(file);
    let mut cells: BTreeMap<u32, HourlyCellSeries> = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(Error::io(path))?;
        let line_no = idx + 1;
        if line_no == 1 {
            if line.trim() != "cell_id,hour_index,value" {
                return Err(Error::Data(format!(
                    "{}: unexpected header {line:?}",
                    path.display()
                )));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let (Some(cell), Some(hour), Some(value)) = (parts.next(), parts.next(), parts.next())
        else {
            return Err(Error::Parse {
                line: line_no,
                msg: "expected cell_id,hour_index,value".into(),
            });
        };
        let cell: u32 = cell.parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("malformed cell id {cell:?}"),
        })?;
        let hour: i64 = hour.parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("malformed hour index {hour:?}"),
        })?;
        let value: f64 = value.parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("malformed value {value:?}"),
        })?;
        let entry = cells.entry(cell).or_insert_with(|| HourlyCellSeries {
            cell_id: cell,
            start_hour: hour,
            values: Vec::new(),
        });
        if entry.end_hour() != hour {
            return Err(Error::Data(format!(
                "{}: line {line_no}: cell {cell} hours are not contiguous",
                path.display()
            )));
        }
        entry.values.push(value);
    }
    Ok(cells)
}

/// Compact binary cache of a series map; requires all series to share one
/// span. Reload is bit-exact.
pub fn write_series_bin(path: &Path, cells: &BTreeMap<u32, HourlyCellSeries>) -> Result<()> {
    let mut spans = cells.values().map(|s| (s.start_hour, s.values.len()));
    let (start_hour, n_hours) = spans.next().unwrap_or((0, 0));
    if spans.any(|s| s != (start_hour, n_hours)) {
        return Err(Error::Data(
            "binary series cache requires a shared span across cells".into(),
        ));
    }
    let file = File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    let write = |w: &mut BufWriter<File>, bytes: &[u8]| -> Result<()> {
        w.write_all(bytes).map_err(Error::io(path))
    };
    write(&mut w, SERIES_MAGIC)?;
    write(&mut w, &SERIES_VERSION.to_le_bytes())?;
    write(&mut w, &(cells.len() as u64).to_le_bytes())?;
    write(&mut w, &start_hour.to_le_bytes())?;
    write(&mut w, &(n_hours as u64).to_le_bytes())?;
    for series in cells.values() {
        write(&mut w, &series.cell_id.to_le_bytes())?;
        for v in &series.values {
            write(&mut w, &v.to_bits().to_le_bytes())?;
        }
    }
    w.flush().map_err(Error::io(path))
}

pub fn read_series_bin(path: &Path) -> Result<BTreeMap<u32, HourlyCellSeries>> {
    let file = File::open(path).map_err(Error::io(path))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(Error::io(path))?;
    if &magic != SERIES_MAGIC {
        return Err(Error::Data(format!(
            "{}: not a series cache (bad magic)",
            path.display()
        )));
    }
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u32buf).map_err(Error::io(path))?;
    let version = u32::from_le_bytes(u32buf);
    if version != SERIES_VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported series cache version {version}",
            path.display()
        )));
    }
    r.read_exact(&mut u64buf).map_err(Error::io(path))?;
    let n_cells = u64::from_le_bytes(u64buf) as usize;
    r.read_exact(&mut u64buf).map_err(Error::io(path))?;
    let start_hour = i64::from_le_bytes(u64buf);
    r.read_exact(&mut u64buf).map_err(Error::io(path))?;
    let n_hours = u64::from_le_bytes(u64buf) as usize;

    let mut cells = BTreeMap::new();
    for _ in 0..n_cells {
        r.read_exact(&mut u32buf).map_err(Error::io(path))?;
        let cell_id = u32::from_le_bytes(u32buf);
        let mut values = Vec::with_capacity(n_hours);
        for _ in 0..n_hours {
            r.read_exact(&mut u64buf).map_err(Error::io(path))?;
            values.push(f64::from_bits(u64::from_le_bytes(u64buf)));
        }
        cells.insert(
            cell_id,
            HourlyCellSeries {
                cell_id,
                start_hour,
                values,
            },
        );
    }
    Ok(cells)
}

/// Reads a series file in either format, deciding by the binary magic.
pub fn read_series_auto(path: &Path) -> Result<BTreeMap<u32, HourlyCellSeries>> {
    let mut head = [0u8; 8];
    let n = {
        let mut f = File::open(path).map_err(Error::io(path))?;
        f.read(&mut head).map_err(Error::io(path))?
    };
    if n == 8 && &head == SERIES_MAGIC {
        read_series_bin(path)
    } else {
        read_series_csv(path)
    }
}

/// Parses and aggregates every `<dir>/*.txt` / `*.tsv` file (sorted by
/// name) into one hourly map. Merging by (cell, hour) is additive, so the
/// result does not depend on how records are split across files.
pub fn ingest_dir(
    dir: &Path,
    selector: ActivitySelector,
    span: Range<i64>,
    tz_offset_hours: i64,
) -> Result<HourlyAggregate> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(Error::io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("txt") | Some("tsv")
            )
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!(
            "no .txt or .tsv input files in {}",
            dir.display()
        )));
    }
    let n_hours = (span.end - span.start) as usize;
    let mut total = HourlyAggregate::default();
    for file in &files {
        log::info!("ingesting {}", file.display());
        let records = read_records(file)?;
        let agg = aggregate_hourly(records, selector, span.clone(), tz_offset_hours)?;
        total.skipped_out_of_span += agg.skipped_out_of_span;
        for (cell_id, series) in agg.cells {
            match total.cells.entry(cell_id) {
                std::collections::btree_map::Entry::Vacant(v) => {
                    v.insert(series);
                }
                std::collections::btree_map::Entry::Occupied(mut o) => {
                    let target = o.get_mut();
                    debug_assert_eq!(target.values.len(), n_hours);
                    for (a, b) in target.values.iter_mut().zip(&series.values) {
                        *a += b;
                    }
                }
            }
        }
    }
    Ok(total)
}

fn read_records(path: &Path) -> Result<Vec<RawRecord>> {
    let file = File::open(path).map_err(Error::io(path))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(Error::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_record(&line, idx + 1)?);
    }
    Ok(records)
}

/// `cell_id,regime` labels emitted next to synthetic series.
pub fn write_labels_csv(path: &Path, labels: &BTreeMap<u32, usize>) -> Result<()> {
    let file = File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "cell_id,regime").map_err(Error::io(path))?;
    for (cell, regime) in labels {
        writeln!(w, "{cell},{regime}").map_err(Error::io(path))?;
    }
    w.flush().map_err(Error::io(path))
}

pub fn read_labels_csv(path: &Path) -> Result<BTreeMap<u32, usize>> {
    let file = File::open(path).map_err(Error::io(path))?;
    let reader = BufReader::new(file);
    let mut labels = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(Error::io(path))?;
        if idx == 0 || line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let (Some(cell), Some(regime)) = (parts.next(), parts.next()) else {
            return Err(Error::Parse {
                line: idx + 1,
                msg: "expected cell_id,regime".into(),
            });
        };
        let cell = cell.parse().map_err(|_| Error::Parse {
            line: idx + 1,
            msg: format!("malformed cell id {cell:?}"),
        })?;
        let regime = regime.parse().map_err(|_| Error::Parse {
            line: idx + 1,
            msg: format!("malformed regime {regime:?}"),
        })?;
        labels.insert(cell, regime);
    }
    Ok(labels)
}
