//! Sparse snapshots of cloudy grid cells and the DSD1 on-disk format.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::dsd::{normalize_dsd, summed_mixing_ratio, Dsd, CLEAR_AIR_THRESHOLD};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DSD1";
/// Size of the fixed DSD1 header in bytes.
pub const DSD1_HEADER_BYTES: usize = 4 + 4 * 4 + 4 + 8 + 4 + 8;

/// Full-scale reference grid: 25.6 km / 40 m horizontally, 3 km / 40 m vertically.
pub const REFERENCE_DIMS: GridDims = GridDims { nx: 640, ny: 640, nz: 75 };
/// Desk-scale grid used by default.
pub const DESK_DIMS: GridDims = GridDims { nx: 64, ny: 64, nz: 24 };

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridDims {
    pub nx: u32,
    pub ny: u32,
    pub nz: u32,
}

impl GridDims {
    pub fn contains(&self, i: u32, j: u32, k: u32) -> bool {
        i < self.nx && j < self.ny && k < self.nz
    }

    pub fn n_cells(&self) -> u64 {
        self.nx as u64 * self.ny as u64 * self.nz as u64
    }
}

/// One cloudy cell.
///
/// `raw_sum` is the summed mixing ratio before normalization. Filtering always compares
/// against it, so re-filtering a normalized snapshot keeps the same cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub i: u32,
    pub j: u32,
    pub k: u32,
    pub raw_sum: f64,
    pub dsd: Dsd,
}

/// Cloudy cells of one simulation run at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotField {
    pub dims: GridDims,
    /// Cell edge length in m.
    pub cell_size: f32,
    /// Seconds since simulation start.
    pub time: f64,
    pub aerosol_factor: f32,
    normalized: bool,
    cells: Vec<Cell>,
}

impl SnapshotField {
    /// Builds a snapshot from already-filtered, normalized cells.
    pub fn new(
        dims: GridDims,
        cell_size: f32,
        time: f64,
        aerosol_factor: f32,
        cells: Vec<Cell>,
    ) -> Result<Self> {
        let s = Self {
            dims,
            cell_size,
            time,
            aerosol_factor,
            normalized: true,
            cells,
        };
        s.validate()?;
        Ok(s)
    }

    /// Builds a snapshot from unprocessed spectra; `raw_sum` is taken from each spectrum.
    pub fn from_raw(
        dims: GridDims,
        cell_size: f32,
        time: f64,
        aerosol_factor: f32,
        raw: Vec<(u32, u32, u32, Dsd)>,
    ) -> Result<Self> {
        let cells = raw
            .into_iter()
            .map(|(i, j, k, dsd)| {
                Ok(Cell {
                    i,
                    j,
                    k,
                    raw_sum: summed_mixing_ratio(&dsd)?,
                    dsd,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let s = Self {
            dims,
            cell_size,
            time,
            aerosol_factor,
            normalized: false,
            cells,
        };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.cells.len());
        let n_bins = self.cells.first().map(|c| c.dsd.len());
        for c in &self.cells {
            if !self.dims.contains(c.i, c.j, c.k) {
                return Err(Error::invalid(format!(
                    "cell ({}, {}, {}) outside grid {:?}",
                    c.i, c.j, c.k, self.dims
                )));
            }
            if !seen.insert((c.i, c.j, c.k)) {
                return Err(Error::invalid(format!(
                    "duplicate cell ({}, {}, {})",
                    c.i, c.j, c.k
                )));
            }
            if Some(c.dsd.len()) != n_bins {
                return Err(Error::invalid("cells disagree on bin count"));
            }
        }
        Ok(())
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Bin count of the stored spectra (0 for an empty snapshot).
    pub fn n_bins(&self) -> usize {
        self.cells.first().map_or(0, |c| c.dsd.len())
    }

    /// Rounds every floating-point cell field to `f32`, the precision DSD1 stores.
    pub fn quantized_f32(&self) -> Self {
        let mut s = self.clone();
        for c in &mut s.cells {
            c.raw_sum = c.raw_sum as f32 as f64;
            c.dsd = c.dsd.quantized_f32();
        }
        s
    }
}

/// Keeps the cells whose summed mixing ratio is at least `threshold` (inclusive).
pub fn filter_clear_air(snapshot: &SnapshotField, threshold: f64) -> Result<SnapshotField> {
    if !(threshold > 0.0) {
        return Err(Error::invalid(format!("threshold must be positive, got {threshold}")));
    }
    let cells = snapshot
        .cells
        .iter()
        .filter(|c| c.raw_sum >= threshold)
        .cloned()
        .collect();
    Ok(SnapshotField {
        cells,
        ..snapshot.clone_header()
    })
}

/// [`filter_clear_air`] with the default 1e-5 threshold followed by cell-wise normalization.
pub fn preprocess(snapshot: &SnapshotField) -> Result<SnapshotField> {
    normalize_snapshot(&filter_clear_air(snapshot, CLEAR_AIR_THRESHOLD)?)
}

/// Normalizes every cell to unit mass, keeping the raw sums.
pub fn normalize_snapshot(snapshot: &SnapshotField) -> Result<SnapshotField> {
    let cells = snapshot
        .cells
        .iter()
        .map(|c| {
            Ok(Cell {
                dsd: normalize_dsd(&c.dsd)?,
                ..c.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SnapshotField {
        cells,
        normalized: true,
        ..snapshot.clone_header()
    })
}

impl SnapshotField {
    fn clone_header(&self) -> SnapshotField {
        SnapshotField {
            dims: self.dims,
            cell_size: self.cell_size,
            time: self.time,
            aerosol_factor: self.aerosol_factor,
            normalized: self.normalized,
            cells: Vec::new(),
        }
    }
}

/// Serializes a normalized snapshot to DSD1 bytes.
pub fn encode_snapshot(snapshot: &SnapshotField) -> Result<Vec<u8>> {
    if !snapshot.normalized {
        return Err(Error::invalid("DSD1 stores normalized spectra only"));
    }
    let n_bins = snapshot.n_bins();
    let n_bins = if snapshot.is_empty() { crate::dsd::N_BINS } else { n_bins };
    let mut w = Writer::default();
    w.buf.reserve(DSD1_HEADER_BYTES + snapshot.len() * (16 + 4 * n_bins));
    w.bytes(MAGIC);
    w.u32(snapshot.dims.nx);
    w.u32(snapshot.dims.ny);
    w.u32(snapshot.dims.nz);
    w.u32(n_bins as u32);
    w.f32(snapshot.cell_size);
    w.f64(snapshot.time);
    w.f32(snapshot.aerosol_factor);
    w.u64(snapshot.len() as u64);
    for c in &snapshot.cells {
        w.u32(c.i);
        w.u32(c.j);
        w.u32(c.k);
        w.f32(c.raw_sum as f32);
        for v in c.dsd.as_slice() {
            w.f32(*v as f32);
        }
    }
    Ok(w.buf)
}

/// Parses DSD1 bytes.
pub fn decode_snapshot(bytes: &[u8]) -> Result<SnapshotField> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let dims = GridDims {
        nx: r.u32("nx")?,
        ny: r.u32("ny")?,
        nz: r.u32("nz")?,
    };
    let n_bins_off = r.offset();
    let n_bins = r.u32("n_bins")? as usize;
    if n_bins == 0 {
        return Err(Error::format(n_bins_off, "n_bins must be at least 1"));
    }
    let cell_size = r.f32("cell_size")?;
    let time = r.f64("time")?;
    let aerosol_factor = r.f32("aerosol_factor")?;
    let count_off = r.offset();
    let n_cells = r.u64("n_cells")?;
    let record = 16u64 + 4 * n_bins as u64;
    let payload = n_cells
        .checked_mul(record)
        .ok_or_else(|| Error::format(count_off, format!("cell count {n_cells} overflows")))?;
    if n_cells > dims.n_cells() {
        return Err(Error::format(
            count_off,
            format!("{n_cells} cells exceed grid capacity {}", dims.n_cells()),
        ));
    }
    if payload > r.remaining() as u64 {
        return Err(Error::format(
            r.offset(),
            format!(
                "truncated file: {n_cells} records need {payload} bytes, {} left",
                r.remaining()
            ),
        ));
    }
    let mut cells = Vec::with_capacity(n_cells as usize);
    let mut seen = HashSet::with_capacity(n_cells as usize);
    for _ in 0..n_cells {
        let off = r.offset();
        let (i, j, k) = (r.u32("i")?, r.u32("j")?, r.u32("k")?);
        if !dims.contains(i, j, k) {
            return Err(Error::format(off, format!("cell ({i}, {j}, {k}) outside grid")));
        }
        if !seen.insert((i, j, k)) {
            return Err(Error::format(off, format!("duplicate cell ({i}, {j}, {k})")));
        }
        let raw_sum = r.f32("raw_sum")? as f64;
        let ratios = (0..n_bins)
            .map(|_| r.f32("mixing ratio").map(f64::from))
            .collect::<Result<Vec<_>>>()?;
        let dsd = Dsd::new(ratios).map_err(|e| Error::format(off, e.to_string()))?;
        cells.push(Cell { i, j, k, raw_sum, dsd });
    }
    r.finish()?;
    Ok(SnapshotField {
        dims,
        cell_size,
        time,
        aerosol_factor,
        normalized: true,
        cells,
    })
}

pub fn write_snapshot(snapshot: &SnapshotField, path: &Path) -> Result<()> {
    write_file(path, &encode_snapshot(snapshot)?)
}

pub fn read_snapshot(path: &Path) -> Result<SnapshotField> {
    decode_snapshot(&read_file(path)?)
}

/// Lossless CSV export, one row per cell: `i,j,k,raw_sum,m01..mNN`.
pub fn snapshot_to_csv(snapshot: &SnapshotField) -> String {
    let mut out = String::from("i,j,k,raw_sum");
    for b in 1..=snapshot.n_bins() {
        let _ = write!(out, ",m{b:02}");
    }
    out.push('\n');
    for c in &snapshot.cells {
        let _ = write!(out, "{},{},{},{}", c.i, c.j, c.k, c.raw_sum);
        for v in c.dsd.as_slice() {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsd::N_BINS;

    fn dims() -> GridDims {
        GridDims { nx: 4, ny: 4, nz: 2 }
    }

    fn raw_with_sums(sums: &[f64]) -> SnapshotField {
        let raw = sums
            .iter()
            .enumerate()
            .map(|(n, s)| {
                let mut v = vec![0.0; N_BINS];
                v[5] = s * 0.5;
                v[9] = s * 0.5;
                (n as u32, 0, 0, Dsd::new(v).unwrap())
            })
            .collect();
        SnapshotField::from_raw(dims(), 40.0, 600.0, 1.0, raw).unwrap()
    }

    #[test]
    fn threshold_is_inclusive() {
        let snap = raw_with_sums(&[9.99e-6, 1e-5, 0.0, 3e-4]);
        let kept = filter_clear_air(&snap, 1e-5).unwrap();
        let idx: Vec<u32> = kept.cells().iter().map(|c| c.i).collect();
        assert_eq!(idx, vec![1, 3]);
    }

    #[test]
    fn exact_boundary_cell_is_retained() {
        let mut v = vec![0.0; N_BINS];
        v[0] = 1e-5;
        let snap =
            SnapshotField::from_raw(dims(), 40.0, 0.0, 1.0, vec![(0, 0, 0, Dsd::new(v).unwrap())])
                .unwrap();
        assert_eq!(snap.cells()[0].raw_sum, 1e-5);
        assert_eq!(filter_clear_air(&snap, 1e-5).unwrap().len(), 1);
    }

    #[test]
    fn all_clear_air_gives_empty_output() {
        let snap = raw_with_sums(&[0.0, 0.0, 0.0]);
        assert!(filter_clear_air(&snap, 1e-5).unwrap().is_empty());
        assert!(filter_clear_air(&snap, 0.0).is_err());
    }

    #[test]
    fn preprocessing_is_idempotent() {
        let snap = raw_with_sums(&[2e-5, 9e-6, 4e-4, 1.5e-5]);
        let once = preprocess(&snap).unwrap();
        assert_eq!(once.len(), 3);
        for c in once.cells() {
            let s: f64 = c.dsd.as_slice().iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(c.raw_sum >= 1e-5);
        }
        let twice = preprocess(&once).unwrap();
        assert_eq!(twice.len(), once.len());
        for (a, b) in once.cells().iter().zip(twice.cells()) {
            assert_eq!(a.raw_sum, b.raw_sum);
            for (x, y) in a.dsd.as_slice().iter().zip(b.dsd.as_slice()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn duplicates_and_out_of_bounds_rejected() {
        let d = Dsd::new(vec![1.0; N_BINS]).unwrap();
        let dup = vec![(1, 1, 1, d.clone()), (1, 1, 1, d.clone())];
        assert!(SnapshotField::from_raw(dims(), 40.0, 0.0, 1.0, dup).is_err());
        let oob = vec![(4, 0, 0, d)];
        assert!(SnapshotField::from_raw(dims(), 40.0, 0.0, 1.0, oob).is_err());
    }

    #[test]
    fn empty_and_single_cell_round_trip() {
        let empty = SnapshotField::new(dims(), 40.0, 0.0, 0.5, vec![]).unwrap();
        let bytes = encode_snapshot(&empty).unwrap();
        assert_eq!(bytes.len(), DSD1_HEADER_BYTES);
        assert_eq!(decode_snapshot(&bytes).unwrap(), empty);

        let one = preprocess(&raw_with_sums(&[5e-4])).unwrap().quantized_f32();
        let bytes = encode_snapshot(&one).unwrap();
        assert_eq!(bytes.len(), DSD1_HEADER_BYTES + 16 + 4 * N_BINS);
        assert_eq!(decode_snapshot(&bytes).unwrap(), one);
    }

    #[test]
    fn raw_snapshots_cannot_be_written() {
        assert!(encode_snapshot(&raw_with_sums(&[1e-3])).is_err());
    }

    #[test]
    fn decode_reports_offsets() {
        let one = preprocess(&raw_with_sums(&[5e-4, 6e-4])).unwrap();
        let bytes = encode_snapshot(&one).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_snapshot(&bad), Err(Error::Format { offset: 0, .. })));

        let cut = &bytes[..bytes.len() - 3];
        match decode_snapshot(cut) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, DSD1_HEADER_BYTES as u64),
            other => panic!("expected format error, got {other:?}"),
        }
        assert!(matches!(
            decode_snapshot(&bytes[..10]),
            Err(Error::Format { offset: 8, .. })
        ));

        let mut huge = bytes.clone();
        huge[DSD1_HEADER_BYTES - 8..DSD1_HEADER_BYTES].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(
            decode_snapshot(&huge),
            Err(Error::Format { offset, .. }) if offset == (DSD1_HEADER_BYTES - 8) as u64
        ));
    }

    #[test]
    fn csv_is_lossless() {
        let snap = preprocess(&raw_with_sums(&[3.3e-5, 7.1e-4])).unwrap();
        let csv = snapshot_to_csv(&snap);
        let mut lines = csv.lines();
        assert!(lines.next().unwrap().starts_with("i,j,k,raw_sum,m01"));
        for (line, cell) in lines.zip(snap.cells()) {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields.len(), 4 + N_BINS);
            assert_eq!(fields[3].parse::<f64>().unwrap(), cell.raw_sum);
            for (f, v) in fields[4..].iter().zip(cell.dsd.as_slice()) {
                assert_eq!(f.parse::<f64>().unwrap(), *v);
            }
        }
    }
}
