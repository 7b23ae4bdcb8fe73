//! Latent embeddings, latent-to-RGB calibration and slice rendering.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::snapshot::{GridDims, SnapshotField};
use crate::vae::{encode, AxisOrientation, VaeModel, LATENT_DIM};

const LAT1_MAGIC: &[u8; 4] = b"LAT1";
pub const LAT1_HEADER_BYTES: usize = 4 + 4 + 8 + 4;
pub const LAT1_RECORD_BYTES: usize = 3 * 4 + LATENT_DIM * 4;

pub const DEFAULT_PCT_LO: f64 = 1.0;
pub const DEFAULT_PCT_HI: f64 = 99.0;
pub const BACKGROUND: [u8; 3] = [255, 255, 255];

/// Latent position of one cloudy cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentRecord {
    pub i: u32,
    pub j: u32,
    pub k: u32,
    pub z: [f32; LATENT_DIM],
}

impl LatentRecord {
    pub fn z64(&self) -> [f64; LATENT_DIM] {
        self.z.map(f64::from)
    }
}

/// Encoder means for every cell of one snapshot, in snapshot cell order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Embedding {
    /// Snapshot path relative to the dataset root; not stored in LAT1.
    pub source: String,
    pub time: f64,
    pub aerosol_factor: f32,
    pub records: Vec<LatentRecord>,
}

impl Embedding {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn oriented(&self, o: &AxisOrientation) -> Self {
        let mut e = self.clone();
        for r in &mut e.records {
            r.z = o.apply_f32(&r.z);
        }
        e
    }
}

pub fn embed_snapshot(model: &VaeModel, snapshot: &SnapshotField) -> Result<Embedding> {
    let want = model.trunk.input_dim();
    if snapshot.n_bins() != want && !snapshot.is_empty() {
        return Err(Error::invalid(format!(
            "snapshot has {} bins, model expects {want}",
            snapshot.n_bins()
        )));
    }
    let records = snapshot
        .cells()
        .par_iter()
        .map(|c| {
            let (mu, _) = encode(model, c.dsd.as_slice())?;
            Ok(LatentRecord { i: c.i, j: c.j, k: c.k, z: mu.map(|v| v as f32) })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Embedding {
        source: String::new(),
        time: snapshot.time,
        aerosol_factor: snapshot.aerosol_factor,
        records,
    })
}

/// Embeds every snapshot with the encoder mean.
pub fn embed_dataset(model: &VaeModel, snapshots: &[SnapshotField]) -> Result<Vec<Embedding>> {
    snapshots.iter().map(|s| embed_snapshot(model, s)).collect()
}

pub fn encode_embedding(e: &Embedding) -> Result<Vec<u8>> {
    let n = u32::try_from(e.records.len()).map_err(|_| Error::invalid("too many records for LAT1"))?;
    let mut w = Writer::default();
    w.buf.reserve(LAT1_HEADER_BYTES + e.records.len() * LAT1_RECORD_BYTES);
    w.bytes(LAT1_MAGIC);
    w.u32(n);
    w.f64(e.time);
    w.f32(e.aerosol_factor);
    for r in &e.records {
        w.u32(r.i);
        w.u32(r.j);
        w.u32(r.k);
        for v in r.z {
            w.f32(v);
        }
    }
    Ok(w.buf)
}

pub fn decode_embedding(bytes: &[u8]) -> Result<Embedding> {
    let mut r = Reader::new(bytes);
    r.magic(LAT1_MAGIC)?;
    let n = r.u32("record count")? as usize;
    let time = r.f64("time")?;
    let aerosol_factor = r.f32("aerosol factor")?;
    let need = n.checked_mul(LAT1_RECORD_BYTES);
    if need.is_none_or(|need| need != r.remaining()) {
        return Err(Error::format(
            r.offset(),
            format!("{n} records need {} bytes, {} present", n.saturating_mul(LAT1_RECORD_BYTES), r.remaining()),
        ));
    }
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let off = r.offset();
        let (i, j, k) = (r.u32("i")?, r.u32("j")?, r.u32("k")?);
        let mut z = [0f32; LATENT_DIM];
        for v in &mut z {
            *v = r.f32("z")?;
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(off, "non-finite latent coordinate"));
        }
        records.push(LatentRecord { i, j, k, z });
    }
    r.finish()?;
    Ok(Embedding { source: String::new(), time, aerosol_factor, records })
}

pub fn write_embedding(e: &Embedding, path: &Path) -> Result<()> {
    write_file(path, &encode_embedding(e)?)
}

pub fn read_embedding(path: &Path) -> Result<Embedding> {
    decode_embedding(&read_file(path)?)
}

/// Per-dimension affine range mapping latent values onto [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RgbCalibration {
    pub lo: [f64; LATENT_DIM],
    pub hi: [f64; LATENT_DIM],
    pub pct_lo: f64,
    pub pct_hi: f64,
}

impl RgbCalibration {
    pub fn new(lo: [f64; LATENT_DIM], hi: [f64; LATENT_DIM], pct_lo: f64, pct_hi: f64) -> Result<Self> {
        for d in 0..LATENT_DIM {
            if !(lo[d].is_finite() && hi[d].is_finite() && lo[d] < hi[d]) {
                return Err(Error::DegenerateCalibration(format!(
                    "dimension {}: lo {} must be below hi {}",
                    d + 1,
                    lo[d],
                    hi[d]
                )));
            }
        }
        Ok(Self { lo, hi, pct_lo, pct_hi })
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# percentiles {} {}\n# dim lo hi\n", self.pct_lo, self.pct_hi);
        for d in 0..LATENT_DIM {
            let _ = writeln!(out, "{} {} {}", d + 1, self.lo[d], self.hi[d]);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::InvalidData(format!("calibration: {msg}"));
        let mut pct = None;
        let mut lo = [f64::NAN; LATENT_DIM];
        let mut hi = [f64::NAN; LATENT_DIM];
        let mut seen = [false; LATENT_DIM];
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if let Some(rest) = line.strip_prefix("# percentiles") {
                let v: Vec<f64> = rest
                    .split_whitespace()
                    .map(|t| t.parse().map_err(|_| bad(format!("bad percentile {t:?}"))))
                    .collect::<Result<_>>()?;
                if v.len() != 2 {
                    return Err(bad("percentile header needs two values".into()));
                }
                pct = Some((v[0], v[1]));
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 3 {
                return Err(bad(format!("expected `dim lo hi`, got {line:?}")));
            }
            let d: usize = f[0].parse().map_err(|_| bad(format!("bad dimension {:?}", f[0])))?;
            if d == 0 || d > LATENT_DIM || seen[d - 1] {
                return Err(bad(format!("bad or repeated dimension {d}")));
            }
            seen[d - 1] = true;
            lo[d - 1] = f[1].parse().map_err(|_| bad(format!("bad lo {:?}", f[1])))?;
            hi[d - 1] = f[2].parse().map_err(|_| bad(format!("bad hi {:?}", f[2])))?;
        }
        let (pl, ph) = pct.ok_or_else(|| bad("missing percentile header".into()))?;
        if seen.iter().any(|s| !s) {
            return Err(bad("missing dimension".into()));
        }
        Self::new(lo, hi, pl, ph)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_text().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        Self::parse(&String::from_utf8_lossy(&bytes))
    }
}

/// Linear-interpolated percentile of sorted values.
pub fn percentile_sorted(sorted: &[f64], pct: f64) -> f64 {
    let pos = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        return sorted[lo];
    }
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Pooled per-dimension percentile ranges over all records.
pub fn calibrate_rgb(embeddings: &[Embedding], pct_lo: f64, pct_hi: f64) -> Result<RgbCalibration> {
    calibrate_points(embeddings.iter().flat_map(|e| e.records.iter().map(|r| r.z64())), pct_lo, pct_hi)
}

pub fn calibrate_points<I>(points: I, pct_lo: f64, pct_hi: f64) -> Result<RgbCalibration>
where
    I: IntoIterator<Item = [f64; LATENT_DIM]>,
{
    if !(0.0..=100.0).contains(&pct_lo) || !(0.0..=100.0).contains(&pct_hi) || pct_lo > pct_hi {
        return Err(Error::invalid(format!("percentiles ({pct_lo}, {pct_hi}) out of order or range")));
    }
    let mut cols: [Vec<f64>; LATENT_DIM] = Default::default();
    for z in points {
        for d in 0..LATENT_DIM {
            cols[d].push(z[d]);
        }
    }
    if cols[0].is_empty() {
        return Err(Error::DegenerateCalibration("no latent records".into()));
    }
    let mut lo = [0.0; LATENT_DIM];
    let mut hi = [0.0; LATENT_DIM];
    for d in 0..LATENT_DIM {
        cols[d].sort_by(f64::total_cmp);
        lo[d] = percentile_sorted(&cols[d], pct_lo);
        hi[d] = percentile_sorted(&cols[d], pct_hi);
    }
    RgbCalibration::new(lo, hi, pct_lo, pct_hi)
}

/// Dimension 1 to red, 2 to green, 3 to blue, clamped and rounded half up.
pub fn latent_to_rgb(z: &[f64; LATENT_DIM], cal: &RgbCalibration) -> [u8; 3] {
    std::array::from_fn(|d| {
        let t = (z[d] - cal.lo[d]) / (cal.hi[d] - cal.lo[d]);
        let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
        (255.0 * t + 0.5).floor() as u8
    })
}

/// Row-major RGB8 image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&color);
        }
        Self { width, height, pixels }
    }

    pub fn get(&self, row: usize, col: usize) -> [u8; 3] {
        let o = (row * self.width + col) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    pub fn set(&mut self, row: usize, col: usize, c: [u8; 3]) {
        let o = (row * self.width + col) * 3;
        self.pixels[o..o + 3].copy_from_slice(&c);
    }

    /// Copies `src` with its top-left corner at (row, col), clipping at the edges.
    pub fn blit(&mut self, src: &Image, row: usize, col: usize) {
        for r in 0..src.height.min(self.height.saturating_sub(row)) {
            let n = src.width.min(self.width.saturating_sub(col)) * 3;
            let d = ((row + r) * self.width + col) * 3;
            let s = r * src.width * 3;
            self.pixels[d..d + n].copy_from_slice(&src.pixels[s..s + n]);
        }
    }
}

pub fn encode_ppm(image: &Image) -> Result<Vec<u8>> {
    if image.width == 0 || image.height == 0 {
        return Err(Error::invalid("cannot write an empty image"));
    }
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    Ok(out)
}

pub fn write_ppm(image: &Image, path: &Path) -> Result<()> {
    write_file(path, &encode_ppm(image)?)
}

/// Reads the binary PPM variant produced by [`encode_ppm`].
pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(pos as u64, "truncated PPM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(Error::format(0, "expected P6 with maxval 255"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::format(0, format!("bad dimension {s:?}")));
    let (width, height) = (parse(&fields[1])?, parse(&fields[2])?);
    if bytes.len() < pos || bytes.len() - pos != width * height * 3 {
        return Err(Error::format(pos as u64, "pixel payload size mismatch"));
    }
    Ok(Image { width, height, pixels: bytes[pos..].to_vec() })
}

pub fn encode_png(image: &Image) -> Result<Vec<u8>> {
    if image.width == 0 || image.height == 0 {
        return Err(Error::invalid("cannot write an empty image"));
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.width as u32, image.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::InvalidData(format!("png: {e}")))?;
        w.write_image_data(&image.pixels).map_err(|e| Error::InvalidData(format!("png: {e}")))?;
    }
    Ok(out)
}

pub fn write_png(image: &Image, path: &Path) -> Result<()> {
    write_file(path, &encode_png(image)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceAxis {
    /// Constant altitude k; image is nx wide, ny tall, row 0 at j = ny-1.
    Horizontal,
    /// Constant j; image is nx wide, nz tall, row 0 at the top altitude.
    Vertical,
}

pub fn render_slice(
    embedding: &Embedding,
    dims: GridDims,
    axis: SliceAxis,
    index: u32,
    cal: &RgbCalibration,
) -> Result<Image> {
    let (limit, height) = match axis {
        SliceAxis::Horizontal => (dims.nz, dims.ny),
        SliceAxis::Vertical => (dims.ny, dims.nz),
    };
    if index >= limit {
        return Err(Error::invalid(format!("slice index {index} outside 0..{limit}")));
    }
    let mut img = Image::filled(dims.nx as usize, height as usize, BACKGROUND);
    for r in &embedding.records {
        if !dims.contains(r.i, r.j, r.k) {
            return Err(Error::InvalidData(format!("record ({}, {}, {}) outside grid", r.i, r.j, r.k)));
        }
        let row = match axis {
            SliceAxis::Horizontal if r.k == index => dims.ny - 1 - r.j,
            SliceAxis::Vertical if r.j == index => dims.nz - 1 - r.k,
            _ => continue,
        };
        img.set(row as usize, r.i as usize, latent_to_rgb(&r.z64(), cal));
    }
    Ok(img)
}
