//! Hue-sorted per-altitude composition plots and precipitation onset detection.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::vae::{AxisOrientation, LATENT_DIM};
use crate::viz::{latent_to_rgb, percentile_sorted, Embedding, Image, RgbCalibration, BACKGROUND};

pub const DEFAULT_HUE_ORIGIN: f64 = 270.0;
pub const DEFAULT_HUE_BAND: (f64, f64) = (90.0, 270.0);
pub const DEFAULT_ONSET_THRESHOLD: f64 = 0.05;
const TIME_TOLERANCE_S: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HsvColor {
    /// Degrees in [0, 360); 0 for grays.
    pub h: f64,
    pub s: f64,
    pub v: f64,
}

pub fn rgb_to_hsv(rgb: [u8; 3]) -> HsvColor {
    let [r, g, b] = rgb.map(|c| c as f64 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta == 0.0 {
        return HsvColor { h: 0.0, s, v: max };
    }
    let sector = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    let h = 60.0 * sector;
    HsvColor { h: if h >= 360.0 { h - 360.0 } else { h }, s, v: max }
}

pub fn hsv_to_rgb(c: HsvColor) -> [u8; 3] {
    let h = c.h.rem_euclid(360.0) / 60.0;
    let chroma = c.v * c.s;
    let x = chroma * (1.0 - (h.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (chroma, x, 0.0),
        1 => (x, chroma, 0.0),
        2 => (0.0, chroma, x),
        3 => (0.0, x, chroma),
        4 => (x, 0.0, chroma),
        _ => (chroma, 0.0, x),
    };
    let m = c.v - chroma;
    [r, g, b].map(|ch| (255.0 * (ch + m).clamp(0.0, 1.0) + 0.5).floor() as u8)
}

/// Hue measured from a circular origin, in [0, 360).
pub fn shifted_hue(h: f64, origin: f64) -> f64 {
    (h - origin).rem_euclid(360.0)
}

/// Half-open band [lo, hi); wraps through 0 when lo > hi.
pub fn hue_in_band(h: f64, band: (f64, f64)) -> bool {
    let (lo, hi) = band;
    if lo <= hi {
        h >= lo && h < hi
    } else {
        h >= lo || h < hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowStyle {
    pub s_norm: f64,
    pub v_norm: f64,
    pub hue_origin: f64,
}

impl Default for RowStyle {
    fn default() -> Self {
        Self { s_norm: 1.0, v_norm: 1.0, hue_origin: DEFAULT_HUE_ORIGIN }
    }
}

impl RowStyle {
    pub fn validate(&self) -> Result<()> {
        if !(self.s_norm > 0.0 && self.s_norm <= 1.0 && self.v_norm > 0.0 && self.v_norm <= 1.0) {
            return Err(Error::invalid(format!(
                "saturation {} and value {} must lie in (0, 1]",
                self.s_norm, self.v_norm
            )));
        }
        if !self.hue_origin.is_finite() {
            return Err(Error::invalid("hue origin must be finite"));
        }
        Ok(())
    }
}

/// Hue-sorted colors of the cloudy cells at one altitude.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CompositionRow {
    pub k: u32,
    pub colors: Vec<[u8; 3]>,
    /// Original hue of each sorted cell.
    pub hues: Vec<f64>,
}

impl CompositionRow {
    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }
}

pub fn build_row(
    k: u32,
    zs: &[[f64; LATENT_DIM]],
    cal: &RgbCalibration,
    style: &RowStyle,
) -> Result<CompositionRow> {
    style.validate()?;
    let mut cells: Vec<(f64, f64)> = zs
        .iter()
        .map(|z| {
            let h = rgb_to_hsv(latent_to_rgb(z, cal)).h;
            (shifted_hue(h, style.hue_origin), h)
        })
        .collect();
    cells.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(CompositionRow {
        k,
        colors: cells
            .iter()
            .map(|&(_, h)| hsv_to_rgb(HsvColor { h, s: style.s_norm, v: style.v_norm }))
            .collect(),
        hues: cells.iter().map(|&(_, h)| h).collect(),
    })
}

/// One row per altitude level 0..nz of an embedding.
pub fn build_rows(embedding: &Embedding, nz: u32, cal: &RgbCalibration, style: &RowStyle) -> Result<Vec<CompositionRow>> {
    let mut levels: Vec<Vec<[f64; LATENT_DIM]>> = vec![Vec::new(); nz as usize];
    for r in &embedding.records {
        let level = levels
            .get_mut(r.k as usize)
            .ok_or_else(|| Error::InvalidData(format!("record altitude {} outside 0..{nz}", r.k)))?;
        level.push(r.z64());
    }
    levels.iter().enumerate().map(|(k, zs)| build_row(k as u32, zs, cal, style)).collect()
}

/// Splits `width` over `counts` proportionally with largest-remainder rounding.
pub fn color_extents(counts: &[usize], width: usize) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return vec![0; counts.len()];
    }
    let mut out: Vec<usize> = counts.iter().map(|&c| c * width / total).collect();
    let mut order: Vec<(usize, usize)> = counts.iter().enumerate().map(|(n, &c)| (c * width % total, n)).collect();
    order.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = width - out.iter().sum::<usize>();
    for &(_, n) in order.iter().take(short) {
        out[n] += 1;
    }
    out
}

/// Runs of identical consecutive colors with their counts.
pub fn color_runs(colors: &[[u8; 3]]) -> Vec<([u8; 3], usize)> {
    let mut runs: Vec<([u8; 3], usize)> = Vec::new();
    for &c in colors {
        match runs.last_mut() {
            Some((last, n)) if *last == c => *n += 1,
            _ => runs.push((c, 1)),
        }
    }
    runs
}

/// Stacks rows by altitude (level 0 at the bottom), each stretched to `width`.
pub fn render_composition(rows: &[CompositionRow], width: usize, row_height: usize) -> Result<Image> {
    if width == 0 || row_height == 0 {
        return Err(Error::invalid("composition width and row height must be positive"));
    }
    let n = rows.len();
    let mut img = Image::filled(width, n * row_height, BACKGROUND);
    for (idx, row) in rows.iter().enumerate() {
        let runs = color_runs(&row.colors);
        let counts: Vec<usize> = runs.iter().map(|r| r.1).collect();
        let extents = color_extents(&counts, width);
        let top = (n - 1 - idx) * row_height;
        let mut col = 0;
        for ((color, _), ext) in runs.iter().zip(extents) {
            for c in col..col + ext {
                for r in top..top + row_height {
                    img.set(r, c, *color);
                }
            }
            col += ext;
        }
    }
    Ok(img)
}

/// Layout of the aerosol-by-time panel grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridStyle {
    pub panel_width: usize,
    pub row_height: usize,
    pub row: RowStyle,
}

impl Default for GridStyle {
    fn default() -> Self {
        Self { panel_width: 160, row_height: 4, row: RowStyle::default() }
    }
}

/// Embeddings of one aerosol run, any time order.
#[derive(Debug, Clone, PartialEq)]
pub struct GridRun<'a> {
    pub aerosol_factor: f32,
    pub embeddings: Vec<&'a Embedding>,
}

pub fn find_snapshot<'a>(run: &GridRun<'a>, time: f64) -> Result<&'a Embedding> {
    run.embeddings
        .iter()
        .copied()
        .find(|e| (e.time - time).abs() <= TIME_TOLERANCE_S)
        .ok_or_else(|| {
            Error::Lookup(format!(
                "no snapshot for aerosol factor {} at time {} s",
                run.aerosol_factor, time
            ))
        })
}

const GAP: usize = 6;
const FONT_SCALE: usize = 2;
const LABEL_W: usize = 48;
const LABEL_H: usize = 5 * FONT_SCALE + 2 * GAP;
const INK: [u8; 3] = [0, 0, 0];

/// Rows of aerosol runs, columns of times, with text labels.
pub fn render_grid(
    runs: &[GridRun<'_>],
    times: &[f64],
    nz: u32,
    cal: &RgbCalibration,
    style: &GridStyle,
) -> Result<Image> {
    if runs.is_empty() || times.is_empty() {
        return Err(Error::invalid("grid needs at least one run and one time"));
    }
    let mut jobs = Vec::new();
    for run in runs {
        for &t in times {
            jobs.push(find_snapshot(run, t)?);
        }
    }
    let panels = jobs
        .par_iter()
        .map(|e| render_composition(&build_rows(e, nz, cal, &style.row)?, style.panel_width, style.row_height))
        .collect::<Result<Vec<_>>>()?;
    let ph = nz as usize * style.row_height;
    let width = LABEL_W + times.len() * (style.panel_width + GAP);
    let height = LABEL_H + runs.len() * (ph + GAP);
    let mut img = Image::filled(width, height, BACKGROUND);
    for (c, &t) in times.iter().enumerate() {
        draw_text(&mut img, &time_label(t), GAP, LABEL_W + c * (style.panel_width + GAP));
    }
    for (r, run) in runs.iter().enumerate() {
        let top = LABEL_H + r * (ph + GAP);
        draw_text(&mut img, &format!("{}x", run.aerosol_factor), top + ph / 2, GAP);
        for c in 0..times.len() {
            img.blit(&panels[r * times.len() + c], top, LABEL_W + c * (style.panel_width + GAP));
        }
    }
    Ok(img)
}

fn time_label(t: f64) -> String {
    if t % 3600.0 == 0.0 {
        format!("{}h", t / 3600.0)
    } else if t % 60.0 == 0.0 {
        format!("{}m", t / 60.0)
    } else {
        format!("{t}s")
    }
}

fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        'x' => [0b000, 0b101, 0b010, 0b101, 0b000],
        'h' => [0b100, 0b100, 0b111, 0b101, 0b101],
        'm' => [0b000, 0b110, 0b111, 0b101, 0b101],
        's' => [0b011, 0b100, 0b010, 0b001, 0b110],
        'e' => [0b111, 0b101, 0b111, 0b100, 0b111],
        _ => return None,
    })
}

/// Draws text in a 3x5 bitmap font; unknown characters render as blanks.
fn draw_text(img: &mut Image, text: &str, row: usize, col: usize) {
    for (n, ch) in text.chars().enumerate() {
        let Some(g) = glyph(ch) else { continue };
        let x0 = col + n * 4 * FONT_SCALE;
        for (gy, bits) in g.iter().enumerate() {
            for gx in 0..3 {
                if bits >> (2 - gx) & 1 == 0 {
                    continue;
                }
                for dy in 0..FONT_SCALE {
                    for dx in 0..FONT_SCALE {
                        let (r, c) = (row + gy * FONT_SCALE + dy, x0 + gx * FONT_SCALE + dx);
                        if r < img.height && c < img.width {
                            img.set(r, c, INK);
                        }
                    }
                }
            }
        }
    }
}

/// Number of records whose hue lies in the band.
pub fn band_count(embedding: &Embedding, cal: &RgbCalibration, band: (f64, f64)) -> usize {
    embedding
        .records
        .iter()
        .filter(|r| hue_in_band(rgb_to_hsv(latent_to_rgb(&r.z64(), cal)).h, band))
        .count()
}

pub fn band_fraction(embedding: &Embedding, cal: &RgbCalibration, band: (f64, f64)) -> f64 {
    if embedding.is_empty() {
        return 0.0;
    }
    band_count(embedding, cal, band) as f64 / embedding.len() as f64
}

/// Earliest snapshot time with at least `threshold` of its cells in the hue band.
pub fn detect_onset(run: &[Embedding], cal: &RgbCalibration, band: (f64, f64), threshold: f64) -> Result<Option<f64>> {
    if run.is_empty() {
        return Err(Error::invalid("onset detection needs a non-empty run"));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::invalid(format!("fraction threshold {threshold} outside [0, 1]")));
    }
    let mut order: Vec<&Embedding> = run.iter().collect();
    order.sort_by(|a, b| a.time.total_cmp(&b.time));
    for e in order {
        let n = band_count(e, cal, band);
        if n > 0 && n as f64 >= threshold * e.len() as f64 {
            return Ok(Some(e.time));
        }
    }
    Ok(None)
}

/// Onset report with columns `aerosol_factor,onset_time_s,hue_lo,hue_hi,threshold`.
pub fn onset_csv(rows: &[(f32, Option<f64>)], band: (f64, f64), threshold: f64) -> String {
    let mut out = String::from("aerosol_factor,onset_time_s,hue_lo,hue_hi,threshold\n");
    for (a, t) in rows {
        let t = t.map_or_else(|| "none".to_string(), |t| t.to_string());
        out.push_str(&format!("{a},{t},{},{},{threshold}\n", band.0, band.1));
    }
    out
}

/// Choice of latent axis labeling made by [`canonical_orientation`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientationChoice {
    pub orientation: AxisOrientation,
    pub early_fraction: f64,
    pub late_fraction: f64,
    /// Largest in-band fraction over single early snapshots.
    pub early_peak: f64,
}

impl OrientationChoice {
    /// True when no early snapshot reaches the onset threshold.
    pub fn quiet_before(&self, threshold: f64) -> bool {
        self.early_peak < threshold
    }
}

/// Picks the signed axis permutation that puts late-time cells in the hue
/// band and early-time cells outside it, under pooled percentile calibration.
///
/// Candidates whose early snapshots all stay below `threshold` are preferred;
/// among them (or among all, if none qualifies) the largest late minus early
/// fraction wins. Ties keep the first candidate, so the identity wins when
/// nothing differs.
pub fn canonical_orientation(
    all: &[Embedding],
    early: &[&Embedding],
    late: &[&Embedding],
    pct: (f64, f64),
    band: (f64, f64),
    threshold: f64,
) -> Result<OrientationChoice> {
    if early.iter().all(|e| e.is_empty()) || late.iter().all(|e| e.is_empty()) {
        return Err(Error::invalid("orientation needs non-empty early and late embeddings"));
    }
    let mut ranges = [[(0.0, 0.0); 2]; LATENT_DIM];
    for (d, range) in ranges.iter_mut().enumerate() {
        let mut col: Vec<f64> = all.iter().flat_map(|e| e.records.iter().map(move |r| r.z[d] as f64)).collect();
        if col.is_empty() {
            return Err(Error::DegenerateCalibration("no latent records".into()));
        }
        for (sign, slot) in range.iter_mut().enumerate() {
            if sign == 1 {
                col.iter_mut().for_each(|v| *v = -*v);
            }
            col.sort_by(f64::total_cmp);
            *slot = (percentile_sorted(&col, pct.0), percentile_sorted(&col, pct.1));
        }
    }
    let hits = |e: &Embedding, o: &AxisOrientation, cal: &RgbCalibration| {
        e.records
            .iter()
            .filter(|r| hue_in_band(rgb_to_hsv(latent_to_rgb(&o.apply_f32(&r.z).map(f64::from), cal)).h, band))
            .count()
    };
    let mut best: Option<((bool, f64), OrientationChoice)> = None;
    for o in AxisOrientation::all() {
        let lo = std::array::from_fn(|a| ranges[o.perm[a]][o.flip[a] as usize].0);
        let hi = std::array::from_fn(|a| ranges[o.perm[a]][o.flip[a] as usize].1);
        let cal = RgbCalibration::new(lo, hi, pct.0, pct.1)?;
        let (mut eh, mut en, mut peak) = (0usize, 0usize, 0.0f64);
        for e in early {
            let h = hits(e, &o, &cal);
            if !e.is_empty() {
                peak = peak.max(h as f64 / e.len() as f64);
            }
            eh += h;
            en += e.len();
        }
        let lh: usize = late.iter().map(|e| hits(e, &o, &cal)).sum();
        let ln: usize = late.iter().map(|e| e.len()).sum();
        let choice = OrientationChoice {
            orientation: o,
            early_fraction: eh as f64 / en as f64,
            late_fraction: lh as f64 / ln as f64,
            early_peak: peak,
        };
        let key = (choice.quiet_before(threshold), choice.late_fraction - choice.early_fraction);
        let better = match &best {
            None => true,
            Some((k, _)) => key.0 & !k.0 || (key.0 == k.0 && key.1 > k.1),
        };
        if better {
            best = Some((key, choice));
        }
    }
    Ok(best.expect("48 candidates").1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::viz::LatentRecord;

    fn unit_cal() -> RgbCalibration {
        RgbCalibration::new([0.0; 3], [1.0; 3], 1.0, 99.0).unwrap()
    }

    fn emb_at(time: f64, zs: &[[f32; 3]]) -> Embedding {
        Embedding {
            source: String::new(),
            time,
            aerosol_factor: 1.0,
            records: zs.iter().enumerate().map(|(n, &z)| LatentRecord { i: n as u32, j: 0, k: 0, z }).collect(),
        }
    }

    #[test]
    fn hsv_reference_colors() {
        assert_eq!(rgb_to_hsv([255, 0, 0]), HsvColor { h: 0.0, s: 1.0, v: 1.0 });
        assert_eq!(rgb_to_hsv([0, 255, 0]).h, 120.0);
        assert_eq!(rgb_to_hsv([0, 0, 255]).h, 240.0);
        let g = rgb_to_hsv([128, 128, 128]);
        assert_eq!((g.h, g.s, g.v), (0.0, 0.0, 128.0 / 255.0));
        assert!((rgb_to_hsv([255, 0, 1]).h - (360.0 - 60.0 / 255.0)).abs() < 1e-9);
        assert_eq!(hsv_to_rgb(HsvColor { h: 300.0, s: 1.0, v: 1.0 }), [255, 0, 255]);
        assert_eq!(hsv_to_rgb(HsvColor { h: 60.0, s: 1.0, v: 1.0 }), [255, 255, 0]);
    }

    #[test]
    fn hsv_round_trip_on_saturated_colors() {
        for h in (0..360).step_by(7) {
            let c = hsv_to_rgb(HsvColor { h: h as f64, s: 1.0, v: 1.0 });
            let back = rgb_to_hsv(c);
            assert!((back.h - h as f64).abs() < 0.5, "{h} -> {c:?} -> {}", back.h);
        }
    }

    #[test]
    fn row_sorts_from_origin() {
        // magenta (300) and green (120) hues
        let zs = [[0.0, 1.0, 0.0], [1.0, 0.0, 1.0]];
        let row = build_row(4, &zs, &unit_cal(), &RowStyle::default()).unwrap();
        assert_eq!(row.hues, vec![300.0, 120.0]);
        assert_eq!(row.colors, vec![[255, 0, 255], [0, 255, 0]]);
        let empty = build_row(0, &[], &unit_cal(), &RowStyle::default()).unwrap();
        assert!(empty.is_empty());
        let same = build_row(0, &[[0.2, 0.7, 0.1]; 5], &unit_cal(), &RowStyle::default()).unwrap();
        assert!(same.colors.windows(2).all(|w| w[0] == w[1]));
        let bad = RowStyle { s_norm: 0.0, ..RowStyle::default() };
        assert!(build_row(0, &zs, &unit_cal(), &bad).is_err());
    }

    #[test]
    fn extents_sum_to_width() {
        assert_eq!(color_extents(&[1, 3], 400), vec![100, 300]);
        assert_eq!(color_extents(&[1, 1, 1], 100), vec![34, 33, 33]);
        assert_eq!(color_extents(&[1, 3], 800), vec![200, 600]);
        assert_eq!(color_extents(&[], 10), Vec::<usize>::new());
        assert_eq!(color_extents(&[5, 0, 2], 3).iter().sum::<usize>(), 3);
    }

    #[test]
    fn composition_layout() {
        let row0 = CompositionRow { k: 0, colors: vec![[1, 1, 1], [2, 2, 2], [2, 2, 2], [2, 2, 2]], hues: vec![0.0; 4] };
        let row1 = CompositionRow { k: 1, ..Default::default() };
        let img = render_composition(&[row0, row1], 8, 2).unwrap();
        assert_eq!((img.width, img.height), (8, 4));
        assert_eq!(img.get(0, 0), BACKGROUND);
        assert_eq!(img.get(2, 1), [1, 1, 1]);
        assert_eq!(img.get(3, 2), [2, 2, 2]);
        assert_eq!(img.get(3, 7), [2, 2, 2]);
        let blank = render_composition(&[CompositionRow::default()], 5, 1).unwrap();
        assert_eq!(blank, Image::filled(5, 1, BACKGROUND));
    }

    #[test]
    fn grid_lookup_and_shape() {
        let a = emb_at(0.0, &[[0.5, 0.5, 0.5]]);
        let b = emb_at(3600.0, &[[0.9, 0.1, 0.1]]);
        let runs = [GridRun { aerosol_factor: 1.0, embeddings: vec![&a, &b] }];
        let style = GridStyle { panel_width: 10, row_height: 2, ..GridStyle::default() };
        let img = render_grid(&runs, &[3600.0], 1, &unit_cal(), &style).unwrap();
        assert_eq!(img.width, LABEL_W + 10 + GAP);
        assert_eq!(img.height, LABEL_H + 2 + GAP);
        match render_grid(&runs, &[7200.0], 1, &unit_cal(), &style) {
            Err(Error::Lookup(msg)) => assert!(msg.contains("aerosol factor 1") && msg.contains("7200")),
            other => panic!("{other:?}"),
        }
        let twin = emb_at(0.0, &[[0.5, 0.5, 0.5]]);
        let runs = [
            GridRun { aerosol_factor: 0.5, embeddings: vec![&a] },
            GridRun { aerosol_factor: 2.0, embeddings: vec![&twin] },
        ];
        let img = render_grid(&runs, &[0.0], 1, &unit_cal(), &style).unwrap();
        let ph = 2;
        for r in 0..ph {
            for c in 0..10 {
                assert_eq!(img.get(LABEL_H + r, LABEL_W + c), img.get(LABEL_H + ph + GAP + r, LABEL_W + c));
            }
        }
    }

    #[test]
    fn onset_step_series() {
        let ambient = [0.9f32, 0.1, 0.1];
        let green = [0.1f32, 0.9, 0.1];
        let run: Vec<Embedding> = (0..20)
            .map(|step| {
                let mut zs = vec![ambient; 10];
                if step >= 10 {
                    zs[0] = green;
                    zs[1] = green;
                }
                emb_at(step as f64 * 600.0, &zs)
            })
            .collect();
        let cal = unit_cal();
        assert_eq!(detect_onset(&run, &cal, DEFAULT_HUE_BAND, 0.05).unwrap(), Some(6000.0));
        assert_eq!(detect_onset(&run, &cal, DEFAULT_HUE_BAND, 0.0).unwrap(), Some(6000.0));
        assert_eq!(detect_onset(&run, &cal, DEFAULT_HUE_BAND, 0.5).unwrap(), None);
        let mut reversed = run.clone();
        reversed.reverse();
        assert_eq!(detect_onset(&reversed, &cal, DEFAULT_HUE_BAND, 0.05).unwrap(), Some(6000.0));
        assert!(detect_onset(&[], &cal, DEFAULT_HUE_BAND, 0.05).is_err());
    }

    #[test]
    fn onset_csv_layout() {
        let csv = onset_csv(&[(0.5, Some(7200.0)), (2.0, None)], DEFAULT_HUE_BAND, 0.05);
        assert_eq!(csv, "aerosol_factor,onset_time_s,hue_lo,hue_hi,threshold\n0.5,7200,90,270,0.05\n2,none,90,270,0.05\n");
    }

    #[test]
    fn wrapping_band() {
        assert!(hue_in_band(350.0, (300.0, 30.0)));
        assert!(hue_in_band(10.0, (300.0, 30.0)));
        assert!(!hue_in_band(30.0, (300.0, 30.0)));
        assert!(hue_in_band(90.0, DEFAULT_HUE_BAND) && !hue_in_band(270.0, DEFAULT_HUE_BAND));
    }

    #[test]
    fn orientation_moves_late_cells_into_band() {
        // ambient varies along dim 1, novelty along dim 2 toward negative values
        let early: Vec<[f32; 3]> = (0..50).map(|n| [n as f32 / 50.0, 0.0, (n % 7) as f32 / 7.0]).collect();
        let mut late = early.clone();
        late.extend((0..50).map(|n| [0.5, -1.0 - n as f32 / 50.0, (n % 5) as f32 / 5.0]));
        let (e, l) = (emb_at(0.0, &early), emb_at(1.0, &late));
        let all = [e.clone(), l.clone()];
        let choice = canonical_orientation(&all, &[&e], &[&l], (1.0, 99.0), DEFAULT_HUE_BAND, 0.05).unwrap();
        assert!(choice.late_fraction - choice.early_fraction > 0.3, "{choice:?}");
        let oriented: Vec<Embedding> = all.iter().map(|x| x.oriented(&choice.orientation)).collect();
        let cal = crate::viz::calibrate_rgb(&oriented, 1.0, 99.0).unwrap();
        assert_eq!(band_fraction(&oriented[0], &cal, DEFAULT_HUE_BAND), choice.early_fraction);
        assert!(choice.quiet_before(0.05));
    }

    #[test]
    fn orientation_prefers_quiet_early_snapshots() {
        // candidate A: best contrast overall but one early snapshot is loud
        let quiet: Vec<[f32; 3]> = (0..40).map(|n| [1.0, 0.0, n as f32 / 40.0]).collect();
        let mut loud = quiet.clone();
        loud.extend((0..4).map(|_| [0.0, 1.0, 0.5]));
        let late: Vec<[f32; 3]> = (0..40).map(|n| [0.0, 1.0, n as f32 / 40.0]).collect();
        let (e0, e1, l) = (emb_at(0.0, &quiet), emb_at(1.0, &loud), emb_at(2.0, &late));
        let all = [e0.clone(), e1.clone(), l.clone()];
        let choice = canonical_orientation(&all, &[&e0, &e1], &[&l], (0.0, 100.0), DEFAULT_HUE_BAND, 0.5).unwrap();
        assert!(choice.quiet_before(0.5));
        assert!(choice.late_fraction > 0.9, "{choice:?}");
    }
}
