//! Synthetic LES-like snapshot sequences.
//!
//! Each cloudy cell carries a ground-truth pathway position `s` in `[0, 1]` (0 = ambient
//! small-droplet spectrum, 1 = fully precipitating). Cloud geometry comes from hash-based
//! value noise, so every time step can be generated independently from `(seed, step)`.
//! Precipitation starts at an onset time that grows with the aerosol factor.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::binio::write_file;
use crate::dsd::{normalize_dsd, Dsd, CLEAR_AIR_THRESHOLD, N_BINS};
use crate::error::{Error, Result};
use crate::snapshot::{encode_snapshot, preprocess, GridDims, SnapshotField, DESK_DIMS};

/// Mass-weighted mean diameter (mm) above which a spectrum counts as precipitating.
pub const PRECIP_CUTOFF_MM: f64 = 0.1;

/// Default onset time in seconds for an aerosol factor.
///
/// Piecewise linear in `log2(aerosol_factor)` through 2 h, 4 h and 7 h at factors
/// 0.5, 1 and 2, extrapolated linearly outside that range. These hours only mimic the
/// reported behaviour; they are not derived from any physics.
pub fn default_onset_time(aerosol_factor: f64) -> f64 {
    let x = aerosol_factor.log2();
    let hours = if x < 0.0 { 4.0 + 2.0 * x } else { 4.0 + 3.0 * x };
    hours * 3600.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub dims: GridDims,
    pub cell_size: f32,
    pub n_timesteps: u32,
    /// Seconds between snapshots.
    pub dt: f64,
    pub aerosol_factor: f32,
    /// Seconds; `s` stays 0 everywhere before this time.
    pub onset_time: f64,
    /// Seconds for a fully mature column to go from `s = 0` to `s = 1` after onset.
    pub ramp_time: f64,
    /// 1-indexed mode bin of the ambient spectrum.
    pub ambient_mode_bin: usize,
    /// 1-indexed mode bin of the precipitating spectrum.
    pub precip_mode_bin: usize,
    /// Standard deviation, in bins, of the ambient spectrum.
    pub spectral_width: f64,
    /// Standard deviation, in bins, of the precipitating spectrum.
    pub precip_width: f64,
    /// Upward shift of the ambient mode, in bins, from cloud base to the highest cloud top.
    pub altitude_mode_shift: f64,
    /// Log-normal sigma of the multiplicative per-bin noise.
    pub noise_sigma: f64,
    /// Column-field level above which a column holds cloud; lower means more cloud.
    pub cloud_threshold: f64,
    /// Lowest in-cloud level.
    pub cloud_base: u32,
    /// Maximum cloud depth in levels.
    pub max_depth: u32,
    pub seed: u64,
}

impl SynthConfig {
    pub fn desk(aerosol_factor: f32, seed: u64) -> Self {
        Self {
            dims: DESK_DIMS,
            cell_size: 40.0,
            n_timesteps: 48,
            dt: 600.0,
            aerosol_factor,
            onset_time: default_onset_time(aerosol_factor as f64),
            ramp_time: 4500.0,
            ambient_mode_bin: 7,
            precip_mode_bin: 20,
            spectral_width: 1.2,
            precip_width: 3.5,
            altitude_mode_shift: 0.5,
            noise_sigma: 0.05,
            cloud_threshold: 0.79,
            cloud_base: 5,
            max_depth: 16,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, bin) in [
            ("ambient_mode_bin", self.ambient_mode_bin),
            ("precip_mode_bin", self.precip_mode_bin),
        ] {
            if !(1..=N_BINS).contains(&bin) {
                return Err(Error::invalid(format!("{name} = {bin} outside 1..={N_BINS}")));
            }
        }
        if self.dims.nx == 0 || self.dims.ny == 0 || self.dims.nz == 0 {
            return Err(Error::invalid("grid dimensions must be positive"));
        }
        if !(self.dt > 0.0) || !(self.ramp_time > 0.0) {
            return Err(Error::invalid("dt and ramp_time must be positive"));
        }
        if !(self.spectral_width > 0.0) || !(self.precip_width > 0.0) {
            return Err(Error::invalid("spectral widths must be positive"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise_sigma must be non-negative"));
        }
        if !(self.aerosol_factor > 0.0) {
            return Err(Error::invalid("aerosol_factor must be positive"));
        }
        Ok(())
    }

    pub fn time_of(&self, step: u32) -> f64 {
        step as f64 * self.dt
    }
}

/// Mass spectrum over bins `1..=N_BINS`, gamma-shaped in bin index with the given mode and
/// standard deviation (both in bins). Not normalized.
fn gamma_spectrum(mode: f64, width: f64) -> Vec<f64> {
    let theta = (-mode + (mode * mode + 4.0 * width * width).sqrt()) / 2.0;
    let shape = 1.0 + mode / theta;
    let logs: Vec<f64> = (1..=N_BINS)
        .map(|k| {
            let x = k as f64;
            (shape - 1.0) * x.ln() - x / theta
        })
        .collect();
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    logs.iter().map(|l| (l - top).exp()).collect()
}

fn spectrum_at<R: Rng>(
    s: f64,
    altitude: f64,
    width_scale: f64,
    cfg: &SynthConfig,
    noise: Option<&mut R>,
) -> Dsd {
    let ambient = cfg.ambient_mode_bin as f64 + cfg.altitude_mode_shift * altitude;
    let mode = ambient + s * (cfg.precip_mode_bin as f64 - ambient);
    let width = width_scale * (cfg.spectral_width + s * (cfg.precip_width - cfg.spectral_width));
    let mut v = gamma_spectrum(mode, width);
    if let Some(rng) = noise {
        for x in &mut v {
            let e: f64 = rng.sample(StandardNormal);
            *x *= (cfg.noise_sigma * e).exp();
        }
    }
    normalize_dsd(&Dsd::new(v).expect("gamma spectrum is finite")).expect("positive mass")
}

/// Normalized spectrum at pathway position `s`.
///
/// With `noise_seed = None` the spectrum is noise-free; otherwise per-bin log-normal noise
/// drawn from a stream seeded by `noise_seed` is applied before normalization.
pub fn pathway_dsd(s: f64, cfg: &SynthConfig, noise_seed: Option<u64>) -> Result<Dsd> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::invalid(format!("pathway position {s} outside [0, 1]")));
    }
    let mut rng = noise_seed.map(ChaCha8Rng::seed_from_u64);
    Ok(spectrum_at(s, 0.0, 1.0, cfg, rng.as_mut()))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn lattice_value(seed: u64, a: i64, b: i64, c: i64) -> f64 {
    let h = splitmix(seed ^ splitmix(a as u64 ^ splitmix(b as u64 ^ splitmix(c as u64))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Value noise in `[0, 1)`, periodic in `x` and `y` with the given lattice periods.
fn value_noise(seed: u64, x: f64, y: f64, t: f64, period: (i64, i64)) -> f64 {
    let (x0, y0, t0) = (x.floor(), y.floor(), t.floor());
    let (fx, fy, ft) = (smooth(x - x0), smooth(y - y0), smooth(t - t0));
    let (x0, y0, t0) = (x0 as i64, y0 as i64, t0 as i64);
    let mut acc = 0.0;
    for dx in 0..2 {
        for dy in 0..2 {
            for dt in 0..2 {
                let w = if dx == 1 { fx } else { 1.0 - fx }
                    * if dy == 1 { fy } else { 1.0 - fy }
                    * if dt == 1 { ft } else { 1.0 - ft };
                let v = lattice_value(
                    seed,
                    (x0 + dx).rem_euclid(period.0),
                    (y0 + dy).rem_euclid(period.1),
                    t0 + dt,
                );
                acc += w * v;
            }
        }
    }
    acc
}

/// A generated snapshot together with the ground-truth pathway position of every cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSnapshot {
    pub field: SnapshotField,
    /// Aligned with `field.cells()`.
    pub s_true: Vec<f64>,
}

const COLUMN_SPACING: f64 = 8.0;
const COLUMN_TIMESCALE: f64 = 3600.0;

/// Generates the snapshot at time `t` (seconds). Deterministic in `(cfg.seed, t)`.
pub fn generate_snapshot(t: f64, cfg: &SynthConfig) -> Result<SyntheticSnapshot> {
    cfg.validate()?;
    if !(t >= 0.0) || t > cfg.n_timesteps as f64 * cfg.dt {
        return Err(Error::invalid(format!("time {t} outside the simulated period")));
    }
    let dims = cfg.dims;
    let period = (
        ((dims.nx as f64 / COLUMN_SPACING).ceil() as i64).max(1),
        ((dims.ny as f64 / COLUMN_SPACING).ceil() as i64).max(1),
    );
    let geo_seed = splitmix(cfg.seed ^ 0xC10D);
    let maturity_seed = splitmix(cfg.seed ^ 0x4A1E);
    let width_seed = splitmix(cfg.seed ^ 0x51DE);
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed ^ splitmix(t.to_bits())));

    let progress = ((t - cfg.onset_time) / cfg.ramp_time).max(0.0);
    let precipitating = t >= cfg.onset_time;
    let base = cfg.cloud_base.min(dims.nz.saturating_sub(1));
    let thr = cfg.cloud_threshold;

    let mut raw = Vec::new();
    let mut truth = Vec::new();
    for j in 0..dims.ny {
        for i in 0..dims.nx {
            let (x, y) = (i as f64 / COLUMN_SPACING, j as f64 / COLUMN_SPACING);
            let c = value_noise(geo_seed, x, y, t / COLUMN_TIMESCALE, period);
            if c < thr - 0.03 {
                continue;
            }
            let strength = ((c - thr) / (1.0 - thr)).clamp(0.0, 1.0);
            let depth = ((strength * cfg.max_depth as f64).round() as u32).max(1);
            let top = (base + depth - 1).min(dims.nz - 1);
            let maturity = value_noise(maturity_seed, x * 1.7, y * 1.7, 0.0, (i64::MAX, i64::MAX));
            let gain = (2.5 * (strength - 0.3) + 1.0 * (maturity - 0.5)).clamp(0.0, 1.5);
            let column_s = if precipitating { (progress * gain).min(1.0) } else { 0.0 };
            let width_scale =
                1.0 + 0.6 * (value_noise(width_seed, x * 2.3, y * 2.3, 0.0, (i64::MAX, i64::MAX)) - 0.5);

            if c < thr {
                // thin haze at cloud edges; falls below the clear-air threshold
                let q = CLEAR_AIR_THRESHOLD * (0.2 + 0.7 * rng.gen::<f64>());
                let dsd = spectrum_at(0.0, 0.0, width_scale, cfg, Some(&mut rng));
                raw.push((i, j, base, scale(&dsd, q)));
                truth.push(0.0);
                continue;
            }
            for k in base..=top {
                let from_top = (top - k) as f64 / (top - base).max(1) as f64;
                let altitude = (k - base) as f64 / cfg.max_depth.max(1) as f64;
                let s = (column_s * (0.55 + 0.45 * from_top)).clamp(0.0, 1.0);
                let q = CLEAR_AIR_THRESHOLD * (1.5 + 40.0 * strength * (1.0 - from_top * 0.5))
                    * (0.8 + 0.4 * rng.gen::<f64>());
                let dsd = spectrum_at(s, altitude, width_scale, cfg, Some(&mut rng));
                raw.push((i, j, k, scale(&dsd, q)));
                truth.push(s);
            }
            if column_s > 0.5 {
                let s = (column_s * 1.1).min(1.0);
                for k in 0..base {
                    let q = CLEAR_AIR_THRESHOLD * (1.2 + 8.0 * column_s) * (0.8 + 0.4 * rng.gen::<f64>());
                    let dsd = spectrum_at(s, 0.0, width_scale, cfg, Some(&mut rng));
                    raw.push((i, j, k, scale(&dsd, q)));
                    truth.push(s);
                }
            }
        }
    }

    let raw_field = SnapshotField::from_raw(dims, cfg.cell_size, t, cfg.aerosol_factor, raw)?;
    let keep: Vec<bool> = raw_field
        .cells()
        .iter()
        .map(|c| c.raw_sum >= CLEAR_AIR_THRESHOLD)
        .collect();
    let field = preprocess(&raw_field)?.quantized_f32();
    let s_true = truth
        .into_iter()
        .zip(keep)
        .filter_map(|(s, k)| k.then_some(s))
        .collect::<Vec<_>>();
    debug_assert_eq!(s_true.len(), field.len());
    Ok(SyntheticSnapshot { field, s_true })
}

fn scale(dsd: &Dsd, q: f64) -> Dsd {
    Dsd::new(dsd.as_slice().iter().map(|v| v * q).collect()).expect("finite scaled spectrum")
}

/// Ground-truth sidecar CSV: `i,j,k,s_true`.
pub fn truth_to_csv(snap: &SyntheticSnapshot) -> String {
    let mut out = String::from("i,j,k,s_true\n");
    for (c, s) in snap.field.cells().iter().zip(&snap.s_true) {
        let _ = writeln!(out, "{},{},{},{}", c.i, c.j, c.k, s);
    }
    out
}

/// Parses a ground-truth sidecar back into `s_true` values in row order.
pub fn parse_truth_csv(text: &str) -> Result<Vec<f64>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, line)| {
            line.rsplit(',')
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::InvalidData(format!("bad truth row {}: {line}", n + 2)))
        })
        .collect()
}

/// One entry of a dataset manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub time: f64,
    pub aerosol_factor: f32,
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        let _ = writeln!(out, "{} {} {}", e.path.display(), e.time, e.aerosol_factor);
    }
    out
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::InvalidData(format!("manifest line {}: {line:?}", n + 1));
            if parts.len() != 3 {
                return Err(bad());
            }
            Ok(ManifestEntry {
                path: PathBuf::from(parts[0]),
                time: parts[1].parse().map_err(|_| bad())?,
                aerosol_factor: parts[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

/// Name of the manifest written into every generated run directory.
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Writes `n_timesteps + 1` snapshots plus ground-truth sidecars and a manifest into `out_dir`.
/// Returns the snapshot paths in time order.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let steps: Vec<u32> = (0..=cfg.n_timesteps).collect();
    let entries = steps
        .par_iter()
        .map(|&step| {
            let t = cfg.time_of(step);
            let snap = generate_snapshot(t, cfg)?;
            let name = PathBuf::from(format!("snap_{step:04}.dsd"));
            write_file(&out_dir.join(&name), &encode_snapshot(&snap.field)?)?;
            write_file(
                &out_dir.join(format!("truth_{step:04}.csv")),
                truth_to_csv(&snap).as_bytes(),
            )?;
            Ok(ManifestEntry {
                path: name,
                time: t,
                aerosol_factor: cfg.aerosol_factor,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_file(&out_dir.join(MANIFEST_FILE), format_manifest(&entries).as_bytes())?;
    Ok(entries.iter().map(|e| out_dir.join(&e.path)).collect())
}

/// Sidecar path holding ground truth for a snapshot written by [`generate_dataset`].
pub fn truth_path_for(snapshot_path: &Path) -> PathBuf {
    let name = snapshot_path
        .file_name()
        .map(|n| n.to_string_lossy().replace("snap_", "truth_").replace(".dsd", ".csv"))
        .unwrap_or_default();
    snapshot_path.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsd::{mean_diameter, BinGrid};

    fn cfg() -> SynthConfig {
        SynthConfig::desk(1.0, 42)
    }

    #[test]
    fn anchors_are_argmax_without_noise() {
        let c = cfg();
        assert_eq!(pathway_dsd(0.0, &c, None).unwrap().argmax() + 1, c.ambient_mode_bin);
        assert_eq!(pathway_dsd(1.0, &c, None).unwrap().argmax() + 1, c.precip_mode_bin);
    }

    #[test]
    fn pathway_rejects_out_of_range() {
        assert!(pathway_dsd(-0.01, &cfg(), None).is_err());
        assert!(pathway_dsd(1.01, &cfg(), None).is_err());
    }

    #[test]
    fn mean_diameter_grows_along_pathway() {
        let c = cfg();
        let grid = BinGrid::default();
        let md = |s| mean_diameter(&pathway_dsd(s, &c, None).unwrap(), &grid).unwrap();
        assert!(md(0.9) > md(0.1));
        let mut prev = 0.0;
        for n in 0..=100 {
            let d = md(n as f64 / 100.0);
            assert!(d >= prev, "s = {}: {d} < {prev}", n as f64 / 100.0);
            prev = d;
        }
        assert!(md(0.0) < PRECIP_CUTOFF_MM && md(1.0) > PRECIP_CUTOFF_MM);
    }

    #[test]
    fn noisy_pathway_is_normalized_and_seeded() {
        let c = cfg();
        let a = pathway_dsd(0.4, &c, Some(7)).unwrap();
        let b = pathway_dsd(0.4, &c, Some(7)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, pathway_dsd(0.4, &c, Some(8)).unwrap());
        assert!((a.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn default_onsets_are_ordered() {
        let (h, b, d) = (
            default_onset_time(0.5),
            default_onset_time(1.0),
            default_onset_time(2.0),
        );
        assert_eq!((h, b, d), (7200.0, 14400.0, 25200.0));
    }

    fn precip_count(s: &SyntheticSnapshot) -> usize {
        let grid = BinGrid::default();
        s.field
            .cells()
            .iter()
            .filter(|c| mean_diameter(&c.dsd, &grid).unwrap() > PRECIP_CUTOFF_MM)
            .count()
    }

    #[test]
    fn snapshots_before_onset_are_ambient() {
        let c = cfg();
        let snap = generate_snapshot(c.onset_time - c.dt, &c).unwrap();
        assert!(!snap.field.is_empty());
        assert!(snap.s_true.iter().all(|s| *s == 0.0));
        assert_eq!(precip_count(&snap), 0);
    }

    #[test]
    fn snapshots_are_deterministic_and_valid() {
        let c = cfg();
        let a = generate_snapshot(6.0 * 3600.0, &c).unwrap();
        let b = generate_snapshot(6.0 * 3600.0, &c).unwrap();
        assert_eq!(a, b);
        for cell in a.field.cells() {
            assert!(cell.raw_sum >= CLEAR_AIR_THRESHOLD);
            let sum: f64 = cell.dsd.as_slice().iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(cell.dsd.as_slice().iter().all(|v| *v >= 0.0));
        }
        assert_eq!(a.s_true.len(), a.field.len());
    }

    #[test]
    fn precipitation_spreads_after_onset() {
        let c = cfg();
        let early = generate_snapshot(c.onset_time + c.dt, &c).unwrap();
        let later = generate_snapshot(c.onset_time + 4.0 * c.dt, &c).unwrap();
        assert!(precip_count(&later) > precip_count(&early));
    }

    #[test]
    fn out_of_period_time_is_rejected() {
        let c = cfg();
        assert!(generate_snapshot(-1.0, &c).is_err());
        assert!(generate_snapshot(49.0 * 600.0, &c).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let entries = vec![
            ManifestEntry { path: "snap_0000.dsd".into(), time: 0.0, aerosol_factor: 0.5 },
            ManifestEntry { path: "snap_0001.dsd".into(), time: 600.0, aerosol_factor: 0.5 },
        ];
        let text = format_manifest(&entries);
        assert_eq!(text.lines().next().unwrap(), "snap_0000.dsd 0 0.5");
        assert_eq!(parse_manifest(&text).unwrap(), entries);
        assert!(parse_manifest("a b\n").is_err());
    }

    #[test]
    fn truth_csv_round_trip() {
        let c = cfg();
        let snap = generate_snapshot(5.0 * 3600.0, &c).unwrap();
        assert_eq!(parse_truth_csv(&truth_to_csv(&snap)).unwrap(), snap.s_true);
    }
}
