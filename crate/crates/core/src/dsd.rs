//! Droplet size distributions over mass-doubling bins.

use crate::error::{Error, Result};

/// Number of bins in the droplet spectrum.
pub const N_BINS: usize = 33;
/// Representative diameter of the largest bin, in mm.
pub const D_MAX_MM: f64 = 6.5;
/// Summed mixing ratio (kg/kg) below which a cell counts as clear air.
pub const CLEAR_AIR_THRESHOLD: f64 = 1e-5;

/// Representative diameters for `n_bins` mass-doubling bins, top bin anchored at `d_max` mm.
///
/// Bin `k` (1-indexed) has diameter `d_max * 2^((k - n_bins) / 3)`, so each bin holds
/// droplets with twice the mass of the previous one.
pub fn bin_diameters(n_bins: usize, d_max: f64) -> Result<Vec<f64>> {
    if n_bins == 0 {
        return Err(Error::invalid("n_bins must be at least 1"));
    }
    if !(d_max > 0.0) || !d_max.is_finite() {
        return Err(Error::invalid(format!("d_max must be positive, got {d_max}")));
    }
    Ok((1..=n_bins)
        .map(|k| d_max * ((k as f64 - n_bins as f64) / 3.0).exp2())
        .collect())
}

/// Bin layout of the spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct BinGrid {
    d_max: f64,
    diameters: Vec<f64>,
}

impl BinGrid {
    pub fn new(n_bins: usize, d_max: f64) -> Result<Self> {
        Ok(Self {
            d_max,
            diameters: bin_diameters(n_bins, d_max)?,
        })
    }

    pub fn n_bins(&self) -> usize {
        self.diameters.len()
    }

    pub fn d_max(&self) -> f64 {
        self.d_max
    }

    /// Diameters in mm, ascending.
    pub fn diameters(&self) -> &[f64] {
        &self.diameters
    }
}

impl Default for BinGrid {
    fn default() -> Self {
        Self::new(N_BINS, D_MAX_MM).expect("default bin grid is valid")
    }
}

/// Per-bin liquid mixing ratios (kg liquid / kg dry air) of one grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Dsd(Vec<f64>);

impl Dsd {
    /// Wraps raw mixing ratios, rejecting negative or non-finite entries.
    pub fn new(mixing_ratios: Vec<f64>) -> Result<Self> {
        if let Some((k, v)) = mixing_ratios
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(Error::InvalidData(format!(
                "bin {k} has mixing ratio {v}; entries must be finite and non-negative"
            )));
        }
        Ok(Self(mixing_ratios))
    }

    pub fn zeros(n_bins: usize) -> Self {
        Self(vec![0.0; n_bins])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Index of the largest bin value (first one on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, v) in self.0.iter().enumerate() {
            if *v > self.0[best] {
                best = k;
            }
        }
        best
    }

    /// Rounds every entry to the nearest `f32`, matching what the binary formats store.
    pub fn quantized_f32(&self) -> Self {
        Self(self.0.iter().map(|v| *v as f32 as f64).collect())
    }
}

/// Sum of the per-bin mixing ratios.
pub fn summed_mixing_ratio(dsd: &Dsd) -> Result<f64> {
    let sum: f64 = dsd.0.iter().sum();
    if sum.is_nan() {
        return Err(Error::InvalidData("mixing ratio sum is NaN".into()));
    }
    Ok(sum)
}

/// Scales the spectrum to unit total mass.
pub fn normalize_dsd(dsd: &Dsd) -> Result<Dsd> {
    let sum = summed_mixing_ratio(dsd)?;
    if !(sum > 0.0) {
        return Err(Error::Degenerate(
            "cannot normalize a spectrum with zero total mass".into(),
        ));
    }
    Ok(Dsd(dsd.0.iter().map(|v| v / sum).collect()))
}

/// Mass-weighted mean diameter in mm.
pub fn mean_diameter(dsd: &Dsd, grid: &BinGrid) -> Result<f64> {
    if dsd.len() != grid.n_bins() {
        return Err(Error::invalid(format!(
            "spectrum has {} bins, grid has {}",
            dsd.len(),
            grid.n_bins()
        )));
    }
    let sum = summed_mixing_ratio(dsd)?;
    if !(sum > 0.0) {
        return Err(Error::Degenerate(
            "mean diameter of an empty spectrum".into(),
        ));
    }
    let weighted: f64 = dsd
        .0
        .iter()
        .zip(grid.diameters())
        .map(|(x, d)| x * d)
        .sum();
    Ok(weighted / sum)
}
