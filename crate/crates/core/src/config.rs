//! Flat `section.key=value` pipeline configuration.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::compose::{DEFAULT_HUE_BAND, DEFAULT_HUE_ORIGIN, DEFAULT_ONSET_THRESHOLD};
use crate::error::{Error, Result};
use crate::path::{DEFAULT_K, DEFAULT_N_ITERS, DEFAULT_N_NODES, DEFAULT_SPLIT_FRACTION, DEFAULT_SUBSAMPLE_CAP};
use crate::snapshot::GridDims;
use crate::synth::{default_onset_time, SynthConfig};
use crate::vae::{Activation, TrainConfig};
use crate::viz::{DEFAULT_PCT_HI, DEFAULT_PCT_LO};

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSection {
    pub seed: u64,
    pub aerosol_factors: Vec<f32>,
    /// Per-run onset times in seconds; empty means the default for each factor.
    pub onset_times: Vec<f64>,
    pub base: SynthConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrientationMode {
    /// Signed axis permutation chosen from early and late embeddings.
    Auto,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Ppm,
    Png,
    Both,
}

impl ImageFormat {
    pub fn ppm(self) -> bool {
        matches!(self, ImageFormat::Ppm | ImageFormat::Both)
    }
    pub fn png(self) -> bool {
        matches!(self, ImageFormat::Png | ImageFormat::Both)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VizSection {
    pub pct_lo: f64,
    pub pct_hi: f64,
    pub orientation: OrientationMode,
    /// Altitude of rendered horizontal slices.
    pub slice_k: u32,
    /// Row of rendered vertical slices; `None` means the grid center.
    pub slice_j: Option<u32>,
    pub times: Vec<f64>,
    pub image_format: ImageFormat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathSection {
    pub n_nodes: usize,
    pub n_iters: usize,
    pub k: usize,
    /// KDE bandwidth; `None` means Scott's rule on the late-time set.
    pub bandwidth: Option<f64>,
    pub subsample_cap: usize,
    pub split_fraction: f64,
    pub seed: u64,
    /// Restricts k-NN pooling to one aerosol factor.
    pub aerosol: Option<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComposeSection {
    pub hue_origin: f64,
    pub s_norm: f64,
    pub v_norm: f64,
    pub hue_lo: f64,
    pub hue_hi: f64,
    pub threshold: f64,
    pub times: Vec<f64>,
    pub panel_width: usize,
    pub row_height: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub synth: SynthSection,
    pub train: TrainConfig,
    /// Transform applied to spectra before encoding; only `none` is supported.
    pub input_transform: String,
    pub viz: VizSection,
    pub path: PathSection,
    pub compose: ComposeSection,
}

const PAPER_TIMES: [f64; 3] = [7200.0, 14400.0, 25200.0];

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            synth: SynthSection {
                seed: 42,
                aerosol_factors: vec![0.5, 1.0, 2.0],
                onset_times: Vec::new(),
                base: SynthConfig::desk(1.0, 42),
            },
            train: TrainConfig { seed: 42, ..TrainConfig::default() },
            input_transform: "none".into(),
            viz: VizSection {
                pct_lo: DEFAULT_PCT_LO,
                pct_hi: DEFAULT_PCT_HI,
                orientation: OrientationMode::Auto,
                slice_k: 10,
                slice_j: None,
                times: PAPER_TIMES.to_vec(),
                image_format: ImageFormat::Ppm,
            },
            path: PathSection {
                n_nodes: DEFAULT_N_NODES,
                n_iters: DEFAULT_N_ITERS,
                k: DEFAULT_K,
                bandwidth: None,
                subsample_cap: DEFAULT_SUBSAMPLE_CAP,
                split_fraction: DEFAULT_SPLIT_FRACTION,
                seed: 0,
                aerosol: None,
            },
            compose: ComposeSection {
                hue_origin: DEFAULT_HUE_ORIGIN,
                s_norm: 1.0,
                v_norm: 1.0,
                hue_lo: DEFAULT_HUE_BAND.0,
                hue_hi: DEFAULT_HUE_BAND.1,
                threshold: DEFAULT_ONSET_THRESHOLD,
                times: PAPER_TIMES.to_vec(),
                panel_width: 160,
                row_height: 4,
            },
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for key {key}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_value(key, v.trim())).collect()
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Identity => "identity",
        Activation::Silu => "silu",
        Activation::Tanh => "tanh",
    }
}

fn opt<T: Display>(v: &Option<T>, none: &str) -> String {
    v.as_ref().map_or_else(|| none.to_string(), |x| x.to_string())
}

impl PipelineConfig {
    /// Sets one dotted key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let s = &mut self.synth;
        let b = &mut s.base;
        match key {
            "synth.seed" => s.seed = parse_value(key, v)?,
            "synth.aerosol_factors" => s.aerosol_factors = parse_list(key, v)?,
            "synth.onset_times" => s.onset_times = if v == "auto" { Vec::new() } else { parse_list(key, v)? },
            "synth.nx" => b.dims.nx = parse_value(key, v)?,
            "synth.ny" => b.dims.ny = parse_value(key, v)?,
            "synth.nz" => b.dims.nz = parse_value(key, v)?,
            "synth.cell_size" => b.cell_size = parse_value(key, v)?,
            "synth.n_timesteps" => b.n_timesteps = parse_value(key, v)?,
            "synth.dt" => b.dt = parse_value(key, v)?,
            "synth.ramp_time" => b.ramp_time = parse_value(key, v)?,
            "synth.ambient_mode_bin" => b.ambient_mode_bin = parse_value(key, v)?,
            "synth.precip_mode_bin" => b.precip_mode_bin = parse_value(key, v)?,
            "synth.spectral_width" => b.spectral_width = parse_value(key, v)?,
            "synth.precip_width" => b.precip_width = parse_value(key, v)?,
            "synth.altitude_mode_shift" => b.altitude_mode_shift = parse_value(key, v)?,
            "synth.noise_sigma" => b.noise_sigma = parse_value(key, v)?,
            "synth.cloud_threshold" => b.cloud_threshold = parse_value(key, v)?,
            "synth.cloud_base" => b.cloud_base = parse_value(key, v)?,
            "synth.max_depth" => b.max_depth = parse_value(key, v)?,
            "train.beta" => self.train.beta = parse_value(key, v)?,
            "train.learning_rate" => self.train.adam.learning_rate = parse_value(key, v)?,
            "train.adam_beta1" => self.train.adam.beta1 = parse_value(key, v)?,
            "train.adam_beta2" => self.train.adam.beta2 = parse_value(key, v)?,
            "train.adam_epsilon" => self.train.adam.epsilon = parse_value(key, v)?,
            "train.batch_size" => self.train.batch_size = parse_value(key, v)?,
            "train.epochs" => self.train.n_epochs = parse_value(key, v)?,
            "train.seed" => self.train.seed = parse_value(key, v)?,
            "train.mc_samples" => self.train.mc_samples = parse_value(key, v)?,
            "train.hidden" => self.train.hidden = parse_list(key, v)?,
            "train.activation" => {
                self.train.activation = match v {
                    "identity" => Activation::Identity,
                    "silu" => Activation::Silu,
                    "tanh" => Activation::Tanh,
                    _ => return Err(Error::Config(format!("bad value {v:?} for key {key}"))),
                }
            }
            "train.input_transform" => {
                if v != "none" {
                    return Err(Error::Config(format!("unsupported input transform {v:?}; only `none` is available")));
                }
                self.input_transform = v.into();
            }
            "viz.pct_lo" => self.viz.pct_lo = parse_value(key, v)?,
            "viz.pct_hi" => self.viz.pct_hi = parse_value(key, v)?,
            "viz.orientation" => {
                self.viz.orientation = match v {
                    "auto" => OrientationMode::Auto,
                    "identity" => OrientationMode::Identity,
                    _ => return Err(Error::Config(format!("bad value {v:?} for key {key}"))),
                }
            }
            "viz.slice_k" => self.viz.slice_k = parse_value(key, v)?,
            "viz.slice_j" => self.viz.slice_j = if v == "center" { None } else { Some(parse_value(key, v)?) },
            "viz.times" => self.viz.times = parse_list(key, v)?,
            "viz.image_format" => {
                self.viz.image_format = match v {
                    "ppm" => ImageFormat::Ppm,
                    "png" => ImageFormat::Png,
                    "both" => ImageFormat::Both,
                    _ => return Err(Error::Config(format!("bad value {v:?} for key {key}"))),
                }
            }
            "path.n_nodes" => self.path.n_nodes = parse_value(key, v)?,
            "path.n_iters" => self.path.n_iters = parse_value(key, v)?,
            "path.k" => self.path.k = parse_value(key, v)?,
            "path.bandwidth" => self.path.bandwidth = if v == "scott" { None } else { Some(parse_value(key, v)?) },
            "path.subsample_cap" => self.path.subsample_cap = parse_value(key, v)?,
            "path.split_fraction" => self.path.split_fraction = parse_value(key, v)?,
            "path.seed" => self.path.seed = parse_value(key, v)?,
            "path.aerosol" => self.path.aerosol = if v == "all" { None } else { Some(parse_value(key, v)?) },
            "compose.hue_origin" => self.compose.hue_origin = parse_value(key, v)?,
            "compose.s_norm" => self.compose.s_norm = parse_value(key, v)?,
            "compose.v_norm" => self.compose.v_norm = parse_value(key, v)?,
            "compose.hue_lo" => self.compose.hue_lo = parse_value(key, v)?,
            "compose.hue_hi" => self.compose.hue_hi = parse_value(key, v)?,
            "compose.threshold" => self.compose.threshold = parse_value(key, v)?,
            "compose.times" => self.compose.times = parse_list(key, v)?,
            "compose.panel_width" => self.compose.panel_width = parse_value(key, v)?,
            "compose.row_height" => self.compose.row_height = parse_value(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let s = &self.synth;
        let b = &s.base;
        let t = &self.train;
        let v = &self.viz;
        let p = &self.path;
        let c = &self.compose;
        vec![
            ("synth.seed", s.seed.to_string()),
            ("synth.aerosol_factors", join(&s.aerosol_factors)),
            ("synth.onset_times", if s.onset_times.is_empty() { "auto".into() } else { join(&s.onset_times) }),
            ("synth.nx", b.dims.nx.to_string()),
            ("synth.ny", b.dims.ny.to_string()),
            ("synth.nz", b.dims.nz.to_string()),
            ("synth.cell_size", b.cell_size.to_string()),
            ("synth.n_timesteps", b.n_timesteps.to_string()),
            ("synth.dt", b.dt.to_string()),
            ("synth.ramp_time", b.ramp_time.to_string()),
            ("synth.ambient_mode_bin", b.ambient_mode_bin.to_string()),
            ("synth.precip_mode_bin", b.precip_mode_bin.to_string()),
            ("synth.spectral_width", b.spectral_width.to_string()),
            ("synth.precip_width", b.precip_width.to_string()),
            ("synth.altitude_mode_shift", b.altitude_mode_shift.to_string()),
            ("synth.noise_sigma", b.noise_sigma.to_string()),
            ("synth.cloud_threshold", b.cloud_threshold.to_string()),
            ("synth.cloud_base", b.cloud_base.to_string()),
            ("synth.max_depth", b.max_depth.to_string()),
            ("train.beta", t.beta.to_string()),
            ("train.learning_rate", t.adam.learning_rate.to_string()),
            ("train.adam_beta1", t.adam.beta1.to_string()),
            ("train.adam_beta2", t.adam.beta2.to_string()),
            ("train.adam_epsilon", t.adam.epsilon.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.epochs", t.n_epochs.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.mc_samples", t.mc_samples.to_string()),
            ("train.hidden", join(&t.hidden)),
            ("train.activation", activation_name(t.activation).into()),
            ("train.input_transform", self.input_transform.clone()),
            ("viz.pct_lo", v.pct_lo.to_string()),
            ("viz.pct_hi", v.pct_hi.to_string()),
            ("viz.orientation", match v.orientation {
                OrientationMode::Auto => "auto".into(),
                OrientationMode::Identity => "identity".into(),
            }),
            ("viz.slice_k", v.slice_k.to_string()),
            ("viz.slice_j", opt(&v.slice_j, "center")),
            ("viz.times", join(&v.times)),
            ("viz.image_format", match v.image_format {
                ImageFormat::Ppm => "ppm".into(),
                ImageFormat::Png => "png".into(),
                ImageFormat::Both => "both".into(),
            }),
            ("path.n_nodes", p.n_nodes.to_string()),
            ("path.n_iters", p.n_iters.to_string()),
            ("path.k", p.k.to_string()),
            ("path.bandwidth", opt(&p.bandwidth, "scott")),
            ("path.subsample_cap", p.subsample_cap.to_string()),
            ("path.split_fraction", p.split_fraction.to_string()),
            ("path.seed", p.seed.to_string()),
            ("path.aerosol", opt(&p.aerosol, "all")),
            ("compose.hue_origin", c.hue_origin.to_string()),
            ("compose.s_norm", c.s_norm.to_string()),
            ("compose.v_norm", c.v_norm.to_string()),
            ("compose.hue_lo", c.hue_lo.to_string()),
            ("compose.hue_hi", c.hue_hi.to_string()),
            ("compose.threshold", c.threshold.to_string()),
            ("compose.times", join(&c.times)),
            ("compose.panel_width", c.panel_width.to_string()),
            ("compose.row_height", c.row_height.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (k, v) in self.entries() {
            let sec = k.split('.').next().unwrap();
            if sec != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("# {sec}\n"));
                section = sec;
            }
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    /// Applies `key=value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", ln + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.synth.aerosol_factors.is_empty() {
            return bad("synth.aerosol_factors is empty".into());
        }
        if !self.synth.onset_times.is_empty() && self.synth.onset_times.len() != self.synth.aerosol_factors.len() {
            return bad("synth.onset_times needs one entry per aerosol factor".into());
        }
        for a in &self.synth.aerosol_factors {
            self.synth_config(*a)?.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        self.train.validate().map_err(|e| Error::Config(e.to_string()))?;
        if !(0.0..=100.0).contains(&self.viz.pct_lo) || !(self.viz.pct_lo < self.viz.pct_hi && self.viz.pct_hi <= 100.0) {
            return bad(format!("viz percentiles ({}, {}) invalid", self.viz.pct_lo, self.viz.pct_hi));
        }
        if self.path.n_nodes < 2 || self.path.k == 0 || self.path.subsample_cap == 0 {
            return bad("path.n_nodes must be at least 2; path.k and path.subsample_cap positive".into());
        }
        if let Some(h) = self.path.bandwidth {
            if !(h > 0.0) {
                return bad(format!("path.bandwidth {h} must be positive"));
            }
        }
        if !(self.path.split_fraction > 0.0 && self.path.split_fraction <= 0.5) {
            return bad("path.split_fraction must lie in (0, 0.5]".into());
        }
        let c = &self.compose;
        if !(c.s_norm > 0.0 && c.s_norm <= 1.0 && c.v_norm > 0.0 && c.v_norm <= 1.0) {
            return bad("compose.s_norm and compose.v_norm must lie in (0, 1]".into());
        }
        if !(0.0..=1.0).contains(&c.threshold) {
            return bad("compose.threshold must lie in [0, 1]".into());
        }
        if c.panel_width == 0 || c.row_height == 0 {
            return bad("compose.panel_width and compose.row_height must be positive".into());
        }
        Ok(())
    }

    /// Generator settings for one aerosol run.
    pub fn synth_config(&self, aerosol_factor: f32) -> Result<SynthConfig> {
        let pos = self.synth.aerosol_factors.iter().position(|a| *a == aerosol_factor);
        let onset = match (pos, self.synth.onset_times.is_empty()) {
            (Some(i), false) => self.synth.onset_times[i],
            _ => default_onset_time(aerosol_factor as f64),
        };
        Ok(SynthConfig {
            aerosol_factor,
            onset_time: onset,
            seed: self.synth.seed,
            ..self.synth.base.clone()
        })
    }

    pub fn dims(&self) -> GridDims {
        self.synth.base.dims
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_text_round_trips() {
        let mut c = PipelineConfig::default();
        c.set("train.beta", "0.003").unwrap();
        c.set("path.bandwidth", "0.25").unwrap();
        c.set("synth.onset_times", "100,200,300").unwrap();
        c.set("viz.slice_j", "7").unwrap();
        let text = c.to_text();
        assert_eq!(PipelineConfig::parse(&text).unwrap(), c);
        assert_eq!(PipelineConfig::parse(&PipelineConfig::default().to_text()).unwrap(), PipelineConfig::default());
    }

    #[test]
    fn unknown_keys_are_named() {
        match PipelineConfig::parse("train.betta=1\n") {
            Err(Error::Config(m)) => assert!(m.contains("train.betta")),
            other => panic!("{other:?}"),
        }
        assert!(PipelineConfig::parse("synth.seed\n").is_err());
        assert!(PipelineConfig::parse("synth.seed=x\n").is_err());
        assert!(PipelineConfig::parse("train.input_transform=log\n").is_err());
        assert!(PipelineConfig::parse("viz.pct_lo=50\nviz.pct_hi=50\n").is_err());
    }

    #[test]
    fn defaults_match_ledger() {
        let c = PipelineConfig::default();
        assert_eq!(c.synth.aerosol_factors, vec![0.5, 1.0, 2.0]);
        assert_eq!(c.train.beta, 1e-3);
        assert_eq!(c.train.batch_size, 128);
        assert_eq!(c.train.n_epochs, 20);
        assert_eq!((c.viz.pct_lo, c.viz.pct_hi), (1.0, 99.0));
        assert_eq!((c.path.n_nodes, c.path.k), (16, 1000));
        assert_eq!((c.compose.hue_lo, c.compose.hue_hi, c.compose.threshold), (90.0, 270.0, 0.05));
        let s = c.synth_config(2.0).unwrap();
        assert_eq!(s.onset_time, 7.0 * 3600.0);
        assert_eq!(s.n_timesteps, 48);
        assert_eq!(s.dims, GridDims { nx: 64, ny: 64, nz: 24 });
        c.validate().unwrap();
    }
}
