//! Stage functions behind the command-line pipeline.
//!
//! An experiment directory holds one subdirectory per stage. Every stage writes its
//! artifacts, the resolved configuration and a `stage.txt` record listing SHA-256
//! digests of what it consumed and produced. Consumers check those records, so a
//! missing upstream stage or an upstream input that changed afterwards is an error.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::binio::{read_file, write_file};
use crate::compose::{
    canonical_orientation, detect_onset, onset_csv, render_grid, GridRun, GridStyle, RowStyle,
};
use crate::config::{PipelineConfig, OrientationMode, RESOLVED_CONFIG_FILE};
use crate::dsd::{BinGrid, Dsd};
use crate::error::{Error, Result};
use crate::path::{
    early_late_split, fit_path, novelty_points, parse_waypoints, path_csv, path_evolution, scott_bandwidth,
    KdTree, LatentPath,
};
use crate::snapshot::{read_snapshot, SnapshotField};
use crate::synth::{format_manifest, generate_dataset, parse_manifest, parse_truth_csv, truth_path_for, ManifestEntry};
use crate::vae::{checkpoint_load, checkpoint_save, train, AxisOrientation, LatentPoint};
use crate::viz::{
    calibrate_rgb, embed_snapshot, latent_to_rgb, read_embedding, render_slice, write_embedding, write_png,
    write_ppm, Embedding, Image, RgbCalibration, SliceAxis, BACKGROUND,
};

pub const STAGE_FILE: &str = "stage.txt";
pub const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Gen,
    Train,
    Embed,
    Calibrate,
    Render,
    Trace,
    Compose,
    Onset,
}

impl Stage {
    pub fn dir_name(self) -> &'static str {
        match self {
            Stage::Gen => "data",
            Stage::Train => "train",
            Stage::Embed => "embed",
            Stage::Calibrate => "calibrate",
            Stage::Render => "render",
            Stage::Trace => "trace",
            Stage::Compose => "compose",
            Stage::Onset => "onset",
        }
    }

    pub fn command(self) -> &'static str {
        match self {
            Stage::Gen => "gen",
            other => other.dir_name(),
        }
    }
}

/// Paths inside one experiment directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn dir(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.dir_name())
    }

    pub fn data_manifest(&self) -> PathBuf {
        self.dir(Stage::Gen).join(MANIFEST)
    }

    pub fn model(&self) -> PathBuf {
        self.dir(Stage::Train).join("model.vae")
    }

    pub fn embed_manifest(&self) -> PathBuf {
        self.dir(Stage::Embed).join(MANIFEST)
    }

    pub fn orientation(&self) -> PathBuf {
        self.dir(Stage::Embed).join("orientation.txt")
    }

    pub fn calibration(&self) -> PathBuf {
        self.dir(Stage::Calibrate).join("calibration.txt")
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn digest_files(files: &[PathBuf]) -> Result<String> {
    let mut h = Sha256::new();
    for f in files {
        let bytes = read_file(f)?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex(&h.finalize()))
}

fn rel(layout: &Layout, p: &Path) -> String {
    p.strip_prefix(&layout.root).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

/// Named artifacts whose digests link stages together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Artifact {
    Data,
    Model,
    Embeddings,
    Calibration,
}

impl Artifact {
    fn name(self) -> &'static str {
        match self {
            Artifact::Data => "data",
            Artifact::Model => "model",
            Artifact::Embeddings => "embeddings",
            Artifact::Calibration => "calibration",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "data" => Artifact::Data,
            "model" => Artifact::Model,
            "embeddings" => Artifact::Embeddings,
            "calibration" => Artifact::Calibration,
            _ => return None,
        })
    }

    fn producer(self) -> Stage {
        match self {
            Artifact::Data => Stage::Gen,
            Artifact::Model => Stage::Train,
            Artifact::Embeddings => Stage::Embed,
            Artifact::Calibration => Stage::Calibrate,
        }
    }

    fn anchor(self, layout: &Layout) -> PathBuf {
        match self {
            Artifact::Data => layout.data_manifest(),
            Artifact::Model => layout.model(),
            Artifact::Embeddings => layout.embed_manifest(),
            Artifact::Calibration => layout.calibration(),
        }
    }

    fn files(self, layout: &Layout) -> Result<Vec<PathBuf>> {
        let anchor = self.anchor(layout);
        if !anchor.exists() {
            return Err(Error::MissingArtifact(format!(
                "{} not found; run `dropletscope {}` first",
                rel(layout, &anchor),
                self.producer().command()
            )));
        }
        Ok(match self {
            Artifact::Data | Artifact::Embeddings => {
                let dir = anchor.parent().unwrap().to_path_buf();
                let mut files = vec![anchor.clone()];
                files.extend(read_entries(&anchor)?.iter().map(|e| dir.join(&e.path)));
                if self == Artifact::Embeddings {
                    files.push(layout.orientation());
                }
                files
            }
            _ => vec![anchor],
        })
    }

    fn digest(self, layout: &Layout) -> Result<String> {
        digest_files(&self.files(layout)?)
    }
}

fn read_entries(manifest: &Path) -> Result<Vec<ManifestEntry>> {
    let bytes = read_file(manifest)?;
    parse_manifest(&String::from_utf8_lossy(&bytes))
}

#[derive(Debug, Default)]
struct StageRecord {
    inputs: BTreeMap<Artifact, String>,
    output: Option<(Artifact, String)>,
}

impl StageRecord {
    fn to_text(&self, stage: Stage) -> String {
        let mut out = format!("stage {}\n", stage.command());
        for (a, d) in &self.inputs {
            let _ = writeln!(out, "input {} {d}", a.name());
        }
        if let Some((a, d)) = &self.output {
            let _ = writeln!(out, "output {} {d}", a.name());
        }
        out
    }

    fn parse(text: &str) -> Result<Self> {
        let mut r = Self::default();
        for line in text.lines() {
            let f: Vec<&str> = line.split_whitespace().collect();
            let art = |s: &str| Artifact::from_name(s).ok_or_else(|| Error::InvalidData(format!("stage record: unknown artifact {s:?}")));
            match f.as_slice() {
                ["stage", _] => {}
                ["input", a, d] => {
                    r.inputs.insert(art(a)?, d.to_string());
                }
                ["output", a, d] => r.output = Some((art(a)?, d.to_string())),
                _ => return Err(Error::InvalidData(format!("stage record: bad line {line:?}"))),
            }
        }
        Ok(r)
    }
}

/// Checks that `artifact` exists, matches what its producer recorded, and that the
/// producer's own inputs are unchanged. Returns the artifact digest.
fn require(layout: &Layout, artifact: Artifact) -> Result<String> {
    let current = artifact.digest(layout)?;
    let producer = artifact.producer();
    let record_path = layout.dir(producer).join(STAGE_FILE);
    if !record_path.exists() {
        return Err(Error::MissingArtifact(format!(
            "{} not found; run `dropletscope {}` first",
            rel(layout, &record_path),
            producer.command()
        )));
    }
    let record = StageRecord::parse(&String::from_utf8_lossy(&read_file(&record_path)?))?;
    match &record.output {
        Some((a, d)) if *a == artifact && *d == current => {}
        _ => {
            return Err(Error::StaleInput(format!(
                "{} changed after `dropletscope {}` produced it; rerun that stage",
                rel(layout, &artifact.anchor(layout)),
                producer.command()
            )))
        }
    }
    for (input, recorded) in &record.inputs {
        let now = input.digest(layout)?;
        if &now != recorded {
            return Err(Error::StaleInput(format!(
                "`dropletscope {}` consumed an older {}; rerun it",
                producer.command(),
                rel(layout, &input.anchor(layout))
            )));
        }
    }
    Ok(current)
}

fn finish_stage(
    layout: &Layout,
    cfg: &PipelineConfig,
    stage: Stage,
    inputs: BTreeMap<Artifact, String>,
    output: Option<Artifact>,
) -> Result<()> {
    let dir = layout.dir(stage);
    write_file(&dir.join(RESOLVED_CONFIG_FILE), cfg.to_text().as_bytes())?;
    let output = match output {
        Some(a) => Some((a, a.digest(layout)?)),
        None => None,
    };
    let record = StageRecord { inputs, output };
    write_file(&dir.join(STAGE_FILE), record.to_text(stage).as_bytes())
}

fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Directory name of one aerosol run, e.g. `a0.5`.
pub fn run_name(aerosol_factor: f32) -> String {
    format!("a{aerosol_factor}")
}

/// Generates one run per configured aerosol factor plus a combined manifest.
pub fn cmd_gen(cfg: &PipelineConfig, layout: &Layout) -> Result<Vec<ManifestEntry>> {
    cfg.validate()?;
    let dir = layout.dir(Stage::Gen);
    fresh_dir(&dir)?;
    let mut entries = Vec::new();
    for &a in &cfg.synth.aerosol_factors {
        let sub = run_name(a);
        let paths = generate_dataset(&cfg.synth_config(a)?, &dir.join(&sub))?;
        let run = read_entries(&dir.join(&sub).join(MANIFEST))?;
        for (e, p) in run.into_iter().zip(paths) {
            debug_assert!(p.ends_with(&e.path));
            entries.push(ManifestEntry { path: PathBuf::from(&sub).join(&e.path), ..e });
        }
    }
    write_file(&layout.data_manifest(), format_manifest(&entries).as_bytes())?;
    finish_stage(layout, cfg, Stage::Gen, BTreeMap::new(), Some(Artifact::Data))?;
    Ok(entries)
}

/// Snapshots listed in the data manifest, in manifest order.
pub fn load_dataset(layout: &Layout) -> Result<Vec<(ManifestEntry, SnapshotField)>> {
    let dir = layout.dir(Stage::Gen);
    let entries = read_entries(&layout.data_manifest())?;
    entries
        .into_par_iter()
        .map(|e| {
            let snap = read_snapshot(&dir.join(&e.path))?;
            Ok((e, snap))
        })
        .collect()
}

/// Ground-truth precipitation progress for each cell of a listed snapshot.
pub fn load_truth(layout: &Layout, entry: &ManifestEntry) -> Result<Vec<f64>> {
    let path = truth_path_for(&layout.dir(Stage::Gen).join(&entry.path));
    parse_truth_csv(&String::from_utf8_lossy(&read_file(&path)?))
}

pub fn loss_csv(history: &[crate::vae::EpochStats]) -> String {
    let mut out = String::from("epoch,mean_nelbo,mean_recon,mean_kl\n");
    for h in history {
        let _ = writeln!(out, "{},{},{},{}", h.epoch, h.mean_nelbo, h.mean_recon, h.mean_kl);
    }
    out
}

pub fn cmd_train(cfg: &PipelineConfig, layout: &Layout) -> Result<crate::vae::TrainOutcome> {
    cfg.validate()?;
    let data = require(layout, Artifact::Data)?;
    let snaps = load_dataset(layout)?;
    let spectra: Vec<Dsd> = snaps.iter().flat_map(|(_, s)| s.cells().iter().map(|c| c.dsd.clone())).collect();
    let outcome = train(&spectra, &cfg.train)?;
    let dir = layout.dir(Stage::Train);
    fresh_dir(&dir)?;
    checkpoint_save(&outcome.checkpoint, &layout.model())?;
    write_file(&dir.join("loss.csv"), loss_csv(&outcome.history).as_bytes())?;
    finish_stage(layout, cfg, Stage::Train, BTreeMap::from([(Artifact::Data, data)]), Some(Artifact::Model))?;
    Ok(outcome)
}

/// Per-run embeddings sorted by time, runs in configured order.
pub fn group_runs(embeddings: &[Embedding]) -> Vec<(f32, Vec<&Embedding>)> {
    let mut runs: Vec<(f32, Vec<&Embedding>)> = Vec::new();
    for e in embeddings {
        match runs.iter_mut().find(|(a, _)| *a == e.aerosol_factor) {
            Some((_, v)) => v.push(e),
            None => runs.push((e.aerosol_factor, vec![e])),
        }
    }
    for (_, v) in &mut runs {
        v.sort_by(|a, b| a.time.total_cmp(&b.time));
    }
    runs
}

/// Early and late embeddings of every run.
pub fn early_late<'a>(runs: &[(f32, Vec<&'a Embedding>)], fraction: f64) -> Result<(Vec<&'a Embedding>, Vec<&'a Embedding>)> {
    let (mut early, mut late) = (Vec::new(), Vec::new());
    for (_, v) in runs {
        let (er, lr) = early_late_split(v.len(), fraction)?;
        early.extend(&v[er]);
        late.extend(&v[lr]);
    }
    Ok((early, late))
}

pub fn cmd_embed(cfg: &PipelineConfig, layout: &Layout) -> Result<(AxisOrientation, Vec<Embedding>)> {
    cfg.validate()?;
    let data = require(layout, Artifact::Data)?;
    let model_digest = require(layout, Artifact::Model)?;
    let ckpt = checkpoint_load(&layout.model())?;
    let snaps = load_dataset(layout)?;
    let mut embeddings = snaps
        .iter()
        .map(|(e, s)| {
            let mut emb = embed_snapshot(&ckpt.model, s)?;
            emb.source = e.path.with_extension("lat").to_string_lossy().replace('\\', "/");
            Ok(emb)
        })
        .collect::<Result<Vec<_>>>()?;
    let (orientation, note) = match cfg.viz.orientation {
        OrientationMode::Identity => (AxisOrientation::default(), String::from("# fixed identity\n")),
        OrientationMode::Auto => {
            let runs = group_runs(&embeddings);
            let (early, late) = early_late(&runs, cfg.path.split_fraction)?;
            let band = (cfg.compose.hue_lo, cfg.compose.hue_hi);
            let choice = canonical_orientation(&embeddings, &early, &late, (cfg.viz.pct_lo, cfg.viz.pct_hi), band, cfg.compose.threshold)?;
            let note = format!(
                "# in-band fraction early {} late {} early peak {}\n",
                choice.early_fraction, choice.late_fraction, choice.early_peak
            );
            (choice.orientation, note)
        }
    };
    for e in &mut embeddings {
        *e = e.oriented(&orientation);
    }
    let dir = layout.dir(Stage::Embed);
    fresh_dir(&dir)?;
    embeddings.par_iter().try_for_each(|e| write_embedding(e, &dir.join(&e.source)))?;
    let entries: Vec<ManifestEntry> = embeddings
        .iter()
        .map(|e| ManifestEntry { path: PathBuf::from(&e.source), time: e.time, aerosol_factor: e.aerosol_factor })
        .collect();
    write_file(&layout.embed_manifest(), format_manifest(&entries).as_bytes())?;
    write_file(&layout.orientation(), format!("{}{note}", orientation.to_text()).as_bytes())?;
    finish_stage(
        layout,
        cfg,
        Stage::Embed,
        BTreeMap::from([(Artifact::Data, data), (Artifact::Model, model_digest)]),
        Some(Artifact::Embeddings),
    )?;
    Ok((orientation, embeddings))
}

/// Embeddings listed in the embed manifest, in manifest order.
pub fn load_embeddings(layout: &Layout) -> Result<Vec<Embedding>> {
    let dir = layout.dir(Stage::Embed);
    read_entries(&layout.embed_manifest())?
        .into_par_iter()
        .map(|e| {
            let mut emb = read_embedding(&dir.join(&e.path))?;
            emb.source = e.path.to_string_lossy().replace('\\', "/");
            Ok(emb)
        })
        .collect()
}

pub fn cmd_calibrate(cfg: &PipelineConfig, layout: &Layout) -> Result<RgbCalibration> {
    cfg.validate()?;
    let emb = require(layout, Artifact::Embeddings)?;
    let embeddings = load_embeddings(layout)?;
    let cal = calibrate_rgb(&embeddings, cfg.viz.pct_lo, cfg.viz.pct_hi)?;
    fresh_dir(&layout.dir(Stage::Calibrate))?;
    cal.write(&layout.calibration())?;
    finish_stage(layout, cfg, Stage::Calibrate, BTreeMap::from([(Artifact::Embeddings, emb)]), Some(Artifact::Calibration))?;
    Ok(cal)
}

fn save_image(cfg: &PipelineConfig, img: &Image, stem: &Path) -> Result<()> {
    if cfg.viz.image_format.ppm() {
        write_ppm(img, &stem.with_extension("ppm"))?;
    }
    if cfg.viz.image_format.png() {
        write_png(img, &stem.with_extension("png"))?;
    }
    Ok(())
}

fn shared_inputs(layout: &Layout) -> Result<(BTreeMap<Artifact, String>, Vec<Embedding>, RgbCalibration)> {
    let emb = require(layout, Artifact::Embeddings)?;
    let cal_digest = require(layout, Artifact::Calibration)?;
    let cal = RgbCalibration::read(&layout.calibration())?;
    let embeddings = load_embeddings(layout)?;
    Ok((BTreeMap::from([(Artifact::Embeddings, emb), (Artifact::Calibration, cal_digest)]), embeddings, cal))
}

fn time_tag(t: f64) -> String {
    format!("t{t}")
}

/// Horizontal and vertical slices of every run at the configured times.
pub fn cmd_render(cfg: &PipelineConfig, layout: &Layout) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let (inputs, embeddings, cal) = shared_inputs(layout)?;
    let dims = cfg.dims();
    let j = cfg.viz.slice_j.unwrap_or(dims.ny / 2);
    let dir = layout.dir(Stage::Render);
    fresh_dir(&dir)?;
    let runs = group_runs(&embeddings);
    let mut jobs = Vec::new();
    for (a, run) in &runs {
        for &t in &cfg.viz.times {
            let e = crate::compose::find_snapshot(&GridRun { aerosol_factor: *a, embeddings: run.clone() }, t)?;
            let stem = format!("{}_{}", run_name(*a), time_tag(t));
            jobs.push((e, SliceAxis::Horizontal, cfg.viz.slice_k, dir.join(format!("{stem}_k{}", cfg.viz.slice_k))));
            jobs.push((e, SliceAxis::Vertical, j, dir.join(format!("{stem}_j{j}"))));
        }
    }
    jobs.par_iter()
        .try_for_each(|(e, axis, idx, stem)| save_image(cfg, &render_slice(e, dims, *axis, *idx, &cal)?, stem))?;
    finish_stage(layout, cfg, Stage::Render, inputs, None)?;
    Ok(jobs.into_iter().map(|j| j.3).collect())
}

/// Result of the trace stage.
#[derive(Debug, Clone)]
pub struct Trace {
    pub path: LatentPath,
    pub spectra: Vec<Dsd>,
    pub bandwidth: Option<f64>,
}

/// Fits the pathway from novelty-weighted late-time embeddings and averages spectra along it.
pub fn trace_path(
    cfg: &PipelineConfig,
    embeddings: &[Embedding],
    spectra: &[Dsd],
    waypoints: Option<&[LatentPoint]>,
) -> Result<Trace> {
    let runs = group_runs(embeddings);
    let (early, late) = early_late(&runs, cfg.path.split_fraction)?;
    let points = |set: &[&Embedding]| -> Vec<LatentPoint> { set.iter().flat_map(|e| e.records.iter().map(|r| r.z64())).collect() };
    let (ep, lp) = (points(&early), points(&late));
    let (path, bandwidth) = match waypoints {
        Some(w) => (LatentPath::new(w.to_vec())?.resampled(cfg.path.n_nodes)?, None),
        None => {
            let h = match cfg.path.bandwidth {
                Some(h) => h,
                None => scott_bandwidth(&lp)?,
            };
            let weighted = novelty_points(&ep, &lp, h, cfg.path.subsample_cap, cfg.path.seed)?;
            let fitted = fit_path(&weighted, cfg.path.n_nodes, cfg.path.n_iters)?;
            if ep.is_empty() {
                return Err(Error::invalid("no early-time cells to orient the path"));
            }
            let centroid: LatentPoint = std::array::from_fn(|d| ep.iter().map(|z| z[d]).sum::<f64>() / ep.len() as f64);
            (fitted.oriented_from(&centroid), Some(h))
        }
    };
    let mut pool_pts = Vec::new();
    let mut pool_dsds = Vec::new();
    let mut offset = 0;
    for e in embeddings {
        let n = e.len();
        if spectra.len() < offset + n {
            return Err(Error::invalid("fewer spectra than embedded cells"));
        }
        if cfg.path.aerosol.is_none_or(|a| a == e.aerosol_factor) {
            pool_pts.extend(e.records.iter().map(|r| r.z64()));
            pool_dsds.extend_from_slice(&spectra[offset..offset + n]);
        }
        offset += n;
    }
    if offset != spectra.len() {
        return Err(Error::invalid("spectra and embeddings are not aligned"));
    }
    let tree = KdTree::new(pool_pts)?;
    let spectra = path_evolution(&path, &tree, &pool_dsds, cfg.path.k)?;
    Ok(Trace { path, spectra, bandwidth })
}

const SCATTER_SIZE: usize = 256;
const CELL_PX: usize = 8;

/// Latent point cloud projected on its first two dimensions, with the path in black.
fn scatter_image(embeddings: &[Embedding], cal: &RgbCalibration, path: &LatentPath) -> Image {
    let mut img = Image::filled(SCATTER_SIZE, SCATTER_SIZE, BACKGROUND);
    let n = SCATTER_SIZE as f64 - 1.0;
    let px = |z: &LatentPoint| -> (usize, usize) {
        let u = ((z[0] - cal.lo[0]) / (cal.hi[0] - cal.lo[0])).clamp(0.0, 1.0);
        let v = ((z[1] - cal.lo[1]) / (cal.hi[1] - cal.lo[1])).clamp(0.0, 1.0);
        (((1.0 - v) * n).round() as usize, (u * n).round() as usize)
    };
    for e in embeddings {
        for r in &e.records {
            let z = r.z64();
            let (row, col) = px(&z);
            img.set(row, col, latent_to_rgb(&z, cal));
        }
    }
    for w in path.nodes().windows(2) {
        for s in 0..=64 {
            let t = s as f64 / 64.0;
            let z: LatentPoint = std::array::from_fn(|d| w[0][d] + t * (w[1][d] - w[0][d]));
            let (row, col) = px(&z);
            img.set(row, col, [0, 0, 0]);
        }
    }
    img
}

/// One band per node, one column block per bin; brightness shows each spectrum relative to its peak.
fn evolution_image(trace: &Trace, cal: &RgbCalibration) -> Image {
    let n_bins = trace.spectra.first().map_or(0, |d| d.len());
    let mut img = Image::filled(n_bins * CELL_PX, trace.spectra.len() * CELL_PX, BACKGROUND);
    for (node, (d, z)) in trace.spectra.iter().zip(trace.path.nodes()).enumerate() {
        let tint = latent_to_rgb(z, cal);
        let peak = d.as_slice().iter().cloned().fold(0.0, f64::max);
        for (b, v) in d.as_slice().iter().enumerate() {
            let f = if peak > 0.0 { v / peak } else { 0.0 };
            let c = tint.map(|ch| (255.0 - f * (255.0 - ch as f64)).round() as u8);
            for r in 0..CELL_PX {
                for q in 0..CELL_PX {
                    img.set(node * CELL_PX + r, b * CELL_PX + q, c);
                }
            }
        }
    }
    img
}

pub fn cmd_trace(cfg: &PipelineConfig, layout: &Layout, waypoints: Option<&Path>) -> Result<Trace> {
    cfg.validate()?;
    let (mut inputs, embeddings, cal) = shared_inputs(layout)?;
    inputs.insert(Artifact::Data, require(layout, Artifact::Data)?);
    let snaps = load_dataset(layout)?;
    let spectra: Vec<Dsd> = snaps.iter().flat_map(|(_, s)| s.cells().iter().map(|c| c.dsd.clone())).collect();
    let wp = match waypoints {
        Some(p) => Some(parse_waypoints(&String::from_utf8_lossy(&read_file(p)?))?),
        None => None,
    };
    let trace = trace_path(cfg, &embeddings, &spectra, wp.as_deref())?;
    let dir = layout.dir(Stage::Trace);
    fresh_dir(&dir)?;
    write_file(&dir.join("path.csv"), path_csv(&trace.path, &trace.spectra, &BinGrid::default())?.as_bytes())?;
    let mut info = String::new();
    match trace.bandwidth {
        Some(h) => {
            let _ = writeln!(info, "source novelty\nbandwidth {h}");
        }
        None => {
            let _ = writeln!(info, "source waypoints");
        }
    }
    write_file(&dir.join("path_info.txt"), info.as_bytes())?;
    save_image(cfg, &scatter_image(&embeddings, &cal, &trace.path), &dir.join("latent_path"))?;
    save_image(cfg, &evolution_image(&trace, &cal), &dir.join("evolution"))?;
    finish_stage(layout, cfg, Stage::Trace, inputs, None)?;
    Ok(trace)
}

fn grid_runs(embeddings: &[Embedding]) -> Vec<GridRun<'_>> {
    group_runs(embeddings)
        .into_iter()
        .map(|(aerosol_factor, embeddings)| GridRun { aerosol_factor, embeddings })
        .collect()
}

pub fn cmd_compose(cfg: &PipelineConfig, layout: &Layout) -> Result<Image> {
    cfg.validate()?;
    let (inputs, embeddings, cal) = shared_inputs(layout)?;
    let c = &cfg.compose;
    let style = GridStyle {
        panel_width: c.panel_width,
        row_height: c.row_height,
        row: RowStyle { s_norm: c.s_norm, v_norm: c.v_norm, hue_origin: c.hue_origin },
    };
    let img = render_grid(&grid_runs(&embeddings), &c.times, cfg.dims().nz, &cal, &style)?;
    let dir = layout.dir(Stage::Compose);
    fresh_dir(&dir)?;
    save_image(cfg, &img, &dir.join("composition"))?;
    finish_stage(layout, cfg, Stage::Compose, inputs, None)?;
    Ok(img)
}

pub fn cmd_onset(cfg: &PipelineConfig, layout: &Layout) -> Result<Vec<(f32, Option<f64>)>> {
    cfg.validate()?;
    let (inputs, embeddings, cal) = shared_inputs(layout)?;
    let band = (cfg.compose.hue_lo, cfg.compose.hue_hi);
    let rows = group_runs(&embeddings)
        .into_iter()
        .map(|(a, run)| {
            let run: Vec<Embedding> = run.into_iter().cloned().collect();
            Ok((a, detect_onset(&run, &cal, band, cfg.compose.threshold)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let dir = layout.dir(Stage::Onset);
    fresh_dir(&dir)?;
    write_file(&dir.join("onset.csv"), onset_csv(&rows, band, cfg.compose.threshold).as_bytes())?;
    finish_stage(layout, cfg, Stage::Onset, inputs, None)?;
    Ok(rows)
}
