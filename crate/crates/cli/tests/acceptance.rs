//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits non-zero on any failure.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use dropletscope::compose::*;
use dropletscope::config::PipelineConfig;
use dropletscope::dsd::{mean_diameter, BinGrid, Dsd, N_BINS};
use dropletscope::path::*;
use dropletscope::pipeline::*;
use dropletscope::snapshot::*;
use dropletscope::vae::*;
use dropletscope::viz::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Outcome = std::result::Result<String, String>;

const GRAD_H: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const GRAD_PROBES: usize = 100;
const GRAD_MAX_TIME: Duration = Duration::from_secs(10);
const KL_TOL: f64 = 1e-12;
const KL_RANDOM: usize = 1_000_000;
const TRAIN_MAX_TIME: Duration = Duration::from_secs(600);
const TRAIN_RATIO: f64 = 0.5;
const CELLS_RANGE: (usize, usize) = (50_000, 200_000);
const SEPARATION: f64 = 2.0;
const KNN_RECORDS: usize = 10_000;
const KNN_QUERIES: usize = 100;
const KNN_TOL: f64 = 1e-12;
const PATH_NODES: usize = 16;
const RANK_MIN: f64 = 0.9;
const ROUND_TRIPS: usize = 10_000;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_correctness() -> Outcome {
    let model = VaeModel::init(&[8], Activation::Silu, 3).map_err(|e| e.to_string())?;
    let t0 = Instant::now();
    let report = grad_check(&model, GRAD_PROBES, GRAD_H, GRAD_TOL, 11).map_err(|e| e.to_string())?;
    let dt = t0.elapsed();
    check(
        report.max_rel_error < GRAD_TOL && dt < GRAD_MAX_TIME,
        format!("max rel error {:.3e} over {} probes in {:.2?}", report.max_rel_error, report.n_probes, dt),
    )
}

fn kl_correctness() -> Outcome {
    let cases = [
        ([0.0; 3], [0.0; 3], 0.0),
        ([1.0, 0.0, 0.0], [0.0; 3], 0.5),
        ([0.0; 3], [1.0, 0.0, 0.0], 0.5 * (std::f64::consts::E - 2.0)),
    ];
    let worst_case = cases.iter().map(|(m, l, want)| (kl_gauss(m, l) - want).abs()).fold(0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut min_kl = f64::INFINITY;
    for _ in 0..KL_RANDOM {
        let mu: LatentPoint = std::array::from_fn(|_| rng.gen_range(-10.0..10.0));
        let lv: LatentPoint = std::array::from_fn(|_| rng.gen_range(-10.0..10.0));
        min_kl = min_kl.min(kl_gauss(&mu, &lv));
    }
    check(
        worst_case <= KL_TOL && min_kl >= 0.0,
        format!("tabulated error {worst_case:.1e}, min over {KL_RANDOM} random inputs {min_kl:.3e}"),
    )
}

/// State shared by the criteria that run on the default synthetic experiment.
struct Experiment {
    layout: Layout,
    cfg: PipelineConfig,
}

fn training_progress(exp: &Experiment) -> Outcome {
    let e = |e: dropletscope::Error| e.to_string();
    cmd_gen(&exp.cfg, &exp.layout).map_err(e)?;
    let snaps = load_dataset(&exp.layout).map_err(e)?;
    let n_cells: usize = snaps.iter().map(|(_, s)| s.len()).sum();
    let t0 = Instant::now();
    let first = cmd_train(&exp.cfg, &exp.layout).map_err(e)?;
    let dt = t0.elapsed();
    let spectra: Vec<Dsd> = snaps.iter().flat_map(|(_, s)| s.cells().iter().map(|c| c.dsd.clone())).collect();
    let second = train(&spectra, &exp.cfg.train).map_err(e)?;
    let saved = std::fs::read(exp.layout.model()).map_err(|e| e.to_string())?;
    let identical = first == second && encode_checkpoint(&second.checkpoint) == saved;
    let h = &first.history;
    let (e1, elast) = (h[0].mean_nelbo, h[h.len() - 1].mean_nelbo);
    check(
        identical
            && h.len() == 20
            && elast < TRAIN_RATIO * e1
            && dt < TRAIN_MAX_TIME
            && (CELLS_RANGE.0..=CELLS_RANGE.1).contains(&n_cells),
        format!(
            "{} snapshots, {n_cells} cells; NELBO {e1:.5} -> {elast:.5} (ratio {:.3}) in {:.1?}; repeat identical: {identical}",
            snaps.len(),
            elast / e1,
            dt
        ),
    )
}

fn centroid<'a>(pts: impl Iterator<Item = &'a LatentPoint>) -> (LatentPoint, usize) {
    let mut c = [0.0; 3];
    let mut n = 0;
    for p in pts {
        for d in 0..3 {
            c[d] += p[d];
        }
        n += 1;
    }
    (c.map(|v| v / n as f64), n)
}

fn latent_separation(exp: &Experiment) -> Outcome {
    let e = |e: dropletscope::Error| e.to_string();
    cmd_embed(&exp.cfg, &exp.layout).map_err(e)?;
    let embeddings = load_embeddings(&exp.layout).map_err(e)?;
    let entries = read_manifest_entries(&exp.layout)?;
    let (mut ambient, mut precip) = (Vec::new(), Vec::new());
    for (emb, entry) in embeddings.iter().zip(&entries) {
        let truth = load_truth(&exp.layout, entry).map_err(e)?;
        for (r, s) in emb.records.iter().zip(truth) {
            if s < 0.1 {
                ambient.push(r.z64());
            } else if s > 0.9 {
                precip.push(r.z64());
            }
        }
    }
    let spread = |pts: &[LatentPoint], c: &LatentPoint| pts.iter().map(|p| dist2(p, c).sqrt()).sum::<f64>() / pts.len() as f64;
    let (ca, na) = centroid(ambient.iter());
    let (cp, np) = centroid(precip.iter());
    let within = 0.5 * (spread(&ambient, &ca) + spread(&precip, &cp));
    let gap = dist2(&ca, &cp).sqrt();
    check(
        na > 0 && np > 0 && gap > SEPARATION * within,
        format!("{na} ambient, {np} precipitating cells; centroid distance {gap:.4}, mean spread {within:.4} (ratio {:.2})", gap / within),
    )
}

fn read_manifest_entries(layout: &Layout) -> std::result::Result<Vec<dropletscope::synth::ManifestEntry>, String> {
    Ok(load_dataset(layout).map_err(|e| e.to_string())?.into_iter().map(|(e, _)| e).collect())
}

fn knn_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let normal = Normal::new(0.0, 1.0).unwrap();
    // coarse grid coordinates force many distance ties
    let points: Vec<LatentPoint> = (0..KNN_RECORDS)
        .map(|n| {
            if n % 2 == 0 {
                std::array::from_fn(|_| normal.sample(&mut rng))
            } else {
                std::array::from_fn(|_| rng.gen_range(-3i32..=3) as f64 * 0.5)
            }
        })
        .collect();
    let dsds: Vec<Dsd> = (0..KNN_RECORDS)
        .map(|_| Dsd::new((0..N_BINS).map(|_| rng.gen::<f64>()).collect()).unwrap())
        .collect();
    let tree = KdTree::new(points.clone()).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let mut index_mismatch = 0;
    for q in 0..KNN_QUERIES {
        let query: LatentPoint = std::array::from_fn(|_| rng.gen_range(-3.0..3.0));
        let k = [1, 10, DEFAULT_K, KNN_RECORDS][q % 4];
        let fast = knn_average(&query, &tree, &dsds, k).map_err(|e| e.to_string())?;
        let slow = knn_average_brute(&query, &points, &dsds, k).map_err(|e| e.to_string())?;
        for (a, b) in fast.as_slice().iter().zip(slow.as_slice()) {
            worst = worst.max((a - b).abs());
        }
        if tree.knn(&query, k) != brute_knn(&points, &query, k) {
            index_mismatch += 1;
        }
    }
    check(
        worst <= KNN_TOL && index_mismatch == 0,
        format!("{KNN_QUERIES} queries over {KNN_RECORDS} records; max bin difference {worst:.1e}; neighbor list mismatches {index_mismatch}"),
    )
}

fn path_evolution_ranks(exp: &Experiment) -> Outcome {
    let e = |e: dropletscope::Error| e.to_string();
    cmd_calibrate(&exp.cfg, &exp.layout).map_err(e)?;
    let trace = cmd_trace(&exp.cfg, &exp.layout, None).map_err(e)?;
    let grid = BinGrid::default();
    let md: Vec<f64> = trace.spectra.iter().map(|d| mean_diameter(d, &grid)).collect::<Result<_, _>>().map_err(e)?;
    let embeddings = load_embeddings(&exp.layout).map_err(e)?;
    let entries = read_manifest_entries(&exp.layout)?;
    let mut pts = Vec::new();
    let mut truth = Vec::new();
    for (emb, entry) in embeddings.iter().zip(&entries) {
        pts.extend(emb.records.iter().map(|r| r.z64()));
        truth.extend(load_truth(&exp.layout, entry).map_err(e)?);
    }
    let tree = KdTree::new(pts).map_err(e)?;
    let s_node: Vec<f64> = trace
        .path
        .nodes()
        .iter()
        .map(|z| {
            let nb = tree.knn(z, exp.cfg.path.k);
            nb.iter().map(|n| truth[n.index]).sum::<f64>() / nb.len() as f64
        })
        .collect();
    let idx: Vec<f64> = (0..trace.path.len()).map(|i| i as f64).collect();
    let (r_md, r_s) = (spearman(&idx, &md), spearman(&idx, &s_node));
    check(
        trace.path.len() == PATH_NODES && r_md > RANK_MIN && r_s > RANK_MIN,
        format!(
            "{} nodes; Spearman(mean diameter) {r_md:.4}, Spearman(ground-truth s) {r_s:.4}; diameter {:.4} -> {:.4} mm",
            trace.path.len(),
            md[0],
            md[md.len() - 1]
        ),
    )
}

fn onset_ordering(exp: &Experiment) -> Outcome {
    let rows = cmd_onset(&exp.cfg, &exp.layout).map_err(|e| e.to_string())?;
    let aerosols: Vec<f32> = rows.iter().map(|r| r.0).collect();
    let times: Vec<Option<f64>> = rows.iter().map(|r| r.1).collect();
    let increasing = times.iter().all(|t| t.is_some()) && times.windows(2).all(|w| w[0] < w[1]);
    check(
        aerosols == [0.5, 1.0, 2.0] && increasing && exp.cfg.compose.threshold == DEFAULT_ONSET_THRESHOLD,
        format!("aerosol {aerosols:?} -> onset {times:?} s"),
    )
}

fn rendering_exactness() -> Outcome {
    let one = Image { width: 1, height: 1, pixels: vec![255, 0, 128] };
    let golden_one: &[u8] = b"P6\n1 1\n255\n\xff\x00\x80";
    let mut three = Image::filled(3, 2, [0, 0, 0]);
    let colors = [[255, 0, 0], [0, 255, 0], [0, 0, 255], [255, 255, 0], [0, 255, 255], [255, 255, 255]];
    for (n, c) in colors.iter().enumerate() {
        three.set(n / 3, n % 3, *c);
    }
    let mut golden_three = b"P6\n3 2\n255\n".to_vec();
    golden_three.extend(colors.iter().flatten());
    let ppm_ok = encode_ppm(&one).map_err(|e| e.to_string())? == golden_one
        && encode_ppm(&three).map_err(|e| e.to_string())? == golden_three;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut extents_ok = true;
    let mut sort_ok = true;
    let cal = RgbCalibration::new([-2.0; 3], [2.0; 3], 1.0, 99.0).map_err(|e| e.to_string())?;
    for _ in 0..1000 {
        let n = rng.gen_range(1..40);
        let counts: Vec<usize> = (0..n).map(|_| rng.gen_range(0..500)).collect();
        let width = rng.gen_range(1..800);
        let ext = color_extents(&counts, width);
        if counts.iter().sum::<usize>() > 0 && ext.iter().sum::<usize>() != width {
            extents_ok = false;
        }
        let zs: Vec<[f64; 3]> = (0..rng.gen_range(1..200)).map(|_| std::array::from_fn(|_| rng.gen_range(-3.0..3.0))).collect();
        let row = build_row(0, &zs, &cal, &RowStyle::default()).map_err(|e| e.to_string())?;
        let shifted: Vec<f64> = row.hues.iter().map(|h| shifted_hue(*h, DEFAULT_HUE_ORIGIN)).collect();
        if shifted.windows(2).any(|w| w[0] > w[1]) {
            sort_ok = false;
        }
    }
    check(
        ppm_ok && extents_ok && sort_ok,
        format!("PPM goldens {ppm_ok}; extents sum to width {extents_ok}; hue order from 270 deg {sort_ok}"),
    )
}

fn random_f32(rng: &mut ChaCha8Rng) -> f32 {
    loop {
        let v = f32::from_bits(rng.gen());
        if v.is_finite() {
            return v;
        }
    }
}

fn io_round_trips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut failures = BTreeMap::from([("DSD1", 0), ("LAT1", 0), ("VAE1", 0)]);
    for n in 0..ROUND_TRIPS {
        let dims = GridDims { nx: rng.gen_range(1..20), ny: rng.gen_range(1..20), nz: rng.gen_range(1..20) };
        let n_cells = rng.gen_range(0..6);
        let cells: Vec<Cell> = (0..n_cells)
            .map(|_| {
                let raw: Vec<f64> = (0..N_BINS).map(|_| rng.gen::<f32>() as f64).collect();
                let total: f64 = raw.iter().sum::<f64>().max(1e-3);
                Cell {
                    i: rng.gen_range(0..dims.nx),
                    j: rng.gen_range(0..dims.ny),
                    k: rng.gen_range(0..dims.nz),
                    raw_sum: rng.gen_range(1e-5f32..10.0) as f64,
                    dsd: Dsd::new(raw.iter().map(|v| v / total).collect()).unwrap().quantized_f32(),
                }
            })
            .collect();
        let snap = SnapshotField::new(dims, rng.gen_range(1.0..100.0), rng.gen_range(0.0..1e5), random_f32(&mut rng), cells);
        let dsd_ok = match snap {
            Ok(s) => encode_snapshot(&s)
                .and_then(|b| decode_snapshot(&b).map(|d| (b, d)))
                .is_ok_and(|(b, d)| d == s && encode_snapshot(&d).ok() == Some(b)),
            Err(_) => true,
        };
        if !dsd_ok {
            *failures.get_mut("DSD1").unwrap() += 1;
        }

        let emb = Embedding {
            source: String::new(),
            time: f64::from_bits(rng.gen::<u64>() >> 2),
            aerosol_factor: random_f32(&mut rng),
            records: (0..rng.gen_range(0..8))
                .map(|_| LatentRecord { i: rng.gen(), j: rng.gen(), k: rng.gen(), z: std::array::from_fn(|_| random_f32(&mut rng)) })
                .collect(),
        };
        let lat_ok = encode_embedding(&emb)
            .and_then(|b| decode_embedding(&b).map(|d| (b, d)))
            .is_ok_and(|(b, d)| d == emb && encode_embedding(&d).ok() == Some(b));
        if !lat_ok {
            *failures.get_mut("LAT1").unwrap() += 1;
        }

        let hidden: Vec<usize> = (0..rng.gen_range(1..3)).map(|_| rng.gen_range(1..5)).collect();
        let act = [Activation::Identity, Activation::Silu, Activation::Tanh][n % 3];
        let mut model = VaeModel::init(&hidden, act, rng.gen()).unwrap();
        for t in model.tensors_mut() {
            t.iter_mut().for_each(|v| *v = random_f32(&mut rng) as f64);
        }
        let adam = (n % 2 == 0).then(|| {
            let p = model.n_params();
            AdamState {
                step: rng.gen(),
                m: (0..p).map(|_| random_f32(&mut rng) as f64).collect(),
                v: (0..p).map(|_| random_f32(&mut rng).abs() as f64).collect(),
            }
        });
        let ckpt = Checkpoint { model, adam, beta: f64::from_bits(rng.gen::<u64>() >> 2), seed: rng.gen() };
        let bytes = encode_checkpoint(&ckpt);
        let vae_ok = decode_checkpoint(&bytes).is_ok_and(|d| encode_checkpoint(&d) == bytes && d == ckpt);
        if !vae_ok {
            *failures.get_mut("VAE1").unwrap() += 1;
        }
    }
    check(
        failures.values().all(|&f| f == 0),
        format!("{ROUND_TRIPS} instances per format; failures {failures:?}"),
    )
}

const REDUCED: &[&str] = &[
    "synth.nx=20",
    "synth.ny=20",
    "synth.nz=14",
    "synth.cloud_threshold=0.6",
    "synth.n_timesteps=16",
    "synth.dt=1800",
    "train.epochs=2",
    "viz.times=7200,14400,25200",
    "viz.image_format=both",
    "compose.times=7200,14400,25200",
    "path.n_nodes=6",
    "path.k=50",
];

fn run_pipeline(bin: &Path, dir: &Path) -> std::result::Result<(), String> {
    for stage in ["gen", "train", "embed", "calibrate", "render", "trace", "compose", "onset"] {
        let mut cmd = Command::new(bin);
        cmd.arg("--deterministic").arg(stage).arg("--dir").arg(dir);
        for kv in REDUCED {
            cmd.arg("--set").arg(kv);
        }
        let out = cmd.output().map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{stage} failed: {}", String::from_utf8_lossy(&out.stderr).trim()));
        }
    }
    Ok(())
}

fn tree_files(root: &Path) -> std::io::Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p)?);
            }
        }
    }
    Ok(out)
}

fn end_to_end_determinism() -> Outcome {
    let bin = Path::new(env!("CARGO_BIN_EXE_dropletscope"));
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_pipeline(bin, &a)?;
    run_pipeline(bin, &b)?;
    let (ta, tb) = (tree_files(&a).map_err(|e| e.to_string())?, tree_files(&b).map_err(|e| e.to_string())?);
    let differing: Vec<&String> = ta.keys().filter(|k| tb.get(*k) != ta.get(*k)).collect();
    let stages_present = [Stage::Gen, Stage::Train, Stage::Embed, Stage::Calibrate, Stage::Render, Stage::Trace, Stage::Compose, Stage::Onset]
        .iter()
        .all(|s| ta.contains_key(&format!("{}/{}", s.dir_name(), STAGE_FILE)));
    check(
        ta.len() == tb.len() && differing.is_empty() && stages_present,
        format!("{} files per tree; differing {:?}; all stages recorded {stages_present}", ta.len(), differing),
    )
}

fn main() {
    // serial mode, as in `--deterministic`
    rayon::ThreadPoolBuilder::new().num_threads(1).build_global().ok();
    let tmp = tempfile::tempdir().expect("temporary directory");
    let exp = Experiment { layout: Layout::new(tmp.path().join("experiment")), cfg: PipelineConfig::default() };

    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("gradient correctness", Box::new(gradient_correctness)),
        ("KL correctness", Box::new(kl_correctness)),
        ("training progress", Box::new(|| training_progress(&exp))),
        ("latent separation", Box::new(|| latent_separation(&exp))),
        ("k-NN oracle equivalence", Box::new(knn_oracle)),
        ("path evolution", Box::new(|| path_evolution_ranks(&exp))),
        ("onset ordering", Box::new(|| onset_ordering(&exp))),
        ("rendering exactness", Box::new(rendering_exactness)),
        ("I/O round trips", Box::new(io_round_trips)),
        ("end-to-end determinism", Box::new(end_to_end_determinism)),
    ];
    let mut failed = 0;
    for (n, (name, run)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let (tag, detail) = match run() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {:>2} {name}: {detail} [{:.1?}]", n + 1, t0.elapsed());
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
