use dropletscope::config::{PipelineConfig, RESOLVED_CONFIG_FILE};
use dropletscope::pipeline::*;
use dropletscope::viz::{decode_ppm, read_embedding, RgbCalibration};
use dropletscope::Error;

fn tiny() -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.apply_text(
        "synth.nx=12\nsynth.ny=12\nsynth.nz=10\nsynth.cloud_base=2\nsynth.max_depth=6\nsynth.cloud_threshold=0.5\n\
         synth.n_timesteps=7\nsynth.dt=3600\nsynth.onset_times=3600,7200,10800\n\
         train.epochs=2\ntrain.batch_size=32\ntrain.hidden=8\n\
         viz.times=3600,7200\nviz.slice_k=3\nviz.image_format=both\n\
         compose.times=0,7200\ncompose.panel_width=20\n\
         path.n_nodes=4\npath.n_iters=3\npath.k=5\n",
    )
    .unwrap();
    c
}

fn run_all(cfg: &PipelineConfig, layout: &Layout) {
    cmd_gen(cfg, layout).unwrap();
    cmd_train(cfg, layout).unwrap();
    cmd_embed(cfg, layout).unwrap();
    cmd_calibrate(cfg, layout).unwrap();
    cmd_render(cfg, layout).unwrap();
    cmd_trace(cfg, layout, None).unwrap();
    cmd_compose(cfg, layout).unwrap();
    cmd_onset(cfg, layout).unwrap();
}

#[test]
fn full_run_writes_every_product() {
    let tmp = tempfile::tempdir().unwrap();
    let layout = Layout::new(tmp.path());
    let cfg = tiny();
    run_all(&cfg, &layout);

    for stage in [Stage::Gen, Stage::Train, Stage::Embed, Stage::Calibrate, Stage::Render, Stage::Trace, Stage::Compose, Stage::Onset] {
        let dir = layout.dir(stage);
        assert!(dir.join(STAGE_FILE).is_file(), "{stage:?}");
        let resolved = PipelineConfig::load(&dir.join(RESOLVED_CONFIG_FILE)).unwrap();
        assert_eq!(resolved, cfg);
    }

    let onset = std::fs::read_to_string(layout.dir(Stage::Onset).join("onset.csv")).unwrap();
    let lines: Vec<&str> = onset.lines().collect();
    assert_eq!(lines[0], "aerosol_factor,onset_time_s,hue_lo,hue_hi,threshold");
    assert_eq!(lines.len(), 4);

    let comp = decode_ppm(&std::fs::read(layout.dir(Stage::Compose).join("composition.ppm")).unwrap()).unwrap();
    assert!(comp.width > 2 * cfg.compose.panel_width && comp.height > 3 * cfg.compose.row_height);
    let render = layout.dir(Stage::Render);
    assert!(render.join("a1_t7200_k3.ppm").is_file() && render.join("a1_t7200_k3.png").is_file());

    let cal = RgbCalibration::read(&layout.calibration()).unwrap();
    assert!((0..3).all(|d| cal.lo[d] < cal.hi[d]));
    let manifest = std::fs::read_to_string(layout.embed_manifest()).unwrap();
    let first = manifest.lines().find(|l| !l.starts_with('#')).unwrap();
    let lat = layout.dir(Stage::Embed).join(first.split_whitespace().next().unwrap());
    assert_eq!(read_embedding(&lat).unwrap().time, 0.0);
}

#[test]
fn compose_reports_missing_time() {
    let tmp = tempfile::tempdir().unwrap();
    let layout = Layout::new(tmp.path());
    let mut cfg = tiny();
    cfg.set("compose.times", "1234").unwrap();
    cmd_gen(&cfg, &layout).unwrap();
    cmd_train(&cfg, &layout).unwrap();
    cmd_embed(&cfg, &layout).unwrap();
    cmd_calibrate(&cfg, &layout).unwrap();
    match cmd_compose(&cfg, &layout) {
        Err(e @ Error::Lookup(_)) => {
            assert!(e.to_string().contains("1234"), "{e}");
            assert_eq!(e.exit_code(), 2);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn trace_follows_waypoints() {
    let tmp = tempfile::tempdir().unwrap();
    let layout = Layout::new(tmp.path());
    let cfg = tiny();
    cmd_gen(&cfg, &layout).unwrap();
    cmd_train(&cfg, &layout).unwrap();
    cmd_embed(&cfg, &layout).unwrap();
    cmd_calibrate(&cfg, &layout).unwrap();
    let wp = tmp.path().join("waypoints.txt");
    std::fs::write(&wp, "# z1 z2 z3\n0 0 0\n1 0 0\n1 1 0\n").unwrap();
    let trace = cmd_trace(&cfg, &layout, Some(&wp)).unwrap();
    assert_eq!(trace.path.len(), cfg.path.n_nodes);
    assert_eq!(trace.path.nodes()[0], [0.0, 0.0, 0.0]);
    assert_eq!(trace.spectra.len(), cfg.path.n_nodes);
    assert_eq!(trace.bandwidth, None);
    let info = std::fs::read_to_string(layout.dir(Stage::Trace).join("path_info.txt")).unwrap();
    assert!(info.starts_with("source waypoints"));
}

#[test]
fn rerunning_a_stage_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let layout = Layout::new(tmp.path());
    let cfg = tiny();
    run_all(&cfg, &layout);
    let before = std::fs::read(layout.dir(Stage::Trace).join("path.csv")).unwrap();
    cmd_trace(&cfg, &layout, None).unwrap();
    assert_eq!(std::fs::read(layout.dir(Stage::Trace).join("path.csv")).unwrap(), before);
}
