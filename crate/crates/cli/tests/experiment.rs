mod common;

use common::*;
use loft_cli::config::GridConfig;
use loft_cli::experiment::grid_cells;
use loft_cli::{run_experiment, Layout};
use loft_core::lora::LambdaSampler;
use loft_core::pipelines::GenMethod;

fn tiny_grid() -> GridConfig {
    tiny_config().experiment.default_grid
}

#[test]
fn default_grid_has_108_cells_in_fixed_order() {
    let cells = grid_cells(&GridConfig::default()).unwrap();
    assert_eq!(cells.len(), 108);
    let first = &cells[0];
    assert_eq!((first.method.clone(), first.s, first.k, first.seed), (GenMethod::ClassCond, 50, 2, 0));
    let last = cells.last().unwrap();
    assert_eq!(
        (last.method.clone(), last.s, last.k, last.seed),
        (GenMethod::Loft(LambdaSampler::Fixed(1.0)), 200, 8, 2)
    );
    assert_eq!(cells[1].seed, 1);
    assert_eq!(cells[3].k, 4);
}

#[test]
fn ablation_grid_covers_every_fusion_sampler() {
    let methods = GridConfig::ablation().parsed_methods().unwrap();
    assert_eq!(methods.len(), 11);
    let samplers: Vec<LambdaSampler> = methods
        .into_iter()
        .map(|m| match m {
            GenMethod::Loft(s) => s,
            other => panic!("{other} is not a fusion method"),
        })
        .collect();
    assert_eq!(samplers[..5], [0.0, 0.3, 0.5, 0.7, 1.0].map(LambdaSampler::Fixed));
    assert_eq!(samplers[5..8], [2.0, 5.0, 10.0].map(LambdaSampler::Beta));
    for s in &samplers[8..] {
        let LambdaSampler::Explicit(w) = s else { panic!("{s}") };
        assert_eq!(w.len(), 3);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let LambdaSampler::Explicit(equal) = &samplers[9] else { unreachable!() };
    assert!(equal.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-12));
}

#[test]
fn experiment_is_deterministic_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let grid = tiny_grid();
    let (a, b) = (Layout::new(dir.path().join("a")), Layout::new(dir.path().join("b")));

    let first = run_experiment(&cfg, &grid, "default", &a).unwrap();
    assert_eq!(first.results.len(), grid.cells());
    assert!(first.results.iter().all(|r| r.is_ok()), "{:?}", first.results.iter().find(|r| !r.is_ok()));
    assert_eq!(first.reused, 0);
    let csv = std::fs::read_to_string(&first.results_path).unwrap();
    assert_eq!(csv.lines().count(), 1 + grid.cells());

    let mut serial = cfg.clone();
    serial.experiment.workers = 1;
    let second = run_experiment(&serial, &grid, "default", &b).unwrap();
    assert_eq!(csv, std::fs::read_to_string(&second.results_path).unwrap());

    // drop half of the finished cells, as if interrupted; class-conditional
    // cells differing only in k share one entry
    let cells_dir = a.cache().join("cells");
    let mut cached: Vec<_> = std::fs::read_dir(&cells_dir).unwrap().map(|e| e.unwrap().path()).collect();
    cached.sort();
    for p in cached.iter().step_by(2) {
        std::fs::remove_file(p).unwrap();
    }
    let resumed = run_experiment(&cfg, &grid, "default", &a).unwrap();
    assert!(resumed.reused > 0 && resumed.reused < grid.cells(), "{}", resumed.reused);
    assert_eq!(csv, std::fs::read_to_string(&resumed.results_path).unwrap());
    assert_eq!(run_experiment(&cfg, &grid, "default", &a).unwrap().reused, grid.cells());
}

#[test]
fn cache_entries_follow_their_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let layout = Layout::new(dir.path());
    let mut cfg = tiny_config();
    let mut grid = tiny_grid();
    grid.methods = vec!["classcond".into()];
    grid.seeds = vec![0];
    let count = |prefix: &str| {
        std::fs::read_dir(layout.cache())
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with(prefix))
            .count()
    };
    run_experiment(&cfg, &grid, "g", &layout).unwrap();
    assert_eq!(count("base-"), 2); // checkpoint and loss trace

    cfg.downstream.classifier.epochs += 1;
    let changed = run_experiment(&cfg, &grid, "g", &layout).unwrap();
    assert_eq!(changed.reused, 0);
    assert_eq!(count("base-"), 2);

    cfg.diffusion.train.steps += 1;
    let retrained = run_experiment(&cfg, &grid, "g", &layout).unwrap();
    assert_eq!(retrained.reused, 0);
    assert_eq!(count("base-"), 4);
}

#[test]
fn failing_cells_are_recorded_and_the_grid_continues() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let mut grid = tiny_grid();
    grid.ks = vec![2, 9]; // the pool holds 8 images per class
    grid.seeds = vec![0];
    let out = run_experiment(&cfg, &grid, "g", &Layout::new(dir.path())).unwrap();
    assert_eq!(out.results.len(), grid.cells());
    for r in &out.results {
        let needs_shots = r.method != "classcond";
        assert_eq!(r.is_ok(), !(needs_shots && r.k == 9), "{r:?}");
    }
    let csv = std::fs::read_to_string(&out.results_path).unwrap();
    let failed = csv.lines().filter(|l| l.contains("error: insufficient data")).count();
    assert_eq!(failed, 3 * grid.sizes.len());
    // failed cells are retried rather than cached
    let again = run_experiment(&cfg, &grid, "g", &Layout::new(dir.path())).unwrap();
    assert_eq!(again.reused, grid.cells() - failed);
}

#[test]
fn result_rows_carry_per_class_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let mut grid = tiny_grid();
    grid.methods = vec!["loft-fixed:0.5".into()];
    grid.ks = vec![2];
    grid.sizes = vec![4];
    grid.seeds = vec![3];
    let out = run_experiment(&tiny_config(), &grid, "g", &Layout::new(dir.path())).unwrap();
    let csv = std::fs::read_to_string(&out.results_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "method,k,s,seed,accuracy,class_0,class_1,class_2,recognizability,diversity,fid,status"
    );
    assert!(lines[1].starts_with("loft-fixed:0.5,2,4,3,"));
    assert!(lines[1].ends_with(",ok"));
    let r = &out.results[0];
    assert_eq!(r.records.len(), 3);
    assert!(r.records.iter().all(|m| m.n_synthetic == 4 && m.n_real == 20));
    let scatter = std::fs::read_to_string(&out.scatter_path).unwrap();
    assert_eq!(scatter.lines().count(), 1 + 3);
    assert!(scatter.lines().nth(1).unwrap().starts_with("loft-fixed:0.5|k2|s4|seed3,0,"));
}
