use std::fs;
use std::path::Path;

use ddlab::analysis::{quantile, select_candidate};
use ddlab::descent::{run_trajectory, Algorithm, DdParams, TrajectoryOptions};
use ddlab::experiment::{run_experiment, ExperimentConfig};
use ddlab::mixture::build_signalless_spec;
use ddlab::model::LinearMse;
use ddlab::state_evolution::signalless_closed_form;

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn signalless_omega_tracks_closed_form() {
    let d = 2000;
    let eta = 0.05;
    let steps = 20;
    let spec = build_signalless_spec(d).unwrap();
    let oracle = signalless_closed_form(1.0, eta, 1.0, 1.0, steps).unwrap();
    let mut per_step: Vec<Vec<f64>> = vec![Vec::new(); steps];
    for seed in 0..5 {
        let traj = run_trajectory(
            &spec,
            &LinearMse,
            None,
            Algorithm::Dd(DdParams::pure(eta)),
            &TrajectoryOptions::new(d, steps, seed),
        )
        .unwrap();
        for r in &traj.records {
            per_step[r.t - 1].push(r.overlaps.omega[(0, 0)]);
        }
    }
    let tol = 10.0 / (d as f64).sqrt();
    for (t, (values, point)) in per_step.iter_mut().zip(&oracle).enumerate() {
        values.sort_by(f64::total_cmp);
        let med = quantile(values, 0.5);
        let dev = (med - point.omega).abs() / point.omega.max(1.0);
        assert!(
            dev <= tol,
            "t = {}: median {med}, SE {}",
            t + 1,
            point.omega
        );
    }
}

#[test]
fn worker_count_does_not_change_outputs() {
    let text = r#"
experiment = "xor-eta0-sweep"
n = 150
d = 150
steps = 12
replications = 3
seed = 11
"#;
    let cfg = ExperimentConfig::load(text, &[]).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_experiment(&cfg, a.path(), Some(1)).unwrap();
    let rb = run_experiment(&cfg, b.path(), Some(2)).unwrap();
    assert_eq!(ra.summary, rb.summary);
    let ta = tree_bytes(&ra.dir);
    let tb = tree_bytes(&rb.dir);
    assert_eq!(ta.len(), tb.len());
    for ((na, ba), (nb, bb)) in ta.iter().zip(&tb) {
        assert_eq!(na, nb);
        assert!(ba == bb, "{na} differs");
    }

    let sel = ra.summary.selection.as_ref().unwrap();
    assert_eq!(sel.by_train.len(), 3);
    for k in 0..3 {
        let finals: Vec<f64> = ra
            .summary
            .variants
            .iter()
            .map(|v| v.final_train[k].unwrap_or(f64::INFINITY))
            .collect();
        assert_eq!(sel.by_train[k], select_candidate(&finals).unwrap());
    }
}

#[test]
fn manifest_reloads_to_same_config() {
    let cfg = ExperimentConfig::load("experiment = \"xor\"\nseed = 3\n", &["n=64".into()]).unwrap();
    let again = ExperimentConfig::load(&cfg.to_toml().unwrap(), &[]).unwrap();
    assert_eq!(cfg, again);
    assert_eq!(cfg.hash().unwrap(), again.hash().unwrap());
    let other =
        ExperimentConfig::load("experiment = \"xor\"\nseed = 4\n", &["n=64".into()]).unwrap();
    assert_ne!(cfg.hash().unwrap(), other.hash().unwrap());
}
