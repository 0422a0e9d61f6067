use std::collections::HashSet;

use posefuse::parallel::Execution;
use posefuse::simulator::{generate_dataset, read_dataset, write_dataset, DatasetTemplate, Regime, SceneConfig, ValueRange};

#[test]
fn written_file_round_trips_line_by_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.jsonl");
    let scenes = generate_dataset(&DatasetTemplate::default(), 10, 5, Execution::available()).unwrap();
    write_dataset(&path, &scenes).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 10);
    assert_eq!(read_dataset(&path).unwrap(), scenes);
}

#[test]
fn files_are_byte_identical_across_runs_and_schedules() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    let t = DatasetTemplate::default();
    write_dataset(&a, &generate_dataset(&t, 25, 9, Execution::available()).unwrap()).unwrap();
    write_dataset(&b, &generate_dataset(&t, 25, 9, Execution::Sequential).unwrap()).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn disjoint_master_seeds_share_no_scene_ids() {
    let t = DatasetTemplate::default();
    let a: HashSet<String> = generate_dataset(&t, 200, 1, Execution::available())
        .unwrap()
        .into_iter()
        .map(|s| s.scene_id)
        .collect();
    let b = generate_dataset(&t, 200, 2, Execution::available()).unwrap();
    assert_eq!(a.len(), 200);
    assert!(b.iter().all(|s| !a.contains(&s.scene_id)));
}

#[test]
fn default_template_mixes_regimes() {
    let scenes = generate_dataset(&DatasetTemplate::default(), 1000, 77, Execution::available()).unwrap();
    let degenerate = scenes.iter().filter(|s| s.regime() == Regime::Degenerate).count();
    assert!((200..=800).contains(&degenerate), "{degenerate} degenerate of 1000");
}

#[test]
fn fixed_template_reproduces_scene_config() {
    let cfg = SceneConfig {
        n_points: 30,
        noise_sigma: 2e-3,
        rotation_magnitude: 5.0,
        ..SceneConfig::default()
    };
    let t = DatasetTemplate::from(&cfg);
    assert_eq!(t.n_points, ValueRange::Fixed(30.0));
    let scenes = generate_dataset(&t, 5, 3, Execution::Sequential).unwrap();
    assert!(scenes.iter().all(|s| s.corr.len() == 30 && s.config.noise_sigma == 2e-3));
}

#[test]
fn template_json_accepts_scalars_and_ranges() {
    let t: DatasetTemplate = serde_json::from_str(r#"{"n_points": 20, "noise_sigma": [0.0, 1e-3]}"#).unwrap();
    assert_eq!(t.n_points, ValueRange::Fixed(20.0));
    assert_eq!(t.noise_sigma, ValueRange::Span([0.0, 1e-3]));
    assert_eq!(t.planar_ratio, DatasetTemplate::default().planar_ratio);
}

#[test]
fn malformed_line_reports_its_number() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    let scenes = generate_dataset(&DatasetTemplate::default(), 2, 5, Execution::Sequential).unwrap();
    write_dataset(&path, &scenes).unwrap();
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("{not json}\n");
    std::fs::write(&path, text).unwrap();
    let err = read_dataset(&path).unwrap_err().to_string();
    assert!(err.contains('3'), "{err}");
}
