//! The methods × seeds harness and its aggregate outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use posmatch::config::ExperimentSpec;
use posmatch::experiment::{cell_dir, cell_seed, run_experiment, FAILURE_FILE};
use posmatch::report::{collect_cells, write_summary, AGGREGATE_CSV, RUNS_CSV, TABLES_MD};
use posmatch::run::{CHECKPOINT_FILE, HISTORY_FILE, REPORT_FILE};
use posmatch::Error;
use posmatch_core::data::{generate_synthetic, GenConfig};
use posmatch_core::losses::MethodKind;

fn spec(extra: &str) -> ExperimentSpec {
    let text = format!(
        r#"
        seed = 3
        [data.synthetic]
        n_samples = 280
        seed = 5
        [model]
        extractor_hidden = [16]
        feat_dim = 16
        [train]
        epochs = 2
        {extra}
        "#
    );
    toml::from_str(&text).unwrap()
}

fn read_csv(path: &Path) -> Vec<BTreeMap<String, String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().clone();
    r.records()
        .map(|rec| header.iter().zip(rec.unwrap().iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect())
        .collect()
}

#[test]
fn full_matrix_writes_one_directory_per_cell_and_reruns_identically() {
    let spec = spec("");
    assert_eq!(spec.methods.len(), 6);
    assert_eq!(spec.seeds.len(), 5);
    let ds = generate_synthetic(spec.data.synthetic.as_ref().unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let outcome = run_experiment(&spec, &ds, dir.path(), 2).unwrap();
    outcome.status().unwrap();
    assert_eq!(outcome.cells.len(), 30);

    let mut n_dirs = 0;
    for m in &spec.methods {
        for &k in &spec.seeds {
            let d = cell_dir(dir.path(), *m, k);
            for f in [CHECKPOINT_FILE, HISTORY_FILE, REPORT_FILE] {
                assert!(d.join(f).is_file(), "{} missing", d.join(f).display());
            }
            n_dirs += 1;
        }
    }
    assert_eq!(n_dirs, 30);

    let snapshot = |root: &Path| -> Vec<Vec<u8>> {
        [AGGREGATE_CSV, RUNS_CSV, TABLES_MD].iter().map(|f| fs::read(root.join(f)).unwrap()).collect()
    };
    let first = snapshot(dir.path());
    // Serial rerun into a fresh directory.
    let dir2 = tempfile::tempdir().unwrap();
    run_experiment(&spec, &ds, dir2.path(), 1).unwrap();
    assert_eq!(snapshot(dir2.path()), first);
    // Rerun over the existing directory.
    run_experiment(&spec, &ds, dir.path(), 1).unwrap();
    assert_eq!(snapshot(dir.path()), first);
    for m in &spec.methods {
        let a = fs::read(cell_dir(dir.path(), *m, 0).join(CHECKPOINT_FILE)).unwrap();
        let b = fs::read(cell_dir(dir2.path(), *m, 0).join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(a, b, "{m}: checkpoint differs between reruns");
    }

    // Rebuilding the summary from the per-run reports reproduces it.
    let cells = collect_cells(dir.path()).unwrap();
    assert_eq!(cells, outcome.cells);
    let rebuilt = tempfile::tempdir().unwrap();
    write_summary(&cells, rebuilt.path()).unwrap();
    assert_eq!(snapshot(rebuilt.path()), first);
}

/// Recomputes every aggregate mean straight from the report JSON files,
/// without the library's aggregation code.
#[test]
fn aggregate_means_match_an_independent_reaggregation() {
    let spec = spec("");
    let ds = generate_synthetic(spec.data.synthetic.as_ref().unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&spec, &ds, dir.path(), 1).unwrap();

    let aggregate = read_csv(&dir.path().join(AGGREGATE_CSV));
    let lookup = |method: &str, metric: &str| -> f64 {
        let row = aggregate.iter().find(|r| r["method"] == method && r["metric"] == metric).unwrap();
        row["mean"].parse().unwrap()
    };
    for m in &spec.methods {
        let mut acc = Vec::new();
        let mut fairness = Vec::new();
        for &k in &spec.seeds {
            let text = fs::read_to_string(cell_dir(dir.path(), *m, k).join(REPORT_FILE)).unwrap();
            let v: serde_json::Value = serde_json::from_str(&text).unwrap();
            acc.push(v["accuracy"].as_f64().unwrap());
            fairness.push(v["attributes"][0]["fairness"].as_f64().unwrap());
        }
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        assert!((lookup(m.as_str(), "accuracy") - mean(&acc)).abs() <= 1e-12, "{m}");
        assert!((lookup(m.as_str(), "fairness/gender") - mean(&fairness)).abs() <= 1e-12, "{m}");
    }
}

#[test]
fn tables_have_delta_column_and_bold_no_label_winner() {
    let spec = spec("");
    let ds = generate_synthetic(spec.data.synthetic.as_ref().unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let outcome = run_experiment(&spec, &ds, dir.path(), 1).unwrap();
    let md = fs::read_to_string(dir.path().join(TABLES_MD)).unwrap();
    assert!(md.contains("Δ CE"));
    assert!(md.contains("## Fairness score"));
    assert!(md.contains("## Per-class fairness: gender"));
    let ce_row = md.lines().find(|l| l.starts_with("| Cross Entropy")).unwrap();
    assert!(ce_row.trim_end().ends_with("| +0.0 |"), "{ce_row}");

    // The bold accuracy belongs to the best method trained without group labels.
    let summaries = posmatch::report::summarize(&outcome.cells).unwrap();
    let best = summaries
        .iter()
        .filter(|s| !s.method.needs_group_labels())
        .max_by(|a, b| a.stat("accuracy").unwrap().mean.total_cmp(&b.stat("accuracy").unwrap().mean))
        .unwrap();
    let row = md.lines().find(|l| l.starts_with(&format!("| {} |", best.method.display_name()))).unwrap();
    assert!(row.split('|').nth(3).unwrap().trim().starts_with("**"), "{row}");
    for s in summaries.iter().filter(|s| s.method.needs_group_labels()) {
        let row = md.lines().find(|l| l.starts_with(&format!("| {} |", s.method.display_name()))).unwrap();
        assert!(!row.split('|').nth(3).unwrap().contains("**"), "{row}");
    }
}

#[test]
fn failed_cells_are_recorded_and_reported() {
    let spec = spec(
        r#"
        [overrides.domain_aware]
        domain_attributes = ["race"]
        "#,
    );
    let spec =
        ExperimentSpec { methods: vec![MethodKind::CeBaseline, MethodKind::DomainAware], seeds: vec![0, 1], ..spec };
    let ds = generate_synthetic(spec.data.synthetic.as_ref().unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let outcome = run_experiment(&spec, &ds, dir.path(), 1).unwrap();
    assert_eq!(outcome.failed(), 2);
    assert!(
        matches!(outcome.status(), Err(ref e @ Error::PartialFailure { failed: 2, total: 4 }) if e.exit_code() == 4)
    );
    assert!(cell_dir(dir.path(), MethodKind::DomainAware, 0).join(FAILURE_FILE).is_file());
    let runs = read_csv(&dir.path().join(RUNS_CSV));
    assert_eq!(runs.iter().filter(|r| r["status"] == "failed").count(), 2);
    let md = fs::read_to_string(dir.path().join(TABLES_MD)).unwrap();
    assert!(md.contains("Domain-aware (2/2 runs failed)"), "{md}");
}

#[test]
fn cell_seeds_do_not_depend_on_other_methods() {
    let a = cell_seed(3, MethodKind::PosMatch, 2);
    assert_eq!(a, cell_seed(3, MethodKind::PosMatch, 2));
    assert_ne!(a, cell_seed(3, MethodKind::CeBaseline, 2));
    assert_ne!(a, cell_seed(3, MethodKind::PosMatch, 1));
    assert_ne!(a, cell_seed(4, MethodKind::PosMatch, 2));

    // Dropping a method leaves the remaining cells' artifacts unchanged.
    let full = spec("");
    let ds = generate_synthetic(full.data.synthetic.as_ref().unwrap()).unwrap();
    let subset = ExperimentSpec { methods: vec![MethodKind::PosMatch], seeds: vec![1], ..full.clone() };
    let both = ExperimentSpec { methods: vec![MethodKind::CeBaseline, MethodKind::PosMatch], seeds: vec![1], ..full };
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    run_experiment(&subset, &ds, d1.path(), 1).unwrap();
    run_experiment(&both, &ds, d2.path(), 1).unwrap();
    let ck = |d: &Path| fs::read(cell_dir(d, MethodKind::PosMatch, 1).join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ck(d1.path()), ck(d2.path()));
}

#[test]
fn generator_defaults_are_used_without_a_data_section() {
    let spec: ExperimentSpec = toml::from_str("").unwrap();
    assert!(spec.data.csv.is_none() && spec.data.synthetic.is_none());
    let ds = posmatch::experiment::load_data(&spec).unwrap();
    assert_eq!(ds, generate_synthetic(&GenConfig::default()).unwrap());
}
