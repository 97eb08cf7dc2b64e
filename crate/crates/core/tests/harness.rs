use std::path::Path;

use fedfreeze::client::stream_rng;
use fedfreeze::data::{generate_synthetic_dataset, write_idx, SyntheticParams};
use fedfreeze::harness::presets::{preset, DEFAULT, FREEZE_ONLY, UNCONSTRAINED};
use fedfreeze::harness::{run_scenario, Scenario, CONTRIBUTIONS_FILE, ECHO_FILE, METRICS_FILE};
use fedfreeze::Error;

const TOY: &str = r#"
seed = 3
rounds = 3
devices = 4
participants = 2
samples_per_device = 8
learning_rate = 0.01
batch_size = 4
batches_per_round = 2
calibration_batch_size = 4

[model]
input_channels = 1
input_height = 4
input_width = 4

[[model.blocks]]
kind = "input"
kernel_size = 3
in_channels = 1
out_channels = 2
stride = 1
padding = 1

[[model.blocks]]
kind = "standard"
kernel_size = 3
in_channels = 2
out_channels = 2
stride = 1
padding = 1

[[model.blocks]]
kind = "output"
in_features = 2
num_classes = 2

[data]
source = "synthetic"
classes = 2
test_samples = 10
class_separation = 1.0
noise_sigma = 0.1

[[device_classes]]
name = "fast"
fraction = 0.5
float_mac_rate = 1e6
quant_cost_factor = 0.75

[[device_classes]]
name = "slow"
fraction = 0.5
float_mac_rate = 3e5
quant_cost_factor = 0.49
upload_budget = { fraction_of_model = 0.4 }
"#;

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn read(dir: &Path, file: &str) -> String {
    std::fs::read_to_string(dir.join(file)).unwrap()
}

#[test]
fn three_rounds_give_header_and_three_rows() {
    let dir = tempfile::tempdir().unwrap();
    let s = write(dir.path(), "toy.toml", TOY);
    let summary = run_scenario(&s, &dir.path().join("out"), None).unwrap();
    assert_eq!(summary.rounds, 3);
    let metrics = read(&dir.path().join("out"), METRICS_FILE);
    let rows: Vec<&str> = metrics.lines().collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0], "round,accuracy,mean_upload_bytes,accepted_updates");
    for (i, row) in rows[1..].iter().enumerate() {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[0], (i + 1).to_string());
        assert!(cols[3].parse::<usize>().unwrap() <= 2);
    }
    // Two participants per round.
    assert_eq!(read(&dir.path().join("out"), CONTRIBUTIONS_FILE).lines().count(), 1 + 3 * 2);
}

#[test]
fn same_seed_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let s = write(dir.path(), "toy.toml", TOY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_scenario(&s, &a, None).unwrap();
    run_scenario(&s, &b, None).unwrap();
    for f in [METRICS_FILE, CONTRIBUTIONS_FILE, ECHO_FILE] {
        assert_eq!(read(&a, f), read(&b, f), "{f}");
    }
}

#[test]
fn seed_override_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let s = write(dir.path(), "toy.toml", TOY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_scenario(&s, &a, None).unwrap();
    run_scenario(&s, &b, Some(4)).unwrap();
    assert_ne!(read(&a, CONTRIBUTIONS_FILE), read(&b, CONTRIBUTIONS_FILE));
    assert!(read(&b, ECHO_FILE).contains("seed = 4"));
}

#[test]
fn fractions_summing_to_0_9_are_rejected_before_any_round() {
    let dir = tempfile::tempdir().unwrap();
    let bad = TOY.replacen("fraction = 0.5", "fraction = 0.4", 1);
    let s = write(dir.path(), "bad.toml", &bad);
    let out = dir.path().join("out");
    let err = run_scenario(&s, &out, None).unwrap_err();
    assert!(matches!(err, Error::Format { .. }), "{err}");
    let msg = err.to_string();
    assert!(msg.contains("line "), "{msg}");
    assert!(msg.contains("0.9"), "{msg}");
    assert!(!out.exists());
}

#[test]
fn unknown_keys_and_bad_syntax_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let typo = write(dir.path(), "typo.toml", &TOY.replace("\nrounds = 3", "\nround = 3"));
    assert!(run_scenario(&typo, &dir.path().join("o"), None).unwrap_err().to_string().contains("round"));
    let broken = write(dir.path(), "broken.toml", "seed = = 1");
    assert!(matches!(run_scenario(&broken, &dir.path().join("o"), None), Err(Error::Format { .. })));
    assert!(matches!(run_scenario(&dir.path().join("missing.toml"), &dir.path().join("o"), None), Err(Error::Io { .. })));
}

#[test]
fn echo_file_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let s = write(dir.path(), "toy.toml", TOY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let first = run_scenario(&s, &a, None).unwrap();
    let echo = Scenario::load(&a.join(ECHO_FILE)).unwrap();
    assert_eq!(echo.deadline_seconds, Some(first.deadline_seconds));
    run_scenario(&a.join(ECHO_FILE), &b, None).unwrap();
    for f in [METRICS_FILE, CONTRIBUTIONS_FILE, ECHO_FILE] {
        assert_eq!(read(&a, f), read(&b, f), "{f}");
    }
}

#[test]
fn explicit_deadline_is_used() {
    let dir = tempfile::tempdir().unwrap();
    let text = TOY.replace("calibration_batch_size = 4", "calibration_batch_size = 4\ndeadline_seconds = 1e-9");
    let s = write(dir.path(), "tight.toml", &text);
    let summary = run_scenario(&s, &dir.path().join("out"), None).unwrap();
    assert_eq!(summary.deadline_seconds, 1e-9);
    // Nothing fits, so every selected device sits out.
    let metrics = read(&dir.path().join("out"), METRICS_FILE);
    for row in metrics.lines().skip(1) {
        assert!(row.ends_with(",0,0"), "{row}");
    }
}

fn idx_scenario(dir: &Path, classes: usize) -> std::path::PathBuf {
    let params = SyntheticParams {
        classes,
        samples: 50,
        image_size: 4,
        channels: 1,
        class_separation: 1.0,
        noise_sigma: 0.1,
        seed: 9,
    };
    let all = generate_synthetic_dataset(&params, &mut stream_rng(9, 0, 0)).unwrap();
    std::fs::create_dir_all(dir.join("data")).unwrap();
    let d = dir.join("data");
    write_idx(&all.slice(0, 40).unwrap(), &d.join("tr-img.idx"), &d.join("tr-lbl.idx")).unwrap();
    write_idx(&all.slice(40, 10).unwrap(), &d.join("te-img.idx"), &d.join("te-lbl.idx")).unwrap();
    let source = r#"[data]
source = "idx"
train_images = "data/tr-img.idx"
train_labels = "data/tr-lbl.idx"
test_images = "data/te-img.idx"
test_labels = "data/te-lbl.idx"
"#;
    let start = TOY.find("[data]").unwrap();
    let end = TOY.find("[[device_classes]]").unwrap();
    let text = format!("{}{}\n{}", &TOY[..start], source, &TOY[end..]);
    write(dir, "idx.toml", &text)
}

#[test]
fn idx_source_with_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let s = idx_scenario(dir.path(), 2);
    let summary = run_scenario(&s, &dir.path().join("out"), None).unwrap();
    assert_eq!(summary.rounds, 3);
    // The echo holds absolute paths so it can be rerun from anywhere.
    let echo = Scenario::load(&dir.path().join("out").join(ECHO_FILE)).unwrap();
    match echo.data {
        fedfreeze::harness::DataSource::Idx(idx) => assert!(idx.train_images.is_absolute()),
        other => panic!("unexpected source {other:?}"),
    }
}

#[test]
fn idx_labels_beyond_the_model_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let s = idx_scenario(dir.path(), 3);
    let err = run_scenario(&s, &dir.path().join("out"), None).unwrap_err();
    assert!(matches!(err, Error::Input(_)), "{err}");
}

#[test]
fn presets_are_valid_and_named() {
    for (name, src) in [("default", DEFAULT), ("unconstrained", UNCONSTRAINED), ("freeze_only", FREEZE_ONLY)] {
        assert_eq!(preset(name).unwrap(), src);
        Scenario::parse(src, Path::new(name)).unwrap().validate().unwrap();
    }
    assert!(preset("nope").is_none());
}
