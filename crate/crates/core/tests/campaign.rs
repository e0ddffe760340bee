mod common;

use std::fs;
use std::path::Path;
use std::process::Command;
use std::sync::atomic::Ordering;

use common::{fixture, one_pixel_victim, Constant, Instrumented};
use rfpar::attack::AttackConfig;
use rfpar::campaign::{
    parse_config, run_campaign, run_campaign_with, run_random_baseline_with, CampaignConfig,
    InputSpec, LoadedVictim, QueryBudget, Task, VictimSpec,
};
use rfpar::image::{save_image, Dims, Image};
use rfpar::metrics::{AttackKind, CampaignReport};
use rfpar::victims::TinyCnn;

fn classify_cfg(out: &Path, files: usize, max_cycles: usize) -> CampaignConfig {
    CampaignConfig {
        task: Task::Classify,
        victim: VictimSpec::TinyCnn {
            weights: fixture("tiny_cnn.rfpw"),
        },
        input: InputSpec::Files((0..files).map(|i| fixture(&format!("classify/img_{i:03}.png"))).collect()),
        labels: Some(fixture("classify/labels.json")),
        output: out.to_path_buf(),
        attack: AttackConfig {
            max_cycles,
            seed: 17,
            ..AttackConfig::classification()
        },
        baseline: false,
        baseline_query_budget: None,
        workers: 1,
        save_images: true,
    }
}

#[test]
fn seeded_campaign_is_byte_identical_across_runs_and_workers() {
    let dir = tempfile::tempdir().unwrap();
    let a = classify_cfg(&dir.path().join("a"), 6, 8);
    let b = CampaignConfig {
        output: dir.path().join("b"),
        workers: 3,
        ..a.clone()
    };
    run_campaign(&a).unwrap();
    run_campaign(&b).unwrap();
    for name in ["report.json", "report.csv", "img_002_adv.png", "img_002_delta.png"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(name)).unwrap(),
            fs::read(dir.path().join("b").join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn reported_queries_equal_instrumented_calls() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = classify_cfg(dir.path(), 5, 6);
    let victim = Instrumented::new(TinyCnn::load(fixture("tiny_cnn.rfpw")).unwrap());
    let calls = victim.calls.clone();
    let loaded = LoadedVictim::Classifier(Box::new(victim));
    let report = run_campaign_with(&cfg, &loaded).unwrap();
    assert_eq!(report.attacked, 5);
    assert_eq!(report.total_queries, calls.load(Ordering::SeqCst));
    assert_eq!(report.total_queries, report.images.iter().map(|r| r.queries).sum::<u64>());

    let before = calls.load(Ordering::SeqCst);
    let base = run_random_baseline_with(&cfg, &loaded, &QueryBudget::matching(&report)).unwrap();
    assert_eq!(base.attack, AttackKind::RandomBaseline);
    assert_eq!(base.total_queries, calls.load(Ordering::SeqCst) - before);
    for (r, b) in report.images.iter().zip(&base.images) {
        assert_eq!(r.file, b.file);
        assert!(b.queries <= r.queries);
    }
    assert!(dir.path().join("baseline/report.json").exists());
}

#[test]
fn rows_sort_by_file_and_seeds_follow_input_position() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = classify_cfg(dir.path(), 3, 2);
    cfg.save_images = false;
    if let InputSpec::Files(f) = &mut cfg.input {
        f.reverse();
    }
    let report = run_campaign(&cfg).unwrap();
    let files: Vec<&str> = report.images.iter().map(|r| r.file.as_str()).collect();
    assert_eq!(files, ["img_000.png", "img_001.png", "img_002.png"]);
    // img_002 was first in the list, so it got index 0
    assert_eq!(report.images[2].seed, rfpar::campaign::image_seed(17, 0));
    assert_eq!(report.images[0].seed, rfpar::campaign::image_seed(17, 2));
}

#[test]
fn misclassified_and_empty_images_are_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let labels = dir.path().join("labels.json");
    // img_000 is class 0; claim otherwise
    fs::write(&labels, r#"{"img_000.png": 3, "img_001.png": 1}"#).unwrap();
    let mut cfg = classify_cfg(&dir.path().join("out"), 2, 2);
    cfg.labels = Some(labels);
    let report = run_campaign(&cfg).unwrap();
    assert_eq!(report.attacked, 1);
    assert_eq!(report.skipped.len(), 1);
    assert_eq!(report.skipped[0].file, "img_000.png");

    let black = dir.path().join("black.png");
    save_image(&Image::filled(Dims::new(3, 16, 16), 0.0).unwrap(), &black).unwrap();
    let det = parse_config(
        &format!(
            r#"{{"task":"detect","victim":{{"kind":"grid_detector"}},"input":["{}"],"output":"{}"}}"#,
            black.display(),
            dir.path().join("det").display()
        ),
        Path::new(""),
    )
    .unwrap();
    let report = run_campaign(&det).unwrap();
    assert_eq!((report.attacked, report.skipped.len()), (0, 1));
    assert_eq!(report.detection.unwrap().removal_rate, 0.0);
}

#[test]
fn empty_input_directory_gives_empty_report() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("in")).unwrap();
    let mut cfg = classify_cfg(&dir.path().join("out"), 0, 1);
    cfg.input = InputSpec::Dir(dir.path().join("in"));
    let report = run_campaign(&cfg).unwrap();
    assert_eq!((report.attacked, report.success_rate), (0, 0.0));
    let parsed: CampaignReport =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/report.json")).unwrap()).unwrap();
    assert_eq!(parsed, report);
}

#[test]
fn baseline_never_beats_a_constant_victim() {
    let dir = tempfile::tempdir().unwrap();
    let dims = Dims::new(3, 32, 32);
    let input = dir.path().join("in");
    fs::create_dir(&input).unwrap();
    let mut labels = String::from("{");
    for i in 0..4 {
        save_image(&common::textured(dims, i), input.join(format!("c{i}.png"))).unwrap();
        labels += &format!("{}\"c{i}.png\": 0", if i > 0 { "," } else { "" });
    }
    fs::write(dir.path().join("labels.json"), labels + "}").unwrap();
    let mut cfg = classify_cfg(&dir.path().join("out"), 0, 1);
    cfg.input = InputSpec::Dir(input);
    cfg.labels = Some(dir.path().join("labels.json"));
    let loaded = LoadedVictim::Classifier(Box::new(Constant { dims }));
    let report = run_random_baseline_with(&cfg, &loaded, &QueryBudget::Fixed(50)).unwrap();
    assert_eq!(report.attacked, 4);
    assert_eq!(report.success_rate, 0.0);
    assert!(report.images.iter().all(|r| r.queries == 51));
}

#[test]
fn baseline_success_count_matches_binomial_expectation() {
    // One written element (channel 0 at one of 1024 pixels) flips the victim;
    // a random query hits it with p = 1/1024 * 1/2.
    let dims = Dims::new(3, 32, 32);
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    fs::create_dir(&input).unwrap();
    let images = 120;
    let mut labels = serde_json::Map::new();
    for i in 0..images {
        let name = format!("g{i:03}.png");
        save_image(&Image::filled(dims, 0.5).unwrap(), input.join(&name)).unwrap();
        labels.insert(name, 0.into());
    }
    fs::write(dir.path().join("labels.json"), serde_json::Value::Object(labels).to_string()).unwrap();
    let mut cfg = classify_cfg(&dir.path().join("out"), 0, 1);
    cfg.input = InputSpec::Dir(input);
    cfg.labels = Some(dir.path().join("labels.json"));
    cfg.save_images = false;
    let budget = 400u64;
    let loaded = LoadedVictim::Classifier(Box::new(one_pixel_victim(dims, 9, 20)));
    let report = run_random_baseline_with(&cfg, &loaded, &QueryBudget::Fixed(budget)).unwrap();

    let p = 1.0 / 2048.0;
    let q = 1.0 - (1.0f64 - p).powi(budget as i32);
    let n = images as f64;
    let mean = n * q;
    let half = 1.96 * (n * q * (1.0 - q)).sqrt();
    let k = report.successes as f64;
    assert!((mean - half..=mean + half).contains(&k), "{k} successes, expected {mean:.1} ± {half:.1}");
    for r in &report.images {
        assert!(r.queries <= budget + 1);
        if r.success {
            assert_eq!(r.l0_pixels, 1);
        }
    }
}

#[test]
fn cli_runs_and_rejects_bad_configs() {
    let bin = env!("CARGO_BIN_EXE_rfpar");
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("ok.json");
    fs::write(
        &cfg,
        format!(
            r#"{{"task":"classify","victim":{{"kind":"tiny_cnn","weights":"{}"}},"input":["{}"],"labels":"{}","max_cycles":3,"output":"out"}}"#,
            fixture("tiny_cnn.rfpw").display(),
            fixture("classify/img_004.png").display(),
            fixture("classify/labels.json").display()
        ),
    )
    .unwrap();
    let ok = Command::new(bin)
        .args(["attack", "--config"])
        .arg(&cfg)
        .args(["--baseline", "--ablate", "init", "--workers", "1"])
        .output()
        .unwrap();
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(dir.path().join("out/report.json").exists());
    assert!(dir.path().join("out/baseline/report.csv").exists());
    assert!(dir.path().join("out/img_004_adv.png").exists());

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"task":"classify","victim":{"kind":"tiny_cnn","weights":"w"},"input":"x","labels":"l","eta":-1}"#).unwrap();
    let out = Command::new(bin).args(["attack", "--config"]).arg(&bad).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("eta"));

    let missing = dir.path().join("missing.json");
    fs::write(&missing, r#"{"task":"classify","victim":{"kind":"tiny_cnn","weights":"nope.rfpw"},"input":"x","labels":"l"}"#).unwrap();
    let out = Command::new(bin).args(["attack", "--config"]).arg(&missing).output().unwrap();
    assert!(!out.status.success());
}
