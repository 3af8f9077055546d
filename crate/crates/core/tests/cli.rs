use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use proto_refine::classifier::ClassifierHead;
use proto_refine::data::{load_label_table, load_prototypes, load_slide, PrototypeLevel};
use proto_refine::pseudo::pseudo_label_slide;
use proto_refine::RefineConfig;
use serde_json::{json, Value};
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_proto-refine");
const N_SLIDES: u32 = 3;

fn small_spec() -> Value {
    json!({"grid_w": 32, "grid_h": 24, "seed": 3})
}

fn small_config() -> Value {
    json!({
        "synth": small_spec(),
        "n_slides": N_SLIDES,
        "dynamic_iters": 200,
        "out_dir": "run"
    })
}

fn write_json(path: &Path, v: &Value) -> PathBuf {
    fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
    path.to_path_buf()
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("PROTO_REFINE_SEED")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[track_caller]
fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Relative paths of every file under `root`, sorted.
fn tree(root: &Path) -> Vec<PathBuf> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<PathBuf>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(&p, root, out);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}

#[track_caller]
fn assert_same_tree(a: &Path, b: &Path) {
    let files = tree(a);
    assert_eq!(files, tree(b));
    for f in files {
        assert!(
            fs::read(a.join(&f)).unwrap() == fs::read(b.join(&f)).unwrap(),
            "{} differs",
            f.display()
        );
    }
}

fn synth(dir: &Path) -> PathBuf {
    let spec = write_json(&dir.join("spec.json"), &small_spec());
    let cohort = dir.join("cohort");
    let n = N_SLIDES.to_string();
    assert_exit(
        &run(&[
            "synth",
            "--spec",
            s(&spec),
            "--out-dir",
            s(&cohort),
            "--n-slides",
            &n,
        ]),
        0,
    );
    cohort
}

fn manifests(cohort: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(cohort)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
        .collect();
    v.sort();
    v
}

#[test]
fn synth_writes_cohort_and_is_deterministic() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let ca = synth(a.path());
    let cb = synth(b.path());
    let ms = manifests(&ca);
    assert_eq!(ms.len(), N_SLIDES as usize);
    for m in &ms {
        for ext in ["pemb", "meta.json", "truth.csv"] {
            assert!(
                m.with_extension(ext).exists(),
                "{ext} missing for {}",
                m.display()
            );
        }
    }
    assert_same_tree(&ca, &cb);
}

#[test]
fn synth_rejects_more_cancer_than_tissue_patterns() {
    let dir = TempDir::new().unwrap();
    let spec = write_json(
        &dir.path().join("spec.json"),
        &json!({"n_tissue_patterns": 3, "n_cancer_patterns": 4}),
    );
    let out = run(&[
        "synth",
        "--spec",
        s(&spec),
        "--out-dir",
        s(&dir.path().join("o")),
    ]);
    assert_exit(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_cancer_patterns"));
}

#[test]
fn prototype_writes_loadable_sets() {
    let dir = TempDir::new().unwrap();
    let cohort = synth(dir.path());
    let out_dir = dir.path().join("protos");
    let mut args = vec![
        "prototype".to_string(),
        "--out-dir".into(),
        s(&out_dir).into(),
    ];
    args.extend(manifests(&cohort).iter().map(|p| s(p).to_string()));
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    assert_exit(&run(&args), 0);

    let cfg = RefineConfig::default();
    let global = load_prototypes(&out_dir.join("global.pemb")).unwrap();
    assert_eq!(global.level(), PrototypeLevel::Global);
    assert_eq!(global.len(), cfg.k_global);
    let local = load_prototypes(&out_dir.join("local_slide_000.pemb")).unwrap();
    assert_eq!(local.level(), PrototypeLevel::Local);
    assert_eq!(local.source_slide(), Some("slide_000"));
    assert_eq!(local.len(), cfg.c_local);
}

#[test]
fn prototype_missing_input_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("absent.jsonl");
    let out = run(&[
        "prototype",
        "--out-dir",
        s(&dir.path().join("p")),
        s(&missing),
    ]);
    assert_exit(&out, 1);
}

fn prototypes_for(dir: &Path, cohort: &Path) -> PathBuf {
    let out_dir = dir.join("protos");
    let mut args = vec![
        "prototype".to_string(),
        "--out-dir".into(),
        s(&out_dir).into(),
    ];
    args.extend(manifests(cohort).iter().map(|p| s(p).to_string()));
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    assert_exit(&run(&args), 0);
    out_dir.join("global.pemb")
}

#[test]
fn refine_matches_library_pseudo_labels() {
    let dir = TempDir::new().unwrap();
    let cohort = synth(dir.path());
    let global = prototypes_for(dir.path(), &cohort);
    let manifest = cohort.join("slide_001.jsonl");
    let out = dir.path().join("slide_001.pseudo.csv");
    assert_exit(
        &run(&[
            "refine",
            "--slide",
            s(&manifest),
            "--prototypes",
            s(&global),
            "--out",
            s(&out),
        ]),
        0,
    );
    let slide = load_slide(&manifest, &manifest.with_extension("pemb")).unwrap();
    let set = load_prototypes(&global).unwrap();
    let expected = pseudo_label_slide(&slide, &set, &RefineConfig::default())
        .unwrap()
        .labels;
    assert_eq!(load_label_table(&out, "slide_001").unwrap(), expected);
}

#[test]
fn refine_empty_coarse_annotation_exits_one() {
    let dir = TempDir::new().unwrap();
    let cohort = synth(dir.path());
    let global = prototypes_for(dir.path(), &cohort);
    let manifest = cohort.join("slide_000.jsonl");
    let text = fs::read_to_string(&manifest).unwrap();
    fs::write(
        &manifest,
        text.replace("\"coarse_label\":1", "\"coarse_label\":0"),
    )
    .unwrap();
    let out = run(&[
        "refine",
        "--slide",
        s(&manifest),
        "--prototypes",
        s(&global),
        "--out",
        s(&dir.path().join("x.csv")),
    ]);
    assert_exit(&out, 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty coarse annotation"));
}

#[test]
fn refine_theta_out_of_range_exits_two() {
    let dir = TempDir::new().unwrap();
    let cohort = synth(dir.path());
    let global = prototypes_for(dir.path(), &cohort);
    let cfg = write_json(&dir.path().join("cfg.json"), &json!({"theta": 1.5}));
    let out = run(&[
        "refine",
        "--config",
        s(&cfg),
        "--slide",
        s(&cohort.join("slide_000.jsonl")),
        "--prototypes",
        s(&global),
        "--out",
        s(&dir.path().join("x.csv")),
    ]);
    assert_exit(&out, 2);
}

fn train(dir: &Path, cfg: &Path, manifest: &Path, labels: &Path, out_dir: &Path) -> Output {
    run(&[
        "train",
        "--config",
        s(cfg),
        "--slide",
        s(manifest),
        "--labels",
        s(labels),
        "--out-dir",
        s(&dir.join(out_dir)),
    ])
}

#[test]
fn train_with_zero_iterations_writes_zero_head() {
    let dir = TempDir::new().unwrap();
    let cohort = synth(dir.path());
    let cfg = write_json(
        &dir.path().join("cfg.json"),
        &json!({"dynamic_iters": 0, "use_refinetune": false}),
    );
    let manifest = cohort.join("slide_000.jsonl");
    let truth = cohort.join("slide_000.truth.csv");
    assert_exit(
        &train(dir.path(), &cfg, &manifest, &truth, Path::new("t")),
        0,
    );
    let text = fs::read_to_string(dir.path().join("t/slide_000.head.json")).unwrap();
    let (head, _) = ClassifierHead::from_json(&text).unwrap();
    assert!(head.params().iter().all(|&p| p == 0.0));
    let losses = fs::read_to_string(dir.path().join("t/slide_000.train.csv")).unwrap();
    assert_eq!(losses, "iteration,loss\n");
}

#[test]
fn train_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let cohort = synth(dir.path());
    let cfg = write_json(&dir.path().join("cfg.json"), &json!({"dynamic_iters": 80}));
    let manifest = cohort.join("slide_002.jsonl");
    let truth = cohort.join("slide_002.truth.csv");
    assert_exit(
        &train(dir.path(), &cfg, &manifest, &truth, Path::new("a")),
        0,
    );
    assert_exit(
        &train(dir.path(), &cfg, &manifest, &truth, Path::new("b")),
        0,
    );
    assert_same_tree(&dir.path().join("a"), &dir.path().join("b"));
}

#[test]
fn train_on_one_class_labels_exits_one() {
    let dir = TempDir::new().unwrap();
    let cohort = synth(dir.path());
    let cfg = write_json(&dir.path().join("cfg.json"), &json!({}));
    let truth = cohort.join("slide_000.truth.csv");
    let ones = dir.path().join("slide_000.ones.csv");
    let text = fs::read_to_string(&truth).unwrap();
    let mut lines = text.lines();
    let mut rewritten = format!("{}\n", lines.next().unwrap());
    for l in lines {
        let id = l.split(',').next().unwrap();
        rewritten.push_str(&format!("{id},1,1\n"));
    }
    fs::write(&ones, rewritten).unwrap();
    let out = train(
        dir.path(),
        &cfg,
        &cohort.join("slide_000.jsonl"),
        &ones,
        Path::new("t"),
    );
    assert_exit(&out, 1);
}

fn eval(pred: &[&Path], truth: &[&Path], aggregation: &str) -> Output {
    let mut args = vec![
        "eval".to_string(),
        "--aggregation".into(),
        aggregation.into(),
    ];
    for p in pred {
        args.extend(["--pred".to_string(), s(p).to_string()]);
    }
    for t in truth {
        args.extend(["--truth".to_string(), s(t).to_string()]);
    }
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    run(&args)
}

#[test]
fn eval_perfect_labels_report_ones() {
    let dir = TempDir::new().unwrap();
    let cohort = synth(dir.path());
    let truth = cohort.join("slide_000.truth.csv");
    let out = eval(&[&truth], &[&truth], "macro");
    assert_exit(&out, 0);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    for name in ["dice", "iou", "f1", "ppv", "npv", "tpr", "tnr", "accuracy"] {
        assert_eq!(report[name], json!(1.0), "{name}");
    }
}

#[test]
fn eval_mismatched_ids_exits_one() {
    let dir = TempDir::new().unwrap();
    let cohort = synth(dir.path());
    let truth = cohort.join("slide_000.truth.csv");
    let other = dir.path().join("slide_000.other.csv");
    fs::write(&other, "patch_id,label,score\nnot_a_patch,1,1\n").unwrap();
    assert_exit(&eval(&[&other], &[&truth], "macro"), 1);
}

#[test]
fn eval_macro_and_micro_agree_on_one_slide() {
    let dir = TempDir::new().unwrap();
    let cohort = synth(dir.path());
    let truth = cohort.join("slide_001.truth.csv");
    let coarse = dir.path().join("slide_001.coarse.csv");
    let slide = load_slide(
        &cohort.join("slide_001.jsonl"),
        &cohort.join("slide_001.pemb"),
    )
    .unwrap();
    proto_refine::data::save_label_table(&slide.coarse_labels(), &coarse).unwrap();
    let macro_ = eval(&[&coarse], &[&truth], "macro");
    let micro = eval(&[&coarse], &[&truth], "micro");
    assert_exit(&macro_, 0);
    assert_exit(&micro, 0);
    let a: Value = serde_json::from_slice(&macro_.stdout).unwrap();
    let b: Value = serde_json::from_slice(&micro.stdout).unwrap();
    for name in ["dice", "iou", "f1", "ppv", "npv", "tpr", "tnr", "accuracy"] {
        assert_eq!(a[name], b[name], "{name}");
    }
}

fn pipeline(cfg: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["pipeline", "--config", s(cfg)];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn pipeline_writes_report_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let cfg = write_json(&dir.path().join("cfg.json"), &small_config());
    assert_exit(&pipeline(&cfg, &["--out-dir", s(&dir.path().join("a"))]), 0);
    assert_exit(&pipeline(&cfg, &["--out-dir", s(&dir.path().join("b"))]), 0);
    let report: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("a/report.json")).unwrap())
            .unwrap();
    assert!(report["dice"].as_f64().unwrap() > 0.9);
    assert_same_tree(&dir.path().join("a"), &dir.path().join("b"));
}

#[test]
fn pipeline_without_global_uses_local_prototypes() {
    let dir = TempDir::new().unwrap();
    let mut cfg = small_config();
    cfg["use_global"] = json!(false);
    let cfg = write_json(&dir.path().join("cfg.json"), &cfg);
    assert_exit(&pipeline(&cfg, &[]), 0);
    let run_dir = dir.path().join("run");
    assert!(!run_dir.join("prototypes/global.pemb").exists());
    assert!(run_dir.join("prototypes/local_slide_000.pemb").exists());
    assert!(run_dir.join("slide_000.pseudo.csv").exists());
    assert!(run_dir.join("report.json").exists());
}

#[test]
fn pipeline_rejects_global_without_local() {
    let dir = TempDir::new().unwrap();
    let mut cfg = small_config();
    cfg["use_local_only"] = json!(false);
    let cfg = write_json(&dir.path().join("cfg.json"), &cfg);
    assert_exit(&pipeline(&cfg, &[]), 2);
}

#[test]
fn pipeline_equals_composed_subcommands() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let cfg = write_json(&d.join("cfg.json"), &small_config());
    assert_exit(&pipeline(&cfg, &[]), 0);

    let comp = d.join("comp");
    let spec = write_json(&d.join("spec.json"), &small_spec());
    let cohort = comp.join("cohort");
    let n = N_SLIDES.to_string();
    assert_exit(
        &run(&[
            "synth",
            "--spec",
            s(&spec),
            "--out-dir",
            s(&cohort),
            "--n-slides",
            &n,
        ]),
        0,
    );
    let ms = manifests(&cohort);
    let protos = comp.join("prototypes");
    let mut args = vec!["prototype", "--config", s(&cfg), "--out-dir", s(&protos)];
    args.extend(ms.iter().map(|p| s(p)));
    assert_exit(&run(&args), 0);

    let mut preds = Vec::new();
    let mut truths = Vec::new();
    for m in &ms {
        let id = m.file_stem().unwrap().to_str().unwrap();
        let pseudo = comp.join(format!("{id}.pseudo.csv"));
        let global = protos.join("global.pemb");
        assert_exit(
            &run(&[
                "refine",
                "--config",
                s(&cfg),
                "--slide",
                s(m),
                "--prototypes",
                s(&global),
                "--out",
                s(&pseudo),
            ]),
            0,
        );
        assert_exit(
            &run(&[
                "train",
                "--config",
                s(&cfg),
                "--slide",
                s(m),
                "--labels",
                s(&pseudo),
                "--out-dir",
                s(&comp),
            ]),
            0,
        );
        let refined = comp.join(format!("{id}.refined.csv"));
        let pgm = comp.join(format!("{id}.pgm"));
        assert_exit(
            &run(&[
                "render",
                "--labels",
                s(&refined),
                "--manifest",
                s(m),
                "--out",
                s(&pgm),
            ]),
            0,
        );
        preds.push(refined);
        truths.push(m.with_extension("truth.csv"));
    }
    let preds: Vec<&Path> = preds.iter().map(PathBuf::as_path).collect();
    let truths: Vec<&Path> = truths.iter().map(PathBuf::as_path).collect();
    let out = eval(&preds, &truths, "macro");
    assert_exit(&out, 0);
    fs::write(comp.join("report.json"), &out.stdout).unwrap();

    assert_same_tree(&d.join("run"), &comp);
}

#[test]
fn pipeline_seeds_write_summary() {
    let dir = TempDir::new().unwrap();
    let cfg = write_json(&dir.path().join("cfg.json"), &small_config());
    assert_exit(&pipeline(&cfg, &["--seeds", "2"]), 0);
    let run_dir = dir.path().join("run");
    assert!(run_dir.join("seed_0/report.json").exists());
    assert!(run_dir.join("seed_1/report.json").exists());
    let summary: Value =
        serde_json::from_str(&fs::read_to_string(run_dir.join("summary.json")).unwrap()).unwrap();
    let per_seed = summary["per_seed"].as_object().unwrap();
    assert_eq!(per_seed.len(), 2);
    assert!(summary["mean"]["dice"].is_number());
    assert!(summary["sd"]["dice"].is_number());
}

#[test]
fn seed_env_var_overrides_config() {
    let dir = TempDir::new().unwrap();
    let mut with_seed = small_config();
    with_seed["seed"] = json!(7);
    let a = write_json(&dir.path().join("a.json"), &with_seed);
    let b = write_json(&dir.path().join("b.json"), &small_config());
    assert_exit(&pipeline(&a, &["--out-dir", s(&dir.path().join("a"))]), 0);
    let out = Command::new(BIN)
        .args([
            "pipeline",
            "--config",
            s(&b),
            "--out-dir",
            s(&dir.path().join("b")),
        ])
        .env("PROTO_REFINE_SEED", "7")
        .output()
        .unwrap();
    assert_exit(&out, 0);
    assert_same_tree(&dir.path().join("a"), &dir.path().join("b"));

    let bad = Command::new(BIN)
        .args(["pipeline", "--config", s(&b)])
        .env("PROTO_REFINE_SEED", "seven")
        .output()
        .unwrap();
    assert_exit(&bad, 2);
}

#[test]
fn render_two_by_two_grid() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let manifest = d.join("s.jsonl");
    let mut lines = String::new();
    for (i, (x, y)) in [(0, 0), (1, 0), (0, 1), (1, 1)].iter().enumerate() {
        lines.push_str(&format!(
            "{{\"patch_id\":\"p{i}\",\"grid_x\":{x},\"grid_y\":{y},\"coarse_label\":0}}\n"
        ));
    }
    fs::write(&manifest, lines).unwrap();
    let labels = d.join("s.csv");
    fs::write(
        &labels,
        "patch_id,label,score\np0,1,1\np1,0,0\np2,0,0\np3,1,1\n",
    )
    .unwrap();
    let a = d.join("a.pgm");
    let b = d.join("b.pgm");
    for out in [&a, &b] {
        assert_exit(
            &run(&[
                "render",
                "--labels",
                s(&labels),
                "--manifest",
                s(&manifest),
                "--out",
                s(out),
            ]),
            0,
        );
    }
    let img = fs::read(&a).unwrap();
    assert_eq!(img, b"P5\n2 2\n255\n\xff\x00\x00\xff");
    assert_eq!(img, fs::read(&b).unwrap());
}

#[test]
fn malformed_config_exits_two() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, "{ not json").unwrap();
    assert_exit(&pipeline(&cfg, &[]), 2);
}
