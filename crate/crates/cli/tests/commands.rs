use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use refexp_cli::backend::{BackendSpec, ToyLmKind};
use refexp_cli::evaluate::{run_evaluate, EvaluateOptions, EvaluationRecord, Summary};
use refexp_cli::generate::{run_generate, GenerateOptions, GenerationRecord};
use refexp_cli::scenes::{read_jsonl, read_scenes, SceneFile};
use refexp_cli::sweep::{read_sweep_csv, run_sweep, SweepGrid, SweepOptions};
use refexp_cli::toy::{adversarial_specs, random_specs, write_scene_set, ToySceneSpec};
use refexp_core::backends::protocol::serve_tcp;
use refexp_core::backends::toy::{ToyEncoder, ToyLm, ToyTable, ToyWorld};
use refexp_core::{Hyperparameters, ImagingConfig, LanguageModel};
use tempfile::TempDir;

fn refexp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_refexp"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn scene(words: &[&[&str]], target: usize) -> ToySceneSpec {
    let regions: Vec<_> = words
        .iter()
        .map(|ws| ws.iter().map(|w| w.to_string()).collect())
        .collect();
    ToySceneSpec {
        ground_truth: vec![words[target].join(" ")],
        regions,
        target,
    }
}

fn three_scenes(dir: &TempDir) -> PathBuf {
    let specs = vec![
        scene(&[&["red", "ball"], &["blue", "ball"]], 0),
        scene(&[&["small", "cube"], &["large", "cube"], &["green", "cone"]], 1),
        scene(&[&["yellow", "cone"]], 0),
    ];
    write_scene_set(dir.path(), "three", &ToyWorld::default(), &specs).unwrap()
}

const SMALL: [&str; 2] = ["--encoder-resolution", "32"];

#[test]
fn generate_writes_one_line_per_scene_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = three_scenes(&dir);
    let out = dir.path().join("gen.jsonl");
    let run = refexp(&["generate", "--scenes", p(&scenes), "--workers", "3", "--out", p(&out), SMALL[0], SMALL[1]]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let records: Vec<GenerationRecord> = read_jsonl(&out).unwrap();
    let ids: Vec<_> = records.iter().map(|r| r.scene_id.as_str()).collect();
    assert_eq!(ids, ["three-000", "three-001", "three-002"]);
    assert!(records.iter().all(|r| r.expression.is_some() && r.trace.is_none()));
    assert!(records[0].expression.as_deref().unwrap().contains("red"));

    let traced = refexp(&["generate", "--scenes", p(&scenes), "--trace", SMALL[0], SMALL[1]]);
    let first: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&traced.stdout).lines().next().unwrap()).unwrap();
    assert!(first["trace"].as_array().is_some_and(|t| !t.is_empty()));
    assert!(first["tokens"].is_array());
}

#[test]
fn guidance_off_matches_greedy_language_model() {
    let dir = tempfile::tempdir().unwrap();
    let specs = vec![scene(&[&["red", "ball"], &["blue", "cube"]], 1)];
    let scenes = write_scene_set(dir.path(), "one", &ToyWorld::default(), &specs).unwrap();
    let run = refexp(&[
        "generate", "--scenes", p(&scenes), "--beta", "0", "--alpha", "0", "--toy-lm", "seeded:4", SMALL[0], SMALL[1],
    ]);
    assert!(run.status.success());
    let rec: GenerationRecord = serde_json::from_slice(run.stdout.split(|&b| b == b'\n').next().unwrap()).unwrap();

    let world = Arc::new(ToyWorld::default());
    let lm = ToyLm::new(world.clone(), ToyTable::Seeded(4));
    let mut ctx = lm.tokenize("A photo of").unwrap();
    let mut generated = Vec::new();
    let stops = [world.eot_token(), world.token_id(".").unwrap()];
    for _ in 0..16 {
        let t = lm.top_k(&ctx, 1).unwrap()[0].token;
        ctx.push(t);
        if t != world.eot_token() {
            generated.push(t);
        }
        if stops.contains(&t) {
            break;
        }
    }
    assert_eq!(rec.expression.unwrap(), lm.detokenize(&generated).unwrap());

    // the same flag through the environment
    let env_run = Command::new(env!("CARGO_BIN_EXE_refexp"))
        .args(["generate", "--scenes", p(&scenes), "--toy-lm", "seeded:4", SMALL[0], SMALL[1]])
        .env("DISCLIP_BETA", "0")
        .env("DISCLIP_ALPHA", "0")
        .output()
        .unwrap();
    assert_eq!(env_run.stdout, run.stdout);
}

#[test]
fn missing_image_gives_error_record_and_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = three_scenes(&dir);
    std::fs::remove_file(dir.path().join("three-001.png")).unwrap();
    let run = refexp(&["generate", "--scenes", p(&scenes), SMALL[0], SMALL[1]]);
    assert_eq!(run.status.code(), Some(1));
    let lines: Vec<GenerationRecord> = String::from_utf8_lossy(&run.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].error.is_none() && lines[2].error.is_none());
    assert_eq!(lines[1].scene_id, "three-001");
    assert!(lines[1].error.as_deref().unwrap().contains("three-001.png"));

    let unreachable = refexp(&["generate", "--scenes", p(&scenes), "--backend", "tcp://127.0.0.1:1"]);
    assert_eq!(unreachable.status.code(), Some(2));
    assert!(unreachable.stdout.is_empty());
}

#[test]
fn evaluate_ground_truth_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = three_scenes(&dir);
    let entries = read_scenes(&scenes).unwrap();
    let exprs = dir.path().join("gt.jsonl");
    let lines: Vec<String> = entries
        .iter()
        .map(|e| serde_json::json!({"scene_id": e.id, "expression": e.file.ground_truth[0]}).to_string())
        .collect();
    std::fs::write(&exprs, lines.join("\n")).unwrap();

    let out = dir.path().join("eval.jsonl");
    let run = refexp(&["evaluate", "--expressions", p(&exprs), "--scenes", p(&scenes), "--out", p(&out), SMALL[0], SMALL[1]]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let records: Vec<EvaluationRecord> = read_jsonl(&out).unwrap();
    assert_eq!(records.len(), 4);
    let EvaluationRecord::Summary(s) = records.last().unwrap() else {
        panic!("summary last")
    };
    assert_eq!(s.n, 3);
    assert_eq!(s.listener_accuracy, Some(1.0));
    assert_eq!(s.bleu1, Some(1.0));
    assert_eq!(s.bleu4, Some(1.0));
    assert_eq!(s.rouge_l, Some(1.0));
    assert_eq!(s.novel_fraction, 0.0);
    assert_eq!(s.vocab_size, 6);

    std::fs::write(&exprs, "").unwrap();
    let empty = refexp(&["evaluate", "--expressions", p(&exprs), "--scenes", p(&scenes)]);
    assert_eq!(empty.status.code(), Some(2));
}

#[test]
fn evaluate_reports_join_failures_per_id() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = three_scenes(&dir);
    let exprs = dir.path().join("e.jsonl");
    std::fs::write(
        &exprs,
        concat!(
            r#"{"scene_id":"three-000","expression":"red"}"#, "\n",
            r#"{"scene_id":"nope","expression":"red"}"#, "\n",
            r#"{"scene_id":"three-002","error":"backend down"}"#, "\n",
        ),
    )
    .unwrap();
    let run = refexp(&["evaluate", "--expressions", p(&exprs), "--scenes", p(&scenes), SMALL[0], SMALL[1]]);
    assert_eq!(run.status.code(), Some(1));
    let records: Vec<EvaluationRecord> = String::from_utf8_lossy(&run.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(matches!(&records[0], EvaluationRecord::Example(e) if e.correct));
    assert!(matches!(&records[1], EvaluationRecord::Error { scene_id, .. } if scene_id == "nope"));
    assert!(matches!(&records[2], EvaluationRecord::Error { error, .. } if error.contains("backend down")));
    assert!(matches!(&records[3], EvaluationRecord::Summary(Summary { n: 1, .. })));
}

#[test]
fn sweep_grid_counts_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let specs = vec![scene(&[&["red", "ball"], &["blue", "ball"]], 0)];
    let scenes = write_scene_set(dir.path(), "s", &ToyWorld::default(), &specs).unwrap();
    let out = dir.path().join("sweep.csv");
    let run = refexp(&[
        "sweep", "--scenes", p(&scenes), "--deltas", "0,1", "--lambdas", "0.5,1", "--out", p(&out), SMALL[0], SMALL[1],
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().next(), Some("delta,lambda,accuracy,n"));
    let rows = read_sweep_csv(&out).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.n == 1));

    let bad = dir.path().join("bad.csv");
    let run = refexp(&["sweep", "--scenes", p(&scenes), "--lambdas", "0.5,1.5", "--out", p(&bad)]);
    assert_eq!(run.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&run.stderr).contains("outside [0, 1]"));
    assert!(!bad.exists());
}

#[test]
fn one_cell_sweep_equals_generate_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let world = ToyWorld::default();
    let scenes = write_scene_set(dir.path(), "adv", &world, &adversarial_specs(12, 5)).unwrap();
    let entries = read_scenes(&scenes).unwrap();
    let spec = BackendSpec::toy(world, ToyLmKind::Seeded(2));
    let imaging = ImagingConfig {
        encoder_resolution: 32,
        ..ImagingConfig::default()
    };
    for (delta, lambda) in [(0.0, 0.5), (1.0, 1.0)] {
        let hyper = Hyperparameters::builder()
            .delta(delta)
            .lambda(lambda)
            .max_tokens(3)
            .build()
            .unwrap();
        let base = GenerateOptions {
            hyper,
            imaging: imaging.clone(),
            workers: 2,
            ..GenerateOptions::default()
        };
        let sweep = run_sweep(
            &entries,
            &spec,
            &SweepOptions {
                grid: SweepGrid {
                    delta_values: vec![delta],
                    lambda_values: vec![lambda],
                    sample_count: 100,
                },
                base: base.clone(),
                listener_delta: 0.5,
                sim_mode: Default::default(),
                seed: 0,
            },
        )
        .unwrap();
        let generated = run_generate(&entries, &spec, &base).unwrap();
        let evaluated = run_evaluate(
            &generated,
            &entries,
            &spec,
            &EvaluateOptions {
                imaging: imaging.clone(),
                ..EvaluateOptions::default()
            },
        )
        .unwrap();
        let Some(EvaluationRecord::Summary(summary)) = evaluated.last() else {
            panic!("summary last")
        };
        assert_eq!(sweep.len(), 1);
        assert_eq!(sweep[0].accuracy, summary.listener_accuracy);
        assert_eq!(sweep[0].n, summary.n);
    }
}

#[test]
fn best_sweep_cell_feeds_generation() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = write_scene_set(dir.path(), "adv", &ToyWorld::default(), &adversarial_specs(6, 1)).unwrap();
    let csv = dir.path().join("grid.csv");
    std::fs::write(&csv, "delta,lambda,accuracy,n\n0.0,1.0,0.5,6\n0.25,0.5,1.0,6\n1.0,0.5,,0\n").unwrap();
    let hpt = refexp(&["generate", "--scenes", p(&scenes), "--hpt-from", p(&csv), SMALL[0], SMALL[1]]);
    let direct = refexp(&["generate", "--scenes", p(&scenes), "--delta", "0.25", "--lambda", "0.5", SMALL[0], SMALL[1]]);
    assert!(hpt.status.success());
    assert_eq!(hpt.stdout, direct.stdout);
}

#[test]
fn convert_writes_loadable_scene_files() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("refs.json");
    std::fs::write(
        &input,
        r#"{"images": [{"id": 1, "file_name": "img.png", "width": 40, "height": 20}],
            "annotations": [{"id": 1, "image_id": 1, "bbox": [0, 0, 20, 20]},
                            {"id": 2, "image_id": 1, "bbox": [20, 0, 20, 20]}],
            "refs": [{"ref_id": 1, "ann_id": 2, "sentences": ["right"]},
                     {"ref_id": 2, "ann_ids": [1, 2], "sentences": ["both"]}]}"#,
    )
    .unwrap();
    let out = dir.path().join("scenes.jsonl");
    let run = refexp(&["convert", "--input", p(&input), "--format", "refcoco_like", "--out", p(&out)]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(String::from_utf8_lossy(&run.stderr).contains(r#""group_refs_skipped":1"#));
    let files: Vec<SceneFile> = read_jsonl(&out).unwrap();
    assert_eq!(files.len(), 1);
    assert_eq!(files[0].regions.len(), 2);
    assert_eq!(files[0].target_id, "2");

    std::fs::write(&input, r#"{"images": [], "annotations": [{"id": 1, "image_id": 1, "bbox": [0, 0]}], "refs": []}"#).unwrap();
    let run = refexp(&["convert", "--input", p(&input), "--format", "refcoco_like"]);
    assert_eq!(run.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&run.stderr).contains("annotations[0].bbox"));
}

#[test]
fn tcp_backend_matches_in_process_toy() {
    let world = ToyWorld::default();
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let shared = Arc::new(world.clone());
    let lm = Arc::new(ToyLm::new(shared.clone(), ToyTable::Seeded(8)));
    let enc = Arc::new(ToyEncoder::new(shared));
    std::thread::spawn(move || serve_tcp(listener, lm, enc));

    let dir = tempfile::tempdir().unwrap();
    let scenes = write_scene_set(dir.path(), "r", &world, &random_specs(&world, 5, 3, 4)).unwrap();
    let entries = read_scenes(&scenes).unwrap();
    let opts = GenerateOptions {
        imaging: ImagingConfig {
            encoder_resolution: 32,
            ..ImagingConfig::default()
        },
        workers: 3,
        ..GenerateOptions::default()
    };
    let local = run_generate(&entries, &BackendSpec::toy(world, ToyLmKind::Seeded(8)), &opts).unwrap();
    let remote = run_generate(&entries, &BackendSpec::Remote(format!("tcp://{addr}")), &opts).unwrap();
    assert_eq!(local, remote);
    assert!(local.iter().all(|r| r.error.is_none()));
}
