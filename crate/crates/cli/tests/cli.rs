use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ili_core::trainer::TrainConfig;
use ili_core::synth::SynthConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn ili(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ili"))
        .args(args)
        .env_remove("ILI_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_data(dir: &Path) {
    let o = ili(&[
        "gen-data", "--out", p(dir), "--classes", "3", "--clips", "90", "--audio-dim", "4", "--visual-dim", "5",
        "--seed", "3",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

const QUICK: &[&str] = &["--epochs", "12", "--hidden", "8", "--batch-size", "32", "--lr", "0.01", "--tau", "0.3"];

fn quick_train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", p(data), "--out", p(out)];
    args.extend_from_slice(QUICK);
    args.extend_from_slice(extra);
    ili(&args)
}

#[test]
fn gen_data_writes_dataset_files() {
    let dir = tempfile::tempdir().unwrap();
    let o = ili(&["gen-data", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(0));
    for f in ["train.csv", "test.csv", "meta.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let train = fs::read_to_string(dir.path().join("train.csv")).unwrap();
    assert_eq!(train.lines().count(), 1 + 960);
}

#[test]
fn gen_data_without_out_is_usage_error() {
    assert_eq!(ili(&["gen-data"]).status.code(), Some(2));
}

#[test]
fn gen_data_rejects_invalid_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"classes": 1, "cooccurrence": [[0.0]]}"#).unwrap();
    let o = ili(&["gen-data", "--config", p(&cfg), "--out", p(&dir.path().join("d"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gen_data_is_byte_identical_per_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ili(&["gen-data", "--out", p(a.path()), "--seed", "7"]);
    let o = Command::new(env!("CARGO_BIN_EXE_ili"))
        .args(["gen-data", "--out", p(b.path())])
        .env("ILI_SEED", "7")
        .output()
        .unwrap();
    assert!(o.status.success());
    for f in ["train.csv", "test.csv", "meta.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn train_eval_and_heatmap_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    small_data(&data);
    let o = quick_train(&data, &run, &["--transition-epoch", "6", "--checkpoint-epochs", "3,6,9"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for e in [3, 6, 9] {
        for f in ["model", "graph.csv", "log.csv"] {
            assert!(run.join(format!("ckpt_epoch_{e}")).join(f).exists());
        }
    }
    let log = fs::read_to_string(run.join("log.csv")).unwrap();
    assert!(log.starts_with("epoch,loss_total,loss_avsal,loss_triplet,loss_lir,map_a2v,map_v2a\n"));
    assert_eq!(log.lines().count(), 13);

    let results = dir.path().join("results.csv");
    let o = ili(&[
        "eval", "--ckpt", p(&run.join("final")), "--data", p(&data), "--out", p(&results), "--topk", "14",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("A->V  V->A  Avg"));
    let top = fs::read_to_string(dir.path().join("results_top14.csv")).unwrap();
    let test_clips = fs::read_to_string(data.join("test.csv")).unwrap().lines().count() - 1;
    assert_eq!(top.lines().count(), 1 + 2 * test_clips * 14);
    assert!(fs::read_to_string(&results).unwrap().contains("Avg,MAP,"));

    let prefix = dir.path().join("fig/freq");
    let glob = format!("{}/ckpt_epoch_*/graph.csv", p(&run));
    let o = ili(&["freq-heatmap", "--graphs", &glob, "--out", p(&prefix)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let svg = fs::read_to_string(dir.path().join("fig/freq.svg")).unwrap();
    assert_eq!(svg.matches("<rect class=\"cell\"").count(), 36);
    let csv = fs::read_to_string(dir.path().join("fig/freq.csv")).unwrap();
    for cell in csv.lines().skip(1).flat_map(|l| l.split(',').skip(1).map(str::to_owned).collect::<Vec<_>>()) {
        let v: f64 = cell.parse().unwrap();
        assert!([0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0].contains(&v), "{v}");
    }

    let graph_out = dir.path().join("g.csv");
    let o = ili(&[
        "infer-graph", "--ckpt", p(&run.join("final")), "--data", p(&data), "--out", p(&graph_out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(ili_core::graph::IliGraph::load_csv(&graph_out).is_ok());
}

#[test]
fn transition_flag_overrides_json() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_data(&data);
    let cfg = dir.path().join("train.json");
    fs::write(&cfg, r#"{"transition_epoch": 4, "checkpoint_epochs": [9]}"#).unwrap();
    let run = dir.path().join("run");
    let o = quick_train(&data, &run, &["--config", p(&cfg), "--transition-epoch", "7"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(run.join("ckpt_epoch_7").exists());
    assert!(!run.join("ckpt_epoch_4").exists());
}

#[test]
fn divergence_exits_3_with_dump() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_data(&data);
    let run = dir.path().join("run");
    let o = ili(&[
        "train", "--data", p(&data), "--out", p(&run), "--epochs", "12", "--transition-epoch", "6", "--hidden", "8",
        "--lr", "1e300",
    ]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("diverged"), "{err}");
    let dumps: Vec<_> = fs::read_dir(&run)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("diverged_epoch_"))
        .collect();
    assert_eq!(dumps.len(), 1);
    assert!(dumps[0].path().join("model").exists());
}

#[test]
fn eval_missing_checkpoint_is_input_error() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path());
    let o = ili(&[
        "eval", "--ckpt", p(&dir.path().join("nope")), "--data", p(dir.path()), "--out", p(&dir.path().join("r.csv")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

fn write_logits(path: &Path) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut s = String::from("class0_audio,class1_audio,class0_visual,class1_visual\n");
    for _ in 0..500 {
        let z: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
        let x0 = z[0];
        let x1 = 0.9 * x0 + 0.3 * z[1];
        s.push_str(&format!("{x0},{x1},{},{}\n", z[2], z[3]));
    }
    fs::write(path, s).unwrap();
}

#[test]
fn infer_graph_recovers_single_dependency() {
    let dir = tempfile::tempdir().unwrap();
    let logits = dir.path().join("logits.csv");
    write_logits(&logits);
    for lambda in ["0.01", "0"] {
        let out = dir.path().join(format!("g{lambda}.csv"));
        let o = ili(&["infer-graph", "--logits", p(&logits), "--out", p(&out), "--lambda-reg", lambda]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let g = ili_core::graph::IliGraph::load_csv(&out).unwrap();
        let edges = g.edge_set();
        assert_eq!(edges.len(), 1, "{edges:?}");
        assert!(edges == vec![(0, 1)] || edges == vec![(1, 0)]);
    }
}

#[test]
fn infer_graph_rejects_malformed_logits() {
    let dir = tempfile::tempdir().unwrap();
    let logits = dir.path().join("bad.csv");
    fs::write(&logits, "a,b\n1.0,x\n").unwrap();
    let o = ili(&["infer-graph", "--logits", p(&logits), "--out", p(&dir.path().join("g.csv"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn freq_heatmap_empty_glob_is_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let glob = format!("{}/none_*/graph.csv", p(dir.path()));
    let o = ili(&["freq-heatmap", "--graphs", &glob, "--out", p(&dir.path().join("f"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweep_has_baseline_and_one_row_per_m() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_data(&data);
    let out = dir.path().join("sweep.csv");
    let mut args = vec!["sweep-insertion", "--data", p(&data), "--m", "6,4", "--out", p(&out)];
    args.extend_from_slice(QUICK);
    let o = ili(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(&out).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[1].starts_with("baseline,,0,"));
    assert!(rows[2].starts_with("M=4,4,"));
    assert!(rows[3].starts_with("M=6,6,"));
}

#[test]
fn help_documents_config_defaults() {
    let t = TrainConfig::default();
    let help = stdout(&ili(&["train", "--help"]));
    for (flag, value) in [
        ("--epochs", t.epochs_total.to_string()),
        ("--transition-epoch", t.transition_epoch.to_string()),
        ("--batch-size", t.batch_size.to_string()),
        ("--lr", t.lr.to_string()),
        ("--gamma", t.gamma.to_string()),
        ("--margin", t.margin.to_string()),
        ("--tau", t.tau.to_string()),
        ("--hidden", t.hidden.to_string()),
        ("--dropout", t.dropout.to_string()),
        ("--lambda-reg", t.lambda_reg.to_string()),
        ("--min-freq", t.min_freq.to_string()),
        ("--seed", t.seed.to_string()),
        (
            "--checkpoint-epochs",
            t.checkpoint_epochs.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(","),
        ),
    ] {
        let section = help.split(&format!("{flag} <")).nth(1).unwrap_or_else(|| panic!("{flag} missing"));
        let text = section.split("\n  -").next().unwrap();
        assert!(text.contains(&format!("[default: {value}]")), "{flag}: {text}");
    }
    let s = SynthConfig::default();
    let help = stdout(&ili(&["gen-data", "--help"]));
    for (flag, value) in [
        ("--classes", s.classes.to_string()),
        ("--clips", s.clips.to_string()),
        ("--audio-dim", s.audio_dim.to_string()),
        ("--visual-dim", s.visual_dim.to_string()),
        ("--mix-strength", s.mix_strength.to_string()),
        ("--noise", s.noise.to_string()),
        ("--train-fraction", s.train_fraction.to_string()),
        ("--seed", s.seed.to_string()),
    ] {
        let section = help.split(&format!("{flag} <")).nth(1).unwrap_or_else(|| panic!("{flag} missing"));
        let text = section.split("\n  -").next().unwrap();
        assert!(text.contains(&format!("[default: {value}]")), "{flag}: {text}");
    }
    for sub in ["infer-graph", "eval", "freq-heatmap", "sweep-insertion"] {
        assert!(ili(&[sub, "--help"]).status.success());
    }
}
