use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_raceimpute");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).args(args).current_dir(dir).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Small synthetic dataset, a split and a trained geo model, shared by tests
/// that only read from it.
fn fixture() -> &'static Path {
    static DIR: OnceLock<TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let d = tempfile::tempdir().unwrap();
        let p = d.path();
        for args in [
            &["synth", "--records", "800", "--tracts", "20", "--seed", "3", "--out", "data"][..],
            &["split", "--input", "data/people.csv", "--seed", "3", "--out", "split"],
            &["train", "--model", "lstm-geo", "--geo-mode", "head", "--data", "data", "--split", "split", "--preset", "micro", "--max-epochs", "1", "--out", "models/geo.json"],
            &["train", "--model", "lstm", "--data", "data", "--split", "split", "--preset", "micro", "--max-epochs", "1", "--out", "models/lstm.json"],
        ] {
            let out = run(p, args);
            assert_eq!(code(&out), 0, "{args:?}: {}", stderr(&out));
        }
        d
    })
    .path()
}

fn scratch() -> TempDir {
    let d = tempfile::tempdir().unwrap();
    for sub in ["data", "split", "models"] {
        let from = fixture().join(sub);
        fs::create_dir_all(d.path().join(sub)).unwrap();
        for e in fs::read_dir(&from).unwrap() {
            let e = e.unwrap();
            fs::copy(e.path(), d.path().join(sub).join(e.file_name())).unwrap();
        }
    }
    d
}

#[test]
fn help_exits_zero_and_unknown_flags_exit_two() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(d.path(), &["--help"])), 0);
    assert_eq!(code(&run(d.path(), &["synth", "--bogus"])), 2);
    assert_eq!(code(&run(d.path(), &[])), 2);
}

#[test]
fn synth_writes_every_table_and_a_manifest() {
    let files: Vec<String> = fs::read_dir(fixture().join("data"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    for f in ["people.csv", "tracts.csv", "surnames.csv", "firstnames.csv", "marginal.csv", "bayes_optimal.csv", "synth_config.json", "manifest.json"] {
        assert!(files.iter().any(|x| x == f), "missing {f}");
    }
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(fixture().join("data/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "synth");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["outputs"].as_array().unwrap().len(), 7);
}

#[test]
fn synth_config_errors_exit_two() {
    let d = tempfile::tempdir().unwrap();
    let out = run(d.path(), &["synth", "--config", "missing.toml", "--out", "x"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("missing.toml"), "{}", stderr(&out));

    fs::write(d.path().join("bad.toml"), "recods = 10\n").unwrap();
    let out = run(d.path(), &["synth", "--config", "bad.toml", "--out", "x"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("recods"), "{}", stderr(&out));

    assert_eq!(code(&run(d.path(), &["synth", "--records", "0", "--out", "x"])), 2);
    assert!(!d.path().join("x").exists());
}

#[test]
fn synth_config_file_is_applied() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("c.toml"), "records = 50\ntracts = 5\nmode = \"independent\"\n").unwrap();
    let out = run(d.path(), &["synth", "--config", "c.toml", "--out", "x"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let people = fs::read_to_string(d.path().join("x/people.csv")).unwrap();
    assert_eq!(people.lines().count(), 51);
    assert_eq!(fs::read_to_string(d.path().join("x/tracts.csv")).unwrap().lines().count(), 6);
}

#[test]
fn split_partitions_the_input() {
    let count = |p: &str| fs::read_to_string(fixture().join(p)).unwrap().lines().count() - 1;
    assert_eq!(count("split/train.csv") + count("split/validation.csv") + count("split/holdout.csv"), 800);
}

#[test]
fn unknown_race_code_exits_two_with_the_row() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("p.csv"), "row_id,first,middle,last,tract_geoid,race\na,X,,Y,,white\nb,X,,Y,,martian\n").unwrap();
    let out = run(d.path(), &["split", "--input", "p.csv", "--out", "s"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("row 2"), "{}", stderr(&out));
}

#[test]
fn race_map_file_translates_codes() {
    let d = tempfile::tempdir().unwrap();
    let mut people = String::from("row_id,first,middle,last,tract_geoid,race\n");
    for i in 0..40 {
        people.push_str(&format!("r{i},Ann,,Lee,,{}\n", ["W", "B", "H", "A"][i % 4]));
    }
    people.push_str("r40,Ann,,Lee,,O\n");
    fs::write(d.path().join("p.csv"), people).unwrap();
    fs::write(d.path().join("map.toml"), "declared = []\n[codes]\nW = \"white\"\nB = \"black\"\nH = \"hispanic\"\nA = \"asian\"\nO = \"other\"\n").unwrap();
    let out = run(d.path(), &["split", "--input", "p.csv", "--race-map", "map.toml", "--out", "s"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let train = fs::read_to_string(d.path().join("s/train.csv")).unwrap();
    assert!(train.contains(",asian\n"));
    // One "other" row cannot reach every partition, so the split warns.
    let manifest = fs::read_to_string(d.path().join("s/manifest.json")).unwrap();
    assert!(manifest.contains("class other"), "{manifest}");
}

#[test]
fn training_writes_log_and_manifest() {
    let log = fs::read_to_string(fixture().join("models/geo.log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("epoch,train_loss,validation_loss"));
    assert_eq!(log.lines().count(), 2);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(fixture().join("models/geo.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "train");
    assert!(m["wall_seconds"].as_f64().unwrap() >= 0.0);
}

#[test]
fn zero_epochs_warns_and_still_writes_a_model() {
    let d = scratch();
    let out = run(d.path(), &["train", "--model", "lstm", "--data", "data", "--split", "split", "--preset", "micro", "--max-epochs", "0", "--out", "models/zero.json"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stderr(&out).contains("max_epochs is 0"));
    assert!(d.path().join("models/zero.json").exists());
    let manifest = fs::read_to_string(d.path().join("models/zero.manifest.json")).unwrap();
    assert!(manifest.contains("max_epochs is 0"));
}

#[test]
fn divergent_training_exits_three_and_names_the_log() {
    let d = scratch();
    fs::write(d.path().join("lr.toml"), "learning_rate = 1e300\n").unwrap();
    let out = run(d.path(), &["train", "--model", "lstm", "--data", "data", "--split", "split", "--preset", "micro", "--config", "lr.toml", "--max-epochs", "3", "--out", "models/nan.json"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("nan.log.csv"), "{}", stderr(&out));
    assert!(!d.path().join("models/nan.json").exists());
}

#[test]
fn filter_needs_a_geo_base_model() {
    let d = scratch();
    let out = run(d.path(), &["train", "--model", "xgb-filter", "--data", "data", "--split", "split", "--out", "models/f.json"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--base-model"));
    let out = run(d.path(), &["train", "--model", "xgb-filter", "--data", "data", "--split", "split", "--base-model", "models/lstm.json", "--out", "models/f.json"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn filter_rejects_a_different_base_model_at_impute_time() {
    let d = scratch();
    let out = run(d.path(), &["train", "--model", "xgb-filter", "--data", "data", "--split", "split", "--base-model", "models/geo.json", "--out", "models/f.json"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let grid = fs::read_to_string(d.path().join("models/f.grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 9);
    assert_eq!(grid.matches(",true").count(), 1);

    let out = run(d.path(), &["train", "--model", "lstm-geo", "--geo-mode", "head", "--data", "data", "--split", "split", "--preset", "micro", "--max-epochs", "1", "--seed", "9", "--out", "models/geo2.json"]);
    assert_eq!(code(&out), 0);
    let base = ["impute", "--model", "lstm-geo-xgb", "--input", "split/holdout.csv", "--data", "data", "--filter-file", "models/f.json", "--out", "p.csv", "--model-file"];
    assert_eq!(code(&run(d.path(), &[&base[..], &["models/geo.json"]].concat())), 0);
    let out = run(d.path(), &[&base[..], &["models/geo2.json"]].concat());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("different base model"), "{}", stderr(&out));
}

#[test]
fn impute_checks_model_kind_and_inputs() {
    let d = scratch();
    let p = d.path();
    let out = run(p, &["impute", "--model", "lstm", "--input", "split/holdout.csv", "--model-file", "models/geo.json", "--out", "x.csv"]);
    assert_eq!(code(&out), 2);
    let out = run(p, &["impute", "--model", "lstm-geo", "--input", "split/holdout.csv", "--data", "data", "--model-file", "models/lstm.json", "--out", "x.csv"]);
    assert_eq!(code(&out), 2);
    let out = run(p, &["impute", "--model", "bisg", "--input", "split/holdout.csv", "--out", "x.csv"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--tracts"), "{}", stderr(&out));
    let out = run(p, &["impute", "--model", "lstm-geo", "--input", "split/holdout.csv", "--model-file", "models/geo.json", "--out", "x.csv"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn tampered_model_files_are_rejected() {
    let d = scratch();
    let path = d.path().join("models/lstm.json");
    let text = fs::read_to_string(&path).unwrap();
    let i = text.find("\"values\"").unwrap() + 12;
    let mut bytes = text.into_bytes();
    bytes[i] = if bytes[i] == b'1' { b'2' } else { b'1' };
    fs::write(&path, bytes).unwrap();
    let out = run(d.path(), &["impute", "--model", "lstm", "--input", "split/holdout.csv", "--model-file", "models/lstm.json", "--out", "x.csv"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn empty_input_gives_a_header_only_file() {
    let d = scratch();
    fs::write(d.path().join("empty.csv"), "row_id,first,middle,last,tract_geoid,race\n").unwrap();
    for model in ["bisg", "bifsg"] {
        let out = run(d.path(), &["impute", "--model", model, "--input", "empty.csv", "--data", "data", "--out", "e.csv"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let text = fs::read_to_string(d.path().join("e.csv")).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("row_id,p_white"));
    }
}

#[test]
fn missing_tract_rows_are_flagged() {
    let d = scratch();
    fs::write(d.path().join("p.csv"), "row_id,first,middle,last,tract_geoid,race\na,Ann,,Lee,,white\nb,Ann,,Lee,99999999999,\n").unwrap();
    let out = run(d.path(), &["impute", "--model", "bisg", "--input", "p.csv", "--data", "data", "--out", "o.csv"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = fs::read_to_string(d.path().join("o.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert!(rows.iter().all(|r| r.ends_with(",true,false")), "{text}");
}

#[test]
fn evaluate_requires_every_prediction_to_join() {
    let d = scratch();
    let p = d.path();
    let out = run(p, &["impute", "--model", "bisg", "--input", "data/people.csv", "--data", "data", "--out", "all.csv"]);
    assert_eq!(code(&out), 0);
    let out = run(p, &["evaluate", "--predictions", "all.csv", "--labels", "split/holdout.csv", "--tracts", "data/tracts.csv", "--out", "r"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("not in labels"), "{}", stderr(&out));
    assert!(!p.join("r/report.json").exists());

    let out = run(p, &["evaluate", "--predictions", "bisg=all.csv", "--labels", "data/people.csv", "--tracts", "data/tracts.csv", "--bin-edges", "40000,80000", "--out", "r"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("r/report.json")).unwrap()).unwrap();
    assert_eq!(report["models"][0]["name"], "bisg");
    assert_eq!(report["bin_edges"], serde_json::json!([40000.0, 80000.0]));
    let comparison = fs::read_to_string(p.join("r/comparison.csv")).unwrap();
    assert!(comparison.starts_with("model,accuracy,f1,precision,recall,fpr_macro,fpr_weighted\nbisg,"));

    let out = run(p, &["evaluate", "--predictions", "a=all.csv", "--predictions", "a=all.csv", "--labels", "data/people.csv", "--tracts", "data/tracts.csv", "--out", "r2"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn oracle_predictions_evaluate_like_any_model() {
    let d = scratch();
    let out = run(d.path(), &["evaluate", "--predictions", "data/bayes_optimal.csv", "--labels", "data/people.csv", "--tracts", "data/tracts.csv", "--out", "r"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(d.path().join("r/confusion_bayes_optimal.csv").exists());
}

#[test]
fn gradcheck_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let out = run(d.path(), &["gradcheck", "--geo-mode", "prefix-tokens"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = run(d.path(), &["gradcheck", "--geo-mode", "head", "--corrupt-tensor", "layer0.forward.w_hh"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("layer0.forward.w_hh"), "{}", stderr(&out));
    assert_eq!(code(&run(d.path(), &["gradcheck", "--epsilon", "0"])), 2);
    assert_eq!(code(&run(d.path(), &["gradcheck", "--epsilon", "-1e-4"])), 2);
}

#[test]
fn geocode_offline_marks_rows_unmatched() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("a.csv"), "id,street\n1,4600 Silver Hill Rd\n2,\n").unwrap();
    let out = run(d.path(), &["geocode", "--offline", "--input", "a.csv", "--address-column", "street", "--out", "g.csv"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = fs::read_to_string(d.path().join("g.csv")).unwrap();
    assert_eq!(text, "id,street,tract_geoid,geocode_matched,geocode_error\n1,4600 Silver Hill Rd,,false,\n2,,,false,empty address\n");
    let out = run(d.path(), &["geocode", "--offline", "--input", "a.csv", "--out", "g.csv"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn geocode_offline_env_var_is_honored() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("a.csv"), "address\n1 Main St\n").unwrap();
    let out = Command::new(BIN)
        .args(["geocode", "--input", "a.csv", "--endpoint", "http://127.0.0.1:9/none", "--out", "g.csv"])
        .env("RACEIMPUTE_GEOCODE_OFFLINE", "1")
        .current_dir(d.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stderr(&out).contains("offline-table 1"), "{}", stderr(&out));
}

#[test]
fn reruns_are_byte_identical() {
    let d = tempfile::tempdir().unwrap();
    let args = ["synth", "--records", "300", "--tracts", "10", "--seed", "11", "--out"];
    for out in ["a", "b"] {
        assert_eq!(code(&run(d.path(), &[&args[..], &[out]].concat())), 0);
    }
    for f in ["people.csv", "tracts.csv", "surnames.csv", "firstnames.csv", "marginal.csv", "bayes_optimal.csv", "synth_config.json"] {
        assert_eq!(fs::read(d.path().join("a").join(f)).unwrap(), fs::read(d.path().join("b").join(f)).unwrap(), "{f}");
    }
    let other = run(d.path(), &["synth", "--records", "300", "--tracts", "10", "--seed", "12", "--out", "c"]);
    assert_eq!(code(&other), 0);
    assert_ne!(fs::read(d.path().join("a/people.csv")).unwrap(), fs::read(d.path().join("c/people.csv")).unwrap());
}
