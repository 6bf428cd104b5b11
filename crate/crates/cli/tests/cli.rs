use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "seed = 9\n[data]\nper_class = 20\n[backbone]\nhidden = 16\nepochs = 6\n";

fn epcache(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_epcache"))
        .args(args)
        .arg("--config")
        .arg(dir.join("tiny.toml"))
        .arg("--out")
        .arg(dir.join("out"))
        .env_remove("EPCACHE_OUT")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = epcache(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Exit code and the single stderr line of a failing run.
fn fails(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = epcache(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "), "{err}");
    (out.status.code().unwrap(), err)
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn pipeline(dir: &Path) {
    ok(dir, &["gen-data"]);
    for v in ["standard", "augmented", "reference", "surrogate"] {
        ok(dir, &["train-backbone", "--variant", v]);
    }
    for v in ["standard", "augmented"] {
        for layer in ["hidden", "probs"] {
            ok(dir, &["extract", "--variant", v, "--layer", layer]);
            ok(dir, &["build-cache", "--variant", v, "--layer", layer]);
            ok(dir, &["tune-theta", "--variant", v, "--layer", layer]);
        }
        ok(
            dir,
            &[
                "eval-adv",
                "--threat",
                "gray",
                "--variant",
                v,
                "--eps",
                "0.02,0.06",
            ],
        );
        ok(dir, &["eval-corrupt", "--variant", v, "--layer", "probs"]);
    }
    ok(dir, &["compress", "--method", "kmeans", "--budget", "20"]);
    ok(dir, &["compress", "--method", "pca"]);
    ok(dir, &["eval-clean", "--compression", "kmeans"]);
    ok(dir, &["eval-adv", "--threat", "black", "--eps", "0.06"]);
    ok(dir, &["report", "--quadrants", "--sweep"]);
}

#[test]
fn full_pipeline_is_bitwise_reproducible() {
    let a = workspace();
    let b = workspace();
    pipeline(a.path());
    pipeline(b.path());
    let (sa, sb) = (
        snapshot(&a.path().join("out")),
        snapshot(&b.path().join("out")),
    );
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (name, bytes) in &sa {
        // Provenance echoes the output directory, which differs here.
        if !name.starts_with("provenance") {
            assert_eq!(bytes, &sb[name], "{name}");
        }
    }

    let quadrants = String::from_utf8(sa["reports/quadrants.csv"].clone()).unwrap();
    let lines: Vec<&str> = quadrants.lines().collect();
    assert_eq!(lines[0], "robust_features,cache,gray_top1_eps0.06,mce");
    assert_eq!(lines.len(), 5);
    assert!(sa.contains_key("caches/standard-hidden-kmeans.epch"));
    assert!(sa.contains_key("caches/standard-hidden-pca.epch"));
}

#[test]
fn rerunning_a_subcommand_rewrites_identical_bytes() {
    let dir = workspace();
    ok(dir.path(), &["gen-data"]);
    ok(dir.path(), &["train-backbone"]);
    ok(dir.path(), &["extract"]);
    ok(dir.path(), &["build-cache"]);
    ok(dir.path(), &["tune-theta", "--objective", "gray"]);
    let first = snapshot(&dir.path().join("out"));
    ok(dir.path(), &["train-backbone"]);
    ok(dir.path(), &["tune-theta", "--objective", "gray"]);
    assert_eq!(first, snapshot(&dir.path().join("out")));
}

#[test]
fn provenance_records_digests_and_config() {
    let dir = workspace();
    ok(dir.path(), &["gen-data"]);
    ok(dir.path(), &["train-backbone", "--seed", "21"]);
    let text = std::fs::read_to_string(
        dir.path()
            .join("out/provenance/train-backbone-standard.json"),
    )
    .unwrap();
    let record: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(record["tool"], "epcache-cli");
    assert_eq!(record["config"]["seed"], 21);
    assert_eq!(record["config"]["backbone"]["hidden"], 16);
    let inputs = record["inputs"].as_array().unwrap();
    assert!(inputs.iter().any(|i| i["path"] == "data/train.epds"));
    let output = &record["outputs"][0];
    assert_eq!(output["path"], "backbones/standard.epbb");
    let bytes = std::fs::read(dir.path().join("out/backbones/standard.epbb")).unwrap();
    let model = epcache::Backbone::from_bytes(&bytes).unwrap();
    assert_eq!(output["sha256"], model.digest());
}

#[test]
fn missing_artifacts_name_their_producer() {
    let dir = workspace();
    let (code, err) = fails(dir.path(), &["train-backbone"]);
    assert_eq!(code, 4);
    assert!(
        err.contains("missing_artifact") && err.contains("`epcache gen-data`"),
        "{err}"
    );

    ok(dir.path(), &["gen-data"]);
    ok(dir.path(), &["train-backbone"]);
    let (_, err) = fails(dir.path(), &["eval-adv", "--threat", "gray"]);
    assert!(
        err.contains("`epcache build-cache --variant standard --layer hidden`"),
        "{err}"
    );

    ok(dir.path(), &["extract"]);
    ok(dir.path(), &["build-cache"]);
    let (_, err) = fails(dir.path(), &["eval-adv", "--threat", "black"]);
    assert!(
        err.contains("`epcache train-backbone --variant surrogate`"),
        "{err}"
    );
    let (_, err) = fails(dir.path(), &["eval-corrupt"]);
    assert!(
        err.contains("`epcache train-backbone --variant reference`"),
        "{err}"
    );
    let (_, err) = fails(dir.path(), &["report", "--quadrants"]);
    assert!(err.contains("eval-adv --threat gray"), "{err}");
}

#[test]
fn errors_are_single_lines_with_distinct_codes() {
    let dir = workspace();
    std::fs::write(dir.path().join("tiny.toml"), "[data]\nper_class = 12\n").unwrap();
    let (code, err) = fails(dir.path(), &["gen-data"]);
    assert_eq!(code, 3);
    assert!(err.contains("seed"), "{err}");

    std::fs::write(
        dir.path().join("tiny.toml"),
        "seed = 1\n[cache]\nthetta = 2\n",
    )
    .unwrap();
    let (code, _) = fails(dir.path(), &["gen-data"]);
    assert_eq!(code, 3);

    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let (code, err) = fails(dir.path(), &["eval-adv", "--threat", "purple"]);
    assert_eq!(code, 2);
    assert!(err.starts_with("error: usage:"), "{err}");
    let (code, _) = fails(dir.path(), &["report"]);
    assert_eq!(code, 2);
    let (code, _) = fails(dir.path(), &["gen-data", "--threads", "0"]);
    assert_eq!(code, 2);
}

#[test]
fn output_directory_falls_back_to_the_environment() {
    let dir = workspace();
    let out = Command::new(env!("CARGO_BIN_EXE_epcache"))
        .args(["gen-data", "--seed", "1", "--threads", "1"])
        .env("EPCACHE_OUT", dir.path().join("from-env"))
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.path().join("from-env/data/train.epds").exists());
}

#[test]
fn shipped_recipes_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../recipes");
    for name in ["benchmark.toml", "smoke.toml"] {
        let text = std::fs::read_to_string(root.join(name)).unwrap();
        let value: toml::Value = toml::from_str(&text).unwrap();
        assert!(value.get("seed").is_some(), "{name}");
    }
}
