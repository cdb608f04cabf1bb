use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"{
  "data": {"shape": [16, 16, 4], "n_ssl_eyes": 3, "ssl_val_eyes": 1, "ssl_holdout_eyes": 0,
           "n_ttc_eyes": 8, "n_folds": 2},
  "net": {"input_shape": [16, 16, 4], "feature_channels": 4, "pathway_hidden": 8},
  "ssl": {"epochs": 1, "steps_per_epoch": 2, "val_pairs": 2},
  "ttc": {"epochs": 1, "steps_per_epoch": 2, "batch_size": 2},
  "seed": 5
}"#;

fn morphtrack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_morphtrack"))
        .args(args)
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .env_remove("MORPHTRACK_THREADS")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) {
    let out = morphtrack(args);
    assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn code(args: &[&str]) -> i32 {
    morphtrack(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, acc: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, acc);
            } else {
                acc.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut acc = BTreeMap::new();
    walk(root, root, &mut acc);
    acc
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
}

fn fixture() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let config = root.join("tiny.json");
    std::fs::write(&config, TINY).unwrap();
    let data = root.join("data");
    ok(&["gen-data", "--config", s(&config), "--out", s(&data)]);
    Fixture { _tmp: tmp, root, config, data }
}

#[test]
fn gen_data_is_byte_identical_and_counts_match() {
    let f = fixture();
    let again = f.root.join("again");
    ok(&["gen-data", "--config", s(&f.config), "--out", s(&again)]);
    let (a, b) = (tree(&f.data), tree(&again));
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (k, v) in &a {
        if k != Path::new("run_manifest.json") {
            assert_eq!(v, &b[k], "{}", k.display());
        }
    }
    let index: serde_json::Value = serde_json::from_slice(&a[Path::new("index.json")]).unwrap();
    let eyes = index["eyes"].as_array().unwrap();
    assert_eq!(eyes.iter().filter(|e| e["role"] == "ssl").count(), 3);
    assert_eq!(eyes.iter().filter(|e| e["role"] == "ttc").count(), 8);
    assert_eq!(index["folds"].as_array().unwrap().len(), 2);
    assert_eq!(index["ssl_split"]["val"].as_array().unwrap().len(), 1);
}

#[test]
fn exit_codes_follow_the_contract() {
    let f = fixture();
    let bad = f.root.join("bad.json");
    std::fs::write(&bad, "{\n  \"seed\": 1,\n  oops\n}").unwrap();
    let out = morphtrack(&["gen-data", "--config", s(&bad), "--out", s(&f.root.join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("line 3"), "{msg}");

    let unknown = f.root.join("unknown.json");
    std::fs::write(&unknown, r#"{"nett": {}}"#).unwrap();
    assert_eq!(code(&["gen-data", "--config", s(&unknown), "--out", s(&f.root.join("x"))]), 2);
    assert_eq!(code(&["train", "--stage", "ssl", "--data", s(&f.data)]), 2);

    let missing = f.root.join("nowhere");
    assert_eq!(code(&["train", "--stage", "ssl", "--data", s(&missing), "--out", s(&f.root.join("o"))]), 3);
    assert_eq!(code(&["eval", "--ckpt", s(&f.root), "--data", s(&missing), "--out", s(&f.root.join("o"))]), 3);

    let args = ["train", "--stage", "ttc", "--mode", "freeze", "--config", s(&f.config)];
    assert_eq!(code(&[&args[..], &["--data", s(&f.data), "--out", s(&f.root.join("t"))]].concat()), 4);
    let not_ck = f.root.join("empty");
    std::fs::create_dir_all(&not_ck).unwrap();
    assert_eq!(code(&["eval", "--ckpt", s(&not_ck), "--data", s(&f.data), "--out", s(&f.root.join("o"))]), 4);

    let out = Command::new(env!("CARGO_BIN_EXE_morphtrack"))
        .args(["gen-data", "--config", s(&f.config), "--out", s(&f.root.join("z"))])
        .env("MORPHTRACK_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_eval_interpolate_pipeline() {
    let f = fixture();
    let cfg = s(&f.config);
    let ssl = f.root.join("ssl");
    ok(&["train", "--stage", "ssl", "--config", cfg, "--data", s(&f.data), "--out", s(&ssl)]);
    for name in ["best/manifest.json", "best/params.bin", "last/params.bin", "loss.csv", "val.csv", "run_manifest.json"] {
        assert!(ssl.join(name).exists(), "{name}");
    }
    let header = std::fs::read_to_string(ssl.join("loss.csv")).unwrap();
    assert!(header.starts_with("step,lr,L_mse,L_prc,L_smt,L_fld,L_add,total\n"));

    let freeze = f.root.join("freeze");
    let best = ssl.join("best");
    ok(&["train", "--stage", "ttc", "--mode", "freeze", "--config", cfg, "--data", s(&f.data), "--out", s(&freeze), "--init", s(&best)]);
    assert_eq!(
        code(&["train", "--stage", "ttc", "--mode", "finetune", "--config", cfg, "--data", s(&f.data), "--out", s(&f.root.join("ft")), "--init", s(&best)]),
        4
    );
    assert_eq!(code(&["eval", "--ckpt", s(&best), "--data", s(&f.data), "--out", s(&f.root.join("e"))]), 4);

    let eval = f.root.join("eval");
    ok(&["eval", "--ckpt", s(&freeze.join("best")), "--data", s(&f.data), "--out", s(&eval)]);
    let metrics = std::fs::read_to_string(eval.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("fold,t_months,auc,bal_acc,threshold\n"));
    assert_eq!(metrics.lines().count(), 5);
    let preds = std::fs::read_to_string(eval.join("predictions.csv")).unwrap();
    assert!(preds.starts_with("scan_id,a,b,p@0,p@6,p@12,p@18,r,risk_group\n"));
    assert!(std::fs::read_to_string(eval.join("km.csv")).unwrap().starts_with("time,survival,group\n"));

    let interp = f.root.join("interp");
    let base = ["interpolate", "--ckpt", s(&best), "--data", s(&f.data), "--eye", "ssl000"];
    ok(&[&base[..], &["--visit-a", "0", "--visit-b", "1", "--steps", "4", "--out", s(&interp)]].concat());
    for tag in ["000", "025", "050", "075", "100"] {
        assert!(interp.join(format!("slice_r{tag}.pgm")).exists(), "{tag}");
    }
    let pgm = std::fs::read(interp.join("slice_r000.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n16 16\n255\n"));
    assert_eq!(pgm.len(), b"P5\n16 16\n255\n".len() + 256);
    assert_eq!(pgm, std::fs::read(interp.join("input_a.pgm")).unwrap());

    let one = f.root.join("one");
    ok(&[&base[..], &["--visit-a", "0", "--visit-b", "1", "--steps", "1", "--out", s(&one), "--dump-raw"]].concat());
    let names: Vec<_> = tree(&one).into_keys().collect();
    assert!(names.contains(&PathBuf::from("slice_r000.pgm")) && names.contains(&PathBuf::from("slice_r100.pgm")));
    assert!(names.contains(&PathBuf::from("volume_r100.vol")));
    assert_eq!(tree(&one)[Path::new("slice_r000.pgm")], pgm);

    assert_eq!(code(&[&base[..], &["--visit-a", "1", "--visit-b", "1", "--steps", "2", "--out", s(&one)]].concat()), 5);
    assert_eq!(code(&[&base[..], &["--visit-a", "0", "--visit-b", "99", "--steps", "2", "--out", s(&one)]].concat()), 5);
    assert_eq!(code(&[&base[..], &["--visit-a", "0", "--visit-b", "1", "--steps", "0", "--out", s(&one)]].concat()), 2);

    let rerun = f.root.join("ssl_rerun");
    ok(&["train", "--stage", "ssl", "--config", cfg, "--data", s(&f.data), "--out", s(&rerun)]);
    let (a, b) = (tree(&ssl), tree(&rerun));
    for (k, v) in &a {
        if k != Path::new("run_manifest.json") {
            assert_eq!(v, &b[k], "{}", k.display());
        }
    }
}

#[test]
fn oracle_checkpoint_evaluates_to_perfect_auc() {
    let f = fixture();
    let oracle = f.root.join("oracle");
    let cfg: morphtrack::config::RunConfig = morphtrack::config::RunConfig::from_json(TINY).unwrap();
    morphtrack::trainer::write_oracle_checkpoint(&oracle, &cfg, 1).unwrap();
    let out = f.root.join("eval");
    ok(&["eval", "--ckpt", s(&oracle), "--data", s(&f.data), "--out", s(&out)]);
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut defined = 0;
    for line in metrics.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[0], "1");
        if cols[2] != "null" {
            assert_eq!(cols[2].parse::<f64>().unwrap(), 1.0, "{line}");
            defined += 1;
        }
    }
    assert!(defined > 0);
}
