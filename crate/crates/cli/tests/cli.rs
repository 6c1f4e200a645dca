//! End-to-end behaviour of the `plml` binary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_plml");

const SMALL: &str = r#"
seed = 3

[synth]
num_classes = 9
samples_per_class = 40
ambient_dim = 12
latent_dim = 6

[split]
n_labeled = 4
n_test = 5
base = 4
val = 2
novel = 3

[model]
widths = [12, 8]

[pretrain]
epochs = 20

[plml]
epochs = 2
episodes_per_epoch = 5
ways = 3
shots = 2
queries = 3
unlabeled = 1
head = "ep"

[eval]
episodes = 40
ways = 3
shots = 2
queries = 3
unlabeled = 2
n_labeled = [2, 4]

[selection]
n_labeled = 5
unlabeled = 2
repeats = 1
base = 4
val = 2
novel = 3
pretrain_epochs = 5
plml_epochs = 1
"#;

const CHAIN: [&str; 8] = ["synth", "split", "pretrain", "pseudolabel", "metatrain", "eval", "sweep", "compare-selection"];

fn desk_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml")
}

fn plml(args: &[&str], config: &Path, out: &Path, envs: &[(&str, &str)]) -> Output {
    Command::new(BIN)
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .arg("--quiet")
        .envs(envs.iter().copied())
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr));
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect()
}

fn small_config(dir: &Path) -> PathBuf {
    let p = dir.join("small.toml");
    std::fs::write(&p, SMALL).unwrap();
    p
}

#[test]
fn every_command_reruns_byte_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for c in CHAIN {
        ok(&plml(&[c], &cfg, &a, &[]));
    }
    let first = snapshot(&a);
    for c in CHAIN {
        assert!(first.contains_key(&format!("{c}.manifest.json")), "{c} wrote no manifest");
    }
    // rerun in place, and again elsewhere on a single worker thread
    for c in CHAIN {
        ok(&plml(&[c], &cfg, &a, &[]));
        ok(&plml(&[c], &cfg, &b, &[("FSL_THREADS", "1")]));
    }
    assert_eq!(snapshot(&a), first);
    assert_eq!(snapshot(&b), first);

    let sweep = std::fs::read_to_string(a.join("sweep.csv")).unwrap();
    // 2 N_l values × 2 variants × 3 modes
    assert_eq!(sweep.lines().count(), 1 + 12);
    let selection = std::fs::read_to_string(a.join("selection.csv")).unwrap();
    let rows: Vec<&str> = selection.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].contains("class_aware_oracle") && rows[0].contains(",true,"));
    assert!(rows[1].contains("practical") && rows[1].contains(",false,"));
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&plml(&["synth"], &cfg, &a, &[]));
    ok(&plml(&["synth", "--seed", "4"], &cfg, &b, &[]));
    assert_ne!(std::fs::read(a.join("dataset.bin")).unwrap(), std::fs::read(b.join("dataset.bin")).unwrap());
    let m = std::fs::read_to_string(b.join("synth.manifest.json")).unwrap();
    assert!(m.contains("\"seed\": 4"), "{m}");
}

#[test]
fn desk_chain_writes_one_row_per_mode() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("desk");
    for c in ["synth", "split", "pretrain", "pseudolabel", "metatrain", "eval"] {
        ok(&plml(&[c], &desk_config(), &out, &[]));
    }
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "nl,variant,head,mode,ways,shots,queries,unlabeled,acc,ci,episodes,taint,seed");
    let modes: Vec<&str> = lines[1..].iter().map(|l| l.split(',').nth(3).unwrap()).collect();
    assert_eq!(modes, ["inductive", "transductive", "semi"]);
    let pseudo = std::fs::read_to_string(out.join("pseudo.csv")).unwrap();
    assert!(pseudo.starts_with("# source="));
    assert_eq!(pseudo.lines().nth(1), Some("id,pseudo_label,confidence"));
}

#[test]
fn metatrain_without_pseudo_labels_names_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("o");
    for c in ["synth", "split", "pretrain"] {
        ok(&plml(&[c], &cfg, &out, &[]));
    }
    let o = plml(&["metatrain"], &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("pseudo-label file") && err.contains("pseudo.csv"), "{err}");
    assert!(!out.join("metatrain.ckpt").exists());
}

#[test]
fn configuration_errors_exit_one_naming_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let cases = [
        ("[plml]\ngama = 0.1\n", "gama"),
        ("[pretrain]\nmethod = \"magic\"\n", "pretrain.method"),
        ("[pretrain]\ntau = 0.0\n", "tau"),
        ("[model]\nwidths = [10, 4]\n", "model.widths"),
        ("[eval]\nmodes = [\"psychic\"]\n", "eval.modes"),
    ];
    for (text, key) in cases {
        let p = tmp.path().join("c.toml");
        std::fs::write(&p, text).unwrap();
        let o = plml(&["synth"], &p, &out, &[]);
        assert_eq!(o.status.code(), Some(1), "{text}");
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains(key), "{text}: {err}");
    }
    let missing = plml(&["synth"], &tmp.path().join("absent.toml"), &out, &[]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("absent.toml"));
    let no_config = Command::new(BIN).arg("synth").output().unwrap();
    assert_eq!(no_config.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&no_config.stderr).contains("--config"));
    let threads = plml(&["synth"], &small_config(tmp.path()), &out, &[("FSL_THREADS", "zero")]);
    assert_eq!(threads.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&threads.stderr).contains("FSL_THREADS"));
}

#[test]
fn diverging_training_exits_two_naming_the_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("c.toml");
    std::fs::write(&p, SMALL.replace("epochs = 20", "epochs = 20\nlr = 1e200")).unwrap();
    let out = tmp.path().join("o");
    for c in ["synth", "split"] {
        ok(&plml(&[c], &p, &out, &[]));
    }
    let o = plml(&["pretrain"], &p, &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("pretrain"));
}
