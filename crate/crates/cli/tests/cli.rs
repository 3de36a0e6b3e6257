use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn fednl(args: &[&str], root: Option<&Path>) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fednl"));
    c.args(args);
    match root {
        Some(r) => c.env("FEDNL_OUTPUT_ROOT", r),
        None => c.env_remove("FEDNL_OUTPUT_ROOT"),
    };
    c.output().unwrap()
}

fn smoke() -> Value {
    let text = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json")).unwrap();
    let mut v: Value = serde_json::from_str(&text).unwrap();
    v["data"]["train_per_client"] = json!(6);
    v["data"]["eval_per_client"] = json!(6);
    v
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_field_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = smoke();
    v["federation"].as_object_mut().unwrap().remove("rounds");
    let cfg = write_config(dir.path(), "bad.json", &v);
    let o = fednl(&["run", cfg.to_str().unwrap()], Some(dir.path()));
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("rounds"), "{}", stderr(&o));

    let mut v = smoke();
    v["federation"]["lr"] = json!(-1.0);
    let cfg = write_config(dir.path(), "neg.json", &v);
    let o = fednl(&["run", cfg.to_str().unwrap()], Some(dir.path()));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("federation.lr"), "{}", stderr(&o));
}

fn digest_files(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for arm in ["fednl", "fedavg_static"] {
        for f in ["metrics.csv", "metrics.jsonl", "rounds.jsonl", "drop.csv", "footprint.csv", "run.json"] {
            out.push((format!("{arm}/{f}"), fs::read(root.join(arm).join(f)).unwrap()));
        }
        for r in 0..2 {
            let f = format!("{arm}/checkpoints/round_{r:03}.fnlc");
            out.push((f.clone(), fs::read(root.join(&f)).unwrap()));
        }
    }
    out.push(("manifest.json".into(), fs::read(root.join("manifest.json")).unwrap()));
    out
}

fn same(a: &Path, b: &Path) {
    for ((name, x), (_, y)) in digest_files(a).into_iter().zip(digest_files(b)) {
        assert!(x == y, "{name} differs");
    }
}

#[test]
fn same_config_twice_gives_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "smoke.json", &smoke());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for r in [&a, &b] {
        let o = fednl(&["run", cfg.to_str().unwrap()], Some(r));
        assert!(o.status.success(), "{}", stderr(&o));
    }
    same(&a, &b);
    assert!(a.join("timing.json").exists());
    assert!(!a.join("fednl/FAILED").exists());

    // deleting the outputs and re-running reproduces them
    fs::remove_dir_all(&a).unwrap();
    let o = fednl(&["run", cfg.to_str().unwrap(), "--concurrent-arms"], Some(&a));
    assert!(o.status.success());
    same(&a, &b);

    // paired comparison with the documented column contract
    let out = dir.path().join("tables");
    let o = fednl(&["compare", a.to_str().unwrap(), "--out", out.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", stderr(&o));
    let acc = fs::read_to_string(out.join("accuracy.csv")).unwrap();
    assert!(acc.starts_with("client_id,fednl,fedavg_static\n"), "{acc}");
    assert_eq!(acc.lines().count(), 4);
    let depth = fs::read_to_string(out.join("depth.csv")).unwrap();
    assert!(depth.starts_with("depth,fednl,fedavg_static\n"));
    for line in depth.lines().skip(1).chain(acc.lines().skip(1)) {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells.len(), 3, "{line}");
        assert!(cells[1..].iter().all(|c| c.parse::<f64>().is_ok_and(|x| (0.0..=1.0).contains(&x))));
    }
    let comm = fs::read_to_string(out.join("communication.csv")).unwrap();
    assert!(comm.starts_with("arm,scope,round,upload_bytes_per_client,round_bytes,cumulative_bytes\n"));
    assert_eq!(comm.lines().count(), 5);
    assert_eq!(
        fs::read_to_string(out.join("streaming_ce.csv")).unwrap(),
        "arm,client_id,bin,normalized_ce\n"
    );

    // a single arm gives a single column
    let o = fednl(&["compare", a.join("fednl").to_str().unwrap(), "--out", out.to_str().unwrap()], None);
    assert!(o.status.success());
    assert!(fs::read_to_string(out.join("accuracy.csv")).unwrap().starts_with("client_id,fednl\n"));
}

#[test]
fn compare_refuses_mismatched_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = smoke();
    v["arms"] = json!(["fednl"]);
    v["federation"]["rounds"] = json!(1);
    let a = write_config(dir.path(), "a.json", &v);
    v["arms"] = json!(["fedavg_static"]);
    v["seed"] = json!(8);
    let b = write_config(dir.path(), "b.json", &v);
    let (ra, rb) = (dir.path().join("ra"), dir.path().join("rb"));
    assert!(fednl(&["run", a.to_str().unwrap()], Some(&ra)).status.success());
    assert!(fednl(&["run", b.to_str().unwrap()], Some(&rb)).status.success());
    let o = fednl(&["compare", ra.to_str().unwrap(), rb.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("seed: 7 != 8"), "{}", stderr(&o));
}

#[test]
fn gen_data_and_grad_check() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "smoke.json", &smoke());
    let o = fednl(&["gen-data", cfg.to_str().unwrap()], Some(dir.path()));
    assert!(o.status.success(), "{}", stderr(&o));
    let train = fs::read_to_string(dir.path().join("data/client_0_train.jsonl")).unwrap();
    assert_eq!(train.lines().count(), 6);
    assert!(dir.path().join("data/client_2_eval.jsonl").exists());

    let o = fednl(&["grad-check", cfg.to_str().unwrap(), "--tokens", "12"], None);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = String::from_utf8(o.stdout).unwrap();
    let err: f64 = line.split("max_rel_error=").nth(1).unwrap().split(' ').next().unwrap().parse().unwrap();
    assert!(err <= 1e-4, "{line}");
}
