use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn crl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crl")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["gen", "--out", p(dir)];
    args.extend_from_slice(extra);
    crl(&args)
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_writes_one_file_pair_per_environment_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let args = ["--graph", "chain3", "--envs", "14", "--samples", "50", "--seed", "1"];
    assert_eq!(code(&gen(&a, &args)), 0);
    assert_eq!(code(&gen(&b, &args)), 0);
    let xs = fs::read_dir(&a)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with("_X.csv"))
        .count();
    assert_eq!(xs, 14);
    assert!(a.join("config.resolved.json").exists());
    assert_eq!(read_dir_bytes(&a), read_dir_bytes(&b));
}

#[test]
fn usage_and_io_errors_have_distinct_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&gen(tmp.path(), &["--envs", "0"])), 2);
    assert_eq!(code(&gen(tmp.path(), &["--graph", "no-such-graph"])), 2);
    assert_eq!(code(&crl(&["gen"])), 2);
    let missing = tmp.path().join("missing");
    let out = tmp.path().join("r");
    assert_eq!(code(&crl(&["train", "--data", p(&missing), "--out", p(&out)])), 3);
}

#[test]
fn checks_report_results_and_reject_nonsmooth_exact_mode() {
    let tmp = tempfile::tempdir().unwrap();
    let tanh = tmp.path().join("tanh");
    assert_eq!(code(&gen(&tanh, &["--envs", "3", "--samples", "10"])), 0);
    let lemmas = tmp.path().join("lemmas.json");
    let o = crl(&["check", "lemmas", "--spec", p(&tanh), "--points", "5", "--out", p(&lemmas)]);
    assert_eq!(code(&o), 0);
    let text = fs::read_to_string(&lemmas).unwrap();
    assert!(text.contains("\"pass\": true"), "{text}");

    let leaky = tmp.path().join("leaky");
    assert_eq!(code(&gen(&leaky, &["--activation", "leaky-relu", "--envs", "2", "--samples", "10"])), 0);
    let o = crl(&["check", "lemmas", "--spec", p(&leaky), "--out", p(&lemmas)]);
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--activation tanh"));

    let single = tmp.path().join("single");
    assert_eq!(code(&gen(&single, &["--envs", "1", "--samples", "10"])), 0);
    let audit = tmp.path().join("audit.json");
    let o = crl(&["check", "assumptions", "--spec", p(&single), "--points", "2", "--out", p(&audit)]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));

    let collider = tmp.path().join("collider");
    assert_eq!(code(&gen(&collider, &["--graph", "collider3", "--envs", "2", "--samples", "10"])), 0);
    let markov = tmp.path().join("markov.json");
    let o = crl(&["check", "markov", "--spec", p(&collider), "--out", p(&markov)]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&markov).unwrap()).unwrap();
    assert_eq!(v["result"]["triangles"], serde_json::json!([[0, 1, 2]]));
}

#[test]
fn train_eval_and_sweep_are_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(code(&gen(&data, &["--envs", "3", "--samples", "40"])), 0);
    let runs: Vec<_> = ["r1", "r2"].iter().map(|r| tmp.path().join(r)).collect();
    for r in &runs {
        let o = crl(&["train", "--data", p(&data), "--steps", "20", "--batch-size", "8", "--seed", "3", "--out", p(r)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(read_dir_bytes(&runs[0]), read_dir_bytes(&runs[1]));
    for t in 1..=2 {
        let hist = fs::read_to_string(runs[0].join(format!("iter_{t}/history.csv"))).unwrap();
        assert_eq!(hist.lines().count(), 21);
        assert!(runs[0].join(format!("iter_{t}/model.json")).exists());
    }
    let zhat = fs::read_to_string(runs[0].join("zhat.csv")).unwrap();
    assert_eq!(zhat.lines().next(), Some("env,zhat_0,zhat_1,zhat_2"));
    assert_eq!(zhat.lines().count(), 1 + 3 * 40);

    let evals: Vec<_> = ["e1", "e2"].iter().map(|e| tmp.path().join(e)).collect();
    for e in &evals {
        let o = crl(&["eval", "--run", p(&runs[0]), "--data", p(&data), "--out", p(e)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(read_dir_bytes(&evals[0]), read_dir_bytes(&evals[1]));
    let scatter = fs::read_to_string(evals[0].join("scatter.csv")).unwrap();
    assert_eq!(scatter.lines().count(), 1 + 9 * 120);

    let sweep = tmp.path().join("sweep");
    let o = Command::new(env!("CARGO_BIN_EXE_crl"))
        .args(["sweep", "--param", "nlatent", "--values", "1,2", "--seeds", "0,1", "--data", p(&data)])
        .args(["--steps", "10", "--batch-size", "8", "--out", p(&sweep)])
        .env("CRL_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(sweep.join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 5);
    assert!(sweep.join("nlatent_1/seed_0/iter_1/history.csv").exists());
    assert!(sweep.join("nlatent_2/seed_1/iter_1/history.csv").exists());
}

#[test]
fn divergence_exits_with_numerical_code() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(code(&gen(&data, &["--envs", "2", "--samples", "20"])), 0);
    let out = tmp.path().join("run");
    let o = crl(&["train", "--data", p(&data), "--steps", "200", "--lr", "1e300", "--out", p(&out)]);
    assert_eq!(code(&o), 5, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("step"));
}
