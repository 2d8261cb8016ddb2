use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mtbandit"))
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn bandit_writes_logs_summary_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let o = run(&["bandit", "--config", s(&fixture("synthetic.toml")), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let f = files(&out);
    for m in ["identity", "cke", "r2"] {
        for seed in [0, 1] {
            let name = format!("regret_{m}_seed{seed}.csv");
            let text = String::from_utf8(f[&name].clone()).unwrap();
            assert!(text.starts_with("time,task,arm,reward,regret,width_chosen\n"));
            assert_eq!(text.lines().count(), 1 + 40 * 5);
        }
    }
    assert!(f.contains_key("summary.csv"));
    assert!(!f.keys().any(|k| k.ends_with(".partial")));
    let manifest: serde_json::Value = serde_json::from_slice(&f["manifest.json"]).unwrap();
    assert_eq!(manifest["tool"], "mtbandit");
    assert_eq!(manifest["seeds"], serde_json::json!([0, 1]));
    assert_eq!(manifest["config"]["horizon"], 40);
    assert!(manifest.get("version").is_some());
}

#[test]
fn summary_is_mean_of_seed_files() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    assert!(run(&["bandit", "--config", s(&fixture("synthetic.toml")), "--out", s(&out)])
        .status
        .success());
    let mut summary: BTreeMap<(String, usize), f64> = BTreeMap::new();
    let mut rdr = csv::Reader::from_path(out.join("summary.csv")).unwrap();
    for rec in rdr.records() {
        let rec = rec.unwrap();
        summary.insert((rec[0].to_string(), rec[1].parse().unwrap()), rec[2].parse().unwrap());
    }
    for m in ["identity", "cke", "r2"] {
        let mut totals = vec![0.0; 40];
        for seed in [0, 1] {
            let mut per_step = vec![0.0; 40];
            let mut rdr = csv::Reader::from_path(out.join(format!("regret_{m}_seed{seed}.csv"))).unwrap();
            for rec in rdr.records() {
                let rec = rec.unwrap();
                let t: usize = rec[0].parse().unwrap();
                per_step[t] += rec[4].parse::<f64>().unwrap();
            }
            let mut cum = 0.0;
            for (t, r) in per_step.iter().enumerate() {
                cum += r;
                totals[t] += cum / 2.0;
            }
        }
        for (t, want) in totals.iter().enumerate() {
            let got = summary[&(m.to_string(), t)];
            assert!((got - want).abs() < 1e-9, "{m} t={t}: {got} vs {want}");
        }
    }
}

#[test]
fn reruns_are_byte_identical_and_manifest_reproduces() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    let cfg = fixture("synthetic.toml");
    for dir in [&a, &b] {
        assert!(run(&["bandit", "--config", s(&cfg), "--seed", "3", "--out", s(dir)]).status.success());
    }
    let (mut fa, mut fb) = (files(&a), files(&b));
    let (ma, mb) = (fa.remove("manifest.json").unwrap(), fb.remove("manifest.json").unwrap());
    assert_eq!(fa, fb);
    let strip = |bytes: &[u8]| {
        let mut v: serde_json::Value = serde_json::from_slice(bytes).unwrap();
        v["config"].as_object_mut().unwrap().remove("out_dir");
        v
    };
    assert_eq!(strip(&ma), strip(&mb));
    assert!(fa.contains_key("regret_cke_seed3.csv"));
    assert!(!fa.contains_key("regret_cke_seed0.csv"));
    let o = run(&["bandit", "--config", s(&a.join("manifest.json")), "--out", s(&c)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let fc = files(&c);
    for (name, bytes) in &fa {
        if name.ends_with(".csv") {
            assert_eq!(&fc[name], bytes, "{name} differs after manifest rerun");
        }
    }
}

#[test]
fn missing_config_exits_1_without_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let o = run(&["bandit", "--config", s(&tmp.path().join("nope.toml")), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
    assert!(!o.stderr.is_empty());
}

#[test]
fn usage_errors_exit_1() {
    for args in [&["frobnicate"][..], &["bandit", "--bogus"], &["theory", "--format", "xml"], &[]] {
        let o = run(args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(!o.stderr.is_empty(), "{args:?}");
    }
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn invalid_config_values_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let cases = [
        "[policy]\nbeta = -1.0\n",
        "seeds = []\n",
        "horizon = 0\n",
        "unknown_key = 1\n",
        "kind = \"sim-sweep\"\n",
        "[similarity]\nr2_floor = 0.5\n",
    ];
    for (i, text) in cases.iter().enumerate() {
        let path = tmp.path().join(format!("c{i}.toml"));
        fs::write(&path, text).unwrap();
        let out = tmp.path().join(format!("o{i}"));
        let o = run(&["bandit", "--config", s(&path), "--out", s(&out)]);
        assert_eq!(o.status.code(), Some(1), "{text}");
        assert!(!out.exists());
    }
}

#[test]
fn runtime_errors_exit_2_without_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("k.csv");
    fs::write(&bad, "1,0\n0,1\n").unwrap();
    let cfg = tmp.path().join("c.toml");
    fs::write(
        &cfg,
        "horizon = 5\nseeds = [0]\n[similarity]\nmethods = [\"file\"]\nfile = \"k.csv\"\nwarmup = 10\n",
    )
    .unwrap();
    let out = tmp.path().join("runs");
    let o = run(&["bandit", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed 0"));
    assert!(!out.exists());
}

#[test]
fn cached_similarity_feeds_file_method() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("sim.toml");
    fs::write(&cfg, "seeds = [2]\n[similarity]\nmethods = [\"cke\", \"r2\"]\nwarmup = 30\n").unwrap();
    assert!(run_in(tmp.path(), &["similarity", "--config", "sim.toml", "--out", "cache"])
        .status
        .success());
    let cached = tmp.path().join("cache/similarity_cke_seed2.csv");
    let text = fs::read_to_string(&cached).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().all(|l| l.split(',').count() == 5));
    let use_cfg = tmp.path().join("use.toml");
    fs::write(
        &use_cfg,
        "horizon = 10\nseeds = [2]\n[similarity]\nmethods = [\"file\"]\nfile = \"cache/similarity_cke_seed2.csv\"\nwarmup = 30\n",
    )
    .unwrap();
    let o = run_in(tmp.path(), &["bandit", "--config", "use.toml", "--out", "runs"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(tmp.path().join("runs/regret_file_seed2.csv").exists());
}

#[test]
fn theory_and_sweep_formats() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("small.toml");
    fs::write(
        &cfg,
        "seeds = [1]\n[theory]\ninstances = 4\nmu_sets = 2\n[sweep]\ndraws = 3\nstep = 0.25\n",
    )
    .unwrap();
    let t = tmp.path().join("t");
    assert!(run(&["theory", "--config", s(&cfg), "--out", s(&t)]).status.success());
    let report: serde_json::Value = serde_json::from_slice(&fs::read(t.join("theory.json")).unwrap()).unwrap();
    assert_eq!(report["g"].as_array().unwrap().len(), 4);
    assert!(report["g"].as_array().unwrap().iter().all(|g| g.as_f64().unwrap() >= 1.0));

    let tc = tmp.path().join("tc");
    assert!(run(&["theory", "--config", s(&cfg), "--out", s(&tc), "--format", "csv"]).status.success());
    assert!(tc.join("rank_bound.csv").exists() && tc.join("monotonicity.csv").exists());

    let sw = tmp.path().join("sw");
    assert!(run(&["sim-sweep", "--config", s(&cfg), "--out", s(&sw)]).status.success());
    let text = fs::read_to_string(sw.join("sweep.csv")).unwrap();
    assert!(text.starts_with("sim_train,mean_mse,std_err\n"));
    assert_eq!(text.lines().count(), 6);

    let sj = tmp.path().join("sj");
    assert!(run(&["sim-sweep", "--config", s(&cfg), "--out", s(&sj), "--format", "json"]).status.success());
    let rows: serde_json::Value = serde_json::from_slice(&fs::read(sj.join("sweep.json")).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 5);
}

#[test]
fn trace_command_runs_on_fixture() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("trace.toml");
    fs::write(
        &cfg,
        format!(
            "horizon = 15\nseeds = [0]\n[similarity]\nmethods = [\"identity\", \"cke\"]\nwarmup = 20\n[trace]\npath = {:?}\nmax_tasks = 3\n",
            s(&fixture("demo_trace.csv"))
        ),
    )
    .unwrap();
    let out = tmp.path().join("runs");
    let o = run(&["trace", "--config", s(&cfg), "--out", s(&out), "--format", "json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&fs::read(out.join("regret.json")).unwrap()).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 2);
    assert_eq!(v[1]["seeds"][0]["similarity"].as_array().unwrap().len(), 3);

    let no_path = tmp.path().join("bad.toml");
    fs::write(&no_path, "seeds = [0]\n").unwrap();
    assert_eq!(run(&["trace", "--config", s(&no_path)]).status.code(), Some(1));
}
