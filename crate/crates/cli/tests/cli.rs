use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn asgd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asgd")).args(args).env_remove("ASGD_THREADS").output().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

fn files_in(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> =
        std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    names.sort();
    names
}

#[test]
fn estimate_quadratic_lands_within_clt_scale_of_the_mean() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("est.json");
    let conf = configs().join("quadratic.conf");
    ok(&asgd(&["estimate", conf.to_str().unwrap(), "--n", "10000", "--out", out.to_str().unwrap()]));
    let v = read_json(&out);
    assert_eq!(v["n"], 10_000);
    let z_bar = floats(&v["z_bar"]);
    let m = [0.5, -1.0];
    let err = z_bar.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    assert!(err <= 5.0 / 100.0, "‖Z̄ - m‖ = {err}");

    let manifest = read_json(&dir.path().join("est.json.manifest.json"));
    assert_eq!(manifest["command"], "estimate");
    assert_eq!(manifest["config_hash"], v["config_hash"]);
    assert_eq!(manifest["outputs"][0], out.display().to_string());
    assert!(manifest["finished_unix_ms"].as_u64() >= manifest["started_unix_ms"].as_u64());
}

#[test]
fn estimate_with_one_sample_returns_the_initializer() {
    let dir = tempfile::tempdir().unwrap();
    let conf = configs().join("quadratic.conf");
    let out = dir.path().join("one.json");
    ok(&asgd(&["estimate", conf.to_str().unwrap(), "--n", "1", "--seed", "9", "--out", out.to_str().unwrap()]));
    let v = read_json(&out);
    assert_eq!(v["z"], v["z_bar"]);

    // Location objectives start at the first sample of the replicate-0 stream.
    use asgd_core::config::Config;
    use asgd_core::rng::{self, Domain};
    let cfg = Config::parse(&std::fs::read_to_string(&conf).unwrap()).unwrap();
    let first = cfg.binding.distribution.sample(&mut rng::stream(9, Domain::Replicate, 0));
    assert_eq!(floats(&v["z"]), first.x.as_slice());

    let cosh = configs().join("cosh_teacher.conf");
    let out = dir.path().join("cosh.json");
    ok(&asgd(&["estimate", cosh.to_str().unwrap(), "--n", "1", "--out", out.to_str().unwrap()]));
    assert!(floats(&read_json(&out)["z"]).iter().all(|&c| c == 0.0));
}

#[test]
fn malformed_config_exits_2_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "bad.conf", "objective.kind = quadratic\ndistribution.family = gaussian\ndistribution.centre = 0, 0\n");
    let out = dir.path().join("est.json");
    let r = asgd(&["estimate", &bad, "--out", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("centre"));
    assert_eq!(files_in(dir.path()), vec!["bad.conf"]);

    let missing = dir.path().join("nope.conf");
    let r = asgd(&["check", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn non_finite_iterate_exits_3_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(
        dir.path(),
        "blowup.conf",
        "objective.kind = quadratic\ndistribution.family = gaussian\ndistribution.center = 0, 0\n\
         distribution.scale = 1\nschedule.c_gamma = 1e300\n",
    );
    let out = dir.path().join("est.json");
    let r = asgd(&["estimate", &conf, "--n", "100", "--out", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(3), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(files_in(dir.path()), vec!["blowup.conf"]);
}

#[test]
fn oracle_reports_and_fails_with_exit_4_when_capped() {
    let dir = tempfile::tempdir().unwrap();
    let base = std::fs::read_to_string(configs().join("quantile_mixture.conf"))
        .unwrap()
        .replace("truth.n_oracle = 2e5", "truth.n_oracle = 2000");
    let conf = write_config(dir.path(), "mix.conf", &base);
    let out = dir.path().join("oracle.json");
    ok(&asgd(&["oracle", &conf, "--out", out.to_str().unwrap()]));
    let v = read_json(&out);
    assert_eq!(v["converged"], true);
    assert_eq!(v["n_oracle"], 2000);
    assert!(v["final_gradient_norm"].as_f64().unwrap() <= 1e-10);
    assert_eq!(floats(&v["m_hat"]).len(), 2);

    let capped = write_config(dir.path(), "capped.conf", &format!("{base}truth.max_iter = 1\n"));
    let out2 = dir.path().join("capped.json");
    let r = asgd(&["oracle", &capped, "--out", out2.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(4), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(!out2.exists());
}

#[test]
fn check_quadratic_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("check.json");
    ok(&asgd(&["check", configs().join("quadratic.conf").to_str().unwrap(), "--out", out.to_str().unwrap()]));
    let v = read_json(&out);
    assert_eq!(v["ratio_min"].as_f64(), Some(1.0));
    assert_eq!(v["remainder_max"].as_f64(), Some(0.0));
    assert!(dir.path().join("check.json.manifest.json").exists());
}

#[test]
fn check_sphere_median_hessian_matches_two_over_three_r() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("check.json");
    ok(&asgd(&["check", configs().join("median_sphere.conf").to_str().unwrap(), "--out", out.to_str().unwrap()]));
    let lambda = read_json(&out)["lambda_min_hat"].as_f64().unwrap();
    let want = 2.0 / (3.0 * 2.0);
    assert!((lambda - want).abs() <= 0.1 * want, "{lambda} vs {want}");
}

#[test]
fn analytic_truth_on_asymmetric_law_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(configs().join("quantile_mixture.conf"))
        .unwrap()
        .replace("truth.mode = empirical", "truth.mode = analytic")
        .replace("truth.n_oracle = 2e5\n", "");
    let conf = write_config(dir.path(), "mix.conf", &text);
    let out = dir.path().join("check.json");
    let r = asgd(&["check", &conf, "--out", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&r.stderr);
    assert!(msg.starts_with("error:") && msg.len() > 10, "{msg}");
    assert!(!out.exists());
}

#[test]
fn rates_writes_csv_report_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let conf = configs().join("median_gaussian.conf");
    let out_dir = dir.path().join("run");
    ok(&asgd(&["rates", conf.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap()]));
    assert_eq!(files_in(&out_dir), vec!["manifest.json", "moments.csv", "report.json"]);

    let report = read_json(&out_dir.join("report.json"));
    let series = report["series"].as_array().unwrap();
    let checkpoints = series[0]["points"].as_array().unwrap().len();
    let orders = series.iter().filter(|s| s["estimator"] == "averaged").count();
    let csv = std::fs::read_to_string(out_dir.join("moments.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().contains("estimator"));
    assert_eq!(lines.count(), 2 * orders * checkpoints);

    let avg = series.iter().find(|s| s["estimator"] == "averaged" && s["p"] == 1).unwrap();
    let slope = avg["fit"]["slope"].as_f64().unwrap();
    assert!((-1.15..=-0.85).contains(&slope), "averaged slope {slope}");

    let manifest = read_json(&out_dir.join("manifest.json"));
    assert_eq!(manifest["command"], "rates");
    assert_eq!(manifest["config_hash"], report["config_hash"]);
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 2);
}

#[test]
fn gen_is_reproducible_and_thread_independent() {
    let dir = tempfile::tempdir().unwrap();
    let conf = configs().join("logistic_teacher.conf");
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let c = dir.path().join("c.csv");
    ok(&asgd(&["gen", conf.to_str().unwrap(), "--n", "500", "--seed", "4", "--out", a.to_str().unwrap()]));
    ok(&asgd(&["--threads", "1", "gen", conf.to_str().unwrap(), "--n", "500", "--seed", "4", "--out", b.to_str().unwrap()]));
    ok(&asgd(&["gen", conf.to_str().unwrap(), "--n", "500", "--seed", "5", "--out", c.to_str().unwrap()]));
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    assert_ne!(text, std::fs::read_to_string(&c).unwrap());
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("# family="), "{header}");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 500);
    assert!(rows.iter().all(|r| r.ends_with(",1") || r.ends_with(",-1")));
    assert!(dir.path().join("a.csv.manifest.json").exists());
}

#[test]
fn thread_env_var_is_validated_and_overrides_flag() {
    let dir = tempfile::tempdir().unwrap();
    let conf = configs().join("quadratic.conf");
    let out = dir.path().join("o.csv");
    let run = |env: &str| {
        Command::new(env!("CARGO_BIN_EXE_asgd"))
            .args(["--threads", "2", "gen", conf.to_str().unwrap(), "--n", "10", "--out", out.to_str().unwrap()])
            .env("ASGD_THREADS", env)
            .output()
            .unwrap()
    };
    let r = run("lots");
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("ASGD_THREADS"));
    assert!(!out.exists());
    ok(&run("1"));
    assert!(out.exists());
}
