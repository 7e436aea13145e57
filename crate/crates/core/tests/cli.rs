//! The `endpoint-ddp` binary and the harness behind it.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use endpoint_ddp::direction::EndpointFactorization;
use endpoint_ddp::harness::{
    cold_start_campaign, compare_factorizations, manifest, run, trace_header, RunConfig, Summary, CAMPAIGN_COLUMNS,
    COMPARE_COLUMNS, TIMING_COLUMNS, TRACE_SCHEMA_VERSION,
};
use endpoint_ddp::problems::{DynamicsForm, ProblemSpec};
use endpoint_ddp::solver::Status;
use endpoint_ddp::Error;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_endpoint-ddp"));
    c.env_remove("ENDPOINT_DDP_OUT_DIR");
    c
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("config.toml");
    fs::write(&p, text).unwrap();
    p
}

fn cli(args: &[&str], config: &Path) -> Output {
    bin().args(args).arg("--config").arg(config).output().unwrap()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|r| r.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

fn config(family: &str, out: &Path) -> RunConfig {
    let mut c = RunConfig::new(ProblemSpec::new(family));
    c.output.dir = out.to_path_buf();
    c
}

#[test]
fn lqr_run_writes_conforming_outputs() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "[problem]\nfamily = \"lqr\"\n");
    let out = tmp.path().join("out");
    let o = bin().args(["run", "--config"]).arg(&cfg).arg("--out-dir").arg(&out).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let summary: Summary = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.iterations, 1);
    assert_eq!(summary.status, Status::Converged);
    assert!(summary.final_endpoint_l1 <= 1e-10);
    assert_eq!(summary.schema_version, TRACE_SCHEMA_VERSION);

    let (header, rows) = read_csv(&out.join("trace.csv"));
    assert_eq!(header, trace_header());
    assert_eq!(rows.len(), 2);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("trace.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["schema_version"], TRACE_SCHEMA_VERSION);
    let names: Vec<&str> = m["columns"].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    assert_eq!(names, trace_header());
    // normalized cost is cost / initial cost
    assert_eq!(rows[0][2], "1e0");
}

#[test]
fn manifest_is_consistent() {
    let m = manifest();
    let names: Vec<&str> = m.columns.iter().map(|c| c.name.as_str()).collect();
    assert_eq!(names, trace_header());
    assert!(TIMING_COLUMNS.iter().all(|t| names.contains(t)));
    assert!(m.columns.iter().all(|c| !c.description.is_empty()));
}

#[test]
fn malformed_configs_exit_nonzero_with_diagnostic() {
    let tmp = TempDir::new().unwrap();
    for (text, needle) in [
        ("[problem\nfamily = \"lqr\"", "line"),
        ("[problem]\nfamily = \"lqr\"\nhorizn = 3\n", "horizn"),
        ("[problem]\nfamily = \"lqr\"\n[solver]\nmax-iters = \"many\"\n", "max-iters"),
        ("repetitions = 0\n[problem]\nfamily = \"lqr\"\n", "repetitions"),
        ("[problem]\nfamily = \"lqr\"\ndt = -1.0\n", "dt"),
    ] {
        let cfg = write_config(tmp.path(), text);
        let o = cli(&["run", "--out-dir", tmp.path().join("o").to_str().unwrap()], &cfg);
        assert!(!o.status.success(), "{text}");
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains(needle), "{text}: {err}");
    }
    let o = cli(&["run"], &tmp.path().join("missing.toml"));
    assert!(!o.status.success());
}

#[test]
fn unknown_family_exits_nonzero() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "[problem]\nfamily = \"quadrotor\"\n");
    let o = cli(&["run", "--out-dir", tmp.path().to_str().unwrap()], &cfg);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("quadrotor"));
}

#[test]
fn nonconvergence_is_reported_not_fatal() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "[problem]\nfamily = \"dpend-inverse\"\n[solver]\nmax-iters = 2\n");
    let o = cli(&["run", "--out-dir", tmp.path().to_str().unwrap()], &cfg);
    assert!(o.status.success());
    let summary: Summary = serde_json::from_str(&fs::read_to_string(tmp.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.status, Status::MaxIters);
}

#[test]
fn out_dir_comes_from_environment() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "[problem]\nfamily = \"lqr\"\n[output]\ndir = \"ignored\"\n");
    let env_out = tmp.path().join("from-env");
    let o = bin().env("ENDPOINT_DDP_OUT_DIR", &env_out).args(["run", "--config"]).arg(&cfg).current_dir(tmp.path()).output().unwrap();
    assert!(o.status.success());
    assert!(env_out.join("summary.json").exists());
    assert!(!tmp.path().join("ignored").exists());
}

#[test]
fn seed_and_repetition_overrides_apply() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "seed = 1\n[problem]\nfamily = \"lqr\"\n");
    let out = tmp.path().join("o");
    let o = cli(&["campaign", "--seed", "40", "--repetitions", "3", "--out-dir", out.to_str().unwrap()], &cfg);
    assert!(o.status.success());
    let rows: Vec<serde_json::Value> = serde_json::from_str(&fs::read_to_string(out.join("campaign.json")).unwrap()).unwrap();
    let seeds: Vec<u64> = rows[0]["runs"].as_array().unwrap().iter().map(|r| r["seed"].as_u64().unwrap()).collect();
    assert_eq!(seeds, [40, 41, 42]);
}

#[test]
fn traces_reproduce_bitwise_apart_from_timings() {
    let tmp = TempDir::new().unwrap();
    let strip = |dir: &Path| {
        let (header, rows) = read_csv(&dir.join("trace.csv"));
        let keep: Vec<usize> = (0..header.len()).filter(|&i| !TIMING_COLUMNS.contains(&header[i].as_str())).collect();
        rows.into_iter().map(|r| keep.iter().map(|&i| r[i].clone()).collect::<Vec<_>>()).collect::<Vec<_>>()
    };
    let mut traces = Vec::new();
    for k in 0..2 {
        let mut c = config("cartpole-inverse", &tmp.path().join(format!("r{k}")));
        c.seed = 7;
        run(&c).unwrap();
        traces.push(strip(&c.output.dir));
    }
    assert!(traces[0].len() > 2);
    assert_eq!(traces[0], traces[1]);
}

#[test]
fn pendulum_run_has_monotone_envelope_and_exact_endpoint() {
    let tmp = TempDir::new().unwrap();
    let c = config("dpend-inverse", tmp.path());
    let out = run(&c).unwrap();
    assert_eq!(out.summary.status, Status::Converged);
    assert!(out.summary.final_endpoint_l1 <= 1e-8);
    let (header, rows) = read_csv(&out.trace_path);
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let (env, pen) = (col("envelope"), col("penalty"));
    let last = rows.last().unwrap();
    assert!(last[col("endpoint_l1")].parse::<f64>().unwrap() <= 1e-8);
    for w in rows[..rows.len() - 1].windows(2) {
        if w[0][pen] == w[1][pen] {
            assert!(w[1][env].parse::<f64>().unwrap() <= w[0][env].parse::<f64>().unwrap() * (1.0 + 1e-12));
        }
    }
}

#[test]
fn compare_needs_two_variants() {
    let tmp = TempDir::new().unwrap();
    let mut c = config("lqr", tmp.path());
    c.variants = vec![EndpointFactorization::Schur];
    assert!(matches!(compare_factorizations(&c), Err(Error::InvalidOption(_))));
    c.variants = vec![EndpointFactorization::NullQr, EndpointFactorization::NullQr];
    assert!(matches!(compare_factorizations(&c), Err(Error::InvalidOption(_))));
    let cfg = write_config(tmp.path(), "variants = [\"schur\"]\n[problem]\nfamily = \"lqr\"\n");
    assert!(!cli(&["compare", "--out-dir", tmp.path().to_str().unwrap()], &cfg).status.success());
}

#[test]
fn lqr_compare_agrees_across_factorizations() {
    let tmp = TempDir::new().unwrap();
    let mut c = config("lqr", tmp.path());
    c.repetitions = 3;
    let report = compare_factorizations(&c).unwrap();
    assert!(report.trajectories_agree);
    assert!(report.variants.iter().all(|v| v.outcome == "ok" && v.iterations == 1 && v.max_deviation <= 1e-6));
    let (header, rows) = read_csv(&tmp.path().join("compare.csv"));
    assert_eq!(header, COMPARE_COLUMNS);
    assert_eq!(rows.len(), 3);
}

#[test]
fn duplicated_endpoint_compare_fails_only_schur() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "repetitions = 2\n[problem]\nfamily = \"lqr\"\nduplicate-endpoint = 2\n");
    let o = cli(&["compare", "--out-dir", tmp.path().to_str().unwrap()], &cfg);
    assert!(o.status.success());
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("FAILED(SingularEndpointOperator)"), "{stdout}");
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("compare.json")).unwrap()).unwrap();
    let outcomes: Vec<&str> = report["variants"].as_array().unwrap().iter().map(|v| v["outcome"].as_str().unwrap()).collect();
    assert_eq!(outcomes, ["FAILED(SingularEndpointOperator)", "ok", "ok"]);
    assert_eq!(report["trajectories_agree"], true);
}

#[test]
fn lqr_campaign_always_succeeds_in_one_step() {
    let tmp = TempDir::new().unwrap();
    let rows = cold_start_campaign(&config("lqr", tmp.path())).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0].form, rows[1].form), (DynamicsForm::Forward, DynamicsForm::Inverse));
    for r in &rows {
        assert_eq!((r.trials, r.successes), (10, 10));
        assert!(r.runs.iter().all(|t| t.iterations == 1 && t.final_endpoint_l1 <= 1e-10));
        assert_eq!(r.mean_iterations, 1.0);
    }
    let (header, table) = read_csv(&tmp.path().join("campaign.csv"));
    assert_eq!(header, CAMPAIGN_COLUMNS);
    assert_eq!(table.len(), 2);
}

#[test]
fn zero_magnitude_campaign_trials_are_identical() {
    let tmp = TempDir::new().unwrap();
    let mut c = config("cartpole", tmp.path());
    c.magnitude = 0.0;
    c.repetitions = 4;
    for row in cold_start_campaign(&c).unwrap() {
        let first = &row.runs[0];
        for t in &row.runs {
            assert_eq!((&t.outcome, t.iterations, t.final_cost.to_bits()), (&first.outcome, first.iterations, first.final_cost.to_bits()));
        }
    }
}

#[test]
fn config_file_round_trips() {
    let mut c = RunConfig::new(ProblemSpec::new("dpend-inverse"));
    c.seed = 5;
    c.variants = vec![EndpointFactorization::NullLu, EndpointFactorization::NullQr];
    let text = toml::to_string(&c).unwrap();
    assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
    for f in ["lqr.toml", "lqr-duplicated.toml", "dpend.toml", "dpend-inverse.toml"] {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(f);
        RunConfig::load(&path).unwrap_or_else(|e| panic!("{f}: {e}"));
    }
}
