use std::path::Path;
use std::process::{Command, Output};

fn nma(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nma"))
        .current_dir(dir)
        .env_remove("NMA_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn fixture(dir: &Path) {
    let out = nma(dir, &["example-data"]);
    assert!(out.status.success());
    std::fs::write(dir.join("data.csv"), out.stdout).unwrap();
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn fit_summary_reports_heterogeneity() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let out = nma(dir.path(), &["fit", "data.csv", "--reference", "Placebo"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let s = stdout(&out);
    assert!(s.contains("tau = 0.0987"), "{s}");
    assert!(s.contains("I^2 = 56.9%"), "{s}");
    assert!(s.contains("p = 0.459"), "{s}");
    for f in ["result.json", "summary.txt", "odds_ratios.csv", "forest.svg", "network.svg", "run-info.json"] {
        assert!(dir.path().join("nma-out").join(f).exists(), "{f}");
    }
}

#[test]
fn sensitivity_exclusion_reverses_arb_and_ct() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let out = nma(
        dir.path(),
        &["fit", "data.csv", "--reference", "Placebo", "--exclude-studies", "Jikei,E-COST,HYVET"],
    );
    assert!(out.status.success());
    let s = stdout(&out);
    assert!(s.contains("tau = 0.05"), "{s}");
    let ranking = s.lines().find(|l| l.starts_with("Ranking")).unwrap();
    assert!(ranking.find("CT").unwrap() < ranking.find("ARB").unwrap(), "{ranking}");
}

#[test]
fn empty_input_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("empty.csv"), "").unwrap();
    let out = nma(dir.path(), &["fit", "empty.csv"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn disconnected_network_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("d.csv"),
        "study_id,treatment,events,total\ns1,A,10,100\ns1,B,12,100\ns2,C,9,100\ns2,D,14,100\n",
    )
    .unwrap();
    let out = nma(dir.path(), &["fit", "d.csv", "--reference", "A"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn non_convergence_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let out = nma(dir.path(), &["fit", "data.csv", "--reference", "Placebo", "--tau2-max", "1e-4"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn influence_without_bootstrap_has_no_o_values() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let out = nma(dir.path(), &["influence", "data.csv", "--reference", "Placebo", "--B", "0"]);
    assert!(out.status.success());
    let csv = std::fs::read_to_string(dir.path().join("nma-out/influence.csv")).unwrap();
    let row = csv.lines().find(|l| l.contains(",ARB vs CT,")).unwrap();
    let cells: Vec<&str> = row.split(',').collect();
    assert!(cells[3].starts_with("3.441"), "{row}");
    assert_eq!(cells[4], "", "O-value column should be empty: {row}");
    assert!(csv.lines().last().unwrap().ends_with("not evaluable"));
    let svg = std::fs::read_to_string(dir.path().join("nma-out/influence.svg")).unwrap();
    assert!(!svg.contains("O-value of"));
}

#[test]
fn measures_subset_bootstraps_only_that_measure() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let out = nma(dir.path(), &["influence", "data.csv", "--reference", "Placebo", "--B", "20", "--measures", "phi"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("nma-out/influence.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[4], "");
    assert_eq!(row[7], "");
    assert!(!row[10].is_empty());
    assert_eq!(row[13], "");
}

#[test]
fn wald_table_has_eighteen_designs() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let out = nma(dir.path(), &["test", "data.csv", "--reference", "Placebo", "--B", "0"]);
    assert!(out.status.success());
    let csv = std::fs::read_to_string(dir.path().join("nma-out/wald.csv")).unwrap();
    let ids: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).filter(|s| !s.is_empty()).collect();
    assert_eq!(ids.len(), 18);
    assert_eq!(ids[0], "11");
    assert_eq!(ids[17], "18");
}

#[test]
fn reruns_are_byte_identical_and_report_regenerates() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let args = |out: &'static str| {
        vec!["--out-dir", out, "influence", "data.csv", "--reference", "Placebo", "--B", "30", "--seed", "9"]
    };
    assert!(nma(dir.path(), &args("a")).status.success());
    assert!(nma(dir.path(), &[&["--workers", "3"][..], &args("b")].concat()).status.success());
    let rep = nma(dir.path(), &["--out-dir", "c", "report", "a/result.json", "--input", "data.csv"]);
    assert!(rep.status.success(), "{}", String::from_utf8_lossy(&rep.stderr));
    for f in ["result.json", "influence.csv", "influence.svg", "summary.txt", "forest.svg", "network.svg"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        assert_eq!(a, std::fs::read(dir.path().join("b").join(f)).unwrap(), "{f} differs across runs");
        if f != "result.json" {
            assert_eq!(a, std::fs::read(dir.path().join("c").join(f)).unwrap(), "{f} differs after regeneration");
        }
    }
}

#[test]
fn report_rejects_stale_input() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    assert!(nma(dir.path(), &["fit", "data.csv", "--reference", "Placebo"]).status.success());
    std::fs::write(dir.path().join("other.csv"), "study_id,treatment,events,total\ns,A,1,10\ns,B,2,10\n").unwrap();
    let out = nma(dir.path(), &["--out-dir", "r", "report", "nma-out/result.json", "--input", "other.csv"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let run = |out: &str, seed: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_nma"));
        c.current_dir(dir.path()).env_remove("NMA_SEED");
        if let Some(s) = seed {
            c.env("NMA_SEED", s);
        }
        c.args(["--out-dir", out, "test", "data.csv", "--reference", "Placebo", "--B", "20"]);
        assert!(c.output().unwrap().status.success());
        std::fs::read_to_string(dir.path().join(out).join("result.json")).unwrap()
    };
    let a = run("a", Some("42"));
    assert!(a.contains("\"seed\": 42"));
    let b = run("b", None);
    assert!(b.contains("\"seed\": 1"));
}

#[test]
fn simulate_single_replicate_rates_are_binary() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("s.toml"),
        r#"
[[scenario]]
id = 1
target_design = "ARB vs CT"
target_arm = "ARB"
n_studies = 26
tau = 0.05
omega = 0.0
replications = 1
bootstrap = 10
seed = 5
loops = [["ACE", "ARB", "CT"]]
"#,
    )
    .unwrap();
    let out = nma(dir.path(), &["simulate", "s.toml"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("nma-out/simulation.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    for (h, v) in header.iter().zip(&row) {
        if h.ends_with("_p_lt_0.05") || h.ends_with("_top3") || h.ends_with("o_lt_0.05") {
            assert!(*v == "0.0" || *v == "100.0", "{h} = {v}");
        }
    }
}

#[test]
fn simulate_bundled_grid_has_24_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = nma(dir.path(), &["simulate", "--bundled", "grid", "--replications", "1", "--B", "0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("nma-out/simulation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 25);
}

#[test]
fn bad_scenario_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("s.toml"), "[[scenario]]\nid = 1\nbogus = true\n").unwrap();
    let out = nma(dir.path(), &["simulate", "s.toml"]);
    assert_eq!(out.status.code(), Some(2));
}
