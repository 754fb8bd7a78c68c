use std::fs;
use std::path::Path;

use assert_cmd::Command;

fn momentfed() -> Command {
    let mut cmd = Command::cargo_bin("momentfed").unwrap();
    cmd.env("RUST_LOG", "warn").env("MOMENTFED_WORKERS", "1");
    cmd
}

/// Small deterministic generator so the corpus needs no extra crates.
struct Lcg(u64);

impl Lcg {
    fn uniform(&mut self) -> f64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((self.0 >> 11) as f64 + 0.5) / (1u64 << 53) as f64
    }

    fn normal(&mut self) -> f64 {
        let (a, b) = (self.uniform(), self.uniform());
        (-2.0 * a.ln()).sqrt() * (2.0 * std::f64::consts::PI * b).cos()
    }
}

fn write_corpus(path: &Path) {
    let mut rng = Lcg(42);
    let mut text = String::from("hospital,los,charges,male,ward\n");
    for (h, shift) in [("north", 0.3), ("south", -0.2), ("west", 0.0)] {
        for _ in 0..120 {
            let charges = 2000.0 + 500.0 * rng.normal();
            let male = (rng.uniform() < 0.45) as u8;
            let ward = ["a", "b", "c"][(rng.uniform() * 3.0) as usize];
            let eta = 1.2 + shift + 0.3 * (charges - 2000.0) / 500.0 + 0.2 * male as f64;
            // Poisson draw by inversion
            let (mut k, mut p, u) = (0u32, (-eta.exp()).exp(), rng.uniform());
            let mut cdf = p;
            while u > cdf {
                k += 1;
                p *= eta.exp() / k as f64;
                cdf += p;
            }
            text.push_str(&format!("{h},{k},{charges:.2},{male},{ward}\n"));
        }
    }
    fs::write(path, text).unwrap();
}

#[test]
fn help_and_bad_arguments() {
    momentfed().arg("--help").assert().code(0);
    momentfed().arg("frobnicate").assert().code(1);
    momentfed().args(["fit", "--data", "x.csv"]).assert().code(1);
}

#[test]
fn aggregate_generate_fit_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_corpus(&d.join("corpus.csv"));
    let summaries = d.join("summaries");

    momentfed()
        .args(["aggregate", "--input"])
        .arg(d.join("corpus.csv"))
        .args(["--vars", "los,charges,male,ward", "--group", "hospital", "--out"])
        .arg(&summaries)
        .assert()
        .code(0);
    for h in ["north", "south", "west"] {
        assert!(summaries.join(format!("{h}.json")).exists());
    }
    momentfed().args(["validate", "--summaries"]).arg(&summaries).assert().code(0);

    for run in ["a", "b"] {
        momentfed()
            .args(["generate", "--summaries"])
            .arg(&summaries)
            .args(["--seed", "7", "--out"])
            .arg(d.join(format!("pseudo_{run}.csv")))
            .assert()
            .code(0);
    }
    let a = fs::read(d.join("pseudo_a.csv")).unwrap();
    assert_eq!(a, fs::read(d.join("pseudo_b.csv")).unwrap());
    let header = String::from_utf8(a.clone()).unwrap();
    assert!(header.starts_with("los,charges,male,ward_b,ward_c,group_id,subgroup\n"));
    assert_eq!(header.lines().count(), 361);

    for run in ["a", "b"] {
        momentfed()
            .args(["fit", "--data"])
            .arg(d.join("pseudo_a.csv"))
            .args([
                "--formula",
                "los ~ charges + male + C(ward)",
                "--family",
                "soft_poisson",
                "--random-intercept",
                "group_id",
                "--std",
                "charges",
                "--out",
            ])
            .arg(d.join(format!("fit_{run}.json")))
            .assert()
            .code(0);
    }
    let fit = fs::read_to_string(d.join("fit_a.json")).unwrap();
    assert_eq!(fit, fs::read_to_string(d.join("fit_b.json")).unwrap());
    assert!(fit.contains("\"kind\": \"mixed\""));
    assert!(fit.contains("\"ward_c\""));
}

#[test]
fn corrupted_summary_fails_validation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_corpus(&d.join("corpus.csv"));
    let out = d.join("s.json");
    momentfed()
        .args(["aggregate", "--input"])
        .arg(d.join("corpus.csv"))
        .args(["--vars", "los,charges", "--out"])
        .arg(&out)
        .assert()
        .code(0);
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.contains("\"format_version\": 1,"));
    fs::write(&out, text.replacen("\"format_version\": 1,", "\"format_version\": 9,", 1)).unwrap();
    momentfed().args(["validate", "--summaries"]).arg(&out).assert().code(1);
    momentfed()
        .args(["generate", "--summaries"])
        .arg(&out)
        .args(["--out"])
        .arg(d.join("p.csv"))
        .assert()
        .code(1);
}

#[test]
fn input_errors_exit_1_and_numerical_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_corpus(&d.join("corpus.csv"));
    momentfed()
        .args(["aggregate", "--input"])
        .arg(d.join("corpus.csv"))
        .args(["--vars", "los,age", "--out"])
        .arg(d.join("s.json"))
        .assert()
        .code(1);

    // `male` twice under two names: the design is rank deficient.
    let text = fs::read_to_string(d.join("corpus.csv")).unwrap();
    let dup: String = text
        .lines()
        .map(|l| {
            let last = l.split(',').nth(3).unwrap();
            let extra = if last == "male" { "male2" } else { last };
            format!("{l},{extra}\n")
        })
        .collect();
    fs::write(d.join("dup.csv"), dup).unwrap();
    momentfed()
        .args(["fit", "--data"])
        .arg(d.join("dup.csv"))
        .args(["--formula", "los ~ male + male2", "--family", "soft_poisson", "--out"])
        .arg(d.join("f.json"))
        .assert()
        .code(2);
}

#[test]
fn simulate_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report");
    momentfed()
        .args(["simulate", "--setting", "m30n100", "--reps", "1", "--k", "2", "--seed", "3", "--out"])
        .arg(&out)
        .assert()
        .code(0);
    for f in ["bias.csv", "coverage.csv", "selection.csv", "predictions.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let sel = fs::read_to_string(out.join("selection.csv")).unwrap();
    assert_eq!(sel.lines().count(), 3);
    momentfed()
        .args(["simulate", "--setting", "m1n1", "--reps", "1", "--out"])
        .arg(&out)
        .assert()
        .code(1);
}
