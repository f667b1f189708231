use pivotlab_cli::{parse_csv_output, parse_output, parse_summary_output, run, Outcome};

fn pivotlab(args: &[&str]) -> Outcome {
    run(std::iter::once("pivotlab").chain(args.iter().copied()), None)
}

const ROTATION: &str = "dim 2\natom 1\nrow 0 -1\nrow 1 0\n";

#[test]
fn toy_escape_speed_is_one_third() {
    let out = pivotlab(&["toy", "--n", "10000", "--trials", "100000", "--seed", "7", "--format", "summary"]);
    assert_eq!(out.code, 0, "{}", out.stderr);
    let parsed = parse_summary_output(&out.stdout).unwrap();
    let speed = parsed.scalar("mean_speed").unwrap();
    assert!((0.323..=0.343).contains(&speed), "mean speed {speed}");
}

#[test]
fn same_seed_gives_identical_bytes() {
    let args = ["toy", "--n", "300", "--trials", "3000", "--seed", "11"];
    let a = pivotlab(&args);
    let b = pivotlab(&args);
    assert_eq!(a.code, 0);
    assert_eq!(a.stdout, b.stdout);
    let c = pivotlab(&["toy", "--n", "300", "--trials", "3000", "--seed", "12"]);
    assert_ne!(a.stdout, c.stdout);
}

#[test]
fn output_does_not_depend_on_worker_count() {
    let args = ["sigma", "--spec", "rot_diag_d3", "--n-grid", "20,40", "--trials", "400", "--seed", "3"];
    let runs: Vec<String> = [1, 3]
        .iter()
        .map(|&k| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(k).build().unwrap();
            pool.install(|| pivotlab(&args)).stdout
        })
        .collect();
    assert!(!runs[0].is_empty());
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn seed_flag_beats_environment() {
    let base = ["toy", "--n", "100", "--trials", "500"];
    let with_env = run(std::iter::once("pivotlab").chain(base), Some("4"));
    let mut flagged: Vec<&str> = base.to_vec();
    flagged.extend(["--seed", "4"]);
    assert_eq!(with_env.stdout, pivotlab(&flagged).stdout);
    let both = run(std::iter::once("pivotlab").chain(flagged.iter().copied()), Some("99"));
    assert_eq!(both.stdout, with_env.stdout);
    let cfg = parse_csv_output(&with_env.stdout).unwrap().config;
    assert_eq!(cfg["seed"], 4);
    let bad = run(std::iter::once("pivotlab").chain(base), Some("abc"));
    assert_eq!(bad.code, 2);
}

#[test]
fn sigma_is_positive_on_the_hyperbolic_pair() {
    let out = pivotlab(&["sigma", "--n-grid", "50,100", "--trials", "1000"]);
    assert_eq!(out.code, 0, "{}", out.stderr);
    let p = parse_csv_output(&out.stdout).unwrap();
    assert!(p.scalar("sigma_lo").unwrap() > 0.0);
    assert_eq!(p.index_name, "n");
    assert_eq!(p.rows_named("sqz1_over_n").count(), 2);
}

#[test]
fn exit_codes() {
    assert_eq!(pivotlab(&["frobnicate"]).code, 64);
    assert_eq!(pivotlab(&[]).code, 64);
    assert_eq!(pivotlab(&["sigma", "--no-such-flag"]).code, 64);
    let help = pivotlab(&["--help"]);
    assert_eq!(help.code, 0);
    assert!(help.stdout.contains("lemma-check"));
    assert_eq!(pivotlab(&["sigma", "--spec", "/no/such/spec"]).code, 2);
    assert_eq!(pivotlab(&["sigma", "--n-grid", "5,x"]).code, 2);
    assert_eq!(pivotlab(&["sigma", "--n-grid", "20,10"]).code, 2);
    assert_eq!(pivotlab(&["lemma-check", "--lemma", "nonsense"]).code, 2);
    assert_eq!(pivotlab(&["coeffs", "--f", "1,2,3"]).code, 2);
    let rot = pivotlab(&["sigma", "--spec-text", ROTATION, "--n-grid", "10,20", "--trials", "10"]);
    assert_eq!(rot.code, 3);
    assert!(rot.stderr.contains("non-proximal"));
    let sch = pivotlab(&["schottky-build", "--spec-text", ROTATION]);
    assert_eq!(sch.code, 3, "{}", sch.stderr);
}

#[test]
fn every_output_round_trips() {
    let cases: [&[&str]; 4] = [
        &["toy", "--n", "50", "--trials", "200"],
        &["spectrum", "--n-grid", "10,20", "--trials", "100"],
        &["regularity", "--spec", "rot_diag_d3", "--trials", "100", "--n-max", "20"],
        &["lemma-check", "--lemma", "triple", "--instances", "20"],
    ];
    for args in cases {
        let csv = pivotlab(args);
        assert_eq!(csv.code, 0, "{args:?}: {}", csv.stderr);
        let mut summary_args = args.to_vec();
        summary_args.extend(["--format", "summary"]);
        let summary = pivotlab(&summary_args);
        let a = parse_output(&csv.stdout).unwrap();
        let b = parse_output(&summary.stdout).unwrap();
        assert_eq!(a.index_name, b.index_name);
        assert_eq!(a.rows.len(), b.rows.len());
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert_eq!(x.statistic, y.statistic);
            assert_eq!(x.index, y.index);
            let same = |p: Option<f64>, q: Option<f64>| match (p, q) {
                (Some(p), Some(q)) => p == q || (p.is_nan() && q.is_nan()),
                _ => false,
            };
            assert!(same(x.value, y.value) && same(x.lo, y.lo) && same(x.hi, y.hi), "{x:?} vs {y:?}");
        }
        assert_eq!(a.scalars.keys().collect::<Vec<_>>(), b.scalars.keys().collect::<Vec<_>>());
        assert_eq!(a.config["subcommand"], args[0]);
    }
}

#[test]
fn writes_to_the_output_path() {
    let dir = std::env::temp_dir().join(format!("pivotlab-cli-test-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("toy.csv");
    let p = path.to_str().unwrap();
    let out = pivotlab(&["toy", "--n", "40", "--trials", "100", "--output", p]);
    assert_eq!(out.code, 0);
    assert!(out.stdout.is_empty());
    let text = std::fs::read_to_string(&path).unwrap();
    let parsed = parse_csv_output(&text).unwrap();
    assert_eq!(parsed.config["output"], p);
    assert_eq!(parsed.rows_named("return_probability").count(), 30);
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn saved_schottky_system_drives_extraction() {
    let dir = std::env::temp_dir().join(format!("pivotlab-cli-sys-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let sys = dir.join("fan8.sys");
    let s = sys.to_str().unwrap();
    let build = pivotlab(&["schottky-build", "--spec", "fan8", "--rho", "0.15", "--system-out", s]);
    assert_eq!(build.code, 0, "{}", build.stderr);
    assert_eq!(parse_csv_output(&build.stdout).unwrap().scalar("passed"), Some(1.0));
    let ex = pivotlab(&["extract", "--system", s, "--alpha", "0.5", "--runs", "40", "--letters", "400"]);
    assert_eq!(ex.code, 0, "{}", ex.stderr);
    let p = parse_csv_output(&ex.stdout).unwrap();
    assert_eq!(p.scalar("failed_runs"), Some(0.0));
    let pv = pivotlab(&["pivot-verify", "--system", s, "--alpha", "0.5", "--steps", "20000", "--draws", "2000", "--seed", "2"]);
    assert_eq!(pv.code, 0, "{}", pv.stderr);
    let adv = parse_csv_output(&pv.stdout).unwrap().scalar("advance_rate").unwrap();
    assert!((adv - 0.7).abs() < 0.02, "advance rate {adv}");
    std::fs::remove_dir_all(&dir).unwrap();
}
