use std::path::{Path, PathBuf};

use ellabs::export::{to_dot, AbstractionRecord};
use ellabs::{run, run_file, ExitStatus, ProblemFile, RunError, RunOptions, Sweep};
use ellabs_core::abstraction::{value_function, Abstraction};
use ellabs_core::geometry::Ellipsoid;
use ellabs_core::synthesis::AffineController;
use nalgebra::{dmatrix, dvector};

fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("problems").join(name)
}

fn load(name: &str) -> ProblemFile {
    ProblemFile::load(&bundled(name)).unwrap()
}

fn opts(dir: &Path) -> RunOptions {
    RunOptions {
        out_dir: dir.to_path_buf(),
        ..Default::default()
    }
}

#[test]
fn single_transition_writes_result() {
    let dir = tempfile::tempdir().unwrap();
    let o = RunOptions {
        single_transition: true,
        ..opts(dir.path())
    };
    assert_eq!(run(&bundled("single_transition.problem"), &o).unwrap(), ExitStatus::Covered);
    let out: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("single_transition.json")).unwrap()).unwrap();
    let j = out["j_bound"].as_f64().unwrap();
    let vol = out["volume"].as_f64().unwrap();
    assert!((j - 28.1).abs() / 28.1 < 0.1, "J = {j}");
    assert!((vol - 6.65).abs() / 6.65 < 0.1, "vol = {vol}");
}

#[test]
fn non_pd_cost_is_a_field_error() {
    let mut f = load("single_transition.problem");
    f.cost.q.as_mut().unwrap()[4][4] = -1.0;
    let dir = tempfile::tempdir().unwrap();
    let err = run_file(f, &RunOptions { single_transition: true, ..opts(dir.path()) }).unwrap_err();
    assert_eq!(err.status(), ExitStatus::InputError);
    assert!(err.to_string().contains("cost.q"), "{err}");
}

#[test]
fn parse_errors_point_at_the_line() {
    let text = std::fs::read_to_string(bundled("single_transition.problem")).unwrap();
    let bad = text.replacen("n_u = 2", "n_u = \"two\"", 1);
    let line = bad.lines().position(|l| l.contains("\"two\"")).unwrap() + 1;
    let err = ProblemFile::parse(&bad).unwrap_err().to_string();
    assert!(err.contains(&format!("line {line}")), "{err}");
    assert!(err.contains("n_u") || err.contains("invalid type"), "{err}");
}

#[test]
fn wrong_sizes_name_the_field() {
    let mut f = load("benchmark_2d.problem");
    f.spec.as_mut().unwrap().obstacles[0].half = vec![1.0];
    let err = f.validate().unwrap_err().to_string();
    assert!(err.contains("spec.obstacles[0].half"), "{err}");

    let mut f = load("benchmark_2d.problem");
    f.system.dynamics[1][2].x_exp = vec![3];
    let err = f.validate().unwrap_err().to_string();
    assert!(err.contains("system.dynamics[1][2].x_exp"), "{err}");

    let mut f = load("benchmark_2d.problem");
    f.noise.vertices = Some(vec![vec![0.0, 0.0]]);
    let err = f.validate().unwrap_err().to_string();
    assert!(err.contains("`noise`"), "{err}");
}

#[test]
fn full_run_needs_spec() {
    let dir = tempfile::tempdir().unwrap();
    let err = run(&bundled("single_transition.problem"), &opts(dir.path())).unwrap_err();
    assert!(matches!(err, RunError::Input(_)));
    assert!(err.to_string().contains("spec"));
}

fn read_sweep(dir: &Path) -> Vec<csv::StringRecord> {
    let mut r = csv::Reader::from_path(dir.join("sweep.csv")).unwrap();
    assert_eq!(r.headers().unwrap(), vec!["lambda", "j_bound", "volume", "status"]);
    r.records().map(|x| x.unwrap()).collect()
}

#[test]
fn empty_sweep_is_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let o = RunOptions {
        sweep: Some(Sweep::Lambdas(vec![])),
        ..opts(dir.path())
    };
    run(&bundled("single_transition.problem"), &o).unwrap();
    assert!(read_sweep(dir.path()).is_empty());
}

#[test]
fn infeasible_sweep_rows() {
    let mut f = load("single_transition.problem");
    let st = f.single_transition.as_mut().unwrap();
    st.target_center = vec![40.0, 40.0];
    st.target_shape = vec![vec![1e4, 0.0], vec![0.0, 1e4]];
    let dir = tempfile::tempdir().unwrap();
    let o = RunOptions {
        sweep: Some(Sweep::Lambdas(vec![0.1, 0.5])),
        ..opts(dir.path())
    };
    run_file(f, &o).unwrap();
    let rows = read_sweep(dir.path());
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| &r[3] == "infeasible" && r[1].is_empty()));
}

#[test]
fn sweep_uses_file_list() {
    let dir = tempfile::tempdir().unwrap();
    let o = RunOptions {
        sweep: Some(Sweep::FromFile),
        ..opts(dir.path())
    };
    run(&bundled("single_transition.problem"), &o).unwrap();
    let rows = read_sweep(dir.path());
    let file = load("single_transition.problem");
    assert_eq!(rows.len(), file.single_transition.unwrap().sweep.len());
    assert!(rows.iter().all(|r| &r[3] == "optimal"));
}

#[test]
fn dump_sdp_writes_programs() {
    let dir = tempfile::tempdir().unwrap();
    let o = RunOptions {
        single_transition: true,
        dump_sdp: true,
        ..opts(dir.path())
    };
    run(&bundled("single_transition.problem"), &o).unwrap();
    let text = std::fs::read_to_string(dir.path().join("sdp").join("sdp_00000.txt")).unwrap();
    assert!(text.starts_with("vars "));
    assert!(text.contains("logdet weight"));
    assert!(text.trim_end().lines().last().unwrap().starts_with("status Optimal"));
}

#[test]
fn config_hash_tracks_meaning_only() {
    let text = std::fs::read_to_string(bundled("benchmark_2d.problem")).unwrap();
    let base = ProblemFile::parse(&text).unwrap().config_hash();

    let reformatted = format!("# extra comment\n{}", text.replace("p_goal = 0.2", "p_goal   =   0.20"));
    assert_eq!(ProblemFile::parse(&reformatted).unwrap().config_hash(), base);

    // Spelling out defaults changes nothing.
    let explicit = text.replace("[build]\n", "[build]\nstall_limit = 50\nrewire_before_cover = false\n");
    assert_eq!(ProblemFile::parse(&explicit).unwrap().config_hash(), base);
    let implicit_q = text
        .split("[cost]")
        .next()
        .unwrap()
        .to_string()
        + "[spec]"
        + text.split("[spec]").nth(1).unwrap();
    assert_eq!(ProblemFile::parse(&implicit_q).unwrap().config_hash(), base);

    let seeded = text.replace("seed = 0", "seed = 1");
    assert_ne!(ProblemFile::parse(&seeded).unwrap().config_hash(), base);
    let rho = text.replace("-0.0005", "-0.0006");
    assert_ne!(ProblemFile::parse(&rho).unwrap().config_hash(), base);
}

#[test]
fn cap_reached_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = RunOptions {
        max_iters: Some(1),
        grid_res: Some(5),
        ..opts(dir.path())
    };
    assert_eq!(
        run(&bundled("benchmark_2d.problem"), &o).unwrap(),
        ExitStatus::IterationCapReached
    );
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["exit_code"], 2);
    assert_eq!(m["iterations"], 1);
    let grid = std::fs::read_to_string(dir.path().join("value_grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 26);
    assert_eq!(grid.lines().next().unwrap(), "x1,x2,v");
}

#[test]
fn abstraction_json_round_trip() {
    let law = |c: f64| AffineController {
        gain: dmatrix![-1.0, 0.0; 0.0, -1.0],
        offset: dvector![-c, 0.0],
        center: dvector![c, 0.0],
    };
    let mut a = Abstraction::new(Ellipsoid::ball(dvector![0.0, 0.0], 1.0).unwrap());
    let one = a.insert(Ellipsoid::ball(dvector![3.0, 0.0], 1.5).unwrap(), 0, law(3.0), 12.5);
    a.insert(
        Ellipsoid::new(dvector![6.0, 0.5], dmatrix![0.5, 0.1; 0.1, 0.8]).unwrap(),
        one,
        law(6.0),
        40.25,
    );
    let v = value_function(&a).unwrap();
    let rec = AbstractionRecord::new(&a, &v);
    let text = serde_json::to_string(&rec).unwrap();
    let back: AbstractionRecord = serde_json::from_str(&text).unwrap();
    let (b, w) = back.to_abstraction().unwrap();
    assert_eq!(b, a);
    assert_eq!(w.values(), v.values());
    assert!(b.is_tree());

    let dot = to_dot(&a, &v);
    assert!(dot.contains("s2 -> s1") && dot.contains("doublecircle"));

    let mut broken = rec.clone();
    broken.transitions[0].target = 9;
    assert!(broken.to_abstraction().is_err());
}
