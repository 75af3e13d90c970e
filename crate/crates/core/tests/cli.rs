use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use fgs_core::cli::io::{read_json, read_pgm, sha256_file};
use fgs_core::cli::{run, Cli, Command, RunRecord, VerifyOutput, EXIT_INVALID, EXIT_OK};
use fgs_core::Error;

const TINY: &str = r#"
seed = 3

[basis]
presets = ["x", "star", "cross"]
resolution = 12
min_feature_px = 2

[dataset]
per_slice = 4
n_volumes = 4
responses = "four"

[train]
hidden = [6]
max_epochs = 30

[optimize]
nx = 8
ny = 4

[optimize.options]
r_min = 1.5
max_iter = 15

[match]
nx = 4
ny = 2

[match.stage1]
max_iter = 10

[match.stage2]
r_min = 1.5
max_iter = 10
"#;

fn fgs(dir: &Path, args: &[&str]) -> i32 {
    let cfg = dir.join("tiny.toml");
    if !cfg.exists() {
        fs::write(&cfg, TINY).unwrap();
    }
    let out = dir.join("out");
    let mut full = vec!["fgs".to_string()];
    full.extend(args.iter().map(|s| s.to_string()));
    full.extend([
        "--config".into(),
        cfg.display().to_string(),
        "--out".into(),
        out.display().to_string(),
    ]);
    run(full)
}

fn pipeline(dir: &Path, extra: &[&str]) {
    for cmd in [
        "prepare-basis",
        "gen-dataset",
        "train",
        "optimize",
        "verify",
        "export",
    ] {
        let mut args = vec![cmd];
        args.extend_from_slice(extra);
        assert_eq!(fgs(dir, &args), EXIT_OK, "{cmd}");
    }
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

#[test]
fn pipeline_artifacts_and_provenance() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path(), &[]);
    let out = dir.path().join("out");
    let rec: RunRecord = read_json(&out.join("run.json")).unwrap();
    let ver: VerifyOutput = read_json(&out.join("verify.json")).unwrap();
    assert_eq!(
        rec.state_sha256,
        sha256_file(&out.join("state.json")).unwrap()
    );
    assert_eq!(ver.state_sha256, rec.state_sha256);

    let (w, h, _) = read_pgm(&out.join("images/structure.pgm")).unwrap();
    assert_eq!((w, h), (8 * 12, 4 * 12));
    assert_eq!((ver.report.image_nx, ver.report.image_ny), (w, h));
    for k in 0..2 {
        assert_eq!(
            read_pgm(&out.join(format!("images/class_{k}.pgm")))
                .unwrap()
                .0,
            w
        );
    }
    assert!(!out.join("images/class_2.pgm").exists());

    let fields = fs::read_dir(out.join("basis")).unwrap().filter(|e| {
        e.as_ref()
            .unwrap()
            .path()
            .extension()
            .is_some_and(|x| x == "field")
    });
    assert_eq!(fields.count(), 3);
    let m: fgs_core::cli::Manifest = read_json(&out.join("manifests/optimize.json")).unwrap();
    assert_eq!(m.seed, 3);
    assert_eq!(m.outputs["state.json"], rec.state_sha256);
    assert!(m.inputs.contains_key("model.json") && m.inputs.contains_key("basis/manifest.json"));

    assert_eq!(fgs(dir.path(), &["match"]), EXIT_OK);
    assert_eq!(fgs(dir.path(), &["verify"]), EXIT_OK);
    let ver: VerifyOutput = read_json(&out.join("verify.json")).unwrap();
    assert!(ver.pearson.is_some_and(f64::is_finite));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path(), &[]);
    pipeline(b.path(), &["--threads", "1"]);
    for d in [a.path(), b.path()] {
        assert_eq!(fgs(d, &["match"]), EXIT_OK);
    }
    let (ta, tb) = (tree(&a.path().join("out")), tree(&b.path().join("out")));
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (k, v) in &ta {
        assert!(v == &tb[k], "{} differs", k.display());
    }
}

#[test]
fn seed_override_changes_the_design() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path(), &[]);
    pipeline(b.path(), &["--seed", "4"]);
    let s = |d: &Path| fs::read(d.join("out/state.json")).unwrap();
    assert_ne!(s(a.path()), s(b.path()));
}

#[test]
fn missing_upstream_artifact_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cli = Cli {
        config: None,
        seed: None,
        out: Some(dir.path().to_path_buf()),
        threads: Some(1),
        command: Command::Optimize,
    };
    match fgs_core::cli::execute(&cli) {
        Err(Error::MissingArtifact(p)) => {
            assert!(p.ends_with("basis/manifest.json"), "{}", p.display())
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(fgs(dir.path(), &["optimize"]), EXIT_INVALID);
}

#[test]
fn validation_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("bad.toml"),
        "[optimize.options]\nrmin = 1.5\n",
    )
    .unwrap();
    let bad = dir.path().join("bad.toml").display().to_string();
    assert_eq!(
        run(["fgs", "prepare-basis", "--config", bad.as_str()]),
        EXIT_INVALID
    );
    assert_eq!(run(["fgs", "frobnicate"]), EXIT_INVALID);
    assert_eq!(run(["fgs", "--help"]), EXIT_OK);
    pipeline(dir.path(), &[]);
    assert_eq!(
        fgs(dir.path(), &["export", "--format", "tiff"]),
        EXIT_INVALID
    );
    // a state edited after the run no longer matches its record
    let sp = dir.path().join("out/state.json");
    let text = fs::read_to_string(&sp)
        .unwrap()
        .replacen("\"nx\"", "\"nx\" ", 1);
    fs::write(&sp, text).unwrap();
    assert_eq!(fgs(dir.path(), &["verify"]), EXIT_INVALID);
}

#[test]
fn binary_reports_missing_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_fgs"))
        .args(["train", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("dataset.csv"), "{err}");
}

#[test]
fn all_presets_prepare() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("c.toml"),
        "[basis]\nresolution = 16\nmin_feature_px = 2\n",
    )
    .unwrap();
    let c = dir.path().join("c.toml").display().to_string();
    let o = dir.path().join("o").display().to_string();
    assert_eq!(
        run([
            "fgs",
            "prepare-basis",
            "--config",
            c.as_str(),
            "--out",
            o.as_str()
        ]),
        EXIT_OK
    );
    let names: Vec<String> = fs::read_dir(dir.path().join("o/basis"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names.iter().filter(|n| n.ends_with(".field")).count(), 5);
    assert!(names.contains(&"manifest.json".to_string()));
}
