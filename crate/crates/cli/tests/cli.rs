use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn entspec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_entspec")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = entspec(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn quick_afm(dir: &Path) -> String {
    let d = dir.to_str().unwrap().to_string();
    ok(&[
        "run",
        "--preset",
        "afm-ladder",
        "--seeds",
        "2",
        "--samples",
        "3000",
        "-o",
        &d,
    ]);
    d
}

#[test]
fn presets_list_and_print() {
    let names = ok(&["preset"]);
    for name in ["afm-ladder", "fm-ladder", "square-ring", "square-block"] {
        assert!(names.contains(name), "{names}");
        let text = ok(&["preset", name]);
        let value: toml::Table = toml::from_str(&text).unwrap();
        assert!(value.contains_key("model") && value.contains_key("sampling"), "{name}");
    }
    assert!(!entspec(&["preset", "no-such-preset"]).status.success());
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let a = quick_afm(&tmp.path().join("a"));
    let b = quick_afm(&tmp.path().join("b"));
    for file in ["rdm.bin", "spectrum.csv", "spectrum.json", "fits.json", "compare.csv"] {
        let x = fs::read(Path::new(&a).join(file)).unwrap();
        let y = fs::read(Path::new(&b).join(file)).unwrap();
        assert!(x == y, "{file} differs between identical runs");
    }
    let fits: serde_json::Value = serde_json::from_slice(&fs::read(Path::new(&a).join("fits.json")).unwrap()).unwrap();
    let first = &fits[0];
    assert_eq!(first["fit"]["kind"], "sine");
    assert!(first["result"]["params"][0]["value"].as_f64().unwrap() > 0.0);
}

#[test]
fn staged_commands_match_the_full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let full = quick_afm(&tmp.path().join("full"));
    let staged = tmp.path().join("staged");
    let s = staged.to_str().unwrap();
    let common = ["--preset", "afm-ladder", "--seeds", "2", "--samples", "3000", "-o", s];
    ok(&[&["simulate"][..], &common].concat());
    ok(&[&["spectrum"][..], &common].concat());
    for file in ["rdm.bin", "spectrum.csv"] {
        assert_eq!(
            fs::read(Path::new(&full).join(file)).unwrap(),
            fs::read(staged.join(file)).unwrap(),
            "{file}"
        );
    }
    let spectrum = staged.join("spectrum.json");
    let report = ok(&[
        "fit",
        "--kind",
        "sine",
        "--spectrum",
        spectrum.to_str().unwrap(),
        "--two-point",
    ]);
    let report: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(report["params"][0]["name"], "v");
}

#[test]
fn invalid_cut_fails_before_sampling() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(
        &cfg,
        "[model]\ngeometry = \"ladder\"\nl = 4\nj_leg = 1.0\nj_rung = 1.0\n\n[cut]\nkind = \"sites\"\nsites = [0, 9]\n\n[sampling]\nseeds = [1]\nn_samples = 100\n",
    )
    .unwrap();
    let out_dir = tmp.path().join("out");
    let out = entspec(&["run", "-c", cfg.to_str().unwrap(), "-o", out_dir.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("cut stage"), "{err}");
    assert!(!out_dir.exists());
}

#[test]
fn point_fits_from_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let pts = tmp.path().join("v.csv");
    // v_L = 2.4 + 0.8/L exactly.
    fs::write(&pts, "L,v\n8,2.5\n16,2.45\n32,2.425\n").unwrap();
    let report: serde_json::Value = serde_json::from_str(&ok(&[
        "fit",
        "--kind",
        "extrapolate",
        "--points",
        pts.to_str().unwrap(),
    ]))
    .unwrap();
    assert!((report["params"][0]["value"].as_f64().unwrap() - 2.4).abs() < 1e-12);
    assert!(!entspec(&["fit", "--kind", "extrapolate"]).status.success());
}
