use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use assaylens::imaging::RgbImage;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_assaylens"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn assaylens")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic dataset plus its database in a fresh directory.
fn calibrated(dir: &Path, extra: &[&str]) -> (PathBuf, PathBuf) {
    let ds = dir.join("ds");
    let mut args = vec![
        "synth",
        "--out",
        s(&ds),
        "--seed",
        "3",
        "--width",
        "16",
        "--height",
        "16",
        "--frames",
        "4",
    ];
    args.extend_from_slice(extra);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let db = dir.join("db.json");
    let manifest = ds.join("manifest.json");
    let o = run(&[
        "calibrate",
        "--manifest",
        s(&manifest),
        "--dilution-factor",
        "10",
        "--out",
        s(&db),
        "--created-at",
        "2026-01-01T00:00:00Z",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    (manifest, db)
}

#[test]
fn help_and_usage_errors() {
    let o = run(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("calibrate"));
    let o = run(&["analyze", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn analyze_reports_channel_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.png");
    let b = dir.path().join("b.png");
    RgbImage::filled(8, 6, [10, 40, 80])
        .unwrap()
        .save_png(&a)
        .unwrap();
    RgbImage::filled(8, 6, [20, 60, 100])
        .unwrap()
        .save_png(&b)
        .unwrap();
    let o = run(&[
        "analyze",
        s(&a),
        s(&b),
        "--roi",
        "2,1,4,4",
        "--format",
        "csv",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let row: Vec<&str> = out.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(&row[..9], ["2", "2", "1", "4", "4", "16", "15", "50", "90"]);
    assert_eq!(row[10].parse::<f64>().unwrap(), 50.0 / 90.0);
    assert_eq!(row[11].parse::<f64>().unwrap(), 155.0 / 3.0);

    let o = run(&["analyze", s(&a), "--roi", "6,0,4,4"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("ROI out of bounds"), "{}", stderr(&o));

    let big = dir.path().join("big.png");
    RgbImage::filled(4, 4, [0, 0, 0])
        .unwrap()
        .save_png(&big)
        .unwrap();
    let o = run(&["analyze", s(&a), s(&big)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn analyze_warns_on_jpeg_and_saturation() {
    let dir = tempfile::tempdir().unwrap();
    let jpg = dir.path().join("frame.jpg");
    image::RgbImage::from_pixel(8, 8, image::Rgb([255, 255, 255]))
        .save(&jpg)
        .unwrap();
    let o = bin()
        .args(["analyze", s(&jpg)])
        .env("ASSAYLENS_LOG", "debug")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("lossy"), "{err}");
    assert!(err.contains("saturated"), "{err}");
}

#[test]
fn calibrate_prints_metrics_and_rejects_duplicates() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, db) = calibrated(dir.path(), &[]);
    let text = fs::read_to_string(&db).unwrap();
    assert!(text.contains("\"format_version\": 1"));
    assert!(text.contains("fluorescein:grey"));

    let o = run(&[
        "calibrate",
        "--manifest",
        s(&manifest),
        "--dilution-factor",
        "10",
        "--out",
        s(&db),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("fluorescein:g-b"), "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(&db).unwrap(),
        text,
        "failed calibrate must not touch the database"
    );

    // a second id prefix extends the existing database
    let o = run(&[
        "calibrate",
        "--manifest",
        s(&manifest),
        "--dilution-factor",
        "10",
        "--out",
        s(&db),
        "--id",
        "second",
        "--approach",
        "grey",
        "--format",
        "csv",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("record_id,approach,unit,detection_limit"));
    let db2 = assaylens::CalibrationDatabase::load(&db).unwrap();
    assert_eq!(db2.len(), 3);
}

#[test]
fn calibrate_needs_two_points() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("one");
    let o = run(&[
        "synth",
        "--out",
        s(&ds),
        "--points",
        "1",
        "--width",
        "8",
        "--height",
        "8",
        "--frames",
        "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&[
        "calibrate",
        "--manifest",
        s(&ds.join("manifest.json")),
        "--dilution-factor",
        "10",
        "--out",
        s(&dir.path().join("db.json")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("fewer than 2 points"), "{}", stderr(&o));
}

#[test]
fn downturn_caps_the_range() {
    let dir = tempfile::tempdir().unwrap();
    let (_, db) = calibrated(
        dir.path(),
        &[
            "--plateau-below",
            "1e-8",
            "--linear-until",
            "1e-5",
            "--downturn",
            "1",
        ],
    );
    let db = assaylens::CalibrationDatabase::load(&db).unwrap();
    let rec = db.get("fluorescein:grey").unwrap();
    assert_eq!(rec.curve.sensitive_range.hi, 1e-5);
}

#[test]
fn estimate_round_trip_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, db) = calibrated(dir.path(), &[]);
    let o = run(&[
        "estimate",
        "--db",
        s(&db),
        "--manifest",
        s(&manifest),
        "--format",
        "csv",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.starts_with("source,approach,nominal,reading,normalized_reading,concentration"));
    assert_eq!(out.lines().count(), 1 + 6 * 3 * 2);

    let img = manifest.parent().unwrap().join("images/s02_g00_f000.png");
    let o = run(&[
        "estimate",
        "--db",
        s(&db),
        "--images",
        s(&img),
        "--approach",
        "grey",
        "--roi",
        "4,4,8,8",
        "--assay",
        "fluorescein",
        "--phone",
        "synthetic",
        "--led-power",
        "1",
        "--exposure-s",
        "0.1",
        "--iso",
        "100",
        "--temperature",
        "23",
        "--aperture",
        "1.8",
        "--spread",
        "0.5",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("fluorescein:grey"));

    // another phone has no calibration
    let o = run(&[
        "estimate",
        "--db",
        s(&db),
        "--manifest",
        s(&manifest),
        "--phone",
        "other",
    ]);
    assert_eq!(o.status.code(), Some(3));
    // missing context without a manifest
    let o = run(&["estimate", "--db", s(&db), "--images", s(&img)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--assay"), "{}", stderr(&o));

    // a saturated stack cannot be exposure-normalized
    let white = dir.path().join("white.png");
    RgbImage::filled(16, 16, [255, 255, 255])
        .unwrap()
        .save_png(&white)
        .unwrap();
    let o = run(&[
        "estimate",
        "--db",
        s(&db),
        "--manifest",
        s(&manifest),
        "--images",
        s(&white),
        "--approach",
        "grey",
        "--exposure-s",
        "0.2",
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("saturated"));
}

#[test]
fn malformed_database_names_position() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("db.json");
    fs::write(
        &db,
        "{\n  \"format_version\": 1,\n  \"records\": [ nope ]\n}\n",
    )
    .unwrap();
    let o = run(&["report", "--db", s(&db), "--record", "x"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("line 3"), "{err}");

    fs::write(&db, "{\"format_version\": 7, \"records\": []}").unwrap();
    let o = run(&["report", "--db", s(&db), "--record", "x"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains('7'));
}

#[test]
fn report_normalizes_and_checks_external_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (_, db) = calibrated(dir.path(), &[]);
    let ext = dir.path().join("fluorometer.csv");
    fs::write(&ext, "Concentration,Reading\n1e-9,5\n1e-8,15\n1e-7,25\n").unwrap();
    let o = run(&[
        "report",
        "--db",
        s(&db),
        "--record",
        "fluorescein:grey",
        "--external",
        s(&ext),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(
        out.lines().next(),
        Some("concentration,reading_normalized,source")
    );
    assert!(out.contains("1e-8,0.5,external:fluorometer"), "{out}");
    assert_eq!(out.lines().count(), 1 + 6 + 3);

    let o = run(&["report", "--db", s(&db), "--record", "missing"]);
    assert_eq!(o.status.code(), Some(3));

    fs::write(&ext, "concentration,reading\n1e-9,5\n1e-8,abc\n").unwrap();
    let o = run(&[
        "report",
        "--db",
        s(&db),
        "--record",
        "fluorescein:grey",
        "--external",
        s(&ext),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("row 3"), "{}", stderr(&o));

    fs::write(&ext, "conc,value\n1,2\n").unwrap();
    let o = run(&[
        "report",
        "--db",
        s(&db),
        "--record",
        "fluorescein:grey",
        "--external",
        s(&ext),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("concentration"));
}

#[test]
fn calibrate_report_matches_golden_file() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    let o = run(&[
        "synth",
        "--out",
        s(&ds),
        "--seed",
        "5",
        "--width",
        "8",
        "--height",
        "8",
        "--frames",
        "4",
    ]);
    assert!(o.status.success());
    let o = run(&[
        "calibrate",
        "--manifest",
        s(&ds.join("manifest.json")),
        "--dilution-factor",
        "10",
        "--out",
        s(&dir.path().join("db.json")),
        "--created-at",
        "2026-01-01T00:00:00Z",
        "--format",
        "csv",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/calibrate.csv");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::create_dir_all(golden.parent().unwrap()).unwrap();
        fs::write(&golden, stdout(&o)).unwrap();
    }
    assert_eq!(stdout(&o), fs::read_to_string(&golden).unwrap());
}
