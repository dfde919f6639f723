use std::path::Path;
use std::process::Command;

use maskselect::cli::run;
use maskselect::data::netpbm::read_pnm;

fn cli(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("maskselect").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

fn ok(args: &[&str]) -> String {
    let (code, out, err) = cli(args);
    assert_eq!(code, 0, "{args:?} failed: {err}");
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn end_to_end_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    let manifest = data.join("manifest.csv");
    let (masked, baseline) = (d.join("masked.ckpt"), d.join("baseline.ckpt"));

    let out = ok(&[
        "gen-data",
        "--out",
        s(&data),
        "--per-class",
        "10",
        "--seed",
        "3",
    ]);
    assert!(out.contains("wrote 40 images"), "{out}");

    let record = d.join("record.csv");
    let train_args = ["--max-epochs", "2", "--seed", "0", "--lr", "0.002"];
    ok(&[
        &[
            "train",
            "--manifest",
            s(&manifest),
            "--variant",
            "masked",
            "--lambda",
            "0.1",
            "--checkpoint",
            s(&masked),
            "--record",
            s(&record),
        ][..],
        &train_args,
    ]
    .concat());
    ok(&[
        &[
            "train",
            "--manifest",
            s(&manifest),
            "--variant",
            "baseline",
            "--checkpoint",
            s(&baseline),
        ][..],
        &train_args,
    ]
    .concat());
    assert_eq!(std::fs::read_to_string(&record).unwrap().lines().count(), 3);

    let acc: f64 = ok(&[
        "eval",
        "--checkpoint",
        s(&masked),
        "--manifest",
        s(&manifest),
    ])
    .trim()
    .parse()
    .unwrap();
    assert!((0.0..=1.0).contains(&acc));
    ok(&[
        "eval",
        "--checkpoint",
        s(&masked),
        "--manifest",
        s(&manifest),
        "--split",
        "val",
    ]);

    let csv = d.join("gauss.csv");
    let both = format!("{},{}", s(&masked), s(&baseline));
    ok(&[
        "robustness",
        "--checkpoints",
        &both,
        "--manifest",
        s(&manifest),
        "--kind",
        "gaussian",
        "--levels",
        "0,5,10,15,20,25",
        "--out",
        s(&csv),
    ]);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(
        text.lines().next(),
        Some("model,variant,noise_kind,level,seed,accuracy")
    );
    assert_eq!(text.lines().count(), 61);
    let clean = text
        .lines()
        .find(|l| l.starts_with("masked,masked,gaussian,0,"))
        .unwrap();
    assert_eq!(
        clean.rsplit(',').next().unwrap().parse::<f64>().unwrap(),
        acc
    );

    let sp = d.join("sp.csv");
    ok(&[
        "robustness",
        "--checkpoints",
        &both,
        "--manifest",
        s(&manifest),
        "--kind",
        "salt_pepper",
        "--seeds",
        "0,1",
        "--out",
        s(&sp),
    ]);
    assert_eq!(
        std::fs::read_to_string(&sp).unwrap().lines().count(),
        1 + 2 * 6 * 2
    );
    ok(&[
        "robustness",
        "--checkpoints",
        s(&masked),
        "--manifest",
        s(&manifest),
        "--noise-as-stddev",
        "--levels",
        "0,25",
        "--out",
        s(&sp),
    ]);

    let sweep = d.join("sweep.csv");
    ok(&[
        "sweep",
        "--manifest",
        s(&manifest),
        "--lrs",
        "0.001",
        "--lambdas",
        "0,0.1",
        "--seeds",
        "0",
        "--max-epochs",
        "1",
        "--out",
        s(&sweep),
    ]);
    assert_eq!(std::fs::read_to_string(&sweep).unwrap().lines().count(), 3);

    let heat = d.join("heat.pgm");
    let image = data.join("images/c1_0000.ppm");
    ok(&[
        "explain",
        "--checkpoint",
        s(&masked),
        "--image",
        s(&image),
        "--class",
        "1",
        "--out",
        s(&heat),
    ]);
    let (h, input) = (read_pnm(&heat).unwrap(), read_pnm(&image).unwrap());
    assert_eq!(
        (h.width, h.height, h.channels),
        (input.width, input.height, 1)
    );

    let report = d.join("mask.csv");
    ok(&[
        "mask-report",
        "--checkpoint",
        s(&masked),
        "--out",
        s(&report),
    ]);
    let text = std::fs::read_to_string(&report).unwrap();
    assert_eq!(text.lines().count(), 1 + 64 + 2);

    let (code, _, err) = cli(&[
        "mask-report",
        "--checkpoint",
        s(&baseline),
        "--out",
        s(&report),
    ]);
    assert_eq!(code, 2);
    assert!(err.contains("model has no mask"), "{err}");
}

#[test]
fn usage_and_runtime_exit_codes() {
    let (code, _, err) = cli(&["frobnicate"]);
    assert_eq!(code, 1);
    assert!(err.contains("Usage"), "{err}");
    assert_eq!(cli(&["eval", "--bogus"]).0, 1);
    assert_eq!(
        cli(&[
            "robustness",
            "--checkpoints",
            "a",
            "--manifest",
            "m",
            "--kind",
            "speckle",
            "--out",
            "o"
        ])
        .0,
        1
    );

    let (code, out, _) = cli(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("gen-data") && out.contains("mask-report"));

    let (code, _, err) = cli(&[
        "eval",
        "--checkpoint",
        "/nonexistent/x.ckpt",
        "--manifest",
        "/nonexistent/m.csv",
    ]);
    assert_eq!(code, 2);
    assert!(err.contains("/nonexistent/x.ckpt"), "{err}");
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_maskselect");
    assert_eq!(
        Command::new(bin)
            .arg("--version")
            .output()
            .unwrap()
            .status
            .code(),
        Some(0)
    );
    let bad = Command::new(bin).arg("nope").output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
    assert!(!bad.stderr.is_empty());
    let missing = Command::new(bin)
        .args(["mask-report", "--checkpoint", "/nonexistent", "--out", "x"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));
}
