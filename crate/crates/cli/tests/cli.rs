use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use assert_cmd::Command;
use serde_json::Value;

const MICRO: &str = r#"
profile = "tiny"
ray_batch = 64
train_samples = 16
eval_samples = 24
eval_rays = 256

[iters]
pretrain = 20
warmup = 3
joint = 3
qat = 2

[field]
resolution = 24
density_channels = 2
appearance_channels = 4
appearance_dim = 6
mlp_hidden = 8
mlp_layers = 2
"#;

/// Toy dataset, config, and pretrained field shared by every test.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn config(&self) -> PathBuf {
        self.root.join("micro.toml")
    }
    fn scene(&self) -> PathBuf {
        self.root.join("scene")
    }
    fn field(&self) -> PathBuf {
        self.root.join("field.ntar")
    }
}

fn nrfc() -> Command {
    let mut c = Command::cargo_bin("nrfc").unwrap();
    c.arg("--quiet");
    c
}

fn stdout_json(out: &std::process::Output) -> Value {
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(text.lines().last().expect("a result line")).unwrap()
}

fn run_ok(args: &[&str]) -> Value {
    let out = nrfc().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    stdout_json(&out)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let f = Fixture {
            root: dir.path().to_path_buf(),
            _dir: dir,
        };
        std::fs::write(f.config(), MICRO).unwrap();
        run_ok(&[
            "toy-scene",
            "--out",
            s(&f.scene()),
            "--views",
            "4",
            "--size",
            "24",
            "--samples",
            "64",
        ]);
        run_ok(&[
            "pretrain",
            "--scene",
            s(&f.scene()),
            "--out",
            s(&f.field()),
            "--config",
            s(&f.config()),
        ]);
        f
    })
}

#[test]
fn full_chain_to_rendered_images() {
    let f = fixture();
    let d = tempfile::tempdir().unwrap();
    let (model, container, decoded) = (
        d.path().join("m.ntar"),
        d.path().join("s.nrfc"),
        d.path().join("d.ntar"),
    );
    let cfg = s(&f.config()).to_string();
    let common = ["--config", cfg.as_str(), "--allow-random-backbone"];
    let log = d.path().join("log.jsonl");
    let rep = run_ok(
        &[
            &[
                "compress",
                "--scene",
                s(&f.scene()),
                "--field",
                s(&f.field()),
                "--out",
                s(&model),
                "--log",
                s(&log),
            ],
            &common[..],
        ]
        .concat(),
    );
    assert!(rep["qat"]["after"]["psnr_quantized"].is_number());
    let lines = std::fs::read_to_string(&log).unwrap();
    assert_eq!(lines.lines().count(), 3 + 3 + 2);
    let enc = run_ok(
        &[
            &["encode", "--model", s(&model), "--out", s(&container)],
            &common[..],
        ]
        .concat(),
    );
    assert_eq!(
        enc["bytes"].as_u64().unwrap(),
        std::fs::metadata(&container).unwrap().len()
    );
    run_ok(
        &[
            &["decode", "--input", s(&container), "--out", s(&decoded)],
            &common[..],
        ]
        .concat(),
    );
    let ev = run_ok(&["eval", "--input", s(&decoded), "--scene", s(&f.scene())]);
    assert!(ev["psnr"].as_f64().unwrap() > 5.0 && ev["views"] == 1);
    // rendering the container directly matches rendering the decoded archive
    let ev2 = run_ok(
        &[
            &["eval", "--input", s(&container), "--scene", s(&f.scene())],
            &common[..],
        ]
        .concat(),
    );
    assert_eq!(ev, ev2);
    let imgs = d.path().join("img");
    let r = run_ok(&[
        "render",
        "--input",
        s(&decoded),
        "--out",
        s(&imgs),
        "--views",
        "2",
        "--size",
        "16",
    ]);
    assert_eq!(r["images"].as_array().unwrap().len(), 2);
    assert!(imgs.join("view_001.png").exists());
    let b = run_ok(&[&["breakdown", "--input", s(&container)], &common[..]].concat());
    assert_eq!(
        b["container_bytes"].as_u64().unwrap(),
        enc["bytes"].as_u64().unwrap()
    );
    assert!(b["plane_ratio"].as_f64().unwrap() > 1.0);
}

#[test]
fn wrong_backbone_is_a_digest_mismatch() {
    let f = fixture();
    let d = tempfile::tempdir().unwrap();
    let cfg = s(&f.config()).to_string();
    let (model, container, other) = (
        d.path().join("m.ntar"),
        d.path().join("s.nrfc"),
        d.path().join("bb.ntar"),
    );
    let common = ["--config", cfg.as_str(), "--allow-random-backbone"];
    run_ok(
        &[
            &[
                "compress",
                "--scene",
                s(&f.scene()),
                "--field",
                s(&f.field()),
                "--out",
                s(&model),
            ],
            &common[..],
        ]
        .concat(),
    );
    run_ok(
        &[
            &["encode", "--model", s(&model), "--out", s(&container)],
            &common[..],
        ]
        .concat(),
    );
    run_ok(&[
        "init-backbone",
        "--out",
        s(&other),
        "--config",
        &cfg,
        "--seed",
        "99",
    ]);
    let out = nrfc()
        .args([
            "decode",
            "--input",
            s(&container),
            "--out",
            s(&d.path().join("x.ntar")),
            "--config",
            &cfg,
            "--backbone",
            s(&other),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    let last: Value = serde_json::from_str(err.lines().last().unwrap()).unwrap();
    assert_eq!(last["error"], "digest_mismatch");
    assert!(last["message"]
        .as_str()
        .unwrap()
        .contains("digest mismatch"));
}

#[test]
fn rd_sweep_writes_containers_and_table() {
    let f = fixture();
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("rd");
    let v = run_ok(&[
        "rd-sweep",
        "--scene",
        s(&f.scene()),
        "--field",
        s(&f.field()),
        "--out",
        s(&out),
        "--lambda",
        "1e-4,1e-3,1e-2",
        "--config",
        s(&f.config()),
        "--allow-random-backbone",
    ]);
    let containers = std::fs::read_dir(&out)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .is_some_and(|x| x == "nrfc")
        })
        .count();
    assert_eq!(containers, 3);
    let csv = std::fs::read_to_string(out.join("rd.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert!(header.contains(&"bytes") && header.contains(&"psnr") && header.contains(&"planes"));
    let bytes_col = header.iter().position(|h| *h == "bytes").unwrap();
    let bytes: Vec<u64> = lines
        .map(|l| l.split(',').nth(bytes_col).unwrap().parse().unwrap())
        .collect();
    assert_eq!(bytes.len(), 3);
    assert!(bytes.windows(2).all(|w| w[0] <= w[1]) && bytes[0] > 0);
    assert_eq!(v["rows"].as_array().unwrap().len(), 3);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = nrfc().args(["encode", "--frobnicate"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let v: Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(v["error"], "usage");
}

#[test]
fn missing_backbone_without_fallback_fails() {
    let f = fixture();
    let d = tempfile::tempdir().unwrap();
    let out = nrfc()
        .env_remove("NERFCODEC_CACHE")
        .args([
            "compress",
            "--scene",
            s(&f.scene()),
            "--field",
            s(&f.field()),
            "--out",
            s(&d.path().join("m.ntar")),
            "--config",
            s(&f.config()),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("allow-random-backbone"));
}

#[test]
fn cached_backbone_is_picked_up() {
    let f = fixture();
    let cache = tempfile::tempdir().unwrap();
    let bb = cache.path().join("backbone-tiny.ntar");
    let made = run_ok(&[
        "init-backbone",
        "--out",
        s(&bb),
        "--config",
        s(&f.config()),
        "--seed",
        "3",
    ]);
    let d = tempfile::tempdir().unwrap();
    let out = nrfc()
        .env("NERFCODEC_CACHE", cache.path())
        .args([
            "compress",
            "--scene",
            s(&f.scene()),
            "--field",
            s(&f.field()),
            "--out",
            s(&d.path().join("m.ntar")),
            "--config",
            s(&f.config()),
        ])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let enc = nrfc()
        .env("NERFCODEC_CACHE", cache.path())
        .args([
            "encode",
            "--model",
            s(&d.path().join("m.ntar")),
            "--out",
            s(&d.path().join("s.nrfc")),
            "--config",
            s(&f.config()),
        ])
        .output()
        .unwrap();
    assert!(enc.status.success());
    let dec = run_ok(&[
        "decode",
        "--input",
        s(&d.path().join("s.nrfc")),
        "--out",
        s(&d.path().join("d.ntar")),
        "--config",
        s(&f.config()),
        "--backbone",
        s(&bb),
    ]);
    assert_eq!(dec["digest"], made["digest"]);
}

#[test]
fn conformance_vectors_and_symbol_files() {
    let d = tempfile::tempdir().unwrap();
    let golden = d.path().join("golden.json");
    run_ok(&[
        "conformance",
        "generate",
        "--out",
        s(&golden),
        "--count",
        "20",
        "--seed",
        "5",
    ]);
    let v = run_ok(&["conformance", "verify", "--vectors", s(&golden)]);
    assert_eq!(
        (v["vectors"].as_u64(), v["passed"].as_u64()),
        (Some(20), Some(20))
    );

    let set: Value = serde_json::from_str(&std::fs::read_to_string(&golden).unwrap()).unwrap();
    let vec0 = &set["vectors"][3];
    let (tables, symbols) = (d.path().join("t.json"), d.path().join("s.json"));
    std::fs::write(
        &tables,
        serde_json::json!({ "tables": vec0["tables"] }).to_string(),
    )
    .unwrap();
    std::fs::write(
        &symbols,
        serde_json::json!({ "contexts": vec0["contexts"], "symbols": vec0["symbols"] }).to_string(),
    )
    .unwrap();
    let bin = d.path().join("s.bin");
    run_ok(&[
        "conformance",
        "encode",
        "--tables",
        s(&tables),
        "--symbols",
        s(&symbols),
        "--out",
        s(&bin),
    ]);
    assert_eq!(
        hex_of(&std::fs::read(&bin).unwrap()),
        vec0["bytes_hex"].as_str().unwrap()
    );
    let back = d.path().join("back.json");
    run_ok(&[
        "conformance",
        "decode",
        "--tables",
        s(&tables),
        "--contexts",
        s(&symbols),
        "--input",
        s(&bin),
        "--out",
        s(&back),
    ]);
    let decoded: Value = serde_json::from_str(&std::fs::read_to_string(&back).unwrap()).unwrap();
    assert_eq!(decoded["symbols"], vec0["symbols"]);

    // a corrupted vector fails verification with a nonzero exit
    let mut bad = set.clone();
    bad["vectors"][0]["bytes_hex"] = Value::String("00ff".into());
    std::fs::write(&golden, bad.to_string()).unwrap();
    let out = nrfc()
        .args(["conformance", "verify", "--vectors", s(&golden)])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

fn hex_of(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}
