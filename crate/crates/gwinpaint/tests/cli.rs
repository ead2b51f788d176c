use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
pathology = "DH"
[data]
samples = 100
[codec]
steps = 10
eval_every = 5
[classifier]
steps = 10
eval_every = 5
min_accuracy = 0.0
[denoiser]
base_width = 8
[train]
max_steps = 10
eval_every = 5
[sampler]
num_inference_steps = 8
[eval]
inputs_per_cell = 1
generations = 2
"#;

fn gw(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gwinpaint"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("GWINPAINT_OUT_ROOT")
        .args(["--config", "tiny.toml"])
        .args(args)
        .output()
        .unwrap()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let t = tempfile::tempdir().unwrap();
    std::fs::write(t.path().join("tiny.toml"), TINY).unwrap();
    let p = t.path().to_path_buf();
    (t, p)
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn stages_chain_and_rerun_identically() {
    let (_t, d) = setup();
    ok(gw(&d, &["gen-data", "--n", "100", "--seed", "3", "--out", "data"]));
    ok(gw(&d, &["train-codec", "--data", "data", "--out", "codec"]));
    ok(gw(&d, &["train-classifier", "--data", "data", "--pathology", "DH", "--codec", "codec/codec.ckpt", "--out", "clf"]));
    ok(gw(&d, &["train", "--data", "data", "--pathology", "DH", "--codec", "codec/codec.ckpt", "--variant", "weighted", "--out", "w"]));
    let inpaint = |out: &str| {
        ok(gw(&d, &[
            "inpaint", "--dataset", "data", "--dataset-split", "test", "--method", "weighted", "--checkpoint", "w/model.ckpt", "--codec",
            "codec/codec.ckpt", "--steps", "8", "--seed", "5", "--out", out,
        ]))
    };
    inpaint("o1");
    inpaint("o2");
    assert_eq!(tree(&d.join("o1")), tree(&d.join("o2")));
    assert!(d.join("o1/L4-5_small/in000_g1.vol").exists());

    let o = ok(gw(&d, &["evaluate", "--outputs", "o1", "--testset", "data", "--classifier", "clf/classifier.ckpt", "--out", "ev"]));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.contains("Weighted FD") && table.contains("L5-S1"), "{table}");
    let r = ok(gw(&d, &["report", "--eval-dir", "ev"]));
    assert!(String::from_utf8(r.stdout).unwrap().contains("Small DH"));
    for f in ["data/provenance.json", "codec/provenance.json", "w/provenance.json", "o1/provenance.json", "ev/provenance.json"] {
        let text = std::fs::read_to_string(d.join(f)).unwrap();
        assert!(text.contains("config_sha256"), "{f}");
        assert!(!text.contains(d.to_str().unwrap()), "{f} leaks an absolute path");
    }

    // single-input mode
    ok(gw(&d, &[
        "inpaint", "--input", "data/images/00000.vol", "--landmark", "40,40", "--level", "L4-5", "--severity", "small", "--method", "weighted",
        "--checkpoint", "w/model.ckpt", "--codec", "codec/codec.ckpt", "--out", "single",
    ]));
    assert!(d.join("single/single/g0.vol").exists());
}

#[test]
fn exit_codes_are_categorised() {
    let (_t, d) = setup();
    std::fs::write(d.join("bad.toml"), "[train]\nmax_step = 3\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_gwinpaint"))
        .current_dir(&d)
        .args(["--config", "bad.toml", "gen-data", "--out", "x"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));

    let o = gw(&d, &["train-codec", "--data", "missing", "--out", "c"]);
    assert_eq!(o.status.code(), Some(3));

    ok(gw(&d, &["gen-data", "--out", "data"]));
    ok(gw(&d, &["train-codec", "--data", "data", "--out", "c1"]));
    ok(gw(&d, &["train", "--data", "data", "--pathology", "DH", "--codec", "c1/codec.ckpt", "--variant", "masked", "--out", "m"]));
    std::fs::write(d.join("tiny.toml"), TINY.replace("steps = 10\neval_every = 5\n[classifier]", "steps = 12\neval_every = 5\n[classifier]")).unwrap();
    ok(gw(&d, &["train-codec", "--data", "data", "--out", "c2"]));
    let args = |codec: &'static str, method: &'static str| {
        ["inpaint", "--dataset", "data", "--method", method, "--checkpoint", "m/model.ckpt", "--codec", codec, "--out", "o"]
    };
    assert_eq!(gw(&d, &args("c2/codec.ckpt", "masked")).status.code(), Some(4), "codec swap");
    assert_eq!(gw(&d, &args("c1/codec.ckpt", "weighted")).status.code(), Some(4), "method/model mismatch");
    assert_eq!(gw(&d, &["train-classifier", "--data", "data", "--pathology", "CCS", "--out", "k"]).status.code(), Some(3));
    assert_eq!(gw(&d, &["train-codec", "--data", "data", "--out", "codec", "--kind", "jpeg"]).status.code(), Some(2));
}
