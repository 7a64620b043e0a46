use std::fs;
use std::path::Path;
use std::process::Command;

use vialflow::dataset::{Manifest, SampleRecord};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vialflow"))
}

fn run(args: &[&str]) -> (i32, String, String) {
    let out = bin().args(args).output().unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn field(text: &str, name: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{name}\t")))
        .unwrap_or_else(|| panic!("no {name} in {text}"))
        .split('\t')
        .next()
        .unwrap()
        .to_string()
}

#[test]
fn physics_reports_flip_reynolds_number() {
    let (code, out, _) = run(&["physics", "--eta", "1e-3", "--rho", "900", "--radius", "7.5e-3", "--t-flip", "2"]);
    assert_eq!(code, 0);
    let re: f64 = field(&out, "Re_flip").parse().unwrap();
    assert_eq!(format!("{re:.1}"), "25.3");
    let (_, out, _) = run(&["physics", "--eta", "100", "--rho", "900"]);
    assert_eq!(field(&out, "initial_regime"), "TaylorDrop");
}

#[test]
fn physics_optional_numbers() {
    let (code, out, _) = run(&[
        "physics", "--eta", "1", "--rho", "1000", "--tau", "0.2", "--sigma-crit", "476", "--sigma-flow", "70",
        "--u-measured", "1e-3",
    ]);
    assert_eq!(code, 0);
    let de: f64 = field(&out, "De").parse().unwrap();
    assert!((de - 0.1).abs() < 1e-12);
    let a: f64 = field(&out, "stress_amplitude").parse().unwrap();
    assert!((a - 70.0 / 476.0).abs() < 1e-4);
    let re: f64 = field(&out, "Re_exp").parse().unwrap();
    assert!((re - 1000.0 * 1e-3 * 7.5e-3).abs() < 1e-6);
}

#[test]
fn exit_codes() {
    let (code, _, err) = run(&["physics", "--rho", "900"]);
    assert_eq!(code, 2);
    assert!(err.contains("Usage"));
    let (code, _, err) = run(&["physics", "--eta", "-1", "--rho", "900"]);
    assert_eq!(code, 1);
    assert!(err.contains("viscosity"));
    let (code, _, _) = run(&["--set", "nonsense=1", "physics", "--eta", "1", "--rho", "1"]);
    assert_eq!(code, 2);
    let (code, _, _) = run(&["frobnicate"]);
    assert_eq!(code, 2);
    let (code, _, _) = run(&["infer", "--model", "/nonexistent.ckpt", "--sample", "x", "--density", "1000"]);
    assert_eq!(code, 1);
}

#[test]
fn help_lists_every_configuration_key() {
    let (code, out, _) = run(&["--help"]);
    assert_eq!(code, 0);
    for k in vialflow::config::keys() {
        let line = out.lines().find(|l| l.trim_start().starts_with(k.name)).unwrap_or_else(|| panic!("{}", k.name));
        assert!(line.contains("default"), "{line}");
        assert!(line.contains('['), "{line}");
    }
    for sub in ["physics", "simulate", "split", "train", "infer", "evaluate"] {
        let (code, out, _) = run(&[sub, "--help"]);
        assert_eq!(code, 0, "{sub}");
        assert!(out.contains("Usage"));
    }
}

fn fake_manifest(dir: &Path, groups: usize, per: usize) -> std::path::PathBuf {
    let mut recs = Vec::new();
    for g in 0..groups {
        for k in 0..per {
            recs.push(SampleRecord {
                sample_id: format!("g{g:03}_{k}"),
                true_viscosity: 10f64.powf(-2.0 + 5.0 * g as f64 / (groups - 1) as f64),
                density: 1000.0,
                protocol_hash: "0".into(),
                tensor_path: format!("samples/g{g:03}_{k}.bin").into(),
                group_id: format!("g{g:03}"),
            });
        }
    }
    let m = Manifest::new(recs, dir.to_path_buf()).unwrap();
    let p = dir.join("manifest.tsv");
    m.write(&p).unwrap();
    p
}

#[test]
fn split_modes() {
    let dir = tempfile::tempdir().unwrap();
    let p = fake_manifest(dir.path(), 5, 10);
    let (code, out, err) = run(&["split", "--manifest", p.to_str().unwrap(), "--mode", "aleatoric", "--seed", "7"]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("train 40 samples"), "{out}");
    let train = Manifest::read(&dir.path().join("train.tsv")).unwrap();
    let test = Manifest::read(&dir.path().join("test.tsv")).unwrap();
    for (_, recs) in test.groups() {
        assert_eq!(recs.len(), 2);
    }
    for (_, recs) in train.groups() {
        assert_eq!(recs.len(), 8);
    }

    let d2 = tempfile::tempdir().unwrap();
    let p = fake_manifest(d2.path(), 96, 1);
    let out_dir = d2.path().join("split");
    let (code, _, err) = run(&[
        "split", "--manifest", p.to_str().unwrap(), "--mode", "epistemic", "--holdout", "13", "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    let test = Manifest::read(&out_dir.join("test.tsv")).unwrap();
    let train = Manifest::read(&out_dir.join("train.tsv")).unwrap();
    assert_eq!(test.groups().len(), 13);
    assert_eq!(train.groups().len(), 83);
    // Tensor paths still resolve to the original directory.
    assert_eq!(train.resolve(&train.records[0]).parent().unwrap(), d2.path().canonicalize().unwrap().join("samples"));
    let (code, _, _) = run(&["split", "--manifest", p.to_str().unwrap(), "--mode", "epistemic", "--holdout", "94"]);
    assert_eq!(code, 1);
}

#[test]
fn simulate_counts_and_reproducibility() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let sim = |d: &Path, jobs: &str| {
        run(&[
            "simulate", "--out", d.to_str().unwrap(), "--viscosities", "logspace:1e-2:1e3:24", "--n-per-group", "8",
            "--seed", "11", "--jobs", jobs,
        ])
    };
    let (code, out, err) = sim(a.path(), "1");
    assert_eq!(code, 0, "{err}");
    assert!(out.starts_with("192 samples in 24 groups"), "{out}");
    assert_eq!(sim(b.path(), "2").0, 0);
    let ma = fs::read_to_string(a.path().join("manifest.tsv")).unwrap();
    let mb = fs::read_to_string(b.path().join("manifest.tsv")).unwrap();
    assert_eq!(ma, mb);
    let m = Manifest::read(&a.path().join("manifest.tsv")).unwrap();
    assert_eq!(m.records.len(), 192);
    for r in m.records.iter().step_by(37) {
        assert_eq!(fs::read(a.path().join(&r.tensor_path)).unwrap(), fs::read(b.path().join(&r.tensor_path)).unwrap());
    }
    let (code, _, _) = run(&["simulate", "--out", a.path().to_str().unwrap(), "--n-per-group", "0"]);
    assert_eq!(code, 1);
}

#[test]
fn train_infer_evaluate_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("run.cfg");
    fs::write(
        &cfg,
        "# short observation window and a narrow network\n\
         t_obs = 10\n\
         arch.frames = 12\n\
         arch.conv_channels = 2, 4\n\
         arch.projection = 8\n\
         arch.hidden = 6\n\
         arch.attention = 6\n\
         arch.head_hidden = 8\n\
         train.max_epochs = 3\n\
         train.batch_size = 4\n",
    )
    .unwrap();
    let c = cfg.to_str().unwrap();
    let data = d.join("data");
    let (code, _, err) = run(&[
        "--config", c, "simulate", "--out", data.to_str().unwrap(), "--viscosities", "0.05,5,500", "--n-per-group", "5",
    ]);
    assert_eq!(code, 0, "{err}");
    let manifest = data.join("manifest.tsv");
    let (code, _, err) = run(&["--config", c, "split", "--manifest", manifest.to_str().unwrap(), "--seed", "1"]);
    assert_eq!(code, 0, "{err}");
    let ckpt = d.join("m.ckpt");
    let train_args = |out: &Path| {
        run(&[
            "--config", c, "train", "--manifest", data.join("train.tsv").to_str().unwrap(), "--out", out.to_str().unwrap(),
            "--seed", "3",
        ])
    };
    let (code, out, err) = train_args(&ckpt);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("trained 3 epochs"), "{out}");
    let hist = fs::read_to_string(d.join("m.ckpt.history.tsv")).unwrap();
    assert_eq!(hist.lines().count(), 4);
    let ckpt2 = d.join("m2.ckpt");
    assert_eq!(train_args(&ckpt2).0, 0);
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(&ckpt2).unwrap());

    let test = Manifest::read(&data.join("test.tsv")).unwrap();
    let sample = test.resolve(&test.records[0]);
    let infer = |extra: &[&str]| {
        let mut args = vec!["--config", c];
        args.extend_from_slice(extra);
        args.extend_from_slice(&[
            "infer", "--model", ckpt.to_str().unwrap(), "--sample", sample.to_str().unwrap(), "--density", "1000",
        ]);
        run(&args)
    };
    let (code, out, err) = infer(&[]);
    assert_eq!(code, 0, "{err}");
    let nums: Vec<f64> = out.split_whitespace().map(|s| s.parse().unwrap()).collect();
    assert_eq!(nums.len(), 2);
    assert!(nums[0] > 0.0 && nums[1] > 0.0);
    assert_eq!(infer(&[]).1, out);
    let (_, still, _) = infer(&["--set", "augment.max_shift=0", "--set", "augment.max_rotation=0"]);
    let nums: Vec<f64> = still.split_whitespace().map(|s| s.parse().unwrap()).collect();
    assert_eq!(nums[1], 0.0);

    let report = d.join("report");
    let (code, out, err) = run(&[
        "--config", c, "evaluate", "--model", ckpt.to_str().unwrap(), "--manifest", data.join("test.tsv").to_str().unwrap(),
        "--train", data.join("train.tsv").to_str().unwrap(), "--out", report.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("samples=3"), "{out}");
    for f in ["residuals.tsv", "pairs.tsv", "groups.tsv", "summary.txt", "run_manifest.txt"] {
        assert!(report.join(f).exists(), "{f}");
    }
    let run_manifest = fs::read_to_string(report.join("run_manifest.txt")).unwrap();
    assert!(run_manifest.contains("model.train_seed=3"));
    assert!(run_manifest.contains("data.seed="));

    // Evaluating on the training set against itself trips the leakage guard.
    let (code, _, err) = run(&[
        "--config", c, "evaluate", "--model", ckpt.to_str().unwrap(), "--manifest", data.join("train.tsv").to_str().unwrap(),
        "--train", data.join("train.tsv").to_str().unwrap(), "--out", report.to_str().unwrap(),
    ]);
    assert_eq!(code, 1);
    assert!(err.contains("share"), "{err}");
}
