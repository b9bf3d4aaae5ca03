//! End-to-end behaviour of the command-line tool on small datasets.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;

use shapepu_cli::dataset::load_split;
use shapepu_cli::{
    cmd_estimate_alpha, cmd_gen_data, cmd_train, run, RunConfig, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE,
    EXIT_VERIFY,
};
use shapepu_core::{Checkpoint, Example, Pgm, SegModel, Trainer};

const SMALL: &str =
    "size = 48\ntrain_images = 4\nval_images = 2\ntest_images = 3\nepochs = 2\nwarmup_epochs = 1\n\
                     batch_size = 2\nsquare_size = 8\nlearning_rate = 0.001\ngradcheck_seeds = 2";

fn small(root: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_text(SMALL).unwrap();
    cfg.data_root = root.join("data");
    cfg.run_dir = root.join("run");
    cfg
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn args(list: &[&str]) -> Vec<String> {
    std::iter::once("shapepu")
        .chain(list.iter().copied())
        .map(String::from)
        .collect()
}

#[test]
fn gen_data_is_deterministic_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let cfg = small(dir.path());
    assert_eq!(cmd_gen_data(&cfg, &a, false).unwrap(), 9);
    cmd_gen_data(&cfg, &b, false).unwrap();
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta, tb);
    // config, manifest, and image/mask/scribble/meta per phantom
    assert_eq!(ta.len(), 2 + 9 * 4);
    assert!(ta.contains_key("test/img_8.pgm"));
}

#[test]
fn default_split_sizes_and_size_flag() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("d");
    let code = run(args(&[
        "gen-data",
        "--size",
        "64",
        "--out",
        root.to_str().unwrap(),
    ]));
    assert_eq!(code, EXIT_OK);
    let files = tree(&root);
    for (split, n) in [("train", 40), ("val", 10), ("test", 15)] {
        for prefix in ["img", "msk", "scr", "meta"] {
            let count = files
                .keys()
                .filter(|k| k.starts_with(&format!("{split}/{prefix}_")))
                .count();
            assert_eq!(count, n, "{split}/{prefix}");
        }
    }
    let img = Pgm::read(&root.join("train/img_0.pgm")).unwrap();
    assert_eq!((img.width, img.height, img.maxval), (64, 64, 65535));
    let msk = Pgm::read(&root.join("val/msk_40.pgm")).unwrap();
    assert_eq!((msk.width, msk.height, msk.maxval), (64, 64, 255));

    // a second run without --force refuses to overwrite
    let again = run(args(&[
        "gen-data",
        "--size",
        "64",
        "--out",
        root.to_str().unwrap(),
    ]));
    assert_eq!(again, EXIT_RUNTIME);
}

#[test]
fn alpha_estimates_cover_the_split_and_stay_on_the_simplex() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    cmd_gen_data(&cfg, &cfg.data_root, false).unwrap();

    let out = dir.path().join("alpha");
    let rows = cmd_estimate_alpha(&cfg, None, false, "test", &out).unwrap();
    assert_eq!(rows.len(), 3);
    for r in &rows {
        assert!((r.estimate.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(r.estimate.iter().all(|&a| (0.0..=1.0).contains(&a)));
        assert!(r.iterations <= 100);
    }
    let text = fs::read_to_string(out.join("alpha.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + rows.len());
    assert!(out.join("config.txt").exists());
}

#[test]
fn oracle_posteriors_recover_the_true_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.test_images = 15;
    cmd_gen_data(&cfg, &cfg.data_root, false).unwrap();
    let rows = cmd_estimate_alpha(&cfg, None, true, "test", &dir.path().join("alpha")).unwrap();
    let mean = rows.iter().map(|r| r.l1).sum::<f64>() / rows.len() as f64;
    assert!(mean <= 0.04, "mean L1 {mean}");
    assert!(rows.iter().all(|r| r.converged));
}

#[test]
fn training_writes_a_resumable_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    cmd_gen_data(&cfg, &cfg.data_root, false).unwrap();
    let out = cmd_train(&cfg, &cfg.run_dir, false, false).unwrap();
    assert_eq!(out.history.len(), 2);
    for f in [
        "config.txt",
        "history.csv",
        "timing.csv",
        "best.ckpt",
        "final.ckpt",
        "last.ckpt",
    ] {
        assert!(cfg.run_dir.join(f).exists(), "{f}");
    }
    let last = Checkpoint::load(&cfg.run_dir.join("last.ckpt")).unwrap();
    assert_eq!(last.epoch, 2);
    assert!(last.optimizer.is_some());
    assert_eq!(last.config_hash, cfg.hash());

    // an existing run needs --resume or --force, and resuming needs the same config
    assert!(cmd_train(&cfg, &cfg.run_dir, false, false).is_err());
    let mut longer = cfg.clone();
    longer.train.epochs = 3;
    assert!(cmd_train(&longer, &cfg.run_dir, true, false).is_err());

    // interrupt a copy of the run after its first epoch: last.ckpt rolled
    // back, history.csv already holding the second row
    let copy = dir.path().join("interrupted");
    fs::create_dir_all(&copy).unwrap();
    for (name, bytes) in tree(&cfg.run_dir) {
        fs::write(copy.join(name), bytes).unwrap();
    }
    let to_examples = |split: &str| -> Vec<Example> {
        load_split(&cfg.data_root, split)
            .unwrap()
            .iter()
            .map(|i| Example::new(i.id(), &i.image, i.scribble.clone(), i.mask.clone()))
            .collect()
    };
    let (train, val) = (to_examples("train"), to_examples("val"));
    let mut trainer =
        Trainer::new(SegModel::new(4, cfg.seed).unwrap(), cfg.train_config()).unwrap();
    trainer.step(&train, &val).unwrap();
    Checkpoint {
        model: trainer.model.clone(),
        epoch: 1,
        config_hash: cfg.hash(),
        optimizer: Some(trainer.optimizer.clone()),
    }
    .save(&copy.join("last.ckpt"))
    .unwrap();
    cmd_train(&cfg, &copy, true, false).unwrap();
    for f in ["history.csv", "final.ckpt", "last.ckpt"] {
        assert_eq!(
            fs::read(copy.join(f)).unwrap(),
            fs::read(cfg.run_dir.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn eval_reports_through_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("small.conf");
    fs::write(&cfg_path, SMALL).unwrap();
    let data = dir.path().join("data");
    let runs = dir.path().join("run");
    let data_kv = format!("data_root={}", data.display());
    let common = |rest: &[&str]| {
        let mut v = vec!["--config", cfg_path.to_str().unwrap(), "--set", &data_kv];
        v.extend_from_slice(rest);
        args(&v)
    };
    assert_eq!(run(common(&["gen-data"])), EXIT_OK);
    assert_eq!(
        run(common(&[
            "train",
            "--ablation",
            "l+",
            "--out",
            runs.to_str().unwrap()
        ])),
        EXIT_OK
    );
    let ckpt = runs.join("best.ckpt");
    let eval = dir.path().join("eval");
    assert_eq!(
        run(common(&[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--out",
            eval.to_str().unwrap()
        ])),
        EXIT_OK
    );
    let text = fs::read_to_string(eval.join("eval.csv")).unwrap();
    assert!(text.lines().any(|l| l.starts_with("mean,all")));
    assert!(eval.join("pred_6.pgm").exists());

    assert_eq!(
        run(common(&["train", "--ablation", "nonsense"])),
        EXIT_USAGE
    );
    assert_eq!(
        run(common(&["eval", "--checkpoint", "/nonexistent.ckpt"])),
        EXIT_RUNTIME
    );
}

#[test]
fn gradcheck_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gc");
    let ok = run(args(&[
        "--set",
        "gradcheck_seeds=2",
        "gradcheck",
        "--out",
        out.to_str().unwrap(),
    ]));
    assert_eq!(ok, EXIT_OK);
    assert!(fs::read_to_string(out.join("gradcheck.csv"))
        .unwrap()
        .contains("PASS"));
    for seed in ["1", "77"] {
        assert_eq!(
            run(args(&[
                "--seed",
                seed,
                "--set",
                "gradcheck_seeds=2",
                "gradcheck"
            ])),
            EXIT_OK
        );
    }
    assert_eq!(
        run(args(&[
            "--set",
            "gradcheck_seeds=2",
            "gradcheck",
            "--inject-fault"
        ])),
        EXIT_VERIFY
    );
    assert_eq!(run(args(&["no-such-command"])), EXIT_USAGE);
    assert_eq!(
        run(args(&["--set", "no_such_key=1", "gradcheck"])),
        EXIT_USAGE
    );
}

#[test]
fn binary_reports_usage_errors() {
    let status = Command::new(env!("CARGO_BIN_EXE_shapepu"))
        .arg("--bogus")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(EXIT_USAGE));
    let help = Command::new(env!("CARGO_BIN_EXE_shapepu"))
        .arg("--help")
        .output()
        .unwrap();
    assert!(help.status.success());
    assert!(String::from_utf8_lossy(&help.stdout).contains("gen-data"));
}
