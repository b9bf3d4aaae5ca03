//! The five subcommands as library functions.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use shapepu_core::gradcheck::{standard_suite, GradCheck};
use shapepu_core::mixture::{inputs_from_probmap, labeled_counts};
use shapepu_core::phantom::oracle_posteriors;
use shapepu_core::train::{predict, HistoryRow};
use shapepu_core::{
    em_estimate, em_init, evaluate, AdamState, Checkpoint, Example, LabelMap, LossReport, Pgm,
    Phase, SegModel, Trainer,
};

use crate::config::RunConfig;
use crate::dataset::{self, Item};

fn write_config_copy(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), cfg.to_file_text())?;
    Ok(())
}

fn examples(items: &[Item]) -> Vec<Example> {
    items
        .iter()
        .map(|it| Example::new(it.id(), &it.image, it.scribble.clone(), it.mask.clone()))
        .collect()
}

fn check_classes(root: &Path, classes: usize) -> Result<()> {
    let found = dataset::class_count(root)?;
    if found != classes {
        bail!(
            "dataset at {} has {found} classes, model expects {classes}",
            root.display()
        );
    }
    Ok(())
}

pub fn cmd_gen_data(cfg: &RunConfig, root: &Path, force: bool) -> Result<usize> {
    let n = dataset::generate(cfg, root, force)?;
    log::info!("wrote {n} phantoms to {}", root.display());
    Ok(n)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlphaRow {
    pub image_id: String,
    pub estimate: Vec<f64>,
    pub truth: Vec<f64>,
    pub l1: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Mixture-ratio estimation on `split`. Posteriors come from the checkpoint,
/// from a freshly initialized model when there is none (a diagnostic of the
/// estimator under arbitrary posteriors), or from the generative model of
/// the phantoms when `oracle` is set.
pub fn cmd_estimate_alpha(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    oracle: bool,
    split: &str,
    out: &Path,
) -> Result<Vec<AlphaRow>> {
    let root = &cfg.data_root;
    let items = dataset::load_split(root, split)?;
    if items.is_empty() {
        bail!("split {split} of {} is empty", root.display());
    }
    let classes = dataset::class_count(root)?;
    let model = match (checkpoint, oracle) {
        (Some(_), true) => bail!("--oracle and --checkpoint are exclusive"),
        (Some(path), false) => Some(Checkpoint::load(path)?.model),
        (None, false) => Some(SegModel::new(classes, cfg.seed)?),
        (None, true) => None,
    };
    if let Some(m) = &model {
        check_classes(root, m.classes())?;
    }
    // the oracle needs the generator settings the data was made with
    let data_cfg = if oracle {
        Some(RunConfig::load(&root.join("config.txt"))?)
    } else {
        None
    };
    let train_cfg = cfg.train_config();
    let mut rows = Vec::with_capacity(items.len());
    for item in &items {
        let counts = labeled_counts(&item.scribble, classes);
        let probs = match (&model, &data_cfg) {
            (Some(m), _) => {
                let ex = Example::new(
                    item.id(),
                    &item.image,
                    item.scribble.clone(),
                    item.mask.clone(),
                );
                m.forward(&ex.image)?.into_data()
            }
            (None, Some(dc)) => {
                let spec = shapepu_core::PhantomSpec {
                    seed: item.seed,
                    ..dc.phantom_spec()
                };
                let prior = em_init(&counts)?;
                oracle_posteriors(&spec, item.index, &item.image, prior.as_slice())?
            }
            _ => unreachable!(),
        };
        let inputs = inputs_from_probmap(&probs, classes, &item.scribble)?;
        let est = em_estimate(&inputs, train_cfg.em_tol, train_cfg.em_max_iters)?;
        rows.push(AlphaRow {
            image_id: item.id(),
            l1: est.ratios.l1_distance(&item.true_ratios),
            estimate: est.ratios.as_slice().to_vec(),
            truth: item.true_ratios.as_slice().to_vec(),
            iterations: est.iterations,
            converged: est.converged,
        });
    }
    write_config_copy(out, cfg)?;
    let mut w = csv::Writer::from_path(out.join("alpha.csv"))?;
    let mut header = vec!["image_id".to_string()];
    header.extend((0..classes).map(|c| format!("est_alpha_{c}")));
    header.extend((0..classes).map(|c| format!("true_alpha_{c}")));
    header.extend(["l1".into(), "iterations".into(), "converged".into()]);
    w.write_record(&header)?;
    for r in &rows {
        let mut rec = vec![r.image_id.clone()];
        rec.extend(r.estimate.iter().chain(&r.truth).map(|v| format!("{v:?}")));
        rec.extend([
            format!("{:?}", r.l1),
            r.iterations.to_string(),
            r.converged.to_string(),
        ]);
        w.write_record(&rec)?;
    }
    w.flush()?;
    let mean = rows.iter().map(|r| r.l1).sum::<f64>() / rows.len() as f64;
    log::info!("mean L1 alpha error over {} images: {mean:.4}", rows.len());
    Ok(rows)
}

const RUN_FILES: [&str; 6] = [
    "config.txt",
    "history.csv",
    "timing.csv",
    "best.ckpt",
    "final.ckpt",
    "last.ckpt",
];

fn history_header(classes: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "epoch",
        "phase",
        "l_plus",
        "l_minus",
        "l_global",
        "total",
        "labeled_pixels",
        "negative_pixels",
    ]
    .map(String::from)
    .to_vec();
    h.extend((1..classes).map(|c| format!("val_dice_{c}")));
    h.push("val_mean_dice".into());
    h
}

fn history_record(row: &HistoryRow) -> Vec<String> {
    let l = &row.loss;
    let mut rec = vec![
        row.epoch.to_string(),
        row.phase.as_str().to_string(),
        format!("{:?}", l.supervised),
        format!("{:?}", l.negative),
        format!("{:?}", l.global),
        format!("{:?}", l.total),
        l.labeled_pixels.to_string(),
        l.negative_pixels.to_string(),
    ];
    rec.extend(row.val_dice.iter().map(|d| format!("{d:?}")));
    rec.push(format!("{:?}", row.val_mean_dice));
    rec
}

fn parse_history(path: &Path) -> Result<Vec<HistoryRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let f = |i: usize| -> Result<f64> {
            rec.get(i)
                .ok_or_else(|| anyhow!("short history row"))?
                .parse()
                .context("history value")
        };
        let n = rec.len();
        if n < 10 {
            bail!("history row has {n} fields");
        }
        let phase = match rec.get(1) {
            Some("warmup") => Phase::Warmup,
            Some("full") => Phase::Full,
            other => bail!("unknown phase {other:?} in history"),
        };
        rows.push(HistoryRow {
            epoch: rec.get(0).unwrap_or("").parse().context("history epoch")?,
            phase,
            loss: LossReport {
                supervised: f(2)?,
                negative: f(3)?,
                global: f(4)?,
                total: f(5)?,
                labeled_pixels: rec.get(6).unwrap_or("").parse()?,
                negative_pixels: rec.get(7).unwrap_or("").parse()?,
            },
            val_dice: (8..n - 1).map(f).collect::<Result<_>>()?,
            val_mean_dice: f(n - 1)?,
            seconds: 0.0,
        });
    }
    Ok(rows)
}

fn append_line(path: &Path, fields: &[String]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(OpenOptions::new().create(true).append(true).open(path)?);
    w.write_record(fields)?;
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub best: SegModel,
    pub best_epoch: Option<usize>,
    pub history: Vec<HistoryRow>,
}

/// Trains on the train split, validating on val after each epoch.
///
/// After every epoch the history row is appended and `last.ckpt` (with
/// optimizer state) replaced, so an interrupted run can continue with
/// `resume`. `best.ckpt` and `final.ckpt` hold plain models. `epoch` in a
/// checkpoint counts completed epochs. Wall times go to `timing.csv`, kept
/// apart so `history.csv` is reproducible byte for byte.
pub fn cmd_train(
    cfg: &RunConfig,
    run_dir: &Path,
    resume: bool,
    force: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let root = &cfg.data_root;
    let classes = cfg.phantom.classes + 1;
    check_classes(root, classes)?;
    let train = examples(&dataset::load_split(root, "train")?);
    let val = examples(&dataset::load_split(root, "val")?);
    if train.is_empty() {
        bail!("no training images under {}", root.display());
    }
    let tcfg = cfg.train_config();
    let history_path = run_dir.join("history.csv");
    let last_path = run_dir.join("last.ckpt");
    let hash = cfg.hash();

    let mut trainer = if resume {
        let saved = RunConfig::load(&run_dir.join("config.txt"))?;
        if saved.hash() != hash {
            bail!(
                "config differs from the one {} was started with",
                run_dir.display()
            );
        }
        let last = Checkpoint::load(&last_path)?;
        let optimizer = last
            .optimizer
            .ok_or_else(|| anyhow!("{} has no optimizer state", last_path.display()))?;
        let mut history = parse_history(&history_path)?;
        if history.len() < last.epoch {
            bail!(
                "history.csv has {} rows but last.ckpt is at epoch {}",
                history.len(),
                last.epoch
            );
        }
        if history.len() > last.epoch {
            // interrupted between the history append and the checkpoint write
            history.truncate(last.epoch);
            let mut w = csv::Writer::from_path(&history_path)?;
            w.write_record(history_header(classes))?;
            for row in &history {
                w.write_record(history_record(row))?;
            }
            w.flush()?;
        }
        let best_path = run_dir.join("best.ckpt");
        let best = if best_path.exists() && last.epoch > 0 {
            let b = Checkpoint::load(&best_path)?;
            Some((b.model, b.epoch.saturating_sub(1)))
        } else {
            None
        };
        log::info!("resuming {} at epoch {}", run_dir.display(), last.epoch);
        Trainer::resume(last.model, optimizer, history, best, tcfg)?
    } else {
        if run_dir.exists() && fs::read_dir(run_dir)?.next().is_some() {
            if !force {
                bail!(
                    "run directory {} is not empty; use --force or --resume",
                    run_dir.display()
                );
            }
            for f in RUN_FILES {
                let p = run_dir.join(f);
                if p.exists() {
                    fs::remove_file(&p)?;
                }
            }
        }
        write_config_copy(run_dir, cfg)?;
        let mut w = csv::Writer::from_path(&history_path)?;
        w.write_record(history_header(classes))?;
        w.flush()?;
        let mut t = csv::Writer::from_path(run_dir.join("timing.csv"))?;
        t.write_record(["epoch", "seconds"])?;
        t.flush()?;
        let model = SegModel::new(classes, cfg.seed)?;
        let trainer = Trainer::new(model, tcfg)?;
        save(
            &last_path,
            &trainer.model,
            0,
            &hash,
            Some(&trainer.optimizer),
        )?;
        trainer
    };

    while !trainer.finished() {
        let row = trainer.step(&train, &val)?.clone();
        let done = trainer.epochs_done();
        append_line(&history_path, &history_record(&row))?;
        append_line(
            &run_dir.join("timing.csv"),
            &[row.epoch.to_string(), format!("{:.3}", row.seconds)],
        )?;
        if trainer.best_epoch == Some(row.epoch) {
            save(&run_dir.join("best.ckpt"), &trainer.best, done, &hash, None)?;
        }
        save(
            &last_path,
            &trainer.model,
            done,
            &hash,
            Some(&trainer.optimizer),
        )?;
    }
    let done = trainer.epochs_done();
    if trainer.best_epoch.is_none() {
        save(&run_dir.join("best.ckpt"), &trainer.best, 0, &hash, None)?;
    }
    save(
        &run_dir.join("final.ckpt"),
        &trainer.model,
        done,
        &hash,
        None,
    )?;
    Ok(TrainOutcome {
        run_dir: run_dir.to_path_buf(),
        best: trainer.best,
        best_epoch: trainer.best_epoch,
        history: trainer.history,
    })
}

fn save(
    path: &Path,
    model: &SegModel,
    epoch: usize,
    hash: &str,
    optimizer: Option<&AdamState>,
) -> Result<()> {
    Checkpoint {
        model: model.clone(),
        epoch,
        config_hash: hash.to_string(),
        optimizer: optimizer.cloned(),
    }
    .save(path)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub image_id: String,
    pub class: usize,
    pub dice: f64,
    pub hd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub rows: Vec<EvalRow>,
    /// Mean Dice per foreground class `1..=m`.
    pub class_dice: Vec<f64>,
    /// Mean of the defined Hausdorff distances per class.
    pub class_hd: Vec<Option<f64>>,
    pub mean_dice: f64,
    pub mean_hd: Option<f64>,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Per-image, per-class metrics and their means.
pub fn summarize(
    ids: &[String],
    preds: &[LabelMap],
    truths: &[LabelMap],
    fg_classes: usize,
) -> EvalSummary {
    let mut rows = Vec::new();
    for ((id, p), t) in ids.iter().zip(preds).zip(truths) {
        let r = evaluate(p, t, fg_classes);
        for c in 0..fg_classes {
            rows.push(EvalRow {
                image_id: id.clone(),
                class: c + 1,
                dice: r.dice[c],
                hd: r.hausdorff[c],
            });
        }
    }
    let of_class = |c: usize| rows.iter().filter(move |r| r.class == c);
    let class_dice: Vec<f64> = (1..=fg_classes)
        .map(|c| of_class(c).map(|r| r.dice).sum::<f64>() / of_class(c).count().max(1) as f64)
        .collect();
    let class_hd = (1..=fg_classes)
        .map(|c| mean_defined(of_class(c).map(|r| r.hd)))
        .collect();
    let mean_dice = rows.iter().map(|r| r.dice).sum::<f64>() / rows.len().max(1) as f64;
    let mean_hd = mean_defined(rows.iter().map(|r| r.hd));
    EvalSummary {
        rows,
        class_dice,
        class_hd,
        mean_dice,
        mean_hd,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

/// Segments `split` with the checkpoint and scores it. Writes `eval.csv`
/// (one row per image and class, then `mean` rows per class and overall)
/// and `pred_<i>.pgm` label maps to `out`.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    split: &str,
    postprocess: bool,
    out: &Path,
) -> Result<EvalSummary> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let root = &cfg.data_root;
    check_classes(root, ckpt.model.classes())?;
    let items = dataset::load_split(root, split)?;
    let exs = examples(&items);
    fs::create_dir_all(out)?;
    let mut preds = Vec::with_capacity(exs.len());
    for ex in &exs {
        let p = predict(&ckpt.model, &ex.image, postprocess)?;
        Pgm::from_u8(&p).write(&out.join(format!("pred_{}.pgm", ex.id)))?;
        preds.push(p);
    }
    let ids: Vec<String> = exs.iter().map(|e| e.id.clone()).collect();
    let truths: Vec<LabelMap> = exs.iter().map(|e| e.mask.clone()).collect();
    let summary = summarize(&ids, &preds, &truths, ckpt.model.classes() - 1);
    write_config_copy(out, cfg)?;
    let mut w = csv::Writer::from_path(out.join("eval.csv"))?;
    w.write_record(["image_id", "class", "dice", "hd"])?;
    for r in &summary.rows {
        w.write_record([
            r.image_id.clone(),
            r.class.to_string(),
            format!("{:?}", r.dice),
            opt(r.hd),
        ])?;
    }
    for (c, (d, h)) in summary.class_dice.iter().zip(&summary.class_hd).enumerate() {
        w.write_record([
            "mean".into(),
            (c + 1).to_string(),
            format!("{d:?}"),
            opt(*h),
        ])?;
    }
    w.write_record([
        "mean".into(),
        "all".into(),
        format!("{:?}", summary.mean_dice),
        opt(summary.mean_hd),
    ])?;
    w.flush()?;
    log::info!(
        "{split}: mean Dice {:.4} per class {:?}, mean HD {}",
        summary.mean_dice,
        summary.class_dice,
        opt(summary.mean_hd)
    );
    Ok(summary)
}

/// Runs the finite-difference suite; `Ok(false)` when any check fails.
pub fn cmd_gradcheck(
    cfg: &RunConfig,
    fault: Option<f64>,
    out: Option<&Path>,
) -> Result<(bool, Vec<GradCheck>)> {
    let checks = standard_suite(cfg.seed, cfg.gradcheck_seeds.max(1), fault)?;
    let mut report = String::from("check,worst_rel_error,elements,status\n");
    for c in &checks {
        let status = if c.passed() { "PASS" } else { "FAIL" };
        println!(
            "{:<40} worst rel. error {:.3e}  {status}",
            c.name, c.worst_error
        );
        report.push_str(&format!(
            "\"{}\",{:e},{},{status}\n",
            c.name, c.worst_error, c.elements
        ));
    }
    if let Some(dir) = out {
        write_config_copy(dir, cfg)?;
        let mut f = fs::File::create(dir.join("gradcheck.csv"))?;
        f.write_all(report.as_bytes())?;
    }
    Ok((checks.iter().all(|c| c.passed()), checks))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ground_truth_scores_perfectly() {
        let t = LabelMap::from_fn(8, 8, |r, c| ((r / 3 + c / 3) % 4) as u8);
        let s = summarize(
            &["a".into(), "b".into()],
            &[t.clone(), t.clone()],
            &[t.clone(), t],
            3,
        );
        assert!(s.rows.iter().all(|r| r.dice == 1.0 && r.hd == Some(0.0)));
        assert_eq!(s.mean_dice, 1.0);
    }

    #[test]
    fn summary_is_the_row_mean() {
        let a = LabelMap::from_fn(6, 6, |r, _| (r % 4) as u8);
        let b = LabelMap::from_fn(6, 6, |_, c| (c % 4) as u8);
        let c = LabelMap::from_fn(6, 6, |r, c| ((r + c) % 4) as u8);
        let s = summarize(
            &["x".into(), "y".into()],
            &[a.clone(), b.clone()],
            &[c, a],
            3,
        );
        let mean = s.rows.iter().map(|r| r.dice).sum::<f64>() / s.rows.len() as f64;
        assert!((s.mean_dice - mean).abs() < 1e-9);
        for k in 1..=3 {
            let rows: Vec<f64> = s
                .rows
                .iter()
                .filter(|r| r.class == k)
                .map(|r| r.dice)
                .collect();
            assert!(
                (s.class_dice[k - 1] - rows.iter().sum::<f64>() / rows.len() as f64).abs() < 1e-9
            );
        }
    }
}
