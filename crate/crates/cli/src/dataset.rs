//! On-disk phantom dataset.
//!
//! ```text
//! <root>/config.txt            config that generated the data (with hash)
//! <root>/manifest.csv          split,index,seed,alpha_0..alpha_m
//! <root>/<split>/img_<i>.pgm   16-bit intensities, linearly mapped from [img_min, img_max]
//! <root>/<split>/msk_<i>.pgm   8-bit class ids
//! <root>/<split>/scr_<i>.pgm   8-bit class ids, 255 = unlabeled
//! <root>/<split>/meta_<i>.txt  key = value: seed, index, split, true_alpha, img_min, img_max, config_hash
//! ```
//!
//! `<i>` is the phantom index, so the splits draw disjoint phantoms from one
//! generator stream.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use shapepu_core::{generate_phantom, Grid, Image, LabelMap, MixtureRatios, Pgm, ScribbleMask};

use crate::config::RunConfig;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub index: u64,
    pub seed: u64,
    pub image: Image,
    pub mask: LabelMap,
    pub scribble: ScribbleMask,
    pub true_ratios: MixtureRatios,
}

impl Item {
    pub fn id(&self) -> String {
        format!("{}", self.index)
    }
}

/// Phantom index ranges of the three splits.
pub fn split_ranges(cfg: &RunConfig) -> [(&'static str, std::ops::Range<u64>); 3] {
    let a = cfg.train_images as u64;
    let b = a + cfg.val_images as u64;
    let c = b + cfg.test_images as u64;
    [("train", 0..a), ("val", a..b), ("test", b..c)]
}

fn quantize(image: &Image) -> (Grid<u16>, f64, f64) {
    let lo = image.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = image
        .data()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let q = image
        .data()
        .iter()
        .map(|&x| ((x - lo) / span * 65535.0).round() as u16)
        .collect();
    (
        Grid::from_vec(image.height(), image.width(), q).expect("same dims"),
        lo,
        hi,
    )
}

fn dequantize(q: &Grid<u16>, lo: f64, hi: f64) -> Image {
    let span = if hi > lo { hi - lo } else { 1.0 };
    let data = q
        .data()
        .iter()
        .map(|&v| lo + v as f64 / 65535.0 * span)
        .collect();
    Image::from_vec(q.height(), q.width(), data).expect("same dims")
}

fn is_nonempty_dir(path: &Path) -> bool {
    fs::read_dir(path)
        .map(|mut d| d.next().is_some())
        .unwrap_or(false)
}

/// Generates all splits under `root`. A non-empty `root` is refused unless
/// `force`, in which case the previous dataset files are replaced.
pub fn generate(cfg: &RunConfig, root: &Path, force: bool) -> Result<usize> {
    cfg.validate()?;
    if is_nonempty_dir(root) {
        if !force {
            bail!("{} is not empty; pass --force to overwrite", root.display());
        }
        for split in SPLITS {
            let dir = root.join(split);
            if dir.exists() {
                fs::remove_dir_all(&dir).with_context(|| format!("removing {}", dir.display()))?;
            }
        }
    }
    fs::create_dir_all(root)?;
    let spec = cfg.phantom_spec();
    let hash = cfg.hash();
    let mut manifest = csv::Writer::from_path(root.join("manifest.csv"))?;
    let mut header = vec!["split".to_string(), "index".into(), "seed".into()];
    header.extend((0..=spec.classes).map(|c| format!("alpha_{c}")));
    manifest.write_record(&header)?;
    let mut count = 0;
    for (split, range) in split_ranges(cfg) {
        let dir = root.join(split);
        fs::create_dir_all(&dir)?;
        for index in range {
            let s = generate_phantom(&spec, index)?;
            let (q, lo, hi) = quantize(&s.image);
            Pgm::from_u16(&q).write(&dir.join(format!("img_{index}.pgm")))?;
            Pgm::from_u8(&s.mask).write(&dir.join(format!("msk_{index}.pgm")))?;
            Pgm::from_u8(&s.scribble).write(&dir.join(format!("scr_{index}.pgm")))?;
            let alpha: Vec<String> = s
                .true_ratios
                .as_slice()
                .iter()
                .map(|a| format!("{a:?}"))
                .collect();
            let meta = format!(
                "seed = {}\nindex = {index}\nsplit = {split}\ntrue_alpha = {}\nimg_min = {lo:?}\nimg_max = {hi:?}\nconfig_hash = {hash}\n",
                spec.seed,
                alpha.join(",")
            );
            fs::write(dir.join(format!("meta_{index}.txt")), meta)?;
            let mut row = vec![split.to_string(), index.to_string(), spec.seed.to_string()];
            row.extend(alpha);
            manifest.write_record(&row)?;
            count += 1;
        }
    }
    manifest.flush()?;
    fs::write(root.join("config.txt"), cfg.to_file_text())?;
    Ok(count)
}

fn read_meta(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("{}: malformed line {line:?}", path.display()))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn meta_field<T: std::str::FromStr>(
    meta: &BTreeMap<String, String>,
    key: &str,
    path: &Path,
) -> Result<T> {
    meta.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| anyhow!("{}: missing or invalid {key}", path.display()))
}

/// Phantom indices listed for `split` in the manifest, in file order.
pub fn split_indices(root: &Path, split: &str) -> Result<Vec<u64>> {
    let path = root.join("manifest.csv");
    let mut reader = csv::Reader::from_path(&path)
        .with_context(|| format!("no dataset at {}", root.display()))?;
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        if rec.get(0) == Some(split) {
            out.push(rec.get(1).unwrap_or("").parse().context("manifest index")?);
        }
    }
    Ok(out)
}

pub fn load_item(root: &Path, split: &str, index: u64) -> Result<Item> {
    let dir = root.join(split);
    let file = |prefix: &str, ext: &str| -> PathBuf { dir.join(format!("{prefix}_{index}.{ext}")) };
    let meta_path = file("meta", "txt");
    let meta = read_meta(&meta_path)?;
    let lo: f64 = meta_field(&meta, "img_min", &meta_path)?;
    let hi: f64 = meta_field(&meta, "img_max", &meta_path)?;
    let seed: u64 = meta_field(&meta, "seed", &meta_path)?;
    let alpha: Vec<f64> = meta
        .get("true_alpha")
        .ok_or_else(|| anyhow!("{}: missing true_alpha", meta_path.display()))?
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("{}: true_alpha", meta_path.display()))?;
    let img = Pgm::read(&file("img", "pgm")).with_context(|| format!("image {index}"))?;
    if img.maxval != 65535 {
        bail!("image {index}: expected a 16-bit PGM");
    }
    let image = dequantize(&img.to_u16(), lo, hi);
    let mask = Pgm::read(&file("msk", "pgm"))?.to_u8()?;
    let scribble = Pgm::read(&file("scr", "pgm"))?.to_u8()?;
    if !mask.same_dims(&image) || !scribble.same_dims(&image) {
        bail!("image {index}: image, mask and scribble sizes differ");
    }
    Ok(Item {
        index,
        seed,
        image,
        mask,
        scribble,
        true_ratios: MixtureRatios::new(alpha)?,
    })
}

pub fn load_split(root: &Path, split: &str) -> Result<Vec<Item>> {
    split_indices(root, split)?
        .into_iter()
        .map(|i| load_item(root, split, i))
        .collect()
}

/// Number of classes including background, inferred from the manifest header.
pub fn class_count(root: &Path) -> Result<usize> {
    let mut reader = csv::Reader::from_path(root.join("manifest.csv"))?;
    let n = reader
        .headers()?
        .iter()
        .filter(|h| h.starts_with("alpha_"))
        .count();
    if n < 2 {
        bail!("manifest lists {n} classes");
    }
    Ok(n)
}
