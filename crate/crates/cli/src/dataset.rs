//! Materializes the configured splits and records how they were built.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use rna_core::data::synthetic::ToySpec;
use rna_core::data::{
    build_augmented_aux, make_long_tail_counts, subsample_long_tailed, write_index_list, CropRect, DatasetBundle,
    ImageSet, ImageShape, LabeledImages, LongTailSpec,
};
use rna_core::Scalar;

use crate::config::{AuxKind, ExperimentConfig, Source};

/// What was built, written to `data/manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub source: Source,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub shape: ImageShape,
    pub train_counts: Vec<usize>,
    pub id_test_size: usize,
    pub aux_kind: AuxKind,
    pub aux_size: usize,
    pub ood_tests: BTreeMap<String, usize>,
    /// SHA-256 over every split's pixels, in a fixed order, as f32 bits.
    pub content_digest: String,
}

pub struct Prepared<T> {
    pub data: DatasetBundle<T>,
    pub manifest: Manifest,
    /// Index lists to persist next to the manifest, by file name.
    pub index_lists: BTreeMap<String, Vec<usize>>,
    pub crops: Vec<(usize, CropRect)>,
}

fn long_tail(cfg: &ExperimentConfig, num_classes: usize) -> LongTailSpec {
    LongTailSpec {
        num_classes,
        max_count: cfg.dataset.max_count,
        imbalance_ratio: cfg.dataset.imbalance_ratio,
        profile: Default::default(),
        seed: cfg.dataset.seed,
    }
}

pub fn prepare<T: Scalar>(cfg: &ExperimentConfig) -> Result<Prepared<T>> {
    let (id_train, id_test, source_aux, ood_tests, class_names, mut index_lists) = match cfg.dataset.source {
        Source::Toy => toy(cfg)?,
        Source::Directory => directory(cfg)?,
    };
    let num_classes = class_names.len();
    let aux = &cfg.dataset.aux;
    let mut crops = Vec::new();
    let aux_ood = match aux.kind {
        AuxKind::None => ImageSet::empty(id_train.shape()),
        AuxKind::Source => {
            ensure!(!source_aux.is_empty(), "dataset.aux.kind is \"source\" but the source has no auxiliary images");
            if aux.size == 0 || aux.size >= source_aux.len() {
                if aux.size > source_aux.len() {
                    warn!("dataset.aux.size {} exceeds the {} available auxiliary images", aux.size, source_aux.len());
                }
                source_aux
            } else {
                let mut idx: Vec<usize> = (0..source_aux.len()).collect();
                idx.shuffle(&mut ChaCha8Rng::seed_from_u64(aux.seed));
                idx.truncate(aux.size);
                idx.sort_unstable();
                let subset = source_aux.subset(&idx);
                index_lists.insert("aux_indices.txt".into(), idx);
                subset
            }
        }
        AuxKind::Augmented => {
            let a = build_augmented_aux(&id_train, aux.crop_fraction, aux.size, aux.seed)?;
            crops = a.crops;
            a.images
        }
    };
    let data = DatasetBundle::new(num_classes, id_train, id_test, aux_ood, ood_tests)?;
    let manifest = Manifest {
        source: cfg.dataset.source,
        num_classes,
        class_names,
        shape: data.shape(),
        train_counts: data.train_counts(),
        id_test_size: data.id_test.len(),
        aux_kind: aux.kind,
        aux_size: data.aux_ood.len(),
        ood_tests: data.ood_tests.iter().map(|(k, v)| (k.clone(), v.len())).collect(),
        content_digest: content_digest(&data),
    };
    Ok(Prepared {
        data,
        manifest,
        index_lists,
        crops,
    })
}

type Splits<T> = (
    LabeledImages<T>,
    LabeledImages<T>,
    ImageSet<T>,
    BTreeMap<String, ImageSet<T>>,
    Vec<String>,
    BTreeMap<String, Vec<usize>>,
);

fn toy<T: Scalar>(cfg: &ExperimentConfig) -> Result<Splits<T>> {
    let d = &cfg.dataset;
    let t = &d.toy;
    let num_classes = d.num_classes.context("dataset.num_classes is required")?;
    let spec = ToySpec {
        num_classes,
        shape: t.shape,
        max_count: d.max_count,
        imbalance_ratio: d.imbalance_ratio,
        test_per_class: t.test_per_class,
        noise: t.noise,
        aux_families: t.aux_families.clone(),
        aux_size: if d.aux.size == 0 { 2000 } else { d.aux.size },
        test_families: t.test_families.clone(),
        test_size: t.test_size,
        seed: d.seed,
    };
    let b = spec.build::<T>()?;
    let names = (0..num_classes).map(|c| format!("class_{c}")).collect();
    Ok((b.id_train, b.id_test, b.aux_ood, b.ood_tests, names, BTreeMap::new()))
}

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).with_context(|| format!("cannot list {}", dir.display()))? {
        let p = e?.path();
        if want_dirs && p.is_dir() {
            out.push(p);
        } else if !want_dirs && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Decodes a PNG, resizes it to `shape` and maps bytes to `[-1, 1]`.
fn load_png<T: Scalar>(path: &Path, shape: ImageShape) -> Result<Vec<T>> {
    let img = image::open(path).with_context(|| format!("cannot decode {}", path.display()))?;
    let (w, h) = (shape.width as u32, shape.height as u32);
    let filter = image::imageops::FilterType::Triangle;
    let bytes: Vec<u8> = if shape.channels == 1 {
        image::imageops::resize(&img.to_luma8(), w, h, filter).into_raw()
    } else {
        image::imageops::resize(&img.to_rgb8(), w, h, filter).into_raw()
    };
    Ok(bytes.into_iter().map(|b| T::from_f64_lossy(b as f64 / 127.5 - 1.0)).collect())
}

fn load_flat<T: Scalar>(dir: &Path, shape: ImageShape) -> Result<ImageSet<T>> {
    let mut set = ImageSet::empty(shape);
    for p in sorted_entries(dir, false)? {
        set.push(&load_png::<T>(&p, shape)?);
    }
    Ok(set)
}

fn load_labeled<T: Scalar>(dir: &Path, classes: &[String], shape: ImageShape) -> Result<LabeledImages<T>> {
    let mut out = LabeledImages::empty(shape);
    for (label, name) in classes.iter().enumerate() {
        let class_dir = dir.join(name);
        ensure!(class_dir.is_dir(), "missing class folder {}", class_dir.display());
        for p in sorted_entries(&class_dir, false)? {
            out.push(&load_png::<T>(&p, shape)?, label);
        }
    }
    Ok(out)
}

fn directory<T: Scalar>(cfg: &ExperimentConfig) -> Result<Splits<T>> {
    let d = &cfg.dataset;
    let dir = d.directory.as_ref().context("dataset.directory is required")?;
    let root = &dir.root;
    let shape = dir.shape;
    let classes: Vec<String> = sorted_entries(&root.join("train"), true)?.iter().map(|p| file_name(p)).collect();
    if let Some(n) = d.num_classes {
        ensure!(n == classes.len(), "dataset.num_classes is {n} but {} has {} class folders", root.join("train").display(), classes.len());
    }
    ensure!(classes.len() >= 3, "need at least 3 class folders under {}", root.join("train").display());
    let full_train = load_labeled::<T>(&root.join("train"), &classes, shape)?;
    let counts = make_long_tail_counts(&long_tail(cfg, classes.len()))?;
    let (train_idx, id_train) = subsample_long_tailed(&full_train, &counts, d.seed)?;

    // keep the first `min` images per class so the test split is balanced
    let full_test = load_labeled::<T>(&root.join("test"), &classes, shape)?;
    let per_class = full_test.class_indices(classes.len());
    let min = per_class.iter().map(Vec::len).min().unwrap_or(0);
    ensure!(min > 0, "every class needs at least one test image");
    if per_class.iter().any(|v| v.len() != min) {
        warn!("test split is unbalanced; keeping {min} images per class");
    }
    let mut test_idx: Vec<usize> = per_class.iter().flat_map(|v| v[..min].iter().copied()).collect();
    test_idx.sort_unstable();
    let id_test = full_test.subset(&test_idx);

    let aux_dir = root.join("aux");
    let aux = if aux_dir.is_dir() { load_flat(&aux_dir, shape)? } else { ImageSet::empty(shape) };
    let mut tests = BTreeMap::new();
    let ood_root = root.join("ood");
    for p in sorted_entries(&ood_root, true)? {
        let set = load_flat::<T>(&p, shape)?;
        if set.is_empty() {
            warn!("OOD test folder {} has no PNG files; skipped", p.display());
            continue;
        }
        tests.insert(file_name(&p), set);
    }
    if tests.is_empty() {
        bail!("no OOD test sets under {}", ood_root.display());
    }
    let lists = BTreeMap::from([("train_indices.txt".to_string(), train_idx), ("test_indices.txt".to_string(), test_idx)]);
    Ok((id_train, id_test, aux, tests, classes, lists))
}

fn content_digest<T: Scalar>(data: &DatasetBundle<T>) -> String {
    let mut h = Sha256::new();
    let mut feed = |tag: &str, px: &[T]| {
        h.update(tag.as_bytes());
        h.update((px.len() as u64).to_le_bytes());
        for v in px {
            h.update((v.as_f64() as f32).to_bits().to_le_bytes());
        }
    };
    feed("id_train", data.id_train.images.pixels());
    feed("id_test", data.id_test.images.pixels());
    feed("aux", data.aux_ood.pixels());
    for (k, v) in &data.ood_tests {
        feed(k, v.pixels());
    }
    let labels: Vec<u8> = data
        .id_train
        .labels()
        .iter()
        .chain(data.id_test.labels())
        .flat_map(|&y| (y as u64).to_le_bytes())
        .collect();
    h.update(&labels);
    hex::encode(h.finalize())
}

/// Writes the manifest, index lists and crop provenance under `dir`.
pub fn write_artifacts<T>(prepared: &Prepared<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&prepared.manifest)? + "\n")?;
    for (name, idx) in &prepared.index_lists {
        write_index_list(fs::File::create(dir.join(name))?, idx)?;
    }
    if !prepared.crops.is_empty() {
        let mut w = csv::Writer::from_path(dir.join("aux_crops.csv"))?;
        w.write_record(["aux_index", "source_index", "top", "left", "height", "width"])?;
        for (i, (src, r)) in prepared.crops.iter().enumerate() {
            w.write_record([i, *src, r.top, r.left, r.height, r.width].map(|v| v.to_string()))?;
        }
        w.flush()?;
    }
    Ok(())
}

/// Fails when an existing manifest disagrees with freshly built data.
pub fn check_manifest(manifest: &Manifest, dir: &Path) -> Result<()> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Ok(());
    }
    let old: Manifest = serde_json::from_str(&fs::read_to_string(&path)?)
        .with_context(|| format!("unreadable {}", path.display()))?;
    if old.content_digest != manifest.content_digest {
        bail!(
            "dataset content changed since {} was written (digest {} vs {}); rerun with --force",
            path.display(),
            old.content_digest,
            manifest.content_digest
        );
    }
    Ok(())
}
