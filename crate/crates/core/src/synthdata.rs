//! Procedural segmentation scenes, disjoint dataset splits and
//! class-balanced labeled subsets.
//!
//! A scene is a textured background (class 0) with randomly placed shapes,
//! one geometric kind per class. The label mask records the topmost shape at
//! each pixel and a border ring is labeled [`IGNORE`].

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmodel::{Image, LabelMask, IGNORE, MIN_SIDE};
use crate::tensor::segt::SegtArray;
use crate::tensor::{Rng, Tensor};

const MAX_PRESENCE_RETRIES: usize = 2000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Inclusive range of instances placed for each class that appears.
    pub shapes_per_class: (usize, usize),
    /// Probability that shape class `c` (1-based) appears in an image;
    /// entry `c - 1`. Background is always present.
    pub appearance: Vec<f64>,
    /// Standard deviation of the additive pixel noise. Texture and
    /// per-image colour jitter scale with it too.
    pub noise: f32,
    /// Width of the IGNORE ring along the image border.
    pub border: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            num_classes: 6,
            shapes_per_class: (1, 2),
            appearance: vec![0.9, 0.7, 0.5, 0.35, 0.2],
            noise: 0.12,
            border: 2,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > IGNORE as usize {
            return Err(Error::invalid(format!("num_classes {} outside [2, 255)", self.num_classes)));
        }
        if self.height < MIN_SIDE || self.width < MIN_SIDE {
            return Err(Error::invalid(format!(
                "scene size {}x{} below {MIN_SIDE}",
                self.height, self.width
            )));
        }
        if self.appearance.len() != self.num_classes - 1 {
            return Err(Error::invalid(format!(
                "{} appearance probabilities for {} shape classes",
                self.appearance.len(),
                self.num_classes - 1
            )));
        }
        if let Some(p) = self.appearance.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
            return Err(Error::invalid(format!("appearance probability {p} outside (0, 1]")));
        }
        let (lo, hi) = self.shapes_per_class;
        if lo == 0 || lo > hi {
            return Err(Error::invalid(format!("shapes per class range ({lo}, {hi}) is empty")));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid(format!("noise amplitude {}", self.noise)));
        }
        if 2 * self.border >= self.height.min(self.width) {
            return Err(Error::invalid(format!("border {} leaves no interior", self.border)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ShapeKind {
    Rectangle,
    Disk,
    Triangle,
    Stripe,
    Ring,
}

fn shape_kind(class: usize) -> ShapeKind {
    match (class - 1) % 5 {
        0 => ShapeKind::Rectangle,
        1 => ShapeKind::Disk,
        2 => ShapeKind::Triangle,
        3 => ShapeKind::Stripe,
        _ => ShapeKind::Ring,
    }
}

/// Base RGB colour of a class, spread around the hue circle.
pub fn class_color(class: usize) -> [f32; 3] {
    if class == 0 {
        return [0.45, 0.45, 0.45];
    }
    let phase = class as f64 * 0.618_033_988_749_895;
    let mut rgb = [0.0f32; 3];
    for (k, v) in rgb.iter_mut().enumerate() {
        *v = (0.5 + 0.3 * (2.0 * PI * (phase + k as f64 / 3.0)).cos()) as f32;
    }
    rgb
}

struct Shape {
    class: u8,
    kind: ShapeKind,
    cy: f64,
    cx: f64,
    /// Kind-specific sizes.
    a: f64,
    b: f64,
    angle: f64,
}

impl Shape {
    fn sample(class: usize, h: usize, w: usize, rng: &mut Rng) -> Shape {
        let kind = shape_kind(class);
        let area = rng.range_f64(0.03, 0.07) * (h * w) as f64;
        let (a, b) = match kind {
            ShapeKind::Rectangle => {
                let aspect = rng.range_f64(0.5, 2.0);
                let half_w = (area * aspect).sqrt() / 2.0;
                (half_w, area / (4.0 * half_w))
            }
            ShapeKind::Disk => ((area / PI).sqrt(), 0.0),
            ShapeKind::Triangle => ((2.0 * area).sqrt(), 0.0),
            ShapeKind::Stripe => {
                let len = 0.6 * h.min(w) as f64;
                (len / 2.0, area / (2.0 * len))
            }
            ShapeKind::Ring => {
                let outer = (area / (0.64 * PI)).sqrt();
                (outer, 0.6 * outer)
            }
        };
        Shape {
            class: class as u8,
            kind,
            cy: rng.range_f64(0.0, h as f64),
            cx: rng.range_f64(0.0, w as f64),
            a,
            b,
            angle: rng.range_f64(0.0, PI),
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        match self.kind {
            ShapeKind::Rectangle => dx.abs() <= self.a && dy.abs() <= self.b,
            ShapeKind::Disk => dx * dx + dy * dy <= self.a * self.a,
            ShapeKind::Triangle => {
                // Apex up, base `a` wide and `a` tall, centred on (cy, cx).
                let t = (dy + self.a / 2.0) / self.a;
                (0.0..=1.0).contains(&t) && dx.abs() <= t * self.a / 2.0
            }
            ShapeKind::Stripe => {
                let (s, c) = self.angle.sin_cos();
                let along = dx * c + dy * s;
                let across = -dx * s + dy * c;
                along.abs() <= self.a && across.abs() <= self.b
            }
            ShapeKind::Ring => {
                let r2 = dx * dx + dy * dy;
                r2 <= self.a * self.a && r2 >= self.b * self.b
            }
        }
    }
}

/// Draws one scene.
pub fn generate_scene(cfg: &SceneConfig, rng: &mut Rng) -> Result<(Image, LabelMask)> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut shapes = Vec::new();
    for class in 1..cfg.num_classes {
        if rng.bernoulli(cfg.appearance[class - 1]) {
            let n = rng.range_usize(cfg.shapes_per_class.0, cfg.shapes_per_class.1);
            for _ in 0..n {
                shapes.push(Shape::sample(class, h, w, rng));
            }
        }
    }
    rng.shuffle(&mut shapes);

    let mut labels = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            if let Some(s) = shapes.iter().rev().find(|s| s.contains(py, px)) {
                labels[y * w + x] = s.class;
            }
        }
    }

    let noise = cfg.noise as f64;
    let jitter: Vec<[f64; 3]> = (0..cfg.num_classes)
        .map(|_| [rng.normal(), rng.normal(), rng.normal()])
        .collect();
    let freq = [rng.range_f64(0.1, 0.4), rng.range_f64(0.1, 0.4)];
    let phase = [rng.range_f64(0.0, 2.0 * PI), rng.range_f64(0.0, 2.0 * PI)];
    let mut pixels = vec![0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let class = labels[i] as usize;
            let base = class_color(class);
            let texture = (freq[0] * y as f64 + phase[0]).sin() * (freq[1] * x as f64 + phase[1]).cos();
            for (k, &b) in base.iter().enumerate() {
                let v = b as f64 + noise * (0.5 * jitter[class][k] + texture + rng.normal());
                pixels[k * h * w + i] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }

    for y in 0..h {
        for x in 0..w {
            let inside = y >= cfg.border && y < h - cfg.border && x >= cfg.border && x < w - cfg.border;
            if !inside {
                labels[y * w + x] = IGNORE;
            }
        }
    }
    Ok((
        Image::new(Tensor::new(vec![3, h, w], pixels)?)?,
        LabelMask::new(h, w, labels)?,
    ))
}

/// Requested size of every split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub labeled: usize,
    pub unlabeled: usize,
    pub quality: usize,
    pub validation: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            labeled: 40,
            unlabeled: 120,
            quality: 20,
            validation: 40,
        }
    }
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.labeled + self.unlabeled + self.quality + self.validation
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Labeled,
    Unlabeled,
    Quality,
    Validation,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Labeled, Role::Unlabeled, Role::Quality, Role::Validation];
}

/// Sample ids of every split.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub quality: Vec<usize>,
    pub validation: Vec<usize>,
}

impl DatasetSplit {
    pub fn ids(&self, role: Role) -> &[usize] {
        match role {
            Role::Labeled => &self.labeled,
            Role::Unlabeled => &self.unlabeled,
            Role::Quality => &self.quality,
            Role::Validation => &self.validation,
        }
    }

    pub fn is_disjoint(&self) -> bool {
        let mut seen = BTreeSet::new();
        Role::ALL.iter().flat_map(|&r| self.ids(r)).all(|id| seen.insert(*id))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub image: Image,
    pub label: LabelMask,
}

/// Images of the unlabeled split. Deliberately has no way to reach labels.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledSet {
    ids: Vec<usize>,
    images: Vec<Image>,
}

impl UnlabeledSet {
    pub fn new(ids: Vec<usize>, images: Vec<Image>) -> Result<Self> {
        if ids.len() != images.len() {
            return Err(Error::shape(format!("{} ids for {} images", ids.len(), images.len())));
        }
        Ok(Self { ids, images })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Ground truth of the unlabeled split, released only to evaluation code
/// and logged on every release.
#[derive(Debug)]
pub struct HeldOutTruth {
    labels: Vec<LabelMask>,
    log: Mutex<Vec<String>>,
}

impl Clone for HeldOutTruth {
    fn clone(&self) -> Self {
        Self {
            labels: self.labels.clone(),
            log: Mutex::new(self.access_log()),
        }
    }
}

impl PartialEq for HeldOutTruth {
    fn eq(&self, other: &Self) -> bool {
        self.labels == other.labels
    }
}

impl HeldOutTruth {
    pub fn new(labels: Vec<LabelMask>) -> Self {
        Self {
            labels,
            log: Mutex::new(Vec::new()),
        }
    }

    /// Releases the labels for an evaluation phase; `phase` is recorded.
    pub fn for_evaluation(&self, phase: &str) -> &[LabelMask] {
        self.log
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(format!("evaluation:{phase}"));
        &self.labels
    }

    /// Releases the labels to build the ground-truth-filtered upper-bound
    /// arm; recorded as such.
    pub fn for_oracle_arm(&self) -> &[LabelMask] {
        self.log
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push("oracle-arm".to_string());
        &self.labels
    }

    pub fn access_log(&self) -> Vec<String> {
        self.log.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// An in-memory dataset with all four splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub scene: SceneConfig,
    pub split: DatasetSplit,
    pub labeled: Vec<Sample>,
    pub quality: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub unlabeled: UnlabeledSet,
    pub unlabeled_truth: HeldOutTruth,
}

fn presence(labels: &[&LabelMask], num_classes: usize) -> Vec<bool> {
    let mut seen = vec![false; num_classes];
    for m in labels {
        for &v in m.data() {
            if (v as usize) < num_classes {
                seen[v as usize] = true;
            }
        }
    }
    seen
}

fn scene_for(cfg: &SceneConfig, id: usize, attempt: usize) -> Result<(Image, LabelMask)> {
    let mut rng = Rng::stream(cfg.seed, ((attempt as u64) << 32) | id as u64);
    generate_scene(cfg, &mut rng)
}

/// Generates a dataset with disjoint seeded splits in which every class
/// occurs in the ground truth of every split. A split lacking a class gets
/// one of its scenes redrawn, up to a fixed retry budget.
pub fn make_splits(cfg: &SceneConfig, counts: SplitCounts, rng: &mut Rng) -> Result<Dataset> {
    cfg.validate()?;
    for (name, n) in [
        ("labeled", counts.labeled),
        ("unlabeled", counts.unlabeled),
        ("quality", counts.quality),
        ("validation", counts.validation),
    ] {
        if n == 0 {
            return Err(Error::invalid(format!("{name} split must be non-empty")));
        }
    }
    let mut ids: Vec<usize> = (0..counts.total()).collect();
    rng.shuffle(&mut ids);
    let mut split = DatasetSplit::default();
    let mut rest = ids.as_slice();
    for (role, n) in [
        (Role::Labeled, counts.labeled),
        (Role::Unlabeled, counts.unlabeled),
        (Role::Quality, counts.quality),
        (Role::Validation, counts.validation),
    ] {
        let mut part = rest[..n].to_vec();
        part.sort_unstable();
        rest = &rest[n..];
        match role {
            Role::Labeled => split.labeled = part,
            Role::Unlabeled => split.unlabeled = part,
            Role::Quality => split.quality = part,
            Role::Validation => split.validation = part,
        }
    }

    let mut by_role = Vec::new();
    for role in Role::ALL {
        let role_ids = split.ids(role).to_vec();
        let mut scenes: Vec<(Image, LabelMask)> = role_ids
            .par_iter()
            .map(|&id| scene_for(cfg, id, 0))
            .collect::<Result<_>>()?;
        let mut attempt = 0;
        loop {
            let labels: Vec<&LabelMask> = scenes.iter().map(|s| &s.1).collect();
            let Some(missing) = presence(&labels, cfg.num_classes).iter().position(|p| !p) else {
                break;
            };
            attempt += 1;
            if attempt > MAX_PRESENCE_RETRIES {
                return Err(Error::Infeasible(format!(
                    "class {missing} never appeared in the {role:?} split after {MAX_PRESENCE_RETRIES} redraws"
                )));
            }
            let slot = (attempt - 1) % scenes.len();
            scenes[slot] = scene_for(cfg, role_ids[slot], attempt)?;
        }
        by_role.push((role, role_ids, scenes));
    }

    let mut labeled = Vec::new();
    let mut quality = Vec::new();
    let mut validation = Vec::new();
    let mut unlabeled_images = Vec::new();
    let mut truth = Vec::new();
    let mut unlabeled_ids = Vec::new();
    for (role, role_ids, scenes) in by_role {
        for (id, (image, label)) in role_ids.into_iter().zip(scenes) {
            let sample = Sample { id, image, label };
            match role {
                Role::Labeled => labeled.push(sample),
                Role::Quality => quality.push(sample),
                Role::Validation => validation.push(sample),
                Role::Unlabeled => {
                    unlabeled_ids.push(sample.id);
                    unlabeled_images.push(sample.image);
                    truth.push(sample.label);
                }
            }
        }
    }
    Ok(Dataset {
        scene: cfg.clone(),
        split,
        labeled,
        quality,
        validation,
        unlabeled: UnlabeledSet::new(unlabeled_ids, unlabeled_images)?,
        unlabeled_truth: HeldOutTruth::new(truth),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    pub role: Role,
    pub image: String,
    /// Absent for unlabeled samples.
    pub label: Option<String>,
    /// Evaluation-only ground truth of unlabeled samples.
    pub heldout_label: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub scene: SceneConfig,
    pub samples: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
const HELDOUT_DIR: &str = "heldout";

fn save_label(label: &LabelMask, path: &Path) -> Result<()> {
    SegtArray::u8(vec![label.height(), label.width()], label.data().to_vec())?.save(path)
}

fn load_label(path: &Path) -> Result<LabelMask> {
    let (shape, data) = SegtArray::load(path)?.into_u8()?;
    match shape[..] {
        [h, w] => LabelMask::new(h, w, data),
        _ => Err(Error::Format(format!("{}: label must be 2-D, got {shape:?}", path.display()))),
    }
}

pub(crate) fn load_image(path: &Path) -> Result<Image> {
    Image::new(Tensor::load_segt(path)?)
}

impl Dataset {
    /// Writes `manifest.json`, `img_<id>.segt`, `lbl_<id>.segt` and, for
    /// unlabeled samples, `heldout/lbl_<id>.segt`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir.join(HELDOUT_DIR))?;
        let mut entries = Vec::new();
        for (role, samples) in [
            (Role::Labeled, &self.labeled),
            (Role::Quality, &self.quality),
            (Role::Validation, &self.validation),
        ] {
            for s in samples {
                let image = format!("img_{}.segt", s.id);
                let label = format!("lbl_{}.segt", s.id);
                s.image.tensor().save_segt(dir.join(&image))?;
                save_label(&s.label, &dir.join(&label))?;
                entries.push(ManifestEntry {
                    id: s.id,
                    role,
                    image,
                    label: Some(label),
                    heldout_label: None,
                });
            }
        }
        for ((id, image), truth) in self
            .unlabeled
            .ids
            .iter()
            .zip(&self.unlabeled.images)
            .zip(&self.unlabeled_truth.labels)
        {
            let img = format!("img_{id}.segt");
            let held = format!("{HELDOUT_DIR}/lbl_{id}.segt");
            image.tensor().save_segt(dir.join(&img))?;
            save_label(truth, &dir.join(&held))?;
            entries.push(ManifestEntry {
                id: *id,
                role: Role::Unlabeled,
                image: img,
                label: None,
                heldout_label: Some(held),
            });
        }
        entries.sort_by_key(|e| e.id);
        let manifest = Manifest {
            num_classes: self.scene.num_classes,
            height: self.scene.height,
            width: self.scene.width,
            seed: self.scene.seed,
            scene: self.scene.clone(),
            samples: entries,
        };
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest = serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE))?)?;
        manifest.scene.validate()?;
        let path = |rel: &str| -> PathBuf { dir.join(rel) };
        let mut ds = Dataset {
            scene: manifest.scene.clone(),
            split: DatasetSplit::default(),
            labeled: Vec::new(),
            quality: Vec::new(),
            validation: Vec::new(),
            unlabeled: UnlabeledSet::new(Vec::new(), Vec::new())?,
            unlabeled_truth: HeldOutTruth::new(Vec::new()),
        };
        for e in &manifest.samples {
            let image = load_image(&path(&e.image))?;
            if (image.height(), image.width()) != (manifest.height, manifest.width) {
                return Err(Error::data(format!("sample {} has size {}x{}", e.id, image.height(), image.width())));
            }
            let file = match e.role {
                Role::Unlabeled => &e.heldout_label,
                _ => &e.label,
            };
            let label = load_label(&path(file.as_deref().ok_or_else(|| {
                Error::data(format!("sample {} has no label file", e.id))
            })?))?;
            label.validate(manifest.num_classes)?;
            match e.role {
                Role::Unlabeled => {
                    ds.split.unlabeled.push(e.id);
                    ds.unlabeled.ids.push(e.id);
                    ds.unlabeled.images.push(image);
                    ds.unlabeled_truth.labels.push(label);
                }
                role => {
                    let sample = Sample { id: e.id, image, label };
                    let (ids, samples) = match role {
                        Role::Labeled => (&mut ds.split.labeled, &mut ds.labeled),
                        Role::Quality => (&mut ds.split.quality, &mut ds.quality),
                        _ => (&mut ds.split.validation, &mut ds.validation),
                    };
                    ids.push(e.id);
                    samples.push(sample);
                }
            }
        }
        if !ds.split.is_disjoint() {
            return Err(Error::data("manifest lists a sample id twice"));
        }
        Ok(ds)
    }
}

/// Number of items a fraction of `n` selects: `ceil(fraction * n)`, with
/// products within 1e-9 of an integer treated as that integer.
pub fn subset_size(fraction: f64, n: usize) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("fraction {fraction} outside (0, 1]")));
    }
    let k = ((fraction * n as f64) - 1e-9).ceil() as usize;
    if k == 0 {
        return Err(Error::invalid(format!("fraction {fraction} of {n} selects nothing")));
    }
    Ok(k.min(n))
}

/// Selects `ceil(fraction * |set|)` labeled ids so that every class is
/// present and images rich in rare classes are preferred.
///
/// Classes whose total pixel count is below the median are rare. The
/// selection first covers every class (rarest first), then takes images
/// with at least `rare_threshold` pixels of some rare class, then fills
/// uniformly at random. Returned ids are sorted.
pub fn balanced_subset(
    samples: &[(usize, &LabelMask)],
    fraction: f64,
    rare_threshold: usize,
    num_classes: usize,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    let k = subset_size(fraction, samples.len())?;
    let counts: Vec<Vec<usize>> = samples
        .iter()
        .map(|(_, m)| {
            let mut c = vec![0usize; num_classes];
            for &v in m.data() {
                if v != IGNORE {
                    if v as usize >= num_classes {
                        return Err(Error::data(format!("class id {v} >= {num_classes}")));
                    }
                    c[v as usize] += 1;
                }
            }
            Ok(c)
        })
        .collect::<Result<_>>()?;
    let totals: Vec<usize> = (0..num_classes).map(|c| counts.iter().map(|x| x[c]).sum()).collect();
    if let Some(c) = totals.iter().position(|&t| t == 0) {
        return Err(Error::Infeasible(format!("class {c} is absent from every candidate image")));
    }
    if k == samples.len() {
        let mut all: Vec<usize> = samples.iter().map(|s| s.0).collect();
        all.sort_unstable();
        return Ok(all);
    }

    let mut sorted = totals.clone();
    sorted.sort_unstable();
    let median = if num_classes % 2 == 1 {
        sorted[num_classes / 2] as f64
    } else {
        (sorted[num_classes / 2 - 1] + sorted[num_classes / 2]) as f64 / 2.0
    };
    let rare: Vec<usize> = (0..num_classes).filter(|&c| (totals[c] as f64) < median).collect();

    let mut chosen = vec![false; samples.len()];
    let mut picked = 0;
    let mut by_rarity: Vec<usize> = (0..num_classes).collect();
    by_rarity.sort_by_key(|&c| (totals[c], c));
    for c in by_rarity {
        if (0..samples.len()).any(|i| chosen[i] && counts[i][c] > 0) {
            continue;
        }
        let holders: Vec<usize> = (0..samples.len()).filter(|&i| counts[i][c] > 0).collect();
        let i = holders[rng.below(holders.len())];
        chosen[i] = true;
        picked += 1;
    }
    if picked > k {
        return Err(Error::Infeasible(format!(
            "covering all {num_classes} classes needs {picked} images but the fraction allows {k}"
        )));
    }

    let mut rich: Vec<usize> = (0..samples.len())
        .filter(|&i| !chosen[i] && rare.iter().any(|&c| counts[i][c] >= rare_threshold))
        .collect();
    rng.shuffle(&mut rich);
    let mut rest: Vec<usize> = (0..samples.len()).filter(|&i| !chosen[i]).collect();
    rng.shuffle(&mut rest);
    for i in rich.into_iter().chain(rest) {
        if picked == k {
            break;
        }
        if !chosen[i] {
            chosen[i] = true;
            picked += 1;
        }
    }
    let mut ids: Vec<usize> = (0..samples.len()).filter(|&i| chosen[i]).map(|i| samples[i].0).collect();
    ids.sort_unstable();
    Ok(ids)
}
