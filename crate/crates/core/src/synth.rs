//! Synthetic 2D segmentation scenes with controllable class imbalance and
//! low-contrast classes.
//!
//! Each sample draws one shape per foreground class on a background, in
//! decreasing order of expected area, so small classes are painted last and
//! stay visible. Pixel intensity is the class mean plus Gaussian noise.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{
    encode_labels, encode_tensor, read_labels, read_tensor, write_labels, write_tensor,
};
use crate::network::SPATIAL_MULTIPLE;
use crate::rng::Rng;
use crate::tensor::{LabelMap, Tensor};

/// Fewest pixels a rare class may be asked to cover.
pub const MIN_RARE_PIXELS: f64 = 4.0;

pub const MANIFEST_NAME: &str = "manifest.txt";
pub const MANIFEST_HEADER: &str = "# cdfnet dataset manifest v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
}

impl ShapeKind {
    fn name(self) -> &'static str {
        match self {
            ShapeKind::Ellipse => "ellipse",
            ShapeKind::Rectangle => "rectangle",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "ellipse" => Ok(ShapeKind::Ellipse),
            "rectangle" => Ok(ShapeKind::Rectangle),
            _ => Err(Error::Config(format!("unknown shape {s:?}"))),
        }
    }
}

/// How one foreground class is drawn.
///
/// `extent` bounds the semi-axes (ellipse) or half-sides (rectangle) as
/// fractions of the shorter image side; each axis is drawn independently.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassShape {
    pub kind: ShapeKind,
    pub extent: (f64, f64),
    pub mean: f64,
    pub occluded: bool,
}

impl ClassShape {
    fn expected_area(&self, side: f64) -> f64 {
        let r = 0.5 * (self.extent.0 + self.extent.1) * side;
        match self.kind {
            ShapeKind::Ellipse => std::f64::consts::PI * r * r,
            ShapeKind::Rectangle => 4.0 * r * r,
        }
    }
}

/// Scene generator settings.
///
/// `classes[i]` describes class `i + 1`; class 0 is the background. With
/// `rare_class_ratio` set, the last class is resized so its expected area is
/// that fraction of the largest other foreground class.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub background_mean: f64,
    pub noise_sigma: f64,
    pub classes: Vec<ClassShape>,
    pub rare_class_ratio: Option<f64>,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

fn shape(kind: ShapeKind, lo: f64, hi: f64, mean: f64, occluded: bool) -> ClassShape {
    ClassShape {
        kind,
        extent: (lo, hi),
        mean,
        occluded,
    }
}

impl SceneSpec {
    pub const PRESETS: [&'static str; 3] = ["easy", "imbalanced", "occluded"];

    /// `easy`: well separated intensities and moderate sizes.
    /// `imbalanced`: as easy, with the last class shrunk to 1:225.
    /// `occluded`: the rare class and one mid-sized class have intensities
    /// that overlap their neighbours.
    pub fn preset(name: &str) -> Result<Self> {
        use ShapeKind::*;
        let easy = SceneSpec {
            name: name.to_owned(),
            height: 64,
            width: 64,
            background_mean: 0.0,
            noise_sigma: 0.05,
            classes: vec![
                shape(Ellipse, 0.25, 0.35, 0.25, false),
                shape(Rectangle, 0.12, 0.2, 0.5, false),
                shape(Ellipse, 0.1, 0.15, 0.75, false),
                shape(Rectangle, 0.06, 0.1, 1.0, false),
            ],
            rare_class_ratio: None,
            val_fraction: 0.0,
            test_fraction: 0.2,
        };
        match name {
            "easy" => Ok(easy),
            "imbalanced" => Ok(SceneSpec {
                rare_class_ratio: Some(1.0 / 225.0),
                classes: {
                    let mut c = easy.classes.clone();
                    c[3].kind = Ellipse;
                    c
                },
                ..easy
            }),
            "occluded" => Ok(SceneSpec {
                noise_sigma: 0.08,
                rare_class_ratio: Some(1.0 / 225.0),
                classes: vec![
                    shape(Ellipse, 0.25, 0.35, 0.25, false),
                    shape(Rectangle, 0.12, 0.2, 0.6, false),
                    shape(Ellipse, 0.1, 0.15, 0.75, true),
                    shape(Ellipse, 0.03, 0.03, 0.4, true),
                ],
                ..easy
            }),
            _ => Err(Error::Config(format!(
                "unknown preset {name:?}; expected one of {}",
                Self::PRESETS.join(", ")
            ))),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len() + 1
    }

    fn side(&self) -> f64 {
        self.height.min(self.width) as f64
    }

    /// The class resized by `rare_class_ratio`, if any.
    pub fn rare_class(&self) -> Option<usize> {
        self.rare_class_ratio.map(|_| self.classes.len())
    }

    /// `occluded` and `non_occluded` foreground class groups.
    pub fn class_groups(&self) -> Vec<(String, Vec<usize>)> {
        let (occ, non): (Vec<usize>, Vec<usize>) =
            (1..self.num_classes()).partition(|&c| self.classes[c - 1].occluded);
        vec![
            ("non_occluded".to_owned(), non),
            ("occluded".to_owned(), occ),
        ]
    }

    /// Shapes with the rare class resized to its target area.
    fn resolved_classes(&self) -> Result<Vec<ClassShape>> {
        let mut classes = self.classes.clone();
        let Some(ratio) = self.rare_class_ratio else {
            return Ok(classes);
        };
        let side = self.side();
        let last = classes.len() - 1;
        let largest = classes[..last]
            .iter()
            .map(|c| c.expected_area(side))
            .fold(0.0, f64::max);
        let target = ratio * largest;
        if target < MIN_RARE_PIXELS {
            let scale = (MIN_RARE_PIXELS / target).sqrt();
            let m = SPATIAL_MULTIPLE as f64;
            let min_side = ((side * scale) / m).ceil() * m;
            return Err(Error::Config(format!(
                "rare class ratio {ratio} gives {target:.2} pixels at {}x{}; \
                 use images of at least {min_side}x{min_side}",
                self.height, self.width
            )));
        }
        let rare = &mut classes[last];
        let r = match rare.kind {
            ShapeKind::Ellipse => (target / std::f64::consts::PI).sqrt(),
            ShapeKind::Rectangle => 0.5 * target.sqrt(),
        } / side;
        rare.extent = (0.9 * r, 1.1 * r);
        Ok(classes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0
            || self.width == 0
            || !self.height.is_multiple_of(SPATIAL_MULTIPLE)
            || !self.width.is_multiple_of(SPATIAL_MULTIPLE)
        {
            return Err(Error::Config(format!(
                "image size {}x{} must be a positive multiple of {SPATIAL_MULTIPLE}",
                self.height, self.width
            )));
        }
        if self.classes.is_empty() {
            return Err(Error::Config(
                "at least one foreground class is required".into(),
            ));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if !(c.extent.0 > 0.0 && c.extent.0 <= c.extent.1) {
                return Err(Error::Config(format!(
                    "class {} has extent range {:?}",
                    i + 1,
                    c.extent
                )));
            }
        }
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 {
            return Err(Error::Config("noise sigma must be non-negative".into()));
        }
        if let Some(r) = self.rare_class_ratio {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::Config(format!(
                    "rare class ratio {r} outside (0, 1]"
                )));
            }
        }
        let (v, t) = (self.val_fraction, self.test_fraction);
        if !(v >= 0.0 && t >= 0.0 && v + t < 1.0) {
            return Err(Error::Config(format!(
                "split fractions val {v} and test {t} leave no training data"
            )));
        }
        self.resolved_classes().map(|_| ())
    }

    /// Canonical `key = value` lines, in the form stored in manifests.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "spec.name = {}", self.name);
        let _ = writeln!(s, "spec.height = {}", self.height);
        let _ = writeln!(s, "spec.width = {}", self.width);
        let _ = writeln!(s, "spec.background_mean = {:?}", self.background_mean);
        let _ = writeln!(s, "spec.noise_sigma = {:?}", self.noise_sigma);
        let _ = writeln!(
            s,
            "spec.rare_class_ratio = {}",
            self.rare_class_ratio
                .map_or("none".to_owned(), |r| format!("{r:?}"))
        );
        let _ = writeln!(s, "spec.val_fraction = {:?}", self.val_fraction);
        let _ = writeln!(s, "spec.test_fraction = {:?}", self.test_fraction);
        for (i, c) in self.classes.iter().enumerate() {
            let _ = writeln!(
                s,
                "spec.class.{} = {} {:?} {:?} {:?} {}",
                i + 1,
                c.kind.name(),
                c.extent.0,
                c.extent.1,
                c.mean,
                if c.occluded { "occluded" } else { "visible" }
            );
        }
        s
    }

    fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            kv.get(&format!("spec.{k}"))
                .map(String::as_str)
                .ok_or_else(|| Error::Integrity(format!("manifest lacks spec.{k}")))
        };
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Integrity(format!("manifest spec.{k}: bad value {v:?}")))
        }
        let mut classes = Vec::new();
        while let Some(line) = kv.get(&format!("spec.class.{}", classes.len() + 1)) {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 5 {
                return Err(Error::Integrity(format!("manifest class line {line:?}")));
            }
            classes.push(ClassShape {
                kind: ShapeKind::parse(f[0])?,
                extent: (num("class", f[1])?, num("class", f[2])?),
                mean: num("class", f[3])?,
                occluded: f[4] == "occluded",
            });
        }
        let rare = get("rare_class_ratio")?;
        Ok(SceneSpec {
            name: get("name")?.to_owned(),
            height: num("height", get("height")?)?,
            width: num("width", get("width")?)?,
            background_mean: num("background_mean", get("background_mean")?)?,
            noise_sigma: num("noise_sigma", get("noise_sigma")?)?,
            classes,
            rare_class_ratio: if rare == "none" {
                None
            } else {
                Some(num("rare_class_ratio", rare)?)
            },
            val_fraction: num("val_fraction", get("val_fraction")?)?,
            test_fraction: num("test_fraction", get("test_fraction")?)?,
        })
    }

    /// SHA-256 of [`SceneSpec::to_kv`], hex encoded.
    pub fn digest(&self) -> String {
        hex_digest(self.to_kv().as_bytes())
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

/// Generated samples, each image `[1, 1, H, W]` and label `[1, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub seed: u64,
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<LabelMap>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }
}

/// Split sizes for `n` samples: train first, then val, then test.
fn split_plan(n: usize, val: f64, test: f64) -> Vec<Split> {
    let n_test = (n as f64 * test).round() as usize;
    let n_val = ((n as f64 * val).round() as usize).min(n - n_test);
    let n_train = n - n_test - n_val;
    let n_train = n_train.max(1);
    let n_val = n_val.min(n - n_train);
    let n_test = n - n_train - n_val;
    let mut out = vec![Split::Train; n_train];
    out.extend(std::iter::repeat_n(Split::Val, n_val));
    out.extend(std::iter::repeat_n(Split::Test, n_test));
    out
}

fn draw_order(spec: &SceneSpec, classes: &[ClassShape]) -> Vec<usize> {
    let side = spec.side();
    let mut order: Vec<usize> = (0..classes.len()).collect();
    order.sort_by(|&a, &b| {
        classes[b]
            .expected_area(side)
            .total_cmp(&classes[a].expected_area(side))
            .then(a.cmp(&b))
    });
    if let Some(rare) = spec.rare_class() {
        order.retain(|&c| c != rare - 1);
        order.push(rare - 1);
    }
    order
}

fn render(
    spec: &SceneSpec,
    classes: &[ClassShape],
    order: &[usize],
    rng: &mut Rng,
) -> (Vec<f32>, Vec<u32>) {
    let (h, w) = (spec.height, spec.width);
    let side = spec.side();
    let mut labels = vec![0u32; h * w];
    for &ci in order {
        let c = &classes[ci];
        let ry = rng.uniform(c.extent.0, c.extent.1) * side;
        let rx = rng.uniform(c.extent.0, c.extent.1) * side;
        let cy = rng.uniform(ry.min(h as f64 / 2.0), (h as f64 - ry).max(h as f64 / 2.0));
        let cx = rng.uniform(rx.min(w as f64 / 2.0), (w as f64 - rx).max(w as f64 / 2.0));
        for i in 0..h {
            let dy = (i as f64 + 0.5 - cy) / ry;
            for j in 0..w {
                let dx = (j as f64 + 0.5 - cx) / rx;
                let inside = match c.kind {
                    ShapeKind::Ellipse => dx * dx + dy * dy <= 1.0,
                    ShapeKind::Rectangle => dx.abs() <= 1.0 && dy.abs() <= 1.0,
                };
                if inside {
                    labels[i * w + j] = ci as u32 + 1;
                }
            }
        }
    }
    let image = labels
        .iter()
        .map(|&l| {
            let mean = if l == 0 {
                spec.background_mean
            } else {
                classes[l as usize - 1].mean
            };
            (mean + spec.noise_sigma * rng.normal()) as f32
        })
        .collect();
    (image, labels)
}

/// Generates `n` samples. Sample `i` depends only on `(spec, seed, i)`.
pub fn generate(spec: &SceneSpec, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Usage("dataset needs at least one sample".into()));
    }
    spec.validate()?;
    let classes = spec.resolved_classes()?;
    let order = draw_order(spec, &classes);
    let (h, w) = (spec.height, spec.width);
    let samples: Vec<(Vec<f32>, Vec<u32>)> = (0..n)
        .into_par_iter()
        .map(|i| render(spec, &classes, &order, &mut Rng::stream(seed, i as u64)))
        .collect();
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (img, lbl) in samples {
        images.push(Tensor::from_vec([1, 1, h, w], img)?);
        labels.push(LabelMap::from_vec([1, h, w], lbl)?);
    }
    Ok(Dataset {
        spec: spec.clone(),
        seed,
        images,
        labels,
        splits: split_plan(n, spec.val_fraction, spec.test_fraction),
    })
}

fn image_name(i: usize) -> String {
    format!("image_{i:05}.cdft")
}

fn label_name(i: usize) -> String {
    format!("label_{i:05}.cdft")
}

/// Writes one CDFT file per image and label plus `manifest.txt`.
pub fn export(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut m = String::new();
    let _ = writeln!(m, "{MANIFEST_HEADER}");
    let _ = writeln!(m, "seed = {}", ds.seed);
    let _ = writeln!(m, "samples = {}", ds.len());
    let _ = writeln!(m, "spec_digest = {}", ds.spec.digest());
    m.push_str(&ds.spec.to_kv());
    for i in 0..ds.len() {
        let (img, lbl) = (image_name(i), label_name(i));
        let mut bytes = Vec::new();
        encode_tensor(&ds.images[i], &mut bytes);
        let img_digest = hex_digest(&bytes);
        write_tensor(&ds.images[i], dir.join(&img))?;
        bytes.clear();
        encode_labels(&ds.labels[i], &mut bytes);
        let lbl_digest = hex_digest(&bytes);
        write_labels(&ds.labels[i], dir.join(&lbl))?;
        let _ = writeln!(
            m,
            "sample {i} {} {img} {img_digest} {lbl} {lbl_digest}",
            ds.splits[i].name()
        );
    }
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, m).map_err(|e| Error::io(path, e))
}

fn check_file(dir: &Path, sample: usize, name: &str, digest: &str) -> Result<()> {
    let path = dir.join(name);
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::Integrity(format!(
                "sample {sample}: missing file {name}"
            )))
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    if hex_digest(&bytes) != digest {
        return Err(Error::Integrity(format!(
            "sample {sample}: {name} does not match its manifest digest"
        )));
    }
    Ok(())
}

/// Reads a directory written by [`export`], verifying every file digest.
pub fn import(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            Error::Integrity(format!("no manifest in {}", dir.display()))
        }
        _ => Error::io(&path, e),
    })?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::Integrity("unrecognized manifest header".into()));
    }
    let mut kv = BTreeMap::new();
    let mut rows = Vec::new();
    for line in lines {
        if let Some(rest) = line.strip_prefix("sample ") {
            rows.push(
                rest.split_whitespace()
                    .map(str::to_owned)
                    .collect::<Vec<_>>(),
            );
        } else if let Some((k, v)) = line.split_once('=') {
            kv.insert(k.trim().to_owned(), v.trim().to_owned());
        } else if !line.trim().is_empty() {
            return Err(Error::Integrity(format!("manifest line {line:?}")));
        }
    }
    let spec = SceneSpec::from_kv(&kv)?;
    let digest = kv.get("spec_digest").map(String::as_str).unwrap_or("");
    if spec.digest() != digest {
        return Err(Error::Integrity(
            "manifest spec digest does not match its spec".into(),
        ));
    }
    let field = |k: &str| -> Result<u64> {
        kv.get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Integrity(format!("manifest lacks {k}")))
    };
    let seed = field("seed")?;
    let n = field("samples")? as usize;
    if rows.len() != n {
        return Err(Error::Integrity(format!(
            "manifest lists {} samples, header says {n}",
            rows.len()
        )));
    }
    let mut ds = Dataset {
        spec,
        seed,
        images: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
        splits: Vec::with_capacity(n),
    };
    for (i, row) in rows.iter().enumerate() {
        if row.len() != 6 || row[0] != i.to_string() {
            return Err(Error::Integrity(format!(
                "manifest row for sample {i} is malformed"
            )));
        }
        ds.splits
            .push(Split::parse(&row[1]).map_err(|_| {
                Error::Integrity(format!("sample {i}: unknown split {:?}", row[1]))
            })?);
        check_file(dir, i, &row[2], &row[3])?;
        check_file(dir, i, &row[4], &row[5])?;
        let img = read_tensor::<f32>(dir.join(&row[2]))?;
        let lbl = read_labels(dir.join(&row[4]))?;
        let (h, w) = (ds.spec.height, ds.spec.width);
        if img.dims() != [1, 1, h, w] || lbl.dims() != [1, h, w] {
            return Err(Error::Integrity(format!(
                "sample {i}: extents differ from the manifest"
            )));
        }
        lbl.validate(ds.spec.num_classes())
            .map_err(|e| Error::Integrity(format!("sample {i}: {e}")))?;
        ds.images.push(img);
        ds.labels.push(lbl);
    }
    Ok(ds)
}
