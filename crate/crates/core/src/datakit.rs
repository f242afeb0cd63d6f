//! Synthetic datasets, the raw volume format and JSON manifests.
//!
//! A volume is two files: `<path>` holds the little-endian row-major
//! payload and `<path>.json` the header `{shape, dtype, version}`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const VOLUME_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Write `bytes` to a temporary sibling and rename it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::format(path, "not a file path"))?
        .to_string_lossy()
        .into_owned();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub(crate) fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeDtype {
    F32,
    U8,
}

impl VolumeDtype {
    pub fn size(self) -> usize {
        match self {
            VolumeDtype::F32 => 4,
            VolumeDtype::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub shape: Vec<usize>,
    pub dtype: VolumeDtype,
    pub version: u32,
}

/// Payload of a volume file.
#[derive(Clone, Debug, PartialEq)]
pub enum VolumeData {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl VolumeData {
    pub fn shape(&self) -> &[usize] {
        match self {
            VolumeData::F32 { shape, .. } | VolumeData::U8 { shape, .. } => shape,
        }
    }

    pub fn dtype(&self) -> VolumeDtype {
        match self {
            VolumeData::F32 { .. } => VolumeDtype::F32,
            VolumeData::U8 { .. } => VolumeDtype::U8,
        }
    }
}

pub fn header_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_volume(path: &Path, vol: &VolumeData) -> Result<()> {
    let n: usize = vol.shape().iter().product();
    let bytes: Vec<u8> = match vol {
        VolumeData::F32 { data, .. } => {
            if data.len() != n {
                return Err(Error::format(path, format!("shape needs {n} values, got {}", data.len())));
            }
            data.iter().flat_map(|v| v.to_le_bytes()).collect()
        }
        VolumeData::U8 { data, .. } => {
            if data.len() != n {
                return Err(Error::format(path, format!("shape needs {n} values, got {}", data.len())));
            }
            data.clone()
        }
    };
    write_atomic(path, &bytes)?;
    write_json(
        &header_path(path),
        &VolumeHeader {
            shape: vol.shape().to_vec(),
            dtype: vol.dtype(),
            version: VOLUME_VERSION,
        },
    )
}

/// Header parse with errors that name the offending field.
fn parse_header(hpath: &Path) -> Result<VolumeHeader> {
    let raw: serde_json::Value = read_json(hpath)?;
    let obj = raw
        .as_object()
        .ok_or_else(|| Error::format(hpath, "header must be a JSON object"))?;
    if let Some(extra) = obj.keys().find(|k| !["shape", "dtype", "version"].contains(&k.as_str())) {
        return Err(Error::format(hpath, format!("unknown field `{extra}`")));
    }
    fn field<D: for<'de> Deserialize<'de>>(
        hpath: &Path,
        obj: &serde_json::Map<String, serde_json::Value>,
        name: &str,
    ) -> Result<D> {
        let v = obj
            .get(name)
            .ok_or_else(|| Error::format(hpath, format!("missing field `{name}`")))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::format(hpath, format!("field `{name}`: {e}")))
    }
    Ok(VolumeHeader {
        shape: field(hpath, obj, "shape")?,
        dtype: field(hpath, obj, "dtype")?,
        version: field(hpath, obj, "version")?,
    })
}

pub fn load_volume(path: &Path) -> Result<VolumeData> {
    let hpath = header_path(path);
    let header = parse_header(&hpath)?;
    if header.version != VOLUME_VERSION {
        return Err(Error::format(
            &hpath,
            format!("field `version`: expected {VOLUME_VERSION}, got {}", header.version),
        ));
    }
    if header.shape.is_empty() || header.shape.contains(&0) {
        return Err(Error::format(
            &hpath,
            format!("field `shape`: extents must be positive, got {:?}", header.shape),
        ));
    }
    let n: usize = header.shape.iter().product();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = n * header.dtype.size();
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "payload length: expected {expected} bytes for shape {:?} dtype {:?}, got {}",
                header.shape,
                header.dtype,
                bytes.len()
            ),
        ));
    }
    Ok(match header.dtype {
        VolumeDtype::F32 => VolumeData::F32 {
            shape: header.shape,
            data: bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        },
        VolumeDtype::U8 => VolumeData::U8 {
            shape: header.shape,
            data: bytes,
        },
    })
}

pub fn save_image<T: Scalar>(path: &Path, image: &Tensor<T>) -> Result<()> {
    save_volume(
        path,
        &VolumeData::F32 {
            shape: image.shape().to_vec(),
            data: image.data().iter().map(|v| v.as_f64() as f32).collect(),
        },
    )
}

pub fn save_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    save_volume(
        path,
        &VolumeData::U8 {
            shape: labels.shape().to_vec(),
            data: labels.classes().to_vec(),
        },
    )
}

pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    match load_volume(path)? {
        VolumeData::F32 { shape, data } => Tensor::new(shape, data),
        VolumeData::U8 { .. } => Err(Error::format(
            header_path(path),
            "field `dtype`: expected f32 image, got u8",
        )),
    }
}

pub fn load_labels(path: &Path, num_classes: usize) -> Result<LabelMap> {
    match load_volume(path)? {
        VolumeData::U8 { shape, data } => {
            LabelMap::new(shape, data, num_classes).map_err(|e| Error::format(path, e.to_string()))
        }
        VolumeData::F32 { .. } => Err(Error::format(
            header_path(path),
            "field `dtype`: expected u8 labels, got f32",
        )),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Labeled,
    Unlabeled,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Labeled, Split::Unlabeled, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Labeled => "labeled",
            Split::Unlabeled => "unlabeled",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown split `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub shape: Vec<usize>,
    /// Including background.
    pub num_classes: usize,
    /// Drift of the unlabeled, val and test pools relative to the labeled one.
    pub shift: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_labeled: 4,
            n_unlabeled: 76,
            n_val: 8,
            n_test: 20,
            shape: vec![64, 64],
            num_classes: 3,
            shift: 0.3,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_labeled < 2 || self.n_unlabeled < 2 {
            return bad(format!(
                "need at least 2 labeled and 2 unlabeled samples, got {} and {}",
                self.n_labeled, self.n_unlabeled
            ));
        }
        if self.shape.len() != 2 || self.shape.iter().any(|&d| d < 16) {
            return bad(format!("shape must be 2D with extents >= 16, got {:?}", self.shape));
        }
        if !(2..=8).contains(&self.num_classes) {
            return bad(format!("num_classes must be in 2..=8, got {}", self.num_classes));
        }
        if !(0.0..=1.0).contains(&self.shift) {
            return bad(format!("shift must be in [0, 1], got {}", self.shift));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        Ok(())
    }

    /// Base intensity of class `c` in the labeled pool.
    pub fn base_intensity(&self, class: usize) -> f64 {
        class as f64 / (self.num_classes - 1) as f64
    }

    /// Additive intensity offset of the drifted pools.
    pub fn intensity_offset(&self, split: Split) -> f64 {
        match split {
            Split::Labeled => 0.0,
            _ => self.shift * 0.5 / (self.num_classes - 1) as f64,
        }
    }

    /// Blob radius multiplier of the drifted pools.
    pub fn scale_factor(&self, split: Split) -> f64 {
        match split {
            Split::Labeled => 1.0,
            _ => 1.0 + self.shift,
        }
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Labeled => self.n_labeled,
            Split::Unlabeled => self.n_unlabeled,
            Split::Val => self.n_val,
            Split::Test => self.n_test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeRecord {
    pub id: String,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub split: Split,
    /// Ground truth of an unlabeled sample; only diagnostics read it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_label: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub spec: DatasetSpec,
    pub records: Vec<VolumeRecord>,
    /// Directory that record paths are relative to.
    #[serde(skip)]
    pub root: PathBuf,
}

/// A training sample with ground truth. Images are `[1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub id: String,
    pub image: Tensor<f32>,
    pub label: LabelMap,
}

/// An unlabeled training sample. There is deliberately no label field.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledSample {
    pub id: String,
    pub image: Tensor<f32>,
}

impl DatasetManifest {
    /// Load `manifest.json` from a directory, or a manifest file directly.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let mut m: DatasetManifest = read_json(&file)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::format(
                &file,
                format!("field `version`: expected {MANIFEST_VERSION}, got {}", m.version),
            ));
        }
        m.spec
            .validate()
            .map_err(|e| Error::format(&file, format!("field `spec`: {e}")))?;
        for r in &m.records {
            let needs_label = r.split != Split::Unlabeled;
            if needs_label != r.label.is_some() {
                return Err(Error::format(
                    &file,
                    format!("record `{}`: field `label` must be present exactly for labeled/val/test", r.id),
                ));
            }
        }
        m.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST_FILE), self)
    }

    pub fn records(&self, split: Split) -> impl Iterator<Item = &VolumeRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn load_pairs(&self, split: Split, oracle: bool) -> Result<Vec<LabeledSample>> {
        let recs: Vec<&VolumeRecord> = self.records(split).collect();
        recs.par_iter()
            .map(|r| {
                let label = if oracle { &r.oracle_label } else { &r.label };
                let label = label.as_ref().ok_or_else(|| {
                    Error::InvalidArgument(format!("record `{}` has no label", r.id))
                })?;
                Ok(LabeledSample {
                    id: r.id.clone(),
                    image: self.load_channel_image(&r.image)?,
                    label: load_labels(&self.resolve(label), self.spec.num_classes)?,
                })
            })
            .collect()
    }

    fn load_channel_image(&self, rel: &str) -> Result<Tensor<f32>> {
        let path = self.resolve(rel);
        let img = load_image(&path)?;
        if img.shape() != self.spec.shape.as_slice() {
            return Err(Error::format(
                header_path(&path),
                format!("field `shape`: expected {:?}, got {:?}", self.spec.shape, img.shape()),
            ));
        }
        let mut shape = vec![1];
        shape.extend_from_slice(img.shape());
        img.reshape(shape)
    }

    /// Samples of a labeled split (labeled, val or test).
    pub fn load_labeled(&self, split: Split) -> Result<Vec<LabeledSample>> {
        if split == Split::Unlabeled {
            return Err(Error::InvalidArgument(
                "the unlabeled split has no labels; use load_unlabeled".into(),
            ));
        }
        self.load_pairs(split, false)
    }

    pub fn load_unlabeled(&self) -> Result<Vec<UnlabeledSample>> {
        let recs: Vec<&VolumeRecord> = self.records(Split::Unlabeled).collect();
        recs.par_iter()
            .map(|r| {
                Ok(UnlabeledSample {
                    id: r.id.clone(),
                    image: self.load_channel_image(&r.image)?,
                })
            })
            .collect()
    }

    /// Unlabeled pool together with its hidden ground truth, for diagnostics.
    pub fn load_unlabeled_with_oracle(&self) -> Result<Vec<LabeledSample>> {
        self.load_pairs(Split::Unlabeled, true)
    }
}

/// Bounds on each foreground class's area fraction.
pub const FG_FRACTION_RANGE: (f64, f64) = (0.01, 0.40);
const PLACEMENT_TRIES: usize = 200;
const SAMPLE_TRIES: u64 = 32;

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    theta: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64, grow: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let dy = y - self.cy;
        let dx = x - self.cx;
        let u = (c * dx + s * dy) / (self.rx + grow);
        let v = (-s * dx + c * dy) / (self.ry + grow);
        u * u + v * v <= 1.0
    }
}

/// One synthetic image and its label map, or `None` if blob placement failed.
fn try_sample(spec: &DatasetSpec, split: Split, rng: &mut ChaCha8Rng) -> Option<(Tensor<f32>, LabelMap)> {
    let (h, w) = (spec.shape[0], spec.shape[1]);
    let k = spec.num_classes;
    let scale = spec.scale_factor(split);
    let unit = h.min(w) as f64 / 64.0;
    let mut classes = vec![0u8; h * w];
    let mut placed: Vec<Ellipse> = Vec::new();
    for class in 1..k {
        let mut ok = false;
        for _ in 0..PLACEMENT_TRIES {
            let ry = rng.gen_range(5.0..9.0) * unit * scale;
            let rx = rng.gen_range(5.0..9.0) * unit * scale;
            let r = ry.max(rx);
            if 2.0 * r + 2.0 >= h.min(w) as f64 {
                continue;
            }
            let e = Ellipse {
                cy: rng.gen_range(r + 1.0..h as f64 - r - 1.0),
                cx: rng.gen_range(r + 1.0..w as f64 - r - 1.0),
                ry,
                rx,
                theta: rng.gen_range(0.0..std::f64::consts::PI),
            };
            // keep a one-pixel gap between blobs
            let overlaps = (0..h * w).any(|i| {
                let (y, x) = ((i / w) as f64, (i % w) as f64);
                e.contains(y, x, 0.0) && placed.iter().any(|p| p.contains(y, x, 1.5))
            });
            if overlaps {
                continue;
            }
            for (i, c) in classes.iter_mut().enumerate() {
                if e.contains((i / w) as f64, (i % w) as f64, 0.0) {
                    *c = class as u8;
                }
            }
            placed.push(e);
            ok = true;
            break;
        }
        if !ok {
            return None;
        }
    }
    let n = (h * w) as f64;
    for class in 1..k {
        let frac = classes.iter().filter(|&&c| c as usize == class).count() as f64 / n;
        if frac < FG_FRACTION_RANGE.0 || frac > FG_FRACTION_RANGE.1 {
            return None;
        }
    }
    let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
    let offset = spec.intensity_offset(split);
    let data = classes
        .iter()
        .map(|&c| (spec.base_intensity(c as usize) + offset + noise.sample(rng)) as f32)
        .collect();
    Some((
        Tensor::new(vec![h, w], data).expect("image shape"),
        LabelMap::new(vec![h, w], classes, k).expect("label ids"),
    ))
}

/// Deterministic sample `index` of `split`.
pub fn synth_sample(spec: &DatasetSpec, split: Split, index: usize) -> Result<(Tensor<f32>, LabelMap)> {
    spec.validate()?;
    for attempt in 0..SAMPLE_TRIES {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        rng.set_stream((split.index() << 32) | index as u64);
        if let Some(s) = try_sample(spec, split, &mut rng) {
            return Ok(s);
        }
        log::warn!(
            "blob placement failed for {}/{index} (attempt {attempt}); regenerating with a perturbed seed",
            split.name()
        );
    }
    Err(Error::InvalidArgument(format!(
        "could not place blobs for {}/{index} after {SAMPLE_TRIES} attempts; shape {:?} too small?",
        split.name(),
        spec.shape
    )))
}

/// Generate every split under `out_dir` and write the manifest.
pub fn synth_generate(spec: &DatasetSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    for sub in ["images", "labels"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let jobs: Vec<(Split, usize)> = Split::ALL
        .into_iter()
        .flat_map(|s| (0..spec.count(s)).map(move |i| (s, i)))
        .collect();
    let records = jobs
        .par_iter()
        .map(|&(split, i)| {
            let id = format!("{}_{i:04}", split.name());
            let (img, lab) = synth_sample(spec, split, i)?;
            let image = format!("images/{id}.f32");
            let label = format!("labels/{id}.u8");
            save_image(&out_dir.join(&image), &img)?;
            save_labels(&out_dir.join(&label), &lab)?;
            let (label, oracle_label) = if split == Split::Unlabeled {
                (None, Some(label))
            } else {
                (Some(label), None)
            };
            Ok(VolumeRecord {
                id,
                image,
                label,
                split,
                oracle_label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        spec: spec.clone(),
        records,
        root: out_dir.to_path_buf(),
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}
