//! Bundle directories: a `manifest.json` plus one raw little-endian `f32` blob
//! per tensor, row-major, no per-file header.
//!
//! Tensor names follow `style/<id>`, `act/<id>/<layer>`, `membership/<id>`,
//! `contrib/<id>` and `emb/<feature>` (packed `N × C`).

mod layout;
mod tensors;

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use memmap2::Mmap;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub use layout::{LayerLayout, LayerSpec, DEFAULT_CLUSTER_RESOLUTION, DEFAULT_COARSE_LAYERS};
pub use tensors::{ActivationStack, ActivationTensor, StyleVector};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BUNDLE_VERSION: u64 = 1;
pub const DTYPE: &str = "f32le";
pub const ORDER: &str = "row-major";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

impl TensorRecord {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u64,
    pub dtype: String,
    pub order: String,
    pub images: Vec<String>,
    pub layout: LayerLayout,
    pub tensors: Vec<TensorRecord>,
    /// Stage-specific sections (`fixture`, `cluster`, `contrib`, `index`, ...).
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl Manifest {
    pub fn new(layout: LayerLayout, images: Vec<String>) -> Self {
        Manifest {
            version: BUNDLE_VERSION,
            dtype: DTYPE.to_string(),
            order: ORDER.to_string(),
            images,
            layout,
            tensors: Vec::new(),
            extra: BTreeMap::new(),
        }
    }

    fn parse(text: &str) -> Result<Self> {
        let raw: Value =
            serde_json::from_str(text).map_err(|e| Error::BadManifest(e.to_string()))?;
        let version = raw
            .get("version")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::BadManifest("missing integer `version`".into()))?;
        if version != BUNDLE_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let manifest: Manifest =
            serde_json::from_value(raw).map_err(|e| Error::BadManifest(e.to_string()))?;
        if manifest.dtype != DTYPE {
            return Err(Error::BadManifest(format!(
                "unsupported dtype `{}`",
                manifest.dtype
            )));
        }
        if manifest.order != ORDER {
            return Err(Error::BadManifest(format!(
                "unsupported order `{}`",
                manifest.order
            )));
        }
        manifest.layout.validate()?;
        Ok(manifest)
    }

    /// Canonical text: sorted keys at every level, tensor records sorted by
    /// name, trailing newline.
    pub fn to_canonical_string(&self) -> String {
        let mut m = self.clone();
        m.tensors.sort_by(|a, b| a.name.cmp(&b.name));
        let value = canonicalize(serde_json::to_value(&m).expect("manifest serializes"));
        let mut s = serde_json::to_string_pretty(&value).expect("manifest serializes");
        s.push('\n');
        s
    }
}

fn canonicalize(v: Value) -> Value {
    match v {
        Value::Object(map) => {
            let mut entries: Vec<(String, Value)> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Object(
                entries
                    .into_iter()
                    .map(|(k, v)| (k, canonicalize(v)))
                    .collect(),
            )
        }
        Value::Array(items) => Value::Array(items.into_iter().map(canonicalize).collect()),
        other => other,
    }
}

/// Tensor payload, either read into memory or mapped from disk.
#[derive(Debug)]
pub enum TensorData {
    Owned(Vec<f32>),
    Mapped(Mmap),
}

impl TensorData {
    pub fn as_slice(&self) -> &[f32] {
        match self {
            TensorData::Owned(v) => v,
            TensorData::Mapped(m) => bytemuck::cast_slice(&m[..]),
        }
    }
}

/// A validated, read-only bundle directory. Blobs are read on demand.
#[derive(Debug, Clone)]
pub struct Bundle {
    dir: PathBuf,
    manifest: Manifest,
    by_name: HashMap<String, usize>,
    by_image: HashMap<String, usize>,
}

impl Bundle {
    /// Opens `path`, checking the manifest, layout and every blob's byte size.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let dir = path.as_ref().to_path_buf();
        let manifest_path = dir.join(MANIFEST_FILE);
        if !manifest_path.is_file() {
            return Err(Error::MissingManifest(dir));
        }
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest = Manifest::parse(&text)?;

        let mut by_name = HashMap::with_capacity(manifest.tensors.len());
        for (i, rec) in manifest.tensors.iter().enumerate() {
            if by_name.insert(rec.name.clone(), i).is_some() {
                return Err(Error::InvalidBundle(format!(
                    "duplicate tensor `{}`",
                    rec.name
                )));
            }
            let blob = dir.join(&rec.file);
            let meta = fs::metadata(&blob).map_err(|e| Error::io(&blob, e))?;
            let want = 4 * rec.numel() as u64;
            if meta.len() != want {
                return Err(Error::shape(
                    &rec.name,
                    format!(
                        "blob `{}` is {} bytes, shape {:?} needs {}",
                        rec.file,
                        meta.len(),
                        rec.shape,
                        want
                    ),
                ));
            }
        }
        let mut by_image = HashMap::with_capacity(manifest.images.len());
        for (i, id) in manifest.images.iter().enumerate() {
            if by_image.insert(id.clone(), i).is_some() {
                return Err(Error::InvalidBundle(format!("duplicate image id `{id}`")));
            }
        }
        Ok(Bundle {
            dir,
            manifest,
            by_name,
            by_image,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn layout(&self) -> &LayerLayout {
        &self.manifest.layout
    }

    pub fn images(&self) -> &[String] {
        &self.manifest.images
    }

    pub fn image_index(&self, id: &str) -> Option<usize> {
        self.by_image.get(id).copied()
    }

    pub fn extra(&self, key: &str) -> Option<&Value> {
        self.manifest.extra.get(key)
    }

    pub fn record(&self, name: &str) -> Option<&TensorRecord> {
        self.by_name.get(name).map(|&i| &self.manifest.tensors[i])
    }

    pub fn has_tensor(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    fn require(&self, name: &str) -> Result<&TensorRecord> {
        self.record(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    /// Reads a tensor into memory, returning its shape and values.
    pub fn read_tensor(&self, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        let rec = self.require(name)?;
        let path = self.dir.join(&rec.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != 4 * rec.numel() {
            return Err(Error::shape(name, "blob size changed since load"));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok((rec.shape.clone(), data))
    }

    /// Maps a tensor without copying it (falls back to a read on big-endian
    /// hosts and for empty tensors).
    pub fn map_tensor(&self, name: &str) -> Result<(Vec<usize>, TensorData)> {
        let rec = self.require(name)?;
        if rec.numel() == 0 || cfg!(target_endian = "big") {
            let (shape, data) = self.read_tensor(name)?;
            return Ok((shape, TensorData::Owned(data)));
        }
        let path = self.dir.join(&rec.file);
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        // SAFETY: bundles are immutable once written; the map is read-only.
        let map = unsafe { Mmap::map(&file) }.map_err(|e| Error::io(&path, e))?;
        if map.len() != 4 * rec.numel() {
            return Err(Error::shape(name, "blob size changed since load"));
        }
        Ok((rec.shape.clone(), TensorData::Mapped(map)))
    }

    pub fn style(&self, id: &str) -> Result<StyleVector> {
        let name = format!("style/{id}");
        let (shape, values) = self.read_tensor(&name)?;
        if shape != [self.layout().total_channels()] {
            return Err(Error::shape(
                name,
                format!(
                    "shape {:?}, layout has {} channels",
                    shape,
                    self.layout().total_channels()
                ),
            ));
        }
        let s = StyleVector::new(id, values);
        s.check(self.layout())?;
        Ok(s)
    }

    pub fn activations(&self, id: &str) -> Result<ActivationStack> {
        let mut layers = Vec::with_capacity(self.layout().layers().len());
        for spec in self.layout().layers() {
            let name = format!("act/{id}/{}", spec.name);
            if !self.has_tensor(&name) {
                return Err(Error::MissingActivations(id.to_string()));
            }
            let (shape, data) = self.read_tensor(&name)?;
            if shape != [spec.channels, spec.resolution, spec.resolution] {
                return Err(Error::shape(
                    name,
                    format!(
                        "shape {:?}, layout wants [{}, {}, {}]",
                        shape, spec.channels, spec.resolution, spec.resolution
                    ),
                ));
            }
            layers.push(ActivationTensor {
                channels: spec.channels,
                height: spec.resolution,
                width: spec.resolution,
                data,
            });
        }
        let stack = ActivationStack {
            image_id: id.to_string(),
            layers,
        };
        stack.check(self.layout())?;
        Ok(stack)
    }

    /// Writes a copy of this bundle to `path` with a canonical manifest.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BundleWriter::create(
            path,
            self.manifest.layout.clone(),
            self.manifest.images.clone(),
        )?;
        // Write in original file order so blob names are reproduced.
        let mut records: Vec<&TensorRecord> = self.manifest.tensors.iter().collect();
        records.sort_by(|a, b| a.file.cmp(&b.file));
        for rec in records {
            let (shape, data) = self.read_tensor(&rec.name)?;
            w.write_tensor(&rec.name, &shape, &data)?;
        }
        for (k, v) in &self.manifest.extra {
            w.set_extra(k, v.clone());
        }
        w.finish()?;
        Ok(())
    }
}

/// Loads a bundle directory.
pub fn load_bundle(path: impl AsRef<Path>) -> Result<Bundle> {
    Bundle::load(path)
}

/// Re-saves a loaded bundle to another directory.
pub fn save_bundle(bundle: &Bundle, path: impl AsRef<Path>) -> Result<()> {
    bundle.save(path)
}

/// Streams tensors into a new bundle directory; the manifest is written by
/// [`BundleWriter::finish`].
#[derive(Debug)]
pub struct BundleWriter {
    dir: PathBuf,
    manifest: Manifest,
    names: HashMap<String, ()>,
}

impl BundleWriter {
    pub fn create(
        path: impl AsRef<Path>,
        layout: LayerLayout,
        images: Vec<String>,
    ) -> Result<Self> {
        layout.validate()?;
        let mut seen = HashMap::new();
        for id in &images {
            if seen.insert(id.as_str(), ()).is_some() {
                return Err(Error::InvalidBundle(format!("duplicate image id `{id}`")));
            }
        }
        let dir = path.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(BundleWriter {
            dir,
            manifest: Manifest::new(layout, images),
            names: HashMap::new(),
        })
    }

    pub fn layout(&self) -> &LayerLayout {
        &self.manifest.layout
    }

    pub fn write_tensor(&mut self, name: &str, shape: &[usize], data: &[f32]) -> Result<()> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidBundle(format!(
                "tensor `{name}` has {} values for shape {:?}",
                data.len(),
                shape
            )));
        }
        if self.names.insert(name.to_string(), ()).is_some() {
            return Err(Error::InvalidBundle(format!("duplicate tensor `{name}`")));
        }
        let file = blob_file_name(self.manifest.tensors.len(), name);
        let path = self.dir.join(&file);
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::with_capacity(1 << 20, f);
        write_f32_le(&mut out, data).map_err(|e| Error::io(&path, e))?;
        out.flush().map_err(|e| Error::io(&path, e))?;
        self.manifest.tensors.push(TensorRecord {
            name: name.to_string(),
            shape: shape.to_vec(),
            file,
        });
        Ok(())
    }

    pub fn set_extra(&mut self, key: &str, value: Value) {
        self.manifest.extra.insert(key.to_string(), value);
    }

    pub fn finish(self) -> Result<Bundle> {
        let path = self.dir.join(MANIFEST_FILE);
        fs::write(&path, self.manifest.to_canonical_string()).map_err(|e| Error::io(&path, e))?;
        Bundle::load(&self.dir)
    }
}

fn blob_file_name(index: usize, name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| match c {
            'a'..='z' | 'A'..='Z' | '0'..='9' | '-' | '.' => c,
            _ => '_',
        })
        .take(96)
        .collect();
    format!("{index:06}_{safe}.f32")
}

/// Writes values as little-endian IEEE-754 binary32.
pub fn write_f32_le(out: &mut impl Write, data: &[f32]) -> std::io::Result<()> {
    if cfg!(target_endian = "little") {
        out.write_all(bytemuck::cast_slice(data))
    } else {
        for v in data {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

/// Reads a headerless little-endian `f32` file.
pub fn read_f32_file(path: impl AsRef<Path>) -> Result<Vec<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::shape(
            path.display().to_string(),
            format!("{} bytes is not a whole number of f32 values", bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

/// Writes a headerless little-endian `f32` file.
pub fn write_f32_file(path: impl AsRef<Path>, data: &[f32]) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(f);
    write_f32_le(&mut out, data).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Anything that can hand out per-image styles and activations in canonical
/// order: a bundle on disk, or a generator synthesizing on demand.
pub trait ImageSource: Sync {
    fn layout(&self) -> &LayerLayout;
    fn image_ids(&self) -> &[String];
    fn style(&self, index: usize) -> Result<StyleVector>;
    fn activations(&self, index: usize) -> Result<ActivationStack>;

    fn len(&self) -> usize {
        self.image_ids().len()
    }

    fn is_empty(&self) -> bool {
        self.image_ids().is_empty()
    }
}

impl ImageSource for Bundle {
    fn layout(&self) -> &LayerLayout {
        Bundle::layout(self)
    }

    fn image_ids(&self) -> &[String] {
        self.images()
    }

    fn style(&self, index: usize) -> Result<StyleVector> {
        Bundle::style(self, &self.manifest.images[index])
    }

    fn activations(&self, index: usize) -> Result<ActivationStack> {
        Bundle::activations(self, &self.manifest.images[index])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> LayerLayout {
        LayerLayout::new([("L0", 4, 4), ("L1", 4, 8)], 1).unwrap()
    }

    fn two_image_bundle(dir: &Path) -> Bundle {
        let layout = layout();
        let mut w =
            BundleWriter::create(dir, layout.clone(), vec!["a".into(), "b".into()]).unwrap();
        for id in ["a", "b"] {
            let style: Vec<f32> = (0..8).map(|x| x as f32 * 0.5).collect();
            w.write_tensor(&format!("style/{id}"), &[8], &style)
                .unwrap();
            for spec in layout.layers() {
                let data = vec![1.0; spec.activation_len()];
                w.write_tensor(
                    &format!("act/{id}/{}", spec.name),
                    &[spec.channels, spec.resolution, spec.resolution],
                    &data,
                )
                .unwrap();
            }
        }
        w.finish().unwrap()
    }

    #[test]
    fn loads_two_image_bundle() {
        let tmp = tempfile::tempdir().unwrap();
        let b = two_image_bundle(tmp.path());
        assert_eq!(b.layout().total_channels(), 8);
        assert_eq!(b.images(), ["a", "b"]);
        let s = b.style("b").unwrap();
        assert_eq!(s.values[3], 1.5);
        let act = b.activations("a").unwrap();
        assert_eq!(act.layers[1].data.len(), 4 * 64);
    }

    #[test]
    fn truncated_blob_is_shape_mismatch() {
        let tmp = tempfile::tempdir().unwrap();
        let b = two_image_bundle(tmp.path());
        let rec = b.record("style/a").unwrap();
        let path = tmp.path().join(&rec.file);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            Bundle::load(tmp.path()),
            Err(Error::ShapeMismatch { name, .. }) if name == "style/a"
        ));
    }

    #[test]
    fn version_two_is_unsupported() {
        let tmp = tempfile::tempdir().unwrap();
        two_image_bundle(tmp.path());
        let p = tmp.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&p)
            .unwrap()
            .replace("\"version\": 1", "\"version\": 2");
        fs::write(&p, text).unwrap();
        assert!(matches!(
            Bundle::load(tmp.path()),
            Err(Error::UnsupportedVersion(2))
        ));
    }

    #[test]
    fn missing_manifest() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(
            Bundle::load(tmp.path()),
            Err(Error::MissingManifest(_))
        ));
    }

    #[test]
    fn non_contiguous_layout_in_manifest() {
        let tmp = tempfile::tempdir().unwrap();
        two_image_bundle(tmp.path());
        let p = tmp.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&p)
            .unwrap()
            .replace("\"style_offset\": 4", "\"style_offset\": 5");
        fs::write(&p, text).unwrap();
        assert!(matches!(
            Bundle::load(tmp.path()),
            Err(Error::NonContiguousLayout(_))
        ));
    }

    #[test]
    fn resave_is_byte_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let b = two_image_bundle(&tmp.path().join("one"));
        let two = tmp.path().join("two");
        let three = tmp.path().join("three");
        save_bundle(&b, &two).unwrap();
        let b2 = load_bundle(&two).unwrap();
        save_bundle(&b2, &three).unwrap();
        for entry in fs::read_dir(&two).unwrap() {
            let name = entry.unwrap().file_name();
            assert_eq!(
                fs::read(two.join(&name)).unwrap(),
                fs::read(three.join(&name)).unwrap(),
                "{name:?}"
            );
        }
    }

    #[test]
    fn empty_bundle_is_valid() {
        let tmp = tempfile::tempdir().unwrap();
        let b = BundleWriter::create(tmp.path(), layout(), vec![])
            .unwrap()
            .finish()
            .unwrap();
        assert!(b.images().is_empty());
        assert!(b.manifest().tensors.is_empty());
    }

    #[cfg(unix)]
    #[test]
    fn read_only_target_is_io_failure() {
        use std::os::unix::fs::PermissionsExt;
        let tmp = tempfile::tempdir().unwrap();
        let b = two_image_bundle(&tmp.path().join("src"));
        let ro = tmp.path().join("ro");
        fs::create_dir(&ro).unwrap();
        fs::set_permissions(&ro, fs::Permissions::from_mode(0o555)).unwrap();
        // root ignores directory permissions
        let probe = ro.join("probe");
        if fs::write(&probe, b"x").is_ok() {
            let _ = fs::remove_file(&probe);
            return;
        }
        assert!(matches!(
            save_bundle(&b, ro.join("out")),
            Err(Error::IoFailure { .. })
        ));
    }

    #[test]
    fn mapped_and_read_agree() {
        let tmp = tempfile::tempdir().unwrap();
        let b = two_image_bundle(tmp.path());
        let (_, owned) = b.read_tensor("style/a").unwrap();
        let (_, mapped) = b.map_tensor("style/a").unwrap();
        assert_eq!(owned.as_slice(), mapped.as_slice());
    }

    #[test]
    fn missing_activation_layer() {
        let tmp = tempfile::tempdir().unwrap();
        let layout = layout();
        let mut w = BundleWriter::create(tmp.path(), layout, vec!["a".into()]).unwrap();
        w.write_tensor("style/a", &[8], &[0.0; 8]).unwrap();
        w.write_tensor("act/a/L0", &[4, 4, 4], &[0.0; 64]).unwrap();
        let b = w.finish().unwrap();
        assert!(matches!(
            b.activations("a"),
            Err(Error::MissingActivations(id)) if id == "a"
        ));
    }
}
