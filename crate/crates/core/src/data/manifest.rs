//! Dataset manifests: line-delimited JSON with a versioned header line,
//! followed by one record per (original, qp) pair or failure.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::codec::{encode_decode, workdir_for, CodecSpec};
use crate::data::color::COLORSPACE;
use crate::data::image_io::{load_png, save_png};
use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::Tensor;

pub const MANIFEST_FORMAT: &str = "msgdn-manifest";
pub const MANIFEST_VERSION: u32 = 1;

/// One (original, compressed) pair at a given QP.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImagePair {
    pub original: PathBuf,
    pub compressed: PathBuf,
    pub qp: i32,
    pub bits: u64,
    pub width: usize,
    pub height: usize,
}

impl ImagePair {
    pub fn bpp(&self) -> f64 {
        self.bits as f64 / (self.width * self.height) as f64
    }

    /// File name of the original, used as the image key in tables.
    pub fn key(&self) -> String {
        self.original
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.original.to_string_lossy().into_owned())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairFailure {
    pub original: PathBuf,
    pub qp: i32,
    pub reason: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    colorspace: String,
    codec: String,
    deterministic_codec: bool,
    qps: Vec<i32>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Record {
    Pair(ImagePair),
    Failure(PairFailure),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub colorspace: String,
    pub codec: String,
    pub deterministic_codec: bool,
    pub qps: Vec<i32>,
    pub pairs: Vec<ImagePair>,
    pub failures: Vec<PairFailure>,
    /// Directory relative paths are resolved against; not serialized.
    pub base: PathBuf,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for p in &self.pairs {
            if !seen.insert((&p.original, p.qp)) {
                return Err(Error::config(format!(
                    "duplicate manifest entry for {} at qp {}",
                    p.original.display(),
                    p.qp
                )));
            }
            if p.bits == 0 || p.width == 0 || p.height == 0 {
                return Err(Error::config(format!("degenerate pair {}", p.original.display())));
            }
            if !self.qps.contains(&p.qp) {
                return Err(Error::config(format!("pair qp {} not in configured set {:?}", p.qp, self.qps)));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let header = Header {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            colorspace: self.colorspace.clone(),
            codec: self.codec.clone(),
            deterministic_codec: self.deterministic_codec,
            qps: self.qps.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        let records = self
            .pairs
            .iter()
            .cloned()
            .map(Record::Pair)
            .chain(self.failures.iter().cloned().map(Record::Failure));
        for r in records {
            out.push_str(&serde_json::to_string(&r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Header = serde_json::from_str(lines.next().ok_or_else(|| Error::parse("manifest", "empty file"))?)
            .map_err(|e| Error::parse("manifest header", e))?;
        if header.format != MANIFEST_FORMAT || header.version != MANIFEST_VERSION {
            return Err(Error::parse(
                "manifest header",
                format!("unsupported format {} v{}", header.format, header.version),
            ));
        }
        let mut m = DatasetManifest {
            colorspace: header.colorspace,
            codec: header.codec,
            deterministic_codec: header.deterministic_codec,
            qps: header.qps,
            pairs: Vec::new(),
            failures: Vec::new(),
            base: base.to_path_buf(),
        };
        for (i, line) in lines.enumerate() {
            match serde_json::from_str(line).map_err(|e| Error::parse(format!("manifest record {}", i + 1), e))? {
                Record::Pair(p) => m.pairs.push(p),
                Record::Failure(f) => m.failures.push(f),
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &parent_dir(path))
    }

    /// Absolute location of a path recorded in this manifest.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn find(&self, key: &str, qp: i32) -> Option<&ImagePair> {
        self.pairs.iter().find(|p| p.key() == key && p.qp == qp)
    }

    /// Reads both images of every pair.
    pub fn load_images(&self) -> Result<Vec<LoadedPair>> {
        let loaded = exec::map_slice(&self.pairs, |p| -> Result<LoadedPair> {
            let original = load_png(&self.resolve(&p.original))?;
            let compressed = load_png(&self.resolve(&p.compressed))?;
            LoadedPair::new(p.clone(), original, compressed)
        });
        loaded.into_iter().collect()
    }
}

/// A pair with both images in memory.
#[derive(Clone, Debug)]
pub struct LoadedPair {
    pub pair: ImagePair,
    pub original: Tensor,
    pub compressed: Tensor,
}

impl LoadedPair {
    pub fn new(pair: ImagePair, original: Tensor, compressed: Tensor) -> Result<Self> {
        original.expect_same_shape(&compressed)?;
        let (_, _, h, w) = original.dims4()?;
        if (h, w) != (pair.height, pair.width) {
            return Err(Error::shape(format!(
                "{} is {w}x{h}, manifest says {}x{}",
                pair.original.display(),
                pair.width,
                pair.height
            )));
        }
        Ok(LoadedPair {
            pair,
            original,
            compressed,
        })
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// PNG files directly inside `dir`, sorted by path.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .map(|e| e.eq_ignore_ascii_case("png"))
            .unwrap_or(false);
        if is_png && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Codes every PNG in `image_dir` at every QP and writes the manifest to
/// `out`. Compressed images go to `<out dir>/compressed/`. Pairs already
/// present in an existing manifest at `out` (same codec and colorspace, with
/// the compressed file still on disk) are reused without re-encoding.
pub fn build_manifest(image_dir: &Path, qps: &[i32], codec: &CodecSpec, out: &Path) -> Result<DatasetManifest> {
    codec.validate()?;
    let mut qps: Vec<i32> = qps.to_vec();
    qps.sort_unstable();
    qps.dedup();
    if qps.is_empty() {
        return Err(Error::config("no QPs given"));
    }
    let images = list_images(image_dir)?;
    if images.is_empty() {
        return Err(Error::config(format!("no PNG images in {}", image_dir.display())));
    }
    let out_dir = parent_dir(out);
    let identity = codec.identity();

    let mut cache: BTreeMap<(PathBuf, i32), ImagePair> = BTreeMap::new();
    if out.is_file() {
        match DatasetManifest::load(out) {
            Ok(old) if old.codec == identity && old.colorspace == COLORSPACE => {
                for p in old.pairs {
                    if old.base.join(&p.compressed).is_file() {
                        cache.insert((p.original.clone(), p.qp), p);
                    }
                }
            }
            Ok(_) => log::info!("existing manifest uses a different codec; rebuilding"),
            Err(e) => log::warn!("ignoring unreadable manifest {}: {e}", out.display()),
        }
    }

    let originals: Vec<PathBuf> = images
        .iter()
        .map(|p| std::fs::canonicalize(p).map_err(|e| Error::io(p, e)))
        .collect::<Result<_>>()?;
    let loaded = exec::map_slice(&originals, |p| load_png(p));

    enum Outcome {
        Pair(ImagePair),
        Failure(PairFailure),
    }
    let jobs: Vec<(usize, i32)> = (0..originals.len())
        .flat_map(|i| qps.iter().map(move |&q| (i, q)))
        .collect();
    let scratch = out_dir.join(".msgdn-work");
    let outcomes = exec::map_slice(&jobs, |&(i, qp)| -> Outcome {
        let original = &originals[i];
        let fail = |reason: String| {
            Outcome::Failure(PairFailure {
                original: original.clone(),
                qp,
                reason,
            })
        };
        let image = match &loaded[i] {
            Ok(img) => img,
            Err(e) => return fail(e.to_string()),
        };
        if let Some(p) = cache.get(&(original.clone(), qp)) {
            return Outcome::Pair(p.clone());
        }
        let stem = original.file_stem().unwrap_or_default().to_string_lossy();
        let rel = PathBuf::from("compressed").join(format!("{stem}_qp{qp}.png"));
        let work = workdir_for(&scratch, &format!("{i}-{qp}"));
        let result = encode_decode(image, qp, codec, &work).and_then(|coded| {
            save_png(&out_dir.join(&rel), &coded.decoded)?;
            let (_, _, h, w) = image.dims4()?;
            Ok(ImagePair {
                original: original.clone(),
                compressed: rel.clone(),
                qp,
                bits: coded.bits,
                width: w,
                height: h,
            })
        });
        let _ = std::fs::remove_dir_all(&work);
        match result {
            Ok(p) => Outcome::Pair(p),
            Err(e) => fail(e.to_string()),
        }
    });
    let _ = std::fs::remove_dir(&scratch);

    let mut manifest = DatasetManifest {
        colorspace: COLORSPACE.into(),
        codec: identity,
        deterministic_codec: codec.deterministic,
        qps,
        pairs: Vec::new(),
        failures: Vec::new(),
        base: out_dir,
    };
    for o in outcomes {
        match o {
            Outcome::Pair(p) => manifest.pairs.push(p),
            Outcome::Failure(f) => {
                log::warn!("skipping {} at qp {}: {}", f.original.display(), f.qp, f.reason);
                manifest.failures.push(f);
            }
        }
    }
    if manifest.pairs.is_empty() {
        return Err(Error::Other(format!(
            "no pair could be built ({} failures)",
            manifest.failures.len()
        )));
    }
    if !manifest.failures.is_empty() {
        log::warn!("{} of {} pairs failed", manifest.failures.len(), jobs.len());
    }
    manifest.validate()?;
    manifest.save(out)?;
    Ok(manifest)
}
