use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{generate_scene, GeneratorConfig, SceneSample, Vocabulary};
use crate::archive::{sha256_hex, ArrayArchive};
use crate::error::{Error, Result};
use crate::evalmetrics::BBox;

pub const MANIFEST_FILE: &str = "manifest.json";
const SAMPLE_EXT: &str = "safetensors";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub test: usize,
}

impl SplitSizes {
    /// Split sizes of the real-world benchmark this generator stands in for.
    pub const PAPER: SplitSizes = SplitSizes {
        train: 2970,
        test: 1251,
    };
    pub const CI: SplitSizes = SplitSizes {
        train: 300,
        test: 100,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    /// Path relative to the dataset root.
    pub path: String,
    pub sha256: String,
    pub gt_area: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub vocabulary: Vocabulary,
    pub vocabulary_fingerprint: String,
    pub generator_config: GeneratorConfig,
    pub splits: BTreeMap<Split, Vec<ManifestEntry>>,
}

impl DatasetManifest {
    pub fn new(generator_config: &GeneratorConfig) -> Self {
        DatasetManifest {
            format_version: FORMAT_VERSION,
            vocabulary: generator_config.vocabulary.clone(),
            vocabulary_fingerprint: generator_config.vocabulary.fingerprint(),
            generator_config: generator_config.clone(),
            splits: BTreeMap::new(),
        }
    }

    pub fn entries(&self, split: Split) -> &[ManifestEntry] {
        self.splits.get(&split).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self, split: Split) -> usize {
        self.entries(split).len()
    }

    fn write(&self, root: &Path) -> Result<()> {
        let path = root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).map_err(|e| Error::io(path, e))
    }
}

fn sample_to_archive(sample: &SceneSample, fingerprint: &str) -> Result<ArrayArchive> {
    let (h, w) = (sample.height(), sample.width());
    let mut a = ArrayArchive::default();
    let std_layout = |v: &[f32]| v.to_vec();
    a.put_f32(
        "image",
        &[h, w, 3],
        &std_layout(sample.image.as_standard_layout().as_slice().expect("std")),
    );
    a.put_f32(
        "depth",
        &[h, w],
        sample.depth.as_standard_layout().as_slice().expect("std"),
    );
    a.put_u8(
        "sender_mask",
        &[h, w],
        sample.sender_mask.as_standard_layout().as_slice().expect("std"),
    );
    a.put_f32(
        "gesture_field",
        &[h, w, 3],
        sample
            .gesture_field
            .as_standard_layout()
            .as_slice()
            .expect("std"),
    );
    a.put_u32("tokens", &[sample.tokens.len()], &sample.tokens);
    a.put_f64("gt_box", &[4], &sample.gt_box.to_array());
    a.metadata.insert("sample_id".into(), sample.sample_id.clone());
    a.metadata
        .insert("rng_seed".into(), sample.rng_seed.to_string());
    a.metadata
        .insert("pose".into(), serde_json::to_string(&sample.pose)?);
    a.metadata
        .insert("objects".into(), serde_json::to_string(&sample.objects)?);
    a.metadata.insert("target".into(), sample.target.to_string());
    a.metadata
        .insert("vocabulary_fingerprint".into(), fingerprint.to_string());
    Ok(a)
}

fn shape_check(name: &str, got: &[usize], want: &[usize]) -> Result<()> {
    if got != want {
        return Err(Error::Format(format!(
            "array {name}: shape {got:?}, expected {want:?}"
        )));
    }
    Ok(())
}

fn sample_from_archive(a: &ArrayArchive) -> Result<SceneSample> {
    let (ishape, image) = a.get_f32("image")?;
    if ishape.len() != 3 || ishape[2] != 3 {
        return Err(Error::Format(format!("image shape {ishape:?}")));
    }
    let (h, w) = (ishape[0], ishape[1]);
    let (dshape, depth) = a.get_f32("depth")?;
    shape_check("depth", &dshape, &[h, w])?;
    let (mshape, mask) = a.get_u8("sender_mask")?;
    shape_check("sender_mask", &mshape, &[h, w])?;
    let (gshape, gesture) = a.get_f32("gesture_field")?;
    shape_check("gesture_field", &gshape, &[h, w, 3])?;
    let (_, tokens) = a.get_u32("tokens")?;
    let (bshape, gt) = a.get_f64("gt_box")?;
    shape_check("gt_box", &bshape, &[4])?;
    let parse = |k: &str| -> Result<u64> {
        a.meta(k)?
            .parse()
            .map_err(|_| Error::Format(format!("metadata {k} is not an integer")))
    };
    let bad = |e: ndarray::ShapeError| Error::Format(e.to_string());
    Ok(SceneSample {
        image: Array3::from_shape_vec((h, w, 3), image).map_err(bad)?,
        depth: Array2::from_shape_vec((h, w), depth).map_err(bad)?,
        sender_mask: Array2::from_shape_vec((h, w), mask).map_err(bad)?,
        gesture_field: Array3::from_shape_vec((h, w, 3), gesture).map_err(bad)?,
        tokens,
        gt_box: BBox::new(gt[0], gt[1], gt[2], gt[3]),
        pose: serde_json::from_str(a.meta("pose")?)?,
        objects: serde_json::from_str(a.meta("objects")?)?,
        target: parse("target")? as usize,
        sample_id: a.meta("sample_id")?.to_string(),
        rng_seed: parse("rng_seed")?,
    })
}

fn relative_path(split: Split, sample_id: &str) -> String {
    format!("{split}/{sample_id}.{SAMPLE_EXT}")
}

fn write_one(
    root: &Path,
    manifest: &mut DatasetManifest,
    split: Split,
    sample: &SceneSample,
) -> Result<()> {
    let rel = relative_path(split, &sample.sample_id);
    let archive = sample_to_archive(sample, &manifest.vocabulary_fingerprint)?;
    let bytes = archive.write(&root.join(&rel))?;
    manifest.splits.entry(split).or_default().push(ManifestEntry {
        sample_id: sample.sample_id.clone(),
        path: rel,
        sha256: sha256_hex(&bytes),
        gt_area: sample.gt_area(),
    });
    Ok(())
}

/// Writes `<root>/manifest.json` and one array file per sample under
/// `<root>/<split>/`. Sample ids must be unique across splits.
pub fn write_dataset(
    root: &Path,
    generator_config: &GeneratorConfig,
    samples: &[(Split, &SceneSample)],
) -> Result<DatasetManifest> {
    let mut manifest = DatasetManifest::new(generator_config);
    let mut seen = std::collections::HashSet::new();
    for (split, sample) in samples {
        if !seen.insert(sample.sample_id.as_str()) {
            return Err(Error::Format(format!(
                "duplicate sample id {}",
                sample.sample_id
            )));
        }
        generator_config.vocabulary.check_tokens(&sample.tokens)?;
        write_one(root, &mut manifest, *split, sample)?;
    }
    manifest.write(root)?;
    Ok(manifest)
}

/// Seed of the `index`-th sample of `split` for a dataset seeded by `seed`.
pub fn sample_seed(seed: u64, split: Split, index: usize) -> u64 {
    let offset = match split {
        Split::Train => 0,
        Split::Test => 1 << 31,
    };
    (seed << 32) ^ (offset + index as u64)
}

/// Generates and writes a dataset without holding every sample in memory.
pub fn generate_dataset(
    root: &Path,
    generator_config: &GeneratorConfig,
    sizes: SplitSizes,
    seed: u64,
) -> Result<DatasetManifest> {
    generator_config.validate()?;
    let mut manifest = DatasetManifest::new(generator_config);
    for (split, n) in [(Split::Train, sizes.train), (Split::Test, sizes.test)] {
        manifest.splits.entry(split).or_default();
        for i in 0..n {
            let mut sample = generate_scene(sample_seed(seed, split, i), generator_config)?;
            sample.sample_id = format!("{split}_{i:05}");
            write_one(root, &mut manifest, split, &sample)?;
        }
    }
    manifest.write(root)?;
    Ok(manifest)
}

/// Read-only view over a dataset directory; samples are loaded on demand.
#[derive(Clone, Debug)]
pub struct DatasetReader {
    root: PathBuf,
    manifest: DatasetManifest,
}

pub fn read_dataset(root: &Path) -> Result<DatasetReader> {
    DatasetReader::open(root)
}

impl DatasetReader {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.vocabulary.fingerprint() != manifest.vocabulary_fingerprint {
            return Err(Error::Vocabulary {
                sample_id: "<manifest>".into(),
                detail: "manifest vocabulary does not match its fingerprint".into(),
            });
        }
        Ok(DatasetReader {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.manifest.vocabulary
    }

    pub fn len(&self, split: Split) -> usize {
        self.manifest.len(split)
    }

    pub fn load(&self, split: Split, index: usize) -> Result<SceneSample> {
        let entry = self.manifest.entries(split).get(index).ok_or_else(|| {
            Error::UnknownSample(format!("{split}[{index}]"))
        })?;
        self.load_entry(entry)
    }

    pub fn get(&self, sample_id: &str) -> Result<SceneSample> {
        let entry = self
            .manifest
            .splits
            .values()
            .flatten()
            .find(|e| e.sample_id == sample_id)
            .ok_or_else(|| Error::UnknownSample(sample_id.to_string()))?;
        self.load_entry(entry)
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<SceneSample>> {
        (0..self.len(split)).map(|i| self.load(split, i)).collect()
    }

    fn load_entry(&self, entry: &ManifestEntry) -> Result<SceneSample> {
        let path = self.root.join(&entry.path);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::MissingSample {
                    sample_id: entry.sample_id.clone(),
                    path,
                })
            }
            Err(e) => return Err(Error::io(path, e)),
        };
        let actual = sha256_hex(&bytes);
        if actual != entry.sha256 {
            return Err(Error::Checksum {
                sample_id: entry.sample_id.clone(),
                expected: entry.sha256.clone(),
                actual,
            });
        }
        let archive = ArrayArchive::from_bytes(&bytes)?;
        let fingerprint = archive.meta("vocabulary_fingerprint")?;
        if fingerprint != self.manifest.vocabulary_fingerprint {
            return Err(Error::Vocabulary {
                sample_id: entry.sample_id.clone(),
                detail: format!(
                    "sample written with vocabulary {fingerprint}, manifest has {}",
                    self.manifest.vocabulary_fingerprint
                ),
            });
        }
        let sample = sample_from_archive(&archive)?;
        if let Err(e) = self.manifest.vocabulary.check_tokens(&sample.tokens) {
            return Err(Error::Vocabulary {
                sample_id: entry.sample_id.clone(),
                detail: e.to_string(),
            });
        }
        Ok(sample)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> GeneratorConfig {
        GeneratorConfig::default().with_image_size(64)
    }

    #[test]
    fn round_trip_ten_samples() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let samples: Vec<SceneSample> = (0..10)
            .map(|i| {
                let mut s = generate_scene(i, &cfg).unwrap();
                s.sample_id = format!("s{i}");
                s
            })
            .collect();
        let pairs: Vec<(Split, &SceneSample)> = samples
            .iter()
            .enumerate()
            .map(|(i, s)| (if i < 7 { Split::Train } else { Split::Test }, s))
            .collect();
        write_dataset(dir.path(), &cfg, &pairs).unwrap();
        let reader = read_dataset(dir.path()).unwrap();
        assert_eq!(reader.len(Split::Train), 7);
        assert_eq!(reader.len(Split::Test), 3);
        for s in &samples {
            assert_eq!(&reader.get(&s.sample_id).unwrap(), s);
        }
    }

    #[test]
    fn missing_file_names_the_sample() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        generate_dataset(dir.path(), &cfg, SplitSizes { train: 3, test: 1 }, 9).unwrap();
        std::fs::remove_file(dir.path().join("train/train_00001.safetensors")).unwrap();
        let reader = read_dataset(dir.path()).unwrap();
        match reader.load(Split::Train, 1) {
            Err(Error::MissingSample { sample_id, .. }) => assert_eq!(sample_id, "train_00001"),
            other => panic!("expected missing-sample error, got {other:?}"),
        }
        assert!(reader.load(Split::Train, 0).is_ok());
    }

    #[test]
    fn corrupted_file_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        generate_dataset(dir.path(), &cfg, SplitSizes { train: 1, test: 0 }, 1).unwrap();
        let path = dir.path().join("train/train_00000.safetensors");
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 0xff;
        std::fs::write(&path, bytes).unwrap();
        let reader = read_dataset(dir.path()).unwrap();
        assert!(matches!(
            reader.load(Split::Train, 0),
            Err(Error::Checksum { .. })
        ));
    }

    #[test]
    fn vocabulary_drift_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        generate_dataset(dir.path(), &cfg, SplitSizes { train: 1, test: 0 }, 1).unwrap();
        // shrink the manifest vocabulary so stored tokens fall outside it
        let path = dir.path().join(MANIFEST_FILE);
        let mut m: DatasetManifest =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        m.vocabulary.relations.truncate(1);
        m.vocabulary_fingerprint = m.vocabulary.fingerprint();
        std::fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
        let reader = read_dataset(dir.path()).unwrap();
        assert!(matches!(
            reader.load(Split::Train, 0),
            Err(Error::Vocabulary { .. })
        ));
    }

    #[test]
    fn paper_split_sizes() {
        assert_eq!(SplitSizes::PAPER.train, 2970);
        assert_eq!(SplitSizes::PAPER.test, 1251);
    }
}
