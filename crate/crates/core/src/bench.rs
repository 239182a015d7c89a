//! Synthetic open-set benchmark: generation, manifest and on-disk layout.
//!
//! ```text
//! <dir>/manifest.jsonl             schema line, then one entry per image
//! <dir>/<split>/NNNNNN.png         RGB8 image
//! <dir>/<split>/masks/NNNNNN_k.png 8-bit mask of object k (0 or 255)
//! ```

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{default_universe, derive_seed, generate_scene, Background, ClassDef, ClassId, ObjectAnnotation, Scene, SceneSpec};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Mask};

pub const MANIFEST_SCHEMA: &str = "openslot.manifest/1";
pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Directory names of the four splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SplitName {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "test_known")]
    TestKnown,
    #[serde(rename = "test_H")]
    TestH,
    #[serde(rename = "test_M")]
    TestM,
}

impl SplitName {
    pub const ALL: [SplitName; 4] = [SplitName::Train, SplitName::TestKnown, SplitName::TestH, SplitName::TestM];

    pub fn dir_name(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::TestKnown => "test_known",
            SplitName::TestH => "test_H",
            SplitName::TestM => "test_M",
        }
    }

    fn stream(self) -> u64 {
        match self {
            SplitName::Train => 100,
            SplitName::TestKnown => 101,
            SplitName::TestH => 102,
            SplitName::TestM => 103,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub test_known: usize,
    pub test_h: usize,
    pub test_m: usize,
}

impl SplitSizes {
    pub fn get(&self, s: SplitName) -> usize {
        match s {
            SplitName::Train => self.train,
            SplitName::TestKnown => self.test_known,
            SplitName::TestH => self.test_h,
            SplitName::TestM => self.test_m,
        }
    }
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 2000,
            test_known: 500,
            test_h: 500,
            test_m: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub kkc: Vec<ClassId>,
    pub uuc: Vec<ClassId>,
    pub sizes: SplitSizes,
    /// Object counts for training images, drawn uniformly from this list.
    pub train_object_counts: Vec<usize>,
    /// Object counts for test images, drawn uniformly from this list.
    pub test_object_counts: Vec<usize>,
    pub background: Background,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            kkc: (0..6).collect(),
            uuc: (6..12).collect(),
            sizes: SplitSizes::default(),
            train_object_counts: vec![1, 1, 2, 3],
            test_object_counts: vec![2, 3],
            background: Background::Solid,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self, universe: &[ClassDef]) -> Result<()> {
        if let Some(c) = self.kkc.iter().find(|c| self.uuc.contains(c)) {
            return Err(Error::Split(format!("class {c} is both known and unknown")));
        }
        if self.kkc.is_empty() || self.uuc.is_empty() {
            return Err(Error::Split("known and unknown class sets must be nonempty".into()));
        }
        if let Some(c) = self.kkc.iter().chain(&self.uuc).find(|&&c| c >= universe.len()) {
            return Err(Error::Split(format!("class {c} is not in the universe")));
        }
        for (name, counts) in [
            ("bench.train_object_counts", &self.train_object_counts),
            ("bench.test_object_counts", &self.test_object_counts),
        ] {
            if counts.is_empty() || counts.iter().any(|&n| n == 0 || n > SceneSpec::MAX_OBJECTS) {
                return Err(Error::Config(format!(
                    "{name} must list counts in 1..={}",
                    SceneSpec::MAX_OBJECTS
                )));
            }
        }
        if self.test_object_counts.iter().any(|&n| n < 2) && self.sizes.test_m > 0 {
            return Err(Error::Config(
                "bench.test_object_counts must be at least 2 for mixed images".into(),
            ));
        }
        let max = |v: &[usize]| v.iter().copied().max().unwrap_or(0);
        if max(&self.train_object_counts) > self.kkc.len() || max(&self.test_object_counts) > self.kkc.len().min(self.uuc.len()) {
            return Err(Error::Config("object counts exceed the distinct classes available".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub class_id: ClassId,
    pub bbox: BBox,
    /// Mask path relative to the benchmark directory.
    pub mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    pub split: SplitName,
    /// Image path relative to the benchmark directory.
    pub file: String,
    /// Sorted distinct class ids.
    pub label_ids: Vec<ClassId>,
    pub objects: Vec<ObjectRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestHeader {
    schema: String,
    config: BenchmarkConfig,
    counts: SplitSizes,
}

/// A generated or loaded benchmark held in memory.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub config: BenchmarkConfig,
    pub entries: Vec<ManifestEntry>,
    /// Same order as `entries`.
    pub scenes: Vec<Scene>,
}

impl Benchmark {
    pub fn indices(&self, split: SplitName) -> Vec<usize> {
        (0..self.entries.len()).filter(|&i| self.entries[i].split == split).collect()
    }

    pub fn counts(&self) -> SplitSizes {
        let c = |s| self.entries.iter().filter(|e| e.split == s).count();
        SplitSizes {
            train: c(SplitName::Train),
            test_known: c(SplitName::TestKnown),
            test_h: c(SplitName::TestH),
            test_m: c(SplitName::TestM),
        }
    }
}

fn draw_classes(split: SplitName, n: usize, cfg: &BenchmarkConfig, rng: &mut ChaCha8Rng) -> Vec<ClassId> {
    let pick = |pool: &[ClassId], k: usize, rng: &mut ChaCha8Rng| -> Vec<ClassId> {
        pool.choose_multiple(rng, k).copied().collect()
    };
    match split {
        SplitName::Train | SplitName::TestKnown => pick(&cfg.kkc, n, rng),
        SplitName::TestH => pick(&cfg.uuc, n, rng),
        SplitName::TestM => {
            let known = rng.random_range(1..n);
            let mut c = pick(&cfg.kkc, known, rng);
            c.extend(pick(&cfg.uuc, n - known, rng));
            c.shuffle(rng);
            c
        }
    }
}

/// Generates one image of `split`. Placement failures retry with a fresh
/// derived seed.
pub fn generate_entry_scene(cfg: &BenchmarkConfig, universe: &[ClassDef], split: SplitName, index: usize) -> Result<Scene> {
    let counts = match split {
        SplitName::Train => &cfg.train_object_counts,
        _ => &cfg.test_object_counts,
    };
    let mut last = None;
    for attempt in 0..16u64 {
        let seed = derive_seed(cfg.seed, split.stream(), ((index as u64) << 8) | attempt);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = *counts.choose(&mut rng).expect("validated nonempty");
        let mut spec = SceneSpec::new(draw_classes(split, n, cfg, &mut rng));
        spec.background = cfg.background;
        match generate_scene(&spec, universe, derive_seed(seed, 1, 0)) {
            Ok(s) => return Ok(s),
            Err(e @ Error::Placement { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Generates every split in memory.
pub fn generate_benchmark(cfg: &BenchmarkConfig) -> Result<Benchmark> {
    let universe = default_universe();
    cfg.validate(&universe)?;
    let mut entries = Vec::new();
    let mut scenes = Vec::new();
    for split in SplitName::ALL {
        for index in 0..cfg.sizes.get(split) {
            let scene = generate_entry_scene(cfg, &universe, split, index)?;
            let id = entries.len();
            let dir = split.dir_name();
            let objects = scene
                .objects
                .iter()
                .enumerate()
                .map(|(k, o)| ObjectRecord {
                    class_id: o.class_id,
                    bbox: o.bbox,
                    mask: format!("{dir}/masks/{index:06}_{k}.png"),
                })
                .collect();
            entries.push(ManifestEntry {
                id,
                split,
                file: format!("{dir}/{index:06}.png"),
                label_ids: scene.label_set(),
                objects,
            });
            scenes.push(scene);
        }
    }
    let bench = Benchmark {
        config: cfg.clone(),
        entries,
        scenes,
    };
    check_label_spaces(&bench)?;
    Ok(bench)
}

/// Re-asserts that every entry's labels fit its split.
pub fn check_label_spaces(bench: &Benchmark) -> Result<()> {
    let known = |c: &ClassId| bench.config.kkc.contains(c);
    let unknown = |c: &ClassId| bench.config.uuc.contains(c);
    for e in &bench.entries {
        let l = &e.label_ids;
        let ok = !l.is_empty()
            && match e.split {
                SplitName::Train | SplitName::TestKnown => l.iter().all(known),
                SplitName::TestH => l.iter().all(unknown),
                SplitName::TestM => l.iter().any(known) && l.iter().any(unknown) && l.iter().all(|c| known(c) || unknown(c)),
            };
        if !ok {
            return Err(Error::Split(format!(
                "image {} ({}) has labels {l:?} that do not belong in {}",
                e.id,
                e.file,
                e.split.dir_name()
            )));
        }
    }
    Ok(())
}

/// Writes images, masks and manifest under `dir`. Refuses to overwrite an
/// existing manifest.
pub fn save_benchmark(bench: &Benchmark, dir: &Path) -> Result<()> {
    let manifest = dir.join(MANIFEST_FILE);
    if manifest.exists() {
        return Err(Error::Config(format!(
            "{} already exists; refusing to overwrite",
            manifest.display()
        )));
    }
    for split in SplitName::ALL {
        let d = dir.join(split.dir_name()).join("masks");
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for (e, s) in bench.entries.iter().zip(&bench.scenes) {
        write_png(&dir.join(&e.file), s.width, s.height, png::ColorType::Rgb, &s.pixels)?;
        for (o, rec) in s.objects.iter().zip(&e.objects) {
            let bytes: Vec<u8> = o.mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
            write_png(&dir.join(&rec.mask), s.width, s.height, png::ColorType::Grayscale, &bytes)?;
        }
    }
    let f = File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut w = BufWriter::new(f);
    let header = ManifestHeader {
        schema: MANIFEST_SCHEMA.into(),
        config: bench.config.clone(),
        counts: bench.counts(),
    };
    let io = |e| Error::io(&manifest, e);
    writeln!(w, "{}", serde_json::to_string(&header)?).map_err(io)?;
    for e in &bench.entries {
        writeln!(w, "{}", serde_json::to_string(e)?).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

fn manifest_error(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.into(),
        what: "manifest",
        detail: detail.into(),
    }
}

/// Reads the manifest only.
pub fn read_manifest(dir: &Path) -> Result<(BenchmarkConfig, Vec<ManifestEntry>)> {
    let path = dir.join(MANIFEST_FILE);
    let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = BufReader::new(f).lines();
    let first = lines
        .next()
        .ok_or_else(|| manifest_error(&path, "empty file"))?
        .map_err(|e| Error::io(&path, e))?;
    let header: ManifestHeader =
        serde_json::from_str(&first).map_err(|e| manifest_error(&path, format!("line 1: {e}")))?;
    if header.schema != MANIFEST_SCHEMA {
        return Err(manifest_error(&path, format!("unsupported schema `{}`", header.schema)));
    }
    let mut entries = Vec::new();
    for (k, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry =
            serde_json::from_str(&line).map_err(|e| manifest_error(&path, format!("line {}: {e}", k + 2)))?;
        entries.push(e);
    }
    let counted = SplitSizes {
        train: entries.iter().filter(|e| e.split == SplitName::Train).count(),
        test_known: entries.iter().filter(|e| e.split == SplitName::TestKnown).count(),
        test_h: entries.iter().filter(|e| e.split == SplitName::TestH).count(),
        test_m: entries.iter().filter(|e| e.split == SplitName::TestM).count(),
    };
    if counted != header.counts {
        return Err(manifest_error(
            &path,
            format!("header counts {:?} disagree with entries {counted:?}", header.counts),
        ));
    }
    Ok((header.config, entries))
}

/// Loads a saved benchmark and re-checks its invariants.
pub fn load_benchmark(dir: &Path) -> Result<Benchmark> {
    let (config, entries) = read_manifest(dir)?;
    let mut scenes = Vec::with_capacity(entries.len());
    for e in &entries {
        let (w, h, pixels) = read_png(&dir.join(&e.file), png::ColorType::Rgb)?;
        let mut objects = Vec::with_capacity(e.objects.len());
        for o in &e.objects {
            let mpath = dir.join(&o.mask);
            let (mw, mh, bytes) = read_png(&mpath, png::ColorType::Grayscale)?;
            if (mw, mh) != (w, h) {
                return Err(Error::Format {
                    path: mpath,
                    what: "mask",
                    detail: format!("{mw}x{mh} mask for a {w}x{h} image"),
                });
            }
            let mask = Mask::from_bits(w, h, bytes.iter().map(|&b| b >= 128).collect());
            if mask.bbox() != Some(o.bbox) {
                return Err(Error::Format {
                    path: mpath,
                    what: "mask",
                    detail: format!("box {:?} is not tight around the mask", o.bbox),
                });
            }
            objects.push(ObjectAnnotation {
                class_id: o.class_id,
                mask,
                bbox: o.bbox,
            });
        }
        scenes.push(Scene {
            width: w,
            height: h,
            pixels,
            objects,
        });
    }
    let bench = Benchmark {
        config,
        entries,
        scenes,
    };
    check_label_spaces(&bench)?;
    Ok(bench)
}

/// Number of images on disk per split directory.
pub fn count_image_files(dir: &Path, split: SplitName) -> Result<usize> {
    let d = dir.join(split.dir_name());
    let rd = fs::read_dir(&d).map_err(|e| Error::io(&d, e))?;
    let mut n = 0;
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(&d, e))?;
        if entry.path().extension().is_some_and(|x| x == "png") {
            n += 1;
        }
    }
    Ok(n)
}

pub fn write_png(path: &Path, w: usize, h: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(f), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let fail = |e: png::EncodingError| Error::Format {
        path: PathBuf::from(path),
        what: "png",
        detail: e.to_string(),
    };
    let mut writer = enc.write_header().map_err(fail)?;
    writer.write_image_data(data).map_err(fail)?;
    writer.finish().map_err(fail)?;
    Ok(())
}

/// An 8-bit RGB PNG as `(width, height, pixels in [0, 1])`.
pub fn read_rgb_image(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let (w, h, px) = read_png(path, png::ColorType::Rgb)?;
    Ok((w, h, px.iter().map(|&p| f64::from(p) / 255.0).collect()))
}

pub fn read_png(path: &Path, want: png::ColorType) -> Result<(usize, usize, Vec<u8>)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let fail = |detail: String| Error::Format {
        path: PathBuf::from(path),
        what: "png",
        detail,
    };
    let decoder = png::Decoder::new(BufReader::new(f));
    let mut reader = decoder.read_info().map_err(|e| fail(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| fail("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| fail(e.to_string()))?;
    if info.color_type != want || info.bit_depth != png::BitDepth::Eight {
        return Err(fail(format!(
            "expected 8-bit {want:?}, found {:?} {:?}",
            info.bit_depth, info.color_type
        )));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BenchmarkConfig {
        BenchmarkConfig {
            sizes: SplitSizes {
                train: 8,
                test_known: 4,
                test_h: 4,
                test_m: 4,
            },
            ..BenchmarkConfig::default()
        }
    }

    #[test]
    fn splits_respect_label_spaces() {
        let b = generate_benchmark(&tiny()).unwrap();
        for (e, s) in b.entries.iter().zip(&b.scenes) {
            assert_eq!(e.label_ids, s.label_set());
            if e.split == SplitName::TestM {
                assert!(e.label_ids.iter().any(|c| *c < 6) && e.label_ids.iter().any(|c| *c >= 6));
            }
        }
    }

    #[test]
    fn overlapping_class_sets_rejected() {
        let mut c = tiny();
        c.uuc.push(0);
        assert!(matches!(generate_benchmark(&c), Err(Error::Split(_))));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let b = generate_benchmark(&tiny()).unwrap();
        save_benchmark(&b, dir.path()).unwrap();
        assert!(save_benchmark(&b, dir.path()).is_err());
        let back = load_benchmark(dir.path()).unwrap();
        assert_eq!(back.entries, b.entries);
        assert_eq!(back.scenes, b.scenes);
        for s in SplitName::ALL {
            assert_eq!(count_image_files(dir.path(), s).unwrap(), b.config.sizes.get(s));
        }
    }
}
