//! Video sequences on disk and in memory.
//!
//! Layout under a dataset root:
//!
//! ```text
//! <root>/index.txt
//! <root>/<split>/<sequence-id>/frames/00000.ppm
//! <root>/<split>/<sequence-id>/annotations/00000.pgm
//! ```

pub mod pnm;
pub mod synthetic;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::isolation::InstanceMask;
pub use pnm::{GrayImage, RgbImage};
pub use synthetic::{synthesize, ShapeKind, SyntheticConfig};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoSequence {
    pub id: String,
    pub frames: Vec<RgbImage>,
    pub first_mask: InstanceMask,
    /// Masks for every frame, including the first, when available.
    pub ground_truth: Option<Vec<InstanceMask>>,
}

impl VideoSequence {
    pub fn new(
        id: impl Into<String>,
        frames: Vec<RgbImage>,
        first_mask: InstanceMask,
        ground_truth: Option<Vec<InstanceMask>>,
    ) -> Result<Self> {
        let seq = Self {
            id: id.into(),
            frames,
            first_mask,
            ground_truth,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.frames.first() else {
            return Err(Error::invalid(format!("sequence {} has no frames", self.id)));
        };
        let dims = (first.height, first.width);
        for (t, f) in self.frames.iter().enumerate() {
            if (f.height, f.width) != dims {
                return Err(Error::shape(
                    "sequence",
                    format!(
                        "{} frame {t} is {}x{}, frame 0 is {}x{}",
                        self.id, f.height, f.width, dims.0, dims.1
                    ),
                ));
            }
        }
        if self.first_mask.dims() != dims {
            let (h, w) = self.first_mask.dims();
            return Err(Error::shape(
                "sequence",
                format!("{} first mask is {h}x{w}, frames are {}x{}", self.id, dims.0, dims.1),
            ));
        }
        if let Some(gt) = &self.ground_truth {
            if gt.len() != self.frames.len() {
                return Err(Error::shape(
                    "sequence",
                    format!("{} has {} frames but {} masks", self.id, self.frames.len(), gt.len()),
                ));
            }
            if let Some((t, m)) = gt.iter().enumerate().find(|(_, m)| m.dims() != dims) {
                let (h, w) = m.dims();
                return Err(Error::shape(
                    "sequence",
                    format!("{} mask {t} is {h}x{w}, frames are {}x{}", self.id, dims.0, dims.1),
                ));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.frames[0].height, self.frames[0].width)
    }

    /// Keeps the first `n` frames.
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            id: self.id.clone(),
            frames: self.frames[..n].to_vec(),
            first_mask: self.first_mask.clone(),
            ground_truth: self.ground_truth.as_ref().map(|g| g[..n].to_vec()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::invalid(format!(
                "unknown split {other:?} (expected train or val)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexEntry {
    pub split: Split,
    pub id: String,
    pub frames: usize,
    pub instances: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub entries: Vec<IndexEntry>,
}

impl DatasetIndex {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<IndexEntry>) -> Result<Self> {
        let mut ids: Vec<&str> = entries.iter().map(|e| e.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::invalid(format!("sequence {} listed twice in the index", w[0])));
        }
        Ok(Self {
            root: root.into(),
            entries,
        })
    }

    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let path = root.join("index.txt");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(root, &text)
    }

    pub fn parse(root: impl Into<PathBuf>, text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = |d: &str| Error::invalid(format!("index.txt line {}: {d}: {line:?}", n + 1));
            let [split, id, frames, instances] = fields[..] else {
                return Err(bad("expected 4 fields"));
            };
            entries.push(IndexEntry {
                split: split.parse()?,
                id: id.to_string(),
                frames: frames.parse().map_err(|_| bad("bad frame count"))?,
                instances: instances.parse().map_err(|_| bad("bad instance count"))?,
            });
        }
        Self::new(root, entries)
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{} {} {} {}\n", e.split, e.id, e.frames, e.instances))
            .collect()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &IndexEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn sequence_dir(&self, entry: &IndexEntry) -> PathBuf {
        self.root.join(entry.split.as_str()).join(&entry.id)
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<VideoSequence>> {
        self.split(split).map(|e| load_sequence(self.sequence_dir(e))).collect()
    }
}

fn frame_name(t: usize, ext: &str) -> String {
    format!("{t:05}.{ext}")
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Sorted numeric indices of `NNNNN.<ext>` files in `dir`.
fn indices(dir: &Path, ext: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        let Some(stem) = name.strip_suffix(&format!(".{ext}")) else {
            continue;
        };
        if stem.len() == 5 && stem.bytes().all(|b| b.is_ascii_digit()) {
            out.push(stem.parse().expect("five digits"));
        }
    }
    out.sort_unstable();
    Ok(out)
}

fn check_contiguous(dir: &Path, found: &[usize]) -> Result<()> {
    match found.first() {
        None | Some(0) => {}
        Some(_) => {
            return Err(Error::invalid(format!(
                "{} is missing {}",
                dir.display(),
                frame_name(0, "*")
            )));
        }
    }
    if let Some(w) = found.windows(2).find(|w| w[1] != w[0] + 1) {
        return Err(Error::invalid(format!(
            "{}: gap between {:05} and {:05}",
            dir.display(),
            w[0],
            w[1]
        )));
    }
    Ok(())
}

pub fn decode_mask(bytes: &[u8]) -> Result<InstanceMask> {
    let g = pnm::decode_pgm(bytes)?;
    InstanceMask::new(g.height, g.width, g.data)
}

pub fn encode_mask(mask: &InstanceMask) -> Vec<u8> {
    let (height, width) = mask.dims();
    pnm::encode_pgm(&GrayImage {
        width,
        height,
        data: mask.labels().to_vec(),
    })
}

pub fn read_mask(path: &Path) -> Result<InstanceMask> {
    decode_mask(&read(path)?).map_err(|e| match e {
        Error::Format { what, offset, detail } => Error::Format {
            what,
            offset,
            detail: format!("{}: {detail}", path.display()),
        },
        e => e,
    })
}

pub fn write_mask(path: &Path, mask: &InstanceMask) -> Result<()> {
    write(path, &encode_mask(mask))
}

/// Reads every `NNNNN.pgm` mask in `dir`, requiring indices 0..n.
pub fn read_mask_series(dir: &Path) -> Result<Vec<InstanceMask>> {
    let found = indices(dir, "pgm")?;
    if found.is_empty() {
        return Err(Error::invalid(format!("{} has no masks", dir.display())));
    }
    check_contiguous(dir, &found)?;
    found
        .iter()
        .map(|&t| read_mask(&dir.join(frame_name(t, "pgm"))))
        .collect()
}

pub fn write_mask_series(dir: &Path, masks: &[InstanceMask]) -> Result<()> {
    create_dir(dir)?;
    for (t, m) in masks.iter().enumerate() {
        write_mask(&dir.join(frame_name(t, "pgm")), m)?;
    }
    Ok(())
}

pub fn load_sequence(path: impl AsRef<Path>) -> Result<VideoSequence> {
    let path = path.as_ref();
    let id = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    let frame_dir = path.join("frames");
    let ann_dir = path.join("annotations");
    let frame_idx = indices(&frame_dir, "ppm")?;
    if frame_idx.first() != Some(&0) {
        return Err(Error::invalid(format!("{} is missing frame 00000.ppm", path.display())));
    }
    check_contiguous(&frame_dir, &frame_idx)?;
    let ann_idx = indices(&ann_dir, "pgm")?;
    if ann_idx.first() != Some(&0) {
        return Err(Error::invalid(format!(
            "{} is missing annotation 00000.pgm",
            path.display()
        )));
    }
    check_contiguous(&ann_dir, &ann_idx)?;
    if ann_idx.len() > 1 && ann_idx.len() != frame_idx.len() {
        return Err(Error::invalid(format!(
            "{}: {} frames but {} annotations",
            path.display(),
            frame_idx.len(),
            ann_idx.len()
        )));
    }
    let frames = frame_idx
        .iter()
        .map(|&t| {
            let p = frame_dir.join(frame_name(t, "ppm"));
            pnm::decode_ppm(&read(&p)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let masks = ann_idx
        .iter()
        .map(|&t| read_mask(&ann_dir.join(frame_name(t, "pgm"))))
        .collect::<Result<Vec<_>>>()?;
    let (fh, fw) = (frames[0].height, frames[0].width);
    for (t, m) in masks.iter().enumerate() {
        let (mh, mw) = m.dims();
        if (mh, mw) != (fh, fw) {
            return Err(Error::shape(
                "load_sequence",
                format!("{id}: annotation {t:05} is {mh}x{mw} but frames are {fh}x{fw}"),
            ));
        }
    }
    let first_mask = masks[0].clone();
    let ground_truth = (masks.len() > 1).then_some(masks);
    VideoSequence::new(id, frames, first_mask, ground_truth)
}

/// Writes frames and every available annotation under `path`.
pub fn save_sequence(path: impl AsRef<Path>, seq: &VideoSequence) -> Result<()> {
    let path = path.as_ref();
    let frame_dir = path.join("frames");
    create_dir(&frame_dir)?;
    for (t, f) in seq.frames.iter().enumerate() {
        write(&frame_dir.join(frame_name(t, "ppm")), &pnm::encode_ppm(f))?;
    }
    match &seq.ground_truth {
        Some(gt) => write_mask_series(&path.join("annotations"), gt),
        None => write_mask_series(&path.join("annotations"), std::slice::from_ref(&seq.first_mask)),
    }
}

/// Writes a synthetic dataset to `root` and returns its index.
pub fn generate_synthetic(cfg: &SyntheticConfig, root: impl AsRef<Path>) -> Result<DatasetIndex> {
    let root = root.as_ref();
    let sequences = synthesize(cfg)?;
    create_dir(root)?;
    let mut entries = Vec::with_capacity(sequences.len());
    for (split, seq) in &sequences {
        save_sequence(root.join(split.as_str()).join(&seq.id), seq)?;
        entries.push(IndexEntry {
            split: *split,
            id: seq.id.clone(),
            frames: seq.len(),
            instances: seq.first_mask.max_label() as usize,
        });
    }
    let index = DatasetIndex::new(root, entries)?;
    write(&root.join("index.txt"), index.to_text().as_bytes())?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SyntheticConfig {
        SyntheticConfig {
            sequences: 2,
            val_sequences: 1,
            frames: 4,
            size: 32,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let index = generate_synthetic(&tiny(), dir.path()).unwrap();
        let in_memory = synthesize(&tiny()).unwrap();
        assert_eq!(DatasetIndex::load(dir.path()).unwrap(), index);
        for ((_, seq), entry) in in_memory.iter().zip(&index.entries) {
            assert_eq!(&load_sequence(index.sequence_dir(entry)).unwrap(), seq);
        }
    }

    #[test]
    fn first_annotation_only() {
        let dir = tempfile::tempdir().unwrap();
        let (_, mut seq) = synthesize(&tiny()).unwrap().remove(0);
        seq.ground_truth = None;
        save_sequence(dir.path().join(&seq.id), &seq).unwrap();
        let loaded = load_sequence(dir.path().join(&seq.id)).unwrap();
        assert!(loaded.ground_truth.is_none());
        assert_eq!(loaded, seq);
    }

    #[test]
    fn size_mismatch_names_both_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let (_, seq) = synthesize(&tiny()).unwrap().remove(0);
        let p = dir.path().join("s");
        save_sequence(&p, &seq).unwrap();
        write_mask(&p.join("annotations/00001.pgm"), &InstanceMask::background(16, 8)).unwrap();
        let msg = load_sequence(&p).unwrap_err().to_string();
        assert!(msg.contains("16x8") && msg.contains("32x32"), "{msg}");
    }

    #[test]
    fn gap_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let (_, seq) = synthesize(&tiny()).unwrap().remove(0);
        let p = dir.path().join("s");
        save_sequence(&p, &seq).unwrap();
        fs::remove_file(p.join("frames/00002.ppm")).unwrap();
        let msg = load_sequence(&p).unwrap_err().to_string();
        assert!(msg.contains("00001") && msg.contains("00003"), "{msg}");
        fs::remove_file(p.join("frames/00000.ppm")).unwrap();
        assert!(load_sequence(&p).unwrap_err().to_string().contains("00000"));
    }

    #[test]
    fn index_parse_rejects_duplicates() {
        assert!(DatasetIndex::parse("r", "train a 3 1\nval a 3 1\n").is_err());
        assert!(DatasetIndex::parse("r", "test a 3 1\n").is_err());
        let idx = DatasetIndex::parse("r", "train a 3 1\nval b 4 2\n").unwrap();
        assert_eq!(idx.split(Split::Val).count(), 1);
        assert_eq!(idx.to_text(), "train a 3 1\nval b 4 2\n");
    }
}
