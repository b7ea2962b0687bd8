//! Versioned binary dump of a single split: magic `PVMD`, `u32` version, the
//! split kind, then each scene as a shaped `f64` image and its `u32` labels.
//! Unlabeled dumps keep the hidden labels so a dump is a complete audit copy.

use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Tensor};

use super::scene::Scene;
use super::splits::DatasetSplits;

const MAGIC: &[u8; 4] = b"PVMD";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitKind {
    Labeled,
    Unlabeled,
    Val,
    Test,
    ShiftedTest,
}

impl SplitKind {
    pub const ALL: [SplitKind; 5] = [
        SplitKind::Labeled,
        SplitKind::Unlabeled,
        SplitKind::Val,
        SplitKind::Test,
        SplitKind::ShiftedTest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Labeled => "labeled",
            SplitKind::Unlabeled => "unlabeled",
            SplitKind::Val => "val",
            SplitKind::Test => "test",
            SplitKind::ShiftedTest => "shifted_test",
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }

    /// Scenes of this split, with unlabeled truth re-attached.
    pub fn scenes(self, splits: &DatasetSplits) -> Vec<Scene> {
        match self {
            SplitKind::Labeled => splits.labeled.clone(),
            SplitKind::Unlabeled => splits
                .unlabeled
                .images()
                .iter()
                .zip(splits.unlabeled.hidden_truth())
                .map(|(image, labels)| Scene {
                    image: image.clone(),
                    labels: labels.clone(),
                })
                .collect(),
            SplitKind::Val => splits.val.clone(),
            SplitKind::Test => splits.test.clone(),
            SplitKind::ShiftedTest => splits.shifted_test.clone(),
        }
    }
}

pub(crate) fn encode_split(kind: SplitKind, seed: u64, scenes: &[Scene]) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u8(kind.code());
    w.u64(seed);
    w.u64(scenes.len() as u64);
    for s in scenes {
        w.usizes(s.image.shape());
        w.f64s(s.image.data());
        w.usizes(&s.labels.dims());
        w.u32s(s.labels.data());
    }
    w.finish()
}

pub(crate) fn decode_split(bytes: &[u8]) -> Result<(SplitKind, u64, Vec<Scene>)> {
    let mut r = Reader::new(bytes, "dataset dump");
    r.expect_bytes(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dataset dump version {version}")));
    }
    let kind = SplitKind::from_code(r.u8()?).ok_or_else(|| Error::Format("unknown split kind".into()))?;
    let seed = r.u64()?;
    let n = r.u64()?;
    let mut scenes = Vec::new();
    for _ in 0..n {
        let image = Tensor::new(r.usizes()?, r.f64s()?)?;
        let dims = r.usizes()?;
        let [b, h, w] = dims[..] else {
            return Err(Error::Format(format!("label dims {dims:?} are not rank 3")));
        };
        scenes.push(Scene {
            image,
            labels: LabelMap::new(b, h, w, r.u32s()?)?,
        });
    }
    r.finish()?;
    Ok((kind, seed, scenes))
}

pub fn write_split(path: &Path, kind: SplitKind, seed: u64, scenes: &[Scene]) -> Result<()> {
    std::fs::write(path, encode_split(kind, seed, scenes)).map_err(|e| Error::io(path, e))
}

/// Returns the split kind, generating seed and scenes stored in `path`.
pub fn read_split(path: &Path) -> Result<(SplitKind, u64, Vec<Scene>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_split(&bytes)
}
