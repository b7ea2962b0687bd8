use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{LabelMap, Tensor};

use super::scene::{generate_scene, Scene, SceneSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitCounts {
    pub labeled: usize,
    pub unlabeled: usize,
    pub val: usize,
    pub test: usize,
    pub shifted: usize,
}

impl SplitCounts {
    fn total(&self) -> usize {
        self.labeled + self.unlabeled + self.val + self.test + self.shifted
    }
}

/// Unlabeled training images. Their ground truth is kept for measuring
/// pseudo-label accuracy and is visible only inside this crate; the training
/// path only ever sees [`UnlabeledPool::images`].
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledPool {
    images: Vec<Tensor>,
    hidden: Vec<LabelMap>,
}

impl UnlabeledPool {
    pub(crate) fn new(images: Vec<Tensor>, hidden: Vec<LabelMap>) -> Self {
        debug_assert_eq!(images.len(), hidden.len());
        UnlabeledPool { images, hidden }
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub(crate) fn hidden_truth(&self) -> &[LabelMap] {
        &self.hidden
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplits {
    pub labeled: Vec<Scene>,
    pub unlabeled: UnlabeledPool,
    pub val: Vec<Scene>,
    pub test: Vec<Scene>,
    pub shifted_test: Vec<Scene>,
    pub seed: u64,
    pub spec: SceneSpec,
}

/// Scene `i` of the run is drawn from substream `("scene", i)`; the splits
/// take consecutive index ranges (labeled, unlabeled, val, test, shifted),
/// so they are disjoint by construction and independent of each other's
/// sizes only through their offsets.
pub fn make_splits(seed: u64, counts: SplitCounts, spec: &SceneSpec) -> Result<DatasetSplits> {
    spec.validate()?;
    if counts.labeled == 0 || counts.unlabeled == 0 || counts.val == 0 || counts.test == 0 || counts.shifted == 0
    {
        return Err(Error::invalid(format!("split counts must be positive: {counts:?}")));
    }
    let shifted_spec = spec.shifted();
    let mut index = 0u64;
    let mut draw = |n: usize, spec: &SceneSpec| -> Result<Vec<Scene>> {
        (0..n)
            .map(|_| {
                let mut rng = Rng::substream(seed, "scene", index);
                index += 1;
                generate_scene(&mut rng, spec)
            })
            .collect()
    };
    let labeled = draw(counts.labeled, spec)?;
    let unlabeled = draw(counts.unlabeled, spec)?;
    let val = draw(counts.val, spec)?;
    let test = draw(counts.test, spec)?;
    let shifted_test = draw(counts.shifted, &shifted_spec)?;
    debug_assert_eq!(index as usize, counts.total());
    let (images, hidden) = unlabeled.into_iter().map(|s| (s.image, s.labels)).unzip();
    Ok(DatasetSplits {
        labeled,
        unlabeled: UnlabeledPool::new(images, hidden),
        val,
        test,
        shifted_test,
        seed,
        spec: spec.clone(),
    })
}
