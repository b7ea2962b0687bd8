//! Synthetic scenes, dataset splits and the weak/strong augmentations.

mod augment;
mod io;
mod scene;
mod splits;

pub use augment::{
    apply_geometry, apply_geometry_labels, flip_horizontal, mix_with_box, strong_augment,
    weak_augment, AugConfig, AugRecord, CropWindow, CutMixBox, Photometric, StrongView, WeakView,
};
pub use io::{read_split, write_split, SplitKind};
pub use scene::{
    generate_scene, render_scene, sample_layout, ClassRule, DomainShift, Geometry, Scene,
    SceneSpec, ShapeInstance, ShapeKind,
};
pub use splits::{make_splits, DatasetSplits, SplitCounts, UnlabeledPool};
