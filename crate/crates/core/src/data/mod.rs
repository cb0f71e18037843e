//! Images, augmentation schedules and synthetic long-tail datasets.

mod augment;
mod groups;
mod image;
mod io;
mod synth;

pub use augment::{
    mda_crop, mda_schedule_delta, mda_window, rrc_crop, square_side, AugSchedule, CropWindow, RrcParams, ScheduleFn,
};
pub use groups::{group_split, Group, GroupThresholds};
pub use image::Image;
pub use io::{decode_dataset, encode_dataset, load_dataset, save_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use synth::{class_templates, generate_longtail, longtail_counts, LongTailDataset, LongTailParams};
