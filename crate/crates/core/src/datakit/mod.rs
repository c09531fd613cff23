//! Dataset ingestion, the synthetic low-light generator and letterboxing.

mod io;
mod letterbox;
mod synth;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use io::{load_dataset, load_image, save_image, save_yolo};
pub use letterbox::{hflip, letterbox, LetterboxTransform};
pub use synth::{darken, render_bright, synth_generate, synth_split, SynthConfig, SHAPE_NAMES};

use crate::primitives::{Annotation, Image};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    /// `images/<split>/*.{png,jpg}` with `labels/<split>/*.txt`, one
    /// `class cx cy w h` line per object in normalized units.
    YoloTxt,
    /// `images/<split>/*` with `annotations/instances_<split>.json`.
    CocoJson,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingLabels {
    /// Abort with an error naming the file.
    #[default]
    Fail,
    /// Drop the image.
    Skip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub split: Split,
    pub format: DatasetFormat,
    pub class_names: Vec<String>,
    #[serde(default)]
    pub missing_labels: MissingLabels,
}

/// One image with its labels. `clean` holds the bright original when the
/// sample was synthesized.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    pub image: Image,
    pub annotations: Vec<Annotation>,
    pub clean: Option<Image>,
}

impl Sample {
    pub fn new(name: impl Into<String>, image: Image, annotations: Vec<Annotation>) -> Self {
        Self {
            name: name.into(),
            image,
            annotations,
            clean: None,
        }
    }
}
