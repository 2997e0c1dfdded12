use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("label code {code} at voxel {index} is outside 0..=4")]
    LabelRange { code: u8, index: usize },

    #[error("class {class} has zero frequency in the training labels")]
    AbsentClass { class: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error(
        "no crop center available: inference crops must be centered explicitly \
         (supply a center or a manifest crop_center); the localizer is not inferred from the image"
    )]
    MissingCenter,

    #[error("M/P ratio undefined: pons area is zero on the midsagittal slice x={slice}")]
    UndefinedRatio { slice: usize },

    #[error("phantom class {class} is empty; adjust the geometry parameters")]
    EmptyPhantomClass { class: usize },

    #[error("training diverged: non-finite loss in stage {stage} at epoch {epoch}")]
    Diverged { stage: &'static str, epoch: usize },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
