//! Point prompts, ground-truth point sampling and the synthetic corpus.

mod prompt;
mod synth;

pub use prompt::{sample_gt_points, Label, PointPrompt, PromptSetting};
pub use synth::{
    generate, generate_sample, sample_id, select_split, split_of, Domain, SegmentationSample, Split,
    MAX_FOREGROUND, MIN_FOREGROUND,
};
