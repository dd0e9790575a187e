//! Prompt layouts with item and session patches, and their token accounting.

mod augment;
mod layout;

pub use augment::{
    augment_dropout, augment_pretraining, mix_seed, selection_mask, AugmentedBatch,
    CompressionSchedule,
};
pub use layout::{
    build_layout, compression_ratio, layout_pft_i, layout_pft_s, layout_pure_session, layout_text,
    LayoutConfig, LayoutMode, PromptLayout, Segment,
};
