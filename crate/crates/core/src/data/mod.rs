//! Records, rendering, and datasets.

mod conversation;
mod image;
pub mod manifest;
pub mod synth;

pub use conversation::{
    collate, render_conversation, render_prompt, Batch, CaptionRecord, ChatTemplate, ConversationRecord,
    RenderedExample, Role, SourceModality, Turn,
};
pub use image::Image;
pub use manifest::{load_manifest, write_manifest, Record};
