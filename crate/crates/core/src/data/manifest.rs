//! Line-delimited JSON manifests of caption and conversation records.
//!
//! Caption lines: `{"image": "path.ppm", "caption": "..."}`.
//! Conversation lines: `{"turns": [{"role": "user", "text": "..."}, ...],
//! "image": "path.ppm"}` with `image` optional. Image paths are relative to
//! the manifest's directory.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::conversation::{CaptionRecord, ConversationRecord, Turn};
use super::Image;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    Caption(CaptionRecord),
    Conversation(ConversationRecord),
}

#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct CaptionLine {
    image: String,
    caption: String,
}

#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct ConversationLine {
    turns: Vec<Turn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image: Option<String>,
}

fn parse_line(line: &str, base: &Path) -> std::result::Result<Record, String> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))?;
    let is_conversation = value.get("turns").is_some();
    let load_image = |rel: &str| -> std::result::Result<Image, String> {
        Image::load(&base.join(rel)).map_err(|e| e.to_string())
    };
    if is_conversation {
        let c: ConversationLine = serde_json::from_value(value).map_err(|e| e.to_string())?;
        let image = c.image.as_deref().map(load_image).transpose()?;
        let rec = ConversationRecord::new(c.turns, image).map_err(|e| e.to_string())?;
        Ok(Record::Conversation(rec))
    } else {
        let c: CaptionLine = serde_json::from_value(value).map_err(|e| e.to_string())?;
        let rec = CaptionRecord {
            image: load_image(&c.image)?,
            caption: c.caption,
        };
        rec.validate().map_err(|e| e.to_string())?;
        Ok(Record::Caption(rec))
    }
}

/// Reads and validates every line of a manifest. Blank lines are skipped;
/// the first malformed line aborts with its 1-based line number.
pub fn load_manifest(path: &Path) -> Result<Vec<Record>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_line(line, &base).map_err(|msg| Error::DataLine { line: i + 1, msg })?;
        out.push(rec);
    }
    Ok(out)
}

/// Writes records as a manifest at `path`, storing images as PPM files in
/// `images/` next to it.
pub fn write_manifest(path: &Path, records: &[Record]) -> Result<()> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let image_dir = base.join("images");
    std::fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("manifest")
        .to_string();
    let mut out = Vec::new();
    let save_image = |i: usize, img: &Image| -> Result<String> {
        let rel = PathBuf::from("images").join(format!("{stem}_{i:06}.ppm"));
        img.save_ppm(&base.join(&rel))?;
        Ok(rel.to_string_lossy().into_owned())
    };
    for (i, rec) in records.iter().enumerate() {
        let line = match rec {
            Record::Caption(c) => serde_json::to_string(&CaptionLine {
                image: save_image(i, &c.image)?,
                caption: c.caption.clone(),
            }),
            Record::Conversation(c) => serde_json::to_string(&ConversationLine {
                turns: c.turns.clone(),
                image: c.image.as_ref().map(|img| save_image(i, img)).transpose()?,
            }),
        }
        .expect("manifest lines serialize");
        out.push(line);
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for line in out {
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
