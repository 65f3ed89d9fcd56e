use std::path::Path;

use ebm_core::checkpoint::{write_atomic, Checkpoint};
use ebm_core::datagen;
use ebm_core::{EbmError, Result, Tensor};
use serde::de::DeserializeOwned;

pub fn read_csv(path: &Path) -> Result<(Tensor, Option<Vec<usize>>)> {
    datagen::read_csv(std::fs::File::open(path).map_err(|e| with_path(e, path))?)
}

pub fn write_csv(path: &Path, x: &Tensor, labels: Option<&[usize]>) -> Result<()> {
    let mut bytes = vec![];
    datagen::write_csv(&mut bytes, x, labels)?;
    write_atomic(path, &bytes)
}

/// Header line plus pre-formatted rows.
pub fn write_report(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut text = String::from(header);
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path).map_err(|e| with_path(e, path))?)
}

pub fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| with_path(e, path))?;
    toml::from_str(&text).map_err(|e| EbmError::Config(format!("{}: {e}", path.display())))
}

fn with_path(e: std::io::Error, path: &Path) -> EbmError {
    EbmError::Io(std::io::Error::new(
        e.kind(),
        format!("{}: {e}", path.display()),
    ))
}

/// `"1,0,1"` into a boolean mask.
pub fn parse_mask(s: &str) -> Result<Vec<bool>> {
    s.split(',')
        .map(|t| match t.trim() {
            "1" | "true" => Ok(true),
            "0" | "false" => Ok(false),
            other => Err(EbmError::Config(format!(
                "mask entry {other:?} is not 0 or 1"
            ))),
        })
        .collect()
}

/// `-` means no label.
pub fn parse_label(s: &str) -> Result<Option<usize>> {
    if s == "-" {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| EbmError::Config(format!("label {s:?} is neither a class index nor -")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masks_and_labels() {
        assert_eq!(parse_mask("1,0, 1").unwrap(), vec![true, false, true]);
        assert!(parse_mask("1,2").is_err());
        assert_eq!(parse_label("-").unwrap(), None);
        assert_eq!(parse_label("3").unwrap(), Some(3));
        assert!(parse_label("x").is_err());
    }
}
