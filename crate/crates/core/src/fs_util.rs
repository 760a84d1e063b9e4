//! Filesystem helpers. All pipeline writes go through `atomic_write`
//! (write to a temp file, then rename) so partially written artifacts never
//! appear under their final name.

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::path::Path;

pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default()
    ));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Numbered, non-empty lines of a text artifact with comment lines removed;
/// the first line (the artifact header, itself a comment) is kept.
pub(crate) fn lines_of(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.is_empty())
        .filter(|(i, l)| *i == 1 || !l.trim_start().starts_with('#'))
}

/// Parse a `# <kind> 1 config=<hash> k=v ...` artifact header, returning
/// the config hash and any extra attributes.
pub(crate) fn parse_artifact_header<'a>(
    lines: &mut impl Iterator<Item = (usize, &'a str)>,
    kind: &str,
) -> Result<(String, BTreeMap<String, String>)> {
    let expected = format!("# {} 1", kind);
    let line = match lines.next() {
        Some((_, line)) if line.starts_with(&expected) => line,
        Some((line_no, line)) => {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected {:?} header, got {:?}", expected, line),
            })
        }
        None => {
            return Err(Error::Parse {
                line: 1,
                msg: format!("empty {} artifact", kind),
            })
        }
    };
    let mut hash = None;
    let mut attrs = BTreeMap::new();
    for field in line.split_whitespace().skip(3) {
        if let Some((k, v)) = field.split_once('=') {
            if k == "config" {
                hash = Some(v.to_string());
            } else {
                attrs.insert(k.to_string(), v.to_string());
            }
        }
    }
    let hash = hash.ok_or_else(|| Error::Parse {
        line: 1,
        msg: format!("{} header missing config hash", kind),
    })?;
    Ok((hash, attrs))
}

/// Render an artifact header line.
pub(crate) fn artifact_header(kind: &str, config_hash: &str, attrs: &[(&str, String)]) -> String {
    let mut line = format!("# {} 1 config={}", kind, config_hash);
    for (k, v) in attrs {
        line.push_str(&format!(" {}={}", k, v));
    }
    line.push('\n');
    line
}
