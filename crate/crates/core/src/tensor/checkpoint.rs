//! Parameter checkpoint files: a versioned text header listing
//! (name, shape, dtype, byte offset) per tensor, then a binary payload of
//! little-endian f32 values concatenated in header order.

use crate::error::{Error, Result};
use crate::fs_util::atomic_write;
use crate::tensor::Tensor;
use std::path::Path;

const MAGIC: &str = "MMQCKPT 1";
const DATA_MARKER: &[u8] = b"DATA\n";

/// In-memory form of a checkpoint: ordered metadata plus named tensors.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    for (k, v) in &ckpt.meta {
        header.push_str(&format!("meta {} {}\n", k, v));
    }
    let mut offset = 0usize;
    for (name, t) in &ckpt.tensors {
        let shape = t
            .shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        header.push_str(&format!("tensor {} {} f32 {}\n", name, shape, offset));
        offset += t.data.len() * 4;
    }
    let mut bytes = header.into_bytes();
    bytes.extend_from_slice(DATA_MARKER);
    for (_, t) in &ckpt.tensors {
        for v in &t.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    atomic_write(path, &bytes)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let marker = find_marker(&bytes).ok_or_else(|| Error::Parse {
        line: 0,
        msg: format!("{}: missing DATA marker", path.display()),
    })?;
    let header = std::str::from_utf8(&bytes[..marker]).map_err(|_| Error::Parse {
        line: 0,
        msg: "checkpoint header is not UTF-8".into(),
    })?;
    let payload = &bytes[marker + DATA_MARKER.len()..];

    let mut lines = header.lines().enumerate();
    match lines.next() {
        Some((_, line)) if line == MAGIC => {}
        Some((i, line)) => {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("unsupported checkpoint version: {:?}", line),
            })
        }
        None => {
            return Err(Error::Parse {
                line: 1,
                msg: "empty checkpoint header".into(),
            })
        }
    }

    let mut ckpt = Checkpoint::default();
    for (i, line) in lines {
        let line_no = i + 1;
        let mut fields = line.split(' ');
        match fields.next() {
            Some("meta") => {
                let key = fields.next().ok_or_else(|| Error::Parse {
                    line: line_no,
                    msg: "meta line without key".into(),
                })?;
                let value = fields.collect::<Vec<_>>().join(" ");
                ckpt.meta.push((key.to_string(), value));
            }
            Some("tensor") => {
                let mut parse = || -> Option<(String, Vec<usize>, String, usize)> {
                    let name = fields.next()?.to_string();
                    let shape = fields
                        .next()?
                        .split('x')
                        .map(|d| d.parse().ok())
                        .collect::<Option<Vec<usize>>>()?;
                    let dtype = fields.next()?.to_string();
                    let offset = fields.next()?.parse().ok()?;
                    Some((name, shape, dtype, offset))
                };
                let (name, shape, dtype, offset) = parse().ok_or_else(|| Error::Parse {
                    line: line_no,
                    msg: format!("malformed tensor line: {:?}", line),
                })?;
                if dtype != "f32" {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("unsupported dtype {:?}", dtype),
                    });
                }
                let numel: usize = shape.iter().product();
                let end = offset + numel * 4;
                if end > payload.len() {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!(
                            "tensor {} spans bytes {}..{} but payload has {}",
                            name,
                            offset,
                            end,
                            payload.len()
                        ),
                    });
                }
                let data = payload[offset..end]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                ckpt.tensors.push((name, Tensor::from_vec(shape, data)?));
            }
            _ => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("unrecognized header line: {:?}", line),
                })
            }
        }
    }
    Ok(ckpt)
}

fn find_marker(bytes: &[u8]) -> Option<usize> {
    bytes
        .windows(DATA_MARKER.len())
        .position(|w| w == DATA_MARKER)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = Checkpoint {
            meta: vec![
                ("feature_dim".into(), "32".into()),
                ("image_size".into(), "84".into()),
            ],
            tensors: vec![
                (
                    "conv1.weight".into(),
                    Tensor::from_vec(vec![2, 1, 3, 3], (0..18).map(|i| i as f32 * 0.1).collect())
                        .unwrap(),
                ),
                ("conv1.bias".into(), Tensor::from_vec(vec![2], vec![f32::MIN_POSITIVE, -0.0]).unwrap()),
            ],
        };
        write_checkpoint(&path, &ckpt).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back.meta_value("image_size"), Some("84"));
        for ((n1, t1), (n2, t2)) in ckpt.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape, t2.shape);
            let before: Vec<u32> = t1.data.iter().map(|v| v.to_bits()).collect();
            let after: Vec<u32> = t2.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(before, after);
        }
    }

    #[test]
    fn rejects_bad_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"MMQCKPT 9\nDATA\n").unwrap();
        let err = read_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn rejects_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.ckpt");
        std::fs::write(&path, b"MMQCKPT 1\ntensor w 2x2 f32 0\nDATA\n\x00\x00").unwrap();
        let err = read_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }
}
