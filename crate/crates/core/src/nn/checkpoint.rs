//! Versioned checkpoint container.
//!
//! Layout: a UTF-8 manifest terminated by an `end` line, then the raw
//! little-endian `f32` data of every tensor in manifest order.
//!
//! ```text
//! cdrl-checkpoint 1
//! meta <key> <value>
//! tensor <name> <d0>x<d1>... <trainable|fixed>
//! end
//! <bytes>
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &str = "cdrl-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<StoredTensor>,
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Load {
        path: Default::default(),
        reason: reason.into(),
    }
}

impl Checkpoint {
    pub fn push_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.meta.push((key.into(), value.to_string()));
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, shape: Vec<usize>, trainable: bool, data: Vec<f32>) {
        self.tensors.push(StoredTensor {
            name: name.into(),
            shape,
            trainable,
            data,
        });
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| bad(format!("missing meta key `{key}`")))
    }

    pub fn tensor(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require_tensor(&self, name: &str) -> Result<&StoredTensor> {
        self.tensor(name)
            .ok_or_else(|| bad(format!("missing tensor `{name}`")))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| Error::io("writing checkpoint", e);
        writeln!(w, "{MAGIC} {FORMAT_VERSION}").map_err(io)?;
        for (k, v) in &self.meta {
            if k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(Error::Usage(format!("meta entry `{k}` not representable")));
            }
            writeln!(w, "meta {k} {v}").map_err(io)?;
        }
        for t in &self.tensors {
            if t.name.contains(char::is_whitespace) {
                return Err(Error::Usage(format!("tensor name `{}` has whitespace", t.name)));
            }
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::Shape {
                    op: "checkpoint",
                    left: t.shape.clone(),
                    right: vec![t.data.len()],
                });
            }
            let dims = if t.shape.is_empty() {
                "scalar".to_string()
            } else {
                t.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
            };
            let kind = if t.trainable { "trainable" } else { "fixed" };
            writeln!(w, "tensor {} {dims} {kind}", t.name).map_err(io)?;
        }
        writeln!(w, "end").map_err(io)?;
        for t in &self.tensors {
            let mut buf = Vec::with_capacity(t.data.len() * 4);
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        let next_line = |r: &mut BufReader<R>, line: &mut String| -> Result<()> {
            line.clear();
            let n = r.read_line(line).map_err(|e| bad(e.to_string()))?;
            if n == 0 {
                return Err(bad("unexpected end of manifest"));
            }
            if line.ends_with('\n') {
                line.pop();
            }
            Ok(())
        };

        next_line(&mut r, &mut line)?;
        let version = line
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| bad("not a checkpoint file"))?;
        if version != FORMAT_VERSION.to_string() {
            return Err(bad(format!("unsupported format version {version}")));
        }

        let mut ck = Checkpoint::default();
        loop {
            next_line(&mut r, &mut line)?;
            if line == "end" {
                break;
            }
            let (kind, rest) = line.split_once(' ').ok_or_else(|| bad(format!("bad line `{line}`")))?;
            match kind {
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    ck.meta.push((k.to_string(), v.to_string()));
                }
                "tensor" => {
                    let parts: Vec<&str> = rest.split(' ').collect();
                    let [name, dims, flag] = parts[..] else {
                        return Err(bad(format!("bad tensor line `{line}`")));
                    };
                    let shape = if dims == "scalar" {
                        Vec::new()
                    } else {
                        dims.split('x')
                            .map(|d| d.parse::<usize>())
                            .collect::<std::result::Result<Vec<_>, _>>()
                            .map_err(|_| bad(format!("bad shape `{dims}`")))?
                    };
                    let trainable = match flag {
                        "trainable" => true,
                        "fixed" => false,
                        other => return Err(bad(format!("bad trainable flag `{other}`"))),
                    };
                    ck.tensors.push(StoredTensor {
                        name: name.to_string(),
                        shape,
                        trainable,
                        data: Vec::new(),
                    });
                }
                other => return Err(bad(format!("unknown manifest entry `{other}`"))),
            }
        }

        for t in &mut ck.tensors {
            let n: usize = t.shape.iter().product();
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes)
                .map_err(|_| bad(format!("truncated data for `{}`", t.name)))?;
            t.data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| bad(e.to_string()))? != 0 {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(ck)
    }

    /// Writes to `path` via a sibling temporary file and a rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        let f = File::create(&tmp).map_err(|e| Error::io(format!("creating {}", tmp.display()), e))?;
        self.write_to(BufWriter::new(f))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::read_from(f).map_err(|e| match e {
            Error::Load { reason, .. } => Error::Load {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }
}
