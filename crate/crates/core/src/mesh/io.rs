//! ASCII mesh file ingestion.
//!
//! Format: line 1 `tetmesh 1`; line 2 `V K`; then V vertex lines `x y z`;
//! then K element lines `v0 v1 v2 v3`; then optional boundary tag lines
//! `b elem face tag`. Lines whose first non-blank character is `#` are
//! comments; blank lines are ignored.

use std::path::Path;

use super::Mesh;
use crate::error::{Error, Result};

struct Cursor<'a> {
    /// (1-based line number, content) for every significant line.
    lines: Vec<(usize, &'a str)>,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(text: &'a str) -> Self {
        let lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
            .collect();
        Cursor { lines, pos: 0 }
    }

    fn next(&mut self, what: &str) -> Result<(usize, &'a str)> {
        let item = self.lines.get(self.pos).copied().ok_or_else(|| Error::MeshParse {
            line: self.lines.last().map(|(n, _)| *n).unwrap_or(0) + 1,
            msg: format!("unexpected end of file, expected {what}"),
        })?;
        self.pos += 1;
        Ok(item)
    }

    fn remaining(&self) -> &[(usize, &'a str)] {
        &self.lines[self.pos..]
    }
}

fn parse_fields<T: std::str::FromStr, const N: usize>(
    line: usize,
    text: &str,
    what: &str,
) -> Result<[T; N]> {
    let toks: Vec<&str> = text.split_whitespace().collect();
    if toks.len() != N {
        return Err(Error::MeshParse {
            line,
            msg: format!("expected {N} fields for {what}, found {}", toks.len()),
        });
    }
    let mut out: Vec<T> = Vec::with_capacity(N);
    for t in toks {
        out.push(t.parse::<T>().map_err(|_| Error::MeshParse {
            line,
            msg: format!("cannot parse `{t}` in {what}"),
        })?);
    }
    out.try_into().map_err(|_| Error::MeshParse {
        line,
        msg: format!("wrong field count for {what}"),
    })
}

/// Parse mesh text. See the module docs for the format.
pub fn parse_mesh(text: &str) -> Result<Mesh> {
    let mut cur = Cursor::new(text);

    let (line, header) = cur.next("header `tetmesh 1`")?;
    let toks: Vec<&str> = header.split_whitespace().collect();
    if toks != ["tetmesh", "1"] {
        return Err(Error::MeshParse {
            line,
            msg: format!("expected header `tetmesh 1`, found `{header}`"),
        });
    }

    let (line, counts) = cur.next("count line `V K`")?;
    let [nv, nk] = parse_fields::<usize, 2>(line, counts, "count line")?;
    if nk == 0 {
        return Err(Error::MeshParse {
            line,
            msg: "mesh must contain at least one element".into(),
        });
    }

    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (line, text) = cur.next("vertex line `x y z`")?;
        let xyz = parse_fields::<f64, 3>(line, text, "vertex")?;
        vertices.push(xyz);
    }

    let mut tets = Vec::with_capacity(nk);
    for _ in 0..nk {
        let (line, text) = cur.next("element line `v0 v1 v2 v3`")?;
        let t = parse_fields::<usize, 4>(line, text, "element")?;
        for &vi in &t {
            if vi >= nv {
                return Err(Error::MeshParse {
                    line,
                    msg: format!("vertex index {vi} out of range (V = {nv})"),
                });
            }
        }
        tets.push(t);
    }

    let mut tags = Vec::new();
    for &(line, text) in cur.remaining() {
        let toks: Vec<&str> = text.split_whitespace().collect();
        if toks.len() != 4 || toks[0] != "b" {
            return Err(Error::MeshParse {
                line,
                msg: format!("expected boundary line `b elem face tag`, found `{text}`"),
            });
        }
        let elem: usize = toks[1].parse().map_err(|_| Error::MeshParse {
            line,
            msg: format!("cannot parse element index `{}`", toks[1]),
        })?;
        let face: usize = toks[2].parse().map_err(|_| Error::MeshParse {
            line,
            msg: format!("cannot parse face index `{}`", toks[2]),
        })?;
        if elem >= nk || face >= 4 {
            return Err(Error::MeshParse {
                line,
                msg: format!("boundary face ({elem}, {face}) out of range"),
            });
        }
        tags.push((elem, face, toks[3].to_string()));
    }

    Mesh::from_raw(vertices, tets, tags)
}

/// Load a mesh file from disk.
pub fn load_mesh<P: AsRef<Path>>(path: P) -> Result<Mesh> {
    let text = std::fs::read_to_string(path)?;
    parse_mesh(&text)
}
