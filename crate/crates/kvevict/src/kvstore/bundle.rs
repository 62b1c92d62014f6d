use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{RetentionPlan, RowMatrix};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"KVT1";
const HEADER_LEN: usize = 4 + 4 * 4 + 1;

const FLAG_QUERIES: u8 = 0b001;
const FLAG_PREROPE: u8 = 0b010;
/// Heads carry their own sequence lengths; a `u32` length table follows the header.
const FLAG_RAGGED: u8 = 0b100;
const KNOWN_FLAGS: u8 = FLAG_QUERIES | FLAG_PREROPE | FLAG_RAGGED;

/// Key/value/query matrices for one (layer, KV head).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadKV {
    /// Keys before the position embedding was applied; leverage scores use these.
    pub keys_prerope: Option<RowMatrix>,
    pub keys: RowMatrix,
    pub values: RowMatrix,
    pub queries: Option<RowMatrix>,
}

impl HeadKV {
    pub fn seq_len(&self) -> usize {
        self.keys.rows()
    }

    fn tensors(&self) -> impl Iterator<Item = &RowMatrix> {
        self.keys_prerope
            .iter()
            .chain(std::iter::once(&self.keys))
            .chain(std::iter::once(&self.values))
            .chain(self.queries.iter())
    }

    fn select_rows(&self, idx: &[usize]) -> HeadKV {
        HeadKV {
            keys_prerope: self.keys_prerope.as_ref().map(|m| m.select_rows(idx)),
            keys: self.keys.select_rows(idx),
            values: self.values.select_rows(idx),
            queries: self.queries.as_ref().map(|m| m.select_rows(idx)),
        }
    }
}

/// Per-layer, per-head KV tensors for one context.
///
/// Heads are stored layer-major. A bundle produced by [`apply_plan`] may be ragged:
/// different heads can hold different numbers of tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct KVBundle {
    n_layers: usize,
    n_kv_heads: usize,
    head_dim: usize,
    heads: Vec<HeadKV>,
}

impl KVBundle {
    /// Builds a bundle and checks every invariant: consistent shapes, uniform
    /// presence of optional tensors, at least one token and one dimension, and
    /// finite entries.
    pub fn new(
        n_layers: usize,
        n_kv_heads: usize,
        head_dim: usize,
        heads: Vec<HeadKV>,
    ) -> Result<Self> {
        if n_layers == 0 || n_kv_heads == 0 {
            return Err(Error::Data(
                "bundle needs at least one layer and head".into(),
            ));
        }
        if head_dim == 0 {
            return Err(Error::Data("head_dim must be at least 1".into()));
        }
        if heads.len() != n_layers * n_kv_heads {
            return Err(Error::Data(format!(
                "expected {} heads, got {}",
                n_layers * n_kv_heads,
                heads.len()
            )));
        }
        let has_q = heads[0].queries.is_some();
        let has_pre = heads[0].keys_prerope.is_some();
        for (i, h) in heads.iter().enumerate() {
            let n = h.seq_len();
            if n == 0 {
                return Err(Error::Data(format!("head {i} has no tokens")));
            }
            if h.queries.is_some() != has_q || h.keys_prerope.is_some() != has_pre {
                return Err(Error::Data(
                    "optional tensors must be present for every head or none".into(),
                ));
            }
            for m in h.tensors() {
                if m.rows() != n || m.cols() != head_dim {
                    return Err(Error::Data(format!(
                        "head {i}: tensor is {}x{}, expected {n}x{head_dim}",
                        m.rows(),
                        m.cols()
                    )));
                }
                if !m.is_finite() {
                    return Err(Error::Data(format!("head {i}: non-finite value")));
                }
            }
        }
        Ok(Self {
            n_layers,
            n_kv_heads,
            head_dim,
            heads,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_kv_heads(&self) -> usize {
        self.n_kv_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn head(&self, layer: usize, head: usize) -> &HeadKV {
        &self.heads[layer * self.n_kv_heads + head]
    }

    /// All heads, layer-major.
    pub fn heads(&self) -> &[HeadKV] {
        &self.heads
    }

    pub fn has_queries(&self) -> bool {
        self.heads[0].queries.is_some()
    }

    pub fn has_prerope_keys(&self) -> bool {
        self.heads[0].keys_prerope.is_some()
    }

    /// Sequence length shared by all heads, or `None` for a ragged bundle.
    pub fn seq_len(&self) -> Option<usize> {
        let n = self.heads[0].seq_len();
        self.heads.iter().all(|h| h.seq_len() == n).then_some(n)
    }

    pub fn is_ragged(&self) -> bool {
        self.seq_len().is_none()
    }

    /// Keeps only the first `n` tokens of every head.
    pub fn truncate(&self, n: usize) -> Result<KVBundle> {
        if n == 0 {
            return Err(Error::param("cannot truncate to zero tokens"));
        }
        let heads = self
            .heads
            .iter()
            .map(|h| HeadKV {
                keys_prerope: h.keys_prerope.as_ref().map(|m| m.head_rows(n)),
                keys: h.keys.head_rows(n),
                values: h.values.head_rows(n),
                queries: h.queries.as_ref().map(|m| m.head_rows(n)),
            })
            .collect();
        Ok(KVBundle { heads, ..*self })
    }

    fn flags(&self) -> u8 {
        let mut f = 0;
        if self.has_queries() {
            f |= FLAG_QUERIES;
        }
        if self.has_prerope_keys() {
            f |= FLAG_PREROPE;
        }
        if self.is_ragged() {
            f |= FLAG_RAGGED;
        }
        f
    }
}

/// Serializes a bundle in KVT1 layout.
pub fn write_bundle<W: Write>(bundle: &KVBundle, mut w: W) -> std::io::Result<()> {
    let flags = bundle.flags();
    let seq_len = bundle
        .seq_len()
        .unwrap_or_else(|| bundle.heads.iter().map(HeadKV::seq_len).max().unwrap_or(0));
    w.write_all(MAGIC)?;
    for v in [bundle.n_layers, bundle.n_kv_heads, seq_len, bundle.head_dim] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    w.write_all(&[flags])?;
    if flags & FLAG_RAGGED != 0 {
        for h in &bundle.heads {
            w.write_all(&(h.seq_len() as u32).to_le_bytes())?;
        }
    }
    let mut buf = Vec::new();
    for h in &bundle.heads {
        for m in h.tensors() {
            buf.clear();
            buf.reserve(m.as_slice().len() * 4);
            for v in m.as_slice() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
    }
    w.flush()
}

pub fn save_bundle(bundle: &KVBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_bundle(bundle, std::io::BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

fn le_u32(bytes: &[u8], at: usize) -> usize {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize
}

/// Parses a KVT1 byte stream.
pub fn read_bundle<R: Read>(mut r: R) -> Result<KVBundle> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::io("<reader>", e))?;
    parse_bundle(&bytes)
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<KVBundle> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_bundle(&bytes)
}

fn parse_bundle(bytes: &[u8]) -> Result<KVBundle> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic, expected \"KVT1\"".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncation {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let n_layers = le_u32(bytes, 4);
    let n_heads = le_u32(bytes, 8);
    let seq_len = le_u32(bytes, 12);
    let head_dim = le_u32(bytes, 16);
    let flags = bytes[20];
    if flags & !KNOWN_FLAGS != 0 {
        return Err(Error::Format(format!("unknown flag bits {flags:#010b}")));
    }
    let has_q = flags & FLAG_QUERIES != 0;
    let has_pre = flags & FLAG_PREROPE != 0;
    let n_tensors = 2 + usize::from(has_q) + usize::from(has_pre);
    let n_total = n_layers
        .checked_mul(n_heads)
        .ok_or_else(|| Error::Format("header dimensions overflow".into()))?;

    let mut offset = HEADER_LEN;
    let lens: Vec<usize> = if flags & FLAG_RAGGED != 0 {
        let table_end = offset + 4 * n_total;
        if bytes.len() < table_end {
            return Err(Error::Truncation {
                expected: table_end,
                actual: bytes.len(),
            });
        }
        let lens = (0..n_total)
            .map(|i| le_u32(bytes, offset + 4 * i))
            .collect();
        offset = table_end;
        lens
    } else {
        vec![seq_len; n_total]
    };

    let expected = lens
        .iter()
        .try_fold(offset, |acc, &n| {
            n.checked_mul(head_dim)
                .and_then(|x| x.checked_mul(4 * n_tensors))
                .and_then(|x| acc.checked_add(x))
        })
        .ok_or_else(|| Error::Format("header dimensions overflow".into()))?;
    if bytes.len() != expected {
        return Err(Error::Truncation {
            expected,
            actual: bytes.len(),
        });
    }

    let mut take = |rows: usize| -> Result<RowMatrix> {
        let len = rows * head_dim;
        let data = bytes[offset..offset + 4 * len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset += 4 * len;
        RowMatrix::new(rows, head_dim, data)
    };
    let mut heads = Vec::with_capacity(n_total);
    for &n in &lens {
        let keys_prerope = if has_pre { Some(take(n)?) } else { None };
        let keys = take(n)?;
        let values = take(n)?;
        let queries = if has_q { Some(take(n)?) } else { None };
        heads.push(HeadKV {
            keys_prerope,
            keys,
            values,
            queries,
        });
    }
    KVBundle::new(n_layers, n_heads, head_dim, heads)
}

/// Keeps only the planned rows of every head, preserving token order.
///
/// Rows are copied verbatim. The result is ragged when heads retain different
/// counts.
pub fn apply_plan(bundle: &KVBundle, plan: &RetentionPlan) -> Result<KVBundle> {
    if plan.layers.len() != bundle.n_layers {
        return Err(Error::Mismatch(format!(
            "plan has {} layers, bundle has {}",
            plan.layers.len(),
            bundle.n_layers
        )));
    }
    let mut heads = Vec::with_capacity(bundle.heads.len());
    for (l, layer) in plan.layers.iter().enumerate() {
        if layer.len() != bundle.n_kv_heads {
            return Err(Error::Mismatch(format!(
                "plan layer {l} has {} heads, bundle has {}",
                layer.len(),
                bundle.n_kv_heads
            )));
        }
        for (h, idx) in layer.iter().enumerate() {
            let src = bundle.head(l, h);
            if let Some(&bad) = idx.iter().find(|&&i| i >= src.seq_len()) {
                return Err(Error::Mismatch(format!(
                    "layer {l} head {h}: index {bad} out of range for {} tokens",
                    src.seq_len()
                )));
            }
            heads.push(src.select_rows(idx));
        }
    }
    KVBundle::new(bundle.n_layers, bundle.n_kv_heads, bundle.head_dim, heads)
}
