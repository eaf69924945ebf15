//! A small self-describing tensor container.
//!
//! Layout: an ASCII manifest followed by 64-byte-aligned little-endian
//! tensor blobs. The manifest starts with the magic line `QTZ1`, then any
//! number of `note <key> <text>` lines, one `tensor <name> <dtype>
//! <rows>x<cols> <offset> <len>` line per tensor, and a final `end` line.
//! Offsets are relative to the payload base, which is the manifest length
//! rounded up to the next 64-byte boundary; every tensor offset is itself
//! a multiple of 64. Serialization is deterministic: identical contents
//! produce identical bytes.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const MAGIC: &str = "QTZ1";
pub const ALIGN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F64,
    /// Raw half-precision bit patterns stored as u16.
    F16Bits,
    U8,
    /// Two 4-bit codes per byte, low nibble first, row-major element order.
    U4Packed,
    I8,
}

impl Dtype {
    pub fn key(self) -> &'static str {
        match self {
            Dtype::F64 => "f64",
            Dtype::F16Bits => "f16-bits",
            Dtype::U8 => "u8",
            Dtype::U4Packed => "u4-packed",
            Dtype::I8 => "i8",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "f64" => Dtype::F64,
            "f16-bits" => Dtype::F16Bits,
            "u8" => Dtype::U8,
            "u4-packed" => Dtype::U4Packed,
            "i8" => Dtype::I8,
            other => return Err(Error::Container(format!("unknown dtype {other:?}"))),
        })
    }

    pub fn byte_len(self, elems: usize) -> usize {
        match self {
            Dtype::F64 => 8 * elems,
            Dtype::F16Bits => 2 * elems,
            Dtype::U8 | Dtype::I8 => elems,
            Dtype::U4Packed => (elems + 1) / 2,
        }
    }
}

#[derive(Debug, Clone)]
struct TensorEntry {
    name: String,
    dtype: Dtype,
    rows: usize,
    cols: usize,
    bytes: Vec<u8>,
}

#[derive(Debug, Clone, Default)]
pub struct Container {
    notes: Vec<(String, String)>,
    tensors: Vec<TensorEntry>,
}

fn valid_token(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_graphic())
}

impl Container {
    pub fn new() -> Self {
        Container::default()
    }

    // -- notes

    pub fn add_note(&mut self, key: &str, text: &str) -> Result<()> {
        if !valid_token(key) {
            return Err(Error::Container(format!("bad note key {key:?}")));
        }
        if text.is_empty() || text.contains('\n') {
            return Err(Error::Container("note text must be one non-empty line".into()));
        }
        self.notes.push((key.to_string(), text.to_string()));
        Ok(())
    }

    pub fn note(&self, key: &str) -> Option<&str> {
        self.notes.iter().find(|(k, _)| k == key).map(|(_, t)| t.as_str())
    }

    pub fn require_note(&self, key: &str) -> Result<&str> {
        self.note(key).ok_or_else(|| Error::Container(format!("missing note {key}")))
    }

    pub fn notes(&self) -> &[(String, String)] {
        &self.notes
    }

    // -- tensors

    fn push(&mut self, name: &str, dtype: Dtype, rows: usize, cols: usize, bytes: Vec<u8>) -> Result<()> {
        if !valid_token(name) {
            return Err(Error::Container(format!("bad tensor name {name:?}")));
        }
        if self.tensors.iter().any(|t| t.name == name) {
            return Err(Error::Container(format!("duplicate tensor {name}")));
        }
        debug_assert_eq!(bytes.len(), dtype.byte_len(rows * cols));
        self.tensors.push(TensorEntry { name: name.to_string(), dtype, rows, cols, bytes });
        Ok(())
    }

    fn entry(&self, name: &str, dtype: Dtype) -> Result<&TensorEntry> {
        let t = self
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Container(format!("missing tensor {name}")))?;
        if t.dtype != dtype {
            return Err(Error::Container(format!(
                "tensor {name} is {}, wanted {}",
                t.dtype.key(),
                dtype.key()
            )));
        }
        Ok(t)
    }

    pub fn has(&self, name: &str) -> bool {
        self.tensors.iter().any(|t| t.name == name)
    }

    pub fn tensor_names(&self) -> Vec<&str> {
        self.tensors.iter().map(|t| t.name.as_str()).collect()
    }

    pub fn put_matrix(&mut self, name: &str, m: &Matrix) -> Result<()> {
        let mut bytes = Vec::with_capacity(8 * m.data().len());
        for v in m.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        self.push(name, Dtype::F64, m.rows, m.cols, bytes)
    }

    pub fn get_matrix(&self, name: &str) -> Result<Matrix> {
        let t = self.entry(name, Dtype::F64)?;
        let data: Vec<f64> = t
            .bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Matrix::from_vec(t.rows, t.cols, data)
    }

    pub fn put_f64_vec(&mut self, name: &str, v: &[f64]) -> Result<()> {
        self.put_matrix(name, &Matrix::from_vec(1, v.len(), v.to_vec())?)
    }

    pub fn get_f64_vec(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.get_matrix(name)?.data().to_vec())
    }

    pub fn put_f16_bits(&mut self, name: &str, rows: usize, cols: usize, v: &[u16]) -> Result<()> {
        if v.len() != rows * cols {
            return Err(Error::Container(format!("{name}: {} elems vs {rows}x{cols}", v.len())));
        }
        let mut bytes = Vec::with_capacity(2 * v.len());
        for x in v {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        self.push(name, Dtype::F16Bits, rows, cols, bytes)
    }

    pub fn get_f16_bits(&self, name: &str) -> Result<(usize, usize, Vec<u16>)> {
        let t = self.entry(name, Dtype::F16Bits)?;
        let v = t
            .bytes
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((t.rows, t.cols, v))
    }

    pub fn put_u8(&mut self, name: &str, rows: usize, cols: usize, v: &[u8]) -> Result<()> {
        if v.len() != rows * cols {
            return Err(Error::Container(format!("{name}: {} elems vs {rows}x{cols}", v.len())));
        }
        self.push(name, Dtype::U8, rows, cols, v.to_vec())
    }

    pub fn get_u8(&self, name: &str) -> Result<(usize, usize, Vec<u8>)> {
        let t = self.entry(name, Dtype::U8)?;
        Ok((t.rows, t.cols, t.bytes.clone()))
    }

    pub fn put_i8(&mut self, name: &str, rows: usize, cols: usize, v: &[i8]) -> Result<()> {
        if v.len() != rows * cols {
            return Err(Error::Container(format!("{name}: {} elems vs {rows}x{cols}", v.len())));
        }
        self.push(name, Dtype::I8, rows, cols, v.iter().map(|&x| x as u8).collect())
    }

    pub fn get_i8(&self, name: &str) -> Result<(usize, usize, Vec<i8>)> {
        let t = self.entry(name, Dtype::I8)?;
        Ok((t.rows, t.cols, t.bytes.iter().map(|&b| b as i8).collect()))
    }

    /// Codes are one element per entry on the API side; storage packs two
    /// per byte, low nibble first.
    pub fn put_u4(&mut self, name: &str, rows: usize, cols: usize, codes: &[u8]) -> Result<()> {
        if codes.len() != rows * cols {
            return Err(Error::Container(format!(
                "{name}: {} elems vs {rows}x{cols}",
                codes.len()
            )));
        }
        if let Some(bad) = codes.iter().find(|&&c| c > 15) {
            return Err(Error::Container(format!("{name}: code {bad} exceeds 4 bits")));
        }
        let mut bytes = vec![0u8; (codes.len() + 1) / 2];
        for (i, &c) in codes.iter().enumerate() {
            bytes[i / 2] |= c << (4 * (i % 2));
        }
        self.push(name, Dtype::U4Packed, rows, cols, bytes)
    }

    pub fn get_u4(&self, name: &str) -> Result<(usize, usize, Vec<u8>)> {
        let t = self.entry(name, Dtype::U4Packed)?;
        let n = t.rows * t.cols;
        let mut codes = Vec::with_capacity(n);
        for i in 0..n {
            codes.push((t.bytes[i / 2] >> (4 * (i % 2))) & 0x0F);
        }
        Ok((t.rows, t.cols, codes))
    }

    // -- wire format

    pub fn to_bytes(&self) -> Vec<u8> {
        let align = |x: usize| (x + ALIGN - 1) / ALIGN * ALIGN;
        let mut offsets = Vec::with_capacity(self.tensors.len());
        let mut cursor = 0usize;
        for t in &self.tensors {
            offsets.push(cursor);
            cursor = align(cursor + t.bytes.len());
        }

        let mut manifest = String::new();
        manifest.push_str(MAGIC);
        manifest.push('\n');
        for (k, v) in &self.notes {
            manifest.push_str(&format!("note {k} {v}\n"));
        }
        for (t, off) in self.tensors.iter().zip(&offsets) {
            manifest.push_str(&format!(
                "tensor {} {} {}x{} {} {}\n",
                t.name,
                t.dtype.key(),
                t.rows,
                t.cols,
                off,
                t.bytes.len()
            ));
        }
        manifest.push_str("end\n");

        let base = align(manifest.len());
        let total = base
            + self
                .tensors
                .last()
                .map(|t| offsets[offsets.len() - 1] + t.bytes.len())
                .unwrap_or(0);
        let mut out = vec![0u8; total];
        out[..manifest.len()].copy_from_slice(manifest.as_bytes());
        for (t, off) in self.tensors.iter().zip(&offsets) {
            out[base + off..base + off + t.bytes.len()].copy_from_slice(&t.bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let align = |x: usize| (x + ALIGN - 1) / ALIGN * ALIGN;
        // walk the manifest line by line until `end`
        let mut pos = 0usize;
        let mut lines: Vec<&str> = Vec::new();
        let mut header_len = None;
        while pos < bytes.len() {
            let nl = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::Container("unterminated manifest".into()))?;
            let line = std::str::from_utf8(&bytes[pos..pos + nl])
                .map_err(|_| Error::Container("manifest is not utf-8".into()))?;
            pos += nl + 1;
            if line == "end" {
                header_len = Some(pos);
                break;
            }
            lines.push(line);
        }
        let header_len = header_len.ok_or_else(|| Error::Container("missing end line".into()))?;
        if lines.first().copied() != Some(MAGIC) {
            return Err(Error::Container("bad magic".into()));
        }

        let mut c = Container::new();
        let base = align(header_len);
        for line in &lines[1..] {
            let parts: Vec<&str> = line.split(' ').collect();
            match parts.first().copied() {
                Some("note") if parts.len() >= 3 => {
                    c.add_note(parts[1], &parts[2..].join(" "))?;
                }
                Some("tensor") if parts.len() == 6 => {
                    let name = parts[1];
                    let dtype = Dtype::parse(parts[2])?;
                    let (r, col) = parts[3]
                        .split_once('x')
                        .ok_or_else(|| Error::Container(format!("bad shape {:?}", parts[3])))?;
                    let rows: usize = r
                        .parse()
                        .map_err(|_| Error::Container(format!("bad shape {:?}", parts[3])))?;
                    let cols: usize = col
                        .parse()
                        .map_err(|_| Error::Container(format!("bad shape {:?}", parts[3])))?;
                    let off: usize = parts[4]
                        .parse()
                        .map_err(|_| Error::Container(format!("bad offset {:?}", parts[4])))?;
                    let len: usize = parts[5]
                        .parse()
                        .map_err(|_| Error::Container(format!("bad length {:?}", parts[5])))?;
                    if off % ALIGN != 0 {
                        return Err(Error::Container(format!("{name}: offset {off} unaligned")));
                    }
                    if len != dtype.byte_len(rows * cols) {
                        return Err(Error::Container(format!(
                            "{name}: length {len} vs {rows}x{cols} {}",
                            dtype.key()
                        )));
                    }
                    let start = base + off;
                    if start + len > bytes.len() {
                        return Err(Error::Container(format!("{name}: payload truncated")));
                    }
                    c.push(name, dtype, rows, cols, bytes[start..start + len].to_vec())?;
                }
                _ => return Err(Error::Container(format!("bad manifest line {line:?}"))),
            }
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new();
        c.add_note("kind", "sample container").unwrap();
        c.add_note("seed", "42").unwrap();
        c.put_matrix("m", &Matrix::from_vec(2, 3, vec![1.0, -2.5, 3.0, 0.0, 1e-9, 6.25]).unwrap())
            .unwrap();
        c.put_f16_bits("h", 1, 4, &[0x3C00, 0x0001, 0x7BFF, 0x8000]).unwrap();
        c.put_u8("b", 2, 2, &[0, 255, 7, 128]).unwrap();
        c.put_i8("s", 1, 3, &[-128, 0, 127]).unwrap();
        c.put_u4("q", 1, 5, &[1, 2, 3, 4, 15]).unwrap();
        c
    }

    #[test]
    fn roundtrip_all_dtypes() {
        let c = sample();
        let bytes = c.to_bytes();
        let d = Container::from_bytes(&bytes).unwrap();
        assert_eq!(d.note("kind"), Some("sample container"));
        assert_eq!(d.note("seed"), Some("42"));
        assert_eq!(d.note("absent"), None);
        assert_eq!(d.get_matrix("m").unwrap().data(), c.get_matrix("m").unwrap().data());
        assert_eq!(d.get_f16_bits("h").unwrap(), (1, 4, vec![0x3C00, 0x0001, 0x7BFF, 0x8000]));
        assert_eq!(d.get_u8("b").unwrap(), (2, 2, vec![0, 255, 7, 128]));
        assert_eq!(d.get_i8("s").unwrap(), (1, 3, vec![-128, 0, 127]));
        assert_eq!(d.get_u4("q").unwrap(), (1, 5, vec![1, 2, 3, 4, 15]));
        assert_eq!(d.tensor_names(), vec!["m", "h", "b", "s", "q"]);
    }

    #[test]
    fn serialization_is_deterministic_and_idempotent() {
        let a = sample().to_bytes();
        let b = sample().to_bytes();
        assert_eq!(a, b);
        let reparsed = Container::from_bytes(&a).unwrap().to_bytes();
        assert_eq!(a, reparsed);
    }

    #[test]
    fn layout_is_aligned_and_little_endian() {
        let bytes = sample().to_bytes();
        assert!(bytes.starts_with(b"QTZ1\n"));
        let manifest_end = bytes.windows(4).position(|w| w == b"end\n").unwrap() + 4;
        let text = std::str::from_utf8(&bytes[..manifest_end]).unwrap();
        let base = (manifest_end + ALIGN - 1) / ALIGN * ALIGN;
        assert_eq!(base % ALIGN, 0);
        // first tensor is the f64 matrix; check its first value byte-for-byte
        assert_eq!(&bytes[base..base + 8], &1.0f64.to_le_bytes());
        // manifest records aligned offsets for every tensor
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("tensor ") {
                let parts: Vec<&str> = rest.split(' ').collect();
                let off: usize = parts[3].parse().unwrap();
                assert_eq!(off % ALIGN, 0, "{line}");
            }
        }
    }

    #[test]
    fn nibble_packing_is_low_first() {
        let mut c = Container::new();
        c.put_u4("q", 1, 3, &[1, 2, 3]).unwrap();
        let bytes = c.to_bytes();
        let base = {
            let end = bytes.windows(4).position(|w| w == b"end\n").unwrap() + 4;
            (end + ALIGN - 1) / ALIGN * ALIGN
        };
        assert_eq!(bytes[base], 0x21);
        assert_eq!(bytes[base + 1], 0x03);
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(Container::from_bytes(b"NOPE\nend\n").is_err());
        assert!(Container::from_bytes(b"QTZ1\nnote k v\n").is_err()); // no end
        assert!(Container::from_bytes(b"QTZ1\ntensor t f32 1x1 0 4\nend\n").is_err()); // dtype
        assert!(Container::from_bytes(b"QTZ1\ntensor t u8 2x2 0 3\nend\n").is_err()); // length
        assert!(Container::from_bytes(b"QTZ1\ntensor t u8 2x2 1 4\nend\n").is_err()); // align
        assert!(Container::from_bytes(b"QTZ1\ntensor t u8 8x8 0 64\nend\n").is_err()); // truncated
        assert!(Container::from_bytes(b"QTZ1\ngarbage\nend\n").is_err());
        // valid empty container
        assert!(Container::from_bytes(b"QTZ1\nend\n").is_ok());
    }

    #[test]
    fn rejects_bad_puts() {
        let mut c = Container::new();
        c.put_u8("t", 1, 1, &[1]).unwrap();
        assert!(c.put_u8("t", 1, 1, &[2]).is_err()); // duplicate
        assert!(c.put_u8("with space", 1, 1, &[2]).is_err());
        assert!(c.put_u8("wrong", 2, 2, &[1, 2, 3]).is_err());
        assert!(c.put_u4("big", 1, 1, &[16]).is_err());
        assert!(c.add_note("bad key", "x").is_err());
        assert!(c.add_note("k", "two\nlines").is_err());
        // reading with the wrong dtype fails
        assert!(c.get_i8("t").is_err());
    }
}
