use std::path::Path;

use super::container::{check_preamble, decode_f32, ContainerError, Cursor};
use crate::error::{Error, Result};
use crate::grade::{prompt_text, Grade, NUM_GRADES};
use crate::models::PromptBank;
use crate::tensor::Tensor;

pub const PROMPT_MAGIC: &[u8; 4] = b"GFP1";
pub const PROMPT_VERSION: u32 = 1;

/// Five grade-prompt text embeddings with the texts they came from.
#[derive(Clone, Debug)]
pub struct PromptFile {
    texts: Vec<String>,
    rows: Vec<Vec<f32>>,
}

impl PromptFile {
    pub fn new(texts: Vec<String>, rows: Vec<Vec<f32>>) -> Result<Self> {
        if texts.len() != NUM_GRADES || rows.len() != NUM_GRADES {
            return Err(Error::invalid(format!(
                "prompt file needs exactly {NUM_GRADES} rows, got {} texts / {} rows",
                texts.len(),
                rows.len()
            )));
        }
        let dim = rows[0].len();
        if dim == 0 {
            return Err(Error::invalid("prompt embeddings have zero dimension"));
        }
        for (g, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::invalid(format!(
                    "prompt row {g} has dim {}, row 0 has {dim}",
                    r.len()
                )));
            }
            if r.iter().all(|&v| v == 0.0) || r.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("prompt row {g} is zero or non-finite")));
            }
        }
        Ok(PromptFile { texts, rows })
    }

    /// Rows paired with the standard severity templates.
    pub fn with_default_texts(rows: Vec<Vec<f32>>) -> Result<Self> {
        let texts = Grade::ALL.iter().map(|&g| prompt_text(g)).collect();
        PromptFile::new(texts, rows)
    }

    pub fn texts(&self) -> &[String] {
        &self.texts
    }

    pub fn rows(&self) -> &[Vec<f32>] {
        &self.rows
    }

    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(PROMPT_MAGIC);
        out.extend_from_slice(&PROMPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(NUM_GRADES as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for (text, row) in self.texts.iter().zip(&self.rows) {
            out.extend_from_slice(&(text.len() as u32).to_le_bytes());
            out.extend_from_slice(text.as_bytes());
            for v in row {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        check_preamble(&mut cur, PROMPT_MAGIC, PROMPT_VERSION)?;
        let n = cur.u32()? as usize;
        let dim = cur.u32()? as usize;
        if n != NUM_GRADES {
            return Err(ContainerError::Malformed(format!(
                "prompt file declares {n} rows, expected {NUM_GRADES}"
            ))
            .into());
        }
        let mut texts = Vec::with_capacity(n);
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let len = cur.u32()? as usize;
            texts.push(cur.string(len, "prompt text")?);
            let raw = cur.take(dim.checked_mul(4).ok_or_else(|| {
                ContainerError::Malformed(format!("dim {dim} overflows"))
            })?)?;
            rows.push(decode_f32(raw));
        }
        let body_end = cur.pos;
        let stored = cur.u32()?;
        if cur.pos != bytes.len() {
            return Err(ContainerError::Malformed(format!(
                "{} trailing bytes after checksum",
                bytes.len() - cur.pos
            ))
            .into());
        }
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(ContainerError::ChecksumMismatch { stored, computed }.into());
        }
        PromptFile::new(texts, rows)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        super::write_bytes(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        PromptFile::from_bytes(&bytes)
    }

    /// Fixed (non-learnable) prompt bank at the given temperature.
    pub fn to_prompt_bank(&self, temperature: f64) -> Result<PromptBank> {
        let data = self.rows.iter().flatten().map(|&v| v as f64).collect();
        let mut bank = PromptBank::new(Tensor::new(vec![NUM_GRADES, self.dim()], data)?, temperature)?;
        bank.texts = Some(self.texts.clone());
        Ok(bank)
    }

    pub fn from_prompt_bank(bank: &PromptBank) -> Result<Self> {
        let rows = (0..NUM_GRADES)
            .map(|g| bank.row(g).iter().map(|&v| v as f32).collect())
            .collect();
        match &bank.texts {
            Some(t) => PromptFile::new(t.clone(), rows),
            None => PromptFile::with_default_texts(rows),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> PromptFile {
        let rows = (0..5)
            .map(|g| (0..4).map(|j| (g * 4 + j) as f32 * 0.25 - 1.0).collect())
            .collect();
        PromptFile::with_default_texts(rows).unwrap()
    }

    #[test]
    fn round_trip_keeps_texts_verbatim() {
        let p = sample();
        let q = PromptFile::from_bytes(&p.to_bytes()).unwrap();
        assert_eq!(q.texts()[1], "a fundus photograph showing mild diabetic retinopathy");
        assert_eq!(q.texts(), p.texts());
        assert_eq!(q.rows(), p.rows());
    }

    #[test]
    fn rejects_zero_row_and_wrong_count() {
        let mut rows: Vec<Vec<f32>> = vec![vec![1.0, 2.0]; 5];
        rows[3] = vec![0.0, 0.0];
        assert!(PromptFile::with_default_texts(rows).is_err());
        assert!(PromptFile::with_default_texts(vec![vec![1.0]; 4]).is_err());
    }

    #[test]
    fn corruption_detected() {
        let bytes = sample().to_bytes();
        let mut flipped = bytes.clone();
        flipped[30] ^= 0x40;
        assert!(matches!(
            PromptFile::from_bytes(&flipped),
            Err(Error::Container(ContainerError::ChecksumMismatch { .. }))
        ));
        assert!(matches!(
            PromptFile::from_bytes(&bytes[..bytes.len() - 7]),
            Err(Error::Container(ContainerError::Truncated { .. }))
        ));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(
            PromptFile::from_bytes(&magic),
            Err(Error::Container(ContainerError::BadMagic { .. }))
        ));
    }

    #[test]
    fn bank_conversion() {
        let bank = sample().to_prompt_bank(0.2).unwrap();
        assert!(!bank.learnable);
        assert_eq!(bank.dim(), 4);
        assert_eq!(bank.row(0)[0], -1.0);
        let back = PromptFile::from_prompt_bank(&bank).unwrap();
        assert_eq!(back.rows(), sample().rows());
    }
}
