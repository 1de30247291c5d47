//! Instance records and the JSONL dataset format: one JSON object per
//! line, raw feature vectors inline as number arrays.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::features::{ObjectRaw, OcrTokenRaw};

/// One training/eval example. `question_tokens` is empty in caption mode;
/// answers hold captions there.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Instance {
    pub id: String,
    pub question_tokens: Vec<usize>,
    pub ocr: Vec<OcrTokenRaw>,
    pub objects: Vec<ObjectRaw>,
    pub answers: Vec<String>,
}

impl Instance {
    pub fn validate(&self, cfg: &EncoderConfig) -> Result<()> {
        if self.answers.is_empty() {
            return Err(Error::Data(format!("instance {}: no answers", self.id)));
        }
        if self.ocr.len() > cfg.n_max {
            return Err(Error::Data(format!(
                "instance {}: {} OCR tokens exceed the {} limit",
                self.id,
                self.ocr.len(),
                cfg.n_max
            )));
        }
        if self.objects.len() > cfg.m_max {
            return Err(Error::Data(format!(
                "instance {}: {} objects exceed the {} limit",
                self.id,
                self.objects.len(),
                cfg.m_max
            )));
        }
        if self.question_tokens.len() > cfg.l_max {
            return Err(Error::Data(format!(
                "instance {}: question longer than {}",
                self.id, cfg.l_max
            )));
        }
        for &t in &self.question_tokens {
            if t >= cfg.vocab_size {
                return Err(Error::Data(format!(
                    "instance {}: question token {} outside vocabulary of {}",
                    self.id, t, cfg.vocab_size
                )));
            }
        }
        for tok in &self.ocr {
            tok.validate(cfg.d_frcn, cfg.d_recog)?;
        }
        for obj in &self.objects {
            obj.validate(cfg.d_frcn)?;
        }
        Ok(())
    }

    /// OCR strings in slot order, lowercased at ingestion.
    pub fn ocr_strings(&self) -> Vec<String> {
        self.ocr.iter().map(|t| t.text.to_lowercase()).collect()
    }
}

/// Writes instances as one JSON object per line.
pub fn write_jsonl(path: &Path, instances: &[Instance]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for inst in instances {
        serde_json::to_writer(&mut out, inst)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a JSONL dataset; every instance is validated against the config
/// and OCR strings are lowercased.
pub fn read_jsonl(path: &Path, cfg: &EncoderConfig) -> Result<Vec<Instance>> {
    let file = File::open(path)?;
    let mut instances = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut inst: Instance = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!("{}:{}: {}", path.display(), lineno + 1, e))
        })?;
        for tok in &mut inst.ocr {
            tok.text = tok.text.to_lowercase();
        }
        inst.validate(cfg)?;
        instances.push(inst);
    }
    if instances.is_empty() {
        return Err(Error::Data(format!("{}: empty dataset", path.display())));
    }
    Ok(instances)
}
