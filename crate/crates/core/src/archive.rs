//! AVM-FEAT v1 feature archives.
//!
//! An archive is a directory holding `manifest.json` and one binary file per
//! tensor. Each tensor file starts with a 16-byte little-endian header:
//!
//! ```text
//! 0..4   magic "AVMF"
//! 4      version (1)
//! 5      dtype   (0 = f32, 1 = f64)
//! 6..8   reserved, zero
//! 8..12  rows (u32)
//! 12..16 cols (u32)
//! ```
//!
//! followed by the row-major payload. Feature archives use `f32`;
//! checkpoints store parameters as `f64` so they restore bit-exactly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::{FeatureSequence, Modality, QType, QuestionFeatures, Sample};

pub const MAGIC: [u8; 4] = *b"AVMF";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 16;
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

pub fn encode_tensor(t: &Tensor, dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + t.len() * dtype.width());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(dtype.code());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
    for &v in t.data() {
        match dtype {
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

pub fn decode_tensor(bytes: &[u8], record: &str) -> Result<(Tensor, Dtype)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(record, format!("header truncated at {} bytes", bytes.len())));
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::format(record, "bad magic"));
    }
    if bytes[4] != VERSION {
        return Err(Error::format(record, format!("unsupported version {}", bytes[4])));
    }
    let dtype = match bytes[5] {
        0 => Dtype::F32,
        1 => Dtype::F64,
        d => return Err(Error::format(record, format!("unknown dtype {d}"))),
    };
    if bytes[6..8] != [0, 0] {
        return Err(Error::format(record, "reserved bytes are not zero"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (rows, cols) = (word(8), word(12));
    let payload = &bytes[HEADER_LEN..];
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(dtype.width()))
        .ok_or_else(|| Error::format(record, "shape overflows"))?;
    if payload.len() != expected {
        return Err(Error::format(
            record,
            format!("{rows}x{cols} payload needs {expected} bytes, found {}", payload.len()),
        ));
    }
    let data = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    Ok((Tensor::from_vec(rows, cols, data)?, dtype))
}

pub fn write_tensor(path: &Path, t: &Tensor, dtype: Dtype) -> Result<()> {
    fs::write(path, encode_tensor(t, dtype)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<(Tensor, Dtype)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, &path.display().to_string())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Widths {
    pub audio: usize,
    pub visual: usize,
    pub text: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    #[serde(rename = "T")]
    pub segments: usize,
    pub widths: Widths,
    #[serde(rename = "L")]
    pub tokens: usize,
    pub answer: usize,
    pub qtype: QType,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u8,
    pub num_answers: Option<usize>,
    pub samples: Vec<SampleEntry>,
}

const STREAMS: [&str; 4] = ["audio", "visual", "word", "sentence"];

fn tensor_file(id: &str, stream: &str) -> String {
    format!("{id}.{stream}.bin")
}

/// Writes `samples` as a new archive at `dir`, creating the directory.
pub fn write_archive(samples: &[Sample], dir: &Path, num_answers: Option<usize>) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let id = format!("{i:06}");
        let tensors = [&s.audio.data, &s.visual.data, &s.question.word, &s.question.sentence];
        for (stream, t) in STREAMS.iter().zip(tensors) {
            write_tensor(&dir.join(tensor_file(&id, stream)), t, Dtype::F32)?;
        }
        entries.push(SampleEntry {
            id,
            segments: s.segments(),
            widths: Widths {
                audio: s.audio.width(),
                visual: s.visual.width(),
                text: s.question.word.cols(),
            },
            tokens: s.question.tokens(),
            answer: s.answer,
            qtype: s.qtype,
        });
    }
    let manifest = Manifest {
        format: "AVM-FEAT".into(),
        version: VERSION,
        num_answers,
        samples: entries,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// An opened archive; samples are loaded lazily.
#[derive(Clone, Debug)]
pub struct FeatureArchive {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl FeatureArchive {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(MANIFEST, e.to_string()))?;
        if manifest.format != "AVM-FEAT" || manifest.version != VERSION {
            return Err(Error::format(
                MANIFEST,
                format!("unsupported archive {} v{}", manifest.format, manifest.version),
            ));
        }
        if let Some(c) = manifest.num_answers {
            if let Some(e) = manifest.samples.iter().find(|e| e.answer >= c) {
                return Err(Error::format(&e.id, format!("answer {} outside [0, {c})", e.answer)));
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    pub fn load(&self, entry: &SampleEntry) -> Result<Sample> {
        let expect = [
            (entry.segments, entry.widths.audio),
            (entry.segments, entry.widths.visual),
            (entry.tokens, entry.widths.text),
            (1, entry.widths.text),
        ];
        let mut tensors = Vec::with_capacity(4);
        for (stream, shape) in STREAMS.iter().zip(expect) {
            let name = tensor_file(&entry.id, stream);
            let path = self.dir.join(&name);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let (t, _) = decode_tensor(&bytes, &name)?;
            if t.shape() != shape {
                return Err(Error::format(
                    name,
                    format!("stored {}x{}, manifest says {}x{}", t.rows(), t.cols(), shape.0, shape.1),
                ));
            }
            tensors.push(t);
        }
        let mut it = tensors.into_iter();
        let (audio, visual, word, sentence) = (it.next(), it.next(), it.next(), it.next());
        let fail = |e: Error| Error::format(&entry.id, e.to_string());
        Ok(Sample {
            audio: FeatureSequence::new(Modality::Audio, audio.expect("four streams")).map_err(fail)?,
            visual: FeatureSequence::new(Modality::Visual, visual.expect("four streams")).map_err(fail)?,
            question: QuestionFeatures::new(word.expect("four streams"), sentence.expect("four streams"))
                .map_err(fail)?,
            answer: entry.answer,
            qtype: entry.qtype,
        })
    }

    pub fn samples(&self) -> impl Iterator<Item = Result<Sample>> + '_ {
        self.manifest.samples.iter().map(|e| self.load(e))
    }
}

pub fn read_archive(dir: &Path) -> Result<Vec<Sample>> {
    FeatureArchive::open(dir)?.samples().collect()
}
