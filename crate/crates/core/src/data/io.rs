//! On-disk formats.
//!
//! * `.pemb` embedding matrix: magic `PEMB`, u32 LE version, u64 LE row count,
//!   u32 LE dimension, then row-major f32 LE payload.
//! * `.jsonl` slide manifest: one patch object per line, line `i` is embedding row `i`.
//! * `.csv` label table: header `patch_id,label,score`, score with 9 significant digits.
//! * `.json` prototype sidecar next to the prototype `.pemb`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    LabelEntry, LabelTable, Matrix, PatchRecord, PrototypeLevel, PrototypeSet, SlideDataset,
};
use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"PEMB";
pub const EMBEDDING_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 4;

const DEFAULT_PATCH_SIZE_PX: u32 = 256;
const DEFAULT_MAGNIFICATION: &str = "unknown";

pub fn encode_embeddings(matrix: &Matrix<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + matrix.as_slice().len() * 4);
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    out.extend_from_slice(&(matrix.n_rows() as u64).to_le_bytes());
    out.extend_from_slice(&(matrix.n_cols() as u32).to_le_bytes());
    for v in matrix.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_embeddings(bytes: &[u8], context: &str) -> Result<Matrix<f32>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(context, "file shorter than header"));
    }
    if &bytes[0..4] != EMBEDDING_MAGIC {
        return Err(Error::format(context, "bad magic, expected \"PEMB\""));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != EMBEDDING_VERSION {
        return Err(Error::format(
            context,
            format!("unsupported version {version}"),
        ));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let d = u32::from_le_bytes(bytes[16..20].try_into().unwrap());
    let expected = (n as u128) * (d as u128) * 4;
    let payload = &bytes[HEADER_LEN..];
    if (payload.len() as u128) < expected {
        return Err(Error::format(
            context,
            format!("payload shorter than {n}×{d} floats"),
        ));
    }
    if (payload.len() as u128) > expected {
        return Err(Error::format(
            context,
            format!("trailing bytes after {n}×{d} floats"),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Matrix::from_vec(n as usize, d as usize, data)
}

pub fn write_embeddings(path: &Path, matrix: &Matrix<f32>) -> Result<()> {
    fs::write(path, encode_embeddings(matrix)).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: &Path) -> Result<Matrix<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes, &path.display().to_string())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    patch_id: String,
    grid_x: u32,
    grid_y: u32,
    coarse_label: u8,
}

#[derive(Debug, Serialize, Deserialize)]
struct SlideMeta {
    slide_id: String,
    patch_size_px: u32,
    magnification: String,
}

/// Location of the optional slide metadata file kept beside a manifest.
pub fn slide_meta_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("meta.json")
}

fn parse_manifest(text: &str, context: &str) -> Result<Vec<PatchRecord>> {
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let rec: ManifestLine = serde_json::from_str(line)
                .map_err(|e| Error::format(context, format!("malformed JSON at line {i}: {e}")))?;
            if rec.coarse_label > 1 {
                return Err(Error::format(
                    context,
                    format!(
                        "coarse_label {} at line {i} is not 0 or 1",
                        rec.coarse_label
                    ),
                ));
            }
            Ok(PatchRecord {
                patch_id: rec.patch_id,
                grid_x: rec.grid_x,
                grid_y: rec.grid_y,
                coarse_label: rec.coarse_label,
            })
        })
        .collect()
}

/// Patch records of a manifest, without embeddings.
pub fn load_manifest(manifest_path: &Path) -> Result<Vec<PatchRecord>> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    parse_manifest(&text, &manifest_path.display().to_string())
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn load_slide(manifest_path: &Path, embedding_path: &Path) -> Result<SlideDataset> {
    let patches = load_manifest(manifest_path)?;
    let embeddings = read_embeddings(embedding_path)?;
    if embeddings.n_rows() != patches.len() {
        return Err(Error::format(
            embedding_path.display().to_string(),
            format!(
                "count mismatch: embedding file declares N={} but manifest has {} lines",
                embeddings.n_rows(),
                patches.len()
            ),
        ));
    }
    let meta_path = slide_meta_path(manifest_path);
    let meta = if meta_path.exists() {
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::format(meta_path.display().to_string(), e.to_string()))?
    } else {
        SlideMeta {
            slide_id: file_stem(manifest_path),
            patch_size_px: DEFAULT_PATCH_SIZE_PX,
            magnification: DEFAULT_MAGNIFICATION.to_string(),
        }
    };
    SlideDataset::new(
        meta.slide_id,
        patches,
        embeddings,
        meta.patch_size_px,
        meta.magnification,
    )
}

pub fn save_slide(
    dataset: &SlideDataset,
    manifest_path: &Path,
    embedding_path: &Path,
) -> Result<()> {
    let mut text = String::new();
    for p in dataset.patches() {
        let line = ManifestLine {
            patch_id: p.patch_id.clone(),
            grid_x: p.grid_x,
            grid_y: p.grid_y,
            coarse_label: p.coarse_label,
        };
        text.push_str(&serde_json::to_string(&line).expect("manifest line serializes"));
        text.push('\n');
    }
    fs::write(manifest_path, text).map_err(|e| Error::io(manifest_path, e))?;
    write_embeddings(embedding_path, dataset.embeddings())?;
    let meta = SlideMeta {
        slide_id: dataset.slide_id().to_string(),
        patch_size_px: dataset.patch_size_px(),
        magnification: dataset.magnification().to_string(),
    };
    let meta_path = slide_meta_path(manifest_path);
    let json = serde_json::to_string_pretty(&meta).expect("slide meta serializes");
    fs::write(&meta_path, json + "\n").map_err(|e| Error::io(&meta_path, e))
}

#[derive(Debug, Serialize, Deserialize)]
struct PrototypeSidecar {
    level: PrototypeLevel,
    source_slide: Option<String>,
    member_counts: Vec<u64>,
}

/// The JSON sidecar that accompanies a prototype `.pemb` file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn save_prototypes(set: &PrototypeSet, path: &Path) -> Result<()> {
    write_embeddings(path, set.vectors())?;
    let sidecar = PrototypeSidecar {
        level: set.level(),
        source_slide: set.source_slide().map(str::to_string),
        member_counts: set.member_counts().to_vec(),
    };
    let side = sidecar_path(path);
    let json = serde_json::to_string(&sidecar).expect("sidecar serializes");
    fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))
}

pub fn load_prototypes(path: &Path) -> Result<PrototypeSet> {
    let vectors = read_embeddings(path)?;
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: PrototypeSidecar = serde_json::from_str(&text)
        .map_err(|e| Error::format(side.display().to_string(), e.to_string()))?;
    if sidecar.member_counts.len() != vectors.n_rows() {
        return Err(Error::format(
            side.display().to_string(),
            format!(
                "member_counts has {} entries but the vector file holds K={}",
                sidecar.member_counts.len(),
                vectors.n_rows()
            ),
        ));
    }
    PrototypeSet::new(
        sidecar.level,
        sidecar.source_slide,
        vectors,
        sidecar.member_counts,
    )
}

/// Formats like C's `%.9g`: nine significant digits, trailing zeros trimmed.
pub fn format_score(x: f32) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    let sci = format!("{:.8e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    let negative = mantissa.starts_with('-');
    let digits: String = mantissa.chars().filter(|c| c.is_ascii_digit()).collect();
    let body = if (-4..9).contains(&exp) {
        if exp < 0 {
            format!("0.{}{}", "0".repeat((-exp - 1) as usize), digits)
        } else {
            let split = (exp + 1) as usize;
            format!("{}.{}", &digits[..split], &digits[split..])
        }
    } else {
        format!(
            "{}.{}e{}{:02}",
            &digits[..1],
            &digits[1..],
            if exp < 0 { '-' } else { '+' },
            exp.abs()
        )
    };
    let body = trim_fraction(&body);
    if negative {
        format!("-{body}")
    } else {
        body
    }
}

fn trim_fraction(s: &str) -> String {
    let (num, exp) = match s.find('e') {
        Some(i) => (&s[..i], &s[i..]),
        None => (s, ""),
    };
    let num = if num.contains('.') {
        num.trim_end_matches('0').trim_end_matches('.')
    } else {
        num
    };
    format!("{num}{exp}")
}

pub fn save_label_table(table: &LabelTable, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(&mut out);
        w.write_record(["patch_id", "label", "score"])
            .and_then(|_| {
                table.entries.iter().try_for_each(|e| {
                    w.write_record([
                        e.patch_id.as_str(),
                        if e.label == 1 { "1" } else { "0" },
                        &format_score(e.score),
                    ])
                })
            })
            .and_then(|_| w.flush().map_err(csv::Error::from))
            .map_err(|e| Error::Internal(format!("csv encoding: {e}")))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn load_label_table(path: &Path, slide_id: &str) -> Result<LabelTable> {
    let context = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(bytes.as_slice());
    let header = r
        .headers()
        .map_err(|e| Error::format(&context, e.to_string()))?;
    if header != vec!["patch_id", "label", "score"] {
        return Err(Error::format(
            &context,
            "header must be `patch_id,label,score`",
        ));
    }
    let mut entries = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(&context, format!("row {i}: {e}")))?;
        if rec.len() != 3 {
            return Err(Error::format(
                &context,
                format!("row {i}: expected 3 fields"),
            ));
        }
        let label = match &rec[1] {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::format(
                    &context,
                    format!("row {i}: label {other:?} is not 0 or 1"),
                ))
            }
        };
        let score: f32 = rec[2]
            .parse()
            .map_err(|_| Error::format(&context, format!("row {i}: bad score {:?}", &rec[2])))?;
        entries.push(LabelEntry {
            patch_id: rec[0].to_string(),
            label,
            score,
        });
    }
    LabelTable::new(slide_id, entries)
}
