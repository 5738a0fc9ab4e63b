//! On-disk expert weights.
//!
//! Every file starts with an 8-byte preamble, all integers little-endian:
//!
//! ```text
//! magic "MOEW" | version u16 (=1) | kind u8 | reserved u8 (=0)
//! ```
//!
//! kind 1, one matrix (unstacked layout, one file per expert/layer/matrix):
//! `expert u32 | layer u32 | matrix u32 (0=w1, 1=v1, 2=w2) | rows u32 | cols u32`
//! followed by `rows*cols` f32 values, row-major.
//!
//! kind 2, prestacked bundle (one file for all experts):
//! `n_experts u32 | n_layers u32 | d_embed u32 | d_ffn u32`
//! followed, for each expert in order, by one contiguous region laid out as
//! `[layer][w1, v1, w2][row-major f32]`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{ExpertLayer, ExpertMatrix, ExpertWeights, ModelConfig};
use crate::numerics::Matrix;
use crate::wiring::{expert_arrays, ArraySpec, Packing};

pub const MAGIC: &[u8; 4] = b"MOEW";
pub const VERSION: u16 = 1;
pub const PREAMBLE_LEN: usize = 8;
pub const MATRIX_HEADER_LEN: usize = PREAMBLE_LEN + 20;
pub const STACKED_HEADER_LEN: usize = PREAMBLE_LEN + 16;

const KIND_MATRIX: u8 = 1;
const KIND_STACKED: u8 = 2;

/// Experts loaded from disk plus the residency arrays the load registered.
#[derive(Debug, Clone)]
pub struct LoadedExperts {
    pub experts: Vec<ExpertWeights>,
    pub arrays: Vec<ArraySpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PackSummary {
    pub n_experts: usize,
    pub n_layers: usize,
    pub d_embed: usize,
    pub d_ffn: usize,
    pub bytes_written: u64,
}

pub fn unstacked_file_name(expert: usize, layer: usize, which: ExpertMatrix) -> String {
    format!("expert{expert:03}_layer{layer:03}_{}.moew", which.name())
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::WeightsFormat {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn preamble(kind: u8) -> [u8; PREAMBLE_LEN] {
    let mut p = [0u8; PREAMBLE_LEN];
    p[..4].copy_from_slice(MAGIC);
    p[4..6].copy_from_slice(&VERSION.to_le_bytes());
    p[6] = kind;
    p
}

fn u32_field(v: usize, path: &Path) -> Result<[u8; 4]> {
    u32::try_from(v)
        .map(u32::to_le_bytes)
        .map_err(|_| format_err(path, format!("dimension {v} does not fit in u32")))
}

fn write_f32s(out: &mut impl Write, data: &[f32]) -> Result<()> {
    for v in data {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32s<const N: usize>(bytes: &[u8]) -> [usize; N] {
    let mut out = [0usize; N];
    for (i, o) in out.iter_mut().enumerate() {
        let b = &bytes[i * 4..i * 4 + 4];
        *o = u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize;
    }
    out
}

fn read_f32s(reader: &mut impl Read, n: usize, path: &Path) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    reader
        .read_exact(&mut buf)
        .map_err(|_| format_err(path, "payload truncated"))?;
    let data: Vec<f32> = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(data)
}

fn check_preamble(bytes: &[u8], kind: u8, path: &Path) -> Result<()> {
    if &bytes[..4] != MAGIC {
        return Err(format_err(path, "bad magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    if bytes[6] != kind {
        return Err(format_err(path, format!("kind {} where {kind} was expected", bytes[6])));
    }
    Ok(())
}

struct MatrixHeader {
    expert: usize,
    layer: usize,
    which: ExpertMatrix,
    rows: usize,
    cols: usize,
}

fn read_matrix_header(reader: &mut impl Read, path: &Path) -> Result<MatrixHeader> {
    let mut head = [0u8; MATRIX_HEADER_LEN];
    reader
        .read_exact(&mut head)
        .map_err(|_| format_err(path, "header truncated"))?;
    check_preamble(&head, KIND_MATRIX, path)?;
    let [expert, layer, matrix, rows, cols] = read_u32s::<5>(&head[PREAMBLE_LEN..]);
    let which = ExpertMatrix::from_index(matrix as u32)
        .ok_or_else(|| format_err(path, format!("unknown matrix index {matrix}")))?;
    Ok(MatrixHeader {
        expert,
        layer,
        which,
        rows,
        cols,
    })
}

/// Writes one file per (expert, layer, matrix) into `dir`.
pub fn write_unstacked(dir: &Path, config: &ModelConfig, experts: &[ExpertWeights]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (e, expert) in experts.iter().enumerate() {
        if expert.layers.len() != config.n_layers {
            return Err(Error::invalid(format!(
                "expert {e} has {} layers, config has {}",
                expert.layers.len(),
                config.n_layers
            )));
        }
        for (l, layer) in expert.layers.iter().enumerate() {
            for which in ExpertMatrix::ALL {
                let path = dir.join(unstacked_file_name(e, l, which));
                let m = layer.matrix(which);
                let mut out = BufWriter::new(File::create(&path)?);
                out.write_all(&preamble(KIND_MATRIX))?;
                for v in [e, l, which as usize, m.rows(), m.cols()] {
                    out.write_all(&u32_field(v, &path)?)?;
                }
                write_f32s(&mut out, m.as_slice())?;
                out.flush()?;
            }
        }
    }
    Ok(())
}

fn scan_unstacked(dir: &Path) -> Result<BTreeMap<(usize, usize, ExpertMatrix), PathBuf>> {
    let mut found = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|s| s.to_str()) != Some("moew") {
            continue;
        }
        let mut reader = BufReader::new(File::open(&path)?);
        let h = read_matrix_header(&mut reader, &path)?;
        if found.insert((h.expert, h.layer, h.which), path.clone()).is_some() {
            return Err(format_err(&path, "duplicate (expert, layer, matrix) entry"));
        }
    }
    if found.is_empty() {
        return Err(format_err(dir, "no .moew matrix files found"));
    }
    Ok(found)
}

/// Reads an unstacked directory and writes one prestacked bundle.
pub fn pack_weights(dir: &Path, out_path: &Path) -> Result<PackSummary> {
    let files = scan_unstacked(dir)?;
    let n_experts = files.keys().map(|k| k.0).max().unwrap_or(0) + 1;
    let n_layers = files.keys().map(|k| k.1).max().unwrap_or(0) + 1;

    let mut d_embed = None;
    let mut d_ffn = None;
    let mut out = BufWriter::new(File::create(out_path)?);
    out.write_all(&preamble(KIND_STACKED))?;
    // Dimensions are patched in after the first W1 is read.
    let mut body: Vec<u8> = Vec::new();
    for e in 0..n_experts {
        for l in 0..n_layers {
            for which in ExpertMatrix::ALL {
                let path = files.get(&(e, l, which)).ok_or_else(|| {
                    format_err(dir, format!("missing {}", unstacked_file_name(e, l, which)))
                })?;
                let mut reader = BufReader::new(File::open(path)?);
                let h = read_matrix_header(&mut reader, path)?;
                let (rows, cols) = match which {
                    ExpertMatrix::W1 | ExpertMatrix::V1 => (h.rows, h.cols),
                    ExpertMatrix::W2 => (h.cols, h.rows),
                };
                let de = *d_embed.get_or_insert(rows);
                let df = *d_ffn.get_or_insert(cols);
                if (rows, cols) != (de, df) {
                    return Err(format_err(path, "matrix shape disagrees with the rest of the set"));
                }
                let mut payload = Vec::with_capacity(h.rows * h.cols * 4);
                reader.read_to_end(&mut payload)?;
                if payload.len() != h.rows * h.cols * 4 {
                    return Err(format_err(path, "payload length does not match header"));
                }
                body.extend_from_slice(&payload);
            }
        }
    }
    let (d_embed, d_ffn) = (d_embed.unwrap_or(0), d_ffn.unwrap_or(0));
    for v in [n_experts, n_layers, d_embed, d_ffn] {
        out.write_all(&u32_field(v, out_path)?)?;
    }
    out.write_all(&body)?;
    out.flush()?;
    Ok(PackSummary {
        n_experts,
        n_layers,
        d_embed,
        d_ffn,
        bytes_written: (STACKED_HEADER_LEN + body.len()) as u64,
    })
}

fn check_dims(path: &Path, found: [usize; 4], config: &ModelConfig) -> Result<()> {
    let expected = [config.n_experts, config.n_layers, config.d_embed, config.d_ffn];
    if found != expected {
        return Err(format_err(
            path,
            format!("header dims (experts, layers, d_embed, d_ffn) = {found:?}, config expects {expected:?}"),
        ));
    }
    Ok(())
}

fn load_stacked(path: &Path, config: &ModelConfig) -> Result<Vec<ExpertWeights>> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut head = [0u8; STACKED_HEADER_LEN];
    reader
        .read_exact(&mut head)
        .map_err(|_| format_err(path, "header truncated"))?;
    check_preamble(&head, KIND_STACKED, path)?;
    check_dims(path, read_u32s::<4>(&head[PREAMBLE_LEN..]), config)?;

    let mut experts = Vec::with_capacity(config.n_experts);
    for _ in 0..config.n_experts {
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let mut mats = ExpertMatrix::ALL.iter().map(|&which| {
                let (r, c) = which.shape(config);
                read_f32s(&mut reader, r * c, path).and_then(|d| Matrix::new(r, c, d))
            });
            let (w1, v1, w2) = (mats.next().unwrap()?, mats.next().unwrap()?, mats.next().unwrap()?);
            layers.push(ExpertLayer { w1, v1, w2 });
        }
        experts.push(ExpertWeights { layers });
    }
    let mut rest = [0u8; 1];
    if reader.read(&mut rest)? != 0 {
        return Err(format_err(path, "trailing bytes after payload"));
    }
    Ok(experts)
}

fn load_unstacked(dir: &Path, config: &ModelConfig) -> Result<Vec<ExpertWeights>> {
    let mut experts = Vec::with_capacity(config.n_experts);
    for e in 0..config.n_experts {
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let mut mats = Vec::with_capacity(3);
            for which in ExpertMatrix::ALL {
                let path = dir.join(unstacked_file_name(e, l, which));
                if !path.exists() {
                    return Err(format_err(&path, "missing file"));
                }
                let mut reader = BufReader::new(File::open(&path)?);
                let h = read_matrix_header(&mut reader, &path)?;
                if (h.expert, h.layer, h.which) != (e, l, which) {
                    return Err(format_err(&path, "header does not match file name"));
                }
                if (h.rows, h.cols) != which.shape(config) {
                    return Err(format_err(
                        &path,
                        format!("shape {}x{} disagrees with config", h.rows, h.cols),
                    ));
                }
                let data = read_f32s(&mut reader, h.rows * h.cols, &path)?;
                mats.push(Matrix::new(h.rows, h.cols, data)?);
            }
            let w2 = mats.pop().unwrap();
            let v1 = mats.pop().unwrap();
            let w1 = mats.pop().unwrap();
            layers.push(ExpertLayer { w1, v1, w2 });
        }
        experts.push(ExpertWeights { layers });
    }
    Ok(experts)
}

/// Loads every expert. `path` is a directory for [`Packing::Unstacked`] and
/// a bundle file for [`Packing::Prestacked`].
pub fn load_weights(path: &Path, format: Packing, config: &ModelConfig) -> Result<LoadedExperts> {
    config.validate()?;
    let experts = match format {
        Packing::Unstacked => load_unstacked(path, config)?,
        Packing::Prestacked => load_stacked(path, config)?,
    };
    let arrays = (0..config.n_experts)
        .flat_map(|e| expert_arrays(config, format, e))
        .collect();
    Ok(LoadedExperts { experts, arrays })
}
