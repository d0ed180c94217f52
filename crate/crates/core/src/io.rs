// SPDX-License-Identifier: Apache-2.0

//! File formats: binary PGM, raw little-endian f32 tensors with a JSON
//! sidecar, grid and model checkpoints.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::combiner::GridSet;
use crate::decoders::{Decoder, DecoderKind};
use crate::error::{Error, Result};
use crate::grids::{BasisLabel, FeatureGrid, Interp};
use crate::model::{Model, ModelSpec};
use crate::numerics::Tensor;

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format { path: path.display().to_string(), msg: msg.into() }
}

/// Reads a P5 PGM as an `h x w` matrix scaled to [0, 1].
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(format_err(path, format!("expected P5 magic, found {:?}", fields[0])));
    }
    let parse = |s: &str, what: &str| s.parse::<usize>().map_err(|_| format_err(path, format!("bad {what} {s:?}")));
    let (w, h, maxval) = (parse(&fields[1], "width")?, parse(&fields[2], "height")?, parse(&fields[3], "maxval")?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(format_err(path, "width, height and maxval must be positive"));
    }
    let bpp = if maxval < 256 { 1 } else { 2 };
    let body = bytes.get(pos..pos + w * h * bpp).ok_or_else(|| format_err(path, "pixel data shorter than header says"))?;
    let data: Vec<f64> = if bpp == 1 {
        body.iter().map(|&b| b as f64 / maxval as f64).collect()
    } else {
        body.chunks(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / maxval as f64).collect()
    };
    Tensor::new(vec![h, w], data)
}

/// Writes a matrix as an 8-bit P5 PGM, clamping to [0, 1].
pub fn write_pgm(path: &Path, img: &Tensor) -> Result<()> {
    if !img.is_matrix() {
        return Err(Error::Shape("PGM needs a matrix".into()));
    }
    let mut out = format!("P5\n{} {}\n255\n", img.cols(), img.rows()).into_bytes();
    out.extend(img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, out)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorSidecar {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub order: String,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn f32_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

fn f32_values(bytes: &[u8]) -> Vec<f64> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect()
}

/// Writes `path` (raw f32 payload) and `path.json`.
pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, f32_bytes(t.data()))?;
    let side = TensorSidecar { shape: t.shape().to_vec(), dtype: "f32".into(), order: "row-major".into() };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)?)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let side: TensorSidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    if side.dtype != "f32" || side.order != "row-major" {
        return Err(format_err(path, format!("unsupported dtype/order {}/{}", side.dtype, side.order)));
    }
    let bytes = fs::read(path)?;
    let n: usize = side.shape.iter().product();
    if bytes.len() != 4 * n {
        return Err(format_err(path, format!("payload has {} bytes, shape needs {}", bytes.len(), 4 * n)));
    }
    Tensor::new(side.shape, f32_values(&bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSidecar {
    pub label: BasisLabel,
    pub resolution: Vec<usize>,
    pub feature_dim: usize,
    pub interp: Interp,
}

pub fn write_grid(path: &Path, g: &FeatureGrid) -> Result<()> {
    fs::write(path, f32_bytes(&g.params))?;
    let side = GridSidecar { label: g.label, resolution: g.resolution.clone(), feature_dim: g.feature_dim, interp: g.interp };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)?)?;
    Ok(())
}

pub fn read_grid(path: &Path) -> Result<FeatureGrid> {
    let side: GridSidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    let mut g = FeatureGrid::zeros(side.label, side.resolution, side.feature_dim, side.interp)?;
    let bytes = fs::read(path)?;
    if bytes.len() != 4 * g.params.len() {
        return Err(format_err(path, "grid payload length does not match sidecar"));
    }
    g.params = f32_values(&bytes);
    Ok(g)
}

const MAGIC: &[u8] = b"GAPLANES-CKPT 1\n";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BlockHeader {
    role: String,
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    grid: Option<GridSidecar>,
    #[serde(default)]
    scale: usize,
    len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    expr: String,
    mode: crate::model::Mode,
    dims: usize,
    seed: u64,
    spec: ModelSpec,
    decoder: DecoderKind,
    input_dim: usize,
    hidden: usize,
    blocks: Vec<BlockHeader>,
}

/// One file: magic line, manifest length (u64 LE), JSON manifest, then the
/// f32 payload of each block in manifest order.
pub fn write_model(path: &Path, m: &Model, seed: u64) -> Result<()> {
    let mut blocks = Vec::new();
    let mut payload = Vec::new();
    let grid_block = |role: &str, g: &FeatureGrid, scale: usize| BlockHeader {
        role: role.into(),
        grid: Some(GridSidecar { label: g.label, resolution: g.resolution.clone(), feature_dim: g.feature_dim, interp: g.interp }),
        scale,
        len: g.params.len(),
    };
    for (g, &s) in m.grids.grids.iter().zip(&m.grids.scales) {
        blocks.push(grid_block("grid", g, s));
        payload.extend(f32_bytes(&g.params));
    }
    if let Some(gates) = &m.gate_grids {
        for (g, &s) in gates.grids.iter().zip(&gates.scales) {
            blocks.push(grid_block("gate", g, s));
            payload.extend(f32_bytes(&g.params));
        }
    }
    blocks.push(BlockHeader { role: "decoder".into(), grid: None, scale: 0, len: m.decoder.params.len() });
    payload.extend(f32_bytes(&m.decoder.params));
    if !m.decoder.frozen.is_empty() {
        blocks.push(BlockHeader { role: "frozen".into(), grid: None, scale: 0, len: m.decoder.frozen.len() });
        payload.extend(f32_bytes(&m.decoder.frozen));
    }
    let manifest = CheckpointManifest {
        expr: m.expr.to_string(),
        mode: m.mode(),
        dims: m.dims(),
        seed,
        spec: m.spec.clone(),
        decoder: m.decoder.kind,
        input_dim: m.decoder.input_dim,
        hidden: m.decoder.hidden,
        blocks,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut f = fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&(json.len() as u64).to_le_bytes())?;
    f.write_all(&json)?;
    f.write_all(&payload)?;
    Ok(())
}

/// Returns the model and the seed recorded with it.
pub fn read_model(path: &Path) -> Result<(Model, u64)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if !bytes.starts_with(MAGIC) {
        return Err(format_err(path, "not a model checkpoint"));
    }
    let mut pos = MAGIC.len();
    let len_bytes: [u8; 8] = bytes.get(pos..pos + 8).ok_or_else(|| format_err(path, "truncated"))?.try_into().expect("8 bytes");
    let jlen = u64::from_le_bytes(len_bytes) as usize;
    pos += 8;
    let json = bytes.get(pos..pos + jlen).ok_or_else(|| format_err(path, "truncated manifest"))?;
    let man: CheckpointManifest = serde_json::from_slice(json)?;
    pos += jlen;
    let mut grids = Vec::new();
    let mut scales = Vec::new();
    let mut gates = Vec::new();
    let mut gate_scales = Vec::new();
    let mut decoder = Decoder::zeros(man.decoder, man.input_dim, man.hidden)?;
    for b in &man.blocks {
        let raw = bytes.get(pos..pos + 4 * b.len).ok_or_else(|| format_err(path, "truncated payload"))?;
        let values = f32_values(raw);
        pos += 4 * b.len;
        match (b.role.as_str(), &b.grid) {
            ("grid" | "gate", Some(side)) => {
                let mut g = FeatureGrid::zeros(side.label, side.resolution.clone(), side.feature_dim, side.interp)?;
                if g.params.len() != values.len() {
                    return Err(format_err(path, "grid block length mismatch"));
                }
                g.params = values;
                if b.role == "grid" {
                    grids.push(g);
                    scales.push(b.scale);
                } else {
                    gates.push(g);
                    gate_scales.push(b.scale);
                }
            }
            ("decoder", None) if values.len() == decoder.params.len() => decoder.params = values,
            ("frozen", None) if values.len() == decoder.frozen.len() => decoder.frozen = values,
            _ => return Err(format_err(path, format!("unexpected block {:?}", b.role))),
        }
    }
    if pos != bytes.len() {
        return Err(format_err(path, "trailing bytes after payload"));
    }
    let grids = GridSet::with_scales(grids, scales)?;
    let gates = if gates.is_empty() { None } else { Some(GridSet::with_scales(gates, gate_scales)?) };
    Ok((Model::from_parts(man.spec, grids, decoder, gates)?, man.seed))
}

/// Minimal CSV writer: header once, rows of display values.
pub struct CsvWriter<W: Write> {
    out: W,
    columns: usize,
}

impl<W: Write> CsvWriter<W> {
    pub fn new(mut out: W, header: &[&str]) -> Result<Self> {
        writeln!(out, "{}", header.join(","))?;
        Ok(CsvWriter { out, columns: header.len() })
    }

    pub fn row(&mut self, fields: &[String]) -> Result<()> {
        if fields.len() != self.columns {
            return Err(Error::Shape(format!("CSV row has {} fields, header {}", fields.len(), self.columns)));
        }
        writeln!(self.out, "{}", fields.join(","))?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

pub fn create_csv(path: &Path, header: &[&str]) -> Result<CsvWriter<fs::File>> {
    CsvWriter::new(fs::File::create(path)?, header)
}
