//! Bit-exact binary tensor files and the containers built from them.
//!
//! Tensor layout (all integers little-endian):
//!
//! ```text
//! "MTOK" | version u16 | dtype u8 (0 = f32 LE) | rank u8 | dims rank*u32
//!        | payload (row-major) | crc32(payload) u32
//! ```
//!
//! Containers reuse the tensor encoding: a grid bundle holds per-view token
//! grids behind a JSON manifest, a params file holds the named fusion
//! parameter tensors, and a compressed-output file holds per-view selected
//! tokens and indices.

use crate::fusion::FusionParams;
use crate::tokens::{ImageMeta, Rect, TokenGrid};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const TENSOR_MAGIC: [u8; 4] = *b"MTOK";
pub const TENSOR_VERSION: u16 = 1;
pub const DTYPE_F32_LE: u8 = 0;

const BUNDLE_MAGIC: [u8; 4] = *b"MGRB";
const BUNDLE_VERSION: u16 = 1;
const PARAMS_MAGIC: [u8; 4] = *b"MPRM";
const PARAMS_VERSION: u16 = 1;
const COMPRESSED_MAGIC: [u8; 4] = *b"MCMP";
const COMPRESSED_VERSION: u16 = 1;

/// Hard cap on elements per tensor, guarding reads of corrupt headers.
const MAX_ELEMENTS: u64 = 1 << 28;
const MAX_RANK: u8 = 8;

/// One dense f32 tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<u32>, data: Vec<f32>) -> Result<Self> {
        let expect: u64 = dims.iter().map(|&d| u64::from(d)).product();
        if expect != data.len() as u64 {
            return Err(Error::ShapeMismatch(format!(
                "tensor dims {dims:?} expect {expect} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }
}

pub fn write_tensor<W: Write>(w: &mut W, tensor: &Tensor) -> Result<()> {
    if tensor.dims.len() > MAX_RANK as usize {
        return Err(Error::Format(format!(
            "rank {} exceeds maximum {MAX_RANK}",
            tensor.dims.len()
        )));
    }
    w.write_all(&TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    w.write_all(&[DTYPE_F32_LE, tensor.dims.len() as u8])?;
    for &d in &tensor.dims {
        w.write_all(&d.to_le_bytes())?;
    }
    let mut payload = Vec::with_capacity(tensor.data.len() * 4);
    for &v in &tensor.data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&payload)?;
    w.write_all(&crc32fast::hash(&payload).to_le_bytes())?;
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected MTOK")));
    }
    let mut buf2 = [0u8; 2];
    r.read_exact(&mut buf2)?;
    let version = u16::from_le_bytes(buf2);
    if version != TENSOR_VERSION {
        return Err(Error::Format(format!(
            "unsupported format_version {version}"
        )));
    }
    r.read_exact(&mut buf2)?;
    let [dtype, rank] = buf2;
    if dtype != DTYPE_F32_LE {
        return Err(Error::Format(format!("unsupported dtype code {dtype}")));
    }
    if rank > MAX_RANK {
        return Err(Error::Format(format!("rank {rank} exceeds maximum {MAX_RANK}")));
    }
    let mut dims = Vec::with_capacity(rank as usize);
    let mut buf4 = [0u8; 4];
    for _ in 0..rank {
        r.read_exact(&mut buf4)?;
        dims.push(u32::from_le_bytes(buf4));
    }
    let count: u64 = dims.iter().map(|&d| u64::from(d)).product();
    if count > MAX_ELEMENTS {
        return Err(Error::Format(format!(
            "dims {dims:?} declare {count} elements, above the {MAX_ELEMENTS} cap"
        )));
    }
    let mut payload = vec![0u8; (count * 4) as usize];
    r.read_exact(&mut payload)?;
    r.read_exact(&mut buf4)?;
    let stored = u32::from_le_bytes(buf4);
    let computed = crc32fast::hash(&payload);
    if stored != computed {
        return Err(Error::Format(format!(
            "checksum mismatch: stored {stored:#010x}, computed {computed:#010x}"
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor { dims, data })
}

fn write_json_block<W: Write, T: Serialize>(w: &mut W, value: &T) -> Result<()> {
    let json = serde_json::to_vec(value).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    Ok(())
}

fn read_json_block<R: Read, T: for<'de> Deserialize<'de>>(r: &mut R) -> Result<T> {
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let len = u32::from_le_bytes(buf4);
    if len > 1 << 24 {
        return Err(Error::Format(format!("manifest length {len} implausible")));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json)?;
    serde_json::from_slice(&json).map_err(|e| Error::Format(format!("manifest: {e}")))
}

fn expect_magic<R: Read>(r: &mut R, magic: [u8; 4], version: u16, what: &str) -> Result<()> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if m != magic {
        return Err(Error::Format(format!(
            "{what}: bad magic {m:?}, expected {:?}",
            std::str::from_utf8(&magic).unwrap_or("?")
        )));
    }
    let mut v = [0u8; 2];
    r.read_exact(&mut v)?;
    let got = u16::from_le_bytes(v);
    if got != version {
        return Err(Error::Format(format!("{what}: unsupported version {got}")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Grid bundles: pre-exported encoder outputs.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleViewRecord {
    /// 0 is the global view, slices follow row-major from 1.
    pub view_id: u32,
    /// Pixel rectangle for slices; absent on the global view.
    pub rect: Option<Rect>,
    pub encoder_side: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub image_width: u32,
    pub image_height: u32,
    pub encoder_side: u32,
    pub channels: u32,
    pub grid_h: u32,
    pub grid_w: u32,
    pub views: Vec<BundleViewRecord>,
}

/// Pre-encoded token grids for every view of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct GridBundle {
    pub manifest: BundleManifest,
    pub grids: Vec<TokenGrid<f32>>,
}

impl GridBundle {
    pub fn image_meta(&self) -> Result<ImageMeta> {
        ImageMeta::new(self.manifest.image_width, self.manifest.image_height)
    }

    fn validate(&self) -> Result<()> {
        if self.manifest.views.len() != self.grids.len() {
            return Err(Error::Format(format!(
                "manifest lists {} views but bundle holds {} grids",
                self.manifest.views.len(),
                self.grids.len()
            )));
        }
        for (i, (record, grid)) in self.manifest.views.iter().zip(&self.grids).enumerate() {
            if record.view_id != i as u32 {
                return Err(Error::Format(format!(
                    "view record {i} carries view_id {}",
                    record.view_id
                )));
            }
            if grid.channels() != self.manifest.channels as usize
                || grid.h_u() != self.manifest.grid_h as usize
                || grid.w_u() != self.manifest.grid_w as usize
            {
                return Err(Error::Format(format!(
                    "grid {i} shape {}x{}x{} does not match the manifest",
                    grid.h_u(),
                    grid.w_u(),
                    grid.channels()
                )));
            }
        }
        Ok(())
    }
}

pub fn write_bundle(path: &Path, bundle: &GridBundle) -> Result<()> {
    bundle.validate()?;
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&BUNDLE_MAGIC)?;
    w.write_all(&BUNDLE_VERSION.to_le_bytes())?;
    write_json_block(&mut w, &bundle.manifest)?;
    for grid in &bundle.grids {
        let n = grid.n_tokens() as u32;
        let ch = grid.channels() as u32;
        write_tensor(&mut w, &Tensor::new(vec![n, ch], grid.tokens().to_vec())?)?;
        write_tensor(&mut w, &Tensor::new(vec![ch], grid.cls_token().to_vec())?)?;
        write_tensor(&mut w, &Tensor::new(vec![1 + n], grid.cls_attention().to_vec())?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_bundle(path: &Path) -> Result<GridBundle> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    expect_magic(&mut r, BUNDLE_MAGIC, BUNDLE_VERSION, "grid bundle")?;
    let manifest: BundleManifest = read_json_block(&mut r)?;
    let mut grids = Vec::with_capacity(manifest.views.len());
    for record in &manifest.views {
        let tokens = read_tensor(&mut r)?;
        let cls_token = read_tensor(&mut r)?;
        let attention = read_tensor(&mut r)?;
        let grid = TokenGrid::new(
            manifest.grid_h as usize,
            manifest.grid_w as usize,
            manifest.channels as usize,
            tokens.data,
            cls_token.data,
            attention.data,
        )
        .map_err(|e| Error::Format(format!("view {}: {e}", record.view_id)))?;
        grids.push(grid);
    }
    let bundle = GridBundle { manifest, grids };
    bundle.validate()?;
    Ok(bundle)
}

// ---------------------------------------------------------------------------
// Fusion parameter files.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamsMeta {
    channels: usize,
    out_width: usize,
    state_dim: usize,
}

pub fn save_params(path: &Path, params: &FusionParams<f32>) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&PARAMS_MAGIC)?;
    w.write_all(&PARAMS_VERSION.to_le_bytes())?;
    write_json_block(
        &mut w,
        &ParamsMeta {
            channels: params.channels,
            out_width: params.out_width,
            state_dim: params.ssm_fwd.state_dim,
        },
    )?;
    let tensors = params.param_tensors();
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, values) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        write_tensor(&mut w, &Tensor::new(vec![values.len() as u32], values.to_vec())?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<FusionParams<f32>> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    expect_magic(&mut r, PARAMS_MAGIC, PARAMS_VERSION, "params file")?;
    let meta: ParamsMeta = read_json_block(&mut r)?;
    let mut params = FusionParams::<f32>::zeros(meta.channels, meta.out_width, meta.state_dim);
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let count = u32::from_le_bytes(buf4) as usize;

    let expected = params.param_tensors().len();
    if count != expected {
        return Err(Error::Format(format!(
            "params file lists {count} tensors, expected {expected}"
        )));
    }
    let mut loaded = std::collections::HashSet::new();
    for _ in 0..count {
        let mut buf2 = [0u8; 2];
        r.read_exact(&mut buf2)?;
        let name_len = u16::from_le_bytes(buf2) as usize;
        if name_len > 256 {
            return Err(Error::Format(format!("tensor name length {name_len} implausible")));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let tensor = read_tensor(&mut r)?;
        let mut found = false;
        for (tname, values) in params.param_tensors_mut() {
            if tname == name {
                if values.len() != tensor.data.len() {
                    return Err(Error::Format(format!(
                        "tensor {name} holds {} values, expected {}",
                        tensor.data.len(),
                        values.len()
                    )));
                }
                values.copy_from_slice(&tensor.data);
                found = true;
                break;
            }
        }
        if !found {
            return Err(Error::Format(format!("unknown tensor name {name:?}")));
        }
        if !loaded.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate tensor {name:?}")));
        }
    }
    Ok(params)
}

// ---------------------------------------------------------------------------
// Compressed-output files.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressedFileManifest {
    pub image_width: u32,
    pub image_height: u32,
    pub n_views: u32,
    pub k_per_view: u32,
    pub output_width: u32,
}

/// Writes per-view `[k x D]` selected-token tensors and `[k]` index tensors
/// behind a manifest.
pub fn write_compressed(
    path: &Path,
    manifest: &CompressedFileManifest,
    views: &[(Tensor, Tensor)],
) -> Result<()> {
    if manifest.n_views as usize != views.len() {
        return Err(Error::ShapeMismatch(format!(
            "manifest declares {} views, got {}",
            manifest.n_views,
            views.len()
        )));
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&COMPRESSED_MAGIC)?;
    w.write_all(&COMPRESSED_VERSION.to_le_bytes())?;
    write_json_block(&mut w, manifest)?;
    for (selected, indices) in views {
        write_tensor(&mut w, selected)?;
        write_tensor(&mut w, indices)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_compressed(path: &Path) -> Result<(CompressedFileManifest, Vec<(Tensor, Tensor)>)> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    expect_magic(&mut r, COMPRESSED_MAGIC, COMPRESSED_VERSION, "compressed output")?;
    let manifest: CompressedFileManifest = read_json_block(&mut r)?;
    let mut views = Vec::with_capacity(manifest.n_views as usize);
    for _ in 0..manifest.n_views {
        let selected = read_tensor(&mut r)?;
        let indices = read_tensor(&mut r)?;
        views.push((selected, indices));
    }
    Ok((manifest, views))
}
