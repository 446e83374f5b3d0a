//! Dataset ingestion (binary PGM images, planted sparse data) and checkpoint
//! persistence.
//!
//! Checkpoint layout, all little-endian:
//!
//! ```text
//! "LSRS" | u8 version (0x01) | u32 K | u32 L | K*L f32 atoms (row-major)
//! [ u8 ema flag | if 1: K f32 counts, K*L f32 sums ]
//! [ u8 coder flag | if 1: u32 M | u32 L | u8 mode (0 raw, 1 affine)
//!   | if affine: L*M f32 enc_w, L f32 enc_b, M*L f32 dec_w, M f32 dec_b ]
//! ```
//!
//! A file may end right after the atoms; both optional sections are then
//! absent. `K = 0` stores a model without atoms (identity bottleneck).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autoencoder::{AffineCoder, CoderMode};
use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::sparse_coding::{SparseCode, SparseColumn};
use crate::tensor::SignalMatrix;

pub const MAGIC: [u8; 4] = *b"LSRS";
pub const VERSION: u8 = 0x01;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub source: String,
    pub patch: Option<usize>,
    /// Value range after normalization, when known.
    pub range: Option<(f64, f64)>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: SignalMatrix,
    pub meta: DatasetMeta,
}

/// Grayscale image with pixels scaled to `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn pixel(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    /// `p x p` crop at `(top, left)` flattened row-major.
    pub fn crop(&self, top: usize, left: usize, p: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(p * p);
        for r in top..top + p {
            out.extend_from_slice(&self.pixels[r * self.width + left..r * self.width + left + p]);
        }
        out
    }
}

fn pgm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

/// Parses a binary (P5) PGM. 8-bit and 16-bit (big-endian) samples are
/// accepted; values are divided by maxval.
pub fn parse_pgm(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    let mut pos = 0;
    let magic = pgm_token(bytes, &mut pos).ok_or("empty file")?;
    if magic != b"P5" {
        return Err(format!("not a binary PGM (magic {:?})", String::from_utf8_lossy(magic)));
    }
    let mut header = [0usize; 3];
    for (i, name) in ["width", "height", "maxval"].iter().enumerate() {
        let tok = pgm_token(bytes, &mut pos).ok_or_else(|| format!("missing {name}"))?;
        header[i] = std::str::from_utf8(tok)
            .ok()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| format!("bad {name}"))?;
    }
    let [width, height, maxval] = header;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(format!("unsupported header {width}x{height} maxval {maxval}"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let bpp = if maxval < 256 { 1 } else { 2 };
    let need = width * height * bpp;
    let raster = bytes.get(pos..pos + need).ok_or("raster truncated")?;
    let scale = 1.0 / maxval as f64;
    let pixels = if bpp == 1 {
        raster.iter().map(|&v| (v as f64 * scale).min(1.0)).collect()
    } else {
        raster.chunks_exact(2).map(|c| (u16::from_be_bytes([c[0], c[1]]) as f64 * scale).min(1.0)).collect()
    };
    Ok(GrayImage { width, height, pixels })
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path)?;
    parse_pgm(&bytes).map_err(|reason| Error::ImageDecode { path: path.to_path_buf(), reason })
}

/// Writes `[0, 1]` values (clamped) as an 8-bit binary PGM.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::DimensionMismatch(format!("{} values for a {width}x{height} image", values.len())));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, out)?;
    Ok(())
}

fn is_pgm(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm") || e.eq_ignore_ascii_case("pnm"))
}

/// Decodable PGM images in `dir`, sorted by file name. Undecodable files are
/// skipped with a warning.
pub fn read_image_dir(dir: &Path) -> Result<Vec<(PathBuf, GrayImage)>> {
    let entries = fs::read_dir(dir).map_err(|e| {
        log::warn!("cannot read {}: {e}", dir.display());
        Error::NoImages(dir.to_path_buf())
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_pgm(p))
        .collect();
    paths.sort();
    let mut images = Vec::new();
    for path in paths {
        match read_pgm(&path) {
            Ok(img) => images.push((path, img)),
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    Ok(images)
}

/// Draws `max_patches` seeded random `patch x patch` crops from the images in
/// `dir`; each column is one crop flattened row-major.
pub fn load_images(dir: &Path, patch: usize, max_patches: usize, seed: u64) -> Result<Dataset> {
    if patch == 0 || max_patches == 0 {
        return Err(Error::InvalidParameter("patch size and patch count must be positive".into()));
    }
    let images: Vec<GrayImage> = read_image_dir(dir)?
        .into_iter()
        .filter_map(|(path, img)| {
            if img.width >= patch && img.height >= patch {
                Some(img)
            } else {
                log::warn!("skipping {}: smaller than {patch}x{patch}", path.display());
                None
            }
        })
        .collect();
    if images.is_empty() {
        return Err(Error::NoImages(dir.to_path_buf()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(max_patches * patch * patch);
    for _ in 0..max_patches {
        let img = &images[rng.random_range(0..images.len())];
        let top = rng.random_range(0..=img.height - patch);
        let left = rng.random_range(0..=img.width - patch);
        data.extend(img.crop(top, left, patch));
    }
    Ok(Dataset {
        samples: SignalMatrix::new(patch * patch, max_patches, data)?,
        meta: DatasetMeta {
            source: format!("images:{}", dir.display()),
            patch: Some(patch),
            range: Some((0.0, 1.0)),
            seed,
        },
    })
}

/// Non-overlapping `patch x patch` tiles covering the image, row-major over
/// the tile grid. Returns `(tile_rows, tile_cols, tiles)`.
pub fn image_tiles(img: &GrayImage, patch: usize) -> Result<(usize, usize, SignalMatrix)> {
    let (rows, cols) = (img.height / patch, img.width / patch);
    if patch == 0 || rows == 0 || cols == 0 {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} image has no {patch}x{patch} tiles",
            img.width, img.height
        )));
    }
    let mut data = Vec::with_capacity(rows * cols * patch * patch);
    for r in 0..rows {
        for c in 0..cols {
            data.extend(img.crop(r * patch, c * patch, patch));
        }
    }
    Ok((rows, cols, SignalMatrix::new(patch * patch, rows * cols, data)?))
}

/// Ground-truth generator for recovery experiments.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedModel {
    pub true_dictionary: Dictionary,
    pub s_star: usize,
    pub noise_sigma: f64,
    pub coeff_min: f64,
}

impl PlantedModel {
    pub fn new(true_dictionary: Dictionary, s_star: usize) -> Self {
        Self { true_dictionary, s_star, noise_sigma: 0.0, coeff_min: 0.5 }
    }
}

/// `n` signals `gamma* D* + noise` with `s_star` uniformly placed atoms per
/// column and coefficient magnitudes uniform in `[coeff_min, 1]` with random
/// sign. Returns the data and the planted codes.
pub fn generate_planted(model: &PlantedModel, n: usize, seed: u64) -> Result<(Dataset, SparseCode)> {
    let d = &model.true_dictionary;
    if n == 0 {
        return Err(Error::InvalidParameter("planted sample count must be positive".into()));
    }
    if model.s_star > d.k().min(d.l()) {
        return Err(Error::InvalidParameter(format!(
            "planted sparsity {} exceeds min(K={}, L={})",
            model.s_star,
            d.k(),
            d.l()
        )));
    }
    if !(model.noise_sigma >= 0.0) || !(model.coeff_min >= 0.0 && model.coeff_min <= 1.0) {
        return Err(Error::InvalidParameter("noise sigma must be >= 0 and coeff_min in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = d.l();
    let mut data = Vec::with_capacity(n * l);
    let mut columns = Vec::with_capacity(n);
    for _ in 0..n {
        let support = rand::seq::index::sample(&mut rng, d.k(), model.s_star).into_vec();
        let coeffs: Vec<f64> = (0..model.s_star)
            .map(|_| {
                let mag = if model.coeff_min < 1.0 { rng.random_range(model.coeff_min..=1.0) } else { 1.0 };
                if rng.random::<bool>() { mag } else { -mag }
            })
            .collect();
        let mut col = vec![0.0; l];
        for (&a, &c) in support.iter().zip(&coeffs) {
            crate::linalg::axpy(c, d.atom(a), &mut col);
        }
        if model.noise_sigma > 0.0 {
            for v in col.iter_mut() {
                let e: f64 = StandardNormal.sample(&mut rng);
                *v += model.noise_sigma * e;
            }
        }
        data.extend(col);
        columns.push(SparseColumn { support, coeffs });
    }
    let samples = SignalMatrix::new(l, n, data)?;
    let truth = SparseCode::new(d.k(), columns)?;
    Ok((
        Dataset {
            samples,
            meta: DatasetMeta { source: format!("planted:K={},s={}", d.k(), model.s_star), patch: None, range: None, seed },
        },
        truth,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub counts: Vec<f64>,
    pub sums: Vec<f64>,
}

/// Everything a checkpoint can hold.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub dictionary: Option<Dictionary>,
    pub ema: Option<EmaState>,
    pub coder: Option<AffineCoder>,
}

fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Serializes a checkpoint. Values are stored as f32.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let (k, l, atoms) = match &ckpt.dictionary {
        Some(d) => (d.k(), d.l(), d.atoms()),
        None => (0, 0, &[][..]),
    };
    let mut out = Vec::with_capacity(16 + 4 * atoms.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(k as u32).to_le_bytes());
    out.extend_from_slice(&(l as u32).to_le_bytes());
    put_f32s(&mut out, atoms);
    match &ckpt.ema {
        Some(ema) => {
            if ema.counts.len() != k || ema.sums.len() != atoms.len() {
                return Err(Error::DimensionMismatch("EMA state does not match the codebook".into()));
            }
            out.push(1);
            put_f32s(&mut out, &ema.counts);
            put_f32s(&mut out, &ema.sums);
        }
        None => out.push(0),
    }
    match &ckpt.coder {
        Some(c) => {
            out.push(1);
            out.extend_from_slice(&(c.m as u32).to_le_bytes());
            out.extend_from_slice(&(c.l as u32).to_le_bytes());
            match c.mode {
                CoderMode::RawPatch => out.push(0),
                CoderMode::Affine => {
                    out.push(1);
                    put_f32s(&mut out, &c.enc_w);
                    put_f32s(&mut out, &c.enc_b);
                    put_f32s(&mut out, &c.dec_w);
                    put_f32s(&mut out, &c.dec_b);
                }
            }
        }
        None => out.push(0),
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Truncated(format!("{what} needs {n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let len = n.checked_mul(4).ok_or_else(|| Error::Malformed(format!("{what} size overflows")))?;
        Ok(self.take(len, what)?.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect())
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic { found: [magic[0], magic[1], magic[2], magic[3]] });
    }
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(Error::BadVersion(version));
    }
    let k = r.u32("K")?;
    let l = r.u32("L")?;
    let atoms = r.f32s(k * l, "atoms")?;
    let dictionary = if k == 0 {
        None
    } else {
        Some(Dictionary::from_atoms(k, l, atoms).map_err(|e| Error::Malformed(e.to_string()))?)
    };
    let mut ckpt = Checkpoint { dictionary, ema: None, coder: None };
    if r.at_end() {
        return Ok(ckpt);
    }
    match r.u8("EMA flag")? {
        0 => {}
        1 => {
            let counts = r.f32s(k, "EMA counts")?;
            let sums = r.f32s(k * l, "EMA sums")?;
            ckpt.ema = Some(EmaState { counts, sums });
        }
        f => return Err(Error::Malformed(format!("EMA flag {f}"))),
    }
    if r.at_end() {
        return Ok(ckpt);
    }
    match r.u8("coder flag")? {
        0 => {}
        1 => {
            let m = r.u32("coder M")?;
            let cl = r.u32("coder L")?;
            ckpt.coder = Some(match r.u8("coder mode")? {
                0 => AffineCoder::raw(m),
                1 => {
                    let enc_w = r.f32s(cl * m, "enc_w")?;
                    let enc_b = r.f32s(cl, "enc_b")?;
                    let dec_w = r.f32s(m * cl, "dec_w")?;
                    let dec_b = r.f32s(m, "dec_b")?;
                    AffineCoder::affine(m, cl, enc_w, enc_b, dec_w, dec_b).map_err(|e| Error::Malformed(e.to_string()))?
                }
                mode => return Err(Error::Malformed(format!("coder mode {mode}"))),
            });
        }
        f => return Err(Error::Malformed(format!("coder flag {f}"))),
    }
    if !r.at_end() {
        return Err(Error::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(ckpt)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}
