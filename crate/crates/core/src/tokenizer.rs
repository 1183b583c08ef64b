//! Fixed-codebook quantization: nearest-embedding tokens, decoding, and the
//! computable terms of the tokenizer objective.
//!
//! Tokens are 0-indexed everywhere in the API; `e_{i+1}` in display strings.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};

use crate::error::{check_dim, Error, Result};

const CODEBOOK_MAGIC: &[u8; 6] = b"RPOPCB";

/// `N × d_embed` code vectors with pairwise distinct rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    vectors: Array2<f64>,
}

impl Codebook {
    pub fn new(vectors: Array2<f64>) -> Result<Self> {
        let n = vectors.nrows();
        if n < 2 {
            return Err(Error::InvalidArgument(format!("codebook needs at least 2 vectors, got {n}")));
        }
        if vectors.ncols() == 0 {
            return Err(Error::InvalidArgument("codebook vectors must be non-empty".into()));
        }
        for i in 0..n {
            for j in i + 1..n {
                if vectors.row(i) == vectors.row(j) {
                    return Err(Error::InvalidArgument(format!(
                        "codebook rows e_{} and e_{} coincide",
                        i + 1,
                        j + 1
                    )));
                }
            }
        }
        Ok(Self { vectors })
    }

    pub fn size(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn check_token(&self, token: u32, position: impl FnOnce() -> String) -> Result<()> {
        if (token as usize) < self.size() {
            Ok(())
        } else {
            Err(Error::Vocabulary {
                kind: "observation",
                token,
                size: self.size(),
                position: position(),
            })
        }
    }

    /// Standalone dump: `RPOPCB`, u32 LE rows and cols, then f64 LE rows.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CODEBOOK_MAGIC)?;
        w.write_all(&(self.size() as u32).to_le_bytes())?;
        w.write_all(&(self.dim() as u32).to_le_bytes())?;
        for x in self.vectors.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != CODEBOOK_MAGIC {
            return Err(Error::Format("not a codebook dump".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let rows = u32::from_le_bytes(word) as usize;
        r.read_exact(&mut word)?;
        let cols = u32::from_le_bytes(word) as usize;
        let mut data = Vec::with_capacity(rows * cols);
        let mut buf = [0u8; 8];
        for _ in 0..rows * cols {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        let vectors = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| Error::Malformed(e.to_string()))?;
        Self::new(vectors)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

/// `K` latent vectors laid out row-major on a `√K × √K` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    latents: Array2<f64>,
    side: usize,
}

impl LatentGrid {
    pub fn new(latents: Array2<f64>) -> Result<Self> {
        let k = latents.nrows();
        let side = (k as f64).sqrt().round() as usize;
        if k == 0 || side * side != k {
            return Err(Error::InvalidArgument(format!("{k} latents do not form a square grid")));
        }
        Ok(Self { latents, side })
    }

    pub fn len(&self) -> usize {
        self.latents.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.nrows() == 0
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn dim(&self) -> usize {
        self.latents.ncols()
    }

    pub fn latents(&self) -> ArrayView2<'_, f64> {
        self.latents.view()
    }
}

/// Index of the nearest code vector for every latent; ties go to the lowest index.
pub fn quantize(latents: &LatentGrid, codebook: &Codebook) -> Result<Vec<u32>> {
    check_dim("latent width", codebook.dim(), latents.dim())?;
    Ok(latents
        .latents
        .axis_iter(Axis(0))
        .map(|latent| {
            let mut best = 0usize;
            let mut best_dist = f64::INFINITY;
            for (i, e) in codebook.vectors.axis_iter(Axis(0)).enumerate() {
                let dist: f64 = latent.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best_dist {
                    best = i;
                    best_dist = dist;
                }
            }
            best as u32
        })
        .collect())
}

/// Code vectors of `tokens` in spatial order.
pub fn decode_tokens(tokens: &[u32], codebook: &Codebook) -> Result<LatentGrid> {
    for (k, &t) in tokens.iter().enumerate() {
        codebook.check_token(t, || format!("slot {k}"))?;
    }
    let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    LatentGrid::new(codebook.vectors.select(Axis(0), &idx))
}

/// Deterministic stand-in encoder: mean-pool each grid patch per colour
/// channel, replicate or truncate the 3 channel means to `d_embed`, quantize.
pub fn encode_observation(
    image: ArrayView3<'_, f64>,
    tokens_per_obs: usize,
    codebook: &Codebook,
) -> Result<(Vec<u32>, LatentGrid)> {
    let (h, w, c) = image.dim();
    check_dim("image channels", 3, c)?;
    let side = (tokens_per_obs as f64).sqrt().round() as usize;
    if side == 0 || side * side != tokens_per_obs {
        return Err(Error::InvalidArgument(format!("{tokens_per_obs} tokens do not form a square grid")));
    }
    if h % side != 0 || w % side != 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!(
            "image {h}x{w} is not divisible into a {side}x{side} patch grid"
        )));
    }
    let (ph, pw) = (h / side, w / side);
    let d = codebook.dim();
    let mut latents = Array2::zeros((tokens_per_obs, d));
    for gy in 0..side {
        for gx in 0..side {
            let patch = image.slice(s![gy * ph..(gy + 1) * ph, gx * pw..(gx + 1) * pw, ..]);
            let means: Vec<f64> = (0..3)
                .map(|ch| patch.index_axis(Axis(2), ch).mean().expect("non-empty patch"))
                .collect();
            let mut row = latents.row_mut(gy * side + gx);
            for (j, v) in row.iter_mut().enumerate() {
                *v = means[j % 3];
            }
        }
    }
    let grid = LatentGrid::new(latents)?;
    let tokens = quantize(&grid, codebook)?;
    Ok((tokens, grid))
}

/// Paints each patch of an `h × w` image with the first three channels of its latent
/// (channel `c` reads latent index `c mod d_embed`).
pub fn render_latents(grid: &LatentGrid, height: usize, width: usize) -> Result<Array3<f64>> {
    let side = grid.side;
    if !height.is_multiple_of(side) || !width.is_multiple_of(side) {
        return Err(Error::InvalidArgument(format!(
            "image {height}x{width} is not divisible into a {side}x{side} patch grid"
        )));
    }
    let (ph, pw) = (height / side, width / side);
    let d = grid.dim();
    Ok(Array3::from_shape_fn((height, width, 3), |(y, x, c)| {
        grid.latents[[(y / ph) * side + x / pw, c % d]]
    }))
}

/// Values of the reconstruction and the two commitment terms (mean reductions).
/// Stop-gradient is the identity at evaluation time, so both commitment terms
/// evaluate to the same number.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenizerLoss {
    pub l1: f64,
    pub commit_codebook: f64,
    pub commit_encoder: f64,
}

pub fn tokenizer_loss_value(
    x: ArrayView3<'_, f64>,
    reconstruction: ArrayView3<'_, f64>,
    encoder_latents: ArrayView2<'_, f64>,
    quantized_latents: ArrayView2<'_, f64>,
) -> Result<TokenizerLoss> {
    if x.dim() != reconstruction.dim() {
        return Err(Error::InvalidArgument(format!(
            "image shapes differ: {:?} vs {:?}",
            x.dim(),
            reconstruction.dim()
        )));
    }
    if encoder_latents.dim() != quantized_latents.dim() {
        return Err(Error::InvalidArgument(format!(
            "latent shapes differ: {:?} vs {:?}",
            encoder_latents.dim(),
            quantized_latents.dim()
        )));
    }
    if x.is_empty() || encoder_latents.is_empty() {
        return Err(Error::Empty("tokenizer loss inputs"));
    }
    let l1 = x.iter().zip(reconstruction.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64;
    let mse = |a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>| {
        a.iter().zip(b.iter()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / a.len() as f64
    };
    Ok(TokenizerLoss {
        l1,
        commit_codebook: mse(encoder_latents, quantized_latents),
        commit_encoder: mse(quantized_latents, encoder_latents),
    })
}
