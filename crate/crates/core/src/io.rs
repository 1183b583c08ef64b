//! The `RPOPv1` binary model format.
//!
//! ```text
//! "RPOPv1"
//! u32 LE: L, h, d_model, d_ffn, K, N, |A|
//! f64 LE matrices, per layer:
//!     per head: W_Q, W_K, W_V            (d_model × d_head)
//!     W_G, W_O                            (d_model × d_model)
//!     group norm scale, shift             (d_model)
//!     FFN W_1 (d_model × d_ffn), W_2 (d_ffn × d_model)
//!     LN1 scale, shift, LN2 scale, shift  (d_model)
//! tagged sections until end of file:
//!     4-byte tag, u32 rows, u32 cols, rows·cols f64 values
//! ```
//!
//! `NRM\0` (1 × 2: norm epsilon, dropout) is always written. A world-model
//! bundle adds `CBK\0` codebook, `ADP\0` adapter (only when present), `ACT\0`
//! action table, `PRD\0` prediction tokens, `OBH\0` / `RWH\0` / `DNH\0` heads.
//! The reward mode follows from the width of `RWH\0`. Decays and rotation
//! frequencies are fixed by the architecture and not stored.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::kernel::HeadProjections;
use crate::pop::PredictionTokens;
use crate::scalar::Scalar;
use crate::stack::{head_decay, LayerParams, ModelConfig, MsrParams, NormParams, StackParams};
use crate::tokenizer::Codebook;
use crate::world_model::{BundleParts, RewardMode, WorldModelBundle};

pub const MAGIC: &[u8; 6] = b"RPOPv1";

const TAG_NORM: [u8; 4] = *b"NRM\0";
const TAG_CODEBOOK: [u8; 4] = *b"CBK\0";
const TAG_ADAPTER: [u8; 4] = *b"ADP\0";
const TAG_ACTIONS: [u8; 4] = *b"ACT\0";
const TAG_PRED: [u8; 4] = *b"PRD\0";
const TAG_OBS_HEAD: [u8; 4] = *b"OBH\0";
const TAG_REWARD_HEAD: [u8; 4] = *b"RWH\0";
const TAG_DONE_HEAD: [u8; 4] = *b"DNH\0";

struct Writer<W> {
    inner: W,
}

impl<W: Write> Writer<W> {
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit in u32")))?;
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    fn values<'a, T: Scalar>(&mut self, it: impl IntoIterator<Item = &'a T>) -> Result<()> {
        for x in it {
            self.inner.write_all(&Scalar::to_f64(*x).to_le_bytes())?;
        }
        Ok(())
    }

    fn section<T: Scalar>(&mut self, tag: [u8; 4], m: &Array2<T>) -> Result<()> {
        self.inner.write_all(&tag)?;
        self.u32(m.nrows())?;
        self.u32(m.ncols())?;
        self.values(m.iter())
    }
}

struct Reader<R> {
    inner: R,
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Malformed("file ends before all parameters were read".into())
    } else {
        Error::Io(e)
    }
}

impl<R: Read> Reader<R> {
    fn u32(&mut self) -> Result<usize> {
        let mut b = [0u8; 4];
        self.inner.read_exact(&mut b).map_err(truncated)?;
        Ok(u32::from_le_bytes(b) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut bytes = vec![0u8; n * 8];
        self.inner.read_exact(&mut bytes).map_err(truncated)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }

    fn matrix<T: Scalar>(&mut self, rows: usize, cols: usize) -> Result<Array2<T>> {
        let data = self.f64s(rows * cols)?.into_iter().map(T::from_f64).collect();
        Ok(Array2::from_shape_vec((rows, cols), data).expect("length matches shape"))
    }

    fn vector<T: Scalar>(&mut self, n: usize) -> Result<Array1<T>> {
        Ok(self.f64s(n)?.into_iter().map(T::from_f64).collect())
    }

    /// Next tagged section, or `None` at a clean end of file.
    fn section(&mut self) -> Result<Option<([u8; 4], Array2<f64>)>> {
        let mut tag = [0u8; 4];
        let mut got = 0;
        while got < 4 {
            let n = self.inner.read(&mut tag[got..])?;
            if n == 0 {
                return if got == 0 {
                    Ok(None)
                } else {
                    Err(Error::Malformed("partial section tag".into()))
                };
            }
            got += n;
        }
        let rows = self.u32()?;
        let cols = self.u32()?;
        Ok(Some((tag, self.matrix(rows, cols)?)))
    }
}

fn write_stack<T: Scalar, W: Write>(w: &mut Writer<W>, stack: &StackParams<T>) -> Result<()> {
    let c = &stack.config;
    w.inner.write_all(MAGIC)?;
    for v in [c.layers, c.heads, c.d_model, c.d_ffn, c.tokens_per_obs, c.vocab_size, c.num_actions] {
        w.u32(v)?;
    }
    for layer in &stack.layers {
        for head in &layer.msr.heads {
            w.values(head.w_q.iter())?;
            w.values(head.w_k.iter())?;
            w.values(head.w_v.iter())?;
        }
        w.values(layer.msr.w_g.iter())?;
        w.values(layer.msr.w_o.iter())?;
        w.values(layer.msr.group_norm.scale.iter())?;
        w.values(layer.msr.group_norm.shift.iter())?;
        w.values(layer.ffn_w1.iter())?;
        w.values(layer.ffn_w2.iter())?;
        for norm in [&layer.ln1, &layer.ln2] {
            w.values(norm.scale.iter())?;
            w.values(norm.shift.iter())?;
        }
    }
    w.section(TAG_NORM, &Array2::from_shape_vec((1, 2), vec![c.ln_eps, c.dropout]).expect("1x2"))
}

/// Layer matrices of a stack whose header has already been read.
fn read_layers<T: Scalar, R: Read>(r: &mut Reader<R>, c: &ModelConfig) -> Result<Vec<LayerParams<T>>> {
    let (d, dh, f) = (c.d_model, c.d_head(), c.d_ffn);
    let norm = |r: &mut Reader<R>| -> Result<NormParams<T>> {
        Ok(NormParams { scale: r.vector(d)?, shift: r.vector(d)?, eps: c.ln_eps })
    };
    (0..c.layers)
        .map(|_| {
            let heads = (0..c.heads)
                .map(|i| HeadProjections::new(r.matrix(d, dh)?, r.matrix(d, dh)?, r.matrix(d, dh)?, head_decay(i)))
                .collect::<Result<Vec<_>>>()?;
            let w_g = r.matrix(d, d)?;
            let w_o = r.matrix(d, d)?;
            let gn = norm(r)?;
            let msr = MsrParams::new(heads, w_g, w_o, gn)?;
            let ffn_w1 = r.matrix(d, f)?;
            let ffn_w2 = r.matrix(f, d)?;
            let ln1 = norm(r)?;
            let ln2 = norm(r)?;
            Ok(LayerParams { msr, ffn_w1, ffn_w2, ln1, ln2 })
        })
        .collect()
}

struct Decoded<T> {
    stack: StackParams<T>,
    sections: BTreeMap<[u8; 4], Array2<f64>>,
}

fn decode<T: Scalar, R: Read>(input: R) -> Result<Decoded<T>> {
    let mut r = Reader { inner: input };
    let mut magic = [0u8; 6];
    r.inner.read_exact(&mut magic).map_err(|_| Error::Format("missing RPOPv1 magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("missing RPOPv1 magic".into()));
    }
    let mut h = [0usize; 7];
    for v in &mut h {
        *v = r.u32()?;
    }
    let mut config = ModelConfig {
        layers: h[0],
        heads: h[1],
        d_model: h[2],
        d_ffn: h[3],
        tokens_per_obs: h[4],
        vocab_size: h[5],
        num_actions: h[6],
        ln_eps: ModelConfig::paper().ln_eps,
        dropout: ModelConfig::paper().dropout,
    };
    config.validate()?;
    // epsilons live in a trailing section, so they are patched in afterwards
    let mut layers = read_layers::<T, R>(&mut r, &config)?;
    let mut sections = BTreeMap::new();
    while let Some((tag, m)) = r.section()? {
        if sections.insert(tag, m).is_some() {
            return Err(Error::Malformed(format!("duplicate section {}", tag_name(tag))));
        }
    }
    if let Some(nrm) = sections.get(&TAG_NORM) {
        if nrm.dim() != (1, 2) {
            return Err(Error::Malformed("NRM section must be 1 x 2".into()));
        }
        config.ln_eps = nrm[[0, 0]];
        config.dropout = nrm[[0, 1]];
        for l in &mut layers {
            for n in [&mut l.ln1, &mut l.ln2, &mut l.msr.group_norm] {
                n.eps = config.ln_eps;
            }
        }
    }
    Ok(Decoded { stack: StackParams::new(layers, config)?, sections })
}

fn tag_name(tag: [u8; 4]) -> String {
    String::from_utf8_lossy(&tag).trim_end_matches('\0').to_string()
}

pub fn write_stack_to<T: Scalar, W: Write>(stack: &StackParams<T>, out: W) -> Result<()> {
    let mut w = Writer { inner: out };
    write_stack(&mut w, stack)?;
    w.inner.flush()?;
    Ok(())
}

/// Reads the stack of any `RPOPv1` file, ignoring bundle sections.
pub fn read_stack_from<T: Scalar, R: Read>(input: R) -> Result<StackParams<T>> {
    Ok(decode(input)?.stack)
}

pub fn write_bundle_to<T: Scalar, W: Write>(bundle: &WorldModelBundle<T>, out: W) -> Result<()> {
    let mut w = Writer { inner: out };
    write_stack(&mut w, bundle.stack())?;
    w.section(TAG_CODEBOOK, bundle.codebook().vectors())?;
    if let Some(a) = bundle.embed_adapter() {
        w.section(TAG_ADAPTER, a)?;
    }
    w.section(TAG_ACTIONS, bundle.action_table())?;
    w.section(TAG_PRED, &bundle.pred_tokens().embeddings)?;
    w.section(TAG_OBS_HEAD, bundle.obs_head())?;
    w.section(TAG_REWARD_HEAD, bundle.reward_head())?;
    w.section(TAG_DONE_HEAD, bundle.done_head())?;
    w.inner.flush()?;
    Ok(())
}

pub fn read_bundle_from<T: Scalar, R: Read>(input: R) -> Result<WorldModelBundle<T>> {
    let Decoded { stack, mut sections } = decode::<T, R>(input)?;
    let mut take = |tag: [u8; 4]| {
        sections
            .remove(&tag)
            .ok_or_else(|| Error::Malformed(format!("missing {} section", tag_name(tag))))
    };
    let cast = |m: Array2<f64>| m.mapv(T::from_f64);
    let codebook = Codebook::new(take(TAG_CODEBOOK)?)?;
    let action_table = cast(take(TAG_ACTIONS)?);
    let pred_tokens = PredictionTokens::new(cast(take(TAG_PRED)?))?;
    let obs_head = cast(take(TAG_OBS_HEAD)?);
    let reward_head = cast(take(TAG_REWARD_HEAD)?);
    let done_head = cast(take(TAG_DONE_HEAD)?);
    let embed_adapter = sections.remove(&TAG_ADAPTER).map(cast);
    let reward_mode = match reward_head.ncols() {
        3 => RewardMode::Categorical,
        1 => RewardMode::Mse,
        n => return Err(Error::Malformed(format!("reward head with {n} outputs"))),
    };
    sections.remove(&TAG_NORM);
    if let Some(tag) = sections.keys().next() {
        return Err(Error::Malformed(format!("unknown section {}", tag_name(*tag))));
    }
    WorldModelBundle::new(BundleParts {
        stack,
        codebook: Arc::new(codebook),
        embed_adapter,
        action_table,
        pred_tokens,
        obs_head,
        reward_head,
        done_head,
        reward_mode,
    })
}

pub fn save_stack<T: Scalar>(stack: &StackParams<T>, path: impl AsRef<Path>) -> Result<()> {
    write_stack_to(stack, BufWriter::new(File::create(path)?))
}

pub fn load_stack<T: Scalar>(path: impl AsRef<Path>) -> Result<StackParams<T>> {
    read_stack_from(BufReader::new(File::open(path)?))
}

pub fn save_bundle<T: Scalar>(bundle: &WorldModelBundle<T>, path: impl AsRef<Path>) -> Result<()> {
    write_bundle_to(bundle, BufWriter::new(File::create(path)?))
}

pub fn load_bundle<T: Scalar>(path: impl AsRef<Path>) -> Result<WorldModelBundle<T>> {
    read_bundle_from(BufReader::new(File::open(path)?))
}
