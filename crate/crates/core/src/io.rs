//! Binary file formats. All integers and floats are little-endian.
//!
//! Descriptor file (`MRVD`): magic, `u32` version, `u64` count, `u32` dim,
//! `u8` variant tag, `u8` norm state, then `count * dim` f32 values. Row ids
//! live in a JSON sidecar at `<path>.ids.json`.
//!
//! Checkpoint (`MRCK`): magic, `u32` version, `u32` layer count, per layer
//! `u32` in/out/kernel/stride and `u8` relu/trainable flags, then `u32`
//! clusters, `u32` dim, `u32` partition length and the partition counts
//! (empty for a shared vocabulary), then every parameter as f32: each
//! layer's weights and bias, centers, assignment weights, assignment biases.
//!
//! PCA model (`MRPC`): magic, `u32` version, `u32` in dim, `u32` out dim,
//! then f32 mean, projection rows and eigenvalues.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{ConvLayer, EncoderParams, LayerSpec};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::postproc::PcaModel;
use crate::vlad::{NormState, Variant, VocabMode, Vocabulary};

pub const DESCRIPTOR_MAGIC: &[u8; 4] = b"MRVD";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MRCK";
pub const PCA_MAGIC: &[u8; 4] = b"MRPC";
pub const FORMAT_VERSION: u32 = 1;

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.0.write_all(b)?;
        Ok(())
    }
    fn u8(&mut self, v: u8) -> Result<()> {
        self.bytes(&[v])
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
        self.bytes(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn f32s(&mut self, vs: impl IntoIterator<Item = f32>) -> Result<()> {
        for v in vs {
            self.bytes(&v.to_le_bytes())?;
        }
        Ok(())
    }
    fn f64s_as_f32(&mut self, vs: &[f64]) -> Result<()> {
        self.f32s(vs.iter().map(|&v| v as f32))
    }
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn exact<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0.read_exact(&mut b).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Format("truncated file".into()),
            _ => Error::Io(e),
        })?;
        Ok(b)
    }
    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.exact::<4>()?;
        if &got != want {
            return Err(Error::Format(format!(
                "expected magic {:?}, found {:?}",
                String::from_utf8_lossy(want),
                String::from_utf8_lossy(&got)
            )));
        }
        let version = self.u32()?;
        if version as u32 != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        Ok(())
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.exact::<1>()?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.exact()?) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.exact()?))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let mut buf = vec![
            0u8;
            n.checked_mul(4)
                .ok_or_else(|| Error::Format("size overflow".into()))?
        ];
        self.0
            .read_exact(&mut buf)
            .map_err(|_| Error::Format("truncated file".into()))?;
        Ok(buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self.f32s(n)?.into_iter().map(f64::from).collect())
    }
    fn expect_end(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.0.read(&mut b)? {
            0 => Ok(()),
            _ => Err(Error::Format("trailing bytes".into())),
        }
    }
}

/// A set of descriptors with their ids, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    pub variant: Variant,
    pub state: NormState,
    pub dim: usize,
    pub ids: Vec<u64>,
    /// `ids.len() x dim`, row-major.
    pub values: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    variant: Variant,
    ids: Vec<u64>,
}

impl DescriptorSet {
    pub fn new(variant: Variant, state: NormState, dim: usize) -> Self {
        Self {
            variant,
            state,
            dim,
            ids: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, id: u64, row: &[f32]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::Contract(format!(
                "row of length {} in a set of dimension {}",
                row.len(),
                self.dim
            )));
        }
        self.ids.push(id);
        self.values.extend_from_slice(row);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> Vec<&[f32]> {
        (0..self.len()).map(|i| self.row(i)).collect()
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".ids.json");
        PathBuf::from(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer(BufWriter::new(fs::File::create(path)?));
        w.bytes(DESCRIPTOR_MAGIC)?;
        w.u32(FORMAT_VERSION as usize)?;
        w.u64(self.len() as u64)?;
        w.u32(self.dim)?;
        w.u8(self.variant.tag())?;
        w.u8(self.state.tag())?;
        w.f32s(self.values.iter().copied())?;
        w.0.flush()?;
        let side = Sidecar {
            variant: self.variant,
            ids: self.ids.clone(),
        };
        fs::write(Self::sidecar_path(path), serde_json::to_vec(&side)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = Reader(BufReader::new(fs::File::open(path)?));
        r.magic(DESCRIPTOR_MAGIC)?;
        let count =
            usize::try_from(r.u64()?).map_err(|_| Error::Format("count overflow".into()))?;
        let dim = r.u32()?;
        let variant = Variant::from_tag(r.u8()?)
            .ok_or_else(|| Error::Format("unknown variant tag".into()))?;
        let state = NormState::from_tag(r.u8()?)
            .ok_or_else(|| Error::Format("unknown norm state".into()))?;
        let n = count
            .checked_mul(dim)
            .ok_or_else(|| Error::Format("size overflow".into()))?;
        let values = r.f32s(n)?;
        r.expect_end()?;
        let side: Sidecar = serde_json::from_slice(&fs::read(Self::sidecar_path(path))?)?;
        if side.ids.len() != count || side.variant != variant {
            return Err(Error::Format(format!(
                "sidecar lists {} ids ({}) for {count} rows ({variant})",
                side.ids.len(),
                side.variant
            )));
        }
        Ok(Self {
            variant,
            state,
            dim,
            ids: side.ids,
            values,
        })
    }
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut w = Writer(BufWriter::new(fs::File::create(path)?));
    w.bytes(CHECKPOINT_MAGIC)?;
    w.u32(FORMAT_VERSION as usize)?;
    w.u32(model.encoder.layers.len())?;
    for l in &model.encoder.layers {
        let s = l.spec;
        w.u32(s.in_channels)?;
        w.u32(s.out_channels)?;
        w.u32(s.kernel)?;
        w.u32(s.stride)?;
        w.u8(s.relu as u8)?;
        w.u8(l.trainable as u8)?;
    }
    let v = &model.vocab;
    w.u32(v.clusters)?;
    w.u32(v.dim)?;
    match &v.mode {
        VocabMode::Shared => w.u32(0)?,
        VocabMode::ScaleSpecific { counts } => {
            w.u32(counts.len())?;
            for &c in counts {
                w.u32(c)?;
            }
        }
    }
    for l in &model.encoder.layers {
        w.f64s_as_f32(&l.weights)?;
        w.f64s_as_f32(&l.bias)?;
    }
    w.f64s_as_f32(&v.centers)?;
    w.f64s_as_f32(&v.assign_weights)?;
    w.f64s_as_f32(&v.assign_biases)?;
    w.0.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut r = Reader(BufReader::new(fs::File::open(path)?));
    r.magic(CHECKPOINT_MAGIC)?;
    let n_layers = r.u32()?;
    let mut heads = Vec::with_capacity(n_layers.min(64));
    for _ in 0..n_layers {
        let spec = LayerSpec {
            in_channels: r.u32()?,
            out_channels: r.u32()?,
            kernel: r.u32()?,
            stride: r.u32()?,
            relu: r.u8()? != 0,
        };
        let trainable = r.u8()? != 0;
        heads.push((spec, trainable));
    }
    let specs: Vec<LayerSpec> = heads.iter().map(|h| h.0).collect();
    crate::encoder::validate_specs(&specs).map_err(|e| Error::Format(e.to_string()))?;
    let clusters = r.u32()?;
    let dim = r.u32()?;
    let parts = r.u32()?;
    let mode = if parts == 0 {
        VocabMode::Shared
    } else {
        let counts = (0..parts).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        if counts.iter().sum::<usize>() != clusters {
            return Err(Error::Format(
                "partition does not sum to the cluster count".into(),
            ));
        }
        VocabMode::ScaleSpecific { counts }
    };
    if specs.last().map(|s| s.out_channels) != Some(dim) || clusters == 0 {
        return Err(Error::Format(
            "vocabulary does not match the encoder depth".into(),
        ));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for (spec, trainable) in heads {
        let weights = r.f64s(spec.out_channels * spec.kernel * spec.kernel * spec.in_channels)?;
        let bias = r.f64s(spec.out_channels)?;
        layers.push(ConvLayer {
            spec,
            weights,
            bias,
            trainable,
        });
    }
    let centers = r.f64s(clusters * dim)?;
    let assign_weights = r.f64s(clusters * dim)?;
    let assign_biases = r.f64s(clusters)?;
    r.expect_end()?;
    Ok(Model {
        encoder: EncoderParams { layers },
        vocab: Vocabulary {
            clusters,
            dim,
            centers,
            assign_weights,
            assign_biases,
            mode,
        },
    })
}

pub fn save_pca(pca: &PcaModel, path: &Path) -> Result<()> {
    let mut w = Writer(BufWriter::new(fs::File::create(path)?));
    w.bytes(PCA_MAGIC)?;
    w.u32(FORMAT_VERSION as usize)?;
    w.u32(pca.in_dim)?;
    w.u32(pca.out_dim)?;
    w.f64s_as_f32(&pca.mean)?;
    w.f64s_as_f32(&pca.projection)?;
    w.f64s_as_f32(&pca.eigenvalues)?;
    w.0.flush()?;
    Ok(())
}

pub fn load_pca(path: &Path) -> Result<PcaModel> {
    let mut r = Reader(BufReader::new(fs::File::open(path)?));
    r.magic(PCA_MAGIC)?;
    let in_dim = r.u32()?;
    let out_dim = r.u32()?;
    if out_dim == 0 || out_dim > in_dim {
        return Err(Error::Format(format!(
            "bad PCA dimensions {in_dim} -> {out_dim}"
        )));
    }
    let mean = r.f64s(in_dim)?;
    let projection = r.f64s(in_dim * out_dim)?;
    let eigenvalues = r.f64s(out_dim)?;
    r.expect_end()?;
    Ok(PcaModel {
        in_dim,
        out_dim,
        mean,
        projection,
        eigenvalues,
    })
}
