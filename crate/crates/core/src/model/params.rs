use std::fmt;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::RunningStats;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Which forward path the network follows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Cross-sectional: every visit classified on its own.
    Cnn,
    /// Visit features concatenated with the average of the other visits.
    CnnAp,
    /// GRU over raw CNN features.
    CnnRnn,
    /// Longitudinal pooling, fusion layer, then the GRU.
    CnnRnnLp,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Cnn,
        Variant::CnnAp,
        Variant::CnnRnn,
        Variant::CnnRnnLp,
    ];

    pub fn tag(self) -> u32 {
        match self {
            Variant::Cnn => 0,
            Variant::CnnAp => 1,
            Variant::CnnRnn => 2,
            Variant::CnnRnnLp => 3,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        Variant::ALL.into_iter().find(|v| v.tag() == tag)
    }

    pub fn is_sequential(self) -> bool {
        matches!(self, Variant::CnnRnn | Variant::CnnRnnLp)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Cnn => "CNN",
            Variant::CnnAp => "CNN+AP",
            Variant::CnnRnn => "CNN+RNN",
            Variant::CnnRnnLp => "CNN+RNN+LP",
        })
    }
}

/// Network geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    /// Cubic input extent; must be divisible by `2^channels.len()`.
    pub input_extent: usize,
    /// Output channels of each conv block (two convolutions per block).
    pub channels: Vec<usize>,
    /// Width of the first encoder FC layer.
    pub fc_hidden: usize,
    /// Width of the visit feature, the fused state and the GRU state.
    pub feature_width: usize,
    #[serde(serialize_with = "crate::short_f32")]
    pub dropout: f32,
    /// CNN+AP only: include the current visit in the average.
    pub ap_include_current: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            input_extent: 16,
            channels: vec![16, 32, 64, 64],
            fc_hidden: 64,
            feature_width: 16,
            dropout: 0.1,
            ap_include_current: false,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::config(
                "arch.channels",
                "need at least one block, all widths >= 1",
            ));
        }
        let div = 1usize << self.channels.len();
        if self.input_extent == 0 || !self.input_extent.is_multiple_of(div) {
            return Err(Error::config(
                "arch.input_extent",
                format!(
                    "{} is not divisible by {div} ({} poolings)",
                    self.input_extent,
                    self.channels.len()
                ),
            ));
        }
        if self.fc_hidden == 0 || self.feature_width == 0 {
            return Err(Error::config("arch.fc_hidden", "widths must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("arch.dropout", "rate must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn pooled_extent(&self) -> usize {
        self.input_extent >> self.channels.len()
    }

    pub fn flatten_width(&self) -> usize {
        self.channels.last().copied().unwrap_or(0) * self.pooled_extent().pow(3)
    }
}

/// Role of a parameter tensor; drives regularization, re-initialization and freezing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    ConvKernel,
    ConvBias,
    NormScale,
    NormShift,
    EncoderFcWeight,
    EncoderFcBias,
    FusionWeight,
    FusionBias,
    Recurrent,
    HeadWeight,
    HeadBias,
}

impl ParamGroup {
    /// Part of the convolutional blocks that pre-training produces.
    pub fn is_conv_block(self) -> bool {
        matches!(
            self,
            ParamGroup::ConvKernel
                | ParamGroup::ConvBias
                | ParamGroup::NormScale
                | ParamGroup::NormShift
        )
    }

    /// Weight matrices of recurrent and linear layers (the L2-penalized set).
    pub fn is_penalized(self) -> bool {
        matches!(
            self,
            ParamGroup::EncoderFcWeight
                | ParamGroup::FusionWeight
                | ParamGroup::Recurrent
                | ParamGroup::HeadWeight
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvIdx {
    pub kernels: usize,
    pub bias: usize,
    pub gamma: usize,
    pub beta: usize,
    /// Index into the batch norm running statistics.
    pub norm: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenseIdx {
    pub weight: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GruIdx {
    pub w_z: usize,
    pub w_r: usize,
    pub w_h: usize,
    pub u_z: usize,
    pub u_r: usize,
    pub u_h: usize,
}

/// Position of every parameter in a [`ModelParams`] buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub entries: Vec<Entry>,
    /// `convs[block][layer]`
    pub convs: Vec<[ConvIdx; 2]>,
    pub fc: [DenseIdx; 2],
    pub fusion: Option<DenseIdx>,
    pub gru: Option<GruIdx>,
    pub head: DenseIdx,
}

impl Layout {
    pub fn new(variant: Variant, arch: &ArchConfig) -> Self {
        let mut entries = Vec::new();
        let mut push = |name: String, group: ParamGroup, shape: Vec<usize>| {
            entries.push(Entry { name, group, shape });
            entries.len() - 1
        };
        let mut convs = Vec::new();
        let mut c_in = 1;
        let mut norm = 0;
        for (b, &c_out) in arch.channels.iter().enumerate() {
            let mut layer = |l: usize, c_in: usize| {
                let p = format!("encoder.block{b}.conv{l}");
                let idx = ConvIdx {
                    kernels: push(
                        format!("{p}.kernels"),
                        ParamGroup::ConvKernel,
                        vec![c_out, c_in, 3, 3, 3],
                    ),
                    bias: push(format!("{p}.bias"), ParamGroup::ConvBias, vec![c_out]),
                    gamma: push(format!("{p}.gamma"), ParamGroup::NormScale, vec![c_out]),
                    beta: push(format!("{p}.beta"), ParamGroup::NormShift, vec![c_out]),
                    norm,
                };
                norm += 1;
                idx
            };
            let first = layer(0, c_in);
            let second = layer(1, c_out);
            convs.push([first, second]);
            c_in = c_out;
        }
        let mut dense = |name: &str, wg: ParamGroup, bg: ParamGroup, m: usize, n: usize| DenseIdx {
            weight: push(format!("{name}.weight"), wg, vec![m, n]),
            bias: push(format!("{name}.bias"), bg, vec![m]),
        };
        let fw = arch.feature_width;
        let fc = [
            dense(
                "encoder.fc0",
                ParamGroup::EncoderFcWeight,
                ParamGroup::EncoderFcBias,
                arch.fc_hidden,
                arch.flatten_width(),
            ),
            dense(
                "encoder.fc1",
                ParamGroup::EncoderFcWeight,
                ParamGroup::EncoderFcBias,
                fw,
                arch.fc_hidden,
            ),
        ];
        let fusion = (variant == Variant::CnnRnnLp).then(|| {
            dense(
                "fusion",
                ParamGroup::FusionWeight,
                ParamGroup::FusionBias,
                fw,
                2 * fw,
            )
        });
        let head_in = if variant == Variant::CnnAp {
            2 * fw
        } else {
            fw
        };
        let head = dense(
            "head",
            ParamGroup::HeadWeight,
            ParamGroup::HeadBias,
            1,
            head_in,
        );
        let gru = variant.is_sequential().then(|| {
            let mut m = |n: &str| push(format!("gru.{n}"), ParamGroup::Recurrent, vec![fw, fw]);
            GruIdx {
                w_z: m("w_z"),
                w_r: m("w_r"),
                w_h: m("w_h"),
                u_z: m("u_z"),
                u_r: m("u_r"),
                u_h: m("u_h"),
            }
        });
        Layout {
            entries,
            convs,
            fc,
            fusion,
            gru,
            head,
        }
    }

    pub fn norm_channels(&self) -> Vec<usize> {
        self.convs
            .iter()
            .flat_map(|b| b.iter().map(|c| self.entries[c.gamma].shape[0]))
            .collect()
    }
}

/// Every learnable tensor of one model plus its batch norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub variant: Variant,
    pub arch: ArchConfig,
    pub layout: Layout,
    pub tensors: Vec<Tensor>,
    pub norms: Vec<RunningStats>,
}

fn fan_in(shape: &[usize]) -> usize {
    shape[1..].iter().product()
}

fn uniform_fan_in(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let bound = (1.0 / fan_in(shape) as f64).sqrt() as f32;
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-bound..=bound))
}

/// Orthonormal columns from modified Gram-Schmidt on a Gaussian draw (the Q of a QR).
fn orthogonal(n: usize, rng: &mut impl Rng) -> Tensor {
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            (0..n)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    for j in 0..n {
        for i in 0..j {
            let dot: f64 = cols[j].iter().zip(&cols[i]).map(|(a, b)| a * b).sum();
            let prev = cols[i].clone();
            cols[j]
                .iter_mut()
                .zip(&prev)
                .for_each(|(a, b)| *a -= dot * b);
        }
        let norm = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        cols[j].iter_mut().for_each(|v| *v /= norm);
    }
    Tensor::from_fn(vec![n, n], |k| cols[k % n][k / n] as f32)
}

fn init_entry(entry: &Entry, seed: u64, index: usize) -> Tensor {
    let mut r = rng::stream(seed, &entry.name, index as u64);
    match entry.group {
        ParamGroup::ConvKernel
        | ParamGroup::EncoderFcWeight
        | ParamGroup::FusionWeight
        | ParamGroup::HeadWeight => uniform_fan_in(&entry.shape, &mut r),
        ParamGroup::Recurrent => orthogonal(entry.shape[0], &mut r),
        ParamGroup::NormScale => Tensor::full(entry.shape.clone(), 1.0),
        ParamGroup::ConvBias
        | ParamGroup::NormShift
        | ParamGroup::EncoderFcBias
        | ParamGroup::FusionBias
        | ParamGroup::HeadBias => Tensor::zeros(entry.shape.clone()),
    }
}

impl ModelParams {
    /// Deterministic initialization: fan-in scaled uniform weights, zero
    /// biases and shifts, unit scales, orthogonal recurrent matrices.
    pub fn init(variant: Variant, arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(variant, arch);
        let tensors = layout
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| init_entry(e, seed, i))
            .collect();
        let norms = layout
            .norm_channels()
            .into_iter()
            .map(RunningStats::new)
            .collect();
        Ok(ModelParams {
            variant,
            arch: arch.clone(),
            layout,
            tensors,
            norms,
        })
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.layout
            .entries
            .iter()
            .position(|e| e.name == name)
            .map(|i| &self.tensors[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.layout.entries.iter().position(|e| e.name == name)?;
        Some(&mut self.tensors[i])
    }

    pub fn group(&self, idx: usize) -> ParamGroup {
        self.layout.entries[idx].group
    }

    /// Re-draws every tensor outside the convolutional blocks.
    pub fn reinit_fc(&mut self, seed: u64) {
        for (i, e) in self.layout.entries.iter().enumerate() {
            if !e.group.is_conv_block() {
                self.tensors[i] = init_entry(e, seed, i);
            }
        }
    }

    /// Copies the convolutional blocks (and their running statistics) from
    /// another model with the same encoder geometry.
    pub fn copy_conv_blocks_from(&mut self, other: &ModelParams) -> Result<()> {
        if self.arch.channels != other.arch.channels
            || self.arch.input_extent != other.arch.input_extent
        {
            return Err(Error::Mismatch("encoder geometry differs".into()));
        }
        for (i, e) in self.layout.entries.iter().enumerate() {
            if e.group.is_conv_block() {
                self.tensors[i] = other.by_name(&e.name).expect("same geometry").clone();
            }
        }
        self.norms = other.norms.clone();
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    // ---- checkpoint ------------------------------------------------------------

    /// Serializes to the `LPWT` checkpoint layout: magic, version, variant tag,
    /// geometry, then `(name, shape, f32 LE payload)` records for every tensor
    /// followed by the running statistics.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, self.variant.tag());
        put_u32(&mut out, self.arch.input_extent as u32);
        put_u32(&mut out, self.arch.channels.len() as u32);
        for &c in &self.arch.channels {
            put_u32(&mut out, c as u32);
        }
        put_u32(&mut out, self.arch.fc_hidden as u32);
        put_u32(&mut out, self.arch.feature_width as u32);
        out.extend_from_slice(&self.arch.dropout.to_le_bytes());
        put_u32(&mut out, self.arch.ap_include_current as u32);

        let records: Vec<(String, Vec<usize>, &[f32])> = self
            .layout
            .entries
            .iter()
            .zip(&self.tensors)
            .map(|(e, t)| (e.name.clone(), t.shape().to_vec(), t.data()))
            .chain(self.norms.iter().enumerate().flat_map(|(i, rs)| {
                [
                    (
                        format!("norm{i}.running_mean"),
                        vec![rs.mean.len()],
                        rs.mean.as_slice(),
                    ),
                    (
                        format!("norm{i}.running_var"),
                        vec![rs.var.len()],
                        rs.var.as_slice(),
                    ),
                ]
            }))
            .collect();
        put_u32(&mut out, records.len() as u32);
        for (name, shape, data) in records {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, shape.len() as u32);
            for d in shape {
                put_u32(&mut out, d as u32);
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path,
        };
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: "LPWT",
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.to_path_buf(),
                found: version,
            });
        }
        let tag = r.u32()?;
        let variant = Variant::from_tag(tag)
            .ok_or_else(|| r.malformed(format!("unknown variant tag {tag}")))?;
        let input_extent = r.u32()? as usize;
        let blocks = r.u32()? as usize;
        if blocks > 16 {
            return Err(r.malformed(format!("implausible block count {blocks}")));
        }
        let channels = (0..blocks)
            .map(|_| r.u32().map(|c| c as usize))
            .collect::<Result<Vec<_>>>()?;
        let fc_hidden = r.u32()? as usize;
        let feature_width = r.u32()? as usize;
        let dropout = f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        let ap_include_current = r.u32()? != 0;
        let arch = ArchConfig {
            input_extent,
            channels,
            fc_hidden,
            feature_width,
            dropout,
            ap_include_current,
        };
        arch.validate().map_err(|e| r.malformed(e.to_string()))?;
        let mut model = ModelParams::init(variant, &arch, 0)?;

        let count = r.u32()? as usize;
        let expected = model.tensors.len() + 2 * model.norms.len();
        if count != expected {
            return Err(Error::Mismatch(format!(
                "{}: {count} records, layout for {variant} needs {expected}",
                path.display()
            )));
        }
        for i in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| r.malformed("record name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            if rank == 0 || rank > 8 {
                return Err(r.malformed(format!("record {name}: bad rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let payload = r.take(n * 4)?;
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if i < model.tensors.len() {
                let entry = &model.layout.entries[i];
                if entry.name != name || entry.shape != shape {
                    return Err(Error::Mismatch(format!(
                        "{}: record {name} {shape:?} where layout expects {} {:?}",
                        path.display(),
                        entry.name,
                        entry.shape
                    )));
                }
                model.tensors[i] = Tensor::new(shape, data)?;
            } else {
                let k = i - model.tensors.len();
                let rs = &mut model.norms[k / 2];
                let expected = format!(
                    "norm{}.running_{}",
                    k / 2,
                    if k % 2 == 0 { "mean" } else { "var" }
                );
                if name != expected {
                    return Err(Error::Mismatch(format!(
                        "{}: record {name}, expected {expected}",
                        path.display()
                    )));
                }
                if k % 2 == 0 {
                    rs.mean = data;
                } else {
                    rs.var = data;
                }
            }
        }
        if r.pos != bytes.len() {
            return Err(r.malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LPWT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                needed: self.pos + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn malformed(&self, detail: impl Into<String>) -> Error {
        Error::Malformed {
            path: self.path.to_path_buf(),
            detail: detail.into(),
        }
    }
}
