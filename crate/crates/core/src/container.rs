//! Versioned binary container for per-layer pooled hidden states.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! header:
//!   magic            4 bytes  "DTRV"
//!   version          u32      1
//!   record_count     u64
//!   n_layers         u32      kept layers per record
//!   dim              u32      hidden size
//!   layer_ids        u16 * n_layers, strictly increasing
//!   pooling_mask     u8       bit0 = mean, bit1 = eos
//!   target_mask      u8       bit0 = problem+query, bit1 = query only (0 = no targets)
//! record (repeated record_count times):
//!   id               u32 length + UTF-8
//!   schema_id        u32 length + UTF-8
//!   split            u8       0 = train, 1 = dev, 2 = test
//!   problem states   one [n_layers][dim] f32 tensor per pooling mode (mean first)
//!   target states    for each target kind in mask order, one tensor per pooling mode
//! ```
//!
//! Only pooled vectors are stored, never token sequences.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{read_file, ByteReader, ByteWriter};
use crate::error::{Error, Result};

pub const CONTAINER_MAGIC: [u8; 4] = *b"DTRV";
pub const CONTAINER_VERSION: u32 = 1;

const POOL_MEAN: u8 = 0b01;
const POOL_EOS: u8 = 0b10;
const TARGET_PQ: u8 = 0b01;
const TARGET_Q: u8 = 0b10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    Eos,
}

impl Pooling {
    pub const ALL: [Pooling; 2] = [Pooling::Mean, Pooling::Eos];

    fn bit(self) -> u8 {
        match self {
            Pooling::Mean => POOL_MEAN,
            Pooling::Eos => POOL_EOS,
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Pooling::Mean => 0,
            Pooling::Eos => 1,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Pooling::Mean),
            1 => Ok(Pooling::Eos),
            other => Err(Error::UnsupportedFormat(format!("unknown pooling tag {other}"))),
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Mean => "mean",
            Pooling::Eos => "eos",
        })
    }
}

/// Which sequence the proxy-labeling target was computed from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Only the gold query `y`.
    QueryOnly,
    /// The concatenation `[x; y]` of problem prompt and gold query.
    ProblemPlusQuery,
}

impl TargetMode {
    fn bit(self) -> u8 {
        match self {
            TargetMode::ProblemPlusQuery => TARGET_PQ,
            TargetMode::QueryOnly => TARGET_Q,
        }
    }
}

impl fmt::Display for TargetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TargetMode::QueryOnly => "query_only",
            TargetMode::ProblemPlusQuery => "problem_plus_query",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Dev => 1,
            Split::Test => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Split::Train),
            1 => Ok(Split::Dev),
            2 => Ok(Split::Test),
            other => Err(Error::UnsupportedFormat(format!("unknown split tag {other}"))),
        }
    }
}

/// A `[n_layers][dim]` row-major f32 tensor: one pooled vector per kept layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStates {
    n_layers: usize,
    dim: usize,
    data: Vec<f32>,
}

impl LayerStates {
    pub fn new(n_layers: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if n_layers.checked_mul(dim) != Some(data.len()) {
            return Err(Error::Shape(format!(
                "layer states of {} floats cannot be shaped [{n_layers}][{dim}]",
                data.len()
            )));
        }
        Ok(Self {
            n_layers,
            dim,
            data,
        })
    }

    pub fn zeros(n_layers: usize, dim: usize) -> Self {
        Self {
            n_layers,
            dim,
            data: vec![0.0; n_layers * dim],
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("ragged layer rows".into()));
        }
        Ok(Self {
            n_layers: rows.len(),
            dim,
            data: rows.concat(),
        })
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, layer_index: usize) -> &[f32] {
        &self.data[layer_index * self.dim..(layer_index + 1) * self.dim]
    }

    pub fn row_mut(&mut self, layer_index: usize) -> &mut [f32] {
        &mut self.data[layer_index * self.dim..(layer_index + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Pooled states of one sequence, keyed by pooling mode.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PooledStates {
    pub mean: Option<LayerStates>,
    pub eos: Option<LayerStates>,
}

impl PooledStates {
    pub fn get(&self, pooling: Pooling) -> Option<&LayerStates> {
        match pooling {
            Pooling::Mean => self.mean.as_ref(),
            Pooling::Eos => self.eos.as_ref(),
        }
    }

    pub fn set(&mut self, pooling: Pooling, states: LayerStates) {
        match pooling {
            Pooling::Mean => self.mean = Some(states),
            Pooling::Eos => self.eos = Some(states),
        }
    }

    fn mask(&self) -> u8 {
        Pooling::ALL
            .iter()
            .filter(|p| self.get(**p).is_some())
            .fold(0, |m, p| m | p.bit())
    }

    fn present(&self) -> impl Iterator<Item = &LayerStates> {
        self.mean.iter().chain(self.eos.iter())
    }
}

/// Target-side states used only for proxy labeling.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TargetStates {
    pub problem_plus_query: Option<PooledStates>,
    pub query_only: Option<PooledStates>,
}

impl TargetStates {
    pub fn get(&self, mode: TargetMode) -> Option<&PooledStates> {
        match mode {
            TargetMode::ProblemPlusQuery => self.problem_plus_query.as_ref(),
            TargetMode::QueryOnly => self.query_only.as_ref(),
        }
    }

    fn mask(&self) -> u8 {
        let mut m = 0;
        if self.problem_plus_query.is_some() {
            m |= TARGET_PQ;
        }
        if self.query_only.is_some() {
            m |= TARGET_Q;
        }
        m
    }

    fn present(&self) -> impl Iterator<Item = &PooledStates> {
        self.problem_plus_query.iter().chain(self.query_only.iter())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExampleRecord {
    pub id: String,
    pub schema_id: String,
    pub split: Split,
    /// Pooled states of the problem prompt `x = [s; q]`.
    pub problem_states: PooledStates,
    pub target_states: Option<TargetStates>,
}

impl ExampleRecord {
    pub fn problem(&self, pooling: Pooling) -> Result<&LayerStates> {
        self.problem_states.get(pooling).ok_or_else(|| {
            Error::Validation(format!(
                "record {:?} has no {pooling}-pooled problem states",
                self.id
            ))
        })
    }

    pub fn target(&self, mode: TargetMode, pooling: Pooling) -> Result<&LayerStates> {
        self.target_states
            .as_ref()
            .and_then(|t| t.get(mode))
            .and_then(|p| p.get(pooling))
            .ok_or_else(|| {
                Error::Validation(format!(
                    "record {:?} has no {mode} target states with {pooling} pooling",
                    self.id
                ))
            })
    }

    fn target_mask(&self) -> u8 {
        self.target_states.as_ref().map_or(0, TargetStates::mask)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContainerHeader {
    pub version: u32,
    pub record_count: u64,
    pub n_layers: usize,
    pub dim: usize,
    pub layer_ids: Vec<u16>,
    pooling_mask: u8,
    target_mask: u8,
}

impl ContainerHeader {
    pub fn has_pooling(&self, pooling: Pooling) -> bool {
        self.pooling_mask & pooling.bit() != 0
    }

    pub fn poolings(&self) -> Vec<Pooling> {
        Pooling::ALL
            .into_iter()
            .filter(|p| self.has_pooling(*p))
            .collect()
    }

    pub fn has_target(&self, mode: TargetMode) -> bool {
        self.target_mask & mode.bit() != 0
    }

    pub fn has_targets(&self) -> bool {
        self.target_mask != 0
    }

    /// Row index of a kept layer id.
    pub fn layer_index(&self, layer_id: u16) -> Option<usize> {
        self.layer_ids.iter().position(|&l| l == layer_id)
    }

    /// Same tensor layout; record counts may differ.
    pub fn same_layout(&self, other: &ContainerHeader) -> bool {
        self.dim == other.dim
            && self.layer_ids == other.layer_ids
            && self.pooling_mask == other.pooling_mask
            && self.target_mask == other.target_mask
    }

    fn tensors_per_record(&self) -> usize {
        let modes = self.pooling_mask.count_ones() as usize;
        let targets = self.target_mask.count_ones() as usize;
        modes * (1 + targets)
    }

    pub fn encoded_len(&self) -> u64 {
        26 + 2 * self.n_layers as u64
    }

    /// Exact encoded size of one record with the given string lengths.
    pub fn record_len(&self, id_len: usize, schema_len: usize) -> u64 {
        (4 + id_len + 4 + schema_len + 1) as u64
            + (self.tensors_per_record() * self.n_layers * self.dim * 4) as u64
    }

    fn describe_mismatch(&self, other: &ContainerHeader) -> String {
        format!(
            "dim {} vs {}, layers {:?} vs {:?}, poolings {:?} vs {:?}, target mask {} vs {}",
            self.dim,
            other.dim,
            self.layer_ids,
            other.layer_ids,
            self.poolings(),
            other.poolings(),
            self.target_mask,
            other.target_mask
        )
    }
}

/// A validated, immutable set of records sharing one tensor layout.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStateContainer {
    header: ContainerHeader,
    records: Vec<ExampleRecord>,
}

impl HiddenStateContainer {
    /// Validates `records` against each other and the kept-layer list.
    pub fn new(layer_ids: Vec<u16>, records: Vec<ExampleRecord>) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::Validation("a container needs at least one record".into()))?;
        if layer_ids.is_empty() {
            return Err(Error::Format("kept-layer list is empty".into()));
        }
        if layer_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Format(format!(
                "kept-layer ids must be strictly increasing, got {layer_ids:?}"
            )));
        }
        let pooling_mask = first.problem_states.mask();
        if pooling_mask == 0 {
            return Err(Error::Format(format!(
                "record {:?} carries no pooled states",
                first.id
            )));
        }
        let target_mask = first.target_mask();
        let n_layers = layer_ids.len();
        let dim = first
            .problem_states
            .present()
            .next()
            .map(LayerStates::dim)
            .unwrap_or(0);
        if dim == 0 {
            return Err(Error::Format("hidden size must be positive".into()));
        }
        if u32::try_from(dim).is_err() || u32::try_from(n_layers).is_err() {
            return Err(Error::Format("dimensions exceed u32".into()));
        }

        let header = ContainerHeader {
            version: CONTAINER_VERSION,
            record_count: records.len() as u64,
            n_layers,
            dim,
            layer_ids,
            pooling_mask,
            target_mask,
        };
        let mut seen = HashSet::with_capacity(records.len());
        for record in &records {
            validate_record(&header, record)?;
            if !seen.insert(record.id.as_str()) {
                return Err(Error::Validation(format!("duplicate id {:?}", record.id)));
            }
        }
        Ok(Self { header, records })
    }

    pub fn header(&self) -> &ContainerHeader {
        &self.header
    }

    /// Keeps only the listed layer ids, in every problem and target tensor.
    pub fn select_layers(&self, layer_ids: &[u16]) -> Result<Self> {
        let rows = layer_ids
            .iter()
            .map(|&id| {
                self.header.layer_index(id).ok_or_else(|| {
                    Error::Compatibility(format!(
                        "layer {id} is not among kept layers {:?}",
                        self.header.layer_ids
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let project = |s: &LayerStates| {
            let data = rows.iter().flat_map(|&l| s.row(l).iter().copied()).collect();
            LayerStates::new(rows.len(), s.dim(), data)
        };
        let project_pooled = |p: &PooledStates| -> Result<PooledStates> {
            Ok(PooledStates {
                mean: p.mean.as_ref().map(project).transpose()?,
                eos: p.eos.as_ref().map(project).transpose()?,
            })
        };
        let records = self
            .records
            .iter()
            .map(|r| {
                let target_states = match &r.target_states {
                    Some(t) => Some(TargetStates {
                        problem_plus_query: t.problem_plus_query.as_ref().map(project_pooled).transpose()?,
                        query_only: t.query_only.as_ref().map(project_pooled).transpose()?,
                    }),
                    None => None,
                };
                Ok(ExampleRecord {
                    id: r.id.clone(),
                    schema_id: r.schema_id.clone(),
                    split: r.split,
                    problem_states: project_pooled(&r.problem_states)?,
                    target_states,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layer_ids.to_vec(), records)
    }

    pub fn records(&self) -> &[ExampleRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn into_records(self) -> Vec<ExampleRecord> {
        self.records
    }

    pub fn id_index(&self) -> HashMap<&str, usize> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.as_str(), i))
            .collect()
    }

    /// Size in bytes of this container once written.
    pub fn encoded_len(&self) -> u64 {
        self.header.encoded_len()
            + self
                .records
                .iter()
                .map(|r| self.header.record_len(r.id.len(), r.schema_id.len()))
                .sum::<u64>()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let h = &self.header;
        let mut w = ByteWriter::new();
        w.bytes(&CONTAINER_MAGIC);
        w.u32(CONTAINER_VERSION);
        w.u64(self.records.len() as u64);
        w.u32(h.n_layers as u32);
        w.u32(h.dim as u32);
        for &l in &h.layer_ids {
            w.u16(l);
        }
        w.u8(h.pooling_mask);
        w.u8(h.target_mask);
        for record in &self.records {
            w.str(&record.id)?;
            w.str(&record.schema_id)?;
            w.u8(record.split.tag());
            for states in record.problem_states.present() {
                w.f32s(states.as_slice());
            }
            if let Some(targets) = &record.target_states {
                for pooled in targets.present() {
                    for states in pooled.present() {
                        w.f32s(states.as_slice());
                    }
                }
            }
        }
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "container");
        r.expect_magic(&CONTAINER_MAGIC)?;
        r.expect_version(CONTAINER_VERSION)?;
        let record_count = r.u64()?;
        let n_layers = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let layer_ids = (0..n_layers).map(|_| r.u16()).collect::<Result<Vec<_>>>()?;
        let pooling_mask = r.u8()?;
        let target_mask = r.u8()?;
        if pooling_mask == 0 || pooling_mask & !(POOL_MEAN | POOL_EOS) != 0 {
            return Err(Error::UnsupportedFormat(format!(
                "pooling mask {pooling_mask:#04b}"
            )));
        }
        if target_mask & !(TARGET_PQ | TARGET_Q) != 0 {
            return Err(Error::UnsupportedFormat(format!(
                "target mask {target_mask:#04b}"
            )));
        }
        if n_layers == 0 || dim == 0 {
            return Err(Error::Corruption("header declares an empty tensor shape".into()));
        }
        if layer_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Corruption(format!(
                "kept-layer ids not strictly increasing: {layer_ids:?}"
            )));
        }
        let header = ContainerHeader {
            version: CONTAINER_VERSION,
            record_count,
            n_layers,
            dim,
            layer_ids,
            pooling_mask,
            target_mask,
        };

        let min_record = header.record_len(0, 0);
        let cap = (bytes.len() as u64 / min_record.max(1)).min(record_count) as usize;
        let mut records = Vec::with_capacity(cap);
        let read_pooled = |r: &mut ByteReader<'_>| -> Result<PooledStates> {
            let mut pooled = PooledStates::default();
            for pooling in Pooling::ALL {
                if pooling_mask & pooling.bit() != 0 {
                    let data = r.f32s(n_layers * dim)?;
                    pooled.set(pooling, LayerStates::new(n_layers, dim, data)?);
                }
            }
            Ok(pooled)
        };
        for _ in 0..record_count {
            let id = r.str()?;
            let schema_id = r.str()?;
            let split = Split::from_tag(r.u8()?)?;
            let problem_states = read_pooled(&mut r)?;
            let target_states = if target_mask == 0 {
                None
            } else {
                let mut t = TargetStates::default();
                if target_mask & TARGET_PQ != 0 {
                    t.problem_plus_query = Some(read_pooled(&mut r)?);
                }
                if target_mask & TARGET_Q != 0 {
                    t.query_only = Some(read_pooled(&mut r)?);
                }
                Some(t)
            };
            records.push(ExampleRecord {
                id,
                schema_id,
                split,
                problem_states,
                target_states,
            });
        }
        r.finish()?;

        let container = Self::new(header.layer_ids.clone(), records)?;
        debug_assert!(container.header.same_layout(&header));
        Ok(container)
    }
}

fn validate_record(header: &ContainerHeader, record: &ExampleRecord) -> Result<()> {
    if record.id.is_empty() {
        return Err(Error::Validation("record id must be nonempty".into()));
    }
    if record.problem_states.mask() != header.pooling_mask {
        return Err(Error::Format(format!(
            "record {:?} pooling modes differ from the rest of the container",
            record.id
        )));
    }
    if record.target_mask() != header.target_mask {
        return Err(Error::Format(format!(
            "record {:?} target kinds differ from the rest of the container",
            record.id
        )));
    }
    let targets = record.target_states.iter().flat_map(TargetStates::present);
    for pooled in std::iter::once(&record.problem_states).chain(targets) {
        if pooled.mask() != header.pooling_mask {
            return Err(Error::Format(format!(
                "record {:?} target pooling modes differ from its problem states",
                record.id
            )));
        }
        for states in pooled.present() {
            if states.n_layers() != header.n_layers || states.dim() != header.dim {
                return Err(Error::Format(format!(
                    "record {:?} has shape [{}][{}], container expects [{}][{}]",
                    record.id,
                    states.n_layers(),
                    states.dim(),
                    header.n_layers,
                    header.dim
                )));
            }
            if !states.all_finite() {
                return Err(Error::Validation(format!(
                    "record {:?} contains NaN or infinite values",
                    record.id
                )));
            }
        }
    }
    Ok(())
}

pub fn write_container(container: &HiddenStateContainer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = container.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Validates and writes `records` in order.
pub fn write_records(
    layer_ids: &[u16],
    records: Vec<ExampleRecord>,
    path: impl AsRef<Path>,
) -> Result<HiddenStateContainer> {
    let container = HiddenStateContainer::new(layer_ids.to_vec(), records)?;
    write_container(&container, path)?;
    Ok(container)
}

pub fn read_container(path: impl AsRef<Path>) -> Result<HiddenStateContainer> {
    HiddenStateContainer::from_bytes(&read_file(path.as_ref())?)
}

/// Concatenates containers that share one layout, in path order.
pub fn merge_containers<P: AsRef<Path>>(paths: &[P]) -> Result<HiddenStateContainer> {
    let mut parts = paths.iter().map(read_container);
    let first = parts
        .next()
        .ok_or_else(|| Error::Validation("nothing to merge".into()))??;
    let layer_ids = first.header.layer_ids.clone();
    let reference = first.header.clone();
    let mut records = first.into_records();
    for (i, part) in parts.enumerate() {
        let part = part?;
        if !reference.same_layout(&part.header) {
            return Err(Error::IncompatibleContainer(format!(
                "{} does not match {}: {}",
                paths[i + 1].as_ref().display(),
                paths[0].as_ref().display(),
                reference.describe_mismatch(&part.header)
            )));
        }
        records.extend(part.into_records());
    }
    HiddenStateContainer::new(layer_ids, records)
}
