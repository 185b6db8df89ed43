//! Who talks to whom, what goes on the wire, and what it costs.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compression::{CodeIndexGrid, Codebook, MaskKind, SelectionMask, SparseFeatureMap};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Real;

/// Header: magic, sender, receiver (u16), timestamp, codebook version,
/// cell count (u32), all little-endian.
pub const HEADER_BYTES: usize = 18;
/// Each cell travels as two little-endian u16 values.
pub const CELL_BYTES: usize = 4;
pub const CODES_MAGIC: u16 = 0x4350;
pub const RAW_MAGIC: u16 = 0x4652;
/// Bits per raw feature value.
pub const RAW_VALUE_BITS: usize = 32;

/// Cells a collaborator asks for: the complement of what it already has.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RequestMap {
    pub agent_id: u32,
    pub mask: SelectionMask,
}

/// Complement of the collaborator's previous availability mask; with no
/// prior round every cell is requested.
pub fn build_request(agent_id: u32, prev: Option<&SelectionMask>, height: usize, width: usize) -> RequestMap {
    let mask = match prev {
        Some(p) => SelectionMask {
            height: p.height,
            width: p.width,
            kind: MaskKind::Request,
            values: p.values.iter().map(|v| !v).collect(),
        },
        None => SelectionMask::filled(height, width, MaskKind::Request, true),
    };
    RequestMap { agent_id, mask }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdjacencyMatrix {
    pub size: usize,
    pub timestamp: usize,
    pub values: Vec<bool>,
}

impl AdjacencyMatrix {
    pub fn get(&self, sender: usize, receiver: usize) -> bool {
        self.values[sender * self.size + receiver]
    }

    pub fn links(&self) -> usize {
        self.values.iter().filter(|v| **v).count()
    }
}

/// Link `i -> j` exists when some cell is offered by `i` (spatial and
/// temporal masks) and requested by `j`.
pub fn build_adjacency(
    spatial: &[SelectionMask],
    temporal: &[SelectionMask],
    requests: &[RequestMap],
    timestamp: usize,
) -> Result<AdjacencyMatrix> {
    let n = spatial.len();
    if temporal.len() != n || requests.len() != n {
        return Err(shape_err(n, temporal.len().max(requests.len())));
    }
    let shape_ok = |m: &SelectionMask| spatial.first().is_none_or(|s| s.same_shape(m));
    if !spatial
        .iter()
        .chain(temporal)
        .chain(requests.iter().map(|r| &r.mask))
        .all(shape_ok)
    {
        return Err(Error::Shape {
            expected: "masks of equal shape".into(),
            actual: "mixed shapes".into(),
        });
    }
    let offers: Vec<SelectionMask> = spatial.iter().zip(temporal).map(|(s, t)| s.and(t)).collect();
    let mut values = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                values[i * n + j] = offers[i]
                    .values
                    .iter()
                    .zip(&requests[j].mask.values)
                    .any(|(a, b)| *a && *b);
            }
        }
    }
    Ok(AdjacencyMatrix {
        size: n,
        timestamp,
        values,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    /// Code indices, `n_r` per cell, `ceil(log2 n_l)` bits each, packed
    /// most-significant bit first.
    Codes { n_l: usize, n_r: usize, packed: Vec<u8> },
    /// Uncompressed feature vectors, `channels` f32 values per cell.
    Raw { channels: usize, values: Vec<f32> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PragmaticMessage {
    pub sender: u32,
    pub receiver: u32,
    pub timestamp: usize,
    pub codebook_version: u32,
    pub cells: Vec<(u16, u16)>,
    pub payload: Payload,
    pub arrival_time: Option<usize>,
}

/// Bits for one code index of a codebook with `n_l` entries.
pub fn index_bits(n_l: usize) -> u32 {
    usize::BITS - n_l.max(1).saturating_sub(1).leading_zeros()
}

struct BitWriter {
    bytes: Vec<u8>,
    used: usize,
}

impl BitWriter {
    fn push(&mut self, value: u32, bits: u32) {
        for b in (0..bits).rev() {
            if self.used.is_multiple_of(8) {
                self.bytes.push(0);
            }
            if (value >> b) & 1 == 1 {
                *self.bytes.last_mut().unwrap() |= 0x80 >> (self.used % 8);
            }
            self.used += 1;
        }
    }
}

fn read_bits(bytes: &[u8], offset: usize, bits: u32) -> u32 {
    let mut v = 0u32;
    for k in 0..bits as usize {
        let pos = offset + k;
        let bit = (bytes[pos / 8] >> (7 - pos % 8)) & 1;
        v = (v << 1) | bit as u32;
    }
    v
}

fn to_u16(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::Wire(format!("{what} {v} does not fit in 16 bits")))
}

/// Wire message carrying code indices.
pub fn pack<T: Real>(
    indices: &CodeIndexGrid,
    sender: u32,
    receiver: u32,
    timestamp: usize,
    codebook: &Codebook<T>,
) -> Result<PragmaticMessage> {
    let n_l = codebook.n_l();
    let bits = index_bits(n_l);
    let mut writer = BitWriter {
        bytes: Vec::new(),
        used: 0,
    };
    let mut cells = Vec::with_capacity(indices.len());
    for (&(row, col), group) in &indices.entries {
        if row >= indices.height || col >= indices.width {
            return Err(Error::CellOutOfGrid {
                row,
                col,
                height: indices.height,
                width: indices.width,
            });
        }
        if group.len() != codebook.n_r {
            return Err(shape_err(format!("{} indices per cell", codebook.n_r), group.len()));
        }
        for &i in group {
            if i as usize >= n_l {
                return Err(Error::IndexOutOfRange { index: i, size: n_l });
            }
            writer.push(i, bits);
        }
        cells.push((to_u16(row, "row")?, to_u16(col, "col")?));
    }
    Ok(PragmaticMessage {
        sender,
        receiver,
        timestamp,
        codebook_version: codebook.version_id,
        cells,
        payload: Payload::Codes {
            n_l,
            n_r: codebook.n_r,
            packed: writer.bytes,
        },
        arrival_time: None,
    })
}

/// Wire message carrying raw feature vectors (channel compressor bypassed).
pub fn pack_raw<T: Real>(
    z: &SparseFeatureMap<T>,
    sender: u32,
    receiver: u32,
    timestamp: usize,
) -> Result<PragmaticMessage> {
    let mut cells = Vec::with_capacity(z.len());
    let mut values = Vec::with_capacity(z.len() * z.channels);
    for (&(row, col), v) in &z.cells {
        if row >= z.height || col >= z.width {
            return Err(Error::CellOutOfGrid {
                row,
                col,
                height: z.height,
                width: z.width,
            });
        }
        cells.push((to_u16(row, "row")?, to_u16(col, "col")?));
        values.extend(v.iter().map(|x| x.as_f32()));
    }
    Ok(PragmaticMessage {
        sender,
        receiver,
        timestamp,
        codebook_version: 0,
        cells,
        payload: Payload::Raw {
            channels: z.channels,
            values,
        },
        arrival_time: None,
    })
}

/// Code indices of a code-carrying message.
pub fn unpack(msg: &PragmaticMessage, height: usize, width: usize) -> Result<CodeIndexGrid> {
    let Payload::Codes { n_l, n_r, packed } = &msg.payload else {
        return Err(Error::Wire("message carries raw features, not code indices".into()));
    };
    let bits = index_bits(*n_l);
    let needed = msg.cells.len() * n_r * bits as usize;
    if packed.len() * 8 < needed {
        return Err(Error::Wire("index payload shorter than cell count implies".into()));
    }
    let mut entries = std::collections::BTreeMap::new();
    let mut offset = 0;
    for &(r, c) in &msg.cells {
        let (row, col) = (r as usize, c as usize);
        if row >= height || col >= width {
            return Err(Error::CellOutOfGrid {
                row,
                col,
                height,
                width,
            });
        }
        let group: Vec<u32> = (0..*n_r)
            .map(|k| read_bits(packed, offset + k * bits as usize, bits))
            .collect();
        offset += n_r * bits as usize;
        entries.insert((row, col), group);
    }
    Ok(CodeIndexGrid {
        height,
        width,
        n_r: *n_r,
        entries,
    })
}

impl PragmaticMessage {
    pub fn payload_bits(&self) -> usize {
        match &self.payload {
            Payload::Codes { n_l, n_r, .. } => self.cells.len() * n_r * index_bits(*n_l) as usize,
            Payload::Raw { channels, .. } => self.cells.len() * channels * RAW_VALUE_BITS,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let magic = match self.payload {
            Payload::Codes { .. } => CODES_MAGIC,
            Payload::Raw { .. } => RAW_MAGIC,
        };
        let mut out =
            Vec::with_capacity(HEADER_BYTES + CELL_BYTES * self.cells.len() + self.payload_bits().div_ceil(8));
        out.extend_from_slice(&magic.to_le_bytes());
        out.extend_from_slice(&(self.sender as u16).to_le_bytes());
        out.extend_from_slice(&(self.receiver as u16).to_le_bytes());
        out.extend_from_slice(&(self.timestamp as u32).to_le_bytes());
        out.extend_from_slice(&self.codebook_version.to_le_bytes());
        out.extend_from_slice(&(self.cells.len() as u32).to_le_bytes());
        for (r, c) in &self.cells {
            out.extend_from_slice(&r.to_le_bytes());
            out.extend_from_slice(&c.to_le_bytes());
        }
        match &self.payload {
            Payload::Codes { packed, .. } => out.extend_from_slice(packed),
            Payload::Raw { values, .. } => {
                for v in values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    /// Parse wire bytes. The index layout (`n_l`, `n_r`) and raw vector
    /// length are not on the wire; both ends know them from configuration.
    pub fn from_bytes(bytes: &[u8], n_l: usize, n_r: usize, channels: usize) -> Result<Self> {
        if bytes.len() < HEADER_BYTES {
            return Err(Error::Wire("truncated header".into()));
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let magic = u16_at(0);
        let count = u32_at(14) as usize;
        let cells_end = HEADER_BYTES + CELL_BYTES * count;
        if bytes.len() < cells_end {
            return Err(Error::Wire("truncated cell list".into()));
        }
        let cells = (0..count)
            .map(|k| (u16_at(HEADER_BYTES + 4 * k), u16_at(HEADER_BYTES + 4 * k + 2)))
            .collect();
        let body = &bytes[cells_end..];
        let payload = match magic {
            CODES_MAGIC => {
                let expect = (count * n_r * index_bits(n_l) as usize).div_ceil(8);
                if body.len() != expect {
                    return Err(Error::Wire(format!(
                        "index payload has {} bytes, expected {expect}",
                        body.len()
                    )));
                }
                Payload::Codes {
                    n_l,
                    n_r,
                    packed: body.to_vec(),
                }
            }
            RAW_MAGIC => {
                if body.len() != 4 * count * channels {
                    return Err(Error::Wire("raw payload length mismatch".into()));
                }
                Payload::Raw {
                    channels,
                    values: body
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                }
            }
            other => return Err(Error::Wire(format!("unknown magic {other:#06x}"))),
        };
        Ok(Self {
            sender: u16_at(2) as u32,
            receiver: u16_at(4) as u32,
            timestamp: u32_at(6) as usize,
            codebook_version: u32_at(10),
            cells,
            payload,
            arrival_time: None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CommVolume {
    /// Bytes on the wire: header, cell list, packed payload.
    pub raw_bytes: usize,
    /// Log-scale size of one transmitted vector.
    pub per_vector_metric: f64,
}

/// Log2 of the bytes needed for one vector made of `n_r` codes out of `n_l`.
pub fn code_vector_metric(n_l: usize, n_r: usize) -> f64 {
    ((n_l as f64).log2() * n_r as f64 / 8.0).log2()
}

/// Log2 of the bytes of one uncompressed `channels`-dimensional f32 vector.
pub fn raw_vector_metric(channels: usize) -> f64 {
    ((channels * RAW_VALUE_BITS) as f64 / 8.0).log2()
}

/// Log2 of a total byte count; zero traffic maps to zero.
pub fn aggregate_metric(total_bytes: usize) -> f64 {
    if total_bytes == 0 {
        0.0
    } else {
        (total_bytes as f64).log2()
    }
}

pub fn comm_volume(msg: &PragmaticMessage) -> CommVolume {
    let per_vector_metric = match &msg.payload {
        Payload::Codes { n_l, n_r, .. } => code_vector_metric(*n_l, *n_r),
        Payload::Raw { channels, .. } => raw_vector_metric(*channels),
    };
    CommVolume {
        raw_bytes: HEADER_BYTES + CELL_BYTES * msg.cells.len() + msg.payload_bits().div_ceil(8),
        per_vector_metric,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelModel {
    /// Delay in simulator steps.
    pub latency: usize,
    pub drop_probability: f64,
    pub seed: u64,
}

impl Default for ChannelModel {
    fn default() -> Self {
        Self {
            latency: 0,
            drop_probability: 0.0,
            seed: 0,
        }
    }
}

impl ChannelModel {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.drop_probability) {
            return Err(Error::Config(format!(
                "drop_probability {} outside [0, 1]",
                self.drop_probability
            )));
        }
        Ok(())
    }
}

/// Delay line between senders and receivers.
#[derive(Clone, Debug)]
pub struct Channel {
    pub model: ChannelModel,
    rng: ChaCha8Rng,
    queue: Vec<PragmaticMessage>,
}

impl Channel {
    pub fn new(model: ChannelModel) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(model.seed);
        Self {
            model,
            rng,
            queue: Vec::new(),
        }
    }

    /// Enqueue this step's messages and hand back everything due at `now`,
    /// in send order.
    pub fn transmit(&mut self, msgs: Vec<PragmaticMessage>, now: usize) -> Vec<PragmaticMessage> {
        for mut m in msgs {
            let dropped = self.model.drop_probability > 0.0 && self.rng.gen_bool(self.model.drop_probability);
            if !dropped {
                m.arrival_time = Some(now + self.model.latency);
                self.queue.push(m);
            }
        }
        let (due, waiting): (Vec<_>, Vec<_>) = self
            .queue
            .drain(..)
            .partition(|m| m.arrival_time.is_some_and(|a| a <= now));
        self.queue = waiting;
        due
    }

    pub fn in_flight(&self) -> &[PragmaticMessage] {
        &self.queue
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub t: usize,
    pub sender: u32,
    pub receiver: u32,
    pub cells: usize,
    pub raw_bytes: usize,
    pub paper_metric: f64,
}

impl LedgerEntry {
    pub fn of(msg: &PragmaticMessage) -> Self {
        let v = comm_volume(msg);
        Self {
            t: msg.timestamp,
            sender: msg.sender,
            receiver: msg.receiver,
            cells: msg.cells.len(),
            raw_bytes: v.raw_bytes,
            paper_metric: v.per_vector_metric,
        }
    }
}

pub fn write_ledger_csv<W: Write>(entries: &[LedgerEntry], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for e in entries {
        w.serialize(e)?;
    }
    if entries.is_empty() {
        w.write_record(["t", "sender", "receiver", "cells", "raw_bytes", "paper_metric"])?;
    }
    w.flush()?;
    Ok(())
}
