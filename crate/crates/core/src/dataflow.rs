//! Subsystem data plane.
//!
//! Antennas are grouped into subsystems. Each subsystem's combiner cuts every
//! antenna's whole-band symbol into contiguous partitions and sends partition
//! `p` to sub-band processor `p`. After processing, each subsystem's splitter
//! collects its antennas' partitions from all processors and reassembles the
//! whole band. Routing is a pure permutation of samples.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::mpsc;
use std::thread;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::config::SystemConfig;
use crate::error::{Error, Result};

/// 12-bit I plus 12-bit Q.
pub const BYTES_PER_SAMPLE: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsystemTopology {
    pub num_subsystems: usize,
    pub antennas_per_subsystem: usize,
    pub num_subband_processors: usize,
    pub used_subcarriers: usize,
    pub bytes_per_sample: u64,
    /// OFDM symbols per second on each subcarrier.
    pub symbol_rate: u64,
}

impl SubsystemTopology {
    pub fn from_config(cfg: &SystemConfig) -> Result<Self> {
        let t = Self {
            num_subsystems: cfg.num_subsystems,
            antennas_per_subsystem: cfg.antennas_per_subsystem(),
            num_subband_processors: cfg.num_subband_processors,
            used_subcarriers: cfg.used_subcarriers,
            bytes_per_sample: BYTES_PER_SAMPLE,
            symbol_rate: cfg.symbol_rate(),
        };
        if t.num_subsystems == 0
            || t.num_subsystems * t.antennas_per_subsystem != cfg.num_bs_antennas
        {
            return Err(Error::InvalidConfig(format!(
                "{} subsystems cannot hold {} antennas",
                t.num_subsystems, cfg.num_bs_antennas
            )));
        }
        if t.num_subband_processors == 0 || t.used_subcarriers % t.num_subband_processors != 0 {
            return Err(Error::InvalidConfig(format!(
                "{} processors do not divide {} subcarriers",
                t.num_subband_processors, t.used_subcarriers
            )));
        }
        Ok(t)
    }

    pub fn num_antennas(&self) -> usize {
        self.num_subsystems * self.antennas_per_subsystem
    }

    pub fn partition_len(&self) -> usize {
        self.used_subcarriers / self.num_subband_processors
    }

    /// Subcarriers handled by processor `p`.
    pub fn partition_range(&self, p: usize) -> std::ops::Range<usize> {
        let len = self.partition_len();
        p * len..(p + 1) * len
    }

    pub fn global_antenna(&self, subsystem: usize, antenna: usize) -> usize {
        subsystem * self.antennas_per_subsystem + antenna
    }

    pub fn chunks_per_symbol(&self) -> usize {
        self.num_subsystems * self.num_subband_processors * self.antennas_per_subsystem
    }
}

/// One antenna's slice of one partition for one symbol.
#[derive(Debug, Clone, PartialEq)]
pub struct DataChunk {
    pub subsystem: usize,
    /// Antenna index within the subsystem.
    pub antenna: usize,
    pub partition: usize,
    pub symbol: usize,
    pub payload: Vec<Complex64>,
}

/// Cuts one subsystem's antenna columns for one symbol into chunks, ordered
/// by partition and then antenna.
pub fn combine(
    subsystem: usize,
    symbol: usize,
    antennas: &[Option<Vec<Complex64>>],
    topo: &SubsystemTopology,
) -> Result<Vec<DataChunk>> {
    if antennas.len() != topo.antennas_per_subsystem {
        return Err(Error::MissingAntenna {
            subsystem,
            antenna: antennas.len().min(topo.antennas_per_subsystem),
        });
    }
    let mut columns = Vec::with_capacity(antennas.len());
    for (antenna, col) in antennas.iter().enumerate() {
        let col = col.as_ref().ok_or(Error::MissingAntenna { subsystem, antenna })?;
        if col.len() != topo.used_subcarriers {
            return Err(Error::LengthMismatch {
                expected: topo.used_subcarriers,
                actual: col.len(),
            });
        }
        columns.push(col);
    }
    let mut out = Vec::with_capacity(topo.num_subband_processors * columns.len());
    for partition in 0..topo.num_subband_processors {
        let range = topo.partition_range(partition);
        for (antenna, col) in columns.iter().enumerate() {
            out.push(DataChunk {
                subsystem,
                antenna,
                partition,
                symbol,
                payload: col[range.clone()].to_vec(),
            });
        }
    }
    Ok(out)
}

/// Reassembles one subsystem's whole-band antenna columns for one symbol.
pub fn split(
    subsystem: usize,
    chunks: &[DataChunk],
    topo: &SubsystemTopology,
) -> Result<Vec<Vec<Complex64>>> {
    let p = topo.num_subband_processors;
    let a = topo.antennas_per_subsystem;
    let mut slots: Vec<Option<&DataChunk>> = vec![None; a * p];
    for c in chunks {
        if c.subsystem != subsystem || c.antenna >= a || c.partition >= p {
            return Err(Error::OutOfRange {
                what: "chunk address",
                index: c.antenna * p + c.partition,
                limit: a * p,
            });
        }
        if c.payload.len() != topo.partition_len() {
            return Err(Error::LengthMismatch {
                expected: topo.partition_len(),
                actual: c.payload.len(),
            });
        }
        slots[c.antenna * p + c.partition] = Some(c);
    }
    (0..a)
        .map(|antenna| {
            let mut col = Vec::with_capacity(topo.used_subcarriers);
            for partition in 0..p {
                let c = slots[antenna * p + partition].ok_or(Error::MissingPartition {
                    subsystem,
                    antenna,
                    partition,
                })?;
                col.extend_from_slice(&c.payload);
            }
            Ok(col)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Combine,
    Process,
    Split,
}

/// One routed chunk, as recorded in the audit log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AuditEntry {
    pub stage: Stage,
    pub symbol: usize,
    pub subsystem: usize,
    pub antenna: usize,
    pub partition: usize,
    pub first_subcarrier: usize,
    pub samples: usize,
}

impl fmt::Display for AuditEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let stage = match self.stage {
            Stage::Combine => "combine",
            Stage::Process => "process",
            Stage::Split => "split",
        };
        write!(
            f,
            "{stage} symbol={} subsystem={} antenna={} partition={} subcarriers={}..{} samples={}",
            self.symbol,
            self.subsystem,
            self.antenna,
            self.partition,
            self.first_subcarrier,
            self.first_subcarrier + self.samples,
            self.samples
        )
    }
}

impl AuditEntry {
    fn of(stage: Stage, c: &DataChunk, topo: &SubsystemTopology) -> Self {
        Self {
            stage,
            symbol: c.symbol,
            subsystem: c.subsystem,
            antenna: c.antenna,
            partition: c.partition,
            first_subcarrier: topo.partition_range(c.partition).start,
            samples: c.payload.len(),
        }
    }
}

/// Checks that every chunk went through every stage exactly once, stayed
/// inside its partition, and that sample counts balance per symbol.
pub fn conservation_check(audit: &[AuditEntry], topo: &SubsystemTopology) -> Result<()> {
    let mut seen: BTreeMap<(usize, usize, usize, usize), [usize; 3]> = BTreeMap::new();
    let mut balance: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for e in audit {
        let range = topo.partition_range(e.partition);
        if e.first_subcarrier != range.start || e.first_subcarrier + e.samples != range.end {
            return Err(Error::InvalidConfig(format!("chunk crosses its partition: {e}")));
        }
        let counts = seen
            .entry((e.symbol, e.subsystem, e.antenna, e.partition))
            .or_default();
        counts[e.stage as usize] += 1;
        let b = balance.entry(e.symbol).or_default();
        match e.stage {
            Stage::Combine => b.0 += e.samples,
            Stage::Split => b.1 += e.samples,
            Stage::Process => {}
        }
    }
    if let Some((key, c)) = seen.iter().find(|(_, c)| **c != [1, 1, 1]) {
        return Err(Error::InvalidConfig(format!(
            "chunk {key:?} seen {c:?} times at combine/process/split"
        )));
    }
    for (symbol, (i, o)) in &balance {
        let expected = topo.num_antennas() * topo.used_subcarriers;
        if i != o || *i != expected {
            return Err(Error::InvalidConfig(format!(
                "symbol {symbol}: {i} samples in, {o} out, {expected} expected"
            )));
        }
    }
    Ok(())
}

/// Result of pushing symbols through the data plane.
#[derive(Debug, Clone)]
pub struct DataPlaneOutput {
    /// `grids[symbol][antenna]`, whole band.
    pub grids: Vec<Vec<Vec<Complex64>>>,
    /// Sorted audit log.
    pub audit: Vec<AuditEntry>,
}

impl DataPlaneOutput {
    pub fn audit_text(&self) -> String {
        self.audit.iter().map(|e| format!("{e}\n")).collect()
    }
}

/// Runs combiners, processors and splitters as threads connected by
/// channels. Each processor applies `process` to every chunk it owns.
/// `grids[symbol][antenna]` holds the whole-band input columns.
pub fn run_data_plane<F>(
    grids: &[Vec<Vec<Complex64>>],
    topo: &SubsystemTopology,
    process: F,
) -> Result<DataPlaneOutput>
where
    F: Fn(&DataChunk) -> Vec<Complex64> + Sync,
{
    for g in grids {
        if g.len() != topo.num_antennas() {
            return Err(Error::LengthMismatch {
                expected: topo.num_antennas(),
                actual: g.len(),
            });
        }
    }
    let (audit_tx, audit_rx) = mpsc::channel::<AuditEntry>();
    let (to_proc, from_comb): (Vec<_>, Vec<_>) =
        (0..topo.num_subband_processors).map(|_| mpsc::channel::<DataChunk>()).unzip();
    let (to_split, from_proc): (Vec<_>, Vec<_>) =
        (0..topo.num_subsystems).map(|_| mpsc::channel::<DataChunk>()).unzip();
    let process = &process;

    let result: Result<Vec<Vec<Vec<Vec<Complex64>>>>> = thread::scope(|scope| {
        let mut combiners = Vec::new();
        for s in 0..topo.num_subsystems {
            let to_proc = to_proc.clone();
            let audit = audit_tx.clone();
            combiners.push(scope.spawn(move || -> Result<()> {
                for (symbol, g) in grids.iter().enumerate() {
                    let cols: Vec<Option<Vec<Complex64>>> = (0..topo.antennas_per_subsystem)
                        .map(|a| Some(g[topo.global_antenna(s, a)].clone()))
                        .collect();
                    for chunk in combine(s, symbol, &cols, topo)? {
                        let _ = audit.send(AuditEntry::of(Stage::Combine, &chunk, topo));
                        let _ = to_proc[chunk.partition].send(chunk);
                    }
                }
                Ok(())
            }));
        }
        drop(to_proc);

        for rx in from_comb {
            let to_split = to_split.clone();
            let audit = audit_tx.clone();
            scope.spawn(move || {
                for mut chunk in rx {
                    chunk.payload = process(&chunk);
                    let _ = audit.send(AuditEntry::of(Stage::Process, &chunk, topo));
                    let _ = to_split[chunk.subsystem].send(chunk);
                }
            });
        }
        drop(to_split);

        let splitters: Vec<_> = from_proc
            .into_iter()
            .enumerate()
            .map(|(s, rx)| {
                let audit = audit_tx.clone();
                scope.spawn(move || -> Result<Vec<Vec<Vec<Complex64>>>> {
                    let mut by_symbol: Vec<Vec<DataChunk>> = vec![Vec::new(); grids.len()];
                    for chunk in rx {
                        let _ = audit.send(AuditEntry::of(Stage::Split, &chunk, topo));
                        by_symbol[chunk.symbol].push(chunk);
                    }
                    by_symbol.iter().map(|chunks| split(s, chunks, topo)).collect()
                })
            })
            .collect();
        drop(audit_tx);

        for c in combiners {
            c.join().map_err(|_| Error::InvalidConfig("combiner thread panicked".into()))??;
        }
        splitters
            .into_iter()
            .map(|h| h.join().map_err(|_| Error::InvalidConfig("splitter thread panicked".into()))?)
            .collect()
    });
    let per_subsystem = result?;

    let mut audit: Vec<AuditEntry> = audit_rx.into_iter().collect();
    audit.sort();
    let grids = (0..grids.len())
        .map(|symbol| {
            per_subsystem
                .iter()
                .flat_map(|s| s[symbol].iter().cloned())
                .collect()
        })
        .collect();
    Ok(DataPlaneOutput { grids, audit })
}

/// Sustained sample throughput of the front end, in bytes per second.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub per_chain: u64,
    pub per_subsystem: u64,
    pub total: u64,
}

impl ThroughputReport {
    pub fn mb_per_s(bytes: u64) -> f64 {
        bytes as f64 / 1e6
    }
}

pub fn throughput_report(topo: &SubsystemTopology) -> ThroughputReport {
    let per_chain = topo.used_subcarriers as u64 * topo.symbol_rate * topo.bytes_per_sample;
    let per_subsystem = per_chain * topo.antennas_per_subsystem as u64;
    ThroughputReport {
        per_chain,
        per_subsystem,
        total: per_subsystem * topo.num_subsystems as u64,
    }
}
