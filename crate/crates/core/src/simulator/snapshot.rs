//! Versioned binary snapshots of [`SimState`].
//!
//! Layout (little endian):
//!
//! ```text
//! magic      8 bytes  "ODCSNAP\0"
//! version    u16      1
//! segments   u32      number of segments S
//! routes     u32      number of flattened routes
//! sensors    u32      number of sensors M
//! clock      i64      microseconds since the start of the run
//! loaded     i64      micro-vehicles loaded so far
//! exited     i64      micro-vehicles that reached their destination
//! S x segment queue:  u32 count, then packets
//! S x origin queue:   u32 count, then packets
//! M x sensor total    i64 micro-vehicles
//! packet = amount i64, route u32, position u16, entry i64, exit i64
//! ```
//!
//! Segment occupancy is recomputed from the queues on restore.

use std::collections::VecDeque;
use std::io::{Cursor, Read};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::engine::{Packet, SimState, Simulator};
use crate::error::{Error, Result};

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"ODCSNAP\0";
pub const SNAPSHOT_VERSION: u16 = 1;

/// Frozen copy of a simulation state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimulatorSnapshot {
    state: SimState,
    routes: usize,
}

impl Simulator {
    pub fn snapshot(&self, state: &SimState) -> SimulatorSnapshot {
        SimulatorSnapshot {
            state: state.clone(),
            routes: self.network().route_index().len(),
        }
    }

    /// Restores a snapshot taken on a network of the same shape.
    pub fn restore(&self, snap: &SimulatorSnapshot) -> Result<SimState> {
        let net = self.network();
        let shape_ok = snap.state.segments.len() == net.segments().len()
            && snap.routes == net.route_index().len()
            && snap.state.sensor_totals.len() == net.num_sensors();
        if !shape_ok {
            return Err(Error::Snapshot("snapshot was taken on a different network".into()));
        }
        Ok(snap.state.clone())
    }
}

impl SimulatorSnapshot {
    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.state;
        let mut out = Vec::new();
        out.extend_from_slice(SNAPSHOT_MAGIC);
        let w = &mut out;
        w.write_u16::<LittleEndian>(SNAPSHOT_VERSION).unwrap();
        w.write_u32::<LittleEndian>(s.segments.len() as u32).unwrap();
        w.write_u32::<LittleEndian>(self.routes as u32).unwrap();
        w.write_u32::<LittleEndian>(s.sensor_totals.len() as u32).unwrap();
        w.write_i64::<LittleEndian>(s.clock_us).unwrap();
        w.write_i64::<LittleEndian>(s.loaded_total).unwrap();
        w.write_i64::<LittleEndian>(s.exited_total).unwrap();
        for queue in s.segments.iter().chain(&s.origin_queues) {
            w.write_u32::<LittleEndian>(queue.len() as u32).unwrap();
            for p in queue {
                w.write_i64::<LittleEndian>(p.amount).unwrap();
                w.write_u32::<LittleEndian>(p.route).unwrap();
                w.write_u16::<LittleEndian>(p.pos).unwrap();
                w.write_i64::<LittleEndian>(p.entry_us).unwrap();
                w.write_i64::<LittleEndian>(p.exit_us).unwrap();
            }
        }
        for t in &s.sensor_totals {
            w.write_i64::<LittleEndian>(*t).unwrap();
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(Error::Snapshot("bad magic header".into()));
        }
        let version = r.read_u16::<LittleEndian>().map_err(truncated)?;
        if version != SNAPSHOT_VERSION {
            return Err(Error::Snapshot(format!(
                "unsupported snapshot version {version} (expected {SNAPSHOT_VERSION})"
            )));
        }
        let nseg = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let routes = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let nsens = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let clock_us = r.read_i64::<LittleEndian>().map_err(truncated)?;
        let loaded_total = r.read_i64::<LittleEndian>().map_err(truncated)?;
        let exited_total = r.read_i64::<LittleEndian>().map_err(truncated)?;
        let mut queues = Vec::with_capacity(2 * nseg);
        for _ in 0..2 * nseg {
            let count = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
            let mut q = VecDeque::with_capacity(count.min(1 << 16));
            for _ in 0..count {
                let p = Packet {
                    amount: r.read_i64::<LittleEndian>().map_err(truncated)?,
                    route: r.read_u32::<LittleEndian>().map_err(truncated)?,
                    pos: r.read_u16::<LittleEndian>().map_err(truncated)?,
                    entry_us: r.read_i64::<LittleEndian>().map_err(truncated)?,
                    exit_us: r.read_i64::<LittleEndian>().map_err(truncated)?,
                };
                if p.amount <= 0 || p.route as usize >= routes.max(1) {
                    return Err(Error::Snapshot("corrupt packet".into()));
                }
                q.push_back(p);
            }
            queues.push(q);
        }
        let sensor_totals = (0..nsens)
            .map(|_| r.read_i64::<LittleEndian>().map_err(truncated))
            .collect::<Result<Vec<_>>>()?;
        if (r.position() as usize) != bytes.len() {
            return Err(Error::Snapshot("trailing bytes after snapshot".into()));
        }
        let origin_queues = queues.split_off(nseg);
        let occupancy = queues.iter().map(|q| q.iter().map(|p| p.amount).sum()).collect();
        Ok(Self {
            state: SimState {
                clock_us,
                segments: queues,
                occupancy,
                origin_queues,
                sensor_totals,
                loaded_total,
                exited_total,
            },
            routes,
        })
    }
}

fn truncated(_: std::io::Error) -> Error {
    Error::Snapshot("snapshot blob is truncated".into())
}
