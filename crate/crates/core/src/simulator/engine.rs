//! FIFO point-queue engine.
//!
//! Vehicles move as packets of integer micro-vehicles on an integer
//! microsecond clock, so runs are bit-reproducible and conservation is
//! exact. Within a substep segments are processed upstream first, which
//! lets a packet traverse several short segments in one substep.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::network::{Network, SensorPosition};
use crate::error::{Error, Result};

pub const MICRO: i64 = 1_000_000;
const US_PER_HOUR: i128 = 3_600_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Packet {
    pub amount: i64,
    pub route: u32,
    pub pos: u16,
    pub entry_us: i64,
    pub exit_us: i64,
}

/// Full dynamic state of a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimState {
    pub(crate) clock_us: i64,
    pub(crate) segments: Vec<VecDeque<Packet>>,
    pub(crate) occupancy: Vec<i64>,
    pub(crate) origin_queues: Vec<VecDeque<Packet>>,
    pub(crate) sensor_totals: Vec<i64>,
    pub(crate) loaded_total: i64,
    pub(crate) exited_total: i64,
}

impl SimState {
    pub fn clock_seconds(&self) -> f64 {
        self.clock_us as f64 / MICRO as f64
    }

    /// Vehicles loaded so far.
    pub fn loaded_vehicles(&self) -> f64 {
        self.loaded_total as f64 / MICRO as f64
    }

    /// Vehicles that reached their destination.
    pub fn exited_vehicles(&self) -> f64 {
        self.exited_total as f64 / MICRO as f64
    }

    /// Vehicles on segments or waiting to enter the network.
    pub fn vehicles_in_network(&self) -> f64 {
        let on_links: i64 = self.occupancy.iter().sum();
        let waiting: i64 = self.origin_queues.iter().flatten().map(|p| p.amount).sum();
        (on_links + waiting) as f64 / MICRO as f64
    }

    pub fn is_empty(&self) -> bool {
        self.occupancy.iter().all(|o| *o == 0) && self.origin_queues.iter().all(VecDeque::is_empty)
    }

    /// Cumulative vehicles counted by each sensor.
    pub fn sensor_totals(&self) -> Vec<f64> {
        self.sensor_totals.iter().map(|v| *v as f64 / MICRO as f64).collect()
    }

    #[cfg(test)]
    pub(crate) fn micro_sensor_totals(&self) -> &[i64] {
        &self.sensor_totals
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub interval_s: f64,
    pub step_s: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            interval_s: 300.0,
            step_s: 5.0,
        }
    }
}

/// Counts and speeds of one interval.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensorFrame {
    pub interval: usize,
    pub counts: Vec<f64>,
    pub mean_speeds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalOutput {
    pub frame: SensorFrame,
    /// Mean traversal time of vehicles leaving each segment, or the current
    /// speed-density estimate when none left.
    pub segment_travel_times: Vec<f64>,
}

/// Simulator bound to a network. Clones share the interval counter.
#[derive(Debug, Clone)]
pub struct Simulator {
    network: Arc<Network>,
    interval_us: i64,
    step_us: i64,
    storage: Vec<i64>,
    capacity: Vec<i128>,
    /// Summed capacity of the segments feeding each segment, when more than one does.
    merge_capacity: Vec<Option<i128>>,
    entry_sensors: Vec<Vec<usize>>,
    exit_sensors: Vec<Vec<usize>>,
    intervals_simulated: Arc<AtomicU64>,
}

impl Simulator {
    pub fn new(network: Network, config: SimConfig) -> Result<Self> {
        let interval_us = (config.interval_s * 1e6).round() as i64;
        let step_us = (config.step_s * 1e6).round() as i64;
        if interval_us <= 0 || step_us <= 0 || interval_us % step_us != 0 {
            return Err(Error::InvalidArgument(
                "interval length must be a positive multiple of the step length".into(),
            ));
        }
        let segs = network.segments();
        let mut entry_sensors = vec![Vec::new(); segs.len()];
        let mut exit_sensors = vec![Vec::new(); segs.len()];
        for (i, s) in network.sensors().iter().enumerate() {
            match s.position {
                SensorPosition::Entry => entry_sensors[s.segment].push(i),
                SensorPosition::Exit => exit_sensors[s.segment].push(i),
            }
        }
        let capacity: Vec<i128> = segs.iter().map(|s| (s.capacity_vph * MICRO as f64).round() as i128).collect();
        let merge_capacity = segs
            .iter()
            .map(|down| {
                let feeders: Vec<usize> = (0..segs.len()).filter(|&u| segs[u].to == down.from).collect();
                (feeders.len() > 1).then(|| feeders.iter().map(|&u| capacity[u]).sum())
            })
            .collect();
        Ok(Self {
            merge_capacity,
            storage: segs.iter().map(|s| (s.storage_veh * MICRO as f64).round() as i64).collect(),
            capacity,
            network: Arc::new(network),
            interval_us,
            step_us,
            entry_sensors,
            exit_sensors,
            intervals_simulated: Arc::new(AtomicU64::new(0)),
        })
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn interval_seconds(&self) -> f64 {
        self.interval_us as f64 / 1e6
    }

    pub fn step_seconds(&self) -> f64 {
        self.step_us as f64 / 1e6
    }

    pub fn intervals_simulated(&self) -> u64 {
        self.intervals_simulated.load(Ordering::Relaxed)
    }

    pub fn reset_counter(&self) {
        self.intervals_simulated.store(0, Ordering::Relaxed);
    }

    /// Same network and settings with a private interval counter.
    pub fn detached(&self) -> Self {
        let mut s = self.clone();
        s.intervals_simulated = Arc::new(AtomicU64::new(0));
        s
    }

    pub fn initial_state(&self) -> SimState {
        let n = self.network.segments().len();
        SimState {
            clock_us: 0,
            segments: vec![VecDeque::new(); n],
            occupancy: vec![0; n],
            origin_queues: vec![VecDeque::new(); n],
            sensor_totals: vec![0; self.network.num_sensors()],
            loaded_total: 0,
            exited_total: 0,
        }
    }

    /// Index of the interval the state is positioned at.
    pub fn interval_of(&self, state: &SimState) -> usize {
        (state.clock_us / self.interval_us) as usize
    }

    /// Advances one interval with OD departure rates `demand` (veh/h).
    pub fn step(&self, state: &mut SimState, demand: &[f64]) -> Result<IntervalOutput> {
        let net = &*self.network;
        if demand.len() != net.num_ods() {
            return Err(Error::dim("demand", net.num_ods(), demand.len()));
        }
        if let Some(o) = demand.iter().position(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "demand of OD {o} must be finite and non-negative, got {}",
                demand[o]
            )));
        }
        if state.segments.len() != net.segments().len() || state.sensor_totals.len() != net.num_sensors() {
            return Err(Error::Snapshot("state does not belong to this network".into()));
        }
        if state.clock_us % self.interval_us != 0 {
            return Err(Error::Snapshot("state is not at an interval boundary".into()));
        }
        let interval = self.interval_of(state);
        let start = state.clock_us;
        let m = net.num_sensors();
        let nseg = net.segments().len();
        let mut acc = Accumulator {
            counts: vec![0; m],
            dist: vec![0.0; m],
            time: vec![0.0; m],
            seg_veh: vec![0.0; nseg],
            seg_time: vec![0.0; nseg],
        };
        let rates: Vec<f64> = net
            .route_index()
            .iter()
            .map(|&(o, k)| demand[o] * net.ods()[o].routes[k].share)
            .collect();
        let mut released = vec![0i64; rates.len()];

        while state.clock_us < start + self.interval_us {
            let sigma = state.clock_us;
            let end = sigma + self.step_us;
            let elapsed = (end - start) as f64;
            for (r, &rate) in rates.iter().enumerate() {
                let target = (rate * elapsed / 3600.0 + 1e-7).floor() as i64;
                let amount = target - released[r];
                if amount > 0 {
                    released[r] = target;
                    state.loaded_total += amount;
                    let first = net.route(r).segments[0];
                    state.origin_queues[first].push_back(Packet {
                        amount,
                        route: r as u32,
                        pos: 0,
                        entry_us: sigma,
                        exit_us: sigma,
                    });
                }
            }
            let mut merges = MergeRooms {
                room: (0..nseg).map(|n| self.storage[n] - state.occupancy[n]).collect(),
                claimed: Vec::new(),
            };
            for &seg in net.topo_order() {
                self.admit_origin(state, seg, sigma, &mut acc);
                self.discharge(state, seg, sigma, end, &mut merges, &mut acc);
            }
            state.clock_us = end;
        }
        self.intervals_simulated.fetch_add(1, Ordering::Relaxed);

        for (i, c) in acc.counts.iter().enumerate() {
            state.sensor_totals[i] += c;
        }
        let mean_speeds = (0..m)
            .map(|i| {
                if acc.time[i] > 0.0 {
                    acc.dist[i] / acc.time[i]
                } else {
                    let seg = net.sensors()[i].segment;
                    net.segments()[seg].speed(state.occupancy[seg] as f64 / MICRO as f64)
                }
            })
            .collect();
        let segment_travel_times = (0..nseg)
            .map(|s| {
                if acc.seg_veh[s] > 0.0 {
                    acc.seg_time[s] / acc.seg_veh[s]
                } else {
                    let seg = &net.segments()[s];
                    seg.length_m / seg.speed(state.occupancy[s] as f64 / MICRO as f64)
                }
            })
            .collect();
        Ok(IntervalOutput {
            frame: SensorFrame {
                interval,
                counts: acc.counts.iter().map(|c| *c as f64 / MICRO as f64).collect(),
                mean_speeds,
            },
            segment_travel_times,
        })
    }

    /// Steps `intervals` intervals from a copy of `state`.
    pub fn run_window(&self, state: &SimState, demand: &[Vec<f64>], intervals: usize) -> Result<Vec<IntervalOutput>> {
        if demand.len() < intervals {
            return Err(Error::IncompleteDemand {
                needed: intervals,
                got: demand.len(),
            });
        }
        let mut s = state.clone();
        demand[..intervals].iter().map(|d| self.step(&mut s, d)).collect()
    }

    fn admit_origin(&self, state: &mut SimState, seg: usize, sigma: i64, acc: &mut Accumulator) {
        while let Some(front) = state.origin_queues[seg].front_mut() {
            let room = self.storage[seg] - state.occupancy[seg];
            let mv = front.amount.min(room);
            if mv <= 0 {
                break;
            }
            let (route, pos, loaded_at) = (front.route, front.pos, front.entry_us);
            front.amount -= mv;
            if front.amount == 0 {
                state.origin_queues[seg].pop_front();
            }
            // Time spent waiting at the origin counts toward the first
            // segment's traversal.
            self.enter(state, seg, Arrival { amount: mv, route, pos, at: sigma, since: loaded_at }, acc);
        }
    }

    fn discharge(&self, state: &mut SimState, seg: usize, sigma: i64, end: i64, merges: &mut MergeRooms, acc: &mut Accumulator) {
        let net = &*self.network;
        let mut budget = (self.capacity[seg] * (end as i128) / US_PER_HOUR - self.capacity[seg] * (sigma as i128) / US_PER_HOUR) as i64;
        let length = net.segments()[seg].length_m;
        while let Some(front) = state.segments[seg].front().copied() {
            if front.exit_us >= end || budget <= 0 {
                break;
            }
            let cross = front.exit_us.max(sigma);
            let route = net.route(front.route as usize);
            let next = route.segments.get(front.pos as usize + 1).copied();
            let room = next.map_or(i64::MAX, |n| {
                let free = self.storage[n] - state.occupancy[n];
                match self.merge_capacity[n] {
                    Some(total) => free.min(merges.allowance(seg, n, self.capacity[seg], total)),
                    None => free,
                }
            });
            let mv = front.amount.min(budget).min(room);
            if mv <= 0 {
                break;
            }
            if let Some(n) = next.filter(|&n| self.merge_capacity[n].is_some()) {
                merges.claim(seg, n, mv);
            }
            let traversal = (cross - front.entry_us) as f64 / 1e6;
            for &i in &self.exit_sensors[seg] {
                acc.counts[i] += mv;
                acc.dist[i] += mv as f64 * length;
                acc.time[i] += mv as f64 * traversal.max(1e-6);
            }
            acc.seg_veh[seg] += mv as f64;
            acc.seg_time[seg] += mv as f64 * traversal;
            budget -= mv;
            state.occupancy[seg] -= mv;
            let head = state.segments[seg].front_mut().expect("front exists");
            head.amount -= mv;
            if head.amount == 0 {
                state.segments[seg].pop_front();
            }
            match next {
                Some(n) => self.enter(
                    state,
                    n,
                    Arrival { amount: mv, route: front.route, pos: front.pos + 1, at: cross, since: cross },
                    acc,
                ),
                None => state.exited_total += mv,
            }
        }
    }

    fn enter(&self, state: &mut SimState, seg: usize, arrival: Arrival, acc: &mut Accumulator) {
        let Arrival { amount, route, pos, at: time, since } = arrival;
        let s = &self.network.segments()[seg];
        // Vehicles already past their exit time stand in the queue at the
        // downstream end; the rest share the remaining length.
        let queued: i64 = state.segments[seg]
            .iter()
            .take_while(|p| p.exit_us < time)
            .map(|p| p.amount)
            .sum();
        let queue_share = (queued as f64 / self.storage[seg] as f64).min(0.99);
        let moving_len = s.length_m * (1.0 - queue_share);
        let moving = (state.occupancy[seg] - queued) as f64 / MICRO as f64;
        let speed = s.speed_at_density(moving / moving_len);
        let travel = moving_len / speed;
        let mut exit_us = time + (travel * 1e6).round() as i64;
        if let Some(back) = state.segments[seg].back() {
            exit_us = exit_us.max(back.exit_us);
        }
        for &i in &self.entry_sensors[seg] {
            acc.counts[i] += amount;
            acc.dist[i] += amount as f64 * s.length_m;
            acc.time[i] += amount as f64 * travel;
        }
        state.occupancy[seg] += amount;
        state.segments[seg].push_back(Packet {
            amount,
            route,
            pos,
            entry_us: since,
            exit_us,
        });
    }
}

struct Arrival {
    amount: i64,
    route: u32,
    pos: u16,
    at: i64,
    since: i64,
}

/// Room downstream of a merge is shared among the feeders in proportion to
/// their capacity, based on the room at the start of the substep.
struct MergeRooms {
    room: Vec<i64>,
    claimed: Vec<((usize, usize), i64)>,
}

impl MergeRooms {
    fn claimed_by(&self, up: usize, down: usize) -> i64 {
        self.claimed.iter().find(|(k, _)| *k == (up, down)).map_or(0, |(_, v)| *v)
    }

    fn allowance(&self, up: usize, down: usize, capacity: i128, total: i128) -> i64 {
        let share = (self.room[down].max(0) as i128 * capacity / total) as i64;
        share - self.claimed_by(up, down)
    }

    fn claim(&mut self, up: usize, down: usize, amount: i64) {
        match self.claimed.iter_mut().find(|(k, _)| *k == (up, down)) {
            Some((_, v)) => *v += amount,
            None => self.claimed.push(((up, down), amount)),
        }
    }
}

struct Accumulator {
    counts: Vec<i64>,
    dist: Vec<f64>,
    time: Vec<f64>,
    seg_veh: Vec<f64>,
    seg_time: Vec<f64>,
}
