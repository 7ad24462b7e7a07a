//! Static network description: segments, routes, OD pairs and sensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MPH_TO_MPS: f64 = 0.44704;
/// Speed floor of the speed-density relation.
pub const MIN_SPEED_MPS: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub id: String,
    pub from: String,
    pub to: String,
    pub length_m: f64,
    pub free_speed_mps: f64,
    pub capacity_vph: f64,
    /// Vehicles the segment holds at jam density.
    pub storage_veh: f64,
}

impl Segment {
    pub fn new(id: &str, from: &str, to: &str, length_m: f64, free_speed_mph: f64, capacity_vph: f64, storage_veh: f64) -> Self {
        Self {
            id: id.into(),
            from: from.into(),
            to: to.into(),
            length_m,
            free_speed_mps: free_speed_mph * MPH_TO_MPS,
            capacity_vph,
            storage_veh,
        }
    }

    pub fn free_flow_time(&self) -> f64 {
        self.length_m / self.free_speed_mps
    }

    /// Speed on the current occupancy spread over the whole length.
    pub fn speed(&self, occupancy_veh: f64) -> f64 {
        self.speed_at_density(occupancy_veh.max(0.0) / self.length_m)
    }

    /// Free speed up to the critical density, then the speed that keeps the
    /// flow at capacity, floored at [`MIN_SPEED_MPS`].
    pub fn speed_at_density(&self, k: f64) -> f64 {
        let q_max = self.capacity_vph / 3600.0;
        if k * self.free_speed_mps <= q_max {
            return self.free_speed_mps;
        }
        (q_max / k).clamp(MIN_SPEED_MPS, self.free_speed_mps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SensorPosition {
    Entry,
    #[default]
    Exit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sensor {
    pub id: String,
    pub segment: usize,
    pub position: SensorPosition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub segments: Vec<usize>,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdPair {
    pub id: String,
    pub origin: String,
    pub destination: String,
    pub routes: Vec<Route>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    segments: Vec<Segment>,
    ods: Vec<OdPair>,
    sensors: Vec<Sensor>,
    topo_order: Vec<usize>,
    /// Flattened (od, route) pairs, the unit of loading.
    route_index: Vec<(usize, usize)>,
}

impl Network {
    pub fn new(segments: Vec<Segment>, ods: Vec<OdPair>, sensors: Vec<Sensor>) -> Result<Self> {
        for s in &segments {
            let ok = s.length_m > 0.0 && s.free_speed_mps > 0.0 && s.capacity_vph > 0.0 && s.storage_veh > 0.0;
            if !ok || ![s.length_m, s.free_speed_mps, s.capacity_vph, s.storage_veh].iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "segment {} needs positive finite length, speed, capacity and storage",
                    s.id
                )));
            }
        }
        let mut route_index = Vec::new();
        for (o, od) in ods.iter().enumerate() {
            if od.routes.is_empty() {
                return Err(Error::InvalidArgument(format!("OD {} has no route", od.id)));
            }
            let total: f64 = od.routes.iter().map(|r| r.share).sum();
            if od.routes.iter().any(|r| !(r.share >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("route shares of OD {} must be >= 0 and sum to 1", od.id)));
            }
            for (k, r) in od.routes.iter().enumerate() {
                validate_route(&segments, od, r)?;
                route_index.push((o, k));
            }
        }
        for s in &sensors {
            if s.segment >= segments.len() {
                return Err(Error::InvalidArgument(format!("sensor {} refers to a missing segment", s.id)));
            }
        }
        let topo_order = topological_order(&segments)?;
        Ok(Self {
            segments,
            ods,
            sensors,
            topo_order,
            route_index,
        })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn ods(&self) -> &[OdPair] {
        &self.ods
    }

    pub fn sensors(&self) -> &[Sensor] {
        &self.sensors
    }

    pub fn num_ods(&self) -> usize {
        self.ods.len()
    }

    pub fn num_sensors(&self) -> usize {
        self.sensors.len()
    }

    pub fn topo_order(&self) -> &[usize] {
        &self.topo_order
    }

    /// (od, route) for each flattened route id.
    pub fn route_index(&self) -> &[(usize, usize)] {
        &self.route_index
    }

    pub fn route(&self, flat: usize) -> &Route {
        let (o, k) = self.route_index[flat];
        &self.ods[o].routes[k]
    }

    pub fn segment_index(&self, id: &str) -> Option<usize> {
        self.segments.iter().position(|s| s.id == id)
    }

    /// Same network with a different sensor layout.
    pub fn with_sensors(&self, sensors: Vec<Sensor>) -> Result<Self> {
        Self::new(self.segments.clone(), self.ods.clone(), sensors)
    }

    /// Free-flow time from the route start to each sensor it passes, in
    /// route order, as (sensor index, seconds).
    pub fn sensors_on_route(&self, route: &Route) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        let mut t = 0.0;
        for &seg in &route.segments {
            let tt = self.segments[seg].free_flow_time();
            for (i, s) in self.sensors.iter().enumerate() {
                if s.segment == seg && s.position == SensorPosition::Entry {
                    out.push((i, t));
                }
            }
            for (i, s) in self.sensors.iter().enumerate() {
                if s.segment == seg && s.position == SensorPosition::Exit {
                    out.push((i, t + tt));
                }
            }
            t += tt;
        }
        out
    }

    pub fn route_free_flow_time(&self, route: &Route) -> f64 {
        route.segments.iter().map(|&s| self.segments[s].free_flow_time()).sum()
    }
}

fn validate_route(segments: &[Segment], od: &OdPair, r: &Route) -> Result<()> {
    let bad = |msg: &str| Err(Error::InvalidArgument(format!("route of OD {}: {msg}", od.id)));
    let Some((&first, rest)) = r.segments.split_first() else {
        return bad("empty route");
    };
    if r.segments.iter().any(|&s| s >= segments.len()) {
        return bad("unknown segment");
    }
    if segments[first].from != od.origin {
        return bad("does not start at the origin");
    }
    let mut at = &segments[first].to;
    for &s in rest {
        if &segments[s].from != at {
            return bad("segments are not connected");
        }
        at = &segments[s].to;
    }
    if at != &od.destination {
        return bad("does not end at the destination");
    }
    Ok(())
}

/// Upstream-first order; the segment graph must be acyclic.
fn topological_order(segments: &[Segment]) -> Result<Vec<usize>> {
    let n = segments.len();
    let mut indeg = vec![0usize; n];
    let mut succ = vec![Vec::new(); n];
    for (a, sa) in segments.iter().enumerate() {
        for (b, sb) in segments.iter().enumerate() {
            if sa.to == sb.from {
                succ[a].push(b);
                indeg[b] += 1;
            }
        }
    }
    let mut ready: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).rev().collect();
    let mut order = Vec::with_capacity(n);
    while let Some(a) = ready.pop() {
        order.push(a);
        for &b in succ[a].iter().rev() {
            indeg[b] -= 1;
            if indeg[b] == 0 {
                ready.push(b);
            }
        }
    }
    if order.len() != n {
        return Err(Error::InvalidArgument("segment graph has a cycle".into()));
    }
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn speed_is_free_flow_below_critical_density() {
        let s = Segment::new("a", "x", "y", 1000.0, 50.0, 3600.0, 200.0);
        assert_eq!(s.speed(0.0), s.free_speed_mps);
        assert_eq!(s.speed(40.0), s.free_speed_mps);
        assert!(s.speed(150.0) < s.free_speed_mps);
        assert_eq!(s.speed(5000.0), MIN_SPEED_MPS);
    }

    #[test]
    fn congested_speed_carries_capacity() {
        let s = Segment::new("a", "x", "y", 1000.0, 50.0, 3600.0, 200.0);
        for occ in [60.0, 100.0, 199.0] {
            let flow = s.speed(occ) * (occ / 1000.0) * 3600.0;
            assert_abs_diff_eq!(flow, 3600.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn cycle_rejected() {
        let segs = vec![
            Segment::new("a", "x", "y", 100.0, 50.0, 1000.0, 10.0),
            Segment::new("b", "y", "x", 100.0, 50.0, 1000.0, 10.0),
        ];
        assert!(Network::new(segs, vec![], vec![]).is_err());
    }

    #[test]
    fn disconnected_route_rejected() {
        let segs = vec![
            Segment::new("a", "x", "y", 100.0, 50.0, 1000.0, 10.0),
            Segment::new("b", "z", "w", 100.0, 50.0, 1000.0, 10.0),
        ];
        let od = OdPair {
            id: "xw".into(),
            origin: "x".into(),
            destination: "w".into(),
            routes: vec![Route { segments: vec![0, 1], share: 1.0 }],
        };
        assert!(Network::new(segs, vec![od], vec![]).is_err());
    }
}
