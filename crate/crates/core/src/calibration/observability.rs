//! Which OD pairs a sensor layout can tell apart within a window.

use crate::error::{Error, Result};
use crate::gradient::IncidenceMatrix;
use crate::simulator::{Network, Route};

/// Free-flow seconds from departure to the first sensor on one of the OD's
/// routes that no other OD from the same origin passes. `None` when every
/// sensor on its routes is shared.
pub fn identifying_time(network: &Network, od: usize) -> Option<f64> {
    let target = &network.ods()[od];
    let shared_routes: Vec<&Route> = network
        .ods()
        .iter()
        .enumerate()
        .filter(|(o, other)| *o != od && other.origin == target.origin)
        .flat_map(|(_, other)| other.routes.iter())
        .collect();
    let shared: Vec<usize> = shared_routes
        .iter()
        .flat_map(|r| network.sensors_on_route(r))
        .map(|(s, _)| s)
        .collect();
    target
        .routes
        .iter()
        .filter(|r| r.share > 0.0)
        .filter_map(|r| {
            network
                .sensors_on_route(r)
                .into_iter()
                .find(|(s, _)| !shared.contains(s))
                .map(|(_, t)| t)
        })
        .min_by(f64::total_cmp)
}

/// OD pairs identified within `degree` intervals of `interval_s` seconds at
/// free flow.
pub fn distinguishable_od_count(network: &Network, interval_s: f64, degree: usize) -> usize {
    let window = degree as f64 * interval_s;
    (0..network.num_ods())
        .filter(|&od| identifying_time(network, od).is_some_and(|t| t < window))
        .count()
}

/// Counts for `degree = 1..=max_degree`.
pub fn observability_curve(network: &Network, interval_s: f64, max_degree: usize) -> Vec<usize> {
    (1..=max_degree)
        .map(|r| distinguishable_od_count(network, interval_s, r))
        .collect()
}

/// Which sensors each OD can reach at each lag, from its routes and free-flow
/// times. Departures spread over an interval reach a sensor `tt` seconds
/// downstream over the next `[tt, tt + interval)`; `slack` extra lags cover
/// queueing delay. Returns `lags` matrices of sensors x ODs.
pub fn route_incidence(network: &Network, interval_s: f64, lags: usize, slack: usize) -> Result<Vec<IncidenceMatrix>> {
    if !(interval_s > 0.0) || lags == 0 {
        return Err(Error::InvalidArgument("route incidence needs interval_s > 0 and lags >= 1".into()));
    }
    let (m, n) = (network.num_sensors(), network.num_ods());
    let mut rows = vec![vec![Vec::new(); m]; lags];
    for (od, pair) in network.ods().iter().enumerate() {
        for route in pair.routes.iter().filter(|r| r.share > 0.0) {
            for (sensor, tt) in network.sensors_on_route(route) {
                let first = (tt / interval_s).floor() as usize;
                let last = ((tt + interval_s) / interval_s).ceil() as usize - 1 + slack;
                for lag in first..=last.min(lags - 1) {
                    rows[lag][sensor].push(od);
                }
            }
        }
    }
    rows.into_iter().map(|r| IncidenceMatrix::from_rows(r, n)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{corridor_network, delay_network, ramp_grid_network, CorridorSupply, DelayLayout, RampGridSpec};

    #[test]
    fn origin_link_layout_identifies_both_immediately() {
        let net = delay_network(DelayLayout::OriginLinks).unwrap();
        assert_eq!(distinguishable_od_count(&net, 300.0, 1), 2);
    }

    #[test]
    fn shared_link_layout_needs_two_intervals() {
        let net = delay_network(DelayLayout::SharedLink).unwrap();
        assert_eq!(observability_curve(&net, 300.0, 3), vec![1, 2, 2]);
    }

    #[test]
    fn corridor_ods_identified_in_first_interval() {
        let net = corridor_network(&CorridorSupply::default()).unwrap();
        assert_eq!(distinguishable_od_count(&net, 300.0, 1), 2);
    }

    #[test]
    fn shared_link_incidence_by_lag() {
        let net = delay_network(DelayLayout::SharedLink).unwrap();
        let inc = route_incidence(&net, 300.0, 3, 0).unwrap();
        // s2 sees O2 at once; s3 sees both one interval later.
        assert_eq!(inc[0].to_dense(), nalgebra::DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]));
        assert_eq!(inc[1].to_dense(), nalgebra::DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 1.0]));
        assert_eq!(inc[2].nnz(), 0);
        let slack = route_incidence(&net, 300.0, 3, 1).unwrap();
        assert_eq!(slack[2].nnz(), 2);
    }

    #[test]
    fn unsensored_ods_are_never_distinguishable() {
        let net = ramp_grid_network(&RampGridSpec::default()).unwrap();
        let curve = observability_curve(&net, 300.0, 60);
        assert!(curve.windows(2).all(|w| w[0] <= w[1]));
        // ODs ending at the last node of each corridor have no sensor.
        assert_eq!(*curve.last().unwrap(), 210 - 10 * 6);
    }
}
