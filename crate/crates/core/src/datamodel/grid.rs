//! Synthetic grid scenarios.
//!
//! Signalized intersection `(x, y)` sits at `(300 x, 300 y)` for
//! `1 <= x <= cols`, `1 <= y <= rows`; y grows northward. Each row and column
//! ends in a virtual boundary node on both sides. Links are named
//! `road_<x>_<y>_<d>` after their start node and heading `d` (0 east,
//! 1 north, 2 west, 3 south).

use super::{DataError, FlowEntry, FlowSpec, Link, RoadNetwork, PHASE_COUNT};

pub const DEFAULT_LINK_LENGTH: f64 = 300.0;
/// 60 km/h, so a 300 m link takes 18 s.
pub const DEFAULT_SPEED: f64 = 16.67;
const LANES: usize = 3;
const HORIZON: f64 = 3600.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowMode {
    /// Only W->E and N->S streams.
    Unidirectional,
    /// W<->E and S<->N streams.
    Bidirectional,
}

impl std::str::FromStr for FlowMode {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uni" | "unidirectional" => Ok(FlowMode::Unidirectional),
            "bi" | "bidirectional" => Ok(FlowMode::Bidirectional),
            other => Err(DataError::InvalidArgument(format!("unknown flow mode {other:?}"))),
        }
    }
}

fn node_name(x: usize, y: usize) -> String {
    format!("intersection_{x}_{y}")
}

fn road_name(x: usize, y: usize, heading: usize) -> String {
    format!("road_{x}_{y}_{heading}")
}

/// Builds a `rows x cols` grid and its straight-corridor flows.
///
/// Each corridor direction gets one stream on its through lane with
/// interval `3600 / rate`; a zero rate produces no stream.
pub fn generate_grid(
    rows: usize,
    cols: usize,
    mode: FlowMode,
    we_rate: f64,
    sn_rate: f64,
) -> Result<(RoadNetwork, FlowSpec), DataError> {
    if rows == 0 || cols == 0 {
        return Err(DataError::InvalidArgument(format!("grid dimensions must be positive, got {rows}x{cols}")));
    }
    if !(we_rate >= 0.0) || !(sn_rate >= 0.0) {
        return Err(DataError::InvalidArgument("arrival rates must be non-negative".into()));
    }

    let mut coords = Vec::new();
    for y in 1..=rows {
        for x in 1..=cols {
            coords.push((x, y, true));
        }
    }
    for y in 1..=rows {
        coords.push((0, y, false));
        coords.push((cols + 1, y, false));
    }
    for x in 1..=cols {
        coords.push((x, 0, false));
        coords.push((x, rows + 1, false));
    }
    let index_of = |x: usize, y: usize| coords.iter().position(|&(cx, cy, _)| cx == x && cy == y);
    let nodes = coords
        .iter()
        .map(|&(x, y, signalized)| {
            let pos = (x as f64 * DEFAULT_LINK_LENGTH, y as f64 * DEFAULT_LINK_LENGTH);
            (node_name(x, y), pos, signalized, if signalized { PHASE_COUNT } else { 0 })
        })
        .collect();

    let mut links = Vec::new();
    for (from, &(x, y, _)) in coords.iter().enumerate() {
        let neighbours = [
            (Some(x + 1), Some(y)),
            (Some(x), Some(y + 1)),
            (x.checked_sub(1), Some(y)),
            (Some(x), y.checked_sub(1)),
        ];
        for (heading, (nx, ny)) in neighbours.into_iter().enumerate() {
            let (Some(nx), Some(ny)) = (nx, ny) else { continue };
            let Some(to) = index_of(nx, ny) else { continue };
            // Boundary nodes only connect to their single grid neighbour.
            if !coords[from].2 && !coords[to].2 {
                continue;
            }
            links.push(Link {
                id: links.len(),
                name: road_name(x, y, heading),
                from,
                to,
                length: DEFAULT_LINK_LENGTH,
                lane_count: LANES,
                free_flow_speed: DEFAULT_SPEED,
            });
        }
    }
    let net = RoadNetwork::new(nodes, links)?;

    let mut flows = Vec::new();
    let mut corridor = |route: Vec<String>, rate: f64| {
        if rate > 0.0 {
            flows.push(FlowEntry {
                route,
                interval: 3600.0 / rate,
                start_time: 0.0,
                end_time: HORIZON,
            });
        }
    };
    let bi = mode == FlowMode::Bidirectional;
    for y in 1..=rows {
        corridor((0..=cols).map(|x| road_name(x, y, 0)).collect(), we_rate);
        if bi {
            corridor((1..=cols + 1).rev().map(|x| road_name(x, y, 2)).collect(), we_rate);
        }
    }
    for x in 1..=cols {
        corridor((1..=rows + 1).rev().map(|y| road_name(x, y, 3)).collect(), sn_rate);
        if bi {
            corridor((0..=rows).map(|y| road_name(x, y, 1)).collect(), sn_rate);
        }
    }
    let flow = FlowSpec { flows };
    flow.resolve(&net)?;
    Ok((net, flow))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{parse_flow, parse_roadnet, roadnet_to_json, Approach};

    #[test]
    fn two_by_two_counts() {
        let (net, _) = generate_grid(2, 2, FlowMode::Bidirectional, 300.0, 90.0).unwrap();
        assert_eq!(net.agent_count(), 4);
        assert_eq!(net.intersections.len(), 12);
        // 8 interior directed links, 16 directed boundary links; 12 road segments.
        let boundary = net.links.iter().filter(|l| net.is_boundary(l)).count();
        assert_eq!(boundary, 16);
        assert_eq!(net.links.len(), 24);
        assert_eq!(net.road_segment_count(), 12);
    }

    #[test]
    fn six_by_six_bidirectional_rates() {
        let (net, flow) = generate_grid(6, 6, FlowMode::Bidirectional, 300.0, 90.0).unwrap();
        assert_eq!(net.agent_count(), 36);
        assert_eq!(flow.len(), 24);
        for f in &flow.flows {
            let horizontal = f.route[0].ends_with("_0") || f.route[0].ends_with("_2");
            assert_eq!(f.interval, if horizontal { 12.0 } else { 40.0 });
        }
        for a in 0..36 {
            let node = net.agent(a);
            assert!(node.approaches.iter().all(Option::is_some));
            assert!(node.exits.iter().all(Option::is_some));
            assert_eq!(node.movement_table.len(), 12);
        }
    }

    #[test]
    fn unidirectional_single_intersection() {
        let (net, flow) = generate_grid(1, 1, FlowMode::Unidirectional, 300.0, 90.0).unwrap();
        assert_eq!(net.agent_count(), 1);
        assert_eq!(flow.len(), 2);
        let routes = flow.resolve(&net).unwrap();
        let heading = |ids: &[usize]| {
            let l = &net.links[ids[0]];
            Approach::toward(net.intersections[l.from].position, net.intersections[l.to].position).unwrap()
        };
        assert_eq!(heading(&routes[0]), Approach::E);
        assert_eq!(heading(&routes[1]), Approach::S);
    }

    #[test]
    fn zero_rates_give_empty_flow() {
        let (net, flow) = generate_grid(2, 3, FlowMode::Bidirectional, 0.0, 0.0).unwrap();
        assert_eq!(net.agent_count(), 6);
        assert!(flow.is_empty());
    }

    #[test]
    fn zero_dimension_is_rejected() {
        assert!(matches!(
            generate_grid(0, 3, FlowMode::Bidirectional, 300.0, 90.0),
            Err(DataError::InvalidArgument(_))
        ));
    }

    #[test]
    fn adjacency_degrees() {
        let (net, _) = generate_grid(3, 4, FlowMode::Bidirectional, 300.0, 90.0).unwrap();
        assert_eq!(net.agent_count(), 12);
        for a in 0..12 {
            let (x, y) = (a % 4 + 1, a / 4 + 1);
            let interior = (2..=3).contains(&x) && y == 2;
            if interior {
                assert_eq!(net.degree(a), 4);
            }
            for b in 0..12 {
                assert_eq!(net.adjacency[a][b], net.adjacency[b][a]);
            }
        }
    }

    #[test]
    fn discontiguous_route_is_rejected() {
        let (net, mut flow) = generate_grid(2, 2, FlowMode::Unidirectional, 300.0, 90.0).unwrap();
        flow.flows[0].route = vec!["road_0_1_0".into(), "road_2_2_3".into()];
        assert!(matches!(flow.resolve(&net), Err(DataError::Validation(_))));
    }

    #[test]
    fn round_trip_reproduces_network() {
        let (net, flow) = generate_grid(3, 2, FlowMode::Bidirectional, 300.0, 90.0).unwrap();
        let text = roadnet_to_json(&net);
        assert_eq!(parse_roadnet(&text).unwrap(), net);
        assert_eq!(parse_flow(&crate::datamodel::flow_to_json(&flow)).unwrap(), flow);
    }
}
