//! JSON roadnet and flow documents, laid out like CityFlow's files.
//!
//! Unknown fields are ignored on load. See `docs/formats.md` for the schema.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{DataError, FlowEntry, FlowSpec, Link, Phase, RoadNetwork};

#[derive(Serialize, Deserialize)]
struct RoadnetDoc {
    intersections: Vec<NodeDoc>,
    roads: Vec<RoadDoc>,
}

#[derive(Clone, Copy, Serialize, Deserialize)]
struct Point {
    x: f64,
    y: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct NodeDoc {
    id: String,
    point: Point,
    #[serde(rename = "virtual", default)]
    is_virtual: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    traffic_light: Option<TrafficLightDoc>,
}

#[derive(Serialize, Deserialize)]
struct TrafficLightDoc {
    lightphases: Vec<LightPhaseDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct LightPhaseDoc {
    #[serde(default)]
    available_movements: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct RoadDoc {
    id: String,
    start_intersection: String,
    end_intersection: String,
    #[serde(default)]
    points: Vec<Point>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    length: Option<f64>,
    lanes: Vec<LaneDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct LaneDoc {
    #[serde(default = "default_lane_width")]
    width: f64,
    max_speed: f64,
}

fn default_lane_width() -> f64 {
    3.0
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct FlowDoc {
    #[serde(default = "default_vehicle")]
    vehicle: Value,
    route: Vec<String>,
    interval: f64,
    start_time: f64,
    end_time: f64,
}

fn default_vehicle() -> Value {
    json!({
        "length": 5.0,
        "width": 2.0,
        "maxPosAcc": 2.0,
        "maxNegAcc": 4.5,
        "usualPosAcc": 2.0,
        "usualNegAcc": 4.5,
        "minGap": 2.5,
        "maxSpeed": super::DEFAULT_SPEED,
        "headwayTime": 2.0
    })
}

fn read(path: &Path) -> Result<String, DataError> {
    std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn parse_roadnet(text: &str) -> Result<RoadNetwork, DataError> {
    let doc: RoadnetDoc = serde_json::from_str(text).map_err(|e| DataError::Parse(e.to_string()))?;
    let mut nodes = Vec::with_capacity(doc.intersections.len());
    for node in &doc.intersections {
        let phases = node.traffic_light.as_ref().map_or(0, |t| t.lightphases.len());
        nodes.push((node.id.clone(), (node.point.x, node.point.y), !node.is_virtual, phases));
    }
    let index_of = |name: &str, road: &str| {
        doc.intersections
            .iter()
            .position(|n| n.id == name)
            .ok_or_else(|| DataError::Validation(format!("road {road} references unknown intersection {name}")))
    };
    let mut links = Vec::with_capacity(doc.roads.len());
    for (id, road) in doc.roads.iter().enumerate() {
        let from = index_of(&road.start_intersection, &road.id)?;
        let to = index_of(&road.end_intersection, &road.id)?;
        let length = match road.length {
            Some(l) => l,
            None if road.points.len() >= 2 => road
                .points
                .windows(2)
                .map(|w| ((w[1].x - w[0].x).powi(2) + (w[1].y - w[0].y).powi(2)).sqrt())
                .sum(),
            None => {
                let (a, b) = (doc.intersections[from].point, doc.intersections[to].point);
                ((b.x - a.x).powi(2) + (b.y - a.y).powi(2)).sqrt()
            }
        };
        let speed = road.lanes.first().map_or(0.0, |l| l.max_speed);
        links.push(Link {
            id,
            name: road.id.clone(),
            from,
            to,
            length,
            lane_count: road.lanes.len(),
            free_flow_speed: speed,
        });
    }
    RoadNetwork::new(nodes, links)
}

pub fn load_roadnet(path: &Path) -> Result<RoadNetwork, DataError> {
    parse_roadnet(&read(path)?)
}

pub fn roadnet_to_json(net: &RoadNetwork) -> String {
    let intersections = net
        .intersections
        .iter()
        .map(|x| NodeDoc {
            id: x.name.clone(),
            point: Point {
                x: x.position.0,
                y: x.position.1,
            },
            is_virtual: !x.signalized,
            traffic_light: x.signalized.then(|| TrafficLightDoc {
                lightphases: Phase::ALL
                    .iter()
                    .map(|p| LightPhaseDoc {
                        available_movements: p.movement_codes(),
                    })
                    .collect(),
            }),
        })
        .collect();
    let roads = net
        .links
        .iter()
        .map(|l| {
            let (a, b) = (&net.intersections[l.from], &net.intersections[l.to]);
            RoadDoc {
                id: l.name.clone(),
                start_intersection: a.name.clone(),
                end_intersection: b.name.clone(),
                points: vec![
                    Point {
                        x: a.position.0,
                        y: a.position.1,
                    },
                    Point {
                        x: b.position.0,
                        y: b.position.1,
                    },
                ],
                length: Some(l.length),
                lanes: (0..l.lane_count)
                    .map(|_| LaneDoc {
                        width: default_lane_width(),
                        max_speed: l.free_flow_speed,
                    })
                    .collect(),
            }
        })
        .collect();
    let mut s = serde_json::to_string_pretty(&RoadnetDoc { intersections, roads }).expect("serializable");
    s.push('\n');
    s
}

/// Parses a flow document and checks its intrinsic invariants. Route
/// contiguity needs a network; see [`FlowSpec::resolve`].
pub fn parse_flow(text: &str) -> Result<FlowSpec, DataError> {
    let docs: Vec<FlowDoc> = serde_json::from_str(text).map_err(|e| DataError::Parse(e.to_string()))?;
    let spec = FlowSpec {
        flows: docs
            .into_iter()
            .map(|d| FlowEntry {
                route: d.route,
                interval: d.interval,
                start_time: d.start_time,
                end_time: d.end_time,
            })
            .collect(),
    };
    spec.check()?;
    Ok(spec)
}

/// Loads a flow file; when `net` is given, routes are validated against it.
pub fn load_flow(path: &Path, net: Option<&RoadNetwork>) -> Result<FlowSpec, DataError> {
    let spec = parse_flow(&read(path)?)?;
    if let Some(net) = net {
        spec.resolve(net)?;
    }
    Ok(spec)
}

pub fn flow_to_json(flow: &FlowSpec) -> String {
    let docs: Vec<FlowDoc> = flow
        .flows
        .iter()
        .map(|f| FlowDoc {
            vehicle: default_vehicle(),
            route: f.route.clone(),
            interval: f.interval,
            start_time: f.start_time,
            end_time: f.end_time,
        })
        .collect();
    let mut s = serde_json::to_string_pretty(&docs).expect("serializable");
    s.push('\n');
    s
}
