//! Road networks, traffic flows, file loaders and grid generators.

mod format;
mod grid;

use std::fmt;

use thiserror::Error;

pub use format::{flow_to_json, load_flow, load_roadnet, parse_flow, parse_roadnet, roadnet_to_json};
pub use grid::{generate_grid, FlowMode, DEFAULT_LINK_LENGTH, DEFAULT_SPEED};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Compass side of an intersection. For an incoming link this is the side
/// the traffic arrives from; for an outgoing link the side it leaves toward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Approach {
    E = 0,
    S = 1,
    W = 2,
    N = 3,
}

impl Approach {
    pub const ALL: [Approach; 4] = [Approach::E, Approach::S, Approach::W, Approach::N];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i % 4]
    }

    pub fn opposite(self) -> Self {
        Self::from_index(self.index() + 2)
    }

    /// Side reached by turning `movement` after arriving from `self`.
    pub fn exit_for(self, movement: Movement) -> Self {
        match movement {
            Movement::Through => self.opposite(),
            Movement::Left => Self::from_index(self.index() + 1),
            Movement::Right => Self::from_index(self.index() + 3),
        }
    }

    /// Side of `origin` on which `target` lies (dominant axis, y pointing north).
    pub fn toward(origin: (f64, f64), target: (f64, f64)) -> Option<Self> {
        let dx = target.0 - origin.0;
        let dy = target.1 - origin.1;
        if dx == 0.0 && dy == 0.0 {
            return None;
        }
        Some(if dx.abs() >= dy.abs() {
            if dx > 0.0 {
                Approach::E
            } else {
                Approach::W
            }
        } else if dy > 0.0 {
            Approach::N
        } else {
            Approach::S
        })
    }
}

impl fmt::Display for Approach {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Approach::E => "E",
            Approach::S => "S",
            Approach::W => "W",
            Approach::N => "N",
        };
        f.write_str(s)
    }
}

/// Maneuver through an intersection. The order is the per-approach lane
/// order used in observations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Movement {
    Through = 0,
    Left = 1,
    Right = 2,
}

impl Movement {
    pub const ALL: [Movement; 3] = [Movement::Through, Movement::Left, Movement::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Lane position on a three-lane link, innermost first: left, through, right.
    pub fn lane_position(self) -> usize {
        match self {
            Movement::Left => 0,
            Movement::Through => 1,
            Movement::Right => 2,
        }
    }

    pub fn from_lane_position(lane: usize) -> Option<Self> {
        match lane {
            0 => Some(Movement::Left),
            1 => Some(Movement::Through),
            2 => Some(Movement::Right),
            _ => None,
        }
    }

    /// Movement needed to go from arriving on `from` to leaving toward `to`.
    pub fn between(from: Approach, to: Approach) -> Option<Self> {
        Movement::ALL.into_iter().find(|&m| from.exit_for(m) == to)
    }

    pub fn code(self) -> char {
        match self {
            Movement::Through => 'T',
            Movement::Left => 'L',
            Movement::Right => 'R',
        }
    }
}

/// Signal phase, numbered 1..=4.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Phase(u8);

pub const PHASE_COUNT: usize = 4;

impl Phase {
    pub const ALL: [Phase; 4] = [Phase(1), Phase(2), Phase(3), Phase(4)];

    pub fn new(id: u8) -> Option<Self> {
        (1..=PHASE_COUNT as u8).contains(&id).then_some(Phase(id))
    }

    pub fn id(self) -> u8 {
        self.0
    }

    /// 0-based index, for one-hot encodings and action outputs.
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    pub fn from_index(i: usize) -> Self {
        Phase(i as u8 + 1)
    }

    /// The two non-conflicting through/left movements this phase serves.
    /// Right turns are served under every phase and are not listed.
    pub fn movements(self) -> [(Approach, Movement); 2] {
        use Approach::*;
        use Movement::*;
        match self.0 {
            1 => [(E, Through), (W, Through)],
            2 => [(E, Left), (W, Left)],
            3 => [(S, Through), (N, Through)],
            _ => [(N, Left), (S, Left)],
        }
    }

    pub fn enables(self, approach: Approach, movement: Movement) -> bool {
        movement == Movement::Right || self.movements().contains(&(approach, movement))
    }

    /// Movement codes such as `ET`, used by the roadnet format.
    pub fn movement_codes(self) -> Vec<String> {
        self.movements()
            .iter()
            .map(|(a, m)| format!("{a}{}", m.code()))
            .collect()
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Lane `lane` (innermost = 0) of link `link`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LaneId {
    pub link: usize,
    pub lane: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Link {
    pub id: usize,
    pub name: String,
    pub from: usize,
    pub to: usize,
    pub length: f64,
    pub lane_count: usize,
    pub free_flow_speed: f64,
}

impl Link {
    /// Whole seconds needed to traverse the link at free-flow speed.
    pub fn travel_seconds(&self) -> u32 {
        let t = self.length / self.free_flow_speed;
        // 300 m at 16.67 m/s is 17.996 s; treat it as 18 s.
        (t - 1e-6).ceil().max(1.0) as u32
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MovementEntry {
    pub lane: LaneId,
    pub approach: Approach,
    pub movement: Movement,
    /// Link the movement leads onto; `None` when that exit does not exist.
    pub outgoing: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Intersection {
    pub id: usize,
    pub name: String,
    pub position: (f64, f64),
    pub signalized: bool,
    pub phase_count: usize,
    /// Incoming link per approach, indexed by [`Approach::index`].
    pub approaches: [Option<usize>; 4],
    /// Outgoing link per side, indexed by [`Approach::index`].
    pub exits: [Option<usize>; 4],
    pub incoming_lanes: Vec<LaneId>,
    pub outgoing_lanes: Vec<LaneId>,
    pub movement_table: Vec<MovementEntry>,
}

impl Intersection {
    pub fn outgoing_for(&self, approach: Approach, movement: Movement) -> Option<usize> {
        self.exits[approach.exit_for(movement).index()]
    }
}

/// Intersections, directed links and the agent adjacency matrix.
///
/// Agents are the signalized intersections in list order; `adjacency` is
/// indexed by agent, not by intersection id.
#[derive(Clone, Debug, PartialEq)]
pub struct RoadNetwork {
    pub intersections: Vec<Intersection>,
    pub links: Vec<Link>,
    pub adjacency: Vec<Vec<u8>>,
    agents: Vec<usize>,
}

impl RoadNetwork {
    /// Builds and validates a network. Intersection and link ids are their
    /// list positions; approach tables are derived from geometry.
    pub fn new(
        nodes: Vec<(String, (f64, f64), bool, usize)>,
        links: Vec<Link>,
    ) -> Result<Self, DataError> {
        let n = nodes.len();
        for (i, link) in links.iter().enumerate() {
            if link.id != i {
                return Err(DataError::Validation(format!("link {} has id {} at position {i}", link.name, link.id)));
            }
            if link.from >= n || link.to >= n {
                return Err(DataError::Validation(format!(
                    "link {} references an unknown intersection",
                    link.name
                )));
            }
            if link.from == link.to {
                return Err(DataError::Validation(format!("link {} is a self-loop", link.name)));
            }
            if !(link.length > 0.0) {
                return Err(DataError::Validation(format!("link {} has non-positive length", link.name)));
            }
            if link.lane_count == 0 {
                return Err(DataError::Validation(format!("link {} has no lanes", link.name)));
            }
            if !(link.free_flow_speed > 0.0) {
                return Err(DataError::Validation(format!("link {} has non-positive speed", link.name)));
            }
        }

        let mut intersections = Vec::with_capacity(n);
        for (id, (name, position, signalized, phase_count)) in nodes.into_iter().enumerate() {
            if signalized && phase_count != PHASE_COUNT {
                return Err(DataError::Validation(format!(
                    "signalized intersection {name} has {phase_count} phases, expected {PHASE_COUNT}"
                )));
            }
            intersections.push(Intersection {
                id,
                name,
                position,
                signalized,
                phase_count: if signalized { PHASE_COUNT } else { 0 },
                approaches: [None; 4],
                exits: [None; 4],
                incoming_lanes: Vec::new(),
                outgoing_lanes: Vec::new(),
                movement_table: Vec::new(),
            });
        }

        for link in &links {
            let (from_pos, to_pos) = (intersections[link.from].position, intersections[link.to].position);
            let side_in = Approach::toward(to_pos, from_pos)
                .ok_or_else(|| DataError::Validation(format!("link {} has coincident endpoints", link.name)))?;
            let side_out = side_in.opposite();
            let head = &mut intersections[link.to];
            if head.approaches[side_in.index()].replace(link.id).is_some() && head.signalized {
                return Err(DataError::Validation(format!(
                    "intersection {} has two incoming links from {side_in}",
                    head.name
                )));
            }
            head.incoming_lanes.extend((0..link.lane_count).map(|lane| LaneId { link: link.id, lane }));
            let tail = &mut intersections[link.from];
            if tail.exits[side_out.index()].replace(link.id).is_some() && tail.signalized {
                return Err(DataError::Validation(format!(
                    "intersection {} has two outgoing links toward {side_out}",
                    tail.name
                )));
            }
            tail.outgoing_lanes.extend((0..link.lane_count).map(|lane| LaneId { link: link.id, lane }));
        }

        for node in intersections.iter_mut().filter(|x| x.signalized) {
            for approach in Approach::ALL {
                let Some(link_id) = node.approaches[approach.index()] else { continue };
                let link = &links[link_id];
                if link.lane_count != Movement::ALL.len() {
                    return Err(DataError::Validation(format!(
                        "link {} enters signalized {} with {} lanes, expected 3",
                        link.name, node.name, link.lane_count
                    )));
                }
                for lane in 0..link.lane_count {
                    let movement = Movement::from_lane_position(lane).expect("three lanes");
                    node.movement_table.push(MovementEntry {
                        lane: LaneId { link: link_id, lane },
                        approach,
                        movement,
                        outgoing: node.exits[approach.exit_for(movement).index()],
                    });
                }
            }
        }

        let agents: Vec<usize> = intersections.iter().filter(|x| x.signalized).map(|x| x.id).collect();
        let mut agent_of = vec![usize::MAX; intersections.len()];
        for (a, &id) in agents.iter().enumerate() {
            agent_of[id] = a;
        }
        let mut adjacency = vec![vec![0u8; agents.len()]; agents.len()];
        for link in &links {
            let (a, b) = (agent_of[link.from], agent_of[link.to]);
            if a != usize::MAX && b != usize::MAX {
                adjacency[a][b] = 1;
                adjacency[b][a] = 1;
            }
        }

        Ok(Self {
            intersections,
            links,
            adjacency,
            agents,
        })
    }

    /// Intersection ids of the signalized intersections (agents), in order.
    pub fn agents(&self) -> &[usize] {
        &self.agents
    }

    pub fn agent_count(&self) -> usize {
        self.agents.len()
    }

    pub fn agent(&self, agent: usize) -> &Intersection {
        &self.intersections[self.agents[agent]]
    }

    pub fn link_by_name(&self, name: &str) -> Option<&Link> {
        self.links.iter().find(|l| l.name == name)
    }

    pub fn is_boundary(&self, link: &Link) -> bool {
        !self.intersections[link.from].signalized || !self.intersections[link.to].signalized
    }

    /// Undirected road segments: opposite-direction link pairs count once.
    pub fn road_segment_count(&self) -> usize {
        let mut pairs: Vec<(usize, usize)> = self
            .links
            .iter()
            .map(|l| (l.from.min(l.to), l.from.max(l.to)))
            .collect();
        pairs.sort_unstable();
        pairs.dedup();
        pairs.len()
    }

    pub fn degree(&self, agent: usize) -> usize {
        self.adjacency[agent].iter().map(|&x| x as usize).sum()
    }
}

/// One spawn stream: a vehicle every `interval` seconds on `route`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowEntry {
    /// Link names, in travel order.
    pub route: Vec<String>,
    pub interval: f64,
    pub start_time: f64,
    pub end_time: f64,
}

impl FlowEntry {
    /// Vehicles per hour implied by the spawn interval.
    pub fn hourly_rate(&self) -> f64 {
        3600.0 / self.interval
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlowSpec {
    pub flows: Vec<FlowEntry>,
}

impl FlowSpec {
    pub fn len(&self) -> usize {
        self.flows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flows.is_empty()
    }

    /// Checks intrinsic invariants (positive interval, ordered window,
    /// non-empty route).
    pub fn check(&self) -> Result<(), DataError> {
        for (i, f) in self.flows.iter().enumerate() {
            if f.route.is_empty() {
                return Err(DataError::Validation(format!("flow {i} has an empty route")));
            }
            if !(f.interval > 0.0) || !f.interval.is_finite() {
                return Err(DataError::Validation(format!("flow {i} has non-positive interval")));
            }
            if !(f.start_time <= f.end_time) {
                return Err(DataError::Validation(format!("flow {i} starts after it ends")));
            }
        }
        Ok(())
    }

    /// Resolves every route to link ids and checks contiguity against `net`.
    pub fn resolve(&self, net: &RoadNetwork) -> Result<Vec<Vec<usize>>, DataError> {
        self.check()?;
        self.flows
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let ids = f
                    .route
                    .iter()
                    .map(|name| {
                        net.link_by_name(name)
                            .map(|l| l.id)
                            .ok_or_else(|| DataError::Validation(format!("flow {i} references unknown link {name}")))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                for w in ids.windows(2) {
                    let (a, b) = (&net.links[w[0]], &net.links[w[1]]);
                    if a.to != b.from {
                        return Err(DataError::Validation(format!(
                            "flow {i}: route is discontiguous between {} and {}",
                            a.name, b.name
                        )));
                    }
                    let node = &net.intersections[a.to];
                    if node.signalized {
                        let from = Approach::toward(node.position, net.intersections[a.from].position);
                        let to = Approach::toward(node.position, net.intersections[b.to].position);
                        let turn = from.zip(to).and_then(|(f, t)| Movement::between(f, t));
                        if turn.is_none() {
                            return Err(DataError::Validation(format!(
                                "flow {i}: no movement from {} onto {}",
                                a.name, b.name
                            )));
                        }
                    }
                }
                Ok(ids)
            })
            .collect()
    }
}
