//! Procedural navigation worlds: viewpoint graphs on a per-level grid with
//! 8-neighbour edges and stairs, panoramas with planted object labels,
//! templated instructions over ground-truth shortest paths, and the
//! navigation metrics.

mod episode;
mod generate;
mod metrics;
mod nav;

pub use episode::{generate_episode, generate_episodes, Episode, EpisodeFile, InstructionStep, Split, EPISODE_FORMAT_VERSION};
pub use generate::{generate_world, generate_world_with, WorldSpec};
pub use metrics::{aggregate_metrics, evaluate_trajectory, AggregateMetrics, NavMetrics};
pub use nav::{panorama_at, step, Candidate, NavState, Panorama, TrajectoryRecord, TrajectoryStep, View};

use std::collections::{BinaryHeap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::concept::Direction;
use crate::error::{Error, Result};

pub const WORLD_FORMAT_VERSION: u32 = 1;
pub const HORIZONTAL_VIEWS: usize = 8;
/// Index of the upward view in multi-level worlds; the downward view follows it.
pub const UP_VIEW: usize = 8;
pub const DOWN_VIEW: usize = 9;
pub const STAIR_ELEVATION: f64 = std::f64::consts::FRAC_PI_4;

/// Heading of compass index `k` (0 = +y, clockwise).
pub fn compass_heading(k: usize) -> f64 {
    (k % HORIZONTAL_VIEWS) as f64 * std::f64::consts::FRAC_PI_4
}

/// Compass index of a unit grid offset.
pub(crate) fn compass_index(dx: i32, dy: i32) -> Option<usize> {
    match (dx, dy) {
        (0, 1) => Some(0),
        (1, 1) => Some(1),
        (1, 0) => Some(2),
        (1, -1) => Some(3),
        (0, -1) => Some(4),
        (-1, -1) => Some(5),
        (-1, 0) => Some(6),
        (-1, 1) => Some(7),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: usize,
    pub level: usize,
    pub x: i32,
    pub y: i32,
    /// Label seen when looking at this node from a neighbour.
    pub room: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub heading: f64,
    pub elevation: f64,
    pub length: f64,
    /// Panorama view index at `from` that shows `to`.
    pub view: usize,
}

impl Edge {
    pub fn direction(&self) -> Direction {
        Direction::new(self.heading, self.elevation).expect("edge direction validated at construction")
    }
}

/// One panorama view at a node, independent of the agent's heading.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewSpec {
    pub heading: f64,
    pub elevation: f64,
    pub label: String,
    /// Neighbour reached through this view, if navigable.
    pub target: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct World {
    pub format_version: u32,
    pub id: String,
    pub seed: u64,
    pub n_levels: usize,
    pub nodes: Vec<Node>,
    /// Directed; every undirected link is stored both ways.
    pub edges: Vec<Edge>,
    pub views: Vec<Vec<ViewSpec>>,
    #[serde(skip)]
    adjacency: Vec<Vec<usize>>,
    #[serde(skip)]
    dist: Vec<Vec<f64>>,
}

impl PartialEq for World {
    fn eq(&self, o: &Self) -> bool {
        self.format_version == o.format_version
            && self.id == o.id
            && self.seed == o.seed
            && self.n_levels == o.n_levels
            && self.nodes == o.nodes
            && self.edges == o.edges
            && self.views == o.views
    }
}

#[derive(Clone, Copy, PartialEq)]
struct HeapItem(f64, usize);
impl Eq for HeapItem {}
impl PartialOrd for HeapItem {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for HeapItem {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        o.0.total_cmp(&self.0).then_with(|| o.1.cmp(&self.1))
    }
}

impl World {
    pub(crate) fn assemble(
        id: String,
        seed: u64,
        n_levels: usize,
        nodes: Vec<Node>,
        edges: Vec<Edge>,
        views: Vec<Vec<ViewSpec>>,
    ) -> Result<Self> {
        let mut w = World {
            format_version: WORLD_FORMAT_VERSION,
            id,
            seed,
            n_levels,
            nodes,
            edges,
            views,
            adjacency: Vec::new(),
            dist: Vec::new(),
        };
        w.index()?;
        Ok(w)
    }

    fn index(&mut self) -> Result<()> {
        let n = self.nodes.len();
        if n == 0 {
            return Err(Error::Empty("world nodes"));
        }
        if self.views.len() != n {
            return Err(Error::invalid(format!("{} view lists for {n} nodes", self.views.len())));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.id != i {
                return Err(Error::invalid(format!("node at position {i} has id {}", node.id)));
            }
        }
        let mut adjacency = vec![Vec::new(); n];
        for (e_idx, e) in self.edges.iter().enumerate() {
            if e.from >= n || e.to >= n || e.from == e.to {
                return Err(Error::invalid(format!("edge {e_idx} ({} -> {}) is invalid", e.from, e.to)));
            }
            Direction::new(e.heading, e.elevation)?;
            if !(e.length > 0.0) || !e.length.is_finite() {
                return Err(Error::invalid(format!("edge {e_idx} has length {}", e.length)));
            }
            let v = self.views[e.from]
                .get(e.view)
                .ok_or_else(|| Error::invalid(format!("edge {e_idx} names missing view {}", e.view)))?;
            if v.target != Some(e.to) || v.heading != e.heading || v.elevation != e.elevation {
                return Err(Error::invalid(format!("edge {e_idx} disagrees with view {} of node {}", e.view, e.from)));
            }
            adjacency[e.from].push(e_idx);
        }
        for (i, views) in self.views.iter().enumerate() {
            let navigable = views.iter().filter(|v| v.target.is_some()).count();
            if navigable != adjacency[i].len() {
                return Err(Error::invalid(format!(
                    "node {i}: {navigable} navigable views but {} edges",
                    adjacency[i].len()
                )));
            }
        }
        for e in &self.edges {
            let back = adjacency[e.to].iter().any(|&j| self.edges[j].to == e.from);
            if !back {
                return Err(Error::invalid(format!("edge {} -> {} has no reverse", e.from, e.to)));
            }
        }
        for list in adjacency.iter_mut() {
            let edges = &self.edges;
            list.sort_by_key(|&j| edges[j].view);
        }
        self.adjacency = adjacency;
        if !self.is_connected() {
            return Err(Error::invalid(format!("world {:?} is not connected", self.id)));
        }
        self.dist = (0..n).map(|s| self.dijkstra(s)).collect();
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Outgoing edges of `node`, ordered by view index.
    pub fn out_edges(&self, node: usize) -> impl Iterator<Item = &Edge> {
        self.adjacency[node].iter().map(move |&j| &self.edges[j])
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency[node].len()
    }

    pub fn edge_between(&self, a: usize, b: usize) -> Option<&Edge> {
        self.out_edges(a).find(|e| e.to == b)
    }

    /// Breadth-first reachability from node 0.
    pub fn is_connected(&self) -> bool {
        let n = self.nodes.len();
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(u) = queue.pop_front() {
            for e in self.out_edges(u) {
                if !seen[e.to] {
                    seen[e.to] = true;
                    queue.push_back(e.to);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    fn dijkstra(&self, src: usize) -> Vec<f64> {
        let mut dist = vec![f64::INFINITY; self.nodes.len()];
        dist[src] = 0.0;
        let mut heap = BinaryHeap::from([HeapItem(0.0, src)]);
        while let Some(HeapItem(d, u)) = heap.pop() {
            if d > dist[u] {
                continue;
            }
            for e in self.out_edges(u) {
                let nd = d + e.length;
                if nd < dist[e.to] {
                    dist[e.to] = nd;
                    heap.push(HeapItem(nd, e.to));
                }
            }
        }
        dist
    }

    /// Shortest-path length between two nodes.
    pub fn distance(&self, a: usize, b: usize) -> f64 {
        self.dist[a][b]
    }

    /// One shortest path from `a` to `b`; ties go to the lower view index.
    pub fn shortest_path(&self, a: usize, b: usize) -> Vec<usize> {
        let mut path = vec![a];
        let mut u = a;
        while u != b {
            let next = self
                .out_edges(u)
                .find(|e| (e.length + self.dist[e.to][b] - self.dist[u][b]).abs() < 1e-9)
                .expect("a shortest-path successor exists in a connected world");
            u = next.to;
            path.push(u);
        }
        path
    }

    pub fn n_views(&self) -> usize {
        self.views.first().map_or(0, Vec::len)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(self).expect("world serializes")
    }

    pub fn from_json_str(s: &str, origin: &Path) -> Result<Self> {
        let mut w: World = serde_json::from_str(s).map_err(|e| Error::parse(origin, e))?;
        if w.format_version != WORLD_FORMAT_VERSION {
            return Err(Error::parse(origin, format!("world format_version {} unsupported", w.format_version)));
        }
        w.index().map_err(|e| Error::parse(origin, e))?;
        Ok(w)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        World::from_json_str(&s, path)
    }
}
