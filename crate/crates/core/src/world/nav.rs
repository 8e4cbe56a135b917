use serde::{Deserialize, Serialize};

use super::World;
use crate::concept::{map_action_concept, relative_direction, ActionConcept, ActionalAtomicConcept, Direction, RelativeDirection};
use crate::embedding::ViewImage;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub index: usize,
    pub image_id: String,
    pub direction: Direction,
    /// Relative to the previously selected direction.
    pub relative: RelativeDirection,
    pub label: String,
    pub target: Option<usize>,
}

impl ViewImage for View {
    fn image_id(&self) -> &str {
        &self.image_id
    }

    fn planted_label(&self) -> Option<&str> {
        Some(&self.label)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    /// `None` for the stop candidate.
    pub view: Option<usize>,
    pub target: Option<usize>,
    pub relative: RelativeDirection,
    pub action: ActionConcept,
}

impl Candidate {
    pub fn is_stop(&self) -> bool {
        self.view.is_none()
    }
}

/// Views at a node plus the navigable candidates, stop last.
#[derive(Clone, Debug, PartialEq)]
pub struct Panorama {
    pub node: usize,
    pub views: Vec<View>,
    pub candidates: Vec<Candidate>,
}

impl Panorama {
    pub fn stop_index(&self) -> usize {
        self.candidates.len() - 1
    }

    /// Candidate index leading to `node`, if any.
    pub fn candidate_to(&self, node: usize) -> Option<usize> {
        self.candidates.iter().position(|c| c.target == Some(node))
    }
}

pub fn panorama_at(world: &World, node: usize, prev_selected: Direction) -> Result<Panorama> {
    if node >= world.len() {
        return Err(Error::invalid(format!("node {node} not in world {:?} ({} nodes)", world.id, world.len())));
    }
    let views: Vec<View> = world.views[node]
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let direction = Direction::new(v.heading, v.elevation)?;
            Ok(View {
                index: i,
                image_id: format!("{}/{}/{}", world.id, node, i),
                direction,
                relative: relative_direction(direction, prev_selected),
                label: v.label.clone(),
                target: v.target,
            })
        })
        .collect::<Result<_>>()?;
    let mut candidates = views
        .iter()
        .filter(|v| v.target.is_some())
        .map(|v| {
            Ok(Candidate {
                view: Some(v.index),
                target: v.target,
                relative: v.relative,
                action: map_action_concept(v.relative)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    candidates.push(Candidate {
        view: None,
        target: None,
        relative: RelativeDirection::new(0.0, 0.0),
        action: ActionConcept::Stop,
    });
    Ok(Panorama { node, views, candidates })
}

/// Agent position and bookkeeping during a rollout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NavState {
    pub node: usize,
    pub prev_selected: Direction,
    pub steps: usize,
    pub path: Vec<usize>,
    pub length: f64,
    pub stopped: bool,
}

impl NavState {
    pub fn new(start: usize, heading: Direction) -> Self {
        NavState {
            node: start,
            prev_selected: heading,
            steps: 0,
            path: vec![start],
            length: 0.0,
            stopped: false,
        }
    }
}

/// Moves through candidate `index` of `pano` (or stops).
pub fn step(world: &World, state: &NavState, pano: &Panorama, index: usize) -> Result<NavState> {
    if state.stopped {
        return Err(Error::invalid("step after stop"));
    }
    if pano.node != state.node {
        return Err(Error::invalid(format!("panorama of node {} used at node {}", pano.node, state.node)));
    }
    let cand = pano.candidates.get(index).ok_or_else(|| {
        Error::invalid(format!(
            "candidate {index} is not navigable at node {} ({} candidates incl. stop)",
            state.node,
            pano.candidates.len()
        ))
    })?;
    let mut next = state.clone();
    next.steps += 1;
    match cand.target {
        None => next.stopped = true,
        Some(to) => {
            let edge = world
                .edge_between(state.node, to)
                .ok_or_else(|| Error::invalid(format!("no edge {} -> {to}", state.node)))?;
            next.node = to;
            next.prev_selected = edge.direction();
            next.length += edge.length;
            next.path.push(to);
        }
    }
    Ok(next)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub node: usize,
    pub candidate: usize,
    pub action: ActionConcept,
    pub concept: Option<ActionalAtomicConcept>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub episode_id: String,
    /// Visited nodes, start first.
    pub nodes: Vec<usize>,
    pub steps: Vec<TrajectoryStep>,
    pub stopped: bool,
    pub length: f64,
}

impl TrajectoryRecord {
    pub fn from_state(episode_id: &str, state: &NavState, steps: Vec<TrajectoryStep>) -> Self {
        TrajectoryRecord {
            episode_id: episode_id.to_string(),
            nodes: state.path.clone(),
            steps,
            stopped: state.stopped,
            length: state.length,
        }
    }

    pub fn final_node(&self) -> usize {
        *self.nodes.last().expect("trajectory has a start node")
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::world::{Edge, Node, ViewSpec};
    use std::f64::consts::{FRAC_PI_2, PI};

    /// Centre node 0 with arms north (1), east (2), south (3), west (4).
    pub(crate) fn cross() -> World {
        let labels = ["hub", "kitchen", "bedroom", "office", "garage"];
        let pos = [(0, 0), (0, 1), (1, 0), (0, -1), (-1, 0)];
        let nodes: Vec<Node> = (0..5)
            .map(|i| Node { id: i, level: 0, x: pos[i].0, y: pos[i].1, room: labels[i].into() })
            .collect();
        let mut edges = Vec::new();
        let mut views: Vec<Vec<ViewSpec>> = (0..5)
            .map(|_| {
                (0..8)
                    .map(|k| ViewSpec {
                        heading: crate::world::compass_heading(k),
                        elevation: 0.0,
                        label: "gym".into(),
                        target: None,
                    })
                    .collect()
            })
            .collect();
        for arm in 1..5 {
            let k = 2 * (arm - 1);
            let back = (k + 4) % 8;
            for (a, b, view) in [(0, arm, k), (arm, 0, back)] {
                let heading = crate::world::compass_heading(view);
                views[a][view].target = Some(b);
                views[a][view].label = labels[b].into();
                edges.push(Edge { from: a, to: b, heading, elevation: 0.0, length: 1.0, view });
            }
        }
        World::assemble("cross".into(), 0, 1, nodes, edges, views).unwrap()
    }

    #[test]
    fn cross_candidates() {
        let w = cross();
        let p = panorama_at(&w, 0, Direction::horizontal(0.0)).unwrap();
        assert_eq!(p.candidates.len(), w.degree(0) + 1);
        assert!(p.candidates.last().unwrap().is_stop());
        let rel: Vec<(f64, ActionConcept)> = p.candidates[..4].iter().map(|c| (c.relative.d_heading, c.action)).collect();
        assert_eq!(
            rel,
            vec![
                (0.0, ActionConcept::GoForward),
                (FRAC_PI_2, ActionConcept::TurnRight),
                (PI, ActionConcept::GoBack),
                (3.0 * FRAC_PI_2, ActionConcept::TurnLeft),
            ]
        );
        // facing east: north is a left turn of -π/2
        let p = panorama_at(&w, 0, Direction::horizontal(FRAC_PI_2)).unwrap();
        assert_eq!(p.candidates[0].relative.d_heading, -FRAC_PI_2);
        assert_eq!(p.candidates[0].action, ActionConcept::TurnLeft);
    }

    #[test]
    fn equal_heading_spacing() {
        let w = cross();
        let p = panorama_at(&w, 2, Direction::horizontal(0.0)).unwrap();
        for (k, v) in p.views.iter().enumerate() {
            assert!((v.direction.heading() - k as f64 * std::f64::consts::FRAC_PI_4).abs() < 1e-12);
        }
    }

    #[test]
    fn stepping() {
        let w = cross();
        let s = NavState::new(0, Direction::horizontal(0.0));
        let p = panorama_at(&w, 0, s.prev_selected).unwrap();
        let s1 = step(&w, &s, &p, 1).unwrap();
        assert_eq!(s1.node, 2);
        assert_eq!(s1.prev_selected.heading(), FRAC_PI_2);
        let p1 = panorama_at(&w, 2, s1.prev_selected).unwrap();
        let s2 = step(&w, &s1, &p1, 0).unwrap();
        assert_eq!(s2.node, 0);
        assert_eq!(s2.length, 2.0);
        let p2 = panorama_at(&w, 0, s2.prev_selected).unwrap();
        let s3 = step(&w, &s2, &p2, p2.stop_index()).unwrap();
        assert!(s3.stopped);
        assert_eq!(s3.node, 0);
        assert!(step(&w, &s3, &p2, 0).is_err());
        assert!(step(&w, &s, &p, 9).is_err());
    }
}
