use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{compass_heading, compass_index, Edge, Node, ViewSpec, World, DOWN_VIEW, HORIZONTAL_VIEWS, STAIR_ELEVATION, UP_VIEW};
use crate::error::{Error, Result};
use crate::rng;

/// Everything that determines a generated world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    pub id: String,
    pub seed: u64,
    pub n_nodes: usize,
    pub n_levels: usize,
    /// Labels rooms are drawn from.
    pub room_lexicon: Vec<String>,
    /// Labels for views that do not lead anywhere.
    pub distractor_lexicon: Vec<String>,
    /// Number of distinct room labels used in one world; 0 means all.
    pub palette: usize,
    /// Target mean out-degree within a level.
    pub target_degree: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        let lexicon = crate::embedding::default_lexicon();
        WorldSpec {
            id: "w0".into(),
            seed: 0,
            n_nodes: 25,
            n_levels: 1,
            room_lexicon: lexicon.clone(),
            distractor_lexicon: lexicon,
            palette: 0,
            target_degree: 4.0,
        }
    }
}

struct Dsu(Vec<usize>);

impl Dsu {
    fn find(&mut self, x: usize) -> usize {
        let mut r = x;
        while self.0[r] != r {
            r = self.0[r];
        }
        let mut c = x;
        while self.0[c] != r {
            let n = self.0[c];
            self.0[c] = r;
            c = n;
        }
        r
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.0[ra] = rb;
        true
    }
}

/// A world with default knobs: all lexicon labels available for rooms and
/// distractors, mean degree about 4.
pub fn generate_world<S: AsRef<str>>(seed: u64, n_nodes: usize, n_levels: usize, lexicon: &[S]) -> Result<World> {
    let lexicon: Vec<String> = lexicon.iter().map(|s| s.as_ref().to_string()).collect();
    generate_world_with(&WorldSpec {
        id: format!("w{seed}"),
        seed,
        n_nodes,
        n_levels,
        room_lexicon: lexicon.clone(),
        distractor_lexicon: lexicon,
        ..WorldSpec::default()
    })
}

pub fn generate_world_with(spec: &WorldSpec) -> Result<World> {
    if spec.n_nodes < 4 {
        return Err(Error::invalid(format!("n_nodes {} < 4", spec.n_nodes)));
    }
    if spec.n_levels == 0 || spec.n_nodes < 2 * spec.n_levels {
        return Err(Error::invalid(format!(
            "{} nodes over {} levels admits no connected graph (need at least 2 per level)",
            spec.n_nodes, spec.n_levels
        )));
    }
    let rooms: BTreeSet<&String> = spec.room_lexicon.iter().collect();
    if rooms.len() < 4 {
        return Err(Error::invalid(format!("room lexicon has {} distinct labels, need at least 4", rooms.len())));
    }
    if spec.distractor_lexicon.is_empty() {
        return Err(Error::Empty("distractor lexicon"));
    }
    if !(spec.target_degree > 0.0) {
        return Err(Error::NonPositive { what: "target_degree", value: spec.target_degree });
    }
    let mut rng = rng::stream(spec.seed, "world");

    // grid cells per level
    let mut nodes = Vec::with_capacity(spec.n_nodes);
    let mut levels: Vec<Vec<usize>> = Vec::new();
    for level in 0..spec.n_levels {
        let m = spec.n_nodes / spec.n_levels + usize::from(level < spec.n_nodes % spec.n_levels);
        let w = (m as f64).sqrt().ceil() as usize;
        let mut ids = Vec::with_capacity(m);
        for i in 0..m {
            let id = nodes.len();
            nodes.push(Node {
                id,
                level,
                x: (i % w) as i32,
                y: (i / w) as i32,
                room: String::new(),
            });
            ids.push(id);
        }
        levels.push(ids);
    }

    // horizontal links: random spanning tree plus extras
    let mut links: Vec<(usize, usize)> = Vec::new();
    let mut dsu = Dsu((0..nodes.len()).collect());
    for ids in &levels {
        let mut cand = Vec::new();
        for (i, &a) in ids.iter().enumerate() {
            for &b in &ids[i + 1..] {
                let (dx, dy) = (nodes[b].x - nodes[a].x, nodes[b].y - nodes[a].y);
                if dx.abs() <= 1 && dy.abs() <= 1 {
                    cand.push((a, b));
                }
            }
        }
        cand.shuffle(&mut rng);
        let mut extra = Vec::new();
        for &(a, b) in &cand {
            if dsu.union(a, b) {
                links.push((a, b));
            } else {
                extra.push((a, b));
            }
        }
        let target = ((spec.target_degree * ids.len() as f64) / 2.0).round() as usize;
        let tree = ids.len() - 1;
        links.extend(extra.into_iter().take(target.saturating_sub(tree)));
    }

    // stairs between consecutive levels
    let mut stairs: Vec<(usize, usize)> = Vec::new();
    let mut has_up = vec![false; nodes.len()];
    let mut has_down = vec![false; nodes.len()];
    for l in 0..spec.n_levels.saturating_sub(1) {
        let mut cand = Vec::new();
        for &a in &levels[l] {
            for &b in &levels[l + 1] {
                let (dx, dy) = (nodes[b].x - nodes[a].x, nodes[b].y - nodes[a].y);
                if compass_index(dx, dy).is_some() {
                    cand.push((a, b));
                }
            }
        }
        if cand.is_empty() {
            return Err(Error::invalid(format!("levels {l} and {} cannot be joined by a stair", l + 1)));
        }
        cand.shuffle(&mut rng);
        let want = 1 + usize::from(rng.gen_bool(0.5));
        for (a, b) in cand {
            if stairs.iter().filter(|(s, _)| nodes[*s].level == l).count() >= want {
                break;
            }
            if !has_up[a] && !has_down[b] {
                has_up[a] = true;
                has_down[b] = true;
                stairs.push((a, b));
            }
        }
    }

    let mut neighbours: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
    for &(a, b) in links.iter().chain(&stairs) {
        neighbours[a].push(b);
        neighbours[b].push(a);
    }

    assign_rooms(&mut nodes, &neighbours, spec, &mut rng);

    // directed edges and panoramas
    let multi = spec.n_levels > 1;
    let n_views = if multi { HORIZONTAL_VIEWS + 2 } else { HORIZONTAL_VIEWS };
    let mut views: Vec<Vec<Option<ViewSpec>>> = vec![vec![None; n_views]; nodes.len()];
    let mut edges = Vec::new();
    let add = |edges: &mut Vec<Edge>, views: &mut Vec<Vec<Option<ViewSpec>>>, a: usize, b: usize, stair: i32| {
        let (dx, dy) = (nodes[b].x - nodes[a].x, nodes[b].y - nodes[a].y);
        let k = compass_index(dx, dy).expect("neighbours are one grid step apart");
        let heading = compass_heading(k);
        let (view, elevation, length) = match stair {
            1 => (UP_VIEW, STAIR_ELEVATION, std::f64::consts::SQRT_2),
            -1 => (DOWN_VIEW, -STAIR_ELEVATION, std::f64::consts::SQRT_2),
            _ => (k, 0.0, if dx != 0 && dy != 0 { std::f64::consts::SQRT_2 } else { 1.0 }),
        };
        views[a][view] = Some(ViewSpec {
            heading,
            elevation,
            label: nodes[b].room.clone(),
            target: Some(b),
        });
        edges.push(Edge { from: a, to: b, heading, elevation, length, view });
    };
    for &(a, b) in &links {
        add(&mut edges, &mut views, a, b, 0);
        add(&mut edges, &mut views, b, a, 0);
    }
    for &(a, b) in &stairs {
        add(&mut edges, &mut views, a, b, 1);
        add(&mut edges, &mut views, b, a, -1);
    }
    edges.sort_by_key(|e| (e.from, e.view));

    let views: Vec<Vec<ViewSpec>> = views
        .into_iter()
        .map(|row| {
            row.into_iter()
                .enumerate()
                .map(|(i, v)| {
                    v.unwrap_or_else(|| {
                        let (heading, elevation) = match i {
                            UP_VIEW => (0.0, STAIR_ELEVATION),
                            DOWN_VIEW => (0.0, -STAIR_ELEVATION),
                            k => (compass_heading(k), 0.0),
                        };
                        ViewSpec {
                            heading,
                            elevation,
                            label: spec.distractor_lexicon.choose(&mut rng).expect("nonempty").clone(),
                            target: None,
                        }
                    })
                })
                .collect()
        })
        .collect();

    World::assemble(spec.id.clone(), spec.seed, spec.n_levels, nodes, edges, views)
}

/// Greedy room labelling: each node takes the palette label least used among
/// nodes that share a neighbour with it, so a panorama's candidates differ
/// wherever the palette allows.
fn assign_rooms(nodes: &mut [Node], neighbours: &[Vec<usize>], spec: &WorldSpec, rng: &mut rng::Rng) {
    let mut lexicon: Vec<String> = spec.room_lexicon.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    lexicon.shuffle(rng);
    if spec.palette > 0 {
        lexicon.truncate(spec.palette.max(2));
    }
    let mut order: Vec<usize> = (0..nodes.len()).collect();
    order.shuffle(rng);
    let mut label: Vec<Option<usize>> = vec![None; nodes.len()];
    let mut uses = vec![0usize; lexicon.len()];
    for v in order {
        let mut clash = vec![0usize; lexicon.len()];
        for &hub in &neighbours[v] {
            for &u in &neighbours[hub] {
                if u != v {
                    if let Some(l) = label[u] {
                        clash[l] += 1;
                    }
                }
            }
        }
        let mut cands: Vec<usize> = (0..lexicon.len()).collect();
        cands.shuffle(rng);
        let best = cands
            .into_iter()
            .min_by_key(|&l| (clash[l], uses[l]))
            .expect("palette nonempty");
        label[v] = Some(best);
        uses[best] += 1;
    }
    for (n, l) in nodes.iter_mut().zip(label) {
        n.room = lexicon[l.expect("every node labelled")].clone();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concept::{map_action_concept, relative_direction, ActionConcept};
    use crate::embedding::default_lexicon;

    #[test]
    fn deterministic() {
        let a = generate_world(3, 25, 2, &default_lexicon()).unwrap();
        let b = generate_world(3, 25, 2, &default_lexicon()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_json_string(), b.to_json_string());
        let c = generate_world(4, 25, 2, &default_lexicon()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn seed0_connected_by_bfs() {
        let w = generate_world(0, 25, 1, &default_lexicon()).unwrap();
        // independent BFS over the raw edge list
        let mut seen = vec![false; w.len()];
        let mut stack = vec![0];
        while let Some(u) = stack.pop() {
            if std::mem::replace(&mut seen[u], true) {
                continue;
            }
            stack.extend(w.edges.iter().filter(|e| e.from == u).map(|e| e.to));
        }
        assert!(seen.iter().all(|s| *s));
    }

    #[test]
    fn single_level_has_no_vertical_actions() {
        for seed in 0..5 {
            let w = generate_world(seed, 20, 1, &default_lexicon()).unwrap();
            for a in &w.edges {
                for b in &w.edges {
                    let r = relative_direction(a.direction(), b.direction());
                    let act = map_action_concept(r).unwrap();
                    assert!(act != ActionConcept::GoUp && act != ActionConcept::GoDown);
                }
            }
        }
    }

    #[test]
    fn edges_match_coordinates() {
        let w = generate_world(5, 30, 3, &default_lexicon()).unwrap();
        for e in &w.edges {
            let (a, b) = (&w.nodes[e.from], &w.nodes[e.to]);
            let k = compass_index(b.x - a.x, b.y - a.y).unwrap();
            assert_eq!(e.heading, compass_heading(k));
            match b.level as i64 - a.level as i64 {
                0 => assert_eq!(e.elevation, 0.0),
                1 => assert!(e.elevation > 0.0),
                -1 => assert!(e.elevation < 0.0),
                _ => panic!("level jump"),
            }
            assert_eq!(w.views[e.from][e.view].target, Some(e.to));
            assert_eq!(w.views[e.from][e.view].label, b.room);
        }
        assert_eq!(w.n_views(), 10);
        assert!(w.edges.iter().any(|e| e.elevation > 0.0));
    }

    #[test]
    fn mean_degree_near_target() {
        let w = generate_world(1, 49, 1, &default_lexicon()).unwrap();
        let mean = w.edges.len() as f64 / w.len() as f64;
        assert!((3.0..=4.5).contains(&mean), "{mean}");
    }

    #[test]
    fn invalid_parameters() {
        assert!(generate_world(0, 3, 1, &default_lexicon()).is_err());
        assert!(generate_world(0, 5, 3, &default_lexicon()).is_err());
        assert!(generate_world(0, 10, 1, &["a", "b", "c"]).is_err());
    }

    #[test]
    fn round_trip() {
        let w = generate_world(2, 16, 2, &default_lexicon()).unwrap();
        let back = World::from_json_str(&w.to_json_string(), std::path::Path::new("w.json")).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.distance(0, 5), w.distance(0, 5));
    }
}
