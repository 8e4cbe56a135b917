use std::fmt;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{compass_heading, panorama_at, World, HORIZONTAL_VIEWS};
use crate::concept::{map_action_concept, relative_direction, ActionConcept, Direction};
use crate::error::{Error, Result};
use crate::rng;

pub const EPISODE_FORMAT_VERSION: u32 = 1;
const MAX_ATTEMPTS: usize = 500;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    ValSeenLike,
    ValUnseenLike,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::ValSeenLike, Split::ValUnseenLike];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::ValSeenLike => "val_seen_like",
            Split::ValUnseenLike => "val_unseen_like",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown split {s:?}; expected one of train, val_seen_like, val_unseen_like")))
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstructionStep {
    pub action: ActionConcept,
    /// `None` only for the final stop step.
    pub object: Option<String>,
}

impl InstructionStep {
    pub fn text(&self) -> String {
        match &self.object {
            Some(o) => format!("{} to the {}.", self.action.phrase(), o),
            None => format!("{}.", self.action.phrase()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: String,
    pub world_id: String,
    pub split: Split,
    pub start: usize,
    pub goal: usize,
    pub start_heading: Direction,
    pub gt_path: Vec<usize>,
    pub instruction: Vec<InstructionStep>,
}

impl Episode {
    pub fn text(&self) -> String {
        self.instruction.iter().map(InstructionStep::text).collect::<Vec<_>>().join(" ")
    }

    pub fn step_texts(&self) -> Vec<String> {
        self.instruction.iter().map(InstructionStep::text).collect()
    }

    /// Shortest-path length of the ground truth.
    pub fn gt_length(&self, world: &World) -> f64 {
        self.gt_path.windows(2).map(|w| world.distance(w[0], w[1])).sum()
    }

    /// Checks the episode against its world: path adjacency, endpoints and
    /// that every instruction step names the transition it describes.
    pub fn validate(&self, world: &World) -> Result<()> {
        if world.id != self.world_id {
            return Err(Error::invalid(format!("episode {} belongs to world {:?}, not {:?}", self.id, self.world_id, world.id)));
        }
        if self.gt_path.first() != Some(&self.start) || self.gt_path.last() != Some(&self.goal) {
            return Err(Error::invalid(format!("episode {}: gt path does not run start -> goal", self.id)));
        }
        if self.instruction.len() != self.gt_path.len() {
            return Err(Error::invalid(format!(
                "episode {}: {} instruction steps for {} transitions (+ stop)",
                self.id,
                self.instruction.len(),
                self.gt_path.len() - 1
            )));
        }
        let mut prev = self.start_heading;
        for (i, w) in self.gt_path.windows(2).enumerate() {
            let edge = world
                .edge_between(w[0], w[1])
                .ok_or_else(|| Error::invalid(format!("episode {}: no edge {} -> {}", self.id, w[0], w[1])))?;
            let action = map_action_concept(relative_direction(edge.direction(), prev))?;
            let label = &world.views[w[0]][edge.view].label;
            let step = &self.instruction[i];
            if step.action != action || step.object.as_deref() != Some(label.as_str()) {
                return Err(Error::invalid(format!(
                    "episode {} step {i}: instruction says {:?}, transition is {action} to {label}",
                    self.id,
                    step.text()
                )));
            }
            prev = edge.direction();
        }
        let last = self.instruction.last().expect("nonempty");
        if last.action != ActionConcept::Stop || last.object.is_some() {
            return Err(Error::invalid(format!("episode {}: instruction does not end with stop", self.id)));
        }
        Ok(())
    }
}

/// A random shortest-path episode of `min(3, max_len)..=max_len` nodes whose
/// every step is unambiguous: no other candidate at that step has the same
/// action and label.
pub fn generate_episode(world: &World, seed: u64, max_len: usize) -> Result<Episode> {
    generate_episode_in(world, seed, max_len, Split::Train, format!("{}-e{seed}", world.id))
}

pub(crate) fn generate_episode_in(world: &World, seed: u64, max_len: usize, split: Split, id: String) -> Result<Episode> {
    if max_len < 2 {
        return Err(Error::invalid(format!("max_len {max_len} < 2")));
    }
    let min_len = max_len.min(3);
    let mut rng = rng::substream(seed, "episode", rng::fnv1a(world.id.as_bytes()));
    'attempt: for _ in 0..MAX_ATTEMPTS {
        let start = rng.gen_range(0..world.len());
        let start_heading = Direction::horizontal(compass_heading(rng.gen_range(0..HORIZONTAL_VIEWS)));
        let goals: Vec<usize> = (0..world.len())
            .filter(|&g| {
                let n = world.shortest_path(start, g).len();
                (min_len..=max_len).contains(&n)
            })
            .collect();
        if goals.is_empty() {
            continue;
        }
        let goal = goals[rng.gen_range(0..goals.len())];
        let gt_path = world.shortest_path(start, goal);
        let mut instruction = Vec::with_capacity(gt_path.len());
        let mut prev = start_heading;
        for w in gt_path.windows(2) {
            let pano = panorama_at(world, w[0], prev)?;
            let ci = pano.candidate_to(w[1]).expect("path follows edges");
            let cand = &pano.candidates[ci];
            let label = &pano.views[cand.view.expect("navigable")].label;
            let clash = pano.candidates.iter().enumerate().any(|(j, c)| {
                j != ci && c.action == cand.action && c.view.map(|v| &pano.views[v].label) == Some(label)
            });
            if clash {
                continue 'attempt;
            }
            let edge = world.edge_between(w[0], w[1]).expect("path follows edges");
            // the instruction must name exactly the concept of the transition
            assert_eq!(cand.action, map_action_concept(relative_direction(edge.direction(), prev))?);
            instruction.push(InstructionStep {
                action: cand.action,
                object: Some(label.clone()),
            });
            prev = edge.direction();
        }
        instruction.push(InstructionStep { action: ActionConcept::Stop, object: None });
        return Ok(Episode {
            id,
            world_id: world.id.clone(),
            split,
            start,
            goal,
            start_heading,
            gt_path,
            instruction,
        });
    }
    Err(Error::invalid(format!(
        "no unambiguous path of {min_len}..={max_len} nodes found in world {:?} after {MAX_ATTEMPTS} attempts",
        world.id
    )))
}

/// `count` episodes with ids `{world}-{split}-{i}`.
pub fn generate_episodes(world: &World, seed: u64, count: usize, max_len: usize, split: Split) -> Result<Vec<Episode>> {
    (0..count)
        .map(|i| {
            let s = rng::mix(rng::stream_seed(seed, split.name()) ^ i as u64);
            generate_episode_in(world, s, max_len, split, format!("{}-{}-{i}", world.id, split.name()))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeFile {
    pub format_version: u32,
    pub episodes: Vec<Episode>,
}

impl EpisodeFile {
    pub fn new(episodes: Vec<Episode>) -> Self {
        EpisodeFile { format_version: EPISODE_FORMAT_VERSION, episodes }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let s = serde_json::to_string_pretty(self).expect("episodes serialize");
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let f: EpisodeFile = serde_json::from_str(&s).map_err(|e| Error::parse(path, e))?;
        if f.format_version != EPISODE_FORMAT_VERSION {
            return Err(Error::parse(path, format!("episode format_version {} unsupported", f.format_version)));
        }
        Ok(f)
    }
}
