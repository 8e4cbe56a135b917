use serde::{Deserialize, Serialize};

use super::{Episode, TrajectoryRecord, World};

/// Navigation error, trajectory length, success and SPL of one episode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NavMetrics {
    pub ne: f64,
    pub tl: f64,
    pub sr: f64,
    pub spl: f64,
}

/// `SR = [NE ≤ radius]`, `SPL = SR · L / max(L, TL)` with `L` the
/// ground-truth shortest-path length.
pub fn evaluate_trajectory(traj: &TrajectoryRecord, episode: &Episode, world: &World, success_radius: f64) -> NavMetrics {
    let end = traj.final_node();
    let ne = world.distance(end, episode.goal);
    let tl: f64 = traj
        .nodes
        .windows(2)
        .map(|w| world.edge_between(w[0], w[1]).map_or(f64::INFINITY, |e| e.length))
        .sum();
    let sr = if ne <= success_radius { 1.0 } else { 0.0 };
    let l = episode.gt_length(world);
    let spl = if sr > 0.0 {
        if l.max(tl) > 0.0 {
            l / l.max(tl)
        } else {
            1.0
        }
    } else {
        0.0
    };
    NavMetrics { ne, tl, sr, spl }
}

/// Means over episodes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub episodes: usize,
    pub ne: f64,
    pub tl: f64,
    pub sr: f64,
    pub spl: f64,
}

pub fn aggregate_metrics(all: &[NavMetrics]) -> AggregateMetrics {
    if all.is_empty() {
        return AggregateMetrics::default();
    }
    let n = all.len() as f64;
    AggregateMetrics {
        episodes: all.len(),
        ne: all.iter().map(|m| m.ne).sum::<f64>() / n,
        tl: all.iter().map(|m| m.tl).sum::<f64>() / n,
        sr: all.iter().map(|m| m.sr).sum::<f64>() / n,
        spl: all.iter().map(|m| m.spl).sum::<f64>() / n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concept::{ActionConcept, Direction};
    use crate::world::nav::tests::cross;
    use crate::world::{InstructionStep, Split};

    fn episode(path: Vec<usize>) -> Episode {
        Episode {
            id: "e".into(),
            world_id: "cross".into(),
            split: Split::Train,
            start: path[0],
            goal: *path.last().unwrap(),
            start_heading: Direction::horizontal(0.0),
            instruction: vec![InstructionStep { action: ActionConcept::Stop, object: None }; path.len()],
            gt_path: path,
        }
    }

    fn traj(nodes: Vec<usize>) -> TrajectoryRecord {
        TrajectoryRecord { episode_id: "e".into(), nodes, steps: vec![], stopped: true, length: 0.0 }
    }

    #[test]
    fn perfect_path() {
        let w = cross();
        let m = evaluate_trajectory(&traj(vec![1, 0, 2]), &episode(vec![1, 0, 2]), &w, 0.0);
        assert_eq!(m, NavMetrics { ne: 0.0, tl: 2.0, sr: 1.0, spl: 1.0 });
    }

    #[test]
    fn immediate_wrong_stop() {
        let w = cross();
        let m = evaluate_trajectory(&traj(vec![1]), &episode(vec![1, 0, 2]), &w, 0.0);
        assert_eq!(m.sr, 0.0);
        assert_eq!(m.spl, 0.0);
        assert_eq!(m.ne, 2.0);
        assert_eq!(m.tl, 0.0);
    }

    #[test]
    fn double_length_success() {
        let w = cross();
        // gt 0 -> 1 (length 1); walk 0 -> 2 -> 0 -> 1 is 3, so use gt 1 -> 0 -> 3 (2) and walk 4 hops
        let m = evaluate_trajectory(&traj(vec![1, 0, 2, 0, 3]), &episode(vec![1, 0, 3]), &w, 0.0);
        assert_eq!(m.tl, 4.0);
        assert_eq!(m.spl, 0.5);
        assert_eq!(m.sr, 1.0);
    }

    #[test]
    fn radius() {
        let w = cross();
        let m = evaluate_trajectory(&traj(vec![1, 0]), &episode(vec![1, 0, 2]), &w, 1.0);
        assert_eq!(m.sr, 1.0);
        assert!(m.spl <= m.sr);
    }

    #[test]
    fn aggregate() {
        let a = aggregate_metrics(&[
            NavMetrics { ne: 0.0, tl: 2.0, sr: 1.0, spl: 1.0 },
            NavMetrics { ne: 2.0, tl: 0.0, sr: 0.0, spl: 0.0 },
        ]);
        assert_eq!(a.sr, 0.5);
        assert_eq!(a.ne, 1.0);
        assert_eq!(a.episodes, 2);
    }
}
