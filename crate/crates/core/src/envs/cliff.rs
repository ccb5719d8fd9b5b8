use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_action, Env, EnvError, Level, StepResult, TerminalKind};
use crate::homography::PatchGrid;
use crate::nets::ActionSpace;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliffConfig {
    pub size: usize,
    /// Rows/columns `ring_lo..=ring_hi` bound the square ring of track cells.
    pub ring_lo: usize,
    pub ring_hi: usize,
    /// Cliffs spawn within this Chebyshev distance of the track.
    pub band: usize,
    /// Cliff count for easy, medium and hard.
    pub cliffs: [usize; 3],
    pub view: usize,
}

impl Default for CliffConfig {
    fn default() -> Self {
        Self {
            size: 12,
            ring_lo: 3,
            ring_hi: 8,
            band: 2,
            cliffs: [8, 16, 24],
            view: 5,
        }
    }
}

/// Gridworld where the agent walks a ring-shaped track through randomly
/// spawned cliffs. Actions: no-op, up, right, down, left.
pub struct CliffCircular {
    cfg: CliffConfig,
    level: Level,
    timeout: usize,
    cliff: Vec<bool>,
    /// Track cells in walking order.
    track: Vec<(usize, usize)>,
    /// Board cell → index into `track`.
    track_index: Vec<Option<usize>>,
    visited: Vec<bool>,
    agent: (usize, usize),
    t: usize,
    done: bool,
}

const MOVES: [(isize, isize); 5] = [(0, 0), (-1, 0), (0, 1), (1, 0), (0, -1)];

impl CliffCircular {
    pub fn new(level: Level, cfg: CliffConfig, timeout: usize) -> Self {
        assert!(cfg.ring_lo < cfg.ring_hi && cfg.ring_hi < cfg.size, "ring must fit on the board");
        let (lo, hi) = (cfg.ring_lo, cfg.ring_hi);
        let mut track = Vec::new();
        for c in lo..hi {
            track.push((lo, c));
        }
        for r in lo..hi {
            track.push((r, hi));
        }
        for c in (lo + 1..=hi).rev() {
            track.push((hi, c));
        }
        for r in (lo + 1..=hi).rev() {
            track.push((r, lo));
        }
        let n = cfg.size;
        let mut track_index = vec![None; n * n];
        for (k, &(r, c)) in track.iter().enumerate() {
            track_index[r * n + c] = Some(k);
        }
        let visited = vec![false; track.len()];
        let mut env = Self {
            cliff: vec![false; n * n],
            agent: (lo, lo),
            cfg,
            level,
            timeout,
            track,
            track_index,
            visited,
            t: 0,
            done: true,
        };
        env.reset(0);
        env
    }

    pub fn track(&self) -> &[(usize, usize)] {
        &self.track
    }

    pub fn agent(&self) -> (usize, usize) {
        self.agent
    }

    pub fn is_cliff(&self, r: usize, c: usize) -> bool {
        self.cliff[r * self.cfg.size + c]
    }

    /// Replaces the cliff layout of the current episode; cells on the track
    /// are ignored.
    pub fn set_cliffs(&mut self, cells: &[(usize, usize)]) {
        let n = self.cfg.size;
        self.cliff.iter_mut().for_each(|c| *c = false);
        for &(r, c) in cells {
            if self.track_index[r * n + c].is_none() {
                self.cliff[r * n + c] = true;
            }
        }
    }

    pub fn cliff_count(&self) -> usize {
        self.cliff.iter().filter(|c| **c).count()
    }

    /// Cells eligible for cliffs: near the track but not on it.
    fn band_cells(&self) -> Vec<usize> {
        let n = self.cfg.size;
        let b = self.cfg.band;
        (0..n * n)
            .filter(|&i| {
                self.track_index[i].is_none()
                    && self.track.iter().any(|&(r, c)| (i / n).abs_diff(r) <= b && (i % n).abs_diff(c) <= b)
            })
            .collect()
    }

    fn cliff_at(&self, r: isize, c: isize) -> bool {
        let n = self.cfg.size as isize;
        (0..n).contains(&r) && (0..n).contains(&c) && self.cliff[(r * n + c) as usize]
    }

    fn observe(&self) -> PatchGrid {
        let k = self.cfg.view;
        let half = (k / 2) as isize;
        let (ar, ac) = (self.agent.0 as isize, self.agent.1 as isize);
        let mut data = Vec::with_capacity(k * k);
        for dr in -half..=half {
            for dc in -half..=half {
                data.push(if self.cliff_at(ar + dr, ac + dc) { 1.0 } else { 0.0 });
            }
        }
        PatchGrid::new(k, k, data).expect("binary view")
    }

    fn neighbour_cost(&self) -> f64 {
        let (ar, ac) = (self.agent.0 as isize, self.agent.1 as isize);
        let mut n = 0;
        for dr in -1..=1 {
            for dc in -1..=1 {
                if (dr, dc) != (0, 0) && self.cliff_at(ar + dr, ac + dc) {
                    n += 1;
                }
            }
        }
        n as f64 / 8.0
    }
}

/// Immediate cost read off an egocentric view: 1 when the center is a cliff,
/// otherwise the fraction of cliffs among the 8 neighbours.
pub fn cost_from_view(view: &PatchGrid) -> f64 {
    let m = view.rows() / 2;
    if view.get(m, m) > 0.5 {
        return 1.0;
    }
    let mut n = 0.0;
    for r in m - 1..=m + 1 {
        for c in m - 1..=m + 1 {
            if (r, c) != (m, m) {
                n += view.get(r, c);
            }
        }
    }
    n / 8.0
}

impl Env for CliffCircular {
    fn reset(&mut self, seed: u64) -> PatchGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut band = self.band_cells();
        band.shuffle(&mut rng);
        let count = self.cfg.cliffs[self.level.index()].min(band.len());
        self.cliff.iter_mut().for_each(|c| *c = false);
        for &i in &band[..count] {
            self.cliff[i] = true;
        }
        self.agent = self.track[0];
        self.visited.iter_mut().for_each(|v| *v = false);
        self.t = 0;
        self.done = false;
        self.observe()
    }

    fn step(&mut self, action: &[usize]) -> Result<StepResult, EnvError> {
        check_action(&self.action_space(), action)?;
        if self.done {
            return Err(EnvError::Finished);
        }
        let n = self.cfg.size as isize;
        let (dr, dc) = MOVES[action[0]];
        let r = (self.agent.0 as isize + dr).clamp(0, n - 1) as usize;
        let c = (self.agent.1 as isize + dc).clamp(0, n - 1) as usize;
        self.agent = (r, c);
        self.t += 1;

        let mut reward = 0.0;
        if let Some(k) = self.track_index[r * self.cfg.size + c] {
            if !self.visited[k] {
                self.visited[k] = true;
                reward = 1.0;
            }
        }
        let (cost, kind) = if self.is_cliff(r, c) {
            (1.0, TerminalKind::Severe)
        } else if self.t >= self.timeout {
            (self.neighbour_cost(), TerminalKind::Timeout)
        } else {
            (self.neighbour_cost(), TerminalKind::None)
        };
        self.done = kind != TerminalKind::None;
        Ok(StepResult {
            obs: self.observe(),
            reward,
            cost,
            kind,
        })
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::discrete(5)
    }

    fn obs_shape(&self) -> (usize, usize) {
        (self.cfg.view, self.cfg.view)
    }

    fn visited(&self) -> &[bool] {
        &self.visited
    }
}
