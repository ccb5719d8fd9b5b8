use std::fs;
use std::path::Path;

use serde::Serialize;

use super::{EnvError, TerminalKind};
use crate::homography::PatchGrid;

/// One transition of an episode log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub t: usize,
    pub action: String,
    pub reward: f64,
    pub cost: f64,
    pub terminal_kind: &'static str,
}

impl LogRow {
    pub fn new(t: usize, action: &[usize], reward: f64, cost: f64, kind: TerminalKind) -> Self {
        Self {
            t,
            action: action_label(action),
            reward,
            cost,
            terminal_kind: kind.as_str(),
        }
    }
}

/// `[2, 0, 1]` → `"2-0-1"`.
pub fn action_label(action: &[usize]) -> String {
    action.iter().map(|a| a.to_string()).collect::<Vec<_>>().join("-")
}

pub fn write_episode_csv(path: &Path, rows: &[LogRow]) -> Result<(), EnvError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `obs[t]` as `<stem>_t<t>.pgm` inside `dir`.
pub fn write_observations(dir: &Path, stem: &str, obs: &[PatchGrid]) -> Result<(), EnvError> {
    fs::create_dir_all(dir)?;
    for (t, g) in obs.iter().enumerate() {
        fs::write(dir.join(format!("{stem}_t{t:04}.pgm")), g.to_pgm())?;
    }
    Ok(())
}
