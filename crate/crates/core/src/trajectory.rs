//! Trajectories and the JSON Lines dataset format.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryKind {
    Demo,
    Perturbed,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryRepr {
    env_id: String,
    kind: TrajectoryKind,
    success: bool,
    states: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gripper: Option<Vec<u8>>,
}

/// A state/action time series with a binary success label.
///
/// Navigation states are `[x, y]`; manipulation states are
/// `[ee_x, ee_y, gripper, obj_x, obj_y, holding]` and carry a gripper
/// command channel alongside the planar velocity actions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TrajectoryRepr", into = "TrajectoryRepr")]
pub struct Trajectory {
    pub env_id: String,
    pub kind: TrajectoryKind,
    pub success: bool,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub gripper: Option<Vec<u8>>,
}

impl TryFrom<TrajectoryRepr> for Trajectory {
    type Error = Error;

    fn try_from(r: TrajectoryRepr) -> Result<Self> {
        let t = Trajectory {
            env_id: r.env_id,
            kind: r.kind,
            success: r.success,
            states: r.states,
            actions: r.actions,
            gripper: r.gripper,
        };
        t.validate()?;
        Ok(t)
    }
}

impl From<Trajectory> for TrajectoryRepr {
    fn from(t: Trajectory) -> Self {
        TrajectoryRepr {
            env_id: t.env_id,
            kind: t.kind,
            success: t.success,
            states: t.states,
            actions: t.actions,
            gripper: t.gripper,
        }
    }
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.states.len();
        if t < 2 {
            return Err(Error::Input(format!("trajectory needs at least 2 states, has {t}")));
        }
        if self.actions.len() != t - 1 {
            return Err(Error::Input(format!(
                "{} actions for {t} states",
                self.actions.len()
            )));
        }
        let dim = self.states[0].len();
        if dim == 0 || self.states.iter().any(|s| s.len() != dim) {
            return Err(Error::Input("ragged or empty state rows".into()));
        }
        if let Some(g) = &self.gripper {
            if g.len() != t - 1 || g.iter().any(|&b| b > 1) {
                return Err(Error::Input("gripper channel must be T-1 bits".into()));
            }
        }
        if self.kind == TrajectoryKind::Demo && !self.success {
            return Err(Error::Input("demonstrations must be labelled successful".into()));
        }
        Ok(())
    }

    /// Planar positions: the first two state coordinates.
    pub fn positions(&self) -> Vec<Vec2> {
        self.states.iter().map(|s| Vec2::new(s[0], s[1])).collect()
    }
}

pub fn write_jsonl(path: &Path, trajectories: &[Trajectory]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for t in trajectories {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Trajectory>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_trajectory() -> impl Strategy<Value = Trajectory> {
        (2usize..12, 1usize..6, any::<bool>(), any::<bool>()).prop_flat_map(
            |(t, d, with_gripper, success)| {
                (
                    prop::collection::vec(prop::collection::vec(-1e3f64..1e3, d), t),
                    prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 2), t - 1),
                    prop::collection::vec(0u8..2, t - 1),
                )
                    .prop_map(move |(states, actions, g)| Trajectory {
                        env_id: "env".into(),
                        kind: TrajectoryKind::Perturbed,
                        success,
                        states,
                        actions,
                        gripper: with_gripper.then_some(g),
                    })
            },
        )
    }

    proptest! {
        #[test]
        fn json_round_trip(t in arb_trajectory()) {
            let line = serde_json::to_string(&t).unwrap();
            let back: Trajectory = serde_json::from_str(&line).unwrap();
            prop_assert_eq!(back, t);
        }
    }

    #[test]
    fn field_names_are_fixed() {
        let t = Trajectory {
            env_id: "nav-k3-s7".into(),
            kind: TrajectoryKind::Demo,
            success: true,
            states: vec![vec![0.0, 0.0], vec![0.01, 0.0]],
            actions: vec![vec![1.0, 0.0]],
            gripper: None,
        };
        let v: serde_json::Value = serde_json::to_value(&t).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["actions", "env_id", "kind", "states", "success"]);
        assert_eq!(v["kind"], "demo");
    }

    #[test]
    fn invalid_rows_rejected() {
        let bad = r#"{"env_id":"e","kind":"demo","success":false,"states":[[0,0],[1,1]],"actions":[[1,1]]}"#;
        assert!(serde_json::from_str::<Trajectory>(bad).is_err());
        let bad = r#"{"env_id":"e","kind":"perturbed","success":false,"states":[[0,0],[1,1]],"actions":[]}"#;
        assert!(serde_json::from_str::<Trajectory>(bad).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let t = Trajectory {
            env_id: "manip-s1".into(),
            kind: TrajectoryKind::Perturbed,
            success: false,
            states: vec![vec![0.1; 6], vec![0.2; 6], vec![0.3; 6]],
            actions: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            gripper: Some(vec![0, 1]),
        };
        write_jsonl(&path, &[t.clone(), t.clone()]).unwrap();
        assert_eq!(read_jsonl(&path).unwrap(), vec![t.clone(), t]);
    }
}
