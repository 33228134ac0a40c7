use serde::{Deserialize, Serialize};

use super::Scene;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// Which instances the user intends to segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TaskMode {
    /// Every instance, regardless of class.
    T1,
    /// Only instances sharing the prompted class.
    T2,
}

impl std::fmt::Display for TaskMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TaskMode::T1 => f.write_str("T1"),
            TaskMode::T2 => f.write_str("T2"),
        }
    }
}

impl std::str::FromStr for TaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "T1" => Ok(TaskMode::T1),
            "T2" => Ok(TaskMode::T2),
            other => Err(Error::Config(format!("unknown task mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskTarget {
    pub mode: TaskMode,
    pub prompted_class: Option<u8>,
    pub composite_mask: BinaryMask,
}

/// Union of all instances (T1) or of the prompted class's instances (T2).
pub fn build_task_target(
    scene: &Scene,
    mode: TaskMode,
    prompted_class: Option<u8>,
) -> Result<TaskTarget> {
    let mut composite = BinaryMask::empty(scene.image.shape());
    match (mode, prompted_class) {
        (TaskMode::T1, None) => {
            for inst in &scene.instances {
                composite.union_with(inst.mask())?;
            }
        }
        (TaskMode::T2, Some(class)) => {
            let mut found = false;
            for inst in scene.instances_of_class(class) {
                composite.union_with(inst.mask())?;
                found = true;
            }
            if !found {
                return Err(Error::Lookup(format!(
                    "class {class} not present in {}",
                    scene.id
                )));
            }
        }
        (TaskMode::T1, Some(_)) => {
            return Err(Error::Contract("T1 targets take no prompted class".into()))
        }
        (TaskMode::T2, None) => {
            return Err(Error::Contract("T2 targets need a prompted class".into()))
        }
    }
    Ok(TaskTarget {
        mode,
        prompted_class,
        composite_mask: composite,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_scene, SceneSpec};

    #[test]
    fn t1_is_union_of_all() {
        let scene = generate_scene(&SceneSpec::default(), 3).unwrap();
        let t = build_task_target(&scene, TaskMode::T1, None).unwrap();
        let total: usize = scene.instances.iter().map(|i| i.mask().count()).sum();
        assert_eq!(t.composite_mask.count(), total);
    }

    #[test]
    fn t2_selects_class() {
        let scene = generate_scene(&SceneSpec::default(), 3).unwrap();
        let t = build_task_target(&scene, TaskMode::T2, Some(1)).unwrap();
        for inst in &scene.instances {
            let overlap = inst.mask().intersection_count(&t.composite_mask).unwrap();
            if inst.class_id == 1 {
                assert_eq!(overlap, inst.mask().count());
            } else {
                assert_eq!(overlap, 0);
            }
        }
    }

    #[test]
    fn t2_absent_class_is_lookup_error() {
        let scene = generate_scene(&SceneSpec::default(), 3).unwrap();
        assert!(matches!(
            build_task_target(&scene, TaskMode::T2, Some(7)),
            Err(Error::Lookup(_))
        ));
    }
}
