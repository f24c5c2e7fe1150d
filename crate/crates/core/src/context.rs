//! Task context: plan, captioned expert reference frames and feedback
//! instructions (`.task.json`).

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::episode::EpisodeError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceFrame {
    pub uri: String,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskContext {
    pub task_id: String,
    pub description: String,
    pub plan: Vec<String>,
    pub reference_frames: Vec<ReferenceFrame>,
    pub expert_instructions: String,
}

impl TaskContext {
    pub fn validated(self) -> Result<TaskContext, EpisodeError> {
        let schema = |message: &str| EpisodeError::Schema {
            line: None,
            message: message.to_string(),
        };
        if self.plan.is_empty() {
            return Err(schema("task plan is empty"));
        }
        let mut seen = BTreeSet::new();
        for step in &self.plan {
            if step.trim().is_empty() {
                return Err(schema("task plan contains an empty subtask"));
            }
            if !seen.insert(step.as_str()) {
                return Err(EpisodeError::Schema {
                    line: None,
                    message: format!("duplicate subtask {step:?} in plan"),
                });
            }
        }
        if self.reference_frames.is_empty() {
            return Err(schema("no reference frames; every task needs captioned expert references"));
        }
        Ok(self)
    }

    pub fn plan_len(&self) -> usize {
        self.plan.len()
    }

    /// Subtask name for a 1-based index.
    pub fn subtask_name(&self, index: usize) -> Option<&str> {
        index.checked_sub(1).and_then(|i| self.plan.get(i)).map(String::as_str)
    }

    pub fn from_json(text: &str) -> Result<TaskContext, EpisodeError> {
        let ctx: TaskContext = serde_json::from_str(text).map_err(|e| EpisodeError::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        ctx.validated()
    }
}

pub fn load_task_context(path: impl AsRef<Path>) -> Result<TaskContext, EpisodeError> {
    TaskContext::from_json(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn handover() -> TaskContext {
        TaskContext {
            task_id: "handover".into(),
            description: "Right arm picks and presents the item, left arm receives, carries and drops it in the bin.".into(),
            plan: ["pick", "present", "receive", "carry", "drop"].map(String::from).to_vec(),
            reference_frames: vec![ReferenceFrame {
                uri: "refs/handover_00.png".into(),
                caption: "right gripper closed around the item".into(),
            }],
            expert_instructions: "Cite time windows.".into(),
        }
    }

    #[test]
    fn handover_fixture_has_five_subtasks() {
        let text = serde_json::to_string(&handover()).unwrap();
        let ctx = TaskContext::from_json(&text).unwrap();
        assert_eq!(ctx.plan_len(), 5);
        assert_eq!(ctx.subtask_name(5), Some("drop"));
        assert_eq!(ctx.subtask_name(0), None);
    }

    #[test]
    fn four_step_plan() {
        let mut ctx = handover();
        ctx.plan.truncate(4);
        assert_eq!(ctx.validated().unwrap().plan_len(), 4);
    }

    #[test]
    fn zero_reference_frames_rejected() {
        let mut ctx = handover();
        ctx.reference_frames.clear();
        assert!(matches!(ctx.validated(), Err(EpisodeError::Schema { .. })));
    }

    #[test]
    fn empty_or_duplicate_plan_rejected() {
        let mut ctx = handover();
        ctx.plan.clear();
        assert!(ctx.validated().is_err());
        let mut ctx = handover();
        ctx.plan.push("pick".into());
        assert!(ctx.validated().is_err());
    }
}
