//! Annotation tasks and their stage transitions.
//!
//! ```text
//! TRACKED ─┬─ candidate_choice ─▶ CAD_SELECTED ─ correspondences ─▶ CORRESPONDED
//!          └─ none_match ───────▶ REJECTED_NO_MATCH
//! CORRESPONDED ─ solve ─▶ POSED ─ verdict ─▶ VERIFIED_OK | VERIFIED_BAD
//! ```

use cadkit_core::retrieval::CandidateList;
use cadkit_core::{CorrespondenceSet, SolveResult};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Stage {
    Tracked,
    CadSelected,
    RejectedNoMatch,
    Corresponded,
    Posed,
    VerifiedOk,
    VerifiedBad,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Tracked,
        Stage::CadSelected,
        Stage::RejectedNoMatch,
        Stage::Corresponded,
        Stage::Posed,
        Stage::VerifiedOk,
        Stage::VerifiedBad,
    ];

    pub fn successors(self) -> &'static [Stage] {
        match self {
            Stage::Tracked => &[Stage::CadSelected, Stage::RejectedNoMatch],
            Stage::CadSelected => &[Stage::Corresponded],
            Stage::Corresponded => &[Stage::Posed],
            Stage::Posed => &[Stage::VerifiedOk, Stage::VerifiedBad],
            Stage::RejectedNoMatch | Stage::VerifiedOk | Stage::VerifiedBad => &[],
        }
    }

    pub fn is_terminal(self) -> bool {
        self.successors().is_empty()
    }

    pub fn parse(s: &str) -> Option<Stage> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_uppercase())).ok()
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = serde_json::to_value(self).expect("stage serializes");
        f.write_str(s.as_str().expect("stage is a string"))
    }
}

/// What an annotator (or the service) submits to move a task along.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    CandidateChoice { index: usize },
    NoneMatch,
    Correspondences { set: CorrespondenceSet },
    Solve,
    Verdict { ok: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    CandidateChoice,
    NoneMatch,
    Correspondences,
    Solve,
    Verdict,
}

impl PayloadKind {
    pub const ALL: [PayloadKind; 5] = [
        PayloadKind::CandidateChoice,
        PayloadKind::NoneMatch,
        PayloadKind::Correspondences,
        PayloadKind::Solve,
        PayloadKind::Verdict,
    ];
}

impl Payload {
    pub fn kind(&self) -> PayloadKind {
        match self {
            Payload::CandidateChoice { .. } => PayloadKind::CandidateChoice,
            Payload::NoneMatch => PayloadKind::NoneMatch,
            Payload::Correspondences { .. } => PayloadKind::Correspondences,
            Payload::Solve => PayloadKind::Solve,
            Payload::Verdict { .. } => PayloadKind::Verdict,
        }
    }
}

/// Stage reached by submitting `kind` at `stage`, if that edge exists.
pub fn transition(stage: Stage, kind: PayloadKind) -> Option<Stage> {
    use PayloadKind as K;
    match (stage, kind) {
        (Stage::Tracked, K::CandidateChoice) => Some(Stage::CadSelected),
        (Stage::Tracked, K::NoneMatch) => Some(Stage::RejectedNoMatch),
        (Stage::CadSelected, K::Correspondences) => Some(Stage::Corresponded),
        (Stage::Corresponded, K::Solve) => Some(Stage::Posed),
        (Stage::Posed, K::Verdict) => Some(Stage::VerifiedOk),
        _ => None,
    }
}

/// One track's progress through annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub task_id: String,
    pub scene_id: String,
    pub track_id: String,
    pub stage: Stage,
    /// Bumped on every write.
    pub version: u64,
    /// Creation order, for first-in first-out assignment.
    pub seq: u64,
    pub candidates: CandidateList,
    #[serde(default)]
    pub model_id: Option<String>,
    #[serde(default)]
    pub correspondences: Option<CorrespondenceSet>,
    #[serde(default)]
    pub solve_result: Option<SolveResult>,
    #[serde(default)]
    pub annotator: Option<String>,
}

impl AnnotationTask {
    pub fn new(scene_id: &str, candidates: CandidateList, seq: u64) -> Self {
        AnnotationTask {
            task_id: format!("task-{}", candidates.track_id),
            scene_id: scene_id.to_string(),
            track_id: candidates.track_id.clone(),
            stage: Stage::Tracked,
            version: 0,
            seq,
            candidates,
            model_id: None,
            correspondences: None,
            solve_result: None,
            annotator: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TaskError {
    #[error("version conflict: task is at version {current}, submission was for {submitted}")]
    Conflict { current: u64, submitted: u64 },
    #[error("no transition from {stage} on {kind:?}")]
    InvalidTransition { stage: Stage, kind: PayloadKind },
    #[error("invalid payload: {0}")]
    InvalidPayload(String),
    #[error("pose solve failed: {0}")]
    Solve(String),
}

/// Checks and work that need the scene data behind a task.
pub trait TaskContext {
    fn check_correspondences(&self, task: &AnnotationTask, set: &CorrespondenceSet) -> Result<(), String>;
    fn solve(&self, task: &AnnotationTask) -> Result<SolveResult, String>;
}

/// Correspondences per key-frame an annotator is asked for.
pub const POINTS_PER_FRAME: std::ops::RangeInclusive<usize> = 4..=6;

fn check_protocol(task: &AnnotationTask, set: &CorrespondenceSet) -> Result<(), String> {
    if set.track_id != task.track_id {
        return Err(format!("correspondences are for track {}, task is {}", set.track_id, task.track_id));
    }
    if Some(&set.model_id) != task.model_id.as_ref() {
        return Err(format!(
            "correspondences use model {}, selected model is {:?}",
            set.model_id, task.model_id
        ));
    }
    if set.items.is_empty() {
        return Err("no correspondences".into());
    }
    for frame in set.frame_ids() {
        let n = set.items.iter().filter(|c| c.frame_id == frame).count();
        if !POINTS_PER_FRAME.contains(&n) {
            return Err(format!(
                "frame {frame} has {n} correspondences, expected {}-{}",
                POINTS_PER_FRAME.start(),
                POINTS_PER_FRAME.end()
            ));
        }
    }
    Ok(())
}

/// Apply a submission made against `version`. The task is returned at its
/// new stage with the version bumped; on error nothing changes.
pub fn advance_task(
    task: &AnnotationTask,
    version: u64,
    payload: Payload,
    ctx: &dyn TaskContext,
) -> Result<AnnotationTask, TaskError> {
    if version != task.version {
        return Err(TaskError::Conflict {
            current: task.version,
            submitted: version,
        });
    }
    let kind = payload.kind();
    let Some(mut next_stage) = transition(task.stage, kind) else {
        return Err(TaskError::InvalidTransition {
            stage: task.stage,
            kind,
        });
    };

    let mut next = task.clone();
    match payload {
        Payload::CandidateChoice { index } => {
            let chosen = task.candidates.entries.get(index).ok_or_else(|| {
                TaskError::InvalidPayload(format!(
                    "candidate {index} out of range ({} candidates)",
                    task.candidates.entries.len()
                ))
            })?;
            next.model_id = Some(chosen.model_id.clone());
        }
        Payload::NoneMatch => {}
        Payload::Correspondences { set } => {
            check_protocol(task, &set).map_err(TaskError::InvalidPayload)?;
            ctx.check_correspondences(task, &set)
                .map_err(TaskError::InvalidPayload)?;
            next.correspondences = Some(set);
        }
        Payload::Solve => {
            next.solve_result = Some(ctx.solve(task).map_err(TaskError::Solve)?);
        }
        Payload::Verdict { ok } => {
            if !ok {
                next_stage = Stage::VerifiedBad;
            }
        }
    }
    next.stage = next_stage;
    next.version = task.version + 1;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use cadkit_core::retrieval::Candidate;

    struct Accept;
    impl TaskContext for Accept {
        fn check_correspondences(&self, _: &AnnotationTask, _: &CorrespondenceSet) -> Result<(), String> {
            Ok(())
        }
        fn solve(&self, _: &AnnotationTask) -> Result<SolveResult, String> {
            Err("no solver in this test".into())
        }
    }

    fn task() -> AnnotationTask {
        let entries = (0..5)
            .map(|i| Candidate {
                model_id: format!("m{i}"),
                score: 1.0 - i as f64 / 10.0,
            })
            .collect();
        AnnotationTask::new(
            "s",
            CandidateList {
                track_id: "t".into(),
                entries,
            },
            0,
        )
    }

    #[test]
    fn choosing_a_candidate_selects_its_model() {
        let t = advance_task(&task(), 0, Payload::CandidateChoice { index: 3 }, &Accept).unwrap();
        assert_eq!(t.stage, Stage::CadSelected);
        assert_eq!(t.model_id.as_deref(), Some("m3"));
        assert_eq!(t.version, 1);
    }

    #[test]
    fn none_match_is_terminal() {
        let t = advance_task(&task(), 0, Payload::NoneMatch, &Accept).unwrap();
        assert_eq!(t.stage, Stage::RejectedNoMatch);
        assert!(t.stage.is_terminal());
        let err = advance_task(&t, 1, Payload::CandidateChoice { index: 0 }, &Accept).unwrap_err();
        assert!(matches!(err, TaskError::InvalidTransition { .. }));
    }

    #[test]
    fn stale_version_is_a_conflict() {
        let t = task();
        let err = advance_task(&t, 7, Payload::NoneMatch, &Accept).unwrap_err();
        assert_eq!(err, TaskError::Conflict { current: 0, submitted: 7 });
    }

    #[test]
    fn out_of_range_choice_is_invalid() {
        let err = advance_task(&task(), 0, Payload::CandidateChoice { index: 5 }, &Accept).unwrap_err();
        assert!(matches!(err, TaskError::InvalidPayload(_)));
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(Stage::parse(&s.to_string()), Some(s));
        }
        assert_eq!(Stage::parse("cad_selected"), Some(Stage::CadSelected));
        assert_eq!(Stage::parse("DONE"), None);
    }

    #[test]
    fn payload_wire_format() {
        let p: Payload = serde_json::from_str(r#"{"kind": "verdict", "ok": false}"#).unwrap();
        assert_eq!(p, Payload::Verdict { ok: false });
        let p: Payload = serde_json::from_str(r#"{"kind": "none_match"}"#).unwrap();
        assert_eq!(p.kind(), PayloadKind::NoneMatch);
    }
}
