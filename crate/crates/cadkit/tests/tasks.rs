//! Every submission kind tried at every stage.

use cadkit::tasks::{advance_task, AnnotationTask, Payload, PayloadKind, Stage, TaskContext, TaskError};
use cadkit_core::geometry::{Vec2, Vec3};
use cadkit_core::pose::{Correspondence, CorrespondenceSet, LossBreakdown, ScaleMode, SolveResult};
use cadkit_core::retrieval::{Candidate, CandidateList};
use cadkit_core::Pose9DoF;
use proptest::prelude::*;

struct Stub;

impl TaskContext for Stub {
    fn check_correspondences(&self, _: &AnnotationTask, _: &CorrespondenceSet) -> Result<(), String> {
        Ok(())
    }

    fn solve(&self, _: &AnnotationTask) -> Result<SolveResult, String> {
        Ok(SolveResult {
            pose: Pose9DoF::identity(),
            final_losses: LossBreakdown::default(),
            mean_reproj_px: 0.5,
            per_frame_reproj_px: Vec::new(),
            chosen_symmetry_index: 0,
            scale_mode: ScaleMode::Full,
            scale_note: None,
            converged: true,
            start_index: 0,
        })
    }
}

struct FailingSolver;

impl TaskContext for FailingSolver {
    fn check_correspondences(&self, _: &AnnotationTask, _: &CorrespondenceSet) -> Result<(), String> {
        Ok(())
    }

    fn solve(&self, _: &AnnotationTask) -> Result<SolveResult, String> {
        Err("diverged".into())
    }
}

fn correspondences(model_id: &str, per_frame: &[usize]) -> CorrespondenceSet {
    let items = per_frame
        .iter()
        .enumerate()
        .flat_map(|(f, &n)| {
            (0..n).map(move |i| Correspondence {
                frame_id: f as u32,
                model_point: Vec3::new(i as f64, 0.0, 0.0),
                pixel: Vec2::new(10.0 * i as f64, 5.0),
            })
        })
        .collect();
    CorrespondenceSet {
        track_id: "t7".into(),
        model_id: model_id.into(),
        flipped: false,
        items,
    }
}

fn task_at(stage: Stage) -> AnnotationTask {
    let entries = (0..3)
        .map(|i| Candidate {
            model_id: format!("m{i}"),
            score: 0.9 - 0.1 * i as f64,
        })
        .collect();
    let mut task = AnnotationTask::new(
        "s",
        CandidateList {
            track_id: "t7".into(),
            entries,
        },
        0,
    );
    task.stage = stage;
    task.version = 3;
    task.model_id = Some("m1".into());
    task
}

fn payload(kind: PayloadKind) -> Payload {
    match kind {
        PayloadKind::CandidateChoice => Payload::CandidateChoice { index: 1 },
        PayloadKind::NoneMatch => Payload::NoneMatch,
        PayloadKind::Correspondences => Payload::Correspondences {
            set: correspondences("m1", &[4, 6]),
        },
        PayloadKind::Solve => Payload::Solve,
        PayloadKind::Verdict => Payload::Verdict { ok: true },
    }
}

/// The allowed edges, listed out.
const EDGES: [(Stage, PayloadKind, Stage); 5] = [
    (Stage::Tracked, PayloadKind::CandidateChoice, Stage::CadSelected),
    (Stage::Tracked, PayloadKind::NoneMatch, Stage::RejectedNoMatch),
    (Stage::CadSelected, PayloadKind::Correspondences, Stage::Corresponded),
    (Stage::Corresponded, PayloadKind::Solve, Stage::Posed),
    (Stage::Posed, PayloadKind::Verdict, Stage::VerifiedOk),
];

#[test]
fn every_stage_and_payload_pair() {
    let mut accepted = 0;
    for stage in Stage::ALL {
        for kind in PayloadKind::ALL {
            let task = task_at(stage);
            let expected = EDGES.iter().find(|(s, k, _)| *s == stage && *k == kind).map(|e| e.2);
            match (advance_task(&task, 3, payload(kind), &Stub), expected) {
                (Ok(next), Some(to)) => {
                    assert_eq!(next.stage, to);
                    assert_eq!(next.version, 4);
                    assert!(stage.successors().contains(&to));
                    accepted += 1;
                }
                (Err(TaskError::InvalidTransition { stage: s, kind: k }), None) => {
                    assert_eq!((s, k), (stage, kind));
                }
                (got, want) => panic!("{stage} + {kind:?}: got {got:?}, expected {want:?}"),
            }
        }
    }
    assert_eq!(accepted, EDGES.len());
}

#[test]
fn rejecting_a_pose_ends_in_verified_bad() {
    let next = advance_task(&task_at(Stage::Posed), 3, Payload::Verdict { ok: false }, &Stub).unwrap();
    assert_eq!(next.stage, Stage::VerifiedBad);
    assert!(next.stage.is_terminal());
}

#[test]
fn stale_versions_conflict_before_anything_else() {
    for stage in Stage::ALL {
        for kind in PayloadKind::ALL {
            let err = advance_task(&task_at(stage), 2, payload(kind), &Stub).unwrap_err();
            assert_eq!(
                err,
                TaskError::Conflict {
                    current: 3,
                    submitted: 2
                }
            );
        }
    }
}

#[test]
fn malformed_payloads_are_rejected() {
    let tracked = task_at(Stage::Tracked);
    let out_of_range = advance_task(&tracked, 3, Payload::CandidateChoice { index: 3 }, &Stub);
    assert!(matches!(out_of_range, Err(TaskError::InvalidPayload(_))));

    let selected = task_at(Stage::CadSelected);
    let bad_sets = [
        correspondences("m1", &[4, 3]),
        correspondences("m1", &[7]),
        correspondences("m2", &[4, 4]),
        correspondences("m1", &[]),
        CorrespondenceSet {
            track_id: "other".into(),
            ..correspondences("m1", &[5])
        },
    ];
    for set in bad_sets {
        let r = advance_task(&selected, 3, Payload::Correspondences { set }, &Stub);
        assert!(matches!(r, Err(TaskError::InvalidPayload(_))), "{r:?}");
    }

    let r = advance_task(&task_at(Stage::Corresponded), 3, Payload::Solve, &FailingSolver);
    assert_eq!(r, Err(TaskError::Solve("diverged".into())));
}

#[test]
fn payloads_use_the_documented_json() {
    let p: Payload = serde_json::from_str(r#"{"kind":"candidate_choice","index":2}"#).unwrap();
    assert_eq!(p, Payload::CandidateChoice { index: 2 });
    let p: Payload = serde_json::from_str(r#"{"kind":"verdict","ok":false}"#).unwrap();
    assert_eq!(p, Payload::Verdict { ok: false });
    assert_eq!(serde_json::to_string(&Payload::NoneMatch).unwrap(), r#"{"kind":"none_match"}"#);
    assert_eq!(serde_json::to_string(&Stage::CadSelected).unwrap(), r#""CAD_SELECTED""#);
    assert_eq!(Stage::parse("verified_ok"), Some(Stage::VerifiedOk));
    assert_eq!(Stage::parse("DONE"), None);
}

fn any_payload() -> impl Strategy<Value = Payload> {
    prop_oneof![
        (0usize..5).prop_map(|index| Payload::CandidateChoice { index }),
        Just(Payload::NoneMatch),
        prop::sample::select(vec![vec![4, 5], vec![6], vec![3], vec![4, 8]])
            .prop_map(|n| Payload::Correspondences { set: correspondences("m1", &n) }),
        Just(Payload::Solve),
        any::<bool>().prop_map(|ok| Payload::Verdict { ok }),
    ]
}

proptest! {
    /// Random submissions only ever walk the graph forward, one version per
    /// accepted write.
    #[test]
    fn random_sessions_follow_the_graph(steps in prop::collection::vec((any_payload(), any::<bool>()), 0..30)) {
        let mut task = task_at(Stage::Tracked);
        task.model_id = None;
        let mut writes = 0;
        for (p, stale) in steps {
            let version = if stale { task.version.wrapping_sub(1) } else { task.version };
            let before = task.stage;
            match advance_task(&task, version, p, &Stub) {
                Ok(next) => {
                    prop_assert!(!stale);
                    prop_assert!(before.successors().contains(&next.stage));
                    prop_assert_eq!(next.version, task.version + 1);
                    task = next;
                    writes += 1;
                }
                Err(_) => prop_assert_eq!(task.stage, before),
            }
        }
        prop_assert_eq!(task.version, 3 + writes);
        prop_assert!(writes <= 4);
    }
}
