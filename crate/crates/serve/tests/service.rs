mod common;

use ptrack_serve::*;
use std::time::{Duration, Instant};

#[test]
fn sessions_get_fresh_ids_and_unknown_refs_fail() {
    let svc = common::shared(120);
    let a = svc.create_session("e1", "r1", None).unwrap();
    let b = svc.create_session("e1", "r1", Some(5.0)).unwrap();
    assert_ne!(a.id, b.id);
    assert_eq!(a.status, SessionStatus::Streaming);
    assert_eq!(a.speed, ServeConfig::default().default_speed);
    assert!(matches!(svc.create_session("nope", "r1", None), Err(ServeError::NotFound(_))));
    assert!(matches!(svc.create_session("e1", "nope", None), Err(ServeError::NotFound(_))));
    assert!(matches!(svc.create_session("e1", "r1", Some(0.0)), Err(ServeError::Invalid(_))));
}

#[test]
fn marks_are_merged_and_range_checked() {
    let svc = common::shared(120);
    let s = svc.create_session("e1", "r1", None).unwrap();
    svc.submit_marks(&s.id, &[Mark::new(5, 10)]).unwrap();
    let merged = svc.submit_marks(&s.id, &[Mark::new(8, 20), Mark::new(40, 41)]).unwrap();
    assert_eq!(merged, vec![Mark::new(5, 20), Mark::new(40, 41)]);
    assert!(matches!(
        svc.submit_marks(&s.id, &[Mark::new(100, 120)]),
        Err(ServeError::OutOfRange { len: 120, .. })
    ));
    assert_eq!(svc.session(&s.id).unwrap().marks, merged);
}

#[test]
fn commit_appends_one_tuple_per_stride_frame_once() {
    let svc = common::shared(160);
    let s = svc.create_session("e1", "r1", None).unwrap();
    svc.submit_marks(&s.id, &[Mark::new(10, 60)]).unwrap();
    assert_eq!(svc.commit(&s.id).unwrap(), 4);
    let db = svc.replay_snapshot();
    let frames: Vec<usize> = db.iter().map(|t| t.frame_index).collect();
    let rewards: Vec<u8> = db.iter().map(|t| t.reward).collect();
    assert_eq!(frames, vec![0, 50, 100, 150]);
    assert_eq!(rewards, vec![1, 0, 1, 1]);
    assert!(db.iter().last().unwrap().is_terminal());
    assert!(matches!(svc.commit(&s.id), Err(ServeError::Committed(_))));
    assert!(matches!(svc.submit_marks(&s.id, &[Mark::new(1, 2)]), Err(ServeError::Committed(_))));
    assert_eq!(svc.replay_len(), 4);

    // a second session over the same run appends its own tuples
    let t = svc.create_session("e1", "r1", None).unwrap();
    assert_eq!(svc.commit(&t.id).unwrap(), 4);
    assert_eq!(svc.replay_len(), 8);
    assert!(svc.replay_snapshot().iter().skip(4).all(|t| t.reward == 1));
}

#[test]
fn committed_tuples_use_the_recorded_states() {
    let svc = common::shared(120);
    let s = svc.create_session("e1", "r1", None).unwrap();
    svc.commit(&s.id).unwrap();
    let run = &svc.run("r1").unwrap().run;
    for (t, r) in svc.replay_snapshot().iter().zip(&run.strides) {
        assert_eq!(t.state_plane, r.state);
        assert_eq!(t.action, r.action);
        assert_eq!(t.next_state_plane, r.next_state);
    }
}

#[test]
fn next_stride_mode_links_stride_frames() {
    let svc = common::service(
        120,
        ServeConfig {
            next_state: NextState::NextStride,
            ..ServeConfig::default()
        },
    );
    let s = svc.create_session("e1", "r1", None).unwrap();
    let tuples = svc.session_tuples(&s).unwrap();
    assert_eq!(tuples.len(), 3);
    assert_eq!(tuples[0].next_state_plane.as_ref(), Some(&tuples[1].state_plane));
    assert_eq!(tuples[1].next_state_plane.as_ref(), Some(&tuples[2].state_plane));
    assert!(tuples[2].is_terminal());
}

#[test]
fn recorded_runs_carry_no_rewards() {
    let svc = common::shared(120);
    let run = &svc.run("r1").unwrap().run;
    assert!(run.ground_truth.is_none());
    assert!(run.strides.iter().all(|s| s.reward.is_none()));
    assert_eq!(run.len(), 120);
}

fn wait_done(svc: &Service, job: &str) -> JobStatus {
    let t0 = Instant::now();
    loop {
        let j = svc.job(job).unwrap();
        if matches!(j.state, JobState::Done | JobState::Failed) {
            return j;
        }
        assert!(t0.elapsed() < Duration::from_secs(120), "job did not finish");
        std::thread::sleep(Duration::from_millis(20));
    }
}

#[test]
fn retraining_is_exclusive_and_walks_its_states() {
    let svc = common::shared(400);
    assert!(matches!(svc.trigger_retrain(), Err(ServeError::EmptyReplay)));
    let s = svc.create_session("e1", "r1", None).unwrap();
    svc.submit_marks(&s.id, &[Mark::new(100, 399)]).unwrap();
    svc.commit(&s.id).unwrap();
    let before = svc.net();
    let job = svc.trigger_retrain().unwrap();
    assert!(matches!(svc.trigger_retrain(), Err(ServeError::Busy)));
    let done = wait_done(&svc, &job);
    assert_eq!(done.state, JobState::Done, "{:?}", done.error);
    assert_eq!(done.transitions, vec![JobState::Queued, JobState::Running, JobState::Done]);
    assert_eq!(done.steps, 20);
    assert_eq!(done.replay_size, 8);
    assert!(done.final_loss.unwrap().is_finite());
    assert_ne!(svc.net().save_checkpoint(), before.save_checkpoint());
    // free again once done
    let next = svc.trigger_retrain().unwrap();
    assert_ne!(next, job);
    wait_done(&svc, &next);
}

#[test]
fn run_stride_must_match_the_service() {
    let mut svc = common::service(60, ServeConfig::default());
    let run = record_run(
        &common::spec(60),
        None,
        &ptrack::learn::Policy::online(0.5),
        10,
        &ptrack::backend::TrackerConfig::default(),
        "e1",
        0,
    )
    .unwrap();
    assert!(matches!(svc.add_run("r2", run), Err(ServeError::Invalid(_))));
}
