#[path = "../../core/tests/common/mod.rs"]
mod common;
mod support;

use common::small_spec;
use protodebug::datagen::generate;
use protodebug::debugger::{
    run_session, Decision, LogEntry, OracleAnnotator, SessionReport, SessionSummary, Verdict,
    VerdictScope,
};
use protodebug::model::ProtoPNet;
use protodebug_service::server::{PrototypesView, RoundMetrics, SessionView};
use protodebug_service::{AppState, JobState, JobStatus, ServerOptions};
use reqwest::StatusCode;
use serde_json::json;
use support::{oracle_over_http, session_config, trained, Client};

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn forbid_verdicts_show_up_in_the_session_counts() {
    let data = generate(&small_spec(21)).unwrap();
    let model = trained(&data, 3);
    let state = AppState::new(model, data, session_config(2), ServerOptions::default()).unwrap();
    let c = Client::start(state).await;

    let before: SessionView = c.get_json("/api/session").await;
    let protos: PrototypesView = c.get_json("/api/prototypes").await;
    assert_eq!(protos.prototypes.len(), 10);
    assert!(protos.prototypes.iter().all(|p| p.candidates.len() == 2));
    let target = protos
        .prototypes
        .iter()
        .flat_map(|p| &p.candidates)
        .find(|v| !v.candidate.patches.is_empty())
        .unwrap()
        .candidate
        .clone();
    let v = Verdict {
        prototype: target.prototype,
        image: target.image.clone(),
        decision: Decision::Forbid,
        scope: VerdictScope::Class,
    };
    let r = c.verdict(&v).await;
    assert_eq!(r.status(), StatusCode::OK);
    let counts: SessionSummary = r.json().await.unwrap();
    let after: SessionView = c.get_json("/api/session").await;
    assert_eq!(counts, after.summary);
    for y in 0..before.summary.forbidden.len() {
        let grew = usize::from(y == target.class);
        assert_eq!(
            after.summary.forbidden[y],
            before.summary.forbidden[y] + grew
        );
    }
    assert_eq!(after.summary.verdicts_this_round, 1);

    let protos: PrototypesView = c.get_json("/api/prototypes").await;
    let shown = protos.prototypes[target.prototype]
        .candidates
        .iter()
        .find(|v| v.candidate.image == target.image)
        .unwrap();
    assert_eq!(shown.verdict, Some(Decision::Forbid));

    // The same pair twice conflicts; unknown ids are not found.
    assert_eq!(c.verdict(&v).await.status(), StatusCode::CONFLICT);
    let unknown = Verdict {
        image: "nope".into(),
        ..v.clone()
    };
    assert_eq!(c.verdict(&unknown).await.status(), StatusCode::NOT_FOUND);
    let r = c.get(&shown.overlay_url).await;
    assert_eq!(r.status(), StatusCode::OK);
    assert_eq!(r.headers()["content-type"], "image/png");
    assert_eq!(&r.bytes().await.unwrap()[..4], b"\x89PNG");
    assert_eq!(
        c.get("/api/images/nope/overlay/0").await.status(),
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        c.get(&format!("/api/images/{}/overlay/99", target.image))
            .await
            .status(),
        StatusCode::NOT_FOUND
    );
    assert_eq!(c.get("/api/jobs/0").await.status(), StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn verdicts_conflict_while_a_finetune_runs() {
    let data = generate(&small_spec(22)).unwrap();
    let model = trained(&data, 4);
    let state = AppState::new(model, data, session_config(100), ServerOptions::default()).unwrap();
    let c = Client::start(state).await;

    let protos: PrototypesView = c.get_json("/api/prototypes").await;
    let mut judgeable = protos
        .prototypes
        .iter()
        .flat_map(|p| &p.candidates)
        .filter(|v| !v.candidate.patches.is_empty());
    let first = &judgeable.next().unwrap().candidate;
    let second = &judgeable.next().unwrap().candidate;
    let forbid = |c: &protodebug::debugger::Candidate| Verdict {
        prototype: c.prototype,
        image: c.image.clone(),
        decision: Decision::Forbid,
        scope: VerdictScope::Class,
    };
    assert_eq!(c.verdict(&forbid(first)).await.status(), StatusCode::OK);

    let r = c.post("/api/rounds/finetune", json!({})).await;
    assert_eq!(r.status(), StatusCode::ACCEPTED);
    let job: JobStatus = r.json().await.unwrap();
    assert_eq!(job.state, JobState::Running);
    let during: SessionView = c.get_json("/api/session").await;
    assert_eq!(during.active_job, Some(job.id));
    assert_eq!(
        c.verdict(&forbid(second)).await.status(),
        StatusCode::CONFLICT
    );
    assert_eq!(
        c.post("/api/rounds/finetune", json!({})).await.status(),
        StatusCode::CONFLICT
    );

    let done = c.wait(&job).await;
    assert_eq!(done.state, JobState::Done, "{}", done.message);
    assert_eq!(done.progress, 1.0);
    let s: SessionView = c.get_json("/api/session").await;
    assert_eq!((s.summary.round, s.active_job), (1, None));
    assert_eq!(s.summary.forbidden.iter().sum::<usize>(), 1);
    let metrics: Vec<RoundMetrics> = c.get_json("/api/metrics").await;
    assert_eq!(
        metrics.iter().map(|m| m.round).collect::<Vec<_>>(),
        vec![0, 1]
    );
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn converged_sessions_are_gone() {
    let data = generate(&small_spec(23)).unwrap();
    let model = trained(&data, 5);
    let state = AppState::new(model, data, session_config(2), ServerOptions::default()).unwrap();
    let c = Client::start(state).await;
    let protos: PrototypesView = c.get_json("/api/prototypes").await;
    let cand = protos.prototypes[0].candidates[0].candidate.clone();

    // A round without forbid verdicts converges.
    let job = c.finish_round().await;
    assert_eq!(job.state, JobState::Done);
    let s: SessionView = c.get_json("/api/session").await;
    assert!(s.finished);
    let v = Verdict {
        prototype: cand.prototype,
        image: cand.image,
        decision: Decision::Keep,
        scope: VerdictScope::Class,
    };
    assert_eq!(c.verdict(&v).await.status(), StatusCode::GONE);
    assert_eq!(
        c.post("/api/rounds/finetune", json!({})).await.status(),
        StatusCode::GONE
    );
    let report: SessionReport = c.get_json("/api/report").await;
    assert!(report.converged);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn sessions_replayed_over_http_match_the_in_process_run() {
    let data = generate(&small_spec(24)).unwrap();
    let model = trained(&data, 6);

    let mut direct = model.clone();
    let (_, report) = run_session(
        &mut direct,
        &data,
        session_config(3),
        &mut OracleAnnotator::default(),
    )
    .unwrap();
    let expected = (
        serde_json::to_vec(&report).unwrap(),
        direct.to_bytes().unwrap(),
    );
    assert!(
        !report.rounds.is_empty() && report.rounds[0].forbid > 0,
        "the oracle found nothing to forbid"
    );

    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("feedback.jsonl");
    let options = ServerOptions {
        feedback_log: Some(log.clone()),
        out_dir: Some(dir.path().join("out")),
    };
    let state = AppState::new(model.clone(), data.clone(), session_config(3), options).unwrap();
    let c = Client::start(state).await;
    oracle_over_http(&c, &data).await;
    assert_eq!(c.report_and_checkpoint().await, expected);
    let saved = ProtoPNet::load(dir.path().join("out").join("model.ckpt")).unwrap();
    assert_eq!(saved.to_bytes().unwrap(), expected.1);

    // Replaying the feedback log on a fresh server reproduces the session.
    let entries: Vec<LogEntry> = std::fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(!entries.is_empty());
    let state = AppState::new(
        model,
        data.clone(),
        session_config(3),
        ServerOptions::default(),
    )
    .unwrap();
    let replay = Client::start(state).await;
    let rounds = entries.iter().map(|e| e.round).max().unwrap() + 1;
    for round in 0..rounds {
        for e in entries.iter().filter(|e| e.round == round) {
            assert_eq!(replay.verdict(&e.verdict).await.status(), StatusCode::OK);
        }
        replay.finish_round().await;
    }
    let s: SessionView = replay.get_json("/api/session").await;
    assert!(s.finished);
    assert_eq!(replay.report_and_checkpoint().await, expected);
}
