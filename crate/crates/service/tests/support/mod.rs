//! HTTP client and fixtures shared by the service tests.

#![allow(dead_code)]

use std::time::Duration;

use protodebug::dataset::Dataset;
use protodebug::debugger::{
    Annotator, OracleAnnotator, SessionConfig, SessionReport, Verdict, VerdictScope,
};
use protodebug::model::{ModelConfig, ProtoPNet};
use protodebug::training::{train_stage1, TrainConfig};
use protodebug_service::server::{PrototypesView, SessionView};
use protodebug_service::{router, AppState, JobState, JobStatus};
use reqwest::StatusCode;
use serde_json::json;

use crate::common::quick_train;

pub fn trained(data: &Dataset, seed: u64) -> ProtoPNet {
    let mut m = ProtoPNet::new(ModelConfig::default(), seed).unwrap();
    train_stage1(
        &mut m,
        &data.train,
        &data.test,
        &TrainConfig {
            seed,
            ..quick_train()
        },
    )
    .unwrap();
    m
}

pub fn session_config(epochs: usize) -> SessionConfig {
    let finetune = TrainConfig {
        epochs,
        batch_size: 10,
        evaluate_test: false,
        ..TrainConfig::finetune()
    };
    SessionConfig {
        top_a: 2,
        max_rounds: 2,
        finetune,
        ..SessionConfig::default()
    }
}

pub struct Client {
    pub base: String,
    pub http: reqwest::Client,
}

impl Client {
    pub async fn start(state: AppState) -> Self {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        tokio::spawn(async move { axum::serve(listener, router(state)).await.unwrap() });
        Self {
            base: format!("http://{addr}"),
            http: reqwest::Client::new(),
        }
    }

    pub async fn get(&self, path: &str) -> reqwest::Response {
        self.http
            .get(format!("{}{path}", self.base))
            .send()
            .await
            .unwrap()
    }

    pub async fn get_json<T: serde::de::DeserializeOwned>(&self, path: &str) -> T {
        let r = self.get(path).await;
        assert_eq!(r.status(), StatusCode::OK, "GET {path}");
        r.json().await.unwrap()
    }

    pub async fn post(&self, path: &str, body: serde_json::Value) -> reqwest::Response {
        self.http
            .post(format!("{}{path}", self.base))
            .json(&body)
            .send()
            .await
            .unwrap()
    }

    pub async fn verdict(&self, v: &Verdict) -> reqwest::Response {
        self.post("/api/feedback", serde_json::to_value(v).unwrap())
            .await
    }

    pub async fn wait(&self, job: &JobStatus) -> JobStatus {
        let mut j = job.clone();
        while !j.state.is_terminal() {
            tokio::time::sleep(Duration::from_millis(20)).await;
            j = self.get_json(&format!("/api/jobs/{}", job.id)).await;
        }
        j
    }

    /// Closes the round and waits for its fine-tune, if any.
    pub async fn finish_round(&self) -> JobStatus {
        let r = self.post("/api/rounds/finetune", json!({})).await;
        assert!(r.status().is_success(), "{}", r.status());
        let job: JobStatus = r.json().await.unwrap();
        self.wait(&job).await
    }

    pub async fn report_and_checkpoint(&self) -> (Vec<u8>, Vec<u8>) {
        let report: SessionReport = self.get_json("/api/report").await;
        let ckpt = self
            .get("/api/checkpoint")
            .await
            .bytes()
            .await
            .unwrap()
            .to_vec();
        (serde_json::to_vec(&report).unwrap(), ckpt)
    }
}

/// Plays the oracle against the API until the session finishes.
pub async fn oracle_over_http(c: &Client, data: &Dataset) {
    let mut oracle = OracleAnnotator::default();
    loop {
        let s: SessionView = c.get_json("/api/session").await;
        if s.finished {
            return;
        }
        let protos: PrototypesView = c.get_json("/api/prototypes").await;
        for view in protos.prototypes.iter().flat_map(|p| &p.candidates) {
            let cand = &view.candidate;
            let decision = oracle.judge(cand, data.find(&cand.image).unwrap()).unwrap();
            let v = Verdict {
                prototype: cand.prototype,
                image: cand.image.clone(),
                decision,
                scope: VerdictScope::Class,
            };
            assert_eq!(c.verdict(&v).await.status(), StatusCode::OK);
        }
        let job = c.finish_round().await;
        assert_eq!(job.state, JobState::Done, "{}", job.message);
    }
}
