#![allow(dead_code)]

use ptrack::backend::TrackerConfig;
use ptrack::learn::{LearnConfig, Policy, DEFAULT_TAU};
use ptrack::qnet::QNet;
use ptrack::sim::{preset, ScenarioSpec};
use ptrack_serve::{record_run, ServeConfig, Service};
use std::sync::Arc;

pub fn spec(len: usize) -> ScenarioSpec {
    preset("long_term").unwrap().with_seed(5).with_len(len)
}

/// A service with one episode `e1` and its online-rule run `r1`.
pub fn service(len: usize, config: ServeConfig) -> Service {
    let learn = LearnConfig {
        batch_size: 4,
        ..LearnConfig::default()
    };
    let mut svc = Service::new(config.clone(), learn, QNet::init(1));
    let spec = spec(len);
    svc.add_episode("e1", spec.clone());
    let run = record_run(
        &spec,
        None,
        &Policy::online(DEFAULT_TAU),
        config.stride,
        &TrackerConfig::default(),
        "e1",
        3,
    )
    .unwrap();
    svc.add_run("r1", run).unwrap();
    svc
}

pub fn shared(len: usize) -> Arc<Service> {
    Arc::new(service(
        len,
        ServeConfig {
            train_steps: 20,
            ..ServeConfig::default()
        },
    ))
}
