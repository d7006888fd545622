use std::sync::Arc;

use fedcil::acgan::{AcganConfig, AcganModel, ClassId, Group};
use fedcil::data::make_synthetic_mixture;
use fedcil::params::ParameterVector;
use fedcil::protocol::{merge_parameters, ConsolidationConfig, ConsolidationStats, ServerState, Upload};
use fedcil::rng::{rng_for, rng_from_seed};
use fedcil::taskstream::{build_task_streams, LocalData};
use fedcil::trainers::{ClientState, Method, TrainerOptions};
use fedcil::Result;

fn config() -> AcganConfig {
    AcganConfig {
        data_dim: 2,
        noise_dim: 2,
        gen_hidden: 6,
        trunk_hidden: 6,
        feature_dim: 3,
        leak: 0.2,
    }
}

fn model(classes: &[ClassId], seed: u64) -> AcganModel {
    AcganModel::new(config(), classes, &mut rng_from_seed(seed)).unwrap()
}

fn upload(m: &AcganModel, trained: &[ClassId], n: usize) -> Upload {
    Upload {
        params: m.to_parameter_vector(Group::All),
        sample_count: n,
        classes: trained.to_vec(),
    }
}

#[test]
fn single_client_round_without_consolidation_returns_the_upload() {
    for method in [Method::Fedavg, Method::FedavgAcgan, Method::Fedcil, Method::Fedlwf2t] {
        let ds = Arc::new(make_synthetic_mixture(4, 30, 2, 2).unwrap());
        let streams = build_task_streams(&ds, 1, 2, 2, 2).unwrap();
        let opts = TrainerOptions {
            batch_size: 8,
            ..TrainerOptions::default()
        };
        let data = LocalData::new(ds, Arc::new(streams[0].clone()));
        let mut client = ClientState::new(0, method, opts, config(), data, 2).unwrap();
        let global = AcganModel::new(config(), &[], &mut rng_for(2, &[1])).unwrap();
        let mut server = ServerState::new(global, ConsolidationConfig::default(), false, method.sync_group(), 2);
        client.receive_broadcast(&server.broadcast(), 0).unwrap();
        for round in 0..3 {
            client.train_round(4, round).unwrap();
            let up = client.upload();
            server.aggregate(std::slice::from_ref(&up)).unwrap();
            assert_eq!(server.broadcast().to_bytes(), up.params.to_bytes(), "{method} round {round}");
            client.receive_broadcast(&server.broadcast(), round + 1).unwrap();
        }
    }
}

#[test]
fn identical_model_uploads_merge_to_themselves() {
    let m = model(&[0, 3, 5], 1);
    let u = upload(&m, &[0, 3, 5], 17);
    let merged = merge_parameters(&[u.clone(), u.clone(), u.clone()]).unwrap();
    assert_eq!(merged.to_bytes(), u.params.to_bytes());
}

#[test]
fn class_trained_by_one_client_keeps_its_row() {
    let a = model(&[0, 1], 1);
    let b = model(&[0, 1, 7], 2);
    let c = model(&[1, 2], 3);
    let merged = merge_parameters(&[upload(&a, &[0, 1], 10), upload(&b, &[0, 7], 20), upload(&c, &[1, 2], 30)]).unwrap();
    let mut g = model(&[], 9);
    g.load_parameter_vector(&merged).unwrap();
    assert_eq!(g.classes(), &[0, 1, 2, 7]);
    let row = |m: &AcganModel, name: &str, k: ClassId| {
        let i = m.class_index(k).unwrap();
        m.param(name).row(i).to_vec()
    };
    for name in ["cls.w", "gen.cond"] {
        assert_eq!(row(&g, name, 7), row(&b, name, 7), "{name}");
        assert_eq!(row(&g, name, 2), row(&c, name, 2), "{name}");
    }
}

/// The server API accepts nothing but uploads, and an upload carries only
/// a parameter vector, a sample count and class labels.
#[test]
fn server_receives_parameter_vectors_only() {
    let aggregate: fn(&mut ServerState, &[Upload]) -> Result<Option<ConsolidationStats>> = ServerState::aggregate;
    let _ = aggregate;
    let consolidate: fn(&mut AcganModel, &[Upload], &ConsolidationConfig, &mut fedcil::rng::SimRng) -> Result<ConsolidationStats> =
        fedcil::protocol::consolidate;
    let _ = consolidate;

    let ds = Arc::new(make_synthetic_mixture(4, 30, 2, 3).unwrap());
    let streams = build_task_streams(&ds, 1, 2, 2, 3).unwrap();
    let data = LocalData::new(ds, Arc::new(streams[0].clone()));
    let mut client = ClientState::new(0, Method::Fedcil, TrainerOptions::default(), config(), data, 3).unwrap();
    client.receive_broadcast(&ParameterVector::new(vec![]).unwrap(), 0).unwrap();
    client.train_round(2, 0).unwrap();
    let up = client.upload();
    let Upload {
        params,
        sample_count,
        classes,
    } = &up;
    let json = serde_json::to_value(&up).unwrap();
    let keys: Vec<&str> = json.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys, ["classes", "params", "sample_count"]);
    assert!(*sample_count > 0);
    assert_eq!(classes, client.announced());
    let expected = client.model().to_parameter_vector(Group::All);
    assert_eq!(params, &expected);
    assert!(params
        .names()
        .all(|n| ["trunk.", "disc.", "cls.", "gen.", "meta."].iter().any(|p| n.starts_with(p))));
    let floats: usize = params.entries().iter().map(|e| e.data.len()).sum();
    let model_floats: usize = client.model().params().values().map(|t| t.len()).sum::<usize>() + classes.len();
    assert_eq!(floats, model_floats);
}
