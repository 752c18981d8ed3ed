//! Helpers shared by the service and acceptance test targets.
#![allow(dead_code)]

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use idlat::blocking::BlockSpec;
use idlat::codec::compress_volume;
use idlat::importance::{importance_from_region, VoxelBox};
use idlat::network::{Model, ModelConfig};
use idlat::volume::{save_raw, synthetic_blobs, Dims, Dtype};
use idlat_cli::service::{router, AppState, OPENAPI};

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub state: Arc<AppState>,
}

pub fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let v = synthetic_blobs(Dims::new(24, 24, 16), 10, 0.01, 5);
    save_raw(&v, dir.path().join("v.raw"), Dtype::F32le).unwrap();
    let spec = BlockSpec::new(8, 2).unwrap();
    let model = Model::new(ModelConfig::desk(4), spec).unwrap();
    model.save(dir.path().join("m.idlc")).unwrap();
    let mut other = ModelConfig::desk(4);
    other.seed = 99;
    Model::new(other, spec)
        .unwrap()
        .save(dir.path().join("other.idlc"))
        .unwrap();
    let roi = importance_from_region(&v, &VoxelBox::new([0, 0, 0], [12, 12, 8])).unwrap();
    let (file, _) = compress_volume(&v, &roi, &model).unwrap();
    file.write(dir.path().join("v.idlt")).unwrap();
    let state = AppState::new(dir.path(), Some(dir.path().join("m.idlc")));
    Fixture { dir, state }
}

pub struct Schemas {
    components: Value,
}

impl Schemas {
    pub fn load() -> Self {
        let doc: Value = serde_yaml::from_str(OPENAPI).unwrap();
        Schemas {
            components: doc["components"].clone(),
        }
    }

    pub fn check(&self, name: &str, instance: &Value) {
        let schema = json!({
            "$schema": "https://json-schema.org/draft/2020-12/schema",
            "$ref": format!("#/components/schemas/{name}"),
            "components": self.components,
        });
        let validator = jsonschema::validator_for(&schema).unwrap();
        let errors: Vec<String> = validator
            .iter_errors(instance)
            .map(|e| e.to_string())
            .collect();
        assert!(
            errors.is_empty(),
            "{name} schema violations: {errors:?}\n{instance:#}"
        );
    }

    pub fn check_list(&self, name: &str, instance: &Value) {
        for item in instance.as_array().expect("array") {
            self.check(name, item);
        }
    }
}

pub async fn call(
    state: &Arc<AppState>,
    method: Method,
    uri: &str,
    body: Option<Value>,
) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(b) => {
            req = req.header("content-type", "application/json");
            Body::from(b.to_string())
        }
        None => Body::empty(),
    };
    let resp = router(state.clone())
        .oneshot(req.body(body).unwrap())
        .await
        .unwrap();
    let status = resp.status();
    let bytes = resp
        .into_body()
        .collect()
        .await
        .unwrap()
        .to_bytes()
        .to_vec();
    (status, bytes)
}

pub async fn call_json(
    state: &Arc<AppState>,
    method: Method,
    uri: &str,
    body: Option<Value>,
) -> (StatusCode, Value) {
    let (status, bytes) = call(state, method, uri, body).await;
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|e| panic!("non-JSON body from {uri}: {e}"))
    };
    (status, value)
}

pub async fn create(f: &Fixture, schemas: &Schemas) -> String {
    let (status, body) = call_json(
        &f.state,
        Method::POST,
        "/api/sessions",
        Some(json!({ "volume": "v.raw", "idlt_file": "v.idlt" })),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    schemas.check("Session", &body);
    body["id"].as_str().unwrap().to_string()
}

pub fn leaf_ids(tree: &Value) -> Vec<u64> {
    tree["nodes"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|n| n["children"].as_array().unwrap().is_empty())
        .map(|n| n["id"].as_u64().unwrap())
        .collect()
}
