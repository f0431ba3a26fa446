use std::path::Path;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use candle_core::{DType, Device};
use http_body_util::BodyExt;
use ndarray::{Array2, Array3};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use stampgen::checkpoint::{self, meta_for, ModelConfig};
use stampgen::imageio::{image_to_png, mask_to_png, to_base64};
use stampgen::{ImageTensor, MaskGan, MaskGanConfig, MaskTensor, TextureGan, TextureGanConfig};
use stampgen_service::{router, AppState, ServiceConfig, MAX_FRAMES};
use tower::ServiceExt;

const RES: usize = 16;

fn mask_config() -> MaskGanConfig {
    MaskGanConfig { size: RES, z_dim: 5, base_channels: 2, max_channels: 4, downsamples: 2, res_blocks: 1, hidden: 8, ..Default::default() }
}

fn texture_config() -> TextureGanConfig {
    TextureGanConfig { size: RES, z_dim: 3, base_channels: 2, max_channels: 4, downsamples: 2, res_blocks: 1, ..Default::default() }
}

fn write_mask(path: &Path, class: &str) {
    let m = MaskGan::new(mask_config(), 1, DType::F32, &Device::Cpu).unwrap();
    checkpoint::save_mask(&m, path, meta_for(class, ModelConfig::Mask(mask_config()), DType::F32, 1).unwrap()).unwrap();
}

fn write_texture(path: &Path, class: &str) {
    let t = TextureGan::new(texture_config(), 2, DType::F32, &Device::Cpu).unwrap();
    checkpoint::save_texture(&t, path, meta_for(class, ModelConfig::Texture(texture_config()), DType::F32, 2).unwrap()).unwrap();
}

fn write_bundle(dir: &Path, class: &str) {
    write_mask(&dir.join(format!("{class}_mask.safetensors")), class);
    write_texture(&dir.join(format!("{class}_texture.safetensors")), class);
}

/// Rewrites the metadata record of a checkpoint with one extra field.
fn add_unknown_field(path: &Path) {
    let bytes = std::fs::read(path).unwrap();
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let mut header: Value = serde_json::from_slice(&bytes[8..8 + n]).unwrap();
    let meta_map = header["__metadata__"].as_object_mut().unwrap();
    let key = meta_map.keys().next().unwrap().clone();
    let mut meta: Value = serde_json::from_str(meta_map[&key].as_str().unwrap()).unwrap();
    meta["colour_space"] = json!("lab");
    meta_map.insert(key, Value::String(meta.to_string()));
    let mut text = header.to_string().into_bytes();
    while text.len() % 8 != 0 {
        text.push(b' ');
    }
    let mut out = (text.len() as u64).to_le_bytes().to_vec();
    out.extend(text);
    out.extend(&bytes[8 + n..]);
    std::fs::write(path, out).unwrap();
}

fn app(dir: &Path, tweak: impl FnOnce(&mut ServiceConfig)) -> (AppState, Router) {
    let mut cfg = ServiceConfig { model_dir: dir.to_path_buf(), ..Default::default() };
    tweak(&mut cfg);
    let state = AppState::new(&cfg).unwrap();
    state.load_models();
    let router = router(state.clone());
    (state, router)
}

async fn send(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map(|b| Body::from(b.to_string())).unwrap_or_else(Body::empty)).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, bytes) = send(app, method, uri, body).await;
    (s, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn background(side: usize) -> String {
    let img = ImageTensor::new(Array3::from_shape_fn((side, side, 3), |(y, x, c)| ((y * 7 + x * 3 + c) % 11) as f32 / 5.5 - 1.0)).unwrap();
    to_base64(&image_to_png(&img).unwrap())
}

fn rect_mask(side: usize) -> String {
    let m = MaskTensor::new(Array2::from_shape_fn((side, side), |(y, x)| (y >= side / 4 && y < side / 2 && x >= side / 3 && x < side - 2) as u8 as f32)).unwrap();
    to_base64(&mask_to_png(&m).unwrap())
}

fn sha_hex(path: &Path) -> String {
    Sha256::digest(std::fs::read(path).unwrap()).iter().map(|b| format!("{b:02x}")).collect()
}

#[tokio::test]
async fn empty_model_directory_lists_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = app(dir.path(), |_| {});
    let (s, body) = call(&app, "GET", "/v1/models", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body, json!({"models": [], "incompatible": []}));
    let (s, health) = call(&app, "GET", "/healthz", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(health["models"], 0);
}

#[tokio::test]
async fn listing_reports_file_hashes_and_flags_incompatible_files() {
    let dir = tempfile::tempdir().unwrap();
    write_bundle(dir.path(), "giraffe");
    std::fs::create_dir(dir.path().join("zebra")).unwrap();
    write_bundle(&dir.path().join("zebra"), "zebra");
    add_unknown_field(&dir.path().join("zebra/zebra_texture.safetensors"));
    write_mask(&dir.path().join("lonely.safetensors"), "lonely");
    std::fs::write(dir.path().join("junk.safetensors"), b"not a checkpoint").unwrap();

    let (_, app) = app(dir.path(), |_| {});
    let (s, body) = call(&app, "GET", "/v1/models", None).await;
    assert_eq!(s, StatusCode::OK);
    let models = body["models"].as_array().unwrap();
    assert_eq!(models.len(), 1, "{body}");
    let m = &models[0];
    assert_eq!(m["class"], "giraffe");
    assert_eq!(m["resolution"], RES);
    assert_eq!(m["status"], "ready");
    assert_eq!(m["mask"]["latent_dim"], 5);
    assert_eq!(m["texture"]["latent_dim"], 3);
    assert_eq!(m["mask"]["hash"], sha_hex(&dir.path().join("giraffe_mask.safetensors")));
    assert_eq!(m["texture"]["hash"], sha_hex(&dir.path().join("giraffe_texture.safetensors")));

    let flagged: Vec<&str> = body["incompatible"].as_array().unwrap().iter().map(|i| i["file"].as_str().unwrap()).collect();
    for f in ["zebra/zebra_texture.safetensors", "zebra/zebra_mask.safetensors", "lonely.safetensors", "junk.safetensors"] {
        assert!(flagged.iter().any(|g| g.ends_with(f)), "{f} not flagged in {flagged:?}");
    }
    let (s, _) = call(&app, "POST", "/v1/stamp", Some(json!({"model": "zebra", "background": background(16), "bbox": [0.1, 0.1, 0.5, 0.5]}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn models_report_loading_until_loaded() {
    let dir = tempfile::tempdir().unwrap();
    write_bundle(dir.path(), "giraffe");
    let cfg = ServiceConfig { model_dir: dir.path().to_path_buf(), ..Default::default() };
    let state = AppState::new(&cfg).unwrap();
    let app = router(state.clone());
    let (_, body) = call(&app, "GET", "/v1/models", None).await;
    assert_eq!(body["models"][0]["status"], "loading");
    let (s, _) = call(&app, "POST", "/v1/retexture", Some(json!({"model": "giraffe", "background": background(16), "mask": rect_mask(16)}))).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    state.spawn_loading().join().unwrap();
    let (_, health) = call(&app, "GET", "/healthz", None).await;
    assert_eq!(health["ready"], 1);
    let (s, _) = call(&app, "POST", "/v1/retexture", Some(json!({"model": "giraffe", "background": background(16), "mask": rect_mask(16)}))).await;
    assert_eq!(s, StatusCode::OK);
}

#[tokio::test]
async fn stamp_outputs_have_model_resolution_and_echo_latents() {
    let dir = tempfile::tempdir().unwrap();
    write_bundle(dir.path(), "giraffe");
    let (_, app) = app(dir.path(), |_| {});
    let (s, body) = call(&app, "POST", "/v1/stamp", Some(json!({"model": "giraffe", "background": background(40), "bbox": [0.1, 0.2, 0.6, 0.9], "seed": 1}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body["latents"]["z_mask"].as_array().unwrap().len(), 5);
    assert_eq!(body["latents"]["z_texture"].as_array().unwrap().len(), 3);
    assert!(body["session_id"].is_null());
    let png = stampgen::imageio::from_base64(body["composite"].as_str().unwrap()).unwrap();
    let img = stampgen::imageio::image_from_bytes(&png, None).unwrap();
    assert_eq!((img.height(), img.width()), (RES, RES));

    let (_, other) = call(&app, "POST", "/v1/stamp", Some(json!({"model": "giraffe", "background": background(40), "bbox": [0.1, 0.2, 0.6, 0.9], "seed": 2}))).await;
    assert_ne!(other["latents"], body["latents"]);
}

#[tokio::test]
async fn malformed_inputs_are_unprocessable() {
    let dir = tempfile::tempdir().unwrap();
    write_bundle(dir.path(), "giraffe");
    let (_, app) = app(dir.path(), |_| {});
    let bg = background(16);
    let z5 = json!([0.0, 0.0, 0.0, 0.0, 0.0]);
    let z3 = json!([0.0, 0.0, 0.0]);
    let interp = |frames: usize| json!({"model": "giraffe", "background": bg, "bbox": [0.1, 0.1, 0.6, 0.6], "axis": "mask", "frames": frames, "start": z5, "end": z5, "fixed": z3, "noise_seed": 0});
    let cases = vec![
        ("/v1/stamp", json!({"model": "giraffe", "background": "%%%", "bbox": [0.1, 0.1, 0.6, 0.6]})),
        ("/v1/stamp", json!({"model": "giraffe", "background": to_base64(b"plain text"), "bbox": [0.1, 0.1, 0.6, 0.6]})),
        ("/v1/stamp", json!({"model": "giraffe", "background": bg, "bbox": [0.1, 0.1, 0.6]})),
        ("/v1/stamp", json!({"model": "giraffe", "background": bg, "bbox": [0.1, 0.1, 0.6, 0.6], "z_texture": [1.0]})),
        ("/v1/retexture", json!({"model": "giraffe", "background": bg, "mask": rect_mask(16), "z_texture": [1.0, 2.0]})),
        ("/v1/interpolate", interp(1)),
        ("/v1/interpolate", interp(MAX_FRAMES + 1)),
        ("/v1/interpolate", json!({"model": "giraffe", "background": bg, "bbox": [0.1, 0.1, 0.6, 0.6], "axis": "mask", "frames": 3, "start": z3, "end": z3, "fixed": z3, "noise_seed": 0})),
    ];
    for (uri, body) in cases {
        let (s, err) = call(&app, "POST", uri, Some(body.clone())).await;
        assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{uri} {body} -> {err}");
        if !err.is_null() {
            assert!(err["error"].is_string());
        }
    }
    let (s, _) = call(&app, "POST", "/v1/interpolate", Some(interp(MAX_FRAMES))).await;
    assert_eq!(s, StatusCode::OK);
}

#[tokio::test]
async fn mask_axis_interpolation_walks_between_endpoints() {
    let dir = tempfile::tempdir().unwrap();
    write_bundle(dir.path(), "giraffe");
    let (_, app) = app(dir.path(), |_| {});
    let bg = background(16);
    let a = json!([1.0, -1.0, 0.5, 0.0, 2.0]);
    let b = json!([-1.0, 1.0, 0.0, 0.5, -2.0]);
    let zt = json!([0.3, 0.2, 0.1]);
    let (s, body) = call(&app, "POST", "/v1/interpolate", Some(json!({"model": "giraffe", "background": bg, "bbox": [0.1, 0.1, 0.9, 0.9], "axis": "mask", "frames": 5, "start": a, "end": b, "fixed": zt, "noise_seed": 4}))).await;
    assert_eq!(s, StatusCode::OK);
    let frames = body["frames"].as_array().unwrap();
    let alphas: Vec<f64> = frames.iter().map(|f| f["alpha"].as_f64().unwrap()).collect();
    assert_eq!(alphas, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    for (f, z) in [(&frames[0], &a), (&frames[4], &b)] {
        let (_, single) = call(&app, "POST", "/v1/stamp", Some(json!({"model": "giraffe", "background": bg, "bbox": [0.1, 0.1, 0.9, 0.9], "z_mask": z, "z_texture": zt, "noise_seed": 4}))).await;
        assert_eq!(f["mask"], single["mask"]);
        assert_eq!(f["composite"], single["composite"]);
    }
    assert!(frames.iter().all(|f| f["latents"]["z_texture"] == zt));
}

#[tokio::test]
async fn sessions_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    write_bundle(dir.path(), "giraffe");
    let store = dir.path().join("state/sessions.jsonl");
    std::fs::create_dir_all(store.parent().unwrap()).unwrap();
    let req = json!({"model": "giraffe", "background": background(16), "bbox": [0.2, 0.2, 0.7, 0.7], "seed": 11});
    let (state, app1) = app(dir.path(), |c| c.session_store = Some(store.clone()));
    let (_, first) = call(&app1, "POST", "/v1/stamp", Some(req.clone())).await;
    let (_, again) = call(&app1, "POST", "/v1/stamp", Some(req)).await;
    let id = first["session_id"].as_str().unwrap().to_string();
    assert_eq!(again["session_id"], first["session_id"]);
    assert_eq!(state.sessions.as_ref().unwrap().len(), 1);
    drop((state, app1));

    let (_, app2) = app(dir.path(), |c| c.session_store = Some(store.clone()));
    let (s, record) = call(&app2, "GET", &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(record["endpoint"], "stamp");
    let hashes = record["results"].as_array().unwrap();
    let composite = hashes.iter().find(|r| r[0] == "composite").unwrap();
    let expected: String = Sha256::digest(first["composite"].as_str().unwrap().as_bytes()).iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(composite[1], expected);
    let (_, replay) = call(&app2, "POST", "/v1/stamp", Some(record["request"].clone())).await;
    assert_eq!(replay["composite"], first["composite"]);

    let (s, _) = call(&app2, "GET", "/v1/sessions/doesnotexist", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn sessions_404_without_a_store() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = app(dir.path(), |_| {});
    let (s, _) = call(&app, "GET", "/v1/sessions/abc", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn serves_static_assets() {
    let dir = tempfile::tempdir().unwrap();
    let assets = dir.path().join("www");
    std::fs::create_dir(&assets).unwrap();
    std::fs::write(assets.join("index.html"), "<html>editor</html>").unwrap();
    std::fs::write(assets.join("app.js"), "console.log(1)").unwrap();
    let (_, app) = app(dir.path(), |c| c.static_dir = Some(assets.clone()));
    let (s, body) = send(&app, "GET", "/app.js", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body, b"console.log(1)");
    let (s, body) = send(&app, "GET", "/", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body, b"<html>editor</html>");
    let (s, _) = send(&app, "GET", "/missing.css", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "GET", "/healthz", None).await;
    assert_eq!(s, StatusCode::OK);
}

#[test]
fn unknown_device_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ServiceConfig { model_dir: dir.path().to_path_buf(), device: "tpu".into(), ..Default::default() };
    assert!(AppState::new(&cfg).is_err());
}
