//! HTTP inference endpoint for a λ-modulated AdaFM network.
//!
//! Routes:
//! - `POST /api/restore` restores one image at a requested λ or degradation level.
//! - `GET /api/info` describes the loaded model.
//! - `GET /` and `GET /{path}` serve a static UI bundle when one is configured.
//!
//! The model is immutable after load and shared by all requests; every request
//! interpolates its own AdaFM parameters.

pub mod wire;

use std::collections::BTreeMap;
use std::future::Future;
use std::io;
use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;
use std::thread::JoinHandle;

use adafm_core::data::{self, gen_procedural_image, Image};
use adafm_core::modulation::{self, load_curve, ModulationCurve, ModulationError};
use adafm_core::net::{load_checkpoint, AdaFmNet, AppliedLambda, CheckpointError, Model as Stored};
use adafm_core::pipeline::{restore_image, Modulated, PipelineError};
use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use thiserror::Error;
use tokio::sync::oneshot;

use wire::{CurveInfo, ErrorBody, Info, NetInfo, ParamInfo, RestoreRequest, RestoreResponse};

pub const DEFAULT_MAX_SIDE: usize = 1024;
pub const LIPSCHITZ_STEP: f64 = 0.05;
const PROBE_SEED: u64 = 0x11b5;
const PROBE_SIDE: usize = 32;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Modulation(#[from] ModulationError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error("checkpoint holds a basic network; an AdaFM checkpoint is required")]
    NotAdaFm,
    #[error("curve task {curve} does not match the model task {model}")]
    TaskMismatch { curve: String, model: String },
}

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

/// Loaded network, optional level → λ curve and metadata.
pub struct ServedModel {
    pub net: AdaFmNet,
    pub curve: Option<ModulationCurve>,
    pub meta: BTreeMap<String, String>,
    /// Measured once at load, see [`measure_lipschitz`].
    pub lipschitz: f64,
}

impl ServedModel {
    pub fn new(net: AdaFmNet, curve: Option<ModulationCurve>, meta: BTreeMap<String, String>) -> Result<Self> {
        if let (Some(c), Some(task)) = (&curve, meta.get("task")) {
            if c.task.tag() != task {
                return Err(ServiceError::TaskMismatch {
                    curve: c.task.to_string(),
                    model: task.clone(),
                });
            }
        }
        let lipschitz = measure_lipschitz(&net)?;
        Ok(ServedModel {
            net,
            curve,
            meta,
            lipschitz,
        })
    }

    pub fn load(model: impl AsRef<Path>, curve: Option<&Path>) -> Result<Self> {
        let ckpt = load_checkpoint(model)?;
        let net = match ckpt.model {
            Stored::AdaFm(n) => n,
            Stored::Basic(_) => return Err(ServiceError::NotAdaFm),
        };
        let curve = curve.map(load_curve).transpose()?;
        ServedModel::new(net, curve, ckpt.meta)
    }

    /// Restores `img` at `lambda`. A grayscale model restores each plane of an
    /// RGB image separately; an RGB model restores a grayscale image as three
    /// equal planes and averages the result.
    pub fn restore(&self, img: &Image, lambda: f64) -> Result<Image> {
        let r = Modulated { net: &self.net, lambda };
        let want = self.net.config().in_channels;
        Ok(match (img.channels, want) {
            (a, b) if a == b => restore_image(&r, img)?,
            (3, 1) => {
                let planes = (0..3)
                    .map(|c| {
                        let p = Image::new(img.height, img.width, 1, img.pixels.iter().skip(c).step_by(3).copied().collect())?;
                        Ok(restore_image(&r, &p)?)
                    })
                    .collect::<Result<Vec<Image>>>()?;
                let px = (0..img.height * img.width).flat_map(|i| planes.iter().map(move |p| p.pixels[i])).collect();
                Image::new(img.height, img.width, 3, px)?
            }
            _ => {
                let rgb = Image::new(img.height, img.width, 3, img.pixels.iter().flat_map(|&v| [v; 3]).collect())?;
                let out = restore_image(&r, &rgb)?;
                let px = out.pixels.chunks_exact(3).map(|c| (c[0] + c[1] + c[2]) / 3.0).collect();
                Image::new(img.height, img.width, 1, px)?
            }
        })
    }

    /// λ for a request: direct values are clamped to [0, 1]; levels go through the curve.
    pub fn resolve(&self, lambda: Option<f64>, level: Option<f64>) -> Result<AppliedLambda, String> {
        match (lambda, level) {
            (Some(l), None) => Ok(AppliedLambda::clamp(l)),
            (None, Some(level)) => {
                let curve = self.curve.as_ref().ok_or("level requested but no curve is loaded")?;
                let (lo, hi) = curve.span();
                let raw = curve.evaluate(level);
                let value = modulation::predict_lambda(curve, level);
                Ok(AppliedLambda {
                    value: value as f32,
                    clamped: !(lo..=hi).contains(&level) || (raw - value).abs() > 1e-9,
                })
            }
            _ => Err("exactly one of lambda and level is required".into()),
        }
    }

    pub fn info(&self, config: &ServiceConfig) -> Info {
        let cfg = self.net.config();
        let p = self.net.count_params();
        Info {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: NetInfo {
                in_channels: cfg.in_channels,
                feat_channels: cfg.feat_channels,
                num_blocks: cfg.num_blocks,
            },
            adafm_kernel: self.net.kernel(),
            params: ParamInfo {
                base_total: p.base_total,
                residual_block: p.residual_block,
                adafm_total: p.adafm_total,
                adafm_fraction: p.adafm_fraction,
            },
            curve: self.curve.as_ref().map(|c| CurveInfo {
                task: c.task.to_string(),
                la: c.la,
                lb: c.lb,
                order: c.order(),
                coeffs: c.coeffs.clone(),
            }),
            lipschitz: self.lipschitz,
            lipschitz_step: LIPSCHITZ_STEP,
            max_width: config.max_width,
            max_height: config.max_height,
            meta: self.meta.clone(),
        }
    }
}

/// Fixed probe image, 8-bit quantized like a wire payload.
pub fn probe_image(channels: usize) -> Result<Image> {
    let img = gen_procedural_image(PROBE_SEED, PROBE_SIDE, PROBE_SIDE, channels)?;
    Ok(wire::from_bytes(img.width, img.height, channels, &wire::to_bytes(&img)).expect("probe dims are valid"))
}

/// Largest mean absolute change of the 8-bit output per unit λ between
/// neighbouring grid points λ, λ + 0.05 on [`probe_image`].
pub fn measure_lipschitz(net: &AdaFmNet) -> Result<f64> {
    let probe = probe_image(net.config().in_channels)?;
    let n = (1.0 / LIPSCHITZ_STEP).round() as usize;
    let outs = (0..=n)
        .map(|i| {
            let out = restore_image(&Modulated { net, lambda: i as f64 / n as f64 }, &probe)?;
            Ok(wire::to_bytes(&out))
        })
        .collect::<Result<Vec<Vec<u8>>>>()?;
    Ok(outs
        .windows(2)
        .map(|w| mean_abs_byte_diff(&w[0], &w[1]) / LIPSCHITZ_STEP)
        .fold(0.0, f64::max))
}

/// Mean absolute difference of two 8-bit buffers, in [0, 1] pixel units.
pub fn mean_abs_byte_diff(a: &[u8], b: &[u8]) -> f64 {
    let s: u64 = a.iter().zip(b).map(|(&x, &y)| x.abs_diff(y) as u64).sum();
    s as f64 / 255.0 / a.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServiceConfig {
    pub max_width: usize,
    pub max_height: usize,
    /// Static UI bundle served under `/`.
    pub ui_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            max_width: DEFAULT_MAX_SIDE,
            max_height: DEFAULT_MAX_SIDE,
            ui_dir: None,
        }
    }
}

impl ServiceConfig {
    /// Request body limit: base-64 of the largest RGB image plus slack for the JSON.
    fn body_limit(&self) -> usize {
        4 * self.max_width * self.max_height + 4 + (64 << 10)
    }
}

pub struct AppState {
    pub model: ServedModel,
    pub config: ServiceConfig,
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: msg.into() })).into_response()
}

fn bad_request(msg: impl Into<String>) -> Response {
    error(StatusCode::BAD_REQUEST, msg)
}

async fn restore(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let req: RestoreRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return bad_request(format!("malformed body: {e}")),
    };
    if req.width == 0 || req.height == 0 {
        return bad_request("width and height must be positive");
    }
    if req.channels != 1 && req.channels != 3 {
        return bad_request(format!("channels must be 1 or 3, got {}", req.channels));
    }
    let cfg = &state.config;
    if req.width > cfg.max_width || req.height > cfg.max_height {
        return error(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("image {}x{} exceeds {}x{}", req.width, req.height, cfg.max_width, cfg.max_height),
        );
    }
    let Some(bytes) = wire::decode_pixels(&req.pixels) else {
        return bad_request("pixels are not valid base-64");
    };
    if bytes.len() != req.width * req.height * req.channels {
        return bad_request(format!(
            "payload has {} samples, expected {}",
            bytes.len(),
            req.width * req.height * req.channels
        ));
    }
    let applied = match state.model.resolve(req.lambda, req.level) {
        Ok(a) => a,
        Err(msg) => return bad_request(msg),
    };
    let Some(input) = wire::from_bytes(req.width, req.height, req.channels, &bytes) else {
        return bad_request("invalid image");
    };
    let worker = Arc::clone(&state);
    let job = tokio::task::spawn_blocking(move || -> Result<(Image, Image)> {
        let out = worker.model.restore(&input, applied.value as f64)?;
        Ok((input, out))
    });
    match job.await {
        Ok(Ok((input, out))) => {
            let psnr = data::psnr(&out, &input).ok().filter(|p| p.is_finite());
            Json(RestoreResponse {
                width: out.width,
                height: out.height,
                channels: out.channels,
                pixels: wire::encode_pixels(&out),
                applied_lambda: applied.value as f64,
                clamped: applied.clamped,
                psnr_vs_input: psnr,
            })
            .into_response()
        }
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}")),
    }
}

async fn info(State(state): State<Arc<AppState>>) -> Json<Info> {
    Json(state.model.info(&state.config))
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).unwrap_or("") {
        "html" | "htm" => "text/html; charset=utf-8",
        "js" | "mjs" => "text/javascript; charset=utf-8",
        "css" => "text/css; charset=utf-8",
        "json" | "map" => "application/json",
        "svg" => "image/svg+xml",
        "png" => "image/png",
        "ico" => "image/x-icon",
        "wasm" => "application/wasm",
        "txt" => "text/plain; charset=utf-8",
        _ => "application/octet-stream",
    }
}

fn serve_file(state: &AppState, rel: &str) -> Response {
    let not_found = || error(StatusCode::NOT_FOUND, "not found");
    let Some(root) = &state.config.ui_dir else {
        return not_found();
    };
    let rel = Path::new(rel);
    if !rel.components().all(|c| matches!(c, Component::Normal(_))) {
        return not_found();
    }
    let path = root.join(rel);
    match std::fs::read(&path) {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response(),
        Err(_) => not_found(),
    }
}

async fn index(State(state): State<Arc<AppState>>) -> Response {
    serve_file(&state, "index.html")
}

async fn asset(State(state): State<Arc<AppState>>, axum::extract::Path(path): axum::extract::Path<String>) -> Response {
    serve_file(&state, &path)
}

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.config.body_limit();
    Router::new()
        .route("/api/restore", post(restore))
        .route("/api/info", get(info))
        .route("/", get(index))
        .route("/{*path}", get(asset))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

/// Server running on a background runtime; dropped or stopped to shut down.
pub struct RunningServer {
    pub addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<io::Result<()>>>,
}

impl RunningServer {
    pub fn stop(mut self) -> io::Result<()> {
        self.shutdown_and_join()
    }

    fn shutdown_and_join(&mut self) -> io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for RunningServer {
    fn drop(&mut self) {
        let _ = self.shutdown_and_join();
    }
}

/// Binds `addr` (port 0 picks a free port) and serves on a new runtime thread.
pub fn spawn(state: AppState, addr: SocketAddr) -> io::Result<RunningServer> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let std_listener = std::net::TcpListener::bind(addr)?;
    std_listener.set_nonblocking(true)?;
    let addr = std_listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let state = Arc::new(state);
    let thread = std::thread::Builder::new().name("adafm-service".into()).spawn(move || {
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(std_listener)?;
            log::info!("serving on http://{addr}");
            serve(listener, state, async {
                let _ = rx.await;
            })
            .await
        })
    })?;
    Ok(RunningServer {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}

/// Blocks serving on an already bound listener until the process exits.
pub fn run_blocking(state: AppState, listener: std::net::TcpListener) -> io::Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    listener.set_nonblocking(true)?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::from_std(listener)?;
        serve(listener, Arc::new(state), std::future::pending()).await
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use adafm_core::net::{BasicNet, NetConfig};
    use adafm_core::tensor::RandomSource;

    fn model(curve: Option<ModulationCurve>) -> ServedModel {
        let cfg = NetConfig {
            in_channels: 1,
            feat_channels: 4,
            num_blocks: 1,
            adafm_kernel: None,
        };
        let base = Arc::new(BasicNet::new(cfg, &mut RandomSource::new(1)).unwrap());
        let mut net = base.insert_adafm(3).unwrap();
        for l in &mut net.layers {
            l.b = RandomSource::new(2).randn(l.b.shape(), 0.0, 0.2).unwrap();
        }
        ServedModel::new(net, curve, BTreeMap::new()).unwrap()
    }

    #[test]
    fn resolve_requires_exactly_one_selector() {
        let m = model(None);
        assert!(m.resolve(None, None).is_err());
        assert!(m.resolve(Some(0.5), Some(0.1)).is_err());
        assert!(m.resolve(None, Some(0.1)).is_err());
        let a = m.resolve(Some(1.5), None).unwrap();
        assert_eq!((a.value, a.clamped), (1.0, true));
    }

    #[test]
    fn levels_go_through_the_curve() {
        let curve = ModulationCurve::new(adafm_core::data::Task::Denoise, 0.1, 0.3, vec![-0.5, 5.0]).unwrap();
        let m = model(Some(curve));
        let mid = m.resolve(None, Some(0.2)).unwrap();
        assert!((mid.value - 0.5).abs() < 1e-6 && !mid.clamped);
        let hi = m.resolve(None, Some(0.9)).unwrap();
        assert_eq!((hi.value, hi.clamped), (1.0, true));
        let lo = m.resolve(None, Some(0.0)).unwrap();
        assert_eq!((lo.value, lo.clamped), (0.0, true));
    }

    #[test]
    fn lipschitz_is_zero_for_identity_layers() {
        let m = model(None);
        assert!(m.lipschitz > 0.0);
        let flat = ServedModel::new(m.net.base_arc().insert_adafm(1).unwrap(), None, BTreeMap::new()).unwrap();
        assert_eq!(flat.lipschitz, 0.0);
    }

    #[test]
    fn channel_adaptation_keeps_shape() {
        let m = model(None);
        let rgb = gen_procedural_image(3, 17, 20, 3).unwrap();
        let out = m.restore(&rgb, 0.5).unwrap();
        assert_eq!((out.height, out.width, out.channels), (17, 20, 3));
        let gray = gen_procedural_image(3, 16, 16, 1).unwrap();
        assert_eq!(m.restore(&gray, 0.5).unwrap().channels, 1);
    }

    #[test]
    fn paths_outside_the_bundle_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("index.html"), "<p>hi</p>").unwrap();
        let state = AppState {
            model: model(None),
            config: ServiceConfig {
                ui_dir: Some(dir.path().join("")),
                ..ServiceConfig::default()
            },
        };
        assert_eq!(serve_file(&state, "index.html").status(), StatusCode::OK);
        assert_eq!(serve_file(&state, "../index.html").status(), StatusCode::NOT_FOUND);
        assert_eq!(serve_file(&state, "/etc/passwd").status(), StatusCode::NOT_FOUND);
    }
}
