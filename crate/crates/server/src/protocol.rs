//! Wire types shared by the HTTP and WebSocket endpoints.
//!
//! Everything is JSON. Cameras use [`CameraView`]'s serialized form: a
//! row-major world-to-camera `rotation` (camera axes +x right, +y down,
//! +z forward), a `translation`, the intrinsics `fx, fy, cx, cy` in pixels
//! and the `width`/`height` of the image plane.
//!
//! # Render requests (`POST /api/render`)
//!
//! ```json
//! {
//!   "camera": { "rotation": [[1,0,0],[0,1,0],[0,0,1]], "translation": [0,0,4],
//!               "fx": 68.6, "fy": 68.6, "cx": 32, "cy": 32, "width": 64, "height": 64 },
//!   "appearance": { "kind": "interp", "a": 0, "b": 3, "t": 0.25 },
//!   "width": 128, "height": 128,
//!   "encoding": "png"
//! }
//! ```
//!
//! * `appearance`: one of `{"kind": "image", "index": j}`,
//!   `{"kind": "interp", "a": i, "b": j, "t": t}` with `t ∈ [0, 1]` snapped to
//!   multiples of 1/256, or `{"kind": "raw", "embedding": [48 numbers]}`.
//! * `width`, `height` (optional): output size. The intrinsics are rescaled
//!   from the camera's own size.
//! * `encoding` (optional, default `png`): `png` or `jpeg` (quality 90).
//!
//! The response body is the encoded frame. `X-Render-Millis` holds the total
//! render time, `X-Cache-Hit` is `true` when no network was evaluated, and
//! `X-Scene-Version` names the snapshot that produced the frame.
//!
//! # Stream (`GET /ws`)
//!
//! On connect the server sends `hello`. Client messages each carry a `seq`
//! chosen by the client, which should increase. The server renders only the
//! newest state: messages arriving while a frame is in flight are merged and
//! at most one further frame follows. Each frame echoes the `seq` of the last
//! message it reflects.
//!
//! Client → server:
//!
//! | type             | fields                         |
//! |------------------|--------------------------------|
//! | `set_camera`     | `seq`, `camera`                |
//! | `set_appearance` | `seq`, `index`                 |
//! | `interp`         | `seq`, `a`, `b`, `t`           |
//! | `set_encoding`   | `seq`, `encoding`              |
//!
//! Server → client:
//!
//! | type    | fields                                                                  |
//! |---------|-------------------------------------------------------------------------|
//! | `hello` | `protocol`, `scene_version`, `num_images`                               |
//! | `frame` | `protocol`, `seq`, `encoding`, `data` (base64), `width`, `height`, `cache_hit`, `render_ms` |
//! | `error` | `seq` (null if the message could not be parsed), `message`              |
//!
//! No frame is sent before the first `set_camera`. The appearance defaults to
//! training image 0 and the encoding to `jpeg`.

use serde::{Deserialize, Serialize};
use wildsplat_core::scene::CameraView;

pub const PROTOCOL_VERSION: u32 = 1;

/// Interpolation weights are snapped to this many steps.
pub const INTERP_STEPS: f64 = 256.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AppearanceSpec {
    Image { index: usize },
    Interp { a: usize, b: usize, t: f64 },
    Raw { embedding: Vec<f64> },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    #[default]
    Png,
    Jpeg,
}

impl Encoding {
    pub fn mime(self) -> &'static str {
        match self {
            Encoding::Png => "image/png",
            Encoding::Jpeg => "image/jpeg",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderRequest {
    pub camera: CameraView,
    pub appearance: AppearanceSpec,
    #[serde(default)]
    pub width: Option<usize>,
    #[serde(default)]
    pub height: Option<usize>,
    #[serde(default)]
    pub encoding: Encoding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    SetCamera { seq: u64, camera: CameraView },
    SetAppearance { seq: u64, index: usize },
    Interp { seq: u64, a: usize, b: usize, t: f64 },
    SetEncoding { seq: u64, encoding: Encoding },
}

impl ClientMessage {
    pub fn seq(&self) -> u64 {
        match self {
            ClientMessage::SetCamera { seq, .. }
            | ClientMessage::SetAppearance { seq, .. }
            | ClientMessage::Interp { seq, .. }
            | ClientMessage::SetEncoding { seq, .. } => *seq,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Hello {
        protocol: u32,
        scene_version: u64,
        num_images: usize,
    },
    Frame {
        protocol: u32,
        seq: u64,
        encoding: Encoding,
        data: String,
        width: usize,
        height: usize,
        cache_hit: bool,
        render_ms: f64,
    },
    Error {
        seq: Option<u64>,
        message: String,
    },
}

/// One entry of the training-image catalog.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogImage {
    pub index: usize,
    pub width: usize,
    pub height: usize,
    pub thumbnail: String,
    pub camera: CameraView,
}

/// `GET /api/scene`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneInfo {
    pub protocol: u32,
    pub name: String,
    pub version: u64,
    pub num_gaussians: usize,
    pub num_images: usize,
    pub embedding_dim: usize,
    pub color_sh_degree: usize,
    pub background_sh_degree: Option<usize>,
    pub images: Vec<CatalogImage>,
}
