//! Per-connection WebSocket session.
//!
//! A reader task folds client messages into the session state and publishes
//! it on a watch channel, which only ever holds the newest value. The render
//! loop picks up whatever is newest when it becomes free, so a burst of
//! camera updates costs at most one extra frame.

use std::sync::Arc;

use axum::extract::ws::{Message, WebSocket};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use futures::{SinkExt, StreamExt};
use tokio::sync::{mpsc, watch};
use wildsplat_core::scene::CameraView;

use crate::protocol::{AppearanceSpec, ClientMessage, Encoding, RenderRequest, ServerMessage, PROTOCOL_VERSION};
use crate::Service;

#[derive(Clone, Debug)]
struct Session {
    seq: u64,
    camera: Option<CameraView>,
    appearance: AppearanceSpec,
    encoding: Encoding,
}

impl Session {
    fn apply(&mut self, msg: ClientMessage) {
        self.seq = msg.seq();
        match msg {
            ClientMessage::SetCamera { camera, .. } => self.camera = Some(camera),
            ClientMessage::SetAppearance { index, .. } => self.appearance = AppearanceSpec::Image { index },
            ClientMessage::Interp { a, b, t, .. } => self.appearance = AppearanceSpec::Interp { a, b, t },
            ClientMessage::SetEncoding { encoding, .. } => self.encoding = encoding,
        }
    }
}

pub(crate) async fn run(service: Arc<Service>, socket: WebSocket) {
    let (mut sink, mut source) = socket.split();
    let (out_tx, mut out_rx) = mpsc::channel::<ServerMessage>(16);
    let writer = tokio::spawn(async move {
        while let Some(msg) = out_rx.recv().await {
            let text = serde_json::to_string(&msg).expect("serializable");
            if sink.send(Message::Text(text.into())).await.is_err() {
                break;
            }
        }
    });

    let snapshot = service.store.current();
    let hello = ServerMessage::Hello {
        protocol: PROTOCOL_VERSION,
        scene_version: snapshot.version,
        num_images: snapshot.model.num_images(),
    };
    drop(snapshot);
    if out_tx.send(hello).await.is_err() {
        return;
    }

    let initial = Session {
        seq: 0,
        camera: None,
        appearance: AppearanceSpec::Image { index: 0 },
        encoding: Encoding::Jpeg,
    };
    let (state_tx, mut state_rx) = watch::channel(initial.clone());

    let render_out = out_tx.clone();
    let render_service = service.clone();
    let renderer = tokio::spawn(async move {
        while state_rx.changed().await.is_ok() {
            let session = state_rx.borrow_and_update().clone();
            let Some(camera) = session.camera else { continue };
            let req = RenderRequest {
                camera,
                appearance: session.appearance,
                width: None,
                height: None,
                encoding: session.encoding,
            };
            let msg = match render_service.render(req).await {
                Ok(frame) => ServerMessage::Frame {
                    protocol: PROTOCOL_VERSION,
                    seq: session.seq,
                    encoding: frame.encoding,
                    data: STANDARD.encode(&frame.bytes),
                    width: frame.width,
                    height: frame.height,
                    cache_hit: frame.cache_hit,
                    render_ms: frame.total_ms,
                },
                Err(e) => ServerMessage::Error {
                    seq: Some(session.seq),
                    message: e.to_string(),
                },
            };
            if render_out.send(msg).await.is_err() {
                break;
            }
        }
    });

    let mut session = initial;
    while let Some(Ok(msg)) = source.next().await {
        let text = match msg {
            Message::Text(t) => t,
            Message::Close(_) => break,
            _ => continue,
        };
        match serde_json::from_str::<ClientMessage>(&text) {
            Ok(m) => {
                session.apply(m);
                if state_tx.send(session.clone()).is_err() {
                    break;
                }
            }
            Err(e) => {
                let err = ServerMessage::Error {
                    seq: None,
                    message: format!("bad message: {e}"),
                };
                if out_tx.send(err).await.is_err() {
                    break;
                }
            }
        }
    }
    drop(state_tx);
    let _ = renderer.await;
    drop(out_tx);
    let _ = writer.await;
}
