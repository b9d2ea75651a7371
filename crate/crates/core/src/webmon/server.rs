use std::future::IntoFuture;
use std::io;
use std::net::{SocketAddr, TcpListener};
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::extract::State;
use axum::http::{header, Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::Router;
use tokio::sync::Notify;

use super::render::respond;
use super::SnapshotHandle;

/// Background HTTP monitor. Stops when dropped.
pub struct WebServer {
    addr: SocketAddr,
    stop: Arc<Notify>,
    thread: Option<JoinHandle<()>>,
}

async fn handle(State(snapshots): State<SnapshotHandle>, method: Method, uri: Uri) -> Response {
    if method != Method::GET && method != Method::HEAD {
        return (StatusCode::METHOD_NOT_ALLOWED, "only GET is supported\n").into_response();
    }
    let snap = snapshots.get();
    let r = respond(&snap, uri.path(), uri.query());
    let status = StatusCode::from_u16(r.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (status, [(header::CONTENT_TYPE, r.content_type)], r.body).into_response()
}

/// Binds `host:port` (port 0 picks a free one) and serves snapshots from
/// `snapshots` on a dedicated thread.
pub fn serve(snapshots: SnapshotHandle, host: &str, port: u16) -> io::Result<WebServer> {
    let listener = TcpListener::bind((host, port))?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let runtime = tokio::runtime::Builder::new_current_thread()
        .enable_io()
        .build()?;
    let stop = Arc::new(Notify::new());
    let stop_rx = Arc::clone(&stop);
    let thread = std::thread::Builder::new()
        .name("webmon".into())
        .spawn(move || {
            runtime.block_on(async move {
                let listener = match tokio::net::TcpListener::from_std(listener) {
                    Ok(l) => l,
                    Err(e) => {
                        log::error!("webmon: {e}");
                        return;
                    }
                };
                let app = Router::new().fallback(handle).with_state(snapshots);
                let server = tokio::spawn(axum::serve(listener, app).into_future());
                stop_rx.notified().await;
                server.abort();
            });
        })?;
    log::info!("web monitor listening on http://{addr}/");
    Ok(WebServer {
        addr,
        stop,
        thread: Some(thread),
    })
}

impl WebServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop_and_join();
    }

    fn stop_and_join(&mut self) {
        self.stop.notify_one();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for WebServer {
    fn drop(&mut self) {
        self.stop_and_join();
    }
}
