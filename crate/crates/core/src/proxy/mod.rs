//! The ingress and egress proxy endpoints.

pub mod endpoint;
pub mod reorder;
pub mod runtime;

pub use endpoint::{Endpoint, EndpointStats, Output, ProxyError, Role, KEEPALIVE};
pub use reorder::{ReorderBuffer, ReorderError, REORDER_CAP, REORDER_TIMEOUT};
pub use runtime::{
    loopback, serve_egress, serve_ingress, Acceptor, BoxedTransport, Dialer, LoopbackAcceptor,
    LoopbackDialer, TcpAcceptor, TcpDialer, TraceRecorder, Transport,
};
