use std::net::{TcpListener, TcpStream};
use std::thread;

use crate::data::Dataset;
use crate::nn::ClientModel;

use super::client::{client_run, ClientOptions, ClientOutcome};
use super::server::{server_run, ServerOptions, ServerOutcome};
use super::SplitError;

/// Runs client and server in one process over a localhost TCP socket.
pub fn run_loopback(
    model: ClientModel,
    train: &Dataset,
    test: Option<&Dataset>,
    client: &ClientOptions,
    server: &ServerOptions,
) -> Result<(ClientOutcome, ServerOutcome), SplitError> {
    let listener = TcpListener::bind("127.0.0.1:0").map_err(|e| SplitError::Wire(e.into()))?;
    let addr = listener.local_addr().map_err(|e| SplitError::Wire(e.into()))?;
    let server = server.clone();
    let handle = thread::spawn(move || -> Result<ServerOutcome, SplitError> {
        let (stream, _) = listener.accept().map_err(|e| SplitError::Wire(e.into()))?;
        stream.set_nodelay(true).ok();
        server_run(stream, &server)
    });
    let stream = TcpStream::connect(addr).map_err(|e| SplitError::Wire(e.into()))?;
    stream.set_nodelay(true).ok();
    let client_result = client_run(stream, model, train, test, client);
    let server_result = handle.join().map_err(|_| SplitError::Protocol("server thread panicked".into()))?;
    match (client_result, server_result) {
        (Ok(c), Ok(s)) => Ok((c, s)),
        (Err(e), _) => Err(e),
        (Ok(_), Err(e)) => Err(e),
    }
}
