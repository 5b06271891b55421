//! A hand-scripted client against the real server loop.

use std::io::Write;
use std::net::{TcpListener, TcpStream};
use std::thread::{self, JoinHandle};

use hesplit_core::ckks::{keygen, serialize_public_context, CkksContext, CkksParams, HeSet};
use hesplit_core::nn::Tensor;
use hesplit_core::split::{server_run, ServerOptions, ServerOutcome, SplitError};
use hesplit_core::wire::{
    encode_tensor, handshake_client, Connection, GradPayload, Mode, MsgType, SyncParams, WireError, WireMessage,
};

fn params(mode: Mode) -> SyncParams {
    SyncParams {
        mode,
        he_set: HeSet::Toy,
        epochs: 1,
        lr: 0.01,
        batch_size: 2,
        batches: 1,
        seed: 5,
        features: 3,
        classes: 2,
        refresh_every: 1,
    }
}

fn start_server() -> (TcpStream, JoinHandle<Result<ServerOutcome, SplitError>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let handle = thread::spawn(move || {
        let (s, _) = listener.accept().unwrap();
        server_run(s, &ServerOptions { private_seed: Some(1), ..Default::default() })
    });
    (TcpStream::connect(addr).unwrap(), handle)
}

fn tensor(rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|i| i as f64 * 0.1).collect()).unwrap()
}

#[test]
fn scripted_plain_iteration_completes() {
    let (stream, server) = start_server();
    let mut conn = Connection::new(stream);
    handshake_client(&mut conn, &params(Mode::Plain)).unwrap();
    conn.send(&WireMessage::new(MsgType::PlainAct, encode_tensor(&tensor(2, 3)).unwrap())).unwrap();
    conn.expect(MsgType::PlainOut).unwrap();
    let g = GradPayload { grad_al: tensor(2, 2), grad_w: None };
    conn.send(&WireMessage::new(MsgType::GradAl, g.encode().unwrap())).unwrap();
    conn.expect(MsgType::GradAlow).unwrap();
    let end = hesplit_core::wire::EpochEnd { epoch: 0, eval_batches: 0 };
    conn.send(&WireMessage::new(MsgType::EpochEnd, end.encode())).unwrap();
    conn.send(&WireMessage::empty(MsgType::Bye)).unwrap();
    let out = server.join().unwrap().unwrap();
    assert_eq!(out.report.epochs.len(), 1);
}

#[test]
fn out_of_order_message_is_a_protocol_error() {
    let (stream, server) = start_server();
    let mut conn = Connection::new(stream);
    handshake_client(&mut conn, &params(Mode::Plain)).unwrap();
    conn.send(&WireMessage::empty(MsgType::Bye)).unwrap();
    let err = server.join().unwrap().err().unwrap();
    assert_eq!(err.exit_code(), 3, "{err}");
    // the server explains itself before closing
    assert!(matches!(conn.expect(MsgType::PlainOut), Err(WireError::Remote(_))));
}

#[test]
fn wrong_gradient_shape_is_rejected() {
    let (stream, server) = start_server();
    let mut conn = Connection::new(stream);
    handshake_client(&mut conn, &params(Mode::Plain)).unwrap();
    conn.send(&WireMessage::new(MsgType::PlainAct, encode_tensor(&tensor(2, 3)).unwrap())).unwrap();
    conn.expect(MsgType::PlainOut).unwrap();
    let g = GradPayload { grad_al: tensor(3, 2), grad_w: None };
    conn.send(&WireMessage::new(MsgType::GradAl, g.encode().unwrap())).unwrap();
    let err = server.join().unwrap().err().unwrap();
    assert_eq!(err.exit_code(), 3, "{err}");
}

#[test]
fn dropped_connection_mid_frame_is_a_network_error() {
    let (mut stream, server) = start_server();
    {
        let mut conn = Connection::new(stream.try_clone().unwrap());
        handshake_client(&mut conn, &params(Mode::Plain)).unwrap();
    }
    // header promising 100 bytes, then only 3
    let mut partial = b"HSPL".to_vec();
    partial.extend([1, 0, MsgType::PlainAct as u8]);
    partial.extend(100u32.to_le_bytes());
    partial.extend([1, 2, 3]);
    stream.write_all(&partial).unwrap();
    stream.shutdown(std::net::Shutdown::Both).unwrap();
    let err = server.join().unwrap().err().unwrap();
    assert_eq!(err.exit_code(), 2, "{err}");
}

#[test]
fn public_context_for_another_parameter_set_is_rejected() {
    let (stream, server) = start_server();
    let mut conn = Connection::new(stream);
    handshake_client(&mut conn, &params(Mode::He)).unwrap();
    // agreed on toy, but ship tiny parameters
    let ctx = CkksContext::new(CkksParams::tiny()).unwrap();
    let keys = keygen(&ctx, 1);
    conn.send(&WireMessage::new(MsgType::CtxPub, serialize_public_context(&ctx, &keys.public, &keys.rotation))).unwrap();
    let err = server.join().unwrap().err().unwrap();
    assert_eq!(err.exit_code(), 3, "{err}");
    assert!(matches!(conn.expect(MsgType::PlainOut), Err(WireError::Remote(_))));
}
