use std::net::TcpStream;
use std::sync::mpsc::{channel, Receiver};
use std::time::{Duration, Instant};

use crowdgaze_service::protocol::{decode_server, ClientMessage, ServerMessage};
use crowdgaze_service::server::{Command, Hub, Server, CLIENT_BACKLOG};
use tungstenite::stream::MaybeTlsStream;
use tungstenite::{connect, Message, WebSocket};

type Client = WebSocket<MaybeTlsStream<TcpStream>>;

fn info(i: usize) -> ServerMessage {
    ServerMessage::Info { message: format!("m{i}") }
}

fn start(backlog: usize) -> (Server, Receiver<Command>) {
    let (tx, rx) = channel();
    let server = Server::bind(0, Hub::new(backlog), tx).unwrap();
    (server, rx)
}

fn client(server: &Server) -> Client {
    let (ws, _) = connect(format!("ws://{}", server.local_addr())).unwrap();
    if let MaybeTlsStream::Plain(s) = ws.get_ref() {
        s.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
    }
    ws
}

fn wait_for(what: &str, mut cond: impl FnMut() -> bool) {
    let t = Instant::now();
    while !cond() {
        assert!(t.elapsed() < Duration::from_secs(10), "timed out waiting for {what}");
        std::thread::sleep(Duration::from_millis(5));
    }
}

fn read_server(ws: &mut Client) -> ServerMessage {
    loop {
        match ws.read().unwrap() {
            Message::Text(t) => return decode_server(t.as_str()).unwrap().unwrap(),
            Message::Close(_) => panic!("server closed the connection"),
            _ => {}
        }
    }
}

#[test]
fn overflowing_backlog_disconnects_only_that_client() {
    let hub = Hub::new(CLIENT_BACKLOG);
    let (_, slow) = hub.register();
    let (_, fast) = hub.register();
    for i in 0..CLIENT_BACKLOG {
        assert_eq!(hub.broadcast(&info(i)), 2);
        fast.recv().unwrap();
    }
    assert_eq!(hub.broadcast(&info(CLIENT_BACKLOG)), 1);
    assert_eq!(hub.client_count(), 1);
    // The dropped client still drains what was queued, then sees the disconnect.
    assert_eq!(slow.iter().count(), CLIENT_BACKLOG);
    assert!(fast.recv().is_ok());
}

#[test]
fn send_to_reaches_one_client() {
    let hub = Hub::new(4);
    let (a, ra) = hub.register();
    let (_, rb) = hub.register();
    assert!(hub.send_to(a, &info(0)));
    assert!(ra.try_recv().is_ok());
    assert!(rb.try_recv().is_err());
    hub.remove(a);
    assert!(!hub.send_to(a, &info(1)));
}

#[test]
fn two_clients_receive_identical_sequences() {
    let (server, _rx) = start(CLIENT_BACKLOG);
    let a = client(&server);
    let b = client(&server);
    wait_for("two clients", || server.hub().client_count() == 2);
    let sent: Vec<ServerMessage> = (0..200).map(info).collect();
    let reader = |mut ws: Client| std::thread::spawn(move || (0..200).map(|_| read_server(&mut ws)).collect::<Vec<_>>());
    let (ha, hb) = (reader(a), reader(b));
    for m in &sent {
        assert_eq!(server.hub().broadcast(m), 2);
        // Workers drain every 10 ms; pace well below the backlog.
        std::thread::sleep(Duration::from_millis(1));
    }
    let (got_a, got_b) = (ha.join().unwrap(), hb.join().unwrap());
    assert_eq!(got_a, sent);
    assert_eq!(got_b, sent);
}

#[test]
fn client_that_stops_reading_is_disconnected() {
    let (server, _rx) = start(CLIENT_BACKLOG);
    let mut reader = client(&server);
    let _stalled = client(&server);
    wait_for("two clients", || server.hub().client_count() == 2);
    // The stalled client's socket buffers fill, its worker blocks on write,
    // and its queue then overflows.
    let payload = "x".repeat(64 * 1024);
    let t = Instant::now();
    let mut sent = 0;
    while server.hub().client_count() == 2 {
        assert!(t.elapsed() < Duration::from_secs(30), "stalled client was never dropped");
        server.hub().broadcast(&ServerMessage::Info { message: payload.clone() });
        sent += 1;
        // Keep the reading client drained.
        read_server(&mut reader);
    }
    assert!(sent > CLIENT_BACKLOG);
    assert_eq!(server.hub().client_count(), 1);
}

#[test]
fn client_messages_reach_the_inbox() {
    let (server, rx) = start(CLIENT_BACKLOG);
    let mut ws = client(&server);
    wait_for("client", || server.hub().client_count() == 1);
    ws.send(Message::text(r#"{"type":"mystery","x":1}"#)).unwrap();
    ws.send(Message::text(r#"{"type":"fit","degree":2}"#)).unwrap();
    ws.send(Message::text(r#"{"type":"click","u":0.5,"v":0.25,"ts":99}"#)).unwrap();
    let first = rx.recv_timeout(Duration::from_secs(10)).unwrap();
    assert_eq!(first.message, ClientMessage::Fit { degree: Some(2) });
    let second = rx.recv_timeout(Duration::from_secs(10)).unwrap();
    assert_eq!(
        second.message,
        ClientMessage::Click {
            u: 0.5,
            v: 0.25,
            ts: Some(99)
        }
    );
    assert_eq!(first.client, second.client);
    assert!(first.client.is_some());
}

#[test]
fn malformed_messages_get_an_error_reply() {
    let (server, rx) = start(CLIENT_BACKLOG);
    let mut ws = client(&server);
    ws.send(Message::text(r#"{"type":"click","u":"left"}"#)).unwrap();
    match read_server(&mut ws) {
        ServerMessage::Error { message } => assert!(message.contains("click"), "{message}"),
        other => panic!("expected an error, got {other:?}"),
    }
    ws.send(Message::binary(vec![1u8, 2, 3])).unwrap();
    assert!(matches!(read_server(&mut ws), ServerMessage::Error { .. }));
    assert!(rx.try_recv().is_err());
}

#[test]
fn shutdown_closes_clients() {
    let (server, _rx) = start(CLIENT_BACKLOG);
    let mut ws = client(&server);
    wait_for("client", || server.hub().client_count() == 1);
    server.shutdown();
    let t = Instant::now();
    loop {
        match ws.read() {
            Ok(Message::Close(_)) | Err(_) => break,
            Ok(_) => assert!(t.elapsed() < Duration::from_secs(10)),
        }
    }
}
