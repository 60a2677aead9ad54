use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use coral_a2a::client::{A2aApi, LocalSession, MentionLoop, Outbound, Session, SessionState};
use coral_a2a::model::{AgentId, MessageKind, Role};
use coral_a2a::server::tcp::TcpServer;
use coral_a2a::server::wire::RegisterInfo;
use coral_a2a::server::{Server, ServerConfig};
use coral_a2a::ErrorCode;
use serde_json::json;

fn id(s: &str) -> AgentId {
    AgentId::new(s).unwrap()
}

fn serve(auto_register: bool) -> TcpServer {
    let server = Server::new(ServerConfig {
        auto_register,
        ..ServerConfig::default()
    })
    .unwrap();
    TcpServer::bind(server, "127.0.0.1:0").unwrap()
}

fn addr(tcp: &TcpServer) -> String {
    tcp.local_addr().to_string()
}

#[test]
fn connect_happy_path_and_closed_port() {
    let tcp = serve(true);
    let s = Session::connect(&addr(&tcp), &id("web"), None).unwrap();
    assert_eq!(s.state(), SessionState::Connected);

    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap();
    let e = Session::connect(&port.to_string(), &id("web"), None).unwrap_err();
    assert_eq!(e.code, ErrorCode::ConnectFailed);
}

#[test]
fn hello_auto_registers_unknown_agents() {
    let tcp = serve(true);
    assert!(tcp.server().list_agents().is_empty());
    let s = Session::connect(&addr(&tcp), &id("web"), None).unwrap();
    let after: Vec<String> = s
        .list_agents()
        .unwrap()
        .iter()
        .map(|r| r.id.to_string())
        .collect();
    assert_eq!(after, ["web"]);
}

#[test]
fn strict_server_rejects_unknown_hello() {
    let tcp = serve(false);
    let e = Session::connect(&addr(&tcp), &id("web"), None).unwrap_err();
    assert_eq!(e.code, ErrorCode::HelloRejected);
    let info = RegisterInfo {
        description: "browser".into(),
        role: Role::Worker,
    };
    Session::connect(&addr(&tcp), &id("web"), Some(info)).unwrap();
}

#[test]
fn calls_pass_results_and_errors_through() {
    let tcp = serve(true);
    let s = Session::connect(&addr(&tcp), &id("planner"), None).unwrap();
    assert_eq!(s.list_agents().unwrap(), tcp.server().list_agents());
    let e = s.call("send_message", json!({"thread": 7})).unwrap_err();
    assert_eq!(e.code, ErrorCode::BadRequest);
    let e = s
        .call("create_thread", json!({"participants": ["ghost"]}))
        .unwrap_err();
    assert_eq!(e.code, ErrorCode::UnknownAgent);
    assert!(e.message.contains("ghost"));
}

#[test]
fn request_ids_strictly_increase() {
    let tcp = serve(true);
    let s = Session::connect(&addr(&tcp), &id("planner"), None).unwrap();
    let mut last = s.next_request_id();
    for _ in 0..5 {
        s.list_agents().unwrap();
        let next = s.next_request_id();
        assert!(next > last);
        last = next;
    }
}

#[test]
fn interleaved_calls_resolve_to_their_own_responses() {
    let tcp = serve(true);
    let planner = Session::connect(&addr(&tcp), &id("planner"), None).unwrap();
    let web = Session::connect(&addr(&tcp), &id("web"), None).unwrap();
    let thread = planner.create_thread(&[id("web")]).unwrap();

    // The wait is issued first and answered last; the server holds it open.
    let waiter = {
        let web = web.clone();
        std::thread::spawn(move || web.wait_for_mentions(None, Some(10_000)))
    };
    std::thread::sleep(Duration::from_millis(50));
    let listed = web.list_agents().unwrap();
    assert_eq!(listed.len(), 2);
    let tr = web.get_transcript(&thread).unwrap();
    assert!(tr.messages.is_empty());
    assert!(!waiter.is_finished());

    planner
        .send_message(&thread, MessageKind::Chat, "@web go", &[])
        .unwrap();
    let got = waiter.join().unwrap().unwrap();
    assert_eq!(got.len(), 1);
    assert_eq!(got[0].body, "@web go");
}

#[test]
fn closing_a_session_fails_later_and_in_flight_calls() {
    let tcp = serve(true);
    let s = Session::connect(&addr(&tcp), &id("web"), None).unwrap();
    let blocked = {
        let s = s.clone();
        std::thread::spawn(move || s.wait_for_mentions(None, Some(10_000)))
    };
    std::thread::sleep(Duration::from_millis(50));
    s.close();
    assert_eq!(s.state(), SessionState::Closed);
    assert_eq!(
        blocked.join().unwrap().unwrap_err().code,
        ErrorCode::ConnectionLost
    );
    assert_eq!(s.list_agents().unwrap_err().code, ErrorCode::ConnectionLost);
}

#[test]
fn server_shutdown_surfaces_as_connection_lost() {
    let mut tcp = serve(true);
    let s = Session::connect(&addr(&tcp), &id("web"), None).unwrap();
    tcp.shutdown();
    assert_eq!(s.list_agents().unwrap_err().code, ErrorCode::ConnectionLost);
}

#[test]
fn observers_read_but_cannot_write() {
    let tcp = serve(true);
    let planner = Session::connect(&addr(&tcp), &id("planner"), None).unwrap();
    let thread = planner.create_thread(&[]).unwrap();
    planner
        .send_message(&thread, MessageKind::Chat, "hi", &[])
        .unwrap();

    let eye = Session::observe(&addr(&tcp), &id("operator")).unwrap();
    assert_eq!(eye.list_agents().unwrap().len(), 1);
    assert_eq!(eye.get_transcript(&thread).unwrap().messages.len(), 1);
    for e in [
        eye.create_thread(&[]).unwrap_err(),
        eye.send_message(&thread, MessageKind::Chat, "x", &[])
            .unwrap_err(),
        eye.wait_for_mentions(None, Some(0)).unwrap_err(),
    ] {
        assert_eq!(e.code, ErrorCode::BadRequest);
    }
    assert!(!tcp.server().is_registered(&id("operator")));
}

fn local_pair() -> (Arc<Server>, Arc<LocalSession>, Arc<LocalSession>) {
    let server = Server::new(ServerConfig::default()).unwrap();
    for n in ["planner", "web"] {
        server
            .register_agent(coral_a2a::model::AgentRegistration::new(
                id(n),
                n,
                Role::Worker,
            ))
            .unwrap();
    }
    let planner = Arc::new(LocalSession::new(server.clone(), id("planner")));
    let web = Arc::new(LocalSession::new(server.clone(), id("web")));
    (server, planner, web)
}

#[test]
fn echo_handler_replies_to_the_sender() {
    let tcp = serve(true);
    let planner = Session::connect(&addr(&tcp), &id("planner"), None).unwrap();
    let web = Arc::new(Session::connect(&addr(&tcp), &id("web"), None).unwrap());
    let thread = planner.create_thread(&[id("web")]).unwrap();
    let handle = MentionLoop::spawn(
        web,
        |m| {
            Ok(vec![Outbound::reply(
                MessageKind::Chat,
                format!("echo: {}", m.body),
                vec![m.sender.clone()],
            )])
        },
        50,
    );
    planner
        .send_message(&thread, MessageKind::Chat, "@web ping", &[])
        .unwrap();
    let got = planner
        .wait_for_mentions(Some(&thread), Some(5_000))
        .unwrap();
    assert_eq!(got.len(), 1);
    assert_eq!(got[0].body, "echo: @web ping");
    assert_eq!(got[0].sender.as_str(), "web");
    handle.stop();
    let stats = handle.join();
    assert_eq!(stats.handled, 1);
}

#[test]
fn failing_handler_is_reported_and_the_loop_continues() {
    let (server, planner, web) = local_pair();
    let thread = planner.create_thread(&[id("web")]).unwrap();
    let seen = Arc::new(AtomicU64::new(0));
    let counter = seen.clone();
    let handle = MentionLoop::spawn(
        web,
        move |m| {
            counter.fetch_add(1, Ordering::SeqCst);
            if m.body.contains("boom") {
                panic!("cannot parse {}", m.body);
            }
            Err("unsupported request".to_owned())
        },
        20,
    );
    planner
        .send_message(&thread, MessageKind::Chat, "@web boom", &[])
        .unwrap();
    planner
        .send_message(&thread, MessageKind::Chat, "@web again", &[])
        .unwrap();
    let start = Instant::now();
    while seen.load(Ordering::SeqCst) < 2 && start.elapsed() < Duration::from_secs(5) {
        std::thread::sleep(Duration::from_millis(5));
    }
    handle.stop();
    let stats = handle.join();
    assert_eq!(stats.handler_errors, 2);
    let bodies: Vec<String> = server
        .get_transcript(&thread)
        .unwrap()
        .messages
        .into_iter()
        .filter(|m| m.kind == MessageKind::System)
        .map(|m| m.body)
        .collect();
    assert_eq!(
        bodies,
        [
            "handler-error: cannot parse @web boom",
            "handler-error: unsupported request"
        ]
    );
}

#[test]
fn stop_during_a_blocked_wait_exits_within_one_timeout() {
    let (_server, _planner, web) = local_pair();
    let handle = MentionLoop::spawn(web, |_| Ok(vec![]), 200);
    std::thread::sleep(Duration::from_millis(30));
    let asked = Instant::now();
    handle.stop();
    handle.join();
    assert!(
        asked.elapsed() < Duration::from_millis(200 + 150),
        "{:?}",
        asked.elapsed()
    );
}

#[test]
fn pending_mentions_drain_once_each_within_bounded_wakeups() {
    let (_server, planner, web) = local_pair();
    let thread = planner.create_thread(&[id("web")]).unwrap();
    let mut sent = BTreeSet::new();
    for i in 0..25 {
        let m = planner
            .send_message(&thread, MessageKind::Chat, &format!("@web {i}"), &[])
            .unwrap();
        sent.insert(m.seq);
    }
    let got = Arc::new(Mutex::new(Vec::new()));
    let sink = got.clone();
    let handle = MentionLoop::spawn(
        web,
        move |m| {
            sink.lock().unwrap().push(m.seq);
            Ok(vec![])
        },
        20,
    );
    let start = Instant::now();
    while got.lock().unwrap().len() < sent.len() && start.elapsed() < Duration::from_secs(5) {
        std::thread::sleep(Duration::from_millis(5));
    }
    handle.stop();
    let stats = handle.join();
    let got = got.lock().unwrap().clone();
    assert_eq!(got.len(), sent.len(), "each mention handled exactly once");
    assert_eq!(got.iter().copied().collect::<BTreeSet<_>>(), sent);
    assert!(got.windows(2).all(|w| w[0] < w[1]), "delivery order");
    // One wake-up drains the backlog; the rest are idle timeouts after it.
    assert!(stats.wakeups >= 1);
    assert_eq!(stats.handled, sent.len() as u64);
}
