use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::sync::mpsc;
use std::time::Duration;

use merge_core::xir::{serialize_xir, Alloc, Constraint, PropertyMap, Role, Value, XirLink, XirNetwork, XirNode};
use serde_json::Value as Json;

const BIN: &str = env!("CARGO_BIN_EXE_merge");

/// A spawned process that is killed when the test lets go of it.
struct Daemon {
    child: Child,
    addr: String,
}

impl Drop for Daemon {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Starts `merge <args>` and waits for it to log its listening address.
fn daemon(args: &[&str]) -> Daemon {
    let mut child = Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "info")
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .expect("spawn merge");
    let stderr = child.stderr.take().unwrap();
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        for line in BufReader::new(stderr).lines().map_while(Result::ok) {
            if let Some(rest) = line.split("listening on ").nth(1) {
                let _ = tx.send(rest.split_whitespace().next().unwrap_or("").to_string());
            }
        }
    });
    let addr = rx.recv_timeout(Duration::from_secs(20)).expect("daemon never reported its address");
    Daemon { child, addr }
}

fn merge(addr: &str, args: &[&str]) -> Output {
    Command::new(BIN)
        .arg("--addr")
        .arg(addr)
        .args(args)
        .env("RUST_LOG", "off")
        .output()
        .expect("run merge")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn json_out(out: &Output) -> Json {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("stdout is not json ({e}): {}", String::from_utf8_lossy(&out.stdout))
    })
}

fn site(name: &str, hosts: usize) -> XirNetwork {
    let mut net = XirNetwork::new(Role::Resource);
    let mut gw = XirNode::resource("gw", PropertyMap::new().with("gateway", Value::Bool(true)), Alloc::Shared);
    gw.props.insert("wan_latency", Value::Int(5));
    net.nodes.push(gw);
    for i in 0..hosts {
        let props = PropertyMap::new()
            .with("image", Value::set(["ubuntu", "debian"]))
            .with("site_name", Value::Str(name.into()));
        net.nodes.push(XirNode::resource(&format!("h{i}"), props, Alloc::Exclusive));
        let link = XirLink::new(&format!("u{i}"), &format!("h{i}"), "gw", PropertyMap::new().with("latency", Value::Int(1)));
        net.links.push(link.with_capacity(1_000_000_000));
    }
    net
}

fn pair(image: &str) -> XirNetwork {
    let mut x = XirNetwork::new(Role::Experiment);
    for (id, s) in [("a", "east"), ("b", "west")] {
        let props = PropertyMap::new()
            .with("image", Constraint::select(image))
            .with("site_name", Value::Str(s.into()));
        x.nodes.push(XirNode::experiment(id, props));
    }
    x.links.push(XirLink::new("ab", "a", "b", PropertyMap::new().with("latency", Constraint::Lt(50))));
    x
}

fn write(dir: &Path, name: &str, net: &XirNetwork) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serialize_xir(net)).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn end_to_end_over_tcp() {
    let dir = tempfile::tempdir().unwrap();
    let east = daemon(&["site", "--name", "east", "--listen", "127.0.0.1:0"]);
    let west = daemon(&["site", "--name", "west", "--listen", "127.0.0.1:0"]);
    let journal = dir.path().join("core.journal");
    let core = daemon(&["serve", "--listen", "127.0.0.1:0", "--journal", s(&journal), "--agents", "2"]);
    let at = core.addr.as_str();

    let east_xir = write(dir.path(), "east.json", &site("east", 2));
    let west_xir = write(dir.path(), "west.json", &site("west", 2));
    let lab = write(dir.path(), "lab.json", &pair("ubuntu"));
    let nope = write(dir.path(), "nope.json", &pair("plan9"));

    for (name, file, d) in [("east", &east_xir, &east), ("west", &west_xir, &west)] {
        let out = merge(at, &["commission", "--site", name, "--file", s(file), "--endpoint", &d.addr]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let sites = json_out(&merge(at, &["--json", "sites"]));
    assert_eq!(sites.as_array().map(Vec::len), Some(2), "{sites}");

    // Discovery is a pure function of the model, byte for byte.
    let d1 = merge(at, &["--json", "discover", "--file", s(&lab)]);
    let d2 = merge(at, &["--json", "discover", "--file", s(&lab)]);
    assert_eq!(code(&d1), 0);
    assert_eq!(d1.stdout, d2.stdout);
    let entries = &json_out(&d1)["entries"];
    assert_eq!(entries["a"].as_array().map(Vec::len), Some(2), "{entries}");

    let out = merge(at, &["--json", "realize", "--file", s(&nope)]);
    assert_eq!(code(&out), 3);
    assert_eq!(json_out(&out)["code"], 422);
    let out = merge(at, &["realize", "--file", s(&nope)]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("candidate"));

    let out = merge(at, &["--json", "realize", "--file", s(&lab), "--engine", "complete"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    assert_eq!(code(&merge(at, &["reserve", "lab"])), 0);
    assert_eq!(code(&merge(at, &["reserve", "lab"])), 4, "a second reserve is a conflict");
    assert_eq!(code(&merge(at, &["materialize", "lab"])), 0);
    assert_eq!(code(&merge(at, &["status", "lab", "--watch"])), 0);
    let st = json_out(&merge(at, &["--json", "status", "lab"]));
    assert_eq!(st["state"], "materialized", "{st}");
    assert_eq!(st["configured"], st["total"]);

    assert_eq!(code(&merge(at, &["status", "ghost"])), 1, "unknown experiments are not usage errors");
    assert_eq!(code(&merge(at, &["realize", "--file", "/nonexistent.json"])), 2);
    assert_eq!(code(&merge(at, &["frobnicate"])), 2);

    assert_eq!(code(&merge(at, &["demat", "lab"])), 0);
    assert_eq!(code(&merge(at, &["status", "lab", "--watch"])), 0);
    let st = json_out(&merge(at, &["--json", "status", "lab"]));
    assert_eq!(st["state"], "dematerialized", "{st}");
    let exps = String::from_utf8_lossy(&merge(at, &["--json", "experiments"]).stdout).to_string();
    assert!(exps.contains("lab"), "{exps}");
}

#[test]
fn unreachable_core_is_a_transport_failure() {
    // Bind then drop a listener so the port is very likely closed.
    let addr = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().to_string();
    assert_eq!(code(&merge(&addr, &["sites"])), 5);
}

#[test]
fn bad_fault_profile_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("faults.json");
    std::fs::write(&p, "{\"failure\": {\"setup\": 1.5}}").unwrap();
    let out = Command::new(BIN)
        .args(["site", "--name", "x", "--listen", "127.0.0.1:0", "--faults", s(&p)])
        .env("RUST_LOG", "off")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}
