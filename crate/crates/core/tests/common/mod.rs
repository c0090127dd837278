//! Shared test support: seeded instance generators, a brute-force
//! embedding oracle that shares no code with the engines, and an
//! in-process multi-site testbed.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use merge_core::clock::Clock;
use merge_core::config::Config;
use merge_core::hummingbird::Wan;
use merge_core::rpc::Transport;
use merge_core::service::Core;
use merge_core::site::{Commander, FaultProfile};
use merge_core::store::Store;
use merge_core::xir::{
    Alloc, Constraint, Prop, PropertyMap, ResourceUuid, Role, Value, XirLink, XirNetwork, XirNode,
};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::Rng;

pub const MBPS: i64 = 1_000_000;

/// Knobs for [`random_instance`].
#[derive(Debug, Clone, Copy)]
pub struct Shape {
    pub max_exp_nodes: usize,
    pub max_exp_links: usize,
    pub max_res_nodes: usize,
    /// Expected resource degree.
    pub degree: f64,
}

pub const SMALL: Shape = Shape {
    max_exp_nodes: 5,
    max_exp_links: 6,
    max_res_nodes: 8,
    degree: 2.6,
};

pub const LARGE: Shape = Shape {
    max_exp_nodes: 20,
    max_exp_links: 24,
    max_res_nodes: 100,
    degree: 4.0,
};

#[derive(Debug, Clone)]
pub struct Instance {
    pub x: XirNetwork,
    /// One commissioned site: every node and link carries a uuid.
    pub res: XirNetwork,
}

impl Instance {
    pub fn is_small(&self) -> bool {
        self.x.nodes.len() <= 5 && self.res.nodes.len() <= 8
    }
}

const OSES: [&str; 3] = ["ubuntu", "debian", "fedora"];
const FEATURES: [&str; 3] = ["gpu", "sriov", "fpga"];

/// A random single-site resource network with `n` nodes.
pub fn random_resources(rng: &mut StdRng, tag: &str, n: usize, degree: f64) -> XirNetwork {
    let mut res = XirNetwork::new(Role::Resource);
    for i in 0..n {
        let mut props = PropertyMap::new()
            .with("cores", Value::Int(*[1, 2, 4, 8].choose(rng).unwrap()))
            .with("mem", Value::Int(*[4, 8, 16, 32].choose(rng).unwrap()))
            .with("os", Value::Str(OSES.choose(rng).unwrap().to_string()));
        if rng.gen_bool(0.7) {
            let k = rng.gen_range(1..=FEATURES.len());
            props.insert("features", Value::set(FEATURES.choose_multiple(rng, k).copied()));
        }
        let alloc = if rng.gen_bool(0.25) {
            props.insert("slots", Value::Int(rng.gen_range(1..=3)));
            Alloc::Shared
        } else {
            Alloc::Exclusive
        };
        let mut node = XirNode::resource(&format!("r{i}"), props, alloc);
        node.uuid = Some(ResourceUuid::derived(&format!("{tag}/r{i}")));
        node.site = Some("site0".into());
        res.nodes.push(node);
    }
    let p = if n > 1 { (degree / (n - 1) as f64).min(0.9) } else { 0.0 };
    let mut k = 0;
    for i in 0..n {
        for j in i + 1..n {
            if !rng.gen_bool(p) {
                continue;
            }
            let mut props = PropertyMap::new().with("latency", Value::Int(rng.gen_range(1..=40)));
            let loss = *[0, 0, 1_000, 20_000, 100_000].choose(rng).unwrap();
            if loss > 0 {
                props.insert("loss", Value::Int(loss));
            }
            match rng.gen_range(0..10) {
                0..=5 => props.insert("stack", Value::Str("ethernet".into())),
                6..=7 => props.insert("stack", Value::Str("wifi".into())),
                _ => {}
            }
            let mut link = XirLink::new(&format!("l{k}"), &format!("r{i}"), &format!("r{j}"), props);
            if rng.gen_bool(0.7) {
                link = link.with_capacity(*[10, 50, 100].choose(rng).unwrap() * MBPS);
            }
            link.uuid = Some(ResourceUuid::derived(&format!("{tag}/l{k}")));
            res.links.push(link);
            k += 1;
        }
    }
    res
}

fn random_node_props(rng: &mut StdRng) -> PropertyMap {
    let mut props = PropertyMap::new();
    if rng.gen_bool(0.5) {
        props.insert("cores", Constraint::Ge(*[1, 2, 4, 8].choose(rng).unwrap()));
    }
    if rng.gen_bool(0.4) {
        props.insert("mem", Constraint::Gt(*[2, 4, 8, 16].choose(rng).unwrap()));
    }
    match rng.gen_range(0..6) {
        0 => props.insert("os", Constraint::Eq(Value::Str(OSES.choose(rng).unwrap().to_string()))),
        1 => props.insert("os", Value::Str(OSES.choose(rng).unwrap().to_string())),
        2 => {
            let two: Vec<_> = OSES.choose_multiple(rng, 2).map(|s| Constraint::select(*s)).collect();
            props.insert("os", Constraint::choice(two).unwrap())
        }
        _ => {}
    }
    if rng.gen_bool(0.25) {
        props.insert("features", Constraint::select(*FEATURES.choose(rng).unwrap()));
    }
    props
}

fn random_link_props(rng: &mut StdRng) -> PropertyMap {
    let mut props = PropertyMap::new();
    if rng.gen_bool(0.5) {
        props.insert("latency", Constraint::Lt(*[20, 50, 100].choose(rng).unwrap()));
    }
    if rng.gen_bool(0.3) {
        props.insert("loss", Constraint::Le(*[1_000, 50_000, 200_000].choose(rng).unwrap()));
    }
    if rng.gen_bool(0.35) {
        props.insert("bandwidth", Constraint::Ge(*[5, 20, 60].choose(rng).unwrap() * MBPS));
    }
    if rng.gen_bool(0.2) {
        props.insert("stack", Constraint::eq("ethernet"));
    }
    props
}

/// A random experiment over `n` nodes with up to `max_links` links.
pub fn random_experiment(rng: &mut StdRng, n: usize, max_links: usize) -> XirNetwork {
    let mut x = XirNetwork::new(Role::Experiment);
    for i in 0..n {
        x.nodes.push(XirNode::experiment(&format!("n{i}"), random_node_props(rng)));
    }
    if n >= 2 {
        let m = rng.gen_range(0..=max_links.min(n * (n - 1) / 2 + 1));
        for k in 0..m {
            let a = rng.gen_range(0..n);
            let mut b = rng.gen_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            x.links.push(XirLink::new(
                &format!("e{k}"),
                &format!("n{a}"),
                &format!("n{b}"),
                random_link_props(rng),
            ));
        }
    }
    x
}

pub fn random_instance(rng: &mut StdRng, tag: &str, shape: Shape) -> Instance {
    let nr = rng.gen_range(2..=shape.max_res_nodes);
    let ne = rng.gen_range(1..=shape.max_exp_nodes);
    Instance {
        x: random_experiment(rng, ne, shape.max_exp_links),
        res: random_resources(rng, tag, nr, shape.degree),
    }
}

/// Reference implementations written directly over the XIR documents.
pub mod oracle {
    use super::*;

    fn value_ok(c: &Constraint, v: &Value) -> bool {
        match c {
            Constraint::Eq(w) => w == v,
            Constraint::Lt(k) => matches!(v, Value::Int(x) if x < k),
            Constraint::Le(k) => matches!(v, Value::Int(x) if x <= k),
            Constraint::Gt(k) => matches!(v, Value::Int(x) if x > k),
            Constraint::Ge(k) => matches!(v, Value::Int(x) if x >= k),
            Constraint::Select(s) => match v {
                Value::Set(set) => set.contains(s),
                Value::Str(x) => x == s,
                _ => false,
            },
            Constraint::Choice(cs) => cs.iter().any(|c| value_ok(c, v)),
        }
    }

    /// Every required leaf present and satisfied.
    pub fn fits(req: &PropertyMap, off: &PropertyMap) -> bool {
        req.iter().all(|(k, r)| match (r, off.child(k)) {
            (Prop::Map(rm), Some(Prop::Map(om))) => fits(rm, om),
            (Prop::Map(rm), _) => rm.leaf_count() == 0,
            (Prop::Value(w), Some(Prop::Value(g))) => w == g,
            (Prop::Constraint(c), Some(Prop::Value(g))) => value_ok(c, g),
            _ => false,
        })
    }

    /// Loss in ppm of a chain of lossy segments, rounded half-up, using the
    /// survival fraction ∏(10^6 − l) / 10^(6n).
    pub fn chain_loss(losses: &[i64]) -> i64 {
        let mut survive: u128 = 1;
        let mut scale: u128 = 1;
        for &l in losses {
            survive *= (1_000_000 - l) as u128;
            scale *= 1_000_000;
        }
        let lost = scale - survive; // in units of 1/scale
        // ppm = lost / (scale / 10^6), rounded half-up via quotient and remainder
        let unit = scale / 1_000_000;
        if unit == 0 {
            return 0;
        }
        let (q, r) = (lost / unit, lost % unit);
        (q + u128::from(r >= unit - r)) as i64
    }

    fn int(props: &PropertyMap, key: &str) -> Option<i64> {
        match props.get_value(key) {
            Some(Value::Int(v)) => Some(*v),
            _ => None,
        }
    }

    /// What a chain of resource links looks like to an experiment link.
    pub fn path_view(res: &XirNetwork, path: &[usize]) -> PropertyMap {
        let segs: Vec<&XirLink> = path.iter().map(|&i| &res.links[i]).collect();
        let mut out = PropertyMap::new();
        if let Some(first) = segs.first() {
            for (k, v) in first.props.iter() {
                if ["bandwidth", "latency", "loss", "stack"].contains(&k.as_str()) {
                    continue;
                }
                if segs.iter().all(|s| s.props.child(k) == Some(v)) {
                    out.insert(k, v.clone());
                }
            }
            let stacks: Vec<_> = segs.iter().map(|s| s.props.get_value("stack")).collect();
            if let Some(Value::Str(s)) = stacks[0] {
                if stacks.iter().all(|t| *t == stacks[0]) {
                    out.insert("stack", Value::Str(s.clone()));
                }
            }
        }
        if let Some(b) = segs.iter().filter_map(|s| s.capacity_bps).min() {
            out.insert("bandwidth", Value::Int(b));
        }
        out.insert("latency", Value::Int(segs.iter().map(|s| int(&s.props, "latency").unwrap_or(0)).sum()));
        let losses: Vec<i64> = segs.iter().map(|s| int(&s.props, "loss").unwrap_or(0)).collect();
        out.insert("loss", Value::Int(chain_loss(&losses)));
        out
    }

    /// Bandwidth reserved by an experiment link: its lower bound or exact value.
    pub fn ask(props: &PropertyMap) -> i64 {
        fn of(c: &Constraint) -> i64 {
            match c {
                Constraint::Ge(v) | Constraint::Gt(v) => *v,
                Constraint::Eq(Value::Int(v)) => *v,
                Constraint::Choice(cs) => cs.iter().map(of).min().unwrap_or(0),
                _ => 0,
            }
        }
        match props.child("bandwidth") {
            Some(Prop::Value(Value::Int(v))) => *v,
            Some(Prop::Constraint(c)) => of(c),
            _ => 0,
        }
        .max(0)
    }

    pub struct World<'a> {
        pub res: &'a XirNetwork,
        index: HashMap<&'a str, usize>,
        adj: Vec<Vec<(usize, usize)>>,
        pub slots: Vec<u32>,
        max_hops: usize,
        cache: HashMap<(usize, usize), Vec<Vec<usize>>>,
    }

    impl<'a> World<'a> {
        pub fn new(res: &'a XirNetwork, max_hops: usize) -> Self {
            let index: HashMap<&str, usize> = res.nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect();
            let mut adj = vec![Vec::new(); res.nodes.len()];
            for (li, l) in res.links.iter().enumerate() {
                let a = index[l.endpoints[0].as_str()];
                let b = index[l.endpoints[1].as_str()];
                adj[a].push((li, b));
                adj[b].push((li, a));
            }
            let slots = res
                .nodes
                .iter()
                .map(|n| {
                    let gateway = matches!(n.props.get_value("gateway"), Some(Value::Bool(true)));
                    match (gateway, n.alloc) {
                        (true, _) => 0,
                        (false, Some(Alloc::Shared)) => int(&n.props, "slots").unwrap_or(1).max(0) as u32,
                        (false, _) => 1,
                    }
                })
                .collect();
            World {
                res,
                index,
                adj,
                slots,
                max_hops,
                cache: HashMap::new(),
            }
        }

        pub fn index_of_uuid(&self, u: &ResourceUuid) -> Option<usize> {
            self.res.nodes.iter().position(|n| n.uuid.as_ref() == Some(u))
        }

        pub fn link_of_uuid(&self, u: &ResourceUuid) -> Option<usize> {
            self.res.links.iter().position(|l| l.uuid.as_ref() == Some(u))
        }

        pub fn endpoints(&self, link: usize) -> (usize, usize) {
            let l = &self.res.links[link];
            (self.index[l.endpoints[0].as_str()], self.index[l.endpoints[1].as_str()])
        }

        /// Every simple path of at most `max_hops` links, in no particular order.
        pub fn paths(&mut self, a: usize, b: usize) -> Vec<Vec<usize>> {
            if let Some(p) = self.cache.get(&(a, b)) {
                return p.clone();
            }
            let mut out = Vec::new();
            if a == b {
                out.push(Vec::new());
            } else {
                let mut seen = vec![false; self.res.nodes.len()];
                seen[a] = true;
                let mut stack = Vec::new();
                self.dfs(a, b, &mut seen, &mut stack, &mut out);
            }
            self.cache.insert((a, b), out.clone());
            out
        }

        fn dfs(&self, at: usize, b: usize, seen: &mut [bool], stack: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if at == b {
                out.push(stack.clone());
                return;
            }
            if stack.len() == self.max_hops {
                return;
            }
            for &(l, next) in &self.adj[at] {
                if seen[next] {
                    continue;
                }
                seen[next] = true;
                stack.push(l);
                self.dfs(next, b, seen, stack, out);
                stack.pop();
                seen[next] = false;
            }
        }
    }

    /// Exhaustive search: every assignment of experiment nodes to resource
    /// slots, and for each, every combination of paths for the links.
    pub fn feasible(x: &XirNetwork, res: &XirNetwork, max_hops: usize) -> bool {
        let mut w = World::new(res, max_hops);
        let compat: Vec<Vec<usize>> = x
            .nodes
            .iter()
            .map(|n| {
                (0..res.nodes.len())
                    .filter(|&r| w.slots[r] > 0 && fits(&n.props, &res.nodes[r].props))
                    .collect()
            })
            .collect();
        let pos: HashMap<&str, usize> = x.nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect();
        let ends: Vec<(usize, usize)> = x
            .links
            .iter()
            .map(|l| (pos[l.endpoints[0].as_str()], pos[l.endpoints[1].as_str()]))
            .collect();
        let mut used = vec![0u32; res.nodes.len()];
        let mut assign = vec![usize::MAX; x.nodes.len()];
        assign_nodes(0, x, &compat, &ends, &mut w, &mut used, &mut assign)
    }

    fn assign_nodes(
        k: usize,
        x: &XirNetwork,
        compat: &[Vec<usize>],
        ends: &[(usize, usize)],
        w: &mut World<'_>,
        used: &mut [u32],
        assign: &mut [usize],
    ) -> bool {
        if k == x.nodes.len() {
            let mut load = vec![0i64; w.res.links.len()];
            return route_links(0, x, ends, assign, w, &mut load);
        }
        for &r in &compat[k] {
            if used[r] >= w.slots[r] {
                continue;
            }
            used[r] += 1;
            assign[k] = r;
            let ok = assign_nodes(k + 1, x, compat, ends, w, used, assign);
            used[r] -= 1;
            if ok {
                return true;
            }
        }
        false
    }

    fn route_links(
        j: usize,
        x: &XirNetwork,
        ends: &[(usize, usize)],
        assign: &[usize],
        w: &mut World<'_>,
        load: &mut [i64],
    ) -> bool {
        if j == x.links.len() {
            return true;
        }
        let props = &x.links[j].props;
        let need = ask(props);
        let (a, b) = ends[j];
        for p in w.paths(assign[a], assign[b]) {
            if !fits(props, &path_view(w.res, &p)) {
                continue;
            }
            let room = p
                .iter()
                .all(|&s| w.res.links[s].capacity_bps.is_none_or(|c| load[s] + need <= c));
            if !room {
                continue;
            }
            for &s in &p {
                load[s] += need;
            }
            let ok = route_links(j + 1, x, ends, assign, w, load);
            for &s in &p {
                load[s] -= need;
            }
            if ok {
                return true;
            }
        }
        false
    }

    /// Checks an embedding from first principles: node fit, slot counts,
    /// path continuity and length, link constraints and summed bandwidth.
    pub fn check(
        x: &XirNetwork,
        res: &XirNetwork,
        max_hops: usize,
        node_map: &BTreeMap<String, ResourceUuid>,
        link_map: &BTreeMap<String, Vec<ResourceUuid>>,
    ) -> Result<(), String> {
        let w = World::new(res, max_hops);
        let mut used = vec![0u32; res.nodes.len()];
        for n in &x.nodes {
            let u = node_map.get(&n.id).ok_or(format!("node {} unmapped", n.id))?;
            let r = w.index_of_uuid(u).ok_or(format!("node {} on unknown {u}", n.id))?;
            if !fits(&n.props, &res.nodes[r].props) {
                return Err(format!("node {} does not fit {}", n.id, res.nodes[r].id));
            }
            used[r] += 1;
            if used[r] > w.slots[r] {
                return Err(format!("{} over its slots", res.nodes[r].id));
            }
        }
        if node_map.len() != x.nodes.len() || link_map.len() != x.links.len() {
            return Err("extra entries in the map".into());
        }
        let mut load = vec![0i64; res.links.len()];
        for l in &x.links {
            let segs = link_map.get(&l.id).ok_or(format!("link {} unmapped", l.id))?;
            let path: Vec<usize> = segs
                .iter()
                .map(|u| w.link_of_uuid(u).ok_or(format!("link {} on unknown {u}", l.id)))
                .collect::<Result<_, _>>()?;
            if path.len() > max_hops {
                return Err(format!("link {} has {} hops", l.id, path.len()));
            }
            let a = w.index_of_uuid(&node_map[&l.endpoints[0]]).unwrap();
            let b = w.index_of_uuid(&node_map[&l.endpoints[1]]).unwrap();
            let mut at = a;
            let mut visited = vec![a];
            for &s in &path {
                let (p, q) = w.endpoints(s);
                at = if p == at {
                    q
                } else if q == at {
                    p
                } else {
                    return Err(format!("link {} path is not contiguous", l.id));
                };
                if visited.contains(&at) {
                    return Err(format!("link {} path revisits a node", l.id));
                }
                visited.push(at);
            }
            if at != b {
                return Err(format!("link {} path ends at the wrong node", l.id));
            }
            if !fits(&l.props, &path_view(res, &path)) {
                return Err(format!("link {} constraints not met", l.id));
            }
            for &s in &path {
                load[s] += ask(&l.props);
                if res.links[s].capacity_bps.is_some_and(|c| load[s] > c) {
                    return Err(format!("resource link {} oversubscribed", res.links[s].id));
                }
            }
        }
        Ok(())
    }
}

/// Cores, commanders and the WAN, all in one process. Commanders are reached
/// through the transport's `local:<site>` endpoints.
pub struct Testbed {
    pub store: Arc<Store>,
    pub transport: Arc<Transport>,
    pub core: Arc<Core>,
    pub commanders: BTreeMap<String, Arc<Commander>>,
    pub wan: Wan,
}

impl Testbed {
    pub fn new(store: Store, clock: Arc<dyn Clock>, cfg: Config) -> Testbed {
        let store = Arc::new(store);
        let transport = Arc::new(Transport::new());
        let core = Core::new(store.clone(), transport.clone(), clock, cfg);
        Testbed {
            store,
            transport,
            core,
            commanders: BTreeMap::new(),
            wan: Wan::new(),
        }
    }

    /// Starts a commander for `site` and registers it on the transport.
    pub fn add_site(&mut self, site: &str, faults: FaultProfile) -> Arc<Commander> {
        let c = Commander::new(site, faults, self.transport.clone());
        self.transport.register(&format!("local:{site}"), c.clone());
        self.wan.attach(c.hummingbird());
        self.commanders.insert(site.to_string(), c.clone());
        c
    }

    /// Commissions `net` at `site` through its commander; returns the
    /// assigned uuids (nodes then links).
    pub fn commission(&self, site: &str, net: &XirNetwork) -> Vec<ResourceUuid> {
        let out = self
            .core
            .commission(site, net, Some(format!("local:{site}")), None)
            .unwrap_or_else(|e| panic!("commission {site}: {e}"));
        serde_json::from_value(out["uuids"].clone()).unwrap()
    }
}

/// A star of `n` bare-metal hosts around a site gateway, linked at 1 Gb/s.
pub fn site_star(site: &str, n: usize, image: &str) -> XirNetwork {
    let mut net = XirNetwork::new(Role::Resource);
    let mut gw = XirNode::resource("gw", PropertyMap::new().with("gateway", Value::Bool(true)), Alloc::Shared);
    gw.props.insert("wan_latency", Value::Int(5));
    net.nodes.push(gw);
    for i in 0..n {
        let props = PropertyMap::new()
            .with("cores", Value::Int(4))
            .with("image", Value::set([image, "debian"]))
            .with("kind", Value::Str("host".into()))
            .with("site_name", Value::Str(site.into()));
        net.nodes.push(XirNode::resource(&format!("h{i}"), props, Alloc::Exclusive));
        net.links.push(
            XirLink::new(
                &format!("u{i}"),
                &format!("h{i}"),
                "gw",
                PropertyMap::new().with("latency", Value::Int(1)),
            )
            .with_capacity(1_000 * MBPS),
        );
    }
    net
}

/// A 50-node, 60-link experiment and a 500-node, 800-link leaf/spine
/// substrate (4 spines, 16 leaves, 480 hosts of which 256 are dual-homed).
pub fn speed_instance(seed: u64) -> (XirNetwork, XirNetwork) {
    let tag = format!("speed{seed}");
    let mut rng = <StdRng as rand::SeedableRng>::seed_from_u64(seed);
    let mut res = XirNetwork::new(Role::Resource);
    let add_node = |res: &mut XirNetwork, id: String, props: PropertyMap| {
        let mut n = XirNode::resource(&id, props, Alloc::Exclusive);
        n.uuid = Some(ResourceUuid::derived(&format!("{tag}/{id}")));
        n.site = Some("dc".into());
        res.nodes.push(n);
    };
    let switch = || PropertyMap::new().with("kind", Value::Str("switch".into()));
    for s in 0..4 {
        add_node(&mut res, format!("spine{s}"), switch());
    }
    for l in 0..16 {
        add_node(&mut res, format!("leaf{l}"), switch());
    }
    for h in 0..480 {
        let props = PropertyMap::new()
            .with("cores", Value::Int(*[8, 16, 32].choose(&mut rng).unwrap()))
            .with("mem", Value::Int(*[32, 64].choose(&mut rng).unwrap()))
            .with("kind", Value::Str("host".into()))
            .with("os", Value::Str(OSES.choose(&mut rng).unwrap().to_string()));
        add_node(&mut res, format!("host{h}"), props);
    }
    let mut k = 0;
    let mut add_link = |res: &mut XirNetwork, a: String, b: String, latency: i64, bps: i64| {
        let props = PropertyMap::new()
            .with("latency", Value::Int(latency))
            .with("stack", Value::Str("ethernet".into()));
        let mut l = XirLink::new(&format!("link{k}"), &a, &b, props).with_capacity(bps);
        l.uuid = Some(ResourceUuid::derived(&format!("speed{seed}/link{k}")));
        res.links.push(l);
        k += 1;
    };
    for h in 0..480 {
        add_link(&mut res, format!("host{h}"), format!("leaf{}", h % 16), 2, 10_000 * MBPS);
        if h < 256 {
            add_link(&mut res, format!("host{h}"), format!("leaf{}", (h + 1) % 16), 2, 10_000 * MBPS);
        }
    }
    for l in 0..16 {
        for s in 0..4 {
            add_link(&mut res, format!("leaf{l}"), format!("spine{s}"), 1, 100_000 * MBPS);
        }
    }

    let mut x = XirNetwork::new(Role::Experiment);
    for i in 0..50 {
        let mut props = PropertyMap::new().with("cores", Constraint::Ge(*[4, 8, 16].choose(&mut rng).unwrap()));
        if rng.gen_bool(0.3) {
            props.insert("os", Constraint::Eq(Value::Str(OSES.choose(&mut rng).unwrap().to_string())));
        }
        x.nodes.push(XirNode::experiment(&format!("n{i}"), props));
    }
    let link_props = |rng: &mut StdRng| {
        PropertyMap::new()
            .with("bandwidth", Constraint::Ge(*[100, 500, 1000].choose(rng).unwrap() * MBPS))
            .with("latency", Constraint::Lt(20))
    };
    for i in 1..50 {
        let parent = rng.gen_range(0..i);
        let p = link_props(&mut rng);
        x.links.push(XirLink::new(&format!("e{}", i - 1), &format!("n{parent}"), &format!("n{i}"), p));
    }
    while x.links.len() < 60 {
        let a = rng.gen_range(0..50);
        let b = rng.gen_range(0..50);
        if a == b {
            continue;
        }
        let p = link_props(&mut rng);
        x.links.push(XirLink::new(&format!("e{}", x.links.len()), &format!("n{a}"), &format!("n{b}"), p));
    }
    (x, res)
}

/// `n` exclusive hosts, each with a 1 Gb/s uplink to one switch.
pub fn host_pool(n: usize) -> XirNetwork {
    let mut net = XirNetwork::new(Role::Resource);
    net.nodes.push(XirNode::resource(
        "sw",
        PropertyMap::new().with("kind", Value::Str("switch".into())),
        Alloc::Exclusive,
    ));
    for i in 0..n {
        let props = PropertyMap::new()
            .with("cores", Value::Int(8))
            .with("kind", Value::Str("host".into()));
        net.nodes.push(XirNode::resource(&format!("h{i}"), props, Alloc::Exclusive));
        net.links.push(
            XirLink::new(
                &format!("u{i}"),
                &format!("h{i}"),
                "sw",
                PropertyMap::new().with("latency", Value::Int(1)),
            )
            .with_capacity(1_000 * MBPS),
        );
    }
    net
}

/// A chain of `n` hosts, each link asking for `bps`.
pub fn chain_experiment(n: usize, bps: i64) -> XirNetwork {
    let mut x = XirNetwork::new(Role::Experiment);
    for i in 0..n {
        x.nodes.push(XirNode::experiment(
            &format!("n{i}"),
            PropertyMap::new().with("kind", Value::Str("host".into())),
        ));
    }
    for i in 1..n {
        x.links.push(XirLink::new(
            &format!("e{i}"),
            &format!("n{}", i - 1),
            &format!("n{i}"),
            PropertyMap::new().with("bandwidth", Constraint::Ge(bps)),
        ));
    }
    x
}

/// Steps `agents` round-robin until `done` holds. Only steps that did work
/// are counted; when a whole sweep is idle the clock moves on by `tick_us`.
pub fn drive(
    agents: &[merge_core::materialization::agent::Agent],
    clock: &merge_core::clock::ManualClock,
    tick_us: u64,
    max_idle_sweeps: usize,
    mut done: impl FnMut() -> bool,
) -> Result<usize, String> {
    use merge_core::materialization::agent::Step;
    let mut steps = 0;
    let mut idle_sweeps = 0;
    while !done() {
        let mut worked = false;
        for a in agents {
            if a.step() != Step::Idle {
                steps += 1;
                worked = true;
            }
        }
        if !worked {
            idle_sweeps += 1;
            if idle_sweeps > max_idle_sweeps {
                return Err(format!("stalled after {steps} steps"));
            }
            clock.advance(tick_us);
        }
    }
    Ok(steps)
}

/// An experiment of `per_site` hosts pinned to each of `sites`, wired as a ring.
pub fn ring_across(sites: &[&str], per_site: usize) -> XirNetwork {
    let mut x = XirNetwork::new(Role::Experiment);
    for s in sites {
        for i in 0..per_site {
            let props = PropertyMap::new()
                .with("image", Constraint::select("ubuntu"))
                .with("site_name", Value::Str(s.to_string()));
            x.nodes.push(XirNode::experiment(&format!("{s}-{i}"), props));
        }
    }
    let n = x.nodes.len();
    for i in 0..n {
        let (a, b) = (x.nodes[i].id.clone(), x.nodes[(i + 1) % n].id.clone());
        if n == 2 && i == 1 {
            break;
        }
        x.links.push(XirLink::new(
            &format!("ring{i}"),
            &a,
            &b,
            PropertyMap::new().with("latency", Constraint::Lt(50)),
        ));
    }
    x
}

pub fn realize_params(experiment: &str, x: &XirNetwork) -> merge_core::service::RealizeParams {
    merge_core::service::RealizeParams {
        experiment: experiment.into(),
        network: x.clone(),
        engine: None,
        seed: None,
        max_hops: None,
        budget: None,
    }
}

pub fn state_of(core: &Core, experiment: &str) -> String {
    core.status(experiment)
        .map(|s| s["state"].as_str().unwrap_or("").to_string())
        .unwrap_or_default()
}

fn switch_node(id: &str) -> XirNode {
    XirNode::resource(id, PropertyMap::new().with("kind", Value::Str("switch".into())), Alloc::Exclusive)
}

fn host_node(id: &str, rack: &str) -> XirNode {
    let props = PropertyMap::new()
        .with("cores", Value::Int(8))
        .with("image", Value::set(["ubuntu"]))
        .with("kind", Value::Str("host".into()))
        .with("rack", Value::Str(rack.into()));
    XirNode::resource(id, props, Alloc::Exclusive)
}

fn wire(id: &str, a: &str, b: &str, bps: i64) -> XirLink {
    XirLink::new(id, a, b, PropertyMap::new().with("latency", Value::Int(1))).with_capacity(bps)
}

/// Fourteen nodes: a core switch, three top-of-rack switches and ten hosts
/// (h0-h3 on tor0, h4-h5 on tor1, h6-h9 on tor2). Nodes in `omit` are left
/// out together with their uplinks.
pub fn fig4a(omit: &[&str]) -> XirNetwork {
    let mut net = XirNetwork::new(Role::Resource);
    net.nodes.push(switch_node("core"));
    for t in 0..3 {
        net.nodes.push(switch_node(&format!("tor{t}")));
        net.links.push(wire(&format!("up-tor{t}"), &format!("tor{t}"), "core", 10_000 * MBPS));
    }
    let racks = [0, 0, 0, 0, 1, 1, 2, 2, 2, 2];
    for (h, t) in racks.iter().enumerate() {
        let id = format!("h{h}");
        if omit.contains(&id.as_str()) {
            continue;
        }
        net.nodes.push(host_node(&id, &format!("r{t}")));
        net.links.push(wire(&format!("up-{id}"), &id, &format!("tor{t}"), 1_000 * MBPS));
    }
    net
}

/// A folded Clos fragment: spines s0-s1, leaves l0-l3 fully meshed to them at
/// 1 Gb/s, and two hosts per leaf (racks A-D) on 10 Gb/s ports. `halved`
/// leaf-spine links carry 500 Mb/s instead. Nodes in `omit` are left out
/// with their ports.
pub fn clos(omit: &[&str], halved: &[&str]) -> XirNetwork {
    let mut net = XirNetwork::new(Role::Resource);
    for s in 0..2 {
        net.nodes.push(switch_node(&format!("s{s}")));
    }
    for l in 0..4 {
        net.nodes.push(switch_node(&format!("l{l}")));
        for s in 0..2 {
            let id = format!("l{l}-s{s}");
            let bps = if halved.contains(&id.as_str()) { 500 } else { 1_000 } * MBPS;
            net.links.push(wire(&id, &format!("l{l}"), &format!("s{s}"), bps));
        }
    }
    for (l, rack) in ["A", "B", "C", "D"].iter().enumerate() {
        for i in 0..2 {
            let id = format!("{}{i}", rack.to_lowercase());
            if omit.contains(&id.as_str()) {
                continue;
            }
            net.nodes.push(host_node(&id, rack));
            net.links.push(wire(&format!("{id}-l{l}"), &id, &format!("l{l}"), 10_000 * MBPS));
        }
    }
    net
}

/// Two hosts in rack A and two in rack B, with every A-B pair and each
/// intra-rack pair linked at 400 Mb/s: 1.6 Gb/s must leave leaf l0.
pub fn clos_experiment() -> XirNetwork {
    let mut x = XirNetwork::new(Role::Experiment);
    for (id, rack) in [("p0", "A"), ("p1", "A"), ("q0", "B"), ("q1", "B")] {
        x.nodes.push(XirNode::experiment(
            id,
            PropertyMap::new().with("rack", Value::Str(rack.into())),
        ));
    }
    let pairs = [("p0", "q0"), ("p0", "q1"), ("p1", "q0"), ("p1", "q1"), ("p0", "p1"), ("q0", "q1")];
    for (i, (a, b)) in pairs.iter().enumerate() {
        x.links.push(XirLink::new(
            &format!("c{i}"),
            a,
            b,
            PropertyMap::new().with("bandwidth", Constraint::Ge(400 * MBPS)),
        ));
    }
    x
}
