//! Paths through the substrate and their composed properties.

use std::collections::VecDeque;
use std::ops::ControlFlow;

use super::substrate::Substrate;
use crate::xir::{match_props, Constraint, Prop, PropertyMap, Value};

/// Longest path any engine will consider. Loss composition is exact in
/// 128-bit arithmetic up to this many segments.
pub const HOP_LIMIT: usize = 6;

const PPM: u128 = 1_000_000;

/// A path's aggregate view, offered to an experiment link's constraints.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathProps {
    /// Bottleneck capacity in bits/s; absent when no segment states one.
    pub bandwidth: Option<i64>,
    /// Microseconds, summed.
    pub latency: i64,
    /// Composed ppm.
    pub loss: i64,
    /// The `stack` value shared by every segment.
    pub stack: Option<String>,
}

/// `10^6 · (1 − ∏(1 − l_i/10^6))`, rounded half-up.
pub fn compose_loss(losses: &[i64]) -> i64 {
    assert!(losses.len() <= HOP_LIMIT, "loss composition over {} segments", losses.len());
    if losses.is_empty() {
        return 0;
    }
    let mut product: u128 = 1;
    for &l in losses {
        product *= PPM - l.clamp(0, PPM as i64) as u128;
    }
    let denom = PPM.pow(losses.len() as u32 - 1);
    let lost = PPM * denom - product;
    ((2 * lost + denom) / (2 * denom)) as i64
}

fn int_of(props: &PropertyMap, key: &str) -> i64 {
    props.get_value(key).and_then(Value::as_int).unwrap_or(0)
}

pub fn path_props(sub: &Substrate, path: &[usize]) -> PathProps {
    let segs: Vec<_> = path.iter().map(|&l| &sub.links[l]).collect();
    let bandwidth = segs.iter().filter_map(|l| l.capacity).min();
    let latency = segs.iter().map(|l| int_of(&l.props, "latency")).sum();
    let losses: Vec<i64> = segs.iter().map(|l| int_of(&l.props, "loss")).collect();
    let stacks: Vec<Option<&str>> = segs
        .iter()
        .map(|l| l.props.get_value("stack").and_then(Value::as_str))
        .collect();
    let stack = match stacks.first() {
        Some(Some(s)) if stacks.iter().all(|t| t == &Some(*s)) => Some(s.to_string()),
        _ => None,
    };
    PathProps {
        bandwidth,
        latency,
        loss: compose_loss(&losses),
        stack,
    }
}

const COMPOSED: [&str; 4] = ["bandwidth", "latency", "loss", "stack"];

/// Properties a path offers: anything every segment agrees on, overridden by
/// the composed bandwidth, latency, loss and stack.
pub fn offered(sub: &Substrate, path: &[usize]) -> PropertyMap {
    let mut out = PropertyMap::new();
    if let Some((first, rest)) = path.split_first() {
        for (k, v) in sub.links[*first].props.iter() {
            if COMPOSED.contains(&k.as_str()) {
                continue;
            }
            if rest.iter().all(|&l| sub.links[l].props.child(k) == Some(v)) {
                out.insert(k, v.clone());
            }
        }
    }
    let pp = path_props(sub, path);
    if let Some(b) = pp.bandwidth {
        out.insert("bandwidth", Value::Int(b));
    }
    out.insert("latency", Value::Int(pp.latency));
    out.insert("loss", Value::Int(pp.loss));
    if let Some(s) = pp.stack {
        out.insert("stack", Value::Str(s));
    }
    out
}

/// Whether `path` satisfies the link's property constraints. Capacity is checked separately.
pub fn props_fit(sub: &Substrate, link_props: &PropertyMap, path: &[usize]) -> bool {
    match_props(link_props, &offered(sub, path))
}

fn constraint_demand(c: &Constraint) -> i64 {
    match c {
        Constraint::Eq(Value::Int(v)) | Constraint::Gt(v) | Constraint::Ge(v) => (*v).max(0),
        Constraint::Choice(cs) => cs.iter().map(constraint_demand).min().unwrap_or(0),
        _ => 0,
    }
}

/// Bandwidth an experiment link reserves on every segment of its path.
/// Lower bounds and exact values are asks; upper bounds are emulation
/// ceilings and ask for nothing.
pub fn demand(link_props: &PropertyMap) -> i64 {
    match link_props.child("bandwidth") {
        Some(Prop::Value(Value::Int(v))) => (*v).max(0),
        Some(Prop::Constraint(c)) => constraint_demand(c),
        _ => 0,
    }
}

/// Hop distance from every node to `target`, `usize::MAX` when unreachable.
pub fn distances_to(sub: &Substrate, target: usize) -> Vec<usize> {
    let mut dist = vec![usize::MAX; sub.nodes.len()];
    dist[target] = 0;
    let mut q = VecDeque::from([target]);
    while let Some(n) = q.pop_front() {
        for &(_, m) in sub.neighbors(n) {
            if dist[m] == usize::MAX {
                dist[m] = dist[n] + 1;
                q.push_back(m);
            }
        }
    }
    dist
}

/// Visits simple paths from `a` to `b` of at most `max_hops` links, shortest
/// first and in adjacency order within a length, skipping links for which
/// `usable` is false. `a == b` yields only the empty path.
pub fn for_each_path(
    sub: &Substrate,
    a: usize,
    b: usize,
    max_hops: usize,
    usable: impl Fn(usize) -> bool,
    mut visit: impl FnMut(&[usize]) -> ControlFlow<()>,
) {
    if a == b {
        let _ = visit(&[]);
        return;
    }
    let max_hops = max_hops.min(HOP_LIMIT);
    let dist = distances_to(sub, b);
    if dist[a] > max_hops {
        return;
    }
    let mut on_path = vec![false; sub.nodes.len()];
    let mut path = Vec::with_capacity(max_hops);
    for len in dist[a]..=max_hops {
        on_path[a] = true;
        let flow = walk(sub, a, b, len, &dist, &usable, &mut on_path, &mut path, &mut visit);
        on_path[a] = false;
        if flow.is_break() {
            return;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn walk(
    sub: &Substrate,
    at: usize,
    b: usize,
    left: usize,
    dist: &[usize],
    usable: &impl Fn(usize) -> bool,
    on_path: &mut [bool],
    path: &mut Vec<usize>,
    visit: &mut impl FnMut(&[usize]) -> ControlFlow<()>,
) -> ControlFlow<()> {
    if at == b {
        return if left == 0 { visit(path) } else { ControlFlow::Continue(()) };
    }
    if left == 0 {
        return ControlFlow::Continue(());
    }
    for &(link, next) in sub.neighbors(at) {
        if on_path[next] || dist[next] > left - 1 || !usable(link) {
            continue;
        }
        on_path[next] = true;
        path.push(link);
        let flow = walk(sub, next, b, left - 1, dist, usable, on_path, path, visit);
        path.pop();
        on_path[next] = false;
        flow?;
    }
    ControlFlow::Continue(())
}

/// Every simple path of at most `max_hops` links satisfying the link's
/// properties, each segment with at least `need` bandwidth left.
pub fn feasible_paths(
    sub: &Substrate,
    a: usize,
    b: usize,
    max_hops: usize,
    link_props: &PropertyMap,
    need: i64,
) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for_each_path(
        sub,
        a,
        b,
        max_hops,
        |l| sub.residual_bps(l).is_none_or(|r| r >= need),
        |p| {
            if props_fit(sub, link_props, p) {
                out.push(p.to_vec());
            }
            ControlFlow::Continue(())
        },
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_composition() {
        assert_eq!(compose_loss(&[]), 0);
        assert_eq!(compose_loss(&[80_000]), 80_000);
        // 1 - 0.9 * 0.9 = 0.19
        assert_eq!(compose_loss(&[100_000, 100_000]), 190_000);
        // 1 - 0.999999^2 = 1.999999e-6 -> 1.999999 ppm -> 2
        assert_eq!(compose_loss(&[1, 1]), 2);
        // 1 - 0.999999^3 = 2.999997e-6 -> 3
        assert_eq!(compose_loss(&[1, 1, 1]), 3);
        assert_eq!(compose_loss(&[1_000_000, 5]), 1_000_000);
        assert_eq!(compose_loss(&[0; 6]), 0);
    }

    #[test]
    fn loss_rounds_half_up() {
        // 500_000 and 1: 1 - 0.5 * 0.999999 = 0.5000005 -> 500000.5 ppm -> 500001
        assert_eq!(compose_loss(&[500_000, 1]), 500_001);
    }

    #[test]
    fn demand_reading() {
        let p = |c: Constraint| PropertyMap::new().with("bandwidth", c);
        assert_eq!(demand(&p(Constraint::Lt(100_000))), 0);
        assert_eq!(demand(&p(Constraint::Le(100_000))), 0);
        assert_eq!(demand(&p(Constraint::Gt(5))), 5);
        assert_eq!(demand(&p(Constraint::Ge(7))), 7);
        assert_eq!(demand(&p(Constraint::Eq(Value::Int(9)))), 9);
        assert_eq!(
            demand(&p(Constraint::choice(vec![Constraint::Ge(7), Constraint::Lt(3)]).unwrap())),
            0
        );
        assert_eq!(demand(&PropertyMap::new().with("bandwidth", Value::Int(11))), 11);
        assert_eq!(demand(&PropertyMap::new()), 0);
    }
}
