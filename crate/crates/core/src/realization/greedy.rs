//! Single-pass greedy embedding. Fast, deterministic, never backtracks.

use std::collections::BTreeMap;
use std::ops::ControlFlow;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use super::path::{demand, for_each_path, props_fit};
use super::substrate::Substrate;
use super::{Embedding, EngineOptions, Unrealizable};
use crate::xir::{match_props, XirNetwork};

pub fn realize_greedy(
    x: &XirNetwork,
    sub: &Substrate,
    opts: &EngineOptions,
) -> Result<Embedding, Unrealizable> {
    let mut rng = (opts.seed != 0).then(|| StdRng::seed_from_u64(opts.seed));
    let mut slots: Vec<u32> = (0..sub.nodes.len()).map(|i| sub.residual_slots(i)).collect();

    let mut order: Vec<_> = x.nodes.iter().collect();
    order.sort_by(|a, b| {
        b.props
            .leaf_count()
            .cmp(&a.props.leaf_count())
            .then_with(|| a.id.cmp(&b.id))
    });

    let mut nodes = BTreeMap::new();
    for n in order {
        let mut best: Vec<usize> = Vec::new();
        let mut best_slots = 0;
        for (i, r) in sub.nodes.iter().enumerate() {
            if r.gateway || slots[i] == 0 || slots[i] < best_slots {
                continue;
            }
            if !match_props(&n.props, &r.props) {
                continue;
            }
            if slots[i] > best_slots {
                best.clear();
                best_slots = slots[i];
            }
            best.push(i);
        }
        // Substrate nodes are in uuid order, so best[0] is the lowest uuid.
        let pick = match (&mut rng, best.len()) {
            (_, 0) => return Err(Unrealizable::NoCandidate { node: n.id.clone() }),
            (Some(rng), k) => best[rng.gen_range(0..k)],
            (None, _) => best[0],
        };
        slots[pick] -= 1;
        nodes.insert(n.id.clone(), pick);
    }

    let mut bps: Vec<Option<i64>> = (0..sub.links.len()).map(|l| sub.residual_bps(l)).collect();
    let mut x_links: Vec<_> = x.links.iter().collect();
    x_links.sort_by(|a, b| a.id.cmp(&b.id));
    let mut links = BTreeMap::new();
    for l in x_links {
        let need = demand(&l.props);
        let (a, b) = (nodes[&l.endpoints[0]], nodes[&l.endpoints[1]]);
        let mut found = None;
        for_each_path(
            sub,
            a,
            b,
            opts.max_hops,
            |s| bps[s].is_none_or(|r| r >= need),
            |p| {
                if props_fit(sub, &l.props, p) {
                    found = Some(p.to_vec());
                    ControlFlow::Break(())
                } else {
                    ControlFlow::Continue(())
                }
            },
        );
        let Some(path) = found else {
            return Err(Unrealizable::NoPath { link: l.id.clone() });
        };
        for &s in &path {
            if let Some(r) = &mut bps[s] {
                *r -= need;
            }
        }
        links.insert(l.id.clone(), path);
    }
    Ok(Embedding { nodes, links })
}
