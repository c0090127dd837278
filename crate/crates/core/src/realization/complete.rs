//! Exhaustive embedding search: backtracking over node placements with
//! forward checking, then over path choices under bandwidth.

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::path::{demand, feasible_paths};
use super::substrate::Substrate;
use super::{Embedding, EngineOptions, Unrealizable};
use crate::xir::{match_props, XirNetwork};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub max_nodes_expanded: u64,
    pub max_ms: u64,
}

impl Default for Budget {
    fn default() -> Self {
        Budget {
            max_nodes_expanded: 2_000_000,
            max_ms: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Realized(Embedding),
    /// The whole search space was explored without finding an embedding.
    ProvenUnrealizable(Unrealizable),
    BudgetExhausted { expanded: u64 },
}

struct Stop;

type PathList = Rc<Vec<Vec<usize>>>;

struct Search<'a> {
    x: &'a XirNetwork,
    sub: &'a Substrate,
    max_hops: usize,
    budget: Budget,
    started: Instant,
    expanded: u64,
    /// Experiment node neighbours: (link index, other node index).
    nbrs: Vec<Vec<(usize, usize)>>,
    demands: Vec<i64>,
    paths: HashMap<(usize, usize, usize), PathList>,
    assign: Vec<Option<usize>>,
    slots: Vec<u32>,
}

impl<'a> Search<'a> {
    fn tick(&mut self) -> Result<(), Stop> {
        self.expanded += 1;
        if self.expanded > self.budget.max_nodes_expanded {
            return Err(Stop);
        }
        if self.expanded.is_multiple_of(256)
            && self.started.elapsed() > Duration::from_millis(self.budget.max_ms)
        {
            return Err(Stop);
        }
        Ok(())
    }

    /// Paths for experiment link `l` oriented from its endpoint 0 at `ra` to endpoint 1 at `rb`.
    fn paths(&mut self, l: usize, ra: usize, rb: usize) -> PathList {
        if let Some(p) = self.paths.get(&(l, ra, rb)) {
            return p.clone();
        }
        let link = &self.x.links[l];
        let p = Rc::new(feasible_paths(self.sub, ra, rb, self.max_hops, &link.props, self.demands[l]));
        self.paths.insert((l, ra, rb), p.clone());
        p
    }

    /// Paths for link `l` given node `u` at `ru` and node `v` at `rv`.
    fn link_paths(&mut self, l: usize, u: usize, ru: usize, rv: usize) -> PathList {
        if self.x.links[l].endpoints[0] == self.x.nodes[u].id {
            self.paths(l, ru, rv)
        } else {
            self.paths(l, rv, ru)
        }
    }

    fn nodes(&mut self, domains: &[Vec<usize>]) -> Result<Option<Embedding>, Stop> {
        let var = (0..self.x.nodes.len())
            .filter(|&i| self.assign[i].is_none())
            .min_by_key(|&i| domains[i].len());
        let Some(var) = var else {
            return self.links();
        };
        for &r in &domains[var] {
            if self.slots[r] == 0 {
                continue;
            }
            self.tick()?;
            self.assign[var] = Some(r);
            self.slots[r] -= 1;
            if let Some(next) = self.forward(var, r, domains) {
                if let Some(e) = self.nodes(&next)? {
                    return Ok(Some(e));
                }
            }
            self.slots[r] += 1;
            self.assign[var] = None;
        }
        Ok(None)
    }

    /// Domains after placing `var` on `r`, or `None` if some node is left without options.
    fn forward(&mut self, var: usize, r: usize, domains: &[Vec<usize>]) -> Option<Vec<Vec<usize>>> {
        for (l, w) in self.nbrs[var].clone() {
            if let Some(rw) = self.assign[w] {
                if self.link_paths(l, var, r, rw).is_empty() {
                    return None;
                }
            }
        }
        let mut next = domains.to_vec();
        #[allow(clippy::needless_range_loop)] // w indexes assign, next and nbrs alike
        for w in 0..self.x.nodes.len() {
            if self.assign[w].is_some() {
                continue;
            }
            let links: Vec<usize> = self.nbrs[var]
                .iter()
                .filter(|&&(_, o)| o == w)
                .map(|&(l, _)| l)
                .collect();
            let mut kept = Vec::with_capacity(next[w].len());
            for &rw in &next[w] {
                if self.slots[rw] == 0 {
                    continue;
                }
                if links.iter().all(|&l| !self.link_paths(l, var, r, rw).is_empty()) {
                    kept.push(rw);
                }
            }
            if kept.is_empty() {
                return None;
            }
            next[w] = kept;
        }
        Some(next)
    }

    fn links(&mut self) -> Result<Option<Embedding>, Stop> {
        let mut options: Vec<(usize, PathList)> = Vec::with_capacity(self.x.links.len());
        for (l, link) in self.x.links.iter().enumerate() {
            let a = self.index_of(&link.endpoints[0]);
            let b = self.index_of(&link.endpoints[1]);
            let (ra, rb) = (self.assign[a].unwrap(), self.assign[b].unwrap());
            options.push((l, self.paths(l, ra, rb)));
        }
        options.sort_by_key(|(l, p)| (p.len(), *l));
        let mut bps: Vec<Option<i64>> = (0..self.sub.links.len()).map(|l| self.sub.residual_bps(l)).collect();
        let mut chosen = vec![0usize; options.len()];
        if !self.choose(&options, 0, &mut bps, &mut chosen)? {
            return Ok(None);
        }
        let nodes = self
            .x
            .nodes
            .iter()
            .zip(&self.assign)
            .map(|(n, r)| (n.id.clone(), r.unwrap()))
            .collect();
        let links = options
            .iter()
            .zip(&chosen)
            .map(|((l, p), &c)| (self.x.links[*l].id.clone(), p[c].clone()))
            .collect::<BTreeMap<_, _>>();
        Ok(Some(Embedding { nodes, links }))
    }

    fn choose(
        &mut self,
        options: &[(usize, PathList)],
        k: usize,
        bps: &mut [Option<i64>],
        chosen: &mut [usize],
    ) -> Result<bool, Stop> {
        let Some((l, paths)) = options.get(k) else {
            return Ok(true);
        };
        let need = self.demands[*l];
        for (i, p) in paths.iter().enumerate() {
            if !p.iter().all(|&s| bps[s].is_none_or(|r| r >= need)) {
                continue;
            }
            self.tick()?;
            for &s in p {
                if let Some(r) = &mut bps[s] {
                    *r -= need;
                }
            }
            chosen[k] = i;
            if self.choose(options, k + 1, bps, chosen)? {
                return Ok(true);
            }
            for &s in p {
                if let Some(r) = &mut bps[s] {
                    *r += need;
                }
            }
        }
        Ok(false)
    }

    fn index_of(&self, id: &str) -> usize {
        self.x.nodes.iter().position(|n| n.id == id).unwrap()
    }
}

pub fn realize_complete(
    x: &XirNetwork,
    sub: &Substrate,
    opts: &EngineOptions,
    budget: Budget,
) -> Outcome {
    let mut domains = Vec::with_capacity(x.nodes.len());
    for n in &x.nodes {
        let d: Vec<usize> = (0..sub.nodes.len())
            .filter(|&r| sub.placeable(r) && match_props(&n.props, &sub.nodes[r].props))
            .collect();
        if d.is_empty() {
            return Outcome::ProvenUnrealizable(Unrealizable::NoCandidate { node: n.id.clone() });
        }
        domains.push(d);
    }
    let index: HashMap<&str, usize> = x.nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect();
    let mut nbrs = vec![Vec::new(); x.nodes.len()];
    for (l, link) in x.links.iter().enumerate() {
        let (a, b) = (index[link.endpoints[0].as_str()], index[link.endpoints[1].as_str()]);
        nbrs[a].push((l, b));
        nbrs[b].push((l, a));
    }
    let mut s = Search {
        x,
        sub,
        max_hops: opts.max_hops,
        budget,
        started: Instant::now(),
        expanded: 0,
        nbrs,
        demands: x.links.iter().map(|l| demand(&l.props)).collect(),
        paths: HashMap::new(),
        assign: vec![None; x.nodes.len()],
        slots: (0..sub.nodes.len()).map(|r| sub.residual_slots(r)).collect(),
    };
    match s.nodes(&domains) {
        Ok(Some(e)) => Outcome::Realized(e),
        Ok(None) => Outcome::ProvenUnrealizable(Unrealizable::NoEmbedding),
        Err(Stop) => Outcome::BudgetExhausted { expanded: s.expanded },
    }
}
