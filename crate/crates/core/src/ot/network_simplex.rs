//! Primal network simplex for uncapacitated transportation problems.
//!
//! The spanning tree is stored with parent pointers, depths and doubly linked child lists. An
//! artificial root with big-M arcs gives the initial feasible tree; the leaving arc is the last
//! blocking arc met when walking the pivot cycle from its apex, which keeps the tree strongly
//! feasible and rules out cycling. Arcs can be appended between solves, so the solver doubles
//! as the master problem of a column-generation loop.

use crate::error::{Error, Result};

const NONE: usize = usize::MAX;

pub struct NetworkSimplex {
    m: usize,
    root: usize,
    src: Vec<usize>,
    tgt: Vec<usize>,
    cost: Vec<f64>,
    flow: Vec<f64>,
    in_tree: Vec<bool>,
    parent: Vec<usize>,
    pred: Vec<usize>,
    up: Vec<bool>,
    depth: Vec<usize>,
    first_child: Vec<usize>,
    next_sib: Vec<usize>,
    prev_sib: Vec<usize>,
    pi: Vec<f64>,
    n_real: usize,
    art_cost: f64,
    next_arc: usize,
    pub pivots: usize,
}

impl NetworkSimplex {
    /// Supply nodes `0..m` with masses `supply`, demand nodes `m..m+n` with masses `demand`.
    /// `arcs` lists `(i, j, cost)` with `i < m`, `j < n`. `max_cost` bounds every cost that may
    /// ever be added.
    pub fn new(supply: &[f64], demand: &[f64], arcs: &[(usize, usize, f64)], max_cost: f64) -> Self {
        let m = supply.len();
        let n = demand.len();
        let nodes = m + n + 1;
        let root = m + n;
        let art_cost = (max_cost.max(1.0) + 1.0) * nodes as f64;
        let mut s = NetworkSimplex {
            m,
            root,
            src: Vec::new(),
            tgt: Vec::new(),
            cost: Vec::new(),
            flow: Vec::new(),
            in_tree: Vec::new(),
            parent: vec![NONE; nodes],
            pred: vec![NONE; nodes],
            up: vec![false; nodes],
            depth: vec![0; nodes],
            first_child: vec![NONE; nodes],
            next_sib: vec![NONE; nodes],
            prev_sib: vec![NONE; nodes],
            pi: vec![0.0; nodes],
            n_real: 0,
            art_cost,
            next_arc: 0,
            pivots: 0,
        };
        // artificial arcs first so that real arcs can be appended later
        for u in 0..m + n {
            let a = s.src.len();
            if u < m {
                s.src.push(u);
                s.tgt.push(root);
                s.flow.push(supply[u]);
                s.up[u] = true;
                s.pi[u] = -art_cost;
            } else {
                s.src.push(root);
                s.tgt.push(u);
                s.flow.push(demand[u - m]);
                s.up[u] = false;
                s.pi[u] = art_cost;
            }
            s.cost.push(art_cost);
            s.in_tree.push(true);
            s.pred[u] = a;
            s.depth[u] = 1;
            s.attach(u, root);
        }
        s.add_arcs(arcs);
        s
    }

    pub fn add_arcs(&mut self, arcs: &[(usize, usize, f64)]) {
        for &(i, j, c) in arcs {
            self.src.push(i);
            self.tgt.push(self.m + j);
            self.cost.push(c);
            self.flow.push(0.0);
            self.in_tree.push(false);
            self.n_real += 1;
        }
    }

    fn first_real(&self) -> usize {
        self.root
    }

    fn attach(&mut self, child: usize, parent: usize) {
        self.parent[child] = parent;
        let head = self.first_child[parent];
        self.next_sib[child] = head;
        self.prev_sib[child] = NONE;
        if head != NONE {
            self.prev_sib[head] = child;
        }
        self.first_child[parent] = child;
    }

    fn detach(&mut self, child: usize) {
        let p = self.parent[child];
        let (prev, next) = (self.prev_sib[child], self.next_sib[child]);
        if prev != NONE {
            self.next_sib[prev] = next;
        } else {
            self.first_child[p] = next;
        }
        if next != NONE {
            self.prev_sib[next] = prev;
        }
        self.prev_sib[child] = NONE;
        self.next_sib[child] = NONE;
        self.parent[child] = NONE;
    }

    fn reduced_cost(&self, a: usize) -> f64 {
        self.cost[a] + self.pi[self.src[a]] - self.pi[self.tgt[a]]
    }

    /// Block-search pricing over all arcs.
    fn find_entering(&mut self, tol: f64) -> Option<usize> {
        let total = self.src.len();
        let block = ((total as f64).sqrt() as usize).max(16);
        let mut best = NONE;
        let mut best_rc = -tol;
        let mut seen = 0;
        let mut a = self.next_arc % total;
        let mut in_block = 0;
        while seen < total {
            if !self.in_tree[a] {
                let rc = self.reduced_cost(a);
                if rc < best_rc {
                    best_rc = rc;
                    best = a;
                }
            }
            seen += 1;
            in_block += 1;
            a += 1;
            if a == total {
                a = 0;
            }
            if in_block >= block {
                if best != NONE {
                    self.next_arc = a;
                    return Some(best);
                }
                in_block = 0;
            }
        }
        self.next_arc = a;
        if best != NONE {
            Some(best)
        } else {
            None
        }
    }

    fn pivot(&mut self, e: usize) -> Result<()> {
        let (u, v) = (self.src[e], self.tgt[e]);
        let (mut a, mut b) = (u, v);
        while a != b {
            if self.depth[a] > self.depth[b] {
                a = self.parent[a];
            } else if self.depth[b] > self.depth[a] {
                b = self.parent[b];
            } else {
                a = self.parent[a];
                b = self.parent[b];
            }
        }
        let join = a;
        let mut u_path = Vec::new();
        let mut w = u;
        while w != join {
            u_path.push(w);
            w = self.parent[w];
        }
        let mut v_path = Vec::new();
        let mut w = v;
        while w != join {
            v_path.push(w);
            w = self.parent[w];
        }
        // cycle order from the apex: u-side top to bottom, entering arc, v-side bottom to top
        let mut delta = f64::INFINITY;
        let mut leave_node = NONE;
        let mut leave_on_u_side = false;
        for &w in u_path.iter().rev() {
            if self.up[w] {
                let f = self.flow[self.pred[w]];
                if f <= delta {
                    delta = f;
                    leave_node = w;
                    leave_on_u_side = true;
                }
            }
        }
        for &w in &v_path {
            if !self.up[w] {
                let f = self.flow[self.pred[w]];
                if f <= delta {
                    delta = f;
                    leave_node = w;
                    leave_on_u_side = false;
                }
            }
        }
        if leave_node == NONE {
            return Err(Error::Infeasible("unbounded pivot cycle".into()));
        }
        if delta > 0.0 {
            for &w in &u_path {
                let p = self.pred[w];
                if self.up[w] {
                    self.flow[p] = (self.flow[p] - delta).max(0.0);
                } else {
                    self.flow[p] += delta;
                }
            }
            for &w in &v_path {
                let p = self.pred[w];
                if self.up[w] {
                    self.flow[p] += delta;
                } else {
                    self.flow[p] = (self.flow[p] - delta).max(0.0);
                }
            }
            self.flow[e] += delta;
        }
        self.flow[self.pred[leave_node]] = 0.0;

        // the subtree below the leaving arc contains exactly one endpoint of the entering arc
        let (p_node, q_node) = if leave_on_u_side { (u, v) } else { (v, u) };
        let sigma = if p_node == u {
            self.pi[v] - self.cost[e] - self.pi[u]
        } else {
            self.cost[e] + self.pi[u] - self.pi[v]
        };
        let leaving_arc = self.pred[leave_node];
        self.in_tree[leaving_arc] = false;
        self.in_tree[e] = true;

        // reverse the path p_node → leave_node and hang it below q_node
        let path: Vec<usize> = {
            let mut p = vec![p_node];
            let mut w = p_node;
            while w != leave_node {
                w = self.parent[w];
                p.push(w);
            }
            p
        };
        let old_pred: Vec<usize> = path.iter().map(|&w| self.pred[w]).collect();
        let old_up: Vec<bool> = path.iter().map(|&w| self.up[w]).collect();
        for &w in path.iter().rev() {
            self.detach(w);
        }
        for k in (1..path.len()).rev() {
            let (child, par) = (path[k], path[k - 1]);
            self.pred[child] = old_pred[k - 1];
            self.up[child] = !old_up[k - 1];
            self.attach(child, par);
        }
        self.pred[p_node] = e;
        self.up[p_node] = self.src[e] == p_node;
        self.attach(p_node, q_node);

        // potentials and depths on the moved subtree
        let mut stack = vec![p_node];
        self.depth[p_node] = self.depth[q_node] + 1;
        while let Some(w) = stack.pop() {
            self.pi[w] += sigma;
            let mut c = self.first_child[w];
            while c != NONE {
                self.depth[c] = self.depth[w] + 1;
                stack.push(c);
                c = self.next_sib[c];
            }
        }
        self.pivots += 1;
        Ok(())
    }

    /// Recomputes potentials from the tree so that tree arcs have zero reduced cost exactly.
    fn refresh_potentials(&mut self) {
        self.pi[self.root] = 0.0;
        let mut stack = vec![self.root];
        while let Some(w) = stack.pop() {
            let mut c = self.first_child[w];
            while c != NONE {
                let a = self.pred[c];
                self.pi[c] = if self.up[c] {
                    self.pi[w] - self.cost[a]
                } else {
                    self.pi[w] + self.cost[a]
                };
                stack.push(c);
                c = self.next_sib[c];
            }
        }
    }

    pub fn solve(&mut self, tol: f64, max_pivots: usize) -> Result<()> {
        let start = self.pivots;
        loop {
            while let Some(e) = self.find_entering(tol) {
                self.pivot(e)?;
                if self.pivots - start > max_pivots {
                    return Err(Error::NonConvergence {
                        what: "network simplex".into(),
                        iterations: self.pivots - start,
                        residual: f64::NAN,
                    });
                }
            }
            self.refresh_potentials();
            if self.find_entering(tol).is_none() {
                return Ok(());
            }
        }
    }

    /// Dual potentials `(α, β)` with `α_i + β_j ≤ c_ij`, tight on basic arcs.
    pub fn potentials(&self) -> (Vec<f64>, Vec<f64>) {
        let alpha = (0..self.m).map(|i| -self.pi[i]).collect();
        let beta = (self.m..self.root).map(|j| self.pi[j]).collect();
        (alpha, beta)
    }

    /// Flow left on artificial arcs.
    pub fn artificial_flow(&self) -> f64 {
        self.flow[..self.first_real()].iter().sum()
    }

    /// Positive flows on real arcs as `(i, j, flow, cost)`.
    pub fn real_flows(&self) -> Vec<(usize, usize, f64, f64)> {
        (self.first_real()..self.src.len())
            .filter(|&a| self.flow[a] > 0.0)
            .map(|a| (self.src[a], self.tgt[a] - self.m, self.flow[a], self.cost[a]))
            .collect()
    }

    pub fn art_cost(&self) -> f64 {
        self.art_cost
    }

    pub fn real_arc_count(&self) -> usize {
        self.n_real
    }
}
