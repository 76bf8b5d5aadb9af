//! Heterogeneous infrastructure graph and message-passing layers.
//!
//! Messages flow along edge direction: a node aggregates from the sources of
//! its incoming edges. `near` edges are inserted in both directions.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::environment::state::{ContextState, EV_FEATURES, STATION_FEATURES};
use crate::environment::World;
use crate::error::{config_err, shape_err, Error, Result};
use crate::numerics::{relu_backward_in_place, relu_in_place, AffineLayer, Matrix, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeType {
    Ev,
    Charger,
    Transformer,
    Operator,
}

impl NodeType {
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    PluggedInto,
    Feeds,
    OperatedBy,
    Near,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::PluggedInto, Relation::Feeds, Relation::OperatedBy, Relation::Near];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Relation::PluggedInto => "plugged_into",
            Relation::Feeds => "feeds",
            Relation::OperatedBy => "operated_by",
            Relation::Near => "near",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub kind: NodeType,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub relation: Relation,
    pub src: usize,
    pub dst: usize,
}

/// Typed nodes and typed directed edges; node ids are positions in `nodes`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeteroGraph {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    /// `incoming[relation][node]` lists source ids.
    incoming: Vec<Vec<Vec<usize>>>,
}

impl HeteroGraph {
    /// Fails if an endpoint is missing or a `(relation, src, dst)` triple repeats.
    pub fn new(nodes: Vec<Node>, edges: Vec<Edge>) -> Result<Self> {
        let n = nodes.len();
        let mut seen = HashSet::with_capacity(edges.len());
        let mut incoming = vec![vec![Vec::new(); n]; Relation::ALL.len()];
        for e in &edges {
            if e.src >= n || e.dst >= n {
                return Err(Error::Invariant(format!(
                    "edge {} {}->{} references a node outside 0..{n}",
                    e.relation.name(),
                    e.src,
                    e.dst
                )));
            }
            if !seen.insert(*e) {
                return Err(Error::Invariant(format!(
                    "duplicate edge {} {}->{}",
                    e.relation.name(),
                    e.src,
                    e.dst
                )));
            }
            incoming[e.relation.index()][e.dst].push(e.src);
        }
        Ok(Self { nodes, edges, incoming })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn relations(&self) -> Vec<Relation> {
        Relation::ALL
            .into_iter()
            .filter(|r| self.incoming[r.index()].iter().any(|s| !s.is_empty()))
            .collect()
    }

    /// Sources of `node`'s incoming edges of one relation.
    pub fn in_neighbors(&self, relation: Relation, node: usize) -> &[usize] {
        &self.incoming[relation.index()][node]
    }

    /// Node features stacked as rows.
    pub fn feature_matrix(&self) -> Result<Matrix> {
        let rows: Vec<Vec<f64>> = self.nodes.iter().map(|n| n.features.clone()).collect();
        if rows.is_empty() {
            return Ok(Matrix::zeros(0, NODE_FEATURES));
        }
        Matrix::from_rows(&rows)
    }

    /// One `relation,src,dst` line per edge.
    pub fn to_edge_list(&self) -> String {
        let mut out = String::new();
        for e in &self.edges {
            let _ = writeln!(out, "{},{},{}", e.relation.name(), e.src, e.dst);
        }
        out
    }

    /// Replaces the edges with those parsed from an edge-list dump.
    pub fn with_edge_list(nodes: Vec<Node>, text: &str) -> Result<Self> {
        Self::new(nodes, parse_edge_list(text)?)
    }
}

/// Parses `relation,src,dst` lines; blank lines and `#` comments are skipped.
pub fn parse_edge_list(text: &str) -> Result<Vec<Edge>> {
    let mut edges = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |why: &str| Error::Format(format!("edge list line {}: {why}: {line:?}", i + 1));
        let mut parts = line.split(',').map(str::trim);
        let (Some(rel), Some(src), Some(dst), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(bad("expected relation,src,dst"));
        };
        let relation = Relation::parse(rel).ok_or_else(|| bad("unknown relation"))?;
        let src = src.parse().map_err(|_| bad("bad source id"))?;
        let dst = dst.parse().map_err(|_| bad("bad target id"))?;
        edges.push(Edge { relation, src, dst });
    }
    Ok(edges)
}

/// Width of every node feature vector: a node-type one-hot plus four numeric slots.
pub const NODE_FEATURES: usize = 8;

/// Station and transformer wiring plus the current plug assignments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub area_km: f64,
    pub station_xy: Vec<[f64; 2]>,
    pub station_transformer: Vec<usize>,
    pub n_transformers: usize,
    /// Plugged station per vehicle.
    pub plugged: Vec<Option<usize>>,
    pub transformer_loading: Vec<f64>,
    pub transformer_voltage: Vec<f64>,
    /// `near` edge radius, km.
    pub radius_km: f64,
}

pub const DEFAULT_NEAR_RADIUS_KM: f64 = 3.0;

impl Topology {
    pub fn from_world(world: &World) -> Self {
        let grid = world.grid();
        Self {
            area_km: world.config().area_km,
            station_xy: world.stations().iter().map(|s| s.location).collect(),
            station_transformer: world.stations().iter().map(|s| s.transformer_id).collect(),
            n_transformers: world.transformer_count(),
            plugged: world.evs().iter().map(|e| e.plugged).collect(),
            transformer_loading: (0..world.transformer_count()).map(|k| grid.loading(k)).collect(),
            transformer_voltage: grid.voltage_pu.clone(),
            radius_km: DEFAULT_NEAR_RADIUS_KM,
        }
    }
}

fn one_hot(kind: NodeType, numeric: [f64; 4]) -> Vec<f64> {
    let mut f = vec![0.0; NODE_FEATURES];
    f[kind.index()] = 1.0;
    f[4..].copy_from_slice(&numeric);
    f
}

/// Nodes are ordered vehicles, chargers, transformers, then one operator.
pub fn build_graph(state: &ContextState, topo: &Topology) -> Result<HeteroGraph> {
    let n_ev = state.n_base() / EV_FEATURES;
    let n_st = state.n_spatial() / STATION_FEATURES;
    if n_ev * EV_FEATURES != state.n_base() || n_st * STATION_FEATURES != state.n_spatial() {
        return Err(shape_err("build_graph", "whole entity blocks", state.n_base() + state.n_spatial()));
    }
    if topo.station_xy.len() != n_st || topo.station_transformer.len() != n_st || topo.plugged.len() != n_ev {
        return Err(shape_err(
            "build_graph topology",
            format!("{n_ev} vehicles and {n_st} stations"),
            format!("{} vehicles and {} stations", topo.plugged.len(), topo.station_xy.len()),
        ));
    }
    let n_tx = topo.n_transformers;
    let charger = |s: usize| n_ev + s;
    let transformer = |k: usize| n_ev + n_st + k;
    let operator = n_ev + n_st + n_tx;

    let mut nodes = Vec::with_capacity(operator + 1);
    for i in 0..n_ev {
        let b = &state.base[i * EV_FEATURES..(i + 1) * EV_FEATURES];
        nodes.push(one_hot(NodeType::Ev, [b[0], b[1], b[2], b[7]]));
    }
    for s in 0..n_st {
        let f = &state.spatial[s * STATION_FEATURES..(s + 1) * STATION_FEATURES];
        nodes.push(one_hot(NodeType::Charger, [f[0], f[1], f[2], f[3]]));
    }
    for k in 0..n_tx {
        let loading = topo.transformer_loading.get(k).copied().unwrap_or(0.0);
        let voltage = topo.transformer_voltage.get(k).copied().unwrap_or(1.0);
        nodes.push(one_hot(
            NodeType::Transformer,
            [(loading / 2.0).clamp(0.0, 1.0), ((voltage - 0.8) / 0.3).clamp(0.0, 1.0), state.grid[2], state.grid[3]],
        ));
    }
    nodes.push(one_hot(
        NodeType::Operator,
        [state.temporal[0], state.temporal[1], state.temporal[3], state.weather[6]],
    ));
    let nodes: Vec<Node> = nodes
        .into_iter()
        .enumerate()
        .map(|(i, features)| Node {
            kind: if i < n_ev {
                NodeType::Ev
            } else if i < n_ev + n_st {
                NodeType::Charger
            } else if i < operator {
                NodeType::Transformer
            } else {
                NodeType::Operator
            },
            features,
        })
        .collect();

    let mut edges = Vec::new();
    for (i, p) in topo.plugged.iter().enumerate() {
        if let Some(s) = p {
            edges.push(Edge { relation: Relation::PluggedInto, src: i, dst: charger(*s) });
        }
    }
    for (s, &k) in topo.station_transformer.iter().enumerate() {
        edges.push(Edge { relation: Relation::Feeds, src: charger(s), dst: transformer(k) });
        edges.push(Edge { relation: Relation::OperatedBy, src: charger(s), dst: operator });
    }
    for i in 0..n_ev {
        let parked = state.base[i * EV_FEATURES + 7] > 0.5;
        if !parked {
            continue;
        }
        let xy = [
            state.base[i * EV_FEATURES + 3] * topo.area_km,
            state.base[i * EV_FEATURES + 4] * topo.area_km,
        ];
        for (s, sxy) in topo.station_xy.iter().enumerate() {
            let d = ((xy[0] - sxy[0]).powi(2) + (xy[1] - sxy[1]).powi(2)).sqrt();
            if d <= topo.radius_km && topo.radius_km > 0.0 {
                edges.push(Edge { relation: Relation::Near, src: i, dst: charger(s) });
                edges.push(Edge { relation: Relation::Near, src: charger(s), dst: i });
            }
        }
    }
    HeteroGraph::new(nodes, edges)
}

fn check_node(graph: &HeteroGraph, node: usize) -> Result<()> {
    if node < graph.node_count() {
        Ok(())
    } else {
        Err(Error::Argument(format!("node {node} not in graph of {} nodes", graph.node_count())))
    }
}

fn check_rows(graph: &HeteroGraph, h: &Matrix) -> Result<()> {
    if h.rows() == graph.node_count() {
        Ok(())
    } else {
        Err(shape_err("node embeddings", graph.node_count(), h.rows()))
    }
}

/// Mean of incoming neighbour rows, over one relation or all of them merged.
/// Nodes without neighbours get a zero row.
fn mean_incoming(graph: &HeteroGraph, h: &Matrix, relation: Option<Relation>) -> Matrix {
    let mut out = Matrix::zeros(graph.node_count(), h.cols());
    let rels: Vec<Relation> = relation.map_or_else(|| Relation::ALL.to_vec(), |r| vec![r]);
    for v in 0..graph.node_count() {
        let count: usize = rels.iter().map(|r| graph.in_neighbors(*r, v).len()).sum();
        if count == 0 {
            continue;
        }
        let row = out.row_mut(v);
        for r in &rels {
            for &u in graph.in_neighbors(*r, v) {
                for (o, x) in row.iter_mut().zip(h.row(u)) {
                    *o += x;
                }
            }
        }
        let inv = 1.0 / count as f64;
        row.iter_mut().for_each(|x| *x *= inv);
    }
    out
}

/// Adjoint of [`mean_incoming`]: scatters `d_mean` rows back to the sources.
fn mean_incoming_backward(graph: &HeteroGraph, d_mean: &Matrix, relation: Option<Relation>, d_h: &mut Matrix) {
    let rels: Vec<Relation> = relation.map_or_else(|| Relation::ALL.to_vec(), |r| vec![r]);
    for v in 0..graph.node_count() {
        let count: usize = rels.iter().map(|r| graph.in_neighbors(*r, v).len()).sum();
        if count == 0 {
            continue;
        }
        let inv = 1.0 / count as f64;
        for r in &rels {
            for &u in graph.in_neighbors(*r, v) {
                let g: Vec<f64> = d_mean.row(v).iter().map(|x| x * inv).collect();
                for (o, x) in d_h.row_mut(u).iter_mut().zip(&g) {
                    *o += x;
                }
            }
        }
    }
}

/// `(1/|N(v)|) Σ_{u∈N(v)} W_edge h_u` over all relations merged; zero if `v` is isolated.
pub fn aggregate_neighbors(graph: &HeteroGraph, node: usize, embeddings: &Matrix, w_edge: &Matrix) -> Result<Vec<f64>> {
    check_node(graph, node)?;
    check_rows(graph, embeddings)?;
    if w_edge.cols() != embeddings.cols() {
        return Err(shape_err("aggregate_neighbors W_edge", embeddings.cols(), w_edge.cols()));
    }
    let count: usize = Relation::ALL.iter().map(|r| graph.in_neighbors(*r, node).len()).sum();
    if count == 0 {
        return Ok(vec![0.0; w_edge.rows()]);
    }
    let mut mean = vec![0.0; embeddings.cols()];
    for r in Relation::ALL {
        for &u in graph.in_neighbors(r, node) {
            for (m, x) in mean.iter_mut().zip(embeddings.row(u)) {
                *m += x;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    w_edge.matvec(&mean)
}

/// Homogeneous message-passing layer `relu(W · AGGREGATE(h) + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GnnLayer {
    /// `W^(l)` and `b^(l)`.
    pub update: AffineLayer,
    pub w_edge: Matrix,
}

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GnnCache {
    input: Matrix,
    mean: Matrix,
    message: Matrix,
    pre: Matrix,
}

impl GnnLayer {
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            update: AffineLayer::init(d_in, d_out, rng),
            w_edge: Matrix::he_uniform(d_in, d_in, rng),
        }
    }

    pub fn forward(&self, graph: &HeteroGraph, h: &Matrix) -> Result<(Matrix, GnnCache)> {
        check_rows(graph, h)?;
        if h.cols() != self.w_edge.cols() || self.w_edge.rows() != self.update.inputs() {
            return Err(shape_err("gnn_layer width", self.w_edge.cols(), h.cols()));
        }
        let mean = mean_incoming(graph, h, None);
        let message = mean.matmul_transposed(&self.w_edge)?;
        let mut pre = message.matmul_transposed(&self.update.weight)?;
        for v in 0..pre.rows() {
            for (p, b) in pre.row_mut(v).iter_mut().zip(&self.update.bias) {
                *p += b;
            }
        }
        let mut out = pre.clone();
        relu_in_place(out.data_mut());
        Ok((out, GnnCache { input: h.clone(), mean, message, pre }))
    }

    /// Accumulates parameter gradients into `grads` and returns the input gradient.
    pub fn backward(&self, graph: &HeteroGraph, cache: &GnnCache, d_out: &Matrix, grads: &mut GnnLayer) -> Result<Matrix> {
        if d_out.rows() != cache.pre.rows() || d_out.cols() != cache.pre.cols() {
            return Err(shape_err("gnn_layer backward", cache.pre.cols(), d_out.cols()));
        }
        let mut d_pre = d_out.clone();
        relu_backward_in_place(cache.pre.data(), d_pre.data_mut());
        grads.update.weight.add_assign(&d_pre.transposed_matmul(&cache.message)?)?;
        for v in 0..d_pre.rows() {
            for (g, d) in grads.update.bias.iter_mut().zip(d_pre.row(v)) {
                *g += d;
            }
        }
        let d_message = d_pre.matmul(&self.update.weight)?;
        grads.w_edge.add_assign(&d_message.transposed_matmul(&cache.mean)?)?;
        let d_mean = d_message.matmul(&self.w_edge)?;
        let mut d_h = Matrix::zeros(cache.input.rows(), cache.input.cols());
        mean_incoming_backward(graph, &d_mean, None, &mut d_h);
        Ok(d_h)
    }
}

impl Parameters for GnnLayer {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.update.visit_named("update", f);
        f("w_edge", self.w_edge.data());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.update.visit_named_mut("update", f);
        f("w_edge", self.w_edge.data_mut());
    }
}

/// Relation-typed layer `relu(Σ_r Σ_{u∈N_r(v)} W_r h_u / |N_r(v)| + W_self h_v)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeteroLayer {
    /// Relations with a weight, parallel to `w_rel`.
    pub relations: Vec<Relation>,
    pub w_rel: Vec<Matrix>,
    pub w_self: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeteroCache {
    input: Matrix,
    means: Vec<Matrix>,
    pre: Matrix,
}

impl HeteroLayer {
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            relations: Relation::ALL.to_vec(),
            w_rel: Relation::ALL.iter().map(|_| Matrix::he_uniform(d_out, d_in, rng)).collect(),
            w_self: Matrix::he_uniform(d_out, d_in, rng),
        }
    }

    fn weight_for(&self, r: Relation) -> Option<&Matrix> {
        self.relations.iter().position(|x| *x == r).map(|i| &self.w_rel[i])
    }

    pub fn forward(&self, graph: &HeteroGraph, h: &Matrix) -> Result<(Matrix, HeteroCache)> {
        check_rows(graph, h)?;
        if self.w_self.cols() != h.cols() {
            return Err(shape_err("hetero_gnn_layer width", self.w_self.cols(), h.cols()));
        }
        for r in graph.relations() {
            if self.weight_for(r).is_none() {
                return Err(config_err("hetero_gnn_layer", format!("no weight for relation {}", r.name())));
            }
        }
        let mut pre = h.matmul_transposed(&self.w_self)?;
        let mut means = Vec::with_capacity(self.relations.len());
        for (r, w) in self.relations.iter().zip(&self.w_rel) {
            let mean = mean_incoming(graph, h, Some(*r));
            pre.add_assign(&mean.matmul_transposed(w)?)?;
            means.push(mean);
        }
        let mut out = pre.clone();
        relu_in_place(out.data_mut());
        Ok((out, HeteroCache { input: h.clone(), means, pre }))
    }

    pub fn backward(&self, graph: &HeteroGraph, cache: &HeteroCache, d_out: &Matrix, grads: &mut HeteroLayer) -> Result<Matrix> {
        if d_out.rows() != cache.pre.rows() || d_out.cols() != cache.pre.cols() {
            return Err(shape_err("hetero_gnn_layer backward", cache.pre.cols(), d_out.cols()));
        }
        let mut d_pre = d_out.clone();
        relu_backward_in_place(cache.pre.data(), d_pre.data_mut());
        grads.w_self.add_assign(&d_pre.transposed_matmul(&cache.input)?)?;
        let mut d_h = d_pre.matmul(&self.w_self)?;
        for (k, r) in self.relations.iter().enumerate() {
            grads.w_rel[k].add_assign(&d_pre.transposed_matmul(&cache.means[k])?)?;
            let d_mean = d_pre.matmul(&self.w_rel[k])?;
            mean_incoming_backward(graph, &d_mean, Some(*r), &mut d_h);
        }
        Ok(d_h)
    }
}

impl Parameters for HeteroLayer {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        for (r, w) in self.relations.iter().zip(&self.w_rel) {
            f(&format!("w_rel.{}", r.name()), w.data());
        }
        f("w_self", self.w_self.data());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (r, w) in self.relations.iter().zip(self.w_rel.iter_mut()) {
            f(&format!("w_rel.{}", r.name()), w.data_mut());
        }
        f("w_self", self.w_self.data_mut());
    }
}

pub fn gnn_layer(graph: &HeteroGraph, embeddings: &Matrix, layer: &GnnLayer) -> Result<Matrix> {
    Ok(layer.forward(graph, embeddings)?.0)
}

pub fn hetero_gnn_layer(graph: &HeteroGraph, embeddings: &Matrix, layer: &HeteroLayer) -> Result<Matrix> {
    Ok(layer.forward(graph, embeddings)?.0)
}

/// Node-feature lift, stacked heterogeneous layers, then mean pooling over nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GnnParams {
    pub input: AffineLayer,
    pub layers: Vec<HeteroLayer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GnnEncoderCache {
    features: Matrix,
    lifted_pre: Matrix,
    layers: Vec<HeteroCache>,
    n_nodes: usize,
}

impl GnnEncoderCache {
    /// Smallest non-zero `|pre-activation|` over every ReLU in the pass.
    ///
    /// Exact zeros are skipped: they arise only from all-zero inputs, which stay
    /// zero under small parameter perturbations.
    pub fn relu_margin(&self) -> f64 {
        std::iter::once(&self.lifted_pre)
            .chain(self.layers.iter().map(|c| &c.pre))
            .flat_map(|m| m.data().iter())
            .filter(|v| **v != 0.0)
            .fold(f64::INFINITY, |acc, v| acc.min(v.abs()))
    }
}

impl GnnParams {
    pub fn init<R: Rng + ?Sized>(d_h: usize, n_layers: usize, rng: &mut R) -> Self {
        Self {
            input: AffineLayer::init(NODE_FEATURES, d_h, rng),
            layers: (0..n_layers).map(|_| HeteroLayer::init(d_h, d_h, rng)).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.input.outputs()
    }

    /// Mean-pooled final embedding, width `d_h`.
    pub fn forward(&self, graph: &HeteroGraph) -> Result<(Vec<f64>, GnnEncoderCache)> {
        let features = graph.feature_matrix()?;
        let mut lifted_pre = features.matmul_transposed(&self.input.weight)?;
        for v in 0..lifted_pre.rows() {
            for (p, b) in lifted_pre.row_mut(v).iter_mut().zip(&self.input.bias) {
                *p += b;
            }
        }
        let mut h = lifted_pre.clone();
        relu_in_place(h.data_mut());
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, cache) = layer.forward(graph, &h)?;
            caches.push(cache);
            h = next;
        }
        let n = h.rows().max(1) as f64;
        let mut pooled = vec![0.0; h.cols()];
        for v in 0..h.rows() {
            for (p, x) in pooled.iter_mut().zip(h.row(v)) {
                *p += x / n;
            }
        }
        Ok((
            pooled,
            GnnEncoderCache { n_nodes: h.rows(), features, lifted_pre, layers: caches },
        ))
    }

    pub fn embed(&self, graph: &HeteroGraph) -> Result<Vec<f64>> {
        Ok(self.forward(graph)?.0)
    }

    pub fn backward(&self, graph: &HeteroGraph, cache: &GnnEncoderCache, d_pooled: &[f64], grads: &mut GnnParams) -> Result<()> {
        if d_pooled.len() != self.width() {
            return Err(shape_err("gnn pooled gradient", self.width(), d_pooled.len()));
        }
        let n = cache.n_nodes.max(1) as f64;
        let mut d_h = Matrix::zeros(cache.n_nodes, self.width());
        for v in 0..cache.n_nodes {
            for (d, g) in d_h.row_mut(v).iter_mut().zip(d_pooled) {
                *d = g / n;
            }
        }
        for (k, layer) in self.layers.iter().enumerate().rev() {
            d_h = layer.backward(graph, &cache.layers[k], &d_h, &mut grads.layers[k])?;
        }
        relu_backward_in_place(cache.lifted_pre.data(), d_h.data_mut());
        grads.input.weight.add_assign(&d_h.transposed_matmul(&cache.features)?)?;
        for v in 0..d_h.rows() {
            for (g, d) in grads.input.bias.iter_mut().zip(d_h.row(v)) {
                *g += d;
            }
        }
        Ok(())
    }
}

impl Parameters for GnnParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.input.visit_named("gnn.input", f);
        for (k, layer) in self.layers.iter().enumerate() {
            layer.visit(&mut |name, s| f(&format!("gnn.layer{k}.{name}"), s));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.input.visit_named_mut("gnn.input", f);
        for (k, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&mut |name, s| f(&format!("gnn.layer{k}.{name}"), s));
        }
    }
}
