//! Acyclic networks of completely positive maps and the states they emit.
//!
//! A network is a directed graph whose edges are correlator wires of fixed
//! dimension and whose vertices hold Kraus lists indexed by an emitted
//! physical level: vertex `v` maps the tensor product of its in-wires to
//! (physical level) x (tensor product of its out-wires). Wires with no
//! producing vertex carry the boundary input state, wires with no consumer
//! are closed by an explicitly supplied output functional, applied without
//! conjugation. Evaluating the network in any topological order yields an
//! unnormalized state over all emitted physical levels; a topological
//! linearization of the vertices turns the same data into a matrix product
//! state whose bond at every cut is the product of the crossing wire
//! dimensions.

use crate::caps::DeskCaps;
use crate::error::{CoreError, Result};
use crate::matrix::{c64, norm_sq, CMat, CVec, C64};
use crate::mps::{Boundary, Mps};

/// One vertex: a CP map from its in-wires to physical x out-wires.
///
/// `kraus[i]` is the block acting when physical level `i` is emitted, of
/// shape (product of out-wire dims) x (product of in-wire dims), both in
/// declared wire order. Either wire list may be empty, giving dimension 1.
#[derive(Debug, Clone)]
pub struct NetVertex {
    pub in_wires: Vec<usize>,
    pub out_wires: Vec<usize>,
    pub kraus: Vec<CMat>,
}

impl NetVertex {
    pub fn phys_dim(&self) -> usize {
        self.kraus.len()
    }

    /// Convex mixture of CP maps with identical wiring: Kraus lists are
    /// concatenated with sqrt-weight scaling, so the emitted level also
    /// records which component acted.
    pub fn mixture(parts: &[(f64, NetVertex)]) -> Result<NetVertex> {
        let Some((_, first)) = parts.first() else {
            return Err(CoreError::InvalidInput {
                context: "NetVertex::mixture",
                detail: "empty mixture".into(),
            });
        };
        let total: f64 = parts.iter().map(|(p, _)| *p).sum();
        if parts.iter().any(|(p, _)| *p < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(CoreError::InvalidInput {
                context: "NetVertex::mixture",
                detail: format!("weights must be nonnegative and sum to 1, got total {total}"),
            });
        }
        let mut kraus = Vec::new();
        for (p, part) in parts {
            if part.in_wires != first.in_wires || part.out_wires != first.out_wires {
                return Err(CoreError::InvalidInput {
                    context: "NetVertex::mixture",
                    detail: "mixture components disagree on wiring".into(),
                });
            }
            let w = c64(p.sqrt(), 0.0);
            kraus.extend(part.kraus.iter().map(|k| k * w));
        }
        Ok(NetVertex { in_wires: first.in_wires.clone(), out_wires: first.out_wires.clone(), kraus })
    }
}

/// A channel network with explicit boundary data.
#[derive(Debug, Clone)]
pub struct ChannelNetwork {
    /// Dimension of each wire, indexed by wire id.
    pub wire_dims: Vec<usize>,
    pub vertices: Vec<NetVertex>,
    /// Wires with no producing vertex, in the order `input_state` uses.
    pub input_wires: Vec<usize>,
    pub input_state: CVec,
    /// Wires with no consuming vertex, in the order the functional uses.
    pub output_wires: Vec<usize>,
    pub output_functional: CVec,
}

fn dims_product(dims: &[usize], wires: &[usize]) -> usize {
    wires.iter().map(|&w| dims[w]).product()
}

impl ChannelNetwork {
    /// Checks that every wire has exactly one producer and one consumer,
    /// that Kraus blocks fit their wire dimensions, and that the boundary
    /// data covers exactly the source and sink wires.
    pub fn validate(&self) -> Result<()> {
        let n_wires = self.wire_dims.len();
        if let Some(w) = self.wire_dims.iter().position(|&d| d == 0) {
            return Err(CoreError::InvalidInput {
                context: "ChannelNetwork::validate",
                detail: format!("wire {w} has dimension 0"),
            });
        }
        let mut producers = vec![0usize; n_wires];
        let mut consumers = vec![0usize; n_wires];
        let count = |list: &[usize], tally: &mut [usize], role: &str| -> Result<()> {
            for &w in list {
                if w >= n_wires {
                    return Err(CoreError::InvalidInput {
                        context: "ChannelNetwork::validate",
                        detail: format!("{role} references missing wire {w}"),
                    });
                }
                tally[w] += 1;
            }
            Ok(())
        };
        count(&self.input_wires, &mut producers, "boundary input")?;
        count(&self.output_wires, &mut consumers, "boundary output")?;
        for (v, vertex) in self.vertices.iter().enumerate() {
            count(&vertex.out_wires, &mut producers, "vertex")?;
            count(&vertex.in_wires, &mut consumers, "vertex")?;
            if vertex.kraus.is_empty() {
                return Err(CoreError::InvalidInput {
                    context: "ChannelNetwork::validate",
                    detail: format!("vertex {v} has no Kraus blocks"),
                });
            }
            let rows = dims_product(&self.wire_dims, &vertex.out_wires);
            let cols = dims_product(&self.wire_dims, &vertex.in_wires);
            for (i, k) in vertex.kraus.iter().enumerate() {
                if k.shape() != (rows, cols) {
                    return Err(CoreError::ShapeMismatch {
                        context: "ChannelNetwork::validate",
                        expected: format!("{rows}x{cols} Kraus block"),
                        got: format!("vertex {v} block {i} is {}x{}", k.nrows(), k.ncols()),
                    });
                }
            }
        }
        for w in 0..n_wires {
            if producers[w] != 1 || consumers[w] != 1 {
                return Err(CoreError::InvalidInput {
                    context: "ChannelNetwork::validate",
                    detail: format!(
                        "wire {w} has {} producers and {} consumers",
                        producers[w], consumers[w]
                    ),
                });
            }
        }
        let in_dim = dims_product(&self.wire_dims, &self.input_wires);
        if self.input_state.len() != in_dim {
            return Err(CoreError::ShapeMismatch {
                context: "ChannelNetwork::validate",
                expected: format!("input state of length {in_dim}"),
                got: self.input_state.len().to_string(),
            });
        }
        let out_dim = dims_product(&self.wire_dims, &self.output_wires);
        if self.output_functional.len() != out_dim {
            return Err(CoreError::ShapeMismatch {
                context: "ChannelNetwork::validate",
                expected: format!("output functional of length {out_dim}"),
                got: self.output_functional.len().to_string(),
            });
        }
        Ok(())
    }
}

/// Flow structure of a network: a topological order grouped into stages of
/// simultaneously ready vertices, or a witness cycle.
#[derive(Debug, Clone)]
pub struct FlowReport {
    /// Topological vertex order; empty when the network is cyclic.
    pub order: Vec<usize>,
    /// Vertices grouped by earliest possible stage.
    pub stages: Vec<Vec<usize>>,
    /// Vertex ids forming a cycle; empty when the network is acyclic.
    pub cycle: Vec<usize>,
}

impl FlowReport {
    pub fn is_acyclic(&self) -> bool {
        self.cycle.is_empty()
    }
}

/// Computes the stage structure, or exhibits a cycle. Structural wiring
/// problems are errors; cyclicity is reported, not raised.
pub fn validate_acyclic(net: &ChannelNetwork) -> Result<FlowReport> {
    net.validate()?;
    let producer_of: Vec<Option<usize>> = {
        let mut p = vec![None; net.wire_dims.len()];
        for (v, vertex) in net.vertices.iter().enumerate() {
            for &w in &vertex.out_wires {
                p[w] = Some(v);
            }
        }
        p
    };
    let mut stage_of: Vec<Option<usize>> = vec![None; net.vertices.len()];
    let mut wire_ready: Vec<bool> =
        (0..net.wire_dims.len()).map(|w| producer_of[w].is_none()).collect();
    let mut order = Vec::new();
    let mut stages: Vec<Vec<usize>> = Vec::new();
    loop {
        let mut stage = Vec::new();
        for (v, vertex) in net.vertices.iter().enumerate() {
            if stage_of[v].is_none() && vertex.in_wires.iter().all(|&w| wire_ready[w]) {
                stage.push(v);
            }
        }
        if stage.is_empty() {
            break;
        }
        for &v in &stage {
            stage_of[v] = Some(stages.len());
            for &w in &net.vertices[v].out_wires {
                wire_ready[w] = true;
            }
        }
        order.extend_from_slice(&stage);
        stages.push(stage);
    }
    if order.len() == net.vertices.len() {
        return Ok(FlowReport { order, stages, cycle: Vec::new() });
    }
    // Walk producer edges among the stuck vertices until one repeats.
    let start = (0..net.vertices.len()).find(|&v| stage_of[v].is_none()).expect("stuck vertex");
    let mut seen_at = vec![usize::MAX; net.vertices.len()];
    let mut path = vec![start];
    seen_at[start] = 0;
    loop {
        let here = *path.last().expect("nonempty path");
        let blocked = net.vertices[here]
            .in_wires
            .iter()
            .find(|&&w| !wire_ready[w])
            .expect("stuck vertex has a blocked wire");
        let next = producer_of[*blocked].expect("blocked wire has a vertex producer");
        if seen_at[next] != usize::MAX {
            let cycle = path[seen_at[next]..].to_vec();
            return Ok(FlowReport { order: Vec::new(), stages: Vec::new(), cycle });
        }
        seen_at[next] = path.len();
        path.push(next);
    }
}

/// The unnormalized state a network emits, one physical leg per vertex,
/// vertex 0 slowest, plus its norm.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub amplitudes: Vec<C64>,
    pub phys_dims: Vec<usize>,
    pub norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Leg {
    Phys(usize),
    Wire(usize),
}

/// Dense tensor with named legs, leg 0 slowest.
struct TensorState {
    legs: Vec<Leg>,
    dims: Vec<usize>,
    data: Vec<C64>,
}

fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; dims.len()];
    for k in (0..dims.len().saturating_sub(1)).rev() {
        s[k] = s[k + 1] * dims[k + 1];
    }
    s
}

impl TensorState {
    fn total(&self) -> usize {
        self.data.len()
    }

    /// Reorders legs so that `new_order[j]` names the old position `j` maps
    /// from; standard dense transpose.
    fn permute(&mut self, new_order: &[usize]) {
        debug_assert_eq!(new_order.len(), self.legs.len());
        let src_strides = strides(&self.dims);
        let new_dims: Vec<usize> = new_order.iter().map(|&p| self.dims[p]).collect();
        let sel_strides: Vec<usize> = new_order.iter().map(|&p| src_strides[p]).collect();
        let mut out = vec![c64(0.0, 0.0); self.total()];
        let n_legs = new_dims.len();
        for (dst, slot) in out.iter_mut().enumerate() {
            let mut rem = dst;
            let mut src = 0usize;
            for j in 0..n_legs {
                let block: usize = new_dims[j + 1..].iter().product();
                let digit = rem / block;
                rem %= block;
                src += digit * sel_strides[j];
            }
            *slot = self.data[src];
        }
        self.legs = new_order.iter().map(|&p| self.legs[p]).collect();
        self.dims = new_dims;
        self.data = out;
    }

    /// Moves the listed leg positions to the back, in the listed order.
    fn move_to_back(&mut self, select: &[usize]) {
        let mut order: Vec<usize> =
            (0..self.legs.len()).filter(|p| !select.contains(p)).collect();
        order.extend_from_slice(select);
        self.permute(&order);
    }
}

fn check_topological(net: &ChannelNetwork, order: &[usize]) -> Result<()> {
    if order.len() != net.vertices.len() {
        return Err(CoreError::InvalidInput {
            context: "tns order",
            detail: format!(
                "order lists {} vertices, network has {}",
                order.len(),
                net.vertices.len()
            ),
        });
    }
    let mut ready: Vec<bool> = {
        let mut produced = vec![true; net.wire_dims.len()];
        for vertex in &net.vertices {
            for &w in &vertex.out_wires {
                produced[w] = false;
            }
        }
        produced
    };
    let mut done = vec![false; net.vertices.len()];
    for &v in order {
        if v >= net.vertices.len() || done[v] {
            return Err(CoreError::InvalidInput {
                context: "tns order",
                detail: format!("vertex {v} repeated or out of range"),
            });
        }
        if let Some(&w) = net.vertices[v].in_wires.iter().find(|&&w| !ready[w]) {
            return Err(CoreError::InvalidInput {
                context: "tns order",
                detail: format!("order is not topological: vertex {v} needs wire {w}"),
            });
        }
        for &w in &net.vertices[v].out_wires {
            ready[w] = true;
        }
        done[v] = true;
    }
    Ok(())
}

/// Contracts the network in stage order.
pub fn evaluate(net: &ChannelNetwork, caps: &DeskCaps) -> Result<Evaluation> {
    let report = validate_acyclic(net)?;
    if !report.is_acyclic() {
        return Err(CoreError::CyclicNetwork { witness: report.cycle });
    }
    evaluate_in_order(net, &report.order, caps)
}

/// Contracts the network in a caller-chosen topological order. The result
/// is laid out by vertex id regardless of the order used.
pub fn evaluate_in_order(
    net: &ChannelNetwork,
    order: &[usize],
    caps: &DeskCaps,
) -> Result<Evaluation> {
    net.validate()?;
    check_topological(net, order)?;
    let mut state = TensorState {
        legs: net.input_wires.iter().map(|&w| Leg::Wire(w)).collect(),
        dims: net.input_wires.iter().map(|&w| net.wire_dims[w]).collect(),
        data: net.input_state.iter().copied().collect(),
    };
    for &v in order {
        let vertex = &net.vertices[v];
        let positions: Vec<usize> = vertex
            .in_wires
            .iter()
            .map(|&w| {
                state
                    .legs
                    .iter()
                    .position(|&l| l == Leg::Wire(w))
                    .expect("validated wiring keeps consumed wires live")
            })
            .collect();
        state.move_to_back(&positions);
        let din = dims_product(&net.wire_dims, &vertex.in_wires);
        let dout = dims_product(&net.wire_dims, &vertex.out_wires);
        let p = vertex.phys_dim();
        let rest = state.total() / din;
        caps.check_contraction(
            (rest as u128) * (p as u128) * (dout as u128),
            "tns::evaluate",
        )?;
        let mut data = vec![c64(0.0, 0.0); rest * p * dout];
        for r in 0..rest {
            for (i, k) in vertex.kraus.iter().enumerate() {
                for o in 0..dout {
                    let mut acc = c64(0.0, 0.0);
                    for c in 0..din {
                        acc += k[(o, c)] * state.data[r * din + c];
                    }
                    data[(r * p + i) * dout + o] = acc;
                }
            }
        }
        let keep = state.legs.len() - positions.len();
        let mut legs: Vec<Leg> = state.legs[..keep].to_vec();
        let mut dims: Vec<usize> = state.dims[..keep].to_vec();
        legs.push(Leg::Phys(v));
        dims.push(p);
        for &w in &vertex.out_wires {
            legs.push(Leg::Wire(w));
            dims.push(net.wire_dims[w]);
        }
        state = TensorState { legs, dims, data };
    }
    // Canonical layout: physical legs by vertex id, then declared outputs.
    let mut final_order = Vec::with_capacity(state.legs.len());
    for v in 0..net.vertices.len() {
        final_order
            .push(state.legs.iter().position(|&l| l == Leg::Phys(v)).expect("one leg per vertex"));
    }
    for &w in &net.output_wires {
        final_order
            .push(state.legs.iter().position(|&l| l == Leg::Wire(w)).expect("sink wire is live"));
    }
    state.permute(&final_order);
    let dout = dims_product(&net.wire_dims, &net.output_wires);
    let phys_total = state.total() / dout;
    let mut amplitudes = vec![c64(0.0, 0.0); phys_total];
    for (b, slot) in amplitudes.iter_mut().enumerate() {
        let mut acc = c64(0.0, 0.0);
        for o in 0..dout {
            acc += net.output_functional[o] * state.data[b * dout + o];
        }
        *slot = acc;
    }
    let norm = norm_sq(&amplitudes).sqrt();
    let phys_dims = net.vertices.iter().map(NetVertex::phys_dim).collect();
    Ok(Evaluation { amplitudes, phys_dims, norm })
}

/// Rewrites the acyclic network as a matrix product state along a
/// topological linearization of its vertices. Site `k` of the result emits
/// vertex `site_order[k]`'s physical level; the bond crossing each cut is
/// the product of the wire dimensions alive there.
pub fn flatten_to_mps(net: &ChannelNetwork, site_order: &[usize], caps: &DeskCaps) -> Result<Mps> {
    net.validate()?;
    check_topological(net, site_order)?;
    let d = net.vertices.first().map(NetVertex::phys_dim).unwrap_or(0);
    if net.vertices.iter().any(|v| v.phys_dim() != d) {
        return Err(CoreError::InvalidInput {
            context: "flatten_to_mps",
            detail: "vertices emit different physical dimensions".into(),
        });
    }
    let mut live: Vec<usize> = net.input_wires.clone();
    let mut tensors: Vec<Vec<CMat>> = Vec::with_capacity(site_order.len());
    for &v in site_order {
        let vertex = &net.vertices[v];
        let positions: Vec<usize> = vertex
            .in_wires
            .iter()
            .map(|&w| live.iter().position(|&x| x == w).expect("topological order keeps inputs live"))
            .collect();
        let spectators: Vec<usize> =
            (0..live.len()).filter(|p| !positions.contains(p)).collect();
        let live_dims: Vec<usize> = live.iter().map(|&w| net.wire_dims[w]).collect();
        let bond_in: usize = live_dims.iter().product();
        let next_live: Vec<usize> = spectators
            .iter()
            .map(|&p| live[p])
            .chain(vertex.out_wires.iter().copied())
            .collect();
        let bond_out = dims_product(&net.wire_dims, &next_live);
        caps.check_contraction((bond_in as u128) * (bond_out as u128), "flatten_to_mps")?;
        let dout = dims_product(&net.wire_dims, &vertex.out_wires);
        let in_strides = strides(&live_dims);
        let mut site = vec![CMat::zeros(bond_out, bond_in); d];
        for b in 0..bond_in {
            // Split the incoming bond into spectator digits and the
            // vertex's input block, both in their declared order; the
            // outgoing bond is (spectators, vertex outputs) in that order.
            let mut spec_idx = 0usize;
            for &p in &spectators {
                let digit = (b / in_strides[p]) % live_dims[p];
                spec_idx = spec_idx * live_dims[p] + digit;
            }
            let mut c = 0usize;
            for &p in &positions {
                let digit = (b / in_strides[p]) % live_dims[p];
                c = c * live_dims[p] + digit;
            }
            for (i, t) in site.iter_mut().enumerate() {
                for o in 0..dout {
                    let val = vertex.kraus[i][(o, c)];
                    if val != c64(0.0, 0.0) {
                        t[(spec_idx * dout + o, b)] = val;
                    }
                }
            }
        }
        tensors.push(site);
        live = next_live;
    }
    // Close the final bond with the output functional, re-indexed from the
    // declared output order to the surviving live-wire order.
    let live_dims: Vec<usize> = live.iter().map(|&w| net.wire_dims[w]).collect();
    let bond_final: usize = live_dims.iter().product();
    let live_strides = strides(&live_dims);
    let out_pos: Vec<usize> = net
        .output_wires
        .iter()
        .map(|&w| live.iter().position(|&x| x == w).expect("sink wire survives"))
        .collect();
    let mut right = CVec::zeros(bond_final);
    for b in 0..bond_final {
        let mut f = 0usize;
        for &p in &out_pos {
            let digit = (b / live_strides[p]) % live_dims[p];
            f = f * live_dims[p] + digit;
        }
        right[b] = net.output_functional[f];
    }
    let left = net.input_state.clone();
    Mps::new(d, tensors, Boundary::Projected { left, right })
}

/// Views a matrix product state as a linear channel network: one vertex
/// per site whose Kraus blocks are the site matrices, one wire per bond.
/// The boundary must already be explicit (vector or projected).
pub fn chain_from_mps(mps: &Mps) -> Result<ChannelNetwork> {
    let n = mps.n_sites();
    let bonds = mps.bond_dims();
    let (left, right) = match mps.boundary() {
        Boundary::Vector => (
            CVec::from_element(1, c64(1.0, 0.0)),
            CVec::from_element(1, c64(1.0, 0.0)),
        ),
        Boundary::Projected { left, right } => (left.clone(), right.clone()),
        Boundary::Periodic => {
            return Err(CoreError::InvalidInput {
                context: "chain_from_mps",
                detail: "periodic boundary; convert with pbc_to_obc first".into(),
            });
        }
    };
    let vertices = (0..n)
        .map(|k| NetVertex {
            in_wires: vec![k],
            out_wires: vec![k + 1],
            kraus: mps.site(k).to_vec(),
        })
        .collect();
    Ok(ChannelNetwork {
        wire_dims: bonds,
        vertices,
        input_wires: vec![0],
        input_state: left,
        output_wires: vec![n],
        output_functional: right,
    })
}

/// Reorders a dense multi-leg amplitude vector so that new leg `j` is old
/// leg `order[j]`; used to compare evaluations against relabeled layouts.
pub fn permute_site_axes(amplitudes: &[C64], dims: &[usize], order: &[usize]) -> Vec<C64> {
    let mut state = TensorState {
        legs: (0..dims.len()).map(Leg::Phys).collect(),
        dims: dims.to_vec(),
        data: amplitudes.to_vec(),
    };
    state.permute(order);
    state.data
}
