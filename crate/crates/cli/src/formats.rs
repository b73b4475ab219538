//! On-disk JSON formats.
//!
//! All documents are UTF-8 JSON. Complex numbers are `[re, im]` pairs,
//! matrices are row-major nested arrays, and floats use the shortest exact
//! round-trip representation, so reruns are byte identical.

use seqtape_core::compile::{CircuitGate, MeasBasis, SeqCircuit};
use seqtape_core::ltm::quantum::QGate;
use seqtape_core::matrix::{c64, C64, CMat, CVec, RMat, RVec};
use seqtape_core::mps::{Boundary, Mps};
use serde::{Deserialize, Serialize};

pub type Cx = [f64; 2];

pub fn cx(z: C64) -> Cx {
    [z.re, z.im]
}

pub fn cx_val(x: Cx) -> C64 {
    c64(x[0], x[1])
}

pub fn cvec_to_json(v: &CVec) -> Vec<Cx> {
    v.iter().map(|z| cx(*z)).collect()
}

pub fn cvec_from_json(v: &[Cx]) -> CVec {
    CVec::from_iterator(v.len(), v.iter().map(|&x| cx_val(x)))
}

pub fn cmat_to_json(m: &CMat) -> Vec<Vec<Cx>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| cx(m[(i, j)])).collect())
        .collect()
}

pub fn cmat_from_json(rows: &[Vec<Cx>]) -> Result<CMat, String> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        return Err("ragged complex matrix".into());
    }
    Ok(CMat::from_fn(nrows, ncols, |i, j| cx_val(rows[i][j])))
}

pub fn rmat_to_json(m: &RMat) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn rmat_from_json(rows: &[Vec<f64>]) -> Result<RMat, String> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    if nrows == 0 || ncols == 0 {
        return Err("empty matrix".into());
    }
    if rows.iter().any(|r| r.len() != ncols) {
        return Err("ragged matrix".into());
    }
    Ok(RMat::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

// ---------------------------------------------------------------------------
// Matrix-product states

#[derive(Debug, Serialize, Deserialize)]
pub struct BoundaryJson {
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(rename = "L", default, skip_serializing_if = "Option::is_none")]
    pub left: Option<Vec<Cx>>,
    #[serde(rename = "R", default, skip_serializing_if = "Option::is_none")]
    pub right: Option<Vec<Cx>>,
}

/// `{"d", "N", "boundary", "tensors": [site][phys][row][col]}`.
#[derive(Debug, Serialize, Deserialize)]
pub struct MpxJson {
    pub d: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub boundary: BoundaryJson,
    pub tensors: Vec<Vec<Vec<Vec<Cx>>>>,
}

impl MpxJson {
    pub fn from_mps(mps: &Mps) -> Self {
        let boundary = match mps.boundary() {
            Boundary::Vector => BoundaryJson { kind: "vector".into(), left: None, right: None },
            Boundary::Projected { left, right } => BoundaryJson {
                kind: "projected".into(),
                left: Some(cvec_to_json(left)),
                right: Some(cvec_to_json(right)),
            },
            Boundary::Periodic => BoundaryJson { kind: "pbc".into(), left: None, right: None },
        };
        let tensors = (0..mps.n_sites())
            .map(|k| mps.site(k).iter().map(cmat_to_json).collect())
            .collect();
        MpxJson { d: mps.physical_dim(), n: mps.n_sites(), boundary, tensors }
    }

    pub fn into_mps(self) -> Result<Mps, String> {
        if self.tensors.len() != self.n {
            return Err(format!("N = {} but {} site tensors", self.n, self.tensors.len()));
        }
        let boundary = match self.boundary.kind.as_str() {
            "vector" => Boundary::Vector,
            "pbc" => Boundary::Periodic,
            "projected" => {
                let left = self.boundary.left.as_deref().ok_or("projected boundary needs L")?;
                let right = self.boundary.right.as_deref().ok_or("projected boundary needs R")?;
                Boundary::Projected {
                    left: cvec_from_json(left),
                    right: cvec_from_json(right),
                }
            }
            other => return Err(format!("unknown boundary type {other:?}")),
        };
        let mut tensors = Vec::with_capacity(self.tensors.len());
        for site in &self.tensors {
            let mut mats = Vec::with_capacity(site.len());
            for phys in site {
                mats.push(cmat_from_json(phys)?);
            }
            tensors.push(mats);
        }
        Mps::new(self.d, tensors, boundary).map_err(|e| e.to_string())
    }
}

// ---------------------------------------------------------------------------
// Sequential circuits

#[derive(Debug, Serialize, Deserialize)]
pub struct CircuitGateJson {
    pub site: usize,
    pub matrix: Vec<Vec<Cx>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MeasurementJson {
    pub site: usize,
    pub basis: String,
}

/// `{"chi", "d", "init_correlator", "gates", "measurements", "decoupled"}`.
#[derive(Debug, Serialize, Deserialize)]
pub struct CircuitJson {
    pub chi: usize,
    pub d: usize,
    pub init_correlator: Vec<Cx>,
    pub gates: Vec<CircuitGateJson>,
    pub measurements: Vec<MeasurementJson>,
    pub decoupled: bool,
}

impl CircuitJson {
    pub fn from_circuit(c: &SeqCircuit) -> Self {
        CircuitJson {
            chi: c.chi,
            d: c.d,
            init_correlator: cvec_to_json(&c.init_correlator),
            gates: c
                .gates
                .iter()
                .map(|g| CircuitGateJson { site: g.site, matrix: cmat_to_json(&g.matrix) })
                .collect(),
            measurements: c
                .measurements
                .iter()
                .map(|&(site, basis)| MeasurementJson {
                    site,
                    basis: match basis {
                        MeasBasis::Computational => "computational".into(),
                    },
                })
                .collect(),
            decoupled: c.decoupled,
        }
    }

    pub fn into_circuit(self) -> Result<SeqCircuit, String> {
        if self.gates.is_empty() {
            return Err("circuit has no gates".into());
        }
        let n_sites = self.gates.iter().map(|g| g.site).max().unwrap() + 1;
        let mut gates = Vec::with_capacity(self.gates.len());
        for g in &self.gates {
            gates.push(CircuitGate { site: g.site, matrix: cmat_from_json(&g.matrix)? });
        }
        let mut circuit = SeqCircuit::new(
            self.d,
            self.chi,
            n_sites,
            gates,
            cvec_from_json(&self.init_correlator),
            self.decoupled,
        )
        .map_err(|e| e.to_string())?;
        for m in &self.measurements {
            let basis = match m.basis.as_str() {
                "computational" => MeasBasis::Computational,
                other => return Err(format!("unknown basis {other:?}")),
            };
            circuit.measurements.push((m.site, basis));
        }
        Ok(circuit)
    }
}

// ---------------------------------------------------------------------------
// Machine programs

#[derive(Debug, Serialize, Deserialize)]
pub struct StepJson {
    pub gate: usize,
    pub site: usize,
    pub shift: i8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ctrl: Option<usize>,
}

/// `{"kind", "Q", "control", "steps"}`; `control` is kind-specific.
#[derive(Debug, Serialize, Deserialize)]
pub struct ProgramJson {
    pub kind: String,
    #[serde(rename = "Q")]
    pub q: usize,
    pub control: serde_json::Value,
    #[serde(default)]
    pub steps: Vec<StepJson>,
}

/// Gate table entry for classical and probabilistic machines.
#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalOpJson {
    Perm(Vec<usize>),
    Stochastic(Vec<Vec<f64>>),
}

/// Control block for `lctm` and `lptm` programs.
#[derive(Debug, Serialize, Deserialize)]
pub struct MachineControlJson {
    pub proc_dim: usize,
    pub site_dim: usize,
    pub tape_len: usize,
    pub gates: Vec<LocalOpJson>,
    pub head_start: usize,
    pub start_proc: usize,
    #[serde(default)]
    pub final_proc: Vec<usize>,
    #[serde(default)]
    pub input: Vec<usize>,
}

/// Control block for `lqtm` programs: a qubit circuit compiled to a one-way
/// machine at run time.
#[derive(Debug, Serialize, Deserialize)]
pub struct QuantumControlJson {
    pub n_qubits: usize,
    pub circuit: Vec<QGateJson>,
    /// Basis input bits, one per qubit; defaults to all zero.
    #[serde(default)]
    pub input: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "gate", rename_all = "lowercase")]
pub enum QGateJson {
    H { target: usize },
    T { target: usize },
    Cz { a: usize, b: usize },
}

impl QGateJson {
    pub fn to_core(&self) -> QGate {
        match *self {
            QGateJson::H { target } => QGate::H { target },
            QGateJson::T { target } => QGate::T { target },
            QGateJson::Cz { a, b } => QGate::Cz { a, b },
        }
    }
}

/// Control block for `smps` generation programs: column-stochastic joint
/// maps of size `d * chi`, indexed digit-major, applied in listed order.
#[derive(Debug, Serialize, Deserialize)]
pub struct SmpsControlJson {
    pub d: usize,
    pub chi: usize,
    pub maps: Vec<Vec<Vec<f64>>>,
    pub init_correlator: Vec<f64>,
}

// ---------------------------------------------------------------------------
// Results

/// `{"d", "N", "weights"}`.
#[derive(Debug, Serialize, Deserialize)]
pub struct DistributionJson {
    pub d: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub weights: Vec<f64>,
}

/// Empirical counts over tape values.
#[derive(Debug, Serialize, Deserialize)]
pub struct CountsJson {
    pub d: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub shots: usize,
    pub counts: Vec<u64>,
}

/// One measurement branch of a one-way run: outcomes per measured pair
/// (first pair slowest in enumeration order), its probability, and the
/// corrected logical register state.
#[derive(Debug, Serialize, Deserialize)]
pub struct BranchJson {
    pub outcomes: Vec<usize>,
    pub probability: f64,
    pub state: Vec<Cx>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BranchesJson {
    pub n_qubits: usize,
    pub branches: Vec<BranchJson>,
}

/// Sampled branch counts, indexed by the branch enumeration order (base-4
/// digits of the outcome list, first pair slowest).
#[derive(Debug, Serialize, Deserialize)]
pub struct BranchCountsJson {
    pub n_qubits: usize,
    pub n_pairs: usize,
    pub shots: usize,
    pub counts: Vec<u64>,
}

/// Input for the factorization command.
#[derive(Debug, Serialize, Deserialize)]
pub struct NmfMatrixJson {
    pub matrix: Vec<Vec<f64>>,
}

/// `A ~ P diag(d) Q^T` with the per-round divergence trace.
#[derive(Debug, Serialize, Deserialize)]
pub struct NmfJson {
    pub k: usize,
    pub p: Vec<Vec<f64>>,
    pub d: Vec<f64>,
    pub qt: Vec<Vec<f64>>,
    pub divergence: f64,
    pub iterations: usize,
    pub trace: Vec<f64>,
}

pub fn rvec_to_json(v: &RVec) -> Vec<f64> {
    v.iter().copied().collect()
}

// ---------------------------------------------------------------------------
// Check reports

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckItemJson {
    pub index: usize,
    pub deviation: f64,
    pub pass: bool,
}

/// Machine-readable verdict of a `check` run.
#[derive(Debug, Serialize, Deserialize)]
pub struct CheckReportJson {
    pub suite: String,
    pub pass: bool,
    pub tol: f64,
    pub items: Vec<CheckItemJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlator_ground_weight: Option<f64>,
}
