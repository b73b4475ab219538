//! Acceptance gate: one test per shipping criterion. Each test prints a
//! single `[PASS]`/`[FAIL]` line (run with `-- --nocapture` to see them all)
//! and asserts, so the suite fails loudly when a criterion slips.

use std::path::{Path, PathBuf};
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tempfile::TempDir;

use seqtape_core::caps::DeskCaps;
use seqtape_core::channels::{stochastic_matrix, Channel};
use seqtape_core::compile::{
    compose, decouple_compile, run_circuit, run_circuit_on, tensor_compose, CircuitGate,
    SeqCircuit,
};
use seqtape_core::ltm::machine::{self, GateStep, LocalOp, LtmSpec, MachineKind, MachineState};
use seqtape_core::ltm::quantum::{simulate_dense, QGate};
use seqtape_core::ltm::unilateral::{
    compile_unilateral, for_each_branch, logical_state, verify_one_way, Branch,
};
use seqtape_core::matrix::{basis_vec, c64, fidelity, norm_sq, CMat, CVec, C64, RMat};
use seqtape_core::mps::{
    index_digits, random_right_canonical, statevector_index, Boundary, Mps, RANK_TOL,
};
use seqtape_core::smps::{
    birkhoff_decompose, decouple_stochastic, lptm_run, nmf_kl, prob_to_smps, propagate_program,
    smps_to_prob, LptmMode, NmfOptions, ProbabilityVector, SmpsOptions,
};
use seqtape_core::tns::{
    chain_from_mps, evaluate, evaluate_in_order, flatten_to_mps, ChannelNetwork, NetVertex,
};

const S: f64 = std::f64::consts::FRAC_1_SQRT_2;

fn caps() -> DeskCaps {
    DeskCaps::default()
}

fn report(criterion: usize, label: &str, pass: bool, detail: &str) {
    let verdict = if pass { "[PASS]" } else { "[FAIL]" };
    println!("{verdict} criterion {criterion}: {label} ({detail})");
    assert!(pass, "criterion {criterion}: {label} ({detail})");
}

fn random_state<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<C64> {
    let mut v: Vec<C64> =
        (0..dim).map(|_| c64(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)).collect();
    let norm = norm_sq(&v).sqrt();
    for z in &mut v {
        *z /= norm;
    }
    v
}

fn rand_c<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    c64(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
}

fn max_err(a: &[C64], b: &[C64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

#[test]
fn criterion_1_entangled_pair_worked_example() {
    const TOL: f64 = 1e-12;
    let z = c64(0.0, 0.0);
    let s = c64(S, 0.0);
    let one = c64(1.0, 0.0);

    // Site tensors chosen so the pair (|00> + |11>)/sqrt(2) comes out.
    let site0 = vec![
        CMat::from_row_slice(2, 2, &[s, z, z, s]),
        CMat::from_row_slice(2, 2, &[z, s, s, z]),
    ];
    let site1 = vec![
        CMat::from_row_slice(2, 2, &[one, z, z, z]),
        CMat::from_row_slice(2, 2, &[z, one, z, z]),
    ];
    let boundary = Boundary::Projected {
        left: CVec::from_vec(vec![one, z]),
        right: CVec::from_vec(vec![one, z]),
    };
    let mps = Mps::new(2, vec![site0, site1], boundary).unwrap();
    let bell = vec![s, z, z, s];
    let psi = mps.to_statevector(&caps()).unwrap();
    let state_err = max_err(&psi, &bell);

    let compiled = decouple_compile(&mps).unwrap();
    let run = run_circuit(&compiled, &caps()).unwrap();
    let fid = fidelity(run.tape.as_deref().unwrap(), &bell);
    let ground = run.correlator_ground_weight;

    // Hand-assembled preparation: entangle the first site with the
    // correlator, then swap the second site against it.
    let entangle = CMat::from_row_slice(
        4,
        4,
        &[s, z, s, z, z, s, z, s, z, s, z, -s, s, z, -s, z],
    );
    let swap = CMat::from_row_slice(
        4,
        4,
        &[one, z, z, z, z, z, one, z, z, one, z, z, z, z, z, one],
    );
    let hand = SeqCircuit::new(
        2,
        2,
        2,
        vec![
            CircuitGate { site: 0, matrix: entangle },
            CircuitGate { site: 1, matrix: swap },
        ],
        CVec::from_vec(vec![one, z]),
        true,
    )
    .unwrap();
    let hand_run = run_circuit(&hand, &caps()).unwrap();
    let mut expected = vec![z; 8];
    for t in 0..4 {
        expected[t * 2] = bell[t];
    }
    let hand_overlap = fidelity(&hand_run.state, &expected);

    let pass = state_err <= TOL
        && fid >= 1.0 - TOL
        && ground >= 1.0 - TOL
        && hand_overlap >= 1.0 - TOL;
    report(
        1,
        "two-site worked example",
        pass,
        &format!(
            "state err {state_err:.2e}, compiled fidelity {fid:.12}, \
             ground weight {ground:.12}, hand circuit overlap {hand_overlap:.12}"
        ),
    );
}

#[test]
fn criterion_2_factorization_round_trip() {
    const TOL: f64 = 1e-10;
    let caps = caps();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let sizes_d2: &[usize] = &[2, 3, 4, 5, 6, 7, 8];
    let sizes_d3: &[usize] = &[2, 3, 4, 5];
    let mut worst_fid = 1.0f64;
    let mut worst_dev = 0.0f64;
    let mut count = 0usize;
    for (d, sizes) in [(2usize, sizes_d2), (3, sizes_d3)] {
        for i in 0..100 {
            let n = sizes[i % sizes.len()];
            let dim = d.pow(n as u32);
            let psi = random_state(dim, &mut rng);
            let mps = Mps::from_statevector(d, &psi, RANK_TOL, &caps).unwrap();
            let back = mps.to_statevector(&caps).unwrap();
            worst_fid = worst_fid.min(fidelity(&back, &psi));
            worst_dev = worst_dev.max(mps.right_canonical_deviation());
            count += 1;
        }
    }
    let pass = count == 200 && worst_fid >= 1.0 - TOL && worst_dev <= TOL;
    report(
        2,
        "dense factorization round trip",
        pass,
        &format!(
            "{count} states, min fidelity {worst_fid:.12}, max canonical deviation {worst_dev:.2e}"
        ),
    );
}

#[test]
fn criterion_3_decoupled_compilation_families() {
    const TOL: f64 = 1e-10;
    let caps = caps();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // Three bond-width regimes: between d and d^2, within d, and beyond d^2.
    let families: [&[(usize, usize, usize)]; 3] = [
        &[(2, 3, 6), (2, 4, 6)],
        &[(2, 2, 5), (3, 3, 5)],
        &[(2, 5, 6), (2, 8, 6)],
    ];
    let mut worst_fid = 1.0f64;
    let mut worst_ground = 1.0f64;
    let mut runs = 0usize;
    for cases in families {
        for t in 0..20 {
            let (d, chi, n) = cases[t % cases.len()];
            let mps = random_right_canonical(d, n, chi, &mut rng).unwrap();
            let psi = mps.to_statevector(&caps).unwrap();
            let circuit = decouple_compile(&mps).unwrap();
            let run = run_circuit(&circuit, &caps).unwrap();
            worst_fid = worst_fid.min(fidelity(run.tape.as_deref().unwrap(), &psi));
            worst_ground = worst_ground.min(run.correlator_ground_weight);
            runs += 1;
        }
    }
    let pass = runs == 60 && worst_fid >= 1.0 - TOL && worst_ground >= 1.0 - TOL;
    report(
        3,
        "decoupled compilation across bond regimes",
        pass,
        &format!(
            "{runs} states, min fidelity {worst_fid:.12}, min ground weight {worst_ground:.12}"
        ),
    );
}

#[test]
fn criterion_4_controlled_phase_swap_gadget() {
    const TOL: f64 = 1e-10;
    let caps = caps();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // Local joint index is processor-major: (proc, site) -> proc * 2 + site.
    let swap = LocalOp::Permutation(vec![0, 2, 1, 3]);
    let cz = LocalOp::Unitary(CMat::from_fn(4, 4, |i, j| {
        if i != j {
            c64(0.0, 0.0)
        } else if i == 3 {
            c64(-1.0, 0.0)
        } else {
            c64(1.0, 0.0)
        }
    }));
    let spec = LtmSpec {
        kind: MachineKind::Quantum,
        proc_dim: 2,
        site_dim: 2,
        tape_len: 2,
        gates: vec![swap, cz],
        head_start: 0,
        start_proc: 0,
        final_proc: vec![0],
        input_sites: vec![0, 1],
        output_sites: vec![0, 1],
    };
    let program = vec![
        GateStep::new(0, 0, 1),
        GateStep::new(1, 1, -1),
        GateStep::new(0, 0, 0),
    ];
    let mut worst = 0.0f64;
    let mut worst_leak = 0.0f64;
    for _ in 0..50 {
        let psi = random_state(4, &mut rng);
        let mut amp = vec![c64(0.0, 0.0); 8];
        amp[..4].copy_from_slice(&psi);
        let trace =
            machine::run_from(&spec, &program, MachineState::Quantum { amp }, 8, &caps).unwrap();
        let MachineState::Quantum { amp: out } = trace.config.state else {
            panic!("quantum run must stay quantum");
        };
        let mut expected = psi.clone();
        expected[3] = -expected[3];
        worst = worst.max(max_err(&out[..4], &expected));
        let leak: f64 = out[4..].iter().map(|x| x.norm_sqr()).sum();
        worst_leak = worst_leak.max(leak.sqrt());
    }
    let pass = worst <= TOL && worst_leak <= TOL;
    report(
        4,
        "controlled-phase swap gadget",
        pass,
        &format!("50 inputs, max output err {worst:.2e}, max mediator leak {worst_leak:.2e}"),
    );
}

#[test]
fn criterion_5_one_way_branch_equivalence() {
    const TOL: f64 = 1e-10;
    let caps = DeskCaps::scaled(64);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 3usize;
    let mut worst_fid = 1.0f64;
    let mut worst_prob = 0.0f64;
    let mut heads_ok = true;
    let mut branches_seen = 0usize;
    for round in 0..4 {
        let max_cz = 2 + round % 2;
        let mut czs = 0usize;
        let mut circuit: Vec<QGate> = Vec::new();
        for _ in 0..8 {
            match rng.random_range(0..3u8) {
                0 if czs < max_cz => {
                    let a = rng.random_range(0..n);
                    let mut b = rng.random_range(0..n);
                    while b == a {
                        b = rng.random_range(0..n);
                    }
                    circuit.push(QGate::Cz { a, b });
                    czs += 1;
                }
                1 => circuit.push(QGate::H { target: rng.random_range(0..n) }),
                _ => circuit.push(QGate::T { target: rng.random_range(0..n) }),
            }
        }
        if czs == 0 {
            circuit.push(QGate::Cz { a: 0, b: 1 });
        }
        let plan = compile_unilateral(&circuit, n).unwrap();
        heads_ok &= verify_one_way(&plan.spec, &plan.program).is_ok();
        let input: Vec<C64> = basis_vec(1 << n, 0).iter().copied().collect();
        let dense = simulate_dense(&circuit, n, &input).unwrap();
        let expected_p = 0.25f64.powi(plan.pairs.len() as i32);
        let mut branches: Vec<Branch> = Vec::new();
        for_each_branch(&plan, &input, &caps, |b| branches.push(b.clone())).unwrap();
        assert_eq!(branches.len(), plan.branch_count());
        for b in &branches {
            worst_prob = worst_prob.max((b.probability - expected_p).abs());
            let logical = logical_state(&plan, &b.state).unwrap();
            worst_fid = worst_fid.min(fidelity(&logical, &dense));
            branches_seen += 1;
        }
    }
    let pass = heads_ok && worst_fid >= 1.0 - TOL && worst_prob <= TOL;
    report(
        5,
        "one-way branch equivalence",
        pass,
        &format!(
            "{branches_seen} branches, min corrected fidelity {worst_fid:.12}, \
             max probability err {worst_prob:.2e}, heads forward-only {heads_ok}"
        ),
    );
}

#[test]
fn criterion_6_circuit_composition_oracles() {
    const TOL: f64 = 1e-10;
    let caps = caps();
    let mut rng = ChaCha8Rng::seed_from_u64(6);

    // Sequential composition: the composite must act like running the
    // second preparation on the first one's output tape.
    let a = decouple_compile(&random_right_canonical(2, 4, 2, &mut rng).unwrap()).unwrap();
    let b = decouple_compile(&random_right_canonical(2, 4, 2, &mut rng).unwrap()).unwrap();
    let ab = compose(&a, &b).unwrap();
    let tape_a = run_circuit(&a, &caps).unwrap().tape.unwrap();
    let oracle = run_circuit_on(&b, &tape_a, &caps).unwrap();
    let direct = run_circuit(&ab, &caps).unwrap();
    let (cb, chi) = (b.chi, ab.chi);
    let mut expected = vec![c64(0.0, 0.0); direct.state.len()];
    for t in 0..16 {
        for j in 0..cb {
            expected[t * chi + j] = oracle.state[t * cb + j];
        }
    }
    let seq_fid = fidelity(&direct.state, &expected);
    let seq_shape = ab.chi == 4;

    // Parallel composition: site digits pair up, amplitudes multiply.
    let p = decouple_compile(&random_right_canonical(2, 3, 2, &mut rng).unwrap()).unwrap();
    let q = decouple_compile(&random_right_canonical(2, 3, 2, &mut rng).unwrap()).unwrap();
    let pq = tensor_compose(&p, &q).unwrap();
    let tp = run_circuit(&p, &caps).unwrap().tape.unwrap();
    let tq = run_circuit(&q, &caps).unwrap().tape.unwrap();
    let tpq = run_circuit(&pq, &caps).unwrap().tape.unwrap();
    let mut expect_pair = vec![c64(0.0, 0.0); 64];
    for (ia, za) in tp.iter().enumerate() {
        let da = index_digits(2, 3, ia);
        for (ib, zb) in tq.iter().enumerate() {
            let db = index_digits(2, 3, ib);
            let digits: Vec<usize> = da.iter().zip(&db).map(|(&x, &y)| x * 2 + y).collect();
            expect_pair[statevector_index(4, &digits)] = za * zb;
        }
    }
    let par_fid = fidelity(&tpq, &expect_pair);
    let par_shape = pq.d == 4 && pq.chi == 4;

    let pass = seq_shape && par_shape && seq_fid >= 1.0 - TOL && par_fid >= 1.0 - TOL;
    report(
        6,
        "sequential and parallel composition",
        pass,
        &format!("sequential fidelity {seq_fid:.12}, parallel fidelity {par_fid:.12}"),
    );
}

/// Contracts a network by brute enumeration over every wire assignment;
/// the reference all the fast paths must agree with.
fn brute_contract(net: &ChannelNetwork) -> Vec<C64> {
    let n_wires = net.wire_dims.len();
    let wire_total: usize = net.wire_dims.iter().product();
    let phys_dims: Vec<usize> = net.vertices.iter().map(NetVertex::phys_dim).collect();
    let phys_total: usize = phys_dims.iter().product();
    let mut amp = vec![c64(0.0, 0.0); phys_total];
    for assignment in 0..wire_total {
        let mut values = vec![0usize; n_wires];
        let mut rem = assignment;
        for w in (0..n_wires).rev() {
            values[w] = rem % net.wire_dims[w];
            rem /= net.wire_dims[w];
        }
        let joint = |wires: &[usize]| -> usize {
            wires.iter().fold(0usize, |acc, &w| acc * net.wire_dims[w] + values[w])
        };
        let boundary = net.input_state[joint(&net.input_wires)]
            * net.output_functional[joint(&net.output_wires)];
        if boundary == c64(0.0, 0.0) {
            continue;
        }
        let factors: Vec<Vec<C64>> = net
            .vertices
            .iter()
            .map(|v| {
                let row = joint(&v.out_wires);
                let col = joint(&v.in_wires);
                v.kraus.iter().map(|k| k[(row, col)]).collect()
            })
            .collect();
        for (p, slot) in amp.iter_mut().enumerate() {
            let mut rem = p;
            let mut term = boundary;
            for v in (0..factors.len()).rev() {
                term *= factors[v][rem % phys_dims[v]];
                rem /= phys_dims[v];
            }
            *slot += term;
        }
    }
    amp
}

fn rand_kraus<R: Rng + ?Sized>(d: usize, rows: usize, cols: usize, rng: &mut R) -> Vec<CMat> {
    (0..d).map(|_| CMat::from_fn(rows, cols, |_, _| rand_c(rng))).collect()
}

#[test]
fn criterion_7_network_contraction_consistency() {
    let caps = caps();
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    // A linearized state is its own chain network.
    let mps = random_right_canonical(2, 5, 4, &mut rng).unwrap();
    let psi = mps.to_statevector(&caps).unwrap();
    let chain = chain_from_mps(&mps).unwrap();
    let chain_err = max_err(&evaluate(&chain, &caps).unwrap().amplitudes, &psi);

    // Square four-vertex mesh.
    let grid = ChannelNetwork {
        wire_dims: vec![2; 6],
        vertices: vec![
            NetVertex { in_wires: vec![0], out_wires: vec![1, 2], kraus: rand_kraus(2, 4, 2, &mut rng) },
            NetVertex { in_wires: vec![1], out_wires: vec![3], kraus: rand_kraus(2, 2, 2, &mut rng) },
            NetVertex { in_wires: vec![2], out_wires: vec![4], kraus: rand_kraus(2, 2, 2, &mut rng) },
            NetVertex { in_wires: vec![3, 4], out_wires: vec![5], kraus: rand_kraus(2, 2, 4, &mut rng) },
        ],
        input_wires: vec![0],
        input_state: CVec::from_fn(2, |_, _| rand_c(&mut rng)),
        output_wires: vec![5],
        output_functional: CVec::from_fn(2, |_, _| rand_c(&mut rng)),
    };
    grid.validate().unwrap();

    // Two three-site chains joined by one rung.
    let coupled = ChannelNetwork {
        wire_dims: vec![2; 9],
        vertices: vec![
            NetVertex { in_wires: vec![0], out_wires: vec![1], kraus: rand_kraus(2, 2, 2, &mut rng) },
            NetVertex { in_wires: vec![1], out_wires: vec![2, 8], kraus: rand_kraus(2, 4, 2, &mut rng) },
            NetVertex { in_wires: vec![2], out_wires: vec![3], kraus: rand_kraus(2, 2, 2, &mut rng) },
            NetVertex { in_wires: vec![4], out_wires: vec![5], kraus: rand_kraus(2, 2, 2, &mut rng) },
            NetVertex { in_wires: vec![5, 8], out_wires: vec![6], kraus: rand_kraus(2, 2, 4, &mut rng) },
            NetVertex { in_wires: vec![6], out_wires: vec![7], kraus: rand_kraus(2, 2, 2, &mut rng) },
        ],
        input_wires: vec![0, 4],
        input_state: CVec::from_fn(4, |_, _| rand_c(&mut rng)),
        output_wires: vec![3, 7],
        output_functional: CVec::from_fn(4, |_, _| rand_c(&mut rng)),
    };
    coupled.validate().unwrap();

    let grid_ev = evaluate(&grid, &caps).unwrap().amplitudes;
    let coupled_ev = evaluate(&coupled, &caps).unwrap().amplitudes;
    let brute_err = max_err(&grid_ev, &brute_contract(&grid))
        .max(max_err(&coupled_ev, &brute_contract(&coupled)));

    let order_err = max_err(
        &evaluate_in_order(&grid, &[0, 2, 1, 3], &caps).unwrap().amplitudes,
        &grid_ev,
    )
    .max(max_err(
        &evaluate_in_order(&coupled, &[0, 3, 1, 4, 2, 5], &caps).unwrap().amplitudes,
        &coupled_ev,
    ));

    let grid_flat = flatten_to_mps(&grid, &[0, 1, 2, 3], &caps).unwrap();
    let coupled_flat = flatten_to_mps(&coupled, &[0, 1, 2, 3, 4, 5], &caps).unwrap();
    let flat_err = max_err(&grid_flat.to_statevector(&caps).unwrap(), &grid_ev)
        .max(max_err(&coupled_flat.to_statevector(&caps).unwrap(), &coupled_ev));

    let pass = chain_err <= 1e-12 && brute_err <= 1e-10 && order_err <= 1e-12 && flat_err <= 1e-10;
    report(
        7,
        "network contraction consistency",
        pass,
        &format!(
            "chain err {chain_err:.2e}, brute err {brute_err:.2e}, \
             order err {order_err:.2e}, flatten err {flat_err:.2e}"
        ),
    );
}

fn sinkhorn(mut m: RMat, rounds: usize) -> RMat {
    for _ in 0..rounds {
        for i in 0..m.nrows() {
            let s: f64 = m.row(i).sum();
            for j in 0..m.ncols() {
                m[(i, j)] /= s;
            }
        }
        for j in 0..m.ncols() {
            let s: f64 = m.column(j).sum();
            for i in 0..m.nrows() {
                m[(i, j)] /= s;
            }
        }
    }
    m
}

#[test]
fn criterion_8_stochastic_pipeline() {
    let caps = caps();
    let mut rng = ChaCha8Rng::seed_from_u64(8);

    // (a) The stochastic shadow of a balanced unitary is doubly stochastic.
    let h = CMat::from_row_slice(2, 2, &[c64(S, 0.0), c64(S, 0.0), c64(S, 0.0), c64(-S, 0.0)]);
    let sm = stochastic_matrix(&Channel::from_unitary(&h).unwrap());
    let mut balance = 0.0f64;
    for i in 0..2 {
        balance = balance
            .max((sm.row(i).sum() - 1.0).abs())
            .max((sm.column(i).sum() - 1.0).abs());
    }
    let a_ok = balance <= 1e-12;

    // (b) Doubly stochastic matrices split into convex permutation sums.
    let mut split_err = 0.0f64;
    for _ in 0..20 {
        let m = sinkhorn(RMat::from_fn(4, 4, |_, _| 0.1 + rng.random::<f64>()), 300);
        let terms = birkhoff_decompose(&m, 1e-8).unwrap();
        let mut rebuilt = RMat::zeros(4, 4);
        for (w, perm) in &terms {
            for (j, &i) in perm.iter().enumerate() {
                rebuilt[(i, j)] += *w;
            }
        }
        split_err = split_err.max((&m - &rebuilt).abs().max());
    }
    let b_ok = split_err <= 1e-8;

    // (c) A two-step stochastic walk equals its trajectory enumeration.
    let step_a = sinkhorn(RMat::from_row_slice(2, 2, &[0.7, 0.2, 0.3, 0.8]), 200);
    let step_b = sinkhorn(RMat::from_row_slice(2, 2, &[0.4, 0.5, 0.6, 0.5]), 200);
    let spec = LtmSpec {
        kind: MachineKind::Probabilistic,
        proc_dim: 1,
        site_dim: 2,
        tape_len: 2,
        gates: vec![LocalOp::Stochastic(step_a.clone()), LocalOp::Stochastic(step_b.clone())],
        head_start: 0,
        start_proc: 0,
        final_proc: vec![],
        input_sites: vec![0, 1],
        output_sites: vec![0, 1],
    };
    let program = vec![GateStep::new(0, 0, 1), GateStep::new(1, 1, 0)];
    let exact = lptm_run(&spec, &program, &[0, 1], LptmMode::Exact, &caps).unwrap();
    let terms_a = birkhoff_decompose(&step_a, 1e-9).unwrap();
    let terms_b = birkhoff_decompose(&step_b, 1e-9).unwrap();
    let mut trajectory = vec![0.0f64; 4];
    for (wa, pa) in &terms_a {
        for (wb, pb) in &terms_b {
            trajectory[pa[0] * 2 + pb[1]] += wa * wb;
        }
    }
    let walk_l1 = l1(&exact, &trajectory);
    let c_ok = walk_l1 <= 1e-10;

    // (d) Factorization divergence never increases, whatever the seed.
    let mut monotone = true;
    for seed in 0..50 {
        let a = RMat::from_fn(5, 4, |_, _| 0.05 + rng.random::<f64>());
        let res = nmf_kl(&a, 3, NmfOptions { max_iter: 400, tol: 0.0, seed }).unwrap();
        let scale = res.trace.first().copied().unwrap_or(1.0).abs().max(1.0);
        monotone &= res.trace.windows(2).all(|p| p[1] <= p[0] + 1e-10 * scale);
    }

    // (e) Distributions round trip through stochastic factorization.
    let pvec = |w: &[f64]| ProbabilityVector::new(w.to_vec(), 1e-9).unwrap();
    let biases = [0.3, 0.8, 0.5];
    let product: Vec<f64> = (0..8)
        .map(|idx| {
            index_digits(2, 3, idx)
                .iter()
                .zip(&biases)
                .map(|(&b, &p)| if b == 1 { p } else { 1.0 - p })
                .product()
        })
        .collect();
    let correlated = vec![0.5, 0.0, 0.0, 0.5];
    let mut fixed_l1 = 0.0f64;
    for (w, d, n) in [(&product, 2usize, 3usize), (&correlated, 2, 2)] {
        let s = prob_to_smps(&pvec(w), d, n, SmpsOptions::default()).unwrap();
        fixed_l1 = fixed_l1.max(l1(smps_to_prob(&s, &caps).unwrap().weights(), w));
    }
    let mut random_l1 = 0.0f64;
    for _ in 0..3 {
        let mut w: Vec<f64> = (0..8).map(|_| rng.random::<f64>()).collect();
        let total: f64 = w.iter().sum();
        for x in &mut w {
            *x /= total;
        }
        let s = prob_to_smps(&pvec(&w), 2, 3, SmpsOptions::default()).unwrap();
        random_l1 = random_l1.max(l1(smps_to_prob(&s, &caps).unwrap().weights(), &w));
    }
    let e_ok = fixed_l1 <= 1e-10 && random_l1 <= 1e-10;

    // (f) The generation program reproduces the distribution and parks the
    // correlator on a point mass.
    let mut w: Vec<f64> = (0..8).map(|_| 0.05 + rng.random::<f64>()).collect();
    let total: f64 = w.iter().sum();
    for x in &mut w {
        *x /= total;
    }
    let s = prob_to_smps(&pvec(&w), 2, 3, SmpsOptions::default()).unwrap();
    let prog = decouple_stochastic(&s).unwrap();
    let (tape, corr) = propagate_program(&prog, &caps).unwrap();
    let gen_l1 = l1(&tape, &w);
    let peak = corr.iter().cloned().fold(0.0, f64::max);
    let f_ok = gen_l1 <= 1e-6 && peak >= 1.0 - 1e-8;

    let pass = a_ok && b_ok && c_ok && monotone && e_ok && f_ok;
    report(
        8,
        "stochastic pipeline",
        pass,
        &format!(
            "balance {balance:.2e}, split err {split_err:.2e}, walk L1 {walk_l1:.2e}, \
             50 monotone traces {monotone}, round trip L1 {fixed_l1:.2e} \
             (random {random_l1:.2e}), generation L1 {gen_l1:.2e}, peak {peak:.12}"
        ),
    );
}

fn write_json(dir: &Path, name: &str, value: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn run_cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_seqtape"))
        .args(args)
        .arg("--quiet")
        .env_remove("SEQTAPE_CAP")
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "seqtape {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn criterion_9_deterministic_cli_reruns() {
    let dir = TempDir::new().unwrap();
    let z = [0.0, 0.0];
    let s = [S, 0.0];
    let one = [1.0, 0.0];
    let state = write_json(
        dir.path(),
        "pair.json",
        &json!({
            "d": 2,
            "N": 2,
            "boundary": {"type": "projected", "L": [one, z], "R": [one, z]},
            "tensors": [
                [[[s, z], [z, s]], [[z, s], [s, z]]],
                [[[one, z], [z, z]], [[z, one], [z, z]]]
            ]
        }),
    );
    let program = write_json(
        dir.path(),
        "gen.json",
        &json!({
            "kind": "smps",
            "Q": 1,
            "control": {
                "d": 2,
                "chi": 1,
                "maps": [
                    [[0.3, 0.3], [0.7, 0.7]],
                    [[0.5, 0.5], [0.5, 0.5]]
                ],
                "init_correlator": [1.0]
            }
        }),
    );
    let matrix = write_json(dir.path(), "mat.json", &json!({"matrix": [[0.4, 0.1], [0.1, 0.4]]}));

    let circuit = dir.path().join("circuit.json");
    let counts = dir.path().join("counts.json");
    let factors = dir.path().join("factors.json");
    let mut snapshots: Vec<Vec<Vec<u8>>> = Vec::new();
    for _ in 0..2 {
        run_cli(&["compile", state.to_str().unwrap(), "--out", circuit.to_str().unwrap()]);
        run_cli(&[
            "simulate",
            program.to_str().unwrap(),
            "--mode",
            "sample",
            "--shots",
            "256",
            "--seed",
            "11",
            "--out",
            counts.to_str().unwrap(),
        ]);
        run_cli(&["nmf", matrix.to_str().unwrap(), "--k", "2", "--out", factors.to_str().unwrap()]);
        snapshots.push(vec![
            std::fs::read(&circuit).unwrap(),
            std::fs::read(&counts).unwrap(),
            std::fs::read(&factors).unwrap(),
        ]);
    }
    let pass = snapshots[0] == snapshots[1];
    report(
        9,
        "byte-identical reruns",
        pass,
        "compile, sampled simulate, and factorization outputs compared across two runs",
    );
}
