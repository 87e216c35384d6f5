use ddghm_core::data::Domain;
use ddghm_core::gradcheck::grad_check;
use ddghm_core::graph::{propagate, readout, GraphSnapshot, NodeKey, PropagationParams, ReadoutParams};
use ddghm_core::params::ParameterStore;
use ddghm_core::tape::Tape;
use ddghm_core::tensor::{sigmoid, Tensor};
use proptest::prelude::*;

type Mat = Vec<Vec<f64>>;

fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| (0..b[0].len()).map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
        .collect()
}

fn add_row(a: &Mat, b: &[f64]) -> Mat {
    a.iter().map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect()).collect()
}

fn zip(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| f(*x, *y)).collect()).collect()
}

fn hcat(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(r, s)| r.iter().chain(s).copied().collect()).collect()
}

fn key(i: usize) -> NodeKey {
    NodeKey::item(Domain::A, i)
}

/// One gated propagation step written out with plain vectors.
fn propagate_oracle(store: &ParameterStore, p: &PropagationParams, a_in: &Mat, a_out: &Mat, h: &Mat) -> Mat {
    let v = |id| to_mat(store.value(id));
    let row = |id| store.value(id).data().to_vec();
    let m_in = add_row(&mm(&mm(a_in, h), &v(p.w_in)), &row(p.b_in));
    let m_out = add_row(&mm(&mm(a_out, h), &v(p.w_out)), &row(p.b_out));
    let a = hcat(&m_in, &m_out);
    let gate = |w, u| -> Mat { zip(&mm(&a, &v(w)), &mm(h, &v(u)), |x, y| sigmoid(x + y)) };
    let z = gate(p.w_z, p.u_z);
    let r = gate(p.w_r, p.u_r);
    let rh = zip(&r, h, |x, y| x * y);
    let cand = zip(&mm(&a, &v(p.w_o)), &mm(&rh, &v(p.u_o)), |x, y| (x + y).tanh());
    let kept = zip(&z, h, |z, h| (1.0 - z) * h);
    zip(&kept, &zip(&z, &cand, |z, c| z * c), |x, y| x + y)
}

#[test]
fn two_node_step_matches_scalar_oracle() {
    for seed in 0..5 {
        let mut store = ParameterStore::new(seed);
        let p = PropagationParams::register(&mut store, "prop", 3).unwrap();
        let h0 = store.insert_uniform("h0", 2, 3, 1).unwrap();
        let snap = GraphSnapshot::new().extend(None, key(0)).extend(Some(key(0)), key(1));
        let mut tape = Tape::new();
        let h = tape.param(&store, h0);
        let out = propagate(&mut tape, &store, &snap, h, &p, 1).unwrap();
        let a_out = vec![vec![0.0, 1.0], vec![0.0, 0.0]];
        let a_in = vec![vec![0.0, 0.0], vec![1.0, 0.0]];
        let want = propagate_oracle(&store, &p, &a_in, &a_out, &to_mat(store.value(h0)));
        let got = to_mat(tape.value(out));
        for (g, w) in got.iter().flatten().zip(want.iter().flatten()) {
            assert!((g - w).abs() < 1e-14);
        }
    }
}

#[test]
fn zero_parameters_halve_states_each_step() {
    let mut store = ParameterStore::new(1);
    let p = PropagationParams::register(&mut store, "prop", 4).unwrap();
    for id in p.ids() {
        let shape = store.value(id).shape().to_vec();
        store.set_value(id, Tensor::zeros(&shape)).unwrap();
    }
    let h0 = store.insert_uniform("h0", 3, 4, 1).unwrap();
    let snap = GraphSnapshot::from_sequence(&[key(0), key(1), key(2), key(0)]);
    for k in [0, 1, 2, 5] {
        let mut tape = Tape::new();
        let h = tape.param(&store, h0);
        let out = propagate(&mut tape, &store, &snap, h, &p, k).unwrap();
        let scale = 0.5f64.powi(k as i32);
        for (g, x) in tape.value(out).data().iter().zip(store.value(h0).data()) {
            assert!((g - scale * x).abs() < 1e-12);
        }
    }
}

#[test]
fn readout_matches_direct_evaluation() {
    let mut store = ParameterStore::new(8);
    let p = ReadoutParams::register(&mut store, "ro", 3).unwrap();
    let h0 = store.insert_uniform("h0", 3, 3, 1).unwrap();
    let positions = [2usize, 0, 2, 1];
    let mut tape = Tape::new();
    let h = tape.param(&store, h0);
    let se = readout(&mut tape, &store, h, &positions, &p).unwrap();

    let hm = to_mat(store.value(h0));
    let v = |id| to_mat(store.value(id));
    let last = &hm[1];
    let q = mm(&vec![last.clone()], &v(p.w1))[0].clone();
    let c = store.value(p.c).data().to_vec();
    let pv = store.value(p.p).data().to_vec();
    let mut se_c = vec![0.0; 3];
    for &pos in &positions {
        let k = mm(&vec![hm[pos].clone()], &v(p.w2))[0].clone();
        let alpha: f64 = (0..3).map(|j| sigmoid(q[j] + k[j] + c[j]) * pv[j]).sum();
        for j in 0..3 {
            se_c[j] += alpha * hm[pos][j];
        }
    }
    let cat: Vec<f64> = se_c.iter().chain(last).copied().collect();
    let want = mm(&vec![cat], &v(p.w3))[0].clone();
    for (g, w) in tape.value(se).data().iter().zip(&want) {
        assert!((g - w).abs() < 1e-14);
    }
}

/// Counts every transition directly and normalizes each occupied row.
fn adjacency_oracle(seq: &[usize]) -> (Mat, Mat) {
    let mut nodes: Vec<usize> = Vec::new();
    for &s in seq {
        if !nodes.contains(&s) {
            nodes.push(s);
        }
    }
    let n = nodes.len();
    let idx = |x: usize| nodes.iter().position(|&y| y == x).unwrap();
    let mut out = vec![vec![0.0; n]; n];
    let mut inn = vec![vec![0.0; n]; n];
    for w in seq.windows(2) {
        out[idx(w[0])][idx(w[1])] += 1.0;
        inn[idx(w[1])][idx(w[0])] += 1.0;
    }
    for m in [&mut out, &mut inn] {
        for row in m.iter_mut() {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|x| *x /= s);
            }
        }
    }
    (out, inn)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn adjacency_matches_counting_oracle(seq in prop::collection::vec(0usize..8, 1..=20)) {
        let keys: Vec<NodeKey> = seq.iter().map(|&i| key(i)).collect();
        let snap = GraphSnapshot::from_sequence(&keys);
        let (out, inn) = adjacency_oracle(&seq);
        prop_assert_eq!(to_mat(&snap.a_out()), out);
        prop_assert_eq!(to_mat(&snap.a_in()), inn);
        for m in [snap.a_out(), snap.a_in()] {
            for r in 0..m.rows() {
                let s: f64 = m.row_slice(r).iter().sum();
                prop_assert!(s == 0.0 || (s - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn composite_operations_pass_finite_differences() {
    let mut store = ParameterStore::new(21);
    let a = store.insert_uniform("a", 3, 4, 1).unwrap();
    let b = store.insert_uniform("b", 4, 2, 1).unwrap();
    let c = store.insert_uniform("c", 1, 2, 1).unwrap();
    let report = grad_check(
        |tape, s| {
            let (a, b, c) = (tape.param(s, a), tape.param(s, b), tape.param(s, c));
            let x = tape.matmul(a, b)?;
            let x = tape.add(x, c)?;
            let y = tape.tanh(x);
            let z = tape.sigmoid(x);
            let w = tape.mul(y, z)?;
            let sm = tape.log_softmax_rows(w)?;
            let t = tape.transpose(a)?;
            let at = tape.matmul_nt(t, t)?;
            let g = tape.gather_rows(at, &[0, 3, 3])?;
            let r = tape.row_sums(g)?;
            let e = tape.exp(r);
            let col = tape.concat_rows(&[e, e])?;
            let cols = tape.reshape(col, &[3, 2])?;
            let both = tape.mul(cols, sm)?;
            let sq = tape.mul(both, both)?;
            let l = tape.sum(sq);
            let one = tape.constant(Tensor::scalar(1.0));
            let l2 = tape.add(l, one)?;
            tape.log(l2)
        },
        &mut store,
        1e-5,
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}
