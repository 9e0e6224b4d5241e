use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geogrid::{Heading, RelCoord, TILE_CENTERS};
use crate::numcore::{compare_gradients, GradCheckConfig, Tape, Tensor, EPS};

fn randomized(cfg: ModelConfig, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Model::new(cfg, &mut rng).unwrap();
    for p in m.params.entries.iter_mut() {
        if p.name.ends_with(".bias") || p.name == "nonlocal.z" {
            let s = p.value.shape().to_vec();
            p.value = Tensor::uniform(&s, -0.3, 0.3, &mut rng);
        }
    }
    m
}

fn image(side: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(&[3, side, side], 0.0, 1.0, rng)
}

fn tiles(side: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    (0..4).map(|_| image(side, rng)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn naive_softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn naive_gluf(x: &Tensor, centers: &Tensor) -> Vec<f64> {
    let (hw, d) = (x.shape()[0], x.shape()[1]);
    let k = centers.shape()[0];
    let mut desc = vec![vec![0.0; d]; k];
    for p in 0..hw {
        let xp = x.row(p);
        let logits: Vec<f64> =
            (0..k).map(|j| dot(centers.row(j), xp) - dot(centers.row(j), centers.row(j)).sqrt()).collect();
        let w = naive_softmax(&logits);
        for j in 0..k {
            let rho = dot(centers.row(j), xp).max(0.0);
            for c in 0..d {
                desc[j][c] += w[j] * rho * xp[c];
            }
        }
    }
    let mut flat = Vec::new();
    for dk in &desc {
        let n = dot(dk, dk).sqrt().max(EPS);
        flat.extend(dk.iter().map(|v| v / n));
    }
    let n = dot(&flat, &flat).sqrt().max(EPS);
    flat.iter().map(|v| v / n).collect()
}

fn naive_psg(u: &[f64], b_tilde: &Tensor) -> (Vec<f64>, [f64; 2]) {
    let cos: Vec<f64> = (0..4)
        .map(|j| dot(u, b_tilde.row(j)) / (dot(u, u).sqrt() * dot(b_tilde.row(j), b_tilde.row(j)).sqrt() + EPS))
        .collect();
    let alpha = naive_softmax(&cos);
    let mut q = [0.0; 2];
    for j in 0..4 {
        q[0] += alpha[j] * TILE_CENTERS[j][0];
        q[1] += alpha[j] * TILE_CENTERS[j][1];
    }
    (alpha, q)
}

fn vec_mat(v: &[f64], m: &Tensor) -> Vec<f64> {
    let (r, c) = (m.shape()[0], m.shape()[1]);
    (0..c).map(|j| (0..r).map(|i| v[i] * m.data()[i * c + j]).sum()).collect()
}

fn naive_ca(u: &[f64], b_tilde: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor) -> Vec<f64> {
    let d = u.len() as f64;
    let q = vec_mat(u, wq);
    let keys: Vec<Vec<f64>> = (0..4).map(|j| vec_mat(b_tilde.row(j), wk)).collect();
    let vals: Vec<Vec<f64>> = (0..4).map(|j| vec_mat(b_tilde.row(j), wv)).collect();
    let a = naive_softmax(&keys.iter().map(|k| dot(&q, k) / d.sqrt()).collect::<Vec<_>>());
    (0..u.len()).map(|c| (0..4).map(|j| a[j] * vals[j][c]).sum()).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn production_path_matches_naive_oracles() {
    let m = randomized(ModelConfig::tiny(3, 4, 16), 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let t = m.forward(&image(16, &mut rng), TileInput::Raw(&tiles(16, &mut rng))).unwrap();
        let u = naive_gluf(&t.x, m.params.get("gluf.centers").unwrap());
        assert!(max_diff(&u, t.u.data()) < 1e-9);
        let (alpha, q) = naive_psg(t.u.data(), &t.b_tilde);
        assert!(max_diff(&alpha, t.alpha.data()) < 1e-9);
        assert!(max_diff(&q, t.q.data()) < 1e-9);
        let p = &m.params;
        let f = naive_ca(
            t.u.data(),
            &t.b_tilde,
            p.get("attn.query").unwrap(),
            p.get("attn.key").unwrap(),
            p.get("attn.value").unwrap(),
        );
        assert!(max_diff(&f, t.f_ca.data()) < 1e-9);
    }
}

#[test]
fn trace_shapes_and_invariants() {
    let m = randomized(ModelConfig::desk(), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t = m.forward(&image(64, &mut rng), TileInput::Raw(&tiles(64, &mut rng))).unwrap();
    assert_eq!(t.f.shape(), &[64, 32]);
    assert_eq!(t.u.shape(), &[1, 128]);
    assert_eq!(t.phi.shape(), &[1, 258]);
    assert!((t.u.norm() - 1.0).abs() < 1e-9);
    for k in 0..4 {
        let n = t.d_tilde.as_ref().unwrap().row(k).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(n == 0.0 || (n - 1.0).abs() < 1e-9);
    }
    assert!((t.alpha.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(t.q.data().iter().all(|v| v.abs() <= 1.0));
    assert_eq!(&t.phi.data()[..128], t.u.data());
    assert_eq!(&t.phi.data()[128..256], t.f_ca.data());
    assert_eq!(&t.phi.data()[256..], t.q.data());
    let w = t.w.unwrap();
    for p in 0..64 {
        assert!((w.row(p).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn backbone_of_zero_input_with_zero_biases_is_zero() {
    let m = Model::new(ModelConfig::desk(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let tape = Tape::new();
    let b = m.bind(&tape, false);
    let x = tape.constant(Tensor::zeros(&[3, 64, 64]));
    let f = m.backbone(&tape, &b, x).unwrap();
    assert_eq!(tape.shape(f), vec![64, 32]);
    assert!(tape.value(f).data().iter().all(|v| *v == 0.0));
    assert!(m.forward(&Tensor::zeros(&[3, 2, 2]), TileInput::Features(&[])).is_err());
}

#[test]
fn nonlocal_identity_symmetry_and_equivariance() {
    let m = randomized(ModelConfig::tiny(2, 4, 8), 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f = Tensor::uniform(&[6, 4], -1.0, 1.0, &mut rng);
    let run = |m: &Model, f: &Tensor| {
        let tape = Tape::new();
        let b = m.bind(&tape, false);
        let fv = tape.constant(f.clone());
        tape.value(m.nonlocal(&tape, &b, fv).unwrap())
    };
    let mut zero = m.clone();
    *zero.params.get_mut("nonlocal.z").unwrap() = Tensor::zeros(&[2, 4]);
    assert_eq!(run(&zero, &f), f);

    // constant features: every site attends uniformly, so the residual term is identical per site
    let c = Tensor::filled(&[6, 4], 0.7);
    let xc = run(&m, &c);
    for p in 1..6 {
        assert!(max_diff(xc.row(p), xc.row(0)) < 1e-12);
    }

    let perm = [3usize, 0, 5, 1, 4, 2];
    let pf = Tensor::new(&[6, 4], perm.iter().flat_map(|&i| f.row(i).to_vec()).collect()).unwrap();
    let (x, px) = (run(&m, &f), run(&m, &pf));
    for (r, &i) in perm.iter().enumerate() {
        assert!(max_diff(px.row(r), x.row(i)) < 1e-12);
    }
}

#[test]
fn cluster_assignment_degenerate_cases() {
    let tape = Tape::new();
    let m = Model::new(ModelConfig::tiny(1, 4, 8), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let x = tape.constant(Tensor::uniform(&[5, 4], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
    let c1 = tape.constant(Tensor::uniform(&[1, 4], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2)));
    let (w, _) = m.cluster_assign(&tape, x, c1).unwrap();
    assert!(tape.value(w).data().iter().all(|v| (*v - 1.0).abs() < 1e-15));

    // a_1 = (1, 0), a_2 = (0, 1), x = (1, 1): equal logits
    let x = tape.constant(Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap());
    let c = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let (w, _) = m.cluster_assign(&tape, x, c).unwrap();
    assert_eq!(tape.value(w).data(), &[0.5, 0.5]);
}

#[test]
fn single_site_single_cluster_reduces_to_normalized_feature() {
    let m = Model::new(ModelConfig::tiny(1, 4, 8), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let tape = Tape::new();
    let mut b = m.bind(&tape, false);
    b.vars[m.params.layout.centers] = tape.constant(Tensor::matrix(1, 4, vec![1.0, 1.0, 1.0, 1.0]).unwrap());
    let xp = [0.5, 2.0, 0.1, 1.0];
    let x = tape.constant(Tensor::matrix(1, 4, xp.to_vec()).unwrap());
    let (u, ..) = m.gluf(&tape, &b, x).unwrap();
    let n = dot(&xp, &xp).sqrt();
    assert!(max_diff(tape.value(u).data(), &xp.map(|v| v / n)) < 1e-12);
}

#[test]
fn psg_symmetry_and_saturation() {
    let m = Model::new(ModelConfig::tiny(1, 4, 8), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let tape = Tape::new();
    let u = tape.constant(Tensor::matrix(1, 4, vec![0.3, -0.2, 0.9, 0.1]).unwrap());
    let same = tape.constant(Tensor::new(&[4, 4], [1.0, 2.0, 3.0, 4.0].repeat(4)).unwrap());
    let (alpha, q) = m.psg(&tape, u, same).unwrap();
    assert!(tape.value(alpha).data().iter().all(|v| (*v - 0.25).abs() < 1e-15));
    assert!(tape.value(q).data().iter().all(|v| v.abs() < 1e-15));

    // scaled cosine logits: +s for tile 2, -s elsewhere, s = 50
    let s = 50.0;
    let cos = tape.constant(Tensor::vector(&[-s, -s, s, -s]));
    let alpha = tape.softmax(cos, 0).unwrap();
    let q = tape.matmul(tape.reshape(alpha, &[1, 4]).unwrap(), tape.constant(tile_centers())).unwrap();
    let qv = tape.value(q);
    assert!(max_diff(qv.data(), &TILE_CENTERS[2]) < 1e-6);
}

#[test]
fn cross_attention_convexity_and_shift_invariance() {
    let m = randomized(ModelConfig::tiny(1, 4, 8), 9);
    let tape = Tape::new();
    let b = m.bind(&tape, false);
    let u = tape.constant(Tensor::uniform(&[1, 4], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
    let same = tape.constant(Tensor::new(&[4, 4], [0.2, -0.4, 1.0, 0.5].repeat(4)).unwrap());
    let f = tape.value(m.cross_attention(&tape, &b, u, same).unwrap());
    let v = vec_mat(&[0.2, -0.4, 1.0, 0.5], m.params.get("attn.value").unwrap());
    assert!(max_diff(f.data(), &v) < 1e-12);

    let logits = Tensor::vector(&[0.3, -1.0, 2.0, 0.5]);
    let shifted = Tensor::vector(&[10.3, 9.0, 12.0, 10.5]);
    let a = tape.value(tape.softmax(tape.constant(logits), 0).unwrap());
    let b2 = tape.value(tape.softmax(tape.constant(shifted), 0).unwrap());
    assert!(a.max_abs_diff(&b2) < 1e-12);
}

#[test]
fn zero_parameters_give_zero_heads_and_rce() {
    let mut m = Model::new(ModelConfig::tiny(2, 4, 8), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for p in m.params.entries.iter_mut() {
        p.value = Tensor::zeros(p.value.shape());
    }
    let tape = Tape::new();
    let b = m.bind(&tape, false);
    assert!(tape.value(m.rce(&tape, &b).unwrap()).data().iter().all(|v| *v == 0.0));
    let phi = tape.constant(Tensor::filled(&[1, 18], 0.4));
    let (p, h) = m.heads(&tape, &b, phi).unwrap();
    assert_eq!(tape.value(p).data(), &[0.0, 0.0]);
    assert_eq!(tape.value(h).data(), &[0.0, 0.0]);
}

#[test]
fn identical_inputs_with_symmetric_parameters_give_centered_q() {
    let mut m = randomized(ModelConfig::tiny(2, 4, 8), 3);
    m.config.toggles.use_rce = false;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img = image(8, &mut rng);
    let t = m.forward(&img, TileInput::Raw(&[img.clone(), img.clone(), img.clone(), img.clone()])).unwrap();
    assert!(t.q.data().iter().all(|v| v.abs() < 1e-15));
}

#[test]
fn loss_values() {
    let m = Model::new(ModelConfig::tiny(1, 2, 8), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let tape = Tape::new();
    let h = Heading::from_degrees(30.0);
    let rel = RelCoord::new(0.2, -0.5);
    let exact_p = tape.constant(Tensor::matrix(1, 2, vec![0.2, -0.5]).unwrap());
    let exact_h = tape.constant(Tensor::matrix(1, 2, h.vec.to_vec()).unwrap());
    assert_eq!(tape.value(m.loss(&tape, exact_p, exact_h, rel, h).unwrap()).item(), 0.0);

    // residuals of 1.5 in both coordinates give smooth L1 = 1 for each term
    let p = tape.constant(Tensor::matrix(1, 2, vec![1.7, -2.0]).unwrap());
    let hh = tape.constant(Tensor::matrix(1, 2, vec![h.vec[0] + 1.5, h.vec[1] - 1.5]).unwrap());
    assert!((tape.value(m.loss(&tape, p, hh, rel, h).unwrap()).item() - 1.0).abs() < 1e-12);
}

#[test]
fn heading_angle_convention() {
    assert_eq!(Heading::from_vector([1.0, 0.0]).unwrap().theta, 0.0);
    assert_eq!(Heading::from_vector([0.0, 1.0]).unwrap().theta, 90.0);
}

#[test]
fn operating_mode_matches_training_mode() {
    let m = randomized(ModelConfig::tiny(2, 4, 16), 10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let uvp = image(16, &mut rng);
    let raw = tiles(16, &mut rng);
    let feats: Vec<Tensor> = raw.iter().map(|t| m.encode_value(t).unwrap()).collect();
    let a = m.forward(&uvp, TileInput::Raw(&raw)).unwrap();
    let b = m.forward(&uvp, TileInput::Features(&feats)).unwrap();
    assert!(a.p_hat.max_abs_diff(&b.p_hat) <= 1e-12);
    assert!(a.h_raw.max_abs_diff(&b.h_raw) <= 1e-12);
    assert!(a.alpha.max_abs_diff(&b.alpha) <= 1e-12);
}

fn model_gradcheck(m: &Model, coords_per_param: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = m.config.patch_px;
    let uvp = image(side, &mut rng);
    let raw = tiles(side, &mut rng);
    let rel = RelCoord::new(0.3, -0.6);
    let heading = Heading::from_degrees(140.0);
    let (_, analytic) = m.loss_and_grads(&uvp, TileInput::Raw(&raw), rel, heading).unwrap();
    let inputs = m.params.tensors();
    let mut coords = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        for _ in 0..coords_per_param.min(t.len()) {
            coords.push((i, rand::Rng::random_range(&mut rng, 0..t.len())));
        }
    }
    let value = |xs: &[Tensor]| {
        let mut mm = m.clone();
        mm.params.set_tensors(xs.to_vec()).unwrap();
        mm.loss_value(&uvp, TileInput::Raw(&raw), rel, heading).unwrap()
    };
    compare_gradients(value, &inputs, &analytic, &coords, GradCheckConfig { tol: 1e-4, ..Default::default() })
        .max_rel_err
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let m = randomized(ModelConfig::tiny(2, 4, 16), 12);
    let err = model_gradcheck(&m, 4, 13);
    assert!(err < 1e-4, "max rel err {err}");
}

#[test]
fn disabled_branches_receive_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let uvp = image(16, &mut rng);
    let raw = tiles(16, &mut rng);
    for (name, toggles) in Toggles::ablation_grid() {
        let mut m = randomized(ModelConfig::tiny(2, 4, 16), 15);
        m.config.toggles = toggles;
        let (loss, grads) =
            m.loss_and_grads(&uvp, TileInput::Raw(&raw), RelCoord::new(0.1, 0.2), Heading::from_degrees(10.0)).unwrap();
        assert!(loss.is_finite());
        let zero = |prefix: &str| {
            m.params
                .entries
                .iter()
                .zip(&grads)
                .filter(|(p, _)| p.name.starts_with(prefix))
                .all(|(_, g)| g.data().iter().all(|v| *v == 0.0))
        };
        assert_eq!(zero("nonlocal") && zero("gluf"), !toggles.use_gluf, "{name}");
        assert_eq!(zero("rce"), !toggles.use_rce, "{name}");
        assert_eq!(zero("attn"), !toggles.use_ca, "{name}");
        assert!(!zero("pos_head") && !zero("heading_head") && !zero("backbone"), "{name}");
        let t = m.forward(&uvp, TileInput::Raw(&raw)).unwrap();
        assert_eq!(t.phi.len(), m.config.phi_len());
        if !toggles.use_psg {
            assert_eq!(t.q.data(), &[0.0, 0.0]);
        }
    }
}

#[test]
fn paper_scale_shapes() {
    let cfg = ModelConfig::paper_scale();
    let shapes = param_shapes(&cfg);
    let get = |n: &str| shapes.iter().find(|s| s.0 == n).unwrap().1.clone();
    assert_eq!(get("pos_head.0.weight"), vec![2050, 1024]);
    assert_eq!(get("rce.2.weight"), vec![256, 1024]);
    assert_eq!(get("attn.query"), vec![1024, 1024]);
}
