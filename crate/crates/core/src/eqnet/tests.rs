use super::*;
use crate::irreps::{rotate_features, Rotation};
use crate::testutil::*;
use crate::vec3::sub;
use rand::Rng;

fn param_indices(params: &ParamSet, prefix: &str) -> Vec<usize> {
    params
        .specs
        .iter()
        .filter(|s| s.name.starts_with(prefix))
        .flat_map(|s| s.offset..s.offset + s.len())
        .collect()
}

fn random_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn assert_close(analytic: f64, numeric: f64, what: &str) {
    let err = (analytic - numeric).abs();
    assert!(err <= 1e-6 * (1.0 + numeric.abs()), "{what}: analytic {analytic} numeric {numeric}");
}

fn layer_gradcheck(l_max: usize, heads: usize, mask_rate: f64, seed: u64) {
    let mut cfg = small_config(l_max);
    cfg.heads = heads;
    let (net, params) = net_and_params(cfg, seed);
    let mut r = rng(seed + 1);
    let sys = random_system(&mut r, 6, 3.0, 0.8);
    let geom = net.geometry(&sys).unwrap();
    let mask: Option<Vec<bool>> = (mask_rate > 0.0).then(|| (0..geom.edges.len()).map(|_| r.gen::<f64>() > mask_rate).collect());
    let h = random_vec(&mut r, geom.num_nodes() * net.node_dim());
    let w = random_vec(&mut r, h.len());
    let slots = &net.layers[0];
    let loss = |p: &[f64], h: &[f64]| {
        let radial = radial_forward(&slots.radial, p, &geom.rbf, &geom.env);
        let out = net.layer_ctx(slots, p, &geom, &radial, mask.as_deref()).forward(h, None);
        dot(&out, &w)
    };

    let p = &params.data;
    let radial = radial_forward(&slots.radial, p, &geom.rbf, &geom.env);
    let ctx = net.layer_ctx(slots, p, &geom, &radial, mask.as_deref());
    let mut tape = LayerTape::default();
    ctx.forward(&h, Some(&mut tape));
    let mut d_h = vec![0.0; h.len()];
    let mut grads = vec![0.0; p.len()];
    let mut d_rad = vec![0.0; radial.out.len()];
    ctx.backward(&h, &tape, &w, &mut d_h, Some((&mut grads, &mut d_rad)));
    radial_backward(&slots.radial, p, &geom.rbf, &geom.env, &radial, &d_rad, &mut grads);

    for i in 0..h.len() {
        let num = central_diff(|x| loss(p, x), &h, i, 1e-6);
        assert_close(d_h[i], num, &format!("d_h[{i}]"));
    }
    for i in param_indices(&params, "layer0.") {
        let num = central_diff(|q| loss(q, &h), p, i, 1e-6);
        assert_close(grads[i], num, params.name_of(i).unwrap());
    }
    // untouched arrays stay zero
    for i in param_indices(&params, "layer1.") {
        assert_eq!(grads[i], 0.0);
    }
}

#[test]
fn layer_adjoint_matches_finite_differences() {
    layer_gradcheck(1, 1, 0.0, 3);
    layer_gradcheck(2, 2, 0.0, 4);
}

#[test]
fn layer_adjoint_with_dropout_mask() {
    layer_gradcheck(2, 1, 0.4, 5);
}

#[test]
fn embedding_adjoint_matches_finite_differences() {
    let (net, params) = net_and_params(small_config(2), 11);
    let mut r = rng(12);
    let sys = random_system(&mut r, 5, 3.0, 0.8);
    let geom = net.geometry(&sys).unwrap();
    let w = random_vec(&mut r, geom.num_nodes() * net.node_dim());
    let loss = |p: &[f64]| dot(&net.embed_forward(p, &geom).0, &w);
    let (_, cache) = net.embed_forward(&params.data, &geom);
    let mut grads = vec![0.0; params.len()];
    net.embed_backward(&params.data, &geom, &cache, &w, &mut grads);
    for i in param_indices(&params, "embed.") {
        let num = central_diff(loss, &params.data, i, 1e-6);
        assert_close(grads[i], num, params.name_of(i).unwrap());
    }
}

#[test]
fn head_adjoints_match_finite_differences() {
    for l_max in [1, 2] {
        let (net, params) = net_and_params(small_config(l_max), 21 + l_max as u64);
        let mut r = rng(22);
        let sys = random_system(&mut r, 5, 3.0, 0.8);
        let geom = net.geometry(&sys).unwrap();
        let h = random_vec(&mut r, geom.num_nodes() * net.node_dim());
        let a = 0.7;
        let b: Vec<Vec3> = (0..geom.num_nodes()).map(|_| [r.gen(), r.gen(), r.gen()]).collect();
        let loss = |p: &[f64], h: &[f64]| {
            let radial = radial_forward(&net.force.radial, p, &geom.rbf, &geom.env);
            let (f, _) = net.force_forward(p, &geom, &radial, h, None);
            a * net.energy_forward(p, h) + f.iter().zip(&b).map(|(x, y)| crate::vec3::dot(*x, *y)).sum::<f64>()
        };
        let p = &params.data;
        let radial = radial_forward(&net.force.radial, p, &geom.rbf, &geom.env);
        let mut tape = LayerTape::default();
        let (_, hf) = net.force_forward(p, &geom, &radial, &h, Some(&mut tape));
        let mut d_h = vec![0.0; h.len()];
        let mut grads = vec![0.0; p.len()];
        net.energy_backward(p, &h, a, &mut d_h, Some(&mut grads));
        net.force_backward(p, &geom, &radial, &h, &hf, &tape, &b, &mut d_h, Some(&mut grads));
        for i in 0..h.len() {
            let num = central_diff(|x| loss(p, x), &h, i, 1e-6);
            assert_close(d_h[i], num, &format!("d_h[{i}]"));
        }
        let mut idx = param_indices(&params, "energy.");
        idx.extend(param_indices(&params, "force."));
        for i in idx {
            let num = central_diff(|q| loss(q, &h), p, i, 1e-6);
            assert_close(grads[i], num, params.name_of(i).unwrap());
        }
    }
}

#[test]
fn explicit_forward_is_invariant_and_equivariant() {
    for (seed, l_max) in [(1u64, 1usize), (2, 2), (3, 3)] {
        let (net, params) = net_and_params(small_config(l_max), seed);
        let mut r = rng(seed + 100);
        let sys = random_system(&mut r, 7, 3.5, 0.9);
        let (e0, f0) = net.explicit_forward(&params, &sys).unwrap();
        for _ in 0..3 {
            let rot = Rotation::random(&mut r);
            let t = [r.gen_range(-5.0..5.0), r.gen_range(-5.0..5.0), r.gen_range(-5.0..5.0)];
            let (e1, f1) = net.explicit_forward(&params, &transform(&sys, &rot, t)).unwrap();
            assert!((e1 - e0).abs() <= 1e-10 * (1.0 + e0.abs()), "{e0} vs {e1}");
            for (a, b) in f0.iter().zip(&f1) {
                let want = rot.apply(*a);
                assert!(norm(sub(want, *b)) <= 1e-10 * (1.0 + norm(want)));
            }
        }
    }
}

#[test]
fn layer_output_rotates_and_attention_is_invariant() {
    let (net, params) = net_and_params(small_config(2), 8);
    let mut r = rng(9);
    let sys = random_system(&mut r, 6, 3.0, 0.8);
    let geom = net.geometry(&sys).unwrap();
    let h = net.embed(&params, &geom);
    let rot = Rotation::random(&mut r);
    let sys_r = transform(&sys, &rot, [0.3, -1.0, 2.0]);
    let geom_r = net.geometry(&sys_r).unwrap();
    let h_r = net.embed(&params, &geom_r);
    let layout = net.layout();
    let dn = net.node_dim();
    let rotate = |x: &[f64]| -> Vec<f64> {
        let mut y = x.to_vec();
        for c in y.chunks_exact_mut(dn) {
            rotate_features(&layout, c, &rot).unwrap();
        }
        y
    };
    let max_diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(max_diff(&rotate(&h), &h_r) < 1e-10);
    let out = net.attention_layer(&params, &geom, 0, &h, None).unwrap();
    let out_r = net.attention_layer(&params, &geom_r, 0, &h_r, None).unwrap();
    assert!(max_diff(&rotate(&out), &out_r) < 1e-10);
    let a = net.attention_weights(&params, &geom, 0, &h, None).unwrap();
    let a_r = net.attention_weights(&params, &geom_r, 0, &h_r, None).unwrap();
    assert!(max_diff(&a, &a_r) < 1e-10);
}

#[test]
fn attention_weights_sum_to_one_per_target() {
    let (net, params) = net_and_params(small_config(1), 31);
    let mut r = rng(32);
    let sys = random_system(&mut r, 8, 3.0, 0.8);
    let geom = net.geometry(&sys).unwrap();
    let h = net.embed(&params, &geom);
    let heads = net.cfg.heads;
    let a = net.attention_weights(&params, &geom, 0, &h, None).unwrap();
    for t in 0..geom.num_nodes() {
        let range = geom.edges.incoming(t);
        if range.is_empty() {
            continue;
        }
        for hd in 0..heads {
            let s: f64 = range.clone().map(|e| a[e * heads + hd]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn equal_logits_and_distances_give_uniform_weights() {
    let (net, mut params) = net_and_params(small_config(1), 41);
    let k = net.layers[0].att_k;
    k.of_mut(&mut params.data).fill(0.0);
    // square: each atom sees two neighbors at the same distance
    let d = 1.2;
    let sys = AtomicSystem::new(vec![6, 6, 6, 6], vec![[0.0, 0.0, 0.0], [d, 0.0, 0.0], [d, d, 0.0], [0.0, d, 0.0]]).unwrap();
    let mut cfg = net.cfg.clone();
    cfg.r_cut = 1.5;
    let net = EqNet::new(cfg).unwrap();
    let geom = net.geometry(&sys).unwrap();
    let h = net.embed(&params, &geom);
    let a = net.attention_weights(&params, &geom, 0, &h, None).unwrap();
    assert_eq!(geom.edges.len(), 8);
    for v in a {
        assert_eq!(v, 0.5);
    }
}

#[test]
fn all_edges_dropped_is_passthrough() {
    let (net, params) = net_and_params(small_config(2), 51);
    let sys = random_system(&mut rng(52), 5, 3.0, 0.8);
    let geom = net.geometry(&sys).unwrap();
    let h = net.embed(&params, &geom);
    let mask = vec![false; geom.edges.len()];
    assert_eq!(net.attention_layer(&params, &geom, 0, &h, Some(&mask)).unwrap(), h);
    assert!(net.attention_layer(&params, &geom, 0, &h, Some(&[true])).is_err() || geom.edges.len() == 1);
}

#[test]
fn isolated_atom_embeds_type_only() {
    let (net, mut params) = net_and_params(small_config(2), 61);
    let sys = AtomicSystem::new(vec![7], vec![[0.0; 3]]).unwrap();
    let geom = net.geometry(&sys).unwrap();
    let x = net.embed(&params, &geom);
    let c = net.cfg.channels;
    assert_eq!(&x[..c], &net.embed.table.of(&params.data)[6 * c..7 * c]);
    assert!(x[c..].iter().all(|&v| v == 0.0));

    net.embed.alpha.of_mut(&mut params.data)[0] = 0.0;
    let pair = AtomicSystem::new(vec![7, 1], vec![[0.0; 3], [1.0, 0.0, 0.0]]).unwrap();
    let moved = AtomicSystem::new(vec![7, 1], vec![[0.0; 3], [0.0, 1.7, 0.3]]).unwrap();
    assert_eq!(
        net.embed(&params, &net.geometry(&pair).unwrap()),
        net.embed(&params, &net.geometry(&moved).unwrap())
    );
}

#[test]
fn energy_is_extensive_over_separated_copies() {
    let (net, params) = net_and_params(small_config(2), 71);
    let sys = random_system(&mut rng(72), 4, 2.0, 0.8);
    let mut pos = sys.positions.clone();
    let mut z = sys.atomic_numbers.clone();
    for p in &sys.positions {
        pos.push([p[0] + 50.0, p[1], p[2]]);
    }
    z.extend(sys.atomic_numbers.iter());
    let double = AtomicSystem::new(z, pos).unwrap();
    let (e1, f1) = net.explicit_forward(&params, &sys).unwrap();
    let (e2, f2) = net.explicit_forward(&params, &double).unwrap();
    assert!((e2 - 2.0 * e1).abs() < 1e-12 * (1.0 + e1.abs()));
    for i in 0..4 {
        assert!(norm(sub(f1[i], f2[i])) < 1e-12);
        assert!(norm(sub(f1[i], f2[i + 4])) < 1e-12);
    }
}

#[test]
fn permutation_permutes_forces_and_keeps_energy() {
    let (net, params) = net_and_params(small_config(2), 81);
    let sys = random_system(&mut rng(82), 6, 3.0, 0.8);
    let perm = [3, 0, 5, 1, 4, 2];
    let p_sys = AtomicSystem::new(
        perm.iter().map(|&i| sys.atomic_numbers[i]).collect(),
        perm.iter().map(|&i| sys.positions[i]).collect(),
    )
    .unwrap();
    let (e, f) = net.explicit_forward(&params, &sys).unwrap();
    let (ep, fp) = net.explicit_forward(&params, &p_sys).unwrap();
    assert!((e - ep).abs() <= 1e-12 * (1.0 + e.abs()));
    for (k, &i) in perm.iter().enumerate() {
        assert!(norm(sub(f[i], fp[k])) <= 1e-12 * (1.0 + norm(f[i])));
    }
}

#[test]
fn outputs_are_continuous_across_the_cutoff() {
    let (net, params) = net_and_params(small_config(2), 91);
    let r_cut = net.cfg.r_cut;
    let base = vec![[0.0, 0.0, 0.0], [1.1, 0.2, 0.0], [0.3, 1.0, 0.4]];
    let at = |x: f64| {
        let mut pos = base.clone();
        pos.push([x, 0.1, 0.05]);
        net.explicit_forward(&params, &AtomicSystem::new(vec![6, 1, 8, 1], pos).unwrap()).unwrap()
    };
    // atom 3 crosses the cutoff of atom 0
    let x_cross = (r_cut * r_cut - 0.1 * 0.1 - 0.05 * 0.05).sqrt();
    let (e_in, f_in) = at(x_cross - 1e-7);
    let (e_out, f_out) = at(x_cross + 1e-7);
    assert!((e_in - e_out).abs() < 1e-6);
    for (a, b) in f_in.iter().zip(&f_out) {
        assert!(norm(sub(*a, *b)) < 1e-6);
    }
}

#[test]
fn zero_layers_rejected() {
    let mut cfg = small_config(1);
    cfg.layers = 0;
    assert!(EqNet::new(cfg).is_err());
    let mut cfg = small_config(1);
    cfg.channels = 3;
    assert!(EqNet::new(cfg).is_err());
}

#[test]
fn species_beyond_table_rejected() {
    let (net, _) = net_and_params(small_config(1), 1);
    let sys = AtomicSystem::new(vec![9], vec![[0.0; 3]]).unwrap();
    assert!(matches!(net.geometry(&sys), Err(Error::OutOfRange(_))));
}

#[test]
fn init_is_deterministic_and_named() {
    let (net, p1) = net_and_params(small_config(2), 5);
    let p2 = net.init_params(&mut rng(5));
    assert_eq!(p1, p2);
    assert_eq!(p1.len(), net.num_params());
    let alpha = p1.get("embed.alpha").unwrap()[0];
    assert!((alpha - 1.0 / 3.0f64.sqrt()).abs() < 1e-15);
    assert!(p1.get("layer1.w_out").is_some());
    assert!(p1.get("layer2.w_out").is_none());
}
