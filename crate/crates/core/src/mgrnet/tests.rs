use super::*;
use crate::ndgrad::sigmoid;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Direct cross-correlation of one `[Cin,H,W]` image.
#[allow(clippy::too_many_arguments)]
fn conv_naive(x: &[f64], cin: usize, h: usize, w: usize, wt: &[f64], cout: usize, k: usize, bias: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; cout * oh * ow];
    for o in 0..cout {
        for r in 0..oh {
            for c in 0..ow {
                let mut acc = bias[o];
                for i in 0..cin {
                    for dr in 0..k {
                        for dc in 0..k {
                            let (y, x0) = ((r * stride + dr) as isize - pad as isize, (c * stride + dc) as isize - pad as isize);
                            if y >= 0 && x0 >= 0 && (y as usize) < h && (x0 as usize) < w {
                                acc += wt[((o * cin + i) * k + dr) * k + dc] * x[(i * h + y as usize) * w + x0 as usize];
                            }
                        }
                    }
                }
                out[(o * oh + r) * ow + c] = acc;
            }
        }
    }
    out
}

fn mat_vec(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    b.iter().enumerate().map(|(j, bj)| bj + (0..n).map(|i| w[j * n + i] * x[i]).sum::<f64>()).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn default_region_windows() {
    let cfg = NetConfig::default();
    assert_eq!(cfg.deep_dims(), (16, 25));
    let win = cfg.region_windows().unwrap();
    let cols: Vec<_> = win[..3].iter().map(|(r, c)| { assert_eq!(*r, 0..16); c.clone() }).collect();
    let rows: Vec<_> = win[3..].iter().map(|(r, c)| { assert_eq!(*c, 0..25); r.clone() }).collect();
    assert_eq!(cols, vec![0..13, 6..19, 12..25]);
    assert_eq!(rows, vec![0..8, 4..12, 8..16]);
}

#[test]
fn windows_cover_every_row_and_column() {
    for cfg in [NetConfig::default(), NetConfig::desk(), NetConfig::compact(), NetConfig::tiny()] {
        let (h, w) = cfg.deep_dims();
        let win = cfg.region_windows().unwrap();
        let mut col_hits = vec![0; w];
        for (_, c) in &win[..3] {
            assert!(c.end <= w);
            c.clone().for_each(|i| col_hits[i] += 1);
        }
        let mut row_hits = vec![0; h];
        for (r, _) in &win[3..] {
            assert!(r.end <= h);
            r.clone().for_each(|i| row_hits[i] += 1);
        }
        assert!(col_hits.iter().all(|&n| n >= 1));
        assert!(row_hits.iter().all(|&n| n >= 1));
        let ov = win[0].1.end - win[1].1.start;
        assert_eq!(ov, cfg.region_width_overlap);
        let ov = win[3].0.end - win[4].0.start;
        assert_eq!(ov, cfg.region_height_overlap);
    }
}

#[test]
fn invalid_configs_rejected() {
    let bad = NetConfig { attention_dim: 256, ..NetConfig::default() };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let bad = NetConfig { region_width: 12, ..NetConfig::default() };
    assert!(bad.validate().is_err());
    let bad = NetConfig { region_height_overlap: 8, ..NetConfig::default() };
    assert!(bad.validate().is_err());
    assert!(NetConfig::default().validate().is_ok());
    assert!(NetConfig::desk().validate().is_ok());
    assert!(NetConfig::tiny().validate().is_ok());
}

#[test]
fn parameter_count_matches_store() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for cfg in [
        NetConfig::default(),
        NetConfig::desk(),
        NetConfig::tiny(),
        NetConfig { fusion: FusionMode::Concat, ..NetConfig::tiny() },
    ] {
        let s = init_params(&cfg, &mut rng).unwrap();
        assert_eq!(s.num_scalars(), parameter_count(&cfg));
    }
    assert_eq!(parameter_count(&NetConfig::default()), 4_330_272);
}

#[test]
fn zero_input_default_shape_trace() {
    let cfg = NetConfig::default();
    let mut store = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    for name in store.names().map(String::from).collect::<Vec<_>>() {
        if name.starts_with("conv") && name.ends_with(".bias") {
            store.value_mut(&name).unwrap().data_mut().fill(0.0);
        }
    }
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 1, 128, 200]));
    let maps = forward_base(&mut g, &store, &cfg, x, BnMode::Train, &mut BnTrace::default()).unwrap();
    let shapes: Vec<Vec<usize>> = maps.iter().map(|&m| g.shape(m).to_vec()).collect();
    assert_eq!(
        shapes,
        vec![vec![1, 32, 64, 100], vec![1, 64, 32, 50], vec![1, 128, 32, 50], vec![1, 256, 16, 25]]
    );
    for m in maps {
        assert!(g.value(m).data().iter().all(|&v| v == 0.0));
    }
    let bad = g.constant(Tensor::zeros(&[1, 1, 64, 100]));
    assert!(forward_base(&mut g, &store, &cfg, bad, BnMode::Train, &mut BnTrace::default()).is_err());
}

fn tiny_setup(seed: u64, n: usize) -> (NetConfig, ParameterStore, Tensor) {
    let cfg = NetConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = init_params(&cfg, &mut rng).unwrap();
    let x = Tensor::new(
        vec![n, 1, cfg.input_height, cfg.input_width],
        (0..n * cfg.input_height * cfg.input_width).map(|_| rng.random_range(0.0..1.0)).collect(),
    )
    .unwrap();
    (cfg, store, x)
}

#[test]
fn fusion_absorbing_and_identity() {
    let (cfg, mut store, _) = tiny_setup(3, 1);
    let c = cfg.channels();
    let (mh, mw) = cfg.mid_dims();
    let (h, w) = cfg.deep_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let f2 = rand_tensor(&mut rng, &[2, cfg.conv_channels[1], mh, mw]);
    let f3 = rand_tensor(&mut rng, &[2, cfg.conv_channels[2], mh, mw]);
    let f51 = rand_tensor(&mut rng, &[2, c, h, w]);

    let mut g = Graph::new();
    let (a, b, z) = (g.constant(f2.clone()), g.constant(f3.clone()), g.constant(Tensor::zeros(&[2, c, h, w])));
    let out = fuse_multilevel(&mut g, &store, &cfg, "g", a, b, z).unwrap();
    assert!(g.value(out).data().iter().all(|&v| v == 0.0));

    for lvl in ["eps2", "eps3"] {
        store.value_mut(&format!("fuse_g.{lvl}.weight")).unwrap().data_mut().fill(0.0);
        store.value_mut(&format!("fuse_g.{lvl}.bias")).unwrap().data_mut().fill(1.0);
    }
    let mut g = Graph::new();
    let (a, b, f) = (g.constant(f2), g.constant(f3), g.constant(f51.clone()));
    let out = fuse_multilevel(&mut g, &store, &cfg, "g", a, b, f).unwrap();
    assert_eq!(g.value(out), &f51);
}

#[test]
fn fusion_matches_composition_oracle() {
    let (cfg, store, _) = tiny_setup(5, 1);
    let [_, c2, c3, c] = cfg.conv_channels;
    let (mh, mw) = cfg.mid_dims();
    let (h, w) = cfg.deep_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let f2 = rand_tensor(&mut rng, &[1, c2, mh, mw]);
    let f3 = rand_tensor(&mut rng, &[1, c3, mh, mw]);
    let f51 = rand_tensor(&mut rng, &[1, c, h, w]);
    let mut g = Graph::new();
    let (a, b, f) = (g.constant(f2.clone()), g.constant(f3.clone()), g.constant(f51.clone()));
    let out = fuse_multilevel(&mut g, &store, &cfg, "r", a, b, f).unwrap();

    let v = |n: &str| store.value(n).unwrap().data().to_vec();
    let e2 = conv_naive(f2.data(), c2, mh, mw, &v("fuse_r.eps2.weight"), c, 3, &v("fuse_r.eps2.bias"), 2, 1);
    let e3 = conv_naive(f3.data(), c3, mh, mw, &v("fuse_r.eps3.weight"), c, 3, &v("fuse_r.eps3.bias"), 2, 1);
    assert_eq!(e2.len(), c * h * w);
    for i in 0..e2.len() {
        let expected = e2[i] * e3[i] * f51.data()[i];
        assert!((g.value(out).data()[i] - expected).abs() < 1e-12);
    }
}

#[test]
fn concat_fusion_projects_back_to_c() {
    let cfg = NetConfig { fusion: FusionMode::Concat, ..NetConfig::tiny() };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let store = init_params(&cfg, &mut rng).unwrap();
    let mut g = Graph::new();
    let x = g.constant(rand_tensor(&mut rng, &[2, 1, 32, 56]));
    let fp = forward_graph(&mut g, &store, &cfg, x, BnMode::Train).unwrap();
    assert_eq!(g.shape(fp.f52g), &[2, 8, 4, 7]);
}

#[test]
fn attention_weights_open_unit_interval() {
    let (cfg, store, _) = tiny_setup(8, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (h, w) = cfg.deep_dims();
    for _ in 0..20 {
        let mut g = Graph::new();
        let a = g.constant(rand_tensor(&mut rng, &[3, 8, h, w]));
        let b = g.constant(rand_tensor(&mut rng, &[3, 8, h, w]));
        let (_, _, st) = grca(&mut g, &store, a, b).unwrap();
        for m in [st.mg, st.mr] {
            assert!(g.value(m).data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}

#[test]
fn attention_half_weights_halve_the_map() {
    let (cfg, mut store, _) = tiny_setup(10, 1);
    for n in ["grca.recover_g.weight", "grca.recover_g.bias"] {
        store.value_mut(n).unwrap().data_mut().fill(0.0);
    }
    let (h, w) = cfg.deep_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let fg = rand_tensor(&mut rng, &[2, 8, h, w]);
    let mut g = Graph::new();
    let a = g.constant(fg.clone());
    let b = g.constant(rand_tensor(&mut rng, &[2, 8, h, w]));
    let (ag, _, st) = grca(&mut g, &store, a, b).unwrap();
    assert!(g.value(st.mg).data().iter().all(|&v| v == 0.5));
    for (o, i) in g.value(ag).data().iter().zip(fg.data()) {
        assert_eq!(*o, 0.5 * i);
    }
}

#[test]
fn attention_matches_step_by_step_oracle() {
    let (cfg, store, _) = tiny_setup(12, 1);
    let (c, v) = (cfg.channels(), cfg.attention_dim);
    let (h, w) = cfg.deep_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let fg = rand_tensor(&mut rng, &[1, c, h, w]);
    let fr = rand_tensor(&mut rng, &[1, c, h, w]);
    let mut g = Graph::new();
    let (a, b) = (g.constant(fg.clone()), g.constant(fr.clone()));
    let (ag, ar, st) = grca(&mut g, &store, a, b).unwrap();

    let p = |n: &str| store.value(n).unwrap().data().to_vec();
    let d1 = |t: &Tensor| -> Vec<f64> { t.data().chunks(h * w).map(mean).collect() };
    let (d1g, d1r) = (d1(&fg), d1(&fr));
    let relu = |x: Vec<f64>| x.into_iter().map(|v| v.max(0.0)).collect::<Vec<_>>();
    let d2g = relu(mat_vec(&p("grca.reduce_g.weight"), &p("grca.reduce_g.bias"), &d1g));
    let d2r = relu(mat_vec(&p("grca.reduce_r.weight"), &p("grca.reduce_r.bias"), &d1r));
    assert_eq!(d2g.len(), v);
    let df: Vec<f64> = d2g.iter().zip(&d2r).map(|(a, b)| a * b).collect();
    let mg: Vec<f64> = mat_vec(&p("grca.recover_g.weight"), &p("grca.recover_g.bias"), &df).into_iter().map(sigmoid).collect();
    let mr: Vec<f64> = mat_vec(&p("grca.recover_r.weight"), &p("grca.recover_r.bias"), &df).into_iter().map(sigmoid).collect();

    let close = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
    assert!(close(g.value(st.d1g).data(), &d1g));
    assert!(close(g.value(st.d1r).data(), &d1r));
    assert!(close(g.value(st.d2g).data(), &d2g));
    assert!(close(g.value(st.d2r).data(), &d2r));
    assert!(close(g.value(st.df).data(), &df));
    assert!(close(g.value(st.mg).data(), &mg));
    assert!(close(g.value(st.mr).data(), &mr));
    for ch in 0..c {
        for i in 0..h * w {
            let j = ch * h * w + i;
            assert!((g.value(ag).data()[j] - mg[ch] * fg.data()[j]).abs() < 1e-12);
            assert!((g.value(ar).data()[j] - mr[ch] * fr.data()[j]).abs() < 1e-12);
        }
    }
}

#[test]
fn global_embedding_properties() {
    let (cfg, mut store, _) = tiny_setup(14, 1);
    let (h, w) = cfg.deep_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let f = rand_tensor(&mut rng, &[1, 8, h, w]);
    let mut g = Graph::new();
    let a = g.constant(f.clone());
    let e = embed_global(&mut g, &store, a).unwrap();
    assert_eq!(g.shape(e), &[1, cfg.embedding_dim]);
    let base = g.value(e).clone();

    let scaled = Tensor::new(f.shape().to_vec(), f.data().iter().map(|v| v * 3.7).collect()).unwrap();
    let mut g = Graph::new();
    let a = g.constant(scaled);
    let e = embed_global(&mut g, &store, a).unwrap();
    assert!(g.value(e).max_abs_diff(&base) < 1e-12);

    store.value_mut("head_g.weight").unwrap().data_mut().fill(0.0);
    let mut g = Graph::new();
    let a = g.constant(f);
    let e = embed_global(&mut g, &store, a).unwrap();
    assert_eq!(g.value(e).data(), store.value("head_g.bias").unwrap().data());

    let mut g = Graph::new();
    let z = g.constant(Tensor::zeros(&[1, 8, h, w]));
    assert!(matches!(embed_global(&mut g, &store, z), Err(Error::DegenerateVector { .. })));
}

#[test]
fn regional_embeddings_match_oracle() {
    let (cfg, mut store, _) = tiny_setup(16, 1);
    let (h, w) = cfg.deep_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let f = rand_tensor(&mut rng, &[1, 8, h, w]);
    let mut g = Graph::new();
    let a = g.constant(f.clone());
    let regions = divide_regions(&mut g, &cfg, a).unwrap();
    let embs = embed_regions(&mut g, &store, &regions).unwrap();
    assert_eq!(embs.len(), 6);
    for (i, ((rows, cols), &e)) in cfg.region_windows().unwrap().into_iter().zip(&embs).enumerate() {
        let pooled: Vec<f64> = (0..8)
            .map(|ch| {
                let mut s = 0.0;
                for r in rows.clone() {
                    for c in cols.clone() {
                        s += f.data()[(ch * h + r) * w + c];
                    }
                }
                s / (rows.len() * cols.len()) as f64
            })
            .collect();
        let norm = pooled.iter().map(|v| v * v).sum::<f64>().sqrt();
        let unit: Vec<f64> = pooled.iter().map(|v| v / norm).collect();
        let p = |n: String| store.value(&n).unwrap().data().to_vec();
        let expected = mat_vec(&p(format!("head_r{}.weight", i + 1)), &p(format!("head_r{}.bias", i + 1)), &unit);
        assert_eq!(g.shape(e), &[1, cfg.embedding_dim]);
        for (x, y) in g.value(e).data().iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    // identical maps through identical heads give identical embeddings
    for i in 2..=6 {
        for part in ["weight", "bias"] {
            let src = store.value(&format!("head_r1.{part}")).unwrap().clone();
            *store.value_mut(&format!("head_r{i}.{part}")).unwrap() = src;
        }
    }
    let mut g = Graph::new();
    let m = g.constant(rand_tensor(&mut rng, &[1, 8, 2, 3]));
    let embs = embed_regions(&mut g, &store, &[m; 6]).unwrap();
    for e in &embs[1..] {
        assert_eq!(g.value(*e), g.value(embs[0]));
    }
}

#[test]
fn forward_produces_seven_embeddings_deterministically() {
    let (cfg, store, x) = tiny_setup(18, 3);
    let images: Vec<Tensor> = x
        .data()
        .chunks(32 * 56)
        .map(|c| Tensor::new(vec![1, 32, 56], c.to_vec()).unwrap())
        .collect();
    let refs: Vec<&Tensor> = images.iter().collect();
    let a = embed_images(&store, &cfg, &refs, 2).unwrap();
    let b = embed_images(&store, &cfg, &refs, 3).unwrap();
    assert_eq!(a.len(), 3);
    for (ea, eb) in a.iter().zip(&b) {
        assert_eq!(ea.regional.len(), 6);
        assert_eq!(ea.global.len(), cfg.embedding_dim);
        assert!(ea.regional.iter().all(|r| r.len() == cfg.embedding_dim));
        assert!(ea.global.iter().chain(ea.regional.iter().flatten()).all(|v| v.is_finite()));
        for (u, v) in ea.global.iter().chain(ea.regional.iter().flatten()).zip(eb.global.iter().chain(eb.regional.iter().flatten())) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
    }
}

#[test]
fn eval_matches_train_when_running_stats_equal_batch_stats() {
    let (cfg, mut store, x) = tiny_setup(19, 4);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let train = forward_graph(&mut g, &store, &cfg, xv, BnMode::Train).unwrap();
    assert_eq!(train.bn.moments.len(), BN_LAYERS.len());
    let train_out: Vec<Tensor> = train.branches().iter().map(|&v| g.value(v).clone()).collect();

    let mut g2 = Graph::new();
    let xv2 = g2.constant(x.clone());
    let eval = forward_graph(&mut g2, &store, &cfg, xv2, BnMode::Eval).unwrap();
    let before: f64 = eval.branches().iter().zip(&train_out).map(|(&v, t)| g2.value(v).max_abs_diff(t)).fold(0.0, f64::max);
    assert!(before > 1e-3);

    for (name, m) in &train.bn.moments {
        store.buffer_mut(&format!("{name}.running_mean")).unwrap().data_mut().copy_from_slice(&m.mean);
        store.buffer_mut(&format!("{name}.running_var")).unwrap().data_mut().copy_from_slice(&m.var);
    }
    let mut g3 = Graph::new();
    let xv3 = g3.constant(x);
    let eval = forward_graph(&mut g3, &store, &cfg, xv3, BnMode::Eval).unwrap();
    for (&v, t) in eval.branches().iter().zip(&train_out) {
        assert!(g3.value(v).max_abs_diff(t) < 1e-12);
    }
}

#[test]
fn running_stats_move_toward_batch_moments() {
    let (cfg, mut store, x) = tiny_setup(20, 2);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let fp = forward_graph(&mut g, &store, &cfg, xv, BnMode::Train).unwrap();
    update_bn_stats(&mut store, &fp.bn).unwrap();
    let (name, m) = &fp.bn.moments[0];
    let rm = store.buffer(&format!("{name}.running_mean")).unwrap();
    for (r, bm) in rm.data().iter().zip(&m.mean) {
        assert!((r - 0.1 * bm).abs() < 1e-15);
    }
}
