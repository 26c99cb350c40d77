use flowvip::focal::{multi_head_attention, partition_windows, unpartition_windows, AttentionMode, FocalAttention, SplitGeom, WindowSpec};
use flowvip::geom::{bilinear_warp, mod_deform_conv, DeformInputs, DeformSpec};
use flowvip::nn::ParamStore;
use flowvip::propagation::{propagate_backward, propagate_forward, Alignment, Fusion, PropagationCell};
use flowvip::tensor::concat;
use flowvip::verify::jitter_store;
use flowvip::{Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Reverse the leading axis.
fn reverse0(x: &Tensor) -> Tensor {
    let idx: Vec<usize> = (0..x.shape()[0]).rev().collect();
    Tensor::stack(&idx.iter().map(|&i| x.index0(i)).collect::<Vec<_>>()).unwrap()
}

fn no_observer() -> impl FnMut(&Tensor) {
    |_| {}
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn zero_flow_warp_is_exact_identity(n in 1usize..3, h in 1usize..7, w in 1usize..7, c in 1usize..4, seed in any::<u64>()) {
        let g = Graph::new();
        let src = Tensor::uniform(&[n, h, w, c], -1.0, 1.0, &mut rng(seed));
        let out = bilinear_warp(g.constant(src.clone()), g.constant(Tensor::zeros(&[n, h, w, 2]))).unwrap();
        prop_assert_eq!(out.value().data().to_vec(), src.data().to_vec());
    }

    #[test]
    fn integer_flow_warp_reads_clamped_neighbour(h in 2usize..7, w in 2usize..7, dx in -3i64..4, dy in -3i64..4, seed in any::<u64>()) {
        let g = Graph::new();
        let src = Tensor::uniform(&[1, h, w, 2], 0.0, 1.0, &mut rng(seed));
        let flow = Tensor::from_fn(&[1, h, w, 2], |i| if i % 2 == 0 { dx as f64 } else { dy as f64 });
        let out = bilinear_warp(g.constant(src.clone()), g.constant(flow)).unwrap().value();
        for y in 0..h {
            for x in 0..w {
                let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                let sx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                for ch in 0..2 {
                    prop_assert_eq!(out.at(&[0, y, x, ch]), src.at(&[0, sy, sx, ch]));
                }
            }
        }
    }

    #[test]
    fn window_partition_is_a_bijection(wt in 1usize..3, wh in 1usize..3, ww in 1usize..3, st in 1usize..3, sh in 1usize..3, sw in 1usize..3, c in 1usize..3) {
        let win = WindowSpec { t: st, h: sh, w: sw };
        let grid = (wt * st, wh * sh, ww * sw);
        let x = Tensor::from_fn(&[grid.0, grid.1, grid.2, c], |i| i as f64);
        let g = Graph::new();
        let windows = partition_windows(g.constant(x.clone()), win).unwrap();
        prop_assert_eq!(windows.shape(), vec![wt * wh * ww, win.len(), c]);
        let mut seen: Vec<f64> = windows.value().data().to_vec();
        seen.sort_by(f64::total_cmp);
        prop_assert_eq!(&seen, x.data());
        let back = unpartition_windows(windows, win, grid).unwrap();
        prop_assert_eq!(back.value().data().to_vec(), x.data().to_vec());
    }

    #[test]
    fn fold_of_unfold_divided_by_overlap_is_identity(h in 3usize..10, w in 3usize..10, kernel in 1usize..5, stride in 1usize..4, seed in any::<u64>()) {
        let pad = kernel / 2;
        let geom = SplitGeom { kernel, stride, pad };
        prop_assume!(stride <= kernel);
        // Geometries that leave pixels uncovered are rejected up front.
        let Ok(count) = geom.overlap_count(h, w) else {
            return Ok(());
        };
        let x = Tensor::uniform(&[2, h, w, 3], -1.0, 1.0, &mut rng(seed));
        let g = Graph::new();
        let folded = g.constant(x.clone()).unfold2d(kernel, stride, pad).unwrap().fold2d((h, w), kernel, stride, pad).unwrap();
        let back = folded.value();
        for (i, (&a, &b)) in back.data().iter().zip(x.data()).enumerate() {
            let px = (i / 3) % (h * w);
            prop_assert!((a / count.data()[px] - b).abs() < 1e-12);
        }
    }

    #[test]
    fn deformable_conv_with_zero_offsets_matches_conv_in_the_interior(k in prop_oneof![Just(1usize), Just(3)], groups in 1usize..3, seed in any::<u64>()) {
        let (h, w, c_in, c_out) = (6, 7, 2 * groups, 3);
        let spec = DeformSpec { kernel: k, groups };
        let mut r = rng(seed);
        let x = Tensor::uniform(&[1, h, w, c_in], -1.0, 1.0, &mut r);
        let weight = Tensor::uniform(&[k, k, c_in, c_out], -1.0, 1.0, &mut r);
        let bias = Tensor::uniform(&[c_out], -1.0, 1.0, &mut r);
        let g = Graph::new();
        let out = mod_deform_conv(spec, DeformInputs {
            input: g.constant(x.clone()),
            weight: g.constant(weight.clone()),
            bias: g.constant(bias.clone()),
            base_flow: g.constant(Tensor::zeros(&[1, h, w, 2])),
            offsets: g.constant(Tensor::zeros(&[1, h, w, spec.offset_channels()])),
            mask_logits: g.constant(Tensor::full(&[1, h, w, spec.mask_channels()], 60.0)),
        }).unwrap().value();
        let direct = g.constant(x).conv2d(g.constant(weight), Some(g.constant(bias)), 1, k / 2).unwrap().value();
        let r = k / 2;
        for y in r..h - r {
            for xx in r..w - r {
                for o in 0..c_out {
                    prop_assert!((out.at(&[0, y, xx, o]) - direct.at(&[0, y, xx, o])).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn attention_is_equivariant_to_window_order(nw in 1usize..5, l in 1usize..5, heads in 1usize..3, seed in any::<u64>(), rot in 0usize..4) {
        let c = 2 * heads;
        let mut r = rng(seed);
        let q = Tensor::uniform(&[nw, l, c], -1.0, 1.0, &mut r);
        let k = Tensor::uniform(&[nw, l + 1, c], -1.0, 1.0, &mut r);
        let v = Tensor::uniform(&[nw, l + 1, c], -1.0, 1.0, &mut r);
        let perm: Vec<usize> = (0..nw).map(|i| (i + rot) % nw).collect();
        let g = Graph::new();
        let take = |t: &Tensor| g.constant(t.clone()).index_select(0, &perm).unwrap();
        let (plain, _) = multi_head_attention(g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()), heads).unwrap();
        let (permuted, _) = multi_head_attention(take(&q), take(&k), take(&v), heads).unwrap();
        let mut inverse = vec![0; nw];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let restored = permuted.index_select(0, &inverse).unwrap();
        prop_assert!(restored.value().max_abs_diff(&plain.value()) < 1e-14);
    }

    #[test]
    fn fan_out_gradients_accumulate(x in -3.0f64..3.0) {
        // f = x*x + 3x, df/dx = 2x + 3
        let g = Graph::new();
        let v = g.param(Tensor::scalar(x));
        let f = v.mul(v).unwrap().add(v.mul_scalar(3.0).unwrap()).unwrap();
        g.backward(f).unwrap();
        let grad = v.grad().unwrap();
        prop_assert_eq!(grad.shape().to_vec(), v.shape());
        prop_assert!((grad.item().unwrap() - (2.0 * x + 3.0)).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_rows_have_zero_mean_unit_variance(rows in 1usize..5, dim in 2usize..9, seed in any::<u64>()) {
        let x = Tensor::uniform(&[rows, dim], -5.0, 5.0, &mut rng(seed));
        let g = Graph::new();
        let y = g.constant(x).layer_norm(0.0).unwrap().value();
        for r in 0..rows {
            let row = &y.data()[r * dim..(r + 1) * dim];
            let mean = row.iter().sum::<f64>() / dim as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / dim as f64;
            prop_assert!(mean.abs() < 1e-6);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_propagation_is_causal(t in 2usize..5, cut in 1usize..4, seed in any::<u64>()) {
        prop_assume!(cut < t);
        let c = 4;
        let mut store = ParamStore::new();
        let mut r = rng(seed);
        let cell = PropagationCell::new(&mut store, "b", c, DeformSpec { kernel: 3, groups: 2 }, &mut r);
        jitter_store(&mut store, 0.1, &mut r);
        let feats = Tensor::uniform(&[t, 5, 5, c], -1.0, 1.0, &mut r);
        let flows = Tensor::uniform(&[t - 1, 5, 5, 2], -1.5, 1.5, &mut r);
        let mut zeroed = feats.clone();
        let frame = 5 * 5 * c;
        zeroed.data_mut()[..cut * frame].iter_mut().for_each(|v| *v = 0.0);
        let g = Graph::new();
        let p = store.bind(&g, |_| true);
        let run = |f: &Tensor| propagate_backward(&p, &cell, g.constant(f.clone()), Some(g.constant(flows.clone())), Alignment::Deformable, &mut no_observer()).unwrap().value();
        let a = run(&feats);
        let b = run(&zeroed);
        prop_assert_eq!(&a.data()[cut * frame..], &b.data()[cut * frame..]);
    }
}

#[test]
fn propagation_mirror_symmetry() {
    for (seed, alignment) in [(1, Alignment::Deformable), (2, Alignment::FlowWarp), (3, Alignment::Deformable)] {
        let c = 4;
        let mut store = ParamStore::new();
        let mut r = rng(seed);
        let cell = PropagationCell::new(&mut store, "shared", c, DeformSpec { kernel: 3, groups: 2 }, &mut r);
        jitter_store(&mut store, 0.1, &mut r);
        let feats = Tensor::uniform(&[4, 6, 5, c], -1.0, 1.0, &mut r);
        let flows = Tensor::uniform(&[3, 6, 5, 2], -2.0, 2.0, &mut r);
        let g = Graph::new();
        let p = store.bind(&g, |_| true);
        let backward = propagate_backward(&p, &cell, g.constant(feats.clone()), Some(g.constant(flows.clone())), alignment, &mut no_observer())
            .unwrap()
            .value();
        let forward_on_reversed = propagate_forward(
            &p,
            &cell,
            g.constant(reverse0(&feats)),
            Some(g.constant(reverse0(&flows))),
            alignment,
            &mut no_observer(),
        )
        .unwrap()
        .value();
        assert_eq!(reverse0(&forward_on_reversed).data(), backward.data(), "{alignment:?}");
    }
}

#[test]
fn identity_cells_preserve_a_static_video() {
    let c = 3;
    let mut store = ParamStore::new();
    let mut r = rng(9);
    let spec = DeformSpec { kernel: 3, groups: 1 };
    let cell = PropagationCell::new(&mut store, "id", c, spec, &mut r);
    let [m0, m1] = cell.merge_convs().clone();
    let mut w0 = Tensor::zeros(&[3, 3, 2 * c, c]);
    let mut w1 = Tensor::zeros(&[3, 3, c, c]);
    let mut wd = Tensor::zeros(&[3, 3, c, c]);
    for ch in 0..c {
        w0.set(&[1, 1, ch, ch], 0.5);
        w0.set(&[1, 1, c + ch, ch], 0.5);
        w1.set(&[1, 1, ch, ch], 1.0);
        // The initial modulation gate is sigmoid(0) = 0.5.
        wd.set(&[1, 1, ch, ch], 2.0);
    }
    *store.get_mut(m0.weight) = w0;
    *store.get_mut(m0.bias) = Tensor::zeros(&[c]);
    *store.get_mut(m1.weight) = w1;
    *store.get_mut(m1.bias) = Tensor::zeros(&[c]);
    let (dw, db) = cell.deform_params();
    *store.get_mut(dw) = wd;
    *store.get_mut(db) = Tensor::zeros(&[c]);

    let frame = Tensor::uniform(&[1, 8, 8, c], 0.1, 1.0, &mut r);
    let video = Tensor::stack(&vec![frame.index0(0); 5]).unwrap();
    let g = Graph::new();
    let p = store.bind(&g, |_| true);
    let flows = Some(g.constant(Tensor::zeros(&[4, 8, 8, 2])));
    for alignment in [Alignment::Deformable, Alignment::FlowWarp] {
        let mut gates = Vec::new();
        let mut observe = |m: &Tensor| gates.extend_from_slice(m.data());
        let b = propagate_backward(&p, &cell, g.constant(video.clone()), flows, alignment, &mut observe).unwrap();
        let f = propagate_forward(&p, &cell, g.constant(video.clone()), flows, alignment, &mut observe).unwrap();
        assert!(b.value().max_abs_diff(&video) < 1e-5);
        assert!(f.value().max_abs_diff(&video) < 1e-5);
        assert!(gates.iter().all(|&s| s > 0.0 && s < 1.0));
    }
}

#[test]
fn fusion_is_a_per_pixel_linear_map() {
    let mut store = ParamStore::new();
    let mut r = rng(4);
    let fusion = Fusion::new(&mut store, 3, &mut r);
    let a = Tensor::uniform(&[2, 4, 4, 3], -1.0, 1.0, &mut r);
    let b = Tensor::uniform(&[2, 4, 4, 3], -1.0, 1.0, &mut r);
    let g = Graph::new();
    let p = store.bind(&g, |_| true);
    let out = fusion.fuse(&p, g.constant(a.clone()), g.constant(b.clone())).unwrap().value();
    let w = store.get(fusion.conv.weight);
    let bias = store.get(fusion.conv.bias);
    for px in 0..2 * 16 {
        for o in 0..3 {
            let mut want = bias.data()[o];
            for i in 0..3 {
                want += w.at(&[0, 0, i, o]) * a.data()[px * 3 + i] + w.at(&[0, 0, 3 + i, o]) * b.data()[px * 3 + i];
            }
            assert!((out.data()[px * 3 + o] - want).abs() < 1e-12);
        }
    }
    assert!(fusion.fuse(&p, g.constant(a), g.constant(Tensor::zeros(&[2, 4, 4, 2]))).is_err());
}

#[test]
fn focal_attention_commutes_with_swapping_temporal_windows() {
    let mut store = ParamStore::new();
    let mut r = rng(12);
    let win = WindowSpec { t: 1, h: 2, w: 2 };
    let attn = FocalAttention::new(&mut store, "fa", 4, 2, win, &mut r);
    jitter_store(&mut store, 0.05, &mut r);
    let tokens = Tensor::uniform(&[3, 4, 6, 4], -1.0, 1.0, &mut r);
    let order = [2usize, 0, 1];
    let shuffled = Tensor::stack(&order.iter().map(|&i| tokens.index0(i)).collect::<Vec<_>>()).unwrap();
    let g = Graph::new();
    let p = store.bind(&g, |_| true);
    for mode in [AttentionMode::Focal, AttentionMode::Local] {
        let (plain, _) = attn.forward(&p, g.constant(tokens.clone()), mode).unwrap();
        let (moved, _) = attn.forward(&p, g.constant(shuffled.clone()), mode).unwrap();
        let plain = plain.value();
        let moved = moved.value();
        for (dst, &src) in order.iter().enumerate() {
            assert!(moved.index0(dst).max_abs_diff(&plain.index0(src)) < 1e-12, "{mode}");
        }
    }
    // Global attention mixes frames, but is still equivariant to any token
    // permutation because it carries no positional signal.
    let (plain, _) = attn.forward(&p, g.constant(tokens.clone()), AttentionMode::Global).unwrap();
    let (moved, _) = attn.forward(&p, g.constant(shuffled), AttentionMode::Global).unwrap();
    for (dst, &src) in order.iter().enumerate() {
        assert!(moved.value().index0(dst).max_abs_diff(&plain.value().index0(src)) < 1e-12);
    }
}

#[test]
fn focal_score_count_scales_with_windows_not_grid() {
    let mut store = ParamStore::new();
    let mut r = rng(13);
    let win = WindowSpec { t: 2, h: 2, w: 2 };
    let attn = FocalAttention::new(&mut store, "fa", 4, 2, win, &mut r);
    let g = Graph::new();
    let p = store.bind(&g, |_| true);
    let mut per_window = Vec::new();
    for (m, n) in [(4, 4), (6, 8), (8, 8)] {
        let tokens = g.constant(Tensor::zeros(&[2, m, n, 4]));
        let windows = (m / 2 * n / 2) as u64;
        let (_, local) = attn.forward(&p, tokens, AttentionMode::Local).unwrap();
        let (_, focal) = attn.forward(&p, tokens, AttentionMode::Focal).unwrap();
        let (_, global) = attn.forward(&p, tokens, AttentionMode::Global).unwrap();
        per_window.push((local / windows, focal / windows));
        let tokens_total = (2 * m * n) as u64;
        assert_eq!(global, tokens_total * tokens_total);
        assert!(local <= focal && focal <= global);
    }
    assert!(per_window.windows(2).all(|w| w[0] == w[1]), "{per_window:?}");
}

#[test]
fn concat_then_narrow_recovers_parts() {
    let g = Graph::new();
    let a = Tensor::from_fn(&[2, 3, 1], |i| i as f64);
    let b = Tensor::from_fn(&[2, 3, 2], |i| -(i as f64));
    let joined = concat(&[g.constant(a.clone()), g.constant(b.clone())], 2).unwrap();
    assert_eq!(joined.narrow(2, 0, 1).unwrap().value().data(), a.data());
    assert_eq!(joined.narrow(2, 1, 2).unwrap().value().data(), b.data());
}
