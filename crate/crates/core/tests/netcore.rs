mod common;

use abp_core::gates::{GateConfig, GateKind};
use abp_core::netcore::{
    build_network, Arch, BlockState, GateMask, LayerShape, MarkSource, NetworkSpec,
};
use abp_core::autograd::{Mode, Tape};
use abp_core::tensor::Tensor;
use common::*;

fn micro(kind: GateKind, seed: u64) -> abp_core::netcore::GatedNetwork {
    let mut net = build_network(Arch::Micro.spec(5), GateConfig::of_kind(kind), seed).unwrap();
    perturb_bn(net.store_mut(), seed + 100);
    net
}

fn forced_logits(net: &abp_core::netcore::GatedNetwork, x: &Tensor, mask: &GateMask, m: f32) -> Tensor {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = net.forward_with(&mut tape, xv, mask, Mode::Eval, MarkSource::Forced(m)).unwrap();
    tape.value(out.logits).clone()
}

#[test]
fn forced_half_marks_match_straight_line_oracle() {
    let net = micro(GateKind::Conv, 3);
    let mut mask = GateMask::initial(net.spec());
    mask.prune(6).unwrap();
    let x = random_input(&[2, 3, 16, 16], 7);
    let got = forced_logits(&net, &x, &mask, 0.5);
    let bb = &net.backbone;
    for (n, img) in to_maps(&x).iter().enumerate() {
        let mut h = stem(bb, img);
        for i in 0..bb.blocks.len() {
            h = match mask.state(i) {
                BlockState::Pruned => h,
                BlockState::Fixed => block(bb, i, &h),
                BlockState::Active => blend(&block(bb, i, &h), &h, 0.5),
            };
        }
        let want = head(bb, &h);
        for (c, w) in want.iter().enumerate() {
            let g = got.data()[n * want.len() + c] as f64;
            assert!((g - w).abs() < 1e-4, "sample {n} class {c}: {g} vs {w}");
        }
    }
}

#[test]
fn all_fixed_matches_oracle() {
    let net = micro(GateKind::Recur, 4);
    let x = random_input(&[1, 3, 16, 16], 8);
    let (got, marks) = net.infer(&x, &GateMask::all_fixed(net.spec())).unwrap();
    assert!(marks.iter().all(Option::is_none));
    let bb = &net.backbone;
    let mut h = stem(bb, &to_maps(&x)[0]);
    for i in 0..bb.blocks.len() {
        h = block(bb, i, &h);
    }
    for (g, w) in got.data().iter().zip(head(bb, &h)) {
        assert!((*g as f64 - w).abs() < 1e-4);
    }
}

#[test]
fn all_prunable_pruned_leaves_stem_exempt_and_classifier() {
    let net = micro(GateKind::Conv, 5);
    let mut mask = GateMask::initial(net.spec());
    for i in mask.prunable() {
        mask.prune(i).unwrap();
    }
    assert_eq!(mask.surviving(), vec![3, 7]);
    let x = random_input(&[2, 3, 16, 16], 9);
    let (got, marks) = net.infer(&x, &mask).unwrap();
    assert!(marks.iter().all(Option::is_none));
    let bb = &net.backbone;
    for (n, img) in to_maps(&x).iter().enumerate() {
        let h = stem(bb, img);
        let h = block(bb, 3, &h);
        let h = block(bb, 7, &h);
        for (c, w) in head(bb, &h).iter().enumerate() {
            assert!((got.data()[n * 5 + c] as f64 - w).abs() < 1e-4);
        }
    }
}

#[test]
fn marks_lie_strictly_inside_unit_interval() {
    for kind in [GateKind::Conv, GateKind::Recur] {
        let net = micro(kind, 6);
        let mask = GateMask::initial(net.spec());
        let (_, marks) = net.infer(&random_input(&[4, 3, 16, 16], 1), &mask).unwrap();
        for (i, m) in marks.iter().enumerate() {
            match mask.state(i) {
                BlockState::Active => {
                    let m = m.as_ref().expect("active block reports a mark");
                    assert_eq!(m.len(), 4);
                    assert!(m.iter().all(|&v| v > 0.0 && v < 1.0));
                }
                _ => assert!(m.is_none()),
            }
        }
    }
}

#[test]
fn eval_forward_is_batch_invariant() {
    for kind in [GateKind::Conv, GateKind::Recur] {
        let net = micro(kind, 7);
        let mask = GateMask::initial(net.spec());
        let x = random_input(&[3, 3, 16, 16], 2);
        let (all, marks) = net.infer(&x, &mask).unwrap();
        for n in 0..3 {
            let (one, one_marks) = net.infer(&x.rows(n, 1), &mask).unwrap();
            assert!(one.max_abs_diff(&all.rows(n, 1)) <= 1e-6);
            for (a, b) in marks.iter().zip(&one_marks) {
                if let (Some(a), Some(b)) = (a, b) {
                    assert!((a[n] - b[0]).abs() <= 1e-6);
                }
            }
        }
    }
}

#[test]
fn repeated_forwards_are_bit_identical() {
    let net = micro(GateKind::Recur, 8);
    let mask = GateMask::initial(net.spec());
    let x = random_input(&[2, 3, 16, 16], 3);
    let (a, ma) = net.infer(&x, &mask).unwrap();
    let (b, mb) = net.infer(&x, &mask).unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(ma, mb);
}

#[test]
fn recurrent_marks_are_causal() {
    // changing a later block's parameters must not move earlier marks
    let net = micro(GateKind::Recur, 9);
    let mask = GateMask::initial(net.spec());
    let x = random_input(&[2, 3, 16, 16], 4);
    let (_, before) = net.infer(&x, &mask).unwrap();
    let mut changed = net.clone();
    for name in ["block5.conv1.weight", "block8.conv2.weight", "gate.5.proj.weight"] {
        let id = changed.store().find(name).unwrap_or_else(|| panic!("{name}"));
        for v in changed.store_mut().get_mut(id).data_mut() {
            *v = -*v * 3.0 + 0.1;
        }
    }
    let (_, after) = changed.infer(&x, &mask).unwrap();
    for i in 0..5 {
        assert_eq!(before[i], after[i], "block {i}");
    }
    assert_ne!(before[6], after[6]);
}

#[test]
fn pruned_block_gets_no_gradient() {
    let net = micro(GateKind::Conv, 10);
    let mut mask = GateMask::initial(net.spec());
    mask.prune(1).unwrap();
    let x = random_input(&[2, 3, 16, 16], 5);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let out = net.forward(&mut tape, xv, &mask, Mode::Train).unwrap();
    assert!(out.marks[1].is_none());
    let loss = tape.cross_entropy(out.logits, &[0, 1]);
    let grads = tape.backward(loss);
    for (id, p) in net.store().iter() {
        let touched = grads.get(id).is_some();
        if p.name.starts_with("block1.") || p.name.starts_with("gate.1.") {
            assert!(!touched, "{} received a gradient", p.name);
        }
        if p.name.starts_with("gate.2.") && p.name.ends_with("weight") {
            assert!(touched, "{} should train", p.name);
        }
    }
}

#[test]
fn mismatched_chain_names_the_block_pair() {
    let mut spec = NetworkSpec::cifar_resnet(LayerShape::new(3, 8, 8), &[2, 2], &[4, 8], 2);
    spec.blocks[2].in_shape = LayerShape::new(5, 8, 8);
    let err = build_network(spec, GateConfig::default(), 0).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("block 1") && msg.contains("block 2"), "{msg}");
}

#[test]
fn one_block_two_classes() {
    let spec = NetworkSpec::cifar_resnet(LayerShape::new(3, 8, 8), &[1], &[4], 2);
    let net = build_network(spec, GateConfig::of_kind(GateKind::Conv), 1).unwrap();
    assert_eq!(net.spec().len(), 1);
    let (logits, _) = net.infer(&random_input(&[1, 3, 8, 8], 0), &GateMask::initial(net.spec())).unwrap();
    assert_eq!(logits.shape(), &[1, 2]);
}
