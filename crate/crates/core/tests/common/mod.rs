//! Straight-line f64 reference evaluation shared by the integration tests.
#![allow(dead_code)]

use abp_core::autograd::BN_EPS;
use abp_core::netcore::{Backbone, Shortcut};
use abp_core::params::{ParamId, ParamStore};
use abp_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `[C][H][W]` feature map in f64.
pub type Map = Vec<Vec<Vec<f64>>>;

pub fn to_maps(x: &Tensor) -> Vec<Map> {
    let s = x.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    (0..b)
        .map(|n| {
            (0..c)
                .map(|ch| {
                    (0..h)
                        .map(|y| (0..w).map(|xx| x.data()[((n * c + ch) * h + y) * w + xx] as f64).collect())
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn p(store: &ParamStore, id: ParamId) -> Vec<f64> {
    store.get(id).data().iter().map(|&v| v as f64).collect()
}

/// 3×3 convolution, padding 1.
pub fn conv3(x: &Map, w: &[f64], c_out: usize, stride: usize) -> Map {
    let c_in = x.len();
    let (h, wd) = (x[0].len(), x[0][0].len());
    let (oh, ow) = ((h - 1) / stride + 1, (wd - 1) / stride + 1);
    let mut out = vec![vec![vec![0.0; ow]; oh]; c_out];
    for o in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for i in 0..c_in {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * stride + ky) as isize - 1;
                            let ix = (ox * stride + kx) as isize - 1;
                            if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= wd {
                                continue;
                            }
                            acc += w[((o * c_in + i) * 3 + ky) * 3 + kx] * x[i][iy as usize][ix as usize];
                        }
                    }
                }
                out[o][oy][ox] = acc;
            }
        }
    }
    out
}

pub fn bn_eval(x: &Map, store: &ParamStore, bn: abp_core::autograd::BnParams) -> Map {
    let (g, b, m, v) = (
        p(store, bn.gamma),
        p(store, bn.beta),
        p(store, bn.running_mean),
        p(store, bn.running_var),
    );
    x.iter()
        .enumerate()
        .map(|(c, plane)| {
            let s = g[c] / (v[c] + BN_EPS as f64).sqrt();
            plane
                .iter()
                .map(|row| row.iter().map(|&e| (e - m[c]) * s + b[c]).collect())
                .collect()
        })
        .collect()
}

pub fn relu(x: &Map) -> Map {
    x.iter()
        .map(|pl| pl.iter().map(|r| r.iter().map(|&v| v.max(0.0)).collect()).collect())
        .collect()
}

pub fn add(a: &Map, b: &Map) -> Map {
    a.iter()
        .zip(b)
        .map(|(pa, pb)| pa.iter().zip(pb).map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x + y).collect()).collect())
        .collect()
}

pub fn blend(out: &Map, input: &Map, m: f64) -> Map {
    out.iter()
        .zip(input)
        .map(|(po, pi)| {
            po.iter()
                .zip(pi)
                .map(|(ro, ri)| ro.iter().zip(ri).map(|(o, i)| o * m + i * (1.0 - m)).collect())
                .collect()
        })
        .collect()
}

fn pad_shortcut(x: &Map, c_out: usize) -> Map {
    let (h, w) = (x[0].len(), x[0][0].len());
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let extra = c_out - x.len();
    let before = extra / 2;
    (0..c_out)
        .map(|c| {
            (0..oh)
                .map(|y| {
                    (0..ow)
                        .map(|xx| {
                            if c < before || c >= before + x.len() {
                                0.0
                            } else {
                                x[c - before][2 * y][2 * xx]
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

pub fn stem(bb: &Backbone, x: &Map) -> Map {
    let s = &bb.store;
    relu(&bn_eval(&conv3(x, &p(s, bb.stem_conv), bb.spec.stem_channels, 1), s, bb.stem_bn))
}

pub fn block(bb: &Backbone, i: usize, x: &Map) -> Map {
    let blk = &bb.blocks[i];
    let s = &bb.store;
    let h = conv3(x, &p(s, blk.conv1), blk.spec.mid_channels, blk.spec.stride);
    let h = relu(&bn_eval(&h, s, blk.bn1));
    let h = conv3(&h, &p(s, blk.conv2), blk.spec.out_shape.channels, 1);
    let h = bn_eval(&h, s, blk.bn2);
    let short = match blk.spec.shortcut {
        Shortcut::Identity => x.clone(),
        Shortcut::PadDownsample => pad_shortcut(x, blk.spec.out_shape.channels),
    };
    relu(&add(&h, &short))
}

pub fn head(bb: &Backbone, f: &Map) -> Vec<f64> {
    let pooled: Vec<f64> = f
        .iter()
        .map(|pl| pl.iter().flatten().sum::<f64>() / (pl.len() * pl[0].len()) as f64)
        .collect();
    let w = p(&bb.store, bb.fc_w);
    let b = p(&bb.store, bb.fc_b);
    (0..b.len())
        .map(|o| b[o] + pooled.iter().enumerate().map(|(i, v)| w[o * pooled.len() + i] * v).sum::<f64>())
        .collect()
}

pub fn random_input(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect())
}

/// Moves running statistics and normalization affine parameters away from
/// their identity initial values so eval-mode tests exercise them.
pub fn perturb_bn(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.name.contains("bn"))
        .map(|(id, p)| (id, p.name.clone()))
        .collect();
    for (id, name) in ids {
        for v in store.get_mut(id).data_mut() {
            *v = if name.ends_with("running_var") {
                rng.random_range(0.5..2.0)
            } else if name.ends_with("weight") {
                rng.random_range(0.5..1.5)
            } else {
                rng.random_range(-0.3..0.3)
            };
        }
    }
}

pub mod tables;

use abp_core::compact::remove_blocks;
use abp_core::netcore::{GateMask, NetworkSpec};
use abp_core::pruner::blocks_to_prune;

/// `spec` with the first `floor(γ·N)` removable blocks gone. Every removable
/// block of a CIFAR ResNet costs the same, so which ones does not matter for
/// the counts.
pub fn pruned_spec(spec: &NetworkSpec, gamma: f64) -> NetworkSpec {
    let prunable = GateMask::initial(spec).prunable();
    let n = blocks_to_prune(spec.len(), gamma);
    remove_blocks(spec, &prunable[..n]).unwrap().0
}
