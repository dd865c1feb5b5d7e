use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use urwkv::data::gen_synthetic;
use urwkv::model::{ConvBnRelu, Model, ModelConfig};
use urwkv::nn::{BatchNorm2d, Module, Slot};
use urwkv::tensor::{Tensor, BN_EPS};
use urwkv::train::{evaluate, train, TrainConfig};

/// Plain `[C, H, W]` feature map for the loop-based reference.
#[derive(Clone)]
struct Map {
    c: usize,
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Map {
    fn at(&self, c: usize, y: isize, x: isize) -> f64 {
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            0.0
        } else {
            self.v[(c * self.h + y as usize) * self.w + x as usize]
        }
    }
}

/// 3x3 convolution, padding 1, no bias.
fn conv3(x: &Map, w: &Tensor<f64>, stride: usize) -> Map {
    let cout = w.shape()[0];
    let (h, wd) = (x.h.div_ceil(stride), x.w.div_ceil(stride));
    let mut v = vec![0.0; cout * h * wd];
    for o in 0..cout {
        for oy in 0..h {
            for ox in 0..wd {
                let mut s = 0.0;
                for i in 0..x.c {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let y = (oy * stride + ky) as isize - 1;
                            let xx = (ox * stride + kx) as isize - 1;
                            s += w.data()[((o * x.c + i) * 3 + ky) * 3 + kx] * x.at(i, y, xx);
                        }
                    }
                }
                v[(o * h + oy) * wd + ox] = s;
            }
        }
    }
    Map {
        c: cout,
        h,
        w: wd,
        v,
    }
}

fn bn_relu(x: Map, bn: &BatchNorm2d<f64>) -> Map {
    let (m, var) = (bn.running_mean.get(), bn.running_var.get());
    let plane = x.h * x.w;
    let mut out = x.clone();
    for c in 0..x.c {
        let g = bn.gamma.value.data()[c];
        let b = bn.beta.value.data()[c];
        for p in 0..plane {
            let z = (x.v[c * plane + p] - m.data()[c]) / (var.data()[c] + BN_EPS).sqrt();
            out.v[c * plane + p] = (g * z + b).max(0.0);
        }
    }
    out
}

fn cbr(x: &Map, l: &ConvBnRelu<f64>, stride: usize) -> Map {
    bn_relu(conv3(x, &l.conv.weight.value, stride), &l.bn)
}

/// Kernel 2, stride 2 transposed convolution with bias; weight `[Cin, Cout, 2, 2]`.
fn up2(x: &Map, w: &Tensor<f64>, b: &Tensor<f64>) -> Map {
    let cout = w.shape()[1];
    let (h, wd) = (2 * x.h, 2 * x.w);
    let mut v = vec![0.0; cout * h * wd];
    for o in 0..cout {
        for y in 0..h {
            for xx in 0..wd {
                let mut s = b.data()[o];
                for i in 0..x.c {
                    let k = w.data()[((i * cout + o) * 2 + y % 2) * 2 + xx % 2];
                    s += k * x.at(i, (y / 2) as isize, (xx / 2) as isize);
                }
                v[(o * h + y) * wd + xx] = s;
            }
        }
    }
    Map {
        c: cout,
        h,
        w: wd,
        v,
    }
}

fn cat(a: &Map, b: &Map) -> Map {
    let mut v = a.v.clone();
    v.extend_from_slice(&b.v);
    Map {
        c: a.c + b.c,
        h: a.h,
        w: a.w,
        v,
    }
}

/// Conv-only U-Net written directly against the weights of `m`.
fn reference_unet(m: &Model<f64>, x: Map) -> Map {
    let mut skips = vec![cbr(&x, &m.stem, 1)];
    let mut cur = skips[0].clone();
    for (i, st) in m.encoder.iter().enumerate() {
        cur = cbr(&cur, &st.down, 2);
        if i + 1 < m.encoder.len() {
            skips.push(cur.clone());
        }
    }
    for st in &m.decoder {
        let skip = skips.pop().unwrap();
        let up = up2(
            &cur,
            &st.up.weight.value,
            &st.up.bias.as_ref().unwrap().value,
        );
        cur = cbr(
            &cbr(&cat(&skip, &up), &st.fusion.first, 1),
            &st.fusion.second,
            1,
        );
    }
    let head = &m.head.weight.value;
    let bias = m.head.bias.as_ref().unwrap().value.data()[0];
    let plane = cur.h * cur.w;
    let v = (0..plane)
        .map(|p| {
            bias + (0..cur.c)
                .map(|c| head.data()[c] * cur.v[c * plane + p])
                .sum::<f64>()
        })
        .collect();
    Map {
        c: 1,
        h: cur.h,
        w: cur.w,
        v,
    }
}

#[test]
fn ablating_darm_and_sase_leaves_a_plain_unet() {
    let mut cfg = ModelConfig {
        stage_widths: Some(vec![8, 16, 24]),
        seed: 4,
        ..ModelConfig::tiny()
    };
    cfg.ablation.darm = false;
    cfg.ablation.sase = false;
    let mut model = Model::<f64>::build(&cfg).unwrap();
    assert!(model.bottleneck.is_none());
    assert!(model.encoder.iter().all(|s| s.sase.is_none()));

    // Perturb every parameter and statistic away from its initial value.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    model.visit_mut("", &mut |_, p| {
        let noise = Tensor::randn(p.value.shape().to_vec(), 0.1, &mut rng);
        p.value = p.value.zip_map(&noise, |a, b| a + b).unwrap();
    });
    model.visit("", &mut |name, slot| {
        if let Slot::Buffer(b) = slot {
            let t = Tensor::uniform(b.get().shape().to_vec(), 0.5, 1.5, &mut rng);
            let t = if name.ends_with("running_mean") {
                t.map(|v| v - 1.0)
            } else {
                t
            };
            b.set(t);
        }
    });

    let x = Tensor::<f64>::randn([2, 1, 32, 32], 1.0, &mut rng);
    let got = model.predict(&x).unwrap();
    let per = 32 * 32;
    let mut worst = 0.0f64;
    for n in 0..2 {
        let input = Map {
            c: 1,
            h: 32,
            w: 32,
            v: x.data()[n * per..(n + 1) * per].to_vec(),
        };
        let want = reference_unet(&model, input);
        for (a, b) in got.data()[n * per..(n + 1) * per].iter().zip(&want.v) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst <= 1e-6, "max deviation {worst}");
}

#[test]
fn loss_decreases_over_the_first_five_epochs() {
    let data = gen_synthetic(0, 200, 64);
    let mut model = Model::<f32>::build(&ModelConfig::default()).unwrap();
    let cfg = TrainConfig {
        epochs: 5,
        ..TrainConfig::default()
    };
    let out = train(&mut model, &data, &cfg).unwrap();
    let loss: Vec<f64> = out.history.iter().map(|r| r.loss).collect();
    assert_eq!(loss.len(), 5);
    assert!(loss[4] < loss[0], "{loss:?}");
    assert!(loss.iter().all(|l| l.is_finite()));
}

#[test]
fn equal_seeds_give_equal_histories_and_best_is_the_best_epoch() {
    let data = gen_synthetic(2, 24, 32);
    let cfg = TrainConfig {
        epochs: 3,
        seed: 6,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = Model::<f32>::build(&ModelConfig::tiny()).unwrap();
        let out = train(&mut m, &data, &cfg).unwrap();
        (out, m)
    };
    let (a, _) = run();
    let (b, last) = run();
    assert_eq!(a.history, b.history);

    let best_epoch = a.best_epoch.unwrap();
    let best_dice = a.history[best_epoch - 1].dice;
    assert!(a.history.iter().all(|r| r.dice <= best_dice));
    let val: Vec<_> = a.split.val.iter().map(|&i| &data[i]).collect();
    assert_eq!(evaluate(&a.best, &val).unwrap().dice, best_dice);
    assert_eq!(
        evaluate(&last, &val).unwrap().dice,
        a.history.last().unwrap().dice
    );
}
