//! Acceptance suite: one PASS/FAIL line per primary criterion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};
use xplain_core::dataset::{make_split, split_sizes, Balance, CorpusItem, LabeledCorpus};
use xplain_core::evalbench::{compute_metrics, ConfusionMatrix};
use xplain_core::explain::{
    exact_shapley, grad_cam, kernel_shap, kernel_shap_fit, lime_explain, lime_fit,
    right_half_positive_fraction, segment_superpixels, GradCamConfig, LimeConfig, ShapConfig,
    SlicConfig,
};
use xplain_core::gateway::ModelHandle;
use xplain_core::imaging::{
    normalize, preprocess, resize_bilinear, ImageTensor, NormalizationConstants, RangeTag,
    CROP_SIZE,
};
use xplain_core::nnet::{
    desknet, Batch, HeadVersion, LayerKind, LayerSpec, Network, Params, Seed, Shape,
};
use xplain_core::synthetic::{
    right_half_classes, right_half_model, textured_right_half, write_blob_corpus,
};

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn FnOnce() -> Outcome + 'a>);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn xplain(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_xplain"))
        .args(args)
        .env_remove("XPLAIN_MODEL_URL")
        .env_remove("XPLAIN_SEED")
        .output()
        .expect("xplain runs")
}

fn xplain_ok(args: &[&str]) -> Result<std::process::Output, String> {
    let out = xplain(args);
    if out.status.success() {
        Ok(out)
    } else {
        Err(format!(
            "`xplain {}` exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm: f64 =
        a.iter().map(|v| v * v).sum::<f64>().sqrt() + b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        0.0
    } else {
        diff / norm
    }
}

/// A small network using every layer kind, with randomized sizes.
fn random_net(rng: &mut ChaCha8Rng, seed: u64) -> Network {
    let c = rng.random_range(1..=3);
    let hw = 2 * rng.random_range(3..=4);
    Network::new(
        Shape::new(c, hw, hw),
        vec![
            LayerSpec::conv_same("conv_same", rng.random_range(2..=4), 3),
            LayerSpec::relu("relu"),
            LayerSpec::max_pool("pool"),
            LayerSpec::new(
                "conv_strided",
                LayerKind::Conv2d {
                    out_channels: rng.random_range(1..=3),
                    kernel: 2,
                    stride: 2,
                    padding: 1,
                },
            ),
            LayerSpec::flatten("flatten"),
            LayerSpec::dense("dense", rng.random_range(3..=6)),
            LayerSpec::dropout("dropout", 0.3),
            LayerSpec::dense("logits", rng.random_range(2..=4)),
            LayerSpec::softmax("softmax"),
        ],
        seed,
    )
    .unwrap()
}

fn random_batch(shape: Shape, n: usize, rng: &mut ChaCha8Rng) -> Batch {
    Batch::new(
        shape,
        (0..shape.len() * n)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

/// `sum(r * output)` from layer `start`, with a fixed dropout stream.
fn probe(net: &Network, start: usize, x: &Batch, r: &[f64]) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let tape = net.forward_from(start, x, true, &mut rng).unwrap();
    tape.output().data().iter().zip(r).map(|(a, b)| a * b).sum()
}

/// Central differences of `probe` over every parameter of `idx`.
fn fd_params(net: &mut Network, idx: usize, x: &Batch, r: &[f64]) -> Vec<f64> {
    const H: f64 = 1e-5;
    let p = net.params(idx).cloned().unwrap();
    let mut fd = Vec::new();
    for j in 0..p.weights.len() + p.bias.len() {
        let mut at = |d: f64| {
            let mut q = p.clone();
            if j < q.weights.len() {
                q.weights[j] += d;
            } else {
                q.bias[j - p.weights.len()] += d;
            }
            net.set_params(idx, q).unwrap();
            probe(net, 0, x, r)
        };
        fd.push((at(H) - at(-H)) / (2.0 * H));
    }
    net.set_params(idx, p).unwrap();
    fd
}

/// Central differences with respect to a captured activation, skipping
/// exact zeros (ReLU outputs tied inside a max-pool window have no
/// derivative).
fn fd_activation(net: &Network, name: &str, a: &Batch, r: &[f64]) -> (Vec<usize>, Vec<f64>) {
    const H: f64 = 1e-5;
    let k = net.layer_index(name).unwrap();
    let coords: Vec<usize> = (0..a.data().len())
        .filter(|&j| a.data()[j] != 0.0)
        .collect();
    let fd = coords
        .iter()
        .map(|&j| {
            let at = |d: f64| {
                let mut b = a.clone();
                b.data_mut()[j] += d;
                probe(net, k + 1, &b, r)
            };
            (at(H) - at(-H)) / (2.0 * H)
        })
        .collect();
    (coords, fd)
}

fn gradient_correctness() -> Outcome {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for instance in 0..6u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + instance);
        let mut net = random_net(&mut rng, instance);
        let x = random_batch(net.input_shape(), 2, &mut rng);
        let r = random_batch(net.output_shape(), 2, &mut rng).into_data();
        let mut drop_rng = ChaCha8Rng::seed_from_u64(7);
        let tape = net.forward(&x, true, &mut drop_rng).unwrap();
        let names: Vec<String> = net.layers().iter().map(|l| l.name().to_string()).collect();
        let capture: Vec<&str> = names
            .iter()
            .map(|s| s.as_str())
            .filter(|n| *n != "softmax")
            .collect();
        let grads = net
            .backward(
                &tape,
                Seed::Output(Batch::new(net.output_shape(), r.clone()).unwrap()),
                &capture,
            )
            .unwrap();
        for idx in 0..net.layers().len() {
            if net.params(idx).is_none() {
                continue;
            }
            let g = grads.params[idx]
                .as_ref()
                .ok_or("missing parameter gradient")?;
            let ana: Vec<f64> = g.weights.iter().chain(&g.bias).copied().collect();
            let err = rel_err(&ana, &fd_params(&mut net, idx, &x, &r));
            worst = worst.max(err);
            checked += 1;
            ensure(err < 1e-4, || {
                format!("instance {instance} layer {}: rel err {err:e}", names[idx])
            })?;
        }
        for name in &capture {
            let a = tape.activation(name).unwrap();
            let (coords, fd) = fd_activation(&net, name, a, &r);
            let g = grads.activation(name).unwrap();
            let ana: Vec<f64> = coords.iter().map(|&j| g.data()[j]).collect();
            let err = rel_err(&ana, &fd);
            worst = worst.max(err);
            checked += 1;
            ensure(err < 1e-4, || {
                format!("instance {instance} activation {name}: rel err {err:e}")
            })?;
        }
    }
    let el = t.elapsed();
    ensure(el < Duration::from_secs(10), || format!("took {el:?}"))?;
    Ok(format!(
        "{checked} gradient checks, worst rel err {worst:.2e}, {el:.2?}"
    ))
}

fn table_game(
    table: Vec<f64>,
) -> impl FnMut(&[Vec<bool>]) -> xplain_core::explain::Result<Vec<f64>> {
    move |masks: &[Vec<bool>]| {
        Ok(masks
            .iter()
            .map(|m| {
                table[m
                    .iter()
                    .enumerate()
                    .fold(0usize, |acc, (i, &b)| acc | ((b as usize) << i))]
            })
            .collect())
    }
}

fn shapley_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (mut worst, mut worst_eff, mut worst_dummy) = (0.0f64, 0.0f64, 0.0f64);
    for run in 0..20 {
        let features = 2 + run % 9;
        let dummy = rng.random_range(0..features);
        let mut table: Vec<f64> = (0..1usize << features)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        // The dummy feature never changes the value.
        for idx in 0..table.len() {
            if idx & (1 << dummy) != 0 {
                table[idx] = table[idx & !(1 << dummy)];
            }
        }
        let exact =
            exact_shapley(features, &mut table_game(table.clone())).map_err(|e| e.to_string())?;
        let kernel = kernel_shap_fit(
            features,
            &mut table_game(table.clone()),
            Some(1 << features),
            run as u64,
        )
        .map_err(|e| e.to_string())?;
        ensure(kernel.full_enumeration, || {
            format!("run {run}: budget did not enumerate")
        })?;
        for (a, b) in exact.phi.iter().zip(&kernel.phi) {
            worst = worst.max((a - b).abs());
        }
        let eff = kernel.phi.iter().sum::<f64>() + kernel.base - table[(1 << features) - 1];
        worst_eff = worst_eff.max(eff.abs());
        worst_dummy = worst_dummy
            .max(kernel.phi[dummy].abs())
            .max(exact.phi[dummy].abs());
    }
    ensure(worst < 1e-6, || {
        format!("kernel vs exact max diff {worst:e}")
    })?;
    ensure(worst_eff < 1e-6, || format!("efficiency gap {worst_eff:e}"))?;
    ensure(worst_dummy < 1e-6, || {
        format!("dummy |phi| {worst_dummy:e}")
    })?;
    let el = t.elapsed();
    ensure(el < Duration::from_secs(30), || format!("took {el:?}"))?;
    Ok(format!(
        "20 games S=2..10: max |diff| {worst:.1e}, efficiency {worst_eff:.1e}, dummy {worst_dummy:.1e}, {el:.2?}"
    ))
}

fn lime_oracle() -> Outcome {
    let coef = [0.0, 1.5, 0.0, -2.0, 0.5, 0.0, 3.0, 0.0];
    let mut linear = |masks: &[Vec<bool>]| -> xplain_core::explain::Result<Vec<f64>> {
        Ok(masks
            .iter()
            .map(|m| {
                0.2 + m
                    .iter()
                    .zip(&coef)
                    .filter(|(b, _)| **b)
                    .map(|(_, c)| c)
                    .sum::<f64>()
            })
            .collect())
    };
    let cfg = LimeConfig {
        ridge_lambda: 1e-6,
        ..LimeConfig::default()
    };
    let fit = lime_fit(coef.len(), &mut linear, &cfg).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for (j, (&c, &f)) in coef.iter().zip(&fit.coefficients).enumerate() {
        let err = if c != 0.0 {
            (f - c).abs() / c.abs()
        } else {
            f.abs()
        };
        worst = worst.max(err);
        ensure(err < 1e-3, || format!("feature {j}: {f} vs {c}"))?;
    }
    let constant = lime_fit(
        12,
        &mut |m: &[Vec<bool>]| Ok(vec![0.4; m.len()]),
        &LimeConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    let max_const = constant
        .coefficients
        .iter()
        .fold(0.0f64, |m, c| m.max(c.abs()));
    ensure(max_const < 1e-9, || {
        format!("constant model coefficient {max_const:e}")
    })?;

    let norm = NormalizationConstants::IMAGENET;
    let unit = textured_right_half(CROP_SIZE, 9);
    let handle = right_half_handle(&unit);
    let sp = segment_superpixels(&unit, &SlicConfig::default()).map_err(|e| e.to_string())?;
    let run = || {
        let r = lime_explain(
            &handle,
            &unit,
            &sp,
            None,
            &LimeConfig {
                seed: 5,
                ..LimeConfig::default()
            },
            &norm,
        )
        .unwrap();
        serde_json::to_string(&r).unwrap()
    };
    let (a, b) = (run(), run());
    ensure(a == b, || "same seed gave different results".into())?;
    Ok(format!(
        "max rel err {worst:.1e}, constant-model max |coef| {max_const:.1e}, same-seed results identical ({} bytes)",
        a.len()
    ))
}

fn right_half_handle(unit: &ImageTensor) -> ModelHandle {
    let normalized = normalize(unit, &NormalizationConstants::IMAGENET).unwrap();
    ModelHandle::native(right_half_model(&normalized).unwrap(), right_half_classes()).unwrap()
}

fn gradcam_analytic() -> Outcome {
    // One conv channel, then a dense layer whose class-0 row averages the
    // map: the class-0 logit is the global average of A_1.
    let (h, w) = (7, 6);
    let mut net = Network::new(
        Shape::new(3, h, w),
        vec![
            LayerSpec::conv_same("conv", 1, 3),
            LayerSpec::flatten("flatten"),
            LayerSpec::dense("logits", 2),
            LayerSpec::softmax("softmax"),
        ],
        3,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    net.set_params(
        0,
        Params {
            weights: (0..27).map(|_| rng.random_range(-1.0..1.0)).collect(),
            bias: vec![0.05],
        },
    )
    .unwrap();
    let n = (h * w) as f64;
    let mut dense = vec![1.0 / n; h * w];
    dense.extend((0..h * w).map(|_| rng.random_range(-1.0..1.0)));
    net.set_params(
        2,
        Params {
            weights: dense,
            bias: vec![0.0, 0.0],
        },
    )
    .unwrap();
    let img = ImageTensor::new(
        (0..3 * h * w)
            .map(|_| rng.random_range(-2.0f32..2.0))
            .collect(),
        h,
        w,
        RangeTag::Normalized,
    )
    .unwrap();
    let handle = ModelHandle::native(net.clone(), vec!["a".into(), "b".into()]).unwrap();
    let res =
        grad_cam(&handle, &img, Some(0), &GradCamConfig::default()).map_err(|e| e.to_string())?;

    let mut fwd_rng = ChaCha8Rng::seed_from_u64(0);
    let tape = net
        .forward(
            &Batch::from_images(std::slice::from_ref(&img)).unwrap(),
            false,
            &mut fwd_rng,
        )
        .unwrap();
    let a: Vec<f64> = tape
        .activation("conv")
        .unwrap()
        .data()
        .iter()
        .map(|v| v.max(0.0))
        .collect();
    let (lo, hi) = a
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| {
            (l.min(v), u.max(v))
        });
    let mut worst: f64 = 0.0;
    for (got, v) in res.scores.iter().zip(&a) {
        let expected = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
        worst = worst.max((got - expected).abs());
    }
    ensure(worst < 1e-6, || {
        format!("map differs from minmax(ReLU(A)) by {worst:e}")
    })?;

    // Activation gradients of the class logit on a 2-conv DeskNet.
    let dn = desknet(Shape::new(3, 12, 12), HeadVersion::ORIGINAL, 4, 8).unwrap();
    let mut xr = ChaCha8Rng::seed_from_u64(12);
    let x = random_batch(dn.input_shape(), 1, &mut xr);
    let mut fr = ChaCha8Rng::seed_from_u64(7);
    let tape = dn.forward(&x, true, &mut fr).unwrap();
    let logits_idx = dn.layer_index("logits").unwrap();
    let mut seed = Batch::zeros(dn.output_shape(), 1);
    seed.data_mut()[2] = 1.0;
    let mut worst_fd: f64 = 0.0;
    for name in ["conv1", "relu1", "conv2", "relu2"] {
        let grads = dn
            .backward(&tape, Seed::Logits(seed.clone()), &[name])
            .unwrap();
        let act = tape.activation(name).unwrap();
        let k = dn.layer_index(name).unwrap();
        let coords: Vec<usize> = (0..act.data().len())
            .filter(|&j| act.data()[j] != 0.0)
            .collect();
        let logit = |b: &Batch| {
            let mut r = ChaCha8Rng::seed_from_u64(7);
            dn.forward_range(k + 1, logits_idx + 1, b, true, &mut r)
                .unwrap()
                .output()
                .data()[2]
        };
        let fd: Vec<f64> = coords
            .iter()
            .map(|&j| {
                let mut p = act.clone();
                p.data_mut()[j] += 1e-5;
                let mut m = act.clone();
                m.data_mut()[j] -= 1e-5;
                (logit(&p) - logit(&m)) / 2e-5
            })
            .collect();
        let g = grads.activation(name).unwrap();
        let ana: Vec<f64> = coords.iter().map(|&j| g.data()[j]).collect();
        let err = rel_err(&ana, &fd);
        worst_fd = worst_fd.max(err);
        ensure(err < 1e-4, || {
            format!("DeskNet activation {name}: rel err {err:e}")
        })?;
    }
    Ok(format!(
        "map max |diff| {worst:.1e}; DeskNet activation FD worst rel err {worst_fd:.1e}"
    ))
}

/// Bilinear reference written as a sum of triangle-kernel weights over all
/// source pixels, with half-pixel centers and edge clamping.
fn reference_resize(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let pos = |d: usize, n: usize, o: usize| {
        ((d as f64 + 0.5) * n as f64 / o as f64 - 0.5).clamp(0.0, (n - 1) as f64)
    };
    let tri = |t: f64| (1.0 - t.abs()).max(0.0);
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let sy = pos(y, h, oh);
        for x in 0..ow {
            let sx = pos(x, w, ow);
            let mut acc = 0.0;
            for i in 0..h {
                let wy = tri(sy - i as f64);
                if wy == 0.0 {
                    continue;
                }
                for j in 0..w {
                    acc += wy * tri(sx - j as f64) * src[i * w + j] as f64;
                }
            }
            out.push(acc);
        }
    }
    out
}

fn preprocessing_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let raw = ImageTensor::new(
        (0..3 * 300 * 410)
            .map(|_| rng.random_range(0.0f32..255.0))
            .collect(),
        300,
        410,
        RangeTag::Raw255,
    )
    .unwrap();
    let out = preprocess(&raw).map_err(|e| e.to_string())?;
    ensure(out.shape() == (3, 224, 224), || {
        format!("shape {:?}", out.shape())
    })?;
    ensure(out.range() == RangeTag::Normalized, || "range tag".into())?;

    let constant = ImageTensor::filled([200.0, 100.0, 50.0], 333, 257, RangeTag::Raw255).unwrap();
    let out = preprocess(&constant).unwrap();
    let (mean, std) = ([0.485, 0.456, 0.406], [0.229, 0.224, 0.225]);
    let mut worst: f64 = 0.0;
    for (c, v) in [200.0, 100.0, 50.0].iter().enumerate() {
        let expected = (v / 255.0 - mean[c]) / std[c];
        for &got in out.channel(c) {
            worst = worst.max((got as f64 - expected).abs());
        }
    }
    ensure(worst < 1e-6, || {
        format!("constant normalization off by {worst:e}")
    })?;

    let mut worst_resize: f64 = 0.0;
    for (h, w, oh, ow) in [(37, 53, 256, 256), (300, 410, 256, 256), (9, 7, 20, 3)] {
        let src = ImageTensor::new(
            (0..3 * h * w)
                .map(|_| rng.random_range(0.0f32..1.0))
                .collect(),
            h,
            w,
            RangeTag::Unit,
        )
        .unwrap();
        let got = resize_bilinear(&src, oh, ow).unwrap();
        for c in 0..3 {
            let reference = reference_resize(src.channel(c), h, w, oh, ow);
            for (a, b) in got.channel(c).iter().zip(&reference) {
                worst_resize = worst_resize.max((*a as f64 - b).abs());
            }
        }
    }
    ensure(worst_resize < 1e-6, || {
        format!("resize differs from reference by {worst_resize:e}")
    })?;
    Ok(format!(
        "(3,224,224); normalization max err {worst:.1e}; resize vs reference {worst_resize:.1e}"
    ))
}

fn corpus(counts: &[usize]) -> LabeledCorpus {
    let classes: Vec<String> = (0..counts.len()).map(|c| format!("class{c}")).collect();
    let items = counts
        .iter()
        .enumerate()
        .flat_map(|(label, &n)| {
            (0..n).map(move |i| CorpusItem {
                path: PathBuf::from(format!("/c{label}/img{i:05}.png")),
                label,
            })
        })
        .collect();
    LabeledCorpus::new(classes, items).unwrap()
}

fn split_arithmetic() -> Outcome {
    ensure(split_sizes(926) == (740, 92, 94), || {
        format!("{:?}", split_sizes(926))
    })?;
    let plan = make_split(&corpus(&[926]), 1, Balance::Off).map_err(|e| e.to_string())?;
    ensure(
        (plan.train.len(), plan.val.len(), plan.test.len()) == (740, 92, 94),
        || "926 split".into(),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for run in 0..100 {
        let counts: Vec<usize> = (0..rng.random_range(2..6))
            .map(|_| rng.random_range(10..120))
            .collect();
        let c = corpus(&counts);
        let off = make_split(&c, run, Balance::Off).unwrap();
        let mut all: Vec<usize> = off
            .train
            .iter()
            .chain(&off.val)
            .chain(&off.test)
            .copied()
            .collect();
        all.sort_unstable();
        ensure(all == (0..c.len()).collect::<Vec<_>>(), || {
            format!("run {run}: not a partition")
        })?;

        let bal = make_split(&c, run, Balance::Truncate).unwrap();
        let min_train = counts.iter().map(|&n| split_sizes(n).0).min().unwrap();
        let mut per_class = vec![0usize; counts.len()];
        for &i in &bal.train {
            per_class[c.items()[i].label] += 1;
        }
        ensure(per_class.iter().all(|&n| n == min_train), || {
            format!("run {run}: balanced {per_class:?}")
        })?;
        let mut all: Vec<usize> = bal
            .train
            .iter()
            .chain(&bal.val)
            .chain(&bal.test)
            .chain(&bal.unused)
            .copied()
            .collect();
        all.sort_unstable();
        ensure(all == (0..c.len()).collect::<Vec<_>>(), || {
            format!("run {run}: balanced split not a partition")
        })?;
    }
    Ok(
        "926 -> 740/92/94; 100 random corpora disjoint and exhaustive; truncation equalizes train"
            .into(),
    )
}

fn count_files(dir: &Path, ext: &str) -> usize {
    std::fs::read_dir(dir)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .is_some_and(|x| x == ext)
        })
        .count()
}

fn desk_scale(work: &Path) -> Outcome {
    let data = work.join("blobs");
    write_blob_corpus(&data, 100, 3).map_err(|e| e.to_string())?;
    let train_out = work.join("train");
    let t = Instant::now();
    xplain_ok(&[
        "train",
        "--data",
        s(&data),
        "--head-version",
        "0",
        "--lr",
        "0.01",
        "--optimizer",
        "sgd",
        "--epochs",
        "50",
        "--seed",
        "1",
        "--out",
        s(&train_out),
    ])?;
    let train_time = t.elapsed();
    ensure(train_time <= Duration::from_secs(120), || {
        format!("training took {train_time:?}")
    })?;
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(train_out.join("metrics.json")).unwrap())
            .unwrap();
    let acc = metrics["metrics"]["accuracy"]
        .as_f64()
        .ok_or("metrics.json lacks accuracy")?;
    ensure(acc >= 0.90, || format!("test accuracy {acc}"))?;

    let split: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(train_out.join("split.json")).unwrap())
            .unwrap();
    let image = split["partitions"][1]["test"][0]
        .as_str()
        .ok_or("no test image")?
        .to_string();
    let explain_out = work.join("explain");
    let model = format!("native:{}", train_out.join("model.xck").display());
    let t = Instant::now();
    xplain_ok(&[
        "explain",
        &image,
        "--method",
        "all",
        "--model",
        &model,
        "--out",
        s(&explain_out),
    ])?;
    let explain_time = t.elapsed();
    let pngs = count_files(&explain_out, "png");
    let jsons: Vec<String> = std::fs::read_dir(&explain_out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".json") && n != "manifest.json")
        .collect();
    ensure(pngs == 5 && explain_out.join("sheet.png").is_file(), || {
        format!("{pngs} PNGs")
    })?;
    ensure(jsons == ["explanation.json"], || {
        format!("sidecars {jsons:?}")
    })?;

    let norm = NormalizationConstants::IMAGENET;
    let unit = textured_right_half(CROP_SIZE, 3);
    let normalized = normalize(&unit, &norm).unwrap();
    let handle = right_half_handle(&unit);
    let sp = segment_superpixels(&unit, &SlicConfig::default()).unwrap();
    let results = [
        lime_explain(&handle, &unit, &sp, None, &LimeConfig::default(), &norm)
            .map_err(|e| e.to_string())?,
        kernel_shap(&handle, &unit, &sp, None, &ShapConfig::default(), &norm)
            .map_err(|e| e.to_string())?,
        grad_cam(&handle, &normalized, None, &GradCamConfig::default())
            .map_err(|e| e.to_string())?,
    ];
    let mut fracs = Vec::new();
    for r in &results {
        let f =
            right_half_positive_fraction(&r.pixel_scores(Some(&sp)).unwrap(), CROP_SIZE, CROP_SIZE);
        ensure(f >= 0.70, || {
            format!("{:?} right-half mass {f:.3}", r.method)
        })?;
        fracs.push(format!("{:?} {f:.2}", r.method));
    }
    Ok(format!(
        "test accuracy {acc:.3} in {train_time:.1?}; explain all: 4 PNGs + sheet + sidecar in {explain_time:.1?}; right-half mass: {}",
        fracs.join(", ")
    ))
}

fn csv_rows(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count() - 1
}

fn grid_shape(work: &Path) -> Outcome {
    let data = work.join("small");
    write_blob_corpus(&data, 10, 4).map_err(|e| e.to_string())?;
    let mut summary = Vec::new();
    for (grid, expected, extra) in [
        ("hyper", 18, vec![]),
        ("heads", 9, vec!["--epochs", "2"]),
        ("aug", 3, vec!["--epochs", "2"]),
    ] {
        let out = work.join(format!("grid_{grid}"));
        let mut args = vec![
            "grid",
            "--data",
            s(&data),
            "--grid",
            grid,
            "--lr",
            "0.01",
            "--seed",
            "2",
            "--out",
            s(&out),
        ];
        args.extend(extra);
        xplain_ok(&args)?;
        let rows = csv_rows(&out.join("grid.csv"));
        ensure(rows == expected, || {
            format!("{grid} grid: {rows} rows, expected {expected}")
        })?;
        let replay = work.join(format!("grid_{grid}_replay"));
        xplain_ok(&["replay", s(&out.join("manifest.json")), "--out", s(&replay)])?;
        for f in ["grid.csv", "grid.json"] {
            let (a, b) = (
                std::fs::read(out.join(f)).unwrap(),
                std::fs::read(replay.join(f)).unwrap(),
            );
            ensure(a == b, || format!("{grid} {f} differs after replay"))?;
        }
        summary.push(format!("{grid} {rows}"));
    }
    Ok(format!(
        "rows: {}; replayed CSV/JSON byte-identical",
        summary.join(", ")
    ))
}

fn metrics_examples() -> Outcome {
    let names = vec!["a".to_string(), "b".to_string()];
    let m = compute_metrics(
        &ConfusionMatrix::from_counts(names, vec![vec![5, 5], vec![0, 10]]).unwrap(),
    )
    .unwrap();
    let (c0, c1) = (&m.classes[0], &m.classes[1]);
    ensure(
        c0.precision == 1.0 && c0.recall == 0.5 && (c0.f1 - 2.0 / 3.0).abs() < 1e-12,
        || format!("{c0:?}"),
    )?;
    ensure(
        (c1.precision - 10.0 / 15.0).abs() < 1e-12
            && c1.recall == 1.0
            && (c1.f1 - 0.8).abs() < 1e-12,
        || format!("{c1:?}"),
    )?;
    ensure(
        m.accuracy == 0.75 && (m.macro_f1 - 11.0 / 15.0).abs() < 1e-12,
        || format!("{m:?}"),
    )?;
    let diag = ConfusionMatrix::from_counts(
        (0..4).map(|i| i.to_string()).collect(),
        (0..4)
            .map(|i| (0..4).map(|j| if i == j { 7 } else { 0 }).collect())
            .collect(),
    )
    .unwrap();
    let d = compute_metrics(&diag).unwrap();
    let all_one = d
        .classes
        .iter()
        .all(|c| c.precision == 1.0 && c.recall == 1.0 && c.f1 == 1.0)
        && [d.macro_precision, d.macro_recall, d.macro_f1, d.accuracy] == [1.0; 4];
    ensure(all_one, || format!("{d:?}"))?;
    Ok(format!(
        "[[5,5],[0,10]] -> accuracy 0.75, macro F1 {:.4}; diagonal -> 1.0",
        m.macro_f1
    ))
}

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    let criteria: Vec<Criterion> = vec![
        ("gradient correctness", Box::new(gradient_correctness)),
        ("shapley oracle equivalence", Box::new(shapley_oracle)),
        ("lime linear-oracle recovery", Box::new(lime_oracle)),
        ("grad-cam analytic case", Box::new(gradcam_analytic)),
        ("preprocessing exactness", Box::new(preprocessing_exactness)),
        ("split arithmetic", Box::new(split_arithmetic)),
        (
            "desk-scale end-to-end",
            Box::new(|| desk_scale(work.path())),
        ),
        ("grid shape", Box::new(|| grid_shape(work.path()))),
        ("metrics", Box::new(metrics_examples)),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
