//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails or overruns its time budget.
//!
//! `cargo test -p vton-cli --test acceptance` runs everything; extra
//! arguments select criteria by substring, e.g. `-- geometry`.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vton_core::augment::{self, AugmentConfig, GeometricTransform, TransformKind, TransformParams};
use vton_core::data::{synth_samples, LoadedSample, DEFAULT_LABEL};
use vton_core::detect::{self, BBox, Detection, DetectorConfig, FixedBackend};
use vton_core::imaging::Interp;
use vton_core::metrics::{fid, kid, ssim, EmbeddingSet, SsimConfig};
use vton_core::nn::{BatchNorm, Conv2d, Init, ParamStore, Session};
use vton_core::pipeline::{tryon_with, PipelineConfig, TryOnOptions};
use vton_core::segnet::{self, seg_loss, Rsu, RsuSpec, SaliencyOutput, SegModel, SegTrainConfig, SegTrainer, U2NetSpec};
use vton_core::tensor::{ops, Tensor, Var};
use vton_core::transnet::{
    discriminator_objective, fm_loss, gan_loss, gan_pairs, generator_objective, image_pyramid, perceptual_loss,
    DiscriminatorSpec, Extractor, FeatureStack, GanFlavor, GanModel, GanTrainConfig, GanTrainer, Generator, GeneratorSpec,
    MultiScaleDiscriminator, RANDCONV_SEED,
};
use vton_core::{BinaryMask, ImageBuffer};

type Check = Result<String, Box<dyn std::error::Error>>;

macro_rules! check {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+).into());
        }
    };
}

struct Criterion {
    name: &'static str,
    budget: Duration,
    run: fn() -> Check,
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let criteria = [
        Criterion { name: "metric oracles", budget: Duration::from_secs(30), run: metric_oracles },
        Criterion { name: "loss oracles", budget: Duration::from_secs(5), run: loss_oracles },
        Criterion { name: "gradient checks", budget: Duration::from_secs(120), run: gradient_checks },
        Criterion { name: "architecture laws", budget: Duration::from_secs(30), run: architecture_laws },
        Criterion { name: "desk-scale learning", budget: Duration::from_secs(600), run: desk_scale_learning },
        Criterion { name: "geometry", budget: Duration::from_secs(120), run: geometry },
        Criterion { name: "augmentation", budget: Duration::from_secs(120), run: augmentation },
        Criterion { name: "service contract", budget: Duration::from_secs(120), run: service_contract },
    ];
    let mut failed = 0;
    for c in criteria.iter().filter(|c| filters.is_empty() || filters.iter().any(|f| c.name.contains(f.as_str()))) {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run));
        let secs = t.elapsed().as_secs_f64();
        let (ok, detail) = match outcome {
            Ok(Ok(d)) => (secs <= c.budget.as_secs_f64(), d),
            Ok(Err(e)) => (false, e.to_string()),
            Err(p) => (false, format!("panic: {}", p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())),
        };
        let verdict = if ok { "PASS" } else { "FAIL" };
        println!("{verdict} {} [{secs:.1}s / {}s] {detail}", c.name, c.budget.as_secs());
        failed += usize::from(!ok);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn rand_image(rng: &mut ChaCha8Rng, h: usize, w: usize, ch: usize) -> ImageBuffer {
    let data = (0..h * w * ch).map(|_| rng.gen_range(0.0f32..1.0)).collect();
    ImageBuffer::new(h, w, ch, data).unwrap()
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn rand_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect()
}

fn metric_oracles() -> Check {
    let cfg = SsimConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..50 {
        let (h, w) = (rng.gen_range(11..60), rng.gen_range(11..60));
        let img = rand_image(&mut rng, h, w, if i % 2 == 0 { 3 } else { 1 });
        let s = ssim(&img, &img, &cfg)?;
        check!((s - 1.0).abs() <= 1e-6, "ssim(x,x) = {s} on {h}x{w}");
    }
    let c1 = (cfg.k1 * cfg.data_range).powi(2);
    for _ in 0..20 {
        let (a, b) = (rng.gen_range(0.0f32..1.0), rng.gen_range(0.0f32..1.0));
        let x = ImageBuffer::filled(16, 16, &[a]);
        let y = ImageBuffer::filled(16, 16, &[b]);
        let (a, b) = (a as f64, b as f64);
        let expect = (2.0 * a * b + c1) / (a * a + b * b + c1);
        let s = ssim(&x, &y, &cfg)?;
        check!((s - expect).abs() <= 1e-6, "constant ssim {s} vs closed form {expect}");
    }
    for d in 1..6 {
        let a = EmbeddingSet::new(rand_rows(&mut rng, 20, d), "t")?;
        let f = fid(&a, &a)?;
        check!(f <= 1e-8, "fid(a,a) = {f} in {d}-D");
    }
    let a = EmbeddingSet::new(vec![vec![0.0]; 5], "t")?;
    let b = EmbeddingSet::new(vec![vec![2.0]; 5], "t")?;
    let f = fid(&a, &b)?;
    check!(f == 4.0, "point-mass fid = {f}");
    let mut worst = 0f64;
    for n in 2..=8 {
        for trial in 0..10 {
            let d = rng.gen_range(1..6);
            let (ra, rb) = (rand_rows(&mut rng, n, d), rand_rows(&mut rng, n, d));
            let k = |u: &[f64], v: &[f64]| (u.iter().zip(v).map(|(p, q)| p * q).sum::<f64>() / d as f64 + 1.0).powi(3);
            let (mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        xx += k(&ra[i], &ra[j]);
                        yy += k(&rb[i], &rb[j]);
                    }
                    xy += k(&ra[i], &rb[j]);
                }
            }
            let m = n as f64;
            let brute = (xx + yy) / (m * (m - 1.0)) - 2.0 * xy / (m * m);
            let got = kid(&EmbeddingSet::new(ra, "t")?, &EmbeddingSet::new(rb, "t")?, n, 1, trial)?;
            worst = worst.max((got - brute).abs());
        }
    }
    check!(worst <= 1e-12, "kid deviates from brute force by {worst:e}");
    Ok(format!("kid max deviation {worst:.1e}"))
}

fn loss_oracles() -> Check {
    let ln2 = std::f64::consts::LN_2;
    let zeros = Var::constant(Tensor::zeros(&[2, 1, 5, 5]));
    for real in [true, false] {
        let l = gan_loss(&zeros, real, GanFlavor::Vanilla).item();
        check!((l - ln2).abs() <= 1e-9, "gan_loss(0, {real}) = {l}");
    }
    let stack = |f: &[f64]| FeatureStack {
        features: vec![Var::constant(Tensor::new(vec![1, f.len(), 1, 1], f.to_vec()))],
        logits: Var::constant(Tensor::zeros(&[1, 1, 1, 1])),
    };
    let fm = fm_loss(&[stack(&[1.0, 2.0])], &[stack(&[2.0, 4.0])])?.item();
    check!(fm == 1.5, "fm hand case = {fm}");
    let random: Vec<FeatureStack> = (0..3)
        .map(|s| FeatureStack {
            features: (0..3).map(|l| Var::constant(rand_tensor(&[2, 4, 6 >> (l / 2), 6 >> (l / 2)], s * 10 + l))).collect(),
            logits: Var::constant(rand_tensor(&[2, 1, 2, 2], 99 + s)),
        })
        .collect();
    let same = fm_loss(&random, &random.clone())?.item();
    check!(same == 0.0, "fm of identical stacks = {same}");
    let half = Var::constant(Tensor::full(&[2, 1, 8, 8], 0.5));
    let out = SaliencyOutput { fused: half.clone(), sides: vec![half; 6] };
    let target = rand_tensor(&[2, 1, 8, 8], 5).map(|v| (v > 0.0) as u8 as f64);
    let l = seg_loss(&out, &target)?.total.item();
    check!((l - 7.0 * ln2).abs() <= 1e-6, "seg_loss at p=0.5 = {l}");
    Ok(String::new())
}

/// Central differences at `probes` random scalars; returns the worst relative error.
fn probe_gradients(
    store: &ParamStore,
    objective: &dyn Fn(&ParamStore, bool) -> (f64, std::collections::BTreeMap<String, Tensor>),
    prefix: &str,
    probes: usize,
    seed: u64,
) -> Result<f64, String> {
    let (_, grads) = objective(store, true);
    let names: Vec<&String> = grads.keys().filter(|k| k.starts_with(prefix)).collect();
    if names.is_empty() {
        return Err(format!("no gradients under {prefix}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0f64;
    for _ in 0..probes {
        let name = names[rng.gen_range(0..names.len())];
        let i = rng.gen_range(0..grads[name].len());
        let h = 1e-6;
        let mut plus = store.clone();
        plus.get_mut(name).unwrap().data_mut()[i] += h;
        let mut minus = store.clone();
        minus.get_mut(name).unwrap().data_mut()[i] -= h;
        let numeric = (objective(&plus, false).0 - objective(&minus, false).0) / (2.0 * h);
        let analytic = grads[name].data()[i];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5);
        if rel > 1e-3 {
            return Err(format!("{name}[{i}]: analytic {analytic} vs numeric {numeric}"));
        }
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn gradient_checks() -> Check {
    let rsu = Rsu::new("b", RsuSpec::new(3, 2, 2, 2, false));
    let head = Conv2d::new("head", 2, 1, 1);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    rsu.init(&mut store, &mut rng);
    head.init(&mut store, &mut rng, Init::FanInUniform);
    let x = rand_tensor(&[2, 2, 8, 8], 5);
    let y = rand_tensor(&[2, 1, 8, 8], 6).map(|v| (v > 0.0) as u8 as f64);
    let seg_obj = |store: &ParamStore, grad: bool| {
        let sess = Session::with_mode(store, true, grad);
        let h = rsu.forward(&sess, &Var::constant(x.clone())).unwrap();
        let p = ops::sigmoid(&head.forward(&sess, &h));
        let l = seg_loss(&SaliencyOutput { fused: p.clone(), sides: vec![p; 6] }, &y).unwrap().total;
        if grad {
            l.backward();
        }
        (l.item(), sess.grads())
    };
    let w_rsu = probe_gradients(&store, &seg_obj, "", 120, 7)?;

    let gen = Generator::new(GeneratorSpec { base_channels: 2, global_downsamples: 1, residual_blocks: 1, ..Default::default() })?;
    let d = MultiScaleDiscriminator::new(DiscriminatorSpec { num_scales: 2, layers: 2, base_channels: 2 })?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    gen.init(&mut store, &mut rng);
    d.init(&mut store, &mut rng);
    // Larger weights keep activations away from the flat regions of the norms.
    for (_, t) in store.params_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= 10.0);
    }
    let s = Var::constant(rand_tensor(&[1, 3, 8, 8], 22).map(|v| (v > 0.0) as u8 as f64));
    let real = Var::constant(rand_tensor(&[1, 3, 8, 8], 23).map(|v| (v + 1.0) / 2.0));
    let ext = Extractor::random_conv(RANDCONV_SEED);
    let g_obj = |store: &ParamStore, grad: bool| {
        let gs = Session::with_mode(store, true, grad);
        let ds = Session::with_mode(store, true, grad);
        let fake = gen.forward(&gs, &s).unwrap();
        let fs = d.forward(&ds, &s, &fake);
        let rs = d.forward(&ds, &s, &real);
        let gan: Vec<Var> = fs.iter().map(|st| gan_loss(&st.logits, true, GanFlavor::Vanilla)).collect();
        let fm = fm_loss(&rs, &fs).unwrap();
        let perc = perceptual_loss(&ext, &fake, &real);
        let obj = generator_objective(&gan, &[fm], Some(&perc), 10.0, 10.0);
        if grad {
            obj.backward();
        }
        let mut g = gs.grads();
        g.extend(ds.grads());
        (obj.item(), g)
    };
    let d_obj = |store: &ParamStore, grad: bool| {
        let gs = Session::with_mode(store, true, false);
        let ds = Session::with_mode(store, true, grad);
        let fake = gen.forward(&gs, &s).unwrap();
        let r: Vec<Var> = d.forward(&ds, &s, &real).iter().map(|st| gan_loss(&st.logits, true, GanFlavor::Vanilla)).collect();
        let f: Vec<Var> = d.forward(&ds, &s, &fake).iter().map(|st| gan_loss(&st.logits, false, GanFlavor::Vanilla)).collect();
        let obj = discriminator_objective(&r, &f);
        if grad {
            obj.backward();
        }
        (obj.item(), ds.grads())
    };
    let w_gen = probe_gradients(&store, &g_obj, "gen.", 60, 24)?;
    let w_disc = probe_gradients(&store, &d_obj, "disc.", 60, 25)?;
    Ok(format!("worst relative error: rsu {w_rsu:.1e}, generator {w_gen:.1e}, discriminator {w_disc:.1e} over 240 probes"))
}

fn architecture_laws() -> Check {
    for l in 2..=7 {
        for dilated in [false, true] {
            let (c_in, c_mid, c_out) = (3, 4, 5);
            let rsu = Rsu::new("b", RsuSpec::new(l, c_in, c_mid, c_out, dilated));
            let mut store = ParamStore::new();
            rsu.init(&mut store, &mut ChaCha8Rng::seed_from_u64(l as u64));
            for (k, v) in store.params_mut() {
                if k.starts_with("b.u.") {
                    v.data_mut().fill(0.0);
                }
            }
            let conv = Conv2d::new("b.in.conv", c_in, c_out, 3).padding(1);
            let bn = BatchNorm::new("b.in.bn", c_out);
            let x = Var::constant(rand_tensor(&[2, c_in, 64, 64], l as u64));
            for train in [true, false] {
                let sess = Session::with_mode(&store, train, false);
                let h = rsu.forward(&sess, &x)?;
                let f1 = ops::relu(&bn.forward(&sess, &conv.forward(&sess, &x)));
                check!(h.value() == f1.value(), "residual identity broken at L={l} dilated={dilated} train={train}");
            }
        }
    }
    for (l, h, w) in [(4, 12, 20), (5, 9, 9), (7, 16, 33)] {
        let rsu = Rsu::new("b", RsuSpec::new(l, 3, 4, 6, true));
        let mut store = ParamStore::new();
        rsu.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let sess = Session::eval(&store).traced();
        rsu.forward(&sess, &Var::constant(rand_tensor(&[1, 3, h, w], 3)))?;
        let trace = sess.trace();
        check!(trace.len() == 2 * l + 1, "dilated RSU L={l} recorded {} layers", trace.len());
        for (label, shape) in trace {
            check!(shape[2..] == [h, w], "dilated RSU layer {label} has {:?}, input {h}x{w}", &shape[2..]);
        }
    }
    let img = ImageBuffer::filled(512, 512, &[0.1, 0.2, 0.3]);
    let sides: Vec<usize> = image_pyramid(&img, 3)?.iter().map(|l| l.height()).collect();
    check!(sides == [512, 256, 128], "image pyramid {sides:?}");
    let d = MultiScaleDiscriminator::new(DiscriminatorSpec { num_scales: 3, layers: 1, base_channels: 1 })?;
    let mut store = ParamStore::new();
    d.init(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
    let sess = Session::eval(&store).traced();
    let big = Var::constant(Tensor::zeros(&[1, 3, 512, 512]));
    d.forward(&sess, &big, &big);
    let inputs: Vec<Vec<usize>> = sess.trace().into_iter().filter(|(k, _)| k.ends_with(".input")).map(|(_, s)| s[2..].to_vec()).collect();
    check!(inputs == [vec![512, 512], vec![256, 256], vec![128, 128]], "discriminator inputs {inputs:?}");
    for (h, w) in [(32, 32), (32, 64)] {
        let gen = Generator::new(GeneratorSpec {
            base_channels: 2,
            global_downsamples: 2,
            residual_blocks: 1,
            local_residual_blocks: 1,
            enhancers: 1,
            ..Default::default()
        })?;
        let mut store = ParamStore::new();
        gen.init(&mut store, &mut ChaCha8Rng::seed_from_u64(2));
        let sess = Session::eval(&store).traced();
        let out = gen.forward(&sess, &Var::constant(rand_tensor(&[1, 3, h, w], 4)))?;
        let trace: std::collections::BTreeMap<String, Vec<usize>> = sess.trace().into_iter().collect();
        let (g1, g2) = (&trace["gen.global"], &trace["gen.enh1"]);
        check!(g2[2] == 2 * g1[2] && g2[3] == 2 * g1[3], "enhancer output {g2:?} vs global {g1:?}");
        check!(out.shape()[2..] == [h, w], "generator output {:?} for {h}x{w}", out.shape());
    }
    Ok(String::new())
}

fn desk_scale_learning() -> Check {
    let all = synth_samples(40, 64, 42, DEFAULT_LABEL)?;
    let loaded: Vec<LoadedSample> =
        all.iter().map(|s| LoadedSample { sample: s.paired(), target: Some(s.target.clone()) }).collect();
    let (train, held) = loaded.split_at(32);

    let cfg = SegTrainConfig { batch_size: 2, iterations: 200, ..Default::default() };
    let mut seg = SegTrainer::new(cfg, train)?;
    seg.run(200, None)?;
    let (first, last) = segnet::smoothed_ends(&seg.history.losses(), 10).ok_or("no loss history")?;
    let metrics = segnet::evaluate(&seg.model, held)?;
    check!(last <= 0.5 * first, "segmentation smoothed loss {first:.4} -> {last:.4}");
    check!(metrics.iou >= 0.8, "held-out IoU {:.3}", metrics.iou);

    let pairs = gan_pairs(&train[..8], 64)?;
    let mut gan = GanTrainer::new(GanTrainConfig { batch_size: 1, ..Default::default() }, &pairs)?;
    let mean_l1 = |gan: &GanTrainer| -> Result<f64, vton_core::Error> {
        let model = gan.model()?;
        let mut total = 0.0;
        for (s, x) in &pairs {
            let g = model.generate(s)?;
            total += g.data().iter().zip(x.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / g.data().len() as f64;
        }
        Ok(total / pairs.len() as f64)
    };
    gan.run(10, None)?;
    let l10 = mean_l1(&gan)?;
    let mut best = f64::INFINITY;
    for _ in 0..29 {
        gan.run(10, None)?;
        best = best.min(mean_l1(&gan)?);
        if best < 0.5 * l10 {
            break;
        }
    }
    check!(best < 0.5 * l10, "translation L1 {l10:.4} at step 10, best {best:.4} by step 300");
    Ok(format!(
        "seg loss {first:.3}->{last:.3}, IoU {:.3}; translation L1 {l10:.4}->{best:.4} by step {}",
        metrics.iou,
        gan.steps_done()
    ))
}

/// Kept set defined without greedy iteration: the unique subset K such that a
/// box is in K iff no higher-scoring member of K overlaps it beyond `t`.
fn nms_brute_force(dets: &[Detection], t: f64) -> BTreeSet<usize> {
    let n = dets.len();
    let mut found = Vec::new();
    for bits in 0u32..(1 << n) {
        let member = |i: usize| bits & (1 << i) != 0;
        let consistent = (0..n).all(|i| {
            let suppressed = (0..n).any(|j| member(j) && dets[j].score > dets[i].score && dets[j].bbox.iou(&dets[i].bbox) > t);
            member(i) == !suppressed
        });
        if consistent {
            found.push((0..n).filter(|&i| member(i)).collect::<BTreeSet<_>>());
        }
    }
    assert_eq!(found.len(), 1, "suppression fixed point must be unique");
    found.remove(0)
}

fn geometry() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for set in 0..500 {
        let n = rng.gen_range(0..=10);
        let mut scores: Vec<f64> = (0..n).map(|i| (i as f64 + rng.gen_range(0.0..0.9)) / n as f64).collect();
        scores.shuffle(&mut rng);
        let dets: Vec<Detection> = (0..n)
            .map(|i| {
                let (x, y) = (rng.gen_range(0.0..60.0), rng.gen_range(0.0..60.0));
                let (w, h) = (rng.gen_range(5.0..40.0), rng.gen_range(5.0..40.0));
                Detection::person(BBox::new(x, y, x + w, y + h), scores[i])
            })
            .collect();
        let t = rng.gen_range(0.1..0.9);
        let kept: BTreeSet<usize> = detect::nms(&dets, t)
            .iter()
            .map(|k| dets.iter().position(|d| d == k).unwrap())
            .collect();
        check!(kept == nms_brute_force(&dets, t), "nms differs from brute force on set {set}");
    }
    for _ in 0..100 {
        let (h, w) = (rng.gen_range(8..80), rng.gen_range(8..80));
        let canvas = rand_image(&mut rng, h, w, 3);
        let (x1, y1) = (rng.gen_range(-10.0..w as f64), rng.gen_range(-10.0..h as f64));
        let det = Detection::person(BBox::new(x1, y1, x1 + rng.gen_range(1.0..50.0), y1 + rng.gen_range(1.0..50.0)), 0.9);
        let region = detect::crop_person(&canvas, &det, rng.gen_range(0.0..0.3));
        check!(detect::paste_back(&canvas, &region, &region.crop)? == canvas, "crop->paste changed the canvas");
    }
    let seg = SegModel::new(U2NetSpec::scaled(8, 64), 1)?;
    let garment = GanModel::new(GeneratorSpec { base_channels: 2, global_downsamples: 2, residual_blocks: 1, ..Default::default() }, 16, 2)?;
    let scenes = synth_samples(20, 64, 77, DEFAULT_LABEL)?;
    for (i, scene) in scenes.iter().enumerate() {
        let boxes: Vec<[f64; 4]> = (0..rng.gen_range(1..=2))
            .map(|_| {
                let (x, y) = (rng.gen_range(0.0..0.6), rng.gen_range(0.0..0.6));
                [x, y, x + rng.gen_range(0.2..0.4), y + rng.gen_range(0.2..0.4)]
            })
            .collect();
        let backend = FixedBackend { boxes: boxes.clone(), score: 0.9 };
        let dcfg = DetectorConfig { backend: "fixed".into(), boxes, ..Default::default() };
        let feather = [0.0, 1.0, 2.5, 4.0][i % 4];
        let opts = TryOnOptions { feather: Some(feather), ..Default::default() };
        let res = tryon_with(&scene.image, &seg, &garment, &backend, &dcfg, &PipelineConfig::default(), &opts)?;
        let reach = if feather > 0.0 { (3.0 * (feather / 3.0)).ceil().max(1.0) as isize } else { 0 };
        let (h, w) = (scene.image.height(), scene.image.width());
        let mut touched = vec![false; h * w];
        for p in &res.persons {
            let b = p.crop_region.source_box;
            for r in 0..p.mask.height() {
                for c in 0..p.mask.width() {
                    if !p.mask.get(r, c) {
                        continue;
                    }
                    for dy in -reach..=reach {
                        for dx in -reach..=reach {
                            let (y, x) = (b.y0 as isize + r as isize + dy, b.x0 as isize + c as isize + dx);
                            if (0..h as isize).contains(&y) && (0..w as isize).contains(&x) {
                                touched[y as usize * w + x as usize] = true;
                            }
                        }
                    }
                }
            }
        }
        for r in 0..h {
            for c in 0..w {
                if !touched[r * w + c] {
                    check!(res.output.pixel(r, c) == scene.image.pixel(r, c), "scene {i}: pixel ({r},{c}) changed outside the feathered mask");
                }
            }
        }
    }
    Ok(String::new())
}

fn zero_strength() -> [GeometricTransform; 5] {
    [
        GeometricTransform::new(TransformParams::Perspective { corners: [[0.0; 2]; 4] }),
        GeometricTransform::new(TransformParams::PiecewiseAffine { rows: 3, cols: 5, displacements: vec![[0.0; 2]; 15] }),
        GeometricTransform::new(TransformParams::Elastic { field_seed: 4, alpha: 0.0, sigma: 5.0 }),
        GeometricTransform::new(TransformParams::Shear { degrees: 0.0 }),
        GeometricTransform::new(TransformParams::Scale { sx: 1.0, sy: 1.0 }),
    ]
}

fn augmentation() -> Check {
    let samples = synth_samples(10, 64, 5, DEFAULT_LABEL)?;
    let mut worst = 1f64;
    for kind in TransformKind::ALL {
        let cfg = AugmentConfig::only(kind);
        for seed in 0..100u64 {
            let t = augment::sample_transform(&cfg, seed)?;
            let s = samples[seed as usize % samples.len()].paired();
            let out = augment::augment_pair(&t, &s);
            check!(out.mask.data().iter().all(|&v| v <= 1), "{kind:?} seed {seed}: non-binary mask");
            let soft = BinaryMask::from_image(&augment::apply_transform(&t, &s.mask.to_image(), Interp::Bilinear), 0.5);
            let agree = soft.data().iter().zip(out.mask.data()).filter(|(a, b)| a == b).count() as f64 / soft.data().len() as f64;
            worst = worst.min(agree);
            check!(agree >= 0.99, "{kind:?} seed {seed}: paired-warp agreement {agree:.4}");
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for t in zero_strength() {
        for (h, w, ch) in [(13, 17, 3), (32, 20, 1)] {
            let img = rand_image(&mut rng, h, w, ch);
            for interp in [Interp::Bilinear, Interp::Nearest] {
                let out = augment::apply_transform(&t, &img, interp);
                let diff = out.data().iter().zip(img.data()).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
                check!(diff <= 1e-6, "zero-strength {:?} {interp:?} moved pixels by {diff}", t.kind());
            }
        }
    }
    Ok(format!("lowest paired-warp agreement {:.4}", worst))
}

fn service_contract() -> Check {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async {
        use common::*;
        let dir = tempfile::tempdir()?;
        stub_bundle(dir.path(), "full-frame");
        let app = app(Some(stub_pipeline(dir.path(), DetectorConfig::default())), 2);
        let img = person_png(48, 36);
        let ok = || tryon_request(&[("image", &img), ("garment_id", b"g1")]);

        let (status, ct, first) = send(&app, ok()).await;
        check!(status == 200 && ct == "image/png", "valid request gave {status} {ct}");
        let decoded = ImageBuffer::decode(&first)?;
        check!((decoded.height(), decoded.width()) == (48, 36), "output size {}x{}", decoded.height(), decoded.width());
        let (_, _, again) = send(&app, ok()).await;
        check!(again == first, "repeated request bytes differ");

        let (status, _, body) = send(&app, tryon_request(&[("image", &img), ("garment_id", b"missing")])).await;
        let err: serde_json::Value = serde_json::from_slice(&body)?;
        check!(status == 404 && err == serde_json::json!({"error": "unknown garment"}), "unknown garment gave {status} {err}");
        let (status, _, _) = send(&app, tryon_request(&[("image", &[0x89]), ("garment_id", b"g1")])).await;
        check!(status == 400, "corrupt image gave {status}");

        let nobody = tempfile::tempdir()?;
        stub_bundle(nobody.path(), "fixed");
        let empty = app_with(nobody.path());
        let (status, _, _) = send(&empty, ok()).await;
        check!(status == 422, "no person gave {status}");

        let unloaded = common::app(None, 2);
        let (status, _, _) = send(&unloaded, ok()).await;
        check!(status == 503, "missing bundle gave {status}");

        let handles: Vec<_> = (0..8)
            .map(|_| {
                let app = app.clone();
                let img = img.clone();
                tokio::spawn(async move { send(&app, tryon_request(&[("image", &img), ("garment_id", b"g1")])).await })
            })
            .collect();
        for h in handles {
            let (status, _, body) = h.await?;
            check!(status == 200 && body == first, "concurrent request differs from serial result (status {status})");
        }
        Ok(String::new())
    })
}

fn app_with(dir: &std::path::Path) -> axum::Router {
    common::app(Some(common::stub_pipeline(dir, common::no_person_detect())), 2)
}
