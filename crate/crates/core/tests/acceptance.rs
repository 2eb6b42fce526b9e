//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use conceptcf::attribution::{crp_attribute, lrp_attribute};
use conceptcf::classifier::{train_classifier, Architecture, ClassifierModel, ClassifierTrainConfig, Objective};
use conceptcf::config::RunConfig;
use conceptcf::data::{quantize, synthetic_dataset, SyntheticConfig};
use conceptcf::diffusion::{
    build_schedule, ddim_step, estimate_x0, forward_diffuse, sample_from, ScheduleKind, StepNoise,
};
use conceptcf::guidance::{
    guidance_score, masked_gradient_for, select_concepts, ConceptMask, GuidanceContext,
};
use conceptcf::metrics::{fid, ratio_from_differences, MetricReport};
use conceptcf::pipeline::{cmd_evaluate, cmd_generate, cmd_index, cmd_train, load_components, load_dataset, splits, Layout};
use conceptcf::target::{Distance, EncodingMode, ReferenceIndex};
use ndarray::{Array1, Array2, Array3, ArrayD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: RunConfig,
}

impl Fixture {
    fn config_for(&self, k: Option<usize>) -> RunConfig {
        let mut c = self.config.clone();
        c.counterfactual.k = k;
        c.paths.output = self.root.join(format!("out_{}", k.map_or("all".to_string(), |k| k.to_string())));
        c
    }
}

fn base_config(root: &Path) -> RunConfig {
    let mut c = RunConfig::default();
    c.paths.checkpoints = root.join("checkpoints");
    c.paths.output = root.join("out_10");
    c
}

fn build_fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = base_config(&root);
    cmd_train(&config, false).unwrap();
    cmd_index(&config).unwrap();
    Fixture {
        _dir: dir,
        root,
        config,
    }
}

fn random_image(rng: &mut ChaCha8Rng, shape: [usize; 3]) -> Array3<f64> {
    Array3::from_shape_fn((shape[0], shape[1], shape[2]), |_| rng.gen_range(-1.0..1.0))
}

fn small_resnet() -> ClassifierModel {
    let data = synthetic_dataset(&SyntheticConfig {
        samples: 400,
        ..Default::default()
    })
    .unwrap();
    let cfg = ClassifierTrainConfig {
        arch: Architecture::ResNet,
        width: 8,
        epochs: 1,
        ..Default::default()
    };
    train_classifier(&data, &cfg, None).unwrap().0
}

fn a1(models: &[&ClassifierModel]) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_full, mut cases) = (0.0f64, 0);
    for model in models {
        for layer in model.concept_layers().to_vec() {
            let k = model.layer_shape(&layer).map_err(e)?[0];
            let [_, lh, lw] = <[usize; 3]>::try_from(model.layer_shape(&layer).map_err(e)?).unwrap();
            for _ in 0..5 {
                let x = random_image(&mut rng, model.input_shape());
                let target = rng.gen_range(0..model.num_classes());
                let obj = Objective::LogProb(target);
                let plain = model.input_gradient(&x, &obj).map_err(e)?;
                let full = masked_gradient_for(model, &x, &obj, &ConceptMask::full(&layer, k)).map_err(e)?;
                worst_full = worst_full.max((&full.input - &plain).iter().fold(0.0, |m, v| m.max(v.abs())));
                let empty = masked_gradient_for(model, &x, &obj, &ConceptMask::empty(&layer, k)).map_err(e)?;
                ensure(
                    empty.input.iter().all(|&v| v == 0.0) && empty.layer.iter().all(|&v| v == 0.0),
                    format!("empty mask left a non-zero gradient at {layer}"),
                )?;
                let chosen: Vec<usize> = (0..k).filter(|_| rng.gen_bool(0.3)).collect();
                let mut mask = ConceptMask::from_channels(&layer, k, &chosen);
                for &c in chosen.iter().take(2) {
                    mask.spatial.push((c, Array2::from_shape_fn((lh, lw), |_| rng.gen_bool(0.5))));
                }
                let g = masked_gradient_for(model, &x, &obj, &mask).map_err(e)?;
                for (c, ch) in g.layer.axis_iter(Axis(0)).enumerate() {
                    let spatial = mask.spatial.iter().find(|(sc, _)| *sc == c).map(|s| &s.1);
                    for ((y, xx), &v) in ch.indexed_iter().map(|(d, v)| ((d[0], d[1]), v)) {
                        let on = mask.channels[c] && spatial.is_none_or(|m| m[[y, xx]]);
                        ensure(on || v == 0.0, format!("off-mask gradient {v} at {layer} channel {c}"))?;
                    }
                }
                cases += 1;
            }
        }
    }
    ensure(worst_full <= 1e-6, format!("full-mask deviation {worst_full:.3e} > 1e-6"))?;
    Ok(format!("{cases} cases, full-mask max |diff| {worst_full:.1e}, empty and off-mask exactly 0"))
}

fn a2() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut inv, mut traj) = (0.0f64, 0.0f64);
    for (steps, kind) in [(100, ScheduleKind::Cosine), (1000, ScheduleKind::Linear)] {
        let s = build_schedule(steps, kind, 0.0).map_err(e)?;
        let x0 = Array1::from_shape_fn(432, |_| rng.gen_range(-1.0..1.0));
        let eps = Array1::from_shape_fn(432, |_| rng.sample::<f64, _>(StandardNormal));
        for t in 1..=steps {
            let xt = forward_diffuse(&x0, t, &s, Some(&eps), &mut rng).map_err(e)?.xt;
            let back = estimate_x0(&xt, t, &eps, &s).map_err(e)?;
            inv = inv.max((&back - &x0).iter().fold(0.0, |m, v| m.max(v.abs())));
            let prev = ddim_step(&xt, t, &eps, &s, None).map_err(e)?;
            let expect = if t == 1 {
                x0.clone()
            } else {
                forward_diffuse(&x0, t - 1, &s, Some(&eps), &mut rng).map_err(e)?.xt
            };
            traj = traj.max((&prev - &expect).iter().fold(0.0, |m, v| m.max(v.abs())));
        }
    }
    ensure(inv <= 1e-5, format!("estimate_x0 error {inv:.3e}"))?;
    ensure(traj <= 1e-5, format!("ddim trajectory error {traj:.3e}"))?;

    let s = build_schedule(100, ScheduleKind::Linear, 0.0).map_err(e)?;
    let n = 10_000;
    let x0 = Array1::from(vec![0.8, -0.5, 0.1, -1.0]);
    let mut worst = 0.0f64;
    for t in [1, 10, 50, 100] {
        let a = s.alpha_bar(t);
        let draws: Vec<Array1<f64>> = (0..n)
            .map(|_| forward_diffuse(&x0, t, &s, None, &mut rng).unwrap().xt)
            .collect();
        for d in 0..x0.len() {
            let v: Vec<f64> = draws.iter().map(|x| x[d]).collect();
            let mean = v.iter().sum::<f64>() / n as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se_mean = ((1.0 - a) / n as f64).sqrt();
            let se_var = (1.0 - a) * (2.0 / (n - 1) as f64).sqrt();
            let zm = (mean - a.sqrt() * x0[d]).abs() / se_mean;
            let zv = (var - (1.0 - a)).abs() / se_var;
            worst = worst.max(zm).max(zv);
        }
    }
    ensure(worst <= 3.0, format!("forward statistics off by {worst:.2} standard errors"))?;
    Ok(format!(
        "inverse {inv:.1e}, ddim {traj:.1e}, forward moments within {worst:.2} SE over {n} draws"
    ))
}

fn a3() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, dim, classes) = (1000, 16, 4);
    for distance in [Distance::Euclidean, Distance::Cosine] {
        let enc = Array2::from_shape_fn((n, dim), |_| rng.gen_range(-1.0..1.0));
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        let ids = (0..n).map(|i| format!("r{i}")).collect();
        let index = ReferenceIndex::from_parts(EncodingMode::activation("x"), distance, enc.clone(), labels.clone(), ids)
            .map_err(e)?;
        for q in 0..1000 {
            let query: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let class = rng.gen_range(0..classes);
            let got = index.nearest_differing(&query, class).map_err(e)?;
            let mut best: Option<(usize, f64)> = None;
            for (r, &label) in labels.iter().enumerate() {
                if label == class {
                    continue;
                }
                let d = distance.eval(&query, enc.row(r).as_slice().unwrap());
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((r, d));
                }
            }
            let (row, dist) = best.unwrap();
            ensure(got.row == row && got.distance == dist, format!("query {q}: row {} vs scan {row}", got.row))?;
            ensure(got.target == labels[row] && got.target != class, format!("query {q}: class constraint violated"))?;
        }
    }
    Ok("2 x 1000 queries on a 1000-point index agree with the exhaustive scan".into())
}

fn a4(models: &[&ClassifierModel]) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst_cons, mut worst_fd) = (0.0f64, 0.0f64);
    for model in models {
        for _ in 0..10 {
            let x = random_image(&mut rng, model.input_shape());
            let pred = model.predict_one(&x).map_err(e)?.class;
            let map = lrp_attribute(model, &x, pred, None).map_err(e)?;
            let rel = (map.relevance.sum() - map.target_score).abs() / map.target_score.abs();
            worst_cons = worst_cons.max(rel);

            let layer = model.default_concept_layer().unwrap().to_string();
            let k = model.layer_shape(&layer).map_err(e)?[0];
            let chosen: Vec<usize> = (0..k).filter(|_| rng.gen_bool(0.25)).collect();
            let crp = crp_attribute(model, &x, pred, &layer, &chosen).map_err(e)?;
            let cond: &ArrayD<f64> = crp.conditioning.as_ref().unwrap();
            for (c, ch) in cond.axis_iter(Axis(0)).enumerate() {
                ensure(
                    chosen.contains(&c) || ch.iter().all(|&v| v == 0.0),
                    format!("conditioned relevance non-zero on channel {c}"),
                )?;
            }
        }
        let x = random_image(&mut rng, model.input_shape());
        let obj = Objective::Logit(0);
        let g = model.input_gradient(&x, &obj).map_err(e)?;
        let [c, h, w] = model.input_shape();
        let h_step = 1e-5;
        for _ in 0..20 {
            let idx = [rng.gen_range(0..c), rng.gen_range(0..h), rng.gen_range(0..w)];
            let f = |delta: f64| {
                let mut xp = x.clone();
                xp[idx] += delta;
                model.logits_one(&xp).unwrap()[0]
            };
            let fd = (f(h_step) - f(-h_step)) / (2.0 * h_step);
            let scale = fd.abs().max(g[idx].abs());
            if scale > 1e-8 {
                worst_fd = worst_fd.max((fd - g[idx]).abs() / scale);
            }
        }
    }
    ensure(worst_cons <= 0.01, format!("conservation error {worst_cons:.3e} > 1%"))?;
    ensure(worst_fd <= 1e-3, format!("finite-difference error {worst_fd:.3e} > 1e-3"))?;
    Ok(format!(
        "conservation within {:.3}%, conditioned relevance exactly 0 off-condition, finite differences within {worst_fd:.1e}",
        worst_cons * 100.0
    ))
}

fn a8() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = Array2::from_shape_fn((500, 8), |_| rng.sample::<f64, _>(StandardNormal));
    let same = fid(&a, &a).map_err(e)?;
    ensure(same.abs() <= 1e-6, format!("identical sets give {same:.3e}"))?;
    let n = 10_000;
    let base = Array2::from_shape_fn((n, 8), |_| rng.sample::<f64, _>(StandardNormal));
    let d = Array1::from(vec![0.5, -1.0, 0.25, 0.0, 2.0, -0.3, 0.1, 0.7]);
    let shifted = &base + &d;
    let got = fid(&base, &shifted).map_err(e)?;
    let expect = d.dot(&d);
    ensure((got - expect).abs() <= 1e-4, format!("mean shift gives {got} vs {expect}"))?;
    Ok(format!("identical {same:.1e}, mean shift {got:.6} vs |d|^2 = {expect:.6}"))
}

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for &k in &idx[i..=j] {
                r[k] = (i + j) as f64 / 2.0 + 1.0;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let m = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mx, my) = (m(&rx), m(&ry));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sx = rx.iter().map(|a| (a - mx).powi(2)).sum::<f64>().sqrt();
    let sy = ry.iter().map(|b| (b - my).powi(2)).sum::<f64>().sqrt();
    if sx == 0.0 || sy == 0.0 {
        0.0
    } else {
        cov / (sx * sy)
    }
}

/// Reports for k = 1, 5, 10, 20, K in that order.
fn k_sweep(fx: &Fixture) -> std::result::Result<Vec<MetricReport>, String> {
    let ks = [Some(1), Some(5), Some(10), Some(20), None];
    for k in ks {
        let s = cmd_generate(&fx.config_for(k)).map_err(e)?;
        ensure(s.failed.is_empty(), format!("k = {k:?}: {} generations failed", s.failed.len()))?;
    }
    let extra: Vec<PathBuf> = ks
        .iter()
        .filter(|k| **k != Some(10))
        .map(|&k| fx.config_for(k).paths.output)
        .collect();
    let summary = cmd_evaluate(&fx.config_for(Some(10)), &extra, false).map_err(e)?;
    let mut reports = summary.reports;
    let ten = reports.remove(0);
    reports.insert(2, ten);
    Ok(reports)
}

fn a5(r: &[MetricReport]) -> Check {
    let (ten, all) = (&r[2], &r[4]);
    ensure(ten.samples >= 200, format!("only {} evaluation samples", ten.samples))?;
    ensure(ten.flip_ratio >= 0.6, format!("k = 10 flip ratio {:.4} < 0.6", ten.flip_ratio))?;
    ensure(
        ten.l1 < all.l1,
        format!("k = 10 L1 {:.4} not below k = K L1 {:.4}", ten.l1, all.l1),
    )?;
    Ok(format!(
        "{} samples, k = 10 flip ratio {:.4}, L1 {:.4} < {:.4} at k = K = {}",
        ten.samples, ten.flip_ratio, ten.l1, all.l1, all.k
    ))
}

fn inversions(v: &[f64]) -> usize {
    v.windows(2).filter(|w| w[1] < w[0]).count()
}

fn a6(r: &[MetricReport]) -> Check {
    let ks: Vec<f64> = r.iter().map(|m| m.k as f64).collect();
    let flips: Vec<f64> = r.iter().map(|m| m.flip_ratio).collect();
    let rho = spearman(&ks, &flips);
    let l1: Vec<f64> = r.iter().map(|m| m.l1).collect();
    let fids: Vec<f64> = r.iter().map(|m| m.fid).collect();
    let (il1, ifid) = (inversions(&l1), inversions(&fids));
    let detail = format!(
        "flip {:?}, Spearman {rho:.3}; L1 inversions {il1}, FID inversions {ifid}",
        flips.iter().map(|f| (f * 1000.0).round() / 1000.0).collect::<Vec<_>>()
    );
    ensure(rho > 0.0, format!("non-positive Spearman: {detail}"))?;
    ensure(il1 <= 1 || ifid <= 1, format!("minimality not monotone: {detail}"))?;
    Ok(detail)
}

fn a7(ten: &MetricReport) -> Check {
    let v = ten.validity.as_ref().ok_or("validity not computed")?;
    let share = v.wins as f64 / ten.samples as f64;
    ensure(share >= 0.9, format!("selected beats random on {:.1}% of samples", share * 100.0))?;
    ensure(v.sign_test_p < 0.01, format!("sign test p = {:.3e}", v.sign_test_p))?;
    let diff = [0.3, 2.0, 0.0, 1.5, 0.7, 0.2];
    for sel in [vec![1], vec![1, 3], vec![1, 3, 4]] {
        let r = ratio_from_differences(&diff, &sel).ok_or("no ratio")?;
        ensure(r == 1.0, format!("optimal fit {sel:?} gives {r}"))?;
    }
    Ok(format!(
        "selected beats random on {}/{} samples (p = {:.2e}), mean {:.3} vs {:.3}; optimal fit exactly 1.0",
        v.wins,
        ten.samples,
        v.sign_test_p,
        v.mean_selected.unwrap_or(f64::NAN),
        v.mean_random.unwrap_or(f64::NAN)
    ))
}

fn a9(fx: &Fixture) -> Check {
    let config = fx.config_for(Some(10));
    let c = load_components(&config).map_err(e)?;
    let data = load_dataset(&config).map_err(e)?;
    let eval = splits(&config, &data).evaluation;
    let layer = c.model.default_concept_layer().unwrap().to_string();
    let k = c.model.layer_shape(&layer).map_err(e)?[0];
    let guidance = config.counterfactual.guidance.clone();
    let susp = guidance.suspension_steps;
    let t_start = config.counterfactual.start_step(c.schedule.steps());
    let mut masked_differs = 0;
    for i in 0..5 {
        let x = quantize(&eval.images[i]);
        let target = (c.model.predict_one(&x).map_err(e)?.class + 1) % c.model.num_classes();
        let sel = select_concepts(&c.model, &x, target, &layer, 10).map_err(e)?;
        let partial = ConceptMask::from_selection(&sel);
        let full = ConceptMask::full(&layer, k);
        let ctx = |mask| GuidanceContext {
            denoiser: &c.denoiser,
            codec: &c.codec,
            model: &c.model,
            schedule: &c.schedule,
            config: &guidance,
            target,
            mask,
            original: &x,
        };
        let noise = StepNoise::new(i as u64);
        let z0 = c.codec.encode(&x).map_err(e)?;
        let start = forward_diffuse(&z0, t_start, &c.schedule, Some(&noise.start(z0.len())), &mut ChaCha8Rng::seed_from_u64(0))
            .map_err(e)?
            .xt;
        let run = |mask, z: Array1<f64>, t: usize| -> std::result::Result<Vec<Array1<f64>>, String> {
            let cx = ctx(mask);
            let mut hook = |z: &Array1<f64>, t: usize, eps: &Array1<f64>| guidance_score(&cx, z, t, eps).map(|s| s.score);
            let mut traj = Vec::new();
            sample_from(
                &c.denoiser,
                &c.schedule,
                z,
                t,
                None,
                Some(&mut hook),
                &noise,
                c.codec.x0_bound(),
                Some(&mut traj),
            ).map_err(e)?;
            Ok(traj)
        };
        let masked = run(&partial, start.clone(), t_start)?;
        let unmasked = run(&full, start, t_start)?;
        // masked[j] is the state after the step at t = t_start - j
        let entry = masked[t_start - susp - 1].clone();
        let window = run(&full, entry, susp)?;
        ensure(
            window.as_slice() == &masked[t_start - susp..],
            format!("sample {i}: suspension window differs from the all-channel trajectory"),
        )?;
        masked_differs += (masked[t_start - susp - 1] != unmasked[t_start - susp - 1]) as usize;
    }
    Ok(format!(
        "last {susp} of {t_start} steps bit-identical to the all-channel mask on 5 samples ({masked_differs} differ before the window)"
    ))
}

fn a10(fx: &Fixture) -> Check {
    let dir = tempfile::tempdir().map_err(e)?;
    let mut config = base_config(dir.path());
    config.paths.output = dir.path().join("out_10");
    cmd_train(&config, false).map_err(e)?;
    cmd_index(&config).map_err(e)?;
    cmd_generate(&config).map_err(e)?;
    cmd_evaluate(&config, &[], false).map_err(e)?;
    let a = std::fs::read(Layout::new(&fx.config_for(Some(10))).metrics_file()).map_err(e)?;
    let b = std::fs::read(Layout::new(&config).metrics_file()).map_err(e)?;
    ensure(a == b, "metric reports differ")?;
    Ok(format!("two independent runs, {} byte metric reports identical", a.len()))
}

struct Suite {
    failed: usize,
}

impl Suite {
    fn check(&mut self, id: &str, title: &str, f: impl FnOnce() -> Check) {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("{id} PASS {title}: {d} [{secs:.1}s]"),
            Err(d) => {
                self.failed += 1;
                println!("{id} FAIL {title}: {d} [{secs:.1}s]");
            }
        }
    }
}

fn main() {
    let mut suite = Suite { failed: 0 };
    let t = Instant::now();
    let fx = build_fixture();
    let convnet = ClassifierModel::load(&Layout::new(&fx.config).classifier()).unwrap();
    let resnet = small_resnet();
    println!("fixture trained in {:.1}s", t.elapsed().as_secs_f64());

    suite.check("A1", "masking exactness", || a1(&[&convnet, &resnet]));
    suite.check("A2", "sampler identities", a2);
    suite.check("A3", "near-miss oracle", a3);
    suite.check("A4", "attribution conservation", || a4(&[&convnet, &resnet]));
    let sweep = k_sweep(&fx);
    suite.check("A5", "end-to-end toy counterfactuals", || a5(sweep.as_ref().map_err(Clone::clone)?));
    suite.check("A6", "k-sweep trend", || a6(sweep.as_ref().map_err(Clone::clone)?));
    suite.check("A7", "validity ratio", || a7(&sweep.as_ref().map_err(Clone::clone)?[2]));
    suite.check("A8", "FID closed forms", a8);
    suite.check("A9", "suspension equivalence", || a9(&fx));
    suite.check("A10", "reproducibility", || a10(&fx));

    if suite.failed > 0 {
        println!("{} acceptance criteria failed", suite.failed);
        std::process::exit(1);
    }
    println!("all acceptance criteria passed in {:.1}s", t.elapsed().as_secs_f64());
}
