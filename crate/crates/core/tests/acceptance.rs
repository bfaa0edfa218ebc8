//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! The desk-scale criteria train a reduced model from scratch on a
//! procedural exemplar, which takes tens of minutes on a single core.

use std::time::Instant;

use cooctex::config::RunConfig;
use cooctex::cooc::{cooc_matrix, cooc_tensor, cooc_volume, fit_palette, loss, CoocParams, Palette};
use cooctex::dataset::{build_from_image, Dataset};
use cooctex::evaluation::{self, condition_fidelity, measure, stability_loop, stability_report};
use cooctex::model::{Critic, Generator, NoiseTensor};
use cooctex::synthesis::{edit_bin, synth_large, synthesize, CellRect, CoocLayout, Placement};
use cooctex::training::{init_checkpoint, train, TrainOptions};
use cooctex::{imageio, procedural, seed, Checkpoint, CoocMatrix, CoocTensor};
use ndarray::{s, Array2, Array3, Array4};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_palette(k: usize, rng: &mut impl Rng) -> Palette {
    let centers = (0..k)
        .map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
        .collect();
    let spreads = (0..k)
        .map(|_| [rng.random_range(0.15..0.5), rng.random_range(0.15..0.5), rng.random_range(0.15..0.5)])
        .collect();
    Palette::new(centers, spreads).unwrap()
}

fn soft(pal: &Palette, px: [f64; 3]) -> Vec<f64> {
    pal.centers()
        .iter()
        .zip(pal.spreads())
        .map(|(c, sd)| (-(0..3).map(|i| ((px[i] - c[i]) / sd[i]).powi(2)).sum::<f64>()).exp())
        .collect()
}

/// Every ordered pair `(p, q)` of pixels in `img` within Chebyshev
/// distance `r`, Gaussian-weighted, normalised.
fn brute_matrix(img: &Array3<f64>, pal: &Palette, r: isize, sigma_sq: f64) -> Array2<f64> {
    let (h, w, _) = img.dim();
    let k = pal.k();
    let weights: Vec<Vec<f64>> = (0..h * w)
        .map(|i| soft(pal, [img[[i / w, i % w, 0]], img[[i / w, i % w, 1]], img[[i / w, i % w, 2]]]))
        .collect();
    let mut m = Array2::<f64>::zeros((k, k));
    for p in 0..h * w {
        for q in 0..h * w {
            let dy = (q / w) as isize - (p / w) as isize;
            let dx = (q % w) as isize - (p % w) as isize;
            if dy.abs() > r || dx.abs() > r {
                continue;
            }
            let g = (-((dy * dy + dx * dx) as f64) / (2.0 * sigma_sq)).exp();
            for a in 0..k {
                for b in 0..k {
                    m[[a, b]] += g * weights[p][a] * weights[q][b];
                }
            }
        }
    }
    let z = m.sum();
    m / z
}

fn random_image(h: usize, w: usize, rng: &mut impl Rng) -> Array3<f64> {
    Array3::from_shape_fn((h, w, 3), |_| rng.random_range(0.0..1.0))
}

fn oracle_equivalence() -> Outcome {
    let clock = Instant::now();
    let mut rng = seed::rng(1, "oracle");
    let mut worst = 0.0f64;
    for size in [16usize, 32] {
        for k in [2usize, 4] {
            let pal = random_palette(k, &mut rng);
            let img = random_image(size, size, &mut rng);
            let whole = CoocParams::new(2 * size + 1, 5, 4.0).unwrap();
            let fast = cooc_matrix(img.view(), &pal, &whole).unwrap();
            let oracle = brute_matrix(&img, &pal, 2, 4.0);
            worst = worst.max((fast.values() - &oracle).mapv(f64::abs).fold(0.0, |a, b| a.max(*b)));

            let patch = 7usize;
            let params = CoocParams::new(patch, 5, 4.0).unwrap();
            let vol = cooc_volume(img.view(), &pal, &params).unwrap();
            let pr = patch / 2;
            for cy in 0..size {
                for cx in 0..size {
                    let (y0, y1) = (cy.saturating_sub(pr), (cy + pr + 1).min(size));
                    let (x0, x1) = (cx.saturating_sub(pr), (cx + pr + 1).min(size));
                    let sub = img.slice(s![y0..y1, x0..x1, ..]).to_owned();
                    let oracle = brute_matrix(&sub, &pal, 2, 4.0);
                    let got = vol.matrix_at(cy, cx);
                    worst = worst.max((got.values() - &oracle).mapv(f64::abs).fold(0.0, |a, b| a.max(*b)));
                }
            }
        }
    }
    let secs = clock.elapsed().as_secs_f64();
    outcome(worst <= 1e-6 && secs < 30.0, format!("max abs diff {worst:.2e}, {secs:.1}s"))
}

fn statistic_invariants() -> Outcome {
    let mut checked = 0usize;
    let mut worst = (0.0f64, 0.0f64, 0.0f64);
    let params = CoocParams::new(17, 7, 4.0).unwrap();
    for (t, pattern) in [procedural::Pattern::Blobs, procedural::Pattern::Cells, procedural::Pattern::Stripes]
        .into_iter()
        .enumerate()
    {
        let tex = procedural::generate(pattern, 256, 256, t as u64);
        let pal = fit_palette(tex.view(), 4, 5).unwrap();
        let origins = cooctex::dataset::extract_crops(256, 256, 67, 32, t as u64).unwrap();
        for (y, x) in origins {
            if checked == 200 {
                break;
            }
            let crop = tex.slice(s![y..y + 32, x..x + 32, ..]);
            let m = cooc_matrix(crop, &pal, &params).unwrap();
            let tensor = cooc_tensor(crop, &pal, &params, 8).unwrap();
            let mut mats = vec![m.values().clone()];
            let (th, tw) = tensor.dim();
            for ty in 0..th {
                for tx in 0..tw {
                    mats.push(tensor.matrix_view(ty, tx).to_owned());
                }
            }
            for v in mats {
                worst.0 = worst.0.min(v.fold(f64::INFINITY, |a, b| a.min(*b)));
                worst.1 = worst.1.max((v.sum() - 1.0).abs());
                worst.2 = worst.2.max((&v - &v.t()).mapv(f64::abs).fold(0.0, |a, b| a.max(*b)));
            }
            checked += 1;
        }
    }
    let pass = checked == 200 && worst.0 >= 0.0 && worst.1 <= 1e-6 && worst.2 <= 1e-6;
    outcome(
        pass,
        format!("{checked} crops, min entry {:.2e}, max |sum-1| {:.2e}, max asymmetry {:.2e}", worst.0, worst.1, worst.2),
    )
}

fn differentiable_loss() -> Outcome {
    let clock = Instant::now();
    let mut rng = seed::rng(2, "fd");
    let pal = random_palette(3, &mut rng);
    let params = CoocParams::new(5, 3, 2.0).unwrap();
    let mut ok = 0usize;
    let mut total = 0usize;
    for size in [8usize, 16] {
        let img = Array3::from_shape_fn((size, size, 3), |_| rng.random_range(0.05..0.95));
        let other = Array3::from_shape_fn((size, size, 3), |_| rng.random_range(0.05..0.95));
        let target = cooc_tensor(other.view(), &pal, &params, 4).unwrap();
        let analytic = loss::cooc_loss(img.view(), &target, &pal, &params).unwrap().grad;
        let h = 1e-5;
        for (y, x, c) in ndarray::indices((size, size, 3)) {
            let mut p = img.clone();
            p[[y, x, c]] += h;
            let lp = loss::cooc_loss_value(p.view(), &target, &pal, &params).unwrap();
            p[[y, x, c]] -= 2.0 * h;
            let lm = loss::cooc_loss_value(p.view(), &target, &pal, &params).unwrap();
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic[[y, x, c]];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            total += 1;
            ok += usize::from(rel <= 1e-3);
        }
    }
    let secs = clock.elapsed().as_secs_f64();
    let frac = ok as f64 / total as f64;
    outcome(frac >= 0.99 && secs < 300.0, format!("{ok}/{total} coordinates within 1e-3 ({:.2}%), {secs:.1}s", 100.0 * frac))
}

fn shape_contracts() -> Outcome {
    let run = RunConfig::default();
    let g = Generator::new(run.generator_config(), 1).unwrap();
    let d = Critic::new(run.critic_config(), 2).unwrap();
    let mut details = Vec::new();
    let mut pass = true;
    for (h, w) in [(4usize, 4usize), (4, 8)] {
        let mut rng = seed::rng(3, "shape");
        let cond = Array4::from_shape_fn((1, run.k * run.k, h, w), |_| rng.random_range(-1.0..1.0));
        let z = NoiseTensor::sample(h, w, run.noise_channels, 4).to_batch();
        let out = g.generate(&z, &cond).unwrap();
        let expected = (1, 3, 32 * h, 32 * w);
        let score = d.score(&out, &cond).unwrap();
        let ok = out.dim() == expected && score.len() == 1 && score.iter().all(|v| v.is_finite());
        pass &= ok;
        details.push(format!("{h}x{w} -> {}x{}x3, D = {:.4}", out.dim().2, out.dim().3, score[0]));
    }
    outcome(pass, details.join("; "))
}

fn editing_math() -> Outcome {
    let mut rng = seed::rng(4, "edit");
    let mut worst = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let k = rng.random_range(2..=8);
        let mut v = Array2::from_shape_fn((k, k), |_| rng.random_range(0.0..1.0));
        v = &v + &v.t();
        v /= v.sum();
        let m = CoocMatrix::new(v).unwrap();
        let (a, b) = (rng.random_range(0..k), rng.random_range(0..k));
        let f = 10f64.powf(rng.random_range(-1.0..1.0));
        let e = edit_bin(&m, a, b, f).unwrap();
        let back = edit_bin(&e, a, b, 1.0 / f).unwrap();
        worst.0 = worst.0.max((e.values().sum() - 1.0).abs());
        worst.1 = worst.1.max(e.max_asymmetry());
        worst.2 = worst.2.max(back.l1_distance(&m));
    }
    let pass = worst.0 <= 1e-6 && worst.1 <= 1e-6 && worst.2 <= 1e-6;
    outcome(pass, format!("max |sum-1| {:.2e}, max asymmetry {:.2e}, max round-trip L1 {:.2e}", worst.0, worst.1, worst.2))
}

struct Desk {
    ckpt: Checkpoint,
    dataset: Dataset,
    before: evaluation::Fidelity,
    after: evaluation::Fidelity,
    minutes: f64,
    epochs: usize,
}

fn desk_training() -> Desk {
    let run = RunConfig::desk();
    let clock = Instant::now();
    let exemplar = procedural::graded(256, 1024, run.seed);
    let dataset = build_from_image(&imageio::to_rgb8(exemplar.view()), "graded", &run.dataset_config()).unwrap();
    let held_out: Vec<CoocTensor> = dataset.test.iter().map(|s| s.tensor.clone()).collect();
    let ckpt = init_checkpoint(dataset.stats.clone(), &run).unwrap();
    let before = condition_fidelity(&ckpt, &held_out, 7).unwrap();
    let (ckpt, _) = train(ckpt, &dataset, &run.train, run.seed, &TrainOptions::default(), |epoch, _, log| {
        let cooc = log.epoch_mean(epoch, |r| r.cooc).unwrap_or(f64::NAN);
        eprintln!("  desk epoch {epoch}: train cooc loss {cooc:.4} ({:.1} min)", clock.elapsed().as_secs_f64() / 60.0);
    })
    .unwrap();
    let after = condition_fidelity(&ckpt, &held_out, 7).unwrap();
    Desk {
        ckpt,
        dataset,
        before,
        after,
        minutes: clock.elapsed().as_secs_f64() / 60.0,
        epochs: run.train.epochs,
    }
}

fn desk_criterion(desk: &Desk) -> Outcome {
    let drop = desk.before.matched / desk.after.matched;
    let ratio = desk.after.ratio();
    let pass = drop >= 1.5 && ratio >= 1.3 && desk.epochs <= 30 && desk.minutes <= 240.0;
    outcome(
        pass,
        format!(
            "held-out loss {:.3} -> {:.3} ({drop:.2}x), shuffled/matched {:.3}/{:.3} = {ratio:.2}x, {} epochs, {:.1} min",
            desk.before.matched, desk.after.matched, desk.after.shuffled, desk.after.matched, desk.epochs, desk.minutes
        ),
    )
}

fn stability(desk: &Desk) -> Outcome {
    let traces: Vec<_> = desk
        .dataset
        .test
        .iter()
        .enumerate()
        .map(|(i, s)| stability_loop(&desk.ckpt, &s.tensor, seed::derive_indexed(0, "stability", i as u64), 10).unwrap())
        .collect();
    let report = stability_report(&traces).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("stability.csv");
    evaluation::write_stability_csv(&csv, &traces, &report).unwrap();
    let rows = std::fs::read_to_string(&csv).map(|t| t.lines().count()).unwrap_or(0);
    let means: Vec<String> = report.means.iter().map(|m| format!("{m:.3}")).collect();
    outcome(
        report.drift <= 0.25 && rows == traces.len() + 2,
        format!("drift {:.1}% over {} items, means [{}], csv rows {rows}", 100.0 * report.drift, traces.len(), means.join(", ")),
    )
}

fn warm_share(t: &CoocTensor) -> f64 {
    let v = t.values();
    v.slice(s![.., .., 0]).sum() / (v.dim().0 * v.dim().1) as f64
}

fn large_synthesis(desk: &Desk) -> Outcome {
    let ckpt = &desk.ckpt;
    let s_px = ckpt.stats.downsample;
    let source = &desk.dataset.test[0].tensor;
    let constant = CoocTensor::constant(&source.matrix_at(1, 1), 3, 5, s_px).unwrap();
    let uniform = CoocLayout::uniform(constant.clone(), 3, 5).unwrap();
    let exact = synth_large(ckpt, &uniform, 11, 1).unwrap() == synthesize(ckpt, &constant, 11).unwrap();

    let mut tensors: Vec<&CoocTensor> = desk.dataset.test.iter().map(|s| &s.tensor).collect();
    tensors.sort_by(|a, b| warm_share(a).total_cmp(&warm_share(b)));
    let (a, b) = (tensors[0].clone(), tensors[tensors.len() - 1].clone());
    let (h, w) = (4usize, 8usize);
    let rect = |x, w| CellRect { y: 0, x, h, w };
    let layout = CoocLayout::new(
        vec![a, b],
        vec![Placement { source: 0, rect: rect(0, w / 2) }, Placement { source: 1, rect: rect(w / 2, w / 2) }],
        h,
        w,
    )
    .unwrap();
    let image = synth_large(ckpt, &layout, 12, 1).unwrap();
    let measured = measure(&ckpt.stats, image.view()).unwrap();
    let hard = layout.assemble(0, s_px).unwrap();
    let mut own = [0.0f64; 2];
    let mut other = [0.0f64; 2];
    for y in 0..h {
        for x in 0..w {
            let r = layout.owners()[[y, x]];
            let got = measured.matrix_at(y, x);
            let src = |i: usize| {
                let t = &layout.sources()[i];
                let (th, tw) = t.dim();
                t.matrix_at(y % th, x % tw)
            };
            own[r] += got.l1_distance(&src(r));
            other[r] += got.l1_distance(&src(1 - r));
            debug_assert_eq!(hard.matrix_at(y, x), src(r));
        }
    }
    let regions_ok = own[0] < other[0] && own[1] < other[1];
    outcome(
        exact && regions_ok,
        format!(
            "constant layout pixel-exact: {exact}; region A own/other {:.3}/{:.3}, region B own/other {:.3}/{:.3}",
            own[0], other[0], own[1], other[1]
        ),
    )
}

fn report(name: &str, o: &Outcome, failures: &mut usize) {
    let tag = if o.pass { "PASS" } else { "FAIL" };
    if !o.pass {
        *failures += 1;
    }
    println!("{tag} {name}: {}", o.detail);
}

fn main() {
    let mut failures = 0;
    report("cooc oracle equivalence", &oracle_equivalence(), &mut failures);
    report("statistic invariants", &statistic_invariants(), &mut failures);
    report("differentiable loss", &differentiable_loss(), &mut failures);
    report("shape contracts", &shape_contracts(), &mut failures);
    report("editing math", &editing_math(), &mut failures);
    let desk = desk_training();
    report("desk-scale training", &desk_criterion(&desk), &mut failures);
    report("stability loop", &stability(&desk), &mut failures);
    report("large synthesis", &large_synthesis(&desk), &mut failures);
    println!("{} of 8 criteria passed", 8 - failures);
}
