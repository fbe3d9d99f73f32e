//! End-to-end acceptance checks. Each test prints one `ACn PASS|FAIL` line and then asserts.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smoe::export::upscale_kernel;
use smoe::local::{adjust_kernels, AdjustParams, CoronaBlock};
use smoe::metrics::{psnr, psnr_from_mse, ssim};
use smoe::optimizer::{
    compute_gradients, compute_loss, optimize, AdamConfig, LearningRates, OptimizeConfig,
    StopReason,
};
use smoe::pipeline::{self, InitMethod, RunConfig};
use smoe::{modelfile, Domain, GrayImage, Kernel, MixtureModel, Mode};

/// Writes straight to stdout so the line shows up even when the harness captures output.
fn report(id: &str, pass: bool, detail: String) {
    let line = format!("{id} {}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
}

fn random_kernel(rng: &mut ChaCha8Rng, extent: [f64; 2]) -> Kernel {
    Kernel {
        mu: [rng.random_range(0.0..extent[0]), rng.random_range(0.0..extent[1])],
        b: [
            rng.random_range(2.0..12.0),
            rng.random_range(-4.0..4.0),
            rng.random_range(2.0..12.0),
        ],
        pi: rng.random_range(0.05..1.0),
        m: rng.random_range(0.0..1.0),
    }
}

/// Ramp background with random flat or ramped rectangles and disks, bright and dark alternating.
fn structured(seed: u64, n: usize) -> GrayImage {
    struct Shape {
        disk: bool,
        cx: f64,
        cy: f64,
        a: f64,
        b: f64,
        v: f64,
        gx: f64,
        gy: f64,
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = n as f64;
    let dir: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let base: f64 = rng.random_range(0.3..0.5);
    let count = rng.random_range(6..=8);
    let shapes: Vec<Shape> = (0..count)
        .map(|k| {
            let disk = rng.random_bool(0.4);
            let v = if k % 2 == 0 {
                rng.random_range(0.65..0.95)
            } else {
                rng.random_range(0.02..0.25)
            };
            let (gx, gy) = if rng.random_bool(0.3) {
                (rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3))
            } else {
                (0.0, 0.0)
            };
            Shape {
                disk,
                cx: rng.random_range(0.1..0.9) * s,
                cy: rng.random_range(0.1..0.9) * s,
                a: rng.random_range(0.06..0.2) * s,
                b: rng.random_range(0.06..0.2) * s,
                v,
                gx,
                gy,
            }
        })
        .collect();
    GrayImage::from_fn(n, n, |r, c| {
        let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
        let mut v = base + 0.25 * ((x - s / 2.0) * dir.cos() + (y - s / 2.0) * dir.sin()) / s;
        for sh in &shapes {
            let (dx, dy) = (x - sh.cx, y - sh.cy);
            let inside = if sh.disk {
                (dx / sh.a).powi(2) + (dy / sh.a).powi(2) < 1.0
            } else {
                dx.abs() < sh.a && dy.abs() < sh.b
            };
            if inside {
                v = sh.v + (sh.gx * dx + sh.gy * dy) / s;
            }
        }
        v
    })
    .unwrap()
}

/// Block `level` of 20: a constant at level 0, then a sinusoid of rising frequency plus rising noise.
fn battery_block(level: usize) -> CoronaBlock {
    let c = level as f64 / 19.0;
    let f = 0.5 + 4.0 * c;
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + level as u64);
    let img = GrayImage::from_fn(32, 32, |r, col| {
        if level == 0 {
            return 0.5;
        }
        let (x, y) = ((col as f64 + 0.5) / 32.0, (r as f64 + 0.5) / 32.0);
        let wave = 0.3 * (std::f64::consts::TAU * f * x).sin() * (std::f64::consts::TAU * f * 0.7 * y).cos();
        let noise = 0.25 * c * c * rng.random_range(-1.0..1.0);
        (0.5 + wave + noise).clamp(0.0, 1.0)
    })
    .unwrap();
    CoronaBlock::whole(&img, level).unwrap()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn ac01_gates_sum_to_one() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (w, h) = (rng.random_range(4..64), rng.random_range(4..64));
        let domain = Domain::for_image(w, h);
        let ext = domain.extent();
        let l = rng.random_range(1..=64);
        let kernels = (0..l).map(|_| random_kernel(&mut rng, ext)).collect();
        let model = MixtureModel::new(kernels, Mode::SmoeGating, domain).unwrap();
        for _ in 0..100 {
            let x = [rng.random_range(0.0..ext[0]), rng.random_range(0.0..ext[1])];
            let g = model.eval_gates(x).unwrap();
            worst = worst.max((g.sum() - 1.0).abs());
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = worst <= 1e-9 && secs < 10.0;
    report("AC1", pass, format!("max |sum w - 1| = {worst:e}, {secs:.2} s"));
    assert!(pass);
}

#[test]
fn ac02_gradients_match_central_differences() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    for case in 0..100 {
        let img = GrayImage::from_fn(8, 8, |_, _| rng.random_range(0.0..1.0)).unwrap();
        let domain = Domain::for_image(8, 8);
        let l = rng.random_range(1..=5);
        let mode = if case % 4 == 3 { Mode::RbfSum } else { Mode::SmoeGating };
        let kernels = (0..l).map(|_| random_kernel(&mut rng, [1.0, 1.0])).collect();
        let model = MixtureModel::new(kernels, mode, domain).unwrap();
        let lambda = rng.random_range(0.0..1e-2);
        let (_, grads) = compute_gradients(&model, &img, None, lambda).unwrap();
        for j in 0..l {
            for p in 0..7 {
                let perturbed = |d: f64| {
                    let mut m = model.clone();
                    let k = &mut m.kernels[j];
                    match p {
                        0 | 1 => k.mu[p] += d,
                        2..=4 => k.b[p - 2] += d,
                        5 => k.pi += d,
                        _ => k.m += d,
                    }
                    compute_loss(&m, &img, None, lambda).unwrap().total
                };
                let numeric = (perturbed(h) - perturbed(-h)) / (2.0 * h);
                let g = grads.kernels[j];
                let analytic = match p {
                    0 | 1 => g.mu[p],
                    2..=4 => g.b[p - 2],
                    5 => g.pi,
                    _ => g.m,
                };
                let scale = analytic.abs().max(numeric.abs()).max(1e-8);
                let rel = (analytic - numeric).abs() / scale;
                if rel > worst {
                    worst = rel;
                    worst_at = format!("case {case} kernel {j} param {p}: {analytic:e} vs {numeric:e}");
                }
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = worst < 1e-4 && secs < 60.0;
    report("AC2", pass, format!("max relative error {worst:e} ({worst_at}), {secs:.2} s"));
    assert!(pass);
}

#[test]
fn ac03_upscaling_algebra() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut maha, mut bs, mut det) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let k = random_kernel(&mut rng, [1.0, 1.0]);
        let a: f64 = rng.random_range(0.01..4.0);
        let s = a * a;
        let origin = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let g = upscale_kernel(&k, a, origin).unwrap();
        let x = [rng.random_range(-0.5..1.5), rng.random_range(-0.5..1.5)];
        let xg = [origin[0] + a * x[0], origin[1] + a * x[1]];
        let (d0, d1) = (k.mahalanobis_sq(x), g.mahalanobis_sq(xg));
        maha = maha.max((d0 - d1).abs() / d0.max(1.0));
        for i in 0..3 {
            let expect = k.b[i] / s.sqrt();
            bs = bs.max((g.b[i] - expect).abs() / expect.abs().max(1.0));
        }
        let det_of = |c: [[f64; 2]; 2]| c[0][0] * c[1][1] - c[0][1] * c[1][0];
        let (dl, dg) = (det_of(k.covariance()), det_of(g.covariance()));
        det = det.max((dg - s * s * dl).abs() / (s * s * dl).abs());
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = maha <= 1e-12 && bs <= 1e-10 && det <= 1e-10 && secs < 5.0;
    report("AC3", pass, format!("mahalanobis {maha:e}, B {bs:e}, det {det:e}, {secs:.2} s"));
    assert!(pass);
}

#[test]
fn ac04_gating_beats_rbf_on_an_edge() {
    let t = Instant::now();
    let img = GrayImage::from_fn(32, 32, |_, c| if c < 16 { 0.2 } else { 0.8 }).unwrap();
    let init = |mode| {
        MixtureModel::new(
            vec![
                Kernel::radial([0.3, 0.5], 0.2, 0.5, 0.3),
                Kernel::radial([0.7, 0.5], 0.2, 0.5, 0.7),
            ],
            mode,
            Domain::for_image(32, 32),
        )
        .unwrap()
    };
    let config = OptimizeConfig {
        lambda: 0.0,
        max_epochs: 5000,
        adam: AdamConfig {
            lr: LearningRates {
                mu: 1e-3,
                b: 0.5,
                pi: 1e-3,
                m: 1e-3,
            },
            ..AdamConfig::default()
        },
        ..OptimizeConfig::default()
    };
    let gated = optimize(&init(Mode::SmoeGating), &img, None, &config, &mut |_| {}).unwrap();
    let rbf = optimize(&init(Mode::RbfSum), &img, None, &config, &mut |_| {}).unwrap();
    let (pg, pr) = (
        psnr(&img, &gated.model.render_native().unwrap()).unwrap(),
        psnr(&img, &rbf.model.render_native().unwrap()).unwrap(),
    );
    let secs = t.elapsed().as_secs_f64();
    let pass = pg > 40.0 && pr < pg && gated.model.len() == 2 && secs < 120.0;
    report("AC4", pass, format!("smoe {pg:.2} dB, rbf {pr:.2} dB with 2 kernels, {secs:.1} s"));
    assert!(pass);
}

#[test]
fn ac05_constant_image_sparsifies() {
    let t = Instant::now();
    let img = GrayImage::filled(32, 32, 0.6).unwrap();
    let mut config = RunConfig {
        init: InitMethod::Grid,
        ..RunConfig::default()
    };
    config.baseline.target_l = 50;
    config.global.lambda = 1e-3;
    let r = pipeline::fit(&img, &config).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let m = &r.metrics;
    let pass = m.l_init == 50 && m.l_opt <= 5 && m.psnr_db >= 50.0 && secs < 120.0;
    report(
        "AC5",
        pass,
        format!("L {} -> {}, {:.2} dB, {} epochs, {secs:.1} s", m.l_init, m.l_opt, m.psnr_db, m.epochs),
    );
    assert!(pass);
}

#[test]
fn ac06_doubling_follows_complexity() {
    let t = Instant::now();
    let params = AdjustParams {
        max_epochs: 500,
        checkpoint: 100,
        target_psnr: 30.0,
        ..AdjustParams::default()
    };
    let mut doublings = Vec::new();
    let mut bad_exits = Vec::new();
    for level in 0..20 {
        let fit = adjust_kernels(&battery_block(level), &params).unwrap();
        if fit.early_exit && !(fit.achieved_psnr > params.target_psnr) {
            bad_exits.push(level);
        }
        doublings.push(fit.doublings as f64);
    }
    let levels: Vec<f64> = (0..20).map(|l| l as f64).collect();
    let rho = spearman(&levels, &doublings);
    let secs = t.elapsed().as_secs_f64();
    let pass = rho > 0.6 && bad_exits.is_empty() && secs < 600.0;
    report(
        "AC6",
        pass,
        format!("spearman {rho:.3}, doublings {doublings:?}, early exits below target {bad_exits:?}, {secs:.1} s"),
    );
    assert!(pass);
}

#[test]
fn ac07_more_epochs_more_quality() {
    let t = Instant::now();
    let blocks: Vec<CoronaBlock> = (0..20).map(battery_block).collect();
    let means: Vec<f64> = [100, 200, 300, 400]
        .iter()
        .map(|&cap| {
            let params = AdjustParams {
                max_epochs: cap,
                checkpoint: 100,
                target_psnr: 30.0,
                ..AdjustParams::default()
            };
            let total: f64 = blocks
                .iter()
                .map(|b| adjust_kernels(b, &params).unwrap().achieved_psnr)
                .sum();
            total / blocks.len() as f64
        })
        .collect();
    let secs = t.elapsed().as_secs_f64();
    let pass = means.windows(2).all(|w| w[1] > w[0]) && secs < 900.0;
    report("AC7", pass, format!("mean PSNR at 100/200/300/400 epochs {means:.2?}, {secs:.1} s"));
    assert!(pass);
}

#[test]
fn ac08_initialization_ordering() {
    let t = Instant::now();
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..10 {
        let img = structured(seed, 128);
        let base = RunConfig {
            seed,
            ..RunConfig::default()
        };
        let (as_init, _, as_rep) = pipeline::init_only(&img, &base).unwrap();
        let l = as_init.model.len();
        let score = |method| {
            let mut c = RunConfig {
                init: method,
                ..base.clone()
            };
            c.baseline.target_l = l;
            let (init, _, rep) = pipeline::init_only(&img, &c).unwrap();
            let comparable = (init.model.len() as f64 - l as f64).abs() <= 0.1 * l as f64;
            (rep.psnr_db, comparable)
        };
        let (s, s_ok) = score(InitMethod::SSmoe);
        let (g, g_ok) = score(InitMethod::Grid);
        let (k, k_ok) = score(InitMethod::Kmeans);
        let ok = s_ok && g_ok && k_ok && as_rep.psnr_db >= s && s >= g.max(k);
        wins += ok as usize;
        lines.push(format!(
            "seed {seed} L {l}: as {:.2} s {s:.2} grid {g:.2} kmeans {k:.2}",
            as_rep.psnr_db
        ));
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = wins >= 7 && secs < 1200.0;
    report("AC8", pass, format!("{wins}/10 seeds ordered, {secs:.1} s; {}", lines.join("; ")));
    assert!(pass);
}

/// Global fit until `target` dB; returns the pruned kernel count, or `None` if the target was missed.
fn kernels_at_target(img: &GrayImage, config: &RunConfig) -> Option<usize> {
    let r = pipeline::fit(img, config).unwrap();
    (r.metrics.stop == StopReason::TargetPsnr).then_some(r.metrics.l_opt)
}

#[test]
fn ac09_fewer_kernels_at_equal_quality() {
    const TARGET: f64 = 32.0;
    const LADDER: [usize; 10] = [8, 12, 16, 24, 32, 48, 64, 96, 128, 192];
    let t = Instant::now();
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..10 {
        let img = structured(seed, 128);
        let mut base = RunConfig {
            seed,
            ..RunConfig::default()
        };
        base.global.max_epochs = 3000;
        base.global.target_psnr = Some(TARGET);
        base.global.loss_delta_stop = 1e-12;
        let as_l = kernels_at_target(&img, &base);

        // Smallest grid budget that reaches the target, by bisection over the ladder.
        let grid_at = |l: usize| {
            let mut c = RunConfig {
                init: InitMethod::Grid,
                ..base.clone()
            };
            c.baseline.target_l = l;
            kernels_at_target(&img, &c)
        };
        let (mut lo, mut hi) = (0, LADDER.len());
        let mut grid_l = None;
        while lo < hi {
            let mid = (lo + hi) / 2;
            match grid_at(LADDER[mid]) {
                Some(k) => {
                    grid_l = Some(k);
                    hi = mid;
                }
                None => lo = mid + 1,
            }
        }
        let ok = match (as_l, grid_l) {
            (Some(a), Some(g)) => a as f64 <= 0.8 * g as f64,
            (Some(_), None) => true,
            _ => false,
        };
        wins += ok as usize;
        lines.push(format!("seed {seed}: as {as_l:?} grid {grid_l:?}"));
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = wins >= 7 && secs < 2400.0;
    report(
        "AC9",
        pass,
        format!("{wins}/10 seeds with as L_opt <= 0.8 grid L_opt at {TARGET} dB, {secs:.1} s; {}", lines.join("; ")),
    );
    assert!(pass);
}

#[test]
fn ac10_parallel_init_is_faster_and_identical() {
    let t = Instant::now();
    // 4x4 mosaic of textured tiles; all eight neighbours of a tile sit at a different level.
    let img = GrayImage::from_fn(128, 128, |r, c| {
        let (tr, tc) = (r / 32, c / 32);
        let tile = tr * 4 + tc;
        let base = 0.1 + 0.25 * ((tr % 2) * 2 + tc % 2) as f64;
        let f = 1.0 + (tile % 5) as f64;
        base + 0.04 * (f * c as f64 / 32.0 * std::f64::consts::TAU).sin() * (r % 32) as f64 / 32.0
    })
    .unwrap();
    let timed = |workers| {
        let config = RunConfig {
            workers,
            ..RunConfig::default()
        };
        let init = pipeline::initialize(&img, &config).unwrap();
        (init.times.init(), modelfile::to_string(&init.model).unwrap(), init.segments)
    };
    let (t1, m1, segments) = timed(1);
    let (t4, m4, _) = timed(4);
    let ratio = t4 / t1;
    let cpus = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let secs = t.elapsed().as_secs_f64();
    let segs = segments.unwrap_or(0);
    let pass = segs >= 16 && m1 == m4 && ratio <= 0.6 && secs < 600.0;
    report(
        "AC10",
        pass,
        format!(
            "{segs} segments, init {t1:.2} s vs {t4:.2} s (ratio {ratio:.2}) on {cpus} cpus, identical {}, {secs:.1} s",
            m1 == m4
        ),
    );
    assert!(pass);
}

#[test]
fn ac11_global_fit_stops_on_loss_delta() {
    let img = structured(11, 64);
    let mut config = RunConfig {
        init: InitMethod::Grid,
        seed: 11,
        ..RunConfig::default()
    };
    config.baseline.target_l = 16;
    let r = pipeline::fit(&img, &config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let paths = pipeline::write_fit(&r, dir.path()).unwrap();
    let text = std::fs::read_to_string(paths.trace).unwrap();
    let totals: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    let n = totals.len();
    let mean_delta = if n > 10 {
        ((totals[n - 11] - totals[n - 1]) / 10.0).abs()
    } else {
        f64::INFINITY
    };
    let pass = r.metrics.stop == StopReason::LossDelta && mean_delta < 1e-6;
    report(
        "AC11",
        pass,
        format!("stop {:?} after {n} epochs, last 10-epoch mean delta {mean_delta:e}", r.metrics.stop),
    );
    assert!(pass);
}

/// Direct SSIM: 11x11 Gaussian window (sigma 1.5) evaluated at every valid position.
fn reference_ssim(a: &GrayImage, b: &GrayImage) -> f64 {
    let mut win = [[0.0; 11]; 11];
    let mut s = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            s += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0;
    for r in 0..=a.height() - 11 {
        for c in 0..=a.width() - 11 {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let w = win[i][j] / s;
                    let (x, y) = (a.get(r + i, c + j), b.get(r + i, c + j));
                    mx += w * x;
                    my += w * y;
                    xx += w * x * x;
                    yy += w * y * y;
                    xy += w * x * y;
                }
            }
            let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn ac12_metrics() {
    let closed = (psnr_from_mse(0.01) - 20.0).abs();
    let a = GrayImage::filled(16, 16, 0.5).unwrap();
    let b = GrayImage::filled(16, 16, 0.6).unwrap();
    let from_images = (psnr(&a, &b).unwrap() - 20.0).abs();

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut ssim_err = 0.0f64;
    let mut self_err = 0.0f64;
    for _ in 0..5 {
        let (w, h) = (rng.random_range(11..40), rng.random_range(11..40));
        let x = GrayImage::from_fn(w, h, |_, _| rng.random_range(0.0..1.0)).unwrap();
        let y = GrayImage::from_fn(w, h, |r, c| (x.get(r, c) + rng.random_range(-0.2..0.2)).clamp(0.0, 1.0)).unwrap();
        ssim_err = ssim_err.max((ssim(&x, &y).unwrap() - reference_ssim(&x, &y)).abs());
        self_err = self_err.max((ssim(&x, &x).unwrap() - 1.0).abs());
    }
    let pass = closed <= 1e-9 && from_images <= 1e-9 && ssim_err <= 1e-9 && self_err <= 1e-12;
    report(
        "AC12",
        pass,
        format!("psnr(0.01) err {closed:e}, image psnr err {from_images:e}, ssim vs reference {ssim_err:e}, ssim(a,a) err {self_err:e}"),
    );
    assert!(pass);
}
