//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL line
//! per criterion and exits non-zero if any failed.

use std::collections::BTreeSet;
use std::f64::consts::SQRT_2;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use bifseg::cli::TrainFile;
use bifseg::crf::{self, EnergyConfig, Neighborhood};
use bifseg::eval::{cases_from_synthetic, generate_dataset, robot_scribbles, run_ablation, AblationConfig, Method, SyntheticSpec};
use bifseg::geodesic::{geodesic_distance, scribble_uncertainty, GeodesicMetric};
use bifseg::grid::{BoundingBox, Grid2D, LabelMap, ScribbleSet};
use bifseg::nn::{save_model, train, ArchConfig, NormStats, SegmenterModel, TrainingSet};
use bifseg::pipeline::{build_weight_map, finetune_head, init_segment, network_uncertainty, RefineConfig, SessionConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn random_grid(rng: &mut impl Rng, w: usize, h: usize) -> Grid2D {
    Grid2D::new(w, h, 1, (0..w * h).map(|_| rng.random::<f32>()).collect()).unwrap()
}

fn random_scribbles(rng: &mut impl Rng, w: usize, h: usize, max: usize) -> ScribbleSet {
    let mut idx: Vec<usize> = (0..w * h).collect();
    idx.shuffle(rng);
    let k = rng.random_range(1..=max.min(w * h));
    let (mut fg, mut bg) = (Vec::new(), Vec::new());
    for &i in &idx[..k] {
        if rng.random_bool(0.5) {
            fg.push(i)
        } else {
            bg.push(i)
        }
    }
    ScribbleSet::from_indices(w, h, fg, bg).unwrap()
}

// ---------------------------------------------------------------- graph cut

/// Energy written out term by term: clamped negative log-likelihoods plus
/// contrast-weighted Potts terms over each unordered neighbour pair.
fn oracle_energy(y: &[u8], p: &[f32], x: &[f32], w: usize, h: usize, lambda: f64, sigma: f64, eight: bool) -> f64 {
    let mut e = 0.0;
    for i in 0..w * h {
        let pi = (p[i] as f64).clamp(1e-7, 1.0 - 1e-7);
        e += if y[i] == 1 { -pi.ln() } else { -(1.0 - pi).ln() };
    }
    if lambda > 0.0 {
        let mut offsets = vec![(1isize, 0isize, 1.0), (0, 1, 1.0)];
        if eight {
            offsets.extend([(1, 1, SQRT_2), (-1, 1, SQRT_2)]);
        }
        let mut pair = 0.0;
        for yy in 0..h as isize {
            for xx in 0..w as isize {
                for &(dx, dy, d) in &offsets {
                    let (nx, ny) = (xx + dx, yy + dy);
                    if nx < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let (i, j) = ((yy * w as isize + xx) as usize, (ny * w as isize + nx) as usize);
                    if y[i] != y[j] {
                        let diff = x[i] as f64 - x[j] as f64;
                        pair += (-(diff * diff) / (2.0 * sigma * sigma)).exp() / d;
                    }
                }
            }
        }
        e += lambda * pair;
    }
    e
}

fn graph_cut_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let lambdas = [0.0, 1.0, 3.0, 10.0];
    let mut counts = [0usize; 2];
    let mut mismatches = Vec::new();
    for (size_idx, &(w, h)) in [(3usize, 3usize), (3, 4)].iter().enumerate() {
        for k in 0..80 {
            let n = w * h;
            let lambda = lambdas[k % 4];
            let eight = k >= 60;
            let sigma = [0.1, 0.3, 1.0][k % 3];
            let p = random_grid(&mut rng, w, h);
            let x = random_grid(&mut rng, w, h);
            let scribbles = if k % 2 == 0 { ScribbleSet::empty(w, h) } else { random_scribbles(&mut rng, w, h, 3) };
            let cfg = EnergyConfig {
                lambda,
                sigma,
                neighborhood: if eight { Neighborhood::Eight } else { Neighborhood::Four },
            };
            let got = crf::label_update(&p, &x, &scribbles, &cfg).unwrap();
            let e_got = oracle_energy(got.labels(), p.data(), x.data(), w, h, lambda, sigma, eight);
            let mut best = f64::INFINITY;
            for mask in 0u32..(1 << n) {
                let y: Vec<u8> = (0..n).map(|i| ((mask >> i) & 1) as u8).collect();
                if (0..n).any(|i| scribbles.label_of(i).is_some_and(|s| s != y[i])) {
                    continue;
                }
                best = best.min(oracle_energy(&y, p.data(), x.data(), w, h, lambda, sigma, eight));
            }
            let respects = (0..n).all(|i| scribbles.label_of(i).is_none_or(|s| s == got.labels()[i]));
            if e_got != best || !respects {
                mismatches.push(format!("{w}x{h} #{k}: {e_got} vs {best}"));
            }
            if !eight {
                counts[size_idx] += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        mismatches.is_empty() && counts.iter().all(|&c| c >= 50) && secs < 10.0,
        format!(
            "{} 3x3 and {} 3x4 four-connected instances plus 40 eight-connected, {} mismatches {:?}, {secs:.2} s",
            counts[0],
            counts[1],
            mismatches.len(),
            mismatches.iter().take(3).collect::<Vec<_>>()
        ),
    )
}

// -------------------------------------------------------------- gradients

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let omega = 5.0;
    let mut worst: f64 = 0.0;
    let instances = 25;
    for k in 0..instances {
        let arch = if k % 2 == 0 { ArchConfig::toy() } else { ArchConfig { head_hidden: 0, ..ArchConfig::toy() } };
        let model = SegmenterModel::<f32>::init(&arch, NormStats::default(), 1000 + k).unwrap().cast::<f64>();
        let input: Vec<f64> = (0..36).map(|_| rng.random_range(-1.5..1.5)).collect();
        let features = model.extract_features(&input, 6, 6);
        let mut head = model.head().clone();
        for (_, t) in head.params_mut() {
            for v in t.iter_mut() {
                *v = rng.random_range(-0.8..0.8);
            }
        }
        let labels: Vec<u8> = (0..36).map(|_| rng.random_range(0..2)).collect();
        let mut weights: Vec<f64> = (0..36).map(|_| [0.0, 1.0, omega][rng.random_range(0..3)]).collect();
        weights[..3].copy_from_slice(&[0.0, 1.0, omega]);

        let (_, grad, _) = head.loss_and_grad(&features, &labels, &weights, false);
        let analytic = grad.flatten();
        let mut numeric = Vec::with_capacity(analytic.len());
        let step = 1e-6;
        let n_tensors = head.params_mut().len();
        for t in 0..n_tensors {
            let len = head.params_mut()[t].1.len();
            for e in 0..len {
                let orig = head.params_mut()[t].1[e];
                head.params_mut()[t].1[e] = orig + step;
                let plus = head.weighted_loss(&features, &labels, &weights);
                head.params_mut()[t].1[e] = orig - step;
                let minus = head.weighted_loss(&features, &labels, &weights);
                head.params_mut()[t].1[e] = orig;
                numeric.push((plus - minus) / (2.0 * step));
            }
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
        worst = worst.max(if scale > 0.0 { diff / scale } else { diff });
    }
    check(worst < 1e-4, format!("{instances} random 6x6 instances, worst relative error {worst:.2e}"))
}

// --------------------------------------------------------------- geodesic

/// Dijkstra over an explicit adjacency list with a linear scan for the minimum.
fn oracle_geodesic(img: &[f32], w: usize, h: usize, seeds: &[usize], gamma: f64) -> Vec<f64> {
    let n = w * h;
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for y in 0..h {
        for x in 0..w {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if (dx, dy) == (0, 0) || nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let (i, j) = (y * w + x, ny as usize * w + nx as usize);
                    let d2 = (dx * dx + dy * dy) as f64;
                    let di = img[j] as f64 - img[i] as f64;
                    adj[i].push((j, (d2 + gamma * gamma * di * di).sqrt()));
                }
            }
        }
    }
    let mut dist = vec![f64::INFINITY; n];
    let mut done = vec![false; n];
    for &s in seeds {
        dist[s] = 0.0;
    }
    for _ in 0..n {
        let u = (0..n).filter(|&i| !done[i]).min_by(|&a, &b| dist[a].total_cmp(&dist[b])).unwrap();
        done[u] = true;
        for &(v, c) in &adj[u] {
            if dist[u] + c < dist[v] {
                dist[v] = dist[u] + c;
            }
        }
    }
    dist
}

fn geodesic_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (w, h) = (16, 16);
    let mut worst: f64 = 0.0;
    let random_images = 25;
    for k in 0..random_images {
        let img = random_grid(&mut rng, w, h);
        let gamma = [0.0, 0.5, 1.0, 5.0, 20.0][k % 5];
        let seeds: Vec<usize> = (0..rng.random_range(1..5)).map(|_| rng.random_range(0..w * h)).collect();
        let got = geodesic_distance(&img, &seeds.iter().copied().collect(), GeodesicMetric { gamma, spatial_step: 1.0 }).unwrap();
        let want = oracle_geodesic(img.data(), w, h, &seeds, gamma);
        worst = worst.max(got.values().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    let mut chamfer_mismatch = 0;
    let constant_images = 10;
    for _ in 0..constant_images {
        let img = Grid2D::filled(w, h, 1, rng.random());
        let seeds: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(0..w * h)).collect();
        let got = geodesic_distance(&img, &seeds.iter().copied().collect(), GeodesicMetric { gamma: 3.0, spatial_step: 1.0 }).unwrap();
        for i in 0..w * h {
            let chamfer = seeds
                .iter()
                .map(|&s| {
                    let dx = (i % w).abs_diff(s % w) as f64;
                    let dy = (i / w).abs_diff(s / w) as f64;
                    dx.min(dy).mul_add(SQRT_2, (dx - dy).abs())
                })
                .fold(f64::INFINITY, f64::min);
            if got.values()[i] != chamfer {
                chamfer_mismatch += 1;
            }
        }
    }
    check(
        worst <= 1e-6 && chamfer_mismatch == 0,
        format!(
            "{random_images} random 16x16 images, max deviation {worst:.2e}; {constant_images} constant images, {chamfer_mismatch} pixels off the chamfer metric"
        ),
    )
}

// ------------------------------------------------------------ uncertainty

fn uncertainty_sets() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut failures = Vec::new();
    let trials = 200;
    for k in 0..trials {
        let (w, h) = (rng.random_range(4..24), rng.random_range(4..24));
        let t0 = rng.random_range(0.0..0.5);
        let t1 = rng.random_range(0.5..1.0);
        let cfg = RefineConfig { t0, t1, epsilon: rng.random_range(0.02..0.5), gamma: rng.random_range(0.0..4.0), ..Default::default() };
        // Include pixels sitting exactly on the thresholds.
        let mut p = random_grid(&mut rng, w, h).into_data();
        p[0] = t0 as f32;
        p[1] = t1 as f32;
        let p = Grid2D::new(w, h, 1, p).unwrap();
        let up = network_uncertainty(&p, &cfg);
        let up_oracle: BTreeSet<usize> =
            (0..w * h).filter(|&i| (t0 as f32) < p.data()[i] && p.data()[i] < (t1 as f32)).collect();
        if up != up_oracle {
            failures.push(format!("U_p #{k}"));
        }

        let crop = random_grid(&mut rng, w, h);
        let labels = LabelMap::from_fn(w, h, |_, _| rng.random_bool(0.5));
        let scribbles = if k % 5 == 0 { ScribbleSet::empty(w, h) } else { random_scribbles(&mut rng, w, h, 6) };
        let us = scribble_uncertainty(&labels, &scribbles, &crop, cfg.epsilon, cfg.gamma).unwrap();
        let (lo, hi) = crop.min_max();
        let unit: Vec<f32> = crop.data().iter().map(|&v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 }).collect();
        let unit = Grid2D::new(w, h, 1, unit).unwrap();
        let metric = GeodesicMetric { gamma: cfg.gamma, spatial_step: 1.0 / w.max(h) as f64 };
        let near = |seeds: &BTreeSet<usize>| -> Vec<f64> {
            if seeds.is_empty() {
                vec![f64::INFINITY; w * h]
            } else {
                geodesic_distance(&unit, seeds, metric).unwrap().values().to_vec()
            }
        };
        let (df, db) = (near(scribbles.foreground()), near(scribbles.background()));
        let y = labels.labels();
        let us_oracle: BTreeSet<usize> = (0..w * h)
            .filter(|&i| scribbles.label_of(i).is_none())
            .filter(|&i| (y[i] == 0 && df[i] < cfg.epsilon) || (y[i] == 1 && db[i] < cfg.epsilon))
            .collect();
        if us != us_oracle {
            failures.push(format!("U_s #{k}"));
        }

        let weights = build_weight_map(&scribbles, &up, &us, &cfg);
        let ok = (0..w * h).all(|i| {
            let want = if scribbles.label_of(i).is_some() {
                cfg.omega as f32
            } else if up.contains(&i) || us.contains(&i) {
                0.0
            } else {
                1.0
            };
            weights.data()[i] == want
        });
        if !ok {
            failures.push(format!("weights #{k}"));
        }
    }
    check(failures.is_empty(), format!("{trials} random instances, failures {failures:?}"))
}

// -------------------------------------------------------- trained model

struct Trained {
    model: Arc<SegmenterModel>,
    crops: usize,
    seconds: f64,
}

fn train_benchmark_model(spec: &SyntheticSpec) -> Trained {
    let start = Instant::now();
    let cfg: TrainFile = toml::from_str(&std::fs::read_to_string(repo_file("configs/train.toml")).unwrap()).unwrap();
    let data = generate_dataset(spec).unwrap();
    let images: Vec<_> = data.train.iter().map(|c| (c.image.clone(), c.labels.clone())).collect();
    let instances: Vec<_> = (0..images.len()).map(|i| (i, 1u32)).collect();
    let set = TrainingSet::from_instances(&images, &instances, cfg.target_min, cfg.crop_seed).unwrap();
    let model = train(&set, &cfg.arch, &cfg.train, cfg.seed).unwrap();
    Trained { model: Arc::new(model), crops: set.samples.len(), seconds: start.elapsed().as_secs_f64() }
}

fn ablation_config() -> AblationConfig {
    toml::from_str(&std::fs::read_to_string(repo_file("configs/ablation.toml")).unwrap()).unwrap()
}

fn synth_spec() -> SyntheticSpec {
    SyntheticSpec::from_toml(&std::fs::read_to_string(repo_file("configs/synth.toml")).unwrap()).unwrap()
}

// ---------------------------------------------------------------- descent

fn finetune_descent(t: &Trained, spec: &SyntheticSpec) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let data = generate_dataset(&SyntheticSpec { seed: 909, train_per_class: 10, test_per_class: 10, ..spec.clone() }).unwrap();
    let pool: Vec<_> = data.train.iter().chain(&data.test).collect();
    let cfg = RefineConfig { finetune_lr: 1e-2, inner_iters: 20, ..Default::default() };
    let phases = 200;
    let mut descended = 0;
    for k in 0..phases {
        let case = pool[rng.random_range(0..pool.len())];
        let (n, _) = (case.image.width(), case.image.height());
        let x0 = rng.random_range(0..n / 3);
        let y0 = rng.random_range(0..n / 3);
        let bbox = BoundingBox::new(x0, y0, rng.random_range(2 * n / 3..n), rng.random_range(2 * n / 3..n)).unwrap();
        let s = init_segment(t.model.clone(), &case.image, bbox, &SessionConfig { target_min: 32, min_box_side: 3 }).unwrap();
        let (w, h) = (s.crop().width(), s.crop().height());
        let (labels, weights) = if k % 2 == 0 {
            let scribbles = random_scribbles(&mut rng, w, h, 12);
            let labels = crf::label_update(s.probability(), &s.crop().rescaled_unit(), &scribbles, &cfg.energy).unwrap();
            let up = network_uncertainty(s.probability(), &cfg);
            let us = scribble_uncertainty(&labels, &scribbles, s.crop(), cfg.epsilon, cfg.gamma).unwrap();
            (labels, build_weight_map(&scribbles, &up, &us, &cfg))
        } else {
            let labels = LabelMap::from_fn(w, h, |x, y| (s.probability().get(x, y) > 0.5) ^ rng.random_bool(0.1));
            let weights = Grid2D::new(w, h, 1, (0..w * h).map(|_| [0.0, 1.0, 5.0][rng.random_range(0..3)]).collect()).unwrap();
            (labels, weights)
        };
        let mut head = s.head().clone();
        let (before, after) = finetune_head(s.model(), &mut head, s.cache(), &labels, &weights, &cfg).unwrap();
        if after < before {
            descended += 1;
        }
    }
    let frac = descended as f64 / phases as f64;
    check(frac >= 0.95, format!("{descended}/{phases} phases lowered the weighted loss ({:.1}%)", 100.0 * frac))
}

// -------------------------------------------------------- hard constraints

fn hard_constraints(t: &Trained, spec: &SyntheticSpec) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let data = generate_dataset(&SyntheticSpec { seed: 808, image_size: 40, train_per_class: 20, test_per_class: 20, ..spec.clone() }).unwrap();
    let pool: Vec<_> = data.train.iter().chain(&data.test).collect();
    let mut refinements = 0;
    let mut label_updates = 0;
    let mut flips = 0;
    let mut crop_flips = 0;
    while refinements < 1000 {
        let case = pool[rng.random_range(0..pool.len())];
        let n = case.image.width();
        let bbox = BoundingBox::new(rng.random_range(0..8), rng.random_range(0..8), rng.random_range(n - 8..n), rng.random_range(n - 8..n)).unwrap();
        let target_min = [16, 24, 40][rng.random_range(0..3)];
        let mut s = init_segment(t.model.clone(), &case.image, bbox, &SessionConfig { target_min, min_box_side: 3 }).unwrap();
        let (cw, ch) = s.crop_size();
        for _ in 0..5 {
            let mut fresh = random_scribbles(&mut rng, cw, ch, 8);
            if rng.random_bool(0.2) {
                fresh = ScribbleSet::empty(cw, ch);
            }
            let Ok(merged) = s.scribbles().merged(&fresh) else { continue };
            let cfg = RefineConfig {
                outer_iters: rng.random_range(1..4),
                inner_iters: rng.random_range(0..6),
                omega: [1.0, 5.0, 20.0][rng.random_range(0..3)],
                uniform_weights: rng.random_bool(0.3),
                energy: EnergyConfig {
                    lambda: [0.0, 1.0, 3.0, 10.0][rng.random_range(0..4)],
                    neighborhood: if rng.random_bool(0.5) { Neighborhood::Four } else { Neighborhood::Eight },
                    ..Default::default()
                },
                ..Default::default()
            };
            let before = s.snapshots().len();
            s.refine(&fresh, &cfg).unwrap();
            refinements += 1;
            let working = s.working_scribbles();
            for snap in &s.snapshots()[before..] {
                label_updates += 1;
                let y = snap.labels.labels();
                flips += working.foreground().iter().filter(|&&i| y[i] != 1).count();
                flips += working.background().iter().filter(|&&i| y[i] != 0).count();
            }
            let crop = s.crop_labels();
            crop_flips += merged.foreground().iter().filter(|&&i| crop.labels()[i] != 1).count();
            crop_flips += merged.background().iter().filter(|&&i| crop.labels()[i] != 0).count();
        }
    }
    check(
        flips == 0 && crop_flips == 0,
        format!("{refinements} refinements, {label_updates} label updates, {flips} flipped scribbles at working resolution, {crop_flips} in the box frame"),
    )
}

// ------------------------------------------------------------ directional

fn unseen_class_directional(t: &Trained, spec: &SyntheticSpec) -> (Outcome, Option<bifseg::eval::AblationReport>) {
    let start = Instant::now();
    let cfg = ablation_config();
    let data = generate_dataset(spec).unwrap();
    let cases = cases_from_synthetic(&data.test, cfg.box_seed);
    let rectangles = cases.iter().filter(|c| c.class == "rectangle").count();
    let report = run_ablation(t.model.clone(), &cases, &cfg).unwrap();
    let total = t.seconds + start.elapsed().as_secs_f64();
    let d = |m, round| report.mean_dice(m, "rectangle", round).unwrap();
    let (init, unsup, sup, sup_w, crf_sup) = (
        d(Method::Initial, 0),
        d(Method::BifsegUnsupervised, 0),
        d(Method::BifsegSupervised, 1),
        d(Method::BifsegUniformSupervised, 1),
        d(Method::CrfSupervised, 1),
    );
    let conds = [
        ("supervised >= initial + 0.02", sup >= init + 0.02),
        ("unsupervised >= initial - 0.005", unsup >= init - 0.005),
        ("weighted >= uniform", sup >= sup_w),
        ("training crops >= 200", t.crops >= 200),
        ("held-out rectangles >= 20", rectangles >= 20),
        ("under 15 min", total < 900.0),
    ];
    let failed: Vec<&str> = conds.iter().filter(|c| !c.1).map(|c| c.0).collect();
    let detail = format!(
        "{} crops, {rectangles} rectangles; dice initial {init:.4}, unsupervised {unsup:.4}, supervised {sup:.4}, uniform-weight {sup_w:.4}, crf-only {crf_sup:.4}; {total:.0} s{}",
        t.crops,
        if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
    );
    (check(failed.is_empty(), detail), Some(report))
}

// ------------------------------------------------------------ determinism

fn determinism(t: &Trained, in_process: Option<&bifseg::eval::AblationReport>) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.bifm");
    save_model(&model, &t.model).unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_bifseg"))
            .args(["benchmark", "--spec"])
            .arg(repo_file("configs/synth.toml"))
            .arg("--model")
            .arg(&model)
            .arg("--config")
            .arg(repo_file("configs/ablation.toml"))
            .arg("--out")
            .arg(&out)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        out
    };
    let (a, b) = (run("a"), run("b"));
    let mut same = true;
    for f in ["report.json", "report.csv"] {
        same &= std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap();
    }
    let matches_library = in_process.map(|r| r.to_json().unwrap().into_bytes() == std::fs::read(a.join("report.json")).unwrap());
    check(
        same && matches_library != Some(false),
        format!("two CLI benchmark runs byte-identical: {same}; identical to the in-process report: {matches_library:?}"),
    )
}

// ----------------------------------------------------------- machine time

fn machine_time(t: &Trained, spec: &SyntheticSpec) -> Outcome {
    let data = generate_dataset(&SyntheticSpec { image_size: 128, train_per_class: 0, test_per_class: 1, ..spec.clone() }).unwrap();
    let case = &data.test[0];
    let bbox = BoundingBox::full(128, 128);
    let mut s = init_segment(t.model.clone(), &case.image, bbox, &SessionConfig { target_min: 128, min_box_side: 3 }).unwrap();
    assert_eq!((s.crop().width(), s.crop().height()), (128, 128));
    let scribbles = robot_scribbles(&s.crop_labels(), &case.truth(), 30, 1).unwrap();
    let start = Instant::now();
    s.refine(&scribbles, &RefineConfig::default()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    check(secs < 2.0, format!("one supervised round on a 128x128 crop took {secs:.3} s ({} scribbled pixels)", scribbles.len()))
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut run = |name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match &outcome {
            Ok(d) => println!("PASS  {name}: {d}"),
            Err(d) => println!("FAIL  {name}: {d}"),
        }
        results.push((name, outcome));
    };

    run("graph-cut exactness", &mut graph_cut_exactness);
    run("gradient check", &mut gradient_check);
    run("geodesic oracle", &mut geodesic_oracle);
    run("uncertainty sets", &mut uncertainty_sets);

    let spec = synth_spec();
    let trained = train_benchmark_model(&spec);
    println!("      (trained the benchmark model on {} crops in {:.1} s)", trained.crops, trained.seconds);
    run("hard constraints", &mut || hard_constraints(&trained, &spec));
    run("fine-tune descent", &mut || finetune_descent(&trained, &spec));
    let mut report = None;
    run("unseen-class directional", &mut || {
        let (outcome, r) = unseen_class_directional(&trained, &spec);
        report = r;
        outcome
    });
    run("determinism", &mut || determinism(&trained, report.as_ref()));
    run("machine time", &mut || machine_time(&trained, &spec));

    let failed = results.iter().filter(|r| r.1.is_err()).count();
    println!("\n{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
