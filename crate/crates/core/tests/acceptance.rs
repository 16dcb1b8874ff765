//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 6 and 7 train full models and run for hours; they execute only
//! with `BOLTZFLOW_LONG=1` and otherwise print SKIP. Pre-trained checkpoints
//! can be supplied through `BOLTZFLOW_GMM40_CHECKPOINT`,
//! `BOLTZFLOW_MANYWELL_LEARNED_CHECKPOINT` and
//! `BOLTZFLOW_MANYWELL_GRADFLOW_CHECKPOINT`.
//! `BOLTZFLOW_ONLY=6,8` restricts the run to the listed criteria.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use boltzflow::analytic::{cdf, quantile, velocity_norm_sq, z_t};
use boltzflow::diffengine::{divergence, laplacian, param_grad, spatial_grad, time_partial, JetSpec};
use boltzflow::interpolations::{gradflow_residual_terms, Architecture, Collocation, LocalTerms};
use boltzflow::metrics::{energy_distance, ess, log_weights, mean_std, nll, nll_with_field};
use boltzflow::odeint::{draw_latent, integrate, integrate_with_logdet, sample_backward, FnField};
use boltzflow::targets::{gaussian, TargetSpec};
use boltzflow::training::{load_checkpoint, train_with, TrainConfig};
use boltzflow::{FlowModel, Kind, Mlp, SolverConfig, VpSchedule};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn teleportation() -> Outcome {
    let z0 = z_t(0.0, 7.0).map_err(|e| e.to_string())?;
    let mut worst_rt: f64 = 0.0;
    for &m in &[1.0, 5.0, 15.0, 50.0] {
        for ti in 0..=5 {
            let t = ti as f64 * 0.2;
            for k in 1..=999 {
                let s = k as f64 / 1000.0;
                let x = quantile(t, s, m).map_err(|e| e.to_string())?;
                worst_rt = worst_rt.max((cdf(t, x, m).map_err(|e| e.to_string())? - s).abs());
            }
        }
    }
    let v = |m: f64| velocity_norm_sq(0.999, m).map_err(|e| e.to_string());
    let ratio = v(30.0)? / v(5.0)?;
    let ms: Vec<f64> = (1..=15).map(|k| 2.0 * k as f64).collect();
    let logs: Vec<f64> = ms.iter().map(|&m| v(m).map(f64::ln)).collect::<Result<_, _>>()?;
    let (mx, _) = mean_std(&ms);
    let (my, _) = mean_std(&logs);
    let sxy: f64 = ms.iter().zip(&logs).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = ms.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = logs.iter().map(|y| (y - my).powi(2)).sum();
    let r2 = sxy * sxy / (sxx * syy);
    check(
        (z0 - 2.0).abs() < 1e-9 && worst_rt <= 1e-8 && ratio > 10.0 && r2 > 0.95,
        format!("Z_0 err {:.1e}, round trip {worst_rt:.1e}, ratio 30/5 {ratio:.3e}, R^2 {r2:.4}", (z0 - 2.0).abs()),
    )
}

fn random_mlp(rng: &mut ChaCha8Rng, d: usize, out: usize) -> Mlp {
    let layers = rng.gen_range(1..=3);
    let mut widths = vec![d + 1];
    widths.extend((0..layers).map(|_| rng.gen_range(3..=10)));
    widths.push(out);
    let mut net = Mlp::new(&widths, rng).expect("valid widths");
    for p in net.params_mut() {
        *p += rng.gen_range(-0.3..0.3);
    }
    net
}

fn differentiation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut first, mut second, mut params): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let h = 1e-5;
    let h2 = 1e-4;
    for k in 0..100 {
        let d = rng.gen_range(1..=4);
        let scalar = random_mlp(&mut rng, d, 1);
        let field = random_mlp(&mut rng, d, d);
        let t: f64 = rng.gen_range(0.0..1.0);
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let f = |t: f64, x: &[f64]| scalar.forward(t, x).unwrap()[0];
        let g = spatial_grad(&scalar, t, &x).map_err(|e| e.to_string())?;
        let lap = laplacian(&scalar, t, &x).map_err(|e| e.to_string())?;
        let div = divergence(&field, t, &x).map_err(|e| e.to_string())?;
        let dt = time_partial(&scalar, t, &x).map_err(|e| e.to_string())?[0];
        let (mut lap_fd, mut div_fd) = (0.0, 0.0);
        for i in 0..d {
            let shifted = |eps: f64| {
                let mut y = x.clone();
                y[i] += eps;
                y
            };
            let (xp, xm) = (shifted(h), shifted(-h));
            first = first.max(rel_err(g[i], (f(t, &xp) - f(t, &xm)) / (2.0 * h), 1e-2));
            div_fd += (field.forward(t, &xp).unwrap()[i] - field.forward(t, &xm).unwrap()[i]) / (2.0 * h);
            lap_fd += (f(t, &shifted(h2)) - 2.0 * f(t, &x) + f(t, &shifted(-h2))) / (h2 * h2);
        }
        first = first.max(rel_err(div, div_fd, 1e-2));
        first = first.max(rel_err(dt, (f(t + h, &x) - f(t - h, &x)) / (2.0 * h), 1e-2));
        second = second.max(rel_err(lap, lap_fd, 1e-2));

        // parameter gradient of a loss mixing every jet block
        let n = 3;
        let ts: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let xs = Array2::from_shape_fn((d, n), |_| rng.gen_range(-1.5..1.5));
        let loss = |net: &Mlp| {
            param_grad(&[net], |tape, regs| {
                let tv = tape.row_leaf(&ts);
                let jet = regs[0].jet(tape, tv, &xs, JetSpec::FULL);
                let mut acc = tape.mul(jet.dt.unwrap(), jet.value);
                for i in 0..d {
                    let a = tape.mul(jet.dx[i], jet.dx[i]);
                    acc = tape.add(acc, a);
                    acc = tape.sub(acc, jet.dxx[i]);
                }
                let sq = tape.mul(acc, acc);
                tape.mean(sq)
            })
            .unwrap()
        };
        let (_, grads) = loss(&scalar);
        let hp = 1e-6;
        for p in (k % 3..scalar.params().len()).step_by(3) {
            let mut plus = scalar.clone();
            plus.params_mut()[p] += hp;
            let mut minus = scalar.clone();
            minus.params_mut()[p] -= hp;
            let fd = (loss(&plus).0 - loss(&minus).0) / (2.0 * hp);
            params = params.max(rel_err(grads[0][p], fd, 1e-2));
        }
    }
    check(
        first < 1e-5 && second < 1e-4 && params < 1e-4,
        format!("max rel err: first order {first:.1e}, second order {second:.1e}, parameters {params:.1e}"),
    )
}

fn integrator() -> Outcome {
    let decay = |d: usize| FnField {
        dim: d,
        v: |_t: f64, x: &[f64], out: &mut [f64]| out.iter_mut().zip(x).for_each(|(o, x)| *o = -x),
        div: move |_t: f64, _x: &[f64]| -(d as f64),
    };
    let tight = SolverConfig::default().with_tol(1e-8);
    let x0 = Array2::from_elem((1, 1), 1.0);
    let x1 = integrate(&decay(1), &x0, 0.0, 1.0, &tight).map_err(|e| e.to_string())?;
    let endpoint = (x1[[0, 0]] - (-1.0f64).exp()).abs();

    // observed order from error against right-hand-side evaluations
    let evals = AtomicUsize::new(0);
    let field = FnField {
        dim: 1,
        v: |t: f64, x: &[f64], out: &mut [f64]| {
            evals.fetch_add(1, Ordering::Relaxed);
            out[0] = x[0] * t.cos();
        },
        div: |t: f64, _x: &[f64]| t.cos(),
    };
    let exact = 2.0f64.sin().exp();
    let mut pts = Vec::new();
    for tol in [1e-4, 1e-5, 1e-6, 1e-7, 1e-8, 1e-9] {
        evals.store(0, Ordering::Relaxed);
        let y = integrate(&field, &x0, 0.0, 2.0, &SolverConfig::default().with_tol(tol)).map_err(|e| e.to_string())?;
        pts.push(((evals.load(Ordering::Relaxed) as f64).ln(), (y[[0, 0]] - exact).abs().ln()));
    }
    let n = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (mx, my) = (sx / n, sy / n);
    let slope = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / pts.iter().map(|(x, _)| (x - mx).powi(2)).sum::<f64>();
    let order = -slope;

    let d = 3;
    let xs = Array2::from_shape_fn((d, 5), |(i, j)| 0.3 * i as f64 - 0.2 * j as f64 + 0.1);
    let st = integrate_with_logdet(&decay(d), &xs, 0.0, 1.0, &tight).map_err(|e| e.to_string())?;
    let logdet_err = st.logdet.iter().map(|l| (l + d as f64).abs()).fold(0.0, f64::max);

    let swirl = FnField {
        dim: 2,
        v: |t: f64, x: &[f64], out: &mut [f64]| {
            out[0] = (x[1] + t).sin() - 0.3 * x[0];
            out[1] = (0.5 * x[0]).cos() * (1.0 + t * t) - 0.2 * x[1];
        },
        div: |_t: f64, _x: &[f64]| -0.5,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let start = draw_latent(&mut rng, 2, 64, 1.5);
    let there = integrate(&swirl, &start, 0.0, 1.0, &tight).map_err(|e| e.to_string())?;
    let back = integrate(&swirl, &there, 1.0, 0.0, &tight).map_err(|e| e.to_string())?;
    let round_trip = (&back - &start).columns().into_iter().map(|c| c.dot(&c).sqrt()).fold(0.0, f64::max);
    check(
        endpoint < 1e-7 && order >= 4.0 && logdet_err < 1e-7 && round_trip < 1e-5,
        format!("|x(1)-e^-1| {endpoint:.1e}, observed order {order:.2}, logdet err {logdet_err:.1e}, round trip {round_trip:.1e}"),
    )
}

fn ou_consistency() -> Outcome {
    let sched = VpSchedule::default();
    let g1 = sched.g_vp(1.0).map_err(|e| e.to_string())?;
    let g = sched.g_vp(0.5).map_err(|e| e.to_string())?;
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let draws: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            sched.ou_interpolant(0.5, &[z], &[1.0]).unwrap()[0]
        })
        .collect();
    let (mean, sd) = mean_std(&draws);
    let var = sd * sd;
    let (mean_exp, var_exp) = ((-0.5 * g).exp(), 1.0 - (-g).exp());
    let se_mean = (var_exp / n as f64).sqrt();
    let se_var = var_exp * (2.0 / (n as f64 - 1.0)).sqrt();
    let (zm, zv) = ((mean - mean_exp).abs() / se_mean, (var - var_exp).abs() / se_var);

    let s2: f64 = 4.0;
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let t = (i as f64 + 0.5) / 20.0;
        let beta = sched.beta(t).map_err(|e| e.to_string())?;
        let decay = (-sched.g_vp(t).map_err(|e| e.to_string())?).exp();
        let v = 1.0 + decay * (s2 - 1.0);
        let ratio = -0.5 * beta * decay * (s2 - 1.0) / v;
        for j in 0..20 {
            let x = -5.0 + 10.0 * j as f64 / 19.0;
            let terms = LocalTerms { dt_f: -x * x * ratio / v, c: -ratio, grad_f: vec![x / v] };
            worst = worst.max(gradflow_residual_terms(&terms, 1.0 / v, beta, &[x]).abs());
        }
    }
    check(
        g1 == 10.05 && zm < 3.0 && zv < 3.0 && worst < 1e-8,
        format!("g_vp(1) = {g1}, mean off by {zm:.2} SE, variance off by {zv:.2} SE, Gaussian oracle {worst:.1e}"),
    )
}

fn metrics_suite() -> Outcome {
    let uniform = ess(&[0.7; 64]).map_err(|e| e.to_string())?;
    let mut atom = vec![f64::NEG_INFINITY; 64];
    atom[5] = 0.0;
    let single = ess(&atom).map_err(|e| e.to_string())?;
    let ident = (uniform - 1.0).abs() < 1e-15 && (single - 1.0 / 64.0).abs() < 1e-15;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dyadic: Vec<f64> = (0..200).map(|_| rng.gen_range(-64i32..64) as f64 / 8.0).collect();
    let base = ess(&dyadic).map_err(|e| e.to_string())?;
    let shift_exact = [-3.0, 7.0, 250.0].iter().all(|c| {
        let shifted: Vec<f64> = dyadic.iter().map(|w| w + c).collect();
        ess(&shifted).unwrap() == base
    });

    let mut worst_ed: f64 = 0.0;
    for trial in 0..3 {
        let d = trial + 1;
        let x = Array2::from_shape_fn((d, 100), |_| rng.gen_range(-2.0..2.0));
        let y = Array2::from_shape_fn((d, 100), |_| rng.gen_range(-1.0..3.0));
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        let cols = |m: &Array2<f64>| m.columns().into_iter().map(|c| c.to_vec()).collect::<Vec<_>>();
        let (xs, ys) = (cols(&x), cols(&y));
        let mut cross = 0.0;
        for a in &xs {
            for b in &ys {
                cross += dist(a, b);
            }
        }
        let within = |s: &[Vec<f64>]| {
            let mut acc = 0.0;
            for i in 0..s.len() {
                for j in 0..s.len() {
                    if i != j {
                        acc += dist(&s[i], &s[j]);
                    }
                }
            }
            acc / (s.len() * (s.len() - 1)) as f64
        };
        let oracle = 2.0 * cross / 1e4 - within(&xs) - within(&ys);
        worst_ed = worst_ed.max((energy_distance(&x, &y).map_err(|e| e.to_string())? - oracle).abs());
    }

    // v = c x carries N(0, e^{-2c}) onto N(0, 1)
    let c = 0.4;
    let field = FnField {
        dim: 1,
        v: move |_t: f64, x: &[f64], out: &mut [f64]| out[0] = c * x[0],
        div: move |_t: f64, _x: &[f64]| c,
    };
    let samples = Array2::from_shape_fn((1, 100_000), |_| rng.sample::<f64, _>(StandardNormal));
    let value = nll_with_field(&field, (-c).exp(), (0.0, 1.0), &samples, &SolverConfig::default().with_tol(1e-8))
        .map_err(|e| e.to_string())?;
    let expected = 0.5 * (1.0 + (2.0 * std::f64::consts::PI).ln());
    check(
        ident && shift_exact && worst_ed < 1e-10 && (value - expected).abs() < 0.02,
        format!(
            "ESS uniform {uniform}, single atom {single}, shift exact {shift_exact}, ED vs oracle {worst_ed:.1e}, NLL {value:.4} (exact {expected:.4})"
        ),
    )
}

fn reductions() -> Outcome {
    let arch = Architecture { field_hidden: vec![7, 7], c_hidden: vec![4], scheduler_hidden: vec![4] };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let target = gaussian(vec![1.5, -0.5], 0.8, false).map_err(|e| e.to_string())?;
    let mut learned = FlowModel::new(Kind::Learned, target.clone(), 1.3, &arch, true, &mut rng).map_err(|e| e.to_string())?;
    learned.psi.as_mut().unwrap().params_mut().fill(0.0);
    let linear = FlowModel { kind: Kind::Linear, psi: None, scheduler: None, ..learned.clone() };
    let mut reduction_exact = true;
    for _ in 0..100 {
        let t = rng.gen_range(0.0..1.0);
        let x = [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)];
        reduction_exact &= learned.learned_residual(t, &x).unwrap() == linear.linear_residual(t, &x).unwrap();
    }

    let pinned = FlowModel::new(Kind::Learned, target.clone(), 1.3, &arch, true, &mut rng).map_err(|e| e.to_string())?;
    let mut pinning_exact = true;
    for _ in 0..100 {
        let x = [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)];
        pinning_exact &= pinned.energy(0.0, &x).unwrap() == pinned.latent.energy(&x);
        pinning_exact &= pinned.energy(1.0, &x).unwrap() == target.energy(&x);
    }

    // translation by a: v = a, C_t = a^2 (1/2 - t)
    let a = 2.0;
    let shifted = gaussian(vec![a], 1.0, true).map_err(|e| e.to_string())?;
    let small = Architecture { field_hidden: vec![5], c_hidden: vec![], scheduler_hidden: vec![3] };
    let mut tr = FlowModel::new(Kind::Linear, shifted, 1.0, &small, true, &mut rng).map_err(|e| e.to_string())?;
    let v = tr.velocity.as_mut().unwrap();
    let n = v.params().len();
    v.params_mut().fill(0.0);
    v.params_mut()[n - 1] = a;
    tr.c_net = Some(Mlp::from_params(&[1, 1], vec![-a * a, 0.5 * a * a]).map_err(|e| e.to_string())?);
    let ts: Vec<f64> = (0..400).map(|k| (k as f64 + 0.5) / 400.0).collect();
    let xs = Array2::from_shape_fn((1, 400), |(_, j)| -6.0 + 12.0 * j as f64 / 399.0);
    let batch = Collocation::new(ts, xs).map_err(|e| e.to_string())?;
    let worst = tr.residuals_unclamped(&batch).map_err(|e| e.to_string())?.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    check(
        reduction_exact && pinning_exact && worst < 1e-12,
        format!("psi = 0 reduction exact {reduction_exact}, endpoint pinning exact {pinning_exact}, translation residual {worst:.1e}"),
    )
}

struct RunSpec {
    target: TargetSpec,
    train: TrainConfig,
    solver: SolverConfig,
    n: usize,
    repeats: usize,
}

fn read_run(name: &str) -> Result<RunSpec, String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let field = |k: &str| v.get(k).cloned().unwrap_or(serde_json::Value::Null);
    let mut train: TrainConfig = serde_json::from_value(field("train")).map_err(|e| e.to_string())?;
    train.seed = v["seed"].as_u64().ok_or("config seed")?;
    let solver = match field("solver") {
        serde_json::Value::Null => SolverConfig::default(),
        s => serde_json::from_value(s).map_err(|e| e.to_string())?,
    };
    Ok(RunSpec {
        target: serde_json::from_value(field("target")).map_err(|e| e.to_string())?,
        train,
        solver,
        n: v["evaluate"]["n"].as_u64().unwrap_or(50_000) as usize,
        repeats: v["evaluate"]["repeats"].as_u64().unwrap_or(10) as usize,
    })
}

fn trained(config: &str, env_checkpoint: &str) -> Result<(FlowModel, RunSpec), String> {
    let run = read_run(config)?;
    if let Some(path) = std::env::var_os(env_checkpoint) {
        let (model, _) = load_checkpoint(&PathBuf::from(path)).map_err(|e| e.to_string())?;
        return Ok((model, run));
    }
    let target = run.target.build().map_err(|e| e.to_string())?;
    let every = (run.train.iterations / 20).max(1);
    let out = train_with(target, &run.train, |i, l| {
        if i % every == 0 {
            eprintln!("  [{config}] iteration {i}: loss {l:.4e}");
        }
    })
    .map_err(|e| e.to_string())?;
    Ok((out.model, run))
}

struct Scores {
    ess: f64,
    ed: Option<f64>,
    nll: Option<f64>,
    resample: f64,
}

fn evaluate(model: &FlowModel, run: &RunSpec, with_nll: bool) -> Result<Scores, String> {
    let target = &model.target;
    let (mut e, mut ed, mut nl, mut rr) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for r in 0..run.repeats {
        let mut rng = ChaCha8Rng::seed_from_u64(run.train.seed);
        rng.set_stream(r as u64 + 1);
        let z = draw_latent(&mut rng, model.dim(), run.n, model.latent_sigma);
        let batch = sample_backward(model, z, &run.solver, &mut rng).map_err(|e| e.to_string())?;
        let (w, _) = log_weights(target, &batch.x, &batch.logq).map_err(|e| e.to_string())?;
        e.push(ess(&w).map_err(|e| e.to_string())?);
        rr.push(batch.resample_rate());
        let exact = |rng: &mut ChaCha8Rng| -> Result<Array2<f64>, String> {
            let rows = target.sample(rng, run.n).map_err(|e| e.to_string())?;
            Ok(Array2::from_shape_vec((run.n, target.dim), rows).unwrap().reversed_axes().to_owned())
        };
        ed.push(energy_distance(&batch.x, &exact(&mut rng)?).map_err(|e| e.to_string())?);
        if with_nll {
            nl.push(nll(model, &exact(&mut rng)?, &run.solver).map_err(|e| e.to_string())?);
        }
        eprintln!("  repeat {r}: ess {:.4} ed {:.4e}", e[r], ed[r]);
    }
    Ok(Scores {
        ess: mean_std(&e).0,
        ed: Some(mean_std(&ed).0),
        nll: if with_nll { Some(mean_std(&nl).0) } else { None },
        resample: mean_std(&rr).0,
    })
}

fn gmm_end_to_end() -> Outcome {
    let (model, run) = trained("gmm40_gradflow.json", "BOLTZFLOW_GMM40_CHECKPOINT")?;
    let s = evaluate(&model, &run, true)?;
    let (ed, nl) = (s.ed.unwrap(), s.nll.unwrap());
    check(
        s.ess >= 0.9 && ed <= 0.05 && nl <= 7.1,
        format!("gradflow ESS {:.4}, energy distance {ed:.4e}, NLL {nl:.4} over {} repeats", s.ess, run.repeats),
    )
}

fn manywell_end_to_end() -> Outcome {
    let (learned, run_l) = trained("manywell_learned.json", "BOLTZFLOW_MANYWELL_LEARNED_CHECKPOINT")?;
    let l = evaluate(&learned, &run_l, false)?;
    let (grad, run_g) = trained("manywell_gradflow.json", "BOLTZFLOW_MANYWELL_GRADFLOW_CHECKPOINT")?;
    let g = evaluate(&grad, &run_g, false)?;
    let led = l.ed.unwrap();
    check(
        l.ess >= 0.9 && led <= 0.01 && g.ess >= 0.9 && g.resample < 1e-3,
        format!(
            "learned ESS {:.4}, energy distance {led:.3e}; gradflow ESS {:.4}, resample rate {:.3e}",
            l.ess, g.ess, g.resample
        ),
    )
}

fn main() -> ExitCode {
    let long = std::env::var("BOLTZFLOW_LONG").is_ok_and(|v| v == "1");
    let only: Option<Vec<String>> =
        std::env::var("BOLTZFLOW_ONLY").ok().map(|v| v.split(',').map(|s| s.trim().to_string()).collect());
    let criteria: [(&str, fn() -> Outcome, bool); 8] = [
        ("1 teleportation reproduction", teleportation, false),
        ("2 differentiation suite", differentiation, false),
        ("3 integrator suite", integrator, false),
        ("4 OU/VP consistency", ou_consistency, false),
        ("5 metrics suite", metrics_suite, false),
        ("6 GMM-40 end-to-end", gmm_end_to_end, true),
        ("7 many-well end-to-end", manywell_end_to_end, true),
        ("8 reduction and pinning", reductions, false),
    ];
    let mut failed = 0;
    for (name, run, is_long) in criteria {
        let number = name.split(' ').next().unwrap_or_default();
        if only.as_ref().is_some_and(|o| !o.iter().any(|n| n == number)) {
            continue;
        }
        if is_long && !long {
            println!("SKIP criterion {name}: long-running, set BOLTZFLOW_LONG=1");
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
