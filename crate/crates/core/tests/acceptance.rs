//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Criteria 1–4, 9 and 10 are self-contained. Criteria 5–8 score the desk4 training runs
//! stored under `runs/desk4` (override with `TRIGEN_ACCEPTANCE_RUNS`); `scripts/desk4.sh`
//! regenerates them. Sample-based criteria re-sample a few of the stored meshes and require
//! byte equality before scoring the stored set.
//!
//! Exit status is non-zero when a self-contained criterion fails. Failures of the training
//! criteria are reported but only fatal with `TRIGEN_ACCEPTANCE_STRICT=1`.
//! `TRIGEN_ACCEPTANCE_ONLY=1,3` runs a subset.

mod common;

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{bail, Context};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trigen::cli::pipeline::{
    self, encode_shapes, eval_protocol, load_diffusion, load_mesh, load_vae, reference_points, resolve_shapes,
    strict_nearest, texture_error, SampleRequest, DIFFUSION, DIFFUSION_UNCOND, VAE_STAGE1, VAE_STAGE2,
};
use trigen::cli::Config;
use trigen::data::{desk4, sphere_trace_render};
use trigen::diffusion::{
    cfg_predict, condition_encoder, cosine_schedule, invert_v, q_sample, sample, sample_rolled, v_target,
    DiffusionConfig, DiffusionModel, NoiseSchedule, SampleMode, SamplerOpts, VModel,
};
use trigen::metrics::{chamfer_l1, evaluate_mesh, mask_iou};
use trigen::nets::MlpHead;
use trigen::numerics::rng::derive_seed;
use trigen::numerics::{grad_check, Ctx, ParamStore, Tensor};
use trigen::render::{rasterize_hard, rasterize_soft, render_losses, sample_camera, Camera, CameraDist, SoftParams};
use trigen::tetmesh::{
    bound_deform_var, case_table, cross, crossing_points, dot, extract_topology, marching_tets, norm, sub,
    tet_case, watertight_report, TetGrid, TriMesh, Vec3,
};
use trigen::triplane::{conv3d_aware, sample_features, Triplane};
use trigen::vae::{kl_divergence, kl_var, reparam_sample, LatentDist};

type Outcome = anyhow::Result<(bool, String)>;

struct Criterion {
    id: usize,
    name: &'static str,
    /// Scores stored training runs rather than self-contained computations.
    trained: bool,
    budget: Option<Duration>,
    run: fn(&Env) -> Outcome,
}

struct Env {
    runs: PathBuf,
}

impl Env {
    fn config(&self) -> anyhow::Result<Config> {
        let mut cfg = Config::load(&common::config_path("desk4"))?;
        cfg.out_dir = self.runs.clone();
        Ok(cfg)
    }

    fn checkpoint(&self, name: &str) -> anyhow::Result<PathBuf> {
        let p = self.runs.join("checkpoints").join(name);
        if !p.exists() {
            bail!("missing {} (run scripts/desk4.sh)", p.display());
        }
        Ok(p)
    }
}

fn main() {
    let runs = std::env::var_os("TRIGEN_ACCEPTANCE_RUNS")
        .map(PathBuf::from)
        .unwrap_or_else(|| common::workspace_root().join("runs/desk4"));
    let strict = std::env::var("TRIGEN_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let only: Option<Vec<usize>> = std::env::var("TRIGEN_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let env = Env { runs };
    let mins = |m: u64| Some(Duration::from_secs(60 * m));
    let criteria = [
        Criterion { id: 1, name: "geometry oracle suite", trained: false, budget: mins(1), run: geometry_oracles },
        Criterion { id: 2, name: "gradient suite", trained: false, budget: mins(10), run: gradient_suite },
        Criterion { id: 3, name: "diffusion math suite", trained: false, budget: mins(1), run: diffusion_math },
        Criterion { id: 4, name: "cross-oracle render check", trained: false, budget: mins(2), run: cross_oracle },
        Criterion { id: 5, name: "VAE overfit run", trained: true, budget: None, run: vae_overfit },
        Criterion { id: 6, name: "texture overfit run", trained: true, budget: None, run: texture_overfit },
        Criterion { id: 7, name: "conditional diffusion overfit", trained: true, budget: None, run: conditional_diffusion },
        Criterion { id: 8, name: "unconditional finetune", trained: true, budget: None, run: unconditional },
        Criterion { id: 9, name: "statistical checks", trained: false, budget: None, run: statistics },
        Criterion { id: 10, name: "reproducibility", trained: false, budget: None, run: reproducibility },
    ];
    let mut fatal = 0;
    let mut failed = 0;
    let mut ran = 0;
    for c in &criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&c.id)) {
            continue;
        }
        ran += 1;
        let t0 = Instant::now();
        let (mut ok, mut detail) = match (c.run)(&env) {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e:#}")),
        };
        let dt = t0.elapsed();
        if let Some(b) = c.budget.filter(|b| dt > *b) {
            ok = false;
            detail.push_str(&format!("; over the {}s budget", b.as_secs()));
        }
        println!("{} [{}] {} ({:.1}s): {}", if ok { "PASS" } else { "FAIL" }, c.id, c.name, dt.as_secs_f64(), detail);
        if !ok {
            failed += 1;
            if !c.trained || strict {
                fatal += 1;
            }
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if fatal > 0 {
        std::process::exit(1);
    }
}

fn check(ok: &mut bool, cond: bool, notes: &mut Vec<String>, msg: String) {
    if !cond {
        *ok = false;
        notes.push(msg);
    }
}

// ---------------------------------------------------------------------------
// 1. geometry

fn geometry_oracles(_: &Env) -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();

    let g = TetGrid::build(32)?;
    let s: Vec<f64> = g.vertices.iter().map(|p| norm(*p) - 0.6).collect();
    let m = marching_tets(&g, &s, &vec![[0.0; 3]; g.num_vertices()])?;
    let rep = watertight_report(&m);
    let worst = m.vertices.iter().map(|v| (norm(*v) - 0.6).abs()).fold(0.0, f64::max);
    check(&mut ok, rep.is_closed && rep.boundary_edges == 0 && rep.non_manifold_edges == 0, &mut notes, format!("sphere {rep:?}"));
    check(&mut ok, worst < 2.0 * 2.0 / 32.0, &mut notes, format!("sphere radius error {worst}"));

    let cases = case_table_errors();
    check(&mut ok, cases.is_empty(), &mut notes, format!("case table: {}", cases.join("; ")));

    let mut vol_err: f64 = 0.0;
    for r in [1, 2, 4, 8] {
        let g = TetGrid::build(r)?;
        let v: f64 = (0..g.tets.len()).map(|t| g.tet_volume(t)).sum();
        vol_err = vol_err.max((v - 8.0).abs());
    }
    check(&mut ok, vol_err <= 1e-9, &mut notes, format!("volume error {vol_err:e}"));
    let detail = format!(
        "sphere r=32 closed with {} faces, max radius error {worst:.4}; 16 cases match; volume error {vol_err:.1e}",
        m.faces.len()
    );
    Ok((ok, if notes.is_empty() { detail } else { notes.join("; ") }))
}

fn det3(a: Vec3, b: Vec3, c: Vec3) -> f64 {
    dot(a, cross(b, c))
}

/// Each case against the linear interpolant on random tets: crossing edge set, triangle
/// count, orientation along the interpolant's gradient, and total area of the cut polygon.
fn case_table_errors() -> Vec<String> {
    let mut errs = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let table = case_table();
    for case in 0..16usize {
        for _ in 0..20 {
            let v: [Vec3; 4] = loop {
                let v: [Vec3; 4] = std::array::from_fn(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0)));
                if det3(sub(v[1], v[0]), sub(v[2], v[0]), sub(v[3], v[0])) > 0.06 {
                    break v;
                }
            };
            let s: [f64; 4] = std::array::from_fn(|i| {
                let m = rng.gen_range(0.1..1.0);
                if case >> i & 1 == 1 { -m } else { m }
            });
            if tet_case(s) != case {
                errs.push(format!("tet_case mislabels {case}"));
                continue;
            }
            let crossing = |a: usize, b: usize| -> Vec3 {
                std::array::from_fn(|k| (s[b] * v[a][k] - s[a] * v[b][k]) / (s[b] - s[a]))
            };
            let mut expected: Vec<[usize; 2]> = Vec::new();
            for a in 0..4 {
                for b in 0..4 {
                    if s[a] <= 0.0 && s[b] > 0.0 {
                        expected.push([a, b]);
                    }
                }
            }
            let tris = &table[case];
            let mut seen: Vec<[usize; 2]> = tris.iter().flatten().map(|e| [e[0] as usize, e[1] as usize]).collect();
            seen.sort_unstable();
            seen.dedup();
            if seen != expected {
                errs.push(format!("case {case}: edges {seen:?} vs {expected:?}"));
                continue;
            }
            let want_tris = match expected.len() {
                0 => 0,
                3 => 1,
                _ => 2,
            };
            if tris.len() != want_tris {
                errs.push(format!("case {case}: {} triangles", tris.len()));
            }
            let m = [sub(v[1], v[0]), sub(v[2], v[0]), sub(v[3], v[0])];
            let det = det3(m[0], m[1], m[2]);
            let ds = [s[1] - s[0], s[2] - s[0], s[3] - s[0]];
            let (c0, c1, c2) = (cross(m[1], m[2]), cross(m[2], m[0]), cross(m[0], m[1]));
            let grad: Vec3 = std::array::from_fn(|k| (ds[0] * c0[k] + ds[1] * c1[k] + ds[2] * c2[k]) / det);
            let mut area = 0.0;
            for t in tris {
                let p = t.map(|e| crossing(e[0] as usize, e[1] as usize));
                let n = cross(sub(p[1], p[0]), sub(p[2], p[0]));
                if dot(n, grad) <= 0.0 {
                    errs.push(format!("case {case}: triangle faces inward"));
                }
                area += 0.5 * norm(n);
            }
            if expected.len() == 4 {
                // convex quad: order the corners by angle about the centroid, then take half the
                // cross product of the diagonals
                let pts: Vec<Vec3> = expected.iter().map(|e| crossing(e[0], e[1])).collect();
                let c: Vec3 = std::array::from_fn(|k| pts.iter().map(|p| p[k]).sum::<f64>() / 4.0);
                let u = grad.map(|g| g / norm(grad));
                let e1 = sub(pts[0], c).map(|x| x / norm(sub(pts[0], c)));
                let e2 = cross(u, e1);
                let mut q: Vec<(f64, Vec3)> =
                    pts.iter().map(|p| (dot(sub(*p, c), e2).atan2(dot(sub(*p, c), e1)), *p)).collect();
                q.sort_by(|a, b| a.0.total_cmp(&b.0));
                let want = 0.5 * norm(cross(sub(q[2].1, q[0].1), sub(q[3].1, q[1].1)));
                if (area - want).abs() > 1e-9 * want.max(1.0) {
                    errs.push(format!("case {case}: area {area} vs {want}"));
                }
            }
        }
    }
    errs.dedup();
    errs
}

// ---------------------------------------------------------------------------
// 2. gradients

fn gradient_suite(_: &Env) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut results: Vec<(&str, f64, f64)> = Vec::new();

    // bilinear triplane sampling, w.r.t. planes and points (points kept off cell boundaries)
    let planes = Tensor::randn(&[3, 2, 6, 6], &mut rng);
    let pts: Vec<f64> = (0..15).map(|_| -0.9 + 0.4 * rng.gen_range(0..5) as f64 + rng.gen_range(0.1..0.3)).collect();
    let pts = Tensor::new(&[5, 3], pts)?;
    let w = Tensor::randn(&[5, 6], &mut rng);
    let (p1, w1) = (pts.clone(), w.clone());
    let e = grad_check(move |t, v| sample_features(v, t.constant(p1.clone()))?.mul(t.constant(w1.clone()))?.sum(), &planes, 1e-5)?;
    results.push(("bilinear sampling / planes", e, 1e-4));
    let e = grad_check(
        move |t, v| sample_features(t.constant(planes.clone()), v)?.mul(t.constant(w.clone()))?.sum(),
        &pts,
        1e-6,
    )?;
    results.push(("bilinear sampling / points", e, 1e-4));

    // 3D-aware convolution
    let img = Tensor::randn(&[2, 4, 12], &mut rng);
    let wt = Tensor::randn(&[3, 6, 3, 3], &mut rng);
    let b = Tensor::randn(&[3], &mut rng);
    let (w1, b1) = (wt.clone(), b.clone());
    let e = grad_check(move |t, v| conv3d_aware(v, t.constant(w1.clone()), t.constant(b1.clone()))?.tanh()?.sum(), &img, 1e-5)?;
    results.push(("conv3d_aware / input", e, 1e-4));
    let e = grad_check(move |t, v| conv3d_aware(t.constant(img.clone()), v, t.constant(b.clone()))?.tanh()?.sum(), &wt, 1e-5)?;
    results.push(("conv3d_aware / weights", e, 1e-4));

    // MLP head, input and every parameter
    let mut store = ParamStore::new();
    let head = MlpHead::new(&mut store, "h", 6, 8, 2, 4, &mut rng);
    let x = Tensor::randn(&[3, 6], &mut rng);
    let (s, h) = (store.clone(), head.clone());
    let e = grad_check(move |t, v| h.forward(&Ctx::new(t, &s), v)?.tanh()?.sum(), &x, 1e-6)?;
    let mut worst = e;
    for id in head.param_ids() {
        let (s, h, x) = (store.clone(), head.clone(), x.clone());
        let e = grad_check(
            move |t, v| {
                let ctx = Ctx::new(t, &s);
                ctx.bind(id, v);
                h.forward(&ctx, t.constant(x.clone()))?.tanh()?.sum()
            },
            store.value(id),
            1e-6,
        )?;
        worst = worst.max(e);
    }
    results.push(("MLP heads", worst, 1e-4));

    // marching-tet vertex positions w.r.t. SDF values and raw deformations
    let g = TetGrid::build(3)?;
    let sdf: Vec<f64> = g
        .vertices
        .iter()
        .map(|p| {
            let v = norm(*p) - 0.55 + rng.gen_range(-0.1..0.1);
            if v.abs() < 1e-3 { v + 0.01 } else { v }
        })
        .collect();
    let topo = extract_topology(&g, &sdf)?;
    let s_used = Tensor::from_vec(topo.used.iter().map(|&i| sdf[i as usize]).collect());
    let raw = Tensor::randn(&[topo.used.len(), 3], &mut rng);
    let wv = Tensor::randn(&[topo.num_vertices(), 3], &mut rng);
    let (t1, r1, w1, g1) = (topo.clone(), raw.clone(), wv.clone(), g.clone());
    let e = grad_check(
        move |t, v| {
            let d = bound_deform_var(t.constant(r1.clone()), 3)?;
            crossing_points(&g1, &t1, v, d)?.mul(t.constant(w1.clone()))?.sum()
        },
        &s_used,
        1e-6,
    )?;
    results.push(("marching-tet positions / s", e, 1e-4));
    let e = grad_check(
        move |t, v| {
            let d = bound_deform_var(v, 3)?;
            crossing_points(&g, &topo, t.constant(s_used.clone()), d)?.mul(t.constant(wv.clone()))?.sum()
        },
        &raw,
        1e-6,
    )?;
    results.push(("marching-tet positions / deform", e, 1e-4));

    // KL closed form
    let x = Tensor::randn(&[2, 12], &mut rng);
    let e = grad_check(|_, v| kl_var(v.narrow(0, 0, 1)?, v.narrow(0, 1, 1)?), &x, 1e-6)?;
    results.push(("KL closed form", e, 1e-4));

    // soft-render mask + depth losses w.r.t. the vertices of an octahedron (8 triangles), 32×32
    let cam = Camera::look_at([2.5, 0.0, 0.0], [0.0; 3], [0.0, 0.0, 1.0], std::f64::consts::PI / 3.0, 32, 32, 0.1, 6.0)?;
    let octa = |r: f64, dy: f64| {
        let v = vec![[r, dy, 0.0], [-r, dy, 0.0], [0.0, r + dy, 0.0], [0.0, -r + dy, 0.0], [0.0, dy, r], [0.0, dy, -r]];
        let f = vec![[0, 2, 4], [2, 1, 4], [1, 3, 4], [3, 0, 4], [2, 0, 5], [1, 2, 5], [3, 1, 5], [0, 3, 5]];
        TriMesh::new(v, f)
    };
    let mesh = octa(0.7, 0.0)?;
    let gt = rasterize_hard(&octa(0.6, 0.05)?, &cam);
    let mut x = mesh.vertex_tensor();
    let mut r9 = ChaCha8Rng::seed_from_u64(9);
    for v in x.data_mut() {
        *v += r9.gen_range(-0.03..0.03);
    }
    let faces = mesh.faces.clone();
    let params = SoftParams { tau: 2e-3, gamma: 0.05 };
    let e = grad_check(
        move |_, v| {
            let (lm, ld) = render_losses(rasterize_soft(v, &faces, &cam, params)?, &gt)?;
            lm.add(ld.mul_scalar(0.1)?)
        },
        &x,
        1e-6,
    )?;
    results.push(("soft-render losses", e, 1e-3));

    let ok = results.iter().all(|(_, e, tol)| e < tol);
    let detail = results.iter().map(|(n, e, tol)| format!("{n} {e:.1e}{}", if e < tol { "" } else { " (over)" })).collect::<Vec<_>>();
    Ok((ok, detail.join(", ")))
}

// ---------------------------------------------------------------------------
// 3. diffusion math

fn oracle(z0: Tensor, sched: NoiseSchedule) -> impl Fn(&Tensor, usize, &Tensor) -> trigen::Result<Tensor> {
    move |z, t, _| {
        let (a, s) = (sched.alpha[t], sched.sigma[t]);
        let eps = z.zip_map(&z0, |z, x| (z - a * x) / s)?;
        v_target(&z0, &eps, t, &sched)
    }
}

fn diffusion_math(_: &Env) -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    let sched = cosine_schedule(1000)?;
    let unit = (0..1000).map(|t| (sched.alpha[t].powi(2) + sched.sigma[t].powi(2) - 1.0).abs()).fold(0.0, f64::max);
    check(&mut ok, unit < 1e-12, &mut notes, format!("alpha^2 + sigma^2 off by {unit:e}"));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut round: f64 = 0.0;
    for t in (0..1000).step_by(37).chain([999]) {
        let z0 = Tensor::randn(&[2, 4, 12], &mut rng);
        let eps = Tensor::randn(&[2, 4, 12], &mut rng);
        let zt = q_sample(&z0, t, &eps, &sched)?;
        let v = v_target(&z0, &eps, t, &sched)?;
        let (x0, e) = invert_v(&zt, &v, t, &sched)?;
        round = round.max(x0.max_abs_diff(&z0)).max(e.max_abs_diff(&eps));
    }
    check(&mut ok, round < 1e-12, &mut notes, format!("v round trip {round:e}"));

    let z0 = Tensor::randn(&[2, 4, 12], &mut rng);
    let m = oracle(z0.clone(), sched.clone());
    let mut errs = Vec::new();
    for (steps, tol) in [(50, 1e-2), (1000, 1e-4)] {
        let opts = SamplerOpts { steps, guidance: 1.0, mode: SampleMode::Ode, second_order: false };
        let err = sample_rolled(&m, z0.shape(), &Tensor::zeros(&[1]), 9, &opts, &sched)?.max_abs_diff(&z0);
        check(&mut ok, err < tol, &mut notes, format!("oracle ODE at {steps} steps: {err:e}"));
        errs.push(err);
    }

    let cfg = DiffusionConfig { res: 4, widths: vec![4, 8], cond_dim: 8, time_dim: 8, emb_dim: 8, timesteps: 100, ..DiffusionConfig::default() };
    let mut model = DiffusionModel::new(cfg, 2, 3)?;
    // move off the zero-initialized output and modulation layers so the branches differ
    let mut r = ChaCha8Rng::seed_from_u64(4);
    for p in model.store.iter_mut() {
        let n = Tensor::randn(p.value.shape(), &mut r).scale(0.1);
        p.value.add_assign(&n)?;
    }
    let z = Tensor::randn(&[2, 4, 12], &mut r);
    let c = condition_encoder("toy", 8)?.embed("torus");
    let vc = model.predict_v(&z, 40, &c)?;
    let vu = model.predict_v(&z, 40, &model.zero_cond())?;
    check(&mut ok, vc != vu, &mut notes, "conditional and unconditional branches coincide".into());
    check(&mut ok, cfg_predict(&model, &z, 40, &c, 1.0)? == vc, &mut notes, "scale 1 differs from v_c".into());
    check(&mut ok, cfg_predict(&model, &z, 40, &c, 0.0)? == vu, &mut notes, "scale 0 differs from v_u".into());

    let detail = format!(
        "unit norm {unit:.1e}, round trip {round:.1e}, oracle error {:.1e} @50 / {:.1e} @1000, CFG identities exact",
        errs[0], errs[1]
    );
    Ok((ok, if notes.is_empty() { detail } else { notes.join("; ") }))
}

// ---------------------------------------------------------------------------
// 4. cross-oracle render

fn cross_oracle(_: &Env) -> Outcome {
    let dist = CameraDist { resolution: 256, ..CameraDist::default() };
    let mut worst = (f64::INFINITY, String::new());
    let mut parts = Vec::new();
    for spec in desk4() {
        let g = TetGrid::build(64)?;
        let s: Vec<f64> = g.vertices.iter().map(|&p| spec.sdf(p)).collect();
        let mesh = marching_tets(&g, &s, &vec![[0.0; 3]; g.num_vertices()])?;
        let mut min_iou = f64::INFINITY;
        for v in 0..4 {
            let cam = sample_camera(derive_seed(2024, &format!("eval.view{v}")), &dist)?;
            let iou = mask_iou(&sphere_trace_render(&spec, &cam).mask, &rasterize_hard(&mesh, &cam).mask)?;
            min_iou = min_iou.min(iou);
        }
        if min_iou < worst.0 {
            worst = (min_iou, spec.name.clone());
        }
        parts.push(format!("{} {min_iou:.4}", spec.name));
    }
    Ok((worst.0 > 0.98, format!("min IoU over 4 views at 256², grid 64: {}", parts.join(", "))))
}

// ---------------------------------------------------------------------------
// 5–6. VAE runs

fn recon_scores(env: &Env, ckpt: &str) -> anyhow::Result<Vec<(String, f64, f64)>> {
    let cfg = env.config()?;
    let (vae, _) = load_vae(&env.checkpoint(ckpt)?)?;
    let shapes = resolve_shapes(&cfg)?;
    let proto = eval_protocol(&cfg);
    let mus = encode_shapes(&vae, &cfg, &shapes)?;
    let mut out = Vec::new();
    for (s, z) in shapes.iter().zip(&mus) {
        let (mesh, _) = vae.decode(z, cfg.vae.grid_res_stage2, false)?;
        if mesh.faces.is_empty() {
            out.push((s.name.clone(), f64::INFINITY, 0.0));
            continue;
        }
        let r = evaluate_mesh(&mesh, s, &proto)?;
        out.push((s.name.clone(), r.chamfer_l1, r.mask_iou));
    }
    Ok(out)
}

fn vae_overfit(env: &Env) -> Outcome {
    let s1 = recon_scores(env, VAE_STAGE1)?;
    let s2 = recon_scores(env, VAE_STAGE2)?;
    let mean = |v: &[(String, f64, f64)]| v.iter().map(|x| x.1).sum::<f64>() / v.len() as f64;
    let (m1, m2) = (mean(&s1), mean(&s2));
    let per_shape = s2.iter().all(|(_, c, i)| *c < 0.05 && *i > 0.90);
    let detail = format!(
        "stage 2 {}; mean Chamfer stage 1 {m1:.4} -> stage 2 {m2:.4}",
        s2.iter().map(|(n, c, i)| format!("{n} CD {c:.4} IoU {i:.3}")).collect::<Vec<_>>().join(", ")
    );
    Ok((per_shape && m2 < m1, detail))
}

fn texture_overfit(env: &Env) -> Outcome {
    let cfg = env.config()?;
    let (vae, _) = load_vae(&env.checkpoint(VAE_STAGE2)?)?;
    let shapes = resolve_shapes(&cfg)?;
    let mus = encode_shapes(&vae, &cfg, &shapes)?;
    let mut errs = Vec::new();
    for (s, z) in shapes.iter().zip(&mus) {
        let seed = derive_seed(cfg.eval.seed, &format!("eval.color.{}", s.name));
        errs.push((s.name.clone(), texture_error(&vae, z, s, cfg.eval.color_samples, seed)?));
    }
    let mean = errs.iter().map(|e| e.1).sum::<f64>() / errs.len() as f64;
    let detail = format!(
        "mean abs RGB error {mean:.4} ({})",
        errs.iter().map(|(n, e)| format!("{n} {e:.4}")).collect::<Vec<_>>().join(", ")
    );
    Ok((mean < 0.10, detail))
}

// ---------------------------------------------------------------------------
// 7–8. diffusion runs

/// Re-sample index 0 for `tag` into a scratch directory and compare with the stored file.
fn resample_matches(env: &Env, tag: &str, unconditional: bool, stored: &Path) -> anyhow::Result<bool> {
    let scratch = tempfile::tempdir()?;
    let mut cfg = env.config()?;
    cfg.out_dir = scratch.path().to_path_buf();
    let req = SampleRequest {
        tags: vec![tag.to_string()],
        n: 1,
        diffusion_ckpt: Some(env.checkpoint(if unconditional { DIFFUSION_UNCOND } else { DIFFUSION })?),
        vae_ckpt: Some(env.checkpoint(VAE_STAGE2)?),
        unconditional,
    };
    let out = pipeline::sample_cmd(&cfg, &req)?;
    Ok(std::fs::read(&out[0].files[0])? == std::fs::read(stored).with_context(|| stored.display().to_string())?)
}

fn stored_sample(env: &Env, label: &str, i: usize) -> PathBuf {
    env.runs.join("samples").join(format!("{label}_{i:03}.tmesh"))
}

fn conditional_diffusion(env: &Env) -> Outcome {
    let cfg = env.config()?;
    let shapes = resolve_shapes(&cfg)?;
    let refs = reference_points(&shapes, &eval_protocol(&cfg))?;
    let proto = eval_protocol(&cfg);
    let mut ok = true;
    let mut parts = Vec::new();
    for s in &shapes {
        if !resample_matches(env, &s.name, false, &stored_sample(env, &s.name, 0))? {
            bail!("re-sampled {}_000 differs from the stored mesh", s.name);
        }
        let mut hits = 0;
        for i in 0..20 {
            let mesh = load_mesh(&stored_sample(env, &s.name, i))?;
            if let Some(d) = pipeline::chamfer_to_shapes(&mesh, &refs, &proto)? {
                hits += strict_nearest(&refs, &d, &s.name) as usize;
            }
        }
        ok &= hits * 10 >= 20 * 9;
        parts.push(format!("{} {hits}/20", s.name));
    }
    Ok((ok, format!("strictly nearest to own shape: {} (sample 0 of each re-sampled byte-identical)", parts.join(", "))))
}

fn unconditional(env: &Env) -> Outcome {
    let cfg = env.config()?;
    let (model, ck) = load_diffusion(&env.checkpoint(DIFFUSION_UNCOND)?)?;
    if !model.unconditional {
        bail!("checkpoint is not flagged unconditional");
    }
    let vae_res = ck.meta["vae_res"].as_u64().context("vae_res in checkpoint")? as usize;
    let enc = condition_encoder(&cfg.sample.encoder, model.cfg.cond_dim)?;
    let mut opts = SamplerOpts::from_config(&model.cfg, cfg.sample.mode);
    opts.steps = cfg.diffusion.sampler_steps;
    opts.guidance = cfg.diffusion.guidance_scale;
    let seed = derive_seed(cfg.seed, "sample.0");
    let base = sample(&model, &enc.embed(""), seed, &opts, vae_res)?;
    let bits = |t: &Triplane| t.planes().data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let mut independent = true;
    for tag in ["sphere", "torus", "an unseen tag"] {
        independent &= bits(&sample(&model, &enc.embed(tag), seed, &opts, vae_res)?) == bits(&base);
    }
    if !resample_matches(env, "", true, &stored_sample(env, "uncond", 0))? {
        bail!("re-sampled uncond_000 differs from the stored mesh");
    }
    let mut closed = 0;
    for i in 0..cfg.sample.n {
        closed += watertight_report(&load_mesh(&stored_sample(env, "uncond", i))?).is_closed as usize;
    }
    let n = cfg.sample.n;
    let ok = independent && closed * 10 >= n * 9;
    Ok((ok, format!("tag-independent latents: {independent}; watertight {closed}/{n}")))
}

// ---------------------------------------------------------------------------
// 9. statistics

fn statistics(_: &Env) -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();

    let d = LatentDist { mu: Triplane::zeros(100, 4), logvar: Triplane::zeros(100, 4) };
    let z = reparam_sample(&d, 17)?;
    let v = z.planes().data();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    check(&mut ok, n >= 1e5 && mean.abs() < 0.02 && (var - 1.0).abs() < 0.02, &mut notes, format!("moments {mean} {var}"));

    // E_q[log q − log p] by Monte Carlo against the closed form
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mu: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let lv: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut pm = Tensor::zeros(&[3, 1, 2, 2]);
    let mut pl = Tensor::zeros(&[3, 1, 2, 2]);
    pm.data_mut()[..10].copy_from_slice(&mu);
    pl.data_mut()[..10].copy_from_slice(&lv);
    let closed = kl_divergence(&[LatentDist { mu: Triplane::new(pm)?, logvar: Triplane::new(pl)? }])?;
    let draws = 100_000;
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..draws {
        let mut acc = 0.0;
        for i in 0..10 {
            let e: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
            let z = mu[i] + (0.5 * lv[i]).exp() * e;
            acc += -0.5 * e * e - 0.5 * lv[i] + 0.5 * z * z;
        }
        sum += acc;
        sq += acc * acc;
    }
    let mc = sum / draws as f64;
    let se = ((sq / draws as f64 - mc * mc) / draws as f64).sqrt();
    check(&mut ok, (mc - closed).abs() < 3.0 * se, &mut notes, format!("KL {closed} vs MC {mc} (se {se})"));

    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let a: Vec<Vec3> = (0..rng.gen_range(1..60)).map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0))).collect();
        let b: Vec<Vec3> = (0..rng.gen_range(1..60)).map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0))).collect();
        let one_way = |x: &[Vec3], y: &[Vec3]| {
            x.iter().map(|p| y.iter().map(|q| norm(sub(*p, *q))).fold(f64::MAX, f64::min)).sum::<f64>() / x.len() as f64
        };
        let want = 0.5 * (one_way(&a, &b) + one_way(&b, &a));
        worst = worst.max((chamfer_l1(&a, &b)? - want).abs());
    }
    check(&mut ok, worst < 1e-12, &mut notes, format!("chamfer vs brute force {worst:e}"));
    let detail = format!(
        "reparam mean {mean:.4} var {var:.4} over {n} draws; KL {closed:.4} vs MC {mc:.4} ± {se:.4}; chamfer max diff {worst:.1e}"
    );
    Ok((ok, if notes.is_empty() { detail } else { notes.join("; ") }))
}

// ---------------------------------------------------------------------------
// 10. reproducibility

fn reproducibility(_: &Env) -> Outcome {
    let cfg = common::config_path("smoke");
    let tmp = tempfile::tempdir()?;
    let out = tmp.path().join("run");
    common::run_pipeline(&cfg, &out)?;
    let first = common::snapshot(&out);
    std::fs::rename(&out, tmp.path().join("first"))?;
    common::run_pipeline(&cfg, &out)?;
    let second = common::snapshot(&out);
    let diff = common::differing(&first, &second);
    let commands = common::pipeline_commands(&out).len();
    let ply = first.keys().filter(|p| p.extension().is_some_and(|e| e == "ply")).count();
    let ckpt = first.keys().filter(|p| p.extension().is_some_and(|e| e == "ckpt")).count();
    Ok((
        diff.is_empty() && ply > 0 && ckpt > 0,
        if diff.is_empty() {
            format!("{commands} commands twice: {} files ({ply} PLY, {ckpt} checkpoints) byte-identical", first.len())
        } else {
            format!("differing files: {diff:?}")
        },
    ))
}
