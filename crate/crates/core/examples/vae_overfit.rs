//! Overfit a small textured triplane VAE to one desk4 shape, then reconstruct and score it.
//!
//! `cargo run --release --example vae_overfit -- [shape] [steps]`

use trigen::data::{desk4_shape, sample_colored_pointcloud};
use trigen::metrics::{evaluate_mesh, EvalProtocol};
use trigen::vae::{train_vae, Stage, Vae, VaeConfig};

fn main() -> trigen::Result<()> {
    let mut args = std::env::args().skip(1);
    let name = args.next().unwrap_or_else(|| "torus".into());
    let steps: usize = args.next().map_or(150, |s| s.parse().expect("step count"));

    let cfg = VaeConfig {
        triplane_res: 32,
        channels: 4,
        enc_widths: vec![16, 16],
        dec_widths: vec![16, 16],
        grid_res_stage1: 32,
        grid_res_stage2: 40,
        points: 2048,
        color_points: 2048,
        views: 2,
        render_res: 96,
        resize_min: 32,
        resize_max: 32,
        steps_stage1: steps,
        steps_stage2: steps / 3,
        ..VaeConfig::default()
    };
    let shape = desk4_shape(&name)?;
    let mut vae = Vae::new(cfg, 0)?;
    let shapes = [shape.clone()];
    for stage in [Stage::One, Stage::Two] {
        train_vae(&mut vae, &shapes, stage, 0, |l| {
            if l.step % 25 == 0 {
                println!("stage {} step {:4} loss {:.4} (mask {:.4}, color {:.4})", l.stage, l.step, l.loss.total, l.loss.mask, l.loss.color);
            }
            Ok(())
        })?;
    }

    let cloud = sample_colored_pointcloud(&shape, vae.cfg.points, 1)?;
    let (mesh, texture) = vae.reconstruct(&cloud, vae.cfg.grid_res_stage2)?;
    let proto = EvalProtocol { surface_samples: 2048, views: 4, ..EvalProtocol::default() };
    let r = evaluate_mesh(&mesh, &shape, &proto)?;
    println!("{name}: {} faces, Chamfer-L1 {:.4}, mask IoU {:.3}", mesh.faces.len(), r.chamfer_l1, r.mask_iou);
    if let Some(tex) = texture {
        let gt = sample_colored_pointcloud(&shape, 2048, 2)?;
        let pred = tex.query(&gt.points)?;
        let err: f64 = pred.iter().zip(&gt.colors).map(|(p, g)| (0..3).map(|k| (p[k] - g[k]).abs()).sum::<f64>() / 3.0).sum::<f64>()
            / gt.len() as f64;
        println!("mean absolute color error {err:.4}");
    }
    Ok(())
}
