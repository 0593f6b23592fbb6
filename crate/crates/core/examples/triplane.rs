//! Triplane basics: per-point feature lookup, the rolled-out 2D layout, and resizing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trigen::numerics::{Tape, Tensor};
use trigen::triplane::{sample_features, Triplane, PLANE_NAMES};

fn main() -> trigen::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tp = Triplane::new(Tensor::randn(&[3, 4, 16, 16], &mut rng))?;
    println!("planes {:?} ({}), {} channels at {}²", tp.planes().shape(), PLANE_NAMES.join("/"), tp.channels(), tp.res());

    let points = Tensor::new(&[2, 3], vec![0.0, 0.0, 0.0, 0.5, -0.25, 0.9])?;
    let tape = Tape::no_grad();
    let f = sample_features(tape.constant(tp.planes().clone()), tape.constant(points))?;
    println!("per-point features, the three planes concatenated: {:?}", f.shape());
    for row in f.value().data().chunks(3 * tp.channels()) {
        println!("  {row:.3?}");
    }

    let image = tp.rollout();
    println!("rolled out to {:?}; round trip exact: {}", image.shape(), Triplane::unroll(&image)? == tp);
    let up = tp.resize(32)?;
    println!("resized to {}², mean |x| {:.3} -> {:.3}", up.res(), mean_abs(tp.planes()), mean_abs(up.planes()));
    Ok(())
}

fn mean_abs(t: &Tensor) -> f64 {
    t.data().iter().map(|x| x.abs()).sum::<f64>() / t.len() as f64
}
