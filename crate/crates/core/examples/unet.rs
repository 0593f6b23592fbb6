//! The rolled-out triplane UNet with 3D-aware convolutions and an AdaGN embedding input.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trigen::nets::{UNet, UNetConfig};
use trigen::numerics::{Ctx, ParamStore, Tape, Tensor};

fn main() -> trigen::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let cfg = UNetConfig { in_ch: 4, out_ch: 4, widths: vec![16, 32], blocks_per_level: 1, emb_dim: Some(8), zero_init_out: false };
    let unet = UNet::new(&mut store, "unet", cfg, &mut rng);
    println!("{} parameter tensors, {} scalars, resolution multiple {}", store.len(), store.num_scalars(), unet.res_multiple());

    let x = Tensor::randn(&[4, 16, 48], &mut rng);
    let emb = Tensor::randn(&[1, 8], &mut rng);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store);
    let y = unet.forward(&ctx, tape.constant(x), Some(tape.constant(emb)))?;
    let loss = y.square()?.mean()?;
    let bindings = ctx.bindings();
    let g = tape.backward(loss)?;
    store.accumulate(&bindings, &g)?;
    println!("output {:?}, loss {:.4}, grad norm {:.4}", y.shape(), loss.item(), store.grad_norm(""));
    Ok(())
}
