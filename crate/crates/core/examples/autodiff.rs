//! Reverse-mode differentiation on the tape, a finite-difference check, and AdamW fitting
//! a line through noisy points.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trigen::numerics::{grad_check, AdamW, Ctx, ParamStore, Tape, Tensor};

fn main() -> trigen::Result<()> {
    // d/dx sum(tanh(x)²) = 2 tanh(x) (1 − tanh²(x))
    let tape = Tape::new();
    let x = tape.var(Tensor::from_vec(vec![-1.0, 0.25, 2.0]));
    let y = x.tanh()?.square()?.sum()?;
    let g = tape.backward(y)?;
    println!("f = {:.6}, df/dx = {:?}", y.item(), g.wrt(x).data());

    let err = grad_check(|_, v| v.tanh()?.square()?.sum(), &Tensor::from_vec(vec![-1.0, 0.25, 2.0]), 1e-6)?;
    println!("max relative error against central differences: {err:.2e}");

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let xs: Vec<f64> = (0..64).map(|i| i as f64 / 32.0 - 1.0).collect();
    let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x - 0.5 + 0.05 * rng.gen_range(-1.0..1.0)).collect();
    let (xs, ys) = (Tensor::new(&[64, 1], xs)?, Tensor::new(&[64, 1], ys)?);
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::zeros(&[1, 1]));
    let b = store.add("b", Tensor::zeros(&[1]));
    let mut opt = AdamW::new(&store, 0.0);
    for step in 0..300 {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let pred = tape.constant(xs.clone()).matmul(ctx.p(w))?.add(ctx.p(b))?;
        let loss = pred.sub(tape.constant(ys.clone()))?.square()?.mean()?;
        let bindings = ctx.bindings();
        let grads = tape.backward(loss)?;
        store.accumulate(&bindings, &grads)?;
        opt.step(&mut store, 0.05);
        if step % 100 == 0 {
            println!("step {step:3} loss {:.5}", loss.item());
        }
    }
    println!("fit: w = {:.3}, b = {:.3}", store.value(w).item(), store.value(b).item());
    Ok(())
}
