//! Finite-difference checks of the autodiff engine.

use avfusion::gradcheck::{check_inputs, check_params};
use avfusion::nn::Init;
use avfusion::rng;
use avfusion::tensor::{Activation, Graph, ParameterSet, Tensor};
use rand::Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::substream(seed, "demo");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn main() -> avfusion::Result<()> {
    let x = random(&[4, 6], 1);
    let y = random(&[6, 3], 2);
    let r = check_inputs(&[x.clone(), y], |g: &mut Graph, v| {
        let m = g.matmul(v[0], v[1])?;
        let s = g.softmax(m, 1)?;
        let t = g.tanh(s)?;
        g.sum(t)
    })?;
    println!("matmul/softmax/tanh: {} entries, max rel err {:.2e}", r.checked, r.max_rel_err);

    let mut params = ParameterSet::new();
    let mut init = Init::new(&mut params, 3);
    let attn = init.attention("attn", 6, 2)?;
    let ff = init.feed_forward("ff", 6, 12, Activation::Gelu)?;
    let r = check_params(&params, |g, p| {
        let h = g.constant(x.clone());
        let a = attn.forward(g, p, h, h)?;
        let o = ff.forward(g, p, a)?;
        let sq = g.mul(o, o)?;
        g.mean(sq)
    })?;
    println!("attention + feed-forward: {} parameters, max rel err {:.2e}", r.checked, r.max_rel_err);
    Ok(())
}
