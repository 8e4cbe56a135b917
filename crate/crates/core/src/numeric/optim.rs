use super::params::ParamSet;
use super::tensor::Vector;
use crate::error::{Error, Result};

/// `p' = p − lr·g`.
pub fn sgd_update(params: &Vector, grads: &Vector, lr: f64) -> Result<Vector> {
    if params.len() != grads.len() {
        return Err(Error::shape(
            "sgd_update",
            format!("params({})", params.len()),
            format!("grads({})", grads.len()),
        ));
    }
    if !(lr > 0.0) {
        return Err(Error::NonPositive { what: "learning rate", value: lr });
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {i}")));
    }
    Ok(Vector::from_raw(params.iter().zip(grads.iter()).map(|(p, g)| p - lr * g).collect()))
}

/// In-place SGD over every block; `lr_for` maps a block name to its learning rate.
/// `step` is only used to label the error when a gradient is non-finite.
pub fn sgd_step<P, L>(params: &mut P, grads: &P, lr_for: L, step: usize) -> Result<()>
where
    P: ParamSet,
    L: Fn(&str) -> f64,
{
    let mut blocks: Vec<(String, Vec<f64>)> = Vec::new();
    grads.visit(&mut |name, data| blocks.push((name.to_string(), data.to_vec())));
    for (name, g) in &blocks {
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "training step {step}: gradient of `{name}` entry {i} is {}",
                g[i]
            )));
        }
    }
    let mut idx = 0;
    params.visit_mut(&mut |name, data| {
        let lr = lr_for(name);
        for (p, g) in data.iter_mut().zip(&blocks[idx].1) {
            *p -= lr * g;
        }
        idx += 1;
    });
    Ok(())
}
