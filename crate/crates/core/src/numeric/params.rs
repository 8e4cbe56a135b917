use super::ops::LayerNormParams;

/// A named collection of trainable blocks that can be flattened, zeroed and
/// walked in a fixed order.
pub trait ParamSet {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));

    fn layout(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        self.visit(&mut |name, data| out.push((name.to_string(), data.len())));
        out
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, data| n += data.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |_, data| out.extend_from_slice(data));
        out
    }

    fn assign_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.visit_mut(&mut |_, data| {
            data.copy_from_slice(&flat[offset..offset + data.len()]);
            offset += data.len();
        });
        assert_eq!(offset, flat.len(), "assign_flat length mismatch");
    }

    fn zero(&mut self) {
        self.visit_mut(&mut |_, data| data.iter_mut().for_each(|v| *v = 0.0));
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.zero();
        z
    }

    /// `self += scale · other` blockwise.
    fn add_scaled(&mut self, other: &Self, scale: f64)
    where
        Self: Sized,
    {
        let flat = other.flatten();
        let mut offset = 0;
        self.visit_mut(&mut |_, data| {
            for (d, o) in data.iter_mut().zip(&flat[offset..]) {
                *d += scale * o;
            }
            offset += data.len();
        });
    }

    fn sq_norm(&self) -> f64 {
        let mut s = 0.0;
        self.visit(&mut |_, data| s += data.iter().map(|v| v * v).sum::<f64>());
        s
    }
}

pub(crate) fn visit_ln(prefix: &str, ln: &LayerNormParams, f: &mut dyn FnMut(&str, &[f64])) {
    f(&format!("{prefix}.gain"), &ln.gain);
    f(&format!("{prefix}.bias"), &ln.bias);
}

pub(crate) fn visit_ln_mut(prefix: &str, ln: &mut LayerNormParams, f: &mut dyn FnMut(&str, &mut [f64])) {
    f(&format!("{prefix}.gain"), ln.gain.as_mut_slice());
    f(&format!("{prefix}.bias"), ln.bias.as_mut_slice());
}
