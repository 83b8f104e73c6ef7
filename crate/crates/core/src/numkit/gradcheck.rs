use std::collections::BTreeMap;

use super::{Graph, Params, Var};
use crate::error::{contract, Result};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// `max|analytic - numeric| / max|numeric|` over every checked entry.
    pub max_rel_error: f32,
    /// Name of the tensor holding the largest absolute error.
    pub worst: String,
    pub entries: usize,
    /// Per tensor: (max absolute error, max |numeric|).
    pub tensors: BTreeMap<String, (f32, f32)>,
}

/// Checks the gradient of the scalar built by `loss` with respect to every
/// parameter selected by `check`, perturbing each entry by `±h`.
pub fn check_gradients<F>(
    params: &Params,
    h: f32,
    check: impl Fn(&str) -> bool,
    loss: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &BTreeMap<String, Var>) -> Result<Var>,
{
    contract!(h > 0.0, "step h must be positive");
    let eval = |p: &Params| -> Result<f64> {
        let mut g = Graph::new();
        let vars = p.bind(&mut g, |_| false);
        let l = loss(&mut g, &vars)?;
        Ok(g.value(l).item()? as f64)
    };
    let mut g = Graph::new();
    let vars = params.bind(&mut g, &check);
    let l = loss(&mut g, &vars)?;
    let grads = g.backward(l)?;
    let mut out = GradCheck {
        max_rel_error: 0.0,
        worst: String::new(),
        entries: 0,
        tensors: BTreeMap::new(),
    };
    let (mut max_err, mut max_num) = (0.0f32, 0.0f32);
    let mut probe = params.clone();
    for (name, t) in params.iter().filter(|(n, _)| check(n)) {
        let analytic = grads
            .by_name(name)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        let mut numeric = Vec::with_capacity(t.numel());
        for j in 0..t.numel() {
            let orig = t.data()[j];
            probe.get_mut(name)?.data_mut()[j] = orig + h;
            let plus = eval(&probe)?;
            probe.get_mut(name)?.data_mut()[j] = orig - h;
            let minus = eval(&probe)?;
            probe.get_mut(name)?.data_mut()[j] = orig;
            numeric.push(((plus - minus) / (2.0 * h as f64)) as f32);
        }
        let scale = numeric.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        let err = analytic
            .iter()
            .zip(&numeric)
            .fold(0.0f32, |m, (a, n)| m.max((a - n).abs()));
        if err >= max_err {
            max_err = err;
            out.worst = name.clone();
        }
        max_num = max_num.max(scale);
        out.entries += t.numel();
        out.tensors.insert(name.clone(), (err, scale));
    }
    out.max_rel_error = max_err / max_num.max(1e-12);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Tensor;

    #[test]
    fn quadratic_passes() {
        let mut p = Params::new();
        p.insert("w", Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
        let r = check_gradients(
            &p,
            1e-3,
            |_| true,
            |g, v| {
                let w = v["w"];
                let sq = g.mul(w, w)?;
                Ok(g.sum(sq))
            },
        )
        .unwrap();
        assert_eq!(r.entries, 3);
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // relu at exactly 0 has a kink; central differences see slope 1/2
        let mut p = Params::new();
        p.insert("w", Tensor::new(vec![1], vec![0.0]).unwrap());
        let r = check_gradients(
            &p,
            1e-3,
            |_| true,
            |g, v| {
                let a = g.relu(v["w"]);
                Ok(g.sum(a))
            },
        )
        .unwrap();
        assert!(r.max_rel_error > 0.4, "{r:?}");
    }
}
