//! Central-difference gradient checks in f64.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::params::ParamStore;
use crate::numerics::rng::Rng;
use crate::numerics::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, 1e-6)`.
    pub worst: f64,
    pub checked: usize,
}

fn relative(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// `coords` distinct flat positions out of `total` (all of them if fewer).
fn pick(total: usize, coords: usize, rng: &mut Rng) -> Vec<usize> {
    if coords >= total {
        return (0..total).collect();
    }
    let mut p = rng.permutation(total);
    p.truncate(coords);
    p.sort_unstable();
    p
}

pub type Build<'a> = dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId> + 'a;

/// Checks the gradient of the scalar built by `build` with respect to each
/// input tensor, on `coords` random coordinates spread over all inputs.
pub fn check_inputs(
    inputs: &[Tensor<f64>],
    build: &Build<'_>,
    coords: usize,
    h: f64,
    rng: &mut Rng,
) -> Result<GradCheck> {
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let ids: Vec<_> = xs.iter().map(|x| g.param(x.clone())).collect();
        let out = build(&mut g, &ids)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::<f64>::new();
    let ids: Vec<_> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = build(&mut g, &ids)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| grads.get_f64(id)).collect();

    let offsets: Vec<usize> = inputs
        .iter()
        .scan(0, |acc, x| {
            let start = *acc;
            *acc += x.numel();
            Some(start)
        })
        .collect();
    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let mut worst: f64 = 0.0;
    let chosen = pick(total, coords, rng);
    for &flat in &chosen {
        let which = offsets
            .iter()
            .rposition(|&o| o <= flat)
            .expect("offset 0 exists");
        let c = flat - offsets[which];
        let mut plus = inputs.to_vec();
        plus[which].data_mut()[c] += h;
        let mut minus = inputs.to_vec();
        minus[which].data_mut()[c] -= h;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
        worst = worst.max(relative(analytic[which][c], numeric));
    }
    Ok(GradCheck {
        worst,
        checked: chosen.len(),
    })
}

/// Checks `analytic` (named gradients, as from [`Graph::named_gradients`])
/// against central differences of `value` over `coords` random coordinates
/// of the named tensors in `params`.
pub fn check_params(
    params: &ParamStore<f64>,
    value: &dyn Fn(&ParamStore<f64>) -> Result<f64>,
    analytic: &BTreeMap<String, Vec<f64>>,
    coords: usize,
    h: f64,
    rng: &mut Rng,
) -> Result<GradCheck> {
    let names: Vec<&String> = analytic.keys().collect();
    let mut index = Vec::new();
    for name in &names {
        let n = params.get(name)?.numel();
        if analytic[*name].len() != n {
            return Err(Error::invalid(format!(
                "gradient for `{name}` has the wrong length"
            )));
        }
        index.extend((0..n).map(|c| (*name, c)));
    }
    let mut worst: f64 = 0.0;
    let chosen = pick(index.len(), coords, rng);
    for &k in &chosen {
        let (name, c) = index[k];
        let mut plus = params.clone();
        plus.get_mut(name)?.data_mut()[c] += h;
        let mut minus = params.clone();
        minus.get_mut(name)?.data_mut()[c] -= h;
        let numeric = (value(&plus)? - value(&minus)?) / (2.0 * h);
        worst = worst.max(relative(analytic[name][c], numeric));
    }
    Ok(GradCheck {
        worst,
        checked: chosen.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catches_a_wrong_gradient() {
        // y = sum(x * x) checked against itself passes; a scaled copy does not.
        let x = Tensor::randn(&[4, 4], 1.0, &mut Rng::new(1));
        let ok = check_inputs(
            &[x.clone()],
            &|g, ids| {
                let p = g.mul(ids[0], ids[0])?;
                g.sum(p)
            },
            usize::MAX,
            1e-3,
            &mut Rng::new(2),
        )
        .unwrap();
        assert_eq!(ok.checked, 16);
        assert!(ok.worst < 1e-8, "{}", ok.worst);

        let mut params = ParamStore::<f64>::new();
        params.insert("x", x.clone()).unwrap();
        let wrong: BTreeMap<String, Vec<f64>> =
            [("x".to_string(), x.data().iter().map(|v| 3.0 * v).collect())].into();
        let value = |p: &ParamStore<f64>| Ok(p.get("x")?.data().iter().map(|v| v * v).sum::<f64>());
        let bad = check_params(&params, &value, &wrong, 5, 1e-3, &mut Rng::new(3)).unwrap();
        assert_eq!(bad.checked, 5);
        assert!(bad.worst > 0.3);
    }
}
