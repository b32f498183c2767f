//! Central-difference gradient verification.
//!
//! Deliberately independent of the reverse pass: the caller supplies a
//! forward-only loss closure plus the analytic gradients it wants checked,
//! and this module only ever perturbs parameters and re-evaluates.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::num::nn::Params;
use crate::num::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckSettings {
    /// Central-difference step.
    pub h: f64,
    /// Relative tolerance counted as a tight match.
    pub rel_tight: f64,
    /// Relative tolerance every coordinate must satisfy.
    pub rel_loose: f64,
    /// Absolute tolerance under which a pair always matches.
    pub abs_floor: f64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings { h: 1e-6, rel_tight: 1e-4, rel_loose: 1e-3, abs_floor: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub tight: usize,
    pub loose: usize,
    pub max_rel: f64,
    pub worst_coord: String,
}

impl GradCheckReport {
    pub fn tight_fraction(&self) -> f64 {
        if self.checked == 0 {
            return 1.0;
        }
        self.tight as f64 / self.checked as f64
    }

    pub fn all_loose(&self) -> bool {
        self.loose == self.checked
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    let denom = a.abs().max(n.abs());
    if denom == 0.0 {
        0.0
    } else {
        (a - n).abs() / denom
    }
}

/// Compare analytic gradients against central differences on `n_coords`
/// uniformly sampled scalar coordinates.
pub fn check<F>(
    params: &Params,
    analytic: &BTreeMap<String, Tensor>,
    mut loss: F,
    rng: &mut ChaCha8Rng,
    n_coords: usize,
    settings: &GradCheckSettings,
) -> Result<GradCheckReport>
where
    F: FnMut(&Params) -> Result<f64>,
{
    // Flattened coordinate space over parameters that have a gradient.
    let mut spans: Vec<(&String, usize)> = Vec::new();
    let mut total = 0usize;
    for (name, t) in params.iter() {
        if analytic.contains_key(name) {
            spans.push((name, t.len()));
            total += t.len();
        }
    }
    if total == 0 {
        return Err(Error::Config("gradcheck: no overlapping parameters".into()));
    }

    let mut report = GradCheckReport {
        checked: 0,
        tight: 0,
        loose: 0,
        max_rel: 0.0,
        worst_coord: String::new(),
    };
    let mut work = params.clone();
    for _ in 0..n_coords {
        let mut flat = rng.gen_range(0..total);
        let mut coord = None;
        for &(name, len) in &spans {
            if flat < len {
                coord = Some((name.clone(), flat));
                break;
            }
            flat -= len;
        }
        let (name, off) = coord.expect("flat index in range");

        let orig = work.get(&name)?.data[off];
        work.get_mut(&name)?.data[off] = orig + settings.h;
        let up = loss(&work)?;
        work.get_mut(&name)?.data[off] = orig - settings.h;
        let down = loss(&work)?;
        work.get_mut(&name)?.data[off] = orig;

        let numeric = (up - down) / (2.0 * settings.h);
        let a = analytic[&name].data[off];
        let abs_ok = (a - numeric).abs() <= settings.abs_floor;
        let rel = rel_err(a, numeric);

        report.checked += 1;
        if abs_ok || rel <= settings.rel_tight {
            report.tight += 1;
        }
        if abs_ok || rel <= settings.rel_loose {
            report.loose += 1;
        }
        let effective = if abs_ok { 0.0 } else { rel };
        if effective > report.max_rel {
            report.max_rel = effective;
            report.worst_coord = format!("{name}[{off}] analytic={a} numeric={numeric}");
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num::nn::{linear, Binding};
    use crate::num::tape::Tape;
    use crate::rng::Seed;

    // A two-layer tanh net trained on nothing: its gradients come from the
    // tape, and the checker must agree with central differences.
    fn toy_loss(params: &Params, x: &Tensor, with_grads: bool) -> (f64, BTreeMap<String, Tensor>) {
        let mut tape = Tape::new();
        let mut bind = Binding::new(params);
        let xv = tape.leaf(x.clone());
        let h = linear(&mut tape, &mut bind, "l1", xv).unwrap();
        let h = tape.tanh(h);
        let y = linear(&mut tape, &mut bind, "l2", h).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let loss = tape.mean(sq);
        let lv = tape.value(loss).scalar().unwrap();
        if with_grads {
            tape.backward(loss).unwrap();
            (lv, bind.grads(&tape))
        } else {
            (lv, BTreeMap::new())
        }
    }

    #[test]
    fn tape_gradients_pass_central_difference() {
        let seed = Seed(11);
        let mut init = seed.stream("init");
        let mut params = Params::new();
        params.init_linear(&mut init, "l1", 5, 8);
        params.init_linear(&mut init, "l2", 8, 3);
        let mut xrng = seed.stream("x");
        let mut x = Tensor::zeros(4, 5);
        crate::rng::fill_normal(&mut xrng, &mut x.data, 1.0);

        let (_, grads) = toy_loss(&params, &x, true);
        let mut crng = seed.stream("coords");
        let report = check(
            &params,
            &grads,
            |p| Ok(toy_loss(p, &x, false).0),
            &mut crng,
            200,
            &GradCheckSettings::default(),
        )
        .unwrap();
        assert!(report.tight_fraction() >= 0.95, "tight {}/{}", report.tight, report.checked);
        assert!(report.all_loose(), "worst: {}", report.worst_coord);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let seed = Seed(12);
        let mut init = seed.stream("init");
        let mut params = Params::new();
        params.init_linear(&mut init, "l1", 3, 4);
        params.init_linear(&mut init, "l2", 4, 2);
        let mut xrng = seed.stream("x");
        let mut x = Tensor::zeros(2, 3);
        crate::rng::fill_normal(&mut xrng, &mut x.data, 1.0);

        let (_, mut grads) = toy_loss(&params, &x, true);
        for v in grads.get_mut("l1.w").unwrap().data.iter_mut() {
            *v *= 2.0; // corrupt
        }
        let mut crng = seed.stream("coords");
        let report = check(
            &params,
            &grads,
            |p| Ok(toy_loss(p, &x, false).0),
            &mut crng,
            300,
            &GradCheckSettings::default(),
        )
        .unwrap();
        assert!(!report.all_loose(), "corruption should be caught");
    }
}
