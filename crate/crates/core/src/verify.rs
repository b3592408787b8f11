//! Self-checks runnable from the command line: finite-difference gradients,
//! GA against exhaustive enumeration, split against monolithic training.

use std::fmt;

use ndarray::Array2;
use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::rng;
use crate::selector::{brute_force_select, ga_select, fitness, Candidate, GaConfig, ObjectiveWeights};
use crate::splitnn::{cross_entropy, monolithic_step, split_step, LayerStack, MomentumState, Sgd, SplitModel};

const TAG_VERIFY: u64 = 0x7e51;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Gradients,
    Selector,
    SplitEquiv,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Gradients, Suite::Selector, Suite::SplitEquiv];
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub suite: Suite,
    pub passed: bool,
    pub lines: Vec<String>,
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "[{}] {:?}", if self.passed { "PASS" } else { "FAIL" }, self.suite)?;
        for l in &self.lines {
            writeln!(f, "  {l}")?;
        }
        Ok(())
    }
}

pub fn run(suite: Suite, seed: u64) -> Result<Report> {
    match suite {
        Suite::Gradients => gradients(seed, 20),
        Suite::Selector => selector(seed, 100),
        Suite::SplitEquiv => split_equivalence(seed, 20),
    }
}

/// Small random network: 2 to 4 layers, widths 2..=8, a random cut.
pub fn random_model(seed: u64, trial: u64) -> Result<(SplitModel, Array2<f64>, Vec<usize>)> {
    let mut r = rng::stream(seed, &[TAG_VERIFY, trial]);
    let n_layers = r.random_range(2..=4);
    let mut dims: Vec<usize> = (0..=n_layers).map(|_| r.random_range(2..=8)).collect();
    let classes = r.random_range(2..=4);
    dims[n_layers] = classes;
    let cut = r.random_range(1..n_layers);
    let mut model = SplitModel::init(&dims, cut, rng::derive(seed, &[TAG_VERIFY, trial, 1]))?;
    // Nonzero biases keep pre-activations off the ReLU kink, where a dead
    // layer followed by zero biases would otherwise put them exactly.
    for layer in model.client.layers.iter_mut().chain(model.server.layers.iter_mut()) {
        layer.bias.mapv_inplace(|_| r.random_range(-0.5..0.5));
    }
    let rows = r.random_range(1..=6);
    let x = Array2::from_shape_fn((rows, dims[0]), |_| r.random_range(-2.0..2.0));
    let y = (0..rows).map(|_| r.random_range(0..classes)).collect();
    Ok((model, x, y))
}

/// The `k`-th parameter of layer `li`, weights first then bias, in the
/// same order as `LayerStack::flat`.
fn param_mut(stack: &mut LayerStack, li: usize, k: usize) -> &mut f64 {
    let layer = &mut stack.layers[li];
    let n_w = layer.weight.len();
    if k < n_w {
        layer.weight.iter_mut().nth(k).expect("index within weights")
    } else {
        &mut layer.bias[k - n_w]
    }
}

fn loss_of(stack: &LayerStack, x: &Array2<f64>, y: &[usize]) -> Result<f64> {
    Ok(cross_entropy(&stack.predict(x)?, y)?.0)
}

/// Relative error `norm(a - n) / max(norm(a), norm(n))` between the analytic
/// gradient and central differences with step `1e-5`, over one whole net.
pub fn gradient_error(stack: &LayerStack, x: &Array2<f64>, y: &[usize]) -> Result<f64> {
    const H: f64 = 1e-5;
    let (logits, trace) = stack.forward(x)?;
    let (_, grad) = cross_entropy(&logits, y)?;
    let analytic = stack.backward(&trace, &grad)?.0.flat();
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut probe = stack.clone();
    for li in 0..stack.layers.len() {
        let n = stack.layers[li].weight.len() + stack.layers[li].bias.len();
        for k in 0..n {
            let orig = *param_mut(&mut probe, li, k);
            *param_mut(&mut probe, li, k) = orig + H;
            let up = loss_of(&probe, x, y)?;
            *param_mut(&mut probe, li, k) = orig - H;
            let down = loss_of(&probe, x, y)?;
            *param_mut(&mut probe, li, k) = orig;
            numeric.push((up - down) / (2.0 * H));
        }
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let norm_a: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let norm_n: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let scale = norm_a.max(norm_n);
    Ok(if scale == 0.0 { 0.0 } else { diff / scale })
}

pub fn gradients(seed: u64, nets: u64) -> Result<Report> {
    let mut worst: f64 = 0.0;
    for t in 0..nets {
        let (model, x, y) = random_model(seed, t)?;
        worst = worst.max(gradient_error(&model.monolithic(), &x, &y)?);
    }
    Ok(Report {
        suite: Suite::Gradients,
        passed: worst < 1e-5,
        lines: vec![format!("{nets} nets, max relative error {worst:.3e} (limit 1e-5)")],
    })
}

pub fn random_candidates(seed: u64, trial: u64, max_n: usize) -> Vec<Candidate> {
    let mut r = rng::stream(seed, &[TAG_VERIFY, 2, trial]);
    let n = r.random_range(1..=max_n);
    (0..n)
        .map(|i| Candidate {
            device_id: i * 3 + r.random_range(0..3),
            owner_label: r.random_range(0..(n / 2).max(1)),
            sample_count: r.random_range(80..=150),
            predicted_pro: r.random_range(0.05..2.0),
            hist_flag: r.random_bool(0.4),
        })
        .collect()
}

pub fn random_weights(seed: u64, trial: u64) -> ObjectiveWeights {
    let mut r = rng::stream(seed, &[TAG_VERIFY, 3, trial]);
    let raw: [f64; 5] = std::array::from_fn(|_| r.random_range(0.0..1.0));
    let total: f64 = raw.iter().sum();
    let mut w = raw.map(|v| v / total);
    let rest: f64 = w[1..].iter().sum();
    w[0] = 1.0 - rest;
    ObjectiveWeights::new(w).unwrap_or_else(|_| ObjectiveWeights::equal())
}

/// GA fitness over the enumerated optimum on `trials` random instances of
/// up to 15 candidates. Passes when at least 95% reach 0.95 of the optimum.
pub fn selector(seed: u64, trials: u64) -> Result<Report> {
    let mut bins = [0usize; 6];
    let mut good = 0;
    for t in 0..trials {
        let cands = random_candidates(seed, t, 15);
        let w = random_weights(seed, t);
        let (_, best) = brute_force_select(&cands, &w)?;
        let mask = ga_select(&cands, &w, &GaConfig::default(), rng::derive(seed, &[TAG_VERIFY, 4, t]))?;
        let got = fitness(&mask, &cands, &w)?;
        let ratio = if best > 0.0 { got / best } else { 1.0 };
        if ratio >= 0.95 {
            good += 1;
        }
        let bin = if ratio >= 1.0 { 0 } else { ((1.0 - ratio) * 100.0).ceil().min(5.0) as usize };
        bins[bin] += 1;
    }
    let labels = ["gap 0", "gap <=1%", "gap <=2%", "gap <=3%", "gap <=4%", "gap >4%"];
    let mut lines = vec![format!("{good}/{trials} instances within 5% of the optimum")];
    lines.extend(labels.iter().zip(bins).map(|(l, n)| format!("{l:>9} {n:>4} {}", "#".repeat(n))));
    Ok(Report { suite: Suite::Selector, passed: good * 100 >= 95 * trials as usize, lines })
}

/// Split and monolithic training from the same start over the same batch
/// sequence; reports the largest parameter drift.
pub fn split_equivalence(seed: u64, trials: u64) -> Result<Report> {
    let opt = Sgd::default();
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let (model, _, _) = random_model(seed, 100 + t)?;
        let mut client = model.client.clone();
        let mut server = model.server.clone();
        let mut mono = model.monolithic();
        let (mut cm, mut sm, mut mm) =
            (MomentumState::for_stack(&client), MomentumState::for_stack(&server), MomentumState::for_stack(&mono));
        let steps = 1 + (t % 5);
        for s in 0..steps {
            let mut r = rng::stream(seed, &[TAG_VERIFY, 5, t, s]);
            let rows = r.random_range(1..=6);
            let x = Array2::from_shape_fn((rows, model.layer_dims[0]), |_| r.random_range(-2.0..2.0));
            let y: Vec<usize> = (0..rows).map(|_| r.random_range(0..model.classes())).collect();
            split_step(&mut client, &mut server, &mut cm, &mut sm, &x, &y, &opt)?;
            monolithic_step(&mut mono, &mut mm, &x, &y, &opt)?;
        }
        let composed = model.with_halves(client, server).monolithic();
        worst = worst.max(composed.max_rel_diff(&mono));
    }
    Ok(Report {
        suite: Suite::SplitEquiv,
        passed: worst <= 1e-12,
        lines: vec![format!("{trials} nets, max parameter drift {worst:.3e} (limit 1e-12)")],
    })
}
