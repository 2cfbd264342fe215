//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use pmfl::contrastive::{combined_loss_and_grad, cosine_similarity, ContrastiveSettings, LocalBuffer};
use pmfl::data::Minibatch;
use pmfl::rng::{rng_from_seed, SimRng};
use pmfl::tensor_nn::{forward_representation, Activation, Architecture, ModelParams};
use rand::Rng;

/// Pre-activations of every layer, written independently of the library's forward pass.
pub fn pre_activations(p: &ModelParams, x: &[f64]) -> Vec<Vec<f64>> {
    let n = p.num_layers();
    let mut h = x.to_vec();
    let mut out = Vec::new();
    for (l, (inputs, outputs)) in p.layer_dims().into_iter().enumerate() {
        let w = p.layer_weights(l);
        let b = p.layer_bias(l);
        let z: Vec<f64> = (0..outputs)
            .map(|o| b[o] + (0..inputs).map(|i| w[o * inputs + i] * h[i]).sum::<f64>())
            .collect();
        h = if l + 1 < n {
            z.iter().map(|v| v.max(0.0)).collect()
        } else {
            z.clone()
        };
        out.push(z);
    }
    out
}

pub struct GradFixture {
    pub params: ModelParams,
    pub global: ModelParams,
    pub buffer: LocalBuffer,
    pub batch: Minibatch,
    pub settings: ContrastiveSettings,
}

fn perturb(m: &ModelParams, scale: f64, rng: &mut SimRng) -> ModelParams {
    let v = m.as_flat().iter().map(|w| w + scale * rng.random_range(-1.0..1.0)).collect();
    m.with_values(v).unwrap()
}

/// Distance of the fixture from every non-smooth point of the loss: ReLU
/// kinks of the trained model, zero-norm representations, and the
/// positive/negative threshold.
pub fn smoothness_margin(f: &GradFixture) -> f64 {
    let mut margin = f64::INFINITY;
    for i in 0..f.batch.len() {
        let x = f.batch.row(i);
        let pre = pre_activations(&f.params, x);
        for layer in &pre[..pre.len() - 1] {
            for v in layer {
                margin = margin.min(v.abs());
            }
        }
        if f.settings.lambda == 0.0 {
            continue;
        }
        let z = forward_representation(&f.params, x).unwrap();
        let zn = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        margin = margin.min(zn);
        let g = forward_representation(&f.global, x).unwrap();
        let mu = match f.buffer.newest() {
            Some(r) => cosine_similarity(&forward_representation(r, x).unwrap(), &g).unwrap(),
            None => 1.0,
        };
        for m in f.buffer.iter() {
            let h = forward_representation(m, x).unwrap();
            margin = margin.min(h.iter().map(|v| v * v).sum::<f64>().sqrt());
            margin = margin.min((cosine_similarity(&z, &h).unwrap() - mu).abs());
        }
        margin = margin.min(g.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    margin
}

/// Random small network, batch and buffer; `contrastive` selects lambda > 0
/// with a nonempty buffer. Fixtures closer than `min_margin` to a
/// non-smooth point are redrawn.
pub fn grad_fixture(seed: u64, contrastive: bool, min_margin: f64) -> GradFixture {
    let mut rng = rng_from_seed(seed);
    loop {
        let arch = Architecture {
            input_dim: rng.random_range(2..6),
            encoder: (0..rng.random_range(1..3)).map(|_| rng.random_range(3..7)).collect(),
            projection: vec![rng.random_range(3..6)],
            classifier: {
                let mut c: Vec<usize> = (0..rng.random_range(0..2)).map(|_| rng.random_range(3..6)).collect();
                c.push(rng.random_range(2..5));
                c
            },
            activation: Activation::Relu,
        };
        let global = ModelParams::init_uniform(&arch, &mut rng).unwrap();
        // a few biases keep ReLU units alive
        let global = {
            let mut g = global;
            for l in 0..g.num_layers() {
                for b in g.layer_bias_mut(l) {
                    *b = rng.random_range(0.0..0.3);
                }
            }
            g
        };
        let params = perturb(&global, 0.3, &mut rng);
        let mut buffer = LocalBuffer::new(4);
        if contrastive {
            for _ in 0..rng.random_range(2..5) {
                buffer.push(perturb(&global, 0.6, &mut rng));
            }
        }
        let n = rng.random_range(2..6);
        let classes = arch.num_classes();
        let feats = (0..n * arch.input_dim).map(|_| rng.random_range(-1.5..1.5)).collect();
        let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let batch = Minibatch::new(arch.input_dim, classes, feats, labels).unwrap();
        let settings = ContrastiveSettings {
            tau: rng.random_range(0.3..1.5),
            lambda: if contrastive { rng.random_range(0.2..2.0) } else { 0.0 },
        };
        let f = GradFixture {
            params,
            global,
            buffer,
            batch,
            settings,
        };
        if smoothness_margin(&f) >= min_margin {
            return f;
        }
    }
}

pub fn loss_at(f: &GradFixture, params: &ModelParams) -> f64 {
    combined_loss_and_grad(params, &f.batch, &f.global, &f.buffer, f.settings, f.buffer.newest())
        .unwrap()
        .loss
}

/// Largest relative error between the analytic gradient and central
/// differences; relative error is taken against `max(|a|, |n|, 1e-6)`.
pub fn max_relative_error(f: &GradFixture, step: f64) -> f64 {
    let g = combined_loss_and_grad(&f.params, &f.batch, &f.global, &f.buffer, f.settings, f.buffer.newest()).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..f.params.len() {
        let mut plus = f.params.clone();
        plus.as_flat_mut()[i] += step;
        let mut minus = f.params.clone();
        minus.as_flat_mut()[i] -= step;
        let numeric = (loss_at(f, &plus) - loss_at(f, &minus)) / (2.0 * step);
        let analytic = g.grad.as_flat()[i];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

/// Brute-force weight oracle: mean length of the segments obtained by cutting
/// the trace at participations and at every `cutoff`-long gap; 1 before any cut.
pub fn oracle_weight(trace: &[bool], cutoff: Option<u64>) -> f64 {
    let mut lengths = Vec::new();
    let mut gap = 0u64;
    for &a in trace {
        gap += 1;
        if a || Some(gap) == cutoff {
            lengths.push(gap as f64);
            gap = 0;
        }
    }
    if lengths.is_empty() {
        1.0
    } else {
        lengths.iter().sum::<f64>() / lengths.len() as f64
    }
}
