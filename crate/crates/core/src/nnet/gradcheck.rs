//! Finite-difference verification of analytic gradients.
//!
//! Central differences on every parameter entry, with a kink guard: an entry
//! is skipped when perturbing it flips any relu activation sign or maxpool
//! argmax between the two probe points, since the loss is not differentiable
//! there and the comparison would be meaningless.

use super::layers::{Layer, SeqGrads, Sequential, Trace};
use super::tensor::Tensor;
use crate::error::Result;

/// Scalar loss over the network output, returning the gradient wrt it.
pub type LossFn<'a> = &'a dyn Fn(&Tensor) -> (f64, Tensor);

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// (layer index, param index, max relative error over checked entries).
    pub per_param: Vec<(usize, usize, f64)>,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tolerance
    }
}

/// FNV-1a hash of the network's activation pattern (relu signs, pool argmax).
fn activation_pattern(net: &Sequential, trace: &Trace) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut feed = |v: u64| {
        h ^= v;
        h = h.wrapping_mul(0x100000001b3);
    };
    for (i, layer) in net.layers.iter().enumerate() {
        match layer {
            Layer::Relu => {
                for (j, &x) in trace.inputs[i].data().iter().enumerate() {
                    if x > 0.0 {
                        feed(j as u64 + 1);
                    }
                }
                feed(u64::MAX);
            }
            Layer::MaxPool2d(_) => {
                // Re-running the pool is cheap and yields the argmax pattern.
                let y = layer.backward(&trace.inputs[i], &Tensor::filled(
                    layer.forward(&trace.inputs[i]).unwrap().shape(),
                    1.0,
                ));
                for (j, &g) in y.0.data().iter().enumerate() {
                    if g != 0.0 {
                        feed(j as u64 + 1);
                        feed(g.to_bits());
                    }
                }
                feed(u64::MAX - 1);
            }
            _ => {}
        }
    }
    h
}

/// Compare supplied analytic gradients against central finite differences.
pub fn grad_check_against(
    net: &mut Sequential,
    input: &Tensor,
    loss: LossFn,
    analytic: &SeqGrads,
    eps: f64,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        per_param: Vec::new(),
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
    };

    let n_layers = net.layers.len();
    for li in 0..n_layers {
        let n_params = net.layers[li].params().len();
        for pi in 0..n_params {
            let n_entries = net.layers[li].params()[pi].numel();
            let mut param_max = 0.0f64;
            for ei in 0..n_entries {
                let orig = net.layers[li].params()[pi].data()[ei];

                net.layers[li].params_mut()[pi].data_mut()[ei] = orig + eps;
                let trace_p = net.forward(input)?;
                let (loss_p, _) = loss(&trace_p.output);
                let pat_p = activation_pattern(net, &trace_p);

                net.layers[li].params_mut()[pi].data_mut()[ei] = orig - eps;
                let trace_m = net.forward(input)?;
                let (loss_m, _) = loss(&trace_m.output);
                let pat_m = activation_pattern(net, &trace_m);

                net.layers[li].params_mut()[pi].data_mut()[ei] = orig;

                if pat_p != pat_m {
                    report.skipped += 1;
                    continue;
                }

                let numeric = (loss_p - loss_m) / (2.0 * eps);
                let a = analytic[li][pi].data()[ei];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                param_max = param_max.max(rel);
                report.checked += 1;
            }
            report.per_param.push((li, pi, param_max));
            report.max_rel_err = report.max_rel_err.max(param_max);
        }
    }
    Ok(report)
}

/// Run backward for the analytic gradients, then compare them against
/// finite differences. Report per-parameter maxima.
pub fn grad_check(net: &mut Sequential, input: &Tensor, loss: LossFn, eps: f64) -> Result<GradCheckReport> {
    let trace = net.forward(input)?;
    let (_, gy) = loss(&trace.output);
    let (_, grads) = net.backward(&trace, &gy);
    grad_check_against(net, input, loss, &grads, eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::layers::{Conv2d, Fc, MaxPool2d};
    use crate::nnet::loss::softmax_ce_loss;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_net(rng: &mut ChaCha8Rng) -> Sequential {
        Sequential::new(vec![
            Layer::Conv2d(Conv2d::new(3, 4, 3, 1, 1, rng)),
            Layer::Relu,
            Layer::MaxPool2d(MaxPool2d::new(2, 2)),
            Layer::Fc(Fc::new(4 * 4 * 4, 3, rng)),
        ])
    }

    fn random_input(rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_vec(
            &[3, 8, 8],
            (0..3 * 8 * 8).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    #[test]
    fn fresh_random_net_passes_at_1e4() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut net = small_net(&mut rng);
        let input = random_input(&mut rng);
        let loss: LossFn = &|out| softmax_ce_loss(out, 1).unwrap();
        let report = grad_check(&mut net, &input, loss, 1e-5).unwrap();
        assert!(report.passes(1e-4), "max rel err {}", report.max_rel_err);
        // The kink guard should leave the bulk of the entries checked.
        assert!(report.skipped * 5 < report.checked);
    }

    #[test]
    fn corrupted_backward_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut net = small_net(&mut rng);
        let input = random_input(&mut rng);
        let loss: LossFn = &|out| softmax_ce_loss(out, 0).unwrap();

        let trace = net.forward(&input).unwrap();
        let (_, gy) = loss(&trace.output);
        let (_, mut grads) = net.backward(&trace, &gy);
        // Corrupt one conv weight gradient entry.
        grads[0][0].data_mut()[3] += 0.05;
        let report = grad_check_against(&mut net, &input, loss, &grads, 1e-5).unwrap();
        assert!(!report.passes(1e-4));
    }

    #[test]
    fn kink_exclusion_skips_flipping_relu_entries() {
        // fc -> relu -> fc with a pre-activation sitting on the kink: the
        // entry whose perturbation flips the sign must be skipped, and the
        // rest still passes.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut net = Sequential::new(vec![
            Layer::Fc(Fc::new(2, 2, &mut rng)),
            Layer::Relu,
            Layer::Fc(Fc::new(2, 2, &mut rng)),
        ]);
        // Force one pre-activation to ~0: weight row zeroed, bias tiny.
        if let Layer::Fc(fc) = &mut net.layers[0] {
            fc.weight.data_mut()[0] = 0.0;
            fc.weight.data_mut()[1] = 0.0;
            fc.bias.data_mut()[0] = 1e-7;
        }
        let input = Tensor::from_vec(&[2], vec![0.4, -0.7]);
        let loss: LossFn = &|out| softmax_ce_loss(out, 0).unwrap();
        let report = grad_check(&mut net, &input, loss, 1e-5).unwrap();
        assert!(report.skipped >= 1, "bias on the kink must be excluded");
        assert!(report.passes(1e-4), "max rel err {}", report.max_rel_err);
    }
}
