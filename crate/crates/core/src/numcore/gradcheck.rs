use crate::error::{Error, Result};
use crate::numcore::net::{backward_from_trace, forward, forward_trace, ModelParams};

/// Central-finite-difference verification of the manual backward pass.
///
/// `loss` maps the network output to a scalar and the loss gradient at the
/// output. Returns the max over all parameters of
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
pub fn grad_check<F>(params: &ModelParams, x: &[f64], loss: F, eps: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    if !(eps > 1e-8 && eps < 1e-3) {
        return Err(Error::Config(format!(
            "grad_check eps must lie in (1e-8, 1e-3), got {eps}"
        )));
    }
    let trace = forward_trace(params, x)?;
    let (_, out_grad) = loss(trace.output());
    let (analytic, _) = backward_from_trace(params, &trace, &out_grad)?;

    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for li in 0..params.layers.len() {
        for wi in 0..params.layers[li].weight.len() + params.layers[li].bias.len() {
            let read = |p: &ModelParams| -> f64 {
                let l = &p.layers[li];
                if wi < l.weight.len() {
                    l.weight.as_slice()[wi]
                } else {
                    l.bias.as_slice()[wi - l.weight.len()]
                }
            };
            let write = |p: &mut ModelParams, v: f64| {
                let l = &mut p.layers[li];
                if wi < l.weight.len() {
                    l.weight.as_mut_slice()[wi] = v;
                } else {
                    l.bias.as_mut_slice()[wi - l.weight.len()] = v;
                }
            };
            let orig = read(&probe);
            write(&mut probe, orig + eps);
            let (up, _) = loss(&forward(&probe, x)?);
            write(&mut probe, orig - eps);
            let (down, _) = loss(&forward(&probe, x)?);
            write(&mut probe, orig);
            let numeric = (up - down) / (2.0 * eps);
            let exact = read(&analytic);
            let denom = 1.0f64.max(exact.abs()).max(numeric.abs());
            worst = worst.max((exact - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
