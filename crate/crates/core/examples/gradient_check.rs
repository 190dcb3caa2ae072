//! Finite-difference check of the full training objective in double precision.
//!
//! cargo run --release --example gradient_check

use dmsr::autograd::{Eval, Tape};
use dmsr::degradation::{degrade, DegradationSpec};
use dmsr::losses::{objective, LossWeights, SampleTensors};
use dmsr::model::{default_projection, Dmsr, ModelConfig};
use dmsr::params::ParameterSet;
use dmsr::tensor::Tensor;
use dmsr::training::synthetic_image;

fn main() -> dmsr::error::Result<()> {
    let cfg = ModelConfig::tiny(2);
    let model = Dmsr::new(cfg.clone(), &default_projection(&cfg, 0)?, 1)?;
    let params: ParameterSet<f64> = model.params.cast();
    let hr = synthetic_image(32, 32, 2);
    let s = degrade(&hr, &DegradationSpec::new(1.3, 15.0, 2, 2).with_kernel_size(5))?;
    let sample = SampleTensors::<f64> {
        lr: s.lr.to_chw(),
        lr_target: s.lr_preclamp.to_chw(),
        hr: hr.to_chw(),
        kernel_gt: Tensor::from_vec(&[25], s.kernel_gt.weights().to_vec()),
        noise_gt: s.noise_map_gt.to_chw(),
    };
    let w = LossWeights::default();
    let mut tape = Tape::new(&params);
    let obj = objective(&mut tape, &cfg, &w, &sample);
    println!("{:?}", obj.breakdown(&tape));
    let grads = tape.param_grads(&tape.backward(obj.total));

    let h = 1e-6;
    let mut p = params.clone();
    println!("{:<36} {:>14} {:>14} {:>10}", "entry", "analytic", "central diff", "rel err");
    for (name, g) in &grads {
        let i = g.len() / 2;
        let mut at = |delta: f64| {
            p.get_mut(name).unwrap().data_mut()[i] += delta;
            let mut e = Eval::new(&p);
            let o = objective(&mut e, &cfg, &w, &sample);
            let v = o.breakdown(&e).total;
            p.get_mut(name).unwrap().data_mut()[i] -= delta;
            v
        };
        let fd = (at(h) - at(-h)) / (2.0 * h);
        let an = g.data()[i];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-300);
        println!("{:<36} {an:>14.6e} {fd:>14.6e} {rel:>10.2e}", format!("{name}[{i}]"));
    }
    Ok(())
}
