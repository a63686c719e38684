//! Cross-checks the two backpropagation modes against each other and against
//! central finite differences on a small model.

use irim::autodiff::{
    backprop_invertible, backprop_stored, finite_difference_grad, DEFAULT_DRIFT_BOUND,
};
use irim::forward_model::{make_mask, simulate_measurement, FourierOperator};
use irim::model::IrimModel;
use irim::phantom::{generate_phantom, PhantomConfig};
use irim::rng::SeededRng;
use irim::train::{LossConfig, StepWeights};

fn main() -> Result<(), irim::IrimError> {
    let mut model_cfg = irim::model::ModelConfig::desk(7);
    model_cfg.channels = 8;
    model_cfg.split = 4;
    model_cfg.time_steps = 2;
    model_cfg.layers_per_step = 4;
    model_cfg.downsample_schedule = vec![1, 2, 2, 1];
    model_cfg.hidden = 4;
    let model = IrimModel::init(&model_cfg)?;

    let phantom_cfg = PhantomConfig {
        height: 16,
        width: 16,
        ..PhantomConfig::default()
    };
    let truth = generate_phantom(&phantom_cfg, 0)?;
    let mask = make_mask(16, 16, 2.0, 0.2, 3)?;
    let op = FourierOperator::new(mask.clone());
    let d = simulate_measurement(&truth, &mask, 0.0, 4)?;
    let loss_cfg = LossConfig {
        keep_fraction: 1.0,
        weights: StepWeights::LastOnly,
        seed: 5,
    };

    let stored = backprop_stored(&model, &d, &op, &truth, &loss_cfg)?;
    let inv = backprop_invertible(&model, &d, &op, &truth, &loss_cfg, DEFAULT_DRIFT_BOUND)?;
    let gs = stored.grads.flatten();
    let gi = inv.grads.flatten();
    let scale = gs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let max_rel = gs
        .iter()
        .zip(&gi)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        / scale;
    println!("stored vs invertible: max relative deviation {max_rel:.3e}");
    println!(
        "peak retained elements: stored {}, invertible {}",
        stored.memory.peak_elements, inv.memory.peak_elements
    );

    let mut pick = SeededRng::new(9);
    let coords: Vec<usize> = (0..10).map(|_| pick.below(gs.len())).collect();
    let fd = finite_difference_grad(&model, &d, &op, &truth, &loss_cfg, &coords, 1e-6)?;
    println!("{:>10} {:>15} {:>15} {:>10}", "coord", "analytic", "central diff", "rel err");
    for (k, &i) in coords.iter().enumerate() {
        let rel = (gs[i] - fd[k]).abs() / (1.0 + fd[k].abs());
        println!("{i:>10} {:>15.6e} {:>15.6e} {rel:>10.2e}", gs[i], fd[k]);
    }
    Ok(())
}
