//! End-to-end run at a reduced scale: synthesize phantoms, train for a few
//! hundred iterations with constant-memory backpropagation, and compare the
//! reconstruction against the zero-filled baseline.

use irim::commands::{evaluate_model, mean_nmse};
use irim::config::RunConfig;
use irim::model::IrimModel;
use irim::phantom::generate_phantom;
use irim::train::train;

fn main() -> Result<(), irim::IrimError> {
    let mut cfg = RunConfig::desk(0);
    // shrink the run so the example finishes in under a minute
    cfg.model.channels = 8;
    cfg.model.split = 4;
    cfg.model.time_steps = 2;
    cfg.model.layers_per_step = 4;
    cfg.model.downsample_schedule = vec![1, 2, 2, 1];
    cfg.model.hidden = 6;
    cfg.phantom.height = 16;
    cfg.phantom.width = 16;
    cfg.train.iterations = 300;
    cfg.train.batch_size = 2;
    cfg.train.acceleration = 2.0;
    cfg.train.center_fraction = 0.2;
    cfg.eval_accelerations = vec![2.0, 4.0];
    cfg.validate()?;

    let dataset: Vec<_> = (0..8)
        .map(|i| generate_phantom(&cfg.phantom, i))
        .collect::<Result<_, _>>()?;
    let eval_set: Vec<_> = (100..104)
        .map(|i| generate_phantom(&cfg.phantom, i))
        .collect::<Result<_, _>>()?;

    let mut model = IrimModel::init(&cfg.model)?;
    println!("training {} iterations...", cfg.train.iterations);
    let log = train(&mut model, &dataset, &cfg.train, None)?;
    println!(
        "loss: {:.4e} (first) -> {:.4e} (last)",
        log.first().unwrap().loss,
        log.last().unwrap().loss
    );

    let rows = evaluate_model(&model, &cfg, &eval_set)?;
    for &accel in &cfg.eval_accelerations {
        println!(
            "{accel}x acceleration: reconstructed NMSE {:.4e} vs zero-filled {:.4e}",
            mean_nmse(&rows, "irim", accel),
            mean_nmse(&rows, "zero_filled", accel)
        );
    }
    Ok(())
}
