//! Fits the EK-FAC curvature of a small trained model and compares its
//! inverse-Hessian-vector products with an exact dense Gauss-Newton solve.

use ifprune::datagen::{generate_clean, ChainTask};
use ifprune::ekfac::{estimate_factors, fit_basis, Damping, ExactCurvature};
use ifprune::stats::{cosine, spearman};
use ifprune::tinymodel::{init_model, train, LayerFilter, ModelConfig, TrainConfig};

fn main() -> ifprune::Result<()> {
    let data = generate_clean(&ChainTask::default(), 300, 5)?;
    let model = ModelConfig { embed_dim: 4, hidden_dim: 16, ..ModelConfig::default() };
    let ckpt = train(&init_model(&model)?, &data, &TrainConfig { epochs: 6, snapshot_every: 6, ..TrainConfig::default() })?.last().clone();
    let filter = LayerFilter::mlp(&model);

    let factors = estimate_factors(&ckpt, &data, &filter)?;
    let basis = fit_basis(&factors, &ckpt, &data, Damping::default())?;
    println!("layers {:?}, {} parameters, damping {:.3e}", basis.filter, basis.param_count(), basis.damping);
    let exact = ExactCurvature::build(&ckpt, &data, &filter, basis.damping)?;

    let (mut approx, mut truth) = (Vec::new(), Vec::new());
    for q in &data[..10] {
        let g = ckpt.per_example_gradient(q, &filter)?;
        let (a, t) = (basis.ihvp(&g)?, exact.ihvp(&g)?);
        println!("query {:>3}: cosine(ekfac, exact) = {:.3}", q.id, cosine(&a, &t));
        approx.extend(a);
        truth.extend(t);
    }
    println!("Spearman over all ihvp entries: {:.3}", spearman(&approx, &truth));
    Ok(())
}
