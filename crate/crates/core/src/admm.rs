//! ADMM pruning at desk scale.
//!
//! For every 3x3 conv layer `W` the loop keeps an auxiliary copy `Z` on the
//! constraint set (pattern + connectivity) and a scaled dual `U`:
//! train on loss + rho/2 |W - Z + U|^2, then `Z <- project(W + U)` and
//! `U <- U + W - Z`. Afterwards `W` is projected hard, masks are frozen and
//! the remaining weights are fine-tuned.

use alloc::vec;
use alloc::vec::Vec;

use crate::data::Split;
use crate::model::{ConvLayer, ConvWeights, Layer, ModelGraph, PatternAssignment, PrunedConvLayer, PRUNED};
use crate::prune::{prune_layer, PruneConfig};
use crate::scp::PatternSet;
use crate::tensor::DenseConvLayer;
use crate::train::{Constraints, Network, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RoundLog {
    pub train_loss: f64,
    /// `sum |W - Z|^2` over pruned layers after the round.
    pub primal_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmReport {
    pub rounds: Vec<RoundLog>,
    pub finetune_losses: Vec<f64>,
    pub validation_loss: f64,
    pub validation_accuracy: f64,
}

/// Weights of `layer` projected onto the constraint set, plus the layer.
fn project(layer: &DenseConvLayer, set: &PatternSet, config: &PruneConfig, index: usize) -> Result<PrunedConvLayer> {
    prune_layer(layer, set, config.keep_for(index), config.balanced)
}

/// 0/1 mask of the positions an assignment keeps.
fn mask_of(assignment: &PatternAssignment, set: &PatternSet) -> Vec<f32> {
    let mut m = vec![0.0f32; assignment.ids.len() * 9];
    for (k, &id) in assignment.ids.iter().enumerate() {
        if id != PRUNED {
            for p in set.masks()[id as usize].positions() {
                m[k * 9 + p] = 1.0;
            }
        }
    }
    m
}

fn with_weights(layer: &DenseConvLayer, w: &[f32]) -> Result<DenseConvLayer> {
    let (kh, kw) = layer.kernel_dims();
    DenseConvLayer::new(layer.filters(), layer.channels(), kh, kw, w.to_vec(), layer.bias().to_vec())
}

pub fn admm_prune(model: &ModelGraph, data: &Split, config: &PruneConfig) -> Result<(ModelGraph, AdmmReport)> {
    config.validate()?;
    let set = config.pattern_set()?;
    let a = &config.admm;
    let mut net = Network::from_model(model)?;
    let prunable: Vec<usize> =
        model.conv_layers().filter(|(_, c)| c.weights.kernel_dims() == (3, 3)).map(|(i, _)| i).collect();

    let mut z: Vec<Option<Vec<f32>>> = vec![None; net.layer_count()];
    let mut u: Vec<Option<Vec<f32>>> = vec![None; net.layer_count()];
    for &i in &prunable {
        let layer = net.conv_layer(i).expect("conv");
        z[i] = Some(project(&layer, &set, config, i)?.to_dense().weights().to_vec());
        u[i] = Some(vec![0.0; layer.weights().len()]);
    }

    let mut rounds = Vec::with_capacity(a.rounds);
    for r in 0..a.rounds {
        let targets = z
            .iter()
            .zip(&u)
            .map(|(z, u)| match (z, u) {
                (Some(z), Some(u)) => Some(z.iter().zip(u).map(|(z, u)| z - u).collect()),
                _ => None,
            })
            .collect();
        let constraints = Constraints { rho: a.rho, targets, masks: Vec::new() };
        let cfg = TrainConfig {
            epochs: a.epochs_per_round,
            batch_size: a.batch_size,
            learning_rate: a.learning_rate,
            momentum: a.momentum,
            seed: a.seed.wrapping_add(r as u64),
        };
        let losses = net.train(&data.train, &cfg, &constraints)?;
        let mut residual = 0.0f64;
        for &i in &prunable {
            let layer = net.conv_layer(i).expect("conv");
            let (zi, ui) = (z[i].as_mut().expect("z"), u[i].as_mut().expect("u"));
            let shifted: Vec<f32> = layer.weights().iter().zip(ui.iter()).map(|(w, u)| w + u).collect();
            *zi = project(&with_weights(&layer, &shifted)?, &set, config, i)?.to_dense().weights().to_vec();
            for ((uv, &wv), &zv) in ui.iter_mut().zip(layer.weights()).zip(zi.iter()) {
                *uv += wv - zv;
                let d = f64::from(wv - zv);
                residual += d * d;
            }
        }
        rounds.push(RoundLog { train_loss: losses.last().copied().unwrap_or(f64::NAN), primal_residual: residual });
    }

    // Hard projection, then fine-tuning with frozen masks.
    let mut assignments: Vec<Option<PatternAssignment>> = vec![None; net.layer_count()];
    let mut masks: Vec<Option<Vec<f32>>> = vec![None; net.layer_count()];
    for &i in &prunable {
        let projected = project(&net.conv_layer(i).expect("conv"), &set, config, i)?;
        net.set_conv_weights(i, projected.to_dense().weights());
        masks[i] = Some(mask_of(&projected.assignment(), &set));
        assignments[i] = Some(projected.assignment());
    }
    let finetune_losses = if a.finetune_epochs > 0 {
        let cfg = TrainConfig {
            epochs: a.finetune_epochs,
            batch_size: a.batch_size,
            learning_rate: a.learning_rate,
            momentum: a.momentum,
            seed: a.seed.wrapping_add(0x5eed),
        };
        net.train(&data.train, &cfg, &Constraints { rho: 0.0, targets: Vec::new(), masks })?
    } else {
        Vec::new()
    };

    let dense = net.to_model()?;
    let mut layers = Vec::with_capacity(dense.layers.len());
    for (i, layer) in dense.layers.into_iter().enumerate() {
        layers.push(match (layer, &assignments[i]) {
            (Layer::Conv(ConvLayer { spec, weights: ConvWeights::Dense(d) }), Some(asg)) => Layer::Conv(ConvLayer {
                spec,
                weights: ConvWeights::Pruned(PrunedConvLayer::from_dense(&d, &set, asg, config.balanced)?),
            }),
            (other, _) => other,
        });
    }
    let pruned = ModelGraph::new(model.input, layers)?;
    let eval = Network::from_model(&pruned)?.evaluate(&data.validation)?;
    if !eval.loss.is_finite() {
        return Err(Error::Diverged(alloc::format!(
            "validation loss is {} after {} rounds (last primal residual {:?})",
            eval.loss,
            a.rounds,
            rounds.last().map(|r: &RoundLog| r.primal_residual)
        )));
    }
    Ok((pruned, AdmmReport { rounds, finetune_losses, validation_loss: eval.loss, validation_accuracy: eval.accuracy }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_split;
    use crate::model::validate_model;
    use crate::prune::{magnitude_prune, AdmmConfig, KeepRatio};
    use crate::scp::canonical_scp_set;
    use crate::train::toy_cnn;

    #[test]
    fn degenerate_config_is_magnitude_pruning() {
        let split = synthetic_split(40, 20, 1);
        let model = toy_cnn(2);
        let config = PruneConfig {
            keep_ratio: KeepRatio::new(1, 2).unwrap(),
            admm: AdmmConfig { rho: 0.0, rounds: 0, finetune_epochs: 0, ..AdmmConfig::default() },
            ..PruneConfig::default()
        };
        let (admm, _) = admm_prune(&model, &split, &config).unwrap();
        assert_eq!(admm, magnitude_prune(&model, &config).unwrap());
    }

    #[test]
    fn final_weights_lie_on_constraint_set() {
        let split = synthetic_split(200, 50, 3);
        let config = PruneConfig {
            keep_ratio: KeepRatio::new(1, 2).unwrap(),
            admm: AdmmConfig { rounds: 2, epochs_per_round: 1, finetune_epochs: 1, ..AdmmConfig::default() },
            ..PruneConfig::default()
        };
        let (pruned, report) = admm_prune(&toy_cnn(4), &split, &config).unwrap();
        assert!(validate_model(&pruned).is_empty());
        assert_eq!(report.rounds.len(), 2);
        for (_, conv) in pruned.conv_layers() {
            let ConvWeights::Pruned(p) = &conv.weights else { panic!("conv left dense") };
            assert_eq!(p.patterns(), &canonical_scp_set());
            let per = p.retained_in_filter(0);
            assert!((0..p.filters()).all(|f| p.retained_in_filter(f) == per));
            // Re-projecting the dense form is the identity: distance zero.
            let again = project(&p.to_dense(), &canonical_scp_set(), &config, 0).unwrap();
            assert_eq!(again.to_dense().weights(), p.to_dense().weights());
        }
    }

    #[test]
    fn diverging_training_is_reported() {
        let split = synthetic_split(64, 20, 5);
        let config = PruneConfig {
            keep_ratio: KeepRatio::new(1, 2).unwrap(),
            admm: AdmmConfig { learning_rate: 1e30, rounds: 1, epochs_per_round: 1, ..AdmmConfig::default() },
            ..PruneConfig::default()
        };
        assert!(matches!(admm_prune(&toy_cnn(1), &split, &config), Err(Error::Diverged(_))));
    }
}
