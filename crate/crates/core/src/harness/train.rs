use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use crate::data::{self, encode_choices, Example, EncodedInstance};
use crate::error::{Error, Result};
use crate::fusion;
use crate::model::{Model, ModelConfig};
use crate::numerics::{checkpoint, linear_decay, Adam, Gradients, Graph, Var};
use crate::objectives;
use crate::vision::{self, Image};
use crate::vocab::Vocab;

/// Per-example Φ for every box, reusable while the backbone is frozen.
pub type FeatureCache = Vec<Vec<Vec<f64>>>;

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Mean loss of each optimizer step.
    pub losses: Vec<f64>,
}

/// SplitMix64 finalizer, for deriving independent seeds.
pub(crate) fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn stream(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ mix(purpose)));
    rng.set_stream(index);
    rng
}

pub fn backbone_frozen(model: &Model) -> bool {
    !model
        .params
        .iter()
        .any(|(name, p)| name.starts_with("vision.") && p.trainable)
}

/// Φ of `[whole image] + objects` for each example, or `None` when the
/// backbone trains.
pub fn feature_cache(model: &Model, examples: &[Example]) -> Result<Option<FeatureCache>> {
    if !backbone_frozen(model) {
        return Ok(None);
    }
    let size = Some(model.config.vision.input_size);
    let cache = examples
        .iter()
        .map(|ex| {
            std::iter::once(ex.image.full_box())
                .chain(ex.record.objects.iter().map(|o| o.bbox()))
                .map(|b| {
                    let crop = vision::crop(&ex.image, &b, size)?;
                    vision::phi_value(&model.params, &model.config.vision, &crop)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(Some(cache))
}

/// Fresh model for `cfg`, warm-started from its init checkpoint if any.
pub fn build_model(cfg: &TrainConfig, vocab: &Vocab) -> Result<Model> {
    let mut model = Model::init(cfg.model_config(vocab)?, cfg.seed)?;
    if let Some(path) = &cfg.init_checkpoint {
        let init = checkpoint::load(path)?;
        if model.warm_start(&init).is_empty() {
            return Err(Error::Checkpoint(format!(
                "{} shares no parameters with the model",
                path.display()
            )));
        }
    }
    Ok(model)
}

/// Minibatch Adam over `n_items` work items. `item_loss` builds the loss
/// of one item on a fresh graph; a batch averages the item losses.
/// Items are processed in a fixed order, so runs are bit-reproducible.
#[allow(clippy::too_many_arguments)]
fn optimize<F>(
    model: &mut Model,
    n_items: usize,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    decay: bool,
    seed: u64,
    mut item_loss: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&mut Graph, usize, usize) -> Result<Var>,
{
    if n_items == 0 {
        return Err(Error::Data("training set is empty".into()));
    }
    let steps_per_epoch = n_items.div_ceil(batch_size);
    let total = steps_per_epoch * epochs;
    let dropout = model.config.encoder.dropout_rate;
    let mut adam = Adam::default();
    let mut losses = Vec::with_capacity(total);
    let mut step = 0usize;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n_items).collect();
        order.shuffle(&mut stream(seed, 1, epoch as u64));
        for batch in order.chunks(batch_size) {
            let mut grads = Gradients::default();
            let mut loss_sum = 0.0;
            for &item in batch {
                let mut g = Graph::training(
                    &model.params,
                    dropout,
                    mix(seed ^ mix(((step as u64) << 32) | item as u64)),
                );
                let loss = match item_loss(&mut g, item, epoch) {
                    Ok(l) => l,
                    // Overflowed parameters surface as contract errors downstream.
                    Err(_) if g.tape.check_finite().is_err() => {
                        return Err(Error::Diverged { step, loss: f64::NAN })
                    }
                    Err(e) => return Err(e),
                };
                let value = g.tape.data(loss)[0];
                if !value.is_finite() {
                    return Err(Error::Diverged { step, loss: value });
                }
                loss_sum += value;
                grads.add_scaled(&g.backward(loss)?, 1.0 / batch.len() as f64)?;
            }
            let mean = loss_sum / batch.len() as f64;
            if !grads.is_finite() {
                return Err(Error::Diverged { step, loss: mean });
            }
            let lr = if decay {
                linear_decay(learning_rate, step, total)
            } else {
                learning_rate
            };
            adam.step(&mut model.params, &grads, lr)?;
            losses.push(mean);
            step += 1;
        }
    }
    Ok(TrainOutcome { losses })
}

/// Encoded candidates grouped per (question, task).
struct Group {
    example: usize,
    instances: Vec<EncodedInstance>,
}

fn groups(cfg: &TrainConfig, model: &Model, examples: &[Example], vocab: &Vocab) -> Result<Vec<Group>> {
    let opts = cfg.encode_options(&model.config);
    let mut out = Vec::with_capacity(examples.len() * cfg.tasks.len());
    for (i, ex) in examples.iter().enumerate() {
        for &task in &cfg.tasks {
            out.push(Group {
                example: i,
                instances: encode_choices(&ex.record, ex.dims(), task, vocab, &opts)?,
            });
        }
    }
    Ok(out)
}

/// Sum of the BCE losses of one question's four candidates.
pub fn group_loss(
    g: &mut Graph,
    cfg: &ModelConfig,
    instances: &[EncodedInstance],
    image: &Image,
    features: Option<&[Vec<f64>]>,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for inst in instances {
        let margin = fusion::margin(g, cfg, &inst.input(image, features))?;
        let loss = objectives::bce_from_margin(g, margin, inst.label)?;
        total = Some(match total {
            None => loss,
            Some(t) => g.tape.add(t, loss)?,
        });
    }
    total.ok_or_else(|| Error::Data("empty candidate group".into()))
}

/// Finetunes `model` on multiple-choice examples.
pub fn train(
    cfg: &TrainConfig,
    model: &mut Model,
    examples: &[Example],
    vocab: &Vocab,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let groups = groups(cfg, model, examples, vocab)?;
    let cache = feature_cache(model, examples)?;
    let model_cfg = model.config.clone();
    let config_seed = cfg.seed;
    optimize(
        model,
        groups.len(),
        cfg.epochs,
        cfg.batch_size,
        cfg.learning_rate,
        cfg.linear_decay,
        config_seed,
        |g, item, _| {
            let grp = &groups[item];
            let feats = cache.as_ref().map(|c| c[grp.example].as_slice());
            group_loss(g, &model_cfg, &grp.instances, &examples[grp.example].image, feats)
        },
    )
}

/// Caption pretraining: each epoch pairs every image with its masked true
/// caption and a freshly sampled impostor.
pub fn pretrain(
    cfg: &TrainConfig,
    model: &mut Model,
    captions: &[(Arc<Image>, String)],
    vocab: &Vocab,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let texts: Vec<String> = captions.iter().map(|(_, c)| c.clone()).collect();
    let cache: Option<Vec<Vec<f64>>> = if backbone_frozen(model) {
        Some(
            captions
                .iter()
                .map(|(img, _)| {
                    let resized = vision::resize_bilinear(
                        img,
                        model.config.vision.input_size,
                        model.config.vision.input_size,
                    );
                    vision::phi_value(&model.params, &model.config.vision, &resized)
                })
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };
    let model_cfg = model.config.clone();
    let max_positions = model_cfg.encoder.max_positions;
    let p = &cfg.pretrain;
    let seed = cfg.seed;
    let mask_rate = p.mask_rate;
    optimize(
        model,
        2 * captions.len(),
        p.epochs,
        p.batch_size,
        p.learning_rate,
        cfg.linear_decay,
        mix(seed ^ 0x5eed),
        |g, item, epoch| {
            let idx = item / 2;
            let (img, _) = &captions[idx];
            let mut rng = stream(seed, 2 + epoch as u64, idx as u64);
            let pair = data::pretrain_items(
                &texts,
                idx,
                (img.width(), img.height()),
                vocab,
                max_positions,
                mask_rate,
                &mut rng,
            )?;
            let chosen = &pair[item % 2];
            // The impostor text is scored against this image; cached Φ is per image.
            let feats = cache.as_ref().map(|c| vec![c[idx].clone()]);
            objectives::pretrain_loss(g, &model_cfg, chosen, img, feats.as_deref())
        },
    )
}
