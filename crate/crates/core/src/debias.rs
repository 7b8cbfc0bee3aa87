//! The three debiasing methods, each respecting a freeze setting.
//!
//! * Counterfactual fine-tuning: train on the anti-stereotypical samples
//!   plus the stereotypical samples with their captions gender-swapped
//!   (original images kept), so every sample contributes exactly one
//!   training pair.
//! * Weighted task vector: subtract `(1 - blend) * alpha` times the delta
//!   between a fine-tuned and a base checkpoint from the base weights,
//!   masked per modality, with a random search over `(alpha, blend)` guided
//!   by `-ra_avg + lambda_gap * gg`.
//! * Selective fine-tuning by stereotypicality: score every sample by the
//!   cosine of its image embedding against the mean anti-stereotypical
//!   embedding (the concept vector), keep the top-K most stereotypical,
//!   counterfactual-swap the stereotypical ones, and fine-tune on that
//!   subset only.
//!
//! Scoring polarity: the concept vector is built from anti-stereotypical
//! samples, so a LOW cosine means most stereotypical; the default selection
//! is ascending. The descending polarity is exposed for experiments and
//! selects the exact complement ordering.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::dataset_fmt::Scanner;
use crate::error::{Error, Result};
use crate::eval::{compute_metrics, resolve_probe, Probe};
use crate::forge::{annotate_stereotype, cda_swap, Gender, Sample};
use crate::models::{freeze_mask, FreezeSetting, Model, TrainItem, BATCH_SIZE};
use crate::nn::{cosine_f64, sgd_step, NORM_EPS};
use crate::rng::Rng;
use crate::tensor::{FreezeMask, ParamSet, Tensor};

/// Element-wise difference between a fine-tuned and a base checkpoint.
/// Names, shapes and tags mirror the base exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub deltas: ParamSet,
}

/// Edit-strength hyperparameters. The applied coefficient is
/// `(1 - blend) * alpha`; alpha 0 or blend 1 leave the base untouched.
/// Random search samples alpha in [0.1, 1.0] and blend in [0.0, 1.0].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskVectorParams {
    pub alpha: f64,
    pub blend: f64,
}

impl TaskVectorParams {
    pub fn new(alpha: f64, blend: f64) -> Result<TaskVectorParams> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Precondition(format!("alpha {alpha} outside [0, 1]")));
        }
        if !(0.0..=1.0).contains(&blend) {
            return Err(Error::Precondition(format!("blend {blend} outside [0, 1]")));
        }
        Ok(TaskVectorParams { alpha, blend })
    }

    pub fn coefficient(&self) -> f64 {
        (1.0 - self.blend) * self.alpha
    }
}

/// Mean anti-stereotypical image embedding with provenance count.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptVector {
    pub values: Vec<f64>,
    pub n_sources: usize,
}

/// Random-search configuration for the task-vector hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchConfig {
    pub trials: u32,
    pub lambda_gap: f64,
    pub seed: u64,
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Precondition("search needs at least 1 trial".to_string()));
        }
        if self.lambda_gap < 0.0 {
            return Err(Error::Precondition("lambda_gap must be >= 0".to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchTrial {
    pub trial: u32,
    pub alpha: f64,
    pub blend: f64,
    pub ra_avg: f64,
    pub gg: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub best: TaskVectorParams,
    pub best_loss: f64,
    pub trace: Vec<SearchTrial>,
}

/// Selection order for stereotypicality scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DosPolarity {
    /// Lowest similarity to the anti-stereotypical concept first (default).
    Ascending,
    /// Highest similarity first; selects the exact complement ordering.
    Descending,
}

impl DosPolarity {
    pub fn as_str(self) -> &'static str {
        match self {
            DosPolarity::Ascending => "ascending",
            DosPolarity::Descending => "descending",
        }
    }

    pub fn parse(s: &str) -> Result<DosPolarity> {
        match s {
            "ascending" => Ok(DosPolarity::Ascending),
            "descending" => Ok(DosPolarity::Descending),
            other => Err(Error::Parse(format!("unknown polarity `{other}`"))),
        }
    }
}

/// The scalar the search minimizes: `-ra_avg + lambda_gap * gg`.
pub fn search_loss(ra_avg: f64, gg: f64, lambda_gap: f64) -> f64 {
    -ra_avg + lambda_gap * gg
}

/// Fine-tune a model on the given samples under a freeze setting. `Raw`
/// returns the model bitwise unchanged. Deterministic in the seed: epoch
/// shuffles, batching and accumulation order are all fixed.
pub fn finetune(
    model: &Model,
    samples: &[Sample],
    setting: FreezeSetting,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<Model> {
    Ok(finetune_traced(model, samples, setting, epochs, lr, seed)?.0)
}

/// Like [`finetune`] but also returns the mean training loss per epoch.
pub fn finetune_traced(
    model: &Model,
    samples: &[Sample],
    setting: FreezeSetting,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<(Model, Vec<f64>)> {
    if setting == FreezeSetting::Raw {
        return Ok((model.clone(), Vec::new()));
    }
    if samples.is_empty() {
        return Err(Error::EmptyData(
            "fine-tuning under a trainable setting needs samples".to_string(),
        ));
    }
    if epochs == 0 {
        return Err(Error::Precondition("epochs must be >= 1".to_string()));
    }
    let mask = freeze_mask(setting);
    let min_batch = match model {
        Model::Dual(_) => 2,
        Model::Captioner(_) => 1,
    };
    let items: Vec<TrainItem> = samples.iter().map(TrainItem::from_sample).collect();
    let mut rng = Rng::seeded(seed);
    let mut current = model.clone();
    let mut epoch_losses = Vec::with_capacity(epochs);

    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(BATCH_SIZE) {
            if chunk.len() < min_batch {
                continue;
            }
            let batch: Vec<TrainItem> = chunk.iter().map(|&i| items[i].clone()).collect();
            let (loss, grads) = current.batch_loss(&batch, &mask, true)?;
            let stepped = sgd_step(current.params(), &grads, lr, &mask)?;
            current = current.with_params(stepped)?;
            loss_sum += loss;
            batches += 1;
        }
        if batches == 0 {
            return Err(Error::DegenerateBatch(format!(
                "no batch of size >= {min_batch} could be formed from {} samples",
                items.len()
            )));
        }
        epoch_losses.push(loss_sum / batches as f64);
    }
    Ok((current, epoch_losses))
}

/// Fraction of samples whose gender the model resolves from their own
/// image/caption pair: the dual encoder compares the matching score of the
/// caption against its gender-swapped variant, the caption scorer compares
/// its pronoun logits. Ties resolve to male, mirroring probe resolution.
pub fn gender_resolution_on_samples(model: &Model, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyData("no samples to resolve".to_string()));
    }
    let mut correct = 0usize;
    for s in samples {
        let predicted = match model {
            Model::Dual(m) => {
                let own = crate::models::similarity_score(
                    m,
                    &s.image_features,
                    &s.caption.word_ids(),
                )?;
                let swapped = crate::models::similarity_score(
                    m,
                    &s.image_features,
                    &cda_swap(&s.caption)?.word_ids(),
                )?;
                let own_wins = if s.gender == Gender::Male {
                    own >= swapped
                } else {
                    own > swapped
                };
                if own_wins {
                    s.gender
                } else {
                    s.gender.opposite()
                }
            }
            Model::Captioner(m) => {
                let (lm, lf) = crate::models::gender_logits(m, &s.image_features)?;
                if lm >= lf {
                    Gender::Male
                } else {
                    Gender::Female
                }
            }
        };
        if predicted == s.gender {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Fine-tune epoch by epoch until the model resolves at least `target_ra`
/// of the training samples' genders (or `max_epochs` is exhausted). The
/// stopping rule is a pure function of the data, so the result is exactly
/// as deterministic as a fixed epoch count. Returns the model and the
/// number of epochs actually run.
#[allow(clippy::too_many_arguments)]
pub fn finetune_until_resolved(
    model: &Model,
    samples: &[Sample],
    setting: FreezeSetting,
    lr: f64,
    seed: u64,
    target_ra: f64,
    max_epochs: usize,
) -> Result<(Model, usize)> {
    if setting == FreezeSetting::Raw {
        return Ok((model.clone(), 0));
    }
    if max_epochs == 0 {
        return Err(Error::Precondition("max_epochs must be >= 1".to_string()));
    }
    let mut current = model.clone();
    for epoch in 0..max_epochs {
        current = finetune(&current, samples, setting, 1, lr, crate::rng::mix(seed, epoch as u64))?;
        if gender_resolution_on_samples(&current, samples)? >= target_ra {
            return Ok((current, epoch + 1));
        }
    }
    Ok((current, max_epochs))
}

/// Replace a stereotypical sample by its counterfactual: caption swapped,
/// gender flipped, stereotype label re-derived; image untouched.
pub fn counterfactual(sample: &Sample) -> Result<Sample> {
    let caption = cda_swap(&sample.caption)?;
    let gender = sample.gender.opposite();
    if gender == Gender::Unknown {
        return Err(Error::Label("cannot counterfactual an unknown gender".to_string()));
    }
    let stereotypical = annotate_stereotype(&sample.attributes, gender)?;
    Ok(Sample {
        caption,
        gender,
        stereotypical,
        ..sample.clone()
    })
}

/// The counterfactual training set: anti-stereotypical samples pass through,
/// stereotypical ones are swapped. Size is always preserved.
pub fn cda_training_set(dataset: &[Sample]) -> Result<Vec<Sample>> {
    if dataset.is_empty() {
        return Err(Error::EmptyData("empty dataset".to_string()));
    }
    dataset
        .iter()
        .map(|s| {
            if s.stereotypical {
                counterfactual(s)
            } else {
                Ok(s.clone())
            }
        })
        .collect()
}

/// Counterfactual fine-tuning under a freeze setting.
pub fn run_cda(
    model: &Model,
    dataset: &[Sample],
    setting: FreezeSetting,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<Model> {
    let training = cda_training_set(dataset)?;
    finetune(model, &training, setting, epochs, lr, seed)
}

/// Delta = fine-tuned minus base, element-wise, names and shapes checked.
pub fn compute_task_vector(base: &ParamSet, finetuned: &ParamSet) -> Result<TaskVector> {
    if base.len() != finetuned.len() {
        return Err(Error::Consistency(format!(
            "checkpoints hold {} vs {} tensors",
            base.len(),
            finetuned.len()
        )));
    }
    let mut deltas = ParamSet::new();
    for (name, p) in base.iter() {
        let ft = finetuned
            .get(name)
            .ok_or_else(|| Error::Consistency(format!("tensor `{name}` missing from fine-tuned checkpoint")))?;
        if ft.shape() != p.tensor.shape() {
            return Err(Error::Shape {
                name: name.to_string(),
                expected: format!("{:?}", p.tensor.shape()),
                got: format!("{:?}", ft.shape()),
            });
        }
        let data: Vec<f32> = ft
            .data()
            .iter()
            .zip(p.tensor.data().iter())
            .map(|(&a, &b)| ((a as f64) - (b as f64)) as f32)
            .collect();
        deltas.insert(name, p.tag, Tensor::new(p.tensor.shape().to_vec(), data)?);
    }
    Ok(TaskVector { deltas })
}

/// Weighted task-vector edit: unmasked entries become
/// `w - (1 - blend) * alpha * delta`; masked entries are copied verbatim.
/// A zero coefficient reproduces the base bitwise for any delta and mask.
pub fn apply_task_vector(
    base: &ParamSet,
    tv: &TaskVector,
    params: &TaskVectorParams,
    mask: &FreezeMask,
) -> Result<ParamSet> {
    TaskVectorParams::new(params.alpha, params.blend)?;
    if tv.deltas.len() != base.len() {
        return Err(Error::Consistency(format!(
            "task vector holds {} tensors, base {}",
            tv.deltas.len(),
            base.len()
        )));
    }
    let coeff = params.coefficient();
    let mut out = ParamSet::new();
    for (name, p) in base.iter() {
        let delta = tv
            .deltas
            .get(name)
            .ok_or_else(|| Error::Consistency(format!("task vector misses tensor `{name}`")))?;
        if delta.shape() != p.tensor.shape() {
            return Err(Error::Shape {
                name: name.to_string(),
                expected: format!("{:?}", p.tensor.shape()),
                got: format!("{:?}", delta.shape()),
            });
        }
        let edited = if coeff == 0.0 || mask.freezes(p.tag) {
            p.tensor.clone()
        } else {
            let data: Vec<f32> = p
                .tensor
                .data()
                .iter()
                .zip(delta.data().iter())
                .map(|(&w, &d)| ((w as f64) - coeff * (d as f64)) as f32)
                .collect();
            Tensor::new(p.tensor.shape().to_vec(), data)?
        };
        out.insert(name, p.tag, edited);
    }
    Ok(out)
}

/// Uniform random search over `(alpha, blend)`: every trial edits the base,
/// scores the probes pooled across kinds, and the argmin wins. Deterministic
/// in the seed; the trace holds every trial in order.
pub fn search_hyperparams(
    base: &Model,
    tv: &TaskVector,
    probes: &[Probe],
    cfg: &SearchConfig,
    mask: &FreezeMask,
) -> Result<SearchOutcome> {
    cfg.validate()?;
    if probes.is_empty() {
        return Err(Error::Evaluation("empty probe set".to_string()));
    }
    let mut rng = Rng::seeded(cfg.seed);
    let mut trace = Vec::with_capacity(cfg.trials as usize);
    let mut best: Option<(TaskVectorParams, f64)> = None;
    for trial in 0..cfg.trials {
        let params = TaskVectorParams {
            alpha: rng.range_f64(0.1, 1.0),
            blend: rng.range_f64(0.0, 1.0),
        };
        let edited = apply_task_vector(base.params(), tv, &params, mask)?;
        let candidate = base.with_params(edited)?;
        let preds: Vec<Gender> = probes
            .iter()
            .map(|p| resolve_probe(&candidate, p))
            .collect::<Result<_>>()?;
        let cell = compute_metrics(&preds, probes)?;
        let loss = search_loss(cell.ra_avg, cell.gg, cfg.lambda_gap);
        trace.push(SearchTrial {
            trial,
            alpha: params.alpha,
            blend: params.blend,
            ra_avg: cell.ra_avg,
            gg: cell.gg,
            loss,
        });
        match &best {
            Some((_, bl)) if loss >= *bl => {}
            _ => best = Some((params, loss)),
        }
    }
    let (best, best_loss) = best.expect("at least one trial ran");
    Ok(SearchOutcome {
        best,
        best_loss,
        trace,
    })
}

/// Which embedding the concept vector and scores are computed from. The
/// vision embedding follows the illustrated construction; the text variant
/// scores captions instead (selection then keys on caption typicality, which
/// is symmetric across pronoun genders); fused averages the two. The caption
/// scorer has no sentence embedding, so text and fused fall back to vision
/// there.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum CavSource {
    #[default]
    Vision,
    Text,
    Fused,
}

impl CavSource {
    pub fn as_str(self) -> &'static str {
        match self {
            CavSource::Vision => "vision",
            CavSource::Text => "text",
            CavSource::Fused => "fused",
        }
    }

    pub fn parse(s: &str) -> Result<CavSource> {
        match s {
            "vision" => Ok(CavSource::Vision),
            "text" => Ok(CavSource::Text),
            "fused" => Ok(CavSource::Fused),
            other => Err(Error::Parse(format!("unknown concept source `{other}`"))),
        }
    }
}

fn concept_embedding(model: &Model, sample: &Sample, source: CavSource) -> Result<Vec<f64>> {
    match (source, model) {
        (CavSource::Vision, _) | (_, Model::Captioner(_)) => {
            Ok(model.encode_image(&sample.image_features)?.to_f64())
        }
        (CavSource::Text, Model::Dual(_)) => Ok(crate::models::encode_text(
            model.params(),
            &sample.caption.word_ids(),
        )?
        .to_f64()),
        (CavSource::Fused, Model::Dual(_)) => {
            let z = model.encode_image(&sample.image_features)?.to_f64();
            let t = crate::models::encode_text(model.params(), &sample.caption.word_ids())?
                .to_f64();
            Ok(z.iter().zip(t.iter()).map(|(a, b)| (a + b) / 2.0).collect())
        }
    }
}

/// Mean anti-stereotypical embedding, accumulated in f64 in ascending-id
/// order, from the vision embedding (default).
pub fn compute_cav(model: &Model, anti_samples: &[Sample]) -> Result<ConceptVector> {
    compute_cav_with(model, anti_samples, CavSource::Vision)
}

pub fn compute_cav_with(
    model: &Model,
    anti_samples: &[Sample],
    source: CavSource,
) -> Result<ConceptVector> {
    if anti_samples.is_empty() {
        return Err(Error::Precondition(
            "concept vector needs at least one sample".to_string(),
        ));
    }
    if let Some(bad) = anti_samples.iter().find(|s| s.stereotypical) {
        return Err(Error::Label(format!(
            "sample {} is stereotypical and cannot source the concept vector",
            bad.id
        )));
    }
    let mut order: Vec<usize> = (0..anti_samples.len()).collect();
    order.sort_by_key(|&i| anti_samples[i].id);
    let mut acc: Option<Vec<f64>> = None;
    for i in order {
        let z = concept_embedding(model, &anti_samples[i], source)?;
        match &mut acc {
            None => acc = Some(z),
            Some(a) => {
                for (ai, zi) in a.iter_mut().zip(z.iter()) {
                    *ai += zi;
                }
            }
        }
    }
    let mut values = acc.expect("non-empty input");
    let inv = 1.0 / anti_samples.len() as f64;
    for v in values.iter_mut() {
        *v *= inv;
    }
    Ok(ConceptVector {
        values,
        n_sources: anti_samples.len(),
    })
}

/// Cosine of a sample's image embedding against the concept vector.
/// Low values mean most stereotypical (see module docs on polarity).
pub fn dos_score(model: &Model, sample: &Sample, cav: &ConceptVector) -> Result<f64> {
    dos_score_with(model, sample, cav, CavSource::Vision)
}

pub fn dos_score_with(
    model: &Model,
    sample: &Sample,
    cav: &ConceptVector,
    source: CavSource,
) -> Result<f64> {
    let norm = crate::nn::l2_norm(&cav.values);
    if norm < NORM_EPS {
        return Err(Error::DegenerateEmbedding(
            "concept vector has zero norm".to_string(),
        ));
    }
    let z = concept_embedding(model, sample, source)?;
    cosine_f64(&z, &cav.values)
}

/// Keep K samples by score order. Ascending polarity sorts by
/// (score, id) ascending and takes the first K; descending takes the tail of
/// the same total order in reverse, so the two selections of K and N-K are
/// exact complements.
pub fn daudos_select(
    dataset: &[Sample],
    scores: &[f64],
    k: usize,
    polarity: DosPolarity,
) -> Result<Vec<Sample>> {
    if scores.len() != dataset.len() {
        return Err(Error::Consistency(format!(
            "{} scores for {} samples",
            scores.len(),
            dataset.len()
        )));
    }
    if k == 0 || k > dataset.len() {
        return Err(Error::Precondition(format!(
            "K = {k} outside 1..={}",
            dataset.len()
        )));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("non-finite score {bad}")));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .expect("scores are finite")
            .then(dataset[a].id.cmp(&dataset[b].id))
    });
    let picked: Vec<usize> = match polarity {
        DosPolarity::Ascending => order[..k].to_vec(),
        DosPolarity::Descending => order[dataset.len() - k..].iter().rev().copied().collect(),
    };
    Ok(picked.into_iter().map(|i| dataset[i].clone()).collect())
}

/// Score, select and counterfactual-augment: the training set handed to the
/// selective fine-tune. Exposed so its size and composition are observable.
pub fn daudos_training_set(
    model: &Model,
    dataset: &[Sample],
    k: usize,
    polarity: DosPolarity,
) -> Result<Vec<Sample>> {
    daudos_training_set_with(model, dataset, k, polarity, CavSource::Vision)
}

pub fn daudos_training_set_with(
    model: &Model,
    dataset: &[Sample],
    k: usize,
    polarity: DosPolarity,
    source: CavSource,
) -> Result<Vec<Sample>> {
    let anti: Vec<Sample> = dataset.iter().filter(|s| !s.stereotypical).cloned().collect();
    if anti.is_empty() {
        return Err(Error::EmptyData(
            "no anti-stereotypical samples to build the concept vector".to_string(),
        ));
    }
    let cav = compute_cav_with(model, &anti, source)?;
    let scores: Vec<f64> = dataset
        .iter()
        .map(|s| dos_score_with(model, s, &cav, source))
        .collect::<Result<_>>()?;
    let selected = daudos_select(dataset, &scores, k, polarity)?;
    selected
        .iter()
        .map(|s| {
            if s.stereotypical {
                counterfactual(s)
            } else {
                Ok(s.clone())
            }
        })
        .collect()
}

/// Data-efficient debiasing: fine-tune on the K most stereotypical samples
/// (counterfactual-swapped where stereotypical) under the given setting.
#[allow(clippy::too_many_arguments)]
pub fn run_daudos(
    model: &Model,
    dataset: &[Sample],
    k: usize,
    setting: FreezeSetting,
    polarity: DosPolarity,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<Model> {
    run_daudos_with(
        model,
        dataset,
        k,
        setting,
        polarity,
        CavSource::Vision,
        epochs,
        lr,
        seed,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn run_daudos_with(
    model: &Model,
    dataset: &[Sample],
    k: usize,
    setting: FreezeSetting,
    polarity: DosPolarity,
    source: CavSource,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<Model> {
    let training = daudos_training_set_with(model, dataset, k, polarity, source)?;
    finetune(model, &training, setting, epochs, lr, seed)
}

pub fn encode_trial(t: &SearchTrial) -> String {
    format!(
        "{{\"trial\":{},\"alpha\":{:.8e},\"blend\":{:.8e},\"ra_avg\":{:.4},\"gg\":{:.4},\"loss\":{:.8e}}}",
        t.trial, t.alpha, t.blend, t.ra_avg, t.gg, t.loss
    )
}

pub fn parse_trial(line: &str) -> Result<SearchTrial> {
    let mut sc = Scanner::new(line.trim_end());
    sc.expect("{\"trial\":")?;
    let trial = sc.parse_u64()? as u32;
    let field = |sc: &mut Scanner, name: &str| -> Result<f64> {
        sc.expect(&format!(",\"{name}\":"))?;
        let tok = sc.take_until(&[',', '}']);
        tok.parse::<f64>()
            .map_err(|_| Error::Parse(format!("expected float for {name}, got `{tok}`")))
    };
    let alpha = field(&mut sc, "alpha")?;
    let blend = field(&mut sc, "blend")?;
    let ra_avg = field(&mut sc, "ra_avg")?;
    let gg = field(&mut sc, "gg")?;
    let loss = field(&mut sc, "loss")?;
    sc.expect("}")?;
    sc.done()?;
    Ok(SearchTrial {
        trial,
        alpha,
        blend,
        ra_avg,
        gg,
        loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::build_probes;
    use crate::forge::{generate_dataset, BiasChannel, GenSpec};
    use crate::models::Archetype;
    use crate::tensor::Tag;
    use alloc::collections::BTreeMap;
    use alloc::vec;

    fn dataset(seed: u64, channel: BiasChannel) -> Vec<Sample> {
        generate_dataset(&GenSpec {
            n_samples: 64,
            seed,
            bias_channel: channel,
            bias_strength: 0.9,
            gender_occupation_correlation: 0.9,
            noise_sigma: 0.05,
        })
        .unwrap()
    }

    #[test]
    fn raw_setting_returns_model_bitwise() {
        let model = Model::init(Archetype::DualEncoder, 42);
        let out = finetune(&model, &[], FreezeSetting::Raw, 5, 0.05, 1).unwrap();
        assert!(out.bitwise_eq(&model));
    }

    #[test]
    fn empty_samples_with_trainable_setting_error() {
        let model = Model::init(Archetype::DualEncoder, 42);
        assert!(matches!(
            finetune(&model, &[], FreezeSetting::Both, 5, 0.05, 1),
            Err(Error::EmptyData(_))
        ));
    }

    #[test]
    fn finetune_freezes_the_untrained_modality() {
        let data = dataset(1, BiasChannel::Vision);
        for archetype in [Archetype::DualEncoder, Archetype::CaptionScorer] {
            let model = Model::init(archetype, 42);
            let tuned = finetune(&model, &data, FreezeSetting::VisionOnly, 3, 0.05, 7).unwrap();
            for (name, p) in model.params().iter() {
                let after = tuned.params().get(name).unwrap();
                match p.tag {
                    Tag::Text | Tag::TextProj | Tag::Decoder => {
                        assert!(after.bitwise_eq(&p.tensor), "{name} moved");
                    }
                    _ => {}
                }
            }
            // And something on the vision side did move.
            let moved = model
                .params()
                .iter()
                .filter(|(_, p)| matches!(p.tag, Tag::Vision | Tag::VisionProj))
                .any(|(name, p)| !tuned.params().get(name).unwrap().bitwise_eq(&p.tensor));
            assert!(moved);
        }
    }

    #[test]
    fn finetune_is_deterministic_in_seed() {
        let data = dataset(2, BiasChannel::Vision);
        let model = Model::init(Archetype::DualEncoder, 42);
        let a = finetune(&model, &data, FreezeSetting::Both, 2, 0.05, 9).unwrap();
        let b = finetune(&model, &data, FreezeSetting::Both, 2, 0.05, 9).unwrap();
        assert!(a.bitwise_eq(&b));
        let c = finetune(&model, &data, FreezeSetting::Both, 2, 0.05, 10).unwrap();
        assert!(!a.bitwise_eq(&c));
    }

    #[test]
    fn training_loss_descends_with_at_most_one_violation_across_seeds() {
        let mut violations = 0;
        for seed in 0..10u64 {
            let data = dataset(100 + seed, BiasChannel::Vision);
            let model = Model::init(Archetype::DualEncoder, 42);
            let (_, losses) =
                finetune_traced(&model, &data, FreezeSetting::Both, 5, 0.05, seed).unwrap();
            if losses[4] > losses[0] {
                violations += 1;
            }
        }
        assert!(violations <= 1, "{violations} seeds rose");
    }

    #[test]
    fn cda_training_set_swaps_exactly_the_stereotypical() {
        let data = dataset(3, BiasChannel::Vision);
        let training = cda_training_set(&data).unwrap();
        assert_eq!(training.len(), data.len());
        for (orig, out) in data.iter().zip(training.iter()) {
            if orig.stereotypical {
                assert_eq!(out.gender, orig.gender.opposite());
                assert_eq!(out.caption, cda_swap(&orig.caption).unwrap());
                assert!(out.image_features.bitwise_eq(&orig.image_features));
            } else {
                assert_eq!(out, orig);
            }
        }

        // All-stereotypical dataset: size preserved, all swapped.
        let stereo: Vec<Sample> = data.iter().filter(|s| s.stereotypical).cloned().collect();
        let swapped = cda_training_set(&stereo).unwrap();
        assert_eq!(swapped.len(), stereo.len());
        assert!(swapped.iter().all(|s| !s.stereotypical));

        // All-anti dataset passes through unchanged.
        let anti: Vec<Sample> = data.iter().filter(|s| !s.stereotypical).cloned().collect();
        assert_eq!(cda_training_set(&anti).unwrap(), anti);

        assert!(matches!(cda_training_set(&[]), Err(Error::EmptyData(_))));
    }

    #[test]
    fn task_vector_arithmetic() {
        let mut base = ParamSet::new();
        base.insert("net.w", Tag::Vision, Tensor::vector(vec![1.0, 2.0]));
        let mut ft = ParamSet::new();
        ft.insert("net.w", Tag::Vision, Tensor::vector(vec![1.5, 1.0]));
        let tv = compute_task_vector(&base, &ft).unwrap();
        assert_eq!(tv.deltas.get("net.w").unwrap().data(), &[0.5, -1.0]);

        let zero = compute_task_vector(&base, &base).unwrap();
        assert!(zero.deltas.get("net.w").unwrap().data().iter().all(|&v| v == 0.0));

        let mut bad = ParamSet::new();
        bad.insert("net.w", Tag::Vision, Tensor::vector(vec![1.0]));
        match compute_task_vector(&base, &bad).unwrap_err() {
            Error::Shape { name, .. } => assert_eq!(name, "net.w"),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn apply_identity_edges_are_bitwise() {
        let model = Model::init(Archetype::DualEncoder, 5);
        let ft = Model::init(Archetype::DualEncoder, 6);
        let tv = compute_task_vector(model.params(), ft.params()).unwrap();
        for params in [
            TaskVectorParams::new(0.7, 1.0).unwrap(),
            TaskVectorParams::new(0.0, 0.3).unwrap(),
        ] {
            let out =
                apply_task_vector(model.params(), &tv, &params, &FreezeMask::none()).unwrap();
            assert!(out.bitwise_eq(model.params()));
        }
    }

    #[test]
    fn apply_coefficient_oracle() {
        // (1 - 0.78) * 0.56 = 0.1232; 1.0 - 0.1232 * 2.0 = 0.7536.
        let p = TaskVectorParams::new(0.56, 0.78).unwrap();
        assert!((p.coefficient() - 0.1232).abs() < 1e-12);
        let mut base = ParamSet::new();
        base.insert("net.w", Tag::Vision, Tensor::vector(vec![1.0]));
        let mut ft = ParamSet::new();
        ft.insert("net.w", Tag::Vision, Tensor::vector(vec![3.0]));
        let tv = compute_task_vector(&base, &ft).unwrap();
        let out = apply_task_vector(&base, &tv, &p, &FreezeMask::none()).unwrap();
        assert!((out.get("net.w").unwrap().data()[0] - 0.7536).abs() < 1e-6);
    }

    #[test]
    fn apply_respects_modality_mask() {
        let model = Model::init(Archetype::DualEncoder, 5);
        let ft = finetune(
            &model,
            &dataset(4, BiasChannel::Vision),
            FreezeSetting::Both,
            1,
            0.05,
            3,
        )
        .unwrap();
        let tv = compute_task_vector(model.params(), ft.params()).unwrap();
        let p = TaskVectorParams::new(0.5, 0.2).unwrap();
        let mask = FreezeMask::freezing(&[Tag::Text, Tag::TextProj]);
        let out = apply_task_vector(model.params(), &tv, &p, &mask).unwrap();
        for (name, param) in model.params().iter() {
            let same = out.get(name).unwrap().bitwise_eq(&param.tensor);
            match param.tag {
                Tag::Text | Tag::TextProj => assert!(same, "{name} should be frozen"),
                _ => {}
            }
        }
    }

    #[test]
    fn apply_rejects_out_of_range_params() {
        assert!(TaskVectorParams::new(1.2, 0.5).is_err());
        assert!(TaskVectorParams::new(0.5, -0.1).is_err());
        assert!(TaskVectorParams::new(0.0, 0.0).is_ok());
    }

    #[test]
    fn chained_applications_compose_additively() {
        let model = Model::init(Archetype::DualEncoder, 7);
        let ft = Model::init(Archetype::DualEncoder, 8);
        let tv = compute_task_vector(model.params(), ft.params()).unwrap();
        let c1 = TaskVectorParams::new(0.3, 0.0).unwrap();
        let c2 = TaskVectorParams::new(0.25, 0.0).unwrap();
        let combined = TaskVectorParams::new(0.55, 0.0).unwrap();
        let step1 = apply_task_vector(model.params(), &tv, &c1, &FreezeMask::none()).unwrap();
        let step2 = apply_task_vector(&step1, &tv, &c2, &FreezeMask::none()).unwrap();
        let direct = apply_task_vector(model.params(), &tv, &combined, &FreezeMask::none()).unwrap();
        for (name, p) in direct.iter() {
            let chained = step2.get(name).unwrap();
            for (a, b) in p.tensor.data().iter().zip(chained.data().iter()) {
                assert!(
                    (a - b).abs() <= 1e-6 * a.abs().max(1.0),
                    "{name}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn search_contract_holds() {
        let model = Model::init(Archetype::DualEncoder, 9);
        let ft = Model::init(Archetype::DualEncoder, 10);
        let tv = compute_task_vector(model.params(), ft.params()).unwrap();
        let probes = build_probes(77, 1).unwrap();
        let cfg = SearchConfig {
            trials: 16,
            lambda_gap: 1.0,
            seed: 5,
        };
        let out = search_hyperparams(&model, &tv, &probes, &cfg, &FreezeMask::none()).unwrap();
        assert_eq!(out.trace.len(), 16);
        let min = out
            .trace
            .iter()
            .map(|t| t.loss)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(out.best_loss, min);
        for t in &out.trace {
            assert!((0.1..=1.0).contains(&t.alpha));
            assert!((0.0..=1.0).contains(&t.blend));
        }
        let again = search_hyperparams(&model, &tv, &probes, &cfg, &FreezeMask::none()).unwrap();
        assert_eq!(out, again);

        let single = SearchConfig {
            trials: 1,
            lambda_gap: 1.0,
            seed: 5,
        };
        let one = search_hyperparams(&model, &tv, &probes, &single, &FreezeMask::none()).unwrap();
        assert_eq!(one.best.alpha, one.trace[0].alpha);
        assert!(matches!(
            search_hyperparams(&model, &tv, &[], &cfg, &FreezeMask::none()),
            Err(Error::Evaluation(_))
        ));
    }

    #[test]
    fn search_loss_oracle() {
        assert!((search_loss(0.94, 0.06, 1.0) + 0.88).abs() < 1e-12);
    }

    #[test]
    fn cav_mean_and_order_invariance() {
        let model = Model::init(Archetype::DualEncoder, 11);
        let data = dataset(6, BiasChannel::Vision);
        let anti: Vec<Sample> = data.iter().filter(|s| !s.stereotypical).cloned().collect();

        let single = compute_cav(&model, &anti[..1]).unwrap();
        let z = model.encode_image(&anti[0].image_features).unwrap().to_f64();
        for (a, b) in single.values.iter().zip(z.iter()) {
            assert_eq!(a, b);
        }
        assert_eq!(single.n_sources, 1);

        let forward = compute_cav(&model, &anti).unwrap();
        let mut reversed_input = anti.clone();
        reversed_input.reverse();
        let backward = compute_cav(&model, &reversed_input).unwrap();
        assert_eq!(forward, backward);

        assert!(matches!(compute_cav(&model, &[]), Err(Error::Precondition(_))));
        let stereo: Vec<Sample> = data.iter().filter(|s| s.stereotypical).cloned().collect();
        assert!(matches!(
            compute_cav(&model, &stereo[..1]),
            Err(Error::Label(_))
        ));
    }

    #[test]
    fn dos_score_bounds_and_degenerate_cav() {
        let model = Model::init(Archetype::DualEncoder, 11);
        let data = dataset(6, BiasChannel::Vision);
        let anti: Vec<Sample> = data.iter().filter(|s| !s.stereotypical).cloned().collect();
        let cav = compute_cav(&model, &anti).unwrap();
        for s in &data {
            let score = dos_score(&model, s, &cav).unwrap();
            assert!((-1.0..=1.0).contains(&score));
        }
        // A sample whose embedding IS the concept vector scores exactly 1.
        let single = compute_cav(&model, &anti[..1]).unwrap();
        assert_eq!(dos_score(&model, &anti[0], &single).unwrap(), 1.0);
        let zero = ConceptVector {
            values: vec![0.0; 16],
            n_sources: 2,
        };
        assert!(matches!(
            dos_score(&model, &data[0], &zero),
            Err(Error::DegenerateEmbedding(_))
        ));
    }

    #[test]
    fn selection_sort_and_tie_break() {
        let data = dataset(8, BiasChannel::Vision);
        let three = &data[..3];
        let scores = vec![0.9, -0.2, 0.1];
        let picked = daudos_select(three, &scores, 2, DosPolarity::Ascending).unwrap();
        assert_eq!(picked[0].id, three[1].id);
        assert_eq!(picked[1].id, three[2].id);

        // Equal scores: ascending id order.
        let tied = vec![0.5, 0.5, 0.5];
        let picked = daudos_select(three, &tied, 2, DosPolarity::Ascending).unwrap();
        assert_eq!(picked[0].id, three[0].id);
        assert_eq!(picked[1].id, three[1].id);

        // K = N returns everything, order-normalized.
        let all = daudos_select(three, &scores, 3, DosPolarity::Ascending).unwrap();
        assert_eq!(all.len(), 3);

        assert!(matches!(
            daudos_select(three, &scores, 0, DosPolarity::Ascending),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(
            daudos_select(three, &scores, 4, DosPolarity::Ascending),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn polarity_selects_exact_complements() {
        let data = dataset(12, BiasChannel::Vision);
        let model = Model::init(Archetype::DualEncoder, 13);
        let anti: Vec<Sample> = data.iter().filter(|s| !s.stereotypical).cloned().collect();
        let cav = compute_cav(&model, &anti).unwrap();
        let scores: Vec<f64> = data
            .iter()
            .map(|s| dos_score(&model, s, &cav).unwrap())
            .collect();
        let k = data.len() / 3;
        let asc = daudos_select(&data, &scores, k, DosPolarity::Ascending).unwrap();
        let desc = daudos_select(&data, &scores, data.len() - k, DosPolarity::Descending).unwrap();
        let mut ids: Vec<u64> = asc.iter().chain(desc.iter()).map(|s| s.id).collect();
        ids.sort_unstable();
        let mut expected: Vec<u64> = data.iter().map(|s| s.id).collect();
        expected.sort_unstable();
        assert_eq!(ids, expected);
    }

    #[test]
    fn daudos_training_set_size_is_k_and_full_k_matches_cda() {
        let data = dataset(14, BiasChannel::Vision);
        let model = Model::init(Archetype::DualEncoder, 15);
        let k = data.len().div_ceil(3);
        let training = daudos_training_set(&model, &data, k, DosPolarity::Ascending).unwrap();
        assert_eq!(training.len(), k);

        // K = N yields the same multiset of training pairs as the full
        // counterfactual set (order may differ).
        let full = daudos_training_set(&model, &data, data.len(), DosPolarity::Ascending).unwrap();
        let cda = cda_training_set(&data).unwrap();
        let key = |s: &Sample| (s.id, s.caption.text(), s.gender.as_str().to_string());
        let mut a: BTreeMap<_, usize> = BTreeMap::new();
        for s in &full {
            *a.entry(key(s)).or_default() += 1;
        }
        let mut b: BTreeMap<_, usize> = BTreeMap::new();
        for s in &cda {
            *b.entry(key(s)).or_default() += 1;
        }
        assert_eq!(a, b);
    }

    #[test]
    fn daudos_needs_an_anti_stereotypical_sample() {
        let data = dataset(16, BiasChannel::Vision);
        let model = Model::init(Archetype::DualEncoder, 17);
        let stereo: Vec<Sample> = data.iter().filter(|s| s.stereotypical).cloned().collect();
        assert!(matches!(
            daudos_training_set(&model, &stereo, 2, DosPolarity::Ascending),
            Err(Error::EmptyData(_))
        ));
    }

    #[test]
    fn trial_line_roundtrip() {
        let t = SearchTrial {
            trial: 3,
            alpha: 0.56,
            blend: 0.78,
            ra_avg: 0.94,
            gg: 0.06,
            loss: -0.88,
        };
        let line = encode_trial(&t);
        let back = parse_trial(&line).unwrap();
        assert_eq!(back.trial, 3);
        assert!((back.alpha - 0.56).abs() < 1e-9);
        assert!((back.loss + 0.88).abs() < 1e-9);
    }
}
