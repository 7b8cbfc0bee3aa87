//! The two toy model archetypes.
//!
//! * [`DualEncoder`]: a contrastive image/text matcher. Both sides are a
//!   trunk block plus a normalized projection head; the text side pools a
//!   token embedding table. Scoring is cosine over temperature.
//! * [`CaptionScorer`]: a conditional caption model. The vision side is the
//!   same trunk+head stack; the text side is a token embedding table and a
//!   bigram output matrix, coupled to the image through a decoder matrix.
//!   Its gender preference is read off the two subject-pronoun logits at the
//!   first caption position.
//!
//! The text side of the caption scorer carries roughly three times the
//! parameters of its vision side; the dual encoder is balanced. Freeze
//! settings select which tags train; both archetypes expose the same
//! freeze/edit/evaluate surface so the debiasing code never branches on the
//! archetype.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::forge::{Gender, Sample, IMG_DIM, MAX_TOKENS, VOCAB_SIZE};
use crate::loss::{cross_entropy, info_nce_f64};
use crate::nn::{
    block_backward_f64, block_forward_f64, init_block, matvec, matvec_t, BlockGrads, MlpSlice,
};
use crate::rng::Rng;
use crate::tensor::{FreezeMask, ParamSet, Tag, Tensor};

pub const HIDDEN_DIM: usize = 32;
pub const EMB_DIM: usize = 16;
/// Text-side embedding width of the caption scorer (three-ish times the
/// vision parameter budget once the bigram matrix is counted).
pub const CAP_TXT_DIM: usize = 48;
/// Fixed softmax temperature; not a trainable parameter.
pub const TEMPERATURE: f64 = 0.07;
/// Minibatch size used by the training loops.
pub const BATCH_SIZE: usize = 16;

const VISION: MlpSlice<'static> = MlpSlice {
    prefix: "vision",
    normalize: false,
};
const VISION_PROJ: MlpSlice<'static> = MlpSlice {
    prefix: "vision_proj",
    normalize: true,
};
const TEXT: MlpSlice<'static> = MlpSlice {
    prefix: "text",
    normalize: false,
};
const TEXT_PROJ: MlpSlice<'static> = MlpSlice {
    prefix: "text_proj",
    normalize: true,
};

fn pronoun_ids() -> (u16, u16) {
    let he = crate::forge::word_id("he").expect("vocabulary has `he`");
    let she = crate::forge::word_id("she").expect("vocabulary has `she`");
    (he, she)
}

/// Which subset of tags trains during a debiasing run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FreezeSetting {
    Raw,
    TextOnly,
    VisionOnly,
    Both,
}

impl FreezeSetting {
    pub const ALL: [FreezeSetting; 4] = [
        FreezeSetting::Raw,
        FreezeSetting::TextOnly,
        FreezeSetting::VisionOnly,
        FreezeSetting::Both,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FreezeSetting::Raw => "raw",
            FreezeSetting::TextOnly => "text_only",
            FreezeSetting::VisionOnly => "vision_only",
            FreezeSetting::Both => "both",
        }
    }

    pub fn parse(s: &str) -> Result<FreezeSetting> {
        FreezeSetting::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown setting `{s}`")))
    }
}

/// Frozen-tag mask for a setting. Raw freezes everything; TextOnly unfreezes
/// the text encoder and its projection; VisionOnly the vision pair; Both
/// unfreezes every tag including the decoder coupler.
pub fn freeze_mask(setting: FreezeSetting) -> FreezeMask {
    match setting {
        FreezeSetting::Raw => FreezeMask::all(),
        FreezeSetting::TextOnly => {
            FreezeMask::freezing(&[Tag::Vision, Tag::VisionProj, Tag::Decoder])
        }
        FreezeSetting::VisionOnly => {
            FreezeMask::freezing(&[Tag::Text, Tag::TextProj, Tag::Decoder])
        }
        FreezeSetting::Both => FreezeMask::none(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Archetype {
    DualEncoder,
    CaptionScorer,
}

impl Archetype {
    pub fn as_str(self) -> &'static str {
        match self {
            Archetype::DualEncoder => "dual_encoder",
            Archetype::CaptionScorer => "caption_scorer",
        }
    }

    pub fn parse(s: &str) -> Result<Archetype> {
        match s {
            "dual_encoder" => Ok(Archetype::DualEncoder),
            "caption_scorer" => Ok(Archetype::CaptionScorer),
            other => Err(Error::Parse(format!("unknown archetype `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder {
    pub params: ParamSet,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionScorer {
    pub params: ParamSet,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Dual(DualEncoder),
    Captioner(CaptionScorer),
}

fn init_embedding(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let data: Vec<f32> = (0..rows * cols)
        .map(|_| rng.range_f64(-0.5, 0.5) as f32)
        .collect();
    Tensor::new(alloc::vec![rows, cols], data).expect("sized to shape")
}

fn init_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let a = 1.0 / crate::math::sqrt(cols as f64);
    let data: Vec<f32> = (0..rows * cols)
        .map(|_| rng.range_f64(-a, a) as f32)
        .collect();
    Tensor::new(alloc::vec![rows, cols], data).expect("sized to shape")
}

impl DualEncoder {
    pub fn init(seed: u64) -> DualEncoder {
        let mut rng = Rng::seeded(seed);
        let mut params = ParamSet::new();
        init_block(&mut params, "vision", Tag::Vision, IMG_DIM, HIDDEN_DIM, EMB_DIM, &mut rng);
        init_block(
            &mut params,
            "vision_proj",
            Tag::VisionProj,
            EMB_DIM,
            HIDDEN_DIM,
            EMB_DIM,
            &mut rng,
        );
        params.insert(
            "text.embed",
            Tag::Text,
            init_embedding(&mut rng, VOCAB_SIZE, EMB_DIM),
        );
        init_block(&mut params, "text", Tag::Text, EMB_DIM, HIDDEN_DIM, EMB_DIM, &mut rng);
        init_block(
            &mut params,
            "text_proj",
            Tag::TextProj,
            EMB_DIM,
            HIDDEN_DIM,
            EMB_DIM,
            &mut rng,
        );
        DualEncoder {
            params,
            temperature: TEMPERATURE,
        }
    }

    pub fn from_params(params: ParamSet) -> Result<DualEncoder> {
        validate_schema(&params, &dual_schema())?;
        Ok(DualEncoder {
            params,
            temperature: TEMPERATURE,
        })
    }
}

impl CaptionScorer {
    pub fn init(seed: u64) -> CaptionScorer {
        let mut rng = Rng::seeded(seed);
        let mut params = ParamSet::new();
        init_block(&mut params, "vision", Tag::Vision, IMG_DIM, HIDDEN_DIM, EMB_DIM, &mut rng);
        init_block(
            &mut params,
            "vision_proj",
            Tag::VisionProj,
            EMB_DIM,
            HIDDEN_DIM,
            EMB_DIM,
            &mut rng,
        );
        params.insert(
            "text.embed",
            Tag::Text,
            init_embedding(&mut rng, VOCAB_SIZE, CAP_TXT_DIM),
        );
        params.insert(
            "text.bigram",
            Tag::Text,
            init_matrix(&mut rng, VOCAB_SIZE, CAP_TXT_DIM),
        );
        params.insert(
            "decoder.vis2txt",
            Tag::Decoder,
            init_matrix(&mut rng, CAP_TXT_DIM, EMB_DIM),
        );
        CaptionScorer { params }
    }

    pub fn from_params(params: ParamSet) -> Result<CaptionScorer> {
        validate_schema(&params, &captioner_schema())?;
        Ok(CaptionScorer { params })
    }
}

type SchemaEntry = (&'static str, Tag, Vec<usize>);

fn block_schema(prefix: &'static str, tag: Tag, in_dim: usize) -> Vec<SchemaEntry> {
    let names: [&'static str; 4] = match prefix {
        "vision" => ["vision.w1", "vision.b1", "vision.w2", "vision.b2"],
        "vision_proj" => [
            "vision_proj.w1",
            "vision_proj.b1",
            "vision_proj.w2",
            "vision_proj.b2",
        ],
        "text" => ["text.w1", "text.b1", "text.w2", "text.b2"],
        "text_proj" => ["text_proj.w1", "text_proj.b1", "text_proj.w2", "text_proj.b2"],
        _ => unreachable!("fixed prefixes"),
    };
    alloc::vec![
        (names[0], tag, alloc::vec![HIDDEN_DIM, in_dim]),
        (names[1], tag, alloc::vec![HIDDEN_DIM]),
        (names[2], tag, alloc::vec![EMB_DIM, HIDDEN_DIM]),
        (names[3], tag, alloc::vec![EMB_DIM]),
    ]
}

fn dual_schema() -> Vec<SchemaEntry> {
    let mut s = block_schema("vision", Tag::Vision, IMG_DIM);
    s.extend(block_schema("vision_proj", Tag::VisionProj, EMB_DIM));
    s.push(("text.embed", Tag::Text, alloc::vec![VOCAB_SIZE, EMB_DIM]));
    s.extend(block_schema("text", Tag::Text, EMB_DIM));
    s.extend(block_schema("text_proj", Tag::TextProj, EMB_DIM));
    s
}

fn captioner_schema() -> Vec<SchemaEntry> {
    let mut s = block_schema("vision", Tag::Vision, IMG_DIM);
    s.extend(block_schema("vision_proj", Tag::VisionProj, EMB_DIM));
    s.push(("text.embed", Tag::Text, alloc::vec![VOCAB_SIZE, CAP_TXT_DIM]));
    s.push(("text.bigram", Tag::Text, alloc::vec![VOCAB_SIZE, CAP_TXT_DIM]));
    s.push(("decoder.vis2txt", Tag::Decoder, alloc::vec![CAP_TXT_DIM, EMB_DIM]));
    s
}

fn validate_schema(params: &ParamSet, schema: &[SchemaEntry]) -> Result<()> {
    if params.len() != schema.len() {
        return Err(Error::Consistency(format!(
            "expected {} tensors, got {}",
            schema.len(),
            params.len()
        )));
    }
    for (name, tag, shape) in schema {
        let t = params.require(name)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Shape {
                name: (*name).to_string(),
                expected: format!("{shape:?}"),
                got: format!("{:?}", t.shape()),
            });
        }
        if params.tag_of(name) != Some(*tag) {
            return Err(Error::Consistency(format!("tensor `{name}` has the wrong tag")));
        }
    }
    Ok(())
}

/// One training pair: an image feature vector, caption token ids, and the
/// caption's gender (used as the pronoun target by the caption scorer).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub image: Tensor,
    pub tokens: Vec<u16>,
    pub gender: Gender,
}

impl TrainItem {
    pub fn from_sample(sample: &Sample) -> TrainItem {
        TrainItem {
            image: sample.image_features.clone(),
            tokens: sample.caption.word_ids(),
            gender: sample.gender,
        }
    }
}

fn check_image(x: &Tensor) -> Result<()> {
    if x.shape() != [IMG_DIM] {
        return Err(Error::Shape {
            name: "image_features".to_string(),
            expected: format!("[{IMG_DIM}]"),
            got: format!("{:?}", x.shape()),
        });
    }
    Ok(())
}

fn check_tokens(tokens: &[u16]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Precondition("empty token list".to_string()));
    }
    if tokens.len() > MAX_TOKENS {
        return Err(Error::Precondition(format!(
            "caption of {} tokens exceeds the {MAX_TOKENS}-token limit",
            tokens.len()
        )));
    }
    for &t in tokens {
        if t as usize >= VOCAB_SIZE {
            return Err(Error::Vocabulary(format!("token id {t} outside the vocabulary")));
        }
    }
    Ok(())
}

fn vision_embed_f64(params: &ParamSet, x: &[f64]) -> Result<Vec<f64>> {
    let trunk = block_forward_f64(params, &VISION, x)?;
    let head = block_forward_f64(params, &VISION_PROJ, &trunk.out)?;
    Ok(head.out)
}

fn pooled_embedding_f64(embed: &Tensor, tokens: &[u16]) -> Vec<f64> {
    let cols = embed.shape()[1];
    let data = embed.data();
    let mut pooled = alloc::vec![0.0f64; cols];
    for &t in tokens {
        let row = &data[(t as usize) * cols..(t as usize + 1) * cols];
        for (p, v) in pooled.iter_mut().zip(row.iter()) {
            *p += *v as f64;
        }
    }
    let inv = 1.0 / tokens.len() as f64;
    for p in pooled.iter_mut() {
        *p *= inv;
    }
    pooled
}

fn text_embed_f64(params: &ParamSet, tokens: &[u16]) -> Result<Vec<f64>> {
    let embed = params.require("text.embed")?;
    let pooled = pooled_embedding_f64(embed, tokens);
    let trunk = block_forward_f64(params, &TEXT, &pooled)?;
    let head = block_forward_f64(params, &TEXT_PROJ, &trunk.out)?;
    Ok(head.out)
}

/// Encode an image into a unit-length embedding. Works for both archetypes.
pub fn encode_image(params: &ParamSet, image: &Tensor) -> Result<Tensor> {
    check_image(image)?;
    let z = vision_embed_f64(params, &image.to_f64())?;
    Tensor::from_f64(alloc::vec![EMB_DIM], &z)
}

/// Encode a token sequence into a unit-length embedding (dual encoder only:
/// mean-pooled table rows through the text trunk and projection).
pub fn encode_text(params: &ParamSet, tokens: &[u16]) -> Result<Tensor> {
    check_tokens(tokens)?;
    let t = text_embed_f64(params, tokens)?;
    Tensor::from_f64(alloc::vec![EMB_DIM], &t)
}

impl Model {
    pub fn init(archetype: Archetype, seed: u64) -> Model {
        match archetype {
            Archetype::DualEncoder => Model::Dual(DualEncoder::init(seed)),
            Archetype::CaptionScorer => Model::Captioner(CaptionScorer::init(seed)),
        }
    }

    pub fn from_params(archetype: Archetype, params: ParamSet) -> Result<Model> {
        match archetype {
            Archetype::DualEncoder => Ok(Model::Dual(DualEncoder::from_params(params)?)),
            Archetype::CaptionScorer => Ok(Model::Captioner(CaptionScorer::from_params(params)?)),
        }
    }

    pub fn archetype(&self) -> Archetype {
        match self {
            Model::Dual(_) => Archetype::DualEncoder,
            Model::Captioner(_) => Archetype::CaptionScorer,
        }
    }

    pub fn params(&self) -> &ParamSet {
        match self {
            Model::Dual(m) => &m.params,
            Model::Captioner(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            Model::Dual(m) => &mut m.params,
            Model::Captioner(m) => &mut m.params,
        }
    }

    pub fn with_params(&self, params: ParamSet) -> Result<Model> {
        Model::from_params(self.archetype(), params)
    }

    pub fn encode_image(&self, image: &Tensor) -> Result<Tensor> {
        encode_image(self.params(), image)
    }

    pub fn bitwise_eq(&self, other: &Model) -> bool {
        self.archetype() == other.archetype() && self.params().bitwise_eq(other.params())
    }

    /// Batch loss (and gradients for unfrozen tags) under the archetype's
    /// training objective.
    pub fn batch_loss(
        &self,
        items: &[TrainItem],
        mask: &FreezeMask,
        want_grads: bool,
    ) -> Result<(f64, ParamSet)> {
        match self {
            Model::Dual(m) => dual_batch_loss(&m.params, m.temperature, items, mask, want_grads),
            Model::Captioner(m) => captioner_batch_loss(&m.params, items, mask, want_grads),
        }
    }
}

/// Cosine-over-temperature matching score of the dual encoder.
pub fn similarity_score(model: &DualEncoder, image: &Tensor, tokens: &[u16]) -> Result<f64> {
    let z = encode_image(&model.params, image)?;
    let t = encode_text(&model.params, tokens)?;
    Ok(crate::nn::cosine_similarity(&z, &t)? / model.temperature)
}

/// Pronoun-head logits of the caption scorer: the two subject-pronoun rows
/// of the bigram matrix applied to the sequence-start state for this image.
pub fn gender_logits(model: &CaptionScorer, image: &Tensor) -> Result<(f64, f64)> {
    check_image(image)?;
    let z = vision_embed_f64(&model.params, &image.to_f64())?;
    let coupler = model.params.require("decoder.vis2txt")?;
    let embed = model.params.require("text.embed")?;
    let bigram = model.params.require("text.bigram")?;
    let hz = matvec(coupler, &z);
    let start = pooled_embedding_f64(embed, &[0]); // row 0 is the start marker
    let u: Vec<f64> = start.iter().zip(hz.iter()).map(|(a, b)| a + b).collect();
    let (he, she) = pronoun_ids();
    let row = |id: u16| -> f64 {
        let cols = bigram.shape()[1];
        let r = &bigram.data()[(id as usize) * cols..(id as usize + 1) * cols];
        r.iter().zip(u.iter()).map(|(w, x)| (*w as f64) * x).sum()
    };
    Ok((row(he), row(she)))
}

/// Contrastive objective over a batch, fully in f64, with gradients chained
/// through normalization, both projection stacks and the embedding table.
pub fn dual_batch_loss(
    params: &ParamSet,
    temperature: f64,
    items: &[TrainItem],
    mask: &FreezeMask,
    want_grads: bool,
) -> Result<(f64, ParamSet)> {
    if items.len() < 2 {
        return Err(Error::DegenerateBatch(
            "contrastive training needs batches of at least 2".to_string(),
        ));
    }
    struct SideCache {
        trunk: crate::nn::BlockCache,
        head: crate::nn::BlockCache,
    }
    let mut vision_caches = Vec::with_capacity(items.len());
    let mut text_caches = Vec::with_capacity(items.len());
    let mut imgs = Vec::with_capacity(items.len());
    let mut txts = Vec::with_capacity(items.len());
    let embed = params.require("text.embed")?;
    for item in items {
        check_image(&item.image)?;
        check_tokens(&item.tokens)?;
        let trunk = block_forward_f64(params, &VISION, &item.image.to_f64())?;
        let head = block_forward_f64(params, &VISION_PROJ, &trunk.out)?;
        imgs.push(head.out.clone());
        vision_caches.push(SideCache { trunk, head });

        let pooled = pooled_embedding_f64(embed, &item.tokens);
        let trunk = block_forward_f64(params, &TEXT, &pooled)?;
        let head = block_forward_f64(params, &TEXT_PROJ, &trunk.out)?;
        txts.push(head.out.clone());
        text_caches.push(SideCache { trunk, head });
    }

    let (loss, dimgs, dtxts) = info_nce_f64(&imgs, &txts, temperature);
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite contrastive loss".to_string()));
    }
    let mut grads = ParamSet::new();
    if !want_grads {
        return Ok((loss, grads));
    }

    let vision_open = !mask.freezes(Tag::Vision) || !mask.freezes(Tag::VisionProj);
    let text_open = !mask.freezes(Tag::Text) || !mask.freezes(Tag::TextProj);

    if vision_open {
        let mut acc_trunk = BlockGrads::for_slice(params, &VISION)?;
        let mut acc_head = BlockGrads::for_slice(params, &VISION_PROJ)?;
        for (cache, dz) in vision_caches.iter().zip(dimgs.iter()) {
            let dmid = block_backward_f64(params, &VISION_PROJ, &cache.head, dz, &mut acc_head)?;
            block_backward_f64(params, &VISION, &cache.trunk, &dmid, &mut acc_trunk)?;
        }
        acc_trunk.emit(params, &VISION, mask, &mut grads)?;
        acc_head.emit(params, &VISION_PROJ, mask, &mut grads)?;
    }
    if text_open {
        let mut acc_trunk = BlockGrads::for_slice(params, &TEXT)?;
        let mut acc_head = BlockGrads::for_slice(params, &TEXT_PROJ)?;
        let cols = embed.shape()[1];
        let mut dembed = alloc::vec![0.0f64; embed.len()];
        for ((cache, dt), item) in text_caches.iter().zip(dtxts.iter()).zip(items.iter()) {
            let dmid = block_backward_f64(params, &TEXT_PROJ, &cache.head, dt, &mut acc_head)?;
            let dpooled = block_backward_f64(params, &TEXT, &cache.trunk, &dmid, &mut acc_trunk)?;
            let inv = 1.0 / item.tokens.len() as f64;
            for &t in &item.tokens {
                let row = &mut dembed[(t as usize) * cols..(t as usize + 1) * cols];
                for (g, d) in row.iter_mut().zip(dpooled.iter()) {
                    *g += d * inv;
                }
            }
        }
        acc_trunk.emit(params, &TEXT, mask, &mut grads)?;
        acc_head.emit(params, &TEXT_PROJ, mask, &mut grads)?;
        if !mask.freezes(Tag::Text) {
            grads.insert(
                "text.embed",
                Tag::Text,
                Tensor::from_f64(embed.shape().to_vec(), &dembed)?,
            );
        }
    }
    Ok((loss, grads))
}

/// Caption objective over a batch: mean bigram cross-entropy over caption
/// positions plus the subject-pronoun cross-entropy, averaged over items.
pub fn captioner_batch_loss(
    params: &ParamSet,
    items: &[TrainItem],
    mask: &FreezeMask,
    want_grads: bool,
) -> Result<(f64, ParamSet)> {
    if items.is_empty() {
        return Err(Error::DegenerateBatch("empty caption batch".to_string()));
    }
    let embed = params.require("text.embed")?;
    let bigram = params.require("text.bigram")?;
    let coupler = params.require("decoder.vis2txt")?;
    let cols = embed.shape()[1];
    let (he, she) = pronoun_ids();

    let inv_batch = 1.0 / items.len() as f64;
    let mut loss = 0.0f64;
    let mut dembed = alloc::vec![0.0f64; embed.len()];
    let mut dbigram = alloc::vec![0.0f64; bigram.len()];
    let mut dcoupler = alloc::vec![0.0f64; coupler.len()];
    let mut acc_trunk = BlockGrads::for_slice(params, &VISION)?;
    let mut acc_head = BlockGrads::for_slice(params, &VISION_PROJ)?;
    let vision_open = !mask.freezes(Tag::Vision) || !mask.freezes(Tag::VisionProj);

    let embed_row = |id: u16| -> Vec<f64> {
        embed.data()[(id as usize) * cols..(id as usize + 1) * cols]
            .iter()
            .map(|&v| v as f64)
            .collect()
    };

    for item in items {
        check_image(&item.image)?;
        check_tokens(&item.tokens)?;
        let target_female = match item.gender {
            Gender::Male => false,
            Gender::Female => true,
            Gender::Unknown => {
                return Err(Error::Label(
                    "caption training requires a known gender".to_string(),
                ))
            }
        };
        let trunk = block_forward_f64(params, &VISION, &item.image.to_f64())?;
        let head = block_forward_f64(params, &VISION_PROJ, &trunk.out)?;
        let z = &head.out;
        let hz = matvec(coupler, z);

        let mut dhz = alloc::vec![0.0f64; cols];
        let n_positions = item.tokens.len() as f64;
        let pos_scale = inv_batch / n_positions;

        // Bigram chain: predict token k from token k-1 (start marker first).
        let mut prev: u16 = 0;
        for &target in &item.tokens {
            let e_prev = embed_row(prev);
            let u: Vec<f64> = e_prev.iter().zip(hz.iter()).map(|(a, b)| a + b).collect();
            let logits = matvec(bigram, &u);
            let (l, dlogits) = cross_entropy(&logits, target as usize);
            loss += l * pos_scale;
            if want_grads {
                let mut du = alloc::vec![0.0f64; cols];
                for (v, &dl) in dlogits.iter().enumerate() {
                    let g = dl * pos_scale;
                    let row = &bigram.data()[v * cols..(v + 1) * cols];
                    let drow = &mut dbigram[v * cols..(v + 1) * cols];
                    for c in 0..cols {
                        drow[c] += g * u[c];
                        du[c] += g * (row[c] as f64);
                    }
                }
                let erow = &mut dembed[(prev as usize) * cols..(prev as usize + 1) * cols];
                for c in 0..cols {
                    erow[c] += du[c];
                    dhz[c] += du[c];
                }
            }
            prev = target;
        }

        // Pronoun head: the two subject-pronoun logits at the start state.
        let e_start = embed_row(0);
        let u1: Vec<f64> = e_start.iter().zip(hz.iter()).map(|(a, b)| a + b).collect();
        let row_dot = |id: u16| -> f64 {
            bigram.data()[(id as usize) * cols..(id as usize + 1) * cols]
                .iter()
                .zip(u1.iter())
                .map(|(w, x)| (*w as f64) * x)
                .sum()
        };
        let pron_logits = [row_dot(he), row_dot(she)];
        let (l, dpron) = cross_entropy(&pron_logits, usize::from(target_female));
        loss += l * inv_batch;
        if want_grads {
            let mut du1 = alloc::vec![0.0f64; cols];
            for (slot, id) in [(0usize, he), (1usize, she)] {
                let g = dpron[slot] * inv_batch;
                let row = &bigram.data()[(id as usize) * cols..(id as usize + 1) * cols];
                let drow = &mut dbigram[(id as usize) * cols..(id as usize + 1) * cols];
                for c in 0..cols {
                    drow[c] += g * u1[c];
                    du1[c] += g * (row[c] as f64);
                }
            }
            let erow = &mut dembed[0..cols];
            for c in 0..cols {
                erow[c] += du1[c];
                dhz[c] += du1[c];
            }

            // Through the coupler into the vision stack.
            for r in 0..cols {
                let drow = &mut dcoupler[r * EMB_DIM..(r + 1) * EMB_DIM];
                for (d, zi) in drow.iter_mut().zip(z.iter()) {
                    *d += dhz[r] * zi;
                }
            }
            if vision_open {
                let dz = matvec_t(coupler, &dhz);
                let dmid = block_backward_f64(params, &VISION_PROJ, &head, &dz, &mut acc_head)?;
                block_backward_f64(params, &VISION, &trunk, &dmid, &mut acc_trunk)?;
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite caption loss".to_string()));
    }

    let mut grads = ParamSet::new();
    if want_grads {
        if !mask.freezes(Tag::Text) {
            grads.insert("text.embed", Tag::Text, Tensor::from_f64(embed.shape().to_vec(), &dembed)?);
            grads.insert(
                "text.bigram",
                Tag::Text,
                Tensor::from_f64(bigram.shape().to_vec(), &dbigram)?,
            );
        }
        if !mask.freezes(Tag::Decoder) {
            grads.insert(
                "decoder.vis2txt",
                Tag::Decoder,
                Tensor::from_f64(coupler.shape().to_vec(), &dcoupler)?,
            );
        }
        if vision_open {
            acc_trunk.emit(params, &VISION, mask, &mut grads)?;
            acc_head.emit(params, &VISION_PROJ, mask, &mut grads)?;
        }
    }
    Ok((loss, grads))
}
