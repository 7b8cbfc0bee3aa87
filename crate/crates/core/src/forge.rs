//! Synthetic gender-annotated dataset with controllable bias planting.
//!
//! Each sample is a miniature "celebrity photo": a vector of facial
//! attribute ratings, a feature vector standing in for the image, and a
//! templated caption with gendered pronouns. The generator can plant a
//! gender-occupation stereotype into the vision channel (a strong gender
//! signal dimension alongside an occupation one-hot), the text channel
//! (occupation words co-occurring with pronouns), both, or neither --
//! giving ground truth for which modality carries the bias.
//!
//! Annotation follows two rules: gender comes from a term scan over the
//! caption, stereotypicality from attribute thresholds. Both are exposed
//! separately so externally supplied captions can be re-annotated.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Width of the image feature vector:
/// 5 attribute dims + 1 gender-signal dim + 8 occupation one-hot + 2 noise.
pub const IMG_DIM: usize = 16;

/// Gender-signal magnitude used when no bias is planted in a channel.
pub const BASELINE_GENDER_SIGNAL: f64 = 0.15;

/// Fixed token vocabulary. Index 0 is the sequence-start marker used by the
/// caption scorer; everything else appears in generated text.
pub const VOCAB: &[&str] = &[
    "<s>", // 0
    "he", "she", "his", "her", "him", "gentleman", "lady", "man", "woman", "male", "female",
    "engineer", "mechanic", "pilot", "carpenter", "nurse", "teacher", "librarian", "stylist",
    "the", "this", "a", "has", "no", "with", "and", "smile", "bangs", "beard", "eyeglasses",
    "young", "old", "looks", "face", "on", "works", "as", "is", "person", "to", "talks", "at",
    "all", "camera", "hair", "very", "serious",
];

/// Embedding-table capacity; the defined vocabulary must fit inside it.
pub const VOCAB_SIZE: usize = 64;

/// Maximum caption length accepted by the text encoders.
pub const MAX_TOKENS: usize = 32;

/// Nouns used to disambiguate a possessive "her" from an object "her".
const NOUNS: &[&str] = &[
    "smile", "bangs", "beard", "eyeglasses", "face", "person", "camera", "hair", "engineer",
    "mechanic", "pilot", "carpenter", "nurse", "teacher", "librarian", "stylist",
];

const FEMALE_TERMS: &[&str] = &["she", "her", "hers", "lady", "woman", "female"];
const MALE_TERMS: &[&str] = &["he", "his", "him", "gentleman", "man", "male"];

pub fn word_id(word: &str) -> Option<u16> {
    VOCAB.iter().position(|w| *w == word).map(|i| i as u16)
}

pub fn word_str(id: u16) -> Result<&'static str> {
    VOCAB
        .get(id as usize)
        .copied()
        .ok_or_else(|| Error::Vocabulary(format!("token id {id} out of range")))
}

fn is_noun(word: &str) -> bool {
    NOUNS.contains(&word)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Gender {
    Male,
    Female,
    Unknown,
}

impl Gender {
    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Male => "male",
            Gender::Female => "female",
            Gender::Unknown => "unknown",
        }
    }

    pub fn parse(s: &str) -> Result<Gender> {
        match s {
            "male" => Ok(Gender::Male),
            "female" => Ok(Gender::Female),
            "unknown" => Ok(Gender::Unknown),
            other => Err(Error::Parse(format!("unknown gender `{other}`"))),
        }
    }

    pub fn opposite(self) -> Gender {
        match self {
            Gender::Male => Gender::Female,
            Gender::Female => Gender::Male,
            Gender::Unknown => Gender::Unknown,
        }
    }

    /// Signed gender code written into the image gender-signal dimension.
    pub fn signal_sign(self) -> f64 {
        match self {
            Gender::Male => 1.0,
            Gender::Female => -1.0,
            Gender::Unknown => 0.0,
        }
    }
}

/// One of the eight roster occupations. Indices 0-3 are stereotypically
/// male-coded, 4-7 female-coded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OccId(pub u8);

pub const OCCUPATIONS: [&str; 8] = [
    "engineer",
    "mechanic",
    "pilot",
    "carpenter",
    "nurse",
    "teacher",
    "librarian",
    "stylist",
];

impl OccId {
    pub fn all() -> impl Iterator<Item = OccId> {
        (0..8).map(OccId)
    }

    pub fn name(self) -> &'static str {
        OCCUPATIONS[self.0 as usize]
    }

    pub fn from_name(name: &str) -> Result<OccId> {
        OCCUPATIONS
            .iter()
            .position(|o| *o == name)
            .map(|i| OccId(i as u8))
            .ok_or_else(|| Error::Parse(format!("unknown occupation `{name}`")))
    }

    pub fn female_coded(self) -> bool {
        self.0 >= 4
    }

    pub fn word(self) -> u16 {
        word_id(self.name()).expect("roster words are in the vocabulary")
    }
}

/// Grammatical role of a gendered token; needed to swap "her" exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    None,
    Subj,
    Poss,
    Obj,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Token {
    pub word: u16,
    pub role: Role,
}

impl Token {
    pub fn plain(word: u16) -> Token {
        Token {
            word,
            role: Role::None,
        }
    }

    pub fn text(&self) -> Result<&'static str> {
        word_str(self.word)
    }
}

/// A caption: role-tagged tokens plus a deterministic rendering to text
/// (sentence case, terminating period).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Caption {
    tokens: Vec<Token>,
}

impl Caption {
    pub fn new(tokens: Vec<Token>) -> Caption {
        Caption { tokens }
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn word_ids(&self) -> Vec<u16> {
        self.tokens.iter().map(|t| t.word).collect()
    }

    pub fn text(&self) -> String {
        let mut s = String::new();
        for (i, tok) in self.tokens.iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            s.push_str(tok.text().unwrap_or("?"));
        }
        let mut chars = s.chars();
        let capitalized = match chars.next() {
            Some(c) => c.to_uppercase().collect::<String>() + chars.as_str(),
            None => s,
        };
        capitalized + "."
    }

    /// Tokenize a raw string against the fixed vocabulary, tagging gendered
    /// tokens heuristically: "her" is possessive iff followed by a known
    /// noun; a follower outside the vocabulary makes the tag undecidable and
    /// is reported as a tagging failure.
    pub fn from_text(text: &str) -> Result<Caption> {
        let words = split_words(text);
        let mut tokens = Vec::with_capacity(words.len());
        for (i, word) in words.iter().enumerate() {
            let id = word_id(word)
                .ok_or_else(|| Error::Vocabulary(format!("word `{word}` not in vocabulary")))?;
            let role = match word.as_str() {
                "he" | "she" => Role::Subj,
                "his" => Role::Poss,
                "him" => Role::Obj,
                "her" => match words.get(i + 1) {
                    Some(next) if is_noun(next) => Role::Poss,
                    Some(next) if word_id(next).is_some() => Role::Obj,
                    None => Role::Obj,
                    Some(next) => {
                        return Err(Error::Tagging(format!(
                            "cannot tag `her` before unknown word `{next}`"
                        )))
                    }
                },
                _ => Role::None,
            };
            tokens.push(Token { word: id, role });
        }
        Ok(Caption { tokens })
    }
}

fn split_words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| c.is_ascii_punctuation())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Rule-based gender labeler: scans the lowercased word list for gendered
/// terms and returns the gender of the earliest match; `Unknown` when no
/// term appears. Total on arbitrary strings.
pub fn annotate_gender(caption: &str) -> Gender {
    let words = split_words(caption);
    for word in &words {
        if FEMALE_TERMS.contains(&word.as_str()) {
            return Gender::Female;
        }
        if MALE_TERMS.contains(&word.as_str()) {
            return Gender::Male;
        }
    }
    Gender::Unknown
}

/// Attribute ratings on a 0-5 scale. Beard and age are stored in positive
/// polarity (amount of beard, amount of age).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AttributeRatings {
    pub bangs: u8,
    pub eyeglasses: u8,
    pub beard: u8,
    pub smiling: u8,
    pub age: u8,
}

impl AttributeRatings {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("bangs", self.bangs),
            ("eyeglasses", self.eyeglasses),
            ("beard", self.beard),
            ("smiling", self.smiling),
            ("age", self.age),
        ] {
            if v > 5 {
                return Err(Error::Precondition(format!(
                    "attribute `{name}` rating {v} outside 0-5"
                )));
            }
        }
        Ok(())
    }
}

/// Thresholds for the stereotype labeler; overridable per experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StereotypeRules {
    pub male_min_beard: u8,
    pub male_max_bangs: u8,
    pub female_max_beard: u8,
    pub female_min_bangs: u8,
    pub female_min_smiling: u8,
}

impl Default for StereotypeRules {
    fn default() -> Self {
        StereotypeRules {
            male_min_beard: 1,
            male_max_bangs: 1,
            female_max_beard: 0,
            female_min_bangs: 2,
            female_min_smiling: 2,
        }
    }
}

/// Threshold labeler with the default rules.
pub fn annotate_stereotype(attrs: &AttributeRatings, gender: Gender) -> Result<bool> {
    annotate_stereotype_with(&StereotypeRules::default(), attrs, gender)
}

pub fn annotate_stereotype_with(
    rules: &StereotypeRules,
    attrs: &AttributeRatings,
    gender: Gender,
) -> Result<bool> {
    match gender {
        Gender::Male => {
            Ok(attrs.beard >= rules.male_min_beard && attrs.bangs <= rules.male_max_bangs)
        }
        Gender::Female => Ok(attrs.beard <= rules.female_max_beard
            && (attrs.bangs >= rules.female_min_bangs
                || attrs.smiling >= rules.female_min_smiling)),
        Gender::Unknown => Err(Error::Precondition(
            "stereotype label requires a known gender".to_string(),
        )),
    }
}

/// Swap gendered tokens: he/she, his/her (possessive), him/her (object),
/// gentleman/lady, man/woman, male/female. Everything else passes through;
/// applying the swap twice restores the original caption.
pub fn cda_swap(caption: &Caption) -> Result<Caption> {
    let mut out = Vec::with_capacity(caption.tokens().len());
    for tok in caption.tokens() {
        let word = tok.text()?;
        let swapped: Token = match word {
            "he" => tagged("she", tok.role),
            "she" => tagged("he", tok.role),
            "his" => tagged("her", Role::Poss),
            "him" => tagged("her", Role::Obj),
            "her" => match tok.role {
                Role::Poss => tagged("his", Role::Poss),
                Role::Obj => tagged("him", Role::Obj),
                _ => {
                    return Err(Error::Tagging(
                        "`her` without a possessive/object tag cannot be swapped".to_string(),
                    ))
                }
            },
            "gentleman" => tagged("lady", tok.role),
            "lady" => tagged("gentleman", tok.role),
            "man" => tagged("woman", tok.role),
            "woman" => tagged("man", tok.role),
            "male" => tagged("female", tok.role),
            "female" => tagged("male", tok.role),
            _ => *tok,
        };
        out.push(swapped);
    }
    Ok(Caption::new(out))
}

fn tagged(word: &str, role: Role) -> Token {
    Token {
        word: word_id(word).expect("swap table words are in the vocabulary"),
        role,
    }
}

/// Which channel the generator plants the gender-occupation bias into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BiasChannel {
    Vision,
    Text,
    Both,
    None,
}

impl BiasChannel {
    pub fn as_str(self) -> &'static str {
        match self {
            BiasChannel::Vision => "vision",
            BiasChannel::Text => "text",
            BiasChannel::Both => "both",
            BiasChannel::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<BiasChannel> {
        match s {
            "vision" => Ok(BiasChannel::Vision),
            "text" => Ok(BiasChannel::Text),
            "both" => Ok(BiasChannel::Both),
            "none" => Ok(BiasChannel::None),
            other => Err(Error::Parse(format!("unknown bias channel `{other}`"))),
        }
    }

    fn in_vision(self) -> bool {
        matches!(self, BiasChannel::Vision | BiasChannel::Both)
    }

    fn in_text(self) -> bool {
        matches!(self, BiasChannel::Text | BiasChannel::Both)
    }
}

/// Generation recipe. `gender_occupation_correlation` spans anti-correlated
/// (0.0) through independent (0.5) to fully stereotyped (1.0); it is applied
/// at full strength to male samples and at half strength to female samples,
/// so a planted stereotype produces an asymmetric (and therefore measurable)
/// gender gap instead of symmetric errors that cancel.
///
/// `bias_strength` is the per-channel knob: for the vision channel it sets
/// the magnitude of the image gender-signal dimension; for the text channel
/// it sets how strongly the occupation clause wording (pronoun vs gendered
/// noun) tracks occupation codedness. See [`GenSpec::validate`] for ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct GenSpec {
    pub n_samples: usize,
    pub seed: u64,
    pub bias_channel: BiasChannel,
    pub bias_strength: f64,
    pub gender_occupation_correlation: f64,
    pub noise_sigma: f64,
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::EmptyData("generation spec asks for 0 samples".to_string()));
        }
        for (name, v) in [
            ("bias_strength", self.bias_strength),
            (
                "gender_occupation_correlation",
                self.gender_occupation_correlation,
            ),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Precondition(format!("{name} {v} outside [0, 1]")));
            }
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Precondition("noise_sigma must be >= 0".to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub attributes: AttributeRatings,
    pub occupation: OccId,
    pub gender: Gender,
    pub stereotypical: bool,
    pub caption: Caption,
    pub image_features: Tensor,
}

/// Draw attribute ratings. The marginals are identical for both genders:
/// attributes describe the image content the encoders must match, but they
/// carry no gender information, so the only reliable gender evidence in a
/// sample is the gender-signal dimension and whatever channel the bias was
/// planted into. Stereotype labels still follow the cultural thresholds
/// (bearded "male" presentation, bangs/smile "female" presentation), which
/// is what makes counterfactual swaps meaningful on this data.
pub fn sample_attributes(rng: &mut Rng, _gender: Gender) -> AttributeRatings {
    AttributeRatings {
        bangs: if rng.chance(0.625) {
            rng.below(2) as u8
        } else {
            2 + rng.below(4) as u8
        },
        eyeglasses: rng.below(6) as u8,
        beard: if rng.chance(0.5) {
            0
        } else {
            1 + rng.below(5) as u8
        },
        smiling: if rng.chance(0.6) {
            rng.below(2) as u8
        } else {
            2 + rng.below(4) as u8
        },
        age: rng.below(6) as u8,
    }
}

/// Assemble the 16-dim image feature vector for one person.
pub fn image_features(
    attrs: &AttributeRatings,
    gender: Gender,
    gender_signal: f64,
    occupation: Option<OccId>,
    noise_sigma: f64,
    rng: &mut Rng,
) -> Tensor {
    let mut v = alloc::vec![0.0f32; IMG_DIM];
    v[0] = attrs.bangs as f32 / 5.0;
    v[1] = attrs.eyeglasses as f32 / 5.0;
    v[2] = attrs.beard as f32 / 5.0;
    v[3] = attrs.smiling as f32 / 5.0;
    v[4] = attrs.age as f32 / 5.0;
    v[5] = (gender.signal_sign() * gender_signal) as f32;
    if let Some(occ) = occupation {
        v[6 + occ.0 as usize] = 1.0;
    }
    v[14] = (noise_sigma * rng.normal()) as f32;
    v[15] = (noise_sigma * rng.normal()) as f32;
    Tensor::vector(v)
}

fn pronoun(gender: Gender, role: Role) -> Token {
    let word = match (gender, role) {
        (Gender::Female, Role::Subj) => "she",
        (Gender::Female, Role::Poss) => "her",
        (Gender::Female, Role::Obj) => "her",
        (_, Role::Subj) => "he",
        (_, Role::Poss) => "his",
        (_, Role::Obj) => "him",
        _ => "he",
    };
    tagged(word, role)
}

/// Build one templated caption: a gendered subject, one attribute clause,
/// optional possessive/object clauses, and the occupation clause only when
/// the text channel carries the planted bias. Captions are kept short so the
/// gendered tokens are a first-order part of the pooled text embedding
/// rather than drowning in attribute words.
///
/// The occupation clause plants the text-channel bias through wording: with
/// probability `(1 + strength) / 2` an own-coded occupation is phrased with
/// a subject pronoun ("she works as a nurse") and a cross-coded one with a
/// gendered noun ("this woman works as a engineer"), and vice versa. At
/// strength 0 the form is a coin flip and pronouns co-occur with every
/// occupation equally; at strength 1 the pronoun tokens co-occur only with
/// own-coded occupation words. Both forms carry the same gender label.
fn build_caption(
    rng: &mut Rng,
    gender: Gender,
    attrs: &AttributeRatings,
    occupation: Option<(OccId, f64)>,
) -> Caption {
    let w = |s: &str| Token::plain(word_id(s).expect("template word in vocabulary"));
    let mut toks: Vec<Token> = Vec::new();

    match rng.below(3) {
        0 => toks.push(pronoun(gender, Role::Subj)),
        1 => {
            toks.push(w("this"));
            toks.push(w(if gender == Gender::Female { "lady" } else { "gentleman" }));
        }
        _ => {
            toks.push(w("this"));
            toks.push(w(if gender == Gender::Female { "woman" } else { "man" }));
        }
    }
    toks.push(w("has"));

    match rng.below(3) {
        0 => {
            if attrs.beard >= 1 {
                toks.extend([w("a"), w("beard")]);
            } else {
                toks.extend([w("no"), w("beard")]);
            }
        }
        1 => {
            if attrs.bangs >= 2 {
                toks.push(w("bangs"));
            } else {
                toks.extend([w("no"), w("bangs")]);
            }
        }
        _ => {
            if attrs.smiling >= 2 {
                toks.extend([w("a"), w("smile")]);
            } else {
                toks.extend([w("no"), w("smile")]);
            }
        }
    }

    if rng.chance(0.35) {
        toks.extend([
            w("and"),
            pronoun(gender, Role::Poss),
            w("hair"),
            w("looks"),
            w(if attrs.age <= 2 { "young" } else { "old" }),
        ]);
    }
    if rng.chance(0.15) {
        toks.extend([
            w("and"),
            w("the"),
            w("camera"),
            w("looks"),
            w("at"),
            pronoun(gender, Role::Obj),
        ]);
    }
    if let Some((occ, strength)) = occupation {
        let own_coded = occ.female_coded() == (gender == Gender::Female);
        let pronoun_form = if own_coded {
            rng.chance((1.0 + strength) / 2.0)
        } else {
            rng.chance((1.0 - strength) / 2.0)
        };
        toks.push(w("and"));
        if pronoun_form {
            toks.push(pronoun(gender, Role::Subj));
        } else {
            toks.push(w("the"));
            toks.push(w(if gender == Gender::Female { "woman" } else { "man" }));
        }
        toks.extend([w("works"), w("as"), w("a"), Token::plain(occ.word())]);
    }
    debug_assert!(toks.len() <= MAX_TOKENS);
    Caption::new(toks)
}

fn sample_occupation(rng: &mut Rng, gender: Gender, correlation: f64) -> OccId {
    // Full-strength correlation for males, half-strength for females: at 1.0
    // no male ever takes a female-coded occupation, while some females still
    // take male-coded ones. See GenSpec docs.
    let p_own = match gender {
        Gender::Female => 0.5 + (correlation - 0.5) * 0.5,
        _ => correlation,
    };
    let own_coded = rng.chance(p_own);
    let female_set = (gender == Gender::Female) == own_coded;
    let base = if female_set { 4 } else { 0 };
    OccId(base + rng.below(4) as u8)
}

/// Generate a dataset: deterministic in the seed, roughly balanced genders,
/// fully annotated. Each sample draws from its own derived stream, so
/// generation is order-independent and parallelizable.
pub fn generate_dataset(spec: &GenSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let root = Rng::seeded(spec.seed);
    let mut out = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let mut rng = root.stream(i as u64);
        let gender = if rng.chance(0.5) {
            Gender::Male
        } else {
            Gender::Female
        };
        let occupation = sample_occupation(&mut rng, gender, spec.gender_occupation_correlation);
        let attrs = sample_attributes(&mut rng, gender);
        let stereotypical = annotate_stereotype(&attrs, gender)?;
        let gender_signal = if spec.bias_channel.in_vision() {
            spec.bias_strength
        } else {
            BASELINE_GENDER_SIGNAL
        };
        let caption_occ = spec
            .bias_channel
            .in_text()
            .then_some((occupation, spec.bias_strength));
        let caption = build_caption(&mut rng, gender, &attrs, caption_occ);
        let features = image_features(
            &attrs,
            gender,
            gender_signal,
            Some(occupation),
            spec.noise_sigma,
            &mut rng,
        );
        out.push(Sample {
            id: i as u64,
            attributes: attrs,
            occupation,
            gender,
            stereotypical,
            caption,
            image_features: features,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_fits_embedding_table() {
        assert!(VOCAB.len() <= VOCAB_SIZE);
        // No duplicates.
        for (i, a) in VOCAB.iter().enumerate() {
            for b in &VOCAB[i + 1..] {
                assert_ne!(a, b);
            }
        }
    }

    #[test]
    fn gender_labeler_matches_published_examples() {
        assert_eq!(
            annotate_gender("This gentleman looks serious with no smile on his face."),
            Gender::Male
        );
        assert_eq!(annotate_gender("She has no smile and no bangs."), Gender::Female);
        assert_eq!(annotate_gender("This person looks very old."), Gender::Unknown);
        assert_eq!(
            annotate_gender(
                "This man in his eighties has no mustache, no fringe, and no smile. \
                 He is not wearing any eyeglasses."
            ),
            Gender::Male
        );
    }

    #[test]
    fn gender_labeler_earliest_match_wins() {
        assert_eq!(annotate_gender("The lady talks to him."), Gender::Female);
        assert_eq!(annotate_gender("He talks to the lady."), Gender::Male);
    }

    #[test]
    fn stereotype_thresholds() {
        let plain = AttributeRatings {
            bangs: 0,
            eyeglasses: 0,
            beard: 0,
            smiling: 0,
            age: 1,
        };
        // Female with no smile and no bangs is anti-stereotypical.
        assert!(!annotate_stereotype(&plain, Gender::Female).unwrap());
        let bearded = AttributeRatings {
            beard: 3,
            ..plain
        };
        assert!(annotate_stereotype(&bearded, Gender::Male).unwrap());
        let bangsy = AttributeRatings {
            bangs: 4,
            ..plain
        };
        assert!(!annotate_stereotype(&bangsy, Gender::Male).unwrap());
        assert!(annotate_stereotype(&bangsy, Gender::Female).unwrap());
        assert!(annotate_stereotype(&plain, Gender::Unknown).is_err());
    }

    #[test]
    fn stereotype_rules_are_overridable() {
        let attrs = AttributeRatings {
            bangs: 0,
            eyeglasses: 0,
            beard: 1,
            smiling: 0,
            age: 0,
        };
        let strict = StereotypeRules {
            male_min_beard: 3,
            ..Default::default()
        };
        assert!(annotate_stereotype(&attrs, Gender::Male).unwrap());
        assert!(!annotate_stereotype_with(&strict, &attrs, Gender::Male).unwrap());
    }

    #[test]
    fn swap_published_example() {
        let c = Caption::from_text("He has no bangs at all.").unwrap();
        let swapped = cda_swap(&c).unwrap();
        assert_eq!(swapped.text(), "She has no bangs at all.");
    }

    #[test]
    fn swap_is_identity_on_neutral_text() {
        let c = Caption::from_text("The person looks very old.").unwrap();
        assert_eq!(cda_swap(&c).unwrap(), c);
    }

    #[test]
    fn swap_untagged_her_is_a_tagging_error() {
        let c = Caption::new(alloc::vec![Token::plain(word_id("her").unwrap())]);
        assert!(matches!(cda_swap(&c), Err(Error::Tagging(_))));
    }

    #[test]
    fn possessive_and_object_her_swap_correctly() {
        let c = Caption::from_text("She has bangs and her hair looks young.").unwrap();
        let swapped = cda_swap(&c).unwrap();
        assert_eq!(swapped.text(), "He has bangs and his hair looks young.");
        assert_eq!(cda_swap(&swapped).unwrap(), c);

        let c = Caption::from_text("The camera looks at her.").unwrap();
        let swapped = cda_swap(&c).unwrap();
        assert_eq!(swapped.text(), "The camera looks at him.");
        assert_eq!(cda_swap(&swapped).unwrap(), c);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = GenSpec {
            n_samples: 100,
            seed: 1,
            bias_channel: BiasChannel::Vision,
            bias_strength: 0.9,
            gender_occupation_correlation: 0.9,
            noise_sigma: 0.05,
        };
        let a = generate_dataset(&spec).unwrap();
        let b = generate_dataset(&spec).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.caption, y.caption);
            assert!(x.image_features.bitwise_eq(&y.image_features));
        }
    }

    #[test]
    fn out_of_range_knobs_are_rejected() {
        let base = GenSpec {
            n_samples: 10,
            seed: 1,
            bias_channel: BiasChannel::Vision,
            bias_strength: 0.5,
            gender_occupation_correlation: 0.5,
            noise_sigma: 0.05,
        };
        let mut bad = base.clone();
        bad.bias_strength = 1.5;
        assert!(matches!(bad.validate(), Err(Error::Precondition(_))));
        let mut bad = base.clone();
        bad.gender_occupation_correlation = -0.1;
        assert!(matches!(bad.validate(), Err(Error::Precondition(_))));
        let mut bad = base;
        bad.noise_sigma = -1.0;
        assert!(matches!(bad.validate(), Err(Error::Precondition(_))));
    }

    #[test]
    fn zero_samples_is_an_empty_spec_error() {
        let spec = GenSpec {
            n_samples: 0,
            seed: 1,
            bias_channel: BiasChannel::None,
            bias_strength: 0.0,
            gender_occupation_correlation: 0.5,
            noise_sigma: 0.0,
        };
        assert!(matches!(generate_dataset(&spec), Err(Error::EmptyData(_))));
    }

    #[test]
    fn occupation_independent_of_gender_at_half_correlation() {
        // Chi-squared independence over the 2x8 contingency table; the
        // critical value for p = 0.01 at 7 degrees of freedom is 18.475.
        let spec = GenSpec {
            n_samples: 4000,
            seed: 11,
            bias_channel: BiasChannel::None,
            bias_strength: 0.0,
            gender_occupation_correlation: 0.5,
            noise_sigma: 0.05,
        };
        let data = generate_dataset(&spec).unwrap();
        let mut counts = [[0f64; 8]; 2];
        for s in &data {
            let g = usize::from(s.gender == Gender::Female);
            counts[g][s.occupation.0 as usize] += 1.0;
        }
        let row: Vec<f64> = counts.iter().map(|r| r.iter().sum()).collect();
        let col: Vec<f64> = (0..8).map(|j| counts[0][j] + counts[1][j]).collect();
        let total: f64 = row.iter().sum();
        let mut chi2 = 0.0;
        for (g, row_total) in row.iter().enumerate() {
            for (j, col_total) in col.iter().enumerate() {
                let expected = row_total * col_total / total;
                let diff = counts[g][j] - expected;
                chi2 += diff * diff / expected;
            }
        }
        assert!(chi2 < 18.475, "chi2 = {chi2}");
    }

    #[test]
    fn full_correlation_makes_every_nurse_female() {
        let spec = GenSpec {
            n_samples: 2000,
            seed: 3,
            bias_channel: BiasChannel::Vision,
            bias_strength: 0.9,
            gender_occupation_correlation: 1.0,
            noise_sigma: 0.05,
        };
        let data = generate_dataset(&spec).unwrap();
        let nurse = OccId::from_name("nurse").unwrap();
        let nurses: Vec<_> = data.iter().filter(|s| s.occupation == nurse).collect();
        assert!(!nurses.is_empty());
        assert!(nurses.iter().all(|s| s.gender == Gender::Female));
    }

    #[test]
    fn gender_ratio_near_half_across_seeds() {
        for seed in 0..10u64 {
            let spec = GenSpec {
                n_samples: 600,
                seed,
                bias_channel: BiasChannel::None,
                bias_strength: 0.0,
                gender_occupation_correlation: 0.5,
                noise_sigma: 0.05,
            };
            let data = generate_dataset(&spec).unwrap();
            let males = data.iter().filter(|s| s.gender == Gender::Male).count() as f64;
            let ratio = males / data.len() as f64;
            assert!((ratio - 0.5).abs() < 0.05, "seed {seed}: ratio {ratio}");
        }
    }

    #[test]
    fn generated_annotations_are_self_consistent() {
        let spec = GenSpec {
            n_samples: 300,
            seed: 5,
            bias_channel: BiasChannel::Text,
            bias_strength: 0.8,
            gender_occupation_correlation: 0.9,
            noise_sigma: 0.05,
        };
        for s in generate_dataset(&spec).unwrap() {
            assert_eq!(annotate_gender(&s.caption.text()), s.gender);
            assert_eq!(
                annotate_stereotype(&s.attributes, s.gender).unwrap(),
                s.stereotypical
            );
            assert!(s.image_features.is_finite());
            assert_eq!(s.image_features.len(), IMG_DIM);
            // Caption roundtrips through its rendered text, tags included.
            assert_eq!(Caption::from_text(&s.caption.text()).unwrap(), s.caption);
        }
    }

    #[test]
    fn swapping_generated_captions_flips_the_label() {
        let spec = GenSpec {
            n_samples: 200,
            seed: 9,
            bias_channel: BiasChannel::Both,
            bias_strength: 0.7,
            gender_occupation_correlation: 0.8,
            noise_sigma: 0.05,
        };
        for s in generate_dataset(&spec).unwrap() {
            let swapped = cda_swap(&s.caption).unwrap();
            assert_eq!(annotate_gender(&swapped.text()), s.gender.opposite());
            assert_eq!(cda_swap(&swapped).unwrap(), s.caption);
        }
    }
}
