//! Probe construction and bias metrics.
//!
//! Probes come in two kinds. An OO probe pairs a single person's image with
//! an occupational cue and two captions differing only at the gendered
//! tokens ("The nurse and his|her camera"). An OP probe blends the
//! occupation holder with a second person acting as a distractor -- the
//! image is the mean of the two feature vectors, so the holder's gender
//! signal can be diluted or cancelled outright, which is what makes OP
//! markedly harder than OO.
//!
//! Resolution accuracy is reported per gender (`ra_m`, `ra_f`), averaged
//! (`ra_avg = (ra_m + ra_f) / 2`), and the gender gap is their absolute
//! difference (`gg = |ra_m - ra_f|`). All metric arithmetic is 64-bit.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::dataset_fmt::Scanner;
use crate::error::{Error, Result};
use crate::forge::{
    cda_swap, image_features, sample_attributes, word_id, Caption, Gender, OccId, Role, Token,
    BASELINE_GENDER_SIGNAL,
};
use crate::models::{gender_logits, similarity_score, Model};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Noise level applied to probe images; probes are otherwise bias-free.
pub const PROBE_NOISE_SIGMA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProbeKind {
    OO,
    OP,
}

impl ProbeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProbeKind::OO => "OO",
            ProbeKind::OP => "OP",
        }
    }

    pub fn parse(s: &str) -> Result<ProbeKind> {
        match s {
            "OO" => Ok(ProbeKind::OO),
            "OP" => Ok(ProbeKind::OP),
            other => Err(Error::Parse(format!("unknown probe kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub id: u64,
    pub kind: ProbeKind,
    pub image: Tensor,
    pub caption_male: Caption,
    pub caption_female: Caption,
    pub true_gender: Gender,
    pub participant_gender: Option<Gender>,
    pub occupation: OccId,
}

fn plain(word: &str) -> Token {
    Token::plain(word_id(word).expect("probe template word in vocabulary"))
}

fn oo_caption_male(occ: OccId) -> Caption {
    Caption::new(alloc::vec![
        plain("the"),
        Token::plain(occ.word()),
        plain("and"),
        Token {
            word: word_id("his").expect("vocabulary has `his`"),
            role: Role::Poss,
        },
        plain("camera"),
    ])
}

fn op_caption_male(occ: OccId) -> Caption {
    Caption::new(alloc::vec![
        plain("the"),
        Token::plain(occ.word()),
        plain("talks"),
        plain("to"),
        plain("the"),
        plain("person"),
        plain("and"),
        Token {
            word: word_id("he").expect("vocabulary has `he`"),
            role: Role::Subj,
        },
        plain("is"),
        plain("serious"),
    ])
}

/// Build the balanced probe grid: for each kind, every occupation crosses
/// both holder genders (and both participant genders for OP) `n_per_cell`
/// times. Probe persons are drawn at zero planted bias so the probes cannot
/// leak training bias; the image still carries the baseline gender signal.
pub fn build_probes(seed: u64, n_per_cell: usize) -> Result<Vec<Probe>> {
    if n_per_cell == 0 {
        return Err(Error::Precondition("n_per_cell must be >= 1".to_string()));
    }
    let root = Rng::seeded(seed);
    let mut probes = Vec::new();
    let mut id: u64 = 0;

    for occ in OccId::all() {
        for gender in [Gender::Male, Gender::Female] {
            for _ in 0..n_per_cell {
                let mut rng = root.stream(id);
                let attrs = sample_attributes(&mut rng, gender);
                let image = image_features(
                    &attrs,
                    gender,
                    BASELINE_GENDER_SIGNAL,
                    Some(occ),
                    PROBE_NOISE_SIGMA,
                    &mut rng,
                );
                let caption_male = oo_caption_male(occ);
                let caption_female = cda_swap(&caption_male)?;
                probes.push(Probe {
                    id,
                    kind: ProbeKind::OO,
                    image,
                    caption_male,
                    caption_female,
                    true_gender: gender,
                    participant_gender: None,
                    occupation: occ,
                });
                id += 1;
            }
        }
    }
    for occ in OccId::all() {
        for gender in [Gender::Male, Gender::Female] {
            for participant in [Gender::Male, Gender::Female] {
                for _ in 0..n_per_cell {
                    let mut rng = root.stream(id);
                    let holder_attrs = sample_attributes(&mut rng, gender);
                    let holder = image_features(
                        &holder_attrs,
                        gender,
                        BASELINE_GENDER_SIGNAL,
                        Some(occ),
                        PROBE_NOISE_SIGMA,
                        &mut rng,
                    );
                    let participant_attrs = sample_attributes(&mut rng, participant);
                    let other = image_features(
                        &participant_attrs,
                        participant,
                        BASELINE_GENDER_SIGNAL,
                        None,
                        PROBE_NOISE_SIGMA,
                        &mut rng,
                    );
                    let blended: Vec<f32> = holder
                        .data()
                        .iter()
                        .zip(other.data().iter())
                        .map(|(a, b)| (((*a as f64) + (*b as f64)) / 2.0) as f32)
                        .collect();
                    let caption_male = op_caption_male(occ);
                    let caption_female = cda_swap(&caption_male)?;
                    probes.push(Probe {
                        id,
                        kind: ProbeKind::OP,
                        image: Tensor::vector(blended),
                        caption_male,
                        caption_female,
                        true_gender: gender,
                        participant_gender: Some(participant),
                        occupation: occ,
                    });
                    id += 1;
                }
            }
        }
    }
    Ok(probes)
}

/// Resolve one probe to a predicted gender. The dual encoder compares the
/// matching scores of the two captions; the caption scorer compares its
/// pronoun logits. Exact ties resolve to male (fixed, documented rule).
pub fn resolve_probe(model: &Model, probe: &Probe) -> Result<Gender> {
    match model {
        Model::Dual(m) => {
            let sm = similarity_score(m, &probe.image, &probe.caption_male.word_ids())?;
            let sf = similarity_score(m, &probe.image, &probe.caption_female.word_ids())?;
            Ok(if sm >= sf { Gender::Male } else { Gender::Female })
        }
        Model::Captioner(m) => {
            let (lm, lf) = gender_logits(m, &probe.image)?;
            Ok(if lm >= lf { Gender::Male } else { Gender::Female })
        }
    }
}

/// One metrics cell: per-gender resolution accuracy, their mean, and the gap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsCell {
    pub ra_m: f64,
    pub ra_f: f64,
    pub ra_avg: f64,
    pub gg: f64,
    pub n_m: usize,
    pub n_f: usize,
}

impl MetricsCell {
    pub fn from_counts(
        correct_m: usize,
        n_m: usize,
        correct_f: usize,
        n_f: usize,
    ) -> Result<MetricsCell> {
        if n_m == 0 || n_f == 0 {
            return Err(Error::UndefinedMetric(
                "both genders must be represented".to_string(),
            ));
        }
        let ra_m = correct_m as f64 / n_m as f64;
        let ra_f = correct_f as f64 / n_f as f64;
        Ok(MetricsCell {
            ra_m,
            ra_f,
            ra_avg: (ra_m + ra_f) / 2.0,
            gg: crate::math::abs(ra_m - ra_f),
            n_m,
            n_f,
        })
    }
}

/// Aggregate predictions over a probe slice (any mix of kinds) into one cell.
pub fn compute_metrics(predictions: &[Gender], probes: &[Probe]) -> Result<MetricsCell> {
    if predictions.len() != probes.len() {
        return Err(Error::Consistency(format!(
            "{} predictions for {} probes",
            predictions.len(),
            probes.len()
        )));
    }
    let mut correct_m = 0;
    let mut n_m = 0;
    let mut correct_f = 0;
    let mut n_f = 0;
    for (pred, probe) in predictions.iter().zip(probes.iter()) {
        match probe.true_gender {
            Gender::Male => {
                n_m += 1;
                if *pred == Gender::Male {
                    correct_m += 1;
                }
            }
            Gender::Female => {
                n_f += 1;
                if *pred == Gender::Female {
                    correct_f += 1;
                }
            }
            Gender::Unknown => {
                return Err(Error::Precondition(
                    "probe with unknown true gender".to_string(),
                ))
            }
        }
    }
    MetricsCell::from_counts(correct_m, n_m, correct_f, n_f)
}

/// Per-kind evaluation report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub oo: MetricsCell,
    pub op: MetricsCell,
}

impl EvalReport {
    pub fn cell(&self, kind: ProbeKind) -> &MetricsCell {
        match kind {
            ProbeKind::OO => &self.oo,
            ProbeKind::OP => &self.op,
        }
    }
}

/// Resolve every probe (in id order) and aggregate per kind. Evaluation
/// never mutates the model and is bitwise deterministic.
pub fn evaluate_model(model: &Model, probes: &[Probe]) -> Result<EvalReport> {
    let mut order: Vec<usize> = (0..probes.len()).collect();
    order.sort_by_key(|&i| probes[i].id);

    let mut oo_preds = Vec::new();
    let mut oo_probes = Vec::new();
    let mut op_preds = Vec::new();
    let mut op_probes = Vec::new();
    for i in order {
        let probe = &probes[i];
        let pred = resolve_probe(model, probe)?;
        match probe.kind {
            ProbeKind::OO => {
                oo_preds.push(pred);
                oo_probes.push(probe.clone());
            }
            ProbeKind::OP => {
                op_preds.push(pred);
                op_probes.push(probe.clone());
            }
        }
    }
    if oo_probes.is_empty() || op_probes.is_empty() {
        return Err(Error::Precondition(
            "probes must cover both kinds".to_string(),
        ));
    }
    Ok(EvalReport {
        oo: compute_metrics(&oo_preds, &oo_probes)?,
        op: compute_metrics(&op_preds, &op_probes)?,
    })
}

/// One line of a report file.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub setting: String,
    pub method: String,
    pub kind: ProbeKind,
    pub cell: MetricsCell,
}

pub fn encode_report_row(row: &ReportRow) -> String {
    format!(
        "{{\"setting\":\"{}\",\"method\":\"{}\",\"kind\":\"{}\",\"ra_m\":{:.4},\"ra_f\":{:.4},\"ra_avg\":{:.4},\"gg\":{:.4},\"n_m\":{},\"n_f\":{}}}",
        row.setting,
        row.method,
        row.kind.as_str(),
        row.cell.ra_m,
        row.cell.ra_f,
        row.cell.ra_avg,
        row.cell.gg,
        row.cell.n_m,
        row.cell.n_f
    )
}

pub fn parse_report_row(line: &str) -> Result<ReportRow> {
    let mut sc = Scanner::new(line.trim_end());
    sc.expect("{\"setting\":")?;
    let setting = sc.parse_string()?;
    sc.expect(",\"method\":")?;
    let method = sc.parse_string()?;
    sc.expect(",\"kind\":")?;
    let kind = ProbeKind::parse(&sc.parse_string()?)?;
    sc.expect(",\"ra_m\":")?;
    let ra_m = parse_f64(&mut sc)?;
    sc.expect(",\"ra_f\":")?;
    let ra_f = parse_f64(&mut sc)?;
    sc.expect(",\"ra_avg\":")?;
    let ra_avg = parse_f64(&mut sc)?;
    sc.expect(",\"gg\":")?;
    let gg = parse_f64(&mut sc)?;
    sc.expect(",\"n_m\":")?;
    let n_m = sc.parse_u64()? as usize;
    sc.expect(",\"n_f\":")?;
    let n_f = sc.parse_u64()? as usize;
    sc.expect("}")?;
    sc.done()?;
    Ok(ReportRow {
        setting,
        method,
        kind,
        cell: MetricsCell {
            ra_m,
            ra_f,
            ra_avg,
            gg,
            n_m,
            n_f,
        },
    })
}

fn parse_f64(sc: &mut Scanner) -> Result<f64> {
    let tok = sc.take_until(&[',', '}', ']']);
    tok.parse::<f64>()
        .map_err(|_| Error::Parse(format!("expected float, got `{tok}`")))
}
