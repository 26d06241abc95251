//! Scene enrichment and pseudo-label elicitation over a chat backend.
//!
//! Enrichment runs a fixed three-question conversation per sample (objects,
//! relevance, details) and canonicalizes the answers against the object
//! lexicon. Pseudo-labeling asks, for every positive class, which numbered
//! scene descriptions support that decision, and turns the answers into a
//! per-row relevance table for the text branch.
//!
//! Both phases persist their transcript incrementally under
//! `<cache>/<sample_id>/<phase>.txt` (JSON), keyed by a hash of the prompts:
//! a rerun with unchanged prompts reuses the cached answers and makes zero
//! backend calls.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data::bag::{top_objects, Lexicon};
use crate::data::manifest::Manifest;
use crate::error::{Error, Result};
use crate::numeric::fnv1a64;
use crate::refine::PseudoCam;
use crate::vlm::backend::ChatBackend;
use crate::vlm::parse::{parse_details, parse_list, parse_row_indices};
use crate::vlm::{ChatTranscript, ChatTurn, EnrichmentResult};

/// First question of the enrichment conversation.
pub const OBJECTS_QUESTION: &str = "What objects are shown in this image?";
/// Second question; asked after the objects answer.
pub const RELEVANCE_QUESTION: &str = "Which objects among them are most matter for driving car?";
/// Third question; skipped when the relevance answer names nothing known.
pub const DETAILS_QUESTION: &str = "What are the details of each object?";

/// Builds the per-class question of the pseudo-labeling phase.
pub fn pseudo_question(class_name: &str, descriptions: &[String]) -> String {
    let mut q = String::from("Here are numbered descriptions of the scene:\n");
    for (i, d) in descriptions.iter().enumerate() {
        q.push_str(&format!("{}. {}\n", i + 1, d));
    }
    q.push_str(&format!(
        "Which descriptions support the driving decision '{class_name}'? \
         Answer with the numbers, or 'none'."
    ));
    q
}

fn hash_prompts(parts: &[&str]) -> String {
    let mut joined = String::new();
    for p in parts {
        joined.push_str(p);
        joined.push('\x1f');
    }
    format!("{:016x}", fnv1a64(joined.as_bytes()))
}

fn transcript_path(cache_dir: &Path, sample_id: &str, phase: &str) -> PathBuf {
    cache_dir.join(sample_id).join(format!("{phase}.txt"))
}

/// Appends a user question and the backend's reply to `transcript`, saving
/// it to disk after each exchange so partial progress survives a crash.
fn ask<B: ChatBackend>(
    backend: &mut B,
    transcript: &mut ChatTranscript,
    path: &Path,
    key: &str,
    question: &str,
    image: Option<&str>,
) -> Result<String> {
    let asked_at = backend.now();
    transcript.turns.push(ChatTurn {
        role: "user".into(),
        text: question.to_string(),
        image: image.map(String::from),
        timestamp: asked_at,
    });
    let answer = backend.complete(&transcript.sample_id, key, &transcript.turns)?;
    let answered_at = backend.now();
    transcript.turns.push(ChatTurn {
        role: "assistant".into(),
        text: answer.clone(),
        image: None,
        timestamp: answered_at,
    });
    transcript.save(path)?;
    Ok(answer)
}

fn cached_answers(path: &Path, phase: &str, prompt_hash: &str) -> Option<Vec<String>> {
    let transcript = ChatTranscript::load(path).ok()?;
    if transcript.phase != phase || transcript.prompt_hash != prompt_hash {
        return None;
    }
    Some(transcript.answers().into_iter().map(String::from).collect())
}

/// Canonicalizes the relevance answer: lexicon objects mentioned in it, in
/// first-mention order, restricted to `known` and deduplicated.
fn canonical_relevant(answer: &str, lexicon: &Lexicon, known: &[String]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for item in parse_list(answer) {
        for object in lexicon.match_text(&item) {
            if known.contains(&object) && !out.contains(&object) {
                out.push(object);
            }
        }
    }
    out
}

/// Runs (or replays) the enrichment conversation for one sample.
///
/// `max_objects` caps the canonical object list (most frequent first);
/// `max_descriptions` caps the detail sentences, which downstream become
/// text-branch rows.
#[allow(clippy::too_many_arguments)]
pub fn enrich_sample<B: ChatBackend>(
    backend: &mut B,
    cache_dir: &Path,
    lexicon: &Lexicon,
    sample_id: &str,
    image: Option<&str>,
    max_objects: usize,
    max_descriptions: usize,
) -> Result<EnrichmentResult> {
    let prompt_hash = hash_prompts(&[
        OBJECTS_QUESTION,
        RELEVANCE_QUESTION,
        DETAILS_QUESTION,
        image.unwrap_or(""),
    ]);
    let path = transcript_path(cache_dir, sample_id, "enrich");

    let answers = match cached_answers(&path, "enrich", &prompt_hash) {
        Some(cached) if cached.len() >= 2 => cached,
        _ => {
            let mut transcript = ChatTranscript {
                sample_id: sample_id.to_string(),
                phase: "enrich".into(),
                prompt_hash: prompt_hash.clone(),
                turns: Vec::new(),
            };
            let a1 = ask(
                backend,
                &mut transcript,
                &path,
                "q1",
                OBJECTS_QUESTION,
                image,
            )?;
            let a2 = ask(
                backend,
                &mut transcript,
                &path,
                "q2",
                RELEVANCE_QUESTION,
                None,
            )?;
            let objects = object_mentions(&a1, lexicon, max_objects);
            let relevant = canonical_relevant(&a2, lexicon, &objects);
            let mut answers = vec![a1, a2];
            if !relevant.is_empty() {
                let a3 = ask(
                    backend,
                    &mut transcript,
                    &path,
                    "q3",
                    DETAILS_QUESTION,
                    None,
                )?;
                answers.push(a3);
            }
            answers
        }
    };

    let objects = object_mentions(&answers[0], lexicon, max_objects);
    let relevant = canonical_relevant(&answers[1], lexicon, &objects);
    let descriptions = match answers.get(2) {
        Some(a3) if !relevant.is_empty() => describe(a3, max_descriptions),
        _ => Vec::new(),
    };

    Ok(EnrichmentResult {
        sample_id: sample_id.to_string(),
        objects,
        relevant,
        descriptions,
    })
}

fn object_mentions(answer: &str, lexicon: &Lexicon, max_objects: usize) -> Vec<String> {
    let items = parse_list(answer);
    top_objects(&items, lexicon, max_objects)
        .into_iter()
        .map(|(name, _count)| name)
        .collect()
}

fn describe(answer: &str, max_descriptions: usize) -> Vec<String> {
    let pairs = parse_details(answer);
    let mut out: Vec<String> = if pairs.is_empty() {
        parse_list(answer)
    } else {
        pairs
            .into_iter()
            .map(|(subject, detail)| format!("{subject}: {detail}"))
            .collect()
    };
    out.truncate(max_descriptions);
    out
}

/// Enriches every sample of a manifest. Descriptions are capped at the text
/// slot count so they always fit the feature layout.
pub fn enrich_dataset<B: ChatBackend>(
    manifest: &Manifest,
    backend: &mut B,
    cache_dir: &Path,
    lexicon: &Lexicon,
    max_objects: usize,
) -> Result<Vec<EnrichmentResult>> {
    let mut results = Vec::with_capacity(manifest.samples.len());
    for sample in &manifest.samples {
        results.push(enrich_sample(
            backend,
            cache_dir,
            lexicon,
            &sample.id,
            sample.image.as_deref(),
            max_objects,
            manifest.dims.text_slots,
        )?);
    }
    Ok(results)
}

/// A derived relevance table plus any warnings raised while deriving it.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoOutcome {
    pub cam: PseudoCam,
    pub warnings: Vec<String>,
}

/// Runs (or replays) the pseudo-labeling conversation for one sample.
///
/// One question is asked per *positive* class; columns of negative classes
/// stay zero, as do rows past the description list. Answer numbers outside
/// `1..=descriptions.len()` are reported as warnings and skipped.
pub fn pseudo_for_sample<B: ChatBackend>(
    backend: &mut B,
    cache_dir: &Path,
    sample_id: &str,
    labels: &[u8],
    class_names: &[String],
    descriptions: &[String],
    text_slots: usize,
) -> Result<PseudoOutcome> {
    if labels.len() != class_names.len() {
        return Err(Error::Shape(format!(
            "sample '{sample_id}': {} labels but {} class names",
            labels.len(),
            class_names.len()
        )));
    }
    if descriptions.len() > text_slots {
        return Err(Error::Data(format!(
            "sample '{sample_id}': {} descriptions exceed {} text slots",
            descriptions.len(),
            text_slots
        )));
    }

    let classes = class_names.len();
    let mut rows = vec![vec![0.0; classes]; text_slots];
    let positives: Vec<usize> = (0..classes).filter(|&c| labels[c] == 1).collect();

    if positives.is_empty() || descriptions.is_empty() {
        return Ok(PseudoOutcome {
            cam: PseudoCam {
                sample_id: sample_id.to_string(),
                rows,
            },
            warnings: Vec::new(),
        });
    }

    let questions: Vec<String> = positives
        .iter()
        .map(|&c| pseudo_question(&class_names[c], descriptions))
        .collect();
    let prompt_hash = {
        let refs: Vec<&str> = questions.iter().map(String::as_str).collect();
        hash_prompts(&refs)
    };
    let path = transcript_path(cache_dir, sample_id, "pseudo");

    let answers = match cached_answers(&path, "pseudo", &prompt_hash) {
        Some(cached) if cached.len() == positives.len() => cached,
        _ => {
            let mut transcript = ChatTranscript {
                sample_id: sample_id.to_string(),
                phase: "pseudo".into(),
                prompt_hash: prompt_hash.clone(),
                turns: Vec::new(),
            };
            let mut fresh = Vec::with_capacity(positives.len());
            for (&c, question) in positives.iter().zip(&questions) {
                let key = format!("pseudo-{c}");
                fresh.push(ask(backend, &mut transcript, &path, &key, question, None)?);
            }
            fresh
        }
    };

    let mut warnings = Vec::new();
    for (&c, answer) in positives.iter().zip(&answers) {
        let (selected, out_of_range) = parse_row_indices(answer, descriptions.len());
        for n in out_of_range {
            warnings.push(format!(
                "sample '{sample_id}': answer for '{}' referenced description {n} \
                 outside 1..={}; ignored",
                class_names[c],
                descriptions.len()
            ));
        }
        for idx in selected {
            rows[idx][c] = 1.0;
        }
    }

    Ok(PseudoOutcome {
        cam: PseudoCam {
            sample_id: sample_id.to_string(),
            rows,
        },
        warnings,
    })
}

/// Derives relevance tables for every sample of a manifest.
///
/// Descriptions come from `enrichments` when given (matched by sample id;
/// a missing entry is an error), otherwise from the manifest's own
/// per-sample description lists.
pub fn pseudo_dataset<B: ChatBackend>(
    manifest: &Manifest,
    backend: &mut B,
    cache_dir: &Path,
    enrichments: Option<&[EnrichmentResult]>,
) -> Result<(Vec<PseudoCam>, Vec<String>)> {
    let by_id: Option<BTreeMap<&str, &EnrichmentResult>> =
        enrichments.map(|list| list.iter().map(|e| (e.sample_id.as_str(), e)).collect());

    let mut cams = Vec::with_capacity(manifest.samples.len());
    let mut warnings = Vec::new();
    for sample in &manifest.samples {
        let descriptions: &[String] = match &by_id {
            Some(map) => {
                let found = map.get(sample.id.as_str()).ok_or_else(|| {
                    Error::Data(format!("no enrichment result for sample '{}'", sample.id))
                })?;
                &found.descriptions
            }
            None => &sample.descriptions,
        };
        let outcome = pseudo_for_sample(
            backend,
            cache_dir,
            &sample.id,
            &sample.labels,
            &manifest.classes,
            descriptions,
            manifest.dims.text_slots,
        )?;
        cams.push(outcome.cam);
        warnings.extend(outcome.warnings);
    }
    Ok((cams, warnings))
}
