//! Chat-backend commands: scene enrichment and pseudo-label derivation.

use std::path::PathBuf;

use fusedec_core::data::bag::Lexicon;
use fusedec_core::data::manifest::Manifest;
use fusedec_core::error::Result;
use fusedec_core::vlm::backend::{ChatBackend, HttpBackend, MockBackend};
use fusedec_core::vlm::enrich::{enrich_dataset, pseudo_dataset};
use fusedec_core::vlm::{ChatTurn, EnrichmentResult, RetryPolicy, VlmEndpointConfig};

use super::{read_json, write_json};

/// Backend selection shared by `enrich` and `pseudo`.
#[derive(clap::Args)]
pub struct BackendArgs {
    /// Directory of canned answers (<dir>/<sample>/<step>.txt)
    #[arg(long, value_name = "DIR", conflicts_with = "endpoint")]
    mock_dir: Option<PathBuf>,
    /// Base URL of a live chat endpoint
    #[arg(long, value_name = "URL", required_unless_present = "mock_dir")]
    endpoint: Option<String>,
    /// Model identifier sent to the live endpoint
    #[arg(long, default_value = "default")]
    model: String,
    /// Name of the environment variable holding the bearer token
    #[arg(long, default_value = "VLM_API_TOKEN", value_name = "VAR")]
    token_env: String,
    /// Request timeout in seconds
    #[arg(long, default_value_t = 60)]
    timeout: u64,
    /// Attempts per request on retryable failures
    #[arg(long, default_value_t = 3)]
    retries: u32,
}

pub enum AnyBackend {
    Mock(MockBackend),
    Http(HttpBackend),
}

impl ChatBackend for AnyBackend {
    fn complete(&mut self, sample_id: &str, key: &str, turns: &[ChatTurn]) -> Result<String> {
        match self {
            AnyBackend::Mock(b) => b.complete(sample_id, key, turns),
            AnyBackend::Http(b) => b.complete(sample_id, key, turns),
        }
    }

    fn now(&mut self) -> u64 {
        match self {
            AnyBackend::Mock(b) => b.now(),
            AnyBackend::Http(b) => b.now(),
        }
    }

    fn calls(&self) -> u64 {
        match self {
            AnyBackend::Mock(b) => b.calls(),
            AnyBackend::Http(b) => b.calls(),
        }
    }
}

impl BackendArgs {
    fn build(&self) -> Result<AnyBackend> {
        match (&self.mock_dir, &self.endpoint) {
            (Some(dir), _) => Ok(AnyBackend::Mock(MockBackend::new(dir))),
            (None, Some(url)) => {
                let cfg = VlmEndpointConfig {
                    base_url: url.clone(),
                    model: self.model.clone(),
                    token_env: self.token_env.clone(),
                    timeout_secs: self.timeout,
                    retry: RetryPolicy {
                        max_attempts: self.retries,
                        backoff_ms: 500,
                    },
                };
                Ok(AnyBackend::Http(HttpBackend::new(cfg)?))
            }
            // clap enforces one of the two, but keep the exhaustive arm.
            (None, None) => unreachable!("clap requires --mock-dir or --endpoint"),
        }
    }
}

#[derive(clap::Args)]
pub struct EnrichArgs {
    /// Manifest of samples to enrich
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Where the enrichment results are written (JSON)
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Transcript cache directory (reruns reuse it)
    #[arg(long, value_name = "DIR")]
    cache: PathBuf,
    /// Maximum canonical objects kept per sample
    #[arg(long, default_value_t = 10)]
    max_objects: usize,
    #[command(flatten)]
    backend: BackendArgs,
}

pub fn enrich(args: EnrichArgs) -> Result<()> {
    let manifest = Manifest::load(&args.manifest)?;
    let lexicon = Lexicon::builtin();
    let mut backend = args.backend.build()?;
    let results = enrich_dataset(
        &manifest,
        &mut backend,
        &args.cache,
        &lexicon,
        args.max_objects,
    )?;
    write_json(&args.out, &results)?;
    println!(
        "samples={} backend_calls={} out={}",
        results.len(),
        backend.calls(),
        args.out.display()
    );
    Ok(())
}

#[derive(clap::Args)]
pub struct PseudoArgs {
    /// Manifest of samples to label
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Where the relevance tables are written (JSON)
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Transcript cache directory (reruns reuse it)
    #[arg(long, value_name = "DIR")]
    cache: PathBuf,
    /// Take descriptions from an enrichment result file instead of the manifest
    #[arg(long, value_name = "FILE")]
    enrich: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendArgs,
}

pub fn pseudo(args: PseudoArgs) -> Result<()> {
    let manifest = Manifest::load(&args.manifest)?;
    let enrichments: Option<Vec<EnrichmentResult>> = match &args.enrich {
        Some(path) => Some(read_json(path)?),
        None => None,
    };
    let mut backend = args.backend.build()?;
    let (cams, warnings) =
        pseudo_dataset(&manifest, &mut backend, &args.cache, enrichments.as_deref())?;
    for warning in &warnings {
        eprintln!("warning: {warning}");
    }
    write_json(&args.out, &cams)?;
    println!(
        "samples={} backend_calls={} warnings={} out={}",
        cams.len(),
        backend.calls(),
        warnings.len(),
        args.out.display()
    );
    Ok(())
}
