//! Run configuration: one hierarchical TOML file drives every stage.
//!
//! Shipped defaults encode the reference protocol (200-user cohort with
//! 100 to 200 interactions each, 60:40 temporal split, 10-interaction
//! distillation batches, 2000-word cap, top-1 same-user retrieval at
//! threshold 0.0, 4 personas, 4-token decode at temperature 0.3), so a
//! config only has to name its input files and backends. String values
//! may reference environment variables as `${NAME}`; interpolation runs
//! before deserialization and a missing variable is a config error.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::errors::CliError;
use uasim_core::corpus::CorpusFormat;
use uasim_core::datasets::Hyperparams;
use uasim_core::gateway::{BackendConfig, Gateway, MockRule, MockTransport};
use uasim_core::memory::{QueryMode, RetrievalConfig, RetrievalScope};
use uasim_core::prompt::{PromptVariant, DEFAULT_CHAR_BUDGET};
use uasim_core::simeval::DecodeParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusCfg,
    pub cohort: CohortCfg,
    pub split: SplitCfg,
    pub distill: DistillCfg,
    pub retrieval: RetrievalCfg,
    pub clustering: ClusteringCfg,
    pub datasets: DatasetsCfg,
    pub decode: DecodeCfg,
    pub simulate: SimulateCfg,
    pub backends: BackendsCfg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusCfg {
    pub ratings: PathBuf,
    pub movies: PathBuf,
    /// Optional JSONL with summaries, cast lists, and curated averages.
    pub supplement: Option<PathBuf>,
    /// `movielens_dat` or `csv`; omitted means sniff from the extension.
    pub format: Option<CorpusFormat>,
    /// Malformed interaction lines tolerated before the parse fails.
    pub error_budget: usize,
    pub out_root: PathBuf,
}

impl Default for CorpusCfg {
    fn default() -> Self {
        CorpusCfg {
            ratings: PathBuf::from("data/ratings.dat"),
            movies: PathBuf::from("data/movies.dat"),
            supplement: None,
            format: None,
            error_budget: 0,
            out_root: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortCfg {
    pub n_users: usize,
    pub min_interactions: usize,
    pub max_interactions: usize,
    pub seed: u64,
}

impl Default for CohortCfg {
    fn default() -> Self {
        CohortCfg {
            n_users: 200,
            min_interactions: 100,
            max_interactions: 200,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitCfg {
    pub train_fraction: f64,
}

impl Default for SplitCfg {
    fn default() -> Self {
        SplitCfg { train_fraction: 0.6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillCfg {
    /// Model tag sent with profile and rationale generations.
    pub model_tag: String,
    /// Model tag sent with embedding requests.
    pub embed_model: String,
    pub batch_cap: usize,
    pub word_cap: usize,
    pub max_regens: u32,
    pub max_tokens: u32,
    pub temperature: f64,
    pub top_k: u32,
    /// Worker threads for per-interaction enrichment.
    pub workers: usize,
}

impl Default for DistillCfg {
    fn default() -> Self {
        DistillCfg {
            model_tag: "distill-llm".into(),
            embed_model: "embedder".into(),
            batch_cap: 10,
            word_cap: 2000,
            max_regens: 3,
            max_tokens: 2048,
            temperature: 0.3,
            top_k: 50,
            workers: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalCfg {
    pub k: usize,
    pub delta: f64,
    pub scope: RetrievalScope,
    /// What gets embedded as the query: `item_only` or `user_plus_item`.
    pub query: QueryMode,
}

impl Default for RetrievalCfg {
    fn default() -> Self {
        RetrievalCfg {
            k: 1,
            delta: 0.0,
            scope: RetrievalScope::SameUser,
            query: QueryMode::UserPlusItem,
        }
    }
}

impl RetrievalCfg {
    pub fn to_core(&self) -> RetrievalConfig {
        RetrievalConfig {
            k: self.k,
            delta: self.delta,
            scope: self.scope,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusteringCfg {
    /// Fixed cluster count. Ignored when `k_range` is set.
    pub k: Option<usize>,
    /// Inclusive `[lo, hi]` candidate range for elbow selection; needs at
    /// least three candidates.
    pub k_range: Option<[usize; 2]>,
    pub seed: u64,
    pub tol: f64,
    pub max_iter: usize,
    /// Words per cluster in the vocabulary summary.
    pub top_words: usize,
}

impl Default for ClusteringCfg {
    fn default() -> Self {
        ClusteringCfg {
            k: Some(4),
            k_range: None,
            seed: 17,
            tol: 1e-6,
            max_iter: 100,
            top_words: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetsCfg {
    pub variant: PromptVariant,
    pub char_budget: usize,
    /// Base model named in the emitted trainer configs.
    pub base_model: String,
    /// Seed for the per-user subsampling of the single-adapter datasets.
    pub subsample_seed: u64,
    pub hyperparams: Hyperparams,
}

impl Default for DatasetsCfg {
    fn default() -> Self {
        DatasetsCfg {
            variant: PromptVariant::MsMl,
            char_budget: DEFAULT_CHAR_BUDGET,
            base_model: "base-slm".into(),
            subsample_seed: 17,
            hyperparams: Hyperparams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeCfg {
    pub max_tokens: u32,
    pub temperature: f64,
    pub top_k: u32,
}

impl Default for DecodeCfg {
    fn default() -> Self {
        let d = DecodeParams::default();
        DecodeCfg {
            max_tokens: d.max_tokens,
            temperature: d.temperature,
            top_k: d.top_k,
        }
    }
}

impl DecodeCfg {
    pub fn to_core(&self) -> DecodeParams {
        DecodeParams {
            max_tokens: self.max_tokens,
            temperature: self.temperature,
            top_k: self.top_k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateCfg {
    pub workers: usize,
    /// Per-persona sub-reports in evaluation output.
    pub group_by_cluster: bool,
    /// Restrict simulation to these adapter names; omitted means all.
    pub adapters: Option<Vec<String>>,
    /// One inference endpoint per fine-tuned adapter, keyed by name.
    pub endpoints: Vec<EndpointCfg>,
}

impl Default for SimulateCfg {
    fn default() -> Self {
        SimulateCfg {
            workers: 4,
            group_by_cluster: true,
            adapters: None,
            endpoints: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointCfg {
    pub name: String,
    /// Model tag sent on the wire; defaults to the adapter name.
    pub model_tag: Option<String>,
    #[serde(flatten)]
    pub backend: BackendCfg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct BackendsCfg {
    pub chat: BackendCfg,
    pub embed: BackendCfg,
}

/// A chat/embedding backend: a real HTTP endpoint or a scripted in-process
/// mock (for tests and offline dry runs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendCfg {
    Http(HttpBackendCfg),
    Mock(MockBackendCfg),
}

impl Default for BackendCfg {
    fn default() -> Self {
        BackendCfg::Http(HttpBackendCfg::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpBackendCfg {
    pub endpoint_url: String,
    /// Environment variable holding the bearer token; read per request,
    /// never written to any artifact.
    pub auth_token_env: String,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub max_concurrency: usize,
    pub cache_dir: Option<PathBuf>,
    pub embed_chunk_size: usize,
    pub request_timeout_ms: u64,
}

impl Default for HttpBackendCfg {
    fn default() -> Self {
        let base = BackendConfig::default();
        HttpBackendCfg {
            endpoint_url: String::new(),
            auth_token_env: String::new(),
            max_retries: base.max_retries,
            backoff_base_ms: base.backoff_base_ms,
            max_concurrency: base.max_concurrency,
            cache_dir: None,
            embed_chunk_size: base.embed_chunk_size,
            request_timeout_ms: base.request_timeout_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockBackendCfg {
    pub embed_dim: usize,
    pub embed_seed: u64,
    /// Reply when no rule matches.
    pub default_response: Option<String>,
    pub rules: Vec<RuleCfg>,
    pub cache_dir: Option<PathBuf>,
}

impl Default for MockBackendCfg {
    fn default() -> Self {
        MockBackendCfg {
            embed_dim: 16,
            embed_seed: 1,
            default_response: None,
            rules: Vec::new(),
            cache_dir: None,
        }
    }
}

/// One scripted reply: a regex over the joined system and user prompts,
/// and the response(s) to play. `$1`..`$9` in a response expand to capture
/// groups from the match.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuleCfg {
    pub pattern: String,
    pub response: Option<String>,
    pub responses: Vec<String>,
}

impl BackendCfg {
    /// One-line description for plans and logs. Never includes secrets.
    pub fn describe(&self) -> String {
        match self {
            BackendCfg::Http(http) => format!("http {}", http.endpoint_url),
            BackendCfg::Mock(mock) => format!(
                "mock (dim {}, {} rules)",
                mock.embed_dim,
                mock.rules.len()
            ),
        }
    }

    pub fn build_gateway(&self) -> Result<Gateway, CliError> {
        match self {
            BackendCfg::Http(http) => {
                let config = BackendConfig {
                    endpoint_url: http.endpoint_url.clone(),
                    auth_token_env_var: http.auth_token_env.clone(),
                    max_retries: http.max_retries,
                    backoff_base_ms: http.backoff_base_ms,
                    max_concurrency: http.max_concurrency,
                    cache_dir: http.cache_dir.clone(),
                    embed_chunk_size: http.embed_chunk_size,
                    request_timeout_ms: http.request_timeout_ms,
                };
                let transport = uasim_core::gateway::HttpTransport::new(&config)?;
                Ok(Gateway::new(config, std::sync::Arc::new(transport))?)
            }
            BackendCfg::Mock(mock) => {
                let rules: Vec<MockRule> = mock
                    .rules
                    .iter()
                    .map(|rule| MockRule {
                        pattern: rule.pattern.clone(),
                        responses: rule
                            .response
                            .iter()
                            .chain(&rule.responses)
                            .cloned()
                            .collect(),
                    })
                    .collect();
                let mut transport = MockTransport::new(mock.embed_dim, mock.embed_seed)
                    .with_rules(&rules)
                    .map_err(|e| CliError::Config(format!("bad mock rule pattern: {e}")))?;
                if let Some(default) = &mock.default_response {
                    transport = transport.with_default(default);
                }
                let config = BackendConfig {
                    endpoint_url: "mock://backend".into(),
                    backoff_base_ms: 0,
                    cache_dir: mock.cache_dir.clone(),
                    ..BackendConfig::default()
                };
                Ok(Gateway::new(config, std::sync::Arc::new(transport))?)
            }
        }
    }
}

/// Loads, interpolates, deserializes, and validates a config file.
pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut value: toml::Value = text
        .parse()
        .map_err(|e| CliError::Config(format!("invalid TOML in {}: {e}", path.display())))?;
    interpolate_env(&mut value)?;
    let config: RunConfig = value
        .try_into()
        .map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}

/// Replaces `${NAME}` in every string value with the named environment
/// variable. There is no escape syntax; a literal `${` cannot appear in a
/// config string.
fn interpolate_env(value: &mut toml::Value) -> Result<(), CliError> {
    match value {
        toml::Value::String(s) => {
            *s = expand_vars(s)?;
        }
        toml::Value::Array(items) => {
            for item in items {
                interpolate_env(item)?;
            }
        }
        toml::Value::Table(table) => {
            for (_, item) in table.iter_mut() {
                interpolate_env(item)?;
            }
        }
        _ => {}
    }
    Ok(())
}

fn expand_vars(input: &str) -> Result<String, CliError> {
    let mut out = String::with_capacity(input.len());
    let mut rest = input;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after.find('}').ok_or_else(|| {
            CliError::Config(format!("unterminated ${{...}} reference in \"{input}\""))
        })?;
        let name = &after[..end];
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(CliError::Config(format!(
                "invalid environment variable name \"{name}\" in \"{input}\""
            )));
        }
        let value = std::env::var(name).map_err(|_| {
            CliError::Config(format!("environment variable {name} is not set (referenced in config)"))
        })?;
        out.push_str(&value);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let fail = |msg: String| Err(CliError::Config(msg));
        if self.cohort.n_users == 0 {
            return fail("cohort.n_users must be >= 1".into());
        }
        if self.cohort.min_interactions == 0
            || self.cohort.min_interactions > self.cohort.max_interactions
        {
            return fail(format!(
                "cohort interaction bounds [{}, {}] are invalid",
                self.cohort.min_interactions, self.cohort.max_interactions
            ));
        }
        if !(self.split.train_fraction > 0.0 && self.split.train_fraction < 1.0) {
            return fail(format!(
                "split.train_fraction must be in (0, 1), got {}",
                self.split.train_fraction
            ));
        }
        if self.distill.batch_cap == 0 {
            return fail("distill.batch_cap must be >= 1".into());
        }
        if self.distill.workers == 0 || self.simulate.workers == 0 {
            return fail("worker counts must be >= 1".into());
        }
        if self.retrieval.k == 0 {
            return fail("retrieval.k must be >= 1".into());
        }
        match (self.clustering.k, self.clustering.k_range) {
            (_, Some([lo, hi])) => {
                if lo < 1 || hi < lo || hi - lo + 1 < 3 {
                    return fail(format!(
                        "clustering.k_range [{lo}, {hi}] needs at least 3 ascending candidates"
                    ));
                }
            }
            (Some(0), None) => return fail("clustering.k must be >= 1".into()),
            (None, None) => {
                return fail("set clustering.k or clustering.k_range".into());
            }
            _ => {}
        }
        if self.datasets.char_budget == 0 {
            return fail("datasets.char_budget must be >= 1".into());
        }
        if self.decode.max_tokens == 0 {
            return fail("decode.max_tokens must be >= 1".into());
        }
        let mut names: Vec<&str> = self.simulate.endpoints.iter().map(|e| e.name.as_str()).collect();
        names.sort_unstable();
        if let Some(dup) = names.windows(2).find(|w| w[0] == w[1]) {
            return fail(format!("duplicate simulate endpoint name \"{}\"", dup[0]));
        }
        Ok(())
    }

    /// Interaction-log format: explicit setting, else extension sniff
    /// (`.dat` means the `::`-separated layout).
    pub fn corpus_format(&self) -> CorpusFormat {
        self.corpus.format.unwrap_or_else(|| {
            match self.corpus.ratings.extension().and_then(|e| e.to_str()) {
                Some("dat") => CorpusFormat::MovielensDat,
                _ => CorpusFormat::Csv,
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_encode_the_reference_protocol() {
        let config = RunConfig::default();
        assert_eq!(config.cohort.n_users, 200);
        assert_eq!(
            (config.cohort.min_interactions, config.cohort.max_interactions),
            (100, 200)
        );
        assert_eq!(config.split.train_fraction, 0.6);
        assert_eq!(config.distill.batch_cap, 10);
        assert_eq!(config.distill.word_cap, 2000);
        assert_eq!(config.distill.max_regens, 3);
        assert_eq!(config.retrieval.k, 1);
        assert_eq!(config.retrieval.delta, 0.0);
        assert_eq!(config.retrieval.scope, RetrievalScope::SameUser);
        assert_eq!(config.clustering.k, Some(4));
        assert_eq!(config.decode.max_tokens, 4);
        assert_eq!(config.decode.temperature, 0.3);
        assert_eq!(config.decode.top_k, 50);
        assert_eq!(config.datasets.char_budget, DEFAULT_CHAR_BUDGET);
        assert_eq!(config.datasets.hyperparams, Hyperparams::default());
        config.validate().unwrap();
    }

    #[test]
    fn env_interpolation_expands_and_reports_missing() {
        std::env::set_var("UASIM_TEST_TOKEN_DIR", "/secrets");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "[corpus]\nratings = \"${UASIM_TEST_TOKEN_DIR}/ratings.dat\"\n",
        )
        .unwrap();
        let config = load_config(&path).unwrap();
        assert_eq!(config.corpus.ratings, PathBuf::from("/secrets/ratings.dat"));

        std::fs::write(&path, "[corpus]\nratings = \"${UASIM_TEST_UNSET_VAR}/r\"\n").unwrap();
        let err = load_config(&path).unwrap_err();
        assert!(err.to_string().contains("UASIM_TEST_UNSET_VAR"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[cohort]\nn_user = 10\n").unwrap();
        let err = load_config(&path).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("n_user"), "{err}");
    }

    #[test]
    fn mock_backend_parses_with_rules() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            r#"
[backends.chat]
kind = "mock"
embed_dim = 8
default_response = "3"

[[backends.chat.rules]]
pattern = "RATING:"
response = "4"

[backends.embed]
kind = "mock"

[[simulate.endpoints]]
name = "persona-0"
kind = "mock"
default_response = "3"
"#,
        )
        .unwrap();
        let config = load_config(&path).unwrap();
        match &config.backends.chat {
            BackendCfg::Mock(mock) => {
                assert_eq!(mock.embed_dim, 8);
                assert_eq!(mock.rules.len(), 1);
            }
            other => panic!("expected mock, got {other:?}"),
        }
        assert_eq!(config.simulate.endpoints[0].name, "persona-0");
        config.backends.chat.build_gateway().unwrap();
    }

    #[test]
    fn format_sniffing_follows_extension() {
        let mut config = RunConfig::default();
        assert_eq!(config.corpus_format(), CorpusFormat::MovielensDat);
        config.corpus.ratings = PathBuf::from("ratings.csv");
        assert_eq!(config.corpus_format(), CorpusFormat::Csv);
        config.corpus.format = Some(CorpusFormat::MovielensDat);
        assert_eq!(config.corpus_format(), CorpusFormat::MovielensDat);
    }
}
