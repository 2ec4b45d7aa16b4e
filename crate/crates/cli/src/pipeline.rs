//! The pipeline stages. Each stage reads its upstream artifacts from the
//! work directory, writes its own directory and a manifest, and never
//! touches another stage's files.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use semrec::corpus::{
    self, read_interactions_jsonl, split_leave_one_out, write_interactions_jsonl, Catalog,
    SplitSet, UserSequence,
};
use semrec::embed::{Embedding, EmbeddingProvider, EmbeddingTable, HashingEmbedder};
use semrec::eval::{self, format_comparison, MetricsReport};
use semrec::fusion::{AttentionParams, FusedUserVector, UserReviews, MAX_REVIEWS};
use semrec::indexer::{assign_nid, assign_oid, assign_pid, IndexAssignment, IndexMode};
use semrec::prompts::{
    self, build_corpora, next_item_input, write_corpus_jsonl, CandidateSet, ChatSummarizer,
    ExtractiveSummarizer, MixtureConfig, PromptInstance, RatedItem, SkipReason, Summarizer,
    SummaryCache, TaskKind, UserContext, MAX_HISTORY,
};
use semrec::rank::{
    verbalize_rank, write_candidates_tsv, write_results_jsonl, AdversarialScorer, CoocRetriever,
    FileRetriever, FileScorer, OracleScorer, OverlapScorer, RandomScorer, RankingResult, Retriever,
    Scorer, ScoringContext,
};
use semrec::rqvae::{
    train, train_joint, Checkpoint, RqvaeConfig, RqvaeModel, TrainConfig, TrainError,
};
use serde::{Deserialize, Serialize};

use crate::config::{EmbedProvider, PipelineConfig, RetrieverKind, ScorerKind, SummaryProvider};
use crate::error::{CliError, CliResult};
use crate::manifest::{sha256_file, Manifest};
use crate::transport::HttpTransport;

pub const INTERACTIONS_FILE: &str = "interactions.jsonl";
pub const CATALOG_FILE: &str = "catalog.tsv";
pub const STATS_FILE: &str = "stats.json";
pub const REVIEW_VECTORS_FILE: &str = "reviews.tsv";
pub const ID_VECTORS_FILE: &str = "ids.tsv";
pub const ASSIGNMENT_FILE: &str = "assignment.tsv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const FUSED_FILE: &str = "fused.tsv";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const PROMPT_REPORT_FILE: &str = "report.json";
pub const CANDIDATES_FILE: &str = "candidates.tsv";
pub const RESULTS_FILE: &str = "results.jsonl";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_JSONL: &str = "metrics.jsonl";
pub const METRICS_TABLE: &str = "metrics.txt";
pub const ABLATION_FILE: &str = "ablation.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Prepare,
    Embed,
    TrainIndex,
    GenPrompts,
    Rank,
    Eval,
}

impl Stage {
    pub fn command(&self) -> &'static str {
        match self {
            Stage::Prepare => "prepare",
            Stage::Embed => "embed",
            Stage::TrainIndex => "train-index",
            Stage::GenPrompts => "gen-prompts",
            Stage::Rank => "rank",
            Stage::Eval => "eval",
        }
    }

    fn per_mode(&self) -> bool {
        !matches!(self, Stage::Prepare | Stage::Embed)
    }

    fn dir_name(&self) -> &'static str {
        match self {
            Stage::Prepare => "prepare",
            Stage::Embed => "embed",
            Stage::TrainIndex => "index",
            Stage::GenPrompts => "prompts",
            Stage::Rank => "rank",
            Stage::Eval => "eval",
        }
    }
}

/// Dataset counts after filtering, plus what ingestion skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub avg_length: f64,
    pub density: f64,
    pub users_before_filter: usize,
    pub interactions_before_filter: usize,
    pub malformed_reviews: usize,
    pub malformed_metadata: usize,
    pub untitled_dropped: usize,
    pub too_short_to_split: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptReport {
    pub available: BTreeMap<TaskKind, usize>,
    pub skipped: BTreeMap<String, usize>,
    pub requested: BTreeMap<TaskKind, usize>,
    pub taken: BTreeMap<TaskKind, usize>,
}

/// Filtered sequences with their split and titles.
pub struct Prepared {
    pub sequences: Vec<UserSequence>,
    pub catalog: Catalog,
    pub split: SplitSet,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Core(semrec::Error::io(path, e))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> CliResult<()> {
    w.flush().map_err(io_err(path))
}

fn write_with(
    path: &Path,
    f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> CliResult<()> {
    let mut w = create(path)?;
    f(&mut w).map_err(io_err(path))?;
    finish(w, path)
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

pub struct Pipeline {
    pub config: PipelineConfig,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Self {
        Pipeline { config }
    }

    pub fn mode(&self) -> IndexMode {
        self.config.index.mode
    }

    pub fn workdir(&self) -> &Path {
        &self.config.paths.workdir
    }

    pub fn stage_dir_for(&self, stage: Stage, mode: IndexMode) -> PathBuf {
        if stage.per_mode() {
            self.workdir().join(mode.slug()).join(stage.dir_name())
        } else {
            self.workdir().join(stage.dir_name())
        }
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.stage_dir_for(stage, self.mode())
    }

    fn output_dir(&self, stage: Stage) -> CliResult<PathBuf> {
        let dir = self.stage_dir(stage);
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(dir)
    }

    /// Path of an upstream artifact; errors with the command that makes it.
    pub fn require(&self, stage: Stage, file: &str) -> CliResult<PathBuf> {
        let path = self.stage_dir(stage).join(file);
        if path.is_file() {
            return Ok(path);
        }
        let command = if stage.per_mode() {
            format!("{} --mode {}", stage.command(), self.mode().as_str())
        } else {
            stage.command().to_string()
        };
        Err(CliError::MissingArtifact { path, command })
    }

    fn manifest(&self, stage: Stage) -> Manifest {
        let mode = stage.per_mode().then(|| self.mode().as_str());
        Manifest::new(stage.command(), &self.config, mode)
    }

    pub fn prepare(&self) -> CliResult<PrepareStats> {
        let cfg = &self.config;
        let (sequences, mut catalog, report) =
            corpus::ingest(open(&cfg.paths.reviews)?, open(&cfg.paths.metadata)?)?;
        let users_before = sequences.len();
        let interactions_before = sequences.iter().map(UserSequence::len).sum();
        let kept = corpus::kcore_filter(sequences, cfg.data.kcore)?;
        let items: HashSet<String> = kept
            .iter()
            .flat_map(|s| s.item_ids().map(str::to_string))
            .collect();
        catalog.retain(&items);
        let split = split_leave_one_out(&kept);
        let interactions: usize = kept.iter().map(UserSequence::len).sum();
        let stats = PrepareStats {
            users: kept.len(),
            items: items.len(),
            interactions,
            avg_length: interactions as f64 / kept.len() as f64,
            density: interactions as f64 / (kept.len() as f64 * items.len() as f64),
            users_before_filter: users_before,
            interactions_before_filter: interactions_before,
            malformed_reviews: report.malformed_reviews,
            malformed_metadata: report.malformed_metadata,
            untitled_dropped: report.untitled_dropped,
            too_short_to_split: split.excluded.len(),
        };

        let dir = self.output_dir(Stage::Prepare)?;
        write_with(&dir.join(INTERACTIONS_FILE), |w| {
            write_interactions_jsonl(&kept, w)
        })?;
        write_with(&dir.join(CATALOG_FILE), |w| catalog.write_tsv(w))?;
        write_json(&dir.join(STATS_FILE), &stats)?;
        let mut m = self.manifest(Stage::Prepare);
        m.input("reviews", &cfg.paths.reviews)?;
        m.input("metadata", &cfg.paths.metadata)?;
        for f in [INTERACTIONS_FILE, CATALOG_FILE, STATS_FILE] {
            m.artifact(&dir, f)?;
        }
        m.write(&dir)?;
        info!(
            "prepare: {} users, {} items, {} interactions",
            stats.users, stats.items, stats.interactions
        );
        Ok(stats)
    }

    pub fn load_prepared(&self) -> CliResult<Prepared> {
        let sequences =
            read_interactions_jsonl(open(&self.require(Stage::Prepare, INTERACTIONS_FILE)?)?)?;
        let catalog = Catalog::read_tsv(open(&self.require(Stage::Prepare, CATALOG_FILE)?)?)?;
        let split = split_leave_one_out(&sequences);
        Ok(Prepared {
            sequences,
            catalog,
            split,
        })
    }

    fn provider(&self) -> CliResult<Box<dyn EmbeddingProvider>> {
        let cfg = &self.config.embed;
        Ok(match cfg.provider {
            EmbedProvider::Hashing => Box::new(HashingEmbedder::new(cfg.dimension, cfg.seed)?),
            EmbedProvider::Table => {
                let path = cfg.table.as_ref().expect("validated");
                let table = EmbeddingTable::load(path)?;
                if table.dim() != cfg.dimension {
                    return Err(semrec::Error::Dimension {
                        expected: cfg.dimension,
                        found: table.dim(),
                    }
                    .into());
                }
                Box::new(table)
            }
        })
    }

    /// Embeds each user's most recent training reviews and their id string.
    pub fn embed(&self) -> CliResult<usize> {
        let prepared = self.load_prepared()?;
        let provider = self.provider()?;
        let dim = provider.dimension();
        let mut reviews = EmbeddingTable::new(dim);
        let mut ids = EmbeddingTable::new(dim);
        for u in &prepared.split.users {
            let recent = &u.train[u.train.len().saturating_sub(MAX_REVIEWS)..];
            for (i, inter) in recent.iter().enumerate() {
                reviews.insert(
                    format!("{}:{i}", u.user_id),
                    provider.embed_text(&inter.review_text)?,
                )?;
            }
            ids.insert(u.user_id.clone(), provider.embed_text(&u.user_id)?)?;
        }
        let dir = self.output_dir(Stage::Embed)?;
        reviews.save(&dir.join(REVIEW_VECTORS_FILE))?;
        ids.save(&dir.join(ID_VECTORS_FILE))?;
        let mut m = self.manifest(Stage::Embed);
        m.input(
            INTERACTIONS_FILE,
            &self.stage_dir(Stage::Prepare).join(INTERACTIONS_FILE),
        )?;
        m.artifact(&dir, REVIEW_VECTORS_FILE)?;
        m.artifact(&dir, ID_VECTORS_FILE)?;
        m.write(&dir)?;
        info!(
            "embed: {} users, {} reviews, D={dim}",
            ids.len(),
            reviews.len()
        );
        Ok(ids.len())
    }

    pub fn load_user_reviews(&self, split: &SplitSet) -> CliResult<Vec<UserReviews>> {
        let reviews = EmbeddingTable::load(&self.require(Stage::Embed, REVIEW_VECTORS_FILE)?)?;
        let ids = EmbeddingTable::load(&self.require(Stage::Embed, ID_VECTORS_FILE)?)?;
        let mut out = Vec::with_capacity(split.users.len());
        for u in &split.users {
            let mut vecs: Vec<Embedding> = Vec::new();
            while let Ok(v) = reviews.get(&format!("{}:{}", u.user_id, vecs.len())) {
                vecs.push(v.clone());
            }
            out.push(UserReviews {
                user_id: u.user_id.clone(),
                reviews: vecs,
                id_vec: ids.get(&u.user_id)?.clone(),
            });
        }
        Ok(out)
    }

    pub fn train_index(&self) -> CliResult<IndexAssignment> {
        let prepared = self.load_prepared()?;
        let users: Vec<String> = prepared
            .split
            .users
            .iter()
            .map(|u| u.user_id.clone())
            .collect();
        let dir = self.output_dir(Stage::TrainIndex)?;
        let mut m = self.manifest(Stage::TrainIndex);
        m.input(
            INTERACTIONS_FILE,
            &self.stage_dir(Stage::Prepare).join(INTERACTIONS_FILE),
        )?;
        let assignment = match self.mode() {
            IndexMode::Nid => assign_nid(&users)?,
            IndexMode::Oid => assign_oid(&users)?,
            IndexMode::Pid => {
                let reviews = self.load_user_reviews(&prepared.split)?;
                m.input(
                    REVIEW_VECTORS_FILE,
                    &self.stage_dir(Stage::Embed).join(REVIEW_VECTORS_FILE),
                )?;
                m.input(
                    ID_VECTORS_FILE,
                    &self.stage_dir(Stage::Embed).join(ID_VECTORS_FILE),
                )?;
                let assignment = self.train_pid(&reviews, &dir)?;
                for f in [CHECKPOINT_FILE, FUSED_FILE, TRACE_FILE] {
                    m.artifact(&dir, f)?;
                }
                assignment
            }
        };
        write_with(&dir.join(ASSIGNMENT_FILE), |w| assignment.write_tsv(w))?;
        m.artifact(&dir, ASSIGNMENT_FILE)?;
        m.write(&dir)?;
        info!(
            "train-index: {} users indexed ({})",
            assignment.len(),
            self.mode()
        );
        Ok(assignment)
    }

    fn train_pid(&self, users: &[UserReviews], dir: &Path) -> CliResult<IndexAssignment> {
        let r = &self.config.rqvae;
        let dim = self.config.embed.dimension;
        let capacity = (r.codebook_size as u128).saturating_pow(r.levels as u32);
        if users.len() as u128 > capacity {
            return Err(semrec::Error::Capacity {
                users: users.len(),
                capacity,
            }
            .into());
        }
        let model_config = RqvaeConfig {
            input_dim: dim,
            hidden_dim: r.hidden,
            code_dim: r.code_dim,
            codebook_size: r.codebook_size,
            levels: r.levels,
            beta: r.beta,
        };
        let train_config = TrainConfig {
            epochs: r.epochs,
            batch_size: r.batch_size,
            lr: r.lr,
            seed: r.seed,
            kmeans_iters: r.kmeans_iters,
            reseed_dead_codes: true,
        };
        let mut model = RqvaeModel::new(&model_config, r.seed)?;
        let mut attention = AttentionParams::init(dim, r.seed);
        let outcome = if r.joint {
            train_joint(&mut model, &mut attention, users, &train_config)
        } else {
            let inputs = users
                .iter()
                .map(|u| attention.fuse(u).map(|f| f.x.into_inner()))
                .collect::<semrec::Result<Vec<_>>>()?;
            train(&mut model, &inputs, &train_config)
        };
        let trace = match outcome {
            Ok(trace) => trace,
            Err(TrainError::Diverged(d)) => {
                write_with(&dir.join(TRACE_FILE), |w| write_trace(&d.trace, w))?;
                return Err(TrainError::Diverged(d).into());
            }
            Err(e) => return Err(e.into()),
        };
        write_with(&dir.join(TRACE_FILE), |w| write_trace(&trace, w))?;
        if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
            info!(
                "rqvae: recon {:.4} -> {:.4}, rq {:.4} -> {:.4}",
                first.recon, last.recon, first.rq, last.rq
            );
        }

        let fused = users
            .iter()
            .map(|u| attention.fuse(u))
            .collect::<semrec::Result<Vec<FusedUserVector>>>()?;
        let mut table = EmbeddingTable::new(dim);
        for f in &fused {
            table.insert(f.user_id.clone(), f.x.clone())?;
        }
        table.save(&dir.join(FUSED_FILE))?;
        let assignment = assign_pid(&model, &fused)?;
        let attention = r.joint.then_some(&attention);
        Checkpoint::new(model, attention, trace).save(&dir.join(CHECKPOINT_FILE))?;
        Ok(assignment)
    }

    pub fn load_assignment(&self) -> CliResult<IndexAssignment> {
        let path = self.require(Stage::TrainIndex, ASSIGNMENT_FILE)?;
        let a = IndexAssignment::read_tsv(open(&path)?)?;
        if a.mode() != self.mode() {
            return Err(semrec::Error::data(format!(
                "{} holds {} ids, expected {}",
                path.display(),
                a.mode(),
                self.mode()
            ))
            .into());
        }
        Ok(a)
    }

    fn summarizer(&self) -> CliResult<Box<dyn Summarizer>> {
        let cfg = &self.config.summary;
        Ok(match cfg.provider {
            SummaryProvider::Extractive => Box::new(ExtractiveSummarizer::new(cfg.terms)),
            SummaryProvider::Chat => {
                let path = cfg
                    .cache
                    .clone()
                    .unwrap_or_else(|| self.workdir().join("summaries.jsonl"));
                if let Some(parent) = path.parent() {
                    std::fs::create_dir_all(parent).map_err(io_err(parent))?;
                }
                let token = cfg.token.clone().expect("validated");
                Box::new(ChatSummarizer::new(
                    HttpTransport::new(cfg.endpoint.clone(), token),
                    cfg.model.clone(),
                    SummaryCache::open(&path)?,
                ))
            }
        })
    }

    fn training_retriever(prepared: &Prepared) -> CoocRetriever {
        let train: Vec<Vec<String>> = prepared
            .split
            .users
            .iter()
            .map(|u| u.train.iter().map(|i| i.item_id.clone()).collect())
            .collect();
        CoocRetriever::fit(
            train.iter().map(Vec::as_slice),
            prepared.catalog.iter().map(|(id, _)| id),
        )
    }

    fn titles(catalog: &Catalog, ids: &[String]) -> CliResult<Vec<String>> {
        ids.iter()
            .map(|id| {
                catalog
                    .title(id)
                    .map(str::to_string)
                    .ok_or_else(|| semrec::Error::MissingKey(id.clone()).into())
            })
            .collect()
    }

    /// Per-user inputs to the six builders. Next-item pools come from every
    /// training prefix, with the validation item as the last target.
    pub fn user_contexts(
        &self,
        prepared: &Prepared,
        assignment: &IndexAssignment,
    ) -> CliResult<Vec<UserContext>> {
        let retriever = Self::training_retriever(prepared);
        let summarizer = self.summarizer()?;
        let top_k = self.config.rank.top_k;
        let mut out = Vec::with_capacity(prepared.split.users.len());
        for u in &prepared.split.users {
            let rendered = assignment
                .rendered(&u.user_id)
                .ok_or_else(|| semrec::Error::MissingKey(u.user_id.clone()))?;
            let history = u
                .train
                .iter()
                .map(|i| {
                    Ok(RatedItem {
                        title: prepared
                            .catalog
                            .title(&i.item_id)
                            .ok_or_else(|| semrec::Error::MissingKey(i.item_id.clone()))?
                            .to_string(),
                        rating: i.rating,
                    })
                })
                .collect::<CliResult<Vec<_>>>()?;
            let texts: Vec<String> = u.train.iter().map(|i| i.review_text.clone()).collect();
            let summary = summarizer.summarize(&u.user_id, &texts)?;

            let items: Vec<String> = u
                .train
                .iter()
                .chain(std::iter::once(&u.valid))
                .map(|i| i.item_id.clone())
                .collect();
            let mut candidate_sets = Vec::with_capacity(items.len() - 1);
            for t in 1..items.len() {
                let prefix = &items[..t];
                let candidates = retriever.retrieve(&u.user_id, prefix, top_k)?;
                let gt_position = candidates.iter().position(|c| *c == items[t]);
                let recent = &prefix[prefix.len().saturating_sub(MAX_HISTORY)..];
                candidate_sets.push(CandidateSet {
                    history: Self::titles(&prepared.catalog, recent)?,
                    candidates: Self::titles(&prepared.catalog, &candidates)?,
                    gt_position,
                });
            }
            out.push(UserContext {
                user_id: u.user_id.clone(),
                rendered_id: rendered.to_string(),
                history,
                summary: Some(summary),
                candidate_sets,
            });
        }
        Ok(out)
    }

    pub fn gen_prompts(&self) -> CliResult<(Vec<PromptInstance>, PromptReport)> {
        let prepared = self.load_prepared()?;
        let assignment = self.load_assignment()?;
        let contexts = self.user_contexts(&prepared, &assignment)?;
        let corpora = build_corpora(&contexts);
        let cfg = &self.config.prompts;
        let mixture = MixtureConfig {
            proportions: cfg
                .proportions
                .clone()
                .unwrap_or_else(|| MixtureConfig::uniform(cfg.total, cfg.seed).proportions),
            total: cfg.total,
            seed: cfg.seed,
        };
        let (corpus, mix_report) = prompts::mix(&corpora.instances, &mixture)?;
        check_no_item_ids(&corpus, &prepared.catalog)?;

        let report = PromptReport {
            available: TaskKind::ALL
                .iter()
                .map(|&t| (t, corpora.count(t)))
                .collect(),
            skipped: corpora
                .skipped
                .iter()
                .map(|((task, reason), n)| (format!("{task}/{}", skip_name(*reason)), *n))
                .collect(),
            requested: mix_report.requested,
            taken: mix_report.taken,
        };
        let dir = self.output_dir(Stage::GenPrompts)?;
        write_with(&dir.join(CORPUS_FILE), |w| write_corpus_jsonl(&corpus, w))?;
        write_json(&dir.join(PROMPT_REPORT_FILE), &report)?;
        let mut m = self.manifest(Stage::GenPrompts);
        m.input(
            INTERACTIONS_FILE,
            &self.stage_dir(Stage::Prepare).join(INTERACTIONS_FILE),
        )?;
        m.input(
            ASSIGNMENT_FILE,
            &self.stage_dir(Stage::TrainIndex).join(ASSIGNMENT_FILE),
        )?;
        m.artifact(&dir, CORPUS_FILE)?;
        m.artifact(&dir, PROMPT_REPORT_FILE)?;
        m.write(&dir)?;
        info!("gen-prompts: {} instances", corpus.len());
        Ok((corpus, report))
    }

    fn scorer(&self) -> CliResult<Box<dyn Scorer>> {
        let cfg = &self.config.rank;
        Ok(match cfg.scorer {
            ScorerKind::Overlap => Box::new(OverlapScorer),
            ScorerKind::Oracle => Box::new(OracleScorer),
            ScorerKind::Adversarial => Box::new(AdversarialScorer),
            ScorerKind::Random => Box::new(RandomScorer { seed: cfg.seed }),
            ScorerKind::File => Box::new(FileScorer::read(open(
                cfg.logits.as_ref().expect("validated"),
            )?)?),
        })
    }

    fn retriever(&self, prepared: &Prepared) -> CliResult<Box<dyn Retriever>> {
        Ok(match self.config.rank.retriever {
            RetrieverKind::Cooc => Box::new(Self::training_retriever(prepared)),
            RetrieverKind::File => Box::new(FileRetriever::read(open(
                self.config.rank.candidates.as_ref().expect("validated"),
            )?)?),
        })
    }

    /// Candidates for every test user: history is training plus validation.
    pub fn test_candidates(&self, prepared: &Prepared) -> CliResult<BTreeMap<String, Vec<String>>> {
        let retriever = self.retriever(prepared)?;
        let mut out = BTreeMap::new();
        for u in &prepared.split.users {
            let history: Vec<String> = u
                .train
                .iter()
                .chain(std::iter::once(&u.valid))
                .map(|i| i.item_id.clone())
                .collect();
            out.insert(
                u.user_id.clone(),
                retriever.retrieve(&u.user_id, &history, self.config.rank.top_k)?,
            );
        }
        Ok(out)
    }

    /// Rank every test user's candidates with `scorer`, without writing anything.
    pub fn rank_with(
        &self,
        prepared: &Prepared,
        assignment: &IndexAssignment,
        candidates: &BTreeMap<String, Vec<String>>,
        scorer: &dyn Scorer,
    ) -> CliResult<Vec<RankingResult>> {
        let mut results = Vec::with_capacity(prepared.split.users.len());
        for u in &prepared.split.users {
            let rendered = assignment
                .rendered(&u.user_id)
                .ok_or_else(|| semrec::Error::MissingKey(u.user_id.clone()))?;
            let history: Vec<String> = u
                .train
                .iter()
                .chain(std::iter::once(&u.valid))
                .map(|i| i.item_id.clone())
                .collect();
            let recent = &history[history.len().saturating_sub(MAX_HISTORY)..];
            let history_titles = Self::titles(&prepared.catalog, recent)?;
            let ids = &candidates[&u.user_id];
            let candidate_titles = Self::titles(&prepared.catalog, ids)?;
            let gt = &u.test.item_id;
            let prompt = next_item_input(rendered, &history_titles, &candidate_titles);
            let ctx = ScoringContext {
                user_id: &u.user_id,
                prompt: &prompt,
                history: &history_titles,
                candidates: &candidate_titles,
                gt_position: ids.iter().position(|c| c == gt),
            };
            results.push(verbalize_rank(scorer, &ctx, ids, Some(gt))?);
        }
        Ok(results)
    }

    pub fn rank(&self) -> CliResult<Vec<RankingResult>> {
        let prepared = self.load_prepared()?;
        let assignment = self.load_assignment()?;
        let candidates = self.test_candidates(&prepared)?;
        let scorer = self.scorer()?;
        let results = self.rank_with(&prepared, &assignment, &candidates, scorer.as_ref())?;
        let dir = self.output_dir(Stage::Rank)?;
        write_with(&dir.join(CANDIDATES_FILE), |w| {
            write_candidates_tsv(&candidates, w)
        })?;
        write_with(&dir.join(RESULTS_FILE), |w| {
            write_results_jsonl(&results, w)
        })?;
        let mut m = self.manifest(Stage::Rank);
        m.input(
            INTERACTIONS_FILE,
            &self.stage_dir(Stage::Prepare).join(INTERACTIONS_FILE),
        )?;
        m.input(
            ASSIGNMENT_FILE,
            &self.stage_dir(Stage::TrainIndex).join(ASSIGNMENT_FILE),
        )?;
        m.artifact(&dir, CANDIDATES_FILE)?;
        m.artifact(&dir, RESULTS_FILE)?;
        m.write(&dir)?;
        info!("rank: {} users scored by {}", results.len(), scorer.name());
        Ok(results)
    }

    pub fn eval(&self) -> CliResult<MetricsReport> {
        let path = self.require(Stage::Rank, RESULTS_FILE)?;
        let results = semrec::rank::read_results_jsonl(open(&path)?)?;
        let report = eval::aggregate(&results, &self.config.eval.ks)?;
        let discrepancies = eval::oracle_check(&results, &report);
        if let Some(d) = discrepancies.first() {
            return Err(semrec::Error::data(format!(
                "metric self-check failed for {} ({}): {} vs {}",
                d.metric, d.view, d.expected, d.found
            ))
            .into());
        }
        if report.no_hits {
            warn!("no test user has the ground truth among the candidates");
        }
        let dir = self.output_dir(Stage::Eval)?;
        write_json(&dir.join(METRICS_JSON), &report)?;
        write_with(&dir.join(METRICS_JSONL), |w| report.write_jsonl(w))?;
        std::fs::write(dir.join(METRICS_TABLE), report.table()).map_err(io_err(&dir))?;
        let mut m = self.manifest(Stage::Eval);
        m.input(RESULTS_FILE, &path)?;
        for f in [METRICS_JSON, METRICS_JSONL, METRICS_TABLE] {
            m.artifact(&dir, f)?;
        }
        m.write(&dir)?;
        Ok(report)
    }

    pub fn all(&self) -> CliResult<MetricsReport> {
        self.prepare()?;
        if self.mode() == IndexMode::Pid {
            self.embed()?;
        }
        self.train_index()?;
        self.gen_prompts()?;
        self.rank()?;
        self.eval()
    }

    /// Side-by-side metrics of the three index modes from finished runs.
    pub fn ablate_index(&self) -> CliResult<String> {
        let mut reports = Vec::new();
        for mode in IndexMode::ALL {
            let per_mode = Pipeline::new(PipelineConfig {
                index: crate::config::IndexConfig { mode },
                ..self.config.clone()
            });
            let metrics = per_mode.require(Stage::Eval, METRICS_JSON)?;
            let assignment = per_mode.require(Stage::TrainIndex, ASSIGNMENT_FILE)?;
            let rank_manifest = Manifest::read(&per_mode.stage_dir(Stage::Rank))?;
            if rank_manifest.inputs.get(ASSIGNMENT_FILE) != Some(&sha256_file(&assignment)?) {
                return Err(semrec::Error::data(format!(
                    "{mode} ranking was produced from a different assignment than {}; rerun `semrec rank --mode {mode}`",
                    assignment.display()
                ))
                .into());
            }
            let text = std::fs::read_to_string(&metrics).map_err(io_err(&metrics))?;
            let report: MetricsReport = serde_json::from_str(&text)
                .map_err(|e| semrec::Error::data(format!("{}: {e}", metrics.display())))?;
            reports.push((mode.as_str(), report));
        }
        let rows: Vec<(&str, &MetricsReport)> = reports.iter().map(|(l, r)| (*l, r)).collect();
        let table = format_comparison(&rows);
        let path = self.workdir().join(ABLATION_FILE);
        std::fs::write(&path, &table).map_err(io_err(&path))?;
        Ok(table)
    }
}

fn write_trace<W: Write>(trace: &[semrec::rqvae::EpochLoss], mut w: W) -> std::io::Result<()> {
    for e in trace {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn skip_name(reason: SkipReason) -> &'static str {
    match reason {
        SkipReason::GroundTruthNotRetrieved => "ground_truth_not_retrieved",
        SkipReason::MissingSummary => "missing_summary",
        SkipReason::EmptyHistory => "empty_history",
        SkipReason::MissingRating => "missing_rating",
    }
}

/// Fails if any word-like token of any instance is a catalog item id.
pub fn check_no_item_ids(corpus: &[PromptInstance], catalog: &Catalog) -> CliResult<()> {
    let ids: HashSet<&str> = catalog.iter().map(|(id, _)| id).collect();
    for inst in corpus {
        for text in [&inst.input, &inst.target] {
            let leak = text
                .split(|c: char| !(c.is_alphanumeric() || c == '-' || c == '_'))
                .find(|t| ids.contains(t));
            if let Some(id) = leak {
                return Err(semrec::Error::data(format!(
                    "{} prompt for user {} contains item id {id}",
                    inst.task, inst.user_id
                ))
                .into());
            }
        }
    }
    Ok(())
}
