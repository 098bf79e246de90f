//! The federated training engine.
//!
//! Each round runs four phases over secure aggregation: (1) clients upload
//! their additive share of the global fairness metric and their weighted
//! accuracy share, so the server learns only the sums; (2) clients upload
//! their metric gaps, the server returns the mean gap; (3) each client nudges
//! its aggregation weight against its gap and trains locally; (4) clients
//! upload weight-scaled model deltas plus the bare weight, and the server
//! divides the sums. FedAvg is the same engine at beta = 0 with no debiasing,
//! so baseline comparisons share every code path. The server never sees a
//! client's individual metrics, gap, weight, or model.
//!
//! A client whose local metric is undefined (a conditioning group absent,
//! which single-group partitions guarantee) falls back to the accuracy gap
//! for its weight update; the event is logged and counted.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::debias::{DebiasError, DebiasState, DebiasStrategy, FairBatchState, ReweighTable};
use crate::ingest::{PreparedDataset, TabularDataset};
use crate::metrics::{
    self, AyCensus, DatasetStats, GroupCensus, MetricKind, MetricsError,
};
use crate::model::{self, ModelError, ModelParams, TrainConfig};
use crate::partition::{ClientPartition, PartitionError};
use crate::report::{ClientRow, EvalBlock, ExchangeBlock, ReportRow};
use crate::rng::{derive_rng, derive_seed};
use crate::secagg::{
    ClientSecret, FixedPointCodec, SecaggError, SecaggSession, Transcript,
};

/// Below this aggregate weight mass the round falls back to FedAvg weights.
/// Sixteen fixed-point units, comfortably above codec resolution.
const WEIGHT_COLLAPSE_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum FedError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("bootstrap aborted: {0}")]
    DegenerateBootstrap(String),
    #[error("aggregation failed: {0}")]
    Aggregation(String),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Secagg(#[from] SecaggError),
    #[error(transparent)]
    Debias(#[from] DebiasError),
}

/// Local SGD settings shared by every client.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOpts {
    pub learning_rate: f64,
    pub epochs: u32,
    pub batch_size: usize,
}

impl Default for TrainOpts {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            epochs: 1,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub metric: MetricKind,
    /// Fairness budget: how hard weights chase the metric gaps. Zero is
    /// exactly FedAvg.
    pub beta: f64,
    /// Blend between the fairness gap (1.0) and the accuracy gap (0.0) for
    /// clients whose local metric is defined.
    pub eta: f64,
    pub rounds: u32,
    pub train: TrainOpts,
    /// Step size of the FairBatch-style debiaser, when assigned.
    pub fairbatch_step: f64,
    pub seed: u64,
    /// Clients drawn per round; None is full participation.
    pub subsample: Option<usize>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            metric: MetricKind::Eod,
            beta: 1.0,
            eta: 1.0,
            rounds: 30,
            train: TrainOpts::default(),
            fairbatch_step: 0.01,
            seed: 0,
            subsample: None,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self, n_clients: usize) -> Result<(), FedError> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(FedError::InvalidConfig(format!(
                "beta {} must be finite and non-negative",
                self.beta
            )));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(FedError::InvalidConfig(format!(
                "eta {} must lie in [0, 1]",
                self.eta
            )));
        }
        if self.rounds == 0 {
            return Err(FedError::InvalidConfig("rounds must be at least 1".into()));
        }
        if !(self.train.learning_rate > 0.0 && self.train.learning_rate.is_finite()) {
            return Err(FedError::InvalidConfig(format!(
                "learning rate {} must be positive",
                self.train.learning_rate
            )));
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return Err(FedError::InvalidConfig(
                "epochs and batch size must be at least 1".into(),
            ));
        }
        if !(self.fairbatch_step > 0.0 && self.fairbatch_step.is_finite()) {
            return Err(FedError::InvalidConfig(format!(
                "fairbatch step {} must be positive",
                self.fairbatch_step
            )));
        }
        if let Some(c) = self.subsample {
            if c == 0 || c > n_clients {
                return Err(FedError::InvalidConfig(format!(
                    "subsample {c} out of range for {n_clients} clients"
                )));
            }
        }
        Ok(())
    }
}

struct ClientState {
    id: u16,
    data: TabularDataset,
    n_rows: u64,
    /// n_k / n: the initial and fallback aggregation weight.
    base_weight: f64,
    /// Current aggregation weight, persisted across rounds.
    weight: f64,
    strategy: DebiasStrategy,
    debias: DebiasState,
    row_weights: Vec<f64>,
}

/// Everything a finished run exposes: per-round reports, the final model,
/// and the full server view for privacy auditing.
#[derive(Debug)]
pub struct RunResult {
    pub rows: Vec<ReportRow>,
    pub final_theta: ModelParams,
    pub fallback_rounds: Vec<u32>,
    pub undefined_fk_events: u64,
    pub transcript: Transcript,
    pub secrets: Vec<ClientSecret>,
}

/// View of one client's round-start evaluation (previous round's model).
struct LocalEval {
    acc: f64,
    f_k: Option<f64>,
    m: f64,
}

/// One weight step: w - beta (delta - mean), clamped at zero.
pub fn weight_step(weight: f64, beta: f64, delta: f64, mean_delta: f64) -> f64 {
    (weight - beta * (delta - mean_delta)).max(0.0)
}

/// A client's metric gap. Defined local metric: eta |F - F_k| +
/// (1 - eta) |acc - acc_bar|. Undefined: the accuracy gap alone; the bool
/// reports that fallback.
pub fn metric_gap(
    f_k: Option<f64>,
    f_global: f64,
    acc: f64,
    acc_bar: f64,
    eta: f64,
) -> (f64, bool) {
    match f_k {
        Some(f) => (
            eta * (f_global - f).abs() + (1.0 - eta) * (acc - acc_bar).abs(),
            false,
        ),
        None => ((acc - acc_bar).abs(), true),
    }
}

pub struct FedEngine {
    cfg: EngineConfig,
    clients: Vec<ClientState>,
    theta: ModelParams,
    stats: Option<DatasetStats>,
    n_total: u64,
    secagg_seed: u64,
    codec: FixedPointCodec,
    counts_codec: FixedPointCodec,
    transcript: Transcript,
    secrets: Vec<ClientSecret>,
    fallback_rounds: Vec<u32>,
    undefined_fk_events: u64,
    last_deltas: Vec<f64>,
    test_data: TabularDataset,
}

impl FedEngine {
    pub fn setup(
        cfg: EngineConfig,
        prepared: &PreparedDataset,
        partition: &ClientPartition,
        strategies: &[DebiasStrategy],
    ) -> Result<Self, FedError> {
        cfg.validate(partition.k)?;
        partition.validate_against(&prepared.train)?;
        if strategies.len() != partition.k {
            return Err(FedError::InvalidConfig(format!(
                "{} debias assignments for {} clients",
                strategies.len(),
                partition.k
            )));
        }
        if partition.k > usize::from(u16::MAX) {
            return Err(FedError::InvalidConfig("too many clients".into()));
        }
        let n = prepared.train.n_rows();
        let mut clients = Vec::with_capacity(partition.k);
        for k in 0..partition.k {
            let rows = partition.client_rows(k);
            if rows.is_empty() {
                return Err(FedError::InvalidConfig(format!("client {k} has no rows")));
            }
            let data = prepared.train.select(&rows);
            let n_rows = data.n_rows() as u64;
            let base_weight = n_rows as f64 / n as f64;
            clients.push(ClientState {
                id: k as u16,
                data,
                n_rows,
                base_weight,
                weight: base_weight,
                strategy: strategies[k],
                debias: DebiasState::None,
                row_weights: Vec::new(),
            });
        }
        let d = prepared.train.n_features();
        Ok(Self {
            secagg_seed: derive_seed(cfg.seed, "secagg-session", &[]),
            cfg,
            clients,
            theta: ModelParams::zeros(d),
            stats: None,
            n_total: n as u64,
            codec: FixedPointCodec::default(),
            counts_codec: FixedPointCodec::for_counts(),
            transcript: Transcript::default(),
            secrets: Vec::new(),
            fallback_rounds: Vec::new(),
            undefined_fk_events: 0,
            last_deltas: Vec::new(),
            test_data: prepared.test.clone(),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn theta(&self) -> &ModelParams {
        &self.theta
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    /// Simulator god view of current aggregation weights, indexed by client.
    /// Never enters the transcript; exists for invariant checks.
    pub fn client_weights(&self) -> Vec<f64> {
        self.clients.iter().map(|c| c.weight).collect()
    }

    /// God view of the last round's metric gaps, aligned with that round's
    /// participants (all clients under full participation).
    pub fn last_deltas(&self) -> &[f64] {
        &self.last_deltas
    }

    fn all_participants(&self) -> Vec<u16> {
        (0..self.clients.len() as u16).collect()
    }

    /// Runs one secure-aggregation exchange: masks every participant's
    /// vector, records shares and ground truth for later auditing, and
    /// returns the decoded sums.
    fn exchange(
        &mut self,
        channel: &str,
        tag: u32,
        participants: &[u16],
        vectors: &[Vec<f64>],
        codec: &FixedPointCodec,
    ) -> Result<Vec<f64>, FedError> {
        let session = SecaggSession::with_participants(self.secagg_seed, participants.to_vec())?;
        let mut shares = Vec::with_capacity(vectors.len());
        for (pos, &client) in participants.iter().enumerate() {
            let (share, _saturated) = session.mask(&vectors[pos], client, tag, codec)?;
            self.transcript.record_share(channel, &share);
            self.secrets.push(ClientSecret {
                client,
                channel: channel.to_string(),
                round_tag: tag,
                values: vectors[pos].clone(),
            });
            shares.push(share);
        }
        let sums = session.secure_sum(&shares, tag, codec)?;
        self.transcript.record_sum(channel, tag, &sums);
        Ok(sums)
    }

    /// Secure collection of the dataset statistics that anchor the metric
    /// decomposition, plus pooled counts for globally reweighed clients.
    /// Aborts with a clear error when the federation-level metric is
    /// undefined (an anchor probability is zero).
    pub fn bootstrap(&mut self) -> Result<(), FedError> {
        let participants = self.all_participants();
        let vectors: Vec<Vec<f64>> = self
            .clients
            .iter()
            .map(|c| {
                let census = AyCensus::from_dataset(&c.data);
                let (c0, c1) = match self.cfg.metric {
                    MetricKind::Eod => (census.count(0, 1), census.count(1, 1)),
                    MetricKind::Spd => (census.group_total(0), census.group_total(1)),
                };
                vec![c0 as f64, c1 as f64, c.n_rows as f64]
            })
            .collect();
        let counts_codec = self.counts_codec;
        let sums = self.exchange("bootstrap-stats", 0, &participants, &vectors, &counts_codec)?;
        self.transcript.record_broadcast("bootstrap-stats", 0, &sums);
        let stats = DatasetStats::from_counts(self.cfg.metric, [sums[0], sums[1]], sums[2])
            .map_err(|e| FedError::DegenerateBootstrap(e.to_string()))?;
        self.stats = Some(stats);
        debug_assert_eq!(sums[2] as u64, self.n_total);

        if self
            .clients
            .iter()
            .any(|c| c.strategy == DebiasStrategy::GlobalReweigh)
        {
            let vectors: Vec<Vec<f64>> = self
                .clients
                .iter()
                .map(|c| {
                    AyCensus::from_dataset(&c.data)
                        .to_flat()
                        .iter()
                        .map(|&v| v as f64)
                        .collect()
                })
                .collect();
            let sums = self.exchange(
                "bootstrap-reweigh-counts",
                1,
                &participants,
                &vectors,
                &counts_codec,
            )?;
            self.transcript
                .record_broadcast("bootstrap-reweigh-counts", 1, &sums);
            let pooled = AyCensus::from_flat([
                sums[0].round() as u64,
                sums[1].round() as u64,
                sums[2].round() as u64,
                sums[3].round() as u64,
            ]);
            let table = ReweighTable::from_census(&pooled);
            for client in &mut self.clients {
                if client.strategy == DebiasStrategy::GlobalReweigh {
                    client.debias = DebiasState::Reweigh(table);
                }
            }
        }

        for client in &mut self.clients {
            match client.strategy {
                DebiasStrategy::LocalReweigh => {
                    let census = AyCensus::from_dataset(&client.data);
                    client.debias = DebiasState::Reweigh(ReweighTable::from_census(&census));
                }
                DebiasStrategy::Fairbatch => {
                    let census = AyCensus::from_dataset(&client.data);
                    client.debias = DebiasState::FairBatch(FairBatchState::new(
                        &census,
                        self.cfg.fairbatch_step,
                    )?);
                }
                DebiasStrategy::None | DebiasStrategy::GlobalReweigh => {}
            }
            client.row_weights = client.debias.row_weights(&client.data);
        }
        Ok(())
    }

    fn round_participants(&self, round: u32) -> Vec<u16> {
        match self.cfg.subsample {
            None => self.all_participants(),
            Some(c) => {
                let mut ids = self.all_participants();
                use rand::seq::SliceRandom;
                ids.shuffle(&mut derive_rng(
                    self.cfg.seed,
                    "subsample",
                    &[u64::from(round)],
                ));
                let mut chosen: Vec<u16> = ids.into_iter().take(c).collect();
                chosen.sort_unstable();
                chosen
            }
        }
    }

    /// Runs one full round (metrics, gaps, weight update + local training,
    /// model aggregation) and returns the trusted evaluator's report row for
    /// the freshly aggregated model.
    pub fn round(&mut self, round: u32) -> Result<ReportRow, FedError> {
        let stats = self
            .stats
            .ok_or_else(|| FedError::Aggregation("round before bootstrap".to_string()))?;
        let participants = self.round_participants(round);
        let tag = round
            .checked_mul(8)
            .ok_or_else(|| FedError::Aggregation("round tag overflow".to_string()))?;

        // Phase 1: secure metric exchange. Vector layout per client:
        // [metric component, accuracy share, row share]; dividing the summed
        // shares by the summed row fraction handles partial participation.
        let evals: Vec<LocalEval> = participants
            .iter()
            .map(|&p| {
                let client = &self.clients[p as usize];
                let census = metrics::census(&self.theta, &client.data)?;
                Ok(LocalEval {
                    acc: metrics::accuracy(&census)?,
                    f_k: metrics::metric(&census, self.cfg.metric),
                    m: metrics::m_global_component(&census, &stats, self.n_total),
                })
            })
            .collect::<Result<_, FedError>>()?;
        let n = self.n_total as f64;
        let vectors: Vec<Vec<f64>> = participants
            .iter()
            .zip(&evals)
            .map(|(&p, eval)| {
                let share = self.clients[p as usize].n_rows as f64 / n;
                vec![eval.m, eval.acc * share, share]
            })
            .collect();
        let codec = self.codec;
        let sums = self.exchange("metrics", tag, &participants, &vectors, &codec)?;
        let frac = sums[2];
        if !(frac > 0.0) {
            return Err(FedError::Aggregation(format!(
                "row fraction sum {frac} in round {round}"
            )));
        }
        let f_global = sums[0] / frac;
        let acc_bar = sums[1] / frac;
        self.transcript
            .record_broadcast("metrics", tag, &[f_global, acc_bar]);

        // Phase 2: metric gaps.
        let mut deltas = Vec::with_capacity(participants.len());
        for (&p, eval) in participants.iter().zip(&evals) {
            let (delta, fell_back) = metric_gap(eval.f_k, f_global, eval.acc, acc_bar, self.cfg.eta);
            if fell_back {
                self.undefined_fk_events += 1;
                log::info!(
                    "round {round} client {p}: local {} undefined; accuracy-gap fallback engaged",
                    self.cfg.metric
                );
            }
            deltas.push(delta);
        }
        let gap_vectors: Vec<Vec<f64>> = deltas.iter().map(|&d| vec![d]).collect();
        let sums = self.exchange("gaps", tag + 1, &participants, &gap_vectors, &codec)?;
        let mean_gap = sums[0] / participants.len() as f64;
        self.last_deltas = deltas.clone();
        self.transcript
            .record_broadcast("gaps", tag + 1, &[mean_gap]);

        // Phase 3: weight update, debias refresh, local training.
        for ((&p, eval), &delta) in participants.iter().zip(&evals).zip(&deltas) {
            let client = &mut self.clients[p as usize];
            client.weight = weight_step(client.weight, self.cfg.beta, delta, mean_gap);
            if matches!(client.debias, DebiasState::FairBatch(_)) {
                client.debias.observe_disparity(eval.f_k);
                client.row_weights = client.debias.row_weights(&client.data);
            }
        }
        let theta = self.theta.clone();
        let cfg = self.cfg;
        let trained: Vec<ModelParams> = participants
            .par_iter()
            .map(|&p| {
                let client = &self.clients[p as usize];
                model::local_train(
                    &theta,
                    &client.data,
                    &client.row_weights,
                    &TrainConfig {
                        learning_rate: cfg.train.learning_rate,
                        epochs: cfg.train.epochs,
                        batch_size: cfg.train.batch_size,
                        seed: derive_seed(cfg.seed, "local-train", &[
                            u64::from(round),
                            u64::from(p),
                        ]),
                    },
                )
            })
            .collect::<Result<_, ModelError>>()?;

        // Phase 4: weighted model aggregation.
        let model_vector = |weight: f64, params: &ModelParams| {
            let mut v: Vec<f64> = params.to_flat().iter().map(|t| weight * t).collect();
            v.push(weight);
            v
        };
        let vectors: Vec<Vec<f64>> = participants
            .iter()
            .zip(&trained)
            .map(|(&p, params)| model_vector(self.clients[p as usize].weight, params))
            .collect();
        let mut sums = self.exchange("model", tag + 2, &participants, &vectors, &codec)?;
        let mut weight_sum = *sums.last().unwrap();
        if weight_sum < WEIGHT_COLLAPSE_EPS {
            log::warn!(
                "round {round}: aggregation weights collapsed (sum {weight_sum:.2e}); falling back to FedAvg weights"
            );
            self.fallback_rounds.push(round);
            for &p in &participants {
                let client = &mut self.clients[p as usize];
                client.weight = client.base_weight;
            }
            let vectors: Vec<Vec<f64>> = participants
                .iter()
                .zip(&trained)
                .map(|(&p, params)| model_vector(self.clients[p as usize].base_weight, params))
                .collect();
            sums = self.exchange("model-reset", tag + 3, &participants, &vectors, &codec)?;
            weight_sum = *sums.last().unwrap();
        }
        let flat: Vec<f64> = sums[..sums.len() - 1]
            .iter()
            .map(|s| s / weight_sum)
            .collect();
        self.theta = ModelParams::from_flat(&flat)?;
        if !self.theta.is_finite() {
            return Err(FedError::Aggregation(format!(
                "aggregated model is not finite in round {round}"
            )));
        }

        self.evaluate(round, f_global, acc_bar, mean_gap, weight_sum)
    }

    /// Trusted evaluator: pooled and per-client train metrics plus held-out
    /// test metrics for the current model. Runs outside the secure channels.
    fn evaluate(
        &self,
        round: u32,
        f_global: f64,
        acc_bar: f64,
        mean_gap: f64,
        weight_sum: f64,
    ) -> Result<ReportRow, FedError> {
        let censuses: Vec<GroupCensus> = self
            .clients
            .par_iter()
            .map(|c| metrics::census(&self.theta, &c.data))
            .collect::<Result<_, ModelError>>()?;
        let mut per_client = Vec::with_capacity(self.clients.len());
        let mut accs = Vec::with_capacity(self.clients.len());
        let mut pooled = GroupCensus::empty();
        for (client, census) in self.clients.iter().zip(&censuses) {
            let acc = metrics::accuracy(census)?;
            accs.push(acc);
            pooled = pooled.merge(census);
            per_client.push(ClientRow {
                k: client.id,
                n_k: client.n_rows,
                acc,
                f_k: metrics::metric(census, self.cfg.metric),
            });
        }
        let test_census = metrics::census(&self.theta, &self.test_data)?;
        Ok(ReportRow {
            round,
            acc_global: metrics::accuracy(&pooled)?,
            eod: metrics::eod(&pooled),
            spd: metrics::spd(&pooled),
            std_acc: metrics::std_acc(&accs),
            per_client,
            test: EvalBlock {
                acc: metrics::accuracy(&test_census)?,
                eod: metrics::eod(&test_census),
                spd: metrics::spd(&test_census),
            },
            exchange: ExchangeBlock {
                f_global,
                acc_bar,
                mean_gap,
                weight_sum,
            },
            theta: self.theta.to_flat(),
        })
    }

    /// Bootstraps and runs every round, consuming the engine.
    pub fn run(mut self) -> Result<RunResult, FedError> {
        self.bootstrap()?;
        let mut rows = Vec::with_capacity(self.cfg.rounds as usize);
        for t in 1..=self.cfg.rounds {
            rows.push(self.round(t)?);
        }
        Ok(RunResult {
            rows,
            final_theta: self.theta,
            fallback_rounds: self.fallback_rounds,
            undefined_fk_events: self.undefined_fk_events,
            transcript: self.transcript,
            secrets: self.secrets,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{self, SplitSpec};
    use crate::partition::{dirichlet_partition, single_group_partition, GroupBy};

    fn prepared(rows: usize, seed: u64) -> PreparedDataset {
        let schema = ingest::synth::adult_synth_schema();
        let csv = ingest::synth::adult_synth_csv(rows, seed);
        let loaded = ingest::load_csv_text(&csv, &schema).unwrap();
        ingest::prepare_table(&loaded, &schema, &SplitSpec { test_fraction: 0.3, seed }, "test")
            .unwrap()
    }

    fn engine_config(beta: f64, rounds: u32) -> EngineConfig {
        EngineConfig {
            beta,
            rounds,
            train: TrainOpts {
                learning_rate: 0.05,
                epochs: 1,
                batch_size: 32,
            },
            seed: 11,
            ..EngineConfig::default()
        }
    }

    #[test]
    fn weight_step_hand_values() {
        // Two clients at 0.4/0.6, beta 1, gaps 0.3/0.1 around mean 0.2:
        // the high-gap client sheds weight, the low-gap client gains it.
        assert!((weight_step(0.4, 1.0, 0.3, 0.2) - 0.3).abs() < 1e-15);
        assert!((weight_step(0.6, 1.0, 0.1, 0.2) - 0.7).abs() < 1e-15);
        // Half budget moves half as far.
        assert!((weight_step(0.4, 0.5, 0.3, 0.2) - 0.35).abs() < 1e-15);
    }

    #[test]
    fn metric_gap_hand_values() {
        // Undefined local metric: accuracy gap, flagged.
        let (d, fell_back) = metric_gap(None, -0.2, 0.7, 0.8, 1.0);
        assert!(fell_back);
        assert!((d - 0.1).abs() < 1e-15);
        // Pure fairness blend.
        let (d, fell_back) = metric_gap(Some(-0.5), -0.2, 0.7, 0.8, 1.0);
        assert!(!fell_back);
        assert!((d - 0.3).abs() < 1e-15);
        // Half blend.
        let (d, _) = metric_gap(Some(-0.5), -0.2, 0.7, 0.8, 0.5);
        assert!((d - (0.5 * 0.3 + 0.5 * 0.1)).abs() < 1e-15);
        // eta = 1 is bitwise the plain fairness gap.
        let plain = (-0.2f64 - -0.5f64).abs();
        let (d, _) = metric_gap(Some(-0.5), -0.2, 0.7, 0.8, 1.0);
        assert_eq!(d.to_bits(), plain.to_bits());
    }

    #[test]
    fn beta_zero_leaves_weights_bitwise_unchanged() {
        for w in [0.0, 0.25, 0.4, 1.0] {
            for (delta, mean) in [(0.3, 0.2), (0.1, 0.2), (0.0, 0.0), (5.0, -3.0)] {
                assert_eq!(weight_step(w, 0.0, delta, mean).to_bits(), w.to_bits());
            }
        }
    }

    #[test]
    fn weight_step_clamps_at_zero() {
        assert_eq!(weight_step(0.1, 1.0, 0.9, 0.2), 0.0);
    }

    #[test]
    fn full_run_is_deterministic_and_learns() {
        let data = prepared(1200, 3);
        let part = dirichlet_partition(&data.train, 3, 1.0, GroupBy::Sensitive, 5).unwrap();
        let strategies = vec![DebiasStrategy::LocalReweigh; 3];
        let run = |_: ()| {
            let engine =
                FedEngine::setup(engine_config(1.0, 6), &data, &part, &strategies).unwrap();
            engine.run().unwrap()
        };
        let a = run(());
        let b = run(());
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.final_theta, b.final_theta);
        assert_eq!(a.rows.len(), 6);
        let last = a.rows.last().unwrap();
        assert!(last.acc_global > 0.7, "train acc {}", last.acc_global);
        assert!(last.test.acc > 0.65, "test acc {}", last.test.acc);
        assert_eq!(
            last.per_client.iter().map(|c| c.n_k).sum::<u64>(),
            data.train.n_rows() as u64
        );
        assert_eq!(last.theta.len(), data.train.n_features() + 1);
    }

    #[test]
    fn exchanged_metric_matches_direct_decomposition() {
        let data = prepared(900, 7);
        let part = dirichlet_partition(&data.train, 4, 2.0, GroupBy::Sensitive, 1).unwrap();
        let strategies = vec![DebiasStrategy::None; 4];
        let mut engine =
            FedEngine::setup(engine_config(1.0, 2), &data, &part, &strategies).unwrap();
        engine.bootstrap().unwrap();
        let stats = engine.stats.unwrap();
        // God view: sum the components directly.
        let direct: f64 = engine
            .clients
            .iter()
            .map(|c| {
                let census = metrics::census(&engine.theta, &c.data).unwrap();
                metrics::m_global_component(&census, &stats, engine.n_total)
            })
            .sum();
        let row = engine.round(1).unwrap();
        let k = engine.clients.len() as f64;
        let tol = 4.0 * k / (1u64 << 24) as f64;
        assert!(
            (row.exchange.f_global - direct).abs() < tol,
            "{} vs {direct}",
            row.exchange.f_global
        );
    }

    #[test]
    fn single_group_partition_engages_fallback_everywhere() {
        let data = prepared(1000, 9);
        let part = single_group_partition(&data.train, 2, 3, 4).unwrap();
        let strategies = vec![DebiasStrategy::LocalReweigh; 5];
        let engine = FedEngine::setup(engine_config(1.0, 4), &data, &part, &strategies).unwrap();
        let result = engine.run().unwrap();
        // Every client's local metric is undefined in every round.
        assert_eq!(result.undefined_fk_events, 5 * 4);
        for row in &result.rows {
            for client in &row.per_client {
                assert!(client.f_k.is_none());
            }
        }
    }

    #[test]
    fn collapsed_weights_trigger_fedavg_fallback() {
        let data = prepared(800, 2);
        let part = dirichlet_partition(&data.train, 3, 1.0, GroupBy::Sensitive, 8).unwrap();
        let strategies = vec![DebiasStrategy::None; 3];
        let mut engine =
            FedEngine::setup(engine_config(0.5, 2), &data, &part, &strategies).unwrap();
        engine.bootstrap().unwrap();
        for client in &mut engine.clients {
            client.weight = 0.0;
        }
        // beta 0 keeps the zeros through the update, forcing the fallback.
        engine.cfg.beta = 0.0;
        let row = engine.round(1).unwrap();
        assert_eq!(engine.fallback_rounds, vec![1]);
        assert!(row.exchange.weight_sum > 0.9);
        for client in &engine.clients {
            assert_eq!(client.weight, client.base_weight);
        }
    }

    #[test]
    fn bootstrap_rejects_degenerate_federations() {
        // All rows in one sensitive group: SPD anchors are zero for the
        // other group and the bootstrap must abort.
        let n = 40;
        let features: Vec<f64> = (0..n).map(|i| f64::from(i)).collect();
        let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let sensitive = vec![1u8; n as usize];
        let ds = ingest::TabularDataset::from_parts(
            vec!["x".to_string()],
            features,
            labels,
            sensitive,
        )
        .unwrap();
        let prepared = PreparedDataset {
            train: ds.clone(),
            test: ds,
            meta: crate::ingest::PrepareMeta {
                version: 1,
                source: "inline".into(),
                schema_digest: String::new(),
                n_raw_rows: n as usize,
                dropped_rows: 0,
                dropped_features: vec![],
                split: SplitSpec::default(),
                feature_names: vec!["x".to_string()],
            },
        };
        let part = dirichlet_partition(&prepared.train, 2, 1.0, GroupBy::Label, 0).unwrap();
        let mut cfg = engine_config(1.0, 2);
        cfg.metric = MetricKind::Spd;
        let mut engine =
            FedEngine::setup(cfg, &prepared, &part, &[DebiasStrategy::None; 2]).unwrap();
        assert!(matches!(
            engine.bootstrap(),
            Err(FedError::DegenerateBootstrap(_))
        ));
    }

    #[test]
    fn global_reweigh_table_matches_pooled_computation() {
        let data = prepared(700, 4);
        let part = dirichlet_partition(&data.train, 3, 0.5, GroupBy::Sensitive, 2).unwrap();
        let strategies = vec![DebiasStrategy::GlobalReweigh; 3];
        let mut engine =
            FedEngine::setup(engine_config(0.0, 1), &data, &part, &strategies).unwrap();
        engine.bootstrap().unwrap();
        let expected = ReweighTable::from_census(&AyCensus::from_dataset(&data.train));
        for client in &engine.clients {
            match &client.debias {
                DebiasState::Reweigh(table) => assert_eq!(*table, expected),
                other => panic!("expected reweigh state, got {other:?}"),
            }
        }
    }

    #[test]
    fn transcript_passes_privacy_audit() {
        let data = prepared(800, 6);
        let part = dirichlet_partition(&data.train, 4, 1.0, GroupBy::Sensitive, 3).unwrap();
        let strategies = vec![DebiasStrategy::LocalReweigh; 4];
        let engine = FedEngine::setup(engine_config(1.0, 5), &data, &part, &strategies).unwrap();
        let result = engine.run().unwrap();
        let report = crate::secagg::privacy_audit(
            &result.transcript,
            &result.secrets,
            &FixedPointCodec::default(),
        );
        assert!(report.passed(), "findings: {:?}", report.findings);
        assert!(report.shares_checked > 0);
    }
}
