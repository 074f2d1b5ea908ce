//! The alternating server/client protocol: server alignment on labeled
//! data, client alignment on pseudo-labeled data, FedAvg that leaves
//! batch-norm tensors alone, and byte-exact communication accounting.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignlosses::{cdd_loss, cov_loss, cross_entropy, CddConfig, ClassSubset, CovConfig, LossError};
use crate::datagen::{DataError, DomainDataset};
use crate::featdist::{sample_class_features, FeatDistError, GaussianClassBank};
use crate::nncore::{argmax, sgd_step, Mode, ModelParams, Network, NnError, OptimizerState, Tensor};
use crate::pseudolabel::{generate_pseudo_labels_with_passes, PseudoLabelError, PseudoLabelSet, DEFAULT_PASSES};
use crate::seeding::{derive_seed, rng_for, stream};

#[derive(Debug, Error)]
pub enum FedError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    FeatDist(#[from] FeatDistError),
    #[error(transparent)]
    PseudoLabel(#[from] PseudoLabelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("aggregation: {0}")]
    Aggregation(String),
    #[error("message decoding failed at byte {offset}: {reason}")]
    Decode { offset: usize, reason: String },
}

/// Which loss terms the stages use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TrainingMode {
    /// `CE + α·CDD + β·COV` on server and clients.
    #[default]
    Uap,
    /// Cross-entropy only: supervised server, pseudo-labeled clients.
    SsflBaseline,
    /// `CE + α·CDD`.
    CeCdd,
}

impl TrainingMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainingMode::Uap => "uap",
            TrainingMode::SsflBaseline => "ssfl-baseline",
            TrainingMode::CeCdd => "ce-cdd",
        }
    }
}

/// Everything a stage needs besides its data and model.
#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub mode: TrainingMode,
    pub alpha: f64,
    pub beta: f64,
    pub cdd: CddConfig,
    /// Also carries `γ` and `λ`; `λ` is the Gaussian bank variance.
    pub cov: CovConfig,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub pseudo_label_passes: usize,
    /// Server starts each round from the aggregated global model (true)
    /// or from its own previous parameters (false).
    pub server_from_global: bool,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            mode: TrainingMode::Uap,
            alpha: 1.0,
            beta: 1.0,
            cdd: CddConfig::default(),
            cov: CovConfig::default(),
            batch_size: 64,
            local_epochs: 5,
            pseudo_label_passes: DEFAULT_PASSES,
            server_from_global: true,
        }
    }
}

impl StageConfig {
    /// `α` after the mode is applied.
    pub fn effective_alpha(&self) -> f64 {
        match self.mode {
            TrainingMode::SsflBaseline => 0.0,
            _ => self.alpha,
        }
    }

    /// `β` after the mode is applied.
    pub fn effective_beta(&self) -> f64 {
        match self.mode {
            TrainingMode::Uap => self.beta,
            _ => 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), FedError> {
        let bad = |m: String| Err(FedError::InvalidConfig(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size {} < 2", self.batch_size));
        }
        if self.local_epochs == 0 {
            return bad("local_epochs must be >= 1".into());
        }
        if self.pseudo_label_passes == 0 {
            return bad("pseudo_label_passes must be >= 1".into());
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be finite and >= 0"));
            }
        }
        if !(self.cov.lambda > 0.0 && self.cov.lambda.is_finite()) {
            return bad(format!("lambda = {} must be > 0", self.cov.lambda));
        }
        if !(self.cov.gamma >= 0.0 && self.cov.gamma.is_finite()) {
            return bad(format!("gamma = {} must be >= 0", self.cov.gamma));
        }
        self.cdd.validate()?;
        Ok(())
    }
}

/// Loss components of one minibatch (unweighted; `total` is weighted).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchLoss {
    pub ce: f64,
    pub cdd: f64,
    pub cov: f64,
    pub total: f64,
    pub cdd_skipped: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageTrace {
    pub batches: Vec<BatchLoss>,
}

impl StageTrace {
    fn mean(&self, f: impl Fn(&BatchLoss) -> f64) -> f64 {
        if self.batches.is_empty() {
            return 0.0;
        }
        self.batches.iter().map(f).sum::<f64>() / self.batches.len() as f64
    }

    pub fn mean_ce(&self) -> f64 {
        self.mean(|b| b.ce)
    }

    pub fn mean_cdd(&self) -> f64 {
        self.mean(|b| b.cdd)
    }

    pub fn mean_cov(&self) -> f64 {
        self.mean(|b| b.cov)
    }

    pub fn mean_total(&self) -> f64 {
        self.mean(|b| b.total)
    }

    pub fn cdd_skips(&self) -> usize {
        self.batches.iter().filter(|b| b.cdd_skipped).count()
    }
}

/// Classes of the batch that enter CDD, and the rows of each.
fn select_cdd_classes(labels: &[usize], cfg: &CddConfig, seed: u64) -> BTreeMap<usize, Vec<usize>> {
    let mut rows: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        rows.entry(l).or_default().push(i);
    }
    let min = cfg.min_per_class();
    rows.retain(|_, r| r.len() >= min);
    if let Some(n) = cfg.samples_per_class {
        rows.values_mut().for_each(|r| r.truncate(n));
    }
    if let ClassSubset::Random(s) = cfg.class_subset {
        if rows.len() > s {
            let mut keys: Vec<usize> = rows.keys().copied().collect();
            keys.shuffle(&mut rng_for(&[stream::CLASS_SUBSET, seed]));
            keys.truncate(s);
            rows.retain(|k, _| keys.contains(k));
        }
    }
    rows
}

/// One SGD step of `CE + α·CDD + β·COV` on `(x, targets)`.
pub fn train_batch(
    net: &mut Network,
    opt: &mut OptimizerState,
    x: &Tensor,
    targets: &[usize],
    cfg: &StageConfig,
    seed: u64,
) -> Result<BatchLoss, FedError> {
    let (alpha, beta) = (cfg.effective_alpha(), cfg.effective_beta());
    net.params_mut().zero_grad();
    let z = net.forward_features(x, Mode::Train)?;
    let logits = net.classify(&z)?;
    let ce = cross_entropy(&logits, targets)?;
    let mut dz = net.classify_backward(&z, &ce.grad)?;
    let mut out = BatchLoss {
        ce: ce.value,
        cdd: 0.0,
        cov: 0.0,
        total: ce.value,
        cdd_skipped: false,
    };
    if alpha > 0.0 {
        let chosen = select_cdd_classes(targets, &cfg.cdd, seed);
        if chosen.len() < 2 {
            out.cdd_skipped = true;
        } else {
            let bank = GaussianClassBank::from_params(net.params(), cfg.cov.lambda)?;
            let mut feats = BTreeMap::new();
            let mut samples = BTreeMap::new();
            for (&k, rows) in &chosen {
                feats.insert(k, z.select_rows(rows));
                let n = cfg.cdd.samples_per_class.unwrap_or(rows.len());
                let sample_seed = derive_seed(&[seed, k as u64]);
                samples.insert(k, sample_class_features(&bank, k, n, sample_seed)?);
            }
            let cdd = cdd_loss(&feats, &samples, &cfg.cdd)?;
            for (k, rows) in &chosen {
                let g = &cdd.feature_grads[k];
                for (j, &r) in rows.iter().enumerate() {
                    for (d, v) in dz.row_mut(r).iter_mut().zip(g.row(j)) {
                        *d += alpha * v;
                    }
                }
            }
            // z̃ = w_G^k + √λ·ε, so dL/dw_G^k is the row sum of the target grads.
            let reparameterized = if cfg.cdd.reparameterize { chosen.keys().copied().collect() } else { Vec::new() };
            for k in reparameterized {
                let g = &cdd.target_grads[&k];
                let mut col = vec![0.0; g.row_len()];
                for row in g.iter_rows() {
                    col.iter_mut().zip(row).for_each(|(c, v)| *c += alpha * v);
                }
                net.accumulate_classifier_column_grad(k, &col)?;
            }
            out.cdd = cdd.value;
            out.total += alpha * cdd.value;
        }
    }
    if beta > 0.0 {
        let cov = cov_loss(&z, &cfg.cov)?;
        dz.add_scaled(&cov.grad, beta);
        out.cov = cov.value;
        out.total += beta * cov.value;
    }
    net.backward(&dz)?;
    sgd_step(net.params_mut(), opt);
    Ok(out)
}

/// `epochs` passes of shuffled minibatches. A trailing batch with a
/// single example is dropped (batch statistics need two).
fn train_epochs(
    net: &mut Network,
    opt: &mut OptimizerState,
    data: &Tensor,
    targets: &[usize],
    cfg: &StageConfig,
    seed: u64,
) -> Result<StageTrace, FedError> {
    let n = data.rows();
    let mut trace = StageTrace::default();
    for epoch in 0..cfg.local_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_for(&[seed, epoch as u64]));
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let x = data.select_rows(idx);
            let y: Vec<usize> = idx.iter().map(|&i| targets[i]).collect();
            let batch_seed = derive_seed(&[seed, epoch as u64, b as u64]);
            trace.batches.push(train_batch(net, opt, &x, &y, cfg, batch_seed)?);
        }
    }
    net.clear_cache();
    Ok(trace)
}

/// Labeled server: global model, `D_s` and the round-stepped optimizer.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub net: Network,
    pub data: DomainDataset,
    pub opt: OptimizerState,
}

/// Stage I: `L_CE + α·L_CDD + β·L_COV` on `D_s`, with the Gaussian targets
/// rebuilt from the current `w_G` before every batch.
pub fn server_stage(s: &mut ServerState, cfg: &StageConfig, seed: u64) -> Result<StageTrace, FedError> {
    cfg.validate()?;
    let labels = s.data.labels()?.to_vec();
    train_epochs(&mut s.net, &mut s.opt, s.data.examples(), &labels, cfg, seed)
}

/// Unlabeled client. Its dataset's labels are sequestered; only
/// [`DomainDataset::diagnostic_labels`] can read them, and nothing on the
/// training path calls it.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub data: DomainDataset,
    /// Local model; batch-norm tensors persist across rounds.
    pub net: Network,
    pub pseudo: Option<PseudoLabelSet>,
}

impl ClientState {
    pub fn new(id: usize, data: DomainDataset, init: &Network) -> Self {
        let mut net = init.clone();
        net.clear_cache();
        Self {
            id,
            data,
            net,
            pseudo: None,
        }
    }
}

/// Stage II: receive `global` (keeping local batch-norm tensors), refresh
/// pseudo-labels, then train on `CE(ŷ, ỹ) + α·CDD + β·COV` where the CDD
/// targets come from the received classifier.
pub fn client_stage(
    c: &mut ClientState,
    global: &ModelParams,
    cfg: &StageConfig,
    opt: &OptimizerState,
    seed: u64,
) -> Result<StageTrace, FedError> {
    cfg.validate()?;
    c.net.params_mut().copy_non_batch_norm_from(global)?;
    let pseudo = generate_pseudo_labels_with_passes(&c.net, c.data.examples(), cfg.pseudo_label_passes)?;
    let labels = pseudo.labels.clone();
    c.pseudo = Some(pseudo);
    let mut opt = opt.clone();
    train_epochs(&mut c.net, &mut opt, c.data.examples(), &labels, cfg, seed)
}

/// [`client_stage`] with externally supplied labels in place of
/// pseudo-labels (used to compare against plain supervised training).
pub fn client_stage_with_labels(
    c: &mut ClientState,
    global: &ModelParams,
    labels: &[usize],
    cfg: &StageConfig,
    opt: &OptimizerState,
    seed: u64,
) -> Result<StageTrace, FedError> {
    cfg.validate()?;
    if labels.len() != c.data.len() {
        return Err(FedError::InvalidConfig(format!(
            "{} injected labels for {} examples",
            labels.len(),
            c.data.len()
        )));
    }
    c.net.params_mut().copy_non_batch_norm_from(global)?;
    let mut opt = opt.clone();
    train_epochs(&mut c.net, &mut opt, c.data.examples(), labels, cfg, seed)
}

/// Weighted average of the non-batch-norm tensors; batch-norm tensors
/// come from `prev_global`. Each element's products are summed in sorted
/// order, so the result is bit-identical under any permutation of the
/// `(model, weight)` pairs.
pub fn aggregate(models: &[&ModelParams], weights: &[f64], prev_global: &ModelParams) -> Result<ModelParams, FedError> {
    if models.is_empty() {
        return Err(FedError::Aggregation("no models to aggregate".into()));
    }
    if models.len() != weights.len() {
        return Err(FedError::Aggregation(format!("{} models vs {} weights", models.len(), weights.len())));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(FedError::Aggregation("weights must be non-negative".into()));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(FedError::Aggregation(format!("weights sum to {sum}, not 1")));
    }
    for m in models {
        prev_global.check_compatible(m)?;
    }
    let mut out = prev_global.clone();
    out.zero_grad();
    let mut terms = vec![0.0; models.len()];
    for (ti, t) in out.tensors_mut().iter_mut().enumerate() {
        if t.is_batch_norm() {
            continue;
        }
        for (e, v) in t.value_mut().data_mut().iter_mut().enumerate() {
            for (slot, (m, w)) in terms.iter_mut().zip(models.iter().zip(weights)) {
                *slot = w * m.get(ti).value().data()[e];
            }
            terms.sort_by(f64::total_cmp);
            *v = terms.iter().sum();
        }
    }
    Ok(out)
}

// ---- messages -------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    ServerToClient,
    ClientToServer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundMessage {
    pub direction: Direction,
    pub round: usize,
    pub client: usize,
    pub scalar_count: usize,
    pub byte_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    pub messages: Vec<RoundMessage>,
}

impl CommLedger {
    pub fn record(&mut self, msg: RoundMessage) {
        self.messages.push(msg);
    }

    pub fn total_bytes(&self) -> usize {
        self.messages.iter().map(|m| m.byte_count).sum()
    }

    pub fn total_scalars(&self) -> usize {
        self.messages.iter().map(|m| m.scalar_count).sum()
    }

    pub fn round_bytes(&self, round: usize) -> usize {
        self.messages.iter().filter(|m| m.round == round).map(|m| m.byte_count).sum()
    }

    pub fn rounds(&self) -> usize {
        self.messages.iter().map(|m| m.round + 1).max().unwrap_or(0)
    }
}

/// Binary payload: tensor count, then per tensor the name, rank, extents
/// and little-endian `f64` values. Nothing but the model parameters.
pub fn serialize_params(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 * params.scalar_count() + 64 * params.len());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for t in params.tensors() {
        let name = t.name().as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        let shape = t.value().shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.value().data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], FedError> {
        let s = self.bytes.get(self.pos..self.pos + n).ok_or(FedError::Decode {
            offset: self.pos,
            reason: format!("need {n} more bytes"),
        })?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, FedError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Decodes a payload into a copy of `template`, checking names and shapes.
pub fn deserialize_params(bytes: &[u8], template: &ModelParams) -> Result<ModelParams, FedError> {
    let mut r = Reader { bytes, pos: 0 };
    let count = r.u32()?;
    if count != template.len() {
        return Err(FedError::Decode {
            offset: 0,
            reason: format!("{count} tensors, expected {}", template.len()),
        });
    }
    let mut out = template.clone();
    for t in out.tensors_mut() {
        let at = r.pos;
        let len = r.u32()?;
        let name = r.take(len)?;
        if name != t.name().as_bytes() {
            return Err(FedError::Decode {
                offset: at,
                reason: format!("tensor name mismatch, expected {}", t.name()),
            });
        }
        let rank = r.u32()?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()?);
        }
        if shape != t.value().shape() {
            return Err(FedError::Decode {
                offset: at,
                reason: format!("shape {shape:?} for {}", t.name()),
            });
        }
        for v in t.value_mut().data_mut() {
            let b = r.take(8)?;
            *v = f64::from_le_bytes(b.try_into().expect("8 bytes"));
        }
    }
    if r.pos != bytes.len() {
        return Err(FedError::Decode {
            offset: r.pos,
            reason: "trailing bytes".into(),
        });
    }
    out.zero_grad();
    Ok(out)
}

/// Serializes, records and decodes one transfer.
fn transmit(
    params: &ModelParams,
    direction: Direction,
    round: usize,
    client: usize,
    ledger: &mut CommLedger,
) -> Result<ModelParams, FedError> {
    let bytes = serialize_params(params);
    ledger.record(RoundMessage {
        direction,
        round,
        client,
        scalar_count: params.scalar_count(),
        byte_count: bytes.len(),
    });
    deserialize_params(&bytes, params)
}

// ---- rounds ---------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ClientReport {
    pub client: usize,
    pub trace: StageTrace,
    /// Diagnostic: pseudo-label accuracy at the start of the stage.
    pub pseudo_label_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub server: StageTrace,
    pub clients: Vec<ClientReport>,
    pub bytes: usize,
}

/// A full federation: server, clients, the current global model and the
/// communication ledger.
#[derive(Debug, Clone)]
pub struct Federation {
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    /// Global model; its batch-norm tensors are the server's.
    pub global: Network,
    pub ledger: CommLedger,
    pub cfg: StageConfig,
    pub seed: u64,
    /// Rounds completed so far.
    pub round: usize,
}

impl Federation {
    /// Server and clients all start from `init`.
    pub fn new(
        init: Network,
        server_data: DomainDataset,
        client_data: Vec<DomainDataset>,
        cfg: StageConfig,
        lr0: f64,
        total_rounds: usize,
        seed: u64,
    ) -> Result<Self, FedError> {
        cfg.validate()?;
        if !server_data.labels_visible() {
            return Err(FedError::InvalidConfig("server data must have visible labels".into()));
        }
        let clients = client_data
            .into_iter()
            .enumerate()
            .map(|(i, d)| ClientState::new(i, d.hidden(), &init))
            .collect();
        Ok(Self {
            server: ServerState {
                net: init.clone(),
                data: server_data,
                opt: OptimizerState::new(lr0, total_rounds),
            },
            clients,
            global: init,
            ledger: CommLedger::default(),
            cfg,
            seed,
            round: 0,
        })
    }

    pub fn run_round(&mut self) -> Result<RoundReport, FedError> {
        run_round(self)
    }
}

/// One communication round: server stage, broadcast, parallel client
/// stages, upload, uniform FedAvg with batch-norm skip, lr step.
pub fn run_round(fed: &mut Federation) -> Result<RoundReport, FedError> {
    let round = fed.round;
    let total = fed.server.opt.total_rounds();
    if total > 0 && round >= total {
        return Err(FedError::InvalidConfig(format!("round {round} >= total rounds {total}")));
    }
    let cfg = fed.cfg.clone();
    if cfg.server_from_global {
        fed.server.net.params_mut().copy_values_from(fed.global.params())?;
    }
    fed.server.opt.set_round(round);
    let server_trace = server_stage(&mut fed.server, &cfg, derive_seed(&[stream::SERVER, fed.seed, round as u64]))?;
    let broadcast = fed.server.net.params().clone();

    let mut received = Vec::with_capacity(fed.clients.len());
    for c in &fed.clients {
        received.push(transmit(&broadcast, Direction::ServerToClient, round, c.id, &mut fed.ledger)?);
    }
    let opt = fed.server.opt.clone();
    let seed = fed.seed;
    let results: Vec<Result<StageTrace, FedError>> = fed
        .clients
        .par_iter_mut()
        .zip(received.par_iter())
        .map(|(c, g)| client_stage(c, g, &cfg, &opt, derive_seed(&[stream::CLIENT, seed, round as u64, c.id as u64])))
        .collect();
    let mut reports = Vec::with_capacity(fed.clients.len());
    let mut uploads = Vec::with_capacity(fed.clients.len());
    for (c, res) in fed.clients.iter().zip(results) {
        let trace = res?;
        let acc = match &c.pseudo {
            Some(p) => crate::pseudolabel::pseudo_label_accuracy(p, c.data.diagnostic_labels())?,
            None => 0.0,
        };
        reports.push(ClientReport {
            client: c.id,
            trace,
            pseudo_label_accuracy: acc,
        });
        uploads.push(transmit(c.net.params(), Direction::ClientToServer, round, c.id, &mut fed.ledger)?);
    }
    let new_global = if uploads.is_empty() {
        broadcast
    } else {
        let w = vec![1.0 / uploads.len() as f64; uploads.len()];
        let refs: Vec<&ModelParams> = uploads.iter().collect();
        aggregate(&refs, &w, &broadcast)?
    };
    fed.global.params_mut().copy_values_from(&new_global)?;
    fed.round += 1;
    fed.server.opt.set_round(fed.round);
    Ok(RoundReport {
        round,
        server: server_trace,
        clients: reports,
        bytes: fed.ledger.round_bytes(round),
    })
}

/// Top-1 accuracy of `net` (eval mode) on `test`.
pub fn evaluate(net: &Network, test: &DomainDataset) -> Result<f64, FedError> {
    if test.is_empty() {
        return Err(FedError::Data(DataError::InvalidArgument("empty evaluation set".into())));
    }
    let labels = test.labels()?;
    let mut hits = 0usize;
    let n = test.len();
    for start in (0..n).step_by(256) {
        let idx: Vec<usize> = (start..(start + 256).min(n)).collect();
        let logits = net.logits(&test.examples().select_rows(&idx))?;
        hits += logits
            .iter_rows()
            .zip(&idx)
            .filter(|(row, &i)| argmax(row) == labels[i])
            .count();
    }
    Ok(hits as f64 / n as f64)
}
