//! Federated averaging with honest clients and free riders.
//!
//! Each round the server sends the current global model `M_j` to the
//! participating clients, collects one update `G_{i,j}` per participant and
//! applies `M_{j+1} = M_j − η · mean(G_{·,j})`. Honest clients report
//! `G = M_j − M′` where `M′` is their locally trained model, so `η = 1`
//! reduces to plain model averaging.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{fabricate, AttackConfig, AttackError, FreeRiderState};
use crate::data::{Dataset, Partition};
use crate::model::{MlpSpec, ModelParams};
use crate::numkit::{sgd_step, Graph, NumError, SgdConfig, Tensor, Var};
use crate::privacy::{add_server_noise, clip_update, sample_participants, DpConfig, DpError};
use crate::seeding;

#[derive(Debug, Error)]
pub enum FedError {
    #[error("update from client {client_id} rejected: expected {expected} parameters in shape {expected_shapes:?}, got {found}")]
    Rejected {
        client_id: usize,
        expected: usize,
        expected_shapes: Vec<Vec<usize>>,
        found: usize,
    },
    #[error("client {client_id} has an empty shard")]
    EmptyShard { client_id: usize },
    #[error("aggregate called with no updates")]
    NoUpdates,
    #[error("invalid federation config: {0}")]
    Config(String),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalModel {
    pub params: ModelParams,
    pub round_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub round_index: usize,
    pub grad: ModelParams,
    /// A free rider submitted its cold-start fallback instead of its attack.
    #[serde(default)]
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedConfig {
    pub n_clients: usize,
    pub eta: f64,
    pub rounds: usize,
    pub snapshot_rounds: Vec<usize>,
    pub local: SgdConfig,
    pub seed: u64,
}

impl FedConfig {
    pub fn validate(&self) -> Result<(), FedError> {
        if self.n_clients == 0 {
            return Err(FedError::Config("n_clients must be positive".into()));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(FedError::Config(format!("eta must lie in (0,1], got {}", self.eta)));
        }
        if self.rounds == 0 {
            return Err(FedError::Config("rounds must be positive".into()));
        }
        if let Some(bad) = self.snapshot_rounds.iter().find(|&&r| r == 0 || r > self.rounds) {
            return Err(FedError::Config(format!(
                "snapshot round {bad} outside [1, {}]",
                self.rounds
            )));
        }
        self.local.validate()?;
        Ok(())
    }
}

/// Everything the server saw in one round. Detection consumes exactly one
/// record and nothing else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub eta: f64,
    pub model_before: GlobalModel,
    pub updates: Vec<ClientUpdate>,
    /// Result of aggregation alone, before any server noise.
    pub model_aggregated: GlobalModel,
    /// Global model sent out next round (aggregate plus server noise).
    pub model_after: GlobalModel,
    pub free_rider_ids: BTreeSet<usize>,
    pub participant_ids: BTreeSet<usize>,
}

impl RoundRecord {
    pub fn skipped(&self) -> bool {
        self.participant_ids.is_empty()
    }

    pub fn is_free_rider(&self, client_id: usize) -> bool {
        self.free_rider_ids.contains(&client_id)
    }
}

/// Minibatch SGD from the received model; returns `M_j − M′`.
pub fn local_train<R: Rng + ?Sized>(
    model: &GlobalModel,
    spec: &MlpSpec,
    features: &[f64],
    labels: &[usize],
    cfg: &SgdConfig,
    rng: &mut R,
) -> Result<ModelParams, NumError> {
    let mut params = model.params.to_tensors();
    let dim = spec.input_dim;
    let mut order: Vec<usize> = (0..labels.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut x = Vec::with_capacity(batch.len() * dim);
            let mut y = Vec::with_capacity(batch.len());
            for &i in batch {
                x.extend_from_slice(&features[i * dim..(i + 1) * dim]);
                y.push(labels[i]);
            }
            let mut g = Graph::new();
            let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
            let xv = g.constant(Tensor::matrix(batch.len(), dim, x)?);
            let logits = spec.logits(&mut g, &vars, xv)?;
            let loss = g.cross_entropy(logits, &y)?;
            let grads = g.backward(loss)?;
            let gs: Vec<Tensor> = vars
                .iter()
                .zip(&params)
                .map(|(v, p)| grads.get_or_zeros(*v, p.shape()))
                .collect();
            sgd_step(&mut params, &gs, cfg.learning_rate)?;
        }
    }
    let trained = ModelParams::from_tensors(&params);
    model.params.sub(&trained)
}

/// `M_{j+1} = M_j − η · (1/n) Σ G_{i,j}` with `n` the number of updates.
pub fn aggregate(model: &GlobalModel, updates: &[ClientUpdate], eta: f64) -> Result<GlobalModel, FedError> {
    if updates.is_empty() {
        return Err(FedError::NoUpdates);
    }
    let mut sum = model.params.zeros_like();
    for u in updates {
        if !u.grad.same_shape(&model.params) {
            return Err(FedError::Rejected {
                client_id: u.client_id,
                expected: model.params.len(),
                expected_shapes: model.params.shapes().to_vec(),
                found: u.grad.len(),
            });
        }
        sum.axpy(1.0, &u.grad)?;
    }
    let n = updates.len() as f64;
    let mut next = model.params.clone();
    for (m, s) in next.values_mut().iter_mut().zip(sum.values()) {
        *m -= eta * (s / n);
    }
    Ok(GlobalModel {
        params: next,
        round_index: model.round_index + 1,
    })
}

/// Seeded choice of free-rider ids, fixed for the whole run.
pub fn choose_free_riders(n_clients: usize, count: usize, seed: u64) -> BTreeSet<usize> {
    let count = count.min(n_clients);
    let mut rng = seeding::stream(seed, &[seeding::FREE_RIDERS]);
    index::sample(&mut rng, n_clients, count).into_iter().collect()
}

/// Population standard deviation of a flat vector.
pub fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if values.is_empty() {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Federation state across rounds.
pub struct Federation {
    cfg: FedConfig,
    spec: MlpSpec,
    shards: Vec<(Vec<f64>, Vec<usize>)>,
    free_riders: BTreeSet<usize>,
    attack: AttackConfig,
    dp: Option<DpConfig>,
    global: GlobalModel,
    rider_states: BTreeMap<usize, FreeRiderState>,
}

impl Federation {
    pub fn new(
        cfg: FedConfig,
        spec: MlpSpec,
        dataset: &Dataset,
        partition: &Partition,
        free_riders: BTreeSet<usize>,
        attack: AttackConfig,
        dp: Option<DpConfig>,
    ) -> Result<Self, FedError> {
        cfg.validate()?;
        attack.validate()?;
        if let Some(dp) = &dp {
            dp.validate()?;
        }
        if partition.num_clients() != cfg.n_clients {
            return Err(FedError::Config(format!(
                "partition has {} shards for {} clients",
                partition.num_clients(),
                cfg.n_clients
            )));
        }
        if spec.input_dim != dataset.feature_dim() || spec.num_classes != dataset.num_classes() {
            return Err(FedError::Config(format!(
                "model expects {}→{} but dataset is {}-dimensional with {} classes",
                spec.input_dim,
                spec.num_classes,
                dataset.feature_dim(),
                dataset.num_classes()
            )));
        }
        if let Some(bad) = free_riders.iter().find(|&&id| id >= cfg.n_clients) {
            return Err(FedError::Config(format!("free rider id {bad} out of range")));
        }
        let shards = partition
            .shards
            .iter()
            .enumerate()
            .map(|(client_id, s)| {
                if s.is_empty() && !free_riders.contains(&client_id) {
                    return Err(FedError::EmptyShard { client_id });
                }
                Ok(dataset.gather(s))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let init = spec.init(&mut seeding::stream(cfg.seed, &[seeding::MODEL_INIT]));
        let rider_states = free_riders.iter().map(|&id| (id, FreeRiderState::new())).collect();
        Ok(Self {
            global: GlobalModel {
                params: init,
                round_index: 1,
            },
            cfg,
            spec,
            shards,
            free_riders,
            attack,
            dp,
            rider_states,
        })
    }

    pub fn config(&self) -> &FedConfig {
        &self.cfg
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn global(&self) -> &GlobalModel {
        &self.global
    }

    pub fn free_riders(&self) -> &BTreeSet<usize> {
        &self.free_riders
    }

    pub fn rider_state(&self, client_id: usize) -> Option<&FreeRiderState> {
        self.rider_states.get(&client_id)
    }

    /// Accuracy of the current global model on the union of honest shards.
    pub fn train_accuracy(&self) -> Result<f64, NumError> {
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for (id, (f, l)) in self.shards.iter().enumerate() {
            if !self.free_riders.contains(&id) {
                feats.extend_from_slice(f);
                labels.extend_from_slice(l);
            }
        }
        self.spec.accuracy(&self.global.params, &feats, &labels)
    }

    fn participants(&self, round: usize) -> BTreeSet<usize> {
        match &self.dp {
            Some(dp) => sample_participants(
                self.cfg.n_clients,
                dp.participation_ratio,
                &mut seeding::stream(self.cfg.seed, &[seeding::PARTICIPATION, dp.seed, round as u64]),
            ),
            None => (0..self.cfg.n_clients).collect(),
        }
    }

    /// Runs the next round and returns its record. A round nobody joins
    /// leaves the model unchanged.
    pub fn run_round(&mut self) -> Result<RoundRecord, FedError> {
        let round = self.global.round_index;
        let participants = self.participants(round);
        let model_before = self.global.clone();

        for id in participants.iter().filter(|id| self.free_riders.contains(id)) {
            if let Some(st) = self.rider_states.get_mut(id) {
                st.receive(round, model_before.params.clone());
            }
        }

        let ids: Vec<usize> = participants.iter().copied().collect();
        let updates = ids
            .par_iter()
            .map(|&id| self.client_update(id, &model_before))
            .collect::<Result<Vec<_>, FedError>>()?;

        if updates.is_empty() {
            log::info!("[fedsim] round {round}: no participants, round skipped");
            self.global.round_index += 1;
            let unchanged = GlobalModel {
                params: model_before.params.clone(),
                round_index: round + 1,
            };
            return Ok(RoundRecord {
                round,
                eta: self.cfg.eta,
                model_before,
                updates,
                model_aggregated: unchanged.clone(),
                model_after: unchanged,
                free_rider_ids: self.free_riders.clone(),
                participant_ids: participants,
            });
        }

        let aggregated = aggregate(&model_before, &updates, self.cfg.eta)?;
        let mut after = aggregated.clone();
        if let Some(dp) = &self.dp {
            let mut rng = seeding::stream(self.cfg.seed, &[seeding::SERVER_NOISE, dp.seed, round as u64]);
            add_server_noise(&mut after.params, dp.server_noise_std, &mut rng);
        }
        if !after.params.is_finite() {
            return Err(NumError::NonFinite {
                context: format!("global model after round {round}"),
            }
            .into());
        }
        self.global = after.clone();
        Ok(RoundRecord {
            round,
            eta: self.cfg.eta,
            model_before,
            updates,
            model_aggregated: aggregated,
            model_after: after,
            free_rider_ids: self.free_riders.clone(),
            participant_ids: participants,
        })
    }

    fn client_update(&self, id: usize, model: &GlobalModel) -> Result<ClientUpdate, FedError> {
        let round = model.round_index;
        if let Some(state) = self.rider_states.get(&id) {
            let mut rng = seeding::stream(
                self.cfg.seed,
                &[seeding::ATTACK, self.attack.seed, id as u64, round as u64],
            );
            let made = fabricate(&self.attack, state, &model.params, &mut rng);
            return Ok(ClientUpdate {
                client_id: id,
                round_index: round,
                grad: made.grad,
                fallback: made.fallback,
            });
        }
        let (features, labels) = &self.shards[id];
        if labels.is_empty() {
            return Err(FedError::EmptyShard { client_id: id });
        }
        let mut rng = seeding::stream(self.cfg.seed, &[seeding::LOCAL_TRAIN, id as u64, round as u64]);
        let mut grad = local_train(model, &self.spec, features, labels, &self.cfg.local, &mut rng)?;
        if let Some(dp) = &self.dp {
            grad = clip_update(&grad, dp.clip_bound);
        }
        Ok(ClientUpdate {
            client_id: id,
            round_index: round,
            grad,
            fallback: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{partition_iid, synth_dataset};

    fn scalar_model(v: f64) -> GlobalModel {
        GlobalModel {
            params: ModelParams::new(vec![vec![1]], vec![v]).unwrap(),
            round_index: 1,
        }
    }

    fn scalar_update(id: usize, v: f64) -> ClientUpdate {
        ClientUpdate {
            client_id: id,
            round_index: 1,
            grad: ModelParams::new(vec![vec![1]], vec![v]).unwrap(),
            fallback: false,
        }
    }

    #[test]
    fn aggregate_hand_case() {
        let m = scalar_model(10.0);
        let ups = [scalar_update(0, 1.0), scalar_update(1, 2.0), scalar_update(2, 3.0)];
        let next = aggregate(&m, &ups, 0.5).unwrap();
        assert_eq!(next.params.values(), &[9.0]);
        assert_eq!(next.round_index, 2);
    }

    #[test]
    fn zero_updates_are_fixed_point() {
        let m = scalar_model(3.25);
        let next = aggregate(&m, &[scalar_update(0, 0.0), scalar_update(1, 0.0)], 1.0).unwrap();
        assert_eq!(next.params, m.params);
    }

    #[test]
    fn single_client_eta_one_lands_on_trained_model() {
        let before = ModelParams::new(vec![vec![3]], vec![0.5, -1.0, 2.0]).unwrap();
        let trained = ModelParams::new(vec![vec![3]], vec![0.25, -0.5, 1.0]).unwrap();
        let m = GlobalModel {
            params: before.clone(),
            round_index: 1,
        };
        let u = ClientUpdate {
            client_id: 0,
            round_index: 1,
            grad: before.sub(&trained).unwrap(),
            fallback: false,
        };
        assert_eq!(aggregate(&m, &[u], 1.0).unwrap().params, trained);
    }

    #[test]
    fn wrong_shape_rejected_with_client_id() {
        let m = scalar_model(1.0);
        let bad = ClientUpdate {
            client_id: 7,
            round_index: 1,
            grad: ModelParams::zeros(vec![vec![2]]),
            fallback: false,
        };
        match aggregate(&m, &[scalar_update(0, 1.0), bad], 1.0) {
            Err(FedError::Rejected { client_id, .. }) => assert_eq!(client_id, 7),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(aggregate(&m, &[], 1.0), Err(FedError::NoUpdates)));
    }

    fn tiny_setup() -> (MlpSpec, Dataset) {
        let spec = MlpSpec {
            input_dim: 4,
            hidden: vec![3],
            num_classes: 3,
        };
        (spec, synth_dataset(3, 10, 4, 0.1, 1).unwrap())
    }

    #[test]
    fn no_training_gives_zero_update() {
        let (spec, ds) = tiny_setup();
        let model = GlobalModel {
            params: spec.init(&mut seeding::stream(0, &[])),
            round_index: 1,
        };
        let (f, l) = ds.gather(&(0..10).collect::<Vec<_>>());
        let zero_epochs = SgdConfig {
            learning_rate: 0.1,
            batch_size: 4,
            epochs: 0,
        };
        let g = local_train(&model, &spec, &f, &l, &zero_epochs, &mut seeding::stream(1, &[])).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
        let zero_lr = SgdConfig {
            learning_rate: 0.0,
            batch_size: 4,
            epochs: 2,
        };
        let g = local_train(&model, &spec, &f, &l, &zero_lr, &mut seeding::stream(1, &[])).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_one_sample_step_matches_closed_form() {
        // softmax regression: ∂L/∂W = xᵀ(p − e_y), ∂L/∂b = p − e_y
        let spec = MlpSpec {
            input_dim: 3,
            hidden: vec![],
            num_classes: 2,
        };
        let w = [0.2, -0.1, 0.4, 0.3, -0.5, 0.05];
        let b = [0.1, -0.2];
        let params = ModelParams::new(spec.shapes(), w.iter().chain(&b).copied().collect()).unwrap();
        let model = GlobalModel { params, round_index: 1 };
        let x = [0.5, 0.25, 1.0];
        let y = 1usize;
        let z: Vec<f64> = (0..2)
            .map(|c| (0..3).map(|i| x[i] * w[i * 2 + c]).sum::<f64>() + b[c])
            .collect();
        let zmax = z[0].max(z[1]);
        let denom: f64 = z.iter().map(|v| (v - zmax).exp()).sum();
        let p: Vec<f64> = z.iter().map(|v| (v - zmax).exp() / denom).collect();
        let resid: Vec<f64> = (0..2).map(|c| p[c] - if c == y { 1.0 } else { 0.0 }).collect();
        let lr = 0.3;
        let mut expected = Vec::new();
        for xi in x {
            for r in &resid {
                expected.push(lr * xi * r);
            }
        }
        expected.extend(resid.iter().map(|r| lr * r));
        let cfg = SgdConfig {
            learning_rate: lr,
            batch_size: 1,
            epochs: 1,
        };
        let g = local_train(&model, &spec, &x, &[y], &cfg, &mut seeding::stream(0, &[])).unwrap();
        for (a, e) in g.values().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-14, "{a} vs {e}");
        }
    }

    fn federation(riders: usize, attack: AttackConfig, dp: Option<DpConfig>) -> Federation {
        let (spec, ds) = tiny_setup();
        let cfg = FedConfig {
            n_clients: 6,
            eta: 0.7,
            rounds: 4,
            snapshot_rounds: vec![4],
            local: SgdConfig {
                learning_rate: 0.1,
                batch_size: 2,
                epochs: 1,
            },
            seed: 11,
        };
        let part = partition_iid(&ds, 6, 2).unwrap();
        let fr = choose_free_riders(6, riders, 11);
        Federation::new(cfg, spec, &ds, &part, fr, attack, dp).unwrap()
    }

    #[test]
    fn records_reconstruct_by_aggregation() {
        let mut fed = federation(1, AttackConfig::random(1e-4), None);
        for _ in 0..4 {
            let rec = fed.run_round().unwrap();
            let again = aggregate(&rec.model_before, &rec.updates, rec.eta).unwrap();
            for (a, b) in again.params.values().iter().zip(rec.model_after.params.values()) {
                assert!((a - b).abs() <= 1e-12);
            }
            assert_eq!(rec.participant_ids.len(), 6);
        }
    }

    #[test]
    fn all_zero_riders_freeze_model() {
        let mut attack = AttackConfig::random(1e-4);
        attack.range = 0.0;
        attack.kind = crate::attacks::AttackKind::Delta;
        attack.first_round_fallback = crate::attacks::Fallback::Zeros;
        let mut fed = federation(6, attack, None);
        let start = fed.global().params.clone();
        for _ in 0..3 {
            fed.run_round().unwrap();
        }
        assert_eq!(fed.global().params, start);
    }

    #[test]
    fn dp_riders_only_store_joined_rounds() {
        let dp = DpConfig {
            participation_ratio: 0.5,
            ..DpConfig::default()
        };
        let mut fed = federation(3, AttackConfig::dp_delta(true), Some(dp));
        let mut joined: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for _ in 0..4 {
            let rec = fed.run_round().unwrap();
            for &id in rec.participant_ids.intersection(&rec.free_rider_ids) {
                joined.entry(id).or_default().push(rec.round);
            }
            for &id in &rec.free_rider_ids {
                let stored = fed.rider_state(id).unwrap().rounds();
                let history = joined.get(&id).cloned().unwrap_or_default();
                assert!(stored.iter().all(|r| history.contains(r)));
            }
        }
    }

    #[test]
    fn free_rider_choice_is_seeded() {
        assert_eq!(choose_free_riders(100, 20, 3), choose_free_riders(100, 20, 3));
        assert_eq!(choose_free_riders(100, 20, 3).len(), 20);
        assert_eq!(choose_free_riders(5, 9, 3).len(), 5);
    }

    #[test]
    fn config_rejects_bad_eta_and_snapshots() {
        let mut cfg = FedConfig {
            n_clients: 2,
            eta: 1.5,
            rounds: 3,
            snapshot_rounds: vec![1],
            local: SgdConfig::default(),
            seed: 0,
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("eta must lie in (0,1]"));
        cfg.eta = 1.0;
        cfg.snapshot_rounds = vec![4];
        assert!(cfg.validate().is_err());
    }
}
