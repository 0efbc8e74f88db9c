//! Synchronized federated pretraining: broadcast the shared part, train
//! locally, upload, aggregate by sample-count-weighted mean, repeat.
//! Personalized parameters never leave their client.

use crate::datagen::LabeledDataset;
use crate::error::{Error, Result};
use crate::harness::a_total;
use crate::numerics::{Mlp, Tensor};
use crate::parallel;
use crate::rng::{self, tag};
use crate::splitmodel::SplitModel;

/// The globally shared submodules, as held by the server.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalParams {
    pub extractor: Mlp,
    pub head: Mlp,
}

impl GlobalParams {
    pub fn from_model(model: &SplitModel) -> Self {
        GlobalParams {
            extractor: model.global_extractor.clone(),
            head: model.global_head.clone(),
        }
    }

    /// Install into a client model (the broadcast step).
    pub fn write_to(&self, model: &mut SplitModel) {
        let frozen_e = model.global_extractor.frozen;
        let frozen_h = model.global_head.frozen;
        model.global_extractor = self.extractor.clone();
        model.global_head = self.head.clone();
        model.global_extractor.frozen = frozen_e;
        model.global_head.frozen = frozen_h;
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.extractor.named_params("global_extractor");
        out.extend(self.head.named_params("global_head"));
        out
    }

    fn tensors(&self) -> Vec<&Tensor> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    fn from_tensors(template: &GlobalParams, tensors: Vec<Tensor>) -> Self {
        let mut out = template.clone();
        let mut iter = tensors.into_iter();
        for layer in out.extractor.layers.iter_mut() {
            layer.weight = iter.next().expect("extractor weight");
            layer.bias = iter.next().expect("extractor bias");
        }
        for layer in out.head.layers.iter_mut() {
            layer.weight = iter.next().expect("head weight");
            layer.bias = iter.next().expect("head bias");
        }
        out
    }
}

/// Aggregation rule applied to the uploaded shared parts. Only the
/// sample-count-weighted mean is implemented; the enum is the extension
/// point for proximal or variance-reduced variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AggregationStrategy {
    FedAvg,
}

/// One client's full training-time state.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    pub model: SplitModel,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    /// Training sample count; the aggregation and accuracy weight.
    pub train_count: usize,
    /// Master seed all of this client's streams derive from.
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct ServerState {
    pub global: GlobalParams,
    pub round: usize,
    pub strategy: AggregationStrategy,
}

/// Weighted mean of tensor lists: out = sum_j (n_j / n) * t_j, n = sum n_j.
/// Shapes must agree across entries; every weight must be positive.
pub fn aggregate(parts: &[(usize, Vec<&Tensor>)]) -> Result<Vec<Tensor>> {
    let first = parts.first().ok_or(Error::EmptyInput {
        context: "aggregate",
    })?;
    let total: usize = parts.iter().map(|(n, _)| n).sum();
    if parts.iter().any(|(n, _)| *n == 0) || total == 0 {
        return Err(Error::InvalidParameter {
            name: "sample_counts",
            message: "every client weight must be positive".into(),
        });
    }
    for (_, tensors) in parts {
        if tensors.len() != first.1.len() {
            return Err(Error::ShapeMismatch {
                context: "aggregate",
                lhs: vec![first.1.len()],
                rhs: vec![tensors.len()],
            });
        }
        for (t, f) in tensors.iter().zip(&first.1) {
            if t.shape() != f.shape() {
                return Err(Error::ShapeMismatch {
                    context: "aggregate",
                    lhs: t.shape().to_vec(),
                    rhs: f.shape().to_vec(),
                });
            }
        }
    }
    let n = total as f64;
    let mut out: Vec<Tensor> = first.1.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
    for (count, tensors) in parts {
        let w = *count as f64 / n;
        for (acc, t) in out.iter_mut().zip(tensors) {
            for (a, v) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += w * v;
            }
        }
    }
    Ok(out)
}

/// Aggregate the uploaded shared parts of all clients.
pub fn aggregate_global(uploads: &[(usize, GlobalParams)]) -> Result<GlobalParams> {
    let parts: Vec<(usize, Vec<&Tensor>)> = uploads
        .iter()
        .map(|(n, g)| (*n, g.tensors()))
        .collect();
    let tensors = aggregate(&parts)?;
    Ok(GlobalParams::from_tensors(&uploads[0].1, tensors))
}

/// Per-client numbers for one round.
#[derive(Clone, Debug)]
pub struct ClientRoundMetrics {
    pub client: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct RoundMetrics {
    pub round: usize,
    pub mean_train_loss: f64,
    pub a_total: f64,
    pub per_client: Vec<ClientRoundMetrics>,
}

/// One synchronized round: broadcast, local training, staged upload,
/// aggregation. Clients may run on a worker pool; uploads are aggregated in
/// client-id order so the result is independent of scheduling.
pub fn run_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    local_epochs: usize,
    lr: f64,
    workers: usize,
) -> Result<RoundMetrics> {
    if local_epochs == 0 {
        return Err(Error::InvalidParameter {
            name: "local_epochs",
            message: "must be >= 1".into(),
        });
    }
    let round = server.round;
    let global = server.global.clone();
    let results = parallel::map_mut(clients, workers, |_, client| -> Result<_> {
        global.write_to(&mut client.model);
        let mut order_rng = rng::stream(client.seed, &[tag::TRAIN_ORDER, client.id as u64, round as u64]);
        let trace = client
            .model
            .local_train(&client.train, local_epochs, lr, &mut order_rng)?;
        let accuracy = client.model.evaluate(&client.test)?;
        // Stage the upload now; the server must not see later mutations.
        let upload = GlobalParams::from_model(&client.model);
        Ok((trace[trace.len() - 1], accuracy, upload))
    });
    let mut uploads = Vec::with_capacity(clients.len());
    let mut per_client = Vec::with_capacity(clients.len());
    for (client, result) in clients.iter().zip(results) {
        let (train_loss, test_accuracy, upload) = result?;
        uploads.push((client.train_count, upload));
        per_client.push(ClientRoundMetrics {
            client: client.id,
            train_loss,
            test_accuracy,
        });
    }
    match server.strategy {
        AggregationStrategy::FedAvg => {
            server.global = aggregate_global(&uploads)?;
        }
    }
    server.round += 1;
    let weights: Vec<(usize, f64)> = clients
        .iter()
        .zip(&per_client)
        .map(|(c, m)| (c.train_count, m.test_accuracy))
        .collect();
    Ok(RoundMetrics {
        round,
        mean_train_loss: per_client.iter().map(|m| m.train_loss).sum::<f64>()
            / per_client.len() as f64,
        a_total: a_total(&weights)?,
        per_client,
    })
}

/// Run `rounds` federated rounds. Returns the per-round metrics; the trained
/// state lives in `server` and `clients`, whose personalized parts feed the
/// expert pools.
pub fn pretrain(
    server: &mut ServerState,
    clients: &mut [ClientState],
    rounds: usize,
    local_epochs: usize,
    lr: f64,
    workers: usize,
) -> Result<Vec<RoundMetrics>> {
    if rounds == 0 {
        return Err(Error::InvalidParameter {
            name: "global_rounds",
            message: "must be >= 1".into(),
        });
    }
    if clients.is_empty() {
        return Err(Error::EmptyInput { context: "pretrain" });
    }
    let mut history = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        history.push(run_round(server, clients, local_epochs, lr, workers)?);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint;
    use crate::datagen::{generate_synthetic, partition_dirichlet, train_test_split, PartitionSpec};
    use crate::splitmodel::SplitConfig;

    fn small_config() -> SplitConfig {
        SplitConfig {
            input_dim: 4,
            feature_dim: 3,
            class_count: 2,
            hidden_dim: 5,
            enable_fp: true,
            enable_sp: true,
            enable_pp: true,
            pp_on_logits: false,
        }
    }

    fn build_clients(m: usize, seed: u64) -> (ServerState, Vec<ClientState>) {
        let data = generate_synthetic(2, 4, 30, 0.2, seed).unwrap();
        let spec = PartitionSpec {
            clients: m,
            shared_percent: 100.0,
            beta: 1.0,
            seed,
        };
        let partition = partition_dirichlet(&data, &spec).unwrap();
        let splits = train_test_split(&data, &partition, 0.8, seed).unwrap();
        let mut global_rng = rng::stream(seed, &[tag::INIT_GLOBAL]);
        let template = SplitModel::init(
            small_config(),
            &mut global_rng,
            &mut rng::stream(seed, &[tag::INIT_PERSONAL, u64::MAX]),
        )
        .unwrap();
        let server = ServerState {
            global: GlobalParams::from_model(&template),
            round: 0,
            strategy: AggregationStrategy::FedAvg,
        };
        let clients: Vec<ClientState> = (0..m)
            .map(|j| {
                let mut personal_rng = rng::stream(seed, &[tag::INIT_PERSONAL, j as u64]);
                let mut model = SplitModel::init(
                    small_config(),
                    &mut rng::stream(seed, &[tag::INIT_GLOBAL]),
                    &mut personal_rng,
                )
                .unwrap();
                server.global.write_to(&mut model);
                let train = data.subset(&splits[j].train);
                let test = data.subset(&splits[j].test);
                let train_count = train.len();
                ClientState {
                    id: j,
                    model,
                    train,
                    test,
                    train_count,
                    seed,
                }
            })
            .collect();
        (server, clients)
    }

    #[test]
    fn aggregate_single_client_is_identity() {
        let t = Tensor::from_vec(vec![1.5, -2.0]);
        let out = aggregate(&[(7, vec![&t])]).unwrap();
        assert_eq!(out[0], t);
    }

    #[test]
    fn aggregate_identical_params_is_identity() {
        let t = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = aggregate(&[(1, vec![&t]), (5, vec![&t]), (2, vec![&t])]).unwrap();
        assert_eq!(out[0], t);
    }

    #[test]
    fn aggregate_hand_weighted_mean() {
        // N=[1,3], tensors [2,4] and [6,8] -> [5,7]
        let a = Tensor::from_vec(vec![2.0, 4.0]);
        let b = Tensor::from_vec(vec![6.0, 8.0]);
        let out = aggregate(&[(1, vec![&a]), (3, vec![&b])]).unwrap();
        assert_eq!(out[0].data(), &[5.0, 7.0]);
    }

    #[test]
    fn aggregate_is_linear_in_inputs() {
        let a = Tensor::from_vec(vec![0.3, -1.1, 2.0]);
        let b = Tensor::from_vec(vec![1.0, 0.5, -0.25]);
        let base = aggregate(&[(2, vec![&a]), (3, vec![&b])]).unwrap();
        // Power-of-two scaling is exact in f64, so linearity holds bitwise.
        let scale = 4.0;
        let sa = Tensor::from_vec(a.data().iter().map(|v| v * scale).collect());
        let sb = Tensor::from_vec(b.data().iter().map(|v| v * scale).collect());
        let scaled = aggregate(&[(2, vec![&sa]), (3, vec![&sb])]).unwrap();
        for (x, y) in base[0].data().iter().zip(scaled[0].data()) {
            assert_eq!(x * scale, *y);
        }
        // General scalars agree to rounding error.
        let scale = 2.5;
        let sa = Tensor::from_vec(a.data().iter().map(|v| v * scale).collect());
        let sb = Tensor::from_vec(b.data().iter().map(|v| v * scale).collect());
        let scaled = aggregate(&[(2, vec![&sa]), (3, vec![&sb])]).unwrap();
        for (x, y) in base[0].data().iter().zip(scaled[0].data()) {
            assert!((x * scale - y).abs() <= 1e-15 * y.abs());
        }
    }

    #[test]
    fn aggregate_rejects_bad_inputs() {
        let a = Tensor::from_vec(vec![1.0]);
        let b = Tensor::from_vec(vec![1.0, 2.0]);
        assert!(aggregate(&[]).is_err());
        assert!(aggregate(&[(1, vec![&a]), (1, vec![&b])]).is_err());
        assert!(aggregate(&[(0, vec![&a])]).is_err());
    }

    #[test]
    fn zero_lr_round_keeps_global_params() {
        // With lr = 0 every upload equals the broadcast, so the new global
        // part is the weighted mean of identical tensors: unchanged up to the
        // rounding of the weights (exactly unchanged when weights are dyadic).
        let (mut server, mut clients) = build_clients(3, 42);
        let before = server.global.clone();
        run_round(&mut server, &mut clients, 1, 0.0, 1).unwrap();
        for ((_, b), (_, a)) in before.named().iter().zip(server.global.named()) {
            for (x, y) in b.data().iter().zip(a.data()) {
                assert!((x - y).abs() <= 1e-15 * x.abs().max(1.0), "{x} vs {y}");
            }
        }
        assert_eq!(server.round, 1);

        let (mut server, mut clients) = build_clients(2, 42);
        let before = server.global.clone();
        run_round(&mut server, &mut clients, 1, 0.0, 1).unwrap();
        assert_eq!(server.global, before, "dyadic weights are exact");
    }

    #[test]
    fn single_client_round_equals_centralized_training() {
        let (mut server, mut clients) = build_clients(1, 7);
        let mut centralized = clients[0].model.clone();
        server.global.write_to(&mut centralized);
        let mut order_rng = rng::stream(clients[0].seed, &[tag::TRAIN_ORDER, 0, 0]);
        centralized
            .local_train(&clients[0].train, 2, 0.05, &mut order_rng)
            .unwrap();
        run_round(&mut server, &mut clients, 2, 0.05, 1).unwrap();
        // With one client the aggregated global part is exactly the client's.
        assert_eq!(server.global, GlobalParams::from_model(&centralized));
        assert_eq!(clients[0].model, centralized);
    }

    #[test]
    fn round_metrics_schema() {
        let (mut server, mut clients) = build_clients(2, 9);
        let metrics = run_round(&mut server, &mut clients, 1, 0.05, 1).unwrap();
        assert_eq!(metrics.round, 0);
        assert!(metrics.mean_train_loss.is_finite());
        assert!((0.0..=1.0).contains(&metrics.a_total));
        assert_eq!(metrics.per_client.len(), 2);
    }

    #[test]
    fn results_independent_of_worker_count() {
        let (mut server_a, mut clients_a) = build_clients(4, 11);
        let (mut server_b, mut clients_b) = build_clients(4, 11);
        pretrain(&mut server_a, &mut clients_a, 3, 1, 0.05, 1).unwrap();
        pretrain(&mut server_b, &mut clients_b, 3, 1, 0.05, 4).unwrap();
        assert_eq!(server_a.global, server_b.global);
        for (a, b) in clients_a.iter().zip(&clients_b) {
            assert_eq!(a.model, b.model);
        }
    }

    #[test]
    fn server_state_contains_no_personalized_bytes() {
        let (mut server, mut clients) = build_clients(3, 13);
        pretrain(&mut server, &mut clients, 2, 1, 0.05, 1).unwrap();
        let server_bytes = checkpoint::encode(&server.global.named());
        for client in &clients {
            for (name, tensor) in client.model.personal_named() {
                let needle: Vec<u8> = tensor
                    .data()
                    .iter()
                    .flat_map(|v| v.to_le_bytes())
                    .collect();
                let leaked = server_bytes
                    .windows(needle.len())
                    .any(|w| w == needle.as_slice());
                assert!(!leaked, "client {} `{}` bytes found in server state", client.id, name);
            }
        }
    }

    #[test]
    fn round_updates_start_from_broadcast_only() {
        // Each client's round outcome must be a pure function of the
        // broadcast and its own state; replaying a client in isolation
        // reproduces its post-round model bitwise.
        let (mut server, mut clients) = build_clients(3, 55);
        let broadcast = server.global.clone();
        let before = clients.clone();
        run_round(&mut server, &mut clients, 2, 0.05, 1).unwrap();
        for (pre, post) in before.iter().zip(&clients) {
            let mut replay = pre.model.clone();
            broadcast.write_to(&mut replay);
            let mut order_rng = rng::stream(pre.seed, &[tag::TRAIN_ORDER, pre.id as u64, 0]);
            replay
                .local_train(&pre.train, 2, 0.05, &mut order_rng)
                .unwrap();
            assert_eq!(replay, post.model, "client {} saw a peer's upload", pre.id);
        }
    }

    #[test]
    fn pretrain_rejects_zero_rounds() {
        let (mut server, mut clients) = build_clients(2, 1);
        assert!(pretrain(&mut server, &mut clients, 0, 1, 0.05, 1).is_err());
    }

    #[test]
    fn pretrain_is_deterministic() {
        let (mut server_a, mut clients_a) = build_clients(3, 21);
        let (mut server_b, mut clients_b) = build_clients(3, 21);
        let ha = pretrain(&mut server_a, &mut clients_a, 4, 1, 0.05, 1).unwrap();
        let hb = pretrain(&mut server_b, &mut clients_b, 4, 1, 0.05, 2).unwrap();
        assert_eq!(ha.last().unwrap().a_total, hb.last().unwrap().a_total);
    }

    #[test]
    fn pretrain_fits_separable_data() {
        let (mut server, mut clients) = build_clients(4, 33);
        let history = pretrain(&mut server, &mut clients, 60, 1, 0.05, 2).unwrap();
        let final_a = history.last().unwrap().a_total;
        assert!(final_a >= 0.9, "a_total after pretraining: {final_a}");
    }
}
