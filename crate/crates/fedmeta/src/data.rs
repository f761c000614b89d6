//! Client data: LEAF-format ingestion, a synthetic non-IID generator,
//! activity filtering, and the two splits every experiment needs (clients
//! into train/val/test, records into support/query).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::Batch;
use crate::seed::{rng_from, SALT_CLIENT_GEN, SALT_PROTO};
use crate::{Error, Result};

/// Role of a client in an experiment. Meta-learning evaluates on clients
/// that never participate in training, so the partition is by client, not
/// by record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitGroup {
    Train,
    Val,
    Test,
}

/// How a client's records divide into support and query.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Seeded shuffle, then a prefix becomes the support set.
    #[default]
    Shuffled,
    /// First records in stored order become the support set; for data
    /// with a temporal order.
    Chronological,
}

/// One client's labeled records (row-major features).
#[derive(Clone, Debug, PartialEq)]
pub struct ClientDataset {
    client_id: String,
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
}

impl ClientDataset {
    pub fn new(
        client_id: String,
        features: Vec<f64>,
        dim: usize,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Ingestion(format!(
                "client {client_id} has no records"
            )));
        }
        if dim == 0 {
            return Err(Error::Ingestion(format!(
                "client {client_id} has zero-dimensional features"
            )));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::Ingestion(format!(
                "client {client_id} has {} feature values, expected {}",
                features.len(),
                labels.len() * dim
            )));
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::Ingestion(format!(
                "client {client_id} has a non-finite feature at sample {}",
                i / dim
            )));
        }
        Ok(ClientDataset {
            client_id,
            features,
            dim,
            labels,
        })
    }

    pub fn id(&self) -> &str {
        &self.client_id
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction guarantees at least one record
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_batch(&self) -> Batch {
        Batch::new(self.features.clone(), self.dim, self.labels.clone())
            .expect("client data is a valid batch by construction")
    }

    /// Batch holding the given records, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Batch {
        self.to_batch().select(indices)
    }
}

/// A population of clients plus the label/feature space they share.
/// `groups` is empty until [`split_clients`] assigns roles.
#[derive(Clone, Debug, PartialEq)]
pub struct FederatedDataset {
    clients: Vec<ClientDataset>,
    class_count: usize,
    feature_dim: usize,
    groups: BTreeMap<String, SplitGroup>,
    index: BTreeMap<String, usize>,
}

impl FederatedDataset {
    pub fn new(clients: Vec<ClientDataset>, class_count: usize) -> Result<Self> {
        if clients.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if class_count == 0 {
            return Err(Error::Ingestion("class count must be at least 1".into()));
        }
        let feature_dim = clients[0].dim();
        let mut index = BTreeMap::new();
        for (i, c) in clients.iter().enumerate() {
            if c.dim() != feature_dim {
                return Err(Error::Ingestion(format!(
                    "client {} has feature dim {}, dataset uses {}",
                    c.id(),
                    c.dim(),
                    feature_dim
                )));
            }
            if let Some(&bad) = c.labels().iter().find(|&&y| y >= class_count) {
                return Err(Error::Ingestion(format!(
                    "client {} has label {bad}, outside {class_count} classes",
                    c.id()
                )));
            }
            if index.insert(c.id().to_string(), i).is_some() {
                return Err(Error::Ingestion(format!("duplicate client id {}", c.id())));
            }
        }
        Ok(FederatedDataset {
            clients,
            class_count,
            feature_dim,
            groups: BTreeMap::new(),
            index,
        })
    }

    /// Builds a dataset with an explicit group assignment, for data that
    /// arrives already partitioned. Every client must be assigned.
    pub fn with_groups(
        clients: Vec<ClientDataset>,
        class_count: usize,
        groups: BTreeMap<String, SplitGroup>,
    ) -> Result<Self> {
        let mut ds = FederatedDataset::new(clients, class_count)?;
        for id in groups.keys() {
            if !ds.index.contains_key(id) {
                return Err(Error::Config(format!(
                    "group assignment names unknown client {id}"
                )));
            }
        }
        if let Some(missing) = ds.clients.iter().find(|c| !groups.contains_key(c.id())) {
            return Err(Error::Config(format!(
                "client {} has no group assignment",
                missing.id()
            )));
        }
        ds.groups = groups;
        Ok(ds)
    }

    pub fn clients(&self) -> &[ClientDataset] {
        &self.clients
    }

    pub fn client(&self, id: &str) -> Option<&ClientDataset> {
        self.index.get(id).map(|&i| &self.clients[i])
    }

    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction guarantees at least one client
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn is_split(&self) -> bool {
        !self.groups.is_empty()
    }

    pub fn group_of(&self, id: &str) -> Option<SplitGroup> {
        self.groups.get(id).copied()
    }

    /// Clients of one group, in dataset order.
    pub fn clients_in(&self, group: SplitGroup) -> Vec<&ClientDataset> {
        self.clients
            .iter()
            .filter(|c| self.groups.get(c.id()) == Some(&group))
            .collect()
    }

    /// Ids of one group, in dataset order.
    pub fn ids_in(&self, group: SplitGroup) -> Vec<String> {
        self.clients_in(group)
            .iter()
            .map(|c| c.id().to_string())
            .collect()
    }

    pub fn total_records(&self) -> usize {
        self.clients.iter().map(|c| c.len()).sum()
    }
}

// ---------------------------------------------------------------------------
// LEAF JSON

#[derive(Deserialize)]
struct LeafFileIn {
    users: Vec<String>,
    num_samples: Vec<usize>,
    user_data: BTreeMap<String, LeafUserIn>,
}

#[derive(Deserialize)]
struct LeafUserIn {
    x: Vec<Vec<f64>>,
    // accepts both integer and float tokens; validated to be whole numbers
    y: Vec<f64>,
}

#[derive(Serialize)]
struct LeafFileOut {
    users: Vec<String>,
    num_samples: Vec<usize>,
    user_data: BTreeMap<String, LeafUserOut>,
}

#[derive(Serialize)]
struct LeafUserOut {
    x: Vec<Vec<f64>>,
    y: Vec<u64>,
}

/// Parses the LEAF benchmark JSON layout: `users`, `num_samples`, and
/// `user_data` keyed by user id with `x` (feature rows) and `y` (integer
/// labels). Clients keep the order of the `users` array; the class count
/// is the largest label plus one.
pub fn parse_leaf_json(text: &str) -> Result<FederatedDataset> {
    let file: LeafFileIn = serde_json::from_str(text)?;
    if file.users.len() != file.num_samples.len() {
        return Err(Error::Ingestion(format!(
            "users lists {} entries, num_samples lists {}",
            file.users.len(),
            file.num_samples.len()
        )));
    }
    let mut seen = BTreeSet::new();
    let mut clients = Vec::with_capacity(file.users.len());
    let mut max_label = 0usize;
    let mut dim: Option<usize> = None;
    for (u, &claimed) in file.users.iter().zip(&file.num_samples) {
        if !seen.insert(u.clone()) {
            return Err(Error::Ingestion(format!("duplicate user {u}")));
        }
        let data = file
            .user_data
            .get(u)
            .ok_or_else(|| Error::Ingestion(format!("user {u} is listed but has no data")))?;
        if data.x.len() != data.y.len() {
            return Err(Error::Ingestion(format!(
                "user {u} has {} feature rows but {} labels",
                data.x.len(),
                data.y.len()
            )));
        }
        if data.x.len() != claimed {
            return Err(Error::Ingestion(format!(
                "user {u} claims {claimed} samples but has {}",
                data.x.len()
            )));
        }
        if claimed == 0 {
            return Err(Error::Ingestion(format!("user {u} has no samples")));
        }
        let d = *dim.get_or_insert(data.x[0].len());
        let mut features = Vec::with_capacity(claimed * d);
        for (i, row) in data.x.iter().enumerate() {
            if row.len() != d {
                return Err(Error::Ingestion(format!(
                    "user {u} row {i} has {} features, expected {d}",
                    row.len()
                )));
            }
            features.extend_from_slice(row);
        }
        let mut labels = Vec::with_capacity(claimed);
        for (i, &y) in data.y.iter().enumerate() {
            if !y.is_finite() || y < 0.0 || y.fract() != 0.0 {
                return Err(Error::Ingestion(format!(
                    "user {u} label {y} at sample {i} is not a non-negative integer"
                )));
            }
            let label = y as usize;
            max_label = max_label.max(label);
            labels.push(label);
        }
        clients.push(ClientDataset::new(u.clone(), features, d, labels)?);
    }
    FederatedDataset::new(clients, max_label + 1)
}

pub fn load_leaf_json(path: &Path) -> Result<FederatedDataset> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Ingestion(format!("cannot read dataset {}: {e}", path.display())))?;
    parse_leaf_json(&text)
}

/// Writes the dataset in the same LEAF layout [`parse_leaf_json`] reads.
/// Round-trips are lossless for records; group assignments are not part
/// of the format.
pub fn write_leaf_json(dataset: &FederatedDataset, path: &Path) -> Result<()> {
    let mut users = Vec::with_capacity(dataset.len());
    let mut num_samples = Vec::with_capacity(dataset.len());
    let mut user_data = BTreeMap::new();
    for c in dataset.clients() {
        users.push(c.id().to_string());
        num_samples.push(c.len());
        let x = (0..c.len()).map(|i| c.row(i).to_vec()).collect();
        let y = c.labels().iter().map(|&l| l as u64).collect();
        user_data.insert(c.id().to_string(), LeafUserOut { x, y });
    }
    let out = LeafFileOut {
        users,
        num_samples,
        user_data,
    };
    let file = std::fs::File::create(path)?;
    serde_json::to_writer(std::io::BufWriter::new(file), &out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// synthetic generator

/// Shape of a synthetic non-IID population: each client sees only
/// `classes_per_client` of the `classes` label values, with features
/// drawn around a unit-norm class prototype.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParams {
    pub classes: usize,
    pub classes_per_client: usize,
    pub num_clients: usize,
    pub samples_min: usize,
    pub samples_max: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            classes: 10,
            classes_per_client: 2,
            num_clients: 100,
            samples_min: 40,
            samples_max: 80,
            feature_dim: 20,
            noise_sigma: 0.5,
        }
    }
}

impl SyntheticParams {
    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("synthetic classes must be at least 2".into()));
        }
        if self.classes_per_client == 0 || self.classes_per_client > self.classes {
            return Err(Error::Config(format!(
                "classes_per_client must be between 1 and classes ({}), got {}",
                self.classes, self.classes_per_client
            )));
        }
        if self.num_clients == 0 {
            return Err(Error::Config("synthetic num_clients must be at least 1".into()));
        }
        if self.samples_min == 0 || self.samples_min > self.samples_max {
            return Err(Error::Config(format!(
                "samples_min..samples_max must be a non-empty range from 1, got {}..{}",
                self.samples_min, self.samples_max
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("synthetic feature_dim must be at least 1".into()));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::Config(format!(
                "noise_sigma must be a non-negative number, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Generates the synthetic population. Prototypes are unit-norm Gaussian
/// directions, one per class; each client draws a class subset and then
/// prototype + noise features. Fully determined by `params` and `seed`.
pub fn generate_synthetic_noniid(params: &SyntheticParams, seed: u64) -> Result<FederatedDataset> {
    params.validate()?;
    let d = params.feature_dim;

    let mut proto_rng = rng_from(&[seed, SALT_PROTO]);
    let mut prototypes = Vec::with_capacity(params.classes);
    for _ in 0..params.classes {
        loop {
            let mut v: Vec<f64> = (0..d).map(|_| proto_rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-9 {
                for x in v.iter_mut() {
                    *x /= norm;
                }
                prototypes.push(v);
                break;
            }
        }
    }

    let mut clients = Vec::with_capacity(params.num_clients);
    for i in 0..params.num_clients {
        let mut rng = rng_from(&[seed, SALT_CLIENT_GEN, i as u64]);
        let n = rng.random_range(params.samples_min..=params.samples_max);
        let mut class_pool =
            rand::seq::index::sample(&mut rng, params.classes, params.classes_per_client)
                .into_vec();
        class_pool.sort_unstable();

        let mut features = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let class = class_pool[rng.random_range(0..class_pool.len())];
            let proto = &prototypes[class];
            for j in 0..d {
                let noise: f64 = rng.sample(StandardNormal);
                features.push(proto[j] + params.noise_sigma * noise);
            }
            labels.push(class);
        }
        clients.push(ClientDataset::new(
            format!("client_{i:05}"),
            features,
            d,
            labels,
        )?);
    }
    // class_count is declared, so a class that happens never to be drawn
    // still counts toward the label space
    FederatedDataset::new(clients, params.classes)
}

// ---------------------------------------------------------------------------
// filtering and splits

/// Drops clients with fewer than `min_records` records. Keeping the
/// threshold at the split minimum (2) removes only clients no method can
/// use; higher thresholds mirror common benchmark preprocessing.
pub fn filter_inactive(dataset: &FederatedDataset, min_records: usize) -> Result<FederatedDataset> {
    if min_records == 0 {
        return Err(Error::Config("min_records must be at least 1".into()));
    }
    let kept: Vec<ClientDataset> = dataset
        .clients
        .iter()
        .filter(|c| c.len() >= min_records)
        .cloned()
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut out = FederatedDataset::new(kept, dataset.class_count)?;
    out.groups = dataset
        .groups
        .iter()
        .filter(|(id, _)| out.index.contains_key(*id))
        .map(|(id, g)| (id.clone(), *g))
        .collect();
    Ok(out)
}

/// Assigns every client to train, val, or test by a seeded shuffle:
/// floor(f_train * N) train, floor(f_val * N) val, remainder test.
pub fn split_clients(
    dataset: &FederatedDataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<FederatedDataset> {
    let (ft, fv, fe) = fractions;
    for (name, f) in [("train", ft), ("val", fv), ("test", fe)] {
        if !f.is_finite() || f < 0.0 {
            return Err(Error::Config(format!(
                "{name} fraction must be a non-negative number, got {f}"
            )));
        }
    }
    if (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "client split fractions must sum to 1, got {ft} + {fv} + {fe}"
        )));
    }
    let n = dataset.len();
    if n < 3 {
        return Err(Error::Config(format!(
            "client split needs at least 3 clients, got {n}"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from(&[seed]));

    let n_train = (ft * n as f64).floor() as usize;
    let n_val = (fv * n as f64).floor() as usize;
    let mut out = dataset.clone();
    out.groups.clear();
    for (pos, &idx) in order.iter().enumerate() {
        let group = if pos < n_train {
            SplitGroup::Train
        } else if pos < n_train + n_val {
            SplitGroup::Val
        } else {
            SplitGroup::Test
        };
        out.groups.insert(dataset.clients[idx].id().to_string(), group);
    }
    Ok(out)
}

/// Divides one client's records into a support batch of ceil(p * n)
/// records (at least 1, at most n - 1) and a query batch of the rest.
/// The division is a pure function of the seed, so it can be held fixed
/// across rounds and methods.
pub fn split_support_query(
    client: &ClientDataset,
    p: f64,
    seed: u64,
    mode: SplitMode,
) -> Result<(Batch, Batch)> {
    if !p.is_finite() || p <= 0.0 || p >= 1.0 {
        return Err(Error::Config(format!(
            "support_fraction must be in (0, 1), got {p}"
        )));
    }
    let n = client.len();
    if n < 2 {
        return Err(Error::ClientTooSmall {
            client_id: client.id().to_string(),
            n,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    if mode == SplitMode::Shuffled {
        order.shuffle(&mut rng_from(&[seed]));
    }
    let raw = (p * n as f64).ceil() as usize;
    let cut = raw.clamp(1, n - 1);
    let support = client.subset(&order[..cut]);
    let query = client.subset(&order[cut..]);
    Ok((support, query))
}
