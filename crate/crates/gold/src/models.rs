//! The GCN backbone split at its last hidden layer, the scalar-energy
//! detector MLP, and the flat parameter-archive format checkpoints use.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SparseMatrix;
use crate::numerics::{Matrix, NodeId, ParamStore, Tape};

/// GCN shape: `layers` weight matrices chaining input -> hidden -> classes,
/// ReLU between layers, none after the last. No bias terms.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GcnConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub layers: usize,
}

impl GcnConfig {
    pub fn new(input_dim: usize, num_classes: usize) -> Self {
        GcnConfig {
            input_dim,
            hidden_dim: 64,
            num_classes,
            layers: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 {
            return Err(Error::contract(
                "GCN needs at least 2 layers to split off a hidden embedding",
            ));
        }
        if self.input_dim == 0 || self.hidden_dim == 0 || self.num_classes == 0 {
            return Err(Error::contract("GCN dimensions must be positive"));
        }
        Ok(())
    }

    /// Layer dimensions [d, d', ..., d', C].
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        for _ in 1..self.layers {
            dims.push(self.hidden_dim);
        }
        dims.push(self.num_classes);
        dims
    }
}

/// Detector MLP: scalar energy in, two logits out (class 0 = ID,
/// class 1 = OOD). Affine layers with biases, ReLU between them.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DetectorConfig {
    pub hidden_dim: usize,
    pub layers: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            hidden_dim: 128,
            layers: 2,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.layers) {
            return Err(Error::contract("detector MLP uses 2 or 3 affine layers"));
        }
        if self.hidden_dim == 0 {
            return Err(Error::contract("detector hidden dim must be positive"));
        }
        Ok(())
    }

    /// Layer dimensions [1, h, ..., 2].
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![1];
        for _ in 1..self.layers {
            dims.push(self.hidden_dim);
        }
        dims.push(2);
        dims
    }
}

/// GCN classifier plus detector MLP sharing one parameter store, so the
/// divergence phase of training updates both with a single Adam step while
/// the generator phase never touches them.
#[derive(Debug, Clone)]
pub struct GoldModel {
    pub gcn: GcnConfig,
    pub detector: DetectorConfig,
    pub params: ParamStore,
}

impl GoldModel {
    /// Glorot-uniform weights, zero detector biases, all drawn from one
    /// seeded stream so identical seeds give identical models.
    pub fn init(gcn: GcnConfig, detector: DetectorConfig, seed: u64) -> Result<Self> {
        gcn.validate()?;
        detector.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let dims = gcn.dims();
        for l in 1..dims.len() {
            params.insert(
                gcn_weight_name(l),
                Matrix::glorot_uniform(dims[l - 1], dims[l], &mut rng),
            );
        }
        let ddims = detector.dims();
        for l in 1..ddims.len() {
            params.insert(
                det_weight_name(l),
                Matrix::glorot_uniform(ddims[l - 1], ddims[l], &mut rng),
            );
            params.insert(det_bias_name(l), Matrix::zeros(1, ddims[l]));
        }
        Ok(GoldModel {
            gcn,
            detector,
            params,
        })
    }

    /// Full split forward pass: H is the post-ReLU output of the last
    /// hidden layer, Z the unactivated logits of the final layer.
    pub fn gcn_forward(
        &self,
        tape: &mut Tape,
        features: NodeId,
        adj: &Arc<SparseMatrix>,
    ) -> Result<(NodeId, NodeId)> {
        let x = tape.value(features);
        if x.cols() != self.gcn.input_dim {
            return Err(Error::contract(format!(
                "features have {} columns, model expects {}",
                x.cols(),
                self.gcn.input_dim
            )));
        }
        if adj.rows() != x.rows() || adj.cols() != x.rows() {
            return Err(Error::contract(format!(
                "adjacency is {}x{} for {} feature rows",
                adj.rows(),
                adj.cols(),
                x.rows()
            )));
        }
        let last = self.gcn.dims().len() - 1;
        let mut h = features;
        for l in 1..last {
            let w = tape.param(&self.params, &gcn_weight_name(l))?;
            let s = tape.matmul(h, w);
            let p = tape.sp_matmul(adj, s);
            h = tape.relu(p);
        }
        let w = tape.param(&self.params, &gcn_weight_name(last))?;
        let s = tape.matmul(h, w);
        let z = tape.sp_matmul(adj, s);
        Ok((h, z))
    }

    /// Classifier head over bare embeddings: generated rows carry no graph
    /// structure, so the final layer is applied with identity adjacency.
    pub fn gcn_head_on_embeddings(&self, tape: &mut Tape, embeddings: NodeId) -> Result<NodeId> {
        let hp = tape.value(embeddings);
        if hp.cols() != self.gcn.hidden_dim {
            return Err(Error::contract(format!(
                "embeddings have {} columns, hidden dim is {}",
                hp.cols(),
                self.gcn.hidden_dim
            )));
        }
        let last = self.gcn.dims().len() - 1;
        let w = tape.param(&self.params, &gcn_weight_name(last))?;
        Ok(tape.matmul(embeddings, w))
    }

    /// Detector logits, one (l0, l1) row per input energy.
    pub fn detector_forward(&self, tape: &mut Tape, energies: NodeId) -> Result<NodeId> {
        let e = tape.value(energies);
        if e.cols() != 1 {
            return Err(Error::contract(format!(
                "detector input must be a column vector, got {} columns",
                e.cols()
            )));
        }
        if !e.all_finite() {
            return Err(Error::Numerical(
                "detector input contains non-finite energies".into(),
            ));
        }
        let last = self.detector.dims().len() - 1;
        let mut h = energies;
        for l in 1..=last {
            let w = tape.param(&self.params, &det_weight_name(l))?;
            let b = tape.param(&self.params, &det_bias_name(l))?;
            let a = tape.matmul(h, w);
            let pre = tape.add_row(a, b);
            h = if l < last { tape.relu(pre) } else { pre };
        }
        Ok(h)
    }
}

pub fn gcn_weight_name(layer: usize) -> String {
    format!("gcn.w{layer}")
}

pub fn det_weight_name(layer: usize) -> String {
    format!("det.w{layer}")
}

pub fn det_bias_name(layer: usize) -> String {
    format!("det.b{layer}")
}

const ARCHIVE_MAGIC: &[u8; 8] = b"GOLDPRM1";

/// Writes a parameter store as a flat archive: magic, entry count, then
/// per entry name, shape, and the row-major f64 payload (little endian).
pub fn write_param_archive(path: &Path, store: &ParamStore) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(ARCHIVE_MAGIC);
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, value) in store.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(value.rows() as u64).to_le_bytes());
        buf.extend_from_slice(&(value.cols() as u64).to_le_bytes());
        for v in value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_param_archive(path: &Path) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut cursor = 0usize;
    let take = |cursor: &mut usize, len: usize| -> Result<&[u8]> {
        if *cursor + len > bytes.len() {
            return Err(Error::load(path, None, "truncated parameter archive"));
        }
        let slice = &bytes[*cursor..*cursor + len];
        *cursor += len;
        Ok(slice)
    };
    if take(&mut cursor, 8)? != ARCHIVE_MAGIC {
        return Err(Error::load(path, None, "bad parameter archive magic"));
    }
    let count = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap());
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut cursor, name_len)?.to_vec())
            .map_err(|_| Error::load(path, None, "non-utf8 parameter name"))?;
        let rows = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()) as usize;
        let cols = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()) as usize;
        let payload = take(&mut cursor, rows * cols * 8)?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(name, Matrix::from_vec(rows, cols, data)?);
    }
    if cursor != bytes.len() {
        return Err(Error::load(path, None, "trailing bytes in parameter archive"));
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{sym_normalize, Graph};
    use crate::numerics::{grad_check, logsumexp_rows};
    use std::collections::BTreeMap;

    fn single_node_graph(x: Vec<f64>) -> Graph {
        let d = x.len();
        Graph::new(
            1,
            &[],
            Matrix::from_vec(1, d, x).unwrap(),
            vec![None],
            BTreeMap::new(),
        )
        .unwrap()
    }

    fn random_graph(n: usize, p: f64, d: usize, rng: &mut ChaCha8Rng) -> Graph {
        use rand::Rng;
        let mut edges = Vec::new();
        for u in 0..n {
            for v in (u + 1)..n {
                if rng.gen_bool(p) {
                    edges.push((u, v));
                }
            }
        }
        Graph::new(
            n,
            &edges,
            Matrix::standard_normal(n, d, rng),
            vec![None; n],
            BTreeMap::new(),
        )
        .unwrap()
    }

    fn identity_weight_model(dim: usize) -> GoldModel {
        let mut model = GoldModel::init(
            GcnConfig {
                input_dim: dim,
                hidden_dim: dim,
                num_classes: dim,
                layers: 2,
            },
            DetectorConfig::default(),
            0,
        )
        .unwrap();
        *model.params.get_mut("gcn.w1").unwrap() = Matrix::eye(dim);
        *model.params.get_mut("gcn.w2").unwrap() = Matrix::eye(dim);
        model
    }

    #[test]
    fn gcn_single_node_identity_weights() {
        let x = vec![0.5, 1.5, 0.0];
        let g = single_node_graph(x.clone());
        let model = identity_weight_model(3);
        let adj = Arc::new(sym_normalize(&g).unwrap());
        let mut tape = Tape::new();
        let xc = tape.constant(g.features().clone());
        let (h, z) = model.gcn_forward(&mut tape, xc, &adj).unwrap();
        assert_eq!(tape.value(h).data(), &x[..]);
        assert_eq!(tape.value(z).data(), &x[..]);
    }

    #[test]
    fn gcn_zero_features_give_zero_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = random_graph(5, 0.4, 4, &mut rng);
        let g = g.with_features(Matrix::zeros(5, 4)).unwrap();
        let model = GoldModel::init(
            GcnConfig {
                input_dim: 4,
                hidden_dim: 6,
                num_classes: 3,
                layers: 2,
            },
            DetectorConfig::default(),
            1,
        )
        .unwrap();
        let adj = Arc::new(sym_normalize(&g).unwrap());
        let mut tape = Tape::new();
        let xc = tape.constant(g.features().clone());
        let (h, z) = model.gcn_forward(&mut tape, xc, &adj).unwrap();
        assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
    }

    /// Dense two-layer oracle: relu(A (X W1)) then A (H W2).
    fn dense_gcn_oracle(g: &Graph, w1: &Matrix, w2: &Matrix) -> (Matrix, Matrix) {
        let a = {
            let n = g.node_count();
            let mut a = Matrix::eye(n);
            for &(u, v) in g.edges() {
                a.set(u, v, 1.0);
                a.set(v, u, 1.0);
            }
            let deg: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a.get(i, j)).sum()).collect();
            let mut out = Matrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    out.set(i, j, a.get(i, j) / (deg[i] * deg[j]).sqrt());
                }
            }
            out
        };
        let h = a
            .matmul(&g.features().matmul(w1).unwrap())
            .unwrap()
            .map(|v| v.max(0.0));
        let z = a.matmul(&h.matmul(w2).unwrap()).unwrap();
        (h, z)
    }

    fn rng_seed(rng: &mut ChaCha8Rng) -> u64 {
        use rand::Rng;
        rng.gen()
    }

    #[test]
    fn gcn_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..10 {
            let g = random_graph(6, 0.4, 5, &mut rng);
            let model = GoldModel::init(
                GcnConfig {
                    input_dim: 5,
                    hidden_dim: 7,
                    num_classes: 3,
                    layers: 2,
                },
                DetectorConfig::default(),
                rng_seed(&mut rng),
            )
            .unwrap();
            let adj = Arc::new(sym_normalize(&g).unwrap());
            let mut tape = Tape::new();
            let xc = tape.constant(g.features().clone());
            let (h, z) = model.gcn_forward(&mut tape, xc, &adj).unwrap();
            let (oh, oz) = dense_gcn_oracle(
                &g,
                model.params.get("gcn.w1").unwrap(),
                model.params.get("gcn.w2").unwrap(),
            );
            assert!(tape.value(h).max_abs_diff(&oh) < 1e-12);
            assert!(tape.value(z).max_abs_diff(&oz) < 1e-12);
        }
    }

    #[test]
    fn gcn_hidden_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let g = random_graph(8, 0.3, 4, &mut rng);
        let model = GoldModel::init(
            GcnConfig {
                input_dim: 4,
                hidden_dim: 6,
                num_classes: 2,
                layers: 2,
            },
            DetectorConfig::default(),
            7,
        )
        .unwrap();
        let adj = Arc::new(sym_normalize(&g).unwrap());
        let mut tape = Tape::new();
        let xc = tape.constant(g.features().clone());
        let (h, _) = model.gcn_forward(&mut tape, xc, &adj).unwrap();
        assert!(tape.value(h).data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn edgeless_graph_reduces_to_row_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let n = 12;
        let g = Graph::new(
            n,
            &[],
            Matrix::standard_normal(n, 4, &mut rng),
            vec![None; n],
            BTreeMap::new(),
        )
        .unwrap();
        let model = GoldModel::init(
            GcnConfig {
                input_dim: 4,
                hidden_dim: 5,
                num_classes: 3,
                layers: 2,
            },
            DetectorConfig::default(),
            3,
        )
        .unwrap();
        let adj = Arc::new(sym_normalize(&g).unwrap());
        let mut tape = Tape::new();
        let xc = tape.constant(g.features().clone());
        let (_, z) = model.gcn_forward(&mut tape, xc, &adj).unwrap();
        let w1 = model.params.get("gcn.w1").unwrap();
        let w2 = model.params.get("gcn.w2").unwrap();
        let oracle = g
            .features()
            .matmul(w1)
            .unwrap()
            .map(|v| v.max(0.0))
            .matmul(w2)
            .unwrap();
        assert!(tape.value(z).max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn head_on_embeddings_matches_isolated_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let model = GoldModel::init(
            GcnConfig {
                input_dim: 4,
                hidden_dim: 5,
                num_classes: 3,
                layers: 2,
            },
            DetectorConfig::default(),
            4,
        )
        .unwrap();
        // An isolated node's Z equals its H through the bare head.
        let g = Graph::new(
            1,
            &[],
            Matrix::standard_normal(1, 4, &mut rng),
            vec![None],
            BTreeMap::new(),
        )
        .unwrap();
        let adj = Arc::new(sym_normalize(&g).unwrap());
        let mut tape = Tape::new();
        let xc = tape.constant(g.features().clone());
        let (h, z) = model.gcn_forward(&mut tape, xc, &adj).unwrap();
        let h_val = tape.value(h).clone();
        let hc = tape.constant(h_val);
        let z2 = model.gcn_head_on_embeddings(&mut tape, hc).unwrap();
        assert!(tape.value(z).max_abs_diff(tape.value(z2)) < 1e-12);
    }

    #[test]
    fn head_on_zero_embeddings_is_zero() {
        let model = GoldModel::init(
            GcnConfig {
                input_dim: 3,
                hidden_dim: 4,
                num_classes: 2,
                layers: 2,
            },
            DetectorConfig::default(),
            5,
        )
        .unwrap();
        let mut tape = Tape::new();
        let hp = tape.constant(Matrix::zeros(6, 4));
        let z = model.gcn_head_on_embeddings(&mut tape, hp).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn detector_zero_weights_give_zero_logits() {
        let mut model = GoldModel::init(
            GcnConfig {
                input_dim: 2,
                hidden_dim: 3,
                num_classes: 2,
                layers: 2,
            },
            DetectorConfig {
                hidden_dim: 8,
                layers: 2,
            },
            6,
        )
        .unwrap();
        for l in 1..=2 {
            let w = model.params.get_mut(&det_weight_name(l)).unwrap();
            *w = Matrix::zeros(w.rows(), w.cols());
        }
        let mut tape = Tape::new();
        let e = tape.constant(Matrix::column(&[-3.0, 0.0, 2.5]));
        let logits = model.detector_forward(&mut tape, e).unwrap();
        assert!(tape.value(logits).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn detector_is_deterministic_per_row() {
        let model = GoldModel::init(
            GcnConfig {
                input_dim: 2,
                hidden_dim: 3,
                num_classes: 2,
                layers: 2,
            },
            DetectorConfig {
                hidden_dim: 16,
                layers: 3,
            },
            8,
        )
        .unwrap();
        let mut tape = Tape::new();
        let e = tape.constant(Matrix::column(&[1.25, 1.25, -0.5]));
        let logits = model.detector_forward(&mut tape, e).unwrap();
        let v = tape.value(logits);
        assert_eq!(v.row(0), v.row(1));
        assert_ne!(v.row(0), v.row(2));
    }

    /// Dense oracle for the detector: explicit affine chain per row.
    #[test]
    fn detector_matches_dense_oracle() {
        let model = GoldModel::init(
            GcnConfig {
                input_dim: 2,
                hidden_dim: 3,
                num_classes: 2,
                layers: 2,
            },
            DetectorConfig {
                hidden_dim: 8,
                layers: 2,
            },
            9,
        )
        .unwrap();
        let energies = Matrix::column(&[-2.0, 0.3, 4.0]);
        let mut tape = Tape::new();
        let e = tape.constant(energies.clone());
        let logits = model.detector_forward(&mut tape, e).unwrap();

        let w1 = model.params.get("det.w1").unwrap();
        let b1 = model.params.get("det.b1").unwrap();
        let w2 = model.params.get("det.w2").unwrap();
        let b2 = model.params.get("det.b2").unwrap();
        let mut h = energies.matmul(w1).unwrap();
        for i in 0..h.rows() {
            for j in 0..h.cols() {
                let v = (h.get(i, j) + b1.get(0, j)).max(0.0);
                h.set(i, j, v);
            }
        }
        let mut oracle = h.matmul(w2).unwrap();
        for i in 0..oracle.rows() {
            for j in 0..oracle.cols() {
                let v = oracle.get(i, j) + b2.get(0, j);
                oracle.set(i, j, v);
            }
        }
        assert!(tape.value(logits).max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn gcn_shape_mismatch_is_contract_error() {
        let model = GoldModel::init(
            GcnConfig {
                input_dim: 4,
                hidden_dim: 5,
                num_classes: 3,
                layers: 2,
            },
            DetectorConfig::default(),
            10,
        )
        .unwrap();
        let g = single_node_graph(vec![1.0, 2.0]); // wrong feature dim
        let adj = Arc::new(sym_normalize(&g).unwrap());
        let mut tape = Tape::new();
        let xc = tape.constant(g.features().clone());
        assert!(model.gcn_forward(&mut tape, xc, &adj).is_err());
    }

    #[test]
    fn forward_gradients_pass_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let g = random_graph(6, 0.4, 4, &mut rng);
        let mut model = GoldModel::init(
            GcnConfig {
                input_dim: 4,
                hidden_dim: 5,
                num_classes: 3,
                layers: 2,
            },
            DetectorConfig {
                hidden_dim: 8,
                layers: 2,
            },
            11,
        )
        .unwrap();
        let adj = Arc::new(sym_normalize(&g).unwrap());
        let features = g.features().clone();
        let gcn = model.gcn.clone();
        let det = model.detector.clone();
        let err = grad_check(
            |tape, store| {
                let probe = GoldModel {
                    gcn: gcn.clone(),
                    detector: det.clone(),
                    params: store.clone(),
                };
                let xc = tape.constant(features.clone());
                let (_, z) = probe.gcn_forward(tape, xc, &adj)?;
                let lse = tape.logsumexp_rows(z);
                let e = tape.scale(lse, -1.0);
                let logits = probe.detector_forward(tape, e)?;
                let l2 = tape.logsumexp_rows(logits);
                Ok(tape.mean_all(l2))
            },
            &mut model.params,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-5, "model forward grad check error {err}");
    }

    #[test]
    fn param_archive_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut store = ParamStore::new();
        store.insert("gcn.w1", Matrix::standard_normal(3, 4, &mut rng));
        store.insert("det.b1", Matrix::standard_normal(1, 2, &mut rng));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.bin");
        write_param_archive(&path, &store).unwrap();
        let loaded = read_param_archive(&path).unwrap();
        assert_eq!(loaded.fingerprint(), store.fingerprint());
    }

    #[test]
    fn energy_of_identity_model_matches_manual() {
        // Ties the model path to the plain logsumexp kernel.
        let x = vec![1.0, 2.0, 3.0];
        let g = single_node_graph(x.clone());
        let model = identity_weight_model(3);
        let adj = Arc::new(sym_normalize(&g).unwrap());
        let mut tape = Tape::new();
        let xc = tape.constant(g.features().clone());
        let (_, z) = model.gcn_forward(&mut tape, xc, &adj).unwrap();
        let lse = logsumexp_rows(tape.value(z)).unwrap();
        let expected = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        assert!((lse.get(0, 0) - expected).abs() < 1e-12);
    }
}
