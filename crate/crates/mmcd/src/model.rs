//! Feature extractor plus `n` classifier heads sharing its output.
//!
//! Both sub-networks are plain MLPs: relu after every layer except the
//! last. Head outputs go through a row-wise softmax, so every prediction
//! row is a point on the K-simplex. The extractor and each head live in
//! their own [`ParamBlock`], which is what lets the training steps freeze
//! one side while updating the other.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Matrix, ParamBlock, ParamTensor, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub feature_dim: usize,
    pub extractor_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub n_classifiers: usize,
    pub n_classes: usize,
}

impl ModelSpec {
    /// Default architecture for the 2D toy task: 2->16->16->8 extractor,
    /// 8->16->K heads.
    pub fn toy(n_classifiers: usize, n_classes: usize) -> Self {
        Self {
            input_dim: 2,
            feature_dim: 8,
            extractor_hidden: vec![16, 16],
            head_hidden: vec![16],
            n_classifiers,
            n_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classifiers < 2 {
            return Err(Error::InvalidSpec(format!(
                "n-classifiers must be at least 2, got {}",
                self.n_classifiers
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::InvalidSpec(format!(
                "n-classes must be at least 2, got {}",
                self.n_classes
            )));
        }
        for (name, d) in [("input-dim", self.input_dim), ("feature-dim", self.feature_dim)] {
            if d == 0 {
                return Err(Error::InvalidSpec(format!("{name} must be positive")));
            }
        }
        if self.extractor_hidden.contains(&0) || self.head_hidden.contains(&0) {
            return Err(Error::InvalidSpec("hidden dims must be positive".into()));
        }
        Ok(())
    }

    fn extractor_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.extractor_hidden);
        dims.push(self.feature_dim);
        dims
    }

    fn head_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.feature_dim];
        dims.extend(&self.head_hidden);
        dims.push(self.n_classes);
        dims
    }
}

/// Node handles for one forward pass: the model's parameters bound as
/// graph leaves, extractor first, then one binding per head.
pub struct BoundModel {
    pub extractor: Vec<Tensor>,
    pub heads: Vec<Vec<Tensor>>,
}

/// Consensus and per-head argmax labels for a batch.
pub struct Prediction {
    pub consensus: Vec<usize>,
    pub per_head: Vec<Vec<usize>>,
    pub mean_probs: Matrix,
}

pub struct MultiClassifierModel {
    pub spec: ModelSpec,
    pub extractor: ParamBlock,
    pub heads: Vec<ParamBlock>,
}

/// Glorot-uniform init: weights in [-a, a] with a = sqrt(6/(fan_in+fan_out)),
/// biases zero.
fn init_mlp(name: String, dims: &[usize], rng: &mut ChaCha8Rng) -> ParamBlock {
    let mut tensors = Vec::new();
    for w in dims.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weights: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
        tensors.push(ParamTensor::new(vec![fan_in, fan_out], weights));
        tensors.push(ParamTensor::new(vec![1, fan_out], vec![0.0; fan_out]));
    }
    ParamBlock::new(name, tensors)
}

/// MLP forward over bound parameters: relu between layers, linear output.
fn mlp_forward(g: &mut Graph, params: &[Tensor], x: Tensor) -> Result<Tensor> {
    let layers = params.len() / 2;
    let mut h = x;
    for l in 0..layers {
        h = g.matmul(h, params[2 * l])?;
        h = g.add(h, params[2 * l + 1])?;
        if l + 1 < layers {
            h = g.relu(h)?;
        }
    }
    Ok(h)
}

impl MultiClassifierModel {
    /// Each head gets an independent draw from one seeded stream, so two
    /// heads never start identical (identical heads would zero out the
    /// discrepancy signal and collapse training).
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let extractor = init_mlp("extractor".into(), &spec.extractor_dims(), &mut rng);
        let heads = (0..spec.n_classifiers)
            .map(|i| init_mlp(format!("head_{i}"), &spec.head_dims(), &mut rng))
            .collect();
        Ok(Self {
            spec,
            extractor,
            heads,
        })
    }

    pub fn bind(&self, g: &mut Graph) -> BoundModel {
        BoundModel {
            extractor: self.extractor.bind(g),
            heads: self.heads.iter().map(|h| h.bind(g)).collect(),
        }
    }

    pub fn set_trainable(&mut self, extractor: bool, heads: bool) {
        self.extractor.trainable = extractor;
        for h in &mut self.heads {
            h.trainable = heads;
        }
    }

    /// Feature batch node for an input node of shape `[b, input_dim]`.
    pub fn features_node(&self, g: &mut Graph, bound: &BoundModel, x: Tensor) -> Result<Tensor> {
        if g.shape(x).len() != 2 || g.shape(x)[1] != self.spec.input_dim {
            return Err(Error::ShapeContract {
                op: "extract_features",
                expected: format!("[b, {}] input", self.spec.input_dim),
                got: g.shape(x).to_vec(),
            });
        }
        mlp_forward(g, &bound.extractor, x)
    }

    /// Probability batch node (softmaxed) for head `i` over a feature node.
    pub fn head_probs_node(
        &self,
        g: &mut Graph,
        bound: &BoundModel,
        i: usize,
        features: Tensor,
    ) -> Result<Tensor> {
        if g.shape(features).len() != 2 || g.shape(features)[1] != self.spec.feature_dim {
            return Err(Error::ShapeContract {
                op: "classify_all",
                expected: format!("[b, {}] features", self.spec.feature_dim),
                got: g.shape(features).to_vec(),
            });
        }
        let logits = mlp_forward(g, &bound.heads[i], features)?;
        g.softmax_rows(logits)
    }

    /// All `n` probability batch nodes over a shared feature node.
    pub fn classify_all_nodes(
        &self,
        g: &mut Graph,
        bound: &BoundModel,
        features: Tensor,
    ) -> Result<Vec<Tensor>> {
        (0..self.heads.len())
            .map(|i| self.head_probs_node(g, bound, i, features))
            .collect()
    }

    /// Host-side feature extraction on a scratch graph.
    pub fn extract_features(&self, x: &Matrix) -> Result<Matrix> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let xi = g.input_matrix(x);
        let f = self.features_node(&mut g, &bound, xi)?;
        Ok(Matrix::new(x.rows, self.spec.feature_dim, g.values(f).to_vec()))
    }

    /// Host-side per-head probability batches on a scratch graph.
    pub fn classify_all(&self, x: &Matrix) -> Result<Vec<Matrix>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let xi = g.input_matrix(x);
        let f = self.features_node(&mut g, &bound, xi)?;
        let ps = self.classify_all_nodes(&mut g, &bound, f)?;
        Ok(ps
            .into_iter()
            .map(|p| Matrix::new(x.rows, self.spec.n_classes, g.values(p).to_vec()))
            .collect())
    }

    /// Consensus label = argmax of the mean of head probabilities; per-head
    /// argmax labels are returned alongside.
    pub fn predict(&self, x: &Matrix) -> Result<Prediction> {
        let probs = self.classify_all(x)?;
        let n = probs.len() as f64;
        let k = self.spec.n_classes;
        let mut mean = Matrix::zeros(x.rows, k);
        for p in &probs {
            for (m, &v) in mean.data.iter_mut().zip(&p.data) {
                *m += v / n;
            }
        }
        let consensus = (0..x.rows).map(|r| argmax(mean.row(r))).collect();
        let per_head = probs
            .iter()
            .map(|p| (0..x.rows).map(|r| argmax(p.row(r))).collect())
            .collect();
        Ok(Prediction {
            consensus,
            per_head,
            mean_probs: mean,
        })
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
