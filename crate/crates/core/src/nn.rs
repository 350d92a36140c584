//! Layer building blocks on top of the autodiff graph.

use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::params::{kaiming_uniform, ParamStore};
use crate::tensor::Tensor;

/// Binds a parameter store to a graph for one forward pass.
pub struct Ctx<'g, 's> {
    pub graph: &'g Graph,
    pub store: &'s ParamStore,
    /// Parameters become trainable leaves when set, constants otherwise.
    pub trainable: bool,
    dropout: Option<(f64, RefCell<ChaCha8Rng>)>,
}

impl<'g, 's> Ctx<'g, 's> {
    pub fn new(graph: &'g Graph, store: &'s ParamStore, trainable: bool) -> Self {
        Self { graph, store, trainable, dropout: None }
    }

    pub fn inference(graph: &'g Graph, store: &'s ParamStore) -> Self {
        Self::new(graph, store, false)
    }

    /// Enables dropout with probability `p` (training only).
    pub fn with_dropout(mut self, p: f64, rng: ChaCha8Rng) -> Self {
        if p > 0.0 {
            self.dropout = Some((p, RefCell::new(rng)));
        }
        self
    }

    pub fn p(&self, name: &str) -> Var<'g> {
        if self.trainable {
            self.graph.param(self.store, name)
        } else {
            self.graph.frozen(self.store, name)
        }
    }

    pub fn constant(&self, t: Tensor) -> Var<'g> {
        self.graph.constant(t)
    }

    pub fn dropout(&self, x: Var<'g>) -> Var<'g> {
        let Some((p, rng)) = &self.dropout else { return x };
        let shape = x.shape();
        let n: usize = shape.iter().product();
        let keep = 1.0 / (1.0 - p);
        let mut rng = rng.borrow_mut();
        let mask = (0..n).map(|_| if rng.random::<f64>() < *p { 0.0 } else { keep }).collect();
        x.mul(self.graph.constant(Tensor::new(shape, mask)))
    }

    /// `x @ W + b` with parameters `{name}.weight` / `{name}.bias`.
    pub fn linear(&self, name: &str, x: Var<'g>) -> Var<'g> {
        let w = self.p(&format!("{name}.weight"));
        let bname = format!("{name}.bias");
        let b = self.store.contains(&bname).then(|| self.p(&bname));
        x.linear(w, b)
    }

    pub fn conv1d(&self, name: &str, x: Var<'g>, stride: usize, pad: usize) -> Var<'g> {
        let w = self.p(&format!("{name}.weight"));
        let b = self.p(&format!("{name}.bias"));
        x.conv1d(w, Some(b), stride, pad)
    }

    pub fn conv2d(&self, name: &str, x: Var<'g>, stride: (usize, usize), pad: (usize, usize)) -> Var<'g> {
        let w = self.p(&format!("{name}.weight"));
        let b = self.p(&format!("{name}.bias"));
        x.conv2d(w, Some(b), stride, pad)
    }

    pub fn layer_norm(&self, name: &str, x: Var<'g>) -> Var<'g> {
        let g = self.p(&format!("{name}.weight"));
        let b = self.p(&format!("{name}.bias"));
        x.layer_norm(g, b, 1e-5)
    }
}

pub fn init_linear(store: &mut ParamStore, name: &str, din: usize, dout: usize, bias: bool, rng: &mut impl Rng) {
    store.insert(format!("{name}.weight"), kaiming_uniform(vec![din, dout], din, rng));
    if bias {
        store.insert(format!("{name}.bias"), Tensor::zeros(vec![dout]));
    }
}

pub fn init_conv1d(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, rng: &mut impl Rng) {
    store.insert(format!("{name}.weight"), kaiming_uniform(vec![cout, cin, k], cin * k, rng));
    store.insert(format!("{name}.bias"), Tensor::zeros(vec![cout]));
}

pub fn init_conv2d(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, rng: &mut impl Rng) {
    store.insert(format!("{name}.weight"), kaiming_uniform(vec![cout, cin, k, k], cin * k * k, rng));
    store.insert(format!("{name}.bias"), Tensor::zeros(vec![cout]));
}

pub fn init_layer_norm(store: &mut ParamStore, name: &str, dim: usize) {
    store.insert(format!("{name}.weight"), Tensor::full(vec![dim], 1.0));
    store.insert(format!("{name}.bias"), Tensor::zeros(vec![dim]));
}

/// Zeroes every parameter (used by the zero-network contracts in tests).
pub fn zero_all(store: &mut ParamStore) {
    let names = store.names().to_vec();
    for n in names {
        store.get_mut(&n).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Per-dimension standardization fitted on row-major feature rows.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn fit<'a>(dim: usize, rows: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let mut mean = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        let mut n = 0usize;
        for r in rows {
            for ((m, s), v) in mean.iter_mut().zip(&mut sq).zip(r) {
                *m += v;
                *s += v * v;
            }
            n += 1;
        }
        let n = n.max(1) as f64;
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, s)| {
                *m /= n;
                let var = (s / n - *m * *m).max(0.0);
                if var > 1e-16 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Standardizes a flat buffer of rows in place.
    pub fn apply(&self, data: &mut [f64]) {
        let d = self.dim();
        for r in data.chunks_mut(d) {
            for ((v, m), s) in r.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
    }

    pub fn to_store(&self, store: &mut ParamStore, prefix: &str) {
        store.insert(format!("{prefix}.mean"), Tensor::new(vec![self.dim()], self.mean.clone()));
        store.insert(format!("{prefix}.std"), Tensor::new(vec![self.dim()], self.std.clone()));
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> crate::Result<Self> {
        Ok(Self {
            mean: store.try_get(&format!("{prefix}.mean"))?.data().to_vec(),
            std: store.try_get(&format!("{prefix}.std"))?.data().to_vec(),
        })
    }
}

/// Splits a store into trainable parameters and `stats.*` entries.
pub fn split_stats(store: &ParamStore) -> (ParamStore, ParamStore) {
    let (mut params, mut stats) = (ParamStore::new(), ParamStore::new());
    for (n, t) in store.iter() {
        if n.starts_with("stats.") {
            stats.insert(n, t.clone());
        } else {
            params.insert(n, t.clone());
        }
    }
    (params, stats)
}
