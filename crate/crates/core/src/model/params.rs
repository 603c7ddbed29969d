//! Named, flat parameter storage with optimizer moments, plus the seeded
//! construction of every decoder parameter.

use std::collections::HashMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::aggregation::GateParams;
use crate::attention::{DeformParams, MhaParams};
use crate::error::{Error, Result};
use crate::tensor::{Graph, TensorId};

use super::config::ModelConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// First and second Adam moments, zero until the first update.
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Non-trainable entries persist in checkpoints but are never updated
    /// or decayed.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub entries: Vec<ParamEntry>,
    pub step: u64,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], data: Vec<f64>, trainable: bool) -> usize {
        assert_eq!(data.len(), shape.iter().product::<usize>(), "{name}");
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        let n = data.len();
        let idx = self.entries.len();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
            m: vec![0.0; n],
            v: vec![0.0; n],
            trainable,
        });
        self.index.insert(name.to_string(), idx);
        idx
    }

    pub fn lookup(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Usage(format!("unknown parameter {name}")))
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry> {
        Ok(&self.entries[self.lookup(name)?])
    }

    /// Rebuild the name index (after deserialization).
    pub fn reindex(&mut self) {
        self.index = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.clone(), i))
            .collect();
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }
}

/// One forward pass's binding of every stored parameter to a graph leaf.
pub struct Binder {
    pub ids: Vec<TensorId>,
    index: HashMap<String, usize>,
}

impl Binder {
    pub fn bind(store: &ParamStore, g: &mut Graph<f64>) -> Result<Binder> {
        let mut ids = Vec::with_capacity(store.entries.len());
        for (i, e) in store.entries.iter().enumerate() {
            ids.push(g.param_leaf(&e.shape, e.data.clone(), i)?);
        }
        Ok(Binder {
            ids,
            index: store.index.clone(),
        })
    }

    pub fn id(&self, name: &str) -> TensorId {
        self.ids[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))]
    }

    pub fn mha(&self, prefix: &str) -> MhaParams {
        MhaParams {
            ln_gamma: self.id(&format!("{prefix}.ln_g")),
            ln_beta: self.id(&format!("{prefix}.ln_b")),
            wq: self.id(&format!("{prefix}.wq")),
            bq: self.id(&format!("{prefix}.bq")),
            wk: self.id(&format!("{prefix}.wk")),
            bk: self.id(&format!("{prefix}.bk")),
            wv: self.id(&format!("{prefix}.wv")),
            bv: self.id(&format!("{prefix}.bv")),
            wo: self.id(&format!("{prefix}.wo")),
            bo: self.id(&format!("{prefix}.bo")),
        }
    }

    pub fn deform(&self, prefix: &str) -> DeformParams {
        DeformParams {
            ln_gamma: self.id(&format!("{prefix}.ln_g")),
            ln_beta: self.id(&format!("{prefix}.ln_b")),
            w_off: self.id(&format!("{prefix}.w_off")),
            b_off: self.id(&format!("{prefix}.b_off")),
            w_wgt: self.id(&format!("{prefix}.w_wgt")),
            b_wgt: self.id(&format!("{prefix}.b_wgt")),
            w_val: self.id(&format!("{prefix}.w_val")),
            b_val: self.id(&format!("{prefix}.b_val")),
            w_out: self.id(&format!("{prefix}.w_out")),
            b_out: self.id(&format!("{prefix}.b_out")),
        }
    }

    pub fn gate(&self, prefix: &str) -> GateParams {
        GateParams {
            w1: self.id(&format!("{prefix}.w1")),
            b1: self.id(&format!("{prefix}.b1")),
            w2: self.id(&format!("{prefix}.w2")),
            b2: self.id(&format!("{prefix}.b2")),
        }
    }
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn xavier(&mut self, name: &str, rows: usize, cols: usize) {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| self.rng.gen_range(-bound..bound))
            .collect();
        self.store.add(name, &[rows, cols], data, true);
    }

    fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.store
            .add(name, shape, vec![0.0; shape.iter().product()], true);
    }

    fn fill(&mut self, name: &str, shape: &[usize], v: f64) {
        self.store
            .add(name, shape, vec![v; shape.iter().product()], true);
    }

    fn mha(&mut self, prefix: &str, c: usize) {
        self.fill(&format!("{prefix}.ln_g"), &[c], 1.0);
        self.zeros(&format!("{prefix}.ln_b"), &[c]);
        for w in ["wq", "wk", "wv", "wo"] {
            self.xavier(&format!("{prefix}.{w}"), c, c);
        }
        for b in ["bq", "bk", "bv", "bo"] {
            self.zeros(&format!("{prefix}.{b}"), &[c]);
        }
    }

    fn deform(&mut self, prefix: &str, c: usize, p: usize) {
        self.fill(&format!("{prefix}.ln_g"), &[c], 1.0);
        self.zeros(&format!("{prefix}.ln_b"), &[c]);
        // zero-init offsets: sampling starts at the reference point
        self.zeros(&format!("{prefix}.w_off"), &[c, 2 * p]);
        self.zeros(&format!("{prefix}.b_off"), &[2 * p]);
        self.xavier(&format!("{prefix}.w_wgt"), c, p);
        self.zeros(&format!("{prefix}.b_wgt"), &[p]);
        self.xavier(&format!("{prefix}.w_val"), c, c);
        self.zeros(&format!("{prefix}.b_val"), &[c]);
        self.xavier(&format!("{prefix}.w_out"), c, c);
        self.zeros(&format!("{prefix}.b_out"), &[c]);
    }

    fn ffn(&mut self, prefix: &str, c: usize, mult: usize) {
        self.fill(&format!("{prefix}.ln_g"), &[c], 1.0);
        self.zeros(&format!("{prefix}.ln_b"), &[c]);
        self.xavier(&format!("{prefix}.w1"), c, c * mult);
        self.zeros(&format!("{prefix}.b1"), &[c * mult]);
        self.xavier(&format!("{prefix}.w2"), c * mult, c);
        self.zeros(&format!("{prefix}.b2"), &[c]);
    }

    /// Two-layer head branch with a zero-initialized output layer; `bias`
    /// presets the output bias (focal-friendly prior for class logits).
    fn head_branch(&mut self, prefix: &str, c: usize, out: usize, bias: f64) {
        self.xavier(&format!("{prefix}.w1"), c, c);
        self.zeros(&format!("{prefix}.b1"), &[c]);
        self.zeros(&format!("{prefix}.w2"), &[c, out]);
        self.fill(&format!("{prefix}.b2"), &[out], bias);
    }
}

/// Logit bias preset so untrained class probabilities sit near 0.1, keeping
/// the focal background term small at initialization.
pub const CLS_BIAS_INIT: f64 = -2.2;

/// Create every parameter of the decoder in a deterministic order.
pub fn init_params(cfg: &ModelConfig, anchors0: &[f64]) -> ParamStore {
    let c = cfg.embed_dim;
    let mut store = ParamStore::new();
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        store: &mut store,
    };

    // query embedding and fixed initial anchors
    let n = cfg.n_queries;
    init.xavier("q3d0", n, c);
    assert_eq!(anchors0.len(), n * 9);
    init.store.add("anchors0", &[n, 9], anchors0.to_vec(), false);

    // patch embedding of the rasterized features
    let cin = crate::scene::raster_channels(cfg.num_classes);
    init.xavier("embed.w", cin, c);
    init.zeros("embed.b", &[c]);

    for b in 0..cfg.l_hybrid {
        init.mha(&format!("blk{b}.t2d"), c);
        for l in 0..cfg.l_2d {
            init.mha(&format!("blk{b}.l2d{l}.self"), c);
            init.deform(&format!("blk{b}.l2d{l}.cross"), c, cfg.deform_points);
            init.ffn(&format!("blk{b}.l2d{l}.ffn"), c, cfg.ffn_mult);
        }
        if cfg.l_2d > 0 {
            init.xavier(&format!("blk{b}.gate.w1"), c + 1, c);
            init.zeros(&format!("blk{b}.gate.b1"), &[c]);
            init.xavier(&format!("blk{b}.gate.w2"), c, c);
            init.zeros(&format!("blk{b}.gate.b2"), &[c]);
            init.mha(&format!("blk{b}.merge"), c);
        }
        init.mha(&format!("blk{b}.t3d"), c);
        for l in 0..cfg.l_3d {
            init.mha(&format!("blk{b}.l3d{l}.self"), c);
            init.deform(&format!("blk{b}.l3d{l}.cross"), c, cfg.deform_points);
            init.ffn(&format!("blk{b}.l3d{l}.ffn"), c, cfg.ffn_mult);
        }
    }

    // shared heads
    init.head_branch("head2d.cls", c, cfg.num_classes, CLS_BIAS_INIT);
    init.head_branch("head2d.alpha", c, 2, 0.0);
    init.head_branch("head2d.box", c, 4, 0.0);
    init.head_branch("head3d.cls", c, cfg.num_classes, CLS_BIAS_INIT);
    init.head_branch("head3d.delta", c, 10, 0.0);

    store
}
