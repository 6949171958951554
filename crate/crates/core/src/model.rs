//! The assembled generator: pretrained preference tables, the co-occurrence
//! graph, and the trainable GNN + encoder + decoder parameters.

use std::collections::BTreeMap;
use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::compat_graph::{self, CooccurrenceGraph, GnnShape};
use crate::data::GenerationInstance;
use crate::decoder::{self, Decoded, DecoderShape, PredictionDistribution};
use crate::encoder::{self, EncoderShape};
use crate::error::{Error, Result};
use crate::layers::ForwardCtx;
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::par::{self, Parallelism};
use crate::pretrain::{PreferenceEmbeddings, PreferenceModel};
use crate::rng::stage_rng;

const STAGE: &str = "train";
const PREF_USERS: &str = "pref.user_table";
const PREF_ITEMS: &str = "pref.item_table";
const GRAPH: &str = "graph.g";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Width of each pretrained embedding; the model width is `2·d_e`.
    pub d_e: usize,
    /// Compatibility (GNN) width; must equal `2·d_e`.
    pub d_c: usize,
    pub heads: usize,
    pub enc_depth: usize,
    pub dec_depth: usize,
    pub gnn_layers: usize,
    pub ffn_hidden: usize,
    pub layernorm: bool,
    /// Feed the GNN output into the encoder input.
    pub use_compat: bool,
    /// Feed the pretrained preference rows into the encoder input.
    pub use_preference: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_e: 64,
            d_c: 128,
            heads: 4,
            enc_depth: 2,
            dec_depth: 2,
            gnn_layers: 2,
            ffn_hidden: 128,
            layernorm: false,
            use_compat: true,
            use_preference: true,
        }
    }
}

impl ModelConfig {
    /// Config with model width `2·d_e` and FFN hidden width equal to it.
    pub fn with_dim(d_e: usize) -> Self {
        ModelConfig { d_e, d_c: 2 * d_e, ffn_hidden: 2 * d_e, ..Self::default() }
    }

    pub fn dim(&self) -> usize {
        self.d_c
    }

    pub fn validate(&self) -> Result<()> {
        if 2 * self.d_e != self.d_c {
            return Err(Error::Config(format!(
                "preference width 2·d_e = {} must equal compatibility width d_c = {}",
                2 * self.d_e,
                self.d_c
            )));
        }
        crate::layers::check_heads(self.d_c, self.heads)?;
        if self.enc_depth == 0 || self.dec_depth == 0 || self.gnn_layers == 0 || self.ffn_hidden == 0 {
            return Err(Error::Config("depths, GNN layers and FFN width must be positive".into()));
        }
        Ok(())
    }

    fn encoder_shape(&self) -> EncoderShape {
        EncoderShape {
            dim: self.d_c,
            heads: self.heads,
            depth: self.enc_depth,
            ffn_hidden: self.ffn_hidden,
            layernorm: self.layernorm,
        }
    }

    fn decoder_shape(&self, n_items: usize) -> DecoderShape {
        DecoderShape {
            dim: self.d_c,
            heads: self.heads,
            depth: self.dec_depth,
            ffn_hidden: self.ffn_hidden,
            n_items,
            layernorm: self.layernorm,
        }
    }

    fn to_metadata(self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        for (k, v) in [
            ("d_e", self.d_e),
            ("d_c", self.d_c),
            ("heads", self.heads),
            ("enc_depth", self.enc_depth),
            ("dec_depth", self.dec_depth),
            ("gnn_layers", self.gnn_layers),
            ("ffn_hidden", self.ffn_hidden),
        ] {
            m.insert(k.to_string(), v.to_string());
        }
        for (k, v) in [
            ("layernorm", self.layernorm),
            ("use_compat", self.use_compat),
            ("use_preference", self.use_preference),
        ] {
            m.insert(k.to_string(), v.to_string());
        }
        m
    }

    fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        Ok(ModelConfig {
            d_e: c.meta_parse("d_e")?,
            d_c: c.meta_parse("d_c")?,
            heads: c.meta_parse("heads")?,
            enc_depth: c.meta_parse("enc_depth")?,
            dec_depth: c.meta_parse("dec_depth")?,
            gnn_layers: c.meta_parse("gnn_layers")?,
            ffn_hidden: c.meta_parse("ffn_hidden")?,
            layernorm: c.meta_parse("layernorm")?,
            use_compat: c.meta_parse("use_compat")?,
            use_preference: c.meta_parse("use_preference")?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BundleNat {
    pub cfg: ModelConfig,
    pub prefs: PreferenceEmbeddings,
    pub graph: CooccurrenceGraph,
    pub params: ParamStore,
    propagation: Tensor,
}

impl BundleNat {
    pub fn init(cfg: ModelConfig, prefs: PreferenceEmbeddings, graph: CooccurrenceGraph, seed: u64) -> Result<Self> {
        let mut model = Self::assemble(cfg, prefs, graph, ParamStore::new())?;
        let n = model.n_items();
        let mut rng = stage_rng(seed, "model-init");
        compat_graph::init_gnn(
            &mut model.params,
            GnnShape { n_items: n, dim: cfg.d_c, layers: cfg.gnn_layers },
            &mut rng,
        )?;
        encoder::init_encoder(&mut model.params, cfg.encoder_shape(), &mut rng)?;
        decoder::init_decoder(&mut model.params, cfg.decoder_shape(n), &mut rng)?;
        Ok(model)
    }

    fn assemble(cfg: ModelConfig, prefs: PreferenceEmbeddings, graph: CooccurrenceGraph, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        if prefs.dim() != cfg.d_e {
            return Err(Error::Dimension(format!(
                "pretrained embeddings have d_e = {}, model expects {}",
                prefs.dim(),
                cfg.d_e
            )));
        }
        if prefs.n_items() != graph.n_items() {
            return Err(Error::Dimension(format!(
                "embeddings cover {} items, graph covers {}",
                prefs.n_items(),
                graph.n_items()
            )));
        }
        let propagation = graph.propagation_matrix();
        Ok(BundleNat { cfg, prefs, graph, params, propagation })
    }

    pub fn n_items(&self) -> usize {
        self.graph.n_items()
    }

    pub fn n_users(&self) -> usize {
        self.prefs.n_users()
    }

    pub fn encoder_shape(&self) -> EncoderShape {
        self.cfg.encoder_shape()
    }

    pub fn decoder_shape(&self) -> DecoderShape {
        self.cfg.decoder_shape(self.n_items())
    }

    pub fn check_instance(&self, inst: &GenerationInstance) -> Result<()> {
        if inst.user >= self.n_users() {
            return Err(Error::Range { what: "user", id: inst.user, size: self.n_users() });
        }
        if let Some(&bad) = inst.candidates.iter().find(|&&c| c >= self.n_items()) {
            return Err(Error::Range { what: "item", id: bad, size: self.n_items() });
        }
        if inst.candidates.is_empty() {
            return Err(Error::Argument("instance has no candidates".into()));
        }
        Ok(())
    }

    /// Tapes the full-vocabulary GNN; `None` when compatibility is disabled.
    pub fn compat_var(&self, tape: &mut Tape) -> Result<Option<Var>> {
        if !self.cfg.use_compat {
            return Ok(None);
        }
        let s = tape.constant(self.propagation.clone());
        compat_graph::gnn_forward(tape, &self.params, s, self.cfg.gnn_layers).map(Some)
    }

    /// GNN output for every item, computed without a gradient record.
    pub fn compat_table(&self) -> Result<Option<Tensor>> {
        let mut tape = Tape::new();
        Ok(self.compat_var(&mut tape)?.map(|v| tape.value(v).clone()))
    }

    /// Encoder input `X` on `tape`. `compat_rows` holds the candidates' GNN
    /// rows (already on the tape) or `None` to leave the compatibility
    /// signal out.
    pub fn input_var(&self, tape: &mut Tape, inst: &GenerationInstance, compat_rows: Option<Var>) -> Result<Var> {
        let p = if self.cfg.use_preference {
            encoder::preference_rows(inst, &self.prefs)
        } else {
            Tensor::zeros(inst.candidates.len(), self.cfg.d_c)
        };
        let p = tape.constant(p);
        match compat_rows {
            Some(c) => tape.add(p, c),
            None => Ok(p),
        }
    }

    /// `1×N` logits for one instance.
    pub fn logits_var(
        &self,
        tape: &mut Tape,
        inst: &GenerationInstance,
        compat_rows: Option<Var>,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let x = self.input_var(tape, inst, compat_rows)?;
        let x_f = encoder::encode(tape, &self.params, &self.encoder_shape(), x, ctx)?;
        decoder::decode_logits(tape, &self.params, &self.decoder_shape(), x_f, ctx)
    }

    /// Encoder output for one instance, given a precomputed compat table.
    pub fn encode_instance(
        &self,
        tape: &mut Tape,
        inst: &GenerationInstance,
        compat: Option<&Tensor>,
    ) -> Result<Var> {
        self.check_instance(inst)?;
        let rows = compat.map(|c| gather(c, &inst.candidates)).map(|t| tape.constant(t));
        let x = self.input_var(tape, inst, rows)?;
        encoder::encode(tape, &self.params, &self.encoder_shape(), x, &mut ForwardCtx::eval())
    }

    /// Evaluation-mode forward pass and top-k for one instance.
    pub fn decode_with(&self, inst: &GenerationInstance, compat: Option<&Tensor>, k: usize) -> Result<Decoded> {
        let mut tape = Tape::new();
        let x_f = self.encode_instance(&mut tape, inst, compat)?;
        decoder::decode(
            &mut tape,
            &self.params,
            &self.decoder_shape(),
            x_f,
            &inst.candidates,
            k,
            &mut ForwardCtx::eval(),
        )
    }

    pub fn distribution(&self, inst: &GenerationInstance) -> Result<PredictionDistribution> {
        Ok(self.decode_with(inst, self.compat_table()?.as_ref(), 1)?.dist)
    }

    pub fn predict(&self, inst: &GenerationInstance, k: usize) -> Result<Vec<usize>> {
        Ok(self.decode_with(inst, self.compat_table()?.as_ref(), k)?.bundle)
    }

    /// Bundles for many instances; the GNN runs once.
    pub fn predict_many(&self, instances: &[GenerationInstance], k: usize, mode: Parallelism) -> Result<Vec<Vec<usize>>> {
        let compat = self.compat_table()?;
        par::map(mode, instances, |inst| {
            self.decode_with(inst, compat.as_ref(), k).map(|d| d.bundle)
        })
        .into_iter()
        .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(STAGE);
        c.metadata = self.cfg.to_metadata();
        for (name, p) in self.params.iter() {
            c.insert(name, p.value.clone());
        }
        c.insert(PREF_USERS, self.prefs.user_table.clone());
        c.insert(PREF_ITEMS, self.prefs.item_table.clone());
        c.insert(GRAPH, self.graph.matrix().clone());
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.stage != STAGE {
            return Err(Error::Format(format!("expected a '{STAGE}' checkpoint, found '{}'", c.stage)));
        }
        let cfg = ModelConfig::from_checkpoint(c)?;
        let prefs = PreferenceEmbeddings {
            user_table: c.tensor(PREF_USERS)?.clone(),
            item_table: c.tensor(PREF_ITEMS)?.clone(),
        };
        let graph = CooccurrenceGraph::from_matrix(c.tensor(GRAPH)?.clone())?;
        let values = c
            .tensors
            .iter()
            .filter(|(name, _)| ![PREF_USERS, PREF_ITEMS, GRAPH].contains(&name.as_str()))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        let model = Self::assemble(cfg, prefs, graph, ParamStore::from_values(values))?;
        let expected = Self::init(cfg, model.prefs.clone(), model.graph.clone(), 0)?;
        let want: Vec<(&str, &[usize])> = expected.params.iter().map(|(n, p)| (n, p.value.shape())).collect();
        let got: Vec<(&str, &[usize])> = model.params.iter().map(|(n, p)| (n, p.value.shape())).collect();
        if want != got {
            return Err(Error::Dimension("checkpoint parameters do not match the stored model config".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }
}

/// Rows `ids` of `t`.
pub(crate) fn gather(t: &Tensor, ids: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(ids.len(), t.cols());
    for (r, &i) in ids.iter().enumerate() {
        out.row_slice_mut(r).copy_from_slice(t.row_slice(i));
    }
    out
}
