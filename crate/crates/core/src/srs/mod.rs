//! Selective representation space: chooses patches from all stride-1
//! candidates, reorders them, and fuses their embeddings with the
//! conventional adjacent-patch embeddings.
//!
//! Data flow for `R` rows (windows times channels, channel-independent):
//!
//! ```text
//! context [R, T] -> pad [R, T'] -> adjacent [R, n, p]      -> embed_conventional -+
//!                                -> candidates [R, K, p]                           |
//!                                     scorer_s -> [R, K, n] -> argmax over K       |
//!                                     selected [R, n, p]                           |
//!                                     scorer_r -> [R, n]    -> argsort             |
//!                                     reassembled [R, n, p] -> embed_selective ----+-> fusion + positions [R, n, d]
//! ```
//!
//! Selection and ordering are hard index decisions. Each picked patch is
//! scaled by `score * detach(1 / score)`, which is one in value but carries
//! the gradient of the score.

mod embed;
mod select;

pub use embed::{adaptive_fusion, position_embed, sinusoidal_table};
pub use select::{argmax_slots, argsort_rows, passthrough_select};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, GraphError, ParamId, ParamStore, Tensor, Var};
use crate::nn::{ForwardCtx, Linear, Mlp};
use crate::patching::PatchGeometry;
use crate::scalar::Scalar;

/// Lower bound added after softplus so scores stay strictly positive.
pub const SCORE_EPS: f64 = 1e-4;

/// Which SRS stages are active; everything on is the full module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SrsStages {
    pub selective: bool,
    pub reassembly: bool,
    pub fusion: bool,
}

impl Default for SrsStages {
    fn default() -> Self {
        Self {
            selective: true,
            reassembly: true,
            fusion: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrsConfig {
    pub geometry: PatchGeometry,
    pub d_model: usize,
    /// hidden layers in each scorer
    pub scorer_layers: usize,
    pub scorer_hidden: usize,
    /// initial value of the fusion logits (0 gives alpha = 0.5)
    pub fusion_init: f64,
    pub stages: SrsStages,
}

impl SrsConfig {
    pub fn new(geometry: PatchGeometry, d_model: usize) -> Self {
        Self {
            geometry,
            d_model,
            scorer_layers: 2,
            scorer_hidden: 128,
            fusion_init: 0.0,
            stages: SrsStages::default(),
        }
    }
}

/// Parameter handles of one SRS module; values live in a [`ParamStore`].
#[derive(Debug, Clone)]
///
/// Components of disabled stages are not created.
pub struct SrsState {
    config: SrsConfig,
    scorer_select: Option<Mlp>,
    scorer_reorder: Option<Mlp>,
    embed_conventional: Option<Linear>,
    embed_selective: Linear,
    fusion_logits: Option<ParamId>,
}

/// Per-row decisions of one forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub rows: usize,
    pub slots: usize,
    /// `[rows, slots]` candidate index (= start in the padded context) per sampling slot
    pub selected: Vec<usize>,
    /// `[rows, slots]` reassembly permutation; output slot `j` holds selected slot `order[j]`
    pub order: Vec<usize>,
    /// `[rows, slots]` winning selection score per slot
    pub select_scores: Vec<f64>,
    /// `[rows, slots]` reassembly score per selected patch (before sorting)
    pub reorder_scores: Vec<f64>,
}

impl SelectionTrace {
    pub fn row_selected(&self, r: usize) -> &[usize] {
        &self.selected[r * self.slots..(r + 1) * self.slots]
    }

    pub fn row_order(&self, r: usize) -> &[usize] {
        &self.order[r * self.slots..(r + 1) * self.slots]
    }

    /// Patch starts in final (reassembled) order for row `r`.
    pub fn row_arranged_starts(&self, r: usize) -> Vec<usize> {
        let sel = self.row_selected(r);
        self.row_order(r).iter().map(|&j| sel[j]).collect()
    }
}

pub struct SrsOutput {
    /// `[R, n, d]`
    pub embeddings: Var,
    pub trace: SelectionTrace,
    pub intermediates: SrsIntermediates,
}

/// Graph handles of the internal stages, for inspection and tests.
#[derive(Debug, Clone, Copy)]
pub struct SrsIntermediates {
    pub padded: Var,
    pub adjacent: Var,
    pub candidates: Option<Var>,
    /// `[R, K, n]` positive selection scores
    pub select_scores: Option<Var>,
    pub selected: Var,
    /// `[R, n]` positive reassembly scores
    pub reorder_scores: Option<Var>,
    pub reassembled: Var,
    pub conventional_embedding: Option<Var>,
    pub selective_embedding: Var,
    pub alpha: Option<Var>,
}

/// `softplus(raw) + SCORE_EPS`
pub fn positive_scores<S: Scalar>(g: &mut Graph<S>, raw: Var) -> Var {
    let sp = g.softplus(raw);
    g.affine(sp, S::one(), S::lit(SCORE_EPS))
}

/// Raw scorer outputs and their positive transform.
#[derive(Debug, Clone, Copy)]
pub struct Scores {
    pub raw: Var,
    pub positive: Var,
}

/// Result of a hard selection routed through the passthrough factor.
#[derive(Debug, Clone)]
pub struct Selection {
    pub output: Var,
    /// flat `[rows, slots]` indices into the item axis
    pub indices: Vec<usize>,
    /// positive scores the passthrough factors were built from
    pub scores: Var,
}

/// Scores every candidate `[R, K, p]` for every sampling slot: `[R, K, n]`.
pub fn score_candidates<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    scorer: &Mlp,
    candidates: Var,
    ctx: &mut ForwardCtx,
) -> Result<Scores, GraphError> {
    let raw = scorer.forward(g, store, candidates, ctx)?;
    let positive = positive_scores(g, raw);
    Ok(Scores { raw, positive })
}

/// Per slot, picks the best-scoring candidate (repeats allowed).
pub fn selective_patching<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    scorer: &Mlp,
    candidates: Var,
    ctx: &mut ForwardCtx,
) -> Result<Selection, GraphError> {
    let shape = g.shape(candidates).to_vec();
    let (rows, k) = (shape[0], shape[1]);
    let scores = score_candidates(g, store, scorer, candidates, ctx)?;
    let slots = *g.shape(scores.raw).last().unwrap_or(&0);
    // softplus is strictly increasing, so raw scores give the same decisions
    let indices = argmax_slots(g.value(scores.raw).data(), rows, k, slots);
    let output = passthrough_select(g, candidates, scores.positive, &indices)?;
    Ok(Selection {
        output,
        indices,
        scores: scores.positive,
    })
}

/// Sorts selected patches `[R, n, p]` by one score each, ascending.
pub fn dynamic_reassembly<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    scorer: &Mlp,
    selected: Var,
    ctx: &mut ForwardCtx,
) -> Result<Selection, GraphError> {
    let shape = g.shape(selected).to_vec();
    let (rows, n) = (shape[0], shape[1]);
    let raw = scorer.forward(g, store, selected, ctx)?;
    let raw = g.reshape(raw, vec![rows, n])?;
    let positive = positive_scores(g, raw);
    let indices = argsort_rows(g.value(raw).data(), rows, n);
    let output = passthrough_select(g, selected, positive, &indices)?;
    Ok(Selection {
        output,
        indices,
        scores: positive,
    })
}

impl SrsState {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        config: SrsConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, GraphError> {
        let geom = config.geometry;
        let (p, n, d) = (geom.patch_size, geom.patches, config.d_model);
        let hidden = vec![config.scorer_hidden; config.scorer_layers];
        let dims_s: Vec<usize> = std::iter::once(p)
            .chain(hidden.iter().copied())
            .chain([n])
            .collect();
        let dims_r: Vec<usize> = std::iter::once(p)
            .chain(hidden.iter().copied())
            .chain([1])
            .collect();
        let st = config.stages;
        let scorer_select = if st.selective {
            Some(Mlp::new(store, "srs.scorer_select", &dims_s, 0.0, rng)?)
        } else {
            None
        };
        let scorer_reorder = if st.reassembly {
            Some(Mlp::new(store, "srs.scorer_reorder", &dims_r, 0.0, rng)?)
        } else {
            None
        };
        let embed_conventional = if st.fusion {
            Some(Linear::new(
                store,
                "srs.embed_conventional",
                p,
                d,
                true,
                rng,
            )?)
        } else {
            None
        };
        let embed_selective = Linear::new(store, "srs.embed_selective", p, d, true, rng)?;
        let fusion_logits = if st.fusion {
            Some(store.register(
                "srs.fusion_logits",
                Tensor::full(vec![n, d], S::lit(config.fusion_init)),
            )?)
        } else {
            None
        };
        Ok(Self {
            config,
            scorer_select,
            scorer_reorder,
            embed_conventional,
            embed_selective,
            fusion_logits,
        })
    }

    pub fn config(&self) -> &SrsConfig {
        &self.config
    }

    pub fn geometry(&self) -> &PatchGeometry {
        &self.config.geometry
    }

    pub fn scorer_select(&self) -> Option<&Mlp> {
        self.scorer_select.as_ref()
    }

    pub fn scorer_reorder(&self) -> Option<&Mlp> {
        self.scorer_reorder.as_ref()
    }

    pub fn embed_conventional(&self) -> Option<&Linear> {
        self.embed_conventional.as_ref()
    }

    pub fn embed_selective(&self) -> &Linear {
        &self.embed_selective
    }

    pub fn fusion_logits(&self) -> Option<ParamId> {
        self.fusion_logits
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        ids.extend(self.scorer_select.iter().flat_map(Mlp::params));
        ids.extend(self.scorer_reorder.iter().flat_map(Mlp::params));
        ids.extend(self.embed_conventional.iter().flat_map(Linear::params));
        ids.extend(self.embed_selective.params());
        ids.extend(self.fusion_logits);
        ids
    }

    /// Runs the module on instance-normalized contexts `[R, T]`.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        context: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<SrsOutput, GraphError> {
        let geom = self.config.geometry;
        let shape = g.shape(context).to_vec();
        if shape.len() != 2 || shape[1] != geom.lookback {
            return Err(GraphError::ShapeMismatch {
                op: "srs forward",
                detail: format!("context {shape:?}, lookback {}", geom.lookback),
            });
        }
        let rows = shape[0];
        let (p, n, k) = (geom.patch_size, geom.patches, geom.candidates);

        let padded = g.take(context, geom.pad_index(rows), vec![rows, geom.padded_len])?;
        let adjacent = g.take(
            padded,
            geom.patch_index(rows, &geom.adjacent_starts()),
            vec![rows, n, p],
        )?;

        let (selected, candidates, select_scores, sel_idx, sel_score_vals) =
            if let Some(scorer) = &self.scorer_select {
                let cands = g.take(
                    padded,
                    geom.patch_index(rows, &geom.candidate_starts()),
                    vec![rows, k, p],
                )?;
                let sel = selective_patching(g, store, scorer, cands, ctx)?;
                let sv = g.value(sel.scores).data();
                let vals = (0..rows * n)
                    .map(|i| sv[((i / n) * k + sel.indices[i]) * n + i % n].as_f64())
                    .collect();
                (sel.output, Some(cands), Some(sel.scores), sel.indices, vals)
            } else {
                let idx = (0..rows).flat_map(|_| geom.adjacent_starts()).collect();
                (adjacent, None, None, idx, vec![1.0; rows * n])
            };

        let (reassembled, reorder_scores, order, reorder_vals) =
            if let Some(scorer) = &self.scorer_reorder {
                let re = dynamic_reassembly(g, store, scorer, selected, ctx)?;
                let vals = g
                    .value(re.scores)
                    .data()
                    .iter()
                    .map(|v| v.as_f64())
                    .collect();
                (re.output, Some(re.scores), re.indices, vals)
            } else {
                let order = (0..rows).flat_map(|_| 0..n).collect();
                (selected, None, order, vec![1.0; rows * n])
            };

        let selective_embedding = self.embed_selective.forward(g, store, reassembled)?;
        let (fused, conventional_embedding, alpha) =
            if let (Some(embed), Some(logits)) = (&self.embed_conventional, self.fusion_logits) {
                let ec = embed.forward(g, store, adjacent)?;
                let rho = g.param(store, logits);
                let alpha = g.sigmoid(rho);
                (
                    adaptive_fusion(g, ec, selective_embedding, alpha)?,
                    Some(ec),
                    Some(alpha),
                )
            } else {
                (selective_embedding, None, None)
            };
        let embeddings = position_embed(g, fused)?;

        Ok(SrsOutput {
            embeddings,
            trace: SelectionTrace {
                rows,
                slots: n,
                selected: sel_idx,
                order,
                select_scores: sel_score_vals,
                reorder_scores: reorder_vals,
            },
            intermediates: SrsIntermediates {
                padded,
                adjacent,
                candidates,
                select_scores,
                selected,
                reorder_scores,
                reassembled,
                conventional_embedding,
                selective_embedding,
                alpha,
            },
        })
    }
}

/// Conventional-only front end: adjacent patches, one embedding, positions.
#[derive(Debug, Clone)]
pub struct ConventionalEmbedding {
    geometry: PatchGeometry,
    embed: Linear,
}

impl ConventionalEmbedding {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        geometry: PatchGeometry,
        d_model: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, GraphError> {
        let embed = Linear::new(
            store,
            "patch.embed",
            geometry.patch_size,
            d_model,
            true,
            rng,
        )?;
        Ok(Self { geometry, embed })
    }

    pub fn geometry(&self) -> &PatchGeometry {
        &self.geometry
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.embed.params()
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        context: Var,
    ) -> Result<Var, GraphError> {
        let geom = self.geometry;
        let rows = g.shape(context)[0];
        let padded = g.take(context, geom.pad_index(rows), vec![rows, geom.padded_len])?;
        let patches = g.take(
            padded,
            geom.patch_index(rows, &geom.adjacent_starts()),
            vec![rows, geom.patches, geom.patch_size],
        )?;
        let e = self.embed.forward(g, store, patches)?;
        position_embed(g, e)
    }
}
