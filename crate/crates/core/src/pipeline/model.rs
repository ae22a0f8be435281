use std::collections::BTreeMap;

use malenia_tensor::{Binder, Graph, InitRng, Linear, ParamId, ParamStore, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::config::{BackgroundRule, LossConfig, ModelConfig};
use crate::alignment::{attribute_match_cost, build_pairs, deep_dice_loss, multiscale_sim_loss, normalize_rows, similarity, PairSets};
use crate::attributes::{
    provider_features, query_disease, AttributeSchema, EmbeddingBank, KnowledgeTable, StructuredReport, TextProvider,
    BACKGROUND_ID,
};
use crate::backbone::{Backbone, FeaturePyramid};
use crate::cmki::{
    aggregation_ids, argmax_labels, background_channel, predict_masks, seg_loss, total_loss, voxel_targets, Cmki,
    FusedPair, MaskPrediction,
};
use crate::error::{Error, Result};
use crate::maskdecoder::{assign, matching_cost, upsample_logits, Assignment, DecoderConfig, DecoderOutput, MaskDecoder};
use crate::phantom::Volume;

/// The full network with its parameters and the cached provider features
/// of every attribute description.
#[derive(Clone, Debug)]
pub struct Malenia<T: Scalar> {
    config: ModelConfig,
    schema: AttributeSchema,
    /// `[R, text_dim]`, row `k - 1` for attribute id `k`.
    features: Tensor<T>,
    pub store: ParamStore<T>,
    backbone: Backbone,
    decoder: MaskDecoder,
    cmki: Cmki,
    text_proj: Linear,
    t0: ParamId,
    tau: ParamId,
}

/// Loss terms of one training sample.
#[derive(Clone, Debug)]
pub struct LossParts<'g, T: Scalar> {
    pub total: Var<'g, T>,
    pub deep: Option<Var<'g, T>>,
    pub sim: Var<'g, T>,
    pub seg: Var<'g, T>,
    pub assignment: Assignment,
    pub trace: Trace<'g, T>,
}

/// Intermediate tensors of a forward pass.
#[derive(Clone, Debug)]
pub struct Trace<'g, T: Scalar> {
    pub pyramid: FeaturePyramid<'g, T>,
    pub decoder: DecoderOutput<'g, T>,
    pub text: Var<'g, T>,
    pub fused: FusedPair<'g, T>,
    pub prediction: MaskPrediction<'g, T>,
}

/// Step-II outcome for one token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenPrediction {
    pub token: usize,
    /// Some attribute is more similar than `t_0`.
    pub foreground: bool,
    pub report: StructuredReport,
    /// Step-IV top-1 disease and its score, for foreground tokens.
    pub disease: Option<(String, u32)>,
    /// Voxels whose ensembled argmax is this token.
    pub voxels: usize,
}

/// Inference output; masks are `[V, N]` logits, i.e. `(H, W, D, N)` once
/// reshaped.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBundle<T> {
    pub shape: [usize; 3],
    pub mask_m: Tensor<T>,
    pub mask_t: Tensor<T>,
    pub mask: Tensor<T>,
    pub labels: Vec<usize>,
    pub tokens: Vec<TokenPrediction>,
}

impl<T: Scalar> PredictionBundle<T> {
    /// Voxels labelled with a foreground token identified as `class`.
    pub fn class_mask(&self, class: &str) -> Vec<u8> {
        let hit: Vec<bool> = self
            .tokens
            .iter()
            .map(|t| t.foreground && t.disease.as_ref().is_some_and(|(d, _)| d == class))
            .collect();
        self.labels.iter().map(|&j| hit[j] as u8).collect()
    }

    /// Voxels labelled with any foreground token.
    pub fn foreground_mask(&self) -> Vec<u8> {
        self.labels.iter().map(|&j| self.tokens[j].foreground as u8).collect()
    }

    /// Foreground tokens owning at least one voxel, with their masks.
    pub fn lesions(&self) -> Vec<(&TokenPrediction, Vec<u8>)> {
        self.tokens
            .iter()
            .filter(|t| t.foreground && t.voxels > 0)
            .map(|t| (t, self.labels.iter().map(|&j| (j == t.token) as u8).collect()))
            .collect()
    }

    pub fn summary(&self) -> BundleSummary {
        BundleSummary {
            shape: self.shape,
            lesions: self
                .lesions()
                .into_iter()
                .map(|(t, _)| LesionSummary {
                    token: t.token,
                    voxels: t.voxels,
                    disease: t.disease.clone(),
                    attributes: t.report.0.iter().map(|(a, v)| (a.to_string(), v.clone())).collect(),
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleSummary {
    pub shape: [usize; 3],
    pub lesions: Vec<LesionSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionSummary {
    pub token: usize,
    pub voxels: usize,
    pub disease: Option<(String, u32)>,
    pub attributes: BTreeMap<String, String>,
}

impl<T: Scalar> Malenia<T> {
    /// Queries `provider` once per attribute description and builds a freshly
    /// initialised model.
    pub fn new(config: &ModelConfig, schema: AttributeSchema, provider: &dyn TextProvider, seed: u64) -> Result<Self> {
        if provider.dim() != config.text_dim {
            return Err(Error::Config(format!("provider width {} but text_dim {}", provider.dim(), config.text_dim)));
        }
        let rows = provider_features(&schema, provider)?;
        let features = Tensor::new(
            &[rows.len(), config.text_dim],
            rows.iter().flatten().map(|&x| T::lit(x)).collect(),
        );
        Self::with_features(config, schema, features, seed)
    }

    pub fn with_features(config: &ModelConfig, schema: AttributeSchema, features: Tensor<T>, seed: u64) -> Result<Self> {
        if features.shape() != [schema.num_values(), config.text_dim] {
            return Err(Error::Shape(format!(
                "features {:?}, expected [{}, {}]",
                features.shape(),
                schema.num_values(),
                config.text_dim
            )));
        }
        let c = config.dim;
        let mut store = ParamStore::new();
        let mut rng = InitRng::new(seed);
        let backbone = Backbone::new(&mut store, &mut rng, &config.backbone, c);
        let decoder_config = DecoderConfig {
            num_tokens: config.tokens,
            attention: config.attention,
            masked_attention: config.masked_attention,
        };
        let decoder = MaskDecoder::new(&mut store, &mut rng, &decoder_config, c);
        let cmki = Cmki::new(&mut store, &mut rng, c, config.tokens, config.attention.heads);
        let text_proj = Linear::new(&mut store, &mut rng, "text.proj", config.text_dim, c, false);
        let t0 = store.add("text.t0", rng.normal(&[1, c], 1.0 / (c as f64).sqrt()));
        let tau = store.add("text.tau", Tensor::scalar(T::lit(config.tau_init)));
        Ok(Malenia { config: config.clone(), schema, features, store, backbone, decoder, cmki, text_proj, t0, tau })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.schema
    }

    pub fn features(&self) -> &Tensor<T> {
        &self.features
    }

    pub fn tau(&self) -> f64 {
        self.store.get(self.tau).item().to_f64().unwrap_or(f64::NAN)
    }

    /// Keeps the learnable temperature inside its configured range.
    pub fn clamp_tau(&mut self) {
        let (lo, hi) = (T::lit(self.config.tau_min), T::lit(self.config.tau_max));
        let t = self.store.get_mut(self.tau);
        let v = t.data()[0];
        t.data_mut()[0] = if v.is_nan() { lo } else { v.max(lo).min(hi) };
    }

    /// `[t_0; proj(features)]`, shape `[R + 1, C]`.
    pub fn text_embeddings<'g>(&self, p: &Binder<'g, T>) -> Var<'g, T> {
        let feats = p.graph().constant(self.features.clone());
        Var::concat_rows(&[p.param(self.t0), self.text_proj.forward(p, feats)])
    }

    /// Snapshot of the text embeddings for inference without the provider.
    pub fn export_bank(&self) -> Result<EmbeddingBank> {
        let g = Graph::inference();
        let p = Binder::new(&g, &self.store);
        let text = self.text_embeddings(&p).value();
        let rows: Vec<Vec<f32>> =
            (0..text.rows()).map(|i| text.row(i).iter().map(|x| x.to_f32().unwrap_or(f32::NAN)).collect()).collect();
        EmbeddingBank::new(&self.schema, &rows)
    }

    pub fn volume_var<'g>(&self, g: &'g Graph<T>, volume: &Volume) -> Var<'g, T> {
        let [h, w, d] = volume.shape;
        g.constant(Tensor::new(&[1, h, w, d], volume.data.iter().map(|&x| T::lit(x as f64)).collect()))
    }

    pub fn pyramid<'g>(&self, p: &Binder<'g, T>, volume: &Volume) -> Result<FeaturePyramid<'g, T>> {
        self.backbone.forward(p, self.volume_var(p.graph(), volume))
    }

    fn similarity<'g>(&self, p: &Binder<'g, T>, tokens: Var<'g, T>, text: Var<'g, T>) -> Result<Var<'g, T>> {
        let tokens = if self.config.normalize_tokens { normalize_rows(tokens) } else { tokens };
        similarity(tokens, text, p.param(self.tau))
    }

    /// Aggregates the text embeddings named by `ids`, fuses them with the
    /// final tokens and predicts both branch masks and their ensemble.
    fn inject<'g>(
        &self,
        p: &Binder<'g, T>,
        tokens: Var<'g, T>,
        text: Var<'g, T>,
        ids: &[Vec<usize>],
        pyramid: &FeaturePyramid<'g, T>,
    ) -> Result<(FusedPair<'g, T>, MaskPrediction<'g, T>)> {
        let aggregated = self.cmki.aggregate(p, text, ids)?;
        let fused = self.cmki.fuse(p, tokens, aggregated)?;
        let (qm, qt, k) = self.cmki.project(p, &fused, pyramid.levels[3].features)?;
        let (mask_m, mask_t) = predict_masks(qm, qt, k)?;
        Ok((fused, self.cmki.ensemble(p, mask_m, mask_t, self.config.ensemble)?))
    }

    /// Training forward pass from a feature pyramid: match, align, inject and
    /// segment. `gt` masks are at the finest pyramid resolution.
    pub fn losses<'g>(
        &self,
        p: &Binder<'g, T>,
        pyramid: FeaturePyramid<'g, T>,
        gt: &[&[u8]],
        reports: &[StructuredReport],
        loss: &LossConfig,
    ) -> Result<LossParts<'g, T>> {
        let full = pyramid.levels[3].grid;
        let voxels: usize = full.iter().product();
        let decoder = self.decoder.forward(p, &pyramid)?;
        let last = decoder.logits.len() - 1;
        let up = upsample_logits(&decoder.logits[last].value(), decoder.grids[last], full);
        let text = self.text_embeddings(p);
        let sims = decoder.tokens.iter().map(|&t| self.similarity(p, t, text)).collect::<Result<Vec<_>>>()?;
        let mut cost = matching_cost(&up, gt, loss.matching)?;
        if loss.matching.attribute > 0.0 {
            let attr = attribute_match_cost(&sims[last].value(), reports, &self.schema)?;
            cost.iter_mut().zip(attr).for_each(|(c, a)| *c += loss.matching.attribute * a);
        }
        let assignment = assign(&cost, gt.len(), up.cols())?;
        let pairs = build_pairs(&assignment, reports, &self.schema)?;
        let sim = multiscale_sim_loss(&sims, &pairs)?;
        let deep = deep_dice_loss(&decoder.logits, &decoder.grids, &assignment, gt, full, loss.gt_downsample)?;

        let (fused, prediction) = self.inject(p, decoder.final_tokens(), text, &aggregation_ids(&pairs), &pyramid)?;
        let t0_sim = match loss.background {
            BackgroundRule::Refined => sims[last].value(),
            BackgroundRule::Query => self.similarity(p, p.param(self.decoder.tokens), text)?.value(),
        };
        let t0_sim: Vec<f64> =
            (0..t0_sim.rows()).map(|j| t0_sim.row(j)[BACKGROUND_ID].to_f64().unwrap_or(f64::NAN)).collect();
        let background = background_channel(&t0_sim, &assignment)?;
        let targets = voxel_targets(gt, &assignment, background, voxels)?;
        let seg = seg_loss(prediction.mask, &targets, loss.weights)?;
        let total = total_loss(deep, sim, seg, loss.weights);
        Ok(LossParts {
            total,
            deep,
            sim,
            seg,
            assignment,
            trace: Trace { pyramid, decoder, text, fused, prediction },
        })
    }

    /// Steps I-IV with stored embeddings only.
    pub fn infer(&self, volume: &Volume, bank: &EmbeddingBank, table: &KnowledgeTable) -> Result<PredictionBundle<T>> {
        if bank.schema_hash() != self.schema.hash() {
            return Err(Error::HashMismatch {
                expected: self.schema.hash_hex(),
                found: crate::attributes::hex(&bank.schema_hash()),
            });
        }
        if bank.dim() != self.config.dim {
            return Err(Error::Shape(format!("bank dimension {} but model dimension {}", bank.dim(), self.config.dim)));
        }
        let g = Graph::inference();
        let p = Binder::new(&g, &self.store);
        let text = g.constant(Tensor::new(&[bank.len(), bank.dim()], bank.matrix().iter().map(|&x| T::lit(x as f64)).collect()));

        // Step I
        let pyramid = self.pyramid(&p, volume)?;
        let decoder = self.decoder.forward(&p, &pyramid)?;
        let tokens = decoder.final_tokens();

        // Step II
        let sim = self.similarity(&p, tokens, text)?.value();
        let n = sim.rows();
        let mut predictions = Vec::with_capacity(n);
        let mut ids = Vec::with_capacity(n);
        for j in 0..n {
            let row = sim.row(j);
            let mut report = StructuredReport::new();
            let mut chosen = Vec::new();
            for aspect in self.schema.aspects() {
                let range = self.schema.ids_of_aspect(aspect);
                let best = range.clone().fold(range.start, |b, k| if row[k] > row[b] { k } else { b });
                report.set(aspect, self.schema.entry(best).expect("id in range").1);
                chosen.push(best);
            }
            let top = (1..row.len()).fold(1, |b, k| if row[k] > row[b] { k } else { b });
            let foreground = row[top] > row[BACKGROUND_ID];
            ids.push(if foreground { chosen } else { vec![BACKGROUND_ID; chosen.len()] });
            predictions.push(TokenPrediction { token: j, foreground, report, disease: None, voxels: 0 });
        }

        // Step III
        let (_, prediction) = self.inject(&p, tokens, text, &ids, &pyramid)?;
        let mask = prediction.mask.value();
        let labels = argmax_labels(&mask);
        for &j in &labels {
            predictions[j].voxels += 1;
        }

        // Step IV
        for t in predictions.iter_mut().filter(|t| t.foreground) {
            t.disease = query_disease(&t.report, table)?.into_iter().next();
        }
        Ok(PredictionBundle {
            shape: volume.shape,
            mask_m: (*prediction.mask_m.value()).clone(),
            mask_t: (*prediction.mask_t.value()).clone(),
            mask: (*mask).clone(),
            labels,
            tokens: predictions,
        })
    }

    /// Pair sets for a sample given its assignment, exposed for diagnostics.
    pub fn pairs(&self, assignment: &Assignment, reports: &[StructuredReport]) -> Result<PairSets> {
        build_pairs(assignment, reports, &self.schema)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attributes::{Aspect, CountingProvider, HashingProvider};
    use crate::testutil::tiny_setup;

    #[test]
    fn provider_is_queried_once_per_description_and_never_at_inference() {
        let (config, samples) = tiny_setup();
        let schema = AttributeSchema::default_schema();
        let provider = CountingProvider::new(HashingProvider::new(config.model.text_dim, 0));
        let model = Malenia::<f32>::new(&config.model, schema.clone(), &provider, 1).unwrap();
        assert_eq!(provider.calls(), schema.num_values());
        let bank = model.export_bank().unwrap();
        let bundle = model.infer(&samples[0].volume, &bank, &KnowledgeTable::default_table()).unwrap();
        assert_eq!(provider.calls(), schema.num_values());
        let n = config.model.tokens;
        assert_eq!(bundle.mask.shape(), [32 * 32 * 32, n]);
        assert_eq!(bundle.mask_m.shape(), bundle.mask_t.shape());
        assert_eq!(bundle.tokens.len(), n);
        assert_eq!(bundle.tokens.iter().map(|t| t.voxels).sum::<usize>(), 32 * 32 * 32);
    }

    #[test]
    fn bank_from_another_schema_is_rejected() {
        let (config, samples) = tiny_setup();
        let model = crate::testutil::tiny_model::<f32>(&config);
        let mut aspects: Vec<(Aspect, Vec<String>)> =
            model.schema().aspects().map(|a| (a, model.schema().vocab(a).to_vec())).collect();
        aspects[0].1.reverse();
        let other = AttributeSchema::new(aspects).unwrap();
        let bank = model.export_bank().unwrap();
        let rows: Vec<Vec<f32>> = (0..bank.len()).map(|i| bank.vector(i).to_vec()).collect();
        let foreign = EmbeddingBank::new(&other, &rows).unwrap();
        let err = model.infer(&samples[0].volume, &foreign, &KnowledgeTable::default_table()).unwrap_err();
        assert!(matches!(err, Error::HashMismatch { .. }));
    }

    #[test]
    fn pre_head_is_the_weighted_branch_sum() {
        let (config, samples) = tiny_setup();
        let model = crate::testutil::tiny_model::<f64>(&config);
        let g = Graph::new();
        let p = Binder::new(&g, &model.store);
        let pyramid = model.pyramid(&p, &samples[0].volume).unwrap();
        let gt: Vec<&[u8]> = samples[0].lesions.iter().map(|l| l.mask.as_slice()).collect();
        let reports: Vec<_> = samples[0].lesions.iter().map(|l| l.labels.clone()).collect();
        let parts = model.losses(&p, pyramid, &gt, &reports, &config.loss).unwrap();
        let pred = &parts.trace.prediction;
        let (m, t, pre) = (pred.mask_m.value(), pred.mask_t.value(), pred.pre_head.value());
        let w = config.model.ensemble;
        for ((a, b), c) in m.data().iter().zip(t.data()).zip(pre.data()) {
            assert_eq!(*c, w.beta_m * a + w.beta_t * b);
        }
        assert!(parts.total.item().is_finite());
    }
}
