//! The part segmentation model: one forward pass over an episode.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{NormLayout, Tape, Var};
use crate::data::{Category, Episode, Mask, BACKGROUND_KEY};
use crate::encoders::{
    encode_image_on, encode_text_on, EncoderBundle, EncoderConfig, EncoderRegistry, HashTokenizer,
};
use crate::error::{Error, Result};
use crate::losses::{segment_from_logits, Branch, LogitMode, LogitVolume, LossWeights, SegmentationPrediction};
use crate::params::ParamStore;
use crate::prompt::{
    assemble_prompt, compose_visual_tokens, Mode, PromptDesign, SharedTokenBank, TokenGenerator,
};
use crate::prototypes::{downsample_mask, global_feature_on, prototype_on};

/// Bank key used by every class when shared tokens are not per part.
pub const GLOBAL_SHARED_KEY: &str = "global";

pub const STREAM_ENCODER: u64 = 0;
pub const STREAM_GENERATOR: u64 = 1;
pub const STREAM_LGP: u64 = 2;
pub const STREAM_BANK: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharedKeying {
    PerPart,
    Global,
}

/// Which name is tokenized for a part class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelText {
    Normalized,
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub design: PromptDesign,
    pub n_specific: usize,
    pub n_shared: usize,
    /// EMA momentum `m` of the shared-token bank.
    pub momentum: f64,
    /// Weight of the visual logits when fusing at prediction time.
    pub alpha: f64,
    pub background_in_softmax: bool,
    pub logit_mode: LogitMode,
    pub loss_weights: LossWeights,
    pub shared_keying: SharedKeying,
    pub label_text: LabelText,
    pub text_frozen: bool,
    pub encoder: EncoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            design: PromptDesign::Ppl,
            n_specific: 4,
            n_shared: 4,
            momentum: 0.99,
            alpha: 0.5,
            background_in_softmax: true,
            logit_mode: LogitMode::InnerProduct,
            loss_weights: LossWeights::default(),
            shared_keying: SharedKeying::PerPart,
            label_text: LabelText::Normalized,
            text_frozen: true,
            encoder: EncoderConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1]", self.momentum)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if let LogitMode::Cosine { temperature } = self.logit_mode {
            if !(temperature > 0.0) {
                return Err(Error::Config(format!(
                    "cosine temperature {temperature} must be positive"
                )));
            }
        }
        let w = self.loss_weights;
        if !(w.visual.is_finite() && w.textual.is_finite() && w.visual >= 0.0 && w.textual >= 0.0)
        {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        let visual_tokens = self.specific_tokens() + self.shared_tokens();
        if visual_tokens + self.encoder.n_text > self.encoder.context_limit {
            return Err(Error::Config(format!(
                "{visual_tokens} visual + {} text tokens exceed the context limit {}",
                self.encoder.n_text, self.encoder.context_limit
            )));
        }
        Ok(())
    }

    /// Tokens of the per-class (or, for LGP, per-episode) generated block.
    pub fn specific_tokens(&self) -> usize {
        match self.design {
            PromptDesign::ProtoNet => 0,
            _ => self.n_specific,
        }
    }

    /// Shared-token block length; only the full design carries one.
    pub fn shared_tokens(&self) -> usize {
        match self.design {
            PromptDesign::Ppl => self.n_shared,
            _ => 0,
        }
    }
}

/// Tape handles produced by one episode forward pass.
#[derive(Clone, Debug)]
pub struct EpisodeForward {
    /// Class ids of the logit columns: classes with support pixels.
    pub classes: Vec<u8>,
    pub feature_height: usize,
    pub feature_width: usize,
    pub query_features: Var,
    pub visual_prototypes: Var,
    pub textual_prototypes: Option<Var>,
    pub visual_logits: Var,
    pub textual_logits: Option<Var>,
    /// Prompt tokens per class column, when the textual branch is on.
    pub prompts: Vec<Var>,
    /// Bank keys read by this episode.
    pub shared_keys: Vec<String>,
}

#[derive(Clone, Copy, Debug)]
pub struct EpisodeLoss {
    pub total: Var,
    pub visual: Var,
    pub textual: Option<Var>,
}

#[derive(Clone)]
pub struct PartSegModel {
    pub config: ModelConfig,
    pub bundle: EncoderBundle,
    pub tokenizer: HashTokenizer,
    pub specific: TokenGenerator,
    pub lgp: TokenGenerator,
    pub params: ParamStore,
    pub bank: SharedTokenBank,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl PartSegModel {
    /// Builds and initializes a model. `part_keys` are the normalized part
    /// names seen in training; only they get shared-token entries.
    pub fn new(config: ModelConfig, part_keys: &[String], seed: u64) -> Result<Self> {
        let mut model = Self::uninitialized(config, part_keys, seed)?;
        model
            .bundle
            .init_params(&mut stream(seed, STREAM_ENCODER), model.config.encoder.text_seed, &mut model.params);
        model
            .specific
            .init_params(&mut stream(seed, STREAM_GENERATOR), &mut model.params);
        model.lgp.init_params(&mut stream(seed, STREAM_LGP), &mut model.params);
        Ok(model)
    }

    fn uninitialized(config: ModelConfig, part_keys: &[String], seed: u64) -> Result<Self> {
        config.validate()?;
        let bundle = EncoderRegistry::default().build(&config.encoder, config.text_frozen)?;
        let c = config.encoder.channels;
        let d = config.encoder.token_dim;
        let specific_n = match config.design {
            PromptDesign::Lpp | PromptDesign::Ppl => config.n_specific,
            _ => 0,
        };
        let lgp_n = match config.design {
            PromptDesign::Lgp => config.n_specific,
            _ => 0,
        };
        let keys: Vec<String> = match config.shared_keying {
            SharedKeying::PerPart => part_keys.to_vec(),
            SharedKeying::Global => vec![GLOBAL_SHARED_KEY.to_string()],
        };
        let bank = SharedTokenBank::new(
            &keys,
            config.shared_tokens(),
            d,
            config.momentum,
            &mut stream(seed, STREAM_BANK),
        )?;
        Ok(Self {
            tokenizer: HashTokenizer::from_config(&config.encoder),
            specific: TokenGenerator::new("ppg", c, specific_n, d),
            lgp: TokenGenerator::new("lgp", c, lgp_n, d),
            params: ParamStore::new(),
            bank,
            bundle,
            config,
        })
    }

    pub fn stride(&self) -> usize {
        self.bundle.visual.stride()
    }

    /// Whether parameter `name` is updated by the optimizer.
    pub fn is_trainable(&self, name: &str) -> bool {
        !(self.config.text_frozen && name.starts_with("text."))
    }

    /// Bank key for class `id` of `category`.
    pub fn shared_key(&self, category: &Category, id: u8) -> String {
        match self.config.shared_keying {
            SharedKeying::Global => GLOBAL_SHARED_KEY.to_string(),
            SharedKeying::PerPart => class_key(category, id),
        }
    }

    fn label_text(&self, category: &Category, id: u8) -> String {
        if id == 0 {
            return BACKGROUND_KEY.to_string();
        }
        let part = &category.parts[id as usize - 1];
        match self.config.label_text {
            LabelText::Normalized => part.normalized_name.clone(),
            LabelText::Raw => part.raw_name.clone(),
        }
    }

    /// Encodes the episode's images and runs [`Self::forward_features`].
    pub fn forward_episode(&self, tape: &mut Tape, episode: &Episode, mode: Mode) -> Result<EpisodeForward> {
        let stride = self.stride();
        let mut support = Vec::with_capacity(episode.support.len());
        let mut masks = Vec::with_capacity(episode.support.len());
        for s in &episode.support {
            support.push(encode_image_on(&self.bundle, tape, &self.params, &s.image)?);
            masks.push(downsample_mask(&s.mask, stride));
        }
        let query = encode_image_on(&self.bundle, tape, &self.params, &episode.query.image)?;
        self.forward_features(tape, &episode.category, &support, &masks, query, mode)
    }

    /// Prototypes, prompts, textual prototypes and both logit volumes from
    /// encoded features. `support_masks` are at feature resolution.
    pub fn forward_features(
        &self,
        tape: &mut Tape,
        category: &Category,
        support: &[Var],
        support_masks: &[Mask],
        query: Var,
        mode: Mode,
    ) -> Result<EpisodeForward> {
        if support.is_empty() || support.len() != support_masks.len() {
            return Err(Error::Argument("need one mask per support feature map".into()));
        }
        let qs = tape.shape(query).to_vec();
        let (fh, fw) = (qs[1], qs[2]);
        let mut classes = Vec::new();
        let mut visual = Vec::new();
        let first = if self.config.background_in_softmax { 0 } else { 1 };
        for k in first..=category.part_count() as u8 {
            if let Some(v) = prototype_on(tape, support, support_masks, k)? {
                classes.push(k);
                visual.push(v);
            }
        }
        if classes.is_empty() {
            return Err(Error::Contract(format!(
                "episode of {} has no class with support pixels",
                category.name
            )));
        }

        let mut prompts = Vec::new();
        let mut shared_keys = Vec::new();
        let mut textual = None;
        if self.config.design.has_text_branch() {
            let lgp_block = match self.config.design {
                PromptDesign::Lgp => {
                    let g = global_feature_on(tape, support)?;
                    self.lgp.forward(tape, &self.params, g)?
                }
                _ => None,
            };
            let mut text_protos = Vec::with_capacity(classes.len());
            for (&k, &v) in classes.iter().zip(&visual) {
                let specific = match self.config.design {
                    PromptDesign::Lgp => lgp_block,
                    _ => self.specific.forward(tape, &self.params, v)?,
                };
                let shared = if self.bank.n_tokens() > 0 {
                    let key = self.shared_key(category, k);
                    if self.bank.contains(&key) {
                        let block = self.bank.tokens_on(tape, &key, mode)?;
                        if !shared_keys.contains(&key) {
                            shared_keys.push(key);
                        }
                        Some(block)
                    } else {
                        None
                    }
                } else {
                    None
                };
                let visual_tokens = compose_visual_tokens(tape, specific, shared)?;
                let text = self.tokenizer.tokenize(&self.label_text(category, k))?;
                let text = tape.constant(text.tokens);
                let prompt =
                    assemble_prompt(tape, visual_tokens, text, self.bundle.text.context_limit())?;
                prompts.push(prompt.tokens);
                text_protos.push(encode_text_on(&self.bundle, tape, &self.params, prompt.tokens)?);
            }
            textual = Some(tape.concat_rows(&text_protos)?);
        }
        let visual_prototypes = tape.concat_rows(&visual)?;

        let (feats, scale) = match self.config.logit_mode {
            LogitMode::InnerProduct => (query, None),
            LogitMode::Cosine { temperature } => {
                (tape.l2_normalize(query, NormLayout::Channels)?, Some(1.0 / temperature))
            }
        };
        let logits = |tape: &mut Tape, protos: Var| -> Result<Var> {
            let l = match scale {
                None => tape.correlate(feats, protos)?,
                Some(s) => {
                    let p = tape.l2_normalize(protos, NormLayout::Rows)?;
                    let l = tape.correlate(feats, p)?;
                    tape.scale(l, s)
                }
            };
            Ok(l)
        };
        let visual_logits = logits(tape, visual_prototypes)?;
        let textual_logits = textual.map(|t| logits(tape, t)).transpose()?;
        Ok(EpisodeForward {
            classes,
            feature_height: fh,
            feature_width: fw,
            query_features: query,
            visual_prototypes,
            textual_prototypes: textual,
            visual_logits,
            textual_logits,
            prompts,
            shared_keys,
        })
    }

    /// `w_v·L_vcl + w_t·L_tcl` against the query mask at feature resolution.
    /// Pixels whose class has no column are excluded.
    pub fn loss(&self, tape: &mut Tape, fwd: &EpisodeForward, query_mask: &Mask) -> Result<EpisodeLoss> {
        if (query_mask.height(), query_mask.width()) != (fwd.feature_height, fwd.feature_width) {
            return Err(Error::Argument(format!(
                "query mask {}x{} vs features {}x{}",
                query_mask.height(),
                query_mask.width(),
                fwd.feature_height,
                fwd.feature_width
            )));
        }
        let targets: Vec<Option<usize>> = query_mask
            .data()
            .iter()
            .map(|t| fwd.classes.iter().position(|c| c == t))
            .collect();
        let w = self.config.loss_weights;
        let visual = tape.softmax_xent(fwd.visual_logits, &targets)?;
        let (total, textual) = match fwd.textual_logits {
            Some(t) => {
                let textual = tape.softmax_xent(t, &targets)?;
                (tape.affine2(visual, w.visual, textual, w.textual)?, Some(textual))
            }
            None => (tape.scale(visual, w.visual), None),
        };
        Ok(EpisodeLoss {
            total,
            visual,
            textual,
        })
    }

    /// Evaluation-mode segmentation of the episode's query image.
    pub fn predict(&self, episode: &Episode) -> Result<SegmentationPrediction> {
        self.predict_with_alpha(episode, self.config.alpha)
    }

    pub fn predict_with_alpha(&self, episode: &Episode, alpha: f64) -> Result<SegmentationPrediction> {
        let mut tape = Tape::new();
        let fwd = self.forward_episode(&mut tape, episode, Mode::Eval)?;
        let (visual, textual) = logit_volumes(&tape, &fwd);
        let q = &episode.query.mask;
        segment_from_logits(
            &visual,
            textual.as_ref(),
            alpha,
            self.stride(),
            q.height(),
            q.width(),
            false,
        )
    }
}

/// Normalized part key of class `id`, `background` for class 0.
pub fn class_key(category: &Category, id: u8) -> String {
    if id == 0 {
        BACKGROUND_KEY.to_string()
    } else {
        category.parts[id as usize - 1].normalized_name.clone()
    }
}

/// Values of the forward pass's logits as volumes.
pub fn logit_volumes(tape: &Tape, fwd: &EpisodeForward) -> (LogitVolume, Option<LogitVolume>) {
    let volume = |v: Var, branch| {
        LogitVolume::new(
            fwd.feature_height,
            fwd.feature_width,
            fwd.classes.clone(),
            tape.value(v).data().to_vec(),
            branch,
        )
        .expect("forward shapes")
    };
    (
        volume(fwd.visual_logits, Branch::Visual),
        fwd.textual_logits.map(|t| volume(t, Branch::Textual)),
    )
}
