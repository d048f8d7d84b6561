//! Part-aware prompt learning.
//!
//! A prompt for part class `k` is `[specific][shared][text]`:
//!
//! * specific tokens come from a shallow network applied to the part's visual
//!   prototype, with one network shared by all parts and categories;
//! * shared tokens come from a bank keyed by normalized part name, so the
//!   "body" of every category reads and trains the same entry. Each entry keeps
//!   learnable current tokens and an exponential-moving-average copy;
//! * text tokens come from the tokenizer.
//!
//! The ablation designs swap the visual block: `Lgp` uses one block generated
//! from the support image's mean feature for every class, `Lpp` keeps only the
//! specific tokens, and `ProtoNet` drops the textual branch altogether.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::encoders::{BlockLabel, TokenSequence};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptDesign {
    ProtoNet,
    Lgp,
    Lpp,
    Ppl,
}

impl PromptDesign {
    pub fn has_text_branch(self) -> bool {
        self != PromptDesign::ProtoNet
    }
}

impl FromStr for PromptDesign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "protonet" => Ok(Self::ProtoNet),
            "lgp" => Ok(Self::Lgp),
            "lpp" => Ok(Self::Lpp),
            "ppl" => Ok(Self::Ppl),
            other => Err(Error::Argument(format!(
                "unknown prompt design {other:?} (expected protonet, lgp, lpp or ppl)"
            ))),
        }
    }
}

impl fmt::Display for PromptDesign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ProtoNet => "protonet",
            Self::Lgp => "lgp",
            Self::Lpp => "lpp",
            Self::Ppl => "ppl",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Two affine layers with a tanh between them, mapping a `C`-vector to
/// `n_tokens × token_dim` prompt tokens. Hidden width is `2·C`.
#[derive(Clone, Debug)]
pub struct TokenGenerator {
    prefix: String,
    input_dim: usize,
    n_tokens: usize,
    token_dim: usize,
}

impl TokenGenerator {
    pub fn new(prefix: &str, input_dim: usize, n_tokens: usize, token_dim: usize) -> Self {
        Self {
            prefix: prefix.to_string(),
            input_dim,
            n_tokens,
            token_dim,
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    fn name(&self, p: &str) -> String {
        format!("{}.{p}", self.prefix)
    }

    pub fn init_params(&self, rng: &mut ChaCha8Rng, params: &mut ParamStore) {
        if self.n_tokens == 0 {
            return;
        }
        let (c, h, o) = (self.input_dim, 2 * self.input_dim, self.n_tokens * self.token_dim);
        params.insert(self.name("w1"), Tensor::randn(rng, &[c, h], (1.0 / c as f64).sqrt()));
        params.insert(self.name("b1"), Tensor::zeros(&[h]));
        params.insert(self.name("w2"), Tensor::randn(rng, &[h, o], (1.0 / h as f64).sqrt()));
        params.insert(self.name("b2"), Tensor::zeros(&[o]));
    }

    /// Token block for one input vector, or `None` when `n_tokens` is zero.
    pub fn forward(&self, tape: &mut Tape, params: &ParamStore, input: Var) -> Result<Option<Var>> {
        if self.n_tokens == 0 {
            return Ok(None);
        }
        if tape.shape(input) != [self.input_dim] {
            return Err(Error::Argument(format!(
                "generator input must be [{}], got {:?}",
                self.input_dim,
                tape.shape(input)
            )));
        }
        let x = tape.reshape(input, &[1, self.input_dim])?;
        let w1 = params.leaf(tape, &self.name("w1"), true)?;
        let b1 = params.leaf(tape, &self.name("b1"), true)?;
        let w2 = params.leaf(tape, &self.name("w2"), true)?;
        let b2 = params.leaf(tape, &self.name("b2"), true)?;
        let h = tape.linear(x, w1, b1)?;
        let h = tape.tanh(h);
        let out = tape.linear(h, w2, b2)?;
        tape.reshape(out, &[self.n_tokens, self.token_dim]).map(Some)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BankEntry {
    /// Learnable current tokens, updated by the optimizer.
    pub current: Tensor,
    /// Moving-average tokens, written only by [`SharedTokenBank::ema_update`].
    pub shared: Tensor,
    pub updates: u64,
}

/// Part-shared tokens keyed by normalized part name.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedTokenBank {
    momentum: f64,
    n_tokens: usize,
    token_dim: usize,
    entries: BTreeMap<String, BankEntry>,
}

pub const BANK_INIT_STD: f64 = 0.02;

impl SharedTokenBank {
    /// Creates one entry per key with identical Gaussian initialization of
    /// current and shared tokens. Keys are initialized in sorted order.
    pub fn new(
        keys: &[String],
        n_tokens: usize,
        token_dim: usize,
        momentum: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Config(format!("EMA momentum {momentum} outside [0, 1]")));
        }
        let mut sorted = keys.to_vec();
        sorted.sort();
        sorted.dedup();
        let mut entries = BTreeMap::new();
        if n_tokens > 0 {
            for k in sorted {
                let init = Tensor::randn(rng, &[n_tokens, token_dim], BANK_INIT_STD);
                entries.insert(
                    k,
                    BankEntry {
                        current: init.clone(),
                        shared: init,
                        updates: 0,
                    },
                );
            }
        }
        Ok(Self {
            momentum,
            n_tokens,
            token_dim,
            entries,
        })
    }

    pub(crate) fn from_entries(
        momentum: f64,
        n_tokens: usize,
        token_dim: usize,
        entries: BTreeMap<String, BankEntry>,
    ) -> Self {
        Self {
            momentum,
            n_tokens,
            token_dim,
            entries,
        }
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn entries(&self) -> &BTreeMap<String, BankEntry> {
        &self.entries
    }

    pub fn entry(&self, key: &str) -> Result<&BankEntry> {
        self.entries
            .get(key)
            .ok_or_else(|| Error::Lookup(format!("shared-token key {key:?}")))
    }

    pub fn entry_mut(&mut self, key: &str) -> Result<&mut BankEntry> {
        self.entries
            .get_mut(key)
            .ok_or_else(|| Error::Lookup(format!("shared-token key {key:?}")))
    }

    /// Parameter name under which the current tokens of `key` train.
    pub fn param_name(key: &str) -> String {
        format!("bank.{key}")
    }

    /// `shared ← m·shared + (1 − m)·current`, reading `current` as a plain value.
    pub fn ema_update(&mut self, key: &str) -> Result<()> {
        let m = self.momentum;
        let entry = self.entry_mut(key)?;
        for (s, c) in entry.shared.data_mut().iter_mut().zip(entry.current.data()) {
            *s = m * *s + (1.0 - m) * c;
        }
        entry.updates += 1;
        Ok(())
    }

    /// The shared block consumed by the forward pass. In training it is
    /// `m·shared + (1 − m)·current` with `shared` entering as a constant, so
    /// gradients reach `current` only; in evaluation it is `shared`.
    pub fn tokens_on(&self, tape: &mut Tape, key: &str, mode: Mode) -> Result<Var> {
        let entry = self.entry(key)?;
        let shared = tape.constant(entry.shared.clone());
        match mode {
            Mode::Eval => Ok(shared),
            Mode::Train => {
                let current = tape.param(&Self::param_name(key), &entry.current);
                tape.affine2(shared, self.momentum, current, 1.0 - self.momentum)
            }
        }
    }
}

/// A prompt recorded on a tape.
#[derive(Clone, Debug)]
pub struct PromptOnTape {
    pub tokens: Var,
    pub labels: Vec<BlockLabel>,
}

/// `[specific][shared]`; `None` when both blocks are empty.
pub fn compose_visual_tokens(
    tape: &mut Tape,
    specific: Option<Var>,
    shared: Option<Var>,
) -> Result<Option<(Var, Vec<BlockLabel>)>> {
    let mut blocks = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (block, label) in [(specific, BlockLabel::Specific), (shared, BlockLabel::Shared)] {
        let Some(b) = block else { continue };
        let s = tape.shape(b).to_vec();
        if s.len() != 2 {
            return Err(Error::Argument(format!("token block must be [n, d], got {s:?}")));
        }
        if *width.get_or_insert(s[1]) != s[1] {
            return Err(Error::Argument(format!(
                "token width mismatch: {} vs {}",
                width.unwrap_or_default(),
                s[1]
            )));
        }
        labels.extend(std::iter::repeat_n(label, s[0]));
        if s[0] > 0 {
            blocks.push(b);
        }
    }
    if blocks.is_empty() {
        return Ok(None);
    }
    let v = if blocks.len() == 1 {
        blocks[0]
    } else {
        tape.concat_rows(&blocks)?
    };
    Ok(Some((v, labels)))
}

/// `[visual][text]`, rejected when longer than `context_limit`.
pub fn assemble_prompt(
    tape: &mut Tape,
    visual: Option<(Var, Vec<BlockLabel>)>,
    text: Var,
    context_limit: usize,
) -> Result<PromptOnTape> {
    let n_text = tape.shape(text)[0];
    let (n_visual, tokens, mut labels) = match visual {
        Some((v, labels)) => {
            if tape.shape(v)[1] != tape.shape(text)[1] {
                return Err(Error::Argument(format!(
                    "visual token width {} differs from text token width {}",
                    tape.shape(v)[1],
                    tape.shape(text)[1]
                )));
            }
            (labels.len(), tape.concat_rows(&[v, text])?, labels)
        }
        None => (0, text, Vec::new()),
    };
    if n_visual + n_text > context_limit {
        return Err(Error::Argument(format!(
            "prompt of {n_visual} visual + {n_text} text tokens exceeds the context limit {context_limit}"
        )));
    }
    labels.extend(std::iter::repeat_n(BlockLabel::Text, n_text));
    Ok(PromptOnTape { tokens, labels })
}

/// Value-level prompt assembly, `[specific][shared][text]`.
pub fn assemble_token_sequence(
    specific: Option<&Tensor>,
    shared: Option<&Tensor>,
    text: &TokenSequence,
    context_limit: usize,
) -> Result<TokenSequence> {
    let mut tape = Tape::new();
    let s = specific.map(|t| tape.constant(t.clone()));
    let h = shared.map(|t| tape.constant(t.clone()));
    let visual = compose_visual_tokens(&mut tape, s, h)?;
    let t = tape.constant(text.tokens.clone());
    let prompt = assemble_prompt(&mut tape, visual, t, context_limit)?;
    Ok(TokenSequence {
        tokens: tape.value(prompt.tokens).clone(),
        labels: prompt.labels,
    })
}
