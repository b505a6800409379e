//! Anomaly detection for ECU/UDP communication logs with a small
//! decoder-only language model.
//!
//! The pipeline mirrors how such logs are analyzed offline:
//!
//! 1. [`trace`] — the log-line data model (PDU messages), normalization and
//!    JSONL/CSV serialization.
//! 2. [`synth`] — deterministic synthetic trace generation with injected
//!    cycle-time anomalies, true labels, and a deliberately unreliable
//!    rule-based labeler.
//! 3. [`tokenizer`] — domain tokenization: custom BPE (digits never merged),
//!    plus Row and Group baseline tokenizers, with a line-to-token span map.
//! 4. [`window`] — sliding training windows and per-line detection contexts.
//! 5. [`model`] — a miniature decoder-only transformer (RMS pre-norm, rotary
//!    positions, gated MLP, tied embeddings) with hand-written forward and
//!    backward passes.
//! 6. [`train`] — next-token pre-training, entropy-regularized fine-tuning
//!    on inconsistent anomaly labels, LoRA adapters, a contrastive baseline,
//!    and finite-difference gradient checking.
//! 7. [`detect`] — perplexity / top-k scoring, consecutive-run filtering,
//!    region grouping and precision/recall evaluation.
//! 8. [`evalbench`] — perturbation sensitivity studies and tokenizer /
//!    prompt-length / objective sweeps.




pub mod math;
pub mod model;

pub mod synth;
pub mod tokenizer;
pub mod trace;
pub mod train;
pub mod window;

pub use trace::{ActivityState, LabelKind, LineLabels, PduMessage, Trace, TraceFormat};
