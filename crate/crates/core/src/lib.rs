//! Multi-task routed LoRA adapters.
//!
//! A self-contained engine that embeds n frozen LoRA adapters into linear
//! layers behind a trainable top-k gate, with three numerically
//! interchangeable forward kernels (per-adapter loop, fully batched
//! gather, cache-blocked fused), gate training under a joint language +
//! classification loss, and a small decoder-only transformer that
//! demonstrates autonomous adapter selection and switching on composite
//! inputs.

pub mod artifact;
pub mod bench;
pub mod error;
pub mod lora;
pub mod model;
pub mod moe;
pub mod rng;
pub mod routing;
pub mod tape;
pub mod train;
pub mod tasks;
pub mod trace;
pub mod tensor;

pub use artifact::Artifact;
pub use error::{Error, Result};
pub use lora::{lora_forward, LoraAdapter, LoraBank};
pub use rng::Rng;
pub use model::{Site, SiteMode, TapeMode, ToyModel, ToyModelConfig};
pub use moe::{forward_batched, forward_blocked, forward_loop, AllocReport, ForwardOutput, MeteoraLayer, Strategy, TokenBatch};
pub use routing::{route, GatingNetwork, RoutingConfig, RoutingDecision};
pub use tasks::{GateSample, SyntheticTask, TaskKind};
pub use train::{gate_ce_loss, grad_check, joint_loss, top1_loss, train_adapter, train_gates, LossMode, TrainConfig};
pub use tensor::{softmax, topk, Element, Tensor};
pub use trace::{RoutingTrace, SwitchReport};
