"""Cross-branch attention injection between paired frame and event blocks.

The frame branch receives the event branch's raw score map (time-averaged,
divided by the window token count, head-averaged) as an additive
pre-softmax term. The event branch receives the frame branch's
post-softmax map (head-averaged, shared by every timestep) added to its
raw scores.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

from .errors import ConfigError
from .numcore import Tensor, as_tensor, ops, scope

ANN_START_STAGE = 3


@dataclass(frozen=True)
class InteractionConfig:
    lam3: float = 0.3  # frame -> event
    lam4: float = 0.2  # event -> frame
    n_layers: int = 4
    start_stage: int = ANN_START_STAGE  # 1-based
    enabled: bool = True

    def __post_init__(self):
        if self.n_layers < 0:
            raise ConfigError(f"n_layers must be >= 0, got {self.n_layers}")
        if self.start_stage < 1:
            raise ConfigError(f"start_stage is 1-based, got {self.start_stage}")


def attention_kernel_mean(a, head_axis: int = -3) -> Tensor:
    """Average an attention map over its head axis, keeping it as size 1."""
    return ops.mean(as_tensor(a), axis=head_axis, keepdims=True)


KERNELS: dict[str, Callable] = {"mean": attention_kernel_mean}


def temporal_align(a, steps: Optional[int] = None) -> Tensor:
    """Reconcile the time axis between branches.

    With ``steps`` unset, average a (T, ...) event map over T. With
    ``steps`` set, repeat a frame map identically for each step.
    """
    a = as_tensor(a)
    if steps is None:
        if a.ndim < 1 or a.shape[0] < 1:
            raise ConfigError("temporal_align needs T >= 1")
        return ops.mean(a, axis=0)
    return ops.stack([a] * steps, 0)


def inject(receiver, sender, lam: float, kernel: Callable = attention_kernel_mean) -> Tensor:
    """``receiver + lam * kernel(sender)``, broadcasting the kernel output over heads."""
    receiver = as_tensor(receiver)
    term = interaction_term(sender, lam, kernel)
    if term.shape[-4] != receiver.shape[-4]:
        raise ConfigError(f"window count mismatch: receiver {receiver.shape[-4]} vs sender {term.shape[-4]}")
    return receiver + term


def interaction_term(sender, lam: float, kernel: Callable = attention_kernel_mean) -> Tensor:
    return kernel(sender) * lam


def event_to_frame_term(scores, lam4: float, kernel: Callable = attention_kernel_mean) -> Tensor:
    """(T, B*nW, H, N, N) raw event scores -> (B*nW, 1, N, N) frame logit term."""
    scores = as_tensor(scores)
    n = scores.shape[-1]
    return interaction_term(temporal_align(scores) * (1.0 / n), lam4, kernel)


def frame_to_event_term(weights, lam3: float, kernel: Callable = attention_kernel_mean) -> Tensor:
    """(B*nW, H, N, N) frame attention -> (B*nW, 1, N, N), shared by all timesteps."""
    return interaction_term(weights, lam3, kernel)


def interaction_schedule(config: InteractionConfig, depths: Sequence[int],
                         kinds: Optional[Sequence[str]] = None) -> list[tuple[int, int]]:
    """The first ``n_layers`` blocks from ``start_stage`` onward as 0-based (stage, block) pairs.

    Frame block (s, b) is paired with event block (s, b).
    """
    if not config.enabled or config.n_layers == 0:
        return []
    start = config.start_stage - 1
    slots = [(s, b) for s in range(start, len(depths)) for b in range(depths[s])]
    if config.n_layers > len(slots):
        raise ConfigError(f"n_layers={config.n_layers} exceeds the {len(slots)} blocks from stage "
                          f"{config.start_stage} onward")
    chosen = slots[:config.n_layers]
    if kinds is not None:
        for s, _ in chosen:
            if kinds[s] != "ssa":
                raise ConfigError(f"stage {s + 1} uses {kinds[s]} blocks, which have no pairwise map")
    return chosen


def interact(ann_block, snn_block, x_ann: Tensor, z_snn: Tensor, config: InteractionConfig):
    """Run one paired block in both branches with mutual injection.

    Both sides read the partner's map from this forward pass, before the
    partner's own injection.
    """
    kernel = KERNELS["mean"]
    with scope("ann"):
        a_state = ann_block.begin(x_ann)
        weights = ann_block.attention_map(a_state)
    with scope("snn"):
        s_state = snn_block.begin(z_snn)
        scores = snn_block.attention_map(s_state)
    if weights.shape[0] != scores.shape[1]:
        raise ConfigError(f"window count mismatch: frame {weights.shape[0]} vs event {scores.shape[1]}")
    with scope("interaction"):
        to_ann = event_to_frame_term(scores, config.lam4, kernel)
        to_snn = frame_to_event_term(weights, config.lam3, kernel)
    with scope("ann"):
        x_out = ann_block.finish(a_state, to_ann)
    with scope("snn"):
        z_out = snn_block.finish(s_state, to_snn)
    return x_out, z_out
