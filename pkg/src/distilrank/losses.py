"""Distillation loss family: soft/hard prediction losses, the three
intermediate MSE losses, and the mode-specific combinations.

Combinations:
  intermediate          l_attn + l_hidn + l_emb
  prediction_soft       l_soft
  prediction_soft_hard  l_soft + l_hard
  standard_kd           alpha * l_soft + (1 - alpha) * l_hard
  one_step              l_attn + l_hidn + l_emb + l_soft
  simplified_one_step   l_attn + l_hidn + l_emb + l_soft + l_hard

All sums are unweighted; the hard loss always uses temperature 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import EncoderTrace
from .tensor import ContractError, Tensor, log_softmax, mse, softmax


@dataclass(frozen=True)
class KDHyper:
    temperature: float = 1.0
    alpha: float = 0.5

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0,1], got {self.alpha}")


# grid searched for standard KD model selection
STANDARD_KD_GRID = [
    KDHyper(temperature=t, alpha=a)
    for t in (1.0, 5.0, 10.0)
    for a in (0.2, 0.5, 0.7)
]


@dataclass(frozen=True)
class LayerMap:
    student_layers: int
    teacher_layers: int
    mapping: tuple  # mapping[m-1] = teacher layer for student layer m, 1-based

    def __post_init__(self):
        g = self.mapping
        if len(g) != self.student_layers:
            raise ValueError("mapping length != student_layers")
        if any(b <= a for a, b in zip(g, g[1:])):
            raise ValueError("mapping must be strictly increasing")
        if g[-1] != self.teacher_layers:
            raise ValueError("last student layer must map to the last teacher layer")


class UnsupportedMapError(ValueError):
    pass


def uniform_layer_map(student_layers: int, teacher_layers: int) -> LayerMap:
    """g(m) = m * M/N; requires the teacher depth to be a multiple."""
    if teacher_layers % student_layers != 0:
        raise UnsupportedMapError(
            f"teacher depth {teacher_layers} not divisible by "
            f"student depth {student_layers}"
        )
    step = teacher_layers // student_layers
    return LayerMap(
        student_layers=student_layers,
        teacher_layers=teacher_layers,
        mapping=tuple(m * step for m in range(1, student_layers + 1)),
    )


class ProjectionSet:
    """Width adapters for the hidden and embedding losses.

    Identity and frozen when student and teacher widths match, so
    same-width distillation has an exact zero-loss fixed point; trainable
    with symmetric uniform fan-in init otherwise.
    """

    def __init__(self, hidden_proj: Tensor, embed_proj: Tensor, trainable: bool):
        self.hidden_proj = hidden_proj
        self.embed_proj = embed_proj
        self.trainable = trainable

    @staticmethod
    def create(student_hidden: int, teacher_hidden: int, seed: int = 0
               ) -> "ProjectionSet":
        if student_hidden == teacher_hidden:
            eye = np.eye(student_hidden)
            return ProjectionSet(Tensor(eye.copy()), Tensor(eye.copy()),
                                 trainable=False)
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(student_hidden)
        shape = (student_hidden, teacher_hidden)
        w_h = Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)
        w_e = Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)
        return ProjectionSet(w_h, w_e, trainable=True)

    def parameters(self) -> list:
        return [self.hidden_proj, self.embed_proj] if self.trainable else []


@dataclass
class LossBreakdown:
    l_attn: float = 0.0
    l_hidn: float = 0.0
    l_emb: float = 0.0
    l_soft: float = 0.0
    l_hard: float = 0.0
    total: float = 0.0

    def to_dict(self) -> dict:
        return {
            "l_attn": self.l_attn,
            "l_hidn": self.l_hidn,
            "l_emb": self.l_emb,
            "l_soft": self.l_soft,
            "l_hard": self.l_hard,
            "total": self.total,
        }


class LossError(RuntimeError):
    pass


def soft_loss(student_logits: Tensor, teacher_logits, temperature: float = 1.0
              ) -> Tensor:
    """Cross-entropy against the temperature-softened teacher distribution.

    The teacher side is gradient-detached; the result carries the usual
    T^2 factor so gradient magnitudes stay comparable across temperatures.
    """
    if temperature <= 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    t_data = teacher_logits.data if isinstance(teacher_logits, Tensor) \
        else np.asarray(teacher_logits, dtype=np.float64)
    if t_data.shape != student_logits.shape:
        raise ContractError(
            f"logit shapes disagree: {student_logits.shape} vs {t_data.shape}"
        )
    if not (np.all(np.isfinite(t_data)) and
            np.all(np.isfinite(student_logits.data))):
        raise LossError("non-finite logits in soft loss")
    target = softmax(Tensor(t_data / temperature), axis=-1)  # detached
    log_p = log_softmax(student_logits * (1.0 / temperature), axis=-1)
    ce = -(target * log_p).sum(axis=-1)
    return ce.mean() * (temperature ** 2) if ce.ndim > 0 else ce * (temperature ** 2)


def hard_loss(student_logits: Tensor, labels) -> Tensor:
    """Negative log-likelihood of the ground-truth class at temperature 1."""
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    logits = student_logits if student_logits.ndim == 2 \
        else student_logits.reshape(1, -1)
    num_classes = logits.shape[-1]
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise ContractError(f"label out of range [0, {num_classes})")
    if labels.shape[0] != logits.shape[0]:
        raise ContractError("label count != batch size")
    log_p = log_softmax(logits, axis=-1)
    picked = log_p[np.arange(labels.shape[0]), labels]
    return -picked.mean()


def _head_aligned(scores_s: Tensor, scores_t: Tensor):
    """Average attention scores over heads when the head counts differ."""
    if scores_s.shape[1] == scores_t.shape[1]:
        return scores_s, scores_t
    return scores_s.mean(axis=1, keepdims=True), scores_t.mean(axis=1, keepdims=True)


def intermediate_losses(
    student_trace: EncoderTrace,
    teacher_trace: EncoderTrace,
    layer_map: LayerMap,
    projections: ProjectionSet,
):
    """(l_attn, l_hidn, l_emb) between student and teacher traces.

    PAD positions are masked out of every mean: attention entries where
    either the query or key position is PAD, and hidden/embedding rows at
    PAD positions.
    """
    if len(student_trace.hidden_states) != layer_map.student_layers:
        raise ContractError("student trace depth != layer map")
    if len(teacher_trace.hidden_states) != layer_map.teacher_layers:
        raise ContractError("teacher trace depth != layer map")
    if not np.array_equal(student_trace.attention_mask,
                          teacher_trace.attention_mask):
        raise ContractError("traces come from different inputs (masks differ)")

    mask = student_trace.attention_mask  # [B, S]
    attn_mask = mask[:, None, :, None] * mask[:, None, None, :]  # [B,1,S,S]
    row_mask = mask[:, :, None]  # [B, S, 1]

    from .tensor import matmul  # local import avoids a cycle at module load

    attn_terms = []
    hidn_terms = []
    for m, t_layer in enumerate(layer_map.mapping, start=1):
        s_scores = student_trace.attention_scores[m - 1]
        t_scores = teacher_trace.attention_scores[t_layer - 1]
        s_scores, t_scores = _head_aligned(s_scores, t_scores.detach())
        attn_terms.append(mse(s_scores, t_scores, mask=attn_mask))
        s_hidden = matmul(student_trace.hidden_states[m - 1],
                          projections.hidden_proj)
        t_hidden = teacher_trace.hidden_states[t_layer - 1].detach()
        hidn_terms.append(mse(s_hidden, t_hidden, mask=row_mask))

    n = len(attn_terms)
    l_attn = attn_terms[0]
    l_hidn = hidn_terms[0]
    for term in attn_terms[1:]:
        l_attn = l_attn + term
    for term in hidn_terms[1:]:
        l_hidn = l_hidn + term
    l_attn = l_attn * (1.0 / n)
    l_hidn = l_hidn * (1.0 / n)

    s_emb = matmul(student_trace.embedding_output, projections.embed_proj)
    l_emb = mse(s_emb, teacher_trace.embedding_output.detach(), mask=row_mask)
    return l_attn, l_hidn, l_emb


MODES = (
    "intermediate",
    "prediction_soft",
    "prediction_soft_hard",
    "standard_kd",
    "one_step",
    "simplified_one_step",
)

_REQUIRED = {
    "intermediate": ("l_attn", "l_hidn", "l_emb"),
    "prediction_soft": ("l_soft",),
    "prediction_soft_hard": ("l_soft", "l_hard"),
    "standard_kd": ("l_soft", "l_hard"),
    "one_step": ("l_attn", "l_hidn", "l_emb", "l_soft"),
    "simplified_one_step": ("l_attn", "l_hidn", "l_emb", "l_soft", "l_hard"),
}


def combine_loss(components: dict, mode: str, hyper: KDHyper | None = None):
    """Total loss tensor plus a float LossBreakdown for logging.

    `components` maps names in {l_attn, l_hidn, l_emb, l_soft, l_hard}
    to scalar tensors; only the ones the mode needs must be present.
    """
    if mode not in _REQUIRED:
        raise ContractError(f"unknown loss mode {mode!r}")
    missing = [k for k in _REQUIRED[mode] if k not in components]
    if missing:
        raise ContractError(f"mode {mode!r} missing components {missing}")

    c = components
    if mode == "standard_kd":
        if hyper is None:
            raise ContractError("standard_kd requires KDHyper")
        total = c["l_soft"] * hyper.alpha + c["l_hard"] * (1.0 - hyper.alpha)
    else:
        total = None
        for k in _REQUIRED[mode]:
            total = c[k] if total is None else total + c[k]

    breakdown = LossBreakdown(total=total.item())
    for k in _REQUIRED[mode]:
        setattr(breakdown, k, c[k].item())
    if not np.isfinite(breakdown.total):
        raise LossError(f"non-finite total loss in mode {mode!r}")
    return total, breakdown
