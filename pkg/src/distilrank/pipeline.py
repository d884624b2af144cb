"""Training pipelines: teacher fine-tuning, Standard KD, two-stage
TinyBERT-style distillation, and the one-step variants.

Batch shuffles are derived from (seed, epoch) only, so every pipeline
mode consumes the identical training-pair sequence for a given seed; the
step count is then the honest cost difference between schedules.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint, init_student_from_teacher
from .encoder import Encoder, EncoderConfig
from .losses import (
    STANDARD_KD_GRID,
    KDHyper,
    LossError,
    ProjectionSet,
    combine_loss,
    hard_loss,
    intermediate_losses,
    soft_loss,
    uniform_layer_map,
)
from .metrics import mrr
from .optim import Adam, PoisonedStepError
from .rank import rerank_run
from .tensor import ContractError

PIPELINE_MODES = (
    "standard_kd",
    "tinybert_two_stage",
    "simplified_one_step",
    "ablation_hard_only",
    "ablation_one_step_only",
)


class DivergenceError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"training diverged (non-finite loss) at step {step}")
        self.step = step


@dataclass(frozen=True)
class DistillPlan:
    mode: str
    epochs: int = 2
    batch_size_finetune: int = 128
    batch_size_prediction: int = 128
    batch_size_intermediate: int = 64
    desk_scale: int = 1               # divides every batch size, min 1
    lr_prediction: float = 1e-6
    lr_intermediate: float = 5e-5
    weight_decay: float = 0.01
    temperature: float = 1.0
    init_from_first_k: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.mode not in PIPELINE_MODES:
            raise ValueError(f"unknown pipeline mode {self.mode!r}")
        if self.desk_scale < 1:
            raise ValueError("desk_scale must be >= 1")

    def batch(self, base: int) -> int:
        return max(1, base // self.desk_scale)


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 7919 + epoch]).permutation(n)


def _pad_batch(pairs):
    width = max(len(p.input_ids) for p in pairs)
    tok = np.zeros((len(pairs), width), dtype=np.int64)
    seg = np.zeros((len(pairs), width), dtype=np.int64)
    mask = np.zeros((len(pairs), width))
    labels = np.empty(len(pairs), dtype=np.int64)
    for i, p in enumerate(pairs):
        tok[i, :len(p.input_ids)] = p.input_ids
        seg[i, :len(p.segment_ids)] = p.segment_ids
        mask[i, :len(p.input_ids)] = 1.0
        labels[i] = p.label
    return tok, seg, mask, labels


def _cached_teacher_logits(pairs) -> np.ndarray:
    logits = np.empty((len(pairs), 2))
    for i, p in enumerate(pairs):
        if p.teacher_logits is None:
            raise ContractError(
                "training pair lacks cached teacher logits; rebuild pairs "
                "with a teacher"
            )
        logits[i] = p.teacher_logits
    return logits


def _run_stage(
    student: Encoder,
    teacher: Encoder | None,
    pairs: list,
    loss_mode: str,
    epochs: int,
    batch_size: int,
    lr: float,
    plan: DistillPlan,
    projections: ProjectionSet | None,
    layer_map,
    hyper: KDHyper | None,
    log: list,
    start_step: int,
) -> int:
    """Train `student` in place; returns the global step counter."""
    needs_traces = loss_mode in ("intermediate", "one_step",
                                 "simplified_one_step")
    needs_soft = loss_mode in ("prediction_soft", "prediction_soft_hard",
                               "standard_kd", "one_step",
                               "simplified_one_step")
    needs_hard = loss_mode in ("prediction_soft_hard", "standard_kd",
                               "simplified_one_step")
    params = student.parameters()
    if needs_traces and projections is not None:
        params = params + projections.parameters()
    opt = Adam(params, lr=lr, weight_decay=plan.weight_decay)
    temperature = hyper.temperature if hyper else plan.temperature
    step = start_step
    for epoch in range(epochs):
        order = _epoch_order(plan.seed, epoch, len(pairs))
        for lo in range(0, len(pairs), batch_size):
            batch = [pairs[i] for i in order[lo:lo + batch_size]]
            tok, seg, mask, labels = _pad_batch(batch)
            step += 1
            try:
                s_trace = student.forward(tok, seg, mask, training=True)
                components = {}
                if needs_traces:
                    t_trace = teacher.forward(tok, seg, mask)
                    l_attn, l_hidn, l_emb = intermediate_losses(
                        s_trace, t_trace, layer_map, projections
                    )
                    components.update(l_attn=l_attn, l_hidn=l_hidn,
                                      l_emb=l_emb)
                if needs_soft:
                    t_logits = _cached_teacher_logits(batch)
                    components["l_soft"] = soft_loss(
                        s_trace.logits, t_logits, temperature
                    )
                if needs_hard:
                    components["l_hard"] = hard_loss(s_trace.logits, labels)
                total, breakdown = combine_loss(components, loss_mode, hyper)
                opt.zero_grad()
                total.backward()
                opt.step()
            except (LossError, PoisonedStepError) as exc:
                raise DivergenceError(step) from exc
            record = {"step": step, "mode": plan.mode, "phase": loss_mode,
                      "lr": lr}
            record.update(breakdown.to_dict())
            log.append(record)
    return step


def _fresh_student(plan: DistillPlan, teacher: Checkpoint,
                   student_config: EncoderConfig) -> Encoder:
    if plan.init_from_first_k is not None:
        ckpt = init_student_from_teacher(
            teacher, plan.init_from_first_k, student_config, seed=plan.seed
        )
        return ckpt.to_encoder(trainable=True)
    return Encoder(student_config, seed=plan.seed)


def run_distillation(
    plan: DistillPlan,
    teacher: Checkpoint,
    student_config: EncoderConfig,
    train_pairs: list,
    evaluator=None,
):
    """Execute the plan; returns (student Checkpoint, training log, extras).

    `evaluator` maps an Encoder to validation MRR@10; it is mandatory for
    standard_kd (grid-search selection) and ignored otherwise. The log is
    one dict per optimizer step. `extras` carries the selected KDHyper
    for standard_kd.
    """
    if not train_pairs:
        raise ContractError("train_pairs is empty")
    teacher_enc = teacher.to_encoder(trainable=False)
    log = []
    extras = {}

    if plan.mode == "standard_kd":
        if evaluator is None:
            raise ContractError("standard_kd needs an evaluator for the grid")
        best = None
        # grid order is ascending (T, alpha); ties keep the earlier entry
        for hyper in STANDARD_KD_GRID:
            cand = _fresh_student(plan, teacher, student_config)
            cand_log = []
            _run_stage(cand, None, train_pairs, "standard_kd",
                       plan.epochs, plan.batch(plan.batch_size_prediction),
                       plan.lr_prediction, plan, None, None, hyper,
                       cand_log, 0)
            score = evaluator(cand)
            if best is None or score > best[0]:
                best = (score, hyper, cand, cand_log)
        score, hyper, student, log = best[0], best[1], best[2], best[3]
        extras["selected_hyper"] = hyper
        extras["validation_mrr10"] = score
        return Checkpoint.from_encoder(student), log, extras

    student = _fresh_student(plan, teacher, student_config)
    projections = ProjectionSet.create(
        student_config.hidden_size, teacher.config.hidden_size,
        seed=plan.seed,
    )
    layer_map = uniform_layer_map(
        student_config.num_layers, teacher.config.num_layers
    )
    hyper = KDHyper(temperature=plan.temperature)

    if plan.mode == "tinybert_two_stage":
        step = _run_stage(student, teacher_enc, train_pairs, "intermediate",
                          plan.epochs, plan.batch(plan.batch_size_intermediate),
                          plan.lr_intermediate, plan, projections, layer_map,
                          hyper, log, 0)
        _run_stage(student, None, train_pairs, "prediction_soft",
                   plan.epochs, plan.batch(plan.batch_size_prediction),
                   plan.lr_prediction, plan, None, None, hyper, log, step)
    elif plan.mode == "ablation_hard_only":
        # hard labels applied in the prediction step only
        step = _run_stage(student, teacher_enc, train_pairs, "intermediate",
                          plan.epochs, plan.batch(plan.batch_size_intermediate),
                          plan.lr_intermediate, plan, projections, layer_map,
                          hyper, log, 0)
        _run_stage(student, None, train_pairs, "prediction_soft_hard",
                   plan.epochs, plan.batch(plan.batch_size_prediction),
                   plan.lr_prediction, plan, None, None, hyper, log, step)
    elif plan.mode == "ablation_one_step_only":
        _run_stage(student, teacher_enc, train_pairs, "one_step",
                   plan.epochs, plan.batch(plan.batch_size_intermediate),
                   plan.lr_intermediate, plan, projections, layer_map, hyper,
                   log, 0)
    elif plan.mode == "simplified_one_step":
        _run_stage(student, teacher_enc, train_pairs, "simplified_one_step",
                   plan.epochs, plan.batch(plan.batch_size_intermediate),
                   plan.lr_intermediate, plan, projections, layer_map, hyper,
                   log, 0)
    return Checkpoint.from_encoder(student), log, extras


def general_distillation(
    plan: DistillPlan,
    teacher: Checkpoint,
    student_config: EncoderConfig,
    pairs: list,
):
    """General-stage distillation: intermediate losses only, any teacher.

    Optional at desk scale; first-k initialization is the sanctioned
    substitute when widths allow it.
    """
    teacher_enc = teacher.to_encoder(trainable=False)
    student = Encoder(student_config, seed=plan.seed)
    projections = ProjectionSet.create(
        student_config.hidden_size, teacher.config.hidden_size, seed=plan.seed
    )
    layer_map = uniform_layer_map(
        student_config.num_layers, teacher.config.num_layers
    )
    log = []
    _run_stage(student, teacher_enc, pairs, "intermediate", plan.epochs,
               plan.batch(plan.batch_size_intermediate), plan.lr_intermediate,
               plan, projections, layer_map, KDHyper(), log, 0)
    return Checkpoint.from_encoder(student), log


def make_mrr10_evaluator(collection, qids, cfg, vocab, depth: int | None = None):
    """Validation-side MRR@10 of an encoder re-ranking `qids`."""
    from .dataio import run_to_rankings

    def evaluate(model: Encoder) -> float:
        records = rerank_run(model, collection.queries, collection.candidates,
                             collection.docs, depth, cfg, vocab, qids=qids)
        rankings = run_to_rankings(records)
        return mrr(rankings, collection.qrels, cutoff=10).mean

    return evaluate


def finetune(
    config: EncoderConfig,
    pairs: list,
    epochs: int = 2,
    batch_size: int = 128,
    lr: float = 1e-6,
    weight_decay: float = 0.01,
    seed: int = 0,
):
    """Fine-tune a fresh encoder on hard labels (teacher bootstrap)."""
    if not pairs:
        raise ContractError("no training pairs")
    model = Encoder(config, seed=seed)
    opt = Adam(model.parameters(), lr=lr, weight_decay=weight_decay)
    log = []
    step = 0
    for epoch in range(epochs):
        order = _epoch_order(seed, epoch, len(pairs))
        for lo in range(0, len(pairs), batch_size):
            batch = [pairs[i] for i in order[lo:lo + batch_size]]
            tok, seg, mask, labels = _pad_batch(batch)
            step += 1
            try:
                trace = model.forward(tok, seg, mask, training=True)
                loss = hard_loss(trace.logits, labels)
                value = loss.item()
                if not np.isfinite(value):
                    raise LossError("non-finite fine-tuning loss")
                opt.zero_grad()
                loss.backward()
                opt.step()
            except (LossError, PoisonedStepError) as exc:
                raise DivergenceError(step) from exc
            log.append({"step": step, "mode": "finetune", "phase": "hard",
                        "lr": lr, "l_hard": value, "total": value})
    return Checkpoint.from_encoder(model), log
