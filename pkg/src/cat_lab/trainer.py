"""Training orchestration: warm-up, counterfactual steps, evaluation.

A run is: K plain empirical-risk steps to warm the model up, then
counterfactual steps until the step budget T is exhausted.  One
counterfactual step

  1. forwards the batch, caching hidden states at the blend layer;
  2. builds an interpolation plan and optimizes its coefficients
     adversarially (model parameters frozen, coefficients only);
  3. recomputes counterfactual predictions at the final coefficients and
     turns original/counterfactual confidence ratios into bounded weights;
  4. takes a weighted-risk update, then a plain empirical-risk update
     (sequential mode), or a single update on their sum (combined mode).

Determinism: every random draw comes from generators seeded by the config,
so identical (config, seed) reproduce the metrics history bit for bit.
"""

from __future__ import annotations

import csv
import json
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from cat_lab import autodiff as ad
from cat_lab.adversarial import AdversarialConfig, optimize_lambda
from cat_lab.autodiff import GradientMap, Tape, Tensor, backward
from cat_lab.datagen import CLASSIFICATION, SPAN, Dataset
from cat_lab.encoder import EncoderModel, ModelConfig
from cat_lab.mixing import (
    NON_ANSWER_CONTEXT,
    USE_I,
    BetaParams,
    MixPlan,
    build_mix_plan,
    interpolate,
    qa_position_mask,
    resolve_attention_mask,
)
from cat_lab.risk import RiskConfig, erm_loss, importance_weights, crm_loss

SEQUENTIAL = "sequential"
COMBINED = "combined"

CAT = "cat"
CAT_STAR = "cat-star"
ERM = "erm"
ALGORITHMS = (CAT, CAT_STAR, ERM)

METRIC_COLUMNS = (
    "step",
    "phase",
    "erm_loss",
    "crm_loss",
    "mean_abs_lambda",
    "mean_weight",
    "cal_param_delta",
)


@contextmanager
def frozen_parameters(model: EncoderModel):
    """Stop gradient flow into the model inside the adversarial inner loop.

    The loop differentiates with respect to the blend coefficients only, so
    recording parameter parents there is pure waste (their gradients would
    be discarded).
    """
    params = list(model.parameters().values())
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p in params:
            p.requires_grad = True


class DivergenceError(RuntimeError):
    """A loss went non-finite; carries the last good parameter snapshot."""

    def __init__(self, message, history=None, last_good=None):
        super().__init__(message)
        self.history = history or []
        self.last_good = last_good


@dataclass
class TrainConfig:
    algorithm: str = CAT
    warmup_steps: int | None = None   # None -> warmup_epochs
    max_steps: int | None = None      # total steps incl. warm-up; None -> epochs
    epochs: float = 3.0
    warmup_epochs: float = 1.0
    batch_size: int = 8
    base_lr: float = 1e-3
    crm_lr: float = 1e-3
    lr_warmup_steps: int = 100        # linear ramp of both rates, stabilizes Adam
    grad_clip: float | None = 1.0     # global-norm clip; None disables
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    candidate_layers: tuple = (2, 3)
    beta: BetaParams = field(default_factory=BetaParams)
    adversarial: AdversarialConfig = field(default_factory=AdversarialConfig)
    risk: RiskConfig = field(default_factory=RiskConfig)
    update_mode: str = SEQUENTIAL
    mask_strategy: str = USE_I
    span_mix_strategy: str = NON_ANSWER_CONTEXT
    per_sample_layer: bool = False
    cross_batch_partners: bool = False
    seed: int = 0
    eval_interval: int = 0            # 0 = evaluate only at the end
    eval_batch_size: int = 256
    track_param_freeze: bool = True

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.update_mode not in (SEQUENTIAL, COMBINED):
            raise ValueError(f"unknown update mode {self.update_mode!r}")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if not self.candidate_layers:
            raise ValueError("candidate layer set must be nonempty")


def resolve_schedule(config: TrainConfig, n_train: int) -> tuple[int, int]:
    """Concrete (warmup steps, total steps) from epochs or explicit counts."""
    steps_per_epoch = max(1, int(np.ceil(n_train / config.batch_size)))
    warmup = (config.warmup_steps if config.warmup_steps is not None
              else round(config.warmup_epochs * steps_per_epoch))
    total = (config.max_steps if config.max_steps is not None
             else round(config.epochs * steps_per_epoch))
    if warmup > total:
        raise ValueError(f"warm-up steps {warmup} exceed total steps {total}")
    return warmup, total


class Adam:
    """Adaptive-moment optimizer with global-norm clipping."""

    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.999, eps=1e-8,
                 grad_clip: float | None = None):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.grad_clip = grad_clip
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: GradientMap, lr: float) -> None:
        self.t += 1
        live = [(name, p, grads.get(p)) for name, p in self.params.items()]
        live = [(name, p, g.data) for name, p, g in live if g is not None]
        scale = 1.0
        if self.grad_clip is not None:
            norm = np.sqrt(sum(float(np.sum(g * g)) for _, _, g in live))
            if norm > self.grad_clip:
                scale = self.grad_clip / norm
        correct1 = 1.0 - self.beta1**self.t
        correct2 = 1.0 - self.beta2**self.t
        for name, p, gd in live:
            if scale != 1.0:
                gd = gd * scale
            m = self._m[name] = self.beta1 * self._m[name] + (1 - self.beta1) * gd
            v = self._v[name] = self.beta2 * self._v[name] + (1 - self.beta2) * gd * gd
            update = (m / correct1) / (np.sqrt(v / correct2) + self.eps)
            p.data = p.data - lr * update


class Trainer:
    """Owns one model, one optimizer, and the step loop state."""

    def __init__(self, model: EncoderModel, config: TrainConfig, task: str,
                 rng: np.random.Generator | None = None):
        if task not in (CLASSIFICATION, SPAN):
            raise ValueError(f"unknown task {task!r}")
        if task == SPAN and not model.config.use_span_head:
            raise ValueError("span task requires a model with the span head")
        n_layers = model.config.n_layers
        for q in config.candidate_layers:
            if not 1 <= q <= n_layers:
                raise ValueError(
                    f"candidate layer {q} outside valid range [1, {n_layers}]"
                )
        self.model = model
        self.config = config
        self.task = task
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.adam = Adam(model.parameters(), config.adam_beta1, config.adam_beta2,
                         config.adam_eps, grad_clip=config.grad_clip)
        # the no-inner-steps ablation reuses the full pipeline with zero ascent
        self.adv_config = (replace(config.adversarial, steps=0)
                           if config.algorithm == CAT_STAR else config.adversarial)
        self.step_count = 0
        self.history: list[dict] = []
        self._epoch_order: np.ndarray | None = None
        self._cursor = 0

    # -- batching -----------------------------------------------------------

    def next_batch_indices(self, n: int) -> np.ndarray:
        size = self.config.batch_size
        if self._epoch_order is None or self._cursor >= n:
            self._epoch_order = self.rng.permutation(n)
            self._cursor = 0
        idx = self._epoch_order[self._cursor : self._cursor + size]
        self._cursor += size
        return idx

    # -- task plumbing --------------------------------------------------------

    def _labels(self, dataset: Dataset, idx: np.ndarray):
        if self.task == SPAN:
            return dataset.spans[idx, 0], dataset.spans[idx, 1]
        return dataset.labels[idx]

    def _head(self, h_last: Tensor, mask):
        if self.task == SPAN:
            return self.model.span_logits(h_last, mask)
        return self.model.classify(h_last, mask)

    def _probs(self, outputs):
        if self.task == SPAN:
            return ad.softmax(outputs[0]), ad.softmax(outputs[1])
        return ad.softmax(outputs)

    def _position_mask(self, dataset: Dataset, idx: np.ndarray):
        if self.task != SPAN:
            return None
        rows = [
            qa_position_mask(self.config.span_mix_strategy, dataset.segments[i],
                             tuple(dataset.spans[i]))
            for i in idx
        ]
        return np.stack(rows)

    def _make_predict(self, m: int, attn_mask, fill_mask):
        model, n_layers = self.model, self.model.config.n_layers

        def predict(mixed):
            h_last = model.forward_layers(mixed, m, n_layers, attn_mask)
            if self.task == SPAN:
                span_mask = attn_mask if attn_mask is not None else fill_mask
                return model.span_logits(h_last, span_mask)
            return model.classify(h_last, attn_mask)

        return predict

    # -- steps ----------------------------------------------------------------

    def _lr(self, rate: float) -> float:
        ramp = max(1, self.config.lr_warmup_steps)
        return rate * min(1.0, (self.step_count + 1) / ramp)

    def _check_finite(self, name: str, value: float) -> float:
        if not np.isfinite(value):
            raise DivergenceError(
                f"{name} became non-finite at step {self.step_count}",
                history=self.history,
            )
        return value

    def erm_step(self, dataset: Dataset, idx: np.ndarray, phase: str,
                 lr: float | None = None) -> dict:
        tokens = dataset.tokens[idx]
        labels = self._labels(dataset, idx)
        with Tape():
            h0, mask = self.model.embed(tokens)
            h = self.model.forward_layers(h0, 0, self.model.config.n_layers, mask)
            loss = erm_loss(self._head(h, mask), labels)
            grads = backward(loss)
        value = self._check_finite("erm loss", loss.item())
        self.adam.step(grads, self._lr(self.config.base_lr if lr is None else lr))
        self.step_count += 1
        return {
            "step": self.step_count,
            "phase": phase,
            "erm_loss": value,
            "crm_loss": None,
            "mean_abs_lambda": None,
            "mean_weight": None,
            "cal_param_delta": None,
        }

    def _counterfactual_states(self, dataset: Dataset, idx, h_stage, mask, tape):
        """Partner hidden states per blend layer, in-batch or cross-batch."""
        if not self.config.cross_batch_partners:
            return None, None
        n = len(dataset)
        partner_idx = self.rng.integers(0, n, size=idx.size)
        with tape:
            h0, partner_mask = self.model.embed(dataset.tokens[partner_idx])
            partner_stage = {}
            h, prev = h0, 0
            for m in sorted(h_stage):
                h = self.model.forward_layers(h, prev, m, partner_mask)
                partner_stage[m] = h
                prev = m
        return partner_stage, partner_mask

    def cat_step(self, dataset: Dataset, idx: np.ndarray) -> dict:
        cfg = self.config
        model = self.model
        n_layers = model.config.n_layers
        tokens = dataset.tokens[idx]
        labels = self._labels(dataset, idx)
        position_mask = self._position_mask(dataset, idx)

        plan = build_mix_plan(
            idx.size, cfg.candidate_layers, cfg.beta, self.rng,
            per_sample_layer=cfg.per_sample_layer,
            mask_strategy=cfg.mask_strategy, position_mask=position_mask,
        )
        blend_layers = sorted(set(plan.mix_layers.tolist()))

        # original forward, caching states at every blend layer
        tape = Tape()
        with tape:
            h0, mask = model.embed(tokens)
            h_stage, h, prev = {}, h0, 0
            for m in blend_layers:
                h = model.forward_layers(h, prev, m, mask)
                h_stage[m] = h
                prev = m
            h_last = model.forward_layers(h, prev, n_layers, mask)
            outputs = self._head(h_last, mask)

        partner_stage, partner_mask = self._counterfactual_states(
            dataset, idx, h_stage, mask, tape
        )

        # inner adversarial loop on detached states; parameters must not move
        before = model.snapshot() if cfg.track_param_freeze else None
        lam = plan.lam.copy()
        groups = [(m, np.flatnonzero(plan.mix_layers == m)) for m in blend_layers]
        for m, rows in groups:
            h_i = Tensor(h_stage[m].data[rows])
            if partner_stage is None:
                h_j = Tensor(h_stage[m].data[plan.partner[rows]])
                mask_j = mask[plan.partner[rows]]
            else:
                h_j = Tensor(partner_stage[m].data[rows])
                mask_j = partner_mask[rows]
            cf_mask = resolve_attention_mask(
                cfg.mask_strategy, mask[rows], mask_j, m, n_layers
            )
            predict = self._make_predict(m, cf_mask, mask[rows])
            sub_labels = (tuple(l[rows] for l in labels) if self.task == SPAN
                          else labels[rows])
            sub_pm = None if position_mask is None else position_mask[rows]
            sub_plan = replace(plan, partner=plan.partner[rows], lam=lam[rows],
                               mix_layers=plan.mix_layers[rows], position_mask=sub_pm)
            with frozen_parameters(model):
                optimized = optimize_lambda(
                    sub_plan, h_i, h_j, sub_labels, predict, self.adv_config, sub_pm
                )
            lam[rows] = optimized.lam
        plan = replace(plan, lam=lam)

        cal_param_delta = None
        if cfg.track_param_freeze:
            cal_param_delta = float(sum(
                np.abs(model.parameters()[k].data - v).sum()
                for k, v in before.items()
            ))

        # counterfactual predictions at the final coefficients, spliced onto
        # the original tape so attached weights stay differentiable
        with tape:
            cf_parts, order = [], []
            for m, rows in groups:
                h_i = ad.gather(h_stage[m], rows)
                if partner_stage is None:
                    h_j = ad.gather(h_stage[m], plan.partner[rows])
                    mask_j = mask[plan.partner[rows]]
                else:
                    h_j = ad.gather(partner_stage[m], rows)
                    mask_j = partner_mask[rows]
                cf_mask = resolve_attention_mask(
                    cfg.mask_strategy, mask[rows], mask_j, m, n_layers
                )
                sub_pm = None if position_mask is None else position_mask[rows]
                mixed = interpolate(h_i, h_j, lam[rows], sub_pm)
                predict = self._make_predict(m, cf_mask, mask[rows])
                cf_parts.append(predict(mixed))
                order.append(rows)
            inverse = np.argsort(np.concatenate(order))
            if self.task == SPAN:
                cf_outputs = (
                    ad.gather(ad.concat([p[0] for p in cf_parts], axis=0), inverse),
                    ad.gather(ad.concat([p[1] for p in cf_parts], axis=0), inverse),
                )
            else:
                cf_outputs = ad.gather(ad.concat(cf_parts, axis=0), inverse)

            weights = importance_weights(
                self._probs(outputs), self._probs(cf_outputs), cfg.risk,
                labels=labels,
            )
            crm = crm_loss(outputs, labels, weights)
            if cfg.update_mode == COMBINED:
                erm_same = erm_loss(outputs, labels)
                total = ad.add(crm, erm_same)
                grads = backward(total)
            else:
                grads = backward(crm)

        crm_value = self._check_finite("crm loss", crm.item())
        if cfg.update_mode == COMBINED:
            erm_value = self._check_finite("erm loss", erm_same.item())
            self.adam.step(grads, self._lr(cfg.base_lr))
        else:
            self.adam.step(grads, self._lr(cfg.crm_lr))
            # fresh forward: the empirical step sees the post-update parameters
            with Tape():
                h0b, mask_b = model.embed(tokens)
                h_b = model.forward_layers(h0b, 0, n_layers, mask_b)
                erm = erm_loss(self._head(h_b, mask_b), labels)
                grads_erm = backward(erm)
            erm_value = self._check_finite("erm loss", erm.item())
            self.adam.step(grads_erm, self._lr(cfg.base_lr))

        self.step_count += 1
        return {
            "step": self.step_count,
            "phase": "cat",
            "erm_loss": erm_value,
            "crm_loss": crm_value,
            "mean_abs_lambda": float(np.mean(np.abs(plan.lam))),
            "mean_weight": float(weights.bounded.data.mean()),
            "cal_param_delta": cal_param_delta,
        }

    # -- loop -----------------------------------------------------------------

    def train(self, train_set: Dataset, eval_sets: dict[str, Dataset] | None = None):
        cfg = self.config
        warmup, total = resolve_schedule(cfg, len(train_set))
        eval_sets = eval_sets or {}
        last_good = self.model.snapshot()
        while self.step_count < total:
            idx = self.next_batch_indices(len(train_set))
            try:
                if cfg.algorithm == ERM:
                    row = self.erm_step(train_set, idx, phase="erm")
                elif self.step_count < warmup:
                    row = self.erm_step(train_set, idx, phase="warmup")
                else:
                    row = self.cat_step(train_set, idx)
            except DivergenceError as exc:
                exc.last_good = last_good
                raise
            last_good = self.model.snapshot()
            should_eval = (cfg.eval_interval > 0
                           and self.step_count % cfg.eval_interval == 0)
            if should_eval or self.step_count == total:
                for name, ds in eval_sets.items():
                    report = evaluate(self.model, ds, self.task,
                                      batch_size=cfg.eval_batch_size)
                    for metric, value in report.items():
                        row[f"eval_{name}_{metric}"] = value
            self.history.append(row)
        return self.history


def train(model_config: ModelConfig, config: TrainConfig, train_set: Dataset,
          eval_sets: dict[str, Dataset] | None = None,
          task: str | None = None) -> tuple[EncoderModel, list[dict]]:
    """Build a model from the seed and run the configured algorithm."""
    task = task or train_set.task
    seq = np.random.SeedSequence(config.seed)
    model_rng, trainer_rng = (np.random.default_rng(s) for s in seq.spawn(2))
    model = EncoderModel(model_config, model_rng)
    trainer = Trainer(model, config, task, rng=trainer_rng)
    history = trainer.train(train_set, eval_sets)
    return model, history


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _decode_spans(start_logits: np.ndarray, end_logits: np.ndarray,
                  segments: np.ndarray | None, max_len: int) -> np.ndarray:
    b, s = start_logits.shape
    scores = start_logits[:, :, None] + end_logits[:, None, :]
    si, ei = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
    invalid = (ei < si) | (ei - si >= max_len)
    scores[:, invalid] = -np.inf
    if segments is not None:
        ctx = segments == 1
        scores[~ctx[:, :, None] & np.ones((b, s, s), dtype=bool)] = -np.inf
        scores[~ctx[:, None, :] & np.ones((b, s, s), dtype=bool)] = -np.inf
    flat = scores.reshape(b, -1).argmax(axis=1)
    return np.stack([flat // s, flat % s], axis=1)


def span_f1(predicted: np.ndarray, gold: np.ndarray) -> np.ndarray:
    """Token-overlap F1 per sample for inclusive spans."""
    lo = np.maximum(predicted[:, 0], gold[:, 0])
    hi = np.minimum(predicted[:, 1], gold[:, 1])
    overlap = np.maximum(0, hi - lo + 1)
    pred_len = predicted[:, 1] - predicted[:, 0] + 1
    gold_len = gold[:, 1] - gold[:, 0] + 1
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = overlap / pred_len
        recall = overlap / gold_len
        f1 = np.where(overlap > 0,
                      2 * precision * recall / (precision + recall), 0.0)
    return f1


def evaluate(model: EncoderModel, dataset: Dataset, task: str,
             batch_size: int = 256, max_answer_len: int = 8) -> dict:
    """Accuracy for classification; exact match and token F1 for spans."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    n = len(dataset)
    correct = 0.0
    em = 0.0
    f1_total = 0.0
    for lo in range(0, n, batch_size):
        idx = np.arange(lo, min(lo + batch_size, n))
        tokens = dataset.tokens[idx]
        h0, mask = model.embed(tokens)
        h = model.forward_layers(h0, 0, model.config.n_layers, mask)
        if task == CLASSIFICATION:
            logits = model.classify(h, mask).data
            correct += float(np.sum(logits.argmax(axis=1) == dataset.labels[idx]))
        else:
            start, end = model.span_logits(h, mask)
            segments = None if dataset.segments is None else dataset.segments[idx]
            predicted = _decode_spans(start.data, end.data, segments, max_answer_len)
            gold = dataset.spans[idx]
            em += float(np.sum(np.all(predicted == gold, axis=1)))
            f1_total += float(np.sum(span_f1(predicted, gold)))
    if task == CLASSIFICATION:
        return {"accuracy": correct / n, "n": n}
    return {"em": em / n, "f1": f1_total / n, "n": n}


# ---------------------------------------------------------------------------
# metrics serialization
# ---------------------------------------------------------------------------


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_metrics_csv(history: list[dict], path) -> None:
    extra = sorted({k for row in history for k in row} - set(METRIC_COLUMNS))
    columns = list(METRIC_COLUMNS) + extra
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in history:
            writer.writerow([_format_cell(row.get(c)) for c in columns])


def summarize_run(model_config: ModelConfig, config: TrainConfig,
                  history: list[dict], final_eval: dict,
                  wall_clock: float | None = None) -> dict:
    summary = {
        "model_config": asdict(model_config),
        "train_config": asdict(config),
        "seed": config.seed,
        "steps": history[-1]["step"] if history else 0,
        "final_eval": final_eval,
    }
    if wall_clock is not None:
        summary["wall_clock_seconds"] = wall_clock
    return summary


def write_summary_json(summary: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, default=list)
        fh.write("\n")
