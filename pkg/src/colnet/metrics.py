"""Per-label, micro and macro F1."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .relgraph import MULTICLASS


def decide_labels(probs: np.ndarray, head_kind: str = MULTICLASS, threshold: float = 0.5) -> np.ndarray:
    """Boolean (entities x labels) decisions.

    Multiclass takes the arg-max (lowest index wins ties); multilabel keeps
    every label at or above ``threshold``.
    """
    probs = np.asarray(probs)
    if head_kind == MULTICLASS:
        out = np.zeros(probs.shape, dtype=bool)
        out[np.arange(len(probs)), np.argmax(probs, axis=1)] = True
        return out
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must be in (0, 1), got {threshold}")
    return probs >= threshold


def _f1(tp, fp, fn):
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def _ratio(a, b):
    return a / b if b else 0.0


@dataclass
class EvalReport:
    labels: list
    tp: list
    fp: list
    fn: list
    meta: dict = field(default_factory=dict)

    @property
    def precision(self):
        return [_ratio(t, t + f) for t, f in zip(self.tp, self.fp)]

    @property
    def recall(self):
        return [_ratio(t, t + f) for t, f in zip(self.tp, self.fn)]

    @property
    def f1(self):
        return [_f1(*c) for c in zip(self.tp, self.fp, self.fn)]

    @property
    def micro_f1(self) -> float:
        return _f1(sum(self.tp), sum(self.fp), sum(self.fn))

    @property
    def macro_f1(self) -> float:
        f = self.f1
        return float(sum(f) / len(f)) if f else 0.0

    @property
    def positive_f1(self):
        """F1 of the second label for two-label tasks, else ``None``."""
        return self.f1[1] if len(self.labels) == 2 else None

    def metric(self, name: str) -> float:
        if name == "micro":
            return self.micro_f1
        if name == "macro":
            return self.macro_f1
        if name == "positive":
            return self.positive_f1
        raise ConfigError(f"unknown metric {name!r}")

    def to_dict(self) -> dict:
        rows = [
            {"label": lab, "tp": int(t), "fp": int(f_), "fn": int(n),
             "precision": p, "recall": r, "f1": f}
            for lab, t, f_, n, p, r, f in zip(self.labels, self.tp, self.fp, self.fn,
                                             self.precision, self.recall, self.f1)
        ]
        out = {"labels": rows, "micro_f1": self.micro_f1, "macro_f1": self.macro_f1}
        if self.positive_f1 is not None:
            out["positive_f1"] = self.positive_f1
        out["meta"] = self.meta
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        lines = [f"{'label':<16}{'precision':>10}{'recall':>10}{'f1':>10}{'support':>9}"]
        for lab, p, r, f, t, n in zip(self.labels, self.precision, self.recall, self.f1,
                                      self.tp, self.fn):
            lines.append(f"{lab:<16}{p:>10.4f}{r:>10.4f}{f:>10.4f}{t + n:>9d}")
        lines.append(f"micro-F1 {self.micro_f1:.4f}")
        lines.append(f"macro-F1 {self.macro_f1:.4f}")
        if self.positive_f1 is not None:
            lines.append(f"positive-class F1 {self.positive_f1:.4f}")
        for k in sorted(self.meta):
            lines.append(f"{k} {self.meta[k]}")
        return "\n".join(lines) + "\n"


def f1_scores(decided: np.ndarray, truth: np.ndarray, mask: np.ndarray | None = None,
              labels: list | None = None, meta: dict | None = None) -> EvalReport:
    """Confusion counts over the entities selected by boolean ``mask``."""
    decided = np.asarray(decided, dtype=bool)
    truth = np.asarray(truth) > 0
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        decided, truth = decided[mask], truth[mask]
    if len(decided) == 0:
        raise ConfigError("cannot score an empty role")
    tp = np.sum(decided & truth, axis=0)
    fp = np.sum(decided & ~truth, axis=0)
    fn = np.sum(~decided & truth, axis=0)
    if labels is None:
        labels = [str(k) for k in range(decided.shape[1])]
    return EvalReport(list(labels), tp.tolist(), fp.tolist(), fn.tolist(), dict(meta or {}))
